#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace liverperf::oracles {

namespace {

constexpr double kPi = std::numbers::pi;

double volume(const TetMesh& m, std::size_t t) { return std::abs(mesh::tet_signed_volume(m, t)); }

Vec3 centroid(const TetMesh& m, std::size_t t) {
    Vec3 c = Vec3::Zero();
    for (int v : m.tets[t]) c += m.vertices[std::size_t(v)];
    return 0.25 * c;
}

// Boundary triangles of the mesh on the plane x = x0, as (cell, area).
std::vector<std::pair<int, double>> faces_on_plane(const TetMesh& m, double x0) {
    std::vector<std::pair<int, double>> out;
    for (std::size_t t = 0; t < m.tets.size(); ++t)
        for (int skip = 0; skip < 4; ++skip) {
            std::vector<Vec3> p;
            for (int k = 0; k < 4; ++k)
                if (k != skip) p.push_back(m.vertices[std::size_t(m.tets[t][std::size_t(k)])]);
            if (std::abs(p[0].x() - x0) < 1e-12 && std::abs(p[1].x() - x0) < 1e-12 && std::abs(p[2].x() - x0) < 1e-12)
                out.emplace_back(int(t), 0.5 * (p[1] - p[0]).cross(p[2] - p[0]).norm());
        }
    return out;
}

}  // namespace

GridGeometry box(int nx, int ny, int nz, double spacing) {
    GridGeometry g;
    g.dims = {nx, ny, nz};
    g.spacing = Vec3::Constant(spacing);
    return g;
}

// Segmentation --------------------------------------------------------------

double brute_force_min_cut(const seg::FlowNetwork& net) {
    const int inner = net.node_count - 2;
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::uint8_t> side(std::size_t(net.node_count), 0);
    for (std::uint32_t bits = 0; bits < (1U << inner); ++bits) {
        for (int v = 0; v < inner; ++v) side[std::size_t(v)] = (bits >> v) & 1U;
        side[std::size_t(net.source)] = 1;
        side[std::size_t(net.sink)] = 0;
        best = std::min(best, seg::cut_capacity(net, side));
    }
    return best;
}

seg::FlowNetwork random_network(int inner, Rng& rng) {
    seg::FlowNetwork net(inner);
    for (int u = 0; u < net.node_count; ++u)
        for (int v = 0; v < net.node_count; ++v)
            if (u != v && v != net.source && u != net.sink && rng.uniform() < 0.35)
                net.add_arc(u, v, std::floor(rng.uniform(0.0, 20.0) * 8.0) / 8.0);
    return net;
}

Exhaustive exhaustive_min(const VoxelGrid& g, const seg::SeedSet& seeds, const seg::GmmModel& fg,
                          const seg::GmmModel& bg, const seg::SegmentationParams& p) {
    std::vector<int> state(g.geom.size(), 0);
    for (const auto& s : seeds.foreground) state[g.geom.linear(s)] = 1;
    for (const auto& s : seeds.background) state[g.geom.linear(s)] = -1;
    std::vector<std::size_t> free;
    for (std::size_t i = 0; i < state.size(); ++i)
        if (state[i] == 0) free.push_back(i);
    Exhaustive best{std::numeric_limits<double>::infinity(), BinaryMask(g.geom)};
    BinaryMask m(g.geom);
    for (std::size_t i = 0; i < state.size(); ++i) m.values[i] = state[i] > 0;
    for (std::uint32_t bits = 0; bits < (1U << free.size()); ++bits) {
        for (std::size_t f = 0; f < free.size(); ++f) m.values[free[f]] = (bits >> f) & 1U;
        const double e = seg::energy(m, g, fg, bg, p);
        if (e < best.energy) best = {e, m};
    }
    return best;
}

// Meshing -------------------------------------------------------------------

BinaryMask sphere_mask(int n, double r, double spacing) {
    PhantomSpec s;
    s.geom = box(n, n, n, spacing);
    s.center = Vec3::Constant((n - 1) / 2.0 * spacing);
    s.radius = r;
    return voxelio::phantom_mask(s);
}

std::vector<BinaryMask> phantom_masks() {
    std::vector<BinaryMask> out;
    out.push_back(sphere_mask(24, 10.0));
    PhantomSpec e;
    e.kind = voxelio::PhantomKind::ellipsoid;
    e.geom = box(20, 20, 20);
    e.geom.spacing = Vec3(1.0, 0.8, 1.5);
    e.center = Vec3(9.5, 7.6, 14.0);
    e.semi_axes = Vec3(8.0, 5.0, 9.0);
    out.push_back(voxelio::phantom_mask(e));
    out.push_back(voxelio::phantom_mask(tube(Vec3(3, 4, 5), Vec3(16, 15, 14), 2.5, box(20, 20, 20))));
    out.push_back(voxelio::phantom_mask(
        y_tube(Vec3(12, 12, 12), Vec3(12, 3, 12), Vec3(4, 20, 12), Vec3(20, 20, 12), 2.0, box(24, 24, 24))));
    return out;
}

BinaryMask random_mask(int n, std::uint64_t seed, double p) {
    BinaryMask m(box(n, n, n));
    Rng rng(seed);
    for (auto& v : m.values) v = rng.uniform() < p ? 1 : 0;
    return m;
}

bool every_edge_twice(const mesh::SurfaceMesh& m) {
    for (const auto& [e, n] : mesh::edge_incidence(m))
        if (n != 2) return false;
    return true;
}

// Skeletons -----------------------------------------------------------------

PhantomSpec tube(const Vec3& a, const Vec3& b, double r, const GridGeometry& g) {
    PhantomSpec s;
    s.kind = voxelio::PhantomKind::tube;
    s.geom = g;
    s.points = {a, b};
    s.radius = r;
    return s;
}

PhantomSpec y_tube(const Vec3& j, const Vec3& e1, const Vec3& e2, const Vec3& e3, double r, const GridGeometry& g) {
    PhantomSpec s;
    s.kind = voxelio::PhantomKind::y_tube;
    s.geom = g;
    s.points = {j, e1, e2, e3};
    s.radius = r;
    return s;
}

Census census(const BinaryMask& skel) {
    Census c;
    const auto& g = skel.geom;
    for (std::size_t s = 0; s < g.size(); ++s) {
        if (!skel.values[s]) continue;
        const auto [i, j, k] = g.unravel(s);
        const int n = vessel::neighbour_count(skel, i, j, k);
        if (n <= 1) ++c.endpoints;
        if (n >= 3) ++c.branches;
    }
    return c;
}

bool subset(const BinaryMask& a, const BinaryMask& b) {
    for (std::size_t s = 0; s < a.values.size(); ++s)
        if (a.values[s] && !b.values[s]) return false;
    return true;
}

TopologyCase topology_case(int n, Rng& rng) {
    const GridGeometry g = box(36, 36, 36);
    auto rand_point = [&] { return Vec3(rng.uniform(5, 30), rng.uniform(5, 30), rng.uniform(5, 30)); };
    const double r = rng.uniform(1.5, 3.0);
    if (n % 2 == 0) {
        Vec3 a = rand_point(), b = rand_point();
        while ((a - b).norm() < 15) b = rand_point();
        return {tube(a, b, r, g), 2};
    }
    const Vec3 j = Vec3(18, 18, 18) + Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    // Arms at least 10 mm long and 60 degrees apart.
    std::vector<Vec3> ends;
    while (ends.size() < 3) {
        const Vec3 e = rand_point();
        if ((e - j).norm() < 10) continue;
        bool apart = true;
        for (const auto& o : ends) apart = apart && (e - j).normalized().dot((o - j).normalized()) < 0.5;
        if (apart) ends.push_back(e);
    }
    return {y_tube(j, ends[0], ends[1], ends[2], r, g), 3};
}

bool skeleton_matches(const TopologyCase& c) {
    const BinaryMask mask = voxelio::phantom_mask(c.spec);
    const BinaryMask sm = vessel::skeletonize(mask).mask();
    const Census n = census(sm);
    return subset(sm, mask) && vessel::foreground_components(sm) == vessel::foreground_components(mask) &&
           vessel::background_components(sm) == vessel::background_components(mask) && n.endpoints == c.endpoints &&
           (c.endpoints == 2 ? n.branches == 0 : n.branches >= 1);
}

// Trees ---------------------------------------------------------------------

double murray_residual(const VascularTree& t, double gamma) {
    const tree::Topology top = tree::topology(t);
    double worst = 0.0;
    for (std::size_t v = 0; v < t.nodes.size(); ++v) {
        const int pe = top.parent_edge[v];
        if (pe < 0 || top.children[v].empty()) continue;
        const double rp = std::pow(t.edges[std::size_t(pe)].radius, gamma);
        double rc = 0.0;
        for (int ce : top.children[v]) rc += std::pow(t.edges[std::size_t(ce)].radius, gamma);
        worst = std::max(worst, std::abs(rp - rc) / rp);
    }
    return worst;
}

VascularTree one_segment_stub(const Vec3& a, const Vec3& b) {
    VascularTree t;
    t.root = t.add_node(a, tree::NodeKind::root);
    const int e = t.add_node(b, tree::NodeKind::branching);
    t.add_edge(t.root, e);
    return t;
}

// 1D flow -------------------------------------------------------------------

VascularTree random_flow_tree(int splits, std::uint64_t seed) {
    Rng rng(seed);
    VascularTree t;
    t.root = t.add_node(Vec3(0, 0, 0), tree::NodeKind::root);
    const int first = t.add_node(Vec3(0, 0, 20), tree::NodeKind::terminal);
    t.add_edge(t.root, first, 4.0);
    std::vector<int> leaves = {first};
    std::vector<double> leaf_radius = {4.0};
    for (int s = 0; s < splits; ++s) {
        const std::size_t pick = rng.index(leaves.size());
        const int v = leaves[pick];
        const double r = leaf_radius[pick];
        leaves.erase(leaves.begin() + long(pick));
        leaf_radius.erase(leaf_radius.begin() + long(pick));
        t.nodes[std::size_t(v)].kind = tree::NodeKind::branching;
        for (int c = 0; c < 2; ++c) {
            const Vec3 x = t.nodes[std::size_t(v)].position +
                           Vec3(rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(8, 20));
            const int w = t.add_node(x, tree::NodeKind::terminal);
            const double rc = r * rng.uniform(0.7, 0.9);
            t.add_edge(v, w, rc);
            leaves.push_back(w);
            leaf_radius.push_back(rc);
        }
    }
    return t;
}

Manufactured manufactured(const VascularTree& t, double w0, std::uint64_t seed, const flow1d::FluidProps& f) {
    Rng rng(seed);
    const tree::Topology top = tree::topology(t);
    Manufactured m;
    m.w.assign(t.edges.size(), 0.0);
    m.p.assign(t.nodes.size(), 0.0);
    std::vector<double> q(t.edges.size(), 0.0);
    auto area = [&](int e) { return kPi * std::pow(t.edges[std::size_t(e)].radius * 1e-3, 2); };
    const int root_edge = top.children[std::size_t(t.root)][0];
    q[std::size_t(root_edge)] = area(root_edge) * w0;
    m.p[std::size_t(t.root)] = 2000.0;
    for (int v : top.preorder) {
        const int pe = top.parent_edge[std::size_t(v)];
        const auto& kids = top.children[std::size_t(v)];
        if (pe >= 0 && !kids.empty()) {
            std::vector<double> share;
            double total = 0.0;
            for (std::size_t c = 0; c < kids.size(); ++c) {
                share.push_back(rng.uniform(0.3, 0.7));
                total += share.back();
            }
            for (std::size_t c = 0; c < kids.size(); ++c) q[std::size_t(kids[c])] = q[std::size_t(pe)] * share[c] / total;
        }
        for (int ce : kids) {
            const auto& e = t.edges[std::size_t(ce)];
            const double w = q[std::size_t(ce)] / area(ce);
            const double wi = pe < 0 ? w : m.w[std::size_t(pe)];
            m.w[std::size_t(ce)] = w;
            m.p[std::size_t(e.child)] = m.p[std::size_t(v)] + 0.5 * f.density * (wi * wi - w * w) -
                                        flow1d::branch_loss(w, e.length * 1e-3, 2e-3 * e.radius, f);
        }
    }
    for (std::size_t v = 0; v < t.nodes.size(); ++v)
        if (top.children[v].empty()) m.terminal_pressures[int(v)] = m.p[v];
    return m;
}

VascularTree bifurcation(double r0, double r1, double r2, const Vec3& a, const Vec3& b) {
    VascularTree t;
    t.root = t.add_node(Vec3(0, 0, 0), tree::NodeKind::root);
    const int j = t.add_node(Vec3(0, 0, 30));
    t.add_edge(t.root, j, r0);
    t.add_edge(j, t.add_node(a, tree::NodeKind::terminal), r1);
    t.add_edge(j, t.add_node(b, tree::NodeKind::terminal), r2);
    return t;
}

std::array<double, 2> bifurcation_grid_search(const VascularTree& t, double w0, const std::map<int, double>& pk,
                                              const flow1d::FluidProps& f) {
    // For trial (w1, w2) the junction pressure follows from each child edge;
    // mismatch and mass imbalance form the residual.
    const auto& e0 = t.edges[0];
    const auto& e1 = t.edges[1];
    const auto& e2 = t.edges[2];
    const double a0 = kPi * e0.radius * e0.radius * 1e-6, a1 = kPi * e1.radius * e1.radius * 1e-6,
                 a2 = kPi * e2.radius * e2.radius * 1e-6;
    const double d1 = 2e-3 * e1.radius, d2 = 2e-3 * e2.radius;
    const double l1 = e1.length * 1e-3, l2 = e2.length * 1e-3;
    const double p1 = pk.at(e1.child), p2 = pk.at(e2.child);
    const double rho = f.density;
    auto res = [&](double w1, double w2) {
        const double pj1 = p1 + 0.5 * rho * w1 * w1 + 32 * f.viscosity * l1 * w1 / (d1 * d1) - 0.5 * rho * w0 * w0;
        const double pj2 = p2 + 0.5 * rho * w2 * w2 + 32 * f.viscosity * l2 * w2 / (d2 * d2) - 0.5 * rho * w0 * w0;
        const double mass = (a0 * w0 - a1 * w1 - a2 * w2) / a0;
        return std::hypot(pj1 - pj2, 1e3 * mass);
    };
    double c1 = w0, c2 = w0, half = 0.5;
    for (int level = 0; level < 40; ++level) {
        double best = std::numeric_limits<double>::infinity(), b1 = c1, b2 = c2;
        for (int i = -20; i <= 20; ++i)
            for (int j = -20; j <= 20; ++j) {
                const double w1 = c1 + half * i / 20.0, w2 = c2 + half * j / 20.0;
                const double r = res(w1, w2);
                if (r < best) {
                    best = r;
                    b1 = w1;
                    b2 = w2;
                }
            }
        c1 = b1;
        c2 = b2;
        half *= 0.5;
    }
    return {c1, c2};
}

double telescoped_residual(const VascularTree& t, const flow1d::TreeFlowState& s, const std::map<int, double>& pk,
                           const flow1d::FluidProps& f) {
    const tree::Topology top = tree::topology(t);
    double worst = 0.0;
    for (const auto& [k, p] : pk) {
        double loss = 0.0;
        for (int v = k; v != t.root; v = t.edges[std::size_t(top.parent_edge[std::size_t(v)])].parent) {
            const int pe = top.parent_edge[std::size_t(v)];
            const auto& e = t.edges[std::size_t(pe)];
            loss += flow1d::branch_loss(s.w[std::size_t(pe)], e.length * 1e-3, 2e-3 * e.radius, f);
        }
        const double wk = s.w[std::size_t(top.parent_edge[std::size_t(k)])];
        const double lhs = 0.5 * f.density * s.w0 * s.w0 + s.p[std::size_t(t.root)];
        const double rhs = 0.5 * f.density * wk * wk + p + loss;
        worst = std::max(worst, std::abs(lhs - rhs));
    }
    return worst;
}

double jacobian_fd_error(const flow1d::FlowSystem& sys, const Eigen::VectorXd& x) {
    const Eigen::MatrixXd j = Eigen::MatrixXd(sys.jacobian(x));
    double worst = 0.0;
    for (Eigen::Index c = 0; c < x.size(); ++c) {
        const double h = 1e-6 * std::max(1.0, std::abs(x[c]));
        Eigen::VectorXd xp = x, xm = x;
        xp[c] += h;
        xm[c] -= h;
        const Eigen::VectorXd fd = (sys.residual(xp) - sys.residual(xm)) / (2.0 * h);
        const double scale = std::max(j.col(c).cwiseAbs().maxCoeff(), 1e-30);
        worst = std::max(worst, (fd - j.col(c)).cwiseAbs().maxCoeff() / scale);
    }
    return worst;
}

// Darcy ---------------------------------------------------------------------

Mat3 random_spd(Rng& rng) {
    Mat3 b;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) b(i, j) = rng.uniform(-1, 1);
    return b * b.transpose() + 0.5 * Mat3::Identity();
}

darcy::CompartmentSystem single(const TetMesh& m, const Mat3& k) {
    darcy::CompartmentSystem s;
    s.mesh = m;
    s.compartments.push_back({"c", k, {}});
    s.coupling = Eigen::MatrixXd::Zero(1, 1);
    return s;
}

bool on_box_boundary(const Vec3& x, const Vec3& lo, const Vec3& hi) {
    for (int a = 0; a < 3; ++a)
        if (std::abs(x[a] - lo[a]) < 1e-12 || std::abs(x[a] - hi[a]) < 1e-12) return true;
    return false;
}

double patch_test_error(std::uint64_t seed) {
    Rng rng(seed);
    const Vec3 lo(0, 0, 0), h(0.7, 1.1, 0.9);
    const TetMesh m = mesh::box_tet_mesh({4, 3, 5}, h, lo);
    const Vec3 hi = lo + Vec3(4 * h[0], 3 * h[1], 5 * h[2]);
    const Vec3 a(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const double b = rng.uniform(-5, 5);
    darcy::CompartmentSystem s = single(m, random_spd(rng));
    s.fixed.resize(1);
    for (std::size_t v = 0; v < m.vertices.size(); ++v)
        if (on_box_boundary(m.vertices[v], lo, hi)) s.fixed[0][int(v)] = a.dot(m.vertices[v]) + b;
    const darcy::PressureField p = darcy::solve_pressure(s);
    double worst = 0.0;
    for (std::size_t v = 0; v < m.vertices.size(); ++v)
        worst = std::max(worst, std::abs(p.p[0][Eigen::Index(v)] - (a.dot(m.vertices[v]) + b)));
    return worst;
}

double uniform_exchange_error(std::uint64_t seed) {
    Rng rng(seed);
    const TetMesh m = mesh::box_tet_mesh({3, 4, 3}, Vec3(1.0, 0.5, 2.0));
    darcy::CompartmentSystem s;
    s.mesh = m;
    s.compartments = {{"a", random_spd(rng), {}}, {"b", random_spd(rng), {}}};
    const double g = rng.uniform(0.1, 1.0), src = rng.uniform(0.5, 2.0);
    s.coupling = Eigen::MatrixXd::Zero(2, 2);
    s.coupling(0, 1) = s.coupling(1, 0) = g;
    const Eigen::VectorXd f = darcy::load_vector(m, [&](const Vec3&) { return src; });
    s.sources = {f, -f};
    const darcy::PressureField p = darcy::solve_pressure(s);
    return ((p.p[0] - p.p[1]).array() - src / g).abs().maxCoeff();
}

double neumann_identity(std::uint64_t seed) {
    Rng rng(seed);
    const TetMesh m = mesh::box_tet_mesh({4, 4, 4}, Vec3(1.0, 1.0, 1.0));
    darcy::CompartmentSystem s = darcy::three_compartment_system(m, {2.0, 1.0, 0.5}, 0.3, 0.1);
    const Eigen::Index nv = Eigen::Index(m.vertices.size());
    s.sources.assign(3, Eigen::VectorXd::Zero(nv));
    for (int i = 0; i < 3; ++i)
        for (Eigen::Index v = 0; v < nv; ++v) s.sources[std::size_t(i)][v] = rng.uniform(-1, 1);
    double total = 0.0;
    for (const auto& f : s.sources) total += f.sum();
    s.sources[1].array() -= total / double(nv);
    const darcy::PressureField p = darcy::solve_pressure(s);
    const darcy::Assembly a = darcy::assemble(s);
    Eigen::VectorXd x(3 * nv);
    for (int i = 0; i < 3; ++i) x.segment(i * nv, nv) = p.p[std::size_t(i)];
    const Eigen::VectorXd r = a.matrix * x - a.load;
    return std::abs(r.sum()) / a.load.cwiseAbs().sum();
}

std::vector<double> manufactured_l2_errors(const std::vector<int>& ns) {
    const auto exact = [](const Vec3& x) { return std::sin(kPi * x[0]) * std::sin(kPi * x[1]) * std::sin(kPi * x[2]); };
    std::vector<double> errors;
    for (int n : ns) {
        const double h = 1.0 / n;
        const TetMesh m = mesh::box_tet_mesh({n, n, n}, Vec3::Constant(h));
        darcy::CompartmentSystem s = single(m, Mat3::Identity());
        s.sources = {darcy::load_vector(m, [&](const Vec3& x) { return 3.0 * kPi * kPi * exact(x); })};
        s.fixed.resize(1);
        for (std::size_t v = 0; v < m.vertices.size(); ++v)
            if (on_box_boundary(m.vertices[v], Vec3::Zero(), Vec3::Ones())) s.fixed[0][int(v)] = exact(m.vertices[v]);
        const darcy::PressureField p = darcy::solve_pressure(s);
        // Degree-3 rule: centroid weight -4/5, four points 9/20.
        double err2 = 0.0;
        for (std::size_t t = 0; t < m.tets.size(); ++t) {
            auto eval = [&](const std::array<double, 4>& lam) {
                Vec3 x = Vec3::Zero();
                double ph = 0.0;
                for (int c = 0; c < 4; ++c) {
                    x += lam[std::size_t(c)] * m.vertices[std::size_t(m.tets[t][std::size_t(c)])];
                    ph += lam[std::size_t(c)] * p.p[0][m.tets[t][std::size_t(c)]];
                }
                return std::pow(ph - exact(x), 2);
            };
            double e = -0.8 * eval({0.25, 0.25, 0.25, 0.25});
            for (int q = 0; q < 4; ++q) {
                std::array<double, 4> lam;
                lam.fill(1.0 / 6.0);
                lam[std::size_t(q)] = 0.5;
                e += 0.45 * eval(lam);
            }
            err2 += e * volume(m, t);
        }
        errors.push_back(std::sqrt(err2));
    }
    return errors;
}

// Transport -----------------------------------------------------------------

transport::TransportProblem channel(const TetMesh& m, double w, double phi) {
    const transport::FaceTopology faces = transport::build_faces(m);
    darcy::VelocityField vel;
    vel.w.assign(1, std::vector<Vec3>(m.tets.size(), Vec3(w, 0.0, 0.0)));
    double xmax = 0.0;
    for (const Vec3& v : m.vertices) xmax = std::max(xmax, v.x());

    transport::TransportProblem p;
    p.porosity = {phi};
    for (std::size_t t = 0; t < m.tets.size(); ++t) p.volume.push_back(volume(m, t));
    p.face_cells = faces.cells;
    p.inlets.resize(1);
    p.outflow.assign(1, std::vector<double>(m.tets.size(), 0.0));
    std::vector<double> target(m.tets.size(), 0.0);
    for (const auto& [c, a] : faces_on_plane(m, 0.0)) {
        p.inlets[0].push_back({c, w * a, 0.0});
        target[std::size_t(c)] += w * a;
    }
    for (const auto& [c, a] : faces_on_plane(m, xmax)) {
        p.outflow[0][std::size_t(c)] += w * a;
        target[std::size_t(c)] -= w * a;
    }
    p.face_flux = {transport::conservative_fluxes(faces, transport::face_fluxes(faces, vel)[0], target)};
    p.validate();
    return p;
}

transport::TransportProblem exchange_pair(double q, double phi1, double phi2, double v) {
    transport::TransportProblem p;
    p.volume = {v};
    p.porosity = {phi1, phi2};
    p.face_flux = {{}, {}};
    p.inlets = {{transport::Inlet{0, q, 0.0}}, {}};
    p.outflow = {{}, {q}};
    p.exchange = {transport::Exchange{0, 1, {q}}};
    p.validate();
    return p;
}

std::vector<double> exchange_errors(const std::vector<int>& steps) {
    const double q = 1.5, phi1 = 0.2, phi2 = 0.1, v = 2.0, end = 0.5;
    const transport::TransportProblem p = exchange_pair(q, phi1, phi2, v);
    // Closed form with S1(0) = 1, S2(0) = 0 and clean inflow.
    const double a = q / (phi1 * v), b = q / (phi2 * v);
    const double s1 = std::exp(-a * end);
    const double s2 = b / (b - a) * (std::exp(-a * end) - std::exp(-b * end));
    const transport::Bolus clean{{0.0}, {0.0}};
    std::vector<double> err;
    for (int n : steps) {
        const double dt = end / n;
        transport::SaturationField s = transport::zero_field(p);
        s[0][0] = 1.0;
        for (int k = 0; k < n; ++k) s = transport::rk2_step(p, s, k * dt, dt, clean);
        err.push_back(std::max(std::abs(s[0][0] - s1), std::abs(s[1][0] - s2)));
    }
    return err;
}

double front_position(const TetMesh& m, const transport::TransportProblem& p, const Eigen::VectorXd& s, int n) {
    std::vector<double> mass(std::size_t(n), 0.0), vol(std::size_t(n), 0.0);
    for (std::size_t t = 0; t < m.tets.size(); ++t) {
        const auto k = std::size_t(std::floor(centroid(m, t).x()));
        mass[k] += p.volume[t] * s[Eigen::Index(t)];
        vol[k] += p.volume[t];
    }
    for (int k = 0; k + 1 < n; ++k) {
        const double u0 = mass[std::size_t(k)] / vol[std::size_t(k)];
        const double u1 = mass[std::size_t(k + 1)] / vol[std::size_t(k + 1)];
        if (u0 >= 0.5 && u1 < 0.5) return k + 0.5 + (u0 - 0.5) / (u0 - u1);
    }
    return -1.0;
}

darcy::CompartmentSystem box_system(double g12, double g23) {
    const TetMesh m = mesh::box_tet_mesh({6, 3, 3}, Vec3(2.0, 2.0, 2.0));
    darcy::CompartmentSystem sys = darcy::three_compartment_system(m, {50.0, 20.0, 50.0}, g12, g23);
    const int first = 0, last = int(m.vertices.size()) - 1;
    sys.sources.assign(3, Eigen::VectorXd::Zero(Eigen::Index(m.vertices.size())));
    sys.sources[0][first] = 2.0;
    if (g12 > 0.0 && g23 > 0.0) sys.sources[2][last] = -2.0;
    else sys.sources[0][last] = -2.0;
    return sys;
}

}  // namespace liverperf::oracles
