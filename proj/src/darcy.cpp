#include "liverperf/darcy.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <limits>
#include <numeric>
#include <sstream>

namespace liverperf::darcy {

namespace {

std::array<Vec3, 4> tet_points(const TetMesh& m, std::size_t t) {
    const auto& tet = m.tets[t];
    return {m.vertices[std::size_t(tet[0])], m.vertices[std::size_t(tet[1])], m.vertices[std::size_t(tet[2])],
            m.vertices[std::size_t(tet[3])]};
}

double tet_volume(const std::array<Vec3, 4>& x) { return mesh::tet_signed_volume(x[0], x[1], x[2], x[3]); }

bool is_spd(const Mat3& k) {
    if (!k.allFinite() || (k - k.transpose()).cwiseAbs().maxCoeff() > 1e-12 * k.cwiseAbs().maxCoeff()) return false;
    const Eigen::SelfAdjointEigenSolver<Mat3> es(k);
    return es.eigenvalues().minCoeff() > 0.0;
}

constexpr double kM3ToMm3 = 1e9;

}  // namespace

void CompartmentSystem::validate() const {
    const std::size_t n = size(), nv = node_count();
    if (n == 0) throw Error("darcy: no compartments");
    if (mesh.tets.empty()) throw Error("darcy: empty mesh");
    for (std::size_t t = 0; t < mesh.tets.size(); ++t) {
        for (int v : mesh.tets[t])
            if (v < 0 || std::size_t(v) >= nv) throw Error("darcy: tet " + std::to_string(t) + " has a bad vertex");
        if (!(mesh::tet_signed_volume(mesh, t) > 0.0))
            throw Error("darcy: tet " + std::to_string(t) + " is inverted or degenerate");
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = compartments[i];
        if (c.cell_permeability.empty()) {
            if (!is_spd(c.permeability))
                throw Error("darcy: permeability of compartment " + std::to_string(i) + " is not SPD");
        } else {
            if (c.cell_permeability.size() != mesh.tets.size())
                throw Error("darcy: compartment " + std::to_string(i) + " needs one permeability per tet");
            for (std::size_t t = 0; t < c.cell_permeability.size(); ++t)
                if (!is_spd(c.cell_permeability[t]))
                    throw Error("darcy: permeability of compartment " + std::to_string(i) + " in tet " +
                                std::to_string(t) + " is not SPD");
        }
    }
    if (coupling.rows() != Eigen::Index(n) || coupling.cols() != Eigen::Index(n))
        throw Error("darcy: coupling must be " + std::to_string(n) + " x " + std::to_string(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double g = coupling(Eigen::Index(i), Eigen::Index(j));
            if (!(g >= 0.0) || !std::isfinite(g)) throw Error("darcy: coupling entries must be finite and >= 0");
            if (i == j && g != 0.0) throw Error("darcy: coupling diagonal must be zero");
            if (g != coupling(Eigen::Index(j), Eigen::Index(i))) throw Error("darcy: coupling must be symmetric");
        }
    if (!sources.empty()) {
        if (sources.size() != n) throw Error("darcy: need one source vector per compartment");
        for (const auto& s : sources)
            if (s.size() != 0 && std::size_t(s.size()) != nv) throw Error("darcy: source vector has the wrong length");
    }
    if (!fixed.empty()) {
        if (fixed.size() != n) throw Error("darcy: need one fixed set per compartment");
        for (const auto& f : fixed)
            for (const auto& [v, p] : f)
                if (v < 0 || std::size_t(v) >= nv || !std::isfinite(p)) throw Error("darcy: bad fixed pressure");
    }
}

CompartmentSystem three_compartment_system(const TetMesh& mesh, const std::array<double, 3>& k, double g12,
                                           double g23) {
    CompartmentSystem sys;
    sys.mesh = mesh;
    const char* names[] = {"portal", "filtration", "hepatic"};
    for (int i = 0; i < 3; ++i) sys.compartments.push_back({names[i], k[std::size_t(i)] * Mat3::Identity(), {}});
    sys.coupling = Eigen::MatrixXd::Zero(3, 3);
    sys.coupling(0, 1) = sys.coupling(1, 0) = g12;
    sys.coupling(1, 2) = sys.coupling(2, 1) = g23;
    return sys;
}

std::array<Vec3, 4> basis_gradients(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    Mat3 j;
    j.col(0) = b - a;
    j.col(1) = c - a;
    j.col(2) = d - a;
    const Mat3 inv = j.inverse();
    std::array<Vec3, 4> g;
    for (int r = 0; r < 3; ++r) g[std::size_t(r + 1)] = inv.row(r).transpose();
    g[0] = -(g[1] + g[2] + g[3]);
    return g;
}

Eigen::Matrix4d element_stiffness(const std::array<Vec3, 4>& x, const Mat3& k) {
    const auto g = basis_gradients(x[0], x[1], x[2], x[3]);
    const double vol = std::abs(tet_volume(x));
    Eigen::Matrix4d a;
    for (int i = 0; i < 4; ++i)
        for (int j = i; j < 4; ++j) a(i, j) = a(j, i) = vol * g[std::size_t(i)].dot(k * g[std::size_t(j)]);
    return a;
}

Eigen::Matrix4d element_mass(const std::array<Vec3, 4>& x) {
    const double vol = std::abs(tet_volume(x));
    Eigen::Matrix4d m = Eigen::Matrix4d::Constant(vol / 20.0);
    m.diagonal().array() = vol / 10.0;
    return m;
}

Assembly assemble(const CompartmentSystem& sys) {
    sys.validate();
    const std::size_t n = sys.size(), nv = sys.node_count();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(sys.mesh.tets.size() * 16 * n * n);
    for (std::size_t t = 0; t < sys.mesh.tets.size(); ++t) {
        const auto x = tet_points(sys.mesh, t);
        const auto& tet = sys.mesh.tets[t];
        const Eigen::Matrix4d m = element_mass(x);
        for (std::size_t i = 0; i < n; ++i) {
            const Eigen::Matrix4d k = element_stiffness(x, sys.compartments[i].permeability_of(t));
            double gsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) gsum += sys.coupling(Eigen::Index(i), Eigen::Index(j));
            const Eigen::Matrix4d diag = k + gsum * m;
            const std::size_t oi = i * nv;
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) {
                    const int ra = int(oi) + tet[std::size_t(a)], cb = tet[std::size_t(b)];
                    trip.emplace_back(ra, int(oi) + cb, diag(a, b));
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = sys.coupling(Eigen::Index(i), Eigen::Index(j));
                        if (g != 0.0) trip.emplace_back(ra, int(j * nv) + cb, -g * m(a, b));
                    }
                }
        }
    }
    Assembly out;
    const int total = int(n * nv);
    out.matrix.resize(total, total);
    out.matrix.setFromTriplets(trip.begin(), trip.end());
    out.load = Eigen::VectorXd::Zero(total);
    for (std::size_t i = 0; i < sys.sources.size(); ++i)
        if (sys.sources[i].size() != 0) out.load.segment(Eigen::Index(i * nv), Eigen::Index(nv)) = sys.sources[i];
    return out;
}

Eigen::VectorXd load_vector(const TetMesh& mesh, const std::function<double(const Vec3&)>& f) {
    // Degree-2 rule: weights 1/4 at barycentric (a, b, b, b), a = 0.5854..., b = 0.1381...
    const double qa = 0.5854101966249685, qb = 0.1381966011250105;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(Eigen::Index(mesh.vertices.size()));
    for (std::size_t t = 0; t < mesh.tets.size(); ++t) {
        const auto x = tet_points(mesh, t);
        const double vol = std::abs(tet_volume(x));
        for (int q = 0; q < 4; ++q) {
            std::array<double, 4> lam;
            lam.fill(qb);
            lam[std::size_t(q)] = qa;
            Vec3 p = Vec3::Zero();
            for (int c = 0; c < 4; ++c) p += lam[std::size_t(c)] * x[std::size_t(c)];
            const double fv = f(p) * vol / 4.0;
            for (int c = 0; c < 4; ++c) out[mesh.tets[t][std::size_t(c)]] += fv * lam[std::size_t(c)];
        }
    }
    return out;
}

PcgResult pcg(const Eigen::SparseMatrix<double>& a, const Eigen::VectorXd& b, Eigen::VectorXd& x, double rel_tol,
              int max_iter, const std::function<void(Eigen::VectorXd&)>& project) {
    const Eigen::Index n = a.rows();
    if (x.size() != n) x = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd inv_diag = a.diagonal();
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!(inv_diag[i] > 0.0)) throw Error("pcg: non-positive diagonal at row " + std::to_string(i));
        inv_diag[i] = 1.0 / inv_diag[i];
    }
    const double bnorm = b.norm();
    PcgResult res;
    if (bnorm == 0.0) {
        x.setZero();
        return res;
    }
    Eigen::VectorXd r = b - a * x;
    if (project) project(r);
    Eigen::VectorXd z = inv_diag.cwiseProduct(r);
    Eigen::VectorXd d = z;
    double rz = r.dot(z);
    for (int it = 0; it < max_iter; ++it) {
        res.relative_residual = r.norm() / bnorm;
        res.iterations = it;
        if (res.relative_residual < rel_tol) return res;
        const Eigen::VectorXd ad = a * d;
        const double dad = d.dot(ad);
        if (!(dad > 0.0)) throw Error("pcg: breakdown (matrix not positive definite on the search space)");
        const double alpha = rz / dad;
        x += alpha * d;
        r -= alpha * ad;
        if (project) project(r);
        z = inv_diag.cwiseProduct(r);
        const double rz_new = r.dot(z);
        d = z + (rz_new / rz) * d;
        rz = rz_new;
    }
    // Final check with the true residual.
    Eigen::VectorXd rt = b - a * x;
    if (project) project(rt);
    res.relative_residual = rt.norm() / bnorm;
    res.iterations = max_iter;
    if (res.relative_residual < rel_tol) return res;
    throw Error("pcg: stagnated after " + std::to_string(max_iter) + " iterations at relative residual " +
                std::to_string(res.relative_residual));
}

PressureField solve_pressure(const CompartmentSystem& sys, const SolverOptions& opt) {
    const Assembly asmb = assemble(sys);
    const std::size_t n = sys.size(), nv = sys.node_count(), total = n * nv;

    std::vector<std::uint8_t> is_fixed(total, 0);
    Eigen::VectorXd xfix = Eigen::VectorXd::Zero(Eigen::Index(total));
    for (std::size_t i = 0; i < sys.fixed.size(); ++i)
        for (const auto& [v, p] : sys.fixed[i]) {
            is_fixed[i * nv + std::size_t(v)] = 1;
            xfix[Eigen::Index(i * nv + std::size_t(v))] = p;
        }
    std::vector<int> slot(total, -1), dof;
    for (std::size_t k = 0; k < total; ++k)
        if (!is_fixed[k]) {
            slot[k] = int(dof.size());
            dof.push_back(int(k));
        }

    // Reduced system over free dofs; fixed values move to the right side.
    const Eigen::VectorXd shifted = asmb.load - asmb.matrix * xfix;
    std::vector<Eigen::Triplet<double>> trip;
    for (int k = 0; k < asmb.matrix.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(asmb.matrix, k); it; ++it)
            if (slot[std::size_t(it.row())] >= 0 && slot[std::size_t(it.col())] >= 0)
                trip.emplace_back(slot[std::size_t(it.row())], slot[std::size_t(it.col())], it.value());
    const int nf = int(dof.size());
    Eigen::SparseMatrix<double> a(nf, nf);
    a.setFromTriplets(trip.begin(), trip.end());
    Eigen::VectorXd b(nf);
    for (int k = 0; k < nf; ++k) b[k] = shifted[dof[std::size_t(k)]];

    // Components of the full matrix graph; those without a fixed dof are
    // nullspace components.
    std::vector<int> comp(total);
    std::iota(comp.begin(), comp.end(), 0);
    std::function<int(int)> find = [&](int u) {
        while (comp[std::size_t(u)] != u) {
            comp[std::size_t(u)] = comp[std::size_t(comp[std::size_t(u)])];
            u = comp[std::size_t(u)];
        }
        return u;
    };
    for (int k = 0; k < asmb.matrix.outerSize(); ++k)
        for (Eigen::SparseMatrix<double>::InnerIterator it(asmb.matrix, k); it; ++it)
            if (it.value() != 0.0) {
                const int ra = find(int(it.row())), rb = find(int(it.col()));
                if (ra != rb) comp[std::size_t(std::max(ra, rb))] = std::min(ra, rb);
            }
    std::map<int, std::vector<int>> groups;  // root -> free slots
    std::map<int, bool> anchored;
    for (std::size_t k = 0; k < total; ++k) {
        const int r = find(int(k));
        if (is_fixed[k]) anchored[r] = true;
        else groups[r].push_back(slot[k]);
    }
    std::vector<std::vector<int>> nullspace;
    for (auto& [r, members] : groups)
        if (!anchored[r]) nullspace.push_back(members);

    const double scale = b.cwiseAbs().sum();
    for (const auto& members : nullspace) {
        double s = 0.0;
        for (int k : members) s += b[k];
        if (std::abs(s) > 1e-9 * scale)
            throw Error("darcy: incompatible loads, a pure-Neumann component has net source " + std::to_string(s) +
                        " mm^3/s");
    }
    auto project = [&](Eigen::VectorXd& v) {
        for (const auto& members : nullspace) {
            double mean = 0.0;
            for (int k : members) mean += v[k];
            mean /= double(members.size());
            for (int k : members) v[k] -= mean;
        }
    };
    project(b);

    Eigen::VectorXd x = Eigen::VectorXd::Zero(nf);
    const PcgResult res = pcg(a, b, x, opt.rel_tol, opt.max_iter, nullspace.empty() ? std::function<void(Eigen::VectorXd&)>{} : project);
    project(x);

    PressureField out;
    out.iterations = res.iterations;
    out.relative_residual = res.relative_residual;
    out.p.assign(n, Eigen::VectorXd::Zero(Eigen::Index(nv)));
    for (std::size_t k = 0; k < total; ++k)
        out.p[k / nv][Eigen::Index(k % nv)] = is_fixed[k] ? xfix[Eigen::Index(k)] : x[slot[k]];
    return out;
}

VelocityField darcy_velocity(const PressureField& p, const CompartmentSystem& sys) {
    VelocityField out;
    out.w.resize(sys.size());
    for (std::size_t i = 0; i < sys.size(); ++i) {
        out.w[i].resize(sys.mesh.tets.size());
        for (std::size_t t = 0; t < sys.mesh.tets.size(); ++t) {
            const auto x = tet_points(sys.mesh, t);
            const auto g = basis_gradients(x[0], x[1], x[2], x[3]);
            Vec3 grad = Vec3::Zero();
            for (int c = 0; c < 4; ++c) grad += p.p[i][sys.mesh.tets[t][std::size_t(c)]] * g[std::size_t(c)];
            out.w[i][t] = -(sys.compartments[i].permeability_of(t) * grad);
        }
    }
    return out;
}

std::vector<int> nearest_vertices(const tree::VascularTree& t, const TetMesh& mesh, double max_distance) {
    const tree::Topology top = tree::topology(t);
    std::vector<int> out;
    for (std::size_t v = 0; v < t.nodes.size(); ++v) {
        if (int(v) == t.root || !top.children[v].empty()) continue;
        int best = -1;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < mesh.vertices.size(); ++k) {
            const double d = (mesh.vertices[k] - t.nodes[v].position).squaredNorm();
            if (d < bd) {
                bd = d;
                best = int(k);
            }
        }
        if (best < 0 || std::sqrt(bd) > max_distance)
            throw Error("darcy: terminal " + std::to_string(v) + " is " + std::to_string(std::sqrt(bd)) +
                        " mm from the mesh (limit " + std::to_string(max_distance) + ")");
        out.push_back(best);
    }
    return out;
}

SourceMap build_sources(const tree::VascularTree& t, const flow1d::TreeFlowState& state, const TetMesh& mesh,
                        double sign, double max_distance) {
    const tree::Topology top = tree::topology(t);
    SourceMap s;
    s.vertices = nearest_vertices(t, mesh, max_distance);
    s.load = Eigen::VectorXd::Zero(Eigen::Index(mesh.vertices.size()));
    for (std::size_t v = 0; v < t.nodes.size(); ++v)
        if (int(v) != t.root && top.children[v].empty()) s.terminals.push_back(int(v));
    for (std::size_t k = 0; k < s.terminals.size(); ++k) {
        const int e = top.parent_edge[std::size_t(s.terminals[k])];
        const double q = sign * state.flow(std::size_t(e)) * kM3ToMm3;
        s.flux.push_back(q);
        s.load[s.vertices[k]] += q;
    }
    return s;
}

std::vector<double> FluxReport::imbalance() const {
    std::vector<double> out;
    for (std::size_t i = 0; i < inflow.size(); ++i) {
        double net = inflow[i] - outflow[i] - boundary[i];
        for (Eigen::Index j = 0; j < exchange.cols(); ++j) net -= exchange(Eigen::Index(i), j);
        out.push_back(net);
    }
    return out;
}

FluxReport flux_report(const CompartmentSystem& sys, const PressureField& p) {
    const Assembly asmb = assemble(sys);
    const std::size_t n = sys.size(), nv = sys.node_count();
    Eigen::VectorXd x(Eigen::Index(n * nv));
    for (std::size_t i = 0; i < n; ++i) x.segment(Eigen::Index(i * nv), Eigen::Index(nv)) = p.p[i];
    // Exchange uses the lumped total of the consistent mass matrix: 1^T M.
    Eigen::VectorXd mass_row = Eigen::VectorXd::Zero(Eigen::Index(nv));
    for (std::size_t t = 0; t < sys.mesh.tets.size(); ++t) {
        const double vol = std::abs(mesh::tet_signed_volume(sys.mesh, t));
        for (int v : sys.mesh.tets[t]) mass_row[v] += vol / 4.0;
    }
    FluxReport r;
    r.exchange = Eigen::MatrixXd::Zero(Eigen::Index(n), Eigen::Index(n));
    const Eigen::VectorXd reaction = asmb.matrix * x - asmb.load;
    for (std::size_t i = 0; i < n; ++i) {
        double in = 0.0, out = 0.0, bnd = 0.0;
        const auto& f = asmb.load;
        for (std::size_t v = 0; v < nv; ++v) {
            const double fv = f[Eigen::Index(i * nv + v)];
            if (fv > 0.0) in += fv;
            else out -= fv;
        }
        if (i < sys.fixed.size())
            for (const auto& [v, pv] : sys.fixed[i]) bnd -= reaction[Eigen::Index(i * nv + std::size_t(v))];
        r.inflow.push_back(in);
        r.outflow.push_back(out);
        r.boundary.push_back(bnd);
        for (std::size_t j = 0; j < n; ++j) {
            const double g = sys.coupling(Eigen::Index(i), Eigen::Index(j));
            if (g != 0.0) r.exchange(Eigen::Index(i), Eigen::Index(j)) = g * mass_row.dot(p.p[i] - p.p[j]);
        }
    }
    return r;
}

namespace {

std::map<int, double> sample_pressures(const SourceMap& s, const Eigen::VectorXd& p) {
    std::map<int, double> out;
    for (std::size_t k = 0; k < s.terminals.size(); ++k) out[s.terminals[k]] = p[s.vertices[k]];
    return out;
}

// Drainage tree: solved in the outflow orientation (velocity positive
// towards the root, pressures mirrored), then returned with the parent to
// child sign convention, so velocities are negative.
flow1d::TreeFlowState solve_drainage(const tree::VascularTree& t, double w_out, const std::map<int, double>& p_terminal,
                                     const flow1d::FluidProps& props) {
    std::map<int, double> mirrored;
    for (const auto& [v, p] : p_terminal) mirrored[v] = -p;
    flow1d::TreeFlowState s = flow1d::solve_tree_flow(t, w_out, mirrored, props);
    for (double& w : s.w) w = -w;
    for (double& p : s.p) p = -p;
    s.w0 = -s.w0;
    return s;
}

double root_area_mm2(const tree::VascularTree& t) {
    const tree::Topology top = tree::topology(t);
    if (top.children[std::size_t(t.root)].size() != 1) throw Error("couple: the root must have exactly one child");
    const double r = t.edges[std::size_t(top.children[std::size_t(t.root)][0])].radius;
    return std::numbers::pi * r * r;
}

}  // namespace

CoupledResult couple_1d_3d(const tree::VascularTree& portal, const tree::VascularTree& hepatic,
                           const CompartmentSystem& sys, const flow1d::FluidProps& props, double w0_portal,
                           const CouplingOptions& opt) {
    sys.validate();
    if (!(opt.relaxation > 0.0 && opt.relaxation <= 1.0)) throw Error("couple: relaxation must be in (0, 1]");
    if (!(w0_portal > 0.0)) throw Error("couple: portal inflow velocity must be > 0");
    const std::size_t ip = opt.portal_compartment;
    const std::size_t ih = opt.hepatic_compartment.value_or(sys.size() - 1);
    if (ip >= sys.size() || ih >= sys.size() || ip == ih) throw Error("couple: bad compartment indices");

    CoupledResult res;
    res.system = sys;
    res.system.fixed.clear();
    res.system.sources.assign(sys.size(), Eigen::VectorXd::Zero(Eigen::Index(sys.node_count())));
    res.portal_inflow = root_area_mm2(portal) * w0_portal * 1e3;  // mm^2 * m/s -> mm^3/s
    const double w_out_hepatic = res.portal_inflow / (root_area_mm2(hepatic) * 1e3);

    // Start from uniform terminal pressures.
    auto zero_pressures = [](const tree::VascularTree& t) {
        const tree::Topology top = tree::topology(t);
        std::map<int, double> out;
        for (std::size_t v = 0; v < t.nodes.size(); ++v)
            if (int(v) != t.root && top.children[v].empty()) out[int(v)] = 0.0;
        return out;
    };
    res.portal = flow1d::solve_tree_flow(portal, w0_portal, zero_pressures(portal), props);
    res.hepatic = solve_drainage(hepatic, w_out_hepatic, zero_pressures(hepatic), props);
    res.portal_sources = build_sources(portal, res.portal, sys.mesh, 1.0, opt.max_distance);
    res.hepatic_sources = build_sources(hepatic, res.hepatic, sys.mesh, 1.0, opt.max_distance);
    std::vector<double> qp = res.portal_sources.flux, qh = res.hepatic_sources.flux;

    auto apply_loads = [&](const std::vector<double>& p_flux, const std::vector<double>& h_flux) {
        const double total_in = std::accumulate(p_flux.begin(), p_flux.end(), 0.0);
        const double total_out = std::accumulate(h_flux.begin(), h_flux.end(), 0.0);
        if (!(total_out < 0.0)) throw Error("couple: hepatic terminals do not drain");
        const double scale = -total_in / total_out;
        Eigen::VectorXd lp = Eigen::VectorXd::Zero(Eigen::Index(sys.node_count()));
        Eigen::VectorXd lh = lp;
        for (std::size_t k = 0; k < p_flux.size(); ++k) lp[res.portal_sources.vertices[k]] += p_flux[k];
        for (std::size_t k = 0; k < h_flux.size(); ++k) lh[res.hepatic_sources.vertices[k]] += scale * h_flux[k];
        res.system.sources[ip] = lp;
        res.system.sources[ih] = lh;
        res.portal_sources.load = lp;
        res.hepatic_sources.load = lh;
        res.hepatic_outflow = -lh.sum();
    };

    for (int it = 1; it <= opt.max_iterations; ++it) {
        apply_loads(qp, qh);
        res.pressure = solve_pressure(res.system, opt.solver);
        res.portal = flow1d::solve_tree_flow(portal, w0_portal, sample_pressures(res.portal_sources, res.pressure.p[ip]),
                                             props);
        res.hepatic = solve_drainage(hepatic, w_out_hepatic, sample_pressures(res.hepatic_sources, res.pressure.p[ih]),
                                     props);
        const SourceMap np = build_sources(portal, res.portal, sys.mesh, 1.0, opt.max_distance);
        const SourceMap nh = build_sources(hepatic, res.hepatic, sys.mesh, 1.0, opt.max_distance);
        double scale = 0.0, change = 0.0;
        for (std::size_t k = 0; k < qp.size(); ++k) {
            scale = std::max(scale, std::abs(np.flux[k]));
            change = std::max(change, std::abs(np.flux[k] - qp[k]));
        }
        for (std::size_t k = 0; k < qh.size(); ++k) {
            scale = std::max(scale, std::abs(nh.flux[k]));
            change = std::max(change, std::abs(nh.flux[k] - qh[k]));
        }
        change = scale > 0.0 ? change / scale : 0.0;
        res.history.push_back(change);
        res.iterations = it;
        if (change < opt.tolerance) {
            res.portal_sources.flux = np.flux;
            res.hepatic_sources.flux = nh.flux;
            apply_loads(np.flux, nh.flux);
            res.pressure = solve_pressure(res.system, opt.solver);
            return res;
        }
        for (std::size_t k = 0; k < qp.size(); ++k) qp[k] = opt.relaxation * np.flux[k] + (1.0 - opt.relaxation) * qp[k];
        for (std::size_t k = 0; k < qh.size(); ++k) qh[k] = opt.relaxation * nh.flux[k] + (1.0 - opt.relaxation) * qh[k];
    }
    std::ostringstream msg;
    msg << "couple: Picard iteration did not converge in " << opt.max_iterations << " iterations; changes:";
    for (double c : res.history) msg << ' ' << c;
    throw Error(msg.str());
}

}  // namespace liverperf::darcy
