#include "liverperf/darcy.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <numbers>

using namespace liverperf;
using namespace liverperf::darcy;
using tree::NodeKind;
using tree::VascularTree;
using oracles::on_box_boundary;
using oracles::random_spd;
using oracles::single;

namespace {

constexpr double kPi = std::numbers::pi;

Eigen::SparseMatrix<double> mass_matrix(const TetMesh& m) {
    std::vector<Eigen::Triplet<double>> trip;
    for (std::size_t t = 0; t < m.tets.size(); ++t) {
        const double vol = mesh::tet_signed_volume(m, t);
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b)
                trip.emplace_back(m.tets[t][std::size_t(a)], m.tets[t][std::size_t(b)], vol * (a == b ? 0.1 : 0.05));
    }
    Eigen::SparseMatrix<double> out(int(m.vertices.size()), int(m.vertices.size()));
    out.setFromTriplets(trip.begin(), trip.end());
    return out;
}

}  // namespace

TEST_CASE("element stiffness of a regular tet") {
    const std::array<Vec3, 4> x = {Vec3(1, 1, 1), Vec3(1, -1, -1), Vec3(-1, 1, -1), Vec3(-1, -1, 1)};
    const double vol = std::abs(mesh::tet_signed_volume(x[0], x[1], x[2], x[3]));
    // Oracle: grad phi_i = -A_i n_i / (3 V), n_i the outward normal of the face opposite i.
    std::array<Vec3, 4> an;
    for (int i = 0; i < 4; ++i) {
        std::array<Vec3, 3> f;
        int c = 0;
        for (int j = 0; j < 4; ++j)
            if (j != i) f[std::size_t(c++)] = x[std::size_t(j)];
        Vec3 n = 0.5 * (f[1] - f[0]).cross(f[2] - f[0]);
        if (n.dot(f[0] - x[std::size_t(i)]) < 0) n = -n;
        an[std::size_t(i)] = n;
    }
    const Eigen::Matrix4d k = element_stiffness(x, Mat3::Identity());
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(k(i, j) == doctest::Approx(an[std::size_t(i)].dot(an[std::size_t(j)]) / (9.0 * vol)).epsilon(1e-12));
    CHECK(k.rowwise().sum().cwiseAbs().maxCoeff() < 1e-14);
    const Eigen::Matrix4d m = element_mass(x);
    CHECK(m.sum() == doctest::Approx(vol));
}

TEST_CASE("coupling blocks are G times the mass matrix") {
    const TetMesh m = mesh::box_tet_mesh({2, 2, 2}, Vec3(1.0, 1.5, 0.5));
    CompartmentSystem two;
    two.mesh = m;
    two.compartments = {{"a", Mat3::Identity(), {}}, {"b", Mat3::Identity(), {}}};
    two.coupling = Eigen::MatrixXd::Zero(2, 2);
    const Eigen::SparseMatrix<double> a0 = assemble(two).matrix;
    const double g = 0.37;
    two.coupling(0, 1) = two.coupling(1, 0) = g;
    const Eigen::SparseMatrix<double> a1 = assemble(two).matrix;
    CHECK(Eigen::SparseMatrix<double>(a1 - Eigen::SparseMatrix<double>(a1.transpose())).norm() == 0.0);
    const Eigen::MatrixXd diff = Eigen::MatrixXd(a1 - a0);
    const Eigen::MatrixXd mm = Eigen::MatrixXd(mass_matrix(m));
    const Eigen::Index n = mm.rows();
    Eigen::MatrixXd expected(2 * n, 2 * n);
    expected << g * mm, -g * mm, -g * mm, g * mm;
    CHECK((diff - expected).cwiseAbs().maxCoeff() < 1e-14);

    Rng rng(3);
    CompartmentSystem three = three_compartment_system(m, {1.0, 2.0, 3.0}, 0.1, 0.2);
    three.compartments[1].cell_permeability.clear();
    for (std::size_t t = 0; t < m.tets.size(); ++t) three.compartments[1].cell_permeability.push_back(random_spd(rng));
    const Eigen::SparseMatrix<double> a3 = assemble(three).matrix;
    CHECK(Eigen::SparseMatrix<double>(a3 - Eigen::SparseMatrix<double>(a3.transpose())).norm() == 0.0);
}

TEST_CASE("system validation") {
    const TetMesh m = mesh::box_tet_mesh({1, 1, 1}, Vec3(1.0, 1.0, 1.0));
    CompartmentSystem s = single(m, Mat3::Identity());
    CHECK_NOTHROW(s.validate());
    s.compartments[0].permeability(0, 1) = 0.5;  // not symmetric
    CHECK_THROWS_AS(s.validate(), Error);
    s = single(m, -Mat3::Identity());
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("SPD"), Error);
    s = single(m, Mat3::Identity());
    std::swap(s.mesh.tets[0][0], s.mesh.tets[0][1]);
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("inverted"), Error);
    s = three_compartment_system(m, {1, 1, 1}, 0.1, 0.1);
    s.coupling(0, 1) = 0.2;
    CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("symmetric"), Error);
}

TEST_CASE("patch test") {
    Rng rng(11);
    const Vec3 lo(0, 0, 0), h(0.7, 1.1, 0.9);
    const TetMesh m = mesh::box_tet_mesh({4, 3, 5}, h, lo);
    const Vec3 hi = lo + Vec3(4 * h[0], 3 * h[1], 5 * h[2]);
    const Mat3 k = random_spd(rng);
    const Vec3 a(0.3, -1.2, 2.0);
    const double b = 5.0;
    CompartmentSystem s = single(m, k);
    s.fixed.resize(1);
    int interior = 0;
    for (std::size_t v = 0; v < m.vertices.size(); ++v) {
        if (on_box_boundary(m.vertices[v], lo, hi)) s.fixed[0][int(v)] = a.dot(m.vertices[v]) + b;
        else ++interior;
    }
    REQUIRE(interior > 0);
    const PressureField p = solve_pressure(s);
    double worst = 0.0;
    for (std::size_t v = 0; v < m.vertices.size(); ++v)
        worst = std::max(worst, std::abs(p.p[0][Eigen::Index(v)] - (a.dot(m.vertices[v]) + b)));
    CHECK(worst < 1e-10);
    const VelocityField w = darcy_velocity(p, s);
    for (const Vec3& wt : w.w[0]) CHECK((wt + k * a).norm() < 1e-9);
}

TEST_CASE("velocity of simple fields") {
    const TetMesh m = mesh::box_tet_mesh({2, 2, 2}, Vec3(1.0, 1.0, 1.0));
    const CompartmentSystem s = single(m, Mat3::Identity());
    PressureField p;
    p.p.push_back(Eigen::VectorXd(Eigen::Index(m.vertices.size())));
    for (std::size_t v = 0; v < m.vertices.size(); ++v) p.p[0][Eigen::Index(v)] = m.vertices[v][0];
    const VelocityField linear = darcy_velocity(p, s);
    for (const Vec3& w : linear.w[0]) CHECK((w - Vec3(-1, 0, 0)).norm() < 1e-14);
    p.p[0].setConstant(3.0);
    const VelocityField constant = darcy_velocity(p, s);
    for (const Vec3& w : constant.w[0]) CHECK(w.norm() < 1e-14);
}

TEST_CASE("uniform exchange between two compartments") {
    Rng rng(5);
    const TetMesh m = mesh::box_tet_mesh({3, 4, 3}, Vec3(1.0, 0.5, 2.0));
    CompartmentSystem s;
    s.mesh = m;
    s.compartments = {{"a", random_spd(rng), {}}, {"b", random_spd(rng), {}}};
    const double g = 0.25, src = 1.7;
    s.coupling = Eigen::MatrixXd::Zero(2, 2);
    s.coupling(0, 1) = s.coupling(1, 0) = g;
    const Eigen::VectorXd f = load_vector(m, [&](const Vec3&) { return src; });
    s.sources = {f, -f};
    const PressureField p = solve_pressure(s);
    const Eigen::VectorXd diff = p.p[0] - p.p[1];
    CHECK((diff.array() - src / g).abs().maxCoeff() < 1e-10);
    CHECK(std::abs(p.p[0].sum() + p.p[1].sum()) < 1e-9);
}

TEST_CASE("pure-Neumann compatibility") {
    Rng rng(6);
    const TetMesh m = mesh::box_tet_mesh({4, 4, 4}, Vec3(1.0, 1.0, 1.0));
    CompartmentSystem s = three_compartment_system(m, {2.0, 1.0, 0.5}, 0.3, 0.1);
    const Eigen::Index nv = Eigen::Index(m.vertices.size());
    s.sources.assign(3, Eigen::VectorXd::Zero(nv));
    for (int i = 0; i < 3; ++i)
        for (Eigen::Index v = 0; v < nv; ++v) s.sources[std::size_t(i)][v] = rng.uniform(-1, 1);
    double total = 0.0;
    for (const auto& f : s.sources) total += f.sum();
    s.sources[1].array() -= total / double(nv);
    const PressureField p = solve_pressure(s);
    const Assembly a = assemble(s);
    Eigen::VectorXd x(3 * nv);
    for (int i = 0; i < 3; ++i) x.segment(i * nv, nv) = p.p[std::size_t(i)];
    const Eigen::VectorXd r = a.matrix * x - a.load;
    CHECK(std::abs(r.sum()) < 1e-12 * a.load.cwiseAbs().sum());
    CHECK(r.norm() < 1e-9 * a.load.norm());

    s.sources[0][0] += 1.0;
    CHECK_THROWS_WITH_AS(solve_pressure(s), doctest::Contains("incompatible"), Error);

    // Uncoupled compartments are separate nullspace components.
    CompartmentSystem u = three_compartment_system(m, {1.0, 1.0, 1.0}, 0.0, 0.2);
    u.sources.assign(3, Eigen::VectorXd::Zero(nv));
    u.sources[0][3] = 1.0;
    u.sources[1][5] = -1.0;
    CHECK_THROWS_AS(solve_pressure(u), Error);
    u.sources[0][7] = -1.0;
    u.sources[2][2] = 1.0;
    const PressureField pu = solve_pressure(u);
    CHECK(std::abs(pu.p[0].sum()) < 1e-9);
    CHECK(std::abs(pu.p[1].sum() + pu.p[2].sum()) < 1e-9);
}

TEST_CASE("PCG agrees with a dense solve") {
    Rng rng(7);
    const TetMesh m = mesh::box_tet_mesh({4, 4, 3}, Vec3(1.0, 0.8, 1.2));
    const Eigen::Index nv = Eigen::Index(m.vertices.size());
    REQUIRE(nv <= 500);
    CompartmentSystem s;
    s.mesh = m;
    s.compartments.resize(2);
    for (auto& c : s.compartments)
        for (std::size_t t = 0; t < m.tets.size(); ++t) c.cell_permeability.push_back(random_spd(rng));
    s.coupling = Eigen::MatrixXd::Zero(2, 2);
    s.coupling(0, 1) = s.coupling(1, 0) = rng.uniform(0.1, 1.0);
    s.sources.assign(2, Eigen::VectorXd::Zero(nv));
    for (auto& f : s.sources)
        for (Eigen::Index v = 0; v < nv; ++v) f[v] = rng.uniform(-1, 1);
    s.fixed.resize(2);
    s.fixed[0][0] = 1.0;
    s.fixed[1][int(nv) - 1] = -2.0;
    const PressureField p = solve_pressure(s);

    const Eigen::MatrixXd a = Eigen::MatrixXd(assemble(s).matrix);
    const Eigen::VectorXd f = assemble(s).load;
    std::vector<int> free;
    for (int k = 0; k < 2 * int(nv); ++k)
        if (k != 0 && k != 2 * int(nv) - 1) free.push_back(k);
    Eigen::VectorXd xfix = Eigen::VectorXd::Zero(2 * nv);
    xfix[0] = 1.0;
    xfix[2 * nv - 1] = -2.0;
    const Eigen::VectorXd rhs_full = f - a * xfix;
    Eigen::MatrixXd ar(free.size(), free.size());
    Eigen::VectorXd rhs(free.size());
    for (std::size_t i = 0; i < free.size(); ++i) {
        rhs[Eigen::Index(i)] = rhs_full[free[i]];
        for (std::size_t j = 0; j < free.size(); ++j) ar(Eigen::Index(i), Eigen::Index(j)) = a(free[i], free[j]);
    }
    const Eigen::VectorXd xd = ar.ldlt().solve(rhs);
    Eigen::VectorXd xc(free.size());
    for (std::size_t i = 0; i < free.size(); ++i)
        xc[Eigen::Index(i)] = p.p[std::size_t(free[i] / nv)][free[i] % nv];
    CHECK((xc - xd).norm() < 1e-8 * xd.norm());
}

TEST_CASE("manufactured solution converges at second order") {
    const std::vector<double> errors = oracles::manufactured_l2_errors({4, 8, 16});
    const double order1 = std::log2(errors[0] / errors[1]);
    const double order2 = std::log2(errors[1] / errors[2]);
    MESSAGE("L2 errors " << errors[0] << " " << errors[1] << " " << errors[2] << " orders " << order1 << " "
                         << order2);
    CHECK(order1 >= 1.8);
    CHECK(order2 >= 1.8);
}

namespace {

VascularTree star_tree(const Vec3& root, const std::vector<Vec3>& terminals, double r) {
    VascularTree t;
    t.root = t.add_node(root, NodeKind::root);
    if (terminals.size() == 1) {
        t.add_edge(t.root, t.add_node(terminals[0], NodeKind::terminal), r);
        return t;
    }
    Vec3 c = Vec3::Zero();
    for (const Vec3& x : terminals) c += x;
    c /= double(terminals.size());
    const int j = t.add_node(0.5 * (root + c));
    t.add_edge(t.root, j, r);
    for (const Vec3& x : terminals) t.add_edge(j, t.add_node(x, NodeKind::terminal), r * 0.8);
    return t;
}

}  // namespace

TEST_CASE("terminal sources") {
    const TetMesh m = mesh::box_tet_mesh({3, 3, 3}, Vec3(2.0, 2.0, 2.0));
    VascularTree t = star_tree(Vec3(-5, -5, -5), {Vec3(1.9, 0.1, 0.0)}, 1.0);
    flow1d::TreeFlowState s;
    s.area = {1e-6};
    s.w = {2e-3};  // 1e-6 m^2 * 2e-3 m/s = 2 mm^3/s
    SourceMap sm = build_sources(t, s, m, 1.0, 1.0);
    CHECK(sm.load.sum() == doctest::Approx(2.0));
    CHECK(sm.load.cwiseAbs().maxCoeff() == doctest::Approx(2.0));
    CHECK(m.vertices[std::size_t(sm.vertices[0])] == Vec3(2.0, 0.0, 0.0));
    CHECK_THROWS_WITH_AS(build_sources(t, s, m, 1.0, 0.05), doctest::Contains("from the mesh"), Error);

    VascularTree two = star_tree(Vec3(-5, -5, -5), {Vec3(3.9, 4.1, 4.0), Vec3(4.1, 3.9, 4.0)}, 1.0);
    s.area = {1e-6, 1e-6, 1e-6};
    s.w = {4e-3, 1e-3, 3e-3};
    sm = build_sources(two, s, m, -1.0, 1.0);
    CHECK(sm.vertices[0] == sm.vertices[1]);
    CHECK(sm.load[sm.vertices[0]] == doctest::Approx(-4.0));

    Rng rng(12);
    std::vector<Vec3> pts;
    for (int k = 0; k < 20; ++k) pts.emplace_back(rng.uniform(0, 6), rng.uniform(0, 6), rng.uniform(0, 6));
    const VascularTree many = star_tree(Vec3(-5, -5, -5), pts, 2.0);
    flow1d::TreeFlowState ms;
    double expected = 0.0;
    for (std::size_t e = 0; e < many.edges.size(); ++e) {
        ms.area.push_back(rng.uniform(1e-7, 1e-6));
        ms.w.push_back(rng.uniform(0.0, 0.3));
        if (e > 0) expected += ms.area.back() * ms.w.back() * 1e9;
    }
    sm = build_sources(many, ms, m, 1.0, 5.0);
    CHECK(sm.load.sum() == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("flux report") {
    const TetMesh m = mesh::box_tet_mesh({4, 4, 4}, Vec3(1.0, 1.0, 1.0));
    const Eigen::Index nv = Eigen::Index(m.vertices.size());
    CompartmentSystem s = three_compartment_system(m, {1.0, 0.5, 1.0}, 0.2, 0.3);
    s.sources.assign(3, Eigen::VectorXd::Zero(nv));
    s.sources[0][0] = 5.0;
    s.sources[2][nv - 1] = -5.0;
    const PressureField p = solve_pressure(s);
    const FluxReport r = flux_report(s, p);
    CHECK(r.exchange(0, 1) == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(r.exchange(1, 2) == doctest::Approx(5.0).epsilon(1e-9));
    CHECK(r.exchange(0, 2) == 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(r.exchange(i, j) == doctest::Approx(-r.exchange(j, i)));
    for (double im : r.imbalance()) CHECK(std::abs(im) < 1e-9 * 5.0);

    // With fixed pressures the boundary term closes the balance.
    CompartmentSystem d = single(m, Mat3::Identity());
    d.sources = {Eigen::VectorXd::Zero(nv)};
    d.sources[0][10] = 3.0;
    d.fixed = {{{0, 0.0}, {int(nv) - 1, 1.0}}};
    const FluxReport rd = flux_report(d, solve_pressure(d));
    CHECK(rd.exchange(0, 0) == 0.0);
    CHECK(std::abs(rd.imbalance()[0]) < 1e-9 * 3.0);
    CHECK(rd.boundary[0] == doctest::Approx(3.0).epsilon(1e-8));
}

namespace {

struct CoupledCase {
    CompartmentSystem sys;
    VascularTree portal, hepatic;
};

CoupledCase coupled_case(bool two_terminals) {
    CoupledCase c;
    const TetMesh m = mesh::box_tet_mesh({6, 6, 6}, Vec3::Constant(5.0));
    c.sys = three_compartment_system(m, {500.0, 200.0, 500.0}, 1e-3, 1e-3);
    if (two_terminals) {
        c.portal = star_tree(Vec3(-10, 12.5, 12.5), {Vec3(5, 5, 10), Vec3(10, 20, 20)}, 1.0);
        c.hepatic = star_tree(Vec3(40, 12.5, 12.5), {Vec3(25, 5, 10), Vec3(20, 25, 15)}, 1.5);
    } else {
        c.portal = star_tree(Vec3(-10, 12.5, 12.5), {Vec3(5, 12.5, 12.5)}, 1.0);
        c.hepatic = star_tree(Vec3(40, 12.5, 12.5), {Vec3(25, 12.5, 12.5)}, 1.0);
    }
    return c;
}

}  // namespace

TEST_CASE("coupling with one terminal per tree") {
    const CoupledCase c = coupled_case(false);
    flow1d::FluidProps props;
    const CoupledResult r = couple_1d_3d(c.portal, c.hepatic, c.sys, props, 0.1);
    CHECK(r.iterations < 100);
    const double q = r.portal_sources.flux[0];
    CHECK(q == doctest::Approx(kPi * 0.1 * 1e3).epsilon(1e-9));
    CHECK(r.hepatic_sources.flux[0] == doctest::Approx(-q).epsilon(1e-9));
    CHECK(std::abs(r.portal_inflow - r.hepatic_outflow) < 1e-9 * r.portal_inflow);
}

TEST_CASE("coupling fixed point") {
    const CoupledCase c = coupled_case(true);
    flow1d::FluidProps props;
    CouplingOptions opt;
    const CoupledResult full = couple_1d_3d(c.portal, c.hepatic, c.sys, props, 0.1, opt);
    MESSAGE("Picard iterations " << full.iterations << ", last change " << full.history.back());
    CHECK(full.iterations < 100);
    CHECK(full.history.back() < 1e-6);
    CHECK(std::abs(full.portal_inflow - full.hepatic_outflow) < 1e-9 * full.portal_inflow);
    const double sum_p = std::accumulate(full.portal_sources.flux.begin(), full.portal_sources.flux.end(), 0.0);
    CHECK(std::abs(sum_p - full.portal_inflow) < 1e-9 * full.portal_inflow);

    opt.relaxation = 0.5;
    const CoupledResult half = couple_1d_3d(c.portal, c.hepatic, c.sys, props, 0.1, opt);
    for (std::size_t k = 0; k < full.portal_sources.flux.size(); ++k)
        CHECK(half.portal_sources.flux[k] == doctest::Approx(full.portal_sources.flux[k]).epsilon(1e-5));
    for (std::size_t k = 0; k < full.hepatic_sources.flux.size(); ++k)
        CHECK(half.hepatic_sources.flux[k] == doctest::Approx(full.hepatic_sources.flux[k]).epsilon(1e-5));

    // One more step from the converged pressures changes the fluxes by < 1e-6.
    std::map<int, double> pk;
    for (std::size_t k = 0; k < full.portal_sources.terminals.size(); ++k)
        pk[full.portal_sources.terminals[k]] = full.pressure.p[0][full.portal_sources.vertices[k]];
    const auto again = flow1d::solve_tree_flow(c.portal, 0.1, pk, props);
    const SourceMap sm = build_sources(c.portal, again, c.sys.mesh, 1.0, 5.0);
    for (std::size_t k = 0; k < sm.flux.size(); ++k)
        CHECK(std::abs(sm.flux[k] - full.portal_sources.flux[k]) < 1e-6 * std::abs(full.portal_sources.flux[k]));

    CouplingOptions bad;
    bad.relaxation = 0.0;
    CHECK_THROWS_AS(couple_1d_3d(c.portal, c.hepatic, c.sys, props, 0.1, bad), Error);
    bad = CouplingOptions{};
    bad.max_iterations = 1;
    CHECK_THROWS_WITH_AS(couple_1d_3d(c.portal, c.hepatic, c.sys, props, 0.1, bad), doctest::Contains("changes"),
                         Error);
}
