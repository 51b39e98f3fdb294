// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Usage: acceptance [demo_config.json]

#include "liverperf/pipeline.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <sstream>

using namespace liverperf;
namespace fs = std::filesystem;
using nlohmann::json;
using voxelio::BinaryMask;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    // Records a condition; the description is kept only for failures.
    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            failures.push_back(what);
        }
    }
    std::vector<std::string> failures;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

// 1. Graph cut ---------------------------------------------------------------

void graph_cut(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(1001);
    const std::vector<std::array<int, 3>> shapes = {{3, 3, 1}, {4, 3, 1}, {2, 2, 3}, {3, 2, 2},
                                                    {7, 2, 1}, {2, 3, 2}, {4, 4, 1}, {5, 1, 1}};
    int grids = 0, exact = 0, max_free = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const auto dims = shapes[rng.index(shapes.size())];
        voxelio::GridGeometry g;
        g.dims = dims;
        const int n = dims[0] * dims[1] * dims[2];
        voxelio::VoxelGrid grid(g, 0.0);
        for (double& v : grid.values) v = (rng.uniform() < 0.5 ? 80.0 : 20.0) + 15.0 * rng.normal();

        // Distinct seed voxels: one or two of each kind, more background
        // seeds until at most 12 voxels are free.
        std::vector<std::size_t> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), std::size_t(0));
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
        const int nfg = 1 + int(rng.index(2));
        const int nbg = std::max(1 + int(rng.index(2)), n - nfg - 12);
        seg::SeedSet seeds;
        for (int i = 0; i < nfg + nbg; ++i) {
            const auto [a, b, c] = g.unravel(order[std::size_t(i)]);
            (i < nfg ? seeds.foreground : seeds.background).push_back({a, b, c});
        }
        const int free = n - nfg - nbg;
        max_free = std::max(max_free, free);

        seg::SegmentationParams p;
        p.lambda = rng.uniform(0.05, 2.0);
        p.boundary_scale = rng.uniform(5.0, 40.0);
        const auto r = seg::segment_detailed(grid, seeds, p);
        const BinaryMask plain = seg::segment(grid, seeds, p);
        const auto ex = oracles::exhaustive_min(grid, seeds, r.foreground_model, r.background_model, p);
        const double e = seg::energy(r.mask, grid, r.foreground_model, r.background_model, p);
        ++grids;
        exact += e == ex.energy && plain.values == r.mask.values;
    }
    o.require(grids >= 50 && exact == grids, "segment energy differs from the exhaustive minimum");
    o.require(max_free <= 12, "a grid has more than 12 unseeded voxels");

    int networks = 0, matched = 0, max_inner = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const int inner = 2 + int(rng.index(11));
        max_inner = std::max(max_inner, inner);
        const seg::FlowNetwork net = oracles::random_network(inner, rng);
        const double brute = oracles::brute_force_min_cut(net);
        const auto r = seg::max_flow(net);
        ++networks;
        matched += r.flow == brute && seg::cut_capacity(net, r.source_side) == brute;
    }
    o.require(networks >= 50 && matched == networks, "max flow differs from the brute-force min cut");
    const double secs = seconds_since(t0);
    o.require(secs < 10.0, "runtime exceeds 10 s");
    o.detail << exact << "/" << grids << " grids at the exhaustive minimum (<= " << max_free << " free voxels), "
             << matched << "/" << networks << " networks equal to brute force (<= " << max_inner
             << " inner nodes), " << fmt(secs) << " s";
}

// 2. Phantom segmentation ----------------------------------------------------

void phantom_segmentation(Outcome& o) {
    voxelio::PhantomSpec s;
    s.geom.dims = {24, 24, 24};
    s.center = Vec3::Constant(11.5);
    s.radius = 8.0;
    const seg::SeedSet seeds{{{12, 12, 12}}, {{0, 0, 0}}};
    seg::SegmentationParams p;
    p.lambda = 1.0;
    p.boundary_scale = 10.0;
    const BinaryMask truth = voxelio::phantom_mask(s);
    const bool exact = seg::segment(voxelio::make_phantom(s), seeds, p).values == truth.values;
    o.require(exact, "noise-free sphere not recovered voxel-exactly");

    // 1% noise: sigma of one percent of the inside/outside contrast.
    double worst = 1.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        voxelio::PhantomSpec n = s;
        n.noise_sigma = 0.01 * (s.inside - s.outside);
        n.seed = seed;
        worst = std::min(worst, seg::dice(seg::segment(voxelio::make_phantom(n), seeds, p), truth));
    }
    o.require(worst >= 0.99, "Dice below 0.99 with 1% noise");
    o.detail << "noise-free " << (exact ? "exact" : "inexact") << ", min Dice " << fmt(worst)
             << " over 5 noise seeds (need >= 0.99)";
}

// 3. Meshing -----------------------------------------------------------------

void meshing(Outcome& o) {
    std::vector<BinaryMask> masks = oracles::phantom_masks();
    for (std::uint64_t s = 0; s < 20; ++s) masks.push_back(oracles::random_mask(6, s, 0.2 + 0.03 * double(s)));
    int watertight = 0;
    for (const auto& m : masks) {
        const mesh::SurfaceMesh surf = mesh::marching_cubes(m);
        watertight += oracles::every_edge_twice(surf) && mesh::is_watertight(surf);
    }
    o.require(watertight == int(masks.size()), "a marching-cubes surface is not watertight");

    const mesh::SurfaceMesh sphere = mesh::marching_cubes(oracles::sphere_mask(25, 10.0));
    const double exact = 4.0 / 3.0 * std::numbers::pi * 1000.0;
    const double sphere_err = std::abs(mesh::enclosed_volume(sphere) - exact) / exact;
    o.require(sphere_err <= 0.05, "sphere volume off by more than 5%");

    double tet_err = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        BinaryMask m = oracles::random_mask(7, 100 + s, 0.6);
        m.geom.spacing = Vec3(0.7, 1.3, 2.1);
        m.geom.origin = Vec3(-3.0, 2.0, 10.0);
        const double want = double(m.count()) * m.geom.voxel_volume();
        tet_err = std::max(tet_err, std::abs(mesh::mesh_stats(mesh::voxel_tet_mesh(m)).volume - want) / want);
    }
    o.require(tet_err <= 1e-12, "voxel tet volume off by more than 1e-12");

    double taubin = 0.0;
    for (const auto& m : oracles::phantom_masks()) {
        const mesh::SurfaceMesh raw = mesh::marching_cubes(m);
        const double v0 = mesh::enclosed_volume(raw);
        const double v1 = mesh::enclosed_volume(mesh::taubin_smooth(raw, {0.33, -0.34, 20}));
        taubin = std::max(taubin, std::abs(v1 - v0) / v0);
    }
    o.require(taubin <= 0.01, "Taubin changes the volume by more than 1%");
    o.detail << watertight << "/" << masks.size() << " surfaces watertight, sphere volume error " << fmt(sphere_err)
             << " (<= 0.05), tet volume error " << fmt(tet_err) << " (<= 1e-12), Taubin 20 volume change "
             << fmt(taubin) << " (<= 0.01)";
}

// 4. Skeletonization ---------------------------------------------------------

void skeletonization(Outcome& o) {
    Rng rng(2024);
    int ok = 0;
    for (int n = 0; n < 20; ++n) ok += oracles::skeleton_matches(oracles::topology_case(n, rng));
    o.require(ok == 20, "a suite phantom lost its topology or counts");
    o.detail << ok << "/20 tube and Y-tube phantoms with correct endpoint/branch counts and component counts";
}

// 5. Tree synthesis ----------------------------------------------------------

void tree_synthesis(Outcome& o) {
    const vtree::TreeGenParams p;
    const auto terminals = vtree::sample_terminal_points(oracles::sphere_mask(33, 15.0), 50, 2024);
    const tree::VascularTree stub = oracles::one_segment_stub(Vec3(16, 16, -5), Vec3(16, 16, 4));
    const auto t0 = std::chrono::steady_clock::now();
    vtree::GenerationLog log;
    const tree::VascularTree t = vtree::generate_tree(stub, terminals, p, &log);
    const double secs = seconds_since(t0);

    bool monotone = !log.pass_costs.empty();
    for (std::size_t i = 1; i < log.pass_costs.size(); ++i) monotone &= log.pass_costs[i] <= log.pass_costs[i - 1];
    o.require(monotone, "cost increased across a hierarchy pass");
    const double ratio = vtree::tree_cost(t, p) / log.star_cost;
    o.require(ratio <= 0.95, "final cost above 95% of the star cost");
    const double murray = oracles::murray_residual(t, p.murray_exponent);
    o.require(murray < 1e-9, "Murray residual too large");
    o.require(t.terminal_count() == 50, "terminal count changed");

    const tree::VascularTree again = vtree::generate_tree(stub, terminals, p);
    bool identical = again.nodes.size() == t.nodes.size() && again.edges.size() == t.edges.size();
    for (std::size_t v = 0; identical && v < t.nodes.size(); ++v)
        identical = again.nodes[v].position == t.nodes[v].position && again.nodes[v].kind == t.nodes[v].kind;
    for (std::size_t e = 0; identical && e < t.edges.size(); ++e)
        identical = again.edges[e].parent == t.edges[e].parent && again.edges[e].child == t.edges[e].child &&
                    again.edges[e].radius == t.edges[e].radius && again.edges[e].length == t.edges[e].length;
    o.require(identical, "rerun is not bit-identical");
    o.require(secs < 60.0, "runtime exceeds 60 s");
    o.detail << log.pass_costs.size() << " pass costs non-increasing: " << (monotone ? "yes" : "no")
             << ", final/star " << fmt(ratio) << " (<= 0.95), Murray residual " << fmt(murray)
             << " (< 1e-9), rerun identical: " << (identical ? "yes" : "no") << ", " << fmt(secs) << " s";
}

// 6. 1D flow -----------------------------------------------------------------

void flow(Outcome& o, int demo_iterations) {
    const flow1d::FluidProps f;
    int max_iter = demo_iterations;
    double telescoped = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const tree::VascularTree t = oracles::random_flow_tree(15, seed);
        const auto pk = oracles::manufactured(t, 0.2, seed + 100, f).terminal_pressures;
        const flow1d::TreeFlowState s = flow1d::solve_tree_flow(t, 0.2, pk, f);
        max_iter = std::max(max_iter, s.iterations);
        telescoped = std::max(telescoped, oracles::telescoped_residual(t, s, pk, f));
    }
    {
        const tree::VascularTree t = oracles::random_flow_tree(7, 21);
        const auto pk = oracles::manufactured(t, -0.1, 22, f).terminal_pressures;
        const flow1d::TreeFlowState s = flow1d::solve_tree_flow(t, -0.1, pk, f);
        max_iter = std::max(max_iter, s.iterations);
        telescoped = std::max(telescoped, oracles::telescoped_residual(t, s, pk, f));
    }

    const tree::VascularTree b = oracles::bifurcation(3.0, 2.2, 1.6, Vec3(15, 0, 60), Vec3(-5, 3, 40));
    const std::map<int, double> pk = {{2, 1000.0}, {3, 1040.0}};
    const flow1d::TreeFlowState s = flow1d::solve_tree_flow(b, 0.3, pk, f);
    max_iter = std::max(max_iter, s.iterations);
    telescoped = std::max(telescoped, oracles::telescoped_residual(b, s, pk, f));
    const auto grid = oracles::bifurcation_grid_search(b, 0.3, pk, f);
    const double grid_err = std::max(std::abs(s.w[1] - grid[0]) / std::abs(grid[0]),
                                     std::abs(s.w[2] - grid[1]) / std::abs(grid[1]));

    const tree::VascularTree t = oracles::random_flow_tree(12, 8);
    const flow1d::FlowSystem sys(t, 0.25, oracles::manufactured(t, 0.2, 9, f).terminal_pressures, f);
    Rng rng(10);
    double fd = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        Eigen::VectorXd x = sys.initial_guess();
        for (Eigen::Index i = 0; i < x.size(); ++i) x[i] *= rng.uniform(0.5, 1.5);
        fd = std::max(fd, oracles::jacobian_fd_error(sys, x));
    }

    o.require(max_iter <= 10, "Newton needed more than 10 iterations");
    o.require(telescoped < 1e-10, "telescoped balance residual too large");
    o.require(grid_err < 1e-6, "bifurcation differs from the grid search");
    o.require(fd < 1e-5, "Jacobian differs from finite differences");
    o.detail << "max Newton iterations " << max_iter << " (<= 10, demo tree " << demo_iterations
             << "), telescoped residual " << fmt(telescoped) << " Pa (< 1e-10), grid search " << fmt(grid_err)
             << " (< 1e-6), Jacobian vs FD " << fmt(fd) << " (< 1e-5)";
}

// 7. Darcy -------------------------------------------------------------------

void darcy_checks(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    double patch = 0.0, exchange = 0.0, neumann = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        patch = std::max(patch, oracles::patch_test_error(seed));
        exchange = std::max(exchange, oracles::uniform_exchange_error(seed));
        neumann = std::max(neumann, oracles::neumann_identity(seed));
    }
    // Four uniform box meshes, three refinement steps, at most 48000 tets.
    const std::vector<int> ns = {8, 12, 16, 20};
    const std::vector<double> err = oracles::manufactured_l2_errors(ns);
    double min_order = 1e300;
    std::string orders;
    for (std::size_t i = 1; i < err.size(); ++i) {
        const double order = std::log(err[i - 1] / err[i]) / std::log(double(ns[i]) / ns[i - 1]);
        min_order = std::min(min_order, order);
        orders += (i > 1 ? "/" : "") + fmt(order);
    }
    const double secs = seconds_since(t0);
    o.require(patch <= 1e-10, "patch test error above 1e-10");
    o.require(exchange <= 1e-10, "uniform exchange error above 1e-10");
    o.require(neumann <= 1e-12, "compatibility identity violated");
    o.require(min_order >= 1.8, "convergence order below 1.8");
    o.require(secs < 120.0, "runtime exceeds 2 min");
    o.detail << "patch " << fmt(patch) << " (<= 1e-10), p1-p2-s/g " << fmt(exchange)
             << " (<= 1e-10), |1'(Ap-f)|/|f|_1 " << fmt(neumann) << ", L2 orders " << orders
             << " on n = 8/12/16/20 (>= 1.8, 48000 tets max), " << fmt(secs) << " s";
}

// Demo runs, shared by 6, 8, 9 and 10 ----------------------------------------

struct DemoRun {
    double seconds = 0.0;
    json manifest;
    std::map<std::string, std::string> hashes;  // artifact path -> sha256, plus manifest.json
    json perfusion, transport, flow1d;
};

json read_json(const fs::path& p) {
    std::ifstream in(p);
    return json::parse(in);
}

DemoRun run_demo(const fs::path& config, const fs::path& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = pipeline::validate_config(config, {{"output_dir", out.string()}});
    const pipeline::RunResult r = pipeline::run_pipeline(cfg);
    DemoRun d;
    d.seconds = seconds_since(t0);
    d.manifest = r.manifest;
    for (const auto& a : r.artifacts) d.hashes[a.path] = pipeline::sha256_file(out / a.path);
    d.hashes["manifest.json"] = pipeline::sha256_file(out / "manifest.json");
    d.perfusion = read_json(out / "perfusion.json");
    d.transport = read_json(out / "transport.json");
    d.flow1d = read_json(out / "flow1d.json");
    return d;
}

void coupled(Outcome& o, const DemoRun& d) {
    const int iterations = d.perfusion.at("iterations");
    const double change = d.perfusion.at("history").back();
    const double balance = d.perfusion.at("relative_balance");
    o.require(iterations < 100, "Picard needed 100 or more iterations");
    o.require(change < 1e-6, "final flux change not below 1e-6");
    o.require(balance < 1e-9, "global balance above 1e-9");
    o.detail << iterations << " Picard iterations (< 100), final flux change " << fmt(change)
             << " (< 1e-6), |inflow - outflow|/inflow " << fmt(balance) << " (< 1e-9)";
}

void transport_checks(Outcome& o, const DemoRun& d) {
    const double ledger = d.transport.at("max_ledger_error");
    const double smin = d.transport.at("min_saturation"), smax = d.transport.at("max_saturation");
    const double cfl = d.transport.at("cfl");
    o.require(ledger < 1e-8, "demo ledger error above 1e-8");
    o.require(smin >= 0.0 && smax <= 1.0, "demo saturation outside [0, 1]");
    o.require(cfl == 0.4, "demo not run at CFL 0.4");

    const std::vector<double> err = oracles::exchange_errors({10, 20, 40, 80});
    double min_order = 1e300;
    for (std::size_t k = 1; k < err.size(); ++k) min_order = std::min(min_order, std::log2(err[k - 1] / err[k]));
    o.require(min_order >= 1.7, "exchange order below 1.7");

    // 60-cell channel, front after traversing 50 cells at w/phi.
    const int n = 60;
    const double w = 0.5, phi = 0.2;
    const mesh::TetMesh m = mesh::box_tet_mesh({n, 1, 1}, Vec3(1.0, 1.0, 1.0));
    const transport::TransportProblem p = oracles::channel(m, w, phi);
    transport::TransportParams params;
    params.porosity = {phi};
    params.cfl = 0.4;
    params.end_time = 50.0 * phi / w;
    params.snapshot_interval = params.end_time;
    const transport::TransportResult r = transport::simulate_transport(p, params);
    const double front = oracles::front_position(m, p, r.snapshots.back()[0], n);
    o.require(std::abs(front - 50.0) <= 2.0, "channel front more than 2 cells off");
    o.require(r.max_ledger_error < 1e-8 && r.min_saturation >= 0.0 && r.max_saturation <= 1.0,
              "channel ledger or bounds violated");

    const darcy::CompartmentSystem sys = oracles::box_system(2e-3, 2e-3);
    const darcy::PressureField pf = darcy::solve_pressure(sys);
    const transport::TransportProblem chain =
        transport::build_problem(sys, pf, darcy::darcy_velocity(pf, sys), {0.2, 0.1, 0.2});
    transport::TransportParams cp;
    cp.end_time = 200.0;
    cp.snapshot_interval = 10.0;
    const transport::TransportResult cr = transport::simulate_transport(chain, cp);
    const bool ordered = cr.arrival[0] < cr.arrival[1] && cr.arrival[1] < cr.arrival[2] && cr.arrival[2] < cp.end_time;
    const bool demo_ordered = d.transport.at("arrival_s")[1].get<double>() < d.transport.at("arrival_s")[2].get<double>();
    o.require(ordered && demo_ordered, "compartment 3 does not arrive after compartment 2");
    o.detail << "demo ledger " << fmt(ledger) << " (< 1e-8), demo S in [" << fmt(smin) << ", " << fmt(smax)
             << "] at CFL " << cfl << ", exchange order " << fmt(min_order) << " (>= 1.7), front at " << fmt(front)
             << " cells (50 +- 2), chain arrivals " << fmt(cr.arrival[0]) << " < " << fmt(cr.arrival[1]) << " < "
             << fmt(cr.arrival[2]) << " s (demo " << fmt(d.transport.at("arrival_s")[1]) << " < "
             << fmt(d.transport.at("arrival_s")[2]) << " s)";
}

void determinism(Outcome& o, const DemoRun& a, const DemoRun& b) {
    o.require(a.seconds < 300.0 && b.seconds < 300.0, "demo run exceeds 5 min");
    int differing = 0;
    for (const auto& [path, hash] : a.hashes) {
        const auto it = b.hashes.find(path);
        differing += it == b.hashes.end() || it->second != hash;
    }
    differing += int(b.hashes.size()) - int(a.hashes.size());
    o.require(differing == 0, "outputs differ between runs");
    o.detail << a.hashes.size() << " files, " << differing << " differing between two runs, runs took "
             << fmt(a.seconds) << " s and " << fmt(b.seconds) << " s (< 300 s)";
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path config = argc > 1 ? fs::path(argv[1]) : fs::path(LIVERPERF_DEMO_CONFIG);
    std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria;

    testing::TempDir dir("acceptance");
    std::optional<DemoRun> first, second;
    std::string demo_error;
    try {
        first = run_demo(config, dir / "run1");
        second = run_demo(config, dir / "run2");
    } catch (const std::exception& e) {
        demo_error = e.what();
    }
    auto needs_demo = [&](auto check) {
        return [&, check](Outcome& o) {
            if (!first || !second) throw std::runtime_error("demo run failed: " + demo_error);
            check(o);
        };
    };

    criteria.emplace_back("graph-cut exactness", graph_cut);
    criteria.emplace_back("phantom segmentation", phantom_segmentation);
    criteria.emplace_back("meshing", meshing);
    criteria.emplace_back("skeletonization", skeletonization);
    criteria.emplace_back("tree synthesis", tree_synthesis);
    criteria.emplace_back("1D flow", needs_demo([&](Outcome& o) { flow(o, first->flow1d.at("iterations")); }));
    criteria.emplace_back("Darcy", darcy_checks);
    criteria.emplace_back("coupled 1D-3D", needs_demo([&](Outcome& o) { coupled(o, *first); }));
    criteria.emplace_back("transport", needs_demo([&](Outcome& o) { transport_checks(o, *first); }));
    criteria.emplace_back("end-to-end determinism", needs_demo([&](Outcome& o) { determinism(o, *first, *second); }));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            criteria[i].second(o);
        } catch (const std::exception& e) {
            o.pass = false;
            o.failures.push_back(std::string("exception: ") + e.what());
        }
        std::string line = o.detail.str();
        for (const auto& f : o.failures) line += "; " + f;
        std::printf("%s criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                    line.c_str());
        failed += !o.pass;
    }
    std::fflush(stdout);
    return failed == 0 ? 0 : 1;
}
