#include "liverperf/pipeline.hpp"

#include "liverperf/darcy.hpp"
#include "liverperf/flow1d.hpp"
#include "liverperf/meshgen.hpp"
#include "liverperf/segmentation.hpp"
#include "liverperf/transport.hpp"
#include "liverperf/vesselrecon.hpp"
#include "liverperf/vtk.hpp"
#include "liverperf/vtree.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <set>
#include <sstream>

namespace liverperf::pipeline {

using nlohmann::json;

namespace {

std::string join_lines(const std::vector<std::string>& v) {
    std::string s = "invalid configuration:";
    for (const auto& x : v) s += "\n  " + x;
    return s;
}

// ---------------------------------------------------------------------------
// Configuration reading. Every accessor records its key as known and
// appends a violation instead of throwing, so all problems are reported.

class Section {
public:
    Section(const json* j, std::string path, std::vector<std::string>& out) : j_(j), path_(std::move(path)), out_(out) {
        if (j_ && !j_->is_object()) {
            fail("must be an object");
            j_ = nullptr;
        }
    }

    ~Section() {
        if (!j_) return;
        for (const auto& [k, v] : j_->items())
            if (!known_.count(k)) out_.push_back("unknown key '" + name(k) + "'");
    }
    Section(const Section&) = delete;
    Section& operator=(const Section&) = delete;

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    void fail(const std::string& msg) const { out_.push_back((path_.empty() ? std::string("config") : path_) + " " + msg); }
    void fail(const std::string& key, const std::string& msg) const { out_.push_back(name(key) + " " + msg); }

    Section sub(const std::string& key) {
        known_.insert(key);
        return Section(j_ && j_->contains(key) ? &(*j_)[key] : nullptr, name(key), out_);
    }

    const json* raw(const std::string& key) {
        known_.insert(key);
        if (!j_ || !j_->contains(key)) return nullptr;
        return &(*j_)[key];
    }

    void number(const std::string& key, double& v) {
        if (const json* x = raw(key)) {
            if (x->is_number()) v = x->get<double>();
            else fail(key, "must be a number");
        }
    }
    void integer(const std::string& key, int& v) {
        if (const json* x = raw(key)) {
            if (x->is_number_integer()) v = x->get<int>();
            else fail(key, "must be an integer");
        }
    }
    void uint64(const std::string& key, std::uint64_t& v) {
        if (const json* x = raw(key)) {
            if (x->is_number_unsigned()) v = x->get<std::uint64_t>();
            else if (x->is_number_integer() && x->get<long long>() >= 0) v = std::uint64_t(x->get<long long>());
            else fail(key, "must be a non-negative integer");
        }
    }
    void boolean(const std::string& key, bool& v) {
        if (const json* x = raw(key)) {
            if (x->is_boolean()) v = x->get<bool>();
            else fail(key, "must be true or false");
        }
    }
    void string(const std::string& key, std::string& v) {
        if (const json* x = raw(key)) {
            if (x->is_string()) v = x->get<std::string>();
            else fail(key, "must be a string");
        }
    }
    void path(const std::string& key, fs::path& v) {
        std::string s = v.string();
        string(key, s);
        v = s;
    }
    void numbers(const std::string& key, std::vector<double>& v) {
        if (const json* x = raw(key)) {
            bool ok = x->is_array();
            if (ok)
                for (const auto& e : *x) ok = ok && e.is_number();
            if (ok) v = x->get<std::vector<double>>();
            else fail(key, "must be an array of numbers");
        }
    }
    template <std::size_t N>
    void numbers(const std::string& key, std::array<double, N>& v) {
        if (const json* x = raw(key)) {
            bool ok = x->is_array() && x->size() == N;
            if (ok)
                for (const auto& e : *x) ok = ok && e.is_number();
            if (ok)
                for (std::size_t k = 0; k < N; ++k) v[k] = (*x)[k].get<double>();
            else fail(key, "must be an array of " + std::to_string(N) + " numbers");
        }
    }
    void vec3(const std::string& key, Vec3& v) {
        std::array<double, 3> a{v.x(), v.y(), v.z()};
        numbers(key, a);
        v = Vec3(a[0], a[1], a[2]);
    }
    void dims(const std::string& key, std::array<int, 3>& v) {
        if (const json* x = raw(key)) {
            bool ok = x->is_array() && x->size() == 3;
            if (ok)
                for (const auto& e : *x) ok = ok && e.is_number_integer();
            if (ok)
                for (std::size_t k = 0; k < 3; ++k) v[k] = (*x)[k].get<int>();
            else fail(key, "must be an array of 3 integers");
        }
    }
    template <std::size_t N>
    void strings(const std::string& key, std::array<std::string, N>& v) {
        if (const json* x = raw(key)) {
            bool ok = x->is_array() && x->size() == N;
            if (ok)
                for (const auto& e : *x) ok = ok && e.is_string();
            if (ok)
                for (std::size_t k = 0; k < N; ++k) v[k] = (*x)[k].get<std::string>();
            else fail(key, "must be an array of " + std::to_string(N) + " strings");
        }
    }

private:
    const json* j_;
    std::string path_;
    std::vector<std::string>& out_;
    std::set<std::string> known_;
};

void read_grid(Section s, GridSpec& g) {
    s.dims("dims", g.dims);
    s.vec3("spacing", g.spacing);
    s.vec3("origin", g.origin);
    for (int a = 0; a < 3; ++a) {
        if (g.dims[std::size_t(a)] < 1) s.fail("dims", "must be >= 1");
        if (!(g.spacing[a] > 0.0)) s.fail("spacing", "must be > 0");
    }
}

void read_vessel(Section s, VesselPhantom& v) {
    s.vec3("from", v.from);
    s.vec3("to", v.to);
    s.number("radius", v.radius);
    if (!(v.radius > 0.0)) s.fail("radius", "must be > 0");
    if ((v.from - v.to).norm() == 0.0) s.fail("must have distinct 'from' and 'to' points");
}

void read_tree_spec(Section s, TreeSpec& t) {
    s.integer("terminals", t.terminals);
    s.number("root_radius", t.root_radius);
    if (t.terminals < 1) s.fail("terminals", "must be >= 1");
    if (!(t.root_radius > 0.0)) s.fail("root_radius", "must be > 0");
}

json grid_json(const GridSpec& g) {
    return {{"dims", g.dims},
            {"spacing", {g.spacing.x(), g.spacing.y(), g.spacing.z()}},
            {"origin", {g.origin.x(), g.origin.y(), g.origin.z()}}};
}

json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

voxelio::GridGeometry geometry(const GridSpec& g) {
    voxelio::GridGeometry geom;
    geom.dims = g.dims;
    geom.spacing = g.spacing;
    geom.origin = g.origin;
    return geom;
}

// Input slot of a stage: explicit path, or the producing stage's output.
struct InputSlot {
    const char* key;
    fs::path InputPaths::*member;
    Stage producer;
    const char* default_name;
    std::vector<Stage> consumers;
};

const std::vector<InputSlot>& input_slots() {
    static const std::vector<InputSlot> slots = {
        {"mask", &InputPaths::mask, Stage::segment, "mask.json", {Stage::mesh}},
        {"tet_mesh", &InputPaths::tet_mesh, Stage::mesh, "mesh.vtk", {Stage::treegen, Stage::perfuse}},
        {"portal_stub", &InputPaths::portal_stub, Stage::vessels, "portal_stub.json", {Stage::treegen}},
        {"hepatic_stub", &InputPaths::hepatic_stub, Stage::vessels, "hepatic_stub.json", {Stage::treegen}},
        {"portal_tree", &InputPaths::portal_tree, Stage::treegen, "portal_tree.json", {Stage::flow1d, Stage::perfuse}},
        {"hepatic_tree", &InputPaths::hepatic_tree, Stage::treegen, "hepatic_tree.json", {Stage::perfuse}},
        {"perfusion", &InputPaths::perfusion, Stage::perfuse, "", {Stage::transport}},
    };
    return slots;
}

// ---------------------------------------------------------------------------
// Running.

class Context {
public:
    explicit Context(const PipelineConfig& cfg) : cfg_(cfg) {}

    const PipelineConfig& cfg() const { return cfg_; }

    fs::path out(const std::string& name) const { return cfg_.output_dir / name; }

    /// Where a stage reads one of its inputs.
    fs::path input(const char* key) const {
        for (const auto& s : input_slots())
            if (std::string(s.key) == key) {
                const fs::path& given = cfg_.inputs.*s.member;
                if (!given.empty()) return given;
                return s.default_name[0] ? out(s.default_name) : cfg_.output_dir;
            }
        throw Error(std::string("pipeline: unknown input ") + key);
    }

    void add(Stage stage, const std::string& name) { artifacts_.push_back({to_string(stage), name, "", 0}); }

    std::vector<Artifact> finish() {
        for (auto& a : artifacts_) {
            const fs::path p = out(a.path);
            a.sha256 = sha256_file(p);
            a.bytes = fs::file_size(p);
        }
        return artifacts_;
    }

    void log(Stage s, const std::string& msg) const { std::cerr << "[" << to_string(s) << "] " << msg << std::endl; }

private:
    const PipelineConfig& cfg_;
    std::vector<Artifact> artifacts_;
};

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error("write failed for " + p.string());
}

json read_json(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error("cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(p.string() + ": " + e.what());
    }
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// Seeds from the phantom geometry: core voxels foreground, voxels well
// outside the sphere background.
seg::SeedSet phantom_seeds(const OrganPhantom& ph, const voxelio::GridGeometry& geom) {
    seg::SeedSet s;
    const double margin = 2.0 * geom.spacing.maxCoeff();
    for (int k = 0; k < geom.dims[2]; ++k)
        for (int j = 0; j < geom.dims[1]; ++j)
            for (int i = 0; i < geom.dims[0]; ++i) {
                const double d = (geom.center(i, j, k) - ph.center).norm();
                if (d <= 0.5 * ph.radius) s.foreground.push_back({i, j, k});
                else if (d >= ph.radius + margin) s.background.push_back({i, j, k});
            }
    return s;
}

void stage_segment(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const Stage st = Stage::segment;
    voxelio::VoxelGrid volume;
    seg::SeedSet seeds;
    std::optional<voxelio::BinaryMask> truth;
    if (!cfg.inputs.volume.empty()) {
        volume = voxelio::load_volume(cfg.inputs.volume);
        seeds = seg::load_seeds(cfg.inputs.seeds);
    } else {
        voxelio::PhantomSpec spec;
        spec.kind = voxelio::PhantomKind::sphere;
        spec.geom = geometry(cfg.phantom.grid);
        spec.center = cfg.phantom.center;
        spec.radius = cfg.phantom.radius;
        spec.inside = cfg.phantom.inside;
        spec.outside = cfg.phantom.outside;
        spec.noise_sigma = cfg.phantom.noise_sigma;
        spec.seed = cfg.seed;
        volume = voxelio::make_phantom(spec);
        truth = voxelio::phantom_mask(spec);
        seeds = cfg.inputs.seeds.empty() ? phantom_seeds(cfg.phantom, spec.geom) : seg::load_seeds(cfg.inputs.seeds);
    }
    seg::SegmentationParams sp;
    sp.lambda = *cfg.segmentation.lambda;
    sp.boundary_scale = cfg.segmentation.boundary_scale;
    sp.gmm_components = cfg.segmentation.gmm_components;
    sp.rng_seed = cfg.seed;
    const voxelio::BinaryMask mask = seg::segment(volume, seeds, sp);
    if (mask.empty()) throw Error("segmentation produced an empty mask");

    voxelio::save_volume(volume, ctx.out("volume.json"));
    seg::save_seeds(seeds, ctx.out("seeds.json"));
    voxelio::save_mask(mask, ctx.out("mask.json"));
    json summary = {{"voxels", mask.count()}, {"voxel_volume_mm3", mask.geom.voxel_volume()}};
    if (truth) summary["dice_vs_phantom"] = seg::dice(mask, *truth);
    write_json(ctx.out("segment.json"), summary);
    for (const char* n : {"volume.json", "volume.raw", "seeds.json", "mask.json", "mask.raw", "segment.json"}) ctx.add(st, n);
    ctx.log(st, std::to_string(mask.count()) + " foreground voxels" +
                    (truth ? ", Dice " + fmt("%.6f", seg::dice(mask, *truth)) : std::string()));
}

void stage_mesh(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const Stage st = Stage::mesh;
    const voxelio::BinaryMask mask = voxelio::load_mask(ctx.input("mask"));
    mesh::TaubinParams tp{cfg.mesh.taubin_lambda, cfg.mesh.taubin_mu, cfg.mesh.surface_iterations};
    const mesh::SurfaceMesh raw = mesh::marching_cubes(mask);
    const mesh::SurfaceMesh surface = mesh::taubin_smooth(raw, tp);
    std::optional<mesh::TaubinParams> tet_smooth;
    if (cfg.mesh.tet_boundary_iterations > 0)
        tet_smooth = mesh::TaubinParams{cfg.mesh.taubin_lambda, cfg.mesh.taubin_mu, cfg.mesh.tet_boundary_iterations};
    const mesh::TetMesh tets = mesh::voxel_tet_mesh(mask, tet_smooth);
    const mesh::MeshStats stats = mesh::mesh_stats(tets);

    vtk::write_surface(ctx.out("surface.vtk"), surface);
    vtk::UnstructuredGrid g;
    g.mesh = tets;
    vtk::write_unstructured(ctx.out("mesh.vtk"), g);
    write_json(ctx.out("mesh.json"), {{"surface_vertices", surface.vertices.size()},
                                      {"surface_triangles", surface.triangles.size()},
                                      {"surface_watertight", mesh::is_watertight(surface)},
                                      {"surface_volume_mm3", mesh::enclosed_volume(surface)},
                                      {"raw_surface_volume_mm3", mesh::enclosed_volume(raw)},
                                      {"tet_vertices", tets.vertices.size()},
                                      {"tets", tets.tets.size()},
                                      {"tet_volume_mm3", stats.volume},
                                      {"min_quality", stats.min_quality},
                                      {"inverted_tets", stats.inverted_tets}});
    for (const char* n : {"surface.vtk", "mesh.vtk", "mesh.json"}) ctx.add(st, n);
    ctx.log(st, std::to_string(tets.tets.size()) + " tets, " + std::to_string(surface.triangles.size()) +
                    " surface triangles");
}

tree::VascularTree reconstruct(const Context& ctx, const fs::path& given, const VesselPhantom& ph,
                               const std::string& name) {
    const auto& cfg = ctx.cfg();
    voxelio::VoxelGrid img;
    if (!given.empty()) {
        img = voxelio::load_volume(given);
    } else {
        voxelio::PhantomSpec spec;
        spec.kind = voxelio::PhantomKind::tube;
        spec.geom = geometry(cfg.vessels.grid);
        spec.points = {ph.from, ph.to};
        spec.radius = ph.radius;
        img = voxelio::make_phantom(spec);
    }
    voxelio::save_volume(img, ctx.out(name + "_vessels.json"));
    vessel::VesselMaskParams vp;
    vp.threshold = cfg.vessels.threshold;
    vp.blur_sigma = cfg.vessels.blur_sigma;
    vp.open_radius = cfg.vessels.open_radius;
    vp.close_radius = cfg.vessels.close_radius;
    const voxelio::BinaryMask mask = vessel::extract_vessel_mask(img, vp);
    if (mask.empty()) throw Error(name + " vessel mask is empty");
    const vessel::Skeleton skel = vessel::skeletonize(mask);
    vessel::GraphOptions go;
    go.root_hint = ph.from;
    tree::VascularTree t = vessel::skeleton_to_graph(skel, go);
    if (cfg.vessels.min_radius > 0.0) t = vtree::trim_by_radius(t, cfg.vessels.min_radius);
    tree::validate(t);
    return t;
}

void stage_vessels(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const Stage st = Stage::vessels;
    const tree::VascularTree portal = reconstruct(ctx, cfg.inputs.portal_vessels, cfg.vessels.portal, "portal");
    const tree::VascularTree hepatic = reconstruct(ctx, cfg.inputs.hepatic_vessels, cfg.vessels.hepatic, "hepatic");
    tree::save_tree(portal, ctx.out("portal_stub.json"));
    tree::save_tree(hepatic, ctx.out("hepatic_stub.json"));
    vtk::write_tree(ctx.out("portal_stub.vtk"), portal, "portal vessel stub");
    vtk::write_tree(ctx.out("hepatic_stub.vtk"), hepatic, "hepatic vessel stub");
    for (const char* n : {"portal_vessels.json", "portal_vessels.raw", "hepatic_vessels.json", "hepatic_vessels.raw",
                          "portal_stub.json", "hepatic_stub.json", "portal_stub.vtk", "hepatic_stub.vtk"})
        ctx.add(st, n);
    ctx.log(st, "stubs with " + std::to_string(portal.nodes.size()) + " and " + std::to_string(hepatic.nodes.size()) +
                    " nodes");
}

vtree::TreeGenParams tree_params(const PipelineConfig& cfg, const TreeSpec& spec, std::uint64_t seed) {
    vtree::TreeGenParams p;
    p.volume_weight = cfg.treegen.volume_weight;
    p.friction_weight = cfg.treegen.friction_weight;
    p.viscosity = cfg.fluid.viscosity;
    p.murray_exponent = cfg.treegen.murray_exponent;
    p.root_radius = spec.root_radius;
    p.max_hierarchy_passes = cfg.treegen.max_hierarchy_passes;
    p.seed = seed;
    return p;
}

void stage_treegen(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const Stage st = Stage::treegen;
    const mesh::TetMesh region = vtk::read_unstructured(ctx.input("tet_mesh")).mesh;
    json summary;
    for (int which = 0; which < 2; ++which) {
        const std::string name = which == 0 ? "portal" : "hepatic";
        const TreeSpec& spec = which == 0 ? cfg.treegen.portal : cfg.treegen.hepatic;
        const std::uint64_t seed = cfg.seed + std::uint64_t(which);
        const tree::VascularTree stub = tree::load_tree(ctx.input(which == 0 ? "portal_stub" : "hepatic_stub"));
        const std::vector<Vec3> pts = vtree::sample_terminal_points(region, spec.terminals, seed);
        const vtree::TreeGenParams p = tree_params(cfg, spec, seed);
        vtree::GenerationLog glog;
        const tree::VascularTree t = vtree::generate_tree(stub, pts, p, &glog);
        tree::save_tree(t, ctx.out(name + "_tree.json"));
        vtk::write_tree(ctx.out(name + "_tree.vtk"), t, name + " tree");
        const double cost = vtree::tree_cost(t, p);
        summary[name] = {{"terminals", spec.terminals},
                         {"nodes", t.nodes.size()},
                         {"edges", t.edges.size()},
                         {"star_cost", glog.star_cost},
                         {"pass_costs", glog.pass_costs},
                         {"final_cost", cost}};
        ctx.add(st, name + "_tree.json");
        ctx.add(st, name + "_tree.vtk");
        ctx.log(st, name + ": " + std::to_string(t.edges.size()) + " edges, cost " + fmt("%.6g", glog.star_cost) +
                        " -> " + fmt("%.6g", cost));
    }
    write_json(ctx.out("treegen.json"), summary);
    ctx.add(st, "treegen.json");
}

flow1d::FluidProps fluid(const PipelineConfig& cfg) {
    flow1d::FluidProps p;
    p.density = cfg.fluid.density;
    p.viscosity = cfg.fluid.viscosity;
    return p;
}

void stage_flow1d(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const Stage st = Stage::flow1d;
    const tree::VascularTree t = tree::load_tree(ctx.input("portal_tree"));
    std::map<int, double> tp;
    for (std::size_t v = 0; v < t.nodes.size(); ++v)
        if (t.nodes[v].kind == tree::NodeKind::terminal) tp[int(v)] = cfg.flow1d.terminal_pressure;
    const flow1d::TreeFlowState s = flow1d::solve_tree_flow(t, cfg.perfusion.w0_portal, tp, fluid(cfg));
    const auto tt = flow1d::transit_times(t, s);
    double tmin = std::numeric_limits<double>::infinity(), tmax = 0.0, tsum = 0.0;
    json terminals = json::array();
    for (const auto& [node, time] : tt) {
        tmin = std::min(tmin, time);
        tmax = std::max(tmax, time);
        tsum += time;
        terminals.push_back({{"node", node}, {"transit_time_s", time}});
    }
    const tree::Topology topo = tree::topology(t);
    double q_out = 0.0;
    for (std::size_t e = 0; e < t.edges.size(); ++e)
        if (t.nodes[std::size_t(t.edges[e].child)].kind == tree::NodeKind::terminal) q_out += s.flow(e);
    write_json(ctx.out("flow1d.json"), {{"iterations", s.iterations},
                                        {"residual_norm", s.residual_norm},
                                        {"w0_m_per_s", s.w0},
                                        {"root_pressure_pa", s.p[std::size_t(t.root)]},
                                        {"inflow_mm3_per_s", s.flow(std::size_t(topo.children[std::size_t(t.root)][0])) * 1e9},
                                        {"terminal_outflow_mm3_per_s", q_out * 1e9},
                                        {"transit_time_min_s", tmin},
                                        {"transit_time_max_s", tmax},
                                        {"transit_time_mean_s", tt.empty() ? 0.0 : tsum / double(tt.size())},
                                        {"terminals", terminals}});
    ctx.add(st, "flow1d.json");
    ctx.log(st, "Newton converged in " + std::to_string(s.iterations) + " iterations, root pressure " +
                    fmt("%.4g", s.p[std::size_t(t.root)]) + " Pa");
}

tree::VascularTree with_flows(tree::VascularTree t, const flow1d::TreeFlowState& s) {
    for (std::size_t e = 0; e < t.edges.size(); ++e) t.edges[e].flow = s.flow(e) * 1e9;
    return t;
}

void stage_perfuse(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const Stage st = Stage::perfuse;
    const mesh::TetMesh m = vtk::read_unstructured(ctx.input("tet_mesh")).mesh;
    const tree::VascularTree portal = tree::load_tree(ctx.input("portal_tree"));
    const tree::VascularTree hepatic = tree::load_tree(ctx.input("hepatic_tree"));
    const auto& cc = cfg.compartments;
    darcy::CompartmentSystem sys = darcy::three_compartment_system(m, cc.permeability, cc.g12, cc.g23);
    for (std::size_t i = 0; i < 3; ++i) sys.compartments[i].name = cc.names[i];
    darcy::CouplingOptions opt;
    opt.relaxation = cfg.perfusion.relaxation;
    opt.tolerance = cfg.perfusion.tolerance;
    opt.max_iterations = cfg.perfusion.max_iterations;
    opt.max_distance = cfg.perfusion.max_distance;
    const darcy::CoupledResult r = darcy::couple_1d_3d(portal, hepatic, sys, fluid(cfg), cfg.perfusion.w0_portal, opt);
    const darcy::VelocityField w = darcy::darcy_velocity(r.pressure, r.system);

    vtk::UnstructuredGrid g;
    g.mesh = m;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string k = std::to_string(i + 1);
        const Eigen::VectorXd& p = r.pressure.p[i];
        const Eigen::VectorXd& f = r.system.sources[i];
        g.point_data.push_back(vtk::Field::scalars("p_" + k, std::vector<double>(p.data(), p.data() + p.size())));
        g.point_data.push_back(vtk::Field::scalars("f_" + k, std::vector<double>(f.data(), f.data() + f.size())));
        g.cell_data.push_back(vtk::Field::vectors("w_" + k, w.w[i]));
    }
    vtk::write_unstructured(ctx.out("perfusion.vtk"), g, "multicompartment perfusion");
    tree::save_tree(with_flows(portal, r.portal), ctx.out("portal_flow.json"));
    tree::save_tree(with_flows(hepatic, r.hepatic), ctx.out("hepatic_flow.json"));

    // Earliest portal transit time per source vertex.
    const auto tt = flow1d::transit_times(portal, r.portal);
    std::map<int, double> delay;
    for (std::size_t k = 0; k < r.portal_sources.terminals.size(); ++k) {
        const int v = r.portal_sources.vertices[k];
        const double d = tt.at(r.portal_sources.terminals[k]);
        const auto it = delay.find(v);
        if (it == delay.end() || d < it->second) delay[v] = d;
    }
    json delays = json::array();
    for (const auto& [v, d] : delay) delays.push_back({{"vertex", v}, {"delay_s", d}});
    write_json(ctx.out("terminal_delays.json"), delays);

    const darcy::FluxReport fr = darcy::flux_report(r.system, r.pressure);
    std::vector<std::vector<double>> exch;
    for (Eigen::Index i = 0; i < fr.exchange.rows(); ++i) {
        exch.emplace_back();
        for (Eigen::Index j = 0; j < fr.exchange.cols(); ++j) exch.back().push_back(fr.exchange(i, j));
    }
    const double balance = std::abs(r.portal_inflow - r.hepatic_outflow) / std::max(r.portal_inflow, 1e-300);
    write_json(ctx.out("perfusion.json"), {{"iterations", r.iterations},
                                           {"history", r.history},
                                           {"portal_inflow_mm3_per_s", r.portal_inflow},
                                           {"hepatic_outflow_mm3_per_s", r.hepatic_outflow},
                                           {"relative_balance", balance},
                                           {"portal_root_pressure_pa", r.portal.p[std::size_t(portal.root)]},
                                           {"hepatic_root_pressure_pa", r.hepatic.p[std::size_t(hepatic.root)]},
                                           {"names", cc.names},
                                           {"permeability", cc.permeability},
                                           {"g12", cc.g12},
                                           {"g23", cc.g23},
                                           {"exchange_mm3_per_s", exch},
                                           {"imbalance_mm3_per_s", fr.imbalance()},
                                           {"pcg_iterations", r.pressure.iterations}});
    for (const char* n : {"perfusion.vtk", "perfusion.json", "portal_flow.json", "hepatic_flow.json",
                          "terminal_delays.json"})
        ctx.add(st, n);
    ctx.log(st, "Picard converged in " + std::to_string(r.iterations) + " iterations, inflow " +
                    fmt("%.6g", r.portal_inflow) + " mm^3/s, balance " + fmt("%.3g", balance));
}

void stage_transport(Context& ctx) {
    const auto& cfg = ctx.cfg();
    const Stage st = Stage::transport;
    const fs::path dir = ctx.input("perfusion");
    const vtk::UnstructuredGrid g = vtk::read_unstructured(dir / "perfusion.vtk");
    const json info = read_json(dir / "perfusion.json");

    const std::array<double, 3> k = info.at("permeability").get<std::array<double, 3>>();
    darcy::CompartmentSystem sys =
        darcy::three_compartment_system(g.mesh, k, info.at("g12").get<double>(), info.at("g23").get<double>());
    darcy::PressureField p;
    darcy::VelocityField w;
    sys.sources.resize(3);
    for (std::size_t i = 0; i < 3; ++i) {
        const std::string s = std::to_string(i + 1);
        const auto& pv = g.point_field("p_" + s).values;
        const auto& fv = g.point_field("f_" + s).values;
        p.p.push_back(Eigen::Map<const Eigen::VectorXd>(pv.data(), Eigen::Index(pv.size())));
        sys.sources[i] = Eigen::Map<const Eigen::VectorXd>(fv.data(), Eigen::Index(fv.size()));
        const auto& wv = g.cell_field("w_" + s).values;
        std::vector<Vec3> cells(wv.size() / 3);
        for (std::size_t c = 0; c < cells.size(); ++c) cells[c] = Vec3(wv[3 * c], wv[3 * c + 1], wv[3 * c + 2]);
        w.w.push_back(std::move(cells));
    }

    const TransportConfig& tc = cfg.transport;
    transport::CellSourceOptions so;
    if (tc.delay_by_transit_time)
        for (const auto& d : read_json(dir / "terminal_delays.json"))
            so.vertex_delay[d.at("vertex").get<int>()] = d.at("delay_s").get<double>();
    const std::vector<double> phi(tc.porosity.begin(), tc.porosity.end());
    transport::ProblemReport rep;
    const transport::TransportProblem prob = transport::build_problem(sys, p, w, phi, so, &rep);

    transport::TransportParams tp;
    tp.porosity = phi;
    tp.cfl = tc.cfl;
    tp.end_time = tc.end_time;
    tp.snapshot_interval = tc.snapshot_interval;
    tp.bolus = transport::Bolus{tc.bolus_times, tc.bolus_values};
    tp.delay_by_transit_time = tc.delay_by_transit_time;
    tp.arrival_threshold = tc.arrival_threshold;
    const transport::TransportResult r = transport::simulate_transport(prob, tp);

    std::ostringstream csv;
    csv << "time_s,mass_1_mm3,mass_2_mm3,mass_3_mm3,total_mm3\n";
    for (std::size_t k2 = 0; k2 < r.snapshots.size(); ++k2) {
        const auto& m = r.mass[k2];
        char name[64];
        std::snprintf(name, sizeof name, "transport_%04zu.vtk", k2);
        vtk::UnstructuredGrid out;
        out.mesh = g.mesh;
        for (std::size_t i = 0; i < 3; ++i) {
            const Eigen::VectorXd& s = r.snapshots[k2][i];
            out.cell_data.push_back(
                vtk::Field::scalars("S_" + std::to_string(i + 1), std::vector<double>(s.data(), s.data() + s.size())));
        }
        const Eigen::VectorXd c = transport::total_concentration(r.snapshots[k2], phi);
        out.cell_data.push_back(vtk::Field::scalars("C", std::vector<double>(c.data(), c.data() + c.size())));
        vtk::write_unstructured(ctx.out(name), out, "tracer saturation t = " + fmt("%.17g", r.times[k2]) + " s");
        ctx.add(st, name);
        csv << fmt("%.17g", r.times[k2]);
        for (double x : m) csv << ',' << fmt("%.17g", x);
        csv << ',' << fmt("%.17g", m[0] + m[1] + m[2]) << '\n';
    }
    {
        std::ofstream f(ctx.out("transport_mass.csv"), std::ios::binary);
        f << csv.str();
        if (!f) throw Error("cannot write transport_mass.csv");
    }
    json corr = json::array();
    for (const auto& c : rep.correction)
        corr.push_back({{"max_correction", c.max_correction},
                        {"max_flux", c.max_flux},
                        {"source_imbalance", c.source_imbalance}});
    json arrival = json::array();
    for (double a : r.arrival) arrival.push_back(std::isfinite(a) ? json(a) : json(nullptr));
    write_json(ctx.out("transport.json"), {{"steps", r.steps},
                                           {"dt_s", r.dt},
                                           {"cfl", tc.cfl},
                                           {"injected_mm3", r.ledger.injected},
                                           {"exited_mm3", r.ledger.exited},
                                           {"max_ledger_error", r.max_ledger_error},
                                           {"min_saturation", r.min_saturation},
                                           {"max_saturation", r.max_saturation},
                                           {"arrival_s", arrival},
                                           {"divergence_mismatch", rep.divergence_mismatch},
                                           {"flux_correction", corr}});
    ctx.add(st, "transport_mass.csv");
    ctx.add(st, "transport.json");
    ctx.log(st, std::to_string(r.steps) + " steps of " + fmt("%.4g", r.dt) + " s, ledger error " +
                    fmt("%.3g", r.max_ledger_error));
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> violations)
    : Error(join_lines(violations)), violations_(std::move(violations)) {}

StageError::StageError(std::string stage, const std::string& cause)
    : Error("stage '" + stage + "' failed: " + cause), stage_(std::move(stage)) {}

std::string to_string(Stage s) {
    switch (s) {
        case Stage::segment: return "segment";
        case Stage::mesh: return "mesh";
        case Stage::vessels: return "vessels";
        case Stage::treegen: return "treegen";
        case Stage::flow1d: return "flow1d";
        case Stage::perfuse: return "perfuse";
        case Stage::transport: return "transport";
    }
    return "unknown";
}

Stage stage_from_string(const std::string& s) {
    for (Stage st : kStages)
        if (to_string(st) == s) return st;
    throw Error("unknown stage '" + s + "'");
}

json PipelineConfig::to_json() const {
    json stages_j;
    for (Stage s : kStages) stages_j[to_string(s)] = enabled(s);
    json in;
    for (const auto& [k, v] : std::vector<std::pair<const char*, const fs::path*>>{
             {"volume", &inputs.volume},
             {"seeds", &inputs.seeds},
             {"portal_vessels", &inputs.portal_vessels},
             {"hepatic_vessels", &inputs.hepatic_vessels},
             {"mask", &inputs.mask},
             {"tet_mesh", &inputs.tet_mesh},
             {"portal_stub", &inputs.portal_stub},
             {"hepatic_stub", &inputs.hepatic_stub},
             {"portal_tree", &inputs.portal_tree},
             {"hepatic_tree", &inputs.hepatic_tree},
             {"perfusion", &inputs.perfusion}})
        if (!v->empty()) in[k] = v->generic_string();
    const auto vessel = [](const VesselPhantom& v) {
        return json{{"from", vec_json(v.from)}, {"to", vec_json(v.to)}, {"radius", v.radius}};
    };
    const auto tree_spec = [](const TreeSpec& t) {
        return json{{"terminals", t.terminals}, {"root_radius", t.root_radius}};
    };
    json j = {
        {"seed", seed},
        {"stages", stages_j},
        {"inputs", in.is_null() ? json::object() : in},
        {"phantom",
         {{"grid", grid_json(phantom.grid)},
          {"center", vec_json(phantom.center)},
          {"radius", phantom.radius},
          {"inside", phantom.inside},
          {"outside", phantom.outside},
          {"noise_sigma", phantom.noise_sigma}}},
        {"segmentation",
         {{"lambda", segmentation.lambda ? json(*segmentation.lambda) : json(nullptr)},
          {"boundary_scale", segmentation.boundary_scale},
          {"gmm_components", segmentation.gmm_components}}},
        {"mesh",
         {{"taubin_lambda", mesh.taubin_lambda},
          {"taubin_mu", mesh.taubin_mu},
          {"surface_iterations", mesh.surface_iterations},
          {"tet_boundary_iterations", mesh.tet_boundary_iterations}}},
        {"vessels",
         {{"grid", grid_json(vessels.grid)},
          {"portal", vessel(vessels.portal)},
          {"hepatic", vessel(vessels.hepatic)},
          {"threshold", vessels.threshold ? json(*vessels.threshold) : json(nullptr)},
          {"blur_sigma", vessels.blur_sigma},
          {"open_radius", vessels.open_radius},
          {"close_radius", vessels.close_radius},
          {"min_radius", vessels.min_radius}}},
        {"treegen",
         {{"portal", tree_spec(treegen.portal)},
          {"hepatic", tree_spec(treegen.hepatic)},
          {"volume_weight", treegen.volume_weight},
          {"friction_weight", treegen.friction_weight},
          {"murray_exponent", treegen.murray_exponent},
          {"max_hierarchy_passes", treegen.max_hierarchy_passes}}},
        {"fluid", {{"density", fluid.density}, {"viscosity", fluid.viscosity}}},
        {"flow1d", {{"terminal_pressure", flow1d.terminal_pressure}}},
        {"compartments",
         {{"names", compartments.names},
          {"permeability", compartments.permeability},
          {"g12", compartments.g12},
          {"g23", compartments.g23}}},
        {"perfusion",
         {{"w0_portal", perfusion.w0_portal},
          {"relaxation", perfusion.relaxation},
          {"tolerance", perfusion.tolerance},
          {"max_iterations", perfusion.max_iterations},
          {"max_distance", perfusion.max_distance}}},
        {"transport",
         {{"porosity", transport.porosity},
          {"cfl", transport.cfl},
          {"end_time", transport.end_time},
          {"snapshot_interval", transport.snapshot_interval},
          {"bolus", {{"times", transport.bolus_times}, {"values", transport.bolus_values}}},
          {"delay_by_transit_time", transport.delay_by_transit_time},
          {"arrival_threshold", transport.arrival_threshold}}},
    };
    return j;
}

PipelineConfig validate_config(const fs::path& path, const json& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError({"cannot read config file " + path.string()});
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError({"config file " + path.string() + " is not valid JSON: " + e.what()});
    }
    PipelineConfig cfg = validate_config_json(j, path.parent_path(), overrides);
    cfg.config_path = path;
    return cfg;
}

PipelineConfig validate_config_json(const json& file, const fs::path& base_dir, const json& overrides) {
    json j = file;
    if (!j.is_object()) throw ConfigError({"config must be a JSON object"});
    if (!overrides.is_null()) j.merge_patch(overrides);
    const fs::path base = base_dir.empty() ? fs::path(".") : base_dir;
    auto resolve = [&](const fs::path& p) {
        return p.empty() ? p : (p.is_absolute() ? p : base / p).lexically_normal();
    };

    PipelineConfig c;
    std::vector<std::string> v;
    {
        Section root(&j, "", v);
        root.uint64("seed", c.seed);
        fs::path out = "out";
        root.path("output_dir", out);
        if (out.empty()) root.fail("output_dir", "must not be empty");
        c.output_dir = resolve(out);
        std::string description;
        root.string("description", description);
        {
            Section s = root.sub("stages");
            for (Stage st : kStages) s.boolean(to_string(st), c.stages[std::size_t(st)]);
        }
        {
            Section s = root.sub("inputs");
            s.path("volume", c.inputs.volume);
            s.path("seeds", c.inputs.seeds);
            s.path("portal_vessels", c.inputs.portal_vessels);
            s.path("hepatic_vessels", c.inputs.hepatic_vessels);
            for (const auto& slot : input_slots()) s.path(slot.key, c.inputs.*slot.member);
        }
        {
            Section s = root.sub("phantom");
            read_grid(s.sub("grid"), c.phantom.grid);
            s.vec3("center", c.phantom.center);
            s.number("radius", c.phantom.radius);
            s.number("inside", c.phantom.inside);
            s.number("outside", c.phantom.outside);
            s.number("noise_sigma", c.phantom.noise_sigma);
            if (!(c.phantom.radius > 0.0)) s.fail("radius", "must be > 0");
            if (!(c.phantom.noise_sigma >= 0.0)) s.fail("noise_sigma", "must be >= 0");
            if (c.phantom.inside == c.phantom.outside) s.fail("must have different inside and outside intensities");
        }
        {
            Section s = root.sub("segmentation");
            if (s.raw("lambda")) {
                double lambda = 0.0;
                s.number("lambda", lambda);
                c.segmentation.lambda = lambda;
                if (!(lambda >= 0.0)) s.fail("lambda", "must be >= 0 (weight of the region term)");
            } else if (c.enabled(Stage::segment)) {
                s.fail("lambda", "is required by the segment stage (weight of the region term, no default)");
            }
            s.number("boundary_scale", c.segmentation.boundary_scale);
            s.integer("gmm_components", c.segmentation.gmm_components);
            if (!(c.segmentation.boundary_scale > 0.0)) s.fail("boundary_scale", "must be > 0");
            if (c.segmentation.gmm_components < 1) s.fail("gmm_components", "must be >= 1");
        }
        {
            Section s = root.sub("mesh");
            s.number("taubin_lambda", c.mesh.taubin_lambda);
            s.number("taubin_mu", c.mesh.taubin_mu);
            s.integer("surface_iterations", c.mesh.surface_iterations);
            s.integer("tet_boundary_iterations", c.mesh.tet_boundary_iterations);
            if (!(c.mesh.taubin_lambda > 0.0)) s.fail("taubin_lambda", "must be > 0");
            if (!(c.mesh.taubin_mu < -c.mesh.taubin_lambda)) s.fail("taubin_mu", "must be < -taubin_lambda");
            if (c.mesh.surface_iterations < 0) s.fail("surface_iterations", "must be >= 0");
            if (c.mesh.tet_boundary_iterations < 0) s.fail("tet_boundary_iterations", "must be >= 0");
        }
        {
            Section s = root.sub("vessels");
            read_grid(s.sub("grid"), c.vessels.grid);
            read_vessel(s.sub("portal"), c.vessels.portal);
            read_vessel(s.sub("hepatic"), c.vessels.hepatic);
            if (const json* t = s.raw("threshold")) {
                if (t->is_number()) c.vessels.threshold = t->get<double>();
                else if (!t->is_null()) s.fail("threshold", "must be a number or null");
            }
            s.number("blur_sigma", c.vessels.blur_sigma);
            s.integer("open_radius", c.vessels.open_radius);
            s.integer("close_radius", c.vessels.close_radius);
            s.number("min_radius", c.vessels.min_radius);
            if (!(c.vessels.blur_sigma >= 0.0)) s.fail("blur_sigma", "must be >= 0");
            if (c.vessels.open_radius < 0) s.fail("open_radius", "must be >= 0");
            if (c.vessels.close_radius < 0) s.fail("close_radius", "must be >= 0");
            if (!(c.vessels.min_radius >= 0.0)) s.fail("min_radius", "must be >= 0");
        }
        {
            Section s = root.sub("treegen");
            read_tree_spec(s.sub("portal"), c.treegen.portal);
            read_tree_spec(s.sub("hepatic"), c.treegen.hepatic);
            s.number("volume_weight", c.treegen.volume_weight);
            s.number("friction_weight", c.treegen.friction_weight);
            s.number("murray_exponent", c.treegen.murray_exponent);
            s.integer("max_hierarchy_passes", c.treegen.max_hierarchy_passes);
            if (!(c.treegen.volume_weight >= 0.0)) s.fail("volume_weight", "must be >= 0");
            if (!(c.treegen.friction_weight >= 0.0)) s.fail("friction_weight", "must be >= 0");
            if (!(c.treegen.volume_weight + c.treegen.friction_weight > 0.0))
                s.fail("needs a positive volume_weight or friction_weight");
            if (!(c.treegen.murray_exponent > 0.0)) s.fail("murray_exponent", "must be > 0");
            if (c.treegen.max_hierarchy_passes < 0) s.fail("max_hierarchy_passes", "must be >= 0");
        }
        {
            Section s = root.sub("fluid");
            s.number("density", c.fluid.density);
            s.number("viscosity", c.fluid.viscosity);
            if (!(c.fluid.density > 0.0)) s.fail("density", "must be > 0 (kg/m^3)");
            if (!(c.fluid.viscosity > 0.0)) s.fail("viscosity", "must be > 0 (Pa s)");
        }
        {
            Section s = root.sub("flow1d");
            s.number("terminal_pressure", c.flow1d.terminal_pressure);
        }
        {
            Section s = root.sub("compartments");
            s.strings("names", c.compartments.names);
            s.numbers("permeability", c.compartments.permeability);
            s.number("g12", c.compartments.g12);
            s.number("g23", c.compartments.g23);
            for (double k : c.compartments.permeability)
                if (!(k > 0.0)) {
                    s.fail("permeability", "must be > 0 (mm^2/(Pa s))");
                    break;
                }
            if (!(c.compartments.g12 >= 0.0)) s.fail("g12", "must be >= 0 (1/(Pa s))");
            if (!(c.compartments.g23 >= 0.0)) s.fail("g23", "must be >= 0 (1/(Pa s))");
        }
        {
            Section s = root.sub("perfusion");
            s.number("w0_portal", c.perfusion.w0_portal);
            s.number("relaxation", c.perfusion.relaxation);
            s.number("tolerance", c.perfusion.tolerance);
            s.integer("max_iterations", c.perfusion.max_iterations);
            s.number("max_distance", c.perfusion.max_distance);
            if (!(c.perfusion.w0_portal > 0.0)) s.fail("w0_portal", "must be > 0 (m/s)");
            if (!(c.perfusion.relaxation > 0.0 && c.perfusion.relaxation <= 1.0)) s.fail("relaxation", "must be in (0, 1]");
            if (!(c.perfusion.tolerance > 0.0)) s.fail("tolerance", "must be > 0");
            if (c.perfusion.max_iterations < 1) s.fail("max_iterations", "must be >= 1");
            if (!(c.perfusion.max_distance > 0.0)) s.fail("max_distance", "must be > 0 (mm)");
        }
        {
            Section s = root.sub("transport");
            s.numbers("porosity", c.transport.porosity);
            s.number("cfl", c.transport.cfl);
            s.number("end_time", c.transport.end_time);
            s.number("snapshot_interval", c.transport.snapshot_interval);
            {
                Section b = s.sub("bolus");
                b.numbers("times", c.transport.bolus_times);
                b.numbers("values", c.transport.bolus_values);
                if (c.transport.bolus_times.size() != c.transport.bolus_values.size() || c.transport.bolus_times.empty())
                    b.fail("times and values must be non-empty and of equal length");
                if (!std::is_sorted(c.transport.bolus_times.begin(), c.transport.bolus_times.end()))
                    b.fail("times", "must be ascending");
                for (double x : c.transport.bolus_values)
                    if (!(x >= 0.0 && x <= 1.0)) {
                        b.fail("values", "must be in [0, 1]");
                        break;
                    }
            }
            s.boolean("delay_by_transit_time", c.transport.delay_by_transit_time);
            s.number("arrival_threshold", c.transport.arrival_threshold);
            double sum = 0.0;
            for (double p : c.transport.porosity) {
                if (!(p > 0.0)) s.fail("porosity", "entries must be > 0");
                sum += p;
            }
            if (sum > 1.0 + 1e-12) s.fail("porosity", "must sum to <= 1");
            if (!(c.transport.cfl > 0.0 && c.transport.cfl <= 1.0)) s.fail("cfl", "must be in (0, 1]");
            if (!(c.transport.end_time >= 0.0)) s.fail("end_time", "must be >= 0 (s)");
            if (!(c.transport.snapshot_interval > 0.0)) s.fail("snapshot_interval", "must be > 0 (s)");
            else if (c.transport.end_time / c.transport.snapshot_interval > 10000.0)
                s.fail("snapshot_interval", "gives more than 10000 snapshots");
            if (!(c.transport.arrival_threshold > 0.0 && c.transport.arrival_threshold < 1.0))
                s.fail("arrival_threshold", "must be in (0, 1)");
        }
    }

    // Input files.
    auto& in = c.inputs;
    for (fs::path* p : {&in.volume, &in.seeds, &in.portal_vessels, &in.hepatic_vessels}) *p = resolve(*p);
    for (const auto& slot : input_slots()) in.*slot.member = resolve(in.*slot.member);
    auto must_exist = [&](const fs::path& p, const std::string& key) {
        if (!p.empty() && !fs::exists(p)) v.push_back("inputs." + key + " does not exist: " + p.string());
    };
    must_exist(in.volume, "volume");
    must_exist(in.seeds, "seeds");
    must_exist(in.portal_vessels, "portal_vessels");
    must_exist(in.hepatic_vessels, "hepatic_vessels");
    if (!in.volume.empty() && in.seeds.empty()) v.push_back("inputs.seeds is required with inputs.volume");

    for (const auto& slot : input_slots()) {
        const fs::path& given = in.*slot.member;
        bool consumed = false;
        for (Stage s : slot.consumers) consumed = consumed || c.enabled(s);
        if (!given.empty()) {
            must_exist(given, slot.key);
            if (c.enabled(slot.producer))
                v.push_back("inputs." + std::string(slot.key) + " conflicts with the enabled stage '" +
                            to_string(slot.producer) + "' that produces it");
            continue;
        }
        if (!consumed || c.enabled(slot.producer)) continue;
        const fs::path def = slot.default_name[0] ? c.output_dir / slot.default_name : c.output_dir / "perfusion.vtk";
        if (!fs::exists(def)) {
            std::string users;
            for (Stage s : slot.consumers)
                if (c.enabled(s)) users += (users.empty() ? "" : ", ") + to_string(s);
            v.push_back("stage '" + users + "' needs " + slot.key + " but stage '" + to_string(slot.producer) +
                        "' is disabled and " + def.string() + " does not exist (set inputs." + slot.key + ")");
        }
    }
    if (!v.empty()) throw ConfigError(v);
    return c;
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error("sha256: init failed");
    }
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), std::streamsize(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), std::size_t(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned int k = 0; k < len; ++k) {
        s += hex[md[k] >> 4];
        s += hex[md[k] & 15];
    }
    return s;
}

RunResult run_pipeline(const PipelineConfig& cfg) {
    try {
        fs::create_directories(cfg.output_dir);
    } catch (const fs::filesystem_error& e) {
        throw StageError("setup", e.what());
    }
    Context ctx(cfg);
    json ran = json::array();
    for (Stage s : kStages) {
        if (!cfg.enabled(s)) continue;
        try {
            switch (s) {
                case Stage::segment: stage_segment(ctx); break;
                case Stage::mesh: stage_mesh(ctx); break;
                case Stage::vessels: stage_vessels(ctx); break;
                case Stage::treegen: stage_treegen(ctx); break;
                case Stage::flow1d: stage_flow1d(ctx); break;
                case Stage::perfuse: stage_perfuse(ctx); break;
                case Stage::transport: stage_transport(ctx); break;
            }
        } catch (const std::exception& e) {
            throw StageError(to_string(s), e.what());
        }
        ran.push_back(to_string(s));
    }
    RunResult res;
    res.artifacts = ctx.finish();
    json arts = json::array();
    for (const auto& a : res.artifacts)
        arts.push_back({{"stage", a.stage}, {"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
    res.manifest = {{"seed", cfg.seed}, {"stages", ran}, {"config", cfg.to_json()}, {"artifacts", arts}};
    write_json(cfg.output_dir / "manifest.json", res.manifest);
    return res;
}

}  // namespace liverperf::pipeline
