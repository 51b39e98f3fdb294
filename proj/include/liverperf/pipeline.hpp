#pragma once

// Configuration and orchestration of the phantom-to-perfusion run:
// segment -> mesh -> vessels -> treegen -> flow1d -> perfuse -> transport.
// Every stage reads its inputs from files and writes its outputs to the
// output directory, so stages can also run one at a time.

#include "liverperf/common.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace liverperf::pipeline {

namespace fs = std::filesystem;

/// Invalid configuration; what() lists every violation, one per line.
class ConfigError : public Error {
public:
    explicit ConfigError(std::vector<std::string> violations);
    const std::vector<std::string>& violations() const { return violations_; }

private:
    std::vector<std::string> violations_;
};

/// A stage failed; what() is "stage '<name>' failed: <cause>".
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& cause);
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

enum class Stage { segment, mesh, vessels, treegen, flow1d, perfuse, transport };
inline constexpr std::array<Stage, 7> kStages = {Stage::segment, Stage::mesh,    Stage::vessels,  Stage::treegen,
                                                 Stage::flow1d,  Stage::perfuse, Stage::transport};
std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct GridSpec {
    std::array<int, 3> dims{24, 24, 24};
    Vec3 spacing{2.0, 2.0, 2.0};
    Vec3 origin{0.0, 0.0, 0.0};
};

struct OrganPhantom {
    GridSpec grid;
    Vec3 center{23.0, 23.0, 23.0};
    double radius = 18.0;
    double inside = 100.0;
    double outside = 0.0;
    double noise_sigma = 1.0;  ///< 1% of the contrast
};

struct VesselPhantom {
    Vec3 from{0.0, 0.0, 0.0};  ///< root end (mm)
    Vec3 to{0.0, 0.0, 0.0};
    double radius = 3.0;
};

struct SegmentConfig {
    std::optional<double> lambda;  ///< required when the segment stage runs
    double boundary_scale = 10.0;
    int gmm_components = 3;
};

struct MeshConfig {
    double taubin_lambda = 0.33;
    double taubin_mu = -0.34;
    int surface_iterations = 20;
    int tet_boundary_iterations = 5;  ///< 0 = no boundary smoothing
};

struct VesselConfig {
    GridSpec grid{{48, 48, 48}, {1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}};
    VesselPhantom portal{{3.0, 23.0, 23.0}, {15.0, 23.0, 23.0}, 3.0};
    VesselPhantom hepatic{{43.0, 23.0, 23.0}, {31.0, 23.0, 23.0}, 3.0};
    std::optional<double> threshold;  ///< unset: Otsu
    double blur_sigma = 0.0;
    int open_radius = 0;
    int close_radius = 0;
    double min_radius = 0.0;  ///< mm, trim thinner reconstructed branches
};

struct TreeSpec {
    int terminals = 40;
    double root_radius = 1.5;  ///< mm
};

struct TreeGenConfig {
    TreeSpec portal{40, 1.5};
    TreeSpec hepatic{40, 1.8};
    double volume_weight = 1.0;
    double friction_weight = 1.0;
    double murray_exponent = 3.0;
    int max_hierarchy_passes = 3;
};

struct FluidConfig {
    double density = 1050.0;     ///< kg/m^3
    double viscosity = 3.5e-3;   ///< Pa s
};

struct Flow1dConfig {
    double terminal_pressure = 0.0;  ///< Pa, all portal terminals
};

struct CompartmentConfig {
    std::array<std::string, 3> names{"portal", "filtration", "hepatic"};
    std::array<double, 3> permeability{50.0, 20.0, 50.0};  ///< mm^2/(Pa s)
    double g12 = 1e-3;  ///< 1/(Pa s)
    double g23 = 1e-3;
};

struct PerfusionConfig {
    double w0_portal = 0.1;  ///< m/s, portal root velocity
    double relaxation = 1.0;
    double tolerance = 1e-6;
    int max_iterations = 100;
    double max_distance = 5.0;  ///< mm
};

struct TransportConfig {
    std::array<double, 3> porosity{0.2, 0.1, 0.2};
    double cfl = 0.4;
    double end_time = 30.0;         ///< s
    double snapshot_interval = 5.0; ///< s
    std::vector<double> bolus_times{0.0, 0.0};
    std::vector<double> bolus_values{0.0, 1.0};
    bool delay_by_transit_time = false;
    double arrival_threshold = 0.01;
};

/// Input files that replace a stage's generated or upstream input. Empty
/// means: generate (volume, vessel images) or read the upstream output.
struct InputPaths {
    fs::path volume, seeds, portal_vessels, hepatic_vessels;  ///< replace the phantoms
    fs::path mask, tet_mesh, portal_stub, hepatic_stub, portal_tree, hepatic_tree;
    fs::path perfusion;  ///< directory holding the perfuse outputs
};

struct PipelineConfig {
    fs::path config_path;
    fs::path output_dir;  ///< resolved against the config file's directory
    std::uint64_t seed = 1;
    std::array<bool, 7> stages{true, true, true, true, true, true, true};
    InputPaths inputs;
    OrganPhantom phantom;
    SegmentConfig segmentation;
    MeshConfig mesh;
    VesselConfig vessels;
    TreeGenConfig treegen;
    FluidConfig fluid;
    Flow1dConfig flow1d;
    CompartmentConfig compartments;
    PerfusionConfig perfusion;
    TransportConfig transport;

    bool enabled(Stage s) const { return stages[std::size_t(s)]; }
    /// Canonical JSON of the fully defaulted configuration (paths as given).
    nlohmann::json to_json() const;
};

/// Parses and checks a configuration. `overrides` is merged into the file's
/// JSON first (object members replace recursively). Throws ConfigError
/// listing every violation: unknown keys, wrong types, out-of-range values,
/// missing input files and enabled stages whose inputs nobody produces.
PipelineConfig validate_config(const fs::path& path, const nlohmann::json& overrides = nlohmann::json::object());
PipelineConfig validate_config_json(const nlohmann::json& j, const fs::path& base_dir,
                                    const nlohmann::json& overrides = nlohmann::json::object());

struct Artifact {
    std::string stage;
    std::string path;  ///< relative to the output directory, '/' separated
    std::string sha256;
    std::uintmax_t bytes = 0;
};

struct RunResult {
    std::vector<Artifact> artifacts;
    nlohmann::json manifest;
};

/// Runs the enabled stages in order and writes manifest.json. Throws
/// StageError naming the failing stage.
RunResult run_pipeline(const PipelineConfig& cfg);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const fs::path& path);

}  // namespace liverperf::pipeline
