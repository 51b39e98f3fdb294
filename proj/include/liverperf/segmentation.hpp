#pragma once

// Seeded graph-cut segmentation: E(A) = lambda * R(A) + B(A), minimized
// exactly by an s-t minimum cut.
//
//   R(A) = sum_p -log P(I_p | label_p)        Gaussian-mixture likelihoods
//   B(A) = sum_{p~q, A_p != A_q} exp(-(I_p - I_q)^2 / (2 sigma_B^2))
//
// with p~q ranging over 6-connected voxel pairs.

#include "liverperf/voxelio.hpp"

#include <cstdint>
#include <vector>

namespace liverperf::seg {

using voxelio::BinaryMask;
using voxelio::Index3;
using voxelio::VoxelGrid;

struct SeedSet {
    std::vector<Index3> foreground;
    std::vector<Index3> background;
};

/// Reads `{"foreground": [[i,j,k],...], "background": [[i,j,k],...]}`.
SeedSet load_seeds(const std::filesystem::path& path);
void save_seeds(const SeedSet& seeds, const std::filesystem::path& path);
/// Throws on empty sides, out-of-bounds or shared indices.
void validate_seeds(const SeedSet& seeds, const voxelio::GridGeometry& geom);

struct GmmComponent {
    double weight;
    double mean;
    double variance;
};

struct GmmModel {
    std::vector<GmmComponent> components;

    double density(double x) const;
    /// -log density, evaluated in log space so distant samples stay finite.
    double neg_log_likelihood(double x) const;
};

struct GmmFitResult {
    GmmModel model;
    std::vector<double> log_likelihood_trace;  ///< one entry per EM iteration
    int iterations = 0;
};

struct GmmOptions {
    int max_iterations = 200;
    double tolerance = 1e-6;       ///< stop when the log-likelihood gain drops below
    double variance_floor = -1.0;  ///< negative: 1e-6 * range^2 of the samples (1e-6 if range is 0)
};

/// 1D EM fit with k-means++ seeding. Throws if k exceeds the number of
/// distinct sample values.
GmmFitResult fit_gmm(const std::vector<double>& samples, int k, std::uint64_t seed, const GmmOptions& opt = {});

struct SegmentationParams {
    double lambda = 1.0;
    double boundary_scale = 10.0;
    int gmm_components = 3;
    /// Terminal capacity for seeds. Raised automatically to exceed every
    /// seed-consistent cut, so any value keeps seeds hard.
    double hard_seed_weight = 1e9;
    std::uint64_t rng_seed = 0;
};

struct Arc {
    int from;
    int to;
    double capacity;
};

/// Voxels are nodes 0..n-1; `source` = n, `sink` = n+1.
struct FlowNetwork {
    int node_count = 0;
    int source = 0;
    int sink = 0;
    std::vector<Arc> arcs;

    FlowNetwork() = default;
    explicit FlowNetwork(int inner_nodes) : node_count(inner_nodes + 2), source(inner_nodes), sink(inner_nodes + 1) {}
    void add_arc(int from, int to, double cap) { arcs.push_back({from, to, cap}); }
};

struct MaxFlowResult {
    double flow = 0.0;
    std::vector<std::uint8_t> source_side;  ///< per node; source side of the minimum cut
};

/// Exact maximum flow by Dinic's blocking-flow method. The returned
/// partition is the set of nodes reachable from the source in the final
/// residual graph.
MaxFlowResult max_flow(const FlowNetwork& net);

/// Sum of capacities of arcs leaving the source side.
double cut_capacity(const FlowNetwork& net, const std::vector<std::uint8_t>& source_side);

FlowNetwork build_graph(const VoxelGrid& grid, const SeedSet& seeds, const GmmModel& fg, const GmmModel& bg,
                        const SegmentationParams& params);

/// lambda * R(A) + B(A) by direct summation.
double energy(const BinaryMask& mask, const VoxelGrid& grid, const GmmModel& fg, const GmmModel& bg,
              const SegmentationParams& params);

double boundary_weight(double a, double b, double boundary_scale);

struct SegmentationResult {
    BinaryMask mask;
    GmmModel foreground_model;
    GmmModel background_model;
    double flow = 0.0;
};

SegmentationResult segment_detailed(const VoxelGrid& grid, const SeedSet& seeds, const SegmentationParams& params);
BinaryMask segment(const VoxelGrid& grid, const SeedSet& seeds, const SegmentationParams& params);

/// Dice overlap 2|A & B| / (|A| + |B|); 1 for two empty masks.
double dice(const BinaryMask& a, const BinaryMask& b);

}  // namespace liverperf::seg
