#pragma once

// Centerline graph extraction from a contrast volume:
// blur -> threshold -> open -> close -> thinning -> graph with radii.

#include "liverperf/tree.hpp"
#include "liverperf/voxelio.hpp"

#include <optional>
#include <vector>

namespace liverperf::vessel {

using voxelio::BinaryMask;
using voxelio::VoxelGrid;

struct OtsuResult {
    double threshold = 0.0;  ///< lower edge of the first foreground bin
    int bin = 0;             ///< first bin of the upper class, in [1, 255]
};

/// Otsu's criterion on a 256-bin histogram spanning [min, max]. Ties keep the
/// lowest bin. Throws "degenerate histogram" for constant grids.
OtsuResult otsu(const VoxelGrid& grid);
double auto_threshold(const VoxelGrid& grid);

struct VesselMaskParams {
    std::optional<double> threshold;  ///< unset: Otsu on the blurred grid
    double blur_sigma = 0.0;          ///< mm, isotropic
    int open_radius = 0;
    int close_radius = 0;
};

/// Voxels >= threshold after blurring, then opened and closed.
BinaryMask extract_vessel_mask(const VoxelGrid& grid, const VesselMaskParams& params);

/// Exact Euclidean distance (mm) from each foreground voxel center to the
/// nearest background voxel center, with everything outside the grid
/// counted as background. Background voxels get 0.
VoxelGrid distance_transform(const BinaryMask& mask);

/// Vessel radius from a distance-transform value: the distance reaches the
/// first background center, so half a voxel is taken off, and the result is
/// never below half the voxel diagonal (the radius of a lone voxel).
double radius_from_distance(double d, const Vec3& spacing);

/// Simple-point test for the (26, 6) connectivity pair.
bool is_simple(const BinaryMask& mask, int i, int j, int k);

/// Number of foreground voxels among the 26 neighbours.
int neighbour_count(const BinaryMask& mask, int i, int j, int k);

/// 26-connected foreground components.
int foreground_components(const BinaryMask& mask);
/// 6-connected background components, the outside of the grid counting as
/// background (so it joins every component touching the border).
int background_components(const BinaryMask& mask);

struct Skeleton {
    voxelio::GridGeometry geom;
    std::vector<std::size_t> voxels;  ///< linear indices, ascending
    std::vector<double> radius;       ///< mm, per voxel

    BinaryMask mask() const;
};

/// Directional sequential thinning: six sub-iterations per sweep, each
/// deleting border voxels (open towards that face) that are simple and not
/// endpoints (at most one neighbour), re-checked one by one in index order.
/// End branches no longer than the local vessel radius are then pruned,
/// since they come from surface bumps rather than vessels.
Skeleton skeletonize(const BinaryMask& mask);

struct GraphOptions {
    /// Root = endpoint nearest to this point; unset: endpoint of largest radius.
    std::optional<Vec3> root_hint;
};

/// Nodes at endpoints and at 26-connected clusters of branch voxels (three
/// or more neighbours). Edges follow the voxel paths between them: length is
/// the polyline arclength, radius the mean voxel radius along the path.
/// Only the largest connected component is kept. Edges are directed away
/// from the root; edges closing a cycle are kept and flagged.
tree::VascularTree skeleton_to_graph(const Skeleton& skel, const GraphOptions& opt = {});

}  // namespace liverperf::vessel
