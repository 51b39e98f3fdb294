#pragma once

// Surface and volume meshes from binary masks: marching cubes, Taubin
// smoothing and the voxel (Kuhn) tetrahedral generator.

#include "liverperf/voxelio.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace liverperf::mesh {

using voxelio::BinaryMask;

using Tri = std::array<int, 3>;
using Tet = std::array<int, 4>;

struct SurfaceMesh {
    std::vector<Vec3> vertices;
    std::vector<Tri> triangles;
};

struct TetMesh {
    std::vector<Vec3> vertices;
    std::vector<Tet> tets;
    std::vector<int> cell_tags;  ///< optional; empty or one per tet (source voxel index for voxel meshes)
};

/// 0.5-isosurface of the mask with out-of-grid voxels treated as background.
///
/// Each dual cell (eight neighbouring voxel centers) is triangulated by
/// tracing, on each of its six faces, the segments that separate inside
/// from outside corners. A face whose inside corners are diagonal
/// (ambiguous: the face-center sample is exactly 0.5) always cuts both
/// inside corners off, so the two cells sharing the face agree and the
/// result is watertight. Traced loops of three vertices become one
/// triangle; longer loops are fanned around an added centroid vertex.
/// Vertices sit at the midpoint between opposite-state voxel centers and
/// are keyed by global edge id. Triangles are wound so their normals point
/// out of the foreground.
SurfaceMesh marching_cubes(const BinaryMask& mask);

struct TaubinParams {
    double lambda = 0.33;
    double mu = -0.34;
    int iterations = 20;
};

/// Alternating umbrella-operator steps with factors lambda and mu.
/// Vertices without neighbours stay fixed.
SurfaceMesh taubin_smooth(const SurfaceMesh& mesh, const TaubinParams& params);

/// Same filter restricted to a vertex subset; `movable[v]` selects the
/// vertices that are updated, neighbourhoods come from `triangles`.
void taubin_smooth_vertices(std::vector<Vec3>& vertices, const std::vector<Tri>& triangles,
                            const std::vector<std::uint8_t>& movable, const TaubinParams& params);

/// Signed volume enclosed by a closed, outward-wound surface.
double enclosed_volume(const SurfaceMesh& mesh);

/// Undirected edges with the number of triangles using each.
std::vector<std::pair<std::array<int, 2>, int>> edge_incidence(const SurfaceMesh& mesh);
bool is_watertight(const SurfaceMesh& mesh);

/// Six Kuhn tetrahedra per foreground voxel (all sharing the voxel's
/// min-corner to max-corner diagonal), which conform across neighbouring
/// voxels. With `smooth_boundary` set, Taubin smoothing moves the boundary
/// vertices along the boundary surface; an inverted tetrahedron after
/// smoothing raises an error.
TetMesh voxel_tet_mesh(const BinaryMask& mask, const std::optional<TaubinParams>& smooth_boundary = std::nullopt);

double tet_signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);
double tet_signed_volume(const TetMesh& mesh, std::size_t t);

/// Normalized radius ratio 3 r_in / r_circ (1 for the regular tetrahedron).
double tet_quality(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);

/// Faces referenced by exactly one tetrahedron, wound outward.
std::vector<Tri> boundary_faces(const TetMesh& mesh);
SurfaceMesh boundary_surface(const TetMesh& mesh);

struct MeshStats {
    double volume = 0.0;
    double min_quality = 0.0;
    double max_quality = 0.0;
    std::size_t boundary_face_count = 0;
    std::size_t inverted_tets = 0;
};

MeshStats mesh_stats(const TetMesh& mesh);

/// Structured box of n[0] x n[1] x n[2] voxels of size h, Kuhn-split. The
/// min corner of the box is `lo`.
TetMesh box_tet_mesh(const std::array<int, 3>& n, const Vec3& h, const Vec3& lo = Vec3::Zero());

/// Drops vertices not used by any tet and renumbers.
void compact(TetMesh& mesh);

}  // namespace liverperf::mesh
