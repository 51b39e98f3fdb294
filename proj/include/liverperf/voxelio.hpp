#pragma once

// Volume data model, the header+raw volume file format, synthetic phantoms
// and the low-level filters shared by segmentation and vessel extraction.
//
// Axis order is fixed everywhere: x runs fastest, then y, then z, so the
// linear index of voxel (i, j, k) is i + dims[0] * (j + dims[1] * k).
// Voxel (i, j, k) has its center at origin + (i, j, k) * spacing (mm).

#include "liverperf/common.hpp"

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace liverperf::voxelio {

using Dims = std::array<int, 3>;
using Index3 = std::array<int, 3>;

enum class DType { u8, i16, f32 };

std::string to_string(DType t);
DType dtype_from_string(const std::string& s);

/// Geometry shared by grids and masks.
struct GridGeometry {
    Dims dims{1, 1, 1};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    std::size_t size() const { return std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]); }
    std::size_t linear(int i, int j, int k) const {
        return std::size_t(i) + std::size_t(dims[0]) * (std::size_t(j) + std::size_t(dims[1]) * std::size_t(k));
    }
    std::size_t linear(const Index3& ijk) const { return linear(ijk[0], ijk[1], ijk[2]); }
    Index3 unravel(std::size_t idx) const;
    bool in_bounds(int i, int j, int k) const {
        return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
    }
    Vec3 center(int i, int j, int k) const {
        return origin + Vec3(i * spacing[0], j * spacing[1], k * spacing[2]);
    }
    double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

    /// Throws unless dims >= 1 and spacing > 0 on every axis.
    void validate() const;
    bool same_shape(const GridGeometry& o) const { return dims == o.dims; }
};

struct VoxelGrid {
    GridGeometry geom;
    DType dtype = DType::f32;
    std::vector<double> values;

    VoxelGrid() = default;
    VoxelGrid(const GridGeometry& g, double fill = 0.0, DType t = DType::f32)
        : geom(g), dtype(t), values(g.size(), fill) {}

    double& at(int i, int j, int k) { return values[geom.linear(i, j, k)]; }
    double at(int i, int j, int k) const { return values[geom.linear(i, j, k)]; }
};

struct BinaryMask {
    GridGeometry geom;
    std::vector<std::uint8_t> values;

    BinaryMask() = default;
    explicit BinaryMask(const GridGeometry& g, bool fill = false) : geom(g), values(g.size(), fill ? 1 : 0) {}

    bool at(int i, int j, int k) const { return values[geom.linear(i, j, k)] != 0; }
    /// Out-of-bounds reads return background.
    bool get(int i, int j, int k) const { return geom.in_bounds(i, j, k) && at(i, j, k); }
    void set(int i, int j, int k, bool v) { values[geom.linear(i, j, k)] = v ? 1 : 0; }
    std::size_t count() const;
    bool empty() const { return count() == 0; }
};

// ---- file format ---------------------------------------------------------
// A volume is a JSON header (`<name>.json`) next to a raw little-endian
// payload. The header names the payload file relative to itself.

VoxelGrid load_volume(const std::filesystem::path& header_path);

/// Writes `header_path` and its payload (same stem, `.raw`). Values must be
/// representable in the grid's dtype: integer dtypes reject fractional or
/// out-of-range values, f32 rounds to nearest.
void save_volume(const VoxelGrid& grid, const std::filesystem::path& header_path);

BinaryMask load_mask(const std::filesystem::path& header_path);
void save_mask(const BinaryMask& mask, const std::filesystem::path& header_path);

VoxelGrid mask_to_grid(const BinaryMask& mask);
BinaryMask grid_to_mask(const VoxelGrid& grid, double threshold);

// ---- phantoms --------------------------------------------------------------

enum class PhantomKind { sphere, ellipsoid, tube, y_tube };

struct PhantomSpec {
    PhantomKind kind = PhantomKind::sphere;
    GridGeometry geom;
    Vec3 center{0, 0, 0};           ///< sphere / ellipsoid center (mm)
    double radius = 0.0;            ///< sphere radius, tube radius (mm)
    Vec3 semi_axes{0, 0, 0};        ///< ellipsoid semi-axes (mm)
    std::vector<Vec3> points;       ///< tube: {a, b}; y_tube: {junction, end1, end2, end3}
    double inside = 100.0;
    double outside = 0.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
};

PhantomKind phantom_kind_from_string(const std::string& s);

/// Analytic membership test used both for rendering phantoms and as ground
/// truth in tests. Tubes are capsules: all points within `radius` of the
/// axis segment(s).
bool phantom_contains(const PhantomSpec& spec, const Vec3& p);

VoxelGrid make_phantom(const PhantomSpec& spec);
BinaryMask phantom_mask(const PhantomSpec& spec);

// ---- filters ---------------------------------------------------------------

/// Separable Gaussian with a kernel truncated at +-3 sigma and normalized
/// to unit sum; borders replicate the edge voxel. `sigma_mm` is per axis.
VoxelGrid gaussian_blur(const VoxelGrid& grid, const Vec3& sigma_mm);

BinaryMask erode(const BinaryMask& mask, int radius);
BinaryMask dilate(const BinaryMask& mask, int radius);
/// Opening and closing with the 6-connected ball of the given radius
/// (all offsets with |di| + |dj| + |dk| <= radius).
BinaryMask morph_open(const BinaryMask& mask, int radius);
BinaryMask morph_close(const BinaryMask& mask, int radius);

/// 2x mean pooling per application; odd trailing voxels are averaged over
/// the voxels that exist.
VoxelGrid downsample2(const VoxelGrid& grid);

/// Inclusive-exclusive voxel box [lo, hi).
VoxelGrid crop(const VoxelGrid& grid, const Index3& lo, const Index3& hi);

}  // namespace liverperf::voxelio
