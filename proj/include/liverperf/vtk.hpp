#pragma once

// VTK legacy ASCII (version 3.0) files. Floats are printed with 17
// significant digits so files are bit-stable and read back exactly.

#include "liverperf/meshgen.hpp"
#include "liverperf/tree.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace liverperf::vtk {

/// Scalar (1 component) or vector (3 components) data, point- or cell-wise.
struct Field {
    std::string name;
    int components = 1;
    std::vector<double> values;  ///< size = count * components, interleaved

    static Field scalars(std::string name, std::vector<double> v) { return {std::move(name), 1, std::move(v)}; }
    static Field vectors(std::string name, const std::vector<Vec3>& v);
    std::size_t count() const { return values.size() / std::size_t(components); }
};

struct UnstructuredGrid {
    mesh::TetMesh mesh;
    std::vector<Field> point_data;
    std::vector<Field> cell_data;

    /// Throws if no field has the name.
    const Field& point_field(const std::string& name) const;
    const Field& cell_field(const std::string& name) const;
};

/// UNSTRUCTURED_GRID with tetra cells (type 10).
void write_unstructured(const std::filesystem::path& path, const UnstructuredGrid& grid,
                        const std::string& title = "tetrahedral mesh");
/// Reads files written by write_unstructured (tetra cells only).
UnstructuredGrid read_unstructured(const std::filesystem::path& path);

/// POLYDATA with triangle polygons.
void write_surface(const std::filesystem::path& path, const mesh::SurfaceMesh& surface,
                   const std::string& title = "surface mesh");

/// POLYDATA with one line per edge and CELL_DATA radius and flow.
void write_tree(const std::filesystem::path& path, const tree::VascularTree& t, const std::string& title = "vessel tree");

}  // namespace liverperf::vtk
