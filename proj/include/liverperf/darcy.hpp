#pragma once

// Multicompartment Darcy flow on a tetrahedral mesh with P1 elements:
//
//   div w^i + sum_j G_ij (p^i - p^j) = f^i,   w^i = -K^i grad p^i
//
// for compartments i = 1..N, with zero flux through the mesh surface.
// Units: mm, s, Pa. K is hydraulic conductivity (mm^2/(Pa s)), G in
// 1/(Pa s), nodal loads f in mm^3/s.

#include "liverperf/flow1d.hpp"
#include "liverperf/meshgen.hpp"

#include <Eigen/SparseCore>

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace liverperf::darcy {

using mesh::TetMesh;

struct Compartment {
    std::string name;
    Mat3 permeability = Mat3::Identity();  ///< used when cell_permeability is empty
    std::vector<Mat3> cell_permeability;    ///< optional, one per tet

    const Mat3& permeability_of(std::size_t cell) const {
        return cell_permeability.empty() ? permeability : cell_permeability[cell];
    }
};

struct CompartmentSystem {
    TetMesh mesh;
    std::vector<Compartment> compartments;
    Eigen::MatrixXd coupling;                 ///< N x N, symmetric, zero diagonal, >= 0
    std::vector<Eigen::VectorXd> sources;     ///< per compartment, nodal loads (mm^3/s); empty = zero
    std::vector<std::map<int, double>> fixed; ///< per compartment, node -> pressure; may be empty

    std::size_t node_count() const { return mesh.vertices.size(); }
    std::size_t size() const { return compartments.size(); }
    /// Checks mesh orientation, SPD permeabilities, coupling symmetry and
    /// the shapes of sources and fixed sets.
    void validate() const;
};

/// Three compartments (portal, filtration, hepatic) with isotropic
/// permeabilities and chain coupling G_12 = g12, G_23 = g23.
CompartmentSystem three_compartment_system(const TetMesh& mesh, const std::array<double, 3>& k, double g12,
                                           double g23);

/// Gradients of the four P1 basis functions of a tet (constant per tet).
std::array<Vec3, 4> basis_gradients(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d);
/// vol * grad(phi_i) . K grad(phi_j).
Eigen::Matrix4d element_stiffness(const std::array<Vec3, 4>& x, const Mat3& k);
/// vol / 20 * (1 + delta_ij).
Eigen::Matrix4d element_mass(const std::array<Vec3, 4>& x);

struct Assembly {
    Eigen::SparseMatrix<double> matrix;  ///< (N n) x (N n), compartment-major blocks
    Eigen::VectorXd load;
};

/// Global matrix and load without any fixed pressures applied.
Assembly assemble(const CompartmentSystem& sys);

/// P1 load vector of a volume density f (per mm^3), 4-point quadrature per tet.
Eigen::VectorXd load_vector(const TetMesh& mesh, const std::function<double(const Vec3&)>& f);

struct PcgResult {
    int iterations = 0;
    double relative_residual = 0.0;
};

/// Conjugate gradients with a Jacobi preconditioner. `project`, if given,
/// removes nullspace components from residuals. Throws on stagnation.
PcgResult pcg(const Eigen::SparseMatrix<double>& a, const Eigen::VectorXd& b, Eigen::VectorXd& x, double rel_tol,
              int max_iter, const std::function<void(Eigen::VectorXd&)>& project = {});

struct SolverOptions {
    double rel_tol = 1e-12;
    int max_iter = 20000;
};

struct PressureField {
    std::vector<Eigen::VectorXd> p;  ///< per compartment, per node (Pa)
    int iterations = 0;
    double relative_residual = 0.0;
};

/// Solves the assembled system. Degrees of freedom not connected to any
/// fixed pressure form nullspace components (constant over the component);
/// each needs compatible loads (|sum f| <= 1e-9 sum |f|) and gets the
/// zero-mean representative.
PressureField solve_pressure(const CompartmentSystem& sys, const SolverOptions& opt = {});

struct VelocityField {
    std::vector<std::vector<Vec3>> w;  ///< per compartment, per tet (mm/s)
};

VelocityField darcy_velocity(const PressureField& p, const CompartmentSystem& sys);

struct SourceMap {
    std::vector<int> terminals;  ///< tree node ids, ascending
    std::vector<int> vertices;   ///< nearest mesh vertex per terminal
    std::vector<double> flux;    ///< signed terminal flux (mm^3/s)
    Eigen::VectorXd load;        ///< nodal loads
};

/// Nearest mesh vertex of each terminal (ties: lowest index). Throws if a
/// terminal lies farther than max_distance (mm) from every vertex.
std::vector<int> nearest_vertices(const tree::VascularTree& t, const TetMesh& mesh, double max_distance);

/// Deposits sign * A_k w_k of each terminal edge (converted to mm^3/s) on
/// its nearest vertex.
SourceMap build_sources(const tree::VascularTree& t, const flow1d::TreeFlowState& state, const TetMesh& mesh,
                        double sign, double max_distance);

struct FluxReport {
    std::vector<double> inflow;    ///< sum of positive loads per compartment (mm^3/s)
    std::vector<double> outflow;   ///< minus the sum of negative loads
    std::vector<double> boundary;  ///< net flux leaving through fixed-pressure nodes
    Eigen::MatrixXd exchange;      ///< (i, j): flux from compartment i to j
    /// in - out - boundary - sum_j exchange(i, j), per compartment
    std::vector<double> imbalance() const;
};

FluxReport flux_report(const CompartmentSystem& sys, const PressureField& p);

struct CouplingOptions {
    double relaxation = 1.0;        ///< theta in (0, 1]
    double tolerance = 1e-6;        ///< max relative terminal-flux change
    int max_iterations = 100;
    double max_distance = 5.0;      ///< mm, terminal to nearest vertex
    std::size_t portal_compartment = 0;
    std::optional<std::size_t> hepatic_compartment;  ///< default: last
    SolverOptions solver;
};

struct CoupledResult {
    flow1d::TreeFlowState portal;
    flow1d::TreeFlowState hepatic;
    PressureField pressure;
    CompartmentSystem system;  ///< with the final loads
    SourceMap portal_sources, hepatic_sources;
    std::vector<double> history;  ///< relative flux change per iteration
    int iterations = 0;
    double portal_inflow = 0.0;    ///< mm^3/s
    double hepatic_outflow = 0.0;  ///< mm^3/s, positive
};

/// Picard iteration between the trees and the Darcy system. The portal
/// tree is driven by w0_portal; the hepatic tree drains the same volume
/// flow through its root. It is solved in the outflow orientation (positive
/// outlet velocity, terminal pressures mirrored) and reported with negative
/// velocities. Each step samples terminal
/// pressures from the portal / hepatic compartments, solves both trees,
/// relaxes the terminal fluxes, rescales the hepatic sinks to balance the
/// portal sources exactly and re-solves the Darcy system. Throws with the
/// change history when it does not converge.
CoupledResult couple_1d_3d(const tree::VascularTree& portal, const tree::VascularTree& hepatic,
                           const CompartmentSystem& sys, const flow1d::FluidProps& props, double w0_portal,
                           const CouplingOptions& opt = {});

}  // namespace liverperf::darcy
