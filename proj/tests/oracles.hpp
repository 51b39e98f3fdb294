#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance runner: brute-force enumerations, analytic solutions and
// phantom generators.

#include "liverperf/darcy.hpp"
#include "liverperf/flow1d.hpp"
#include "liverperf/meshgen.hpp"
#include "liverperf/segmentation.hpp"
#include "liverperf/transport.hpp"
#include "liverperf/vesselrecon.hpp"
#include "liverperf/vtree.hpp"

#include <map>
#include <vector>

namespace liverperf::oracles {

using mesh::TetMesh;
using tree::VascularTree;
using voxelio::BinaryMask;
using voxelio::GridGeometry;
using voxelio::PhantomSpec;
using voxelio::VoxelGrid;

GridGeometry box(int nx, int ny, int nz, double spacing = 1.0);

// Segmentation --------------------------------------------------------------

/// Minimum s-t cut by enumerating every subset of the inner nodes.
double brute_force_min_cut(const seg::FlowNetwork& net);
/// Random network with `inner` non-terminal nodes and capacities on a 1/8 grid.
seg::FlowNetwork random_network(int inner, Rng& rng);

struct Exhaustive {
    double energy;
    BinaryMask mask;
};
/// Minimum energy over all labelings consistent with the seeds.
Exhaustive exhaustive_min(const VoxelGrid& g, const seg::SeedSet& seeds, const seg::GmmModel& fg,
                          const seg::GmmModel& bg, const seg::SegmentationParams& p);

// Meshing -------------------------------------------------------------------

BinaryMask sphere_mask(int n, double r, double spacing = 1.0);
/// Sphere, anisotropic ellipsoid, tube and Y-tube masks.
std::vector<BinaryMask> phantom_masks();
BinaryMask random_mask(int n, std::uint64_t seed, double p);
bool every_edge_twice(const mesh::SurfaceMesh& m);

// Skeletons -----------------------------------------------------------------

PhantomSpec tube(const Vec3& a, const Vec3& b, double r, const GridGeometry& g);
PhantomSpec y_tube(const Vec3& j, const Vec3& e1, const Vec3& e2, const Vec3& e3, double r, const GridGeometry& g);

struct Census {
    int endpoints = 0;
    int branches = 0;
};
/// Skeleton voxels with at most one neighbour (endpoints) and with three or
/// more (branch voxels).
Census census(const BinaryMask& skel);
bool subset(const BinaryMask& a, const BinaryMask& b);

struct TopologyCase {
    PhantomSpec spec;
    int endpoints = 0;  ///< 2 for a tube, 3 for a Y-tube
};
/// Case n of the randomized suite: even n tubes, odd n Y-tubes.
TopologyCase topology_case(int n, Rng& rng);
/// Skeleton inside the mask, same foreground and background component
/// counts, expected endpoint and branch counts.
bool skeleton_matches(const TopologyCase& c);

// Trees ---------------------------------------------------------------------

/// Largest relative |r_p^g - sum r_c^g| over the branching nodes.
double murray_residual(const VascularTree& t, double gamma);
VascularTree one_segment_stub(const Vec3& a, const Vec3& b);

// 1D flow -------------------------------------------------------------------

/// Random binary tree with lengths of 10-30 mm and radii shrinking by about
/// 2^(-1/3) per level.
VascularTree random_flow_tree(int splits, std::uint64_t seed);

/// Terminal pressures of a known state: the root flow is split at random
/// ratios, then pressures follow from the edge balances starting at p0.
/// Arbitrary pressures usually admit no solution (the kinetic terms bound
/// how far a pressure can rise along a branch).
struct Manufactured {
    std::vector<double> w;
    std::vector<double> p;
    std::map<int, double> terminal_pressures;
};
Manufactured manufactured(const VascularTree& t, double w0, std::uint64_t seed, const flow1d::FluidProps& f);

VascularTree bifurcation(double r0, double r1, double r2, const Vec3& a, const Vec3& b);
/// Terminal velocities of a bifurcation by nested grid search on the
/// junction-pressure mismatch and the mass imbalance.
std::array<double, 2> bifurcation_grid_search(const VascularTree& t, double w0, const std::map<int, double>& pk,
                                              const flow1d::FluidProps& f);
/// max over terminals of |rho/2 w0^2 + p0 - rho/2 wk^2 - pk - path loss|.
double telescoped_residual(const VascularTree& t, const flow1d::TreeFlowState& s, const std::map<int, double>& pk,
                           const flow1d::FluidProps& f);
/// Largest column-wise relative difference between the analytic Jacobian
/// and central differences at x.
double jacobian_fd_error(const flow1d::FlowSystem& sys, const Eigen::VectorXd& x);

// Darcy ---------------------------------------------------------------------

Mat3 random_spd(Rng& rng);
darcy::CompartmentSystem single(const TetMesh& m, const Mat3& k);
bool on_box_boundary(const Vec3& x, const Vec3& lo, const Vec3& hi);
/// Max nodal error of the linear patch test on a box with a random SPD
/// permeability.
double patch_test_error(std::uint64_t seed);
/// Max |p1 - p2 - s/g| for two compartments with uniform opposite sources.
double uniform_exchange_error(std::uint64_t seed);
/// |1^T (A p - f)| / sum |f| for a pure-Neumann three-compartment solve.
double neumann_identity(std::uint64_t seed);
/// L2 errors of sin(pi x) sin(pi y) sin(pi z) on the unit cube, n^3 cells.
std::vector<double> manufactured_l2_errors(const std::vector<int>& n);

// Transport -----------------------------------------------------------------

/// One-compartment channel along x with uniform velocity w, fed through
/// the x = 0 face and drained through the far face.
transport::TransportProblem channel(const TetMesh& m, double w, double phi);
/// Two compartments in one cell: clean inflow q into 1, exchange q from 1
/// to 2, outflow q from 2.
transport::TransportProblem exchange_pair(double q, double phi1, double phi2, double v);
/// Errors of RK2 against the closed form of the exchange pair for the
/// given step counts over 0.5 s.
std::vector<double> exchange_errors(const std::vector<int>& steps);
/// Volume-averaged slab profile along x (unit slabs), position where it
/// crosses 1/2; -1 if it does not.
double front_position(const TetMesh& m, const transport::TransportProblem& p, const Eigen::VectorXd& s, int n);
/// Box with a portal source at the first vertex and a sink at the last
/// vertex (hepatic with chain coupling, else portal).
darcy::CompartmentSystem box_system(double g12, double g23);

}  // namespace liverperf::oracles
