#pragma once

// Steady 1D flow in a vessel tree: mass conservation at junctions and a
// Bernoulli balance with laminar friction loss along every edge.
//
// Tree geometry is in mm; everything in this module is SI (m, m/s, Pa).
// Edge e from node u to node v carries velocity w_e (positive from parent
// to child) through A_e = pi r_e^2 and satisfies
//
//   p_u + rho/2 w_in(u)^2 = p_v + rho/2 w_e^2 + e_loss(w_e, L_e, D_e)
//
// where w_in(u) is the velocity of the edge entering u (for the root edge,
// w_0 itself). Summed along a root-to-terminal path this gives
// rho/2 w_0^2 + p_0 = rho/2 w_k^2 + p_k + sum of the path losses.

#include "liverperf/tree.hpp"

#include <Eigen/SparseCore>

#include <map>
#include <vector>

namespace liverperf::flow1d {

using tree::VascularTree;

struct FluidProps {
    double density = 1050.0;     ///< kg/m^3
    double viscosity = 3.5e-3;   ///< Pa s

    void validate() const;
};

/// Friction loss 32 mu L w / D^2 (the laminar form 1/2 rho w^2 (L/D) 64/Re
/// with the Reynolds number cancelled, so w = 0 is regular). SI units; the
/// sign follows w.
double branch_loss(double w, double length, double diameter, const FluidProps& props);

struct TreeFlowState {
    std::vector<double> w;     ///< m/s, per edge
    std::vector<double> area;  ///< m^2, per edge
    std::vector<double> p;     ///< Pa, per node
    double w0 = 0.0;
    int iterations = 0;
    double residual_norm = 0.0;

    /// Volumetric flow A w (m^3/s) of one edge.
    double flow(std::size_t e) const { return area[e] * w[e]; }
};

/// Residuals: one mass balance A_in w_in - sum A_c w_c per non-root,
/// non-terminal node (node order), then one Bernoulli balance per edge
/// (edge order), upstream side minus downstream side.
Eigen::VectorXd tree_residual(const VascularTree& t, const TreeFlowState& s, const FluidProps& props);

/// The nonlinear system for fixed root velocity and terminal pressures.
/// Unknowns: velocities of all edges but the root edge (edge order), then
/// pressures of the root and junctions (node order).
class FlowSystem {
public:
    FlowSystem(const VascularTree& t, double w0, const std::map<int, double>& terminal_pressures,
               const FluidProps& props);

    int size() const { return int(w_index_.size() + p_index_.size()); }
    Eigen::VectorXd residual(const Eigen::VectorXd& x) const;
    Eigen::SparseMatrix<double> jacobian(const Eigen::VectorXd& x) const;
    TreeFlowState state(const Eigen::VectorXd& x) const;
    /// Equal split of the root flow at every junction, pressures at the
    /// terminal mean.
    Eigen::VectorXd initial_guess() const;
    /// Node whose equations involve unknown i (for error reports).
    int node_of_unknown(int i) const;

private:
    VascularTree t_;
    tree::Topology top_;
    double w0_;
    FluidProps props_;
    std::vector<double> area_, length_, diameter_;  // SI, per edge
    std::vector<double> p_fixed_;                    // per node, terminals only
    std::vector<int> w_index_;                       // unknown -> edge
    std::vector<int> p_index_;                       // unknown -> node
    std::vector<int> w_slot_, p_slot_;               // edge / node -> unknown, -1 if fixed
    std::vector<int> junctions_;                     // nodes with a mass equation

    double w_of(const Eigen::VectorXd& x, int e) const;
    double p_of(const Eigen::VectorXd& x, int v) const;
};

/// Newton's method with the analytic Jacobian and step halving. The root
/// must have exactly one child edge; every terminal needs a pressure.
/// Converged when the Bernoulli residuals are below
/// 1e-10 max(1, rho w0^2) Pa and the mass residuals below 1e-10 A_0 max(1, |w0|).
/// w0 may be negative (outflow trees drained through their root).
/// Throws after 50 iterations or on a singular Jacobian (naming a node).
TreeFlowState solve_tree_flow(const VascularTree& t, double w0, const std::map<int, double>& terminal_pressures,
                              const FluidProps& props);

/// Plug-flow time from the root to each terminal: sum of L / |w| over the
/// path edges (s). Infinite when an edge on the path is at rest or flows
/// against the direction of the root edge.
std::map<int, double> transit_times(const VascularTree& t, const TreeFlowState& s);

}  // namespace liverperf::flow1d
