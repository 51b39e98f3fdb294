#pragma once

// Synthetic vascular trees by constructive optimization.
//
// The cost of a tree is
//
//   C = sum_e [ c_v * pi * r_e^2 * L_e + c_f * 8 mu L_e Q_e^2 / (pi r_e^4) ]
//
// (blood volume plus Poiseuille dissipation). Flows come from the terminals,
// radii from Murray's law, so for fixed topology C = sum_e w_e L_e with
// constant edge weights w_e and node positions are weighted Fermat points.

#include "liverperf/meshgen.hpp"
#include "liverperf/tree.hpp"
#include "liverperf/voxelio.hpp"

#include <map>
#include <vector>

namespace liverperf::vtree {

using tree::VascularTree;

struct TreeGenParams {
    double volume_weight = 1.0;    ///< c_v, cost per mm^3
    double friction_weight = 1.0;  ///< c_f
    double viscosity = 3.5e-3;     ///< mu, Pa s
    double terminal_flow = 1.0;    ///< q_t, mm^3/s per terminal
    double murray_exponent = 3.0;  ///< gamma
    double root_radius = 1.0;      ///< mm, radius of the root edge
    int max_hierarchy_passes = 3;
    double relax_tolerance = 1e-6;  ///< mm, step size that ends a node relaxation
    double merge_distance = 1e-3;   ///< mm
    int max_smoothing_sweeps = 30;
    double sweep_tolerance = 1e-9;  ///< relative cost change that ends a smoothing phase
    std::uint64_t seed = 0;

    void validate() const;
};

/// Strahler order per edge. Leaf edges have order 1; an edge takes the
/// maximum order among the edges below its child, plus one when that
/// maximum occurs at least twice.
std::vector<int> horton_strahler(const VascularTree& t);

/// Each edge carries q_t times the number of terminals below it.
void assign_flows(VascularTree& t, double terminal_flow);

/// r_e = root_radius * (Q_e / Q_root)^(1/gamma), Q_root being the total
/// flow leaving the root. Throws on zero root flow.
void assign_radii_murray(VascularTree& t, double root_radius, double gamma);

/// Cost weight of one unit of length for an edge of radius r and flow q.
double edge_weight(double r, double q, const TreeGenParams& p);
double tree_cost(const VascularTree& t, const TreeGenParams& p);

/// Moves a branching node to the weighted Fermat point of its neighbours
/// (modified Weiszfeld iteration, handling coincident neighbours). The cost
/// never increases. Root and terminals are not moved. Returns the position.
Vec3 relax_node(VascularTree& t, int node, const TreeGenParams& p);

/// Joins branching nodes closer than eps_mm to their branching parent.
/// Flows and radii are recomputed. Root and terminals are never merged.
void merge_coincident(VascularTree& t, double eps_mm, const TreeGenParams& p);

/// Removes branching nodes with a single child, joining their two edges.
/// Does not increase the cost.
void remove_pass_through(VascularTree& t, const TreeGenParams& p);

/// Tries to split a branching node with at least three children into the
/// node (keeping children A) and a new child junction (taking children B,
/// |B| >= 2), both relaxed. Partitions are searched exhaustively up to
/// eight children and greedily beyond. Commits only on a strict cost
/// decrease; returns whether it did.
bool split_node(VascularTree& t, int node, const TreeGenParams& p);

/// Removes every edge of Strahler order <= order_cutoff, reattaches each
/// terminal by a straight edge to the nearest remaining non-root node,
/// drops dangling junctions and pass-through nodes and reassigns flows
/// and radii. Throws if the cutoff would remove the root edge.
VascularTree prune_and_reconnect(const VascularTree& t, int order_cutoff, const TreeGenParams& p);

/// n points uniform in the foreground voxels' boxes (rejection sampling
/// over their bounding box).
std::vector<Vec3> sample_terminal_points(const voxelio::BinaryMask& region, int n, std::uint64_t seed);
/// n points uniform in the mesh volume (tet chosen by volume, then uniform
/// barycentric coordinates).
std::vector<Vec3> sample_terminal_points(const mesh::TetMesh& region, int n, std::uint64_t seed);

/// Keeps the part of a reconstructed tree reachable from the root through
/// edges of radius >= min_radius. Node kinds and lengths are kept.
VascularTree trim_by_radius(const VascularTree& t, double min_radius);

struct GenerationLog {
    double star_cost = 0.0;             ///< after connecting terminals to the stub
    std::vector<double> sweep_costs;    ///< after each smoothing sweep, in order
    std::vector<double> pass_costs;     ///< after each hierarchy pass (first entry: before any pass)
};

/// Connects every terminal to its nearest non-root stub node, smooths
/// (relax all junctions, merge, split) and then runs hierarchy passes of
/// prune_and_reconnect at cutoffs 1 .. max order - 1, each followed by
/// smoothing and kept only if it lowers the cost. Stub nodes other than
/// the root move like any junction. Output carries Murray radii, flows and
/// Euclidean lengths.
VascularTree generate_tree(const VascularTree& stub, const std::vector<Vec3>& terminals, const TreeGenParams& p,
                           GenerationLog* log = nullptr);

}  // namespace liverperf::vtree
