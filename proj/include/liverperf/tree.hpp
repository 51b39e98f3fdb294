#pragma once

// Rooted vascular tree shared by reconstruction, synthesis and 1D flow.
// Node and edge ids are their positions in the vectors; the JSON format
// carries them explicitly.

#include "liverperf/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace liverperf::tree {

enum class NodeKind { root, branching, terminal };

std::string to_string(NodeKind k);
NodeKind node_kind_from_string(const std::string& s);

struct TreeNode {
    Vec3 position{0, 0, 0};  ///< mm
    NodeKind kind = NodeKind::branching;
    double radius = 0.0;     ///< mm; reconstructed trees only, 0 otherwise
};

struct TreeEdge {
    int parent = -1;
    int child = -1;
    double radius = 0.0;  ///< mm
    double length = 0.0;  ///< mm
    double flow = 0.0;    ///< mm^3/s
    bool cycle = false;   ///< closes a cycle in a reconstructed graph
};

struct VascularTree {
    std::vector<TreeNode> nodes;
    std::vector<TreeEdge> edges;
    int root = -1;

    int add_node(const Vec3& p, NodeKind kind = NodeKind::branching) {
        nodes.push_back({p, kind, 0.0});
        return int(nodes.size()) - 1;
    }
    int add_edge(int parent, int child, double radius = 0.0) {
        edges.push_back({parent, child, radius, (nodes[std::size_t(parent)].position - nodes[std::size_t(child)].position).norm(), 0.0, false});
        return int(edges.size()) - 1;
    }
    std::size_t terminal_count() const;
};

/// Parent/child structure of a valid tree.
struct Topology {
    std::vector<int> parent_edge;             ///< per node; -1 for the root
    std::vector<std::vector<int>> children;   ///< per node: outgoing edge ids in id order
    std::vector<int> preorder;                ///< nodes, root first, children in edge-id order
};

/// Throws unless the tree is rooted, connected and acyclic with edges
/// directed away from the root.
Topology topology(const VascularTree& t);

/// Checks the invariants: one root of kind root, terminals of degree 1,
/// non-negative finite edge lengths (a junction may sit on a terminal),
/// non-negative radii, no flagged cycle edges.
void validate(const VascularTree& t);

/// Sets node kinds from the structure: root, leaf = terminal, else branching.
void update_kinds(VascularTree& t);

/// Edge length = Euclidean distance of its end nodes.
void recompute_lengths(VascularTree& t);

/// Drops nodes without edges (except the root) and renumbers, keeping order.
void compact(VascularTree& t);

/// `{"root": id, "nodes": [{"id", "xyz", "radius", "kind"}], "edges": [{"id",
/// "nodes": [parent, child], "length", "radius", "flow"?, "cycle"?}]}`
VascularTree load_tree(const std::filesystem::path& path);
void save_tree(const VascularTree& t, const std::filesystem::path& path);

}  // namespace liverperf::tree
