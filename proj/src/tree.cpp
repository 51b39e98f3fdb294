#include "liverperf/tree.hpp"

#include <json.hpp>

#include <fstream>
#include <map>

namespace liverperf::tree {

using nlohmann::json;

std::string to_string(NodeKind k) {
    switch (k) {
        case NodeKind::root: return "root";
        case NodeKind::branching: return "branching";
        case NodeKind::terminal: return "terminal";
    }
    return "branching";
}

NodeKind node_kind_from_string(const std::string& s) {
    if (s == "root") return NodeKind::root;
    if (s == "branching") return NodeKind::branching;
    if (s == "terminal") return NodeKind::terminal;
    throw Error("unknown node kind '" + s + "'");
}

std::size_t VascularTree::terminal_count() const {
    std::size_t n = 0;
    for (const auto& v : nodes) n += v.kind == NodeKind::terminal;
    return n;
}

Topology topology(const VascularTree& t) {
    const int n = int(t.nodes.size());
    if (t.root < 0 || t.root >= n) throw Error("tree: root id out of range");
    Topology top;
    top.parent_edge.assign(std::size_t(n), -1);
    top.children.assign(std::size_t(n), {});
    for (std::size_t e = 0; e < t.edges.size(); ++e) {
        const auto& edge = t.edges[e];
        if (edge.parent < 0 || edge.parent >= n || edge.child < 0 || edge.child >= n)
            throw Error("tree: edge " + std::to_string(e) + " references a missing node");
        if (edge.child == t.root) throw Error("tree: edge " + std::to_string(e) + " points into the root");
        if (top.parent_edge[std::size_t(edge.child)] >= 0)
            throw Error("tree: node " + std::to_string(edge.child) + " has more than one parent");
        top.parent_edge[std::size_t(edge.child)] = int(e);
        top.children[std::size_t(edge.parent)].push_back(int(e));
    }
    std::vector<int> stack = {t.root};
    while (!stack.empty()) {
        const int v = stack.back();
        stack.pop_back();
        top.preorder.push_back(v);
        const auto& ch = top.children[std::size_t(v)];
        for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(t.edges[std::size_t(*it)].child);
        if (top.preorder.size() > std::size_t(n)) throw Error("tree: cycle detected");
    }
    if (top.preorder.size() != std::size_t(n))
        throw Error("tree: " + std::to_string(n - int(top.preorder.size())) + " node(s) not reachable from the root");
    return top;
}

void validate(const VascularTree& t) {
    const Topology top = topology(t);
    for (std::size_t e = 0; e < t.edges.size(); ++e) {
        const auto& edge = t.edges[e];
        if (edge.cycle) throw Error("tree: edge " + std::to_string(e) + " is flagged as closing a cycle");
        if (!(edge.length >= 0.0) || !std::isfinite(edge.length)) throw Error("tree: edge " + std::to_string(e) + " has invalid length");
        if (edge.radius < 0.0) throw Error("tree: edge " + std::to_string(e) + " has negative radius");
    }
    for (std::size_t v = 0; v < t.nodes.size(); ++v) {
        const bool is_root = int(v) == t.root;
        const auto kind = t.nodes[v].kind;
        if (is_root != (kind == NodeKind::root)) throw Error("tree: node " + std::to_string(v) + " has inconsistent root kind");
        const bool leaf = top.children[v].empty();
        if (kind == NodeKind::terminal && !leaf) throw Error("tree: terminal " + std::to_string(v) + " has children");
        if (kind == NodeKind::branching && leaf) throw Error("tree: branching node " + std::to_string(v) + " is a leaf");
    }
}

void update_kinds(VascularTree& t) {
    std::vector<int> out_degree(t.nodes.size(), 0);
    for (const auto& e : t.edges) ++out_degree[std::size_t(e.parent)];
    for (std::size_t v = 0; v < t.nodes.size(); ++v) {
        if (int(v) == t.root) t.nodes[v].kind = NodeKind::root;
        else t.nodes[v].kind = out_degree[v] == 0 ? NodeKind::terminal : NodeKind::branching;
    }
}

void recompute_lengths(VascularTree& t) {
    for (auto& e : t.edges)
        e.length = (t.nodes[std::size_t(e.parent)].position - t.nodes[std::size_t(e.child)].position).norm();
}

void compact(VascularTree& t) {
    std::vector<std::uint8_t> used(t.nodes.size(), 0);
    if (t.root >= 0) used[std::size_t(t.root)] = 1;
    for (const auto& e : t.edges) used[std::size_t(e.parent)] = used[std::size_t(e.child)] = 1;
    std::vector<int> remap(t.nodes.size(), -1);
    std::vector<TreeNode> nodes;
    for (std::size_t v = 0; v < t.nodes.size(); ++v)
        if (used[v]) {
            remap[v] = int(nodes.size());
            nodes.push_back(t.nodes[v]);
        }
    for (auto& e : t.edges) {
        e.parent = remap[std::size_t(e.parent)];
        e.child = remap[std::size_t(e.child)];
    }
    if (t.root >= 0) t.root = remap[std::size_t(t.root)];
    t.nodes = std::move(nodes);
}

VascularTree load_tree(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("load_tree: cannot open " + path.string());
    json j;
    try {
        in >> j;
        VascularTree t;
        std::map<long, int> node_index;
        for (const auto& n : j.at("nodes")) {
            const long id = n.at("id").get<long>();
            if (!node_index.emplace(id, int(t.nodes.size())).second)
                throw Error("load_tree: duplicate node id " + std::to_string(id));
            TreeNode node;
            const auto& p = n.at("xyz");
            if (!p.is_array() || p.size() != 3) throw Error("load_tree: node xyz must be a 3-array");
            node.position = Vec3(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
            node.radius = n.value("radius", 0.0);
            node.kind = node_kind_from_string(n.value("kind", std::string("branching")));
            t.nodes.push_back(node);
        }
        auto lookup = [&](long id) {
            auto it = node_index.find(id);
            if (it == node_index.end()) throw Error("load_tree: edge references unknown node " + std::to_string(id));
            return it->second;
        };
        std::map<long, TreeEdge> edges;
        for (const auto& e : j.at("edges")) {
            const auto& pair = e.at("nodes");
            if (!pair.is_array() || pair.size() != 2) throw Error("load_tree: edge nodes must be a pair");
            TreeEdge edge;
            edge.parent = lookup(pair[0].get<long>());
            edge.child = lookup(pair[1].get<long>());
            edge.radius = e.value("radius", 0.0);
            edge.length = e.contains("length")
                              ? e.at("length").get<double>()
                              : (t.nodes[std::size_t(edge.parent)].position - t.nodes[std::size_t(edge.child)].position).norm();
            edge.flow = e.value("flow", 0.0);
            edge.cycle = e.value("cycle", false);
            if (!edges.emplace(e.at("id").get<long>(), edge).second) throw Error("load_tree: duplicate edge id");
        }
        for (const auto& [id, e] : edges) t.edges.push_back(e);
        t.root = lookup(j.at("root").get<long>());
        return t;
    } catch (const json::exception& e) {
        throw Error("load_tree: malformed tree file " + path.string() + ": " + e.what());
    }
}

void save_tree(const VascularTree& t, const std::filesystem::path& path) {
    json j;
    j["root"] = t.root;
    json nodes = json::array();
    for (std::size_t v = 0; v < t.nodes.size(); ++v) {
        const auto& n = t.nodes[v];
        nodes.push_back({{"id", v},
                         {"xyz", {n.position[0], n.position[1], n.position[2]}},
                         {"radius", n.radius},
                         {"kind", to_string(n.kind)}});
    }
    json edges = json::array();
    for (std::size_t e = 0; e < t.edges.size(); ++e) {
        const auto& edge = t.edges[e];
        json je = {{"id", e},
                   {"nodes", {edge.parent, edge.child}},
                   {"length", edge.length},
                   {"radius", edge.radius},
                   {"flow", edge.flow}};
        if (edge.cycle) je["cycle"] = true;
        edges.push_back(je);
    }
    j["nodes"] = nodes;
    j["edges"] = edges;
    std::ofstream out(path);
    if (!out) throw Error("save_tree: cannot open " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw Error("save_tree: write failed for " + path.string());
}

}  // namespace liverperf::tree
