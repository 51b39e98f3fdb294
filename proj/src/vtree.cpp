#include "liverperf/vtree.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <limits>
#include <numbers>
#include <numeric>

namespace liverperf::vtree {

using tree::NodeKind;
using tree::TreeEdge;

namespace {

constexpr double kPi = std::numbers::pi;

struct Weighted {
    Vec3 point;
    double weight;
};

double local_cost(const Vec3& x, const std::vector<Weighted>& nbrs) {
    double c = 0.0;
    for (const auto& n : nbrs) c += n.weight * (x - n.point).norm();
    return c;
}

// Weighted Fermat point by Weiszfeld's iteration with the Vardi-Zhang
// modification at anchor points. Every accepted step lowers the cost.
Vec3 weiszfeld(Vec3 x, const std::vector<Weighted>& nbrs, double tol, int max_iter = 500) {
    double cost = local_cost(x, nbrs);
    for (int it = 0; it < max_iter; ++it) {
        Vec3 num = Vec3::Zero(), pull = Vec3::Zero();
        double den = 0.0, anchor_weight = 0.0;
        bool at_anchor = false;
        for (const auto& n : nbrs) {
            const double d = (n.point - x).norm();
            if (d < 1e-12) {
                at_anchor = true;
                anchor_weight += n.weight;
                continue;
            }
            num += n.weight * n.point / d;
            den += n.weight / d;
            pull += n.weight * (n.point - x) / d;
        }
        if (den == 0.0) break;
        const Vec3 target = num / den;
        Vec3 next = target;
        if (at_anchor) {
            const double r = pull.norm();
            if (r <= anchor_weight) break;  // the anchor is optimal
            const double beta = std::min(1.0, anchor_weight / r);
            next = (1.0 - beta) * target + beta * x;
        }
        const double next_cost = local_cost(next, nbrs);
        if (!(next_cost <= cost)) break;
        const double step = (next - x).norm();
        x = next;
        cost = next_cost;
        if (step < tol) break;
    }
    return x;
}

double radius_for(double q, double q_root, const TreeGenParams& p) {
    return p.root_radius * std::pow(q / q_root, 1.0 / p.murray_exponent);
}

double root_flow(const VascularTree& t) {
    double q = 0.0;
    for (const auto& e : t.edges)
        if (e.parent == t.root) q += e.flow;
    return q;
}

void refresh(VascularTree& t, const TreeGenParams& p) {
    tree::recompute_lengths(t);
    assign_flows(t, p.terminal_flow);
    assign_radii_murray(t, p.root_radius, p.murray_exponent);
}

void erase_edges(VascularTree& t, const std::vector<std::uint8_t>& drop) {
    std::vector<TreeEdge> kept;
    for (std::size_t e = 0; e < t.edges.size(); ++e)
        if (!drop[e]) kept.push_back(t.edges[e]);
    t.edges = std::move(kept);
    tree::compact(t);
}

// Removes leaves that are not terminals until none is left.
void drop_dangling(VascularTree& t) {
    while (true) {
        std::vector<int> out_degree(t.nodes.size(), 0);
        for (const auto& e : t.edges) ++out_degree[std::size_t(e.parent)];
        std::vector<std::uint8_t> drop(t.edges.size(), 0);
        bool any = false;
        for (std::size_t e = 0; e < t.edges.size(); ++e) {
            const int c = t.edges[e].child;
            if (out_degree[std::size_t(c)] == 0 && t.nodes[std::size_t(c)].kind != NodeKind::terminal) {
                drop[e] = 1;
                any = true;
            }
        }
        if (!any) return;
        erase_edges(t, drop);
    }
}

bool movable(const VascularTree& t, int v) {
    return v != t.root && t.nodes[std::size_t(v)].kind == NodeKind::branching;
}

std::vector<Weighted> neighbours(const VascularTree& t, int v, const TreeGenParams& p) {
    std::vector<Weighted> out;
    for (const auto& e : t.edges) {
        if (e.parent == v) out.push_back({t.nodes[std::size_t(e.child)].position, edge_weight(e.radius, e.flow, p)});
        else if (e.child == v) out.push_back({t.nodes[std::size_t(e.parent)].position, edge_weight(e.radius, e.flow, p)});
    }
    return out;
}

// Relaxes the split pair (n keeps `a` and gains an edge to m, m takes `b`)
// by alternating Weiszfeld steps. Returns the local cost.
double relax_pair(Vec3& xn, Vec3& xm, const std::vector<Weighted>& a, const std::vector<Weighted>& b, double wb,
                  bool move_n, double tol) {
    auto cost = [&] {
        double c = wb * (xn - xm).norm();
        for (const auto& w : a) c += w.weight * (xn - w.point).norm();
        for (const auto& w : b) c += w.weight * (xm - w.point).norm();
        return c;
    };
    for (int round = 0; round < 100; ++round) {
        std::vector<Weighted> mb = b;
        mb.push_back({xn, wb});
        const Vec3 new_m = weiszfeld(xm, mb, tol, 100);
        double moved = (new_m - xm).norm();
        xm = new_m;
        if (move_n) {
            std::vector<Weighted> na = a;
            na.push_back({xm, wb});
            const Vec3 new_n = weiszfeld(xn, na, tol, 100);
            moved = std::max(moved, (new_n - xn).norm());
            xn = new_n;
        }
        if (moved < tol) break;
    }
    return cost();
}

}  // namespace

void TreeGenParams::validate() const {
    if (!(volume_weight > 0.0) || !(friction_weight > 0.0)) throw Error("tree generation: cost weights must be > 0");
    if (!(viscosity > 0.0)) throw Error("tree generation: viscosity must be > 0");
    if (!(terminal_flow > 0.0)) throw Error("tree generation: terminal flow must be > 0");
    if (!(murray_exponent > 0.0)) throw Error("tree generation: Murray exponent must be > 0");
    if (!(root_radius > 0.0)) throw Error("tree generation: root radius must be > 0");
    if (max_hierarchy_passes < 0) throw Error("tree generation: hierarchy passes must be >= 0");
    if (!(relax_tolerance > 0.0)) throw Error("tree generation: relaxation tolerance must be > 0");
}

std::vector<int> horton_strahler(const VascularTree& t) {
    const tree::Topology top = tree::topology(t);
    std::vector<int> order(t.edges.size(), 0);
    for (auto it = top.preorder.rbegin(); it != top.preorder.rend(); ++it) {
        const int v = *it;
        const int pe = top.parent_edge[std::size_t(v)];
        if (pe < 0) continue;
        int best = 0, count = 0;
        for (int ce : top.children[std::size_t(v)]) {
            const int o = order[std::size_t(ce)];
            if (o > best) {
                best = o;
                count = 1;
            } else if (o == best) {
                ++count;
            }
        }
        order[std::size_t(pe)] = best == 0 ? 1 : best + (count >= 2 ? 1 : 0);
    }
    return order;
}

void assign_flows(VascularTree& t, double terminal_flow) {
    const tree::Topology top = tree::topology(t);
    std::vector<double> below(t.nodes.size(), 0.0);
    for (auto it = top.preorder.rbegin(); it != top.preorder.rend(); ++it) {
        const int v = *it;
        double q = t.nodes[std::size_t(v)].kind == NodeKind::terminal ? terminal_flow : 0.0;
        for (int ce : top.children[std::size_t(v)]) q += t.edges[std::size_t(ce)].flow;
        below[std::size_t(v)] = q;
        const int pe = top.parent_edge[std::size_t(v)];
        if (pe >= 0) t.edges[std::size_t(pe)].flow = q;
    }
}

void assign_radii_murray(VascularTree& t, double root_radius, double gamma) {
    const double q_root = root_flow(t);
    if (!(q_root > 0.0)) throw Error("assign_radii_murray: zero root flow");
    for (auto& e : t.edges) e.radius = root_radius * std::pow(e.flow / q_root, 1.0 / gamma);
}

double edge_weight(double r, double q, const TreeGenParams& p) {
    if (r <= 0.0) {
        if (q != 0.0) throw Error("tree_cost: zero radius with nonzero flow");
        return 0.0;
    }
    return p.volume_weight * kPi * r * r + p.friction_weight * 8.0 * p.viscosity * q * q / (kPi * r * r * r * r);
}

double tree_cost(const VascularTree& t, const TreeGenParams& p) {
    double c = 0.0;
    for (const auto& e : t.edges) c += edge_weight(e.radius, e.flow, p) * e.length;
    return c;
}

Vec3 relax_node(VascularTree& t, int node, const TreeGenParams& p) {
    if (!movable(t, node)) return t.nodes[std::size_t(node)].position;
    const auto nbrs = neighbours(t, node, p);
    const Vec3 x0 = t.nodes[std::size_t(node)].position;
    const Vec3 x = weiszfeld(x0, nbrs, p.relax_tolerance);
    if (!(local_cost(x, nbrs) <= local_cost(x0, nbrs))) return x0;
    t.nodes[std::size_t(node)].position = x;
    for (auto& e : t.edges)
        if (e.parent == node || e.child == node)
            e.length = (t.nodes[std::size_t(e.parent)].position - t.nodes[std::size_t(e.child)].position).norm();
    return x;
}

void merge_coincident(VascularTree& t, double eps_mm, const TreeGenParams& p) {
    bool merged = true;
    bool any = false;
    while (merged) {
        merged = false;
        for (std::size_t e = 0; e < t.edges.size(); ++e) {
            const int a = t.edges[e].parent, b = t.edges[e].child;
            if (!movable(t, a) || !movable(t, b)) continue;
            if ((t.nodes[std::size_t(a)].position - t.nodes[std::size_t(b)].position).norm() >= eps_mm) continue;
            for (auto& f : t.edges)
                if (f.parent == b) f.parent = a;
            std::vector<std::uint8_t> drop(t.edges.size(), 0);
            drop[e] = 1;
            erase_edges(t, drop);
            merged = any = true;
            break;
        }
    }
    if (any) refresh(t, p);
}

void remove_pass_through(VascularTree& t, const TreeGenParams& p) {
    bool any = false;
    while (true) {
        std::vector<int> out_degree(t.nodes.size(), 0), parent_edge(t.nodes.size(), -1), child_edge(t.nodes.size(), -1);
        for (std::size_t e = 0; e < t.edges.size(); ++e) {
            ++out_degree[std::size_t(t.edges[e].parent)];
            child_edge[std::size_t(t.edges[e].parent)] = int(e);
            parent_edge[std::size_t(t.edges[e].child)] = int(e);
        }
        int victim = -1;
        for (std::size_t v = 0; v < t.nodes.size() && victim < 0; ++v)
            if (movable(t, int(v)) && out_degree[v] == 1 && parent_edge[v] >= 0) victim = int(v);
        if (victim < 0) break;
        const int up = parent_edge[std::size_t(victim)], down = child_edge[std::size_t(victim)];
        t.edges[std::size_t(up)].child = t.edges[std::size_t(down)].child;
        std::vector<std::uint8_t> drop(t.edges.size(), 0);
        drop[std::size_t(down)] = 1;
        erase_edges(t, drop);
        any = true;
    }
    if (any) refresh(t, p);
}

bool split_node(VascularTree& t, int node, const TreeGenParams& p) {
    if (!movable(t, node)) return false;
    std::vector<int> kids;
    int parent_e = -1;
    for (std::size_t e = 0; e < t.edges.size(); ++e) {
        if (t.edges[e].parent == node) kids.push_back(int(e));
        if (t.edges[e].child == node) parent_e = int(e);
    }
    const int d = int(kids.size());
    if (d < 3 || parent_e < 0) return false;

    const double q_root = root_flow(t);
    const auto& pe = t.edges[std::size_t(parent_e)];
    const Weighted parent{t.nodes[std::size_t(pe.parent)].position, edge_weight(pe.radius, pe.flow, p)};
    std::vector<Weighted> child(static_cast<std::size_t>(d));
    std::vector<double> flow(static_cast<std::size_t>(d));
    for (int i = 0; i < d; ++i) {
        const auto& e = t.edges[std::size_t(kids[std::size_t(i)])];
        child[std::size_t(i)] = {t.nodes[std::size_t(e.child)].position, edge_weight(e.radius, e.flow, p)};
        flow[std::size_t(i)] = e.flow;
    }
    const Vec3 x0 = t.nodes[std::size_t(node)].position;
    double original = parent.weight * (x0 - parent.point).norm();
    for (const auto& c : child) original += c.weight * (x0 - c.point).norm();

    struct Candidate {
        double cost = std::numeric_limits<double>::infinity();
        std::vector<std::uint8_t> in_b;
        Vec3 xn, xm;
    };
    auto evaluate = [&](const std::vector<std::uint8_t>& in_b, bool move_n) {
        std::vector<Weighted> a = {parent}, b;
        double qb = 0.0;
        Vec3 centroid = Vec3::Zero();
        double wsum = 0.0;
        for (int i = 0; i < d; ++i) {
            if (in_b[std::size_t(i)]) {
                b.push_back(child[std::size_t(i)]);
                qb += flow[std::size_t(i)];
                centroid += child[std::size_t(i)].weight * child[std::size_t(i)].point;
                wsum += child[std::size_t(i)].weight;
            } else {
                a.push_back(child[std::size_t(i)]);
            }
        }
        const double wb = qb > 0.0 ? edge_weight(radius_for(qb, q_root, p), qb, p) : 0.0;
        Candidate c;
        c.in_b = in_b;
        c.xn = x0;
        c.xm = wsum > 0.0 ? Vec3((wb * x0 + centroid) / (wb + wsum)) : x0;
        c.cost = relax_pair(c.xn, c.xm, a, b, wb, move_n, p.relax_tolerance);
        return c;
    };

    Candidate best;
    if (d <= 8) {
        for (std::uint32_t mask = 1; mask < (1U << d); ++mask) {
            const int nb = std::popcount(mask);
            if (nb < 2 || nb > d - 1) continue;
            std::vector<std::uint8_t> in_b(static_cast<std::size_t>(d));
            for (int i = 0; i < d; ++i) in_b[std::size_t(i)] = (mask >> i) & 1U;
            Candidate c = evaluate(in_b, true);
            if (c.cost < best.cost) best = std::move(c);
        }
    } else {
        // Greedy: best pair with the node held fixed, then grow B while it helps.
        std::vector<std::uint8_t> in_b(std::size_t(d), 0);
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) {
                std::vector<std::uint8_t> trial(std::size_t(d), 0);
                trial[std::size_t(i)] = trial[std::size_t(j)] = 1;
                Candidate c = evaluate(trial, false);
                if (c.cost < best.cost) best = std::move(c);
            }
        int size_b = 2;
        while (size_b < d - 1) {
            Candidate grown;
            for (int k = 0; k < d; ++k) {
                if (best.in_b[std::size_t(k)]) continue;
                std::vector<std::uint8_t> trial = best.in_b;
                trial[std::size_t(k)] = 1;
                Candidate c = evaluate(trial, false);
                if (c.cost < grown.cost) grown = std::move(c);
            }
            if (!(grown.cost < best.cost)) break;
            best = std::move(grown);
            ++size_b;
        }
        best = evaluate(best.in_b, true);
    }
    if (!(best.cost < original * (1.0 - 1e-12))) return false;

    const double before = tree_cost(t, p);
    VascularTree trial = t;
    trial.nodes[std::size_t(node)].position = best.xn;
    const int m = trial.add_node(best.xm, NodeKind::branching);
    for (int i = 0; i < d; ++i)
        if (best.in_b[std::size_t(i)]) trial.edges[std::size_t(kids[std::size_t(i)])].parent = m;
    trial.add_edge(node, m);
    refresh(trial, p);
    if (!(tree_cost(trial, p) < before)) return false;
    t = std::move(trial);
    return true;
}

VascularTree prune_and_reconnect(const VascularTree& t, int order_cutoff, const TreeGenParams& p) {
    if (order_cutoff < 1) return t;
    const auto order = horton_strahler(t);
    std::vector<Vec3> terminals;
    for (const auto& n : t.nodes)
        if (n.kind == NodeKind::terminal) terminals.push_back(n.position);
    for (std::size_t e = 0; e < t.edges.size(); ++e)
        if (t.edges[e].parent == t.root && order[e] <= order_cutoff)
            throw Error("prune_and_reconnect: cutoff " + std::to_string(order_cutoff) + " removes the root edge");

    VascularTree out = t;
    std::vector<std::uint8_t> drop(out.edges.size(), 0);
    for (std::size_t e = 0; e < out.edges.size(); ++e) drop[e] = order[e] <= order_cutoff;
    // Terminals are re-added below; remove them along with their edges.
    erase_edges(out, drop);
    for (auto& n : out.nodes)
        if (n.kind == NodeKind::terminal) n.kind = NodeKind::branching;

    const std::size_t survivors = out.nodes.size();
    for (const Vec3& x : terminals) {
        int nearest = -1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < survivors; ++v) {
            if (int(v) == out.root) continue;
            const double dd = (out.nodes[v].position - x).squaredNorm();
            if (dd < best) {
                best = dd;
                nearest = int(v);
            }
        }
        const int tn = out.add_node(x, NodeKind::terminal);
        out.add_edge(nearest, tn);
    }
    drop_dangling(out);
    refresh(out, p);
    remove_pass_through(out, p);
    return out;
}

std::vector<Vec3> sample_terminal_points(const voxelio::BinaryMask& region, int n, std::uint64_t seed) {
    if (n <= 0) throw Error("sample_terminal_points: n must be > 0");
    const auto& g = region.geom;
    g.validate();
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (std::size_t s = 0; s < g.size(); ++s) {
        if (!region.values[s]) continue;
        const auto [i, j, k] = g.unravel(s);
        lo = lo.cwiseMin(g.center(i, j, k));
        hi = hi.cwiseMax(g.center(i, j, k));
    }
    if (!(lo.array() <= hi.array()).all()) throw Error("sample_terminal_points: empty region");
    lo -= 0.5 * g.spacing;
    hi += 0.5 * g.spacing;
    Rng rng(seed);
    std::vector<Vec3> out;
    out.reserve(std::size_t(n));
    while (int(out.size()) < n) {
        Vec3 x;
        for (int a = 0; a < 3; ++a) x[a] = rng.uniform(lo[a], hi[a]);
        const Vec3 f = (x - g.origin).cwiseQuotient(g.spacing);
        const int i = int(std::floor(f[0] + 0.5)), j = int(std::floor(f[1] + 0.5)), k = int(std::floor(f[2] + 0.5));
        if (region.get(i, j, k)) out.push_back(x);
    }
    return out;
}

std::vector<Vec3> sample_terminal_points(const mesh::TetMesh& region, int n, std::uint64_t seed) {
    if (n <= 0) throw Error("sample_terminal_points: n must be > 0");
    std::vector<double> cumulative;
    double total = 0.0;
    for (std::size_t t = 0; t < region.tets.size(); ++t) {
        total += std::abs(mesh::tet_signed_volume(region, t));
        cumulative.push_back(total);
    }
    if (!(total > 0.0)) throw Error("sample_terminal_points: degenerate region");
    Rng rng(seed);
    std::vector<Vec3> out;
    for (int s = 0; s < n; ++s) {
        const double pick = rng.uniform() * total;
        const std::size_t t = std::min<std::size_t>(
            region.tets.size() - 1, std::size_t(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin()));
        std::array<double, 3> u = {rng.uniform(), rng.uniform(), rng.uniform()};
        std::sort(u.begin(), u.end());
        const std::array<double, 4> bary = {u[0], u[1] - u[0], u[2] - u[1], 1.0 - u[2]};
        Vec3 x = Vec3::Zero();
        for (int c = 0; c < 4; ++c) x += bary[std::size_t(c)] * region.vertices[std::size_t(region.tets[t][std::size_t(c)])];
        out.push_back(x);
    }
    return out;
}

VascularTree trim_by_radius(const VascularTree& t, double min_radius) {
    const tree::Topology top = tree::topology(t);
    VascularTree out = t;
    std::vector<std::uint8_t> keep_node(t.nodes.size(), 0), drop(t.edges.size(), 1);
    keep_node[std::size_t(t.root)] = 1;
    for (int v : top.preorder) {
        if (!keep_node[std::size_t(v)]) continue;
        for (int e : top.children[std::size_t(v)])
            if (t.edges[std::size_t(e)].radius >= min_radius) {
                drop[std::size_t(e)] = 0;
                keep_node[std::size_t(t.edges[std::size_t(e)].child)] = 1;
            }
    }
    erase_edges(out, drop);
    tree::update_kinds(out);
    return out;
}

namespace {

void smooth(VascularTree& t, const TreeGenParams& p, GenerationLog* log) {
    double prev = tree_cost(t, p);
    for (int sweep = 0; sweep < p.max_smoothing_sweeps; ++sweep) {
        for (std::size_t v = 0; v < t.nodes.size(); ++v) relax_node(t, int(v), p);
        VascularTree merged = t;
        merge_coincident(merged, p.merge_distance, p);
        if (tree_cost(merged, p) <= tree_cost(t, p)) t = std::move(merged);
        // Cannot raise the cost beyond rounding (triangle inequality, equal weights).
        remove_pass_through(t, p);
        const std::size_t n = t.nodes.size();
        for (std::size_t v = 0; v < n; ++v) split_node(t, int(v), p);
        const double c = tree_cost(t, p);
        if (log) log->sweep_costs.push_back(c);
        if (prev - c <= p.sweep_tolerance * prev) break;
        prev = c;
    }
}

}  // namespace

VascularTree generate_tree(const VascularTree& stub, const std::vector<Vec3>& terminals, const TreeGenParams& p,
                           GenerationLog* log) {
    p.validate();
    if (terminals.empty()) throw Error("generate_tree: no terminals");
    tree::topology(stub);
    if (stub.edges.empty()) throw Error("generate_tree: stub needs at least one edge");

    VascularTree t = stub;
    for (auto& n : t.nodes) n.kind = NodeKind::branching;
    t.nodes[std::size_t(t.root)].kind = NodeKind::root;
    const std::size_t stub_nodes = t.nodes.size();
    for (const Vec3& x : terminals) {
        int nearest = -1;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t v = 0; v < stub_nodes; ++v) {
            if (int(v) == t.root) continue;
            const double d = (t.nodes[v].position - x).squaredNorm();
            if (d < best) {
                best = d;
                nearest = int(v);
            }
        }
        const int tn = t.add_node(x, NodeKind::terminal);
        t.add_edge(nearest, tn);
    }
    drop_dangling(t);
    refresh(t, p);
    GenerationLog local;
    GenerationLog& lg = log ? *log : local;
    lg.star_cost = tree_cost(t, p);

    smooth(t, p, &lg);
    lg.pass_costs.push_back(tree_cost(t, p));
    for (int pass = 0; pass < p.max_hierarchy_passes; ++pass) {
        bool improved = false;
        const auto order = horton_strahler(t);
        int root_order = 0;
        for (std::size_t e = 0; e < t.edges.size(); ++e)
            if (t.edges[e].parent == t.root) root_order = std::max(root_order, order[e]);
        for (int cutoff = 1; cutoff < root_order; ++cutoff) {
            VascularTree candidate = prune_and_reconnect(t, cutoff, p);
            smooth(candidate, p, nullptr);
            if (tree_cost(candidate, p) < tree_cost(t, p)) {
                t = std::move(candidate);
                improved = true;
            }
        }
        lg.pass_costs.push_back(tree_cost(t, p));
        if (!improved) break;
    }
    refresh(t, p);
    tree::update_kinds(t);
    return t;
}

}  // namespace liverperf::vtree
