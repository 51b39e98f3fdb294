#include "liverperf/vesselrecon.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace liverperf::vessel {

namespace {

constexpr int kBins = 256;

// Offsets of the 26-neighbourhood, index = (dx+1) + 3(dy+1) + 9(dz+1), center 13.
struct Offset {
    int dx, dy, dz;
};

const std::array<Offset, 27>& cube_offsets() {
    static const std::array<Offset, 27> offs = [] {
        std::array<Offset, 27> o{};
        for (int n = 0; n < 27; ++n) o[std::size_t(n)] = {n % 3 - 1, (n / 3) % 3 - 1, n / 9 - 1};
        return o;
    }();
    return offs;
}

bool six_adjacent(int a, int b) {
    const auto& o = cube_offsets();
    const int d = std::abs(o[std::size_t(a)].dx - o[std::size_t(b)].dx) + std::abs(o[std::size_t(a)].dy - o[std::size_t(b)].dy) +
                  std::abs(o[std::size_t(a)].dz - o[std::size_t(b)].dz);
    return d == 1;
}

bool twentysix_adjacent(int a, int b) {
    const auto& o = cube_offsets();
    return a != b && std::abs(o[std::size_t(a)].dx - o[std::size_t(b)].dx) <= 1 &&
           std::abs(o[std::size_t(a)].dy - o[std::size_t(b)].dy) <= 1 && std::abs(o[std::size_t(a)].dz - o[std::size_t(b)].dz) <= 1;
}

int manhattan(int n) {
    const auto& o = cube_offsets()[std::size_t(n)];
    return std::abs(o.dx) + std::abs(o.dy) + std::abs(o.dz);
}

// Components among `members` (neighbourhood indices) under the given adjacency.
template <class Adj>
int components(const std::vector<int>& members, Adj adjacent, std::vector<int>* label_out = nullptr) {
    std::vector<int> label(members.size(), -1);
    int count = 0;
    for (std::size_t s = 0; s < members.size(); ++s) {
        if (label[s] >= 0) continue;
        std::vector<std::size_t> stack = {s};
        label[s] = count;
        while (!stack.empty()) {
            const std::size_t a = stack.back();
            stack.pop_back();
            for (std::size_t b = 0; b < members.size(); ++b)
                if (label[b] < 0 && adjacent(members[a], members[b])) {
                    label[b] = count;
                    stack.push_back(b);
                }
        }
        ++count;
    }
    if (label_out) *label_out = label;
    return count;
}

// 1D squared distance transform of sampled function f on a lattice with
// step h (lower envelope of parabolas).
void dt1d(std::vector<double>& f, double h) {
    const int n = int(f.size());
    std::vector<double> d(f.size());
    std::vector<int> v(f.size());
    std::vector<double> z(f.size() + 1);
    auto x = [h](int q) { return h * q; };
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int p = v[std::size_t(k)];
            s = ((f[std::size_t(q)] + x(q) * x(q)) - (f[std::size_t(p)] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
            if (s <= z[std::size_t(k)]) --k;
            else break;
        }
        ++k;
        v[std::size_t(k)] = q;
        z[std::size_t(k)] = s;
        z[std::size_t(k) + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[std::size_t(k) + 1] < x(q)) ++k;
        const double dx = x(q) - x(v[std::size_t(k)]);
        d[std::size_t(q)] = dx * dx + f[std::size_t(v[std::size_t(k)])];
    }
    f = std::move(d);
}

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) {
        while (parent[std::size_t(x)] != x) x = parent[std::size_t(x)] = parent[std::size_t(parent[std::size_t(x)])];
        return x;
    }
    void unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::size_t(std::max(a, b))] = std::min(a, b);
    }
};

}  // namespace

OtsuResult otsu(const VoxelGrid& grid) {
    if (grid.values.empty()) throw Error("auto_threshold: degenerate histogram (empty grid)");
    const auto [mn, mx] = std::minmax_element(grid.values.begin(), grid.values.end());
    const double lo = *mn, hi = *mx;
    if (!(hi > lo)) throw Error("auto_threshold: degenerate histogram (constant grid)");
    const double width = (hi - lo) / kBins;
    std::array<double, kBins> hist{};
    for (double v : grid.values) hist[std::size_t(std::min(kBins - 1, int((v - lo) / width)))] += 1.0;

    // Bin centers as class values; cumulative weight and first moment.
    const double total = double(grid.values.size());
    double total_moment = 0.0;
    for (int b = 0; b < kBins; ++b) total_moment += hist[std::size_t(b)] * (lo + (b + 0.5) * width);
    double w0 = 0.0, m0 = 0.0, best = -1.0;
    int best_bin = 1;
    for (int t = 1; t < kBins; ++t) {
        w0 += hist[std::size_t(t - 1)];
        m0 += hist[std::size_t(t - 1)] * (lo + (t - 0.5) * width);
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double mu0 = m0 / w0, mu1 = (total_moment - m0) / w1;
        const double between = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            best_bin = t;
        }
    }
    return {lo + best_bin * width, best_bin};
}

double auto_threshold(const VoxelGrid& grid) { return otsu(grid).threshold; }

BinaryMask extract_vessel_mask(const VoxelGrid& grid, const VesselMaskParams& params) {
    grid.geom.validate();
    const VoxelGrid smooth = params.blur_sigma > 0.0 ? voxelio::gaussian_blur(grid, Vec3::Constant(params.blur_sigma)) : grid;
    const double thr = params.threshold ? *params.threshold : auto_threshold(smooth);
    BinaryMask m = voxelio::grid_to_mask(smooth, thr);
    if (params.open_radius > 0) m = voxelio::morph_open(m, params.open_radius);
    if (params.close_radius > 0) m = voxelio::morph_close(m, params.close_radius);
    return m;
}

VoxelGrid distance_transform(const BinaryMask& mask) {
    const auto& g = mask.geom;
    // One background layer around the grid stands in for the outside.
    const std::array<int, 3> pd = {g.dims[0] + 2, g.dims[1] + 2, g.dims[2] + 2};
    auto pidx = [&](int i, int j, int k) { return std::size_t(i) + std::size_t(pd[0]) * (std::size_t(j) + std::size_t(pd[1]) * std::size_t(k)); };
    constexpr double inf = 1e300;
    std::vector<double> f(std::size_t(pd[0]) * std::size_t(pd[1]) * std::size_t(pd[2]), 0.0);
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i)
                if (mask.at(i, j, k)) f[pidx(i + 1, j + 1, k + 1)] = inf;

    for (int axis = 0; axis < 3; ++axis) {
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        std::vector<double> line(std::size_t(pd[std::size_t(axis)]));
        std::array<int, 3> c{};
        for (c[std::size_t(a2)] = 0; c[std::size_t(a2)] < pd[std::size_t(a2)]; ++c[std::size_t(a2)])
            for (c[std::size_t(a1)] = 0; c[std::size_t(a1)] < pd[std::size_t(a1)]; ++c[std::size_t(a1)]) {
                for (c[std::size_t(axis)] = 0; c[std::size_t(axis)] < pd[std::size_t(axis)]; ++c[std::size_t(axis)])
                    line[std::size_t(c[std::size_t(axis)])] = f[pidx(c[0], c[1], c[2])];
                dt1d(line, g.spacing[axis]);
                for (c[std::size_t(axis)] = 0; c[std::size_t(axis)] < pd[std::size_t(axis)]; ++c[std::size_t(axis)])
                    f[pidx(c[0], c[1], c[2])] = line[std::size_t(c[std::size_t(axis)])];
            }
    }

    VoxelGrid out(g, 0.0, voxelio::DType::f32);
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) out.at(i, j, k) = std::sqrt(f[pidx(i + 1, j + 1, k + 1)]);
    return out;
}

double radius_from_distance(double d, const Vec3& spacing) {
    return std::max(d - 0.5 * spacing.mean(), 0.5 * spacing.norm());
}

bool is_simple(const BinaryMask& mask, int i, int j, int k) {
    const auto& offs = cube_offsets();
    std::vector<int> fg, bg;
    for (int n = 0; n < 27; ++n) {
        if (n == 13) continue;
        const auto& o = offs[std::size_t(n)];
        if (mask.get(i + o.dx, j + o.dy, k + o.dz)) fg.push_back(n);
        else if (manhattan(n) <= 2) bg.push_back(n);
    }
    // Foreground: one 26-component among the 26 neighbours.
    if (fg.empty() || components(fg, twentysix_adjacent) != 1) return false;
    // Background: one 6-component in N18 that is 6-adjacent to the center.
    std::vector<int> label;
    components(bg, six_adjacent, &label);
    std::set<int> touching;
    for (std::size_t s = 0; s < bg.size(); ++s)
        if (manhattan(bg[s]) == 1) touching.insert(label[s]);
    return touching.size() == 1;
}

int neighbour_count(const BinaryMask& mask, int i, int j, int k) {
    int n = 0;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
                if ((dx || dy || dz) && mask.get(i + dx, j + dy, k + dz)) ++n;
    return n;
}

int foreground_components(const BinaryMask& mask) {
    const auto& g = mask.geom;
    std::vector<int> label(g.size(), -1);
    int count = 0;
    for (std::size_t s = 0; s < g.size(); ++s) {
        if (!mask.values[s] || label[s] >= 0) continue;
        std::vector<std::size_t> stack = {s};
        label[s] = count;
        while (!stack.empty()) {
            const auto [i, j, k] = g.unravel(stack.back());
            stack.pop_back();
            for (int dz = -1; dz <= 1; ++dz)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!mask.get(i + dx, j + dy, k + dz)) continue;
                        const std::size_t n = g.linear(i + dx, j + dy, k + dz);
                        if (label[n] < 0) {
                            label[n] = count;
                            stack.push_back(n);
                        }
                    }
        }
        ++count;
    }
    return count;
}

int background_components(const BinaryMask& mask) {
    // Padded frame so the outside forms one connected component.
    voxelio::GridGeometry pg = mask.geom;
    for (int a = 0; a < 3; ++a) pg.dims[std::size_t(a)] += 2;
    std::vector<int> label(pg.size(), -1);
    auto bg = [&](int i, int j, int k) {
        if (!pg.in_bounds(i, j, k)) return false;
        return !mask.get(i - 1, j - 1, k - 1);
    };
    constexpr std::array<std::array<int, 3>, 6> steps = {{{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};
    int count = 0;
    for (std::size_t s = 0; s < pg.size(); ++s) {
        const auto [i0, j0, k0] = pg.unravel(s);
        if (!bg(i0, j0, k0) || label[s] >= 0) continue;
        std::vector<std::size_t> stack = {s};
        label[s] = count;
        while (!stack.empty()) {
            const auto [i, j, k] = pg.unravel(stack.back());
            stack.pop_back();
            for (const auto& d : steps) {
                if (!bg(i + d[0], j + d[1], k + d[2])) continue;
                const std::size_t n = pg.linear(i + d[0], j + d[1], k + d[2]);
                if (label[n] < 0) {
                    label[n] = count;
                    stack.push_back(n);
                }
            }
        }
        ++count;
    }
    return count;
}

BinaryMask Skeleton::mask() const {
    BinaryMask m(geom);
    for (std::size_t v : voxels) m.values[v] = 1;
    return m;
}

namespace {

// Removes end branches no longer than the vessel radius at the voxel they
// hang from. Deletion runs from the tip inwards, so topology is unchanged.
bool prune_spurs(BinaryMask& m, const VoxelGrid& dist) {
    const auto& g = m.geom;
    bool pruned = false;
    for (std::size_t s = 0; s < g.size(); ++s) {
        if (!m.values[s]) continue;
        auto [i, j, k] = g.unravel(s);
        if (neighbour_count(m, i, j, k) != 1) continue;
        std::vector<std::size_t> path = {s};
        std::size_t prev = s, cur = s, junction = s;
        double length = 0.0;
        bool found = false;
        while (true) {
            const auto [ci, cj, ck] = g.unravel(cur);
            std::size_t next = cur;
            for (int dz = -1; dz <= 1; ++dz)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (!(dx || dy || dz) || !m.get(ci + dx, cj + dy, ck + dz)) continue;
                        const std::size_t w = g.linear(ci + dx, cj + dy, ck + dz);
                        if (w != prev && next == cur) next = w;
                    }
            if (next == cur) break;  // isolated segment
            const auto [ni, nj, nk] = g.unravel(next);
            length += g.spacing.cwiseProduct(Vec3(ni - ci, nj - cj, nk - ck)).norm();
            const int deg = neighbour_count(m, ni, nj, nk);
            if (deg >= 3) {
                junction = next;
                found = true;
                break;
            }
            if (deg <= 1) break;  // reached the other end of a bare segment
            path.push_back(next);
            prev = cur;
            cur = next;
        }
        if (!found || length > radius_from_distance(dist.values[junction], g.spacing)) continue;
        for (std::size_t v : path) m.values[v] = 0;
        pruned = true;
    }
    return pruned;
}

}  // namespace

Skeleton skeletonize(const BinaryMask& mask) {
    mask.geom.validate();
    const auto& g = mask.geom;
    BinaryMask m = mask;
    constexpr std::array<std::array<int, 3>, 6> dirs = {{{0, 0, 1}, {0, 0, -1}, {0, 1, 0}, {0, -1, 0}, {1, 0, 0}, {-1, 0, 0}}};
    bool changed = true;
    while (changed) {
        changed = false;
        for (const auto& d : dirs) {
            std::vector<std::size_t> candidates;
            for (std::size_t s = 0; s < g.size(); ++s) {
                if (!m.values[s]) continue;
                const auto [i, j, k] = g.unravel(s);
                if (m.get(i + d[0], j + d[1], k + d[2])) continue;
                if (neighbour_count(m, i, j, k) <= 1) continue;
                if (is_simple(m, i, j, k)) candidates.push_back(s);
            }
            for (std::size_t s : candidates) {
                const auto [i, j, k] = g.unravel(s);
                if (neighbour_count(m, i, j, k) <= 1 || !is_simple(m, i, j, k)) continue;
                m.values[s] = 0;
                changed = true;
            }
        }
    }

    const VoxelGrid dist = distance_transform(mask);
    while (prune_spurs(m, dist)) {
    }
    Skeleton skel;
    skel.geom = g;
    for (std::size_t s = 0; s < g.size(); ++s)
        if (m.values[s]) {
            skel.voxels.push_back(s);
            skel.radius.push_back(radius_from_distance(dist.values[s], g.spacing));
        }
    return skel;
}

tree::VascularTree skeleton_to_graph(const Skeleton& skel, const GraphOptions& opt) {
    const auto& g = skel.geom;
    const int n = int(skel.voxels.size());
    tree::VascularTree out;
    if (n == 0) return out;

    std::vector<int> at(g.size(), -1);
    for (int s = 0; s < n; ++s) at[skel.voxels[std::size_t(s)]] = s;
    std::vector<std::vector<int>> nb(static_cast<std::size_t>(n));
    std::vector<Vec3> pos(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s) {
        const auto [i, j, k] = g.unravel(skel.voxels[std::size_t(s)]);
        pos[std::size_t(s)] = g.center(i, j, k);
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!(dx || dy || dz) || !g.in_bounds(i + dx, j + dy, k + dz)) continue;
                    const int t = at[g.linear(i + dx, j + dy, k + dz)];
                    if (t >= 0) nb[std::size_t(s)].push_back(t);
                }
        std::sort(nb[std::size_t(s)].begin(), nb[std::size_t(s)].end());
    }
    auto is_node_voxel = [&](int s) { return nb[std::size_t(s)].size() != 2; };

    // Clusters: endpoints alone, adjacent branch voxels merged.
    UnionFind uf(static_cast<std::size_t>(n));
    for (int s = 0; s < n; ++s)
        if (nb[std::size_t(s)].size() >= 3)
            for (int t : nb[std::size_t(s)])
                if (nb[std::size_t(t)].size() >= 3) uf.unite(s, t);

    std::vector<int> cluster(static_cast<std::size_t>(n), -1);
    std::vector<std::vector<int>> members;
    auto make_cluster = [&](int s) {
        const int root = uf.find(s);
        if (cluster[std::size_t(root)] < 0) {
            cluster[std::size_t(root)] = int(members.size());
            members.emplace_back();
        }
        cluster[std::size_t(s)] = cluster[std::size_t(root)];
        members[std::size_t(cluster[std::size_t(s)])].push_back(s);
    };
    for (int s = 0; s < n; ++s)
        if (is_node_voxel(s)) make_cluster(s);

    struct RawEdge {
        int a, b;
        double length;
        double radius;
        std::size_t voxels;
    };
    std::vector<RawEdge> raw;
    std::vector<std::uint8_t> visited(static_cast<std::size_t>(n), 0);
    std::set<std::pair<int, int>> direct;

    auto node_pos = [&](int c) {
        Vec3 p = Vec3::Zero();
        for (int s : members[std::size_t(c)]) p += pos[std::size_t(s)];
        return Vec3(p / double(members[std::size_t(c)].size()));
    };
    auto node_radius = [&](int c) {
        double r = 0.0;
        for (int s : members[std::size_t(c)]) r += skel.radius[std::size_t(s)];
        return r / double(members[std::size_t(c)].size());
    };

    auto trace_from = [&](int c) {
        for (int v : std::vector<int>(members[std::size_t(c)]))
            for (int u : nb[std::size_t(v)]) {
                if (cluster[std::size_t(u)] == c) continue;
                if (cluster[std::size_t(u)] >= 0) {
                    const int d = cluster[std::size_t(u)];
                    if (c < d && direct.insert({c, d}).second)
                        raw.push_back({c, d, (node_pos(c) - node_pos(d)).norm(), 0.5 * (node_radius(c) + node_radius(d)), 0});
                    continue;
                }
                if (visited[std::size_t(u)]) continue;
                std::vector<int> path;
                int prev = v, cur = u, end = -1;
                while (true) {
                    visited[std::size_t(cur)] = 1;
                    path.push_back(cur);
                    int next = -1;
                    for (int w : nb[std::size_t(cur)])
                        if (w != prev) {
                            next = w;
                            break;
                        }
                    if (next < 0) break;
                    if (cluster[std::size_t(next)] >= 0) {
                        end = cluster[std::size_t(next)];
                        break;
                    }
                    if (visited[std::size_t(next)]) break;
                    prev = cur;
                    cur = next;
                }
                if (end < 0) continue;
                if (end == c && path.size() == 1) continue;  // corner voxel hugging a branch cluster
                double len = 0.0, rad = 0.0;
                Vec3 last = node_pos(c);
                for (int s : path) {
                    len += (pos[std::size_t(s)] - last).norm();
                    last = pos[std::size_t(s)];
                    rad += skel.radius[std::size_t(s)];
                }
                len += (node_pos(end) - last).norm();
                raw.push_back({c, end, len, rad / double(path.size()), path.size()});
            }
    };
    for (int c = 0; c < int(members.size()); ++c) trace_from(c);
    // Closed loops without any node voxel get a node at their lowest voxel.
    for (int s = 0; s < n; ++s)
        if (!visited[std::size_t(s)] && cluster[std::size_t(s)] < 0) {
            cluster[std::size_t(s)] = int(members.size());
            visited[std::size_t(s)] = 1;
            members.push_back({s});
            trace_from(cluster[std::size_t(s)]);
        }

    // Keep the largest component by voxel count.
    const int nc = int(members.size());
    UnionFind comp(static_cast<std::size_t>(nc));
    for (const auto& e : raw) comp.unite(e.a, e.b);
    std::map<int, std::size_t> size;
    for (int c = 0; c < nc; ++c) size[comp.find(c)] += members[std::size_t(c)].size();
    for (const auto& e : raw) size[comp.find(e.a)] += e.voxels;
    int keep = -1;
    std::size_t best = 0;
    for (const auto& [c, s] : size)
        if (s > best) {
            best = s;
            keep = c;
        }

    std::vector<int> degree(static_cast<std::size_t>(nc), 0);
    std::vector<std::vector<int>> incident(static_cast<std::size_t>(nc));
    for (std::size_t e = 0; e < raw.size(); ++e) {
        ++degree[std::size_t(raw[e].a)];
        ++degree[std::size_t(raw[e].b)];
        incident[std::size_t(raw[e].a)].push_back(int(e));
        if (raw[e].b != raw[e].a) incident[std::size_t(raw[e].b)].push_back(int(e));
    }

    int root = -1;
    double best_key = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < nc; ++c) {
        if (comp.find(c) != keep || degree[std::size_t(c)] > 1) continue;
        const double key = opt.root_hint ? -(node_pos(c) - *opt.root_hint).norm() : node_radius(c);
        if (key > best_key) {
            best_key = key;
            root = c;
        }
    }
    if (root < 0)
        for (int c = 0; c < nc && root < 0; ++c)
            if (comp.find(c) == keep) root = c;

    // Breadth-first orientation from the root.
    std::vector<int> id(static_cast<std::size_t>(nc), -1);
    std::vector<std::uint8_t> used(raw.size(), 0);
    std::vector<int> queue = {root};
    id[std::size_t(root)] = out.add_node(node_pos(root));
    out.nodes.back().radius = node_radius(root);
    out.root = 0;
    for (std::size_t q = 0; q < queue.size(); ++q) {
        const int c = queue[q];
        for (int e : incident[std::size_t(c)]) {
            if (used[std::size_t(e)]) continue;
            used[std::size_t(e)] = 1;
            const int other = raw[std::size_t(e)].a == c ? raw[std::size_t(e)].b : raw[std::size_t(e)].a;
            bool cycle = true;
            if (id[std::size_t(other)] < 0) {
                id[std::size_t(other)] = out.add_node(node_pos(other));
                out.nodes.back().radius = node_radius(other);
                queue.push_back(other);
                cycle = false;
            }
            tree::TreeEdge te;
            te.parent = id[std::size_t(c)];
            te.child = id[std::size_t(other)];
            te.length = raw[std::size_t(e)].length;
            te.radius = raw[std::size_t(e)].radius;
            te.cycle = cycle;
            out.edges.push_back(te);
        }
    }
    for (std::size_t v = 0; v < out.nodes.size(); ++v) out.nodes[v].kind = tree::NodeKind::branching;
    std::vector<int> deg(out.nodes.size(), 0);
    for (const auto& e : out.edges) {
        ++deg[std::size_t(e.parent)];
        ++deg[std::size_t(e.child)];
    }
    for (std::size_t v = 0; v < out.nodes.size(); ++v)
        if (deg[v] <= 1) out.nodes[v].kind = tree::NodeKind::terminal;
    out.nodes[0].kind = tree::NodeKind::root;
    return out;
}

}  // namespace liverperf::vessel
