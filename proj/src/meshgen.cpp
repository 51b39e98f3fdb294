#include "liverperf/meshgen.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <map>
#include <numeric>
#include <unordered_map>

namespace liverperf::mesh {

namespace {

// ---- marching cubes case table -----------------------------------------------
//
// Corner b of a dual cell sits at offset (b & 1, (b >> 1) & 1, (b >> 2) & 1).
// Local edge e = 4 * axis + combo runs along `axis` from the corner whose
// other two bits are given by `combo`.

struct CubeEdge {
    int axis;
    int c0;  // corner with the axis bit clear
    int c1;
};

struct CaseTable {
    std::array<CubeEdge, 12> edges{};
    int edge_between[8][8]{};
    std::array<std::vector<std::vector<int>>, 256> loops;  // per configuration: loops of local edges
};

Vec3 corner_pos(int c) { return Vec3(c & 1, (c >> 1) & 1, (c >> 2) & 1); }

CaseTable build_table() {
    CaseTable t;
    for (auto& row : t.edge_between) std::fill(std::begin(row), std::end(row), -1);
    for (int axis = 0; axis < 3; ++axis) {
        const int b = (axis + 1) % 3, c = (axis + 2) % 3;
        for (int combo = 0; combo < 4; ++combo) {
            const int c0 = ((combo & 1) << b) | (((combo >> 1) & 1) << c);
            const int c1 = c0 | (1 << axis);
            const int e = 4 * axis + combo;
            t.edges[std::size_t(e)] = {axis, c0, c1};
            t.edge_between[c0][c1] = t.edge_between[c1][c0] = e;
        }
    }

    for (int config = 0; config < 256; ++config) {
        auto inside = [&](int c) { return (config >> c) & 1; };
        std::array<int, 12> next;
        next.fill(-1);
        auto mid = [&](int e) -> Vec3 {
            return 0.5 * (corner_pos(t.edges[std::size_t(e)].c0) + corner_pos(t.edges[std::size_t(e)].c1));
        };
        // Directed segment p -> q such that inside corner `ci` lies on the
        // right seen from outside along the face normal.
        auto add_segment = [&](int ep, int eq, int ci, const Vec3& normal) {
            const Vec3 p = mid(ep), q = mid(eq);
            const double side = normal.cross(q - p).dot(corner_pos(ci) - p);
            if (side < 0.0) next[std::size_t(ep)] = eq;
            else next[std::size_t(eq)] = ep;
        };

        for (int axis = 0; axis < 3; ++axis)
            for (int s = 0; s < 2; ++s) {
                const int b = (axis + 1) % 3, c = (axis + 2) % 3;
                const int base = s << axis;
                const std::array<int, 4> corners = {base, base | (1 << b), base | (1 << b) | (1 << c), base | (1 << c)};
                Vec3 normal = Vec3::Zero();
                normal[axis] = s ? 1.0 : -1.0;
                std::array<int, 4> fe;  // face edge i joins corners i and i+1
                for (int i = 0; i < 4; ++i)
                    fe[std::size_t(i)] = t.edge_between[corners[std::size_t(i)]][corners[std::size_t((i + 1) % 4)]];
                int n_in = 0;
                for (int cc : corners) n_in += inside(cc);
                if (n_in == 0 || n_in == 4) continue;
                const bool ambiguous = n_in == 2 && inside(corners[0]) == inside(corners[2]);
                if (ambiguous) {
                    // Cut each inside corner off on its own.
                    for (int i = 0; i < 4; ++i) {
                        const int ci = corners[std::size_t(i)];
                        if (!inside(ci)) continue;
                        add_segment(fe[std::size_t((i + 3) % 4)], fe[std::size_t(i)], ci, normal);
                    }
                } else {
                    std::vector<int> crossing;
                    int some_inside = -1;
                    for (int i = 0; i < 4; ++i) {
                        if (inside(corners[std::size_t(i)]) != inside(corners[std::size_t((i + 1) % 4)]))
                            crossing.push_back(fe[std::size_t(i)]);
                        if (inside(corners[std::size_t(i)])) some_inside = corners[std::size_t(i)];
                    }
                    add_segment(crossing[0], crossing[1], some_inside, normal);
                }
            }

        std::array<bool, 12> seen{};
        for (int e0 = 0; e0 < 12; ++e0) {
            if (next[std::size_t(e0)] < 0 || seen[std::size_t(e0)]) continue;
            std::vector<int> loop;
            int e = e0;
            while (!seen[std::size_t(e)]) {
                seen[std::size_t(e)] = true;
                loop.push_back(e);
                e = next[std::size_t(e)];
            }
            t.loops[std::size_t(config)].push_back(std::move(loop));
        }
    }
    return t;
}

const CaseTable& table() {
    static const CaseTable t = build_table();
    return t;
}

// Kuhn split: tets walk from corner 0 to corner 7 along each axis permutation.
struct KuhnTable {
    std::array<std::array<int, 4>, 6> tets;
};

const KuhnTable& kuhn() {
    static const KuhnTable k = [] {
        KuhnTable kt{};
        std::array<int, 3> perm = {0, 1, 2};
        int n = 0;
        do {
            const int v1 = 1 << perm[0];
            const int v2 = v1 | (1 << perm[1]);
            std::array<int, 4> tet = {0, v1, v2, 7};
            if (tet_signed_volume(corner_pos(tet[0]), corner_pos(tet[1]), corner_pos(tet[2]), corner_pos(tet[3])) < 0)
                std::swap(tet[1], tet[2]);
            kt.tets[std::size_t(n++)] = tet;
        } while (std::next_permutation(perm.begin(), perm.end()));
        return kt;
    }();
    return k;
}

std::array<int, 3> sorted3(int a, int b, int c) {
    std::array<int, 3> f = {a, b, c};
    std::sort(f.begin(), f.end());
    return f;
}

std::vector<std::vector<int>> vertex_neighbours(std::size_t nv, const std::vector<Tri>& tris) {
    std::vector<std::vector<int>> nb(nv);
    for (const auto& t : tris)
        for (int i = 0; i < 3; ++i) {
            const int a = t[std::size_t(i)], b = t[std::size_t((i + 1) % 3)];
            nb[std::size_t(a)].push_back(b);
            nb[std::size_t(b)].push_back(a);
        }
    for (auto& v : nb) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    }
    return nb;
}

}  // namespace

SurfaceMesh marching_cubes(const BinaryMask& mask) {
    mask.geom.validate();
    const auto& tab = table();
    const auto& g = mask.geom;
    // Dual cells and lattice coordinates are shifted by +1 so the background
    // layer at -1 maps to 0; the lattice then spans dims + 2 points per axis.
    const long nx = g.dims[0] + 1, ny = g.dims[1] + 1, nz = g.dims[2] + 1;
    const long lx = nx + 1, ly = ny + 1;
    auto edge_key = [&](long x, long y, long z, int axis) { return ((z * ly + y) * lx + x) * 3 + axis; };

    std::unordered_map<long, int> edge_vertex;
    std::vector<long> vertex_key;  // per vertex: edge key, or -1 for centroids
    SurfaceMesh out;

    auto vertex_for = [&](long x, long y, long z, int axis) {
        const long key = edge_key(x, y, z, axis);
        auto [it, fresh] = edge_vertex.try_emplace(key, int(out.vertices.size()));
        if (fresh) {
            Vec3 p(double(x - 1), double(y - 1), double(z - 1));
            p[axis] += 0.5;
            out.vertices.push_back(g.origin + g.spacing.cwiseProduct(p));
            vertex_key.push_back(key);
        }
        return it->second;
    };

    for (long z = 0; z < nz; ++z)
        for (long y = 0; y < ny; ++y)
            for (long x = 0; x < nx; ++x) {
                int config = 0;
                for (int c = 0; c < 8; ++c)
                    if (mask.get(int(x - 1 + (c & 1)), int(y - 1 + ((c >> 1) & 1)), int(z - 1 + ((c >> 2) & 1))))
                        config |= 1 << c;
                if (config == 0 || config == 255) continue;
                for (const auto& loop : tab.loops[std::size_t(config)]) {
                    std::vector<int> ids;
                    ids.reserve(loop.size());
                    for (int e : loop) {
                        const auto& ce = tab.edges[std::size_t(e)];
                        ids.push_back(vertex_for(x + (ce.c0 & 1), y + ((ce.c0 >> 1) & 1), z + ((ce.c0 >> 2) & 1), ce.axis));
                    }
                    if (ids.size() == 3) {
                        out.triangles.push_back({ids[0], ids[1], ids[2]});
                        continue;
                    }
                    Vec3 c = Vec3::Zero();
                    for (int id : ids) c += out.vertices[std::size_t(id)];
                    c /= double(ids.size());
                    const int ci = int(out.vertices.size());
                    out.vertices.push_back(c);
                    vertex_key.push_back(-1);
                    for (std::size_t i = 0; i < ids.size(); ++i)
                        out.triangles.push_back({ci, ids[i], ids[(i + 1) % ids.size()]});
                }
            }

    // Renumber: edge vertices by global edge id, then centroids in cell order.
    std::vector<int> order(out.vertices.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const long ka = vertex_key[std::size_t(a)], kb = vertex_key[std::size_t(b)];
        if ((ka < 0) != (kb < 0)) return kb < 0;
        return ka >= 0 && ka < kb;
    });
    std::vector<int> remap(order.size());
    std::vector<Vec3> verts(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        remap[std::size_t(order[i])] = int(i);
        verts[i] = out.vertices[std::size_t(order[i])];
    }
    out.vertices = std::move(verts);
    for (auto& t : out.triangles)
        for (int& v : t) v = remap[std::size_t(v)];
    return out;
}

void taubin_smooth_vertices(std::vector<Vec3>& vertices, const std::vector<Tri>& triangles,
                            const std::vector<std::uint8_t>& movable, const TaubinParams& params) {
    if (params.iterations < 0) throw Error("taubin_smooth: iterations must be >= 0");
    const auto nb = vertex_neighbours(vertices.size(), triangles);
    std::vector<Vec3> delta(vertices.size());
    auto step = [&](double factor) {
        for (std::size_t v = 0; v < vertices.size(); ++v) {
            delta[v].setZero();
            if (!movable.empty() && !movable[v]) continue;
            if (nb[v].empty()) continue;
            Vec3 avg = Vec3::Zero();
            for (int u : nb[v]) avg += vertices[std::size_t(u)];
            delta[v] = avg / double(nb[v].size()) - vertices[v];
        }
        for (std::size_t v = 0; v < vertices.size(); ++v) vertices[v] += factor * delta[v];
    };
    for (int it = 0; it < params.iterations; ++it) {
        step(params.lambda);
        step(params.mu);
    }
}

SurfaceMesh taubin_smooth(const SurfaceMesh& mesh, const TaubinParams& params) {
    SurfaceMesh out = mesh;
    taubin_smooth_vertices(out.vertices, out.triangles, {}, params);
    return out;
}

double enclosed_volume(const SurfaceMesh& mesh) {
    double v = 0.0;
    for (const auto& t : mesh.triangles) {
        const Vec3& a = mesh.vertices[std::size_t(t[0])];
        const Vec3& b = mesh.vertices[std::size_t(t[1])];
        const Vec3& c = mesh.vertices[std::size_t(t[2])];
        v += a.dot(b.cross(c));
    }
    return v / 6.0;
}

std::vector<std::pair<std::array<int, 2>, int>> edge_incidence(const SurfaceMesh& mesh) {
    std::map<std::array<int, 2>, int> count;
    for (const auto& t : mesh.triangles)
        for (int i = 0; i < 3; ++i) {
            int a = t[std::size_t(i)], b = t[std::size_t((i + 1) % 3)];
            if (a > b) std::swap(a, b);
            ++count[{a, b}];
        }
    return {count.begin(), count.end()};
}

bool is_watertight(const SurfaceMesh& mesh) {
    // Every undirected edge in exactly two triangles, and with opposite
    // directions in them (consistent winding).
    std::map<std::array<int, 2>, int> directed;
    for (const auto& t : mesh.triangles)
        for (int i = 0; i < 3; ++i) ++directed[{t[std::size_t(i)], t[std::size_t((i + 1) % 3)]}];
    for (const auto& [e, n] : directed) {
        if (n != 1) return false;
        auto it = directed.find({e[1], e[0]});
        if (it == directed.end() || it->second != 1) return false;
    }
    return true;
}

double tet_signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    return (b - a).dot((c - a).cross(d - a)) / 6.0;
}

double tet_signed_volume(const TetMesh& mesh, std::size_t t) {
    const auto& q = mesh.tets[t];
    return tet_signed_volume(mesh.vertices[std::size_t(q[0])], mesh.vertices[std::size_t(q[1])],
                             mesh.vertices[std::size_t(q[2])], mesh.vertices[std::size_t(q[3])]);
}

double tet_quality(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    const double vol = std::abs(tet_signed_volume(a, b, c, d));
    if (vol == 0.0) return 0.0;
    const double area = 0.5 * ((b - a).cross(c - a).norm() + (b - a).cross(d - a).norm() + (c - a).cross(d - a).norm() +
                               (c - b).cross(d - b).norm());
    const double r_in = 3.0 * vol / area;
    // Circumcenter x solves 2 (p_i - a) . x = |p_i|^2 - |a|^2 relative to a.
    Mat3 m;
    m.row(0) = b - a;
    m.row(1) = c - a;
    m.row(2) = d - a;
    const Vec3 rhs(0.5 * (b - a).squaredNorm(), 0.5 * (c - a).squaredNorm(), 0.5 * (d - a).squaredNorm());
    const double r_circ = m.partialPivLu().solve(rhs).norm();
    return 3.0 * r_in / r_circ;
}

std::vector<Tri> boundary_faces(const TetMesh& mesh) {
    std::map<std::array<int, 3>, std::pair<int, Tri>> faces;
    for (const auto& t : mesh.tets) {
        const std::array<Tri, 4> f = {Tri{t[1], t[2], t[3]}, Tri{t[0], t[3], t[2]}, Tri{t[0], t[1], t[3]},
                                      Tri{t[0], t[2], t[1]}};
        for (const auto& tri : f) {
            auto& entry = faces[sorted3(tri[0], tri[1], tri[2])];
            ++entry.first;
            entry.second = tri;
        }
    }
    std::vector<Tri> out;
    for (const auto& [key, entry] : faces)
        if (entry.first == 1) out.push_back(entry.second);
    return out;
}

SurfaceMesh boundary_surface(const TetMesh& mesh) {
    SurfaceMesh s;
    s.triangles = boundary_faces(mesh);
    std::vector<int> remap(mesh.vertices.size(), -1);
    for (auto& t : s.triangles)
        for (int& v : t) {
            if (remap[std::size_t(v)] < 0) {
                remap[std::size_t(v)] = int(s.vertices.size());
                s.vertices.push_back(mesh.vertices[std::size_t(v)]);
            }
            v = remap[std::size_t(v)];
        }
    return s;
}

void compact(TetMesh& mesh) {
    std::vector<int> remap(mesh.vertices.size(), -1);
    std::vector<Vec3> verts;
    for (auto& t : mesh.tets)
        for (int& v : t) {
            if (remap[std::size_t(v)] < 0) {
                remap[std::size_t(v)] = int(verts.size());
                verts.push_back(mesh.vertices[std::size_t(v)]);
            }
            v = remap[std::size_t(v)];
        }
    mesh.vertices = std::move(verts);
}

TetMesh voxel_tet_mesh(const BinaryMask& mask, const std::optional<TaubinParams>& smooth_boundary) {
    mask.geom.validate();
    if (mask.empty()) throw Error("voxel_tet_mesh: empty mask");
    const auto& g = mask.geom;
    const std::size_t cx = std::size_t(g.dims[0]) + 1, cy = std::size_t(g.dims[1]) + 1;
    auto corner_key = [&](int i, int j, int k) { return std::size_t(i) + cx * (std::size_t(j) + cy * std::size_t(k)); };

    TetMesh out;
    std::unordered_map<std::size_t, int> corner_vertex;
    const auto& kt = kuhn();
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) {
                if (!mask.at(i, j, k)) continue;
                std::array<int, 8> ids;
                for (int c = 0; c < 8; ++c) {
                    const int ci = i + (c & 1), cj = j + ((c >> 1) & 1), ck = k + ((c >> 2) & 1);
                    auto [it, fresh] = corner_vertex.try_emplace(corner_key(ci, cj, ck), int(out.vertices.size()));
                    if (fresh)
                        out.vertices.push_back(g.origin +
                                               g.spacing.cwiseProduct(Vec3(ci - 0.5, cj - 0.5, ck - 0.5)));
                    ids[std::size_t(c)] = it->second;
                }
                const int voxel = int(g.linear(i, j, k));
                for (const auto& t : kt.tets) {
                    out.tets.push_back({ids[std::size_t(t[0])], ids[std::size_t(t[1])], ids[std::size_t(t[2])],
                                        ids[std::size_t(t[3])]});
                    out.cell_tags.push_back(voxel);
                }
            }

    if (smooth_boundary) {
        const std::vector<Tri> faces = boundary_faces(out);
        std::vector<std::uint8_t> movable(out.vertices.size(), 0);
        for (const auto& f : faces)
            for (int v : f) movable[std::size_t(v)] = 1;
        taubin_smooth_vertices(out.vertices, faces, movable, *smooth_boundary);
        for (std::size_t t = 0; t < out.tets.size(); ++t)
            if (tet_signed_volume(out, t) <= 0.0)
                throw Error("voxel_tet_mesh: boundary smoothing inverted tetrahedron " + std::to_string(t));
    }
    return out;
}

MeshStats mesh_stats(const TetMesh& mesh) {
    MeshStats s;
    s.min_quality = mesh.tets.empty() ? 0.0 : 1.0;
    for (std::size_t t = 0; t < mesh.tets.size(); ++t) {
        const double v = tet_signed_volume(mesh, t);
        s.volume += v;
        if (v <= 0.0) ++s.inverted_tets;
        const auto& q = mesh.tets[t];
        const double quality =
            tet_quality(mesh.vertices[std::size_t(q[0])], mesh.vertices[std::size_t(q[1])],
                        mesh.vertices[std::size_t(q[2])], mesh.vertices[std::size_t(q[3])]);
        s.min_quality = std::min(s.min_quality, quality);
        s.max_quality = std::max(s.max_quality, quality);
    }
    s.boundary_face_count = boundary_faces(mesh).size();
    return s;
}

TetMesh box_tet_mesh(const std::array<int, 3>& n, const Vec3& h, const Vec3& lo) {
    voxelio::GridGeometry g;
    g.dims = n;
    g.spacing = h;
    g.origin = lo + 0.5 * h;
    return voxel_tet_mesh(BinaryMask(g, true));
}

}  // namespace liverperf::mesh
