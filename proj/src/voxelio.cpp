#include "liverperf/voxelio.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

namespace liverperf::voxelio {

namespace {

using nlohmann::json;

std::size_t dtype_size(DType t) {
    switch (t) {
        case DType::u8: return 1;
        case DType::i16: return 2;
        case DType::f32: return 4;
    }
    return 0;
}

void put_le(std::vector<char>& out, const void* src, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(src);
    if constexpr (std::endian::native == std::endian::little) {
        out.insert(out.end(), bytes, bytes + n);
    } else {
        for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<char>(bytes[n - 1 - i]));
    }
}

void get_le(const char* src, void* dst, std::size_t n) {
    auto* bytes = static_cast<unsigned char*>(dst);
    if constexpr (std::endian::native == std::endian::little) {
        std::memcpy(bytes, src, n);
    } else {
        for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<unsigned char>(src[n - 1 - i]);
    }
}

std::vector<char> encode(const std::vector<double>& values, DType t) {
    std::vector<char> out;
    out.reserve(values.size() * dtype_size(t));
    for (std::size_t n = 0; n < values.size(); ++n) {
        const double v = values[n];
        switch (t) {
            case DType::u8: {
                if (v != std::floor(v) || v < 0 || v > 255)
                    throw Error("save_volume: value " + std::to_string(v) + " at index " + std::to_string(n) +
                                " not representable as u8");
                const auto x = static_cast<std::uint8_t>(v);
                put_le(out, &x, 1);
                break;
            }
            case DType::i16: {
                if (v != std::floor(v) || v < -32768 || v > 32767)
                    throw Error("save_volume: value " + std::to_string(v) + " at index " + std::to_string(n) +
                                " not representable as i16");
                const auto x = static_cast<std::int16_t>(v);
                put_le(out, &x, 2);
                break;
            }
            case DType::f32: {
                const auto x = static_cast<float>(v);
                put_le(out, &x, 4);
                break;
            }
        }
    }
    return out;
}

std::vector<double> decode(const std::vector<char>& raw, DType t, std::size_t count) {
    std::vector<double> values(count);
    const std::size_t w = dtype_size(t);
    for (std::size_t n = 0; n < count; ++n) {
        const char* p = raw.data() + n * w;
        switch (t) {
            case DType::u8: values[n] = static_cast<unsigned char>(*p); break;
            case DType::i16: {
                std::int16_t x;
                get_le(p, &x, 2);
                values[n] = x;
                break;
            }
            case DType::f32: {
                float x;
                get_le(p, &x, 4);
                values[n] = x;
                break;
            }
        }
    }
    return values;
}

json vec_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }

Vec3 json_vec(const json& j, const char* name) {
    if (!j.is_array() || j.size() != 3) throw Error(std::string("volume header: '") + name + "' must be a 3-array");
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

void write_pair(const GridGeometry& g, DType t, const std::vector<char>& payload,
                const std::filesystem::path& header_path) {
    std::filesystem::path raw_path = header_path;
    raw_path.replace_extension(".raw");
    json h;
    h["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
    h["spacing"] = vec_json(g.spacing);
    h["origin"] = vec_json(g.origin);
    h["dtype"] = to_string(t);
    h["byte_order"] = "little";
    h["data_file"] = raw_path.filename().string();

    std::ofstream hs(header_path, std::ios::trunc);
    if (!hs) throw Error("save_volume: cannot open " + header_path.string());
    hs << h.dump(2) << '\n';
    if (!hs) throw Error("save_volume: write failed for " + header_path.string());

    std::ofstream rs(raw_path, std::ios::binary | std::ios::trunc);
    if (!rs) throw Error("save_volume: cannot open " + raw_path.string());
    rs.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!rs) throw Error("save_volume: write failed for " + raw_path.string());
}

struct RawVolume {
    GridGeometry geom;
    DType dtype;
    std::vector<char> payload;
};

RawVolume read_pair(const std::filesystem::path& header_path) {
    if (!std::filesystem::exists(header_path)) throw Error("load_volume: missing file " + header_path.string());
    std::ifstream hs(header_path);
    json h;
    try {
        hs >> h;
    } catch (const json::exception& e) {
        throw Error("load_volume: malformed header " + header_path.string() + ": " + e.what());
    }
    for (const char* key : {"dims", "spacing", "dtype"})
        if (!h.contains(key)) throw Error(std::string("load_volume: header lacks '") + key + "'");

    RawVolume rv;
    const auto& d = h["dims"];
    if (!d.is_array() || d.size() != 3) throw Error("volume header: 'dims' must be a 3-array");
    rv.geom.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    rv.geom.spacing = json_vec(h["spacing"], "spacing");
    rv.geom.origin = h.contains("origin") ? json_vec(h["origin"], "origin") : Vec3::Zero();
    rv.geom.validate();
    rv.dtype = dtype_from_string(h["dtype"].get<std::string>());
    if (h.value("byte_order", std::string("little")) != "little")
        throw Error("load_volume: only little-endian payloads are supported");

    std::filesystem::path raw_path = header_path;
    raw_path.replace_extension(".raw");
    if (h.contains("data_file")) raw_path = header_path.parent_path() / h["data_file"].get<std::string>();
    if (!std::filesystem::exists(raw_path)) throw Error("load_volume: missing payload " + raw_path.string());
    std::ifstream rs(raw_path, std::ios::binary);
    rv.payload.assign(std::istreambuf_iterator<char>(rs), std::istreambuf_iterator<char>());
    const std::size_t expected = rv.geom.size() * dtype_size(rv.dtype);
    if (rv.payload.size() != expected)
        throw Error("load_volume: payload has " + std::to_string(rv.payload.size()) + " bytes, header implies " +
                    std::to_string(expected));
    return rv;
}

// Pads by `r` background voxels on every side.
BinaryMask pad(const BinaryMask& m, int r) {
    GridGeometry g = m.geom;
    for (int a = 0; a < 3; ++a) {
        g.dims[a] += 2 * r;
        g.origin[a] -= r * g.spacing[a];
    }
    BinaryMask out(g);
    for (int k = 0; k < m.geom.dims[2]; ++k)
        for (int j = 0; j < m.geom.dims[1]; ++j)
            for (int i = 0; i < m.geom.dims[0]; ++i)
                if (m.at(i, j, k)) out.set(i + r, j + r, k + r, true);
    return out;
}

BinaryMask unpad(const BinaryMask& m, const GridGeometry& g, int r) {
    BinaryMask out(g);
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) out.set(i, j, k, m.at(i + r, j + r, k + r));
    return out;
}

constexpr int kFace[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};

// One step with the unit cross; `erode` treats out-of-bounds as background.
BinaryMask cross_step(const BinaryMask& m, bool erode_step) {
    BinaryMask out(m.geom);
    const auto& d = m.geom.dims;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                bool v = m.at(i, j, k);
                for (const auto& o : kFace) {
                    const bool n = m.get(i + o[0], j + o[1], k + o[2]);
                    v = erode_step ? (v && n) : (v || n);
                }
                out.set(i, j, k, v);
            }
    return out;
}

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (p - (a + t * ab)).norm();
}

// Axis-aligned bounding box of the analytic shape.
void shape_bounds(const PhantomSpec& s, Vec3& lo, Vec3& hi) {
    switch (s.kind) {
        case PhantomKind::sphere:
            lo = s.center.array() - s.radius;
            hi = s.center.array() + s.radius;
            return;
        case PhantomKind::ellipsoid:
            lo = s.center - s.semi_axes;
            hi = s.center + s.semi_axes;
            return;
        case PhantomKind::tube:
        case PhantomKind::y_tube:
            lo = Vec3::Constant(std::numeric_limits<double>::infinity());
            hi = -lo;
            for (const auto& p : s.points) {
                lo = lo.cwiseMin(p);
                hi = hi.cwiseMax(p);
            }
            lo.array() -= s.radius;
            hi.array() += s.radius;
            return;
    }
}

}  // namespace

std::string to_string(DType t) {
    switch (t) {
        case DType::u8: return "u8";
        case DType::i16: return "i16";
        case DType::f32: return "f32";
    }
    return "?";
}

DType dtype_from_string(const std::string& s) {
    if (s == "u8") return DType::u8;
    if (s == "i16") return DType::i16;
    if (s == "f32") return DType::f32;
    throw Error("unsupported dtype '" + s + "' (expected u8, i16 or f32)");
}

Index3 GridGeometry::unravel(std::size_t idx) const {
    const std::size_t nx = std::size_t(dims[0]), ny = std::size_t(dims[1]);
    return {int(idx % nx), int((idx / nx) % ny), int(idx / (nx * ny))};
}

void GridGeometry::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw Error("grid dims must be >= 1 on every axis");
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) throw Error("grid spacing must be > 0 on every axis");
    }
}

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

VoxelGrid load_volume(const std::filesystem::path& header_path) {
    RawVolume rv = read_pair(header_path);
    VoxelGrid g;
    g.geom = rv.geom;
    g.dtype = rv.dtype;
    g.values = decode(rv.payload, rv.dtype, rv.geom.size());
    return g;
}

void save_volume(const VoxelGrid& grid, const std::filesystem::path& header_path) {
    grid.geom.validate();
    if (grid.values.size() != grid.geom.size()) throw Error("save_volume: value count does not match dims");
    write_pair(grid.geom, grid.dtype, encode(grid.values, grid.dtype), header_path);
}

BinaryMask load_mask(const std::filesystem::path& header_path) {
    const VoxelGrid g = load_volume(header_path);
    BinaryMask m(g.geom);
    for (std::size_t n = 0; n < g.values.size(); ++n) m.values[n] = g.values[n] != 0.0 ? 1 : 0;
    return m;
}

void save_mask(const BinaryMask& mask, const std::filesystem::path& header_path) {
    save_volume(mask_to_grid(mask), header_path);
}

VoxelGrid mask_to_grid(const BinaryMask& mask) {
    VoxelGrid g(mask.geom, 0.0, DType::u8);
    for (std::size_t n = 0; n < mask.values.size(); ++n) g.values[n] = mask.values[n] ? 1.0 : 0.0;
    return g;
}

BinaryMask grid_to_mask(const VoxelGrid& grid, double threshold) {
    BinaryMask m(grid.geom);
    for (std::size_t n = 0; n < grid.values.size(); ++n) m.values[n] = grid.values[n] >= threshold ? 1 : 0;
    return m;
}

PhantomKind phantom_kind_from_string(const std::string& s) {
    if (s == "sphere") return PhantomKind::sphere;
    if (s == "ellipsoid") return PhantomKind::ellipsoid;
    if (s == "tube") return PhantomKind::tube;
    if (s == "y_tube") return PhantomKind::y_tube;
    throw Error("unknown phantom kind '" + s + "'");
}

bool phantom_contains(const PhantomSpec& s, const Vec3& p) {
    switch (s.kind) {
        case PhantomKind::sphere: return (p - s.center).squaredNorm() <= s.radius * s.radius;
        case PhantomKind::ellipsoid: {
            if ((s.semi_axes.array() <= 0.0).any()) return false;
            return ((p - s.center).array() / s.semi_axes.array()).square().sum() <= 1.0;
        }
        case PhantomKind::tube: return segment_distance(p, s.points[0], s.points[1]) <= s.radius;
        case PhantomKind::y_tube:
            for (int b = 1; b <= 3; ++b)
                if (segment_distance(p, s.points[0], s.points[std::size_t(b)]) <= s.radius) return true;
            return false;
    }
    return false;
}

BinaryMask phantom_mask(const PhantomSpec& spec) {
    spec.geom.validate();
    if (spec.kind == PhantomKind::tube && spec.points.size() != 2)
        throw Error("tube phantom needs exactly 2 axis points");
    if (spec.kind == PhantomKind::y_tube && spec.points.size() != 4)
        throw Error("y_tube phantom needs a junction and 3 end points");
    if (spec.radius < 0.0) throw Error("phantom radius must be >= 0");

    Vec3 lo, hi;
    shape_bounds(spec, lo, hi);
    const Vec3 vlo = spec.geom.origin - 0.5 * spec.geom.spacing;
    const Vec3 vhi = spec.geom.center(spec.geom.dims[0] - 1, spec.geom.dims[1] - 1, spec.geom.dims[2] - 1) +
                     0.5 * spec.geom.spacing;
    for (int a = 0; a < 3; ++a)
        if (lo[a] < vlo[a] - 1e-12 || hi[a] > vhi[a] + 1e-12) throw Error("phantom shape exceeds volume bounds");

    BinaryMask m(spec.geom);
    const auto& d = spec.geom.dims;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) m.set(i, j, k, phantom_contains(spec, spec.geom.center(i, j, k)));
    return m;
}

VoxelGrid make_phantom(const PhantomSpec& spec) {
    const BinaryMask m = phantom_mask(spec);
    VoxelGrid g(spec.geom, spec.outside, DType::f32);
    Rng rng(spec.seed);
    for (std::size_t n = 0; n < g.values.size(); ++n) {
        double v = m.values[n] ? spec.inside : spec.outside;
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
        // Stored values are f32-representable so that save/load is exact.
        g.values[n] = static_cast<double>(static_cast<float>(v));
    }
    return g;
}

VoxelGrid gaussian_blur(const VoxelGrid& grid, const Vec3& sigma_mm) {
    for (int a = 0; a < 3; ++a)
        if (sigma_mm[a] < 0.0 || !std::isfinite(sigma_mm[a])) throw Error("gaussian_blur: sigma must be >= 0");
    VoxelGrid cur = grid;
    cur.dtype = DType::f32;
    const auto& d = grid.geom.dims;
    std::vector<double> line;
    for (int axis = 0; axis < 3; ++axis) {
        const double s = sigma_mm[axis] / grid.geom.spacing[axis];
        if (s == 0.0) continue;
        const int half = static_cast<int>(std::ceil(3.0 * s));
        std::vector<double> kernel(std::size_t(2 * half + 1));
        double sum = 0.0;
        for (int t = -half; t <= half; ++t) sum += kernel[std::size_t(t + half)] = std::exp(-0.5 * t * t / (s * s));
        for (double& w : kernel) w /= sum;

        VoxelGrid out = cur;
        const int n = d[axis];
        line.resize(std::size_t(n));
        const int o1 = (axis + 1) % 3, o2 = (axis + 2) % 3;
        Index3 ijk{};
        for (int b = 0; b < d[o2]; ++b)
            for (int a = 0; a < d[o1]; ++a) {
                ijk[o1] = a;
                ijk[o2] = b;
                for (int t = 0; t < n; ++t) {
                    ijk[axis] = t;
                    line[std::size_t(t)] = cur.values[grid.geom.linear(ijk)];
                }
                for (int t = 0; t < n; ++t) {
                    double acc = 0.0;
                    for (int q = -half; q <= half; ++q) {
                        const int src = std::clamp(t + q, 0, n - 1);
                        acc += kernel[std::size_t(q + half)] * line[std::size_t(src)];
                    }
                    ijk[axis] = t;
                    out.values[grid.geom.linear(ijk)] = acc;
                }
            }
        cur = std::move(out);
    }
    return cur;
}

BinaryMask erode(const BinaryMask& mask, int radius) {
    if (radius < 0) throw Error("erode: radius must be >= 0");
    BinaryMask m = mask;
    for (int r = 0; r < radius; ++r) m = cross_step(m, true);
    return m;
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
    if (radius < 0) throw Error("dilate: radius must be >= 0");
    BinaryMask m = mask;
    for (int r = 0; r < radius; ++r) m = cross_step(m, false);
    return m;
}

BinaryMask morph_open(const BinaryMask& mask, int radius) {
    if (radius == 0) return mask;
    return dilate(erode(mask, radius), radius);
}

BinaryMask morph_close(const BinaryMask& mask, int radius) {
    if (radius == 0) return mask;
    // The padded frame holds the whole dilation, so closing behaves as on an
    // unbounded lattice and stays extensive at the borders.
    const BinaryMask p = pad(mask, radius);
    return unpad(erode(dilate(p, radius), radius), mask.geom, radius);
}

VoxelGrid downsample2(const VoxelGrid& grid) {
    GridGeometry g = grid.geom;
    for (int a = 0; a < 3; ++a) {
        g.dims[a] = (grid.geom.dims[a] + 1) / 2;
        g.spacing[a] *= 2.0;
        g.origin[a] += 0.5 * grid.geom.spacing[a];
    }
    VoxelGrid out(g, 0.0, DType::f32);
    std::vector<int> count(g.size(), 0);
    const auto& d = grid.geom.dims;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const std::size_t dst = g.linear(i / 2, j / 2, k / 2);
                out.values[dst] += grid.at(i, j, k);
                ++count[dst];
            }
    for (std::size_t n = 0; n < out.values.size(); ++n) out.values[n] /= count[n];
    return out;
}

VoxelGrid crop(const VoxelGrid& grid, const Index3& lo, const Index3& hi) {
    GridGeometry g = grid.geom;
    for (int a = 0; a < 3; ++a) {
        if (lo[a] < 0 || hi[a] > grid.geom.dims[a] || lo[a] >= hi[a]) throw Error("crop: box outside the grid");
        g.dims[a] = hi[a] - lo[a];
        g.origin[a] += lo[a] * grid.geom.spacing[a];
    }
    VoxelGrid out(g, 0.0, grid.dtype);
    for (int k = 0; k < g.dims[2]; ++k)
        for (int j = 0; j < g.dims[1]; ++j)
            for (int i = 0; i < g.dims[0]; ++i) out.at(i, j, k) = grid.at(i + lo[0], j + lo[1], k + lo[2]);
    return out;
}

}  // namespace liverperf::voxelio
