#include "liverperf/segmentation.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace liverperf::seg {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

double log_normal(double x, double mean, double var) {
    const double d = x - mean;
    return -0.5 * (kLog2Pi + std::log(var) + d * d / var);
}

double log_sum_exp(const std::vector<double>& v) {
    const double m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

// Residual graph with paired forward/backward arcs (arc ^ 1 is the twin).
struct Residual {
    std::vector<int> head;   // first arc of each node in `order`
    std::vector<int> order;  // arc ids grouped by tail node
    std::vector<int> to;
    std::vector<double> cap;

    explicit Residual(const FlowNetwork& net) {
        const std::size_t m = net.arcs.size();
        to.resize(2 * m);
        cap.resize(2 * m);
        std::vector<int> from(2 * m);
        for (std::size_t e = 0; e < m; ++e) {
            const Arc& a = net.arcs[e];
            if (a.capacity < 0.0 || !std::isfinite(a.capacity)) throw Error("max_flow: capacities must be finite and >= 0");
            if (a.from < 0 || a.to < 0 || a.from >= net.node_count || a.to >= net.node_count)
                throw Error("max_flow: arc endpoint out of range");
            from[2 * e] = a.from;
            to[2 * e] = a.to;
            cap[2 * e] = a.from == a.to ? 0.0 : a.capacity;
            from[2 * e + 1] = a.to;
            to[2 * e + 1] = a.from;
            cap[2 * e + 1] = 0.0;
        }
        head.assign(std::size_t(net.node_count) + 1, 0);
        for (int f : from) ++head[std::size_t(f) + 1];
        std::partial_sum(head.begin(), head.end(), head.begin());
        order.resize(2 * m);
        std::vector<int> fill(head.begin(), head.end() - 1);
        for (std::size_t e = 0; e < 2 * m; ++e) order[std::size_t(fill[std::size_t(from[e])]++)] = int(e);
    }
};

}  // namespace

// ---- seeds -------------------------------------------------------------------

SeedSet load_seeds(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open seed file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed seed file " + path.string() + ": " + e.what());
    }
    SeedSet s;
    auto read = [&](const char* key, std::vector<Index3>& out) {
        if (!j.contains(key) || !j[key].is_array()) throw Error(std::string("seed file lacks array '") + key + "'");
        for (const auto& e : j[key]) {
            if (!e.is_array() || e.size() != 3) throw Error("seed entries must be [i,j,k]");
            out.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<int>()});
        }
    };
    read("foreground", s.foreground);
    read("background", s.background);
    return s;
}

void save_seeds(const SeedSet& seeds, const std::filesystem::path& path) {
    nlohmann::json j;
    j["foreground"] = nlohmann::json::array();
    j["background"] = nlohmann::json::array();
    for (const auto& s : seeds.foreground) j["foreground"].push_back({s[0], s[1], s[2]});
    for (const auto& s : seeds.background) j["background"].push_back({s[0], s[1], s[2]});
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write seed file " + path.string());
    out << j.dump(1) << '\n';
}

void validate_seeds(const SeedSet& seeds, const voxelio::GridGeometry& geom) {
    if (seeds.foreground.empty() || seeds.background.empty())
        throw Error("segmentation needs at least one foreground and one background seed");
    std::set<std::size_t> fg;
    for (const auto& s : seeds.foreground) {
        if (!geom.in_bounds(s[0], s[1], s[2])) throw Error("foreground seed out of bounds");
        fg.insert(geom.linear(s));
    }
    for (const auto& s : seeds.background) {
        if (!geom.in_bounds(s[0], s[1], s[2])) throw Error("background seed out of bounds");
        if (fg.count(geom.linear(s))) throw Error("a voxel is seeded both foreground and background");
    }
}

// ---- Gaussian mixture ----------------------------------------------------------

double GmmModel::density(double x) const { return std::exp(-neg_log_likelihood(x)); }

double GmmModel::neg_log_likelihood(double x) const {
    std::vector<double> terms;
    terms.reserve(components.size());
    for (const auto& c : components) terms.push_back(std::log(c.weight) + log_normal(x, c.mean, c.variance));
    return -log_sum_exp(terms);
}

GmmFitResult fit_gmm(const std::vector<double>& samples, int k, std::uint64_t seed, const GmmOptions& opt) {
    if (k < 1) throw Error("fit_gmm: k must be >= 1");
    if (samples.size() < std::size_t(k)) throw Error("fit_gmm: fewer samples than components");
    std::vector<double> distinct(samples);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < std::size_t(k))
        throw Error("fit_gmm: " + std::to_string(k) + " components requested but only " +
                    std::to_string(distinct.size()) + " distinct sample values");

    const double range = distinct.back() - distinct.front();
    const double floor = opt.variance_floor >= 0.0 ? opt.variance_floor : (range > 0.0 ? 1e-6 * range * range : 1e-6);
    const std::size_t n = samples.size();
    const std::size_t kk = std::size_t(k);

    // k-means++ seeding over the sample set, then Lloyd refinement.
    Rng rng(seed);
    std::vector<double> centers;
    centers.push_back(samples[rng.index(n)]);
    std::vector<double> d2(n);
    while (centers.size() < kk) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (double c : centers) best = std::min(best, (samples[i] - c) * (samples[i] - c));
            d2[i] = best;
            total += best;
        }
        double r = rng.uniform() * total;
        std::size_t pick = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (d2[i] <= 0.0) continue;
            pick = i;
            r -= d2[i];
            if (r < 0.0) break;
        }
        centers.push_back(samples[pick]);
    }
    std::vector<std::size_t> label(n, 0);
    for (int it = 0; it < 100; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < kk; ++c)
                if (std::abs(samples[i] - centers[c]) < std::abs(samples[i] - centers[best])) best = c;
            changed |= best != label[i];
            label[i] = best;
        }
        std::vector<double> sum(kk, 0.0);
        std::vector<std::size_t> cnt(kk, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sum[label[i]] += samples[i];
            ++cnt[label[i]];
        }
        for (std::size_t c = 0; c < kk; ++c)
            if (cnt[c]) centers[c] = sum[c] / double(cnt[c]);
        if (!changed && it > 0) break;
    }

    GmmModel model;
    for (std::size_t c = 0; c < kk; ++c) {
        double w = 0.0, var = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (label[i] == c) {
                w += 1.0;
                var += (samples[i] - centers[c]) * (samples[i] - centers[c]);
            }
        var = w > 0 ? var / w : floor;
        model.components.push_back({std::max(w, 1.0) / double(n), centers[c], std::max(var, floor)});
    }
    double wsum = 0.0;
    for (const auto& c : model.components) wsum += c.weight;
    for (auto& c : model.components) c.weight /= wsum;

    GmmFitResult result;
    std::vector<double> resp(n * kk);
    std::vector<double> logs(kk);
    auto e_step = [&]() {
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < kk; ++c)
                logs[c] = std::log(model.components[c].weight) +
                          log_normal(samples[i], model.components[c].mean, model.components[c].variance);
            const double lse = log_sum_exp(logs);
            ll += lse;
            for (std::size_t c = 0; c < kk; ++c) resp[i * kk + c] = std::exp(logs[c] - lse);
        }
        return ll / double(n);
    };

    // Gains are measured on the mean per-sample log-likelihood.
    double ll = e_step();
    for (int it = 0; it < opt.max_iterations; ++it) {
        for (std::size_t c = 0; c < kk; ++c) {
            double nk = 0.0, mu = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                nk += resp[i * kk + c];
                mu += resp[i * kk + c] * samples[i];
            }
            if (nk <= 0.0) continue;  // component lost all support: keep it as is
            mu /= nk;
            double var = 0.0;
            for (std::size_t i = 0; i < n; ++i) var += resp[i * kk + c] * (samples[i] - mu) * (samples[i] - mu);
            model.components[c] = {nk / double(n), mu, std::max(var / nk, floor)};
        }
        const double next = e_step();
        result.log_likelihood_trace.push_back(next);
        ++result.iterations;
        const double gain = next - ll;
        ll = next;
        if (gain < opt.tolerance) break;
    }
    for (auto& c : model.components) c.weight = std::max(c.weight, std::numeric_limits<double>::min());
    result.model = std::move(model);
    return result;
}

// ---- max-flow ----------------------------------------------------------------

MaxFlowResult max_flow(const FlowNetwork& net) {
    if (net.source == net.sink) throw Error("max_flow: source equals sink");
    Residual g(net);
    const int nn = net.node_count, s = net.source, t = net.sink;
    std::vector<int> level(static_cast<std::size_t>(nn));
    std::vector<int> cursor(static_cast<std::size_t>(nn));
    std::vector<int> queue;
    std::vector<int> path;
    MaxFlowResult res;

    auto bfs = [&]() {
        std::fill(level.begin(), level.end(), -1);
        queue.clear();
        queue.push_back(s);
        level[std::size_t(s)] = 0;
        for (std::size_t qi = 0; qi < queue.size(); ++qi) {
            const int u = queue[qi];
            for (int p = g.head[std::size_t(u)]; p < g.head[std::size_t(u) + 1]; ++p) {
                const int e = g.order[std::size_t(p)];
                const int v = g.to[std::size_t(e)];
                if (g.cap[std::size_t(e)] > 0.0 && level[std::size_t(v)] < 0) {
                    level[std::size_t(v)] = level[std::size_t(u)] + 1;
                    queue.push_back(v);
                }
            }
        }
        return level[std::size_t(t)] >= 0;
    };

    while (bfs()) {
        for (int u = 0; u < nn; ++u) cursor[std::size_t(u)] = g.head[std::size_t(u)];
        path.clear();
        int u = s;
        while (true) {
            if (u == t) {
                double b = std::numeric_limits<double>::infinity();
                for (int e : path) b = std::min(b, g.cap[std::size_t(e)]);
                std::size_t first_sat = path.size();
                for (std::size_t i = 0; i < path.size(); ++i) {
                    const auto e = std::size_t(path[i]);
                    g.cap[e] -= b;
                    g.cap[e ^ 1U] += b;
                    if (g.cap[e] <= 0.0 && first_sat == path.size()) first_sat = i;
                }
                res.flow += b;
                path.resize(first_sat);
                u = path.empty() ? s : g.to[std::size_t(path.back())];
                continue;
            }
            bool advanced = false;
            for (int& p = cursor[std::size_t(u)]; p < g.head[std::size_t(u) + 1]; ++p) {
                const int e = g.order[std::size_t(p)];
                const int v = g.to[std::size_t(e)];
                if (g.cap[std::size_t(e)] > 0.0 && level[std::size_t(v)] == level[std::size_t(u)] + 1) {
                    path.push_back(e);
                    u = v;
                    advanced = true;
                    break;
                }
            }
            if (advanced) continue;
            level[std::size_t(u)] = -1;  // dead end for this phase
            if (u == s) break;
            path.pop_back();
            u = path.empty() ? s : g.to[std::size_t(path.back())];
            ++cursor[std::size_t(u)];
        }
    }

    res.source_side.assign(std::size_t(nn), 0);
    queue.clear();
    queue.push_back(s);
    res.source_side[std::size_t(s)] = 1;
    for (std::size_t qi = 0; qi < queue.size(); ++qi) {
        const int u = queue[qi];
        for (int p = g.head[std::size_t(u)]; p < g.head[std::size_t(u) + 1]; ++p) {
            const int e = g.order[std::size_t(p)];
            const int v = g.to[std::size_t(e)];
            if (g.cap[std::size_t(e)] > 0.0 && !res.source_side[std::size_t(v)]) {
                res.source_side[std::size_t(v)] = 1;
                queue.push_back(v);
            }
        }
    }
    return res;
}

double cut_capacity(const FlowNetwork& net, const std::vector<std::uint8_t>& source_side) {
    double c = 0.0;
    for (const Arc& a : net.arcs)
        if (source_side[std::size_t(a.from)] && !source_side[std::size_t(a.to)]) c += a.capacity;
    return c;
}

// ---- graph construction and energy ----------------------------------------------

double boundary_weight(double a, double b, double boundary_scale) {
    const double d = a - b;
    return std::exp(-d * d / (2.0 * boundary_scale * boundary_scale));
}

FlowNetwork build_graph(const VoxelGrid& grid, const SeedSet& seeds, const GmmModel& fg, const GmmModel& bg,
                        const SegmentationParams& params) {
    validate_seeds(seeds, grid.geom);
    if (params.lambda < 0.0) throw Error("lambda must be >= 0");
    if (!(params.boundary_scale > 0.0)) throw Error("boundary_scale must be > 0");
    const auto& geom = grid.geom;
    const int n = int(geom.size());
    FlowNetwork net(n);

    std::vector<std::int8_t> seed(std::size_t(n), 0);
    for (const auto& s : seeds.foreground) seed[geom.linear(s)] = 1;
    for (const auto& s : seeds.background) seed[geom.linear(s)] = -1;

    double total = 0.0;
    const auto& d = geom.dims;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const int p = int(geom.linear(i, j, k));
                const int nb[3][3] = {{i + 1, j, k}, {i, j + 1, k}, {i, j, k + 1}};
                for (const auto& q3 : nb) {
                    if (!geom.in_bounds(q3[0], q3[1], q3[2])) continue;
                    const int q = int(geom.linear(q3[0], q3[1], q3[2]));
                    const double w = boundary_weight(grid.values[std::size_t(p)], grid.values[std::size_t(q)],
                                                     params.boundary_scale);
                    net.add_arc(p, q, w);
                    net.add_arc(q, p, w);
                    total += 2.0 * w;
                }
            }

    // Region arcs. The two terminal capacities of a voxel are shifted by their
    // common minimum; this changes every cut by the same constant.
    std::vector<std::pair<double, double>> terminal(std::size_t(n), {0.0, 0.0});
    for (int p = 0; p < n; ++p) {
        if (seed[std::size_t(p)] != 0) continue;
        const double x = grid.values[std::size_t(p)];
        const double cost_fg = params.lambda * fg.neg_log_likelihood(x);
        const double cost_bg = params.lambda * bg.neg_log_likelihood(x);
        const double m = std::min(cost_fg, cost_bg);
        terminal[std::size_t(p)] = {cost_bg - m, cost_fg - m};
        total += cost_bg - m + cost_fg - m;
    }
    const double hard = std::max(params.hard_seed_weight, 1.0 + total);
    for (int p = 0; p < n; ++p) {
        const auto sp = std::size_t(p);
        if (seed[sp] > 0) {
            net.add_arc(net.source, p, hard);
        } else if (seed[sp] < 0) {
            net.add_arc(p, net.sink, hard);
        } else {
            if (terminal[sp].first > 0.0) net.add_arc(net.source, p, terminal[sp].first);
            if (terminal[sp].second > 0.0) net.add_arc(p, net.sink, terminal[sp].second);
        }
    }
    return net;
}

double energy(const BinaryMask& mask, const VoxelGrid& grid, const GmmModel& fg, const GmmModel& bg,
              const SegmentationParams& params) {
    if (!mask.geom.same_shape(grid.geom)) throw Error("energy: mask and grid shapes differ");
    const auto& geom = grid.geom;
    double region = 0.0, boundary = 0.0;
    const auto& d = geom.dims;
    for (int k = 0; k < d[2]; ++k)
        for (int j = 0; j < d[1]; ++j)
            for (int i = 0; i < d[0]; ++i) {
                const double x = grid.at(i, j, k);
                const bool a = mask.at(i, j, k);
                region += a ? fg.neg_log_likelihood(x) : bg.neg_log_likelihood(x);
                const int nb[3][3] = {{i + 1, j, k}, {i, j + 1, k}, {i, j, k + 1}};
                for (const auto& q : nb)
                    if (geom.in_bounds(q[0], q[1], q[2]) && mask.at(q[0], q[1], q[2]) != a)
                        boundary += boundary_weight(x, grid.at(q[0], q[1], q[2]), params.boundary_scale);
            }
    return params.lambda * region + boundary;
}

SegmentationResult segment_detailed(const VoxelGrid& grid, const SeedSet& seeds, const SegmentationParams& params) {
    grid.geom.validate();
    validate_seeds(seeds, grid.geom);
    auto sample = [&](const std::vector<Index3>& idx) {
        std::vector<double> v;
        v.reserve(idx.size());
        for (const auto& s : idx) v.push_back(grid.values[grid.geom.linear(s)]);
        return v;
    };
    const auto [lo, hi] = std::minmax_element(grid.values.begin(), grid.values.end());
    const double range = *hi - *lo;
    GmmOptions opt;
    opt.variance_floor = range > 0.0 ? 1e-6 * range * range : 1e-6;

    auto fit = [&](const std::vector<double>& s, std::uint64_t salt) {
        std::set<double> distinct(s.begin(), s.end());
        const int k = std::min<int>(params.gmm_components, int(distinct.size()));
        return fit_gmm(s, k, params.rng_seed ^ salt, opt).model;
    };

    SegmentationResult out;
    out.foreground_model = fit(sample(seeds.foreground), 0x9e3779b97f4a7c15ULL);
    out.background_model = fit(sample(seeds.background), 0xc2b2ae3d27d4eb4fULL);
    const FlowNetwork net = build_graph(grid, seeds, out.foreground_model, out.background_model, params);
    const MaxFlowResult mf = max_flow(net);
    out.flow = mf.flow;
    out.mask = BinaryMask(grid.geom);
    for (std::size_t p = 0; p < grid.geom.size(); ++p) out.mask.values[p] = mf.source_side[p];
    return out;
}

BinaryMask segment(const VoxelGrid& grid, const SeedSet& seeds, const SegmentationParams& params) {
    return segment_detailed(grid, seeds, params).mask;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
    if (!a.geom.same_shape(b.geom)) throw Error("dice: shapes differ");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        na += a.values[i] != 0;
        nb += b.values[i] != 0;
        inter += a.values[i] && b.values[i];
    }
    return na + nb == 0 ? 1.0 : 2.0 * double(inter) / double(na + nb);
}

}  // namespace liverperf::seg
