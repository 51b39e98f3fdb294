#include "liverperf/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace liverperf::transport {

namespace {

constexpr std::array<std::array<int, 3>, 4> kFaces = {{{1, 2, 3}, {0, 2, 3}, {0, 1, 3}, {0, 1, 2}}};

std::vector<double> cell_volumes(const TetMesh& m) {
    std::vector<double> v(m.tets.size());
    for (std::size_t t = 0; t < m.tets.size(); ++t) v[t] = std::abs(mesh::tet_signed_volume(m, t));
    return v;
}

// Connected groups of cells over interior faces; label = smallest cell.
std::vector<int> cell_groups(const std::vector<std::array<int, 2>>& faces, std::size_t cells) {
    std::vector<int> parent(cells);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int u) {
        while (parent[std::size_t(u)] != u) {
            parent[std::size_t(u)] = parent[std::size_t(parent[std::size_t(u)])];
            u = parent[std::size_t(u)];
        }
        return u;
    };
    for (const auto& f : faces) {
        const int a = find(f[0]), b = find(f[1]);
        if (a != b) parent[std::size_t(std::max(a, b))] = std::min(a, b);
    }
    std::vector<int> label(cells);
    for (std::size_t c = 0; c < cells; ++c) label[c] = find(int(c));
    return label;
}

void remove_group_means(Eigen::VectorXd& v, const std::vector<int>& label) {
    std::vector<double> sum(label.size(), 0.0);
    std::vector<int> count(label.size(), 0);
    for (std::size_t c = 0; c < label.size(); ++c) {
        sum[std::size_t(label[c])] += v[Eigen::Index(c)];
        ++count[std::size_t(label[c])];
    }
    for (std::size_t c = 0; c < label.size(); ++c)
        v[Eigen::Index(c)] -= sum[std::size_t(label[c])] / count[std::size_t(label[c])];
}

// Net tracer inflow rate (concentration-weighted, mm^3/s) of every cell and
// compartment, plus the inlet and outlet totals.
struct Rates {
    SaturationField rate;
    double in = 0.0, out = 0.0;
};

Rates rates(const TransportProblem& prob, const SaturationField& s, double t, const Bolus& bolus) {
    const std::size_t n = prob.size(), nc = prob.cell_count();
    Rates r;
    r.rate.assign(n, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nc)));
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::VectorXd& ri = r.rate[i];
        const Eigen::VectorXd& si = s[i];
        const auto& flux = prob.face_flux[i];
        for (std::size_t f = 0; f < prob.face_cells.size(); ++f) {
            const double q = flux[f];
            const int a = prob.face_cells[f][0], b = prob.face_cells[f][1];
            if (q > 0.0) {
                const double m = q * si[a];
                ri[a] -= m;
                ri[b] += m;
            } else if (q < 0.0) {
                const double m = -q * si[b];
                ri[b] -= m;
                ri[a] += m;
            }
        }
        for (const Inlet& in : prob.inlets[i]) {
            const double m = in.flux * bolus(t - in.delay);
            ri[in.cell] += m;
            r.in += m;
        }
        if (!prob.outflow[i].empty())
            for (std::size_t c = 0; c < nc; ++c) {
                const double m = prob.outflow[i][c] * si[Eigen::Index(c)];
                ri[Eigen::Index(c)] -= m;
                r.out += m;
            }
    }
    for (const Exchange& e : prob.exchange)
        for (std::size_t c = 0; c < nc; ++c) {
            const double q = e.q[c];
            const auto k = Eigen::Index(c);
            const double m = q > 0.0 ? q * s[e.from][k] : q * s[e.to][k];
            r.rate[e.from][k] -= m;
            r.rate[e.to][k] += m;
        }
    return r;
}

}  // namespace

FaceTopology build_faces(const TetMesh& m) {
    struct Entry {
        std::array<int, 3> key;
        int cell, local;
    };
    std::vector<Entry> entries;
    entries.reserve(m.tets.size() * 4);
    for (std::size_t t = 0; t < m.tets.size(); ++t)
        for (int l = 0; l < 4; ++l) {
            std::array<int, 3> key;
            for (int k = 0; k < 3; ++k) key[std::size_t(k)] = m.tets[t][std::size_t(kFaces[std::size_t(l)][std::size_t(k)])];
            std::sort(key.begin(), key.end());
            entries.push_back({key, int(t), l});
        }
    std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        return a.key != b.key ? a.key < b.key : a.cell < b.cell;
    });

    FaceTopology out;
    for (std::size_t k = 0; k < entries.size();) {
        std::size_t e = k + 1;
        while (e < entries.size() && entries[e].key == entries[k].key) ++e;
        if (e - k > 2) {
            std::ostringstream msg;
            msg << "transport: non-conforming mesh, face (" << entries[k].key[0] << ", " << entries[k].key[1] << ", "
                << entries[k].key[2] << ") is shared by " << (e - k) << " cells";
            throw Error(msg.str());
        }
        if (e - k == 1) {
            ++out.boundary_faces;
        } else {
            const Entry& a = entries[k];
            const Vec3& p0 = m.vertices[std::size_t(a.key[0])];
            const Vec3& p1 = m.vertices[std::size_t(a.key[1])];
            const Vec3& p2 = m.vertices[std::size_t(a.key[2])];
            Vec3 n = (p1 - p0).cross(p2 - p0);
            const double len = n.norm();
            if (!(len > 0.0)) throw Error("transport: degenerate face in cell " + std::to_string(a.cell));
            n /= len;
            const Vec3& opposite = m.vertices[std::size_t(m.tets[std::size_t(a.cell)][std::size_t(a.local)])];
            if (n.dot(p0 - opposite) < 0.0) n = -n;
            out.cells.push_back({a.cell, entries[k + 1].cell});
            out.normal.push_back(n);
            out.area.push_back(0.5 * len);
        }
        k = e;
    }
    return out;
}

std::vector<std::vector<double>> face_fluxes(const FaceTopology& faces, const darcy::VelocityField& velocity) {
    std::vector<std::vector<double>> out(velocity.w.size(), std::vector<double>(faces.cells.size(), 0.0));
    for (std::size_t i = 0; i < velocity.w.size(); ++i) {
        const auto& w = velocity.w[i];
        for (std::size_t f = 0; f < faces.cells.size(); ++f) {
            const Vec3 avg = 0.5 * (w[std::size_t(faces.cells[f][0])] + w[std::size_t(faces.cells[f][1])]);
            out[i][f] = faces.area[f] * faces.normal[f].dot(avg);
        }
    }
    return out;
}

std::vector<double> face_divergence(const FaceTopology& faces, const std::vector<double>& flux, std::size_t cells) {
    std::vector<double> div(cells, 0.0);
    for (std::size_t f = 0; f < faces.cells.size(); ++f) {
        div[std::size_t(faces.cells[f][0])] += flux[f];
        div[std::size_t(faces.cells[f][1])] -= flux[f];
    }
    return div;
}

std::vector<double> conservative_fluxes(const FaceTopology& faces, const std::vector<double>& flux,
                                        const std::vector<double>& target, CorrectionReport* report) {
    const std::size_t nc = target.size();
    if (flux.size() != faces.cells.size()) throw Error("transport: one flux per interior face expected");
    const std::vector<int> label = cell_groups(faces.cells, nc);
    const std::vector<double> div = face_divergence(faces, flux, nc);

    Eigen::VectorXd rhs(static_cast<Eigen::Index>(nc));
    for (std::size_t c = 0; c < nc; ++c) rhs[Eigen::Index(c)] = target[c] - div[c];
    std::vector<double> group_sum(nc, 0.0);
    for (std::size_t c = 0; c < nc; ++c) group_sum[std::size_t(label[c])] += target[c];
    remove_group_means(rhs, label);

    // Graph Laplacian B B^T of the cell-face incidence; isolated cells get
    // a unit diagonal (their right side is zero after the projection).
    std::vector<Eigen::Triplet<double>> trip;
    std::vector<double> degree(nc, 0.0);
    for (const auto& f : faces.cells) {
        trip.emplace_back(f[0], f[1], -1.0);
        trip.emplace_back(f[1], f[0], -1.0);
        degree[std::size_t(f[0])] += 1.0;
        degree[std::size_t(f[1])] += 1.0;
    }
    for (std::size_t c = 0; c < nc; ++c) trip.emplace_back(int(c), int(c), degree[c] > 0.0 ? degree[c] : 1.0);
    Eigen::SparseMatrix<double> lap(static_cast<Eigen::Index>(nc), static_cast<Eigen::Index>(nc));
    lap.setFromTriplets(trip.begin(), trip.end());

    Eigen::VectorXd psi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nc));
    darcy::pcg(lap, rhs, psi, 1e-13, 100000, [&](Eigen::VectorXd& v) { remove_group_means(v, label); });

    std::vector<double> out(flux);
    double max_corr = 0.0, max_flux = 0.0;
    for (std::size_t f = 0; f < out.size(); ++f) {
        const double d = psi[faces.cells[f][0]] - psi[faces.cells[f][1]];
        out[f] += d;
        max_corr = std::max(max_corr, std::abs(d));
        max_flux = std::max(max_flux, std::abs(flux[f]));
    }
    if (report) {
        report->max_correction = max_corr;
        report->max_flux = max_flux;
        report->source_imbalance = 0.0;
        for (double g : group_sum) report->source_imbalance = std::max(report->source_imbalance, std::abs(g));
    }
    return out;
}

double Bolus::operator()(double t) const {
    if (times.empty()) return 0.0;
    if (t < times.front()) return values.front();
    if (t >= times.back()) return values.back();
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    const std::size_t k = std::size_t(it - times.begin());
    const double t0 = times[k - 1], t1 = times[k];
    if (t1 == t0) return values[k];
    const double a = (t - t0) / (t1 - t0);
    return (1.0 - a) * values[k - 1] + a * values[k];
}

double Bolus::max_value() const {
    return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
}

Bolus Bolus::step(double c, double t0) { return Bolus{{t0, t0}, {0.0, c}}; }

Bolus Bolus::pulse(double c, double t0, double t1) { return Bolus{{t0, t0, t1, t1}, {0.0, c, c, 0.0}}; }

void TransportProblem::validate() const {
    const std::size_t n = size(), nc = cell_count();
    if (n == 0) throw Error("transport: no compartments");
    for (double p : porosity)
        if (!(p > 0.0)) throw Error("transport: porosity must be > 0");
    for (double v : volume)
        if (!(v > 0.0)) throw Error("transport: cell volumes must be > 0");
    if (face_flux.size() != n || inlets.size() != n || outflow.size() != n)
        throw Error("transport: per-compartment data does not match the number of compartments");
    for (const auto& f : face_cells)
        if (f[0] < 0 || f[1] < 0 || std::size_t(f[0]) >= nc || std::size_t(f[1]) >= nc)
            throw Error("transport: face references a missing cell");
    for (std::size_t i = 0; i < n; ++i) {
        if (face_flux[i].size() != face_cells.size()) throw Error("transport: one flux per face expected");
        if (!outflow[i].empty() && outflow[i].size() != nc) throw Error("transport: one outflow per cell expected");
        for (double q : outflow[i])
            if (!(q >= 0.0)) throw Error("transport: outflows must be >= 0");
        for (const Inlet& in : inlets[i])
            if (in.cell < 0 || std::size_t(in.cell) >= nc || !(in.flux >= 0.0) || !(in.delay >= 0.0))
                throw Error("transport: invalid inlet");
    }
    for (const Exchange& e : exchange)
        if (e.from >= n || e.to >= n || e.from == e.to || e.q.size() != nc)
            throw Error("transport: invalid exchange");
}

SaturationField zero_field(const TransportProblem& prob) {
    return SaturationField(prob.size(), Eigen::VectorXd::Zero(Eigen::Index(prob.cell_count())));
}

CflLimit cfl_limit(const TransportProblem& prob) {
    const std::size_t n = prob.size(), nc = prob.cell_count();
    std::vector<std::vector<double>> out(n, std::vector<double>(nc, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t f = 0; f < prob.face_cells.size(); ++f) {
            const double q = prob.face_flux[i][f];
            if (q > 0.0) out[i][std::size_t(prob.face_cells[f][0])] += q;
            else out[i][std::size_t(prob.face_cells[f][1])] -= q;
        }
        if (!prob.outflow[i].empty())
            for (std::size_t c = 0; c < nc; ++c) out[i][c] += prob.outflow[i][c];
    }
    for (const Exchange& e : prob.exchange)
        for (std::size_t c = 0; c < nc; ++c) {
            if (e.q[c] > 0.0) out[e.from][c] += e.q[c];
            else out[e.to][c] -= e.q[c];
        }
    CflLimit lim;
    lim.dt = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < nc; ++c)
            if (out[i][c] > 0.0) {
                const double dt = prob.porosity[i] * prob.volume[c] / out[i][c];
                if (dt < lim.dt) lim = {dt, i, int(c)};
            }
    return lim;
}

double tracer_mass(const TransportProblem& prob, const SaturationField& s) {
    double m = 0.0;
    for (std::size_t i = 0; i < prob.size(); ++i)
        for (std::size_t c = 0; c < prob.cell_count(); ++c) m += prob.porosity[i] * prob.volume[c] * s[i][Eigen::Index(c)];
    return m;
}

SaturationField rk2_step(const TransportProblem& prob, const SaturationField& s, double t, double dt,
                         const Bolus& bolus, MassLedger* ledger) {
    if (!(dt > 0.0)) throw Error("transport: time step must be > 0");
    const CflLimit lim = cfl_limit(prob);
    if (dt > lim.dt * (1.0 + 1e-12)) {
        std::ostringstream msg;
        msg << "transport: dt = " << dt << " s exceeds the CFL limit " << lim.dt << " s set by cell " << lim.cell
            << " of compartment " << lim.compartment;
        throw Error(msg.str());
    }
    const std::size_t n = prob.size();
    std::vector<Eigen::VectorXd> inv(n);
    for (std::size_t i = 0; i < n; ++i) {
        inv[i].resize(Eigen::Index(prob.cell_count()));
        for (std::size_t c = 0; c < prob.cell_count(); ++c)
            inv[i][Eigen::Index(c)] = 1.0 / (prob.porosity[i] * prob.volume[c]);
    }

    const Rates r1 = rates(prob, s, t, bolus);
    SaturationField pred(n);
    for (std::size_t i = 0; i < n; ++i) pred[i] = s[i] + dt * inv[i].cwiseProduct(r1.rate[i]);
    const Rates r2 = rates(prob, pred, t + dt, bolus);
    SaturationField next(n);
    for (std::size_t i = 0; i < n; ++i)
        next[i] = s[i] + (0.5 * dt) * inv[i].cwiseProduct(r1.rate[i] + r2.rate[i]);
    if (ledger) {
        ledger->injected += 0.5 * dt * (r1.in + r2.in);
        ledger->exited += 0.5 * dt * (r1.out + r2.out);
    }
    return next;
}

void TransportParams::validate(std::size_t compartments) const {
    if (porosity.size() != compartments)
        throw Error("transport: " + std::to_string(compartments) + " porosities expected, got " +
                    std::to_string(porosity.size()));
    double sum = 0.0;
    for (double p : porosity) {
        if (!(p > 0.0)) throw Error("transport: porosity must be > 0");
        sum += p;
    }
    if (sum > 1.0 + 1e-12) throw Error("transport: porosities must sum to <= 1");
    if (!(cfl > 0.0 && cfl <= 1.0)) throw Error("transport: CFL number must be in (0, 1]");
    if (!(end_time >= 0.0)) throw Error("transport: end time must be >= 0");
    if (!(snapshot_interval > 0.0)) throw Error("transport: snapshot interval must be > 0");
    if (inlet_compartment >= compartments) throw Error("transport: inlet compartment out of range");
    if (bolus.times.size() != bolus.values.size()) throw Error("transport: bolus times and values differ in length");
    if (!std::is_sorted(bolus.times.begin(), bolus.times.end())) throw Error("transport: bolus times must ascend");
    for (double c : bolus.values)
        if (!(c >= 0.0 && c <= 1.0)) throw Error("transport: bolus concentration must be in [0, 1]");
}

TransportProblem build_problem(const darcy::CompartmentSystem& sys, const darcy::PressureField& p,
                               const darcy::VelocityField& w, const std::vector<double>& porosity,
                               const CellSourceOptions& opt, ProblemReport* report) {
    const std::size_t n = sys.size(), nv = sys.node_count(), nc = sys.mesh.tets.size();
    if (porosity.size() != n) throw Error("transport: one porosity per compartment expected");
    if (opt.inlet_compartment >= n) throw Error("transport: inlet compartment out of range");
    const FaceTopology faces = build_faces(sys.mesh);

    TransportProblem prob;
    prob.volume = cell_volumes(sys.mesh);
    prob.porosity = porosity;
    prob.face_cells = faces.cells;
    prob.inlets.resize(n);
    prob.outflow.assign(n, std::vector<double>(nc, 0.0));

    // Nodal sources: loads plus the reactions at fixed pressures.
    std::vector<Eigen::VectorXd> load(n, Eigen::VectorXd::Zero(Eigen::Index(nv)));
    for (std::size_t i = 0; i < n; ++i)
        if (i < sys.sources.size() && sys.sources[i].size() > 0) load[i] = sys.sources[i];
    bool any_fixed = false;
    for (const auto& f : sys.fixed) any_fixed = any_fixed || !f.empty();
    if (any_fixed) {
        const darcy::Assembly a = darcy::assemble(sys);
        Eigen::VectorXd x(Eigen::Index(n * nv));
        for (std::size_t i = 0; i < n; ++i) x.segment(Eigen::Index(i * nv), Eigen::Index(nv)) = p.p[i];
        const Eigen::VectorXd ax = a.matrix * x;
        for (std::size_t i = 0; i < sys.fixed.size(); ++i)
            for (const auto& kv : sys.fixed[i]) {
                const auto k = Eigen::Index(i * nv + std::size_t(kv.first));
                load[i][kv.first] = ax[k];
            }
    }

    // Share of each vertex's load per incident cell, by volume.
    std::vector<double> vertex_volume(nv, 0.0);
    for (std::size_t c = 0; c < nc; ++c)
        for (int v : sys.mesh.tets[c]) vertex_volume[std::size_t(v)] += prob.volume[c];

    std::vector<std::vector<double>> target(n, std::vector<double>(nc, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        std::map<std::pair<int, double>, double> inflow;  // (cell, delay) -> flux
        for (std::size_t c = 0; c < nc; ++c)
            for (int v : sys.mesh.tets[c]) {
                const double f = load[i][v];
                if (f == 0.0) continue;
                const double share = f * prob.volume[c] / vertex_volume[std::size_t(v)];
                target[i][c] += share;
                if (share > 0.0) {
                    double delay = 0.0;
                    if (i == opt.inlet_compartment) {
                        const auto it = opt.vertex_delay.find(v);
                        if (it != opt.vertex_delay.end()) delay = it->second;
                    }
                    inflow[{int(c), delay}] += share;
                } else {
                    prob.outflow[i][c] -= share;
                }
            }
        for (const auto& [key, flux] : inflow) prob.inlets[i].push_back({key.first, flux, key.second});
    }

    // Exchange at the cell mean pressure difference.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double g = sys.coupling(Eigen::Index(i), Eigen::Index(j));
            if (g == 0.0) continue;
            Exchange e{i, j, std::vector<double>(nc, 0.0)};
            for (std::size_t c = 0; c < nc; ++c) {
                double dp = 0.0;
                for (int v : sys.mesh.tets[c]) dp += p.p[i][v] - p.p[j][v];
                e.q[c] = g * prob.volume[c] * 0.25 * dp;
                target[i][c] -= e.q[c];
                target[j][c] += e.q[c];
            }
            prob.exchange.push_back(std::move(e));
        }

    const auto avg = face_fluxes(faces, w);
    if (report) report->correction.resize(n);
    prob.face_flux.resize(n);
    double mismatch = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        prob.face_flux[i] = conservative_fluxes(faces, avg[i], target[i], report ? &report->correction[i] : nullptr);
        const auto div = face_divergence(faces, prob.face_flux[i], nc);
        for (std::size_t c = 0; c < nc; ++c) mismatch = std::max(mismatch, std::abs(div[c] - target[i][c]));
    }
    if (report) report->divergence_mismatch = mismatch;
    prob.validate();
    return prob;
}

TransportResult simulate_transport(const TransportProblem& prob, const TransportParams& params) {
    prob.validate();
    params.validate(prob.size());
    if (params.porosity != prob.porosity) throw Error("transport: parameter porosities differ from the problem's");
    const CflLimit lim = cfl_limit(prob);

    TransportResult res;
    SaturationField s = zero_field(prob);
    res.dt = std::isfinite(lim.dt) ? params.cfl * lim.dt : params.snapshot_interval;
    auto record = [&](double t) {
        res.times.push_back(t);
        res.snapshots.push_back(s);
        std::vector<double> m(prob.size(), 0.0);
        for (std::size_t i = 0; i < prob.size(); ++i)
            for (std::size_t c = 0; c < prob.cell_count(); ++c)
                m[i] += prob.porosity[i] * prob.volume[c] * s[i][Eigen::Index(c)];
        res.mass.push_back(std::move(m));
    };
    res.arrival.assign(prob.size(), std::numeric_limits<double>::infinity());
    auto check_arrival = [&](double t) {
        for (std::size_t i = 0; i < prob.size(); ++i)
            if (std::isinf(res.arrival[i]) && s[i].size() > 0 && s[i].maxCoeff() > params.arrival_threshold)
                res.arrival[i] = t;
    };

    record(0.0);
    double t = 0.0;
    int next_snap = 1;
    while (t < params.end_time) {
        const double t_snap = std::min(params.end_time, next_snap * params.snapshot_interval);
        double dt = std::min(res.dt, t_snap - t);
        const bool lands = t + dt >= t_snap * (1.0 - 1e-14);
        s = rk2_step(prob, s, t, dt, params.bolus, &res.ledger);
        t = lands ? t_snap : t + dt;
        ++res.steps;
        const double mass = tracer_mass(prob, s);
        const double expected = res.ledger.injected - res.ledger.exited;
        const double ref = std::max({res.ledger.injected, std::abs(mass), 1e-300});
        res.max_ledger_error = std::max(res.max_ledger_error, std::abs(mass - expected) / ref);
        check_arrival(t);
        for (const auto& x : s)
            if (x.size() > 0) {
                res.min_saturation = std::min(res.min_saturation, x.minCoeff());
                res.max_saturation = std::max(res.max_saturation, x.maxCoeff());
            }
        if (lands) {
            record(t);
            ++next_snap;
        }
    }
    return res;
}

Eigen::VectorXd total_concentration(const SaturationField& s, const std::vector<double>& porosity) {
    if (s.size() != porosity.size()) throw Error("transport: one porosity per compartment expected");
    if (s.empty()) return {};
    Eigen::VectorXd c = Eigen::VectorXd::Zero(s[0].size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i].size() != c.size()) throw Error("transport: compartments differ in cell count");
        c += porosity[i] * s[i];
    }
    return c;
}

}  // namespace liverperf::transport
