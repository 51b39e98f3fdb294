#include "liverperf/flow1d.hpp"

#include <Eigen/SparseLU>

#include <cmath>
#include <limits>
#include <numbers>

namespace liverperf::flow1d {

using tree::NodeKind;

namespace {

constexpr double kMm = 1e-3;

double w_in(const tree::Topology& top, const VascularTree& t, const std::vector<double>& w, int e) {
    const int u = t.edges[std::size_t(e)].parent;
    const int pe = top.parent_edge[std::size_t(u)];
    return pe < 0 ? w[std::size_t(e)] : w[std::size_t(pe)];
}

}  // namespace

void FluidProps::validate() const {
    if (!(density > 0.0)) throw Error("fluid: density must be > 0");
    if (!(viscosity > 0.0)) throw Error("fluid: viscosity must be > 0");
}

double branch_loss(double w, double length, double diameter, const FluidProps& props) {
    if (!(diameter > 0.0)) throw Error("branch_loss: diameter must be > 0");
    return 32.0 * props.viscosity * length * w / (diameter * diameter);
}

Eigen::VectorXd tree_residual(const VascularTree& t, const TreeFlowState& s, const FluidProps& props) {
    const tree::Topology top = tree::topology(t);
    if (s.w.size() != t.edges.size() || s.area.size() != t.edges.size() || s.p.size() != t.nodes.size())
        throw Error("tree_residual: state does not match the tree");
    std::vector<int> junctions;
    for (std::size_t v = 0; v < t.nodes.size(); ++v)
        if (int(v) != t.root && !top.children[v].empty()) junctions.push_back(int(v));
    Eigen::VectorXd r(Eigen::Index(junctions.size() + t.edges.size()));
    Eigen::Index row = 0;
    for (int v : junctions) {
        const int pe = top.parent_edge[std::size_t(v)];
        double q = s.area[std::size_t(pe)] * s.w[std::size_t(pe)];
        for (int ce : top.children[std::size_t(v)]) q -= s.area[std::size_t(ce)] * s.w[std::size_t(ce)];
        r[row++] = q;
    }
    const double half_rho = 0.5 * props.density;
    for (std::size_t e = 0; e < t.edges.size(); ++e) {
        const auto& edge = t.edges[e];
        const double wi = w_in(top, t, s.w, int(e));
        const double d = 2.0 * std::sqrt(s.area[e] / std::numbers::pi);
        r[row++] = s.p[std::size_t(edge.parent)] + half_rho * wi * wi - s.p[std::size_t(edge.child)] -
                   half_rho * s.w[e] * s.w[e] - branch_loss(s.w[e], edge.length * kMm, d, props);
    }
    return r;
}

FlowSystem::FlowSystem(const VascularTree& t, double w0, const std::map<int, double>& terminal_pressures,
                       const FluidProps& props)
    : t_(t), top_(tree::topology(t)), w0_(w0), props_(props) {
    props.validate();
    if (!std::isfinite(w0)) throw Error("flow1d: w0 must be finite");
    if (top_.children[std::size_t(t.root)].size() != 1) throw Error("flow1d: the root must have exactly one child edge");
    const std::size_t ne = t.edges.size(), nn = t.nodes.size();
    area_.resize(ne);
    length_.resize(ne);
    diameter_.resize(ne);
    for (std::size_t e = 0; e < ne; ++e) {
        const double r = t.edges[e].radius * kMm;
        if (!(r > 0.0))
            throw Error("flow1d: singular Jacobian, edge into node " + std::to_string(t.edges[e].child) +
                        " has zero radius");
        area_[e] = std::numbers::pi * r * r;
        diameter_[e] = 2.0 * r;
        length_[e] = t.edges[e].length * kMm;
    }
    p_fixed_.assign(nn, std::numeric_limits<double>::quiet_NaN());
    w_slot_.assign(ne, -1);
    p_slot_.assign(nn, -1);
    const int root_edge = top_.children[std::size_t(t.root)][0];
    for (std::size_t e = 0; e < ne; ++e)
        if (int(e) != root_edge) {
            w_slot_[e] = int(w_index_.size());
            w_index_.push_back(int(e));
        }
    for (std::size_t v = 0; v < nn; ++v) {
        if (top_.children[v].empty()) {
            const auto it = terminal_pressures.find(int(v));
            if (it == terminal_pressures.end())
                throw Error("flow1d: no pressure for terminal node " + std::to_string(v));
            p_fixed_[v] = it->second;
        } else {
            p_slot_[v] = int(w_index_.size() + p_index_.size());
            p_index_.push_back(int(v));
            if (int(v) != t.root) junctions_.push_back(int(v));
        }
    }
    for (const auto& [v, p] : terminal_pressures)
        if (v < 0 || v >= int(nn) || !top_.children[std::size_t(v)].empty())
            throw Error("flow1d: pressure given for node " + std::to_string(v) + ", which is not a terminal");
}

double FlowSystem::w_of(const Eigen::VectorXd& x, int e) const {
    const int s = w_slot_[std::size_t(e)];
    return s < 0 ? w0_ : x[s];
}

double FlowSystem::p_of(const Eigen::VectorXd& x, int v) const {
    const int s = p_slot_[std::size_t(v)];
    return s < 0 ? p_fixed_[std::size_t(v)] : x[s];
}

Eigen::VectorXd FlowSystem::residual(const Eigen::VectorXd& x) const {
    return tree_residual(t_, state(x), props_);
}

Eigen::SparseMatrix<double> FlowSystem::jacobian(const Eigen::VectorXd& x) const {
    std::vector<Eigen::Triplet<double>> trip;
    int row = 0;
    auto add_w = [&](int r, int e, double value) {
        if (w_slot_[std::size_t(e)] >= 0) trip.emplace_back(r, w_slot_[std::size_t(e)], value);
    };
    auto add_p = [&](int r, int v, double value) {
        if (p_slot_[std::size_t(v)] >= 0) trip.emplace_back(r, p_slot_[std::size_t(v)], value);
    };
    for (int v : junctions_) {
        add_w(row, top_.parent_edge[std::size_t(v)], area_[std::size_t(top_.parent_edge[std::size_t(v)])]);
        for (int ce : top_.children[std::size_t(v)]) add_w(row, ce, -area_[std::size_t(ce)]);
        ++row;
    }
    const double rho = props_.density;
    for (std::size_t e = 0; e < t_.edges.size(); ++e) {
        const auto& edge = t_.edges[e];
        const int pe = top_.parent_edge[std::size_t(edge.parent)];
        const double we = w_of(x, int(e));
        const double dloss = 32.0 * props_.viscosity * length_[e] / (diameter_[e] * diameter_[e]);
        add_p(row, edge.parent, 1.0);
        add_p(row, edge.child, -1.0);
        if (pe < 0) {
            // Root edge: the kinetic terms cancel.
            add_w(row, int(e), -dloss);
        } else {
            add_w(row, pe, rho * w_of(x, pe));
            add_w(row, int(e), -rho * we - dloss);
        }
        ++row;
    }
    Eigen::SparseMatrix<double> j(row, size());
    j.setFromTriplets(trip.begin(), trip.end());
    return j;
}

TreeFlowState FlowSystem::state(const Eigen::VectorXd& x) const {
    TreeFlowState s;
    s.w0 = w0_;
    s.area = area_;
    s.w.resize(t_.edges.size());
    for (std::size_t e = 0; e < t_.edges.size(); ++e) s.w[e] = w_of(x, int(e));
    s.p.resize(t_.nodes.size());
    for (std::size_t v = 0; v < t_.nodes.size(); ++v) s.p[v] = p_of(x, int(v));
    return s;
}

Eigen::VectorXd FlowSystem::initial_guess() const {
    Eigen::VectorXd x(size());
    std::vector<double> q(t_.edges.size(), 0.0);
    const int root_edge = top_.children[std::size_t(t_.root)][0];
    q[std::size_t(root_edge)] = area_[std::size_t(root_edge)] * w0_;
    for (int v : top_.preorder) {
        const int pe = top_.parent_edge[std::size_t(v)];
        if (pe < 0) continue;
        const auto& kids = top_.children[std::size_t(v)];
        for (int ce : kids) q[std::size_t(ce)] = q[std::size_t(pe)] / double(kids.size());
    }
    for (std::size_t i = 0; i < w_index_.size(); ++i) {
        const int e = w_index_[i];
        x[Eigen::Index(i)] = q[std::size_t(e)] / area_[std::size_t(e)];
    }
    double mean = 0.0;
    int count = 0;
    for (double p : p_fixed_)
        if (!std::isnan(p)) {
            mean += p;
            ++count;
        }
    mean /= count;
    for (std::size_t i = 0; i < p_index_.size(); ++i) x[Eigen::Index(w_index_.size() + i)] = mean;
    return x;
}

int FlowSystem::node_of_unknown(int i) const {
    if (i < int(w_index_.size())) return t_.edges[std::size_t(w_index_[std::size_t(i)])].child;
    return p_index_[std::size_t(i) - w_index_.size()];
}

TreeFlowState solve_tree_flow(const VascularTree& t, double w0, const std::map<int, double>& terminal_pressures,
                              const FluidProps& props) {
    const FlowSystem sys(t, w0, terminal_pressures, props);
    const tree::Topology top = tree::topology(t);
    const int n_mass = int(sys.residual(sys.initial_guess()).size()) - int(t.edges.size());
    const double area0 = sys.state(sys.initial_guess()).area[std::size_t(top.children[std::size_t(t.root)][0])];
    const double tol_p = 1e-10 * std::max(1.0, props.density * w0 * w0);
    const double tol_q = 1e-10 * area0 * std::max(1.0, std::abs(w0));
    auto converged = [&](const Eigen::VectorXd& r) {
        return r.head(n_mass).lpNorm<Eigen::Infinity>() < tol_q && r.tail(Eigen::Index(t.edges.size())).lpNorm<Eigen::Infinity>() < tol_p;
    };
    // Merit on scaled residuals so mass and pressure rows weigh alike.
    auto merit = [&](const Eigen::VectorXd& r) {
        return std::max(r.head(n_mass).lpNorm<Eigen::Infinity>() / tol_q,
                        r.tail(Eigen::Index(t.edges.size())).lpNorm<Eigen::Infinity>() / tol_p);
    };

    Eigen::VectorXd x = sys.initial_guess();
    Eigen::VectorXd r = sys.residual(x);
    auto newton_step = [&] {
        const Eigen::SparseMatrix<double> j = sys.jacobian(x);
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
        lu.compute(j);
        if (lu.info() != Eigen::Success) {
            // Locate the weakest column for the report.
            Eigen::VectorXd colmax = Eigen::VectorXd::Zero(j.cols());
            for (int k = 0; k < j.outerSize(); ++k)
                for (Eigen::SparseMatrix<double>::InnerIterator itj(j, k); itj; ++itj)
                    colmax[k] = std::max(colmax[k], std::abs(itj.value()));
            Eigen::Index worst = 0;
            colmax.minCoeff(&worst);
            throw Error("flow1d: singular Jacobian near node " + std::to_string(sys.node_of_unknown(int(worst))));
        }
        const Eigen::VectorXd dx = lu.solve(r);
        double step = 1.0;
        const double m0 = merit(r);
        Eigen::VectorXd xn = x - dx, rn = sys.residual(xn);
        for (int half = 0; half < 20 && merit(rn) > m0; ++half) {
            step *= 0.5;
            xn = x - step * dx;
            rn = sys.residual(xn);
        }
        if (merit(rn) <= m0) {
            x = xn;
            r = rn;
        }
    };
    int it = 0;
    for (; !converged(r); ++it) {
        if (it >= 50) throw Error("flow1d: Newton did not converge in 50 iterations");
        newton_step();
    }
    // One more step takes the residual to rounding level.
    if (it > 0) {
        newton_step();
        ++it;
    }
    TreeFlowState s = sys.state(x);
    s.iterations = it;
    s.residual_norm = r.lpNorm<Eigen::Infinity>();
    return s;
}

std::map<int, double> transit_times(const VascularTree& t, const TreeFlowState& s) {
    const tree::Topology top = tree::topology(t);
    if (s.w.size() != t.edges.size()) throw Error("transit_times: state does not match the tree");
    const int root_edge = top.children[std::size_t(t.root)].empty() ? -1 : top.children[std::size_t(t.root)][0];
    const double sign = root_edge >= 0 && s.w[std::size_t(root_edge)] < 0.0 ? -1.0 : 1.0;
    std::vector<double> time(t.nodes.size(), 0.0);
    std::map<int, double> out;
    for (int v : top.preorder) {
        const int pe = top.parent_edge[std::size_t(v)];
        if (pe >= 0) {
            const double w = sign * s.w[std::size_t(pe)];
            const double dt = w > 0.0 ? t.edges[std::size_t(pe)].length * kMm / w
                                      : std::numeric_limits<double>::infinity();
            time[std::size_t(v)] = time[std::size_t(t.edges[std::size_t(pe)].parent)] + dt;
        }
        if (top.children[std::size_t(v)].empty() && v != t.root) out[v] = time[std::size_t(v)];
    }
    return out;
}

}  // namespace liverperf::flow1d
