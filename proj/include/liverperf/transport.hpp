#pragma once

// Tracer transport through the compartments: cell-centered upwind finite
// volumes on the tets with Heun (two-stage Runge-Kutta) time stepping.
//
//   phi_i V dS_i/dt = - sum_faces F S_up - sum_j q_ij S_up + Q_in c_in(t) - Q_out S_i
//
// Saturations S are dimensionless, fluxes mm^3/s, volumes mm^3, times s.

#include "liverperf/darcy.hpp"

#include <array>
#include <map>
#include <vector>

namespace liverperf::transport {

using mesh::TetMesh;

/// Interior faces of a tet mesh. Each face is shared by exactly two cells;
/// the normal points from cells[0] to cells[1].
struct FaceTopology {
    std::vector<std::array<int, 2>> cells;
    std::vector<Vec3> normal;  ///< unit
    std::vector<double> area;  ///< mm^2
    std::size_t boundary_faces = 0;
};

/// Throws on faces shared by more than two cells.
FaceTopology build_faces(const TetMesh& mesh);

/// Per compartment, per interior face: area * n . (w_a + w_b) / 2, positive
/// from cells[0] to cells[1]. Boundary faces carry no flux.
std::vector<std::vector<double>> face_fluxes(const FaceTopology& faces, const darcy::VelocityField& velocity);

/// Net outflow through the faces of each cell.
std::vector<double> face_divergence(const FaceTopology& faces, const std::vector<double>& flux, std::size_t cells);

struct CorrectionReport {
    double max_correction = 0.0;    ///< max |F - F_avg| over faces
    double max_flux = 0.0;          ///< max |F_avg|
    double source_imbalance = 0.0;  ///< |sum of targets| before projection, largest component
};

/// Smallest (least-squares) change of the face fluxes such that the net
/// outflow of every cell equals `target`. Each connected group of cells
/// gets the target with its mean removed.
std::vector<double> conservative_fluxes(const FaceTopology& faces, const std::vector<double>& flux,
                                        const std::vector<double>& target, CorrectionReport* report = nullptr);

/// Time to concentration, piecewise linear, constant outside the samples.
struct Bolus {
    std::vector<double> times;
    std::vector<double> values;

    double operator()(double t) const;
    double max_value() const;
    static Bolus step(double c = 1.0, double t0 = 0.0);
    /// c on [t0, t1), 0 elsewhere.
    static Bolus pulse(double c, double t0, double t1);
};

struct Inlet {
    int cell = 0;
    double flux = 0.0;   ///< mm^3/s, > 0
    double delay = 0.0;  ///< s, the cell sees c_in(t - delay)
};

struct Exchange {
    std::size_t from = 0, to = 0;
    std::vector<double> q;  ///< per cell, flux from `from` to `to` (mm^3/s)
};

/// Everything the time stepper needs, on cells.
struct TransportProblem {
    std::vector<double> volume;                  ///< per cell (mm^3)
    std::vector<double> porosity;                ///< per compartment
    std::vector<std::array<int, 2>> face_cells;  ///< interior faces
    std::vector<std::vector<double>> face_flux;  ///< per compartment, per face
    std::vector<std::vector<Inlet>> inlets;      ///< per compartment
    std::vector<std::vector<double>> outflow;    ///< per compartment, per cell, >= 0; empty = none
    std::vector<Exchange> exchange;

    std::size_t cell_count() const { return volume.size(); }
    std::size_t size() const { return porosity.size(); }
    void validate() const;
};

using SaturationField = std::vector<Eigen::VectorXd>;  ///< per compartment, per cell

SaturationField zero_field(const TransportProblem& prob);

struct CflLimit {
    double dt = 0.0;  ///< infinite when nothing flows
    std::size_t compartment = 0;
    int cell = -1;
};

/// min over cells of phi V / (outgoing face flux + outgoing exchange + outflow).
CflLimit cfl_limit(const TransportProblem& prob);

/// Tracer that entered and left through inlets and outflows.
struct MassLedger {
    double injected = 0.0;
    double exited = 0.0;
};

/// sum_i phi_i sum_c V_c S_ic
double tracer_mass(const TransportProblem& prob, const SaturationField& s);

/// One Heun step from t to t + dt. Throws, naming the limiting cell, if dt
/// exceeds the CFL limit. Adds the step's inflow and outflow to `ledger`.
SaturationField rk2_step(const TransportProblem& prob, const SaturationField& s, double t, double dt,
                         const Bolus& bolus, MassLedger* ledger = nullptr);

struct TransportParams {
    std::vector<double> porosity = {0.2, 0.1, 0.2};
    double cfl = 0.4;
    double end_time = 60.0;
    double snapshot_interval = 1.0;
    Bolus bolus = Bolus::step();
    std::size_t inlet_compartment = 0;
    /// Per portal terminal: delay its injection by the 1D transit time.
    bool delay_by_transit_time = false;
    double arrival_threshold = 0.01;

    void validate(std::size_t compartments) const;
};

struct CellSourceOptions {
    std::size_t inlet_compartment = 0;
    /// Per nodal-load vertex, injection delay (s); empty = none.
    std::map<int, double> vertex_delay;
};

struct ProblemReport {
    std::vector<CorrectionReport> correction;  ///< per compartment
    /// max over cells and compartments of |net face outflow - (in - out - exchange)|
    double divergence_mismatch = 0.0;
};

/// Transport problem of a solved Darcy system. Nodal loads go to the
/// incident cells in proportion to cell volume: positive loads of the inlet
/// compartment become inlets, negative loads become outflows (positive
/// loads elsewhere are inlets with zero concentration, i.e. clean blood).
/// Exchange q_ij = G_ij V (p_i - p_j) at the cell mean. Face fluxes are the
/// averaged Darcy fluxes, corrected to match each cell's balance.
TransportProblem build_problem(const darcy::CompartmentSystem& sys, const darcy::PressureField& p,
                               const darcy::VelocityField& w, const std::vector<double>& porosity,
                               const CellSourceOptions& opt = {}, ProblemReport* report = nullptr);

struct TransportResult {
    std::vector<double> times;         ///< snapshot times, starting at 0
    std::vector<SaturationField> snapshots;
    std::vector<std::vector<double>> mass;  ///< per snapshot, per compartment
    MassLedger ledger;
    int steps = 0;
    double dt = 0.0;                   ///< nominal step
    double max_ledger_error = 0.0;     ///< relative, over all steps
    double min_saturation = 0.0;       ///< over all steps, cells and compartments
    double max_saturation = 0.0;
    /// Per compartment, first step end time at which some cell exceeds
    /// params.arrival_threshold; infinite if never.
    std::vector<double> arrival;
};

/// Steps from S = 0 at t = 0 to params.end_time with dt = cfl * limit,
/// shortened to land on snapshot times.
TransportResult simulate_transport(const TransportProblem& prob, const TransportParams& params);

/// C = sum_i phi_i S_i per cell.
Eigen::VectorXd total_concentration(const SaturationField& s, const std::vector<double>& porosity);

}  // namespace liverperf::transport
