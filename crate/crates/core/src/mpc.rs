//! Receding-horizon control in the lifted space.
//!
//! Each forming cycle the controller measures the sheet, projects the
//! snapshot through the reduction bases, lifts it, and solves a condensed
//! QP over the lifted linear dynamics. Only the first optimized toolpath
//! coefficient vector is applied; the next cycle re-measures and re-solves
//! (state feedback always comes from the measurement, never from the
//! model's own prediction). The loop ends when the worst tracker deviation
//! from the target drops below the termination tolerance, when the cycle
//! budget is exhausted, or when a solve fails — failures are recorded in
//! the trace rather than silently retried.
//!
//! With adaptation enabled, the previous cycle's one-step prediction is
//! compared against the new measurement; if the deviation or stagnation
//! trigger fires, the lifted input map `B` is refreshed by recursive least
//! squares (see [`crate::adapt`]) before the next solve, and the QP's
//! constraint values are updated in place without re-deriving its sparsity
//! or scaling.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::adapt::{
    b_increment_report, residual, should_update, AdaptConfig, BIncrementReport, RlsState,
};
use crate::error::{Error, Result};
use crate::koopman::{KoopmanModel, NetDims};
use crate::qp::condense::{condense, MpcQpData};
use crate::qp::{QpSettings, QpSolution, QpSolver, QpStatus};
use crate::reduction::ReductionBases;

/// How many entries of each input-map increment are kept in the trace.
const B_INCREMENT_TOP_K: usize = 5;

/// Controller configuration: horizon, cost weights, input constraints, and
/// the termination rules of the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSpec {
    pub horizon: usize,
    /// Stage cost diagonal over the lifted state.
    pub q_diag: Vec<f64>,
    /// Terminal cost diagonal.
    pub q_n_diag: Vec<f64>,
    /// Input cost diagonal; must be strictly positive.
    pub r_diag: Vec<f64>,
    /// Per-coefficient toolpath bounds, mm.
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Polynomial values at the clamped edge (x = −1): the equality
    /// `c₁ᵀũ = 0` pins every toolpath to zero depth there.
    pub c1: Vec<f64>,
    /// Polynomial values at the loaded edge (x = +1): the inequality
    /// `c₂ᵀũ ≤ −ε` keeps the tool pressing down at the far end.
    pub c2: Vec<f64>,
    /// Strictness margin ε of the loaded-edge inequality, mm.
    pub end_load_eps: f64,
    /// The loop stops once max |target − measured| drops below this, mm.
    pub termination_tol_mm: f64,
    /// Hard cap on applied forming cycles.
    pub max_cycles: usize,
}

impl MpcSpec {
    /// Default weighting for a model of the given dimensions: unit weight
    /// on learned observables, emphasis `[20, 10, …, 10, 1]` on the
    /// appended reduced states (heaviest on the dominant bending mode,
    /// lightest on the last), `Q_N = 0.1 Q`, `R = 10⁻⁵ I`, toolpath
    /// coefficients bounded at ±40 mm, horizon 6, tolerance 1.5 mm.
    pub fn standard(dims: &NetDims) -> Self {
        let d_z = dims.lifted_dim();
        let r = dims.reduced_dim;
        let p = dims.input_dim;
        let mut q_diag = vec![1.0; d_z];
        let tail = &mut q_diag[d_z - r..];
        for w in tail.iter_mut() {
            *w = 10.0;
        }
        tail[0] = 20.0;
        if r > 1 {
            tail[r - 1] = 1.0;
        }
        let q_n_diag: Vec<f64> = q_diag.iter().map(|v| 0.1 * v).collect();
        MpcSpec {
            horizon: 6,
            q_diag,
            q_n_diag,
            r_diag: vec![1e-5; p],
            u_min: vec![-40.0; p],
            u_max: vec![40.0; p],
            c1: (0..p).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            c2: vec![1.0; p],
            end_load_eps: 1e-6,
            termination_tol_mm: 1.5,
            max_cycles: 6,
        }
    }

    pub fn validate(&self, dims: &NetDims) -> Result<()> {
        let d_z = dims.lifted_dim();
        let p = dims.input_dim;
        if self.horizon == 0 {
            return Err(Error::argument("the horizon must be at least one stage"));
        }
        if self.max_cycles == 0 {
            return Err(Error::argument("the cycle budget must be at least one"));
        }
        if !self.termination_tol_mm.is_finite() || self.termination_tol_mm <= 0.0 {
            return Err(Error::argument("the termination tolerance must be positive"));
        }
        if self.q_diag.len() != d_z || self.q_n_diag.len() != d_z {
            return Err(Error::argument(format!(
                "state cost diagonals have lengths {} and {}, expected {d_z}",
                self.q_diag.len(),
                self.q_n_diag.len()
            )));
        }
        for (name, v) in [
            ("input cost diagonal", &self.r_diag),
            ("clamped-edge coefficients", &self.c1),
            ("loaded-edge coefficients", &self.c2),
            ("lower toolpath bounds", &self.u_min),
            ("upper toolpath bounds", &self.u_max),
        ] {
            if v.len() != p {
                return Err(Error::argument(format!(
                    "{name} has length {}, expected {p}",
                    v.len()
                )));
            }
        }
        if self.q_diag.iter().chain(&self.q_n_diag).any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::argument("state cost diagonals must be nonnegative"));
        }
        if self.r_diag.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::argument("the input cost diagonal must be strictly positive"));
        }
        Ok(())
    }
}

/// QP settings used for the controller's own solves. The initial penalty
/// is tuned so a warm-started resolve at the default problem size finishes
/// without a mid-solve penalty rebuild, and polishing is on: the
/// loaded-edge margin (1e-6 mm) is tighter than the splitting tolerance,
/// so applied toolpaths need the active-set refinement's exact feasibility.
pub fn controller_qp_settings() -> QpSettings {
    QpSettings { rho: 1.0, polish: true, ..QpSettings::default() }
}

/// QP outcome diagnostics kept in the trace. Wall-clock time is deliberately
/// excluded so traces are byte-reproducible across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpDiagnostics {
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

impl From<&QpSolution> for QpDiagnostics {
    fn from(sol: &QpSolution) -> Self {
        QpDiagnostics {
            status: sol.status,
            iterations: sol.iterations,
            primal_residual: sol.primal_residual,
            dual_residual: sol.dual_residual,
            polished: sol.polished,
        }
    }
}

/// Everything recorded about one closed-loop cycle. A record with an empty
/// `applied_toolpath` marks a failed solve: nothing was applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Tracker snapshot measured at the start of the cycle, mm.
    pub measured: Vec<f64>,
    /// Its projection onto the deformation modes.
    pub reduced: Vec<f64>,
    /// The lifted state handed to the QP.
    pub lifted: Vec<f64>,
    /// max |target − measured| at the start of the cycle, mm.
    pub max_deviation_mm: f64,
    /// The full optimized input sequence, one coefficient vector per stage.
    pub u_sequence: Vec<Vec<f64>>,
    /// The first input reconstructed onto the station grid — the toolpath
    /// actually sent to the plant.
    pub applied_toolpath: Vec<f64>,
    /// One-step model prediction of the next snapshot, tracker space, mm.
    pub predicted_next: Vec<f64>,
    pub qp: QpDiagnostics,
    pub b_updated: bool,
    pub b_update_reason: Option<String>,
    pub b_increment: Option<BIncrementReport>,
}

/// Why the closed loop stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Termination {
    ToleranceReached,
    CycleLimit,
    QpFailure { status: QpStatus },
}

/// Full record of one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTrace {
    pub target: Vec<f64>,
    pub adapt: bool,
    pub termination_tol_mm: f64,
    pub max_cycles: usize,
    pub records: Vec<CycleRecord>,
    /// Snapshot measured after the last action (or initially, if no toolpath
    /// was ever applied), mm.
    pub final_measured: Vec<f64>,
    pub final_max_deviation_mm: f64,
    pub termination: Termination,
}

/// One line of the serialized trace.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceLine {
    Header {
        target: Vec<f64>,
        adapt: bool,
        termination_tol_mm: f64,
        max_cycles: usize,
    },
    Cycle(Box<CycleRecord>),
    Summary {
        final_measured: Vec<f64>,
        final_max_deviation_mm: f64,
        termination: Termination,
    },
}

impl ControlTrace {
    /// Number of toolpaths actually applied (failed solves excluded).
    pub fn cycles_used(&self) -> usize {
        self.records.iter().filter(|r| !r.applied_toolpath.is_empty()).count()
    }

    /// Write as JSON lines: a header, one line per cycle, and a summary.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = TraceLine::Header {
            target: self.target.clone(),
            adapt: self.adapt,
            termination_tol_mm: self.termination_tol_mm,
            max_cycles: self.max_cycles,
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        for record in &self.records {
            let line = TraceLine::Cycle(Box::new(record.clone()));
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        let summary = TraceLine::Summary {
            final_measured: self.final_measured.clone(),
            final_max_deviation_mm: self.final_max_deviation_mm,
            termination: self.termination.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| {
            Error::argument(format!("cannot read trace file {}: {e}", path.display()))
        })?;
        let reader = BufReader::new(file);
        let mut header: Option<(Vec<f64>, bool, f64, usize)> = None;
        let mut records = Vec::new();
        let mut summary: Option<(Vec<f64>, f64, Termination)> = None;
        for (row, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                row: row + 1,
                message: format!("invalid trace line: {e}"),
            })?;
            match parsed {
                TraceLine::Header { target, adapt, termination_tol_mm, max_cycles } => {
                    if header.is_some() {
                        return Err(Error::Parse {
                            path: path.display().to_string(),
                            row: row + 1,
                            message: "duplicate trace header".to_string(),
                        });
                    }
                    header = Some((target, adapt, termination_tol_mm, max_cycles));
                }
                TraceLine::Cycle(record) => records.push(*record),
                TraceLine::Summary { final_measured, final_max_deviation_mm, termination } => {
                    summary = Some((final_measured, final_max_deviation_mm, termination));
                }
            }
        }
        let (target, adapt, termination_tol_mm, max_cycles) = header.ok_or_else(|| {
            Error::argument(format!("trace file {} has no header line", path.display()))
        })?;
        let (final_measured, final_max_deviation_mm, termination) = summary.ok_or_else(|| {
            Error::argument(format!("trace file {} has no summary line", path.display()))
        })?;
        Ok(ControlTrace {
            target,
            adapt,
            termination_tol_mm,
            max_cycles,
            records,
            final_measured,
            final_max_deviation_mm,
            termination,
        })
    }
}

/// Map a target geometry into the lifted space: project it onto the
/// deformation modes, then lift through the model.
pub fn lift_target(
    model: &KoopmanModel,
    bases: &ReductionBases,
    target: &[f64],
) -> Result<Array1<f64>> {
    if bases.pod.mode_count() != model.dims.reduced_dim {
        return Err(Error::argument(format!(
            "bases have {} modes, model expects {}",
            bases.pod.mode_count(),
            model.dims.reduced_dim
        )));
    }
    let reduced = bases.pod.project(&ArrayView1::from(target))?;
    Ok(model.lift(&reduced))
}

/// Assemble the QP data for one solve from a model, a spec, and the lifted
/// current/target states.
pub fn build_problem(
    model: &KoopmanModel,
    spec: &MpcSpec,
    z0: &Array1<f64>,
    z_r: &Array1<f64>,
) -> Result<MpcQpData> {
    spec.validate(&model.dims)?;
    let d_z = model.dims.lifted_dim();
    if z0.len() != d_z || z_r.len() != d_z {
        return Err(Error::argument(format!(
            "lifted states have lengths {} and {}, expected {d_z}",
            z0.len(),
            z_r.len()
        )));
    }
    Ok(MpcQpData {
        a: model.a.clone(),
        b: model.b.clone(),
        q_diag: spec.q_diag.clone(),
        q_n_diag: spec.q_n_diag.clone(),
        r_diag: spec.r_diag.clone(),
        z0: z0.to_vec(),
        z_r: z_r.to_vec(),
        u_min: spec.u_min.clone(),
        u_max: spec.u_max.clone(),
        c1: spec.c1.clone(),
        c2: spec.c2.clone(),
        horizon: spec.horizon,
        end_load_eps: spec.end_load_eps,
    })
}

/// Reusable solver around one target: factorizations and scalings persist
/// across cycles; only the initial-state bounds (and, after an online
/// update, the input-map values) change between solves.
pub struct MpcController {
    data: MpcQpData,
    solver: QpSolver,
    previous: Option<QpSolution>,
}

impl MpcController {
    pub fn new(
        model: &KoopmanModel,
        spec: &MpcSpec,
        z0: &Array1<f64>,
        z_r: &Array1<f64>,
    ) -> Result<Self> {
        let data = build_problem(model, spec, z0, z_r)?;
        let problem = condense(&data)?;
        let solver = QpSolver::new(problem, controller_qp_settings())?;
        Ok(MpcController { data, solver, previous: None })
    }

    pub fn data(&self) -> &MpcQpData {
        &self.data
    }

    /// Solve for a new measured lifted state. Warm-starts from the previous
    /// solution shifted one stage forward (standard receding-horizon
    /// practice; roughly halves the iteration count).
    pub fn solve_cycle(&mut self, z0: &Array1<f64>) -> Result<QpSolution> {
        if z0.len() != self.data.state_dim() {
            return Err(Error::argument(format!(
                "lifted state has length {}, expected {}",
                z0.len(),
                self.data.state_dim()
            )));
        }
        self.data.z0 = z0.to_vec();
        let (l, u) = self.data.bounds();
        self.solver.update_bounds(&l, &u)?;
        if let Some(prev) = &self.previous {
            let (x, y) = shift_one_stage(&self.data, prev);
            self.solver.warm_start(&x, &y)?;
        }
        let solution = self.solver.solve()?;
        self.previous =
            if solution.status == QpStatus::Solved { Some(solution.clone()) } else { None };
        Ok(solution)
    }

    /// Push refreshed input-map values into the QP after an online update of
    /// `B`. The sparsity pattern and scaling are reused; only numeric values
    /// change and the KKT system is refactorized once.
    pub fn refresh_input_map(&mut self, b: &Array2<f64>) -> Result<()> {
        if b.dim() != self.data.b.dim() {
            return Err(Error::argument(format!(
                "input map is {:?}, expected {:?}",
                b.dim(),
                self.data.b.dim()
            )));
        }
        self.data.b = b.clone();
        let fresh = condense(&self.data)?;
        self.solver.update_constraint_values(fresh.constraint_matrix().values())
    }

    /// Stage input `ũ_k` from a solution.
    pub fn stage_input(&self, solution: &QpSolution, k: usize) -> Vec<f64> {
        let off = self.data.u_offset(k);
        solution.x[off..off + self.data.input_dim()].to_vec()
    }

    /// All stage inputs, first to last.
    pub fn input_sequence(&self, solution: &QpSolution) -> Vec<Vec<f64>> {
        (0..self.data.horizon).map(|k| self.stage_input(solution, k)).collect()
    }
}

/// Primal/dual warm start for the next cycle: every stage block moves one
/// slot earlier and the last stage is repeated.
fn shift_one_stage(data: &MpcQpData, prev: &QpSolution) -> (Vec<f64>, Vec<f64>) {
    let dz = data.state_dim();
    let p = data.input_dim();
    let n_stages = data.horizon;
    let mut x = vec![0.0; prev.x.len()];
    for k in 1..=n_stages {
        let src = data.z_offset(k.min(n_stages - 1) + 1);
        let dst = data.z_offset(k);
        x[dst..dst + dz].copy_from_slice(&prev.x[src..src + dz]);
    }
    for k in 0..n_stages {
        let src = data.u_offset((k + 1).min(n_stages - 1));
        let dst = data.u_offset(k);
        x[dst..dst + p].copy_from_slice(&prev.x[src..src + p]);
    }
    let mut y = vec![0.0; prev.dual.len()];
    // Dynamics rows: one d_z block per stage.
    for k in 0..n_stages {
        let src = (k + 1).min(n_stages - 1) * dz;
        let dst = k * dz;
        y[dst..dst + dz].copy_from_slice(&prev.dual[src..src + dz]);
    }
    // Box rows: one p block per stage.
    let box_base = n_stages * dz;
    for k in 0..n_stages {
        let src = box_base + (k + 1).min(n_stages - 1) * p;
        let dst = box_base + k * p;
        y[dst..dst + p].copy_from_slice(&prev.dual[src..src + p]);
    }
    // Pin and load rows: one row per stage.
    let pin_base = box_base + n_stages * p;
    let load_base = pin_base + n_stages;
    for k in 0..n_stages {
        let src = (k + 1).min(n_stages - 1);
        y[pin_base + k] = prev.dual[pin_base + src];
        y[load_base + k] = prev.dual[load_base + src];
    }
    (x, y)
}

/// What the closed loop needs from a plant: measure the trackers, apply a
/// toolpath sampled on the station grid and measure the outcome.
pub trait ControlledPlant {
    fn measure(&mut self) -> Vec<f64>;
    fn apply(&mut self, toolpath: &[f64]) -> Result<Vec<f64>>;
}

impl ControlledPlant for crate::plant::Plant {
    fn measure(&mut self) -> Vec<f64> {
        crate::plant::Plant::measure(self)
    }

    fn apply(&mut self, toolpath: &[f64]) -> Result<Vec<f64>> {
        self.apply_cycle(toolpath)
    }
}

/// Closed-loop options beyond the controller spec itself. The default
/// leaves adaptation off.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlOptions {
    /// Update `B` online when the triggers fire.
    pub adapt: bool,
    pub adapt_config: AdaptConfig,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0_f64, f64::max)
}

/// Run the receding-horizon loop against a plant.
///
/// Per cycle: measure, check termination, (optionally) adapt `B` from the
/// previous cycle's residual, project and lift the measurement, solve the
/// QP, apply the first reconstructed toolpath, and record everything. The
/// model is mutated only when adaptation fires; `A` is never touched.
pub fn run_closed_loop(
    plant: &mut dyn ControlledPlant,
    model: &mut KoopmanModel,
    bases: &ReductionBases,
    spec: &MpcSpec,
    target: &[f64],
    options: &ControlOptions,
) -> Result<ControlTrace> {
    spec.validate(&model.dims)?;
    options.adapt_config.validate()?;
    let bases_fp = bases.fingerprint()?;
    if bases_fp != model.bases_fingerprint {
        return Err(Error::argument(format!(
            "model was trained against bases {}, these have fingerprint {}",
            &model.bases_fingerprint[..12.min(model.bases_fingerprint.len())],
            &bases_fp[..12]
        )));
    }
    if target.len() != bases.pod.state_dim() {
        return Err(Error::argument(format!(
            "target has {} trackers, bases expect {}",
            target.len(),
            bases.pod.state_dim()
        )));
    }

    let z_r = lift_target(model, bases, target)?;
    let mut measured = plant.measure();
    if measured.len() != bases.pod.state_dim() {
        return Err(Error::argument(format!(
            "plant measures {} trackers, bases expect {}",
            measured.len(),
            bases.pod.state_dim()
        )));
    }

    let mut rls = RlsState::new(
        model.dims.input_dim,
        options.adapt_config.forgetting,
        options.adapt_config.initial_covariance,
    )?;
    let mut controller: Option<MpcController> = None;
    let mut records: Vec<CycleRecord> = Vec::new();
    // Previous-cycle context for the adaptation triggers and residual.
    let mut prev_measured: Option<Vec<f64>> = None;
    let mut prev_predicted: Option<Vec<f64>> = None;
    let mut prev_lifted: Option<Array1<f64>> = None;
    let mut prev_input: Option<Array1<f64>> = None;

    let termination = loop {
        let deviation = max_abs_diff(target, &measured);
        if deviation < spec.termination_tol_mm {
            break Termination::ToleranceReached;
        }
        if records.len() >= spec.max_cycles {
            break Termination::CycleLimit;
        }

        // Adaptation: after the measurement, before the next solve.
        let mut b_updated = false;
        let mut b_update_reason = None;
        let mut b_increment = None;
        if options.adapt {
            if let (Some(pm), Some(pp), Some(z_prev), Some(u_prev)) =
                (&prev_measured, &prev_predicted, &prev_lifted, &prev_input)
            {
                if let Some(reason) =
                    should_update(&measured, pp, pm, &options.adapt_config.triggers)?
                {
                    let x_now = bases.pod.project(&ArrayView1::from(&measured[..]))?;
                    let z_now = model.lift(&x_now);
                    let e = residual(model, z_prev, &z_now)?;
                    let b_before = model.b.clone();
                    rls.update_model(model, &e, u_prev)?;
                    let report = b_increment_report(&b_before, &model.b, B_INCREMENT_TOP_K)?;
                    if let Some(ctrl) = controller.as_mut() {
                        ctrl.refresh_input_map(&model.b)?;
                    }
                    b_updated = true;
                    b_update_reason = Some(reason.to_string());
                    b_increment = Some(report);
                }
            }
        }

        // State feedback from the measurement.
        let x_reduced = bases.pod.project(&ArrayView1::from(&measured[..]))?;
        let z0 = model.lift(&x_reduced);
        if controller.is_none() {
            controller = Some(MpcController::new(model, spec, &z0, &z_r)?);
        }
        let ctrl = controller.as_mut().expect("controller was just initialized");
        let solution = ctrl.solve_cycle(&z0)?;

        if solution.status != QpStatus::Solved {
            records.push(CycleRecord {
                cycle: records.len(),
                measured: measured.clone(),
                reduced: x_reduced.to_vec(),
                lifted: z0.to_vec(),
                max_deviation_mm: deviation,
                u_sequence: Vec::new(),
                applied_toolpath: Vec::new(),
                predicted_next: Vec::new(),
                qp: QpDiagnostics::from(&solution),
                b_updated,
                b_update_reason,
                b_increment,
            });
            break Termination::QpFailure { status: solution.status };
        }

        let u0 = Array1::from(ctrl.stage_input(&solution, 0));
        let applied = bases.chebyshev.reconstruct(&u0.view())?;

        // One-step prediction (with the B used in this solve) for the next
        // cycle's deviation trigger.
        let z_pred = model.step_lifted(&z0, &u0);
        let x_pred = model.decode(&z_pred);
        let predicted_next = bases.pod.reconstruct(&x_pred.view())?;

        let applied_vec = applied.to_vec();
        let new_measured = plant.apply(&applied_vec)?;
        if new_measured.len() != measured.len() {
            return Err(Error::numerical(format!(
                "plant returned {} trackers, expected {}",
                new_measured.len(),
                measured.len()
            )));
        }

        records.push(CycleRecord {
            cycle: records.len(),
            measured: measured.clone(),
            reduced: x_reduced.to_vec(),
            lifted: z0.to_vec(),
            max_deviation_mm: deviation,
            u_sequence: ctrl.input_sequence(&solution),
            applied_toolpath: applied_vec,
            predicted_next: predicted_next.to_vec(),
            qp: QpDiagnostics::from(&solution),
            b_updated,
            b_update_reason,
            b_increment,
        });

        prev_measured = Some(measured);
        prev_predicted = Some(predicted_next.to_vec());
        prev_lifted = Some(z0);
        prev_input = Some(u0);
        measured = new_measured;
    };

    let final_max_deviation_mm = max_abs_diff(target, &measured);
    Ok(ControlTrace {
        target: target.to_vec(),
        adapt: options.adapt,
        termination_tol_mm: spec.termination_tol_mm,
        max_cycles: spec.max_cycles,
        records,
        final_measured: measured,
        final_max_deviation_mm,
        termination,
    })
}
