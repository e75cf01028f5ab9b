//! The pipeline commands. Each command reads its inputs (manifest plus the
//! artifacts of earlier commands), runs the corresponding core operations,
//! and writes its artifacts plus a metrics JSON. Metrics deliberately
//! contain no wall-clock values: two executions from the same manifest
//! must produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use formtwin_core::dataset::{load_episodes, save_episodes};
use formtwin_core::koopman::train::{train, training_split};
use formtwin_core::koopman::KoopmanModel;
use formtwin_core::mpc::{run_closed_loop, ControlOptions, ControlTrace, Termination};
use formtwin_core::plant::{Plant, PlantParams};
use formtwin_core::reduction::{fit_pod, reduce_episode, ChebyshevBasis, ReductionBases};
use formtwin_core::toolpath::DoePlan;
use formtwin_core::{Error, Result};

use crate::manifest::RunManifest;
use crate::report;

/// Shared command context: the parsed manifest, the resolved artifact
/// directory, and the manifest hash stamped into every metrics file.
pub struct Ctx {
    pub manifest: RunManifest,
    pub out_dir: PathBuf,
    pub verbose: bool,
    pub manifest_hash: String,
}

impl Ctx {
    pub fn new(manifest: RunManifest, out_dir: Option<&Path>, verbose: bool) -> Result<Self> {
        let manifest_hash = manifest.content_hash()?;
        let out_dir = manifest.out_dir(out_dir);
        fs::create_dir_all(&out_dir)?;
        Ok(Ctx { manifest, out_dir, verbose, manifest_hash })
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("formtwin: {}", msg.as_ref());
        }
    }
}

/// Error for a missing upstream artifact, naming the command that makes it.
fn require_artifact(path: &Path, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "missing artifact {}: run `formtwin {produced_by}` first",
            path.display()
        )))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::argument(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn termination_label(t: &Termination) -> String {
    match t {
        Termination::ToleranceReached => "tolerance_reached".to_string(),
        Termination::CycleLimit => "cycle_limit".to_string(),
        Termination::QpFailure { status } => format!("qp_failure:{status}"),
    }
}

// ---------------------------------------------------------------- doe ----

#[derive(Debug, Serialize, Deserialize)]
pub struct DoeMetrics {
    pub manifest_hash: String,
    pub seed: u64,
    pub base_paths: usize,
    pub sequences: usize,
    pub cycles_per_sequence: usize,
}

pub fn cmd_doe(ctx: &Ctx, seed: Option<u64>) -> Result<()> {
    let m = &ctx.manifest;
    let seed = seed.unwrap_or(m.seeds.doe);
    let plan = DoePlan::build(seed, m.plant.station_grid.clone(), m.doe.episodes, m.doe.cycles)?;
    let plan_path = ctx.artifact(&m.paths.plan);
    plan.save(&plan_path)?;
    ctx.log(format!(
        "wrote {} ({} base paths, {} sequences)",
        plan_path.display(),
        plan.base_paths.len(),
        plan.sequences.len()
    ));
    write_json(
        &ctx.artifact("doe_metrics.json"),
        &DoeMetrics {
            manifest_hash: ctx.manifest_hash.clone(),
            seed,
            base_paths: plan.base_paths.len(),
            sequences: plan.sequences.len(),
            cycles_per_sequence: m.doe.cycles,
        },
    )
}

// ----------------------------------------------------------- simulate ----

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateMetrics {
    pub manifest_hash: String,
    pub plant_seed_base: u64,
    pub episodes: usize,
    pub snapshots_per_episode: usize,
    pub trackers: usize,
    pub stations: usize,
}

pub fn cmd_simulate(ctx: &Ctx, seed: Option<u64>) -> Result<()> {
    let m = &ctx.manifest;
    let plan_path = ctx.artifact(&m.paths.plan);
    require_artifact(&plan_path, "doe")?;
    let plan = DoePlan::load(&plan_path)?;
    if plan.station_grid != m.plant.station_grid {
        return Err(Error::argument(format!(
            "plan stations do not match the plant ({} vs {} points); re-run `formtwin doe` \
             after changing the grid",
            plan.station_grid.len(),
            m.plant.station_grid.len()
        )));
    }
    let seed_base = seed.unwrap_or(m.seeds.plant);
    let cycles = plan.sequences.first().map(|s| s.len()).unwrap_or(0);

    let mut episodes = Vec::with_capacity(plan.sequences.len());
    for i in 0..plan.sequences.len() {
        let toolpaths: Result<Vec<Vec<f64>>> =
            (0..plan.sequences[i].len()).map(|s| plan.toolpath_values(i, s)).collect();
        let mut plant = Plant::new(m.plant.clone(), seed_base.wrapping_add(i as u64))?;
        episodes.push(plant.run_episode(&format!("ep{i:03}"), &toolpaths?)?);
    }

    let provenance = format!(
        "formtwin simulate: doe seed {}, plant seed base {seed_base}, manifest {}",
        plan.seed,
        &ctx.manifest_hash[..12]
    );
    let meta = Plant::new(m.plant.clone(), 0)?.dataset_meta(provenance);
    let episodes_path = ctx.artifact(&m.paths.episodes);
    save_episodes(&episodes_path, &episodes, &meta)?;
    ctx.log(format!("wrote {} ({} episodes)", episodes_path.display(), episodes.len()));
    write_json(
        &ctx.artifact("simulate_metrics.json"),
        &SimulateMetrics {
            manifest_hash: ctx.manifest_hash.clone(),
            plant_seed_base: seed_base,
            episodes: episodes.len(),
            snapshots_per_episode: cycles + 1,
            trackers: m.plant.tracker_grid.len(),
            stations: m.plant.station_grid.len(),
        },
    )
}

// ------------------------------------------------------ fit-reduction ----

#[derive(Debug, Serialize, Deserialize)]
pub struct FitReductionMetrics {
    pub manifest_hash: String,
    pub pod_modes: usize,
    pub energy_fraction: f64,
    pub singular_values: Vec<f64>,
    pub chebyshev_terms: usize,
    pub toolpath_max_error_mm: f64,
    pub bases_fingerprint: String,
}

pub fn cmd_fit_reduction(ctx: &Ctx) -> Result<()> {
    let m = &ctx.manifest;
    let episodes_path = ctx.artifact(&m.paths.episodes);
    require_artifact(&episodes_path, "simulate")?;
    let (episodes, meta) = load_episodes(&episodes_path)?;

    let total: usize = episodes.iter().map(|e| e.snapshots.len()).sum();
    let mut snaps = Array2::zeros((meta.tracker_count, total));
    let mut col = 0;
    for ep in &episodes {
        for s in &ep.snapshots {
            for (r, &v) in s.values.iter().enumerate() {
                snaps[[r, col]] = v;
            }
            col += 1;
        }
    }
    let pod = fit_pod(&snaps, m.reduction.pod_modes, m.reduction.subtract_mean)?;
    let energy = pod.energy_fraction(m.reduction.pod_modes)?;

    let chebyshev = ChebyshevBasis::new(meta.station_grid.clone(), m.reduction.chebyshev_terms)?;
    let mut worst = 0.0_f64;
    for ep in &episodes {
        for tp in &ep.toolpaths {
            let coeffs = chebyshev.fit(&ArrayView1::from(&tp.values[..]))?;
            let recon = chebyshev.reconstruct(&coeffs.view())?;
            for (a, b) in tp.values.iter().zip(recon.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    let bases = ReductionBases { pod, chebyshev };
    let fingerprint = bases.fingerprint()?;
    let bases_path = ctx.artifact(&m.paths.bases);
    bases.save(&bases_path)?;
    ctx.log(format!(
        "wrote {} (energy {energy:.6}, worst toolpath error {worst:.4} mm)",
        bases_path.display()
    ));
    write_json(
        &ctx.artifact("fit_reduction_metrics.json"),
        &FitReductionMetrics {
            manifest_hash: ctx.manifest_hash.clone(),
            pod_modes: m.reduction.pod_modes,
            energy_fraction: energy,
            singular_values: bases.pod.singular_values.clone(),
            chebyshev_terms: m.reduction.chebyshev_terms,
            toolpath_max_error_mm: worst,
            bases_fingerprint: fingerprint,
        },
    )
}

// -------------------------------------------------------------- train ----

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub manifest_hash: String,
    pub seed: u64,
    pub validation_episodes: usize,
    pub train_episodes: usize,
    pub windows: usize,
    pub param_count: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_validation_one_step: f64,
    pub stopped_early: bool,
    pub sigma_max: f64,
    pub spectral_radius_estimate: f64,
    pub bases_fingerprint: String,
}

fn load_bases(ctx: &Ctx) -> Result<ReductionBases> {
    let path = ctx.artifact(&ctx.manifest.paths.bases);
    require_artifact(&path, "fit-reduction")?;
    let bases = ReductionBases::load(&path)?;
    let m = &ctx.manifest;
    if bases.pod.mode_count() != m.reduction.pod_modes
        || bases.chebyshev.degree_count != m.reduction.chebyshev_terms
    {
        return Err(Error::argument(format!(
            "bases on disk keep {} modes / {} terms but the manifest says {} / {}; re-run \
             `formtwin fit-reduction`",
            bases.pod.mode_count(),
            bases.chebyshev.degree_count,
            m.reduction.pod_modes,
            m.reduction.chebyshev_terms
        )));
    }
    Ok(bases)
}

fn load_model(ctx: &Ctx, bases: &ReductionBases) -> Result<KoopmanModel> {
    let path = ctx.artifact(&ctx.manifest.paths.model);
    require_artifact(&path, "train")?;
    let model = KoopmanModel::load(&path)?;
    let fp = bases.fingerprint()?;
    if model.bases_fingerprint != fp {
        return Err(Error::argument(format!(
            "model on disk was trained against bases {} but the current bases are {}; re-run \
             `formtwin train`",
            &model.bases_fingerprint[..12.min(model.bases_fingerprint.len())],
            &fp[..12]
        )));
    }
    Ok(model)
}

pub fn cmd_train(ctx: &Ctx, seed: Option<u64>) -> Result<()> {
    let m = &ctx.manifest;
    let episodes_path = ctx.artifact(&m.paths.episodes);
    require_artifact(&episodes_path, "simulate")?;
    let (episodes, _meta) = load_episodes(&episodes_path)?;
    let bases = load_bases(ctx)?;

    let reduced: Result<Vec<_>> = episodes.iter().map(|e| reduce_episode(&bases, e)).collect();
    let reduced = reduced?;
    let dims = m.model.dims(bases.pod.mode_count(), bases.chebyshev.degree_count);
    let mut config = m.train.clone();
    if let Some(s) = seed {
        config.seed = s;
    }
    let fingerprint = bases.fingerprint()?;
    ctx.log(format!(
        "training on {} episodes (dims {}+{} lifted, {} inputs)",
        reduced.len(),
        dims.observable_dim,
        dims.reduced_dim,
        dims.input_dim
    ));
    let (model, history) = train(&reduced, &dims, &config, &fingerprint)?;
    let (sigma_max, rho_est) = model.spectral_diagnostics()?;

    let model_path = ctx.artifact(&m.paths.model);
    model.save(&model_path)?;
    history.save(&ctx.artifact(&m.paths.history))?;
    ctx.log(format!(
        "wrote {} (best epoch {}, validation one-step {:.3e})",
        model_path.display(),
        history.best_epoch,
        history.best_validation_one_step
    ));

    let steps = reduced[0].u.ncols();
    let windows_per_episode =
        if steps >= config.rollout_steps { steps - config.rollout_steps + 1 } else { 0 };
    write_json(
        &ctx.artifact("train_metrics.json"),
        &TrainMetrics {
            manifest_hash: ctx.manifest_hash.clone(),
            seed: config.seed,
            validation_episodes: config.validation_episodes,
            train_episodes: reduced.len() - config.validation_episodes,
            windows: windows_per_episode * (reduced.len() - config.validation_episodes),
            param_count: model.param_count(),
            epochs_run: history.epochs.len(),
            best_epoch: history.best_epoch,
            best_validation_one_step: history.best_validation_one_step,
            stopped_early: history.stopped_early,
            sigma_max,
            spectral_radius_estimate: rho_est,
            bases_fingerprint: fingerprint,
        },
    )
}

// ----------------------------------------------------------- validate ----

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    pub seed: u64,
    pub pairs: usize,
    pub overall_mae_mm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub manifest_hash: String,
    pub held_out_episodes: usize,
    pub pairs: usize,
    pub replicates: Vec<ReplicateMetrics>,
    pub tracker_grid: Vec<f64>,
    /// Mean absolute one-step prediction error per tracker, averaged over
    /// replicates, mm.
    pub per_tracker_mae_mm: Vec<f64>,
    pub overall_mae_mm: f64,
    pub mean_final_tip_deflection_mm: f64,
    /// `overall_mae_mm` relative to the mean final tip deflection.
    pub mae_to_tip_ratio: f64,
}

/// Number of evaluation replicates, matching the reference protocol.
pub const VALIDATION_REPLICATES: usize = 15;
/// Fraction of the held-out pairs drawn (without replacement) per replicate.
const REPLICATE_FRACTION: f64 = 0.8;

pub fn cmd_validate(ctx: &Ctx, seed: Option<u64>) -> Result<()> {
    let m = &ctx.manifest;
    let episodes_path = ctx.artifact(&m.paths.episodes);
    require_artifact(&episodes_path, "simulate")?;
    let (episodes, meta) = load_episodes(&episodes_path)?;
    let bases = load_bases(ctx)?;
    let model = load_model(ctx, &bases)?;

    // The split must mirror the one training used, including a train-time
    // seed override, so read it back from the training metrics.
    let train_metrics_path = ctx.artifact("train_metrics.json");
    require_artifact(&train_metrics_path, "train")?;
    let train_metrics: TrainMetrics = read_json(&train_metrics_path)?;
    let mut split_config = m.train.clone();
    split_config.seed = train_metrics.seed;
    split_config.validation_episodes = train_metrics.validation_episodes;
    let (_, held_out) = training_split(episodes.len(), &split_config)?;

    // One-step predictions on every held-out transition, compared against
    // the measured snapshot in tracker space.
    let n_x = meta.tracker_count;
    let mut errors: Vec<Vec<f64>> = Vec::new();
    for &ei in &held_out {
        let ep = &episodes[ei];
        let red = reduce_episode(&bases, ep)?;
        for k in 0..red.u.ncols() {
            let x = red.x.column(k).to_owned();
            let u = red.u.column(k).to_owned();
            let pred_reduced = model.predict_one_step(&x, &u);
            let pred = bases.pod.reconstruct(&pred_reduced.view())?;
            let actual = &ep.snapshots[k + 1].values;
            errors.push(
                (0..n_x).map(|t| (pred[t] - actual[t]).abs()).collect(),
            );
        }
    }
    if errors.is_empty() {
        return Err(Error::argument("no held-out transitions to validate on"));
    }

    let seed_base = seed.unwrap_or(m.seeds.validate);
    let sample = ((errors.len() as f64 * REPLICATE_FRACTION).ceil() as usize)
        .clamp(1, errors.len());
    let mut replicates = Vec::with_capacity(VALIDATION_REPLICATES);
    let mut tracker_acc = vec![0.0_f64; n_x];
    for rep in 0..VALIDATION_REPLICATES {
        let rep_seed = seed_base.wrapping_add(rep as u64);
        let mut idx: Vec<usize> = (0..errors.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
        idx.shuffle(&mut rng);
        idx.truncate(sample);

        let mut per_tracker = vec![0.0_f64; n_x];
        for &i in &idx {
            for (acc, e) in per_tracker.iter_mut().zip(&errors[i]) {
                *acc += e;
            }
        }
        for v in per_tracker.iter_mut() {
            *v /= sample as f64;
        }
        let overall = per_tracker.iter().sum::<f64>() / n_x as f64;
        for (acc, v) in tracker_acc.iter_mut().zip(&per_tracker) {
            *acc += v;
        }
        replicates.push(ReplicateMetrics {
            replicate: rep,
            seed: rep_seed,
            pairs: sample,
            overall_mae_mm: overall,
        });
    }
    let per_tracker_mae: Vec<f64> =
        tracker_acc.iter().map(|v| v / VALIDATION_REPLICATES as f64).collect();
    let overall = per_tracker_mae.iter().sum::<f64>() / n_x as f64;

    let mean_final_tip = episodes
        .iter()
        .filter_map(|e| e.snapshots.last())
        .map(|s| s.values.last().copied().unwrap_or(0.0).abs())
        .sum::<f64>()
        / episodes.len() as f64;

    let metrics = ValidationMetrics {
        manifest_hash: ctx.manifest_hash.clone(),
        held_out_episodes: held_out.len(),
        pairs: errors.len(),
        replicates,
        tracker_grid: meta.tracker_grid.clone(),
        per_tracker_mae_mm: per_tracker_mae,
        overall_mae_mm: overall,
        mean_final_tip_deflection_mm: mean_final_tip,
        mae_to_tip_ratio: if mean_final_tip > 0.0 { overall / mean_final_tip } else { f64::NAN },
    };
    ctx.log(format!(
        "held-out MAE {:.4} mm over {} pairs ({:.1}% of mean final tip {:.3} mm)",
        metrics.overall_mae_mm,
        metrics.pairs,
        100.0 * metrics.mae_to_tip_ratio,
        metrics.mean_final_tip_deflection_mm
    ));
    write_json(&ctx.artifact("validate_metrics.json"), &metrics)
}

// ------------------------------------------------------------ control ----

#[derive(Debug, Default, Clone)]
pub struct ControlArgs {
    pub adapt: bool,
    /// JSON file holding the target snapshot; defaults to the scaled
    /// saturation profile.
    pub target_file: Option<PathBuf>,
    pub target_scale: Option<f64>,
    /// Override on the plant's yield drift factor.
    pub drift: Option<f64>,
    pub tol_mm: Option<f64>,
    pub max_cycles: Option<usize>,
    pub trace_out: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ControlMetrics {
    pub manifest_hash: String,
    pub adapt: bool,
    pub seed: u64,
    pub drift_factor: f64,
    pub target_tip_mm: f64,
    pub final_max_deviation_mm: f64,
    pub cycles_used: usize,
    pub termination: String,
    pub b_updates: usize,
    pub trace_file: String,
}

/// Deformation profile the nominal plant reaches within one episode budget
/// (`cycles` passes) of the deepest downward single-lobe toolpath the
/// generator can produce, noise-free. This is the plant's saturation scale:
/// hardening makes later passes ever less effective, so targets are defined
/// as fractions of this profile.
pub fn saturation_profile(params: &PlantParams, cycles: usize) -> Result<Vec<f64>> {
    use formtwin_core::toolpath::{evaluate, CurvatureClass, ToolpathParams, AMPLITUDE_RANGE};
    let mut p = params.clone();
    p.noise_sigma = 0.0;
    p.episode_bias_mm = 0.0;
    p.drift_factor = 1.0;
    // Full-amplitude half-sine lobe, downward, no trend: the deepest path in
    // the generator family.
    let lobe = ToolpathParams {
        amplitude: AMPLITUDE_RANGE.1,
        frequency: 0.5,
        phase: std::f64::consts::PI,
        trend: 0.0,
        class: CurvatureClass::Negative,
    };
    let toolpath = evaluate(&lobe, &p.station_grid);
    let mut plant = Plant::new(p, 0)?;
    for _ in 0..cycles {
        plant.apply_cycle(&toolpath)?;
    }
    Ok(plant.deformation_at_trackers())
}

pub fn cmd_control(ctx: &Ctx, args: &ControlArgs) -> Result<()> {
    let m = &ctx.manifest;
    let bases = load_bases(ctx)?;
    let mut model = load_model(ctx, &bases)?;

    let mut params = m.plant.clone();
    if let Some(d) = args.drift {
        params.drift_factor = d;
    }
    params.validate()?;
    let seed = args.seed.unwrap_or(m.seeds.control);
    let mut plant = Plant::new(params.clone(), seed)?;

    let target: Vec<f64> = match &args.target_file {
        Some(path) => {
            let t: Vec<f64> = read_json(path)?;
            if t.len() != m.plant.tracker_grid.len() {
                return Err(Error::argument(format!(
                    "target file has {} values, the plant tracks {} positions",
                    t.len(),
                    m.plant.tracker_grid.len()
                )));
            }
            t
        }
        None => {
            let scale = args.target_scale.unwrap_or(m.control.target_scale);
            let sat = saturation_profile(&m.plant, m.doe.cycles)?;
            sat.iter().map(|v| scale * v).collect()
        }
    };

    let mut spec = m.mpc.to_spec(&model.dims)?;
    if let Some(t) = args.tol_mm {
        spec.termination_tol_mm = t;
    }
    if let Some(c) = args.max_cycles {
        spec.max_cycles = c;
    }
    spec.validate(&model.dims)?;
    let options = ControlOptions { adapt: args.adapt, adapt_config: m.adapt.clone() };

    ctx.log(format!(
        "closed loop: adapt {}, drift {}, target tip {:.3} mm, tolerance {} mm",
        if args.adapt { "on" } else { "off" },
        params.drift_factor,
        target.last().copied().unwrap_or(0.0),
        spec.termination_tol_mm
    ));
    let trace = run_closed_loop(&mut plant, &mut model, &bases, &spec, &target, &options)?;

    let trace_path = args.trace_out.clone().unwrap_or_else(|| {
        ctx.artifact(if args.adapt { &m.paths.trace_adapt_on } else { &m.paths.trace_adapt_off })
    });
    trace.save_jsonl(&trace_path)?;
    ctx.log(format!(
        "wrote {} ({}, final deviation {:.3} mm in {} cycles)",
        trace_path.display(),
        termination_label(&trace.termination),
        trace.final_max_deviation_mm,
        trace.cycles_used()
    ));

    let metrics_name =
        if args.adapt { "control_adapt_on_metrics.json" } else { "control_adapt_off_metrics.json" };
    write_json(
        &ctx.artifact(metrics_name),
        &ControlMetrics {
            manifest_hash: ctx.manifest_hash.clone(),
            adapt: args.adapt,
            seed,
            drift_factor: params.drift_factor,
            target_tip_mm: target.last().copied().unwrap_or(0.0),
            final_max_deviation_mm: trace.final_max_deviation_mm,
            cycles_used: trace.cycles_used(),
            termination: termination_label(&trace.termination),
            b_updates: trace.records.iter().filter(|r| r.b_updated).count(),
            trace_file: trace_path.display().to_string(),
        },
    )
}

// ------------------------------------------------------------- report ----

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub manifest_hash: String,
    pub traces: Vec<String>,
    pub files: Vec<String>,
}

pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let m = &ctx.manifest;
    let mut traces: Vec<(String, ControlTrace)> = Vec::new();
    for (label, name) in
        [("adapt_off", &m.paths.trace_adapt_off), ("adapt_on", &m.paths.trace_adapt_on)]
    {
        let path = ctx.artifact(name);
        if path.exists() {
            traces.push((label.to_string(), ControlTrace::load_jsonl(&path)?));
        }
    }
    if traces.is_empty() {
        return Err(Error::argument(format!(
            "no control traces found in {}: run `formtwin control` first",
            ctx.out_dir.display()
        )));
    }
    let validation_path = ctx.artifact("validate_metrics.json");
    let validation: Option<ValidationMetrics> =
        if validation_path.exists() { Some(read_json(&validation_path)?) } else { None };

    let report_dir = ctx.artifact(&m.paths.report_dir);
    fs::create_dir_all(&report_dir)?;
    let inputs = report::ReportInputs {
        traces: &traces,
        validation: validation.as_ref(),
        station_grid: &m.plant.station_grid,
        tracker_grid: &m.plant.tracker_grid,
    };
    let mut files = report::render(&report_dir, &inputs)?;
    files.sort();
    ctx.log(format!("wrote {} report files to {}", files.len(), report_dir.display()));
    write_json(
        &ctx.artifact("report_metrics.json"),
        &ReportMetrics {
            manifest_hash: ctx.manifest_hash.clone(),
            traces: traces.iter().map(|(l, _)| l.clone()).collect(),
            files,
        },
    )
}

// ------------------------------------------------------------- helpers ---

/// All commands in pipeline order, used by tests and documentation.
pub const PIPELINE_ORDER: [&str; 7] =
    ["doe", "simulate", "fit-reduction", "train", "validate", "control", "report"];
