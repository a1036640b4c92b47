//! The CLI subcommands as library functions. Every command echoes the
//! effective configuration into its output directory and writes nothing that
//! depends on wall-clock time, so reruns reproduce their files byte for byte.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::averaging::{run_kma, KmaOutcome};
use crate::control::{closed_loop, lqr_for_model, ClosedLoopMetrics, LqrController, LqrPolicy, MpcPolicy, Policy};
use crate::dynamics::{generate_dataset, uniform, ControlInput, Dataset, Partition, StateVector, SystemSpec, Trajectory};
use crate::edmd::{fit_member, fit_noise, Lift};
use crate::error::{KmaError, Result};
use crate::exec::ExecMode;
use crate::training::{train_base_model, TrainReport};

use super::config::ExperimentConfig;
use super::metrics::{evaluate_prediction, evaluation_trajectories, PredictionEval};
use super::persist::{
    echo_config, ensure_dir, fmt_f64, read_dataset, read_inputs, save_json, write_closed_loop, write_dataset,
    write_train_report, Metrics, ModelArtifact, WeightsReport,
};

pub const DEFAULT_OUT_DIR: &str = "out";
const CONTROL_SEED_SALT: u64 = 0x6374_726c_5f69_6373;

/// `--out`, else `out_dir` from the config, else `./out`.
pub fn output_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf).or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn dataset_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    cfg.dataset.clone().unwrap_or_else(|| out.join("dataset.csv"))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let ds = read_dataset(&dataset_path(cfg, out)).map_err(|e| e.in_stage("loading dataset"))?;
    let system = cfg.system_spec()?;
    if ds.system.name != system.name || ds.system.n != system.n || ds.system.p != system.p {
        return Err(KmaError::config("system.name", "dataset was generated for a different system"));
    }
    Ok(ds)
}

fn check_model_system(cfg: &ExperimentConfig, art: &ModelArtifact) -> Result<()> {
    let sys = cfg.system_spec()?;
    let model_sys = art.system();
    if model_sys.name != sys.name || model_sys.n != sys.n || model_sys.p != sys.p {
        return Err(KmaError::Dimension { context: "model system vs config system", expected: sys.n, got: model_sys.n });
    }
    Ok(())
}

fn prediction_metrics(eval: &PredictionEval) -> Metrics {
    Metrics { rmse_per_step: eval.rmse_per_step.clone(), total_rmse: eval.total_rmse, ..Metrics::default() }
}

/// Generate the dataset and write `dataset.csv` + `dataset.json`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let system = cfg.system_spec()?;
    let ds = generate_dataset(&system, &cfg.data, cfg.seed, ExecMode::Parallel).map_err(|e| e.in_stage("data generation"))?;
    ensure_dir(out)?;
    write_dataset(&dataset_path(cfg, out), &ds)?;
    echo_config(out, cfg)?;
    Ok(ds)
}

pub struct RunArtifacts {
    pub outcome: KmaOutcome,
    pub metrics: Metrics,
    pub member_rmse: Vec<Option<f64>>,
}

/// The full pipeline: base model, ensemble, weights and the weighted model.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let ds = load_dataset(cfg, out)?;
    let outcome = run_kma(&ds, &cfg.kma_config()?)?;
    ensure_dir(out)?;
    let system = ds.system.clone();
    let lift = outcome.ensemble.lift.clone();
    if let Lift::MlpFeatures(fm) = &lift {
        save_json(&out.join("features.json"), fm)?;
    }
    for (i, (member, part)) in outcome.ensemble.members.iter().zip(&outcome.ensemble.partitions).enumerate() {
        let art = ModelArtifact::Linear { system: system.clone(), lift: lift.clone(), model: member.clone() };
        let path = if i == 0 { out.join("base_model.json") } else { out.join("members").join(format!("{part}.json")) };
        save_json(&path, &art)?;
    }
    save_json(
        &out.join("weights.json"),
        &WeightsReport {
            partitions: outcome.ensemble.partitions.clone(),
            elpd: outcome.elpds.clone(),
            w: outcome.weights.as_slice().to_vec(),
            n_heldout: outcome.n_heldout,
        },
    )?;
    save_json(
        &out.join("weighted_model.json"),
        &ModelArtifact::Weighted { system: system.clone(), lift: lift.clone(), model: outcome.weighted.clone() },
    )?;
    write_train_report(&out.join("train_report.csv"), &outcome.train_report)?;

    let trajs = evaluation_trajectories(&system, &ds.plan, cfg.evaluation.n_ics, cfg.evaluation.steps, cfg.seed, ExecMode::Parallel)?;
    let eval = evaluate_prediction(&outcome.weighted, &lift, &trajs, ExecMode::Parallel)
        .map_err(|e| e.in_stage("prediction of the weighted model"))?;
    let metrics = Metrics {
        validation_loss: Some(outcome.train_report.final_val_loss),
        elpds: outcome.elpds.clone(),
        weights: outcome.weights.as_slice().to_vec(),
        ..prediction_metrics(&eval)
    };
    save_json(&out.join("metrics.json"), &metrics)?;

    // members whose rollout diverges score as missing rather than failing the run
    let member_rmse: Vec<Option<f64>> = outcome
        .ensemble
        .members
        .iter()
        .map(|m| {
            evaluate_prediction(&crate::averaging::WeightedModel::from_model(m), &lift, &trajs, ExecMode::Parallel)
                .ok()
                .and_then(|e| e.total_rmse)
        })
        .collect();
    let mut w = csv::Writer::from_path(out.join("member_rmse.csv")).map_err(|e| KmaError::format(out.join("member_rmse.csv"), e))?;
    let row_err = |e: csv::Error| KmaError::format(out.join("member_rmse.csv"), e);
    w.write_record(["model", "total_rmse"]).map_err(row_err)?;
    for (part, r) in outcome.ensemble.partitions.iter().zip(&member_rmse) {
        w.write_record([part.to_string(), r.map(fmt_f64).unwrap_or_default()]).map_err(row_err)?;
    }
    w.write_record(["weighted".to_string(), metrics.total_rmse.map(fmt_f64).unwrap_or_default()]).map_err(row_err)?;
    w.flush().map_err(|e| KmaError::io(out.join("member_rmse.csv"), e))?;
    echo_config(out, cfg)?;
    log::info!("base-model training took {:.1} s", outcome.train_report.wall_time_s);
    Ok(RunArtifacts { outcome, metrics, member_rmse })
}

pub struct BaselineArtifacts {
    pub edmd: ModelArtifact,
    pub normal_nn: ModelArtifact,
    pub normal_nn_report: TrainReport,
    pub edmd_metrics: Metrics,
    pub normal_nn_metrics: Metrics,
}

/// EDMD with a monomial dictionary and the "normal NN" model, both fitted on
/// every partition including the held-out one.
pub fn baselines(cfg: &ExperimentConfig, out: &Path) -> Result<BaselineArtifacts> {
    let ds = load_dataset(cfg, out)?;
    let system = ds.system.clone();
    let dir = out.join("baselines");
    ensure_dir(&dir)?;
    let samples = ds.all_samples();

    let monomials = Lift::Monomials { n: system.n, max_degree: cfg.baselines.edmd_degree };
    let (edmd_model, rank_deficient) =
        fit_member(&monomials, &samples, cfg.baselines.edmd_ridge, ExecMode::Parallel).map_err(|e| e.in_stage("EDMD baseline"))?;
    if rank_deficient {
        log::warn!("EDMD baseline regression is rank-deficient");
    }
    let edmd = ModelArtifact::Linear { system: system.clone(), lift: monomials, model: edmd_model };

    let trajectories: Vec<Trajectory> = ds.trajectories.iter().map(|t| t.trajectory.clone()).collect();
    let (fm, mut nn_model, report) =
        train_base_model(&trajectories, &cfg.feature_config()?, &cfg.train).map_err(|e| e.in_stage("normal NN baseline"))?;
    let nn_lift = Lift::MlpFeatures(fm);
    nn_model.noise = Some(fit_noise(&nn_model, &nn_lift, &samples).map_err(|e| e.in_stage("normal NN baseline"))?);
    let normal_nn = ModelArtifact::Linear { system: system.clone(), lift: nn_lift, model: nn_model };

    let trajs = evaluation_trajectories(&system, &ds.plan, cfg.evaluation.n_ics, cfg.evaluation.steps, cfg.seed, ExecMode::Parallel)?;
    // a baseline that diverges in open loop still gets saved; its RMSE is reported as undefined
    let score = |art: &ModelArtifact| match evaluate_prediction(&art.weighted(), art.lift(), &trajs, ExecMode::Parallel) {
        Ok(eval) => prediction_metrics(&eval),
        Err(e) => {
            log::warn!("baseline prediction failed: {e}");
            Metrics::default()
        }
    };
    let edmd_metrics = score(&edmd);
    let normal_nn_metrics = Metrics { validation_loss: Some(report.final_val_loss), ..score(&normal_nn) };

    save_json(&dir.join("edmd.json"), &edmd)?;
    save_json(&dir.join("normal_nn.json"), &normal_nn)?;
    write_train_report(&dir.join("normal_nn_train_report.csv"), &report)?;
    save_json(&dir.join("edmd_metrics.json"), &edmd_metrics)?;
    save_json(&dir.join("normal_nn_metrics.json"), &normal_nn_metrics)?;
    echo_config(&dir, cfg)?;
    Ok(BaselineArtifacts { edmd, normal_nn, normal_nn_report: report, edmd_metrics, normal_nn_metrics })
}

pub struct PredictArtifacts {
    pub csv: PathBuf,
    pub metrics: Metrics,
}

/// Roll the model out against the true plant and write both side by side.
pub fn predict(cfg: &ExperimentConfig, model_path: &Path, out: &Path) -> Result<PredictArtifacts> {
    let art = ModelArtifact::load(model_path)?;
    check_model_system(cfg, &art)?;
    let system = art.system().clone();
    let trajs = match &cfg.predict.x0 {
        Some(x0) => vec![single_trajectory(cfg, &system, x0)?],
        None => evaluation_trajectories(&system, &cfg.data, cfg.evaluation.n_ics, cfg.evaluation.steps, cfg.seed, ExecMode::Parallel)?,
    };
    let eval = evaluate_prediction(&art.weighted(), art.lift(), &trajs, ExecMode::Parallel)?;
    ensure_dir(out)?;
    let name = stem(model_path);
    let csv_path = out.join(format!("prediction_{name}.csv"));
    write_prediction(&csv_path, &trajs, &eval, system.dt)?;
    let metrics = prediction_metrics(&eval);
    save_json(&out.join(format!("prediction_{name}_metrics.json")), &metrics)?;
    echo_config(out, cfg)?;
    Ok(PredictArtifacts { csv: csv_path, metrics })
}

fn single_trajectory(cfg: &ExperimentConfig, system: &SystemSpec, x0: &[f64]) -> Result<Trajectory> {
    let p = &cfg.predict;
    let inputs: Vec<ControlInput> = match (&p.input_file, &p.input_constant) {
        (Some(_), Some(_)) => {
            return Err(KmaError::config("predict.input_file", "give either input_file or input_constant"));
        }
        (Some(file), None) => {
            let mut u = read_inputs(file, system.p)?;
            if let Some(steps) = p.steps {
                if u.len() < steps {
                    return Err(KmaError::format(file, format!("{} input rows for {steps} steps", u.len())));
                }
                u.truncate(steps);
            }
            u
        }
        (None, constant) => {
            let u = constant.clone().unwrap_or_else(|| vec![0.0; system.p]);
            vec![DVector::from_vec(u); p.steps.unwrap_or(cfg.evaluation.steps)]
        }
    };
    let x0 = DVector::from_row_slice(x0);
    if inputs.is_empty() {
        return Ok(Trajectory { states: vec![x0], inputs });
    }
    crate::dynamics::simulate(system, &x0, &inputs)
}

fn write_prediction(path: &Path, trajs: &[Trajectory], eval: &PredictionEval, dt: f64) -> Result<()> {
    let n = trajs.first().map_or(0, |t| t.states[0].len());
    let mut header = vec!["traj".to_string(), "step".to_string(), "t".to_string()];
    header.extend((0..n).map(|i| format!("x_true{i}")));
    header.extend((0..n).map(|i| format!("x_pred{i}")));
    let err = |e: csv::Error| KmaError::format(path, e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(&header).map_err(err)?;
    for (j, (t, pred)) in trajs.iter().zip(&eval.predictions).enumerate() {
        for (k, x) in pred.iter().enumerate() {
            let mut row = vec![j.to_string(), (k + 1).to_string(), fmt_f64((k + 1) as f64 * dt)];
            row.extend(t.states[k + 1].iter().map(|v| fmt_f64(*v)));
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| KmaError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lqr,
    Mpc,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Lqr => "lqr",
            Task::Mpc => "mpc",
        })
    }
}

impl FromStr for Task {
    type Err = KmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lqr" => Ok(Task::Lqr),
            "mpc" => Ok(Task::Mpc),
            other => Err(KmaError::InvalidArgument(format!("unknown task `{other}` (expected lqr or mpc)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub x0: Vec<f64>,
    pub csv: String,
    #[serde(flatten)]
    pub metrics: ClosedLoopMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tracking_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub task: Task,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lqr: Option<LqrController>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unconverged_qp_steps: Option<usize>,
    pub runs: Vec<RunSummary>,
}

/// Random LQR initial conditions in `[-ic_range, ic_range]^n`.
pub fn control_initial_conditions(cfg: &ExperimentConfig, n: usize) -> Vec<StateVector> {
    if let Some(ics) = &cfg.control.lqr_x0 {
        return ics.iter().map(|x| DVector::from_row_slice(x)).collect();
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ CONTROL_SEED_SALT);
    let r = cfg.control.ic_range;
    (0..cfg.control.n_random_ics).map(|_| DVector::from_fn(n, |_, _| uniform(&mut rng, -r, r))).collect()
}

/// Closed-loop runs of an LQR or MPC controller designed on the model.
pub fn control(cfg: &ExperimentConfig, model_path: &Path, task: Task, out: &Path) -> Result<ControlReport> {
    let art = ModelArtifact::load(model_path)?;
    check_model_system(cfg, &art)?;
    let system = art.system().clone();
    let wm = art.weighted();
    let lift = art.lift();
    let name = stem(model_path);
    ensure_dir(out)?;

    let (ics, steps) = match task {
        Task::Lqr => (control_initial_conditions(cfg, system.n), cfg.steps_for(cfg.control.lqr_duration)),
        Task::Mpc => {
            let x0 = cfg.control.mpc_x0.clone().unwrap_or_else(|| vec![0.0; system.n]);
            (vec![DVector::from_vec(x0)], cfg.steps_for(cfg.control.mpc_duration))
        }
    };
    let mut lqr = None;
    let mut unconverged = None;
    let (results, tracked) = match task {
        Task::Lqr => {
            let ctrl = lqr_for_model(&wm, &cfg.lqr.spec(&system)?).map_err(|e| e.in_stage("LQR design"))?;
            LqrPolicy::new(lift, &ctrl)?;
            let results = ExecMode::Parallel.map_slice(&ics, |x0| {
                let mut policy = LqrPolicy::new(lift, &ctrl)?;
                closed_loop(&system, &mut policy, x0, steps)
            });
            lqr = Some(ctrl);
            (results, Vec::new())
        }
        Task::Mpc => {
            let spec = cfg.mpc.spec(&system)?;
            let mut policy = MpcPolicy::new(&wm, lift, &spec)?;
            let tracked = policy.tracked();
            let res = closed_loop(&system, &mut policy, &ics[0], steps);
            unconverged = Some(policy.unconverged_steps);
            (vec![res], tracked)
        }
    };
    let mut runs = Vec::with_capacity(results.len());
    for (i, (res, x0)) in results.into_iter().zip(&ics).enumerate() {
        let res = res.map_err(|e| e.in_stage("closed-loop simulation"))?;
        let file = format!("control_{task}_{name}_{i}.csv");
        write_closed_loop(&out.join(&file), &res, &tracked)?;
        let max_tracking_error = (!res.metrics.tracking_error.is_empty())
            .then(|| res.metrics.tracking_error.iter().copied().fold(0.0, f64::max));
        runs.push(RunSummary { x0: x0.iter().copied().collect(), csv: file, metrics: res.metrics, max_tracking_error });
    }
    let report = ControlReport { task, model: name.clone(), lqr, unconverged_qp_steps: unconverged, runs };
    save_json(&out.join(format!("control_{task}_{name}_metrics.json")), &report)?;
    echo_config(out, cfg)?;
    Ok(report)
}

/// Long-format summary `source,metric,value` of every metrics file under `out`.
pub fn report(out: &Path) -> Result<Vec<(String, String, f64)>> {
    let mut files = Vec::new();
    collect_json(out, out, 3, &mut files)?;
    files.sort();
    let mut rows = Vec::new();
    for rel in files {
        let path = out.join(&rel);
        let text = fs::read_to_string(&path).map_err(|e| KmaError::io(&path, e))?;
        let source = rel.to_string_lossy().replace('\\', "/");
        if let Ok(c) = serde_json::from_str::<ControlReport>(&text) {
            for (i, r) in c.runs.iter().enumerate() {
                rows.push((source.clone(), format!("run{i}.final_state_norm"), r.metrics.final_state_norm));
                rows.push((source.clone(), format!("run{i}.input_energy"), r.metrics.input_energy));
                if let Some(e) = r.max_tracking_error {
                    rows.push((source.clone(), format!("run{i}.max_tracking_error"), e));
                }
            }
        } else if let Ok(w) = serde_json::from_str::<WeightsReport>(&text) {
            for (part, (e, wi)) in w.partitions.iter().zip(w.elpd.iter().zip(&w.w)) {
                rows.push((source.clone(), format!("{part}.elpd"), *e));
                rows.push((source.clone(), format!("{part}.w"), *wi));
            }
        } else if let Ok(m) = serde_json::from_str::<Metrics>(&text) {
            if let Some(r) = m.total_rmse {
                rows.push((source.clone(), "total_rmse".into(), r));
            }
            if let Some(v) = m.validation_loss {
                rows.push((source.clone(), "validation_loss".into(), v));
            }
        }
    }
    let path = out.join("report.csv");
    let err = |e: csv::Error| KmaError::format(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    w.write_record(["source", "metric", "value"]).map_err(err)?;
    for (s, m, v) in &rows {
        w.write_record([s.as_str(), m.as_str(), &fmt_f64(*v)]).map_err(err)?;
    }
    w.flush().map_err(|e| KmaError::io(&path, e))?;
    Ok(rows)
}

fn collect_json(root: &Path, dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| KmaError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| KmaError::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            if depth > 0 {
                collect_json(root, &path, depth - 1, out)?;
            }
        } else if path.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.ends_with("metrics.json") || f == "weights.json") {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Partition labels in the dataset, for messages.
pub fn describe_dataset(ds: &Dataset) -> String {
    ds.partitions()
        .iter()
        .map(|p: &Partition| format!("{p}: {} samples", ds.sample_count(*p)))
        .collect::<Vec<_>>()
        .join(", ")
}
