//! On-disk formats. CSV numbers carry 17 significant digits and JSON uses the
//! shortest representation that parses back to the same `f64`, so every
//! artifact reloads bit-identically.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::averaging::WeightedModel;
use crate::control::ClosedLoopResult;
use crate::dynamics::{ControlInput, DataPlan, Dataset, LabeledTrajectory, Partition, SystemSpec, Trajectory};
use crate::edmd::{Lift, LinearEmbeddingModel};
use crate::error::{KmaError, Result};
use crate::training::{EpochRecord, TrainReport};

use super::config::ExperimentConfig;

pub const DATASET_FORMAT: &str = "kma-dataset";
pub const FORMAT_VERSION: u32 = 1;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| KmaError::format(path, format!("not a number: `{s}`")))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| KmaError::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> KmaError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => KmaError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        KmaError::format(path, e.to_string())
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| KmaError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| KmaError::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| KmaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| KmaError::format(path, e.to_string()))
}

/// Copy of the effective configuration next to the outputs.
pub fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    ensure_dir(dir)?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| KmaError::io(&path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub version: u32,
    pub system: SystemSpec,
    pub seed: u64,
    pub plan: DataPlan,
    pub n_trajectories: usize,
    pub columns: Vec<String>,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn dataset_columns(n: usize, p: usize) -> Vec<String> {
    let mut cols: Vec<String> = vec!["traj_id".into(), "partition".into(), "step".into()];
    cols.extend((0..n).map(|i| format!("x{i}")));
    cols.extend((0..p).map(|i| format!("u{i}")));
    cols
}

/// One row per state; the input columns of a trajectory's last row are empty.
pub fn write_dataset(csv_path: &Path, ds: &Dataset) -> Result<()> {
    let (n, p) = (ds.system.n, ds.system.p);
    let columns = dataset_columns(n, p);
    let mut w = csv_writer(csv_path)?;
    w.write_record(&columns).map_err(|e| csv_error(csv_path, e))?;
    for lt in &ds.trajectories {
        let traj = &lt.trajectory;
        for (k, x) in traj.states.iter().enumerate() {
            let mut row = vec![lt.traj_id.to_string(), lt.partition.to_string(), k.to_string()];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            match traj.inputs.get(k) {
                Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), p)),
            }
            w.write_record(&row).map_err(|e| csv_error(csv_path, e))?;
        }
    }
    w.flush().map_err(|e| KmaError::io(csv_path, e))?;
    let sidecar = DatasetSidecar {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        system: ds.system.clone(),
        seed: ds.seed,
        plan: ds.plan.clone(),
        n_trajectories: ds.trajectories.len(),
        columns,
    };
    save_json(&sidecar_path(csv_path), &sidecar)
}

pub fn read_dataset(csv_path: &Path) -> Result<Dataset> {
    let side_path = sidecar_path(csv_path);
    let sidecar: DatasetSidecar = load_json(&side_path)?;
    if sidecar.format != DATASET_FORMAT {
        return Err(KmaError::format(&side_path, format!("expected format `{DATASET_FORMAT}`")));
    }
    sidecar.system.validate()?;
    let (n, p) = (sidecar.system.n, sidecar.system.p);
    let mut r = csv_reader(csv_path)?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(csv_path, e))?.iter().map(String::from).collect();
    if header != dataset_columns(n, p) {
        return Err(KmaError::format(csv_path, format!("unexpected header {header:?}")));
    }
    let mut trajectories: Vec<LabeledTrajectory> = Vec::new();
    let mut open: Option<(usize, Partition, Vec<DVector<f64>>, Vec<ControlInput>)> = None;
    let mut finish = |open: &mut Option<(usize, Partition, Vec<DVector<f64>>, Vec<ControlInput>)>| -> Result<()> {
        if let Some((traj_id, partition, states, inputs)) = open.take() {
            if inputs.len() + 1 != states.len() {
                return Err(KmaError::format(csv_path, format!("trajectory {traj_id} has inputs on its last row")));
            }
            trajectories.push(LabeledTrajectory { traj_id, partition, trajectory: Trajectory { states, inputs } });
        }
        Ok(())
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(csv_path, e))?;
        let bad = |msg: &str| KmaError::format(csv_path, format!("row {}: {msg}", line + 2));
        let traj_id: usize = rec[0].parse().map_err(|_| bad("bad traj_id"))?;
        let partition: Partition = rec[1].parse().map_err(|_| bad("bad partition"))?;
        let step: usize = rec[2].parse().map_err(|_| bad("bad step"))?;
        let x = (0..n).map(|i| parse_f64(csv_path, &rec[3 + i])).collect::<Result<Vec<f64>>>()?;
        let u_fields: Vec<&str> = (0..p).map(|i| &rec[3 + n + i]).collect();
        if open.as_ref().is_none_or(|o| o.0 != traj_id) {
            finish(&mut open)?;
            open = Some((traj_id, partition, Vec::new(), Vec::new()));
        }
        let cur = open.as_mut().expect("just opened");
        if cur.1 != partition || step != cur.2.len() {
            return Err(bad("rows of a trajectory must be contiguous and ordered by step"));
        }
        cur.2.push(DVector::from_vec(x));
        if u_fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        if cur.2.len() != cur.3.len() + 1 {
            return Err(bad("input after a terminal row"));
        }
        let u = u_fields.iter().map(|f| parse_f64(csv_path, f)).collect::<Result<Vec<f64>>>()?;
        cur.3.push(DVector::from_vec(u));
    }
    finish(&mut open)?;
    if trajectories.len() != sidecar.n_trajectories {
        return Err(KmaError::format(
            csv_path,
            format!("sidecar lists {} trajectories, file has {}", sidecar.n_trajectories, trajectories.len()),
        ));
    }
    Ok(Dataset { system: sidecar.system, seed: sidecar.seed, plan: sidecar.plan, trajectories })
}

/// Self-contained model file: the plant it was learned on, the dictionary,
/// and the matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArtifact {
    Linear { system: SystemSpec, lift: Lift, model: LinearEmbeddingModel },
    Weighted { system: SystemSpec, lift: Lift, model: WeightedModel },
}

impl ModelArtifact {
    pub fn system(&self) -> &SystemSpec {
        match self {
            ModelArtifact::Linear { system, .. } | ModelArtifact::Weighted { system, .. } => system,
        }
    }

    pub fn lift(&self) -> &Lift {
        match self {
            ModelArtifact::Linear { lift, .. } | ModelArtifact::Weighted { lift, .. } => lift,
        }
    }

    /// The model in weighted form; a single model is a one-member average.
    pub fn weighted(&self) -> WeightedModel {
        match self {
            ModelArtifact::Linear { model, .. } => WeightedModel::from_model(model),
            ModelArtifact::Weighted { model, .. } => model.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lift().validate()?;
        match self {
            ModelArtifact::Linear { lift, model, .. } => model.check_dims(lift),
            ModelArtifact::Weighted { lift, model, .. } => model.check_dims(lift),
        }?;
        let sys = self.system();
        if self.lift().state_dim() != sys.n {
            return Err(KmaError::Dimension { context: "model state vs system", expected: sys.n, got: self.lift().state_dim() });
        }
        let p = self.weighted().input_dim();
        if p != sys.p {
            return Err(KmaError::Dimension { context: "model input vs system", expected: sys.p, got: p });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let art: ModelArtifact = load_json(path)?;
        art.validate()?;
        Ok(art)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsReport {
    pub partitions: Vec<Partition>,
    pub elpd: Vec<f64>,
    pub w: Vec<f64>,
    pub n_heldout: usize,
}

/// Prediction and training summary of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub rmse_per_step: Vec<f64>,
    /// `None` when there is nothing to score (zero-step prediction).
    pub total_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    #[serde(default)]
    pub elpds: Vec<f64>,
    #[serde(default)]
    pub weights: Vec<f64>,
}

pub fn write_train_report(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "best_val_loss"]).map_err(|e| csv_error(path, e))?;
    for r in &report.epochs {
        w.write_record([r.epoch.to_string(), fmt_f64(r.train_loss), fmt_f64(r.val_loss), fmt_f64(r.best_val_loss)])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| KmaError::io(path, e))
}

pub fn read_train_report(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != 4 {
            return Err(KmaError::format(path, "expected epoch,train_loss,val_loss,best_val_loss"));
        }
        out.push(EpochRecord {
            epoch: rec[0].parse().map_err(|_| KmaError::format(path, "bad epoch"))?,
            train_loss: parse_f64(path, &rec[1])?,
            val_loss: parse_f64(path, &rec[2])?,
            best_val_loss: parse_f64(path, &rec[3])?,
        });
    }
    Ok(out)
}

/// `t, x0.., u0.., r<i>` for every tracked component `i`.
pub fn write_closed_loop(path: &Path, res: &ClosedLoopResult, tracked: &[usize]) -> Result<()> {
    let traj = &res.trajectory;
    let n = traj.states.first().map_or(0, |x| x.len());
    let p = traj.inputs.first().map_or(0, |u| u.len());
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..p).map(|i| format!("u{i}")));
    let refs = res.references.as_ref().filter(|_| !tracked.is_empty());
    if refs.is_some() {
        header.extend(tracked.iter().map(|i| format!("r{i}")));
    }
    let mut w = csv_writer(path)?;
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (k, x) in traj.states.iter().enumerate() {
        let mut row = vec![fmt_f64(res.times[k])];
        row.extend(x.iter().map(|v| fmt_f64(*v)));
        match traj.inputs.get(k) {
            Some(u) => row.extend(u.iter().map(|v| fmt_f64(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), p)),
        }
        if let Some(refs) = refs {
            row.extend(tracked.iter().map(|&i| fmt_f64(refs[k][i])));
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| KmaError::io(path, e))
}

/// Rows of `u0..u{p-1}`.
pub fn read_inputs(path: &Path, p: usize) -> Result<Vec<ControlInput>> {
    let mut r = csv_reader(path)?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let expected: Vec<String> = (0..p).map(|i| format!("u{i}")).collect();
    if header != expected {
        return Err(KmaError::format(path, format!("expected columns {expected:?}")));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let u = rec.iter().map(|f| parse_f64(path, f)).collect::<Result<Vec<f64>>>()?;
        out.push(DVector::from_vec(u));
    }
    Ok(out)
}
