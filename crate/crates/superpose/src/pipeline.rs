//! Whole-checkpoint merging.
//!
//! Tensors are processed independently: for each one the base tensor is read,
//! each task's delta is read and folded into a [`LayerMerger`] one task at a
//! time, and the merged tensor is streamed to the output in name order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use superpose_core::{Baseline, BaselineMerger, LayerMerger, LayerOutcome, MergeConfig, MergeMode, ParamRole};

use crate::error::{Error, Result};
use crate::roles::{classify, role_serde, RoleRules};
use crate::store::{materialize_lora_delta, Checkpoint, CheckpointWriter, Dtype, TensorPlan, TensorRecord};

/// Where one task's parameters come from.
#[derive(Debug)]
pub enum TaskSource {
    /// A full fine-tuned checkpoint with the same tensors as the base.
    Full(Checkpoint),
    /// A LoRA adapter: for base tensor `X.weight` the factors are
    /// `X.lora_A.weight` and `X.lora_B.weight` (optionally under a
    /// `base_model.model.` prefix). Tensors without factors have a zero delta.
    Lora { adapter: Checkpoint, scale: f32 },
}

#[derive(Debug)]
pub struct TaskInput {
    pub id: String,
    pub source: TaskSource,
}

impl TaskInput {
    pub fn full(id: impl Into<String>, checkpoint: Checkpoint) -> Self {
        Self { id: id.into(), source: TaskSource::Full(checkpoint) }
    }

    pub fn lora(id: impl Into<String>, adapter: Checkpoint, scale: f32) -> Self {
        Self { id: id.into(), source: TaskSource::Lora { adapter, scale } }
    }
}

const LORA_PREFIXES: [&str; 2] = ["", "base_model.model."];

fn lora_factor_names(base_name: &str) -> impl Iterator<Item = (String, String)> + '_ {
    let stem = base_name.strip_suffix(".weight").unwrap_or(base_name);
    LORA_PREFIXES.iter().map(move |p| (format!("{p}{stem}.lora_A.weight"), format!("{p}{stem}.lora_B.weight")))
}

impl TaskInput {
    fn lora_factors(&self, adapter: &Checkpoint, name: &str) -> Result<Option<(String, String)>> {
        for (a, b) in lora_factor_names(name) {
            match (adapter.contains(&a), adapter.contains(&b)) {
                (true, true) => return Ok(Some((a, b))),
                (false, false) => continue,
                _ => {
                    return Err(Error::Schema(format!(
                        "adapter {} has only one LoRA factor for tensor {name}",
                        self.id
                    )))
                }
            }
        }
        Ok(None)
    }

    /// `theta_i - theta_pre` for one tensor, in `f64`.
    pub fn delta(&self, base: &TensorRecord) -> Result<Vec<f64>> {
        let name = &base.name;
        match &self.source {
            TaskSource::Full(ck) => {
                if !ck.contains(name) {
                    return Err(Error::Schema(format!("task {} is missing tensor {name}", self.id)));
                }
                let rec = ck.read(name)?;
                if rec.shape != base.shape {
                    return Err(Error::Shape(format!(
                        "tensor {name}: task {} has shape {:?}, base has {:?}",
                        self.id, rec.shape, base.shape
                    )));
                }
                Ok(rec.data.iter().zip(&base.data).map(|(t, b)| f64::from(*t) - f64::from(*b)).collect())
            }
            TaskSource::Lora { adapter, scale } => match self.lora_factors(adapter, name)? {
                None => Ok(vec![0.0; base.data.len()]),
                Some((a, b)) => {
                    let delta = materialize_lora_delta(&adapter.read(&a)?, &adapter.read(&b)?, *scale)?;
                    if delta.shape != base.shape {
                        return Err(Error::Shape(format!(
                            "tensor {name}: adapter {} yields a {:?} delta, base has {:?}",
                            self.id, delta.shape, base.shape
                        )));
                    }
                    Ok(delta.to_f64())
                }
            },
        }
    }
}

/// Pre-trained checkpoint plus the tasks to merge into it.
#[derive(Debug)]
pub struct CheckpointSet {
    pub base: Checkpoint,
    pub tasks: Vec<TaskInput>,
}

impl CheckpointSet {
    pub fn new(base: Checkpoint, tasks: Vec<TaskInput>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("at least one task checkpoint is required".into()));
        }
        let mut ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("task id {} is used twice", w[0])));
        }
        Ok(Self { base, tasks })
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    /// Checks names and shapes from the headers alone.
    pub fn validate(&self, roles: &BTreeMap<String, ParamRole>) -> Result<()> {
        for task in &self.tasks {
            match &task.source {
                TaskSource::Full(ck) => {
                    for (name, info) in self.base.infos() {
                        if roles.get(name) == Some(&ParamRole::Ignore) {
                            continue;
                        }
                        let Some(other) = ck.info(name) else {
                            return Err(Error::Schema(format!("task {} is missing tensor {name}", task.id)));
                        };
                        if other.shape != info.shape {
                            return Err(Error::Shape(format!(
                                "tensor {name}: task {} has shape {:?}, base has {:?}",
                                task.id, other.shape, info.shape
                            )));
                        }
                    }
                }
                TaskSource::Lora { adapter, .. } => {
                    let mut claimed = 0;
                    for (name, info) in self.base.infos() {
                        let Some((a, b)) = task.lora_factors(adapter, name)? else { continue };
                        claimed += 2;
                        let (sa, sb) = (&adapter.info(&a).unwrap().shape, &adapter.info(&b).unwrap().shape);
                        let fits = info.shape.len() == 2
                            && sa.len() == 2
                            && sb.len() == 2
                            && sb[0] == info.shape[0]
                            && sa[1] == info.shape[1]
                            && sa[0] == sb[1];
                        if !fits {
                            return Err(Error::Shape(format!(
                                "tensor {name}: adapter {} factors B {sb:?} and A {sa:?} do not fit base shape {:?}",
                                task.id, info.shape
                            )));
                        }
                    }
                    if claimed != adapter.len() {
                        let orphan = adapter
                            .names()
                            .find(|n| {
                                !self.base.names().any(|b| lora_factor_names(b).any(|(a, bb)| &a == n || &bb == n))
                            })
                            .unwrap_or("?");
                        return Err(Error::Schema(format!(
                            "adapter {} tensor {orphan} does not match any base tensor",
                            task.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub config: MergeConfig,
    pub rules: RoleRules,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
    /// Write each tensor in the base checkpoint's dtype instead of `F32`.
    pub keep_dtype: bool,
    /// Also evaluate the other merge mode on each linear layer and report its
    /// superposition residual.
    pub compare_modes: bool,
    /// Print progress lines to standard error.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    #[serde(with = "role_serde")]
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub retained_rank: usize,
    pub solve_residual: Option<f64>,
    pub max_superposition_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other_mode_max_superposition_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub method: String,
    pub eta: f64,
    pub gamma: f64,
    pub rank_tol: f64,
    pub solver_tol: f64,
    pub mode: String,
    pub base: PathBuf,
    pub tasks: Vec<String>,
    pub keep_dtype: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub layers_merged: usize,
    pub parameters_touched: usize,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub config: ConfigEcho,
    /// One entry per tensor that is not ignored, in name order.
    pub layers: Vec<LayerReport>,
    pub totals: Totals,
    pub notes: Vec<String>,
}

impl MergeReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

const NOTE_ADD_BACK: &str = "normalization, bias and embedding outputs are theta_pre plus the merged task vectors";
const NOTE_NORM_TRIM: &str = "normalization task vectors are trimmed before averaging";

fn to_f32(name: &str, values: &[f64]) -> Result<Vec<f32>> {
    let out: Vec<f32> = values.iter().map(|v| *v as f32).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("tensor {name}: merged values overflow f32")));
    }
    Ok(out)
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn context(name: &str, e: Error) -> Error {
    let add = |m: String| if m.contains(name) { m } else { format!("tensor {name}: {m}") };
    match e {
        Error::Shape(m) => Error::Shape(add(m)),
        Error::Numeric(m) => Error::Numeric(add(m)),
        Error::Config(m) => Error::Config(add(m)),
        other => other,
    }
}

/// Runs `merge_one` over every base tensor and streams results to `out`.
fn drive<F>(
    set: &CheckpointSet,
    options: &PipelineOptions,
    out: &Path,
    method: &str,
    merge_one: F,
) -> Result<MergeReport>
where
    F: Fn(&TensorRecord, ParamRole) -> Result<(Vec<f32>, LayerReport)> + Sync,
{
    let started = Instant::now();
    options.config.validate()?;
    let roles = classify(&set.base, &options.rules)?;
    set.validate(&roles)?;

    let pool = pool(options.threads)?;
    let names: Vec<&str> = set.base.names().collect();
    let plan = set
        .base
        .infos()
        .map(|(name, info)| TensorPlan {
            name: name.to_string(),
            shape: info.shape.clone(),
            dtype: if options.keep_dtype { info.dtype } else { Dtype::F32 },
        })
        .collect();
    let mut writer = CheckpointWriter::create(out, plan)?;
    let mut layers = Vec::with_capacity(names.len());
    let written = (|| -> Result<()> {
        let chunk = pool.current_num_threads().max(1) * 2;
        let mut reported = 0;
        for (done, batch) in names.chunks(chunk).enumerate() {
            let merged: Vec<Result<(TensorRecord, LayerReport)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|name| {
                        let base = set.base.read(name)?;
                        let role = roles[*name];
                        let (data, report) = merge_one(&base, role).map_err(|e| context(name, e))?;
                        let record = TensorRecord { data, ..base };
                        Ok((record, report))
                    })
                    .collect()
            });
            for item in merged {
                let (record, report) = item?;
                writer.write(&record)?;
                if report.role != ParamRole::Ignore {
                    layers.push(report);
                }
            }
            let finished = (done * chunk + batch.len()).min(names.len());
            let decile = finished * 10 / names.len().max(1);
            if options.progress && (decile > reported || finished == names.len()) {
                reported = decile;
                eprintln!("[superpose] {method}: {finished}/{} tensors", names.len());
            }
        }
        writer.finish()?;
        Ok(())
    })();
    if let Err(e) = written {
        let _ = std::fs::remove_file(out);
        return Err(e);
    }

    let totals = Totals {
        layers_merged: layers.len(),
        parameters_touched: layers.iter().map(|l| l.shape.iter().product::<usize>()).sum(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    let c = &options.config;
    let mut notes = vec![NOTE_ADD_BACK.to_string()];
    if c.baseline == Baseline::None && c.eta < 1.0 {
        notes.push(NOTE_NORM_TRIM.to_string());
    }
    if c.baseline == Baseline::None && c.mode == MergeMode::FineTunedMatrix {
        notes.push("linear layers merge the fine-tuned matrices; theta_pre is not added back".into());
    }
    Ok(MergeReport {
        config: ConfigEcho {
            method: method.to_string(),
            eta: c.eta,
            gamma: c.gamma,
            rank_tol: c.rank_tol,
            solver_tol: c.solver_tol,
            mode: c.mode.as_str().to_string(),
            base: set.base.path().to_path_buf(),
            tasks: set.task_ids(),
            keep_dtype: options.keep_dtype,
        },
        layers,
        totals,
        notes,
    })
}

/// Folds every task's delta for one tensor into a layer merger.
pub fn merge_tensor(
    set: &CheckpointSet,
    base: &TensorRecord,
    role: ParamRole,
    config: MergeConfig,
) -> Result<LayerOutcome> {
    let mut merger = LayerMerger::new(base.name.clone(), role, &base.shape, base.to_f64(), config)?;
    if role != ParamRole::Ignore {
        for task in &set.tasks {
            merger.push(&task.id, task.delta(base)?)?;
        }
    }
    Ok(merger.finish()?)
}

/// Merges with task-feature superposition for linear layers and the per-role
/// rules for everything else, writing the result to `out`.
pub fn merge_checkpoints(set: &CheckpointSet, options: &PipelineOptions, out: impl AsRef<Path>) -> Result<MergeReport> {
    if options.config.baseline != Baseline::None {
        return merge_baseline(set, options, out);
    }
    let config = options.config;
    drive(set, options, out.as_ref(), "stf", |base, role| {
        let outcome = merge_tensor(set, base, role, config)?;
        let other = if options.compare_modes && role == ParamRole::LinearMatrix {
            let mode = match config.mode {
                MergeMode::TaskMatrix => MergeMode::FineTunedMatrix,
                MergeMode::FineTunedMatrix => MergeMode::TaskMatrix,
            };
            merge_tensor(set, base, role, MergeConfig { mode, ..config })?.max_superposition_residual
        } else {
            None
        };
        let report = LayerReport {
            name: base.name.clone(),
            role,
            shape: base.shape.clone(),
            retained_rank: outcome.rank,
            solve_residual: outcome.solve_residual,
            max_superposition_residual: outcome.max_superposition_residual,
            other_mode_max_superposition_residual: other,
        };
        Ok((to_f32(&base.name, &outcome.values)?, report))
    })
}

/// Averaging or task arithmetic over every non-ignored tensor.
pub fn merge_baseline(set: &CheckpointSet, options: &PipelineOptions, out: impl AsRef<Path>) -> Result<MergeReport> {
    let config = options.config;
    if config.baseline == Baseline::None {
        return Err(Error::Config("merge_baseline needs baseline = average or task-arithmetic".into()));
    }
    drive(set, options, out.as_ref(), config.baseline.as_str(), |base, role| {
        let values = if role == ParamRole::Ignore {
            base.data.clone()
        } else {
            to_f32(&base.name, &baseline_tensor(set, base, config)?)?
        };
        let report = LayerReport {
            name: base.name.clone(),
            role,
            shape: base.shape.clone(),
            retained_rank: 0,
            solve_residual: None,
            max_superposition_residual: None,
            other_mode_max_superposition_residual: None,
        };
        Ok((values, report))
    })
}

pub fn baseline_tensor(set: &CheckpointSet, base: &TensorRecord, config: MergeConfig) -> Result<Vec<f64>> {
    let mut merger = BaselineMerger::new(base.to_f64(), config.baseline, config.gamma)?;
    for task in &set.tasks {
        merger.push(&task.delta(base)?)?;
    }
    Ok(merger.finish()?)
}
