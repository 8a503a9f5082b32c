//! Preservation comparison and singular-triplet ablation over a checkpoint set.
//!
//! Both reports look at linear tensors only. Each method runs unscaled
//! (`gamma = 1`), and its merged task matrix is the merged weight minus the
//! base weight. Reference triplets come from the untrimmed task matrices.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use superpose_core::{
    ablate_singulars, merge_bundles, preservation, truncated_svd, AblationSpec, Baseline, BaselineMerger, DMatrix,
    LayerMerger, MergeConfig, ParamRole, PreservationRecord, SvdBundle,
};

use crate::error::{Error, Result};
use crate::pipeline::CheckpointSet;
use crate::roles::{classify, RoleRules};
use crate::store::TensorRecord;

/// Parses a method name: `stf`, `average` or `ta`/`task-arithmetic`.
pub fn method_config(name: &str, template: MergeConfig) -> Result<MergeConfig> {
    let baseline = match name {
        "stf" => Baseline::None,
        other => other
            .parse::<Baseline>()
            .ok()
            .filter(|b| *b != Baseline::None)
            .ok_or_else(|| Error::Config(format!("unknown method `{name}` (expected stf, average or ta)")))?,
    };
    Ok(MergeConfig { baseline, ..template })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationRow {
    pub method: String,
    pub layer: String,
    pub task: String,
    pub mean_abs_preservation: f64,
    pub mean_full_gap: f64,
    pub triplets: usize,
}

impl From<PreservationRecord> for PreservationRow {
    fn from(r: PreservationRecord) -> Self {
        Self {
            method: r.method,
            layer: r.layer,
            task: r.task_id,
            mean_abs_preservation: r.mean_abs_preservation,
            mean_full_gap: r.mean_full_gap,
            triplets: r.triplet_count,
        }
    }
}

/// Per-method means, weighted by triplet count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_abs_preservation: f64,
    pub mean_full_gap: f64,
    pub triplets: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub methods: Vec<MethodSummary>,
    pub rows: Vec<PreservationRow>,
}

impl PreservationReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.methods).expect("report serialises")
    }

    /// Columns: method, layer, task, mean_abs_preservation, mean_full_gap.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "layer", "task", "mean_abs_preservation", "mean_full_gap"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.layer.clone(),
                r.task.clone(),
                r.mean_abs_preservation.to_string(),
                r.mean_full_gap.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn write(&self, json: impl AsRef<Path>, csv: impl AsRef<Path>) -> Result<()> {
        write_text(json.as_ref(), &(self.to_json() + "\n"))?;
        write_text(csv.as_ref(), &self.to_csv())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn as_matrix(shape: &[usize], row_major: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(shape[0], shape[1], row_major)
}

fn linear_names(set: &CheckpointSet, rules: &RoleRules) -> Result<Vec<String>> {
    let roles = classify(&set.base, rules)?;
    set.validate(&roles)?;
    Ok(roles.into_iter().filter(|(_, r)| *r == ParamRole::LinearMatrix).map(|(n, _)| n).collect())
}

/// The unscaled merged weight minus the base weight.
fn unscaled_merged_delta(
    base: &TensorRecord,
    deltas: &[(String, Vec<f64>)],
    config: MergeConfig,
) -> Result<DMatrix<f64>> {
    let base_values = base.to_f64();
    let merged = if config.baseline == Baseline::None {
        let config = MergeConfig { gamma: 1.0, ..config };
        let mut merger =
            LayerMerger::new(base.name.clone(), ParamRole::LinearMatrix, &base.shape, base_values.clone(), config)?;
        for (id, d) in deltas {
            merger.push(id, d.clone())?;
        }
        merger.finish()?.values
    } else {
        let mut merger = BaselineMerger::new(base_values.clone(), config.baseline, 1.0)?;
        for (_, d) in deltas {
            merger.push(d)?;
        }
        merger.finish()?
    };
    let diff: Vec<f64> = merged.iter().zip(&base_values).map(|(m, b)| m - b).collect();
    Ok(as_matrix(&base.shape, &diff))
}

fn layer_deltas(set: &CheckpointSet, base: &TensorRecord) -> Result<Vec<(String, Vec<f64>)>> {
    set.tasks.iter().map(|t| Ok((t.id.clone(), t.delta(base)?))).collect()
}

fn reference_bundles(base: &TensorRecord, deltas: &[(String, Vec<f64>)], rank_tol: f64) -> Result<Vec<SvdBundle>> {
    deltas.iter().map(|(id, d)| Ok(truncated_svd(id.clone(), &as_matrix(&base.shape, d), rank_tol)?)).collect()
}

/// Runs every `(method, config)` pair unscaled and measures how well each
/// task's singular triplets survive in every linear tensor.
pub fn preservation_report(
    set: &CheckpointSet,
    rules: &RoleRules,
    methods: &[(String, MergeConfig)],
) -> Result<PreservationReport> {
    if methods.is_empty() {
        return Err(Error::Config("preservation report needs at least one method".into()));
    }
    for (i, (name, c)) in methods.iter().enumerate() {
        c.validate()?;
        if methods[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("method `{name}` is listed twice")));
        }
    }
    let names = linear_names(set, rules)?;
    let per_layer: Vec<Vec<PreservationRow>> = names
        .par_iter()
        .map(|name| {
            let base = set.base.read(name)?;
            let deltas = layer_deltas(set, &base)?;
            let mut rows = Vec::new();
            for (method, config) in methods {
                let bundles = reference_bundles(&base, &deltas, config.rank_tol)?;
                let merged = unscaled_merged_delta(&base, &deltas, *config)?;
                rows.extend(preservation(&merged, &bundles, name, method)?.into_iter().map(PreservationRow::from));
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<PreservationRow> = per_layer.into_iter().flatten().collect();

    let rank = |m: &str| methods.iter().position(|(name, _)| name == m).unwrap_or(usize::MAX);
    let mut rows = rows;
    rows.sort_by_key(|r| rank(&r.method));

    let summaries = methods
        .iter()
        .map(|(method, _)| {
            let mine: Vec<&PreservationRow> = rows.iter().filter(|r| &r.method == method).collect();
            let triplets: usize = mine.iter().map(|r| r.triplets).sum();
            let weighted = |f: fn(&PreservationRow) -> f64| {
                if triplets == 0 {
                    0.0
                } else {
                    mine.iter().map(|r| f(r) * r.triplets as f64).sum::<f64>() / triplets as f64
                }
            };
            MethodSummary {
                method: method.clone(),
                mean_abs_preservation: weighted(|r| r.mean_abs_preservation),
                mean_full_gap: weighted(|r| r.mean_full_gap),
                triplets,
                layers: names.len(),
            }
        })
        .collect();
    Ok(PreservationReport { methods: summaries, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub target: String,
    pub fraction: f64,
    pub layers: usize,
    /// Relative Frobenius change of the merged task matrix.
    pub mean_relative_error: f64,
    pub max_relative_error: f64,
    /// Preservation of the full triplet set under the ablated merge.
    pub mean_abs_preservation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn write(&self, json: impl AsRef<Path>, csv: impl AsRef<Path>) -> Result<()> {
        write_text(json.as_ref(), &(self.to_json() + "\n"))?;
        write_text(csv.as_ref(), &self.to_csv())
    }
}

struct LayerAblation {
    relative_error: f64,
    preservation_sum: f64,
    triplets: usize,
}

/// Merges every linear tensor with and without the triplets each spec
/// removes, one row per spec.
pub fn ablation_report(
    set: &CheckpointSet,
    rules: &RoleRules,
    config: MergeConfig,
    specs: &[AblationSpec],
) -> Result<AblationReport> {
    if config.baseline != Baseline::None {
        return Err(Error::Config("ablation applies to the stf method only".into()));
    }
    config.validate()?;
    let config = MergeConfig { gamma: 1.0, ..config };
    let names = linear_names(set, rules)?;
    let per_layer: Vec<Vec<LayerAblation>> = names
        .par_iter()
        .map(|name| {
            let base = set.base.read(name)?;
            let mut merger =
                LayerMerger::new(name.clone(), ParamRole::LinearMatrix, &base.shape, base.to_f64(), config)?;
            for task in &set.tasks {
                merger.push(&task.id, task.delta(&base)?)?;
            }
            let (full, bundles) = merger.finish()?.merged.expect("linear layers carry their merge");
            let shape = (base.shape[0], base.shape[1]);
            let full_norm = full.delta.norm();
            specs
                .iter()
                .map(|spec| {
                    let ablated: Vec<SvdBundle> = bundles.iter().map(|b| ablate_singulars(b, *spec)).collect();
                    let cut = merge_bundles(name.clone(), &ablated, shape, config.solver_tol)?.delta;
                    let relative_error = if full_norm == 0.0 { 0.0 } else { (&cut - &full.delta).norm() / full_norm };
                    let records = preservation(&cut, &bundles, name, "stf")?;
                    Ok(LayerAblation {
                        relative_error,
                        preservation_sum: records
                            .iter()
                            .map(|r| r.mean_abs_preservation * r.triplet_count as f64)
                            .sum(),
                        triplets: records.iter().map(|r| r.triplet_count).sum(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let rows = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let cells: Vec<&LayerAblation> = per_layer.iter().map(|l| &l[i]).collect();
            let n = cells.len().max(1) as f64;
            let triplets: usize = cells.iter().map(|c| c.triplets).sum();
            AblationRow {
                target: spec.target.as_str().to_string(),
                fraction: spec.remove_fraction,
                layers: cells.len(),
                mean_relative_error: cells.iter().map(|c| c.relative_error).sum::<f64>() / n,
                max_relative_error: cells.iter().map(|c| c.relative_error).fold(0.0, f64::max),
                mean_abs_preservation: if triplets == 0 {
                    0.0
                } else {
                    cells.iter().map(|c| c.preservation_sum).sum::<f64>() / triplets as f64
                },
            }
        })
        .collect();
    Ok(AblationReport { rows })
}
