//! Per-tensor merge rules: magnitude trimming and role dispatch.
//!
//! Linear matrices go through the superposition merge, normalization
//! parameters are averaged, and biases and embeddings are summed as task
//! vectors. Every delta is trimmed to its top `eta` fraction by magnitude
//! first. Scaled outputs are added back onto the pre-trained values.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;
use core::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::SvdBundle;
use crate::stf::{superposition_residuals, MergedTaskMatrix, StfAccumulator};

/// How a parameter tensor is merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamRole {
    LinearMatrix,
    Bias,
    Embedding,
    Normalization,
    Ignore,
}

impl ParamRole {
    pub const ALL: [ParamRole; 5] =
        [ParamRole::LinearMatrix, ParamRole::Bias, ParamRole::Embedding, ParamRole::Normalization, ParamRole::Ignore];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::LinearMatrix => "linear",
            ParamRole::Bias => "bias",
            ParamRole::Embedding => "embedding",
            ParamRole::Normalization => "normalization",
            ParamRole::Ignore => "ignore",
        }
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamRole::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown parameter role `{s}`")))
    }
}

/// Which matrices enter the superposition merge for linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeMode {
    /// Merge `P_i - P_pre` and add the result back onto `P_pre`.
    #[default]
    TaskMatrix,
    /// Merge the fine-tuned `P_i` themselves; the base is not added back.
    FineTunedMatrix,
}

impl MergeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::TaskMatrix => "task-matrix",
            MergeMode::FineTunedMatrix => "fine-tuned-matrix",
        }
    }
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task-matrix" | "task_matrix" => Ok(MergeMode::TaskMatrix),
            "fine-tuned-matrix" | "fine_tuned_matrix" | "finetuned" => Ok(MergeMode::FineTunedMatrix),
            _ => Err(Error::Config(format!("unknown merge mode `{s}`"))),
        }
    }
}

/// Comparison methods run instead of the superposition merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Baseline {
    #[default]
    None,
    /// Elementwise mean of the fine-tuned checkpoints.
    Average,
    /// `theta_pre + gamma * sum(tau_i)` with no trimming.
    TaskArithmetic,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::Average => "average",
            Baseline::TaskArithmetic => "task-arithmetic",
        }
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "average" | "avg" => Ok(Baseline::Average),
            "task-arithmetic" | "task_arithmetic" | "ta" => Ok(Baseline::TaskArithmetic),
            _ => Err(Error::Config(format!("unknown baseline `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    /// Fraction of entries kept by magnitude trimming, in `(0, 1]`.
    pub eta: f64,
    /// Scaling applied to merged linear, bias and embedding deltas.
    pub gamma: f64,
    /// Relative singular-value cutoff.
    pub rank_tol: f64,
    /// Relative eigenvalue cutoff of the weight solve.
    pub solver_tol: f64,
    pub mode: MergeMode,
    pub baseline: Baseline,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self::full_finetune()
    }
}

impl MergeConfig {
    /// Fully fine-tuned checkpoints: keep 20% of each delta, scale by 0.8.
    pub fn full_finetune() -> Self {
        Self {
            eta: 0.2,
            gamma: 0.8,
            rank_tol: 1e-5,
            solver_tol: 1e-8,
            mode: MergeMode::TaskMatrix,
            baseline: Baseline::None,
        }
    }

    /// Low-rank adapters: keep 30%, scale by 0.5.
    pub fn adapter() -> Self {
        Self { eta: 0.3, gamma: 0.5, ..Self::full_finetune() }
    }

    /// Large models: no trimming, scale by 0.8.
    pub fn large_model() -> Self {
        Self { eta: 1.0, gamma: 0.8, ..Self::full_finetune() }
    }

    /// No trimming and no scaling.
    pub fn identity() -> Self {
        Self { eta: 1.0, gamma: 1.0, ..Self::full_finetune() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        // gamma = 0 is accepted: it reduces the merge to the base checkpoint.
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be finite and non-negative, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.rank_tol) {
            return Err(Error::Config(format!("rank_tol must lie in [0, 1), got {}", self.rank_tol)));
        }
        if !(0.0..1.0).contains(&self.solver_tol) {
            return Err(Error::Config(format!("solver_tol must lie in [0, 1), got {}", self.solver_tol)));
        }
        Ok(())
    }
}

/// Number of entries kept when trimming `count` values at ratio `eta`.
pub fn kept_count(count: usize, eta: f64) -> usize {
    if count == 0 || eta.is_nan() || eta <= 0.0 {
        return 0;
    }
    if eta >= 1.0 {
        return count;
    }
    let exact = eta * count as f64;
    // absorb representation error such as 0.3 * 10 = 3.0000000000000004
    let k = libm::ceil(exact - exact * 1e-12) as usize;
    k.clamp(1, count)
}

/// Zeroes all but the `ceil(eta * len)` largest-magnitude entries.
///
/// Ties at the threshold keep the lower index. Kept values are not rescaled.
pub fn trim_in_place(values: &mut [f64], eta: f64) {
    let keep = kept_count(values.len(), eta);
    if keep == values.len() {
        return;
    }
    if keep == 0 {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let by_magnitude =
        |a: &usize, b: &usize| -> Ordering { values[*b].abs().total_cmp(&values[*a].abs()).then(a.cmp(b)) };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.select_nth_unstable_by(keep - 1, by_magnitude);
    let mut mask = vec![false; values.len()];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    for (v, keep) in values.iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
}

pub fn trim(values: &[f64], eta: f64) -> Vec<f64> {
    let mut out = values.to_vec();
    trim_in_place(&mut out, eta);
    out
}

/// Result of merging one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutcome {
    pub values: Vec<f64>,
    pub role: ParamRole,
    /// Total retained rank `r` of the weight system (linear layers only).
    pub rank: usize,
    pub solve_residual: Option<f64>,
    /// Largest `|<sigma u, M v - sigma u>|` over the merged triplets.
    pub max_superposition_residual: Option<f64>,
    /// The unscaled merged task matrix and the bundles it was built from.
    pub merged: Option<(MergedTaskMatrix, Vec<SvdBundle>)>,
}

#[derive(Debug, Clone)]
enum MergeState {
    Linear(StfAccumulator),
    Vector { sum: Vec<f64>, count: usize },
    Ignore,
}

/// Merges one tensor across tasks, consuming one task delta at a time.
#[derive(Debug, Clone)]
pub struct LayerMerger {
    name: String,
    role: ParamRole,
    shape: Vec<usize>,
    base: Vec<f64>,
    config: MergeConfig,
    state: MergeState,
}

impl LayerMerger {
    pub fn new(
        name: impl Into<String>,
        role: ParamRole,
        shape: &[usize],
        base: Vec<f64>,
        config: MergeConfig,
    ) -> Result<Self> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if base.len() != len {
            return Err(Error::Shape(format!("{name}: {} values for shape {shape:?}", base.len())));
        }
        let state = match role {
            ParamRole::LinearMatrix => {
                let [rows, cols] = shape else {
                    return Err(Error::Shape(format!("{name}: linear matrices must be 2-D, got shape {shape:?}")));
                };
                MergeState::Linear(StfAccumulator::new(name.clone(), (*rows, *cols), config.rank_tol))
            }
            ParamRole::Ignore => MergeState::Ignore,
            _ => MergeState::Vector { sum: vec![0.0; len], count: 0 },
        };
        Ok(Self { name, role, shape: shape.to_vec(), base, config, state })
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    /// Adds one task's delta `theta_i - theta_pre` (row-major).
    pub fn push(&mut self, task_id: &str, mut delta: Vec<f64>) -> Result<()> {
        if delta.len() != self.base.len() {
            return Err(Error::Shape(format!(
                "{}: task {task_id} delta has {} values, expected {}",
                self.name,
                delta.len(),
                self.base.len()
            )));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{}: task {task_id} has non-finite values", self.name)));
        }
        match &mut self.state {
            MergeState::Ignore => {}
            MergeState::Linear(acc) => {
                if self.config.mode == MergeMode::FineTunedMatrix {
                    for (d, b) in delta.iter_mut().zip(&self.base) {
                        *d += b;
                    }
                }
                trim_in_place(&mut delta, self.config.eta);
                let matrix = DMatrix::from_row_slice(self.shape[0], self.shape[1], &delta);
                acc.push(task_id, &matrix)?;
            }
            MergeState::Vector { sum, count } => {
                trim_in_place(&mut delta, self.config.eta);
                for (s, d) in sum.iter_mut().zip(&delta) {
                    *s += d;
                }
                *count += 1;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<LayerOutcome> {
        let gamma = self.config.gamma;
        let mut outcome = LayerOutcome {
            values: Vec::new(),
            role: self.role,
            rank: 0,
            solve_residual: None,
            max_superposition_residual: None,
            merged: None,
        };
        match self.state {
            MergeState::Ignore => outcome.values = self.base,
            MergeState::Vector { sum, count } => {
                if count == 0 {
                    return Err(Error::Config(format!("{}: no task deltas supplied", self.name)));
                }
                let scale = if self.role == ParamRole::Normalization { 1.0 / count as f64 } else { gamma };
                outcome.values = self.base.iter().zip(&sum).map(|(b, s)| b + scale * s).collect();
            }
            MergeState::Linear(acc) => {
                if acc.bundles().is_empty() {
                    return Err(Error::Config(format!("{}: no task deltas supplied", self.name)));
                }
                let (merged, bundles) = acc.finish_with_bundles(self.config.solver_tol)?;
                let residuals = superposition_residuals(&merged.delta, &bundles)?;
                let (rows, cols) = merged.delta.shape();
                let mut values = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        let scaled = gamma * merged.delta[(i, j)];
                        values.push(match self.config.mode {
                            MergeMode::TaskMatrix => self.base[i * cols + j] + scaled,
                            MergeMode::FineTunedMatrix => scaled,
                        });
                    }
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!("{}: merged values are not finite", self.name)));
                }
                outcome.values = values;
                outcome.rank = merged.system.rank();
                outcome.solve_residual = Some(merged.system.residual_norm);
                outcome.max_superposition_residual =
                    Some(residuals.iter().fold(0.0f64, |m, t| m.max(t.residual.abs())));
                outcome.merged = Some((merged, bundles));
            }
        }
        Ok(outcome)
    }
}

/// Task-vector accumulation for the averaging and task-arithmetic baselines.
#[derive(Debug, Clone)]
pub struct BaselineMerger {
    base: Vec<f64>,
    sum: Vec<f64>,
    count: usize,
    baseline: Baseline,
    gamma: f64,
}

impl BaselineMerger {
    pub fn new(base: Vec<f64>, baseline: Baseline, gamma: f64) -> Result<Self> {
        if baseline == Baseline::None {
            return Err(Error::Config(String::from("no baseline selected")));
        }
        let sum = vec![0.0; base.len()];
        Ok(Self { base, sum, count: 0, baseline, gamma })
    }

    pub fn push(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.base.len() {
            return Err(Error::Shape(format!("delta has {} values, expected {}", delta.len(), self.base.len())));
        }
        for (s, d) in self.sum.iter_mut().zip(delta) {
            *s += d;
        }
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Config(String::from("no task deltas supplied")));
        }
        let scale = match self.baseline {
            Baseline::Average => 1.0 / self.count as f64,
            _ => self.gamma,
        };
        Ok(self.base.iter().zip(&self.sum).map(|(b, s)| b + scale * s).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trim_keeps_largest_fraction() {
        assert_eq!(trim(&[1.0, -3.0, 2.0, 0.5, 5.0], 0.2), vec![0.0, 0.0, 0.0, 0.0, 5.0]);
        let any = [0.3, -0.1, 7.0];
        assert_eq!(trim(&any, 1.0), any.to_vec());
        assert_eq!(trim(&[2.0, -2.0, 1.0], 1.0 / 3.0), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn kept_count_absorbs_rounding() {
        assert_eq!(kept_count(10, 0.3), 3);
        assert_eq!(kept_count(5, 0.2), 1);
        assert_eq!(kept_count(7, 0.5), 4);
        assert_eq!(kept_count(3, 1e-9), 1);
        assert_eq!(kept_count(0, 0.5), 0);
    }

    #[test]
    fn config_validation() {
        assert!(MergeConfig::default().validate().is_ok());
        let bad = MergeConfig { eta: 1.5, ..MergeConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("eta")));
        let bad = MergeConfig { eta: 0.0, ..MergeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = MergeConfig { gamma: f64::NAN, ..MergeConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(MergeConfig::adapter().eta, 0.3);
        assert_eq!(MergeConfig::large_model().eta, 1.0);
    }

    #[test]
    fn role_and_mode_parsing() {
        assert_eq!("Normalization".parse::<ParamRole>().unwrap(), ParamRole::Normalization);
        assert!("conv".parse::<ParamRole>().is_err());
        assert_eq!("ta".parse::<Baseline>().unwrap(), Baseline::TaskArithmetic);
        assert_eq!("fine-tuned-matrix".parse::<MergeMode>().unwrap(), MergeMode::FineTunedMatrix);
    }

    fn run(role: ParamRole, shape: &[usize], base: &[f64], deltas: &[&[f64]], cfg: MergeConfig) -> LayerOutcome {
        let mut m = LayerMerger::new("t", role, shape, base.to_vec(), cfg).unwrap();
        for (i, d) in deltas.iter().enumerate() {
            m.push(&alloc::format!("task{i}"), d.to_vec()).unwrap();
        }
        m.finish().unwrap()
    }

    #[test]
    fn vector_roles_follow_their_rules() {
        let cfg = MergeConfig { eta: 1.0, gamma: 0.5, ..MergeConfig::default() };
        let base = [1.0, 1.0];
        let d1: &[f64] = &[2.0, 0.0];
        let d2: &[f64] = &[0.0, 4.0];
        let bias = run(ParamRole::Bias, &[2], &base, &[d1, d2], cfg);
        assert_eq!(bias.values, vec![2.0, 3.0]);
        let emb = run(ParamRole::Embedding, &[2], &base, &[d1, d2], cfg);
        assert_eq!(emb.values, vec![2.0, 3.0]);
        let norm = run(ParamRole::Normalization, &[2], &base, &[d1, d2], cfg);
        assert_eq!(norm.values, vec![2.0, 3.0]);
        let ign = run(ParamRole::Ignore, &[2], &base, &[d1, d2], cfg);
        assert_eq!(ign.values, base.to_vec());

        let cfg = MergeConfig { gamma: 0.0, ..cfg };
        assert_eq!(run(ParamRole::Bias, &[2], &base, &[d1, d2], cfg).values, base.to_vec());
        assert_eq!(run(ParamRole::Normalization, &[2], &base, &[d1, d2], cfg).values, vec![2.0, 3.0]);
    }

    #[test]
    fn vector_deltas_are_trimmed() {
        let cfg = MergeConfig { eta: 0.5, gamma: 1.0, ..MergeConfig::default() };
        let out = run(ParamRole::Bias, &[4], &[0.0; 4], &[&[1.0, -4.0, 3.0, 0.5]], cfg);
        assert_eq!(out.values, vec![0.0, -4.0, 3.0, 0.0]);
    }

    #[test]
    fn linear_single_task_recovers_fine_tuned() {
        let base = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let delta = [0.5, -0.25, 0.0, 1.0, 0.75, -1.5];
        let out = run(ParamRole::LinearMatrix, &[2, 3], &base, &[&delta], MergeConfig::identity());
        for ((o, b), d) in out.values.iter().zip(&base).zip(&delta) {
            assert!((o - (b + d)).abs() < 1e-12);
        }
        assert_eq!(out.rank, 2);
        assert!(out.max_superposition_residual.unwrap() < 1e-10);
    }

    #[test]
    fn fine_tuned_mode_drops_the_base() {
        let base = [1.0, 0.0, 0.0, 1.0];
        let delta = [1.0, 0.0, 0.0, 0.0];
        let cfg = MergeConfig { mode: MergeMode::FineTunedMatrix, ..MergeConfig::identity() };
        let out = run(ParamRole::LinearMatrix, &[2, 2], &base, &[&delta], cfg);
        let want = [2.0, 0.0, 0.0, 1.0];
        for (o, w) in out.values.iter().zip(&want) {
            assert!((o - w).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_role_requires_two_dims() {
        let err = LayerMerger::new("x", ParamRole::LinearMatrix, &[4], vec![0.0; 4], MergeConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn push_rejects_bad_deltas() {
        let mut m = LayerMerger::new("x", ParamRole::Bias, &[2], vec![0.0; 2], MergeConfig::default()).unwrap();
        assert!(matches!(m.push("a", vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(m.push("a", vec![f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn baselines() {
        let base = [1.0, 1.0];
        let mut avg = BaselineMerger::new(base.to_vec(), Baseline::Average, 0.3).unwrap();
        avg.push(&[1.0, -2.0]).unwrap();
        avg.push(&[-1.0, 2.0]).unwrap();
        assert_eq!(avg.finish().unwrap(), base.to_vec());

        let mut ta = BaselineMerger::new(base.to_vec(), Baseline::TaskArithmetic, 1.0).unwrap();
        ta.push(&[1.0, -2.0]).unwrap();
        assert_eq!(ta.finish().unwrap(), vec![2.0, -1.0]);

        assert!(BaselineMerger::new(base.to_vec(), Baseline::None, 1.0).is_err());
    }
}
