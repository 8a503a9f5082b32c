//! Merging the task matrices of one linear layer.
//!
//! Each task matrix contributes its singular triplets. The merged matrix is
//! `M = sum_p alpha_p u_p v_p^T` over all triplets `p`, and the weights solve
//!
//! ```text
//! sum_q (u_p . u_q)(v_q . v_p) alpha_q = sigma_p      for every p
//! ```
//!
//! which is `<sigma_p u_p, M v_p - sigma_p u_p> = 0` rewritten with the
//! ansatz for `M`. Rows and columns are ordered by task (input order), then by
//! descending singular value within a task.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{gram, hadamard, solve_sym, truncated_svd, SvdBundle};

/// One layer's delta `M_i = P_i - P_pre` for a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMatrix {
    pub task_id: String,
    pub layer: String,
    pub delta: DMatrix<f64>,
}

impl TaskMatrix {
    pub fn new(task_id: impl Into<String>, layer: impl Into<String>, delta: DMatrix<f64>) -> Self {
        Self { task_id: task_id.into(), layer: layer.into(), delta }
    }
}

/// The assembled system `(U o V) alpha = sigma` and its solution.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeSystem {
    pub coeff: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub weights: DVector<f64>,
    /// `(task id, triplet index)` for each row/column.
    pub index: Vec<(String, usize)>,
    pub residual_norm: f64,
}

impl MergeSystem {
    pub fn rank(&self) -> usize {
        self.index.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedTaskMatrix {
    pub layer: String,
    pub delta: DMatrix<f64>,
    pub system: MergeSystem,
}

/// Residual `<sigma u, M v - sigma u>` of one singular triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletResidual {
    pub task_id: String,
    pub k: usize,
    pub residual: f64,
}

/// Assembles `U o V` and `sigma` over the concatenated triplets.
#[allow(clippy::type_complexity)]
pub fn assemble_system(bundles: &[SvdBundle]) -> Result<(DMatrix<f64>, DVector<f64>, Vec<(String, usize)>)> {
    check_bundle_shapes(bundles)?;
    let lefts: Vec<&DMatrix<f64>> = bundles.iter().map(|b| &b.left).collect();
    let rights: Vec<&DMatrix<f64>> = bundles.iter().map(|b| &b.right).collect();
    let u = gram(&lefts, &lefts)?;
    let v = gram(&rights, &rights)?;
    let coeff = hadamard(&u, &v)?;
    let rhs = DVector::from_iterator(coeff.nrows(), bundles.iter().flat_map(|b| b.sigmas.iter().copied()));
    let index = bundles.iter().flat_map(|b| (0..b.rank()).map(move |k| (b.task_id.clone(), k))).collect();
    Ok((coeff, rhs, index))
}

/// `sum_p weights_p u_p v_p^T` over the concatenated triplets.
pub fn recompose(bundles: &[SvdBundle], weights: &DVector<f64>, shape: (usize, usize)) -> Result<DMatrix<f64>> {
    let r: usize = bundles.iter().map(SvdBundle::rank).sum();
    if weights.len() != r {
        return Err(Error::Shape(format!("{} weights for {r} triplets", weights.len())));
    }
    let mut left = DMatrix::zeros(shape.0, r);
    let mut right = DMatrix::zeros(shape.1, r);
    let mut at = 0;
    for b in bundles {
        if b.shape != shape {
            return Err(Error::Shape(format!("bundle {:?} in a {:?} layer", b.shape, shape)));
        }
        left.columns_mut(at, b.rank()).copy_from(&b.left);
        right.columns_mut(at, b.rank()).copy_from(&b.right);
        at += b.rank();
    }
    for (k, w) in weights.iter().enumerate() {
        left.column_mut(k).scale_mut(*w);
    }
    Ok(left * right.transpose())
}

fn check_bundle_shapes(bundles: &[SvdBundle]) -> Result<()> {
    if let Some(first) = bundles.first() {
        if let Some(bad) = bundles.iter().find(|b| b.shape != first.shape) {
            return Err(Error::Shape(format!(
                "task {} has shape {:?}, expected {:?}",
                bad.task_id, bad.shape, first.shape
            )));
        }
    }
    Ok(())
}

/// Solves for the merge weights of already decomposed tasks and recomposes.
pub fn merge_bundles(
    layer: impl Into<String>,
    bundles: &[SvdBundle],
    shape: (usize, usize),
    solver_tol: f64,
) -> Result<MergedTaskMatrix> {
    let (coeff, rhs, index) = assemble_system(bundles)?;
    let (weights, residual_norm) = solve_sym(&coeff, &rhs, solver_tol)?;
    let delta = recompose(bundles, &weights, shape)?;
    Ok(MergedTaskMatrix {
        layer: layer.into(),
        delta,
        system: MergeSystem { coeff, rhs, weights, index, residual_norm },
    })
}

/// Merges the task matrices of one layer.
pub fn stf_merge(matrices: &[TaskMatrix], rank_tol: f64, solver_tol: f64) -> Result<MergedTaskMatrix> {
    let Some(first) = matrices.first() else {
        return Err(Error::Config(String::from("at least one task matrix is required")));
    };
    let mut acc = StfAccumulator::new(first.layer.clone(), first.delta.shape(), rank_tol);
    for m in matrices {
        if m.layer != first.layer {
            return Err(Error::Shape(format!("layer {} mixed into merge of {}", m.layer, first.layer)));
        }
        acc.push(m.task_id.clone(), &m.delta)?;
    }
    acc.finish(solver_tol)
}

/// Decomposes task matrices one at a time so only their bundles are kept.
#[derive(Debug, Clone)]
pub struct StfAccumulator {
    layer: String,
    shape: (usize, usize),
    rank_tol: f64,
    bundles: Vec<SvdBundle>,
}

impl StfAccumulator {
    pub fn new(layer: impl Into<String>, shape: (usize, usize), rank_tol: f64) -> Self {
        Self { layer: layer.into(), shape, rank_tol, bundles: Vec::new() }
    }

    pub fn push(&mut self, task_id: impl Into<String>, delta: &DMatrix<f64>) -> Result<()> {
        let task_id = task_id.into();
        if delta.shape() != self.shape {
            return Err(Error::Shape(format!(
                "{}: task {task_id} has shape {:?}, expected {:?}",
                self.layer,
                delta.shape(),
                self.shape
            )));
        }
        let bundle = truncated_svd(task_id, delta, self.rank_tol)?;
        self.bundles.push(bundle);
        Ok(())
    }

    pub fn bundles(&self) -> &[SvdBundle] {
        &self.bundles
    }

    pub fn finish(self, solver_tol: f64) -> Result<MergedTaskMatrix> {
        merge_bundles(self.layer, &self.bundles, self.shape, solver_tol)
    }

    pub fn finish_with_bundles(self, solver_tol: f64) -> Result<(MergedTaskMatrix, Vec<SvdBundle>)> {
        let merged = merge_bundles(self.layer, &self.bundles, self.shape, solver_tol)?;
        Ok((merged, self.bundles))
    }
}

/// `<sigma u, M v - sigma u>` for every retained triplet of every bundle.
pub fn superposition_residuals(merged: &DMatrix<f64>, bundles: &[SvdBundle]) -> Result<Vec<TripletResidual>> {
    let mut out = Vec::new();
    for b in bundles {
        if b.shape != merged.shape() {
            return Err(Error::Shape(format!(
                "task {} has shape {:?}, merged matrix is {:?}",
                b.task_id,
                b.shape,
                merged.shape()
            )));
        }
        for (k, sigma) in b.sigmas.iter().enumerate() {
            let mv = merged * b.right.column(k);
            let projection = b.left.column(k).dot(&mv);
            out.push(TripletResidual { task_id: b.task_id.clone(), k, residual: sigma * projection - sigma * sigma });
        }
    }
    Ok(out)
}

/// Brute-force check of the superposition conditions for given weights.
///
/// Rebuilds `M` as an explicit sum of weighted outer products and evaluates
/// each `<sigma u, M v - sigma u>` with plain loops, without going through
/// Gram matrices. Returns the largest absolute residual.
pub fn oracle_check(matrices: &[TaskMatrix], weights: &[f64], rank_tol: f64) -> Result<f64> {
    let Some(first) = matrices.first() else {
        return Ok(0.0);
    };
    let (m, n) = first.delta.shape();
    let mut bundles = Vec::with_capacity(matrices.len());
    for t in matrices {
        if t.delta.shape() != (m, n) {
            return Err(Error::Shape(format!("task {} has shape {:?}", t.task_id, t.delta.shape())));
        }
        bundles.push(truncated_svd(t.task_id.clone(), &t.delta, rank_tol)?);
    }
    let r: usize = bundles.iter().map(SvdBundle::rank).sum();
    if weights.len() != r {
        return Err(Error::Shape(format!("{} weights for {r} triplets", weights.len())));
    }

    let triplets: Vec<(&SvdBundle, usize)> = bundles.iter().flat_map(|b| (0..b.rank()).map(move |k| (b, k))).collect();

    let mut merged = alloc::vec![0.0f64; m * n];
    for ((b, k), w) in triplets.iter().zip(weights) {
        for i in 0..m {
            let ui = b.left[(i, *k)];
            for j in 0..n {
                merged[i * n + j] += w * ui * b.right[(j, *k)];
            }
        }
    }

    let mut worst = 0.0f64;
    for (b, k) in &triplets {
        let sigma = b.sigmas[*k];
        let mut inner = 0.0;
        for i in 0..m {
            let mut mv = 0.0;
            for j in 0..n {
                mv += merged[i * n + j] * b.right[(j, *k)];
            }
            let feature = sigma * b.left[(i, *k)];
            inner += feature * (mv - feature);
        }
        worst = worst.max(inner.abs());
    }
    Ok(worst)
}
