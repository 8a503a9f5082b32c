//! Feature-preservation metrics and singular-triplet ablation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::SvdBundle;
use crate::stf::merge_bundles;

/// How well one task's features survive in a merged task matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationRecord {
    pub method: String,
    pub layer: String,
    pub task_id: String,
    /// Mean over triplets of `|<sigma u, M v - sigma u>|`. Smaller is better.
    pub mean_abs_preservation: f64,
    /// Mean over triplets of `||M v - sigma u||_2`.
    pub mean_full_gap: f64,
    pub triplet_count: usize,
}

/// Preservation of every bundle's triplets under the unscaled `merged` delta.
pub fn preservation(
    merged: &DMatrix<f64>,
    bundles: &[SvdBundle],
    layer: &str,
    method: &str,
) -> Result<Vec<PreservationRecord>> {
    let mut out = Vec::with_capacity(bundles.len());
    for b in bundles {
        if b.shape != merged.shape() {
            return Err(Error::Shape(format!(
                "{layer}: task {} has shape {:?}, merged matrix is {:?}",
                b.task_id,
                b.shape,
                merged.shape()
            )));
        }
        let mut abs_sum = 0.0;
        let mut gap_sum = 0.0;
        for (k, sigma) in b.sigmas.iter().enumerate() {
            let feature = b.left.column(k) * *sigma;
            let gap = merged * b.right.column(k) - &feature;
            abs_sum += feature.dot(&gap).abs();
            gap_sum += gap.norm();
        }
        let count = b.rank();
        let mean = |s: f64| if count == 0 { 0.0 } else { s / count as f64 };
        out.push(PreservationRecord {
            method: method.into(),
            layer: layer.into(),
            task_id: b.task_id.clone(),
            mean_abs_preservation: mean(abs_sum),
            mean_full_gap: mean(gap_sum),
            triplet_count: count,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationTarget {
    Smallest,
    Largest,
}

impl FromStr for AblationTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smallest" => Ok(AblationTarget::Smallest),
            "largest" => Ok(AblationTarget::Largest),
            _ => Err(Error::Config(format!("unknown ablation target `{s}`"))),
        }
    }
}

impl AblationTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationTarget::Smallest => "smallest",
            AblationTarget::Largest => "largest",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationSpec {
    pub target: AblationTarget,
    pub remove_fraction: f64,
}

impl AblationSpec {
    pub fn new(target: AblationTarget, remove_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&remove_fraction) {
            return Err(Error::Config(format!("ablation fraction must lie in [0, 1), got {remove_fraction}")));
        }
        Ok(Self { target, remove_fraction })
    }

    /// `floor(remove_fraction * rank)`.
    pub fn removed(&self, rank: usize) -> usize {
        libm::floor(self.remove_fraction * rank as f64) as usize
    }
}

/// Drops triplets from one end of the spectrum.
pub fn ablate_singulars(bundle: &SvdBundle, spec: AblationSpec) -> SvdBundle {
    let r = bundle.rank();
    let drop = spec.removed(r).min(r);
    match spec.target {
        AblationTarget::Smallest => bundle.select(0..r - drop),
        AblationTarget::Largest => bundle.select(drop..r),
    }
}

/// Relative Frobenius change of the merged matrix when every bundle is
/// ablated by `spec` before merging.
pub fn ablation_error(bundles: &[SvdBundle], spec: AblationSpec, solver_tol: f64) -> Result<f64> {
    let Some(first) = bundles.first() else {
        return Ok(0.0);
    };
    let shape = first.shape;
    let full = merge_bundles("", bundles, shape, solver_tol)?.delta;
    let ablated: Vec<SvdBundle> = bundles.iter().map(|b| ablate_singulars(b, spec)).collect();
    let cut = merge_bundles("", &ablated, shape, solver_tol)?.delta;
    let norm = full.norm();
    Ok(if norm == 0.0 { 0.0 } else { (cut - full).norm() / norm })
}
