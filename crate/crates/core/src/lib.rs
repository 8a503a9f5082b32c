//! Training-free merging of fine-tuned checkpoints by superposing the
//! task-specific features of each linear layer.
//!
//! Every linear layer's task matrix (fine-tuned minus pre-trained weights) is
//! decomposed into singular triplets `(sigma, u, v)`. The merged task matrix is
//! a weighted sum `M = sum alpha * u v^T` over all tasks' triplets, with the
//! weights chosen so that `<sigma u, M v - sigma u> = 0` holds for every
//! triplet. Those conditions form the `r x r` system `(U o V) alpha = sigma`
//! where `U` and `V` are the Gram matrices of the left and right singular
//! vectors and `o` is the elementwise product.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the checkpoint
//! pipeline and the command line live in the `superpose` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod stf;

pub use diagnostics::{
    ablate_singulars, ablation_error, preservation, AblationSpec, AblationTarget, PreservationRecord,
};
pub use error::{Error, Result};
pub use linalg::{gram, hadamard, solve_sym, truncated_svd, SvdBundle};
pub use merge::{
    trim, trim_in_place, Baseline, BaselineMerger, LayerMerger, LayerOutcome, MergeConfig, MergeMode, ParamRole,
};
pub use stf::{
    assemble_system, merge_bundles, oracle_check, recompose, stf_merge, superposition_residuals, MergeSystem,
    MergedTaskMatrix, StfAccumulator, TaskMatrix, TripletResidual,
};

pub use nalgebra::{DMatrix, DVector};
