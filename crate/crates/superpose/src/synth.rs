//! Seeded synthetic task matrices and transformer-shaped checkpoints.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use superpose_core::DMatrix;

use crate::error::Result;
use crate::store::{write_checkpoint, TensorRecord, WriteOptions};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormal basis of `sqrt(overlap) * shared + sqrt(1 - overlap) * G`.
fn mixed_basis(rng: &mut ChaCha8Rng, shared: &DMatrix<f64>, overlap: f64) -> DMatrix<f64> {
    let private = gaussian(rng, shared.nrows(), shared.ncols());
    let mixed = shared * overlap.sqrt() + private * (1.0 - overlap).sqrt();
    mixed.qr().q()
}

/// Random task matrices with prescribed rank and subspace overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub tasks: usize,
    /// 0 draws every task's singular subspaces independently; 1 gives all
    /// tasks the same subspaces.
    pub overlap: f64,
    /// `Some(rho)` sets `sigma_k = rho^k`; `None` draws sigmas from `[0.5, 2)`.
    pub decay: Option<f64>,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self { rows: 8, cols: 8, rank: 2, tasks: 2, overlap: 0.5, decay: None, seed: 0 }
    }
}

pub fn synthetic_task_matrices(spec: &TaskSpec) -> Vec<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rank = spec.rank.min(spec.rows).min(spec.cols);
    let overlap = spec.overlap.clamp(0.0, 1.0);
    let shared_u = gaussian(&mut rng, spec.rows, rank);
    let shared_v = gaussian(&mut rng, spec.cols, rank);
    (0..spec.tasks)
        .map(|_| {
            let u = mixed_basis(&mut rng, &shared_u, overlap);
            let v = mixed_basis(&mut rng, &shared_v, overlap);
            let mut sigmas: Vec<f64> = match spec.decay {
                Some(rho) => (0..rank).map(|k| rho.powi(k as i32)).collect(),
                None => (0..rank).map(|_| rng.random_range(0.5..2.0)).collect(),
            };
            sigmas.sort_by(|a, b| b.total_cmp(a));
            let mut scaled = u.columns(0, rank).into_owned();
            for (k, s) in sigmas.iter().enumerate() {
                scaled.column_mut(k).scale_mut(*s);
            }
            scaled * v.columns(0, rank).transpose()
        })
        .collect()
}

/// A small transformer-shaped checkpoint family: one base and `tasks`
/// fine-tuned variants.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerSpec {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub tasks: usize,
    /// Rank of the structured part of each linear delta.
    pub delta_rank: usize,
    pub delta_scale: f64,
    /// Standard deviation of dense noise added to every delta.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self {
            layers: 12,
            hidden: 64,
            ffn: 256,
            vocab: 128,
            tasks: 3,
            delta_rank: 4,
            delta_scale: 0.05,
            noise: 0.002,
            seed: 0,
        }
    }
}

fn layout(spec: &TransformerSpec) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (spec.hidden, spec.ffn);
    let mut out = vec![("embed_tokens.weight".to_string(), vec![spec.vocab, h])];
    for l in 0..spec.layers {
        let p = format!("layers.{l}");
        for proj in ["q", "k", "v", "o"] {
            out.push((format!("{p}.attn.{proj}.weight"), vec![h, h]));
        }
        out.push((format!("{p}.attn.o.bias"), vec![h]));
        out.push((format!("{p}.attn_norm.weight"), vec![h]));
        out.push((format!("{p}.ffn.wi.weight"), vec![f, h]));
        out.push((format!("{p}.ffn.wi.bias"), vec![f]));
        out.push((format!("{p}.ffn.wo.weight"), vec![h, f]));
        out.push((format!("{p}.ffn_norm.weight"), vec![h]));
        out.push((format!("{p}.ffn_norm.bias"), vec![h]));
    }
    out.push(("final_norm.weight".to_string(), vec![h]));
    out
}

fn to_record(name: &str, shape: &[usize], values: impl Iterator<Item = f64>) -> TensorRecord {
    let data: Vec<f32> = values.map(|v| v as f32).collect();
    TensorRecord::new(name, shape.to_vec(), data).expect("layout is consistent")
}

/// Base tensors and, per task, the fine-tuned tensors.
pub fn synthetic_transformer(spec: &TransformerSpec) -> (Vec<TensorRecord>, Vec<Vec<TensorRecord>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let layout = layout(spec);
    let mut base_values: Vec<Vec<f64>> = Vec::with_capacity(layout.len());
    for (name, shape) in &layout {
        let n: usize = shape.iter().product();
        let values = if name.contains("norm.weight") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            let std = 1.0 / (shape[1] as f64).sqrt();
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        base_values.push(values);
    }
    let base = layout.iter().zip(&base_values).map(|((n, s), v)| to_record(n, s, v.iter().copied())).collect();

    let tasks = (0..spec.tasks)
        .map(|_| {
            layout
                .iter()
                .zip(&base_values)
                .map(|((name, shape), base)| {
                    let delta: Vec<f64> = if shape.len() == 2 {
                        let lr = gaussian(&mut rng, shape[0], spec.delta_rank)
                            * gaussian(&mut rng, spec.delta_rank, shape[1])
                            * (spec.delta_scale / (spec.delta_rank as f64).sqrt());
                        let mut row_major = Vec::with_capacity(base.len());
                        for i in 0..shape[0] {
                            for j in 0..shape[1] {
                                row_major.push(lr[(i, j)] + spec.noise * rng.sample::<f64, _>(StandardNormal));
                            }
                        }
                        row_major
                    } else {
                        (0..base.len()).map(|_| spec.delta_scale * rng.sample::<f64, _>(StandardNormal)).collect()
                    };
                    to_record(name, shape, base.iter().zip(delta).map(|(b, d)| b + d))
                })
                .collect()
        })
        .collect();
    (base, tasks)
}

/// Writes `base.safetensors` and `task{i}.safetensors` into `dir`.
pub fn write_synthetic_transformer(dir: impl AsRef<Path>, spec: &TransformerSpec) -> Result<(PathBuf, Vec<PathBuf>)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let (base, tasks) = synthetic_transformer(spec);
    let base_path = dir.join("base.safetensors");
    write_checkpoint(&base_path, base, WriteOptions::default())?;
    let mut task_paths = Vec::new();
    for (i, t) in tasks.into_iter().enumerate() {
        let p = dir.join(format!("task{i}.safetensors"));
        write_checkpoint(&p, t, WriteOptions::default())?;
        task_paths.push(p);
    }
    Ok((base_path, task_paths))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_matrices_have_requested_rank_and_spectrum() {
        let spec = TaskSpec { rows: 10, cols: 7, rank: 3, tasks: 2, decay: Some(0.5), ..TaskSpec::default() };
        let ms = synthetic_task_matrices(&spec);
        assert_eq!(ms.len(), 2);
        let s = ms[0].clone().svd(false, false).singular_values;
        let mut s: Vec<f64> = s.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!((s[0] - 1.0).abs() < 1e-10 && (s[1] - 0.5).abs() < 1e-10 && (s[2] - 0.25).abs() < 1e-10);
        assert!(s[3] < 1e-10);
    }

    #[test]
    fn full_overlap_shares_subspaces() {
        let spec = TaskSpec { overlap: 1.0, rank: 2, ..TaskSpec::default() };
        let ms = synthetic_task_matrices(&spec);
        // identical column spaces: stacking both keeps rank 2
        let stacked = DMatrix::from_fn(8, 16, |i, j| if j < 8 { ms[0][(i, j)] } else { ms[1][(i, j - 8)] });
        let s = stacked.svd(false, false).singular_values;
        assert_eq!(s.iter().filter(|x| **x > 1e-9).count(), 2);
    }

    #[test]
    fn transformer_layout_is_seeded() {
        let spec = TransformerSpec { layers: 2, hidden: 8, ffn: 16, vocab: 10, tasks: 2, ..TransformerSpec::default() };
        let (base, tasks) = synthetic_transformer(&spec);
        assert_eq!(base.len(), 1 + 2 * 11 + 1);
        assert_eq!(tasks.len(), 2);
        assert_eq!(synthetic_transformer(&spec).1, tasks);
        assert!(base.iter().zip(&tasks[0]).all(|(b, t)| b.shape == t.shape && b.name == t.name));
    }
}
