#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use superpose::store::{write_checkpoint, WriteOptions};
use superpose::{Checkpoint, CheckpointSet, TaskInput, TensorRecord};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

pub fn record(name: &str, shape: &[usize], data: Vec<f32>) -> TensorRecord {
    TensorRecord::new(name, shape.to_vec(), data).unwrap()
}

pub fn write(dir: &Path, file: &str, records: Vec<TensorRecord>) -> PathBuf {
    let path = dir.join(file);
    write_checkpoint(&path, records, WriteOptions::default()).unwrap();
    path
}

pub fn open_set(base: &Path, tasks: &[PathBuf]) -> CheckpointSet {
    let tasks =
        tasks.iter().enumerate().map(|(i, p)| TaskInput::full(format!("t{i}"), Checkpoint::open(p).unwrap())).collect();
    CheckpointSet::new(Checkpoint::open(base).unwrap(), tasks).unwrap()
}

/// `||a - b|| / max(||b||, tiny)`.
pub fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum();
    let norm: f64 = b.iter().map(|y| f64::from(*y).powi(2)).sum();
    (diff / norm.max(1e-300)).sqrt()
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn read(path: &Path, name: &str) -> Vec<f32> {
    Checkpoint::open(path).unwrap().read(name).unwrap().data
}

/// Writes a one-tensor base `w` and one task checkpoint per delta.
pub fn write_layer_set(
    dir: &Path,
    base: &superpose_core::DMatrix<f64>,
    deltas: &[superpose_core::DMatrix<f64>],
) -> (PathBuf, Vec<PathBuf>) {
    let shape = [base.nrows(), base.ncols()];
    let row_major = |m: &superpose_core::DMatrix<f64>| -> Vec<f32> {
        let t = m.transpose();
        t.iter().map(|v| *v as f32).collect()
    };
    let pre = write(dir, "pre.st", vec![record("w", &shape, row_major(base))]);
    let tasks = deltas
        .iter()
        .enumerate()
        .map(|(i, d)| write(dir, &format!("t{i}.st"), vec![record("w", &shape, row_major(&(base + d)))]))
        .collect();
    (pre, tasks)
}
