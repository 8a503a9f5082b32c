mod common;

use common::*;
use superpose::report::{ablation_report, method_config, preservation_report};
use superpose::roles::RoleRules;
use superpose::synth::{synthetic_task_matrices, TaskSpec};
use superpose::Error;
use superpose_core::{AblationSpec, AblationTarget, DMatrix, MergeConfig};

fn methods(names: &[&str]) -> Vec<(String, MergeConfig)> {
    names.iter().map(|m| (m.to_string(), method_config(m, MergeConfig::identity()).unwrap())).collect()
}

#[test]
fn stf_preserves_best_on_overlapping_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let spec = TaskSpec { rows: 8, cols: 8, rank: 2, tasks: 2, overlap: 0.6, decay: None, seed: 11 };
    let deltas = synthetic_task_matrices(&spec);
    let base = DMatrix::from_fn(8, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin());
    let (pre, tasks) = write_layer_set(dir.path(), &base, &deltas);
    let report =
        preservation_report(&open_set(&pre, &tasks), &RoleRules::default(), &methods(&["stf", "average", "ta"]))
            .unwrap();
    assert_eq!(report.methods.len(), 3);
    let value = |m: &str| report.summary(m).unwrap().mean_abs_preservation;
    assert!(value("stf") < value("average") && value("stf") < value("ta"));
    assert_eq!(report.rows.len(), 6);
    assert_eq!(report.to_csv().lines().next().unwrap(), "method,layer,task,mean_abs_preservation,mean_full_gap");
}

#[test]
fn single_task_stf_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = TaskSpec { tasks: 1, ..TaskSpec::default() };
    let deltas = synthetic_task_matrices(&spec);
    let (pre, tasks) = write_layer_set(dir.path(), &DMatrix::zeros(8, 8), &deltas);
    let report = preservation_report(&open_set(&pre, &tasks), &RoleRules::default(), &methods(&["stf"])).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(report.rows[0].mean_abs_preservation < 1e-6);
}

#[test]
fn method_list_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (pre, tasks) = write_layer_set(dir.path(), &DMatrix::zeros(2, 2), &[DMatrix::identity(2, 2)]);
    let set = open_set(&pre, &tasks);
    assert!(matches!(preservation_report(&set, &RoleRules::default(), &[]), Err(Error::Config(_))));
    assert!(matches!(
        preservation_report(&set, &RoleRules::default(), &methods(&["stf", "stf"])),
        Err(Error::Config(_))
    ));
    assert!(matches!(method_config("ties", MergeConfig::default()), Err(Error::Config(_))));
    assert!(matches!(method_config("none", MergeConfig::default()), Err(Error::Config(_))));
}

#[test]
fn ablation_rows_follow_the_specs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = TaskSpec { rows: 24, cols: 24, rank: 20, tasks: 2, overlap: 0.3, decay: Some(0.8), seed: 2 };
    let deltas = synthetic_task_matrices(&spec);
    let (pre, tasks) = write_layer_set(dir.path(), &DMatrix::zeros(24, 24), &deltas);
    let specs = [
        AblationSpec::new(AblationTarget::Smallest, 0.5).unwrap(),
        AblationSpec::new(AblationTarget::Largest, 0.05).unwrap(),
        AblationSpec::new(AblationTarget::Largest, 0.0).unwrap(),
    ];
    let report =
        ablation_report(&open_set(&pre, &tasks), &RoleRules::default(), MergeConfig::identity(), &specs).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows[0].mean_relative_error < report.rows[1].mean_relative_error);
    assert!(report.rows[2].mean_relative_error < 1e-12);
    assert!(report.rows[2].mean_abs_preservation < 1e-6);
    assert_eq!(report.to_csv().lines().count(), 4);
}
