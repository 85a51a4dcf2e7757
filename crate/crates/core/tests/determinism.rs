use cstr_validation::determinism::{
    checkpoint_reproduces_metrics, csv_outputs_repeat, dataset_roundtrip, small_config,
};

#[test]
fn identical_runs_write_identical_csvs() {
    csv_outputs_repeat(&small_config()).unwrap();
}

#[test]
fn dataset_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    dataset_roundtrip(dir.path(), &small_config()).unwrap();
}

#[test]
fn checkpoints_reproduce_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    checkpoint_reproduces_metrics(dir.path(), &small_config()).unwrap();
}
