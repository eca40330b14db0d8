use labelsynth::harness::{run_ablation, run_longtail, ExperimentConfig, Session};

const TINY: &str = "\
seed = 11
[pool]
size = 4
[encoder]
pairs = 64
epochs = 2
[inversion]
iterations = 3
[label_generator]
members = 2
pixels_per_image = 64
epochs = 1
[synthesis]
n = 4
[downstream]
epochs = 1
pixels_per_image = 16
[evaluation]
test_size = 2
rare_bias = 1.0
";

#[test]
fn ablation_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&format!(
        "{TINY}[sweep]\naxis = mlp_widths\nvalues = 8,4; 16,8\n"
    ))
    .unwrap();
    let table = run_ablation(&cfg, dir.path(), &Session::default()).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.column("value").unwrap(), vec!["\"8,4\"", "\"16,8\""]);
    let hashes = table.column("config_hash").unwrap();
    assert_ne!(hashes[0], hashes[1]);
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv, table.to_csv());
}

#[test]
fn unknown_axis_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&format!(
        "{TINY}[sweep]\naxis = learning_rate\nvalues = 1;2\n"
    ));
    let err = match cfg {
        Ok(c) => run_ablation(&c, dir.path(), &Session::default()).unwrap_err(),
        Err(e) => e,
    };
    assert!(err.is_config());
}

#[test]
fn addition_sweep_pairs_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg =
        ExperimentConfig::parse(&format!("{TINY}[longtail]\nmode = add\ncounts = 1,2\n")).unwrap();
    let table = run_longtail(&cfg, dir.path(), &Session::default()).unwrap();
    assert_eq!(
        table.column("arm").unwrap(),
        vec!["+rare", "-rare", "+rare", "-rare"]
    );
    assert_eq!(table.column("value").unwrap(), vec!["1", "1", "2", "2"]);
}

#[test]
fn longtail_needs_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&format!("task = depth\n{TINY}")).unwrap();
    assert!(run_longtail(&cfg, dir.path(), &Session::default())
        .unwrap_err()
        .is_config());
}
