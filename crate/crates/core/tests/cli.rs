use std::path::Path;
use std::process::Command;

use labelsynth::hoff::{Archive, Tensor};

const TINY: &str = "\
seed = 5
[pool]
size = 4
[encoder]
pairs = 64
epochs = 2
[inversion]
iterations = 4
[label_generator]
members = 2
pixels_per_image = 64
epochs = 2
[synthesis]
n = 6
[downstream]
epochs = 1
pixels_per_image = 32
[evaluation]
test_size = 3
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_labelsynth"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("config.txt");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[scene]\nnot_a_key = 3\n");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn invalid_value_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[synthesis]\nfilter_fraction = 1.5\n");
    let status = bin()
        .args(["synthesize", "--model", "missing.hoffa", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["evaluate", "--model"])
        .arg(dir.path().join("absent.hoffa"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(1));
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |args: &[&str], out: &Path| {
        let status = bin()
            .args(args)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap()
            .status;
        assert!(status.success(), "{args:?} failed");
    };

    let inv = dir.path().join("inv");
    run(&["invert", "--iterations", "3", "--c-reg", "0.4"], &inv);
    let traj = Tensor::read(&inv.join("trajectories.hoff")).unwrap();
    assert_eq!(traj.dims(), &[4, 4]);
    let t = traj.as_f32().unwrap();
    for row in t.chunks(4) {
        assert!(row.windows(2).all(|w| w[1] <= w[0]));
    }
    assert_eq!(
        Tensor::read(&inv.join("latents.hoff")).unwrap().dims(),
        &[4, 24]
    );

    let lg = dir.path().join("lg");
    run(&["train-labelgen"], &lg);
    let model = lg.join("label_generator.hoffa");
    assert!(Archive::read(&model).is_ok());

    let data = dir.path().join("data");
    run(&["synthesize", "--model", model.to_str().unwrap()], &data);
    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    assert_eq!(
        manifest.lines().filter(|l| !l.starts_with('#')).count(),
        1 + 5
    );

    let ds = dir.path().join("ds");
    run(
        &[
            "train-downstream",
            "--manifest",
            data.join("manifest.csv").to_str().unwrap(),
        ],
        &ds,
    );
    let eval = dir.path().join("eval");
    run(
        &[
            "evaluate",
            "--model",
            ds.join("downstream.hoffa").to_str().unwrap(),
        ],
        &eval,
    );
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("image,miou,iou_class_0"));
    assert_eq!(metrics.lines().count(), 1 + 3 + 1);

    let views = dir.path().join("views");
    run(
        &[
            "export-views",
            "--model",
            model.to_str().unwrap(),
            "--count",
            "2",
        ],
        &views,
    );
    for name in [
        "label_0000.png",
        "uncertainty_0000.png",
        "label_0001.png",
        "uncertainty_0001.png",
    ] {
        assert!(views.join(name).exists(), "{name}");
    }
}

#[test]
fn run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let status = bin()
            .arg("run")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    }
    for file in [
        "metrics.csv",
        "config.txt",
        "dataset/manifest.csv",
        "label_generator.hoffa",
        "downstream.hoffa",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
}
