use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn h2t(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h2t"))
        .args(args)
        .env("H2T_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn quick_config(dir: &Path, in_dims: usize) -> String {
    let text = format!(
        r#"
[dataset]
classes = 6
n_max = 60
rho = 10.0
in_dims = {in_dims}
separation = 3.0
test_per_class = 10
seed = 0

[backbone]
kind = "mlp"
in_dims = {in_dims}
hidden = [16]
feature_dim = 8

[schedule]
stage1_epochs = 4
stage2_epochs = 2
batch_size = 16

[splits]
head_threshold = 40
tail_threshold = 10
"#
    );
    let path = dir.join(format!("quick{in_dims}.toml"));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn train_then_stage2_only_then_diagnose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 2);
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let stdout = ok(&h2t(&["train", "--config", &cfg, "--out", run_s]));
    assert!(stdout.starts_with("head,medium,tail,all"));
    for f in [
        "stage1.ckpt",
        "stage2.ckpt",
        "metrics.csv",
        "metrics.json",
        "MANIFEST",
        "config.toml",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let resumed = tmp.path().join("resumed");
    let ckpt = run.join("stage1.ckpt");
    ok(&h2t(&[
        "train",
        "--config",
        &cfg,
        "--out",
        resumed.to_str().unwrap(),
        "--stage2-only",
        "--from",
        ckpt.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(run.join("stage2.ckpt")).unwrap(),
        fs::read(resumed.join("stage2.ckpt")).unwrap()
    );

    ok(&h2t(&["diagnose", "--run", run_s]));
    let diag = run.join("diagnostics");
    for f in [
        "histogram_stage1.csv",
        "histogram_stage2.csv",
        "boundary.csv",
        "boundary.svg",
        "rationale.csv",
    ] {
        assert!(diag.join(f).exists(), "{f} missing");
    }
    for stage in ["stage1", "stage2"] {
        let csv = fs::read_to_string(diag.join(format!("histogram_{stage}.csv"))).unwrap();
        let total: f64 = csv
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .sum();
        assert!(
            (total - 1.0).abs() <= 1e-9,
            "{stage} histogram sums to {total}"
        );
    }
}

#[test]
fn diagnose_skips_boundary_for_high_dimensional_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 5);
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&h2t(&["train", "--config", &cfg, "--out", run_s]));
    let stdout = ok(&h2t(&["diagnose", "--run", run_s]));
    assert!(stdout.contains("boundary grid skipped"));
    assert!(!run.join("diagnostics/boundary.csv").exists());
    assert!(run.join("diagnostics/embeddings_test.h2t").exists());
}

#[test]
fn sweeps_write_one_row_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 2);
    let out = tmp.path().join("sweep");
    let stdout = ok(&h2t(&[
        "sweep-p",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--p",
        "0,0.5,1",
        "--seeds",
        "0,1",
        "--jobs",
        "2",
    ]));
    assert!(stdout.starts_with("p,seed,head,med,tail,all"));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 3);

    let out = tmp.path().join("sampler");
    ok(&h2t(&[
        "ablate-sampler",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--kinds",
        "rs,cb,is",
        "--seeds",
        "0",
    ]));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.contains("BS+RS") && csv.contains("BS+IS"));

    let out = tmp.path().join("selection");
    ok(&h2t(&[
        "ablate-selection",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "0,1",
    ]));
    assert!(out.join("MANIFEST").exists());
}

#[test]
fn gen_data_writes_partition() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 2);
    let out = tmp.path().join("data");
    let stdout = ok(&h2t(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("counts [60,"), "{stdout}");
    assert!(out.join("partition.json").exists());
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path(), 2);
    let bad = tmp.path().join("bad.toml");
    fs::write(
        &bad,
        fs::read_to_string(&cfg).unwrap() + "\n[fusion]\np = 1.5\n",
    )
    .unwrap();
    let out = h2t(&[
        "train",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fusion.p"));

    let unknown = tmp.path().join("unknown.toml");
    fs::write(
        &unknown,
        fs::read_to_string(&cfg).unwrap() + "\n[fusion]\nratio = 0.3\n",
    )
    .unwrap();
    let out = h2t(&["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = h2t(&[
        "ablate-sampler",
        "--config",
        &cfg,
        "--kinds",
        "bogus",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = h2t(&[
        "diagnose",
        "--run",
        tmp.path().join("nothing").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stage2_only_requires_a_checkpoint() {
    let out = h2t(&["train", "--stage2-only"]);
    assert!(!out.status.success());
}
