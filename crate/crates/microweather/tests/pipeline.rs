//! End-to-end smoke test of the command-line surface: every subcommand
//! runs once against a small synthetic dataset, and the error paths keep
//! their exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mwx")
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = run(args);
    assert_eq!(code, 0, "{:?} failed:\n{}", args, stderr);
    stdout
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

#[test]
fn cli_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let dir = |name: &str| -> PathBuf { root.path().join(name) };

    let cfg = dir("cfg");
    std::fs::write(
        &cfg,
        "# small world, small model\n\
         n_backbone=12\nn_train=6\nn_val=3\nn_test=3\nnlat=4\nnlon=4\nt_steps=48\n\
         d_latent=12\nn_heads=3\nn_layers_self=1\nn_layers_cross=1\n\
         location_encoding_degree=2\nmlp_hidden=8\n\
         lr0=0.003\nsteps=60\ntimestamps_per_step=8\nstations_per_timestamp=6\neval_every=20\n\
         origin_lat=40.55\norigin_lon=-104.6\npixel_size_m=50\ntile_width=8\ntile_height=8\n",
    )
    .unwrap();
    let cfg = p(&cfg);

    let data = p(&dir("data"));
    ok(&["synth", "--config", &cfg, "--out", &data]);
    for f in ["stations.csv", "coarse.csv", "surface.csv", "partition.json", "world.json", "manifest.json"] {
        assert!(Path::new(&data).join(f).exists(), "synth did not write {f}");
    }

    // Re-validate and gap-fill; the synthetic dataset is already dense on
    // the coarse axis so this is mostly a schema round-trip.
    let ingested = p(&dir("ingested"));
    ok(&["ingest", "--data", &data, "--out", &ingested]);
    assert!(Path::new(&ingested).join("ingest_report.json").exists());

    // Fresh role assignment with the same station pool.
    let parted = p(&dir("parted"));
    ok(&["partition", "--data", &data, "--seed", "7", "--out", &parted]);
    assert!(Path::new(&parted).join("partition.json").exists());

    let rundir = p(&dir("run"));
    ok(&["train", "--data", &data, "--config", &cfg, "--surface", "embedding", "--out", &rundir]);
    let ckpt = format!("{rundir}/checkpoint.mwx");
    assert!(Path::new(&ckpt).exists());
    let summary = std::fs::read_to_string(format!("{rundir}/train_summary.json")).unwrap();
    assert!(summary.contains("best_val_loss"));

    let eval = p(&dir("eval"));
    ok(&["evaluate", "--data", &data, "--checkpoint", &ckpt, "--name", "tiny", "--out", &eval]);
    let metrics = std::fs::read_to_string(format!("{eval}/metrics.csv")).unwrap();
    assert!(metrics.starts_with("model,variable,metric,value,n"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("tiny,")).count(), 12);

    let base = p(&dir("base"));
    ok(&["baseline", "--data", &data, "--out", &base]);
    let metrics = std::fs::read_to_string(format!("{base}/metrics.csv")).unwrap();
    for model in ["era5,", "station_rbf,"] {
        assert_eq!(metrics.lines().filter(|l| l.starts_with(model)).count(), 12, "{model} rows");
    }

    let ablate = p(&dir("ablate"));
    ok(&["ablate", "--data", &data, "--model", &format!("tiny={ckpt}"), "--out", &ablate]);
    let metrics = std::fs::read_to_string(format!("{ablate}/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 12);

    let pt = p(&dir("pt"));
    let stdout = ok(&[
        "infer-point", "--data", &data, "--checkpoint", &ckpt, "--lat", "40.6", "--lon", "-104.5",
        "--out", &pt,
    ]);
    assert!(stdout.contains("temp"), "point output missing header: {stdout}");
    assert!(Path::new(&pt).join("point.csv").exists());

    let tile = p(&dir("tile"));
    ok(&["infer-tile", "--data", &data, "--checkpoint", &ckpt, "--config", &cfg, "--out", &tile]);
    assert!(Path::new(&tile).join("field.f32").exists());
    let header = std::fs::read_to_string(format!("{tile}/field.json")).unwrap();
    assert!(header.contains("checkpoint_sha256"));

    let report = ok(&["report", "--run", &eval]);
    assert!(report.contains("metrics.csv") && report.contains("tiny,"));

    // Error paths keep their exit codes: usage errors are 1, missing or
    // unreadable inputs are 2.
    let (code, _, stderr) = run(&["evaluate", "--data", &data, "--checkpoint",
        &format!("{rundir}/nope.mwx"), "--out", &p(&dir("e1"))]);
    assert_eq!(code, 2, "missing checkpoint: {stderr}");
    assert!(stderr.contains("nope.mwx"), "stderr should name the path: {stderr}");

    let (code, _, _) = run(&["train", "--data", &data, "--bogus-flag", "--out", &p(&dir("e2"))]);
    assert_eq!(code, 1);

    let badcfg = dir("badcfg");
    std::fs::write(&badcfg, "no_such_key=1\n").unwrap();
    let (code, _, stderr) = run(&["synth", "--config", &p(&badcfg), "--out", &p(&dir("e3"))]);
    assert_eq!(code, 1, "unknown config key: {stderr}");

    let (code, _, stderr) = run(&[
        "infer-point", "--data", &data, "--checkpoint", &ckpt, "--lat", "10.0", "--lon", "0.0",
        "--out", &p(&dir("e4")),
    ]);
    assert_eq!(code, 2, "out-of-coverage point: {stderr}");
}
