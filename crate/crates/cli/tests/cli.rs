use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lflow::io;
use serde_json::Value;

fn lflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lflow")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let o = lflow(args);
    assert_eq!(code(&o), 0, "lflow {args:?} failed:\n{}", stderr(&o));
    o
}

fn fails_with(args: &[&str], expected: i32) -> String {
    let o = lflow(args);
    let err = stderr(&o);
    assert_eq!(code(&o), expected, "lflow {args:?}:\n{err}");
    assert!(err.lines().any(|l| l == format!("error_code={expected}")), "{err}");
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn exact_plaquette_matches_oracle() {
    let o = ok(&["exact", "--beta", "6", "--lx", "8", "--ly", "8"]);
    let v: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!((v - 0.912454914876674).abs() < 1e-12, "{v}");
    let o = ok(&["exact", "--beta", "2", "--lx", "4", "--ly", "4"]);
    let v: f64 = String::from_utf8(o.stdout).unwrap().trim().parse().unwrap();
    assert!((v - 0.6992519268177046).abs() < 1e-12, "{v}");
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "beta = 2\nstep = 0.1\n").unwrap();
    let err = fails_with(&["hmc", "--config", p(&cfg), "--obs", "x.csv"], 2);
    assert!(err.contains("unknown key `step`"), "{err}");
    fails_with(&["hmc", "--bogus", "1"], 2);
    fails_with(&["hmc", "--beta", "2"], 2);
    fails_with(&["hmc", "--beta", "-1", "--obs", "x.csv"], 2);
    fails_with(&["exact", "--beta", "six"], 2);
    fails_with(&["train", "--estimator", "magic", "--out_dir", p(dir.path())], 2);
}

#[test]
fn input_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    fails_with(&["analyze", "--obs", p(&missing)], 3);
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "traj,action,avg_plaq,charge,dH,accept\n0,1.0,0.5,zero,0.1,1\n").unwrap();
    fails_with(&["analyze", "--obs", p(&bad)], 3);
    let ck = dir.path().join("junk.lfck");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    fails_with(&["fthmc", "--checkpoint", p(&ck), "--obs", p(&dir.path().join("o.csv"))], 3);
}

#[test]
fn numerical_failure_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("o.csv");
    fails_with(&["hmc", "--lx", "4", "--ly", "4", "--eps", "1e308", "--nlf", "3", "--ntraj", "2", "--start", "random", "--obs", p(&obs)], 4);
}

#[test]
fn analyze_flags_a_frozen_charge() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("frozen.csv");
    let mut text = String::from("traj,action,avg_plaq,charge,dH,accept\n");
    for i in 0..200 {
        text.push_str(&format!("{i},10.0,{},0,0.01,1\n", 0.9 + 0.01 * ((i * 7) % 5) as f64));
    }
    std::fs::write(&csv, &text).unwrap();
    let before = std::fs::read(&csv).unwrap();
    let out = dir.path().join("summary.json");
    ok(&["analyze", "--obs", p(&csv), "--out", p(&out)]);
    let s: Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(s["tunneling_rate"], 0.0);
    assert!(s["tau_int_Q"].is_null());
    assert!(s["flags"].as_array().unwrap().iter().any(|f| f == "frozen observable: Q"));
    assert!(s["beta"].is_null() && s["ess"].is_null());
    assert_eq!(s["n_traj"], 200);
    assert_eq!(std::fs::read(&csv).unwrap(), before, "analyze must not touch its input");
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn hmc_outputs_manifest_and_bitwise_replay() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.csv");
    let ens = dir.path().join("ens.lflow");
    ok(&[
        "hmc", "--beta", "2", "--lx", "4", "--ly", "6", "--ntraj", "50", "--seed", "9", "--obs", p(&obs), "--out",
        p(&ens), "--save_every", "5",
    ]);
    let (header, configs) = io::read_ensemble(&ens).unwrap();
    assert_eq!((header.geom.lx(), header.geom.ly(), header.beta), (4, 6, 2.0));
    assert_eq!(configs.len(), 10);
    assert_eq!(io::read_observables_file(&obs, 0).unwrap().len(), 50);

    let manifest_path = dir.path().join("obs.csv.manifest.json");
    let m: Value = serde_json::from_slice(&read(&manifest_path)).unwrap();
    assert_eq!(m["command"], "hmc");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["ly"], "6");
    assert!(m["input_checkpoint_hash"].is_null());
    assert!(dir.path().join("ens.lflow.manifest.json").exists());

    let (obs1, ens1) = (read(&obs), read(&ens));
    std::fs::remove_file(&obs).unwrap();
    std::fs::remove_file(&ens).unwrap();
    ok(&["replay", p(&manifest_path)]);
    assert_eq!(read(&obs), obs1);
    assert_eq!(read(&ens), ens1);
}

#[test]
fn chains_fan_out_to_tagged_files() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.csv");
    ok(&["hmc", "--lx", "4", "--ly", "4", "--ntraj", "30", "--chains", "3", "--obs", p(&obs)]);
    let files: Vec<PathBuf> = (0..3).map(|k| dir.path().join(format!("obs.chain{k}.csv"))).collect();
    let contents: Vec<Vec<u8>> = files.iter().map(|f| read(f)).collect();
    assert_ne!(contents[0], contents[1]);
    assert!(!obs.exists());

    // chain k of a fan-out equals a single run on stream k
    let single = dir.path().join("single.csv");
    let records = io::read_observables_file(&files[0], 0).unwrap();
    ok(&["hmc", "--lx", "4", "--ly", "4", "--ntraj", "30", "--obs", p(&single)]);
    assert_eq!(io::read_observables_file(&single, 0).unwrap(), records);

    let joined = files.iter().map(|f| p(f)).collect::<Vec<_>>().join(",");
    let out = dir.path().join("s.json");
    ok(&["analyze", "--obs", &joined, "--out", p(&out)]);
    let s: Value = serde_json::from_slice(&read(&out)).unwrap();
    assert_eq!(s["n_chains"], 3);
    assert_eq!(s["n_traj"], 90);
    assert_eq!(s["beta"], 2.0);
    assert_eq!(s["lx"], 4);
}

#[test]
fn train_resume_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    let common = ["--lx", "4", "--ly", "4", "--batch_size", "8", "--n_layers", "2", "--hidden_channels", "4", "--seed", "3"];
    let mut args = vec!["train", "--epochs", "12", "--out_dir", p(&full)];
    args.extend(common);
    ok(&args);
    let mut args = vec!["train", "--epochs", "7", "--out_dir", p(&split)];
    args.extend(common);
    ok(&args);
    let mut args = vec!["train", "--epochs", "12", "--resume", "true", "--out_dir", p(&split)];
    args.extend(common);
    ok(&args);
    assert_eq!(read(&full.join("checkpoint.lfck")), read(&split.join("checkpoint.lfck")));
    let a = io::read_train_log(std::fs::File::open(full.join("train_log.csv")).unwrap()).unwrap();
    let b = io::read_train_log(std::fs::File::open(split.join("train_log.csv")).unwrap()).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(b.len(), 12);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.epoch, x.loss.to_bits(), x.ess.to_bits()), (y.epoch, y.loss.to_bits(), y.ess.to_bits()));
    }

    // resuming with a different architecture is a config error
    let mut args = vec!["train", "--epochs", "14", "--resume", "true", "--out_dir", p(&split)];
    args.extend(common);
    args.extend(["--kernel_size", "5"]);
    let err = fails_with(&args, 2);
    assert!(err.contains("kernel_size: 5 != 3"), "{err}");
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("train");
    ok(&["train", "--beta", "2", "--lx", "4", "--ly", "4", "--epochs", "100", "--seed", "1", "--out_dir", p(&run)]);
    let ckpt = run.join("checkpoint.lfck");
    let log = io::read_train_log(std::fs::File::open(run.join("train_log.csv")).unwrap()).unwrap();
    assert_eq!(log.len(), 100);
    assert!(run.join("checkpoint.lfck.manifest.json").exists());

    let obs = dir.path().join("ft.csv");
    let ens = dir.path().join("ft.lflow");
    ok(&["fthmc", "--checkpoint", p(&ckpt), "--ntraj", "200", "--seed", "2", "--obs", p(&obs), "--out", p(&ens), "--save_every", "20"]);
    let m: Value = serde_json::from_slice(&read(&dir.path().join("ft.csv.manifest.json"))).unwrap();
    let hash = m["input_checkpoint_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 40);
    assert_eq!(m["config"]["beta"], "2");
    assert_eq!(io::read_ensemble(&ens).unwrap().1.len(), 10);

    let summary = dir.path().join("summary.json");
    let svg = dir.path().join("history.svg");
    ok(&["analyze", "--obs", p(&obs), "--skip", "20", "--out", p(&summary), "--plot", p(&svg), "--checkpoint", p(&ckpt), "--ess_samples", "256"]);
    let s: Value = serde_json::from_slice(&read(&summary)).unwrap();
    for k in ["beta", "lx", "ly", "n_traj", "acceptance", "avg_plaq", "avg_plaq_err", "tau_int_Q", "tunneling_rate", "ess"] {
        assert!(s.get(k).is_some(), "summary lacks {k}");
    }
    assert_eq!(s["n_traj"], 180);
    assert_eq!(s["lx"], 4);
    let acc = s["acceptance"].as_f64().unwrap();
    assert!(acc > 0.5, "acceptance {acc}");
    let ess = s["ess"].as_f64().unwrap();
    assert!(ess > 0.0 && ess <= 1.0);
    let plaq = s["avg_plaq"].as_f64().unwrap();
    assert!((plaq - 0.6992519268177046).abs() < 0.1, "{plaq}");
    assert!(read(&svg).starts_with(b"<svg"));
}

#[test]
fn transfer_then_fthmc_on_a_larger_lattice() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("t");
    ok(&["train", "--lx", "4", "--ly", "4", "--epochs", "3", "--batch_size", "4", "--out_dir", p(&run)]);
    let big = dir.path().join("big.lfck");
    ok(&["transfer", "--checkpoint", p(&run.join("checkpoint.lfck")), "--lx", "8", "--ly", "12", "--out", p(&big)]);
    let obs = dir.path().join("o.csv");
    ok(&["fthmc", "--checkpoint", p(&big), "--ntraj", "3", "--nlf", "5", "--obs", p(&obs)]);
    let m: Value = serde_json::from_slice(&read(&dir.path().join("o.csv.manifest.json"))).unwrap();
    assert_eq!((m["config"]["lx"].as_str(), m["config"]["ly"].as_str()), (Some("8"), Some("12")));
    fails_with(&["transfer", "--checkpoint", p(&big), "--lx", "6", "--ly", "8", "--out", p(&dir.path().join("x.lfck"))], 2);
}
