use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

use ttemb_core::io::{encode_tte, load_dmat, load_tt};

fn ttemb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttemb")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn porcelain(args: &[&str]) -> HashMap<String, String> {
    let mut full = args.to_vec();
    full.push("--porcelain");
    let o = ttemb(&full);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('\t').expect("key<TAB>value");
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn init_model(dir: &Path) -> String {
    let p = path(dir, "model.tte");
    let o = ttemb(&["init", "--vocab", "512", "--dim", "512", "--n", "3", "--ranks", "16", "--seed", "3", "--out", &p]);
    assert!(o.status.success());
    p
}

#[test]
fn factorize_prints_factors() {
    assert_eq!(stdout(&ttemb(&["factorize", "--size", "512", "--n", "3"])), "8 8 8\n");
    assert_eq!(stdout(&ttemb(&["factorize", "--size", "480", "--n", "4"])), "4 4 5 6\n");
    assert_eq!(stdout(&ttemb(&["factorize", "--size", "25000", "--n", "3", "--pad"])), "30 30 30\n");
    assert_eq!(porcelain(&["factorize", "--size", "512", "--n", "3"])["factors"], "8 8 8");
}

#[test]
fn exit_codes() {
    let o = ttemb(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(ttemb(&["factorize", "--size", "512"]).status.code(), Some(1));
    assert_eq!(ttemb(&["factorize", "--size", "x", "--n", "3"]).status.code(), Some(1));
    assert_eq!(ttemb(&["factorize", "--size", "7", "--n", "2"]).status.code(), Some(2));
    assert_eq!(ttemb(&["stats", "--in", "/nonexistent/model.tte"]).status.code(), Some(2));
    assert_eq!(ttemb(&["--help"]).status.code(), Some(0));
}

#[test]
fn stats_of_the_reference_shape() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let s = porcelain(&["stats", "--in", &model]);
    assert_eq!(s["tt_params"], "18432");
    assert_eq!(s["dense_params"], "262144");
    assert_eq!(s["ratio"], "14.222222222222221");
    assert_eq!(s["ratio"].parse::<f64>().unwrap(), 262144.0 / 18432.0);
    assert_eq!(s["row_factors"], "8 8 8");
    assert_eq!(s["ranks"], "16 16");
    let a = ttemb(&["stats", "--in", &model]);
    let b = ttemb(&["stats", "--in", &model]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let p = path(dir.path(), "small.tte");
    let o = ttemb(&["init", "--vocab", "60", "--dim", "24", "--n", "3", "--ranks", "3", "--kind", "tr", "--out", &p]);
    assert!(o.status.success());
    let g = porcelain(&["gradcheck", "--in", &p, "--seed", "7"]);
    assert!(g["max_rel_error"].parse::<f64>().unwrap() < 1e-5);
    assert_eq!(g["passed"], "true");
}

#[test]
fn reconstruct_lookup_and_compress_agree() {
    let dir = tempfile::tempdir().unwrap();
    let model = path(dir.path(), "m.tte");
    let o = ttemb(&["init", "--vocab", "100", "--dim", "8", "--n", "2", "--ranks", "4", "--out", &model]);
    assert!(o.status.success());
    let dmat = path(dir.path(), "m.dmat");
    assert!(ttemb(&["reconstruct", "--in", &model, "--out", &dmat]).status.success());
    let m = load_dmat(&dmat).unwrap();
    assert_eq!((m.rows(), m.cols()), (100, 8));

    let rows = stdout(&ttemb(&["lookup", "--in", &model, "--indices", "0,99,0"]));
    let rows: Vec<Vec<f64>> = rows
        .lines()
        .map(|l| l.split(' ').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0], m.row(0));
    assert_eq!(rows[1], m.row(99));
    assert_eq!(rows[2], rows[0]);
    assert_eq!(ttemb(&["lookup", "--in", &model, "--indices", "100"]).status.code(), Some(2));

    let back = path(dir.path(), "c.tte");
    let c = porcelain(&["compress", "--in", &dmat, "--n", "2", "--ranks", "8", "--out", &back]);
    assert!(c["relative_error"].parse::<f64>().unwrap() < 1e-10);
    assert_eq!(load_tt(&back).unwrap().chain().plan().vocab(), 100);
}

#[test]
fn corrupt_and_capped_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(dir.path());
    let mut bytes = std::fs::read(&model).unwrap();
    bytes[0] = b'Z';
    let bad = path(dir.path(), "bad.tte");
    std::fs::write(&bad, &bytes).unwrap();
    let o = ttemb(&["stats", "--in", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset 0"));

    let good = encode_tte(&load_tt(&model).unwrap());
    std::fs::write(&bad, &good[..good.len() - 1]).unwrap();
    let o = ttemb(&["stats", "--in", &bad]);
    assert!(String::from_utf8_lossy(&o.stderr).contains(&format!("expected {} bytes, got {}", good.len(), good.len() - 1)));

    let out = path(dir.path(), "x.dmat");
    let o = Command::new(env!("CARGO_BIN_EXE_ttemb"))
        .args(["reconstruct", "--in", &model, "--out", &out])
        .env("TTEMB_MATERIALIZE_CAP", "1000")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&out).exists());
}

#[test]
fn analysis_commands() {
    let t = porcelain(&["table", "--vocab", "512", "--dim", "512", "--n", "3", "--ladder", "1,16"]);
    assert_eq!(t["rank.16.tt_params"], "18432");
    assert_eq!(t["rank.16.lowrank_d"], "18");
    assert_eq!(t["rank.1.tt_params"], "192");

    let r = porcelain(&["rankcheck", "--vocab", "64", "--dim", "64", "--n", "3", "--ranks", "2", "--seeds", "5", "--lowrank-d", "1"]);
    assert_eq!(r["random_full_rank"], "5/5");
    assert_eq!(r["check.0.source"], "witness");
    assert_eq!(r["check.0.rank"], "64");
    assert_eq!(r["check.6.rank"], "1");

    let s = porcelain(&["initstats", "--vocab", "81", "--dim", "81", "--n", "2", "--ladder", "1,4", "--draws", "4"]);
    assert_eq!(s["rank.4.samples"], (81 * 81 * 4).to_string());
    assert!((s["rank.4.variance"].parse::<f64>().unwrap() - 1.0).abs() < 0.3);
}

#[test]
fn train_demo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "demo.cfg");
    std::fs::write(
        &cfg,
        "task = matrix-fit\nkind = tt\nn = 3\nvocab = 64\ndim = 64\nranks = 4\nsteps = 30\nlr = 0.05\nbatch = 8\nseed = 2\n",
    )
    .unwrap();
    let a = ttemb(&["train-demo", "--config", &cfg, "--trace", "--porcelain"]);
    let b = ttemb(&["train-demo", "--config", &cfg, "--trace", "--porcelain"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let s = porcelain(&["train-demo", "--config", &cfg]);
    assert!(s["final_loss"].parse::<f64>().unwrap() < s["initial_loss"].parse::<f64>().unwrap());
    assert_eq!(s["params"], (16 * 4 + 4 * 16 * 4 + 4 * 16).to_string());

    std::fs::write(&cfg, "task = matrix-fit\nkind = tt\n").unwrap();
    assert_eq!(ttemb(&["train-demo", "--config", &cfg]).status.code(), Some(2));
}
