use std::path::Path;
use std::process::{Command, Output};

use edvae::priors::GmmPrior;
use serde_json::Value;

fn edvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edvae"))
        .arg("-q")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = edvae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok_json(&[
            "gen-data",
            "--kind",
            "complex",
            "--n",
            "1000",
            "--seed",
            "7",
            "--out",
            s(d),
        ]);
    }
    let fa = std::fs::read(a.join("dataset.edv")).unwrap();
    let fb = std::fs::read(b.join("dataset.edv")).unwrap();
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn gen_data_replays_from_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok_json(&[
        "gen-data",
        "--kind",
        "gaussian",
        "--n",
        "500",
        "--seed",
        "3",
        "--radius",
        "0.2",
        "--out",
        s(&a),
    ]);
    let cfg = a.join("config.json");
    ok_json(&["gen-data", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(
        std::fs::read(a.join("dataset.edv")).unwrap(),
        std::fs::read(b.join("dataset.edv")).unwrap()
    );
}

#[test]
fn gen_data_without_kind_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = edvae(&["gen-data", "--n", "100", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_and_config_key_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = edvae(&["gen-data", "--kind", "gaussian", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[data]\nnn = 5\n").unwrap();
    let out = edvae(&[
        "gen-data",
        "--kind",
        "gaussian",
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.nn"));
}

#[test]
fn gaussian_summary_latent_mean_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let n = 20_000;
    let v = ok_json(&[
        "gen-data",
        "--kind",
        "gaussian",
        "--n",
        &n.to_string(),
        "--seed",
        "11",
        "--out",
        s(dir.path()),
    ]);
    let means = v["latent_mean"].as_array().unwrap();
    assert_eq!(means.len(), 5);
    // Five standard errors of a unit-variance mean.
    let bound = 5.0 / (n as f64).sqrt();
    for m in means {
        assert!(m.as_f64().unwrap().abs() < bound, "{m}");
    }
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn fit_prior_single_component_on_gaussian_latents() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(&[
        "fit-prior",
        "--kind",
        "gaussian",
        "--samples",
        "20000",
        "--k",
        "1",
        "--seed",
        "2",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(v["k"], 1);
    let g = GmmPrior::load(&dir.path().join("gmm.json")).unwrap();
    assert_eq!((g.k(), g.dim()), (1, 5));
    for (m, var) in g.means()[0].iter().zip(&g.variances()[0]) {
        assert!(m.abs() < 0.05, "mean {m}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
    // Mean log density of N(0, I) samples under N(0, I): −5·(½ log 2π + ½).
    let ll = v["heldout_mean_log_likelihood"].as_f64().unwrap();
    assert!((ll + 7.0947).abs() < 0.1, "{ll}");
}

#[test]
fn fit_prior_heldout_likelihood_grows_with_k() {
    let dir = tempfile::tempdir().unwrap();
    let mut prev = f64::NEG_INFINITY;
    for k in 1..=8 {
        let out = dir.path().join(format!("k{k}"));
        let v = ok_json(&[
            "fit-prior",
            "--kind",
            "complex",
            "--samples",
            "10000",
            "--k",
            &k.to_string(),
            "--seed",
            "4",
            "--restarts",
            "3",
            "--out",
            s(&out),
        ]);
        assert_eq!(v["monotone"], true);
        let ll = v["heldout_mean_log_likelihood"].as_f64().unwrap();
        assert!(ll >= prev - 0.02, "K={k}: {ll} after {prev}");
        prev = prev.max(ll);
        let g = GmmPrior::load(&out.join("gmm.json")).unwrap();
        assert_eq!(g.k(), k);
    }
}

#[test]
fn fit_prior_with_too_many_components_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = edvae(&[
        "fit-prior",
        "--kind",
        "complex",
        "--samples",
        "50",
        "--k",
        "8",
        "--out",
        s(dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let v = ok_json(&[
        "train",
        "--kind",
        "gaussian",
        "--n",
        "800",
        "--model",
        "vae",
        "--epochs",
        "3",
        "--batch-size",
        "64",
        "--hidden",
        "16",
        "--seeds",
        "1,2",
        "--out",
        s(&run),
    ]);
    let seeds = v["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 2);
    for f in [
        "config.json",
        "metrics.csv",
        "timings.csv",
        "result.json",
        "checkpoint_seed1.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    for sd in seeds {
        let (mse, kld, elbo) = (
            sd["mse"].as_f64().unwrap(),
            sd["kld"].as_f64().unwrap(),
            sd["elbo"].as_f64().unwrap(),
        );
        assert_eq!(elbo, -mse - kld);
    }

    let e = ok_json(&["eval", "--run", s(&run)]);
    for (t, ev) in seeds.iter().zip(e["seeds"].as_array().unwrap()) {
        assert_eq!(t["seed"], ev[0]);
        assert_eq!(t["mse"], ev[1]["mse"]);
        assert_eq!(t["kld"], ev[1]["kld"]);
    }
}

#[test]
fn vae_requires_the_analytic_prior() {
    let dir = tempfile::tempdir().unwrap();
    let out = edvae(&[
        "train",
        "--kind",
        "gaussian",
        "--n",
        "300",
        "--model",
        "vae",
        "--prior",
        "gmm",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_reproduce_table_has_twelve_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        "gmm_samples = 400\n[data]\nn = 300\n[train]\nepochs = 2\nbatch_size = 64\nhidden = 16\ngmm_k = 2\nseeds = [1, 2]\n",
    )
    .unwrap();
    let out = dir.path().join("t");
    let res = edvae(&["reproduce-table", "--config", s(&cfg), "--out", s(&out)]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let rows: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("| ") && !l.starts_with("| Metric"))
        .collect();
    assert_eq!(rows.len(), 6, "{stdout}");
    let cells = rows.iter().map(|r| r.matches('±').count()).sum::<usize>();
    assert_eq!(cells, 12);
    assert!(stdout.lines().any(|l| l.contains("ELBO = −MSE − KLD")));
    assert!(out.join("table.csv").exists() && out.join("metrics.csv").exists());
}
