use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_laplace-lora");
const SMALL: [&str; 6] = ["--seeds", "0,1", "--steps", "300", "--eval-every", "150"];

fn run(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("LAPLACE_LORA_OUT");
    if let Some(o) = out {
        cmd.env("LAPLACE_LORA_OUT", o);
    }
    cmd.output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn data_rows(path: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect();
    v.sort();
    v
}

#[test]
fn help_documents_config_keys() {
    let o = run(&["--help"], None);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["n_kfac", "lambda_mode", "eval_every", "ece_bins", "dropout_rate", "train_fraction"] {
        assert!(text.contains(key), "missing {key}");
    }
    for sub in ["train", "laplace", "evaluate", "report", "all"] {
        assert!(text.contains(sub));
    }
}

#[test]
fn staged_pipeline_matches_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let staged = dir.path().join("staged");
    let full = dir.path().join("full");
    let with = |extra: &[&'static str]| -> Vec<&str> { SMALL.iter().chain(extra).copied().collect() };
    for cmd in ["train", "laplace", "evaluate"] {
        ok(&run(&with(&[cmd, "--shifts", "translate:3"]), Some(&staged)));
    }
    ok(&run(&with(&["all", "--shifts", "translate:3"]), Some(&full)));

    let staged_rows = data_rows(&staged.join("results.csv"));
    let full_rows: Vec<String> = data_rows(&full.join("results.csv"))
        .into_iter()
        .filter(|r| {
            let f: Vec<&str> = r.split(',').collect();
            ["map", "la", "llla"].contains(&f[2]) && f[4] == "300"
        })
        .collect();
    assert_eq!(staged_rows.len(), 2 * 2 * 3);
    assert_eq!(staged_rows, full_rows);

    let rel = fs::read_to_string(staged.join("reliability/seed1_step300_translate_3_la.csv")).unwrap();
    assert_eq!(rel.lines().count(), 1 + 15);
    assert!(staged.join("posteriors/seed0/step0000300_llla.post").exists());
    assert!(full.join("summary.md").exists());
}

#[test]
fn report_selects_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&run(
        &["all", "--seeds", "0", "--steps", "200", "--eval-every", "100", "--set", "baselines.deep_ensemble=false"],
        Some(out),
    ));
    assert!(fs::read_to_string(out.join("summary.md")).unwrap().contains("(step 200)"));
    ok(&run(&["report", "--step", "100"], Some(out)));
    let summary = fs::read_to_string(out.join("summary.md")).unwrap();
    assert!(summary.contains("(step 100)") && !summary.contains("(step 200)"));
    assert!(out.join("curve_gaussians_id_nll.svg").exists());
}

#[test]
fn output_dir_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let from_file = dir.path().join("from_file");
    fs::write(&cfg, format!("[experiment]\nout_dir = {:?}\nseeds = [0]\n[train]\nsteps = 20\n", from_file)).unwrap();
    let cfg_s = cfg.to_str().unwrap();

    ok(&run(&["train", "--config", cfg_s], None));
    assert!(from_file.join("checkpoints/seed0/step0000020.ckpt").exists());

    let env_dir = dir.path().join("from_env");
    ok(&run(&["train", "--config", cfg_s], Some(&env_dir)));
    assert!(env_dir.join("config.toml").exists());

    let flag_dir = dir.path().join("from_flag");
    ok(&run(&["train", "--config", cfg_s, "--out-dir", flag_dir.to_str().unwrap()], Some(&env_dir)));
    assert!(flag_dir.join("checkpoints/seed0").exists());
    let written = fs::read_to_string(flag_dir.join("config.toml")).unwrap();
    assert!(written.contains("steps = 20"));
}

#[test]
fn bad_overrides_and_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--set", "train.stepz=3"], Some(dir.path()));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nsteps = 5\n\n[laplace]\nn_kfc = 3\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:5"), "{err}");
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["laplace", "--seeds", "0"], Some(dir.path()));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `train` first"));

    ok(&run(&["train", "--seeds", "0", "--steps", "30"], Some(dir.path())));
    let o = run(&["evaluate", "--seeds", "0", "--steps", "30"], Some(dir.path()));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("run `laplace` first"));
    let o = run(&["laplace", "--seeds", "0", "--steps", "30", "--step", "7"], Some(dir.path()));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no checkpoint at step 7"));
}

#[test]
fn failed_seeds_still_flush_results() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    let mut rows = String::from("x0,x1,label\n");
    for i in 0..20 {
        rows += &format!("{},{},{}\n", i as f64 * 0.1, -(i as f64) * 0.2, i % 2);
    }
    fs::write(&train, &rows).unwrap();
    // label 5 does not exist in the training classes
    fs::write(&test, "x0,x1,label\n0.5,0.5,5\n").unwrap();
    let out = dir.path().join("out");
    let o = run(
        &[
            "all",
            "--seeds",
            "0,1",
            "--steps",
            "20",
            "--set",
            "task.generator=csv",
            "--set",
            &format!("task.train_csv={:?}", train),
            "--set",
            &format!("task.test_csv={:?}", test),
            "--set",
            "task.n_classes=2",
            "--set",
            "task.dim=2",
            "--set",
            "network.dims=[2, 8, 2]",
        ],
        Some(&out),
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("2 of 2 seeds failed"));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.trim(), "dataset,shift,method,seed,step,acc,ece,nll");
}
