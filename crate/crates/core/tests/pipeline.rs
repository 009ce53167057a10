//! End-to-end behaviour of the experiment harness.

use std::collections::BTreeMap;
use std::time::Instant;

use laplace_lora::harness::config::ExperimentConfig;
use laplace_lora::harness::data::{apply_shift, parse_shifts, Split};
use laplace_lora::harness::experiment::{fit_posterior, prepare_data, run_experiment, train_member};
use laplace_lora::harness::report::{emit_report, parse_results_csv};
use laplace_lora::laplace::{FisherVariant, Scope};
use laplace_lora::metrics::argmax;
use laplace_lora::train::softmax;
use laplace_lora::Error;

#[test]
fn noiseless_gaussians_are_learned_exactly() {
    let mut cfg = ExperimentConfig::default();
    cfg.task.noise = 0.0;
    cfg.train.steps = 500;
    for seed in 0..3 {
        let data = prepare_data(&cfg, seed).unwrap();
        let net = train_member(&cfg, &data.fit, seed).unwrap();
        let net = net.final_net();
        let correct = data
            .test
            .features
            .iter()
            .zip(&data.test.labels)
            .filter(|(x, &y)| argmax(&net.logits(x).unwrap()) == y)
            .count();
        let acc = correct as f64 / data.test.len() as f64;
        assert!(acc >= 0.99, "seed {seed}: acc {acc}");
    }
}

#[test]
fn large_translation_keeps_map_confident_but_wrong() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = 2000;
    let data = prepare_data(&cfg, 0).unwrap();
    let out = train_member(&cfg, &data.fit, 0).unwrap();
    let net = out.final_net();
    let stats = |ds: &laplace_lora::harness::data::Dataset| {
        let (mut acc, mut conf) = (0.0, 0.0);
        for (x, &y) in ds.features.iter().zip(&ds.labels) {
            let p = softmax(&net.logits(x).unwrap());
            acc += (argmax(&p) == y) as u8 as f64;
            conf += p.iter().cloned().fold(0.0, f64::max);
        }
        (acc / ds.len() as f64, conf / ds.len() as f64)
    };
    let (acc_id, conf_id) = stats(&data.test);
    let shifted = apply_shift(&data.test, &parse_shifts("translate:8").unwrap()).unwrap();
    let (acc_s, conf_s) = stats(&shifted);
    assert!(acc_id - acc_s > 0.2, "id {acc_id}, shifted {acc_s}");
    // confidence barely moves while accuracy collapses, so the gap widens
    assert!(conf_s > 0.75 * conf_id, "conf {conf_s} vs {conf_id}");
    assert!(conf_s - acc_s > (conf_id - acc_id) + 0.05, "gap {} vs {}", conf_s - acc_s, conf_id - acc_id);
}

#[test]
fn smoke_config_is_fast() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = 500;
    cfg.experiment.eval_every = 500;
    cfg.experiment.seeds = vec![0];
    let t = Instant::now();
    let res = run_experiment(&cfg).unwrap();
    assert!(t.elapsed().as_secs_f64() < 60.0);
    assert!(!res.rows.is_empty());
}

#[test]
fn summary_agrees_with_results_csv() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = 300;
    cfg.experiment.eval_every = 100;
    cfg.experiment.seeds = vec![0, 1, 2];
    cfg.experiment.shifts = vec!["rotate:45".into()];
    cfg.baselines.deep_ensemble = false;
    let dir = tempfile::tempdir().unwrap();
    emit_report(&run_experiment(&cfg).unwrap(), dir.path(), None).unwrap();

    let csv_path = dir.path().join("results.csv");
    let res = parse_results_csv(&std::fs::read_to_string(&csv_path).unwrap(), &csv_path).unwrap();
    let mut groups: BTreeMap<(String, String), Vec<[f64; 3]>> = BTreeMap::new();
    for r in res.rows.iter().filter(|r| r.step == 300) {
        groups.entry((r.shift.clone(), r.method.clone())).or_default().push([r.acc, r.ece, r.nll]);
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.md")).unwrap();
    let mut shift = String::new();
    let mut checked = 0;
    for line in summary.lines() {
        if let Some(h) = line.strip_prefix("## ") {
            shift = h.split(" / ").nth(1).unwrap().split(" (").next().unwrap().to_string();
            continue;
        }
        let cells: Vec<&str> = line.split('|').map(str::trim).filter(|c| !c.is_empty()).collect();
        if cells.len() != 5 || cells[0] == "method" || cells[0].starts_with("---") {
            continue;
        }
        let vals = &groups[&(shift.clone(), cells[0].to_string())];
        assert_eq!(cells[1].parse::<usize>().unwrap(), vals.len());
        for m in 0..3 {
            let mean = vals.iter().map(|v| v[m]).sum::<f64>() / vals.len() as f64;
            let shown: f64 = cells[2 + m].split(" ± ").next().unwrap().parse().unwrap();
            assert!((shown - mean).abs() < 1e-9, "{shift} {} metric {m}", cells[0]);
        }
        checked += 1;
    }
    assert_eq!(checked, groups.len());
}

#[test]
fn tuners_refuse_the_test_split() {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = 50;
    let data = prepare_data(&cfg, 0).unwrap();
    assert_eq!(data.test.split, Split::Test);
    assert!(data.shifted.iter().all(|(_, d)| d.split == Split::Test));
    let net = train_member(&cfg, &data.fit, 0).unwrap();
    let net = net.final_net();
    let err = fit_posterior(&cfg, net, &data.test, None, Scope::LastLayer, FisherVariant::Kfac, 0).unwrap_err();
    assert!(matches!(err, Error::SplitLeak(_)));
    cfg.laplace.lambda_mode = "valnll".into();
    let err = fit_posterior(&cfg, net, &data.fit, Some(&data.test), Scope::LastLayer, FisherVariant::Kfac, 0)
        .unwrap_err();
    assert!(matches!(err, Error::SplitLeak(_)));
}
