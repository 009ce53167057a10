use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use laplace_lora::harness::config::{ExperimentConfig, CONFIG_HELP};
use laplace_lora::harness::data::Dataset;
use laplace_lora::harness::experiment::{
    eval_seed, fit_posterior, laplace_methods, laplace_probs, prepare_data, run_experiment_partial,
    train_member, ResultRow, RunResult,
};
use laplace_lora::harness::report::{emit_report, parse_results_csv, render_results_csv};
use laplace_lora::io::{load_checkpoint, load_posterior, save_checkpoint, save_posterior};
use laplace_lora::metrics::{accuracy, ece, nll, reliability_bins, reliability_csv, EceConfig, EvalRecord};
use laplace_lora::train::{softmax, Checkpoint};

#[derive(Parser)]
#[command(
    name = "laplace-lora",
    version,
    about = "Post-hoc Laplace approximations over LoRA adapters, with calibration reports",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults are used for missing keys.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides experiment.out_dir.
    #[arg(short, long, global = true, env = "LAPLACE_LORA_OUT")]
    out_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set laplace.n_kfac=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for experiment.seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Shorthand for train.steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Shorthand for experiment.eval_every.
    #[arg(long, global = true)]
    eval_every: Option<usize>,
    /// Shorthand for laplace.scopes (la, llla).
    #[arg(long, global = true, value_delimiter = ',')]
    scopes: Option<Vec<String>>,
    /// Shorthand for laplace.fisher (full, diag, kfac).
    #[arg(long, global = true)]
    fisher: Option<String>,
    /// Shorthand for laplace.lambda_mode (evidence, valnll, fixed).
    #[arg(long, global = true)]
    lambda_mode: Option<String>,
    /// Shorthand for experiment.shifts, e.g. `translate:3,rotate:45`.
    #[arg(long, global = true, value_delimiter = ',')]
    shifts: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train MAP adapters and save every checkpoint.
    Train,
    /// Fit curvature and tune the prior precision on saved checkpoints.
    Laplace {
        /// Checkpoint step; the last saved one by default.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Score MAP and the saved posteriors; writes results.csv and
    /// per-bin reliability tables.
    Evaluate {
        #[arg(long)]
        step: Option<usize>,
    },
    /// Render summary.md and step curves from results.csv.
    Report {
        /// Step summarized in summary.md; the last one by default.
        #[arg(long)]
        step: Option<usize>,
        /// Results file; `<out_dir>/results.csv` by default.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Full protocol: train, fit, tune and evaluate every method at every
    /// checkpoint, then report.
    All {
        #[arg(long)]
        step: Option<usize>,
    },
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let mut set = |k: &str, v: String| cfg.set_key(k, &v).with_context(|| format!("--{k}"));
    if let Some(s) = &c.seeds {
        set("experiment.seeds", format!("{s:?}"))?;
    }
    if let Some(s) = c.steps {
        set("train.steps", s.to_string())?;
    }
    if let Some(s) = c.eval_every {
        set("experiment.eval_every", s.to_string())?;
    }
    if let Some(s) = &c.scopes {
        set("laplace.scopes", format!("{s:?}"))?;
    }
    if let Some(s) = &c.fisher {
        set("laplace.fisher", format!("{s:?}"))?;
    }
    if let Some(s) = &c.lambda_mode {
        set("laplace.lambda_mode", format!("{s:?}"))?;
    }
    if let Some(s) = &c.shifts {
        set("experiment.shifts", format!("{s:?}"))?;
    }
    for kv in &c.sets {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv}: expected SECTION.KEY=VALUE"))?;
        cfg.set_key(k.trim(), v.trim()).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(o) = &c.out_dir {
        cfg.experiment.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_dir(out: &Path, kind: &str, seed: u64) -> PathBuf {
    out.join(kind).join(format!("seed{seed}"))
}

fn checkpoint_path(out: &Path, seed: u64, step: usize) -> PathBuf {
    seed_dir(out, "checkpoints", seed).join(format!("step{step:07}.ckpt"))
}

fn posterior_path(out: &Path, seed: u64, step: usize, method: &str) -> PathBuf {
    seed_dir(out, "posteriors", seed).join(format!("step{step:07}_{method}.post"))
}

/// Saved checkpoint steps for a seed, ascending.
fn saved_steps(out: &Path, seed: u64) -> Result<Vec<usize>> {
    let dir = seed_dir(out, "checkpoints", seed);
    let mut steps = Vec::new();
    let entries = fs::read_dir(&dir).with_context(|| format!("no checkpoints in {} (run `train` first)", dir.display()))?;
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(s) = name.strip_prefix("step").and_then(|n| n.strip_suffix(".ckpt")) {
            steps.push(s.parse::<usize>().with_context(|| format!("bad checkpoint name {name}"))?);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

fn pick_checkpoint(out: &Path, seed: u64, step: Option<usize>) -> Result<Checkpoint> {
    let steps = saved_steps(out, seed)?;
    let step = match step {
        Some(s) if steps.contains(&s) => s,
        Some(s) => bail!("seed {seed}: no checkpoint at step {s} (saved: {steps:?})"),
        None => *steps.last().with_context(|| format!("seed {seed}: no checkpoints saved"))?,
    };
    let path = checkpoint_path(out, seed, step);
    load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

fn write_config(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.experiment.out_dir)?;
    fs::write(cfg.experiment.out_dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let out = &cfg.experiment.out_dir;
    for &seed in &cfg.experiment.seeds {
        let data = prepare_data(cfg, seed)?;
        let run = train_member(cfg, &data.fit, seed).with_context(|| format!("training seed {seed}"))?;
        fs::create_dir_all(seed_dir(out, "checkpoints", seed))?;
        for ckpt in &run.checkpoints {
            save_checkpoint(ckpt, &checkpoint_path(out, seed, ckpt.step))?;
        }
        let last = run.checkpoints.last().map(|c| c.step).unwrap_or(0);
        println!(
            "seed {seed}: {} checkpoints, final step {last}, final loss {:.6}",
            run.checkpoints.len(),
            run.losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn laplace(cfg: &ExperimentConfig, step: Option<usize>) -> Result<()> {
    let out = &cfg.experiment.out_dir;
    for &seed in &cfg.experiment.seeds {
        let ckpt = pick_checkpoint(out, seed, step)?;
        let data = prepare_data(cfg, seed)?;
        fs::create_dir_all(seed_dir(out, "posteriors", seed))?;
        for (name, scope, variant) in laplace_methods(cfg)? {
            let post = fit_posterior(cfg, &ckpt.net, &data.fit, data.val.as_ref(), scope, variant, seed)
                .with_context(|| format!("seed {seed}, {name}"))?;
            save_posterior(&post, &posterior_path(out, seed, ckpt.step, &name))?;
            println!("seed {seed} step {} {name}: λ = {:?}", ckpt.step, post.lambda().values());
        }
    }
    Ok(())
}

fn records(probs: Vec<Vec<f64>>, data: &Dataset) -> Result<Vec<EvalRecord>> {
    Ok(probs
        .into_iter()
        .zip(&data.labels)
        .map(|(p, &y)| EvalRecord::new(p, y))
        .collect::<laplace_lora::Result<_>>()?)
}

fn evaluate(cfg: &ExperimentConfig, step: Option<usize>) -> Result<()> {
    let out = &cfg.experiment.out_dir;
    let bins = EceConfig { n_bins: cfg.experiment.ece_bins };
    let predictor = cfg.predict.predictor()?;
    let rel_dir = out.join("reliability");
    fs::create_dir_all(&rel_dir)?;
    let mut res = RunResult::default();
    for &seed in &cfg.experiment.seeds {
        let ckpt = pick_checkpoint(out, seed, step)?;
        let net = &ckpt.net;
        let data = prepare_data(cfg, seed)?;
        let mut posts = Vec::new();
        for (name, ..) in laplace_methods(cfg)? {
            let path = posterior_path(out, seed, ckpt.step, &name);
            let post = load_posterior(&path, net)
                .with_context(|| format!("loading {} (run `laplace` first)", path.display()))?;
            posts.push((name, post));
        }
        for (set_idx, (shift, set)) in data.eval_sets().into_iter().enumerate() {
            let s = eval_seed(seed, ckpt.step, set_idx);
            let mut methods = vec![(
                "map".to_string(),
                set.features.iter().map(|x| Ok(softmax(&net.logits(x)?))).collect::<laplace_lora::Result<Vec<_>>>()?,
            )];
            for (name, post) in &posts {
                methods.push((name.clone(), laplace_probs(net, post, predictor, set, s)?));
            }
            for (method, probs) in methods {
                let recs = records(probs, set)?;
                let table = reliability_bins(&recs, &bins)?;
                let file = rel_dir.join(format!("seed{seed}_step{}_{shift}_{method}.csv", ckpt.step).replace(':', "_"));
                fs::write(&file, reliability_csv(&table))?;
                res.rows.push(ResultRow {
                    dataset: cfg.task.dataset_name(),
                    shift: shift.to_string(),
                    method,
                    seed,
                    step: ckpt.step,
                    acc: accuracy(&recs)?,
                    ece: ece(&recs, &bins)?,
                    nll: nll(&recs)?,
                });
            }
        }
    }
    res.sort();
    fs::write(out.join("results.csv"), render_results_csv(&res))?;
    print_rows(&res);
    Ok(())
}

fn print_rows(res: &RunResult) {
    for r in &res.rows {
        println!(
            "seed {} step {} {:<12} {:<10} acc {:.4} ece {:.4} nll {:.4}",
            r.seed, r.step, r.shift, r.method, r.acc, r.ece, r.nll
        );
    }
}

fn report(cfg: &ExperimentConfig, step: Option<usize>, results: Option<PathBuf>) -> Result<()> {
    let path = results.unwrap_or_else(|| cfg.experiment.out_dir.join("results.csv"));
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let res = parse_results_csv(&text, &path)?;
    for f in emit_report(&res, &cfg.experiment.out_dir, step)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn all(cfg: &ExperimentConfig, step: Option<usize>) -> Result<()> {
    let (res, errors) = run_experiment_partial(cfg);
    // whatever finished is written before any failure is reported
    let files = emit_report(&res, &cfg.experiment.out_dir, step)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    if !errors.is_empty() {
        for (seed, e) in &errors {
            eprintln!("seed {seed} failed: {e}");
        }
        bail!("{} of {} seeds failed; partial results kept", errors.len(), cfg.experiment.seeds.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    write_config(&cfg)?;
    match cli.cmd {
        Cmd::Train => train(&cfg),
        Cmd::Laplace { step } => laplace(&cfg, step),
        Cmd::Evaluate { step } => evaluate(&cfg, step),
        Cmd::Report { step, results } => report(&cfg, step, results),
        Cmd::All { step } => all(&cfg, step),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
