//! End-to-end protocol: train MAP, and at every checkpoint evaluate MAP,
//! the enabled baselines and the Laplace variants on the in-distribution
//! test set and every shifted copy of it.

use rayon::prelude::*;

use crate::baselines::{
    checkpoint_ensemble_predict, deep_ensemble_predict, mc_dropout_predict, temp_fit, Temperature,
};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, LambdaMode};
use crate::harness::data::{apply_shift, gen_synthetic, load_csv, Dataset, Split};
use crate::laplace::{
    optimize_evidence_loglik, optimize_prior_valnll, EvidenceOptions, FisherVariant,
    LaplaceOptions, LaplacePosterior, PriorPrecision, Scope, ValNllOptions,
};
use crate::lora_net::{init_network, LoraNetwork};
use crate::metrics::{accuracy, ece, nll, EceConfig, EvalRecord};
use crate::predict::{input_seed, logit_posterior_with, Predictor};
use crate::train::{log_likelihood, map_finetune, softmax, TrainOutput};

/// Label of the unshifted test set in the `shift` column.
pub const ID_SHIFT: &str = "id";

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub shift: String,
    pub method: String,
    pub seed: u64,
    pub step: usize,
    pub acc: f64,
    pub ece: f64,
    pub nll: f64,
}

impl ResultRow {
    fn sort_key(&self) -> (&str, &str, &str, u64, usize) {
        (&self.dataset, &self.shift, &self.method, self.seed, self.step)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunResult {
    pub rows: Vec<ResultRow>,
}

impl RunResult {
    /// Canonical order: dataset, shift, method, seed, step.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    }

    pub fn methods(&self) -> Vec<String> {
        let mut m: Vec<String> = self.rows.iter().map(|r| r.method.clone()).collect();
        m.sort();
        m.dedup();
        m
    }
}

/// Splits available to one seed. `fit` is what MAP training and curvature
/// see; `val` exists only when something is tuned on it.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub fit: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
    pub shifted: Vec<(String, Dataset)>,
}

impl SeedData {
    pub fn eval_sets(&self) -> Vec<(&str, &Dataset)> {
        let mut v = vec![(ID_SHIFT, &self.test)];
        v.extend(self.shifted.iter().map(|(n, d)| (n.as_str(), d)));
        v
    }
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let (train, test) = if cfg.task.generator == "csv" {
        let tr = cfg.task.train_csv.as_ref().expect("validated");
        let te = cfg.task.test_csv.as_ref().expect("validated");
        let train = load_csv(tr, None, Split::Train)?;
        let test = load_csv(te, Some(train.n_classes), Split::Test)?;
        (train, test)
    } else {
        // One draw so that train and test share the class structure.
        let n = cfg.task.n_train_per_class + cfg.task.n_test_per_class;
        let all = gen_synthetic(&cfg.task.synthetic(n)?, seed)?;
        all.split_per_class(cfg.task.n_train_per_class, Split::Train, Split::Test)
    };
    let (fit, val) = if cfg.needs_validation()? {
        let (f, v) = train.split_fraction(
            cfg.experiment.train_fraction,
            seed ^ 0x7a11_da7a,
            Split::Train,
            Split::Val,
        );
        (f, Some(v))
    } else {
        (train, None)
    };
    let shifted = cfg
        .shifts()?
        .into_iter()
        .map(|(name, s)| Ok((name, apply_shift(&test, &s)?.with_split(Split::Test))))
        .collect::<Result<_>>()?;
    Ok(SeedData {
        fit,
        val,
        test,
        shifted,
    })
}

/// Seed of the `k`-th deep-ensemble member (member 0 is the main run).
pub fn member_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        input_seed(seed ^ 0xe45e_3b1e, k)
    }
}

pub fn train_member(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<TrainOutput> {
    let net = init_network(&cfg.network, seed)?;
    map_finetune(&net, data, &cfg.train_config(seed))
}

/// Fits curvature on `fit` and tunes λ according to the configuration.
pub fn fit_posterior(
    cfg: &ExperimentConfig,
    net: &LoraNetwork,
    fit: &Dataset,
    val: Option<&Dataset>,
    scope: Scope,
    variant: FisherVariant,
    seed: u64,
) -> Result<LaplacePosterior> {
    let l = &cfg.laplace;
    let n_lambda = scope.sublayers(net).len();
    let lambda = if l.per_sublayer_lambda {
        PriorPrecision::PerSublayer(vec![l.lambda_init; n_lambda])
    } else {
        PriorPrecision::Scalar(l.lambda_init)
    };
    let opts = LaplaceOptions {
        variant,
        kfac: l.kfac_options(seed)?,
    };
    let post = LaplacePosterior::fit(net, fit, scope, &opts, lambda)?;
    let tuned = match l.lambda_mode()? {
        LambdaMode::Fixed => return Ok(post),
        LambdaMode::Evidence => {
            fit.ensure_tunable()?;
            let ll = log_likelihood(net, fit)?;
            let ev = EvidenceOptions {
                eta: l.evidence_lr,
                steps: l.evidence_steps,
                polish: true,
            };
            optimize_evidence_loglik(&post, ll, &ev)?
        }
        LambdaMode::ValNll => {
            let val = val.ok_or_else(|| Error::BadConfig("valnll tuning needs a validation split".into()))?;
            let vo = ValNllOptions {
                eta: l.valnll_lr,
                steps: l.valnll_steps,
                batch: l.valnll_batch,
                seed,
                ..ValNllOptions::default()
            };
            optimize_prior_valnll(&post, net, val, &vo)?
        }
    };
    post.with_lambda(tuned.lambda)
}

/// Metrics of one method on one evaluation set.
pub fn score(probs: Vec<Vec<f64>>, data: &Dataset, bins: usize) -> Result<(f64, f64, f64)> {
    let records: Vec<EvalRecord> = probs
        .into_iter()
        .zip(&data.labels)
        .map(|(p, &y)| EvalRecord::new(p, y))
        .collect::<Result<_>>()?;
    Ok((
        accuracy(&records)?,
        ece(&records, &EceConfig { n_bins: bins })?,
        nll(&records)?,
    ))
}

/// Laplace predictive probabilities for every row of `data`.
pub fn laplace_probs(
    net: &LoraNetwork,
    post: &LaplacePosterior,
    predictor: Predictor,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let solver = post.solver()?;
    data.features
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let lg = logit_posterior_with(net, post, &solver, x)?;
            Ok(predictor.predict(&lg, input_seed(seed, i))?.probs)
        })
        .collect()
}

fn map_probs(net: &LoraNetwork, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.features.iter().map(|x| Ok(softmax(&net.logits(x)?))).collect()
}

fn val_logits(net: &LoraNetwork, val: &Dataset) -> Result<Vec<(Vec<f64>, usize)>> {
    val.features
        .iter()
        .zip(&val.labels)
        .map(|(x, &y)| Ok((net.logits(x)?, y)))
        .collect()
}

/// Method name, scope and Fisher variant of every configured Laplace method.
pub fn laplace_methods(cfg: &ExperimentConfig) -> Result<Vec<(String, Scope, FisherVariant)>> {
    let variant = cfg.laplace.variant()?;
    let mut methods: Vec<(String, Scope, FisherVariant)> = cfg
        .laplace
        .scopes()?
        .into_iter()
        .map(|s| (s.name().to_string(), s, variant))
        .collect();
    if cfg.laplace.diag_variant {
        methods.push(("la_diag".into(), Scope::All, FisherVariant::Diagonal));
    }
    Ok(methods)
}

/// Seed for the predictive sampling on evaluation set `set_idx` at `step`.
pub fn eval_seed(seed: u64, step: usize, set_idx: usize) -> u64 {
    input_seed(seed ^ (step as u64).rotate_left(32), set_idx)
}

/// Rows for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<ResultRow>> {
    let data = prepare_data(cfg, seed)?;
    let dataset = cfg.task.dataset_name();
    let bins = cfg.experiment.ece_bins;
    let b = &cfg.baselines;
    let predictor = cfg.predict.predictor()?;

    let main = train_member(cfg, &data.fit, seed)?;
    let members: Vec<TrainOutput> = if b.deep_ensemble {
        (1..b.ensemble_size)
            .map(|k| train_member(cfg, &data.fit, member_seed(seed, k)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let laplace_methods = laplace_methods(cfg)?;

    let mut rows = Vec::new();
    for (ci, ckpt) in main.checkpoints.iter().enumerate() {
        let net = &ckpt.net;
        let step = ckpt.step;
        let mut methods: Vec<(String, Box<dyn Fn(&Dataset, u64) -> Result<Vec<Vec<f64>>> + '_>)> =
            Vec::new();
        methods.push(("map".into(), Box::new(move |d, _| map_probs(net, d))));
        if b.temperature {
            let val = data.val.as_ref().expect("temperature implies a validation split");
            val.ensure_tunable()?;
            let t: Temperature = temp_fit(&val_logits(net, val)?)?;
            methods.push((
                "temp".into(),
                Box::new(move |d, _| {
                    d.features
                        .iter()
                        .map(|x| Ok(t.apply(&net.logits(x)?).probs))
                        .collect()
                }),
            ));
        }
        if b.mc_dropout {
            let (rate, n) = (b.dropout_rate, b.dropout_samples);
            methods.push((
                "mc_dropout".into(),
                Box::new(move |d, s| {
                    d.features
                        .iter()
                        .enumerate()
                        .map(|(i, x)| Ok(mc_dropout_predict(net, x, rate, n, input_seed(s, i))?.probs))
                        .collect()
                }),
            ));
        }
        if b.checkpoint_ensemble {
            let nets: Vec<&LoraNetwork> = main.checkpoints[..=ci].iter().map(|c| &c.net).collect();
            methods.push((
                "ckpt_ens".into(),
                Box::new(move |d, _| {
                    d.features
                        .iter()
                        .map(|x| Ok(checkpoint_ensemble_predict(&nets, x)?.probs))
                        .collect()
                }),
            ));
        }
        if b.deep_ensemble {
            let mut nets: Vec<&LoraNetwork> = vec![net];
            nets.extend(members.iter().map(|m| &m.checkpoints[ci].net));
            methods.push((
                "ensemble".into(),
                Box::new(move |d, _| {
                    d.features
                        .iter()
                        .map(|x| Ok(deep_ensemble_predict(&nets, x)?.probs))
                        .collect()
                }),
            ));
        }
        for (name, scope, variant) in &laplace_methods {
            let post = fit_posterior(cfg, net, &data.fit, data.val.as_ref(), *scope, *variant, seed)?;
            methods.push((
                name.clone(),
                Box::new(move |d, s| laplace_probs(net, &post, predictor, d, s)),
            ));
        }

        for (set_idx, (shift, set)) in data.eval_sets().into_iter().enumerate() {
            let set_seed = eval_seed(seed, step, set_idx);
            for (method, predict) in &methods {
                let (acc, ece, nll) = score(predict(set, set_seed)?, set, bins)?;
                rows.push(ResultRow {
                    dataset: dataset.clone(),
                    shift: shift.to_string(),
                    method: method.clone(),
                    seed,
                    step,
                    acc,
                    ece,
                    nll,
                });
            }
        }
    }
    Ok(rows)
}

/// Runs every seed (in parallel). Rows from seeds that succeeded are kept
/// even if others fail.
pub fn run_experiment_partial(cfg: &ExperimentConfig) -> (RunResult, Vec<(u64, Error)>) {
    if let Err(e) = cfg.validate() {
        return (RunResult::default(), vec![(0, e)]);
    }
    let outcomes: Vec<(u64, Result<Vec<ResultRow>>)> = cfg
        .experiment
        .seeds
        .par_iter()
        .map(|&s| (s, run_seed(cfg, s)))
        .collect();
    let mut res = RunResult::default();
    let mut errors = Vec::new();
    for (seed, out) in outcomes {
        match out {
            Ok(rows) => res.rows.extend(rows),
            Err(e) => errors.push((seed, e)),
        }
    }
    res.sort();
    (res, errors)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let (res, mut errors) = run_experiment_partial(cfg);
    match errors.is_empty() {
        true => Ok(res),
        false => Err(errors.swap_remove(0).1),
    }
}
