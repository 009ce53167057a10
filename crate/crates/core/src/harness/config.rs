//! Experiment configuration, read from TOML. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curvature::{FisherMode, KfacOptions};
use crate::error::{Error, Result};
use crate::harness::data::{parse_shifts, Shift, SyntheticSpec};
use crate::laplace::{FisherVariant, Scope};
use crate::lora_net::NetworkConfig;
use crate::predict::Predictor;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    /// `gaussians`, `moons`, `rings` or `csv`.
    pub generator: String,
    pub n_classes: usize,
    pub dim: usize,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
    pub noise: f64,
    pub separation: f64,
    /// Used when `generator = "csv"`.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            generator: "gaussians".into(),
            n_classes: 4,
            dim: 8,
            n_train_per_class: 50,
            n_test_per_class: 250,
            noise: 2.0,
            separation: 3.0,
            train_csv: None,
            test_csv: None,
        }
    }
}

impl TaskConfig {
    pub fn synthetic(&self, n_per_class: usize) -> Result<SyntheticSpec> {
        Ok(match self.generator.as_str() {
            "gaussians" => SyntheticSpec::Gaussians {
                n_classes: self.n_classes,
                n_per_class,
                dim: self.dim,
                noise: self.noise,
                separation: self.separation,
            },
            "moons" => SyntheticSpec::Moons {
                n_per_class,
                dim: self.dim,
                noise: self.noise,
            },
            "rings" => SyntheticSpec::Rings {
                n_classes: self.n_classes,
                n_per_class,
                dim: self.dim,
                noise: self.noise,
                separation: self.separation,
            },
            other => {
                return Err(Error::BadConfig(format!(
                    "generator '{other}' is not synthetic (gaussians, moons, rings)"
                )))
            }
        })
    }

    /// Label for the `dataset` column.
    pub fn dataset_name(&self) -> String {
        match (&self.generator[..], &self.train_csv) {
            ("csv", Some(p)) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
            (g, _) => g.to_string(),
        }
    }
}

/// Training hyper-parameters; the seed and checkpoint cadence come from the
/// experiment section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            steps: t.steps,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            dropout_rate: t.dropout_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaplaceSection {
    /// Any of `llla`, `la`.
    pub scopes: Vec<String>,
    /// `full`, `diag` or `kfac`.
    pub fisher: String,
    pub n_kfac: usize,
    /// `exact` (all classes) or `mc` (one sampled label).
    pub fisher_mode: String,
    /// `evidence`, `valnll` or `fixed`.
    pub lambda_mode: String,
    pub lambda_init: f64,
    pub per_sublayer_lambda: bool,
    /// Also report LA with a diagonal Fisher as `la_diag`.
    pub diag_variant: bool,
    pub evidence_lr: f64,
    pub evidence_steps: usize,
    pub valnll_lr: f64,
    pub valnll_steps: usize,
    pub valnll_batch: usize,
}

impl Default for LaplaceSection {
    fn default() -> Self {
        Self {
            scopes: vec!["llla".into(), "la".into()],
            fisher: "kfac".into(),
            n_kfac: crate::curvature::DEFAULT_N_KFAC,
            fisher_mode: "exact".into(),
            lambda_mode: "evidence".into(),
            lambda_init: 1.0,
            per_sublayer_lambda: false,
            diag_variant: false,
            evidence_lr: 0.1,
            evidence_steps: 100,
            valnll_lr: 0.1,
            valnll_steps: 1000,
            valnll_batch: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    Evidence,
    ValNll,
    Fixed,
}

impl LambdaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "evidence" => Ok(LambdaMode::Evidence),
            "valnll" => Ok(LambdaMode::ValNll),
            "fixed" => Ok(LambdaMode::Fixed),
            _ => Err(Error::BadConfig(format!(
                "unknown lambda_mode '{s}' (evidence, valnll, fixed)"
            ))),
        }
    }
}

impl LaplaceSection {
    pub fn scopes(&self) -> Result<Vec<Scope>> {
        self.scopes.iter().map(|s| Scope::parse(s)).collect()
    }

    pub fn variant(&self) -> Result<FisherVariant> {
        FisherVariant::parse(&self.fisher)
    }

    pub fn lambda_mode(&self) -> Result<LambdaMode> {
        LambdaMode::parse(&self.lambda_mode)
    }

    pub fn kfac_options(&self, seed: u64) -> Result<KfacOptions> {
        let mode = match self.fisher_mode.as_str() {
            "exact" => FisherMode::Exact,
            "mc" => FisherMode::MonteCarlo { seed },
            other => {
                return Err(Error::BadConfig(format!(
                    "unknown fisher_mode '{other}' (exact, mc)"
                )))
            }
        };
        Ok(KfacOptions {
            n_kfac: self.n_kfac,
            mode,
            ..KfacOptions::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    /// `mc_joint`, `mc_indep`, `probit` or `bridge`.
    pub predictor: String,
    pub samples: usize,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            predictor: "mc_joint".into(),
            samples: crate::predict::DEFAULT_MC_SAMPLES,
        }
    }
}

impl PredictSection {
    pub fn predictor(&self) -> Result<Predictor> {
        Predictor::parse(&self.predictor, self.samples)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub mc_dropout: bool,
    pub dropout_rate: f64,
    pub dropout_samples: usize,
    pub checkpoint_ensemble: bool,
    pub deep_ensemble: bool,
    pub ensemble_size: usize,
    pub temperature: bool,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            mc_dropout: true,
            dropout_rate: 0.1,
            dropout_samples: 10,
            checkpoint_ensemble: true,
            deep_ensemble: true,
            ensemble_size: 3,
            temperature: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    /// Each entry is one shifted test set, e.g. `translate:3` or
    /// `rotate:30+noise:0.5@1`.
    pub shifts: Vec<String>,
    pub ece_bins: usize,
    pub out_dir: PathBuf,
    /// Fraction of the training data kept for fitting when a validation
    /// split is needed.
    pub train_fraction: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            eval_every: 1000,
            shifts: Vec::new(),
            ece_bins: crate::metrics::DEFAULT_ECE_BINS,
            out_dir: PathBuf::from("out"),
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub laplace: LaplaceSection,
    pub predict: PredictSection,
    pub baselines: BaselineSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0),
            msg: e.message().to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides one key given as `section.key`. The value is read as a TOML
    /// literal, falling back to a bare string (`fisher=diag` works unquoted).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |msg: String| Error::BadConfig(msg);
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| bad(format!("override '{key}' must look like section.key")))?;
        let parsed = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        let sec = table
            .get_mut(section)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| bad(format!("unknown config section '{section}'")))?;
        sec.insert(name.to_string(), parsed);
        let text = toml::to_string(&table).expect("table serializes");
        *self = toml::from_str(&text).map_err(|e| bad(format!("override {key}={value}: {}", e.message())))?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            weight_decay: self.train.weight_decay,
            dropout_rate: self.train.dropout_rate,
            checkpoint_every: self.experiment.eval_every,
            seed,
        }
    }

    pub fn shifts(&self) -> Result<Vec<(String, Vec<Shift>)>> {
        self.experiment
            .shifts
            .iter()
            .map(|s| Ok((s.clone(), parse_shifts(s)?)))
            .collect()
    }

    /// A validation split is carved from training data only when something
    /// consumes it.
    pub fn needs_validation(&self) -> Result<bool> {
        Ok(self.laplace.lambda_mode()? == LambdaMode::ValNll || self.baselines.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train_config(0).validate()?;
        if self.experiment.eval_every == 0 {
            return Err(Error::BadConfig("experiment.eval_every must be ≥ 1".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::BadConfig("experiment.seeds is empty".into()));
        }
        if self.experiment.ece_bins == 0 {
            return Err(Error::BadConfig("experiment.ece_bins must be ≥ 1".into()));
        }
        if !(self.experiment.train_fraction > 0.0 && self.experiment.train_fraction < 1.0) {
            return Err(Error::BadConfig("experiment.train_fraction must be in (0, 1)".into()));
        }
        self.laplace.scopes()?;
        self.laplace.variant()?;
        self.laplace.lambda_mode()?;
        self.laplace.kfac_options(0)?;
        if self.laplace.n_kfac == 0 {
            return Err(Error::BadConfig("laplace.n_kfac must be ≥ 1".into()));
        }
        if !(self.laplace.lambda_init > 0.0 && self.laplace.lambda_init.is_finite()) {
            return Err(Error::BadConfig("laplace.lambda_init must be positive".into()));
        }
        self.predict.predictor()?;
        if self.baselines.deep_ensemble && self.baselines.ensemble_size == 0 {
            return Err(Error::BadConfig("baselines.ensemble_size must be ≥ 1".into()));
        }
        self.shifts()?;
        if self.task.generator == "csv" {
            if self.task.train_csv.is_none() || self.task.test_csv.is_none() {
                return Err(Error::BadConfig("csv task needs train_csv and test_csv".into()));
            }
        } else {
            self.task.synthetic(1)?;
        }
        let dims = &self.network.dims;
        if self.task.generator != "csv" {
            let spec = self.task.synthetic(1)?;
            if dims.first() != Some(&spec.dim()) || dims.last() != Some(&spec.n_classes()) {
                return Err(Error::BadConfig(format!(
                    "network dims {dims:?} do not match task ({} features, {} classes)",
                    spec.dim(),
                    spec.n_classes()
                )));
            }
        }
        Ok(())
    }
}

/// Documentation of every configuration key, shown by `--help`.
pub const CONFIG_HELP: &str = "\
Configuration file (TOML). Every key is optional; unknown keys are errors.

[task]
  generator          gaussians | moons | rings | csv          (gaussians)
  n_classes          classes for gaussians/rings               (4)
  dim                input features                            (8)
  n_train_per_class  training points per class                 (50)
  n_test_per_class   test points per class                     (250)
  noise              per-feature Gaussian noise scale          (2.0)
  separation         class-mean norm / ring spacing            (3.0)
  train_csv          training CSV for generator = csv
  test_csv           test CSV for generator = csv
[network]
  dims               layer widths, input first                 ([8, 32, 32, 4])
  rank               LoRA rank                                 (8)
  alpha              LoRA scaling numerator                    (16.0)
  activation         tanh | relu                               (tanh)
[train]
  lr                 SGD learning rate                         (0.05)
  steps              optimiser steps                           (5000)
  batch_size         examples per step                         (4)
  weight_decay       L2 coefficient                            (0.0)
  dropout_rate       LoRA dropout during training              (0.1)
[laplace]
  scopes             subset of [\"llla\", \"la\"]                  ([\"llla\", \"la\"])
  fisher             kfac | full | diag                        (kfac)
  n_kfac             rank of the large Kronecker factor        (10)
  fisher_mode        exact | mc                                (exact)
  lambda_mode        evidence | valnll | fixed                 (evidence)
  lambda_init        initial prior precision                   (1.0)
  per_sublayer_lambda  one precision per adapter sublayer      (false)
  diag_variant       also report la_diag                       (false)
  evidence_lr        step size for evidence ascent             (0.1)
  evidence_steps     evidence ascent steps                     (100)
  valnll_lr          step size for validation-NLL ascent       (0.1)
  valnll_steps       validation-NLL steps                      (1000)
  valnll_batch       validation mini-batch                     (4)
[predict]
  predictor          mc_joint | mc_indep | probit | bridge     (mc_joint)
  samples            MC samples per input                      (1000)
[baselines]
  mc_dropout         report mc_dropout                         (true)
  dropout_rate       MC dropout rate                           (0.1)
  dropout_samples    MC dropout passes                         (10)
  checkpoint_ensemble  report ckpt_ens (last 3 checkpoints)    (true)
  deep_ensemble      report ensemble                           (true)
  ensemble_size      independently trained members             (3)
  temperature        report temp (needs a validation split)    (true)
[experiment]
  seeds              run seeds                                 ([0, 1, 2])
  eval_every         steps between checkpoints                 (1000)
  shifts             shifted test sets, e.g. [\"translate:3\"]
                     transforms: rotate:DEG  translate:V or V1,V2,..
                     scale:S  noise:SIGMA@SEED, joined with '+'
  ece_bins           equal-width calibration bins              (15)
  out_dir            output directory                          (out)
  train_fraction     kept for fitting when validating          (0.8)
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = "[train]\nlr = 0.1\nstpes = 10\n";
        match ExperimentConfig::from_toml(text, Path::new("c.toml")) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("stpes"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(ExperimentConfig::from_toml("[nope]\n", Path::new("c")).is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[experiment]\nseeds = [4]\nshifts = [\"translate:2\"]\n",
            Path::new("c"),
        )
        .unwrap();
        assert_eq!(cfg.experiment.seeds, vec![4]);
        assert_eq!(cfg.train, TrainSection::default());
        assert_eq!(cfg.shifts().unwrap().len(), 1);
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.network.dims = vec![5, 16, 4];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.laplace.lambda_mode = "grid".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_split_rule() {
        let mut cfg = ExperimentConfig::default();
        cfg.baselines.temperature = false;
        assert!(!cfg.needs_validation().unwrap());
        cfg.laplace.lambda_mode = "valnll".into();
        assert!(cfg.needs_validation().unwrap());
    }

    #[test]
    fn overrides_replace_single_keys() {
        let mut cfg = ExperimentConfig::default();
        cfg.set_key("train.steps", "77").unwrap();
        cfg.set_key("laplace.fisher", "diag").unwrap();
        cfg.set_key("experiment.seeds", "[4, 5]").unwrap();
        cfg.set_key("experiment.shifts", "[\"rotate:30\"]").unwrap();
        cfg.set_key("task.train_csv", "data/train.csv").unwrap();
        assert_eq!(cfg.train.steps, 77);
        assert_eq!(cfg.laplace.fisher, "diag");
        assert_eq!(cfg.experiment.seeds, vec![4, 5]);
        assert_eq!(cfg.experiment.shifts, vec!["rotate:30".to_string()]);
        assert_eq!(cfg.task.train_csv, Some(PathBuf::from("data/train.csv")));
        assert_eq!(cfg.network, ExperimentConfig::default().network);
        assert!(cfg.set_key("train.stepz", "1").is_err());
        assert!(cfg.set_key("nosection.x", "1").is_err());
        assert!(cfg.set_key("steps", "1").is_err());
        assert!(cfg.set_key("train.steps", "\"many\"").is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let cfg = ExperimentConfig::default();
        let value: toml::Table = toml::from_str(&cfg.to_toml()).unwrap();
        for (section, body) in &value {
            assert!(CONFIG_HELP.contains(&format!("[{section}]")), "{section}");
            for key in body.as_table().unwrap().keys() {
                assert!(CONFIG_HELP.contains(&format!("  {key} ")), "{section}.{key}");
            }
        }
        for key in ["train_csv", "test_csv"] {
            assert!(CONFIG_HELP.contains(key));
        }
    }
}
