//! Linearized predictive: a Gaussian over logits and four ways of turning
//! it into class probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::laplace::{LaplacePosterior, PosteriorSolver};
use crate::linalg::{cholesky, Matrix};
use crate::lora_net::LoraNetwork;
use crate::train::softmax;

pub const DEFAULT_MC_SAMPLES: usize = 1000;

/// `N(mu, cov)` over the logits of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGaussian {
    pub mu: Vec<f64>,
    pub cov: Matrix,
}

impl LogitGaussian {
    /// Symmetrizes `cov` after checking it is square, finite and symmetric
    /// to 1e-8 (relative to its largest entry).
    pub fn new(mu: Vec<f64>, mut cov: Matrix) -> Result<Self> {
        if cov.shape() != (mu.len(), mu.len()) {
            return Err(Error::DimMismatch(format!(
                "{} logits with a {}x{} covariance",
                mu.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        if !cov.is_finite() || mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit Gaussian".into()));
        }
        if !cov.is_symmetric(1e-8 * cov.max_abs().max(1.0)) {
            return Err(Error::DimMismatch("logit covariance is not symmetric".into()));
        }
        cov.symmetrize();
        Ok(Self { mu, cov })
    }

    pub fn n_classes(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveProbs {
    pub probs: Vec<f64>,
}

impl PredictiveProbs {
    fn from_unnormalized(mut p: Vec<f64>) -> Self {
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        Self { probs: p }
    }
}

/// Seed for the `index`-th input of a batch, so results do not depend on
/// evaluation order or thread count.
pub fn input_seed(base: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Logit Gaussian at `x`; factorizes the posterior on every call.
pub fn logit_posterior(net: &LoraNetwork, post: &LaplacePosterior, x: &[f64]) -> Result<LogitGaussian> {
    logit_posterior_with(net, post, &post.solver()?, x)
}

/// Logit Gaussian at `x` using a prepared solver.
pub fn logit_posterior_with(
    net: &LoraNetwork,
    post: &LaplacePosterior,
    solver: &PosteriorSolver,
    x: &[f64],
) -> Result<LogitGaussian> {
    post.check_net(net)?;
    let j = net.logits_jacobian(x)?;
    let jac = post.restrict_jacobian(net, &j.jac);
    LogitGaussian::new(j.logits, solver.logit_cov(&jac))
}

fn mc_average(
    mu: &[f64],
    n_samples: usize,
    seed: u64,
    mut noise: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<PredictiveProbs> {
    if n_samples == 0 {
        return Err(Error::BadConfig("need at least one MC sample".into()));
    }
    let c = mu.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; c];
    let mut xi = vec![0.0; c];
    let mut z = vec![0.0; c];
    for _ in 0..n_samples {
        xi.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let e = noise(&xi);
        for k in 0..c {
            z[k] = mu[k] + e[k];
        }
        for (a, p) in acc.iter_mut().zip(softmax(&z)) {
            *a += p;
        }
    }
    Ok(PredictiveProbs::from_unnormalized(acc))
}

/// Mean of `softmax(mu + L ξ)` with `L Lᵀ = Λ`.
pub fn bma_mc_joint(lg: &LogitGaussian, n_samples: usize, seed: u64) -> Result<PredictiveProbs> {
    if lg.cov.max_abs() == 0.0 {
        return Ok(PredictiveProbs {
            probs: softmax(&lg.mu),
        });
    }
    let chol = cholesky(&lg.cov, 0.0)?;
    let l = chol.lower();
    mc_average(&lg.mu, n_samples, seed, |xi| l.matvec(xi))
}

/// As [`bma_mc_joint`] with the off-diagonal covariance dropped.
pub fn bma_mc_indep(lg: &LogitGaussian, n_samples: usize, seed: u64) -> Result<PredictiveProbs> {
    let sd: Vec<f64> = lg.cov.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    if sd.iter().all(|&s| s == 0.0) {
        return Ok(PredictiveProbs {
            probs: softmax(&lg.mu),
        });
    }
    mc_average(&lg.mu, n_samples, seed, |xi| {
        xi.iter().zip(&sd).map(|(x, s)| x * s).collect()
    })
}

/// `softmax(mu / √(1 + π/8 · diag Λ))`.
pub fn probit_predict(lg: &LogitGaussian) -> PredictiveProbs {
    let kappa = std::f64::consts::PI / 8.0;
    let z: Vec<f64> = lg
        .mu
        .iter()
        .zip(lg.cov.diag())
        .map(|(m, v)| m / (1.0 + kappa * v.max(0.0)).sqrt())
        .collect();
    PredictiveProbs { probs: softmax(&z) }
}

/// Laplace bridge concentration parameters
/// `α_i = (1/Λ_ii)(1 − 2/C + e^{μ_i}/C² Σ_j e^{−μ_j})`.
pub fn bridge_alpha(lg: &LogitGaussian) -> Result<Vec<f64>> {
    let c = lg.n_classes() as f64;
    let diag = lg.cov.diag();
    (0..lg.n_classes())
        .map(|i| {
            if !(diag[i] > 0.0) {
                return Err(Error::NonPositiveAlpha { class: i });
            }
            let s: f64 = lg.mu.iter().map(|mj| (lg.mu[i] - mj).exp()).sum();
            let a = (1.0 - 2.0 / c + s / (c * c)) / diag[i];
            if a > 0.0 && a.is_finite() {
                Ok(a)
            } else {
                Err(Error::NonPositiveAlpha { class: i })
            }
        })
        .collect()
}

/// Mean of the Laplace-bridge Dirichlet.
pub fn bridge_predict(lg: &LogitGaussian) -> Result<PredictiveProbs> {
    Ok(PredictiveProbs::from_unnormalized(bridge_alpha(lg)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    McJoint { samples: usize },
    McIndep { samples: usize },
    Probit,
    Bridge,
}

impl Default for Predictor {
    fn default() -> Self {
        Predictor::McJoint {
            samples: DEFAULT_MC_SAMPLES,
        }
    }
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::McJoint { .. } => "mc_joint",
            Predictor::McIndep { .. } => "mc_indep",
            Predictor::Probit => "probit",
            Predictor::Bridge => "bridge",
        }
    }

    pub fn parse(s: &str, samples: usize) -> Result<Self> {
        match s {
            "mc_joint" => Ok(Predictor::McJoint { samples }),
            "mc_indep" => Ok(Predictor::McIndep { samples }),
            "probit" => Ok(Predictor::Probit),
            "bridge" => Ok(Predictor::Bridge),
            _ => Err(Error::BadConfig(format!(
                "unknown predictor '{s}' (mc_joint, mc_indep, probit, bridge)"
            ))),
        }
    }

    pub fn predict(self, lg: &LogitGaussian, seed: u64) -> Result<PredictiveProbs> {
        match self {
            Predictor::McJoint { samples } => bma_mc_joint(lg, samples, seed),
            Predictor::McIndep { samples } => bma_mc_indep(lg, samples, seed),
            Predictor::Probit => Ok(probit_predict(lg)),
            Predictor::Bridge => bridge_predict(lg),
        }
    }
}
