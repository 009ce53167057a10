//! Comparison predictors: temperature scaling, MC dropout and ensembles.
//! Ensembles average probabilities, not logits.

use crate::error::{Error, Result};
use crate::lora_net::{Dropout, LoraNetwork};
use crate::predict::{input_seed, PredictiveProbs};
use crate::train::{log_sum_exp, softmax};

/// Search interval for `log t`.
pub const LOG_T_BOUNDS: (f64, f64) = (-4.0, 4.0);
pub const TEMP_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub t: f64,
}

impl Temperature {
    pub fn apply(&self, logits: &[f64]) -> PredictiveProbs {
        let z: Vec<f64> = logits.iter().map(|l| l / self.t).collect();
        PredictiveProbs { probs: softmax(&z) }
    }
}

/// Mean NLL of `softmax(logits / t)`.
pub fn temp_nll(sets: &[(Vec<f64>, usize)], t: f64) -> f64 {
    let total: f64 = sets
        .iter()
        .map(|(l, y)| {
            let z: Vec<f64> = l.iter().map(|v| v / t).collect();
            log_sum_exp(&z) - z[*y]
        })
        .sum();
    total / sets.len() as f64
}

/// Golden-section search over `log t`; never returns a temperature whose
/// NLL exceeds that of `t = 1`.
pub fn temp_fit(sets: &[(Vec<f64>, usize)]) -> Result<Temperature> {
    if sets.is_empty() {
        return Err(Error::BadConfig("temperature fit needs validation logits".into()));
    }
    if let Some((l, y)) = sets.iter().find(|(l, y)| *y >= l.len()) {
        return Err(Error::BadLabel {
            label: *y,
            n_classes: l.len(),
        });
    }
    let f = |s: f64| temp_nll(sets, s.exp());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LOG_T_BOUNDS;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TEMP_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let s = 0.5 * (a + b);
    let t = if f(s) <= f(0.0) { s.exp() } else { 1.0 };
    Ok(Temperature { t })
}

/// Mean softmax over `n` forward passes with adapter dropout.
pub fn mc_dropout_predict(
    net: &LoraNetwork,
    x: &[f64],
    rate: f64,
    n: usize,
    seed: u64,
) -> Result<PredictiveProbs> {
    if n == 0 {
        return Err(Error::BadConfig("MC dropout needs at least one pass".into()));
    }
    if rate == 0.0 {
        // every pass is the deterministic one
        return Ok(PredictiveProbs {
            probs: softmax(&net.logits(x)?),
        });
    }
    let mut acc = vec![0.0; net.n_classes()];
    for pass in 0..n {
        let d = Dropout {
            rate,
            seed: input_seed(seed, pass),
        };
        let p = softmax(&net.forward(x, Some(d))?.logits);
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(PredictiveProbs { probs: acc })
}

fn mean_softmax(nets: &[&LoraNetwork], x: &[f64]) -> Result<PredictiveProbs> {
    let Some(first) = nets.first() else {
        return Err(Error::BadConfig("ensemble needs at least one member".into()));
    };
    let mut acc = vec![0.0; first.n_classes()];
    for net in nets {
        let p = softmax(&net.logits(x)?);
        if p.len() != acc.len() {
            return Err(Error::DimMismatch("ensemble members disagree on class count".into()));
        }
        acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= nets.len() as f64);
    Ok(PredictiveProbs { probs: acc })
}

/// Checkpoints passed in training order; the most recent three are used.
pub fn checkpoint_ensemble_predict(checkpoints: &[&LoraNetwork], x: &[f64]) -> Result<PredictiveProbs> {
    let start = checkpoints.len().saturating_sub(3);
    mean_softmax(&checkpoints[start..], x)
}

pub fn deep_ensemble_predict(nets: &[&LoraNetwork], x: &[f64]) -> Result<PredictiveProbs> {
    mean_softmax(nets, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora_net::{init_network, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn calibrated(n: usize, scale: f64, seed: u64) -> Vec<(Vec<f64>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let l: Vec<f64> = (0..4).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                let p = softmax(&l);
                let u: f64 = rng.random();
                let mut cum = 0.0;
                let y = p.iter().position(|pi| {
                    cum += pi;
                    u < cum
                });
                (l.iter().map(|v| v * scale).collect(), y.unwrap_or(3))
            })
            .collect()
    }

    fn net(seed: u64) -> LoraNetwork {
        let n = init_network(&NetworkConfig { dims: vec![3, 6, 3], rank: 2, ..NetworkConfig::default() }, seed).unwrap();
        let theta: Vec<f64> = (0..n.n_params()).map(|i| ((i as f64 + seed as f64) * 0.37).sin() * 0.4).collect();
        n.with_params(&theta).unwrap()
    }

    #[test]
    fn calibrated_logits_keep_unit_temperature() {
        let t = temp_fit(&calibrated(20_000, 1.0, 1)).unwrap().t;
        assert!((t - 1.0).abs() < 0.1, "t = {t}");
    }

    #[test]
    fn overconfident_logits_get_cooled() {
        let t = temp_fit(&calibrated(20_000, 10.0, 2)).unwrap().t;
        assert!((t / 10.0 - 1.0).abs() < 0.2, "t = {t}");
    }

    #[test]
    fn single_correct_example_hits_lower_bound() {
        let t = temp_fit(&[(vec![2.0, 0.0, -1.0], 0)]).unwrap().t;
        assert!((t.ln() - LOG_T_BOUNDS.0).abs() < 1e-4);
    }

    #[test]
    fn temperature_never_increases_nll() {
        for seed in 0..10 {
            let sets = calibrated(50, 0.3 + seed as f64, seed);
            let t = temp_fit(&sets).unwrap().t;
            assert!(temp_nll(&sets, t) <= temp_nll(&sets, 1.0));
        }
        assert!(temp_fit(&[]).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_map() {
        let n = net(1);
        let x = [0.5, -1.0, 0.3];
        let map = softmax(&n.logits(&x).unwrap());
        assert_eq!(mc_dropout_predict(&n, &x, 0.0, 10, 3).unwrap().probs, map);
    }

    #[test]
    fn dropout_is_seeded_and_stochastic() {
        let n = net(2);
        let x = [0.5, -1.0, 0.3];
        let a = mc_dropout_predict(&n, &x, 0.1, 10, 3).unwrap();
        assert_eq!(a, mc_dropout_predict(&n, &x, 0.1, 10, 3).unwrap());
        let passes: Vec<f64> = (0..50)
            .map(|s| mc_dropout_predict(&n, &x, 0.1, 1, s).unwrap().probs[0])
            .collect();
        let mean = passes.iter().sum::<f64>() / 50.0;
        let var = passes.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / 49.0;
        assert!(var > 0.0);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensembles_average_probabilities() {
        let nets = [net(1), net(2), net(3), net(4)];
        let x = [0.2, 0.1, -0.4];
        let map = softmax(&nets[0].logits(&x).unwrap());
        assert_eq!(checkpoint_ensemble_predict(&[&nets[0]], &x).unwrap().probs, map);
        let same = checkpoint_ensemble_predict(&[&nets[0], &nets[0], &nets[0]], &x).unwrap();
        for (a, b) in same.probs.iter().zip(&map) {
            assert!((a - b).abs() < 1e-15);
        }
        let refs: Vec<&LoraNetwork> = nets.iter().collect();
        let got = checkpoint_ensemble_predict(&refs, &x).unwrap();
        let ps: Vec<Vec<f64>> = nets[1..].iter().map(|n| softmax(&n.logits(&x).unwrap())).collect();
        for k in 0..3 {
            let m = (ps[0][k] + ps[1][k] + ps[2][k]) / 3.0;
            assert!((got.probs[k] - m).abs() < 1e-15);
        }
        let de = deep_ensemble_predict(&refs[1..], &x).unwrap();
        assert_eq!(de, got);
        assert!(deep_ensemble_predict(&[], &x).is_err());
    }
}
