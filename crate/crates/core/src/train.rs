//! MAP fine-tuning of the LoRA parameters with plain SGD.
//!
//! The objective is mean cross-entropy plus `(λ_train / 2)‖θ‖²`, i.e. the
//! negative log-joint under a Gaussian prior up to scaling by `1/N`.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::lora_net::{Dropout, LoraNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub dropout_rate: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 5000,
            batch_size: 4,
            weight_decay: 0.0,
            dropout_rate: 0.1,
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::BadConfig("lr must be positive".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::BadConfig("steps and batch_size must be ≥ 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::BadConfig("weight_decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::BadConfig("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Network state after a given number of optimiser steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub net: LoraNetwork,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// One per `checkpoint_every` steps, plus the final step.
    pub checkpoints: Vec<Checkpoint>,
    /// Mini-batch objective at every step.
    pub losses: Vec<f64>,
}

impl TrainOutput {
    pub fn final_net(&self) -> &LoraNetwork {
        &self.checkpoints.last().expect("at least one checkpoint").net
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[label]` and its gradient `softmax − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::BadLabel {
            label,
            n_classes: logits.len(),
        });
    }
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// `Σ_n log p(y_n | x_n)` at the network's current parameters.
pub fn log_likelihood(net: &LoraNetwork, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let (loss, _) = cross_entropy(&net.logits(x)?, y)?;
        total -= loss;
    }
    Ok(total)
}

/// Full-batch training objective.
pub fn objective(net: &LoraNetwork, data: &Dataset, weight_decay: f64) -> Result<f64> {
    let nll = -log_likelihood(net, data)? / data.len() as f64;
    Ok(nll + 0.5 * weight_decay * net.params().norm_sq())
}

pub fn map_finetune(net: &LoraNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::BadConfig("training set is empty".into()));
    }
    if data.dim() != net.input_dim() {
        return Err(Error::DimMismatch(format!(
            "data has {} features, network expects {}",
            data.dim(),
            net.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = net.clone();
    let mut theta = net.params().theta;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let dropout_rate = cfg.dropout_rate;

    for step in 1..=cfg.steps {
        let mut grad = vec![0.0; theta.len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let dropout = (dropout_rate > 0.0).then(|| Dropout {
                rate: dropout_rate,
                seed: rng.next_u64(),
            });
            let trace = net.forward(&data.features[idx], dropout)?;
            let (l, gl) = cross_entropy(&trace.logits, data.labels[idx])?;
            loss += l;
            let g = net.backward(&trace, &gl)?;
            for (acc, v) in grad.iter_mut().zip(&g.grads) {
                *acc += v;
            }
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        loss *= inv_b;
        loss += 0.5 * cfg.weight_decay * theta.iter().map(|t| t * t).sum::<f64>();
        if !loss.is_finite() {
            let last_good = Checkpoint {
                step: step - 1,
                net: net.clone(),
            };
            return Err(Error::Divergence {
                step,
                last_good: Some(Box::new(last_good)),
            });
        }
        losses.push(loss);
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= cfg.lr * (g * inv_b + cfg.weight_decay * *t);
        }
        net.set_params(&theta)?;
        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if due || step == cfg.steps {
            checkpoints.push(Checkpoint {
                step,
                net: net.clone(),
            });
        }
    }
    Ok(TrainOutput {
        checkpoints,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{gen_synthetic, SyntheticSpec};
    use crate::lora_net::{init_network, NetworkConfig};

    #[test]
    fn cross_entropy_even_logits() {
        let (loss, grad) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!((grad[0] + 0.5).abs() < 1e-15 && (grad[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturated() {
        let (loss, grad) = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-300);
        assert!(grad.iter().all(|g| g.is_finite()));
        let (loss, _) = cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_bad_label() {
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(Error::BadLabel { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_difference() {
        let logits = [0.3, -1.7, 2.2, 0.05];
        let (_, grad) = cross_entropy(&logits, 2).unwrap();
        let eps = 1e-6;
        for i in 0..4 {
            let mut p = logits;
            p[i] += eps;
            let mut m = logits;
            m[i] -= eps;
            let fd = (cross_entropy(&p, 2).unwrap().0 - cross_entropy(&m, 2).unwrap().0)
                / (2.0 * eps);
            assert!((fd - grad[i]).abs() <= 1e-6 * grad[i].abs().max(1e-3));
        }
    }

    fn blobs(seed: u64) -> Dataset {
        gen_synthetic(
            &SyntheticSpec::Gaussians {
                n_classes: 2,
                n_per_class: 40,
                dim: 4,
                noise: 0.0,
                separation: 3.0,
            },
            seed,
        )
        .unwrap()
    }

    fn small_net(seed: u64) -> LoraNetwork {
        init_network(
            &NetworkConfig {
                dims: vec![4, 8, 2],
                rank: 2,
                ..NetworkConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn accuracy(net: &LoraNetwork, data: &Dataset) -> f64 {
        let correct = data
            .features
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| {
                let l = net.logits(x).unwrap();
                crate::metrics::argmax(&l) == y
            })
            .count();
        correct as f64 / data.len() as f64
    }

    #[test]
    fn separable_blobs_are_fit() {
        let data = blobs(1);
        let cfg = TrainConfig {
            steps: 600,
            checkpoint_every: 200,
            ..TrainConfig::default()
        };
        let out = map_finetune(&small_net(0), &data, &cfg).unwrap();
        assert!(accuracy(out.final_net(), &data) >= 0.99);
        assert_eq!(
            out.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
            vec![200, 400, 600]
        );
    }

    #[test]
    fn weight_decay_shrinks_solution() {
        let data = blobs(2);
        let norms: Vec<f64> = [0.0, 0.1, 10.0]
            .iter()
            .map(|&wd| {
                let cfg = TrainConfig {
                    steps: 400,
                    lr: 0.02,
                    weight_decay: wd,
                    dropout_rate: 0.0,
                    ..TrainConfig::default()
                };
                let out = map_finetune(&small_net(0), &data, &cfg).unwrap();
                out.final_net().params().norm_sq()
            })
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2], "{norms:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(3);
        let cfg = TrainConfig {
            steps: 200,
            ..TrainConfig::default()
        };
        let a = map_finetune(&small_net(1), &data, &cfg).unwrap();
        let b = map_finetune(&small_net(1), &data, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn early_training_decreases_full_batch_loss() {
        let data = blobs(4);
        let cfg = TrainConfig {
            steps: 2000,
            lr: 0.01,
            checkpoint_every: 100,
            dropout_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = map_finetune(&small_net(2), &data, &cfg).unwrap();
        let mut curve = vec![objective(&small_net(2), &data, 0.0).unwrap()];
        curve.extend(
            out.checkpoints
                .iter()
                .map(|c| objective(&c.net, &data, 0.0).unwrap()),
        );
        // Every 500-step window ends lower than it starts.
        for w in curve.windows(6) {
            assert!(w[5] < w[0], "{curve:?}");
        }
        let increases = curve.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(increases as f64 <= 0.05 * curve.len() as f64 + 1.0);
    }

    #[test]
    fn divergence_is_reported() {
        let data = blobs(5);
        let cfg = TrainConfig {
            steps: 500,
            lr: 1e6,
            dropout_rate: 0.0,
            ..TrainConfig::default()
        };
        match map_finetune(&small_net(0), &data, &cfg) {
            Err(Error::Divergence { step, last_good }) => {
                let last_good = last_good.expect("last good state");
                assert_eq!(last_good.step + 1, step);
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.losses.len())),
        }
    }

    #[test]
    fn rejects_empty_data() {
        let mut data = blobs(1);
        data.features.clear();
        data.labels.clear();
        assert!(map_finetune(&small_net(0), &data, &TrainConfig::default()).is_err());
    }
}
