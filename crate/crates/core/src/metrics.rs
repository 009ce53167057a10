//! Accuracy, NLL and expected calibration error.

use crate::error::{Error, Result};

/// Floor applied to the true-class probability before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub probs: Vec<f64>,
    pub label: usize,
}

impl EvalRecord {
    pub fn new(probs: Vec<f64>, label: usize) -> Result<Self> {
        if label >= probs.len() {
            return Err(Error::BadLabel {
                label,
                n_classes: probs.len(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NonFinite(format!(
                "probabilities do not form a simplex (sum {sum})"
            )));
        }
        Ok(Self { probs, label })
    }

    pub fn confidence(&self) -> f64 {
        self.probs[argmax(&self.probs)]
    }

    pub fn correct(&self) -> bool {
        argmax(&self.probs) == self.label
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EceConfig {
    pub n_bins: usize,
}

impl Default for EceConfig {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_ECE_BINS,
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::DimMismatch("no evaluation records".into()))
    } else {
        Ok(())
    }
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    let hits = records.iter().filter(|r| r.correct()).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Mean negative log-probability of the true label.
pub fn nll(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    let total: f64 = records
        .iter()
        .map(|r| -r.probs[r.label].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / records.len() as f64)
}

/// Bin of a confidence value: bin `m` covers `(m/M, (m+1)/M]`, 0 goes to bin 0.
pub fn bin_index(conf: f64, n_bins: usize) -> usize {
    let m = n_bins as f64;
    let mut b = (conf * m).ceil() as isize - 1;
    // guard the ceil against representation error at the edges
    if b >= 0 && conf <= b as f64 / m {
        b -= 1;
    }
    if b + 1 < n_bins as isize && conf > (b + 1) as f64 / m {
        b += 1;
    }
    b.clamp(0, n_bins as isize - 1) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

pub fn reliability_bins(records: &[EvalRecord], cfg: &EceConfig) -> Result<Vec<ReliabilityBin>> {
    if cfg.n_bins == 0 {
        return Err(Error::BadConfig("ECE needs at least one bin".into()));
    }
    let mut count = vec![0usize; cfg.n_bins];
    let mut hits = vec![0.0; cfg.n_bins];
    let mut conf = vec![0.0; cfg.n_bins];
    for r in records {
        let c = r.confidence();
        let b = bin_index(c, cfg.n_bins);
        count[b] += 1;
        conf[b] += c;
        if r.correct() {
            hits[b] += 1.0;
        }
    }
    let m = cfg.n_bins as f64;
    Ok((0..cfg.n_bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            ReliabilityBin {
                lower: b as f64 / m,
                upper: (b + 1) as f64 / m,
                count: count[b],
                accuracy: hits[b] / n,
                confidence: conf[b] / n,
            }
        })
        .collect())
}

pub fn ece(records: &[EvalRecord], cfg: &EceConfig) -> Result<f64> {
    nonempty(records)?;
    let n = records.len() as f64;
    Ok(reliability_bins(records, cfg)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Per-bin CSV suitable for reliability plots.
pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("lower,upper,count,accuracy,confidence\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lower, b.upper, b.count, b.accuracy, b.confidence
        ));
    }
    out
}
