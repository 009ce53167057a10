//! Datasets: synthetic generators, distribution shifts and CSV I/O.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::fmt_f64;

/// Provenance tag carried by every dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        n_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimMismatch(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(d) = features.first().map(Vec::len) {
            if features.iter().any(|r| r.len() != d) {
                return Err(Error::DimMismatch("ragged feature rows".into()));
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::BadLabel {
                label: l,
                n_classes,
            });
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Errors unless this dataset may feed a hyperparameter tuner.
    pub fn ensure_tunable(&self) -> Result<()> {
        match self.split {
            Split::Test => Err(Error::SplitLeak(self.split.to_string())),
            _ => Ok(()),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn subset(&self, idx: &[usize], split: Split) -> Self {
        Self {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split,
        }
    }

    /// Splits so that the first part holds the first `n_first` examples of
    /// every class (in dataset order).
    pub fn split_per_class(&self, n_first: usize, first: Split, rest: Split) -> (Self, Self) {
        let mut seen = vec![0; self.n_classes];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] < n_first {
                seen[l] += 1;
                a.push(i);
            } else {
                b.push(i);
            }
        }
        (self.subset(&a, first), self.subset(&b, rest))
    }

    /// Random `fraction` / `1 − fraction` partition, stratified by class.
    pub fn split_fraction(&self, fraction: f64, seed: u64, first: Split, rest: Split) -> (Self, Self) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for c in 0..self.n_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let k = (fraction * idx.len() as f64).round() as usize;
            a.extend_from_slice(&idx[..k]);
            b.extend_from_slice(&idx[k..]);
        }
        a.sort_unstable();
        b.sort_unstable();
        (self.subset(&a, first), self.subset(&b, rest))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticSpec {
    /// Isotropic Gaussian blobs with means at distance `separation` from
    /// the origin in random directions.
    Gaussians {
        n_classes: usize,
        n_per_class: usize,
        dim: usize,
        noise: f64,
        separation: f64,
    },
    /// Two interleaved half circles in the first two coordinates.
    Moons {
        n_per_class: usize,
        dim: usize,
        noise: f64,
    },
    /// Concentric rings with radius `separation · (c + 1)`.
    Rings {
        n_classes: usize,
        n_per_class: usize,
        dim: usize,
        noise: f64,
        separation: f64,
    },
}

impl SyntheticSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticSpec::Gaussians { .. } => "gaussians",
            SyntheticSpec::Moons { .. } => "moons",
            SyntheticSpec::Rings { .. } => "rings",
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            SyntheticSpec::Gaussians { n_classes, .. } | SyntheticSpec::Rings { n_classes, .. } => {
                n_classes
            }
            SyntheticSpec::Moons { .. } => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            SyntheticSpec::Gaussians { dim, .. }
            | SyntheticSpec::Moons { dim, .. }
            | SyntheticSpec::Rings { dim, .. } => dim,
        }
    }

    pub fn with_n_per_class(&self, n: usize) -> Self {
        let mut s = self.clone();
        match &mut s {
            SyntheticSpec::Gaussians { n_per_class, .. }
            | SyntheticSpec::Moons { n_per_class, .. }
            | SyntheticSpec::Rings { n_per_class, .. } => *n_per_class = n,
        }
        s
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let n_classes = spec.n_classes();
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    match *spec {
        SyntheticSpec::Gaussians {
            n_classes,
            n_per_class,
            dim,
            noise,
            separation,
        } => {
            if n_classes < 2 || dim == 0 || !(noise >= 0.0) {
                return Err(Error::BadConfig("gaussians: need ≥2 classes, dim ≥1, noise ≥0".into()));
            }
            let means: Vec<Vec<f64>> = (0..n_classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| gauss(&mut rng)).collect();
                    let n = crate::linalg::norm(&v).max(1e-12);
                    v.into_iter().map(|x| separation * x / n).collect()
                })
                .collect();
            for (c, mean) in means.iter().enumerate() {
                for _ in 0..n_per_class {
                    let x = mean.iter().map(|m| m + noise * gauss(&mut rng)).collect();
                    rows.push((x, c));
                }
            }
        }
        SyntheticSpec::Moons {
            n_per_class,
            dim,
            noise,
        } => {
            if dim < 2 || !(noise >= 0.0) {
                return Err(Error::BadConfig("moons: need dim ≥2, noise ≥0".into()));
            }
            for c in 0..2 {
                for _ in 0..n_per_class {
                    let t = PI * rng.random::<f64>();
                    let (x0, x1) = if c == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let mut x = vec![x0, x1];
                    x.resize(dim, 0.0);
                    x.iter_mut().for_each(|v| *v += noise * gauss(&mut rng));
                    rows.push((x, c));
                }
            }
        }
        SyntheticSpec::Rings {
            n_classes,
            n_per_class,
            dim,
            noise,
            separation,
        } => {
            if n_classes < 2 || dim < 2 || !(noise >= 0.0) {
                return Err(Error::BadConfig("rings: need ≥2 classes, dim ≥2, noise ≥0".into()));
            }
            for c in 0..n_classes {
                let r = separation * (c + 1) as f64;
                for _ in 0..n_per_class {
                    let t = 2.0 * PI * rng.random::<f64>();
                    let mut x = vec![r * t.cos(), r * t.sin()];
                    x.resize(dim, 0.0);
                    x.iter_mut().for_each(|v| *v += noise * gauss(&mut rng));
                    rows.push((x, c));
                }
            }
        }
    }
    rows.shuffle(&mut rng);
    let (features, labels) = rows.into_iter().unzip();
    Dataset::new(features, labels, n_classes, Split::Train)
}

/// Covariate shift applied to test features.
#[derive(Clone, Debug, PartialEq)]
pub enum Shift {
    /// Rotation by `degrees` in the plane of the first two features.
    Rotate { degrees: f64 },
    /// Adds `offset`; a single value is broadcast to every feature.
    Translate { offset: Vec<f64> },
    Scale { factor: f64 },
    FeatureNoise { sigma: f64, seed: u64 },
}

impl Shift {
    /// Parses `rotate:30`, `translate:1.5` or `translate:1,0,2`, `scale:2`,
    /// `noise:0.5` (optionally `noise:0.5@7` for a seed).
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::BadConfig(format!("cannot parse shift '{s}'"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        match kind.trim() {
            "rotate" => Ok(Shift::Rotate { degrees: num(arg)? }),
            "translate" => Ok(Shift::Translate {
                offset: arg.split(',').map(num).collect::<Result<_>>()?,
            }),
            "scale" => Ok(Shift::Scale { factor: num(arg)? }),
            "noise" => {
                let (sigma, seed) = match arg.split_once('@') {
                    Some((a, b)) => (num(a)?, b.trim().parse().map_err(|_| bad())?),
                    None => (num(arg)?, 0),
                };
                Ok(Shift::FeatureNoise { sigma, seed })
            }
            _ => Err(bad()),
        }
    }
}

/// Parses a `+`-separated composition such as `rotate:30+translate:1`.
pub fn parse_shifts(s: &str) -> Result<Vec<Shift>> {
    if s.trim().is_empty() || s.trim() == "id" {
        return Ok(Vec::new());
    }
    s.split('+').map(Shift::parse).collect()
}

pub fn apply_shift(ds: &Dataset, shifts: &[Shift]) -> Result<Dataset> {
    let mut out = ds.clone();
    for shift in shifts {
        match shift {
            Shift::Rotate { degrees } => {
                if out.dim() < 2 {
                    return Err(Error::DimMismatch("rotation needs ≥2 features".into()));
                }
                let (s, c) = degrees.to_radians().sin_cos();
                for x in &mut out.features {
                    let (a, b) = (x[0], x[1]);
                    x[0] = c * a - s * b;
                    x[1] = s * a + c * b;
                }
            }
            Shift::Translate { offset } => {
                let d = out.dim();
                if offset.len() != 1 && offset.len() != d {
                    return Err(Error::DimMismatch(format!(
                        "translation of length {} for {d} features",
                        offset.len()
                    )));
                }
                for x in &mut out.features {
                    for (j, v) in x.iter_mut().enumerate() {
                        *v += if offset.len() == 1 { offset[0] } else { offset[j] };
                    }
                }
            }
            Shift::Scale { factor } => {
                for v in out.features.iter_mut().flatten() {
                    *v *= factor;
                }
            }
            Shift::FeatureNoise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                for v in out.features.iter_mut().flatten() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
    Ok(out)
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, render_csv(ds))?;
    Ok(())
}

pub fn render_csv(ds: &Dataset) -> String {
    let mut out: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    out.push("label".into());
    let mut text = out.join(",");
    text.push('\n');
    for (x, y) in ds.features.iter().zip(&ds.labels) {
        for v in x {
            text.push_str(&fmt_f64(*v));
            text.push(',');
        }
        text.push_str(&y.to_string());
        text.push('\n');
    }
    text
}

/// Reads a dataset CSV. When `n_classes` is `None` it is inferred as
/// `max(label) + 1`.
pub fn load_csv(path: &Path, n_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, path, n_classes, split)
}

pub fn parse_csv(text: &str, path: &Path, n_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let d = cols.len().checked_sub(1).ok_or_else(|| perr(1, "empty header".into()))?;
    let expected: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["label".into()]).collect();
    if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(perr(1, format!("header must be x0..x{},label", d.saturating_sub(1))));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut label_lines = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(perr(ln, format!("expected {} fields, found {}", d + 1, fields.len())));
        }
        let x = fields[..d]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| perr(ln, format!("bad feature value '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let y: usize = fields[d]
            .parse()
            .map_err(|_| perr(ln, format!("bad label '{}'", fields[d])))?;
        features.push(x);
        labels.push(y);
        label_lines.push(ln);
    }
    let n_classes = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if let Some(i) = labels.iter().position(|&l| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            path: PathBuf::from(path),
            line: label_lines[i],
            label: labels[i],
            n_classes,
        });
    }
    Dataset::new(features, labels, n_classes, split)
}
