//! Versioned numeric text format shared by checkpoint and curvature files.
//!
//! ```text
//! laplace-lora <kind> v1
//! <key> <value>
//! ...
//! block <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! end
//! ```
//!
//! Floats are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::curvature::{FisherEstimate, KfacBlock, LargeSide};
use crate::laplace::{LaplacePosterior, PriorPrecision, Scope};
use crate::linalg::LowRankFactor;
use crate::lora_net::{Activation, LoraLinear, LoraNetwork};
use crate::train::Checkpoint;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "laplace-lora";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct NumericDoc {
    pub kind: String,
    pub header: Vec<(String, String)>,
    pub blocks: Vec<(String, Matrix)>,
}

impl NumericDoc {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            header: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.push((key.to_string(), value.to_string()));
    }

    pub fn push_block(&mut self, name: impl Into<String>, m: Matrix) {
        self.blocks.push((name.into(), m));
    }

    pub fn render(&self) -> String {
        let mut out = format!("{MAGIC} {} v{FORMAT_VERSION}\n", self.kind);
        for (k, v) in &self.header {
            out.push_str(k);
            out.push(' ');
            out.push_str(v);
            out.push('\n');
        }
        for (name, m) in &self.blocks {
            out.push_str(&format!("block {name} {} {}\n", m.rows(), m.cols()));
            for i in 0..m.rows() {
                let row: Vec<String> = (0..m.cols()).map(|j| fmt_f64(m[(i, j)])).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: PathBuf::from(path),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, first) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut parts = first.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(err(1, format!("missing '{MAGIC}' magic")));
        }
        let kind = parts
            .next()
            .ok_or_else(|| err(1, "missing document kind".into()))?
            .to_string();
        let version = parts.next().unwrap_or("");
        if version != format!("v{FORMAT_VERSION}") {
            return Err(err(1, format!("unsupported version '{version}'")));
        }
        let mut doc = NumericDoc::new(&kind);
        let mut saw_end = false;
        while let Some((ln, line)) = lines.next() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "end" {
                saw_end = true;
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            if key != "block" {
                doc.header.push((key.to_string(), rest.trim().to_string()));
                continue;
            }
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 3 {
                return Err(err(ln, "block header needs name, rows, cols".into()));
            }
            let rows: usize = f[1].parse().map_err(|_| err(ln, "bad row count".into()))?;
            let cols: usize = f[2].parse().map_err(|_| err(ln, "bad column count".into()))?;
            let mut m = Matrix::zeros(rows, cols);
            for i in 0..rows {
                let (rl, row) = lines
                    .next()
                    .ok_or_else(|| err(ln, format!("block '{}' truncated", f[0])))?;
                let vals: Vec<&str> = row.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(err(rl, format!("expected {cols} values, found {}", vals.len())));
                }
                for (j, v) in vals.iter().enumerate() {
                    m[(i, j)] = v
                        .parse()
                        .map_err(|_| err(rl, format!("bad number '{v}'")))?;
                }
            }
            doc.blocks.push((f[0].to_string(), m));
        }
        if !saw_end {
            return Err(err(text.lines().count(), "missing 'end' marker".into()));
        }
        Ok(doc)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.header
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::BadConfig(format!("{} file lacks '{key}'", self.kind)))
    }

    pub fn require_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.require(key)?
            .parse()
            .map_err(|_| Error::BadConfig(format!("{} file: bad value for '{key}'", self.kind)))
    }

    pub fn block(&self, name: &str) -> Result<&Matrix> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::BadConfig(format!("{} file lacks block '{name}'", self.kind)))
    }
}

pub fn checkpoint_to_doc(ckpt: &Checkpoint) -> NumericDoc {
    let net = &ckpt.net;
    let mut doc = NumericDoc::new("checkpoint");
    doc.set("step", ckpt.step);
    doc.set("activation", net.activation().name());
    doc.set("n_layers", net.layers().len());
    for (i, l) in net.layers().iter().enumerate() {
        doc.set(
            &format!("layer{i}"),
            format!(
                "n_in {} n_out {} rank {} alpha {}",
                l.n_in(),
                l.n_out(),
                l.rank(),
                fmt_f64(l.alpha())
            ),
        );
    }
    for (i, l) in net.layers().iter().enumerate() {
        doc.push_block(format!("layer{i}.w0"), l.w0().clone());
        doc.push_block(format!("layer{i}.a"), l.a().clone());
        doc.push_block(format!("layer{i}.b"), l.b().clone());
    }
    doc
}

pub fn checkpoint_from_doc(doc: &NumericDoc) -> Result<Checkpoint> {
    if doc.kind != "checkpoint" {
        return Err(Error::BadConfig(format!(
            "expected a checkpoint file, found '{}'",
            doc.kind
        )));
    }
    let step = doc.require_parse("step")?;
    let activation = Activation::parse(doc.require("activation")?)?;
    let n_layers: usize = doc.require_parse("n_layers")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let meta = doc.require(&format!("layer{i}"))?;
        let alpha = meta
            .split_whitespace()
            .skip_while(|t| *t != "alpha")
            .nth(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::BadConfig(format!("layer{i}: missing alpha")))?;
        layers.push(LoraLinear::new(
            doc.block(&format!("layer{i}.w0"))?.clone(),
            doc.block(&format!("layer{i}.a"))?.clone(),
            doc.block(&format!("layer{i}.b"))?.clone(),
            alpha,
        )?);
    }
    Ok(Checkpoint {
        step,
        net: LoraNetwork::new(layers, activation)?,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint_to_doc(ckpt).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_doc(&NumericDoc::read(path)?)
}

/// Curvature and prior precision; the MAP weights live in the checkpoint.
pub fn posterior_to_doc(post: &LaplacePosterior) -> NumericDoc {
    let mut doc = NumericDoc::new("posterior");
    doc.set("scope", post.scope().name());
    doc.set("fisher", post.fisher().variant_name());
    let (kind, vals) = match post.lambda() {
        PriorPrecision::Scalar(l) => ("scalar", vec![*l]),
        PriorPrecision::PerSublayer(v) => ("per_sublayer", v.clone()),
    };
    doc.set("lambda_kind", kind);
    doc.set(
        "lambda",
        vals.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" "),
    );
    match post.fisher() {
        FisherEstimate::Full(m) => doc.push_block("fisher", m.clone()),
        FisherEstimate::Diagonal(d) => doc.push_block("fisher", Matrix::column(d)),
        FisherEstimate::Kfac(blocks) => {
            doc.set("n_blocks", blocks.len());
            for (i, b) in blocks.iter().enumerate() {
                let side = match b.large_side {
                    LargeSide::Input => "input",
                    LargeSide::Output => "output",
                };
                doc.set(&format!("block{i}"), format!("{} large {side}", b.id.label()));
                doc.push_block(format!("block{i}.small"), b.small_root.clone());
                doc.push_block(format!("block{i}.large"), b.large_root.root().clone());
            }
        }
    }
    doc
}

pub fn posterior_from_doc(doc: &NumericDoc, net: &LoraNetwork) -> Result<LaplacePosterior> {
    if doc.kind != "posterior" {
        return Err(Error::BadConfig(format!(
            "expected a posterior file, found '{}'",
            doc.kind
        )));
    }
    let scope = Scope::parse(doc.require("scope")?)?;
    let vals: Vec<f64> = doc
        .require("lambda")?
        .split_whitespace()
        .map(|v| v.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::BadConfig("posterior file: bad lambda".into()))?;
    let lambda = match doc.require("lambda_kind")? {
        "scalar" if vals.len() == 1 => PriorPrecision::Scalar(vals[0]),
        "per_sublayer" => PriorPrecision::PerSublayer(vals),
        other => {
            return Err(Error::BadConfig(format!(
                "posterior file: bad lambda_kind '{other}'"
            )))
        }
    };
    let fisher = match doc.require("fisher")? {
        "full" => FisherEstimate::Full(doc.block("fisher")?.clone()),
        "diag" => FisherEstimate::Diagonal(doc.block("fisher")?.col(0).to_vec()),
        "kfac" => {
            let n: usize = doc.require_parse("n_blocks")?;
            let ids = scope.sublayers(net);
            if ids.len() != n {
                return Err(Error::LayoutMismatch(format!(
                    "posterior has {n} blocks, scope of this network has {}",
                    ids.len()
                )));
            }
            let mut blocks = Vec::with_capacity(n);
            for (i, id) in ids.into_iter().enumerate() {
                let meta = doc.require(&format!("block{i}"))?;
                let mut parts = meta.split_whitespace();
                if parts.next() != Some(id.label().as_str()) {
                    return Err(Error::LayoutMismatch(format!(
                        "block{i} is '{meta}', expected {}",
                        id.label()
                    )));
                }
                let large_side = match parts.nth(1) {
                    Some("input") => LargeSide::Input,
                    Some("output") => LargeSide::Output,
                    _ => return Err(Error::BadConfig(format!("block{i}: bad orientation"))),
                };
                blocks.push(KfacBlock {
                    id,
                    small_root: doc.block(&format!("block{i}.small"))?.clone(),
                    large_root: LowRankFactor::new(doc.block(&format!("block{i}.large"))?.clone())?,
                    large_side,
                });
            }
            FisherEstimate::Kfac(blocks)
        }
        other => return Err(Error::BadConfig(format!("unknown fisher '{other}'"))),
    };
    LaplacePosterior::new(net, scope, fisher, lambda)
}

pub fn save_posterior(post: &LaplacePosterior, path: &Path) -> Result<()> {
    posterior_to_doc(post).write(path)
}

pub fn load_posterior(path: &Path, net: &LoraNetwork) -> Result<LaplacePosterior> {
    posterior_from_doc(&NumericDoc::read(path)?, net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora_net::{init_network, NetworkConfig};
    use proptest::prelude::*;

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let net = init_network(&NetworkConfig::default(), 9).unwrap();
        let theta: Vec<f64> = (0..net.n_params())
            .map(|i| (i as f64 * 0.7311).sin() / 3.0)
            .collect();
        let ckpt = Checkpoint {
            step: 1234,
            net: net.with_params(&theta).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn parse_errors_cite_line() {
        let text = "laplace-lora checkpoint v1\nstep 3\nblock x 1 2\n1.0 abc\nend\n";
        match NumericDoc::parse(text, Path::new("t.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let bad_version = "laplace-lora checkpoint v9\nend\n";
        assert!(NumericDoc::parse(bad_version, Path::new("t")).is_err());
        let no_end = "laplace-lora checkpoint v1\nstep 3\n";
        assert!(NumericDoc::parse(no_end, Path::new("t")).is_err());
    }

    #[test]
    fn posterior_round_trip() {
        use crate::harness::data::{gen_synthetic, SyntheticSpec};
        use crate::laplace::{fit_exact_classes, FisherVariant};
        let net = init_network(&NetworkConfig { dims: vec![3, 5, 3], rank: 2, ..NetworkConfig::default() }, 1).unwrap();
        let theta: Vec<f64> = (0..net.n_params()).map(|i| (i as f64 * 0.9).cos() * 0.3).collect();
        let net = net.with_params(&theta).unwrap();
        let data = gen_synthetic(
            &SyntheticSpec::Gaussians { n_classes: 3, n_per_class: 4, dim: 3, noise: 1.0, separation: 2.0 },
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (scope, variant, lambda) in [
            (Scope::All, FisherVariant::Kfac, PriorPrecision::Scalar(0.7)),
            (Scope::LastLayer, FisherVariant::Kfac, PriorPrecision::PerSublayer(vec![0.5, 2.0])),
            (Scope::All, FisherVariant::Full, PriorPrecision::Scalar(1.5)),
            (Scope::LastLayer, FisherVariant::Diagonal, PriorPrecision::Scalar(3.0)),
        ] {
            let post = fit_exact_classes(&net, &data, scope, variant, 4, lambda).unwrap();
            let path = dir.path().join("post.txt");
            save_posterior(&post, &path).unwrap();
            assert_eq!(load_posterior(&path, &net).unwrap(), post);
        }
    }

    proptest! {
        #[test]
        fn floats_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt_f64(v);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
