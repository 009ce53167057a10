//! Feedforward classifier with frozen base weights and LoRA adapters.
//!
//! Each linear layer computes `h = W₀ x + (alpha / rank) · B A x̃`, where
//! `x̃` is the adapter input after (optional) inverted dropout. Only `A` and
//! `B` are trainable. For curvature purposes every adapter is treated as two
//! linear sublayers: the A-sublayer maps `x̃ ↦ u = A x̃` and the B-sublayer
//! maps `u ↦ z = B u`, with `h = W₀ x + scale · z`.
//!
//! Parameters are flattened layer by layer as `vec(A)` followed by `vec(B)`
//! (column-major, see [`crate::linalg`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => h.tanh(),
            Activation::Relu => h.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = h.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::BadConfig(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Layer widths including input and output, e.g. `[8, 32, 32, 4]`.
    pub dims: Vec<usize>,
    /// Requested LoRA rank; each layer uses `min(rank, n_in, n_out)`.
    pub rank: usize,
    pub alpha: f64,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            dims: vec![8, 32, 32, 4],
            rank: 8,
            alpha: 16.0,
            activation: Activation::Tanh,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::BadConfig("need at least input and output dims".into()));
        }
        if self.dims.contains(&0) {
            return Err(Error::BadConfig("layer widths must be positive".into()));
        }
        if self.dims[self.dims.len() - 1] < 2 {
            return Err(Error::BadConfig("need at least two classes".into()));
        }
        if self.rank == 0 {
            return Err(Error::BadConfig("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::BadConfig("alpha must be positive".into()));
        }
        Ok(())
    }
}

/// One linear layer with a frozen base weight and a LoRA adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    w0: Matrix,
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraLinear {
    pub fn new(w0: Matrix, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let (n_out, n_in) = w0.shape();
        let rank = a.rows();
        if a.cols() != n_in || b.shape() != (n_out, rank) {
            return Err(Error::DimMismatch(format!(
                "adapter shapes A {:?}, B {:?} do not fit W0 {:?}",
                a.shape(),
                b.shape(),
                w0.shape()
            )));
        }
        if rank == 0 || rank > n_in.min(n_out) {
            return Err(Error::BadConfig(format!(
                "rank {rank} invalid for a {n_out}x{n_in} layer"
            )));
        }
        Ok(Self { w0, a, b, alpha })
    }

    pub fn n_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn n_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Multiplier applied to `B A`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `scale · B A`
    pub fn delta_w(&self) -> Matrix {
        self.b.matmul(&self.a).scale(self.scale())
    }

    fn n_params(&self) -> usize {
        self.rank() * (self.n_in() + self.n_out())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SublayerKind {
    A,
    B,
}

/// Identifies the A- or B-sublayer of one adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SublayerId {
    pub layer: usize,
    pub kind: SublayerKind,
}

impl SublayerId {
    pub fn index(self) -> usize {
        2 * self.layer + usize::from(self.kind == SublayerKind::B)
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            layer: i / 2,
            kind: if i % 2 == 0 { SublayerKind::A } else { SublayerKind::B },
        }
    }

    pub fn label(self) -> String {
        let k = match self.kind {
            SublayerKind::A => "a",
            SublayerKind::B => "b",
        };
        format!("layer{}.{}", self.layer, k)
    }
}

/// Placement of one sublayer's weight inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SublayerSpec {
    pub id: SublayerId,
    pub offset: usize,
    /// Output dimension of the sublayer.
    pub rows: usize,
    /// Input dimension of the sublayer.
    pub cols: usize,
}

impl SublayerSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<SublayerSpec>,
    len: usize,
}

impl ParamLayout {
    pub fn entries(&self) -> &[SublayerSpec] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, id: SublayerId) -> &SublayerSpec {
        &self.entries[id.index()]
    }
}

/// Flat LoRA parameter vector with its layout table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub layout: ParamLayout,
}

impl ParamVector {
    pub fn block(&self, id: SublayerId) -> Matrix {
        let spec = self.layout.get(id);
        Matrix::from_col_major(spec.rows, spec.cols, self.theta[spec.range()].to_vec())
            .expect("layout is consistent")
    }

    pub fn norm_sq(&self) -> f64 {
        self.theta.iter().map(|t| t * t).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer (`a_{ℓ-1}` for the base path).
    pub inputs: Vec<Vec<f64>>,
    /// Adapter input after dropout; input of the A-sublayer.
    pub adapter_inputs: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per layer, when dropout was active.
    pub masks: Option<Vec<Vec<f64>>>,
    /// `u = A x̃`; input of the B-sublayer.
    pub hidden: Vec<Vec<f64>>,
    /// Pre-activation outputs `h`.
    pub preacts: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Input vector and output gradient of one sublayer for one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SublayerIo {
    pub input: Vec<f64>,
    pub output_grad: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Gradient over LoRA parameters, in layout order.
    pub grads: Vec<f64>,
    /// Indexed by [`SublayerId::index`].
    pub io: Vec<SublayerIo>,
}

/// Logits and their Jacobian with respect to the LoRA parameters.
#[derive(Clone, Debug)]
pub struct LogitJacobian {
    pub logits: Vec<f64>,
    /// `n_classes × D`; row `i` is `∂f_i/∂θ`.
    pub jac: Matrix,
    pub layout: ParamLayout,
}

impl LogitJacobian {
    /// `G_{i,ℓ}`: gradient of logit `class` w.r.t. sublayer `id`, in weight shape.
    pub fn block(&self, class: usize, id: SublayerId) -> Matrix {
        let spec = self.layout.get(id);
        Matrix::from_fn(spec.rows, spec.cols, |r, c| {
            self.jac[(class, spec.offset + c * spec.rows + r)]
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraNetwork {
    layers: Vec<LoraLinear>,
    activation: Activation,
}

impl LoraNetwork {
    pub fn new(layers: Vec<LoraLinear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::BadConfig("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].n_out() != w[1].n_in() {
                return Err(Error::DimMismatch(format!(
                    "layer output {} feeds input {}",
                    w[0].n_out(),
                    w[1].n_in()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[LoraLinear] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out()
    }

    pub fn n_sublayers(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(LoraLinear::n_params).sum()
    }

    /// Ids of the A- and B-sublayer of the output layer.
    pub fn last_pair(&self) -> [SublayerId; 2] {
        let layer = self.layers.len() - 1;
        [
            SublayerId {
                layer,
                kind: SublayerKind::A,
            },
            SublayerId {
                layer,
                kind: SublayerKind::B,
            },
        ]
    }

    pub fn layout(&self) -> ParamLayout {
        let mut entries = Vec::with_capacity(self.n_sublayers());
        let mut offset = 0;
        for (layer, l) in self.layers.iter().enumerate() {
            for (kind, (rows, cols)) in [
                (SublayerKind::A, l.a.shape()),
                (SublayerKind::B, l.b.shape()),
            ] {
                entries.push(SublayerSpec {
                    id: SublayerId { layer, kind },
                    offset,
                    rows,
                    cols,
                });
                offset += rows * cols;
            }
        }
        ParamLayout {
            entries,
            len: offset,
        }
    }

    pub fn params(&self) -> ParamVector {
        let mut theta = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            theta.extend_from_slice(l.a.as_slice());
            theta.extend_from_slice(l.b.as_slice());
        }
        ParamVector {
            theta,
            layout: self.layout(),
        }
    }

    /// Overwrites the LoRA parameters; the base weights are untouched.
    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimMismatch(format!(
                "{} parameters for a network with {}",
                theta.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let na = l.a.as_slice().len();
            l.a.as_mut_slice().copy_from_slice(&theta[offset..offset + na]);
            offset += na;
            let nb = l.b.as_slice().len();
            l.b.as_mut_slice().copy_from_slice(&theta[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(theta)?;
        Ok(net)
    }

    pub fn forward(&self, x: &[f64], dropout: Option<Dropout>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let dropout = match dropout {
            Some(d) if !(0.0..1.0).contains(&d.rate) => {
                return Err(Error::BadConfig(format!("dropout rate {} not in [0,1)", d.rate)))
            }
            Some(d) if d.rate > 0.0 => Some(d),
            _ => None,
        };
        let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(d.seed));

        let n = self.layers.len();
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(n),
            adapter_inputs: Vec::with_capacity(n),
            masks: dropout.map(|_| Vec::with_capacity(n)),
            hidden: Vec::with_capacity(n),
            preacts: Vec::with_capacity(n),
            logits: Vec::new(),
        };
        let mut cur = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let adapter_in = match (dropout, rng.as_mut()) {
                (Some(d), Some(rng)) => {
                    let keep = 1.0 / (1.0 - d.rate);
                    let mask: Vec<f64> = (0..cur.len())
                        .map(|_| if rng.random::<f64>() < d.rate { 0.0 } else { keep })
                        .collect();
                    let xin = cur.iter().zip(&mask).map(|(v, m)| v * m).collect();
                    trace.masks.as_mut().expect("masks allocated").push(mask);
                    xin
                }
                _ => cur.clone(),
            };
            let u = l.a.matvec(&adapter_in);
            let z = l.b.matvec(&u);
            let s = l.scale();
            let mut h = l.w0.matvec(&cur);
            for (hv, zv) in h.iter_mut().zip(&z) {
                *hv += s * zv;
            }
            let next = if i + 1 < n {
                h.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                h.clone()
            };
            trace.inputs.push(std::mem::replace(&mut cur, next));
            trace.adapter_inputs.push(adapter_in);
            trace.hidden.push(u);
            trace.preacts.push(h);
        }
        trace.logits = cur;
        Ok(trace)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, None)?.logits)
    }

    /// Backpropagates `grad_logits = ∂loss/∂logits` to the LoRA parameters.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<Gradients> {
        let n = self.layers.len();
        if trace.preacts.len() != n
            || trace.inputs.len() != n
            || trace.hidden.len() != n
            || trace.adapter_inputs.len() != n
        {
            return Err(Error::TraceMismatch(format!(
                "trace has {} layers, network {}",
                trace.preacts.len(),
                n
            )));
        }
        for (l, h) in self.layers.iter().zip(&trace.preacts) {
            if h.len() != l.n_out() {
                return Err(Error::TraceMismatch("layer width differs".into()));
            }
        }
        if grad_logits.len() != self.n_classes() {
            return Err(Error::DimMismatch(format!(
                "grad_logits has {} entries, network has {} classes",
                grad_logits.len(),
                self.n_classes()
            )));
        }

        let layout = self.layout();
        let mut grads = vec![0.0; layout.len()];
        let mut io: Vec<Option<SublayerIo>> = vec![None; self.n_sublayers()];
        let mut g_h = grad_logits.to_vec();
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let s = l.scale();
            let x_tilde = &trace.adapter_inputs[i];
            let u = &trace.hidden[i];

            // B-sublayer: z = B u, ∂L/∂z = s·g_h
            let g_z: Vec<f64> = g_h.iter().map(|g| s * g).collect();
            // A-sublayer: u = A x̃, ∂L/∂u = Bᵀ g_z
            let g_u = l.b.tr_matvec(&g_z);

            let spec_a = layout.entries[2 * i];
            let spec_b = layout.entries[2 * i + 1];
            outer_into(&mut grads[spec_a.range()], &g_u, x_tilde);
            outer_into(&mut grads[spec_b.range()], &g_z, u);

            if i > 0 {
                let mut g_x = l.w0.tr_matvec(&g_h);
                let g_xt = l.a.tr_matvec(&g_u);
                match &trace.masks {
                    Some(masks) => {
                        for ((gx, gt), m) in g_x.iter_mut().zip(&g_xt).zip(&masks[i]) {
                            *gx += gt * m;
                        }
                    }
                    None => {
                        for (gx, gt) in g_x.iter_mut().zip(&g_xt) {
                            *gx += gt;
                        }
                    }
                }
                let prev_h = &trace.preacts[i - 1];
                g_h = g_x
                    .iter()
                    .zip(prev_h)
                    .map(|(g, &h)| g * self.activation.derivative(h))
                    .collect();
            }

            io[2 * i] = Some(SublayerIo {
                input: x_tilde.clone(),
                output_grad: g_u,
            });
            io[2 * i + 1] = Some(SublayerIo {
                input: u.clone(),
                output_grad: g_z,
            });
        }
        Ok(Gradients {
            grads,
            io: io.into_iter().map(|o| o.expect("all sublayers visited")).collect(),
        })
    }

    /// Jacobian of the logits w.r.t. the LoRA parameters, one backward pass
    /// per class with a one-hot output gradient.
    pub fn logits_jacobian(&self, x: &[f64]) -> Result<LogitJacobian> {
        let trace = self.forward(x, None)?;
        let c = self.n_classes();
        let layout = self.layout();
        let mut jac = Matrix::zeros(c, layout.len());
        let mut onehot = vec![0.0; c];
        for i in 0..c {
            onehot[i] = 1.0;
            let g = self.backward(&trace, &onehot)?;
            onehot[i] = 0.0;
            for (j, v) in g.grads.iter().enumerate() {
                jac[(i, j)] = *v;
            }
        }
        Ok(LogitJacobian {
            logits: trace.logits,
            jac,
            layout,
        })
    }
}

/// Writes `vec(g xᵀ)` (column-major, `g.len()` rows) into `out`.
fn outer_into(out: &mut [f64], g: &[f64], x: &[f64]) {
    let rows = g.len();
    for (j, &xj) in x.iter().enumerate() {
        for (o, &gi) in out[j * rows..(j + 1) * rows].iter_mut().zip(g) {
            *o = gi * xj;
        }
    }
}

/// Builds a network with fan-in scaled Gaussian base weights, small
/// Gaussian `A` and zero `B`, so the adapter starts as the identity update.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<LoraNetwork> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.dims.len() - 1);
    for w in config.dims.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let rank = config.rank.min(n_in).min(n_out);
        let base_std = 1.0 / (n_in as f64).sqrt();
        let w0 = Matrix::from_fn(n_out, n_in, |_, _| {
            base_std * rng.sample::<f64, _>(StandardNormal)
        });
        let a = Matrix::from_fn(rank, n_in, |_, _| {
            base_std * rng.sample::<f64, _>(StandardNormal)
        });
        let b = Matrix::zeros(n_out, rank);
        layers.push(LoraLinear::new(w0, a, b, config.alpha)?);
    }
    LoraNetwork::new(layers, config.activation)
}
