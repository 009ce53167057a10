//! Fisher information over the LoRA parameters.
//!
//! Three estimators are provided: the exact dense Fisher (an oracle for
//! small networks), its diagonal, and a Kronecker-factored (KFAC) form in
//! which each adapter sublayer gets one small dense factor and one large
//! factor kept as a low-rank root built by incremental truncated SVD.
//!
//! KFAC blocks follow the vec convention of [`crate::linalg`]:
//!
//! ```text
//! F_ℓ ≈ (1/N) · (Σ a aᵀ) ⊗ (Σ E_y[g gᵀ])
//! ```
//!
//! where `a` is the sublayer input, `g` its output gradient, and `N` the
//! number of data points. The `1/N` is folded into the small factor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::linalg::{kron, psd_factor, LowRankFactor, Matrix};
use crate::lora_net::{LoraNetwork, ParamLayout, SublayerId, SublayerKind};
use crate::train::softmax;

/// Largest parameter count for which the dense Fisher may be built.
pub const EXACT_FISHER_MAX_DIM: usize = 2000;

/// Default rank of the large Kronecker factor.
pub const DEFAULT_N_KFAC: usize = 10;

/// Columns buffered before each incremental SVD.
pub const DEFAULT_KFAC_BATCH: usize = 8;

/// Which side of a sublayer carries the large Kronecker factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LargeSide {
    Input,
    Output,
}

/// Kronecker-factored curvature of one adapter sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct KfacBlock {
    pub id: SublayerId,
    /// Square root of the (1/N-scaled) small factor.
    pub small_root: Matrix,
    /// Low-rank root of the large factor.
    pub large_root: LowRankFactor,
    pub large_side: LargeSide,
}

impl KfacBlock {
    /// Root of the input-side factor.
    pub fn in_root(&self) -> &Matrix {
        match self.large_side {
            LargeSide::Input => self.large_root.root(),
            LargeSide::Output => &self.small_root,
        }
    }

    /// Root of the output-side factor.
    pub fn out_root(&self) -> &Matrix {
        match self.large_side {
            LargeSide::Input => &self.small_root,
            LargeSide::Output => self.large_root.root(),
        }
    }

    /// Number of parameters covered (`n_in · n_out` of the sublayer).
    pub fn dim(&self) -> usize {
        self.in_root().rows() * self.out_root().rows()
    }

    /// Stored entries: `d · n_kfac + n_small²`.
    pub fn storage_len(&self) -> usize {
        self.small_root.as_slice().len() + self.large_root.root().as_slice().len()
    }

    /// Dense block; only for small oracles (guarded by [`kron`]).
    pub fn dense(&self) -> Result<Matrix> {
        let fin = self.in_root().matmul_t(self.in_root());
        let fout = self.out_root().matmul_t(self.out_root());
        kron(&fin, &fout)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FisherEstimate {
    Full(Matrix),
    Diagonal(Vec<f64>),
    Kfac(Vec<KfacBlock>),
}

impl FisherEstimate {
    pub fn variant_name(&self) -> &'static str {
        match self {
            FisherEstimate::Full(_) => "full",
            FisherEstimate::Diagonal(_) => "diag",
            FisherEstimate::Kfac(_) => "kfac",
        }
    }
}

/// How the expectation over labels is taken when accumulating curvature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherMode {
    /// All classes, weighted by the model's predictive probabilities.
    Exact,
    /// One label sampled from the model per datum.
    MonteCarlo { seed: u64 },
}

/// Columns of a `C × D` Jacobian belonging to `ids`, concatenated in order.
pub fn restrict_columns(jac: &Matrix, layout: &ParamLayout, ids: &[SublayerId]) -> Matrix {
    let d: usize = ids.iter().map(|&id| layout.get(id).len()).sum();
    let mut out = Matrix::zeros(jac.rows(), d);
    let mut k = 0;
    for &id in ids {
        for j in layout.get(id).range() {
            out.col_mut(k).copy_from_slice(jac.col(j));
            k += 1;
        }
    }
    out
}

/// Per-datum scoped Jacobian and predictive probabilities.
fn per_datum_scores<'a>(
    net: &'a LoraNetwork,
    data: &'a Dataset,
    ids: &'a [SublayerId],
) -> impl Iterator<Item = Result<(Matrix, Vec<f64>)>> + 'a {
    let layout = net.layout();
    data.features.iter().map(move |x| {
        let j = net.logits_jacobian(x)?;
        let p = softmax(&j.logits);
        Ok((restrict_columns(&j.jac, &layout, ids), p))
    })
}

fn all_ids(net: &LoraNetwork) -> Vec<SublayerId> {
    (0..net.n_sublayers()).map(SublayerId::from_index).collect()
}

/// `F = Σ_n Σ_c p_c ∇log p_c ∇log p_cᵀ`, built densely.
pub fn exact_fisher(net: &LoraNetwork, data: &Dataset) -> Result<FisherEstimate> {
    exact_fisher_in(net, data, &all_ids(net))
}

/// Dense Fisher over the parameters of `ids` only.
pub fn exact_fisher_in(
    net: &LoraNetwork,
    data: &Dataset,
    ids: &[SublayerId],
) -> Result<FisherEstimate> {
    let layout = net.layout();
    let d: usize = ids.iter().map(|&id| layout.get(id).len()).sum();
    if d > EXACT_FISHER_MAX_DIM {
        return Err(Error::TooLarge {
            dim: d,
            limit: EXACT_FISHER_MAX_DIM,
        });
    }
    let mut f = Matrix::zeros(d, d);
    for item in per_datum_scores(net, data, ids) {
        let (jac, p) = item?;
        for (c, &pc) in p.iter().enumerate() {
            if pc == 0.0 {
                continue;
            }
            let g = class_score(&jac, &p, c);
            f.rank1_update(pc, &g, &g);
        }
    }
    f.symmetrize();
    Ok(FisherEstimate::Full(f))
}

/// `∇_θ log p_c = Jᵀ (e_c − p)`.
fn class_score(jac: &Matrix, p: &[f64], c: usize) -> Vec<f64> {
    let mut w: Vec<f64> = p.iter().map(|v| -v).collect();
    w[c] += 1.0;
    jac.tr_matvec(&w)
}

/// Diagonal of the exact Fisher, without forming the dense matrix.
pub fn diag_fisher(net: &LoraNetwork, data: &Dataset) -> Result<FisherEstimate> {
    diag_fisher_in(net, data, &all_ids(net))
}

pub fn diag_fisher_in(
    net: &LoraNetwork,
    data: &Dataset,
    ids: &[SublayerId],
) -> Result<FisherEstimate> {
    let layout = net.layout();
    let d: usize = ids.iter().map(|&id| layout.get(id).len()).sum();
    let mut diag = vec![0.0; d];
    for item in per_datum_scores(net, data, ids) {
        let (jac, p) = item?;
        for (c, &pc) in p.iter().enumerate() {
            if pc == 0.0 {
                continue;
            }
            let g = class_score(&jac, &p, c);
            for (d, gi) in diag.iter_mut().zip(&g) {
                *d += pc * gi * gi;
            }
        }
    }
    Ok(FisherEstimate::Diagonal(diag))
}

/// Replaces `state` by the leading `k` scaled left singular vectors of
/// `[state.root | new_vec]`.
pub fn incremental_lowrank_update(
    state: &LowRankFactor,
    new_vec: &[f64],
    k: usize,
) -> Result<LowRankFactor> {
    incremental_lowrank_update_cols(state, &Matrix::column(new_vec), k)
}

/// Batched form of [`incremental_lowrank_update`]: appends several columns
/// before re-truncating. Works on `d × (rank + m)` matrices only.
pub fn incremental_lowrank_update_cols(
    state: &LowRankFactor,
    new_cols: &Matrix,
    k: usize,
) -> Result<LowRankFactor> {
    if new_cols.rows() != state.dim() {
        return Err(Error::DimMismatch(format!(
            "vector of length {} for a factor of dimension {}",
            new_cols.rows(),
            state.dim()
        )));
    }
    let stacked = state.root().hcat(new_cols)?;
    let (w, _) = crate::linalg::jacobi_columns(&stacked);
    // Columns of w are U·S up to ordering; keep the largest k.
    let norms: Vec<f64> = (0..w.cols()).map(|j| crate::linalg::norm(w.col(j))).collect();
    let mut order: Vec<usize> = (0..w.cols()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let keep = k.min(w.cols()).min(state.dim());
    let mut root = Matrix::zeros(state.dim(), keep);
    for (dst, &src) in order.iter().take(keep).enumerate() {
        root.col_mut(dst).copy_from_slice(w.col(src));
    }
    LowRankFactor::new(root)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KfacOptions {
    pub n_kfac: usize,
    pub mode: FisherMode,
    /// Vectors buffered per incremental SVD.
    pub batch: usize,
}

impl Default for KfacOptions {
    fn default() -> Self {
        Self {
            n_kfac: DEFAULT_N_KFAC,
            mode: FisherMode::Exact,
            batch: DEFAULT_KFAC_BATCH,
        }
    }
}

struct BlockAccumulator {
    id: SublayerId,
    large_side: LargeSide,
    small_sum: Matrix,
    large: LowRankFactor,
    buffer: Vec<Vec<f64>>,
}

impl BlockAccumulator {
    fn flush(&mut self, n_kfac: usize) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let d = self.large.dim();
        let mut cols = Matrix::zeros(d, self.buffer.len());
        for (j, v) in self.buffer.drain(..).enumerate() {
            cols.col_mut(j).copy_from_slice(&v);
        }
        self.large = incremental_lowrank_update_cols(&self.large, &cols, n_kfac)?;
        Ok(())
    }

    fn push_large(&mut self, v: Vec<f64>, opts: &KfacOptions) -> Result<()> {
        self.buffer.push(v);
        if self.buffer.len() >= opts.batch.max(1) {
            self.flush(opts.n_kfac)?;
        }
        Ok(())
    }
}

pub fn accumulate_kfac(
    net: &LoraNetwork,
    data: &Dataset,
    n_kfac: usize,
    mode: FisherMode,
) -> Result<FisherEstimate> {
    accumulate_kfac_with(
        net,
        data,
        &KfacOptions {
            n_kfac,
            mode,
            ..KfacOptions::default()
        },
    )
}

pub fn accumulate_kfac_with(
    net: &LoraNetwork,
    data: &Dataset,
    opts: &KfacOptions,
) -> Result<FisherEstimate> {
    if opts.n_kfac == 0 {
        return Err(Error::BadConfig("n_kfac must be at least 1".into()));
    }
    let layout = net.layout();
    let mut acc: Vec<BlockAccumulator> = layout
        .entries()
        .iter()
        .map(|spec| {
            // rows = output dim, cols = input dim of the sublayer
            let (large_side, small, large) = match spec.id.kind {
                SublayerKind::A => (LargeSide::Input, spec.rows, spec.cols),
                SublayerKind::B => (LargeSide::Output, spec.cols, spec.rows),
            };
            BlockAccumulator {
                id: spec.id,
                large_side,
                small_sum: Matrix::zeros(small, small),
                large: LowRankFactor::empty(large),
                buffer: Vec::new(),
            }
        })
        .collect();

    let mut rng = match opts.mode {
        FisherMode::MonteCarlo { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        FisherMode::Exact => None,
    };
    let c = net.n_classes();
    let mut grad = vec![0.0; c];
    for x in &data.features {
        let trace = net.forward(x, None)?;
        let p = softmax(&trace.logits);
        let classes: Vec<(usize, f64)> = match rng.as_mut() {
            Some(rng) => vec![(sample_class(&p, rng), 1.0)],
            None => p.iter().copied().enumerate().filter(|(_, w)| *w > 0.0).collect(),
        };
        let mut class_inputs_done = false;
        for (class, w) in classes {
            // Output gradient of −log p(class); the sign drops out of g gᵀ.
            grad.copy_from_slice(&p);
            grad[class] -= 1.0;
            let g = net.backward(&trace, &grad)?;
            for (block, io) in acc.iter_mut().zip(&g.io) {
                match block.large_side {
                    LargeSide::Input => {
                        block.small_sum.rank1_update(w, &io.output_grad, &io.output_grad);
                        if !class_inputs_done {
                            block.push_large(io.input.clone(), opts)?;
                        }
                    }
                    LargeSide::Output => {
                        if !class_inputs_done {
                            block.small_sum.rank1_update(1.0, &io.input, &io.input);
                        }
                        let sw = w.sqrt();
                        block.push_large(io.output_grad.iter().map(|v| sw * v).collect(), opts)?;
                    }
                }
            }
            class_inputs_done = true;
        }
    }

    let n = data.len().max(1) as f64;
    let mut blocks = Vec::with_capacity(acc.len());
    for mut a in acc {
        a.flush(opts.n_kfac)?;
        let mut small = a.small_sum;
        small.scale_in_place(1.0 / n);
        small.symmetrize();
        blocks.push(KfacBlock {
            id: a.id,
            small_root: psd_factor(&small)?,
            large_root: a.large,
            large_side: a.large_side,
        });
    }
    Ok(FisherEstimate::Kfac(blocks))
}

fn sample_class(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return i;
        }
    }
    p.len() - 1
}
