//! Laplace posterior over LoRA weights.
//!
//! The posterior precision is `F + λ I` (λ may differ per sublayer). For the
//! Kronecker-factored Fisher, each block is `W Wᵀ` with `W = P_in ⊗ P_out`,
//! so the determinant lemma and Woodbury identity only need the small matrix
//!
//! ```text
//! M = I + σ² (P_inᵀ P_in) ⊗ (P_outᵀ P_out),   σ² = 1/λ
//! ```
//!
//! of size `rank(P_in) · rank(P_out)`.

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::curvature::{
    accumulate_kfac_with, diag_fisher_in, exact_fisher_in, restrict_columns, FisherEstimate,
    FisherMode, KfacBlock, KfacOptions,
};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::linalg::{cholesky, cholesky_exact, dot, kron, logdet, CholeskyFactor, Matrix};
use crate::lora_net::{LoraNetwork, SublayerId};
use crate::train::{log_likelihood, softmax};

/// Which adapter weights the posterior covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    /// Every LoRA sublayer.
    All,
    /// Only the adapter pair of the output layer.
    LastLayer,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::All => "la",
            Scope::LastLayer => "llla",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "la" | "all" => Ok(Scope::All),
            "llla" | "last" => Ok(Scope::LastLayer),
            _ => Err(Error::BadConfig(format!("unknown scope '{s}' (la, llla)"))),
        }
    }

    pub fn sublayers(self, net: &LoraNetwork) -> Vec<SublayerId> {
        match self {
            Scope::All => (0..net.n_sublayers()).map(SublayerId::from_index).collect(),
            Scope::LastLayer => net.last_pair().to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FisherVariant {
    Full,
    Diagonal,
    Kfac,
}

impl FisherVariant {
    pub fn name(self) -> &'static str {
        match self {
            FisherVariant::Full => "full",
            FisherVariant::Diagonal => "diag",
            FisherVariant::Kfac => "kfac",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FisherVariant::Full),
            "diag" => Ok(FisherVariant::Diagonal),
            "kfac" => Ok(FisherVariant::Kfac),
            _ => Err(Error::BadConfig(format!(
                "unknown fisher variant '{s}' (full, diag, kfac)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorPrecision {
    Scalar(f64),
    /// One value per sublayer in scope, in layout order.
    PerSublayer(Vec<f64>),
}

impl PriorPrecision {
    /// Precision applied to block `b`.
    pub fn for_block(&self, b: usize) -> f64 {
        match self {
            PriorPrecision::Scalar(l) => *l,
            PriorPrecision::PerSublayer(v) => v[b],
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            PriorPrecision::Scalar(l) => vec![*l],
            PriorPrecision::PerSublayer(v) => v.clone(),
        }
    }

    fn with_values(&self, v: Vec<f64>) -> Self {
        match self {
            PriorPrecision::Scalar(_) => PriorPrecision::Scalar(v[0]),
            PriorPrecision::PerSublayer(_) => PriorPrecision::PerSublayer(v),
        }
    }

    /// Index into [`Self::values`] that governs block `b`.
    fn param_of(&self, b: usize) -> usize {
        match self {
            PriorPrecision::Scalar(_) => 0,
            PriorPrecision::PerSublayer(_) => b,
        }
    }

    fn validate(&self, n_blocks: usize) -> Result<()> {
        let v = self.values();
        if let PriorPrecision::PerSublayer(p) = self {
            if p.len() != n_blocks {
                return Err(Error::DimMismatch(format!(
                    "{} prior precisions for {n_blocks} sublayers",
                    p.len()
                )));
            }
        }
        if v.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::BadConfig(format!(
                "prior precision must be positive and finite, got {v:?}"
            )));
        }
        Ok(())
    }
}

/// A sublayer inside the posterior's parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopedBlock {
    pub id: SublayerId,
    pub rows: usize,
    pub cols: usize,
    /// Position in the full network parameter vector.
    pub global: Range<usize>,
    /// Position in the posterior's (scoped) parameter vector.
    pub local: Range<usize>,
}

impl ScopedBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceOptions {
    pub variant: FisherVariant,
    pub kfac: KfacOptions,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        Self {
            variant: FisherVariant::Kfac,
            kfac: KfacOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacePosterior {
    scope: Scope,
    blocks: Vec<ScopedBlock>,
    theta_map: Vec<f64>,
    fisher: FisherEstimate,
    lambda: PriorPrecision,
    net_params: usize,
}

fn scoped_blocks(net: &LoraNetwork, scope: Scope) -> Vec<ScopedBlock> {
    let layout = net.layout();
    let mut off = 0;
    scope
        .sublayers(net)
        .into_iter()
        .map(|id| {
            let spec = layout.get(id);
            let b = ScopedBlock {
                id,
                rows: spec.rows,
                cols: spec.cols,
                global: spec.range(),
                local: off..off + spec.len(),
            };
            off += spec.len();
            b
        })
        .collect()
}

impl LaplacePosterior {
    /// Computes the Fisher on `data` at the network's current weights.
    pub fn fit(
        net: &LoraNetwork,
        data: &Dataset,
        scope: Scope,
        opts: &LaplaceOptions,
        lambda: PriorPrecision,
    ) -> Result<Self> {
        let ids = scope.sublayers(net);
        let fisher = match opts.variant {
            FisherVariant::Full => exact_fisher_in(net, data, &ids)?,
            FisherVariant::Diagonal => diag_fisher_in(net, data, &ids)?,
            FisherVariant::Kfac => {
                let FisherEstimate::Kfac(all) = accumulate_kfac_with(net, data, &opts.kfac)? else {
                    unreachable!("accumulate_kfac returns Kfac");
                };
                FisherEstimate::Kfac(all.into_iter().filter(|b| ids.contains(&b.id)).collect())
            }
        };
        Self::new(net, scope, fisher, lambda)
    }

    /// Assembles a posterior from a precomputed Fisher restricted to `scope`.
    pub fn new(
        net: &LoraNetwork,
        scope: Scope,
        fisher: FisherEstimate,
        lambda: PriorPrecision,
    ) -> Result<Self> {
        let blocks = scoped_blocks(net, scope);
        lambda.validate(blocks.len())?;
        let d: usize = blocks.iter().map(ScopedBlock::len).sum();
        match &fisher {
            FisherEstimate::Full(m) if m.shape() != (d, d) => {
                return Err(Error::LayoutMismatch(format!(
                    "full Fisher is {}x{}, scope has {d} parameters",
                    m.rows(),
                    m.cols()
                )))
            }
            FisherEstimate::Diagonal(v) if v.len() != d => {
                return Err(Error::LayoutMismatch(format!(
                    "diagonal Fisher has {} entries, scope has {d} parameters",
                    v.len()
                )))
            }
            FisherEstimate::Kfac(kb) => {
                if kb.len() != blocks.len()
                    || kb.iter().zip(&blocks).any(|(k, b)| {
                        k.id != b.id || k.in_root().rows() != b.cols || k.out_root().rows() != b.rows
                    })
                {
                    return Err(Error::LayoutMismatch(
                        "KFAC blocks do not match the scoped sublayers".into(),
                    ));
                }
            }
            _ => {}
        }
        let theta = net.params().theta;
        let mut theta_map = Vec::with_capacity(d);
        for b in &blocks {
            theta_map.extend_from_slice(&theta[b.global.clone()]);
        }
        Ok(Self {
            scope,
            blocks,
            theta_map,
            fisher,
            lambda,
            net_params: net.n_params(),
        })
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn blocks(&self) -> &[ScopedBlock] {
        &self.blocks
    }

    pub fn theta_map(&self) -> &[f64] {
        &self.theta_map
    }

    pub fn fisher(&self) -> &FisherEstimate {
        &self.fisher
    }

    pub fn lambda(&self) -> &PriorPrecision {
        &self.lambda
    }

    pub fn dim(&self) -> usize {
        self.theta_map.len()
    }

    pub fn set_lambda(&mut self, lambda: PriorPrecision) -> Result<()> {
        lambda.validate(self.blocks.len())?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn with_lambda(&self, lambda: PriorPrecision) -> Result<Self> {
        let mut p = self.clone();
        p.set_lambda(lambda)?;
        Ok(p)
    }

    /// Checks that `net` has the layout this posterior was built for.
    pub fn check_net(&self, net: &LoraNetwork) -> Result<()> {
        let same = net.n_params() == self.net_params
            && scoped_blocks(net, self.scope) == self.blocks;
        if same {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(
                "network layout differs from the posterior's".into(),
            ))
        }
    }

    /// Jacobian columns of the parameters in scope.
    pub fn restrict_jacobian(&self, net: &LoraNetwork, jac: &Matrix) -> Matrix {
        let ids: Vec<SublayerId> = self.blocks.iter().map(|b| b.id).collect();
        restrict_columns(jac, &net.layout(), &ids)
    }

    /// Prior precision per scoped parameter.
    fn lambda_per_param(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (b, blk) in self.blocks.iter().enumerate() {
            out.extend(std::iter::repeat_n(self.lambda.for_block(b), blk.len()));
        }
        out
    }

    /// Precomputes the factorizations needed for covariance products.
    pub fn solver(&self) -> Result<PosteriorSolver> {
        let kind = match &self.fisher {
            FisherEstimate::Full(f) => {
                let mut p = f.clone();
                for (i, l) in self.lambda_per_param().into_iter().enumerate() {
                    p[(i, i)] += l;
                }
                SolverKind::Full(cholesky_exact(&p, 0.0)?)
            }
            FisherEstimate::Diagonal(f) => SolverKind::Diagonal(
                f.iter()
                    .zip(self.lambda_per_param())
                    .map(|(fi, l)| 1.0 / (fi + l))
                    .collect(),
            ),
            FisherEstimate::Kfac(kb) => SolverKind::Kfac(
                kb.iter()
                    .enumerate()
                    .map(|(b, k)| KfacSolve::new(k, self.lambda.for_block(b)))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(PosteriorSolver {
            blocks: self.blocks.clone(),
            kind,
        })
    }
}

#[derive(Clone, Debug)]
struct KfacSolve {
    lambda: f64,
    p_in: Matrix,
    p_out: Matrix,
    /// `WᵀW = (P_inᵀP_in) ⊗ (P_outᵀP_out)`.
    k: Matrix,
    m: CholeskyFactor,
}

impl KfacSolve {
    fn new(block: &KfacBlock, lambda: f64) -> Result<Self> {
        let p_in = block.in_root().clone();
        let p_out = block.out_root().clone();
        let k = kron(&p_in.t_matmul(&p_in), &p_out.t_matmul(&p_out))?;
        let mut m = k.scale(1.0 / lambda);
        m.add_diag(1.0);
        m.symmetrize();
        Ok(Self {
            lambda,
            p_in,
            p_out,
            m: cholesky_exact(&m, 0.0)?,
            k,
        })
    }

    fn sigma2(&self) -> f64 {
        1.0 / self.lambda
    }

    /// `Wᵀ vec(G) = vec(P_outᵀ G P_in)` for `G` of shape out × in.
    fn project(&self, g: &Matrix) -> Vec<f64> {
        self.p_out.t_matmul(&g.matmul(&self.p_in)).into_vec()
    }

    /// `W vec(X) = vec(P_out X P_inᵀ)`.
    fn lift(&self, x: &[f64]) -> Vec<f64> {
        let xm = Matrix::from_col_major(self.p_out.cols(), self.p_in.cols(), x.to_vec())
            .expect("projection has the root shapes");
        self.p_out.matmul(&xm).matmul_t(&self.p_in).into_vec()
    }

    fn logdet_m(&self) -> f64 {
        logdet(&self.m)
    }
}

#[derive(Clone, Debug)]
enum SolverKind {
    Full(CholeskyFactor),
    Diagonal(Vec<f64>),
    Kfac(Vec<KfacSolve>),
}

/// Factorized posterior precision, reused across inputs.
#[derive(Clone, Debug)]
pub struct PosteriorSolver {
    blocks: Vec<ScopedBlock>,
    kind: SolverKind,
}

impl PosteriorSolver {
    pub fn dim(&self) -> usize {
        self.blocks.iter().map(ScopedBlock::len).sum()
    }

    /// `Σ v` for a scoped parameter vector.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match &self.kind {
            SolverKind::Full(c) => c.solve(v),
            SolverKind::Diagonal(inv) => v.iter().zip(inv).map(|(a, b)| a * b).collect(),
            SolverKind::Kfac(ks) => {
                let mut out = vec![0.0; v.len()];
                for (blk, k) in self.blocks.iter().zip(ks) {
                    let g = Matrix::from_col_major(blk.rows, blk.cols, v[blk.local.clone()].to_vec())
                        .expect("block shape");
                    let s2 = k.sigma2();
                    let corr = k.lift(&k.m.solve(&k.project(&g)));
                    for ((o, gi), ci) in out[blk.local.clone()].iter_mut().zip(g.as_slice()).zip(&corr) {
                        *o = s2 * gi - s2 * s2 * ci;
                    }
                }
                out
            }
        }
    }

    /// Logit covariance `Λ = J Σ Jᵀ` for a scoped `C × d` Jacobian.
    pub fn logit_cov(&self, jac: &Matrix) -> Matrix {
        let c = jac.rows();
        let mut lam = Matrix::zeros(c, c);
        match &self.kind {
            SolverKind::Kfac(ks) => {
                for (blk, k) in self.blocks.iter().zip(ks) {
                    let s2 = k.sigma2();
                    let gs: Vec<Matrix> = (0..c)
                        .map(|i| {
                            let row: Vec<f64> = blk.local.clone().map(|j| jac[(i, j)]).collect();
                            Matrix::from_col_major(blk.rows, blk.cols, row).expect("block shape")
                        })
                        .collect();
                    let proj: Vec<Vec<f64>> = gs.iter().map(|g| k.project(g)).collect();
                    let solved: Vec<Vec<f64>> = proj.iter().map(|p| k.m.solve(p)).collect();
                    for i in 0..c {
                        for j in 0..=i {
                            let v = s2 * dot(gs[i].as_slice(), gs[j].as_slice())
                                - s2 * s2 * dot(&proj[i], &solved[j]);
                            lam[(i, j)] += v;
                            if i != j {
                                lam[(j, i)] += v;
                            }
                        }
                    }
                }
            }
            _ => {
                let u = self.apply_cols(jac);
                lam = jac.matmul(&u);
                lam.symmetrize();
            }
        }
        lam
    }

    /// `Σ Jᵀ` as a `d × C` matrix.
    pub fn apply_cols(&self, jac: &Matrix) -> Matrix {
        let mut u = Matrix::zeros(jac.cols(), jac.rows());
        for i in 0..jac.rows() {
            let s = self.apply(&jac.row(i));
            u.col_mut(i).copy_from_slice(&s);
        }
        u
    }

    /// `log det(F + λ I)`.
    pub fn logdet_precision(&self) -> f64 {
        match &self.kind {
            SolverKind::Full(c) => logdet(c),
            SolverKind::Diagonal(inv) => -inv.iter().map(|v| v.ln()).sum::<f64>(),
            SolverKind::Kfac(ks) => self
                .blocks
                .iter()
                .zip(ks)
                .map(|(b, k)| b.len() as f64 * k.lambda.ln() + k.logdet_m())
                .sum(),
        }
    }

    /// `∂ log det(F + λ I) / ∂λ_b` for each block.
    fn logdet_block_derivs(&self) -> Vec<f64> {
        match &self.kind {
            SolverKind::Full(c) => {
                let inv = c.inverse_diag();
                self.blocks
                    .iter()
                    .map(|b| inv[b.local.clone()].iter().sum())
                    .collect()
            }
            SolverKind::Diagonal(inv) => self
                .blocks
                .iter()
                .map(|b| inv[b.local.clone()].iter().sum())
                .collect(),
            SolverKind::Kfac(ks) => self
                .blocks
                .iter()
                .zip(ks)
                .map(|(b, k)| {
                    // d/dλ [d ln λ + ln det(I + K/λ)] = d/λ − tr(M⁻¹K)/λ²
                    let tr = k.m.solve_mat(&k.k).trace();
                    b.len() as f64 / k.lambda - tr / (k.lambda * k.lambda)
                })
                .collect(),
        }
    }
}

/// `log det(F + λ I)` of the posterior precision.
pub fn posterior_logdet(post: &LaplacePosterior) -> Result<f64> {
    let v = post.solver()?.logdet_precision();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("posterior log-determinant".into()))
    }
}

/// Laplace log marginal likelihood given the summed training log-likelihood
/// at the MAP:
///
/// ```text
/// log p(y|X) ≈ loglik + log N(θ_MAP; 0, λ⁻¹I) + (D/2) log 2π − ½ log det(F + λI)
/// ```
pub fn log_marginal_likelihood(post: &LaplacePosterior, train_loglik_at_map: f64) -> Result<f64> {
    let solver = post.solver()?;
    Ok(evidence_with(post, &solver, train_loglik_at_map))
}

fn evidence_with(post: &LaplacePosterior, solver: &PosteriorSolver, loglik: f64) -> f64 {
    let mut prior = 0.0;
    for (b, blk) in post.blocks.iter().enumerate() {
        let l = post.lambda.for_block(b);
        let th = &post.theta_map[blk.local.clone()];
        prior += 0.5 * blk.len() as f64 * (l / (2.0 * PI)).ln() - 0.5 * l * dot(th, th);
    }
    loglik + prior + 0.5 * post.dim() as f64 * (2.0 * PI).ln() - 0.5 * solver.logdet_precision()
}

/// Gradient of the evidence with respect to `log λ` (one entry per
/// precision parameter).
pub fn evidence_log_grad(post: &LaplacePosterior) -> Result<Vec<f64>> {
    let solver = post.solver()?;
    Ok(evidence_log_grad_with(post, &solver))
}

fn evidence_log_grad_with(post: &LaplacePosterior, solver: &PosteriorSolver) -> Vec<f64> {
    let dlogdet = solver.logdet_block_derivs();
    let mut g = vec![0.0; post.lambda.values().len()];
    for (b, blk) in post.blocks.iter().enumerate() {
        let l = post.lambda.for_block(b);
        let th = &post.theta_map[blk.local.clone()];
        let d_dl = 0.5 * blk.len() as f64 / l - 0.5 * dot(th, th) - 0.5 * dlogdet[b];
        g[post.lambda.param_of(b)] += l * d_dl;
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvidenceOptions {
    pub eta: f64,
    pub steps: usize,
    /// Refine the Adam result to a stationary point.
    pub polish: bool,
}

impl Default for EvidenceOptions {
    fn default() -> Self {
        Self {
            eta: 0.1,
            steps: 100,
            polish: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub lambda: PriorPrecision,
    /// Evidence, or full-validation NLL, at `lambda`.
    pub objective: f64,
}

const LOG_LAMBDA_BOUNDS: (f64, f64) = (-30.0, 30.0);

/// Maximizes the evidence over `ρ = log λ` with Adam, then refines each
/// coordinate by bracketed root finding on the gradient. Starts from the
/// posterior's current λ.
pub fn optimize_prior_evidence(
    post: &LaplacePosterior,
    train: &Dataset,
    net: &LoraNetwork,
    opts: &EvidenceOptions,
) -> Result<TuneResult> {
    train.ensure_tunable()?;
    post.check_net(net)?;
    let loglik = log_likelihood(net, train)?;
    optimize_evidence_loglik(post, loglik, opts)
}

/// As [`optimize_prior_evidence`] with a precomputed training log-likelihood.
pub fn optimize_evidence_loglik(
    post: &LaplacePosterior,
    loglik: f64,
    opts: &EvidenceOptions,
) -> Result<TuneResult> {
    let eval = |rho: &[f64]| -> Result<(f64, Vec<f64>)> {
        let lam = post.lambda.with_values(rho.iter().map(|r| r.exp()).collect());
        let p = post.with_lambda(lam)?;
        let s = p.solver()?;
        let e = evidence_with(&p, &s, loglik);
        let g = evidence_log_grad_with(&p, &s);
        if e.is_finite() && g.iter().all(|v| v.is_finite()) {
            Ok((e, g))
        } else {
            Err(Error::NonFinite(format!("evidence at log λ = {rho:?}")))
        }
    };

    let mut rho: Vec<f64> = post.lambda.values().iter().map(|l| l.ln()).collect();
    let (mut best_e, mut g) = eval(&rho)?;
    let mut best_rho = rho.clone();
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; rho.len()];
    let mut v = vec![0.0; rho.len()];
    for t in 1..=opts.steps {
        for i in 0..rho.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            rho[i] = (rho[i] + opts.eta * mh / (vh.sqrt() + eps))
                .clamp(LOG_LAMBDA_BOUNDS.0, LOG_LAMBDA_BOUNDS.1);
        }
        match eval(&rho) {
            Ok((e, gn)) => {
                if e > best_e {
                    best_e = e;
                    best_rho.clone_from(&rho);
                }
                g = gn;
            }
            Err(Error::NonFinite(_)) => break,
            Err(e) => return Err(e),
        }
    }
    if opts.polish {
        polish(&mut best_rho, &mut best_e, &eval)?;
    }
    Ok(TuneResult {
        lambda: post.lambda.with_values(best_rho.iter().map(|r| r.exp()).collect()),
        objective: best_e,
    })
}

/// Coordinate-wise root finding on `∂E/∂ρ_i`, accepting only moves that
/// do not lower the evidence.
fn polish(
    rho: &mut [f64],
    best_e: &mut f64,
    eval: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<()> {
    for _sweep in 0..20 {
        let mut moved = false;
        for i in 0..rho.len() {
            let coord = |r: f64| -> Result<(f64, f64)> {
                let mut x = rho.to_vec();
                x[i] = r;
                eval(&x).map(|(e, g)| (e, g[i]))
            };
            let Ok(Some(r)) = root_1d(rho[i], &coord) else {
                continue;
            };
            if let Ok((e, _)) = coord(r) {
                if e >= *best_e - 1e-12 * best_e.abs().max(1.0) {
                    moved |= (r - rho[i]).abs() > 1e-12;
                    rho[i] = r;
                    *best_e = e.max(*best_e);
                }
            }
        }
        let (_, g) = eval(rho)?;
        if !moved || g.iter().all(|v| v.abs() < POLISH_TOL) {
            break;
        }
    }
    Ok(())
}

const POLISH_TOL: f64 = 1e-9;

/// Zero of a decreasing-through-zero gradient near `x0` (a local maximum
/// of the objective), found by bracketing then Illinois regula falsi.
fn root_1d(x0: f64, f: &dyn Fn(f64) -> Result<(f64, f64)>) -> Result<Option<f64>> {
    let (_, g0) = f(x0)?;
    if g0.abs() < POLISH_TOL {
        return Ok(Some(x0));
    }
    let dir = g0.signum();
    let mut step = 0.25;
    let mut a = (x0, g0);
    let mut b = None;
    while step < 64.0 {
        let x = (a.0 + dir * step).clamp(LOG_LAMBDA_BOUNDS.0, LOG_LAMBDA_BOUNDS.1);
        let (_, gx) = f(x)?;
        if gx.signum() != dir || gx == 0.0 {
            b = Some((x, gx));
            break;
        }
        a = (x, gx);
        if x == LOG_LAMBDA_BOUNDS.0 || x == LOG_LAMBDA_BOUNDS.1 {
            break;
        }
        step *= 2.0;
    }
    let Some(mut b) = b else {
        return Ok(None);
    };
    let mut side = 0i8;
    for _ in 0..200 {
        let x = (a.0 * b.1 - b.0 * a.1) / (b.1 - a.1);
        let x = if x.is_finite() { x } else { 0.5 * (a.0 + b.0) };
        let (_, gx) = f(x)?;
        if gx.abs() < POLISH_TOL || (b.0 - a.0).abs() < 1e-14 {
            return Ok(Some(x));
        }
        if gx.signum() == a.1.signum() {
            a = (x, gx);
            if side == -1 {
                b.1 *= 0.5;
            }
            side = -1;
        } else {
            b = (x, gx);
            if side == 1 {
                a.1 *= 0.5;
            }
            side = 1;
        }
    }
    Ok(Some(0.5 * (a.0 + b.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValNllOptions {
    pub eta: f64,
    pub steps: usize,
    pub batch: usize,
    /// Noise draws per example per step.
    pub mc_samples: usize,
    pub seed: u64,
    /// Full-validation NLL is evaluated every this many steps.
    pub eval_every: usize,
    /// MC samples for the full-validation NLL.
    pub eval_samples: usize,
}

impl Default for ValNllOptions {
    fn default() -> Self {
        Self {
            eta: 0.1,
            steps: 1000,
            batch: 4,
            mc_samples: 1,
            seed: 0,
            eval_every: 100,
            eval_samples: 200,
        }
    }
}

/// Logit mean and scoped Jacobian of one validation example.
#[derive(Clone, Debug)]
pub struct ValExample {
    pub mu: Vec<f64>,
    pub jac: Matrix,
    pub label: usize,
}

pub fn precompute_val(
    net: &LoraNetwork,
    post: &LaplacePosterior,
    val: &Dataset,
) -> Result<Vec<ValExample>> {
    post.check_net(net)?;
    val.features
        .iter()
        .zip(&val.labels)
        .map(|(x, &label)| {
            let j = net.logits_jacobian(x)?;
            Ok(ValExample {
                jac: post.restrict_jacobian(net, &j.jac),
                mu: j.logits,
                label,
            })
        })
        .collect()
}

/// Mean validation NLL of the MC joint predictive at the posterior's λ.
pub fn validation_nll(
    post: &LaplacePosterior,
    examples: &[ValExample],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let solver = post.solver()?;
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        let lg = crate::predict::LogitGaussian::new(ex.mu.clone(), solver.logit_cov(&ex.jac))?;
        let p = crate::predict::bma_mc_joint(&lg, n_samples, crate::predict::input_seed(seed, i))?;
        total -= p.probs[ex.label].max(crate::metrics::PROB_FLOOR).ln();
    }
    Ok(total / examples.len() as f64)
}

/// Stochastic gradient ascent on the mini-batch validation log-likelihood
/// of the reparameterized model average, over `ρ = log λ`. Returns the λ
/// with the lowest full-validation NLL among the initial value and the
/// periodic evaluations.
pub fn optimize_prior_valnll(
    post: &LaplacePosterior,
    net: &LoraNetwork,
    val: &Dataset,
    opts: &ValNllOptions,
) -> Result<TuneResult> {
    val.ensure_tunable()?;
    if val.is_empty() {
        return Err(Error::BadConfig("validation set is empty".into()));
    }
    let examples = precompute_val(net, post, val)?;
    optimize_valnll_precomputed(post, &examples, opts)
}

/// Seed of the full-validation NLL evaluations made while tuning with `seed`.
pub fn valnll_eval_seed(seed: u64) -> u64 {
    seed ^ 0x0005_eed0_f7a1
}

pub fn optimize_valnll_precomputed(
    post: &LaplacePosterior,
    examples: &[ValExample],
    opts: &ValNllOptions,
) -> Result<TuneResult> {
    if examples.is_empty() {
        return Err(Error::BadConfig("validation set is empty".into()));
    }
    if opts.batch == 0 || opts.mc_samples == 0 || opts.eval_samples == 0 {
        return Err(Error::BadConfig("batch and sample counts must be positive".into()));
    }
    let eval_seed = valnll_eval_seed(opts.seed);
    let full_nll = |p: &LaplacePosterior| validation_nll(p, examples, opts.eval_samples, eval_seed);

    let mut best = TuneResult {
        lambda: post.lambda.clone(),
        objective: full_nll(post)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rho: Vec<f64> = post.lambda.values().iter().map(|l| l.ln()).collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let eval_every = opts.eval_every.max(1);

    for step in 1..=opts.steps {
        let current = post.with_lambda(post.lambda.with_values(rho.iter().map(|r| r.exp()).collect()))?;
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch.min(examples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let grad = current
            .solver()
            .and_then(|s| batch_loglik_grad(&current, &s, examples, &batch, opts.mc_samples, &mut rng));
        match grad {
            Ok(g) if g.iter().all(|v| v.is_finite()) => {
                for (r, gi) in rho.iter_mut().zip(&g) {
                    *r = (*r + opts.eta * gi).clamp(LOG_LAMBDA_BOUNDS.0, LOG_LAMBDA_BOUNDS.1);
                }
            }
            // A failed step leaves λ unchanged.
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::NotPositiveDefinite { .. }) => {}
            Err(e) => return Err(e),
        }
        if step % eval_every == 0 || step == opts.steps {
            let cand = post.with_lambda(post.lambda.with_values(rho.iter().map(|r| r.exp()).collect()))?;
            if let Ok(nll) = full_nll(&cand) {
                if nll.is_finite() && nll < best.objective {
                    best = TuneResult {
                        lambda: cand.lambda.clone(),
                        objective: nll,
                    };
                }
            }
        }
    }
    Ok(best)
}

/// Gradient of the mean mini-batch log-likelihood with respect to `ρ`.
///
/// With `z = μ + L ξ`, `Λ = L Lᵀ` and `Λ(λ) = J Σ(λ) Jᵀ`:
/// `∂Λ/∂ρ_b = −λ_b U_bᵀ U_b` where `U = Σ Jᵀ`, and
/// `dL = L Φ(L⁻¹ dΛ L⁻ᵀ)` with `Φ` taking the lower triangle and halving
/// the diagonal.
fn batch_loglik_grad(
    post: &LaplacePosterior,
    solver: &PosteriorSolver,
    examples: &[ValExample],
    batch: &[usize],
    mc_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let n_par = post.lambda.values().len();
    let mut grad = vec![0.0; n_par];
    let scale = 1.0 / (batch.len() * mc_samples) as f64;
    for &i in batch {
        let ex = &examples[i];
        let c = ex.mu.len();
        let u = solver.apply_cols(&ex.jac);
        let mut lam = ex.jac.matmul(&u);
        lam.symmetrize();
        let chol = cholesky(&lam, 0.0)?;
        let l = chol.lower();
        // L⁻¹ U_bᵀ per block, shared across noise draws
        let per_block: Vec<Matrix> = post
            .blocks
            .iter()
            .map(|blk| {
                let ub = Matrix::from_fn(c, blk.len(), |r, k| u[(blk.local.start + k, r)]);
                chol.solve_lower_mat(&ub)
            })
            .collect();
        for _ in 0..mc_samples {
            let xi: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            let z: Vec<f64> = ex.mu.iter().zip(l.matvec(&xi)).map(|(m, s)| m + s).collect();
            let mut r = softmax(&z);
            r[ex.label] -= 1.0; // ∂(−log p_y)/∂z
            for (b, vb) in per_block.iter().enumerate() {
                let lb = post.lambda.for_block(b);
                // L⁻¹ dΛ L⁻ᵀ = −λ_b (L⁻¹U_bᵀ)(L⁻¹U_bᵀ)ᵀ
                let mut inner = vb.matmul_t(vb);
                inner.scale_in_place(-lb);
                for col in 0..c {
                    inner[(col, col)] *= 0.5;
                    for row in 0..col {
                        inner[(row, col)] = 0.0;
                    }
                }
                let dz = l.matmul(&inner).matvec(&xi);
                // ascent direction on log-likelihood
                grad[post.lambda.param_of(b)] -= scale * dot(&r, &dz);
            }
        }
    }
    Ok(grad)
}

/// Fits the Fisher with `opts.kfac.mode` overridden; convenience for the
/// common exact-class setting.
pub fn fit_exact_classes(
    net: &LoraNetwork,
    data: &Dataset,
    scope: Scope,
    variant: FisherVariant,
    n_kfac: usize,
    lambda: PriorPrecision,
) -> Result<LaplacePosterior> {
    LaplacePosterior::fit(
        net,
        data,
        scope,
        &LaplaceOptions {
            variant,
            kfac: KfacOptions {
                n_kfac,
                mode: FisherMode::Exact,
                ..KfacOptions::default()
            },
        },
        lambda,
    )
}
