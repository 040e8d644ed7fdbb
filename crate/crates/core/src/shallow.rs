//! One Q-EP layer: exact regression, the PCA-style maximum-likelihood latent
//! initialization, and the sparse variational bound.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QepError, Result};
use crate::kernels::{gram, KernelFamily, KernelSpec, KernelVars, PsiStats};
use crate::linalg;
use crate::optim::tape::{hstack, Tape, Var};
use crate::qed::{entropy_constant, R_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: KernelSpec,
    /// Noise precision, `Σ = β⁻¹ I`.
    pub beta: f64,
    pub q: f64,
    pub num_inducing: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.num_inducing == 0 {
            return Err(invalid("layer dimensions and inducing count must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid("noise precision beta must be positive"));
        }
        if !(self.q > 0.0 && self.q <= 2.0) {
            return Err(invalid(format!("q must lie in (0, 2], got {}", self.q)));
        }
        self.kernel.validate()?;
        if self.kernel.input_dim() != self.in_dim {
            return Err(invalid("kernel ARD length differs from the layer input width"));
        }
        Ok(())
    }
}

/// Variational parameters of one layer. `x_mean`/`x_cov_diag` describe
/// `q(X)` over the layer inputs; they have zero rows when the inputs are
/// observed.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub inducing: DMatrix<f64>,
    pub u_mean: DMatrix<f64>,
    pub u_cov_chol: Vec<DMatrix<f64>>,
    pub x_mean: DMatrix<f64>,
    pub x_cov_diag: DMatrix<f64>,
}

impl VariationalState {
    pub fn validate(&self, spec: &LayerSpec) -> Result<()> {
        let (m, q, d) = (spec.num_inducing, spec.in_dim, spec.out_dim);
        if self.inducing.shape() != (m, q) {
            return Err(invalid("inducing inputs must be M × Q"));
        }
        if self.u_mean.shape() != (m, d) {
            return Err(invalid("inducing mean must be M × D"));
        }
        if self.u_cov_chol.len() != d
            || self.u_cov_chol.iter().any(|l| l.shape() != (m, m) || l.diagonal().iter().any(|v| !(*v > 0.0)))
        {
            return Err(invalid("need D lower-triangular M × M factors with positive diagonals"));
        }
        if self.x_mean.ncols() != q || self.x_cov_diag.shape() != self.x_mean.shape() {
            return Err(invalid("latent mean and covariance diagonals must both be N × Q"));
        }
        if self.x_cov_diag.iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("latent covariance diagonals must be positive"));
        }
        Ok(())
    }

    pub fn u_cov(&self, d: usize) -> DMatrix<f64> {
        &self.u_cov_chol[d] * self.u_cov_chol[d].transpose()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub h_star: f64,
    pub kl_u_star: f64,
    pub kl_x_star: f64,
    pub total: f64,
    /// Number of quadratic forms clamped at the floor `1e-12`.
    pub clamped: usize,
}

/// Exact predictive law at `x_test`: `µ* = C*ᵀ(C + Σ)⁻¹Y`,
/// `C* = C** − C*ᵀ(C + Σ)⁻¹C*`. All output columns share the scale matrix.
pub fn qep_regression_predict(
    x_train: &DMatrix<f64>,
    y_train: &DMatrix<f64>,
    spec: &LayerSpec,
    x_test: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    if x_train.nrows() != y_train.nrows() {
        return Err(invalid("training inputs and targets differ in row count"));
    }
    let k = noisy_gram(spec, x_train)?;
    let lk = linalg::cholesky(&k)?;
    let ct = gram(&spec.kernel, x_train, x_test)?;
    let css = gram(&spec.kernel, x_test, x_test)?;
    let w = linalg::solve_lower(&lk, &ct);
    let mean = w.transpose() * linalg::solve_lower(&lk, y_train);
    let cov = linalg::symmetrize(&(css - w.transpose() * &w));
    Ok((mean, cov, spec.q))
}

fn noisy_gram(spec: &LayerSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut k = gram(&spec.kernel, x, x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += 1.0 / spec.beta;
    }
    Ok(k)
}

/// `L = −(D/2)log|K| + (ND/2)(q/2 − 1)log r(Y) − ½ r(Y)^{q/2}`, `K = C_X + β⁻¹I`.
pub fn marginal_loglik(y: &DMatrix<f64>, x: &DMatrix<f64>, spec: &LayerSpec) -> Result<f64> {
    if y.nrows() != x.nrows() {
        return Err(invalid("inputs and targets differ in row count"));
    }
    let lk = linalg::cholesky(&noisy_gram(spec, x)?)?;
    loglik_from_chol(y, &lk, spec.q)
}

fn loglik_from_chol(y: &DMatrix<f64>, lk: &DMatrix<f64>, q: f64) -> Result<f64> {
    let (n, d) = y.shape();
    let r = linalg::solve_lower(lk, y).norm_squared();
    if !(r > 0.0) {
        return Err(QepError::SingularDensity("r(Y) = 0".into()));
    }
    let nd = (n * d) as f64;
    Ok(-0.5 * d as f64 * linalg::chol_logdet(lk) + 0.5 * nd * (0.5 * q - 1.0) * r.ln() - 0.5 * r.powf(0.5 * q))
}

/// Which expression produced the scale `c` in [`mle_pca_init`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaScale {
    /// `c = [q k^{q/2} / (2Dk + (q − 2)ND)]^{2/q}`, `k = D ∧ Q`.
    ClosedForm,
    /// The closed form has a non-positive denominator; `c` solves the
    /// scalar stationarity equation including the discarded eigenvalues.
    Stationary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaInit {
    pub x: DMatrix<f64>,
    pub c: f64,
    pub scale: PcaScale,
    /// Columns whose `l_i` was clipped to zero.
    pub zeroed: Vec<usize>,
    /// All columns were zero and a small random matrix was returned.
    pub degenerate: bool,
}

/// Eigenpairs of a symmetric matrix, descending, with the first nonzero
/// entry of every eigenvector made positive.
pub(crate) fn sorted_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(linalg::symmetrize(a));
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in idx.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.neg_mut();
            }
        }
        vecs.set_column(k, &v);
    }
    (vals, vecs)
}

/// Maximum-likelihood latent positions for the linear-kernel model
/// `K = α⁻¹XXᵀ + β⁻¹I`: `X = U_Q L`, `lᵢ = √(α(cλᵢ − β⁻¹))`.
pub fn mle_pca_init(y: &DMatrix<f64>, latent_dim: usize, alpha: f64, beta: f64, q: f64) -> Result<PcaInit> {
    let (n, d) = y.shape();
    if latent_dim == 0 || latent_dim > n {
        return Err(invalid(format!("latent dimension {latent_dim} must lie in 1..={n}")));
    }
    if !(alpha > 0.0 && beta > 0.0 && q > 0.0) {
        return Err(invalid("alpha, beta and q must be positive"));
    }
    let (lambdas, u) = sorted_eigen(&(y * y.transpose()));
    let k = d.min(latent_dim) as f64;
    let den = 2.0 * d as f64 * k + (q - 2.0) * (n * d) as f64;
    let (c, scale) = if den > 0.0 {
        ((q * k.powf(0.5 * q) / den).powf(2.0 / q), PcaScale::ClosedForm)
    } else {
        warn!("closed-form PCA scale has denominator {den} <= 0; solving the stationarity equation instead");
        let c = stationary_scale(y, &lambdas, &u, latent_dim, alpha, beta, q).unwrap_or(1.0 / d as f64);
        (c, PcaScale::Stationary)
    };
    let (x, zeroed) = pca_positions(&lambdas, &u, latent_dim, alpha, beta, c);
    if zeroed.len() == latent_dim {
        warn!("every PCA scale is non-positive; returning a small random initialization");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DMatrix::from_fn(n, latent_dim, |_, _| 1e-2 * rng.random_range(-1.0..1.0));
        return Ok(PcaInit { x, c, scale, zeroed, degenerate: true });
    }
    if !zeroed.is_empty() {
        warn!("PCA scales clipped to zero for latent columns {zeroed:?}");
    }
    Ok(PcaInit { x, c, scale, zeroed, degenerate: false })
}

fn pca_positions(lambdas: &[f64], u: &DMatrix<f64>, q_dim: usize, alpha: f64, beta: f64, c: f64) -> (DMatrix<f64>, Vec<usize>) {
    let mut x = DMatrix::zeros(u.nrows(), q_dim);
    let mut zeroed = Vec::new();
    for i in 0..q_dim {
        let arg = c * lambdas[i] - 1.0 / beta;
        if arg > 0.0 {
            x.set_column(i, &(u.column(i) * (alpha * arg).sqrt()));
        } else {
            zeroed.push(i);
        }
    }
    (x, zeroed)
}

/// Solves `c = (2/D) w(r(c))` with `w(r) = (ND/2)(1 − q/2)/r + (q/4) r^{q/2−1}`
/// and `r(c)` the quadratic form at the induced positions. Among the roots
/// the one with the largest likelihood wins.
fn stationary_scale(y: &DMatrix<f64>, lambdas: &[f64], u: &DMatrix<f64>, q_dim: usize, alpha: f64, beta: f64, q: f64) -> Option<f64> {
    let (n, d) = y.shape();
    let nd = (n * d) as f64;
    let r_of = |c: f64| -> f64 {
        lambdas
            .iter()
            .enumerate()
            .map(|(i, &l)| if i < q_dim && c * l > 1.0 / beta { 1.0 / c } else { beta * l.max(0.0) })
            .sum()
    };
    let g = |c: f64| {
        let r = r_of(c);
        c - (2.0 / d as f64) * (0.5 * nd * (1.0 - 0.5 * q) / r + 0.25 * q * r.powf(0.5 * q - 1.0))
    };
    let top = lambdas[0].max(f64::MIN_POSITIVE);
    let (lo, hi) = ((1e-8 / top).ln(), (1e8 / (beta * top).min(1.0 / top)).ln().max((1e8 / top).ln()));
    let steps = 4000;
    let grid: Vec<f64> = (0..=steps).map(|i| (lo + (hi - lo) * i as f64 / steps as f64).exp()).collect();
    let mut best: Option<(f64, f64)> = None;
    for w in grid.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (ga, gb) = (g(a), g(b));
        if ga.signum() == gb.signum() {
            continue;
        }
        let ga_sign = ga.signum();
        for _ in 0..200 {
            let mid = (a * b).sqrt();
            if g(mid).signum() == ga_sign {
                a = mid;
            } else {
                b = mid;
            }
        }
        let c = (a * b).sqrt();
        if g(c).abs() > 1e-8 * c {
            continue; // jump in the active set, not a root
        }
        let (x, _) = pca_positions(lambdas, u, q_dim, alpha, beta, c);
        let k = &x * x.transpose() / alpha + DMatrix::identity(n, n) / beta;
        let Ok(lk) = linalg::cholesky(&k) else { continue };
        let Ok(ll) = loglik_from_chol(y, &lk, q) else { continue };
        if best.is_none_or(|(_, b)| ll > b) {
            best = Some((c, ll));
        }
    }
    best.map(|(c, _)| c)
}

/// Parameters of `q(F)` at new inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QfPrediction {
    /// T × D.
    pub mean: DMatrix<f64>,
    /// One T × T covariance per output column.
    pub cov: Vec<DMatrix<f64>>,
    pub q: f64,
}

/// `q(F)` after marginalizing `U`: mean `K_NM K_MM⁻¹ M`, covariance
/// `K_NN − K_NM K_MM⁻¹ K_MN + K_NM K_MM⁻¹ Σ_d K_MM⁻¹ K_MN`.
pub fn predict_q_f(state: &VariationalState, spec: &LayerSpec, x_new: &DMatrix<f64>) -> Result<QfPrediction> {
    if x_new.ncols() != spec.in_dim {
        return Err(invalid("new inputs have the wrong width"));
    }
    let kmm = gram(&spec.kernel, &state.inducing, &state.inducing)?;
    let lk = linalg::cholesky(&kmm)?;
    let kms = gram(&spec.kernel, &state.inducing, x_new)?;
    let kss = gram(&spec.kernel, x_new, x_new)?;
    let a = linalg::solve_lower(&lk, &kms);
    let w = linalg::solve_lower_t(&lk, &a);
    let mean = w.transpose() * &state.u_mean;
    let base = kss - a.transpose() * &a;
    let cov = state
        .u_cov_chol
        .iter()
        .map(|l| {
            let b = l.transpose() * &w;
            linalg::symmetrize(&(&base + b.transpose() * b))
        })
        .collect();
    Ok(QfPrediction { mean, cov, q: spec.q })
}

/// Mean and per-entry variance of `q(F)` (the diagonals of
/// [`predict_q_f`]) without forming T × T matrices.
pub fn predict_q_f_diag(state: &VariationalState, spec: &LayerSpec, x_new: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if x_new.ncols() != spec.in_dim {
        return Err(invalid("new inputs have the wrong width"));
    }
    let t = x_new.nrows();
    let kmm = gram(&spec.kernel, &state.inducing, &state.inducing)?;
    let lk = linalg::cholesky(&kmm)?;
    let kms = gram(&spec.kernel, &state.inducing, x_new)?;
    let a = linalg::solve_lower(&lk, &kms);
    let w = linalg::solve_lower_t(&lk, &a);
    let mean = w.transpose() * &state.u_mean;
    let kdiag: Vec<f64> = (0..t)
        .map(|i| {
            let r: Vec<f64> = x_new.row(i).iter().copied().collect();
            spec.kernel.eval(&r, &r) + spec.kernel.jitter / spec.kernel.alpha
        })
        .collect();
    let mut var = DMatrix::zeros(t, spec.out_dim);
    for (dd, l) in state.u_cov_chol.iter().enumerate() {
        let b = l.transpose() * &w;
        for i in 0..t {
            let v = kdiag[i] - a.column(i).norm_squared() + b.column(i).norm_squared();
            var[(i, dd)] = v.max(0.0);
        }
    }
    Ok((mean, var))
}

/// Plain evaluation of the bound for given psi statistics.
pub fn shallow_elbo(y: &DMatrix<f64>, state: &VariationalState, spec: &LayerSpec, psi: &PsiStats) -> Result<ElboBreakdown> {
    spec.validate()?;
    state.validate(spec)?;
    if y.ncols() != spec.out_dim || y.nrows() != state.x_mean.nrows() {
        return Err(invalid("targets must be N × D matching the latent rows"));
    }
    if psi.psi1.shape() != (y.nrows(), spec.num_inducing) {
        return Err(invalid("psi statistics do not match the state"));
    }
    let tape = Tape::new();
    let lv = LayerVars::constant(&tape, spec, state);
    let psi_v = (tape.scalar(psi.psi0), tape.var(psi.psi1.clone()), tape.var(psi.psi2.clone()));
    let terms = layer_bound(&lv, tape.var(y.clone()), None, psi_v, spec.q)?;
    let (kl_x, cx) = neg_kl_x(tape.var(state.x_mean.clone()), tape.var(state.x_cov_diag.clone()), spec.q);
    let h_star = terms.h.scalar_value();
    let kl_u_star = -terms.neg_kl_u.scalar_value();
    let kl_x_star = -kl_x.scalar_value();
    Ok(ElboBreakdown {
        h_star,
        kl_u_star,
        kl_x_star,
        total: h_star - kl_u_star - kl_x_star,
        clamped: terms.clamped + cx as usize,
    })
}

/// One layer's parameters on a tape.
pub(crate) struct LayerVars<'t> {
    pub kernel: KernelVars<'t>,
    pub beta: Var<'t>,
    pub inducing: Var<'t>,
    pub u_mean: Var<'t>,
    pub u_chols: Vec<Var<'t>>,
}

impl<'t> LayerVars<'t> {
    pub fn constant(tape: &'t Tape, spec: &LayerSpec, state: &VariationalState) -> Self {
        Self {
            kernel: KernelVars::constant(tape, &spec.kernel),
            beta: tape.scalar(spec.beta),
            inducing: tape.var(state.inducing.clone()),
            u_mean: tape.var(state.u_mean.clone()),
            u_chols: state.u_cov_chol.iter().map(|l| tape.var(l.clone())).collect(),
        }
    }
}

/// Layer input: observed points or a diagonal `q(X)`.
#[derive(Clone, Copy)]
pub(crate) enum LayerInput<'t> {
    Exact(Var<'t>),
    Dist { mu: Var<'t>, s: Var<'t> },
}

/// How expectations under `q(X)` are taken.
pub(crate) enum PsiRoute<'a> {
    Closed,
    Mc { noise: &'a DMatrix<f64>, draws: usize },
}

pub(crate) fn psi_on_tape<'t>(
    kv: &KernelVars<'t>,
    input: LayerInput<'t>,
    z: Var<'t>,
    route: PsiRoute<'_>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    match input {
        LayerInput::Exact(x) => {
            let k = kv.gram(x, z, false);
            let psi0 = match kv.family {
                KernelFamily::LinearArd => x.hadamard(x).scale_cols(kv.sqrt_gamma.hadamard(kv.sqrt_gamma)).sum(),
                _ => kv.alpha_inv.scale(x.nrows() as f64),
            };
            Ok((psi0, k, k.t().matmul(k)))
        }
        LayerInput::Dist { mu, s } => match route {
            PsiRoute::Closed => kv.psi_closed(mu, s, z),
            PsiRoute::Mc { noise, draws } => Ok(kv.psi_mc(mu, s, z, noise, draws)),
        },
    }
}

/// `φ(r; Σ, D)` with `r` clamped at `1e-12`; the flag reports clamping.
pub(crate) fn phi_tape<'t>(r: Var<'t>, log_det_sigma: Var<'t>, n_rows: usize, n_cols: usize, q: f64) -> (Var<'t>, bool) {
    let clamped = !(r.scalar_value() >= R_EPS);
    let r = r.clamp_min(R_EPS);
    let nd = (n_rows * n_cols) as f64;
    let mut out = log_det_sigma.scale(-0.5 * n_cols as f64) - r.powf(0.5 * q).scale(0.5);
    if q != 2.0 {
        out = out + r.ln().scale(0.5 * nd * (0.5 * q - 1.0));
    }
    (out, clamped)
}

pub(crate) struct LayerTerms<'t> {
    pub h: Var<'t>,
    pub neg_kl_u: Var<'t>,
    pub clamped: usize,
}

/// `h* = φ(r; β⁻¹I_N, D)` and `−KL*_U` for one layer. `target_s` adds the
/// `Σ Sₙ` term of a latent target.
pub(crate) fn layer_bound<'t>(
    lv: &LayerVars<'t>,
    target: Var<'t>,
    target_s: Option<Var<'t>>,
    psi: (Var<'t>, Var<'t>, Var<'t>),
    q: f64,
) -> Result<LayerTerms<'t>> {
    let lk = lv.kmm_chol()?;
    let (h, c1) = h_star(lv, lk, target, target_s, psi, q);
    let (neg_kl_u, c2) = neg_kl_u(lv, lk, q);
    Ok(LayerTerms { h, neg_kl_u, clamped: c1 as usize + c2 as usize })
}

pub(crate) fn h_star<'t>(
    lv: &LayerVars<'t>,
    lk: Var<'t>,
    target: Var<'t>,
    target_s: Option<Var<'t>>,
    psi: (Var<'t>, Var<'t>, Var<'t>),
    q: f64,
) -> (Var<'t>, bool) {
    let (psi0, psi1, psi2) = psi;
    let (n, d) = target.shape();
    assert_eq!(psi1.shape(), (n, lv.inducing.nrows()), "Ψ₁ must be N × M");
    let a = lk.chol_solve(lv.u_mean);
    let p1a = psi1.matmul(a);
    let fit = (target - p1a).sum_sq();
    let spread = a.hadamard(psi2.matmul(a)).sum() - p1a.sum_sq();
    let nystrom = (psi0 - lk.chol_solve(psi2).trace()).scale(d as f64);
    let w = lk.chol_solve(hstack(&lv.u_chols));
    let u_var = w.hadamard(psi2.matmul(w)).sum();
    let mut r = fit + spread + nystrom + u_var;
    if let Some(s) = target_s {
        assert_eq!(s.shape(), (n, d), "latent target covariance must be N × D");
        r = r + s.sum();
    }
    let r = r.mul_scalar(lv.beta);
    phi_tape(r, lv.beta.ln().scale(-(n as f64)), n, d, q)
}

pub(crate) fn neg_kl_u<'t>(lv: &LayerVars<'t>, lk: Var<'t>, q: f64) -> (Var<'t>, bool) {
    let (m, d) = lv.u_mean.shape();
    let mut ent = lv.beta.tape().scalar(entropy_constant(m, d, q));
    for l in &lv.u_chols {
        ent = ent + l.chol_logdet().scale(0.5);
    }
    let r_u = lk.solve_lower(lv.u_mean).sum_sq() + lk.solve_lower(hstack(&lv.u_chols)).sum_sq();
    let (phi_u, c) = phi_tape(r_u, lk.chol_logdet(), m, d, q);
    (ent + phi_u, c)
}

impl<'t> LayerVars<'t> {
    pub fn kmm_chol(&self) -> Result<Var<'t>> {
        self.kernel.gram(self.inducing, self.inducing, true).try_cholesky()
    }
}

/// `−KL*_X` against the standard prior: entropy of `q(X)` plus
/// `φ(Σµ² + ΣS; I_N, Q)`.
pub(crate) fn neg_kl_x<'t>(mu: Var<'t>, s: Var<'t>, q: f64) -> (Var<'t>, bool) {
    let (n, qd) = mu.shape();
    let tape = mu.tape();
    let ent = s.ln().sum().scale(0.5).add_scalar(tape.scalar(entropy_constant(n, qd, q)));
    let r = mu.sum_sq() + s.sum();
    let (phi, c) = phi_tape(r, tape.scalar(0.0), n, qd, q);
    (ent + phi, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::psi_stats_closed;
    use crate::qed::{condition, QedParams};
    use nalgebra::DVector;
    use std::f64::consts::PI;

    fn rand_mat(r: usize, c: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    fn se_layer(q_in: usize, d: usize, m: usize, q: f64, beta: f64) -> LayerSpec {
        LayerSpec {
            in_dim: q_in,
            out_dim: d,
            kernel: KernelSpec::new(KernelFamily::SeArd, 1.3, vec![0.8; q_in]).unwrap(),
            beta,
            q,
            num_inducing: m,
        }
    }

    fn inv(a: &DMatrix<f64>) -> DMatrix<f64> {
        a.clone().try_inverse().unwrap()
    }

    #[test]
    fn q2_regression_matches_textbook_gp() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = se_layer(2, 2, 1, 2.0, 25.0);
        let x = rand_mat(10, 2, -2.0, 2.0, &mut rng);
        let y = rand_mat(10, 2, -1.0, 1.0, &mut rng);
        let xs = rand_mat(4, 2, -2.0, 2.0, &mut rng);
        let (mean, cov, q) = qep_regression_predict(&x, &y, &spec, &xs).unwrap();
        let k = gram(&spec.kernel, &x, &x).unwrap() + DMatrix::identity(10, 10) / 25.0;
        let kinv = inv(&k);
        let ks = gram(&spec.kernel, &x, &xs).unwrap();
        let kss = gram(&spec.kernel, &xs, &xs).unwrap();
        assert_eq!(q, 2.0);
        assert!((mean - ks.transpose() * &kinv * &y).amax() < 1e-9);
        assert!((cov - (kss - ks.transpose() * &kinv * &ks)).amax() < 1e-9);
    }

    #[test]
    fn noiseless_limit_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut spec = se_layer(1, 1, 1, 1.0, 1e10);
        spec.kernel.jitter = 0.0;
        let x = DMatrix::from_column_slice(5, 1, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let y = rand_mat(5, 1, -1.0, 1.0, &mut rng);
        let xs = x.rows(2, 1).into_owned();
        let (mean, _, _) = qep_regression_predict(&x, &y, &spec, &xs).unwrap();
        assert!((mean[(0, 0)] - y[(2, 0)]).abs() < 1e-6);
    }

    #[test]
    fn regression_matches_joint_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = se_layer(2, 1, 1, 1.4, 10.0);
        let x = rand_mat(12, 2, -2.0, 2.0, &mut rng);
        let y = rand_mat(12, 1, -1.0, 1.0, &mut rng);
        let xs = rand_mat(3, 2, -2.0, 2.0, &mut rng);
        let (mean, cov, _) = qep_regression_predict(&x, &y, &spec, &xs).unwrap();
        let all = DMatrix::from_fn(15, 2, |i, j| if i < 12 { x[(i, j)] } else { xs[(i - 12, j)] });
        let mut joint = gram(&spec.kernel, &all, &all).unwrap();
        // jitter on the test block must match gram(xs, xs) which also adds it
        for i in 0..12 {
            joint[(i, i)] += 0.1;
        }
        let params = QedParams::new(DVector::zeros(15), &joint, 1.4).unwrap();
        let obs: Vec<usize> = (0..12).collect();
        let post = condition(&params, &obs, &y.column(0).into_owned()).unwrap();
        assert!((post.mu() - mean.column(0)).amax() < 1e-9);
        assert!((post.scale() - cov).amax() < 1e-9);
    }

    #[test]
    fn q2_marginal_loglik_matches_gaussian_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = se_layer(2, 3, 1, 2.0, 5.0);
        let x = rand_mat(8, 2, -2.0, 2.0, &mut rng);
        let y = rand_mat(8, 3, -1.0, 1.0, &mut rng);
        let k = gram(&spec.kernel, &x, &x).unwrap() + DMatrix::identity(8, 8) / 5.0;
        let kinv = inv(&k);
        let logdet = k.determinant().ln();
        let gauss: f64 = (0..3)
            .map(|d| {
                let c = y.column(d);
                -0.5 * (c.transpose() * &kinv * c)[(0, 0)] - 0.5 * logdet - 4.0 * (2.0 * PI).ln()
            })
            .sum();
        let l = marginal_loglik(&y, &x, &spec).unwrap();
        assert!((l - (gauss + 12.0 * (2.0 * PI).ln())).abs() < 1e-9);
    }

    #[test]
    fn zero_targets_are_singular() {
        let spec = se_layer(1, 1, 1, 1.0, 5.0);
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let r = marginal_loglik(&DMatrix::zeros(3, 1), &x, &spec);
        assert!(matches!(r, Err(QepError::SingularDensity(_))));
    }

    #[test]
    fn doubling_k_and_rescaling_y_keeps_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = se_layer(1, 2, 1, 1.3, 4.0);
        let x = rand_mat(6, 1, -2.0, 2.0, &mut rng);
        let y = rand_mat(6, 2, -1.0, 1.0, &mut rng);
        let mut doubled = spec.clone();
        doubled.kernel.alpha /= 2.0;
        doubled.beta /= 2.0;
        let l1 = marginal_loglik(&y, &x, &spec).unwrap();
        let l2 = marginal_loglik(&(&y * 2f64.sqrt()), &x, &doubled).unwrap();
        // only the log-determinant moves: −(D/2)·N·log 2
        assert!((l2 - l1 + 0.5 * 2.0 * 6.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn pca_q2_scale_is_one_over_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = rand_mat(8, 3, -2.0, 2.0, &mut rng);
        let init = mle_pca_init(&y, 2, 1.5, 20.0, 2.0).unwrap();
        assert_eq!(init.scale, PcaScale::ClosedForm);
        assert!((init.c - 1.0 / 3.0).abs() < 1e-15);
        let (lam, _) = sorted_eigen(&(&y * y.transpose()));
        for i in 0..2 {
            let li = (1.5 * (lam[i] / 3.0 - 1.0 / 20.0)).sqrt();
            assert!((init.x.column(i).norm() - li).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_boundary_clips_to_zero() {
        // D = 1, single eigenvalue λ = ‖y‖² = β⁻¹
        let y = DMatrix::from_column_slice(2, 1, &[0.5, 0.0]);
        let init = mle_pca_init(&y, 1, 1.0, 4.0, 2.0).unwrap();
        assert_eq!(init.zeroed, vec![0]);
        assert!(init.degenerate);
    }

    fn fixture(n: usize, m: usize, d: usize, q: f64, rng: &mut ChaCha8Rng) -> (DMatrix<f64>, VariationalState, LayerSpec) {
        let spec = se_layer(2, d, m, q, 3.0);
        let y = rand_mat(n, d, -1.0, 1.0, rng);
        let state = VariationalState {
            inducing: rand_mat(m, 2, -1.0, 1.0, rng),
            u_mean: rand_mat(m, d, -1.0, 1.0, rng),
            u_cov_chol: (0..d)
                .map(|_| {
                    let mut l = linalg::tril(&rand_mat(m, m, -0.2, 0.2, rng));
                    for i in 0..m {
                        l[(i, i)] = rng.random_range(0.2..0.6);
                    }
                    l
                })
                .collect(),
            x_mean: rand_mat(n, 2, -1.0, 1.0, rng),
            x_cov_diag: rand_mat(n, 2, 0.05, 0.3, rng),
        };
        (y, state, spec)
    }

    /// Gaussian SVGP-style bound written with explicit inverses and
    /// per-point expectations.
    fn gaussian_oracle(y: &DMatrix<f64>, st: &VariationalState, spec: &LayerSpec, psi: &PsiStats) -> (f64, f64, f64) {
        let (n, d) = y.shape();
        let m = spec.num_inducing;
        let kmm = gram(&spec.kernel, &st.inducing, &st.inducing).unwrap();
        let ki = inv(&kmm);
        let b = spec.beta;
        let per = psi.per_point_psi2.as_ref().unwrap();
        let mut e_sq = 0.0;
        for i in 0..n {
            let p0 = psi.psi0 / n as f64;
            for dd in 0..d {
                let a = &ki * st.u_mean.column(dd);
                let mean = (psi.psi1.row(i) * &a)[(0, 0)];
                let second = (a.transpose() * &per[i] * &a)[(0, 0)];
                let sig = st.u_cov(dd);
                e_sq += y[(i, dd)].powi(2) - 2.0 * y[(i, dd)] * mean + second + p0 - (&ki * &per[i]).trace()
                    + (&ki * &sig * &ki * &per[i]).trace();
            }
        }
        let h = 0.5 * (n * d) as f64 * (b.ln() - (2.0 * PI).ln()) - 0.5 * b * e_sq;
        let mut kl_u = 0.0;
        for dd in 0..d {
            let sig = st.u_cov(dd);
            let md = st.u_mean.column(dd);
            kl_u += 0.5
                * ((&ki * &sig).trace() + (md.transpose() * &ki * md)[(0, 0)] - m as f64 + kmm.determinant().ln()
                    - sig.determinant().ln());
        }
        let mut kl_x = 0.0;
        for i in 0..n {
            for j in 0..spec.in_dim {
                let (mu, s) = (st.x_mean[(i, j)], st.x_cov_diag[(i, j)]);
                kl_x += 0.5 * (s + mu * mu - 1.0 - s.ln());
            }
        }
        (h, kl_u, kl_x)
    }

    #[test]
    fn q2_bound_matches_gaussian_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (y, st, spec) = fixture(10, 3, 2, 2.0, &mut rng);
        let psi = psi_stats_closed(&spec.kernel, &st.x_mean, &st.x_cov_diag, &st.inducing).unwrap();
        let e = shallow_elbo(&y, &st, &spec, &psi).unwrap();
        let (h, kl_u, kl_x) = gaussian_oracle(&y, &st, &spec, &psi);
        // φ omits the Gaussian normalizer of the likelihood
        assert!((e.h_star - (h + 10.0 * (2.0 * PI).ln())).abs() < 1e-8, "{} vs {}", e.h_star, h);
        assert!((e.kl_u_star - kl_u).abs() < 1e-8);
        assert!((e.kl_x_star - kl_x).abs() < 1e-8);
        assert!((e.total - (e.h_star - e.kl_u_star - e.kl_x_star)).abs() < 1e-10);
        assert_eq!(e.clamped, 0);
    }

    #[test]
    fn vanishing_variances_reduce_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (y, mut st, spec) = fixture(6, 3, 2, 1.0, &mut rng);
        st.x_cov_diag.fill(1e-300);
        for l in st.u_cov_chol.iter_mut() {
            *l = DMatrix::identity(3, 3) * 1e-150;
        }
        let psi = psi_stats_closed(&spec.kernel, &st.x_mean, &st.x_cov_diag, &st.inducing).unwrap();
        let e = shallow_elbo(&y, &st, &spec, &psi).unwrap();
        let kmm = gram(&spec.kernel, &st.inducing, &st.inducing).unwrap();
        let f = &psi.psi1 * inv(&kmm) * &st.u_mean;
        let r = spec.beta * ((&y - f).norm_squared() + 2.0 * (psi.psi0 - (inv(&kmm) * &psi.psi2).trace()));
        let expect = crate::qed::phi(crate::qed::PhiArgs {
            r,
            log_det_sigma: -(6.0 * spec.beta.ln()),
            n_rows: 6,
            n_cols: 2,
            q: 1.0,
        })
        .unwrap();
        assert!((e.h_star - expect).abs() < 1e-8 * expect.abs().max(1.0));
    }

    #[test]
    fn q_f_interpolates_at_inducing_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_, mut st, spec) = fixture(4, 3, 2, 1.0, &mut rng);
        for l in st.u_cov_chol.iter_mut() {
            *l = DMatrix::identity(3, 3) * 1e-8;
        }
        let z = st.inducing.clone();
        let p = predict_q_f(&st, &spec, &z).unwrap();
        assert!((p.mean - &st.u_mean).amax() < 1e-4);
        for c in &p.cov {
            assert!(c.amax() < 1e-5);
        }
    }

    #[test]
    fn q_f_matches_gaussian_sparse_oracle_and_diag() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, st, spec) = fixture(4, 3, 2, 2.0, &mut rng);
        let xs = rand_mat(5, 2, -1.5, 1.5, &mut rng);
        let p = predict_q_f(&st, &spec, &xs).unwrap();
        let ki = inv(&gram(&spec.kernel, &st.inducing, &st.inducing).unwrap());
        let ksm = gram(&spec.kernel, &xs, &st.inducing).unwrap();
        let kss = gram(&spec.kernel, &xs, &xs).unwrap();
        assert!((&p.mean - &ksm * &ki * &st.u_mean).amax() < 1e-9);
        let (_, var) = predict_q_f_diag(&st, &spec, &xs).unwrap();
        for dd in 0..2 {
            let c = &kss - &ksm * &ki * ksm.transpose() + &ksm * &ki * st.u_cov(dd) * &ki * ksm.transpose();
            assert!((&p.cov[dd] - &c).amax() < 1e-9);
            assert!(linalg::min_eigenvalue(&p.cov[dd]) >= -1e-8 * p.cov[dd].trace());
            for i in 0..5 {
                assert!((var[(i, dd)] - c[(i, i)]).abs() < 1e-9);
            }
        }
    }
}
