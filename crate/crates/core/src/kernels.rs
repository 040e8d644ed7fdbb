//! ARD kernels, Gram matrices and psi statistics.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QepError, Result};
use crate::optim::tape::{matern32_profile, Var};
use crate::qed::unit_covariance_draw;

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const DEFAULT_MC_DRAWS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SeArd,
    LinearArd,
    Matern32Ard,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::SeArd => "se_ard",
            KernelFamily::LinearArd => "linear_ard",
            KernelFamily::Matern32Ard => "matern32_ard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "se_ard" => Ok(KernelFamily::SeArd),
            "linear_ard" => Ok(KernelFamily::LinearArd),
            "matern32_ard" => Ok(KernelFamily::Matern32Ard),
            other => Err(invalid(format!("unknown kernel family `{other}`"))),
        }
    }

    /// Whether psi statistics have a closed form.
    pub fn has_closed_psi(self) -> bool {
        !matches!(self, KernelFamily::Matern32Ard)
    }
}

/// Kernel family with inverse magnitude `alpha` and ARD precisions `gamma`.
///
/// SE: `α⁻¹ exp(−½ Σ γⱼ (xⱼ − x′ⱼ)²)`. Matérn-3/2: `α⁻¹ (1 + √3 d) e^{−√3 d}`
/// with `d² = Σ γⱼ (xⱼ − x′ⱼ)²`. Linear: `Σ γⱼ xⱼ x′ⱼ` (α unused).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub alpha: f64,
    pub gamma: Vec<f64>,
    pub jitter: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, alpha: f64, gamma: Vec<f64>) -> Result<Self> {
        let s = Self { family, alpha, gamma, jitter: DEFAULT_JITTER };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid("kernel alpha must be positive"));
        }
        if self.gamma.is_empty() || self.gamma.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(invalid("kernel gamma must be a nonempty vector of nonnegative values"));
        }
        if !(self.jitter >= 0.0) {
            return Err(invalid("kernel jitter must be nonnegative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.gamma.len()
    }

    fn weighted_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        self.gamma.iter().zip(a.iter().zip(b)).map(|(g, (x, y))| g * (x - y) * (x - y)).sum()
    }

    /// Kernel value at a pair of points.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::SeArd => (-0.5 * self.weighted_sq(a, b)).exp() / self.alpha,
            KernelFamily::Matern32Ard => matern32_profile(self.weighted_sq(a, b)) / self.alpha,
            KernelFamily::LinearArd => self.gamma.iter().zip(a.iter().zip(b)).map(|(g, (x, y))| g * x * y).sum(),
        }
    }

    fn check_cols(&self, m: &DMatrix<f64>, what: &str) -> Result<()> {
        if m.ncols() != self.input_dim() {
            return Err(invalid(format!(
                "{what} has {} columns but the kernel has {} ARD weights",
                m.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// `K[n, m] = k(aₙ, b_m)`. When `a` and `b` are the same array the diagonal
/// gets `jitter · α⁻¹`.
pub fn gram(spec: &KernelSpec, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.check_cols(a, "first input")?;
    spec.check_cols(b, "second input")?;
    let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
    let mut k = DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| spec.eval(&ra[i], &rb[j]));
    if std::ptr::eq(a, b) {
        for i in 0..a.nrows() {
            k[(i, i)] += spec.jitter / spec.alpha;
        }
    }
    Ok(k)
}

/// Expected kernel matrices under `q(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiStats {
    /// `Σₙ ψ₀ⁿ`.
    pub psi0: f64,
    /// N × M.
    pub psi1: DMatrix<f64>,
    /// `Σₙ Ψ₂ⁿ`, M × M.
    pub psi2: DMatrix<f64>,
    pub per_point_psi2: Option<Vec<DMatrix<f64>>>,
}

fn check_psi_inputs(spec: &KernelSpec, mu: &DMatrix<f64>, s_diag: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    spec.check_cols(mu, "latent mean")?;
    spec.check_cols(z, "inducing inputs")?;
    if s_diag.shape() != mu.shape() {
        return Err(invalid("latent covariance diagonals must match the latent mean shape"));
    }
    if s_diag.iter().any(|s| !(*s >= 0.0)) {
        return Err(invalid("latent covariance diagonals must be nonnegative"));
    }
    Ok(())
}

/// Closed-form psi statistics for diagonal `Sₙ`.
///
/// SE uses the exponential-of-expected-quadratic approximation, under which
/// `Ψ₂ⁿ = Ψ₁ₙᵀ Ψ₁ₙ`. Linear is exact.
pub fn psi_stats_closed(spec: &KernelSpec, mu: &DMatrix<f64>, s_diag: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<PsiStats> {
    check_psi_inputs(spec, mu, s_diag, z)?;
    let (n, q) = mu.shape();
    let m = z.nrows();
    let g = &spec.gamma;
    let mut psi1 = DMatrix::zeros(n, m);
    let mut psi2 = DMatrix::zeros(m, m);
    let mut per_point = Vec::with_capacity(n);
    let mut psi0 = 0.0;
    match spec.family {
        KernelFamily::SeArd => {
            psi0 = n as f64 / spec.alpha;
            for i in 0..n {
                let tr_s: f64 = (0..q).map(|j| g[j] * s_diag[(i, j)]).sum();
                for k in 0..m {
                    let quad: f64 = (0..q).map(|j| g[j] * (mu[(i, j)] - z[(k, j)]).powi(2)).sum();
                    psi1[(i, k)] = (-0.5 * (quad + tr_s)).exp() / spec.alpha;
                }
                let p = DMatrix::from_fn(m, m, |a, b| psi1[(i, a)] * psi1[(i, b)]);
                psi2 += &p;
                per_point.push(p);
            }
        }
        KernelFamily::LinearArd => {
            for i in 0..n {
                psi0 += (0..q).map(|j| g[j] * (mu[(i, j)].powi(2) + s_diag[(i, j)])).sum::<f64>();
                for k in 0..m {
                    psi1[(i, k)] = (0..q).map(|j| g[j] * mu[(i, j)] * z[(k, j)]).sum();
                }
                let p = DMatrix::from_fn(m, m, |a, b| {
                    let mut v = psi1[(i, a)] * psi1[(i, b)];
                    for j in 0..q {
                        v += z[(a, j)] * g[j] * s_diag[(i, j)] * g[j] * z[(b, j)];
                    }
                    v
                });
                psi2 += &p;
                per_point.push(p);
            }
        }
        KernelFamily::Matern32Ard => {
            return Err(QepError::UnsupportedFamily(spec.family.name().into()));
        }
    }
    Ok(PsiStats { psi0, psi1, psi2, per_point_psi2: Some(per_point) })
}

/// Monte-Carlo psi statistics: `xₙ = µₙ + Sₙ^{½} e` with `e` a unit-covariance
/// q-ED draw, `draws` draws per point.
pub fn psi_stats_mc<R: Rng + ?Sized>(
    spec: &KernelSpec,
    mu: &DMatrix<f64>,
    s_diag: &DMatrix<f64>,
    z: &DMatrix<f64>,
    q: f64,
    draws: usize,
    rng: &mut R,
) -> Result<PsiStats> {
    check_psi_inputs(spec, mu, s_diag, z)?;
    if draws == 0 {
        return Err(invalid("psi_stats_mc needs at least one draw"));
    }
    let (n, dim) = mu.shape();
    let m = z.nrows();
    let rz: Vec<Vec<f64>> = (0..m).map(|k| row(z, k)).collect();
    let w = 1.0 / draws as f64;
    let mut psi0 = 0.0;
    let mut psi1 = DMatrix::zeros(n, m);
    let mut psi2 = DMatrix::zeros(m, m);
    let mut per_point = Vec::with_capacity(n);
    let mut kx = vec![0.0; m];
    for i in 0..n {
        let mut p = DMatrix::zeros(m, m);
        for _ in 0..draws {
            let e = unit_covariance_draw(dim, q, rng);
            let x: Vec<f64> = (0..dim).map(|j| mu[(i, j)] + s_diag[(i, j)].sqrt() * e[j]).collect();
            psi0 += w * spec.eval(&x, &x);
            for k in 0..m {
                kx[k] = spec.eval(&x, &rz[k]);
                psi1[(i, k)] += w * kx[k];
            }
            for a in 0..m {
                for b in 0..m {
                    p[(a, b)] += w * kx[a] * kx[b];
                }
            }
        }
        let p = crate::linalg::symmetrize(&p);
        psi2 += &p;
        per_point.push(p);
    }
    Ok(PsiStats { psi0, psi1, psi2, per_point_psi2: Some(per_point) })
}

/// Kernel hyperparameters on a tape.
#[derive(Clone, Copy)]
pub struct KernelVars<'t> {
    pub family: KernelFamily,
    /// `α⁻¹`, 1×1.
    pub alpha_inv: Var<'t>,
    /// `√γ`, 1×Q.
    pub sqrt_gamma: Var<'t>,
    pub jitter: f64,
}

impl<'t> KernelVars<'t> {
    /// From unconstrained `log α` (1×1) and `log γ` (1×Q).
    pub fn from_logs(family: KernelFamily, log_alpha: Var<'t>, log_gamma: Var<'t>, jitter: f64) -> Self {
        Self { family, alpha_inv: (-log_alpha).exp(), sqrt_gamma: log_gamma.scale(0.5).exp(), jitter }
    }

    /// Constant hyperparameters taken from a spec.
    pub fn constant(tape: &'t crate::optim::Tape, spec: &KernelSpec) -> Self {
        let q = spec.gamma.len();
        Self {
            family: spec.family,
            alpha_inv: tape.scalar(1.0 / spec.alpha),
            sqrt_gamma: tape.var(DMatrix::from_fn(1, q, |_, j| spec.gamma[j].sqrt())),
            jitter: spec.jitter,
        }
    }

    fn gamma(&self) -> Var<'t> {
        self.sqrt_gamma.hadamard(self.sqrt_gamma)
    }

    /// Gram matrix; `symmetric` adds the jitter diagonal.
    pub fn gram(&self, a: Var<'t>, b: Var<'t>, symmetric: bool) -> Var<'t> {
        let k = match self.family {
            KernelFamily::LinearArd => a.scale_cols(self.sqrt_gamma).matmul(b.scale_cols(self.sqrt_gamma).t()),
            KernelFamily::SeArd => {
                let d = a.scale_cols(self.sqrt_gamma).sq_dist(b.scale_cols(self.sqrt_gamma));
                d.scale(-0.5).exp().mul_scalar(self.alpha_inv)
            }
            KernelFamily::Matern32Ard => {
                let d = a.scale_cols(self.sqrt_gamma).sq_dist(b.scale_cols(self.sqrt_gamma));
                d.matern32().mul_scalar(self.alpha_inv)
            }
        };
        if symmetric && self.jitter > 0.0 {
            let n = a.nrows();
            let eye = a.tape().var(DMatrix::identity(n, n));
            k + eye.mul_scalar(self.alpha_inv).scale(self.jitter)
        } else {
            k
        }
    }

    /// Closed-form psi statistics `(ψ₀, Ψ₁, Ψ₂)`.
    pub fn psi_closed(&self, mu: Var<'t>, s_diag: Var<'t>, z: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let tape = mu.tape();
        let (n, _) = mu.shape();
        let m = z.nrows();
        match self.family {
            KernelFamily::SeArd => {
                let d = mu.scale_cols(self.sqrt_gamma).sq_dist(z.scale_cols(self.sqrt_gamma));
                let tr_s = s_diag.scale_cols(self.gamma()).row_sum();
                let spread = tr_s.matmul(tape.var(DMatrix::from_element(1, m, 1.0)));
                let psi1 = (d + spread).scale(-0.5).exp().mul_scalar(self.alpha_inv);
                let psi2 = psi1.t().matmul(psi1);
                Ok((self.alpha_inv.scale(n as f64), psi1, psi2))
            }
            KernelFamily::LinearArd => {
                let g = self.gamma();
                let psi1 = mu.scale_cols(g).matmul(z.t());
                let zg = z.scale_cols(g);
                let col_s = tape.var(DMatrix::from_element(1, n, 1.0)).matmul(s_diag);
                let psi2 = psi1.t().matmul(psi1) + zg.scale_cols(col_s).matmul(zg.t());
                let psi0 = (mu.hadamard(mu) + s_diag).scale_cols(g).sum();
                Ok((psi0, psi1, psi2))
            }
            KernelFamily::Matern32Ard => Err(QepError::UnsupportedFamily(self.family.name().into())),
        }
    }

    /// Monte-Carlo psi statistics from pre-drawn unit-covariance noise
    /// `noise` of shape `(N·draws) × Q`, rows grouped by data point.
    pub fn psi_mc(&self, mu: Var<'t>, s_diag: Var<'t>, z: Var<'t>, noise: &DMatrix<f64>, draws: usize) -> (Var<'t>, Var<'t>, Var<'t>) {
        let tape = mu.tape();
        let n = mu.nrows();
        assert_eq!(noise.shape(), (n * draws, mu.ncols()), "noise shape");
        let e = tape.var(noise.clone());
        let xs = mu.repeat_rows(draws) + s_diag.sqrt().repeat_rows(draws).hadamard(e);
        let ks = self.gram(xs, z, false);
        let psi1 = ks.block_mean_rows(draws);
        let psi2 = ks.t().matmul(ks).scale(1.0 / draws as f64);
        let psi0 = match self.family {
            KernelFamily::LinearArd => xs.hadamard(xs).scale_cols(self.gamma()).sum().scale(1.0 / draws as f64),
            _ => self.alpha_inv.scale(n as f64),
        };
        (psi0, psi1, psi2)
    }
}

/// `rows × dim` matrix of unit-covariance q-ED draws.
pub fn mc_noise<R: Rng + ?Sized>(rows: usize, dim: usize, q: f64, rng: &mut R) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, dim);
    for i in 0..rows {
        let e = unit_covariance_draw(dim, q, rng);
        out.row_mut(i).copy_from(&e.transpose());
    }
    out
}
