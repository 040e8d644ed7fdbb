//! The multivariate q-exponential distribution q-ED(µ, C, q).
//!
//! Density: `p(u) = (q/2) (2π)^{-N/2} |C|^{-1/2} r^{(q/2-1)N/2} exp(-r^{q/2}/2)`
//! with `r = (u-µ)ᵀ C⁻¹ (u-µ)`. Draws follow the stochastic representation
//! `u = µ + R L S`, `R^q ~ χ²(N)`, `S` uniform on the unit sphere.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{invalid, QepError, Result};
use crate::linalg;
use crate::special::{chi2_entropy, ln_gamma};

/// Floor applied to quadratic forms inside every bound term.
pub const R_EPS: f64 = 1e-12;

/// Location, scale factor `L` (with `C = L Lᵀ`) and shape `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QedParams {
    mu: DVector<f64>,
    scale_chol: DMatrix<f64>,
    q: f64,
}

impl QedParams {
    /// Builds the law from a symmetric positive definite scale matrix.
    pub fn new(mu: DVector<f64>, scale: &DMatrix<f64>, q: f64) -> Result<Self> {
        if scale.nrows() != mu.len() || scale.ncols() != mu.len() {
            return Err(invalid(format!(
                "scale is {}x{} but location has length {}",
                scale.nrows(),
                scale.ncols(),
                mu.len()
            )));
        }
        let l = linalg::cholesky(scale)?;
        Self::from_chol(mu, l, q)
    }

    pub fn from_chol(mu: DVector<f64>, scale_chol: DMatrix<f64>, q: f64) -> Result<Self> {
        if !(q > 0.0) || !q.is_finite() {
            return Err(invalid(format!("shape q must be positive, got {q}")));
        }
        let n = mu.len();
        if n == 0 {
            return Err(invalid("empty location vector"));
        }
        if scale_chol.nrows() != n || scale_chol.ncols() != n {
            return Err(invalid("scale factor and location dimensions disagree"));
        }
        if mu.iter().chain(scale_chol.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        if scale_chol.diagonal().iter().any(|&d| d <= 0.0) {
            return Err(invalid("scale factor diagonal must be strictly positive"));
        }
        Ok(Self { mu, scale_chol: linalg::tril(&scale_chol), q })
    }

    pub fn standard(n: usize, q: f64) -> Result<Self> {
        Self::from_chol(DVector::zeros(n), DMatrix::identity(n, n), q)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn scale_chol(&self) -> &DMatrix<f64> {
        &self.scale_chol
    }

    pub fn scale(&self) -> DMatrix<f64> {
        &self.scale_chol * self.scale_chol.transpose()
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// `(u-µ)ᵀ C⁻¹ (u-µ)` through one triangular solve.
    pub fn quad_form(&self, u: &DVector<f64>) -> f64 {
        let z = self
            .scale_chol
            .solve_lower_triangular(&(u - &self.mu))
            .expect("positive diagonal");
        z.norm_squared()
    }

    pub fn log_det_scale(&self) -> f64 {
        linalg::chol_logdet(&self.scale_chol)
    }

    /// Covariance matrix `covariance_scaling(N, q) · C`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.scale() * covariance_scaling(self.dim(), self.q)
    }
}

/// Log-density of the q-ED at `u`.
pub fn log_density(u: &DVector<f64>, params: &QedParams) -> Result<f64> {
    let n = params.dim();
    if u.len() != n {
        return Err(invalid(format!("point has length {} but law has dimension {n}", u.len())));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite point"));
    }
    let q = params.q;
    let nf = n as f64;
    let r = params.quad_form(u);
    let log_r_coef = (0.5 * q - 1.0) * 0.5 * nf;
    let base = (0.5 * q).ln() - 0.5 * nf * (2.0 * std::f64::consts::PI).ln() - 0.5 * params.log_det_scale();
    if r == 0.0 {
        if q < 2.0 {
            return Err(QepError::SingularDensity("r = 0 at the mode with q < 2".into()));
        }
        if q > 2.0 {
            return Ok(f64::NEG_INFINITY);
        }
        return Ok(base);
    }
    let log_r_term = if log_r_coef == 0.0 { 0.0 } else { log_r_coef * r.ln() };
    Ok(base + log_r_term - 0.5 * r.powf(0.5 * q))
}

/// Radius `R` (with `R^q ~ χ²(N)`) and a uniform direction on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialSample {
    pub radius: f64,
    pub direction: DVector<f64>,
}

impl RadialSample {
    pub fn draw<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Self {
        let direction = loop {
            let z = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
            let norm = z.norm();
            if norm > 0.0 {
                break z / norm;
            }
        };
        let chi2 = ChiSquared::new(n as f64).expect("n >= 1");
        let radius = chi2.sample(rng).powf(1.0 / q);
        Self { radius, direction }
    }

    /// `R · S`, a draw from the standard q-ED_N(0, I).
    pub fn point(&self) -> DVector<f64> {
        &self.direction * self.radius
    }
}

/// `count` i.i.d. draws as rows of a `count × N` matrix.
pub fn sample<R: Rng + ?Sized>(params: &QedParams, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let n = params.dim();
    let mut out = DMatrix::zeros(count, n);
    for i in 0..count {
        let s = RadialSample::draw(n, params.q, rng);
        let u = &params.mu + &params.scale_chol * s.point();
        out.row_mut(i).copy_from(&u.transpose());
    }
    Ok(out)
}

/// Draw from the standard q-ED_N rescaled to unit covariance.
///
/// Variational families in the bounds are parameterized by their second
/// moments, so reparameterized draws use this normalization.
pub fn unit_covariance_draw<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> DVector<f64> {
    RadialSample::draw(n, q, rng).point() / covariance_scaling(n, q).sqrt()
}

/// `Cov(u) / C = 2^{2/q} Γ(N/2 + 2/q) / (N Γ(N/2))`.
pub fn covariance_scaling(n: usize, q: f64) -> f64 {
    assert!(n >= 1 && q > 0.0, "covariance_scaling needs n >= 1 and q > 0");
    let h = 0.5 * n as f64;
    let log = (2.0 / q) * std::f64::consts::LN_2 + ln_gamma(h + 2.0 / q) - (n as f64).ln() - ln_gamma(h);
    log.exp()
}

/// Conditions a joint law on `observed_idx = observed_vals`.
///
/// Returns the law of the remaining coordinates (in increasing index order):
/// `µ* = µ₂ + C₂₁C₁₁⁻¹(y − µ₁)`, `C* = C₂₂ − C₂₁C₁₁⁻¹C₁₂`, same `q`.
pub fn condition(joint: &QedParams, observed_idx: &[usize], observed_vals: &DVector<f64>) -> Result<QedParams> {
    let n = joint.dim();
    if observed_idx.is_empty() || observed_idx.len() >= n {
        return Err(invalid("observed index set must be a strict nonempty subset"));
    }
    if observed_vals.len() != observed_idx.len() {
        return Err(invalid("observed values and indices differ in length"));
    }
    let mut seen = vec![false; n];
    for &i in observed_idx {
        if i >= n || seen[i] {
            return Err(invalid(format!("bad or repeated observed index {i}")));
        }
        seen[i] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
    let c = joint.scale();
    let c11 = c.select_rows(observed_idx).select_columns(observed_idx);
    let c21 = c.select_rows(&free).select_columns(observed_idx);
    let c22 = c.select_rows(&free).select_columns(&free);
    let l11 = linalg::cholesky(&c11)?;
    let mu1 = joint.mu.select_rows(observed_idx);
    let mu2 = joint.mu.select_rows(&free);
    let w = linalg::solve_lower(&l11, &c21.transpose()); // L₁₁⁻¹ C₁₂
    let resid = linalg::solve_lower(&l11, &DMatrix::from_column_slice(mu1.len(), 1, (observed_vals - mu1).as_slice()));
    let mu_star = mu2 + (w.transpose() * resid).column(0);
    let c_star = linalg::symmetrize(&(c22 - w.transpose() * &w));
    QedParams::new(mu_star, &c_star, joint.q)
}

/// Arguments of the shared bound function φ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiArgs {
    /// Quadratic-form value.
    pub r: f64,
    /// `log |Σ|` of the row covariance.
    pub log_det_sigma: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub q: f64,
}

/// `φ(r; Σ, D) = −(D/2) log|Σ| + (ND/2)(q/2 − 1) log r − r^{q/2}/2`.
pub fn phi(args: PhiArgs) -> Result<f64> {
    if !(args.r > 0.0) {
        return Err(invalid(format!("phi needs r > 0, got {}", args.r)));
    }
    let nd = (args.n_rows * args.n_cols) as f64;
    let d = args.n_cols as f64;
    Ok(-0.5 * d * args.log_det_sigma + 0.5 * nd * (0.5 * args.q - 1.0) * args.r.ln() - 0.5 * args.r.powf(0.5 * args.q))
}

/// `dφ/dr = (ND/2)(q/2 − 1)/r − (q/4) r^{q/2 − 1}`.
pub fn phi_dr(args: PhiArgs) -> f64 {
    let nd = (args.n_rows * args.n_cols) as f64;
    0.5 * nd * (0.5 * args.q - 1.0) / args.r - 0.25 * args.q * args.r.powf(0.5 * args.q - 1.0)
}

/// The q-dependent constant of the block-diagonal q-ED entropy, i.e.
/// everything except `½ Σ log|Sₙ|`.
pub fn entropy_constant(n: usize, d: usize, q: f64) -> f64 {
    let k = (n * d) as f64;
    let mid = if q == 2.0 { 0.0 } else { 0.5 * k * (1.0 - 2.0 / q) * chi2_entropy(k) };
    mid + 0.5 * k
}

/// Entropy of a block-diagonal q-ED over `n` blocks of size `d`:
/// `½ Σ log|Sₙ| + (nd/2)(1 − 2/q) H(χ²(nd)) + nd/2`.
pub fn entropy_lower(block_log_dets: &[f64], n: usize, d: usize, q: f64) -> f64 {
    assert!(n * d >= 1, "entropy_lower needs n·d >= 1");
    0.5 * block_log_dets.iter().sum::<f64>() + entropy_constant(n, d, q)
}
