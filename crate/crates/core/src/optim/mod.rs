//! Differentiation, gradient validation and the Adam optimizer.

pub mod params;
pub mod tape;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use params::{Bound, Field, ParamVector, Transform};
pub use tape::{Tape, Var};

use crate::error::{invalid, QepError, Result};

/// Number of consecutive non-finite losses after which training stops.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// A scalar loss built on a tape. The random source feeds any Monte-Carlo
/// terms; callers that need a deterministic loss pass a freshly seeded one.
pub trait Objective {
    fn loss<'t>(&self, tape: &'t Tape, params: &Bound<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>>;
}

impl<F> Objective for F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>, &mut ChaCha8Rng) -> Result<Var<'t>>,
{
    fn loss<'t>(&self, tape: &'t Tape, params: &Bound<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        self(tape, params, rng)
    }
}

/// Pins a closure to the higher-ranked signature [`Objective`] needs.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>, &mut ChaCha8Rng) -> Result<Var<'t>>,
{
    f
}

/// Loss value only.
pub fn value<O: Objective + ?Sized>(obj: &O, at: &ParamVector, rng: &mut ChaCha8Rng) -> Result<f64> {
    let tape = Tape::new();
    let b = at.bind(&tape);
    Ok(obj.loss(&tape, &b, rng)?.scalar_value())
}

/// Loss value and its gradient with respect to the unconstrained vector.
pub fn gradient<O: Objective + ?Sized>(obj: &O, at: &ParamVector, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let b = at.bind(&tape);
    let out = obj.loss(&tape, &b, rng)?;
    let loss = out.scalar_value();
    let grads = tape.gradient(out);
    let mut g = Vec::with_capacity(at.len());
    for (leaf, f) in b.leaves().iter().zip(b.params().fields()) {
        let gm = grads.wrt(*leaf);
        if gm.iter().any(|x| !x.is_finite()) {
            return Err(QepError::GradientFailure { field: f.name.clone() });
        }
        g.extend_from_slice(gm.as_slice());
    }
    Ok((loss, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub entries: Vec<GradientEntry>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

impl GradientReport {
    pub fn worst(&self) -> Option<&GradientEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Entries whose relative error exceeds `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<&GradientEntry> {
        self.entries.iter().filter(|e| e.rel_error > tol).collect()
    }
}

/// `|a − f| / max(|a|, |f|, 1e-3)`; the floor keeps near-zero entries from
/// dominating.
pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-3)
}

/// Compares a supplied gradient with central differences of `f`.
pub fn compare_gradient(
    f: impl Fn(&ParamVector) -> Result<f64>,
    analytic: &[f64],
    at: &ParamVector,
    step: f64,
) -> Result<GradientReport> {
    if analytic.len() != at.len() {
        return Err(invalid("gradient length differs from parameter count"));
    }
    let mut entries = Vec::with_capacity(at.len());
    let mut work = at.clone();
    for i in 0..at.len() {
        let x = at.values[i];
        work.values[i] = x + step;
        let up = f(&work)?;
        work.values[i] = x - step;
        let down = f(&work)?;
        work.values[i] = x;
        let numeric = (up - down) / (2.0 * step);
        entries.push(GradientEntry {
            name: at.describe(i),
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    let mean_rel_error = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.rel_error).sum::<f64>() / entries.len() as f64
    };
    Ok(GradientReport { entries, max_rel_error, mean_rel_error })
}

/// Checks the tape gradient of `obj` against central differences. Every
/// evaluation reseeds the random source with `seed`, so Monte-Carlo terms
/// use common random numbers.
pub fn check_gradient<O: Objective + ?Sized>(obj: &O, at: &ParamVector, step: f64, seed: u64) -> Result<GradientReport> {
    let (_, g) = gradient(obj, at, &mut ChaCha8Rng::seed_from_u64(seed))?;
    compare_gradient(|p| value(obj, p, &mut ChaCha8Rng::seed_from_u64(seed)), &g, at, step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub gradient_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { step_size: 0.01, iterations: 1000, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0, gradient_clip: None }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(invalid("step_size must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(invalid("beta1 and beta2 must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("eps must be positive"));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0) {
                return Err(invalid("gradient_clip must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-iteration loss record. Non-finite iterations are recorded as NaN.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub losses: Vec<f64>,
    pub skipped: usize,
}

/// Adam on the unconstrained vector. Iteration `t` draws its Monte-Carlo
/// noise from a stream seeded by `config.seed`.
pub fn minimize<O: Objective + ?Sized>(obj: &O, init: ParamVector, config: &OptimConfig) -> Result<(ParamVector, Trace)> {
    config.validate()?;
    let mut p = init;
    let n = p.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Trace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut bad_run = 0;
    let mut t = 0i32;
    for _ in 0..config.iterations {
        let step = gradient(obj, &p, &mut rng);
        let (loss, mut g) = match step {
            Ok((l, g)) if l.is_finite() => (l, g),
            Ok(_) | Err(QepError::GradientFailure { .. }) | Err(QepError::NumericalFailure(_)) | Err(QepError::SingularDensity(_)) => {
                bad_run += 1;
                trace.skipped += 1;
                trace.losses.push(f64::NAN);
                if bad_run >= DIVERGENCE_PATIENCE {
                    return Err(QepError::TrainingDiverged(bad_run));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        bad_run = 0;
        trace.losses.push(loss);
        if let Some(c) = config.gradient_clip {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        t += 1;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for i in 0..n {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p.values[i] -= config.step_size * mh / (vh.sqrt() + config.eps);
        }
    }
    Ok((p, trace))
}
