//! Log-gamma and digamma.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Differential entropy of the χ²(k) law:
/// `k/2 + log(2Γ(k/2)) + (1 − k/2) ψ(k/2)`.
pub fn chi2_entropy(k: f64) -> f64 {
    let h = 0.5 * k;
    h + std::f64::consts::LN_2 + ln_gamma(h) + (1.0 - h) * digamma(h)
}
