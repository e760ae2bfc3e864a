//! IRLS weight functions: the statistical-inlier weight and the three
//! baselines (truncated L2, Lp-norm, Student-t with self-estimated scale).
//!
//! All weights are plain functions of a residual norm; baselines operate on
//! the residual-norm view regardless of the residual dimensionality.

/// Cost-function selection for registration, with per-kind parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightFunction {
    /// Statistical inlier weighting (the noise model comes from fitting).
    Sie,
    /// Reject matches with residual norm above the threshold (inclusive
    /// boundary: a residual exactly at the threshold is kept).
    TruncatedL2 { threshold: f64 },
    /// `max(‖r‖, δ)^(p−2)` for an artificially small exponent.
    Lp { p: f64, delta: f64 },
    /// Student-t weighting with self-estimated scale.
    TDist { nu: f64 },
}

/// Default degrees of freedom for the Student-t baseline.
pub const DEFAULT_NU: f64 = 5.0;
/// Default division guard for Lp-style weights.
pub const DEFAULT_DELTA: f64 = 1e-9;

/// 1 if `r_norm ≤ threshold`, else 0.
pub fn weight_truncated_l2(r_norm: f64, threshold: f64) -> f64 {
    debug_assert!(r_norm >= 0.0 && threshold > 0.0);
    if r_norm <= threshold {
        1.0
    } else {
        0.0
    }
}

/// `max(‖r‖, δ)^(p−2)` — the IRLS weight of an Lp cost.
pub fn weight_lp(r_norm: f64, p: f64, delta: f64) -> f64 {
    debug_assert!(r_norm >= 0.0 && p > 0.0 && delta > 0.0);
    r_norm.max(delta).powf(p - 2.0)
}

/// `(ν+1)/(ν + (‖r‖/σ)²)`.
pub fn weight_t_dist(r_norm: f64, sigma: f64, nu: f64) -> f64 {
    debug_assert!(sigma > 0.0 && nu > 0.0);
    let z = r_norm / sigma;
    (nu + 1.0) / (nu + z * z)
}

/// `σ^(−p)·max(‖r‖, δ)^(p−2)·P(I|r)`; at p = 2 this is exactly σ⁻²·P.
pub fn weight_sie(r_norm: f64, sigma: f64, p: f64, inlier_prob: f64, delta: f64) -> f64 {
    debug_assert!(sigma > 0.0 && (0.0..=1.0).contains(&inlier_prob));
    sigma.powf(-p) * r_norm.max(delta).powf(p - 2.0) * inlier_prob
}

/// Fixed-point estimate of the Student-t scale:
/// `σ² ← (1/n)·Σ rᵢ²·(ν+1)/(ν + rᵢ²/σ²)`, started from the RMS of the
/// residuals and iterated to a 1e-6 relative change (at most 100 rounds).
pub fn estimate_t_scale(residual_norms: &[f64], nu: f64) -> f64 {
    const MIN_SCALE: f64 = 1e-12;
    if residual_norms.is_empty() {
        return MIN_SCALE;
    }
    let n = residual_norms.len() as f64;
    let rms = (residual_norms.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
    if rms <= MIN_SCALE {
        return MIN_SCALE;
    }
    let mut sigma = rms;
    for _ in 0..100 {
        let sum: f64 = residual_norms
            .iter()
            .map(|r| {
                let rr = r * r;
                rr * (nu + 1.0) / (nu + rr / (sigma * sigma))
            })
            .sum();
        let next = (sum / n).sqrt().max(MIN_SCALE);
        let done = (next - sigma).abs() < 1e-6 * sigma;
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}
