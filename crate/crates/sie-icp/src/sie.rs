//! Statistical inlier estimation.
//!
//! The inlier noise model is a generalized Gaussian fitted to a residual
//! histogram under a soft stay-below-the-histogram constraint. The ratio of
//! the fitted curve to the histogram gives a per-dimension inlier
//! probability; per-dimension probabilities combine into a joint row
//! probability through the inlier prior. A regularizer β widens the
//! predicted curve while the transform is still uncertain and is halved each
//! time the outer estimation converges.
//!
//! Two exponent conventions coexist: the Gaussian form carries a 0.5 in the
//! exponent (`exp(−0.5(x/σ)²)`, σ is the standard deviation) while the
//! general form does not (`exp(−(|x|/σ)^p)`). Scales convert as
//! `σ_general = √2·σ_gaussian` at p = 2. By default the 0.5 coefficient is
//! used exactly when p = 2.

use crate::error::{Error, Result};
use crate::geometry::ResidualMatrix;
pub use crate::geometry::normalize_residuals;
use crate::histogram::{adaptive_range, Histogram, HistogramConfig};
use statrs::function::gamma::gamma;
use std::io::Write;

/// Smallest positive scale assigned to degenerate (constant) data.
pub const MIN_SCALE: f64 = 1e-12;
/// Clamp bounds for the adaptive penalty weight.
pub const K_MIN: f64 = 1.0;
pub const K_MAX: f64 = 10.0;
/// Clamp bounds for the inlier prior, keeping γ finite.
const PRIOR_MIN: f64 = 1e-4;
const PRIOR_MAX: f64 = 1.0 - 1e-4;

const BISECTION_MAX_ITERS: usize = 60;
const BISECTION_REL_TOL: f64 = 1e-4;

/// Candidate exponents scanned when estimating p; 2 is listed first so ties
/// resolve toward the Gaussian.
pub const EXPONENT_GRID: [f64; 8] = [2.0, 0.5, 0.75, 1.0, 1.25, 1.5, 2.5, 3.0];

fn exponent_coeff(p: f64, gaussian_convention: bool) -> f64 {
    if gaussian_convention && (p - 2.0).abs() < 1e-12 {
        0.5
    } else {
        1.0
    }
}

/// Generalized Gaussian density `p/(2σΓ(1/p))·exp(−(|x−μ|/σ)^p)`.
pub fn ggd_density(x: f64, mu: f64, sigma: f64, p: f64) -> f64 {
    debug_assert!(sigma > 0.0 && p > 0.0);
    let norm = p / (2.0 * sigma * gamma(1.0 / p));
    norm * (-((x - mu).abs() / sigma).powf(p)).exp()
}

/// One fitted inlier noise model: peak height α, location μ, scale σ,
/// exponent p, regularizer β and penalty weight k.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub alpha: f64,
    pub mu: f64,
    pub sigma: f64,
    pub p: f64,
    pub beta: f64,
    pub k: f64,
    /// Use the 0.5 exponent coefficient at p = 2.
    pub gaussian_convention: bool,
}

impl NoiseModel {
    pub fn exponent_coeff(&self) -> f64 {
        exponent_coeff(self.p, self.gaussian_convention)
    }

    /// σ + β, the scale the prediction curve actually uses.
    pub fn effective_sigma(&self) -> f64 {
        self.sigma + self.beta
    }

    /// Regularized curve `α·exp(−c·(|x−μ|/(σ+β))^p)`.
    pub fn curve(&self, x: f64) -> f64 {
        self.curve_with_sigma(x, self.effective_sigma())
    }

    /// Same curve shape with an explicit scale and no regularizer; this is
    /// what the σ fit evaluates.
    pub fn curve_with_sigma(&self, x: f64, sigma: f64) -> f64 {
        let c = self.exponent_coeff();
        self.alpha * (-c * ((x - self.mu).abs() / sigma).powf(self.p)).exp()
    }

    /// Range over which the regularized curve exceeds `epsilon` of its peak.
    pub fn range(&self, epsilon: f64) -> (f64, f64) {
        adaptive_range(self.mu, self.effective_sigma(), self.p, self.exponent_coeff(), epsilon)
    }
}

/// Maximum-likelihood initialization assuming every value is an inlier.
///
/// μ is the sample mean and σ the MLE scale for exponent `p` (the sample
/// standard deviation at p = 2, the mean absolute deviation at p = 1). α is
/// set to the peak density so the model is usable before any histogram
/// exists; fitting replaces it with the histogram peak.
pub fn init_model(column: &[f64], p: f64) -> Result<NoiseModel> {
    init_model_with(column, p, true)
}

pub(crate) fn init_model_with(
    column: &[f64],
    p: f64,
    gaussian_convention: bool,
) -> Result<NoiseModel> {
    if column.len() < 2 {
        return Err(Error::TooFewValues { got: column.len(), need: 2 });
    }
    let n = column.len() as f64;
    let mu = column.iter().sum::<f64>() / n;
    let c = exponent_coeff(p, gaussian_convention);
    let moment = column.iter().map(|x| (x - mu).abs().powf(p)).sum::<f64>() / n;
    let sigma = (p * c * moment).powf(1.0 / p).max(MIN_SCALE);
    let alpha = p * c.powf(1.0 / p) / (2.0 * sigma * gamma(1.0 / p));
    Ok(NoiseModel { alpha, mu, sigma, p, beta: 0.0, k: K_MAX, gaussian_convention })
}

/// Eq.-5-style fit score: histogram-minus-curve summed over bins, with
/// overshoot (curve above histogram) charged `k` times.
pub fn fit_objective(
    h: &Histogram,
    alpha: f64,
    mu: f64,
    sigma: f64,
    p: f64,
    k: f64,
    gaussian_convention: bool,
) -> f64 {
    let c = exponent_coeff(p, gaussian_convention);
    let mut total = 0.0;
    for (i, &count) in h.counts().iter().enumerate() {
        let x = h.bin_center(i);
        let g = alpha * (-c * ((x - mu).abs() / sigma).powf(p)).exp();
        let d = count - g;
        total += if d <= 0.0 { -k * d } else { d };
    }
    total
}

/// Fits σ by bisection over `[bin width, histogram width]`, minimizing the
/// soft-constrained score (undershoot costs 1, overshoot costs `k`).
pub fn fit_sigma(h: &Histogram, alpha: f64, mu: f64, p: f64, k: f64) -> Result<f64> {
    fit_sigma_with(h, alpha, mu, p, k, true)
}

pub(crate) fn fit_sigma_with(
    h: &Histogram,
    alpha: f64,
    mu: f64,
    p: f64,
    k: f64,
    gaussian_convention: bool,
) -> Result<f64> {
    if h.in_range_mass() <= 0.0 {
        return Err(Error::EmptyHistogram { lo: h.lo(), hi: h.hi() });
    }
    if !(alpha > 0.0 && p > 0.0 && k >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid fit parameters alpha={alpha} p={p} k={k}"
        )));
    }

    let score = |sigma: f64| fit_objective(h, alpha, mu, sigma, p, k, gaussian_convention);

    // Sampling noise puts shallow local kinks in the score, so bracket the
    // global minimum with a coarse geometric scan before bisecting.
    let full_lo = h.bin_width();
    let full_hi = h.width();
    const GRID: usize = 48;
    let ratio = (full_hi / full_lo).powf(1.0 / (GRID - 1) as f64);
    let mut best_idx = 0;
    let mut best_score = f64::INFINITY;
    for i in 0..GRID {
        let sigma = full_lo * ratio.powi(i as i32);
        let s = score(sigma);
        if s < best_score {
            best_score = s;
            best_idx = i;
        }
    }
    let mut lo = full_lo * ratio.powi(best_idx.saturating_sub(1) as i32);
    let mut hi = (full_lo * ratio.powi((best_idx + 1) as i32)).min(full_hi);

    let slope = |sigma: f64| score(sigma * 1.0001) - score(sigma);
    if slope(lo) >= 0.0 {
        return Ok(lo);
    }
    if slope(hi) <= 0.0 {
        return Ok(hi);
    }
    for _ in 0..BISECTION_MAX_ITERS {
        if hi - lo <= BISECTION_REL_TOL * lo {
            break;
        }
        let mid = (lo * hi).sqrt();
        if slope(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

/// Peak location and height of a (smoothed) histogram: the center and value
/// of the first maximal bin.
pub fn estimate_mu_alpha(h: &Histogram) -> (f64, f64) {
    let mut best = 0;
    for (i, &c) in h.counts().iter().enumerate() {
        if c > h.counts()[best] {
            best = i;
        }
    }
    (h.bin_center(best), h.counts()[best])
}

/// Inlier prior: mass under the capped curves `min(𝒢ⱼ, Hⱼ)` over total
/// histogram mass including the out-of-range tally, clamped so the odds
/// ratio γ stays finite.
///
/// The cap keeps the prior at most 1 even where sampling noise pushes the
/// fitted curve above the histogram.
pub fn inlier_prior(models: &[NoiseModel], histograms: &[Histogram]) -> f64 {
    debug_assert_eq!(models.len(), histograms.len());
    let mut explained = 0.0;
    let mut total = 0.0;
    for (model, h) in models.iter().zip(histograms) {
        for (i, &count) in h.counts().iter().enumerate() {
            explained += model.curve(h.bin_center(i)).min(count);
        }
        total += h.total_mass();
    }
    if total <= 0.0 {
        return PRIOR_MIN;
    }
    (explained / total).clamp(PRIOR_MIN, PRIOR_MAX)
}

/// Per-dimension inlier probability `min(cap, 𝒢(x)/H(x))`.
///
/// Outside the histogram range the curve has decayed below the range cutoff
/// and the probability is 0. Inside the range an empty bin under positive
/// curve mass reads as the cap.
pub fn inlier_prob_dim(x: f64, model: &NoiseModel, h: &Histogram, prob_cap: f64) -> f64 {
    if h.bin_of(x).is_none() {
        return 0.0;
    }
    let g = model.curve(x);
    if g <= 0.0 {
        return 0.0;
    }
    let hv = h.value_at(x);
    if hv <= 0.0 {
        return prob_cap;
    }
    (g / hv).min(prob_cap)
}

/// Joint row probability `Πpⱼ / (Πpⱼ + γ·Π(1−pⱼ))` for an m-dimensional
/// residual, where `γ = (P(I)/P(O))^(m−1)`.
pub fn combine_row(per_dim_probs: &[f64], gamma: f64) -> f64 {
    let p_in: f64 = per_dim_probs.iter().product();
    let p_out: f64 = per_dim_probs.iter().map(|p| 1.0 - p).product();
    let denom = p_in + gamma * p_out;
    if denom <= 0.0 {
        return 0.0;
    }
    p_in / denom
}

/// `clamp(avg⁻³, 1, 10)` — the penalty heuristic on the average in-range
/// inlier probability.
pub fn adapt_k_from_average(average_prob: f64) -> f64 {
    if average_prob <= 0.0 {
        return K_MAX;
    }
    average_prob.powi(-3).clamp(K_MIN, K_MAX)
}

/// Adapts the penalty weight to the data: the count-weighted average inlier
/// probability over in-range residuals, raised to −3 and clamped to [1, 10].
pub fn adapt_k(models: &[NoiseModel], histograms: &[Histogram], prob_cap: f64) -> f64 {
    let mut weighted = 0.0;
    let mut mass = 0.0;
    for (model, h) in models.iter().zip(histograms) {
        for (i, &count) in h.counts().iter().enumerate() {
            if count <= 0.0 {
                continue;
            }
            weighted += count * inlier_prob_dim(h.bin_center(i), model, h, prob_cap);
            mass += count;
        }
    }
    if mass <= 0.0 {
        return K_MAX;
    }
    adapt_k_from_average(weighted / mass)
}

/// 50% decay step of the regularizer.
pub fn update_beta(beta: f64) -> f64 {
    0.5 * beta
}

/// Initial regularizer: per-column sample standard deviation of the
/// residuals, reflecting how uncertain the transform still is.
pub fn init_beta(residuals: &ResidualMatrix) -> Vec<f64> {
    let values = residuals.values();
    let n = values.nrows();
    (0..values.ncols())
        .map(|j| {
            if n < 2 {
                return 0.0;
            }
            let col = values.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            let var =
                col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            var.sqrt()
        })
        .collect()
}

/// How the GGD exponent is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExponentSpec {
    Fixed(f64),
    /// Grid-search the exponent from the data at each fit.
    Estimate,
}

/// Fitting configuration; the defaults reproduce the standard pipeline
/// (Gaussian exponent, 0.99 cap, k = 10 until convergence).
#[derive(Debug, Clone, PartialEq)]
pub struct SieConfig {
    pub exponent: ExponentSpec,
    pub prob_cap: f64,
    pub histogram: HistogramConfig,
    /// Penalty weight used until the adaptive heuristic is enabled.
    pub initial_k: f64,
    /// Prior-knowledge override for β; when `None` the initial residual
    /// spread is used.
    pub initial_beta: Option<f64>,
    /// Whether the β schedule participates at all (registration turns this
    /// on; one-shot fits predict unregularized).
    pub use_beta: bool,
    /// Fit rounds per call: range → build → smooth → peak → σ, iterated
    /// until σ̂ stabilizes.
    pub max_fit_rounds: usize,
    /// Relative σ̂ change below which rounds stop.
    pub fit_round_tolerance: f64,
    /// Fit one model to all columns pooled together.
    pub pool_dimensions: bool,
    /// Fit on |residuals| with μ pinned to 0.
    pub fold_absolute: bool,
    /// Use the 0.5 exponent coefficient at p = 2.
    pub gaussian_convention: bool,
    /// Division guard in IRLS weights.
    pub delta: f64,
    /// Diagnostics: force every row probability to this constant.
    pub pin_prob: Option<f64>,
}

impl Default for SieConfig {
    fn default() -> Self {
        Self {
            exponent: ExponentSpec::Fixed(2.0),
            prob_cap: 0.99,
            histogram: HistogramConfig::default(),
            initial_k: K_MAX,
            initial_beta: None,
            use_beta: false,
            max_fit_rounds: 12,
            fit_round_tolerance: 0.01,
            pool_dimensions: false,
            fold_absolute: false,
            gaussian_convention: true,
            delta: 1e-9,
            pin_prob: None,
        }
    }
}

/// The fitted per-dimension models plus everything needed for prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierModel {
    per_dim: Vec<NoiseModel>,
    histograms: Vec<Histogram>,
    inlier_prior: f64,
    gamma: f64,
    prob_cap: f64,
    folded: bool,
    pin_prob: Option<f64>,
}

impl InlierModel {
    pub fn dims(&self) -> usize {
        self.per_dim.len()
    }

    pub fn models(&self) -> &[NoiseModel] {
        &self.per_dim
    }

    pub fn histograms(&self) -> &[Histogram] {
        &self.histograms
    }

    pub fn inlier_prior(&self) -> f64 {
        self.inlier_prior
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn prob_cap(&self) -> f64 {
        self.prob_cap
    }

    pub fn mean_sigma(&self) -> f64 {
        self.per_dim.iter().map(|m| m.sigma).sum::<f64>() / self.per_dim.len() as f64
    }

    pub fn mean_beta(&self) -> f64 {
        self.per_dim.iter().map(|m| m.beta).sum::<f64>() / self.per_dim.len() as f64
    }

    /// Joint inlier probability of one residual row.
    pub fn row_probability(&self, row: &[f64]) -> f64 {
        if let Some(pinned) = self.pin_prob {
            return pinned;
        }
        debug_assert_eq!(row.len(), self.per_dim.len());
        let probs: Vec<f64> = row
            .iter()
            .zip(self.per_dim.iter().zip(&self.histograms))
            .map(|(&x, (model, h))| {
                let x = if self.folded { x.abs() } else { x };
                inlier_prob_dim(x, model, h, self.prob_cap)
            })
            .collect();
        combine_row(&probs, self.gamma)
    }

    /// Human-readable key = value dump of the fitted parameters.
    pub fn write_text<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        use crate::fmt::sig9;
        writeln!(w, "dims = {}", self.per_dim.len())?;
        writeln!(w, "inlier_prior = {}", sig9(self.inlier_prior))?;
        writeln!(w, "gamma = {}", sig9(self.gamma))?;
        writeln!(w, "prob_cap = {}", sig9(self.prob_cap))?;
        for (j, m) in self.per_dim.iter().enumerate() {
            writeln!(w, "dim{j}.alpha = {}", sig9(m.alpha))?;
            writeln!(w, "dim{j}.mu = {}", sig9(m.mu))?;
            writeln!(w, "dim{j}.sigma = {}", sig9(m.sigma))?;
            writeln!(w, "dim{j}.p = {}", sig9(m.p))?;
            writeln!(w, "dim{j}.beta = {}", sig9(m.beta))?;
            writeln!(w, "dim{j}.k = {}", sig9(m.k))?;
        }
        Ok(())
    }

    /// Per-bin histogram counts, fitted curve and inlier probability, one
    /// CSV row per bin — the data behind the usual noise-estimate and
    /// probability-of-inliers plots.
    pub fn write_curves_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        use crate::fmt::sig9;
        writeln!(w, "dim,x,histogram,noise_estimate,inlier_prob")?;
        for (j, (model, h)) in self.per_dim.iter().zip(&self.histograms).enumerate() {
            for i in 0..h.n_bins() {
                let x = h.bin_center(i);
                writeln!(
                    w,
                    "{j},{},{},{},{}",
                    sig9(x),
                    sig9(h.counts()[i]),
                    sig9(model.curve(x)),
                    sig9(inlier_prob_dim(x, model, h, self.prob_cap)),
                )?;
            }
        }
        Ok(())
    }
}

/// Estimates the GGD exponent by scanning a fixed grid: each candidate is
/// fitted on a shared histogram and scored with the soft-constrained
/// objective; ties resolve toward p = 2.
pub fn estimate_p(column: &[f64], config: &SieConfig) -> Result<f64> {
    if column.len() < 100 {
        return Err(Error::TooFewValues { got: column.len(), need: 100 });
    }
    let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < MIN_SCALE {
        return Err(Error::DegenerateColumn);
    }

    let init = init_model_with(column, 2.0, config.gaussian_convention)?;
    let range = init.range(config.histogram.epsilon);
    let h = Histogram::build(column, range, &config.histogram)?.smoothed(&config.histogram);
    let (mu, alpha) = estimate_mu_alpha(&h);
    let k = config.initial_k;

    let mut best_p = EXPONENT_GRID[0];
    let mut best_score = f64::INFINITY;
    for &p in &EXPONENT_GRID {
        let sigma = fit_sigma_with(&h, alpha, mu, p, k, config.gaussian_convention)?;
        let score = fit_objective(&h, alpha, mu, sigma, p, k, config.gaussian_convention);
        if score < best_score {
            best_score = score;
            best_p = p;
        }
    }
    Ok(best_p)
}

/// Stateful fitter carrying histogram ranges, the β schedule and the
/// penalty weight between calls, the way an outer estimation loop uses it.
#[derive(Debug, Clone)]
pub struct SieFitter {
    config: SieConfig,
    k: f64,
    betas: Option<Vec<f64>>,
    carry: Option<Vec<NoiseModel>>,
    adaptive_k: bool,
}

impl SieFitter {
    pub fn new(config: SieConfig) -> Self {
        let k = config.initial_k;
        Self { config, k, betas: None, carry: None, adaptive_k: false }
    }

    pub fn config(&self) -> &SieConfig {
        &self.config
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn betas(&self) -> Option<&[f64]> {
        self.betas.as_deref()
    }

    /// Switches from the fixed penalty to the data-adaptive heuristic;
    /// takes effect at the next fit.
    pub fn enable_adaptive_k(&mut self) {
        self.adaptive_k = true;
    }

    /// Halves every per-column regularizer.
    pub fn halve_betas(&mut self) {
        if let Some(betas) = &mut self.betas {
            for b in betas.iter_mut() {
                *b = update_beta(*b);
            }
        }
    }

    /// True once every β has decayed below `ratio` of its column's σ̂.
    pub fn beta_converged(&self, ratio: f64) -> bool {
        match (&self.betas, &self.carry) {
            (Some(betas), Some(models)) => betas
                .iter()
                .zip(models)
                .all(|(b, m)| *b < ratio * m.sigma),
            (None, _) => true,
            _ => false,
        }
    }

    /// Fits per-column noise models to a residual matrix.
    ///
    /// Residuals are normalized first if they carry non-unit scales. Each
    /// call runs up to `max_fit_rounds` rounds of
    /// range → build → smooth → peak → σ per column, carrying ranges from
    /// the previous call, then derives the inlier prior, γ and (when the
    /// adaptive heuristic is on) the next penalty weight.
    pub fn fit(&mut self, residuals: &ResidualMatrix) -> Result<InlierModel> {
        let normalized;
        let residuals = if residuals.scale().iter().all(|&s| s == 1.0) {
            residuals
        } else {
            normalized = residuals.normalized();
            &normalized
        };

        let m = residuals.n_dims();
        if residuals.n_rows() == 0 {
            return Err(Error::EmptyMatches);
        }
        let folded = residuals.mode().is_folded() || self.config.fold_absolute;

        // Column layout: pooled fits share one flattened column.
        let columns: Vec<Vec<f64>> = if self.config.pool_dimensions {
            let mut flat = Vec::with_capacity(residuals.n_rows() * m);
            for j in 0..m {
                flat.extend(residuals.column(j));
            }
            vec![fold_values(&flat, folded)]
        } else {
            (0..m).map(|j| fold_values(&residuals.column(j), folded)).collect()
        };
        let n_fits = columns.len();

        if self.config.use_beta && self.betas.is_none() {
            self.betas = Some(match self.config.initial_beta {
                Some(b) => vec![b; n_fits],
                None => {
                    let per_col = init_beta(residuals);
                    if self.config.pool_dimensions {
                        vec![per_col.iter().sum::<f64>() / per_col.len() as f64]
                    } else {
                        per_col
                    }
                }
            });
        }
        let betas: Vec<f64> = match &self.betas {
            Some(b) => b.clone(),
            None => vec![0.0; n_fits],
        };

        let exponents: Vec<f64> = match self.config.exponent {
            ExponentSpec::Fixed(p) => vec![p; n_fits],
            ExponentSpec::Estimate => columns
                .iter()
                .map(|col| estimate_p(col, &self.config))
                .collect::<Result<_>>()?,
        };

        let mut models: Vec<NoiseModel> = Vec::with_capacity(n_fits);
        let mut hists: Vec<Histogram> = Vec::with_capacity(n_fits);
        for (idx, column) in columns.iter().enumerate() {
            let carry = self
                .carry
                .as_ref()
                .and_then(|c| c.get(idx))
                .filter(|m| (m.p - exponents[idx]).abs() < 1e-12)
                .cloned();
            let (model, hist) =
                self.fit_column(column, exponents[idx], betas[idx], carry, folded)?;
            models.push(model);
            hists.push(hist);
        }

        let prior = inlier_prior(&models, &hists);
        let gamma = (prior / (1.0 - prior)).powi(m as i32 - 1);
        if self.adaptive_k {
            self.k = adapt_k(&models, &hists, self.config.prob_cap);
        }
        self.carry = Some(models.clone());

        // Pooled fits replicate the shared model across dimensions.
        let (per_dim, histograms) = if self.config.pool_dimensions && m > 1 {
            (vec![models[0].clone(); m], vec![hists[0].clone(); m])
        } else {
            (models, hists)
        };

        Ok(InlierModel {
            per_dim,
            histograms,
            inlier_prior: prior,
            gamma,
            prob_cap: self.config.prob_cap,
            folded,
            pin_prob: self.config.pin_prob,
        })
    }

    fn fit_column(
        &self,
        column: &[f64],
        p: f64,
        beta: f64,
        carry: Option<NoiseModel>,
        folded: bool,
    ) -> Result<(NoiseModel, Histogram)> {
        let cfg = &self.config;
        let mut model = match carry {
            Some(mut m) => {
                m.beta = beta;
                m
            }
            None => {
                let mut m = init_model_with(column, p, cfg.gaussian_convention)?;
                m.beta = beta;
                m
            }
        };

        let mut hist = None;
        for _ in 0..cfg.max_fit_rounds.max(1) {
            let (mut lo, hi) = model.range(cfg.histogram.epsilon);
            if folded {
                lo = lo.max(0.0);
                if hi <= lo {
                    lo = 0.0;
                }
            }
            let h = match Histogram::build(column, (lo, hi), &cfg.histogram) {
                Ok(h) => h,
                // A stale carried range can miss the data entirely; restart
                // from the all-inlier initialization.
                Err(Error::EmptyHistogram { .. }) => {
                    let mut fresh = init_model_with(column, p, cfg.gaussian_convention)?;
                    fresh.beta = beta;
                    model = fresh;
                    let (mut lo, hi) = model.range(cfg.histogram.epsilon);
                    if folded {
                        lo = lo.max(0.0);
                    }
                    Histogram::build(column, (lo, hi), &cfg.histogram)?
                }
                Err(e) => return Err(e),
            };
            let h = h.smoothed(&cfg.histogram);

            let (mu, alpha) = if folded {
                let a = h.value_at(0.0).max(h.counts()[0]);
                (0.0, a.max(f64::MIN_POSITIVE))
            } else {
                estimate_mu_alpha(&h)
            };
            let previous_sigma = model.sigma;
            // One noisy round must not collapse or explode the working range;
            // σ̂ moves at most a factor of two per round, like the β decay.
            let sigma = fit_sigma_with(&h, alpha, mu, p, self.k, cfg.gaussian_convention)?
                .clamp(0.5 * previous_sigma, 2.0 * previous_sigma);
            model = NoiseModel {
                alpha,
                mu,
                sigma,
                p,
                beta,
                k: self.k,
                gaussian_convention: cfg.gaussian_convention,
            };
            hist = Some(h);
            if (sigma - previous_sigma).abs() <= cfg.fit_round_tolerance * previous_sigma {
                break;
            }
        }
        Ok((model, hist.expect("at least one fit round")))
    }
}

fn fold_values(values: &[f64], folded: bool) -> Vec<f64> {
    if folded {
        values.iter().map(|v| v.abs()).collect()
    } else {
        values.to_vec()
    }
}

/// One-shot fit with a fresh fitter (β disabled unless configured).
pub fn fit_inlier_model(residuals: &ResidualMatrix, config: &SieConfig) -> Result<InlierModel> {
    SieFitter::new(config.clone()).fit(residuals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ResidualMode;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{RngExt, SeedableRng};
    use rand_distr::Distribution;

    fn gaussian_column(n: usize, mu: f64, sigma: f64, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(mu, sigma).unwrap();
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    }

    fn laplace_column(n: usize, scale: f64, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(-0.5..0.5);
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect()
    }

    fn residual_matrix(columns: &[Vec<f64>], mode: ResidualMode) -> ResidualMatrix {
        let n = columns[0].len();
        let m = columns.len();
        let mut values = DMatrix::zeros(n, m);
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                values[(i, j)] = v;
            }
        }
        let scale = DMatrix::from_element(n, m, 1.0);
        ResidualMatrix::new(values, scale, mode).unwrap()
    }

    #[test]
    fn init_clamps_constant_columns() {
        let model = init_model(&vec![0.0; 100], 2.0).unwrap();
        assert_eq!(model.mu, 0.0);
        assert_eq!(model.sigma, MIN_SCALE);
    }

    #[test]
    fn init_recovers_gaussian_scale() {
        let column = gaussian_column(100_000, 0.0, 0.01, 1);
        let model = init_model(&column, 2.0).unwrap();
        assert!(model.sigma > 0.0099 && model.sigma < 0.0101, "sigma = {}", model.sigma);
    }

    #[test]
    fn init_recovers_laplace_scale() {
        let b = 0.03;
        let column = laplace_column(100_000, b, 2);
        let model = init_model(&column, 1.0).unwrap();
        assert_relative_eq!(model.sigma, b, max_relative = 0.02);
    }

    #[test]
    fn ggd_density_closed_form_values() {
        assert_relative_eq!(
            ggd_density(0.0, 0.0, 1.0, 2.0),
            1.0 / std::f64::consts::PI.sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(ggd_density(0.0, 0.0, 1.0, 1.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ggd_density_integrates_to_one() {
        // Midpoint rule; the substitution-free grid is an independent check.
        for &p in &[0.5, 1.0, 2.0, 4.0] {
            let sigma = 1.0;
            let upper = sigma * 50f64.powf(1.0 / p);
            let steps = 4_000_000usize;
            let h = upper / steps as f64;
            let half: f64 = (0..steps)
                .map(|i| ggd_density((i as f64 + 0.5) * h, 0.0, sigma, p) * h)
                .sum();
            assert_relative_eq!(2.0 * half, 1.0, max_relative = 1e-6);
        }
    }

    #[test]
    fn curve_peak_and_shoulder() {
        let m = NoiseModel {
            alpha: 2.0,
            mu: 0.3,
            sigma: 0.05,
            p: 2.0,
            beta: 0.02,
            k: 10.0,
            gaussian_convention: true,
        };
        assert_relative_eq!(m.curve(0.3), 2.0, epsilon = 1e-12);
        assert_relative_eq!(m.curve(0.3 + 0.07), 2.0 * (-0.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn beta_widens_the_curve() {
        let base = NoiseModel {
            alpha: 1.0,
            mu: 0.0,
            sigma: 0.1,
            p: 2.0,
            beta: 0.0,
            k: 10.0,
            gaussian_convention: true,
        };
        let mut widened = base.clone();
        widened.beta = 0.05;
        for x in [0.05, 0.1, 0.3] {
            assert!(widened.curve(x) > base.curve(x));
        }
    }

    /// Histogram that is the exact discretization of a Gaussian-form curve.
    fn discretized_gaussian_histogram(
        alpha: f64,
        sigma: f64,
        lo: f64,
        hi: f64,
        bins: usize,
    ) -> Histogram {
        let bw = (hi - lo) / bins as f64;
        let counts: Vec<f64> = (0..bins)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * bw;
                alpha * (-0.5 * (x / sigma).powi(2)).exp()
            })
            .collect();
        Histogram::from_counts(lo, hi, counts, 1000, 0).unwrap()
    }

    #[test]
    fn fit_sigma_recovers_exact_discretization() {
        let h = discretized_gaussian_histogram(100.0, 0.01, -0.05, 0.05, 200);
        let sigma = fit_sigma(&h, 100.0, 0.0, 2.0, 10.0).unwrap();
        assert!(sigma >= 0.009 && sigma <= 0.011, "sigma = {sigma}");
    }

    #[test]
    fn fit_sigma_shrugs_off_uniform_outlier_floor() {
        // Inlier curve plus a flat floor carrying 10x the outlier mass.
        let (lo, hi, bins) = (-0.05, 0.05, 200usize);
        let bw = (hi - lo) / bins as f64;
        let inlier_mass_per_unit = 100.0;
        let counts: Vec<f64> = (0..bins)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * bw;
                inlier_mass_per_unit * (-0.5 * (x / 0.01f64).powi(2)).exp() + 25.0
            })
            .collect();
        let h = Histogram::from_counts(lo, hi, counts, 1000, 0).unwrap();
        let (mu, alpha) = estimate_mu_alpha(&h);
        let sigma = fit_sigma(&h, alpha, mu, 2.0, 10.0).unwrap();
        assert_relative_eq!(sigma, 0.01, max_relative = 0.15);
    }

    #[test]
    fn larger_penalty_fits_tighter() {
        let (lo, hi, bins) = (-0.05, 0.05, 200usize);
        let bw = (hi - lo) / bins as f64;
        let counts: Vec<f64> = (0..bins)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * bw;
                100.0 * (-0.5 * (x / 0.01f64).powi(2)).exp() + 25.0
            })
            .collect();
        let h = Histogram::from_counts(lo, hi, counts, 1000, 0).unwrap();
        let (mu, alpha) = estimate_mu_alpha(&h);
        let tight = fit_sigma(&h, alpha, mu, 2.0, 10.0).unwrap();
        let loose = fit_sigma(&h, alpha, mu, 2.0, 1.0).unwrap();
        assert!(tight <= loose, "k=10 gave {tight}, k=1 gave {loose}");
    }

    #[test]
    fn peak_estimate_tracks_sample_mode() {
        let column = gaussian_column(100_000, 0.3, 0.05, 3);
        let cfg = HistogramConfig::default();
        let model = init_model(&column, 2.0).unwrap();
        let h = Histogram::build(&column, model.range(cfg.epsilon), &cfg)
            .unwrap()
            .smoothed(&cfg);
        let (mu, alpha) = estimate_mu_alpha(&h);
        assert!((mu - 0.3).abs() < 0.01, "mu = {mu}");
        assert!(alpha > 0.0);
    }

    #[test]
    fn flat_histogram_breaks_ties_to_the_first_bin() {
        let h = Histogram::from_counts(0.0, 1.0, vec![3.0; 10], 30, 0).unwrap();
        let (mu, _) = estimate_mu_alpha(&h);
        assert_relative_eq!(mu, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn prior_saturates_on_pure_inliers() {
        // Model exactly matching the histogram explains all in-range mass.
        let h = discretized_gaussian_histogram(100.0, 0.01, -0.05, 0.05, 100);
        let model = NoiseModel {
            alpha: 100.0,
            mu: 0.0,
            sigma: 0.01,
            p: 2.0,
            beta: 0.0,
            k: 10.0,
            gaussian_convention: true,
        };
        let prior = inlier_prior(&[model], &[h]);
        assert!(prior > 0.99, "prior = {prior}");
    }

    #[test]
    fn prior_of_half_mixture_is_near_half() {
        // Half the mass under a matched curve, half in a far-out spike the
        // curve cannot explain.
        let (lo, hi, bins) = (-0.1, 0.1, 100usize);
        let bw = (hi - lo) / bins as f64;
        let mut counts = vec![0.0; bins];
        let mut inlier_mass = 0.0;
        for (i, c) in counts.iter_mut().enumerate() {
            let x = lo + (i as f64 + 0.5) * bw;
            *c = 100.0 * (-0.5 * (x / 0.01f64).powi(2)).exp();
            inlier_mass += *c;
        }
        // Outlier spike in the last bins, equal total mass.
        let spike_bins = 4;
        for i in bins - spike_bins..bins {
            counts[i] += inlier_mass / spike_bins as f64;
        }
        let h = Histogram::from_counts(lo, hi, counts, 1000, 0).unwrap();
        let model = NoiseModel {
            alpha: 100.0,
            mu: 0.0,
            sigma: 0.01,
            p: 2.0,
            beta: 0.0,
            k: 10.0,
            gaussian_convention: true,
        };
        let prior = inlier_prior(&[model], &[h]);
        assert!(prior > 0.4 && prior < 0.6, "prior = {prior}");
    }

    #[test]
    fn zero_curve_clamps_prior_to_floor() {
        let h = Histogram::from_counts(0.0, 1.0, vec![5.0; 10], 50, 0).unwrap();
        let model = NoiseModel {
            alpha: f64::MIN_POSITIVE,
            mu: -100.0,
            sigma: 1e-6,
            p: 2.0,
            beta: 0.0,
            k: 10.0,
            gaussian_convention: true,
        };
        assert_eq!(inlier_prior(&[model], &[h]), 1e-4);
    }

    #[test]
    fn prob_dim_caps_and_ratios() {
        let h = Histogram::from_counts(-1.0, 1.0, vec![10.0; 20], 200, 0).unwrap();
        let model = NoiseModel {
            alpha: 10.0,
            mu: 0.0,
            sigma: 10.0, // nearly flat over the range
            p: 2.0,
            beta: 0.0,
            k: 10.0,
            gaussian_convention: true,
        };
        // Curve ≈ histogram → capped.
        assert_relative_eq!(inlier_prob_dim(0.0, &model, &h, 0.99), 0.99);
        // Curve at half the histogram → ratio.
        let mut half = model.clone();
        half.alpha = 5.0;
        assert_relative_eq!(inlier_prob_dim(0.0, &half, &h, 0.99), 0.5, epsilon = 1e-6);
        // Far tail: negligible curve mass over real histogram mass.
        let mut narrow = model.clone();
        narrow.sigma = 0.01;
        assert!(inlier_prob_dim(0.9, &narrow, &h, 0.99) < 1e-12);
        // Outside the range the probability is zero.
        assert_eq!(inlier_prob_dim(5.0, &model, &h, 0.99), 0.0);
    }

    #[test]
    fn combine_row_reduces_and_combines() {
        assert_relative_eq!(combine_row(&[0.7], 1.0), 0.7, epsilon = 1e-15);
        assert_relative_eq!(combine_row(&[0.5, 0.5], 1.0), 0.5, epsilon = 1e-15);
        let p = 0.99f64;
        let expected = p.powi(3) / (p.powi(3) + (1.0 - p).powi(3));
        assert_relative_eq!(combine_row(&[p, p, p], 1.0), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.999_999, epsilon = 1e-6);
    }

    #[test]
    fn adapt_k_heuristic_evaluations() {
        assert_relative_eq!(adapt_k_from_average(1.0), 1.0);
        assert_relative_eq!(adapt_k_from_average(0.5), 8.0);
        assert_relative_eq!(adapt_k_from_average(0.3), 10.0); // 37 clamped
    }

    #[test]
    fn beta_schedule_halves_and_stays_at_zero() {
        assert_relative_eq!(update_beta(0.08), 0.04);
        assert_eq!(update_beta(0.0), 0.0);
        let mut b = 1.0;
        for _ in 0..10 {
            b = update_beta(b);
        }
        assert_relative_eq!(b, 0.0009765625);
    }

    #[test]
    fn initial_beta_is_residual_spread() {
        let zeros = residual_matrix(&[vec![0.0; 100]], ResidualMode::Norm);
        assert_eq!(init_beta(&zeros)[0], 0.0);

        let col = gaussian_column(10_000, 0.0, 0.1, 4);
        let r = residual_matrix(&[col], ResidualMode::Norm);
        let beta = init_beta(&r)[0];
        assert!(beta > 0.095 && beta < 0.105, "beta = {beta}");
    }

    #[test]
    fn exponent_estimation_identifies_the_family() {
        let cfg = SieConfig::default();
        let gaussian = gaussian_column(100_000, 0.0, 0.01, 5);
        assert_eq!(estimate_p(&gaussian, &cfg).unwrap(), 2.0);

        let laplace = laplace_column(100_000, 0.01, 6);
        let p = estimate_p(&laplace, &cfg).unwrap();
        assert!(
            [0.75, 1.0, 1.25].contains(&p),
            "estimated p = {p} for Laplacian data"
        );

        assert!(matches!(
            estimate_p(&vec![0.5; 1000], &cfg),
            Err(Error::DegenerateColumn)
        ));
        assert!(matches!(
            estimate_p(&[1.0, 2.0], &cfg),
            Err(Error::TooFewValues { .. })
        ));
    }

    fn mixture_columns(
        inliers: usize,
        outliers: usize,
        sigma: f64,
        dims: usize,
        seed: u64,
    ) -> ResidualMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
        let cols: Vec<Vec<f64>> = (0..dims)
            .map(|_| {
                let mut col: Vec<f64> =
                    (0..inliers).map(|_| normal.sample(&mut rng)).collect();
                col.extend((0..outliers).map(|_| rng.random_range(-1.0..1.0)));
                col
            })
            .collect();
        let mode = if dims == 1 { ResidualMode::PointToPlane } else { ResidualMode::PointToPoint };
        residual_matrix(&cols, mode)
    }

    #[test]
    fn fit_recovers_noise_on_easy_mixture() {
        let r = mixture_columns(1000, 100, 0.01, 3, 7);
        let model = fit_inlier_model(&r, &SieConfig::default()).unwrap();
        for m in model.models() {
            assert_relative_eq!(m.sigma, 0.01, max_relative = 0.2);
        }
        let prior = model.inlier_prior();
        assert!(prior > 0.85 && prior < 0.99, "prior = {prior}");
    }

    #[test]
    fn fit_on_pure_inliers_reports_high_prior() {
        let r = mixture_columns(100_000, 0, 0.01, 1, 8);
        let model = fit_inlier_model(&r, &SieConfig::default()).unwrap();
        assert!(model.inlier_prior() >= 0.95, "prior = {}", model.inlier_prior());
    }

    #[test]
    fn fit_survives_ten_to_one_outliers() {
        let r = mixture_columns(1000, 10_000, 0.01, 3, 9);
        let model = fit_inlier_model(&r, &SieConfig::default()).unwrap();
        for m in model.models() {
            assert_relative_eq!(m.sigma, 0.01, max_relative = 0.3);
        }
    }

    #[test]
    fn fitting_normalized_residuals_matches_constant_scale() {
        // Scales that are exact powers of two divide without rounding, so
        // the normalized column is bit-identical to the unscaled one.
        let base = gaussian_column(5000, 0.0, 0.01, 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let scales: Vec<f64> =
            (0..5000).map(|_| 2f64.powi(rng.random_range(-2..3))).collect();

        let n = base.len();
        let mut scaled = DMatrix::zeros(n, 1);
        let mut scale = DMatrix::zeros(n, 1);
        for i in 0..n {
            scaled[(i, 0)] = base[i] * scales[i];
            scale[(i, 0)] = scales[i];
        }
        let r_scaled = ResidualMatrix::new(scaled, scale, ResidualMode::Norm).unwrap();
        let r_plain = residual_matrix(&[base], ResidualMode::Norm);

        let cfg = SieConfig::default();
        let a = fit_inlier_model(&normalize_residuals(&r_scaled), &cfg).unwrap();
        let b = fit_inlier_model(&r_plain, &cfg).unwrap();
        assert_relative_eq!(a.models()[0].sigma, b.models()[0].sigma, epsilon = 1e-9);
    }
}
