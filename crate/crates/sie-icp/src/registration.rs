//! The outer registration algorithm: alternate nearest-neighbor matching
//! with IRLS refinement under a chosen weight function. For the statistical
//! inlier cost, the noise model is refitted from the current residuals each
//! iteration and the regularizer β is halved every time the transform
//! converges, until β is negligible against the fitted scale.

use crate::costs::{
    estimate_t_scale, weight_lp, weight_sie, weight_t_dist, weight_truncated_l2,
};
use crate::error::{Error, Result};
use crate::geometry::{
    build_nn_index, compute_residuals, match_nearest, solve_weighted_transform, Correspondence,
    PointCloud, ResidualMatrix, ResidualMode, RigidTransform,
};
use crate::sie::{InlierModel, SieConfig, SieFitter};
use rand::{RngExt, SeedableRng};

/// Which weight function drives the refinement.
#[derive(Debug, Clone, PartialEq)]
pub enum CostFunction {
    Sie(SieConfig),
    TruncatedL2 { threshold: f64 },
    Lp { p: f64, delta: f64 },
    TDist { nu: f64 },
}

impl CostFunction {
    pub fn name(&self) -> &'static str {
        match self {
            CostFunction::Sie(_) => "sie",
            CostFunction::TruncatedL2 { .. } => "trunc-l2",
            CostFunction::Lp { .. } => "lp",
            CostFunction::TDist { .. } => "t-dist",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub cost: CostFunction,
    pub mode: ResidualMode,
    /// Upper bound on matched correspondences per iteration; larger sources
    /// are randomly subsampled.
    pub max_matches: usize,
    pub irls_max_iters: usize,
    pub icp_max_iters: usize,
    pub translation_tolerance: f64,
    pub rotation_tolerance: f64,
    /// Stop once β < ratio·σ̂ in every residual dimension.
    pub beta_stop_ratio: f64,
    pub seed: u64,
    /// Refit the noise model after every matching step. Off by default:
    /// the model is fitted once per β phase (at the start and after each
    /// halving), which keeps the weight state frozen while the transform
    /// converges; per-iteration refits jitter the weights enough that the
    /// convergence trigger for the β schedule can starve.
    pub refit_every_iteration: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            cost: CostFunction::Sie(SieConfig::default()),
            mode: ResidualMode::PointToPoint,
            max_matches: 2000,
            irls_max_iters: 10,
            icp_max_iters: 100,
            translation_tolerance: 1e-6,
            rotation_tolerance: 1e-6,
            beta_stop_ratio: 0.01,
            seed: 0,
            refit_every_iteration: false,
        }
    }
}

impl RegistrationConfig {
    fn validate(&self) -> Result<()> {
        if !(self.translation_tolerance > 0.0 && self.rotation_tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.beta_stop_ratio > 0.0 && self.beta_stop_ratio < 1.0) {
            return Err(Error::InvalidArgument("beta_stop_ratio must lie in (0, 1)".into()));
        }
        if self.max_matches == 0 || self.irls_max_iters == 0 || self.icp_max_iters == 0 {
            return Err(Error::InvalidArgument(
                "max_matches and iteration limits must be at least 1".into(),
            ));
        }
        match &self.cost {
            CostFunction::TruncatedL2 { threshold } if !(*threshold > 0.0) => {
                Err(Error::InvalidArgument("threshold must be positive".into()))
            }
            CostFunction::Lp { p, delta } if !(*p > 0.0 && *delta > 0.0) => {
                Err(Error::InvalidArgument("p and delta must be positive".into()))
            }
            CostFunction::TDist { nu } if !(*nu > 0.0) => {
                Err(Error::InvalidArgument("nu must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One outer-iteration snapshot. Fields that do not apply to the active
/// cost function hold NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// `Σ wᵢ‖rᵢ‖²` after the iteration's refinement.
    pub objective: f64,
    pub sigma: f64,
    pub beta: f64,
    pub inlier_prior: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Final fitted noise model (statistical inlier cost only).
    pub inlier_model: Option<InlierModel>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRecord>,
}

/// Weighting state held fixed through one IRLS refinement.
enum WeightState {
    TruncatedL2 { threshold: f64 },
    Lp { p: f64, delta: f64 },
    TDist { nu: f64, sigma: f64 },
    Sie { model: InlierModel, delta: f64 },
}

impl WeightState {
    /// Per-row weights. Residual norms are normalized by their scale
    /// factors for every cost function; the statistical weight additionally
    /// scales by the per-measurement noise (Eq.-4 style 1/σᵢ²).
    fn weights(&self, residuals: &ResidualMatrix) -> Vec<f64> {
        let n = residuals.n_rows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let scale = residuals.scale()[(i, 0)];
            let raw_norm = residuals.row_norm(i);
            let norm = raw_norm / scale;
            let w = match self {
                WeightState::TruncatedL2 { threshold } => {
                    weight_truncated_l2(norm, *threshold)
                }
                WeightState::Lp { p, delta } => weight_lp(norm, *p, *delta),
                WeightState::TDist { nu, sigma } => weight_t_dist(norm, *sigma, *nu),
                WeightState::Sie { model, delta } => {
                    let row: Vec<f64> =
                        residuals.row(i).iter().map(|v| v / scale).collect();
                    let prob = model.row_probability(&row);
                    let p = model.models().iter().map(|m| m.p).sum::<f64>()
                        / model.dims() as f64;
                    let sigma_i = (model.mean_sigma() * scale).max(f64::MIN_POSITIVE);
                    weight_sie(raw_norm, sigma_i, p, prob, *delta)
                }
            };
            out.push(w);
        }
        out
    }
}

struct IrlsStep {
    objective_before: f64,
    objective_after: f64,
}

fn irls_objective(residuals: &ResidualMatrix, weights: &[f64]) -> f64 {
    (0..residuals.n_rows())
        .map(|i| {
            let rn = residuals.row_norm(i);
            weights[i] * rn * rn
        })
        .sum()
}

fn irls_refine_impl(
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    state: &WeightState,
    t0: &RigidTransform,
    config: &RegistrationConfig,
) -> Result<(RigidTransform, Vec<IrlsStep>)> {
    if matches.is_empty() {
        return Err(Error::EmptyMatches);
    }
    let mut t = *t0;
    let mut steps = Vec::new();
    for _ in 0..config.irls_max_iters {
        let residuals = compute_residuals(matches, source, target, &t, config.mode)?;
        let weights = state.weights(&residuals);
        let objective_before = irls_objective(&residuals, &weights);
        let t_new = solve_weighted_transform(matches, source, target, &weights, config.mode, &t)?;
        let after = compute_residuals(matches, source, target, &t_new, config.mode)?;
        let objective_after = irls_objective(&after, &weights);
        steps.push(IrlsStep { objective_before, objective_after });

        let (dt, dr) = t.delta(&t_new);
        t = t_new;
        if dt < config.translation_tolerance && dr < config.rotation_tolerance {
            break;
        }
    }
    Ok((t, steps))
}

/// Repeats {residuals → weights → weighted solve} from `t0` until the
/// transform stops moving, holding the weighting state fixed. Weights are
/// recomputed from the residuals at each step but the solve itself sees
/// them as constants.
pub fn irls_refine(
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    cost: &CostFunction,
    t0: &RigidTransform,
    config: &RegistrationConfig,
) -> Result<RigidTransform> {
    let state = static_weight_state(cost, matches, source, target, t0, config)?;
    Ok(irls_refine_impl(matches, source, target, &state, t0, config)?.0)
}

/// Builds the weighting state for one refinement call, fitting whatever the
/// cost function needs from the residuals at `t0`.
fn static_weight_state(
    cost: &CostFunction,
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    t0: &RigidTransform,
    config: &RegistrationConfig,
) -> Result<WeightState> {
    Ok(match cost {
        CostFunction::TruncatedL2 { threshold } => {
            WeightState::TruncatedL2 { threshold: *threshold }
        }
        CostFunction::Lp { p, delta } => WeightState::Lp { p: *p, delta: *delta },
        CostFunction::TDist { nu } => {
            let residuals = compute_residuals(matches, source, target, t0, config.mode)?;
            let norms = normalized_norms(&residuals);
            WeightState::TDist { nu: *nu, sigma: estimate_t_scale(&norms, *nu) }
        }
        CostFunction::Sie(sie) => {
            let residuals = compute_residuals(matches, source, target, t0, config.mode)?;
            let mut fitter = SieFitter::new(sie.clone());
            let model = fitter.fit(&residuals)?;
            WeightState::Sie { model, delta: sie.delta }
        }
    })
}

fn normalized_norms(residuals: &ResidualMatrix) -> Vec<f64> {
    (0..residuals.n_rows())
        .map(|i| residuals.row_norm(i) / residuals.scale()[(i, 0)])
        .collect()
}

enum Matcher<'a> {
    Index { target: &'a crate::geometry::NnIndex },
    Fixed(&'a [Correspondence]),
}

/// Full registration: build an index over the target, then alternate
/// matching and refinement until convergence.
pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    t0: &RigidTransform,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let index = build_nn_index(target)?;
    register_impl(source, target, Matcher::Index { target: &index }, t0, config)
}

/// Registration over a fixed correspondence set (no matching step); this is
/// the estimation path used when correspondences come from elsewhere.
pub fn register_with_correspondences(
    source: &PointCloud,
    target: &PointCloud,
    matches: &[Correspondence],
    t0: &RigidTransform,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if matches.is_empty() {
        return Err(Error::EmptyMatches);
    }
    register_impl(source, target, Matcher::Fixed(matches), t0, config)
}

fn register_impl(
    source: &PointCloud,
    target: &PointCloud,
    matcher: Matcher<'_>,
    t0: &RigidTransform,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut t = *t0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last_model: Option<InlierModel> = None;

    let mut fitter = match &config.cost {
        CostFunction::Sie(sie) => {
            let mut cfg = sie.clone();
            cfg.use_beta = true;
            Some(SieFitter::new(cfg))
        }
        _ => None,
    };
    let mut needs_refit = true;
    // The random subsample is redrawn per β phase, not per iteration, so
    // the inner convergence test sees a stationary problem.
    let mut match_seed = rng.random::<u64>();

    'outer: for outer in 1..=config.icp_max_iters {
        iterations = outer;

        let owned_matches;
        let matches: &[Correspondence] = match &matcher {
            Matcher::Index { target: index } => {
                owned_matches =
                    match_nearest(source, &t, index, config.max_matches, match_seed);
                &owned_matches
            }
            Matcher::Fixed(m) => m,
        };
        if matches.is_empty() {
            return Err(Error::EmptyMatches);
        }

        let residuals = compute_residuals(matches, source, target, &t, config.mode)?;

        let state = match &config.cost {
            CostFunction::Sie(sie) => {
                let fitter = fitter.as_mut().expect("fitter exists for sie cost");
                if needs_refit || config.refit_every_iteration || last_model.is_none() {
                    match fitter.fit(&residuals) {
                        Ok(model) => last_model = Some(model),
                        // The model cannot be fitted (e.g. residuals carry no
                        // information); stop with whatever we have.
                        Err(_) => break 'outer,
                    }
                    needs_refit = false;
                }
                WeightState::Sie {
                    model: last_model.clone().expect("model fitted above"),
                    delta: sie.delta,
                }
            }
            CostFunction::TruncatedL2 { threshold } => {
                WeightState::TruncatedL2 { threshold: *threshold }
            }
            CostFunction::Lp { p, delta } => WeightState::Lp { p: *p, delta: *delta },
            CostFunction::TDist { nu } => {
                let norms = normalized_norms(&residuals);
                WeightState::TDist { nu: *nu, sigma: estimate_t_scale(&norms, *nu) }
            }
        };

        let t_prev = t;
        let steps = match irls_refine_impl(matches, source, target, &state, &t, config) {
            Ok((t_new, steps)) => {
                t = t_new;
                steps
            }
            // Degenerate geometry mid-run (e.g. every weight rejected):
            // stop here and report non-convergence instead of crashing the
            // whole registration.
            Err(Error::DegenerateGeometry(_)) | Err(Error::EmptyMatches) => break 'outer,
            Err(e) => return Err(e),
        };

        let objective = steps.last().map(|s| s.objective_after).unwrap_or(f64::NAN);
        trace.push(match (&state, &last_model) {
            (WeightState::Sie { .. }, Some(model)) => TraceRecord {
                iteration: outer,
                objective,
                sigma: model.mean_sigma(),
                beta: model.mean_beta(),
                inlier_prior: model.inlier_prior(),
            },
            (WeightState::TDist { sigma, .. }, _) => TraceRecord {
                iteration: outer,
                objective,
                sigma: *sigma,
                beta: f64::NAN,
                inlier_prior: f64::NAN,
            },
            _ => TraceRecord {
                iteration: outer,
                objective,
                sigma: f64::NAN,
                beta: f64::NAN,
                inlier_prior: f64::NAN,
            },
        });

        let (dt, dr) = t_prev.delta(&t);
        if dt < config.translation_tolerance && dr < config.rotation_tolerance {
            match fitter.as_mut() {
                Some(f) => {
                    if f.beta_converged(config.beta_stop_ratio) {
                        converged = true;
                        break;
                    }
                    f.halve_betas();
                    // The fixed penalty gives way to the data-adaptive
                    // heuristic once the first convergence is reached.
                    f.enable_adaptive_k();
                    needs_refit = true;
                    match_seed = rng.random::<u64>();
                }
                None => {
                    converged = true;
                    break;
                }
            }
        }
    }

    Ok(RegistrationResult { transform: t, inlier_model: last_model, iterations, converged, trace })
}
