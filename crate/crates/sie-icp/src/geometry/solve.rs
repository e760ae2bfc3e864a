//! Weighted rigid-transform solvers.
//!
//! Point-to-point uses the closed form: align weighted centroids, then take
//! the SVD of the weighted cross-covariance, flipping the smallest singular
//! direction if the raw solution is a reflection. Point-to-plane runs up to
//! three small-angle Gauss-Newton steps on the linearized 6-dof system.

use super::{compute_residuals, Correspondence, PointCloud, ResidualMode, RigidTransform, Vec3};
use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

const MAX_PLANE_STEPS: usize = 3;
// Relative gap below which the cross-covariance is considered rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Weighted least-squares estimate of the transform taking matched source
/// points onto target points, dispatched on residual mode.
///
/// `init` seeds the point-to-plane linearization; the point-to-point closed
/// form ignores it.
pub fn solve_weighted_transform(
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    weights: &[f64],
    mode: ResidualMode,
    init: &RigidTransform,
) -> Result<RigidTransform> {
    match mode {
        ResidualMode::PointToPoint | ResidualMode::Norm => {
            solve_point_to_point(matches, source, target, weights)
        }
        ResidualMode::PointToPlane => {
            solve_point_to_plane(matches, source, target, weights, init)
        }
    }
}

/// Exact minimizer of `Σ wᵢ‖T·aᵢ − bᵢ‖²` over SE(3).
pub fn solve_point_to_point(
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    weights: &[f64],
) -> Result<RigidTransform> {
    check_inputs(matches, weights)?;

    let total_weight: f64 = weights.iter().sum();
    if !(total_weight > 0.0) {
        return Err(Error::DegenerateGeometry("total correspondence weight is zero".into()));
    }

    let mut src_centroid = Vector3::zeros();
    let mut tgt_centroid = Vector3::zeros();
    for (m, &w) in matches.iter().zip(weights) {
        src_centroid += w * source.points()[m.source_index].coords;
        tgt_centroid += w * target.points()[m.target_index].coords;
    }
    src_centroid /= total_weight;
    tgt_centroid /= total_weight;

    let mut cross = Matrix3::zeros();
    for (m, &w) in matches.iter().zip(weights) {
        let a = source.points()[m.source_index].coords - src_centroid;
        let b = target.points()[m.target_index].coords - tgt_centroid;
        cross += w * b * a.transpose();
    }

    let svd = cross.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateGeometry("SVD failed".into()))?;
    let s = svd.singular_values;
    if s[1] <= RANK_TOL * s[0].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateGeometry(
            "effective correspondences are collinear or coincident".into(),
        ));
    }

    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let translation = tgt_centroid - rotation * src_centroid;
    Ok(RigidTransform::from_parts_unchecked(rotation, translation))
}

/// Gauss-Newton refinement of `Σ wᵢ (nᵢᵀ(T·aᵢ − bᵢ))²` starting from `init`.
pub fn solve_point_to_plane(
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    weights: &[f64],
    init: &RigidTransform,
) -> Result<RigidTransform> {
    check_inputs(matches, weights)?;
    let normals = target.normals().ok_or(Error::MissingNormals)?;
    if weights.iter().filter(|&&w| w > 0.0).count() < 6 {
        return Err(Error::DegenerateGeometry(
            "point-to-plane needs at least 6 weighted constraints".into(),
        ));
    }

    let mut t = *init;
    for _ in 0..MAX_PLANE_STEPS {
        let mut a_mat = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (m, &w) in matches.iter().zip(weights) {
            let p = t.transform_point(&source.points()[m.source_index]);
            let n = &normals[m.target_index];
            let r = n.dot(&(p - target.points()[m.target_index]));
            let mut j = Vector6::zeros();
            let rot_part = p.coords.cross(n);
            j.fixed_rows_mut::<3>(0).copy_from(&rot_part);
            j.fixed_rows_mut::<3>(3).copy_from(n);
            a_mat += w * j * j.transpose();
            g -= w * r * j;
        }
        let chol = a_mat.cholesky().ok_or_else(|| {
            Error::DegenerateGeometry("point-to-plane normal system is rank deficient".into())
        })?;
        let x = chol.solve(&g);
        let omega = Vec3::new(x[0], x[1], x[2]);
        let dt = Vec3::new(x[3], x[4], x[5]);
        let step = RigidTransform::from_axis_angle_translation(omega, dt);
        t = step.compose(&t);
        if omega.norm() < 1e-12 && dt.norm() < 1e-12 {
            break;
        }
    }
    Ok(t)
}

fn check_inputs(matches: &[Correspondence], weights: &[f64]) -> Result<()> {
    if matches.is_empty() {
        return Err(Error::EmptyMatches);
    }
    if weights.len() != matches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} matches",
            weights.len(),
            matches.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    Ok(())
}

/// `Σ wᵢ‖rᵢ‖²` evaluated at `t`, the quantity the solvers minimize.
pub fn weighted_objective(
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    t: &RigidTransform,
    weights: &[f64],
    mode: ResidualMode,
) -> Result<f64> {
    let r = compute_residuals(matches, source, target, t, mode)?;
    Ok((0..r.n_rows())
        .map(|i| {
            let rn = r.row_norm(i);
            weights[i] * rn * rn
        })
        .sum())
}
