//! Point clouds, rigid transforms, correspondences and residuals.
//!
//! Everything here is a pure value type: clouds and transforms are immutable
//! after construction and safe to share across threads.

mod kdtree;
mod solve;

pub use kdtree::{build_nn_index, NnIndex};
pub use solve::{solve_point_to_plane, solve_point_to_point, solve_weighted_transform, weighted_objective};

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use rand::SeedableRng;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;

const UNIT_TOL: f64 = 1e-9;

/// An ordered set of 3D points with optional unit normals and optional
/// per-point noise-scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    normals: Option<Vec<Vec3>>,
    noise_scale: Option<Vec<f64>>,
}

impl PointCloud {
    /// Builds a cloud from bare points. All coordinates must be finite.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::InvalidCloud(format!("non-finite coordinate at point {i}")));
            }
        }
        Ok(Self { points, normals: None, noise_scale: None })
    }

    /// Attaches unit normals (one per point, unit length within 1e-9).
    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::InvalidCloud(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        for (i, n) in normals.iter().enumerate() {
            if !n.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidCloud(format!("non-finite normal at point {i}")));
            }
            if (n.norm() - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidCloud(format!(
                    "normal at point {i} has length {}",
                    n.norm()
                )));
            }
        }
        self.normals = Some(normals);
        Ok(self)
    }

    /// Attaches strictly positive per-point noise-scale factors.
    pub fn with_noise_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.points.len() {
            return Err(Error::InvalidCloud(format!(
                "{} scale factors for {} points",
                scale.len(),
                self.points.len()
            )));
        }
        for (i, &s) in scale.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidCloud(format!("noise scale {s} at point {i}")));
            }
        }
        self.noise_scale = Some(scale);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn noise_scale(&self) -> Option<&[f64]> {
        self.noise_scale.as_deref()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }
}

/// An SE(3) element: orthonormal rotation (det +1) plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a transform, validating RᵀR = I and det(R) = +1 within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).norm();
        if ortho_err > UNIT_TOL {
            return Err(Error::InvalidArgument(format!(
                "rotation is not orthonormal (error {ortho_err:.2e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidArgument(format!("rotation determinant {det}")));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// Rotation by `axis_angle` (scaled-axis form) followed by `translation`.
    pub fn from_axis_angle_translation(axis_angle: Vec3, translation: Vec3) -> Self {
        let rotation = *Rotation3::from_scaled_axis(axis_angle).matrix();
        Self { rotation, translation }
    }

    /// Rotation about an axis through a pivot point (rather than the origin).
    pub fn rotation_about_point(axis_angle: Vec3, pivot: Point3) -> Self {
        let rotation = *Rotation3::from_scaled_axis(axis_angle).matrix();
        let translation = pivot.coords - rotation * pivot.coords;
        Self { rotation, translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn rotate_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Composition: `(a.compose(b))(x) = a(b(x))`.
    pub fn compose(&self, rhs: &Self) -> Self {
        Self {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    /// Rotation magnitude in radians (axis-angle norm).
    pub fn rotation_angle(&self) -> f64 {
        let cos = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        cos.acos()
    }

    /// Translation-norm and rotation-angle of the relative transform
    /// `other ∘ self⁻¹`, used as the convergence metric.
    pub fn delta(&self, other: &Self) -> (f64, f64) {
        let rel = other.compose(&self.inverse());
        (rel.translation.norm(), rel.rotation_angle())
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Applies `t` to every point of `c`; normals are rotated only, noise scales
/// pass through unchanged.
pub fn apply_transform(t: &RigidTransform, c: &PointCloud) -> PointCloud {
    PointCloud {
        points: c.points.iter().map(|p| t.transform_point(p)).collect(),
        normals: c
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| t.rotate_vector(n)).collect()),
        noise_scale: c.noise_scale.clone(),
    }
}

/// One source→target match with the Euclidean distance at matching time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    pub target_index: usize,
    pub distance: f64,
}

/// How correspondence residuals are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    /// One row per match, the full 3-vector `T·a − b` (m = 3).
    PointToPoint,
    /// Projection onto the target normal, `nᵀ(T·a − b)` (m = 1).
    PointToPlane,
    /// Euclidean norm `‖T·a − b‖` (m = 1, non-negative).
    Norm,
}

impl ResidualMode {
    pub fn dims(&self) -> usize {
        match self {
            ResidualMode::PointToPoint => 3,
            ResidualMode::PointToPlane | ResidualMode::Norm => 1,
        }
    }

    /// Norm residuals live on the folded (non-negative) axis.
    pub fn is_folded(&self) -> bool {
        matches!(self, ResidualMode::Norm)
    }
}

/// An n×m matrix of correspondence residuals plus per-entry scale factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    values: nalgebra::DMatrix<f64>,
    scale: nalgebra::DMatrix<f64>,
    mode: ResidualMode,
}

impl ResidualMatrix {
    pub fn new(
        values: nalgebra::DMatrix<f64>,
        scale: nalgebra::DMatrix<f64>,
        mode: ResidualMode,
    ) -> Result<Self> {
        if values.ncols() != mode.dims() {
            return Err(Error::InvalidArgument(format!(
                "{} columns inconsistent with residual mode",
                values.ncols()
            )));
        }
        if values.shape() != scale.shape() {
            return Err(Error::InvalidArgument("values and scale shapes differ".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite residual entry".into()));
        }
        for i in 0..scale.nrows() {
            for j in 0..scale.ncols() {
                let s = scale[(i, j)];
                if !(s.is_finite() && s > 0.0) {
                    return Err(Error::NonPositiveScale { row: i, col: j, value: s });
                }
            }
        }
        Ok(Self { values, scale, mode })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_dims(&self) -> usize {
        self.values.ncols()
    }

    pub fn mode(&self) -> ResidualMode {
        self.mode
    }

    pub fn values(&self) -> &nalgebra::DMatrix<f64> {
        &self.values
    }

    pub fn scale(&self) -> &nalgebra::DMatrix<f64> {
        &self.scale
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Euclidean norm of row `i`.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.values.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Divides every entry by its scale factor; the result carries unit scale.
    pub fn normalized(&self) -> ResidualMatrix {
        let mut values = self.values.clone();
        for i in 0..values.nrows() {
            for j in 0..values.ncols() {
                values[(i, j)] /= self.scale[(i, j)];
            }
        }
        ResidualMatrix {
            values,
            scale: nalgebra::DMatrix::from_element(self.scale.nrows(), self.scale.ncols(), 1.0),
            mode: self.mode,
        }
    }
}

/// Divides residuals by their known per-measurement scale factors so every
/// row shares the same noise scale. Output scale is identically 1.
pub fn normalize_residuals(r: &ResidualMatrix) -> ResidualMatrix {
    r.normalized()
}

/// Matches source points against the index under transform `t`.
///
/// When the source exceeds `max_matches`, a seeded uniform subset of source
/// points is matched; each selected point maps to its exact nearest target.
pub fn match_nearest(
    source: &PointCloud,
    t: &RigidTransform,
    index: &NnIndex,
    max_matches: usize,
    seed: u64,
) -> Vec<Correspondence> {
    let n = source.len();
    let selected: Vec<usize> = if n > max_matches {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, max_matches).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };

    selected
        .into_iter()
        .map(|i| {
            let q = t.transform_point(&source.points()[i]);
            let (target_index, distance) = index.nearest(&q);
            Correspondence { source_index: i, target_index, distance }
        })
        .collect()
}

/// Combined noise-scale factor of a residual formed from two measurements.
/// Variances add, so factors combine as sqrt(f_a² + f_b²); a cloud without
/// scale information contributes nothing.
fn combined_scale(source: &PointCloud, target: &PointCloud, m: &Correspondence) -> f64 {
    match (source.noise_scale(), target.noise_scale()) {
        (Some(a), Some(b)) => {
            let (fa, fb) = (a[m.source_index], b[m.target_index]);
            (fa * fa + fb * fb).sqrt()
        }
        (Some(a), None) => a[m.source_index],
        (None, Some(b)) => b[m.target_index],
        (None, None) => 1.0,
    }
}

/// Computes the residual matrix for a set of correspondences at transform `t`.
///
/// Point-to-plane projects onto the target normal of each match and requires
/// target normals.
pub fn compute_residuals(
    matches: &[Correspondence],
    source: &PointCloud,
    target: &PointCloud,
    t: &RigidTransform,
    mode: ResidualMode,
) -> Result<ResidualMatrix> {
    let n = matches.len();
    let m = mode.dims();
    let mut values = nalgebra::DMatrix::zeros(n, m);
    let mut scale = nalgebra::DMatrix::from_element(n, m, 1.0);

    let normals = match mode {
        ResidualMode::PointToPlane => {
            Some(target.normals().ok_or(Error::MissingNormals)?)
        }
        _ => None,
    };

    for (row, mt) in matches.iter().enumerate() {
        let a = t.transform_point(&source.points()[mt.source_index]);
        let b = target.points()[mt.target_index];
        let diff = a - b;
        match mode {
            ResidualMode::PointToPoint => {
                values[(row, 0)] = diff.x;
                values[(row, 1)] = diff.y;
                values[(row, 2)] = diff.z;
            }
            ResidualMode::PointToPlane => {
                values[(row, 0)] = normals.unwrap()[mt.target_index].dot(&diff);
            }
            ResidualMode::Norm => {
                values[(row, 0)] = diff.norm();
            }
        }
        let f = combined_scale(source, target, mt);
        for j in 0..m {
            scale[(row, j)] = f;
        }
    }

    ResidualMatrix::new(values, scale, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::RngExt;

    fn rand_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn identity_transform_is_noop() {
        let cloud = rand_cloud(50, 1);
        let out = apply_transform(&RigidTransform::identity(), &cloud);
        assert_eq!(out, cloud);
    }

    #[test]
    fn transform_roundtrip_through_inverse() {
        let cloud = rand_cloud(50, 2);
        let t = RigidTransform::from_axis_angle_translation(
            Vec3::new(0.3, -0.2, 0.9),
            Vec3::new(0.5, -1.0, 2.0),
        );
        let back = apply_transform(&t.inverse(), &apply_transform(&t, &cloud));
        for (p, q) in cloud.points().iter().zip(back.points()) {
            assert_relative_eq!(p.coords, q.coords, epsilon = 1e-9);
        }
    }

    #[test]
    fn quarter_turn_about_z_permutes_axes() {
        let t = RigidTransform::from_axis_angle_translation(
            Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            Vec3::zeros(),
        );
        let p = t.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p.coords, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn transform_validation_rejects_reflection() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn normals_rotate_but_do_not_translate() {
        let cloud = rand_cloud(3, 3)
            .with_normals(vec![Vec3::new(0.0, 0.0, 1.0); 3])
            .unwrap();
        let t = RigidTransform::from_axis_angle_translation(
            Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0),
            Vec3::new(10.0, 10.0, 10.0),
        );
        let out = apply_transform(&t, &cloud);
        for n in out.normals().unwrap() {
            assert_relative_eq!(*n, Vec3::new(0.0, -1.0, 0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn match_nearest_self_match_has_zero_distance() {
        let cloud = rand_cloud(100, 4);
        let index = build_nn_index(&cloud).unwrap();
        let matches =
            match_nearest(&cloud, &RigidTransform::identity(), &index, usize::MAX, 0);
        assert_eq!(matches.len(), 100);
        for m in &matches {
            assert_eq!(m.source_index, m.target_index);
            assert_eq!(m.distance, 0.0);
        }
    }

    #[test]
    fn match_nearest_subsamples_to_requested_count() {
        let source = rand_cloud(10_000, 5);
        let target = rand_cloud(500, 6);
        let index = build_nn_index(&target).unwrap();
        let matches = match_nearest(&source, &RigidTransform::identity(), &index, 2000, 9);
        assert_eq!(matches.len(), 2000);
    }

    #[test]
    fn match_nearest_is_deterministic_per_seed() {
        let source = rand_cloud(5_000, 7);
        let target = rand_cloud(300, 8);
        let index = build_nn_index(&target).unwrap();
        let t = RigidTransform::from_translation(Vec3::new(0.1, 0.0, 0.0));
        let a = match_nearest(&source, &t, &index, 100, 42);
        let b = match_nearest(&source, &t, &index, 100, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn residuals_vanish_for_aligned_pair() {
        let cloud = rand_cloud(40, 9);
        let matches: Vec<_> = (0..40)
            .map(|i| Correspondence { source_index: i, target_index: i, distance: 0.0 })
            .collect();
        let r = compute_residuals(
            &matches,
            &cloud,
            &cloud,
            &RigidTransform::identity(),
            ResidualMode::PointToPoint,
        )
        .unwrap();
        assert!(r.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn plane_residual_ignores_tangent_offset() {
        let target = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)])
            .unwrap()
            .with_normals(vec![Vec3::new(0.0, 0.0, 1.0)])
            .unwrap();
        // Offset purely tangent to the plane.
        let source = PointCloud::new(vec![Point3::new(0.3, -0.7, 0.0)]).unwrap();
        let matches = [Correspondence { source_index: 0, target_index: 0, distance: 0.0 }];
        let r = compute_residuals(
            &matches,
            &source,
            &target,
            &RigidTransform::identity(),
            ResidualMode::PointToPlane,
        )
        .unwrap();
        assert_relative_eq!(r.values()[(0, 0)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn plane_mode_requires_normals() {
        let cloud = rand_cloud(5, 10);
        let matches = [Correspondence { source_index: 0, target_index: 0, distance: 0.0 }];
        let err = compute_residuals(
            &matches,
            &cloud,
            &cloud,
            &RigidTransform::identity(),
            ResidualMode::PointToPlane,
        );
        assert!(matches!(err, Err(Error::MissingNormals)));
    }

    #[test]
    fn normalization_divides_by_scale() {
        let values = nalgebra::DMatrix::from_row_slice(1, 1, &[0.04]);
        let scale = nalgebra::DMatrix::from_row_slice(1, 1, &[4.0]);
        let r = ResidualMatrix::new(values, scale, ResidualMode::Norm).unwrap();
        let n = normalize_residuals(&r);
        assert_relative_eq!(n.values()[(0, 0)], 0.01, epsilon = 1e-15);
        assert_eq!(n.scale()[(0, 0)], 1.0);
    }

    #[test]
    fn noise_scales_combine_by_summed_variance() {
        let source = rand_cloud(1, 11).with_noise_scale(vec![3.0]).unwrap();
        let target = rand_cloud(1, 12).with_noise_scale(vec![4.0]).unwrap();
        let m = Correspondence { source_index: 0, target_index: 0, distance: 0.0 };
        assert_relative_eq!(combined_scale(&source, &target, &m), 5.0, epsilon = 1e-12);
    }
}
