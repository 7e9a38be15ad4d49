//! Rigid transforms, rotations and the point cloud container.
//!
//! Conventions: right-handed, z-up, angles in radians. A [`RigidTransform`]
//! maps points from its source frame into its target frame, `p' = R p + t`.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};

/// A point in meters. Plain nalgebra vector so point arithmetic stays terse.
pub type Point3 = Vector3<f64>;

/// Tolerance on `|det(R) - 1|` above which a rotation is re-orthonormalized.
pub const DET_TOLERANCE: f64 = 1e-9;

/// Element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn from_rotation(r: Matrix3<f64>) -> Self {
        Self::new(r, Vector3::zeros())
    }

    /// Rotation about `axis` (need not be normalized) by `angle`, no translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation(axis_angle_matrix(axis, angle))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = self.rotation * other.rotation;
        let out = RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        };
        if (rotation.determinant() - 1.0).abs() > DET_TOLERANCE {
            out.orthonormalized()
        } else {
            out
        }
    }

    /// Exact inverse: `(Rᵀ, -Rᵀ t)`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Projects the rotation back onto SO(3) (polar decomposition).
    pub fn orthonormalized(&self) -> RigidTransform {
        RigidTransform {
            rotation: orthonormalize(&self.rotation),
            translation: self.translation,
        }
    }

    /// True when the rotation is in SO(3) within `tol` (orthogonality and det).
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        ortho <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle of this transform's rotation, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Largest absolute elementwise difference of the 4×4 matrices.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.to_matrix() - other.to_matrix()).abs().max()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl Mul<&RigidTransform> for &RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// Rodrigues' formula.
pub fn axis_angle_matrix(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let k = axis / n;
    let kx = skew(&k);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Exponential map of so(3): rotation vector to matrix.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let wx = skew(w);
    if theta2 < 1e-16 {
        // Second-order Taylor expansion keeps this exact to machine precision.
        return Matrix3::identity() + wx + wx * wx * 0.5;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + wx * (theta.sin() / theta) + wx * wx * ((1.0 - theta.cos()) / theta2)
}

/// Logarithm of SO(3): matrix to rotation vector with norm in `[0, π]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let vee = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        // sin θ / θ ≈ 1 - θ²/6
        return vee * 0.5 * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // Near π the antisymmetric part vanishes; recover the axis from R + I.
        let b = (r + Matrix3::identity()) * 0.5;
        let (mut best, mut col) = (0, b[(0, 0)]);
        for i in 1..3 {
            if b[(i, i)] > col {
                best = i;
                col = b[(i, i)];
            }
        }
        let mut axis: Vector3<f64> = b.column(best).into();
        axis /= axis.norm();
        // Resolve the sign with whatever antisymmetric part is left.
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        out = u2 * vt;
    }
    out
}

/// `arccos((tr(R) - 1) / 2)` with the argument clamped to `[-1, 1]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = w.norm_squared();
    let wx = skew(w);
    let (a, b) = if t2 < 1e-10 {
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t = t2.sqrt();
        ((1.0 - t.cos()) / t2, (t - t.sin()) / (t2 * t))
    };
    Matrix3::identity() + wx * a + wx * wx * b
}

pub fn so3_left_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = w.norm_squared();
    let wx = skew(w);
    let c = if t2 < 1e-10 {
        1.0 / 12.0 + t2 / 720.0
    } else {
        let t = t2.sqrt();
        1.0 / t2 - (1.0 + t.cos()) / (2.0 * t * t.sin())
    };
    Matrix3::identity() - wx * 0.5 + wx * wx * c
}

/// Coupling block `Q(ρ, φ)` of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = phi.norm_squared();
    let (p, r) = (skew(phi), skew(rho));
    let (c1, c2, c3) = if t2 < 1e-8 {
        (1.0 / 6.0 - t2 / 120.0, 1.0 / 24.0 - t2 / 720.0, 1.0 / 120.0 - t2 / 2520.0)
    } else {
        let t = t2.sqrt();
        let (s, c) = t.sin_cos();
        (
            (t - s) / (t2 * t),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * t - 3.0 * s + t * c) / (2.0 * t2 * t2 * t),
        )
    };
    r * 0.5 + (p * r + r * p + p * r * p) * c1 + (p * p * r + r * p * p - p * r * p * 3.0) * c2
        + (p * r * p * p + p * p * r * p) * c3
}

/// Exponential map of se(3) with `ξ = (ρ, φ)`, translation part first.
pub fn se3_exp(xi: &Vector6<f64>) -> RigidTransform {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    RigidTransform::new(so3_exp(&phi), so3_left_jacobian(&phi) * rho)
}

pub fn se3_log(t: &RigidTransform) -> Vector6<f64> {
    let phi = so3_log(&t.rotation);
    let rho = so3_left_jacobian_inv(&phi) * t.translation;
    let mut out = Vector6::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&rho);
    out.fixed_rows_mut::<3>(3).copy_from(&phi);
    out
}

/// Adjoint of `T` acting on `(ρ, φ)` twists.
pub fn se3_adjoint(t: &RigidTransform) -> Matrix6<f64> {
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rotation);
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(skew(&t.translation) * t.rotation));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&t.rotation);
    a
}

/// Inverse of the SE(3) left Jacobian.
pub fn se3_left_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let ji = so3_left_jacobian_inv(&phi);
    let q = se3_q(&rho, &phi);
    let mut a = Matrix6::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    a
}

/// Inverse of the SE(3) right Jacobian, `J_r⁻¹(ξ) = J_l⁻¹(-ξ)`. First-order
/// behavior: `log(exp(ξ) exp(δ)) ≈ ξ + J_r⁻¹(ξ) δ`.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-xi))
}

/// Unit quaternion `w + xi + yj + zk`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    /// Normalizes the given components. Panics on the zero quaternion.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(n > 0.0, "zero quaternion");
        Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, o: &UnitQuaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd's method; the result has `w >= 0`.
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        let tr = r.trace();
        let (w, x, y, z);
        if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let q = Self::new(w, x, y, z);
        if q.w < 0.0 {
            Self {
                w: -q.w,
                x: -q.x,
                y: -q.y,
                z: -q.z,
            }
        } else {
            q
        }
    }
}

/// Timestamped point set of one sensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    /// Unit normals, one per point when present.
    pub normals: Option<Vec<Vector3<f64>>>,
    /// Surface variation `λ₀ / (λ₀ + λ₁ + λ₂)`, one per point when present.
    pub curvature: Option<Vec<f64>>,
    pub sensor_id: usize,
    /// Seconds.
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, sensor_id: usize, timestamp: f64) -> Self {
        Self {
            points,
            normals: None,
            curvature: None,
            sensor_id,
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same metadata, different points, no attributes.
    pub fn with_points(&self, points: Vec<Point3>) -> Self {
        Self::new(points, self.sensor_id, self.timestamp)
    }

    /// Keeps the entries (and their attributes) whose mask value is true.
    pub fn select(&self, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), self.points.len());
        let pick = |i: usize| mask[i];
        Self {
            points: filter_by(&self.points, pick),
            normals: self.normals.as_ref().map(|n| filter_by(n, pick)),
            curvature: self.curvature.as_ref().map(|c| filter_by(c, pick)),
            sensor_id: self.sensor_id,
            timestamp: self.timestamp,
        }
    }

    /// Keeps the given indices, in the given order.
    pub fn select_indices(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|n| idx.iter().map(|&i| n[i]).collect()),
            curvature: self.curvature.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            sensor_id: self.sensor_id,
            timestamp: self.timestamp,
        }
    }

    /// Checks the container invariants (attribute lengths, unit normals, finite points).
    pub fn check(&self) -> bool {
        let n = self.points.len();
        let pts = self.points.iter().all(|p| p.iter().all(|v| v.is_finite()));
        let normals = self.normals.as_ref().is_none_or(|ns| {
            ns.len() == n && ns.iter().all(|v| (v.norm() - 1.0).abs() <= 1e-6)
        });
        let curv = self
            .curvature
            .as_ref()
            .is_none_or(|c| c.len() == n && c.iter().all(|&v| v >= 0.0));
        pts && normals && curv
    }

    /// Axis-aligned bounds, `None` when empty.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

fn filter_by<T: Copy>(v: &[T], pick: impl Fn(usize) -> bool) -> Vec<T> {
    v.iter()
        .enumerate()
        .filter(|(i, _)| pick(*i))
        .map(|(_, x)| *x)
        .collect()
}

/// Maps every point `p' = R p + t` and every normal `n' = R n`.
pub fn transform_cloud(t: &RigidTransform, c: &PointCloud) -> PointCloud {
    PointCloud {
        points: c.points.iter().map(|p| t.transform_point(p)).collect(),
        normals: c
            .normals
            .as_ref()
            .map(|ns| ns.iter().map(|n| t.transform_vector(n)).collect()),
        curvature: c.curvature.clone(),
        sensor_id: c.sensor_id,
        timestamp: c.timestamp,
    }
}

pub fn deg(rad: f64) -> f64 {
    rad.to_degrees()
}

pub fn rad(deg: f64) -> f64 {
    deg.to_radians()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-3.0..3.0);
        let t = Vector3::new(
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-50.0..50.0),
            rng.gen_range(-5.0..5.0),
        );
        RigidTransform::new(axis_angle_matrix(&axis, angle), t)
    }

    #[test]
    fn se3_exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let xi = Vector6::from_fn(|_, _| rng.gen_range(-1.5..1.5));
            let back = se3_log(&se3_exp(&xi));
            assert!((back - xi).norm() < 1e-10);
        }
        let tiny = Vector6::new(1e-3, -2e-3, 5e-4, 1e-9, -3e-9, 2e-9);
        assert!((se3_log(&se3_exp(&tiny)) - tiny).norm() < 1e-15);
    }

    #[test]
    fn right_jacobian_inverse_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for scale in [1e-5, 0.3, 1.2] {
            let xi = Vector6::from_fn(|_, _| rng.gen_range(-scale..scale));
            let jr = se3_right_jacobian_inv(&xi);
            let x = se3_exp(&xi);
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Vector6::zeros();
                d[k] = h;
                let plus = se3_log(&x.compose(&se3_exp(&d)));
                let minus = se3_log(&x.compose(&se3_exp(&(-d))));
                let col = (plus - minus) / (2.0 * h);
                assert!((col - jr.column(k)).norm() < 1e-7, "scale {scale} col {k}");
            }
        }
    }

    #[test]
    fn adjoint_moves_twists_across() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = random_transform(&mut rng);
        let xi = Vector6::new(0.1, -0.2, 0.3, 0.05, 0.02, -0.04);
        let lhs = t.compose(&se3_exp(&xi));
        let rhs = se3_exp(&(se3_adjoint(&t) * xi)).compose(&t);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng);
        assert!(RigidTransform::identity().compose(&t).max_abs_diff(&t) < 1e-12);
        assert!(t.compose(&t.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn compose_same_axis_rotations() {
        let a = RigidTransform::rot_z(rad(30.0));
        let b = RigidTransform::rot_z(rad(60.0));
        // Oracle: plain 4x4 matrix product.
        let oracle = a.to_matrix() * b.to_matrix();
        let c = a.compose(&b);
        assert!((c.to_matrix() - oracle).abs().max() < 1e-12);
        assert!(c.max_abs_diff(&RigidTransform::rot_z(rad(90.0))) < 1e-12);
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let a = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::rot_z(std::f64::consts::FRAC_PI_2);
        let p = Point3::new(1.0, 0.0, 0.0);
        let q = a.compose(&b).transform_point(&p);
        assert!((q - Point3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn invert_cases() {
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert!((t.inverse().translation - Vector3::new(-1.0, -2.0, -3.0)).norm() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            assert!(t.inverse().inverse().max_abs_diff(&t) < 1e-12);
        }
    }

    #[test]
    fn transform_cloud_round_trip_and_isometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point3> = (0..50)
            .map(|_| Point3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0.0..5.0)))
            .collect();
        let mut c = PointCloud::new(pts, 2, 1.5);
        c.normals = Some(vec![Vector3::z(); 50]);
        let same = transform_cloud(&RigidTransform::identity(), &c);
        assert_eq!(same, c);

        let t = random_transform(&mut rng);
        let back = transform_cloud(&t.inverse(), &transform_cloud(&t, &c));
        for (a, b) in back.points.iter().zip(&c.points) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(back.sensor_id, 2);
        assert_eq!(back.timestamp, 1.5);

        let shift = transform_cloud(&RigidTransform::from_translation(Vector3::new(3.0, -1.0, 2.0)), &c);
        for i in 0..10 {
            for j in 0..10 {
                let d0 = (c.points[i] - c.points[j]).norm();
                let d1 = (shift.points[i] - shift.points[j]).norm();
                assert!((d0 - d1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_angle_cases() {
        assert_eq!(rotation_angle(&Matrix3::identity()), 0.0);
        let pi = RigidTransform::rot_z(std::f64::consts::PI);
        assert!((pi.angle() - std::f64::consts::PI).abs() < 1e-12);
        let small = RigidTransform::rot_z(rad(0.115));
        assert!((deg(small.angle()) - 0.115).abs() < 1e-9);
        // Trace overshoot must not produce NaN.
        let mut over = Matrix3::identity();
        over[(0, 0)] += 1e-12;
        assert_eq!(rotation_angle(&over), 0.0);
    }

    #[test]
    fn same_axis_angles_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let a = rng.gen_range(-1.5..1.5);
            let b = rng.gen_range(-1.5..1.5);
            let r = axis_angle_matrix(&axis, a) * axis_angle_matrix(&axis, b);
            let expect = (a + b).abs();
            let expect = if expect > std::f64::consts::PI { 2.0 * std::f64::consts::PI - expect } else { expect };
            assert!((rotation_angle(&r) - expect).abs() < 1e-7);
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = random_transform(&mut rng);
            let q = UnitQuaternion::from_matrix(&t.rotation);
            assert!((q.norm() - 1.0).abs() < 1e-12);
            let r = q.to_matrix();
            assert!((r - t.rotation).abs().max() < 1e-9);
            assert!((rotation_angle(&r) - t.angle()).abs() < 1e-9);
            assert!(RigidTransform::from_rotation(r).is_valid(1e-9));
        }
    }

    #[test]
    fn long_composition_chains_stay_in_so3() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut acc = RigidTransform::identity();
        for _ in 0..1000 {
            acc = acc.compose(&random_transform(&mut rng));
            assert!((acc.rotation.determinant() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn so3_exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let w = Vector3::new(rng.gen_range(-1.8..1.8), rng.gen_range(-1.8..1.8), rng.gen_range(-1.8..1.8));
            let back = so3_log(&so3_exp(&w));
            assert!((back - w).norm() < 1e-9, "{w} vs {back}");
        }
        let w = Vector3::new(0.0, 0.0, std::f64::consts::PI);
        assert!((so3_log(&so3_exp(&w)).norm() - std::f64::consts::PI).abs() < 1e-9);
        let tiny = Vector3::new(1e-9, -2e-9, 3e-10);
        assert!((so3_log(&so3_exp(&tiny)) - tiny).norm() < 1e-18);
    }

    #[test]
    fn select_keeps_attributes_aligned() {
        let mut c = PointCloud::new(vec![Point3::zeros(), Point3::x(), Point3::y()], 0, 0.0);
        c.curvature = Some(vec![0.0, 0.1, 0.2]);
        let s = c.select(&[true, false, true]);
        assert_eq!(s.points, vec![Point3::zeros(), Point3::y()]);
        assert_eq!(s.curvature, Some(vec![0.0, 0.2]));
        assert!(s.check());
    }
}
