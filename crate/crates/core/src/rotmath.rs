//! Rotation representations, conversions and geodesic distance.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector4};

use crate::error::{GidError, Result};

pub use nalgebra::Vector3 as Vec3;

#[cfg(test)]
const NORM_TOL: f64 = 1e-9;
/// Largest deviation from orthonormality accepted when converting a matrix.
pub const ORTHO_TOL: f64 = 1e-6;

/// Unit quaternion with `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes the given components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(GidError::InvalidInput(format!(
                "non-finite quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-12 {
            return Err(GidError::InvalidInput("zero-length quaternion".into()));
        }
        Ok(Self::from_normalized(w / n, x / n, y / n, z / n))
    }

    /// Keeps the components as given after checking their norm is within `tol` of
    /// one, so values read back from disk are not renormalized.
    pub fn from_unit(w: f64, x: f64, y: f64, z: f64, tol: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !((n - 1.0).abs() <= tol) {
            return Err(GidError::InvalidInput(format!(
                "quaternion ({w}, {x}, {y}, {z}) has norm {n}"
            )));
        }
        Ok(Self::from_normalized(w, x, y, z))
    }

    /// Components must already be unit length.
    fn from_normalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            UnitQuaternion { w: -w, x: -x, y: -y, z: -z }
        } else {
            UnitQuaternion { w, x, y, z }
        }
    }

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !n.is_finite() || !angle.is_finite() {
            return Err(GidError::InvalidInput("non-finite axis-angle".into()));
        }
        if n < 1e-15 || angle == 0.0 {
            return Ok(Self::IDENTITY);
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let a = axis / n;
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    /// `[w, x, y, z]`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn inverse(&self) -> Self {
        Self::from_normalized(self.w, -self.x, -self.y, -self.z)
    }

    /// Idempotent; renormalizes only when the norm has drifted.
    pub fn canonicalize(&self) -> Self {
        let n = self.norm();
        if (n - 1.0).abs() <= 1e-12 {
            return Self::from_normalized(self.w, self.x, self.y, self.z);
        }
        Self::from_normalized(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn rotate(&self, v: Vector3<f64>) -> Vector3<f64> {
        quat_to_matrix(self).0 * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        2.0 * s.atan2(self.w)
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        quat_to_matrix(self)
    }

    pub fn to_axis_angle(&self) -> AxisAngle {
        let s = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        let v = Vector3::new(self.x, self.y, self.z);
        if s < 1e-12 {
            // angle/sin(angle/2) -> 2/w as the angle vanishes
            return AxisAngle(v * (2.0 / self.w));
        }
        AxisAngle(v * (2.0 * s.atan2(self.w) / s))
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, r: UnitQuaternion) -> UnitQuaternion {
        let l = self;
        let w = l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z;
        let x = l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y;
        let y = l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x;
        let z = l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Self::from_normalized(w / n, x / n, y / n, z / n)
    }
}

/// Proper 3×3 rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates orthonormality and determinant within [`ORTHO_TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GidError::InvalidInput("non-finite rotation matrix".into()));
        }
        let err = (m * m.transpose() - Matrix3::identity()).amax();
        let det = m.determinant();
        if err > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(GidError::InvalidInput(format!(
                "not a rotation: orthonormality error {err:.3e}, det {det:.6}"
            )));
        }
        Ok(RotationMatrix(m))
    }

    /// For matrices already known to be rotations (products of rotations etc.).
    #[cfg(test)]
    pub(crate) fn new_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(GidError::InvalidInput(format!("expected 9 values, got {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    /// Nearest rotation in the Frobenius sense (SVD projection onto SO(3)).
    pub fn project(m: &Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GidError::InvalidInput("non-finite matrix".into()));
        }
        let svd = m.svd(true, true);
        let (u, vt) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(GidError::InvalidInput("SVD failed".into())),
        };
        let d = (u * vt).determinant().signum();
        let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        Ok(RotationMatrix(u * fix * vt))
    }

    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn apply(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn to_quat(&self) -> UnitQuaternion {
        quat_from_rotation(&self.0)
    }
}

impl Mul for RotationMatrix {
    type Output = RotationMatrix;

    fn mul(self, r: RotationMatrix) -> RotationMatrix {
        RotationMatrix(self.0 * r.0)
    }
}

/// Rotation vector: direction is the axis, magnitude the angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisAngle(pub Vector3<f64>);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        AxisAngle(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.0
    }

    /// Wraps the angle into `[0, π]`, flipping the axis when needed.
    pub fn canonicalize(&self) -> Self {
        let n = self.0.norm();
        if n <= PI || !n.is_finite() {
            return *self;
        }
        let axis = self.0 / n;
        let mut a = n.rem_euclid(2.0 * PI);
        if a > PI {
            a -= 2.0 * PI;
        }
        // a negative angle about `axis` is |a| about `-axis`
        AxisAngle(axis * a)
    }

    pub fn to_matrix(&self) -> RotationMatrix {
        axis_angle_to_matrix(self)
    }

    pub fn to_quat(&self) -> UnitQuaternion {
        let n = self.0.norm();
        if n < 1e-15 {
            return UnitQuaternion::IDENTITY;
        }
        let (s, c) = (n / 2.0).sin_cos();
        let a = self.0 / n;
        UnitQuaternion::from_normalized(c, s * a.x, s * a.y, s * a.z)
    }
}

pub fn quat_to_matrix(q: &UnitQuaternion) -> RotationMatrix {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    RotationMatrix(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

// Shepperd's method: pick the largest of w², x², y², z² to divide by.
fn quat_from_rotation(m: &Matrix3<f64>) -> UnitQuaternion {
    let tr = m.trace();
    let (w, x, y, z);
    if tr > m[(0, 0)] && tr > m[(1, 1)] && tr > m[(2, 2)] {
        let s = (1.0 + tr).sqrt() * 2.0;
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    let n = (w * w + x * x + y * y + z * z).sqrt();
    UnitQuaternion::from_normalized(w / n, x / n, y / n, z / n)
}

/// Errors if `r` deviates from orthonormality by more than [`ORTHO_TOL`].
pub fn matrix_to_quat(r: &RotationMatrix) -> Result<UnitQuaternion> {
    RotationMatrix::new(r.0)?;
    Ok(quat_from_rotation(&r.0))
}

/// Angle of `Raᵀ Rb` in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (tr − 1)/2` clamped to `[−1, 1]`
/// and `sin θ` from the skew part, which equals the arccos form for rotations but
/// keeps full precision near 0°.
pub fn geodesic_angle_deg(ra: &RotationMatrix, rb: &RotationMatrix) -> f64 {
    let r = ra.0.transpose() * rb.0;
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    s.atan2(c).to_degrees().clamp(0.0, 180.0)
}

pub fn axis_angle_to_matrix(v: &AxisAngle) -> RotationMatrix {
    let t = v.0.norm();
    let k = Matrix3::new(0.0, -v.0.z, v.0.y, v.0.z, 0.0, -v.0.x, -v.0.y, v.0.x, 0.0);
    let (a, b) = if t < 1e-4 {
        let t2 = t * t;
        (1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0)
    } else {
        (t.sin() / t, (1.0 - t.cos()) / (t * t))
    };
    RotationMatrix(Matrix3::identity() + k * a + k * k * b)
}

/// Canonical rotation vector with angle in `[0, π]`; zero for the identity.
pub fn matrix_to_axis_angle(r: &RotationMatrix) -> AxisAngle {
    quat_from_rotation(&r.0).to_axis_angle()
}

/// Spherical interpolation along the shorter arc.
pub fn slerp(q0: &UnitQuaternion, q1: &UnitQuaternion, t: f64) -> UnitQuaternion {
    let mut d = q0.dot(q1);
    let mut b = q1.to_array();
    if d < 0.0 {
        d = -d;
        b = b.map(|v| -v);
    }
    let a = q0.to_array();
    let (ka, kb) = if d > 1.0 - 1e-10 {
        (1.0 - t, t)
    } else {
        let th = d.min(1.0).acos();
        let s = th.sin();
        (((1.0 - t) * th).sin() / s, (t * th).sin() / s)
    };
    let r: Vec<f64> = (0..4).map(|i| ka * a[i] + kb * b[i]).collect();
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    UnitQuaternion::from_normalized(r[0] / n, r[1] / n, r[2] / n, r[3] / n)
}

/// Chordal L2 mean: the principal eigenvector of `Σ q qᵀ`.
pub fn chordal_mean(qs: &[UnitQuaternion]) -> Result<UnitQuaternion> {
    if qs.is_empty() {
        return Err(GidError::InsufficientData("mean of zero orientations".into()));
    }
    let mut acc = Matrix4::<f64>::zeros();
    for q in qs {
        let v = Vector4::from(q.to_array());
        acc += v * v.transpose();
    }
    let eig = SymmetricEigen::new(acc);
    let (i, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let v = eig.eigenvectors.column(i);
    UnitQuaternion::new(v[0], v[1], v[2], v[3])
}

/// Quaternion angle between two orientations in degrees: `2·acos|q₀·q₁|`.
pub fn quat_angle_deg(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    (2.0 * a.dot(b).abs().min(1.0).acos()).to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion {
        let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        UnitQuaternion::new(v[0], v[1], v[2], v[3]).unwrap()
    }

    fn max_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn quarter_turn_about_z() {
        let h = 0.5f64.sqrt();
        let m = quat_to_matrix(&UnitQuaternion::new(h, 0.0, 0.0, h).unwrap());
        let col = m.matrix().column(0);
        assert!((col - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-15);
        assert_eq!(quat_to_matrix(&UnitQuaternion::IDENTITY), RotationMatrix::identity());
    }

    #[test]
    fn random_quaternions_give_orthonormal_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = random_quat(&mut rng).to_matrix();
            let e = (m.0 * m.0.transpose() - Matrix3::identity()).amax();
            assert!(e < 1e-8);
            assert!((m.0.determinant() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn matrix_to_quat_cases() {
        let q = matrix_to_quat(&RotationMatrix::identity()).unwrap();
        assert_eq!(q.to_array(), [1.0, 0.0, 0.0, 0.0]);
        let q = matrix_to_quat(&RotationMatrix::rot_x(PI)).unwrap();
        let a = q.to_array();
        assert!(a[0].abs() < 1e-15 && (a[1].abs() - 1.0).abs() < 1e-15);
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.01);
        assert!(matches!(
            matrix_to_quat(&RotationMatrix::new_unchecked(bad)),
            Err(GidError::InvalidInput(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let m = random_quat(&mut rng).to_matrix();
            let back = matrix_to_quat(&m).unwrap().to_matrix();
            assert!(max_diff(&m.0, &back.0) < 1e-7);
            assert!(matrix_to_quat(&m).unwrap().w() >= 0.0);
        }
    }

    #[test]
    fn non_finite_quaternion_rejected() {
        assert!(UnitQuaternion::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
        assert!(UnitQuaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn geodesic_cases() {
        let r = RotationMatrix::rot_y(0.4) * RotationMatrix::rot_x(1.1);
        assert_eq!(geodesic_angle_deg(&r, &r), 0.0);
        let d = geodesic_angle_deg(&RotationMatrix::identity(), &RotationMatrix::rot_z(PI / 2.0));
        assert!((d - 90.0).abs() < 1e-12);
        let th = 37f64.to_radians();
        let rb = RotationMatrix::rot_x(th) * RotationMatrix::rot_y(0.0);
        let got = geodesic_angle_deg(&RotationMatrix::identity(), &rb);
        let oracle = quat_angle_deg(&UnitQuaternion::IDENTITY, &rb.to_quat());
        assert!((got - 37.0).abs() < 1e-9);
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn axis_angle_cases() {
        assert_eq!(axis_angle_to_matrix(&AxisAngle::zero()), RotationMatrix::identity());
        assert_eq!(matrix_to_axis_angle(&RotationMatrix::identity()), AxisAngle::zero());
        let m = axis_angle_to_matrix(&AxisAngle::new(0.0, 0.0, PI / 2.0));
        assert!(max_diff(&m.0, &RotationMatrix::rot_z(PI / 2.0).0) < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let dir: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let ang = rng.random_range(1e-6..PI - 0.01);
            let v = Vector3::from(dir).normalize() * ang;
            let back = matrix_to_axis_angle(&axis_angle_to_matrix(&AxisAngle(v)));
            assert!((back.0 - v).amax() < 1e-7, "{v:?} {back:?}");
        }
    }

    #[test]
    fn slerp_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_quat(&mut rng);
        for t in [0.0, 0.3, 1.0] {
            assert!(quat_angle_deg(&slerp(&q, &q, t), &q) < 1e-6);
        }
        let half = slerp(&UnitQuaternion::IDENTITY, &RotationMatrix::rot_z(PI / 2.0).to_quat(), 0.5);
        let want = RotationMatrix::rot_z(PI / 4.0);
        assert!(max_diff(&half.to_matrix().0, &want.0) < 1e-12);
        let (q0, q1) = (random_quat(&mut rng), random_quat(&mut rng));
        let total = geodesic_angle_deg(&q0.to_matrix(), &q1.to_matrix());
        for _ in 0..10 {
            let t: f64 = rng.random();
            let d = geodesic_angle_deg(&slerp(&q0, &q1, t).to_matrix(), &q0.to_matrix());
            assert!((d - t * total).abs() < 1e-7, "{d} vs {}", t * total);
        }
        // antipodal representation of the same rotation
        let neg = UnitQuaternion { w: -q1.w, x: -q1.x, y: -q1.y, z: -q1.z };
        let a = slerp(&q0, &neg, 0.4).to_matrix();
        let b = slerp(&q0, &q1, 0.4).to_matrix();
        assert!(max_diff(&a.0, &b.0) < 1e-12);
    }

    #[test]
    fn chordal_mean_of_symmetric_spread() {
        let base = RotationMatrix::rot_y(0.7).to_quat();
        let qs: Vec<_> = [0.05, -0.05]
            .iter()
            .map(|&a| base * UnitQuaternion::from_axis_angle(Vector3::x(), a).unwrap())
            .collect();
        let m = chordal_mean(&qs).unwrap();
        assert!(quat_angle_deg(&m, &base) < 1e-9);
        assert!(chordal_mean(&[]).is_err());
    }

    #[test]
    fn projection_recovers_rotation() {
        let r = RotationMatrix::rot_z(0.3) * RotationMatrix::rot_x(-1.2);
        let noisy = r.0 * 1.05 + Matrix3::from_element(0.01);
        let p = RotationMatrix::project(&noisy).unwrap();
        assert!(RotationMatrix::new(p.0).is_ok());
        assert!(geodesic_angle_deg(&p, &r) < 2.0);
    }

    #[test]
    fn canonical_axis_angle_wraps() {
        let v = AxisAngle::new(0.0, 0.0, 1.5 * PI).canonicalize();
        assert!((v.0 - Vector3::new(0.0, 0.0, -0.5 * PI)).amax() < 1e-12);
        let m1 = axis_angle_to_matrix(&v);
        let m2 = axis_angle_to_matrix(&AxisAngle::new(0.0, 0.0, 1.5 * PI));
        assert!(max_diff(&m1.0, &m2.0) < 1e-12);
    }

    fn quat_strategy() -> impl Strategy<Value = UnitQuaternion> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |a| a.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|a| UnitQuaternion::new(a[0], a[1], a[2], a[3]).unwrap())
    }

    proptest! {
        #[test]
        fn constructor_normalizes_and_canonicalizes(q in quat_strategy()) {
            prop_assert!((q.norm() - 1.0).abs() < NORM_TOL);
            prop_assert!(q.w() >= 0.0);
            prop_assert_eq!(q.canonicalize().canonicalize(), q.canonicalize());
        }

        #[test]
        fn geodesic_symmetric_and_bounded(a in quat_strategy(), b in quat_strategy()) {
            let (ra, rb) = (a.to_matrix(), b.to_matrix());
            let d1 = geodesic_angle_deg(&ra, &rb);
            let d2 = geodesic_angle_deg(&rb, &ra);
            prop_assert!((d1 - d2).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&d1));
            prop_assert!((d1 - quat_angle_deg(&a, &b)).abs() < 1e-5);
        }

        #[test]
        fn quaternion_round_trip(q in quat_strategy()) {
            let back = matrix_to_quat(&q.to_matrix()).unwrap();
            prop_assert!(quat_angle_deg(&q, &back) < 1e-5);
            prop_assert!((q.dot(&back).abs() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn axis_angle_canonicalization_idempotent(x in -10.0f64..10.0, y in -10.0f64..10.0, z in -10.0f64..10.0) {
            let c = AxisAngle::new(x, y, z).canonicalize();
            prop_assert!(c.angle() <= PI + 1e-12);
            prop_assert_eq!(c.canonicalize(), c);
        }
    }
}
