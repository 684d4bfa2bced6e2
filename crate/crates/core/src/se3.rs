//! Quaternions, rigid transforms, dual quaternions, weighted dual-quaternion
//! blending and the Kabsch rigid alignment solver.
//!
//! The value types are generic over [`Real`] so the same code paths serve
//! plain evaluation and reverse-mode differentiation.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ad::Real;
use crate::error::{Error, Result};

/// Blends whose real part collapses below this norm are rejected.
pub const BLEND_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3<S = f64> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> Vec3<S> {
    #[inline]
    pub fn new(x: S, y: S, z: S) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zeros() -> Self {
        Vec3::new(S::zero(), S::zero(), S::zero())
    }

    pub fn from_f64(v: Vec3<f64>) -> Self {
        Vec3::new(S::cst(v.x), S::cst(v.y), S::cst(v.z))
    }

    pub fn value(&self) -> Vec3<f64> {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }

    #[inline]
    pub fn dot(&self, o: &Self) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(&self, o: &Self) -> Self {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(&self) -> S {
        self.dot(self)
    }

    #[inline]
    pub fn norm(&self) -> S {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn scale(&self, s: S) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Vec3<f64> {
    pub const ZERO: Vec3<f64> = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn distance(&self, o: &Self) -> f64 {
        (*self - *o).norm()
    }
}

impl From<[f64; 3]> for Vec3<f64> {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl<S: Real> Add for Vec3<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Real> Sub for Vec3<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Real> Neg for Vec3<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl<S: Real> Mul<f64> for Vec3<S> {
    type Output = Self;
    #[inline]
    fn mul(self, s: f64) -> Self {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Quaternion stored as (w, x, y, z). Rotations use unit quaternions; `q`
/// and `-q` denote the same rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat<S = f64> {
    pub w: S,
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Real> Quat<S> {
    #[inline]
    pub fn new(w: S, x: S, y: S, z: S) -> Self {
        Quat { w, x, y, z }
    }

    pub fn identity() -> Self {
        Quat::new(S::one(), S::zero(), S::zero(), S::zero())
    }

    pub fn zero() -> Self {
        Quat::new(S::zero(), S::zero(), S::zero(), S::zero())
    }

    pub fn from_f64(q: Quat<f64>) -> Self {
        Quat::new(S::cst(q.w), S::cst(q.x), S::cst(q.y), S::cst(q.z))
    }

    pub fn value(&self) -> Quat<f64> {
        Quat::new(self.w.value(), self.x.value(), self.y.value(), self.z.value())
    }

    pub fn pure(v: Vec3<S>) -> Self {
        Quat::new(S::zero(), v.x, v.y, v.z)
    }

    #[inline]
    pub fn vector(&self) -> Vec3<S> {
        Vec3::new(self.x, self.y, self.z)
    }

    #[inline]
    pub fn conjugate(&self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    #[inline]
    pub fn dot(&self, o: &Self) -> S {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm(&self) -> S {
        self.dot(self).sqrt()
    }

    #[inline]
    pub fn scale(&self, s: S) -> Self {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    /// Divides by the norm. The caller guarantees a nonzero norm.
    pub fn normalize(&self) -> Self {
        let inv = S::one() / self.norm();
        self.scale(inv)
    }

    pub fn to_array(&self) -> [S; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotates `v`, assuming `self` has unit norm.
    #[inline]
    pub fn rotate(&self, v: &Vec3<S>) -> Vec3<S> {
        let u = self.vector();
        let uv = u.cross(v);
        let uuv = u.cross(&uv);
        *v + (uv.scale(self.w) + uuv) * 2.0
    }

    /// Row-major rotation matrix of a unit quaternion.
    pub fn to_matrix(&self) -> [[S; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let (xx, yy, zz) = (x * x, y * y, z * z);
        let (xy, xz, yz) = (x * y, x * z, y * z);
        let (wx, wy, wz) = (w * x, w * y, w * z);
        let one = S::one();
        [
            [one - (yy + zz) * 2.0, (xy - wz) * 2.0, (xz + wy) * 2.0],
            [(xy + wz) * 2.0, one - (xx + zz) * 2.0, (yz - wx) * 2.0],
            [(xz - wy) * 2.0, (yz + wx) * 2.0, one - (xx + yy) * 2.0],
        ]
    }
}

impl Quat<f64> {
    pub fn from_axis_angle(axis: Vec3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Quat::identity();
        }
        let a = axis * (1.0 / n);
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Angle between two rotations, insensitive to the double cover.
    pub fn angle_to(&self, o: &Self) -> f64 {
        let r = self.conjugate() * *o;
        2.0 * r.vector().norm().atan2(r.w.abs())
    }
}

impl<S: Real> Mul for Quat<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }
}

impl<S: Real> Add for Quat<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Real> Sub for Quat<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Quat::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Real> Neg for Quat<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Rigid transform `p -> R p + t` with the rotation held as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3<S = f64> {
    pub rotation: Quat<S>,
    pub translation: Vec3<S>,
}

impl<S: Real> SE3<S> {
    /// Builds a transform, renormalizing the rotation.
    pub fn new(rotation: Quat<S>, translation: Vec3<S>) -> Self {
        SE3 {
            rotation: rotation.normalize(),
            translation,
        }
    }

    /// Builds a transform from a rotation already known to be unit.
    #[inline]
    pub fn from_unit(rotation: Quat<S>, translation: Vec3<S>) -> Self {
        SE3 {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        SE3::from_unit(Quat::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3<S>) -> Self {
        SE3::from_unit(Quat::identity(), t)
    }

    pub fn from_f64(t: &SE3<f64>) -> Self {
        SE3::from_unit(Quat::from_f64(t.rotation), Vec3::from_f64(t.translation))
    }

    pub fn value(&self) -> SE3<f64> {
        SE3::from_unit(self.rotation.value(), self.translation.value())
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    #[inline]
    pub fn compose(&self, other: &Self) -> Self {
        SE3::from_unit(
            self.rotation * other.rotation,
            self.rotation.rotate(&other.translation) + self.translation,
        )
    }

    #[inline]
    pub fn apply(&self, p: &Vec3<S>) -> Vec3<S> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.conjugate();
        SE3::from_unit(inv, -inv.rotate(&self.translation))
    }

    pub fn to_dual_quat(&self) -> DualQuat<S> {
        let dual = (Quat::pure(self.translation) * self.rotation).scale(S::cst(0.5));
        DualQuat {
            real: self.rotation,
            dual,
        }
    }
}

impl SE3<f64> {
    pub fn rot_z(angle: f64) -> Self {
        SE3::from_unit(
            Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), angle),
            Vec3::ZERO,
        )
    }

    pub fn translation_xyz(x: f64, y: f64, z: f64) -> Self {
        SE3::from_translation(Vec3::new(x, y, z))
    }

    /// Rotation angle plus translation distance between two transforms.
    pub fn distance(&self, o: &Self) -> (f64, f64) {
        (
            self.rotation.angle_to(&o.rotation),
            self.translation.distance(&o.translation),
        )
    }

    pub fn approx_eq(&self, o: &Self, tol: f64) -> bool {
        let (r, t) = self.distance(o);
        r <= tol && t <= tol
    }

    /// Random rigid transform: uniform rotation, Gaussian translation with
    /// standard deviation `translation_scale`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, translation_scale: f64) -> Self {
        let q = loop {
            let q = Quat::new(
                sample_standard_normal(rng),
                sample_standard_normal(rng),
                sample_standard_normal(rng),
                sample_standard_normal(rng),
            );
            if q.norm() > 1e-6 {
                break q;
            }
        };
        SE3::new(
            q,
            Vec3::new(
                sample_standard_normal(rng) * translation_scale,
                sample_standard_normal(rng) * translation_scale,
                sample_standard_normal(rng) * translation_scale,
            ),
        )
    }
}

/// Dual quaternion `real + ε dual`. For a rigid transform the real part is
/// the unit rotation and `dual = ½ (0, t) real`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DualQuat<S = f64> {
    pub real: Quat<S>,
    pub dual: Quat<S>,
}

impl<S: Real> DualQuat<S> {
    pub fn scale(&self, s: S) -> Self {
        DualQuat {
            real: self.real.scale(s),
            dual: self.dual.scale(s),
        }
    }

    pub fn negate(&self) -> Self {
        DualQuat {
            real: -self.real,
            dual: -self.dual,
        }
    }

    /// Unit real part with the dual part projected to be orthogonal to it.
    pub fn normalize(&self) -> Result<Self> {
        let n = self.real.norm();
        if !(n.value() >= BLEND_NORM_FLOOR) {
            return Err(Error::DegenerateBlend { norm: n.value() });
        }
        let inv = S::one() / n;
        let real = self.real.scale(inv);
        let dual = self.dual.scale(inv);
        let dual = dual - real.scale(real.dot(&dual));
        Ok(DualQuat { real, dual })
    }

    pub fn to_se3(&self) -> Result<SE3<S>> {
        let d = self.normalize()?;
        let t = (d.dual * d.real.conjugate()).vector() * 2.0;
        Ok(SE3::from_unit(d.real, t))
    }
}

impl<S: Real> Add for DualQuat<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        DualQuat {
            real: self.real + o.real,
            dual: self.dual + o.dual,
        }
    }
}

/// Normalized weighted dual-quaternion blend.
///
/// Every input is first moved to the hemisphere of the input with the
/// largest absolute weight. Weights may be negative; only a collapsed blend
/// is an error.
pub fn dq_blend<S: Real>(weights: &[S], transforms: &[DualQuat<S>]) -> Result<DualQuat<S>> {
    if weights.len() != transforms.len() || weights.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "blend needs equal nonempty lists, got {} weights and {} transforms",
            weights.len(),
            transforms.len()
        )));
    }
    let mut pivot = 0;
    for (i, w) in weights.iter().enumerate() {
        if w.value().abs() > weights[pivot].value().abs() {
            pivot = i;
        }
    }
    let pivot_real = transforms[pivot].real;
    let mut acc = DualQuat {
        real: Quat::zero(),
        dual: Quat::zero(),
    };
    for (w, dq) in weights.iter().zip(transforms) {
        let w = if dq.real.dot(&pivot_real).value() < 0.0 {
            -*w
        } else {
            *w
        };
        acc = acc + dq.scale(w);
    }
    acc.normalize()
}

/// Blend expressed on rigid transforms.
pub fn se3_blend<S: Real>(weights: &[S], transforms: &[SE3<S>]) -> Result<SE3<S>> {
    let dqs: Vec<_> = transforms.iter().map(SE3::to_dual_quat).collect();
    dq_blend(weights, &dqs)?.to_se3()
}

/// Least-squares rigid transform taking `src` onto `dst`.
///
/// Uses the SVD of the cross-covariance with a determinant correction so the
/// result is never a reflection.
pub fn kabsch_se3(src: &[Vec3], dst: &[Vec3]) -> Result<SE3> {
    if src.len() != dst.len() {
        return Err(Error::ShapeMismatch(format!(
            "kabsch point lists differ: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "kabsch needs at least 3 points, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vec3::ZERO, |a, p| a + *p) * (1.0 / n);
    let cd = dst.iter().fold(Vec3::ZERO, |a, p| a + *p) * (1.0 / n);
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = *s - cs;
        let b = *d - cd;
        let a = nalgebra::Vector3::new(a.x, a.y, a.z);
        let b = nalgebra::Vector3::new(b.x, b.y, b.z);
        h += a * b.transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] < 1e-12 * sv[0] {
        return Err(Error::DegenerateGeometry(
            "rank-deficient cross-covariance".into(),
        ));
    }
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let corr = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let r = v * corr * u.transpose();
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let q = Quat::new(uq.w, uq.i, uq.j, uq.k);
    let rotation = q.normalize();
    let translation = cd - rotation.rotate(&cs);
    Ok(SE3::from_unit(rotation, translation))
}

/// One draw from the standard normal distribution.
pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
