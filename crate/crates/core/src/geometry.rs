//! Camera and mirror types plus the closed-form reflective epipolar relations.
//!
//! Conventions: the real camera sits at the origin looking down +z. A mirror
//! is the plane `{p : n·p = d}` with unit normal `n` and `d > 0`, so `n`
//! points from the camera towards the mirror and the virtual camera centre
//! is `2dn`. The virtual camera frame is reached by `X ↦ D(RX + t)` with
//! `D = diag(-1, 1, 1)`.

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    #[serde(default)]
    pub skew: T,
}

impl<T: Scalar> Intrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, skew: T::zero() };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.skew]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidIntrinsics("non-finite entry".into()));
        }
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx.as_f64(),
                self.fy.as_f64()
            )));
        }
        Ok(())
    }

    /// The 3×3 calibration matrix `K`.
    pub fn matrix(&self) -> Matrix3<T> {
        let (z, o) = (T::zero(), T::one());
        Matrix3::new(self.fx, self.skew, self.cx, z, self.fy, self.cy, z, z, o)
    }

    /// Closed-form inverse of `K`.
    pub fn inverse(&self) -> Result<Matrix3<T>> {
        if self.fx == T::zero() || self.fy == T::zero() {
            return Err(Error::SingularIntrinsics {
                fx: self.fx.as_f64(),
                fy: self.fy.as_f64(),
            });
        }
        let (z, o) = (T::zero(), T::one());
        let ifx = o / self.fx;
        let ify = o / self.fy;
        let s = -self.skew * ifx * ify;
        let tx = (self.skew * self.cy - self.cx * self.fy) * ifx * ify;
        let ty = -self.cy * ify;
        Ok(Matrix3::new(ifx, s, tx, z, ify, ty, z, z, o))
    }

    pub fn cast<U: Scalar>(&self) -> Intrinsics<U> {
        Intrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            skew: U::lit(self.skew.as_f64()),
        }
    }
}

/// Planar mirror `{p : n·p = d}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MirrorRepr<T>", into = "MirrorRepr<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct MirrorPlane<T: Scalar> {
    normal: Vector3<T>,
    distance: T,
}

#[derive(Serialize, Deserialize)]
struct MirrorRepr<T> {
    n: [T; 3],
    d: T,
}

impl<T: Scalar> TryFrom<MirrorRepr<T>> for MirrorPlane<T> {
    type Error = Error;

    fn try_from(r: MirrorRepr<T>) -> Result<Self> {
        MirrorPlane::new(Vector3::new(r.n[0], r.n[1], r.n[2]), r.d)
    }
}

impl<T: Scalar> From<MirrorPlane<T>> for MirrorRepr<T> {
    fn from(m: MirrorPlane<T>) -> Self {
        MirrorRepr { n: [m.normal.x, m.normal.y, m.normal.z], d: m.distance }
    }
}

impl<T: Scalar> MirrorPlane<T> {
    /// Builds a mirror from any non-zero normal (rescaled to unit length)
    /// and a strictly positive camera-to-plane distance.
    pub fn new(normal: Vector3<T>, distance: T) -> Result<Self> {
        let len = normal.norm();
        if !len.is_finite() || len == T::zero() {
            return Err(Error::InvalidMirror("normal must be non-zero and finite".into()));
        }
        if !distance.is_finite() || distance <= T::zero() {
            return Err(Error::InvalidMirror(format!(
                "distance must be positive, got {}",
                distance.as_f64()
            )));
        }
        Ok(Self { normal: normal / len, distance })
    }

    pub fn normal(&self) -> &Vector3<T> {
        &self.normal
    }

    pub fn distance(&self) -> T {
        self.distance
    }

    /// Position of the virtual camera centre, `2dn`.
    pub fn virtual_center(&self) -> Vector3<T> {
        self.normal * (T::lit(2.0) * self.distance)
    }

    pub fn cast<U: Scalar>(&self) -> MirrorPlane<U> {
        MirrorPlane {
            normal: self.normal.map(|v| U::lit(v.as_f64())),
            distance: U::lit(self.distance.as_f64()),
        }
    }
}

/// Real-to-virtual camera transform `X ↦ D(RX + t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "ExtrinsicsRepr<T>", into = "ExtrinsicsRepr<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct VirtualExtrinsics<T: Scalar> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsRepr<T> {
    #[serde(rename = "R")]
    rotation: [[T; 3]; 3],
    t: [T; 3],
}

impl<T: Scalar> From<ExtrinsicsRepr<T>> for VirtualExtrinsics<T> {
    fn from(r: ExtrinsicsRepr<T>) -> Self {
        Self {
            rotation: rows_to_matrix(&r.rotation),
            translation: Vector3::new(r.t[0], r.t[1], r.t[2]),
        }
    }
}

impl<T: Scalar> From<VirtualExtrinsics<T>> for ExtrinsicsRepr<T> {
    fn from(e: VirtualExtrinsics<T>) -> Self {
        ExtrinsicsRepr {
            rotation: matrix_to_rows(&e.rotation),
            t: [e.translation.x, e.translation.y, e.translation.z],
        }
    }
}

/// The fixed handedness flip `D = diag(-1, 1, 1)`.
pub fn reflection<T: Scalar>() -> Matrix3<T> {
    Matrix3::from_diagonal(&Vector3::new(-T::one(), T::one(), T::one()))
}

impl<T: Scalar> VirtualExtrinsics<T> {
    /// `DR`, the linear part of the composed map. Always improper.
    pub fn linear_part(&self) -> Matrix3<T> {
        reflection::<T>() * self.rotation
    }

    /// `Dt`, the virtual camera's translation after the handedness flip.
    pub fn flipped_translation(&self) -> Vector3<T> {
        reflection::<T>() * self.translation
    }

    /// Maps a point from the real camera frame into the virtual camera frame.
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        reflection::<T>() * (self.rotation * p + self.translation)
    }

    /// `[Dt]× DR`.
    pub fn essential(&self) -> Matrix3<T> {
        skew(&self.flipped_translation()) * self.linear_part()
    }

    /// Checks `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_proper(&self, tol: T) -> bool {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        err <= tol && (self.rotation.determinant() - T::one()).abs() <= tol
    }

    /// Recovers the mirror that induces these extrinsics (scale as stored).
    pub fn mirror_plane(&self) -> Result<MirrorPlane<T>> {
        let c = self.flipped_translation();
        MirrorPlane::new(c, c.norm() / T::lit(2.0))
    }

    /// Rescales the translation to unit length.
    pub fn with_unit_translation(&self) -> Result<Self> {
        let n = self.translation.norm();
        if n == T::zero() {
            return Err(Error::ZeroTranslation);
        }
        Ok(Self { rotation: self.rotation, translation: self.translation / n })
    }

    pub fn cast<U: Scalar>(&self) -> VirtualExtrinsics<U> {
        VirtualExtrinsics {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

/// Skew-symmetric, rank-2 reflective essential matrix (scale-free).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectiveEssential<T: Scalar>(pub Matrix3<T>);

/// Skew-symmetric reflective fundamental matrix (scale-free).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectiveFundamental<T: Scalar>(pub Matrix3<T>);

impl<T: Scalar> ReflectiveEssential<T> {
    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    /// `(E32, E13, E21)` of the skew part.
    pub fn skew_vector(&self) -> Vector3<T> {
        skew_vector(&self.0)
    }

    pub fn normalized(&self) -> Result<Self> {
        normalize_frobenius(&self.0).map(Self).ok_or(Error::ZeroEssential)
    }
}

impl<T: Scalar> ReflectiveFundamental<T> {
    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn skew_vector(&self) -> Vector3<T> {
        skew_vector(&self.0)
    }

    /// Algebraic epipolar residual `ũ'ᵀ F ũ` of a pixel pair.
    pub fn algebraic_residual(&self, real: &Vector2<T>, mirror: &Vector2<T>) -> T {
        let x = real.push(T::one());
        let xp = mirror.push(T::one());
        xp.dot(&(self.0 * x))
    }
}

/// `[v]×`, so that `[v]× w = v × w`.
pub fn skew<T: Scalar>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn skew_vector<T: Scalar>(m: &Matrix3<T>) -> Vector3<T> {
    let h = T::lit(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * h,
        (m[(0, 2)] - m[(2, 0)]) * h,
        (m[(1, 0)] - m[(0, 1)]) * h,
    )
}

/// `(M - Mᵀ)/2`.
pub fn skew_project<T: Scalar>(m: &Matrix3<T>) -> Matrix3<T> {
    (m - m.transpose()) * T::lit(0.5)
}

pub fn normalize_frobenius<T: Scalar>(m: &Matrix3<T>) -> Option<Matrix3<T>> {
    let n = m.norm();
    if n > T::zero() && n.is_finite() {
        Some(m / n)
    } else {
        None
    }
}

/// Mirror image of `p`: `p - 2(n·p - d)n`.
pub fn reflect_point<T: Scalar>(p: &Vector3<T>, mirror: &MirrorPlane<T>) -> Vector3<T> {
    let n = mirror.normal();
    p - n * (T::lit(2.0) * (n.dot(p) - mirror.distance()))
}

/// `E = 2d[n]×`, unnormalized.
pub fn essential_from_mirror<T: Scalar>(mirror: &MirrorPlane<T>) -> ReflectiveEssential<T> {
    ReflectiveEssential(skew(mirror.normal()) * (T::lit(2.0) * mirror.distance()))
}

/// `F = K⁻ᵀ E K⁻¹`, re-projected onto skew matrices and scaled to unit norm.
pub fn fundamental_from_essential<T: Scalar>(
    e: &ReflectiveEssential<T>,
    k: &Intrinsics<T>,
) -> Result<ReflectiveFundamental<T>> {
    let kinv = k.inverse()?;
    let f = kinv.transpose() * e.0 * kinv;
    normalize_frobenius(&skew_project(&f))
        .map(ReflectiveFundamental)
        .ok_or(Error::ZeroEssential)
}

/// Rotation and translation such that `D(RX + t)` is the reflection about `mirror`.
pub fn extrinsics_from_mirror<T: Scalar>(mirror: &MirrorPlane<T>) -> VirtualExtrinsics<T> {
    let n = mirror.normal();
    let two = T::lit(2.0);
    let householder = Matrix3::identity() - n * n.transpose() * two;
    let d = reflection::<T>();
    VirtualExtrinsics {
        rotation: d * householder,
        translation: d * n * (two * mirror.distance()),
    }
}

/// `K[I | 0]`.
pub fn real_projection_matrix<T: Scalar>(k: &Intrinsics<T>) -> Matrix3x4<T> {
    let mut p = Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&k.matrix());
    p
}

/// `K[DR | Dt]`.
pub fn virtual_projection_matrix<T: Scalar>(
    k: &Intrinsics<T>,
    ext: &VirtualExtrinsics<T>,
) -> Matrix3x4<T> {
    let km = k.matrix();
    let mut p = Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(&(km * ext.linear_part()));
    p.fixed_view_mut::<3, 1>(0, 3).copy_from(&(km * ext.flipped_translation()));
    p
}

/// Pinhole projection through a 3×4 matrix; fails for non-positive depth.
pub fn project<T: Scalar>(p: &Matrix3x4<T>, x: &Vector3<T>) -> Result<Vector2<T>> {
    let h = p.fixed_view::<3, 3>(0, 0) * x + p.column(3);
    if h.z <= T::zero() {
        return Err(Error::BehindCamera { depth: h.z.as_f64() });
    }
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

pub(crate) fn rows_to_matrix<T: Scalar>(rows: &[[T; 3]; 3]) -> Matrix3<T> {
    Matrix3::from_fn(|r, c| rows[r][c])
}

pub(crate) fn matrix_to_rows<T: Scalar>(m: &Matrix3<T>) -> [[T; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}
