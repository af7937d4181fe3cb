//! Linear (DLT) triangulation between the real camera and its mirror image.

use nalgebra::{Matrix3x4, Matrix4, RowVector4, SymmetricEigen, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{real_projection_matrix, virtual_projection_matrix, Intrinsics, VirtualExtrinsics};
use crate::scalar::Scalar;
use crate::tracks::{JointTracks, Joints3D};

/// Projection matrices of the real camera `K[I|0]` and the virtual camera `K[DR|Dt]`.
#[derive(Debug, Clone, Copy)]
pub struct StereoRig<T: Scalar> {
    pub real: Matrix3x4<T>,
    pub virt: Matrix3x4<T>,
}

impl<T: Scalar> StereoRig<T> {
    pub fn new(k: &Intrinsics<T>, ext: &VirtualExtrinsics<T>) -> Self {
        Self { real: real_projection_matrix(k), virt: virtual_projection_matrix(k, ext) }
    }

    /// Depth of `x` in the real and virtual cameras (third homogeneous coordinate).
    pub fn depths(&self, x: &Vector3<T>) -> (T, T) {
        let h = x.push(T::one());
        (self.real.row(2).dot(&h.transpose()), self.virt.row(2).dot(&h.transpose()))
    }
}

/// Per-point triangulation result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointStatus {
    Valid,
    /// Non-positive depth in at least one camera.
    BehindCamera,
    /// The linear system had no unique solution.
    Degenerate,
}

struct DltSystem<T: Scalar> {
    /// Unnormalized rows and their norms.
    rows: [RowVector4<T>; 4],
    norms: [T; 4],
    eigen: SymmetricEigen<T, nalgebra::U4>,
    order: [usize; 4],
}

fn dlt_system<T: Scalar>(rig: &StereoRig<T>, u: &Vector2<T>, up: &Vector2<T>) -> Result<DltSystem<T>> {
    let rows = [
        rig.real.row(2) * u.x - rig.real.row(0),
        rig.real.row(2) * u.y - rig.real.row(1),
        rig.virt.row(2) * up.x - rig.virt.row(0),
        rig.virt.row(2) * up.y - rig.virt.row(1),
    ];
    let mut norms = [T::zero(); 4];
    let mut m = Matrix4::zeros();
    for (k, r) in rows.iter().enumerate() {
        let n = r.norm();
        if n == T::zero() || !n.is_finite() {
            return Err(Error::RankDeficientSystem);
        }
        norms[k] = n;
        let q = r / n;
        m += q.transpose() * q;
    }
    let eigen = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .partial_cmp(&eigen.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lo = eigen.eigenvalues[order[0]];
    let next = eigen.eigenvalues[order[1]];
    let hi = eigen.eigenvalues[order[3]];
    if next - lo <= T::lit(1e-12) * hi {
        return Err(Error::RankDeficientSystem);
    }
    Ok(DltSystem { rows, norms, eigen, order })
}

fn dehomogenize<T: Scalar>(v: &Vector4<T>) -> Result<Vector3<T>> {
    if v.w.abs() <= T::lit(1e-14) * v.norm() {
        return Err(Error::RankDeficientSystem);
    }
    Ok(Vector3::new(v.x / v.w, v.y / v.w, v.z / v.w))
}

/// Homogeneous least-squares triangulation of one real/mirror pixel pair.
///
/// Rows of the 4×4 system are scaled to unit norm before solving.
pub fn triangulate_point<T: Scalar>(
    rig: &StereoRig<T>,
    u: &Vector2<T>,
    up: &Vector2<T>,
) -> Result<Vector3<T>> {
    let sys = dlt_system(rig, u, up)?;
    let v: Vector4<T> = sys.eigen.eigenvectors.column(sys.order[0]).into();
    dehomogenize(&v)
}

/// Triangulates and also returns `∂X/∂(u.x, u.y, u'.x, u'.y)`.
///
/// The derivative follows first-order perturbation of the smallest
/// eigenvector of the row-normalized system matrix.
pub fn triangulate_point_with_jacobian<T: Scalar>(
    rig: &StereoRig<T>,
    u: &Vector2<T>,
    up: &Vector2<T>,
) -> Result<(Vector3<T>, Matrix3x4<T>)> {
    let sys = dlt_system(rig, u, up)?;
    let ev = &sys.eigen.eigenvectors;
    let v: Vector4<T> = ev.column(sys.order[0]).into();
    let x = dehomogenize(&v)?;
    let lambda0 = sys.eigen.eigenvalues[sys.order[0]];
    // d row_k / d input_k is the third row of the matching projection matrix.
    let drow = [rig.real.row(2), rig.real.row(2), rig.virt.row(2), rig.virt.row(2)];
    let mut jac = Matrix3x4::zeros();
    for k in 0..4 {
        let q = sys.rows[k] / sys.norms[k];
        let dr = drow[k].into_owned();
        // derivative of the normalized row
        let dq = (dr - q * dr.dot(&q)) / sys.norms[k];
        let qv = q.dot(&v.transpose());
        let dqv = dq.dot(&v.transpose());
        let mut dv = Vector4::zeros();
        for &j in &sys.order[1..] {
            let ej: Vector4<T> = ev.column(j).into();
            let coeff = (dq.dot(&ej.transpose()) * qv + q.dot(&ej.transpose()) * dqv)
                / (lambda0 - sys.eigen.eigenvalues[j]);
            dv += ej * coeff;
        }
        let dx = (Vector3::new(dv.x, dv.y, dv.z) - x * dv.w) / v.w;
        jac.set_column(k, &dx);
    }
    Ok((x, jac))
}

/// Triangulates every valid pair; points that fail or land behind either
/// camera are kept with their status so callers can count them.
pub fn triangulate_tracks<T: Scalar>(
    tracks: &JointTracks<T>,
    rig: &StereoRig<T>,
) -> (Joints3D<T>, Vec<PointStatus>) {
    let mut out = Joints3D::new(tracks.n_frames, tracks.n_joints);
    let mut status = vec![PointStatus::Degenerate; tracks.real.len()];
    for k in 0..tracks.real.len() {
        if !tracks.valid[k] {
            continue;
        }
        match triangulate_point(rig, &tracks.real[k], &tracks.mirror[k]) {
            Ok(x) => {
                let (z, zv) = rig.depths(&x);
                out.positions[k] = x;
                if z > T::zero() && zv > T::zero() {
                    out.valid[k] = true;
                    status[k] = PointStatus::Valid;
                } else {
                    status[k] = PointStatus::BehindCamera;
                }
            }
            Err(_) => status[k] = PointStatus::Degenerate,
        }
    }
    (out, status)
}

/// DLT triangulation of all joint pairs under `K` and `ext`.
pub fn triangulate_dlt<T: Scalar>(
    tracks: &JointTracks<T>,
    k: &Intrinsics<T>,
    ext: &VirtualExtrinsics<T>,
) -> Joints3D<T> {
    triangulate_tracks(tracks, &StereoRig::new(k, ext)).0
}
