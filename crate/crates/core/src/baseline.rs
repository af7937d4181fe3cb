//! Unconstrained normalized eight-point comparator.
//!
//! Ignores the mirror structure: estimates a general rank-2 fundamental
//! matrix and decomposes `E = KᵀFK` with the usual four-fold SVD ambiguity.
//! Since the virtual camera is left-handed, a proper decomposition
//! `E ∝ [c]×M` is mapped back through `DR = −M`.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen};

use crate::eight_point::{normalize_points, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{reflection, Intrinsics, VirtualExtrinsics};
use crate::scalar::Scalar;
use crate::triangulation::{triangulate_point, StereoRig};

/// General fundamental matrix (rank 2, unit norm) from ≥ 8 pairs.
pub fn solve_unconstrained_fundamental<T: Scalar>(corr: &CorrespondenceSet<T>) -> Result<Matrix3<T>> {
    let pairs = corr.pairs();
    if pairs.len() < 8 {
        return Err(Error::TooFewPairs { needed: 8, got: pairs.len() });
    }
    let real: Vec<_> = pairs.iter().map(|p| p.real).collect();
    let mirror: Vec<_> = pairs.iter().map(|p| p.mirror).collect();
    let (nr, tr) = normalize_points(&real)?;
    let (nm, tm) = normalize_points(&mirror)?;
    let mut gram = SMatrix::<T, 9, 9>::zeros();
    for (x, xp) in nr.iter().zip(&nm) {
        let o = T::one();
        let row = SVector::<T, 9>::from([
            xp.x * x.x,
            xp.x * x.y,
            xp.x,
            xp.y * x.x,
            xp.y * x.y,
            xp.y,
            x.x,
            x.y,
            o,
        ]);
        gram += row * row.transpose();
    }
    let eig = SymmetricEigen::new(gram);
    let imin = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(imin);
    let f = Matrix3::from_fn(|r, c| v[3 * r + c]);
    let svd = f.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateConfiguration("svd failed".into())),
    };
    let mut s = svd.singular_values;
    let smin = s.imin();
    s[smin] = T::zero();
    let f = u * Matrix3::from_diagonal(&s) * vt;
    let f = tm.matrix().transpose() * f * tr.matrix();
    let n = f.norm();
    if !(n > T::zero()) {
        return Err(Error::DegenerateConfiguration("zero fundamental matrix".into()));
    }
    Ok(f / n)
}

/// The four `(R, t)` readings of a general essential matrix, as virtual
/// camera extrinsics.
pub fn decompose_general_essential<T: Scalar>(e: &Matrix3<T>) -> Result<[VirtualExtrinsics<T>; 4]> {
    let svd = e.svd(true, true);
    let (mut u, mut vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::DegenerateConfiguration("svd failed".into())),
    };
    // order so the null direction is the last column
    let imin = svd.singular_values.imin();
    if imin != 2 {
        u.swap_columns(imin, 2);
        vt.swap_rows(imin, 2);
    }
    if u.determinant() < T::zero() {
        u.column_mut(2).neg_mut();
    }
    if vt.determinant() < T::zero() {
        vt.row_mut(2).neg_mut();
    }
    let (z, o) = (T::zero(), T::one());
    let w = Matrix3::new(z, -o, z, o, z, z, z, z, o);
    let d = reflection::<T>();
    let c = u.column(2).into_owned();
    let ra = u * w * vt;
    let rb = u * w.transpose() * vt;
    // E ∝ [c]×M with M proper; the virtual map is X ↦ (−M)X ∓ c, so R = −DM.
    let make = |m: &Matrix3<T>, t: nalgebra::Vector3<T>| VirtualExtrinsics {
        rotation: -(d * m),
        translation: d * t,
    };
    Ok([make(&ra, c), make(&ra, -c), make(&rb, c), make(&rb, -c)])
}

/// Unconstrained baseline: eight-point, essential decomposition, and the
/// candidate with the most points in front of both cameras.
pub fn estimate_unconstrained<T: Scalar>(corr: &CorrespondenceSet<T>, k: &Intrinsics<T>) -> Result<VirtualExtrinsics<T>> {
    let f = solve_unconstrained_fundamental(corr)?;
    let km = k.matrix();
    k.inverse()?;
    let e = km.transpose() * f * km;
    let candidates = decompose_general_essential(&e)?;
    let step = corr.len().div_ceil(crate::eight_point::CHEIRALITY_SAMPLE).max(1);
    let mut best: Option<(usize, VirtualExtrinsics<T>)> = None;
    for cand in candidates {
        let rig = StereoRig::new(k, &cand);
        let votes = corr
            .pairs()
            .iter()
            .step_by(step)
            .filter(|p| match triangulate_point(&rig, &p.real, &p.mirror) {
                Ok(x) => {
                    let (a, b) = rig.depths(&x);
                    a > T::zero() && b > T::zero()
                }
                Err(_) => false,
            })
            .count();
        if best.as_ref().is_none_or(|(v, _)| votes > *v) {
            best = Some((votes, cand));
        }
    }
    match best {
        Some((v, ext)) if v > 0 => Ok(ext),
        _ => Err(Error::CheiralityUndecidable),
    }
}
