//! Extrinsic error metrics and Procrustes-aligned joint error.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tracks::Joints3D;

fn check_rotation<T: Scalar>(r: &Matrix3<T>) -> Result<()> {
    let tol = T::lit(1e-6);
    let orth = (r.transpose() * r - Matrix3::identity()).amax();
    if !(orth <= tol) || !((r.determinant() - T::one()).abs() <= tol) {
        return Err(Error::NotARotation);
    }
    Ok(())
}

/// Angle of `R_gtᵀ R_est` in degrees.
pub fn rotation_error<T: Scalar>(r_est: &Matrix3<T>, r_gt: &Matrix3<T>) -> Result<T> {
    check_rotation(r_est)?;
    check_rotation(r_gt)?;
    let rel = r_gt.transpose() * r_est;
    let c = ((rel.trace() - T::one()) / T::lit(2.0)).clamp(-T::one(), T::one());
    // acos loses precision near 0; atan2 of the skew part is stable there
    let s = crate::geometry::skew_vector(&rel).norm();
    Ok(s.atan2(c) * T::lit(180.0) / T::pi())
}

/// `‖μ t_est − t_gt‖` with `μ = ‖t_gt‖ / ‖t_est‖`.
pub fn translation_error<T: Scalar>(t_est: &Vector3<T>, t_gt: &Vector3<T>) -> Result<T> {
    let ne = t_est.norm();
    if ne == T::zero() {
        return Err(Error::ZeroTranslation);
    }
    let mu = t_gt.norm() / ne;
    Ok((t_est * mu - t_gt).norm())
}

/// Distance between the unit directions of two translations.
pub fn translation_direction_error<T: Scalar>(t_est: &Vector3<T>, t_gt: &Vector3<T>) -> Result<T> {
    let (a, b) = (t_est.norm(), t_gt.norm());
    if a == T::zero() || b == T::zero() {
        return Err(Error::ZeroTranslation);
    }
    Ok((t_est / a - t_gt / b).norm())
}

/// Similarity transform `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity<T: Scalar> {
    pub rotation: Matrix3<T>,
    pub scale: T,
    pub translation: Vector3<T>,
}

impl<T: Scalar> Similarity<T> {
    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        self.rotation * x * self.scale + self.translation
    }
}

/// Least-squares similarity mapping `pred` onto `gt` (Umeyama's closed form).
pub fn procrustes_transform<T: Scalar>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<Similarity<T>> {
    assert_eq!(pred.len(), gt.len(), "point sets must have equal length");
    if pred.len() < 3 {
        return Err(Error::DegenerateCloud);
    }
    let n = T::from_usize_lossy(pred.len());
    let mp = pred.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mg = gt.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    let mut var_p = T::zero();
    let mut scatter_g = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dg * dp.transpose();
        scatter_g += dg * dg.transpose();
        var_p += dp.norm_squared();
    }
    let sg = scatter_g.singular_values();
    let mut sv = [sg[0], sg[1], sg[2]];
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if var_p == T::zero() || sv[0] == T::zero() || sv[1] <= T::lit(1e-12) * sv[0] {
        return Err(Error::DegenerateCloud);
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.ok_or(Error::DegenerateCloud)?, svd.v_t.ok_or(Error::DegenerateCloud)?);
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < T::zero() {
        // flip the direction of the smallest singular value
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, T::max_value().unwrap()), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        sign[(imin, imin)] = -T::one();
    }
    let rotation = u * sign * vt;
    let trace = (Matrix3::from_diagonal(&svd.singular_values) * sign).trace();
    let scale = trace / var_p;
    let translation = mg - rotation * mp * scale;
    Ok(Similarity { rotation, scale, translation })
}

/// Applies the optimal similarity transform to `pred`.
pub fn procrustes_align<T: Scalar>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<Vec<Vector3<T>>> {
    let s = procrustes_transform(pred, gt)?;
    Ok(pred.iter().map(|p| s.apply(p)).collect())
}

/// Mean per-joint error after per-frame Procrustes alignment, in the
/// scene units of `gt`.
///
/// Frames with fewer than three joints valid in both inputs are skipped;
/// if no frame qualifies the result is [`Error::DegenerateCloud`].
pub fn pa_mpjpe<T: Scalar>(pred: &Joints3D<T>, gt: &Joints3D<T>) -> Result<T> {
    let per_frame = pa_mpjpe_per_frame(pred, gt)?;
    let mut sum = T::zero();
    let mut count = 0usize;
    for (s, c) in per_frame.into_iter().flatten() {
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::DegenerateCloud);
    }
    Ok(sum / T::from_usize_lossy(count))
}

/// Per frame: `Some((sum of aligned joint errors, joint count))`.
pub fn pa_mpjpe_per_frame<T: Scalar>(pred: &Joints3D<T>, gt: &Joints3D<T>) -> Result<Vec<Option<(T, usize)>>> {
    if pred.n_frames != gt.n_frames || pred.n_joints != gt.n_joints {
        return Err(Error::InvalidConfig("prediction and ground truth shapes differ".into()));
    }
    let mut out = Vec::with_capacity(gt.n_frames);
    for t in 0..gt.n_frames {
        let (mut p, mut g) = (Vec::new(), Vec::new());
        for i in 0..gt.n_joints {
            if let (Some(a), Some(b)) = (pred.get(t, i), gt.get(t, i)) {
                p.push(*a);
                g.push(*b);
            }
        }
        if p.len() < 3 {
            out.push(None);
            continue;
        }
        let aligned = procrustes_align(&p, &g)?;
        let sum = aligned.iter().zip(&g).fold(T::zero(), |acc, (a, b)| acc + (a - b).norm());
        out.push(Some((sum, p.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_axis(rng: &mut impl Rng) -> Unit<Vector3<f64>> {
        Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ))
    }

    #[test]
    fn rotation_error_cases() {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians());
        assert_eq!(rotation_error(r.matrix(), r.matrix()).unwrap(), 0.0);
        let e = rotation_error(r.matrix(), &Matrix3::identity()).unwrap();
        assert!((e - 10.0).abs() < 1e-12);
        let bad = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert_eq!(rotation_error(&bad, &Matrix3::identity()), Err(Error::NotARotation));
    }

    #[test]
    fn rotation_error_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..500 {
            let a = Rotation3::from_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..3.0));
            let b = Rotation3::from_axis_angle(&random_axis(&mut rng), rng.random_range(0.0..3.0));
            let composed = a * b;
            let qa = UnitQuaternion::from_rotation_matrix(&a);
            let qb = UnitQuaternion::from_rotation_matrix(&b);
            // relative rotation angle of (a*b) vs a is the angle of b
            let expect = (qa.inverse() * (qa * qb)).angle().to_degrees();
            let got = rotation_error(composed.matrix(), a.matrix()).unwrap();
            assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
            let sym = rotation_error(a.matrix(), composed.matrix()).unwrap();
            assert!((sym - got).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_error_closed_forms() {
        let e: f64 = translation_error(&Vector3::new(2.0, 0.0, 0.0), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(e, 0.0);
        let e: f64 = translation_error(&Vector3::new(0.0, 1.0, 0.0), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((e - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(translation_error::<f64>(&Vector3::zeros(), &Vector3::x()), Err(Error::ZeroTranslation));
    }

    #[test]
    fn translation_error_formula_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let te: Vector3<f64> = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
            let tg: Vector3<f64> = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.0));
            let mu = tg.norm() / te.norm();
            let direct = ((mu * te.x - tg.x).powi(2) + (mu * te.y - tg.y).powi(2) + (mu * te.z - tg.z).powi(2)).sqrt();
            let got = translation_error(&te, &tg).unwrap();
            assert!((got - direct).abs() < 1e-12);
            let alpha: f64 = rng.random_range(0.01..100.0);
            assert!((translation_error(&(te * alpha), &tg).unwrap() - got).abs() < 1e-12);
        }
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn procrustes_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let gt = random_cloud(&mut rng, 14);
        let r = Rotation3::from_axis_angle(&random_axis(&mut rng), 1.1);
        let pred: Vec<_> = gt.iter().map(|p| r * p * 3.5 + Vector3::new(1.0, -2.0, 0.5)).collect();
        let aligned = procrustes_align(&pred, &gt).unwrap();
        for (a, g) in aligned.iter().zip(&gt) {
            assert!((a - g).norm() < 1e-9);
        }
        let s = procrustes_transform(&gt, &gt).unwrap();
        assert!((s.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!((s.scale - 1.0).abs() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
    }

    #[test]
    fn procrustes_residual_equals_constructed_perturbation() {
        // Perturbation orthogonal to the similarity tangent space leaves the
        // optimal transform unchanged, so the residual equals its norm.
        let gt = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(-1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        ];
        // planar cross; a z-displacement pattern (+δ,+δ,−δ,−δ) is orthogonal to
        // translations, rotations and scaling of this configuration
        let delta: f64 = 1e-3;
        let signs = [1.0, 1.0, -1.0, -1.0];
        let pred: Vec<_> = gt.iter().zip(signs).map(|(p, s)| p + Vector3::new(0.0, 0.0, s * delta)).collect();
        let aligned = procrustes_align(&pred, &gt).unwrap();
        let resid: f64 = aligned.iter().zip(&gt).map(|(a, g)| (a - g).norm_squared()).sum::<f64>().sqrt();
        let pert = (4.0 * delta * delta).sqrt();
        assert!((resid - pert).abs() < 1e-9, "{resid} vs {pert}");
    }

    #[test]
    fn procrustes_degenerate_inputs() {
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(procrustes_align(&line, &line), Err(Error::DegenerateCloud));
        let two: Vec<Vector3<f64>> = vec![Vector3::zeros(), Vector3::x()];
        assert_eq!(procrustes_align(&two, &two), Err(Error::DegenerateCloud));
    }

    fn joints_from(frames: &[Vec<Vector3<f64>>]) -> Joints3D<f64> {
        let mut j = Joints3D::new(frames.len(), frames[0].len());
        for (t, f) in frames.iter().enumerate() {
            for (i, p) in f.iter().enumerate() {
                j.set(t, i, *p);
            }
        }
        j
    }

    #[test]
    fn pa_mpjpe_zero_cases_and_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let frames: Vec<_> = (0..5).map(|_| random_cloud(&mut rng, 14)).collect();
        let gt = joints_from(&frames);
        assert!(pa_mpjpe(&gt, &gt).unwrap() < 1e-12);
        let r = Rotation3::from_axis_angle(&random_axis(&mut rng), 0.7);
        let moved = gt.map_positions(|p| r * p * 2.0 + Vector3::new(3.0, 0.0, 1.0));
        assert!(pa_mpjpe(&moved, &gt).unwrap() < 1e-9);

        let mut noisy = gt.clone();
        for p in noisy.positions.iter_mut() {
            *p += Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0);
        }
        let base = pa_mpjpe(&noisy, &gt).unwrap();
        let noisy_moved = noisy.map_positions(|p| r * p * 0.3 - Vector3::new(1.0, 1.0, 1.0));
        assert!((pa_mpjpe(&noisy_moved, &gt).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn pa_mpjpe_single_joint_offset_matches_closed_form() {
        // Centred regular tetrahedron, one joint pushed radially by δ. The
        // cross-covariance is Σbbᵀ + δr·ddᵀ (symmetric positive definite), so
        // the optimal rotation is the identity and only scale and shift act.
        let base = vec![
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(1.0, -1.0, -1.0),
            Vector3::new(-1.0, 1.0, -1.0),
            Vector3::new(-1.0, -1.0, 1.0),
        ];
        let j = base.len() as f64;
        let delta = 1e-2;
        let dir = base[0].normalize();
        let mut pred = base.clone();
        pred[0] += dir * delta;
        let gt = joints_from(&[base.clone(), base.clone()]);
        let pr = joints_from(&[pred.clone(), pred]);
        let got = pa_mpjpe(&pr, &gt).unwrap();
        let r = base[0].norm();
        let s = (r * r * j + delta * r) / (r * r * j + 2.0 * delta * r + delta * delta * (1.0 - 1.0 / j));
        let shift = dir * (delta / j);
        let mut expect = 0.0;
        for (i, b) in base.iter().enumerate() {
            let p = if i == 0 { b + dir * delta } else { *b };
            let a = (p - shift) * s;
            expect += (a - b).norm();
        }
        expect /= j;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }
}
