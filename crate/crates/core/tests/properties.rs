use mirrorpose::body_prior::{
    bone_lengths, loss_anth, loss_hip, loss_repro, loss_smooth, loss_sym, loss_var, AnthropometricTable, BoneSet,
    VariationMode, N_JOINTS,
};
use mirrorpose::eight_point::{estimate_mirror, extract_mirror, matrix_direction_error, Correspondence, CorrespondenceSet};
use mirrorpose::geometry::{
    essential_from_mirror, extrinsics_from_mirror, fundamental_from_essential, normalize_frobenius, project,
    real_projection_matrix, reflect_point, virtual_projection_matrix, Intrinsics, MirrorPlane,
};
use mirrorpose::metrics::{pa_mpjpe, rotation_error, translation_error};
use mirrorpose::triangulation::{triangulate_point, StereoRig};
use mirrorpose::{JointTracks64, Joints3D64};
use nalgebra::{Rotation3, Vector2, Vector3};
use proptest::prelude::*;

fn k() -> Intrinsics<f64> {
    Intrinsics::new(700.0, 700.0, 960.0, 540.0).unwrap()
}

prop_compose! {
    fn mirror()(theta in 0.0f64..0.78, phi in 0.0f64..std::f64::consts::TAU, d in 0.5f64..5.0) -> MirrorPlane<f64> {
        MirrorPlane::new(Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()), d).unwrap()
    }
}

prop_compose! {
    fn vec3(r: f64)(x in -r..r, y in -r..r, z in -r..r) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }
}

prop_compose! {
    fn rotation()(axis in vec3(3.0)) -> Rotation3<f64> {
        Rotation3::from_scaled_axis(axis)
    }
}

/// Points between the camera and the mirror, seen by both views.
fn front_points(m: &MirrorPlane<f64>, seeds: &[(f64, f64, f64)]) -> Vec<Vector3<f64>> {
    seeds
        .iter()
        .map(|&(a, b, c)| {
            let depth = m.distance() * (0.3 + 0.5 * c);
            Vector3::new(a * depth * 0.5, b * depth * 0.5, depth)
        })
        .filter(|p| m.normal().dot(p) < m.distance() * 0.9)
        .collect()
}

fn pixel_pairs(m: &MirrorPlane<f64>, pts: &[Vector3<f64>]) -> Vec<Correspondence<f64>> {
    let ext = extrinsics_from_mirror(m);
    let (p, pv) = (real_projection_matrix(&k()), virtual_projection_matrix(&k(), &ext));
    pts.iter()
        .enumerate()
        .filter_map(|(i, x)| {
            Some(Correspondence { real: project(&p, x).ok()?, mirror: project(&pv, x).ok()?, frame: i, joint: 0 })
        })
        .collect()
}

fn joints(frames: usize, pts: &[Vector3<f64>]) -> Joints3D64 {
    let mut x = Joints3D64::new(frames, N_JOINTS);
    for t in 0..frames {
        for j in 0..N_JOINTS {
            x.set(t, j, pts[(t * N_JOINTS + j) % pts.len()] + Vector3::new(0.0, 0.0, 3.0));
        }
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn reflection_is_an_involution(m in mirror(), p in vec3(10.0)) {
        prop_assert!((reflect_point(&reflect_point(&p, &m), &m) - p).norm() < 1e-9);
    }

    #[test]
    fn essential_is_skew_and_rank_two(m in mirror()) {
        let e = essential_from_mirror(&m).0;
        prop_assert_eq!(e + e.transpose(), nalgebra::Matrix3::zeros());
        let sv = e.singular_values();
        prop_assert!(sv.min() < 1e-12 * sv.max());
    }

    #[test]
    fn virtual_transform_is_improper(m in mirror()) {
        let ext = extrinsics_from_mirror(&m);
        prop_assert!((ext.linear_part().determinant() + 1.0).abs() < 1e-9);
        prop_assert!((ext.rotation.determinant() - 1.0).abs() < 1e-9);
        prop_assert!(ext.is_proper(1e-9));
    }

    #[test]
    fn essential_is_homogeneous_in_distance(m in mirror()) {
        let m2 = MirrorPlane::new(*m.normal(), 2.0 * m.distance()).unwrap();
        let a = normalize_frobenius(&essential_from_mirror(&m).0).unwrap();
        let b = normalize_frobenius(&essential_from_mirror(&m2).0).unwrap();
        prop_assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn extrinsics_reproduce_the_essential(m in mirror()) {
        let ext = extrinsics_from_mirror(&m);
        prop_assert!(matrix_direction_error(&ext.essential(), &essential_from_mirror(&m).0) < 1e-9);
        let (back, _) = extract_mirror(&essential_from_mirror(&m), None).unwrap();
        prop_assert!((back.normal() - m.normal()).norm() < 1e-9);
        prop_assert!((back.distance() - m.distance()).abs() < 1e-9);
    }

    #[test]
    fn noiseless_pairs_satisfy_the_epipolar_constraint(
        m in mirror(),
        seeds in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0), 20),
    ) {
        let f = fundamental_from_essential(&essential_from_mirror(&m), &k()).unwrap();
        for c in pixel_pairs(&m, &front_points(&m, &seeds)) {
            prop_assert!(f.algebraic_residual(&c.real, &c.mirror).abs() < 1e-9);
        }
    }

    #[test]
    fn pixel_offset_with_matching_principal_point_keeps_the_normal(
        m in mirror(),
        seeds in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0), 30),
        off in (-300.0f64..300.0, -300.0f64..300.0),
    ) {
        let pairs = pixel_pairs(&m, &front_points(&m, &seeds));
        prop_assume!(pairs.len() >= 12);
        let shift = Vector2::new(off.0, off.1);
        let moved: Vec<_> = pairs.iter().map(|c| Correspondence { real: c.real + shift, mirror: c.mirror + shift, ..*c }).collect();
        let k2 = Intrinsics::new(700.0, 700.0, 960.0 + off.0, 540.0 + off.1).unwrap();
        let a = estimate_mirror(&CorrespondenceSet::new(pairs).unwrap(), &k()).unwrap();
        let b = estimate_mirror(&CorrespondenceSet::new(moved).unwrap(), &k2).unwrap();
        prop_assert!((a.mirror.normal() - b.mirror.normal()).norm() < 1e-9);
    }

    #[test]
    fn triangulation_inverts_projection(m in mirror(), seeds in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.0f64..1.0), 10)) {
        let pts = front_points(&m, &seeds);
        let rig = StereoRig::new(&k(), &extrinsics_from_mirror(&m));
        for (c, x) in pixel_pairs(&m, &pts).iter().zip(&pts) {
            let y = triangulate_point(&rig, &c.real, &c.mirror).unwrap();
            prop_assert!((y - x).norm() < 1e-9 * x.norm().max(1.0));
        }
    }

    #[test]
    fn loss_terms_are_non_negative(pts in prop::collection::vec(vec3(0.8), 14..60), frames in 3usize..6) {
        let x = joints(frames, &pts);
        let bones = BoneSet::standard();
        let l = bone_lengths(&x, &bones);
        let table = AnthropometricTable::default();
        prop_assert!(loss_var(&l, VariationMode::StdDev).unwrap() >= 0.0);
        prop_assert!(loss_var(&l, VariationMode::Range).unwrap() >= 0.0);
        prop_assert!(loss_sym(&l, &bones) >= 0.0);
        prop_assert!(loss_anth(&l, &bones, &table).unwrap() >= 0.0);
        prop_assert!(loss_hip(&x).value >= 0.0);
        prop_assert!(loss_smooth(&x).unwrap() >= 0.0);
        let m = MirrorPlane::new(Vector3::new(0.1, 0.0, 1.0), 5.0).unwrap();
        let rig = StereoRig::new(&k(), &extrinsics_from_mirror(&m));
        let mut obs = JointTracks64::new(frames, N_JOINTS);
        for i in 0..obs.real.len() {
            obs.set(i / N_JOINTS, i % N_JOINTS, Vector2::new(900.0, 500.0), Vector2::new(1000.0, 600.0));
        }
        prop_assert!(loss_repro(&obs, &x, &rig, 10.0).value >= 0.0);
    }

    #[test]
    fn variation_and_anthropometry_are_scale_free(pts in prop::collection::vec(vec3(0.8), 14..60), frames in 3usize..6, s in 0.1f64..10.0) {
        let x = joints(frames, &pts);
        let y = x.map_positions(|p| p * s);
        let bones = BoneSet::standard();
        let table = AnthropometricTable::default();
        let (lx, ly) = (bone_lengths(&x, &bones), bone_lengths(&y, &bones));
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1.0);
        for mode in [VariationMode::StdDev, VariationMode::Range] {
            prop_assert!(close(loss_var(&lx, mode).unwrap(), loss_var(&ly, mode).unwrap()));
        }
        prop_assert!(close(loss_anth(&lx, &bones, &table).unwrap(), loss_anth(&ly, &bones, &table).unwrap()));
    }

    #[test]
    fn smoothness_vanishes_on_affine_motion(pts in prop::collection::vec(vec3(1.0), N_JOINTS), vel in prop::collection::vec(vec3(0.2), N_JOINTS), frames in 3usize..20) {
        let mut x = Joints3D64::new(frames, N_JOINTS);
        for t in 0..frames {
            for j in 0..N_JOINTS {
                x.set(t, j, pts[j] + vel[j] * t as f64);
            }
        }
        prop_assert!(loss_smooth(&x).unwrap() < 1e-20);
    }

    #[test]
    fn rotation_error_is_symmetric(a in rotation(), b in rotation()) {
        let (ab, ba) = (rotation_error(a.matrix(), b.matrix()).unwrap(), rotation_error(b.matrix(), a.matrix()).unwrap());
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn translation_error_ignores_estimate_scale(t in vec3(5.0), g in vec3(5.0), alpha in 1e-3f64..1e3) {
        prop_assume!(t.norm() > 1e-3);
        let a = translation_error(&t, &g).unwrap();
        let b = translation_error(&(t * alpha), &g).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }

    #[test]
    fn pa_mpjpe_ignores_similarity_of_prediction(
        pts in prop::collection::vec(vec3(1.0), N_JOINTS * 2),
        noise in prop::collection::vec(vec3(0.05), N_JOINTS * 2),
        r in rotation(), s in 0.2f64..5.0, t in vec3(3.0),
    ) {
        let gt = joints(2, &pts);
        let mut pred = gt.clone();
        for (p, n) in pred.positions.iter_mut().zip(&noise) {
            *p += n;
        }
        let moved = pred.map_positions(|p| r * p * s + t);
        let (a, b) = (pa_mpjpe(&pred, &gt).unwrap(), pa_mpjpe(&moved, &gt).unwrap());
        prop_assert!((a - b).abs() < 1e-9);
    }
}
