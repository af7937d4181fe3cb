//! Alternating refinement: denoise the 2D joints under the body prior with
//! the virtual camera fixed, then re-estimate the camera from the refined
//! joints.

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::body_prior::{total_objective, BoneSet, ObjectiveTerms, PriorConfig};
use crate::eight_point::{estimate_mirror, mirror_normal_vjp, CorrespondenceSet};
use crate::error::{Error, ErrorClass, Result};
use crate::geometry::{extrinsics_from_mirror, Intrinsics, MirrorPlane, VirtualExtrinsics};
use crate::lbfgs::{minimize, LbfgsConfig};
use crate::scalar::Scalar;
use crate::tracks::{JointTracks, Joints3D};
use crate::triangulation::{triangulate_tracks, StereoRig};

/// When the camera is re-estimated from the refined joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraUpdate {
    /// The camera is re-estimated from the joints at every evaluation of
    /// the descent and differentiated through.
    #[default]
    Coupled,
    /// Held fixed during the descent, re-estimated after every outer
    /// iteration.
    EveryIteration,
    /// Once, after the joints have been refined with the initial camera.
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_outer_iterations: usize,
    pub quasi_newton_max_steps_per_outer: usize,
    pub step_length: f64,
    /// Stop once an outer iteration lowers the objective by less than this
    /// fraction of its previous value.
    pub convergence_tol: f64,
    pub camera_update: CameraUpdate,
    #[serde(flatten)]
    pub prior: PriorConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 10,
            quasi_newton_max_steps_per_outer: 20,
            step_length: 1.0,
            convergence_tol: 1e-6,
            camera_update: CameraUpdate::Coupled,
            prior: PriorConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iterations == 0 || self.quasi_newton_max_steps_per_outer == 0 {
            return Err(Error::InvalidConfig("refine iteration counts must be >= 1".into()));
        }
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return Err(Error::InvalidConfig("refine step_length must be positive".into()));
        }
        if !(self.convergence_tol > 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::InvalidConfig("refine convergence_tol must be positive".into()));
        }
        if !(self.prior.gm_scale > 0.0 && self.prior.gm_scale.is_finite()) {
            return Err(Error::InvalidConfig("gm_scale must be positive".into()));
        }
        self.prior.weights.validate()?;
        self.prior.table.validate()
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iterations: self.quasi_newton_max_steps_per_outer,
            step_length: self.step_length,
            ..LbfgsConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// The last outer iteration raised the objective and was undone.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub objective: f64,
    pub terms: ObjectiveTerms,
}

#[derive(Debug, Clone)]
pub struct RefineResult<T: Scalar> {
    pub refined: JointTracks<T>,
    pub extrinsics: VirtualExtrinsics<T>,
    pub joints: Joints3D<T>,
    /// Objective at the start and after each accepted outer iteration.
    pub trace: Vec<TraceEntry>,
    pub outer_iterations: usize,
    pub stop: StopReason,
}

fn flatten<T: Scalar>(tracks: &JointTracks<T>, slots: &[usize]) -> DVector<T> {
    let mut v = DVector::zeros(4 * slots.len());
    for (j, &k) in slots.iter().enumerate() {
        let (a, b) = (tracks.real[k], tracks.mirror[k]);
        v.fixed_rows_mut::<4>(4 * j).copy_from(&nalgebra::Vector4::new(a.x, a.y, b.x, b.y));
    }
    v
}

fn unflatten<T: Scalar>(v: &DVector<T>, slots: &[usize], into: &mut JointTracks<T>) {
    for (j, &k) in slots.iter().enumerate() {
        into.real[k] = Vector2::new(v[4 * j], v[4 * j + 1]);
        into.mirror[k] = Vector2::new(v[4 * j + 2], v[4 * j + 3]);
    }
}

fn evaluate<T: Scalar>(
    refined: &JointTracks<T>,
    observed: &JointTracks<T>,
    k: &Intrinsics<T>,
    ext: &VirtualExtrinsics<T>,
    bones: &BoneSet,
    prior: &PriorConfig,
) -> Result<TraceEntry> {
    let e = total_objective(refined, observed, k, ext, bones, prior, false)?;
    Ok(TraceEntry { objective: e.value.as_f64(), terms: e.terms })
}

/// Objective with the camera estimated from `tracks` itself, and its
/// gradient including the dependence of the camera on the joints.
fn coupled_objective<T: Scalar>(
    tracks: &JointTracks<T>,
    observed: &JointTracks<T>,
    k: &Intrinsics<T>,
    bones: &BoneSet,
    prior: &PriorConfig,
) -> Result<(T, Vec<Vector2<T>>, Vec<Vector2<T>>)> {
    let corr = CorrespondenceSet::from_tracks(tracks)?;
    let est = estimate_mirror(&corr, k).map_err(|e| match e.class() {
        ErrorClass::Degenerate => Error::DivergedObjective,
        _ => e,
    })?;
    let e = total_objective(tracks, observed, k, &est.extrinsics, bones, prior, true)?;
    let (mut gr, mut gm) = e.gradient.expect("gradient requested");
    let n = *est.mirror.normal();
    let d = est.mirror.distance();
    let b1 = if n.x.abs() < T::lit(0.9) { Vector3::x() } else { Vector3::y() };
    let b1 = (b1 - n * n.dot(&b1)).normalize();
    let b2 = n.cross(&b1);
    let h = T::lit(1e-5);
    let mut g_n = Vector3::zeros();
    for b in [b1, b2] {
        let at = |s: T| -> Result<T> {
            let m = MirrorPlane::new(n + b * s, d)?;
            Ok(total_objective(tracks, observed, k, &extrinsics_from_mirror(&m), bones, prior, false)?.value)
        };
        g_n += b * ((at(h)? - at(-h)?) / (T::lit(2.0) * h));
    }
    let (vr, vm) = mirror_normal_vjp(&corr, k, &n, &g_n)?;
    for (j, (k, _, _)) in tracks.pairs().enumerate() {
        gr[k] += vr[j];
        gm[k] += vm[j];
    }
    Ok((e.value, gr, gm))
}

/// Descends on the valid joints of `current`, with `ext` fixed unless the
/// camera is coupled.
fn descend<T: Scalar>(
    current: &JointTracks<T>,
    observed: &JointTracks<T>,
    k: &Intrinsics<T>,
    ext: &VirtualExtrinsics<T>,
    bones: &BoneSet,
    cfg: &RefineConfig,
    slots: &[usize],
) -> Result<JointTracks<T>> {
    let mut work = current.clone();
    let objective = |v: &DVector<T>| -> Result<(T, DVector<T>)> {
        let mut tracks = current.clone();
        unflatten(v, slots, &mut tracks);
        let (value, gr, gm) = if cfg.camera_update == CameraUpdate::Coupled {
            coupled_objective(&tracks, observed, k, bones, &cfg.prior)?
        } else {
            let e = total_objective(&tracks, observed, k, ext, bones, &cfg.prior, true)?;
            let (gr, gm) = e.gradient.expect("gradient requested");
            (e.value, gr, gm)
        };
        let mut g = DVector::zeros(v.len());
        for (j, &s) in slots.iter().enumerate() {
            g[4 * j] = gr[s].x;
            g[4 * j + 1] = gr[s].y;
            g[4 * j + 2] = gm[s].x;
            g[4 * j + 3] = gm[s].y;
        }
        Ok((value, g))
    };
    let out = minimize(objective, flatten(current, slots), &cfg.lbfgs())?;
    unflatten(&out.x, slots, &mut work);
    Ok(work)
}

/// Refines `observed` starting from the camera `init`.
pub fn refine_joints<T: Scalar>(
    observed: &JointTracks<T>,
    k: &Intrinsics<T>,
    init: &VirtualExtrinsics<T>,
    cfg: &RefineConfig,
) -> Result<RefineResult<T>> {
    cfg.validate()?;
    if observed.valid_count() == 0 {
        return Err(Error::EmptyCorrespondenceSet);
    }
    if !init.is_proper(T::lit(1e-6)) {
        return Err(Error::InvalidConfig("initial extrinsics are not a valid mirror transform".into()));
    }
    let bones = BoneSet::standard();
    let slots: Vec<usize> = (0..observed.real.len()).filter(|&i| observed.valid[i]).collect();
    let mut refined = observed.clone();
    let mut ext = *init;
    let mut current = evaluate(&refined, observed, k, &ext, &bones, &cfg.prior)?;
    let mut trace = vec![current.clone()];
    let mut stop = StopReason::MaxIterations;
    let mut outer = 0;
    while outer < cfg.max_outer_iterations {
        outer += 1;
        let candidate = descend(&refined, observed, k, &ext, &bones, cfg, &slots)?;
        let next_ext = match cfg.camera_update {
            CameraUpdate::Coupled | CameraUpdate::EveryIteration => estimate_mirror(&CorrespondenceSet::from_tracks(&candidate)?, k)?.extrinsics,
            CameraUpdate::FinalOnly => ext,
        };
        let next = evaluate(&candidate, observed, k, &next_ext, &bones, &cfg.prior)?;
        if !next.objective.is_finite() {
            return Err(Error::DivergedObjective);
        }
        if next.objective > current.objective {
            stop = StopReason::Rejected;
            break;
        }
        let decrease = current.objective - next.objective;
        refined = candidate;
        ext = next_ext;
        current = next;
        trace.push(current.clone());
        if decrease <= cfg.convergence_tol * current.objective.abs().max(f64::MIN_POSITIVE) {
            stop = StopReason::Converged;
            break;
        }
    }
    if cfg.camera_update == CameraUpdate::FinalOnly {
        ext = estimate_mirror(&CorrespondenceSet::from_tracks(&refined)?, k)?.extrinsics;
    }
    let (joints, _) = triangulate_tracks(&refined, &StereoRig::new(k, &ext));
    Ok(RefineResult { refined, extrinsics: ext, joints, trace, outer_iterations: outer, stop })
}
