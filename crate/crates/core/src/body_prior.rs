//! Bone model and the body-prior objective on triangulated joints, with
//! analytic gradients.
//!
//! Joint arrays follow the [`ELIGIBLE`] track order. Every loss accepts
//! missing joints: a term whose inputs are not all present is skipped.

use nalgebra::{Matrix2x3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, VirtualExtrinsics};
use crate::pose::{JointId, ELIGIBLE};
use crate::scalar::Scalar;
use crate::tracks::{JointTracks, Joints3D};
use crate::triangulation::{triangulate_point_with_jacobian, StereoRig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoneKind {
    Femur,
    Tibia,
    Humerus,
    Ulna,
    Scapular,
    Hip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bone {
    pub kind: BoneKind,
    pub side: Side,
    pub from: JointId,
    pub to: JointId,
}

impl Bone {
    const fn new(kind: BoneKind, side: Side, from: JointId, to: JointId) -> Self {
        Self { kind, side, from, to }
    }

    pub fn endpoints(&self) -> (usize, usize) {
        (
            self.from.track_index().expect("bone joints are eligible"),
            self.to.track_index().expect("bone joints are eligible"),
        )
    }
}

/// The twelve limb and girdle bones, each with its left/right counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneSet {
    bones: Vec<Bone>,
    counterpart: Vec<usize>,
}

impl BoneSet {
    pub fn standard() -> Self {
        use BoneKind::*;
        use JointId::*;
        use Side::*;
        let bones = vec![
            Bone::new(Femur, Left, LHip, LKnee),
            Bone::new(Femur, Right, RHip, RKnee),
            Bone::new(Tibia, Left, LKnee, LAnkle),
            Bone::new(Tibia, Right, RKnee, RAnkle),
            Bone::new(Humerus, Left, LShoulder, LElbow),
            Bone::new(Humerus, Right, RShoulder, RElbow),
            Bone::new(Ulna, Left, LElbow, LWrist),
            Bone::new(Ulna, Right, RElbow, RWrist),
            Bone::new(Scapular, Left, Neck, LShoulder),
            Bone::new(Scapular, Right, Neck, RShoulder),
            Bone::new(Hip, Left, MidHip, LHip),
            Bone::new(Hip, Right, MidHip, RHip),
        ];
        let counterpart = bones
            .iter()
            .map(|b| {
                bones
                    .iter()
                    .position(|c| c.kind == b.kind && c.side != b.side)
                    .expect("every bone has a counterpart")
            })
            .collect();
        Self { bones, counterpart }
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn len(&self) -> usize {
        self.bones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bones.is_empty()
    }

    /// Index of the symmetric bone.
    pub fn counterpart(&self, k: usize) -> usize {
        self.counterpart[k]
    }

    pub fn femurs(&self) -> (usize, usize) {
        let find = |s| {
            self.bones
                .iter()
                .position(|b| b.kind == BoneKind::Femur && b.side == s)
                .expect("femur present")
        };
        (find(Side::Left), find(Side::Right))
    }
}

impl Default for BoneSet {
    fn default() -> Self {
        Self::standard()
    }
}

/// Expected bone lengths relative to the femur.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnthropometricTable {
    pub femur: f64,
    pub tibia: f64,
    pub humerus: f64,
    pub ulna: f64,
    pub scapular: f64,
    pub hip: f64,
}

impl Default for AnthropometricTable {
    fn default() -> Self {
        Self { femur: 1.0, tibia: 0.83, humerus: 0.67, ulna: 0.54, scapular: 0.40, hip: 0.40 }
    }
}

impl AnthropometricTable {
    pub fn ratio(&self, kind: BoneKind) -> f64 {
        match kind {
            BoneKind::Femur => self.femur,
            BoneKind::Tibia => self.tibia,
            BoneKind::Humerus => self.humerus,
            BoneKind::Ulna => self.ulna,
            BoneKind::Scapular => self.scapular,
            BoneKind::Hip => self.hip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.femur != 1.0 {
            return Err(Error::InvalidConfig("anthropometry: femur ratio must be 1".into()));
        }
        let all = [self.tibia, self.humerus, self.ulna, self.scapular, self.hip];
        if all.iter().any(|r| !(*r > 0.0 && *r <= 1.5)) {
            return Err(Error::InvalidConfig("anthropometry: ratios must lie in (0, 1.5]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub var: f64,
    pub sym: f64,
    pub anth: f64,
    pub hip: f64,
    pub smooth: f64,
    pub repro: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { var: 1.0, sym: 1.0, anth: 1.0, hip: 1.0, smooth: 0.1, repro: 1.0 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { var: 0.0, sym: 0.0, anth: 0.0, hip: 0.0, smooth: 0.0, repro: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.var, self.sym, self.anth, self.hip, self.smooth, self.repro];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// How the temporal variation of a bone length is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationMode {
    #[default]
    StdDev,
    Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub weights: LossWeights,
    pub table: AnthropometricTable,
    /// Geman-McClure scale, in pixels.
    pub gm_scale: f64,
    pub variation: VariationMode,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            table: AnthropometricTable::default(),
            gm_scale: 10.0,
            variation: VariationMode::StdDev,
        }
    }
}

/// Bone lengths per (bone, frame); `None` where an endpoint is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneLengths<T: Scalar> {
    pub n_frames: usize,
    pub values: Vec<Vec<Option<T>>>,
}

impl<T: Scalar> BoneLengths<T> {
    pub fn get(&self, k: usize, t: usize) -> Option<T> {
        self.values[k][t]
    }
}

/// Length of bone `k` in frame `t`.
pub fn bone_length<T: Scalar>(x: &Joints3D<T>, bones: &BoneSet, k: usize, t: usize) -> Result<T> {
    let b = bones.bones()[k];
    let (i, j) = b.endpoints();
    match (x.get(t, i), x.get(t, j)) {
        (Some(a), Some(c)) => Ok((a - c).norm()),
        (None, _) => Err(Error::MissingJoint { joint: b.from.name().into(), frame: t }),
        (_, None) => Err(Error::MissingJoint { joint: b.to.name().into(), frame: t }),
    }
}

pub fn bone_lengths<T: Scalar>(x: &Joints3D<T>, bones: &BoneSet) -> BoneLengths<T> {
    let values = (0..bones.len())
        .map(|k| (0..x.n_frames).map(|t| bone_length(x, bones, k, t).ok()).collect())
        .collect();
    BoneLengths { n_frames: x.n_frames, values }
}

/// Accumulates `∂L/∂l` and scatters it onto the joints.
struct LengthGrad<T: Scalar> {
    d: Vec<Vec<T>>,
}

impl<T: Scalar> LengthGrad<T> {
    fn new(bones: usize, frames: usize) -> Self {
        Self { d: vec![vec![T::zero(); frames]; bones] }
    }

    fn scatter(&self, x: &Joints3D<T>, bones: &BoneSet, scale: T, grad: &mut [Vector3<T>]) {
        for (k, b) in bones.bones().iter().enumerate() {
            let (i, j) = b.endpoints();
            for t in 0..x.n_frames {
                let g = self.d[k][t];
                if g == T::zero() {
                    continue;
                }
                let (Some(a), Some(c)) = (x.get(t, i), x.get(t, j)) else { continue };
                let diff = a - c;
                let l = diff.norm();
                if l == T::zero() {
                    continue;
                }
                let dir = diff * (g * scale / l);
                grad[x.index(t, i)] += dir;
                grad[x.index(t, j)] -= dir;
            }
        }
    }
}

fn variation_loss<T: Scalar>(l: &BoneLengths<T>, mode: VariationMode, mut d: Option<&mut LengthGrad<T>>) -> Result<T> {
    if l.n_frames < 2 {
        return Err(Error::TooFewFrames { needed: 2, got: l.n_frames });
    }
    let mut total = T::zero();
    for (k, row) in l.values.iter().enumerate() {
        let present: Vec<(usize, T)> = row.iter().enumerate().filter_map(|(t, v)| v.map(|v| (t, v))).collect();
        if present.len() < 2 {
            continue;
        }
        let n = T::from_usize_lossy(present.len());
        let mean = present.iter().fold(T::zero(), |a, (_, v)| a + *v) / n;
        if !(mean > T::zero()) {
            return Err(Error::ZeroMeanLength(format!("bone {k}")));
        }
        match mode {
            VariationMode::StdDev => {
                let var = present.iter().fold(T::zero(), |a, (_, v)| a + (*v - mean) * (*v - mean)) / n;
                let s = var.sqrt();
                total += s / mean;
                if let Some(d) = d.as_deref_mut() {
                    for (t, v) in &present {
                        let ds = if s > T::zero() { (*v - mean) / (n * s) } else { T::zero() };
                        d.d[k][*t] += ds / mean - s / (mean * mean * n);
                    }
                }
            }
            VariationMode::Range => {
                let (mut lo, mut hi) = (present[0], present[0]);
                for p in &present {
                    if p.1 < lo.1 {
                        lo = *p;
                    }
                    if p.1 > hi.1 {
                        hi = *p;
                    }
                }
                let r = hi.1 - lo.1;
                total += r / mean;
                if let Some(d) = d.as_deref_mut() {
                    for (t, _) in &present {
                        d.d[k][*t] -= r / (mean * mean * n);
                    }
                    if r > T::zero() {
                        d.d[k][hi.0] += T::one() / mean;
                        d.d[k][lo.0] -= T::one() / mean;
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Temporal variation of each bone relative to its mean length, summed.
pub fn loss_var<T: Scalar>(l: &BoneLengths<T>, mode: VariationMode) -> Result<T> {
    variation_loss(l, mode, None)
}

fn symmetry_loss<T: Scalar>(l: &BoneLengths<T>, bones: &BoneSet, mut d: Option<&mut LengthGrad<T>>) -> T {
    let mut total = T::zero();
    for k in 0..bones.len() {
        let m = bones.counterpart(k);
        for t in 0..l.n_frames {
            let (Some(a), Some(b)) = (l.get(k, t), l.get(m, t)) else { continue };
            let diff = a - b;
            total += diff.abs();
            if let Some(d) = d.as_deref_mut() {
                let s = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                d.d[k][t] += s;
                d.d[m][t] -= s;
            }
        }
    }
    total
}

/// Left/right length differences, each unordered pair counted twice.
pub fn loss_sym<T: Scalar>(l: &BoneLengths<T>, bones: &BoneSet) -> T {
    symmetry_loss(l, bones, None)
}

fn anthropometric_loss<T: Scalar>(
    l: &BoneLengths<T>,
    bones: &BoneSet,
    table: &AnthropometricTable,
    mut d: Option<&mut LengthGrad<T>>,
) -> Result<T> {
    let (lf, rf) = bones.femurs();
    let mut total = T::zero();
    for t in 0..l.n_frames {
        let (fk, femur) = match (l.get(lf, t), l.get(rf, t)) {
            (Some(a), Some(b)) => {
                if a >= b {
                    (lf, a)
                } else {
                    (rf, b)
                }
            }
            (Some(a), None) => (lf, a),
            (None, Some(b)) => (rf, b),
            (None, None) => continue,
        };
        if !(femur > T::zero()) {
            return Err(Error::ZeroFemur(t));
        }
        let mut dfemur = T::zero();
        for (k, b) in bones.bones().iter().enumerate() {
            let Some(lk) = l.get(k, t) else { continue };
            let r = lk / femur - T::lit(table.ratio(b.kind));
            total += r * r;
            if let Some(d) = d.as_deref_mut() {
                let two_r = T::lit(2.0) * r;
                d.d[k][t] += two_r / femur;
                dfemur -= two_r * lk / (femur * femur);
            }
        }
        if let Some(d) = d.as_deref_mut() {
            d.d[fk][t] += dfemur;
        }
    }
    Ok(total)
}

/// Squared deviation of femur-normalized lengths from the table.
pub fn loss_anth<T: Scalar>(l: &BoneLengths<T>, bones: &BoneSet, table: &AnthropometricTable) -> Result<T> {
    anthropometric_loss(l, bones, table, None)
}

/// Value of the hip-line loss and whether it could be evaluated at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HipLoss<T> {
    pub value: T,
    pub disabled: bool,
}

fn hip_indices() -> (usize, usize, usize) {
    let ix = |j: JointId| j.track_index().expect("eligible");
    (ix(JointId::MidHip), ix(JointId::LHip), ix(JointId::RHip))
}

fn hip_loss<T: Scalar>(x: &Joints3D<T>, mut grad: Option<(&mut [Vector3<T>], T)>) -> HipLoss<T> {
    let (mid, l, r) = hip_indices();
    let mut total = T::zero();
    let mut any_mid = false;
    for t in 0..x.n_frames {
        let Some(pm) = x.get(t, mid) else { continue };
        any_mid = true;
        let (Some(pl), Some(pr)) = (x.get(t, l), x.get(t, r)) else { continue };
        let vml = pm - pl;
        let vmr = pm - pr;
        let c = vml.cross(&vmr);
        let n = c.norm();
        total += n;
        if let Some((g, s)) = grad.as_mut() {
            if n > T::zero() {
                let ch = c / n;
                let gml = vmr.cross(&ch) * *s;
                let gmr = ch.cross(&vml) * *s;
                g[x.index(t, mid)] += gml + gmr;
                g[x.index(t, l)] -= gml;
                g[x.index(t, r)] -= gmr;
            }
        }
    }
    HipLoss { value: total, disabled: !any_mid }
}

/// Norm of the cross product of the two hip-to-mid-hip vectors, summed.
pub fn loss_hip<T: Scalar>(x: &Joints3D<T>) -> HipLoss<T> {
    hip_loss(x, None)
}

fn smooth_loss<T: Scalar>(x: &Joints3D<T>, mut grad: Option<(&mut [Vector3<T>], T)>) -> Result<T> {
    if x.n_frames < 3 {
        return Err(Error::TooFewFrames { needed: 3, got: x.n_frames });
    }
    let two = T::lit(2.0);
    let mut total = T::zero();
    for t in 1..x.n_frames - 1 {
        for i in 0..x.n_joints {
            let (Some(a), Some(b), Some(c)) = (x.get(t - 1, i), x.get(t, i), x.get(t + 1, i)) else { continue };
            let acc = c - b * two + a;
            total += acc.norm_squared();
            if let Some((g, s)) = grad.as_mut() {
                let ga = acc * (two * *s);
                g[x.index(t - 1, i)] += ga;
                g[x.index(t, i)] -= ga * two;
                g[x.index(t + 1, i)] += ga;
            }
        }
    }
    Ok(total)
}

/// Squared central second difference over interior frames.
pub fn loss_smooth<T: Scalar>(x: &Joints3D<T>) -> Result<T> {
    smooth_loss(x, None)
}

/// `ρ(r) = r² / (r² + c²)`.
pub fn geman_mcclure<T: Scalar>(r: T, c: T) -> T {
    let r2 = r * r;
    r2 / (r2 + c * c)
}

fn geman_mcclure_derivative<T: Scalar>(r: T, c: T) -> T {
    let den = r * r + c * c;
    T::lit(2.0) * r * c * c / (den * den)
}

/// Projection with its Jacobian; `None` behind the camera.
fn project_with_jacobian<T: Scalar>(p: &Matrix3x4<T>, x: &Vector3<T>) -> Option<(Vector2<T>, Matrix2x3<T>)> {
    let h = p * x.push(T::one());
    if !(h.z > T::zero()) {
        return None;
    }
    let pi = Vector2::new(h.x / h.z, h.y / h.z);
    let row = |r: usize| Vector3::new(p[(r, 0)], p[(r, 1)], p[(r, 2)]);
    let (r0, r1, r2) = (row(0), row(1), row(2));
    let j0 = (r0 - r2 * pi.x) / h.z;
    let j1 = (r1 - r2 * pi.y) / h.z;
    Some((pi, Matrix2x3::from_rows(&[j0.transpose(), j1.transpose()])))
}

/// Robust reprojection loss and the number of excluded (behind-camera) terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReproLoss<T> {
    pub value: T,
    pub excluded: usize,
}

fn repro_loss<T: Scalar>(
    observed: &JointTracks<T>,
    x: &Joints3D<T>,
    rig: &StereoRig<T>,
    c: T,
    mut grad: Option<(&mut [Vector3<T>], T)>,
) -> ReproLoss<T> {
    let mut total = T::zero();
    let mut excluded = 0;
    for k in 0..x.positions.len() {
        if !x.valid[k] || !observed.valid[k] {
            continue;
        }
        let p = &x.positions[k];
        let (Some((a, ja)), Some((b, jb))) = (project_with_jacobian(&rig.real, p), project_with_jacobian(&rig.virt, p))
        else {
            excluded += 1;
            continue;
        };
        let ea = a - observed.real[k];
        let eb = b - observed.mirror[k];
        let (na, nb) = (ea.norm(), eb.norm());
        let r = na + nb;
        total += geman_mcclure(r, c);
        if let Some((g, s)) = grad.as_mut() {
            let dr = geman_mcclure_derivative(r, c) * *s;
            let mut gx = Vector3::zeros();
            if na > T::zero() {
                gx += ja.transpose() * (ea / na);
            }
            if nb > T::zero() {
                gx += jb.transpose() * (eb / nb);
            }
            g[k] += gx * dr;
        }
    }
    ReproLoss { value: total, excluded }
}

/// `Σ ρ(‖Π(X) − u‖ + ‖Π′(X) − u′‖)` against the observed joints.
pub fn loss_repro<T: Scalar>(observed: &JointTracks<T>, x: &Joints3D<T>, rig: &StereoRig<T>, c: T) -> ReproLoss<T> {
    repro_loss(observed, x, rig, c, None)
}

/// Unweighted term values of one objective evaluation. Skipped terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub var: f64,
    pub sym: f64,
    pub anth: f64,
    pub hip: f64,
    pub smooth: f64,
    pub repro: f64,
    pub hip_disabled: bool,
    pub repro_excluded: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation<T: Scalar> {
    pub value: T,
    pub terms: ObjectiveTerms,
    pub joints: Joints3D<T>,
    /// Gradient with respect to the refined real and mirror joints.
    pub gradient: Option<(Vec<Vector2<T>>, Vec<Vector2<T>>)>,
}

/// Weighted body-prior objective over 3D joints only; adds `∂/∂X` into
/// `grad` when supplied.
pub fn prior_objective_3d<T: Scalar>(
    x: &Joints3D<T>,
    observed: &JointTracks<T>,
    rig: &StereoRig<T>,
    bones: &BoneSet,
    cfg: &PriorConfig,
    mut grad: Option<&mut [Vector3<T>]>,
) -> Result<(T, ObjectiveTerms)> {
    let w = &cfg.weights;
    let mut terms = ObjectiveTerms::default();
    let mut total = T::zero();
    let need_lengths = w.var > 0.0 || w.sym > 0.0 || w.anth > 0.0;
    let lengths = if need_lengths { Some(bone_lengths(x, bones)) } else { None };
    let mut dl = grad.as_ref().map(|_| LengthGrad::new(bones.len(), x.n_frames));
    if let Some(l) = &lengths {
        let mut scaled = |weight: f64, f: &mut dyn FnMut(Option<&mut LengthGrad<T>>) -> Result<T>| -> Result<T> {
            if weight == 0.0 {
                return Ok(T::zero());
            }
            match dl.as_mut() {
                Some(d) => {
                    let mut local = LengthGrad::new(bones.len(), x.n_frames);
                    let v = f(Some(&mut local))?;
                    let wt = T::lit(weight);
                    for (row, lrow) in d.d.iter_mut().zip(&local.d) {
                        for (a, b) in row.iter_mut().zip(lrow) {
                            *a += *b * wt;
                        }
                    }
                    Ok(v)
                }
                None => f(None),
            }
        };
        let v = scaled(w.var, &mut |d| variation_loss(l, cfg.variation, d))?;
        terms.var = v.as_f64();
        total += v * T::lit(w.var);
        let v = scaled(w.sym, &mut |d| Ok(symmetry_loss(l, bones, d)))?;
        terms.sym = v.as_f64();
        total += v * T::lit(w.sym);
        let v = scaled(w.anth, &mut |d| anthropometric_loss(l, bones, &cfg.table, d))?;
        terms.anth = v.as_f64();
        total += v * T::lit(w.anth);
    }
    if let (Some(g), Some(d)) = (grad.as_deref_mut(), dl.as_ref()) {
        d.scatter(x, bones, T::one(), g);
    }
    if w.hip > 0.0 {
        let h = hip_loss(x, grad.as_deref_mut().map(|g| (g, T::lit(w.hip))));
        terms.hip = h.value.as_f64();
        terms.hip_disabled = h.disabled;
        total += h.value * T::lit(w.hip);
    }
    if w.smooth > 0.0 {
        let v = smooth_loss(x, grad.as_deref_mut().map(|g| (g, T::lit(w.smooth))))?;
        terms.smooth = v.as_f64();
        total += v * T::lit(w.smooth);
    }
    if w.repro > 0.0 {
        let r = repro_loss(observed, x, rig, T::lit(cfg.gm_scale), grad.as_deref_mut().map(|g| (g, T::lit(w.repro))));
        terms.repro = r.value.as_f64();
        terms.repro_excluded = r.excluded;
        total += r.value * T::lit(w.repro);
    }
    Ok((total, terms))
}

/// The full objective as a function of the refined 2D joints: triangulate
/// them under `ext`, then evaluate the weighted prior.
pub fn total_objective<T: Scalar>(
    refined: &JointTracks<T>,
    observed: &JointTracks<T>,
    k: &Intrinsics<T>,
    ext: &VirtualExtrinsics<T>,
    bones: &BoneSet,
    cfg: &PriorConfig,
    with_gradient: bool,
) -> Result<Evaluation<T>> {
    let rig = StereoRig::new(k, ext);
    let n = refined.real.len();
    let mut x = Joints3D::new(refined.n_frames, refined.n_joints);
    let mut jac = vec![Matrix3x4::zeros(); n];
    for i in 0..n {
        if !refined.valid[i] {
            continue;
        }
        if let Ok((p, j)) = triangulate_point_with_jacobian(&rig, &refined.real[i], &refined.mirror[i]) {
            let (z, zv) = rig.depths(&p);
            if z > T::zero() && zv > T::zero() {
                x.positions[i] = p;
                x.valid[i] = true;
                jac[i] = j;
            }
        }
    }
    let mut g3 = with_gradient.then(|| vec![Vector3::zeros(); n]);
    let (value, terms) = prior_objective_3d(&x, observed, &rig, bones, cfg, g3.as_deref_mut())?;
    if !value.is_finite() {
        return Err(Error::DivergedObjective);
    }
    let gradient = g3.map(|g3| {
        let mut gr = vec![Vector2::zeros(); n];
        let mut gm = vec![Vector2::zeros(); n];
        for i in 0..n {
            if x.valid[i] {
                let g = jac[i].transpose() * g3[i];
                gr[i] = Vector2::new(g[0], g[1]);
                gm[i] = Vector2::new(g[2], g[3]);
            }
        }
        (gr, gm)
    });
    Ok(Evaluation { value, terms, joints: x, gradient })
}

/// Number of joints in a track layout compatible with [`BoneSet::standard`].
pub const N_JOINTS: usize = ELIGIBLE.len();

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{extrinsics_from_mirror, project, real_projection_matrix, virtual_projection_matrix, MirrorPlane};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ix(j: JointId) -> usize {
        j.track_index().unwrap()
    }

    /// A symmetric, table-exact standing skeleton with colinear hips (metres).
    fn template() -> [Vector3<f64>; N_JOINTS] {
        use JointId::*;
        let femur = 0.45;
        let t = AnthropometricTable::default();
        let mut p = [Vector3::zeros(); N_JOINTS];
        let hip = t.hip * femur;
        let scap = t.scapular * femur;
        p[ix(MidHip)] = Vector3::new(0.0, 0.0, 0.0);
        p[ix(LHip)] = Vector3::new(hip, 0.0, 0.0);
        p[ix(RHip)] = Vector3::new(-hip, 0.0, 0.0);
        for (s, h, k, a) in [(1.0, LHip, LKnee, LAnkle), (-1.0, RHip, RKnee, RAnkle)] {
            p[ix(k)] = p[ix(h)] + Vector3::new(0.0, femur, 0.0);
            p[ix(a)] = p[ix(k)] + Vector3::new(0.0, t.tibia * femur, 0.0);
            let _ = s;
        }
        p[ix(Neck)] = Vector3::new(0.0, -0.5, 0.0);
        for (s, sh, el, wr) in [(1.0, LShoulder, LElbow, LWrist), (-1.0, RShoulder, RElbow, RWrist)] {
            p[ix(sh)] = p[ix(Neck)] + Vector3::new(s * scap, 0.0, 0.0);
            p[ix(el)] = p[ix(sh)] + Vector3::new(0.0, t.humerus * femur, 0.0);
            p[ix(wr)] = p[ix(el)] + Vector3::new(0.0, t.ulna * femur, 0.0);
        }
        p
    }

    fn static_skeleton(frames: usize, offset: Vector3<f64>) -> Joints3D<f64> {
        let tpl = template();
        let mut x = Joints3D::new(frames, N_JOINTS);
        for t in 0..frames {
            for i in 0..N_JOINTS {
                x.set(t, i, tpl[i] + offset);
            }
        }
        x
    }

    fn random_joints(rng: &mut impl Rng, frames: usize) -> Joints3D<f64> {
        let tpl = template();
        let mut x = Joints3D::new(frames, N_JOINTS);
        for t in 0..frames {
            for i in 0..N_JOINTS {
                let jitter = Vector3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                x.set(t, i, tpl[i] + Vector3::new(0.0, 0.0, 3.0) + jitter);
            }
        }
        x
    }

    #[test]
    fn bone_set_structure() {
        let b = BoneSet::standard();
        assert_eq!(b.len(), 12);
        for k in 0..12 {
            let m = b.counterpart(k);
            assert_ne!(m, k);
            assert_eq!(b.counterpart(m), k);
            let (bk, bm) = (b.bones()[k], b.bones()[m]);
            // the mirror image of a bone under joint swapping is its counterpart
            let sw = |j| crate::pose::mirror_joint_match(j).unwrap();
            assert_eq!((sw(bk.from), sw(bk.to)), (bm.from, bm.to));
        }
        AnthropometricTable::default().validate().unwrap();
        assert!(AnthropometricTable { hip: 1.6, ..Default::default() }.validate().is_err());
        assert!(LossWeights { sym: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn bone_length_examples() {
        let bones = BoneSet::standard();
        let mut x = Joints3D::new(1, N_JOINTS);
        x.set(0, ix(JointId::LHip), Vector3::new(0.0, 0.0, 0.0));
        x.set(0, ix(JointId::LKnee), Vector3::new(0.0, 3.0, 4.0));
        assert_eq!(bone_length(&x, &bones, 0, 0).unwrap(), 5.0);
        assert!(matches!(bone_length(&x, &bones, 1, 0), Err(Error::MissingJoint { .. })));

        let s = static_skeleton(5, Vector3::zeros());
        let l = bone_lengths(&s, &bones);
        for row in &l.values {
            assert!(row.iter().all(|v| *v == row[0]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_joints(&mut rng, 3);
        let l = bone_lengths(&r, &bones);
        for (k, b) in bones.bones().iter().enumerate() {
            let (i, j) = b.endpoints();
            for t in 0..3 {
                let (a, c) = (r.positions[r.index(t, i)], r.positions[r.index(t, j)]);
                let d = ((a.x - c.x).powi(2) + (a.y - c.y).powi(2) + (a.z - c.z).powi(2)).sqrt();
                assert_relative_eq!(l.get(k, t).unwrap(), d, epsilon = 1e-15);
            }
        }
    }

    fn one_bone(values: &[f64]) -> BoneLengths<f64> {
        BoneLengths { n_frames: values.len(), values: vec![values.iter().map(|v| Some(*v)).collect()] }
    }

    #[test]
    fn variation_examples() {
        assert_eq!(loss_var(&one_bone(&[2.0, 2.0, 2.0]), VariationMode::StdDev).unwrap(), 0.0);
        // population std of {1,1,1,2} is sqrt(3)/4
        let v = loss_var(&one_bone(&[1.0, 1.0, 1.0, 2.0]), VariationMode::StdDev).unwrap();
        assert_relative_eq!(v, (3.0f64).sqrt() / 4.0 / 1.25, epsilon = 1e-15);
        let r = loss_var(&one_bone(&[1.0, 1.0, 1.0, 2.0]), VariationMode::Range).unwrap();
        assert_relative_eq!(r, 1.0 / 1.25, epsilon = 1e-15);
        assert_eq!(loss_var(&one_bone(&[0.0, 0.0]), VariationMode::StdDev), Err(Error::ZeroMeanLength("bone 0".into())));
        assert!(matches!(loss_var(&one_bone(&[1.0]), VariationMode::StdDev), Err(Error::TooFewFrames { .. })));

        let bones = BoneSet::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_joints(&mut rng, 6);
        let a = loss_var(&bone_lengths(&x, &bones), VariationMode::StdDev).unwrap();
        let b = loss_var(&bone_lengths(&x.map_positions(|p| p * 10.0), &bones), VariationMode::StdDev).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-9);
    }

    #[test]
    fn symmetry_examples() {
        let bones = BoneSet::standard();
        let s = static_skeleton(2, Vector3::zeros());
        assert_eq!(loss_sym(&bone_lengths(&s, &bones), &bones), 0.0);
        let mut l = bone_lengths(&static_skeleton(1, Vector3::zeros()), &bones);
        let (lf, rf) = bones.femurs();
        l.values[rf][0] = Some(1.0);
        l.values[lf][0] = Some(1.1);
        assert_relative_eq!(loss_sym(&l, &bones), 0.2, epsilon = 1e-12);
        // global left/right relabeling
        let mut swapped = l.clone();
        for k in 0..bones.len() {
            swapped.values[k] = l.values[bones.counterpart(k)].clone();
        }
        assert_eq!(loss_sym(&swapped, &bones), loss_sym(&l, &bones));
    }

    #[test]
    fn anthropometric_examples() {
        let bones = BoneSet::standard();
        let t = AnthropometricTable::default();
        let s = static_skeleton(3, Vector3::zeros());
        assert!(loss_anth(&bone_lengths(&s, &bones), &bones, &t).unwrap() < 1e-24);
        let scaled = s.map_positions(|p| p * 3.7);
        assert!(loss_anth(&bone_lengths(&scaled, &bones), &bones, &t).unwrap() < 1e-24);

        let mut l = bone_lengths(&static_skeleton(1, Vector3::zeros()), &bones);
        let femur = l.get(0, 0).unwrap();
        l.values[2][0] = Some((t.tibia + 0.1) * femur);
        assert_relative_eq!(loss_anth(&l, &bones, &t).unwrap(), 0.01, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_joints(&mut rng, 4);
        let a = loss_anth(&bone_lengths(&x, &bones), &bones, &t).unwrap();
        let b = loss_anth(&bone_lengths(&x.map_positions(|p| p * 0.01), &bones), &bones, &t).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-9);

        let mut z = BoneLengths { n_frames: 1, values: vec![vec![Some(0.0)]; 12] };
        z.values[5][0] = Some(1.0);
        assert_eq!(loss_anth(&z, &bones, &t), Err(Error::ZeroFemur(0)));
    }

    #[test]
    fn hip_examples() {
        let s = static_skeleton(2, Vector3::zeros());
        let h = loss_hip(&s);
        assert_eq!(h.value, 0.0);
        assert!(!h.disabled);
        let (mid, l, r) = hip_indices();
        let mut x = Joints3D::new(1, N_JOINTS);
        x.set(0, mid, Vector3::zeros());
        x.set(0, l, Vector3::new(-1.0, 0.0, 0.0));
        x.set(0, r, Vector3::new(0.0, -1.0, 0.0));
        assert_relative_eq!(loss_hip(&x).value, 1.0, epsilon = 1e-15);
        x.valid[mid] = false;
        let h = loss_hip(&x);
        assert_eq!(h.value, 0.0);
        assert!(h.disabled);
    }

    #[test]
    fn smooth_examples() {
        assert_eq!(loss_smooth(&static_skeleton(5, Vector3::zeros())).unwrap(), 0.0);
        let tpl = template();
        let mut lin = Joints3D::new(6, N_JOINTS);
        let mut quad = Joints3D::new(6, N_JOINTS);
        for t in 0..6 {
            let tf = t as f64;
            for i in 0..N_JOINTS {
                let vel = Vector3::new(0.1 * i as f64, -0.2, 0.05);
                lin.set(t, i, tpl[i] + vel * tf);
                quad.set(t, i, tpl[i]);
            }
            quad.set(t, 0, Vector3::new(0.0, 0.0, tf * tf));
        }
        assert!(loss_smooth(&lin).unwrap() < 1e-24);
        assert_relative_eq!(loss_smooth(&quad).unwrap(), 4.0 * 4.0, epsilon = 1e-12);
        assert!(matches!(loss_smooth(&static_skeleton(2, Vector3::zeros())), Err(Error::TooFewFrames { .. })));
    }

    #[test]
    fn geman_mcclure_examples() {
        assert_eq!(geman_mcclure(0.0, 10.0), 0.0);
        assert_eq!(geman_mcclure(10.0, 10.0), 0.5);
        assert!(geman_mcclure(1e9, 10.0) > 1.0 - 1e-12);
        let mut last = 0.0;
        for i in 1..100 {
            let v = geman_mcclure(i as f64 * 0.7, 10.0);
            assert!(v > last);
            last = v;
        }
        assert_eq!(geman_mcclure(-3.0, 2.0), geman_mcclure(3.0, 2.0));
    }

    struct Scene {
        k: Intrinsics<f64>,
        ext: VirtualExtrinsics<f64>,
        observed: JointTracks<f64>,
    }

    fn scene(rng: &mut impl Rng, frames: usize, noise: f64) -> Scene {
        let k = Intrinsics::new(1100.0, 1100.0, 960.0, 540.0).unwrap();
        let mirror = MirrorPlane::new(Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.2..0.2), 1.0), 5.0).unwrap();
        let ext = extrinsics_from_mirror(&mirror);
        let (p, pv) = (real_projection_matrix(&k), virtual_projection_matrix(&k, &ext));
        let x = random_joints(rng, frames);
        let mut observed = JointTracks::new(frames, N_JOINTS);
        for t in 0..frames {
            for i in 0..N_JOINTS {
                let xi = x.get(t, i).unwrap();
                let mut n = || Vector2::new(rng.random_range(-noise..=noise), rng.random_range(-noise..=noise));
                let (a, b) = (project(&p, xi).unwrap() + n(), project(&pv, xi).unwrap() + n());
                observed.set(t, i, a, b);
            }
        }
        Scene { k, ext, observed }
    }

    #[test]
    fn repro_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = scene(&mut rng, 4, 0.0);
        let rig = StereoRig::new(&s.k, &s.ext);
        let cfg = PriorConfig { weights: LossWeights { repro: 1.0, ..LossWeights::zero() }, ..Default::default() };
        let ev = total_objective(&s.observed, &s.observed, &s.k, &s.ext, &BoneSet::standard(), &cfg, false).unwrap();
        assert!(ev.value < 1e-9);

        // one observed joint perturbed: the loss grows
        let mut obs = s.observed.clone();
        obs.real[5].x += 3.0;
        let r0 = loss_repro(&s.observed, &ev.joints, &rig, 10.0).value;
        let r1 = loss_repro(&obs, &ev.joints, &rig, 10.0).value;
        assert!(r1 > r0);

        // term-by-term oracle
        let (p, pv) = (real_projection_matrix(&s.k), virtual_projection_matrix(&s.k, &s.ext));
        let mut sum = 0.0;
        for kk in 0..obs.real.len() {
            let x = ev.joints.positions[kk];
            let a = (project(&p, &x).unwrap() - obs.real[kk]).norm();
            let b = (project(&pv, &x).unwrap() - obs.mirror[kk]).norm();
            sum += (a + b).powi(2) / ((a + b).powi(2) + 100.0);
        }
        assert_relative_eq!(r1, sum, max_relative = 1e-12);
    }

    #[test]
    fn zero_cases_of_the_full_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = scene(&mut rng, 5, 2.0);
        let bones = BoneSet::standard();
        let cfg = PriorConfig { weights: LossWeights::zero(), ..Default::default() };
        let ev = total_objective(&s.observed, &s.observed, &s.k, &s.ext, &bones, &cfg, true).unwrap();
        assert_eq!(ev.value, 0.0);
        let (gr, gm) = ev.gradient.unwrap();
        assert!(gr.iter().chain(&gm).all(|g| *g == Vector2::zeros()));

        // single-term reduction and the composition oracle
        let only_repro = PriorConfig { weights: LossWeights { repro: 1.0, ..LossWeights::zero() }, ..Default::default() };
        let ev = total_objective(&s.observed, &s.observed, &s.k, &s.ext, &bones, &only_repro, false).unwrap();
        let rig = StereoRig::new(&s.k, &s.ext);
        assert_eq!(ev.value, loss_repro(&s.observed, &ev.joints, &rig, 10.0).value);

        let cfg = PriorConfig::default();
        let w = cfg.weights;
        let ev = total_objective(&s.observed, &s.observed, &s.k, &s.ext, &bones, &cfg, false).unwrap();
        let l = bone_lengths(&ev.joints, &bones);
        let manual = w.var * loss_var(&l, VariationMode::StdDev).unwrap()
            + w.sym * loss_sym(&l, &bones)
            + w.anth * loss_anth(&l, &bones, &cfg.table).unwrap()
            + w.hip * loss_hip(&ev.joints).value
            + w.smooth * loss_smooth(&ev.joints).unwrap()
            + w.repro * loss_repro(&s.observed, &ev.joints, &rig, 10.0).value;
        assert_relative_eq!(ev.value, manual, max_relative = 1e-12);

        // a zero weight skips the term entirely, even when it would fail
        let short = scene(&mut rng, 2, 1.0);
        let no_smooth = PriorConfig { weights: LossWeights { smooth: 0.0, ..Default::default() }, ..Default::default() };
        total_objective(&short.observed, &short.observed, &short.k, &short.ext, &bones, &no_smooth, false).unwrap();
        assert!(total_objective(&short.observed, &short.observed, &short.k, &short.ext, &bones, &cfg, false).is_err());
    }

    fn finite_difference_check(seed: u64, cfg: &PriorConfig) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = scene(&mut rng, 4, 3.0);
        let bones = BoneSet::standard();
        let mut refined = s.observed.clone();
        for i in 0..refined.real.len() {
            refined.real[i] += Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            refined.mirror[i] += Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        }
        let eval = |r: &JointTracks<f64>| total_objective(r, &s.observed, &s.k, &s.ext, &bones, cfg, false).unwrap().value;
        let ev = total_objective(&refined, &s.observed, &s.k, &s.ext, &bones, cfg, true).unwrap();
        let (gr, gm) = ev.gradient.unwrap();
        let h = 1e-4;
        let (mut num, mut diff) = (0.0f64, 0.0f64);
        for i in 0..refined.real.len() {
            for view in 0..2 {
                for c in 0..2 {
                    let mut p = refined.clone();
                    let mut m = refined.clone();
                    let (pp, mm) = if view == 0 { (&mut p.real[i], &mut m.real[i]) } else { (&mut p.mirror[i], &mut m.mirror[i]) };
                    pp[c] += h;
                    mm[c] -= h;
                    let fd = (eval(&p) - eval(&m)) / (2.0 * h);
                    let an = if view == 0 { gr[i][c] } else { gm[i][c] };
                    num += fd * fd;
                    diff += (fd - an) * (fd - an);
                }
            }
        }
        (diff / num).sqrt()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..100 {
            let rel = finite_difference_check(1000 + seed, &PriorConfig::default());
            assert!(rel < 1e-3, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn per_term_gradients_match_finite_differences() {
        let unit = LossWeights::zero();
        for (i, w) in [
            LossWeights { var: 1.0, ..unit },
            LossWeights { sym: 1.0, ..unit },
            LossWeights { anth: 1.0, ..unit },
            LossWeights { hip: 1.0, ..unit },
            LossWeights { smooth: 1.0, ..unit },
            LossWeights { repro: 1.0, ..unit },
        ]
        .into_iter()
        .enumerate()
        {
            let cfg = PriorConfig { weights: w, ..Default::default() };
            let rel = finite_difference_check(7 + i as u64, &cfg);
            assert!(rel < 1e-3, "term {i}: relative error {rel}");
            let range = PriorConfig { variation: VariationMode::Range, ..cfg };
            assert!(finite_difference_check(70 + i as u64, &range) < 1e-3);
        }
    }
}
