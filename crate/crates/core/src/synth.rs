//! Synthetic scenes with ground truth: a parametric articulated skeleton in
//! front of a mirror, projected into the real and virtual views with pixel
//! noise.

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_prior::{AnthropometricTable, BoneKind};
use crate::error::{Error, Result};
use crate::geometry::{
    extrinsics_from_mirror, project, real_projection_matrix, reflect_point, Intrinsics, MirrorPlane,
    VirtualExtrinsics,
};
use crate::pose::{mirror_joint_match, JointId, Keypoint2D, KeypointMap, PoseFrame, PoseSequencePair, ELIGIBLE};
use crate::tracks::Joints3D;

/// Pixel noise radial bias used by the default benchmark.
pub const DEFAULT_NOISE_MEAN: f64 = 0.076;
/// Pixel noise standard deviation used by the default benchmark.
pub const DEFAULT_NOISE_STD: f64 = 4.0;
/// Minimum fraction of (joint, frame) samples visible in both views.
pub const MIN_IN_BOUNDS: f64 = 0.95;
pub const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Radial bias in pixels, applied in a random direction per sample.
    pub mean: f64,
    /// Per-axis Gaussian standard deviation in pixels.
    pub std: f64,
    /// Probability that a sample is dropped.
    #[serde(default)]
    pub dropout: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { mean: 0.0, std: 0.0, dropout: 0.0 }
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mean: DEFAULT_NOISE_MEAN, std: DEFAULT_NOISE_STD, dropout: 0.0 }
    }
}

/// Skeleton proportions and a sinusoidal motion model. Angles in radians,
/// frequencies in Hz, lengths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub femur: f64,
    /// Per-kind multiplier on the table ratio, `[tibia, humerus, ulna, scapular, hip]`.
    pub ratio_scale: [f64; 5],
    /// Mid-hip to neck distance relative to the femur.
    pub torso: f64,
    /// Mid-hip position at t = 0, in the camera frame. Chosen by placement
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 3]>,
    pub velocity: [f64; 3],
    pub path_radius: f64,
    pub path_frequency: f64,
    pub yaw: f64,
    pub yaw_amplitude: f64,
    pub yaw_frequency: f64,
    pub leg_amplitude: f64,
    pub knee_amplitude: f64,
    pub leg_frequency: f64,
    pub arm_amplitude: f64,
    pub elbow_amplitude: f64,
    pub arm_abduction: f64,
    pub arm_frequency: f64,
    pub lean_amplitude: f64,
    pub phase: f64,
}

impl MotionSpec {
    /// A table-exact skeleton in a fixed non-planar pose, translating at
    /// constant velocity. Every body-prior term vanishes on it.
    pub fn rigid(yaw: f64, velocity: [f64; 3]) -> Self {
        Self {
            femur: 0.45,
            ratio_scale: [1.0; 5],
            torso: 1.2,
            center: None,
            velocity,
            path_radius: 0.0,
            path_frequency: 0.0,
            yaw,
            yaw_amplitude: 0.0,
            yaw_frequency: 0.0,
            leg_amplitude: 0.0,
            knee_amplitude: 0.0,
            leg_frequency: 0.0,
            arm_amplitude: 0.0,
            elbow_amplitude: 0.0,
            arm_abduction: 0.0,
            arm_frequency: 0.0,
            lean_amplitude: 0.0,
            phase: 0.0,
        }
    }

    /// Random proportions (each ratio within ±10% of the table) and motion.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut ratio_scale = [1.0; 5];
        for r in ratio_scale.iter_mut() {
            *r = 1.0 + rng.random_range(-0.1..0.1);
        }
        Self {
            femur: rng.random_range(0.38..0.48),
            ratio_scale,
            torso: rng.random_range(1.1..1.3),
            center: None,
            velocity: [rng.random_range(-0.05..0.05), 0.0, rng.random_range(-0.05..0.05)],
            path_radius: rng.random_range(0.05..0.25),
            path_frequency: rng.random_range(0.1..0.3),
            yaw: rng.random_range(-0.8..0.8),
            yaw_amplitude: rng.random_range(0.3..0.9),
            yaw_frequency: rng.random_range(0.1..0.4),
            leg_amplitude: rng.random_range(0.2..0.6),
            knee_amplitude: rng.random_range(0.2..0.9),
            leg_frequency: rng.random_range(0.4..1.0),
            arm_amplitude: rng.random_range(0.3..1.0),
            elbow_amplitude: rng.random_range(0.2..1.2),
            arm_abduction: rng.random_range(0.1..0.6),
            arm_frequency: rng.random_range(0.3..0.9),
            lean_amplitude: rng.random_range(0.0..0.15),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn length(&self, table: &AnthropometricTable, kind: BoneKind) -> f64 {
        let scale = match kind {
            BoneKind::Femur => 1.0,
            BoneKind::Tibia => self.ratio_scale[0],
            BoneKind::Humerus => self.ratio_scale[1],
            BoneKind::Ulna => self.ratio_scale[2],
            BoneKind::Scapular => self.ratio_scale[3],
            BoneKind::Hip => self.ratio_scale[4],
        };
        self.femur * table.ratio(kind) * scale
    }

    /// Joints at time `t` relative to the mid-hip start position, in
    /// [`ELIGIBLE`] order. Camera axes: x right, y down, z forward.
    pub fn pose_at(&self, table: &AnthropometricTable, t: f64) -> [Vector3<f64>; 14] {
        let w = |f: f64| 2.0 * PI * f * t;
        let yaw = self.yaw + self.yaw_amplitude * (w(self.yaw_frequency) + self.phase).sin();
        let up = Vector3::new(0.0, -1.0, 0.0);
        // facing the camera at yaw 0
        let fwd = Vector3::new(yaw.sin(), 0.0, -yaw.cos());
        let left = up.cross(&fwd);
        let path = Vector3::new(
            self.path_radius * (w(self.path_frequency)).cos() - self.path_radius,
            0.0,
            self.path_radius * (w(self.path_frequency)).sin(),
        );
        let mid = Vector3::from(self.velocity) * t + path;
        let len = |k| self.length(table, k);
        let limb = |a: f64, side: f64, abd: f64| -up * (a.cos() * abd.cos()) + fwd * (a.sin() * abd.cos()) + left * (side * abd.sin());

        let mut p = [Vector3::zeros(); 14];
        let ix = |j: JointId| j.track_index().expect("eligible");
        let lean = self.lean_amplitude * (w(self.leg_frequency) * 2.0).sin();
        let neck = mid + (up * lean.cos() + fwd * lean.sin()) * (self.torso * self.femur);
        p[ix(JointId::MidHip)] = mid;
        p[ix(JointId::Neck)] = neck;
        for (side, hip, knee, ankle, sh, el, wr) in [
            (1.0, JointId::LHip, JointId::LKnee, JointId::LAnkle, JointId::LShoulder, JointId::LElbow, JointId::LWrist),
            (-1.0, JointId::RHip, JointId::RKnee, JointId::RAnkle, JointId::RShoulder, JointId::RElbow, JointId::RWrist),
        ] {
            let swing = w(self.leg_frequency) + self.phase + if side > 0.0 { 0.0 } else { PI };
            let flex = self.leg_amplitude * swing.sin() + 0.15;
            let bend = self.knee_amplitude * 0.5 * (1.0 + (swing + 0.5 * PI).sin()) + 0.1;
            let h = mid + left * (side * len(BoneKind::Hip));
            let k = h + limb(flex, 0.0, 0.0) * len(BoneKind::Femur);
            let a = k + limb(flex - bend, 0.0, 0.0) * len(BoneKind::Tibia);
            p[ix(hip)] = h;
            p[ix(knee)] = k;
            p[ix(ankle)] = a;

            let aswing = w(self.arm_frequency) + self.phase + if side > 0.0 { PI } else { 0.0 };
            let fore = self.arm_amplitude * aswing.sin() + 0.3;
            let elbow = self.elbow_amplitude * 0.5 * (1.0 + aswing.cos()) + 0.2;
            let s = neck + left * (side * len(BoneKind::Scapular));
            let e = s + limb(fore, side, self.arm_abduction) * len(BoneKind::Humerus);
            let r = e + limb(fore + elbow, side, self.arm_abduction) * len(BoneKind::Ulna);
            p[ix(sh)] = s;
            p[ix(el)] = e;
            p[ix(wr)] = r;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub intrinsics: Intrinsics<f64>,
    pub image_width: f64,
    pub image_height: f64,
    pub mirror: MirrorPlane<f64>,
    pub frames: usize,
    pub frame_rate: f64,
    pub motion: MotionSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub table: AnthropometricTable,
    pub rng_seed: u64,
}

/// 1920×1080 with a wide lens, so a full body fits at about one metre.
pub fn default_intrinsics() -> Intrinsics<f64> {
    Intrinsics { fx: 700.0, fy: 700.0, cx: 960.0, cy: 540.0, skew: 0.0 }
}

impl SceneSpec {
    pub fn new(mirror: MirrorPlane<f64>, motion: MotionSpec, frames: usize, noise: NoiseSpec, rng_seed: u64) -> Self {
        Self {
            intrinsics: default_intrinsics(),
            image_width: 1920.0,
            image_height: 1080.0,
            mirror,
            frames,
            frame_rate: 30.0,
            motion,
            noise,
            table: AnthropometricTable::default(),
            rng_seed,
        }
    }

    fn relative_joints(&self) -> Vec<[Vector3<f64>; 14]> {
        (0..self.frames)
            .map(|t| self.motion.pose_at(&self.table, t as f64 / self.frame_rate))
            .collect()
    }

    fn in_image(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.image_width && p.y < self.image_height
    }
}

/// Fraction of samples visible in both views with the mid-hip starting at
/// `center`, or `None` if any joint is behind a camera or the mirror.
fn visibility(spec: &SceneSpec, rel: &[[Vector3<f64>; 14]], center: &Vector3<f64>) -> Option<f64> {
    let p = real_projection_matrix(&spec.intrinsics);
    let (n, d) = (spec.mirror.normal(), spec.mirror.distance());
    let mut inside = 0usize;
    let mut total = 0usize;
    for frame in rel {
        for j in frame {
            let x = center + j;
            if n.dot(&x) > d - 0.1 || x.z < 0.3 {
                return None;
            }
            let xr = reflect_point(&x, &spec.mirror);
            let (Ok(a), Ok(b)) = (project(&p, &x), project(&p, &xr)) else { return None };
            total += 1;
            if spec.in_image(&a) && spec.in_image(&b) {
                inside += 1;
            }
        }
    }
    Some(inside as f64 / total.max(1) as f64)
}

/// Searches a mid-hip start position that keeps the subject between the
/// camera and the mirror and visible in both views.
pub fn place_subject(spec: &SceneSpec, rng: &mut impl Rng) -> Result<[f64; 3]> {
    let rel = spec.relative_joints();
    let kinv = spec.intrinsics.inverse()?;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let pix = nalgebra::Vector3::new(
            rng.random_range(0.0..spec.image_width),
            rng.random_range(0.0..spec.image_height),
            1.0,
        );
        let ray = kinv * pix;
        let depth = rng.random_range(0.8..(spec.mirror.distance() * 1.5).max(1.0));
        let c = ray * depth;
        if let Some(v) = visibility(spec, &rel, &c) {
            if v >= MIN_IN_BOUNDS {
                return Ok([c.x, c.y, c.z]);
            }
        }
    }
    Err(Error::PlacementFailed(PLACEMENT_ATTEMPTS))
}

/// Everything known about a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mirror: MirrorPlane<f64>,
    #[serde(flatten)]
    pub extrinsics: VirtualExtrinsics<f64>,
    /// Joint positions per frame in [`ELIGIBLE`] order.
    #[serde(rename = "X")]
    pub joints: Vec<Vec<[f64; 3]>>,
    #[serde(default)]
    pub joint_names: Vec<JointId>,
}

impl GroundTruth {
    pub fn joints3d(&self) -> Joints3D<f64> {
        let n = ELIGIBLE.len();
        let mut x = Joints3D::new(self.joints.len(), n);
        for (t, frame) in self.joints.iter().enumerate() {
            for (i, p) in frame.iter().enumerate().take(n) {
                x.set(t, i, Vector3::from(*p));
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub poses: PoseSequencePair,
    pub truth: GroundTruth,
}

fn noisy(p: Vector2<f64>, noise: &NoiseSpec, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Vector2<f64> {
    let theta = rng.random_range(0.0..2.0 * PI);
    let bias = Vector2::new(theta.cos(), theta.sin()) * noise.mean;
    p + bias + Vector2::new(normal.sample(rng), normal.sample(rng))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    if spec.frames == 0 {
        return Err(Error::InvalidConfig("scene needs at least one frame".into()));
    }
    if !(spec.noise.std >= 0.0 && spec.noise.mean >= 0.0 && (0.0..=1.0).contains(&spec.noise.dropout)) {
        return Err(Error::InvalidConfig("noise parameters out of range".into()));
    }
    spec.intrinsics.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut spec = spec.clone();
    let center = match spec.motion.center {
        Some(c) => {
            let rel = spec.relative_joints();
            match visibility(&spec, &rel, &Vector3::from(c)) {
                Some(v) if v >= MIN_IN_BOUNDS => c,
                _ => return Err(Error::PlacementFailed(0)),
            }
        }
        None => place_subject(&spec, &mut rng)?,
    };
    spec.motion.center = Some(center);
    let center = Vector3::from(center);
    let p = real_projection_matrix(&spec.intrinsics);
    let normal = Normal::new(0.0, spec.noise.std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    for (t, rel) in spec.relative_joints().iter().enumerate() {
        let mut real = KeypointMap::new();
        let mut mirror = KeypointMap::new();
        let mut xs = Vec::with_capacity(14);
        for (i, j) in ELIGIBLE.iter().enumerate() {
            let x = center + rel[i];
            xs.push([x.x, x.y, x.z]);
            let a = noisy(project(&p, &x)?, &spec.noise, &mut rng, &normal);
            let b = noisy(project(&p, &reflect_point(&x, &spec.mirror))?, &spec.noise, &mut rng, &normal);
            let keep_a = spec.in_image(&a) && !rng.random_bool(spec.noise.dropout);
            let keep_b = spec.in_image(&b) && !rng.random_bool(spec.noise.dropout);
            real.insert(*j, if keep_a { Keypoint2D::new(a.x, a.y, 1.0) } else { Keypoint2D::invalid() });
            // the mirror person's joints carry swapped left/right labels
            let label = mirror_joint_match(*j)?;
            mirror.insert(label, if keep_b { Keypoint2D::new(b.x, b.y, 1.0) } else { Keypoint2D::invalid() });
        }
        frames.push(PoseFrame { index: t, real, mirror });
        truth.push(xs);
    }
    let poses = PoseSequencePair { frame_rate: spec.frame_rate, frames, assignment: None };
    let truth = GroundTruth {
        mirror: spec.mirror,
        extrinsics: extrinsics_from_mirror(&spec.mirror),
        joints: truth,
        joint_names: ELIGIBLE.to_vec(),
    };
    Ok(Scene { spec, poses, truth })
}

/// Random mirror: distance in `[1.5, 4]`, normal within 45° of the optical
/// axis and facing away from the camera.
pub fn random_mirror(rng: &mut impl Rng) -> MirrorPlane<f64> {
    let max = 45f64.to_radians();
    // uniform on the spherical cap
    let cos_t = rng.random_range(max.cos()..1.0);
    let sin_t = (1.0 - cos_t * cos_t).sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let n = Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
    MirrorPlane::new(n, rng.random_range(1.5..4.0)).expect("valid mirror")
}

/// `n_scenes` placed scene specs. Mirrors that admit no placement are
/// redrawn.
pub fn generate_benchmark_suite(n_scenes: usize, frames: usize, noise: NoiseSpec, seed: u64) -> Result<Vec<SceneSpec>> {
    if n_scenes == 0 || frames == 0 {
        return Err(Error::InvalidConfig("suite needs at least one scene and one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_scenes);
    let mut failures = 0;
    while out.len() < n_scenes {
        let mirror = random_mirror(&mut rng);
        let motion = MotionSpec::random(&mut rng);
        let scene_seed = rng.random();
        let mut spec = SceneSpec::new(mirror, motion, frames, noise, scene_seed);
        match place_subject(&spec, &mut rng) {
            Ok(c) => {
                spec.motion.center = Some(c);
                out.push(spec);
            }
            Err(_) => {
                failures += 1;
                if failures > 50 * n_scenes {
                    return Err(Error::PlacementFailed(failures));
                }
            }
        }
    }
    Ok(out)
}
