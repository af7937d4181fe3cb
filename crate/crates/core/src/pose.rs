//! 2D pose ingestion: OpenPose and the generic sequence format, real/mirror
//! track assignment, and left/right joint matching.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector2;
use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::eight_point::{
    extract_mirror, essential_from_fundamental, solve_constrained_fundamental, CheiralityCheck, Correspondence,
    CorrespondenceSet,
};
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::ransac::epipolar_distance_g;
use crate::tracks::JointTracks;
use crate::triangulation::{triangulate_point, StereoRig};

/// Joints with fewer valid eligible entries are dropped from a frame.
pub const MIN_PERSON_JOINTS: usize = 8;
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.3;
/// Maximum number of frames used by the labeling vote.
pub const ASSIGNMENT_SAMPLE: usize = 100;
/// Relative score gap below which the labeling is ambiguous.
pub const AMBIGUITY_MARGIN: f64 = 0.05;
/// Tracking gate as a fraction of the image width.
pub const TRACK_GATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum JointId {
    LAnkle,
    RAnkle,
    LKnee,
    RKnee,
    LHip,
    RHip,
    MidHip,
    LShoulder,
    RShoulder,
    LElbow,
    RElbow,
    LWrist,
    RWrist,
    Neck,
    // ineligible: face, feet
    Nose,
    LEye,
    REye,
    LEar,
    REar,
    LBigToe,
    LSmallToe,
    LHeel,
    RBigToe,
    RSmallToe,
    RHeel,
}

use JointId::*;

/// Calibration joints in track order.
pub const ELIGIBLE: [JointId; 14] = [
    LAnkle, RAnkle, LKnee, RKnee, LHip, RHip, MidHip, LShoulder, RShoulder, LElbow, RElbow, LWrist, RWrist, Neck,
];

const ALL: [JointId; 25] = [
    LAnkle, RAnkle, LKnee, RKnee, LHip, RHip, MidHip, LShoulder, RShoulder, LElbow, RElbow, LWrist, RWrist, Neck,
    Nose, LEye, REye, LEar, REar, LBigToe, LSmallToe, LHeel, RBigToe, RSmallToe, RHeel,
];

pub const BODY_25: [JointId; 25] = [
    Nose, Neck, RShoulder, RElbow, RWrist, LShoulder, LElbow, LWrist, MidHip, RHip, RKnee, RAnkle, LHip, LKnee,
    LAnkle, REye, LEye, REar, LEar, LBigToe, LSmallToe, LHeel, RBigToe, RSmallToe, RHeel,
];

pub const COCO_18: [JointId; 18] = [
    Nose, Neck, RShoulder, RElbow, RWrist, LShoulder, LElbow, LWrist, RHip, RKnee, RAnkle, LHip, LKnee, LAnkle,
    REye, LEye, REar, LEar,
];

impl JointId {
    pub fn name(self) -> &'static str {
        match self {
            LAnkle => "LAnkle",
            RAnkle => "RAnkle",
            LKnee => "LKnee",
            RKnee => "RKnee",
            LHip => "LHip",
            RHip => "RHip",
            MidHip => "MidHip",
            LShoulder => "LShoulder",
            RShoulder => "RShoulder",
            LElbow => "LElbow",
            RElbow => "RElbow",
            LWrist => "LWrist",
            RWrist => "RWrist",
            Neck => "Neck",
            Nose => "Nose",
            LEye => "LEye",
            REye => "REye",
            LEar => "LEar",
            REar => "REar",
            LBigToe => "LBigToe",
            LSmallToe => "LSmallToe",
            LHeel => "LHeel",
            RBigToe => "RBigToe",
            RSmallToe => "RSmallToe",
            RHeel => "RHeel",
        }
    }

    /// Position in [`ELIGIBLE`], or `None` for face and feet joints.
    pub fn track_index(self) -> Option<usize> {
        ELIGIBLE.iter().position(|j| *j == self)
    }

    pub fn is_eligible(self) -> bool {
        self.track_index().is_some()
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JointId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL.iter()
            .copied()
            .find(|j| j.name() == s)
            .ok_or_else(|| Error::MalformedDocument(format!("unknown joint name {s:?}")))
    }
}

impl Serialize for JointId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for JointId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Left/right counterpart of an eligible joint; midline joints are fixed.
pub fn mirror_joint_match(j: JointId) -> Result<JointId> {
    Ok(match j {
        LAnkle => RAnkle,
        RAnkle => LAnkle,
        LKnee => RKnee,
        RKnee => LKnee,
        LHip => RHip,
        RHip => LHip,
        MidHip => MidHip,
        LShoulder => RShoulder,
        RShoulder => LShoulder,
        LElbow => RElbow,
        RElbow => LElbow,
        LWrist => RWrist,
        RWrist => LWrist,
        Neck => Neck,
        other => return Err(Error::IneligibleJoint(other.name().into())),
    })
}

/// A detected joint. Serialized as `[u, v, confidence]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2D {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
    pub valid: bool,
}

impl Keypoint2D {
    /// Valid iff finite with positive confidence.
    pub fn new(u: f64, v: f64, confidence: f64) -> Self {
        let valid = u.is_finite() && v.is_finite() && confidence.is_finite() && confidence > 0.0;
        Self { u, v, confidence, valid }
    }

    pub fn invalid() -> Self {
        Self { u: 0.0, v: 0.0, confidence: 0.0, valid: false }
    }

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

impl Serialize for Keypoint2D {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let c = if self.valid { self.confidence } else { 0.0 };
        [self.u, self.v, c].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Keypoint2D {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [u, v, c] = <[f64; 3]>::deserialize(d)?;
        Ok(Keypoint2D::new(u, v, c))
    }
}

pub type KeypointMap = BTreeMap<JointId, Keypoint2D>;

fn count_valid_eligible(m: &KeypointMap) -> usize {
    m.iter().filter(|(j, k)| j.is_eligible() && k.valid).count()
}

fn centroid(m: &KeypointMap) -> Option<Vector2<f64>> {
    let pts: Vec<_> = m.values().filter(|k| k.valid).map(|k| k.pixel()).collect();
    if pts.is_empty() {
        return None;
    }
    let (mut lo, mut hi) = (pts[0], pts[0]);
    for p in &pts {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Some((lo + hi) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub index: usize,
    pub real: KeypointMap,
    pub mirror: KeypointMap,
}

/// Which detected track was labeled real, and the evidence for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentInfo {
    /// Index (0 or 1) of the track labeled real.
    pub real_track: usize,
    /// Mean epipolar distance under each labeling.
    pub mean_epipolar: [f64; 2],
    /// Fraction of triangulated points on the camera side of the mirror.
    pub front_fraction: [f64; 2],
    pub frames_used: usize,
}

/// Generic sequence document; also the synth output format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequencePair {
    pub frame_rate: f64,
    pub frames: Vec<PoseFrame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<AssignmentInfo>,
}

impl PoseSequencePair {
    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s).map_err(|e| Error::MalformedDocument(e.to_string()))?;
        if !(p.frame_rate > 0.0) {
            return Err(Error::MalformedDocument("frame_rate must be positive".into()));
        }
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("pose sequence serializes")
    }

    /// False for 18-point layouts, where the hip-line prior cannot apply.
    pub fn has_mid_hip(&self) -> bool {
        self.frames.iter().any(|f| {
            f.real.get(&MidHip).is_some_and(|k| k.valid) && f.mirror.get(&MidHip).is_some_and(|k| k.valid)
        })
    }

    /// Swaps the real and mirror labels.
    pub fn swapped(&self) -> Self {
        Self {
            frame_rate: self.frame_rate,
            frames: self
                .frames
                .iter()
                .map(|f| PoseFrame { index: f.index, real: f.mirror.clone(), mirror: f.real.clone() })
                .collect(),
            assignment: None,
        }
    }
}

/// People detected in one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionFrame {
    pub people: Vec<KeypointMap>,
}

fn layout_for(len: usize) -> Result<&'static [JointId]> {
    match len {
        75 => Ok(&BODY_25),
        54 => Ok(&COCO_18),
        _ if len % 3 == 0 => Err(Error::UnsupportedKeypointCount(len / 3)),
        _ => Err(Error::MalformedDocument(format!("keypoint array length {len} is not a multiple of 3"))),
    }
}

/// Parses one OpenPose frame document.
pub fn parse_openpose_frame(doc: &str) -> Result<DetectionFrame> {
    let v: serde_json::Value = serde_json::from_str(doc).map_err(|e| Error::MalformedDocument(e.to_string()))?;
    let people = v
        .get("people")
        .and_then(|p| p.as_array())
        .ok_or_else(|| Error::MalformedDocument("missing people array".into()))?;
    let mut out = DetectionFrame::default();
    for person in people {
        let flat = person
            .get("pose_keypoints_2d")
            .and_then(|k| k.as_array())
            .ok_or_else(|| Error::MalformedDocument("missing pose_keypoints_2d".into()))?;
        let values = flat
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| Error::MalformedDocument("non-numeric keypoint value".into())))
            .collect::<Result<Vec<f64>>>()?;
        let layout = layout_for(values.len())?;
        let map: KeypointMap = layout
            .iter()
            .zip(values.chunks_exact(3))
            .map(|(j, t)| {
                let kp = if t == [0.0, 0.0, 0.0] { Keypoint2D::invalid() } else { Keypoint2D::new(t[0], t[1], t[2]) };
                (*j, kp)
            })
            .collect();
        if count_valid_eligible(&map) >= MIN_PERSON_JOINTS {
            out.people.push(map);
        }
    }
    Ok(out)
}

/// Parses a sequence of OpenPose frame documents, in order.
pub fn parse_openpose_json<S: AsRef<str>>(docs: &[S]) -> Result<Vec<DetectionFrame>> {
    docs.iter().map(|d| parse_openpose_frame(d.as_ref())).collect()
}

/// Reads every `*.json` file of `dir` in lexicographic file-name order.
pub fn load_openpose_dir(dir: &Path) -> Result<Vec<DetectionFrame>> {
    let io = |e: std::io::Error| Error::MalformedDocument(format!("{}: {e}", dir.display()));
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let docs = files
        .iter()
        .map(|p| std::fs::read_to_string(p).map_err(io))
        .collect::<Result<Vec<_>>>()?;
    parse_openpose_json(&docs)
}

/// Two person tracks by nearest bounding-box centroid.
fn track_two(frames: &[DetectionFrame], gate: f64) -> Result<[Vec<Option<KeypointMap>>; 2]> {
    if let Some(f) = frames.iter().find(|f| f.people.len() > 2) {
        return Err(Error::TrackCountMismatch(f.people.len()));
    }
    let start = frames
        .iter()
        .position(|f| f.people.len() == 2)
        .ok_or_else(|| Error::TrackCountMismatch(frames.iter().map(|f| f.people.len()).max().unwrap_or(0)))?;
    let mut tracks: [Vec<Option<KeypointMap>>; 2] = [vec![None; frames.len()], vec![None; frames.len()]];
    let mut last = [None::<Vector2<f64>>; 2];
    // the first two-person frame seeds the tracks in left-to-right order
    let mut seed = frames[start].people.clone();
    seed.sort_by(|a, b| {
        let (ca, cb) = (centroid(a).unwrap_or_default(), centroid(b).unwrap_or_default());
        ca.x.total_cmp(&cb.x).then(ca.y.total_cmp(&cb.y))
    });
    last[0] = centroid(&seed[0]);
    last[1] = centroid(&seed[1]);
    let dist = |a: Option<Vector2<f64>>, b: Option<Vector2<f64>>| match (a, b) {
        (Some(a), Some(b)) => (a - b).norm(),
        _ => f64::INFINITY,
    };
    for t in start..frames.len() {
        let people = &frames[t].people;
        let cs: Vec<_> = people.iter().map(centroid).collect();
        let assignment: Vec<(usize, usize)> = match people.len() {
            0 => vec![],
            1 => {
                let k = if dist(cs[0], last[0]) <= dist(cs[0], last[1]) { 0 } else { 1 };
                vec![(0, k)]
            }
            _ => {
                let keep = dist(cs[0], last[0]) + dist(cs[1], last[1]);
                let swap = dist(cs[0], last[1]) + dist(cs[1], last[0]);
                if keep <= swap {
                    vec![(0, 0), (1, 1)]
                } else {
                    vec![(0, 1), (1, 0)]
                }
            }
        };
        for (p, k) in assignment {
            if t == start || dist(cs[p], last[k]) <= gate {
                tracks[k][t] = Some(people[p].clone());
                last[k] = cs[p];
            }
        }
    }
    Ok(tracks)
}

fn build_pair(tracks: &[Vec<Option<KeypointMap>>; 2], real: usize, frame_rate: f64) -> PoseSequencePair {
    let frames = (0..tracks[0].len())
        .map(|t| PoseFrame {
            index: t,
            real: tracks[real][t].clone().unwrap_or_default(),
            mirror: tracks[1 - real][t].clone().unwrap_or_default(),
        })
        .collect();
    PoseSequencePair { frame_rate, frames, assignment: None }
}

/// Mean epipolar distance and front-of-mirror fraction of one labeling.
fn labeling_evidence(pair: &PoseSequencePair, k: &Intrinsics<f64>, min_confidence: f64) -> Result<(f64, f64)> {
    let corr = build_correspondences(pair, min_confidence)?;
    let f = solve_constrained_fundamental(&corr)?;
    let g: f64 = corr
        .pairs()
        .iter()
        .map(|p| epipolar_distance_g(&f.0, &p.real, &p.mirror).unwrap_or(f64::INFINITY))
        .sum::<f64>()
        / corr.len() as f64;
    let e = essential_from_fundamental(&f, k)?;
    let (mirror, ext) = extract_mirror(&e, Some(CheiralityCheck { intrinsics: k, pairs: corr.pairs() }))?;
    let rig = StereoRig::new(k, &ext);
    let (mut front, mut total) = (0usize, 0usize);
    for p in corr.pairs() {
        if let Ok(x) = triangulate_point(&rig, &p.real, &p.mirror) {
            total += 1;
            if mirror.normal().dot(&x) < mirror.distance() {
                front += 1;
            }
        }
    }
    let frac = if total > 0 { front as f64 / total as f64 } else { 0.0 };
    Ok((g, frac))
}

/// Labels the two tracked people as real and mirrored.
///
/// A skew fundamental matrix fits both labelings equally well, so the
/// epipolar residual is recorded but cannot decide. The decisive score is
/// which labeling places the triangulated person between the camera and
/// the mirror; a swapped labeling reconstructs the reflection behind it.
pub fn assign_real_mirror_tracks(
    frames: &[DetectionFrame],
    k: &Intrinsics<f64>,
    image_width: f64,
    frame_rate: f64,
    min_confidence: f64,
) -> Result<PoseSequencePair> {
    let tracks = track_two(frames, TRACK_GATE * image_width)?;
    let step = frames.len().div_ceil(ASSIGNMENT_SAMPLE).max(1);
    let sub: [Vec<Option<KeypointMap>>; 2] =
        [0, 1].map(|i| tracks[i].iter().step_by(step).cloned().collect::<Vec<_>>());
    let e0 = labeling_evidence(&build_pair(&sub, 0, frame_rate), k, min_confidence)?;
    let e1 = labeling_evidence(&build_pair(&sub, 1, frame_rate), k, min_confidence)?;
    let hi = e0.1.max(e1.1);
    if hi == 0.0 || (e0.1 - e1.1).abs() < AMBIGUITY_MARGIN * hi {
        return Err(Error::AmbiguousAssignment { first: e0.1, second: e1.1 });
    }
    let real = if e0.1 > e1.1 { 0 } else { 1 };
    let mut pair = build_pair(&tracks, real, frame_rate);
    pair.assignment = Some(AssignmentInfo {
        real_track: real,
        mean_epipolar: [e0.0, e1.0],
        front_fraction: [e0.1, e1.1],
        frames_used: sub[0].len(),
    });
    Ok(pair)
}

/// Dense tracks over [`ELIGIBLE`]: entry `j` pairs real joint `j` with the
/// mirror track's counterpart of `j`.
pub fn to_joint_tracks(pair: &PoseSequencePair, min_confidence: f64) -> JointTracks<f64> {
    let mut tracks = JointTracks::new(pair.frames.len(), ELIGIBLE.len());
    for (t, f) in pair.frames.iter().enumerate() {
        for (i, j) in ELIGIBLE.iter().enumerate() {
            let m = mirror_joint_match(*j).expect("eligible joints have counterparts");
            let (Some(a), Some(b)) = (f.real.get(j), f.mirror.get(&m)) else { continue };
            if a.valid && b.valid && a.confidence >= min_confidence && b.confidence >= min_confidence {
                tracks.set(t, i, a.pixel(), b.pixel());
            }
        }
    }
    tracks
}

/// One correspondence per usable (frame, eligible joint).
pub fn build_correspondences(pair: &PoseSequencePair, min_confidence: f64) -> Result<CorrespondenceSet<f64>> {
    CorrespondenceSet::from_tracks(&to_joint_tracks(pair, min_confidence))
}

/// Correspondences as plain records, without the minimum-size check.
pub fn correspondence_list(pair: &PoseSequencePair, min_confidence: f64) -> Vec<Correspondence<f64>> {
    let tracks = to_joint_tracks(pair, min_confidence);
    tracks
        .pairs()
        .map(|(k, real, mirror)| Correspondence { real, mirror, frame: k / tracks.n_joints, joint: k % tracks.n_joints })
        .collect()
}
