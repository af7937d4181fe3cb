use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mirrorpose::geometry::{Intrinsics, VirtualExtrinsics};
use mirrorpose::metrics::pa_mpjpe;
use mirrorpose::pipeline::{calibrate, pose_errors, CalibrationConfig, PoseErrors, Stage};
use mirrorpose::pose::{assign_real_mirror_tracks, load_openpose_dir, to_joint_tracks, JointId, PoseSequencePair, ELIGIBLE};
use mirrorpose::synth::{generate_benchmark_suite, generate_scene, GroundTruth, NoiseSpec};
use mirrorpose::triangulation::{triangulate_tracks, StereoRig};
use mirrorpose::Error;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{CliError, CliResult};
use crate::io::{read_json, read_string, write_atomic, write_json};
use crate::report::{CalibrationReport, InputSummary};

pub fn load_intrinsics(path: &Path) -> CliResult<Intrinsics<f64>> {
    if !path.is_file() {
        return Err(CliError::Config(format!("intrinsics file {} does not exist", path.display())));
    }
    let k: Intrinsics<f64> = read_json(path)?;
    k.validate()?;
    Ok(k)
}

/// Options for OpenPose directory input.
#[derive(Debug, Clone, Copy)]
pub struct DetectionOptions {
    /// Defaults to twice the principal point x.
    pub image_width: Option<f64>,
    pub frame_rate: f64,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self { image_width: None, frame_rate: 30.0 }
    }
}

/// A generic sequence file, or a directory of per-frame OpenPose files.
pub fn load_poses(path: &Path, k: &Intrinsics<f64>, det: &DetectionOptions, min_confidence: f64) -> CliResult<PoseSequencePair> {
    if path.is_dir() {
        let frames = load_openpose_dir(path)?;
        let width = det.image_width.unwrap_or(2.0 * k.cx);
        Ok(assign_real_mirror_tracks(&frames, k, width, det.frame_rate, min_confidence)?)
    } else if path.is_file() {
        Ok(PoseSequencePair::from_json(&read_string(path)?)?)
    } else {
        Err(CliError::Config(format!("pose input {} does not exist", path.display())))
    }
}

pub fn load_truth(path: &Path) -> CliResult<GroundTruth> {
    read_json(path)
}

pub fn cmd_calibrate(
    poses: &Path,
    intrinsics: &Path,
    cfg: &CalibrationConfig,
    det: &DetectionOptions,
    truth: Option<&Path>,
) -> CliResult<CalibrationReport> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let k = load_intrinsics(intrinsics)?;
    let truth = truth.map(load_truth).transpose()?;
    let pair = load_poses(poses, &k, det, cfg.min_confidence)?;
    let outcome = calibrate(&pair, &k, cfg)?;
    let input = InputSummary {
        frames: pair.frames.len(),
        pairs: outcome.observed.valid_count(),
        min_confidence: cfg.min_confidence,
        assignment: pair.assignment.clone(),
    };
    CalibrationReport::from_outcome(
        &outcome,
        config_hash(cfg),
        input,
        cfg.ransac.threshold,
        truth.as_ref().map(|t| &t.extrinsics),
    )
}

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub scenes: Option<usize>,
    pub frames: usize,
    pub seed: u64,
    pub noise: NoiseSpec,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { scenes: None, frames: 100, seed: 0, noise: NoiseSpec::default() }
    }
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:03}")
}

/// Writes `<name>.poses.json`, `<name>.truth.json` and
/// `<name>.intrinsics.json` per scene; returns the scene names.
pub fn cmd_synth(out_dir: &Path, opts: &SynthOptions) -> CliResult<Vec<String>> {
    let n = opts.scenes.unwrap_or(1);
    if n == 0 || opts.frames == 0 {
        return Err(CliError::Config("--suite and --frames must be at least 1".into()));
    }
    let specs = generate_benchmark_suite(n, opts.frames, opts.noise, opts.seed)?;
    let mut names = Vec::with_capacity(n);
    for (i, spec) in specs.iter().enumerate() {
        let scene = generate_scene(spec)?;
        let name = scene_name(i);
        let mut poses = scene.poses.to_json();
        poses.push('\n');
        write_atomic(&out_dir.join(format!("{name}.poses.json")), poses.as_bytes())?;
        write_json(&out_dir.join(format!("{name}.truth.json")), &scene.truth)?;
        write_json(&out_dir.join(format!("{name}.intrinsics.json")), &scene.spec.intrinsics)?;
        names.push(name);
    }
    Ok(names)
}

/// Stages reported by `evaluate`, in column order.
pub const EVAL_STAGES: [Stage; 5] = [Stage::Init, Stage::Refine, Stage::Final, Stage::Baseline1, Stage::Baseline2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub stages: BTreeMap<Stage, PoseErrors>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub median: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
        Some(Self { n, mean, std: var.sqrt(), median })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub rotation: Aggregate,
    pub translation: Aggregate,
    pub translation_direction: Aggregate,
    pub normal: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scenes: Vec<SceneMetrics>,
    pub summary: BTreeMap<Stage, StageSummary>,
}

fn check_scale(ext: &VirtualExtrinsics<f64>, what: &str) -> CliResult<()> {
    let n = ext.translation.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(CliError::Core(Error::ScaleMismatch(format!("{what} translation has norm {n}; it cannot be rescaled"))));
    }
    Ok(())
}

pub fn evaluate_report(name: &str, report: &CalibrationReport, truth: &GroundTruth) -> CliResult<SceneMetrics> {
    check_scale(&truth.extrinsics, "ground-truth")?;
    let mut stages = BTreeMap::new();
    for (stage, s) in &report.stages {
        check_scale(&s.extrinsics, stage.name())?;
        stages.insert(*stage, pose_errors(&s.extrinsics, &truth.extrinsics)?);
    }
    Ok(SceneMetrics { scene: name.to_string(), stages })
}

pub fn summarize(scenes: Vec<SceneMetrics>) -> Evaluation {
    let mut summary = BTreeMap::new();
    for stage in EVAL_STAGES {
        let rows: Vec<&PoseErrors> = scenes.iter().filter_map(|s| s.stages.get(&stage)).collect();
        let agg = |f: fn(&PoseErrors) -> f64| Aggregate::of(&rows.iter().map(|e| f(e)).collect::<Vec<_>>());
        if let (Some(rotation), Some(translation), Some(translation_direction), Some(normal)) =
            (agg(|e| e.rotation), agg(|e| e.translation), agg(|e| e.translation_direction), agg(|e| e.normal))
        {
            summary.insert(stage, StageSummary { rotation, translation, translation_direction, normal });
        }
    }
    Evaluation { scenes, summary }
}

pub const CSV_METRICS: [&str; 4] = ["rotation_deg", "translation", "translation_direction", "normal_deg"];

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["scene".to_string()];
    for stage in EVAL_STAGES {
        for m in CSV_METRICS {
            h.push(format!("{}_{m}", stage.name()));
        }
    }
    h
}

fn metric_values(e: &PoseErrors) -> [f64; 4] {
    [e.rotation, e.translation, e.translation_direction, e.normal]
}

/// One row per scene, then `mean`, `std` and `median` rows. Missing stages
/// leave empty cells.
pub fn evaluation_csv(ev: &Evaluation) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Io { path: "csv".into(), message: e.to_string() };
    w.write_record(csv_header()).map_err(err)?;
    for s in &ev.scenes {
        let mut row = vec![s.scene.clone()];
        for stage in EVAL_STAGES {
            match s.stages.get(&stage) {
                Some(e) => row.extend(metric_values(e).iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row).map_err(err)?;
    }
    for (label, pick) in [
        ("mean", (|a: &Aggregate| a.mean) as fn(&Aggregate) -> f64),
        ("std", |a: &Aggregate| a.std),
        ("median", |a: &Aggregate| a.median),
    ] {
        let mut row = vec![label.to_string()];
        for stage in EVAL_STAGES {
            match ev.summary.get(&stage) {
                Some(s) => row.extend(
                    [&s.rotation, &s.translation, &s.translation_direction, &s.normal].map(|a| pick(a).to_string()),
                ),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Io { path: "csv".into(), message: e.to_string() })
}

/// Report/ground-truth pairs found in a directory by scene name.
pub fn suite_pairs(dir: &Path) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".report.json")).map(str::to_string))
        .collect();
    names.sort();
    for n in names {
        let truth = dir.join(format!("{n}.truth.json"));
        if truth.is_file() {
            out.push((n.clone(), dir.join(format!("{n}.report.json")), truth));
        }
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("no <scene>.report.json / <scene>.truth.json pairs in {}", dir.display())));
    }
    Ok(out)
}

pub fn cmd_evaluate(pairs: &[(String, PathBuf, PathBuf)]) -> CliResult<Evaluation> {
    let scenes = pairs
        .iter()
        .map(|(name, r, t)| {
            let report = CalibrationReport::from_json(&read_string(r)?)?;
            evaluate_report(name, &report, &load_truth(t)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(summarize(scenes))
}

/// Extrinsics source for triangulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Init,
    Full,
    Baseline1,
    Baseline2,
}

impl Source {
    pub fn stage(self) -> Stage {
        match self {
            Source::Init => Stage::Init,
            Source::Full => Stage::Final,
            Source::Baseline1 => Stage::Baseline1,
            Source::Baseline2 => Stage::Baseline2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joints3DDocument {
    pub source: Source,
    pub joint_names: Vec<JointId>,
    /// Per frame and joint, `null` where the point is missing or behind a
    /// camera. Units of the report translation.
    pub frames: Vec<Vec<Option<[f64; 3]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pa_mpjpe_mm: Option<f64>,
}

pub fn cmd_triangulate(
    poses: &Path,
    report: &Path,
    intrinsics: &Path,
    source: Source,
    truth: Option<&Path>,
    det: &DetectionOptions,
) -> CliResult<Joints3DDocument> {
    let k = load_intrinsics(intrinsics)?;
    let report = CalibrationReport::from_json(&read_string(report)?)?;
    let ext = report.stage(source.stage())?.extrinsics;
    let pair = load_poses(poses, &k, det, report.input.min_confidence)?;
    let tracks = to_joint_tracks(&pair, report.input.min_confidence);
    let (x, _) = triangulate_tracks(&tracks, &StereoRig::new(&k, &ext));
    let frames = (0..x.n_frames)
        .map(|t| {
            x.frame(t)
                .iter()
                .zip(x.frame_valid(t))
                .map(|(p, v)| v.then_some([p.x, p.y, p.z]))
                .collect()
        })
        .collect();
    let pa_mpjpe_mm = match truth {
        None => None,
        Some(path) => {
            let gt = load_truth(path)?.joints3d();
            if (gt.n_frames, gt.n_joints) != (x.n_frames, x.n_joints) {
                return Err(CliError::Core(Error::MalformedDocument(format!(
                    "ground truth has {}×{} joints, triangulation has {}×{}",
                    gt.n_frames, gt.n_joints, x.n_frames, x.n_joints
                ))));
            }
            Some(pa_mpjpe(&x, &gt)? * 1000.0)
        }
    };
    Ok(Joints3DDocument { source, joint_names: ELIGIBLE.to_vec(), frames, pa_mpjpe_mm })
}
