//! End-to-end orchestration: dataset ingestion or synthesis, keyframe
//! windowing, the MVS → TSDF → raycast mapping loop with frame tracking
//! running against one-keyframe-stale depth snapshots, and artifact
//! emission (depth PNGs, trajectory, mesh, metrics, diagnostics).

use crate::eval::{
    ate_rmse, depth_metrics, sequence_metrics, write_report_json, write_summary_csv,
    AlignmentMode, DepthMetrics, EvalError, EvaluationReport,
};
use crate::features::{extract_classical, FeatureConfig, FeatureError, ImageFrame};
use crate::geometry::{
    read_tum_trajectory, write_tum_trajectory, CameraIntrinsics, GeometryError, PoseSE3,
    Trajectory, TrajectoryError,
};
use crate::grid::Grid;
use crate::mvs::{
    cascade_estimate, depth_range_schedule, load_depth_png, save_depth_png, DepthMap,
    KeyframeWindow, MvsConfig, MvsError, WindowFrame,
};
use crate::synth::{
    orbit_arc_trajectory, render_with, Primitive, RenderOptions, SynthError, SyntheticScene,
};
use crate::tracking::{
    combine_depth, sparse_from_gradient, track_frame, write_diagnostics_csv, FrameDiagnostics,
    SparseDepthMap, TrackerConfig, TrackingError,
};
use crate::tsdf::{extract_mesh, write_mesh_ply, HashedTsdfVolume, TsdfConfig, TsdfError};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("frame {0}: {1}")]
    Frame(usize, Box<PipelineError>),
    #[error(transparent)]
    Mvs(#[from] MvsError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tsdf(#[from] TsdfError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Poses come from ground truth; the tracker never runs.
    MappingOnly,
    /// Every frame is tracked against the latest combined depth buffer.
    TrackAndMap,
    /// Like `track_and_map`, but the sequence is synthesized from the
    /// `[synth]` section instead of ingested from disk.
    Synth,
}

/// Where the keyframe sparse depth entries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparseSourceMode {
    /// Dataset ground-truth depth sampled at the strongest image gradients
    /// (mimicking sparse-VO point selection).
    GtGradient,
    /// Depth rendered from the fused model, sampled the same way; falls
    /// back to ground truth until the model holds a surface.
    Model,
    /// No sparse entries; the tracker sees rendered depth only.
    None,
}

/// Synthetic-sequence parameters: an orbit arc around an analytic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSequenceConfig {
    /// Scene description TOML; a built-in two-plane + sphere scene when
    /// absent.
    pub scene: Option<PathBuf>,
    pub frames: usize,
    pub radius: f64,
    pub arc_degrees: f64,
    pub fps: f64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Every `degrade_period`-th frame (at `degrade_offset` within the
    /// period) is rendered with its texture contrast scaled by
    /// `degrade_texture_gain`, simulating texture-poor input.
    pub degrade_period: Option<usize>,
    pub degrade_offset: usize,
    pub degrade_texture_gain: f64,
}

impl Default for SynthSequenceConfig {
    fn default() -> Self {
        Self {
            scene: None,
            frames: 60,
            radius: 2.5,
            arc_degrees: 20.0,
            fps: 30.0,
            fx: 260.0,
            fy: 260.0,
            cx: 159.5,
            cy: 119.5,
            width: 320,
            height: 240,
            degrade_period: None,
            degrade_offset: 7,
            degrade_texture_gain: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Dataset directory (`rgb/`, optional `depth/`, `groundtruth.txt`,
    /// `calibration.txt`). Ignored in synth mode.
    pub dataset: Option<PathBuf>,
    pub format: String,
    pub synth: SynthSequenceConfig,
    pub output: PathBuf,
    /// Fixed-stride keyframe policy; frame 0 is always a keyframe.
    pub every_k: usize,
    /// When set, keyframes are instead created whenever the camera has
    /// moved this far (meters) from the last keyframe.
    pub translation_threshold: Option<f64>,
    /// Keyframe window size for MVS (the newest keyframe is the reference).
    pub window: usize,
    /// Sparse depth samples per keyframe for the tracker's combined buffer.
    pub sparse_points: usize,
    /// Depth source of the sparse samples; explicit because it changes what
    /// information the tracker can lean on.
    pub sparse_source: SparseSourceMode,
    /// When false, the rendered-model half of the combined buffer is
    /// dropped and the tracker sees sparse points only.
    pub use_dense_buffer: bool,
    /// Rayon worker count; `None` uses the default.
    pub workers: Option<usize>,
    pub seed: u64,
    pub mvs: MvsConfig,
    pub tsdf: TsdfConfig,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::TrackAndMap,
            dataset: None,
            format: "tum".into(),
            synth: SynthSequenceConfig::default(),
            output: PathBuf::from("out"),
            every_k: 5,
            translation_threshold: None,
            window: 7,
            sparse_points: 2000,
            sparse_source: SparseSourceMode::GtGradient,
            use_dense_buffer: true,
            workers: None,
            seed: 0,
            mvs: MvsConfig::default(),
            tsdf: TsdfConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(2..=8).contains(&self.window) {
            return Err(PipelineError::Config(format!(
                "window size must be 2..=8, got {}",
                self.window
            )));
        }
        if self.every_k < 1 {
            return Err(PipelineError::Config("every_k must be at least 1".into()));
        }
        if self.mode != Mode::Synth && self.dataset.is_none() {
            return Err(PipelineError::Config(
                "dataset path required outside synth mode".into(),
            ));
        }
        Ok(())
    }
}

/// An ingested dataset: frame file paths plus side information, not yet
/// decoded.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    /// (image path, timestamp), strictly increasing in time.
    pub frames: Vec<(PathBuf, f64)>,
    pub intrinsics: CameraIntrinsics,
    pub gt_trajectory: Option<Trajectory>,
    /// Ground-truth depth path per frame, where available.
    pub gt_depth: Vec<Option<PathBuf>>,
}

/// A fully decoded sequence, the common input of the run loop.
pub struct LoadedSequence {
    pub frames: Vec<ImageFrame>,
    pub intrinsics: CameraIntrinsics,
    pub gt_trajectory: Option<Trajectory>,
    pub gt_depth: Vec<Option<DepthMap>>,
}

fn dataset_err(path: &Path, what: impl std::fmt::Display) -> PipelineError {
    PipelineError::Dataset(format!("{}: {what}", path.display()))
}

/// Read a dataset directory laid out as `rgb/<timestamp>.png`, optional
/// `depth/<timestamp>.png` (TUM ×5000 convention), `calibration.txt`
/// (`fx fy cx cy width height`), and optional `groundtruth.txt` (TUM
/// trajectory).
pub fn ingest(path: &Path, format: &str) -> Result<SequenceSource, PipelineError> {
    if format != "tum" {
        return Err(PipelineError::Config(format!(
            "unknown dataset format {format:?} (supported: \"tum\")"
        )));
    }
    let calib_path = path.join("calibration.txt");
    let calib = std::fs::read_to_string(&calib_path)
        .map_err(|e| dataset_err(&calib_path, e))?;
    let numbers: Vec<f64> = calib
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| l.split_whitespace().filter_map(|t| t.parse().ok()).collect())
        .unwrap_or_default();
    let [fx, fy, cx, cy, w, h] = numbers[..] else {
        return Err(dataset_err(
            &calib_path,
            "expected one line `fx fy cx cy width height`",
        ));
    };
    let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, w as usize, h as usize)
        .map_err(|e| dataset_err(&calib_path, e))?;

    let rgb_dir = path.join("rgb");
    let mut frames: Vec<(PathBuf, f64)> = Vec::new();
    for entry in std::fs::read_dir(&rgb_dir).map_err(|e| dataset_err(&rgb_dir, e))? {
        let p = entry.map_err(|e| dataset_err(&rgb_dir, e))?.path();
        if p.extension().is_none_or(|e| e != "png") {
            continue;
        }
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let t: f64 = stem
            .parse()
            .map_err(|_| dataset_err(&p, "file stem is not a timestamp"))?;
        frames.push((p, t));
    }
    if frames.is_empty() {
        return Err(dataset_err(&rgb_dir, "no PNG frames"));
    }
    frames.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    for pair in frames.windows(2) {
        if pair[1].1 <= pair[0].1 {
            return Err(dataset_err(
                &pair[1].0,
                format!("timestamp {} is not strictly increasing", pair[1].1),
            ));
        }
    }

    let depth_dir = path.join("depth");
    let gt_depth = frames
        .iter()
        .map(|(p, _)| {
            let candidate = depth_dir.join(p.file_name().unwrap());
            candidate.exists().then_some(candidate)
        })
        .collect();

    let gt_path = path.join("groundtruth.txt");
    let gt_trajectory = if gt_path.exists() {
        Some(read_tum_trajectory(&gt_path)?)
    } else {
        None
    };

    Ok(SequenceSource {
        frames,
        intrinsics,
        gt_trajectory,
        gt_depth,
    })
}

/// Decode a grayscale or RGB PNG into an intensity (and optional color)
/// frame.
pub fn load_image_png(path: &Path, timestamp: f64) -> Result<ImageFrame, PipelineError> {
    let img = image::open(path).map_err(|e| dataset_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma16(gray) => {
            let intensity = Grid::from_fn(w, h, |x, y| {
                gray.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0
            });
            Ok(ImageFrame::from_intensity(intensity, timestamp))
        }
        other => {
            let rgb = other.to_rgb8();
            let intensity = Grid::from_fn(w, h, |x, y| {
                let p = rgb.get_pixel(x as u32, y as u32).0;
                (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
            });
            let color = Grid::from_fn(w, h, |x, y| {
                let p = rgb.get_pixel(x as u32, y as u32).0;
                [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
            });
            let mut frame = ImageFrame::from_intensity(intensity, timestamp);
            frame.rgb = Some(color);
            Ok(frame)
        }
    }
}

pub fn save_intensity_png(path: &Path, intensity: &Grid<f64>) -> Result<(), PipelineError> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        intensity.width() as u32,
        intensity.height() as u32,
    );
    for (x, y, v) in intensity.iter() {
        img.put_pixel(x as u32, y as u32, image::Luma([(v.clamp(0.0, 1.0) * 65535.0).round()
            as u16]));
    }
    img.save(path).map_err(|e| dataset_err(path, e))?;
    Ok(())
}

pub fn load_sequence(source: &SequenceSource) -> Result<LoadedSequence, PipelineError> {
    let mut frames = Vec::with_capacity(source.frames.len());
    for (p, t) in &source.frames {
        let frame = load_image_png(p, *t)?;
        if frame.width() != source.intrinsics.width || frame.height() != source.intrinsics.height {
            return Err(dataset_err(
                p,
                format!(
                    "image is {}x{} but calibration says {}x{}",
                    frame.width(),
                    frame.height(),
                    source.intrinsics.width,
                    source.intrinsics.height
                ),
            ));
        }
        frames.push(frame);
    }
    let mut gt_depth = Vec::with_capacity(source.gt_depth.len());
    for p in &source.gt_depth {
        gt_depth.push(match p {
            Some(p) => Some(load_depth_png(p)?),
            None => None,
        });
    }
    Ok(LoadedSequence {
        frames,
        intrinsics: source.intrinsics,
        gt_trajectory: source.gt_trajectory.clone(),
        gt_depth,
    })
}

/// The built-in synth scene: wall, tilted ramp, and a floating sphere.
pub fn default_scene(texture_seed: u64) -> SyntheticScene {
    SyntheticScene::new(
        vec![
            Primitive::Plane {
                origin: Vector3::new(0.0, 0.0, 0.0),
                normal: Vector3::new(0.0, 0.0, 1.0),
                half_extent: Some(4.0),
            },
            Primitive::Plane {
                origin: Vector3::new(0.0, -0.9, 0.4),
                normal: Vector3::new(0.0, 0.8, 0.6),
                half_extent: Some(3.0),
            },
            Primitive::Sphere {
                center: Vector3::new(0.3, -0.1, 0.7),
                radius: 0.4,
            },
        ],
        texture_seed,
    )
    .expect("non-empty scene")
}

/// Render the synthetic orbit sequence described by the config, with
/// analytic ground-truth poses and depth for every frame.
pub fn synthesize_sequence(
    cfg: &SynthSequenceConfig,
    seed: u64,
) -> Result<LoadedSequence, PipelineError> {
    if cfg.frames < 2 {
        return Err(PipelineError::Dataset(format!(
            "synth sequence needs at least 2 frames, got {}",
            cfg.frames
        )));
    }
    let scene = match &cfg.scene {
        Some(path) => SyntheticScene::load(path)?,
        None => default_scene(seed.wrapping_add(2024)),
    };
    let intrinsics = CameraIntrinsics::new(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.width, cfg.height)?;
    let poses = orbit_arc_trajectory(
        &scene,
        cfg.frames,
        cfg.radius,
        cfg.arc_degrees.to_radians(),
        0.0,
        seed,
    );
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt_depth = Vec::with_capacity(cfg.frames);
    let mut samples = Vec::with_capacity(cfg.frames);
    for (i, pose) in poses.iter().enumerate() {
        let degraded = cfg
            .degrade_period
            .is_some_and(|p| p > 0 && i % p == cfg.degrade_offset % p);
        let opts = RenderOptions {
            texture_gain: if degraded { cfg.degrade_texture_gain } else { 1.0 },
        };
        let (mut image, depth) = render_with(&scene, pose, &intrinsics, opts);
        image.timestamp = i as f64 / cfg.fps;
        samples.push((image.timestamp, *pose));
        frames.push(image);
        gt_depth.push(Some(depth));
    }
    Ok(LoadedSequence {
        frames,
        intrinsics,
        gt_trajectory: Some(Trajectory { samples }),
        gt_depth,
    })
}

/// Write a loaded sequence out as an ingestible dataset directory.
pub fn export_sequence(dir: &Path, seq: &LoadedSequence) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir.join("rgb"))?;
    let has_depth = seq.gt_depth.iter().any(Option::is_some);
    if has_depth {
        std::fs::create_dir_all(dir.join("depth"))?;
    }
    std::fs::write(
        dir.join("calibration.txt"),
        format!(
            "{} {} {} {} {} {}\n",
            seq.intrinsics.fx,
            seq.intrinsics.fy,
            seq.intrinsics.cx,
            seq.intrinsics.cy,
            seq.intrinsics.width,
            seq.intrinsics.height
        ),
    )?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let name = format!("{:017.6}.png", frame.timestamp);
        save_intensity_png(&dir.join("rgb").join(&name), &frame.intensity)?;
        if let Some(depth) = &seq.gt_depth[i] {
            save_depth_png(&dir.join("depth").join(&name), depth)?;
        }
    }
    if let Some(gt) = &seq.gt_trajectory {
        write_tum_trajectory(&dir.join("groundtruth.txt"), gt)?;
    }
    Ok(())
}

/// Keyframe selection policy.
#[derive(Debug, Clone, Copy)]
pub enum KeyframePolicy {
    EveryK(usize),
    /// New keyframe when the camera has moved this far (meters) from the
    /// previous keyframe.
    TranslationThreshold(f64),
}

struct KeyframeSelector {
    policy: KeyframePolicy,
    last_index: Option<usize>,
    last_position: Vector3<f64>,
}

impl KeyframeSelector {
    fn new(policy: KeyframePolicy) -> Self {
        Self {
            policy,
            last_index: None,
            last_position: Vector3::zeros(),
        }
    }

    fn decide(&mut self, index: usize, pose: &PoseSE3) -> bool {
        let take = match (self.last_index, self.policy) {
            (None, _) => true,
            (Some(last), KeyframePolicy::EveryK(k)) => index - last >= k,
            (Some(_), KeyframePolicy::TranslationThreshold(d)) => {
                (pose.translation() - self.last_position).norm() >= d
            }
        };
        if take {
            self.last_index = Some(index);
            self.last_position = pose.translation();
        }
        take
    }
}

/// Deterministic keyframe decisions over a pose sequence; the first frame is
/// always a keyframe.
pub fn select_keyframes(poses: &[PoseSE3], policy: KeyframePolicy) -> Vec<usize> {
    let mut selector = KeyframeSelector::new(policy);
    poses
        .iter()
        .enumerate()
        .filter_map(|(i, p)| selector.decide(i, p).then_some(i))
        .collect()
}

/// Everything a completed run leaves on disk, plus the in-memory results.
pub struct RunArtifacts {
    pub trajectory_path: PathBuf,
    pub mesh_path: PathBuf,
    pub metrics_json_path: PathBuf,
    pub summary_csv_path: PathBuf,
    pub diagnostics_csv_path: PathBuf,
    pub depth_dir: PathBuf,
    pub trajectory: Trajectory,
    pub report: EvaluationReport,
}

struct KeyframeJob {
    window: KeyframeWindow,
    frame_index: usize,
    sparse_mean: Option<f64>,
    prev_max: Option<f64>,
}

struct JobDone {
    frame_index: usize,
    final_depth: DepthMap,
}

pub fn run(cfg: &PipelineConfig) -> Result<RunArtifacts, PipelineError> {
    cfg.validate()?;
    let loaded = match cfg.mode {
        Mode::Synth => synthesize_sequence(&cfg.synth, cfg.seed)?,
        _ => load_sequence(&ingest(cfg.dataset.as_ref().unwrap(), &cfg.format)?)?,
    };
    if loaded.frames.len() < 2 {
        return Err(PipelineError::Dataset(format!(
            "{} frame(s) cannot fill a keyframe window",
            loaded.frames.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    run_loaded(cfg, &loaded, &pool)
}

/// Nearest ground-truth pose within the association tolerance.
fn gt_pose_at(gt: &Trajectory, t: f64) -> Option<PoseSE3> {
    gt.samples
        .iter()
        .map(|&(tg, p)| ((tg - t).abs(), p))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .filter(|(dt, _)| *dt <= crate::eval::ASSOCIATION_TOLERANCE)
        .map(|(_, p)| p)
}

fn run_loaded(
    cfg: &PipelineConfig,
    seq: &LoadedSequence,
    pool: &rayon::ThreadPool,
) -> Result<RunArtifacts, PipelineError> {
    let intr = seq.intrinsics;
    let tracking = cfg.mode != Mode::MappingOnly;
    if !tracking && seq.gt_trajectory.is_none() {
        return Err(PipelineError::Dataset(
            "mapping_only requires a ground-truth trajectory".into(),
        ));
    }

    std::fs::create_dir_all(&cfg.output)?;
    let depth_dir = cfg.output.join("depth");
    std::fs::create_dir_all(&depth_dir)?;

    let volume = Mutex::new(HashedTsdfVolume::new(cfg.tsdf.clone())?);
    let feat_cfg = FeatureConfig::default();
    let policy = match cfg.translation_threshold {
        Some(d) => KeyframePolicy::TranslationThreshold(d),
        None => KeyframePolicy::EveryK(cfg.every_k),
    };

    let mut est_samples: Vec<(f64, PoseSE3)> = Vec::with_capacity(seq.frames.len());
    let mut diagnostics: Vec<FrameDiagnostics> = Vec::new();
    let mut kf_depths: Vec<(usize, DepthMap)> = Vec::new();

    let (tx_job, rx_job) = mpsc::channel::<KeyframeJob>();
    let (tx_done, rx_done) = mpsc::channel::<Result<JobDone, PipelineError>>();

    let loop_result: Result<(), PipelineError> = std::thread::scope(|scope| {
        // Mapper: consumes keyframe jobs in order, runs the cascade, and
        // integrates the result. The tracker drains completions before it
        // reads the volume, so the lock is never contended at read time.
        scope.spawn(|| {
            for job in rx_job {
                let result = pool.install(|| -> Result<JobDone, PipelineError> {
                    let mut mvs_cfg = cfg.mvs.clone();
                    if let Ok((d_min, d_max)) =
                        depth_range_schedule(job.sparse_mean, job.prev_max)
                    {
                        mvs_cfg.d_min = d_min;
                        mvs_cfg.d_max = d_max;
                    }
                    // A two-keyframe window can never satisfy a three-view
                    // gate; clamp so early windows still produce depth.
                    mvs_cfg.photoconsistency_min_views =
                        mvs_cfg.photoconsistency_min_views.min(job.window.len());
                    let cascade = cascade_estimate(&job.window, &mvs_cfg)?;
                    let reference = &job.window.frames()[job.window.reference_index()];
                    volume.lock().unwrap().integrate(
                        &cascade.final_depth,
                        Some(&reference.image),
                        &reference.pose,
                        job.window.intrinsics(),
                    )?;
                    Ok(JobDone {
                        frame_index: job.frame_index,
                        final_depth: cascade.final_depth,
                    })
                });
                let failed = result.is_err();
                if tx_done.send(result).is_err() || failed {
                    break;
                }
            }
            drop(tx_done);
        });

        let mut selector = KeyframeSelector::new(policy);
        let mut window: VecDeque<WindowFrame> = VecDeque::new();
        let mut pending = 0usize;
        let mut prev_max: Option<f64> = None;
        // The tracker's reference keyframe: image, combined depth, pose.
        let mut reference: Option<(ImageFrame, crate::tracking::CombinedDepthBuffer, PoseSE3)> =
            None;
        let mut last_rel = PoseSE3::identity();

        let drain =
            |pending: &mut usize, prev_max: &mut Option<f64>,
             kf_depths: &mut Vec<(usize, DepthMap)>|
             -> Result<(), PipelineError> {
                while *pending > 0 {
                    let done = rx_done
                        .recv()
                        .map_err(|_| PipelineError::Dataset("mapper exited early".into()))??;
                    *pending -= 1;
                    // 95th percentile: straggler outliers must not inflate
                    // the next window's hypothesis range.
                    if let Some(m) = done.final_depth.valid_depth_quantile(0.95) {
                        *prev_max = Some(m);
                    }
                    kf_depths.push((done.frame_index, done.final_depth));
                }
                Ok(())
            };

        for (i, frame) in seq.frames.iter().enumerate() {
            let pose = if !tracking {
                gt_pose_at(seq.gt_trajectory.as_ref().unwrap(), frame.timestamp).ok_or_else(
                    || {
                        PipelineError::Dataset(format!(
                            "no ground-truth pose within tolerance of t={}",
                            frame.timestamp
                        ))
                    },
                )?
            } else if let Some((ref_image, ref_buffer, ref_pose)) = &reference {
                let (rel, diag) =
                    track_frame(ref_image, ref_buffer, frame, &last_rel, &intr, &cfg.tracker)
                        .map_err(|e| {
                            PipelineError::Frame(i, Box::new(PipelineError::Tracking(e)))
                        })?;
                last_rel = rel;
                diagnostics.push(FrameDiagnostics {
                    frame_id: i,
                    rmse: diag.rmse,
                    inlier_frac: diag.inlier_fraction,
                    iters: diag.iterations,
                    provenance_sparse_frac: ref_buffer.sparse_fraction(),
                });
                ref_pose.compose(&rel.inverse())
            } else {
                // First frame: anchor at ground truth when available so the
                // estimate shares the ground-truth frame.
                seq.gt_trajectory
                    .as_ref()
                    .and_then(|gt| gt_pose_at(gt, frame.timestamp))
                    .unwrap_or_else(PoseSE3::identity)
            };
            est_samples.push((frame.timestamp, pose));

            if !selector.decide(i, &pose) {
                continue;
            }
            // New keyframe: catch up on mapping so the snapshot below holds
            // every previous keyframe (one-keyframe-stale at worst), then
            // hand the mapper its next job.
            drain(&mut pending, &mut prev_max, &mut kf_depths)?;

            // One raycast serves both the dense half of the buffer and the
            // model-sourced sparse points.
            let needs_model = tracking
                && (cfg.use_dense_buffer
                    || cfg.sparse_source == SparseSourceMode::Model);
            let model_depth = if needs_model {
                volume.lock().unwrap().raycast(&pose, &intr).0
            } else {
                DepthMap::invalid(intr.width, intr.height)
            };
            let mut sparse = SparseDepthMap::empty(intr.width, intr.height);
            if cfg.sparse_points > 0 {
                let source = match cfg.sparse_source {
                    SparseSourceMode::GtGradient => seq.gt_depth[i].as_ref(),
                    // The model needs enough surface to supply the points;
                    // before that (the first keyframes) fall back to ground
                    // truth so both buffer variants bootstrap identically.
                    SparseSourceMode::Model => {
                        if model_depth.valid_count() >= cfg.sparse_points {
                            Some(&model_depth)
                        } else {
                            seq.gt_depth[i].as_ref()
                        }
                    }
                    SparseSourceMode::None => None,
                };
                if let Some(depth) = source {
                    sparse = sparse_from_gradient(frame, depth, cfg.sparse_points)?;
                }
            }
            let sparse_mean = if sparse.is_empty() {
                None
            } else {
                Some(
                    sparse.entries().iter().map(|&(_, _, d)| d).sum::<f64>()
                        / sparse.len() as f64,
                )
            };
            if tracking {
                let rendered = if cfg.use_dense_buffer {
                    model_depth
                } else {
                    DepthMap::invalid(intr.width, intr.height)
                };
                reference = Some((frame.clone(), combine_depth(&sparse, &rendered)?, pose));
                last_rel = PoseSE3::identity();
            }

            let pyramid = extract_classical(frame, &feat_cfg)?;
            window.push_back(WindowFrame {
                image: frame.clone(),
                pyramid,
                pose,
            });
            if window.len() > cfg.window {
                window.pop_front();
            }
            if window.len() >= 2 {
                let job = KeyframeJob {
                    window: KeyframeWindow::new(window.iter().cloned().collect(), intr)?,
                    frame_index: i,
                    sparse_mean,
                    prev_max,
                };
                tx_job
                    .send(job)
                    .map_err(|_| PipelineError::Dataset("mapper exited early".into()))?;
                pending += 1;
            }
        }
        drop(tx_job);
        drain(&mut pending, &mut prev_max, &mut kf_depths)?;
        Ok(())
    });
    loop_result?;

    // Artifacts.
    let trajectory = Trajectory {
        samples: est_samples,
    };
    let trajectory_path = cfg.output.join("trajectory.txt");
    write_tum_trajectory(&trajectory_path, &trajectory)?;

    let mut per_image: Vec<DepthMetrics> = Vec::new();
    for (frame_index, depth) in &kf_depths {
        save_depth_png(&depth_dir.join(format!("kf_{frame_index:05}.png")), depth)?;
        if let Some(gt) = &seq.gt_depth[*frame_index] {
            if let Ok(m) = depth_metrics(depth, gt) {
                per_image.push(m);
            }
        }
    }

    let mesh_path = cfg.output.join("mesh.ply");
    let mesh = extract_mesh(&volume.into_inner().unwrap());
    write_mesh_ply(&mesh_path, &mesh)?;

    let diagnostics_csv_path = cfg.output.join("diagnostics.csv");
    write_diagnostics_csv(&diagnostics_csv_path, &diagnostics)?;

    let depth_report = if per_image.is_empty() {
        None
    } else {
        Some(sequence_metrics(&per_image)?)
    };
    let traj_report = match &seq.gt_trajectory {
        Some(gt) if tracking => ate_rmse(&trajectory, gt, AlignmentMode::Sim3).ok(),
        _ => None,
    };
    let report = EvaluationReport {
        sequence: cfg
            .output
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into()),
        depth: depth_report,
        trajectory: traj_report,
        mesh: None,
    };
    let metrics_json_path = cfg.output.join("metrics.json");
    write_report_json(&metrics_json_path, &report)?;
    let summary_csv_path = cfg.output.join("summary.csv");
    write_summary_csv(&summary_csv_path, &[report.clone()])?;

    Ok(RunArtifacts {
        trajectory_path,
        mesh_path,
        metrics_json_path,
        summary_csv_path,
        diagnostics_csv_path,
        depth_dir,
        trajectory,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyframe_policy_examples() {
        let poses = vec![PoseSE3::identity(); 20];
        assert_eq!(
            select_keyframes(&poses, KeyframePolicy::EveryK(5)),
            vec![0, 5, 10, 15]
        );
        assert_eq!(
            select_keyframes(&poses, KeyframePolicy::TranslationThreshold(0.1)),
            vec![0]
        );
        let all: Vec<usize> = (0..20).collect();
        assert_eq!(select_keyframes(&poses, KeyframePolicy::EveryK(1)), all);
        let moving: Vec<PoseSE3> = (0..4)
            .map(|i| {
                PoseSE3::from_parts(
                    nalgebra::Matrix3::identity(),
                    Vector3::new(0.06 * i as f64, 0.0, 0.0),
                )
            })
            .collect();
        assert_eq!(
            select_keyframes(&moving, KeyframePolicy::TranslationThreshold(0.1)),
            vec![0, 2]
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig {
            mode: Mode::Synth,
            ..PipelineConfig::default()
        };
        cfg.validate().unwrap();
        cfg.window = 1;
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        cfg.window = 7;
        cfg.every_k = 0;
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
        cfg.every_k = 5;
        cfg.mode = Mode::TrackAndMap;
        // No dataset outside synth mode.
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let text = r#"
            mode = "synth"
            output = "run_out"
            every_k = 3
            window = 4

            [synth]
            frames = 12
            arc_degrees = 10.0

            [mvs]
            planes = [32, 4, 4]

            [tracker]
            huber = 0.05
        "#;
        let cfg = PipelineConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.mode, Mode::Synth);
        assert_eq!(cfg.every_k, 3);
        assert_eq!(cfg.synth.frames, 12);
        assert_eq!(cfg.mvs.planes, [32, 4, 4]);
        assert_eq!(cfg.tracker.huber, 0.05);
        // Unspecified fields keep their defaults.
        assert_eq!(cfg.window, 4);
        assert_eq!(cfg.sparse_points, 2000);
    }

    #[test]
    fn single_frame_sequence_is_rejected() {
        let cfg = PipelineConfig {
            mode: Mode::Synth,
            synth: SynthSequenceConfig {
                frames: 1,
                ..SynthSequenceConfig::default()
            },
            output: tempfile::tempdir().unwrap().path().to_path_buf(),
            ..PipelineConfig::default()
        };
        assert!(matches!(run(&cfg), Err(PipelineError::Dataset(_))));
    }

    #[test]
    fn ingest_reports_missing_calibration() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("rgb")).unwrap();
        let err = ingest(dir.path(), "tum").unwrap_err();
        assert!(err.to_string().contains("calibration.txt"), "{err}");
    }

    #[test]
    fn ingest_rejects_duplicate_timestamps() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = dir.path().join("rgb");
        std::fs::create_dir(&rgb).unwrap();
        std::fs::write(
            dir.path().join("calibration.txt"),
            "100 100 39.5 29.5 80 60\n",
        )
        .unwrap();
        let img = Grid::filled(80, 60, 0.5);
        save_intensity_png(&rgb.join("1.000000.png"), &img).unwrap();
        save_intensity_png(&rgb.join("01.000000.png"), &img).unwrap();
        let err = ingest(dir.path(), "tum").unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn export_ingest_round_trip_is_bit_exact() {
        let synth = SynthSequenceConfig {
            frames: 3,
            width: 80,
            height: 60,
            fx: 100.0,
            fy: 100.0,
            cx: 39.5,
            cy: 29.5,
            ..SynthSequenceConfig::default()
        };
        let seq = synthesize_sequence(&synth, 5).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        export_sequence(dir_a.path(), &seq).unwrap();
        let reloaded = load_sequence(&ingest(dir_a.path(), "tum").unwrap()).unwrap();
        export_sequence(dir_b.path(), &reloaded).unwrap();
        for sub in ["rgb", "depth"] {
            for entry in std::fs::read_dir(dir_a.path().join(sub)).unwrap() {
                let p = entry.unwrap().path();
                let q = dir_b.path().join(sub).join(p.file_name().unwrap());
                assert_eq!(
                    std::fs::read(&p).unwrap(),
                    std::fs::read(&q).unwrap(),
                    "{} differs",
                    p.display()
                );
            }
        }
        assert_eq!(
            std::fs::read(dir_a.path().join("groundtruth.txt")).unwrap(),
            std::fs::read(dir_b.path().join("groundtruth.txt")).unwrap()
        );
    }

    fn small_synth_cfg(mode: Mode, out: PathBuf) -> PipelineConfig {
        PipelineConfig {
            mode,
            output: out,
            every_k: 3,
            window: 3,
            synth: SynthSequenceConfig {
                frames: 10,
                arc_degrees: 5.0,
                ..SynthSequenceConfig::default()
            },
            mvs: MvsConfig {
                planes: [32, 4, 4],
                ..MvsConfig::default()
            },
            workers: Some(2),
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn mapping_only_run_emits_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_synth_cfg(Mode::MappingOnly, dir.path().join("run"));
        // Mapping-only on a synthesized source still needs gt poses, which
        // the synthesizer provides.
        let mut cfg = cfg;
        cfg.mode = Mode::Synth;
        let synth_seq = synthesize_sequence(&cfg.synth, cfg.seed).unwrap();
        let data_dir = dir.path().join("data");
        export_sequence(&data_dir, &synth_seq).unwrap();
        cfg.mode = Mode::MappingOnly;
        cfg.dataset = Some(data_dir);
        let artifacts = run(&cfg).unwrap();
        for p in [
            &artifacts.trajectory_path,
            &artifacts.mesh_path,
            &artifacts.metrics_json_path,
            &artifacts.summary_csv_path,
            &artifacts.diagnostics_csv_path,
        ] {
            assert!(p.exists(), "{} missing", p.display());
        }
        // Keyframes 0,3,6,9; MVS runs once the window holds >= 2 of them.
        let depths: Vec<_> = std::fs::read_dir(&artifacts.depth_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(depths.len(), 3, "depth files: {depths:?}");
        assert_eq!(artifacts.trajectory.samples.len(), 10);
        let depth = artifacts.report.depth.as_ref().expect("depth metrics");
        assert_eq!(depth.per_image.len(), 3);
        assert!(depth.mean.a1_pct > 50.0, "a1 {}", depth.mean.a1_pct);
        // Tracking never ran.
        assert!(artifacts.report.trajectory.is_none());
        let diag = std::fs::read_to_string(&artifacts.diagnostics_csv_path).unwrap();
        assert_eq!(diag.lines().count(), 1, "header only");
    }

    #[test]
    fn track_and_map_run_reports_ate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_synth_cfg(Mode::Synth, dir.path().join("run"));
        let artifacts = run(&cfg).unwrap();
        let traj = artifacts.report.trajectory.as_ref().expect("ate report");
        assert_eq!(traj.matches, 10);
        // 5-degree arc at radius 2.5: the orbit spans ~0.22 m; tracked ATE
        // should be far below 1% of the radius.
        assert!(traj.ate_rmse < 0.025, "ate {}", traj.ate_rmse);
        let diag = std::fs::read_to_string(&artifacts.diagnostics_csv_path).unwrap();
        assert_eq!(diag.lines().count(), 10, "9 tracked frames + header");
    }
}
