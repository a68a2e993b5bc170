//! `densemap` command-line front end: run the full pipeline, or drive the
//! individual stages (depth estimation, fusion, tracking, evaluation,
//! synthetic data export) on their own.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use densemap::eval::{
    ate_rmse, depth_metrics, sequence_metrics, write_report_json, AlignmentMode, EvaluationReport,
};
use densemap::features::{extract_classical, FeatureConfig};
use densemap::geometry::read_tum_trajectory;
use densemap::mvs::{
    cascade_estimate, depth_range_schedule, load_depth_png, save_depth_png, KeyframeWindow,
    WindowFrame,
};
use densemap::pipeline::{
    export_sequence, ingest, load_sequence, run, synthesize_sequence, LoadedSequence, Mode,
    PipelineConfig, SynthSequenceConfig,
};
use densemap::tracking::{combine_depth, sparse_from_gradient, track_frame, TrackerConfig};
use densemap::tsdf::{extract_mesh, write_mesh_ply, HashedTsdfVolume, TsdfConfig};
use densemap::PoseSE3;

#[derive(Parser)]
#[command(name = "densemap", version, about = "Dense monocular mapping pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    MappingOnly,
    TrackAndMap,
    Synth,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::MappingOnly => Mode::MappingOnly,
            ModeArg::TrackAndMap => Mode::TrackAndMap,
            ModeArg::Synth => Mode::Synth,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Sim3,
    Se3,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write trajectory, depth maps, mesh, and
    /// metrics into the output directory.
    Run {
        /// Pipeline config TOML; flags below override individual keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mode: Option<ModeArg>,
        /// Dataset directory (rgb/, optional depth/, calibration.txt,
        /// groundtruth.txt).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Keyframe stride.
        #[arg(long)]
        every_k: Option<usize>,
        /// Keyframe window size (2..=8).
        #[arg(long)]
        window: Option<usize>,
        /// Worker thread count (default: one per core).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sparse depth samples per keyframe.
        #[arg(long)]
        sparse_points: Option<usize>,
        /// Include rendered model depth in the tracker's buffer.
        #[arg(long)]
        use_dense_buffer: Option<bool>,
    },
    /// Estimate a single depth map from one keyframe window of a posed
    /// dataset.
    Mvs {
        #[arg(long)]
        dataset: PathBuf,
        /// First frame of the window.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Frame stride inside the window.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Window size (2..=8); the newest frame is the reference.
        #[arg(long, default_value_t = 7)]
        window: usize,
        /// Output 16-bit depth PNG (meters x5000).
        #[arg(long)]
        output: PathBuf,
    },
    /// Fuse a dataset's depth maps into a TSDF and export the mesh.
    Fuse {
        #[arg(long)]
        dataset: PathBuf,
        /// Output PLY mesh.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        voxel_size: f64,
        #[arg(long, default_value_t = 0.1)]
        truncation: f64,
        /// Integrate every k-th frame.
        #[arg(long, default_value_t = 1)]
        every_k: usize,
    },
    /// Align one frame against another and print the relative pose.
    Track {
        #[arg(long)]
        dataset: PathBuf,
        /// Reference frame index (needs ground-truth depth).
        #[arg(long, default_value_t = 0)]
        reference: usize,
        /// Frame to align.
        #[arg(long, default_value_t = 1)]
        frame: usize,
        /// Sparse samples taken from the reference depth map.
        #[arg(long, default_value_t = 2000)]
        sparse_points: usize,
    },
    /// Compare two directories of depth PNGs frame by frame.
    EvalDepth {
        /// Directory of predicted depth PNGs.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth depth PNGs (matched by file name).
        #[arg(long)]
        gt: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Absolute trajectory error between two TUM-format trajectories.
    EvalTraj {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = AlignArg::Sim3)]
        align: AlignArg,
    },
    /// Render a synthetic orbit sequence and export it as a dataset.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 2.5)]
        radius: f64,
        #[arg(long, default_value_t = 20.0)]
        arc_degrees: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene description TOML (built-in scene when absent).
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Degrade every k-th frame's texture.
        #[arg(long)]
        degrade_period: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Command::Run {
            config,
            mode,
            dataset,
            output,
            every_k,
            window,
            workers,
            seed,
            sparse_points,
            use_dense_buffer,
        } => {
            let mut cfg = match config {
                Some(path) => PipelineConfig::load(&path)?,
                None => PipelineConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            if let Some(d) = dataset {
                cfg.dataset = Some(d);
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            if let Some(k) = every_k {
                cfg.every_k = k;
            }
            if let Some(w) = window {
                cfg.window = w;
            }
            if workers.is_some() {
                cfg.workers = workers;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = sparse_points {
                cfg.sparse_points = p;
            }
            if let Some(b) = use_dense_buffer {
                cfg.use_dense_buffer = b;
            }
            let artifacts = run(&cfg)?;
            print_report(&artifacts.report);
            println!("trajectory: {}", artifacts.trajectory_path.display());
            println!("mesh:       {}", artifacts.mesh_path.display());
            println!("metrics:    {}", artifacts.metrics_json_path.display());
            Ok(())
        }
        Command::Mvs {
            dataset,
            start,
            stride,
            window,
            output,
        } => cmd_mvs(&dataset, start, stride, window, &output),
        Command::Fuse {
            dataset,
            output,
            voxel_size,
            truncation,
            every_k,
        } => cmd_fuse(&dataset, &output, voxel_size, truncation, every_k),
        Command::Track {
            dataset,
            reference,
            frame,
            sparse_points,
        } => cmd_track(&dataset, reference, frame, sparse_points),
        Command::EvalDepth { pred, gt, json } => cmd_eval_depth(&pred, &gt, json.as_deref()),
        Command::EvalTraj { est, gt, align } => {
            let est = read_tum_trajectory(&est)?;
            let gt = read_tum_trajectory(&gt)?;
            let mode = match align {
                AlignArg::Sim3 => AlignmentMode::Sim3,
                AlignArg::Se3 => AlignmentMode::Se3,
            };
            let report = ate_rmse(&est, &gt, mode)?;
            println!(
                "ate_rmse {:.6} m over {} matched poses ({:?} alignment)",
                report.ate_rmse, report.matches, report.alignment
            );
            Ok(())
        }
        Command::Synth {
            output,
            frames,
            radius,
            arc_degrees,
            seed,
            scene,
            degrade_period,
        } => {
            let cfg = SynthSequenceConfig {
                scene,
                frames,
                radius,
                arc_degrees,
                degrade_period,
                ..SynthSequenceConfig::default()
            };
            let seq = synthesize_sequence(&cfg, seed)?;
            export_sequence(&output, &seq)?;
            println!("wrote {} frames to {}", seq.frames.len(), output.display());
            Ok(())
        }
    }
}

fn load_posed(dataset: &Path) -> Result<LoadedSequence, Box<dyn std::error::Error>> {
    let seq = load_sequence(&ingest(dataset, "tum")?)?;
    if seq.gt_trajectory.is_none() {
        return Err("dataset has no groundtruth.txt (poses required)".into());
    }
    Ok(seq)
}

/// Ground-truth pose for frame `i`, matched by timestamp.
fn pose_of(seq: &LoadedSequence, i: usize) -> Result<PoseSE3, Box<dyn std::error::Error>> {
    let t = seq.frames[i].timestamp;
    let gt = seq.gt_trajectory.as_ref().unwrap();
    gt.samples
        .iter()
        .find(|(tg, _)| (tg - t).abs() <= densemap::eval::ASSOCIATION_TOLERANCE)
        .map(|(_, p)| *p)
        .ok_or_else(|| format!("no ground-truth pose for frame {i} (t={t:.6})").into())
}

fn cmd_mvs(
    dataset: &Path,
    start: usize,
    stride: usize,
    window: usize,
    output: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let seq = load_posed(dataset)?;
    if stride == 0 {
        return Err("stride must be at least 1".into());
    }
    let last = start + (window - 1) * stride;
    if last >= seq.frames.len() {
        return Err(format!(
            "window [{start}..={last}] exceeds the {} available frames",
            seq.frames.len()
        )
        .into());
    }
    let fcfg = FeatureConfig::default();
    let mut frames = Vec::with_capacity(window);
    for k in 0..window {
        let i = start + k * stride;
        frames.push(WindowFrame {
            image: seq.frames[i].clone(),
            pyramid: extract_classical(&seq.frames[i], &fcfg)?,
            pose: pose_of(&seq, i)?,
        });
    }
    let win = KeyframeWindow::new(frames, seq.intrinsics)?;
    let mut cfg = densemap::mvs::MvsConfig::default();
    // Seed the plane ladder from the reference frame's ground-truth depth
    // when available, mirroring the live schedule.
    let ref_idx = start + (window - 1) * stride;
    if let Some(Some(gt)) = seq.gt_depth.get(ref_idx) {
        if let Some(mean) = gt.mean_valid_depth() {
            let (d_min, d_max) = depth_range_schedule(Some(mean), None)?;
            cfg.d_min = d_min;
            cfg.d_max = d_max;
        }
    }
    let result = cascade_estimate(&win, &cfg)?;
    save_depth_png(output, &result.final_depth)?;
    println!(
        "depth map {}x{}: {} valid pixels -> {}",
        result.final_depth.width(),
        result.final_depth.height(),
        result.final_depth.valid_count(),
        output.display()
    );
    if let Some(Some(gt)) = seq.gt_depth.get(ref_idx) {
        if let Ok(m) = depth_metrics(&result.final_depth, gt) {
            println!(
                "vs ground truth: abs {:.2} cm, a1 {:.1}%, coverage {:.1}%",
                m.abs_cm, m.a1_pct, m.coverage_pct
            );
        }
    }
    Ok(())
}

fn cmd_fuse(
    dataset: &Path,
    output: &Path,
    voxel_size: f64,
    truncation: f64,
    every_k: usize,
) -> Result<(), Box<dyn std::error::Error>> {
    if every_k == 0 {
        return Err("every_k must be at least 1".into());
    }
    let seq = load_posed(dataset)?;
    let cfg = TsdfConfig {
        voxel_size,
        truncation,
        ..TsdfConfig::default()
    };
    let mut vol = HashedTsdfVolume::new(cfg)?;
    let mut fused = 0usize;
    for i in (0..seq.frames.len()).step_by(every_k) {
        let Some(depth) = &seq.gt_depth[i] else {
            continue;
        };
        let pose = pose_of(&seq, i)?;
        vol.integrate(depth, Some(&seq.frames[i]), &pose, &seq.intrinsics)?;
        fused += 1;
    }
    if fused == 0 {
        return Err("dataset has no depth maps to fuse".into());
    }
    let mesh = extract_mesh(&vol);
    write_mesh_ply(output, &mesh)?;
    println!(
        "fused {} frames into {} blocks; mesh with {} vertices, {} faces -> {}",
        fused,
        vol.allocated_blocks(),
        mesh.vertices.len(),
        mesh.faces.len(),
        output.display()
    );
    Ok(())
}

fn cmd_track(
    dataset: &Path,
    reference: usize,
    frame: usize,
    sparse_points: usize,
) -> Result<(), Box<dyn std::error::Error>> {
    let seq = load_posed(dataset)?;
    let n = seq.frames.len();
    if reference >= n || frame >= n {
        return Err(format!("frame indices must be below {n}").into());
    }
    let Some(ref_depth) = &seq.gt_depth[reference] else {
        return Err(format!("frame {reference} has no depth map").into());
    };
    let sparse = sparse_from_gradient(&seq.frames[reference], ref_depth, sparse_points)?;
    let buffer = combine_depth(&sparse, ref_depth)?;
    let cfg = TrackerConfig::default();
    let (rel, diag) = track_frame(
        &seq.frames[reference],
        &buffer,
        &seq.frames[frame],
        &PoseSE3::identity(),
        &seq.intrinsics,
        &cfg,
    )?;
    let t = rel.translation();
    let angle = ((rel.rotation().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
    println!(
        "relative pose {reference} -> {frame}: translation [{:.6} {:.6} {:.6}] m, rotation {:.4} deg",
        t.x,
        t.y,
        t.z,
        angle.to_degrees()
    );
    println!(
        "{} iterations, final rmse {:.5}, inliers {:.1}%",
        diag.iterations,
        diag.rmse,
        100.0 * diag.inlier_fraction
    );
    // Report the error against ground truth when both poses are known. The
    // tracker's pose maps reference-camera points into the new camera, so
    // its ground-truth counterpart is pose_new^-1 * pose_ref.
    if let (Ok(pr), Ok(pf)) = (pose_of(&seq, reference), pose_of(&seq, frame)) {
        let gt_rel = pf.inverse().compose(&pr);
        let dt = (gt_rel.translation() - t).norm();
        println!("translation error vs ground truth: {:.6} m", dt);
    }
    Ok(())
}

fn cmd_eval_depth(
    pred_dir: &Path,
    gt_dir: &Path,
    json: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut names: Vec<String> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(format!("no depth PNGs in {}", pred_dir.display()).into());
    }
    let mut per_image = Vec::new();
    for name in &names {
        let gt_path = gt_dir.join(name);
        if !gt_path.exists() {
            eprintln!("skipping {name}: no ground-truth counterpart");
            continue;
        }
        let pred = load_depth_png(&pred_dir.join(name))?;
        let gt = load_depth_png(&gt_path)?;
        let m = depth_metrics(&pred, &gt)?;
        println!(
            "{name}: abs {:.2} cm, a1 {:.1}%, d1 {:.1}%, coverage {:.1}%",
            m.abs_cm, m.a1_pct, m.d1_pct, m.coverage_pct
        );
        per_image.push(m);
    }
    let report = sequence_metrics(&per_image)?;
    println!(
        "mean over {} images: abs {:.2} cm, a1 {:.1}%, a2 {:.1}%, a3 {:.1}%, d1 {:.1}%, coverage {:.1}%",
        per_image.len(),
        report.mean.abs_cm,
        report.mean.a1_pct,
        report.mean.a2_pct,
        report.mean.a3_pct,
        report.mean.d1_pct,
        report.mean.coverage_pct
    );
    if let Some(path) = json {
        let full = EvaluationReport {
            sequence: pred_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sequence".into()),
            depth: Some(report),
            trajectory: None,
            mesh: None,
        };
        write_report_json(path, &full)?;
        println!("report -> {}", path.display());
    }
    Ok(())
}

fn print_report(report: &EvaluationReport) {
    if let Some(depth) = &report.depth {
        println!(
            "depth ({} keyframes): abs {:.2} cm, a1 {:.1}%, d1 {:.1}%, coverage {:.1}%",
            depth.per_image.len(),
            depth.mean.abs_cm,
            depth.mean.a1_pct,
            depth.mean.d1_pct,
            depth.mean.coverage_pct
        );
    }
    if let Some(traj) = &report.trajectory {
        println!(
            "trajectory: ate_rmse {:.6} m over {} matches",
            traj.ate_rmse, traj.matches
        );
    }
    if let Some(mesh) = &report.mesh {
        println!(
            "mesh: accuracy {:.2} cm, completion {:.2} cm, ratio {:.1}%",
            mesh.accuracy_cm, mesh.completion_cm, mesh.completion_ratio_pct
        );
    }
}
