//! Depth, trajectory, and mesh evaluation: per-image depth metrics with
//! per-image-first sequence averaging, Umeyama-aligned ATE, and mesh
//! accuracy/completeness against sampled ground-truth surfaces.

use crate::geometry::{align_umeyama_se3, align_umeyama_sim3, GeometryError, Trajectory};
use crate::mvs::DepthMap;
use crate::tsdf::TriangleMesh;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no pixels are valid in both prediction and ground truth")]
    NoValidPixels,
    #[error("empty sequence")]
    EmptySequence,
    #[error("only {0} trajectory matches, need at least {1}")]
    TooFewMatches(usize, usize),
    #[error("empty mesh or point set")]
    EmptyInput,
    #[error("resolution mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alignment failed: {0}")]
    Alignment(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Per-image depth accuracy. Percentages are in [0, 100]; `abs_cm` is the
/// mean absolute error in centimeters over the jointly valid pixels.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DepthMetrics {
    pub abs_cm: f64,
    /// Relative error below 10%.
    pub a1_pct: f64,
    /// Relative error below 1%.
    pub a2_pct: f64,
    /// Relative error below 0.1%.
    pub a3_pct: f64,
    /// max(y/y*, y*/y) < 1.25.
    pub d1_pct: f64,
    /// Share of valid ground-truth pixels that the prediction covers. Not a
    /// headline metric: invalid predictions are excluded from the metrics
    /// above, so this is what keeps completeness visible.
    pub coverage_pct: f64,
    /// Jointly valid pixel count behind the headline metrics.
    pub n: usize,
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics, EvalError> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(EvalError::ShapeMismatch(format!(
            "pred {}x{} vs gt {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut n = 0usize;
    let mut gt_valid = 0usize;
    let mut abs_sum = 0.0;
    let (mut a1, mut a2, mut a3, mut d1) = (0usize, 0usize, 0usize, 0usize);
    for (i, (&y, &ys)) in pred.depth.data().iter().zip(gt.depth.data()).enumerate() {
        if !gt.valid.data()[i] || ys <= 0.0 {
            continue;
        }
        gt_valid += 1;
        if !pred.valid.data()[i] {
            continue;
        }
        n += 1;
        abs_sum += (y - ys).abs();
        let rel = (y - ys).abs() / ys;
        if rel < 0.1 {
            a1 += 1;
        }
        if rel < 0.01 {
            a2 += 1;
        }
        if rel < 0.001 {
            a3 += 1;
        }
        if (y / ys).max(ys / y) < 1.25 {
            d1 += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoValidPixels);
    }
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    Ok(DepthMetrics {
        abs_cm: 100.0 * abs_sum / n as f64,
        a1_pct: pct(a1),
        a2_pct: pct(a2),
        a3_pct: pct(a3),
        d1_pct: pct(d1),
        coverage_pct: if gt_valid > 0 {
            100.0 * n as f64 / gt_valid as f64
        } else {
            0.0
        },
        n,
    })
}

/// Sequence-level depth report: the mean is taken over per-image values, not
/// pooled pixels, so every image carries equal weight.
#[derive(Debug, Clone, Serialize)]
pub struct DepthMetricsReport {
    pub per_image: Vec<DepthMetrics>,
    pub mean: DepthMetrics,
}

pub fn sequence_metrics(per_image: &[DepthMetrics]) -> Result<DepthMetricsReport, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::EmptySequence);
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&DepthMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(DepthMetricsReport {
        per_image: per_image.to_vec(),
        mean: DepthMetrics {
            abs_cm: mean(|m| m.abs_cm),
            a1_pct: mean(|m| m.a1_pct),
            a2_pct: mean(|m| m.a2_pct),
            a3_pct: mean(|m| m.a3_pct),
            d1_pct: mean(|m| m.d1_pct),
            coverage_pct: mean(|m| m.coverage_pct),
            n: per_image.iter().map(|m| m.n).sum(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AlignmentMode {
    Sim3,
    Se3,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryReport {
    /// RMSE over translational residuals after alignment, in the ground
    /// truth's metric units.
    pub ate_rmse: f64,
    pub alignment: AlignmentMode,
    pub residuals: Vec<f64>,
    pub matches: usize,
}

pub const ASSOCIATION_TOLERANCE: f64 = 0.01;
const MIN_MATCHES: usize = 3;

/// Associate timestamps (nearest neighbor within `tolerance`, each pose used
/// at most once), align the matched estimated positions onto ground truth
/// with Umeyama, and report the RMSE of the remaining translational error.
pub fn ate_rmse(
    estimated: &Trajectory,
    gt: &Trajectory,
    mode: AlignmentMode,
) -> Result<TrajectoryReport, EvalError> {
    ate_rmse_with_tolerance(estimated, gt, mode, ASSOCIATION_TOLERANCE)
}

pub fn ate_rmse_with_tolerance(
    estimated: &Trajectory,
    gt: &Trajectory,
    mode: AlignmentMode,
    tolerance: f64,
) -> Result<TrajectoryReport, EvalError> {
    // Candidate pairs sorted by time difference, then greedy one-to-one
    // matching: deterministic and each pose claimed by its closest partner.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, (te, _)) in estimated.samples.iter().enumerate() {
        for (j, (tg, _)) in gt.samples.iter().enumerate() {
            let dt = (te - tg).abs();
            if dt <= tolerance {
                candidates.push((dt, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut est_used = vec![false; estimated.samples.len()];
    let mut gt_used = vec![false; gt.samples.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (_, i, j) in candidates {
        if !est_used[i] && !gt_used[j] {
            est_used[i] = true;
            gt_used[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.len() < MIN_MATCHES {
        return Err(EvalError::TooFewMatches(pairs.len(), MIN_MATCHES));
    }
    pairs.sort_unstable();
    let src: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|&(i, _)| estimated.samples[i].1.translation())
        .collect();
    let dst: Vec<Vector3<f64>> = pairs
        .iter()
        .map(|&(_, j)| gt.samples[j].1.translation())
        .collect();
    let transform = match mode {
        AlignmentMode::Sim3 => align_umeyama_sim3(&src, &dst)?,
        AlignmentMode::Se3 => align_umeyama_se3(&src, &dst)?,
    };
    let residuals: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (d - transform.transform(*s)).norm())
        .collect();
    let ate_rmse =
        (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(TrajectoryReport {
        ate_rmse,
        alignment: mode,
        residuals,
        matches: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeshMetrics {
    /// Mean distance from predicted surface samples to ground truth (cm).
    pub accuracy_cm: f64,
    /// Mean distance from ground-truth samples to the predicted surface (cm).
    pub completion_cm: f64,
    /// Share of ground-truth samples within the threshold (%).
    pub completion_ratio_pct: f64,
}

/// Uniform area-weighted surface samples from a triangle mesh.
pub fn sample_mesh_points(mesh: &TriangleMesh, n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize].position);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.gen_range(0.0..total);
        let idx = cumulative.partition_point(|&c| c <= r);
        let [a, b, c] = mesh.faces[idx.min(mesh.faces.len() - 1)]
            .map(|i| mesh.vertices[i as usize].position);
        // Uniform barycentric sample via square-root reflection.
        let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        points.push(a + (b - a) * u + (c - a) * v);
    }
    points
}

/// Uniform-grid nearest-neighbor index over a fixed point set.
struct PointGrid {
    cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>>,
    points: Vec<Vector3<f64>>,
    cell: f64,
}

impl PointGrid {
    fn build(points: Vec<Vector3<f64>>, cell: f64) -> Self {
        let mut cells: std::collections::HashMap<(i64, i64, i64), Vec<usize>> =
            std::collections::HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self {
            cells,
            points,
            cell,
        }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Distance to the nearest stored point, growing the search ring until a
    /// candidate is provably closest.
    fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let (kx, ky, kz) = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(idxs) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                            for &i in idxs {
                                best = best.min((self.points[i] - q).norm());
                            }
                        }
                    }
                }
            }
            // Any point outside the searched rings is at least
            // ring × cell away, so a hit within that bound is final.
            if best <= ring as f64 * self.cell {
                return best;
            }
            ring += 1;
        }
    }
}

pub const DEFAULT_MESH_SAMPLES: usize = 100_000;

/// iMAP-style mesh metrics: accuracy is the mean predicted-to-ground-truth
/// distance, completion the reverse, completion ratio the share of ground
/// truth within `threshold_cm`.
pub fn mesh_accuracy_completeness(
    pred: &TriangleMesh,
    gt_samples: &[Vector3<f64>],
    threshold_cm: f64,
    samples: usize,
    seed: u64,
) -> Result<MeshMetrics, EvalError> {
    if pred.faces.is_empty() || gt_samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let pred_samples = sample_mesh_points(pred, samples, seed);
    if pred_samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    // Cell size on the order of typical nearest-neighbor spacing keeps both
    // the occupancy and the ring search cheap.
    let cell = (threshold_cm / 100.0).max(1e-6);
    let gt_grid = PointGrid::build(gt_samples.to_vec(), cell);
    let pred_grid = PointGrid::build(pred_samples.clone(), cell);

    let accuracy_cm = 100.0
        * pred_samples
            .iter()
            .map(|p| gt_grid.nearest_distance(p))
            .sum::<f64>()
        / pred_samples.len() as f64;
    let mut comp_sum = 0.0;
    let mut within = 0usize;
    for g in gt_samples {
        let d_cm = 100.0 * pred_grid.nearest_distance(g);
        comp_sum += d_cm;
        if d_cm < threshold_cm {
            within += 1;
        }
    }
    Ok(MeshMetrics {
        accuracy_cm,
        completion_cm: comp_sum / gt_samples.len() as f64,
        completion_ratio_pct: 100.0 * within as f64 / gt_samples.len() as f64,
    })
}

/// Full JSON report: per-image depth metrics, sequence means, and optional
/// trajectory/mesh sections.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub sequence: String,
    pub depth: Option<DepthMetricsReport>,
    pub trajectory: Option<TrajectoryReport>,
    pub mesh: Option<MeshMetrics>,
}

pub fn write_report_json(path: &Path, report: &EvaluationReport) -> Result<(), EvalError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, report)?;
    Ok(())
}

/// One CSV row per sequence with the headline numbers.
pub fn write_summary_csv(path: &Path, reports: &[EvaluationReport]) -> Result<(), EvalError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "sequence,abs_cm,a1_pct,a2_pct,a3_pct,d1_pct,coverage_pct,ate_rmse_m,mesh_acc_cm,mesh_comp_cm,mesh_cr_pct"
    )?;
    for r in reports {
        let depth = r.depth.as_ref().map(|d| d.mean);
        let field = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.sequence,
            field(depth.map(|d| d.abs_cm)),
            field(depth.map(|d| d.a1_pct)),
            field(depth.map(|d| d.a2_pct)),
            field(depth.map(|d| d.a3_pct)),
            field(depth.map(|d| d.d1_pct)),
            field(depth.map(|d| d.coverage_pct)),
            field(r.trajectory.as_ref().map(|t| t.ate_rmse)),
            field(r.mesh.map(|m| m.accuracy_cm)),
            field(r.mesh.map(|m| m.completion_cm)),
            field(r.mesh.map(|m| m.completion_ratio_pct)),
        )?;
    }
    Ok(())
}
