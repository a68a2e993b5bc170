//! Dense direct frame tracking: combined sparse+rendered depth buffers and
//! two-frame photometric alignment over SE(3) plus an affine brightness
//! model, coarse-to-fine with Levenberg-damped Gauss-Newton.

use crate::features::ImageFrame;
use crate::geometry::{se3_exp, CameraIntrinsics, PoseSE3};
use crate::grid::Grid;
use crate::mvs::DepthMap;
use nalgebra::{SMatrix, SVector, Vector2, Vector3};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackingError {
    #[error("only {0} valid depth pixels at the coarsest level, need {1}")]
    InsufficientDepth(usize, usize),
    #[error("photometric error increased at every damping level")]
    Diverged,
    #[error("resolution mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid sparse entry: {0}")]
    BadSparseEntry(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a sparse depth map's entries came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseSource {
    Dataset,
    Sampled,
    None,
}

/// Sparse per-keyframe depth: a small set of (pixel, depth) samples.
#[derive(Debug, Clone)]
pub struct SparseDepthMap {
    width: usize,
    height: usize,
    entries: Vec<(usize, usize, f64)>,
    pub source: SparseSource,
}

impl SparseDepthMap {
    pub fn new(
        width: usize,
        height: usize,
        entries: Vec<(usize, usize, f64)>,
        source: SparseSource,
    ) -> Result<Self, TrackingError> {
        if entries.len() * 25 > width * height {
            return Err(TrackingError::BadSparseEntry(format!(
                "{} entries exceed 4% of {}x{}",
                entries.len(),
                width,
                height
            )));
        }
        for &(x, y, d) in &entries {
            if x >= width || y >= height {
                return Err(TrackingError::BadSparseEntry(format!(
                    "pixel ({x}, {y}) out of bounds"
                )));
            }
            if d <= 0.0 {
                return Err(TrackingError::BadSparseEntry(format!(
                    "non-positive depth {d} at ({x}, {y})"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            entries,
            source,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            entries: Vec::new(),
            source: SparseSource::None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }
}

/// Select the top-k image-gradient pixels with valid ground-truth depth as a
/// stand-in sparse point set (mimicking sparse-VO point selection).
pub fn sparse_from_gradient(
    image: &ImageFrame,
    depth: &DepthMap,
    k: usize,
) -> Result<SparseDepthMap, TrackingError> {
    let (w, h) = (image.width(), image.height());
    if depth.width() != w || depth.height() != h {
        return Err(TrackingError::ShapeMismatch(format!(
            "image {}x{} vs depth {}x{}",
            w,
            h,
            depth.width(),
            depth.height()
        )));
    }
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if !depth.valid.at(x, y) {
                continue;
            }
            let gx = 0.5 * (image.intensity.at(x + 1, y) - image.intensity.at(x - 1, y));
            let gy = 0.5 * (image.intensity.at(x, y + 1) - image.intensity.at(x, y - 1));
            scored.push((gx * gx + gy * gy, x, y));
        }
    }
    // Deterministic order: gradient descending, then raster position.
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| (a.2, a.1).cmp(&(b.2, b.1)))
    });
    let entries = scored
        .into_iter()
        .take(k)
        .map(|(_, x, y)| (x, y, depth.depth.at(x, y)))
        .collect();
    SparseDepthMap::new(w, h, entries, SparseSource::Sampled)
}

/// Per-pixel origin of a combined depth value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Invalid,
    Sparse,
    Rendered,
}

/// The nearly-dense depth buffer the tracker aligns against: sparse entries
/// (dilated by one pixel) take precedence over rendered model depth.
#[derive(Debug, Clone)]
pub struct CombinedDepthBuffer {
    pub depth: Grid<f64>,
    pub valid: Grid<bool>,
    pub provenance: Grid<Provenance>,
}

impl CombinedDepthBuffer {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v).count()
    }

    pub fn sparse_fraction(&self) -> f64 {
        let total = self.valid_count();
        if total == 0 {
            return 0.0;
        }
        let sparse = self
            .provenance
            .data()
            .iter()
            .filter(|&&p| p == Provenance::Sparse)
            .count();
        sparse as f64 / total as f64
    }

    /// View as a plain depth map (for TSDF integration or evaluation).
    pub fn as_depth_map(&self) -> DepthMap {
        DepthMap::new(self.depth.clone(), self.valid.clone())
    }
}

/// Merge sparse and rendered depth. Each sparse entry claims its 3x3 pixel
/// neighborhood (1-pixel dilation); exact entry pixels win over neighbors'
/// dilations; everything else falls back to valid rendered depth.
pub fn combine_depth(
    sparse: &SparseDepthMap,
    rendered: &DepthMap,
) -> Result<CombinedDepthBuffer, TrackingError> {
    if sparse.width != rendered.width() || sparse.height != rendered.height() {
        return Err(TrackingError::ShapeMismatch(format!(
            "sparse {}x{} vs rendered {}x{}",
            sparse.width,
            sparse.height,
            rendered.width(),
            rendered.height()
        )));
    }
    let (w, h) = (rendered.width(), rendered.height());
    let mut depth = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    let mut provenance = Grid::filled(w, h, Provenance::Invalid);
    for y in 0..h {
        for x in 0..w {
            if rendered.valid.at(x, y) {
                depth.set(x, y, rendered.depth.at(x, y));
                valid.set(x, y, true);
                provenance.set(x, y, Provenance::Rendered);
            }
        }
    }
    // Dilated footprints first, then exact entry pixels so an entry's own
    // depth always wins at its own pixel.
    for &(x, y, d) in sparse.entries() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                depth.set(nx as usize, ny as usize, d);
                valid.set(nx as usize, ny as usize, true);
                provenance.set(nx as usize, ny as usize, Provenance::Sparse);
            }
        }
    }
    for &(x, y, d) in sparse.entries() {
        depth.set(x, y, d);
    }
    Ok(CombinedDepthBuffer {
        depth,
        valid,
        provenance,
    })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Pyramid levels; level 0 is full resolution.
    pub levels: usize,
    /// Huber threshold in intensity units.
    pub huber: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the twist-update norm.
    pub convergence: f64,
    pub affine_brightness: bool,
    /// Residual budget per level (deterministic stride subsampling).
    pub max_residuals_per_level: usize,
    /// Minimum valid depth pixels at the coarsest level.
    pub min_coarsest_pixels: usize,
    /// Result is declared failed below this inlier fraction.
    pub min_inlier_fraction: f64,
    /// Residuals beyond this multiple of the median absolute residual are
    /// dropped entirely. Occluded and disoccluded pixels produce residuals
    /// far above the inlier noise level; the Huber weight alone leaves them
    /// enough influence to bias the pose.
    pub outlier_median_scale: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            huber: 0.06,
            max_iterations: 20,
            convergence: 1e-6,
            affine_brightness: true,
            max_residuals_per_level: 20_000,
            min_coarsest_pixels: 200,
            min_inlier_fraction: 0.4,
            outlier_median_scale: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackDiagnostics {
    pub rmse: f64,
    pub inlier_fraction: f64,
    pub iterations: usize,
    /// Affine brightness gain and bias of the final estimate.
    pub affine: (f64, f64),
    /// False when the inlier fraction fell below the configured minimum.
    pub ok: bool,
}

/// One CSV row of per-frame tracking diagnostics.
#[derive(Debug, Clone)]
pub struct FrameDiagnostics {
    pub frame_id: usize,
    pub rmse: f64,
    pub inlier_frac: f64,
    pub iters: usize,
    pub provenance_sparse_frac: f64,
}

pub fn write_diagnostics_csv(path: &Path, rows: &[FrameDiagnostics]) -> Result<(), TrackingError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "frame_id,rmse,inlier_frac,iters,provenance_sparse_frac")?;
    for r in rows {
        writeln!(
            file,
            "{},{:.6},{:.4},{},{:.4}",
            r.frame_id, r.rmse, r.inlier_frac, r.iters, r.provenance_sparse_frac
        )?;
    }
    Ok(())
}

fn downsample_2x(img: &Grid<f64>) -> Grid<f64> {
    Grid::from_fn(img.width() / 2, img.height() / 2, |x, y| {
        0.25 * (img.at(2 * x, 2 * y)
            + img.at(2 * x + 1, 2 * y)
            + img.at(2 * x, 2 * y + 1)
            + img.at(2 * x + 1, 2 * y + 1))
    })
}

fn downsample_depth(depth: &Grid<f64>, valid: &Grid<bool>) -> (Grid<f64>, Grid<bool>) {
    let (w, h) = (depth.width() / 2, depth.height() / 2);
    let mut d = Grid::filled(w, h, 0.0);
    let mut v = Grid::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            // Mean over the valid pixels of the 2x2 footprint.
            let mut sum = 0.0;
            let mut n = 0;
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                if valid.at(2 * x + dx, 2 * y + dy) {
                    sum += depth.at(2 * x + dx, 2 * y + dy);
                    n += 1;
                }
            }
            if n > 0 {
                d.set(x, y, sum / n as f64);
                v.set(x, y, true);
            }
        }
    }
    (d, v)
}

fn bilinear(img: &Grid<f64>, x: f64, y: f64) -> Option<f64> {
    // One-pixel margin so the central-difference gradient is also sampleable.
    if x < 1.0 || y < 1.0 || x > (img.width() - 2) as f64 || y > (img.height() - 2) as f64 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    Some(
        img.at(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + img.at(x0 + 1, y0) * fx * (1.0 - fy)
            + img.at(x0, y0 + 1) * (1.0 - fx) * fy
            + img.at(x0 + 1, y0 + 1) * fx * fy,
    )
}

/// Exact derivative of the bilinear interpolant (so the analytic Jacobian
/// agrees with finite differences of the sampled residual).
fn bilinear_gradient(img: &Grid<f64>, x: f64, y: f64) -> Option<Vector2<f64>> {
    if x < 1.0 || y < 1.0 || x > (img.width() - 2) as f64 || y > (img.height() - 2) as f64 {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let gx = (img.at(x0 + 1, y0) - img.at(x0, y0)) * (1.0 - fy)
        + (img.at(x0 + 1, y0 + 1) - img.at(x0, y0 + 1)) * fy;
    let gy = (img.at(x0, y0 + 1) - img.at(x0, y0)) * (1.0 - fx)
        + (img.at(x0 + 1, y0 + 1) - img.at(x0 + 1, y0)) * fx;
    Some(Vector2::new(gx, gy))
}

/// The 8-parameter state: SE(3) twist increment (left-multiplied) plus
/// affine brightness (a, b).
type Params = SVector<f64, 8>;
type Normal = SMatrix<f64, 8, 8>;

pub struct ResidualSample {
    pub pixel: (f64, f64),
    pub depth: f64,
    pub ref_intensity: f64,
}

/// Photometric residual and its analytic Jacobian for one sample under pose
/// `t` (new <- ref) and brightness (a, b). `None` when the warp leaves the
/// target image. Public so external checks can difference the residual
/// against the analytic Jacobian.
pub fn residual_jacobian(
    sample: &ResidualSample,
    t: &PoseSE3,
    a: f64,
    b: f64,
    new_image: &Grid<f64>,
    intr: &CameraIntrinsics,
) -> Option<(f64, Params)> {
    let ray = intr.ray(sample.pixel.0, sample.pixel.1);
    let p_new = t.transform(ray * sample.depth);
    if p_new.z <= 1e-9 {
        return None;
    }
    let u = intr.fx * p_new.x / p_new.z + intr.cx;
    let v = intr.fy * p_new.y / p_new.z + intr.cy;
    let intensity = bilinear(new_image, u, v)?;
    let grad = bilinear_gradient(new_image, u, v)?;
    let r = intensity - (a * sample.ref_intensity + b);

    // Chain rule through the projection; for a left increment exp(ξ) ∘ T
    // with twist layout (ω, v): dp_new/dω_k = e_k × p_new, dp_new/dv = I,
    // so the rotational part is gp · (e_k × p_new) = (p_new × gp)_k.
    let iz = 1.0 / p_new.z;
    let du = Vector3::new(intr.fx * iz, 0.0, -intr.fx * p_new.x * iz * iz);
    let dv = Vector3::new(0.0, intr.fy * iz, -intr.fy * p_new.y * iz * iz);
    let gp = grad.x * du + grad.y * dv; // dr/dp_new
    let mut jac = Params::zeros();
    let cross = p_new.cross(&gp);
    jac[0] = cross.x;
    jac[1] = cross.y;
    jac[2] = cross.z;
    jac[3] = gp.x;
    jac[4] = gp.y;
    jac[5] = gp.z;
    jac[6] = -sample.ref_intensity;
    jac[7] = -1.0;
    Some((r, jac))
}

fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

struct LevelData {
    new_image: Grid<f64>,
    samples: Vec<ResidualSample>,
    intr: CameraIntrinsics,
}

fn build_levels(
    ref_image: &ImageFrame,
    ref_depth: &CombinedDepthBuffer,
    new_image: &ImageFrame,
    intr: &CameraIntrinsics,
    cfg: &TrackerConfig,
) -> Vec<LevelData> {
    let mut levels = Vec::with_capacity(cfg.levels);
    let mut ref_i = ref_image.intensity.clone();
    let mut new_i = new_image.intensity.clone();
    let mut depth = ref_depth.depth.clone();
    let mut valid = ref_depth.valid.clone();
    let mut level_intr = *intr;
    for level in 0..cfg.levels {
        if level > 0 {
            ref_i = downsample_2x(&ref_i);
            new_i = downsample_2x(&new_i);
            let (d, v) = downsample_depth(&depth, &valid);
            depth = d;
            valid = v;
            level_intr = level_intr.half_resolution();
        }
        let mut samples = Vec::new();
        // Sample at half-pixel positions so the reference intensity is also
        // bilinearly interpolated: with only the target interpolated, the
        // interpolation's implicit smoothing acts on one side of the
        // residual and biases the photometric optimum away from the true
        // pose.
        for y in 1..depth.height().saturating_sub(2) {
            for x in 1..depth.width().saturating_sub(2) {
                let quad_valid = valid.at(x, y)
                    && valid.at(x + 1, y)
                    && valid.at(x, y + 1)
                    && valid.at(x + 1, y + 1);
                if !quad_valid {
                    continue;
                }
                let quad = [
                    depth.at(x, y),
                    depth.at(x + 1, y),
                    depth.at(x, y + 1),
                    depth.at(x + 1, y + 1),
                ];
                let mean = 0.25 * quad.iter().sum::<f64>();
                // Skip depth discontinuities: interpolating across them
                // fabricates 3D points on neither surface.
                if quad.iter().any(|&d| (d - mean).abs() > 0.05 * mean) {
                    continue;
                }
                let pixel = (x as f64 + 0.5, y as f64 + 0.5);
                let Some(ref_intensity) = bilinear(&ref_i, pixel.0, pixel.1) else {
                    continue;
                };
                samples.push(ResidualSample {
                    pixel,
                    depth: mean,
                    ref_intensity,
                });
            }
        }
        if samples.len() > cfg.max_residuals_per_level {
            let stride = samples.len().div_ceil(cfg.max_residuals_per_level);
            samples = samples
                .into_iter()
                .step_by(stride)
                .collect();
        }
        levels.push(LevelData {
            new_image: new_i.clone(),
            samples,
            intr: level_intr,
        });
    }
    levels
}

struct CostEval {
    cost: f64,
    rmse: f64,
    inlier_fraction: f64,
    n: usize,
}

/// Trimming threshold on |r|: a multiple of the median absolute residual, or
/// infinity when trimming is disabled. The median is robust to the occluded
/// minority, so the cut lands a few sigma above the inlier noise level.
fn trim_cut(abs_residuals: &mut Vec<f64>, scale: Option<f64>) -> f64 {
    let Some(scale) = scale else {
        return f64::INFINITY;
    };
    if abs_residuals.is_empty() {
        return f64::INFINITY;
    }
    let mid = abs_residuals.len() / 2;
    let (_, median, _) =
        abs_residuals.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    (scale * *median).max(1e-12)
}

fn evaluate_cost(level: &LevelData, t: &PoseSE3, a: f64, b: f64, cfg: &TrackerConfig) -> CostEval {
    let mut residuals = Vec::with_capacity(level.samples.len());
    for s in &level.samples {
        if let Some((r, _)) = residual_jacobian(s, t, a, b, &level.new_image, &level.intr) {
            residuals.push(r);
        }
    }
    let n = residuals.len();
    let mut abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let cut = trim_cut(&mut abs, cfg.outlier_median_scale);
    let mut cost = 0.0;
    let mut sq = 0.0;
    let mut kept = 0usize;
    let mut inliers = 0usize;
    for &r in &residuals {
        if r.abs() < 2.0 * cfg.huber {
            inliers += 1;
        }
        if r.abs() > cut {
            continue;
        }
        cost += huber_weight(r, cfg.huber) * r * r;
        sq += r * r;
        kept += 1;
    }
    CostEval {
        cost,
        rmse: if kept > 0 {
            (sq / kept as f64).sqrt()
        } else {
            f64::INFINITY
        },
        inlier_fraction: if n > 0 { inliers as f64 / n as f64 } else { 0.0 },
        n,
    }
}

/// Estimate the pose of `new_image` relative to `ref_image` (returned pose
/// maps reference-camera points into the new camera) by minimizing
/// Huber-robustified photometric residuals over SE(3) and affine brightness,
/// coarse-to-fine with Levenberg damping.
pub fn track_frame(
    ref_image: &ImageFrame,
    ref_depth: &CombinedDepthBuffer,
    new_image: &ImageFrame,
    init: &PoseSE3,
    intr: &CameraIntrinsics,
    cfg: &TrackerConfig,
) -> Result<(PoseSE3, TrackDiagnostics), TrackingError> {
    if ref_image.width() != intr.width
        || ref_image.height() != intr.height
        || new_image.width() != intr.width
        || new_image.height() != intr.height
        || ref_depth.width() != intr.width
        || ref_depth.height() != intr.height
    {
        return Err(TrackingError::ShapeMismatch(
            "tracker inputs must share the intrinsics' resolution".into(),
        ));
    }
    let levels = build_levels(ref_image, ref_depth, new_image, intr, cfg);
    // Sparse-only buffers may populate only the finer levels (isolated 3x3
    // islands vanish under downsampling); optimize over the levels that
    // still hold enough samples.
    let usable: Vec<&LevelData> = levels
        .iter()
        .filter(|l| l.samples.len() >= cfg.min_coarsest_pixels)
        .collect();
    if usable.is_empty() {
        let best = levels.iter().map(|l| l.samples.len()).max().unwrap_or(0);
        return Err(TrackingError::InsufficientDepth(
            best,
            cfg.min_coarsest_pixels,
        ));
    }

    let mut t = *init;
    let mut a = 1.0;
    let mut b = 0.0;
    let mut total_iters = 0usize;
    let mut any_progress = false;
    let mut final_eval = None;

    'levels: for &level in usable.iter().rev() {
        let mut lambda = 1e-4;
        let mut eval = evaluate_cost(level, &t, a, b, cfg);
        for _ in 0..cfg.max_iterations {
            total_iters += 1;
            // Deterministic accumulation in sample order, after trimming
            // residuals far above the current median (occlusions).
            let mut residuals = Vec::with_capacity(level.samples.len());
            for s in &level.samples {
                if let Some((r, jac)) =
                    residual_jacobian(s, &t, a, b, &level.new_image, &level.intr)
                {
                    residuals.push((r, jac));
                }
            }
            let mut abs: Vec<f64> = residuals.iter().map(|(r, _)| r.abs()).collect();
            let cut = trim_cut(&mut abs, cfg.outlier_median_scale);
            let mut h = Normal::zeros();
            let mut g = Params::zeros();
            for (r, jac) in &residuals {
                if r.abs() > cut {
                    continue;
                }
                let w = huber_weight(*r, cfg.huber);
                h.ger(w, jac, jac, 1.0);
                g += w * *r * jac;
            }
            if !cfg.affine_brightness {
                // Freeze (a, b) by pinning their equations to identity.
                for k in 6..8 {
                    for j in 0..8 {
                        h[(k, j)] = 0.0;
                        h[(j, k)] = 0.0;
                    }
                    h[(k, k)] = 1.0;
                    g[k] = 0.0;
                }
            }

            let mut accepted = false;
            for _ in 0..8 {
                let mut damped = h;
                for k in 0..8 {
                    damped[(k, k)] += lambda * (1.0 + h[(k, k)]);
                }
                let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                    lambda *= 10.0;
                    continue;
                };
                let twist = SVector::<f64, 6>::from_fn(|i, _| step[i]);
                let t_new = se3_exp(twist).compose(&t);
                let (a_new, b_new) = (a + step[6], b + step[7]);
                let eval_new = evaluate_cost(level, &t_new, a_new, b_new, cfg);
                if eval_new.n > 0 && eval_new.cost < eval.cost {
                    // Converged when the step is negligible or the cost has
                    // stopped improving meaningfully (warm starts land here
                    // on the first iteration of each level).
                    let stalled = eval.cost - eval_new.cost < 1e-2 * eval.cost;
                    t = t_new;
                    a = a_new;
                    b = b_new;
                    eval = eval_new;
                    lambda = (lambda * 0.5).max(1e-9);
                    accepted = true;
                    any_progress = true;
                    if step.norm() < cfg.convergence || stalled {
                        final_eval = Some(eval);
                        continue 'levels;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        final_eval = Some(eval);
    }

    let eval = final_eval.unwrap();
    if !any_progress && eval.inlier_fraction < cfg.min_inlier_fraction {
        return Err(TrackingError::Diverged);
    }
    Ok(finish(t, a, b, total_iters, eval, cfg))
}

fn finish(
    t: PoseSE3,
    a: f64,
    b: f64,
    iterations: usize,
    eval: CostEval,
    cfg: &TrackerConfig,
) -> (PoseSE3, TrackDiagnostics) {
    (
        t,
        TrackDiagnostics {
            rmse: eval.rmse,
            inlier_fraction: eval.inlier_fraction,
            iterations,
            affine: (a, b),
            ok: eval.inlier_fraction >= cfg.min_inlier_fraction,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{relative_pose, se3_log};
    use crate::synth::{orbit_arc_trajectory, render, Primitive, SyntheticScene};
    use approx::assert_relative_eq;
    use nalgebra::Vector3 as V3;

    fn test_scene() -> SyntheticScene {
        SyntheticScene::new(
            vec![
                // A wall facing the +x start of the orbit, fully covering the
                // frame, with a sphere floating in front of it.
                Primitive::Plane {
                    origin: V3::new(0.0, 0.0, 0.0),
                    normal: V3::new(1.0, 0.0, 0.0),
                    half_extent: Some(12.0),
                },
                Primitive::Sphere {
                    center: V3::new(0.6, -0.1, 0.2),
                    radius: 0.4,
                },
            ],
            99,
        )
        .map(|mut scene| {
            // Keep the texture well below the pixel Nyquist rate: the
            // renderer does not anti-alias, and aliasing shifts the
            // photometric optimum away from the true pose.
            scene.texture_frequency = 1.0;
            scene
        })
        .unwrap()
    }

    fn test_intr() -> CameraIntrinsics {
        CameraIntrinsics::new(180.0, 180.0, 159.5, 119.5, 320, 240).unwrap()
    }

    #[test]
    fn sparse_map_validation() {
        assert!(SparseDepthMap::new(10, 10, vec![(3, 3, 1.0)], SparseSource::Dataset).is_ok());
        assert!(SparseDepthMap::new(10, 10, vec![(10, 3, 1.0)], SparseSource::Dataset).is_err());
        assert!(SparseDepthMap::new(10, 10, vec![(3, 3, 0.0)], SparseSource::Dataset).is_err());
        let too_many: Vec<_> = (0..10).map(|i| (i, 0, 1.0)).collect();
        assert!(SparseDepthMap::new(10, 10, too_many, SparseSource::Dataset).is_err());
    }

    #[test]
    fn combine_empty_sparse_passes_rendered_through() {
        let rendered = DepthMap::from_grid(Grid::filled(8, 8, 3.0));
        let sparse = SparseDepthMap::empty(8, 8);
        let buf = combine_depth(&sparse, &rendered).unwrap();
        assert_eq!(buf.valid_count(), 64);
        assert_eq!(buf.depth.at(4, 4), 3.0);
        assert!(buf
            .provenance
            .data()
            .iter()
            .all(|&p| p == Provenance::Rendered));
    }

    #[test]
    fn combine_sparse_takes_precedence_and_dilates() {
        let rendered = DepthMap::from_grid(Grid::filled(8, 8, 3.0));
        let sparse = SparseDepthMap::new(8, 8, vec![(4, 4, 2.0)], SparseSource::Dataset).unwrap();
        let buf = combine_depth(&sparse, &rendered).unwrap();
        assert_eq!(buf.depth.at(4, 4), 2.0);
        assert_eq!(buf.provenance.at(4, 4), Provenance::Sparse);
        // The 1-pixel dilation claims the 3x3 neighborhood.
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = ((4 + dx) as usize, (4 + dy) as usize);
                assert_eq!(buf.provenance.at(x, y), Provenance::Sparse);
            }
        }
        assert_eq!(buf.provenance.at(1, 1), Provenance::Rendered);
        let sparse_count = buf
            .provenance
            .data()
            .iter()
            .filter(|&&p| p == Provenance::Sparse)
            .count();
        assert!(sparse_count >= sparse.len());
    }

    #[test]
    fn combine_both_empty_is_invalid() {
        let rendered = DepthMap::invalid(8, 8);
        let sparse = SparseDepthMap::empty(8, 8);
        let buf = combine_depth(&sparse, &rendered).unwrap();
        assert_eq!(buf.valid_count(), 0);
    }

    #[test]
    fn gradient_sampling_picks_k_strongest() {
        let scene = test_scene();
        let intr = test_intr();
        let poses = orbit_arc_trajectory(&scene, 2, 2.5, 0.05, 0.0, 1);
        let (image, depth) = render(&scene, &poses[0], &intr);
        let sparse = sparse_from_gradient(&image, &depth, 500).unwrap();
        assert_eq!(sparse.len(), 500);
        assert_eq!(sparse.source, SparseSource::Sampled);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let scene = test_scene();
        let intr = test_intr();
        let poses = orbit_arc_trajectory(&scene, 2, 2.5, 0.03, 0.0, 5);
        let (ref_img, ref_depth) = render(&scene, &poses[0], &intr);
        let (new_img, _) = render(&scene, &poses[1], &intr);
        let t = relative_pose(&poses[1], &poses[0]);
        let (a, b) = (0.97, 0.01);
        let eps = 1e-6;
        let mut checked = 0;
        for (x, y) in [(40, 30), (80, 60), (120, 90), (60, 80), (100, 40)] {
            if !ref_depth.valid.at(x, y) {
                continue;
            }
            let s = ResidualSample {
                pixel: (x as f64, y as f64),
                depth: ref_depth.depth.at(x, y),
                ref_intensity: ref_img.intensity.at(x, y),
            };
            let Some((_, jac)) = residual_jacobian(&s, &t, a, b, &new_img.intensity, &intr)
            else {
                continue;
            };
            for k in 0..8 {
                let mut probe = |sign: f64| -> Option<f64> {
                    let mut twist = SVector::<f64, 6>::zeros();
                    let (mut ap, mut bp) = (a, b);
                    match k {
                        0..=5 => twist[k] = sign * eps,
                        6 => ap += sign * eps,
                        _ => bp += sign * eps,
                    }
                    let tp = se3_exp(twist).compose(&t);
                    residual_jacobian(&s, &tp, ap, bp, &new_img.intensity, &intr)
                        .map(|(r, _)| r)
                };
                let (Some(rp), Some(rm)) = (probe(1.0), probe(-1.0)) else {
                    continue;
                };
                let fd = (rp - rm) / (2.0 * eps);
                let scale = fd.abs().max(jac[k].abs()).max(1e-3);
                assert!(
                    (fd - jac[k]).abs() / scale < 1e-4,
                    "param {k} at ({x},{y}): analytic {} vs fd {fd}",
                    jac[k]
                );
                checked += 1;
            }
        }
        assert!(checked >= 16, "only {checked} Jacobian entries checked");
    }

    #[test]
    fn identical_frames_track_to_identity() {
        let scene = test_scene();
        let intr = test_intr();
        let poses = orbit_arc_trajectory(&scene, 2, 2.5, 0.05, 0.0, 2);
        let (image, depth) = render(&scene, &poses[0], &intr);
        let buf = combine_depth(&SparseDepthMap::empty(320, 240), &depth).unwrap();
        let (pose, diag) = track_frame(
            &image,
            &buf,
            &image,
            &PoseSE3::identity(),
            &intr,
            &TrackerConfig::default(),
        )
        .unwrap();
        let twist = se3_log(&pose).unwrap();
        assert!(twist.norm() < 1e-6, "twist norm {}", twist.norm());
        assert_relative_eq!(diag.affine.0, 1.0, epsilon = 1e-6);
        assert!(diag.affine.1.abs() < 1e-6);
        assert!(diag.ok);
    }

    #[test]
    fn known_motion_recovered() {
        let scene = test_scene();
        let intr = test_intr();
        let poses = orbit_arc_trajectory(&scene, 2, 2.5, 0.0, 0.0, 4);
        // Perturb the second pose by ~1 degree and 2% of scene scale.
        let scene_scale = 2.5;
        let mut twist = SVector::<f64, 6>::zeros();
        twist[1] = 1f64.to_radians();
        twist[3] = 0.02 * scene_scale;
        let true_rel = se3_exp(twist);
        let pose_b = poses[0].compose(&true_rel.inverse());
        let (ref_img, ref_depth) = render(&scene, &poses[0], &intr);
        let (new_img, _) = render(&scene, &pose_b, &intr);
        let buf = combine_depth(&SparseDepthMap::empty(320, 240), &ref_depth).unwrap();
        let (pose, diag) = track_frame(
            &ref_img,
            &buf,
            &new_img,
            &PoseSE3::identity(),
            &intr,
            &TrackerConfig::default(),
        )
        .unwrap();
        assert!(diag.ok, "inlier fraction {}", diag.inlier_fraction);
        let err = se3_log(&pose.compose(&true_rel.inverse())).unwrap();
        let rot_err = V3::new(err[0], err[1], err[2]).norm().to_degrees();
        let trans_err = V3::new(err[3], err[4], err[5]).norm();
        assert!(rot_err < 0.05, "rotation error {rot_err} deg");
        assert!(
            trans_err < 0.005 * scene_scale,
            "translation error {trans_err}"
        );
    }

    #[test]
    fn warm_start_converges_fast() {
        let scene = test_scene();
        let intr = test_intr();
        let poses = orbit_arc_trajectory(&scene, 2, 2.5, 0.02, 0.0, 6);
        let (ref_img, ref_depth) = render(&scene, &poses[0], &intr);
        let (new_img, _) = render(&scene, &poses[1], &intr);
        let truth = relative_pose(&poses[1], &poses[0]);
        let buf = combine_depth(&SparseDepthMap::empty(320, 240), &ref_depth).unwrap();
        let cfg = TrackerConfig::default();
        let (_, diag) =
            track_frame(&ref_img, &buf, &new_img, &truth, &intr, &cfg).unwrap();
        assert!(
            diag.iterations <= 4 * cfg.levels,
            "{} iterations from ground-truth init",
            diag.iterations
        );
    }

    #[test]
    fn textureless_input_fails() {
        let intr = test_intr();
        let flat = ImageFrame::from_intensity(Grid::filled(320, 240, 0.5), 0.0);
        let depth = DepthMap::from_grid(Grid::filled(320, 240, 2.0));
        let buf = combine_depth(&SparseDepthMap::empty(320, 240), &depth).unwrap();
        // Shift the "new" image in depth so the true answer is unknowable:
        // with zero gradient everywhere the optimizer cannot progress.
        let mut shifted = flat.clone();
        shifted.intensity = Grid::filled(320, 240, 0.9);
        let result = track_frame(
            &flat,
            &buf,
            &shifted,
            &PoseSE3::identity(),
            &intr,
            &TrackerConfig {
                affine_brightness: false,
                ..TrackerConfig::default()
            },
        );
        match result {
            Err(TrackingError::Diverged) => {}
            Ok((_, diag)) => assert!(!diag.ok, "flat images must not report success"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn insufficient_depth_rejected() {
        let intr = test_intr();
        let img = ImageFrame::from_intensity(Grid::filled(320, 240, 0.5), 0.0);
        let buf = combine_depth(&SparseDepthMap::empty(320, 240), &DepthMap::invalid(320, 240))
            .unwrap();
        assert!(matches!(
            track_frame(
                &img,
                &buf,
                &img,
                &PoseSE3::identity(),
                &intr,
                &TrackerConfig::default()
            ),
            Err(TrackingError::InsufficientDepth(..))
        ));
    }

    #[test]
    fn diagnostics_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diag.csv");
        write_diagnostics_csv(
            &path,
            &[FrameDiagnostics {
                frame_id: 3,
                rmse: 0.0123,
                inlier_frac: 0.95,
                iters: 12,
                provenance_sparse_frac: 0.02,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "frame_id,rmse,inlier_frac,iters,provenance_sparse_frac"
        );
        assert_eq!(lines.next().unwrap(), "3,0.012300,0.9500,12,0.0200");
    }
}
