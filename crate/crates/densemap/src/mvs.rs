//! Cascaded plane-sweep depth estimation for the reference keyframe.
//!
//! Three stages at increasing resolution: stage 1 sweeps a uniform ladder of
//! depth planes, stages 2 and 3 refine a narrower ladder around the
//! upsampled previous depth. Per stage the per-view feature volumes are
//! warped, merged with self-adaptive view aggregation weights, regularized,
//! and turned into an expected-depth map through a softmax over planes.

use crate::features::{FeaturePyramid, StageFeatures};
use crate::geometry::{relative_pose, CameraIntrinsics, PoseSE3};
use crate::grid::{Grid, Tensor3};
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

/// Depth planes never go below this floor (meters).
pub const D_MIN_FLOOR: f64 = 0.001;

#[derive(Debug, Error)]
pub enum MvsError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("refinement prior has no valid pixels")]
    EmptyPrior,
    #[error("non-positive input: {0}")]
    NonPositiveInput(f64),
    #[error("invalid keyframe window: {0}")]
    Window(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("depth png error: {0}")]
    DepthPng(String),
}

/// A depth map with validity mask. Invalid pixels carry the sentinel 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub depth: Grid<f64>,
    pub valid: Grid<bool>,
    /// Max plane probability per pixel when produced by the sweep.
    pub confidence: Option<Grid<f64>>,
}

impl DepthMap {
    pub fn new(depth: Grid<f64>, valid: Grid<bool>) -> Self {
        Self {
            depth,
            valid,
            confidence: None,
        }
    }

    /// Build from a raw grid where any strictly positive value is valid.
    pub fn from_grid(depth: Grid<f64>) -> Self {
        let valid = Grid::from_fn(depth.width(), depth.height(), |x, y| depth.at(x, y) > 0.0);
        Self {
            depth,
            valid,
            confidence: None,
        }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            depth: Grid::filled(width, height, 0.0),
            valid: Grid::filled(width, height, false),
            confidence: None,
        }
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v).count()
    }

    pub fn max_valid_depth(&self) -> Option<f64> {
        let mut max = None;
        for (x, y, v) in self.valid.iter() {
            if v {
                let d = self.depth.at(x, y);
                max = Some(max.map_or(d, |m: f64| m.max(d)));
            }
        }
        max
    }

    /// Depth at quantile `q` (0..=1) of the valid pixels; a robust stand-in
    /// for the maximum when a few outliers survive filtering.
    pub fn valid_depth_quantile(&self, q: f64) -> Option<f64> {
        let mut depths: Vec<f64> = self
            .depth
            .data()
            .iter()
            .zip(self.valid.data())
            .filter_map(|(&d, &v)| v.then_some(d))
            .collect();
        if depths.is_empty() {
            return None;
        }
        let idx = ((depths.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
        let (_, val, _) = depths.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap());
        Some(*val)
    }

    pub fn mean_valid_depth(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (x, y, v) in self.valid.iter() {
            if v {
                sum += self.depth.at(x, y);
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_2x_nearest(&self) -> DepthMap {
        let depth = Grid::from_fn(self.width() * 2, self.height() * 2, |x, y| {
            self.depth.at(x / 2, y / 2)
        });
        let valid = Grid::from_fn(self.width() * 2, self.height() * 2, |x, y| {
            self.valid.at(x / 2, y / 2)
        });
        DepthMap {
            depth,
            valid,
            confidence: None,
        }
    }
}

/// Sweep configuration. Defaults follow the three-stage cascade with plane
/// counts (48, 4, 4) over [0.01, 10] m and stage interval divisors (1, 2, 4).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MvsConfig {
    pub planes: [usize; 3],
    pub d_min: f64,
    pub d_max: f64,
    pub interval_divisors: [f64; 3],
    /// Half-width of the separable box regularizer along the image axes.
    pub regularizer_radius: usize,
    /// Half-width along the plane axis; kept small so the per-pixel
    /// probability peak survives smoothing even with few planes.
    pub regularizer_depth_radius: usize,
    /// Number of regularizer applications (2 approximates a triangular kernel).
    pub regularizer_passes: usize,
    /// Cost sentinel for invalid voxels; never infinity so the softmax stays
    /// finite.
    pub max_cost: f64,
    /// Softmax temperature; `None` uses `max_cost / 8`.
    pub softmax_temperature: Option<f64>,
    /// Softmin temperature for the view aggregation weights; `None` uses
    /// `aggregation_temperature_scale` times the median valid per-view error.
    pub aggregation_temperature: Option<f64>,
    /// Multiplier on the median error when the softmin temperature is
    /// derived automatically. Larger values only suppress strong outliers
    /// (occlusions) instead of min-pooling over views.
    pub aggregation_temperature_scale: f64,
    /// When set, the per-pixel probability is renormalized over a window of
    /// this half-width around its argmax plane before taking the
    /// expectation, so low-parallax cost plateaus far from the peak cannot
    /// drag the expected depth away from the dominant mode.
    pub peak_window: Option<usize>,
    /// A pixel is valid when its max plane probability is at least
    /// `confidence_floor_scale / D^s`.
    pub confidence_floor_scale: f64,
    /// Photoconsistency gate: a pixel is invalidated when the unregularized
    /// aggregated cost at the plane nearest its estimate exceeds this bound
    /// (occlusions, image borders, and ambiguous matches fail it).
    pub photoconsistency_max_cost: Option<f64>,
    /// Minimum valid views at the chosen plane for the photoconsistency gate.
    pub photoconsistency_min_views: usize,
    /// Half-width of the median filter applied to the final depth; removes
    /// speckle outliers that survive the photoconsistency gate. `None`
    /// disables it.
    pub median_filter_radius: Option<usize>,
}

impl Default for MvsConfig {
    fn default() -> Self {
        Self {
            planes: [48, 4, 4],
            d_min: 0.01,
            d_max: 10.0,
            interval_divisors: [1.0, 2.0, 4.0],
            regularizer_radius: 2,
            regularizer_depth_radius: 1,
            regularizer_passes: 2,
            max_cost: 4.0,
            softmax_temperature: None,
            aggregation_temperature: None,
            aggregation_temperature_scale: 2.0,
            peak_window: Some(1),
            confidence_floor_scale: 1.25,
            photoconsistency_max_cost: Some(0.005),
            photoconsistency_min_views: 3,
            median_filter_radius: Some(2),
        }
    }
}

impl MvsConfig {
    pub fn validate(&self) -> Result<(), MvsError> {
        if !(self.planes[0] >= self.planes[1]
            && self.planes[1] >= self.planes[2]
            && self.planes[2] >= 2)
        {
            return Err(MvsError::Window(format!(
                "plane counts must satisfy D1 >= D2 >= D3 >= 2, got {:?}",
                self.planes
            )));
        }
        if !(self.d_min < self.d_max && self.d_min > 0.0) {
            return Err(MvsError::Window(format!(
                "depth range [{}, {}] invalid",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    /// Plane spacing of the uniform stage-1 ladder.
    pub fn stage1_interval(&self) -> f64 {
        (self.d_max - self.d_min) / (self.planes[0] - 1) as f64
    }

    /// Plane spacing at stage `s` (1-based): the stage-1 interval divided by
    /// the per-stage divisor.
    pub fn stage_interval(&self, stage: usize) -> f64 {
        self.stage1_interval() / self.interval_divisors[stage - 1]
    }

    pub fn softmax_temperature(&self) -> f64 {
        self.softmax_temperature.unwrap_or(self.max_cost / 8.0)
    }
}

/// One posed keyframe with its feature pyramid.
#[derive(Debug, Clone)]
pub struct WindowFrame {
    pub image: crate::features::ImageFrame,
    pub pyramid: FeaturePyramid,
    /// Camera-to-world pose.
    pub pose: PoseSE3,
}

/// The sliding set of keyframes; the newest frame (index n-1) is the
/// reference for depth estimation.
#[derive(Debug, Clone)]
pub struct KeyframeWindow {
    frames: Vec<WindowFrame>,
    intrinsics: CameraIntrinsics,
}

impl KeyframeWindow {
    pub fn new(frames: Vec<WindowFrame>, intrinsics: CameraIntrinsics) -> Result<Self, MvsError> {
        let n = frames.len();
        if !(2..=8).contains(&n) {
            return Err(MvsError::Window(format!(
                "window must hold 2..=8 frames, got {n}"
            )));
        }
        let channels = frames[0].pyramid.channel_counts();
        for (i, f) in frames.iter().enumerate() {
            if f.pyramid.channel_counts() != channels {
                return Err(MvsError::Window(format!(
                    "frame {i} channel counts {:?} differ from {:?}",
                    f.pyramid.channel_counts(),
                    channels
                )));
            }
            if f.image.width() != intrinsics.width || f.image.height() != intrinsics.height {
                return Err(MvsError::Window(format!(
                    "frame {i} is {}x{}, intrinsics expect {}x{}",
                    f.image.width(),
                    f.image.height(),
                    intrinsics.width,
                    intrinsics.height
                )));
            }
        }
        Ok(Self { frames, intrinsics })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn reference_index(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn frames(&self) -> &[WindowFrame] {
        &self.frames
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Intrinsics for stage `s` (1-based); stage 3 is full resolution.
    pub fn stage_intrinsics(&self, s: usize) -> CameraIntrinsics {
        match s {
            3 => self.intrinsics,
            2 => self.intrinsics.half_resolution(),
            1 => self.intrinsics.half_resolution().half_resolution(),
            _ => panic!("stage must be 1..=3"),
        }
    }
}

/// Per-pixel depth plane ladder, strictly increasing along the plane axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHypotheses {
    tensor: Tensor3<f64>,
}

impl DepthHypotheses {
    fn from_tensor(tensor: Tensor3<f64>) -> Self {
        Self { tensor }
    }

    pub fn planes(&self) -> usize {
        self.tensor.planes()
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.tensor.at(d, y, x)
    }

    pub fn tensor(&self) -> &Tensor3<f64> {
        &self.tensor
    }
}

/// Uniform stage-1 ladder: every pixel gets
/// `d_min + k * (d_max - d_min) / (D1 - 1)`.
pub fn hypotheses_stage1(cfg: &MvsConfig, height: usize, width: usize) -> DepthHypotheses {
    let d1 = cfg.planes[0];
    let step = cfg.stage1_interval();
    let mut tensor = Tensor3::filled(d1, height, width, 0.0);
    for (k, chunk) in tensor.plane_chunks_mut().enumerate() {
        let value = cfg.d_min + k as f64 * step;
        chunk.fill(value);
    }
    DepthHypotheses::from_tensor(tensor)
}

fn uniform_ladder(cfg: &MvsConfig, planes: usize) -> Vec<f64> {
    let step = (cfg.d_max - cfg.d_min) / (planes - 1) as f64;
    (0..planes).map(|k| cfg.d_min + k as f64 * step).collect()
}

/// Refined ladder for stage `s` in {2, 3}: the previous stage's depth is
/// upsampled 2x (nearest neighbor) and used as the per-pixel center of a
/// symmetric ladder with the stage interval. Pixels with an invalid prior
/// fall back to the stage-1 range resampled to `D^s` planes.
pub fn hypotheses_refined(
    prev: &DepthMap,
    cfg: &MvsConfig,
    stage: usize,
) -> Result<DepthHypotheses, MvsError> {
    assert!(stage == 2 || stage == 3, "refinement applies to stages 2 and 3");
    if prev.valid_count() == 0 {
        return Err(MvsError::EmptyPrior);
    }
    let up = prev.upsample_2x_nearest();
    let planes = cfg.planes[stage - 1];
    let interval = cfg.stage_interval(stage);
    let fallback = uniform_ladder(cfg, planes);
    let (height, width) = (up.height(), up.width());
    let mut tensor = Tensor3::filled(planes, height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            if up.valid.at(x, y) {
                let center = up.depth.at(x, y);
                let mut prev_plane = f64::NEG_INFINITY;
                for k in 0..planes {
                    let offset = (k as f64 - (planes - 1) as f64 / 2.0) * interval;
                    let mut v = (center + offset).max(D_MIN_FLOOR);
                    if v <= prev_plane {
                        // Clamped at the floor: keep the ladder strictly
                        // increasing with a tiny sub-interval step.
                        v = prev_plane + interval * 1e-6;
                    }
                    tensor.set(k, y, x, v);
                    prev_plane = v;
                }
            } else {
                for k in 0..planes {
                    tensor.set(k, y, x, fallback[k]);
                }
            }
        }
    }
    Ok(DepthHypotheses::from_tensor(tensor))
}

/// Warped per-view features: values in `(plane, channel, row, col)` layout
/// with a per-voxel validity mask. Masked-out entries are zero.
#[derive(Debug, Clone)]
pub struct FeatureVolume {
    channels: usize,
    planes: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl FeatureVolume {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn value(&self, c: usize, d: usize, y: usize, x: usize) -> f64 {
        debug_assert!(
            c < self.channels && d < self.planes && y < self.height && x < self.width
        );
        self.values[((d * self.channels + c) * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, d: usize, y: usize, x: usize) -> bool {
        self.valid[(d * self.height + y) * self.width + x]
    }

    fn same_shape(&self, other: &FeatureVolume) -> bool {
        self.channels == other.channels
            && self.planes == other.planes
            && self.height == other.height
            && self.width == other.width
    }
}

/// Warp one view's stage features into the reference frustum.
///
/// `t_rel` maps reference-camera points into the source view's camera frame
/// (`T_i^-1 T_ref`). For each reference pixel and plane the pixel is
/// back-projected at the hypothesis depth, transformed, projected into the
/// source view, and bilinearly sampled. Samples outside the image or behind
/// the camera are invalid with value zero.
pub fn warp_features(
    features: &StageFeatures,
    t_rel: &PoseSE3,
    intr: &CameraIntrinsics,
    hyp: &DepthHypotheses,
) -> FeatureVolume {
    let (channels, height, width) = (features.channels(), hyp.height(), hyp.width());
    let planes = hyp.planes();
    assert_eq!(features.height(), height);
    assert_eq!(features.width(), width);
    let plane_values = channels * height * width;
    let plane_valid = height * width;
    let mut values = vec![0.0; planes * plane_values];
    let mut valid = vec![false; planes * plane_valid];

    values
        .par_chunks_mut(plane_values)
        .zip(valid.par_chunks_mut(plane_valid))
        .enumerate()
        .for_each(|(d, (vals, mask))| {
            for y in 0..height {
                for x in 0..width {
                    let depth = hyp.at(d, y, x);
                    let ray = intr.ray(x as f64, y as f64);
                    let p_src = t_rel.transform(ray * depth);
                    if p_src.z <= 0.0 {
                        continue;
                    }
                    let u = intr.fx * p_src.x / p_src.z + intr.cx;
                    let v = intr.fy * p_src.y / p_src.z + intr.cy;
                    if !intr.contains(u, v) {
                        continue;
                    }
                    let mut ok = true;
                    let mut sampled = [0.0f64; 16];
                    debug_assert!(channels <= 16);
                    for c in 0..channels {
                        match features.sample_bilinear(c, u, v) {
                            Some(s) => sampled[c] = s,
                            None => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if ok {
                        mask[y * width + x] = true;
                        for c in 0..channels {
                            vals[(c * height + y) * width + x] = sampled[c];
                        }
                    }
                }
            }
        });

    FeatureVolume {
        channels,
        planes,
        height,
        width,
        values,
        valid,
    }
}

/// Plane-sweep cost with a per-voxel validity mask. Invalid voxels hold the
/// `max_cost` sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub values: Tensor3<f64>,
    pub valid: Tensor3<bool>,
    pub max_cost: f64,
}

fn check_volumes(volumes: &[FeatureVolume]) -> Result<(), MvsError> {
    if volumes.len() < 2 {
        return Err(MvsError::TooFewViews(volumes.len()));
    }
    for v in &volumes[1..] {
        if !v.same_shape(&volumes[0]) {
            return Err(MvsError::ShapeMismatch(
                "feature volumes differ in shape".into(),
            ));
        }
    }
    Ok(())
}

/// Variance-based cost: the per-channel variance over views valid at the
/// voxel, averaged across channels. Voxels with fewer than 2 valid views are
/// invalid with cost `max_cost`.
pub fn variance_cost(volumes: &[FeatureVolume], max_cost: f64) -> Result<CostVolume, MvsError> {
    check_volumes(volumes)?;
    let v0 = &volumes[0];
    let (channels, planes, height, width) = (v0.channels, v0.planes, v0.height, v0.width);
    let mut values = Tensor3::filled(planes, height, width, max_cost);
    let mut valid = Tensor3::filled(planes, height, width, false);

    for d in 0..planes {
        for y in 0..height {
            for x in 0..width {
                let views: Vec<usize> = (0..volumes.len())
                    .filter(|&i| volumes[i].is_valid(d, y, x))
                    .collect();
                if views.len() < 2 {
                    continue;
                }
                let n = views.len() as f64;
                let mut channel_sum = 0.0;
                for c in 0..channels {
                    let mut mean = 0.0;
                    for &i in &views {
                        mean += volumes[i].value(c, d, y, x);
                    }
                    mean /= n;
                    let mut var = 0.0;
                    for &i in &views {
                        let diff = volumes[i].value(c, d, y, x) - mean;
                        var += diff * diff;
                    }
                    channel_sum += var / n;
                }
                values.set(d, y, x, channel_sum / channels as f64);
                valid.set(d, y, x, true);
            }
        }
    }

    Ok(CostVolume {
        values,
        valid,
        max_cost,
    })
}

/// Per-view aggregation weights `W_i` of shape `(D, H, W)`.
///
/// The learned aggregation network is replaced by a closed-form softmin over
/// the per-view reprojection error `e_i = mean_c (V_i - V_ref)^2`, calibrated
/// so equal errors give `W_i = 0` (the unweighted aggregation) and invalid
/// views get `1 + W_i = 0` with renormalization over the remainder.
pub fn aggregation_weights(
    volumes: &[FeatureVolume],
    ref_index: usize,
    temperature: Option<f64>,
    median_scale: f64,
) -> Result<Vec<Tensor3<f64>>, MvsError> {
    check_volumes(volumes)?;
    let v_ref = &volumes[ref_index];
    let (channels, planes, height, width) =
        (v_ref.channels, v_ref.planes, v_ref.height, v_ref.width);
    let n = volumes.len();

    // Per-view error tensors; -1 marks view-invalid voxels.
    let errors: Vec<Tensor3<f64>> = (0..n)
        .map(|i| {
            let mut e = Tensor3::filled(planes, height, width, -1.0);
            if i == ref_index {
                return e;
            }
            let vi = &volumes[i];
            for d in 0..planes {
                for y in 0..height {
                    for x in 0..width {
                        if vi.is_valid(d, y, x) && v_ref.is_valid(d, y, x) {
                            let mut sum = 0.0;
                            for c in 0..channels {
                                let diff = vi.value(c, d, y, x) - v_ref.value(c, d, y, x);
                                sum += diff * diff;
                            }
                            e.set(d, y, x, sum / channels as f64);
                        }
                    }
                }
            }
            e
        })
        .collect();

    let tau = match temperature {
        Some(t) => t.max(1e-12),
        None => {
            let mut all: Vec<f64> = errors
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != ref_index)
                .flat_map(|(_, e)| e.data().iter().copied().filter(|&v| v >= 0.0))
                .collect();
            if all.is_empty() {
                1.0
            } else {
                let mid = all.len() / 2;
                all.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
                (median_scale * all[mid]).max(1e-9)
            }
        }
    };

    let mut weights: Vec<Tensor3<f64>> = (0..n)
        .map(|_| Tensor3::filled(planes, height, width, -1.0))
        .collect();
    for d in 0..planes {
        for y in 0..height {
            for x in 0..width {
                let views: Vec<usize> = (0..n)
                    .filter(|&i| i != ref_index && errors[i].at(d, y, x) >= 0.0)
                    .collect();
                if views.is_empty() {
                    continue;
                }
                let m = views.len() as f64;
                let e_min = views
                    .iter()
                    .map(|&i| errors[i].at(d, y, x))
                    .fold(f64::INFINITY, f64::min);
                let mut soft: Vec<f64> = views
                    .iter()
                    .map(|&i| (-(errors[i].at(d, y, x) - e_min) / tau).exp())
                    .collect();
                let total: f64 = soft.iter().sum();
                for s in soft.iter_mut() {
                    *s /= total;
                }
                for (&i, &s) in views.iter().zip(&soft) {
                    weights[i].set(d, y, x, m * s - 1.0);
                }
                weights[ref_index].set(d, y, x, 0.0);
            }
        }
    }
    Ok(weights)
}

/// Self-adaptive view aggregation:
/// `C = mean_c sum_{i != ref} (1 + W_i) (V_i - V_ref)^2 / m` over the `m`
/// views valid at the voxel (`m = n - 1` when all views see it). Voxels
/// where the reference is invalid or no other view contributes are invalid.
pub fn aggregated_cost(
    volumes: &[FeatureVolume],
    weights: &[Tensor3<f64>],
    ref_index: usize,
    max_cost: f64,
) -> Result<CostVolume, MvsError> {
    check_volumes(volumes)?;
    assert_eq!(weights.len(), volumes.len());
    let v_ref = &volumes[ref_index];
    let (channels, planes, height, width) =
        (v_ref.channels, v_ref.planes, v_ref.height, v_ref.width);
    let n = volumes.len();
    let mut values = Tensor3::filled(planes, height, width, max_cost);
    let mut valid = Tensor3::filled(planes, height, width, false);

    for d in 0..planes {
        for y in 0..height {
            for x in 0..width {
                if !v_ref.is_valid(d, y, x) {
                    continue;
                }
                let views: Vec<usize> = (0..n)
                    .filter(|&i| i != ref_index && volumes[i].is_valid(d, y, x))
                    .collect();
                if views.is_empty() {
                    continue;
                }
                let m = views.len() as f64;
                let mut channel_sum = 0.0;
                for c in 0..channels {
                    let mut acc = 0.0;
                    for &i in &views {
                        let w = weights[i].at(d, y, x);
                        let diff = volumes[i].value(c, d, y, x) - v_ref.value(c, d, y, x);
                        acc += (1.0 + w) * diff * diff;
                    }
                    channel_sum += acc / m;
                }
                values.set(d, y, x, channel_sum / channels as f64);
                valid.set(d, y, x, true);
            }
        }
    }
    Ok(CostVolume {
        values,
        valid,
        max_cost,
    })
}

fn box_pass(
    cost: &CostVolume,
    radius: i64,
    offset: impl Fn(usize, usize, usize, i64) -> Option<(usize, usize, usize)>,
) -> Tensor3<f64> {
    let (planes, height, width) = cost.values.shape();
    let mut out = Tensor3::filled(planes, height, width, cost.max_cost);
    for d in 0..planes {
        for y in 0..height {
            for x in 0..width {
                if !cost.valid.at(d, y, x) {
                    continue;
                }
                let mut sum = 0.0;
                let mut count = 0usize;
                for k in -radius..=radius {
                    if let Some((dd, yy, xx)) = offset(d, y, x, k) {
                        if cost.valid.at(dd, yy, xx) {
                            sum += cost.values.at(dd, yy, xx);
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    out.set(d, y, x, sum / count as f64);
                }
            }
        }
    }
    out
}

/// Separable box filter with half-width `radius` along the W and H axes and
/// `depth_radius` along the plane axis, restricted to valid voxels and
/// normalized by the valid count. Radius 0 on an axis skips that pass; the
/// validity mask is unchanged.
pub fn regularize_cost(cost: &CostVolume, radius: usize, depth_radius: usize) -> CostVolume {
    let (planes, height, width) = cost.values.shape();
    let in_range = |v: i64, n: usize| (0..n as i64).contains(&v);
    let mut cost = cost.clone();

    if radius > 0 {
        let r = radius as i64;
        cost.values = box_pass(&cost, r, |d, y, x, k| {
            let xx = x as i64 + k;
            in_range(xx, width).then(|| (d, y, xx as usize))
        });
        cost.values = box_pass(&cost, r, |d, y, x, k| {
            let yy = y as i64 + k;
            in_range(yy, height).then(|| (d, yy as usize, x))
        });
    }
    if depth_radius > 0 {
        cost.values = box_pass(&cost, depth_radius as i64, |d, y, x, k| {
            let dd = d as i64 + k;
            in_range(dd, planes).then(|| (dd as usize, y, x))
        });
    }
    cost
}

/// Per-pixel plane probabilities summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVolume {
    tensor: Tensor3<f64>,
}

impl ProbabilityVolume {
    pub fn planes(&self) -> usize {
        self.tensor.planes()
    }

    pub fn height(&self) -> usize {
        self.tensor.height()
    }

    pub fn width(&self) -> usize {
        self.tensor.width()
    }

    #[inline]
    pub fn at(&self, d: usize, y: usize, x: usize) -> f64 {
        self.tensor.at(d, y, x)
    }
}

/// Softmax over planes of the negated cost at the given temperature. Invalid
/// voxels carry the `max_cost` sentinel and therefore receive
/// `-max_cost / temperature` before the softmax.
pub fn cost_to_probability(cost: &CostVolume, temperature: f64) -> ProbabilityVolume {
    assert!(temperature > 0.0, "softmax temperature must be positive");
    let (planes, height, width) = cost.values.shape();
    let mut tensor = Tensor3::filled(planes, height, width, 0.0);
    // Logits per pixel column across planes; rows processed independently.
    let rows: Vec<Vec<f64>> = (0..height)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; planes * width];
            for x in 0..width {
                let mut max_logit = f64::NEG_INFINITY;
                for d in 0..planes {
                    let logit = -cost.values.at(d, y, x) / temperature;
                    max_logit = max_logit.max(logit);
                }
                let mut sum = 0.0;
                for d in 0..planes {
                    let e = ((-cost.values.at(d, y, x) / temperature) - max_logit).exp();
                    row[d * width + x] = e;
                    sum += e;
                }
                for d in 0..planes {
                    row[d * width + x] /= sum;
                }
            }
            row
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        for d in 0..planes {
            for x in 0..width {
                tensor.set(d, y, x, row[d * width + x]);
            }
        }
    }
    ProbabilityVolume { tensor }
}

/// Restrict each pixel's distribution to `window` planes on either side of
/// its argmax and renormalize. Keeps the expectation anchored to the
/// dominant mode; with the window covering all planes this is the identity.
pub fn localize_peak(prob: &ProbabilityVolume, window: usize) -> ProbabilityVolume {
    let (planes, height, width) = prob.tensor.shape();
    if window + 1 >= planes {
        return prob.clone();
    }
    let mut tensor = Tensor3::filled(planes, height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            let mut best = 0usize;
            for d in 1..planes {
                if prob.at(d, y, x) > prob.at(best, y, x) {
                    best = d;
                }
            }
            let lo = best.saturating_sub(window);
            let hi = (best + window).min(planes - 1);
            let mass: f64 = (lo..=hi).map(|d| prob.at(d, y, x)).sum();
            for d in lo..=hi {
                tensor.set(d, y, x, prob.at(d, y, x) / mass);
            }
        }
    }
    ProbabilityVolume { tensor }
}

/// Expected depth per pixel: `sum_d P[d] * hyp[d]`, clamped into the
/// per-pixel hypothesis range. Pixels whose max probability falls below the
/// confidence floor `floor_scale / D` are invalid.
pub fn expected_depth(
    prob: &ProbabilityVolume,
    hyp: &DepthHypotheses,
    floor_scale: f64,
) -> DepthMap {
    assert_eq!(
        (prob.planes(), prob.height(), prob.width()),
        (hyp.planes(), hyp.height(), hyp.width())
    );
    let planes = prob.planes();
    let floor = floor_scale / planes as f64;
    let mut depth = Grid::filled(prob.width(), prob.height(), 0.0);
    let mut valid = Grid::filled(prob.width(), prob.height(), false);
    let mut confidence = Grid::filled(prob.width(), prob.height(), 0.0);
    for y in 0..prob.height() {
        for x in 0..prob.width() {
            let mut expectation = 0.0;
            let mut max_p = 0.0f64;
            for d in 0..planes {
                let p = prob.at(d, y, x);
                expectation += p * hyp.at(d, y, x);
                max_p = max_p.max(p);
            }
            let lo = hyp.at(0, y, x);
            let hi = hyp.at(planes - 1, y, x);
            confidence.set(x, y, max_p);
            if max_p >= floor {
                depth.set(x, y, expectation.clamp(lo, hi));
                valid.set(x, y, true);
            }
        }
    }
    DepthMap {
        depth,
        valid,
        confidence: Some(confidence),
    }
}

/// Invalidate pixels that fail photoconsistency at the plane nearest their
/// estimated depth: too few views saw the pixel there, or the unregularized
/// aggregated cost is above `max_cost`. This removes occlusions, image
/// borders, and low-parallax plateau matches that still produce a confident
/// but wrong softmax peak.
pub fn apply_photoconsistency_gate(
    depth: &mut DepthMap,
    agg: &CostVolume,
    volumes: &[FeatureVolume],
    hyp: &DepthHypotheses,
    max_cost: f64,
    min_views: usize,
) {
    let planes = hyp.planes();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if !depth.valid.at(x, y) {
                continue;
            }
            let d_est = depth.depth.at(x, y);
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for d in 0..planes {
                let dist = (hyp.at(d, y, x) - d_est).abs();
                if dist < best_dist {
                    best_dist = dist;
                    best = d;
                }
            }
            let views = volumes.iter().filter(|v| v.is_valid(best, y, x)).count();
            if views < min_views || agg.values.at(best, y, x) > max_cost {
                depth.valid.set(x, y, false);
                depth.depth.set(x, y, 0.0);
            }
        }
    }
}

/// Replace each pixel with the median depth over its valid neighbors in a
/// `(2r+1)^2` window. Pixels whose window holds no majority of valid
/// neighbors become invalid, so isolated speckle outliers are both smoothed
/// over and eroded away.
pub fn median_filter_depth(depth: &DepthMap, radius: usize) -> DepthMap {
    let (w, h) = (depth.width(), depth.height());
    let side = 2 * radius + 1;
    let min_valid = side * side / 2 + 1;
    let r = radius as i64;
    let rows: Vec<Vec<(f64, bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            let mut vals: Vec<f64> = Vec::with_capacity(side * side);
            for x in 0..w {
                vals.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        if depth.valid.at(nx as usize, ny as usize) {
                            vals.push(depth.depth.at(nx as usize, ny as usize));
                        }
                    }
                }
                if vals.len() >= min_valid {
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    row.push((vals[vals.len() / 2], true));
                } else {
                    row.push((0.0, false));
                }
            }
            row
        })
        .collect();
    let mut out = depth.clone();
    for (y, row) in rows.iter().enumerate() {
        for (x, &(d, v)) in row.iter().enumerate() {
            out.depth.set(x, y, d);
            out.valid.set(x, y, v);
        }
    }
    out
}

/// Result of the full three-stage cascade.
#[derive(Debug, Clone)]
pub struct CascadeResult {
    pub final_depth: DepthMap,
    pub stage_depths: [DepthMap; 3],
}

/// Run the three-stage hierarchical sweep for the window's reference frame.
///
/// Stage 1 sweeps the uniform ladder at quarter resolution; stages 2 and 3
/// refine the upsampled previous output at half and full resolution. Each
/// stage runs warp, view aggregation, regularization, softmax, and
/// expectation.
pub fn cascade_estimate(win: &KeyframeWindow, cfg: &MvsConfig) -> Result<CascadeResult, MvsError> {
    cfg.validate()?;
    let ref_index = win.reference_index();
    let ref_pose = win.frames()[ref_index].pose;
    let mut stage_depths: Vec<DepthMap> = Vec::with_capacity(3);

    for stage in 1..=3usize {
        let intr = win.stage_intrinsics(stage);
        let (height, width) = (intr.height, intr.width);
        let hyp = if stage == 1 {
            hypotheses_stage1(cfg, height, width)
        } else {
            hypotheses_refined(&stage_depths[stage - 2], cfg, stage)?
        };
        let volumes: Vec<FeatureVolume> = win
            .frames()
            .iter()
            .map(|frame| {
                let t_rel = relative_pose(&frame.pose, &ref_pose);
                warp_features(frame.pyramid.stage(stage), &t_rel, &intr, &hyp)
            })
            .collect();
        let weights = aggregation_weights(
            &volumes,
            ref_index,
            cfg.aggregation_temperature,
            cfg.aggregation_temperature_scale,
        )?;
        let agg = aggregated_cost(&volumes, &weights, ref_index, cfg.max_cost)?;
        let mut cost = agg.clone();
        for _ in 0..cfg.regularizer_passes {
            cost = regularize_cost(&cost, cfg.regularizer_radius, cfg.regularizer_depth_radius);
        }
        let mut prob = cost_to_probability(&cost, cfg.softmax_temperature());
        if let Some(window) = cfg.peak_window {
            prob = localize_peak(&prob, window);
        }
        let mut depth = expected_depth(&prob, &hyp, cfg.confidence_floor_scale);
        // Gate only the final output; earlier stages keep their estimates so
        // the refinement prior stays dense.
        if stage == 3 {
            if let Some(max_cost) = cfg.photoconsistency_max_cost {
                apply_photoconsistency_gate(
                    &mut depth,
                    &agg,
                    &volumes,
                    &hyp,
                    max_cost,
                    cfg.photoconsistency_min_views,
                );
            }
            if let Some(radius) = cfg.median_filter_radius {
                depth = median_filter_depth(&depth, radius);
            }
        }
        stage_depths.push(depth);
    }

    let stage_depths: [DepthMap; 3] = stage_depths.try_into().unwrap();
    Ok(CascadeResult {
        final_depth: stage_depths[2].clone(),
        stage_depths,
    })
}

/// Depth range used by the sweep during live operation: the minimum is fixed
/// at 0.01; the first maximum is ten times the mean sparse depth and each
/// later maximum is 1.5 times the previously estimated maximum.
pub fn depth_range_schedule(
    sparse_mean_depth: Option<f64>,
    prev_estimated_max: Option<f64>,
) -> Result<(f64, f64), MvsError> {
    match (prev_estimated_max, sparse_mean_depth) {
        (Some(prev), _) => {
            if prev <= 0.0 {
                return Err(MvsError::NonPositiveInput(prev));
            }
            Ok((0.01, 1.5 * prev))
        }
        (None, Some(mean)) => {
            if mean <= 0.0 {
                return Err(MvsError::NonPositiveInput(mean));
            }
            Ok((0.01, 10.0 * mean))
        }
        (None, None) => Err(MvsError::NonPositiveInput(0.0)),
    }
}

/// TUM depth convention for 16-bit PNG output: value = meters * 5000,
/// 0 = invalid.
pub const DEPTH_PNG_SCALE: f64 = 5000.0;

pub fn save_depth_png(path: &Path, depth: &DepthMap) -> Result<(), MvsError> {
    let (w, h) = (depth.width() as u32, depth.height() as u32);
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        let (xi, yi) = (x as usize, y as usize);
        let v = if depth.valid.at(xi, yi) {
            (depth.depth.at(xi, yi) * DEPTH_PNG_SCALE)
                .round()
                .clamp(0.0, u16::MAX as f64) as u16
        } else {
            0
        };
        *pixel = image::Luma([v]);
    }
    img.save(path).map_err(|e| MvsError::DepthPng(e.to_string()))
}

pub fn load_depth_png(path: &Path) -> Result<DepthMap, MvsError> {
    let img = image::open(path)
        .map_err(|e| MvsError::DepthPng(format!("{}: {e}", path.display())))?
        .into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut depth = Grid::filled(w, h, 0.0);
    let mut valid = Grid::filled(w, h, false);
    for (x, y, pixel) in img.enumerate_pixels() {
        let v = pixel.0[0];
        if v > 0 {
            depth.set(x as usize, y as usize, v as f64 / DEPTH_PNG_SCALE);
            valid.set(x as usize, y as usize, true);
        }
    }
    Ok(DepthMap {
        depth,
        valid,
        confidence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_volume(channels: usize, planes: usize, h: usize, w: usize, value: f64) -> FeatureVolume {
        FeatureVolume {
            channels,
            planes,
            height: h,
            width: w,
            values: vec![value; channels * planes * h * w],
            valid: vec![true; planes * h * w],
        }
    }

    #[test]
    fn stage1_ladder_constants() {
        let cfg = MvsConfig::default();
        let hyp = hypotheses_stage1(&cfg, 4, 4);
        let spacing = hyp.at(1, 0, 0) - hyp.at(0, 0, 0);
        assert!((spacing - 9.99 / 47.0).abs() < 1e-12);
        assert!((spacing - 0.2126).abs() < 5e-4);
        assert_eq!(hyp.at(0, 2, 3), 0.01);
        assert!((hyp.at(47, 2, 3) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn stage1_two_planes() {
        let cfg = MvsConfig {
            planes: [2, 2, 2],
            ..MvsConfig::default()
        };
        let hyp = hypotheses_stage1(&cfg, 2, 2);
        assert_eq!(hyp.at(0, 0, 0), cfg.d_min);
        assert_eq!(hyp.at(1, 0, 0), cfg.d_max);
    }

    #[test]
    fn stage1_monotone() {
        let cfg = MvsConfig::default();
        let hyp = hypotheses_stage1(&cfg, 3, 3);
        for y in 0..3 {
            for x in 0..3 {
                for d in 1..hyp.planes() {
                    assert!(hyp.at(d, y, x) > hyp.at(d - 1, y, x));
                }
            }
        }
    }

    #[test]
    fn refined_ladder_centered() {
        let cfg = MvsConfig::default();
        let prev = DepthMap::from_grid(Grid::filled(2, 2, 2.0));
        let hyp = hypotheses_refined(&prev, &cfg, 2).unwrap();
        let interval = cfg.stage_interval(2);
        assert!((interval - 0.1063).abs() < 5e-4);
        let expected = [
            2.0 - 1.5 * interval,
            2.0 - 0.5 * interval,
            2.0 + 0.5 * interval,
            2.0 + 1.5 * interval,
        ];
        for (k, &e) in expected.iter().enumerate() {
            assert!((hyp.at(k, 1, 1) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_interval_ratios() {
        let cfg = MvsConfig::default();
        assert_eq!(cfg.stage_interval(2) / cfg.stage_interval(1), 0.5);
        assert_eq!(cfg.stage_interval(3) / cfg.stage_interval(1), 0.25);
    }

    #[test]
    fn refined_ladder_clamped_stays_increasing() {
        let cfg = MvsConfig::default();
        let prev = DepthMap::from_grid(Grid::filled(2, 2, 0.0005));
        let hyp = hypotheses_refined(&prev, &cfg, 2).unwrap();
        for k in 0..hyp.planes() {
            assert!(hyp.at(k, 0, 0) >= D_MIN_FLOOR);
            if k > 0 {
                assert!(hyp.at(k, 0, 0) > hyp.at(k - 1, 0, 0));
            }
        }
    }

    #[test]
    fn refined_rejects_empty_prior() {
        let cfg = MvsConfig::default();
        let prev = DepthMap::invalid(2, 2);
        assert!(matches!(
            hypotheses_refined(&prev, &cfg, 2),
            Err(MvsError::EmptyPrior)
        ));
    }

    #[test]
    fn variance_cost_zero_for_identical_views() {
        let vols = vec![flat_volume(3, 2, 2, 2, 1.5), flat_volume(3, 2, 2, 2, 1.5)];
        let cost = variance_cost(&vols, 4.0).unwrap();
        for &v in cost.values.data() {
            assert_eq!(v, 0.0);
        }
        for &m in cost.valid.data() {
            assert!(m);
        }
    }

    #[test]
    fn variance_cost_two_views_formula() {
        let a = 0.7;
        let b = -0.4;
        let vols = vec![flat_volume(3, 1, 1, 1, a), flat_volume(3, 1, 1, 1, b)];
        let cost = variance_cost(&vols, 4.0).unwrap();
        let expected = (a - b) * (a - b) / 4.0;
        assert!((cost.values.at(0, 0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn variance_cost_single_valid_view_is_invalid() {
        let mut v1 = flat_volume(1, 1, 1, 1, 1.0);
        let v2 = flat_volume(1, 1, 1, 1, 2.0);
        v1.valid[0] = false;
        let cost = variance_cost(&[v1, v2], 4.0).unwrap();
        assert!(!cost.valid.at(0, 0, 0));
        assert_eq!(cost.values.at(0, 0, 0), 4.0);
    }

    #[test]
    fn variance_cost_rejects_single_volume() {
        let vols = vec![flat_volume(1, 1, 1, 1, 1.0)];
        assert!(matches!(
            variance_cost(&vols, 4.0),
            Err(MvsError::TooFewViews(1))
        ));
    }

    #[test]
    fn equal_errors_give_zero_weights() {
        let vols = vec![
            flat_volume(2, 1, 2, 2, 0.0),
            flat_volume(2, 1, 2, 2, 1.0),
            flat_volume(2, 1, 2, 2, -1.0),
        ];
        let w = aggregation_weights(&vols, 0, None, 1.0).unwrap();
        for i in 1..3 {
            for &v in w[i].data() {
                assert!(v.abs() < 1e-12, "weight {v} not zero for equal errors");
            }
        }
    }

    #[test]
    fn occluded_view_weight_vanishes() {
        let vols = vec![
            flat_volume(1, 1, 1, 1, 0.0),
            flat_volume(1, 1, 1, 1, 0.1),
            flat_volume(1, 1, 1, 1, 100.0),
        ];
        let w = aggregation_weights(&vols, 0, Some(0.01), 1.0).unwrap();
        // The wildly wrong view is driven to 1 + W ~ 0.
        assert!(1.0 + w[2].at(0, 0, 0) < 1e-6);
        assert!((1.0 + w[1].at(0, 0, 0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn two_view_weight_is_zero() {
        let vols = vec![flat_volume(1, 1, 1, 1, 0.0), flat_volume(1, 1, 1, 1, 7.0)];
        let w = aggregation_weights(&vols, 1, None, 1.0).unwrap();
        assert_eq!(w[0].at(0, 0, 0), 0.0);
    }

    #[test]
    fn aggregated_equals_four_times_variance_for_two_views() {
        let mut rng = 12345u64;
        let mut next = move || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let (c, p, h, w) = (3, 4, 5, 6);
        let make = |next: &mut dyn FnMut() -> f64| FeatureVolume {
            channels: c,
            planes: p,
            height: h,
            width: w,
            values: (0..c * p * h * w).map(|_| next()).collect(),
            valid: vec![true; p * h * w],
        };
        let vols = vec![make(&mut next), make(&mut next)];
        let zero_weights = vec![
            Tensor3::filled(p, h, w, 0.0),
            Tensor3::filled(p, h, w, 0.0),
        ];
        let var = variance_cost(&vols, 4.0).unwrap();
        let agg = aggregated_cost(&vols, &zero_weights, 1, 4.0).unwrap();
        for (a, v) in agg.values.data().iter().zip(var.values.data()) {
            assert!((a - 4.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn concentrated_weights_select_single_view() {
        let vols = vec![
            flat_volume(1, 1, 1, 1, 0.0),
            flat_volume(1, 1, 1, 1, 2.0),
            flat_volume(1, 1, 1, 1, 5.0),
        ];
        // All mass on view 1: 1 + W_1 = 2, 1 + W_2 = 0.
        let mut w = vec![
            Tensor3::filled(1, 1, 1, 0.0),
            Tensor3::filled(1, 1, 1, 1.0),
            Tensor3::filled(1, 1, 1, -1.0),
        ];
        w[0].set(0, 0, 0, 0.0);
        let cost = aggregated_cost(&vols, &w, 0, 4.0).unwrap();
        // (1+1) * (2-0)^2 / 2 = 4.
        assert!((cost.values.at(0, 0, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn regularize_radius_zero_is_identity() {
        let vols = vec![flat_volume(1, 2, 3, 3, 1.0), flat_volume(1, 2, 3, 3, 2.0)];
        let cost = variance_cost(&vols, 4.0).unwrap();
        let reg = regularize_cost(&cost, 0, 0);
        assert_eq!(reg, cost);
    }

    #[test]
    fn regularize_constant_unchanged() {
        let vols = vec![flat_volume(1, 3, 4, 4, 1.0), flat_volume(1, 3, 4, 4, 3.0)];
        let cost = variance_cost(&vols, 4.0).unwrap();
        let reg = regularize_cost(&cost, 2, 1);
        for (a, b) in reg.values.data().iter().zip(cost.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn regularize_impulse_spreads_to_27() {
        let (p, h, w) = (5, 5, 5);
        let mut values = Tensor3::filled(p, h, w, 0.0);
        values.set(2, 2, 2, 27.0);
        let cost = CostVolume {
            values,
            valid: Tensor3::filled(p, h, w, true),
            max_cost: 4.0,
        };
        let reg = regularize_cost(&cost, 1, 1);
        for d in 0..p {
            for y in 0..h {
                for x in 0..w {
                    let inside = (1..=3).contains(&d) && (1..=3).contains(&y) && (1..=3).contains(&x);
                    let expected = if inside { 1.0 } else { 0.0 };
                    assert!(
                        (reg.values.at(d, y, x) - expected).abs() < 1e-12,
                        "voxel ({d},{y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_cost_gives_uniform_probability() {
        let cost = CostVolume {
            values: Tensor3::filled(5, 2, 2, 1.7),
            valid: Tensor3::filled(5, 2, 2, true),
            max_cost: 4.0,
        };
        let p = cost_to_probability(&cost, 0.5);
        for d in 0..5 {
            assert!((p.at(d, 1, 1) - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_normalizes() {
        let mut values = Tensor3::filled(4, 3, 3, 4.0);
        for d in 0..4 {
            for y in 0..3 {
                for x in 0..3 {
                    values.set(d, y, x, ((d * 7 + y * 3 + x) % 5) as f64);
                }
            }
        }
        let cost = CostVolume {
            values,
            valid: Tensor3::filled(4, 3, 3, true),
            max_cost: 4.0,
        };
        let p = cost_to_probability(&cost, 0.5);
        for y in 0..3 {
            for x in 0..3 {
                let sum: f64 = (0..4).map(|d| p.at(d, y, x)).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_small_temperature_concentrates() {
        let mut values = Tensor3::filled(4, 1, 1, 4.0);
        values.set(2, 0, 0, 0.0);
        let cost = CostVolume {
            values,
            valid: Tensor3::filled(4, 1, 1, true),
            max_cost: 4.0,
        };
        let p = cost_to_probability(&cost, 0.05);
        assert!(p.at(2, 0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn expected_depth_delta_and_mean() {
        let mut hyp_tensor = Tensor3::filled(2, 1, 1, 0.0);
        hyp_tensor.set(0, 0, 0, 1.0);
        hyp_tensor.set(1, 0, 0, 3.0);
        let hyp = DepthHypotheses::from_tensor(hyp_tensor);

        let mut delta = Tensor3::filled(2, 1, 1, 0.0);
        delta.set(1, 0, 0, 1.0);
        let d = expected_depth(&ProbabilityVolume { tensor: delta }, &hyp, 0.0);
        assert_eq!(d.depth.at(0, 0), 3.0);

        let uniform = Tensor3::filled(2, 1, 1, 0.5);
        let d = expected_depth(&ProbabilityVolume { tensor: uniform }, &hyp, 0.0);
        assert_eq!(d.depth.at(0, 0), 2.0);
    }

    #[test]
    fn expected_depth_confidence_floor() {
        let hyp = hypotheses_stage1(&MvsConfig::default(), 1, 1);
        let uniform = Tensor3::filled(48, 1, 1, 1.0 / 48.0);
        let d = expected_depth(&ProbabilityVolume { tensor: uniform }, &hyp, 2.0);
        // Uniform probability over 48 planes sits below the 2/48 floor.
        assert!(!d.valid.at(0, 0));
    }

    #[test]
    fn depth_range_schedule_rules() {
        assert_eq!(depth_range_schedule(Some(1.0), None).unwrap(), (0.01, 10.0));
        assert_eq!(depth_range_schedule(None, Some(4.0)).unwrap(), (0.01, 6.0));
        assert!(matches!(
            depth_range_schedule(Some(0.0), None),
            Err(MvsError::NonPositiveInput(_))
        ));
    }

    #[test]
    fn depth_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let mut depth = Grid::filled(8, 8, 0.0);
        let mut valid = Grid::filled(8, 8, false);
        for x in 0..8 {
            depth.set(x, 3, (x as f64 + 1.0) * 0.5);
            valid.set(x, 3, true);
        }
        let dm = DepthMap::new(depth, valid);
        save_depth_png(&path, &dm).unwrap();
        let back = load_depth_png(&path).unwrap();
        assert_eq!(back.valid, dm.valid);
        for x in 0..8 {
            assert!((back.depth.at(x, 3) - dm.depth.at(x, 3)).abs() <= 0.5 / DEPTH_PNG_SCALE);
        }
    }

    #[test]
    fn median_filter_removes_speckle() {
        let mut depth = Grid::filled(9, 9, 2.0);
        depth.set(4, 4, 7.5);
        let dm = DepthMap::from_grid(depth);
        let out = median_filter_depth(&dm, 1);
        assert_eq!(out.depth.at(4, 4), 2.0);
        assert!(out.valid.at(4, 4));
    }

    #[test]
    fn median_filter_erodes_sparse_regions() {
        // A single valid pixel has no valid-majority window anywhere.
        let mut depth = Grid::filled(9, 9, 0.0);
        depth.set(4, 4, 2.0);
        let dm = DepthMap::from_grid(depth);
        let out = median_filter_depth(&dm, 1);
        assert_eq!(out.valid_count(), 0);
    }
}
