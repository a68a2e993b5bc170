//! Multi-scale feature pyramids standing in for the learned 2D extractor,
//! plus a binary container format for interop with externally computed
//! features.

use crate::grid::Grid;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image dimensions {0}x{1} not divisible by 4")]
    BadDimensions(usize, usize),
    #[error("tensor container format error: {0}")]
    FormatError(String),
    #[error("stage shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A single input frame. Intensity values are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub intensity: Grid<f64>,
    pub rgb: Option<Grid<[f32; 3]>>,
    pub timestamp: f64,
}

impl ImageFrame {
    pub fn from_intensity(intensity: Grid<f64>, timestamp: f64) -> Self {
        Self {
            intensity,
            rgb: None,
            timestamp,
        }
    }

    pub fn width(&self) -> usize {
        self.intensity.width()
    }

    pub fn height(&self) -> usize {
        self.intensity.height()
    }
}

/// Per-stage feature maps, shape `(channels, height, width)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl StageFeatures {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear sample of one channel, pixel-center convention. `None`
    /// outside the image.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64)
        {
            return None;
        }
        let x0 = x.floor().min((self.width.max(2) - 2) as f64) as usize;
        let y0 = y.floor().min((self.height.max(2) - 2) as f64) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.at(c, y0, x0) as f64;
        let v10 = self.at(c, y0, x1) as f64;
        let v01 = self.at(c, y1, x0) as f64;
        let v11 = self.at(c, y1, x1) as f64;
        let v0 = v00 * (1.0 - fx) + v10 * fx;
        let v1 = v01 * (1.0 - fx) + v11 * fx;
        Some(v0 * (1.0 - fy) + v1 * fy)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Three-stage feature pyramid. Stage `s` (1-based) has resolution
/// `(H / 2^(3-s), W / 2^(3-s))`, so stage 3 is full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    stages: [StageFeatures; 3],
}

impl FeaturePyramid {
    pub fn new(stages: [StageFeatures; 3]) -> Result<Self, FeatureError> {
        for s in 0..2 {
            if stages[s + 1].width != 2 * stages[s].width
                || stages[s + 1].height != 2 * stages[s].height
            {
                return Err(FeatureError::ShapeMismatch(format!(
                    "stage {} is {}x{}, stage {} is {}x{}; expected exact halving",
                    s + 2,
                    stages[s + 1].width,
                    stages[s + 1].height,
                    s + 1,
                    stages[s].width,
                    stages[s].height
                )));
            }
        }
        Ok(Self { stages })
    }

    /// Stage by 1-based index, matching the cascade's stage numbering.
    pub fn stage(&self, s: usize) -> &StageFeatures {
        &self.stages[s - 1]
    }

    pub fn channel_counts(&self) -> [usize; 3] {
        [
            self.stages[0].channels,
            self.stages[1].channels,
            self.stages[2].channels,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureConfig {
    /// Half-width of the box smoothing applied to the intensity channel.
    pub smoothing_radius: usize,
    /// Guard for the per-channel unit-variance normalization.
    pub normalize_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            smoothing_radius: 1,
            normalize_eps: 1e-6,
        }
    }
}

fn box_smooth(g: &Grid<f64>, radius: usize) -> Grid<f64> {
    if radius == 0 {
        return g.clone();
    }
    let r = radius as i64;
    let horizontal = Grid::from_fn(g.width(), g.height(), |x, y| {
        let mut sum = 0.0;
        for dx in -r..=r {
            let xi = (x as i64 + dx).clamp(0, g.width() as i64 - 1);
            sum += g.at(xi as usize, y);
        }
        sum / (2 * r + 1) as f64
    });
    Grid::from_fn(g.width(), g.height(), |x, y| {
        let mut sum = 0.0;
        for dy in -r..=r {
            let yi = (y as i64 + dy).clamp(0, g.height() as i64 - 1);
            sum += horizontal.at(x, yi as usize);
        }
        sum / (2 * r + 1) as f64
    })
}

/// Central-difference gradients with replicated borders.
fn gradients(g: &Grid<f64>) -> (Grid<f64>, Grid<f64>) {
    let w = g.width() as i64;
    let h = g.height() as i64;
    let dx = Grid::from_fn(g.width(), g.height(), |x, y| {
        let xm = (x as i64 - 1).clamp(0, w - 1) as usize;
        let xp = (x as i64 + 1).clamp(0, w - 1) as usize;
        0.5 * (g.at(xp, y) - g.at(xm, y))
    });
    let dy = Grid::from_fn(g.width(), g.height(), |x, y| {
        let ym = (y as i64 - 1).clamp(0, h - 1) as usize;
        let yp = (y as i64 + 1).clamp(0, h - 1) as usize;
        0.5 * (g.at(x, yp) - g.at(x, ym))
    });
    (dx, dy)
}

/// Raw (un-normalized) channels for one stage: smoothed intensity, |dx|, |dy|.
/// Gradients are taken on the smoothed intensity and their magnitudes are
/// smoothed again, so sub-pixel warp misalignment does not decorrelate them.
pub(crate) fn stage_channels_raw(image: &Grid<f64>, cfg: &FeatureConfig) -> [Grid<f64>; 3] {
    let smoothed = box_smooth(image, cfg.smoothing_radius);
    let (dx, dy) = gradients(&smoothed);
    let abs = |g: &Grid<f64>| Grid::from_fn(g.width(), g.height(), |x, y| g.at(x, y).abs());
    [
        smoothed.clone(),
        box_smooth(&abs(&dx), cfg.smoothing_radius),
        box_smooth(&abs(&dy), cfg.smoothing_radius),
    ]
}

fn normalize_channel(g: &Grid<f64>, eps: f64) -> Grid<f64> {
    let n = (g.width() * g.height()) as f64;
    let mean = g.data().iter().sum::<f64>() / n;
    let var = g.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(eps);
    Grid::from_fn(g.width(), g.height(), |x, y| (g.at(x, y) - mean) / std)
}

fn build_stage(image: &Grid<f64>, cfg: &FeatureConfig) -> StageFeatures {
    let channels = stage_channels_raw(image, cfg);
    let (w, h) = (image.width(), image.height());
    let mut data = Vec::with_capacity(3 * w * h);
    for ch in &channels {
        let normalized = normalize_channel(ch, cfg.normalize_eps);
        data.extend(normalized.data().iter().map(|&v| v as f32));
    }
    StageFeatures::new(3, h, w, data)
}

/// Build the three-stage classical pyramid: stage 3 from the full-resolution
/// image, stage 2 from the 2x downsampled image, stage 1 from the 4x
/// downsampled image. Each stage carries `[smoothed intensity, |dx|, |dy|]`
/// normalized to zero mean and unit variance per channel.
pub fn extract_classical(
    frame: &ImageFrame,
    cfg: &FeatureConfig,
) -> Result<FeaturePyramid, FeatureError> {
    let (w, h) = (frame.width(), frame.height());
    if w % 4 != 0 || h % 4 != 0 {
        return Err(FeatureError::BadDimensions(h, w));
    }
    let full = &frame.intensity;
    let half = full.downsample_half();
    let quarter = half.downsample_half();
    FeaturePyramid::new([
        build_stage(&quarter, cfg),
        build_stage(&half, cfg),
        build_stage(full, cfg),
    ])
}

const MAGIC: &[u8; 4] = b"FPYR";
const VERSION: u32 = 1;

/// Save a pyramid in the tensor container format: little-endian,
/// `magic(4B) version(u32) n_stages(u32)`, then per stage
/// `channels(u32) height(u32) width(u32)` followed by row-major f32 data.
pub fn save_pyramid(path: &Path, pyramid: &FeaturePyramid) -> Result<(), FeatureError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&3u32.to_le_bytes())?;
    for s in 1..=3 {
        let stage = pyramid.stage(s);
        file.write_all(&(stage.channels() as u32).to_le_bytes())?;
        file.write_all(&(stage.height() as u32).to_le_bytes())?;
        file.write_all(&(stage.width() as u32).to_le_bytes())?;
        for &v in stage.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a pyramid written by [`save_pyramid`] (or an external tool using the
/// same container). Channel counts are free per stage; the stage halving
/// relation is enforced.
pub fn load_external_pyramid(path: &Path) -> Result<FeaturePyramid, FeatureError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut read_exact = |buf: &mut [u8]| -> Result<(), FeatureError> {
        file.read_exact(buf)
            .map_err(|_| FeatureError::FormatError("truncated file".into()))
    };
    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FeatureError::FormatError(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(FeatureError::FormatError(format!(
            "unsupported version {version}"
        )));
    }
    read_exact(&mut u32buf)?;
    let n_stages = u32::from_le_bytes(u32buf);
    if n_stages != 3 {
        return Err(FeatureError::FormatError(format!(
            "expected 3 stages, got {n_stages}"
        )));
    }
    let mut stages = Vec::with_capacity(3);
    for _ in 0..3 {
        read_exact(&mut u32buf)?;
        let channels = u32::from_le_bytes(u32buf) as usize;
        read_exact(&mut u32buf)?;
        let height = u32::from_le_bytes(u32buf) as usize;
        read_exact(&mut u32buf)?;
        let width = u32::from_le_bytes(u32buf) as usize;
        if channels == 0 || height == 0 || width == 0 {
            return Err(FeatureError::FormatError("zero stage dimension".into()));
        }
        let mut data = vec![0f32; channels * height * width];
        for v in data.iter_mut() {
            read_exact(&mut u32buf)?;
            *v = f32::from_le_bytes(u32buf);
        }
        stages.push(StageFeatures::new(channels, height, width, data));
    }
    let stages: [StageFeatures; 3] = stages.try_into().unwrap();
    FeaturePyramid::new(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame_from_fn(w: usize, h: usize, f: impl FnMut(usize, usize) -> f64) -> ImageFrame {
        ImageFrame::from_intensity(Grid::from_fn(w, h, f), 0.0)
    }

    #[test]
    fn constant_image_gives_zero_channels() {
        let frame = frame_from_fn(32, 16, |_, _| 0.5);
        let pyr = extract_classical(&frame, &FeatureConfig::default()).unwrap();
        for s in 1..=3 {
            for &v in pyr.stage(s).data() {
                assert_eq!(v, 0.0, "stage {s} not zero under the variance guard");
            }
        }
    }

    #[test]
    fn stage_shapes_for_vga() {
        let frame = frame_from_fn(640, 480, |x, y| ((x + y) % 7) as f64 / 7.0);
        let pyr = extract_classical(&frame, &FeatureConfig::default()).unwrap();
        let dims = |s: usize| (pyr.stage(s).channels(), pyr.stage(s).height(), pyr.stage(s).width());
        assert_eq!(dims(1), (3, 120, 160));
        assert_eq!(dims(2), (3, 240, 320));
        assert_eq!(dims(3), (3, 480, 640));
    }

    #[test]
    fn vertical_step_edge_concentrates_dx() {
        let frame = frame_from_fn(32, 32, |x, _| if x < 16 { 0.0 } else { 1.0 });
        let raw = stage_channels_raw(&frame.intensity, &FeatureConfig::default());
        let dx = &raw[1];
        let dy = &raw[2];
        // |dx| peaks on the two columns around the edge, decays with
        // distance, and |dy| is identically 0.
        for y in 0..32 {
            let peak = dx.at(15, y).max(dx.at(16, y));
            for x in 0..32 {
                assert!(dx.at(x, y) <= peak + 1e-12);
                assert_eq!(dy.at(x, y), 0.0);
            }
            assert!(peak > 0.2);
            assert_eq!(dx.at(4, y), 0.0);
        }
    }

    #[test]
    fn brightness_shift_leaves_gradients_unchanged() {
        let frame = frame_from_fn(32, 24, |x, y| ((x * 13 + y * 7) % 11) as f64 / 11.0);
        let shifted = frame_from_fn(32, 24, |x, y| {
            ((x * 13 + y * 7) % 11) as f64 / 11.0 + 0.25
        });
        let cfg = FeatureConfig::default();
        let a = stage_channels_raw(&frame.intensity, &cfg);
        let b = stage_channels_raw(&shifted.intensity, &cfg);
        for c in 1..3 {
            for (va, vb) in a[c].data().iter().zip(b[c].data()) {
                assert!((va - vb).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let frame = frame_from_fn(64, 48, |x, y| ((x * 31 + y * 17) % 23) as f64 / 23.0);
        let cfg = FeatureConfig::default();
        let a = extract_classical(&frame, &cfg).unwrap();
        let b = extract_classical(&frame, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_dimensions_rejected() {
        let frame = frame_from_fn(30, 16, |_, _| 0.0);
        assert!(matches!(
            extract_classical(&frame, &FeatureConfig::default()),
            Err(FeatureError::BadDimensions(_, _))
        ));
    }

    #[test]
    fn container_roundtrip_bit_exact() {
        let frame = frame_from_fn(32, 16, |x, y| ((x * 5 + y * 3) % 13) as f64 / 13.0);
        let pyr = extract_classical(&frame, &FeatureConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pyr.bin");
        save_pyramid(&path, &pyr).unwrap();
        let back = load_external_pyramid(&path).unwrap();
        assert_eq!(back, pyr);
    }

    #[test]
    fn container_rejects_shape_mismatch() {
        let stages = [
            StageFeatures::new(2, 4, 4, vec![0.0; 32]),
            StageFeatures::new(2, 8, 9, vec![0.0; 144]),
            StageFeatures::new(2, 16, 18, vec![0.0; 576]),
        ];
        // Invalid pyramid cannot be constructed; write the container by hand.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FPYR");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for st in &stages {
            bytes.extend_from_slice(&(st.channels() as u32).to_le_bytes());
            bytes.extend_from_slice(&(st.height() as u32).to_le_bytes());
            bytes.extend_from_slice(&(st.width() as u32).to_le_bytes());
            for &v in st.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_external_pyramid(&path),
            Err(FeatureError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn container_rejects_truncated_file() {
        let frame = frame_from_fn(16, 16, |x, _| x as f64 / 16.0);
        let pyr = extract_classical(&frame, &FeatureConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        save_pyramid(&path, &pyr).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_external_pyramid(&path),
            Err(FeatureError::FormatError(_))
        ));
    }

    proptest! {
        #[test]
        fn shape_relation_holds(w4 in 2usize..24, h4 in 2usize..18) {
            let (w, h) = (w4 * 4, h4 * 4);
            let frame = frame_from_fn(w, h, |x, y| ((x ^ y) % 9) as f64 / 9.0);
            let pyr = extract_classical(&frame, &FeatureConfig::default()).unwrap();
            for s in 1..=3usize {
                prop_assert_eq!(pyr.stage(s).height(), h / (1 << (3 - s)));
                prop_assert_eq!(pyr.stage(s).width(), w / (1 << (3 - s)));
            }
        }
    }
}
