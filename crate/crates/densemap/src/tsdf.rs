//! Voxel-hashed truncated signed distance volume: fusion of posed depth maps,
//! raycast rendering, and marching-cubes mesh extraction.
//!
//! The volume stores 8x8x8 voxel blocks in a hash map keyed by integer block
//! coordinates; blocks are allocated only where integration touches the
//! truncation band around an observed surface, so memory scales with surface
//! area. Signed distances are projective (measured along the camera optical
//! axis) and normalized to [-1, 1] by the truncation distance.

use crate::features::ImageFrame;
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::grid::Grid;
use crate::mvs::DepthMap;
use nalgebra::Vector3;
use rayon::prelude::*;
use std::collections::{HashMap, HashSet};
use std::hash::{BuildHasherDefault, Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TsdfError {
    #[error("depth map {0}x{1} does not match intrinsics {2}x{3}")]
    ResolutionMismatch(usize, usize, usize, usize),
    #[error("invalid volume config: {0}")]
    BadConfig(String),
    #[error("snapshot format error: {0}")]
    Snapshot(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Voxels per block edge.
pub const BLOCK_SIDE: usize = 8;
const BLOCK_VOXELS: usize = BLOCK_SIDE * BLOCK_SIDE * BLOCK_SIDE;

/// Fusion weight cap.
pub const MAX_WEIGHT: f64 = 64.0;

/// One voxel: normalized signed distance, running-average color, and fusion
/// weight. `w == 0` means never observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfVoxel {
    pub d: f32,
    pub c: [f32; 3],
    pub w: f32,
}

impl TsdfVoxel {
    pub const EMPTY: TsdfVoxel = TsdfVoxel {
        d: 0.0,
        c: [0.0; 3],
        w: 0.0,
    };
}

/// Integer block coordinate, hashed with the classic 3-prime multiply-xor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BlockCoord(pub [i64; 3]);

impl BlockCoord {
    fn mix(&self) -> u64 {
        let [x, y, z] = self.0;
        (x as u64)
            .wrapping_mul(73_856_093)
            .wrapping_mul(1) // keep the three factors visually aligned
            ^ (y as u64).wrapping_mul(19_349_669)
            ^ (z as u64).wrapping_mul(83_492_791)
    }
}

impl Hash for BlockCoord {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.mix());
    }
}

/// Pass-through hasher so the multiply-xor mix above is the table hash; the
/// map stays deterministic and seedless across runs.
#[derive(Default)]
pub struct BlockCoordHasher(u64);

impl Hasher for BlockCoordHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 << 8) | b as u64;
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v;
    }
}

type BlockMap = HashMap<BlockCoord, VoxelBlock, BuildHasherDefault<BlockCoordHasher>>;

/// 8x8x8 voxels, linear index `(z * 8 + y) * 8 + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    pub voxels: Vec<TsdfVoxel>,
}

impl VoxelBlock {
    pub fn empty() -> Self {
        Self {
            voxels: vec![TsdfVoxel::EMPTY; BLOCK_VOXELS],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> &TsdfVoxel {
        &self.voxels[(z * BLOCK_SIDE + y) * BLOCK_SIDE + x]
    }

    #[inline]
    fn at_mut(&mut self, x: usize, y: usize, z: usize) -> &mut TsdfVoxel {
        &mut self.voxels[(z * BLOCK_SIDE + y) * BLOCK_SIDE + x]
    }
}

/// Volume parameters in model units (meters for metric trajectories).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    pub truncation: f64,
    /// Ray start distance for raycasting.
    pub near: f64,
    /// Maximum ray march distance.
    pub max_range: f64,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            truncation: 0.1,
            near: 0.05,
            max_range: 10.0,
        }
    }
}

impl TsdfConfig {
    pub fn validate(&self) -> Result<(), TsdfError> {
        if !(self.voxel_size > 0.0) {
            return Err(TsdfError::BadConfig(format!(
                "voxel_size {} must be positive",
                self.voxel_size
            )));
        }
        if self.truncation < 4.0 * self.voxel_size {
            return Err(TsdfError::BadConfig(format!(
                "truncation {} below 4 x voxel_size {}",
                self.truncation, self.voxel_size
            )));
        }
        Ok(())
    }
}

/// Sparse TSDF volume: hash map of allocated blocks. Lookups outside
/// allocated blocks read as empty space (weight 0).
#[derive(Debug, Clone)]
pub struct HashedTsdfVolume {
    blocks: BlockMap,
    cfg: TsdfConfig,
}

impl HashedTsdfVolume {
    pub fn new(cfg: TsdfConfig) -> Result<Self, TsdfError> {
        cfg.validate()?;
        Ok(Self {
            blocks: BlockMap::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &TsdfConfig {
        &self.cfg
    }

    pub fn voxel_size(&self) -> f64 {
        self.cfg.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.cfg.truncation
    }

    pub fn allocated_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Sorted coordinates of all allocated blocks (deterministic order).
    pub fn block_coords(&self) -> Vec<BlockCoord> {
        let mut coords: Vec<BlockCoord> = self.blocks.keys().copied().collect();
        coords.sort();
        coords
    }

    pub fn block(&self, coord: BlockCoord) -> Option<&VoxelBlock> {
        self.blocks.get(&coord)
    }

    /// Block containing a world point: floor(point / block_width) per axis.
    pub fn block_coord(&self, point: Vector3<f64>) -> BlockCoord {
        let w = self.cfg.voxel_size * BLOCK_SIDE as f64;
        BlockCoord([
            (point.x / w).floor() as i64,
            (point.y / w).floor() as i64,
            (point.z / w).floor() as i64,
        ])
    }

    /// World position of a global voxel's center.
    pub fn voxel_center(&self, v: [i64; 3]) -> Vector3<f64> {
        Vector3::new(
            (v[0] as f64 + 0.5) * self.cfg.voxel_size,
            (v[1] as f64 + 0.5) * self.cfg.voxel_size,
            (v[2] as f64 + 0.5) * self.cfg.voxel_size,
        )
    }

    /// Voxel lookup by global voxel coordinate; `None` when its block is
    /// unallocated.
    pub fn voxel_at(&self, v: [i64; 3]) -> Option<&TsdfVoxel> {
        let block = BlockCoord([
            v[0].div_euclid(BLOCK_SIDE as i64),
            v[1].div_euclid(BLOCK_SIDE as i64),
            v[2].div_euclid(BLOCK_SIDE as i64),
        ]);
        self.blocks.get(&block).map(|b| {
            b.at(
                v[0].rem_euclid(BLOCK_SIDE as i64) as usize,
                v[1].rem_euclid(BLOCK_SIDE as i64) as usize,
                v[2].rem_euclid(BLOCK_SIDE as i64) as usize,
            )
        })
    }

    /// Trilinearly interpolated signed distance at a world point, blending
    /// only observed (w > 0) corner voxels; `None` when no corner has been
    /// observed.
    pub fn sample_tsdf(&self, p: Vector3<f64>) -> Option<f64> {
        self.sample(p).map(|(d, _)| d)
    }

    fn sample(&self, p: Vector3<f64>) -> Option<(f64, [f32; 3])> {
        let vs = self.cfg.voxel_size;
        // Continuous voxel coordinates with centers at integers.
        let g = Vector3::new(p.x / vs - 0.5, p.y / vs - 0.5, p.z / vs - 0.5);
        let base = [
            g.x.floor() as i64,
            g.y.floor() as i64,
            g.z.floor() as i64,
        ];
        let f = [
            g.x - base[0] as f64,
            g.y - base[1] as f64,
            g.z - base[2] as f64,
        ];
        let mut d_sum = 0.0;
        let mut c_sum = [0.0f64; 3];
        let mut w_sum = 0.0;
        for dz in 0..2i64 {
            for dy in 0..2i64 {
                for dx in 0..2i64 {
                    let wt = (if dx == 1 { f[0] } else { 1.0 - f[0] })
                        * (if dy == 1 { f[1] } else { 1.0 - f[1] })
                        * (if dz == 1 { f[2] } else { 1.0 - f[2] });
                    if wt == 0.0 {
                        continue;
                    }
                    if let Some(v) = self.voxel_at([base[0] + dx, base[1] + dy, base[2] + dz]) {
                        if v.w > 0.0 {
                            d_sum += wt * v.d as f64;
                            for k in 0..3 {
                                c_sum[k] += wt * v.c[k] as f64;
                            }
                            w_sum += wt;
                        }
                    }
                }
            }
        }
        if w_sum < 1e-9 {
            return None;
        }
        Some((
            d_sum / w_sum,
            [
                (c_sum[0] / w_sum) as f32,
                (c_sum[1] / w_sum) as f32,
                (c_sum[2] / w_sum) as f32,
            ],
        ))
    }

    /// Fuse one posed depth map (with optional color) into the volume.
    ///
    /// For every voxel center within the truncation band of an observed
    /// surface along its camera ray, the projective signed distance is
    /// clamped, normalized, and folded into the running average:
    /// `D <- (W*D + d)/(W + 1)`, `W <- min(W + 1, 64)`. Voxels farther than
    /// one truncation behind the surface are untouched, and blocks are only
    /// allocated where at least one voxel receives an update.
    pub fn integrate(
        &mut self,
        depth: &DepthMap,
        color: Option<&ImageFrame>,
        pose: &PoseSE3,
        intr: &CameraIntrinsics,
    ) -> Result<(), TsdfError> {
        if depth.width() != intr.width || depth.height() != intr.height {
            return Err(TsdfError::ResolutionMismatch(
                depth.width(),
                depth.height(),
                intr.width,
                intr.height,
            ));
        }
        if let Some(img) = color {
            if img.width() != intr.width || img.height() != intr.height {
                return Err(TsdfError::ResolutionMismatch(
                    img.width(),
                    img.height(),
                    intr.width,
                    intr.height,
                ));
            }
        }

        let trunc = self.cfg.truncation;
        let block_w = self.cfg.voxel_size * BLOCK_SIDE as f64;
        // Candidate blocks: sample each valid pixel's ray across the
        // truncation band at block granularity, dilated by one block so
        // voxel centers near block faces are not missed.
        let mut touched: HashSet<BlockCoord> = HashSet::new();
        let band_samples = (2.0 * trunc / block_w).ceil() as usize + 1;
        for y in 0..depth.height() {
            for x in 0..depth.width() {
                if !depth.valid.at(x, y) {
                    continue;
                }
                let d = depth.depth.at(x, y);
                let ray = intr.ray(x as f64, y as f64);
                for s in 0..=band_samples {
                    let t = d - trunc + 2.0 * trunc * s as f64 / band_samples as f64;
                    if t <= 0.0 {
                        continue;
                    }
                    let p = pose.transform(ray * t);
                    let center = self.block_coord(p);
                    for dz in -1..=1i64 {
                        for dy in -1..=1i64 {
                            for dx in -1..=1i64 {
                                touched.insert(BlockCoord([
                                    center.0[0] + dx,
                                    center.0[1] + dy,
                                    center.0[2] + dz,
                                ]));
                            }
                        }
                    }
                }
            }
        }

        let mut coords: Vec<BlockCoord> = touched.into_iter().collect();
        coords.sort();
        let world_to_cam = pose.inverse();

        // Each block is updated independently (one owner per block), then the
        // results are merged sequentially, so the outcome is deterministic
        // regardless of worker count.
        let updated: Vec<(BlockCoord, VoxelBlock)> = coords
            .par_iter()
            .filter_map(|&coord| {
                let mut block = self
                    .blocks
                    .get(&coord)
                    .cloned()
                    .unwrap_or_else(VoxelBlock::empty);
                let mut any = false;
                for vz in 0..BLOCK_SIDE {
                    for vy in 0..BLOCK_SIDE {
                        for vx in 0..BLOCK_SIDE {
                            let global = [
                                coord.0[0] * BLOCK_SIDE as i64 + vx as i64,
                                coord.0[1] * BLOCK_SIDE as i64 + vy as i64,
                                coord.0[2] * BLOCK_SIDE as i64 + vz as i64,
                            ];
                            let p_cam = world_to_cam.transform(self.voxel_center(global));
                            if p_cam.z <= 0.0 {
                                continue;
                            }
                            let u = intr.fx * p_cam.x / p_cam.z + intr.cx;
                            let v = intr.fy * p_cam.y / p_cam.z + intr.cy;
                            let (px, py) = (u.round(), v.round());
                            if !intr.contains(px, py) {
                                continue;
                            }
                            let (px, py) = (px as usize, py as usize);
                            if !depth.valid.at(px, py) {
                                continue;
                            }
                            let sdf = depth.depth.at(px, py) - p_cam.z;
                            if sdf < -trunc {
                                continue;
                            }
                            let d_norm = (sdf.clamp(-trunc, trunc) / trunc) as f64;
                            let c = match color {
                                Some(img) => match &img.rgb {
                                    Some(rgb) => rgb.at(px, py),
                                    None => {
                                        let g = img.intensity.at(px, py) as f32;
                                        [g, g, g]
                                    }
                                },
                                None => [0.5; 3],
                            };
                            let vox = block.at_mut(vx, vy, vz);
                            let w = vox.w as f64;
                            vox.d = ((w * vox.d as f64 + d_norm) / (w + 1.0)) as f32;
                            for k in 0..3 {
                                vox.c[k] = ((w * vox.c[k] as f64 + c[k] as f64) / (w + 1.0)) as f32;
                            }
                            vox.w = (w + 1.0).min(MAX_WEIGHT) as f32;
                            any = true;
                        }
                    }
                }
                (any || self.blocks.contains_key(&coord)).then_some((coord, block))
            })
            .collect();

        for (coord, block) in updated {
            self.blocks.insert(coord, block);
        }
        Ok(())
    }

    /// Render a depth (and color) map by marching each pixel ray to the
    /// first positive-to-negative zero crossing of the signed distance.
    ///
    /// Rays step by half the truncation through unobserved space and by one
    /// voxel inside observed space; the crossing is refined by linear
    /// interpolation of the two bracketing samples. Rays that enter negative
    /// distance straight from unobserved space (back faces, occluded entry)
    /// give invalid pixels.
    pub fn raycast(
        &self,
        pose: &PoseSE3,
        intr: &CameraIntrinsics,
    ) -> (DepthMap, Grid<[f32; 3]>) {
        let (w, h) = (intr.width, intr.height);
        let origin = pose.translation();
        let rot = *pose.rotation();
        let coarse = 0.5 * self.cfg.truncation;
        let fine = self.cfg.voxel_size;

        let rows: Vec<Vec<(f64, [f32; 3])>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::with_capacity(w);
                for x in 0..w {
                    // Direction with unit z in camera frame, so the march
                    // parameter is the camera z-depth directly.
                    let dir = rot * intr.ray(x as f64, y as f64);
                    let mut t = self.cfg.near;
                    let mut prev: Option<(f64, f64)> = None;
                    let mut hit = (0.0, [0.0f32; 3]);
                    while t < self.cfg.max_range {
                        match self.sample(origin + dir * t) {
                            Some((d, _)) => {
                                if let Some((tp, dp)) = prev {
                                    if dp > 0.0 && d <= 0.0 {
                                        let tc = tp + (t - tp) * dp / (dp - d);
                                        let color = self
                                            .sample(origin + dir * tc)
                                            .map(|(_, c)| c)
                                            .unwrap_or([0.0; 3]);
                                        hit = (tc, color);
                                        break;
                                    }
                                }
                                if d <= 0.0 && prev.is_none() {
                                    // Entered the back side from unobserved
                                    // space: ambiguous, give up on this ray.
                                    break;
                                }
                                prev = Some((t, d));
                                t += fine;
                            }
                            None => {
                                prev = None;
                                t += coarse;
                            }
                        }
                    }
                    row.push(hit);
                }
                row
            })
            .collect();

        let mut depth = Grid::filled(w, h, 0.0);
        let mut valid = Grid::filled(w, h, false);
        let mut color = Grid::filled(w, h, [0.0f32; 3]);
        for (y, row) in rows.iter().enumerate() {
            for (x, &(d, c)) in row.iter().enumerate() {
                if d > 0.0 {
                    depth.set(x, y, d);
                    valid.set(x, y, true);
                    color.set(x, y, c);
                }
            }
        }
        (DepthMap::new(depth, valid), color)
    }
}

/// Triangle mesh with per-vertex color.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<MeshVertex>,
    pub faces: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, Copy)]
pub struct MeshVertex {
    pub position: Vector3<f64>,
    pub color: [f32; 3],
}

// Marching-cubes corner layout (Bourke): corners 0-3 on the z = 0 face
// counterclockwise, 4-7 above them.
const CORNER_OFFSETS: [[i64; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGE_CONNECTIONS: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

include!("mc_tables.rs");

/// Extract the zero isosurface over allocated blocks with marching cubes.
/// Only cells whose eight corner voxels are all observed are polygonized;
/// vertices sit on cell edges at the linear zero crossing and carry
/// interpolated color.
pub fn extract_mesh(vol: &HashedTsdfVolume) -> TriangleMesh {
    let coords = vol.block_coords();
    // Each cell is owned by the block containing its base corner; corner
    // lookups cross into neighbor blocks as needed.
    let per_block: Vec<TriangleMesh> = coords
        .par_iter()
        .map(|&coord| {
            let mut mesh = TriangleMesh::default();
            for cz in 0..BLOCK_SIDE as i64 {
                for cy in 0..BLOCK_SIDE as i64 {
                    for cx in 0..BLOCK_SIDE as i64 {
                        let base = [
                            coord.0[0] * BLOCK_SIDE as i64 + cx,
                            coord.0[1] * BLOCK_SIDE as i64 + cy,
                            coord.0[2] * BLOCK_SIDE as i64 + cz,
                        ];
                        polygonize_cell(vol, base, &mut mesh);
                    }
                }
            }
            mesh
        })
        .collect();

    let mut out = TriangleMesh::default();
    for mesh in per_block {
        let offset = out.vertices.len() as u32;
        out.vertices.extend(mesh.vertices);
        out.faces
            .extend(mesh.faces.iter().map(|f| f.map(|i| i + offset)));
    }
    out
}

fn polygonize_cell(vol: &HashedTsdfVolume, base: [i64; 3], mesh: &mut TriangleMesh) {
    let mut values = [0.0f64; 8];
    let mut colors = [[0.0f32; 3]; 8];
    for (i, off) in CORNER_OFFSETS.iter().enumerate() {
        match vol.voxel_at([base[0] + off[0], base[1] + off[1], base[2] + off[2]]) {
            Some(v) if v.w > 0.0 => {
                values[i] = v.d as f64;
                colors[i] = v.c;
            }
            _ => return,
        }
    }
    let mut cube_index = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v < 0.0 {
            cube_index |= 1 << i;
        }
    }
    if cube_index == 0 || cube_index == 255 {
        return;
    }

    let mut edge_vertices = [u32::MAX; 12];
    for (edge, &[a, b]) in EDGE_CONNECTIONS.iter().enumerate() {
        if (values[a] < 0.0) == (values[b] < 0.0) {
            continue;
        }
        let t = if (values[b] - values[a]).abs() < 1e-12 {
            0.5
        } else {
            values[a] / (values[a] - values[b])
        };
        let pa = vol.voxel_center([
            base[0] + CORNER_OFFSETS[a][0],
            base[1] + CORNER_OFFSETS[a][1],
            base[2] + CORNER_OFFSETS[a][2],
        ]);
        let pb = vol.voxel_center([
            base[0] + CORNER_OFFSETS[b][0],
            base[1] + CORNER_OFFSETS[b][1],
            base[2] + CORNER_OFFSETS[b][2],
        ]);
        let mut color = [0.0f32; 3];
        for k in 0..3 {
            color[k] = (colors[a][k] as f64 * (1.0 - t) + colors[b][k] as f64 * t) as f32;
        }
        edge_vertices[edge] = mesh.vertices.len() as u32;
        mesh.vertices.push(MeshVertex {
            position: pa + (pb - pa) * t,
            color,
        });
    }

    let tri = &TRIANGLE_TABLE[cube_index];
    let mut i = 0;
    while i + 2 < tri.len() && tri[i] != -1 {
        let (a, b, c) = (
            edge_vertices[tri[i] as usize],
            edge_vertices[tri[i + 1] as usize],
            edge_vertices[tri[i + 2] as usize],
        );
        if a != u32::MAX && b != u32::MAX && c != u32::MAX {
            mesh.faces.push([a, b, c]);
        }
        i += 3;
    }
}

/// Binary little-endian PLY with per-vertex 8-bit color.
pub fn write_mesh_ply(path: &Path, mesh: &TriangleMesh) -> Result<(), TsdfError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    for v in &mesh.vertices {
        for k in 0..3 {
            w.write_all(&(v.position[k] as f32).to_le_bytes())?;
        }
        for k in 0..3 {
            w.write_all(&[(v.color[k].clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
    }
    for f in &mesh.faces {
        w.write_all(&[3u8])?;
        for &i in f {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"TSDFSNP1";

/// Block-sparse binary dump of the volume (blocks in sorted coordinate
/// order, so identical volumes produce identical bytes).
pub fn save_snapshot(path: &Path, vol: &HashedTsdfVolume) -> Result<(), TsdfError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&vol.cfg.voxel_size.to_le_bytes())?;
    w.write_all(&vol.cfg.truncation.to_le_bytes())?;
    let coords = vol.block_coords();
    w.write_all(&(coords.len() as u64).to_le_bytes())?;
    for coord in coords {
        for k in 0..3 {
            w.write_all(&coord.0[k].to_le_bytes())?;
        }
        let block = &vol.blocks[&coord];
        for v in &block.voxels {
            w.write_all(&v.d.to_le_bytes())?;
            for k in 0..3 {
                w.write_all(&v.c[k].to_le_bytes())?;
            }
            w.write_all(&v.w.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<HashedTsdfVolume, TsdfError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(TsdfError::Snapshot("bad magic".into()));
    }
    let mut f64buf = [0u8; 8];
    r.read_exact(&mut f64buf)?;
    let voxel_size = f64::from_le_bytes(f64buf);
    r.read_exact(&mut f64buf)?;
    let truncation = f64::from_le_bytes(f64buf);
    r.read_exact(&mut f64buf)?;
    let n_blocks = u64::from_le_bytes(f64buf);
    let mut vol = HashedTsdfVolume::new(TsdfConfig {
        voxel_size,
        truncation,
        ..TsdfConfig::default()
    })?;
    let mut f32buf = [0u8; 4];
    for _ in 0..n_blocks {
        let mut coord = [0i64; 3];
        for c in &mut coord {
            r.read_exact(&mut f64buf)?;
            *c = i64::from_le_bytes(f64buf);
        }
        let mut block = VoxelBlock::empty();
        for v in &mut block.voxels {
            r.read_exact(&mut f32buf)?;
            v.d = f32::from_le_bytes(f32buf);
            for k in 0..3 {
                r.read_exact(&mut f32buf)?;
                v.c[k] = f32::from_le_bytes(f32buf);
            }
            r.read_exact(&mut f32buf)?;
            v.w = f32::from_le_bytes(f32buf);
        }
        vol.blocks.insert(BlockCoord(coord), block);
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoseSE3;
    use approx::assert_relative_eq;

    fn flat_depth(w: usize, h: usize, d: f64) -> DepthMap {
        DepthMap::from_grid(Grid::filled(w, h, d))
    }

    fn test_intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 15.5, 11.5, 32, 24).unwrap()
    }

    #[test]
    fn block_coord_floor_semantics() {
        let vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        assert_eq!(
            vol.block_coord(Vector3::zeros()),
            BlockCoord([0, 0, 0])
        );
        assert_eq!(
            vol.block_coord(Vector3::new(-0.001, 0.0, 0.0)),
            BlockCoord([-1, 0, 0])
        );
        // Exactly one block width lands in the next block.
        assert_eq!(
            vol.block_coord(Vector3::new(0.08, 0.0, 0.0)),
            BlockCoord([1, 0, 0])
        );
    }

    #[test]
    fn truncation_must_cover_four_voxels() {
        let cfg = TsdfConfig {
            voxel_size: 0.05,
            truncation: 0.1,
            ..TsdfConfig::default()
        };
        assert!(matches!(
            HashedTsdfVolume::new(cfg),
            Err(TsdfError::BadConfig(_))
        ));
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        let depth = flat_depth(16, 16, 1.0);
        let err = vol.integrate(&depth, None, &PoseSE3::identity(), &test_intr());
        assert!(matches!(err, Err(TsdfError::ResolutionMismatch(..))));
    }

    /// Find the global coordinate of an updated voxel whose center sits
    /// (approximately) on the optical axis at the given depth.
    fn on_axis_voxel(vol: &HashedTsdfVolume, z: f64) -> [i64; 3] {
        let vs = vol.voxel_size();
        [
            (0.0f64 / vs - 0.5).round() as i64,
            (0.0f64 / vs - 0.5).round() as i64,
            (z / vs - 0.5).round() as i64,
        ]
    }

    #[test]
    fn surface_voxel_gets_zero_distance() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        // Depth chosen so a voxel center lies exactly on the surface:
        // z = (i + 0.5) * 0.01 with i = 99.
        let depth = flat_depth(32, 24, 0.995);
        vol.integrate(&depth, None, &PoseSE3::identity(), &test_intr())
            .unwrap();
        let v = vol.voxel_at(on_axis_voxel(&vol, 0.995)).unwrap();
        assert_eq!(v.w, 1.0);
        assert!(v.d.abs() < 1e-6, "d = {}", v.d);
    }

    #[test]
    fn weight_law_min_k_64() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        let depth = flat_depth(32, 24, 0.995);
        let coord = on_axis_voxel(&vol, 0.995);
        let intr = test_intr();
        let mut checkpoints = std::collections::HashMap::new();
        for k in 1..=200usize {
            vol.integrate(&depth, None, &PoseSE3::identity(), &intr)
                .unwrap();
            if [1, 63, 64, 200].contains(&k) {
                checkpoints.insert(k, vol.voxel_at(coord).unwrap().w);
            }
        }
        assert_eq!(checkpoints[&1], 1.0);
        assert_eq!(checkpoints[&63], 63.0);
        assert_eq!(checkpoints[&64], 64.0);
        assert_eq!(checkpoints[&200], 64.0);
    }

    #[test]
    fn constant_input_leaves_distance_unchanged() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        let depth = flat_depth(32, 24, 1.0);
        let intr = test_intr();
        vol.integrate(&depth, None, &PoseSE3::identity(), &intr)
            .unwrap();
        let coord = on_axis_voxel(&vol, 1.0);
        let d_first = vol.voxel_at(coord).unwrap().d as f64;
        for _ in 0..99 {
            vol.integrate(&depth, None, &PoseSE3::identity(), &intr)
                .unwrap();
        }
        let d_after = vol.voxel_at(coord).unwrap().d as f64;
        assert!((d_after - d_first).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_running_average() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        let intr = test_intr();
        // Two depths spaced so the on-axis voxel at z = 0.995 stays inside
        // both truncation bands: d_proj = +0.03 then -0.03.
        let coord = on_axis_voxel(&vol, 0.995);
        vol.integrate(&flat_depth(32, 24, 1.025), None, &PoseSE3::identity(), &intr)
            .unwrap();
        let a = vol.voxel_at(coord).unwrap().d as f64;
        vol.integrate(&flat_depth(32, 24, 0.965), None, &PoseSE3::identity(), &intr)
            .unwrap();
        let b = vol.voxel_at(coord).unwrap().d as f64;
        assert_relative_eq!(a, 0.3, epsilon = 1e-6);
        assert_relative_eq!(b, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn fusion_permutation_invariant_before_cap() {
        let intr = test_intr();
        let depths = [
            flat_depth(32, 24, 0.97),
            flat_depth(32, 24, 1.0),
            flat_depth(32, 24, 1.03),
        ];
        let fuse = |order: &[usize]| {
            let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
            for &i in order {
                vol.integrate(&depths[i], None, &PoseSE3::identity(), &intr)
                    .unwrap();
            }
            vol
        };
        let a = fuse(&[0, 1, 2]);
        let b = fuse(&[2, 0, 1]);
        assert_eq!(a.block_coords(), b.block_coords());
        for coord in a.block_coords() {
            let (ba, bb) = (a.block(coord).unwrap(), b.block(coord).unwrap());
            for (va, vb) in ba.voxels.iter().zip(&bb.voxels) {
                assert_eq!(va.w, vb.w);
                assert!((va.d - vb.d).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn planar_scene_allocation_is_sparse() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        let depth = flat_depth(32, 24, 1.0);
        vol.integrate(&depth, None, &PoseSE3::identity(), &test_intr())
            .unwrap();
        let block_w = vol.voxel_size() * BLOCK_SIDE as f64;
        let margin = vol.truncation() + block_w * 3f64.sqrt();
        for coord in vol.block_coords() {
            // Any voxel center in the block must be able to reach the plane
            // z = 1 within truncation + one block diagonal.
            let z_lo = coord.0[2] as f64 * block_w;
            let z_hi = z_lo + block_w;
            assert!(
                z_lo <= 1.0 + margin && z_hi >= 1.0 - margin,
                "block {coord:?} too far from surface"
            );
        }
    }

    #[test]
    fn empty_volume_raycasts_invalid_and_meshes_empty() {
        let vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        let (depth, _) = vol.raycast(&PoseSE3::identity(), &test_intr());
        assert_eq!(depth.valid_count(), 0);
        let mesh = extract_mesh(&vol);
        assert!(mesh.vertices.is_empty() && mesh.faces.is_empty());
    }

    #[test]
    fn flat_plane_round_trip() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        let intr = test_intr();
        let depth = flat_depth(32, 24, 1.0);
        vol.integrate(&depth, None, &PoseSE3::identity(), &intr)
            .unwrap();
        let (cast, _) = vol.raycast(&PoseSE3::identity(), &intr);
        let mut errs: Vec<f64> = Vec::new();
        for y in 0..cast.height() {
            for x in 0..cast.width() {
                if cast.valid.at(x, y) {
                    errs.push((cast.depth.at(x, y) - 1.0).abs());
                }
            }
        }
        assert!(errs.len() > 32 * 24 / 2, "only {} valid", errs.len());
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = errs[errs.len() * 95 / 100];
        assert!(p95 < 2.0 * vol.voxel_size(), "p95 = {p95}");
    }

    #[test]
    fn mesh_vertices_appear_after_integration() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        vol.integrate(
            &flat_depth(32, 24, 1.0),
            None,
            &PoseSE3::identity(),
            &test_intr(),
        )
        .unwrap();
        let mesh = extract_mesh(&vol);
        assert!(!mesh.vertices.is_empty());
        assert!(!mesh.faces.is_empty());
        // All faces index real vertices.
        for f in &mesh.faces {
            for &i in f {
                assert!((i as usize) < mesh.vertices.len());
            }
        }
        // Mesh vertices lie on the fused plane.
        for v in &mesh.vertices {
            assert!((v.position.z - 1.0).abs() < 2.0 * vol.voxel_size());
        }
    }

    #[test]
    fn snapshot_round_trip_bitwise() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        vol.integrate(
            &flat_depth(32, 24, 1.0),
            None,
            &PoseSE3::identity(),
            &test_intr(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tsdf");
        let p2 = dir.path().join("b.tsdf");
        save_snapshot(&p1, &vol).unwrap();
        let back = load_snapshot(&p1).unwrap();
        save_snapshot(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back.allocated_blocks(), vol.allocated_blocks());
    }

    #[test]
    fn ply_export_has_expected_sizes() {
        let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
        vol.integrate(
            &flat_depth(32, 24, 1.0),
            None,
            &PoseSE3::identity(),
            &test_intr(),
        )
        .unwrap();
        let mesh = extract_mesh(&vol);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.ply");
        write_mesh_ply(&path, &mesh).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes
            .windows(11)
            .position(|w| w == b"end_header\n")
            .unwrap()
            + 11;
        let expected = header_end + mesh.vertices.len() * 15 + mesh.faces.len() * 13;
        assert_eq!(bytes.len(), expected);
        assert!(bytes.starts_with(b"ply\nformat binary_little_endian 1.0\n"));
    }
}
