//! Camera models, rigid and similarity transforms, and the closed-form
//! alignment solver used by the evaluation harness.
//!
//! All depths and translations are in meters. Pixels use continuous
//! coordinates with the pixel-center convention: an integer coordinate is
//! the center of that pixel.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("rotation angle too close to pi for a stable logarithm")]
    NearSingularRotation,
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

/// Pinhole camera intrinsics for a rectified image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if width < 8 || height < 8 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "image size must be at least 8x8, got {width}x{height}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64 && 0.0 <= cy && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Project a camera-frame point. Returns the pixel and the depth along
    /// the optical axis.
    pub fn project(&self, p: Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
        if p.z <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        Ok((Vector2::new(u, v), p.z))
    }

    /// Back-project a pixel at a given depth into the camera frame.
    pub fn unproject(&self, pixel: Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if depth <= 0.0 {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    /// Unit-depth ray direction through a pixel (z component is 1).
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Intrinsics of the 2x area-downsampled image. With pixel centers at
    /// integer coordinates, full-res coordinate u maps to (u - 0.5) / 2.
    pub fn half_resolution(&self) -> Self {
        Self {
            fx: self.fx * 0.5,
            fy: self.fy * 0.5,
            cx: (self.cx - 0.5) * 0.5,
            cy: (self.cy - 0.5) * 0.5,
            width: self.width / 2,
            height: self.height / 2,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }
}

/// Rigid transform in SE(3), stored as a rotation matrix plus translation.
///
/// The rotation is kept orthonormal by re-orthonormalizing (nearest rotation
/// via polar decomposition) whenever a composition chain exceeds
/// [`RENORMALIZE_CHAIN_LIMIT`] multiplies.
#[derive(Debug, Clone, Copy)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    chain: u32,
}

pub const RENORMALIZE_CHAIN_LIMIT: u32 = 64;

impl PartialEq for PoseSE3 {
    fn eq(&self, other: &Self) -> bool {
        self.rotation == other.rotation && self.translation == other.translation
    }
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            chain: 0,
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            chain: 0,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let mut out = PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            chain: self.chain.max(other.chain) + 1,
        };
        if out.chain > RENORMALIZE_CHAIN_LIMIT {
            out.rotation = nearest_rotation(&out.rotation);
            out.chain = 0;
        }
        out
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
            chain: self.chain,
        }
    }
}

/// Nearest rotation matrix in the Frobenius sense, via SVD polar
/// decomposition with the determinant sign fixed to +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// The relative pose mapping points from `tj`'s frame into `ti`'s frame:
/// `ti^-1 * tj`.
pub fn relative_pose(ti: &PoseSE3, tj: &PoseSE3) -> PoseSE3 {
    ti.inverse().compose(tj)
}

fn skew(w: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map. Twist layout: `(wx, wy, wz, vx, vy, vz)` with the
/// rotational part first.
pub fn se3_exp(twist: Vector6<f64>) -> PoseSE3 {
    let w = Vector3::new(twist[0], twist[1], twist[2]);
    let v = Vector3::new(twist[3], twist[4], twist[5]);
    let theta = w.norm();
    let wx = skew(w);
    let (rotation, v_mat) = if theta < 1e-9 {
        // Second-order Taylor expansion around zero rotation.
        (
            Matrix3::identity() + wx + 0.5 * wx * wx,
            Matrix3::identity() + 0.5 * wx + wx * wx / 6.0,
        )
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        let c = (1.0 - a) / t2;
        (
            Matrix3::identity() + a * wx + b * wx * wx,
            Matrix3::identity() + b * wx + c * wx * wx,
        )
    };
    PoseSE3::from_parts(rotation, v_mat * v)
}

/// Logarithmic map, inverse of [`se3_exp`]. Fails near rotation angle pi.
pub fn se3_log(pose: &PoseSE3) -> Result<Vector6<f64>, GeometryError> {
    let r = pose.rotation;
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(GeometryError::NearSingularRotation);
    }
    let w = if theta < 1e-9 {
        Vector3::new(
            0.5 * (r[(2, 1)] - r[(1, 2)]),
            0.5 * (r[(0, 2)] - r[(2, 0)]),
            0.5 * (r[(1, 0)] - r[(0, 1)]),
        )
    } else {
        let s = theta / (2.0 * theta.sin());
        Vector3::new(
            s * (r[(2, 1)] - r[(1, 2)]),
            s * (r[(0, 2)] - r[(2, 0)]),
            s * (r[(1, 0)] - r[(0, 1)]),
        )
    };
    let wx = skew(w);
    let v_inv = if theta < 1e-9 {
        Matrix3::identity() - 0.5 * wx + wx * wx / 12.0
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        Matrix3::identity() - 0.5 * wx + (1.0 / t2) * (1.0 - a / (2.0 * b)) * wx * wx
    };
    let v = v_inv * pose.translation;
    Ok(Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z))
}

/// Similarity transform: `p -> scale * R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rigid: PoseSE3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rigid: PoseSE3::identity(),
        }
    }

    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rigid.rotation() * p) + self.rigid.translation()
    }
}

fn check_alignment_input(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(), GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateConfiguration(
            "point lists differ in length",
        ));
    }
    if src.len() < 3 {
        return Err(GeometryError::DegenerateConfiguration(
            "need at least 3 point pairs",
        ));
    }
    Ok(())
}

/// Closed-form least-squares similarity alignment (Umeyama):
/// `argmin over Sim(3) of sum ||dst_i - s R src_i - t||^2`.
pub fn align_umeyama_sim3(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<Sim3, GeometryError> {
    umeyama(src, dst, true)
}

/// SE(3) alignment variant: Umeyama with the scale clamped to 1 and the
/// translation re-solved for the rigid model.
pub fn align_umeyama_se3(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<Sim3, GeometryError> {
    umeyama(src, dst, false)
}

fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<Sim3, GeometryError> {
    check_alignment_input(src, dst)?;
    let n = src.len() as f64;
    let mean_src: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mean_dst: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mean_src;
        let dc = d - mean_dst;
        cov += dc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let sv = svd.singular_values;
    // Rank must be at least 2 for a unique rotation (collinear or
    // coincident clouds are rejected).
    if sv[1] <= 1e-12 * sv[0].max(1e-300) || var_src <= 1e-24 {
        return Err(GeometryError::DegenerateConfiguration(
            "points are collinear or coincident",
        ));
    }
    let mut s_fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s_fix[(2, 2)] = -1.0;
    }
    let rotation = u * s_fix * vt;
    let scale = if with_scale {
        (sv[0] + sv[1] + sv[2] * s_fix[(2, 2)]) / var_src
    } else {
        1.0
    };
    let translation = mean_dst - scale * (rotation * mean_src);
    Ok(Sim3 {
        scale,
        rigid: PoseSE3::from_parts(rotation, translation),
    })
}

/// A timestamped pose sequence. Poses are camera-to-world.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<(f64, PoseSE3)>,
}

impl Trajectory {
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.samples.iter().map(|(_, p)| p.translation()).collect()
    }
}

/// Read a trajectory in the TUM text convention: one line per pose,
/// `timestamp tx ty tz qx qy qz qw`, `#` comment lines ignored.
pub fn read_tum_trajectory(path: &Path) -> Result<Trajectory, TrajectoryError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let err = |msg: String| TrajectoryError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", fields.len())));
        }
        let mut vals = [0.0f64; 8];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f
                .parse()
                .map_err(|e| err(format!("bad number {f:?}: {e}")))?;
        }
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            vals[7], vals[4], vals[5], vals[6],
        ));
        let pose = PoseSE3::from_parts(
            q.to_rotation_matrix().into_inner(),
            Vector3::new(vals[1], vals[2], vals[3]),
        );
        samples.push((vals[0], pose));
    }
    Ok(Trajectory { samples })
}

/// Write a trajectory in the TUM text convention.
pub fn write_tum_trajectory(path: &Path, traj: &Trajectory) -> Result<(), TrajectoryError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# timestamp tx ty tz qx qy qz qw")?;
    for (ts, pose) in &traj.samples {
        let q = UnitQuaternion::from_matrix(pose.rotation());
        let t = pose.translation();
        writeln!(
            file,
            "{ts:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_pose(rng: &mut StdRng, max_angle: f64) -> PoseSE3 {
        let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            .normalize();
        let angle = rng.gen::<f64>() * max_angle;
        let w = axis * angle;
        let v = Vector3::new(
            rng.gen::<f64>() * 4.0 - 2.0,
            rng.gen::<f64>() * 4.0 - 2.0,
            rng.gen::<f64>() * 4.0 - 2.0,
        );
        se3_exp(Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z))
    }

    #[test]
    fn project_on_axis() {
        let intr = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 8, 8).unwrap();
        let (px, d) = intr.project(Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
        assert_eq!(d, 1.0);
    }

    #[test]
    fn project_hand_example() {
        let intr = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        let (px, d) = intr.project(Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vector2::new(620.0, 240.0));
        assert_eq!(d, 2.0);
    }

    #[test]
    fn project_rejects_non_positive_depth() {
        let intr = CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0, 640, 480).unwrap();
        assert!(matches!(
            intr.project(Vector3::new(0.0, 0.0, 0.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(matches!(
            intr.project(Vector3::new(1.0, 1.0, -2.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(matches!(
            intr.unproject(Vector2::new(1.0, 1.0), 0.0),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn unproject_principal_point() {
        let intr = CameraIntrinsics::new(600.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let p = intr.unproject(Vector2::new(320.0, 240.0), 3.5).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 3.5));
    }

    #[test]
    fn project_unproject_roundtrip() {
        let intr = CameraIntrinsics::new(520.0, 480.0, 321.5, 239.5, 640, 480).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let px = Vector2::new(
                rng.gen::<f64>() * 639.0,
                rng.gen::<f64>() * 479.0,
            );
            let d = rng.gen::<f64>() * 9.9 + 0.1;
            let p = intr.unproject(px, d).unwrap();
            let (px2, d2) = intr.project(p).unwrap();
            assert_relative_eq!(px2.x, px.x, max_relative = 1e-12, epsilon = 1e-10);
            assert_relative_eq!(px2.y, px.y, max_relative = 1e-12, epsilon = 1e-10);
            assert_relative_eq!(d2, d, max_relative = 1e-12);
        }
    }

    #[test]
    fn relative_pose_identities() {
        let mut rng = StdRng::seed_from_u64(3);
        let t = random_pose(&mut rng, 2.0);
        let rel = relative_pose(&t, &t);
        assert!(rel.translation().norm() < 1e-12);
        assert!((rel.rotation() - Matrix3::identity()).abs().max() < 1e-12);

        let id = PoseSE3::identity();
        let rel = relative_pose(&id, &t);
        assert_eq!(rel.translation(), t.translation());
    }

    #[test]
    fn relative_pose_property() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let ti = random_pose(&mut rng, 2.0);
            let tj = random_pose(&mut rng, 2.0);
            let rel = relative_pose(&ti, &tj);
            let back = ti.compose(&rel);
            assert!((back.rotation() - tj.rotation()).abs().max() < 1e-12);
            assert!((back.translation() - tj.translation()).norm() < 1e-11);
        }
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = random_pose(&mut rng, 3.0);
            let twist = se3_log(&t).unwrap();
            let t2 = se3_exp(twist);
            assert!((t2.rotation() - t.rotation()).abs().max() < 1e-10);
            assert!((t2.translation() - t.translation()).norm() < 1e-10);
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = se3_exp(Vector6::zeros());
        assert_eq!(t, PoseSE3::identity());
    }

    #[test]
    fn exp_pure_translation() {
        let t = se3_exp(Vector6::new(0.0, 0.0, 0.0, 1.0, 2.0, 3.0));
        assert!((t.rotation() - Matrix3::identity()).abs().max() < 1e-15);
        assert_eq!(t.translation(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn log_near_pi_fails() {
        let t = se3_exp(Vector6::new(std::f64::consts::PI - 1e-9, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(matches!(se3_log(&t), Err(GeometryError::NearSingularRotation)));
    }

    #[test]
    fn composition_chain_stays_orthonormal() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut acc = PoseSE3::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&random_pose(&mut rng, 0.5));
        }
        let r = acc.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        assert!(err < 1e-8, "orthonormality drift {err}");
    }

    #[test]
    fn umeyama_identity() {
        let mut rng = StdRng::seed_from_u64(23);
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let sim = align_umeyama_sim3(&pts, &pts).unwrap();
        assert_relative_eq!(sim.scale, 1.0, epsilon = 1e-12);
        assert!(sim.rigid.translation().norm() < 1e-12);
        assert!((sim.rigid.rotation() - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn umeyama_recovers_known_sim3() {
        let mut rng = StdRng::seed_from_u64(29);
        let src: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::new(rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 2.0, rng.gen::<f64>() * 2.0))
            .collect();
        let truth = Sim3 {
            scale: 1.7,
            rigid: random_pose(&mut rng, 2.0),
        };
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| truth.transform(*p)).collect();
        let sim = align_umeyama_sim3(&src, &dst).unwrap();
        assert_relative_eq!(sim.scale, truth.scale, epsilon = 1e-9);
        assert!((sim.rigid.rotation() - truth.rigid.rotation()).abs().max() < 1e-9);
        assert!((sim.rigid.translation() - truth.rigid.translation()).norm() < 1e-9);
    }

    #[test]
    fn umeyama_rejects_degenerate() {
        let two = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        assert!(matches!(
            align_umeyama_sim3(&two, &two),
            Err(GeometryError::DegenerateConfiguration(_))
        ));
        let collinear: Vec<Vector3<f64>> =
            (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(
            align_umeyama_sim3(&collinear, &collinear),
            Err(GeometryError::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn umeyama_invariant_to_rigid_pretransform() {
        let mut rng = StdRng::seed_from_u64(31);
        let src: Vec<Vector3<f64>> = (0..60)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let truth = Sim3 {
            scale: 0.8,
            rigid: random_pose(&mut rng, 1.5),
        };
        let dst: Vec<Vector3<f64>> = src.iter().map(|p| truth.transform(*p)).collect();

        let residual = |src: &[Vector3<f64>], dst: &[Vector3<f64>]| {
            let sim = align_umeyama_sim3(src, dst).unwrap();
            src.iter()
                .zip(dst)
                .map(|(s, d)| (d - sim.transform(*s)).norm_squared())
                .sum::<f64>()
        };
        let base = residual(&src, &dst);

        let pre = random_pose(&mut rng, 1.0);
        let src2: Vec<Vector3<f64>> = src.iter().map(|p| pre.transform(*p)).collect();
        let dst2: Vec<Vector3<f64>> = dst.iter().map(|p| pre.transform(*p)).collect();
        let moved = residual(&src2, &dst2);
        assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn tum_trajectory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        let mut rng = StdRng::seed_from_u64(41);
        let traj = Trajectory {
            samples: (0..20)
                .map(|i| (i as f64 * 0.1, random_pose(&mut rng, 2.0)))
                .collect(),
        };
        write_tum_trajectory(&path, &traj).unwrap();
        let back = read_tum_trajectory(&path).unwrap();
        assert_eq!(back.samples.len(), traj.samples.len());
        for ((t1, p1), (t2, p2)) in traj.samples.iter().zip(&back.samples) {
            assert_relative_eq!(t1, t2, epsilon = 1e-6);
            assert!((p1.rotation() - p2.rotation()).abs().max() < 1e-7);
            assert!((p1.translation() - p2.translation()).norm() < 1e-8);
        }
    }

    #[test]
    fn tum_trajectory_bad_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.txt");
        std::fs::write(&path, "# header\n1.0 0 0 0 0 0 0\n").unwrap();
        match read_tum_trajectory(&path) {
            Err(TrajectoryError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
