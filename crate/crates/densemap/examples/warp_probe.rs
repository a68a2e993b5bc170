use densemap::geometry::{relative_pose, CameraIntrinsics};
use densemap::mvs::*;
use densemap::synth::{orbit_trajectory, render, Primitive, SyntheticScene};
use nalgebra::Vector3;

fn main() {
    let scene = SyntheticScene::new(
        vec![
            Primitive::Plane { origin: Vector3::new(0.0, 0.0, 0.0), normal: Vector3::new(0.0, 0.0, 1.0), half_extent: Some(4.0) },
            Primitive::Plane { origin: Vector3::new(0.0, -1.2, 0.0), normal: Vector3::new(0.0, 1.0, 0.0), half_extent: Some(4.0) },
            Primitive::Sphere { center: Vector3::new(0.0, -0.4, 0.6), radius: 0.45 },
        ],
        2024,
    ).unwrap();
    let full = CameraIntrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).unwrap();
    let intr = full.half_resolution().half_resolution();
    let poses = orbit_trajectory(&scene, 40, 2.5, 0.25, 9);
    let wposes = &poses[0..7];
    let ref_pose = wposes[6];
    let cfg = MvsConfig::default();
    let hyp = hypotheses_stage1(&cfg, intr.height, intr.width);
    let (px, py) = (40usize, 30usize);
    // Render intensity at quarter res to report what is sampled.
    let frames: Vec<_> = wposes.iter().map(|p| render(&scene, p, &intr).0).collect();
    for d in [9usize, 20, 30, 47] {
        let depth = hyp.at(d, py, px);
        println!("plane d={d} depth={depth:.3}");
        let p_ref = intr.ray(px as f64, py as f64) * depth;
        for (i, p) in wposes.iter().enumerate() {
            let t_rel = relative_pose(p, &ref_pose);
            let q = t_rel.transform(p_ref);
            if q.z <= 0.0 { println!("  view {i}: behind"); continue; }
            let u = intr.fx * q.x / q.z + intr.cx;
            let v = intr.fy * q.y / q.z + intr.cy;
            let inside = intr.contains(u, v);
            let val = if inside { frames[i].intensity.sample_bilinear(u, v).unwrap_or(-1.0) } else { -1.0 };
            println!("  view {i}: uv=({u:7.2},{v:7.2}) inside={inside} I={val:.4}");
        }
    }
}
