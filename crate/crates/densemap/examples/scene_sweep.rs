use densemap::features::{extract_classical, FeatureConfig};
use densemap::geometry::CameraIntrinsics;
use densemap::mvs::*;
use densemap::synth::{orbit_arc_trajectory, render, Primitive, SyntheticScene};
use nalgebra::Vector3;

fn scene_a() -> SyntheticScene { // wall + grazing floor + sphere (current)
    SyntheticScene::new(vec![
        Primitive::Plane { origin: Vector3::new(0.0, 0.0, 0.0), normal: Vector3::new(0.0, 0.0, 1.0), half_extent: Some(4.0) },
        Primitive::Plane { origin: Vector3::new(0.0, -1.2, 0.0), normal: Vector3::new(0.0, 1.0, 0.0), half_extent: Some(4.0) },
        Primitive::Sphere { center: Vector3::new(0.0, -0.4, 0.6), radius: 0.45 },
    ], 2024).unwrap()
}

fn scene_b() -> SyntheticScene { // wall + tilted ramp + sphere
    SyntheticScene::new(vec![
        Primitive::Plane { origin: Vector3::new(0.0, 0.0, 0.0), normal: Vector3::new(0.0, 0.0, 1.0), half_extent: Some(4.0) },
        Primitive::Plane { origin: Vector3::new(0.0, -0.9, 0.4), normal: Vector3::new(0.0, 0.8, 0.6), half_extent: Some(3.0) },
        Primitive::Sphere { center: Vector3::new(0.3, -0.1, 0.7), radius: 0.4 },
    ], 2024).unwrap()
}

fn main() {
    let intr = CameraIntrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).unwrap();
    let feat_cfg = FeatureConfig::default();
    for (sname, scene) in [("A", scene_a()), ("B", scene_b())] {
        for arc_deg in [9.0f64, 12.0, 15.0] {
            for d_max in [10.0f64, 5.25] {
                let poses = orbit_arc_trajectory(&scene, 7, 2.5, arc_deg.to_radians(), 0.25, 9);
                let frames: Vec<WindowFrame> = poses.iter().map(|pose| {
                    let (image, _) = render(&scene, pose, &intr);
                    WindowFrame { image: image.clone(), pyramid: extract_classical(&image, &feat_cfg).unwrap(), pose: *pose }
                }).collect();
                let (_, gt) = render(&scene, &poses[6], &intr);
                let win = KeyframeWindow::new(frames, intr).unwrap();
                let cfg = MvsConfig { d_max, ..MvsConfig::default() };
                let result = cascade_estimate(&win, &cfg).unwrap();
                let est = &result.final_depth;
                let (mut n, mut abs_sum, mut a1) = (0usize, 0.0f64, 0usize);
                for y in 0..est.height() {
                    for x in 0..est.width() {
                        if !(est.valid.at(x, y) && gt.valid.at(x, y)) { continue; }
                        let (d, g) = (est.depth.at(x, y), gt.depth.at(x, y));
                        n += 1;
                        abs_sum += (d - g).abs();
                        if (d - g).abs() / g < 0.1 { a1 += 1; }
                    }
                }
                println!("scene={sname} arc={arc_deg:4.1} d_max={d_max:5.2} valid={n:6} a1={:6.2}% abs={:8.3}cm",
                    100.0 * a1 as f64 / n as f64, 100.0 * abs_sum / n as f64);
            }
        }
    }
}
