use densemap::features::{extract_classical, FeatureConfig};
use densemap::geometry::CameraIntrinsics;
use densemap::mvs::*;
use densemap::synth::{orbit_arc_trajectory, render, Primitive, SyntheticScene};
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
    let intr = CameraIntrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).unwrap();
    let arc_deg: f64 = std::env::args().nth(1).map(|a| a.parse().unwrap()).unwrap_or(10.5);
    let poses = orbit_arc_trajectory(&scene, 7, 2.5, arc_deg.to_radians(), 0.25, 9);
    let wposes = &poses[0..7];
    let feat_cfg = FeatureConfig::default();
    let frames: Vec<WindowFrame> = wposes.iter().map(|pose| {
        let (image, _) = render(&scene, pose, &intr);
        let pyramid = extract_classical(&image, &feat_cfg).unwrap();
        WindowFrame { image, pyramid, pose: *pose }
    }).collect();
    let ref_pose = wposes[6];
    let (_, gt) = render(&scene, &ref_pose, &intr);
    let win = KeyframeWindow::new(frames, intr).unwrap();

    let mut cases: Vec<(String, MvsConfig)> = Vec::new();
    for (rad, drad, passes) in [(0usize,0usize,0usize),(1,1,1),(2,1,1),(1,1,2),(2,1,2),(3,1,2),(2,0,1)] {
        for temp in [0.5, 0.2, 0.1] {
            cases.push((format!("rad={rad} drad={drad} passes={passes} temp={temp}"), MvsConfig {
                regularizer_radius: rad,
                regularizer_depth_radius: drad,
                regularizer_passes: passes.max(1),
                softmax_temperature: Some(temp),
                ..MvsConfig::default()
            }));
            if passes == 0 {
                cases.last_mut().unwrap().1.regularizer_radius = 0;
                cases.last_mut().unwrap().1.regularizer_depth_radius = 0;
            }
        }
    }
    for (name, cfg) in cases {
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
        println!("{name:40} valid={n:6} a1={:6.2}% abs={:8.3}cm",
            100.0 * a1 as f64 / n as f64, 100.0 * abs_sum / n as f64);
    }
}
