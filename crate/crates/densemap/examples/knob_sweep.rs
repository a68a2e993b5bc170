use densemap::features::{extract_classical, FeatureConfig};
use densemap::geometry::CameraIntrinsics;
use densemap::mvs::*;
use densemap::synth::{orbit_arc_trajectory, render, Primitive, SyntheticScene};
use nalgebra::Vector3;

fn main() {
    let scene = SyntheticScene::new(vec![
        Primitive::Plane { origin: Vector3::new(0.0, 0.0, 0.0), normal: Vector3::new(0.0, 0.0, 1.0), half_extent: Some(4.0) },
        Primitive::Plane { origin: Vector3::new(0.0, -0.9, 0.4), normal: Vector3::new(0.0, 0.8, 0.6), half_extent: Some(3.0) },
        Primitive::Sphere { center: Vector3::new(0.3, -0.1, 0.7), radius: 0.4 },
    ], 2024).unwrap();
    let intr = CameraIntrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).unwrap();
    let feat_cfg = FeatureConfig::default();
    let poses = orbit_arc_trajectory(&scene, 7, 2.5, 9f64.to_radians(), 0.25, 9);
    let frames: Vec<WindowFrame> = poses.iter().map(|pose| {
        let (image, _) = render(&scene, pose, &intr);
        WindowFrame { image: image.clone(), pyramid: extract_classical(&image, &feat_cfg).unwrap(), pose: *pose }
    }).collect();
    let (_, gt) = render(&scene, &poses[6], &intr);
    let win = KeyframeWindow::new(frames, intr).unwrap();
    let total = 320 * 240;

    let base = MvsConfig {
        d_max: 5.25,
        planes: [48, 8, 4],
        peak_window: Some(1),
        aggregation_temperature_scale: 2.0,
        ..MvsConfig::default()
    };
    let mut cases: Vec<(String, MvsConfig)> = Vec::new();
    cases.push(("base".into(), base.clone()));
    cases.push(("base+64".into(), MvsConfig { planes: [64, 8, 4], ..base.clone() }));
    cases.push(("base temp=0.2".into(), MvsConfig { softmax_temperature: Some(0.2), ..base.clone() }));
    cases.push(("base temp=0.1".into(), MvsConfig { softmax_temperature: Some(0.1), ..base.clone() }));
    cases.push(("base rad=1".into(), MvsConfig { regularizer_radius: 1, ..base.clone() }));
    cases.push(("base rad=3".into(), MvsConfig { regularizer_radius: 3, ..base.clone() }));
    cases.push(("base drad=2".into(), MvsConfig { regularizer_depth_radius: 2, ..base.clone() }));
    cases.push(("base passes=3".into(), MvsConfig { regularizer_passes: 3, ..base.clone() }));
    cases.push(("base planes884".into(), MvsConfig { planes: [48, 8, 8], ..base.clone() }));
    cases.push(("base 64-8-8".into(), MvsConfig { planes: [64, 8, 8], ..base.clone() }));
    cases.push(("base agg=4".into(), MvsConfig { aggregation_temperature_scale: 4.0, ..base.clone() }));
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
        println!("{name:22} cov={:5.1}% a1={:6.2}% abs={:8.3}cm",
            100.0 * n as f64 / total as f64, 100.0 * a1 as f64 / n as f64, 100.0 * abs_sum / n as f64);
    }
}
