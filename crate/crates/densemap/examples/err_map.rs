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
    let cfg = MvsConfig { d_max: 5.25, planes: [64, 8, 8], peak_window: Some(1),
        aggregation_temperature_scale: 2.0, ..MvsConfig::default() };
    let result = cascade_estimate(&win, &cfg).unwrap();
    let est = &result.final_depth;
    // ASCII error map at 80x30: '.' ok, 'x' outlier (>10%), 'i' invalid est, ' ' invalid gt.
    for by in 0..30 {
        let mut line = String::new();
        for bx in 0..80 {
            let (mut ok, mut bad, mut inv, mut none) = (0, 0, 0, 0);
            for dy in 0..8 { for dx in 0..4 {
                let (x, y) = (bx * 4 + dx, by * 8 + dy);
                if !gt.valid.at(x, y) { none += 1; }
                else if !est.valid.at(x, y) { inv += 1; }
                else if (est.depth.at(x, y) - gt.depth.at(x, y)).abs() / gt.depth.at(x, y) < 0.1 { ok += 1; }
                else { bad += 1; }
            }}
            line.push(if none >= 16 { ' ' } else if bad >= 8 { 'x' } else if inv >= 16 { 'i' } else if bad >= 3 { '-' } else { '.' });
        }
        println!("{line}");
    }
    // Confidence vs error relation.
    let conf = est.confidence.as_ref().unwrap();
    let mut buckets = [[0usize; 2]; 5];
    for y in 0..240 { for x in 0..320 {
        if !(est.valid.at(x, y) && gt.valid.at(x, y)) { continue; }
        let c = conf.at(x, y);
        let b = ((c - 0.3) / 0.145).clamp(0.0, 4.0) as usize;
        let ok = (est.depth.at(x, y) - gt.depth.at(x, y)).abs() / gt.depth.at(x, y) < 0.1;
        buckets[b][ok as usize] += 1;
    }}
    for (i, b) in buckets.iter().enumerate() {
        let tot = b[0] + b[1];
        println!("conf bucket {i}: n={tot:6} a1={:5.1}%", 100.0 * b[1] as f64 / tot.max(1) as f64);
    }
}
