use densemap::features::{extract_classical, FeatureConfig};
use densemap::geometry::{relative_pose, CameraIntrinsics};
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

    // Rebuild the stage-3 hypotheses and aggregated cost to probe the
    // unregularized cost at the plane nearest the estimated depth.
    let prev = &result.stage_depths[1];
    let hyp = hypotheses_refined(prev, &cfg, 3).unwrap();
    let ref_pose = poses[6];
    let volumes: Vec<FeatureVolume> = win.frames().iter().map(|f| {
        let t_rel = relative_pose(&f.pose, &ref_pose);
        warp_features(f.pyramid.stage(3), &t_rel, &intr, &hyp)
    }).collect();
    let ri = win.reference_index();
    let weights = aggregation_weights(&volumes, ri, None, cfg.aggregation_temperature_scale).unwrap();
    let agg = aggregated_cost(&volumes, &weights, ri, cfg.max_cost).unwrap();

    let mut buckets = [[0usize; 2]; 6];
    let edges = [0.02, 0.05, 0.1, 0.2, 0.5];
    for y in 0..240 { for x in 0..320 {
        if !(est.valid.at(x, y) && gt.valid.at(x, y)) { continue; }
        let d_est = est.depth.at(x, y);
        let mut best = 0usize;
        for k in 1..hyp.planes() {
            if (hyp.at(k, y, x) - d_est).abs() < (hyp.at(best, y, x) - d_est).abs() { best = k; }
        }
        let nv = (0..volumes.len()).filter(|&i| volumes[i].is_valid(best, y, x)).count();
        let cost = if nv >= 3 { agg.values.at(best, y, x) } else { 10.0 };
        let b = edges.iter().position(|&e| cost < e).unwrap_or(5);
        let ok = (d_est - gt.depth.at(x, y)).abs() / gt.depth.at(x, y) < 0.1;
        buckets[b][ok as usize] += 1;
    }}
    let mut cum_ok = 0usize;
    let mut cum_n = 0usize;
    for (i, b) in buckets.iter().enumerate() {
        let tot = b[0] + b[1];
        cum_ok += b[1]; cum_n += tot;
        println!("cost bucket {i}: n={tot:6} a1={:5.1}% cumulative a1={:5.1}% cum_cov={:5.1}%",
            100.0 * b[1] as f64 / tot.max(1) as f64,
            100.0 * cum_ok as f64 / cum_n.max(1) as f64,
            100.0 * cum_n as f64 / (320.0*240.0));
    }
}
