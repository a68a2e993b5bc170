use densemap::features::{extract_classical, FeatureConfig};
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
    let intr = CameraIntrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).unwrap();
    let poses = orbit_trajectory(&scene, 40, 2.5, 0.25, 9);
    let wposes = &poses[0..7];
    let feat_cfg = FeatureConfig::default();
    let frames: Vec<WindowFrame> = wposes.iter().map(|pose| {
        let (image, _) = render(&scene, pose, &intr);
        let pyramid = extract_classical(&image, &feat_cfg).unwrap();
        WindowFrame { image, pyramid, pose: *pose }
    }).collect();
    let ref_pose = wposes[6];
    let win = KeyframeWindow::new(frames, intr).unwrap();
    let cfg = MvsConfig::default();

    let s_intr = win.stage_intrinsics(1);
    let (_, gt1) = render(&scene, &ref_pose, &s_intr);
    let hyp = hypotheses_stage1(&cfg, s_intr.height, s_intr.width);
    let volumes: Vec<FeatureVolume> = win.frames().iter().map(|f| {
        let t_rel = relative_pose(&f.pose, &ref_pose);
        warp_features(f.pyramid.stage(1), &t_rel, &s_intr, &hyp)
    }).collect();
    let ri = win.reference_index();
    let weights = aggregation_weights(&volumes, ri, None, cfg.aggregation_temperature_scale).unwrap();
    let agg = aggregated_cost(&volumes, &weights, ri, cfg.max_cost).unwrap();
    let var = variance_cost(&volumes, cfg.max_cost).unwrap();
    let mut reg = agg.clone();
    for _ in 0..cfg.regularizer_passes { reg = regularize_cost(&reg, cfg.regularizer_radius, cfg.regularizer_depth_radius); }

    for &(px, py) in &[(40usize, 30usize), (20, 20), (60, 40), (30, 45)] {
        let gtd = gt1.depth.at(px, py);
        println!("pixel ({px},{py}) gt depth {gtd:.3}");
        for d in 0..hyp.planes() {
            let h = hyp.at(d, py, px);
            let star = if (h - gtd).abs() < cfg.stage1_interval() / 2.0 { " <== gt" } else { "" };
            let nv = (0..volumes.len()).filter(|&i| volumes[i].is_valid(d, py, px)).count();
            println!("  d={d:2} hyp={h:6.3} var={:7.4} agg={:7.4} reg={:7.4} nv={nv}{}",
                var.values.at(d, py, px), agg.values.at(d, py, px), reg.values.at(d, py, px), star);
        }
    }
}
