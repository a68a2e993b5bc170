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
    // Per-channel variance averaged over all pixels, at the plane nearest gt
    // vs. the median over all other planes >= gt+5.
    let planes = hyp.planes();
    let step = cfg.stage1_interval();
    let mut per_channel_gt = [0.0f64; 3];
    let mut per_channel_far = [0.0f64; 3];
    let mut n_gt = 0usize;
    let mut n_far = 0usize;
    for y in 0..s_intr.height {
        for x in 0..s_intr.width {
            if !gt1.valid.at(x, y) { continue; }
            let g = gt1.depth.at(x, y);
            let kgt = ((g - cfg.d_min) / step).round() as usize;
            if kgt >= planes { continue; }
            for d in 0..planes {
                let views: Vec<usize> = (0..volumes.len()).filter(|&i| volumes[i].is_valid(d, y, x)).collect();
                if views.len() < 4 { continue; }
                let n = views.len() as f64;
                let mut chv = [0.0f64; 3];
                for c in 0..3 {
                    let mean: f64 = views.iter().map(|&i| volumes[i].value(c, d, y, x)).sum::<f64>() / n;
                    chv[c] = views.iter().map(|&i| { let v = volumes[i].value(c, d, y, x) - mean; v * v }).sum::<f64>() / n;
                }
                if d == kgt {
                    for c in 0..3 { per_channel_gt[c] += chv[c]; }
                    n_gt += 1;
                } else if d > kgt + 5 {
                    for c in 0..3 { per_channel_far[c] += chv[c]; }
                    n_far += 1;
                }
            }
        }
    }
    for c in 0..3 {
        println!("channel {c}: gt-plane var {:.4}  far-plane var {:.4}  ratio {:.2}",
            per_channel_gt[c] / n_gt as f64, per_channel_far[c] / n_far as f64,
            (per_channel_far[c] / n_far as f64) / (per_channel_gt[c] / n_gt as f64));
    }
}
