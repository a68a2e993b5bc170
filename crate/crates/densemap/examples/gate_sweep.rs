use densemap::features::{extract_classical, FeatureConfig};
use densemap::geometry::CameraIntrinsics;
use densemap::mvs::{cascade_estimate, KeyframeWindow, MvsConfig, WindowFrame};
use densemap::synth::{orbit_arc_trajectory, render, Primitive, SyntheticScene};
use nalgebra::Vector3;

fn main() {
    let scene = SyntheticScene::new(
        vec![
            Primitive::Plane {
                origin: Vector3::new(0.0, 0.0, 0.0),
                normal: Vector3::new(0.0, 0.0, 1.0),
                half_extent: Some(4.0),
            },
            Primitive::Plane {
                origin: Vector3::new(0.0, -0.9, 0.4),
                normal: Vector3::new(0.0, 0.8, 0.6),
                half_extent: Some(3.0),
            },
            Primitive::Sphere {
                center: Vector3::new(0.3, -0.1, 0.7),
                radius: 0.4,
            },
        ],
        2024,
    )
    .unwrap();
    let intr = CameraIntrinsics::new(260.0, 260.0, 159.5, 119.5, 320, 240).unwrap();
    let poses = orbit_arc_trajectory(&scene, 7, 2.5, 9f64.to_radians(), 0.25, 9);
    let feat_cfg = FeatureConfig::default();
    let frames: Vec<WindowFrame> = poses
        .iter()
        .map(|pose| {
            let (image, _) = render(&scene, pose, &intr);
            let pyramid = extract_classical(&image, &feat_cfg).unwrap();
            WindowFrame { image, pyramid, pose: *pose }
        })
        .collect();
    let ref_pose = poses[6];
    let (_, gt) = render(&scene, &ref_pose, &intr);
    let win = KeyframeWindow::new(frames, intr).unwrap();

    for (planes, max_cost, min_views) in [
        ([64, 8, 8], 0.02, 7),
        ([64, 8, 8], 0.01, 7),
        ([64, 8, 8], 0.005, 7),
        ([96, 16, 16], 0.01, 7),
        ([96, 16, 16], 0.005, 7),
    ] {
        let cfg = MvsConfig {
            d_max: 5.25,
            planes,
            photoconsistency_max_cost: Some(max_cost),
            photoconsistency_min_views: min_views,
            ..MvsConfig::default()
        };
        let result = cascade_estimate(&win, &cfg).unwrap();
        let raw = &result.final_depth;
        // 3x3 median over valid neighbors; pixel stays invalid if < 5 valid.
        let mut est = raw.clone();
        for y in 0..raw.height() {
            for x in 0..raw.width() {
                let mut vals: Vec<f64> = Vec::new();
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= raw.width() as i64 || ny >= raw.height() as i64 {
                            continue;
                        }
                        if raw.valid.at(nx as usize, ny as usize) {
                            vals.push(raw.depth.at(nx as usize, ny as usize));
                        }
                    }
                }
                if vals.len() >= 13 {
                    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    est.depth.set(x, y, vals[vals.len() / 2]);
                    est.valid.set(x, y, true);
                } else {
                    est.valid.set(x, y, false);
                }
            }
        }
        let est = &est;
        let (mut n, mut abs_sum, mut a1, mut big) = (0usize, 0.0f64, 0usize, 0usize);
        for y in 0..est.height() {
            for x in 0..est.width() {
                if !(est.valid.at(x, y) && gt.valid.at(x, y)) {
                    continue;
                }
                let (d, g) = (est.depth.at(x, y), gt.depth.at(x, y));
                n += 1;
                let e = (d - g).abs();
                abs_sum += e;
                if e / g < 0.1 { a1 += 1; }
                if e > 0.5 { big += 1; }
            }
        }
        println!(
            "max_cost={:.3} min_views={} n={} cov={:.1}% a1={:.2}% abs={:.3}cm big(>0.5m)={}",
            max_cost, min_views, n,
            100.0 * n as f64 / (est.width() * est.height()) as f64,
            100.0 * a1 as f64 / n as f64,
            100.0 * abs_sum / n as f64,
            big
        );
    }
}
