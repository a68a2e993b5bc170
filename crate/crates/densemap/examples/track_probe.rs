use densemap::geometry::{relative_pose, se3_exp, se3_log, CameraIntrinsics, PoseSE3};
use densemap::synth::{orbit_arc_trajectory, render, Primitive, SyntheticScene};
use densemap::tracking::{combine_depth, track_frame, SparseDepthMap, TrackerConfig};
use nalgebra::{SVector, Vector3};

fn main() {
    let mut scene = SyntheticScene::new(
        vec![
            Primitive::Plane {
                origin: Vector3::new(0.0, 0.0, 0.0),
                normal: Vector3::new(1.0, 0.0, 0.0),
                half_extent: Some(12.0),
            },
            Primitive::Sphere {
                center: Vector3::new(0.9, -0.1, 0.2),
                radius: 0.5,
            },
        ],
        99,
    )
    .unwrap();
    scene.texture_frequency = 1.0;
    let intr = CameraIntrinsics::new(180.0, 180.0, 159.5, 119.5, 320, 240).unwrap();
    let poses = orbit_arc_trajectory(&scene, 2, 2.5, 0.0, 0.0, 4);
    let scene_scale = 2.5;
    let mut twist = SVector::<f64, 6>::zeros();
    twist[1] = 1f64.to_radians();
    twist[3] = 0.02 * scene_scale;
    let true_rel = se3_exp(twist);
    let pose_b = poses[0].compose(&true_rel.inverse());
    let hi = CameraIntrinsics::new(360.0, 360.0, 319.5, 239.5, 640, 480).unwrap();
    let down = |g: &densemap::grid::Grid<f64>| {
        densemap::grid::Grid::from_fn(g.width() / 2, g.height() / 2, |x, y| {
            0.25 * (g.at(2 * x, 2 * y) + g.at(2 * x + 1, 2 * y) + g.at(2 * x, 2 * y + 1) + g.at(2 * x + 1, 2 * y + 1))
        })
    };
    let (mut ref_img, ref_depth) = render(&scene, &poses[0], &intr);
    let (mut new_img, new_depth) = render(&scene, &pose_b, &intr);
    let (ref_hi, _) = render(&scene, &poses[0], &hi);
    let (new_hi, _) = render(&scene, &pose_b, &hi);
    ref_img.intensity = down(&ref_hi.intensity);
    new_img.intensity = down(&new_hi.intensity);
    let smooth = |g: &densemap::grid::Grid<f64>| {
        densemap::grid::Grid::from_fn(g.width(), g.height(), |x, y| {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < g.width() && (ny as usize) < g.height() {
                        sum += g.at(nx as usize, ny as usize);
                        n += 1.0;
                    }
                }
            }
            sum / n
        })
    };
    let _ = smooth;

    // Direct warp check: for sample pixels, unproject with ref depth,
    // transform with true_rel, project into new image, compare intensity
    // and the analytic depth of the new view.
    for (x, y) in [(40usize, 30usize), (80, 60), (120, 90)] {
        if !ref_depth.valid.at(x, y) {
            continue;
        }
        let d = ref_depth.depth.at(x, y);
        let p_new = true_rel.transform(intr.ray(x as f64, y as f64) * d);
        let u = intr.fx * p_new.x / p_new.z + intr.cx;
        let v = intr.fy * p_new.y / p_new.z + intr.cy;
        let (ui, vi) = (u.round() as usize, v.round() as usize);
        println!(
            "px ({x},{y}) d={d:.4} -> ({u:.2},{v:.2}) ref_i={:.4} new_i={:.4} new_d(analytic)={:.4} warp_z={:.4}",
            ref_img.intensity.at(x, y),
            new_img.intensity.at(ui, vi),
            new_depth.depth.at(ui, vi),
            p_new.z,
        );
    }

    // Cost at truth vs tracker estimate.
    let buf = combine_depth(&SparseDepthMap::empty(320, 240), &ref_depth).unwrap();
    let cfg = TrackerConfig { huber: 0.01, ..TrackerConfig::default() };
    let (est, diag) = track_frame(&ref_img, &buf, &new_img, &PoseSE3::identity(), &intr, &cfg).unwrap();
    let err = se3_log(&est.compose(&true_rel.inverse())).unwrap();
    println!(
        "est err rot {:.4} deg trans {:.5}; rmse {:.5} inl {:.3} iters {} a {:.4} b {:.4}",
        Vector3::new(err[0], err[1], err[2]).norm().to_degrees(),
        Vector3::new(err[3], err[4], err[5]).norm(),
        diag.rmse,
        diag.inlier_fraction,
        diag.iterations,
        diag.affine.0,
        diag.affine.1
    );
    let (_, diag_t) = track_frame(&ref_img, &buf, &new_img, &true_rel, &intr, &TrackerConfig { max_iterations: 0, ..cfg.clone() }).unwrap();
    println!("rmse at truth (no iterations): {:.5}", diag_t.rmse);
    println!("err twist: w=({:.2e},{:.2e},{:.2e}) v=({:.2e},{:.2e},{:.2e})", err[0],err[1],err[2],err[3],err[4],err[5]);
    // cost along the yaw+trans ambiguous direction
    for k in -3i32..=3 {
        let f = k as f64 * 1e-3;
        let mut tw = SVector::<f64, 6>::zeros();
        tw[1] = f; // yaw offset
        let tp = se3_exp(tw).compose(&true_rel);
        let (_, d2) = track_frame(&ref_img, &buf, &new_img, &tp, &intr, &TrackerConfig { max_iterations: 0, ..TrackerConfig::default() }).unwrap();
        println!("yaw offset {:+.3} rad: rmse {:.6}", f, d2.rmse);
    }
    let rel_check = relative_pose(&pose_b, &poses[0]);
    let dd = se3_log(&rel_check.compose(&true_rel.inverse())).unwrap();
    println!("convention check |log(rel * truth^-1)| = {:.2e}", dd.norm());
}
