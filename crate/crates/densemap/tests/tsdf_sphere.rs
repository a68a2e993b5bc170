//! Fusion/raycast/mesh round trip against an analytic sphere: depth rendered
//! from the fused volume and extracted mesh vertices must stay within two
//! voxels of the true surface.

use densemap::geometry::CameraIntrinsics;
use densemap::synth::{orbit_trajectory, render, Primitive, SyntheticScene};
use densemap::tsdf::{extract_mesh, HashedTsdfVolume, TsdfConfig};
use nalgebra::Vector3;

fn percentile(sorted_ascending: &mut Vec<f64>, p: usize) -> f64 {
    sorted_ascending.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted_ascending[sorted_ascending.len() * p / 100]
}

#[test]
fn sphere_fusion_round_trip() {
    let scene = SyntheticScene::new(
        vec![Primitive::Sphere {
            center: Vector3::new(0.0, 0.0, 0.0),
            radius: 1.0,
        }],
        7,
    )
    .unwrap();
    let intr = CameraIntrinsics::new(130.0, 130.0, 79.5, 59.5, 160, 120).unwrap();
    // Nine poses around a full orbit: eight fused, the ninth held out.
    let poses = orbit_trajectory(&scene, 9, 2.5, 0.0, 3);

    let mut vol = HashedTsdfVolume::new(TsdfConfig::default()).unwrap();
    for pose in &poses[..8] {
        let (image, depth) = render(&scene, pose, &intr);
        vol.integrate(&depth, Some(&image), pose, &intr).unwrap();
    }

    let held_out = &poses[8];
    let (cast, _) = vol.raycast(held_out, &intr);
    let (_, gt) = render(&scene, held_out, &intr);
    let mut errs: Vec<f64> = Vec::new();
    for y in 0..cast.height() {
        for x in 0..cast.width() {
            if cast.valid.at(x, y) && gt.valid.at(x, y) {
                errs.push((cast.depth.at(x, y) - gt.depth.at(x, y)).abs());
            }
        }
    }
    assert!(errs.len() > 2000, "only {} valid raycast pixels", errs.len());
    let p95 = percentile(&mut errs, 95);
    eprintln!("raycast n={} p95={:.4}", errs.len(), p95);
    assert!(p95 < 2.0 * vol.voxel_size(), "raycast p95 = {p95}");

    // Round trip from a fusion pose reproduces its own input depth.
    let (cast0, _) = vol.raycast(&poses[0], &intr);
    let (_, gt0) = render(&scene, &poses[0], &intr);
    let mut errs0: Vec<f64> = Vec::new();
    for y in 0..cast0.height() {
        for x in 0..cast0.width() {
            if cast0.valid.at(x, y) && gt0.valid.at(x, y) {
                errs0.push((cast0.depth.at(x, y) - gt0.depth.at(x, y)).abs());
            }
        }
    }
    let p95_0 = percentile(&mut errs0, 95);
    assert!(p95_0 < 2.0 * vol.voxel_size(), "fusion-pose p95 = {p95_0}");

    let mesh = extract_mesh(&vol);
    assert!(!mesh.vertices.is_empty());
    let mut radius_errs: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|v| (v.position.norm() - 1.0).abs())
        .collect();
    let p95_mesh = percentile(&mut radius_errs, 95);
    eprintln!("mesh verts={} radius p95={:.4}", mesh.vertices.len(), p95_mesh);
    assert!(p95_mesh < 2.0 * vol.voxel_size(), "mesh p95 = {p95_mesh}");
}
