use kpt_core::synthgen::io::{decode_dataset, encode_dataset};
use kpt_core::synthgen::render::{rasterize, Owner, BACKGROUND, OBJECT_COLOR};
use kpt_core::synthgen::skeleton::uniform_shape;
use kpt_core::synthgen::*;
use kpt_core::KptError;
use nalgebra::Vector3;
use proptest::prelude::*;

fn cfg() -> SceneConfig {
    SceneConfig::default()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn same_seed_same_sample() {
    let a = sample_scene(11, &cfg()).unwrap();
    let b = sample_scene(11, &cfg()).unwrap();
    assert_eq!(a, b);
    let bits = |s: &SceneSample| s.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn thousand_seeds_stay_in_frame_with_template_bones() {
    for seed in 0..1000 {
        let s = sample_scene(seed, &cfg()).unwrap();
        for h in 0..2 {
            if !s.hand_present[h] {
                continue;
            }
            let t = HandSkeletonTemplate::new(if h == 0 { Hand::Left } else { Hand::Right });
            for j in 0..NUM_JOINTS {
                let [x, y] = s.joints2d[h][j];
                assert!(x >= 0.0 && x <= (s.width - 1) as f64 && y >= 0.0 && y <= (s.height - 1) as f64, "seed {seed} joint out of frame");
                let p = project(&s.intrinsics, &s.joints3d[h][j]);
                assert!((p[0] - x).abs() < 1e-4 && (p[1] - y).abs() < 1e-4);
                if let Some(p) = PARENTS[j] {
                    let want = t.rest_bone_lengths[j - 1] * s.shape_scale;
                    let got = dist(&s.joints3d[h][j], &s.joints3d[h][p]);
                    assert!((got - want).abs() < 1e-6, "seed {seed} bone {j}: {got} vs {want}");
                }
            }
            assert_eq!(s.z_root[h], s.joints3d[h][0][2]);
        }
    }
}

#[test]
fn zero_pose_is_rigid_rest_template() {
    let c = SceneConfig { zero_pose: true, ..cfg() };
    let s = sample_scene(3, &c).unwrap();
    for h in 0..2 {
        if !s.hand_present[h] {
            continue;
        }
        let t = HandSkeletonTemplate::new(if h == 0 { Hand::Left } else { Hand::Right });
        let rel = s.root_relative(h);
        // pairwise distances are preserved by any rigid placement
        for a in 0..NUM_JOINTS {
            for b in 0..NUM_JOINTS {
                let d_s = (rel[a] - rel[b]).norm();
                let d_t = (t.rest_joints[a] - t.rest_joints[b]).norm();
                assert!((d_s - d_t).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn generation_failure_after_rejections() {
    // roots too far for any hand to fit the 1 px margin
    let c = SceneConfig { depth_range: (0.5, 1.0), ..cfg() };
    match sample_scene(0, &c) {
        Err(KptError::GenerationFailure { tries }) => assert_eq!(tries, 100),
        other => panic!("expected generation failure, got {other:?}"),
    }
}

#[test]
fn empty_scene_renders_background() {
    let s = SceneSample::empty(16, 16, default_intrinsics(16));
    let img = render_image(&s);
    for c in 0..3 {
        assert!(img[c * 256..(c + 1) * 256].iter().all(|&v| v == BACKGROUND[c]));
    }
}

#[test]
fn lone_joint_peaks_at_centre() {
    let mut s = SceneSample::empty(33, 33, default_intrinsics(33));
    s.hand_present = [false, true];
    // every joint collapsed onto one point on the optical axis
    s.joints3d[1] = [[0.0, 0.0, 400.0]; NUM_JOINTS];
    s.finalize();
    let plane = 33 * 33;
    let centre = 16 * 33 + 16;
    let lum = |i: usize| (0..3).map(|c| s.image[c * plane + i]).sum::<f32>();
    let peak = (0..plane).max_by(|&a, &b| lum(a).total_cmp(&lum(b))).unwrap();
    assert_eq!(lum(peak), lum(centre));
    assert!(lum(centre) > lum(0));
}

#[test]
fn occluded_joint_takes_object_colour() {
    let mut found = false;
    for seed in 0..400 {
        let s = sample_scene(seed, &cfg()).unwrap();
        let r = rasterize(&s, s.width, s.height, &s.intrinsics);
        for h in 0..2 {
            for j in 0..NUM_JOINTS {
                if !s.hand_present[h] || s.visibility[h][j] {
                    continue;
                }
                let [x, y] = s.joints2d[h][j];
                let (px, py) = (x.round() as usize, y.round() as usize);
                if r.owner[py * s.width + px] == Owner::Object.code() {
                    let c = r.pixel(px, py);
                    // object shading only scales the base colour
                    let ratio = c[1] / OBJECT_COLOR[1];
                    for k in 0..3 {
                        assert!((c[k] - OBJECT_COLOR[k] * ratio).abs() < 1e-5);
                    }
                    found = true;
                }
            }
        }
    }
    assert!(found, "no object-occluded joint in 400 scenes");
}

#[test]
fn heatmap_single_joint_values() {
    let m = gaussian_heatmap(&[[64.0, 64.0]], &[true], 2.0, 128, 128);
    assert_eq!(m[64 * 128 + 64], 1.0);
    let one = (-1.0f64 / 8.0).exp() as f32;
    assert!((m[64 * 128 + 65] - one).abs() < 1e-7);
    assert!((m[63 * 128 + 64] - one).abs() < 1e-7);
}

#[test]
fn heatmap_without_visible_joints_is_zero() {
    let m = gaussian_heatmap(&[[4.0, 4.0]], &[false], 2.0, 8, 8);
    assert!(m.iter().all(|&v| v == 0.0));
}

#[test]
fn segmentation_inside_object_palette() {
    for seed in 0..50 {
        let s = sample_scene(seed, &cfg()).unwrap();
        let mask = object_segmentation_mask(&s, s.width, s.height);
        let r = rasterize(&s, s.width, s.height, &s.intrinsics);
        for (i, &m) in mask.iter().enumerate() {
            if m > 0.5 {
                assert_eq!(r.owner[i], Owner::Object.code());
            }
        }
    }
}

#[test]
fn segmentation_absent_object_is_empty() {
    let c = SceneConfig { object: false, ..cfg() };
    let s = sample_scene(2, &c).unwrap();
    assert!(object_segmentation_mask(&s, 32, 32).iter().all(|&v| v == 0.0));
}

#[test]
fn centred_box_front_face_area() {
    let mut s = SceneSample::empty(64, 64, default_intrinsics(64));
    let he = object_catalog()[0].half_extents;
    let f = s.intrinsics[0][0];
    // front face spans half the image width
    let z_front = 2.0 * he.x * f / 32.0;
    let pose = rigid(&nalgebra::Matrix3::identity(), &Vector3::new(0.0, 0.0, z_front + he.z));
    s.object_present = true;
    s.object_id = 0;
    s.object_pose = std::array::from_fn(|i| std::array::from_fn(|j| pose[(i, j)]));
    s.finalize();
    let area: f32 = object_segmentation_mask(&s, 64, 64).iter().sum();
    let w_px = 2.0 * he.x * f / z_front;
    let h_px = 2.0 * he.y * f / z_front;
    let want = (w_px * h_px) as f32;
    assert!((area - want).abs() <= (w_px + h_px) as f32 + 4.0, "area {area} vs {want}");
}

#[test]
fn rotate_by_zero_is_identity() {
    let s = sample_scene(5, &cfg()).unwrap();
    let r = augment(&s, AugmentKind::Rotate, 0.0);
    assert_eq!(r.image, s.image);
    assert_eq!(r.joints3d, s.joints3d);
    assert_eq!(r.visibility, s.visibility);
    for h in 0..2 {
        for j in 0..NUM_JOINTS {
            for k in 0..2 {
                assert!((r.joints2d[h][j][k] - s.joints2d[h][j][k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mirror_twice_restores_sample() {
    let s = sample_scene(6, &cfg()).unwrap();
    let back = augment(&augment(&s, AugmentKind::Mirror, 0.0), AugmentKind::Mirror, 0.0);
    assert_eq!(back.joints3d, s.joints3d);
    assert_eq!(back.joints2d, s.joints2d);
    assert_eq!(back.visibility, s.visibility);
    let err = back.image.iter().zip(&s.image).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(err < 1e-3);
}

#[test]
fn mirror_swaps_hands_and_flips_relative_translation() {
    for seed in 0..20 {
        let s = sample_scene(seed, &cfg()).unwrap();
        if !s.interacting() {
            continue;
        }
        let m = augment(&s, AugmentKind::Mirror, 0.0);
        let (t, tm) = (s.t_lr(), m.t_lr());
        assert!((tm - Vector3::new(t.x, -t.y, -t.z)).norm() < 1e-9);
        for j in 0..NUM_JOINTS {
            let a = s.joints2d[0][j];
            let b = m.joints2d[1][j];
            assert!((b[0] - (s.width as f64 - 1.0 - a[0])).abs() < 1e-9);
            assert!((b[1] - a[1]).abs() < 1e-9);
        }
    }
}

#[test]
fn rotate_90_moves_annotations_with_pixels() {
    let s = sample_scene(8, &cfg()).unwrap();
    let r = augment(&s, AugmentKind::Rotate, 90.0);
    let (cx, cy) = (s.intrinsics[0][2], s.intrinsics[1][2]);
    for h in 0..2 {
        for j in 0..NUM_JOINTS {
            let [x, y] = s.joints2d[h][j];
            let got = r.joints2d[h][j];
            assert!((got[0] - (cx - (y - cy))).abs() < 1e-6, "joint {h}/{j}: {got:?}");
            assert!((got[1] - (cy + (x - cx))).abs() < 1e-6, "joint {h}/{j}: {got:?}");
        }
    }
    // output pixel p shows the input pixel that the same rotation carries onto p
    let (w, hgt) = (s.width, s.height);
    let plane = w * hgt;
    for y in 0..hgt {
        for x in 0..w {
            let sx = cx + (y as f64 - cy);
            let sy = cy - (x as f64 - cx);
            let (ix, iy) = (sx.round() as usize, sy.round() as usize);
            assert!((sx - ix as f64).abs() < 1e-9 && (sy - iy as f64).abs() < 1e-9);
            for c in 0..3 {
                let a = r.image[c * plane + y * w + x];
                let b = s.image[c * plane + iy * w + ix];
                assert!((a - b).abs() < 1e-5, "pixel ({x},{y}) channel {c}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let samples: Vec<_> = (0..10).map(|i| sample_scene(100 + i, &cfg()).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.kpf");
    write_dataset(&path, &samples).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, samples);
    assert_eq!(encode_dataset(&back), encode_dataset(&samples));
}

#[test]
fn dataset_errors_are_distinct() {
    let samples: Vec<_> = (0..2).map(|i| sample_scene(i, &cfg()).unwrap()).collect();
    let bytes = encode_dataset(&samples);
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 3]), Err(KptError::Truncated { record: 1 })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_dataset(&bad), Err(KptError::BadMagic { .. })));
    let mut ver = bytes.clone();
    ver[4] += 1;
    match decode_dataset(&ver) {
        Err(e @ KptError::VersionMismatch { found: 2, expected: 1 }) => {
            let msg = e.to_string();
            assert!(msg.contains('2') && msg.contains('1'));
        }
        other => panic!("expected version error, got {other:?}"),
    }
    assert!(write_dataset(std::path::Path::new("/nonexistent/x.kpf"), &[]).is_err());
}

#[test]
fn object_symmetries_permute_corners() {
    for m in object_catalog() {
        let corners = m.corners();
        for s in &m.symmetries {
            assert!((s.transpose() * s - nalgebra::Matrix3::identity()).norm() < 1e-9);
            assert!((s.determinant() - 1.0).abs() < 1e-9);
            if m.name == "bowl" {
                continue;
            }
            for c in &corners {
                let r = s * c;
                assert!(corners.iter().any(|d| (d - r).norm() < 1e-6), "{} symmetry does not permute corners", m.name);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heatmap_is_max_of_single_joint_maps(pts in proptest::collection::vec((0.0f64..16.0, 0.0f64..16.0), 1..6)) {
        let points: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
        let vis = vec![true; points.len()];
        let all = gaussian_heatmap(&points, &vis, 2.0, 16, 16);
        let singles: Vec<Vec<f32>> = points.iter().map(|p| gaussian_heatmap(&[*p], &[true], 2.0, 16, 16)).collect();
        for i in 0..256 {
            let m = singles.iter().map(|s| s[i]).fold(0.0, f32::max);
            prop_assert_eq!(all[i], m);
        }
    }

    #[test]
    fn coincident_joints_match_one(x in 0.0f64..16.0, y in 0.0f64..16.0) {
        prop_assert_eq!(gaussian_heatmap(&[[x, y], [x, y]], &[true, true], 2.0, 16, 16), gaussian_heatmap(&[[x, y]], &[true], 2.0, 16, 16));
    }

    #[test]
    fn generated_projection_matches(seed in 0u64..1_000_000) {
        let s = sample_scene(seed, &SceneConfig::default()).unwrap();
        for h in 0..2 {
            for j in 0..NUM_JOINTS {
                let p = project(&s.intrinsics, &s.joints3d[h][j]);
                prop_assert!((p[0] - s.joints2d[h][j][0]).abs() < 1e-4);
                prop_assert!((p[1] - s.joints2d[h][j][1]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn mirror_preserves_gt_metric(seed in 0u64..10_000) {
        let s = sample_scene(seed, &SceneConfig::default()).unwrap();
        let m = augment(&s, AugmentKind::Mirror, 0.0);
        // relabelled comparison: mirrored-back joints equal the originals
        for h in 0..2 {
            if !s.hand_present[h] {
                continue;
            }
            let a = s.root_relative(h);
            let b = m.root_relative(1 - h);
            for j in 0..NUM_JOINTS {
                let back = skeleton::mirror_point(b[j]);
                prop_assert!((back - a[j]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_shape_scales_bones(scale in 0.85f64..1.15) {
        let t = HandSkeletonTemplate::new(Hand::Right);
        let zero = [Vector3::zeros(); NUM_ARTICULATED];
        let j = t.forward_kinematics(&zero, &uniform_shape(scale));
        for k in 1..NUM_JOINTS {
            let p = PARENTS[k].unwrap();
            prop_assert!(((j[k] - j[p]).norm() - scale * t.rest_bone_lengths[k - 1]).abs() < 1e-9);
        }
    }
}
