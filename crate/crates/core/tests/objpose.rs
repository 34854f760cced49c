use kpt_core::objpose::*;
use kpt_core::synthgen::object::{object_catalog, rigid, transform_point, ObjectModel};
use kpt_tensor::{Graph, Tensor};
use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut impl Rng) -> Matrix4<f64> {
    let axis = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let t = Vector3::new(rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0));
    rigid(Rotation3::new(axis).matrix(), &t)
}

fn with_symmetry(p: &Matrix4<f64>, s: &Matrix3<f64>) -> Matrix4<f64> {
    p * rigid(s, &Vector3::zeros())
}

fn brute(p_hat: &Matrix4<f64>, p_star: &Matrix4<f64>, m: &ObjectModel) -> (f64, f64) {
    let corners = m.corners();
    let mut best_loss = f64::INFINITY;
    let mut best_mssd = f64::INFINITY;
    for s in &m.symmetries {
        let mut sum = 0.0;
        let mut worst = 0.0f64;
        for b in &corners {
            let d = (transform_point(p_hat, b) - transform_point(p_star, &(s * b))).norm();
            sum += d * d;
            worst = worst.max(d);
        }
        best_loss = best_loss.min(sum / 8.0);
        best_mssd = best_mssd.min(worst);
    }
    (best_loss, best_mssd)
}

#[test]
fn degenerate_6d_inputs_rejected() {
    assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
    assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
    assert!(rot6d_to_matrix(&[1e-9, 0.0, 0.0, 0.0, 1.0, 0.0]).is_err());
}

#[test]
fn branch_outputs_have_rotation_and_translation_widths() {
    let mut g = Graph::<f64>::new();
    let rot = g.constant(Tensor::from_f64(&[1, 6], &IDENTITY_6D).unwrap());
    let trans = g.constant(Tensor::from_f64(&[1, 3], &[0.1, -0.2, 0.3]).unwrap());
    let out = object_branch_outputs(&mut g, rot, trans).unwrap();
    assert_eq!(g.shape(out.rotation), &[3, 3]);
    assert_eq!(g.shape(out.translation), &[1, 3]);
    let zero = g.constant(Tensor::zeros(&[1, 6]));
    assert!(object_branch_outputs(&mut g, zero, trans).is_err());
}

#[test]
fn empty_symmetry_set_rejected() {
    let mut m = object_catalog().remove(0);
    m.symmetries.clear();
    let p = Matrix4::identity();
    assert!(symmetry_corner_loss(&p, &p, &m).is_err());
    assert!(mssd(&p, &p, &m).is_err());
}

#[test]
fn exact_pose_and_pure_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in object_catalog() {
        let p = random_pose(&mut rng);
        assert!(symmetry_corner_loss(&p, &p, &m).unwrap().abs() < 1e-9);
        assert!(mssd(&p, &p, &m).unwrap().abs() < 1e-9);
        let t = Vector3::new(3.0, -4.0, 12.0);
        let mut shifted = p;
        shifted.fixed_view_mut::<3, 1>(0, 3).copy_from(&(p.fixed_view::<3, 1>(0, 3) + t));
        assert!((mssd(&shifted, &p, &m).unwrap() - 13.0).abs() < 1e-9);
    }
}

#[test]
fn symmetry_sets_are_closed_groups() {
    for m in object_catalog() {
        for a in &m.symmetries {
            for b in &m.symmetries {
                let c = a * b;
                assert!(m.symmetries.iter().any(|s| (s - c).norm() < 1e-9), "{} not closed", m.name);
            }
        }
        assert!(m.symmetries.iter().any(|s| (s - Matrix3::identity()).norm() < 1e-12));
    }
}

#[test]
fn graph_loss_matches_brute_force_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for m in object_catalog() {
        let p_star = random_pose(&mut rng);
        let p_hat = random_pose(&mut rng);
        let (want, _) = brute(&p_hat, &p_star, &m);
        let mut g = Graph::<f64>::new();
        let r: Vec<f64> = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| p_hat[(i, j)]).collect();
        let t: Vec<f64> = (0..3).map(|i| p_hat[(i, 3)]).collect();
        let rn = g.constant(Tensor::from_f64(&[3, 3], &r).unwrap());
        let tn = g.constant(Tensor::from_f64(&[1, 3], &t).unwrap());
        let loss = symmetry_corner_loss_graph(&mut g, rn, tn, &p_star, &m, 1.0).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-6 * want.max(1.0), "{}", m.name);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn six_d_maps_to_proper_rotations(r6 in proptest::array::uniform6(-3.0f64..3.0)) {
        let a1 = Vector3::new(r6[0], r6[1], r6[2]);
        let a2 = Vector3::new(r6[3], r6[4], r6[5]);
        prop_assume!(a1.norm() > 1e-3 && a1.cross(&a2).norm() > 1e-3);
        let r = rot6d_to_matrix(&r6).unwrap();
        prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-6);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
        let again = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
        prop_assert!((again - r).norm() < 1e-12);
    }

    #[test]
    fn loss_vanishes_on_symmetric_poses(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in object_catalog() {
            let p = random_pose(&mut rng);
            for s in &m.symmetries {
                let q = with_symmetry(&p, s);
                prop_assert!(symmetry_corner_loss(&q, &p, &m).unwrap() < 1e-9);
                prop_assert!(mssd(&q, &p, &m).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_exhaustive_min(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in object_catalog() {
            let p_hat = random_pose(&mut rng);
            let p_star = random_pose(&mut rng);
            let (loss, dist) = brute(&p_hat, &p_star, &m);
            prop_assert!((symmetry_corner_loss(&p_hat, &p_star, &m).unwrap() - loss).abs() < 1e-9 * loss.max(1.0));
            prop_assert!((mssd(&p_hat, &p_star, &m).unwrap() - dist).abs() < 1e-9 * dist.max(1.0));
            prop_assert!(loss >= 0.0);
        }
    }

    #[test]
    fn mssd_invariant_to_ground_truth_symmetry(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in object_catalog() {
            let p_hat = random_pose(&mut rng);
            let p_star = random_pose(&mut rng);
            let base = mssd(&p_hat, &p_star, &m).unwrap();
            for s in &m.symmetries {
                let moved = mssd(&p_hat, &with_symmetry(&p_star, s), &m).unwrap();
                prop_assert!((moved - base).abs() < 1e-6, "{}: {} vs {}", m.name, moved, base);
            }
        }
    }
}
