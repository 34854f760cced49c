use kpt_core::posedec::*;
use kpt_core::synthgen::skeleton::{articulation_index, ARTICULATED, NUM_ARTICULATED, NUM_BONES, SHAPE_DIM};
use kpt_core::synthgen::*;
use kpt_tensor::{Graph, NodeId, Tensor};
use nalgebra::{Matrix3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tree() -> KinematicTree {
    KinematicTree::default()
}

fn random_vectors(rng: &mut impl Rng) -> [[f64; 3]; NUM_BONES] {
    std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-30.0..30.0)))
}

#[test]
fn chain_accumulation() {
    let t = KinematicTree { parent: std::array::from_fn(|j| if j == 0 { None } else { Some(j - 1) }) };
    let mut v = [[0.0; 3]; NUM_BONES];
    v[0] = [1.0, 0.0, 0.0];
    v[1] = [0.0, 1.0, 0.0];
    let j = accumulate_joint_vectors(&v, &t);
    assert_eq!(&j[..3], &[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
    assert_eq!(accumulate_joint_vectors(&[[0.0; 3]; NUM_BONES], &tree()), [[0.0; 3]; NUM_JOINTS]);
}

#[test]
fn rest_vectors_are_bones() {
    let tpl = HandSkeletonTemplate::new(Hand::Right);
    let rest: Joints = tpl.rest_joints.map(Into::into);
    let v = diff_to_vectors(&rest, &tree());
    for b in 0..NUM_BONES {
        let n = Vector3::from(v[b]).norm();
        assert!((n - tpl.rest_bone_lengths[b]).abs() < 1e-12);
        assert!((Vector3::from(v[b]) - tpl.rest_offset(b + 1)).norm() < 1e-12);
    }
    let shifted: Joints = rest.map(|p| [p[0] + 5.0, p[1] - 2.0, p[2] + 1.0]);
    let vs = diff_to_vectors(&shifted, &tree());
    for b in 0..NUM_BONES {
        for c in 0..3 {
            assert!((vs[b][c] - v[b][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn reconstruct_identity_camera() {
    let j2d: [[f64; 2]; NUM_JOINTS] = std::array::from_fn(|j| [j as f64, 2.0 * j as f64]);
    let j = reconstruct_25d(&j2d, &[0.0; NUM_BONES], 1.0, &Matrix3::identity(), &tree()).unwrap();
    for k in 0..NUM_JOINTS {
        assert_eq!(j[k], [j2d[k][0], j2d[k][1], 1.0]);
    }
    let j2 = reconstruct_25d(&j2d, &[0.0; NUM_BONES], 2.0, &Matrix3::identity(), &tree()).unwrap();
    for k in 0..NUM_JOINTS {
        for c in 0..3 {
            assert_eq!(j2[k][c], 2.0 * j[k][c]);
        }
    }
    assert!(reconstruct_25d(&j2d, &[0.0; NUM_BONES], 1.0, &Matrix3::zeros(), &tree()).is_err());
}

#[test]
fn reconstruct_inverts_generated_projection() {
    for seed in 0..50 {
        let s = sample_scene(seed, &SceneConfig::default()).unwrap();
        let k = Matrix3::from_fn(|i, j| s.intrinsics[i][j]);
        for h in 0..2 {
            if !s.hand_present[h] {
                continue;
            }
            let dzp = parent_relative_depths(&s.joints3d[h], &tree());
            let j = reconstruct_25d(&s.joints2d[h], &dzp, s.z_root[h], &k, &tree()).unwrap();
            for (a, b) in j.iter().zip(&s.joints3d[h]) {
                assert!((Vector3::from(*a) - Vector3::from(*b)).norm() < 1e-4);
            }
        }
    }
}

#[test]
fn fk_zero_is_scaled_rest() {
    for hand in Hand::BOTH {
        let tpl = HandSkeletonTemplate::new(hand);
        let j = forward_kinematics(&[[0.0; 3]; NUM_ARTICULATED], &[0.0; SHAPE_DIM], &tpl);
        for k in 0..NUM_JOINTS {
            let want = tpl.rest_joints[k] - tpl.rest_joints[0];
            assert!((Vector3::from(j[k]) - want).norm() < 1e-12);
        }
    }
}

#[test]
fn fk_wrist_quarter_turn_rotates_everything() {
    let tpl = HandSkeletonTemplate::new(Hand::Right);
    let rest = forward_kinematics(&[[0.0; 3]; NUM_ARTICULATED], &[0.0; SHAPE_DIM], &tpl);
    let mut theta = [[0.0; 3]; NUM_ARTICULATED];
    theta[0] = [0.0, 0.0, std::f64::consts::FRAC_PI_2];
    let j = forward_kinematics(&theta, &[0.0; SHAPE_DIM], &tpl);
    for k in 0..NUM_JOINTS {
        let r = rest[k];
        let want = Vector3::new(-r[1], r[0], r[2]);
        assert!((Vector3::from(j[k]) - want).norm() < 1e-9);
    }
}

#[test]
fn fk_single_finger_base_matches_matrix_composition() {
    let tpl = HandSkeletonTemplate::new(Hand::Right);
    let rest: Vec<Vector3<f64>> = tpl.rest_joints.iter().map(|p| p - tpl.rest_joints[0]).collect();
    // first articulated joint below the wrist with a chain beneath it
    let base = ARTICULATED[1];
    let a = articulation_index(base).unwrap();
    let axis = Vector3::new(1.0, 0.0, 0.0);
    let mut theta = [[0.0; 3]; NUM_ARTICULATED];
    theta[a] = (axis * std::f64::consts::FRAC_PI_2).into();
    let j = forward_kinematics(&theta, &[0.0; SHAPE_DIM], &tpl);
    let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
    let below = |mut k: usize| loop {
        if k == base {
            return true;
        }
        match tpl.parent[k] {
            Some(p) => k = p,
            None => return false,
        }
    };
    let mut moved = 0;
    for k in 0..NUM_JOINTS {
        let want = if below(k) && k != base { rest[base] + r * (rest[k] - rest[base]) } else { rest[k] };
        if below(k) && k != base {
            moved += 1;
        }
        assert!((Vector3::from(j[k]) - want).norm() < 1e-9, "joint {k}");
    }
    assert!(moved >= 3);
}

#[test]
fn weak_projection_examples() {
    assert_eq!(weak_project(&[[2.0, 3.0, 999.0]], 2.0, [1.0, 1.0]), vec![[5.0, 7.0]]);
    assert_eq!(weak_project(&[[2.0, 3.0, -4.0]], 1.0, [0.0, 0.0]), vec![[2.0, 3.0]]);
    assert_eq!(weak_project(&[[2.0, 3.0, 1.0]], 2.0, [1.0, 1.0]), weak_project(&[[2.0, 3.0, -7.0]], 2.0, [1.0, 1.0]));
}

#[test]
fn left_translation_shifts() {
    let tpl = HandSkeletonTemplate::new(Hand::Left);
    let rest: Joints = tpl.rest_joints.map(Into::into);
    assert_eq!(apply_left_translation(&rest, [0.0; 3]), rest);
    let moved = apply_left_translation(&rest, [10.0, 0.0, 0.0]);
    for k in 0..NUM_JOINTS {
        assert_eq!(moved[k], [rest[k][0] + 10.0, rest[k][1], rest[k][2]]);
    }
    let t_pred = [12.0, -3.0, 4.0];
    let t_gt = [10.0, 1.0, 1.0];
    assert!((kpt_core::metrics::mrrpe(&t_pred, &t_gt) - (4.0f64 + 16.0 + 9.0).sqrt()).abs() < 1e-12);
}

// -- losses on hand-built pose graphs ---------------------------------------

fn constant<const N: usize>(g: &mut Graph<f64>, rows: &[[f64; N]]) -> NodeId {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    g.constant(Tensor::from_f64(&[rows.len(), N], &flat).unwrap())
}

fn targets(seed: u64) -> HandTargets {
    let cfg = SceneConfig::default();
    (seed..)
        .map(|s| sample_scene(s, &cfg).unwrap())
        .find(|s| s.interacting())
        .map(|s| HandTargets::from_sample(&s, 32, 32))
        .unwrap()
}

struct Perturb {
    vectors: Option<(usize, usize, f64)>,
    j2d: Option<(usize, usize, f64)>,
    theta: Option<(usize, [f64; 3])>,
    t: [f64; 3],
}

impl Default for Perturb {
    fn default() -> Self {
        Self { vectors: None, j2d: None, theta: None, t: [0.0; 3] }
    }
}

fn gt_graph(g: &mut Graph<f64>, t: &HandTargets, p: &Perturb) -> PoseGraph {
    let mut vectors = t.vectors;
    if let Some((b, c, e)) = p.vectors {
        vectors[1][b][c] += e;
    }
    let mut j2d = t.joints2d;
    if let Some((j, c, e)) = p.j2d {
        j2d[1][j][c] += e;
    }
    let mut theta = t.theta;
    if let Some((a, d)) = p.theta {
        theta[1][a] = std::array::from_fn(|c| theta[1][a][c] + d[c]);
    }
    let t_lr: [[f64; 3]; 1] = [std::array::from_fn(|c| t.t_lr[c] + p.t[c])];
    let dz: [[[f64; 1]; NUM_BONES]; 2] = t.dzp.map(|d| d.map(|x| [x]));
    PoseGraph {
        joints3d: [constant(g, &t.joints3d[0]), constant(g, &t.joints3d[1])],
        t_lr: constant(g, &t_lr),
        vectors: Some([constant(g, &vectors[0]), constant(g, &vectors[1])]),
        weak2d: Some([constant(g, &j2d[0]), constant(g, &j2d[1])]),
        j2d: Some([constant(g, &j2d[0]), constant(g, &j2d[1])]),
        dzp: Some([constant(g, &dz[0]), constant(g, &dz[1])]),
        theta: Some([constant(g, &theta[0]), constant(g, &theta[1])]),
    }
}

fn eval(rep: Representation, t: &HandTargets, p: &Perturb) -> f64 {
    let mut g = Graph::new();
    let pose = gt_graph(&mut g, t, p);
    let l = pose_loss(&mut g, rep, &[pose], std::slice::from_ref(t)).unwrap().unwrap();
    g.value(l).item()
}

#[test]
fn losses_vanish_at_ground_truth() {
    let t = targets(0);
    for rep in [Representation::JointVectors, Representation::TwoFiveD, Representation::Angles] {
        assert_eq!(eval(rep, &t, &Perturb::default()), 0.0, "{}", rep.tag());
    }
}

#[test]
fn jv_vector_perturbation_is_linear() {
    let t = targets(0);
    let eps = 0.37;
    let l = eval(Representation::JointVectors, &t, &Perturb { vectors: Some((4, 0, eps)), ..Default::default() });
    // L_V averages over 2 hands × 20 vectors × 3 coordinates
    assert!((l - eps / (2.0 * NUM_BONES as f64 * 3.0)).abs() < 1e-12);
}

#[test]
fn translation_only_25d_loss() {
    let t = targets(0);
    let l = eval(Representation::TwoFiveD, &t, &Perturb { t: [1.0, 2.0, 2.0], ..Default::default() });
    assert!((l - 5.0 / 3.0).abs() < 1e-12);
}

#[test]
fn symmetric_2d_perturbations_agree() {
    let t = targets(3);
    let up = eval(Representation::TwoFiveD, &t, &Perturb { j2d: Some((7, 1, 0.5)), ..Default::default() });
    let down = eval(Representation::TwoFiveD, &t, &Perturb { j2d: Some((7, 1, -0.5)), ..Default::default() });
    assert!(up > 0.0);
    assert!((up - down).abs() < 1e-12);
}

#[test]
fn jv_loss_ignores_consistent_joint_permutation() {
    let t = targets(5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut shuffled = t.clone();
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..NUM_JOINTS).collect();
        rand::seq::SliceRandom::shuffle(&mut p[..], &mut rng);
        p
    };
    for h in 0..2 {
        shuffled.joints3d[h] = std::array::from_fn(|k| t.joints3d[h][perm[k]]);
        shuffled.joints2d[h] = std::array::from_fn(|k| t.joints2d[h][perm[k]]);
    }
    let p = Perturb { vectors: Some((2, 1, 0.8)), j2d: Some((3, 0, 1.5)), ..Default::default() };
    let pp = Perturb { vectors: p.vectors, j2d: Some((perm.iter().position(|&k| k == 3).unwrap(), 0, 1.5)), ..Default::default() };
    assert!((eval(Representation::JointVectors, &t, &p) - eval(Representation::JointVectors, &shuffled, &pp)).abs() < 1e-12);
}

#[test]
fn distal_twist_is_an_fk_null_direction() {
    let tpl = HandSkeletonTemplate::new(Hand::Right);
    let has_child = |j: usize| tpl.parent.iter().any(|&p| p == Some(j));
    let tip = (0..NUM_JOINTS).find(|&j| !has_child(j)).unwrap();
    let distal = tpl.parent[tip].unwrap();
    let a = articulation_index(distal).unwrap();
    let axis = tpl.rest_offset(tip).normalize();
    let mut theta = [[0.0; 3]; NUM_ARTICULATED];
    theta[a] = (axis * 0.4).into();
    let rest = forward_kinematics(&[[0.0; 3]; NUM_ARTICULATED], &[0.0; SHAPE_DIM], &tpl);
    let twisted = forward_kinematics(&theta, &[0.0; SHAPE_DIM], &tpl);
    for k in 0..NUM_JOINTS {
        assert!((Vector3::from(rest[k]) - Vector3::from(twisted[k])).norm() < 1e-9);
    }
    // with the 3D joints unchanged only the angle term sees the twist
    let t = targets(0);
    let l = eval(Representation::Angles, &t, &Perturb { theta: Some((a, theta[a])), ..Default::default() });
    let want = theta[a].iter().map(|x| x.abs()).sum::<f64>() / (2 * NUM_ARTICULATED * 3) as f64;
    assert!(l > 0.0);
    assert!((l - want).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accumulate_and_diff_are_inverse(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_vectors(&mut rng);
        let back = diff_to_vectors(&accumulate_joint_vectors(&v, &tree()), &tree());
        for b in 0..NUM_BONES {
            for c in 0..3 {
                prop_assert!((back[b][c] - v[b][c]).abs() < 1e-9);
            }
        }
        let joints: Joints = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-100.0..100.0)));
        let again = accumulate_joint_vectors(&diff_to_vectors(&joints, &tree()), &tree());
        for k in 0..NUM_JOINTS {
            for c in 0..3 {
                prop_assert!((again[k][c] - (joints[k][c] - joints[0][c])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fk_is_root_rotation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tpl = HandSkeletonTemplate::new(Hand::Left);
        let mut theta: [[f64; 3]; NUM_ARTICULATED] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-0.6..0.6)));
        let beta: [f64; SHAPE_DIM] = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
        let base = forward_kinematics(&theta, &beta, &tpl);
        let r = Rotation3::new(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        theta[0] = (r * Rotation3::new(Vector3::from(theta[0]))).scaled_axis().into();
        let rotated = forward_kinematics(&theta, &beta, &tpl);
        for k in 0..NUM_JOINTS {
            prop_assert!((Vector3::from(rotated[k]) - r * Vector3::from(base[k])).norm() < 1e-9);
        }
    }

    #[test]
    fn any_single_perturbation_is_penalized(j in 0usize..NUM_JOINTS, c in 0usize..2, e in prop_oneof![1e-5f64..1.0, -1.0f64..-1e-5]) {
        let t = targets(0);
        for rep in [Representation::JointVectors, Representation::TwoFiveD] {
            let l = eval(rep, &t, &Perturb { j2d: Some((j, c, e)), ..Default::default() });
            prop_assert!(l > 0.0);
        }
    }
}
