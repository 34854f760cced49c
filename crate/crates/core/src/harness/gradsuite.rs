//! Finite-difference checks of every differentiable stage, in `f64`.

use kpt_tensor::gradcheck::{grad_check, GradCheckOptions};
use kpt_tensor::nn::{Bindings, ParamStore};
use kpt_tensor::{Graph, NodeId, Result as TensorResult, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KptError, Result};
use crate::ktformer::{MultiHeadAttention, Segment};
use crate::objpose::{rot6d_graph, symmetry_corner_loss_graph};
use crate::posedec::{decode_graph, pose_loss, HandTargets, OutputScales, Representation};
use crate::synthgen::{object_catalog, rigid, sample_scene, SceneConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const CASES: [&str; 9] = ["conv2d", "attention", "layer_norm", "bilinear_sample", "loss_jv", "loss_25d", "loss_angles", "rot6d", "symmetry_corner_loss"];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// Contracts `y` with fixed random weights so every output element matters.
fn readout(g: &mut Graph<f64>, y: NodeId, weights: &Tensor<f64>) -> TensorResult<NodeId> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn lift<T>(r: Result<T>) -> TensorResult<T> {
    r.map_err(|e| TensorError::InvalidArgument(e.to_string()))
}

/// Closest approach of an L1 residual to zero that a trial point may have:
/// millimetres and pixels, then radians. Both are far wider than the
/// output change a finite-difference step can cause.
const KINK_MARGIN: f64 = 0.05;
const KINK_MARGIN_RAD: f64 = 1e-3;
const MAX_DRAWS: usize = 10_000;

fn clear_of_kinks(rep: Representation, joints: &Tensor<f64>, extra: &Tensor<f64>, both: bool, scales: &OutputScales, t: &HandTargets) -> Result<bool> {
    let mut g = Graph::<f64>::new();
    let j = g.constant(joints.clone());
    let e = g.constant(extra.clone());
    let pose = decode_graph(&mut g, rep, j, e, both, scales)?;
    let mut clear = true;
    let mut visit = |node: NodeId, target: &[f64], margin: f64| {
        for (a, b) in g.value(node).to_f64_vec().iter().zip(target) {
            let d = (a - b).abs();
            // constant zero roots never move under perturbation
            clear &= d == 0.0 || d > margin;
        }
    };
    let flat3 = |v: &[[f64; 3]]| -> Vec<f64> { v.iter().flatten().copied().collect() };
    for h in (0..2).filter(|&h| t.present[h]) {
        let j3 = flat3(&t.joints3d[h]);
        let j2: Vec<f64> = t.joints2d[h].iter().flatten().copied().collect();
        match rep {
            Representation::JointVectors => {
                visit(pose.vectors.expect("vectors")[h], &flat3(&t.vectors[h]), KINK_MARGIN);
                visit(pose.joints3d[h], &j3, KINK_MARGIN);
                visit(pose.weak2d.expect("weak projection")[h], &j2, KINK_MARGIN);
            }
            Representation::TwoFiveD => {
                visit(pose.j2d.expect("2d")[h], &j2, KINK_MARGIN);
                visit(pose.dzp.expect("depths")[h], &t.dzp[h], KINK_MARGIN);
            }
            Representation::Angles => {
                visit(pose.joints3d[h], &j3, KINK_MARGIN);
                visit(pose.theta.expect("angles")[h], &flat3(&t.theta[h]), KINK_MARGIN_RAD);
                visit(pose.weak2d.expect("weak projection")[h], &j2, KINK_MARGIN);
            }
        }
    }
    if rep == Representation::TwoFiveD && t.present[0] && t.present[1] {
        visit(pose.t_lr, &t.t_lr, KINK_MARGIN);
    }
    Ok(clear)
}

fn trial(name: &str, rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<f64> {
    let report = match name {
        "conv2d" => {
            let stride = rng.gen_range(1..=2);
            let x = random(rng, &[2, 2, 6, 6], -1.0, 1.0);
            let w = random(rng, &[3, 2, 3, 3], -1.0, 1.0);
            let b = random(rng, &[3], -1.0, 1.0);
            let out = 6usize.div_ceil(stride);
            let r = random(rng, &[2, 3, out, out], -1.0, 1.0);
            grad_check(&[x, w, b], |g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, 1)?;
                readout(g, y, &r)
            }, opts)?
        }
        "attention" => {
            let mut store = ParamStore::<f64>::new();
            let mha = MultiHeadAttention::new(&mut store, rng, "attn", 8, 2)?;
            let n_tokens = 2;
            let x = random(rng, &[2 * n_tokens, 8], -1.0, 1.0);
            let r = random(rng, &[2 * n_tokens, 8], -1.0, 1.0);
            let segs: Vec<Segment> = (0..2).map(|b| Segment { q_start: b * n_tokens, q_len: n_tokens, k_start: b * n_tokens, k_len: n_tokens }).collect();
            let mut leaves = vec![x];
            leaves.extend(store.iter().map(|e| e.tensor.clone()));
            grad_check(&leaves, |g, ids| {
                let p = Bindings::from_nodes(ids[1..].to_vec());
                let (y, _) = lift(mha.forward(g, &p, ids[0], ids[0], &segs))?;
                readout(g, y, &r)
            }, opts)?
        }
        "layer_norm" => {
            let x = random(rng, &[4, 6], -2.0, 2.0);
            let gamma = random(rng, &[6], 0.5, 1.5);
            let beta = random(rng, &[6], -0.5, 0.5);
            let r = random(rng, &[4, 6], -1.0, 1.0);
            grad_check(&[x, gamma, beta], |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                readout(g, y, &r)
            }, opts)?
        }
        "bilinear_sample" => {
            let fm = random(rng, &[2, 3, 6, 5], -1.0, 1.0);
            let sites: Vec<(usize, [f64; 2])> = (0..5).map(|_| (rng.gen_range(0..2), [rng.gen_range(0.02..0.98), rng.gen_range(0.02..0.98)])).collect();
            let r = random(rng, &[5, 3], -1.0, 1.0);
            grad_check(&[fm], |g, ids| {
                let y = g.bilinear_sample(ids[0], &sites)?;
                readout(g, y, &r)
            }, opts)?
        }
        "loss_jv" | "loss_25d" | "loss_angles" => {
            let rep = match name {
                "loss_jv" => Representation::JointVectors,
                "loss_25d" => Representation::TwoFiveD,
                _ => Representation::Angles,
            };
            let sample = sample_scene(rng.gen(), &SceneConfig { image_size: 32, ..SceneConfig::default() })?;
            let targets = HandTargets::from_sample(&sample, 16, 16);
            let scales = OutputScales::new(16, 32);
            let both = sample.interacting();
            let lim = if rep == Representation::Angles { 0.3 } else { 1.0 };
            // |x| has no derivative at 0: keep every residual clear of the stencil
            let mut draw = None;
            for _ in 0..MAX_DRAWS {
                let joints = random(rng, &[2 * rep.joint_queries_per_hand(), 3], -lim, lim);
                let extra = random(rng, &[1, rep.extra_out_dim()], -0.5, 0.5);
                if clear_of_kinks(rep, &joints, &extra, both, &scales, &targets)? {
                    draw = Some((joints, extra));
                    break;
                }
            }
            let (joints, extra) = draw.ok_or_else(|| KptError::Degenerate(format!("{name}: no trial point clear of L1 kinks")))?;
            grad_check(&[joints, extra], |g, ids| {
                let pose = lift(decode_graph(g, rep, ids[0], ids[1], both, &scales))?;
                let loss = lift(pose_loss(g, rep, &[pose], std::slice::from_ref(&targets)))?;
                loss.ok_or_else(|| TensorError::InvalidArgument("no hand supervised".into()))
            }, opts)?
        }
        "rot6d" => {
            let r6 = random(rng, &[1, 6], -1.0, 1.0);
            let r = random(rng, &[3, 3], -1.0, 1.0);
            grad_check(&[r6], |g, ids| {
                let m = lift(rot6d_graph(g, ids[0]))?;
                readout(g, m, &r)
            }, opts)?
        }
        "symmetry_corner_loss" => {
            let catalog = object_catalog();
            let model = catalog[rng.gen_range(0..catalog.len())].clone();
            let axis = nalgebra::Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let rot = *nalgebra::Rotation3::new(axis).matrix();
            let p_star = rigid(&rot, &nalgebra::Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)));
            let r6 = random(rng, &[1, 6], -1.0, 1.0);
            let t = random(rng, &[1, 3], -5.0, 5.0);
            grad_check(&[r6, t], |g, ids| {
                let m = lift(rot6d_graph(g, ids[0]))?;
                lift(symmetry_corner_loss_graph(g, m, ids[1], &p_star, &model, 10.0))
            }, opts)?
        }
        other => unreachable!("unknown grad case {other}"),
    };
    Ok(report.max_rel_error)
}

/// Runs `trials` random checks per case; a case passes when every trial's
/// maximum relative error is below `opts.tolerance`.
pub fn run_grad_suite(trials: usize, seed: u64, opts: GradCheckOptions) -> Result<Vec<GradCaseResult>> {
    let mut out = Vec::new();
    for (ci, name) in CASES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((ci as u64 + 1) << 32));
        let mut worst = 0f64;
        for _ in 0..trials {
            worst = worst.max(trial(name, &mut rng, opts)?);
        }
        out.push(GradCaseResult { name, trials, max_rel_error: worst, passed: worst < opts.tolerance });
    }
    Ok(out)
}
