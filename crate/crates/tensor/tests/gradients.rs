//! Finite-difference checks for every differentiable op, plus the
//! scalar-loop oracles for bilinear sampling.

use kpt_tensor::gradcheck::{grad_check, GradCheckOptions};
use kpt_tensor::{Graph, NodeId, Reduction, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct coefficient to the checked scalar.
fn probe(g: &mut Graph<f64>, y: NodeId) -> Result<NodeId> {
    let n = g.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64) / 50.0 - 1.0).collect();
    let wt = g.constant(Tensor::from_f64(g.shape(y), &w)?);
    let p = g.mul(y, wt)?;
    Ok(g.sum(p))
}

fn check_op<L, B>(name: &str, leaves: L, build: B)
where
    L: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    B: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut worst = 0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let ls = leaves(&mut rng);
        let report = grad_check(&ls, &build, GradCheckOptions::default()).unwrap();
        worst = worst.max(report.max_rel_error);
        assert!(report.passed, "{name} trial {trial}: {report:?}");
    }
    assert!(worst < 1e-4, "{name}: {worst}");
}

#[test]
fn elementwise_binary_with_broadcast() {
    check_op(
        "binary",
        |r| vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], 0.5, 2.0)],
        |g, x| {
            let a = g.add(x[0], x[1])?;
            let m = g.mul(a, x[1])?;
            let d = g.div(m, x[1])?;
            let s = g.sub(d, x[0])?;
            let s = g.mul(s, m)?;
            probe(g, s)
        },
    );
}

#[test]
fn unary_ops() {
    check_op(
        "unary",
        |r| vec![rand_tensor(r, &[2, 5], 0.2, 1.5)],
        |g, x| {
            let parts = [
                g.exp(x[0]),
                g.log(x[0]),
                g.sqrt(x[0]),
                g.sigmoid(x[0]),
                g.tanh(x[0]),
                g.square(x[0]),
                g.sin(x[0]),
                g.cos(x[0]),
                g.neg(x[0]),
            ];
            let c = g.concat(&parts, 1)?;
            probe(g, c)
        },
    );
}

#[test]
fn relu_and_abs_away_from_kink() {
    check_op(
        "relu/abs",
        |r| {
            // keep magnitudes ≥ 0.05 so ±h never crosses zero
            let t = rand_tensor(r, &[12], 0.05, 1.0);
            let signs: Vec<f64> = t.data().iter().enumerate().map(|(i, v)| if i % 3 == 0 { -v } else { *v }).collect();
            vec![Tensor::from_f64(&[12], &signs).unwrap()]
        },
        |g, x| {
            let a = g.relu(x[0]);
            let b = g.abs(x[0]);
            let c = g.concat(&[a, b], 0)?;
            probe(g, c)
        },
    );
}

#[test]
fn matmul_all_transpose_flags() {
    check_op(
        "matmul",
        |r| {
            vec![
                rand_tensor(r, &[3, 4], -1.0, 1.0),
                rand_tensor(r, &[4, 2], -1.0, 1.0),
                rand_tensor(r, &[4, 3], -1.0, 1.0),
                rand_tensor(r, &[2, 4], -1.0, 1.0),
            ]
        },
        |g, x| {
            let nn = g.matmul_t(x[0], x[1], false, false)?;
            let tn = g.matmul_t(x[2], x[1], true, false)?;
            let nt = g.matmul_t(x[0], x[3], false, true)?;
            let tt = g.matmul_t(x[2], x[3], true, true)?;
            let c = g.concat(&[nn, tn, nt, tt], 0)?;
            probe(g, c)
        },
    );
}

#[test]
fn conv_relu_mean_composite() {
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)] {
        check_op(
            "conv",
            |r| {
                vec![
                    rand_tensor(r, &[2, 2, 6, 5], -1.0, 1.0),
                    rand_tensor(r, &[3, 2, k, k], -0.5, 0.5),
                    rand_tensor(r, &[3], -0.1, 0.1),
                ]
            },
            move |g, x| {
                let y = g.conv2d(x[0], x[1], Some(x[2]), s, p)?;
                let y = g.sigmoid(y);
                let y = g.relu(y);
                probe(g, y)
            },
        );
    }
}

#[test]
fn conv_relu_mean_plain() {
    check_op(
        "conv->relu->mean",
        |r| vec![rand_tensor(r, &[1, 2, 5, 5], -1.0, 1.0), rand_tensor(r, &[2, 2, 3, 3], -0.5, 0.5)],
        |g, x| {
            let y = g.conv2d(x[0], x[1], None, 1, 1)?;
            // shift away from the ReLU kink
            let y = g.add_scalar(y, 5.0);
            let y = g.relu(y);
            let y = g.square(y);
            Ok(g.mean(y))
        },
    );
}

#[test]
fn upsample_concat_slice_gather_reshape() {
    check_op(
        "shape ops",
        |r| vec![rand_tensor(r, &[1, 2, 3, 3], -1.0, 1.0), rand_tensor(r, &[1, 1, 6, 6], -1.0, 1.0)],
        |g, x| {
            let u = g.upsample_nearest(x[0], 2)?;
            let c = g.concat(&[u, x[1]], 1)?;
            let s = g.slice(c, 1, 1, 2)?;
            let r = g.reshape(s, &[2, 36])?;
            let gt = g.gather(r, 1, &[0, 5, 5, 35, 17])?;
            let gr = g.gather(r, 0, &[1, 1, 0])?;
            let sa = g.sum_axis(gr, 1)?;
            let a = probe(g, gt)?;
            let b = probe(g, sa)?;
            g.add(a, b)
        },
    );
}

#[test]
fn softmax_and_cross_entropy() {
    check_op(
        "softmax/ce",
        |r| vec![rand_tensor(r, &[4, 5], -2.0, 2.0)],
        |g, x| {
            let p = g.softmax(x[0]);
            let a = probe(g, p)?;
            let ce = g.cross_entropy(x[0], &[0, 3, 4, 1], Reduction::Sum)?;
            let cm = g.cross_entropy(x[0], &[2, 2, 0, 1], Reduction::Mean)?;
            let s = g.add(a, ce)?;
            g.add(s, cm)
        },
    );
}

#[test]
fn layer_norm_all_inputs() {
    check_op(
        "layer_norm",
        |r| {
            vec![
                rand_tensor(r, &[3, 6], -2.0, 2.0),
                rand_tensor(r, &[6], 0.5, 1.5),
                rand_tensor(r, &[6], -0.5, 0.5),
            ]
        },
        |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            probe(g, y)
        },
    );
}

#[test]
fn l1_and_mse_losses() {
    check_op(
        "losses",
        |r| vec![rand_tensor(r, &[7], -1.0, 1.0), rand_tensor(r, &[7], 2.0, 3.0)],
        |g, x| {
            let a = g.l1_loss(x[0], x[1])?;
            let b = g.mse_loss(x[0], x[1])?;
            g.add(a, b)
        },
    );
}

#[test]
fn bilinear_sampling_grad_reaches_featmap() {
    check_op(
        "bilinear",
        |r| vec![rand_tensor(r, &[2, 3, 4, 5], -1.0, 1.0)],
        |g, x| {
            let sites = [(0, [0.13, 0.77]), (1, [0.5, 0.5]), (1, [0.99, 0.02]), (0, [1.2, -0.3])];
            let s = g.bilinear_sample(x[0], &sites)?;
            probe(g, s)
        },
    );
}

#[test]
fn axis_angle_rodrigues() {
    check_op(
        "axis_angle",
        |r| vec![rand_tensor(r, &[4, 3], -2.0, 2.0)],
        |g, x| {
            let m = g.axis_angle_to_matrix(x[0])?;
            probe(g, m)
        },
    );
    // near the origin the Taylor branch takes over
    check_op(
        "axis_angle small",
        |r| vec![rand_tensor(r, &[2, 3], -1e-3, 1e-3)],
        |g, x| {
            let m = g.axis_angle_to_matrix(x[0])?;
            probe(g, m)
        },
    );
}

/// Independent four-corner blend, scalar by scalar.
fn bilinear_oracle(map: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
    let px = (u * w as f64 - 0.5).max(0.0).min((w - 1) as f64);
    let py = (v * h as f64 - 0.5).max(0.0).min((h - 1) as f64);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let at = |y: usize, x: usize| map[y * w + x];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[test]
fn bilinear_matches_scalar_oracle_on_random_3x3() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let fm = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        let uv = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let mut g = Graph::<f64>::new();
        let f = g.constant(fm.clone());
        let s = g.bilinear_sample(f, &[(0, uv)]).unwrap();
        for c in 0..2 {
            let want = bilinear_oracle(&fm.data()[c * 9..(c + 1) * 9], 3, 3, uv[0], uv[1]);
            assert!((g.value(s).data()[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_near_constant_input_is_flagged_then_passes_with_jitter() {
    let build = |g: &mut Graph<f64>, x: &[NodeId]| -> Result<NodeId> {
        let gamma = g.constant(Tensor::full(&[4], 1.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let mut ln = g.layer_norm(x[0], gamma, beta, 1e-12)?;
        ln = g.sin(ln);
        probe(g, ln)
    };
    let flat = Tensor::from_f64(&[1, 4], &[1.0, 1.0 + 1e-6, 1.0 - 2e-6, 1.0 + 5e-7]).unwrap();
    let report = grad_check(&[flat], build, GradCheckOptions::default()).unwrap();
    assert!(!report.passed);
    assert!(report.leaves[0].near_singular, "{report:?}");

    let jittered = Tensor::from_f64(&[1, 4], &[1.0, 1.3, 0.6, 1.1]).unwrap();
    let report = grad_check(&[jittered], build, GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn same_graph_twice_is_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0).cast::<f32>();
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let xi = g.param(x);
        let wi = g.param(w);
        let y = g.conv2d(xi, wi, None, 2, 1).unwrap();
        let y = g.reshape(y, &[8, 16]).unwrap();
        let y = g.softmax(y);
        let l = g.mean(y);
        let l = g.sqrt(l);
        g.backward(l).unwrap();
        (g.value(y).data().to_vec(), g.grad(wi).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
