//! Object rotation from the 6D parameterization, the symmetry-aware
//! corner loss and the MSSD metric.

use kpt_tensor::{Graph, NodeId, Real, Tensor};
use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{KptError, Result};
use crate::synthgen::object::{transform_point, ObjectModel};
use crate::synthgen::SceneSample;

const DEGENERATE_EPS: f64 = 1e-8;

/// Identity rotation in the 6D parameterization.
pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Gram-Schmidt on the two column vectors `r6 = (a1, a2)`.
pub fn rot6d_to_matrix(r6: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(r6[0], r6[1], r6[2]);
    let a2 = Vector3::new(r6[3], r6[4], r6[5]);
    let n1 = a1.norm();
    if n1 < DEGENERATE_EPS {
        return Err(KptError::Degenerate("6D rotation: first column is zero".into()));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let n2 = u.norm();
    if n2 < DEGENERATE_EPS {
        return Err(KptError::Degenerate("6D rotation: columns are parallel".into()));
    }
    let b2 = u / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

fn row_norm<T: Real>(g: &mut Graph<T>, v: NodeId) -> Result<NodeId> {
    let sq = g.square(v);
    let s = g.sum_axis(sq, 1)?;
    Ok(g.sqrt(s))
}

/// Tape version of [`rot6d_to_matrix`] for a `1×6` node; returns `3×3`.
/// Degenerate inputs are rejected from their current values.
pub fn rot6d_graph<T: Real>(g: &mut Graph<T>, r6: NodeId) -> Result<NodeId> {
    let vals: Vec<f64> = g.value(r6).to_f64_vec();
    if vals.len() != 6 {
        return Err(KptError::InvalidConfig(format!("6D rotation expects 6 values, got {}", vals.len())));
    }
    rot6d_to_matrix(&std::array::from_fn(|i| vals[i]))?;
    let a1 = g.slice(r6, 1, 0, 3)?;
    let a2 = g.slice(r6, 1, 3, 3)?;
    let n1 = row_norm(g, a1)?;
    let b1 = g.div(a1, n1)?;
    let prod = g.mul(b1, a2)?;
    let d = g.sum_axis(prod, 1)?;
    let proj = g.mul(b1, d)?;
    let u = g.sub(a2, proj)?;
    let n2 = row_norm(g, u)?;
    let b2 = g.div(u, n2)?;
    let c = |g: &mut Graph<T>, v: NodeId, i: usize| g.slice(v, 1, i, 1);
    let (x1, y1, z1) = (c(g, b1, 0)?, c(g, b1, 1)?, c(g, b1, 2)?);
    let (x2, y2, z2) = (c(g, b2, 0)?, c(g, b2, 1)?, c(g, b2, 2)?);
    let mut cross = |p: NodeId, q: NodeId, r: NodeId, s: NodeId| -> Result<NodeId> {
        let a = g.mul(p, q)?;
        let b = g.mul(r, s)?;
        Ok(g.sub(a, b)?)
    };
    let b3x = cross(y1, z2, z1, y2)?;
    let b3y = cross(z1, x2, x1, z2)?;
    let b3z = cross(x1, y2, y1, x2)?;
    let b3 = g.concat(&[b3x, b3y, b3z], 1)?;
    // rows b1, b2, b3 form Rᵀ
    let rt = g.concat(&[b1, b2, b3], 0)?;
    let eye = g.constant(Tensor::from_f64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?);
    Ok(g.matmul_t(rt, eye, true, false)?)
}

fn check_set(model: &ObjectModel) -> Result<()> {
    if model.symmetries.is_empty() {
        return Err(KptError::InvalidModel("symmetry set is empty".into()));
    }
    Ok(())
}

fn corner_errors(p_hat: &Matrix4<f64>, p_star: &Matrix4<f64>, corners: &[Vector3<f64>; 8], sym: &Matrix3<f64>) -> [f64; 8] {
    std::array::from_fn(|i| (transform_point(p_hat, &corners[i]) - transform_point(p_star, &(sym * corners[i]))).norm_squared())
}

/// Values of the corner loss for every symmetry member.
pub fn corner_loss_per_symmetry(p_hat: &Matrix4<f64>, p_star: &Matrix4<f64>, model: &ObjectModel) -> Result<Vec<f64>> {
    check_set(model)?;
    let corners = model.corners();
    Ok(model.symmetries.iter().map(|s| corner_errors(p_hat, p_star, &corners, s).iter().sum::<f64>() / 8.0).collect())
}

/// Index of the minimizing symmetry; ties go to the lowest index.
pub fn best_symmetry(p_hat: &Matrix4<f64>, p_star: &Matrix4<f64>, model: &ObjectModel) -> Result<usize> {
    let losses = corner_loss_per_symmetry(p_hat, p_star, model)?;
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `min_S (1/8) Σ_i ‖P̂·B_i − P*·S·B_i‖²`.
pub fn symmetry_corner_loss(p_hat: &Matrix4<f64>, p_star: &Matrix4<f64>, model: &ObjectModel) -> Result<f64> {
    let losses = corner_loss_per_symmetry(p_hat, p_star, model)?;
    Ok(losses[best_symmetry(p_hat, p_star, model)?])
}

/// `min_S max_i ‖P̂·B_i − P*·S·B_i‖`.
pub fn mssd(p_hat: &Matrix4<f64>, p_star: &Matrix4<f64>, model: &ObjectModel) -> Result<f64> {
    check_set(model)?;
    let corners = model.corners();
    Ok(model
        .symmetries
        .iter()
        .map(|s| corner_errors(p_hat, p_star, &corners, s).iter().fold(0.0f64, |m, &e| m.max(e)).sqrt())
        .fold(f64::INFINITY, f64::min))
}

/// Tape version of the corner loss for a predicted rotation `3×3` and
/// translation `1×3` (both in the loss's length unit `unit_mm`). The
/// minimizing symmetry is chosen from current values and then held fixed.
pub fn symmetry_corner_loss_graph<T: Real>(
    g: &mut Graph<T>,
    rot: NodeId,
    trans: NodeId,
    p_star: &Matrix4<f64>,
    model: &ObjectModel,
    unit_mm: f64,
) -> Result<NodeId> {
    check_set(model)?;
    let r: Vec<f64> = g.value(rot).to_f64_vec();
    let t: Vec<f64> = g.value(trans).to_f64_vec();
    let mut p_hat = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            p_hat[(i, j)] = r[i * 3 + j];
        }
        p_hat[(i, 3)] = t[i] * unit_mm;
    }
    let best = best_symmetry(&p_hat, p_star, model)?;
    let corners = model.corners();
    let b: Vec<f64> = corners.iter().flat_map(|c| [c.x / unit_mm, c.y / unit_mm, c.z / unit_mm]).collect();
    let target: Vec<f64> = corners
        .iter()
        .flat_map(|c| {
            let p = transform_point(p_star, &(model.symmetries[best] * c)) / unit_mm;
            [p.x, p.y, p.z]
        })
        .collect();
    let b = g.constant(Tensor::from_f64(&[8, 3], &b)?);
    let target = g.constant(Tensor::from_f64(&[8, 3], &target)?);
    let rotated = g.matmul_t(b, rot, false, true)?;
    let pred = g.add(rotated, trans)?;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / 8.0))
}

/// Object pose outputs on the tape: rotation `3×3` and translation `1×3`
/// in millimetres relative to the reference hand root.
#[derive(Clone, Copy, Debug)]
pub struct ObjectPoseOutput {
    pub rotation: NodeId,
    pub translation: NodeId,
}

pub const TRANSLATION_SCALE_MM: f64 = 100.0;

/// Ground-truth object pose with its origin expressed relative to the
/// right-hand root (the left root when the right hand is absent).
pub fn relative_object_pose(sample: &SceneSample) -> Matrix4<f64> {
    let mut p = sample.object_pose_matrix();
    let h = if sample.hand_present[1] { 1 } else { 0 };
    for c in 0..3 {
        p[(c, 3)] -= sample.joints3d[h][0][c];
    }
    p
}

/// Interprets the rotation query (`1×6`) and translation query (`1×3`).
pub fn object_branch_outputs<T: Real>(g: &mut Graph<T>, rot_raw: NodeId, trans_raw: NodeId) -> Result<ObjectPoseOutput> {
    if g.shape(rot_raw) != [1, 6] || g.shape(trans_raw) != [1, 3] {
        return Err(KptError::InvalidConfig(format!("object heads must be 1×6 and 1×3, got {:?} and {:?}", g.shape(rot_raw), g.shape(trans_raw))));
    }
    let rotation = rot6d_graph(g, rot_raw)?;
    let translation = g.scale(trans_raw, TRANSLATION_SCALE_MM);
    Ok(ObjectPoseOutput { rotation, translation })
}
