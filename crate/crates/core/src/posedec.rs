//! Hand-pose representations decoded from transformer outputs, with their
//! reconstruction to 3D and their training losses.

use kpt_tensor::{Graph, NodeId, Real, Tensor};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{KptError, Result};
use crate::synthgen::heatmap::joints_at_resolution;
use crate::synthgen::skeleton::{
    articulation_index, shape_basis, HandSkeletonTemplate, NUM_ARTICULATED, NUM_BONES, NUM_JOINTS, PARENTS, SHAPE_DIM,
};
use crate::synthgen::SceneSample;

pub type Joints = [[f64; 3]; NUM_JOINTS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Representation {
    #[serde(rename = "jv")]
    JointVectors,
    #[serde(rename = "25d")]
    TwoFiveD,
    #[serde(rename = "angles")]
    Angles,
}

impl Representation {
    pub fn tag(self) -> &'static str {
        match self {
            Representation::JointVectors => "jv",
            Representation::TwoFiveD => "25d",
            Representation::Angles => "angles",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "jv" => Some(Representation::JointVectors),
            "25d" => Some(Representation::TwoFiveD),
            "angles" => Some(Representation::Angles),
            _ => None,
        }
    }

    pub fn joint_queries_per_hand(self) -> usize {
        match self {
            Representation::JointVectors => NUM_BONES,
            Representation::TwoFiveD => NUM_JOINTS,
            Representation::Angles => NUM_ARTICULATED,
        }
    }

    /// Width of every joint query's output.
    pub fn joint_out_dim(self) -> usize {
        3
    }

    /// Width of the extra query's output: `T` plus, where used, the weak
    /// camera and shape.
    pub fn extra_out_dim(self) -> usize {
        match self {
            Representation::JointVectors => 6,
            Representation::TwoFiveD => 3,
            Representation::Angles => 3 + SHAPE_DIM + 3,
        }
    }

    pub fn query_count(self, object_branch: bool) -> usize {
        2 * self.joint_queries_per_hand() + 1 + if object_branch { 2 } else { 0 }
    }
}

/// Parent table shared by both hands, parents before children.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KinematicTree {
    pub parent: [Option<usize>; NUM_JOINTS],
}

impl Default for KinematicTree {
    fn default() -> Self {
        Self { parent: PARENTS }
    }
}

impl KinematicTree {
    /// `A[j][b] = 1` iff bone `b` (ending at joint `b + 1`) lies on the path
    /// from the root to joint `j`, so that `J = A · V`.
    pub fn ancestor_matrix(&self) -> Vec<f64> {
        let mut a = vec![0.0; NUM_JOINTS * NUM_BONES];
        for j in 0..NUM_JOINTS {
            let mut k = j;
            while let Some(p) = self.parent[k] {
                a[j * NUM_BONES + (k - 1)] = 1.0;
                k = p;
            }
        }
        a
    }
}

pub fn accumulate_joint_vectors(v: &[[f64; 3]; NUM_BONES], tree: &KinematicTree) -> Joints {
    let mut j = [[0.0; 3]; NUM_JOINTS];
    for k in 1..NUM_JOINTS {
        let p = tree.parent[k].expect("non-root joint has a parent");
        j[k] = std::array::from_fn(|c| j[p][c] + v[k - 1][c]);
    }
    j
}

pub fn diff_to_vectors(joints: &Joints, tree: &KinematicTree) -> [[f64; 3]; NUM_BONES] {
    std::array::from_fn(|b| {
        let p = tree.parent[b + 1].expect("non-root joint has a parent");
        std::array::from_fn(|c| joints[b + 1][c] - joints[p][c])
    })
}

/// Parent-relative depths `ΔZ^p` of the non-root joints.
pub fn parent_relative_depths(joints: &Joints, tree: &KinematicTree) -> [f64; NUM_BONES] {
    diff_to_vectors(joints, tree).map(|v| v[2])
}

/// Lifts 2D joints with parent-relative depths to camera space using the
/// root depth and intrinsics `k` at the resolution of `j2d`.
pub fn reconstruct_25d(
    j2d: &[[f64; 2]; NUM_JOINTS],
    dzp: &[f64; NUM_BONES],
    z_root: f64,
    k: &Matrix3<f64>,
    tree: &KinematicTree,
) -> Result<Joints> {
    let k_inv = k.try_inverse().filter(|_| k.determinant().abs() > 1e-12).ok_or_else(|| KptError::Degenerate("intrinsics matrix is singular".into()))?;
    let mut dzr = [0.0; NUM_JOINTS];
    for j in 1..NUM_JOINTS {
        let p = tree.parent[j].expect("non-root joint has a parent");
        dzr[j] = dzr[p] + dzp[j - 1];
    }
    Ok(std::array::from_fn(|j| {
        let ray = k_inv * Vector3::new(j2d[j][0], j2d[j][1], 1.0);
        (ray * (z_root + dzr[j])).into()
    }))
}

pub fn forward_kinematics(theta: &[[f64; 3]; NUM_ARTICULATED], beta: &[f64; SHAPE_DIM], template: &HandSkeletonTemplate) -> Joints {
    let theta = theta.map(Vector3::from);
    template.forward_kinematics(&theta, beta).map(Into::into)
}

pub fn weak_project(points: &[[f64; 3]], s_c: f64, t_c: [f64; 2]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [s_c * p[0] + t_c[0], s_c * p[1] + t_c[1]]).collect()
}

pub fn apply_left_translation(left_rootrel: &Joints, t_lr: [f64; 3]) -> Joints {
    left_rootrel.map(|p| std::array::from_fn(|c| p[c] + t_lr[c]))
}

// ---- differentiable versions -----------------------------------------

/// `J (21×3) = A · V (20×3)`.
pub fn accumulate_graph<T: Real>(g: &mut Graph<T>, v: NodeId, tree: &KinematicTree) -> Result<NodeId> {
    let a = g.constant(Tensor::from_f64(&[NUM_JOINTS, NUM_BONES], &tree.ancestor_matrix())?);
    Ok(g.matmul(a, v)?)
}

/// `s_c · xy + t_c` for `points: n×3`, `s_c: 1×1`, `t_c: 1×2`.
pub fn weak_project_graph<T: Real>(g: &mut Graph<T>, points: NodeId, s_c: NodeId, t_c: NodeId) -> Result<NodeId> {
    let xy = g.slice(points, 1, 0, 2)?;
    let scaled = g.mul(xy, s_c)?;
    Ok(g.add(scaled, t_c)?)
}

/// Forward kinematics on the tape: `theta: 16×3`, `beta: 1×10`; returns
/// root-relative joints `21×3`.
pub fn fk_graph<T: Real>(g: &mut Graph<T>, theta: NodeId, beta: NodeId, template: &HandSkeletonTemplate) -> Result<NodeId> {
    let rots = g.axis_angle_to_matrix(theta)?;
    let basis = shape_basis();
    let basis_t: Vec<f64> = (0..SHAPE_DIM).flat_map(|k| basis.iter().map(move |row| row[k])).collect();
    let wt = g.constant(Tensor::from_f64(&[SHAPE_DIM, NUM_BONES], &basis_t)?);
    let scales = g.matmul(beta, wt)?;
    let scales = g.add_scalar(scales, 1.0);
    let local: Vec<NodeId> = (0..NUM_ARTICULATED)
        .map(|a| {
            let r = g.slice(rots, 0, a, 1)?;
            g.reshape(r, &[3, 3])
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut global: Vec<Option<NodeId>> = vec![None; NUM_JOINTS];
    let mut pos: Vec<NodeId> = Vec::with_capacity(NUM_JOINTS);
    pos.push(g.constant(Tensor::zeros(&[3, 1])));
    global[0] = Some(local[0]);
    for j in 1..NUM_JOINTS {
        let p = template.parent[j].expect("non-root joint has a parent");
        let gp = global[p].expect("parents precede children");
        let off = template.rest_offset(j);
        let off = g.constant(Tensor::from_f64(&[3, 1], &[off.x, off.y, off.z])?);
        let s = g.slice(scales, 1, j - 1, 1)?;
        let off = g.mul(off, s)?;
        let step = g.matmul(gp, off)?;
        pos.push(g.add(pos[p], step)?);
        global[j] = match articulation_index(j) {
            Some(a) => Some(g.matmul(gp, local[a])?),
            None => None,
        };
    }
    // 3×21 columns, transposed to rows through an identity product
    let stacked = g.concat(&pos, 1)?;
    let eye = identity(g, 3)?;
    Ok(g.matmul_t(stacked, eye, true, false)?)
}

fn identity<T: Real>(g: &mut Graph<T>, n: usize) -> Result<NodeId> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        d[i * n + i] = 1.0;
    }
    Ok(g.constant(Tensor::from_f64(&[n, n], &d)?))
}

// ---- decoding raw head outputs ---------------------------------------

/// Maps raw head outputs to physical units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputScales {
    pub vector_mm: f64,
    pub translation_mm: f64,
    pub depth_mm: f64,
    pub beta: f64,
    /// Nominal weak-camera scale, heatmap px per mm.
    pub s0: f64,
    pub heatmap_size: f64,
}

impl OutputScales {
    pub fn new(heatmap_size: usize, image_size: usize) -> Self {
        let focal_hm = 1.15 * image_size as f64 * heatmap_size as f64 / image_size as f64;
        Self {
            vector_mm: 10.0,
            translation_mm: 100.0,
            depth_mm: 10.0,
            beta: 0.1,
            s0: focal_hm / 470.0,
            heatmap_size: heatmap_size as f64,
        }
    }

    fn half(&self) -> f64 {
        self.heatmap_size / 2.0
    }
}

/// Decoded tape nodes of one sample.
#[derive(Clone, Debug)]
pub struct PoseGraph {
    /// Per hand, `21×3`: the right hand root-relative, the left hand in the
    /// right-root frame when both hands are present.
    pub joints3d: [NodeId; 2],
    pub t_lr: NodeId,
    pub vectors: Option<[NodeId; 2]>,
    pub weak2d: Option<[NodeId; 2]>,
    pub j2d: Option<[NodeId; 2]>,
    pub dzp: Option<[NodeId; 2]>,
    pub theta: Option<[NodeId; 2]>,
}

/// Interprets one sample's raw outputs: `joints: (2·Qh)×3` rows ordered
/// left then right, `extra: 1×E`.
pub fn decode_graph<T: Real>(
    g: &mut Graph<T>,
    rep: Representation,
    joints: NodeId,
    extra: NodeId,
    both_hands: bool,
    scales: &OutputScales,
) -> Result<PoseGraph> {
    let qh = rep.joint_queries_per_hand();
    let tree = KinematicTree::default();
    let t_raw = g.slice(extra, 1, 0, 3)?;
    let t_lr = g.scale(t_raw, scales.translation_mm);
    let per_hand: Vec<NodeId> = (0..2).map(|h| g.slice(joints, 0, h * qh, qh)).collect::<std::result::Result<_, _>>()?;
    let weak_cam = |g: &mut Graph<T>, at: usize| -> Result<(NodeId, NodeId)> {
        let s_raw = g.slice(extra, 1, at, 1)?;
        let s_exp = g.exp(s_raw);
        let s_c = g.scale(s_exp, scales.s0);
        let t_raw = g.slice(extra, 1, at + 1, 2)?;
        let t_scaled = g.scale(t_raw, scales.half());
        let t_c = g.add_scalar(t_scaled, scales.half());
        Ok((s_c, t_c))
    };
    let shift_left = |g: &mut Graph<T>, j: NodeId| -> Result<NodeId> {
        if both_hands {
            Ok(g.add(j, t_lr)?)
        } else {
            Ok(j)
        }
    };
    match rep {
        Representation::JointVectors => {
            let (s_c, t_c) = weak_cam(g, 3)?;
            let mut vectors = [per_hand[0]; 2];
            let mut j3 = [per_hand[0]; 2];
            let mut w2 = [per_hand[0]; 2];
            for h in 0..2 {
                vectors[h] = g.scale(per_hand[h], scales.vector_mm);
                let rel = accumulate_graph(g, vectors[h], &tree)?;
                j3[h] = if h == 0 { shift_left(g, rel)? } else { rel };
                w2[h] = weak_project_graph(g, j3[h], s_c, t_c)?;
            }
            Ok(PoseGraph { joints3d: j3, t_lr, vectors: Some(vectors), weak2d: Some(w2), j2d: None, dzp: None, theta: None })
        }
        Representation::TwoFiveD => {
            let mut j2d = [per_hand[0]; 2];
            let mut dzp = [per_hand[0]; 2];
            for h in 0..2 {
                let uv = g.slice(per_hand[h], 1, 0, 2)?;
                let uv = g.scale(uv, scales.half());
                j2d[h] = g.add_scalar(uv, scales.half());
                let dz = g.slice(per_hand[h], 0, 1, NUM_BONES)?;
                let dz = g.slice(dz, 1, 2, 1)?;
                dzp[h] = g.scale(dz, scales.depth_mm);
            }
            // 3D needs the root depth and intrinsics; it is formed at evaluation.
            Ok(PoseGraph { joints3d: j2d, t_lr, vectors: None, weak2d: None, j2d: Some(j2d), dzp: Some(dzp), theta: None })
        }
        Representation::Angles => {
            let beta_raw = g.slice(extra, 1, 3, SHAPE_DIM)?;
            let beta = g.scale(beta_raw, scales.beta);
            let (s_c, t_c) = weak_cam(g, 3 + SHAPE_DIM)?;
            let mut j3 = [per_hand[0]; 2];
            let mut w2 = [per_hand[0]; 2];
            for (h, hand) in crate::synthgen::Hand::BOTH.iter().enumerate() {
                let template = HandSkeletonTemplate::new(*hand);
                let rel = fk_graph(g, per_hand[h], beta, &template)?;
                j3[h] = if h == 0 { shift_left(g, rel)? } else { rel };
                w2[h] = weak_project_graph(g, j3[h], s_c, t_c)?;
            }
            Ok(PoseGraph { joints3d: j3, t_lr, vectors: None, weak2d: Some(w2), j2d: None, dzp: None, theta: Some([per_hand[0], per_hand[1]]) })
        }
    }
}

// ---- targets and losses ------------------------------------------------

/// Supervision for one sample, in millimetres and heatmap pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct HandTargets {
    pub present: [bool; 2],
    /// Right hand root-relative; left hand root-relative plus `t_lr` when
    /// both hands are present.
    pub joints3d: [Joints; 2],
    pub vectors: [[[f64; 3]; NUM_BONES]; 2],
    pub joints2d: [[[f64; 2]; NUM_JOINTS]; 2],
    pub dzp: [[f64; NUM_BONES]; 2],
    pub theta: [[[f64; 3]; NUM_ARTICULATED]; 2],
    pub t_lr: [f64; 3],
}

impl HandTargets {
    pub fn from_sample(s: &SceneSample, heatmap_w: usize, heatmap_h: usize) -> Self {
        let tree = KinematicTree::default();
        let both = s.interacting();
        let t_lr: [f64; 3] = if both { s.t_lr().into() } else { [0.0; 3] };
        let mut joints3d = [[[0.0; 3]; NUM_JOINTS]; 2];
        let mut vectors = [[[0.0; 3]; NUM_BONES]; 2];
        let mut dzp = [[0.0; NUM_BONES]; 2];
        for h in 0..2 {
            if !s.hand_present[h] {
                continue;
            }
            let rel = s.root_relative(h).map(Into::into);
            vectors[h] = diff_to_vectors(&rel, &tree);
            dzp[h] = parent_relative_depths(&rel, &tree);
            joints3d[h] = if h == 0 { apply_left_translation(&rel, t_lr) } else { rel };
        }
        Self {
            present: s.hand_present,
            joints3d,
            vectors,
            joints2d: joints_at_resolution(s, heatmap_w, heatmap_h),
            dzp,
            theta: s.theta,
            t_lr,
        }
    }
}

fn flat<const N: usize>(rows: &[[f64; N]]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Accumulates matched prediction/target pieces and reduces each term by a
/// mean-absolute error over all of its elements.
#[derive(Default)]
pub struct L1Term {
    preds: Vec<NodeId>,
    targets: Vec<f64>,
    cols: usize,
}

impl L1Term {
    pub fn push<T: Real>(&mut self, g: &Graph<T>, pred: NodeId, target: Vec<f64>) {
        let shape = g.shape(pred);
        self.cols = *shape.last().expect("non-scalar prediction");
        debug_assert_eq!(shape.iter().product::<usize>(), target.len());
        self.preds.push(pred);
        self.targets.extend(target);
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn finish<T: Real>(self, g: &mut Graph<T>) -> Result<Option<NodeId>> {
        if self.preds.is_empty() {
            return Ok(None);
        }
        let mut reshaped = Vec::with_capacity(self.preds.len());
        for p in self.preds {
            let n = g.shape(p).iter().product::<usize>();
            reshaped.push(g.reshape(p, &[n / self.cols, self.cols])?);
        }
        let pred = if reshaped.len() == 1 { reshaped[0] } else { g.concat(&reshaped, 0)? };
        let rows = self.targets.len() / self.cols;
        let target = g.constant(Tensor::from_f64(&[rows, self.cols], &self.targets)?);
        Ok(Some(g.l1_loss(pred, target)?))
    }
}

fn sum_terms<T: Real>(g: &mut Graph<T>, terms: Vec<L1Term>) -> Result<Option<NodeId>> {
    let mut total: Option<NodeId> = None;
    for t in terms {
        if let Some(v) = t.finish(g)? {
            total = Some(match total {
                Some(acc) => g.add(acc, v)?,
                None => v,
            });
        }
    }
    Ok(total)
}

/// Joint-vector loss: `L_V + L_3D + L_2D`, each a mean absolute error.
pub fn loss_jv<T: Real>(g: &mut Graph<T>, preds: &[PoseGraph], gts: &[HandTargets]) -> Result<Option<NodeId>> {
    let mut lv = L1Term::default();
    let mut l3 = L1Term::default();
    let mut l2 = L1Term::default();
    for (p, t) in preds.iter().zip(gts) {
        let vectors = p.vectors.ok_or_else(|| KptError::InvalidConfig("joint-vector loss needs joint-vector outputs".into()))?;
        let weak = p.weak2d.expect("joint-vector outputs carry a weak projection");
        for h in 0..2 {
            if !t.present[h] {
                continue;
            }
            lv.push(g, vectors[h], flat(&t.vectors[h]));
            l3.push(g, p.joints3d[h], flat(&t.joints3d[h]));
            l2.push(g, weak[h], flat(&t.joints2d[h]));
        }
    }
    sum_terms(g, vec![lv, l3, l2])
}

/// 2.5D loss: `L_2D + L_Z + L_T`.
pub fn loss_25d<T: Real>(g: &mut Graph<T>, preds: &[PoseGraph], gts: &[HandTargets]) -> Result<Option<NodeId>> {
    let mut l2 = L1Term::default();
    let mut lz = L1Term::default();
    let mut lt = L1Term::default();
    for (p, t) in preds.iter().zip(gts) {
        let j2d = p.j2d.ok_or_else(|| KptError::InvalidConfig("2.5D loss needs 2.5D outputs".into()))?;
        let dzp = p.dzp.expect("2.5D outputs carry depths");
        for h in 0..2 {
            if !t.present[h] {
                continue;
            }
            l2.push(g, j2d[h], flat(&t.joints2d[h]));
            lz.push(g, dzp[h], t.dzp[h].to_vec());
        }
        if t.present[0] && t.present[1] {
            lt.push(g, p.t_lr, t.t_lr.to_vec());
        }
    }
    sum_terms(g, vec![l2, lz, lt])
}

/// Angle loss: `L_3D + L_θ + L_2D`.
pub fn loss_angles<T: Real>(g: &mut Graph<T>, preds: &[PoseGraph], gts: &[HandTargets]) -> Result<Option<NodeId>> {
    let mut l3 = L1Term::default();
    let mut lth = L1Term::default();
    let mut l2 = L1Term::default();
    for (p, t) in preds.iter().zip(gts) {
        let theta = p.theta.ok_or_else(|| KptError::InvalidConfig("angle loss needs angle outputs".into()))?;
        let weak = p.weak2d.expect("angle outputs carry a weak projection");
        for h in 0..2 {
            if !t.present[h] {
                continue;
            }
            l3.push(g, p.joints3d[h], flat(&t.joints3d[h]));
            lth.push(g, theta[h], flat(&t.theta[h]));
            l2.push(g, weak[h], flat(&t.joints2d[h]));
        }
    }
    sum_terms(g, vec![l3, lth, l2])
}

pub fn pose_loss<T: Real>(g: &mut Graph<T>, rep: Representation, preds: &[PoseGraph], gts: &[HandTargets]) -> Result<Option<NodeId>> {
    match rep {
        Representation::JointVectors => loss_jv(g, preds, gts),
        Representation::TwoFiveD => loss_25d(g, preds, gts),
        Representation::Angles => loss_angles(g, preds, gts),
    }
}

// ---- decoded (post-tape) poses ----------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPoseJV {
    pub vectors: [[[f64; 3]; NUM_BONES]; 2],
    pub t_lr: [f64; 3],
    pub s_c: f64,
    pub t_c: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPose25D {
    pub j2d: [[[f64; 2]; NUM_JOINTS]; 2],
    pub dzp: [[f64; NUM_BONES]; 2],
    pub t_lr: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPoseAngles {
    pub theta: [[[f64; 3]; NUM_ARTICULATED]; 2],
    pub beta: [f64; SHAPE_DIM],
    pub t_lr: [f64; 3],
    pub s_c: f64,
    pub t_c: [f64; 2],
}

/// Largest axis-angle norm kept when decoding angles.
pub const MAX_ANGLE: f64 = std::f64::consts::PI + 0.1;

/// Decodes raw per-sample outputs into root-relative joints per hand and
/// the relative translation. `k_hm` and `z_root` are needed for 2.5D.
pub fn decode_values(
    rep: Representation,
    joints: &[f64],
    extra: &[f64],
    scales: &OutputScales,
    k_hm: &Matrix3<f64>,
    z_root: [f64; 2],
) -> Result<([Joints; 2], [f64; 3])> {
    let qh = rep.joint_queries_per_hand();
    let tree = KinematicTree::default();
    let t_lr = [0, 1, 2].map(|c| extra[c] * scales.translation_mm);
    let row = |h: usize, q: usize| -> [f64; 3] { std::array::from_fn(|c| joints[(h * qh + q) * 3 + c]) };
    let mut out = [[[0.0; 3]; NUM_JOINTS]; 2];
    for (h, hand) in crate::synthgen::Hand::BOTH.iter().enumerate() {
        out[h] = match rep {
            Representation::JointVectors => {
                let v = std::array::from_fn(|b| row(h, b).map(|x| x * scales.vector_mm));
                accumulate_joint_vectors(&v, &tree)
            }
            Representation::TwoFiveD => {
                let j2d = std::array::from_fn(|j| {
                    let r = row(h, j);
                    [scales.half() + scales.half() * r[0], scales.half() + scales.half() * r[1]]
                });
                let dzp = std::array::from_fn(|b| row(h, b + 1)[2] * scales.depth_mm);
                let abs = reconstruct_25d(&j2d, &dzp, z_root[h], k_hm, &tree)?;
                abs.map(|p| std::array::from_fn(|c| p[c] - abs[0][c]))
            }
            Representation::Angles => {
                let theta = std::array::from_fn(|a| {
                    let w = Vector3::from(row(h, a));
                    let n = w.norm();
                    (if n > MAX_ANGLE { w * (MAX_ANGLE / n) } else { w }).into()
                });
                let beta = std::array::from_fn(|k| extra[3 + k] * scales.beta);
                forward_kinematics(&theta, &beta, &HandSkeletonTemplate::new(*hand))
            }
        };
    }
    Ok((out, t_lr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn query_counts() {
        assert_eq!(Representation::JointVectors.query_count(false), 41);
        assert_eq!(Representation::TwoFiveD.query_count(false), 43);
        assert_eq!(Representation::Angles.query_count(false), 33);
        assert_eq!(Representation::JointVectors.query_count(true), 43);
    }

    #[test]
    fn ancestor_matrix_accumulates() {
        let tree = KinematicTree::default();
        let mut v = [[0.0; 3]; NUM_BONES];
        for (b, row) in v.iter_mut().enumerate() {
            *row = [b as f64, 1.0, -(b as f64) * 0.5];
        }
        let direct = accumulate_joint_vectors(&v, &tree);
        let a = tree.ancestor_matrix();
        for j in 0..NUM_JOINTS {
            for c in 0..3 {
                let s: f64 = (0..NUM_BONES).map(|b| a[j * NUM_BONES + b] * v[b][c]).sum();
                assert_eq!(s, direct[j][c]);
            }
        }
    }

    #[test]
    fn weak_projection_arithmetic() {
        assert_eq!(weak_project(&[[2.0, 3.0, 999.0]], 2.0, [1.0, 1.0]), vec![[5.0, 7.0]]);
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let k = Matrix3::zeros();
        let r = reconstruct_25d(&[[0.0; 2]; NUM_JOINTS], &[0.0; NUM_BONES], 1.0, &k, &KinematicTree::default());
        assert!(matches!(r, Err(KptError::Degenerate(_))));
    }
}
