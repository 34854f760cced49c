//! Transformer encoder-decoder over keypoint tokens with learned joint
//! queries, shared identity heads and shared pose heads.

use kpt_tensor::nn::{Bindings, LayerNorm, Linear, Mlp, ParamGroup, ParamId, ParamStore};
use kpt_tensor::{Graph, NodeId, Real, Reduction, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KptError, Result};
use crate::frontend::{Keypoint, KeypointSource};
use crate::objpose::IDENTITY_6D;
use crate::posedec::Representation;
use crate::synthgen::NUM_JOINTS;

pub const NUM_CLASSES: usize = 2 * NUM_JOINTS + 2;
pub const BACKGROUND_CLASS: usize = 2 * NUM_JOINTS;
pub const OBJECT_CLASS: usize = 2 * NUM_JOINTS + 1;

pub fn joint_class(hand: usize, joint: usize) -> usize {
    hand * NUM_JOINTS + joint
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { n_heads: 4, encoder_layers: 2, decoder_layers: 2, ffn_mult: 4 }
    }
}

/// Row ranges of one sample inside the batched query and key matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Softmax node of one (segment, head): `q_len × k_len`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionRecord {
    pub segment: usize,
    pub head: usize,
    pub weights: NodeId,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, width: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || width % n_heads != 0 {
            return Err(KptError::InvalidConfig(format!("width {width} not divisible by {n_heads} heads")));
        }
        let g = ParamGroup::Transformer;
        Ok(Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), g, width, width),
            wk: Linear::new(store, rng, &format!("{name}.k"), g, width, width),
            wv: Linear::new(store, rng, &format!("{name}.v"), g, width, width),
            wo: Linear::new(store, rng, &format!("{name}.o"), g, width, width),
            n_heads,
            width,
        })
    }

    /// Scaled dot-product attention of `queries` over `keys` (both row
    /// matrices), independently per segment.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bindings,
        queries: NodeId,
        keys: NodeId,
        segments: &[Segment],
    ) -> Result<(NodeId, Vec<AttentionRecord>)> {
        let q = self.wq.forward(g, p, queries)?;
        let k = self.wk.forward(g, p, keys)?;
        let v = self.wv.forward(g, p, keys)?;
        let dh = self.width / self.n_heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut rows = Vec::with_capacity(segments.len());
        let mut records = Vec::with_capacity(segments.len() * self.n_heads);
        for (si, s) in segments.iter().enumerate() {
            let qs = g.slice(q, 0, s.q_start, s.q_len)?;
            let ks = g.slice(k, 0, s.k_start, s.k_len)?;
            let vs = g.slice(v, 0, s.k_start, s.k_len)?;
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = g.slice(qs, 1, h * dh, dh)?;
                let kh = g.slice(ks, 1, h * dh, dh)?;
                let vh = g.slice(vs, 1, h * dh, dh)?;
                let scores = g.matmul_t(qh, kh, false, true)?;
                let scores = g.scale(scores, inv);
                let w = g.softmax(scores);
                records.push(AttentionRecord { segment: si, head: h, weights: w });
                heads.push(g.matmul(w, vh)?);
            }
            rows.push(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? });
        }
        let out = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        Ok((self.wo.forward(g, p, out)?, records))
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        let g = ParamGroup::Transformer;
        Self { up: Linear::new(store, rng, &format!("{name}.up"), g, width, hidden), down: Linear::new(store, rng, &format!("{name}.down"), g, hidden, width) }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h);
        Ok(self.down.forward(g, p, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ffn: FeedForward,
}

/// Classifies every token into a (hand, joint), background or object.
#[derive(Clone, Debug)]
pub struct IdentityHead {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl IdentityHead {
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.norm.gamma, self.norm.beta];
        v.extend(self.mlp.params());
        v
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: NodeId) -> Result<NodeId> {
        let n = self.norm.forward(g, p, x)?;
        Ok(self.mlp.forward(g, p, n)?)
    }
}

/// Shared pose MLP followed by one linear projection per query role.
#[derive(Clone, Debug)]
pub struct PoseHead {
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub joint: Linear,
    pub extra: Linear,
    pub rotation: Option<Linear>,
    pub translation: Option<Linear>,
}

impl PoseHead {
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.norm.gamma, self.norm.beta];
        v.extend(self.mlp.params());
        for l in [Some(&self.joint), Some(&self.extra), self.rotation.as_ref(), self.translation.as_ref()].into_iter().flatten() {
            v.extend([l.weight, l.bias]);
        }
        v
    }
}

/// Raw head outputs of one decoder layer for the whole batch.
#[derive(Clone, Copy, Debug)]
pub struct LayerPoseRaw {
    /// `(B · 2 · Qh) × 3`, rows ordered sample, hand (left first), query.
    pub joints: NodeId,
    /// `B × E`.
    pub extra: NodeId,
    pub rotation: Option<NodeId>,
    pub translation: Option<NodeId>,
}

pub struct EncoderOutput {
    pub encoded: NodeId,
    pub logits: Vec<NodeId>,
    pub attention: Vec<Vec<AttentionRecord>>,
}

pub struct DecoderOutput {
    pub poses: Vec<LayerPoseRaw>,
    pub cross_attention: Vec<Vec<AttentionRecord>>,
}

#[derive(Clone, Debug)]
pub struct KeypointTransformer {
    pub width: usize,
    pub representation: Representation,
    pub object_branch: bool,
    pub queries: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub memory_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub identity_head: IdentityHead,
    pub pose_head: PoseHead,
}

impl KeypointTransformer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        width: usize,
        config: &TransformerConfig,
        representation: Representation,
        object_branch: bool,
    ) -> Result<Self> {
        if config.encoder_layers == 0 || config.decoder_layers == 0 {
            return Err(KptError::InvalidConfig("transformer needs at least one encoder and one decoder layer".into()));
        }
        let g = ParamGroup::Transformer;
        let hidden = config.ffn_mult * width;
        let nq = representation.query_count(object_branch);
        let q: Vec<f64> = (0..nq * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let queries = store.add("queries", g, Tensor::from_f64(&[nq, width], &q)?);
        let mut encoder = Vec::new();
        for l in 0..config.encoder_layers {
            let n = format!("encoder.{l}");
            encoder.push(EncoderLayer {
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), g, width),
                attn: MultiHeadAttention::new(store, rng, &format!("{n}.attn"), width, config.n_heads)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), g, width),
                ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), width, hidden),
            });
        }
        let memory_norm = LayerNorm::new(store, "encoder.out_norm", g, width);
        let mut decoder = Vec::new();
        for l in 0..config.decoder_layers {
            let n = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), g, width),
                self_attn: MultiHeadAttention::new(store, rng, &format!("{n}.self"), width, config.n_heads)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), g, width),
                cross_attn: MultiHeadAttention::new(store, rng, &format!("{n}.cross"), width, config.n_heads)?,
                norm3: LayerNorm::new(store, &format!("{n}.norm3"), g, width),
                ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), width, hidden),
            });
        }
        let identity_head = IdentityHead {
            norm: LayerNorm::new(store, "identity.norm", g, width),
            mlp: Mlp::new(store, rng, "identity.mlp", g, &[width, width, width, NUM_CLASSES]),
        };
        let rotation = object_branch.then(|| {
            let l = Linear::new(store, rng, "pose.rotation", g, width, 6);
            let bias = store.get_mut(l.bias).tensor.data_mut();
            for (b, v) in bias.iter_mut().zip(IDENTITY_6D) {
                *b = T::from_f64(v);
            }
            l
        });
        let pose_head = PoseHead {
            norm: LayerNorm::new(store, "pose.norm", g, width),
            mlp: Mlp::new(store, rng, "pose.mlp", g, &[width, width, width]),
            joint: Linear::new(store, rng, "pose.joint", g, width, representation.joint_out_dim()),
            extra: Linear::new(store, rng, "pose.extra", g, width, representation.extra_out_dim()),
            rotation,
            translation: object_branch.then(|| Linear::new(store, rng, "pose.translation", g, width, 3)),
        };
        Ok(Self { width, representation, object_branch, queries, encoder, memory_norm, decoder, identity_head, pose_head })
    }

    pub fn num_queries(&self) -> usize {
        self.representation.query_count(self.object_branch)
    }

    /// `tokens`: all samples' tokens stacked by row; `lengths[b]` tokens per
    /// sample. Every sample must have at least one token.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, tokens: NodeId, lengths: &[usize]) -> Result<EncoderOutput> {
        if lengths.iter().any(|&n| n == 0) {
            return Err(KptError::Degenerate("encoder received a sample with zero tokens".into()));
        }
        let mut segs = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &n in lengths {
            segs.push(Segment { q_start: start, q_len: n, k_start: start, k_len: n });
            start += n;
        }
        let mut x = tokens;
        let mut logits = Vec::with_capacity(self.encoder.len());
        let mut attention = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let n1 = layer.norm1.forward(g, p, x)?;
            let (a, rec) = layer.attn.forward(g, p, n1, n1, &segs)?;
            x = g.add(x, a)?;
            let n2 = layer.norm2.forward(g, p, x)?;
            let f = layer.ffn.forward(g, p, n2)?;
            x = g.add(x, f)?;
            logits.push(self.identity_head.forward(g, p, x)?);
            attention.push(rec);
        }
        let encoded = self.memory_norm.forward(g, p, x)?;
        Ok(EncoderOutput { encoded, logits, attention })
    }

    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, memory: NodeId, lengths: &[usize]) -> Result<DecoderOutput> {
        let nq = self.num_queries();
        let batch = lengths.len();
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..nq).collect();
        let mut q = g.gather(p.node(self.queries), 0, &idx)?;
        let mut self_segs = Vec::with_capacity(batch);
        let mut cross_segs = Vec::with_capacity(batch);
        let mut start = 0;
        for (b, &n) in lengths.iter().enumerate() {
            self_segs.push(Segment { q_start: b * nq, q_len: nq, k_start: b * nq, k_len: nq });
            cross_segs.push(Segment { q_start: b * nq, q_len: nq, k_start: start, k_len: n });
            start += n;
        }
        let mut poses = Vec::with_capacity(self.decoder.len());
        let mut cross_attention = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let n1 = layer.norm1.forward(g, p, q)?;
            let (a, _) = layer.self_attn.forward(g, p, n1, n1, &self_segs)?;
            q = g.add(q, a)?;
            let n2 = layer.norm2.forward(g, p, q)?;
            let (c, rec) = layer.cross_attn.forward(g, p, n2, memory, &cross_segs)?;
            q = g.add(q, c)?;
            let n3 = layer.norm3.forward(g, p, q)?;
            let f = layer.ffn.forward(g, p, n3)?;
            q = g.add(q, f)?;
            poses.push(self.pose_outputs(g, p, q, batch)?);
            cross_attention.push(rec);
        }
        Ok(DecoderOutput { poses, cross_attention })
    }

    fn pose_outputs<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, q: NodeId, batch: usize) -> Result<LayerPoseRaw> {
        let head = &self.pose_head;
        let nq = self.num_queries();
        let joints_per = 2 * self.representation.joint_queries_per_hand();
        let n = head.norm.forward(g, p, q)?;
        let h = head.mlp.forward(g, p, n)?;
        let h = g.relu(h);
        let rows = |offset: usize, count: usize| -> Vec<usize> { (0..batch).flat_map(|b| (0..count).map(move |i| b * nq + offset + i)).collect() };
        let jh = g.gather(h, 0, &rows(0, joints_per))?;
        let joints = head.joint.forward(g, p, jh)?;
        let eh = g.gather(h, 0, &rows(joints_per, 1))?;
        let extra = head.extra.forward(g, p, eh)?;
        let (rotation, translation) = match (&head.rotation, &head.translation) {
            (Some(r), Some(t)) => {
                let rh = g.gather(h, 0, &rows(joints_per + 1, 1))?;
                let th = g.gather(h, 0, &rows(joints_per + 2, 1))?;
                (Some(r.forward(g, p, rh)?), Some(t.forward(g, p, th)?))
            }
            _ => (None, None),
        };
        Ok(LayerPoseRaw { joints, extra, rotation, translation })
    }
}

/// Assigns each keypoint the class of its nearest ground-truth joint
/// reprojection (heatmap pixels) when within `gamma`, else background.
/// Object keypoints, and grid cells on the object mask without a nearby
/// joint, get the object class. Ties go to the lowest class index.
pub fn associate_keypoints(
    keypoints: &[Keypoint],
    gt_joints_px: &[[[f64; 2]; NUM_JOINTS]; 2],
    present: [bool; 2],
    gamma: f64,
    heatmap_size: (usize, usize),
    object_mask: Option<&[f32]>,
) -> Vec<usize> {
    let (w, h) = heatmap_size;
    keypoints
        .iter()
        .map(|k| {
            if k.source == KeypointSource::ObjectSegmentation {
                return OBJECT_CLASS;
            }
            let [x, y] = k.pixel(w, h);
            let mut best: Option<(f64, usize)> = None;
            for hand in 0..2 {
                if !present[hand] {
                    continue;
                }
                for j in 0..NUM_JOINTS {
                    let p = gt_joints_px[hand][j];
                    let d = ((p[0] - x).powi(2) + (p[1] - y).powi(2)).sqrt();
                    if d <= gamma && best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, joint_class(hand, j)));
                    }
                }
            }
            if let Some((_, c)) = best {
                return c;
            }
            if k.source == KeypointSource::GridCell {
                if let Some(mask) = object_mask {
                    let (px, py) = (x.round().clamp(0.0, w as f64 - 1.0) as usize, y.round().clamp(0.0, h as f64 - 1.0) as usize);
                    if mask[py * w + px] >= 0.5 {
                        return OBJECT_CLASS;
                    }
                }
            }
            BACKGROUND_CLASS
        })
        .collect()
}

/// Cross-entropy summed over keypoints, averaged over encoder layers.
pub fn identity_loss<T: Real>(g: &mut Graph<T>, per_layer_logits: &[NodeId], targets: &[usize]) -> Result<NodeId> {
    if per_layer_logits.is_empty() {
        return Err(KptError::InvalidConfig("identity loss needs at least one layer".into()));
    }
    let mut total: Option<NodeId> = None;
    for &l in per_layer_logits {
        let ce = g.cross_entropy(l, targets, Reduction::Sum)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    Ok(g.scale(total.expect("non-empty"), 1.0 / per_layer_logits.len() as f64))
}

/// Argmax class per row of a logits matrix.
pub fn argmax_rows(values: &[f64], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_must_divide_heads() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rand::thread_rng();
        assert!(MultiHeadAttention::new(&mut store, &mut rng, "a", 10, 4).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::zeros(&[3, NUM_CLASSES]), true);
        let loss = identity_loss(&mut g, &[l, l], &[0, 5, 43]).unwrap();
        assert!((g.value(loss).item() - 3.0 * (NUM_CLASSES as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn association_tie_prefers_lower_class() {
        let mut gt = [[[100.0, 100.0]; NUM_JOINTS]; 2];
        gt[0][4] = [10.0, 11.0];
        gt[0][2] = [10.0, 9.0];
        let k = Keypoint::from_pixel(10.0, 10.0, 32, 32, 1.0, KeypointSource::HandHeatmap);
        let far = Keypoint::from_pixel(20.0, 20.0, 32, 32, 1.0, KeypointSource::HandHeatmap);
        let t = associate_keypoints(&[k, far], &gt, [true, true], 3.0, (32, 32), None);
        assert_eq!(t, vec![joint_class(0, 2), BACKGROUND_CLASS]);
    }
}
