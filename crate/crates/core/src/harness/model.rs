//! The assembled network and one batched forward pass with its losses.

use kpt_tensor::nn::{Bindings, ParamStore};
use kpt_tensor::{Graph, NodeId, Real, Tensor};
use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::error::{KptError, Result};
use crate::frontend::{nms_peaks, sample_object_keypoints, Backbone, BackboneOutput, Keypoint, KeypointSource, TokenEncoder};
use crate::ktformer::{associate_keypoints, identity_loss, DecoderOutput, EncoderOutput, KeypointTransformer};
use crate::objpose::{object_branch_outputs, relative_object_pose, symmetry_corner_loss_graph};
use crate::posedec::{decode_graph, pose_loss, HandTargets, OutputScales};
use crate::synthgen::{joints_at_resolution, object_catalog, object_segmentation_mask, random_augment, sample_heatmap, ObjectModel, SceneSample, NUM_JOINTS};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    pub tokens: TokenEncoder,
    pub grid_tokens: Option<TokenEncoder>,
    pub transformer: KeypointTransformer,
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let fc = config.frontend();
        let backbone = Backbone::new(&mut store, &mut rng, &fc)?;
        let tokens = TokenEncoder::new(&mut store, &mut rng, "tokens.mlp", fc.concat_width(), &fc);
        let grid_tokens = config.ablations.detr_style_tokens.then(|| TokenEncoder::new(&mut store, &mut rng, "grid_tokens.mlp", fc.channels[2], &fc));
        let transformer = KeypointTransformer::new(&mut store, &mut rng, fc.token_width(), &config.transformer(), config.representation, config.object_branch)?;
        Ok(Self { config: config.clone(), store, backbone, tokens, grid_tokens, transformer })
    }

    pub fn scales(&self) -> OutputScales {
        OutputScales::new(self.config.heatmap_size, self.config.image_size)
    }
}

/// A sample with everything the loss needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: SceneSample,
    pub gt_heatmap: Vec<f32>,
    pub gt_mask: Vec<f32>,
    pub targets: HandTargets,
    pub gt_joints_hm: [[[f64; 2]; NUM_JOINTS]; 2],
    pub object_pose_rel: Option<Matrix4<f64>>,
    /// Seeds the object keypoint draw.
    pub keypoint_seed: u64,
}

pub fn prepare(sample: &SceneSample, config: &TrainConfig, augment_seed: Option<u64>, keypoint_seed: u64) -> PreparedSample {
    let sample = match augment_seed {
        Some(seed) => random_augment(sample, &config.augment, seed),
        None => sample.clone(),
    };
    let hm = config.heatmap_size;
    PreparedSample {
        gt_heatmap: sample_heatmap(&sample, config.sigma, hm, hm),
        gt_mask: object_segmentation_mask(&sample, hm, hm),
        targets: HandTargets::from_sample(&sample, hm, hm),
        gt_joints_hm: joints_at_resolution(&sample, hm, hm),
        object_pose_rel: (config.object_branch && sample.object_present).then(|| relative_object_pose(&sample)),
        keypoint_seed,
        sample,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeypointOrigin {
    GroundTruth,
    Predicted,
}

/// Ground-truth reprojections before the warmup ends (exclusive boundary),
/// detected peaks afterwards.
pub fn keypoint_origin(epoch: usize, config: &TrainConfig) -> KeypointOrigin {
    if epoch < config.gt_keypoint_warmup_epochs {
        KeypointOrigin::GroundTruth
    } else {
        KeypointOrigin::Predicted
    }
}

/// Keypoints for one sample from the selected origin. Predicted maps are
/// `h × w` row-major.
pub fn keypoint_source(
    epoch: usize,
    config: &TrainConfig,
    prepared: &PreparedSample,
    predicted: Option<(&[f32], &[f32])>,
    nms_threshold: f64,
) -> Vec<Keypoint> {
    let hm = config.heatmap_size;
    let mut out = Vec::new();
    match (keypoint_origin(epoch, config), predicted) {
        (KeypointOrigin::GroundTruth, _) | (_, None) => {
            for h in 0..2 {
                for j in 0..NUM_JOINTS {
                    if prepared.sample.visibility[h][j] {
                        let [x, y] = prepared.gt_joints_hm[h][j];
                        out.push(Keypoint::from_pixel(x, y, hm, hm, 1.0, KeypointSource::HandHeatmap));
                    }
                }
            }
            out.truncate(config.n_hand);
            if config.object_branch {
                out.extend(sample_object_keypoints(&prepared.gt_mask, hm, hm, config.n_obj, prepared.keypoint_seed));
            }
        }
        (KeypointOrigin::Predicted, Some((heat, seg))) => {
            out.extend(nms_peaks(heat, hm, hm, config.n_hand, nms_threshold));
            if config.object_branch {
                let mask: Vec<f32> = seg.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
                out.extend(sample_object_keypoints(&mask, hm, hm, config.n_obj, prepared.keypoint_seed));
            }
        }
    }
    out
}

pub struct BatchForward {
    pub backbone: BackboneOutput,
    /// Batch indices of samples that produced tokens.
    pub kept: Vec<usize>,
    pub keypoints: Vec<Vec<Keypoint>>,
    pub targets: Vec<Vec<usize>>,
    pub encoder: Option<EncoderOutput>,
    pub decoder: Option<DecoderOutput>,
}

impl BatchForward {
    pub fn skipped(&self, batch: usize) -> usize {
        batch - self.kept.len()
    }
}

fn image_tensor<T: Real>(batch: &[PreparedSample], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(batch.len() * 3 * size * size);
    for p in batch {
        if p.sample.width != size || p.sample.height != size {
            return Err(KptError::InvalidConfig(format!("sample is {}×{}, model expects {size}×{size}", p.sample.width, p.sample.height)));
        }
        data.extend(p.sample.image.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Tensor::new(vec![batch.len(), 3, size, size], data)?)
}

fn map_of<T: Real>(g: &Graph<T>, node: NodeId, b: usize, plane: usize) -> Vec<f32> {
    g.value(node).data()[b * plane..(b + 1) * plane].iter().map(|v| v.as_f64() as f32).collect()
}

/// Backbone, keypoint selection, tokens, encoder and decoder.
pub fn forward_batch<T: Real>(
    g: &mut Graph<T>,
    model: &Model,
    p: &Bindings,
    batch: &[PreparedSample],
    epoch: usize,
    nms_threshold: f64,
) -> Result<BatchForward> {
    let cfg = &model.config;
    let hm = cfg.heatmap_size;
    let image = g.constant(image_tensor(batch, cfg.image_size)?);
    let bb = model.backbone.forward(g, p, image)?;
    let mut kept = Vec::new();
    let mut keypoints = Vec::new();
    let mut targets = Vec::new();
    let mut token_parts = Vec::new();
    let mut flat_kps: Vec<(usize, Keypoint)> = Vec::new();
    for (b, prep) in batch.iter().enumerate() {
        let kps = if let Some(grid) = &model.grid_tokens {
            let (tok, kps) = grid.grid_tokens(g, p, bb.coarsest_encoder, b)?;
            token_parts.push(tok);
            kps
        } else {
            let heat = map_of(g, bb.heatmap, b, hm * hm);
            let seg = map_of(g, bb.segmap, b, hm * hm);
            let kps = keypoint_source(epoch, cfg, prep, Some((&heat, &seg)), nms_threshold);
            flat_kps.extend(kps.iter().map(|k| (kept.len(), *k)));
            kps
        };
        if kps.is_empty() {
            continue;
        }
        let mask = cfg.object_branch.then_some(prep.gt_mask.as_slice());
        targets.push(associate_keypoints(&kps, &prep.gt_joints_hm, prep.sample.hand_present, cfg.gamma, (hm, hm), mask));
        keypoints.push(kps);
        kept.push(b);
    }
    if kept.is_empty() {
        return Ok(BatchForward { backbone: bb, kept, keypoints, targets, encoder: None, decoder: None });
    }
    let tokens = if model.grid_tokens.is_some() {
        g.concat(&token_parts, 0)?
    } else {
        // sample sites refer to positions in the full batch
        let remapped: Vec<(usize, Keypoint)> = flat_kps.iter().map(|(k, kp)| (kept[*k], *kp)).collect();
        model.tokens.build_tokens(g, p, &bb.pyramid, &remapped)?
    };
    let lengths: Vec<usize> = keypoints.iter().map(Vec::len).collect();
    let enc = model.transformer.encode(g, p, tokens, &lengths)?;
    let dec = model.transformer.decode(g, p, enc.encoded, &lengths)?;
    Ok(BatchForward { backbone: bb, kept, keypoints, targets, encoder: Some(enc), decoder: Some(dec) })
}

/// Loss terms of one step; absent terms belong to inactive branches.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub l_h: NodeId,
    pub l_ki: Option<NodeId>,
    pub l_hand: Option<NodeId>,
    pub l_obj: Option<NodeId>,
    pub total: NodeId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub l_h: f64,
    pub l_ki: Option<f64>,
    pub l_hand: Option<f64>,
    pub l_obj: Option<f64>,
    pub total: f64,
}

/// Plain sum of the present terms.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &[Option<NodeId>]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            Some(a) => g.add(a, *t)?,
            None => *t,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

fn mean_nodes<T: Real>(g: &mut Graph<T>, nodes: &[NodeId]) -> Result<Option<NodeId>> {
    if nodes.is_empty() {
        return Ok(None);
    }
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(Some(g.scale(acc, 1.0 / nodes.len() as f64)))
}

/// Squared error summed over each map, averaged over the batch.
fn per_sample_sse<T: Real>(g: &mut Graph<T>, pred: NodeId, gt: NodeId, batch: usize) -> Result<NodeId> {
    let d = g.sub(pred, gt)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / batch as f64))
}

pub fn compute_losses<T: Real>(g: &mut Graph<T>, model: &Model, batch: &[PreparedSample], fwd: &BatchForward) -> Result<LossNodes> {
    let cfg = &model.config;
    let hm = cfg.heatmap_size;
    let n = batch.len();
    let gt_heat: Vec<f64> = batch.iter().flat_map(|p| p.gt_heatmap.iter().map(|&v| v as f64)).collect();
    let gt_heat = g.constant(Tensor::from_f64(&[n, 1, hm, hm], &gt_heat)?);
    let mut l_h = per_sample_sse(g, fwd.backbone.heatmap, gt_heat, n)?;
    if cfg.object_branch {
        let gt_seg: Vec<f64> = batch.iter().flat_map(|p| p.gt_mask.iter().map(|&v| v as f64)).collect();
        let gt_seg = g.constant(Tensor::from_f64(&[n, 1, hm, hm], &gt_seg)?);
        let l_seg = per_sample_sse(g, fwd.backbone.segmap, gt_seg, n)?;
        l_h = g.add(l_h, l_seg)?;
    }
    let (Some(enc), Some(dec)) = (&fwd.encoder, &fwd.decoder) else {
        let total = total_loss(g, &[Some(l_h)])?;
        return Ok(LossNodes { l_h, l_ki: None, l_hand: None, l_obj: None, total });
    };
    let kept = fwd.kept.len();
    let l_ki = if cfg.ablations.disable_identity_loss {
        None
    } else {
        let flat: Vec<usize> = fwd.targets.iter().flatten().copied().collect();
        let ce = identity_loss(g, &enc.logits, &flat)?;
        Some(g.scale(ce, 1.0 / kept as f64))
    };
    let rep = cfg.representation;
    let qh2 = 2 * rep.joint_queries_per_hand();
    let scales = model.scales();
    let catalog = object_catalog();
    let mut hand_layers = Vec::new();
    let mut obj_layers = Vec::new();
    for layer in &dec.poses {
        let mut preds = Vec::with_capacity(kept);
        let mut gts = Vec::with_capacity(kept);
        let mut obj_terms = Vec::new();
        for (k, &b) in fwd.kept.iter().enumerate() {
            let prep = &batch[b];
            let joints = g.slice(layer.joints, 0, k * qh2, qh2)?;
            let extra = g.slice(layer.extra, 0, k, 1)?;
            preds.push(decode_graph(g, rep, joints, extra, prep.sample.interacting(), &scales)?);
            gts.push(prep.targets.clone());
            if let (Some(rot), Some(trans), Some(pose)) = (layer.rotation, layer.translation, prep.object_pose_rel) {
                let model_obj: &ObjectModel = &catalog[prep.sample.object_id as usize];
                let r = g.slice(rot, 0, k, 1)?;
                let t = g.slice(trans, 0, k, 1)?;
                let out = object_branch_outputs(g, r, t)?;
                let t_unit = g.scale(out.translation, 1.0 / cfg.object_loss_unit_mm);
                obj_terms.push(symmetry_corner_loss_graph(g, out.rotation, t_unit, &pose, model_obj, cfg.object_loss_unit_mm)?);
            }
        }
        if let Some(l) = pose_loss(g, rep, &preds, &gts)? {
            hand_layers.push(l);
        }
        if let Some(l) = mean_nodes(g, &obj_terms)? {
            obj_layers.push(l);
        }
    }
    let l_hand = mean_nodes(g, &hand_layers)?;
    let l_obj = mean_nodes(g, &obj_layers)?;
    let total = total_loss(g, &[Some(l_h), l_ki, l_hand, l_obj])?;
    Ok(LossNodes { l_h, l_ki, l_hand, l_obj, total })
}

pub fn loss_values<T: Real>(g: &Graph<T>, l: &LossNodes) -> LossValues {
    let v = |n: NodeId| g.value(n).item().as_f64();
    LossValues { l_h: v(l.l_h), l_ki: l.l_ki.map(v), l_hand: l.l_hand.map(v), l_obj: l.l_obj.map(v), total: v(l.total) }
}
