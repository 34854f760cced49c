//! Inference over a dataset and metric aggregation.

use kpt_tensor::{Graph, Real};
use nalgebra::Matrix3;

use super::model::{forward_batch, prepare, BatchForward, Model, PreparedSample};
use super::train::derive_seed;
use crate::error::Result;
use crate::frontend::Keypoint;
use crate::ktformer::{argmax_rows, NUM_CLASSES};
use crate::metrics::{evaluate_predictions, FramePrediction, MetricReport};
use crate::objpose::{rot6d_to_matrix, TRANSLATION_SCALE_MM};
use crate::posedec::decode_values;
use crate::synthgen::{rescale_intrinsics, SceneSample};

/// Everything inference produced for one sample.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    pub prediction: FramePrediction,
    pub heatmap: Vec<f32>,
    pub segmap: Vec<f32>,
    pub keypoints: Vec<Keypoint>,
    /// Associated classes and last-layer argmax per keypoint.
    pub targets: Vec<usize>,
    pub predicted_classes: Vec<usize>,
    /// Last decoder layer cross-attention, head-averaged: one row of
    /// keypoint weights per query.
    pub cross_attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub predictions: Vec<FramePrediction>,
    /// Fraction of keypoints whose argmax class equals the associated one.
    pub identity_accuracy: Option<f64>,
    /// Samples with no keypoints; their prediction is an all-zero pose.
    pub skipped: usize,
}

fn empty_prediction() -> FramePrediction {
    FramePrediction { hands: [[[0.0; 3]; 21]; 2], t_lr: [0.0; 3], object_pose: None }
}

/// Reads the decoded outputs of every batch member off a forward pass.
fn collect<T: Real>(g: &Graph<T>, model: &Model, batch: &[PreparedSample], fwd: &BatchForward) -> Result<Vec<Option<SampleTrace>>> {
    let cfg = &model.config;
    let hm = cfg.heatmap_size;
    let plane = hm * hm;
    let rep = cfg.representation;
    let scales = model.scales();
    let mut out: Vec<Option<SampleTrace>> = vec![None; batch.len()];
    let (Some(enc), Some(dec)) = (&fwd.encoder, &fwd.decoder) else {
        return Ok(out);
    };
    let last = dec.poses.last().expect("at least one decoder layer");
    let joints = g.value(last.joints).to_f64_vec();
    let extra = g.value(last.extra).to_f64_vec();
    let rot = last.rotation.map(|r| g.value(r).to_f64_vec());
    let trans = last.translation.map(|t| g.value(t).to_f64_vec());
    let logits = g.value(*enc.logits.last().expect("at least one encoder layer")).to_f64_vec();
    let classes = argmax_rows(&logits, NUM_CLASSES);
    let heat = g.value(fwd.backbone.heatmap).to_f64_vec();
    let seg = g.value(fwd.backbone.segmap).to_f64_vec();
    let cross = dec.cross_attention.last().expect("at least one decoder layer");
    let qh2 = 2 * rep.joint_queries_per_hand();
    let ej = rep.extra_out_dim();
    let mut offset = 0;
    for (k, &b) in fwd.kept.iter().enumerate() {
        let s = &batch[b].sample;
        let k_hm = rescale_intrinsics(&s.intrinsics, (s.width, s.height), (hm, hm));
        let k_hm = Matrix3::from_fn(|i, j| k_hm[i][j]);
        let (hands, t_lr) = decode_values(rep, &joints[k * qh2 * 3..(k + 1) * qh2 * 3], &extra[k * ej..(k + 1) * ej], &scales, &k_hm, s.z_root)?;
        let object_pose = match (&rot, &trans) {
            (Some(r), Some(t)) if s.object_present => {
                let m = rot6d_to_matrix(&std::array::from_fn(|i| r[k * 6 + i]))?;
                Some(std::array::from_fn(|i| {
                    if i == 3 {
                        [0.0, 0.0, 0.0, 1.0]
                    } else {
                        [m[(i, 0)], m[(i, 1)], m[(i, 2)], t[k * 3 + i] * TRANSLATION_SCALE_MM]
                    }
                }))
            }
            _ => None,
        };
        let n = fwd.keypoints[k].len();
        let mut attn = vec![vec![0.0; n]; model.transformer.num_queries()];
        let heads = cross.iter().filter(|r| r.segment == k).count().max(1) as f64;
        for rec in cross.iter().filter(|r| r.segment == k) {
            let w = g.value(rec.weights).to_f64_vec();
            for (q, row) in attn.iter_mut().enumerate() {
                for (i, a) in row.iter_mut().enumerate() {
                    *a += w[q * n + i] / heads;
                }
            }
        }
        out[b] = Some(SampleTrace {
            prediction: FramePrediction { hands, t_lr: if s.interacting() { t_lr } else { [0.0; 3] }, object_pose },
            heatmap: heat[b * plane..(b + 1) * plane].iter().map(|&v| v as f32).collect(),
            segmap: seg[b * plane..(b + 1) * plane].iter().map(|&v| v as f32).collect(),
            keypoints: fwd.keypoints[k].clone(),
            targets: fwd.targets[k].clone(),
            predicted_classes: classes[offset..offset + n].to_vec(),
            cross_attention: attn,
        });
        offset += n;
    }
    Ok(out)
}

/// Inference on `samples` with detected keypoints, in chunks of the batch size.
pub fn trace(model: &Model, samples: &[SceneSample]) -> Result<Vec<Option<SampleTrace>>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(cfg.batch_size.max(1)).enumerate() {
        let batch: Vec<PreparedSample> = chunk
            .iter()
            .enumerate()
            .map(|(k, s)| prepare(s, cfg, None, derive_seed(cfg.seed, &[4, (c * cfg.batch_size + k) as u64])))
            .collect();
        let mut g = Graph::<f32>::new();
        let p = model.store.bind_frozen(&mut g);
        let fwd = forward_batch(&mut g, model, &p, &batch, usize::MAX, cfg.nms_threshold_eval)?;
        out.extend(collect(&g, model, &batch, &fwd)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[SceneSample]) -> Result<EvalOutput> {
    let traces = trace(model, samples)?;
    let skipped = traces.iter().filter(|t| t.is_none()).count();
    let (mut hit, mut total) = (0usize, 0usize);
    for t in traces.iter().flatten() {
        total += t.targets.len();
        hit += t.targets.iter().zip(&t.predicted_classes).filter(|(a, b)| a == b).count();
    }
    let predictions: Vec<FramePrediction> = traces.into_iter().map(|t| t.map_or_else(empty_prediction, |t| t.prediction)).collect();
    let report = evaluate_predictions(&predictions, samples)?;
    Ok(EvalOutput { report, predictions, identity_accuracy: (total > 0).then(|| hit as f64 / total as f64), skipped })
}
