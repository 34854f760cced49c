//! Pose-accuracy metrics and their aggregation into reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{KptError, Result};
use crate::objpose::{mssd, relative_object_pose};
use crate::posedec::Joints;
use crate::synthgen::{object_catalog, SceneSample, NUM_JOINTS};

pub const AUC_MAX_MM: f64 = 50.0;
pub const AUC_STEPS: usize = 100;

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    Vector3::from(*a).metric_distance(&Vector3::from(*b))
}

/// Per-joint errors after subtracting each set's own root.
pub fn root_aligned_errors(pred: &Joints, gt: &Joints) -> [f64; NUM_JOINTS] {
    std::array::from_fn(|j| {
        let p: [f64; 3] = std::array::from_fn(|c| pred[j][c] - pred[0][c]);
        let q: [f64; 3] = std::array::from_fn(|c| gt[j][c] - gt[0][c]);
        dist(&p, &q)
    })
}

pub fn mpjpe(pred: &Joints, gt: &Joints) -> f64 {
    root_aligned_errors(pred, gt).iter().sum::<f64>() / NUM_JOINTS as f64
}

pub fn mrrpe(pred_t_lr: &[f64; 3], gt_t_lr: &[f64; 3]) -> f64 {
    dist(pred_t_lr, gt_t_lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub translation: [f64; 3],
    pub aligned: Vec<[f64; 3]>,
    /// Mean Euclidean residual after alignment.
    pub residual: f64,
    /// Set when the prediction has no spread and the scale is pinned to 1.
    pub degenerate: bool,
}

/// Least-squares `s, t` minimizing `Σ ‖s·pred_j + t − gt_j‖²`.
pub fn scale_translation_align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<Alignment> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(KptError::InvalidConfig(format!("alignment needs equal non-empty sets, got {} and {}", pred.len(), gt.len())));
    }
    let n = pred.len() as f64;
    let centroid = |pts: &[[f64; 3]]| pts.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p)) / n;
    let cp = centroid(pred);
    let cg = centroid(gt);
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, q) in pred.iter().zip(gt) {
        let dp = Vector3::from(*p) - cp;
        let dq = Vector3::from(*q) - cg;
        num += dp.dot(&dq);
        den += dp.norm_squared();
    }
    let degenerate = den < 1e-18;
    let scale = if degenerate { 1.0 } else { num / den };
    let t = cg - cp * scale;
    let aligned: Vec<[f64; 3]> = pred.iter().map(|p| (Vector3::from(*p) * scale + t).into()).collect();
    let residual = aligned.iter().zip(gt).map(|(a, q)| dist(a, q)).sum::<f64>() / n;
    Ok(Alignment { scale, translation: t.into(), aligned, residual, degenerate })
}

/// Fraction of errors within each threshold on `0..=max` in `steps`
/// intervals, integrated with the trapezoid rule and normalized.
pub fn auc_pck(errors: &[f64], max_threshold: f64, steps: usize) -> f64 {
    if errors.is_empty() || steps == 0 || max_threshold <= 0.0 {
        return 0.0;
    }
    let pck: Vec<f64> = (0..=steps)
        .map(|k| {
            let t = max_threshold * k as f64 / steps as f64;
            errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
        })
        .collect();
    pck.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() / steps as f64
}

/// One frame's prediction in the evaluation frame: per-hand joints (only
/// their root-relative shape is scored), the relative root translation
/// and, optionally, the object pose relative to the reference root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub hands: [Joints; 2],
    pub t_lr: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_pose: Option<[[f64; 4]; 4]>,
}

impl FramePrediction {
    /// The prediction a perfect model would make for `s`.
    pub fn ground_truth(s: &SceneSample) -> Self {
        let p = relative_object_pose(s);
        Self {
            hands: s.joints3d,
            t_lr: if s.interacting() { s.t_lr().into() } else { [0.0; 3] },
            object_pose: s.object_present.then(|| std::array::from_fn(|i| std::array::from_fn(|j| p[(i, j)]))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub interacting: bool,
    pub mpjpe_mm: [Option<f64>; 2],
    pub mrrpe_mm: Option<f64>,
    pub aligned_err_mm: Option<f64>,
    pub mssd_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MpjpeBuckets {
    pub overall: Option<f64>,
    pub single: Option<f64>,
    pub interacting: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BucketCounts {
    pub single: usize,
    pub interacting: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe_mm: MpjpeBuckets,
    pub mrrpe_mm: Option<f64>,
    pub aligned_joint_err_cm: Option<f64>,
    pub auc: Option<f64>,
    pub mssd_cm: BTreeMap<String, f64>,
    pub counts: BucketCounts,
    pub samples: Vec<SampleMetrics>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn evaluate_predictions(preds: &[FramePrediction], gts: &[SceneSample]) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(KptError::InvalidConfig(format!("{} predictions for {} samples", preds.len(), gts.len())));
    }
    let catalog = object_catalog();
    let mut report = MetricReport::default();
    let (mut all, mut single, mut inter, mut mrrpes, mut aligned, mut joint_errs) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut mssd_by_obj: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, (p, s)) in preds.iter().zip(gts).enumerate() {
        let interacting = s.interacting();
        let mut m = SampleMetrics { index: i, interacting, mpjpe_mm: [None; 2], mrrpe_mm: None, aligned_err_mm: None, mssd_mm: None };
        let mut hand_aligned = vec![];
        for h in 0..2 {
            if !s.hand_present[h] {
                continue;
            }
            let gt_rel: Joints = s.root_relative(h).map(Into::into);
            let e = mpjpe(&p.hands[h], &gt_rel);
            m.mpjpe_mm[h] = Some(e);
            all.push(e);
            if interacting { inter.push(e) } else { single.push(e) }
            let pred_rel = p.hands[h].map(|q| std::array::from_fn(|c| q[c] - p.hands[h][0][c]));
            let a = scale_translation_align(&pred_rel, &gt_rel)?;
            hand_aligned.push(a.residual);
            joint_errs.extend(a.aligned.iter().zip(&gt_rel).map(|(x, y)| dist(x, y)));
        }
        if let Some(v) = mean(&hand_aligned) {
            m.aligned_err_mm = Some(v);
            aligned.push(v);
        }
        if interacting {
            let e = mrrpe(&p.t_lr, &s.t_lr().into());
            m.mrrpe_mm = Some(e);
            mrrpes.push(e);
        }
        if s.object_present {
            if let (Some(pp), Some(model)) = (p.object_pose, catalog.get(s.object_id as usize)) {
                let pred = Matrix4::from_fn(|r, c| pp[r][c]);
                let e = mssd(&pred, &relative_object_pose(s), model)?;
                m.mssd_mm = Some(e);
                mssd_by_obj.entry(model.name.clone()).or_default().push(e);
            }
        }
        if interacting {
            report.counts.interacting += 1;
        } else {
            report.counts.single += 1;
        }
        report.samples.push(m);
    }
    report.counts.total = gts.len();
    report.mpjpe_mm = MpjpeBuckets { overall: mean(&all), single: mean(&single), interacting: mean(&inter) };
    report.mrrpe_mm = mean(&mrrpes);
    report.aligned_joint_err_cm = mean(&aligned).map(|v| v / 10.0);
    report.auc = (!joint_errs.is_empty()).then(|| auc_pck(&joint_errs, AUC_MAX_MM, AUC_STEPS));
    report.mssd_cm = mssd_by_obj.into_iter().map(|(k, v)| (k, mean(&v).unwrap_or(0.0) / 10.0)).collect();
    Ok(report)
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per sample followed by a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,interacting,mpjpe_left_mm,mpjpe_right_mm,mrrpe_mm,aligned_err_mm,mssd_mm\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.index,
                s.interacting as u8,
                opt(s.mpjpe_mm[0]),
                opt(s.mpjpe_mm[1]),
                opt(s.mrrpe_mm),
                opt(s.aligned_err_mm),
                opt(s.mssd_mm)
            );
        }
        let all_mssd: Vec<f64> = self.samples.iter().filter_map(|s| s.mssd_mm).collect();
        let _ = writeln!(
            out,
            "summary,{},{},{},{},{},{}",
            self.counts.interacting,
            opt(self.mpjpe_mm.overall),
            opt(self.mpjpe_mm.overall),
            opt(self.mrrpe_mm),
            opt(self.aligned_joint_err_cm.map(|v| v * 10.0)),
            opt(mean(&all_mssd))
        );
        out
    }
}
