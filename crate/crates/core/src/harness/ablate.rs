//! Side-by-side training of the baseline and its ablations.

use std::fmt::Write as _;

use super::config::TrainConfig;
use super::eval::evaluate;
use super::train::{TrainOptions, Trainer};
use crate::error::Result;
use crate::synthgen::SceneSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    NoIdentityLoss,
    DetrStyle,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::NoIdentityLoss, Variant::DetrStyle];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoIdentityLoss => "no_identity_loss",
            Variant::DetrStyle => "detr_style",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.ablations.disable_identity_loss = self == Variant::NoIdentityLoss;
        c.ablations.detr_style_tokens = self == Variant::DetrStyle;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub steps: usize,
    pub final_loss: f64,
    pub mpjpe_mm: Option<f64>,
    pub mrrpe_mm: Option<f64>,
    pub identity_accuracy: Option<f64>,
    pub mssd_cm: Option<f64>,
}

pub fn run_ablations(base: &TrainConfig, train: &[SceneSample], test: &[SceneSample], opts: &TrainOptions) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let cfg = v.apply(base);
        let mut trainer = Trainer::new(&cfg)?;
        let log = trainer.run(train, opts)?;
        let ev = evaluate(&trainer.model, test)?;
        let mssd = &ev.report.mssd_cm;
        rows.push(AblationRow {
            variant: v,
            steps: trainer.step,
            final_loss: log.records.last().map_or(f64::NAN, |r| r.losses.total),
            mpjpe_mm: ev.report.mpjpe_mm.overall,
            mrrpe_mm: ev.report.mrrpe_mm,
            identity_accuracy: ev.identity_accuracy,
            mssd_cm: (!mssd.is_empty()).then(|| mssd.values().sum::<f64>() / mssd.len() as f64),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut out = String::from("variant,steps,final_loss,mpjpe_mm,mrrpe_mm,identity_accuracy,mssd_cm\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant.name(),
            r.steps,
            f(Some(r.final_loss)),
            f(r.mpjpe_mm),
            f(r.mrrpe_mm),
            f(r.identity_accuracy),
            f(r.mssd_cm)
        );
    }
    out
}
