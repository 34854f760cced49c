//! Central finite-difference oracle for autodiff gradients.

use crate::{Graph, NodeId, Result, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_error: f64,
    /// Finite differences at `h` and `h/2` disagree by more than the
    /// tolerance: the function is too curved at this point for the
    /// oracle to be trusted.
    pub near_singular: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a − b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences, perturbing each leaf element in turn.
pub fn grad_check<F>(leaves: &[Tensor<f64>], build: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;

    let mut reports = Vec::with_capacity(leaves.len());
    let mut work = leaves.to_vec();
    for (li, id) in ids.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*id) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; leaves[li].numel()],
        };
        let mut max_err = 0f64;
        let mut near_singular = false;
        for k in 0..leaves[li].numel() {
            let x0 = leaves[li].data()[k];
            let fd = |h: f64, work: &mut Vec<Tensor<f64>>| -> Result<f64> {
                work[li].data_mut()[k] = x0 + h;
                let fp = eval(work)?;
                work[li].data_mut()[k] = x0 - h;
                let fm = eval(work)?;
                work[li].data_mut()[k] = x0;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = fd(opts.step, &mut work)?;
            let err = relative_error(analytic[k], numeric);
            if err > opts.tolerance {
                let half = fd(opts.step / 2.0, &mut work)?;
                if relative_error(numeric, half) > opts.tolerance {
                    near_singular = true;
                }
            }
            max_err = max_err.max(err);
        }
        reports.push(LeafReport {
            leaf: li,
            max_rel_error: max_err,
            near_singular,
        });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        leaves: reports,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error < opts.tolerance,
    })
}
