use super::Tensor;
use crate::{Error, Result};

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so entries whose true gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub elements: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compare analytic gradients against central finite differences, one
/// element at a time, in 64-bit arithmetic.
///
/// `loss_and_grad` maps a full parameter list to the loss and one gradient
/// tensor per block.
pub fn finite_diff_check<L>(
    loss_and_grad: L,
    names: &[String],
    params: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    if names.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} names for {} parameter blocks",
            names.len(),
            params.len()
        )));
    }
    let (_, analytic) = loss_and_grad(params)?;
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient function returned {} blocks for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for (b, name) in names.iter().enumerate() {
        if analytic[b].shape() != params[b].shape() {
            return Err(Error::ShapeMismatch {
                op: "finite_diff_check",
                lhs: params[b].shape().to_vec(),
                rhs: analytic[b].shape().to_vec(),
            });
        }
        let mut report = BlockReport {
            name: name.clone(),
            elements: params[b].len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for i in 0..params[b].len() {
            let orig = params[b].data()[i];
            work[b].data_mut()[i] = orig + step;
            let (plus, _) = loss_and_grad(&work)?;
            work[b].data_mut()[i] = orig - step;
            let (minus, _) = loss_and_grad(&work)?;
            work[b].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[b].data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
        blocks.push(report);
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        blocks,
    })
}
