//! Central finite-difference verification of reverse-mode gradients.
//!
//! Always runs on an `f64` tape regardless of the working precision; the
//! caller lifts parameters with [`Tensor::cast`].

use super::{NodeId, Result, Tape, Tensor, TensorError};

/// Worst relative error found by [`grad_check`], with its location.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
}

/// Compare reverse-mode gradients of a scalar function against central finite
/// differences, coordinate by coordinate, and report the worst relative error
/// `|ad - fd| / max(|ad| + |fd|, 1e-4)`.
///
/// `build` must construct the same graph every call: it receives a fresh tape
/// plus leaf ids for each parameter (in order) and returns the scalar root.
pub fn grad_check<F>(build: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let root = build(&mut tape, &ids)?;
        let out = tape.value(root).item();
        if !out.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective".into()));
        }
        Ok(out)
    };

    // Reverse-mode gradients at the unperturbed point.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &ids)?;
    if !tape.value(root).item().is_finite() {
        return Err(TensorError::NonFinite("grad_check objective".into()));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, p)| grads.get_or_zeros(id, p.shape()))
        .collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: 0, worst_coord: 0 };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let f_plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - eps;
            let f_minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let ad = analytic[pi].data()[ci];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-4);
            if rel > report.max_rel_err {
                report = GradCheckReport { max_rel_err: rel, worst_param: pi, worst_coord: ci };
            }
        }
    }
    Ok(report)
}
