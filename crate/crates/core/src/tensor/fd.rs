//! Central-difference gradient verification.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Index of the input tensor holding the worst coordinate.
    pub worst_input: usize,
    /// Flat coordinate within that tensor.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare reverse-mode gradients of a scalar-valued function against
/// central differences at `points`.
///
/// `build` must construct the function fresh each call: it receives a graph
/// plus one differentiable leaf per entry of `points` and returns the scalar
/// output. Relative error per coordinate is
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn finite_difference_check<F>(build: F, points: &[Tensor<f64>], eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive and finite, got {eps}"
        )));
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument(
            "finite-difference check needs at least one input tensor".into(),
        ));
    }

    let run = |tensors: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(&format!("fd{i}"), t))
            .collect();
        let out = build(&mut g, &vars);
        g.eval(&[])?;
        let y = g.value(out);
        if y.numel() != 1 {
            return Err(Error::shape(format!(
                "finite-difference target must be scalar, got {:?}",
                y.shape()
            )));
        }
        let y = y.item();
        let grads = if want_grads {
            g.backward(out)?;
            vars.iter()
                .enumerate()
                .map(|(i, &v)| {
                    g.grad(v)
                        .unwrap_or_else(|| Tensor::zeros(tensors[i].shape()))
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((y, grads))
    };

    let (_, analytic) = run(points, true)?;

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (i, point) in points.iter().enumerate() {
        for j in 0..point.numel() {
            let base = point.data()[j];
            work[i].data_mut()[j] = base + eps;
            let (f_plus, _) = run(&work, false)?;
            work[i].data_mut()[j] = base - eps;
            let (f_minus, _) = run(&work, false)?;
            work[i].data_mut()[j] = base;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > report.max_rel_err {
                report = FdReport {
                    max_rel_err: rel,
                    worst_input: i,
                    worst_coord: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
