//! Central finite-difference gradient checking in 64-bit.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst probe.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    check_gradients_at(inputs, &probes, h, f)
}

/// Checks only the listed `(input, element)` probes.
pub fn check_gradients_at<F>(
    inputs: &[Tensor<f64>],
    probes: &[(usize, usize)],
    h: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        probes: probes.len(),
    };
    let mut work = inputs.to_vec();
    for &(i, e) in probes {
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + h;
        let plus = eval(&work)?;
        work[i].data_mut()[e] = orig - h;
        let minus = eval(&work)?;
        work[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i].data()[e];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.max_rel_error.is_nan() {
            report.max_rel_error = err;
            report.worst = (i, e);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
