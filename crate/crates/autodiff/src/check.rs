//! Central finite-difference gradient checking.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Finite-difference half step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Magnitude floor for the relative-error denominator, so that
    /// near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per input (evenly strided); `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-4,
            floor: 1e-3,
            max_entries: None,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("non-finite analytic gradient at input {input}, entry {entry}")]
    NonFiniteAnalytic { input: usize, entry: usize },
    #[error("non-finite numeric gradient at input {input}, entry {entry}")]
    NonFiniteNumeric { input: usize, entry: usize },
    #[error("function output is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
}

fn eval(f: &impl Fn(&mut Graph, &[Var]) -> Var, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Compares analytic gradients of the scalar function `f` against central
/// finite differences for every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheck) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    if g.value(out).len() != 1 {
        return Err(GradCheckError::NotScalar(g.value(out).shape().to_vec()));
    }
    let grads = g.backward(out);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        tol: opts.tol,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, &v) in vars.iter().enumerate() {
        let n = inputs[ii].len();
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[ii].shape()));
        let stride = match opts.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let a = analytic.data()[e];
            if !a.is_finite() {
                return Err(GradCheckError::NonFiniteAnalytic { input: ii, entry: e });
            }
            let orig = work[ii].data()[e];
            work[ii].data_mut()[e] = orig + opts.eps;
            let fp = eval(&f, &work);
            work[ii].data_mut()[e] = orig - opts.eps;
            let fm = eval(&f, &work);
            work[ii].data_mut()[e] = orig;
            let num = (fp - fm) / (2.0 * opts.eps);
            if !num.is_finite() {
                return Err(GradCheckError::NonFiniteNumeric { input: ii, entry: e });
            }
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((ii, e));
                report.analytic_at_worst = a;
                report.numeric_at_worst = num;
            }
        }
    }
    Ok(report)
}
