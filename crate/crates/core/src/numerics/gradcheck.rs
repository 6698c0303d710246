use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
///
/// This never touches the differentiation graph, so it can be used as an
/// independent check on [`Graph::backward`].
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as input")
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is ~0 from dividing
/// finite-difference noise by ~0.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares reverse-mode gradients of `build` against central differences
/// for every coordinate of every input.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &vars).expect("builder succeeded on the unperturbed inputs");
        g.value(l).data()[0]
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coordinates: 0,
    };
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("param has grad").clone();
        let numeric = finite_diff_grad(
            |t| {
                let mut values = inputs.to_vec();
                values[k] = t.clone();
                eval(&values)
            },
            &inputs[k],
            h,
        );
        for (a, b) in analytic.data().iter().zip(numeric.data()) {
            report.max_rel_err = report.max_rel_err.max(relative_error(*a, *b, GRAD_FLOOR));
            report.max_abs_err = report.max_abs_err.max((a - b).abs());
            report.coordinates += 1;
        }
    }
    Ok(report)
}
