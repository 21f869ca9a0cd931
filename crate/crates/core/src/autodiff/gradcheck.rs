use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Outcome of comparing analytic gradients to central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// `(input index, max relative error over that input's elements)`
    pub per_input: Vec<(usize, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every `requires_grad` input of a scalar-valued graph.
///
/// `build` receives a fresh tape with the inputs recorded as leaves, in
/// order, and must return the scalar output.
pub fn grad_check<F>(op: &str, inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::invalid_shape(
                "grad_check",
                "graph output must be scalar",
            ));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut perturbed = inputs.to_vec();
    let mut per_input = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut worst: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = input.data()[j];
            perturbed[i].data_mut()[j] = orig + eps;
            let (t, _, o) = eval(&perturbed)?;
            let plus = t.value(o).item();
            perturbed[i].data_mut()[j] = orig - eps;
            let (t, _, o) = eval(&perturbed)?;
            let minus = t.value(o).item();
            perturbed[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
        max_rel_error = max_rel_error.max(worst);
        per_input.push((i, worst));
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error,
        per_input,
    })
}
