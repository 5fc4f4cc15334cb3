//! Central-difference gradient oracle.
//!
//! The oracle only ever evaluates forward values, so it stays independent of
//! every backward rule it is used to check.

use super::{Graph, Tensor, TensorError, Var};

/// Central-difference estimate of `∂f/∂inputs[which]`.
pub fn numeric_grad<F, E>(f: &F, inputs: &[Tensor], which: usize, eps: f64) -> Result<Vec<f64>, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).values().iter().sum())
    };
    let mut work = inputs.to_vec();
    let n = inputs[which].len();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let orig = inputs[which].values()[i];
        work[which].values_mut()[i] = orig + eps;
        let plus = eval(&work)?;
        work[which].values_mut()[i] = orig - eps;
        let minus = eval(&work)?;
        work[which].values_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences for every input coordinate.
///
/// Returns the maximum over coordinates of `|analytic − numeric| / max(1, |numeric|)`.
/// `f` must be deterministic; build it on an evaluation-mode graph.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    // Non-scalar outputs are checked through their sum.
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        g.sum(out)
    };
    g.backward(loss)?;

    let mut worst = 0.0f64;
    for (which, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .expect("parameters always receive a gradient")
            .values()
            .to_vec();
        let numeric = numeric_grad(&f, inputs, which, eps)?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(worst)
}
