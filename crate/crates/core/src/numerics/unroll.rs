//! Differentiating through unrolled inner SGD loops.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, ParamVars, Var};
use super::params::ParamVector;
use crate::error::Result;

/// How the meta-gradient treats the inner-loop gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Differentiate through every inner gradient (second order).
    Exact,
    /// Treat inner gradients as constants; only the identity path remains.
    FirstOrder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerSteps {
    pub alpha: f64,
    pub steps: usize,
    pub mode: GradMode,
}

/// Records `steps` SGD updates `p <- p - alpha * grad(loss(p))` on the graph.
///
/// Each inner gradient is recorded differentiably in [`GradMode::Exact`];
/// in [`GradMode::FirstOrder`] it is detached before the update.
pub fn unroll_sgd<F>(
    g: &mut Graph,
    start: &ParamVars,
    loss: &F,
    spec: InnerSteps,
) -> Result<ParamVars>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut current = start.clone();
    for _ in 0..spec.steps {
        current = sgd_on_graph(g, &current, loss, spec)?;
    }
    Ok(current)
}

/// One recorded SGD step.
pub(crate) fn sgd_on_graph<F>(
    g: &mut Graph,
    current: &ParamVars,
    loss: &F,
    spec: InnerSteps,
) -> Result<ParamVars>
where
    F: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let l = loss(g, current)?;
    let grads = g.backward(l, current.vars())?;
    let mut next = Vec::with_capacity(grads.len());
    for (&p, &gr) in current.vars().iter().zip(&grads) {
        let gr = match spec.mode {
            GradMode::Exact => gr,
            GradMode::FirstOrder => g.detach(gr)?,
        };
        let step = g.scale(gr, spec.alpha)?;
        next.push(g.sub(p, step)?);
    }
    ParamVars::new(current.names().to_vec(), next)
}

/// Gradient of `outer(theta')` with respect to `theta`, where `theta'` is
/// `theta` after `spec.steps` SGD steps on `inner`.
///
/// With zero steps this is the plain gradient of `outer` at `theta`.
pub fn grad_through_update<I, O>(
    theta: &ParamVector,
    inner: I,
    outer: O,
    spec: InnerSteps,
) -> Result<ParamVector>
where
    I: Fn(&mut Graph, &ParamVars) -> Result<Var>,
    O: Fn(&mut Graph, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let start = g.bind(theta);
    let adapted = unroll_sgd(&mut g, &start, &inner, spec)?;
    let loss = outer(&mut g, &adapted)?;
    g.grad(loss, &start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, Tensor};

    fn scalar_param(v: f64) -> ParamVector {
        ParamVector::new(vec![("theta".into(), Tensor::vector(vec![v]).unwrap())]).unwrap()
    }

    fn square(g: &mut Graph, p: &ParamVars) -> Result<Var> {
        let t = p.get("theta")?;
        let sq = g.mul(t, t)?;
        g.sum(sq)
    }

    #[test]
    fn scalar_toy_matches_chain_rule() {
        // theta' = theta - alpha * 2 theta, L = theta'^2  =>  dL/dtheta = 2 theta (1 - 2 alpha)^2
        let alpha = 0.1;
        let spec = InnerSteps {
            alpha,
            steps: 1,
            mode: GradMode::Exact,
        };
        let grad = grad_through_update(&scalar_param(1.0), square, square, spec).unwrap();
        let expected = 2.0 * 1.0 * (1.0 - 2.0 * alpha) * (1.0 - 2.0 * alpha);
        assert!((grad.flatten()[0] - expected).abs() < 1e-12);
        assert!((expected - 1.28).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_is_plain_gradient() {
        let spec = InnerSteps {
            alpha: 0.0,
            steps: 3,
            mode: GradMode::Exact,
        };
        let grad = grad_through_update(&scalar_param(1.7), square, square, spec).unwrap();
        assert_eq!(grad.flatten()[0], 2.0 * 1.7);
    }

    #[test]
    fn first_order_keeps_identity_path_only() {
        // First order: dL/dtheta = dL/dtheta' = 2 theta' = 2 theta (1 - 2 alpha)
        let alpha = 0.1;
        let spec = InnerSteps {
            alpha,
            steps: 1,
            mode: GradMode::FirstOrder,
        };
        let grad = grad_through_update(&scalar_param(1.0), square, square, spec).unwrap();
        assert!((grad.flatten()[0] - 2.0 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn multi_step_quartic_matches_finite_differences() {
        let quartic = |g: &mut Graph, p: &ParamVars| -> Result<Var> {
            let t = p.get("theta")?;
            let sq = g.mul(t, t)?;
            let q = g.mul(sq, sq)?;
            g.sum(q)
        };
        let spec = InnerSteps {
            alpha: 0.05,
            steps: 3,
            mode: GradMode::Exact,
        };
        let theta = scalar_param(0.9);
        let analytic = grad_through_update(&theta, quartic, square, spec).unwrap();
        let objective = |p: &ParamVector| {
            let mut g = Graph::new();
            let start = g.bind(p);
            let end = unroll_sgd(&mut g, &start, &quartic, spec)?;
            let l = square(&mut g, &end)?;
            Ok(g.value(l).item())
        };
        let numeric = finite_diff_grad(objective, &theta, 1e-5).unwrap();
        assert!(relative_error(&analytic, &numeric) < 1e-8);
    }
}
