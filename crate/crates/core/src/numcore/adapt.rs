//! Inner-loop adaptation that stays differentiable with respect to the
//! starting parameters.

use super::graph::{Graph, Var};
use super::loss::bce_mean;
use super::mlp::{MlpSpec, Mode};
use super::params::{ParamSet, ParamVars};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Features (one row per sample) and binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn new(features: Tensor, labels: Vec<f64>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: features.rows(),
                got: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Takes `steps` full-batch gradient steps of size `alpha` on `loss_fn`.
///
/// `loss_fn` receives the current parameters and the step index. Each update
/// is an [`Graph::inner_step`] node, so the returned parameters remain
/// connected to `params`.
pub fn adapt_in_graph<F>(
    g: &mut Graph,
    params: &ParamVars,
    alpha: f64,
    steps: usize,
    mut loss_fn: F,
) -> Result<ParamVars>
where
    F: FnMut(&mut Graph, &ParamVars, usize) -> Result<Var>,
{
    let mut current = params.clone();
    for step in 0..steps {
        let loss = loss_fn(g, &current, step)?;
        let grads = g.grad(loss, &current.vars())?;
        if grads.iter().any(|v| !g.value(*v).all_finite()) {
            return Err(Error::InnerStepNonFinite { step });
        }
        let next: Vec<Var> = current
            .vars()
            .into_iter()
            .zip(grads)
            .map(|(p, d)| g.inner_step(p, d, alpha))
            .collect();
        current = current.with_vars(next);
    }
    Ok(current)
}

/// Gradient of `query_fn` at the adapted parameters with respect to the
/// ORIGINAL `params`, including every second-order term of the inner loop.
///
/// Returns the gradient and the query loss value.
pub fn meta_gradient_in_graph<F, Q>(
    g: &mut Graph,
    params: &ParamVars,
    alpha: f64,
    steps: usize,
    support_fn: F,
    query_fn: Q,
) -> Result<(ParamSet, f64)>
where
    F: FnMut(&mut Graph, &ParamVars, usize) -> Result<Var>,
    Q: FnOnce(&mut Graph, &ParamVars) -> Result<Var>,
{
    let adapted = adapt_in_graph(g, params, alpha, steps, support_fn)?;
    let loss = query_fn(g, &adapted)?;
    let value = g.value(loss).item();
    let grads = g.grad(loss, &params.vars())?;
    Ok((params.with_vars(grads).values(g), value))
}

fn mlp_loss(g: &mut Graph, spec: &MlpSpec, params: &ParamVars, batch: &Batch) -> Result<Var> {
    let x = g.constant(batch.features.clone());
    let p = spec.forward_graph(g, params, x, Mode::Eval, None)?;
    bce_mean(g, p, &batch.labels)
}

/// `n` gradient steps of the mean cross-entropy on `support`.
///
/// The flag reports whether the adapted parameters are still connected to
/// the originals in the graph.
pub fn unrolled_adapt(
    spec: &MlpSpec,
    params: &ParamSet,
    support: &Batch,
    alpha: f64,
    n: usize,
) -> Result<(ParamSet, bool)> {
    if n > 0 && support.is_empty() {
        return Err(Error::Data("empty support set".into()));
    }
    let mut g = Graph::new();
    let leaves = params.to_leaves(&mut g);
    let adapted = adapt_in_graph(&mut g, &leaves, alpha, n, |g, p, _| {
        mlp_loss(g, spec, p, support)
    })?;
    let connected = adapted.vars().iter().all(|v| g.requires_grad(*v));
    Ok((adapted.values(&g), connected))
}

/// Meta-gradient of the query loss through `n` support steps for one task.
pub fn meta_gradient(
    spec: &MlpSpec,
    params: &ParamSet,
    support: &Batch,
    query: &Batch,
    alpha: f64,
    n: usize,
) -> Result<ParamSet> {
    if n > 0 && support.is_empty() {
        return Err(Error::Data("empty support set".into()));
    }
    if query.is_empty() {
        return Err(Error::Data("empty query set".into()));
    }
    let mut g = Graph::new();
    let leaves = params.to_leaves(&mut g);
    let (grads, _) = meta_gradient_in_graph(
        &mut g,
        &leaves,
        alpha,
        n,
        |g, p, _| mlp_loss(g, spec, p, support),
        |g, p| mlp_loss(g, spec, p, query),
    )?;
    Ok(grads)
}

/// Plain gradient of the mean cross-entropy on `batch`.
pub fn loss_gradient(spec: &MlpSpec, params: &ParamSet, batch: &Batch) -> Result<(ParamSet, f64)> {
    let mut g = Graph::new();
    let leaves = params.to_leaves(&mut g);
    let loss = mlp_loss(&mut g, spec, &leaves, batch)?;
    let value = g.value(loss).item();
    let grads = g.grad(loss, &leaves.vars())?;
    Ok((leaves.with_vars(grads).values(&g), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(g: &mut Graph, theta: Var, c: f64) -> Var {
        let c = g.constant(Tensor::scalar(c));
        let d = g.sub(theta, c);
        let sq = g.mul(d, d);
        g.scale(sq, 0.5)
    }

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn quadratic_one_step() {
        let mut g = Graph::new();
        let leaves = scalar_params(0.0).to_leaves(&mut g);
        let adapted = adapt_in_graph(&mut g, &leaves, 0.5, 1, |g, p, _| {
            Ok(quadratic(g, p.get("theta").unwrap(), 1.0))
        })
        .unwrap();
        assert_eq!(g.value(adapted.get("theta").unwrap()).item(), 0.5);
    }

    #[test]
    fn quadratic_meta_gradient() {
        let mut g = Graph::new();
        let leaves = scalar_params(0.0).to_leaves(&mut g);
        let (grad, _) = meta_gradient_in_graph(
            &mut g,
            &leaves,
            0.5,
            1,
            |g, p, _| Ok(quadratic(g, p.get("theta").unwrap(), 1.0)),
            |g, p| Ok(quadratic(g, p.get("theta").unwrap(), 2.0)),
        )
        .unwrap();
        assert_eq!(grad.get("theta").unwrap().item(), -0.75);
    }

    #[test]
    fn zero_steps_and_zero_alpha_leave_params() {
        let spec = MlpSpec::classifier(2, &[3], super::super::mlp::Activation::Tanh);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let p = spec.init_params(&mut rng);
        let support = Batch::new(
            Tensor::from_vec(2, 2, vec![0.5, -0.1, 0.2, 0.3]).unwrap(),
            vec![1.0, 0.0],
        )
        .unwrap();
        let (a0, c0) = unrolled_adapt(&spec, &p, &support, 0.3, 0).unwrap();
        assert_eq!(a0, p);
        assert!(c0);
        let (a1, c1) = unrolled_adapt(&spec, &p, &support, 0.0, 3).unwrap();
        assert_eq!(a1, p);
        assert!(c1);
    }

    #[test]
    fn non_finite_step_reports_index() {
        let mut g = Graph::new();
        let leaves = scalar_params(1.0).to_leaves(&mut g);
        let err = adapt_in_graph(&mut g, &leaves, 1.0, 3, |g, p, step| {
            let t = p.get("theta").unwrap();
            if step == 2 {
                // d/dtheta ln(theta - theta) is infinite
                let z = g.sub(t, t);
                let l = g.log(z);
                Ok(l)
            } else {
                Ok(quadratic(g, t, 0.0))
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::InnerStepNonFinite { step: 2 }), "{err:?}");
    }
}
