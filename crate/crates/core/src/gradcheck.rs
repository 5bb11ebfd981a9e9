//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{DType, Tensor};

/// Builds a scalar loss node over the given parameter leaves. Must be
/// deterministic: two builds over identical parameters must produce identical
/// values (stochastic layers have to derive their draws from a fixed seed
/// captured by the builder).
pub trait LossBuilder {
    fn build(&self, g: &mut Graph, params: &[NodeId]) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph, params: &[NodeId]) -> Result<NodeId> {
        self(g, params)
    }
}

fn eval_value<B: LossBuilder>(builder: &B, params: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new(DType::F64);
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = builder.build(&mut g, &ids)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Contract("grad_check: loss must be scalar".into()));
    }
    Ok(g.value(loss).item())
}

/// Max over all parameter coordinates of
/// `|autodiff - central_fd| / max(1, |central_fd|)`.
pub fn grad_check<B: LossBuilder>(builder: &B, params: &[Tensor], h: f64) -> Result<f64> {
    // determinism contract: two evaluations at the same point must agree
    let v0 = eval_value(builder, params)?;
    let v1 = eval_value(builder, params)?;
    if v0 != v1 {
        return Err(Error::Contract(format!(
            "grad_check: builder is not deterministic ({v0} vs {v1})"
        )));
    }

    // reverse-mode gradients
    let mut g = Graph::new(DType::F64);
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = builder.build(&mut g, &ids)?;
    let grads = g.backward(loss)?;
    let ad: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.for_leaf(id, p.shape()))
        .collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        for ci in 0..params[pi].len() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = eval_value(builder, &work)?;
            work[pi].data_mut()[ci] = orig - h;
            let minus = eval_value(builder, &work)?;
            work[pi].data_mut()[ci] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let rel = (ad[pi].data()[ci] - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{streams, RngStream};

    #[test]
    fn quadratic_loss_is_tight() {
        // f(w) = sum((w - c)^2)
        let c = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let builder = move |g: &mut Graph, params: &[NodeId]| {
            let target = g.constant(c.clone());
            let d = g.sub(params[0], target)?;
            let sq = g.mul_elem(d, d)?;
            Ok(g.sum_all(sq))
        };
        let w = Tensor::new(vec![3], vec![0.3, 0.7, -1.1]).unwrap();
        let err = grad_check(&builder, &[w], 1e-5).unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn mlp_cross_entropy_passes() {
        let mut rng = RngStream::new(21, streams::INIT);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let w1 = Tensor::randn(&[3, 8], 0.5, &mut rng);
        let b1 = Tensor::zeros(&[8]);
        let w2 = Tensor::randn(&[8, 5], 0.5, &mut rng);
        let b2 = Tensor::zeros(&[5]);
        let labels = vec![0usize, 2, 4, 1];
        let builder = move |g: &mut Graph, p: &[NodeId]| {
            let xn = g.constant(x.clone());
            let h = g.affine(xn, p[0], p[1])?;
            let h = g.activation(crate::graph::Activation::Tanh, h);
            let logits = g.affine(h, p[2], p[3])?;
            g.cross_entropy(logits, &labels)
        };
        let err = grad_check(&builder, &[w1, b1, w2, b2], 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn non_deterministic_builder_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u64);
        let builder = move |g: &mut Graph, _p: &[NodeId]| {
            calls.set(calls.get() + 1);
            let c = g.constant(Tensor::scalar(calls.get() as f64));
            Ok(g.sum_all(c))
        };
        let w = Tensor::scalar(1.0);
        assert!(matches!(
            grad_check(&builder, &[w], 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn frozen_stochastic_layers_pass() {
        // a builder that derives its noise from a fixed seed is deterministic
        let builder = |g: &mut Graph, p: &[NodeId]| {
            let mut rng = RngStream::new(5, streams::INPUT_NOISE);
            let noisy = g.gaussian_noise(p[0], 0.1, &mut rng, true);
            let sq = g.mul_elem(noisy, noisy)?;
            Ok(g.mean_all(sq))
        };
        let w = Tensor::new(vec![4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let err = grad_check(&builder, &[w], 1e-5).unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }
}
