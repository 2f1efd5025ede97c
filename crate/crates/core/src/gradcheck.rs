//! Finite-difference gradient verification.
//!
//! Runs in 64-bit mode: the builder closure re-creates the computation for
//! both the analytic backward pass and the central-difference probes, so the
//! check stays independent of how callers assembled their graphs.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Builds a scalar loss from parameter leaves that the harness registers.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph<f64>, params: &[NodeId]) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph<f64>, params: &[NodeId]) -> Result<NodeId> {
        self(g, params)
    }
}

fn eval(builder: &impl LossBuilder, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.constant(p.clone())).collect();
    let root = builder.build(&mut g, &ids)?;
    Ok(g.value(root).item())
}

/// Max over all parameter elements of
/// `|analytic − central| / max(1e-12, |analytic| + |central|)`,
/// with central differences at step `h`.
pub fn grad_check(builder: &impl LossBuilder, params: &[Tensor<f64>], h: f64) -> Result<f64> {
    // Analytic gradients.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| g.param(p.clone()))
        .collect();
    let root = builder.build(&mut g, &ids)?;
    let grads = g.backward(root)?;

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi]);
        for ei in 0..p.len() {
            let a = analytic.map(|t| t.data()[ei]).unwrap_or(0.0);
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= h;
            let numeric = (eval(builder, &plus)? - eval(builder, &minus)?) / (2.0 * h);
            let denom = (a.abs() + numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Polynomial exactness up to O(h²): fn = w², w = 3, h = 1e-5.
    #[test]
    fn square_function_is_exact() {
        let params = vec![Tensor::scalar(3.0)];
        let err = grad_check(
            &|g: &mut Graph<f64>, ps: &[NodeId]| {
                let sq = g.mul(ps[0], ps[0])?;
                g.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    /// Cross-entropy of a 3-class logit vector.
    #[test]
    fn cross_entropy_three_classes() {
        let params = vec![Tensor::new(vec![1, 3], vec![0.2, -1.3, 0.7]).unwrap()];
        let err = grad_check(
            &|g: &mut Graph<f64>, ps: &[NodeId]| g.cross_entropy(ps[0], vec![2]),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn composed_ops_pass_randomized_checks() {
        let mut rng = crate::rng::StreamRng::new(42, "gradcheck");
        for trial in 0..20 {
            let rows = 2 + rng.below(3);
            let cols = 2 + rng.below(3);
            let w = Tensor::from_fn(vec![rows, cols], |_| rng.uniform(-1.0, 1.0));
            let x = Tensor::from_fn(vec![cols, rows], |_| rng.uniform(-1.0, 1.0) + 0.1);
            let gain = Tensor::from_fn(vec![rows], |_| rng.uniform(0.5, 1.5));
            let bias = Tensor::from_fn(vec![rows], |_| rng.uniform(-0.2, 0.2));
            let err = grad_check(
                &|g: &mut Graph<f64>, ps: &[NodeId]| {
                    let h = g.matmul(ps[0], ps[1])?;
                    let h = g.gelu(h)?;
                    let h = g.layernorm(h, ps[2], ps[3])?;
                    let h = g.softmax(h)?;
                    g.sum_sq_scaled(h, 0.5)
                },
                &[w, x, gain, bias],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }
}
