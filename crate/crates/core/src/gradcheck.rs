//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Which coordinates of each parameter tensor to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per tensor, chosen by a seeded sampler.
    Sample { per_tensor: usize, seed: u64 },
}

/// Analytic gradient of `f` with respect to each parameter.
pub fn analytic_gradient<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", "function must be scalar-valued"));
    }
    let s = v.data()[0];
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(s)
}

fn coordinates(p: &Tensor, coverage: Coverage, tensor_index: usize) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..p.numel()).collect(),
        Coverage::Sample { per_tensor, seed } => {
            if p.numel() <= per_tensor {
                (0..p.numel()).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tensor_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut v = sample(&mut rng, p.numel(), per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        }
    }
}

/// Central differences at the selected coordinates. Entries outside the
/// coverage are `None`.
pub fn numeric_gradient<F>(f: &F, params: &[Tensor], eps: f64, coverage: Coverage) -> Result<Vec<Vec<Option<f64>>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Invalid(format!("grad_check eps {eps} outside (0, 1e-3]")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut col = vec![None; params[t].numel()];
        for i in coordinates(&params[t], coverage, t) {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let fp = eval_scalar(f, &work)?;
            work[t].data_mut()[i] = orig - eps;
            let fm = eval_scalar(f, &work)?;
            work[t].data_mut()[i] = orig;
            col[i] = Some((fp - fm) / (2.0 * eps));
        }
        out.push(col);
    }
    Ok(out)
}

/// `max |analytic − numeric| / max(1, |numeric|)` over the covered entries.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Vec<Option<f64>>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (av, nv) in a.data().iter().zip(n) {
            if let Some(nv) = nv {
                worst = worst.max((av - nv).abs() / nv.abs().max(1.0));
            }
        }
    }
    worst
}

/// Compares tape gradients of the scalar function `f` with central
/// differences and returns the maximum relative error.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, coverage: Coverage) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let numeric = numeric_gradient(&f, params, eps, coverage)?;
    let analytic = analytic_gradient(&f, params)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn square_sum(g: &mut Graph, v: &[Var]) -> Result<Var> {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let err = grad_check(square_sum, &[x], 1e-5, Coverage::All).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn doubled_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let params = [x];
        let numeric = numeric_gradient(&square_sum, &params, 1e-5, Coverage::All).unwrap();
        let mut analytic = analytic_gradient(&square_sum, &params).unwrap();
        analytic[0].data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let err = max_relative_error(&analytic, &numeric);
        // |2g − g| / max(1, |g|) is ≈ 1 wherever |g| ≥ 1.
        assert!(err > 0.9 && err < 1.0 + 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(square_sum, &[x.clone()], 0.0, Coverage::All).is_err());
        assert!(grad_check(square_sum, &[x], 1e-2, Coverage::All).is_err());
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::vector(vec![1e200]);
        let r = grad_check(
            |g: &mut Graph, v: &[Var]| {
                let a = g.mul(v[0], v[0])?;
                let b = g.mul(a, a)?;
                g.sum(b)
            },
            &[x],
            1e-5,
            Coverage::All,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
