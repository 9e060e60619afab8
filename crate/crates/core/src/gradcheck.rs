//! Central finite-difference oracle for autodiff gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Builds a scalar from parameter leaves bound into a fresh graph.
pub trait ScalarFn: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> {}
impl<F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>> ScalarFn for F {}

fn evaluate(f: &impl ScalarFn, params: &[Tensor]) -> Result<(Graph, NodeId, Vec<NodeId>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NonScalarOutput(v.shape().to_vec()));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite { op: "finite_diff_check" });
    }
    Ok((g, out, ids))
}

fn scalar(f: &impl ScalarFn, params: &[Tensor]) -> Result<f64> {
    evaluate(f, params).map(|(g, out, _)| g.value(out).item())
}

/// Largest relative disagreement between autodiff and `(f(x+ε) − f(x−ε)) / 2ε`
/// over every scalar entry of every parameter. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(f: impl ScalarFn, params: &[Tensor], epsilon: f64) -> Result<f64> {
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();
    check_coords(&f, params, epsilon, &coords)
}

/// As [`finite_diff_check`] but only probes the listed `(param, flat index)`
/// coordinates. Useful when a full sweep would take too many evaluations.
pub fn finite_diff_check_coords(
    f: impl ScalarFn,
    params: &[Tensor],
    epsilon: f64,
    coords: &[(usize, usize)],
) -> Result<f64> {
    check_coords(&f, params, epsilon, coords)
}

fn check_coords(f: &impl ScalarFn, params: &[Tensor], epsilon: f64, coords: &[(usize, usize)]) -> Result<f64> {
    let (g, out, ids) = evaluate(f, params)?;
    let analytic = g.grad(out, &ids)?;
    drop(g);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for &(p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + epsilon;
        let plus = scalar(f, &work)?;
        work[p].data_mut()[i] = orig - epsilon;
        let minus = scalar(f, &work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[p].data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_at_half() {
        let err = finite_diff_check(|g: &mut Graph, p: &[NodeId]| g.exp(p[0]), &[Tensor::scalar(0.5)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_function_is_exact_for_any_epsilon() {
        let f = |g: &mut Graph, p: &[NodeId]| {
            let y = g.scale(p[0], 3.0)?;
            g.sum_all(y)
        };
        let x = Tensor::new(vec![3], vec![0.1, -2.0, 4.0]).unwrap();
        for eps in [1e-6, 1e-3, 1.0] {
            let err = finite_diff_check(f, std::slice::from_ref(&x), eps).unwrap();
            assert!(err < 1e-9, "eps {eps}: {err}");
        }
    }

    #[test]
    fn nan_output_is_an_error() {
        let f = |g: &mut Graph, p: &[NodeId]| {
            let y = g.scale(p[0], 0.0)?;
            let s = g.sum_all(y)?;
            g.pow(s, -1.0)
        };
        assert!(finite_diff_check(f, &[Tensor::scalar(1.0)], 1e-5).is_err());
    }
}
