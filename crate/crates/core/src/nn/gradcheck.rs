use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::Result;

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function of `params` against
/// central finite differences with step `eps`; returns the max relative error.
///
/// `f` builds the scalar on a fresh graph from the bound parameter vars. The
/// numeric side only ever reads forward values.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        for i in 0..params[k].len() {
            let orig = params[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form() {
        // x^T A x with A = [[2, 1], [1, 3]]
        let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![0.7, -1.3]).unwrap();
        let err = grad_check(&[x], 1e-4, |g, v| {
            let av = g.input(a.clone());
            let ax = g.matmul(av, v[0])?;
            let prod = g.mul(ax, v[0])?;
            g.sum(prod)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(&[x], 1e-4, |g, _| Ok(g.input(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(err, 0.0);
    }
}
