//! Central finite-difference check of autodiff gradients (float64 only).

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Denominator floor for the relative error, so exact zeros compare
    /// absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare autodiff gradients of the scalar `f(inputs)` against central
/// differences, for every element of every input.
///
/// `f` receives a fresh graph and one variable per input and must return a
/// scalar variable.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = xs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Dimension("grad_check needs a scalar output".into()));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - cfg.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = i;
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = Tensor::from_f64([2, 3], &[0.1, -0.4, 2.0, 1.5, 0.3, -0.2]).unwrap();
        let w = Tensor::from_f64([2, 3], &[0.7, 0.2, -0.5, 0.1, 0.9, 0.4]).unwrap();
        let b = Tensor::from_f64([2], &[0.05, -0.3]).unwrap();
        let probe = Tensor::from_f64([2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                g.project(y, &probe)
            },
            &[x, w, b],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
        assert_eq!(r.checked, 6 + 6 + 2);
    }
}
