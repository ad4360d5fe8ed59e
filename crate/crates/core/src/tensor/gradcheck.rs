//! Central-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NetworkWeights, ParamKind, Result, TensorError, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// (parameter, flat index, analytic, numeric) at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences on up to `per_tensor` randomly chosen entries of every
/// trainable tensor.
pub fn grad_check<F>(f: F, weights: &NetworkWeights<f64>, per_tensor: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &NetworkWeights<f64>) -> Result<Var>,
{
    let eval = |w: &NetworkWeights<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, w)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(TensorError::Invalid("grad_check needs a scalar function".into()));
        }
        Ok(v.data()[0])
    };

    let mut graph = Graph::new();
    let out = f(&mut graph, weights)?;
    let grads = graph.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = weights.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    let names: Vec<String> = weights
        .iter()
        .filter(|(_, _, k)| *k == ParamKind::Trainable)
        .map(|(n, _, _)| n.to_string())
        .collect();
    for name in names {
        let len = weights.get(&name)?.len();
        let analytic_all = grads.param(&name);
        let picks = sample(&mut rng, len, per_tensor.min(len));
        for idx in picks.iter() {
            let original = weights.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = original + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = original - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = original;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = analytic_all.map_or(0.0, |g| g[idx]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((name.clone(), idx, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Activation, Tensor};

    fn weights(entries: &[(&str, &[usize], f64)]) -> NetworkWeights<f64> {
        let mut w = NetworkWeights::new();
        for (i, (name, shape, scale)) in entries.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|j| (((j * 37 + i * 11) % 23) as f64 / 23.0 - 0.5) * scale)
                .collect();
            w.insert(*name, Tensor::from_vec(shape, data).unwrap(), ParamKind::Trainable);
        }
        w
    }

    #[test]
    fn linear_function_is_exact() {
        let w = weights(&[("x", &[10], 1.0)]);
        let coeffs = Tensor::from_vec(&[10], (0..10).map(|i| 0.3 * i as f64 - 1.2).collect()).unwrap();
        let report = grad_check(
            |g, w| {
                let x = g.param(w, "x")?;
                let c = g.leaf(coeffs.clone());
                let p = g.mul(x, c)?;
                Ok(g.sum(p))
            },
            &w,
            10,
            1,
        )
        .unwrap();
        assert_eq!(report.checked, 10);
        assert!(report.max_relative_error < 1e-10, "{report:?}");
    }

    #[test]
    fn activations_match_finite_differences() {
        for kind in [Activation::Sigmoid, Activation::Tanh] {
            let w = weights(&[("x", &[16], 4.0)]);
            let report = grad_check(
                |g, w| {
                    let x = g.param(w, "x")?;
                    let y = g.activation(x, kind);
                    Ok(g.sum(y))
                },
                &w,
                16,
                2,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-8, "{kind:?}: {report:?}");
        }
    }
}
