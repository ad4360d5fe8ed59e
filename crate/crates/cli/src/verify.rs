//! Self-checks run by `ddnet verify`: parameter counts of the full-size
//! networks and finite-difference gradient checks of the building blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ddnet_core::netblocks::{build_network, forward_graph, NetworkSpec};
use ddnet_core::tensor::{grad_check, BatchNormMode, GradCheckReport, NetworkWeights, ParamKind, Tensor, TensorError};

/// Published per-layer and total counts of the reference prediction network.
pub const PREDNET_LAYERS: [usize; 8] = [903_424, 256, 819_456, 256, 295_168, 256, 33_024, 3_458];
pub const PREDNET_TOTALS: (usize, usize, usize) = (2_055_298, 2_054_914, 384);
/// Published per-layer and total counts of the reference assimilation network.
pub const DANET_LAYERS: [usize; 6] = [422_656, 256, 295_168, 256, 33_024, 1_729];
pub const DANET_TOTALS: (usize, usize, usize) = (753_089, 752_833, 256);

/// Relative-error bound of the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureCheck {
    pub name: &'static str,
    pub layers: Vec<(String, usize)>,
    /// (total, trainable, non-trainable) of a built weight table.
    pub totals: (usize, usize, usize),
    pub expected_layers: Vec<usize>,
    pub expected_totals: (usize, usize, usize),
}

impl ArchitectureCheck {
    pub fn passed(&self) -> bool {
        self.totals == self.expected_totals
            && self.layers.iter().map(|(_, c)| *c).eq(self.expected_layers.iter().copied())
    }
}

fn architecture(name: &'static str, spec: NetworkSpec, layers: &[usize], totals: (usize, usize, usize)) -> ArchitectureCheck {
    let w = build_network::<f32>(&spec, 0).expect("reference spec is valid");
    ArchitectureCheck {
        name,
        layers: spec.layer_param_counts(),
        totals: w.count_params(),
        expected_layers: layers.to_vec(),
        expected_totals: totals,
    }
}

pub fn architecture_checks() -> Vec<ArchitectureCheck> {
    vec![
        architecture("prednet", NetworkSpec::prednet_reference(), &PREDNET_LAYERS, PREDNET_TOTALS),
        architecture("danet", NetworkSpec::danet_reference(), &DANET_LAYERS, DANET_TOTALS),
    ]
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

fn net_check(spec: &NetworkSpec, steps: usize, seed: u64, mode: BatchNormMode) -> Result<GradCheckReport, TensorError> {
    let weights: NetworkWeights<f64> =
        build_network(spec, seed).map_err(|e| TensorError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let input = random(&mut rng, &[steps, spec.in_channels, 5, 6], 1.0);
    let target = random(&mut rng, &[steps, spec.out_channels, 5, 6], 0.5);
    grad_check(
        |g, w| {
            let whole = g.leaf(input.clone());
            let xs = (0..steps).map(|t| g.select(whole, t)).collect::<Result<Vec<_>, _>>()?;
            let fwd = forward_graph(g, w, spec, &xs, mode).map_err(|e| TensorError::Invalid(e.to_string()))?;
            g.mse(fwd.output, &target)
        },
        &weights,
        6,
        seed + 2,
    )
}

/// Runs every gradient check and returns `(name, report)` pairs.
pub fn gradient_checks() -> Result<Vec<(&'static str, GradCheckReport)>, TensorError> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    let mut w = NetworkWeights::new();
    w.insert("k", random(&mut rng, &[3, 2, 3, 3], 0.5), ParamKind::Trainable);
    w.insert("b", random(&mut rng, &[3], 0.5), ParamKind::Trainable);
    w.insert("x", random(&mut rng, &[2, 5, 6], 1.0), ParamKind::Trainable);
    let target = random(&mut rng, &[3, 5, 6], 1.0);
    let r = grad_check(
        |g, w| {
            let (x, k, b) = (g.param(w, "x")?, g.param(w, "k")?, g.param(w, "b")?);
            let y = g.conv2d(x, k, Some(b))?;
            let y = g.tanh(y);
            g.mse(y, &target)
        },
        &w,
        20,
        1,
    )?;
    out.push(("conv2d", r));

    let mut w = NetworkWeights::new();
    w.insert("x", random(&mut rng, &[3, 4, 4], 2.0), ParamKind::Trainable);
    w.insert("scale", random(&mut rng, &[3], 1.5), ParamKind::Trainable);
    w.insert("shift", random(&mut rng, &[3], 1.0), ParamKind::Trainable);
    let target = random(&mut rng, &[3, 4, 4], 1.0);
    let r = grad_check(
        |g, w| {
            let (x, s, b) = (g.param(w, "x")?, g.param(w, "scale")?, g.param(w, "shift")?);
            let (y, _) = g.batchnorm(x, s, b, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], BatchNormMode::Train, 1e-3)?;
            g.mse(y, &target)
        },
        &w,
        16,
        2,
    )?;
    out.push(("batchnorm", r));

    // One ConvLSTM layer run over three steps, so the recurrent path is exercised.
    let cell = NetworkSpec {
        kernels: vec![3],
        batchnorm: false,
        ..NetworkSpec::danet_desk(3)
    };
    out.push(("convlstm_cell", net_check(&cell, 3, 3, BatchNormMode::Train)?));
    out.push(("prednet_hidden4", net_check(&NetworkSpec::prednet_desk(4), 2, 4, BatchNormMode::Train)?));
    Ok(out)
}

/// Formats with thousands separators, as in `2,055,298`.
pub fn grouped(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouping() {
        assert_eq!(grouped(2_055_298), "2,055,298");
        assert_eq!(grouped(384), "384");
        assert_eq!(grouped(1000), "1,000");
    }
}
