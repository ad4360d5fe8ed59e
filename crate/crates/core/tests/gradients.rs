//! Finite-difference checks of tape gradients and structural properties of
//! the networks.

use ddnet_core::netblocks::{build_network, forward_graph, forward_net, NetworkSpec};
use ddnet_core::tensor::{grad_check, BatchNormMode, Graph, NetworkWeights, ParamKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn conv2d_tanh_mse() {
    let mut w = NetworkWeights::new();
    w.insert("k", random(&[3, 2, 3, 3], 0.5, 1), ParamKind::Trainable);
    w.insert("b", random(&[3], 0.5, 2), ParamKind::Trainable);
    w.insert("x", random(&[2, 5, 6], 1.0, 3), ParamKind::Trainable);
    let target = random(&[3, 5, 6], 1.0, 4);
    let report = grad_check(
        |g, w| {
            let x = g.param(w, "x")?;
            let k = g.param(w, "k")?;
            let b = g.param(w, "b")?;
            let y = g.conv2d(x, k, Some(b))?;
            let y = g.tanh(y);
            g.mse(y, &target)
        },
        &w,
        20,
        7,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn conv3d_head() {
    let mut w = NetworkWeights::new();
    w.insert("k", random(&[2, 3, 3, 3, 3], 0.5, 5), ParamKind::Trainable);
    w.insert("b", random(&[2], 0.5, 6), ParamKind::Trainable);
    w.insert("x", random(&[4, 3, 4, 5], 1.0, 8), ParamKind::Trainable);
    let target = random(&[4, 2, 4, 5], 1.0, 9);
    let report = grad_check(
        |g, w| {
            let x = g.param(w, "x")?;
            let k = g.param(w, "k")?;
            let b = g.param(w, "b")?;
            let y = g.conv3d(x, k, b)?;
            g.mse(y, &target)
        },
        &w,
        25,
        3,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

#[test]
fn batchnorm_both_modes() {
    for mode in [BatchNormMode::Train, BatchNormMode::Infer] {
        let mut w = NetworkWeights::new();
        w.insert("x", random(&[3, 4, 4], 2.0, 10), ParamKind::Trainable);
        w.insert("scale", random(&[3], 1.5, 11), ParamKind::Trainable);
        w.insert("shift", random(&[3], 1.0, 12), ParamKind::Trainable);
        let target = random(&[3, 4, 4], 1.0, 13);
        let mm = [0.1, -0.2, 0.3];
        let mv = [0.5, 1.5, 2.0];
        let report = grad_check(
            |g, w| {
                let x = g.param(w, "x")?;
                let s = g.param(w, "scale")?;
                let b = g.param(w, "shift")?;
                let (y, _) = g.batchnorm(x, s, b, &mm, &mv, mode, 1e-3)?;
                g.mse(y, &target)
            },
            &w,
            16,
            4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{mode:?}: {report:?}");
    }
}

#[test]
fn convlstm_sequence_and_full_prednet() {
    // Small prediction network over a three-step sequence.
    let spec = NetworkSpec::prednet_desk(4);
    let weights: NetworkWeights<f64> = build_network(&spec, 21).unwrap();
    let input = random(&[3, 8, 5, 6], 1.0, 22);
    let target = random(&[3, 2, 5, 6], 0.5, 23);
    for mode in [BatchNormMode::Train, BatchNormMode::Infer] {
        let report = grad_check(
            |g, w| {
                let whole = g.leaf(input.clone());
                let xs = (0..3).map(|t| g.select(whole, t)).collect::<Result<Vec<_>, _>>()?;
                let fwd = forward_graph(g, w, &spec, &xs, mode).map_err(|e| {
                    ddnet_core::tensor::TensorError::Invalid(e.to_string())
                })?;
                g.mse(fwd.output, &target)
            },
            &weights,
            6,
            24,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{mode:?}: {report:?}");
    }
}

#[test]
fn tape_forward_matches_pure_forward() {
    let spec = NetworkSpec::danet_desk(3);
    let w: NetworkWeights<f64> = build_network(&spec, 2).unwrap();
    let input = random(&[2, 2, 6, 6], 1.0, 5);
    let pure = forward_net(&w, &spec, &input, BatchNormMode::Train).unwrap();
    let mut g = Graph::new();
    let whole = g.leaf(input.clone());
    let xs: Vec<_> = (0..2).map(|t| g.select(whole, t).unwrap()).collect();
    let fwd = forward_graph(&mut g, &w, &spec, &xs, BatchNormMode::Train).unwrap();
    assert_eq!(g.value(fwd.output).data(), pure.output.data());
}

/// Shifting a compact input pattern inside a zero field shifts the output
/// the same way, away from the boundaries.
#[test]
fn translation_equivariance_in_interior() {
    let spec = NetworkSpec::danet_desk(3);
    let w: NetworkWeights<f64> = build_network(&spec, 31).unwrap();
    let (h, wd) = (20, 24);
    let patch = random(&[2, 2, 3, 3], 1.0, 32);
    let place = |dy: usize, dx: usize| {
        let mut t = Tensor::<f64>::zeros(&[2, 2, h, wd]);
        for l in 0..2 {
            for c in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        let v = patch.data()[((l * 2 + c) * 3 + y) * 3 + x];
                        t.data_mut()[((l * 2 + c) * h + 8 + dy + y) * wd + 8 + dx + x] = v;
                    }
                }
            }
        }
        t
    };
    let (dy, dx) = (2, 3);
    let a = forward_net(&w, &spec, &place(0, 0), BatchNormMode::Infer).unwrap().output;
    let b = forward_net(&w, &spec, &place(dy, dx), BatchNormMode::Infer).unwrap().output;
    // Two steps through [5,3,1] plus the head reach 6 cells; keep clear of the padding.
    let margin = 9;
    for l in 0..2 {
        for y in margin..h - margin - dy {
            for x in margin..wd - margin - dx {
                let ia = (l * h + y) * wd + x;
                let ib = (l * h + y + dy) * wd + x + dx;
                assert!((a.data()[ia] - b.data()[ib]).abs() < 1e-12, "l={l} y={y} x={x}");
            }
        }
    }
}
