//! ConvLSTM building blocks and the two network layouts.
//!
//! A network is a stack of ConvLSTM layers (optionally batch-normalized
//! between layers) followed by a 3-D convolution head over the stacked
//! hidden sequence. Gate order inside every fused kernel is `(i, f, g, o)`:
//! input gate, forget gate, candidate, output gate. There are no peephole
//! terms.
//!
//! Parameter names follow `convlstm{n}.{input_kernel,recurrent_kernel,gate_bias}`,
//! `bn{n}.{scale,shift,moving_mean,moving_var}` and `head.{kernel,bias}`,
//! with layers numbered from 1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::kernels::update_moving_stats;
use crate::tensor::{
    BatchNormMode, BatchNormParams, Graph, NetworkWeights, ParamKind, Precision, Real, Tensor, TensorError, Var,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input has {actual} channels, network expects {expected}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("weights do not match spec: {0}")]
    WeightsMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Layer layout of a ConvLSTM + Conv3D network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// One odd spatial kernel size per ConvLSTM layer.
    pub kernels: Vec<usize>,
    pub out_channels: usize,
    /// Batchnorm after every ConvLSTM layer except the last.
    pub batchnorm: bool,
    pub head_kernel: usize,
    pub head_time_kernel: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl NetworkSpec {
    fn base(in_channels: usize, hidden: usize, kernels: &[usize], out_channels: usize) -> Self {
        Self {
            in_channels,
            hidden_channels: hidden,
            kernels: kernels.to_vec(),
            out_channels,
            batchnorm: true,
            head_kernel: 3,
            head_time_kernel: 3,
            bn_momentum: 0.99,
            bn_epsilon: 1e-3,
        }
    }

    /// Full-size prediction network: 8 inputs, 4 ConvLSTM layers, 2 outputs.
    pub fn prednet_reference() -> Self {
        Self::base(8, 64, &[7, 5, 3, 1], 2)
    }

    /// Full-size assimilation network: 2 inputs, 3 ConvLSTM layers, 1 output.
    pub fn danet_reference() -> Self {
        Self::base(2, 64, &[5, 3, 1], 1)
    }

    pub fn prednet_desk(hidden: usize) -> Self {
        Self::base(8, hidden, &[5, 3, 1], 2)
    }

    pub fn danet_desk(hidden: usize) -> Self {
        Self::base(2, hidden, &[5, 3, 1], 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NetError::InvalidSpec(msg));
        if self.in_channels == 0 || self.hidden_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernels.is_empty() {
            return bad("at least one ConvLSTM layer is required".into());
        }
        for &k in self.kernels.iter().chain([&self.head_kernel, &self.head_time_kernel]) {
            if k % 2 == 0 {
                return bad(format!("kernel sizes must be odd, got {k}"));
            }
        }
        if !(self.bn_epsilon > 0.0) {
            return bad(format!("bn_epsilon must be positive, got {}", self.bn_epsilon));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must lie in [0, 1), got {}", self.bn_momentum));
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.kernels.len()
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_channels
        } else {
            self.hidden_channels
        }
    }

    fn has_bn(&self, layer: usize) -> bool {
        self.batchnorm && layer + 1 < self.layers()
    }

    /// Per-layer scalar counts in execution order (ConvLSTM, batchnorm, ..., head).
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (l, &k) in self.kernels.iter().enumerate() {
            out.push((
                format!("convlstm{}", l + 1),
                convlstm_param_count(self.layer_input(l), self.hidden_channels, k),
            ));
            if self.has_bn(l) {
                out.push((format!("bn{}", l + 1), 4 * self.hidden_channels));
            }
        }
        out.push((
            "head".into(),
            self.hidden_channels * self.out_channels * self.head_time_kernel * self.head_kernel * self.head_kernel
                + self.out_channels,
        ));
        out
    }
}

/// `4·hidden·(in + hidden)·k² + 4·hidden`.
pub fn convlstm_param_count(in_channels: usize, hidden: usize, k: usize) -> usize {
    4 * hidden * (in_channels + hidden) * k * k + 4 * hidden
}

/// Parameters of one ConvLSTM layer, gates fused along the output axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCell<T> {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    /// `[4·hidden, in, k, k]`
    pub input_kernel: Tensor<T>,
    /// `[4·hidden, hidden, k, k]`
    pub recurrent_kernel: Tensor<T>,
    /// `[4·hidden]`
    pub gate_bias: Tensor<T>,
}

impl<T: Real> ConvLstmCell<T> {
    pub fn zeros(in_channels: usize, hidden: usize, k: usize) -> Self {
        Self {
            in_channels,
            hidden_channels: hidden,
            kernel_size: k,
            input_kernel: Tensor::zeros(&[4 * hidden, in_channels, k, k]),
            recurrent_kernel: Tensor::zeros(&[4 * hidden, hidden, k, k]),
            gate_bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.input_kernel.len() + self.recurrent_kernel.len() + self.gate_bias.len()
    }

    /// Copies the cell out of a weight table (layer numbered from 1).
    pub fn from_weights(weights: &NetworkWeights<T>, layer: usize) -> Result<Self> {
        let ik = weights.get(&format!("convlstm{layer}.input_kernel"))?.clone();
        let rk = weights.get(&format!("convlstm{layer}.recurrent_kernel"))?.clone();
        let b = weights.get(&format!("convlstm{layer}.gate_bias"))?.clone();
        let s = ik.shape().to_vec();
        Ok(Self {
            in_channels: s[1],
            hidden_channels: s[0] / 4,
            kernel_size: s[2],
            input_kernel: ik,
            recurrent_kernel: rk,
            gate_bias: b,
        })
    }
}

/// Names of one cell's tensors on a tape.
struct CellVars {
    input_kernel: Var,
    recurrent_kernel: Var,
    gate_bias: Var,
    hidden: usize,
}

/// One ConvLSTM step on the tape. A `None` state is the zero state, for
/// which the recurrent convolution and forget path vanish identically and
/// are skipped.
fn cell_step<T: Real>(g: &mut Graph<T>, cell: &CellVars, x: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
    let hid = cell.hidden;
    let mut z = g.conv2d(x, cell.input_kernel, Some(cell.gate_bias))?;
    if let Some((h, _)) = state {
        let zr = g.conv2d(h, cell.recurrent_kernel, None)?;
        z = g.add(z, zr)?;
    }
    let zi = g.slice_channels(z, 0, hid)?;
    let zf = g.slice_channels(z, hid, hid)?;
    let zg = g.slice_channels(z, 2 * hid, hid)?;
    let zo = g.slice_channels(z, 3 * hid, hid)?;
    let i = g.sigmoid(zi);
    let gg = g.tanh(zg);
    let o = g.sigmoid(zo);
    let mut c_new = g.mul(i, gg)?;
    if let Some((_, c)) = state {
        let f = g.sigmoid(zf);
        let fc = g.mul(f, c)?;
        c_new = g.add(fc, c_new)?;
    }
    let tc = g.tanh(c_new);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c_new))
}

/// `(h', c')` for one ConvLSTM step with explicit state tensors.
pub fn convlstm_step<T: Real>(
    params: &ConvLstmCell<T>,
    x: &Tensor<T>,
    h: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let spatial = x.shape().get(1..).unwrap_or(&[]).to_vec();
    let mut state_shape = vec![params.hidden_channels];
    state_shape.extend_from_slice(&spatial);
    if x.shape().first() != Some(&params.in_channels) {
        return Err(NetError::ChannelMismatch {
            expected: params.in_channels,
            actual: x.shape().first().copied().unwrap_or(0),
        });
    }
    for t in [h, c] {
        if t.shape() != state_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "convlstm_step state",
                expected: state_shape.clone(),
                actual: t.shape().to_vec(),
            }
            .into());
        }
    }
    let mut g = Graph::new();
    let vars = CellVars {
        input_kernel: g.leaf(params.input_kernel.clone()),
        recurrent_kernel: g.leaf(params.recurrent_kernel.clone()),
        gate_bias: g.leaf(params.gate_bias.clone()),
        hidden: params.hidden_channels,
    };
    let xv = g.leaf(x.clone());
    let hv = g.leaf(h.clone());
    let cv = g.leaf(c.clone());
    let (h2, c2) = cell_step(&mut g, &vars, xv, Some((hv, cv)))?;
    Ok((g.value(h2).clone(), g.value(c2).clone()))
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<f64> {
    let limit = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Initializes a weight table for `spec`: fan-in uniform kernels, forget
/// gate bias +1, other biases 0, identity batchnorm.
pub fn build_network<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<NetworkWeights<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hid = spec.hidden_channels;
    let mut w = NetworkWeights::<T>::new();
    for (l, &k) in spec.kernels.iter().enumerate() {
        let n = l + 1;
        let cin = spec.layer_input(l);
        let ik = uniform_tensor(&mut rng, &[4 * hid, cin, k, k], cin * k * k);
        let rk = uniform_tensor(&mut rng, &[4 * hid, hid, k, k], hid * k * k);
        let mut bias = vec![0.0; 4 * hid];
        bias[hid..2 * hid].iter_mut().for_each(|b| *b = 1.0);
        w.insert(format!("convlstm{n}.input_kernel"), ik.cast(), ParamKind::Trainable);
        w.insert(format!("convlstm{n}.recurrent_kernel"), rk.cast(), ParamKind::Trainable);
        w.insert(
            format!("convlstm{n}.gate_bias"),
            Tensor::from_f64_slice(&[4 * hid], &bias)?,
            ParamKind::Trainable,
        );
        if spec.has_bn(l) {
            w.insert(format!("bn{n}.scale"), Tensor::full(&[hid], T::one()), ParamKind::Trainable);
            w.insert(format!("bn{n}.shift"), Tensor::zeros(&[hid]), ParamKind::Trainable);
            w.insert(format!("bn{n}.moving_mean"), Tensor::zeros(&[hid]), ParamKind::NonTrainable);
            w.insert(format!("bn{n}.moving_var"), Tensor::full(&[hid], T::one()), ParamKind::NonTrainable);
        }
    }
    let (kt, k) = (spec.head_time_kernel, spec.head_kernel);
    let head = uniform_tensor(&mut rng, &[spec.out_channels, hid, kt, k, k], hid * kt * k * k);
    w.insert("head.kernel", head.cast(), ParamKind::Trainable);
    w.insert("head.bias", Tensor::zeros(&[spec.out_channels]), ParamKind::Trainable);
    Ok(w)
}

/// Prediction-network weights (see [`NetworkSpec::prednet_reference`]).
pub fn build_prednet<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<NetworkWeights<T>> {
    build_network(spec, seed)
}

/// Assimilation-network weights (see [`NetworkSpec::danet_reference`]).
pub fn build_danet<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<NetworkWeights<T>> {
    build_network(spec, seed)
}

/// (total, trainable, non-trainable).
pub fn count_params<T: Real>(weights: &NetworkWeights<T>) -> (usize, usize, usize) {
    weights.count_params()
}

/// Checks that `weights` has exactly the tensors and shapes `spec` implies.
pub fn check_weights<T: Real>(spec: &NetworkSpec, weights: &NetworkWeights<T>) -> Result<()> {
    let reference = build_network::<f32>(spec, 0)?;
    if reference.len() != weights.len() {
        return Err(NetError::WeightsMismatch(format!(
            "expected {} tensors, found {}",
            reference.len(),
            weights.len()
        )));
    }
    for (name, t, kind) in reference.iter() {
        let other = weights
            .get(name)
            .map_err(|_| NetError::WeightsMismatch(format!("missing tensor '{name}'")))?;
        if other.shape() != t.shape() || weights.kind(name) != Some(kind) {
            return Err(NetError::WeightsMismatch(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                other.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Batch statistics of one batchnorm application in train mode.
#[derive(Debug, Clone)]
pub struct LayerBatchStats<T> {
    /// ConvLSTM layer number (from 1) the batchnorm follows.
    pub layer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Tape-level forward output.
pub struct GraphForward<T> {
    /// `[L, C_out, H, W]`
    pub output: Var,
    pub batch_stats: Vec<LayerBatchStats<T>>,
}

/// Runs the network on the tape over a sequence of `[C_in, H, W]` inputs.
/// Hidden and cell states start at zero on every call.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    weights: &NetworkWeights<T>,
    spec: &NetworkSpec,
    inputs: &[Var],
    mode: BatchNormMode,
) -> Result<GraphForward<T>> {
    if inputs.is_empty() {
        return Err(NetError::InvalidSpec("input sequence must have length >= 1".into()));
    }
    for &x in inputs {
        let c = g.shape(x).first().copied().unwrap_or(0);
        if c != spec.in_channels || g.shape(x).len() != 3 {
            return Err(NetError::ChannelMismatch {
                expected: spec.in_channels,
                actual: c,
            });
        }
    }
    let eps = T::of(spec.bn_epsilon);
    let mut batch_stats = Vec::new();
    let mut seq: Vec<Var> = inputs.to_vec();
    for l in 0..spec.layers() {
        let n = l + 1;
        let cell = CellVars {
            input_kernel: g.param(weights, &format!("convlstm{n}.input_kernel"))?,
            recurrent_kernel: g.param(weights, &format!("convlstm{n}.recurrent_kernel"))?,
            gate_bias: g.param(weights, &format!("convlstm{n}.gate_bias"))?,
            hidden: spec.hidden_channels,
        };
        let mut state = None;
        let mut hs = Vec::with_capacity(seq.len());
        for &x in &seq {
            let (h, c) = cell_step(g, &cell, x, state)?;
            state = Some((h, c));
            hs.push(h);
        }
        if spec.has_bn(l) {
            let scale = g.param(weights, &format!("bn{n}.scale"))?;
            let shift = g.param(weights, &format!("bn{n}.shift"))?;
            let mm = weights.get(&format!("bn{n}.moving_mean"))?.data().to_vec();
            let mv = weights.get(&format!("bn{n}.moving_var"))?.data().to_vec();
            for h in hs.iter_mut() {
                let (y, stats) = g.batchnorm(*h, scale, shift, &mm, &mv, mode, eps)?;
                if let Some(s) = stats {
                    batch_stats.push(LayerBatchStats {
                        layer: n,
                        mean: s.mean,
                        var: s.var,
                    });
                }
                *h = y;
            }
        }
        seq = hs;
    }
    let stacked = g.stack(&seq)?;
    let hk = g.param(weights, "head.kernel")?;
    let hb = g.param(weights, "head.bias")?;
    let output = g.conv3d(stacked, hk, hb)?;
    Ok(GraphForward { output, batch_stats })
}

/// Folds train-mode batch statistics into the moving averages.
pub fn apply_batch_stats<T: Real>(
    weights: &mut NetworkWeights<T>,
    spec: &NetworkSpec,
    stats: &[LayerBatchStats<T>],
) -> Result<()> {
    for s in stats {
        let n = s.layer;
        let moving_mean = weights.get(&format!("bn{n}.moving_mean"))?.data().to_vec();
        let mut p = BatchNormParams {
            scale: vec![T::one(); moving_mean.len()],
            shift: vec![T::zero(); moving_mean.len()],
            moving_mean,
            moving_var: weights.get(&format!("bn{n}.moving_var"))?.data().to_vec(),
        };
        update_moving_stats(&mut p, &s.mean, &s.var, T::of(spec.bn_momentum));
        weights
            .get_mut(&format!("bn{n}.moving_mean"))?
            .data_mut()
            .copy_from_slice(&p.moving_mean);
        weights
            .get_mut(&format!("bn{n}.moving_var"))?
            .data_mut()
            .copy_from_slice(&p.moving_var);
    }
    Ok(())
}

/// Output of [`forward_net`].
#[derive(Debug, Clone)]
pub struct NetOutput<T> {
    /// `[L, C_out, H, W]`
    pub output: Tensor<T>,
    /// Empty in infer mode.
    pub batch_stats: Vec<LayerBatchStats<T>>,
}

/// Forward pass over `[L, C_in, H, W]` without gradient bookkeeping.
///
/// Train mode reports batch statistics instead of mutating `weights`; fold
/// them in with [`apply_batch_stats`].
pub fn forward_net<T: Real>(
    weights: &NetworkWeights<T>,
    spec: &NetworkSpec,
    input_sequence: &Tensor<T>,
    mode: BatchNormMode,
) -> Result<NetOutput<T>> {
    let shape = input_sequence.shape();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "forward_net input",
            expected: vec![1, spec.in_channels, 0, 0],
            actual: shape.to_vec(),
        }
        .into());
    }
    let mut g = Graph::new();
    let whole = g.leaf(input_sequence.clone());
    let inputs = (0..shape[0])
        .map(|t| g.select(whole, t))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let fwd = forward_graph(&mut g, weights, spec, &inputs, mode)?;
    let output = g.value(fwd.output).clone();
    output.ensure_finite("forward_net")?;
    Ok(NetOutput {
        output,
        batch_stats: fwd.batch_stats,
    })
}

/// Weights of either precision, chosen at training time.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelWeights {
    F32(NetworkWeights<f32>),
    F64(NetworkWeights<f64>),
}

impl ModelWeights {
    pub fn precision(&self) -> Precision {
        match self {
            ModelWeights::F32(_) => Precision::F32,
            ModelWeights::F64(_) => Precision::F64,
        }
    }

    pub fn count_params(&self) -> (usize, usize, usize) {
        match self {
            ModelWeights::F32(w) => w.count_params(),
            ModelWeights::F64(w) => w.count_params(),
        }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        match self {
            ModelWeights::F32(w) => check_weights(spec, w),
            ModelWeights::F64(w) => check_weights(spec, w),
        }
    }

    /// Infer-mode pass on one `[C_in, H, W]` frame; returns `[C_out, H, W]`.
    pub fn infer(&self, spec: &NetworkSpec, input: &[f32], height: usize, width: usize) -> Result<Vec<f32>> {
        fn run<T: Real>(
            w: &NetworkWeights<T>,
            spec: &NetworkSpec,
            input: &[f32],
            height: usize,
            width: usize,
        ) -> Result<Vec<f32>> {
            let data = input.iter().map(|&v| T::of(v as f64)).collect();
            let x = Tensor::from_vec(&[1, spec.in_channels, height, width], data)?;
            let out = forward_net(w, spec, &x, BatchNormMode::Infer)?;
            Ok(out.output.data().iter().map(|v| v.as_f64() as f32).collect())
        }
        match self {
            ModelWeights::F32(w) => run(w, spec, input, height, width),
            ModelWeights::F64(w) => run(w, spec, input, height, width),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_counts_match_published_tables() {
        let p = NetworkSpec::prednet_reference();
        let counts: Vec<usize> = p.layer_param_counts().into_iter().map(|(_, c)| c).collect();
        assert_eq!(counts, vec![903_424, 256, 819_456, 256, 295_168, 256, 33_024, 3_458]);
        let d = NetworkSpec::danet_reference();
        let counts: Vec<usize> = d.layer_param_counts().into_iter().map(|(_, c)| c).collect();
        assert_eq!(counts, vec![422_656, 256, 295_168, 256, 33_024, 1_729]);
    }

    #[test]
    fn built_weights_agree_with_layer_counts() {
        for spec in [NetworkSpec::prednet_reference(), NetworkSpec::danet_reference()] {
            let w = build_network::<f32>(&spec, 1).unwrap();
            let (total, _, _) = count_params(&w);
            let sum: usize = spec.layer_param_counts().iter().map(|(_, c)| c).sum();
            assert_eq!(total, sum);
        }
        let w = build_prednet::<f32>(&NetworkSpec::prednet_reference(), 3).unwrap();
        assert_eq!(count_params(&w), (2_055_298, 2_054_914, 384));
        let w = build_danet::<f32>(&NetworkSpec::danet_reference(), 3).unwrap();
        assert_eq!(count_params(&w), (753_089, 752_833, 256));
    }

    #[test]
    fn desk_spec_count_closed_form() {
        // in=8, hid=8, kernels [5,3,1], 3x3x3 head to 2 outputs.
        let closed = 4 * 8 * (8 + 8) * 25 + 4 * 8 // layer 1
            + 4 * 8 * (8 + 8) * 9 + 4 * 8 // layer 2
            + 4 * 8 * (8 + 8) + 4 * 8 // layer 3
            + 2 * 4 * 8 // two batchnorms
            + 8 * 2 * 27 + 2; // head
        let w = build_prednet::<f64>(&NetworkSpec::prednet_desk(8), 0).unwrap();
        assert_eq!(count_params(&w).0, closed);
        assert_eq!(count_params(&w).2, 2 * 2 * 8);
    }

    #[test]
    fn first_layer_count_examples() {
        assert_eq!(convlstm_param_count(8, 64, 7), 903_424);
        assert_eq!(convlstm_param_count(2, 64, 5), 422_656);
        let cell = ConvLstmCell::<f32>::zeros(8, 64, 7);
        assert_eq!(cell.parameter_count(), 903_424);
    }

    #[test]
    fn spec_validation() {
        let mut s = NetworkSpec::prednet_desk(4);
        s.kernels = vec![4];
        assert!(matches!(build_network::<f32>(&s, 0), Err(NetError::InvalidSpec(_))));
        let mut s = NetworkSpec::prednet_desk(4);
        s.bn_epsilon = 0.0;
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::prednet_desk(4);
        s.kernels.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn forget_bias_initialised_to_one() {
        let w = build_network::<f64>(&NetworkSpec::danet_desk(3), 9).unwrap();
        let b = w.get("convlstm1.gate_bias").unwrap().data();
        assert_eq!(b, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_cell_gives_zero_state() {
        let cell = ConvLstmCell::<f64>::zeros(2, 3, 3);
        let x = Tensor::zeros(&[2, 4, 5]);
        let h = Tensor::zeros(&[3, 4, 5]);
        let (h2, c2) = convlstm_step(&cell, &x, &h, &h).unwrap();
        assert_eq!(h2.shape(), &[3, 4, 5]);
        assert_eq!(c2.shape(), &[3, 4, 5]);
        assert!(h2.data().iter().chain(c2.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn cell_gates_hand_evaluated() {
        // 1x1 kernels, one channel: z = wx*x + wh*h + b per gate.
        let mut cell = ConvLstmCell::<f64>::zeros(1, 1, 1);
        cell.input_kernel = Tensor::from_vec(&[4, 1, 1, 1], vec![0.5, -0.25, 1.0, 2.0]).unwrap();
        cell.recurrent_kernel = Tensor::from_vec(&[4, 1, 1, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        cell.gate_bias = Tensor::from_vec(&[4], vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let (x, h, c) = (0.8, -0.5, 0.3);
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = s(0.5 * x + 0.1 * h);
        let f = s(-0.25 * x + 0.2 * h + 1.0);
        let gg = (1.0 * x + 0.3 * h).tanh();
        let o = s(2.0 * x + 0.4 * h - 1.0);
        let c2 = f * c + i * gg;
        let h2 = o * c2.tanh();
        let t = |v: f64| Tensor::from_vec(&[1, 1, 1], vec![v]).unwrap();
        let (hh, cc) = convlstm_step(&cell, &t(x), &t(h), &t(c)).unwrap();
        assert!((hh.data()[0] - h2).abs() < 1e-15);
        assert!((cc.data()[0] - c2).abs() < 1e-15);
    }

    #[test]
    fn cell_rejects_bad_shapes() {
        let cell = ConvLstmCell::<f64>::zeros(2, 3, 3);
        let h = Tensor::zeros(&[3, 4, 5]);
        assert!(convlstm_step(&cell, &Tensor::zeros(&[1, 4, 5]), &h, &h).is_err());
        assert!(convlstm_step(&cell, &Tensor::zeros(&[2, 4, 5]), &Tensor::zeros(&[3, 4, 4]), &h).is_err());
    }

    #[test]
    fn forward_shape_and_zero_weights() {
        let spec = NetworkSpec::prednet_desk(4);
        let mut w = build_prednet::<f64>(&spec, 5).unwrap();
        let x = Tensor::full(&[3, 8, 6, 7], 0.3);
        let out = forward_net(&w, &spec, &x, BatchNormMode::Infer).unwrap();
        assert_eq!(out.output.shape(), &[3, 2, 6, 7]);
        assert!(out.batch_stats.is_empty());

        w.fill_zero();
        for mode in [BatchNormMode::Infer, BatchNormMode::Train] {
            let out = forward_net(&w, &spec, &x, mode).unwrap();
            assert!(out.output.data().iter().all(|&v| v == 0.0), "{mode:?}");
        }
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let spec = NetworkSpec::danet_desk(2);
        let w = build_danet::<f64>(&spec, 0).unwrap();
        let err = forward_net(&w, &spec, &Tensor::zeros(&[1, 3, 4, 4]), BatchNormMode::Infer).unwrap_err();
        assert!(matches!(err, NetError::ChannelMismatch { expected: 2, actual: 3 }));
    }

    #[test]
    fn sequence_state_matters() {
        let spec = NetworkSpec::danet_desk(3);
        let w = build_danet::<f64>(&spec, 11).unwrap();
        let frame: Vec<f64> = (0..2 * 5 * 5).map(|i| ((i * 13 % 7) as f64) / 7.0 - 0.4).collect();
        let earlier: Vec<f64> = frame.iter().map(|v| 1.0 - 2.0 * v).collect();
        let one = Tensor::from_vec(&[1, 2, 5, 5], frame.clone()).unwrap();
        let two = Tensor::from_vec(&[2, 2, 5, 5], [earlier, frame].concat()).unwrap();
        let a = forward_net(&w, &spec, &one, BatchNormMode::Infer).unwrap().output;
        let b = forward_net(&w, &spec, &two, BatchNormMode::Infer).unwrap().output;
        let last = &b.data()[b.len() / 2..];
        let diff: f64 = a.data().iter().zip(last).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn train_mode_stats_update_moving_averages() {
        let spec = NetworkSpec::danet_desk(2);
        let mut w = build_danet::<f64>(&spec, 2).unwrap();
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|i| i as f64 / 32.0).collect()).unwrap();
        let out = forward_net(&w, &spec, &x, BatchNormMode::Train).unwrap();
        assert_eq!(out.batch_stats.len(), 2);
        let before = w.get("bn1.moving_mean").unwrap().clone();
        apply_batch_stats(&mut w, &spec, &out.batch_stats).unwrap();
        let after = w.get("bn1.moving_mean").unwrap();
        for ((b, a), m) in before.data().iter().zip(after.data()).zip(&out.batch_stats[0].mean) {
            assert!((a - (0.99 * b + 0.01 * m)).abs() < 1e-15);
        }
    }

    #[test]
    fn check_weights_detects_mismatch() {
        let spec = NetworkSpec::danet_desk(2);
        let w = build_danet::<f32>(&spec, 0).unwrap();
        assert!(check_weights(&spec, &w).is_ok());
        assert!(check_weights(&NetworkSpec::danet_desk(3), &w).is_err());
    }
}
