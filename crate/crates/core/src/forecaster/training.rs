//! Mini-batch Adam training loop shared by PredNet and DANet.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ForecastError, Result};
use crate::netblocks::{apply_batch_stats, build_network, forward_net, forward_graph, ModelWeights, NetworkSpec};
use crate::synthworld::stream_seed;
use crate::tensor::kernels::mse_loss;
use crate::tensor::{adam_step, AdamConfig, AdamState, BatchNormMode, Graph, NetworkWeights, Precision, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Samples drawn per epoch; 0 uses the whole training split.
    pub samples_per_epoch: usize,
    pub validation_fraction: f64,
    /// Evenly spaced validation samples scored per epoch; 0 scores all.
    pub validation_samples: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Training samples used to re-estimate batchnorm moving statistics for
    /// the returned weights; 0 keeps the running averages.
    pub bn_recalibration: usize,
    /// Seeds initialization and shuffling.
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 2e-3,
            lr_decay: 0.95,
            batch_size: 4,
            samples_per_epoch: 400,
            validation_fraction: 0.1,
            validation_samples: 48,
            patience: 8,
            bn_recalibration: 64,
            seed: 7,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForecastError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 0.5)");
        }
        Ok(())
    }
}

/// Normalized supervised samples, addressed by index.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn dims(&self) -> (usize, usize);
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// Writes the `[C_in, H, W]` input and `[C_out, H, W]` label of sample `idx`.
    fn fill(&self, idx: usize, input: &mut [f32], label: &mut [f32]) -> Result<()>;
}

/// Training and validation sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Split {
    /// Holds out the trailing `fraction` of `0..n`.
    pub fn trailing(n: usize, fraction: f64) -> Self {
        let held = ((n as f64) * fraction).floor() as usize;
        let held = held.min(n.saturating_sub(1));
        Self {
            train: (0..n - held).collect(),
            validation: (n - held..n).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Infer-mode loss on a fixed probe of training samples, before training.
    pub initial_loss: f64,
    /// The same probe scored with the returned weights.
    pub final_loss: f64,
    /// Train-mode (per-sample batchnorm) loss of the returned weights on the
    /// probe: the objective the optimizer minimizes.
    pub final_train_loss: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

fn evenly_spaced(idx: &[usize], count: usize) -> Vec<usize> {
    if count == 0 || count >= idx.len() {
        return idx.to_vec();
    }
    (0..count).map(|i| idx[i * idx.len() / count]).collect()
}

struct Buffers<T> {
    input: Vec<f32>,
    label: Vec<f32>,
    x_shape: [usize; 3],
    y_shape: [usize; 4],
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Buffers<T> {
    fn new(source: &dyn SampleSource) -> Self {
        let (h, w) = source.dims();
        Self {
            input: vec![0.0; source.in_channels() * h * w],
            label: vec![0.0; source.out_channels() * h * w],
            x_shape: [source.in_channels(), h, w],
            y_shape: [1, source.out_channels(), h, w],
            _marker: Default::default(),
        }
    }

    fn load(&mut self, source: &dyn SampleSource, idx: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        source.fill(idx, &mut self.input, &mut self.label)?;
        let cast = |v: &[f32]| v.iter().map(|&x| T::of(x as f64)).collect::<Vec<T>>();
        Ok((
            Tensor::from_vec(&self.x_shape, cast(&self.input))?,
            Tensor::from_vec(&self.y_shape, cast(&self.label))?,
        ))
    }
}

/// Mean loss over `idx`; train mode reports batch statistics but never
/// touches the moving averages.
fn evaluate_mode<T: Real>(
    weights: &NetworkWeights<T>,
    spec: &NetworkSpec,
    source: &dyn SampleSource,
    idx: &[usize],
    buf: &mut Buffers<T>,
    mode: BatchNormMode,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let (x, y) = buf.load(source, i)?;
        let shape = x.shape().to_vec();
        let x = x.reshape(&[1, shape[0], shape[1], shape[2]])?;
        let out = forward_net(weights, spec, &x, mode)?;
        total += mse_loss(&out.output, &y)?.0.as_f64();
    }
    Ok(total / idx.len().max(1) as f64)
}

fn evaluate<T: Real>(
    weights: &NetworkWeights<T>,
    spec: &NetworkSpec,
    source: &dyn SampleSource,
    idx: &[usize],
    buf: &mut Buffers<T>,
) -> Result<f64> {
    evaluate_mode(weights, spec, source, idx, buf, BatchNormMode::Infer)
}

/// Replaces each batchnorm's moving mean and variance by the average
/// train-mode batch statistics over `idx`.
fn recalibrate_batchnorm<T: Real>(
    weights: &mut NetworkWeights<T>,
    spec: &NetworkSpec,
    source: &dyn SampleSource,
    idx: &[usize],
    buf: &mut Buffers<T>,
) -> Result<()> {
    let mut sums: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for &i in idx {
        let (x, _) = buf.load(source, i)?;
        let shape = x.shape().to_vec();
        let x = x.reshape(&[1, shape[0], shape[1], shape[2]])?;
        let out = forward_net(weights, spec, &x, BatchNormMode::Train)?;
        for (slot, s) in out.batch_stats.iter().enumerate() {
            if sums.len() <= slot {
                sums.push((s.layer, vec![0.0; s.mean.len()], vec![0.0; s.var.len()]));
            }
            let (_, m, v) = &mut sums[slot];
            m.iter_mut().zip(&s.mean).for_each(|(a, b)| *a += b.as_f64());
            v.iter_mut().zip(&s.var).for_each(|(a, b)| *a += b.as_f64());
        }
    }
    let n = idx.len().max(1) as f64;
    for (layer, m, v) in sums {
        let mm = weights.get_mut(&format!("bn{layer}.moving_mean"))?;
        mm.data_mut().iter_mut().zip(&m).for_each(|(d, s)| *d = T::of(s / n));
        let mv = weights.get_mut(&format!("bn{layer}.moving_var"))?;
        mv.data_mut().iter_mut().zip(&v).for_each(|(d, s)| *d = T::of(s / n));
    }
    Ok(())
}

/// Trains a freshly initialized network on `source`, returning the weights
/// with the lowest validation loss, or the final weights when the split has
/// no validation samples.
pub fn train_network<T: Real>(
    spec: &NetworkSpec,
    source: &dyn SampleSource,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(NetworkWeights<T>, TrainLog)> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(ForecastError::EmptyTrainingSet);
    }
    if source.in_channels() != spec.in_channels || source.out_channels() != spec.out_channels {
        return Err(ForecastError::InvalidConfig(format!(
            "samples have {}→{} channels, network expects {}→{}",
            source.in_channels(),
            source.out_channels(),
            spec.in_channels,
            spec.out_channels
        )));
    }
    let mut weights = build_network::<T>(spec, cfg.seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &weights,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1));
    let mut buf = Buffers::<T>::new(source);

    let probe = evenly_spaced(&split.train, cfg.validation_samples.max(1));
    let monitor = if split.validation.is_empty() {
        probe.clone()
    } else {
        evenly_spaced(&split.validation, cfg.validation_samples)
    };

    let mut log = TrainLog {
        initial_loss: evaluate(&weights, spec, source, &probe, &mut buf)?,
        ..TrainLog::default()
    };
    let mut best = (f64::INFINITY, weights.clone());
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        if cfg.samples_per_epoch > 0 {
            order.truncate(cfg.samples_per_epoch);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &idx in batch {
                let (x, y) = buf.load(source, idx)?;
                let mut g = Graph::new();
                let xv = g.leaf(x);
                let fwd = forward_graph(&mut g, &weights, spec, &[xv], BatchNormMode::Train)?;
                let loss = g.mse(fwd.output, &y)?;
                let lv = g.value(loss).data()[0].as_f64();
                if !lv.is_finite() {
                    return Err(ForecastError::NanLoss {
                        epoch,
                        sample: idx,
                        loss: lv,
                    });
                }
                epoch_loss += lv;
                let grads = g.backward(loss)?;
                grads.accumulate_into(&mut weights)?;
                apply_batch_stats(&mut weights, spec, &fwd.batch_stats)?;
            }
            weights.scale_grads(T::of(1.0 / batch.len() as f64));
            adam_step(&mut weights, &mut adam)?;
        }
        adam.config.learning_rate *= cfg.lr_decay;

        let val_loss = evaluate(&weights, spec, source, &monitor, &mut buf)?;
        if !val_loss.is_finite() {
            return Err(ForecastError::NanLoss {
                epoch,
                sample: monitor[0],
                loss: val_loss,
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, weights.clone());
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    let mut weights = if split.validation.is_empty() {
        log.best_epoch = log.epochs.len();
        weights
    } else {
        best.1
    };
    if cfg.bn_recalibration > 0 {
        let idx = evenly_spaced(&split.train, cfg.bn_recalibration);
        recalibrate_batchnorm(&mut weights, spec, source, &idx, &mut buf)?;
    }
    log.final_loss = evaluate(&weights, spec, source, &probe, &mut buf)?;
    log.final_train_loss = evaluate_mode(&weights, spec, source, &probe, &mut buf, BatchNormMode::Train)?;
    Ok((weights, log))
}

/// [`train_network`] at the precision named in `cfg`.
pub fn train_model(
    spec: &NetworkSpec,
    source: &dyn SampleSource,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<(ModelWeights, TrainLog)> {
    Ok(match cfg.precision {
        Precision::F32 => {
            let (w, log) = train_network::<f32>(spec, source, split, cfg)?;
            (ModelWeights::F32(w), log)
        }
        Precision::F64 => {
            let (w, log) = train_network::<f64>(spec, source, split, cfg)?;
            (ModelWeights::F64(w), log)
        }
    })
}
