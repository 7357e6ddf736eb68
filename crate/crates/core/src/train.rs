//! SGD training with full backpropagation for the straight-line networks.
//!
//! Gradients come from standard cross-entropy backprop: softmax/cross-entropy
//! collapse to `p - onehot`, global average pooling spreads it uniformly,
//! conv layers produce weight gradients against their recorded inputs and
//! propagate through the transposed convolution, ReLU gates on the forward
//! activation sign, and max-pool routes through the recorded switches.
//!
//! Batches are processed in fixed-size chunks whose partial sums are reduced
//! in chunk order, so results are bitwise identical for any worker thread
//! count, not just for one.

use rayon::prelude::*;
use std::fmt;
use thiserror::Error;

use crate::io::Dataset;
use crate::net::{argmax_prediction, LayerSpec, NetError, Network, NetworkSpec};
use crate::tensor::{
    conv2d_transpose, gemm_nt, im2col, unpool, KernelBank, Tensor, TensorError,
};

/// Images per deterministic gradient chunk; fixed so the reduction order
/// never depends on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch has {images} images but {labels} labels")]
    BatchLengthMismatch { images: usize, labels: usize },
    #[error("label {label} of image {index} out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("non-finite loss: training diverged ({0})")]
    Diverged(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInit {
    #[default]
    HeNormal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weight_init: WeightInit,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 5,
            seed: 0,
            weight_init: WeightInit::HeNormal,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted: the resulting no-op step is well
    /// defined and useful as a baseline.
    pub fn validate(&self) -> Result<(), TrainError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fresh network for this config's initialization scheme.
pub fn initial_network(spec: NetworkSpec, config: &TrainConfig) -> Network {
    match config.weight_init {
        WeightInit::HeNormal => Network::he_init(spec, config.seed),
    }
}

/// Loss and training accuracy of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} loss {:.6} acc {:.4}",
            self.epoch, self.loss, self.accuracy
        )
    }
}

fn zero_like(params: &[KernelBank]) -> Vec<KernelBank> {
    params
        .iter()
        .map(|b| {
            let (kh, kw) = b.kernel_size();
            KernelBank::zeros(b.out_channels(), b.in_channels(), kh, kw)
        })
        .collect()
}

fn add_into(target: &mut [KernelBank], source: &[KernelBank]) {
    for (t, s) in target.iter_mut().zip(source) {
        for (a, &b) in t.weights_mut().iter_mut().zip(s.weights()) {
            *a += b;
        }
        for (a, &b) in t.bias_mut().iter_mut().zip(s.bias()) {
            *a += b;
        }
    }
}

/// Backprop one image, adding its gradient contributions into `grads`.
/// Returns (cross-entropy loss, prediction was correct).
fn accumulate_gradients(
    net: &Network,
    image: &Tensor,
    label: usize,
    grads: &mut [KernelBank],
) -> Result<(f64, bool), TrainError> {
    let trace = net.forward(image)?;
    let logits = trace.logits();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let probs = trace.probabilities();
    let correct = argmax_prediction(probs).0 == label;

    let chain = net.spec().shape_chain();
    let final_shape = *chain.last().expect("non-empty chain");
    let (num_classes, fh, fw) = final_shape;
    let plane = (fh * fw) as f64;
    let mut dact = Tensor::zeros(num_classes, fh, fw);
    for k in 0..num_classes {
        let d = (probs[k] - if k == label { 1.0 } else { 0.0 }) / plane;
        for v in &mut dact.data_mut()[k * fh * fw..(k + 1) * fh * fw] {
            *v = d;
        }
    }

    let layers: Vec<&LayerSpec> = net.spec().tensor_layers().collect();
    let mut bank_idx = net.params().len();
    let mut switch_idx = trace.switches().len();
    for (i, layer) in layers.iter().enumerate().rev() {
        let in_shape = chain[i];
        match **layer {
            LayerSpec::Conv { kh, kw, relu: gated, .. } => {
                bank_idx -= 1;
                let bank = &net.params()[bank_idx];
                let out_act = &trace.activations()[i];
                if gated {
                    for (d, &a) in dact.data_mut().iter_mut().zip(out_act.data()) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let input_act = if i == 0 { trace.input() } else { &trace.activations()[i - 1] };
                let (_, oh, ow) = out_act.shape();
                let cols = im2col(input_act, kh, kw, 1, kh / 2, oh, ow);
                let reduce = bank.in_channels() * kh * kw;
                gemm_nt(
                    bank.out_channels(),
                    oh * ow,
                    reduce,
                    dact.data(),
                    &cols,
                    1.0,
                    grads[bank_idx].weights_mut(),
                );
                for k in 0..bank.out_channels() {
                    grads[bank_idx].bias_mut()[k] += dact.channel(k).iter().sum::<f64>();
                }
                dact = conv2d_transpose(&dact, bank, 1, kh / 2, in_shape)?;
            }
            LayerSpec::MaxPool { .. } => {
                switch_idx -= 1;
                dact = unpool(&dact, &trace.switches()[switch_idx], in_shape)?;
            }
            LayerSpec::GlobalAvgPool | LayerSpec::Softmax => unreachable!(),
        }
    }
    Ok((loss, correct))
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<(), TrainError> {
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(TrainError::LabelOutOfRange {
            index,
            label,
            num_classes,
        });
    }
    Ok(())
}

/// Chunked deterministic sum of per-image losses, correct counts and raw
/// (unaveraged) gradients.
fn batch_gradients(
    net: &Network,
    images: &[&Tensor],
    labels: &[usize],
) -> Result<(f64, usize, Vec<KernelBank>), TrainError> {
    let ranges: Vec<(usize, usize)> = (0..images.len())
        .step_by(GRAD_CHUNK)
        .map(|start| (start, (start + GRAD_CHUNK).min(images.len())))
        .collect();
    let partials: Vec<Result<(f64, usize, Vec<KernelBank>), TrainError>> = ranges
        .par_iter()
        .map(|&(start, end)| {
            let mut grads = zero_like(net.params());
            let mut loss = 0.0;
            let mut correct = 0;
            for i in start..end {
                let (l, c) = accumulate_gradients(net, images[i], labels[i], &mut grads)?;
                loss += l;
                correct += c as usize;
            }
            Ok((loss, correct, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grads = zero_like(net.params());
    for partial in partials {
        let (l, c, g) = partial?;
        loss += l;
        correct += c;
        add_into(&mut grads, &g);
    }
    Ok((loss, correct, grads))
}

/// Mean cross-entropy loss and mean parameter gradients over one batch.
pub fn loss_and_gradients(
    net: &Network,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f64, Vec<KernelBank>), TrainError> {
    if images.len() != labels.len() {
        return Err(TrainError::BatchLengthMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    if images.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(labels, net.spec().num_classes())?;
    let refs: Vec<&Tensor> = images.iter().collect();
    let (loss_sum, _, mut grads) = batch_gradients(net, &refs, labels)?;
    let scale = 1.0 / images.len() as f64;
    for bank in &mut grads {
        for w in bank.weights_mut() {
            *w *= scale;
        }
        for b in bank.bias_mut() {
            *b *= scale;
        }
    }
    Ok((loss_sum * scale, grads))
}

/// SGD with momentum over shuffled mini-batches.
///
/// `progress` is invoked after every epoch with the current network and that
/// epoch's metrics; returning `false` stops training early. Identical
/// config and seed give bitwise identical results for any thread count.
pub fn train(
    mut net: Network,
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&Network, &EpochMetrics) -> bool,
) -> Result<(Network, Vec<EpochMetrics>), TrainError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(dataset.labels(), net.spec().num_classes())?;

    let n = dataset.len();
    let mut velocity = zero_like(net.params());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in indices.chunks(config.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| dataset.image(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.label(i)).collect();
            let (batch_loss, batch_correct, grads) = batch_gradients(&net, &images, &labels)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged(format!("epoch {epoch}")));
            }
            let scale = 1.0 / batch.len() as f64;
            for ((bank, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vw), &gw) in bank
                    .weights_mut()
                    .iter_mut()
                    .zip(v.weights_mut())
                    .zip(g.weights())
                {
                    *vw = config.momentum * *vw - config.learning_rate * gw * scale;
                    *w += *vw;
                }
                for ((b, vb), &gb) in bank.bias_mut().iter_mut().zip(v.bias_mut()).zip(g.bias()) {
                    *vb = config.momentum * *vb - config.learning_rate * gb * scale;
                    *b += *vb;
                }
            }
            loss_sum += batch_loss;
            correct += batch_correct;
        }
        let epoch_metrics = EpochMetrics {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        };
        let keep_going = progress(&net, &epoch_metrics);
        metrics.push(epoch_metrics);
        if !keep_going {
            break;
        }
    }
    Ok((net, metrics))
}

/// Fraction of dataset images whose predicted class matches the label.
pub fn evaluate_accuracy(net: &Network, dataset: &Dataset) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    check_labels(dataset.labels(), net.spec().num_classes())?;
    let correct: Result<usize, TrainError> = dataset
        .images()
        .par_iter()
        .zip(dataset.labels().par_iter())
        .map(|(image, &label)| Ok((net.predict(image)?.0 == label) as usize))
        .try_reduce(|| 0, |a, b| Ok(a + b));
    Ok(correct? as f64 / dataset.len() as f64)
}
