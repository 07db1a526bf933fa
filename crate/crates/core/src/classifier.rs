//! The two-block CNN classifier, its training loop and evaluation.

use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Graph, Mode};
use crate::dataset::Example;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerSpec, Model};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub input_size: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub kernel: usize,
    pub pad: usize,
    pub pool: usize,
    pub fc_units: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Coupled L2 penalty folded into the Adam gradient.
    pub weight_decay: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 192,
            conv1_out: 16,
            conv2_out: 32,
            kernel: 3,
            pad: 1,
            pool: 2,
            fc_units: 128,
            dropout_p: 0.5,
            num_classes: 2,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.01,
        }
    }
}

/// Layer index of the second convolution's ReLU output, the deepest
/// convolutional feature map and the default Grad-CAM target.
pub const LAST_CONV_ACTIVATION: usize = 4;

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.pool == 0 || self.input_size == 0 || self.input_size % (self.pool * self.pool) != 0 {
            return bad(format!(
                "input_size {} must be divisible by pool² = {}",
                self.input_size,
                self.pool * self.pool
            ));
        }
        if self.kernel == 0 || self.kernel > self.input_size + 2 * self.pad {
            return bad(format!("kernel {} incompatible with input", self.kernel));
        }
        if 2 * self.pad + 1 != self.kernel {
            return bad(format!(
                "kernel {} with pad {} does not preserve size",
                self.kernel, self.pad
            ));
        }
        if self.batch_size == 0 || self.conv1_out == 0 || self.conv2_out == 0 || self.fc_units == 0 {
            return bad("zero-sized layer or batch".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} not in [0,1)", self.dropout_p));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    /// Width of the flattened feature vector after both pooling stages.
    pub fn flatten_dim(&self) -> usize {
        let side = self.input_size / (self.pool * self.pool);
        self.conv2_out * side * side
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        Ok(vec![
            LayerSpec::Conv2d {
                in_ch: 3,
                out_ch: self.conv1_out,
                kernel: self.kernel,
                stride: 1,
                pad: self.pad,
            },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::MaxPool2d {
                kernel: self.pool,
                stride: self.pool,
            },
            LayerSpec::Conv2d {
                in_ch: self.conv1_out,
                out_ch: self.conv2_out,
                kernel: self.kernel,
                stride: 1,
                pad: self.pad,
            },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::MaxPool2d {
                kernel: self.pool,
                stride: self.pool,
            },
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: self.flatten_dim(),
                out_features: self.fc_units,
            },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Dropout { p: self.dropout_p },
            LayerSpec::Linear {
                in_features: self.fc_units,
                out_features: self.num_classes,
            },
        ])
    }
}

/// Kaiming-uniform initialised classifier.
pub fn build_classifier<T: Scalar>(cfg: &ClassifierConfig, rng: &mut Rng) -> Result<Model<T>> {
    let mut model = Model::new(cfg.layer_specs()?)?;
    model.init(Init::KaimingUniform, rng);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_val_accuracy: Vec<f64>,
    pub initial_val_accuracy: f64,
    pub final_val_accuracy: f64,
    pub best_val_accuracy: f64,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Self {
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let total = truth.len();
        let correct: u64 = (0..num_classes).map(|k| confusion[k][k]).sum();
        let accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        Self {
            accuracy,
            confusion,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn stack_inputs(examples: &[&Example]) -> Result<Tensor<f32>> {
    let parts: Vec<&Tensor<f32>> = examples.iter().map(|e| &e.input).collect();
    Tensor::stack(&parts)
}

const EVAL_BATCH: usize = 64;

/// Predicted labels (argmax of the logits) in the model's current mode,
/// plus the logit width.
fn predict_labels(model: &mut Model<f32>, examples: &[Example]) -> Result<(Vec<usize>, usize)> {
    let mut rng = Rng::new(0);
    let mut pred = Vec::with_capacity(examples.len());
    let mut width = 0;
    for chunk in examples.chunks(EVAL_BATCH) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let logits = model.predict(stack_inputs(&refs)?, &mut rng)?;
        width = logits.dims2()?.1;
        pred.extend(logits.data().chunks(width).map(argmax));
    }
    Ok((pred, width))
}

/// Accuracy and confusion matrix in eval mode. The model's previous mode
/// is restored afterwards.
pub fn evaluate(model: &mut Model<f32>, examples: &[Example]) -> Result<Metrics> {
    let prev = model.mode();
    model.eval();
    let result = predict_labels(model, examples);
    if prev == Mode::Train {
        model.train();
    }
    let (pred, width) = result?;
    let k = width.max(1);
    let truth: Vec<usize> = examples.iter().map(|e| e.label).collect();
    if let Some(&bad) = truth.iter().find(|&&t| t >= k) {
        return Err(Error::Index {
            what: "classifier outputs",
            index: bad,
            size: k,
        });
    }
    Ok(Metrics::from_predictions(&truth, &pred, k))
}

/// Mini-batch training for `cfg.epochs` passes, reshuffling every epoch.
/// Validation accuracy is measured before training and after each epoch.
pub fn train_classifier(
    model: &mut Model<f32>,
    train: &[Example],
    val: &[Example],
    cfg: &ClassifierConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("empty training set".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut opt = Adam::<f32>::new(cfg.adam())?;
    let initial = evaluate(model, val)?.accuracy;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut epoch_val = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        model.train();
        rng.shuffle(&mut order);
        let mut total = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = refs.iter().map(|e| e.label).collect();
            let mut g = Graph::new();
            let x = g.constant(stack_inputs(&refs)?);
            let fwd = model.forward(&mut g, x, rng)?;
            let loss = g
                .softmax_cross_entropy(fwd.output, &targets)
                .map_err(|e| e.context(format!("epoch {epoch} step {step}")))?;
            let lv = g.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("training loss at step {step}")));
            }
            total += lv * batch.len() as f64;
            g.backward(loss)?;
            let grads = model.collect_grads(&g, &fwd.params);
            opt.step(model.params_mut(), &grads)?;
            step += 1;
        }
        let mean = total / train.len() as f64;
        let acc = evaluate(model, val)?.accuracy;
        debug!("epoch {epoch}: loss {mean:.5} val_acc {acc:.4}");
        epoch_loss.push(mean);
        epoch_val.push(acc);
    }
    model.eval();
    let final_acc = epoch_val.last().copied().unwrap_or(initial);
    let best = epoch_val.iter().copied().fold(initial, f64::max);
    Ok(TrainReport {
        epoch_loss,
        epoch_val_accuracy: epoch_val,
        initial_val_accuracy: initial,
        final_val_accuracy: final_acc,
        best_val_accuracy: best,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
