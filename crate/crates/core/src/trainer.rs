//! Synthetic three-class texture data and a small training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamId, Tensor};

pub const SYNTH_SIDE: usize = 64;
pub const STRIPE_PERIOD: usize = 8;
pub const NUM_SYNTH_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; 3] = ["horizontal", "vertical", "checkerboard"];

/// Labelled `[3, 64, 64]` images: horizontal stripes, vertical stripes and a
/// checkerboard, each at ±1 with a random phase, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn pattern(label: usize, y: usize, x: usize) -> f32 {
    let half = STRIPE_PERIOD / 2;
    let on = match label {
        0 => (y / half).is_multiple_of(2),
        1 => (x / half).is_multiple_of(2),
        _ => (y / half + x / half).is_multiple_of(2),
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

pub fn make_synth(n: usize, noise_sigma: f64, seed: u64) -> Result<SynthDataset> {
    if n < NUM_SYNTH_CLASSES {
        return Err(Error::Input(format!("need at least {NUM_SYNTH_CLASSES} samples, got {n}")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Input(format!("noise sigma must be finite and non-negative, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_SYNTH_CLASSES).collect();
    labels.shuffle(&mut rng);
    let s = SYNTH_SIDE;
    let images = labels
        .iter()
        .map(|&label| {
            let (dy, dx) = (rng.gen_range(0..STRIPE_PERIOD), rng.gen_range(0..STRIPE_PERIOD));
            let mut data = Vec::with_capacity(3 * s * s);
            for _ in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let v = pattern(label, y + dy, x + dx);
                        let eps = if noise_sigma > 0.0 { noise.sample(&mut rng) as f32 } else { 0.0 };
                        data.push(v + eps);
                    }
                }
            }
            Tensor::from_vec(&[3, s, s], data).expect("fixed shape")
        })
        .collect();
    Ok(SynthDataset {
        images,
        labels,
        noise_sigma,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum,
    AdamwLite,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(Optimizer::SgdMomentum),
            "adamw-lite" | "adamw" => Ok(Optimizer::AdamwLite),
            other => Err(Error::Config(format!("unknown optimizer {other:?}; use sgd-momentum or adamw-lite"))),
        }
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub seed: u64,
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 120,
            batch_size: 16,
            lr: 1e-4,
            optimizer: Optimizer::AdamwLite,
            weight_decay: 0.01,
            seed: 0,
            label_smoothing: 0.0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate and zero steps are accepted and leave the model as is.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be finite and non-negative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing must be in [0, 1), got {}", self.label_smoothing)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
}

pub fn smoothed_target(label: usize, classes: usize, smoothing: f64) -> Vec<f32> {
    let off = smoothing / classes as f64;
    (0..classes)
        .map(|c| (if c == label { 1.0 - smoothing + off } else { off }) as f32)
        .collect()
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Per-parameter optimiser state.
struct OptState {
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    t: i32,
}

impl OptState {
    fn new(model: &Model<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = model.store().iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            second: zeros.clone(),
            first: zeros,
            t: 0,
        }
    }

    fn apply(&mut self, model: &mut Model<f32>, grads: &[(ParamId, Tensor<f32>)], cfg: &TrainConfig) {
        self.t += 1;
        let lr = cfg.lr as f32;
        let wd = cfg.weight_decay as f32;
        let (b1, b2) = (ADAM_BETAS.0 as f32, ADAM_BETAS.1 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let meta = model.meta_tokens_id();
        let store = model.store_mut();
        for (id, g) in grads {
            let p = store.get_mut(*id);
            // Decay matrices and kernels only; biases, gains and meta tokens are exempt.
            let decay = if p.ndim() >= 2 && *id != meta { wd } else { 0.0 };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            match cfg.optimizer {
                Optimizer::SgdMomentum => {
                    for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mi = SGD_MOMENTUM as f32 * *mi + gi + decay * *w;
                        *w -= lr * *mi;
                    }
                }
                Optimizer::AdamwLite => {
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        let step = (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS as f32);
                        *w -= lr * (step + decay * *w);
                    }
                }
            }
        }
    }
}

/// Trains in place and returns one history row per step (batch-mean loss and
/// batch accuracy).
pub fn train_toy(model: &mut Model<f32>, ds: &SynthDataset, cfg: &TrainConfig) -> Result<Vec<HistoryRow>> {
    train_toy_with(model, ds, cfg, |_| {})
}

/// As [`train_toy`], calling `on_step` after every step.
pub fn train_toy_with(
    model: &mut Model<f32>,
    ds: &SynthDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&HistoryRow),
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    let classes = model.spec().num_classes;
    if let Some(&bad) = ds.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for a {classes}-class head")));
    }
    if ds.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut state = OptState::new(model);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: Vec<Option<(ParamId, Tensor<f32>)>> = vec![None; model.store().len()];
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..ds.len()).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            let target = smoothed_target(ds.labels[i], classes, cfg.label_smoothing);
            let bp = model.loss_and_grads(&ds.images[i], &target)?;
            let loss = bp.loss as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss });
            }
            loss_sum += loss;
            correct += usize::from(argmax(bp.logits.data()) == ds.labels[i]);
            for (id, g) in bp.grads {
                match &mut grads[id.index()] {
                    Some((_, acc)) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some((id, g)),
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f32;
        let mean: Vec<(ParamId, Tensor<f32>)> = grads
            .into_iter()
            .flatten()
            .map(|(id, t)| (id, t.map(|v| v * inv)))
            .collect();
        state.apply(model, &mean, cfg);
        let row = HistoryRow {
            step,
            loss: loss_sum / cfg.batch_size as f64,
            acc: correct as f64 / cfg.batch_size as f64,
        };
        on_step(&row);
        history.push(row);
    }
    Ok(history)
}

/// Anything that maps an image to class logits.
pub trait Classify {
    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Classify for Model<f32> {
    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_classify(image)
    }
}

/// Argmax accuracy over the whole dataset.
pub fn evaluate(model: &impl Classify, ds: &SynthDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut correct = 0;
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        correct += usize::from(argmax(model.logits(img)?.data()) == label);
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::io::csv_err)?;
    if history.is_empty() {
        w.write_record(["step", "loss", "acc"]).map_err(crate::io::csv_err)?;
    }
    for row in history {
        w.serialize(row).map_err(crate::io::csv_err)?;
    }
    w.flush()?;
    Ok(())
}
