//! Regularized minibatch training and mask-respecting fine-tuning.
//!
//! The objective is binary cross-entropy plus three optional penalties: an L1
//! term on the weights, the log-barrier connectivity term, and an L2 term.
//! Optimization is Adam with an optional linear warmup followed by cosine
//! annealing to zero. Every source of randomness is a seeded ChaCha8 stream,
//! so a fixed (seed, config) pair reproduces a run bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{normalize, phi_total, Mode};
use crate::data::{ToyDataset, GAUSSIAN_NAME, RNG_NAME};
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::network::LayeredNetwork;
use crate::objective::build_objective;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Penalty coefficients of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// L1 coefficient on all weights.
    pub l1: f64,
    /// Coefficient of the -log(connectivity) barrier.
    pub connect: f64,
    /// L2 (weight decay) coefficient.
    pub l2: f64,
}

impl RegularizerConfig {
    pub fn none() -> Self {
        RegularizerConfig {
            l1: 0.0,
            connect: 0.0,
            l2: 0.0,
        }
    }

    /// Post-pruning default: sparsity is already enforced by the mask, so the
    /// sparsity-inducing terms are switched off and weight decay is kept.
    pub fn for_finetune(&self) -> Self {
        RegularizerConfig {
            l1: 0.0,
            connect: 0.0,
            l2: self.l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l1 < 0.0 || self.connect < 0.0 || self.l2 < 0.0 {
            return Err(Error::Config(
                "regularizer coefficients must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup parameters; the factor scales the base learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub epochs: usize,
    pub start_factor: f64,
    pub end_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optional linear warmup before the cosine phase.
    pub warmup: Option<Warmup>,
    /// Epochs over which the connectivity coefficient ramps linearly from 0
    /// to its configured value; 0 applies it at full strength from epoch 0.
    /// The barrier is sign-blind, so giving the task loss a head start keeps
    /// the connectivity mass on paths that actually carry signal.
    pub connect_warmup_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            warmup: None,
            connect_warmup_epochs: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Closed-form learning rate at a 0-based epoch:
///
/// - warmup phase (e < w): lr0 * (start + (end - start) * e / w)
/// - cosine phase: lr0 * end * (1 + cos(pi * (e - w) / (epochs - w))) / 2
///
/// Without warmup this is plain cosine annealing from lr0 to 0.
pub fn learning_rate_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let lr0 = cfg.learning_rate;
    let (w, end_factor) = match cfg.warmup {
        Some(warm) if warm.epochs > 0 => {
            if epoch < warm.epochs {
                let t = epoch as f64 / warm.epochs as f64;
                return lr0 * (warm.start_factor + (warm.end_factor - warm.start_factor) * t);
            }
            (warm.epochs, warm.end_factor)
        }
        _ => (0, 1.0),
    };
    let span = (cfg.epochs - w) as f64;
    let tau = (epoch - w) as f64;
    lr0 * end_factor * 0.5 * (1.0 + (std::f64::consts::PI * tau / span).cos())
}

/// Adam with bias correction over a flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(tensor_lens: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update: params[i] -= lr * m_hat / (sqrt(v_hat) + epsilon).
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One per-epoch measurement record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub phi_tot: f64,
    pub per_layer_l1: Vec<f64>,
    pub collapse: bool,
}

/// Full run telemetry; the header names the RNG and Gaussian transform so a
/// record stream is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub rng: String,
    pub gaussian: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_test_acc: f64,
    pub post_prune_acc: Option<f64>,
    pub post_finetune_acc: Option<f64>,
}

impl RunMetrics {
    /// One JSON record per line: a header line, then one line per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let header = serde_json::json!({
            "schema": format!("metrics/v{}", self.schema_version),
            "rng": self.rng,
            "gaussian": self.gaussian,
            "seed": self.seed,
            "fields": ["epoch", "lr", "train_loss", "test_loss", "test_acc", "phi_tot", "collapse"],
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable record"));
            out.push('\n');
        }
        out
    }
}

/// Mean BCE and 0.5-threshold accuracy of predicted probabilities.
pub fn evaluate(net: &LayeredNetwork, x: &Mat, y: &[f64]) -> Result<(f64, f64)> {
    let probs = net.predict(x)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let floor = |x: f64| if x < 1e-100 { 1e-100 } else { x };
    for (i, &target) in y.iter().enumerate() {
        let p = probs.get(i, 0);
        loss -= target * floor(p).ln() + (1.0 - target) * floor(1.0 - p).ln();
        let pred = if p > 0.5 { 1.0 } else { 0.0 };
        if pred == target {
            correct += 1;
        }
    }
    Ok((loss / y.len() as f64, correct as f64 / y.len() as f64))
}

/// Minibatch Adam on the combined objective. Deterministic for a fixed
/// (seed, config); the epoch shuffle order comes from per-epoch ChaCha
/// streams. If the network carries a mask, masked parameters stay at zero
/// through every step.
pub fn train(
    net: &LayeredNetwork,
    data: &ToyDataset,
    reg: &RegularizerConfig,
    cfg: &TrainConfig,
) -> Result<(LayeredNetwork, RunMetrics)> {
    reg.validate()?;
    cfg.validate()?;
    train_loop(net.clone(), data, reg, cfg)
}

/// Fine-tune a pruned network: the sparsity terms default off (see
/// [`RegularizerConfig::for_finetune`]) and masked entries stay pinned at 0.
pub fn fine_tune(
    net: &LayeredNetwork,
    data: &ToyDataset,
    reg: &RegularizerConfig,
    cfg: &TrainConfig,
) -> Result<(LayeredNetwork, RunMetrics)> {
    if net.mask().is_none() {
        return Err(Error::MissingMask);
    }
    train(net, data, reg, cfg)
}

fn train_loop(
    mut net: LayeredNetwork,
    data: &ToyDataset,
    reg: &RegularizerConfig,
    cfg: &TrainConfig,
) -> Result<(LayeredNetwork, RunMetrics)> {
    let n = data.train_len();
    let features = net.sizes()[0];
    if data.train_x.cols() != features {
        return Err(Error::InputWidth {
            expected: features,
            actual: data.train_x.cols(),
        });
    }
    let tensor_lens: Vec<usize> = net
        .weights()
        .iter()
        .map(|w| w.rows() * w.cols())
        .chain(net.biases().iter().map(|b| b.len()))
        .chain(net.scalings().iter().map(|s| s.factors.len()))
        .collect();
    let mut adam = Adam::new(&tensor_lens);
    let mut records = Vec::with_capacity(cfg.epochs);

    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let lr = learning_rate_at(cfg, epoch);
        let connect = if cfg.connect_warmup_epochs > 0 {
            reg.connect * (epoch.min(cfg.connect_warmup_epochs) as f64)
                / cfg.connect_warmup_epochs as f64
        } else {
            reg.connect
        };
        shuffle_epoch(&mut indices, cfg.seed, epoch);

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in indices.chunks(cfg.batch_size).enumerate() {
            let m = batch.len();
            let mut x = Mat::zeros(features, m);
            let mut y = Vec::with_capacity(m);
            for (j, &i) in batch.iter().enumerate() {
                for f in 0..features {
                    x.set(f, j, data.train_x.get(i, f));
                }
                y.push(data.train_y[i]);
            }
            let mut obj = build_objective(&net, x, &y, reg.l1, connect, reg.l2);
            let total = obj.tape.forward()?;
            if !total.is_finite() {
                return Err(Error::NumericObjective {
                    epoch,
                    batch: batch_idx,
                });
            }
            obj.tape.backward()?;
            let batch_loss = obj.tape.value(obj.loss).expect("forwarded").scalar_value();
            loss_sum += batch_loss * m as f64;

            // gather gradients in tensor order, zeroing masked positions
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(tensor_lens.len());
            for (k, &wid) in obj.params.weights.iter().enumerate() {
                let mut g = obj.tape.grad(wid).expect("param grad").data().to_vec();
                if let Some(mask) = net.mask() {
                    for (gi, &keep) in g.iter_mut().zip(&mask.weights[k]) {
                        if !keep {
                            *gi = 0.0;
                        }
                    }
                }
                grads.push(g);
            }
            for &bid in &obj.params.biases {
                grads.push(obj.tape.grad(bid).expect("param grad").data().to_vec());
            }
            for (idx, &(_, sid)) in obj.params.scalings.iter().enumerate() {
                let mut g = obj.tape.grad(sid).expect("param grad").data().to_vec();
                if let Some(mask) = net.mask() {
                    for (gi, &keep) in g.iter_mut().zip(&mask.scalings[idx]) {
                        if !keep {
                            *gi = 0.0;
                        }
                    }
                }
                grads.push(g);
            }

            let pm = net.params_mut();
            let mut param_slices: Vec<&mut [f64]> = Vec::with_capacity(tensor_lens.len());
            for w in pm.weights.iter_mut() {
                param_slices.push(w.data_mut());
            }
            for b in pm.biases.iter_mut() {
                param_slices.push(b.as_mut_slice());
            }
            for s in pm.scalings.iter_mut() {
                param_slices.push(s.factors.as_mut_slice());
            }
            let grad_slices: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(lr, &mut param_slices, &grad_slices);
            net.enforce_mask();
        }

        let (test_loss, test_acc) = evaluate(&net, &data.test_x, &data.test_y)?;
        let view = normalize(&net, Mode::Normalized);
        let phi = phi_total(&view);
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            test_loss,
            test_acc,
            phi_tot: phi,
            per_layer_l1: net.weights().iter().map(|w| w.l1_norm()).collect(),
            collapse: phi == 0.0,
        });
    }

    let final_test_acc = records.last().map(|r| r.test_acc).unwrap_or(0.0);
    let metrics = RunMetrics {
        schema_version: METRICS_SCHEMA_VERSION,
        rng: RNG_NAME.into(),
        gaussian: GAUSSIAN_NAME.into(),
        seed: cfg.seed,
        epochs: records,
        final_test_acc,
        post_prune_acc: None,
        post_finetune_acc: None,
    };
    Ok((net, metrics))
}

/// Fisher-Yates over a per-epoch ChaCha stream: same key as the run seed,
/// stream id epoch + 1.
fn shuffle_epoch(indices: &mut [usize], seed: u64, epoch: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}
