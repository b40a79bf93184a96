//! Deterministic training loop: Adam optimizer, seeded shuffles, per-epoch
//! trace recording. No early stopping; the loop runs for the configured
//! number of epochs.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::objective::{Batch, LossTerms, RegularizerConfig};
use crate::seeding::rng_for_index;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regularizer: RegularizerConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Multiplicative learning-rate decay applied once per epoch; 1.0 = off.
    #[serde(default = "default_lr_decay")]
    pub lr_decay_per_epoch: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.001
}
fn default_batch_size() -> usize {
    150
}
fn default_epochs() -> usize {
    TrainConfig::DEFAULT_EPOCHS
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_lr_decay() -> f64 {
    1.0
}

impl TrainConfig {
    pub const DEFAULT_EPOCHS: usize = 60;

    pub fn new(regularizer: RegularizerConfig, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            regularizer,
            learning_rate: default_lr(),
            batch_size: default_batch_size(),
            epochs,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            lr_decay_per_epoch: default_lr_decay(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.regularizer.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam epsilon must be positive".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config(
                "lr_decay_per_epoch must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_vqa: f64,
    pub l_qa: f64,
    pub l_h: f64,
    pub h_qonly: f64,
    pub h_vqa: f64,
    pub train_accuracy: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
}

impl TrainTrace {
    /// One row per epoch, tab-separated, with a header line.
    pub fn to_table(&self) -> String {
        let mut out = String::from(
            "epoch\tl_vqa\tl_qa\tl_h\th_qonly\th_vqa\ttrain_accuracy\twall_ms\n",
        );
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.l_vqa, e.l_qa, e.l_h, e.h_qonly, e.h_vqa, e.train_accuracy, e.wall_ms
            ));
        }
        out
    }
}

/// Shared Adam state covering every parameter tensor of a bundle.
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(bundle: &ModelBundle, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: bundle
                .params()
                .iter()
                .map(|p| Tensor::zeros_like(&p.value))
                .collect(),
            v: bundle
                .params()
                .iter()
                .map(|p| Tensor::zeros_like(&p.value))
                .collect(),
        }
    }

    pub fn for_config(bundle: &ModelBundle, config: &TrainConfig) -> Self {
        AdamState::new(bundle, config.beta1, config.beta2, config.epsilon)
    }

    /// Standard Adam update with bias correction over all partitions.
    pub fn step(&mut self, bundle: &mut ModelBundle, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != bundle.params().len() {
            return Err(Error::Contract(format!(
                "adam state covers {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                bundle.params().len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != bundle.params()[i].value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: g.shape().to_vec(),
                    right: bundle.params()[i].value.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].values_mut();
            let v = self.v[i].values_mut();
            let p = bundle.params_mut()[i].value.values_mut();
            for j in 0..g.len() {
                let gj = g.values()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Runs the configured number of epochs of seeded-shuffle minibatch steps.
/// The last incomplete batch is kept. Aborts on the first non-finite loss.
pub fn train(bundle: &mut ModelBundle, data: &Batch, config: &TrainConfig) -> Result<TrainTrace> {
    config.validate()?;
    if data.is_empty() && config.epochs > 0 {
        return Err(Error::Contract("train requires a nonempty dataset".into()));
    }
    let mut opt = AdamState::for_config(bundle, config);
    let mut trace = TrainTrace {
        config: config.clone(),
        epochs: Vec::with_capacity(config.epochs),
    };
    let n = data.len();
    let mut lr = config.learning_rate;
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_for_index(config.seed, "shuffle", epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = LossTerms {
            l_vqa: 0.0,
            l_qa: 0.0,
            l_h: 0.0,
            h_qonly: 0.0,
            h_vqa: 0.0,
        };
        let mut batches = 0usize;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = Batch {
                tokens: chunk.iter().map(|&i| data.tokens[i].clone()).collect(),
                features: chunk.iter().map(|&i| data.features[i].clone()).collect(),
                labels: chunk.iter().map(|&i| data.labels[i]).collect(),
            };
            let lg = crate::objective::build_losses(bundle, &batch, &config.regularizer)?;
            let terms = lg.terms();
            check_finite(epoch, step, &terms)?;

            // pre-update predictions on this batch, for the epoch accuracy
            let logits = lg.graph.value(lg.vqa_logits);
            let (rows, cols) = logits.rows_cols();
            for r in 0..rows {
                let mut best = 0;
                for c in 1..cols {
                    if logits.at(r, c) > logits.at(r, best) {
                        best = c;
                    }
                }
                if best == batch.labels[r] {
                    correct += 1;
                }
            }

            let mut lg = lg;
            let grads = crate::objective::step_gradients(bundle, &mut lg, &config.regularizer)?;
            opt.step(bundle, &grads, lr)?;

            sums.l_vqa += terms.l_vqa;
            sums.l_qa += terms.l_qa;
            sums.l_h += terms.l_h;
            sums.h_qonly += terms.h_qonly;
            sums.h_vqa += terms.h_vqa;
            batches += 1;
        }
        let b = batches as f64;
        trace.epochs.push(EpochStats {
            epoch,
            l_vqa: sums.l_vqa / b,
            l_qa: sums.l_qa / b,
            l_h: sums.l_h / b,
            h_qonly: sums.h_qonly / b,
            h_vqa: sums.h_vqa / b,
            train_accuracy: correct as f64 / n as f64,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        lr *= config.lr_decay_per_epoch;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelDims;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 8,
            embed: 3,
            q_dim: 4,
            img_dim: 4,
            raw_dim: 2,
            fusion_hidden: 5,
            adversary_hidden: 5,
            num_answers: 3,
        }
    }

    fn data(n: usize) -> Batch {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let d = dims();
        Batch {
            tokens: (0..n)
                .map(|_| (0..3).map(|_| r.gen_range(0..d.vocab)).collect())
                .collect(),
            features: (0..n)
                .map(|_| (0..d.raw_dim).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect(),
            labels: (0..n).map(|_| r.gen_range(0..d.num_answers)).collect(),
        }
    }

    /// Scalar Adam oracle: plain reimplementation of one parameter's update.
    struct ScalarAdam {
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdam {
        fn step(&mut self, p: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let mhat = self.m / (1.0 - 0.9f64.powi(self.t));
            let vhat = self.v / (1.0 - 0.999f64.powi(self.t));
            p - lr * mhat / (vhat.sqrt() + 1e-8)
        }
    }

    #[test]
    fn adam_matches_scalar_oracle() {
        let mut bundle = ModelBundle::init(dims(), 1);
        let mut opt = AdamState::new(&bundle, 0.9, 0.999, 1e-8);
        let shapes: Vec<Tensor> = bundle
            .params()
            .iter()
            .map(|p| Tensor::zeros_like(&p.value))
            .collect();
        let start = bundle.params()[0].value.values()[0];
        let mut oracle = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        let mut expected = start;
        for step in 0..5 {
            let g = 0.3 - 0.1 * step as f64;
            let mut grads = shapes.clone();
            grads[0].values_mut()[0] = g;
            opt.step(&mut bundle, &grads, 1e-2).unwrap();
            expected = oracle.step(expected, g, 1e-2);
            let actual = bundle.params()[0].value.values()[0];
            assert!((actual - expected).abs() < 1e-15, "step {step}");
        }
        // zero-gradient elements never move
        let fresh = ModelBundle::init(dims(), 1);
        assert_eq!(bundle.params()[1].value.values(), fresh.params()[1].value.values());
    }

    #[test]
    fn adam_first_step_magnitude_is_near_lr() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut bundle = ModelBundle::init(dims(), 2);
        let before = bundle.params()[0].value.values()[0];
        let mut opt = AdamState::new(&bundle, 0.9, 0.999, 1e-8);
        let mut grads: Vec<Tensor> = bundle
            .params()
            .iter()
            .map(|p| Tensor::zeros_like(&p.value))
            .collect();
        grads[0].values_mut()[0] = 0.42;
        opt.step(&mut bundle, &grads, 1e-3).unwrap();
        let moved = before - bundle.params()[0].value.values()[0];
        assert!((moved - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let mut bundle = ModelBundle::init(dims(), 3);
        let mut opt = AdamState::new(&bundle, 0.9, 0.999, 1e-8);
        assert!(opt.step(&mut bundle, &[], 1e-3).is_err());
    }

    #[test]
    fn zero_epochs_leaves_the_bundle_untouched() {
        let mut bundle = ModelBundle::init(dims(), 4);
        let reference = bundle.clone();
        let config = TrainConfig::new(RegularizerConfig::off(), 0, 0);
        let trace = train(&mut bundle, &data(10), &config).unwrap();
        assert!(trace.epochs.is_empty());
        for (a, b) in bundle.params().iter().zip(reference.params()) {
            assert_eq!(a.value.values(), b.value.values());
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let config = TrainConfig {
            batch_size: 7,
            ..TrainConfig::new(RegularizerConfig::new(0.1, 0.2).unwrap(), 2, 5)
        };
        let mut a = ModelBundle::init(dims(), 6);
        let ta = train(&mut a, &data(20), &config).unwrap();
        let mut b = ModelBundle::init(dims(), 6);
        let tb = train(&mut b, &data(20), &config).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value.values(), pb.value.values());
        }
        for (ea, eb) in ta.epochs.iter().zip(&tb.epochs) {
            assert_eq!(ea.l_vqa, eb.l_vqa);
            assert_eq!(ea.train_accuracy, eb.train_accuracy);
        }
    }

    #[test]
    fn training_reduces_the_task_loss() {
        let config = TrainConfig {
            batch_size: 10,
            learning_rate: 0.01,
            ..TrainConfig::new(RegularizerConfig::off(), 15, 7)
        };
        let mut bundle = ModelBundle::init(dims(), 8);
        let trace = train(&mut bundle, &data(30), &config).unwrap();
        let first = trace.epochs.first().unwrap().l_vqa;
        let last = trace.epochs.last().unwrap().l_vqa;
        assert!(last < first, "l_vqa did not decrease: {first} -> {last}");
    }

    #[test]
    fn trace_table_has_one_row_per_epoch() {
        let config = TrainConfig::new(RegularizerConfig::off(), 3, 1);
        let mut bundle = ModelBundle::init(dims(), 9);
        let trace = train(&mut bundle, &data(8), &config).unwrap();
        let table = trace.to_table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.starts_with("epoch\t"));
    }

    #[test]
    fn rejects_empty_dataset() {
        let mut bundle = ModelBundle::init(dims(), 10);
        let config = TrainConfig::new(RegularizerConfig::off(), 1, 0);
        assert!(train(&mut bundle, &Batch::default(), &config).is_err());
    }

    #[test]
    fn validate_flags_bad_configs() {
        let good = TrainConfig::new(RegularizerConfig::off(), 1, 0);
        assert!(good.validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..good.clone() },
            TrainConfig { batch_size: 0, ..good.clone() },
            TrainConfig { beta1: 1.0, ..good.clone() },
            TrainConfig { epsilon: 0.0, ..good.clone() },
            TrainConfig { lr_decay_per_epoch: 0.0, ..good.clone() },
            TrainConfig { lr_decay_per_epoch: 1.5, ..good.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}

fn check_finite(epoch: usize, step: usize, terms: &LossTerms) -> Result<()> {
    let checks = [
        ("l_vqa", terms.l_vqa),
        ("l_qa", terms.l_qa),
        ("l_h", terms.l_h),
    ];
    for (name, value) in checks {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                term: name,
                value,
            });
        }
    }
    Ok(())
}
