//! Mini-batch training. Deliberately sequential: one model trains on one
//! thread with a fixed sample order per seed, so checkpoints are reproducible
//! to the bit. Parallelism in this crate lives in the evaluation layers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, PgdSpec};
use crate::error::{Error, Result};
use crate::model::{accuracy, Classifier};
use crate::noise::mix_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Gradient-normalized steps; the usual choice here. Blob data squeezed
    /// into the unit cube leaves plain SGD badly conditioned (it oscillates
    /// at any rate high enough to make progress), and the conv model adds
    /// mixed curvature across layers on top.
    RmsProp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdversarialMix {
    /// Attack grown against the current parameters each batch.
    pub spec: PgdSpec,
    /// Fraction of every batch replaced by adversarial examples.
    pub fraction: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub adversarial: Option<AdversarialMix>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            optimizer: Optimizer::Sgd,
            seed,
            adversarial: None,
        }
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(mix) = &self.adversarial {
            if !(0.0..=1.0).contains(&mix.fraction) {
                return Err(Error::InvalidParameter(format!(
                    "adversarial fraction must be in [0, 1], got {}",
                    mix.fraction
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_mean_loss: f64,
    pub train_accuracy: f64,
}

const RMSPROP_DECAY: f64 = 0.9;
const RMSPROP_EPS: f64 = 1e-8;

/// Mean cross-entropy beyond this is a blown-up run, not a bad fit: a loss of
/// 1e8 needs a logit gap of the same size, and ReLU nets can coast at such
/// values for many epochs without ever producing a NaN.
const LOSS_DIVERGENCE_LIMIT: f64 = 1e8;

/// Adversarial example for training. PGD ascends the loss of the model's own
/// prediction; that matches the ground-truth label whenever the current model
/// classifies x correctly. Already-misclassified samples are used as-is.
fn adversarial_example(
    model: &Classifier,
    x: &Tensor,
    label: usize,
    spec: &PgdSpec,
) -> Result<Tensor> {
    if model.predict(x)? != label {
        return Ok(x.clone());
    }
    let mut forced = spec.clone();
    forced.targeted = None;
    Ok(pgd_attack(model, x, label, &forced)?.x_adv)
}

pub fn train(
    model: &Classifier,
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Classifier, TrainReport)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} inputs vs {} labels",
            inputs.len(),
            labels.len()
        )));
    }

    let mut model = model.clone();
    let names: Vec<String> = model.params().keys().cloned().collect();
    let mut rms_state: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|n| (n.clone(), vec![0.0; model.params()[n].len()]))
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut last_mean_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let adversarial_count = cfg
                .adversarial
                .as_ref()
                .map(|m| ((batch.len() as f64) * m.fraction).round() as usize)
                .unwrap_or(0);

            let mut grad_sum: BTreeMap<&str, Vec<f64>> = names
                .iter()
                .map(|n| (n.as_str(), vec![0.0; model.params()[n].len()]))
                .collect();
            let mut batch_loss = 0.0;

            for (pos, &idx) in batch.iter().enumerate() {
                let x = if pos < adversarial_count {
                    let mix = cfg.adversarial.as_ref().unwrap();
                    let seed = mix_seed(cfg.seed, (epoch * inputs.len() + idx) as u64);
                    adversarial_example(
                        &model,
                        &inputs[idx],
                        labels[idx],
                        &mix.spec.clone().with_seed(seed),
                    )?
                } else {
                    inputs[idx].clone()
                };
                let (loss, grads) =
                    model
                        .loss_grad_params(&x, labels[idx])
                        .map_err(|e| Error::TrainingDiverged(format!(
                            "epoch {epoch}, batch {batch_no}: {e}"
                        )))?;
                batch_loss += loss;
                for (name, grad) in names.iter().zip(&grads) {
                    let acc = grad_sum.get_mut(name.as_str()).unwrap();
                    for (a, g) in acc.iter_mut().zip(grad.data()) {
                        *a += g;
                    }
                }
            }

            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "epoch {epoch}, batch {batch_no}: non-finite loss"
                )));
            }
            if batch_loss / batch.len() as f64 > LOSS_DIVERGENCE_LIMIT {
                return Err(Error::TrainingDiverged(format!(
                    "epoch {epoch}, batch {batch_no}: mean loss {:.3e} above {LOSS_DIVERGENCE_LIMIT:.0e}",
                    batch_loss / batch.len() as f64
                )));
            }
            epoch_loss += batch_loss;
            seen += batch.len();

            let scale = 1.0 / batch.len() as f64;
            for name in &names {
                let grad = &grad_sum[name.as_str()];
                let state = rms_state.get_mut(name).unwrap();
                let param = model.params_mut().get_mut(name).unwrap();
                let data = param.data_mut();
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        for (p, &g) in data.iter_mut().zip(grad) {
                            *p -= cfg.learning_rate * g * scale;
                        }
                    }
                    Optimizer::RmsProp => {
                        for ((p, &g), v) in data.iter_mut().zip(grad).zip(state.iter_mut()) {
                            let g = g * scale;
                            *v = RMSPROP_DECAY * *v + (1.0 - RMSPROP_DECAY) * g * g;
                            *p -= cfg.learning_rate * g / (v.sqrt() + RMSPROP_EPS);
                        }
                    }
                }
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingDiverged(format!(
                        "epoch {epoch}, batch {batch_no}: parameter '{name}' went non-finite"
                    )));
                }
            }
        }
        last_mean_loss = epoch_loss / seen as f64;
    }

    let train_accuracy = accuracy(&model, inputs, labels)?;
    Ok((
        model,
        TrainReport {
            epochs: cfg.epochs,
            final_mean_loss: last_mean_loss,
            train_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackNorm;
    use crate::data::{gen_blobs, BlobParams, Split};
    use crate::model::ModelArch;

    fn toy() -> (Vec<Tensor>, Vec<usize>, usize) {
        let ds = gen_blobs(&BlobParams::new(3, 8, 240, 6.0, 9)).unwrap();
        let (x, y) = ds.gather(Split::Train);
        (x, y, ds.num_classes)
    }

    #[test]
    fn training_fits_separable_blobs() {
        let (x, y, classes) = toy();
        let arch = ModelArch::Mlp {
            input_dim: 8,
            hidden: vec![16],
            classes,
        };
        let model = Classifier::init(arch, 3).unwrap();
        let mut cfg = TrainConfig::new(60, 32, 0.05, 11);
        cfg.optimizer = Optimizer::RmsProp;
        let (trained, report) = train(&model, &x, &y, &cfg).unwrap();
        assert!(report.train_accuracy >= 0.95, "acc {}", report.train_accuracy);
        assert!(report.final_mean_loss < 0.3);
        assert!(accuracy(&trained, &x, &y).unwrap() >= 0.95);
    }

    #[test]
    fn training_is_seed_reproducible() {
        let (x, y, classes) = toy();
        let arch = ModelArch::Mlp {
            input_dim: 8,
            hidden: vec![8],
            classes,
        };
        let model = Classifier::init(arch, 1).unwrap();
        let cfg = TrainConfig::new(5, 16, 0.3, 21);
        let (a, _) = train(&model, &x, &y, &cfg).unwrap();
        let (b, _) = train(&model, &x, &y, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut other = cfg.clone();
        other.seed = 22;
        let (c, _) = train(&model, &x, &y, &other).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn divergence_is_reported_with_context() {
        let (x, y, classes) = toy();
        let arch = ModelArch::Mlp {
            input_dim: 8,
            hidden: vec![8],
            classes,
        };
        let model = Classifier::init(arch, 1).unwrap();
        let cfg = TrainConfig::new(10, 16, 1e14, 0);
        match train(&model, &x, &y, &cfg) {
            Err(Error::TrainingDiverged(msg)) => {
                assert!(msg.contains("epoch"), "message: {msg}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rmsprop_and_adversarial_mix_run() {
        let (x, y, classes) = toy();
        let arch = ModelArch::Mlp {
            input_dim: 8,
            hidden: vec![12],
            classes,
        };
        let model = Classifier::init(arch, 4).unwrap();
        let mut cfg = TrainConfig::new(30, 32, 0.05, 13);
        cfg.optimizer = Optimizer::RmsProp;
        cfg.adversarial = Some(AdversarialMix {
            spec: PgdSpec::new(AttackNorm::LInf, 0.03, 5, 17),
            fraction: 0.5,
        });
        let (trained, report) = train(&model, &x, &y, &cfg).unwrap();
        assert!(report.train_accuracy > 0.5);
        assert_eq!(trained.num_classes(), classes);
    }
}

