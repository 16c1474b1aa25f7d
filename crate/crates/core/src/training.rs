//! Mini-batch training: Adam, a linearly decaying learning rate and
//! class-weighted categorical cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logits_cross_entropy_value, Tape};
use crate::data::{Dataset, GridSample};
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    None,
    /// `n_total / (2 n_c)` for class `c`.
    InverseFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub class_weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr_max: 1e-2,
            lr_min: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            class_weighting: ClassWeighting::InverseFrequency,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam needs betas in [0, 1) and a positive epsilon".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` in `0..=epochs`, falling linearly from
/// `lr_max` to `lr_min`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside the schedule's 0..={}",
            cfg.epochs
        )));
    }
    let frac = epoch as f64 / cfg.epochs as f64;
    Ok(cfg.lr_max + (cfg.lr_min - cfg.lr_max) * frac)
}

/// Loss weight per class for the given training samples.
pub fn class_weights(samples: &[GridSample], weighting: ClassWeighting) -> Result<[f64; 2]> {
    let counts = Dataset::class_counts(samples);
    if counts.contains(&0) {
        return Err(Error::Input(format!(
            "training split has {} negative and {} positive samples; both classes are needed \
             (inverse-frequency class weights are undefined otherwise)",
            counts[0], counts[1]
        )));
    }
    Ok(match weighting {
        ClassWeighting::None => [1.0, 1.0],
        ClassWeighting::InverseFrequency => {
            let n = samples.len() as f64;
            [n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)]
        }
    })
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.iter().into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows `params`' canonical order.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    let names = params.names();
    let targets = params.iter_mut();
    if grads.len() != targets.len() || state.m.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            targets.len()
        )));
    }
    for ((name, g), p) in names.iter().zip(grads).zip(&targets) {
        if g.shape() != p.shape() {
            return Err(Error::Contract(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { param: name.clone() });
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in targets.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let iter = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut());
        for (((theta, &gi), mi), vi) in iter {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted loss over the epoch's training-mode forward passes.
    pub loss: f64,
    /// Accuracy of those same forward passes at a 0.5 threshold.
    pub train_accuracy: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

/// Loss and gradients of one sample, scaled by `scale`.
fn sample_gradients(
    model: &Model,
    sample: &GridSample,
    weights: [f64; 2],
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.params.register(&mut tape);
    let x = tape.leaf_ref(&sample.anomalies);
    let logits = model.logits_on_tape(&mut tape, x, &p, true, rng)?;
    let p1 = tape.value(logits).reshape([1, 2])?.softmax()?.data()[1];
    let loss = tape.softmax_cross_entropy(logits, &[sample.label as usize], weights)?;
    let loss_value = tape.value(loss).item()?;
    let scaled = tape.scale(loss, scale);
    let mut grads = tape.backward(scaled)?;
    let g = p.iter().into_iter().map(|&v| grads.take(v)).collect();
    Ok((loss_value, p1, g))
}

/// Trains `model` in place on `dataset.train()`. Deterministic given the
/// model's initial parameters, the data and `cfg`.
pub fn train(model: &mut Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    train_with(model, dataset.train(), cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut Model,
    samples: &[GridSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let weights = class_weights(samples, cfg.class_weighting)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let s = &samples[i];
                let (loss, p1, grads) = sample_gradients(model, s, weights, scale, &mut rng)?;
                loss_sum += loss;
                correct += usize::from(u8::from(p1 >= 0.5) == s.label);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let grads = acc.expect("non-empty batch");
            adam_step(&mut model.params, &grads, &mut state, lr, cfg)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(log)
}

/// Inference-mode class-1 probabilities and the weighted mean loss.
pub fn predict(model: &Model, samples: &[GridSample], weights: [f64; 2]) -> Result<(Vec<f64>, f64)> {
    let mut probs = Vec::with_capacity(samples.len());
    let mut logits = Vec::with_capacity(samples.len() * 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in samples {
        let z = model.logits(&s.anomalies, false, &mut rng)?;
        probs.push(z.reshape([1, 2])?.softmax()?.data()[1]);
        logits.extend_from_slice(z.data());
    }
    let targets: Vec<usize> = samples.iter().map(|s| s.label as usize).collect();
    let loss = if samples.is_empty() {
        0.0
    } else {
        logits_cross_entropy_value(&Tensor::new([samples.len(), 2], logits)?, &targets, weights)?
    };
    Ok((probs, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use chrono::NaiveDate;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg).unwrap(), 1e-2);
        assert!((lr_schedule(100, &cfg).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(50, &cfg).unwrap() - 5.05e-3).abs() < 1e-15);
        assert!(matches!(lr_schedule(101, &cfg), Err(Error::Contract(_))));
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = lr_schedule(e, &cfg).unwrap();
            assert!(lr <= prev && lr >= cfg.lr_min - 1e-18 && lr <= cfg.lr_max);
            prev = lr;
        }
    }

    fn samples(labels: &[u8]) -> Vec<GridSample> {
        let d = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| GridSample {
                date: d + chrono::Days::new(i as u64),
                anomalies: Tensor::zeros([1, 1, 1]),
                label,
            })
            .collect()
    }

    #[test]
    fn inverse_frequency_weights() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i < 5)).collect();
        let w = class_weights(&samples(&labels), ClassWeighting::InverseFrequency).unwrap();
        assert!((w[0] - 100.0 / 190.0).abs() < 1e-15 && (w[1] - 10.0).abs() < 1e-15);
        assert!((w[1] / w[0] - 19.0).abs() < 1e-12);
        assert_eq!(class_weights(&samples(&labels), ClassWeighting::None).unwrap(), [1.0, 1.0]);
        let err = class_weights(&samples(&[0; 10]), ClassWeighting::None).unwrap_err();
        assert!(err.to_string().contains("both classes"));
    }

    fn tiny_params() -> ModelParams {
        let cfg = ModelConfig {
            input_h: 4,
            input_w: 4,
            blocks: 1,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 3).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let grads: Vec<Tensor> = p.iter().into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam_step(&mut p, &grads, &mut state, 0.01, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        for g in [1e-3, 0.5, 40.0] {
            let mut p = tiny_params();
            let before = p.clone();
            let mut state = AdamState::new(&p);
            let grads: Vec<Tensor> = p.iter().into_iter().map(|t| Tensor::full(t.shape(), g)).collect();
            adam_step(&mut p, &grads, &mut state, 0.01, &cfg).unwrap();
            for (a, b) in p.iter().into_iter().zip(before.iter()) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    // m_hat = g, v_hat = g^2 -> step = lr * g / (g + eps)
                    let expect = 0.01 * g / (g + cfg.eps);
                    assert!(((y - x) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adam_is_deterministic_and_flags_nan() {
        let cfg = TrainConfig::default();
        let mut a = tiny_params();
        let mut b = a.clone();
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        for step in 0..3 {
            let grads: Vec<Tensor> = a
                .iter()
                .into_iter()
                .map(|t| Tensor::from_fn(t.shape(), |i| ((i + step) as f64).sin()))
                .collect();
            adam_step(&mut a, &grads, &mut sa, 0.01, &cfg).unwrap();
            adam_step(&mut b, &grads, &mut sb, 0.01, &cfg).unwrap();
        }
        assert_eq!(a, b);

        let mut grads: Vec<Tensor> = a.iter().into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        grads[2].data_mut()[0] = f64::NAN;
        match adam_step(&mut a, &grads, &mut sa, 0.01, &cfg) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, a.names()[2]),
            other => panic!("{other:?}"),
        }
    }
}
