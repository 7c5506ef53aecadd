//! Plain mini-batch SGD and DP-SGD (per-example clipping plus Gaussian noise).

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Gradients, Model};
pub use crate::rng::RngStream;

/// Clip threshold meaning "never clip".
pub const UNCLIPPED: f64 = f64::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub noise_multiplier: f64,
    /// L2 bound on each example's gradient; [`UNCLIPPED`] disables clipping.
    #[serde(with = "threshold_serde")]
    pub clip_threshold: f64,
    pub minibatch_size: usize,
    pub delta: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::contract(format!("noise multiplier must be >= 0, got {}", self.noise_multiplier)));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::contract(format!("clip threshold must be > 0, got {}", self.clip_threshold)));
        }
        if self.clip_threshold.is_infinite() && self.noise_multiplier > 0.0 {
            return Err(Error::contract("noise needs a finite clip threshold"));
        }
        if self.minibatch_size == 0 {
            return Err(Error::contract("mini-batch size must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::contract(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }

    /// Per-coordinate standard deviation of the noise added to the summed
    /// clipped gradients.
    pub fn noise_std(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            0.0
        } else {
            self.noise_multiplier * self.clip_threshold
        }
    }
}

/// JSON has no infinity; an unclipped threshold is written as the string "inf".
mod threshold_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(de::Error::custom(format!("bad clip threshold {s:?}"))),
        }
    }
}

/// The two random streams a training run consumes.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub shuffle: RngStream,
    pub noise: RngStream,
}

impl TrainRngs {
    pub fn from_root(root: &RngStream) -> Self {
        TrainRngs { shuffle: root.derive("shuffle", 0), noise: root.derive("noise", 0) }
    }
}

/// `θ ← θ − η·g` on every trainable layer. Frozen layers are left untouched.
pub fn sgd_step(model: &mut Model, avg_grad: &Gradients, learning_rate: f64) -> Result<()> {
    if !avg_grad.is_congruent(&Gradients::zeros_like(model)) {
        return Err(Error::contract("gradient does not match model parameters"));
    }
    let trainable = model.trainable().to_vec();
    for ((p, g), train) in model.params_mut().iter_mut().zip(avg_grad.layers()).zip(trainable) {
        if let (Some(p), Some(g), true) = (p.as_mut(), g.as_ref(), train) {
            for (v, d) in p.values_mut().zip(g.values()) {
                *v -= learning_rate * d;
            }
        }
    }
    Ok(())
}

/// Rescale `grad` so that its global L2 norm is at most `threshold`.
pub fn clip_per_example(mut grad: Gradients, threshold: f64) -> Result<Gradients> {
    if !(threshold > 0.0) {
        return Err(Error::contract(format!("clip threshold must be > 0, got {threshold}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteInput("per-example gradient".into()));
    }
    let factor = (grad.l2_norm() / threshold).max(1.0);
    if factor > 1.0 {
        grad.scale(1.0 / factor);
        // rounding can leave the norm an ulp above the threshold
        while grad.l2_norm() > threshold {
            grad.scale(1.0 - f64::EPSILON);
        }
    }
    Ok(grad)
}

/// `(Σ clipped + ξ) / mb` with `ξ ~ N(0, (nm·nc)²)` per coordinate.
pub fn dp_aggregate(clipped: &[Gradients], cfg: &DpConfig, rng: &mut RngStream) -> Result<Gradients> {
    cfg.validate()?;
    let (first, rest) = clipped.split_first().ok_or_else(|| Error::contract("no gradients to aggregate"))?;
    let mut sum = first.clone();
    for g in rest {
        sum.accumulate(g)?;
    }
    Ok(noisy_mean(sum, cfg, rng))
}

fn noisy_mean(mut sum: Gradients, cfg: &DpConfig, rng: &mut RngStream) -> Gradients {
    let std = cfg.noise_std();
    if std > 0.0 {
        for v in sum.values_mut() {
            *v += std * rng.normal();
        }
    }
    sum.scale(1.0 / cfg.minibatch_size as f64);
    sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    /// Parameter updates applied during the epoch.
    pub steps: usize,
}

/// Batch size actually used for a dataset of `n` examples.
pub fn effective_batch(requested: usize, n: usize) -> usize {
    if requested > n {
        log::warn!("batch size {requested} exceeds dataset size {n}; clamping");
        n
    } else {
        requested
    }
}

/// Optimizer updates per epoch (last incomplete batch dropped).
pub fn steps_per_epoch(batch: usize, n: usize) -> usize {
    if n == 0 {
        0
    } else {
        n / batch.min(n)
    }
}

/// One pass over `data` in shuffled mini-batches; the last incomplete batch
/// is dropped.
///
/// Without `dp` this is plain SGD on the batch-mean gradient. With `dp` the
/// batch size is `dp.minibatch_size`, every example's gradient is clipped
/// to `dp.clip_threshold`, and Gaussian noise is added to the clipped sum
/// before averaging. Loss and accuracy are taken from the forward passes
/// made before each update.
pub fn train_epoch(
    model: &mut Model,
    data: &LabeledDataset,
    sgd: &SgdConfig,
    dp: Option<&DpConfig>,
    rngs: &mut TrainRngs,
) -> Result<EpochMetrics> {
    sgd.validate()?;
    if let Some(dp) = dp {
        dp.validate()?;
    }
    if data.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(Error::contract(format!(
            "data shape {:?} does not match model input {:?}",
            data.sample_shape(),
            model.input_shape()
        )));
    }
    let n = data.len();
    let batch = effective_batch(dp.map_or(sgd.batch_size, |d| d.minibatch_size), n);
    let mut order: Vec<usize> = (0..n).collect();
    rngs.shuffle.shuffle(&mut order);

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut steps = 0usize;
    for (b, chunk) in order.chunks_exact(batch).enumerate() {
        let mut step = || -> Result<Gradients> {
            let mut sum = Gradients::zeros_like(model);
            for &i in chunk {
                let (g, l, probs) = model.example_gradient(data.example(i), data.label(i))?;
                loss_sum += l;
                if crate::tensor::argmax(&probs) == data.label(i) {
                    correct += 1;
                }
                let g = match dp {
                    Some(dp) => clip_per_example(g, dp.clip_threshold)?,
                    None => g,
                };
                sum.accumulate(&g)?;
            }
            Ok(match dp {
                Some(dp) => noisy_mean(sum, &DpConfig { minibatch_size: batch, ..*dp }, &mut rngs.noise),
                None => {
                    let mut mean = sum;
                    mean.scale(1.0 / batch as f64);
                    mean
                }
            })
        };
        let grad = step().map_err(|e| Error::Batch { batch: b, source: Box::new(e) })?;
        sgd_step(model, &grad, sgd.learning_rate)?;
        if model.params().iter().flatten().any(|p| !p.is_finite()) {
            return Err(Error::Batch { batch: b, source: Box::new(Error::NonFiniteInput("parameters after update".into())) });
        }
        seen += chunk.len();
        steps += 1;
    }
    Ok(EpochMetrics { mean_loss: loss_sum / seen as f64, accuracy: correct as f64 / seen as f64, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn dense_model() -> Model {
        Model::build(&[LayerSpec::dense(3), LayerSpec::Softmax], &[4], 1).unwrap()
    }

    fn filled(model: &Model, value: f64) -> Gradients {
        let mut g = Gradients::zeros_like(model);
        g.values_mut().for_each(|v| *v = value);
        g
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut m = dense_model();
        let before = m.clone();
        let g = Gradients::zeros_like(&m);
        sgd_step(&mut m, &g, 0.5).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn step_substitution() {
        let mut m = Model::zeros(&[LayerSpec::dense(1)], &[1]).unwrap();
        m.set_flat_params(&[1.0, 1.0]).unwrap();
        let g = filled(&m, 2.0);
        sgd_step(&mut m, &g, 0.1).unwrap();
        for v in m.flat_params() {
            assert!((v - 0.8).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_follow_scalar_recurrence() {
        let mut m = Model::zeros(&[LayerSpec::dense(1)], &[1]).unwrap();
        m.set_flat_params(&[0.3, -0.2]).unwrap();
        let (g1, g2, eta) = (0.7, -1.1, 0.05);
        let g = filled(&m, g1);
        sgd_step(&mut m, &g, eta).unwrap();
        let g = filled(&m, g2);
        sgd_step(&mut m, &g, eta).unwrap();
        let expect = [0.3 - eta * g1 - eta * g2, -0.2 - eta * g1 - eta * g2];
        for (v, e) in m.flat_params().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_layer_untouched() {
        let mut m = dense_model();
        m.set_trainable(0, false);
        let before = m.clone();
        let g = filled(&m, 1.0);
        sgd_step(&mut m, &g, 0.3).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn clip_halves_norm_three() {
        let m = Model::zeros(&[LayerSpec::dense(1)], &[8]).unwrap();
        // 9 entries of value 1 -> norm 3
        let g = filled(&m, 1.0);
        assert!((g.l2_norm() - 3.0).abs() < 1e-15);
        let c = clip_per_example(g, 1.5).unwrap();
        assert!(c.values().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!((c.l2_norm() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn clip_identity_below_threshold() {
        let m = Model::zeros(&[LayerSpec::dense(1)], &[3]).unwrap();
        let g = filled(&m, 0.2); // norm 0.4
        let c = clip_per_example(g.clone(), 1.5).unwrap();
        assert_eq!(c, g);
    }

    #[test]
    fn clip_rejects_bad_input() {
        let m = Model::zeros(&[LayerSpec::dense(1)], &[3]).unwrap();
        assert!(clip_per_example(filled(&m, f64::NAN), 1.0).is_err());
        assert!(clip_per_example(filled(&m, 1.0), 0.0).is_err());
    }

    #[test]
    fn aggregate_without_noise_is_mean() {
        let m = dense_model();
        let gs = vec![filled(&m, 1.0), filled(&m, 3.0)];
        let cfg = DpConfig { noise_multiplier: 0.0, clip_threshold: 10.0, minibatch_size: 2, delta: 1e-5 };
        let out = dp_aggregate(&gs, &cfg, &mut RngStream::new(0)).unwrap();
        assert!(out.values().all(|&v| v == 2.0));
        assert!(dp_aggregate(&[], &cfg, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn aggregate_is_deterministic() {
        let m = dense_model();
        let gs = vec![filled(&m, 0.1)];
        let cfg = DpConfig { noise_multiplier: 1.3, clip_threshold: 1.0, minibatch_size: 1, delta: 1e-5 };
        let a = dp_aggregate(&gs, &cfg, &mut RngStream::new(9)).unwrap();
        let b = dp_aggregate(&gs, &cfg, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let ok = DpConfig { noise_multiplier: 1.0, clip_threshold: 1.0, minibatch_size: 10, delta: 1e-5 };
        assert!(ok.validate().is_ok());
        assert!(DpConfig { delta: 1.0, ..ok }.validate().is_err());
        assert!(DpConfig { noise_multiplier: -1.0, ..ok }.validate().is_err());
        assert!(DpConfig { clip_threshold: UNCLIPPED, ..ok }.validate().is_err());
        assert!(DpConfig { clip_threshold: UNCLIPPED, noise_multiplier: 0.0, ..ok }.validate().is_ok());
        assert!(SgdConfig { learning_rate: 0.0, epochs: 1, batch_size: 1 }.validate().is_err());
    }

    #[test]
    fn unclipped_threshold_round_trips_through_json() {
        let cfg = DpConfig { noise_multiplier: 0.0, clip_threshold: UNCLIPPED, minibatch_size: 4, delta: 1e-4 };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"inf\""));
        let back: DpConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn step_counting_drops_last_batch() {
        assert_eq!(steps_per_epoch(250, 6653), 26);
        assert_eq!(steps_per_epoch(250, 420), 1);
        assert_eq!(steps_per_epoch(500, 420), 1);
    }
}
