//! The three roles of the pipeline: the trusted party trains the initial
//! model on public data, each participant fine-tunes a copy under DP-SGD with
//! the head frozen and keeps only the backbone, and the cloud averages the
//! backbones' feature vectors and classifies the mean with the shared head.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Model};
use crate::optim::{self, DpConfig, EpochMetrics, SgdConfig, TrainRngs};
use crate::privacy;
use crate::rng::RngStream;
use crate::tensor::argmax;

/// A data holder and the settings it trains with.
#[derive(Debug, Clone)]
pub struct Participant {
    /// 1-based.
    pub id: usize,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub dp: DpConfig,
    pub sgd: SgdConfig,
    pub rng: RngStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub participant: u32,
    pub epochs: u32,
    pub dp: DpConfig,
    pub epsilon: f64,
}

/// A participant's fine-tuned backbone (layers `1..=p-2`).
#[derive(Debug, Clone, PartialEq)]
pub struct PrivateModel {
    pub backbone: Model,
    pub provenance: Provenance,
}

/// Per-epoch progress of one participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub participant: usize,
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Train the initial model with plain SGD on public data.
pub fn train_initial(
    public: &LabeledDataset,
    specs: &[LayerSpec],
    input_shape: &[usize],
    sgd: &SgdConfig,
    rng: &RngStream,
) -> Result<(Model, Vec<EpochMetrics>)> {
    if public.is_empty() {
        return Err(Error::contract("public dataset is empty"));
    }
    sgd.validate()?;
    let mut model = Model::build(specs, input_shape, rng.derive("init", 0).seed())?;
    let mut rngs = TrainRngs::from_root(rng);
    let mut history = Vec::with_capacity(sgd.epochs);
    for _ in 0..sgd.epochs {
        history.push(optim::train_epoch(&mut model, public, sgd, None, &mut rngs)?);
    }
    Ok((model, history))
}

/// Privacy spent by a participant's run.
pub fn participant_epsilon(dp: &DpConfig, train_size: usize, epochs: usize) -> Result<f64> {
    if epochs == 0 {
        return Ok(0.0);
    }
    Ok(privacy::account_training(dp.noise_multiplier, dp.minibatch_size, train_size, epochs, dp.delta)?.epsilon)
}

/// Copy `initial`, freeze its last two layers and run DP-SGD for
/// `participant.sgd.epochs` epochs. Returns the full model, before the head
/// is removed. `on_epoch` sees the model after every epoch.
pub fn train_private_full(
    initial: &Model,
    participant: &Participant,
    mut on_epoch: impl FnMut(usize, &Model, &EpochMetrics) -> Result<()>,
) -> Result<Model> {
    if participant.train.sample_shape() != initial.input_shape() {
        return Err(Error::contract(format!(
            "participant {} data shape {:?} does not match model input {:?}",
            participant.id,
            participant.train.sample_shape(),
            initial.input_shape()
        )));
    }
    if initial.layer_count() < 3 {
        return Err(Error::contract("initial model has fewer than three layers"));
    }
    let mut model = initial.clone();
    model.freeze_last(2);
    let mut rngs = TrainRngs::from_root(&participant.rng);
    for epoch in 0..participant.sgd.epochs {
        let m = optim::train_epoch(&mut model, &participant.train, &participant.sgd, Some(&participant.dp), &mut rngs)?;
        on_epoch(epoch, &model, &m)?;
    }
    Ok(model)
}

/// Transfer, private fine-tuning and truncation for one participant.
pub fn train_private(initial: &Model, participant: &Participant) -> Result<PrivateModel> {
    train_private_observed(initial, participant, |_, _, _| Ok(()))
}

pub fn train_private_observed(
    initial: &Model,
    participant: &Participant,
    on_epoch: impl FnMut(usize, &Model, &EpochMetrics) -> Result<()>,
) -> Result<PrivateModel> {
    let full = train_private_full(initial, participant, on_epoch)?;
    let (backbone, _head) = full.split()?;
    let epsilon = participant_epsilon(&participant.dp, participant.train.len(), participant.sgd.epochs)?;
    Ok(PrivateModel {
        backbone,
        provenance: Provenance {
            participant: participant.id as u32,
            epochs: participant.sgd.epochs as u32,
            dp: participant.dp,
            epsilon,
        },
    })
}

/// Running weighted mean; exact when every vector is identical.
fn weighted_mean<'a>(vectors: impl IntoIterator<Item = (&'a [f64], f64)>) -> Vec<f64> {
    let mut mean: Vec<f64> = Vec::new();
    let mut total = 0.0;
    for (v, w) in vectors {
        if w == 0.0 {
            continue;
        }
        total += w;
        if mean.is_empty() {
            mean = v.to_vec();
            continue;
        }
        let f = w / total;
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += f * (x - *m);
        }
    }
    mean
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::contract(format!("{} weights for {n} members", weights.len())));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::contract("ensemble weights must be non-negative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("ensemble weights sum to {sum}, not 1")));
    }
    Ok(())
}

/// `Σ α_i · P_i`.
pub fn weighted_prediction(predictions: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(weights, predictions.len())?;
    if predictions.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::contract("predictions differ in length"));
    }
    Ok(weighted_mean(predictions.iter().map(Vec::as_slice).zip(weights.iter().copied())))
}

/// Private backbones sharing the initial model's head.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    members: Vec<PrivateModel>,
    head: Model,
    weights: Vec<f64>,
}

impl EnsembleModel {
    /// `weights` defaults to uniform `1/n`.
    pub fn new(members: Vec<PrivateModel>, head: Model, weights: Option<Vec<f64>>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::contract("an ensemble needs at least one member"))?;
        for m in &members[1..] {
            if !m.backbone.same_architecture(&first.backbone) {
                return Err(Error::contract(format!(
                    "structural mismatch: participant {} backbone differs from participant {}",
                    m.provenance.participant, first.provenance.participant
                )));
            }
        }
        if first.backbone.output_shape() != head.input_shape() {
            return Err(Error::contract(format!(
                "structural mismatch: backbones emit {:?}, head expects {:?}",
                first.backbone.output_shape(),
                head.input_shape()
            )));
        }
        let n = members.len();
        let weights = weights.unwrap_or_else(|| vec![1.0 / n as f64; n]);
        check_weights(&weights, n)?;
        Ok(EnsembleModel { members, head, weights })
    }

    /// Build from the initial model: its head is kept, its backbone discarded.
    pub fn from_initial(members: Vec<PrivateModel>, initial: &Model, weights: Option<Vec<f64>>) -> Result<Self> {
        let (_, head) = initial.split()?;
        Self::new(members, head, weights)
    }

    pub fn members(&self) -> &[PrivateModel] {
        &self.members
    }

    pub fn head(&self) -> &Model {
        &self.head
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Head input for `input`: the weighted mean of every backbone's output.
    pub fn features(&self, input: &[f64]) -> Result<Vec<f64>> {
        let zs = self
            .members
            .iter()
            .map(|m| m.backbone.predict(input))
            .collect::<Result<Vec<_>>>()?;
        Ok(weighted_mean(zs.iter().map(Vec::as_slice).zip(self.weights.iter().copied())))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let z = self.features(input)?;
        self.head.predict(&z)
    }
}

/// Fraction of examples whose arg-max prediction equals the label.
pub fn evaluate(predict: impl Fn(&[f64]) -> Result<Vec<f64>> + Sync, dataset: &LabeledDataset) -> Result<f64> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let correct = (0..dataset.len())
        .into_par_iter()
        .map(|i| predict(dataset.example(i)).map(|p| (argmax(&p) == dataset.label(i)) as usize))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / dataset.len() as f64)
}

/// Everything one pipeline run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub noise_multiplier: f64,
    pub clip_threshold: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub initial_accuracy: f64,
    pub private_accuracies: Vec<f64>,
    pub private_avg_accuracy: f64,
    pub final_accuracy: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub curves: Vec<CurvePoint>,
}

/// Artifacts of a pipeline run, kept for callers that want to save them.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: ExperimentReport,
    pub initial: Model,
    pub private_models: Vec<PrivateModel>,
}

/// Worker pool capped by `EDP_THREADS`.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let threads = match std::env::var("EDP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("EDP_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => available,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn run_pipeline(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let dataset = config.load_dataset().map_err(|e| e.in_stage("load"))?;
    Ok(run_pipeline_on(&dataset, config)?.report)
}

/// Partition, train the initial model, train every participant, ensemble,
/// evaluate.
pub fn run_pipeline_on(dataset: &LabeledDataset, config: &ExperimentConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let pool = worker_pool()?;
    let master = RngStream::new(config.seed);
    let plan = config.partition_plan();
    let parts = data::partition(dataset, &plan).map_err(|e| e.in_stage("partition"))?;
    let (specs, input_shape) = config.architecture(dataset)?;

    let (initial, _) = pool
        .install(|| train_initial(&parts.public, &specs, &input_shape, &config.initial, &master.derive("initial", 0)))
        .map_err(|e| e.in_stage("train-initial"))?;
    let (_, head) = initial.split().map_err(|e| e.in_stage("train-initial"))?;

    let participants = config.participants_from(&parts, &master);
    let results: Vec<Result<(PrivateModel, f64, Vec<CurvePoint>)>> = pool.install(|| {
        use rayon::prelude::*;
        participants
            .par_iter()
            .map(|p| {
                let mut curve = Vec::new();
                let private = train_private_observed(&initial, p, |epoch, model, m| {
                    if config.record_curves {
                        let test_accuracy = evaluate(|x| model.predict(x), &p.test)?;
                        curve.push(CurvePoint { participant: p.id, epoch: epoch + 1, train_accuracy: m.accuracy, test_accuracy });
                    }
                    Ok(())
                })?;
                let composed = Model::compose(&private.backbone, &head)?;
                let acc = evaluate(|x| composed.predict(x), &p.test)?;
                Ok((private, acc, curve))
            })
            .collect()
    });
    let mut private_models = Vec::new();
    let mut private_accuracies = Vec::new();
    let mut curves = Vec::new();
    for r in results {
        let (m, acc, curve) = r.map_err(|e| e.in_stage("train-private"))?;
        private_models.push(m);
        private_accuracies.push(acc);
        curves.extend(curve);
    }

    let ensemble = EnsembleModel::new(private_models.clone(), head, config.ensemble_weights.clone())
        .map_err(|e| e.in_stage("ensemble"))?;
    let (initial_accuracy, final_accuracy) = pool
        .install(|| -> Result<(f64, f64)> {
            Ok((
                evaluate(|x| initial.predict(x), &parts.validation)?,
                evaluate(|x| ensemble.forward(x), &parts.validation)?,
            ))
        })
        .map_err(|e| e.in_stage("evaluate"))?;

    let epsilon = private_models.first().map_or(0.0, |m| m.provenance.epsilon);
    let report = ExperimentReport {
        noise_multiplier: config.dp.noise_multiplier,
        clip_threshold: config.dp.clip_threshold,
        delta: config.dp.delta,
        epsilon,
        initial_accuracy,
        private_avg_accuracy: private_accuracies.iter().sum::<f64>() / private_accuracies.len() as f64,
        private_accuracies,
        final_accuracy,
        seed: config.seed,
        epochs: config.private.epochs,
        batch: config.dp.minibatch_size,
        curves,
    };
    Ok(PipelineOutput { report, initial, private_models })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_prediction_cases() {
        let p1 = vec![1.0, 0.0];
        let p2 = vec![0.0, 1.0];
        assert_eq!(weighted_prediction(&[p1.clone(), p2.clone()], &[1.0, 0.0]).unwrap(), p1);
        assert_eq!(weighted_prediction(&[p1.clone(), p2.clone()], &[0.25, 0.75]).unwrap(), vec![0.25, 0.75]);
        let p = vec![0.1, 0.7, 0.2];
        let same = vec![p.clone(); 3];
        assert_eq!(weighted_prediction(&same, &[1.0 / 3.0; 3]).unwrap(), p);
    }

    #[test]
    fn weighted_prediction_rejects_bad_weights() {
        let p = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(weighted_prediction(&p, &[0.5, 0.6]).is_err());
        assert!(weighted_prediction(&p, &[1.5, -0.5]).is_err());
        assert!(weighted_prediction(&p, &[1.0]).is_err());
    }

    #[test]
    fn evaluate_counts_argmax() {
        let ds = LabeledDataset::new(vec![0.0; 4], [1, 1, 1], vec![0, 1, 2, 1], 3).unwrap();
        // constant prediction of class 1
        let acc = evaluate(|_| Ok(vec![0.2, 0.5, 0.3]), &ds).unwrap();
        assert_eq!(acc, 0.5);
        // ties go to the lowest class
        let acc = evaluate(|_| Ok(vec![0.4, 0.4, 0.2]), &ds).unwrap();
        assert_eq!(acc, 0.25);
        let empty = LabeledDataset::new(vec![], [1, 1, 1], vec![], 3).unwrap();
        assert!(evaluate(|_| Ok(vec![1.0]), &empty).is_err());
    }
}
