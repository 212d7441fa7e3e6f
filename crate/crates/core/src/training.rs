//! Loss, training loop and evaluation.
//!
//! The loss on one element with probability `p` of the positive class is
//!
//! ```text
//! l = -w (1 - p_t)^gamma * ln(p_t),   p_t = p if y = 1 else 1 - p
//! ```
//!
//! averaged over the unmasked elements of a graph; a batch averages graph
//! losses. Batches are whole graphs, so neighbourhoods never cross scenes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{draw_epoch, importance_weights, ClassStats, Dataset, LabelConfig, Sample, Split, VariabilityLabel, VARIABILITY_NAMES};
use crate::embedding::{binary_matrix, fit_pca, EdgeConfig, EmbeddedGraph, PcaModel, TauSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VariabilityModel, NUM_OUTPUTS};
use crate::nn::{AdamConfig, Gradients, Mode, ParamStore};
use crate::par::{self, Execution};
use crate::rng::seeded;

pub const PROB_CLAMP: f64 = 1e-7;

const EPOCH_STREAM: u64 = 0xe90c;
const DROPOUT_STREAM: u64 = 0xd50f;

/// Resolved loss parameters. `class_weights[c] = [w_negative, w_positive]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub class_weights: [[f64; 2]; NUM_OUTPUTS],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            class_weights: [[1.0; 2]; NUM_OUTPUTS],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.class_weights.iter().flatten().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weights must be > 0, got {:?}", self.class_weights)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Positive weight `min(1 / positive rate, cap)` per type, negative weight 1.
    InverseFrequency { cap: f64 },
    Uniform,
    Fixed { weights: [[f64; 2]; NUM_OUTPUTS] },
}

impl Default for ClassWeighting {
    fn default() -> Self {
        ClassWeighting::InverseFrequency { cap: 20.0 }
    }
}

/// Loss settings as written in a config file; weights may depend on the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub gamma: f64,
    pub class_weights: ClassWeighting,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            class_weights: ClassWeighting::default(),
        }
    }
}

impl LossSpec {
    pub fn resolve(&self, stats: &ClassStats) -> Result<LossConfig> {
        let class_weights = match self.class_weights {
            ClassWeighting::Uniform => [[1.0; 2]; NUM_OUTPUTS],
            ClassWeighting::Fixed { weights } => weights,
            ClassWeighting::InverseFrequency { cap } => {
                if !(cap >= 1.0) {
                    return Err(Error::Config(format!("class weight cap must be >= 1, got {cap}")));
                }
                std::array::from_fn(|c| {
                    let rate = stats.positive_rate(c);
                    let w = if rate > 0.0 { (1.0 / rate).min(cap) } else { cap };
                    [1.0, w]
                })
            }
        };
        let cfg = LossConfig {
            gamma: self.gamma,
            class_weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss and `dl/dp` of a single element.
pub fn focal_element(p: f64, positive: bool, weight: f64, gamma: f64) -> (f64, f64) {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (pt, sign) = if positive { (p, 1.0) } else { (1.0 - p, -1.0) };
    let q = 1.0 - pt;
    let ln_pt = pt.ln();
    let loss = -weight * q.powf(gamma) * ln_pt;
    let focal_term = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * ln_pt };
    let dpt = weight * (focal_term - q.powf(gamma) / pt);
    (loss, sign * dpt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocalLoss {
    pub loss: f64,
    /// `dLoss/dp`, same shape as the probabilities.
    pub grad: Array2<f64>,
    pub unmasked: usize,
}

impl FocalLoss {
    /// Every element was masked; loss and gradient are zero by definition.
    pub fn all_masked(&self) -> bool {
        self.unmasked == 0
    }
}

/// Mean focal loss over the unmasked entries of an `N x 3` probability matrix.
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the returned gradient is
/// the analytic derivative evaluated at the clamped value.
pub fn focal_loss(probs: ArrayView2<f64>, labels: &[VariabilityLabel], cfg: &LossConfig) -> Result<FocalLoss> {
    if probs.ncols() != NUM_OUTPUTS {
        return Err(Error::dim("probability columns", NUM_OUTPUTS, probs.ncols()));
    }
    if probs.nrows() != labels.len() {
        return Err(Error::dim("label rows", probs.nrows(), labels.len()));
    }
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut total = 0.0;
    let mut unmasked = 0;
    for (i, l) in labels.iter().enumerate() {
        let (targets, masks) = (l.targets(), l.masks());
        for c in 0..NUM_OUTPUTS {
            if !masks[c] {
                continue;
            }
            let w = cfg.class_weights[c][targets[c] as usize];
            let (loss, d) = focal_element(probs[[i, c]], targets[c], w, cfg.gamma);
            total += loss;
            grad[[i, c]] = d;
            unmasked += 1;
        }
    }
    if unmasked == 0 {
        return Ok(FocalLoss {
            loss: 0.0,
            grad,
            unmasked,
        });
    }
    let scale = 1.0 / unmasked as f64;
    grad.mapv_inplace(|g| g * scale);
    Ok(FocalLoss {
        loss: total * scale,
        grad,
        unmasked,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.tn += o.tn;
        self.fn_ += o.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Metrics in percent.
    pub fn metrics(&self) -> Metrics {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics {
            accuracy: 100.0 * ratio(self.tp + self.tn, self.total()),
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * f1,
            support: self.total(),
        }
    }
}

/// Percentages; `support` counts unmasked elements.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: [Confusion; NUM_OUTPUTS],
    pub per_type: [Metrics; NUM_OUTPUTS],
    /// All three types pooled at the element level.
    pub pooled: Metrics,
    /// Accuracy of always predicting the pooled majority label.
    pub majority_accuracy: f64,
    /// Pooled precision/recall at thresholds 0.05, 0.10, ..., 0.95.
    pub thresholds: Vec<ThresholdPoint>,
    /// Mean focal loss per graph, when a loss configuration was supplied.
    pub loss: Option<f64>,
}

impl EvalReport {
    /// `variability,accuracy,precision,recall,f1,support` rows for the three
    /// types and the pooled total.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variability,accuracy,precision,recall,f1,support\n");
        let rows = VARIABILITY_NAMES.iter().zip(&self.per_type).chain(std::iter::once((&"pooled", &self.pooled)));
        for (name, m) in rows {
            writeln!(s, "{name},{:.4},{:.4},{:.4},{:.4},{}", m.accuracy, m.precision, m.recall, m.f1, m.support)
                .expect("string write");
        }
        s
    }

    pub fn thresholds_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f1\n");
        for t in &self.thresholds {
            writeln!(s, "{:.2},{:.4},{:.4},{:.4}", t.threshold, t.precision, t.recall, t.f1).expect("string write");
        }
        s
    }
}

/// Metrics from precomputed `N x 3` probability matrices, one per sample.
pub fn evaluate_probabilities(probs: &[Array2<f64>], samples: &[Sample], loss: Option<&LossConfig>) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    if probs.len() != samples.len() {
        return Err(Error::dim("probability matrices", samples.len(), probs.len()));
    }
    let sweep: Vec<f64> = (1..20).map(|k| k as f64 * 0.05).collect();
    let mut confusion = [Confusion::default(); NUM_OUTPUTS];
    let mut swept = vec![Confusion::default(); sweep.len()];
    let mut loss_total = 0.0;
    for (p, s) in probs.iter().zip(samples) {
        if p.nrows() != s.labels.len() || p.ncols() != NUM_OUTPUTS {
            return Err(Error::dim("probability rows", s.labels.len(), p.nrows()));
        }
        for (i, l) in s.labels.iter().enumerate() {
            let (t, m) = (l.targets(), l.masks());
            for c in 0..NUM_OUTPUTS {
                if m[c] {
                    confusion[c].add(p[[i, c]] >= 0.5, t[c]);
                    for (k, th) in sweep.iter().enumerate() {
                        swept[k].add(p[[i, c]] >= *th, t[c]);
                    }
                }
            }
        }
        if let Some(cfg) = loss {
            loss_total += focal_loss(p.view(), &s.labels, cfg)?.loss;
        }
    }
    let mut pooled = Confusion::default();
    for c in &confusion {
        pooled.merge(c);
    }
    let positives = pooled.tp + pooled.fn_;
    let total = pooled.total();
    let majority_accuracy = if total == 0 {
        0.0
    } else {
        100.0 * positives.max(total - positives) as f64 / total as f64
    };
    Ok(EvalReport {
        confusion,
        per_type: confusion.map(|c| c.metrics()),
        pooled: pooled.metrics(),
        majority_accuracy,
        thresholds: sweep
            .iter()
            .zip(&swept)
            .map(|(&threshold, c)| {
                let m = c.metrics();
                ThresholdPoint {
                    threshold,
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                }
            })
            .collect(),
        loss: loss.map(|_| loss_total / samples.len() as f64),
    })
}

/// Decisions at threshold 0.5; masked elements are excluded everywhere.
pub fn evaluate(model: &VariabilityModel, samples: &[Sample], exec: Execution) -> Result<EvalReport> {
    evaluate_with_loss(model, samples, None, exec)
}

pub fn evaluate_with_loss(
    model: &VariabilityModel,
    samples: &[Sample],
    loss: Option<&LossConfig>,
    exec: Execution,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    let probs = par::try_map(exec, samples, |s| model.predict_embedded(&model.embed(&s.input)?))?;
    evaluate_probabilities(&probs, samples, loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Draws per epoch; defaults to the number of training samples.
    pub samples_per_epoch: Option<usize>,
    /// Draw samples by importance weight (with replacement) instead of a
    /// plain shuffle.
    pub importance_sampling: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            patience: 20,
            samples_per_epoch: None,
            importance_sampling: true,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch_size and patience must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.samples_per_epoch == Some(0) {
            return Err(Error::Config("samples_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_pooled_f1: Option<f64>,
    pub val_metrics: Option<[Metrics; NUM_OUTPUTS]>,
    /// Graphs in this epoch whose elements were all masked.
    pub all_masked_graphs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_samples: usize,
    pub val_samples: usize,
    pub loss: LossConfig,
    pub tau: f64,
    pub pca_retained_variance: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

impl TrainReport {
    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Everything `train` needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub pca_dim: usize,
    pub tau: TauSpec,
    pub include_semantic_edges: bool,
    pub architecture: crate::model::Architecture,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub gate: crate::model::Gate,
    pub labels: LabelConfig,
    pub loss: LossSpec,
    pub train: TrainConfig,
}

impl Default for TrainSetup {
    fn default() -> Self {
        Self {
            pca_dim: 120,
            tau: TauSpec::default(),
            include_semantic_edges: true,
            architecture: Default::default(),
            hidden_dim: 64,
            dropout_rate: 0.2,
            gate: Default::default(),
            labels: LabelConfig::default(),
            loss: LossSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Fits PCA on the training scans and resolves `tau` on them. A `pca_dim`
/// larger than the encoding is reduced to the encoding width with a warning.
pub fn fit_preprocessing(dataset: &Dataset, setup: &TrainSetup) -> Result<(PcaModel, EdgeConfig)> {
    let train_scans: Vec<_> = dataset.scans_in(Split::Train).collect();
    if train_scans.is_empty() {
        return Err(Error::Training("the train split is empty".into()));
    }
    let data = binary_matrix(train_scans.iter().copied(), &dataset.taxonomy);
    let mut dim = setup.pca_dim;
    if dim > data.ncols() {
        log::warn!("pca_dim {dim} exceeds the encoding width {}; using {}", data.ncols(), data.ncols());
        dim = data.ncols();
    }
    let pca = fit_pca(&data, dim)?;
    let tau = setup.tau.resolve(train_scans.iter().copied());
    Ok((pca, EdgeConfig::new(tau, setup.include_semantic_edges)?))
}

/// Builds the model, fits preprocessing on the train split and trains on the
/// train split with validation-based selection.
pub fn train(dataset: &Dataset, setup: &TrainSetup) -> Result<(VariabilityModel, TrainReport)> {
    train_with_pca(dataset, setup, None)
}

/// Like [`train`], but reuses `pca` when given instead of fitting one. Its
/// input width must match the dataset taxonomy.
pub fn train_with_pca(
    dataset: &Dataset,
    setup: &TrainSetup,
    pca: Option<PcaModel>,
) -> Result<(VariabilityModel, TrainReport)> {
    setup.labels.validate()?;
    setup.train.validate()?;
    let (pca, edges) = match pca {
        Some(pca) => {
            if pca.input_dim() != dataset.taxonomy.binary_dim() {
                return Err(Error::dim("PCA input width", dataset.taxonomy.binary_dim(), pca.input_dim()));
            }
            let train_scans = dataset.scans_in(Split::Train);
            let tau = setup.tau.resolve(train_scans);
            (pca, EdgeConfig::new(tau, setup.include_semantic_edges)?)
        }
        None => fit_preprocessing(dataset, setup)?,
    };
    let config = ModelConfig {
        architecture: setup.architecture,
        input_dim: pca.dim,
        num_relations: dataset.taxonomy.num_relationships(),
        hidden_dim: setup.hidden_dim,
        dropout_rate: setup.dropout_rate,
        gate: setup.gate,
    };
    let model = VariabilityModel::new(config, dataset.taxonomy.clone(), pca, edges, setup.train.seed)?;
    let train_samples = dataset.samples(Split::Train, &setup.labels)?;
    let val_samples = dataset.samples(Split::Val, &setup.labels)?;
    let loss = setup.loss.resolve(&ClassStats::from_samples(&train_samples))?;
    train_model(model, &train_samples, &val_samples, &setup.train, &loss)
}

/// Loss and parameter gradient of one graph in train mode.
pub fn graph_gradient<R: rand::Rng>(
    model: &VariabilityModel,
    params: &crate::nn::Params,
    eg: &EmbeddedGraph,
    labels: &[VariabilityLabel],
    loss: &LossConfig,
    rng: &mut R,
) -> Result<(FocalLoss, Gradients)> {
    let (p, cache) = model.network.forward(params, eg, Mode::Train, rng)?;
    let fl = focal_loss(p.view(), labels, loss)?;
    let mut grads = Gradients::zeros_like(params);
    if !fl.all_masked() {
        model.network.backward(params, &mut grads, &cache, &fl.grad)?;
    }
    Ok((fl, grads))
}

/// Mean loss and gradient over a batch. Graphs are processed independently
/// (in parallel when enabled) and reduced in batch order, so the result does
/// not depend on the execution mode.
pub fn batch_gradient(
    model: &VariabilityModel,
    params: &crate::nn::Params,
    batch: &[(&EmbeddedGraph, &[VariabilityLabel])],
    loss: &LossConfig,
    seed: u64,
    stream: &[u64],
    exec: Execution,
) -> Result<(f64, Gradients, usize)> {
    let results = par::map_indexed(exec, batch, |k, (eg, labels)| {
        let mut path = stream.to_vec();
        path.push(k as u64);
        graph_gradient(model, params, eg, labels, loss, &mut seeded(seed, &path))
    });
    let mut total = Gradients::zeros_like(params);
    let mut loss_sum = 0.0;
    let mut all_masked = 0;
    for r in results {
        let (fl, g) = r?;
        loss_sum += fl.loss;
        all_masked += fl.all_masked() as usize;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss_sum * inv, total, all_masked))
}

fn better(f1: f64, loss: f64, best: Option<(f64, f64)>) -> bool {
    match best {
        None => true,
        Some((bf, bl)) => f1 > bf || (f1 == bf && loss < bl),
    }
}

/// Trains `model` in place of its parameters. With a validation set the
/// parameters of the epoch with the best pooled validation F1 (ties: lower
/// validation loss) are returned and training stops after `patience` epochs
/// without improvement; without one, the final parameters are returned.
pub fn train_model(
    mut model: VariabilityModel,
    train_samples: &[Sample],
    val_samples: &[Sample],
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<(VariabilityModel, TrainReport)> {
    cfg.validate()?;
    loss.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let exec = cfg.execution;
    let embedded = par::try_map(exec, train_samples, |s| model.embed(&s.input))?;
    let stats = ClassStats::from_samples(train_samples);
    let weights = importance_weights(train_samples, &stats);
    let per_epoch = cfg.samples_per_epoch.unwrap_or(train_samples.len());
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };

    let mut store = ParamStore::new(model.params.clone(), cfg.seed);
    let mut report = TrainReport {
        train_samples: train_samples.len(),
        val_samples: val_samples.len(),
        loss: *loss,
        tau: model.edge_config.tau,
        pca_retained_variance: model.pca.retained_variance(),
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        diverged: None,
    };
    let mut best: Option<(f64, f64)> = None;
    let mut best_params = store.params.clone();
    let mut since_best = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut rng = seeded(cfg.seed, &[EPOCH_STREAM, epoch as u64]);
        let order: Vec<usize> = if cfg.importance_sampling {
            draw_epoch(&weights, per_epoch, &mut rng)?
        } else {
            let mut o: Vec<usize> = (0..train_samples.len()).collect();
            o.shuffle(&mut rng);
            o.into_iter().cycle().take(per_epoch).collect()
        };
        let mut loss_sum = 0.0;
        let mut all_masked = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&EmbeddedGraph, &[VariabilityLabel])> = chunk
                .iter()
                .map(|&i| (&embedded[i], train_samples[i].labels.as_slice()))
                .collect();
            let stream = [DROPOUT_STREAM, epoch as u64, step as u64];
            let (l, g, masked) = batch_gradient(&model, &store.params, &batch, loss, cfg.seed, &stream, exec)?;
            if !l.is_finite() {
                report.diverged = Some(format!("non-finite loss at epoch {epoch}, step {step}"));
                break 'epochs;
            }
            store.grads = g;
            if let Err(e) = store.adam_step(&adam) {
                report.diverged = Some(format!("epoch {epoch}, step {step}: {e}"));
                break 'epochs;
            }
            loss_sum += l * chunk.len() as f64;
            all_masked += masked;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss: None,
            val_pooled_f1: None,
            val_metrics: None,
            all_masked_graphs: all_masked,
        };
        if val_samples.is_empty() {
            best_params = store.params.clone();
            report.best_epoch = epoch;
        } else {
            model.params = store.params.clone();
            let ev = evaluate_with_loss(&model, val_samples, Some(loss), exec)?;
            let vl = ev.loss.expect("loss requested");
            record.val_loss = Some(vl);
            record.val_pooled_f1 = Some(ev.pooled.f1);
            record.val_metrics = Some(ev.per_type);
            if better(ev.pooled.f1, vl, best) {
                best = Some((ev.pooled.f1, vl));
                best_params = store.params.clone();
                report.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log::info!(
            "epoch {epoch}: train_loss={:.5} val_loss={} val_f1={}",
            record.train_loss,
            record.val_loss.map_or("-".into(), |v| format!("{v:.5}")),
            record.val_pooled_f1.map_or("-".into(), |v| format!("{v:.2}"))
        );
        report.epochs.push(record);
        if !val_samples.is_empty() && since_best >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(msg) = &report.diverged {
        log::warn!("training diverged ({msg}); returning the last good parameters");
    }
    model.params = best_params;
    Ok((model, report))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
