//! Losses, optimizers, metrics, and the staged two-stream training loops.
//!
//! Stages: each stream first trains alone against the scene label, then the
//! fusion parameters train with both backbones frozen; `end_to_end` unfreezes
//! everything.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{fused_forward, FusionModel};
use crate::gnn::{gnn_forward, GnnModel, GraphBatch};
use crate::params::{backward, ParamStore};
use crate::raster::ImageTensor;
use crate::scenegraph::{LabelMap, SceneGraph};
use crate::tensor::{Scalar, Tensor2D};
use crate::vision::{classify_on_tape, VitModel};

/// One training/evaluation sample: the extracted scene graph, the paired
/// image, and the scene label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub graph: SceneGraph,
    pub image: ImageTensor,
    pub label: usize,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean cross entropy over logit rows: logsumexp(row) − row[label].
pub fn cross_entropy<T: Scalar>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let (rows, cols) = logits.shape();
    if labels.len() != rows {
        return Err(Error::Data(format!(
            "{} labels for {} logit rows",
            labels.len(),
            rows
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {cols} classes"
        )));
    }
    logits
        .logsumexp_rows()?
        .sub(&logits.gather_cols(labels)?)?
        .mean_all()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Pixel-wise cross entropy between per-pixel class probabilities (one row
/// per pixel, raster order) and a ground-truth label map. A scoring loss
/// over already-normalized probabilities, not a training objective.
pub fn pixelwise_cross_entropy<T: Scalar>(
    pred_probs: &Tensor2D<T>,
    gt: &LabelMap,
    reduction: Reduction,
) -> Result<f64> {
    let pixels = gt.height() * gt.width();
    if pred_probs.rows() != pixels || pred_probs.cols() != gt.classes() {
        return Err(Error::ShapeMismatch {
            op: "pixelwise_cross_entropy",
            lhs_rows: pred_probs.rows(),
            lhs_cols: pred_probs.cols(),
            rhs_rows: pixels,
            rhs_cols: gt.classes(),
        });
    }
    let mut total = 0.0;
    for (i, &label) in gt.pixels().iter().enumerate() {
        let row = pred_probs.row(i);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateRow { row: i });
        }
        total -= row[label as usize].as_f64().ln();
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / pixels as f64,
    })
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Optimizer state for one parameter store. Adam moments are keyed by
/// parameter name and created lazily.
pub struct Optimizer<T: Scalar> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor2D<T>>,
    second_moment: BTreeMap<String, Tensor2D<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must not be negative".into()));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        })
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore<T>) {
        match self.kind {
            OptimizerKind::Sgd => self.sgd_step(params),
            OptimizerKind::Adam => self.adam_step(params),
        }
        params.zero_grads();
    }

    fn sgd_step(&mut self, params: &mut ParamStore<T>) {
        let lr = T::from_f64(self.learning_rate);
        let wd = T::from_f64(self.weight_decay);
        for (_, p) in params.iter_mut() {
            let grad = p.grad.data().to_vec();
            for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
                *w = *w - lr * (g + wd * *w);
            }
        }
    }

    fn adam_step(&mut self, params: &mut ParamStore<T>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = T::from_f64(self.learning_rate);
        let wd = T::from_f64(self.weight_decay);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let eps = T::from_f64(self.epsilon);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        for (name, p) in params.iter_mut() {
            let (rows, cols) = p.value.shape();
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor2D::zeros(rows, cols));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor2D::zeros(rows, cols));
            for i in 0..rows * cols {
                let w = p.value.data()[i];
                let g = p.grad.data()[i] + wd * w;
                let mi = b1 * m.data()[i] + (T::one() - b1) * g;
                let vi = b2 * v.data()[i] + (T::one() - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / c1) / ((vi / c2).sqrt() + eps);
                p.value.data_mut()[i] = w - lr * update;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and metrics
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GraphStream,
    ImageStream,
    Fusion,
    EndToEnd,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "graph_stream" => Ok(Stage::GraphStream),
            "image_stream" => Ok(Stage::ImageStream),
            "fusion" => Ok(Stage::Fusion),
            "end_to_end" => Ok(Stage::EndToEnd),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            stage: Stage::GraphStream,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must not be negative".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch metric rows plus a wall-clock total that stays out of the
/// serialized outputs so same-seed runs produce byte-identical files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsHistory {
    pub records: Vec<EpochRecord>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl MetricsHistory {
    pub fn push(&mut self, epoch: usize, split: &str, loss: f64, accuracy: f64) {
        debug_assert!((0.0..=1.0).contains(&accuracy));
        self.records.push(EpochRecord {
            epoch,
            split: split.to_string(),
            loss,
            accuracy,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{:.12},{:.6}\n",
                r.epoch, r.split, r.loss, r.accuracy
            ));
        }
        out
    }

    /// Final/best figures as a JSON document.
    pub fn summary_json(&self) -> String {
        let last = |split: &str| self.records.iter().filter(|r| r.split == split).next_back();
        let mut doc = serde_json::Map::new();
        if let Some(r) = last("train") {
            doc.insert("final_train_loss".into(), r.loss.into());
            doc.insert("final_train_accuracy".into(), r.accuracy.into());
        }
        if let Some(r) = last("test") {
            doc.insert("final_test_loss".into(), r.loss.into());
            doc.insert("final_test_accuracy".into(), r.accuracy.into());
        }
        if let Some(best) = self
            .records
            .iter()
            .filter(|r| r.split == "test")
            .map(|r| r.accuracy)
            .max_by(f64::total_cmp)
        {
            doc.insert("best_test_accuracy".into(), best.into());
        }
        doc.insert(
            "epochs".into(),
            self.records
                .iter()
                .map(|r| r.epoch)
                .max()
                .map_or(0, |e| e + 1)
                .into(),
        );
        serde_json::Value::Object(doc).to_string()
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.split == "test")
            .next_back()
            .map(|r| r.accuracy)
    }
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Exact-match top-1 accuracy of logit rows against labels.
pub fn accuracy<T: Scalar>(logits: &Tensor2D<T>, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Data("accuracy: label/logit count mismatch".into()));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax_row(logits.row(i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Numerically stabilized mean cross entropy of plain logit rows.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor2D<T>, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Data("loss: label/logit count mismatch".into()));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = logits.row(i);
        if l >= row.len() {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .map(|v| (v.as_f64() - max).exp())
                .sum::<f64>()
                .ln();
        total += lse - row[l].as_f64();
    }
    Ok(total / labels.len() as f64)
}

fn score<T: Scalar>(
    samples: &[Sample],
    mut logits_for: impl FnMut(&[&Sample]) -> Result<Tensor2D<T>>,
) -> Result<(f64, f64)> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let mut data = Vec::new();
    let mut cols = 0;
    for chunk in samples.chunks(64) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let logits = logits_for(&batch)?;
        cols = logits.cols();
        data.extend_from_slice(logits.data());
    }
    let logits = Tensor2D::new(samples.len(), cols, data)?;
    Ok((
        cross_entropy_value(&logits, &labels)?,
        accuracy(&logits, &labels)?,
    ))
}

// ---------------------------------------------------------------------------
// Stage loops
// ---------------------------------------------------------------------------

fn check_inputs(train: &[Sample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    Ok(())
}

fn finish(history: &mut MetricsHistory, start: std::time::Instant, epochs: usize) {
    history.wall_clock_secs = start.elapsed().as_secs_f64();
    let _ = writeln!(
        std::io::stderr(),
        "trained {epochs} epochs in {:.2}s",
        history.wall_clock_secs
    );
}

fn gnn_batch_logits<T: Scalar>(
    model: &GnnModel<T>,
    batch: &[&Sample],
) -> Result<(Tape<T>, Var<T>)> {
    let tape = Tape::new();
    let binding = model.params.bind(&tape);
    let graphs: Vec<&SceneGraph> = batch.iter().map(|s| &s.graph).collect();
    let gb = GraphBatch::from_graphs(&graphs)?;
    let logits = gnn_forward(&tape, &binding, &model.cfg, &gb)?.logits;
    Ok((tape, logits))
}

/// Trains the graph stream alone against the scene label.
pub fn train_gnn<T: Scalar>(
    model: &mut GnnModel<T>,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
) -> Result<MetricsHistory> {
    check_inputs(train, cfg)?;
    let start = std::time::Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = MetricsHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let tape = Tape::new();
            let binding = model.params.bind(&tape);
            let graphs: Vec<&SceneGraph> = batch.iter().map(|s| &s.graph).collect();
            let gb = GraphBatch::from_graphs(&graphs)?;
            let logits = gnn_forward(&tape, &binding, &model.cfg, &gb)?.logits;
            let loss = cross_entropy(&logits, &labels)?;
            backward(&loss, &mut model.params, &binding)?;
            opt.step(&mut model.params);
        }
        record_epoch(&mut history, epoch, train, test, |batch| {
            Ok(gnn_batch_logits(model, batch)?.1.value())
        })?;
    }
    finish(&mut history, start, cfg.epochs);
    Ok(history)
}

fn vit_batch_logits<T: Scalar>(
    tape: &Tape<T>,
    binding: &crate::params::Binding<T>,
    cfg: &crate::vision::VitConfig,
    batch: &[&Sample],
) -> Result<Var<T>> {
    let rows: Vec<Var<T>> = batch
        .iter()
        .map(|s| classify_on_tape(tape, binding, cfg, &s.image))
        .collect::<Result<_>>()?;
    concat_rows(&rows)
}

/// Trains the image stream alone against the scene label.
pub fn train_vit<T: Scalar>(
    model: &mut VitModel<T>,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
) -> Result<MetricsHistory> {
    check_inputs(train, cfg)?;
    let start = std::time::Instant::now();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = MetricsHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let tape = Tape::new();
            let binding = model.params.bind(&tape);
            let logits = vit_batch_logits(&tape, &binding, &model.cfg, &batch)?;
            let loss = cross_entropy(&logits, &labels)?;
            backward(&loss, &mut model.params, &binding)?;
            opt.step(&mut model.params);
        }
        record_epoch(&mut history, epoch, train, test, |batch| {
            let tape = Tape::new();
            let binding = model.params.bind(&tape);
            Ok(vit_batch_logits(&tape, &binding, &model.cfg, batch)?.value())
        })?;
    }
    finish(&mut history, start, cfg.epochs);
    Ok(history)
}

fn fused_batch_logits<'t, T: Scalar>(
    tape: &'t Tape<T>,
    gnn: &GnnModel<T>,
    vit: &VitModel<T>,
    fusion: &FusionModel<T>,
    batch: &[&Sample],
) -> Result<(
    Var<T>,
    crate::params::Binding<T>,
    crate::params::Binding<T>,
    crate::params::Binding<T>,
)> {
    let gb = gnn.params.bind(tape);
    let vb = vit.params.bind(tape);
    let fb = fusion.params.bind(tape);
    let graphs: Vec<&SceneGraph> = batch.iter().map(|s| &s.graph).collect();
    let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.image).collect();
    let out = fused_forward(
        tape,
        &gnn.cfg,
        &gb,
        &vit.cfg,
        &vb,
        &fusion.cfg,
        &fb,
        &graphs,
        &images,
    )?;
    Ok((out.logits, gb, vb, fb))
}

/// Trains the fused pipeline. `Stage::Fusion` (the default protocol)
/// updates only the fusion parameters, leaving both backbones bit-identical;
/// `Stage::EndToEnd` updates everything.
pub fn train_fusion<T: Scalar>(
    gnn: &mut GnnModel<T>,
    vit: &mut VitModel<T>,
    fusion: &mut FusionModel<T>,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
) -> Result<MetricsHistory> {
    check_inputs(train, cfg)?;
    if fusion.cfg.mode.is_vote() {
        return Err(Error::Config(
            "vote fusion has no trainable parameters; train the streams instead".into(),
        ));
    }
    let end_to_end = cfg.stage == Stage::EndToEnd;
    let start = std::time::Instant::now();
    let mut opt_f = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)?;
    let mut opt_g = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)?;
    let mut opt_v = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = MetricsHistory::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let tape = Tape::new();
            let (logits, gb, vb, fb) = fused_batch_logits(&tape, gnn, vit, fusion, &batch)?;
            let loss = cross_entropy(&logits, &labels)?;
            let grads = loss.backward()?;
            for (name, var) in fb.iter() {
                fusion.params.get_mut(name)?.grad.add_assign(&grads.get(var));
            }
            if end_to_end {
                for (name, var) in gb.iter() {
                    gnn.params.get_mut(name)?.grad.add_assign(&grads.get(var));
                }
                for (name, var) in vb.iter() {
                    vit.params.get_mut(name)?.grad.add_assign(&grads.get(var));
                }
            }
            opt_f.step(&mut fusion.params);
            if end_to_end {
                opt_g.step(&mut gnn.params);
                opt_v.step(&mut vit.params);
            }
        }
        record_epoch(&mut history, epoch, train, test, |batch| {
            let tape = Tape::new();
            Ok(fused_batch_logits(&tape, gnn, vit, fusion, batch)?.0.value())
        })?;
    }
    finish(&mut history, start, cfg.epochs);
    Ok(history)
}

fn record_epoch<T: Scalar>(
    history: &mut MetricsHistory,
    epoch: usize,
    train: &[Sample],
    test: &[Sample],
    mut logits_for: impl FnMut(&[&Sample]) -> Result<Tensor2D<T>>,
) -> Result<()> {
    let (loss, acc) = score(train, &mut logits_for)?;
    history.push(epoch, "train", loss, acc);
    if !test.is_empty() {
        let (loss, acc) = score(test, &mut logits_for)?;
        history.push(epoch, "test", loss, acc);
    }
    Ok(())
}

/// Top-1 evaluation of an arbitrary logit function over a dataset.
pub fn evaluate<T: Scalar>(
    samples: &[Sample],
    logits_for: impl FnMut(&[&Sample]) -> Result<Tensor2D<T>>,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    score(samples, logits_for)
}
