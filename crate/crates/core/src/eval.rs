//! Per-timestep evaluation: cleaning, confusion matrices, precision/recall with binomial
//! uncertainties, and seed-disjoint cross-validation over the (cell, feature) grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureVariant, SequenceRecord, Split};
use crate::error::{Error, Result};
use crate::generate::{generate, GenerateConfig};
use crate::planner::{IntentionLabel, Scene};
use crate::rnn::{self, batch_steps, CellKind, RnnConfig, RnnModel};

/// Classes shown in the three-class view.
pub const REPORTED_CLASSES: usize = 3;

/// Drops every sequence that contains a CarFollow frame, and Stop frames too when
/// `drop_stop` is set.
pub fn clean_with(records: &[SequenceRecord], drop_stop: bool) -> Vec<SequenceRecord> {
    records
        .iter()
        .filter(|r| r.labels().all(|l| l != IntentionLabel::CarFollow && (!drop_stop || l != IntentionLabel::Stop)))
        .cloned()
        .collect()
}

pub fn clean(records: &[SequenceRecord]) -> Vec<SequenceRecord> {
    clean_with(records, true)
}

/// `counts[truth][pred]`, one entry per evaluated timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; classes]; classes] }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn truth_count(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted_count(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let t = self.total();
        (t > 0).then(|| (0..self.classes()).map(|c| self.counts[c][c]).sum::<u64>() as f64 / t as f64)
    }

    pub fn metrics(&self) -> Vec<ClassMetrics> {
        (0..self.classes())
            .map(|c| {
                let tp = self.counts[c][c];
                ClassMetrics::from_counts(c, tp, self.predicted_count(c), self.truth_count(c))
            })
            .collect()
    }
}

/// `sqrt(p (1 - p) / n)`.
pub fn binomial_err(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// A ratio with its binomial uncertainty; absent when the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub err: f64,
    pub n: u64,
}

impl Ratio {
    pub fn of(num: u64, n: u64) -> Option<Ratio> {
        (n > 0).then(|| {
            let value = num as f64 / n as f64;
            Ratio { value, err: binomial_err(value, n), n }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub precision: Option<Ratio>,
    pub recall: Option<Ratio>,
}

impl ClassMetrics {
    pub fn from_counts(class: usize, tp: u64, predicted: u64, truth: u64) -> Self {
        let name = IntentionLabel::from_index(class).map(|l| l.name().to_string()).unwrap_or_else(|| format!("class {class}"));
        ClassMetrics { class, name, precision: Ratio::of(tp, predicted), recall: Ratio::of(tp, truth) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub matrix: ConfusionMatrix,
    pub metrics: Vec<ClassMetrics>,
}

/// Feature view of `records` matching the model's input width.
fn model_view(model: &RnnModel, records: &[SequenceRecord]) -> Result<Vec<SequenceRecord>> {
    let want = FeatureVariant::from_dim(model.config.input_dim)
        .ok_or_else(|| Error::Shape(format!("model input dim {} is not a feature variant", model.config.input_dim)))?;
    records
        .iter()
        .map(|r| {
            if r.frames.len() != model.config.seq_len {
                return Err(Error::Shape(format!(
                    "sequence {} has {} frames, model expects {}",
                    r.sequence_id,
                    r.frames.len(),
                    model.config.seq_len
                )));
            }
            if r.variant == want {
                Ok(r.clone())
            } else if r.variant.dim() > want.dim() {
                r.project(want)
            } else {
                Err(Error::Shape(format!("model expects {want:?} features, data has {:?}", r.variant)))
            }
        })
        .collect()
}

/// Per-step predictions for each record, `[record][t]`.
pub fn predict_records(model: &RnnModel, records: &[SequenceRecord]) -> Result<Vec<Vec<usize>>> {
    let view = model_view(model, records)?;
    let (t_len, dim) = (model.config.seq_len, model.config.input_dim);
    let mut out = Vec::with_capacity(view.len());
    for chunk in view.chunks(256) {
        let feats: Vec<Vec<f64>> =
            chunk.iter().map(|r| r.frames.iter().flat_map(|f| f.features[..dim].iter().map(|&v| v as f64)).collect()).collect();
        let seqs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let preds = model.predict(&batch_steps(&seqs, t_len, dim))?;
        for b in 0..chunk.len() {
            out.push((0..t_len).map(|t| preds[t][b]).collect());
        }
    }
    Ok(out)
}

/// Per-timestep argmax evaluation over cleaned records.
pub fn evaluate(model: &RnnModel, records: &[SequenceRecord]) -> Result<Evaluation> {
    let classes = model.config.classes;
    let preds = predict_records(model, records)?;
    let mut matrix = ConfusionMatrix::new(classes);
    for (r, p) in records.iter().zip(&preds) {
        for (f, &pred) in r.frames.iter().zip(p) {
            let truth = f.label.index();
            if truth >= classes {
                return Err(Error::Data(format!("sequence {} carries {} which is not evaluated; clean first", r.sequence_id, f.label)));
            }
            matrix.add(truth, pred);
        }
    }
    let metrics = matrix.metrics();
    Ok(Evaluation { matrix, metrics })
}

/// One table block: a model configuration and its test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBlock {
    pub cell: CellKind,
    pub variant: FeatureVariant,
    pub seq_len: usize,
    pub scene: Scene,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub final_train_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub matrix: ConfusionMatrix,
    /// All classes.
    pub metrics: Vec<ClassMetrics>,
}

impl ReportBlock {
    /// Rows of the classes shown in the three-class view.
    pub fn three_class_view(&self) -> &[ClassMetrics] {
        &self.metrics[..REPORTED_CLASSES.min(self.metrics.len())]
    }

    pub fn class(&self, label: IntentionLabel) -> Option<&ClassMetrics> {
        self.metrics.get(label.index())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub blocks: Vec<ReportBlock>,
}

fn fmt_ratio(r: &Option<Ratio>) -> String {
    match r {
        Some(r) => format!("{:6.2} ± {:4.2}", 100.0 * r.value, 100.0 * r.err),
        None => format!("{:>13}", "n/a"),
    }
}

impl Report {
    pub fn block(&self, cell: CellKind, variant: FeatureVariant) -> Option<&ReportBlock> {
        self.blocks.iter().find(|b| b.cell == cell && b.variant == variant)
    }

    /// Human-readable table; `three_class` restricts rows to classes 0-2.
    pub fn render(&self, three_class: bool) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            let scene = match b.scene {
                Scene::Highway => "highway",
                Scene::Urban => "urban",
            };
            let _ = writeln!(
                s,
                "{} {:?} T={} {} (train {}, test {} sequences)",
                b.cell.name(),
                b.variant,
                b.seq_len,
                scene,
                b.train_sequences,
                b.test_sequences
            );
            let _ = writeln!(s, "  {:<3} {:<18} {:>15} {:>15}", "id", "intention", "precision %", "recall %");
            let rows = if three_class { b.three_class_view() } else { &b.metrics[..] };
            for m in rows {
                let _ = writeln!(s, "  {:<3} {:<18} {:>15} {:>15}", m.class, m.name, fmt_ratio(&m.precision), fmt_ratio(&m.recall));
            }
            if let Some(a) = b.accuracy {
                let _ = writeln!(s, "  per-step accuracy {:.2} %", 100.0 * a);
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossValidateConfig {
    pub generate: GenerateConfig,
    pub rnn: RnnConfig,
    pub cells: Vec<CellKind>,
    pub variants: Vec<FeatureVariant>,
    /// Also drop sequences containing Stop frames.
    pub drop_stop: bool,
}

impl Default for CrossValidateConfig {
    fn default() -> Self {
        CrossValidateConfig {
            generate: GenerateConfig::default(),
            rnn: RnnConfig::default(),
            cells: vec![CellKind::Lstm, CellKind::Gru],
            variants: vec![FeatureVariant::A2, FeatureVariant::A3],
            drop_stop: true,
        }
    }
}

/// Generates training data with `seeds[0]` and one test set per remaining seed, then
/// trains and evaluates every (cell, variant) combination. Test sets are pooled.
pub fn cross_validate(cfg: &CrossValidateConfig, seeds: &[u64]) -> Result<Report> {
    if seeds.len() < 2 {
        return Err(Error::config("seeds", "need a training seed and at least one test seed"));
    }
    if seeds[1..].contains(&seeds[0]) {
        return Err(Error::config("seeds", "test seeds must differ from the training seed"));
    }
    let mut train_cfg = cfg.generate.clone();
    train_cfg.train_seed = seeds[0];
    train_cfg.test_seed = seeds[0].wrapping_add(1);
    train_cfg.test_sequences = 0;
    let mut raw: Vec<SequenceRecord> = Vec::new();
    generate(&train_cfg, &mut raw)?;
    let train = clean_with(&raw, cfg.drop_stop);

    let mut test = Vec::new();
    for &seed in &seeds[1..] {
        let mut test_cfg = cfg.generate.clone();
        test_cfg.train_sequences = 0;
        test_cfg.test_seed = seed;
        test_cfg.train_seed = seed.wrapping_add(1);
        let mut raw: Vec<SequenceRecord> = Vec::new();
        generate(&test_cfg, &mut raw)?;
        test.extend(clean_with(&raw, cfg.drop_stop).into_iter().filter(|r| r.split == Split::Test));
    }
    grid_report(cfg, &train, &test)
}

/// Trains and evaluates every (cell, variant) combination on the given data.
pub fn grid_report(cfg: &CrossValidateConfig, train: &[SequenceRecord], test: &[SequenceRecord]) -> Result<Report> {
    let mut report = Report::default();
    for &cell in &cfg.cells {
        for &variant in &cfg.variants {
            let rnn_cfg = RnnConfig { cell, input_dim: variant.dim(), seq_len: cfg.generate.seq_len, ..cfg.rnn.clone() };
            let block = train_and_evaluate(&rnn_cfg, variant, cfg.generate.world.scene, train, test)?;
            report.blocks.push(block);
        }
    }
    Ok(report)
}

pub fn train_and_evaluate(
    rnn_cfg: &RnnConfig,
    variant: FeatureVariant,
    scene: Scene,
    train: &[SequenceRecord],
    test: &[SequenceRecord],
) -> Result<ReportBlock> {
    let train_view: Vec<SequenceRecord> = train.iter().map(|r| r.project(variant)).collect::<Result<_>>()?;
    log::info!("training {} {:?} on {} sequences", rnn_cfg.cell.name(), variant, train_view.len());
    let (model, log) = rnn::train(&train_view, rnn_cfg)?;
    let ev = evaluate(&model, test)?;
    Ok(ReportBlock {
        cell: rnn_cfg.cell,
        variant,
        seq_len: rnn_cfg.seq_len,
        scene,
        train_sequences: train_view.len(),
        test_sequences: test.len(),
        final_train_accuracy: log.final_accuracy(),
        accuracy: ev.matrix.accuracy(),
        matrix: ev.matrix,
        metrics: ev.metrics,
    })
}

/// k-fold robustness check over a single record set; the pooled confusion matrix of all
/// held-out folds is returned.
pub fn k_fold(rnn_cfg: &RnnConfig, records: &[SequenceRecord], k: usize) -> Result<Evaluation> {
    if k < 2 || k > records.len() {
        return Err(Error::config("k", "need 2 <= k <= number of records"));
    }
    let mut matrix = ConfusionMatrix::new(rnn_cfg.classes);
    for fold in 0..k {
        let (held, kept): (Vec<_>, Vec<_>) = records.iter().enumerate().partition(|(i, _)| i % k == fold);
        let kept: Vec<SequenceRecord> = kept.into_iter().map(|(_, r)| r.clone()).collect();
        let held: Vec<SequenceRecord> = held.into_iter().map(|(_, r)| r.clone()).collect();
        let (model, _) = rnn::train(&kept, rnn_cfg)?;
        matrix.merge(&evaluate(&model, &held)?.matrix);
    }
    let metrics = matrix.metrics();
    Ok(Evaluation { matrix, metrics })
}
