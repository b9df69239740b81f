use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_steps, Params, RnnConfig, RnnModel};
use crate::dataset::SequenceRecord;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let groups = grads.groups();
        for (((p, m), v), (_, g)) in params.groups_mut().into_iter().zip(self.m.groups_mut()).zip(self.v.groups_mut()).zip(groups) {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Per-step accuracy on the training batches, measured before each update.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

/// Mini-batch training from a fresh model. Deterministic for a given config and input order.
pub fn train(records: &[SequenceRecord], config: &RnnConfig) -> Result<(RnnModel, TrainingLog)> {
    let mut model = RnnModel::new(config.clone())?;
    let log = continue_training(&mut model, records, config.epochs)?;
    Ok((model, log))
}

/// Runs `epochs` more epochs on an existing model with a fresh optimiser.
pub fn continue_training(model: &mut RnnModel, records: &[SequenceRecord], epochs: usize) -> Result<TrainingLog> {
    let cfg = model.config.clone();
    let (t_len, dim) = (cfg.seq_len, cfg.input_dim);
    let mut feats: Vec<Vec<f64>> = Vec::with_capacity(records.len());
    let mut labels: Vec<Vec<usize>> = Vec::with_capacity(records.len());
    for rec in records {
        if rec.frames.len() != t_len {
            return Err(Error::Shape(format!("sequence {} has {} frames, model expects {t_len}", rec.sequence_id, rec.frames.len())));
        }
        if rec.variant.dim() != dim {
            return Err(Error::Shape(format!("sequence {} has feature dim {}, model expects {dim}", rec.sequence_id, rec.variant.dim())));
        }
        let mut f = Vec::with_capacity(t_len * dim);
        let mut l = Vec::with_capacity(t_len);
        for fr in &rec.frames {
            f.extend(fr.features[..dim].iter().map(|&v| v as f64));
            let c = fr.label.index();
            if c >= cfg.classes {
                return Err(Error::Data(format!("sequence {} carries untrainable label {}", rec.sequence_id, fr.label)));
            }
            l.push(c);
        }
        feats.push(f);
        labels.push(l);
    }
    if feats.is_empty() || epochs == 0 {
        return Err(Error::Data("training needs at least one batch".into()));
    }

    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_BA7C4);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut log = TrainingLog::default();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut count) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[f64]> = chunk.iter().map(|&i| feats[i].as_slice()).collect();
            let xs = batch_steps(&seqs, t_len, dim);
            let ys: Vec<Vec<usize>> = (0..t_len).map(|t| chunk.iter().map(|&i| labels[i][t]).collect()).collect();
            let (loss, mut grads, trace) = model.backward(&xs, &ys)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Training { epoch, reason: format!("loss became {loss}") });
            }
            let norm = grads.norm();
            if norm > cfg.clip_norm {
                grads.scale(cfg.clip_norm / norm);
            }
            opt.step(&mut model.params, &grads);
            for (pred, truth) in trace.predictions().iter().zip(&ys) {
                correct += pred.iter().zip(truth).filter(|(p, t)| p == t).count();
            }
            count += chunk.len() * t_len;
            loss_sum += loss * (chunk.len() * t_len) as f64;
        }
        let entry = EpochLog { epoch, loss: loss_sum / count as f64, accuracy: correct as f64 / count as f64 };
        log::info!("epoch {:>3}  loss {:.5}  accuracy {:.4}", entry.epoch, entry.loss, entry.accuracy);
        log.epochs.push(entry);
    }
    if !model.params.all_finite() {
        return Err(Error::Training { epoch: epochs, reason: "parameters are not finite".into() });
    }
    Ok(log)
}
