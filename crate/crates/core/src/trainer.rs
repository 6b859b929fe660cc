//! Fine-tuning of base encoder plus head under an epoch budget.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderWeights, TokenBatch};
use crate::error::{Error, Result};
use crate::head::{build_head, HeadModel};
use crate::nn::{adam_step, lr_at, AdamState, Graph, ParamStore, ScheduleSpec, SeqLayout, Var};
use crate::searchspace::{validate, HeadConfig};
use crate::tasks::{Split, TaskDataset};

/// Rows per forward pass when no gradients are needed.
const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    /// 3e-4 suits the small encoder trained here; 2e-5 is the usual value
    /// for fine-tuning a large pretrained encoder.
    pub base_lr: f64,
    pub warmup_frac: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 3e-4,
            warmup_frac: 0.1,
        }
    }
}

impl TrainSettings {
    fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::precondition("fine_tune", "batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::precondition(
                "fine_tune",
                format!("warmup_frac {} outside [0, 1)", self.warmup_frac),
            ));
        }
        Ok(())
    }
}

/// One evaluated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: u64,
    pub config: HeadConfig,
    pub budget_epochs: u32,
    pub seed: u64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub train_steps: u64,
    pub wall_ms: u64,
    pub bracket: Option<u32>,
    pub rung: Option<u32>,
}

/// Anything that maps padded id sequences to per-class scores.
pub trait Classify {
    fn logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

/// A fine-tuned base encoder with its head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub base: EncoderWeights,
    pub head: HeadModel,
}

impl Classify for Classifier {
    fn logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let feats = base_features(&self.base, seqs)?;
        let e = self.base.dims().dim;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in feats.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let p = bind_constant(&mut g, self.head.store())?;
            let (x, layout) = feature_batch(&mut g, chunk, e)?;
            let logits = self.head.forward(&mut g, &p, x, &layout)?;
            out.extend(g.value(logits).chunks(self.head.num_classes()).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Binds every tensor as a constant so no gradient buffers are kept.
fn bind_constant(g: &mut Graph, store: &ParamStore) -> Result<Vec<Var>> {
    store
        .tensors()
        .iter()
        .map(|t| g.constant(t.shape().to_vec(), t.data().to_vec()))
        .collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax matches the label.
pub fn evaluate(model: &impl Classify, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let logits = model.logits(&split.ids)?;
    let correct = logits
        .iter()
        .zip(&split.labels)
        .filter(|(l, &y)| argmax(l) == y)
        .count();
    Ok(correct as f64 / split.len() as f64)
}

/// Base outputs for each sequence, valid rows only, computed without
/// gradients.
fn base_features(base: &EncoderWeights, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    let e = base.dims().dim;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let batch = TokenBatch::new(chunk, base.dims().max_len)?;
        let mut g = Graph::new();
        let p = bind_constant(&mut g, base.store())?;
        let x = base.forward(&mut g, &p, &batch)?;
        let values = g.value(x);
        let len = batch.layout.len;
        for (i, &n) in batch.layout.lengths.iter().enumerate() {
            out.push(values[i * len * e..(i * len + n) * e].to_vec());
        }
    }
    Ok(out)
}

/// Packs cached features into a zero-padded `[batch·len, e]` constant.
fn feature_batch<S: AsRef<[f64]>>(g: &mut Graph, feats: &[S], e: usize) -> Result<(Var, Arc<SeqLayout>)> {
    let lengths: Vec<usize> = feats.iter().map(|f| f.as_ref().len() / e).collect();
    let len = lengths.iter().copied().max().unwrap_or(0);
    let mut data = vec![0.0; feats.len() * len * e];
    for (i, f) in feats.iter().enumerate() {
        let f = f.as_ref();
        data[i * len * e..i * len * e + f.len()].copy_from_slice(f);
    }
    let layout = Arc::new(SeqLayout::new(feats.len(), len, lengths)?);
    Ok((g.constant(vec![feats.len() * len, e], data)?, layout))
}

pub fn fine_tune(
    config: &HeadConfig,
    task: &TaskDataset,
    base: &EncoderWeights,
    budget_epochs: u32,
    seed: u64,
    settings: &TrainSettings,
) -> Result<Trial> {
    train_classifier(config, task, base, budget_epochs, seed, settings).map(|(_, t)| t)
}

/// Like [`fine_tune`], also returning the trained model.
pub fn train_classifier(
    config: &HeadConfig,
    task: &TaskDataset,
    base: &EncoderWeights,
    budget_epochs: u32,
    seed: u64,
    settings: &TrainSettings,
) -> Result<(Classifier, Trial)> {
    let started = Instant::now();
    settings.check()?;
    if budget_epochs == 0 {
        return Err(Error::precondition("fine_tune", "budget_epochs must be at least 1"));
    }
    for (name, split) in [("train", &task.train), ("val", &task.val), ("test", &task.test)] {
        if split.is_empty() {
            return Err(Error::Data(format!("task '{}' has an empty {name} split", task.name)));
        }
    }
    let e = base.dims().dim;
    validate(config, e)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = build_head(config, e, task.num_classes, &mut init_rng)?;
    let mut base = base.clone();
    base.set_frozen(config.freeze_base);

    let n = task.train.len();
    let steps_per_epoch = n.div_ceil(settings.batch_size);
    let total_steps = budget_epochs as u64 * steps_per_epoch as u64;
    let schedule = ScheduleSpec::with_warmup_fraction(settings.base_lr, total_steps, settings.warmup_frac)?;
    let mut head_adam = AdamState::new(head.store());
    let mut base_adam = AdamState::new(base.store());
    let cache = if config.freeze_base {
        Some(base_features(&base, &task.train.ids)?)
    } else {
        None
    };

    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..budget_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(settings.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| task.train.labels[i]).collect();
            let mut g = Graph::new();
            let ph = head.bind(&mut g);
            let (features, layout, pb) = match &cache {
                Some(cache) => {
                    let feats: Vec<&[f64]> = idx.iter().map(|&i| cache[i].as_slice()).collect();
                    let (x, layout) = feature_batch(&mut g, &feats, e)?;
                    (x, layout, None)
                }
                None => {
                    let seqs: Vec<&[u32]> = idx.iter().map(|&i| task.train.ids[i].as_slice()).collect();
                    let batch = TokenBatch::new(&seqs, base.dims().max_len)?;
                    let pb = base.bind(&mut g);
                    let x = base.forward(&mut g, &pb, &batch)?;
                    (x, Arc::clone(&batch.layout), Some(pb))
                }
            };
            let logits = head.forward(&mut g, &ph, features, &layout)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            let lr = lr_at(step, &schedule);
            head.store_mut().zero_grads();
            g.collect_grads(&ph, head.store_mut());
            adam_step(head.store_mut(), &mut head_adam, lr)?;
            if let Some(pb) = pb {
                base.store_mut().zero_grads();
                g.collect_grads(&pb, base.store_mut());
                adam_step(base.store_mut(), &mut base_adam, lr)?;
            }
            step += 1;
        }
    }
    head.store_mut().zero_grads();
    base.store_mut().zero_grads();

    let model = Classifier { base, head };
    let val_acc = evaluate(&model, &task.val)?;
    let test_acc = evaluate(&model, &task.test)?;
    log::debug!(
        "trained {} epochs ({step} steps): val {val_acc:.4} test {test_acc:.4}",
        budget_epochs
    );
    let trial = Trial {
        trial_id: 0,
        config: *config,
        budget_epochs,
        seed,
        val_acc,
        test_acc,
        train_steps: step,
        wall_ms: started.elapsed().as_millis() as u64,
        bracket: None,
        rung: None,
    };
    Ok((model, trial))
}
