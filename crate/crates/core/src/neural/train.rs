use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::model::{Model, BYTE_CLASSES};
use super::optim::{AdamConfig, AdamW, Schedule, WARMUP_INIT_LR};
use super::tape::{softmax_rows, Gradients, Tape};
use crate::encoding::{apply_mask, EncodedInput, MaskedInput, DEFAULT_MASK_PERCENT, WINDOW_CHOICES};
use crate::microtrace::splitmix64;

/// Masked-LM objective summed over masked positions: code cross-entropy
/// plus `alpha` times the byte cross-entropies that have a target.
pub fn pretrain_loss(code_ce: &[f64], byte_ce: &[[Option<f64>; 8]], alpha: f64) -> f64 {
    code_ce
        .iter()
        .zip(byte_ce)
        .map(|(c, bytes)| c + alpha * bytes.iter().flatten().sum::<f64>())
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub accum: usize,
    pub mask_percent: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            accum: 1,
            mask_percent: DEFAULT_MASK_PERCENT,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("no training data")]
    Empty,
    #[error("non-finite gradient in {0}")]
    NonFinite(String),
}

/// Seed for masking sequence `index` in `epoch`.
pub fn mask_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((epoch as u64) << 32) ^ index as u64))
}

/// Drives optimizer steps with accumulation and warmup.
pub struct Trainer {
    pub opt: AdamW,
    pub schedule: Schedule,
    accum: usize,
    pending: Option<Gradients>,
    pending_count: usize,
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: &Model, adam: AdamConfig, lr: f64, warmup_steps: usize, accum: usize) -> Trainer {
        Trainer {
            opt: AdamW::new(&model.params, adam),
            schedule: Schedule {
                init: WARMUP_INIT_LR,
                peak: lr,
                warmup_steps,
            },
            accum: accum.max(1),
            pending: None,
            pending_count: 0,
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.steps)
    }

    /// Adds one batch's gradients; steps once `accum` batches are pending.
    pub fn add(&mut self, model: &mut Model, grads: Gradients) -> Result<(), TrainError> {
        if let Some(name) = grads.first_non_finite(&model.params) {
            return Err(TrainError::NonFinite(name.to_string()));
        }
        match &mut self.pending {
            Some(p) => p.add_assign(grads),
            None => self.pending = Some(grads),
        }
        self.pending_count += 1;
        if self.pending_count >= self.accum {
            self.flush(model);
        }
        Ok(())
    }

    pub fn flush(&mut self, model: &mut Model) {
        if let Some(mut g) = self.pending.take() {
            g.scale(1.0 / self.pending_count as f64);
            let lr = self.lr();
            self.opt.step(&mut model.params, &g, lr);
            self.steps += 1;
        }
        self.pending_count = 0;
    }
}

/// Masked-LM pretraining. Every epoch re-masks each sequence with a fresh
/// seed and visits sequences in a seeded random order. The learning rate
/// warms up over the first epoch.
pub fn pretrain(
    model: &mut Model,
    data: &[EncodedInput],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Model),
) -> Result<Vec<EpochStats>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let batch = cfg.batch_size.max(1);
    let batches_per_epoch = data.len().div_ceil(batch);
    let warmup = batches_per_epoch.div_ceil(cfg.accum.max(1));
    let mut trainer = Trainer::new(model, cfg.adam.clone(), cfg.lr, warmup, cfg.accum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let masked: Vec<MaskedInput> = order
            .iter()
            .map(|&i| apply_mask(&data[i], cfg.mask_percent, &WINDOW_CHOICES, mask_seed(cfg.seed, epoch, i)))
            .collect();
        let mut total = 0.0;
        let mut lr_sum = 0.0;
        for chunk in masked.chunks(batch) {
            let refs: Vec<&MaskedInput> = chunk.iter().collect();
            let mut tape = Tape::new();
            let g = model.pretrain_graph(&mut tape, &refs, Some(&mut drop_rng));
            total += tape.scalar(g.loss);
            lr_sum += trainer.lr();
            let grads = tape.backward(g.loss, model.params.len());
            trainer.add(model, grads)?;
        }
        trainer.flush(model);
        let stats = EpochStats {
            epoch,
            mean_loss: total / batches_per_epoch as f64,
            lr: lr_sum / batches_per_epoch as f64,
        };
        on_epoch(&stats, model);
        history.push(stats);
    }
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    pub code: f64,
    pub byte: f64,
    pub combined: f64,
    pub code_targets: usize,
    pub byte_targets: usize,
}

/// exp of the mean cross-entropy over masked targets, for code tokens,
/// value bytes, and both pooled.
pub fn perplexity(model: &Model, data: &[MaskedInput]) -> Perplexity {
    let (mut code_sum, mut byte_sum) = (0.0, 0.0);
    let (mut code_n, mut byte_n) = (0usize, 0usize);
    for chunk in data.chunks(16) {
        let refs: Vec<&MaskedInput> = chunk.iter().collect();
        let mut tape = Tape::new();
        let g = model.pretrain_graph(&mut tape, &refs, None);
        let c = tape.cross_entropy(g.outputs.code_logits, g.code_targets.clone(), model.vocab_size, 1.0);
        code_sum += tape.scalar(c);
        code_n += g.code_targets.iter().flatten().count();
        for j in 0..8 {
            let t = g.byte_targets[j].clone();
            byte_n += t.iter().flatten().count();
            let b = tape.cross_entropy(g.outputs.byte_logits[j], t, BYTE_CLASSES, 1.0);
            byte_sum += tape.scalar(b);
        }
    }
    let ppl = |s: f64, n: usize| if n == 0 { f64::NAN } else { (s / n as f64).exp() };
    Perplexity {
        code: ppl(code_sum, code_n),
        byte: ppl(byte_sum, byte_n),
        combined: ppl(code_sum + byte_sum, code_n + byte_n),
        code_targets: code_n,
        byte_targets: byte_n,
    }
}

/// Predicted distributions at the masked positions of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub position: usize,
    pub code: Vec<f64>,
    pub bytes: [Vec<f64>; 8],
}

pub fn predict_masked(model: &Model, m: &MaskedInput) -> Vec<MaskPrediction> {
    let mut tape = Tape::new();
    let enc = model.encode(&mut tape, &[&m.input], None);
    let out = model.mlm_heads(&mut tape, enc.hidden, m.positions.clone());
    let code = softmax_rows(tape.value(out.code_logits).view(), model.vocab_size);
    let bytes: [_; 8] = std::array::from_fn(|j| softmax_rows(tape.value(out.byte_logits[j]).view(), BYTE_CLASSES));
    m.positions
        .iter()
        .enumerate()
        .map(|(k, &position)| MaskPrediction {
            position,
            code: code.row(k).to_vec(),
            bytes: std::array::from_fn(|j| bytes[j].row(k).to_vec()),
        })
        .collect()
}
