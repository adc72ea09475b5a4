use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::EncodedInput;
use crate::neural::{AdamConfig, Model, Tape, TrainError, Trainer};

pub const DEFAULT_MARGIN: f64 = 0.1;

/// A labelled pair of function indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairRef {
    pub a: usize,
    pub b: usize,
    pub y: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub accum: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            margin: DEFAULT_MARGIN,
            accum: 1,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains encoder and pooling head together on the cosine pair loss.
/// `inputs[i]` holds the static-code chunks of function `i`. No dropout.
pub fn finetune(
    model: &mut Model,
    inputs: &[Vec<EncodedInput>],
    pairs: &[PairRef],
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(&FinetuneStats, &Model),
) -> Result<Vec<FinetuneStats>, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Empty);
    }
    let batch = cfg.batch_size.max(1);
    let batches = pairs.len().div_ceil(batch);
    let mut trainer = Trainer::new(model, cfg.adam.clone(), cfg.lr, batches.div_ceil(cfg.accum.max(1)), cfg.accum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            // Each distinct function is encoded once per batch.
            let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
            for &p in chunk {
                for f in [pairs[p].a, pairs[p].b] {
                    let n = slot.len();
                    slot.entry(f).or_insert(n);
                }
            }
            let mut fns = vec![Vec::new(); slot.len()];
            for (&f, &s) in &slot {
                fns[s] = inputs[f].clone();
            }
            let mut tape = Tape::new();
            let emb = model.function_embeddings(&mut tape, &fns);
            let a = tape.rows(emb, chunk.iter().map(|&p| slot[&pairs[p].a]).collect());
            let b = tape.rows(emb, chunk.iter().map(|&p| slot[&pairs[p].b]).collect());
            let labels = chunk.iter().map(|&p| f64::from(pairs[p].y)).collect();
            let loss = tape.cosine_loss(a, b, labels, cfg.margin, 1.0 / chunk.len() as f64);
            total += tape.scalar(loss);
            let grads = tape.backward(loss, model.params.len());
            trainer.add(model, grads)?;
        }
        trainer.flush(model);
        let stats = FinetuneStats {
            epoch,
            mean_loss: total / batches as f64,
        };
        on_epoch(&stats, model);
        history.push(stats);
    }
    Ok(history)
}
