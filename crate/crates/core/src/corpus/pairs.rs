use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::transform::{apply_pipeline, PassKind, TransformPass};
use crate::ir::IrFunction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub id: String,
    /// Index into the source list.
    pub source: usize,
    pub function: IrFunction,
    pub pipeline: Vec<TransformPass>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: String,
    pub b: String,
    /// +1 similar, -1 dissimilar.
    pub y: i8,
    /// Passes that turn `a` into `b`; empty for dissimilar pairs.
    pub pipeline: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub sources: Vec<IrFunction>,
    pub source_split: Vec<Split>,
    pub variants: Vec<Variant>,
    pub pairs: Vec<Pair>,
}

#[derive(Clone, Debug)]
pub struct PairConfig {
    pub passes: Vec<PassKind>,
    /// Dissimilar pairs per similar pair.
    pub ratio: usize,
    pub train_fraction: f64,
    pub variants_per_source: usize,
    pub max_pipeline: usize,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            passes: PassKind::ALL.to_vec(),
            ratio: 5,
            train_fraction: 0.1,
            variants_per_source: 1,
            max_pipeline: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PairError {
    #[error("{split:?} split has {count} source(s); dissimilar pairs need at least 2")]
    InsufficientSources { split: Split, count: usize },
    #[error("no transform passes configured")]
    NoPasses,
}

impl PairDataset {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        if let Some(i) = self.sources.iter().position(|f| f.id == id) {
            return Some(self.source_split[i]);
        }
        self.variants
            .iter()
            .find(|v| v.id == id)
            .map(|v| self.source_split[v.source])
    }

    pub fn function(&self, id: &str) -> Option<&IrFunction> {
        self.sources
            .iter()
            .find(|f| f.id == id)
            .or_else(|| self.variants.iter().find(|v| v.id == id).map(|v| &v.function))
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &Pair> {
        self.pairs.iter().filter(move |p| p.split == split)
    }
}

/// Splits sources into train and test, derives transformed variants, and
/// pairs each source with its variants (similar) and with functions of other
/// sources in the same split (dissimilar). Function ids must be unique.
pub fn build_pairs(sources: &[IrFunction], cfg: &PairConfig) -> Result<PairDataset, PairError> {
    if cfg.passes.is_empty() {
        return Err(PairError::NoPasses);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = sources.len();
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut source_split = vec![Split::Test; n];
    for &i in &order[..n_train] {
        source_split[i] = Split::Train;
    }
    if cfg.ratio > 0 {
        for (split, count) in [(Split::Train, n_train), (Split::Test, n - n_train)] {
            if count == 1 || (n < 2 && split == Split::Test) {
                return Err(PairError::InsufficientSources { split, count });
            }
        }
    }

    let mut variants = Vec::new();
    for (s, f) in sources.iter().enumerate() {
        for k in 0..cfg.variants_per_source {
            let pipeline = sample_pipeline(&mut rng, f, cfg);
            let t = apply_pipeline(f, &pipeline);
            variants.push(Variant {
                id: format!("{}_v{k}", f.id),
                source: s,
                function: t.function.with_id(format!("{}_v{k}", f.id)),
                pipeline,
            });
        }
    }

    // Pool of (id, source) per split for drawing dissimilar partners.
    let mut pool: [Vec<(&str, usize)>; 2] = [Vec::new(), Vec::new()];
    let slot = |s: Split| if s == Split::Train { 0 } else { 1 };
    for (i, f) in sources.iter().enumerate() {
        pool[slot(source_split[i])].push((&f.id, i));
    }
    for v in &variants {
        pool[slot(source_split[v.source])].push((&v.id, v.source));
    }

    let mut pairs = Vec::new();
    for v in &variants {
        let split = source_split[v.source];
        let a = &sources[v.source].id;
        pairs.push(Pair {
            a: a.clone(),
            b: v.id.clone(),
            y: 1,
            pipeline: v.pipeline.iter().map(|p| p.to_string()).collect(),
            split,
        });
        let candidates: Vec<&(&str, usize)> =
            pool[slot(split)].iter().filter(|(_, s)| *s != v.source).collect();
        let anchors = [a.as_str(), v.id.as_str()];
        let mut seen = BTreeSet::new();
        for j in 0..cfg.ratio {
            let anchor = anchors[j % 2];
            let mut partner = candidates.choose(&mut rng).expect("checked above").0;
            // Prefer fresh partners while they last.
            for _ in 0..8 {
                if seen.insert((anchor, partner)) {
                    break;
                }
                partner = candidates.choose(&mut rng).expect("checked above").0;
            }
            pairs.push(Pair {
                a: anchor.to_string(),
                b: partner.to_string(),
                y: -1,
                pipeline: Vec::new(),
                split,
            });
        }
    }
    Ok(PairDataset {
        sources: sources.to_vec(),
        source_split,
        variants,
        pairs,
    })
}

fn sample_pipeline(rng: &mut ChaCha8Rng, f: &IrFunction, cfg: &PairConfig) -> Vec<TransformPass> {
    let max = cfg.max_pipeline.clamp(1, cfg.passes.len());
    let mut best = Vec::new();
    for _ in 0..8 {
        let len = rng.random_range(1..=max);
        let mut kinds = cfg.passes.clone();
        kinds.shuffle(rng);
        let pipeline: Vec<TransformPass> = kinds[..len]
            .iter()
            .map(|&k| TransformPass::new(k, rng.random()))
            .collect();
        let t = apply_pipeline(f, &pipeline);
        best = pipeline;
        if t.applied && t.function.instructions != f.instructions {
            break;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub seed: u64,
    pub fn_file: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub id: String,
    pub source: String,
    pub fn_file: String,
    pub pipeline: Vec<String>,
}

/// On-disk description of a corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub sources: Vec<SourceEntry>,
    pub variants: Vec<VariantEntry>,
    pub pairs: Vec<Pair>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{check_equivalence, gen_function, DEFAULT_SIZE};
    use crate::microtrace::TracerConfig;

    fn sources(n: u64) -> Vec<IrFunction> {
        (0..n)
            .map(|s| gen_function(s, DEFAULT_SIZE).with_id(format!("src{s:04}")))
            .collect()
    }

    #[test]
    fn ratio_split_and_disjointness() {
        let src = sources(100);
        let d = build_pairs(&src, &PairConfig::default()).unwrap();
        let pos = d.pairs.iter().filter(|p| p.y == 1).count();
        let neg = d.pairs.len() - pos;
        assert_eq!(d.pairs.len(), 600);
        assert!((90..=110).contains(&pos));
        assert!((neg as f64 / pos as f64 - 5.0).abs() <= 0.5);
        let train = d.pairs_in(Split::Train).count() as f64 / d.pairs.len() as f64;
        assert!((train - 0.1).abs() < 0.03, "{train}");
        let ids = |s: Split| -> BTreeSet<&str> {
            d.pairs_in(s).flat_map(|p| [p.a.as_str(), p.b.as_str()]).collect()
        };
        assert!(ids(Split::Train).is_disjoint(&ids(Split::Test)));
        for p in &d.pairs {
            assert_eq!(d.split_of(&p.a), Some(p.split));
            assert_eq!(d.split_of(&p.b), Some(p.split));
        }
    }

    #[test]
    fn labels_are_sound() {
        let src = sources(30);
        let cfg = PairConfig {
            train_fraction: 0.3,
            ..PairConfig::default()
        };
        let d = build_pairs(&src, &cfg).unwrap();
        let source_of = |id: &str| id.split('_').next().unwrap().to_string();
        let tc = TracerConfig::default();
        for p in &d.pairs {
            if p.y == 1 {
                assert_eq!(source_of(&p.a), source_of(&p.b));
                let passes: Vec<TransformPass> = p.pipeline.iter().map(|s| s.parse().unwrap()).collect();
                assert!(!passes.is_empty());
                let a = d.function(&p.a).unwrap();
                let t = apply_pipeline(a, &passes);
                assert_eq!(t.function.instructions, d.function(&p.b).unwrap().instructions);
                check_equivalence(a, &t, &[1, 2, 3], &tc).unwrap();
            } else {
                assert_ne!(source_of(&p.a), source_of(&p.b));
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let src = sources(20);
        let cfg = PairConfig {
            train_fraction: 0.5,
            seed: 9,
            ..PairConfig::default()
        };
        assert_eq!(build_pairs(&src, &cfg).unwrap(), build_pairs(&src, &cfg).unwrap());
    }

    #[test]
    fn too_few_sources() {
        let cfg = PairConfig::default();
        assert!(matches!(
            build_pairs(&sources(1), &cfg),
            Err(PairError::InsufficientSources { .. })
        ));
        let cfg = PairConfig {
            train_fraction: 0.5,
            ..cfg
        };
        assert!(matches!(
            build_pairs(&sources(3), &cfg),
            Err(PairError::InsufficientSources { count: 1, .. })
        ));
    }
}
