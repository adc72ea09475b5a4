//! Synthetic functions, semantics-preserving transforms and labelled pairs.

mod generate;
pub(crate) mod lift;
mod pairs;
mod transform;

pub use generate::{gen_function, DEFAULT_SIZE};
pub use pairs::{
    build_pairs, CorpusManifest, Pair, PairConfig, PairDataset, PairError, SourceEntry, Split, Variant,
    VariantEntry,
};
pub use transform::{
    apply_pipeline, apply_transform, check_equivalence, EquivalenceFailure, PassKind, PassSpecError,
    RegisterMap, TransformPass, Transformed,
};
