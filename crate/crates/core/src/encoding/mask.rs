use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EncodedInput, DUMMY_VALUE, MASK};

pub const DEFAULT_MASK_PERCENT: f64 = 0.15;
pub const WINDOW_CHOICES: [usize; 3] = [1, 3, 5];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedInput {
    /// Input with code tokens replaced by the mask id and values by dummies.
    pub input: EncodedInput,
    /// Sorted masked positions.
    pub positions: Vec<usize>,
    pub original_tokens: Vec<u32>,
    pub original_values: Vec<[u16; 8]>,
}

impl MaskedInput {
    pub fn unmask(&self) -> EncodedInput {
        let mut e = self.input.clone();
        for (k, &p) in self.positions.iter().enumerate() {
            e.tokens[p] = self.original_tokens[k];
            e.values[p] = self.original_values[k];
        }
        e
    }

    /// An input with nothing masked.
    pub fn unmasked(e: &EncodedInput) -> MaskedInput {
        MaskedInput {
            input: e.clone(),
            positions: Vec::new(),
            original_tokens: Vec::new(),
            original_values: Vec::new(),
        }
    }

    /// Masks exactly the given positions.
    pub fn at(e: &EncodedInput, positions: &[usize]) -> MaskedInput {
        let mut positions = positions.to_vec();
        positions.sort_unstable();
        positions.dedup();
        let mut input = e.clone();
        let mut original_tokens = Vec::with_capacity(positions.len());
        let mut original_values = Vec::with_capacity(positions.len());
        for &p in &positions {
            original_tokens.push(e.tokens[p]);
            original_values.push(e.values[p]);
            input.tokens[p] = MASK;
            input.values[p] = DUMMY_VALUE;
        }
        MaskedInput {
            input,
            positions,
            original_tokens,
            original_values,
        }
    }
}

/// Masks round(percent * n) positions (at least one) by expanding random
/// centres to windows drawn from `windows`, clipping at the ends, and
/// trimming the last window so the total is exact.
pub fn apply_mask(e: &EncodedInput, percent: f64, windows: &[usize], seed: u64) -> MaskedInput {
    assert!(percent > 0.0 && percent < 1.0, "mask percent must be in (0, 1)");
    assert!(!windows.is_empty(), "no window sizes");
    let n = e.len();
    if n == 0 {
        return MaskedInput::unmasked(e);
    }
    let target = ((percent * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; n];
    let mut count = 0;
    while count < target {
        let free: Vec<usize> = (0..n).filter(|&i| !masked[i]).collect();
        let centre = *free.choose(&mut rng).expect("count < n");
        let w = *windows.choose(&mut rng).unwrap();
        let lo = centre.saturating_sub(w / 2);
        let hi = (centre + w / 2).min(n - 1);
        let mut fresh: Vec<usize> = (lo..=hi).filter(|&i| !masked[i]).collect();
        while count + fresh.len() > target {
            // Drop window edges first so the centre stays masked.
            let far = (0..fresh.len())
                .max_by_key(|&k| (fresh[k].abs_diff(centre), fresh[k]))
                .unwrap();
            fresh.remove(far);
        }
        for i in fresh {
            masked[i] = true;
            count += 1;
        }
    }
    let positions: Vec<usize> = (0..n).filter(|&i| masked[i]).collect();
    MaskedInput::at(e, &positions)
}
