//! Pre-classified sampling of training pairs.
//!
//! A pair of frames is a swap pair when the left-to-right identity order
//! differs between them. Swap pairs are rare in natural data, so the sampler
//! draws one with probability ρ and falls back to a uniform draw over all
//! pairs otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mask::CharacterMask;

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterPositions {
    pub frame: u32,
    /// (identity, centroid x normalized by frame width).
    pub entries: Vec<(u32, f64)>,
}

impl CharacterPositions {
    pub fn new(frame: u32, entries: Vec<(u32, f64)>) -> Result<Self> {
        let mut ids: Vec<u32> = entries.iter().map(|&(id, _)| id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::domain(format!("frame {frame}: duplicate identities")));
        }
        if entries.iter().any(|&(_, cx)| !cx.is_finite()) {
            return Err(Error::domain(format!("frame {frame}: non-finite centroid")));
        }
        Ok(CharacterPositions { frame, entries })
    }

    /// Positions from mask centroids; empty masks contribute no entry.
    pub fn from_masks(frame: u32, masks: &[CharacterMask]) -> Result<Self> {
        let mut entries = Vec::new();
        for m in masks {
            if let Some(cx) = m.centroid_x() {
                let (_, w) = m.resolution();
                entries.push((m.identity, cx / w as f64));
            }
        }
        CharacterPositions::new(frame, entries)
    }

    fn identity_set(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|&(id, _)| id).collect()
    }
}

/// Identities left to right; ties broken by smaller identity.
pub fn order_signature(p: &CharacterPositions) -> Result<Vec<u32>> {
    if p.entries.is_empty() {
        return Err(Error::domain(format!("frame {}: no characters", p.frame)));
    }
    let mut order = p.entries.clone();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(order.into_iter().map(|(id, _)| id).collect())
}

/// Candidate-pair policy: which ordered frame pairs are eligible.
#[derive(Debug, Clone, Copy)]
pub struct PairPolicy {
    /// Minimum |frame_a − frame_b|.
    pub min_distance: u32,
    /// Maximum |frame_a − frame_b|, unlimited when None.
    pub max_distance: Option<u32>,
}

impl Default for PairPolicy {
    fn default() -> Self {
        PairPolicy { min_distance: 1, max_distance: None }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PairIndex {
    /// Ordered (frame_a, frame_b) pairs whose left-to-right order differs.
    pub swap_pairs: Vec<(u32, u32)>,
    /// Every eligible ordered pair, swap pairs included.
    pub all_pairs: Vec<(u32, u32)>,
    /// Frames left out because their identity set differs from the clip cast.
    pub excluded_frames: Vec<u32>,
    pub warnings: Vec<String>,
}

impl PairIndex {
    pub fn is_swap(&self, pair: (u32, u32)) -> bool {
        self.swap_pairs.binary_search(&pair).is_ok()
    }
}

/// Classifies every eligible ordered frame pair. The clip cast is the most
/// common identity set (ties: the set seen earliest); frames with any other
/// identity set are excluded and reported.
pub fn classify_pairs(positions: &[CharacterPositions], policy: &PairPolicy) -> Result<PairIndex> {
    let mut index = PairIndex::default();
    if positions.is_empty() {
        index.warnings.push("no frames to classify".into());
        return Ok(index);
    }

    let mut casts: Vec<(BTreeSet<u32>, usize)> = Vec::new();
    for p in positions {
        let set = p.identity_set();
        match casts.iter_mut().find(|(s, _)| *s == set) {
            Some((_, n)) => *n += 1,
            None => casts.push((set, 1)),
        }
    }
    let cast = casts
        .iter()
        .max_by_key(|(_, n)| *n)
        .map(|(s, _)| s.clone())
        .expect("positions nonempty");

    let mut usable: Vec<&CharacterPositions> = Vec::new();
    for p in positions {
        if p.identity_set() == cast {
            usable.push(p);
        } else {
            index.excluded_frames.push(p.frame);
        }
    }
    if !index.excluded_frames.is_empty() {
        index.warnings.push(format!(
            "{} frame(s) excluded: identity set differs from clip cast",
            index.excluded_frames.len()
        ));
    }
    if usable.len() < 2 {
        index.warnings.push("fewer than 2 usable frames: empty pair index".into());
        return Ok(index);
    }

    let signatures: Vec<Vec<u32>> = usable
        .iter()
        .map(|p| order_signature(p))
        .collect::<Result<_>>()?;
    for (ai, a) in usable.iter().enumerate() {
        for (bi, b) in usable.iter().enumerate() {
            if ai == bi {
                continue;
            }
            let gap = a.frame.abs_diff(b.frame);
            if gap < policy.min_distance.max(1) {
                continue;
            }
            if policy.max_distance.is_some_and(|mx| gap > mx) {
                continue;
            }
            let pair = (a.frame, b.frame);
            index.all_pairs.push(pair);
            if signatures[ai] != signatures[bi] {
                index.swap_pairs.push(pair);
            }
        }
    }
    index.all_pairs.sort_unstable();
    index.swap_pairs.sort_unstable();
    Ok(index)
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Probability of drawing from the swap-pair pool.
    pub rho: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { rho: 0.3, seed: 0 }
    }
}

/// Draws training pairs: with probability ρ a uniform swap pair, otherwise a
/// uniform pair from the full pool. Owns its RNG, so a fixed seed and draw
/// sequence reproduce exactly.
pub struct PairSampler {
    index: PairIndex,
    rho: f64,
    rng: ChaCha8Rng,
    pub draws: u64,
    /// Draws that landed on a swap pair, whichever branch produced them.
    pub swap_draws: u64,
    /// Draws where the swap branch was selected but the pool was empty.
    pub fallback_draws: u64,
}

impl PairSampler {
    pub fn new(index: PairIndex, config: &SamplerConfig) -> Result<Self> {
        if index.all_pairs.is_empty() {
            return Err(Error::domain("sampler needs a nonempty pair pool"));
        }
        if !(0.0..=1.0).contains(&config.rho) {
            return Err(Error::domain(format!("rho must be in [0,1], got {}", config.rho)));
        }
        let mut warnings = Vec::new();
        if config.rho > 0.0 && index.swap_pairs.is_empty() {
            warnings.push("no swap pairs: falling back to uniform sampling".to_string());
        }
        let mut index = index;
        index.warnings.extend(warnings);
        Ok(PairSampler {
            index,
            rho: config.rho,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            draws: 0,
            swap_draws: 0,
            fallback_draws: 0,
        })
    }

    pub fn index(&self) -> &PairIndex {
        &self.index
    }

    pub fn draw(&mut self) -> (u32, u32) {
        let coin: f64 = self.rng.gen();
        let pool = if coin < self.rho && !self.index.swap_pairs.is_empty() {
            &self.index.swap_pairs
        } else {
            if coin < self.rho {
                self.fallback_draws += 1;
            }
            &self.index.all_pairs
        };
        let pair = pool[self.rng.gen_range(0..pool.len())];
        self.draws += 1;
        if self.index.is_swap(pair) {
            self.swap_draws += 1;
        }
        pair
    }

    pub fn swap_fraction(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.swap_draws as f64 / self.draws as f64
        }
    }
}
