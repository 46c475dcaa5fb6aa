//! Span-infilling and token-flip noise for the denoising objective.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};

use crate::math::{ceil, sqrt};
use crate::rng::Rng;
use crate::tokenizer::{TokenSeq, Vocab, MASK, NUM_SPECIAL, UNK};

/// Slack applied before rounding token counts up, so that `0.1 * 30`
/// counts as 3 and not 4.
const COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CorruptError {
    #[error("random_mask {random_mask} exceeds mask_token_budget {budget}")]
    BudgetInconsistent { budget: f64, random_mask: f64 },
    #[error("{name} must lie in [0, 1], got {value}")]
    FractionOutOfRange { name: &'static str, value: f64 },
    #[error("poisson_lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("no corrupted pairs to summarize")]
    EmptyStream,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct NoiseConfig {
    /// Fraction of content tokens that may be changed or masked.
    pub mask_token_budget: f64,
    /// Share of the budget spent on single-token flips.
    pub random_mask: f64,
    /// Mean infill span length.
    pub poisson_lambda: f64,
    /// Replace half of the flips by random tokens instead of `<mask>`.
    pub randomize_tokens: bool,
    pub rng_seed: u64,
}

impl NoiseConfig {
    /// Budget 0.20, random_mask 0.10, λ 3.5, no random substitution.
    pub const fn recommended() -> Self {
        NoiseConfig {
            mask_token_budget: 0.20,
            random_mask: 0.10,
            poisson_lambda: 3.5,
            randomize_tokens: false,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), CorruptError> {
        for (name, value) in [("mask_token_budget", self.mask_token_budget), ("random_mask", self.random_mask)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CorruptError::FractionOutOfRange { name, value });
            }
        }
        if self.random_mask > self.mask_token_budget {
            return Err(CorruptError::BudgetInconsistent {
                budget: self.mask_token_budget,
                random_mask: self.random_mask,
            });
        }
        if !(self.poisson_lambda > 0.0 && self.poisson_lambda.is_finite()) {
            return Err(CorruptError::InvalidLambda(self.poisson_lambda));
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::recommended()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MaskAction {
    Infill,
    Flip,
    Randomize,
}

/// One noising action, in target coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskSpan {
    pub start: usize,
    pub len: usize,
    pub action: MaskAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedPair {
    pub source: TokenSeq,
    pub target: TokenSeq,
    /// Sorted by start.
    pub mask_report: Vec<MaskSpan>,
    /// Content tokens eligible for corruption.
    pub n_corruptible: usize,
}

impl CorruptedPair {
    /// Original tokens touched by any action.
    pub fn affected(&self) -> usize {
        self.mask_report.iter().map(|s| s.len).sum()
    }
}

/// Tokens the noiser may touch: every non-special id plus `<unk>`.
fn corruptible(id: u32) -> bool {
    !Vocab::is_special(id) || id == UNK
}

fn count(frac: f64, n: usize) -> usize {
    ceil(frac * n as f64 - COUNT_EPS).max(0.0) as usize
}

/// Corrupts one sequence.
///
/// With n content tokens, B = ceil(budget·n) tokens are affected:
/// F = ceil(random_mask·n) single-token flips and B − F tokens removed in
/// Poisson-length spans, each span collapsing to one `<mask>`. With
/// `randomize_tokens`, ⌊F/2⌋ flips substitute a uniformly drawn
/// non-special token other than the original. `vocab_size` bounds that
/// draw. Sequences without content come back unchanged.
pub fn corrupt(
    ids: &TokenSeq,
    cfg: &NoiseConfig,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<CorruptedPair, CorruptError> {
    cfg.validate()?;
    let len = ids.ids.len();
    let eligible: Vec<bool> = ids.ids.iter().map(|&id| corruptible(id)).collect();
    let n = eligible.iter().filter(|&&e| e).count();
    let unchanged = |n| CorruptedPair { source: ids.clone(), target: ids.clone(), mask_report: Vec::new(), n_corruptible: n };
    if n == 0 {
        return Ok(unchanged(0));
    }
    let budget = count(cfg.mask_token_budget, n);
    let flips = count(cfg.random_mask, n).min(budget);
    let mut remaining = budget - flips;

    let mut covered = vec![false; len];
    let mut report: Vec<MaskSpan> = Vec::new();
    let poisson = Poisson::new(cfg.poisson_lambda).map_err(|_| CorruptError::InvalidLambda(cfg.poisson_lambda))?;
    let positions: Vec<usize> = (0..len).filter(|&i| eligible[i]).collect();
    while remaining > 0 {
        let mut span = loop {
            let l = poisson.sample(rng) as usize;
            if l > 0 {
                break l.min(remaining);
            }
        };
        let start = loop {
            if let Some(s) = place(&positions, &eligible, &covered, span, 10 * n, rng) {
                break Some(s);
            }
            span -= 1;
            if span == 0 {
                break None;
            }
        };
        let Some(start) = start else { break };
        covered[start..start + span].iter_mut().for_each(|c| *c = true);
        report.push(MaskSpan { start, len: span, action: MaskAction::Infill });
        remaining -= span;
    }

    let free: Vec<usize> = positions.iter().copied().filter(|&p| !covered[p]).collect();
    let picks = index::sample(rng, free.len(), flips.min(free.len())).into_vec();
    let n_random = if cfg.randomize_tokens { picks.len() / 2 } else { 0 };
    let mut replacement: BTreeMap<usize, u32> = BTreeMap::new();
    let non_special = vocab_size.saturating_sub(NUM_SPECIAL);
    for (k, &pi) in picks.iter().enumerate() {
        let p = free[pi];
        let original = ids.ids[p];
        let mut action = MaskAction::Flip;
        let mut new_id = MASK;
        if k < n_random && non_special >= 2 {
            let orig_rank = (original as usize).checked_sub(NUM_SPECIAL).filter(|&r| r < non_special);
            let choices = non_special - usize::from(orig_rank.is_some());
            let mut r = rng.gen_range(0..choices);
            if orig_rank.is_some_and(|o| r >= o) {
                r += 1;
            }
            new_id = (r + NUM_SPECIAL) as u32;
            action = MaskAction::Randomize;
        }
        replacement.insert(p, new_id);
        report.push(MaskSpan { start: p, len: 1, action });
    }
    report.sort_by_key(|s| s.start);

    let mut source = TokenSeq::default();
    let mut spans = report.iter().filter(|s| s.action == MaskAction::Infill).peekable();
    let mut i = 0;
    while i < len {
        if let Some(s) = spans.next_if(|s| s.start == i) {
            source.ids.push(MASK);
            source.offsets.push((ids.offsets[i].0, ids.offsets[i + s.len - 1].1));
            i += s.len;
            continue;
        }
        source.ids.push(replacement.get(&i).copied().unwrap_or(ids.ids[i]));
        source.offsets.push(ids.offsets[i]);
        i += 1;
    }
    Ok(CorruptedPair { source, target: ids.clone(), mask_report: report, n_corruptible: n })
}

/// Rejection-samples a start whose `span` positions are all eligible and
/// uncovered.
fn place(
    positions: &[usize],
    eligible: &[bool],
    covered: &[bool],
    span: usize,
    attempts: usize,
    rng: &mut Rng,
) -> Option<usize> {
    let ok = |s: usize| s + span <= eligible.len() && (s..s + span).all(|p| eligible[p] && !covered[p]);
    for _ in 0..attempts {
        let s = positions[rng.gen_range(0..positions.len())];
        if ok(s) {
            return Some(s);
        }
    }
    None
}

/// [`corrupt`] with the rng stream derived from `(cfg.rng_seed, index)`,
/// so a corpus corrupts identically in any processing order.
pub fn corrupt_indexed(
    ids: &TokenSeq,
    cfg: &NoiseConfig,
    vocab_size: usize,
    index: u64,
) -> Result<CorruptedPair, CorruptError> {
    corrupt(ids, cfg, vocab_size, &mut crate::rng::derived(cfg.rng_seed, index))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorruptionStats {
    pub pairs: usize,
    pub affected_mean: f64,
    /// Population standard deviation of the per-pair affected fraction.
    pub affected_sd: f64,
    /// Infill span length -> number of spans.
    pub span_histogram: BTreeMap<usize, usize>,
    pub infill: usize,
    pub flip: usize,
    pub randomize: usize,
}

impl CorruptionStats {
    pub fn mean_span_len(&self) -> f64 {
        if self.infill == 0 {
            return 0.0;
        }
        let total: usize = self.span_histogram.iter().map(|(l, c)| l * c).sum();
        total as f64 / self.infill as f64
    }
}

/// Aggregates mask reports. The affected fraction of a pair is the number
/// of original tokens touched over its corruptible count.
pub fn corruption_stats<'a, I>(pairs: I) -> Result<CorruptionStats, CorruptError>
where
    I: IntoIterator<Item = &'a CorruptedPair>,
{
    let mut st = CorruptionStats::default();
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for p in pairs {
        st.pairs += 1;
        let frac = if p.n_corruptible == 0 { 0.0 } else { p.affected() as f64 / p.n_corruptible as f64 };
        sum += frac;
        sum_sq += frac * frac;
        for s in &p.mask_report {
            match s.action {
                MaskAction::Infill => {
                    st.infill += 1;
                    *st.span_histogram.entry(s.len).or_insert(0) += 1;
                }
                MaskAction::Flip => st.flip += 1,
                MaskAction::Randomize => st.randomize += 1,
            }
        }
    }
    if st.pairs == 0 {
        return Err(CorruptError::EmptyStream);
    }
    let n = st.pairs as f64;
    st.affected_mean = sum / n;
    st.affected_sd = sqrt((sum_sq / n - st.affected_mean * st.affected_mean).max(0.0));
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, EOS};

    fn seq(n: usize) -> TokenSeq {
        let mut s = TokenSeq::default();
        s.ids.push(BOS);
        s.offsets.push((0, 0));
        for i in 0..n {
            s.ids.push(5 + (i % 7) as u32);
            s.offsets.push((i, i + 1));
        }
        s.ids.push(EOS);
        s.offsets.push((n, n));
        s
    }

    /// Counts target tokens that differ from the source, aligning through
    /// infill masks using the report.
    fn diff_affected(p: &CorruptedPair) -> usize {
        let infill: BTreeMap<usize, usize> = p
            .mask_report
            .iter()
            .filter(|s| s.action == MaskAction::Infill)
            .map(|s| (s.start, s.len))
            .collect();
        let (mut i, mut j, mut changed) = (0, 0, 0);
        while i < p.target.len() {
            if let Some(&l) = infill.get(&i) {
                assert_eq!(p.source.ids[j], MASK);
                changed += l;
                i += l;
            } else {
                changed += usize::from(p.source.ids[j] != p.target.ids[i]);
                i += 1;
            }
            j += 1;
        }
        assert_eq!(j, p.source.len());
        changed
    }

    #[test]
    fn zero_budget_is_identity() {
        let cfg = NoiseConfig { mask_token_budget: 0.0, random_mask: 0.0, ..NoiseConfig::recommended() };
        let p = corrupt(&seq(20), &cfg, 20, &mut crate::rng::seeded(1)).unwrap();
        assert_eq!(p.source, p.target);
        assert!(p.mask_report.is_empty());
        let st = corruption_stats([&p]).unwrap();
        assert_eq!(st.affected_mean, 0.0);
        assert_eq!(st.infill + st.flip + st.randomize, 0);
    }

    #[test]
    fn flips_only_when_budget_equals_random_mask() {
        let cfg = NoiseConfig { mask_token_budget: 0.2, random_mask: 0.2, ..NoiseConfig::recommended() };
        for seed in 0..20 {
            let p = corrupt(&seq(10), &cfg, 20, &mut crate::rng::seeded(seed)).unwrap();
            assert_eq!(p.mask_report.len(), 2);
            assert!(p.mask_report.iter().all(|s| s.action == MaskAction::Flip && s.len == 1));
            assert_eq!(p.source.len(), p.target.len());
        }
    }

    #[test]
    fn specials_never_touched_and_contraction_holds() {
        let cfg = NoiseConfig { randomize_tokens: true, mask_token_budget: 0.5, random_mask: 0.2, ..NoiseConfig::recommended() };
        for seed in 0..200 {
            let t = seq(3 + (seed as usize % 40));
            let p = corrupt(&t, &cfg, 12, &mut crate::rng::seeded(seed)).unwrap();
            assert_eq!(p.source.ids[0], BOS);
            assert_eq!(*p.source.ids.last().unwrap(), EOS);
            let shrink: usize = p.mask_report.iter().filter(|s| s.action == MaskAction::Infill).map(|s| s.len - 1).sum();
            assert_eq!(p.source.len(), t.len() - shrink);
            let budget = count(cfg.mask_token_budget, p.n_corruptible);
            assert!(p.affected() <= budget + 1);
            assert_eq!(diff_affected(&p), p.affected());
            let mut last_end = 0;
            for s in &p.mask_report {
                assert!(s.start >= last_end);
                last_end = s.start + s.len;
            }
        }
    }

    #[test]
    fn randomize_takes_half_the_flips() {
        let cfg = NoiseConfig { randomize_tokens: true, mask_token_budget: 0.3, random_mask: 0.3, ..NoiseConfig::recommended() };
        let p = corrupt(&seq(10), &cfg, 30, &mut crate::rng::seeded(4)).unwrap();
        let st = corruption_stats([&p]).unwrap();
        assert_eq!((st.flip, st.randomize), (2, 1));
        for s in p.mask_report.iter().filter(|s| s.action == MaskAction::Randomize) {
            assert_ne!(p.source.ids[s.start], p.target.ids[s.start]);
        }
    }

    #[test]
    fn single_infill_stat() {
        let p = CorruptedPair {
            source: seq(8),
            target: seq(10),
            mask_report: alloc::vec![MaskSpan { start: 2, len: 3, action: MaskAction::Infill }],
            n_corruptible: 10,
        };
        let st = corruption_stats([&p]).unwrap();
        assert!((st.affected_mean - 0.3).abs() < 1e-15);
        assert_eq!(st.mean_span_len(), 3.0);
    }

    #[test]
    fn deterministic_and_errors() {
        let cfg = NoiseConfig::recommended();
        let a = corrupt_indexed(&seq(50), &cfg, 40, 7).unwrap();
        let b = corrupt_indexed(&seq(50), &cfg, 40, 7).unwrap();
        assert_eq!(a, b);
        let bad = NoiseConfig { random_mask: 0.5, ..cfg };
        assert!(matches!(corrupt_indexed(&seq(5), &bad, 40, 0), Err(CorruptError::BudgetInconsistent { .. })));
        let empty: [&CorruptedPair; 0] = [];
        assert_eq!(corruption_stats(empty), Err(CorruptError::EmptyStream));
        let p = corrupt_indexed(&seq(0), &cfg, 40, 0).unwrap();
        assert_eq!(p.source, p.target);
        assert_eq!(p.n_corruptible, 0);
    }

    #[test]
    fn recommended_statistics() {
        let cfg = NoiseConfig::recommended();
        let t = seq(100);
        let pairs: Vec<_> = (0..2000).map(|i| corrupt_indexed(&t, &cfg, 40, i).unwrap()).collect();
        let st = corruption_stats(&pairs).unwrap();
        assert!((0.18..=0.22).contains(&st.affected_mean), "{}", st.affected_mean);
        let m = st.mean_span_len();
        assert!((3.5 * 0.8..=3.5 * 1.2).contains(&m), "{m}");
    }
}
