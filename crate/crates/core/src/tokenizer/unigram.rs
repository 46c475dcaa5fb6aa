//! Unigram language-model tokenizer: Viterbi encoding, lattice
//! forward-backward, and EM training with likelihood-based pruning.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;
use rand::Rng as _;

use super::{TokenSeq, TokenizerError, Vocab, BOS, EOS, NUM_SPECIAL, UNK};
use crate::math::{exp, ln, log_add};

/// Log-probability given to single characters that received no expected
/// count; they stay in the vocabulary for coverage.
const FLOOR_LOG_PROB: f64 = -1000.0;

/// Relative slack within which two Viterbi scores count as tied.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct UnigramConfig {
    /// Non-special pieces in the final vocabulary.
    pub target_size: usize,
    /// Multi-character seed pieces; defaults to four times the target.
    pub seed_size: Option<usize>,
    /// Fraction of pieces kept by each pruning round.
    pub shrink_factor: f64,
    /// EM rounds between prunes.
    pub em_iters: usize,
    /// Longest seed substring, in characters.
    pub max_piece_len: usize,
    /// Uniformly sample this many corpus lines before training.
    pub sample_size: Option<usize>,
    pub rng_seed: u64,
}

impl Default for UnigramConfig {
    fn default() -> Self {
        UnigramConfig {
            target_size: 1021,
            seed_size: None,
            shrink_factor: 0.75,
            em_iters: 2,
            max_piece_len: 8,
            sample_size: None,
            rng_seed: 0,
        }
    }
}

/// Byte offsets of every character boundary, including both ends.
fn boundaries(text: &str) -> Vec<usize> {
    text.char_indices().map(|(i, _)| i).chain(core::iter::once(text.len())).collect()
}

/// Outgoing edges per boundary index: `(end boundary index, piece id)`.
fn lattice(vocab: &Vocab, text: &str, bounds: &[usize]) -> Vec<Vec<(usize, u32)>> {
    let n = bounds.len() - 1;
    let max = vocab.max_piece_chars();
    (0..n)
        .map(|i| {
            (i + 1..=(i + max).min(n))
                .filter_map(|j| vocab.piece_id(&text[bounds[i]..bounds[j]]).map(|id| (j, id)))
                .collect()
        })
        .collect()
}

/// Best segmentation by backward dynamic programming. Ties in score go to
/// fewer tokens, then to the longer leftmost token. Characters without a
/// single-character piece become `<unk>` when `allow_unk`.
fn viterbi(
    vocab: &Vocab,
    text: &str,
    exclude: Option<u32>,
    allow_unk: bool,
) -> Option<(Vec<(usize, usize, u32)>, f64)> {
    let bounds = boundaries(text);
    let n = bounds.len() - 1;
    let edges = lattice(vocab, text, &bounds);
    // (score, tokens, next boundary, id)
    let mut best: Vec<Option<(f64, usize, usize, u32)>> = vec![None; n + 1];
    best[n] = Some((0.0, 0, n, 0));
    for i in (0..n).rev() {
        let mut cur: Option<(f64, usize, usize, u32)> = None;
        let mut consider = |j: usize, id: u32, lp: f64| {
            let Some((rest, count, _, _)) = best[j] else { return };
            let cand = (lp + rest, count + 1, j, id);
            let better = match cur {
                None => true,
                Some((s, c, cj, _)) => {
                    let tol = TIE_EPS * s.abs().max(1.0);
                    if cand.0 > s + tol {
                        true
                    } else if cand.0 >= s - tol {
                        cand.1 < c || (cand.1 == c && j > cj)
                    } else {
                        false
                    }
                }
            };
            if better {
                cur = Some(cand);
            }
        };
        let mut has_single = false;
        for &(j, id) in &edges[i] {
            if j == i + 1 {
                has_single = true;
            }
            if Some(id) == exclude {
                continue;
            }
            let lp = vocab.log_prob(id).expect("lattice ids are valid");
            consider(j, id, lp);
        }
        if allow_unk && !has_single {
            consider(i + 1, UNK, vocab.unk_score());
        }
        best[i] = cur;
    }
    let (score, ..) = best[0]?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let (_, _, j, id) = best[i].expect("reachable");
        out.push((bounds[i], bounds[j], id));
        i = j;
    }
    Some((out, score))
}

/// Maximum-probability segmentation. Uncovered characters map to `<unk>`
/// one character at a time. With `add_specials` the sequence is wrapped in
/// `<bos>` ... `<eos>`.
pub fn encode(vocab: &Vocab, text: &str, add_specials: bool) -> TokenSeq {
    let mut seq = TokenSeq::default();
    if add_specials {
        seq.ids.push(BOS);
        seq.offsets.push((0, 0));
    }
    if !text.is_empty() {
        let (tokens, _) = viterbi(vocab, text, None, true).expect("unk makes every text coverable");
        for (s, e, id) in tokens {
            seq.ids.push(id);
            seq.offsets.push((s, e));
        }
    }
    if add_specials {
        seq.ids.push(EOS);
        seq.offsets.push((text.len(), text.len()));
    }
    seq
}

/// Sum of piece log-probabilities of the best segmentation (unknown
/// characters scored at the `<unk>` penalty).
pub fn viterbi_score(vocab: &Vocab, text: &str) -> f64 {
    viterbi(vocab, text, None, true).map_or(0.0, |(_, s)| s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// Number of `<unk>` tokens rendered as their surface form.
    pub unk_count: usize,
}

/// Concatenates token strings. `<bos>`, `<eos>`, `<pad>` and `<mask>` are
/// dropped; `<unk>` is rendered as `"<unk>"` and counted.
pub fn decode(vocab: &Vocab, ids: &[u32]) -> Result<Decoded, TokenizerError> {
    let mut text = String::new();
    let mut unk_count = 0;
    for &id in ids {
        let tok = vocab.token(id).ok_or(TokenizerError::UnknownId(id))?;
        if id == UNK {
            unk_count += 1;
            text.push_str(tok);
        } else if !Vocab::is_special(id) {
            text.push_str(tok);
        }
    }
    Ok(Decoded { text, unk_count })
}

/// Adds `weight` times the posterior expected piece counts of `text` into
/// `counts` (indexed by id) and returns `ln P(text)`, or `None` when the
/// text has no segmentation.
fn accumulate_counts(vocab: &Vocab, text: &str, weight: f64, counts: &mut [f64]) -> Option<f64> {
    let bounds = boundaries(text);
    let n = bounds.len() - 1;
    let edges = lattice(vocab, text, &bounds);
    let lp = |id: u32| vocab.log_prob(id).expect("valid id");
    let mut alpha = vec![f64::NEG_INFINITY; n + 1];
    alpha[0] = 0.0;
    for i in 0..n {
        if alpha[i] == f64::NEG_INFINITY {
            continue;
        }
        for &(j, id) in &edges[i] {
            alpha[j] = log_add(alpha[j], alpha[i] + lp(id));
        }
    }
    let log_z = alpha[n];
    if log_z == f64::NEG_INFINITY {
        return None;
    }
    let mut beta = vec![f64::NEG_INFINITY; n + 1];
    beta[n] = 0.0;
    for i in (0..n).rev() {
        for &(j, id) in &edges[i] {
            beta[i] = log_add(beta[i], lp(id) + beta[j]);
        }
    }
    for i in 0..n {
        for &(j, id) in &edges[i] {
            let post = exp(alpha[i] + lp(id) + beta[j] - log_z);
            counts[id as usize] += weight * post;
        }
    }
    Some(log_z)
}

/// Posterior expected count of every piece over all segmentations of
/// `text`. Pieces with zero expectation are omitted.
pub fn expected_counts(vocab: &Vocab, text: &str) -> Result<BTreeMap<u32, f64>, TokenizerError> {
    let mut counts = vec![0.0; vocab.len()];
    accumulate_counts(vocab, text, 1.0, &mut counts).ok_or(TokenizerError::UncoverableText)?;
    Ok(counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0.0)
        .map(|(i, c)| (i as u32, c))
        .collect())
}

/// `Σ weight · ln P(text)` under the unigram model.
pub fn corpus_log_likelihood(vocab: &Vocab, corpus: &[(String, f64)]) -> Result<f64, TokenizerError> {
    let mut scratch = vec![0.0; vocab.len()];
    let mut total = 0.0;
    for (text, w) in corpus {
        total += w * accumulate_counts(vocab, text, 0.0, &mut scratch)
            .ok_or(TokenizerError::UncoverableText)?;
    }
    Ok(total)
}

/// One E/M round at fixed vocabulary: posterior counts over every
/// segmentation lattice, then renormalized log-probabilities. Returns the
/// new vocabulary and the log-likelihood under the old one.
pub fn em_step(vocab: &Vocab, corpus: &[(String, f64)]) -> Result<(Vocab, f64), TokenizerError> {
    let mut counts = vec![0.0; vocab.len()];
    let mut ll = 0.0;
    for (text, w) in corpus {
        ll += w * accumulate_counts(vocab, text, *w, &mut counts).ok_or(TokenizerError::UncoverableText)?;
    }
    let total: f64 = counts[NUM_SPECIAL..].iter().sum();
    let pieces = vocab
        .pieces()
        .iter()
        .zip(&counts[NUM_SPECIAL..])
        .map(|((tok, _), &c)| {
            let lp = if c > 0.0 { ln(c / total) } else { FLOOR_LOG_PROB };
            (tok.clone(), lp)
        })
        .collect();
    Ok((Vocab::from_pieces(pieces)?, ll))
}


/// Trains a unigram vocabulary of `cfg.target_size` pieces.
///
/// Seeds with every character plus the most valuable substrings (count
/// times length), then alternates EM rounds with pruning of the pieces
/// whose removal costs the least likelihood, until the target is reached.
pub fn train_unigram<I, S>(corpus: I, cfg: &UnigramConfig) -> Result<Vocab, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let lines = sample_lines(corpus, cfg);
    let mut distinct: BTreeMap<String, f64> = BTreeMap::new();
    for line in lines {
        if !line.is_empty() {
            *distinct.entry(line).or_insert(0.0) += 1.0;
        }
    }
    if distinct.is_empty() {
        return Err(TokenizerError::CorpusEmpty);
    }
    let corpus: Vec<(String, f64)> = distinct.into_iter().collect();

    let alphabet: BTreeSet<char> = corpus.iter().flat_map(|(s, _)| s.chars()).collect();
    if cfg.target_size < alphabet.len() {
        return Err(TokenizerError::TargetTooSmall { target: cfg.target_size, alphabet: alphabet.len() });
    }

    let mut vocab = seed_vocab(&corpus, cfg)?;
    loop {
        for _ in 0..cfg.em_iters.max(1) {
            vocab = em_step(&vocab, &corpus)?.0;
        }
        if vocab.pieces().len() <= cfg.target_size {
            break;
        }
        vocab = prune(&vocab, &corpus, cfg)?;
    }

    let mut pieces = vocab.pieces().to_vec();
    pieces.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    pieces.truncate(cfg.target_size);
    renormalize(pieces)
}

fn sample_lines<I, S>(corpus: I, cfg: &UnigramConfig) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let Some(k) = cfg.sample_size else {
        return corpus.into_iter().map(|s| s.as_ref().to_string()).collect();
    };
    // Reservoir sampling keeps the draw uniform for streams of unknown size.
    let mut rng = crate::rng::seeded(cfg.rng_seed);
    let mut reservoir: Vec<String> = Vec::with_capacity(k);
    for (i, s) in corpus.into_iter().enumerate() {
        if i < k {
            reservoir.push(s.as_ref().to_string());
        } else {
            let j = rng.gen_range(0..=i);
            if j < k {
                reservoir[j] = s.as_ref().to_string();
            }
        }
    }
    reservoir
}

fn renormalize(pieces: Vec<(String, f64)>) -> Result<Vocab, TokenizerError> {
    let z = crate::math::log_sum_exp(&pieces.iter().map(|p| p.1).collect::<Vec<_>>());
    Vocab::from_pieces(pieces.into_iter().map(|(t, lp)| (t, (lp - z).min(0.0))).collect())
}

fn seed_vocab(corpus: &[(String, f64)], cfg: &UnigramConfig) -> Result<Vocab, TokenizerError> {
    let mut singles: BTreeMap<String, f64> = BTreeMap::new();
    let mut multi: HashMap<&str, f64> = HashMap::new();
    for (text, w) in corpus {
        let bounds = boundaries(text);
        let n = bounds.len() - 1;
        for i in 0..n {
            *singles.entry(text[bounds[i]..bounds[i + 1]].to_string()).or_insert(0.0) += w;
            for j in i + 2..=(i + cfg.max_piece_len).min(n) {
                *multi.entry(&text[bounds[i]..bounds[j]]).or_insert(0.0) += w;
            }
        }
    }
    let seed_size = cfg.seed_size.unwrap_or(4 * cfg.target_size);
    let mut scored: Vec<(&str, f64)> = multi
        .into_iter()
        .map(|(s, f)| (s, f * s.chars().count() as f64))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.truncate(seed_size);
    let pieces: Vec<(String, f64)> = singles
        .into_iter()
        .map(|(s, f)| (s, ln(f)))
        .chain(scored.into_iter().map(|(s, score)| (s.to_string(), ln(score))))
        .collect();
    renormalize(pieces)
}

/// Drops the multi-character pieces whose removal loses the least
/// likelihood, keeping `max(target, shrink · size)` pieces. A removed
/// piece's occurrences are re-segmented with its best alternative.
fn prune(vocab: &Vocab, corpus: &[(String, f64)], cfg: &UnigramConfig) -> Result<Vocab, TokenizerError> {
    let mut freq = vec![0.0; vocab.len()];
    for (text, w) in corpus {
        let (tokens, _) = viterbi(vocab, text, None, false).ok_or(TokenizerError::UncoverableText)?;
        for (_, _, id) in tokens {
            freq[id as usize] += w;
        }
    }
    let sum: f64 = freq.iter().sum();
    let log_sum = ln(sum);

    let mut always: Vec<(String, f64)> = Vec::new();
    let mut candidates: Vec<(f64, (String, f64))> = Vec::new();
    for (k, (tok, lp)) in vocab.pieces().iter().enumerate() {
        let id = (k + NUM_SPECIAL) as u32;
        if tok.chars().count() == 1 {
            always.push((tok.clone(), *lp));
            continue;
        }
        let f = freq[id as usize];
        let loss = if f == 0.0 {
            0.0
        } else {
            match viterbi(vocab, tok, Some(id), false) {
                // Unreplaceable pieces cannot happen while all single
                // characters are present; keep them if they ever do.
                None => f64::INFINITY,
                Some((alt, _)) => {
                    let new_sum = sum + f * (alt.len() as f64 - 1.0);
                    let lp_piece = ln(f) - log_sum;
                    let lp_alt: f64 = alt
                        .iter()
                        .map(|&(_, _, a)| ln(freq[a as usize] + f))
                        .sum::<f64>()
                        - alt.len() as f64 * ln(new_sum);
                    f * (lp_piece - lp_alt)
                }
            }
        };
        candidates.push((loss, (tok.clone(), *lp)));
    }
    let current = vocab.pieces().len();
    let keep = cfg
        .target_size
        .max(crate::math::floor(current as f64 * cfg.shrink_factor) as usize)
        .min(current - 1);
    let keep_multi = keep.saturating_sub(always.len());
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1 .0.cmp(&b.1 .0)));
    candidates.truncate(keep_multi);
    always.extend(candidates.into_iter().map(|(_, p)| p));
    renormalize(always)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vocab(pieces: &[(&str, f64)]) -> Vocab {
        Vocab::from_pieces(pieces.iter().map(|&(s, lp)| (s.to_string(), lp)).collect()).unwrap()
    }

    fn surface(v: &Vocab, seq: &TokenSeq) -> Vec<String> {
        seq.ids.iter().map(|&id| v.token(id).unwrap().to_string()).collect()
    }

    #[test]
    fn argmax_prefers_higher_score() {
        let v = vocab(&[("C", -1.0), ("CC", -1.5)]);
        assert_eq!(surface(&v, &encode(&v, "CC", false)), ["CC"]);
    }

    #[test]
    fn tie_prefers_fewer_tokens() {
        let v = vocab(&[("C", -1.0), ("CC", -2.0)]);
        assert_eq!(surface(&v, &encode(&v, "CC", false)), ["CC"]);
    }

    #[test]
    fn tie_prefers_leftmost_longest() {
        // "CCC" as [CC, C] or [C, CC]: equal score and length.
        let v = vocab(&[("C", -1.0), ("CC", -1.0)]);
        assert_eq!(surface(&v, &encode(&v, "CCC", false)), ["CC", "C"]);
    }

    #[test]
    fn unknown_characters_are_single_unks() {
        let v = vocab(&[("C", -1.0), ("O", -1.0)]);
        let seq = encode(&v, "CNNO", true);
        assert_eq!(seq.ids, vec![BOS, 5, UNK, UNK, 6, EOS]);
        assert_eq!(seq.offsets, vec![(0, 0), (0, 1), (1, 2), (2, 3), (3, 4), (4, 4)]);
        let d = decode(&v, &seq.ids).unwrap();
        assert_eq!(d.text, "C<unk><unk>O");
        assert_eq!(d.unk_count, 2);
    }

    #[test]
    fn decode_edge_cases() {
        let v = vocab(&[("C", -1.0)]);
        assert_eq!(decode(&v, &[]).unwrap().text, "");
        assert_eq!(decode(&v, &[99]), Err(TokenizerError::UnknownId(99)));
    }

    #[test]
    fn expected_counts_unique_segmentation() {
        let v = vocab(&[("a", -0.1)]);
        let c = expected_counts(&v, "aa").unwrap();
        assert!((c[&5] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn expected_counts_two_segmentations() {
        let v = vocab(&[("a", ln(0.5)), ("aa", ln(0.5))]);
        let c = expected_counts(&v, "aa").unwrap();
        // P([aa]) = 0.5, P([a,a]) = 0.25.
        assert!((c[&6] - 2.0 / 3.0).abs() < 1e-12);
        assert!((c[&5] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn expected_counts_cover_text_length() {
        let v = vocab(&[("C", -1.0), ("CC", -1.2), ("CCO", -2.0), ("O", -1.5), ("CO", -1.7)]);
        let text = "CCOCCCO";
        let c = expected_counts(&v, text).unwrap();
        let covered: f64 = c.iter().map(|(&id, &n)| n * v.token(id).unwrap().len() as f64).sum();
        assert!((covered - text.len() as f64).abs() < 1e-9);
        assert_eq!(expected_counts(&v, "CN"), Err(TokenizerError::UncoverableText));
    }

    #[test]
    fn repeated_pair_prefers_two_char_piece() {
        let corpus = vec!["CC"; 50];
        let cfg = UnigramConfig { target_size: 2, ..UnigramConfig::default() };
        let v = train_unigram(corpus, &cfg).unwrap();
        let lp_cc = v.log_prob(v.id("CC").unwrap()).unwrap();
        let lp_c = v.log_prob(v.id("C").unwrap()).unwrap();
        assert!(lp_cc > lp_c);
    }

    #[test]
    fn single_character_corpus_gives_alphabet() {
        let corpus = ["C", "N", "O", "C", "c"];
        let v = train_unigram(corpus, &UnigramConfig { target_size: 10, ..Default::default() }).unwrap();
        let mut toks: Vec<_> = v.pieces().iter().map(|(t, _)| t.clone()).collect();
        toks.sort();
        assert_eq!(toks, ["C", "N", "O", "c"]);
        let seq = encode(&v, "CNOc", false);
        assert_eq!(seq.len(), 4);
    }

    #[test]
    fn trained_vocab_is_normalized_and_sized() {
        let corpus: Vec<String> = (0..200)
            .map(|i| alloc::format!("CC(=O)N{}c1ccccc1{}", "C".repeat(i % 5), if i % 3 == 0 { "O" } else { "Cl" }))
            .collect();
        let cfg = UnigramConfig { target_size: 30, ..Default::default() };
        let v = train_unigram(&corpus, &cfg).unwrap();
        assert_eq!(v.pieces().len(), 30);
        let total: f64 = v.pieces().iter().map(|(_, lp)| exp(*lp)).sum();
        assert!((total - 1.0).abs() < 1e-6);
        for s in &corpus {
            let seq = encode(&v, s, false);
            assert!(!seq.ids.contains(&UNK));
            assert_eq!(decode(&v, &seq.ids).unwrap().text, *s);
        }
    }

    #[test]
    fn errors() {
        let empty: [&str; 0] = [];
        assert_eq!(train_unigram(empty, &UnigramConfig::default()), Err(TokenizerError::CorpusEmpty));
        let cfg = UnigramConfig { target_size: 2, ..Default::default() };
        assert_eq!(
            train_unigram(["CNO"], &cfg),
            Err(TokenizerError::TargetTooSmall { target: 2, alphabet: 3 })
        );
    }

    #[test]
    fn sampling_is_seeded() {
        let corpus: Vec<String> = (0..500).map(|i| alloc::format!("C{}", "O".repeat(i % 7))).collect();
        let cfg = UnigramConfig { target_size: 5, sample_size: Some(50), rng_seed: 3, ..Default::default() };
        let a = train_unigram(&corpus, &cfg).unwrap();
        let b = train_unigram(&corpus, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
