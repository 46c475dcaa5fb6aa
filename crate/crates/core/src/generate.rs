//! Decoding: length-normalized beam search, greedy decoding, ancestral
//! sampling with perplexity reranking, and canonical top-k accuracy.
//!
//! Hypotheses start from the forced prefix `<eos> <bos>` on the decoder
//! side (the teacher-forcing layout) and only generated tokens are scored.
//! `<pad>`, `<bos>` and `<mask>` are never generated.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::math::{exp, ln};
use crate::model::{decode_hidden, encode_hidden, logits_for_rows, Batch, ModelError, ModelState};
use crate::molgraph::canonical_smiles_str;
use crate::rng::Rng;
use crate::tokenizer::{decode, Vocab, BOS, EOS, MASK, PAD};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Hypothesis {
    /// `<bos>`, the generated tokens, and `<eos>` when finished.
    pub ids: Vec<u32>,
    pub logprob_sum: f64,
    /// Generated tokens, counting the final `<eos>`.
    pub length: usize,
    pub finished: bool,
}

impl Hypothesis {
    /// `logprob_sum / length^alpha`.
    pub fn normalized(&self, alpha: f64) -> f64 {
        if self.length == 0 {
            return 0.0;
        }
        self.logprob_sum / crate::math::pow(self.length as f64, alpha)
    }

    /// Per-token perplexity `exp(−logprob_sum / length)`.
    pub fn perplexity(&self) -> f64 {
        if self.length == 0 {
            return 1.0;
        }
        exp(-self.logprob_sum / self.length as f64)
    }

    pub fn surface(&self, vocab: &Vocab) -> String {
        decode(vocab, &self.ids).map(|d| d.text).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scoring {
    /// Descending `logprob_sum / length^alpha`.
    BeamNormalized,
    /// Ascending per-token perplexity.
    Perplexity,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenReport {
    /// Best first.
    pub hypotheses: Vec<Hypothesis>,
    pub scoring: Scoring,
    /// Sort key of each hypothesis (normalized logprob or perplexity).
    pub scores: Vec<f64>,
    /// Every sample before deduplication (sampling only).
    pub raw: Vec<Hypothesis>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam: 10, max_len: 128, alpha: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SampleConfig {
    pub n: usize,
    pub temperature: f64,
    pub max_len: usize,
    /// Take the argmax instead of sampling (the zero-temperature limit).
    pub argmax: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { n: 128, temperature: 1.0, max_len: 128, argmax: false }
    }
}

fn allowed(id: usize) -> bool {
    !matches!(id as u32, PAD | BOS | MASK)
}

fn log_softmax_into(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + ln(row.iter().map(|x| exp(x - m)).sum::<f64>());
    for x in row {
        *x -= z;
    }
}

/// Encodes one source once and scores next tokens for many prefixes.
struct Stepper<'a> {
    st: &'a ModelState,
    src: Batch,
    enc: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(st: &'a ModelState, src: &[u32]) -> Result<Self, ModelError> {
        let src = Batch::from_rows(&[src]);
        let enc = encode_hidden(st, &src)?;
        Ok(Stepper { st, src, enc })
    }

    /// Next-token log-probabilities `[prefixes.len(), vocab]`. Every
    /// prefix is a hypothesis id list starting with `<bos>`.
    fn next_logprobs(&self, prefixes: &[&[u32]]) -> Result<Vec<f64>, ModelError> {
        let rows: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| {
                let mut r = Vec::with_capacity(p.len() + 1);
                r.push(EOS);
                r.extend_from_slice(p);
                r
            })
            .collect();
        let tgt = Batch::from_rows(&rows);
        let n = prefixes.len();
        let src = Batch { ids: self.src.ids.repeat(n), batch: n, len: self.src.len };
        let enc = self.enc.repeat(n);
        let dec = decode_hidden(self.st, &enc, &src, &tgt)?;
        let idx: Vec<usize> = (0..n).map(|b| b * tgt.len + rows[b].len() - 1).collect();
        let mut out = logits_for_rows(self.st, &dec, &idx);
        let v = self.st.cfg.vocab_size;
        for row in out.chunks_mut(v) {
            log_softmax_into(row);
        }
        Ok(out)
    }
}

/// Longest generation whose decoder input fits in `max_positions`.
fn cap(st: &ModelState, max_len: usize) -> usize {
    max_len.min(st.cfg.max_positions.saturating_sub(1))
}

fn eos_only() -> Hypothesis {
    Hypothesis { ids: vec![BOS, EOS], logprob_sum: 0.0, length: 0, finished: true }
}

fn sort_hypotheses(hyps: &mut [Hypothesis], key: impl Fn(&Hypothesis) -> f64, descending: bool) {
    // Stable: ties keep emission order.
    hyps.sort_by(|a, b| {
        let o = key(a).total_cmp(&key(b));
        if descending { o.reverse() } else { o }
    });
}

/// Length-normalized beam search.
///
/// Each step expands every live hypothesis over all allowed tokens and
/// keeps the best `beam` candidates; those ending in `<eos>` retire to the
/// finished pool. Search stops once the pool holds `beam` hypotheses or no
/// hypothesis is live; live hypotheses reaching `max_len` tokens are
/// retired unfinished. Returns up to `beam` pool entries by descending
/// normalized score.
pub fn beam_search(st: &ModelState, src: &[u32], cfg: &BeamConfig) -> Result<GenReport, ModelError> {
    let beam = cfg.beam.max(1);
    if src.iter().all(|&t| t == PAD) || cfg.max_len == 0 {
        return Ok(GenReport { hypotheses: vec![eos_only()], scoring: Scoring::BeamNormalized, scores: vec![0.0], raw: vec![] });
    }
    let stepper = Stepper::new(st, src)?;
    let v = st.cfg.vocab_size;
    let max_len = cap(st, cfg.max_len);
    let mut live = vec![Hypothesis { ids: vec![BOS], logprob_sum: 0.0, length: 0, finished: false }];
    let mut pool: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let prefixes: Vec<&[u32]> = live.iter().map(|h| h.ids.as_slice()).collect();
        let lp = stepper.next_logprobs(&prefixes)?;
        let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (h, hyp) in live.iter().enumerate() {
            for k in (0..v).filter(|&k| allowed(k)) {
                cand.push((hyp.logprob_sum + lp[h * v + k], h, k));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0));
        cand.truncate(beam);
        let mut next = Vec::with_capacity(cand.len());
        for (score, h, k) in cand {
            let mut ids = live[h].ids.clone();
            ids.push(k as u32);
            let hyp = Hypothesis { ids, logprob_sum: score, length: live[h].length + 1, finished: k as u32 == EOS };
            if hyp.finished {
                pool.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || pool.len() >= beam {
            live.clear();
            break;
        }
    }
    pool.extend(live);
    sort_hypotheses(&mut pool, |h| h.normalized(cfg.alpha), true);
    pool.truncate(beam);
    let scores = pool.iter().map(|h| h.normalized(cfg.alpha)).collect();
    Ok(GenReport { hypotheses: pool, scoring: Scoring::BeamNormalized, scores, raw: vec![] })
}

/// Argmax decoding up to `max_len` generated tokens.
pub fn greedy(st: &ModelState, src: &[u32], max_len: usize) -> Result<Hypothesis, ModelError> {
    if src.iter().all(|&t| t == PAD) || max_len == 0 {
        return Ok(eos_only());
    }
    let stepper = Stepper::new(st, src)?;
    let max_len = cap(st, max_len);
    let mut hyp = Hypothesis { ids: vec![BOS], logprob_sum: 0.0, length: 0, finished: false };
    while hyp.length < max_len && !hyp.finished {
        let lp = stepper.next_logprobs(&[&hyp.ids])?;
        let k = argmax_allowed(&lp);
        hyp.ids.push(k as u32);
        hyp.logprob_sum += lp[k];
        hyp.length += 1;
        hyp.finished = k as u32 == EOS;
    }
    Ok(hyp)
}

fn argmax_allowed(row: &[f64]) -> usize {
    let mut best = usize::MAX;
    for k in (0..row.len()).filter(|&k| allowed(k)) {
        if best == usize::MAX || row[k] > row[best] {
            best = k;
        }
    }
    best
}

/// Draws `cfg.n` ancestral samples at `cfg.temperature`, drops repeated
/// surface strings (first occurrence kept), and sorts by ascending
/// perplexity under the model at temperature 1.
pub fn sample_rerank(
    st: &ModelState,
    src: &[u32],
    cfg: &SampleConfig,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<GenReport, ModelError> {
    if !(cfg.temperature > 0.0) && !cfg.argmax {
        return Err(ModelError::InvalidConfig("temperature must be positive".into()));
    }
    let n = cfg.n.max(1);
    let mut samples: Vec<Hypothesis> = if src.iter().all(|&t| t == PAD) || cfg.max_len == 0 {
        vec![eos_only(); n]
    } else {
        let stepper = Stepper::new(st, src)?;
        let v = st.cfg.vocab_size;
        let mut hs = vec![Hypothesis { ids: vec![BOS], logprob_sum: 0.0, length: 0, finished: false }; n];
        for _ in 0..cap(st, cfg.max_len) {
            let live: Vec<usize> = (0..n).filter(|&i| !hs[i].finished).collect();
            if live.is_empty() {
                break;
            }
            let prefixes: Vec<&[u32]> = live.iter().map(|&i| hs[i].ids.as_slice()).collect();
            let lp = stepper.next_logprobs(&prefixes)?;
            for (r, &i) in live.iter().enumerate() {
                let row = &lp[r * v..(r + 1) * v];
                let k = if cfg.argmax { argmax_allowed(row) } else { sample_token(row, cfg.temperature, rng) };
                let h = &mut hs[i];
                h.ids.push(k as u32);
                h.logprob_sum += row[k];
                h.length += 1;
                h.finished = k as u32 == EOS;
            }
        }
        hs
    };
    let raw = samples.clone();
    let mut seen = hashbrown::HashSet::new();
    samples.retain(|h| seen.insert(h.surface(vocab)));
    sort_hypotheses(&mut samples, Hypothesis::perplexity, false);
    let scores = samples.iter().map(Hypothesis::perplexity).collect();
    Ok(GenReport { hypotheses: samples, scoring: Scoring::Perplexity, scores, raw })
}

/// Inverse-CDF draw from `softmax(row / t)` over allowed tokens.
fn sample_token(row: &[f64], t: f64, rng: &mut Rng) -> usize {
    let m = (0..row.len()).filter(|&k| allowed(k)).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = (0..row.len()).map(|k| if allowed(k) { exp((row[k] - m) / t) } else { 0.0 }).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (k, &x) in w.iter().enumerate() {
        if x > 0.0 {
            last = k;
            if u < x {
                return k;
            }
            u -= x;
        }
    }
    last
}

/// Sum of next-token log-probabilities of `hyp`'s generated tokens under
/// teacher forcing, computed in one decoder pass.
pub fn rescore(st: &ModelState, src: &[u32], hyp: &Hypothesis) -> Result<f64, ModelError> {
    if hyp.length == 0 {
        return Ok(0.0);
    }
    let src = Batch::from_rows(&[src]);
    let enc = encode_hidden(st, &src)?;
    let mut row = vec![EOS];
    row.extend_from_slice(&hyp.ids[..hyp.ids.len() - 1]);
    let tgt = Batch::from_rows(&[row]);
    let dec = decode_hidden(st, &enc, &src, &tgt)?;
    let v = st.cfg.vocab_size;
    let idx: Vec<usize> = (1..tgt.len).collect();
    let mut logits = logits_for_rows(st, &dec, &idx);
    let mut total = 0.0;
    for (r, chunk) in logits.chunks_mut(v).enumerate() {
        log_softmax_into(chunk);
        total += chunk[hyp.ids[r + 1] as usize];
    }
    Ok(total)
}

/// Canonical form of a dot-separated SMILES as a sorted multiset of
/// canonical components, or `None` if any component fails to parse.
pub fn canonical_components(smiles: &str) -> Option<Vec<String>> {
    let mut parts = Vec::new();
    for p in smiles.split('.') {
        let c = canonical_smiles_str(p).ok()?;
        if c.is_empty() {
            return None;
        }
        parts.extend(c.split('.').map(String::from));
    }
    parts.sort();
    Some(parts)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TopkReport {
    /// `k -> hit fraction` over rows with a parseable gold.
    pub accuracy: BTreeMap<usize, f64>,
    pub evaluated: usize,
    /// Rows whose gold SMILES failed to parse (excluded).
    pub gold_unparseable: usize,
}

/// Top-k exact match on canonical component multisets. `predictions[i]`
/// lists the SMILES of row `i`'s hypotheses, best first.
pub fn topk_accuracy<S: AsRef<str>, G: AsRef<str>>(predictions: &[Vec<S>], gold: &[G], ks: &[usize]) -> Result<TopkReport, ModelError> {
    if predictions.len() != gold.len() {
        return Err(ModelError::ShapeMismatch(alloc::format!("{} reports for {} gold rows", predictions.len(), gold.len())));
    }
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let (mut evaluated, mut bad) = (0, 0);
    for (preds, g) in predictions.iter().zip(gold) {
        let Some(target) = canonical_components(g.as_ref()) else {
            bad += 1;
            continue;
        };
        evaluated += 1;
        let first = preds.iter().position(|p| canonical_components(p.as_ref()).as_ref() == Some(&target));
        for (&k, h) in hits.iter_mut() {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    let accuracy = hits
        .into_iter()
        .map(|(k, h)| (k, if evaluated == 0 { 0.0 } else { h as f64 / evaluated as f64 }))
        .collect();
    Ok(TopkReport { accuracy, evaluated, gold_unparseable: bad })
}

/// Surface strings of a report's hypotheses.
pub fn report_smiles(report: &GenReport, vocab: &Vocab) -> Vec<String> {
    report.hypotheses.iter().map(|h| h.surface(vocab)).collect()
}
