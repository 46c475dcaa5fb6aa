//! Denoising pretraining loop.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::net::{backward, cross_entropy, forward, Batch, EmbedOverride};
use super::optim::{adam_step, Checkpoint, RngState, TrainConfig};
use super::{ModelError, ModelState};
use crate::corrupt::{corrupt_indexed, CorruptError, CorruptedPair, NoiseConfig};
use crate::rng::derive_seed;
use crate::tokenizer::{TokenSeq, Vocab};

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Teacher-forced argmax accuracy on corrupted target positions.
    pub mask_acc: f64,
}

/// A corpus item: the tokenized molecule with `<bos>`/`<eos>`.
pub type PretrainSample = TokenSeq;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
    /// Sequences dropped for exceeding `max_positions`.
    pub skipped_long: usize,
}

impl From<CorruptError> for ModelError {
    fn from(e: CorruptError) -> Self {
        ModelError::InvalidTrainConfig(alloc::format!("{e}"))
    }
}

/// Sample order: an independent shuffle of the corpus per epoch, derived
/// from the seed, so any step's batch is known without replaying history.
struct Sampler {
    n: usize,
    seed: u64,
    epoch: Option<u64>,
    perm: Vec<usize>,
}

impl Sampler {
    fn get(&mut self, global: u64) -> usize {
        let epoch = global / self.n as u64;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut crate::rng::derived(self.seed, epoch));
            self.epoch = Some(epoch);
        }
        self.perm[(global % self.n as u64) as usize]
    }
}

/// Builds the teacher-forcing batch from corrupted pairs:
/// (source, decoder input, decoder target).
pub(crate) fn pair_batch(pairs: &[CorruptedPair]) -> (Batch, Batch, Batch) {
    let src = Batch::from_rows(&pairs.iter().map(|p| p.source.ids.as_slice()).collect::<Vec<_>>());
    let tgt_out = Batch::from_rows(&pairs.iter().map(|p| p.target.ids.as_slice()).collect::<Vec<_>>());
    let tgt_in = tgt_out.shift_right();
    (src, tgt_in, tgt_out)
}

/// Fraction of corrupted target positions whose argmax prediction equals
/// the original token, plus the number of such positions.
pub(crate) fn mask_hits(logits: &[f64], vocab: usize, pairs: &[CorruptedPair], len: usize) -> (usize, usize) {
    let (mut hit, mut total) = (0, 0);
    for (b, p) in pairs.iter().enumerate() {
        for s in &p.mask_report {
            for t in s.start..s.start + s.len {
                let row = &logits[(b * len + t) * vocab..(b * len + t + 1) * vocab];
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                    .0;
                hit += usize::from(arg as u32 == p.target.ids[t]);
                total += 1;
            }
        }
    }
    (hit, total)
}

/// Trains `ck` for `tcfg.total_updates - ck.step` further updates.
///
/// Step `s` uses corpus items `s·B .. (s+1)·B` of the per-epoch shuffled
/// stream, corrupts item occurrence `i` with the stream derived from
/// `(ncfg.rng_seed, i)`, and draws dropout from `(tcfg.seed, s)`, so a run
/// resumed from any checkpoint replays the uninterrupted run exactly.
/// `on_checkpoint` sees the checkpoint after every `checkpoint_every`
/// updates and after the last one, together with the metrics recorded
/// since its previous call.
pub fn pretrain<F>(
    corpus: &[PretrainSample],
    ncfg: &NoiseConfig,
    mut ck: Checkpoint,
    tcfg: &TrainConfig,
    checkpoint_every: u64,
    mut on_checkpoint: F,
) -> Result<PretrainOutput, ModelError>
where
    F: FnMut(&Checkpoint, &[MetricsRecord]),
{
    tcfg.validate()?;
    ncfg.validate()?;
    ck.validate()?;
    let max = ck.model.cfg.max_positions;
    let usable: Vec<&TokenSeq> = corpus.iter().filter(|s| s.len() <= max && !s.is_empty()).collect();
    let skipped_long = corpus.iter().filter(|s| s.len() > max).count();
    if usable.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let vocab = ck.model.cfg.vocab_size;
    let mut sampler = Sampler { n: usable.len(), seed: derive_seed(tcfg.seed, u64::MAX), epoch: None, perm: Vec::new() };
    let mut metrics = Vec::new();
    let mut flushed = 0;
    let mut grads = ck.model.params.zeros_like();
    while ck.step < tcfg.total_updates {
        let s = ck.step;
        let pairs = (0..tcfg.batch_size as u64)
            .map(|j| {
                let g = s * tcfg.batch_size as u64 + j;
                corrupt_indexed(usable[sampler.get(g)], ncfg, vocab, g)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (src, tgt_in, tgt_out) = pair_batch(&pairs);
        let mut rng = crate::rng::derived(tcfg.seed, s);
        let fwd = forward(&ck.model, &src, &tgt_in, EmbedOverride::default(), true, Some(&mut rng))?;
        let logits = fwd.logits.as_deref().expect("requested");
        let (loss, dl) = cross_entropy(logits, vocab, &tgt_out.ids)?;
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: s + 1 });
        }
        let (hit, total) = mask_hits(logits, vocab, &pairs, tgt_out.len);
        grads.fill(0.0);
        backward(&ck.model, &fwd, Some(&dl), None, &mut grads);
        drop(fwd);
        let info = adam_step(&mut ck, &grads, tcfg)?;
        ck.rng = RngState::capture(&rng);
        let mask_acc = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
        metrics.push(MetricsRecord { step: ck.step, loss, lr: info.lr, mask_acc });
        if (checkpoint_every > 0 && ck.step % checkpoint_every == 0) || ck.step == tcfg.total_updates {
            on_checkpoint(&ck, &metrics[flushed..]);
            flushed = metrics.len();
        }
    }
    Ok(PretrainOutput { checkpoint: ck, metrics, skipped_long })
}

/// Accuracy of always predicting the corpus's most frequent content token.
pub fn masked_token_baseline(corpus: &[PretrainSample]) -> f64 {
    let mut counts: hashbrown::HashMap<u32, usize> = hashbrown::HashMap::new();
    let mut total = 0;
    for s in corpus {
        for &id in &s.ids {
            if !Vocab::is_special(id) {
                *counts.entry(id).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    let top = counts.values().copied().max().unwrap_or(0);
    if total == 0 {
        0.0
    } else {
        top as f64 / total as f64
    }
}

/// Evaluation-mode masked-token recovery over corrupted copies of
/// `corpus`, with noise streams derived from `seed`.
pub fn mask_recovery(
    st: &ModelState,
    corpus: &[PretrainSample],
    ncfg: &NoiseConfig,
    seed: u64,
    batch_size: usize,
) -> Result<f64, ModelError> {
    let cfg = NoiseConfig { rng_seed: seed, ..*ncfg };
    let (mut hit, mut total) = (0, 0);
    let items: Vec<&TokenSeq> = corpus.iter().filter(|s| s.len() <= st.cfg.max_positions).collect();
    for (c, chunk) in items.chunks(batch_size.max(1)).enumerate() {
        let pairs = chunk
            .iter()
            .enumerate()
            .map(|(j, s)| corrupt_indexed(s, &cfg, st.cfg.vocab_size, (c * batch_size + j) as u64))
            .collect::<Result<Vec<_>, _>>()?;
        let (src, tgt_in, tgt_out) = pair_batch(&pairs);
        let fwd = forward(st, &src, &tgt_in, EmbedOverride::default(), true, None)?;
        let (h, t) = mask_hits(fwd.logits.as_deref().expect("requested"), st.cfg.vocab_size, &pairs, tgt_out.len);
        hit += h;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Mean of `xs` over consecutive windows of `w` (a trailing partial
/// window is dropped).
pub fn window_means(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 {
        return vec![];
    }
    xs.chunks_exact(w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}
