//! Full encoder-decoder forward pass, its reverse pass, and the token
//! cross-entropy.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layers::{
    add_into, attention, attention_bwd, dropout, dropout_bwd, gelu, gelu_bwd, layer_norm, layer_norm_bwd, linear,
    linear_bwd, softmax_rows, AttnCache, AttnGrads, AttnParams, AttnShape, LnCache,
};
use super::params::{AttnIdx, FfnIdx, LnIdx, ParamSet};
use super::{ModelError, ModelState};
use crate::linalg::{gemm, View};
use crate::math::ln;
use crate::rng::Rng;
use crate::tokenizer::{EOS, PAD};

/// Right-padded id matrix `[batch, len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
}

impl Batch {
    /// Pads every row with `<pad>` to the longest row.
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Self {
        let len = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0);
        let mut ids = vec![PAD; rows.len() * len];
        for (b, r) in rows.iter().enumerate() {
            ids[b * len..b * len + r.as_ref().len()].copy_from_slice(r.as_ref());
        }
        Batch { ids, batch: rows.len(), len }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// Index of the last non-pad position plus one.
    pub fn real_len(&self, b: usize) -> usize {
        self.row(b).iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
    }

    /// Decoder input for teacher forcing: `<eos>` followed by each row
    /// without its last real token.
    pub fn shift_right(&self) -> Self {
        let mut out = Batch { ids: vec![PAD; self.ids.len()], batch: self.batch, len: self.len };
        for b in 0..self.batch {
            let n = self.real_len(b);
            if n == 0 || self.len == 0 {
                continue;
            }
            out.ids[b * self.len] = EOS;
            out.ids[b * self.len + 1..b * self.len + n].copy_from_slice(&self.row(b)[..n - 1]);
        }
        out
    }

    fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t == PAD).collect()
    }
}

/// Token-embedding rows `[batch * len, d_model]` replacing the table
/// lookup for the encoder and/or decoder input.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmbedOverride<'a> {
    pub src: Option<&'a [f64]>,
    pub tgt: Option<&'a [f64]>,
}

struct EmbCache {
    ids: Vec<u32>,
    len: usize,
    overridden: bool,
    ln: Option<LnCache>,
    drop: Option<Vec<f64>>,
}

struct FfnCache {
    h: Vec<f64>,
    a: Vec<f64>,
    g: Vec<f64>,
    act_drop: Option<Vec<f64>>,
    out_drop: Option<Vec<f64>>,
}

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    drop1: Option<Vec<f64>>,
    ln2: LnCache,
    ffn: FfnCache,
}

struct DecLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    drop1: Option<Vec<f64>>,
    ln2: LnCache,
    cross: AttnCache,
    drop2: Option<Vec<f64>>,
    ln3: LnCache,
    ffn: FfnCache,
}

pub(crate) struct EncCache {
    emb: EmbCache,
    layers: Vec<EncLayerCache>,
    fin: LnCache,
}

pub(crate) struct DecCache {
    emb: EmbCache,
    layers: Vec<DecLayerCache>,
    fin: LnCache,
}

/// Result of [`forward`]: outputs plus everything [`backward`] needs.
pub struct Forward {
    /// `[batch * tgt_len, vocab]` when requested.
    pub logits: Option<Vec<f64>>,
    /// Encoder final-layer states `[batch * src_len, d_model]`.
    pub enc_out: Vec<f64>,
    /// Decoder final-layer states `[batch * tgt_len, d_model]`.
    pub dec_out: Vec<f64>,
    enc: EncCache,
    dec: DecCache,
    src_batch: usize,
    src_len: usize,
    tgt_len: usize,
}

impl Forward {
    pub fn tgt_len(&self) -> usize {
        self.tgt_len
    }
}

/// Gradients with respect to the token-embedding rows fed to each side.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub src: Vec<f64>,
    pub tgt: Vec<f64>,
}

fn attn_params<'a>(p: &'a ParamSet, i: &AttnIdx) -> AttnParams<'a> {
    AttnParams {
        wq: p.t(i.wq),
        bq: p.t(i.bq),
        wk: p.t(i.wk),
        bk: p.t(i.bk),
        wv: p.t(i.wv),
        bv: p.t(i.bv),
        wo: p.t(i.wo),
        bo: p.t(i.bo),
    }
}

fn attn_grads<'a>(g: &'a mut ParamSet, i: &AttnIdx) -> AttnGrads<'a> {
    let [wq, bq, wk, bk, wv, bv, wo, bo] = g.many_mut([i.wq, i.bq, i.wk, i.bk, i.wv, i.bv, i.wo, i.bo]);
    AttnGrads { wq, bq, wk, bk, wv, bv, wo, bo }
}

fn ln_fwd(p: &ParamSet, i: LnIdx, x: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    layer_norm(x, d, p.t(i.g), p.t(i.b))
}

fn ln_bwd(p: &ParamSet, g: &mut ParamSet, i: LnIdx, dy: &[f64], c: &LnCache, d: usize) -> Vec<f64> {
    let (dg, db) = g.pair_mut(i.g, i.b);
    layer_norm_bwd(dy, c, d, p.t(i.g), dg, db)
}

fn ffn_fwd(p: &ParamSet, i: &FfnIdx, h: Vec<f64>, st: &ModelState, mut rng: Option<&mut Rng>) -> (Vec<f64>, FfnCache) {
    let (d, f) = (st.cfg.d_model, st.cfg.d_ffn);
    let a = linear(&h, d, p.t(i.w1), p.t(i.b1), f);
    let mut g = gelu(&a);
    let act_drop = dropout(&mut g, st.cfg.activation_dropout, rng.as_deref_mut());
    let mut o = linear(&g, f, p.t(i.w2), p.t(i.b2), d);
    let out_drop = dropout(&mut o, st.cfg.dropout, rng);
    (o, FfnCache { h, a, g, act_drop, out_drop })
}

fn ffn_bwd(p: &ParamSet, g: &mut ParamSet, i: &FfnIdx, dout: &[f64], c: &FfnCache, st: &ModelState) -> Vec<f64> {
    let (d, f) = (st.cfg.d_model, st.cfg.d_ffn);
    let mut dout = dout.to_vec();
    dropout_bwd(&mut dout, &c.out_drop);
    let (dw2, db2) = g.pair_mut(i.w2, i.b2);
    let mut dg = linear_bwd(&dout, &c.g, f, p.t(i.w2), d, dw2, db2);
    dropout_bwd(&mut dg, &c.act_drop);
    let da = gelu_bwd(&dg, &c.a);
    let (dw1, db1) = g.pair_mut(i.w1, i.b1);
    linear_bwd(&da, &c.h, d, p.t(i.w1), f, dw1, db1)
}

fn check_batch(st: &ModelState, b: &Batch, side: &str) -> Result<(), ModelError> {
    if b.len > st.cfg.max_positions {
        return Err(ModelError::LengthOverflow { len: b.len, max: st.cfg.max_positions });
    }
    if b.ids.len() != b.batch * b.len {
        return Err(ModelError::ShapeMismatch(format!("{side} ids do not fill [batch, len]")));
    }
    if let Some(&t) = b.ids.iter().find(|&&t| t as usize >= st.cfg.vocab_size) {
        return Err(ModelError::ShapeMismatch(format!("{side} id {t} outside vocabulary")));
    }
    if b.len == 0 {
        return Err(ModelError::ShapeMismatch(format!("{side} sequences are empty")));
    }
    Ok(())
}

fn embed(
    st: &ModelState,
    b: &Batch,
    tok: usize,
    pos: Option<usize>,
    ln_idx: Option<LnIdx>,
    ov: Option<&[f64]>,
    rng: Option<&mut Rng>,
) -> Result<(Vec<f64>, EmbCache), ModelError> {
    let d = st.cfg.d_model;
    let p = &st.params;
    let rows = b.batch * b.len;
    if let Some(o) = ov {
        if o.len() != rows * d {
            return Err(ModelError::ShapeMismatch(format!("embedding override has {} values, want {}", o.len(), rows * d)));
        }
    }
    let table = p.t(tok);
    let pos_table = match pos {
        Some(i) => p.t(i),
        None => st.pos_table.as_deref().expect("sinusoidal table present"),
    };
    let mut x = vec![0.0; rows * d];
    for r in 0..rows {
        let t = r % b.len;
        let e = match ov {
            Some(o) => &o[r * d..(r + 1) * d],
            None => &table[b.ids[r] as usize * d..(b.ids[r] as usize + 1) * d],
        };
        for j in 0..d {
            x[r * d + j] = e[j] + pos_table[t * d + j];
        }
    }
    let (mut x, ln) = match ln_idx {
        Some(i) => {
            let (y, c) = ln_fwd(p, i, &x, d);
            (y, Some(c))
        }
        None => (x, None),
    };
    let drop = dropout(&mut x, st.cfg.dropout, rng);
    Ok((x, EmbCache { ids: b.ids.clone(), len: b.len, overridden: ov.is_some(), ln, drop }))
}

fn embed_bwd(
    st: &ModelState,
    g: &mut ParamSet,
    dx: &[f64],
    c: &EmbCache,
    tok: usize,
    pos: Option<usize>,
    ln_idx: Option<LnIdx>,
) -> Vec<f64> {
    let d = st.cfg.d_model;
    let mut dx = dx.to_vec();
    dropout_bwd(&mut dx, &c.drop);
    let dx = match (ln_idx, &c.ln) {
        (Some(i), Some(lc)) => ln_bwd(&st.params, g, i, &dx, lc, d),
        _ => dx,
    };
    if let Some(pi) = pos {
        let dp = g.t_mut(pi);
        for (r, row) in dx.chunks(d).enumerate() {
            add_into(&mut dp[(r % c.len) * d..(r % c.len + 1) * d], row);
        }
    }
    if !c.overridden {
        let dt = g.t_mut(tok);
        for (r, row) in dx.chunks(d).enumerate() {
            let id = c.ids[r] as usize;
            add_into(&mut dt[id * d..(id + 1) * d], row);
        }
    }
    dx
}

pub(crate) fn encode(
    st: &ModelState,
    src: &Batch,
    ov: Option<&[f64]>,
    mut rng: Option<&mut Rng>,
) -> Result<(Vec<f64>, EncCache), ModelError> {
    check_batch(st, src, "source")?;
    let (d, p, lay) = (st.cfg.d_model, &st.params, &st.layout);
    let pad = src.pad_mask();
    let sh = AttnShape { batch: src.batch, tq: src.len, tk: src.len, d, heads: st.cfg.heads };
    let (mut x, emb) = embed(st, src, lay.enc_tok, lay.enc_pos, lay.enc_ln_emb, ov, rng.as_deref_mut())?;
    let mut layers = Vec::with_capacity(lay.enc.len());
    for l in &lay.enc {
        let (h, ln1) = ln_fwd(p, l.ln1, &x, d);
        let (mut a, attn) =
            attention(sh, &h, None, &pad, false, &attn_params(p, &l.attn), st.cfg.attention_dropout, rng.as_deref_mut());
        let drop1 = dropout(&mut a, st.cfg.dropout, rng.as_deref_mut());
        add_into(&mut x, &a);
        let (h2, ln2) = ln_fwd(p, l.ln2, &x, d);
        let (f, ffn) = ffn_fwd(p, &l.ffn, h2, st, rng.as_deref_mut());
        add_into(&mut x, &f);
        layers.push(EncLayerCache { ln1, attn, drop1, ln2, ffn });
    }
    let (out, fin) = ln_fwd(p, lay.enc_final, &x, d);
    Ok((out, EncCache { emb, layers, fin }))
}

pub(crate) fn decode(
    st: &ModelState,
    enc_out: &[f64],
    src: &Batch,
    tgt: &Batch,
    ov: Option<&[f64]>,
    mut rng: Option<&mut Rng>,
) -> Result<(Vec<f64>, DecCache), ModelError> {
    check_batch(st, tgt, "target")?;
    if src.batch != tgt.batch {
        return Err(ModelError::ShapeMismatch(format!("batch sizes differ: {} vs {}", src.batch, tgt.batch)));
    }
    let (d, p, lay) = (st.cfg.d_model, &st.params, &st.layout);
    if enc_out.len() != src.batch * src.len * d {
        return Err(ModelError::ShapeMismatch("encoder states do not match the source batch".into()));
    }
    let src_pad = src.pad_mask();
    let tgt_pad = tgt.pad_mask();
    let self_sh = AttnShape { batch: tgt.batch, tq: tgt.len, tk: tgt.len, d, heads: st.cfg.heads };
    let cross_sh = AttnShape { tk: src.len, ..self_sh };
    let (mut x, emb) = embed(st, tgt, lay.dec_tok, lay.dec_pos, lay.dec_ln_emb, ov, rng.as_deref_mut())?;
    let mut layers = Vec::with_capacity(lay.dec.len());
    for l in &lay.dec {
        let (h, ln1) = ln_fwd(p, l.ln1, &x, d);
        let (mut a, self_attn) = attention(
            self_sh,
            &h,
            None,
            &tgt_pad,
            true,
            &attn_params(p, &l.self_attn),
            st.cfg.attention_dropout,
            rng.as_deref_mut(),
        );
        let drop1 = dropout(&mut a, st.cfg.dropout, rng.as_deref_mut());
        add_into(&mut x, &a);
        let (h2, ln2) = ln_fwd(p, l.ln2, &x, d);
        let (mut c, cross) = attention(
            cross_sh,
            &h2,
            Some(enc_out),
            &src_pad,
            false,
            &attn_params(p, &l.cross),
            st.cfg.attention_dropout,
            rng.as_deref_mut(),
        );
        let drop2 = dropout(&mut c, st.cfg.dropout, rng.as_deref_mut());
        add_into(&mut x, &c);
        let (h3, ln3) = ln_fwd(p, l.ln3, &x, d);
        let (f, ffn) = ffn_fwd(p, &l.ffn, h3, st, rng.as_deref_mut());
        add_into(&mut x, &f);
        layers.push(DecLayerCache { ln1, self_attn, drop1, ln2, cross, drop2, ln3, ffn });
    }
    let (out, fin) = ln_fwd(p, lay.dec_final, &x, d);
    Ok((out, DecCache { emb, layers, fin }))
}

/// Output-projection logits `[rows, vocab]` of hidden states `[rows, d]`.
fn project(st: &ModelState, h: &[f64]) -> Vec<f64> {
    let (d, v) = (st.cfg.d_model, st.cfg.vocab_size);
    let rows = h.len() / d;
    let mut out = vec![0.0; rows * v];
    gemm(1.0, View::new(h, rows, d, d), View::new(st.params.t(st.layout.out_proj), v, d, d).t(), 0.0, &mut out, v);
    out
}

/// Runs encoder and decoder. Dropout is active iff `rng` is given.
pub fn forward(
    st: &ModelState,
    src: &Batch,
    tgt_in: &Batch,
    ov: EmbedOverride<'_>,
    want_logits: bool,
    mut rng: Option<&mut Rng>,
) -> Result<Forward, ModelError> {
    let (enc_out, enc) = encode(st, src, ov.src, rng.as_deref_mut())?;
    let (dec_out, dec) = decode(st, &enc_out, src, tgt_in, ov.tgt, rng)?;
    let logits = want_logits.then(|| project(st, &dec_out));
    Ok(Forward { logits, enc_out, dec_out, enc, dec, src_batch: src.batch, src_len: src.len, tgt_len: tgt_in.len })
}

/// Reverse pass. `d_logits` is the loss gradient on the logits and
/// `d_dec_out` an extra gradient on the decoder states (from a head).
/// Parameter gradients are accumulated into `grads`.
pub fn backward(
    st: &ModelState,
    fwd: &Forward,
    d_logits: Option<&[f64]>,
    d_dec_out: Option<&[f64]>,
    grads: &mut ParamSet,
) -> InputGrads {
    let (d, v, p, lay) = (st.cfg.d_model, st.cfg.vocab_size, &st.params, &st.layout);
    let rows = fwd.dec_out.len() / d;
    let mut dy = match d_dec_out {
        Some(g) => g.to_vec(),
        None => vec![0.0; rows * d],
    };
    if let Some(dl) = d_logits {
        gemm(1.0, View::new(dl, rows, v, v), View::new(p.t(lay.out_proj), v, d, d), 1.0, &mut dy, d);
        gemm(1.0, View::new(dl, rows, v, v).t(), View::new(&fwd.dec_out, rows, d, d), 1.0, grads.t_mut(lay.out_proj), d);
    }
    let src_rows = fwd.src_batch * fwd.src_len;
    let mut d_enc = vec![0.0; src_rows * d];

    let mut dx = ln_bwd(p, grads, lay.dec_final, &dy, &fwd.dec.fin, d);
    for (l, c) in lay.dec.iter().zip(&fwd.dec.layers).rev() {
        let dh3 = ffn_bwd(p, grads, &l.ffn, &dx, &c.ffn, st);
        add_into(&mut dx, &ln_bwd(p, grads, l.ln3, &dh3, &c.ln3, d));
        let mut dc = dx.clone();
        dropout_bwd(&mut dc, &c.drop2);
        let (dh2, de) = attention_bwd(&dc, &c.cross, &attn_params(p, &l.cross), attn_grads(grads, &l.cross));
        add_into(&mut d_enc, &de);
        add_into(&mut dx, &ln_bwd(p, grads, l.ln2, &dh2, &c.ln2, d));
        let mut da = dx.clone();
        dropout_bwd(&mut da, &c.drop1);
        let (dh, _) = attention_bwd(&da, &c.self_attn, &attn_params(p, &l.self_attn), attn_grads(grads, &l.self_attn));
        add_into(&mut dx, &ln_bwd(p, grads, l.ln1, &dh, &c.ln1, d));
    }
    let tgt = embed_bwd(st, grads, &dx, &fwd.dec.emb, lay.dec_tok, lay.dec_pos, lay.dec_ln_emb);

    let mut dx = ln_bwd(p, grads, lay.enc_final, &d_enc, &fwd.enc.fin, d);
    for (l, c) in lay.enc.iter().zip(&fwd.enc.layers).rev() {
        let dh2 = ffn_bwd(p, grads, &l.ffn, &dx, &c.ffn, st);
        add_into(&mut dx, &ln_bwd(p, grads, l.ln2, &dh2, &c.ln2, d));
        let mut da = dx.clone();
        dropout_bwd(&mut da, &c.drop1);
        let (dh, _) = attention_bwd(&da, &c.attn, &attn_params(p, &l.attn), attn_grads(grads, &l.attn));
        add_into(&mut dx, &ln_bwd(p, grads, l.ln1, &dh, &c.ln1, d));
    }
    let src = embed_bwd(st, grads, &dx, &fwd.enc.emb, lay.enc_tok, lay.enc_pos, lay.enc_ln_emb);
    InputGrads { src, tgt }
}

/// Mean token cross entropy over non-pad targets and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &[f64], vocab: usize, targets: &[u32]) -> Result<(f64, Vec<f64>), ModelError> {
    if logits.len() != targets.len() * vocab {
        return Err(ModelError::ShapeMismatch(format!(
            "{} logits for {} targets over {vocab} classes",
            logits.len(),
            targets.len()
        )));
    }
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(ModelError::AllPadBatch);
    }
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        g.copy_from_slice(&logits[r * vocab..(r + 1) * vocab]);
        let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + ln(g.iter().map(|&x| crate::math::exp(x - max)).sum::<f64>());
        total += lse - g[t as usize];
        softmax_rows(g, vocab);
        g[t as usize] -= 1.0;
        for x in g.iter_mut() {
            *x /= count as f64;
        }
    }
    Ok((total / count as f64, grad))
}

/// Mean token cross entropy over non-pad targets.
pub fn loss(logits: &[f64], vocab: usize, targets: &[u32]) -> Result<f64, ModelError> {
    cross_entropy(logits, vocab, targets).map(|(l, _)| l)
}

/// Loss and exact parameter gradients for one teacher-forced batch.
/// `tgt_out` holds the next-token targets aligned with `tgt_in`.
pub fn gradients(
    st: &ModelState,
    src: &Batch,
    tgt_in: &Batch,
    tgt_out: &Batch,
    rng: Option<&mut Rng>,
) -> Result<(f64, ParamSet), ModelError> {
    if tgt_out.ids.len() != tgt_in.ids.len() {
        return Err(ModelError::ShapeMismatch("target input and output shapes differ".into()));
    }
    let fwd = forward(st, src, tgt_in, EmbedOverride::default(), true, rng)?;
    let (l, dl) = cross_entropy(fwd.logits.as_deref().expect("requested"), st.cfg.vocab_size, &tgt_out.ids)?;
    let mut grads = st.params.zeros_like();
    backward(st, &fwd, Some(&dl), None, &mut grads);
    Ok((l, grads))
}

/// Encoder final states in evaluation mode.
pub fn encode_hidden(st: &ModelState, src: &Batch) -> Result<Vec<f64>, ModelError> {
    encode(st, src, None, None).map(|(h, _)| h)
}

/// Decoder final states in evaluation mode given encoder states.
pub fn decode_hidden(st: &ModelState, enc_out: &[f64], src: &Batch, tgt_in: &Batch) -> Result<Vec<f64>, ModelError> {
    decode(st, enc_out, src, tgt_in, None, None).map(|(h, _)| h)
}

/// Logits `[rows.len(), vocab]` for selected rows of decoder states.
pub fn logits_for_rows(st: &ModelState, dec_out: &[f64], rows: &[usize]) -> Vec<f64> {
    let d = st.cfg.d_model;
    let mut h = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        h.extend_from_slice(&dec_out[r * d..(r + 1) * d]);
    }
    project(st, &h)
}

/// Decoder-side final-layer vectors of a tokenized molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Representations {
    /// One row per non-special token, `[tokens, d_model]`.
    pub per_token: Vec<f64>,
    pub tokens: usize,
    /// Column means of `per_token`.
    pub mean: Vec<f64>,
}

/// Runs the sequence through the encoder and (shifted) through the
/// decoder; the state at the decoder position whose input is token `i`
/// represents token `i`. Special tokens and padding are skipped.
pub fn representations(st: &ModelState, ids: &[u32]) -> Result<Representations, ModelError> {
    let src = Batch::from_rows(&[ids]);
    let tgt = src.shift_right();
    let enc = encode_hidden(st, &src)?;
    let dec = decode_hidden(st, &enc, &src, &tgt)?;
    let d = st.cfg.d_model;
    let n = src.real_len(0);
    let mut per_token = Vec::new();
    let mut tokens = 0;
    for i in 0..n.saturating_sub(1) {
        if crate::tokenizer::Vocab::is_special(ids[i]) && ids[i] != crate::tokenizer::UNK {
            continue;
        }
        per_token.extend_from_slice(&dec[(i + 1) * d..(i + 2) * d]);
        tokens += 1;
    }
    let mut mean = vec![0.0; d];
    for row in per_token.chunks(d) {
        add_into(&mut mean, row);
    }
    if tokens > 0 {
        for m in &mut mean {
            *m /= tokens as f64;
        }
    }
    Ok(Representations { per_token, tokens, mean })
}

/// Worst relative disagreement per tensor between [`gradients`] and
/// central differences of the loss with step `h`, probing at most
/// `per_tensor` evenly spaced coordinates of each tensor (all if `None`).
/// Relative error is `|a − n| / max(|a|, |n|, floor)`. Dropout is off.
pub fn finite_difference_check(
    st: &ModelState,
    src: &Batch,
    tgt_in: &Batch,
    tgt_out: &Batch,
    h: f64,
    floor: f64,
    per_tensor: Option<usize>,
) -> Result<Vec<(alloc::string::String, f64)>, ModelError> {
    let (_, g) = gradients(st, src, tgt_in, tgt_out, None)?;
    let eval = |s: &ModelState| -> Result<f64, ModelError> {
        let f = forward(s, src, tgt_in, EmbedOverride::default(), true, None)?;
        loss(f.logits.as_deref().expect("requested"), s.cfg.vocab_size, &tgt_out.ids)
    };
    let mut probe = st.clone();
    let mut out = Vec::new();
    for k in 0..st.params.len() {
        let n = st.params.t(k).len();
        let picks: Vec<usize> = match per_tensor {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for i in picks {
            let x = st.params.t(k)[i];
            probe.params.t_mut(k)[i] = x + h;
            let up = eval(&probe)?;
            probe.params.t_mut(k)[i] = x - h;
            let down = eval(&probe)?;
            probe.params.t_mut(k)[i] = x;
            let num = (up - down) / (2.0 * h);
            let a = g.t(k)[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            worst = worst.max(rel);
        }
        out.push((st.params.specs()[k].name.clone(), worst));
    }
    Ok(out)
}

/// Which stack an embedding lookup feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Token-embedding rows `[batch * len, d_model]` the table lookup would
/// produce for `b`, before positions and layer norm.
pub fn token_embeddings(st: &ModelState, b: &Batch, side: Side) -> Vec<f64> {
    let d = st.cfg.d_model;
    let table = st.params.t(match side {
        Side::Source => st.layout.enc_tok,
        Side::Target => st.layout.dec_tok,
    });
    let mut out = Vec::with_capacity(b.ids.len() * d);
    for &id in &b.ids {
        out.extend_from_slice(&table[id as usize * d..(id as usize + 1) * d]);
    }
    out
}

/// Adds gradients taken with respect to overridden embedding rows back
/// onto the embedding table rows of `b`'s ids.
pub fn accumulate_embedding_grad(st: &ModelState, grads: &mut ParamSet, b: &Batch, side: Side, d_rows: &[f64]) {
    let d = st.cfg.d_model;
    let dt = grads.t_mut(match side {
        Side::Source => st.layout.enc_tok,
        Side::Target => st.layout.dec_tok,
    });
    for (row, &id) in d_rows.chunks(d).zip(&b.ids) {
        add_into(&mut dt[id as usize * d..(id as usize + 1) * d], row);
    }
}
