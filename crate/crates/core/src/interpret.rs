//! Attribution and representation analyses: Integrated Gradients with
//! token-to-atom mapping, positional normalization, L1 logistic probes
//! on frozen features, and Fréchet distances between datasets.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::finetune::{auc_roc, head_backward, head_forward_batch, FinetuneError};
use crate::linalg::{matmul, sym_eigen, sym_sqrt};
use crate::math::{exp, ln_1p, sqrt};
use crate::model::{token_embeddings, Batch, EmbedOverride, ModelError, ModelState, Side};
use crate::molgraph::{parse_smiles, MolGraph};
use crate::rng::derived;
use crate::tokenizer::{rule_spans, TokenSeq, MASK, PAD};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpretError {
    #[error("token offsets do not line up with SMILES symbols at byte {0}")]
    OffsetMismatch(usize),
    #[error("SMILES does not match the molecular graph: {0}")]
    ParseMismatch(String),
    #[error("no attribution sets")]
    EmptyCollection,
    #[error("only one class present")]
    SingleClass,
    #[error("solver stopped after {iterations} iterations at objective {objective}")]
    NotConverged { iterations: usize, objective: f64 },
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("statistics contain non-finite values")]
    NonFiniteStats,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
}

type Result<T> = core::result::Result<T, InterpretError>;

/// Reference input for Integrated Gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Baseline {
    /// Every token embedding replaced by the `<pad>` embedding.
    #[default]
    Pad,
    Mask,
    Zero,
}

/// Scalar explained by Integrated Gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IgTarget {
    /// Regression: the prediction. Two classes: logit 1 minus logit 0.
    /// More classes: logit of the predicted class minus the mean of the
    /// others.
    #[default]
    Contrastive,
    /// The raw logit of one output.
    Logit(usize),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IgResult {
    /// One score per input token, special tokens included.
    pub attributions: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl IgResult {
    /// `|Σ attributions − (F(x) − F(x'))| / |F(x) − F(x')|`.
    pub fn completeness_error(&self) -> f64 {
        let delta = self.f_input - self.f_baseline;
        (self.attributions.iter().sum::<f64>() - delta).abs() / delta.abs()
    }
}

fn target_weights(outputs: &[f64], regression: bool, target: IgTarget) -> Result<Vec<f64>> {
    let k = outputs.len();
    let mut w = vec![0.0; k];
    match target {
        IgTarget::Logit(c) if c < k => w[c] = 1.0,
        IgTarget::Logit(c) => return Err(InterpretError::Invalid(alloc::format!("head has no output {c}"))),
        IgTarget::Contrastive if regression || k == 1 => w[0] = 1.0,
        IgTarget::Contrastive if k == 2 => w = vec![-1.0, 1.0],
        IgTarget::Contrastive => {
            let c = (0..k).fold(0, |b, i| if outputs[i] > outputs[b] { i } else { b });
            w = vec![-1.0 / (k - 1) as f64; k];
            w[c] = 1.0;
        }
    }
    Ok(w)
}

/// Integrated Gradients of any differentiable scalar function, given its
/// gradient, on the straight path from `baseline` to `x` with the same
/// right Riemann sum as [`integrated_gradients`].
pub fn integrated_gradients_fn<G>(x: &[f64], baseline: &[f64], m: usize, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Vec<f64>,
{
    if m == 0 {
        return Err(InterpretError::Invalid("need at least one step".into()));
    }
    if x.len() != baseline.len() {
        return Err(InterpretError::DimensionMismatch(baseline.len(), x.len()));
    }
    let mut sum = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 1..=m {
        let a = k as f64 / m as f64;
        for i in 0..x.len() {
            point[i] = baseline[i] + a * (x[i] - baseline[i]);
        }
        let g = grad(&point);
        if g.len() != x.len() {
            return Err(InterpretError::DimensionMismatch(g.len(), x.len()));
        }
        for (s, gi) in sum.iter_mut().zip(&g) {
            *s += gi;
        }
    }
    Ok((0..x.len()).map(|i| (x[i] - baseline[i]) * sum[i] / m as f64).collect())
}

/// Integrated Gradients of a model with a head over the token embeddings
/// of `ids`, which feed both the encoder and (shifted) the decoder.
///
/// The path runs straight from the baseline to the actual embeddings in
/// both stacks; the decoder start token stays fixed. The integral uses
/// the right Riemann sum at `k/m`, `k = 1..=m`. A token's attribution sums
/// its encoder and decoder contributions over all embedding dimensions.
pub fn integrated_gradients(
    st: &ModelState,
    ids: &[u32],
    baseline: Baseline,
    target: IgTarget,
    m: usize,
) -> Result<IgResult> {
    if m == 0 {
        return Err(InterpretError::Invalid("need at least one step".into()));
    }
    let head = st.head.ok_or_else(|| InterpretError::Invalid("model has no head".into()))?;
    let one = Batch::from_rows(&[ids]);
    let n = one.len;
    let d = st.cfg.d_model;
    let tgt = one.shift_right();
    let x_src = token_embeddings(st, &one, Side::Source);
    let x_tgt = token_embeddings(st, &tgt, Side::Target);
    let base_row = |side: Side| -> Vec<f64> {
        match baseline {
            Baseline::Zero => vec![0.0; d],
            Baseline::Pad | Baseline::Mask => {
                let id = if baseline == Baseline::Pad { PAD } else { MASK };
                token_embeddings(st, &Batch { ids: vec![id], batch: 1, len: 1 }, side)
            }
        }
    };
    let (bs, bt) = (base_row(Side::Source), base_row(Side::Target));
    let point = |alpha: f64| -> (Vec<f64>, Vec<f64>) {
        let mut s = x_src.clone();
        let mut t = x_tgt.clone();
        for p in 0..n {
            for j in 0..d {
                s[p * d + j] = bs[j] + alpha * (x_src[p * d + j] - bs[j]);
                if p > 0 {
                    t[p * d + j] = bt[j] + alpha * (x_tgt[p * d + j] - bt[j]);
                }
            }
        }
        (s, t)
    };
    let eval = |alpha: f64| -> Result<Vec<f64>> {
        let (s, t) = point(alpha);
        let ov = EmbedOverride { src: Some(&s), tgt: Some(&t) };
        Ok(head_forward_batch(st, &one, ov, None)?.0)
    };
    let out_x = eval(1.0)?;
    let w = target_weights(&out_x, head.regression, target)?;
    let f = |o: &[f64]| o.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let f_input = f(&out_x);
    let f_baseline = f(&eval(0.0)?);

    const CHUNK: usize = 16;
    let mut g_src = vec![0.0; n * d];
    let mut g_tgt = vec![0.0; n * d];
    let mut scratch = st.params.zeros_like();
    let alphas: Vec<f64> = (1..=m).map(|k| k as f64 / m as f64).collect();
    for chunk in alphas.chunks(CHUNK) {
        let b = chunk.len();
        let batch = Batch { ids: one.ids.repeat(b), batch: b, len: n };
        let (mut s, mut t) = (Vec::with_capacity(b * n * d), Vec::with_capacity(b * n * d));
        for &a in chunk {
            let (ps, pt) = point(a);
            s.extend(ps);
            t.extend(pt);
        }
        let ov = EmbedOverride { src: Some(&s), tgt: Some(&t) };
        let (_, pass) = head_forward_batch(st, &batch, ov, None)?;
        let d_out: Vec<f64> = (0..b).flat_map(|_| w.iter().copied()).collect();
        let grads = head_backward(st, &pass, &d_out, &mut scratch)?;
        for r in 0..b {
            for i in 0..n * d {
                g_src[i] += grads.src[r * n * d + i];
                g_tgt[i] += grads.tgt[r * n * d + i];
            }
        }
    }
    let mut attributions = vec![0.0; n];
    for p in 0..n {
        for j in 0..d {
            let i = p * d + j;
            attributions[p] += (x_src[i] - bs[j]) * g_src[i] / m as f64;
        }
        // Decoder position p + 1 carries token p.
        if p + 1 < n {
            for j in 0..d {
                let i = (p + 1) * d + j;
                attributions[p] += (x_tgt[i] - bt[j]) * g_tgt[i] / m as f64;
            }
        }
    }
    Ok(IgResult { attributions, f_input, f_baseline })
}

/// Token scores redistributed onto the molecule.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttributionMap {
    pub per_token: Vec<(String, f64)>,
    pub per_symbol: Vec<(String, f64)>,
    pub per_atom: Vec<f64>,
    /// Keyed by bond index in the parsed graph.
    pub per_bond: BTreeMap<usize, f64>,
    /// Mass on brackets, parentheses, ring closures, dots and special
    /// tokens.
    pub dropped_mass: f64,
    pub normalized: bool,
}

enum SymbolKind {
    Atom(usize),
    Bond(Option<usize>),
    Dropped,
}

/// Classifies every rule symbol of `smiles`, replaying the parser's atom
/// numbering and bond creation.
fn classify(smiles: &str, spans: &[(usize, usize)], g: &MolGraph) -> Result<Vec<SymbolKind>> {
    let mut kinds: Vec<SymbolKind> = Vec::with_capacity(spans.len());
    let mut next_atom = 0usize;
    let mut prev: Option<usize> = None;
    let mut stack: Vec<Option<usize>> = Vec::new();
    // Bond symbol awaiting the bond it creates (index into `kinds`).
    let mut pending: Option<usize> = None;
    let mut rings: BTreeMap<&str, (usize, Option<usize>)> = BTreeMap::new();
    let mismatch = |m: &str| InterpretError::ParseMismatch(m.into());
    for &(s, e) in spans {
        let sym = &smiles[s..e];
        let c = sym.as_bytes()[0];
        match c {
            b'[' | b'*' | b'A'..=b'Z' | b'a'..=b'z' => {
                let a = next_atom;
                next_atom += 1;
                if a >= g.atom_count() {
                    return Err(mismatch("more atoms than the graph"));
                }
                if let (Some(p), Some(k)) = (prev, pending.take()) {
                    kinds[k] = SymbolKind::Bond(g.bond_between(p, a));
                }
                prev = Some(a);
                kinds.push(SymbolKind::Atom(a));
            }
            b'=' | b'#' | b'-' | b':' | b'/' | b'\\' | b'$' => {
                pending = Some(kinds.len());
                kinds.push(SymbolKind::Bond(None));
            }
            b'(' => {
                stack.push(prev);
                kinds.push(SymbolKind::Dropped);
            }
            b')' => {
                prev = stack.pop().ok_or_else(|| mismatch("unbalanced parenthesis"))?;
                kinds.push(SymbolKind::Dropped);
            }
            b'.' => {
                prev = None;
                pending = None;
                kinds.push(SymbolKind::Dropped);
            }
            b'0'..=b'9' | b'%' => {
                let here = prev.ok_or_else(|| mismatch("ring closure before any atom"))?;
                match rings.remove(sym) {
                    Some((open, open_bond)) => {
                        let bond = g.bond_between(open, here);
                        for k in [open_bond, pending.take()].into_iter().flatten() {
                            kinds[k] = SymbolKind::Bond(bond);
                        }
                    }
                    None => {
                        rings.insert(sym, (here, pending.take()));
                    }
                }
                kinds.push(SymbolKind::Dropped);
            }
            _ => kinds.push(SymbolKind::Dropped),
        }
    }
    if next_atom != g.atom_count() {
        return Err(mismatch("atom count differs from the graph"));
    }
    Ok(kinds)
}

/// Splits each token's score equally over the rule symbols it covers (a
/// bracket atom is one symbol), then routes atom symbols to atoms in
/// parse order, bond symbols to the bond they create, and everything
/// else, including tokens without symbols, to `dropped_mass`.
pub fn token_to_atom(scores: &[f64], seq: &TokenSeq, token_text: &[String], smiles: &str, g: &MolGraph) -> Result<AttributionMap> {
    if scores.len() != seq.len() || token_text.len() != seq.len() {
        return Err(InterpretError::Invalid("scores, tokens and sequence lengths differ".into()));
    }
    let spans = rule_spans(smiles).map_err(|e| InterpretError::ParseMismatch(alloc::format!("{e}")))?;
    let kinds = classify(smiles, &spans, g)?;
    let mut per_atom = vec![0.0; g.atom_count()];
    let mut per_bond = BTreeMap::new();
    let mut per_symbol = Vec::new();
    let mut dropped = 0.0;
    let mut per_token = Vec::with_capacity(scores.len());
    let mut cursor = 0usize;
    for (t, (&(s, e), &score)) in seq.offsets.iter().zip(scores).enumerate() {
        per_token.push((token_text[t].clone(), score));
        if s == e {
            dropped += score;
            continue;
        }
        while cursor < spans.len() && spans[cursor].0 < s {
            cursor += 1;
        }
        let first = cursor;
        while cursor < spans.len() && spans[cursor].1 <= e {
            cursor += 1;
        }
        let covered = &spans[first..cursor];
        if covered.is_empty() || covered[0].0 != s || covered[covered.len() - 1].1 != e {
            return Err(InterpretError::OffsetMismatch(s));
        }
        let share = score / covered.len() as f64;
        for (k, &(a, b)) in (first..cursor).zip(covered) {
            per_symbol.push((String::from(&smiles[a..b]), share));
            match kinds[k] {
                SymbolKind::Atom(i) => per_atom[i] += share,
                SymbolKind::Bond(Some(b)) => *per_bond.entry(b).or_insert(0.0) += share,
                SymbolKind::Bond(None) | SymbolKind::Dropped => dropped += share,
            }
        }
    }
    Ok(AttributionMap { per_token, per_symbol, per_atom, per_bond, dropped_mass: dropped, normalized: false })
}

/// Parses `smiles` and maps attributions onto it.
pub fn attribute_smiles(scores: &[f64], seq: &TokenSeq, token_text: &[String], smiles: &str) -> Result<AttributionMap> {
    let g = parse_smiles(smiles).map_err(|e| InterpretError::ParseMismatch(alloc::format!("{e}")))?;
    token_to_atom(scores, seq, token_text, smiles, &g)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionalProfile {
    /// Mean score at each position over the sets long enough to have it.
    pub mean: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Subtracts the collection's mean score at each token position.
pub fn positional_normalize(sets: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, PositionalProfile)> {
    if sets.is_empty() {
        return Err(InterpretError::EmptyCollection);
    }
    let len = sets.iter().map(Vec::len).max().unwrap_or(0);
    let mut sum = vec![0.0; len];
    let mut counts = vec![0usize; len];
    for s in sets {
        for (p, &x) in s.iter().enumerate() {
            sum[p] += x;
            counts[p] += 1;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let out = sets.iter().map(|s| s.iter().enumerate().map(|(p, x)| x - mean[p]).collect()).collect();
    Ok((out, PositionalProfile { mean, counts }))
}

/// Default regularization grid: `2^-10 ..= 2^4`.
pub fn default_c_grid() -> Vec<f64> {
    (-10..=4).map(|e| crate::math::powi(2.0, e)).collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeFit {
    pub c: f64,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub valid_auc: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Largest subgradient-optimality violation at the solution.
    pub kkt_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeResult {
    pub fits: Vec<ProbeFit>,
    pub train_rows: Vec<usize>,
    pub valid_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ProbeConfig {
    pub valid_fraction: f64,
    pub max_iter: usize,
    /// Relative objective decrease that ends the solve.
    pub rel_tol: f64,
    pub kkt_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { valid_fraction: 0.2, max_iter: 200_000, rel_tol: 1e-9, kkt_tol: 1e-6 }
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + ln_1p(exp(-z))
    } else {
        ln_1p(exp(z))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

struct Logistic<'a> {
    x: &'a [f64],
    y: &'a [f64],
    rows: &'a [usize],
    d: usize,
}

impl Logistic<'_> {
    fn margins(&self, w: &[f64], b: f64) -> Vec<f64> {
        self.rows.iter().map(|&r| b + (0..self.d).map(|j| self.x[r * self.d + j] * w[j]).sum::<f64>()).collect()
    }

    /// Summed logistic loss.
    fn loss(&self, w: &[f64], b: f64) -> f64 {
        self.margins(w, b).iter().zip(self.rows).map(|(&z, &r)| softplus(-self.y[r] * z)).sum()
    }

    fn grad(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let mut gw = vec![0.0; self.d];
        let mut gb = 0.0;
        for (&z, &r) in self.margins(w, b).iter().zip(self.rows) {
            let y = self.y[r];
            let c = -y * sigmoid(-y * z);
            gb += c;
            for j in 0..self.d {
                gw[j] += c * self.x[r * self.d + j];
            }
        }
        (gw, gb)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimizes `‖w‖₁ + C·Σ log(1 + exp(−y(w·x + b)))` by proximal gradient
/// with backtracking; the bias is unpenalized. Stops once the relative
/// objective decrease drops below `rel_tol` with subgradient optimality
/// holding to `kkt_tol`.
fn solve_l1(prob: &Logistic<'_>, c: f64, cfg: &ProbeConfig) -> Result<(Vec<f64>, f64, f64, usize, f64)> {
    let d = prob.d;
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let obj = |w: &[f64], b: f64| w.iter().map(|x| x.abs()).sum::<f64>() + c * prob.loss(w, b);
    let mut f = obj(&w, b);
    let mut step = 1.0;
    for it in 1..=cfg.max_iter {
        let (gw, gb) = prob.grad(&w, b);
        let smooth = c * prob.loss(&w, b);
        let (mut nw, mut nb);
        loop {
            nw = (0..d).map(|j| soft_threshold(w[j] - step * c * gw[j], step)).collect::<Vec<f64>>();
            nb = b - step * c * gb;
            let diff: Vec<f64> = nw.iter().zip(&w).map(|(a, b)| a - b).collect();
            let db = nb - b;
            let lin = c * (gw.iter().zip(&diff).map(|(g, x)| g * x).sum::<f64>() + gb * db);
            let quad = (diff.iter().map(|x| x * x).sum::<f64>() + db * db) / (2.0 * step);
            if c * prob.loss(&nw, nb) <= smooth + lin + quad + 1e-12 * smooth.abs() || step < 1e-20 {
                break;
            }
            step *= 0.5;
        }
        let nf = obj(&nw, nb);
        let decrease = f - nf;
        w = nw;
        b = nb;
        f = nf;
        step *= 1.5;
        if decrease.abs() <= cfg.rel_tol * f.abs().max(1e-300) {
            let v = kkt_violation(prob, &w, b, c);
            if v <= cfg.kkt_tol {
                return Ok((w, b, f, it, v));
            }
        }
    }
    Err(InterpretError::NotConverged { iterations: cfg.max_iter, objective: f })
}

/// Largest violation of the optimality conditions: `|C·∂L/∂b| = 0`,
/// `C·∂L/∂w_j = −sign(w_j)` for nonzero `w_j`, `|C·∂L/∂w_j| ≤ 1` otherwise.
fn kkt_violation(prob: &Logistic<'_>, w: &[f64], b: f64, c: f64) -> f64 {
    let (gw, gb) = prob.grad(w, b);
    let mut worst = (c * gb).abs();
    for j in 0..w.len() {
        let g = c * gw[j];
        let v = if w[j] == 0.0 { (g.abs() - 1.0).max(0.0) } else { (g + w[j].signum()).abs() };
        worst = worst.max(v);
    }
    worst
}

/// Stratified train/validation split of row indices.
fn stratified_split(labels: &[bool], valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = derived(seed, 0);
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for class in [false, true] {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rows.shuffle(&mut rng);
        let nv = (crate::math::round(rows.len() as f64 * valid_fraction) as usize).clamp(1, rows.len().saturating_sub(1).max(1));
        valid.extend_from_slice(&rows[..nv]);
        train.extend_from_slice(&rows[nv..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    (train, valid)
}

/// L1 logistic probes on frozen features `[n, d]`, one per `C`, trained
/// on a stratified split and scored by validation AUC.
pub fn probe_l1(features: &[f64], d: usize, labels: &[bool], c_grid: &[f64], seed: u64, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = labels.len();
    if d == 0 || features.len() != n * d {
        return Err(InterpretError::DimensionMismatch(features.len(), n * d));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos < 2 || n - pos < 2 {
        return Err(InterpretError::SingleClass);
    }
    let (train, valid) = stratified_split(labels, cfg.valid_fraction, seed);
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let prob = Logistic { x: features, y: &y, rows: &train, d };
    let held = Logistic { x: features, y: &y, rows: &valid, d };
    let vlabels: Vec<bool> = valid.iter().map(|&r| labels[r]).collect();
    let mut fits = Vec::with_capacity(c_grid.len());
    for &c in c_grid {
        if !(c > 0.0) {
            return Err(InterpretError::Invalid("C must be positive".into()));
        }
        let (weights, bias, objective, iterations, kkt) = solve_l1(&prob, c, cfg)?;
        let scores = held.margins(&weights, bias);
        let valid_auc = auc_roc(&scores, &vlabels).map_err(|_| InterpretError::SingleClass)?;
        let selected = (0..d).filter(|&j| weights[j] != 0.0).collect();
        fits.push(ProbeFit { c, selected, weights, bias, valid_auc, objective, iterations, kkt_violation: kkt });
    }
    Ok(ProbeResult { fits, train_rows: train, valid_rows: valid })
}

/// `(support size, AUC)` by increasing support size, keeping the best AUC
/// per size.
pub fn feature_curve(result: &ProbeResult) -> Vec<(usize, f64)> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for f in &result.fits {
        let e = best.entry(f.selected.len()).or_insert(f64::NEG_INFINITY);
        *e = e.max(f.valid_auc);
    }
    best.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `x` (`[n, d]`).
pub fn gaussian_stats(x: &[f64], d: usize) -> Result<GaussianStats> {
    if d == 0 || x.len() % d != 0 {
        return Err(InterpretError::DimensionMismatch(x.len(), d));
    }
    let n = x.len() / d;
    if n < 2 {
        return Err(InterpretError::TooFewSamples(n));
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<f64> = x.chunks(d).flat_map(|r| r.iter().zip(&mean).map(|(a, m)| a - m)).collect();
    let mut ct = vec![0.0; d * n];
    for i in 0..n {
        for j in 0..d {
            ct[j * n + i] = centered[i * d + j];
        }
    }
    let mut cov = matmul(&ct, &centered, d, n, d);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    Ok(GaussianStats { mean, cov, count: n })
}

/// Squared 2-Wasserstein distance between the Gaussians
/// `‖μ_A − μ_B‖² + Tr(Σ_A + Σ_B − 2(Σ_A^½ Σ_B Σ_A^½)^½)`, clipped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(InterpretError::DimensionMismatch(d, b.dim()));
    }
    let all = a.mean.iter().chain(&a.cov).chain(&b.mean).chain(&b.cov);
    if all.clone().any(|x| !x.is_finite()) {
        return Err(InterpretError::NonFiniteStats);
    }
    const TOL: f64 = 1e-12;
    let ra = sym_sqrt(&a.cov, d, TOL);
    let mut m = matmul(&matmul(&ra, &b.cov, d, d, d), &ra, d, d, d);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let (vals, _) = sym_eigen(&m, d);
    let max = vals.iter().fold(0.0f64, |x, v| x.max(v.abs()));
    let tr_sqrt: f64 = vals.iter().map(|&l| if l <= TOL * max { 0.0 } else { sqrt(l) }).sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace: f64 = (0..d).map(|i| a.cov[i * d + i] + b.cov[i * d + i]).sum();
    Ok((mean_term + trace - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DistanceConfig {
    /// Share of rows kept from a subsampled set.
    pub subsample_fraction: f64,
    /// Sets with more rows than this are subsampled.
    pub subsample_threshold: usize,
    /// Lower bound on the rows kept.
    pub min_samples: usize,
    pub seed: u64,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        DistanceConfig { subsample_fraction: 0.0005, subsample_threshold: 1_000_000, min_samples: 2000, seed: 0 }
    }
}

/// Rows of `x` kept for set `index` under `cfg`.
pub fn subsample_rows(n: usize, index: usize, cfg: &DistanceConfig) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).collect();
    if n > cfg.subsample_threshold {
        let keep = (crate::math::round(n as f64 * cfg.subsample_fraction) as usize).max(cfg.min_samples).min(n);
        rows.shuffle(&mut derived(cfg.seed, index as u64));
        rows.truncate(keep);
        rows.sort_unstable();
    }
    rows
}

/// Symmetric matrix of Fréchet distances between sets of mean-pooled
/// representations (`[n_i, d]` each), with a zero diagonal.
pub fn dataset_distance_matrix(sets: &[&[f64]], d: usize, cfg: &DistanceConfig) -> Result<Vec<Vec<f64>>> {
    if sets.len() < 2 {
        return Err(InterpretError::Invalid("need at least two datasets".into()));
    }
    let mut stats = Vec::with_capacity(sets.len());
    for (i, x) in sets.iter().enumerate() {
        if d == 0 || x.len() % d != 0 {
            return Err(InterpretError::DimensionMismatch(x.len(), d));
        }
        let rows = subsample_rows(x.len() / d, i, cfg);
        let sub: Vec<f64> = rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
        stats.push(gaussian_stats(&sub, d)?);
    }
    let k = sets.len();
    let mut out = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let v = frechet_distance(&stats[i], &stats[j])?;
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, Normal};

    fn seq_for(smiles: &str, pieces: &[&str]) -> (TokenSeq, Vec<String>) {
        let mut offsets = vec![(0, 0)];
        let mut at = 0;
        for p in pieces {
            offsets.push((at, at + p.len()));
            at += p.len();
        }
        assert_eq!(at, smiles.len());
        offsets.push((at, at));
        let ids = vec![0; offsets.len()];
        let mut text = vec![String::from("<bos>")];
        text.extend(pieces.iter().map(|p| String::from(*p)));
        text.push("<eos>".into());
        (TokenSeq { ids, offsets }, text)
    }

    #[test]
    fn equal_split_rules() {
        let (seq, text) = seq_for("CC=O", &["CC", "=O"]);
        let m = attribute_smiles(&[0.5, 0.4, 0.3, 0.1], &seq, &text, "CC=O").unwrap();
        assert_eq!(m.per_atom, vec![0.2, 0.2, 0.15]);
        assert_eq!(m.per_bond.get(&1), Some(&0.15));
        assert_eq!(m.dropped_mass, 0.6);

        let (seq, text) = seq_for("c1cc[nH]c1", &["c1", "cc", "[nH]", "c1"]);
        let m = attribute_smiles(&[0.0, 0.2, 0.4, 0.7, 0.2, 0.0], &seq, &text, "c1cc[nH]c1").unwrap();
        assert_eq!(m.per_atom[3], 0.7);
        assert!((m.dropped_mass - 0.2).abs() < 1e-15);

        let (seq, text) = seq_for("C=O", &["C=O"]);
        let m = attribute_smiles(&[0.0, 0.3, 0.0], &seq, &text, "C=O").unwrap();
        assert!((m.per_atom[0] - 0.1).abs() < 1e-15 && (m.per_atom[1] - 0.1).abs() < 1e-15);
        assert!((m.per_bond[&0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ring_closure_bond_symbol() {
        let (seq, text) = seq_for("C=1CCCC1", &["C", "=", "1", "CCCC", "1"]);
        let m = attribute_smiles(&[0.0, 0.1, 0.5, 0.2, 0.4, 0.3, 0.0], &seq, &text, "C=1CCCC1").unwrap();
        let g = parse_smiles("C=1CCCC1").unwrap();
        let b = g.bond_between(0, 4).unwrap();
        assert_eq!(m.per_bond.get(&b), Some(&0.5));
    }

    #[test]
    fn misaligned_offsets_rejected() {
        // "CC" | "l" splits the chlorine symbol.
        let seq = TokenSeq { ids: vec![5, 6], offsets: vec![(0, 2), (2, 3)] };
        let text = vec!["CC".into(), "l".into()];
        assert_eq!(
            attribute_smiles(&[1.0, 1.0], &seq, &text, "CCl").err(),
            Some(InterpretError::OffsetMismatch(0))
        );
    }

    #[test]
    fn ig_of_quadratic_converges() {
        // f(x) = x0^2 + 3 x0 x1; exact attributions along the path from 0.
        let x = [1.0, 2.0];
        let grad = |p: &[f64]| vec![2.0 * p[0] + 3.0 * p[1], 3.0 * p[0]];
        let a = integrated_gradients_fn(&x, &[0.0, 0.0], 4096, grad).unwrap();
        assert!((a[0] - 4.0).abs() < 1e-3 && (a[1] - 3.0).abs() < 1e-3, "{a:?}");
        assert!(integrated_gradients_fn(&x, &[0.0], 4, grad).is_err());
    }

    #[test]
    fn positional_profile() {
        let sets = vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0], vec![2.0, 2.0, 5.0, 9.0]];
        let (norm, prof) = positional_normalize(&sets).unwrap();
        assert_eq!(prof.mean, vec![2.0, 2.0, 4.0, 9.0]);
        assert_eq!(norm[0], vec![-1.0, 0.0, -1.0]);
        let (_, again) = positional_normalize(&norm).unwrap();
        assert!(again.mean.iter().all(|m| m.abs() < 1e-12));
        assert_eq!(positional_normalize(&[]).err(), Some(InterpretError::EmptyCollection));
    }

    #[test]
    fn gaussian_two_points() {
        let v = [1.0, -2.0, 0.5];
        let x: Vec<f64> = v.iter().chain(v.iter().map(|a| -a).collect::<Vec<_>>().iter()).copied().collect();
        let s = gaussian_stats(&x, 3).unwrap();
        assert_eq!(s.mean, vec![0.0; 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((s.cov[i * 3 + j] - 2.0 * v[i] * v[j]).abs() < 1e-15);
            }
        }
        assert_eq!(gaussian_stats(&v, 3).err(), Some(InterpretError::TooFewSamples(1)));
    }

    #[test]
    fn gaussian_matches_streaming() {
        let mut rng = seeded(5);
        let normal = Normal::new(1.0, 2.0).unwrap();
        let d = 4;
        let x: Vec<f64> = (0..500 * d).map(|_| normal.sample(&mut rng)).collect();
        let s = gaussian_stats(&x, d).unwrap();
        // Welford one-pass accumulation.
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d * d];
        for (k, row) in x.chunks(d).enumerate() {
            let delta: Vec<f64> = (0..d).map(|j| row[j] - mean[j]).collect();
            for j in 0..d {
                mean[j] += delta[j] / (k + 1) as f64;
            }
            for i in 0..d {
                for j in 0..d {
                    m2[i * d + j] += delta[i] * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..d * d {
            assert!((m2[i] / 499.0 - s.cov[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let a = GaussianStats { mean: vec![1.5], cov: vec![4.0], count: 10 };
        let b = GaussianStats { mean: vec![-0.5], cov: vec![0.25], count: 10 };
        let want = 2.0f64 * 2.0 + (2.0f64 - 0.5) * (2.0 - 0.5);
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-9);
    }

    #[test]
    fn l1_probe_planted_feature() {
        let mut rng = seeded(11);
        let normal = Normal::new(0.0f64, 1.0).unwrap();
        let (n, d) = (200, 12);
        let mut x = vec![0.0; n * d];
        let mut y = vec![false; n];
        for i in 0..n {
            y[i] = i % 2 == 0;
            for j in 0..d {
                x[i * d + j] = normal.sample(&mut rng);
            }
            x[i * d + 7] = if y[i] { 1.0 + normal.sample(&mut rng).abs() } else { -1.0 - normal.sample(&mut rng).abs() };
        }
        let r = probe_l1(&x, d, &y, &[crate::math::powi(2.0, -30), 0.02], 3, &ProbeConfig::default()).unwrap();
        assert!(r.fits[0].selected.is_empty());
        assert_eq!(r.fits[0].valid_auc, 0.5);
        assert_eq!(r.fits[1].selected, vec![7]);
        assert_eq!(r.fits[1].valid_auc, 1.0);
        for f in &r.fits {
            assert!(f.kkt_violation <= 1e-6);
        }
        let curve = feature_curve(&r);
        assert_eq!(curve, vec![(0, 0.5), (1, 1.0)]);
    }
}
