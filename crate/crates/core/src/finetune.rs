//! Fine-tuning recipes: sentence-level heads with a fixed dropout × lr
//! grid and checkpoint averaging, the multi-task policy, R3F-regularized
//! sequence-to-sequence fine-tuning, and the evaluation metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::math::{exp, ln, sqrt};
use crate::model::{
    accumulate_embedding_grad, adam_step, adam_update, backward, cross_entropy, forward, lr_at, swa_average,
    token_embeddings, Batch, Checkpoint, EmbedOverride, Forward, Head, InputGrads, ModelError, ModelState, ParamSet, Side,
    TrainConfig, Warmup,
};
use crate::rng::{derive_seed, derived, Rng};
use crate::tokenizer::PAD;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FinetuneError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("only one class present")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("label {0} is not a valid class")]
    InvalidLabel(f64),
    #[error("every grid cell failed")]
    AllCellsFailed,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
    Seq2Seq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Metric {
    AucRoc,
    Rmse,
    TopkExact,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Rmse)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub label_columns: Vec<String>,
    pub metric: Metric,
}

impl TaskSpec {
    pub fn classification(name: &str, num_classes: usize) -> Self {
        TaskSpec {
            name: name.into(),
            kind: TaskKind::Classification { num_classes },
            label_columns: vec![name.into()],
            metric: Metric::AucRoc,
        }
    }

    pub fn regression(name: &str) -> Self {
        TaskSpec { name: name.into(), kind: TaskKind::Regression, label_columns: vec![name.into()], metric: Metric::Rmse }
    }

    /// Head shape for sentence-level tasks.
    pub fn head(&self) -> Result<Head, FinetuneError> {
        match self.kind {
            TaskKind::Classification { num_classes } if num_classes >= 2 => {
                Ok(Head { outputs: num_classes, regression: false })
            }
            TaskKind::Classification { .. } => Err(FinetuneError::InvalidTask("need at least two classes".into())),
            TaskKind::Regression => Ok(Head { outputs: 1, regression: true }),
            TaskKind::Seq2Seq => Err(FinetuneError::InvalidTask("sequence tasks have no head".into())),
        }
    }
}

/// Fixed search grid and per-cell schedule.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GridSpec {
    pub dropouts: Vec<f64>,
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            dropouts: vec![0.1, 0.2, 0.3],
            lrs: vec![5e-6, 1e-5, 3e-5],
            epochs: 10,
            batch_size: 16,
            warmup_fraction: 0.16,
            clip_norm: 0.1,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl GridSpec {
    /// `(dropout, lr)` pairs, dropout-major.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.dropouts.iter().flat_map(|&d| self.lrs.iter().map(move |&l| (d, l))).collect()
    }

    fn schedule(&self, lr: f64, updates: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: lr,
            warmup: Warmup::Fraction(self.warmup_fraction),
            total_updates: updates,
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            adam_betas: self.adam_betas,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// A tokenized molecule and its label for one task (`None` = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

/// Train-split standardization of regression targets.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub const IDENTITY: Scaler = Scaler { mean: 0.0, std: 1.0 };

    pub fn fit(ys: &[f64]) -> Self {
        if ys.is_empty() {
            return Self::IDENTITY;
        }
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let std = sqrt(var);
        Scaler { mean, std: if std > 0.0 { std } else { 1.0 } }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Copy of `st` with a freshly initialized head for `task`.
pub fn attach_head(st: &ModelState, task: &TaskSpec, rng: &mut Rng) -> Result<ModelState, FinetuneError> {
    let mut out = st.clone();
    out.attach_head(task.head()?, rng)?;
    Ok(out)
}

/// Forward state of a head pass, needed by [`head_backward`].
pub struct HeadPass {
    fwd: Forward,
    /// Decoder row read by the head, per batch row.
    rows: Vec<usize>,
}

fn head_params(st: &ModelState) -> Result<(usize, usize, Head), FinetuneError> {
    let (w, b) = st.head_index().ok_or_else(|| FinetuneError::InvalidTask("model has no head".into()))?;
    Ok((w, b, st.head.expect("head index implies head")))
}

/// Head outputs `[batch, outputs]`. Each sequence is fed to the encoder
/// and, shifted right, to the decoder; the head reads the decoder state at
/// the last non-pad position.
pub fn head_forward(
    st: &ModelState,
    seqs: &[&[u32]],
    rng: Option<&mut Rng>,
) -> Result<(Vec<f64>, HeadPass), FinetuneError> {
    let src = Batch::from_rows(seqs);
    head_forward_batch(st, &src, EmbedOverride::default(), rng)
}

/// [`head_forward`] on a prepared batch, with optional embedding
/// overrides for the source and the shifted decoder input.
pub fn head_forward_batch(
    st: &ModelState,
    src: &Batch,
    ov: EmbedOverride<'_>,
    rng: Option<&mut Rng>,
) -> Result<(Vec<f64>, HeadPass), FinetuneError> {
    let (wi, bi, head) = head_params(st)?;
    let tgt = src.shift_right();
    let fwd = forward(st, src, &tgt, ov, false, rng)?;
    let d = st.cfg.d_model;
    let (w, bias) = (st.params.t(wi), st.params.t(bi));
    let mut out = Vec::with_capacity(src.batch * head.outputs);
    let mut rows = Vec::with_capacity(src.batch);
    for b in 0..src.batch {
        let r = b * tgt.len + tgt.real_len(b).max(1) - 1;
        let h = &fwd.dec_out[r * d..(r + 1) * d];
        for o in 0..head.outputs {
            let mut acc = bias[o];
            for j in 0..d {
                acc += h[j] * w[j * head.outputs + o];
            }
            out.push(acc);
        }
        rows.push(r);
    }
    Ok((out, HeadPass { fwd, rows }))
}

/// Accumulates parameter gradients for `d_out = ∂L/∂outputs` and returns
/// the gradients on the input embedding rows.
pub fn head_backward(
    st: &ModelState,
    pass: &HeadPass,
    d_out: &[f64],
    grads: &mut ParamSet,
) -> Result<InputGrads, FinetuneError> {
    let (wi, bi, head) = head_params(st)?;
    let d = st.cfg.d_model;
    let k = head.outputs;
    let mut d_dec = vec![0.0; pass.fwd.dec_out.len()];
    let w = st.params.t(wi);
    for (b, &r) in pass.rows.iter().enumerate() {
        let g = &d_out[b * k..(b + 1) * k];
        let h = &pass.fwd.dec_out[r * d..(r + 1) * d];
        for j in 0..d {
            d_dec[r * d + j] = (0..k).map(|o| g[o] * w[j * k + o]).sum();
        }
        let (gw, gb) = grads.tensors_mut().get_disjoint_mut([wi, bi]).map(|[a, b]| (a, b)).expect("distinct");
        for j in 0..d {
            for o in 0..k {
                gw[j * k + o] += h[j] * g[o];
            }
        }
        for o in 0..k {
            gb[o] += g[o];
        }
    }
    Ok(backward(st, &pass.fwd, None, Some(&d_dec), grads))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z = m + ln(row.iter().map(|x| exp(x - m)).sum::<f64>());
    row.iter().map(|x| x - z).collect()
}

/// Mean task loss over labeled rows and its gradient on the outputs.
/// Classification uses cross entropy, regression squared error on the
/// standardized target. Unlabeled rows contribute nothing.
pub fn task_loss(
    outputs: &[f64],
    head: Head,
    labels: &[Option<f64>],
    scaler: Scaler,
) -> Result<(f64, Vec<f64>, usize), FinetuneError> {
    let k = head.outputs;
    if outputs.len() != labels.len() * k {
        return Err(FinetuneError::LengthMismatch(outputs.len(), labels.len() * k));
    }
    let mut grad = vec![0.0; outputs.len()];
    let mut total = 0.0;
    let mut n = 0usize;
    for (b, y) in labels.iter().enumerate() {
        let Some(y) = *y else { continue };
        let out = &outputs[b * k..(b + 1) * k];
        let g = &mut grad[b * k..(b + 1) * k];
        n += 1;
        if head.regression {
            let diff = out[0] - scaler.forward(y);
            total += diff * diff;
            g[0] = 2.0 * diff;
        } else {
            let c = class_index(y, k)?;
            let lp = log_softmax(out);
            total -= lp[c];
            for o in 0..k {
                g[o] = exp(lp[o]) - if o == c { 1.0 } else { 0.0 };
            }
        }
    }
    if n == 0 {
        return Ok((0.0, grad, 0));
    }
    for g in &mut grad {
        *g /= n as f64;
    }
    Ok((total / n as f64, grad, n))
}

fn class_index(y: f64, k: usize) -> Result<usize, FinetuneError> {
    if y >= 0.0 && crate::math::floor(y) == y && (y as usize) < k {
        Ok(y as usize)
    } else {
        Err(FinetuneError::InvalidLabel(y))
    }
}

/// Evaluation-mode head outputs for many sequences.
pub fn predict(st: &ModelState, seqs: &[&[u32]], batch_size: usize) -> Result<Vec<f64>, FinetuneError> {
    let mut out = Vec::new();
    for chunk in seqs.chunks(batch_size.max(1)) {
        out.extend(head_forward(st, chunk, None)?.0);
    }
    Ok(out)
}

/// Validation loss and task metric of a model on labeled examples.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

pub fn evaluate(
    st: &ModelState,
    task: &TaskSpec,
    data: &[Example],
    scaler: Scaler,
    batch_size: usize,
) -> Result<Evaluation, FinetuneError> {
    let head = task.head()?;
    let labeled: Vec<&Example> = data.iter().filter(|e| e.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(FinetuneError::EmptySplit("evaluation"));
    }
    let seqs: Vec<&[u32]> = labeled.iter().map(|e| e.ids.as_slice()).collect();
    let labels: Vec<Option<f64>> = labeled.iter().map(|e| e.label).collect();
    let out = predict(st, &seqs, batch_size)?;
    let (loss, _, _) = task_loss(&out, head, &labels, scaler)?;
    let ys: Vec<f64> = labels.iter().map(|y| y.expect("filtered")).collect();
    let k = head.outputs;
    let metric = match task.metric {
        Metric::Rmse => {
            let preds: Vec<f64> = out.iter().map(|&z| scaler.inverse(z)).collect();
            rmse(&preds, &ys)?
        }
        Metric::AucRoc | Metric::TopkExact => class_auc(&out, k, &ys)?,
    };
    Ok(Evaluation { loss, metric })
}

/// Binary: AUC of the class-1 log-probability. More classes: mean
/// one-vs-rest AUC over classes present with both signs.
fn class_auc(out: &[f64], k: usize, ys: &[f64]) -> Result<f64, FinetuneError> {
    let lps: Vec<Vec<f64>> = out.chunks(k).map(log_softmax).collect();
    let classes: Vec<usize> = if k == 2 { vec![1] } else { (0..k).collect() };
    let mut aucs = Vec::new();
    for c in classes {
        let scores: Vec<f64> = lps.iter().map(|lp| lp[c]).collect();
        let pos: Vec<bool> = ys.iter().map(|&y| y as usize == c).collect();
        match auc_roc(&scores, &pos) {
            Ok(a) => aucs.push(a),
            Err(FinetuneError::SingleClass) if k > 2 => {}
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(FinetuneError::SingleClass);
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (rank-sum form).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, FinetuneError> {
    if scores.len() != labels.len() {
        return Err(FinetuneError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FinetuneError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Tied block i..=j shares the average 1-based rank.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, FinetuneError> {
    if preds.len() != targets.len() {
        return Err(FinetuneError::LengthMismatch(preds.len(), targets.len()));
    }
    if preds.is_empty() {
        return Err(FinetuneError::EmptySplit("prediction"));
    }
    let ss: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sqrt(ss / preds.len() as f64))
}

/// Per-epoch validation curve entry.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

/// Which candidate a cell kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SwaChoice {
    /// The single best epoch checkpoint.
    Raw,
    BestLoss,
    BestMetric,
    Last,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellReport {
    pub dropout: f64,
    pub lr: f64,
    pub epoch_curve: Vec<EpochPoint>,
    pub swa_choice: Option<SwaChoice>,
    /// Validation metric of the kept candidate (NaN when failed).
    pub val_metric: f64,
    pub val_loss: f64,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridReport {
    pub task: String,
    pub metric: Metric,
    pub cells: Vec<CellReport>,
    pub winner: usize,
    /// Set when the cell was fixed by the multi-task policy.
    pub inherited: Option<(f64, f64)>,
    pub scaler: Option<Scaler>,
    pub seed: u64,
}

impl GridReport {
    pub fn winner_cell(&self) -> &CellReport {
        &self.cells[self.winner]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub model: ModelState,
    pub report: GridReport,
}

/// Epoch window `[b − 2, b + 1]` (1-based) clipped into `1..=epochs`.
pub fn swa_window(best: usize, epochs: usize) -> core::ops::RangeInclusive<usize> {
    best.saturating_sub(2).max(1)..=(best + 1).min(epochs)
}

fn better(metric: Metric, selection_by_loss: bool, a: &Evaluation, b: &Evaluation) -> bool {
    if selection_by_loss {
        a.loss < b.loss
    } else if metric.higher_is_better() {
        a.metric > b.metric
    } else {
        a.metric < b.metric
    }
}

fn argbest(curve: &[EpochPoint], key: impl Fn(&EpochPoint) -> f64, higher: bool) -> usize {
    let mut best = 0;
    for (i, p) in curve.iter().enumerate() {
        let (x, y) = (key(p), key(&curve[best]));
        if (higher && x > y) || (!higher && x < y) {
            best = i;
        }
    }
    curve[best].epoch
}

struct CellResult {
    model: ModelState,
    report: CellReport,
}

fn train_cell(
    base: &ModelState,
    task: &TaskSpec,
    splits: &Splits,
    grid: &GridSpec,
    (dropout, lr): (f64, f64),
    scaler: Scaler,
    seed: u64,
) -> Result<CellResult, FinetuneError> {
    let head = task.head()?;
    let mut model = base.clone();
    model.cfg.dropout = dropout;
    let mut model = attach_head(&model, task, &mut derived(seed, 0))?;
    model.head = Some(head);
    let train: Vec<&Example> = splits.train.iter().filter(|e| e.label.is_some()).collect();
    let per_epoch = train.len().div_ceil(grid.batch_size) as u64;
    let sched = grid.schedule(lr, per_epoch * grid.epochs as u64, seed);
    let mut ck = Checkpoint::new(model, sched.clone());
    let mut grads = ck.model.params.zeros_like();
    let mut snapshots: Vec<ModelState> = Vec::with_capacity(grid.epochs);
    let mut curve = Vec::with_capacity(grid.epochs);
    let by_loss = !matches!(task.kind, TaskKind::Classification { .. });
    for epoch in 1..=grid.epochs {
        let mut order: Vec<&Example> = train.clone();
        order.shuffle(&mut derived(seed, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(grid.batch_size) {
            let seqs: Vec<&[u32]> = batch.iter().map(|e| e.ids.as_slice()).collect();
            let labels: Vec<Option<f64>> = batch.iter().map(|e| e.label).collect();
            let mut rng = derived(seed, (1 << 32) + ck.step);
            let (out, pass) = head_forward(&ck.model, &seqs, Some(&mut rng))?;
            let (l, d_out, _) = task_loss(&out, head, &labels, scaler)?;
            if !l.is_finite() {
                return Err(ModelError::NonFiniteLoss { step: ck.step + 1 }.into());
            }
            epoch_loss += l * batch.len() as f64;
            grads.fill(0.0);
            head_backward(&ck.model, &pass, &d_out, &mut grads)?;
            drop(pass);
            adam_step(&mut ck, &grads, &sched)?;
        }
        let ev = evaluate(&ck.model, task, &splits.valid, scaler, grid.batch_size)?;
        curve.push(EpochPoint {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss: ev.loss,
            val_metric: ev.metric,
        });
        snapshots.push(ck.model.clone());
    }

    let higher = task.metric.higher_is_better();
    let b_loss = argbest(&curve, |p| p.val_loss, false);
    let b_metric = argbest(&curve, |p| p.val_metric, higher);
    let b_select = if by_loss { b_loss } else { b_metric };
    let e = grid.epochs;
    let windows = [
        (SwaChoice::BestLoss, swa_window(b_loss, e)),
        (SwaChoice::BestMetric, swa_window(b_metric, e)),
        (SwaChoice::Last, e.saturating_sub(3).max(1)..=e),
    ];
    let raw = curve[b_select - 1];
    let mut best = (SwaChoice::Raw, snapshots[b_select - 1].clone(), Evaluation { loss: raw.val_loss, metric: raw.val_metric });
    for (choice, w) in windows {
        let members: Vec<&ModelState> = snapshots[*w.start() - 1..*w.end()].iter().collect();
        let avg = swa_average(&members)?;
        let ev = evaluate(&avg, task, &splits.valid, scaler, grid.batch_size)?;
        if better(task.metric, by_loss, &ev, &best.2) {
            best = (choice, avg, ev);
        }
    }
    let (choice, mut model, ev) = best;
    model.cfg.dropout = base.cfg.dropout;
    Ok(CellResult {
        model,
        report: CellReport {
            dropout,
            lr,
            epoch_curve: curve,
            swa_choice: Some(choice),
            val_metric: ev.metric,
            val_loss: ev.loss,
            failed: None,
        },
    })
}

fn check_splits(task: &TaskSpec, splits: &Splits) -> Result<Scaler, FinetuneError> {
    let labeled = |xs: &[Example]| xs.iter().filter_map(|e| e.label).collect::<Vec<f64>>();
    let (tr, va) = (labeled(&splits.train), labeled(&splits.valid));
    if tr.is_empty() {
        return Err(FinetuneError::EmptySplit("train"));
    }
    if va.is_empty() {
        return Err(FinetuneError::EmptySplit("valid"));
    }
    match task.kind {
        TaskKind::Classification { num_classes } => {
            for &y in tr.iter().chain(&va) {
                class_index(y, num_classes)?;
            }
            Ok(Scaler::IDENTITY)
        }
        TaskKind::Regression => Ok(Scaler::fit(&tr)),
        TaskKind::Seq2Seq => Err(FinetuneError::InvalidTask("use finetune_generative for sequence tasks".into())),
    }
}

/// Runs every grid cell on one task and keeps the best.
///
/// Each cell trains `grid.epochs` epochs from the pretrained weights with
/// a fresh head and fresh optimizer, snapshots every epoch, and keeps the
/// best of: the best single epoch, and averages over the windows around
/// the best validation loss, the best validation metric, and the last
/// four epochs. Selection inside a cell uses validation AUC for
/// classification and validation loss otherwise; the grid winner is the
/// cell with the best validation metric. Cells whose loss goes non-finite
/// are reported as failed.
pub fn finetune_task(
    ck: &Checkpoint,
    splits: &Splits,
    task: &TaskSpec,
    grid: &GridSpec,
    seed: u64,
) -> Result<FinetuneOutcome, FinetuneError> {
    run_grid(ck, splits, task, grid, &grid.cells(), seed, None)
}

fn run_grid(
    ck: &Checkpoint,
    splits: &Splits,
    task: &TaskSpec,
    grid: &GridSpec,
    cells: &[(f64, f64)],
    seed: u64,
    inherited: Option<(f64, f64)>,
) -> Result<FinetuneOutcome, FinetuneError> {
    let scaler = check_splits(task, splits)?;
    if grid.batch_size == 0 || grid.epochs == 0 || cells.is_empty() {
        return Err(FinetuneError::InvalidTask("grid needs cells, epochs and a batch size".into()));
    }
    let base = ck.model.without_head();
    let mut reports = Vec::with_capacity(cells.len());
    let mut best: Option<(usize, ModelState)> = None;
    for (i, &cell) in cells.iter().enumerate() {
        match train_cell(&base, task, splits, grid, cell, scaler, derive_seed(seed, i as u64)) {
            Ok(r) => {
                let wins = match &best {
                    None => true,
                    Some((j, _)) => {
                        let (a, b) = (r.report.val_metric, reports_metric(&reports, *j));
                        if task.metric.higher_is_better() { a > b } else { a < b }
                    }
                };
                if wins {
                    best = Some((i, r.model));
                }
                reports.push(r.report);
            }
            Err(FinetuneError::Model(e @ (ModelError::NonFiniteLoss { .. } | ModelError::NonFiniteGradient(_)))) => {
                reports.push(CellReport {
                    dropout: cell.0,
                    lr: cell.1,
                    epoch_curve: Vec::new(),
                    swa_choice: None,
                    val_metric: f64::NAN,
                    val_loss: f64::NAN,
                    failed: Some(alloc::format!("{e}")),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let (winner, model) = best.ok_or(FinetuneError::AllCellsFailed)?;
    let report = GridReport {
        task: task.name.clone(),
        metric: task.metric,
        cells: reports,
        winner,
        inherited,
        scaler: matches!(task.kind, TaskKind::Regression).then_some(scaler),
        seed,
    };
    Ok(FinetuneOutcome { model, report })
}

fn reports_metric(reports: &[CellReport], i: usize) -> f64 {
    reports[i].val_metric
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskOutcome {
    pub tasks: Vec<FinetuneOutcome>,
    /// Cell fixed after searching the first tasks.
    pub chosen_cell: (f64, f64),
    /// Arithmetic mean of the per-task validation metrics.
    pub mean_metric: f64,
}

/// Number of leading tasks that get the full grid search.
pub const SEARCHED_TASKS: usize = 4;

/// Grid-searches the first four tasks, fixes the `(dropout, lr)` cell with
/// the best mean validation metric over them, and trains every remaining
/// task with that single cell. All tasks use `seed`.
pub fn finetune_multitask(
    ck: &Checkpoint,
    tasks: &[(TaskSpec, Splits)],
    grid: &GridSpec,
    seed: u64,
) -> Result<MultitaskOutcome, FinetuneError> {
    if tasks.is_empty() {
        return Err(FinetuneError::InvalidTask("no tasks".into()));
    }
    let searched = tasks.len().min(SEARCHED_TASKS);
    let mut outcomes = Vec::with_capacity(tasks.len());
    for (task, splits) in &tasks[..searched] {
        outcomes.push(finetune_task(ck, splits, task, grid, seed)?);
    }
    let cells = grid.cells();
    let higher = tasks[0].0.metric.higher_is_better();
    let mut chosen = 0;
    let mut chosen_score = f64::NAN;
    for c in 0..cells.len() {
        let vals: Vec<f64> = outcomes.iter().map(|o| o.report.cells[c].val_metric).collect();
        if vals.iter().any(|v| v.is_nan()) {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        if chosen_score.is_nan() || (higher && mean > chosen_score) || (!higher && mean < chosen_score) {
            chosen = c;
            chosen_score = mean;
        }
    }
    if chosen_score.is_nan() {
        return Err(FinetuneError::AllCellsFailed);
    }
    let cell = cells[chosen];
    for (task, splits) in &tasks[searched..] {
        outcomes.push(run_grid(ck, splits, task, grid, &[cell], seed, Some(cell))?);
    }
    let mean_metric = outcomes.iter().map(|o| o.report.winner_cell().val_metric).sum::<f64>() / outcomes.len() as f64;
    Ok(MultitaskOutcome { tasks: outcomes, chosen_cell: cell, mean_metric })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum NoiseType {
    Uniform,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct R3FConfig {
    pub lambda: f64,
    pub noise: NoiseType,
    pub sigma: f64,
}

impl R3FConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if !(self.lambda >= 0.0) || !(self.sigma >= 0.0) {
            return Err(FinetuneError::InvalidTask("R3F lambda and sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// The six sweep runs: {uniform, normal} × λ ∈ {0.001, 0.01, 0.1}, σ = 1e-5.
pub fn r3f_sweep() -> Vec<R3FConfig> {
    [NoiseType::Uniform, NoiseType::Normal]
        .into_iter()
        .flat_map(|noise| [0.001, 0.01, 0.1].map(|lambda| R3FConfig { lambda, noise, sigma: 1e-5 }))
        .collect()
}

/// A source/target token pair for sequence-to-sequence fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqExample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// Teacher-forcing batch: (source, decoder input, decoder target).
pub fn seq2seq_batch(examples: &[&Seq2SeqExample]) -> (Batch, Batch, Batch) {
    let src = Batch::from_rows(&examples.iter().map(|e| e.src.as_slice()).collect::<Vec<_>>());
    let out = Batch::from_rows(&examples.iter().map(|e| e.tgt.as_slice()).collect::<Vec<_>>());
    (src, out.shift_right(), out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R3FLoss {
    pub total: f64,
    pub cross_entropy: f64,
    /// Symmetric KL averaged over non-pad target positions.
    pub symmetric_kl: f64,
}

fn sample_noise(n: usize, rcfg: &R3FConfig, rng: &mut Rng) -> Vec<f64> {
    if rcfg.sigma == 0.0 {
        return vec![0.0; n];
    }
    match rcfg.noise {
        NoiseType::Uniform => (0..n).map(|_| rng.gen_range(-rcfg.sigma..=rcfg.sigma)).collect(),
        NoiseType::Normal => {
            let normal = Normal::new(0.0, rcfg.sigma).expect("finite sigma");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
    }
}

/// Σ_k (p_k − q_k)(a_k − b_k) per row, plus its gradients in `a` and `b`.
fn symmetric_kl_rows(a: &[f64], b: &[f64], vocab: usize, targets: &[u32]) -> (f64, Vec<f64>, Vec<f64>, usize) {
    let mut total = 0.0;
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let mut n = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        n += 1;
        let (ra, rb) = (&a[r * vocab..(r + 1) * vocab], &b[r * vocab..(r + 1) * vocab]);
        let p: Vec<f64> = log_softmax(ra).into_iter().map(exp).collect();
        let q: Vec<f64> = log_softmax(rb).into_iter().map(exp).collect();
        let delta: Vec<f64> = ra.iter().zip(rb).map(|(x, y)| x - y).collect();
        let ep: f64 = p.iter().zip(&delta).map(|(p, d)| p * d).sum();
        let eq: f64 = q.iter().zip(&delta).map(|(q, d)| q * d).sum();
        total += p.iter().zip(&q).zip(&delta).map(|((p, q), d)| (p - q) * d).sum::<f64>();
        for k in 0..vocab {
            da[r * vocab + k] = p[k] * (delta[k] - ep) + (p[k] - q[k]);
            db[r * vocab + k] = -(q[k] * (delta[k] - eq) + (p[k] - q[k]));
        }
    }
    (total, da, db, n)
}

/// Cross entropy plus `λ` times the symmetric KL between output
/// distributions with clean and with noise-perturbed source embeddings.
/// `rng` only drives the noise. With `λ = 0` the noisy pass is skipped and
/// the result is the plain loss.
pub fn r3f_loss(
    st: &ModelState,
    src: &Batch,
    tgt_in: &Batch,
    tgt_out: &Batch,
    rcfg: &R3FConfig,
    rng: &mut Rng,
) -> Result<R3FLoss, FinetuneError> {
    r3f_pass(st, src, tgt_in, tgt_out, rcfg, rng, None, None)
}

#[allow(clippy::too_many_arguments)]
fn r3f_pass(
    st: &ModelState,
    src: &Batch,
    tgt_in: &Batch,
    tgt_out: &Batch,
    rcfg: &R3FConfig,
    noise_rng: &mut Rng,
    mut dropout_rng: Option<&mut Rng>,
    grads: Option<&mut ParamSet>,
) -> Result<R3FLoss, FinetuneError> {
    rcfg.validate()?;
    let v = st.cfg.vocab_size;
    let clean = forward(st, src, tgt_in, EmbedOverride::default(), true, dropout_rng.as_deref_mut())?;
    let a = clean.logits.as_deref().expect("requested");
    let (ce, mut d_clean) = cross_entropy(a, v, &tgt_out.ids)?;
    if rcfg.lambda == 0.0 {
        if let Some(g) = grads {
            backward(st, &clean, Some(&d_clean), None, g);
        }
        return Ok(R3FLoss { total: ce, cross_entropy: ce, symmetric_kl: 0.0 });
    }
    let mut emb = token_embeddings(st, src, Side::Source);
    let noise = sample_noise(emb.len(), rcfg, noise_rng);
    for (e, z) in emb.iter_mut().zip(noise) {
        *e += z;
    }
    let ov = EmbedOverride { src: Some(&emb), tgt: None };
    let noisy = forward(st, src, tgt_in, ov, true, dropout_rng)?;
    let b = noisy.logits.as_deref().expect("requested");
    let (skl, da, db, n) = symmetric_kl_rows(a, b, v, &tgt_out.ids);
    let n = n.max(1) as f64;
    let skl = skl / n;
    if let Some(g) = grads {
        let scale = rcfg.lambda / n;
        for (x, y) in d_clean.iter_mut().zip(&da) {
            *x += scale * y;
        }
        let d_noisy: Vec<f64> = db.iter().map(|y| scale * y).collect();
        backward(st, &clean, Some(&d_clean), None, g);
        let inputs = backward(st, &noisy, Some(&d_noisy), None, g);
        accumulate_embedding_grad(st, g, src, Side::Source, &inputs.src);
    }
    Ok(R3FLoss { total: ce + rcfg.lambda * skl, cross_entropy: ce, symmetric_kl: skl })
}

/// R3F loss and its exact parameter gradients. Noise comes from
/// `noise_rng`, dropout from `dropout_rng`.
pub fn r3f_gradients(
    st: &ModelState,
    src: &Batch,
    tgt_in: &Batch,
    tgt_out: &Batch,
    rcfg: &R3FConfig,
    noise_rng: &mut Rng,
    dropout_rng: Option<&mut Rng>,
) -> Result<(R3FLoss, ParamSet), FinetuneError> {
    let mut g = st.params.zeros_like();
    let l = r3f_pass(st, src, tgt_in, tgt_out, rcfg, noise_rng, dropout_rng, Some(&mut g))?;
    Ok((l, g))
}

/// Schedule and optimizer for sequence-to-sequence fine-tuning.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct GenerativeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of updates at which the learning rate peaks.
    pub warmup_fraction: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub dropout: f64,
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        GenerativeConfig {
            epochs: 10,
            batch_size: 16,
            peak_lr: 3e-5,
            warmup_fraction: 0.06,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 0.1,
            dropout: 0.1,
        }
    }
}

impl GenerativeConfig {
    pub fn schedule(&self, updates: u64, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            warmup: Warmup::Fraction(self.warmup_fraction),
            total_updates: updates,
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            adam_betas: self.adam_betas,
            adam_eps: self.adam_eps,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerativeRun {
    pub r3f: R3FConfig,
    /// Token-level validation cross entropy after each epoch.
    pub val_curve: Vec<f64>,
    pub val_loss: f64,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeOutcome {
    pub model: ModelState,
    pub runs: Vec<GenerativeRun>,
    pub winner: usize,
    /// False when the checkpoint had no pretraining moments and the
    /// optimizer started from zeros.
    pub warm_started: bool,
    pub schedule: TrainConfig,
}

/// Token-weighted mean cross entropy of teacher-forced predictions.
pub fn seq2seq_loss(st: &ModelState, data: &[Seq2SeqExample], batch_size: usize) -> Result<f64, FinetuneError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Seq2SeqExample> = chunk.iter().collect();
        let (src, tin, tout) = seq2seq_batch(&refs);
        let f = forward(st, &src, &tin, EmbedOverride::default(), true, None)?;
        let n = tout.ids.iter().filter(|&&t| t != PAD).count();
        let (l, _) = cross_entropy(f.logits.as_deref().expect("requested"), st.cfg.vocab_size, &tout.ids)?;
        total += l * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(FinetuneError::EmptySplit("valid"));
    }
    Ok(total / count as f64)
}

/// Sweeps R3F settings, each run fine-tuning `ck.model` for
/// `gcfg.epochs` epochs with the optimizer warm-started from the
/// checkpoint's moments (bias correction continues from the pretraining
/// step count), and keeps the run with the lowest validation token loss.
/// A checkpoint at step 0 has no moments; runs then start from zeros and
/// `warm_started` is false.
pub fn finetune_generative(
    ck: &Checkpoint,
    train: &[Seq2SeqExample],
    valid: &[Seq2SeqExample],
    sweep: &[R3FConfig],
    gcfg: &GenerativeConfig,
    seed: u64,
) -> Result<GenerativeOutcome, FinetuneError> {
    if train.is_empty() {
        return Err(FinetuneError::EmptySplit("train"));
    }
    if valid.is_empty() {
        return Err(FinetuneError::EmptySplit("valid"));
    }
    if sweep.is_empty() || gcfg.batch_size == 0 || gcfg.epochs == 0 {
        return Err(FinetuneError::InvalidTask("sweep, epochs and batch size must be non-empty".into()));
    }
    let warm = ck.step > 0 && ck.adam_m.same_shape(&ck.model.params) && ck.adam_v.same_shape(&ck.model.params);
    let per_epoch = train.len().div_ceil(gcfg.batch_size) as u64;
    let sched = gcfg.schedule(per_epoch * gcfg.epochs as u64, seed);
    sched.validate()?;
    let mut base = ck.model.without_head();
    base.cfg.dropout = gcfg.dropout;
    let mut runs = Vec::with_capacity(sweep.len());
    let mut best: Option<(usize, f64, ModelState)> = None;
    for (i, rcfg) in sweep.iter().enumerate() {
        rcfg.validate()?;
        let run_seed = derive_seed(seed, i as u64);
        let mut params = base.clone();
        let (mut m, mut v) = if warm {
            (ck.adam_m.clone(), ck.adam_v.clone())
        } else {
            (params.params.zeros_like(), params.params.zeros_like())
        };
        let bias0 = if warm { ck.step } else { 0 };
        let mut curve = Vec::with_capacity(gcfg.epochs);
        let mut step = 0u64;
        let mut failure = None;
        'epochs: for epoch in 1..=gcfg.epochs {
            let mut order: Vec<&Seq2SeqExample> = train.iter().collect();
            order.shuffle(&mut derived(run_seed, epoch as u64));
            for chunk in order.chunks(gcfg.batch_size) {
                let (src, tin, tout) = seq2seq_batch(chunk);
                let mut noise = derived(run_seed, (1 << 32) + step);
                let mut drop = derived(run_seed, (2 << 32) + step);
                let res = r3f_gradients(&params, &src, &tin, &tout, rcfg, &mut noise, Some(&mut drop)).and_then(
                    |(l, g)| {
                        if !l.total.is_finite() {
                            return Err(ModelError::NonFiniteLoss { step: step + 1 }.into());
                        }
                        let lr = lr_at(step + 1, &sched);
                        adam_update(&mut params.params, &mut m, &mut v, &g, lr, bias0 + step + 1, &sched)?;
                        Ok(())
                    },
                );
                match res {
                    Ok(()) => step += 1,
                    Err(FinetuneError::Model(e @ (ModelError::NonFiniteLoss { .. } | ModelError::NonFiniteGradient(_)))) => {
                        failure = Some(alloc::format!("{e}"));
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                }
            }
            curve.push(seq2seq_loss(&params, valid, gcfg.batch_size)?);
        }
        let val_loss = if failure.is_some() { f64::NAN } else { *curve.last().expect("epochs >= 1") };
        if failure.is_none() && best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            params.cfg.dropout = ck.model.cfg.dropout;
            best = Some((i, val_loss, params));
        }
        runs.push(GenerativeRun { r3f: *rcfg, val_curve: curve, val_loss, failed: failure });
    }
    let (winner, _, model) = best.ok_or(FinetuneError::AllCellsFailed)?;
    Ok(GenerativeOutcome { model, runs, winner, warm_started: warm, schedule: sched })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng as _;
    use crate::rng::seeded;
    use crate::tokenizer::{BOS, EOS};

    const V: usize = 12;

    fn micro() -> ModelState {
        ModelState::init(&ModelConfig::micro(V).without_dropout(), &mut seeded(3)).unwrap()
    }

    /// Worst relative error between `grad` and central differences of `f`
    /// on a spread of coordinates in every tensor.
    fn fd_worst(st: &ModelState, grad: &ParamSet, f: impl Fn(&ModelState) -> f64) -> (String, f64) {
        let mut probe = st.clone();
        let mut worst = (String::new(), 0.0f64);
        for k in 0..st.params.len() {
            let n = st.params.t(k).len();
            for i in (0..12).map(|j| j * n / 12).filter(|&i| i < n) {
                let x = st.params.t(k)[i];
                probe.params.t_mut(k)[i] = x + 1e-5;
                let up = f(&probe);
                probe.params.t_mut(k)[i] = x - 1e-5;
                let down = f(&probe);
                probe.params.t_mut(k)[i] = x;
                let num = (up - down) / 2e-5;
                let a = grad.t(k)[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                if rel > worst.1 {
                    worst = (st.params.specs()[k].name.clone(), rel);
                }
            }
        }
        worst
    }

    fn pairs() -> Vec<Seq2SeqExample> {
        vec![
            Seq2SeqExample { src: vec![BOS, 5, 6, 7, EOS], tgt: vec![BOS, 8, 9, EOS] },
            Seq2SeqExample { src: vec![BOS, 10, EOS], tgt: vec![BOS, 11, 5, 6, 7, EOS] },
        ]
    }

    #[test]
    fn auc_known_values() {
        let auc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(auc_roc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(auc_roc(&[1.0, 2.0, 3.0], &[false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_roc(&[1.0, 2.0], &[true, true]), Err(FinetuneError::SingleClass));
        assert_eq!(auc_roc(&[1.0], &[true, false]), Err(FinetuneError::LengthMismatch(1, 2)));
    }

    #[test]
    fn rmse_known_value() {
        assert!((rmse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap() - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[1.0], &[1.0, 2.0]), Err(FinetuneError::LengthMismatch(1, 2)));
    }

    #[test]
    fn swa_windows_clip_to_range() {
        assert_eq!(swa_window(1, 10), 1..=2);
        assert_eq!(swa_window(5, 10), 3..=6);
        assert_eq!(swa_window(10, 10), 8..=10);
        assert_eq!(swa_window(1, 1), 1..=1);
    }

    #[test]
    fn grid_has_nine_cells() {
        let g = GridSpec::default();
        assert_eq!(g.cells().len(), 9);
        assert_eq!(g.cells()[0], (0.1, 5e-6));
        assert_eq!(r3f_sweep().len(), 6);
    }

    #[test]
    fn task_loss_masks_missing_labels() {
        let head = Head { outputs: 2, regression: false };
        let out = [0.0, 1.0, 5.0, -5.0];
        let (l, g, n) = task_loss(&out, head, &[Some(1.0), None], Scaler::IDENTITY).unwrap();
        assert_eq!(n, 1);
        assert!((l - (1.0 + exp(-1.0)).ln()).abs() < 1e-12);
        assert_eq!(&g[2..], &[0.0, 0.0]);
        assert_eq!(task_loss(&out, head, &[Some(2.0), None], Scaler::IDENTITY).err(), Some(FinetuneError::InvalidLabel(2.0)));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for (task, labels) in [
            (TaskSpec::classification("c", 2), vec![Some(1.0), Some(0.0)]),
            (TaskSpec::regression("r"), vec![Some(0.7), Some(-1.2)]),
        ] {
            let st = attach_head(&micro(), &task, &mut seeded(4)).unwrap();
            let seqs: [&[u32]; 2] = [&[BOS, 5, 6, 7, EOS], &[BOS, 8, EOS]];
            let head = task.head().unwrap();
            let f = |s: &ModelState| {
                let (o, _) = head_forward(s, &seqs, None).unwrap();
                task_loss(&o, head, &labels, Scaler::IDENTITY).unwrap().0
            };
            let (o, pass) = head_forward(&st, &seqs, None).unwrap();
            let (_, d, _) = task_loss(&o, head, &labels, Scaler::IDENTITY).unwrap();
            let mut g = st.params.zeros_like();
            head_backward(&st, &pass, &d, &mut g).unwrap();
            let (name, rel) = fd_worst(&st, &g, f);
            assert!(rel < 1e-4, "{}: {name} {rel}", task.name);
        }
    }

    #[test]
    fn head_reads_last_real_position() {
        let task = TaskSpec::regression("r");
        let st = attach_head(&micro(), &task, &mut seeded(4)).unwrap();
        let alone = head_forward(&st, &[&[BOS, 8, EOS]], None).unwrap().0;
        let padded = head_forward(&st, &[&[BOS, 8, EOS], &[BOS, 5, 6, 7, 9, 10, EOS]], None).unwrap().0;
        assert!((alone[0] - padded[0]).abs() < 1e-12);
    }

    #[test]
    fn symmetric_kl_matches_definition() {
        let a = [0.3, -1.0, 2.0];
        let b = [1.0, 0.5, -0.2];
        let (s, _, _, n) = symmetric_kl_rows(&a, &b, 3, &[5]);
        let p: Vec<f64> = log_softmax(&a).into_iter().map(exp).collect();
        let q: Vec<f64> = log_softmax(&b).into_iter().map(exp).collect();
        let kl = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        assert_eq!(n, 1);
        assert!((s - (kl(&p, &q) + kl(&q, &p))).abs() < 1e-12);
        assert_eq!(symmetric_kl_rows(&a, &b, 3, &[PAD]).0, 0.0);
    }

    #[test]
    fn r3f_gradients_match_finite_differences() {
        let st = micro();
        let data = pairs();
        let (src, tin, tout) = seq2seq_batch(&data.iter().collect::<Vec<_>>());
        for noise in [NoiseType::Uniform, NoiseType::Normal] {
            let rcfg = R3FConfig { lambda: 0.5, noise, sigma: 0.3 };
            let f = |s: &ModelState| r3f_loss(s, &src, &tin, &tout, &rcfg, &mut seeded(9)).unwrap().total;
            let (l, g) = r3f_gradients(&st, &src, &tin, &tout, &rcfg, &mut seeded(9), None).unwrap();
            assert!(l.symmetric_kl > 0.0);
            let (name, rel) = fd_worst(&st, &g, f);
            assert!(rel < 1e-4, "{noise:?}: {name} {rel}");
        }
    }

    #[test]
    fn zero_lambda_is_plain_cross_entropy() {
        let st = micro();
        let data = pairs();
        let (src, tin, tout) = seq2seq_batch(&data.iter().collect::<Vec<_>>());
        let rcfg = R3FConfig { lambda: 0.0, noise: NoiseType::Normal, sigma: 1e-5 };
        let (l, g) = r3f_gradients(&st, &src, &tin, &tout, &rcfg, &mut seeded(1), None).unwrap();
        let (plain, pg) = crate::model::gradients(&st, &src, &tin, &tout, None).unwrap();
        assert_eq!(l.total, plain);
        assert_eq!(g, pg);
    }

    #[test]
    fn auc_matches_pairwise_count() {
        let mut rng = seeded(8);
        let scores: Vec<f64> = (0..50).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
        let labels: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.4)).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..50 {
            for j in 0..50 {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let auc = auc_roc(&scores, &labels).unwrap();
        assert!((auc - num / den).abs() < 1e-12);
        let squashed: Vec<f64> = scores.iter().map(|x| (x * 3.0).exp() - 7.0).collect();
        assert_eq!(auc_roc(&squashed, &labels).unwrap(), auc);
        assert_eq!(auc_roc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn rmse_matches_naive() {
        let mut rng = seeded(2);
        let p: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..100).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut ss = 0.0;
        for i in 0..100 {
            ss += (p[i] - t[i]) * (p[i] - t[i]);
        }
        assert!((rmse(&p, &t).unwrap() - (ss / 100.0).sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&p, &p).unwrap(), 0.0);
        let shifted: Vec<f64> = t.iter().map(|x| x + 1.0).collect();
        assert!((rmse(&shifted, &t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_label_rows_do_not_change_gradients() {
        let task = TaskSpec::classification("c", 2);
        let st = attach_head(&micro(), &task, &mut seeded(4)).unwrap();
        let head = task.head().unwrap();
        let grads = |seqs: &[&[u32]], labels: &[Option<f64>]| {
            let (o, pass) = head_forward(&st, seqs, None).unwrap();
            let (l, d, _) = task_loss(&o, head, labels, Scaler::IDENTITY).unwrap();
            let mut g = st.params.zeros_like();
            head_backward(&st, &pass, &d, &mut g).unwrap();
            (l, g)
        };
        let (l1, g1) = grads(&[&[BOS, 5, 6, EOS]], &[Some(1.0)]);
        let (l2, g2) = grads(&[&[BOS, 5, 6, EOS], &[BOS, 7, 8, 9, EOS]], &[Some(1.0), None]);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.tensors().iter().flatten().zip(g2.tensors().iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_gives_zero_kl() {
        let st = micro();
        let data = pairs();
        let (src, tin, tout) = seq2seq_batch(&data.iter().collect::<Vec<_>>());
        let rcfg = R3FConfig { lambda: 0.1, noise: NoiseType::Uniform, sigma: 0.0 };
        let l = r3f_loss(&st, &src, &tin, &tout, &rcfg, &mut seeded(1)).unwrap();
        assert_eq!(l.symmetric_kl, 0.0);
        let rcfg = R3FConfig { sigma: 1e-2, ..rcfg };
        assert!(r3f_loss(&st, &src, &tin, &tout, &rcfg, &mut seeded(1)).unwrap().symmetric_kl >= 0.0);
    }

    #[test]
    fn head_init_is_reproducible() {
        let task = TaskSpec::classification("c", 2);
        let a = attach_head(&micro(), &task, &mut seeded(4)).unwrap();
        let b = attach_head(&micro(), &task, &mut seeded(4)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.head.unwrap().outputs, 2);
        assert_eq!(TaskSpec::regression("r").head().unwrap(), Head { outputs: 1, regression: true });
        assert_eq!(attach_head(&a, &task, &mut seeded(4)).err(), Some(FinetuneError::Model(ModelError::HeadAlreadyAttached)));
    }
}
