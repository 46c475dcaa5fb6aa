//! Subcommand implementations over a run directory.
//!
//! ```text
//! <run>/config.resolved.toml      last resolved config
//! <run>/provenance.jsonl          one record per command invocation
//! <run>/dedup/                    shard-NNNN.smi, rejects.tsv, stats.json
//! <run>/tokenizer/vocab.tsv
//! <run>/pretrain/metrics.jsonl    {step, loss, lr, mask_acc}
//! <run>/pretrain/checkpoints/     step-NNNNNNNN.ckpt
//! <run>/pretrain/summary.json
//! <run>/finetune/<task>/          model.ckpt, report.json
//! <run>/evaluate/<task>.json
//! <run>/generate/generations.jsonl
//! <run>/attribute/<task>.json, <task>.html
//! <run>/probe/<label>.json
//! <run>/frechet/distances.csv, stats.json
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use molbart_core::corrupt::{corrupt_indexed, MaskSpan};
use molbart_core::finetune::{
    evaluate, finetune_generative, finetune_multitask, Example, GenerativeRun, GridReport, Metric, Scaler,
    Seq2SeqExample, Splits, TaskKind, TaskSpec,
};
use molbart_core::generate::{beam_search, report_smiles, sample_rerank, topk_accuracy, GenReport, TopkReport};
use molbart_core::interpret::{
    attribute_smiles, dataset_distance_matrix, feature_curve, integrated_gradients, positional_normalize, probe_l1,
    AttributionMap, PositionalProfile, ProbeResult,
};
use molbart_core::model::{
    mask_recovery, masked_token_baseline, pretrain, representations, Checkpoint, MetricsRecord, ModelConfig, ModelState,
    TrainConfig,
};
use molbart_core::molgraph::{parse_smiles, scaffold_split};
use molbart_core::rng::{derive_seed, derived};
use molbart_core::tokenizer::{decode, encode, train_unigram, TokenSeq, Vocab};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, latest_in, save_checkpoint, save_model, step_file_name};
use crate::config::{RunConfig, SplitMethod, Strategy};
use crate::dedup::{ingest_dedup, read_deduped, DedupStats};
use crate::error::{CliError, Result};
use crate::formats::{self, read_json, read_smiles_lines, read_vocab, write_json, write_jsonl, Dataset};
use crate::report::{heatmap_html, HeatmapRow};

/// Stream indices under `run.seed`.
const INIT_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const RECOVERY_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }
    pub fn dedup(&self) -> PathBuf {
        self.root.join("dedup")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("tokenizer").join("vocab.tsv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("pretrain").join("metrics.jsonl")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("pretrain").join("checkpoints")
    }
    pub fn finetune(&self, task: &str) -> PathBuf {
        self.root.join("finetune").join(task)
    }
    pub fn file(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.root.clone(), |p, s| p.join(s))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub toolkit_version: String,
    pub hash_algorithm: String,
    pub seeds: std::collections::BTreeMap<String, u64>,
}

/// Writes the resolved config and appends a provenance record.
pub fn record_invocation(cfg: &RunConfig, rd: &RunDir, command: &str) -> Result<()> {
    std::fs::create_dir_all(&rd.root).map_err(CliError::io(&rd.root))?;
    formats::write_atomic(&rd.root.join("config.resolved.toml"), cfg.to_toml()?.as_bytes())?;
    let p = Provenance {
        command: command.into(),
        toolkit_version: molbart_core::VERSION.into(),
        hash_algorithm: molbart_core::HASH_ALGORITHM.into(),
        seeds: cfg.seeds().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    formats::append(&rd.root.join("provenance.jsonl"), &formats::jsonl_line(&p)?)
}

fn provenance_extra(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({
        "seeds": cfg.seeds().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
    })
}

pub fn cmd_dedup(cfg: &RunConfig, rd: &RunDir) -> Result<DedupStats> {
    if cfg.data.corpus.is_empty() {
        return Err(CliError::ConfigInvalid("data.corpus lists no input files".into()));
    }
    let stats = ingest_dedup(&cfg.data.corpus, &rd.dedup(), cfg.data.shards)?;
    log::info!("dedup: read {} parsed {} unique {} rejected {}", stats.read, stats.parsed, stats.unique, stats.rejected);
    Ok(stats)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerSummary {
    pub vocab_size: usize,
    pub molecules: usize,
    pub mean_tokens: f64,
    pub round_trip_failures: usize,
}

pub fn cmd_tokenizer_train(cfg: &RunConfig, rd: &RunDir) -> Result<TokenizerSummary> {
    let corpus = read_deduped(&rd.dedup())?;
    let vocab = train_unigram(corpus.iter(), &cfg.tokenizer)?;
    formats::write_vocab(&rd.vocab(), &vocab)?;
    let mut tokens = 0usize;
    let mut failures = 0usize;
    for s in &corpus {
        let seq = encode(&vocab, s, false);
        tokens += seq.len();
        if decode(&vocab, &seq.ids).map(|d| d.text != *s).unwrap_or(true) {
            failures += 1;
        }
    }
    let summary = TokenizerSummary {
        vocab_size: vocab.len(),
        molecules: corpus.len(),
        mean_tokens: if corpus.is_empty() { 0.0 } else { tokens as f64 / corpus.len() as f64 },
        round_trip_failures: failures,
    };
    write_json(&rd.file(&["tokenizer", "summary.json"]), &summary)?;
    Ok(summary)
}

fn load_vocab(rd: &RunDir) -> Result<Vocab> {
    let p = rd.vocab();
    if !p.exists() {
        return Err(CliError::MissingArtifact(format!("{} (run `tokenizer-train` first)", p.display())));
    }
    read_vocab(&p)
}

#[derive(Debug, Clone, Serialize)]
pub struct PreviewLine {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub mask_report: Vec<MaskSpan>,
}

fn token_texts(vocab: &Vocab, ids: &[u32]) -> Result<Vec<String>> {
    ids.iter()
        .map(|&i| vocab.token(i).map(str::to_string).ok_or(CliError::InvalidInput(format!("token id {i} outside the vocabulary"))))
        .collect()
}

/// Corrupts the first `n` corpus molecules (sample `i` uses noise stream
/// `i`) and writes one JSON line each to `out`.
pub fn cmd_corrupt_preview(cfg: &RunConfig, rd: &RunDir, n: usize, out: &mut dyn Write) -> Result<usize> {
    let vocab = load_vocab(rd)?;
    let corpus = match read_deduped(&rd.dedup()) {
        Ok(c) => c,
        Err(CliError::MissingArtifact(_)) if !cfg.data.corpus.is_empty() => {
            let mut all = Vec::new();
            for p in &cfg.data.corpus {
                all.extend(read_smiles_lines(p)?.into_iter().map(|(_, s)| s));
            }
            all
        }
        Err(e) => return Err(e),
    };
    let mut written = 0;
    for (i, s) in corpus.iter().take(n).enumerate() {
        let seq = encode(&vocab, s, true);
        let pair = corrupt_indexed(&seq, &cfg.noise, vocab.len(), i as u64)?;
        let line = PreviewLine {
            source_tokens: token_texts(&vocab, &pair.source.ids)?,
            target_tokens: token_texts(&vocab, &pair.target.ids)?,
            mask_report: pair.mask_report,
        };
        out.write_all(formats::jsonl_line(&line)?.as_bytes()).map_err(CliError::io("<stdout>"))?;
        written += 1;
    }
    Ok(written)
}

fn model_config(cfg: &RunConfig, vocab: &Vocab) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    if m.vocab_size == 0 {
        m.vocab_size = vocab.len();
    } else if m.vocab_size != vocab.len() {
        return Err(CliError::ConfigInvalid(format!(
            "model.vocab_size is {} but the vocabulary has {} entries",
            m.vocab_size,
            vocab.len()
        )));
    }
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub step: u64,
    pub resumed_from: Option<u64>,
    pub corpus: usize,
    pub skipped_long: usize,
    pub final_loss: Option<f64>,
    pub mask_recovery: f64,
    pub majority_baseline: f64,
}

/// Keeps the metrics lines with `step <= last`.
fn truncate_metrics(path: &Path, last: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: MetricsRecord = serde_json::from_str(line).map_err(|e| CliError::corrupt(path, e))?;
        if rec.step <= last {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    formats::write_atomic(path, kept.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::corrupt(path, e)))
        .collect()
}

fn latest_checkpoint(rd: &RunDir) -> Result<(Checkpoint, PathBuf)> {
    let (_, p) = latest_in(&rd.checkpoints())?
        .ok_or_else(|| CliError::MissingArtifact(format!("no checkpoint in {} (run `pretrain` first)", rd.checkpoints().display())))?;
    let ck = checkpoint::load(&p)?.into_checkpoint(&p)?;
    Ok((ck, p))
}

/// Trains from scratch, or resumes from the latest checkpoint when one
/// exists. Metrics past the resumed step are discarded first, so an
/// interrupted and resumed run leaves the same log as an uninterrupted one.
pub fn cmd_pretrain(cfg: &RunConfig, rd: &RunDir) -> Result<PretrainSummary> {
    let vocab = load_vocab(rd)?;
    let smiles = read_deduped(&rd.dedup())?;
    let corpus: Vec<TokenSeq> = smiles.iter().map(|s| encode(&vocab, s, true)).collect();
    let mcfg = model_config(cfg, &vocab)?;
    let metrics_path = rd.metrics();
    let ckdir = rd.checkpoints();
    std::fs::create_dir_all(&ckdir).map_err(CliError::io(&ckdir))?;
    let (ck, resumed_from) = match latest_in(&ckdir)? {
        Some((_, p)) => {
            let ck = checkpoint::load(&p)?.into_checkpoint(&p)?;
            if ck.model.cfg.fingerprint() != mcfg.fingerprint() || ck.model.cfg.dropout != mcfg.dropout {
                return Err(CliError::ConfigInvalid(format!("{} was trained with a different model config", p.display())));
            }
            if ck.schedule != cfg.train {
                return Err(CliError::ConfigInvalid(format!("{} was trained with a different schedule", p.display())));
            }
            truncate_metrics(&metrics_path, ck.step)?;
            log::info!("resuming from step {}", ck.step);
            let s = ck.step;
            (ck, Some(s))
        }
        None => {
            formats::write_atomic(&metrics_path, b"")?;
            let st = ModelState::init(&mcfg, &mut derived(cfg.run.seed, INIT_STREAM))?;
            (Checkpoint::new(st, cfg.train.clone()), None)
        }
    };
    let extra = provenance_extra(cfg);
    let mut persist_err: Option<CliError> = None;
    let out = pretrain(&corpus, &cfg.noise, ck, &cfg.train, cfg.pretrain.checkpoint_every, |ck, recs| {
        if persist_err.is_some() {
            return;
        }
        let res = (|| {
            let mut text = String::new();
            for r in recs {
                text.push_str(&formats::jsonl_line(r)?);
            }
            formats::append(&metrics_path, &text)?;
            save_checkpoint(&ckdir.join(step_file_name(ck.step)), ck, extra.clone())
        })();
        if let Err(e) = res {
            persist_err = Some(e);
        } else if let Some(r) = recs.last() {
            log::info!("step {} loss {:.4} lr {:.3e} mask_acc {:.3}", r.step, r.loss, r.lr, r.mask_acc);
        }
    })?;
    if let Some(e) = persist_err {
        return Err(e);
    }
    let eval: Vec<TokenSeq> = corpus.iter().take(cfg.pretrain.eval_molecules.max(1)).cloned().collect();
    let eval_seed = derive_seed(cfg.run.seed, RECOVERY_STREAM);
    let recovery = mask_recovery(&out.checkpoint.model, &eval, &cfg.noise, eval_seed, 32)?;
    let all = read_metrics(&metrics_path)?;
    let summary = PretrainSummary {
        step: out.checkpoint.step,
        resumed_from,
        corpus: corpus.len(),
        skipped_long: out.skipped_long,
        final_loss: all.last().map(|r| r.loss),
        mask_recovery: recovery,
        majority_baseline: masked_token_baseline(&corpus),
    };
    write_json(&rd.file(&["pretrain", "summary.json"]), &summary)?;
    Ok(summary)
}

/// Dataset rows assigned to train, valid and test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Deterministic split of the dataset rows under the configured method.
pub fn split_rows(cfg: &RunConfig, smiles: &[String]) -> Result<RowSplit> {
    let seed = derive_seed(cfg.run.seed, SPLIT_STREAM);
    match cfg.data.split {
        SplitMethod::Scaffold => {
            let s = scaffold_split(smiles, cfg.data.fractions, seed)?;
            Ok(RowSplit { train: s.train, valid: s.valid, test: s.test, rejected: s.rejected.into_iter().map(|(i, _)| i).collect() })
        }
        SplitMethod::Random => {
            let (ft, fv, fs) = cfg.data.fractions;
            if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
                return Err(CliError::ConfigInvalid(format!("split fractions ({ft}, {fv}, {fs}) must be positive and sum to 1")));
            }
            let (mut ok, rejected): (Vec<usize>, Vec<usize>) = (0..smiles.len()).partition(|&i| parse_smiles(&smiles[i]).is_ok());
            ok.shuffle(&mut molbart_core::rng::seeded(seed));
            let n = ok.len() as f64;
            let a = (ft * n).round() as usize;
            let b = (((ft + fv) * n).round() as usize).max(a);
            let part = |r: std::ops::Range<usize>| {
                let mut v = ok[r].to_vec();
                v.sort_unstable();
                v
            };
            Ok(RowSplit { train: part(0..a), valid: part(a..b.min(ok.len())), test: part(b.min(ok.len())..ok.len()), rejected })
        }
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let p = cfg.data.dataset.as_ref().ok_or_else(|| CliError::ConfigInvalid("data.dataset is not set".into()))?;
    Dataset::read(p)
}

fn sentence_splits(ds: &Dataset, rows: &RowSplit, task: &TaskSpec, vocab: &Vocab) -> Result<Splits> {
    let labels = ds.numeric_column(&task.label_columns[0])?;
    let build = |idx: &[usize]| -> Vec<Example> {
        idx.iter().map(|&i| Example { ids: encode(vocab, &ds.smiles[i], true).ids, label: labels[i] }).collect()
    };
    Ok(Splits { train: build(&rows.train), valid: build(&rows.valid), test: build(&rows.test) })
}

fn seq2seq_split(ds: &Dataset, idx: &[usize], task: &TaskSpec, vocab: &Vocab) -> Result<Vec<Seq2SeqExample>> {
    let targets = ds.text_column(&task.label_columns[0])?;
    Ok(idx
        .iter()
        .filter_map(|&i| {
            targets[i].map(|t| Seq2SeqExample { src: encode(vocab, &ds.smiles[i], true).ids, tgt: encode(vocab, t, true).ids })
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskReport {
    Sentence {
        grid: GridReport,
        split_sizes: (usize, usize, usize),
    },
    Sequence {
        runs: Vec<GenerativeRun>,
        winner: usize,
        warm_started: bool,
        schedule: TrainConfig,
        split_sizes: (usize, usize, usize),
    },
}

pub fn cmd_finetune(cfg: &RunConfig, rd: &RunDir) -> Result<Vec<(String, TaskReport)>> {
    if cfg.tasks.is_empty() {
        return Err(CliError::ConfigInvalid("no [[tasks]] configured".into()));
    }
    let vocab = load_vocab(rd)?;
    let (ck, ck_path) = latest_checkpoint(rd)?;
    log::info!("fine-tuning from {}", ck_path.display());
    let ds = load_dataset(cfg)?;
    let rows = split_rows(cfg, &ds.smiles)?;
    let sizes = (rows.train.len(), rows.valid.len(), rows.test.len());
    let mut reports = Vec::new();
    // The shared-cell policy averages metrics across tasks, so only tasks
    // scored by the same metric are grouped.
    for metric in [Metric::AucRoc, Metric::Rmse] {
        let group: Vec<&TaskSpec> = cfg.sentence_tasks().into_iter().filter(|t| t.metric == metric).collect();
        if group.is_empty() {
            continue;
        }
        let inputs = group
            .iter()
            .map(|t| Ok(((*t).clone(), sentence_splits(&ds, &rows, t, &vocab)?)))
            .collect::<Result<Vec<_>>>()?;
        let out = finetune_multitask(&ck, &inputs, &cfg.grid, cfg.run.seed)?;
        for (task, o) in group.iter().zip(out.tasks) {
            let dir = rd.finetune(&task.name);
            let extra = serde_json::json!({
                "task": task,
                "scaler": o.report.scaler,
                "pretrain_step": ck.step,
                "seeds": provenance_extra(cfg)["seeds"],
            });
            save_model(&dir.join("model.ckpt"), &o.model, ck.step, extra)?;
            let report = TaskReport::Sentence { grid: o.report, split_sizes: sizes };
            write_json(&dir.join("report.json"), &report)?;
            reports.push((task.name.clone(), report));
        }
    }
    for task in cfg.tasks.iter().filter(|t| matches!(t.kind, TaskKind::Seq2Seq)) {
        let train = seq2seq_split(&ds, &rows.train, task, &vocab)?;
        let valid = seq2seq_split(&ds, &rows.valid, task, &vocab)?;
        let out = finetune_generative(&ck, &train, &valid, &cfg.r3f, &cfg.generative, cfg.run.seed)?;
        let dir = rd.finetune(&task.name);
        let extra = serde_json::json!({ "task": task, "pretrain_step": ck.step, "seeds": provenance_extra(cfg)["seeds"] });
        save_model(&dir.join("model.ckpt"), &out.model, ck.step, extra)?;
        let report = TaskReport::Sequence {
            runs: out.runs,
            winner: out.winner,
            warm_started: out.warm_started,
            schedule: out.schedule,
            split_sizes: sizes,
        };
        write_json(&dir.join("report.json"), &report)?;
        reports.push((task.name.clone(), report));
    }
    Ok(reports)
}

fn load_task_model(rd: &RunDir, task: &str) -> Result<(ModelState, serde_json::Value)> {
    let p = rd.finetune(task).join("model.ckpt");
    if !p.exists() {
        return Err(CliError::MissingArtifact(format!("{} (run `finetune` first)", p.display())));
    }
    let s = checkpoint::load(&p)?;
    Ok((s.model, s.header.extra))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub metric: Metric,
    pub test_rows: usize,
    /// Winner's validation metric from fine-tuning (sentence tasks).
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
    pub test_loss: Option<f64>,
    pub topk: Option<TopkReport>,
}

/// Scores the stored fine-tuned model on the test split; no training.
pub fn cmd_evaluate(cfg: &RunConfig, rd: &RunDir, only: Option<&str>) -> Result<Vec<EvaluationReport>> {
    let vocab = load_vocab(rd)?;
    let ds = load_dataset(cfg)?;
    let rows = split_rows(cfg, &ds.smiles)?;
    let tasks: Vec<&TaskSpec> = match only {
        Some(name) => vec![cfg.task(name)?],
        None => cfg.tasks.iter().collect(),
    };
    let mut out = Vec::new();
    for task in tasks {
        let (model, _) = load_task_model(rd, &task.name)?;
        let report: TaskReport = read_json(&rd.finetune(&task.name).join("report.json"))?;
        let ev = match (&task.kind, report) {
            (TaskKind::Seq2Seq, _) => {
                let test = seq2seq_split(&ds, &rows.test, task, &vocab)?;
                let mut preds = Vec::with_capacity(test.len());
                for ex in &test {
                    preds.push(report_smiles(&beam_search(&model, &ex.src, &cfg.generate.beam)?, &vocab));
                }
                let gold: Vec<String> =
                    test.iter().map(|ex| decode(&vocab, &ex.tgt).map(|d| d.text)).collect::<std::result::Result<_, _>>()?;
                let topk = topk_accuracy(&preds, &gold, &cfg.generate.topk)?;
                EvaluationReport {
                    task: task.name.clone(),
                    metric: Metric::TopkExact,
                    test_rows: test.len(),
                    val_metric: None,
                    test_metric: topk.accuracy.get(&1).copied(),
                    test_loss: None,
                    topk: Some(topk),
                }
            }
            (_, TaskReport::Sentence { grid, .. }) => {
                let splits = sentence_splits(&ds, &rows, task, &vocab)?;
                let scaler = grid.scaler.unwrap_or(Scaler::IDENTITY);
                let e = evaluate(&model, task, &splits.test, scaler, cfg.grid.batch_size)?;
                EvaluationReport {
                    task: task.name.clone(),
                    metric: grid.metric,
                    test_rows: splits.test.iter().filter(|x| x.label.is_some()).count(),
                    val_metric: Some(grid.winner_cell().val_metric),
                    test_metric: Some(e.metric),
                    test_loss: Some(e.loss),
                    topk: None,
                }
            }
            (_, TaskReport::Sequence { .. }) => {
                return Err(CliError::corrupt(rd.finetune(&task.name), "report kind does not match the task"));
            }
        };
        write_json(&rd.file(&["evaluate", &format!("{}.json", task.name)]), &ev)?;
        out.push(ev);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generated {
    pub smiles: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationLine {
    pub input: String,
    pub hypotheses: Vec<Generated>,
    pub strategy: String,
}

pub fn cmd_generate(cfg: &RunConfig, rd: &RunDir, input: Option<&Path>) -> Result<Vec<GenerationLine>> {
    let vocab = load_vocab(rd)?;
    let path = input
        .map(Path::to_path_buf)
        .or_else(|| cfg.generate.input.clone())
        .ok_or_else(|| CliError::ConfigInvalid("no generation input (set generate.input or pass --input)".into()))?;
    let model = match &cfg.generate.task {
        Some(t) => load_task_model(rd, t)?.0,
        None => latest_checkpoint(rd)?.0.model,
    };
    let mut lines = Vec::new();
    for (i, (_, smiles)) in read_smiles_lines(&path)?.into_iter().enumerate() {
        let src = encode(&vocab, &smiles, true);
        let report: GenReport = match cfg.generate.strategy {
            Strategy::Beam => beam_search(&model, &src.ids, &cfg.generate.beam)?,
            Strategy::Sample => {
                let mut rng = derived(derive_seed(cfg.run.seed, SAMPLE_STREAM), i as u64);
                sample_rerank(&model, &src.ids, &cfg.generate.sample, &vocab, &mut rng)?
            }
        };
        let hypotheses = report_smiles(&report, &vocab)
            .into_iter()
            .zip(&report.scores)
            .map(|(smiles, &score)| Generated { smiles, score })
            .collect();
        lines.push(GenerationLine { input: smiles, hypotheses, strategy: cfg.generate.strategy.name().into() });
    }
    write_jsonl(&rd.file(&["generate", "generations.jsonl"]), &lines)?;
    Ok(lines)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoleculeAttribution {
    pub smiles: String,
    pub tokens: Vec<String>,
    pub attributions: Vec<f64>,
    /// Attributions minus the collection's positional mean.
    pub normalized: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_error: f64,
    pub map: AttributionMap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub task: String,
    pub steps: usize,
    pub molecules: Vec<MoleculeAttribution>,
    pub positional_profile: PositionalProfile,
    /// Molecules whose tokens could not be mapped onto atoms.
    pub skipped: Vec<(String, String)>,
}

pub fn cmd_attribute(cfg: &RunConfig, rd: &RunDir) -> Result<AttributionReport> {
    let vocab = load_vocab(rd)?;
    let task = match &cfg.attribute.task {
        Some(t) => cfg.task(t)?,
        None => *cfg
            .sentence_tasks()
            .first()
            .ok_or_else(|| CliError::ConfigInvalid("attribution needs a classification or regression task".into()))?,
    };
    if matches!(task.kind, TaskKind::Seq2Seq) {
        return Err(CliError::ConfigInvalid(format!("task {:?} has no prediction head to explain", task.name)));
    }
    let (model, _) = load_task_model(rd, &task.name)?;
    let ds = load_dataset(cfg)?;
    let rows = split_rows(cfg, &ds.smiles)?;
    let take = if cfg.attribute.molecules == 0 { rows.test.len() } else { cfg.attribute.molecules.min(rows.test.len()) };
    let mut molecules = Vec::new();
    let mut skipped = Vec::new();
    for &r in &rows.test[..take] {
        let smiles = &ds.smiles[r];
        let seq = encode(&vocab, smiles, true);
        let ig = integrated_gradients(&model, &seq.ids, cfg.attribute.baseline, cfg.attribute.target, cfg.attribute.steps)?;
        let tokens = token_texts(&vocab, &seq.ids)?;
        match attribute_smiles(&ig.attributions, &seq, &tokens, smiles) {
            Ok(map) => molecules.push(MoleculeAttribution {
                smiles: smiles.clone(),
                tokens,
                completeness_error: ig.completeness_error(),
                attributions: ig.attributions,
                normalized: Vec::new(),
                f_input: ig.f_input,
                f_baseline: ig.f_baseline,
                map,
            }),
            Err(e) => skipped.push((smiles.clone(), e.to_string())),
        }
    }
    let sets: Vec<Vec<f64>> = molecules.iter().map(|m| m.attributions.clone()).collect();
    let (normalized, positional_profile) = positional_normalize(&sets)?;
    for (m, n) in molecules.iter_mut().zip(normalized) {
        m.normalized = n;
    }
    let report = AttributionReport { task: task.name.clone(), steps: cfg.attribute.steps, molecules, positional_profile, skipped };
    write_json(&rd.file(&["attribute", &format!("{}.json", task.name)]), &report)?;
    let rows: Vec<HeatmapRow<'_>> = report
        .molecules
        .iter()
        .map(|m| HeatmapRow {
            smiles: &m.smiles,
            symbols: &m.map.per_symbol,
            note: format!("F(x) {:.4}  F(x') {:.4}  completeness error {:.2e}", m.f_input, m.f_baseline, m.completeness_error),
        })
        .collect();
    let html = heatmap_html(&format!("Attributions for {}", task.name), &rows);
    formats::write_atomic(&rd.file(&["attribute", &format!("{}.html", task.name)]), html.as_bytes())?;
    Ok(report)
}

/// Mean-pooled last-layer representations, `[n, d_model]` row-major.
fn mean_pools(model: &ModelState, vocab: &Vocab, smiles: &[&str]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(smiles.len() * model.cfg.d_model);
    for s in smiles {
        let seq = encode(vocab, s, true);
        if seq.len() > model.cfg.max_positions {
            return Err(CliError::InvalidInput(format!("{s} is longer than {} tokens", model.cfg.max_positions)));
        }
        out.extend(representations(model, &seq.ids)?.mean);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub label: String,
    pub molecules: usize,
    pub dimension: usize,
    pub result: ProbeResult,
    /// `(support size, best validation AUC)`.
    pub curve: Vec<(usize, f64)>,
}

pub fn cmd_probe(cfg: &RunConfig, rd: &RunDir) -> Result<ProbeReport> {
    let vocab = load_vocab(rd)?;
    let label = match &cfg.probe.label {
        Some(l) => l.clone(),
        None => cfg
            .tasks
            .iter()
            .find(|t| matches!(t.kind, TaskKind::Classification { num_classes: 2 }))
            .map(|t| t.label_columns[0].clone())
            .ok_or_else(|| CliError::ConfigInvalid("set probe.label or configure a binary task".into()))?,
    };
    let model = latest_checkpoint(rd)?.0.model;
    let ds = load_dataset(cfg)?;
    let ys = ds.numeric_column(&label)?;
    let mut smiles = Vec::new();
    let mut labels = Vec::new();
    for (s, y) in ds.smiles.iter().zip(&ys) {
        match y {
            Some(v) if *v == 0.0 || *v == 1.0 => {
                smiles.push(s.as_str());
                labels.push(*v == 1.0);
            }
            Some(v) => return Err(CliError::InvalidInput(format!("probe label {label} must be 0 or 1, got {v}"))),
            None => {}
        }
    }
    let d = model.cfg.d_model;
    let features = mean_pools(&model, &vocab, &smiles)?;
    let result = probe_l1(&features, d, &labels, &cfg.probe.c_grid, cfg.run.seed, &cfg.probe.solver)?;
    let report = ProbeReport { label: label.clone(), molecules: smiles.len(), dimension: d, curve: feature_curve(&result), result };
    write_json(&rd.file(&["probe", &format!("{label}.json")]), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceReport {
    pub names: Vec<String>,
    pub sizes: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
}

pub fn cmd_frechet(cfg: &RunConfig, rd: &RunDir) -> Result<DistanceReport> {
    if cfg.distance.datasets.len() < 2 {
        return Err(CliError::ConfigInvalid("distance.datasets needs at least two files".into()));
    }
    let vocab = load_vocab(rd)?;
    let model = latest_checkpoint(rd)?.0.model;
    let d = model.cfg.d_model;
    let mut names = Vec::new();
    let mut sets = Vec::new();
    for p in &cfg.distance.datasets {
        let smiles = read_smiles_lines(p)?;
        let refs: Vec<&str> = smiles.iter().map(|(_, s)| s.as_str()).collect();
        sets.push(mean_pools(&model, &vocab, &refs)?);
        names.push(p.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string());
    }
    let views: Vec<&[f64]> = sets.iter().map(Vec::as_slice).collect();
    let matrix = dataset_distance_matrix(&views, d, &cfg.distance.sampling)?;
    let csv_path = rd.file(&["frechet", "distances.csv"]);
    let mut w = formats::csv_writer(&csv_path)?;
    let csv_err = |e: csv::Error| CliError::InvalidInput(format!("{}: {e}", csv_path.display()));
    w.write_record(std::iter::once("dataset").chain(names.iter().map(String::as_str))).map_err(csv_err)?;
    for (n, row) in names.iter().zip(&matrix) {
        w.write_record(std::iter::once(n.clone()).chain(row.iter().map(|x| format!("{x:?}")))).map_err(csv_err)?;
    }
    w.flush().map_err(CliError::io(&csv_path))?;
    let report = DistanceReport { names, sizes: sets.iter().map(|s| s.len() / d).collect(), matrix };
    write_json(&rd.file(&["frechet", "stats.json"]), &report)?;
    Ok(report)
}
