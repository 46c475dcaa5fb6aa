//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p molbart --test acceptance` runs all of them (about half
//! an hour on one core); `-- 3 7` runs a subset. Exits non-zero if any
//! criterion fails.

use std::collections::BTreeSet;
use std::fmt::Debug;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use molbart::pipeline::RunDir;
use molbart_core::corrupt::{corrupt_indexed, corruption_stats, NoiseConfig};
use molbart_core::finetune::{
    finetune_generative, finetune_task, r3f_gradients, r3f_sweep, seq2seq_batch, Example, GenerativeConfig, GridSpec,
    NoiseType, R3FConfig, Seq2SeqExample, Splits, TaskSpec,
};
use molbart_core::generate::{beam_search, greedy, report_smiles, rescore, topk_accuracy, BeamConfig, Hypothesis};
use molbart_core::interpret::{
    attribute_smiles, dataset_distance_matrix, default_c_grid, frechet_distance, gaussian_stats, integrated_gradients,
    integrated_gradients_fn, probe_l1, Baseline, DistanceConfig, IgTarget, ProbeConfig,
};
use molbart_core::model::{
    finite_difference_check, gradients, mask_recovery, masked_token_baseline, pretrain, swa_average, window_means, Batch,
    Checkpoint, ModelConfig, ModelState, PretrainOutput, TrainConfig, Warmup,
};
use molbart_core::molgraph::{canonical_smiles, canonical_smiles_str, parse_smiles, write_smiles_with, WriteOptions};
use molbart_core::rng::{seeded, Rng};
use molbart_core::synth::{synthetic_corpus, SynthConfig};
use molbart_core::tokenizer::{
    corpus_log_likelihood, decode, em_step, encode, expected_counts, rule_tokenize, train_unigram, viterbi_score,
    TokenSeq, UnigramConfig, Vocab, BOS, EOS,
};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

// Criterion 1
const ORBIT_MOLECULES: usize = 100;
const ORBIT_RENDERINGS: usize = 500;
const ORBIT_SECONDS: f64 = 60.0;
// Criterion 2
const CORPUS_SIZE: usize = 10_000;
const VOCAB_SIZE: usize = 1021;
// Segmentations that reorder the same pieces tie in exact arithmetic but
// round differently.
const VITERBI_TIE_TOL: f64 = 1e-12;
// Criterion 3
const EM_ROUNDS: usize = 10;
const EM_SLACK: f64 = 1e-9;
const TWO_SEG_TOL: f64 = 1e-9;
// Criterion 4
const AFFECTED_RANGE: (f64, f64) = (0.18, 0.22);
// Criterion 5
const FD_STEP: f64 = 1e-5;
// Below this magnitude the central difference at h = 1e-5 is dominated by
// roundoff (about eps * |L| / h = 1e-10 absolute), so the error is taken
// relative to the floor instead.
const FD_FLOOR: f64 = 1e-5;
const FD_MAX_REL: f64 = 1e-4;
// Criterion 6
const PRETRAIN_STEPS: u64 = 2000;
const LOSS_WINDOW: usize = 200;
const RECOVERY_FACTOR: f64 = 5.0;
const PRETRAIN_MINUTES: f64 = 30.0;
// Criterion 8
const EXACT_LOGPROB_TOL: f64 = 1e-9;
// Criterion 9
const IG_LINEAR_TOL: f64 = 1e-12;
const IG_STEPS: usize = 256;
const IG_COMPLETENESS: f64 = 0.05;
const SPLIT_TOL: f64 = 1e-9;
// Criterion 10
const KKT_TOL: f64 = 1e-6;
// Criterion 11
const FRECHET_EXACT_TOL: f64 = 1e-9;
const FRECHET_MC_REL: f64 = 0.02;
const FRECHET_MC_SAMPLES: usize = 50_000;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: Debug>(e: E) -> String {
    format!("{e:?}")
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

struct CorpusData {
    smiles: Vec<String>,
    vocab: Vocab,
    seqs: Vec<TokenSeq>,
}

fn corpus() -> &'static CorpusData {
    static CELL: OnceLock<CorpusData> = OnceLock::new();
    CELL.get_or_init(|| {
        let smiles = synthetic_corpus(CORPUS_SIZE, 1, &SynthConfig::default());
        let cfg = UnigramConfig { target_size: VOCAB_SIZE, sample_size: None, ..UnigramConfig::default() };
        let vocab = train_unigram(smiles.iter().map(String::as_str), &cfg).expect("unigram training");
        let seqs = smiles.iter().map(|s| encode(&vocab, s, true)).collect();
        CorpusData { smiles, vocab, seqs }
    })
}

struct Pretrained {
    out: PretrainOutput,
    seconds: f64,
}

fn pretrained() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = corpus();
        let st = ModelState::init(&ModelConfig::tiny(c.vocab.len()), &mut seeded(0)).expect("init");
        let tcfg = TrainConfig {
            total_updates: PRETRAIN_STEPS,
            batch_size: 8,
            peak_lr: 5e-4,
            warmup: Warmup::Fraction(0.05),
            ..TrainConfig::pretrain_default()
        };
        let t = Instant::now();
        let out = pretrain(&c.seqs, &NoiseConfig::default(), Checkpoint::new(st, tcfg.clone()), &tcfg, 0, |_, _| {})
            .expect("pretraining");
        Pretrained { out, seconds: elapsed(t) }
    })
}

/// A few hand-picked graphs with symmetry, fused and bridged rings,
/// charges, isotopes and multiple components.
const CURATED: &[&str] = &[
    "CC(=O)Oc1ccccc1C(=O)O",
    "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "C12C3C4C1C5C2C3C45",
    "C1C2CC3CC1CC(C2)C3",
    "c1ccc2ccccc2c1",
    "O=C(O)CCc1c[nH]c2ccccc12",
    "[NH4+].[Cl-]",
    "F/C=C/F",
    "N[C@@H](C)C(=O)O",
    "[13CH3]C#N",
    "c1ccc(cc1)-c1ccccc1",
    "OC1C(O)C(O)C(O)C(O)C1O",
    "CC(C)(C)c1ccc(O)cc1",
    "C1CC2CCC1CC2",
    "CCO.CCO.O",
];

fn c1_canonical_orbits() -> Outcome {
    let t = Instant::now();
    let mut mols: Vec<String> = CURATED.iter().map(|s| s.to_string()).collect();
    mols.extend(synthetic_corpus(ORBIT_MOLECULES - CURATED.len(), 101, &SynthConfig::default()));
    let mut rng = seeded(1);
    for s in &mols {
        let g = parse_smiles(s).map_err(err)?;
        let canon = canonical_smiles(&g);
        ensure!(canonical_smiles_str(&canon).map_err(err)? == canon, "{s}: canonical form is not a fixed point");
        let n = g.atom_count();
        let mut classes = BTreeSet::new();
        for _ in 0..ORBIT_RENDERINGS {
            let root = rng.gen_range(0..n);
            let mut priority: Vec<usize> = (0..n).collect();
            priority.shuffle(&mut rng);
            let r = write_smiles_with(&g, root, &priority, WriteOptions { stereo: false }).map_err(err)?;
            classes.insert(canonical_smiles_str(&r).map_err(|e| format!("{s} -> {r}: {e:?}"))?);
        }
        ensure!(classes.len() == 1 && classes.contains(&canon), "{s}: {} canonical classes", classes.len());
    }
    let secs = elapsed(t);
    ensure!(secs < ORBIT_SECONDS, "took {secs:.1}s");
    Ok(format!("{} molecules x {ORBIT_RENDERINGS} renderings, one class each, {secs:.1}s", mols.len()))
}

/// Maximum over every segmentation of `rest`, each path summed from its
/// last token backwards.
fn best_segmentation(pieces: &[(String, f64)], rest: &str, path: &mut Vec<f64>, best: &mut f64) {
    if rest.is_empty() {
        *best = best.max(path.iter().rev().fold(0.0, |acc, lp| lp + acc));
        return;
    }
    for (p, lp) in pieces {
        if let Some(tail) = rest.strip_prefix(p.as_str()) {
            path.push(*lp);
            best_segmentation(pieces, tail, path, best);
            path.pop();
        }
    }
}

fn c2_tokenizer_fidelity() -> Outcome {
    let c = corpus();
    for s in &c.smiles {
        ensure!(rule_tokenize(s).map_err(err)?.concat() == *s, "rule tokens do not rebuild {s}");
    }
    for (s, seq) in c.smiles.iter().zip(&c.seqs) {
        ensure!(decode(&c.vocab, &seq.ids).map_err(err)?.text == *s, "unigram round trip fails on {s}");
    }
    let mut rng = seeded(2);
    let names = ["C", "O", "N", "CC", "CO", "OC", "NC", "CN", "CCC", "CCO", "OCC", "NCC", "CCCC", "COC", "CCN"];
    let pieces: Vec<(String, f64)> = names.iter().map(|p| (p.to_string(), rng.gen_range(-6.0..-0.1))).collect();
    let vocab = Vocab::from_pieces(pieces.clone()).map_err(err)?;
    ensure!(vocab.len() <= 20, "vocabulary has {} entries", vocab.len());
    let alphabet = ['C', 'O', 'N'];
    let mut checked = 0usize;
    let mut frontier = vec![String::new()];
    for _ in 0..12 {
        let mut next = Vec::with_capacity(frontier.len() * 3);
        for s in &frontier {
            for ch in alphabet {
                let mut t = s.clone();
                t.push(ch);
                let mut best = f64::NEG_INFINITY;
                best_segmentation(&pieces, &t, &mut Vec::new(), &mut best);
                let v = viterbi_score(&vocab, &t);
                ensure!((v - best).abs() <= VITERBI_TIE_TOL * best.abs().max(1.0), "{t}: viterbi {v} vs exhaustive {best}");
                checked += 1;
                next.push(t);
            }
        }
        frontier = next;
    }
    Ok(format!(
        "{} rule and {} unigram round trips; Viterbi matches exhaustive search on {checked} strings",
        c.smiles.len(),
        c.seqs.len()
    ))
}

fn c3_em() -> Outcome {
    let half = 0.5f64.ln();
    let v = Vocab::from_pieces(vec![("a".into(), half), ("aa".into(), half)]).map_err(err)?;
    let counts = expected_counts(&v, "aa").map_err(err)?;
    let whole = counts[&v.id("aa").unwrap()];
    let split = counts[&v.id("a").unwrap()] / 2.0;
    ensure!((whole - 2.0 / 3.0).abs() <= TWO_SEG_TOL, "P([aa]) = {whole}");
    ensure!((split - 1.0 / 3.0).abs() <= TWO_SEG_TOL, "P([a, a]) = {split}");

    let mols = synthetic_corpus(300, 5, &SynthConfig::default());
    let mut subs = BTreeSet::new();
    for m in &mols {
        let chars: Vec<(usize, char)> = m.char_indices().collect();
        for i in 0..chars.len() {
            for len in 1..=4 {
                if i + len <= chars.len() {
                    let end = chars.get(i + len).map_or(m.len(), |&(b, _)| b);
                    subs.insert(m[chars[i].0..end].to_string());
                }
            }
        }
    }
    let lp = -(subs.len() as f64).ln();
    let mut vocab = Vocab::from_pieces(subs.into_iter().map(|s| (s, lp)).collect()).map_err(err)?;
    let data: Vec<(String, f64)> = mols.into_iter().map(|m| (m, 1.0)).collect();
    let mut lls = Vec::new();
    for _ in 0..EM_ROUNDS {
        let (next, ll) = em_step(&vocab, &data).map_err(err)?;
        lls.push(ll);
        vocab = next;
    }
    lls.push(corpus_log_likelihood(&vocab, &data).map_err(err)?);
    for w in lls.windows(2) {
        ensure!(w[1] >= w[0] - EM_SLACK, "log-likelihood fell from {} to {}", w[0], w[1]);
    }
    Ok(format!("two-segmentation marginals {whole:.6}/{split:.6}; LL {:.2} -> {:.2} over {EM_ROUNDS} rounds", lls[0], lls[EM_ROUNDS]))
}

fn c4_corruption() -> Outcome {
    let vocab_size = 1000;
    let mut rng = seeded(4);
    let seqs: Vec<TokenSeq> = (0..10_000)
        .map(|_| {
            let mut ids = vec![BOS];
            ids.extend((0..100).map(|_| rng.gen_range(5..vocab_size as u32)));
            ids.push(EOS);
            let offsets = vec![(0, 0); ids.len()];
            TokenSeq { ids, offsets }
        })
        .collect();
    let cfg = NoiseConfig { rng_seed: 17, ..NoiseConfig::default() };
    let run = || -> Result<Vec<_>, String> {
        seqs.iter().enumerate().map(|(i, s)| corrupt_indexed(s, &cfg, vocab_size, i as u64).map_err(err)).collect()
    };
    let pairs = run()?;
    let cap = (cfg.mask_token_budget * 100.0).ceil() as usize;
    for (i, p) in pairs.iter().enumerate() {
        ensure!(p.affected() <= cap, "pair {i} affects {} > {cap}", p.affected());
    }
    let stats = corruption_stats(&pairs).map_err(err)?;
    let m = stats.affected_mean;
    ensure!(m >= AFFECTED_RANGE.0 && m <= AFFECTED_RANGE.1, "affected mean {m}");
    let again = run()?;
    ensure!(format!("{pairs:?}") == format!("{again:?}"), "second run differs");
    Ok(format!("affected mean {m:.4}, max per pair {cap}, rerun identical"))
}

fn c5_gradient_check() -> Outcome {
    let v = 20;
    let st = ModelState::init(&ModelConfig::micro(v).without_dropout(), &mut seeded(5)).map_err(err)?;
    let rows = vec![vec![BOS, 5, 6, 7, 8, EOS], vec![BOS, 9, 10, EOS], vec![BOS, 11, 19, 5, 5, EOS]];
    let src = Batch::from_rows(&rows);
    let tgt = src.shift_right();
    let report = finite_difference_check(&st, &src, &tgt, &src, FD_STEP, FD_FLOOR, None).map_err(err)?;
    ensure!(report.len() == st.params.len(), "{} of {} tensors checked", report.len(), st.params.len());
    let (name, worst) = report.iter().fold(("", 0.0f64), |a, (n, r)| if *r > a.1 { (n.as_str(), *r) } else { a });
    ensure!(worst < FD_MAX_REL, "{name}: relative error {worst:e}");
    let entries: usize = st.params.tensors().iter().map(Vec::len).sum();
    Ok(format!("{} tensors, {entries} entries, worst {worst:.2e} ({name})", report.len()))
}

fn c6_pretraining() -> Outcome {
    let p = pretrained();
    let losses: Vec<f64> = p.out.metrics.iter().map(|m| m.loss).collect();
    ensure!(losses.len() as u64 == PRETRAIN_STEPS, "{} updates recorded", losses.len());
    let windows = window_means(&losses, LOSS_WINDOW);
    ensure!(windows.windows(2).all(|w| w[1] < w[0]), "window means not decreasing: {windows:?}");
    let vocab = &corpus().vocab;
    let held: Vec<TokenSeq> =
        synthetic_corpus(1000, 6, &SynthConfig::default()).iter().map(|s| encode(vocab, s, true)).collect();
    let base = masked_token_baseline(&held);
    let rec = mask_recovery(&p.out.checkpoint.model, &held, &NoiseConfig::default(), 7, 32).map_err(err)?;
    ensure!(rec > RECOVERY_FACTOR * base, "recovery {rec:.4} vs baseline {base:.4}");
    let minutes = p.seconds / 60.0;
    ensure!(minutes < PRETRAIN_MINUTES, "pretraining took {minutes:.1} min");
    Ok(format!(
        "loss windows {:.3} -> {:.3}; held-out recovery {rec:.3} = {:.1}x baseline {base:.3}; {minutes:.1} min",
        windows[0],
        windows[windows.len() - 1],
        rec / base
    ))
}

/// Linear chains of C with interior O are positives; one or two
/// concatenated aromatic rings are negatives.
fn toy_molecule(rng: &mut Rng, positive: bool) -> String {
    if positive {
        let n = rng.gen_range(3..9);
        (0..n).map(|i| if i > 0 && i + 1 < n && rng.gen_bool(0.3) { 'O' } else { 'C' }).collect()
    } else {
        let rings = ["c1ccccc1", "c1ccncc1", "c1cnccn1", "c1ccnnc1"];
        let k = rng.gen_range(1..3);
        (0..k).map(|_| rings[rng.gen_range(0..rings.len())]).collect::<Vec<_>>().concat()
    }
}

fn bits_equal(a: &ModelState, b: &ModelState) -> bool {
    let (x, y) = (a.params.tensors(), b.params.tensors());
    x.len() == y.len()
        && x.iter().zip(y).all(|(p, q)| p.len() == q.len() && p.iter().zip(q).all(|(u, v)| u.to_bits() == v.to_bits()))
}

fn c7_finetune_recipe() -> Outcome {
    let grid = GridSpec::default();
    ensure!(grid.cells().len() == 9, "default grid has {} cells", grid.cells().len());

    let mut rng = seeded(11);
    let data: Vec<(String, bool)> = (0..2200)
        .map(|_| {
            let p = rng.gen_bool(0.5);
            (toy_molecule(&mut rng, p), p)
        })
        .collect();
    let ucfg = UnigramConfig { target_size: 40, sample_size: None, ..UnigramConfig::default() };
    let vocab = train_unigram(data.iter().map(|d| d.0.as_str()), &ucfg).map_err(err)?;
    let mk = |d: &(String, bool)| Example { ids: encode(&vocab, &d.0, true).ids, label: Some(f64::from(u8::from(d.1))) };
    let splits = Splits {
        train: data[..2000].iter().map(mk).collect(),
        valid: data[2000..2100].iter().map(mk).collect(),
        test: data[2100..].iter().map(mk).collect(),
    };
    let st = ModelState::init(&ModelConfig::micro(vocab.len()), &mut seeded(0)).map_err(err)?;
    let ck = Checkpoint::new(st, TrainConfig::pretrain_default());
    let out = finetune_task(&ck, &splits, &TaskSpec::classification("toy", 2), &grid, 1).map_err(err)?;
    ensure!(out.report.cells.len() == 9, "report has {} cells", out.report.cells.len());
    let w = out.report.winner_cell();
    ensure!(w.val_metric == 1.0, "winner validation AUC {}", w.val_metric);

    let avg = swa_average(&[&out.model, &out.model, &out.model, &out.model]).map_err(err)?;
    ensure!(bits_equal(&avg, &out.model), "averaging identical checkpoints changed parameters");

    let st = ModelState::init(&ModelConfig::micro(30).without_dropout(), &mut seeded(3)).map_err(err)?;
    let pairs: Vec<Seq2SeqExample> = (0..4)
        .map(|i| {
            let body: Vec<u32> = (0..3 + i).map(|k| 5 + ((7 * i + 3 * k) % 25) as u32).collect();
            let wrap = |b: &[u32]| [&[BOS][..], b, &[EOS]].concat();
            let rev: Vec<u32> = body.iter().rev().copied().collect();
            Seq2SeqExample { src: wrap(&body), tgt: wrap(&rev) }
        })
        .collect();
    let (src, tin, tout) = seq2seq_batch(&pairs.iter().collect::<Vec<_>>());
    let rcfg = R3FConfig { lambda: 0.0, noise: NoiseType::Normal, sigma: 1e-5 };
    let (l, g) = r3f_gradients(&st, &src, &tin, &tout, &rcfg, &mut seeded(1), None).map_err(err)?;
    let (plain, pg) = gradients(&st, &src, &tin, &tout, None).map_err(err)?;
    ensure!(l.total.to_bits() == plain.to_bits(), "R3F loss {} vs plain {}", l.total, plain);
    ensure!(g == pg, "R3F gradients differ from plain gradients at lambda 0");

    Ok(format!(
        "9-cell grid, winner dropout {} lr {:e} with validation AUC {}; SWA fixed point; lambda 0 matches plain loss",
        w.dropout, w.lr, w.val_metric
    ))
}

fn enumerate_hypotheses(st: &ModelState, src: &[u32], tokens: &[u32], max_len: usize) -> Result<Vec<Hypothesis>, String> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<u32>> = vec![vec![BOS]];
    for depth in 1..=max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for &t in tokens {
                let mut ids = prefix.clone();
                ids.push(t);
                let finished = t == EOS;
                if finished || depth == max_len {
                    let mut h = Hypothesis { ids: ids.clone(), logprob_sum: 0.0, length: depth, finished };
                    h.logprob_sum = rescore(st, src, &h).map_err(err)?;
                    out.push(h);
                }
                if !finished {
                    next.push(ids);
                }
            }
        }
        frontier = next;
    }
    Ok(out)
}

fn c8_generation() -> Outcome {
    let mut rng = seeded(8);
    for m in 0..10u64 {
        let st = ModelState::init(&ModelConfig::micro(30).without_dropout(), &mut seeded(100 + m)).map_err(err)?;
        for _ in 0..10 {
            let n = rng.gen_range(3..12);
            let src: Vec<u32> =
                [vec![BOS], (0..n).map(|_| rng.gen_range(5..30)).collect(), vec![EOS]].concat();
            let g = greedy(&st, &src, 20).map_err(err)?;
            let b = beam_search(&st, &src, &BeamConfig { beam: 1, max_len: 20, alpha: 1.0 }).map_err(err)?;
            ensure!(b.hypotheses[0].ids == g.ids, "beam 1 differs from greedy on {src:?}");
        }
    }

    let st = ModelState::init(&ModelConfig::micro(8).without_dropout(), &mut seeded(4)).map_err(err)?;
    let src = [BOS, 5, 6, 7, EOS];
    let mut all = enumerate_hypotheses(&st, &src, &[EOS, 3, 5, 6, 7], 4)?;
    all.sort_by(|a, b| b.normalized(1.0).total_cmp(&a.normalized(1.0)));
    let b = beam_search(&st, &src, &BeamConfig { beam: 625, max_len: 4, alpha: 1.0 }).map_err(err)?;
    ensure!(b.hypotheses.len() == all.len(), "beam kept {} of {} hypotheses", b.hypotheses.len(), all.len());
    for (x, y) in b.hypotheses.iter().zip(&all) {
        ensure!(x.ids == y.ids, "ranking differs at {:?} vs {:?}", x.ids, y.ids);
        ensure!((x.logprob_sum - y.logprob_sum).abs() <= EXACT_LOGPROB_TOL, "log-probability of {:?}", x.ids);
    }

    let sc = SynthConfig { max_units: 1, ..SynthConfig::default() };
    let mols = synthetic_corpus(4000, 21, &sc);
    let ucfg = UnigramConfig { target_size: 100, sample_size: None, ..UnigramConfig::default() };
    let vocab = train_unigram(mols.iter().map(String::as_str), &ucfg).map_err(err)?;
    let seqs: Vec<TokenSeq> = mols.iter().map(|s| encode(&vocab, s, true)).collect();
    let mcfg = ModelConfig {
        d_model: 64,
        d_ffn: 256,
        heads: 4,
        layers_enc: 2,
        layers_dec: 2,
        max_positions: 64,
        ..ModelConfig::tiny(vocab.len())
    };
    let st = ModelState::init(&mcfg, &mut seeded(0)).map_err(err)?;
    let tcfg = TrainConfig {
        total_updates: 4000,
        warmup: Warmup::Fraction(0.05),
        batch_size: 16,
        peak_lr: 2e-3,
        ..TrainConfig::pretrain_default()
    };
    let pre = pretrain(&seqs, &NoiseConfig::default(), Checkpoint::new(st, tcfg.clone()), &tcfg, 0, |_, _| {})
        .map_err(err)?;
    let fresh = synthetic_corpus(600, 22, &sc);
    let ex: Vec<Seq2SeqExample> = fresh
        .iter()
        .map(|s| {
            let ids = encode(&vocab, s, true).ids;
            Seq2SeqExample { src: ids.clone(), tgt: ids }
        })
        .collect();
    let ft = finetune_generative(&pre.checkpoint, &ex[..400], &ex[400..500], &r3f_sweep(), &GenerativeConfig::default(), 5)
        .map_err(err)?;
    let mut preds = Vec::new();
    for e in &ex[500..] {
        let r = beam_search(&ft.model, &e.src, &BeamConfig { beam: 5, max_len: 64, alpha: 1.0 }).map_err(err)?;
        preds.push(report_smiles(&r, &vocab));
    }
    let ks = [1, 2, 3, 4, 5];
    let tk = topk_accuracy(&preds, &fresh[500..], &ks).map_err(err)?;
    let acc: Vec<f64> = ks.iter().map(|k| tk.accuracy[k]).collect();
    ensure!(acc.windows(2).all(|w| w[0] <= w[1]), "top-k not monotone: {acc:?}");
    ensure!(acc[0] == 1.0, "copy top-1 accuracy {}", acc[0]);
    Ok(format!(
        "beam 1 = greedy on 100 inputs; beam 625 = enumeration of {}; copy top-1 {} ({} R3F runs)",
        all.len(),
        acc[0],
        ft.runs.len()
    ))
}

fn c9_integrated_gradients() -> Outcome {
    let mut rng = seeded(9);
    let d = 16;
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    for m in [1, 7, 64, 256] {
        let a = integrated_gradients_fn(&x, &vec![0.0; d], m, |_| w.clone()).map_err(err)?;
        for i in 0..d {
            let exact = w[i] * x[i];
            ensure!((a[i] - exact).abs() <= IG_LINEAR_TOL * exact.abs().max(1.0), "m={m}, i={i}: {} vs {exact}", a[i]);
        }
    }

    let c = corpus();
    let p = pretrained();
    let fresh = synthetic_corpus(300, 3, &SynthConfig::default());
    let mk = |s: &String| Example { ids: encode(&c.vocab, s, true).ids, label: Some(f64::from(u8::from(s.contains('N')))) };
    let splits = Splits {
        train: fresh[..160].iter().map(mk).collect(),
        valid: fresh[160..240].iter().map(mk).collect(),
        test: fresh[240..].iter().map(mk).collect(),
    };
    let grid = GridSpec { dropouts: vec![0.1], lrs: vec![3e-5], epochs: 2, ..GridSpec::default() };
    let out = finetune_task(&p.out.checkpoint, &splits, &TaskSpec::classification("nitrogen", 2), &grid, 1).map_err(err)?;
    let mut worst = 0.0f64;
    for s in &fresh[240..248] {
        let seq = encode(&c.vocab, s, true);
        let ig = integrated_gradients(&out.model, &seq.ids, Baseline::Pad, IgTarget::Contrastive, IG_STEPS).map_err(err)?;
        let e = ig.completeness_error();
        ensure!(e < IG_COMPLETENESS, "{s}: completeness error {e}");
        worst = worst.max(e);
        let text: Vec<String> = seq.ids.iter().map(|&i| c.vocab.token(i).unwrap_or_default().to_string()).collect();
        let map = attribute_smiles(&ig.attributions, &seq, &text, s).map_err(err)?;
        let mapped = map.per_atom.iter().sum::<f64>() + map.per_bond.values().sum::<f64>() + map.dropped_mass;
        let total: f64 = ig.attributions.iter().sum();
        ensure!((mapped - total).abs() <= SPLIT_TOL, "{s}: atoms+bonds+dropped {mapped} vs tokens {total}");
    }
    Ok(format!("linear case exact; worst completeness error {worst:.4} over 8 molecules at m={IG_STEPS}"))
}

fn c10_probe() -> Outcome {
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
        let mag = 1.0 + normal.sample(&mut rng).abs();
        x[i * d + 7] = if y[i] { mag } else { -mag };
    }
    let tiny = 2f64.powi(-30);
    let mut grid = vec![tiny];
    grid.extend(default_c_grid());
    let r = probe_l1(&x, d, &y, &grid, 3, &ProbeConfig::default()).map_err(err)?;
    let sign: Vec<f64> = y.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let mut worst = 0.0f64;
    for f in &r.fits {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for &row in &r.train_rows {
            let z = f.bias + (0..d).map(|j| x[row * d + j] * f.weights[j]).sum::<f64>();
            let coef = -sign[row] / (1.0 + (sign[row] * z).exp());
            gb += coef;
            for j in 0..d {
                gw[j] += coef * x[row * d + j];
            }
        }
        let mut v = (f.c * gb).abs();
        for j in 0..d {
            let g = f.c * gw[j];
            v = v.max(if f.weights[j] == 0.0 { (g.abs() - 1.0).max(0.0) } else { (g + f.weights[j].signum()).abs() });
        }
        ensure!(v <= KKT_TOL, "C={:e}: KKT violation {v:e}", f.c);
        worst = worst.max(v);
    }
    ensure!(r.fits[0].selected.is_empty(), "C=2^-30 selected {:?}", r.fits[0].selected);
    let planted = r.fits.iter().find(|f| f.selected == [7] && f.valid_auc == 1.0);
    let Some(hit) = planted else {
        return Err("no C recovers exactly the planted feature with AUC 1".into());
    };
    Ok(format!("{} fits, worst KKT violation {worst:.1e}; C={:e} selects {{7}} with AUC 1", r.fits.len(), hit.c))
}

fn c11_frechet() -> Outcome {
    let mut rng = seeded(12);
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let a: Vec<f64> = (0..500).map(|_| 1.0 + 2.0 * normal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..400).map(|_| -0.5 + 0.7 * normal.sample(&mut rng)).collect();
    let (sa, sb) = (gaussian_stats(&a, 1).map_err(err)?, gaussian_stats(&b, 1).map_err(err)?);
    let closed = (sa.mean[0] - sb.mean[0]).powi(2) + (sa.cov[0].sqrt() - sb.cov[0].sqrt()).powi(2);
    let fd = frechet_distance(&sa, &sb).map_err(err)?;
    ensure!((fd - closed).abs() <= FRECHET_EXACT_TOL, "1-d: {fd} vs closed form {closed}");

    let d = 5;
    let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let q = |i: usize, j: usize| f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j];
    let (da, db) = ([1.0, 2.0, 3.0, 4.0, 5.0], [4.0, 1.0, 1.0, 9.0, 2.0]);
    let (ma, mb) = ([0.0, 0.0, 0.0, 0.0, 0.0], [1.0, -0.5, 0.0, 0.5, 0.0]);
    let mut sample = |diag: &[f64; 5], mean: &[f64; 5]| -> Vec<f64> {
        let mut out = Vec::with_capacity(FRECHET_MC_SAMPLES * d);
        for _ in 0..FRECHET_MC_SAMPLES {
            let z: Vec<f64> = (0..d).map(|k| diag[k].sqrt() * normal.sample(&mut rng)).collect();
            out.extend((0..d).map(|i| mean[i] + (0..d).map(|k| q(i, k) * z[k]).sum::<f64>()));
        }
        out
    };
    let (xa, xb) = (sample(&da, &ma), sample(&db, &mb));
    let analytic = (0..d).map(|i| (ma[i] - mb[i]).powi(2)).sum::<f64>()
        + (0..d).map(|i| da[i] + db[i] - 2.0 * (da[i] * db[i]).sqrt()).sum::<f64>();
    let (ga, gb) = (gaussian_stats(&xa, d).map_err(err)?, gaussian_stats(&xb, d).map_err(err)?);
    let ab = frechet_distance(&ga, &gb).map_err(err)?;
    let ba = frechet_distance(&gb, &ga).map_err(err)?;
    let aa = frechet_distance(&ga, &ga).map_err(err)?;
    let rel = (ab - analytic).abs() / analytic;
    ensure!(rel <= FRECHET_MC_REL, "5-d: {ab} vs analytic {analytic}");
    ensure!((ab - ba).abs() <= FRECHET_EXACT_TOL, "asymmetric: {ab} vs {ba}");
    ensure!(aa.abs() <= FRECHET_EXACT_TOL, "self distance {aa}");

    let xc: Vec<f64> = xa.iter().map(|t| t + 0.25).collect();
    let cfg = DistanceConfig { subsample_threshold: usize::MAX, ..DistanceConfig::default() };
    let m = dataset_distance_matrix(&[&xa, &xb, &xc], d, &cfg).map_err(err)?;
    for i in 0..3 {
        ensure!(m[i][i].abs() <= FRECHET_EXACT_TOL, "matrix diagonal {}", m[i][i]);
        for j in 0..3 {
            ensure!((m[i][j] - m[j][i]).abs() <= FRECHET_EXACT_TOL, "matrix asymmetric at ({i}, {j})");
        }
    }
    ensure!((m[0][1] - ab).abs() <= FRECHET_EXACT_TOL, "matrix entry {} vs direct {ab}", m[0][1]);
    Ok(format!("1-d closed form exact; 5-d {ab:.4} vs analytic {analytic:.4} ({:.2}%); symmetric, zero self distance", 100.0 * rel))
}

const SMOKE_CONFIG: &str = r#"
config_version = 1

[run]
output_dir = "out"
seed = 7

[data]
corpus = ["corpus.smi"]
shards = 4
dataset = "toy.csv"
split = "random"

[tokenizer]
target_size = 200

[model]
layers_enc = 4
layers_dec = 4
d_model = 256
heads = 4
d_ffn = 1024
max_positions = 128

[train]
total_updates = 200
batch_size = 8
peak_lr = 5e-4
warmup = { steps = 20 }

[pretrain]
checkpoint_every = 50
eval_molecules = 200

[[tasks]]
name = "nitrogen"
kind = { classification = { num_classes = 2 } }
label_columns = ["nitrogen"]
metric = "auc_roc"

[grid]
epochs = 2
dropouts = [0.1]
lrs = [3e-5]

[attribute]
steps = 32
molecules = 4
"#;

fn smoke_run(dir: &Path) -> Result<(), String> {
    let corpus = synthetic_corpus(2000, 31, &SynthConfig::default());
    fs::write(dir.join("corpus.smi"), corpus.join("\n") + "\n").map_err(err)?;
    let mut csv = String::from("smiles,nitrogen\n");
    for m in synthetic_corpus(200, 32, &SynthConfig::default()) {
        csv.push_str(&format!("{m},{}\n", u8::from(m.contains('N') || m.contains('n'))));
    }
    fs::write(dir.join("toy.csv"), csv).map_err(err)?;
    fs::write(dir.join("run.toml"), SMOKE_CONFIG).map_err(err)?;
    for cmd in ["dedup", "tokenizer-train", "pretrain", "finetune", "attribute"] {
        let out = Command::new(env!("CARGO_BIN_EXE_molbart"))
            .args(["--config", "run.toml", cmd])
            .current_dir(dir)
            .env("RUST_LOG", "warn")
            .env_remove("MOLBART_OUTPUT_ROOT")
            .output()
            .map_err(err)?;
        ensure!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn c12_pipeline_smoke() -> Outcome {
    let t = Instant::now();
    let dirs = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    for d in &dirs {
        smoke_run(d.path())?;
    }
    let rds: Vec<RunDir> = dirs.iter().map(|d| RunDir::new(d.path().join("out"))).collect();
    for rd in &rds {
        for p in [
            rd.dedup(),
            rd.vocab(),
            rd.metrics(),
            rd.checkpoints(),
            rd.file(&["pretrain", "summary.json"]),
            rd.finetune("nitrogen").join("model.ckpt"),
            rd.finetune("nitrogen").join("report.json"),
            rd.file(&["attribute", "nitrogen.json"]),
            rd.file(&["attribute", "nitrogen.html"]),
            rd.root.join("config.resolved.toml"),
            rd.root.join("provenance.jsonl"),
        ] {
            ensure!(p.exists(), "missing artifact {}", p.display());
        }
    }
    let (m0, m1) = (fs::read(rds[0].metrics()).map_err(err)?, fs::read(rds[1].metrics()).map_err(err)?);
    ensure!(!m0.is_empty() && m0 == m1, "metrics.jsonl differs between runs");
    let lines = m0.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count();
    Ok(format!("two runs, all artifacts present, {lines} identical metric lines, {:.0}s", elapsed(t)))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "canonical SMILES is invariant over random renderings", c1_canonical_orbits),
    (2, "tokenizer round trips and exact Viterbi", c2_tokenizer_fidelity),
    (3, "EM expected counts and monotone likelihood", c3_em),
    (4, "corruption budget and determinism", c4_corruption),
    (5, "analytic gradients match finite differences", c5_gradient_check),
    (6, "desk-scale pretraining learns", c6_pretraining),
    (7, "fine-tuning grid, SWA and R3F contracts", c7_finetune_recipe),
    (8, "beam search exactness and copy task", c8_generation),
    (9, "Integrated Gradients completeness", c9_integrated_gradients),
    (10, "L1 probe optimality and planted feature", c10_probe),
    (11, "Frechet distance against closed forms", c11_frechet),
    (12, "end-to-end pipeline reproducibility", c12_pipeline_smoke),
];

fn main() {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for &(id, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = elapsed(t);
        match result {
            Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} {name}: FAIL ({why}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
