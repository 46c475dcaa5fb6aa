//! Canonical-hash deduplication of SMILES files.
//!
//! Pass one streams every input line, canonicalizes it and spills
//! `(hash, canonical)` records into one file per hash-prefix shard. Pass two
//! deduplicates each shard with its own in-memory set, so peak memory is
//! one shard's worth of hashes. Output keeps the first occurrence in input
//! order within each shard.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use molbart_core::molgraph::canonical_smiles_str;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupStats {
    /// Non-blank input lines.
    pub read: u64,
    pub parsed: u64,
    pub unique: u64,
    pub rejected: u64,
    pub shards: usize,
    pub hash_algorithm: String,
    pub toolkit_version: String,
}

/// Shard of a 128-bit hash: its top 64 bits scaled onto `0..shards`.
pub fn shard_of(hash: u128, shards: usize) -> usize {
    (((hash >> 64) as u64 as u128 * shards as u128) >> 64) as usize
}

pub fn shard_path(dir: &Path, shard: usize) -> PathBuf {
    dir.join(format!("shard-{shard:04}.smi"))
}

/// Shard files of a dedup output directory, in shard order.
pub fn shard_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("shard-") && n.ends_with(".smi"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// Deduplicates `inputs` into `out_dir`: `shard-NNNN.smi` files of
/// canonical SMILES, `rejects.tsv` (`source`, `reason`, `text`) and
/// `stats.json`. Unparseable lines are counted and logged, never fatal.
pub fn ingest_dedup(inputs: &[PathBuf], out_dir: &Path, shards: usize) -> Result<DedupStats> {
    if shards == 0 {
        return Err(CliError::ConfigInvalid("shard count must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    for old in shard_files(out_dir)? {
        std::fs::remove_file(&old).map_err(CliError::io(&old))?;
    }
    let spill_path = |s: usize| out_dir.join(format!("spill-{s:04}.tmp"));
    let mut spills = (0..shards)
        .map(|s| File::create(spill_path(s)).map(BufWriter::new).map_err(CliError::io(spill_path(s))))
        .collect::<Result<Vec<_>>>()?;
    let rejects_path = out_dir.join("rejects.tsv");
    let mut rejects = BufWriter::new(File::create(&rejects_path).map_err(CliError::io(&rejects_path))?);
    writeln!(rejects, "source\treason\ttext").map_err(CliError::io(&rejects_path))?;
    let (mut read, mut parsed, mut rejected) = (0u64, 0u64, 0u64);
    for input in inputs {
        let f = File::open(input).map_err(CliError::io(input))?;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(CliError::io(input))?;
            let Some(text) = line.split_whitespace().next() else { continue };
            read += 1;
            match canonical_smiles_str(text) {
                Ok(canon) => {
                    parsed += 1;
                    let h = xxhash_rust::xxh3::xxh3_128(canon.as_bytes());
                    let s = shard_of(h, shards);
                    writeln!(spills[s], "{h:032x}\t{canon}").map_err(CliError::io(spill_path(s)))?;
                }
                Err(e) => {
                    rejected += 1;
                    log::debug!("{}:{}: {e}", input.display(), i + 1);
                    writeln!(rejects, "{}:{}\t{e}\t{text}", input.display(), i + 1).map_err(CliError::io(&rejects_path))?;
                }
            }
        }
    }
    rejects.flush().map_err(CliError::io(&rejects_path))?;
    for (s, w) in spills.iter_mut().enumerate() {
        w.flush().map_err(CliError::io(spill_path(s)))?;
    }
    drop(spills);
    let mut unique = 0u64;
    for s in 0..shards {
        let sp = spill_path(s);
        let mut seen: HashSet<u128> = HashSet::new();
        let out = shard_path(out_dir, s);
        let mut w = BufWriter::new(File::create(&out).map_err(CliError::io(&out))?);
        for line in BufReader::new(File::open(&sp).map_err(CliError::io(&sp))?).lines() {
            let line = line.map_err(CliError::io(&sp))?;
            let (h, canon) = line.split_once('\t').ok_or_else(|| CliError::corrupt(&sp, "bad spill record"))?;
            let h = u128::from_str_radix(h, 16).map_err(|_| CliError::corrupt(&sp, "bad spill hash"))?;
            if seen.insert(h) {
                unique += 1;
                writeln!(w, "{canon}").map_err(CliError::io(&out))?;
            }
        }
        w.flush().map_err(CliError::io(&out))?;
        std::fs::remove_file(&sp).map_err(CliError::io(&sp))?;
    }
    let stats = DedupStats {
        read,
        parsed,
        unique,
        rejected,
        shards,
        hash_algorithm: molbart_core::HASH_ALGORITHM.into(),
        toolkit_version: molbart_core::VERSION.into(),
    };
    crate::formats::write_json(&out_dir.join("stats.json"), &stats)?;
    Ok(stats)
}

/// Every SMILES of a dedup output directory, shard by shard.
pub fn read_deduped(dir: &Path) -> Result<Vec<String>> {
    let files = shard_files(dir)?;
    if files.is_empty() {
        return Err(CliError::MissingArtifact(format!("no deduplicated corpus in {} (run `dedup` first)", dir.display())));
    }
    let mut out = Vec::new();
    for f in files {
        out.extend(crate::formats::read_smiles_lines(&f)?.into_iter().map(|(_, s)| s));
    }
    Ok(out)
}
