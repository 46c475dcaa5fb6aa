//! Vocabulary files, labelled datasets, SMILES lists and JSON lines.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use molbart_core::tokenizer::Vocab;
use serde::Serialize;

use crate::error::{CliError, Result};

const VOCAB_MAGIC: &str = "unigram-vocab v1";

/// Header line `unigram-vocab v1 size=<n>`, then one `token<TAB>logprob`
/// line per entry, specials first. Log-probabilities are written in the
/// shortest form that reads back to the same bits.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{VOCAB_MAGIC} size={}\n", vocab.len()));
    for (tok, lp) in vocab.entries() {
        out.push_str(&format!("{tok}\t{lp:?}\n"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let size: usize = header
        .strip_prefix(VOCAB_MAGIC)
        .and_then(|r| r.trim().strip_prefix("size="))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| CliError::corrupt(path, "bad vocabulary header"))?;
    let mut entries = Vec::with_capacity(size);
    for (i, line) in lines.enumerate() {
        let (tok, lp) = line.rsplit_once('\t').ok_or_else(|| CliError::corrupt(path, format!("line {}: no tab", i + 2)))?;
        let lp: f64 = lp.parse().map_err(|_| CliError::corrupt(path, format!("line {}: bad log-probability", i + 2)))?;
        entries.push((tok.to_string(), lp));
    }
    if entries.len() != size {
        return Err(CliError::corrupt(path, format!("header says {size} entries, found {}", entries.len())));
    }
    Vocab::from_entries(entries).map_err(|e| CliError::corrupt(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(CliError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(CliError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::corrupt(path, e))
}

/// One compact JSON document per line.
pub fn jsonl_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut s = String::new();
    for v in values {
        s.push_str(&jsonl_line(v)?);
    }
    write_atomic(path, s.as_bytes())
}

/// Lines of a newline-SMILES file: the first whitespace-separated field
/// of every non-blank line, with its 1-based line number.
pub fn read_smiles_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(CliError::io(path))?;
        if let Some(tok) = line.split_whitespace().next() {
            out.push((i + 1, tok.to_string()));
        }
    }
    Ok(out)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l.as_ref());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// A labelled CSV: a `smiles` column plus named columns. Empty cells are
/// missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub smiles: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major cells, `None` when empty.
    pub cells: Vec<Vec<Option<String>>>,
}

impl Dataset {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        let smiles_col = headers
            .iter()
            .position(|h| h == "smiles")
            .ok_or_else(|| CliError::InvalidInput(format!("{}: no `smiles` column", path.display())))?;
        let columns: Vec<String> = headers.iter().enumerate().filter(|&(i, _)| i != smiles_col).map(|(_, h)| h.to_string()).collect();
        let mut ds = Dataset { smiles: Vec::new(), columns, cells: Vec::new() };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            ds.smiles.push(rec.get(smiles_col).unwrap_or_default().to_string());
            ds.cells.push(
                rec.iter()
                    .enumerate()
                    .filter(|&(i, _)| i != smiles_col)
                    .map(|(_, c)| (!c.is_empty()).then(|| c.to_string()))
                    .collect(),
            );
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.smiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smiles.is_empty()
    }

    fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::InvalidInput(format!("dataset has no column {name:?}")))
    }

    /// Raw text of a column.
    pub fn text_column(&self, name: &str) -> Result<Vec<Option<&str>>> {
        let c = self.column_index(name)?;
        Ok(self.cells.iter().map(|r| r[c].as_deref()).collect())
    }

    /// Numeric column; empty cells are `None`.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<Option<f64>>> {
        self.text_column(name)?
            .into_iter()
            .enumerate()
            .map(|(i, v)| match v {
                None => Ok(None),
                Some(s) => s
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| CliError::InvalidInput(format!("row {}: {name} value {s:?} is not a number", i + 1))),
            })
            .collect()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    let f = File::create(path).map_err(CliError::io(path))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

/// Appends `text` to `path`, creating it if needed.
pub fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(CliError::io(path))?;
    f.write_all(text.as_bytes()).map_err(CliError::io(path))?;
    f.sync_data().map_err(CliError::io(path))
}
