//! Readers and writers for the on-disk dataset formats.
//!
//! * libsvm: `label idx:val ...`, 1-based feature indices.
//! * dense table: whitespace-separated numbers, label last.
//! * triplets: a `rows cols` header, then `i j y` lines with 0-based indices.
//! * UCI bag-of-words: `D`, `V`, `NNZ` header lines, then `doc word count`
//!   lines with 1-based ids.
//!
//! Blank lines and lines starting with `#` are skipped everywhere except
//! inside the bag-of-words header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ssvi_core::data::{CorpusData, DesignData, Document, TripletData};
use ssvi_core::linalg::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Open { path: PathBuf, source: std::io::Error },
    #[error("{source_name}:{line}: {msg}")]
    Parse { source_name: String, line: usize, msg: String },
    #[error("{source_name}: {msg}")]
    Format { source_name: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] ssvi_core::Error),
}

pub type IoResult<T> = Result<T, IoError>;

fn open(path: &Path) -> IoResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::Open { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> IoResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| IoError::Open { path: path.to_path_buf(), source })
}

fn name_of(path: &Path) -> String {
    path.display().to_string()
}

/// Numbered content lines, skipping blanks and `#` comments.
fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| match l {
        Ok(s) => {
            let t = s.trim();
            !t.is_empty() && !t.starts_with('#')
        }
        Err(_) => true,
    })
}

fn parse_err(source_name: &str, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { source_name: source_name.to_string(), line, msg: msg.into() }
}

fn number<T: std::str::FromStr>(tok: &str, source_name: &str, line: usize, what: &str) -> IoResult<T> {
    tok.parse().map_err(|_| parse_err(source_name, line, format!("invalid {what} {tok:?}")))
}

/// Parses libsvm rows. The dimension is the largest index seen unless `dim`
/// is given, in which case larger indices are an error.
pub fn parse_libsvm<R: BufRead>(reader: R, source_name: &str, dim: Option<usize>) -> IoResult<DesignData> {
    let mut rows: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    let mut max_idx = 0;
    for (line, text) in content_lines(reader) {
        let text = text?;
        let mut toks = text.split_whitespace();
        let label: f64 = number(toks.next().unwrap_or(""), source_name, line, "label")?;
        let mut feats = Vec::new();
        for tok in toks {
            let (i, v) = tok.split_once(':').ok_or_else(|| parse_err(source_name, line, format!("expected idx:val, got {tok:?}")))?;
            let i: usize = number(i, source_name, line, "feature index")?;
            if i == 0 {
                return Err(parse_err(source_name, line, "feature indices are 1-based"));
            }
            let v: f64 = number(v, source_name, line, "feature value")?;
            if let Some(d) = dim {
                if i > d {
                    return Err(parse_err(source_name, line, format!("feature index {i} exceeds dimension {d}")));
                }
            }
            max_idx = max_idx.max(i);
            feats.push((i - 1, v));
        }
        rows.push((label, feats));
    }
    let d = dim.unwrap_or(max_idx);
    let mut x = Matrix::zeros(rows.len(), d);
    for (r, (_, feats)) in rows.iter().enumerate() {
        for &(c, v) in feats {
            x[(r, c)] = v;
        }
    }
    Ok(DesignData::new(x, rows.into_iter().map(|r| r.0).collect())?)
}

pub fn read_libsvm(path: &Path, dim: Option<usize>) -> IoResult<DesignData> {
    parse_libsvm(open(path)?, &name_of(path), dim)
}

/// Writes nonzero features only.
pub fn write_libsvm<W: Write>(mut w: W, data: &DesignData) -> IoResult<()> {
    for r in 0..data.len() {
        write!(w, "{}", data.y[r])?;
        for c in 0..data.dim() {
            let v = data.x[(r, c)];
            if v != 0.0 {
                write!(w, " {}:{}", c + 1, v)?;
            }
        }
        writeln!(w)?;
    }
    Ok(w.flush()?)
}

pub fn save_libsvm(path: &Path, data: &DesignData) -> IoResult<()> {
    write_libsvm(create(path)?, data)
}

/// Dense rows `x_1 ... x_d y`.
pub fn parse_table<R: BufRead>(reader: R, source_name: &str) -> IoResult<DesignData> {
    let mut values = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (line, text) in content_lines(reader) {
        let text = text?;
        let row = text.split_whitespace().map(|t| number::<f64>(t, source_name, line, "value")).collect::<IoResult<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => return Err(parse_err(source_name, line, format!("expected {w} columns, found {}", row.len()))),
            _ => {}
        }
        if row.len() < 2 {
            return Err(parse_err(source_name, line, "need at least one feature and a label"));
        }
        values.extend_from_slice(&row[..row.len() - 1]);
        y.push(row[row.len() - 1]);
    }
    let d = width.map_or(0, |w| w - 1);
    Ok(DesignData::new(Matrix::from_row_slice(y.len(), d, &values), y)?)
}

pub fn read_table(path: &Path) -> IoResult<DesignData> {
    parse_table(open(path)?, &name_of(path))
}

pub fn write_table<W: Write>(mut w: W, data: &DesignData) -> IoResult<()> {
    for r in 0..data.len() {
        for c in 0..data.dim() {
            write!(w, "{} ", data.x[(r, c)])?;
        }
        writeln!(w, "{}", data.y[r])?;
    }
    Ok(w.flush()?)
}

pub fn save_table(path: &Path, data: &DesignData) -> IoResult<()> {
    write_table(create(path)?, data)
}

pub fn parse_triplets<R: BufRead>(reader: R, source_name: &str) -> IoResult<TripletData> {
    let mut lines = content_lines(reader);
    let (line, header) = lines.next().ok_or_else(|| IoError::Format { source_name: source_name.into(), msg: "missing `rows cols` header".into() })?;
    let header = header?;
    let dims: Vec<usize> = header.split_whitespace().map(|t| number(t, source_name, line, "shape")).collect::<IoResult<_>>()?;
    if dims.len() != 2 {
        return Err(parse_err(source_name, line, "header must be `rows cols`"));
    }
    let mut entries = Vec::new();
    for (line, text) in lines {
        let text = text?;
        let toks: Vec<&str> = text.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(source_name, line, "expected `row col value`"));
        }
        let i: usize = number(toks[0], source_name, line, "row")?;
        let j: usize = number(toks[1], source_name, line, "column")?;
        let y: f64 = number(toks[2], source_name, line, "value")?;
        if i >= dims[0] || j >= dims[1] {
            return Err(parse_err(source_name, line, format!("cell ({i}, {j}) outside {}x{}", dims[0], dims[1])));
        }
        entries.push((i, j, y));
    }
    TripletData::new(dims[0], dims[1], entries).map_err(|e| IoError::Format { source_name: source_name.into(), msg: e.to_string() })
}

pub fn read_triplets(path: &Path) -> IoResult<TripletData> {
    parse_triplets(open(path)?, &name_of(path))
}

pub fn write_triplets<W: Write>(mut w: W, data: &TripletData) -> IoResult<()> {
    writeln!(w, "{} {}", data.rows, data.cols)?;
    for &(i, j, y) in &data.entries {
        writeln!(w, "{i} {j} {y}")?;
    }
    Ok(w.flush()?)
}

pub fn save_triplets(path: &Path, data: &TripletData) -> IoResult<()> {
    write_triplets(create(path)?, data)
}

pub fn parse_bow<R: BufRead>(reader: R, source_name: &str) -> IoResult<CorpusData> {
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header = [0usize; 3];
    for (k, what) in ["document count", "vocabulary size", "nonzero count"].iter().enumerate() {
        let (line, text) = lines.next().ok_or_else(|| IoError::Format { source_name: source_name.into(), msg: format!("missing {what} header line") })?;
        header[k] = number(text?.trim(), source_name, line, what)?;
    }
    let [d, v, nnz] = header;
    let mut docs = vec![Vec::new(); d];
    let mut seen = 0usize;
    for (line, text) in lines {
        let text = text?;
        let t = text.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(parse_err(source_name, line, "expected `doc word count`"));
        }
        let doc: usize = number(toks[0], source_name, line, "document id")?;
        let word: usize = number(toks[1], source_name, line, "word id")?;
        let count: u32 = number(toks[2], source_name, line, "count")?;
        if doc == 0 || doc > d {
            return Err(parse_err(source_name, line, format!("document id {doc} outside 1..={d}")));
        }
        if word == 0 || word > v {
            return Err(parse_err(source_name, line, format!("word id {word} outside 1..={v}")));
        }
        if count == 0 {
            return Err(parse_err(source_name, line, "counts must be positive"));
        }
        docs[doc - 1].push((word - 1, count));
        seen += 1;
    }
    if seen != nnz {
        return Err(IoError::Format { source_name: source_name.into(), msg: format!("header declares {nnz} entries, body has {seen}") });
    }
    let docs = docs
        .into_iter()
        .map(|mut c| {
            c.sort_unstable();
            Document { counts: c }
        })
        .collect();
    Ok(CorpusData::new(v, docs)?)
}

pub fn read_bow(path: &Path) -> IoResult<CorpusData> {
    parse_bow(open(path)?, &name_of(path))
}

pub fn write_bow<W: Write>(mut w: W, corpus: &CorpusData) -> IoResult<()> {
    let nnz: usize = corpus.docs.iter().map(|d| d.counts.len()).sum();
    writeln!(w, "{}\n{}\n{}", corpus.len(), corpus.vocab, nnz)?;
    for (d, doc) in corpus.docs.iter().enumerate() {
        for &(word, c) in &doc.counts {
            writeln!(w, "{} {} {}", d + 1, word + 1, c)?;
        }
    }
    Ok(w.flush()?)
}

pub fn save_bow(path: &Path, corpus: &CorpusData) -> IoResult<()> {
    write_bow(create(path)?, corpus)
}
