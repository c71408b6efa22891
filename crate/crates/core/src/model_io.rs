//! Embedding text files, the model container, trainer checkpoints and
//! embedding export.
//!
//! # Model container
//!
//! ```text
//! ALONE-MODEL\n
//! key=value\n            one per line, see below
//! ...
//! vocab:\n
//! <word>\n               vocab_size lines, in index order
//! end_header\n
//! o                      d_o floats
//! W1                     d_inter × d_o floats, row-major
//! W2                     d_e × d_inter floats, row-major
//! sources                non-volatile files only: M·d_o·c elements in
//!                        [matrix][column][row] order, u8 for binary
//!                        filters, f64 for real filters
//! sha256                 32 bytes over everything above
//! ```
//!
//! Floats are little-endian, 8 bytes for `precision=f64` and 4 bytes for
//! `precision=f32`. Header keys: `format_version`, `precision`, `volatile`,
//! `filter_kind`, `d_o`, `c`, `m`, `p_o`, `filter_seed`, `d_inter`, `d_e`,
//! `train_base`, `init_weights`, `init_base`, `init_seed`, `vocab_size`,
//! `payload_bytes`, `sources_bytes`, plus free-form `meta.*` entries.
//!
//! The filter bank is always rebuilt from the header's filter fields. When
//! sources are stored they must equal the rebuilt ones exactly.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::composer::{embed_batch, AloneModel, INIT_BASE, INIT_WEIGHTS};
use crate::error::{Error, Result};
use crate::filter_bank::{build_filter_bank, FilterBank, FilterConfig, FilterKind, Sources};
use crate::trainer::{TargetEmbeddingTable, TrainerState};

pub const FORMAT_VERSION: u32 = 1;
const MODEL_MAGIC: &str = "ALONE-MODEL";
const STATE_MAGIC: &str = "ALONE-TRAINER-STATE";
const END_HEADER: &str = "end_header";
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn width(&self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreOptions {
    /// Omit the filter sources; they are rebuilt from the seed on load.
    pub volatile: bool,
    pub precision: Precision,
    /// Extra `meta.<key>=<value>` header entries.
    pub metadata: Vec<(String, String)>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            volatile: true,
            precision: Precision::F64,
            metadata: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub model: AloneModel,
    pub bank: FilterBank,
    pub precision: Precision,
    pub volatile: bool,
    pub metadata: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// Embedding text
// ---------------------------------------------------------------------------

/// Parses `word v1 … vD` lines. Returns the table and the number of duplicate
/// words whose earlier values were replaced by a later line.
pub fn read_embedding_text(path: impl AsRef<Path>) -> Result<(TargetEmbeddingTable, usize)> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut vocab: Vec<String> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = Default::default();
    let mut values: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut duplicates = 0;
    let mut row = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else {
            continue;
        };
        row.clear();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(lineno, format!("`{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("`{f}` is not finite")));
            }
            row.push(v);
        }
        match dim {
            None if row.is_empty() => {
                return Err(parse_err(lineno, "no vector components".into()))
            }
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(parse_err(
                    lineno,
                    format!("expected {d} components, found {}", row.len()),
                ))
            }
            Some(_) => {}
        }
        let d = row.len();
        match index.get(word) {
            Some(&existing) => {
                duplicates += 1;
                values[existing * d..(existing + 1) * d].copy_from_slice(&row);
            }
            None => {
                index.insert(word.to_string(), vocab.len());
                vocab.push(word.to_string());
                values.extend_from_slice(&row);
            }
        }
    }
    let Some(d) = dim else {
        return Err(Error::NoRecords(path.to_path_buf()));
    };
    if duplicates > 0 {
        log::warn!(
            "{}: {duplicates} duplicate words, keeping the last occurrence",
            path.display()
        );
    }
    let matrix = Array2::from_shape_vec((vocab.len(), d), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((TargetEmbeddingTable::new(vocab, matrix)?, duplicates))
}

pub fn load_embedding_text(path: impl AsRef<Path>) -> Result<TargetEmbeddingTable> {
    Ok(read_embedding_text(path)?.0)
}

/// Reads a word-frequency ranking: one word per line (first whitespace
/// field), most frequent first.
pub fn load_frequency_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .map(str::to_string)
        .collect())
}

fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<&mut File>) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Writes every vocabulary word's composed embedding as `word v1 … vD`.
/// Values use the shortest decimal form that parses back to the same `f64`.
pub fn export_embeddings(model: &AloneModel, bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    if model.vocab().is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    model.check_bank(bank)?;
    let all: Vec<usize> = (0..model.vocab().len()).collect();
    let embeddings = embed_batch(model, bank, &all)?;
    write_atomic(path.as_ref(), |w| {
        for (word, row) in model.vocab().iter().zip(embeddings.rows()) {
            w.write_all(word.as_bytes())?;
            for v in row {
                write!(w, " {v}")?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Container plumbing shared by model files and trainer checkpoints
// ---------------------------------------------------------------------------

struct Header {
    entries: BTreeMap<String, String>,
    vocab: Vec<String>,
    /// Byte offset of the payload.
    payload_start: usize,
}

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing header key `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("bad value `{raw}` for `{key}`")))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Format(format!("bad boolean `{other}` for `{key}`"))),
        }
    }
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("header is truncated".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("header is not UTF-8".into()))
}

fn parse_header(bytes: &[u8], magic: &str) -> Result<Header> {
    let mut pos = 0;
    if next_line(bytes, &mut pos)? != magic {
        return Err(Error::Format(format!("missing `{magic}` magic line")));
    }
    let mut entries = BTreeMap::new();
    let mut vocab = Vec::new();
    let mut in_vocab = false;
    loop {
        let line = next_line(bytes, &mut pos)?;
        if line == END_HEADER {
            break;
        }
        if in_vocab {
            vocab.push(line.to_string());
        } else if line == "vocab:" {
            in_vocab = true;
        } else {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header line `{line}`")))?;
            entries.insert(k.to_string(), v.to_string());
        }
    }
    let header = Header {
        entries,
        vocab,
        payload_start: pos,
    };
    let version: u32 = header.parse("format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(header)
}

/// Checks the total length implied by the header before touching the payload,
/// then the trailing checksum.
fn check_layout(bytes: &[u8], header: &Header, payload_bytes: usize) -> Result<()> {
    let expected = header
        .payload_start
        .checked_add(payload_bytes)
        .and_then(|n| n.checked_add(CHECKSUM_LEN))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "file has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    Ok(())
}

fn push_header_line(out: &mut Vec<u8>, key: &str, value: impl std::fmt::Display) {
    out.extend_from_slice(format!("{key}={value}\n").as_bytes());
}

fn push_floats(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>, precision: Precision) {
    for v in values {
        match precision {
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

struct FloatReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    precision: Precision,
}

impl FloatReader<'_> {
    fn take(&mut self, n: usize) -> Vec<f64> {
        let w = self.precision.width();
        let chunk = &self.bytes[self.pos..self.pos + n * w];
        self.pos += n * w;
        match self.precision {
            Precision::F64 => chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Precision::F32 => chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        }
    }
}

fn checked_product(factors: &[usize]) -> Result<usize> {
    factors
        .iter()
        .try_fold(1usize, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::Format("dimension product overflows".into()))
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

fn source_bytes(config: &FilterConfig) -> Result<usize> {
    let n = checked_product(&[config.m, config.d_o, config.c])?;
    Ok(match config.kind {
        FilterKind::BinaryMask => n,
        FilterKind::RealVector => checked_product(&[n, 8])?,
    })
}

fn payload_elements(d_o: usize, d_inter: usize, d_e: usize) -> Result<usize> {
    let w1 = checked_product(&[d_inter, d_o])?;
    let w2 = checked_product(&[d_e, d_inter])?;
    d_o.checked_add(w1)
        .and_then(|n| n.checked_add(w2))
        .ok_or_else(|| Error::Format("payload size overflows".into()))
}

/// Serializes a model into the container layout described in the module docs.
pub fn encode_model(model: &AloneModel, bank: &FilterBank, options: &StoreOptions) -> Result<Vec<u8>> {
    model.check_bank(bank)?;
    let cfg = model.filter_config();
    let precision = options.precision;
    let payload_bytes = payload_elements(model.d_o(), model.d_inter(), model.d_e())? * precision.width();
    let sources_bytes = if options.volatile { 0 } else { source_bytes(cfg)? };

    let mut out = Vec::new();
    out.extend_from_slice(format!("{MODEL_MAGIC}\n").as_bytes());
    push_header_line(&mut out, "format_version", FORMAT_VERSION);
    push_header_line(&mut out, "precision", precision.as_str());
    push_header_line(&mut out, "volatile", options.volatile);
    push_header_line(&mut out, "filter_kind", cfg.kind.as_str());
    push_header_line(&mut out, "d_o", cfg.d_o);
    push_header_line(&mut out, "c", cfg.c);
    push_header_line(&mut out, "m", cfg.m);
    push_header_line(&mut out, "p_o", format!("{:?}", cfg.p_o));
    push_header_line(&mut out, "filter_seed", cfg.seed);
    push_header_line(&mut out, "d_inter", model.d_inter());
    push_header_line(&mut out, "d_e", model.d_e());
    push_header_line(&mut out, "train_base", model.train_base());
    push_header_line(&mut out, "init_weights", INIT_WEIGHTS);
    push_header_line(&mut out, "init_base", INIT_BASE);
    push_header_line(&mut out, "init_seed", model.init_seed());
    push_header_line(&mut out, "vocab_size", model.vocab().len());
    push_header_line(&mut out, "payload_bytes", payload_bytes);
    push_header_line(&mut out, "sources_bytes", sources_bytes);
    for (k, v) in &options.metadata {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Config(format!("metadata entry `{k}` is not storable")));
        }
        push_header_line(&mut out, &format!("meta.{k}"), v);
    }
    out.extend_from_slice(b"vocab:\n");
    for w in model.vocab() {
        out.extend_from_slice(w.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(format!("{END_HEADER}\n").as_bytes());

    push_floats(&mut out, model.base().iter().copied(), precision);
    push_floats(&mut out, model.w1().iter().copied(), precision);
    push_floats(&mut out, model.w2().iter().copied(), precision);
    if !options.volatile {
        match bank.sources() {
            Sources::Binary(s) => out.extend_from_slice(s),
            Sources::Real(s) => push_floats(&mut out, s.iter().copied(), Precision::F64),
        }
    }
    Ok(finish(out))
}

pub fn decode_model(bytes: &[u8]) -> Result<LoadedModel> {
    let header = parse_header(bytes, MODEL_MAGIC)?;
    let precision: Precision = header
        .get("precision")?
        .parse()
        .map_err(|_| Error::Format("bad precision".into()))?;
    let volatile = header.parse_bool("volatile")?;
    let kind: FilterKind = header
        .get("filter_kind")?
        .parse()
        .map_err(|_| Error::Format("bad filter_kind".into()))?;
    let config = FilterConfig {
        d_o: header.parse("d_o")?,
        c: header.parse("c")?,
        m: header.parse("m")?,
        kind,
        p_o: header.parse("p_o")?,
        seed: header.parse("filter_seed")?,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("filter config: {e}")))?;
    let d_inter: usize = header.parse("d_inter")?;
    let d_e: usize = header.parse("d_e")?;
    let vocab_size: usize = header.parse("vocab_size")?;
    if header.vocab.len() != vocab_size {
        return Err(Error::Format(format!(
            "header lists {} words, vocab_size is {vocab_size}",
            header.vocab.len()
        )));
    }
    let payload_bytes = payload_elements(config.d_o, d_inter, d_e)?
        .checked_mul(precision.width())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if header.parse::<usize>("payload_bytes")? != payload_bytes {
        return Err(Error::Format("payload_bytes disagrees with dimensions".into()));
    }
    let sources_bytes = if volatile { 0 } else { source_bytes(&config)? };
    if header.parse::<usize>("sources_bytes")? != sources_bytes {
        return Err(Error::Format("sources_bytes disagrees with dimensions".into()));
    }
    let total = payload_bytes
        .checked_add(sources_bytes)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    check_layout(bytes, &header, total)?;

    let mut reader = FloatReader {
        bytes,
        pos: header.payload_start,
        precision,
    };
    let base = Array1::from(reader.take(config.d_o));
    let w1 = Array2::from_shape_vec((d_inter, config.d_o), reader.take(d_inter * config.d_o))
        .map_err(|e| Error::Format(e.to_string()))?;
    let w2 = Array2::from_shape_vec((d_e, d_inter), reader.take(d_e * d_inter))
        .map_err(|e| Error::Format(e.to_string()))?;

    let mut model = AloneModel::from_parts(
        base,
        w1,
        w2,
        config,
        header.vocab.clone(),
        header.parse_bool("train_base")?,
    )
    .map_err(|e| Error::Format(format!("model: {e}")))?;
    model.set_init_seed(header.parse("init_seed")?);

    if vocab_size == 0 {
        return Err(Error::EmptyVocabulary);
    }
    let bank = build_filter_bank(config, vocab_size)?;
    if !volatile {
        let stored = &bytes[reader.pos..reader.pos + sources_bytes];
        let matches = match bank.sources() {
            Sources::Binary(s) => s.as_slice() == stored,
            Sources::Real(s) => s
                .iter()
                .zip(stored.chunks_exact(8))
                .all(|(v, c)| v.to_le_bytes() == c),
        };
        if !matches {
            return Err(Error::Consistency(
                "stored filter sources differ from the sources rebuilt from the seed".into(),
            ));
        }
    }

    let metadata = header
        .entries
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(LoadedModel {
        model,
        bank,
        precision,
        volatile,
        metadata,
    })
}

/// Writes the model atomically (temporary file, then rename).
pub fn store_model(
    model: &AloneModel,
    bank: &FilterBank,
    path: impl AsRef<Path>,
    options: &StoreOptions,
) -> Result<()> {
    let bytes = encode_model(model, bank, options)?;
    write_atomic(path.as_ref(), |w| Ok(w.write_all(&bytes)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<LoadedModel> {
    decode_model(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Trainer checkpoints
// ---------------------------------------------------------------------------

/// Layout: `ALONE-TRAINER-STATE` header (`format_version`, `step`, `d_o`,
/// `d_inter`, `d_e`, `epochs`), then f64 blocks `m_W1, v_W1, m_W2, v_W2,
/// m_o, v_o, loss_history`, then a SHA-256 trailer.
pub fn encode_trainer_state(state: &TrainerState) -> Vec<u8> {
    let (d_inter, d_o) = state.m_w1.dim();
    let d_e = state.m_w2.nrows();
    let mut out = Vec::new();
    out.extend_from_slice(format!("{STATE_MAGIC}\n").as_bytes());
    push_header_line(&mut out, "format_version", FORMAT_VERSION);
    push_header_line(&mut out, "step", state.step);
    push_header_line(&mut out, "d_o", d_o);
    push_header_line(&mut out, "d_inter", d_inter);
    push_header_line(&mut out, "d_e", d_e);
    push_header_line(&mut out, "epochs", state.loss_history.len());
    out.extend_from_slice(format!("{END_HEADER}\n").as_bytes());
    for block in [&state.m_w1, &state.v_w1, &state.m_w2, &state.v_w2] {
        push_floats(&mut out, block.iter().copied(), Precision::F64);
    }
    push_floats(&mut out, state.m_base.iter().copied(), Precision::F64);
    push_floats(&mut out, state.v_base.iter().copied(), Precision::F64);
    push_floats(&mut out, state.loss_history.iter().copied(), Precision::F64);
    finish(out)
}

pub fn decode_trainer_state(bytes: &[u8]) -> Result<TrainerState> {
    let header = parse_header(bytes, STATE_MAGIC)?;
    let d_o: usize = header.parse("d_o")?;
    let d_inter: usize = header.parse("d_inter")?;
    let d_e: usize = header.parse("d_e")?;
    let epochs: usize = header.parse("epochs")?;
    let w1 = checked_product(&[d_inter, d_o])?;
    let w2 = checked_product(&[d_e, d_inter])?;
    let elements = [w1, w1, w2, w2, d_o, d_o, epochs]
        .iter()
        .try_fold(0usize, |acc, &n| acc.checked_add(n))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    check_layout(bytes, &header, elements)?;
    let mut r = FloatReader {
        bytes,
        pos: header.payload_start,
        precision: Precision::F64,
    };
    let mat = |r: &mut FloatReader, rows, cols| {
        Array2::from_shape_vec((rows, cols), r.take(rows * cols)).expect("sized above")
    };
    Ok(TrainerState {
        m_w1: mat(&mut r, d_inter, d_o),
        v_w1: mat(&mut r, d_inter, d_o),
        m_w2: mat(&mut r, d_e, d_inter),
        v_w2: mat(&mut r, d_e, d_inter),
        m_base: Array1::from(r.take(d_o)),
        v_base: Array1::from(r.take(d_o)),
        step: header.parse("step")?,
        loss_history: r.take(epochs),
    })
}

pub fn store_trainer_state(state: &TrainerState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_trainer_state(state);
    write_atomic(path.as_ref(), |w| Ok(w.write_all(&bytes)?))
}

pub fn load_trainer_state(path: impl AsRef<Path>) -> Result<TrainerState> {
    decode_trainer_state(&fs::read(path)?)
}
