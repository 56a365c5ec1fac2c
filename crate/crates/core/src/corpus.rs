//! Corpus, query and triples files; parsing and synthetic generation.
//!
//! A corpus file holds one document per line as `<id> TAB <text> LF`. The id
//! ends at the first TAB; anything after it, including further TABs, is text.
//! Query files use the same layout. Triples files hold
//! `<query_id> TAB <positive_doc_id> LF`; negatives are sampled at run time and
//! never stored.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checksum::{self, DigestWriter};
use crate::rng::{splitmix64, StreamRng};

pub const MAX_ID_LEN: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdError {
    #[error("id is empty")]
    Empty,
    #[error("id is {0} bytes, longer than {MAX_ID_LEN}")]
    TooLong(usize),
    #[error("id contains forbidden byte 0x{0:02x}")]
    ForbiddenByte(u8),
}

/// Document (or query) identifier: 1 to 1024 bytes, free of TAB, LF and NUL.
///
/// NUL is excluded so zero-padded fixed-width index keys stay unambiguous.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DocId(Box<[u8]>);

impl DocId {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self, IdError> {
        let bytes = bytes.into();
        validate_id(&bytes)?;
        Ok(Self(bytes.into_boxed_slice()))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn validate_id(bytes: &[u8]) -> Result<(), IdError> {
    if bytes.is_empty() {
        return Err(IdError::Empty);
    }
    if bytes.len() > MAX_ID_LEN {
        return Err(IdError::TooLong(bytes.len()));
    }
    if let Some(&b) = bytes.iter().find(|&&b| matches!(b, b'\t' | b'\n' | 0)) {
        return Err(IdError::ForbiddenByte(b));
    }
    Ok(())
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", String::from_utf8_lossy(&self.0))
    }
}

impl fmt::Debug for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DocId({:?})", String::from_utf8_lossy(&self.0))
    }
}

impl TryFrom<&str> for DocId {
    type Error = IdError;

    fn try_from(s: &str) -> Result<Self, IdError> {
        DocId::new(s.as_bytes())
    }
}

impl AsRef<[u8]> for DocId {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: no TAB separator")]
    NoTab { line: u64 },
    #[error("line {line}: empty id")]
    EmptyId { line: u64 },
    #[error("line {line}: invalid id: {source}")]
    InvalidId { line: u64, source: IdError },
    #[error("line {line}: text is not valid UTF-8")]
    InvalidUtf8 { line: u64 },
    #[error("line {line}: expected exactly two TAB-separated fields")]
    BadTriple { line: u64 },
    #[error("text contains a line feed")]
    TextHasNewline,
    #[error("invalid synthetic corpus parameters: {0}")]
    InvalidSpec(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A stored document: id plus UTF-8 text without LF.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DocRecord {
    pub id: DocId,
    pub text: String,
}

/// Queries share the document line format and its rules.
pub type QueryRecord = DocRecord;

impl DocRecord {
    pub fn new(id: DocId, text: impl Into<String>) -> Result<Self, CorpusError> {
        let text = text.into();
        if text.contains('\n') {
            return Err(CorpusError::TextHasNewline);
        }
        Ok(Self { id, text })
    }

    /// `<id> TAB <text> LF`
    pub fn write_line(&self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(self.id.as_bytes())?;
        out.write_all(b"\t")?;
        out.write_all(self.text.as_bytes())?;
        out.write_all(b"\n")
    }

    pub fn to_line(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.id.len() + self.text.len() + 2);
        self.write_line(&mut v).expect("writing to a Vec cannot fail");
        v
    }
}

/// Splits a corpus line without allocating. Returns `(id, text)`.
///
/// A single trailing LF is stripped; the id is everything before the first
/// TAB. `line_number` is 1-based and only used in errors.
pub fn split_corpus_line(line: &[u8], line_number: u64) -> Result<(&[u8], &str), CorpusError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let tab = line
        .iter()
        .position(|&b| b == b'\t')
        .ok_or(CorpusError::NoTab { line: line_number })?;
    let (id, rest) = (&line[..tab], &line[tab + 1..]);
    match validate_id(id) {
        Ok(()) => {}
        Err(IdError::Empty) => return Err(CorpusError::EmptyId { line: line_number }),
        Err(source) => {
            return Err(CorpusError::InvalidId {
                line: line_number,
                source,
            })
        }
    }
    let text = std::str::from_utf8(rest).map_err(|_| CorpusError::InvalidUtf8 { line: line_number })?;
    Ok((id, text))
}

pub fn parse_corpus_line(line: &[u8], line_number: u64) -> Result<DocRecord, CorpusError> {
    let (id, text) = split_corpus_line(line, line_number)?;
    Ok(DocRecord {
        id: DocId(id.into()),
        text: text.to_owned(),
    })
}

/// One parsed corpus line and where it sits in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusLine {
    pub record: DocRecord,
    /// Offset of the first byte of the line.
    pub offset: u64,
    /// Byte length of the line including its LF, if present.
    pub line_len: u64,
}

/// Streams the lines of a corpus file in order, tracking byte offsets.
pub struct CorpusReader<R> {
    reader: R,
    buf: Vec<u8>,
    offset: u64,
    line_number: u64,
    failed: bool,
}

impl<R: BufRead> CorpusReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            reader,
            buf: Vec::new(),
            offset: 0,
            line_number: 0,
            failed: false,
        }
    }

    /// Advances to the next line and hands its raw bytes, offset and 1-based
    /// line number to `f`. Returns `Ok(None)` at end of file.
    pub fn next_raw<T>(
        &mut self,
        f: impl FnOnce(&[u8], u64, u64) -> Result<T, CorpusError>,
    ) -> Result<Option<T>, CorpusError> {
        self.buf.clear();
        let n = self.reader.read_until(b'\n', &mut self.buf)?;
        if n == 0 {
            return Ok(None);
        }
        self.line_number += 1;
        let offset = self.offset;
        self.offset += n as u64;
        f(&self.buf, offset, self.line_number).map(Some)
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<CorpusLine, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self
            .next_raw(|line, offset, number| {
                Ok(CorpusLine {
                    record: parse_corpus_line(line, number)?,
                    offset,
                    line_len: line.len() as u64,
                })
            })
            .transpose();
        if matches!(item, Some(Err(_))) {
            self.failed = true;
        }
        item
    }
}

pub fn iterate_corpus(path: impl AsRef<Path>) -> Result<CorpusReader<BufReader<File>>, CorpusError> {
    let file = File::open(path)?;
    Ok(CorpusReader::new(BufReader::with_capacity(1 << 16, file)))
}

pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, CorpusError> {
    iterate_corpus(path)?.map(|r| r.map(|l| l.record)).collect()
}

/// A training triple as stored on disk: the negative is drawn at run time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripleSpec {
    pub query_id: DocId,
    pub positive_doc_id: DocId,
}

impl TripleSpec {
    pub fn write_line(&self, out: &mut impl Write) -> io::Result<()> {
        out.write_all(self.query_id.as_bytes())?;
        out.write_all(b"\t")?;
        out.write_all(self.positive_doc_id.as_bytes())?;
        out.write_all(b"\n")
    }
}

pub fn parse_triple_line(line: &[u8], line_number: u64) -> Result<TripleSpec, CorpusError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let mut fields = line.split(|&b| b == b'\t');
    let (Some(q), Some(p), None) = (fields.next(), fields.next(), fields.next()) else {
        return Err(if line.contains(&b'\t') {
            CorpusError::BadTriple { line: line_number }
        } else {
            CorpusError::NoTab { line: line_number }
        });
    };
    let id = |b: &[u8]| {
        DocId::new(b).map_err(|source| match source {
            IdError::Empty => CorpusError::EmptyId { line: line_number },
            source => CorpusError::InvalidId {
                line: line_number,
                source,
            },
        })
    };
    Ok(TripleSpec {
        query_id: id(q)?,
        positive_doc_id: id(p)?,
    })
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<TripleSpec>, CorpusError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    let mut out = Vec::new();
    let mut line_number = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            return Ok(out);
        }
        line_number += 1;
        out.push(parse_triple_line(&buf, line_number)?);
    }
}

/// Parameters of a synthetic corpus. The same spec always produces the same
/// bytes.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_docs: u64,
    /// Mean document length in characters.
    pub mean_len: u64,
    /// Log-normal sigma of the length distribution.
    pub len_dispersion: f64,
    pub vocab_size: u32,
    pub seed: u64,
    pub zipf_exponent: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_docs: 10_000,
            mean_len: 1000,
            len_dispersion: 0.5,
            vocab_size: 50_000,
            seed: 0,
            zipf_exponent: 1.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidSpec(m.to_owned()));
        if self.mean_len == 0 {
            return bad("mean_len must be at least 1");
        }
        if !(self.len_dispersion.is_finite() && self.len_dispersion >= 0.0) {
            return bad("len_dispersion must be finite and >= 0");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be at least 1");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return bad("zipf_exponent must be finite and > 0");
        }
        Ok(())
    }
}

/// Summary of a written corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub n_docs: u64,
    pub total_bytes: u64,
    pub checksum: u64,
}

impl Manifest {
    pub fn render(&self) -> String {
        format!(
            "n_docs={}\ntotal_bytes={}\nchecksum={}\n",
            self.n_docs,
            self.total_bytes,
            checksum::to_hex(self.checksum)
        )
    }

    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        let mut n_docs = None;
        let mut total_bytes = None;
        let mut checksum = None;
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CorpusError::Manifest(format!("not key=value: {line:?}")))?;
            let num = |radix| {
                u64::from_str_radix(v.trim(), radix)
                    .map_err(|e| CorpusError::Manifest(format!("{k}: {e}")))
            };
            match k.trim() {
                "n_docs" => n_docs = Some(num(10)?),
                "total_bytes" => total_bytes = Some(num(10)?),
                "checksum" => checksum = Some(num(16)?),
                _ => {}
            }
        }
        let missing = |k: &str| CorpusError::Manifest(format!("missing {k}"));
        Ok(Self {
            n_docs: n_docs.ok_or_else(|| missing("n_docs"))?,
            total_bytes: total_bytes.ok_or_else(|| missing("total_bytes"))?,
            checksum: checksum.ok_or_else(|| missing("checksum"))?,
        })
    }
}

/// Zipf-distributed synthetic words.
struct Vocabulary {
    words: Vec<String>,
    cdf: Vec<f64>,
}

impl Vocabulary {
    fn new(size: u32, exponent: f64) -> Self {
        let words = (0..size).map(synthetic_word).collect();
        let mut cdf = Vec::with_capacity(size as usize);
        let mut acc = 0.0;
        for rank in 1..=size {
            acc += 1.0 / libm::pow(f64::from(rank), exponent);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Self { words, cdf }
    }

    fn sample(&self, rng: &mut StreamRng) -> &str {
        let u = rng.unit();
        let i = self.cdf.partition_point(|&c| c <= u).min(self.words.len() - 1);
        &self.words[i]
    }
}

/// Word for a frequency rank: one to five pseudo-random letters followed by
/// the rank in bijective base 26, so every rank maps to a distinct word.
fn synthetic_word(rank: u32) -> String {
    let mut h = splitmix64(u64::from(rank) ^ 0x5eed_1e77_e25a_11ce);
    let prefix = 1 + (h % 5) as usize;
    let mut w = String::with_capacity(prefix + 4);
    for _ in 0..prefix {
        h = splitmix64(h);
        w.push((b'a' + (h % 26) as u8) as char);
    }
    let mut n = u64::from(rank) + 1;
    let mut tail = Vec::new();
    while n > 0 {
        n -= 1;
        tail.push(b'a' + (n % 26) as u8);
        n /= 26;
    }
    w.extend(tail.iter().rev().map(|&b| b as char));
    w
}

fn id_width(count: u64) -> usize {
    let digits = count.saturating_sub(1).max(1).ilog10() as usize + 1;
    digits.max(8)
}

/// Id of the `ordinal`-th generated document in a corpus of `count`.
pub fn synthetic_doc_id(ordinal: u64, count: u64) -> DocId {
    DocId(format!("d{:0w$}", ordinal, w = id_width(count)).into_bytes().into())
}

pub fn synthetic_query_id(ordinal: u64, count: u64) -> DocId {
    DocId(format!("q{:0w$}", ordinal, w = id_width(count)).into_bytes().into())
}

/// Chance that the next token starts a repeated phrase.
const PHRASE_PROBABILITY: f64 = 0.15;
const PHRASE_MIN_WORDS: usize = 2;
const PHRASE_MAX_WORDS: usize = 5;

struct TextGenerator {
    vocab: Vocabulary,
    mu: f64,
    sigma: f64,
    max_len: u64,
}

impl TextGenerator {
    fn new(spec: &SynthSpec) -> Self {
        let sigma = spec.len_dispersion;
        Self {
            vocab: Vocabulary::new(spec.vocab_size, spec.zipf_exponent),
            // Log-normal with arithmetic mean `mean_len`.
            mu: libm::log(spec.mean_len as f64) - sigma * sigma / 2.0,
            sigma,
            max_len: 64 * spec.mean_len,
        }
    }

    fn doc_len(&self, rng: &mut StreamRng) -> usize {
        let z = rng.standard_normal();
        let len = libm::round(libm::exp(self.mu + self.sigma * z));
        (len.clamp(1.0, self.max_len as f64)) as usize
    }

    /// Whitespace-joined Zipf tokens cut to exactly `len` bytes, minus a
    /// dangling trailing space. Now and then a short run of earlier words is
    /// repeated, as phrases recur in real text.
    fn fill(&self, rng: &mut StreamRng, len: usize, out: &mut String) {
        out.clear();
        let mut starts: Vec<usize> = Vec::new();
        while out.len() < len {
            if !out.is_empty() {
                out.push(' ');
            }
            if starts.len() >= PHRASE_MAX_WORDS && rng.unit() < PHRASE_PROBABILITY {
                let words = PHRASE_MIN_WORDS + rng.index(PHRASE_MAX_WORDS - PHRASE_MIN_WORDS + 1);
                let first = rng.index(starts.len() - words + 1);
                let end = starts.get(first + words).map_or(out.len() - 1, |&e| e - 1);
                let phrase = out[starts[first]..end].to_owned();
                let base = out.len();
                starts.push(base);
                starts.extend(phrase.match_indices(' ').map(|(i, _)| base + i + 1));
                out.push_str(&phrase);
            } else {
                starts.push(out.len());
                out.push_str(self.vocab.sample(rng));
            }
        }
        out.truncate(len);
        if out.ends_with(' ') {
            out.pop();
        }
    }

    fn fill_tokens(&self, rng: &mut StreamRng, tokens: usize, out: &mut String) {
        out.clear();
        for i in 0..tokens {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.vocab.sample(rng));
        }
    }
}

/// Writes `spec.n_docs` synthetic documents to `out` and returns the manifest.
///
/// Ids are `d` plus a zero-padded ordinal; lengths are log-normal around
/// `mean_len`, clamped to `[1, 64 * mean_len]`; tokens are Zipf over
/// `vocab_size` synthetic words.
pub fn write_corpus(spec: &SynthSpec, out: impl Write) -> Result<Manifest, CorpusError> {
    spec.validate()?;
    let gen = TextGenerator::new(spec);
    let mut rng = StreamRng::seeded(spec.seed);
    let mut w = DigestWriter::new(out);
    let mut text = String::new();
    for i in 0..spec.n_docs {
        let len = gen.doc_len(&mut rng);
        gen.fill(&mut rng, len, &mut text);
        w.write_all(synthetic_doc_id(i, spec.n_docs).as_bytes())?;
        w.write_all(b"\t")?;
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let digest = w.digest();
    Ok(Manifest {
        n_docs: spec.n_docs,
        total_bytes: digest.len,
        checksum: digest.checksum,
    })
}

pub fn generate_corpus(spec: &SynthSpec, out_path: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    let file = File::create(out_path)?;
    let mut w = BufWriter::with_capacity(1 << 16, file);
    let manifest = write_corpus(spec, &mut w)?;
    w.flush()?;
    Ok(manifest)
}

/// File names of a generated or built dataset inside one directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataLayout {
    pub dir: PathBuf,
}

impl DataLayout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.tsv")
    }

    pub fn queries(&self) -> PathBuf {
        self.dir.join("queries.tsv")
    }

    pub fn triples(&self) -> PathBuf {
        self.dir.join("triples.tsv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.txt")
    }

    /// Raw-offset index over `corpus.tsv`.
    pub fn offset_index(&self) -> PathBuf {
        self.dir.join("corpus.dsix")
    }

    pub fn compressed_data(&self) -> PathBuf {
        self.dir.join("docs.lz4")
    }

    pub fn compressed_index(&self) -> PathBuf {
        self.dir.join("docs.dsix")
    }
}

/// What [`generate_dataset`] wrote.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSummary {
    pub corpus: Manifest,
    pub n_queries: u64,
}

/// Default query count: one query per ten documents, at least one for a
/// non-empty corpus.
pub fn default_query_count(n_docs: u64) -> u64 {
    if n_docs == 0 {
        0
    } else {
        n_docs.div_ceil(10)
    }
}

/// Writes corpus, queries, triples and manifest into `layout.dir`.
///
/// Each query gets one positive document drawn uniformly from the corpus.
/// Queries and triples come from a stream independent of the corpus stream,
/// so changing the query count leaves `corpus.tsv` untouched.
pub fn generate_dataset(
    spec: &SynthSpec,
    n_queries: u64,
    layout: &DataLayout,
) -> Result<DatasetSummary, CorpusError> {
    spec.validate()?;
    if n_queries > 0 && spec.n_docs == 0 {
        return Err(CorpusError::InvalidSpec(
            "queries need at least one document".into(),
        ));
    }
    std::fs::create_dir_all(&layout.dir)?;
    let corpus = generate_corpus(spec, layout.corpus())?;

    let gen = TextGenerator::new(spec);
    let mut rng = StreamRng::seeded(splitmix64(spec.seed ^ 0x7175_6572_6965_7321));
    let mut queries = BufWriter::new(File::create(layout.queries())?);
    let mut triples = BufWriter::new(File::create(layout.triples())?);
    let mut text = String::new();
    for i in 0..n_queries {
        let qid = synthetic_query_id(i, n_queries);
        let tokens = 3 + rng.index(8);
        gen.fill_tokens(&mut rng, tokens, &mut text);
        DocRecord {
            id: qid.clone(),
            text: text.clone(),
        }
        .write_line(&mut queries)?;
        let pos = rng.below(spec.n_docs);
        TripleSpec {
            query_id: qid,
            positive_doc_id: synthetic_doc_id(pos, spec.n_docs),
        }
        .write_line(&mut triples)?;
    }
    queries.flush()?;
    triples.flush()?;
    std::fs::write(layout.manifest(), corpus.render())?;
    Ok(DatasetSummary { corpus, n_queries })
}
