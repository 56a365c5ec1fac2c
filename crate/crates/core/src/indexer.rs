//! Builders for the on-disk artifacts: the raw-corpus offset index and the
//! compressed store (LZ4 data file plus sorted index), and their verifier.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use lz4_flex::frame::{FrameDecoder, FrameEncoder, FrameInfo};
use thiserror::Error;

use crate::checksum::{self, DigestWriter};
use crate::corpus::{self, split_corpus_line, CorpusError, DocId};
use crate::index::{FormatError, IndexBuilder, IndexEntry, IndexKind, SortedKeyIndex};
use crate::rng::StreamRng;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("duplicate id {0}")]
    DuplicateId(DocId),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("document {id} is {len} bytes, over the 4 GiB entry limit")]
    DocumentTooLarge { id: DocId, len: u64 },
    #[error("compression failed: {0}")]
    Compression(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexStats {
    pub entries: u64,
    pub index_bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildStats {
    pub entries: u64,
    pub data_bytes: u64,
    pub text_bytes: u64,
    pub index_bytes: u64,
    /// `data_bytes / text_bytes`; 0 for an empty corpus.
    pub ratio: f64,
}

fn to_u32(id: &[u8], len: u64) -> Result<u32, BuildError> {
    u32::try_from(len).map_err(|_| BuildError::DocumentTooLarge {
        id: DocId::new(id).expect("validated while parsing"),
        len,
    })
}

fn finish_index(builder: &mut IndexBuilder) -> Result<(), BuildError> {
    builder
        .sort()
        .map_err(|id| BuildError::DuplicateId(DocId::new(id).expect("validated while parsing")))
}

fn write_atomically(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes a kind-0 index: for every line, `offset` is the line start,
/// `stored_len` the full line length and `raw_len` the text length. The header
/// records the corpus length and checksum.
pub fn build_offset_index(
    corpus_path: impl AsRef<Path>,
    out_index_path: impl AsRef<Path>,
) -> Result<IndexStats, BuildError> {
    let mut reader = corpus::iterate_corpus(&corpus_path)?;
    let mut builder = IndexBuilder::new();
    let mut hasher = checksum::Fnv1a64::new();
    let mut source_len = 0;
    loop {
        let step = reader.next_raw(|line, offset, number| {
            hasher.update(line);
            source_len = offset + line.len() as u64;
            let (id, text) = split_corpus_line(line, number)?;
            Ok((id.to_vec(), offset, line.len() as u64, text.len() as u64))
        })?;
        let Some((id, offset, line_len, text_len)) = step else { break };
        let entry = IndexEntry {
            offset,
            stored_len: to_u32(&id, line_len)?,
            raw_len: to_u32(&id, text_len)?,
        };
        builder.push(&id, entry);
    }
    finish_index(&mut builder)?;
    let bytes = builder.encode(IndexKind::RawOffsets, source_len, hasher.digest());
    write_atomically(out_index_path.as_ref(), &bytes)?;
    Ok(IndexStats {
        entries: builder.len() as u64,
        index_bytes: bytes.len() as u64,
    })
}

fn frame_info() -> FrameInfo {
    FrameInfo::new().content_checksum(false).block_checksums(false)
}

/// One LZ4 frame holding `text`.
pub fn compress_document(text: &[u8]) -> Result<Vec<u8>, BuildError> {
    let mut enc = FrameEncoder::with_frame_info(frame_info(), Vec::with_capacity(text.len() / 2 + 32));
    enc.write_all(text)?;
    enc.finish().map_err(|e| BuildError::Compression(e.to_string()))
}

/// Decodes one frame into `out`, which is cleared first.
pub fn decompress_document(frame: &[u8], raw_len: usize, out: &mut Vec<u8>) -> io::Result<()> {
    out.clear();
    out.reserve(raw_len);
    let mut dec = FrameDecoder::new(frame);
    // Read one byte past the expected length to detect oversize payloads.
    dec.by_ref().take(raw_len as u64 + 1).read_to_end(out)?;
    if out.len() != raw_len {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("decoded {} bytes, expected {raw_len}", out.len()),
        ));
    }
    Ok(())
}

/// Writes the compressed data file (one LZ4 frame per document, corpus order)
/// and its kind-1 index.
pub fn build_compressed_store(
    corpus_path: impl AsRef<Path>,
    out_data_path: impl AsRef<Path>,
    out_index_path: impl AsRef<Path>,
) -> Result<BuildStats, BuildError> {
    let out_data_path = out_data_path.as_ref();
    let mut reader = corpus::iterate_corpus(&corpus_path)?;
    let data_tmp = tmp_path(out_data_path);
    let mut data = DigestWriter::new(BufWriter::with_capacity(1 << 16, File::create(&data_tmp)?));
    let mut builder = IndexBuilder::new();
    let mut text_bytes = 0u64;
    loop {
        let step = reader.next_raw(|line, _, number| {
            let (id, text) = split_corpus_line(line, number)?;
            Ok((id.to_vec(), text.as_bytes().to_vec()))
        })?;
        let Some((id, text)) = step else { break };
        let frame = compress_document(&text)?;
        let entry = IndexEntry {
            offset: data.digest().len,
            stored_len: to_u32(&id, frame.len() as u64)?,
            raw_len: to_u32(&id, text.len() as u64)?,
        };
        data.write_all(&frame)?;
        text_bytes += text.len() as u64;
        builder.push(&id, entry);
    }
    finish_index(&mut builder).inspect_err(|_| {
        let _ = fs::remove_file(&data_tmp);
    })?;
    data.flush()?;
    let digest = data.digest();
    data.into_inner().into_inner().map_err(|e| e.into_error())?.sync_all()?;
    fs::rename(&data_tmp, out_data_path)?;

    let bytes = builder.encode(IndexKind::Compressed, digest.len, digest.checksum);
    write_atomically(out_index_path.as_ref(), &bytes)?;
    Ok(BuildStats {
        entries: builder.len() as u64,
        data_bytes: digest.len,
        text_bytes,
        index_bytes: bytes.len() as u64,
        ratio: if text_bytes == 0 {
            0.0
        } else {
            digest.len as f64 / text_bytes as f64
        },
    })
}

/// Outcome of [`verify_index`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    StaleIndex,
    Corrupt { entry: Option<u64>, detail: String },
}

impl Verdict {
    fn corrupt(entry: Option<usize>, detail: impl Into<String>) -> Self {
        Verdict::Corrupt {
            entry: entry.map(|e| e as u64),
            detail: detail.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }
}

/// How many entries [`verify_index_with`] decodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// A fixed pseudo-random sample of this many entries.
    Sample(usize),
}

/// Full check: header, size, key order, entry bounds, source checksum and a
/// decode of every entry.
pub fn verify_index(index_path: impl AsRef<Path>, source_path: impl AsRef<Path>) -> io::Result<Verdict> {
    verify_index_with(index_path, source_path, Coverage::All)
}

pub fn verify_index_with(
    index_path: impl AsRef<Path>,
    source_path: impl AsRef<Path>,
    coverage: Coverage,
) -> io::Result<Verdict> {
    let bytes = fs::read(index_path)?;
    let index = match SortedKeyIndex::from_bytes(bytes) {
        Ok(i) => i,
        Err(e @ (FormatError::BadMagic(_) | FormatError::UnsupportedVersion(_))) => {
            return Ok(Verdict::corrupt(None, e.to_string()))
        }
        Err(e) => return Ok(Verdict::corrupt(None, e.to_string())),
    };
    if let Some(i) = index.first_unsorted() {
        return Ok(Verdict::corrupt(Some(i + 1), "keys out of order"));
    }
    let source = File::open(source_path)?;
    let header = *index.header();
    for i in 0..index.len() {
        let e = index.entry(i);
        if e.offset + u64::from(e.stored_len) > header.source_len {
            return Ok(Verdict::corrupt(Some(i), "entry extends past end of source"));
        }
        if index.id(i).is_empty() {
            return Ok(Verdict::corrupt(Some(i), "empty key"));
        }
    }
    let digest = checksum::digest_reader(&mut &source)?;
    if digest.len != header.source_len || digest.checksum != header.source_checksum {
        return Ok(Verdict::StaleIndex);
    }

    let ordinals: Vec<usize> = match coverage {
        Coverage::All => (0..index.len()).collect(),
        Coverage::Sample(k) => {
            let mut rng = StreamRng::seeded(header.source_checksum);
            (0..k.min(index.len())).map(|_| rng.index(index.len())).collect()
        }
    };
    let mut buf = Vec::new();
    let mut text = Vec::new();
    for i in ordinals {
        let e = index.entry(i);
        buf.resize(e.stored_len as usize, 0);
        source.read_exact_at(&mut buf, e.offset)?;
        let problem = match header.kind {
            IndexKind::RawOffsets => check_line(&buf, index.id(i), e),
            IndexKind::Compressed => decompress_document(&buf, e.raw_len as usize, &mut text)
                .err()
                .map(|err| err.to_string())
                .or_else(|| std::str::from_utf8(&text).err().map(|_| "payload is not UTF-8".into())),
        };
        if let Some(detail) = problem {
            return Ok(Verdict::corrupt(Some(i), detail));
        }
    }
    Ok(Verdict::Ok)
}

fn check_line(line: &[u8], id: &[u8], e: IndexEntry) -> Option<String> {
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    if body.contains(&b'\n') {
        return Some("stored length spans more than one line".into());
    }
    match split_corpus_line(line, 0) {
        Err(err) => Some(format!("line does not parse: {err}")),
        Ok((line_id, _)) if line_id != id => Some(format!(
            "line id {:?} does not match key {:?}",
            String::from_utf8_lossy(line_id),
            String::from_utf8_lossy(id)
        )),
        Ok((_, text)) if text.len() != e.raw_len as usize => {
            Some(format!("text is {} bytes, entry says {}", text.len(), e.raw_len))
        }
        Ok(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::HEADER_LEN;

    const FIXTURE: &[u8] = b"d1\thello\nd2\tbig world\nd3\t!\n";

    fn fixture_dir() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.tsv");
        fs::write(&corpus, FIXTURE).unwrap();
        (dir, corpus)
    }

    #[test]
    fn offset_index_fixture_entries() {
        let (dir, corpus) = fixture_dir();
        let out = dir.path().join("corpus.dsix");
        let stats = build_offset_index(&corpus, &out).unwrap();
        assert_eq!(stats.entries, 3);
        assert_eq!(stats.index_bytes, (HEADER_LEN + 3 * (2 + 16)) as u64);
        let idx = SortedKeyIndex::from_bytes(fs::read(&out).unwrap()).unwrap();
        let got: Vec<(Vec<u8>, u64, u32, u32)> = (0..3)
            .map(|i| {
                let e = idx.entry(i);
                (idx.id(i).to_vec(), e.offset, e.stored_len, e.raw_len)
            })
            .collect();
        assert_eq!(
            got,
            [
                (b"d1".to_vec(), 0, 9, 5),
                (b"d2".to_vec(), 9, 13, 9),
                (b"d3".to_vec(), 22, 5, 1),
            ]
        );
        assert_eq!(idx.header().source_checksum, checksum::fnv1a64(FIXTURE));
        assert_eq!(idx.header().source_len, FIXTURE.len() as u64);
        assert_eq!(verify_index(&out, &corpus).unwrap(), Verdict::Ok);
    }

    #[test]
    fn empty_corpus_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.tsv");
        fs::write(&corpus, b"").unwrap();
        let out = dir.path().join("c.dsix");
        let stats = build_offset_index(&corpus, &out).unwrap();
        assert_eq!(stats, IndexStats { entries: 0, index_bytes: 36 });
        let data = dir.path().join("d.lz4");
        let cidx = dir.path().join("d.dsix");
        let b = build_compressed_store(&corpus, &data, &cidx).unwrap();
        assert_eq!((b.entries, b.data_bytes, b.ratio), (0, 0, 0.0));
        assert_eq!(verify_index(&cidx, &data).unwrap(), Verdict::Ok);
    }

    #[test]
    fn duplicate_ids_fail_the_build() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.tsv");
        fs::write(&corpus, b"d1\ta\nd2\tb\nd1\tc\n").unwrap();
        let err = build_offset_index(&corpus, dir.path().join("i")).unwrap_err();
        assert!(matches!(err, BuildError::DuplicateId(ref id) if id.as_bytes() == b"d1"));
        let err = build_compressed_store(&corpus, dir.path().join("d"), dir.path().join("x")).unwrap_err();
        assert!(matches!(err, BuildError::DuplicateId(_)));
        assert!(!dir.path().join("d").exists());
    }

    #[test]
    fn compressed_fixture_round_trips() {
        let (dir, corpus) = fixture_dir();
        let data = dir.path().join("docs.lz4");
        let index = dir.path().join("docs.dsix");
        let stats = build_compressed_store(&corpus, &data, &index).unwrap();
        assert_eq!(stats.entries, 3);
        assert_eq!(stats.text_bytes, 5 + 9 + 1);
        let idx = SortedKeyIndex::from_bytes(fs::read(&index).unwrap()).unwrap();
        let (_, e) = idx.lookup(b"d2").unwrap();
        let bytes = fs::read(&data).unwrap();
        let mut out = Vec::new();
        decompress_document(
            &bytes[e.offset as usize..][..e.stored_len as usize],
            e.raw_len as usize,
            &mut out,
        )
        .unwrap();
        assert_eq!(out, b"big world");
        assert_eq!(verify_index(&index, &data).unwrap(), Verdict::Ok);
    }

    #[test]
    fn empty_text_document_is_an_empty_frame() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.tsv");
        fs::write(&corpus, b"d1\t\n").unwrap();
        let (data, index) = (dir.path().join("d"), dir.path().join("i"));
        build_compressed_store(&corpus, &data, &index).unwrap();
        let idx = SortedKeyIndex::from_bytes(fs::read(&index).unwrap()).unwrap();
        let e = idx.entry(0);
        assert_eq!(e.raw_len, 0);
        assert!(e.stored_len > 0);
        let mut out = vec![1];
        decompress_document(&fs::read(&data).unwrap(), 0, &mut out).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn builds_are_byte_identical() {
        let (dir, corpus) = fixture_dir();
        let p = |n: &str| dir.path().join(n);
        build_compressed_store(&corpus, p("a.lz4"), p("a.dsix")).unwrap();
        build_compressed_store(&corpus, p("b.lz4"), p("b.dsix")).unwrap();
        build_offset_index(&corpus, p("a.idx")).unwrap();
        build_offset_index(&corpus, p("b.idx")).unwrap();
        for (a, b) in [("a.lz4", "b.lz4"), ("a.dsix", "b.dsix"), ("a.idx", "b.idx")] {
            assert_eq!(fs::read(p(a)).unwrap(), fs::read(p(b)).unwrap());
        }
    }

    #[test]
    fn appended_corpus_is_stale() {
        let (dir, corpus) = fixture_dir();
        let out = dir.path().join("i");
        build_offset_index(&corpus, &out).unwrap();
        let mut f = fs::OpenOptions::new().append(true).open(&corpus).unwrap();
        f.write_all(b"x").unwrap();
        assert_eq!(verify_index(&out, &corpus).unwrap(), Verdict::StaleIndex);
    }

    #[test]
    fn every_single_byte_flip_in_entries_is_caught() {
        // Mutation oracle: flipping any bit pattern in any entry byte must
        // yield Corrupt naming the entry that holds the byte, or the entry
        // whose order it broke.
        let (dir, corpus) = fixture_dir();
        let out = dir.path().join("i");
        build_offset_index(&corpus, &out).unwrap();
        let clean = fs::read(&out).unwrap();
        let entry_len = 2 + 16;
        for pos in HEADER_LEN..clean.len() {
            let mut bytes = clean.clone();
            bytes[pos] ^= 0x5a;
            fs::write(&out, &bytes).unwrap();
            let owner = ((pos - HEADER_LEN) / entry_len) as u64;
            match verify_index(&out, &corpus).unwrap() {
                Verdict::Corrupt { entry: Some(e), .. } => {
                    assert!(e == owner || e == owner + 1, "byte {pos}: reported {e}, owner {owner}")
                }
                other => panic!("byte {pos}: {other:?}"),
            }
        }
    }

    #[test]
    fn compressed_flip_is_caught() {
        let (dir, corpus) = fixture_dir();
        let (data, index) = (dir.path().join("d"), dir.path().join("i"));
        build_compressed_store(&corpus, &data, &index).unwrap();
        let mut bytes = fs::read(&index).unwrap();
        // raw_len of entry 1
        let pos = HEADER_LEN + 18 + 2 + 12;
        bytes[pos] ^= 0x01;
        fs::write(&index, &bytes).unwrap();
        assert!(matches!(
            verify_index(&index, &data).unwrap(),
            Verdict::Corrupt { entry: Some(1), .. }
        ));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let (dir, corpus) = fixture_dir();
        let out = dir.path().join("i");
        build_offset_index(&corpus, &out).unwrap();
        let mut bytes = fs::read(&out).unwrap();
        bytes[0] = b'X';
        fs::write(&out, &bytes).unwrap();
        assert!(matches!(
            verify_index(&out, &corpus).unwrap(),
            Verdict::Corrupt { entry: None, .. }
        ));
    }

    #[test]
    fn sampled_verification_passes_on_fresh_build() {
        let (dir, corpus) = fixture_dir();
        let out = dir.path().join("i");
        build_offset_index(&corpus, &out).unwrap();
        assert_eq!(verify_index_with(&out, &corpus, Coverage::Sample(2)).unwrap(), Verdict::Ok);
    }
}
