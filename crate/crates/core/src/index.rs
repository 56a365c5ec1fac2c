//! The DSIX sorted-key index format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "DSIX"
//!      4     2  version (1)
//!      6     1  kind (0 = raw offsets into a corpus, 1 = compressed frames)
//!      7     1  padding
//!      8     2  key_width
//!     10     2  padding
//!     12     8  entry_count
//!     20     8  source_len
//!     28     8  source_checksum (FNV-1a 64 of the referenced file)
//!     36        entries[entry_count]
//! ```
//!
//! Each entry is `key[key_width] offset:u64 stored_len:u32 raw_len:u32`, keys
//! zero-padded on the right and strictly ascending by raw bytes. Fixed-width
//! entries allow binary search directly over a memory map.

use std::cmp::Ordering;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DSIX";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 36;
/// Per-entry bytes besides the key.
pub const ENTRY_FIXED_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown index kind {0}")]
    UnknownKind(u8),
    #[error("index is {actual} bytes, header implies {expected}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("index shorter than its {HEADER_LEN}-byte header")]
    TruncatedHeader,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum IndexKind {
    RawOffsets = 0,
    Compressed = 1,
}

impl TryFrom<u8> for IndexKind {
    type Error = FormatError;

    fn try_from(v: u8) -> Result<Self, FormatError> {
        match v {
            0 => Ok(Self::RawOffsets),
            1 => Ok(Self::Compressed),
            other => Err(FormatError::UnknownKind(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexHeader {
    pub kind: IndexKind,
    pub key_width: u16,
    pub entry_count: u64,
    pub source_len: u64,
    pub source_checksum: u64,
}

impl IndexHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&VERSION.to_le_bytes());
        b[6] = self.kind as u8;
        b[8..10].copy_from_slice(&self.key_width.to_le_bytes());
        b[12..20].copy_from_slice(&self.entry_count.to_le_bytes());
        b[20..28].copy_from_slice(&self.source_len.to_le_bytes());
        b[28..36].copy_from_slice(&self.source_checksum.to_le_bytes());
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let b = bytes.get(..HEADER_LEN).ok_or(FormatError::TruncatedHeader)?;
        let magic: [u8; 4] = b[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(Self {
            kind: IndexKind::try_from(b[6])?,
            key_width: u16::from_le_bytes([b[8], b[9]]),
            entry_count: u64::from_le_bytes(b[12..20].try_into().unwrap()),
            source_len: u64::from_le_bytes(b[20..28].try_into().unwrap()),
            source_checksum: u64::from_le_bytes(b[28..36].try_into().unwrap()),
        })
    }

    pub fn entry_len(&self) -> usize {
        usize::from(self.key_width) + ENTRY_FIXED_LEN
    }

    /// Exact file size implied by the header.
    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.entry_count * self.entry_len() as u64
    }
}

/// Where a document lives in the referenced file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub offset: u64,
    pub stored_len: u32,
    pub raw_len: u32,
}

/// Pads `id` with zeros to `width` and compares it with a stored key.
/// Ids longer than `width` never match; they sort after any key sharing
/// their first `width` bytes.
pub fn compare_key(key: &[u8], id: &[u8]) -> Ordering {
    let n = id.len().min(key.len());
    match key[..n].cmp(&id[..n]) {
        Ordering::Equal => {}
        other => return other,
    }
    if id.len() > key.len() {
        return Ordering::Less;
    }
    if key[n..].iter().all(|&b| b == 0) {
        Ordering::Equal
    } else {
        Ordering::Greater
    }
}

/// A DSIX index over any byte container: a `Vec<u8>` read into memory, or a
/// memory map.
pub struct SortedKeyIndex<B> {
    header: IndexHeader,
    bytes: B,
}

impl<B: AsRef<[u8]>> SortedKeyIndex<B> {
    /// Validates the header and that the size matches it exactly. Entry
    /// ordering is not checked here; see `indexer::verify_index`.
    pub fn from_bytes(bytes: B) -> Result<Self, FormatError> {
        let header = IndexHeader::decode(bytes.as_ref())?;
        let actual = bytes.as_ref().len() as u64;
        if actual != header.file_len() {
            return Err(FormatError::SizeMismatch {
                expected: header.file_len(),
                actual,
            });
        }
        Ok(Self { header, bytes })
    }

    pub fn header(&self) -> &IndexHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.entry_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.entry_count == 0
    }

    pub fn key_width(&self) -> usize {
        usize::from(self.header.key_width)
    }

    fn raw_entry(&self, i: usize) -> &[u8] {
        let len = self.header.entry_len();
        let start = HEADER_LEN + i * len;
        &self.bytes.as_ref()[start..start + len]
    }

    /// Zero-padded key of entry `i`.
    pub fn key(&self, i: usize) -> &[u8] {
        &self.raw_entry(i)[..self.key_width()]
    }

    /// Key of entry `i` with padding removed, i.e. the original id.
    pub fn id(&self, i: usize) -> &[u8] {
        let key = self.key(i);
        let end = key.iter().rposition(|&b| b != 0).map_or(0, |p| p + 1);
        &key[..end]
    }

    pub fn entry(&self, i: usize) -> IndexEntry {
        let e = &self.raw_entry(i)[self.key_width()..];
        IndexEntry {
            offset: u64::from_le_bytes(e[0..8].try_into().unwrap()),
            stored_len: u32::from_le_bytes(e[8..12].try_into().unwrap()),
            raw_len: u32::from_le_bytes(e[12..16].try_into().unwrap()),
        }
    }

    /// Binary search for `id`. Returns the entry ordinal and entry.
    pub fn lookup(&self, id: &[u8]) -> Option<(usize, IndexEntry)> {
        self.lookup_counted(id, &mut 0)
    }

    /// [`lookup`](Self::lookup) that adds the number of key comparisons made
    /// to `comparisons`. At most `floor(log2 n) + 1` for `n` entries.
    pub fn lookup_counted(&self, id: &[u8], comparisons: &mut u32) -> Option<(usize, IndexEntry)> {
        if id.len() > self.key_width() {
            return None;
        }
        let (mut lo, mut hi) = (0usize, self.len());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            *comparisons += 1;
            match compare_key(self.key(mid), id) {
                Ordering::Equal => return Some((mid, self.entry(mid))),
                Ordering::Less => lo = mid + 1,
                Ordering::Greater => hi = mid,
            }
        }
        None
    }

    /// First ordinal `i` with `key(i) >= key(i + 1)`, if ordering is broken.
    pub fn first_unsorted(&self) -> Option<usize> {
        (1..self.len()).find(|&i| self.key(i - 1) >= self.key(i)).map(|i| i - 1)
    }
}

/// Collects `(id, entry)` pairs and serializes them as a DSIX file.
#[derive(Default)]
pub struct IndexBuilder {
    entries: Vec<(Box<[u8]>, IndexEntry)>,
    key_width: usize,
}

/// Key fields are 16 bits wide; ids are capped at 1024 bytes anyway.
pub const MAX_KEY_WIDTH: usize = u16::MAX as usize;

impl IndexBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: &[u8], entry: IndexEntry) {
        debug_assert!(id.len() <= MAX_KEY_WIDTH);
        self.key_width = self.key_width.max(id.len());
        self.entries.push((id.into(), entry));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts by padded key. Padding with zeros preserves the plain byte order
    /// of ids that contain no NUL, so sorting the unpadded ids is equivalent.
    /// Returns the first duplicated id, if any.
    pub fn sort(&mut self) -> Result<(), Box<[u8]>> {
        self.entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        match self.entries.windows(2).find(|w| w[0].0 == w[1].0) {
            Some(w) => Err(w[0].0.clone()),
            None => Ok(()),
        }
    }

    /// Serializes the sorted entries. Call [`sort`](Self::sort) first.
    pub fn encode(&self, kind: IndexKind, source_len: u64, source_checksum: u64) -> Vec<u8> {
        let header = IndexHeader {
            kind,
            key_width: self.key_width as u16,
            entry_count: self.entries.len() as u64,
            source_len,
            source_checksum,
        };
        let mut out = Vec::with_capacity(header.file_len() as usize);
        out.extend_from_slice(&header.encode());
        for (id, e) in &self.entries {
            out.extend_from_slice(id);
            out.resize(out.len() + self.key_width - id.len(), 0);
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.stored_len.to_le_bytes());
            out.extend_from_slice(&e.raw_len.to_le_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn build(ids: &[&[u8]]) -> SortedKeyIndex<Vec<u8>> {
        let mut b = IndexBuilder::new();
        for (i, id) in ids.iter().enumerate() {
            b.push(
                id,
                IndexEntry {
                    offset: i as u64 * 100,
                    stored_len: i as u32,
                    raw_len: i as u32 + 1,
                },
            );
        }
        b.sort().unwrap();
        SortedKeyIndex::from_bytes(b.encode(IndexKind::RawOffsets, 0, 0)).unwrap()
    }

    fn linear_scan<B: AsRef<[u8]>>(idx: &SortedKeyIndex<B>, id: &[u8]) -> Option<usize> {
        (0..idx.len()).find(|&i| idx.id(i) == id)
    }

    #[test]
    fn header_round_trip_and_layout() {
        let h = IndexHeader {
            kind: IndexKind::Compressed,
            key_width: 9,
            entry_count: 3,
            source_len: 0x0102,
            source_checksum: 0xaabb,
        };
        let b = h.encode();
        assert_eq!(&b[0..4], b"DSIX");
        assert_eq!(b[4..6], [1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 0);
        assert_eq!(b[8..10], [9, 0]);
        assert_eq!(b[10..12], [0, 0]);
        assert_eq!(b[12], 3);
        assert_eq!(b[20..22], [0x02, 0x01]);
        assert_eq!(IndexHeader::decode(&b).unwrap(), h);
        assert_eq!(h.file_len(), 36 + 3 * 25);
    }

    #[test]
    fn header_rejects_garbage() {
        let mut b = IndexHeader {
            kind: IndexKind::RawOffsets,
            key_width: 1,
            entry_count: 0,
            source_len: 0,
            source_checksum: 0,
        }
        .encode();
        assert_eq!(IndexHeader::decode(&b[..10]), Err(FormatError::TruncatedHeader));
        b[6] = 9;
        assert_eq!(IndexHeader::decode(&b), Err(FormatError::UnknownKind(9)));
        b[4] = 2;
        assert_eq!(IndexHeader::decode(&b), Err(FormatError::UnsupportedVersion(2)));
        b[0] = b'X';
        assert!(matches!(IndexHeader::decode(&b), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn lookup_examples() {
        let idx = build(&[b"c3", b"a1", b"b2"]);
        assert_eq!(linear_scan(&idx, b"b2"), Some(1));
        assert_eq!(idx.lookup(b"b2").map(|(i, _)| i), Some(1));
        assert_eq!(idx.lookup(b"b2").unwrap().1.offset, 200);
        assert_eq!(idx.lookup(b"b3"), None);
        assert_eq!(idx.lookup(b"b2\x01"), None);
    }

    #[test]
    fn short_probe_matches_after_padding() {
        let idx = build(&[b"abc", b"d", b"ef"]);
        assert_eq!(idx.key_width(), 3);
        assert_eq!(idx.key(1), b"d\0\0");
        assert_eq!(idx.lookup(b"d").map(|(i, _)| i), linear_scan(&idx, b"d"));
        assert_eq!(idx.lookup(b"e"), None);
        assert_eq!(idx.lookup(b"abcd"), None);
    }

    #[test]
    fn empty_index() {
        let idx = build(&[]);
        assert!(idx.is_empty());
        assert_eq!(idx.lookup(b"x"), None);
        assert_eq!(idx.first_unsorted(), None);
        assert_eq!(idx.header().file_len(), 36);
    }

    #[test]
    fn duplicates_are_reported() {
        let mut b = IndexBuilder::new();
        let e = IndexEntry { offset: 0, stored_len: 0, raw_len: 0 };
        b.push(b"x", e);
        b.push(b"y", e);
        b.push(b"x", e);
        assert_eq!(b.sort().unwrap_err().as_ref(), b"x");
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let idx = build(&[b"a1"]);
        let mut bytes = idx.bytes.clone();
        bytes.push(0);
        assert!(matches!(
            SortedKeyIndex::from_bytes(bytes),
            Err(FormatError::SizeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn binary_search_agrees_with_scan_and_is_logarithmic(
            ids in proptest::collection::btree_set(proptest::collection::vec(1u8..=255, 1..6), 0..300),
            probes in proptest::collection::vec(proptest::collection::vec(1u8..=255, 1..7), 20),
        ) {
            let ids: Vec<Vec<u8>> = ids.into_iter().collect();
            let refs: Vec<&[u8]> = ids.iter().map(|v| v.as_slice()).collect();
            let idx = build(&refs);
            let n = idx.len();
            let bound = if n == 0 { 1 } else { (n as f64).log2().ceil() as u32 + 1 };
            for probe in ids.iter().chain(probes.iter()) {
                let mut cmp = 0;
                let got = idx.lookup_counted(probe, &mut cmp).map(|(i, _)| i);
                prop_assert_eq!(got, linear_scan(&idx, probe));
                prop_assert!(cmp <= bound, "{} comparisons for n={}", cmp, n);
            }
            prop_assert_eq!(idx.first_unsorted(), None);
        }
    }
}
