//! The three document-loading backends behind one retrieval contract.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use memmap2::Mmap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum;
use crate::corpus::{split_corpus_line, CorpusError, DataLayout, DocId};
use crate::index::{FormatError, IndexKind, SortedKeyIndex};
use crate::indexer::decompress_document;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    InMemory,
    Indexed,
    Compressed,
}

impl BackendKind {
    pub const ALL: [BackendKind; 3] = [BackendKind::InMemory, BackendKind::Indexed, BackendKind::Compressed];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::InMemory => "in_memory",
            BackendKind::Indexed => "indexed",
            BackendKind::Compressed => "compressed",
        }
    }

    /// Files a store of this kind reads, in `layout`.
    pub fn files(self, layout: &DataLayout) -> Vec<PathBuf> {
        match self {
            BackendKind::InMemory => vec![layout.corpus()],
            BackendKind::Indexed => vec![layout.corpus(), layout.offset_index()],
            BackendKind::Compressed => vec![layout.compressed_data(), layout.compressed_index()],
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in_memory" | "in-memory" => Ok(BackendKind::InMemory),
            "indexed" => Ok(BackendKind::Indexed),
            "compressed" => Ok(BackendKind::Compressed),
            other => Err(format!("unknown backend {other:?} (expected in_memory, indexed or compressed)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("duplicate id {0}")]
    DuplicateId(DocId),
    #[error("stale index {}: source file changed since build", .0.display())]
    StaleIndex(PathBuf),
    #[error("bad index {}: {source}", .path.display())]
    BadIndex { path: PathBuf, source: FormatError },
    #[error("index {} is not a {expected:?} index", .path.display())]
    WrongIndexKind { path: PathBuf, expected: IndexKind },
    #[error("cannot decode document {id} at offset {offset}: {detail}")]
    Decode { id: String, offset: u64, detail: String },
    #[error("out of memory allocating {bytes} bytes")]
    OutOfMemory { bytes: usize },
    #[error("store is closed")]
    Closed,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl StoreError {
    fn io(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
        move |source| StoreError::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// True for errors caused by the index or data files rather than the
    /// request.
    pub fn is_index_problem(&self) -> bool {
        matches!(
            self,
            StoreError::StaleIndex(_)
                | StoreError::BadIndex { .. }
                | StoreError::WrongIndexKind { .. }
                | StoreError::Decode { .. }
        )
    }
}

fn not_found(id: &[u8]) -> StoreError {
    StoreError::NotFound(String::from_utf8_lossy(id).into_owned())
}

/// Sorted document ids packed into one buffer.
#[derive(Clone, Debug, Default)]
pub struct IdTable {
    bytes: Vec<u8>,
    ends: Vec<usize>,
}

impl IdTable {
    pub fn from_sorted<'a>(ids: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut t = IdTable::default();
        for id in ids {
            t.bytes.extend_from_slice(id);
            t.ends.push(t.bytes.len());
        }
        debug_assert!((1..t.len()).all(|i| t.get(i - 1) < t.get(i)));
        t
    }

    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    pub fn get(&self, i: usize) -> &[u8] {
        let start = if i == 0 { 0 } else { self.ends[i - 1] };
        &self.bytes[start..self.ends[i]]
    }

    pub fn contains(&self, id: &[u8]) -> bool {
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            match self.get(mid).cmp(id) {
                std::cmp::Ordering::Equal => return true,
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
            }
        }
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn heap_bytes(&self) -> usize {
        self.bytes.capacity() + self.ends.capacity() * std::mem::size_of::<usize>()
    }
}

/// The retrieval contract shared by all backends.
///
/// `get_into` is logically read-only: an [`IndexedStore`] moves its file
/// cursor, but the observable state of the store never changes.
pub trait DocStore: Send {
    fn kind(&self) -> BackendKind;

    fn doc_count(&self) -> usize;

    /// Replaces the contents of `buf` with the text of `id`.
    fn get_into(&self, id: &[u8], buf: &mut String) -> Result<(), StoreError>;

    fn get(&self, id: &[u8]) -> Result<String, StoreError> {
        let mut s = String::new();
        self.get_into(id, &mut s)?;
        Ok(s)
    }

    /// A new handle sharing immutable structures but owning its own cursor.
    fn clone_handle(&self) -> Result<Self, StoreError>
    where
        Self: Sized;

    fn close(&mut self);

    /// All ids in ascending byte order.
    fn doc_ids(&self) -> Result<IdTable, StoreError>;

    /// Approximate heap bytes held by this store's shared structures.
    fn resident_bytes(&self) -> usize;
}

/// Fixed per-entry allowance for hash map slots and allocator headers in the
/// in-memory resident estimate.
pub const IN_MEMORY_ENTRY_OVERHEAD: usize = 64;

struct InMemoryData {
    map: HashMap<Box<[u8]>, Box<str>>,
    resident_bytes: usize,
}

/// Every document resident in a hash map; gets never touch the file system.
#[derive(Clone)]
pub struct InMemoryStore {
    data: Option<Arc<InMemoryData>>,
}

fn try_boxed<T: Copy>(src: &[T]) -> Result<Box<[T]>, StoreError> {
    let mut v = Vec::new();
    v.try_reserve_exact(src.len()).map_err(|_| StoreError::OutOfMemory {
        bytes: std::mem::size_of_val(src),
    })?;
    v.extend_from_slice(src);
    Ok(v.into_boxed_slice())
}

impl InMemoryStore {
    /// Loads the whole corpus. Allocation failures surface as
    /// [`StoreError::OutOfMemory`] instead of aborting.
    pub fn open(corpus_path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = corpus_path.as_ref();
        let mut reader = BufReader::with_capacity(1 << 16, File::open(path).map_err(StoreError::io(path))?);
        let mut map: HashMap<Box<[u8]>, Box<str>> = HashMap::new();
        let mut resident = 0usize;
        let mut line = Vec::new();
        let mut number = 0u64;
        loop {
            line.clear();
            if reader.read_until(b'\n', &mut line).map_err(StoreError::io(path))? == 0 {
                break;
            }
            number += 1;
            let (id, text) = split_corpus_line(&line, number)?;
            if map.contains_key(id) {
                return Err(StoreError::DuplicateId(DocId::new(id).expect("validated")));
            }
            let key = try_boxed(id)?;
            let value: Box<[u8]> = try_boxed(text.as_bytes())?;
            // Valid UTF-8 was checked by the split above.
            let value = String::from_utf8(value.into_vec()).expect("validated UTF-8").into_boxed_str();
            map.try_reserve(1).map_err(|_| StoreError::OutOfMemory {
                bytes: (map.len() + 1) * std::mem::size_of::<(Box<[u8]>, Box<str>)>(),
            })?;
            resident += key.len() + value.len() + IN_MEMORY_ENTRY_OVERHEAD;
            map.insert(key, value);
        }
        map.shrink_to_fit();
        Ok(Self {
            data: Some(Arc::new(InMemoryData {
                map,
                resident_bytes: resident,
            })),
        })
    }

    fn data(&self) -> Result<&InMemoryData, StoreError> {
        self.data.as_deref().ok_or(StoreError::Closed)
    }
}

impl DocStore for InMemoryStore {
    fn kind(&self) -> BackendKind {
        BackendKind::InMemory
    }

    fn doc_count(&self) -> usize {
        self.data.as_ref().map_or(0, |d| d.map.len())
    }

    fn get_into(&self, id: &[u8], buf: &mut String) -> Result<(), StoreError> {
        let text = self.data()?.map.get(id).ok_or_else(|| not_found(id))?;
        buf.clear();
        buf.push_str(text);
        Ok(())
    }

    fn clone_handle(&self) -> Result<Self, StoreError> {
        self.data()?;
        Ok(self.clone())
    }

    fn close(&mut self) {
        self.data = None;
    }

    fn doc_ids(&self) -> Result<IdTable, StoreError> {
        let mut ids: Vec<&[u8]> = self.data()?.map.keys().map(|k| &k[..]).collect();
        ids.sort_unstable();
        Ok(IdTable::from_sorted(ids))
    }

    fn resident_bytes(&self) -> usize {
        self.data.as_ref().map_or(0, |d| d.resident_bytes)
    }
}

fn load_index<B: AsRef<[u8]>>(
    path: &Path,
    bytes: B,
    expected: IndexKind,
) -> Result<SortedKeyIndex<B>, StoreError> {
    let index = SortedKeyIndex::from_bytes(bytes).map_err(|source| StoreError::BadIndex {
        path: path.to_owned(),
        source,
    })?;
    if index.header().kind != expected {
        return Err(StoreError::WrongIndexKind {
            path: path.to_owned(),
            expected,
        });
    }
    Ok(index)
}

fn check_source(index_header: &crate::index::IndexHeader, source: &mut File, index_path: &Path, source_path: &Path) -> Result<(), StoreError> {
    let len = source.metadata().map_err(StoreError::io(source_path))?.len();
    if len != index_header.source_len {
        return Err(StoreError::StaleIndex(index_path.to_owned()));
    }
    let digest = checksum::digest_reader(source).map_err(StoreError::io(source_path))?;
    if digest.checksum != index_header.source_checksum {
        return Err(StoreError::StaleIndex(index_path.to_owned()));
    }
    Ok(())
}

/// Offset table in memory, documents read from the raw corpus with a seek.
///
/// One handle owns one file cursor and is not `Sync`; use
/// [`clone_handle`](DocStore::clone_handle) per thread or serialize access.
pub struct IndexedStore {
    index: Option<Arc<SortedKeyIndex<Vec<u8>>>>,
    corpus_path: PathBuf,
    file: RefCell<File>,
    line: RefCell<Vec<u8>>,
}

impl IndexedStore {
    pub fn open(corpus_path: impl AsRef<Path>, index_path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let (corpus_path, index_path) = (corpus_path.as_ref(), index_path.as_ref());
        let bytes = fs::read(index_path).map_err(StoreError::io(index_path))?;
        let index = load_index(index_path, bytes, IndexKind::RawOffsets)?;
        let mut file = File::open(corpus_path).map_err(StoreError::io(corpus_path))?;
        check_source(index.header(), &mut file, index_path, corpus_path)?;
        Ok(Self {
            index: Some(Arc::new(index)),
            corpus_path: corpus_path.to_owned(),
            file: RefCell::new(file),
            line: RefCell::new(Vec::new()),
        })
    }

    fn index(&self) -> Result<&SortedKeyIndex<Vec<u8>>, StoreError> {
        self.index.as_deref().ok_or(StoreError::Closed)
    }
}

impl DocStore for IndexedStore {
    fn kind(&self) -> BackendKind {
        BackendKind::Indexed
    }

    fn doc_count(&self) -> usize {
        self.index.as_ref().map_or(0, |i| i.len())
    }

    fn get_into(&self, id: &[u8], buf: &mut String) -> Result<(), StoreError> {
        let (_, e) = self.index()?.lookup(id).ok_or_else(|| not_found(id))?;
        let mut file = self.file.borrow_mut();
        let mut line = self.line.borrow_mut();
        line.resize(e.stored_len as usize, 0);
        let decode = |detail: String| StoreError::Decode {
            id: String::from_utf8_lossy(id).into_owned(),
            offset: e.offset,
            detail,
        };
        file.seek(SeekFrom::Start(e.offset)).map_err(StoreError::io(&self.corpus_path))?;
        file.read_exact(&mut line).map_err(|err| decode(err.to_string()))?;
        let text_start = id.len() + 1;
        let text = line
            .get(text_start..text_start + e.raw_len as usize)
            .filter(|_| line.starts_with(id) && line.get(id.len()) == Some(&b'\t'))
            .ok_or_else(|| decode("line does not match index entry".into()))?;
        let text = std::str::from_utf8(text).map_err(|_| decode("text is not UTF-8".into()))?;
        buf.clear();
        buf.push_str(text);
        Ok(())
    }

    fn clone_handle(&self) -> Result<Self, StoreError> {
        let index = Arc::clone(self.index.as_ref().ok_or(StoreError::Closed)?);
        let file = File::open(&self.corpus_path).map_err(StoreError::io(&self.corpus_path))?;
        Ok(Self {
            index: Some(index),
            corpus_path: self.corpus_path.clone(),
            file: RefCell::new(file),
            line: RefCell::new(Vec::new()),
        })
    }

    fn close(&mut self) {
        self.index = None;
    }

    fn doc_ids(&self) -> Result<IdTable, StoreError> {
        let index = self.index()?;
        Ok(IdTable::from_sorted((0..index.len()).map(|i| index.id(i))))
    }

    fn resident_bytes(&self) -> usize {
        self.index.as_ref().map_or(0, |i| i.header().file_len() as usize)
    }
}

struct CompressedShared {
    index: SortedKeyIndex<Mmap>,
    data: File,
}

/// Memory-mapped sorted index over a file of per-document LZ4 frames.
/// Reads are positional, so one handle is safe to share between threads.
pub struct CompressedStore {
    shared: Option<Arc<CompressedShared>>,
}

impl CompressedStore {
    pub fn open(data_path: impl AsRef<Path>, index_path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let (data_path, index_path) = (data_path.as_ref(), index_path.as_ref());
        let index_file = File::open(index_path).map_err(StoreError::io(index_path))?;
        // SAFETY: index files are immutable once built; the map is read-only.
        let map = unsafe { Mmap::map(&index_file) }.map_err(StoreError::io(index_path))?;
        let index = load_index(index_path, map, IndexKind::Compressed)?;
        let mut data = File::open(data_path).map_err(StoreError::io(data_path))?;
        check_source(index.header(), &mut data, index_path, data_path)?;
        Ok(Self {
            shared: Some(Arc::new(CompressedShared { index, data })),
        })
    }

    fn shared(&self) -> Result<&CompressedShared, StoreError> {
        self.shared.as_deref().ok_or(StoreError::Closed)
    }
}

thread_local! {
    static FRAME_SCRATCH: RefCell<(Vec<u8>, Vec<u8>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

impl DocStore for CompressedStore {
    fn kind(&self) -> BackendKind {
        BackendKind::Compressed
    }

    fn doc_count(&self) -> usize {
        self.shared.as_ref().map_or(0, |s| s.index.len())
    }

    fn get_into(&self, id: &[u8], buf: &mut String) -> Result<(), StoreError> {
        let shared = self.shared()?;
        let (_, e) = shared.index.lookup(id).ok_or_else(|| not_found(id))?;
        let decode = |detail: String| StoreError::Decode {
            id: String::from_utf8_lossy(id).into_owned(),
            offset: e.offset,
            detail,
        };
        FRAME_SCRATCH.with_borrow_mut(|(frame, text)| {
            frame.resize(e.stored_len as usize, 0);
            shared
                .data
                .read_exact_at(frame, e.offset)
                .map_err(|err| decode(err.to_string()))?;
            decompress_document(frame, e.raw_len as usize, text).map_err(|err| decode(err.to_string()))?;
            let s = std::str::from_utf8(text).map_err(|_| decode("text is not UTF-8".into()))?;
            buf.clear();
            buf.push_str(s);
            Ok(())
        })
    }

    fn clone_handle(&self) -> Result<Self, StoreError> {
        Ok(Self {
            shared: Some(Arc::clone(self.shared.as_ref().ok_or(StoreError::Closed)?)),
        })
    }

    fn close(&mut self) {
        self.shared = None;
    }

    fn doc_ids(&self) -> Result<IdTable, StoreError> {
        let index = &self.shared()?.index;
        Ok(IdTable::from_sorted((0..index.len()).map(|i| index.id(i))))
    }

    /// The index is mapped, not read; only touched pages become resident.
    fn resident_bytes(&self) -> usize {
        0
    }
}

/// Any backend behind one concrete type.
pub enum DocStoreHandle {
    InMemory(InMemoryStore),
    Indexed(IndexedStore),
    Compressed(CompressedStore),
}

macro_rules! dispatch {
    ($self:expr, $s:ident => $e:expr) => {
        match $self {
            DocStoreHandle::InMemory($s) => $e,
            DocStoreHandle::Indexed($s) => $e,
            DocStoreHandle::Compressed($s) => $e,
        }
    };
}

impl DocStoreHandle {
    /// Opens the `kind` backend from the files in `layout`.
    pub fn open(kind: BackendKind, layout: &DataLayout) -> Result<Self, StoreError> {
        Ok(match kind {
            BackendKind::InMemory => DocStoreHandle::InMemory(InMemoryStore::open(layout.corpus())?),
            BackendKind::Indexed => {
                DocStoreHandle::Indexed(IndexedStore::open(layout.corpus(), layout.offset_index())?)
            }
            BackendKind::Compressed => DocStoreHandle::Compressed(CompressedStore::open(
                layout.compressed_data(),
                layout.compressed_index(),
            )?),
        })
    }
}

impl DocStore for DocStoreHandle {
    fn kind(&self) -> BackendKind {
        dispatch!(self, s => s.kind())
    }

    fn doc_count(&self) -> usize {
        dispatch!(self, s => s.doc_count())
    }

    fn get_into(&self, id: &[u8], buf: &mut String) -> Result<(), StoreError> {
        dispatch!(self, s => s.get_into(id, buf))
    }

    fn clone_handle(&self) -> Result<Self, StoreError> {
        Ok(match self {
            DocStoreHandle::InMemory(s) => DocStoreHandle::InMemory(s.clone_handle()?),
            DocStoreHandle::Indexed(s) => DocStoreHandle::Indexed(s.clone_handle()?),
            DocStoreHandle::Compressed(s) => DocStoreHandle::Compressed(s.clone_handle()?),
        })
    }

    fn close(&mut self) {
        dispatch!(self, s => s.close())
    }

    fn doc_ids(&self) -> Result<IdTable, StoreError> {
        dispatch!(self, s => s.doc_ids())
    }

    fn resident_bytes(&self) -> usize {
        dispatch!(self, s => s.resident_bytes())
    }
}
