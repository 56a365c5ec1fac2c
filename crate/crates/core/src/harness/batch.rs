use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::sampling::{sample_triple, Workload};
use super::HarnessError;
use crate::checksum::Fnv1a64;
use crate::rng::StreamRng;
use crate::store::DocStore;

/// Whitespace tokens of one triple.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenizedTriple {
    pub query: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

/// A batch of tokenized triples. Buffers are reused when the batch is.
#[derive(Debug)]
pub struct Batch {
    pub step: usize,
    triples: Vec<TokenizedTriple>,
    len: usize,
    /// Digest of the (query id, positive id) pairs in order.
    pub pair_digest: u64,
}

impl Batch {
    pub fn with_capacity(batch_size: usize) -> Self {
        Self {
            step: 0,
            triples: Vec::with_capacity(batch_size),
            len: 0,
            pair_digest: 0,
        }
    }

    pub fn triples(&self) -> &[TokenizedTriple] {
        &self.triples[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn slot(&mut self) -> &mut TokenizedTriple {
        if self.len == self.triples.len() {
            self.triples.push(TokenizedTriple::default());
        }
        self.len += 1;
        &mut self.triples[self.len - 1]
    }
}

/// Splits `text` on whitespace into `dst`, keeping at most `max_tokens`.
/// Existing strings in `dst` are overwritten in place.
pub fn tokenize_into(dst: &mut Vec<String>, text: &str, max_tokens: usize) {
    let mut n = 0;
    for tok in text.split_whitespace().take(max_tokens) {
        match dst.get_mut(n) {
            Some(s) => {
                s.clear();
                s.push_str(tok);
            }
            None => dst.push(tok.to_owned()),
        }
        n += 1;
    }
    dst.truncate(n);
}

/// Fixed set of batch buffers recycled between producer and consumer.
pub struct BufferPool {
    free_tx: Sender<Batch>,
    free_rx: Receiver<Batch>,
    capacity: usize,
    batch_size: usize,
    created: AtomicU64,
}

impl BufferPool {
    pub fn new(capacity: usize, batch_size: usize) -> Self {
        let (free_tx, free_rx) = unbounded();
        Self {
            free_tx,
            free_rx,
            capacity: capacity.max(1),
            batch_size,
            created: AtomicU64::new(0),
        }
    }

    /// A free buffer, creating one while fewer than `capacity` exist and
    /// blocking otherwise.
    pub fn acquire(&self) -> Batch {
        if let Ok(b) = self.free_rx.try_recv() {
            return b;
        }
        let grabbed = self
            .created
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| {
                (c < self.capacity as u64).then_some(c + 1)
            })
            .is_ok();
        if grabbed {
            return Batch::with_capacity(self.batch_size);
        }
        self.free_rx.recv().expect("pool owns a sender")
    }

    pub fn release(&self, batch: Batch) {
        let _ = self.free_tx.send(batch);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Buffers allocated over the pool's lifetime.
    pub fn created(&self) -> u64 {
        self.created.load(Ordering::Acquire)
    }
}

/// Fills `batch` with `batch_size` freshly drawn triples for `step`.
pub fn assemble_batch(
    store: &impl DocStore,
    workload: &Workload,
    rng: &mut StreamRng,
    batch_size: usize,
    max_tokens: usize,
    scratch: &mut String,
    mut batch: Batch,
) -> Result<Batch, HarnessError> {
    batch.len = 0;
    let mut digest = Fnv1a64::new();
    for _ in 0..batch_size {
        let s = sample_triple(rng, workload.triples(), workload.doc_ids())?;
        digest.update(s.query_id);
        digest.update(b"\t");
        digest.update(s.positive_id);
        digest.update(b"\n");
        let query = workload.query_text(s.query_id).unwrap_or_default();
        let slot = batch.slot();
        tokenize_into(&mut slot.query, query, max_tokens);
        store.get_into(s.positive_id, scratch)?;
        tokenize_into(&mut slot.positive, scratch, max_tokens);
        store.get_into(s.negative_id, scratch)?;
        tokenize_into(&mut slot.negative, scratch, max_tokens);
    }
    batch.pair_digest = digest.digest();
    Ok(batch)
}
