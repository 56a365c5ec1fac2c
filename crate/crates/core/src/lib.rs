//! Document-corpus storage with three interchangeable loading backends and a
//! training-loop benchmark harness for comparing them.
//!
//! The backends share one retrieval contract ([`store::DocStore`]):
//!
//! - [`store::InMemoryStore`] keeps every document resident in a hash map.
//! - [`store::IndexedStore`] keeps only a sorted table of line offsets and
//!   reads each document from the raw corpus file with a seek.
//! - [`store::CompressedStore`] memory-maps a sorted fixed-width key index and
//!   decompresses one LZ4 frame per document from a data file.
//!
//! The [`harness`] module drives parallel consumers over a store under three
//! parallelism regimes, [`metrics`] measures throughput and resident memory,
//! and [`report`] renders the comparison tables.

pub mod checksum;
pub mod cli;
pub mod corpus;
pub mod harness;
pub mod index;
pub mod indexer;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod store;
pub mod sweep;

pub use corpus::{DocId, DocRecord, QueryRecord, SynthSpec, TripleSpec};

pub use index::{IndexEntry, IndexHeader, IndexKind, SortedKeyIndex};

pub use store::{BackendKind, DocStore, DocStoreHandle};

pub use harness::{BenchConfig, Regime};

pub use metrics::{BenchResult, ConsumerResult};
