//! Training-loop emulation: parallel consumers sample triples, fetch documents
//! from a store, assemble batches and sleep through a simulated accelerator
//! step, under one of three parallelism regimes.

mod batch;
mod bench;
mod config;
mod consumer;
mod sampling;
mod stage;

use std::io;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::metrics::MetricsError;
use crate::store::StoreError;

pub use batch::{assemble_batch, tokenize_into, Batch, BufferPool, TokenizedTriple};
pub use bench::{child_main, run_bench, Launcher, CHILD_SUBCOMMAND};
pub use config::{BenchConfig, Regime};
pub use consumer::{run_consumer, ConsumerCtx, GlobalLock, StoreAccess};
pub use sampling::{sample_triple, SampledTriple, Workload};
pub use stage::{stage_files, StageError, StageReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot draw a negative: the corpus has a single document and it is the positive")]
    SingleDocCorpus,
    #[error("empty workload: {0}")]
    EmptyWorkload(String),
    #[error("triple {line}: {detail}")]
    UnresolvedTriple { line: usize, detail: String },
    #[error("consumer {consumer} failed: {detail}")]
    ChildFailed {
        consumer: usize,
        detail: String,
        out_of_memory: bool,
    },
    #[error("staging failed: {0}")]
    StagingFailed(#[from] StageError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HarnessError {
    /// True when the run died from memory exhaustion.
    pub fn is_out_of_memory(&self) -> bool {
        matches!(
            self,
            HarnessError::ChildFailed {
                out_of_memory: true,
                ..
            } | HarnessError::Store(StoreError::OutOfMemory { .. })
        )
    }
}
