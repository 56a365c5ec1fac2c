use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::store::BackendKind;

/// How consumers run in parallel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One thread per consumer, all sharing one store handle behind one lock
    /// held for the whole fetch-and-tokenize step.
    GlobalLockThreads,
    /// One thread per consumer, each with its own cloned handle.
    Threads,
    /// One process per consumer, each opening its own store.
    Processes,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::GlobalLockThreads, Regime::Threads, Regime::Processes];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::GlobalLockThreads => "global_lock_threads",
            Regime::Threads => "threads",
            Regime::Processes => "processes",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "global_lock_threads" => Ok(Regime::GlobalLockThreads),
            "threads" => Ok(Regime::Threads),
            "processes" => Ok(Regime::Processes),
            other => Err(format!(
                "unknown regime {other:?} (expected global_lock_threads, threads or processes)"
            )),
        }
    }
}

/// Everything needed to reproduce one benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Directory holding the dataset files (see `corpus::DataLayout`).
    pub data_dir: PathBuf,
    pub backend: BackendKind,
    pub regime: Regime,
    pub consumers: usize,
    pub batch_size: usize,
    /// Steps per consumer, warm-up included.
    pub steps: usize,
    /// Simulated accelerator time per step, slept outside any lock.
    pub compute_ms: f64,
    /// Prefetch threads per consumer; 0 fetches inline.
    pub workers: usize,
    /// Reuse batch buffers from a fixed pool.
    pub pinned: bool,
    /// Copy the dataset files here before opening them.
    pub stage_dir: Option<PathBuf>,
    pub seed: u64,
    /// Whitespace tokens kept per text.
    pub max_text_tokens: usize,
    /// Total resident-memory budget shared equally by consumer processes.
    #[serde(default)]
    pub memory_quota_bytes: Option<u64>,
}

pub const MAX_CONSUMERS: usize = 64;
pub const MAX_WORKERS: usize = 16;
/// Percentage of steps run before timing starts.
pub const WARMUP_PERCENT: usize = 5;

impl BenchConfig {
    pub fn new(data_dir: impl Into<PathBuf>, backend: BackendKind, regime: Regime) -> Self {
        Self {
            data_dir: data_dir.into(),
            backend,
            regime,
            consumers: 1,
            batch_size: 16,
            steps: 1000,
            compute_ms: 0.0,
            workers: 0,
            pinned: false,
            stage_dir: None,
            seed: 0,
            max_text_tokens: 512,
            memory_quota_bytes: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if !(1..=MAX_CONSUMERS).contains(&self.consumers) {
            return bad(format!("consumers must be in 1..={MAX_CONSUMERS}, got {}", self.consumers));
        }
        if self.workers > MAX_WORKERS {
            return bad(format!("workers must be in 0..={MAX_WORKERS}, got {}", self.workers));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.compute_ms >= 0.0 && self.compute_ms.is_finite()) {
            return bad(format!("compute_ms must be finite and >= 0, got {}", self.compute_ms));
        }
        if self.memory_quota_bytes.is_some() && self.regime != Regime::Processes {
            return bad("a memory quota needs the processes regime".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.steps * WARMUP_PERCENT / 100
    }

    pub fn timed_steps(&self) -> usize {
        self.steps - self.warmup_steps()
    }

    /// Bounded prefetch queue capacity: twice the workers, at least 2.
    pub fn queue_capacity(&self) -> usize {
        (2 * self.workers).max(2)
    }

    /// Batches that can be in the prefetch pipeline at once: a full queue
    /// plus one being filled by each worker.
    pub fn pipeline_capacity(&self) -> usize {
        if self.workers == 0 {
            0
        } else {
            self.queue_capacity() + self.workers
        }
    }

    /// Buffers in a pinned pool: the pipeline plus the one being consumed.
    pub fn pool_size(&self) -> usize {
        self.pipeline_capacity() + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> BenchConfig {
        BenchConfig::new("/tmp/x", BackendKind::Indexed, Regime::Threads)
    }

    #[test]
    fn defaults() {
        let c = config();
        assert_eq!((c.batch_size, c.steps, c.workers), (16, 1000, 0));
        assert_eq!(c.warmup_steps(), 50);
        assert_eq!(c.timed_steps(), 950);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn pipeline_sizes() {
        let mut c = config();
        assert_eq!((c.queue_capacity(), c.pool_size()), (2, 1));
        c.workers = 1;
        assert_eq!((c.queue_capacity(), c.pipeline_capacity(), c.pool_size()), (2, 3, 4));
        c.workers = 4;
        assert_eq!((c.queue_capacity(), c.pool_size()), (8, 13));
    }

    #[test]
    fn warmup_rounds_down() {
        let mut c = config();
        c.steps = 10;
        assert_eq!(c.warmup_steps(), 0);
        c.steps = 0;
        assert_eq!(c.timed_steps(), 0);
    }

    #[test]
    fn validation_bounds() {
        for f in [
            |c: &mut BenchConfig| c.consumers = 0,
            |c: &mut BenchConfig| c.consumers = 65,
            |c: &mut BenchConfig| c.workers = 17,
            |c: &mut BenchConfig| c.batch_size = 0,
            |c: &mut BenchConfig| c.compute_ms = -1.0,
            |c: &mut BenchConfig| c.memory_quota_bytes = Some(1),
        ] {
            let mut c = config();
            f(&mut c);
            assert!(matches!(c.validate(), Err(HarnessError::InvalidConfig(_))), "{c:?}");
        }
    }

    #[test]
    fn regime_names() {
        for r in Regime::ALL {
            assert_eq!(r.as_str().parse::<Regime>().unwrap(), r);
        }
        assert_eq!("global-lock-threads".parse::<Regime>().unwrap(), Regime::GlobalLockThreads);
    }

    #[test]
    fn json_shape() {
        let v = serde_json::to_value(config()).unwrap();
        assert_eq!(v["backend"], "indexed");
        assert_eq!(v["regime"], "threads");
    }
}
