use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver};

use super::batch::{assemble_batch, Batch, BufferPool};
use super::config::BenchConfig;
use super::sampling::Workload;
use super::HarnessError;
use crate::checksum::{to_hex, Fnv1a64};
use crate::metrics::ConsumerResult;
use crate::rng::StreamRng;
use crate::store::{DocStore, DocStoreHandle};

/// A store shared by all consumers through one lock.
pub struct GlobalLock<T> {
    inner: Mutex<T>,
}

impl<T> GlobalLock<T> {
    pub fn new(value: T) -> Self {
        Self {
            inner: Mutex::new(value),
        }
    }

    /// Runs `f` under the lock; returns its result and how long the lock was
    /// held.
    pub fn with<R>(&self, f: impl FnOnce(&T) -> R) -> (R, Duration) {
        let guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let t = Instant::now();
        let r = f(&guard);
        let held = t.elapsed();
        drop(guard);
        (r, held)
    }

    pub fn into_inner(self) -> T {
        self.inner.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

/// How a consumer (or one of its workers) reaches the store.
pub enum StoreAccess<'a> {
    Owned(DocStoreHandle),
    Shared(&'a GlobalLock<DocStoreHandle>),
}

impl StoreAccess<'_> {
    fn fork(&self) -> Result<Self, HarnessError> {
        Ok(match self {
            StoreAccess::Owned(h) => StoreAccess::Owned(h.clone_handle()?),
            StoreAccess::Shared(l) => StoreAccess::Shared(l),
        })
    }
}

pub struct ConsumerCtx<'a> {
    pub consumer_id: usize,
    pub config: &'a BenchConfig,
    pub workload: &'a Workload,
}

struct Fetched {
    batch: Batch,
    fetch: Duration,
    held: Duration,
}

struct Fetcher<'a> {
    ctx: &'a ConsumerCtx<'a>,
    access: StoreAccess<'a>,
    scratch: String,
}

impl Fetcher<'_> {
    fn fetch(&mut self, step: usize, batch: Batch) -> Result<Fetched, HarnessError> {
        let config = self.ctx.config;
        let mut rng = StreamRng::for_step(config.seed, self.ctx.consumer_id as u64, step as u64);
        let workload = self.ctx.workload;
        let scratch = &mut self.scratch;
        let run = |store: &DocStoreHandle| {
            let t = Instant::now();
            let r = assemble_batch(
                store,
                workload,
                &mut rng,
                config.batch_size,
                config.max_text_tokens,
                scratch,
                batch,
            );
            (r, t.elapsed())
        };
        let (r, fetch, held) = match &self.access {
            StoreAccess::Owned(h) => {
                let (r, fetch) = run(h);
                (r, fetch, Duration::ZERO)
            }
            StoreAccess::Shared(lock) => {
                let ((r, fetch), held) = lock.with(run);
                (r, fetch, held)
            }
        };
        let mut batch = r?;
        batch.step = step;
        Ok(Fetched { batch, fetch, held })
    }
}

#[derive(Default)]
struct Tally {
    fetch: Duration,
    held: Duration,
    t0: Option<Instant>,
}

fn compute(config: &BenchConfig) {
    if config.compute_ms > 0.0 {
        thread::sleep(Duration::from_secs_f64(config.compute_ms / 1000.0));
    }
}

/// Runs one consumer for `config.steps` steps. `on_ready` is called once when
/// warm-up is over; timing starts when it returns.
pub fn run_consumer(
    ctx: ConsumerCtx<'_>,
    access: StoreAccess<'_>,
    on_ready: impl FnOnce(),
) -> Result<ConsumerResult, HarnessError> {
    let config = ctx.config;
    let warm = config.warmup_steps();
    let pool = config.pinned.then(|| BufferPool::new(config.pool_size(), config.batch_size));
    let mut digests = vec![0u64; config.steps];
    let mut ready = Some(on_ready);
    let mut tally = Tally::default();
    let mut start_timing = |tally: &mut Tally| {
        if let Some(f) = ready.take() {
            f();
        }
        *tally = Tally {
            t0: Some(Instant::now()),
            ..Tally::default()
        };
    };

    if config.workers == 0 {
        let mut fetcher = Fetcher {
            ctx: &ctx,
            access,
            scratch: String::new(),
        };
        for step in 0..config.steps {
            if step == warm {
                start_timing(&mut tally);
            }
            let batch = pool
                .as_ref()
                .map_or_else(|| Batch::with_capacity(config.batch_size), BufferPool::acquire);
            let f = fetcher.fetch(step, batch)?;
            tally.fetch += f.fetch;
            tally.held += f.held;
            compute(config);
            digests[step] = f.batch.pair_digest;
            if let Some(p) = &pool {
                p.release(f.batch);
            }
        }
    } else {
        let cancel = AtomicBool::new(false);
        let (tx, rx) = bounded::<Result<Fetched, HarnessError>>(config.queue_capacity());
        let mut accesses = Vec::with_capacity(config.workers);
        for _ in 1..config.workers {
            accesses.push(access.fork()?);
        }
        accesses.push(access);
        let outcome = thread::scope(|s| {
            for (w, access) in accesses.into_iter().enumerate() {
                let tx = tx.clone();
                let (ctx, pool, cancel) = (&ctx, pool.as_ref(), &cancel);
                s.spawn(move || {
                    let mut fetcher = Fetcher {
                        ctx,
                        access,
                        scratch: String::new(),
                    };
                    for step in (w..config.steps).step_by(config.workers) {
                        if cancel.load(Ordering::Relaxed) {
                            return;
                        }
                        let batch =
                            pool.map_or_else(|| Batch::with_capacity(config.batch_size), BufferPool::acquire);
                        let r = fetcher.fetch(step, batch);
                        let failed = r.is_err();
                        if tx.send(r).is_err() || failed {
                            return;
                        }
                    }
                });
            }
            drop(tx);
            let r = consume(config, &rx, pool.as_ref(), &mut digests, &mut tally, &mut start_timing);
            if r.is_err() {
                cancel.store(true, Ordering::Relaxed);
                for msg in rx.iter() {
                    if let (Ok(f), Some(p)) = (msg, &pool) {
                        p.release(f.batch);
                    }
                }
            }
            r
        });
        outcome?;
    }
    if config.steps == 0 {
        start_timing(&mut tally);
    }

    let elapsed = tally.t0.map_or(Duration::ZERO, |t| t.elapsed());
    let mut digest = Fnv1a64::new();
    for d in &digests {
        digest.update(&d.to_le_bytes());
    }
    Ok(ConsumerResult {
        consumer: ctx.consumer_id,
        samples: (config.timed_steps() * config.batch_size) as u64,
        elapsed_s: elapsed.as_secs_f64(),
        peak_rss_bytes: 0,
        fetch_s: tally.fetch.as_secs_f64(),
        lock_hold_s: tally.held.as_secs_f64(),
        stream_digest: to_hex(digest.digest()),
        buffers_created: pool.as_ref().map_or(0, BufferPool::created),
    })
}

fn consume(
    config: &BenchConfig,
    rx: &Receiver<Result<Fetched, HarnessError>>,
    pool: Option<&BufferPool>,
    digests: &mut [u64],
    tally: &mut Tally,
    start_timing: &mut impl FnMut(&mut Tally),
) -> Result<(), HarnessError> {
    let warm = config.warmup_steps();
    for i in 0..config.steps {
        if i == warm {
            start_timing(tally);
        }
        let f = rx
            .recv()
            .map_err(|_| HarnessError::InvalidConfig("prefetch workers stopped early".into()))??;
        if f.batch.step >= warm {
            tally.fetch += f.fetch;
            tally.held += f.held;
        }
        compute(config);
        digests[f.batch.step] = f.batch.pair_digest;
        if let Some(p) = pool {
            p.release(f.batch);
        }
    }
    Ok(())
}
