use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, ExitStatus, Stdio};
use std::sync::Barrier;
use std::thread::{self, JoinHandle};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{BenchConfig, Regime};
use super::consumer::{run_consumer, ConsumerCtx, GlobalLock, StoreAccess};
use super::sampling::Workload;
use super::stage::stage_files;
use super::HarnessError;
use crate::corpus::DataLayout;
use crate::metrics::{
    paper_style_memory, read_peak_rss, throughput, timestamp_now, BenchResult, ConsumerResult, HostInfo,
    MemorySampler, SampleTarget,
};
use crate::store::{DocStore, DocStoreHandle};

/// Hidden subcommand that turns the binary into one consumer process.
pub const CHILD_SUBCOMMAND: &str = "__consumer";

/// Exit status of a consumer process that ran out of memory.
const EXIT_OUT_OF_MEMORY: i32 = 71;
const EXIT_FAILURE: i32 = 70;

/// Where to find the executable that serves [`CHILD_SUBCOMMAND`].
#[derive(Clone, Debug)]
pub struct Launcher {
    exe: PathBuf,
}

impl Launcher {
    pub fn new(exe: impl Into<PathBuf>) -> Self {
        Self { exe: exe.into() }
    }

    pub fn current_exe() -> io::Result<Self> {
        std::env::current_exe().map(Self::new)
    }

    pub fn exe(&self) -> &Path {
        &self.exe
    }
}

#[derive(Serialize, Deserialize)]
struct ChildRequest {
    consumer: usize,
    config: BenchConfig,
}

/// Runs one benchmark. Consumer processes are started through `launcher`;
/// the thread regimes never use it.
pub fn run_bench(config: &BenchConfig, launcher: &Launcher, repetition: u32) -> Result<BenchResult, HarnessError> {
    config.validate()?;
    let mut effective = config.clone();
    if let Some(stage_dir) = &config.stage_dir {
        let source = DataLayout::new(&config.data_dir);
        let mut files = config.backend.files(&source);
        files.push(source.queries());
        files.push(source.triples());
        stage_files(&files, stage_dir)?;
        effective.data_dir = stage_dir.clone();
        effective.stage_dir = None;
    }
    let run = match config.regime {
        Regime::GlobalLockThreads | Regime::Threads => run_threads(&effective)?,
        Regime::Processes => run_processes(&effective, launcher)?,
    };
    let total: u64 = run.per_consumer.iter().map(|c| c.samples).sum();
    Ok(BenchResult {
        config: config.clone(),
        samples_per_s: throughput(total, run.wall_s)?,
        wall_s: run.wall_s,
        per_consumer: run.per_consumer,
        peak_rss_sum_bytes: run.peak_sum,
        peak_rss_paper_bytes: run.peak_paper,
        host_info: HostInfo::detect(),
        repetition,
        failure: None,
        timestamp: timestamp_now(),
    })
}

struct RunOutcome {
    wall_s: f64,
    per_consumer: Vec<ConsumerResult>,
    peak_sum: u64,
    peak_paper: u64,
}

/// Releases the start barrier exactly once, even if the consumer fails
/// before warm-up ends.
struct ReadyGuard<'a> {
    barrier: &'a Barrier,
    waited: bool,
}

impl ReadyGuard<'_> {
    fn wait(&mut self) {
        if !self.waited {
            self.waited = true;
            self.barrier.wait();
        }
    }
}

impl Drop for ReadyGuard<'_> {
    fn drop(&mut self) {
        self.wait();
    }
}

fn run_threads(config: &BenchConfig) -> Result<RunOutcome, HarnessError> {
    let sampler = MemorySampler::start(SampleTarget::Current);
    let layout = DataLayout::new(&config.data_dir);
    let store = DocStoreHandle::open(config.backend, &layout)?;
    let workload = Workload::load(&layout, &store)?;
    let lock;
    let accesses: Vec<StoreAccess<'_>> = if config.regime == Regime::GlobalLockThreads {
        lock = GlobalLock::new(store);
        (0..config.consumers).map(|_| StoreAccess::Shared(&lock)).collect()
    } else {
        let mut v = Vec::with_capacity(config.consumers);
        for _ in 1..config.consumers {
            v.push(StoreAccess::Owned(store.clone_handle()?));
        }
        v.push(StoreAccess::Owned(store));
        v
    };
    let barrier = Barrier::new(config.consumers + 1);
    let (results, wall) = thread::scope(|s| {
        let handles: Vec<_> = accesses
            .into_iter()
            .enumerate()
            .map(|(i, access)| {
                let (barrier, workload) = (&barrier, &workload);
                s.spawn(move || {
                    let mut guard = ReadyGuard { barrier, waited: false };
                    let ctx = ConsumerCtx {
                        consumer_id: i,
                        config,
                        workload,
                    };
                    run_consumer(ctx, access, || guard.wait())
                })
            })
            .collect();
        barrier.wait();
        let t0 = Instant::now();
        let results: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("consumer thread panicked"))
            .collect();
        (results, t0.elapsed())
    });
    let per_consumer = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let sampled = sampler.stop();
    let peak = sampled.peak_bytes.max(crate::metrics::read_rss(SampleTarget::Current).unwrap_or(0));
    Ok(RunOutcome {
        wall_s: wall.as_secs_f64(),
        per_consumer,
        peak_sum: peak,
        peak_paper: peak,
    })
}

struct ConsumerProcess {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
    stderr: Option<JoinHandle<String>>,
    sampler: Option<MemorySampler>,
}

impl ConsumerProcess {
    fn spawn(launcher: &Launcher, request: &ChildRequest) -> Result<Self, HarnessError> {
        let mut child = Command::new(launcher.exe())
            .arg(CHILD_SUBCOMMAND)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let sampler = MemorySampler::start(SampleTarget::Pid(child.id()));
        let mut stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut stderr = child.stderr.take().expect("piped stderr");
        let stderr = thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let line = serde_json::to_string(request).map_err(io::Error::other)?;
        // A child that dies at once closes its stdin; that is reported when
        // its first line is missing.
        let _ = writeln!(stdin, "{line}").and_then(|_| stdin.flush());
        Ok(Self {
            child,
            stdin: Some(stdin),
            stdout,
            stderr: Some(stderr),
            sampler: Some(sampler),
        })
    }

    fn read_line(&mut self) -> Option<String> {
        let mut line = String::new();
        match self.stdout.read_line(&mut line) {
            Ok(n) if n > 0 => Some(line.trim_end().to_owned()),
            _ => None,
        }
    }

    fn go(&mut self) -> bool {
        match self.stdin.as_mut() {
            Some(s) => writeln!(s, "go").and_then(|_| s.flush()).is_ok(),
            None => false,
        }
    }

    /// Waits for exit and returns the status, the captured stderr and the
    /// sampled peak.
    fn finish(&mut self) -> (Option<ExitStatus>, String, u64) {
        self.stdin = None;
        let status = self.child.wait().ok();
        let stderr = self.stderr.take().map(|h| h.join().unwrap_or_default()).unwrap_or_default();
        let peak = self.sampler.take().map_or(0, |s| s.stop().peak_bytes);
        (status, stderr, peak)
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
    }
}

fn child_failure(consumer: usize, what: &str, status: Option<ExitStatus>, stderr: &str) -> HarnessError {
    use std::os::unix::process::ExitStatusExt;
    let out_of_memory = status.is_some_and(|s| {
        s.code() == Some(EXIT_OUT_OF_MEMORY) || s.signal() == Some(libc::SIGKILL)
    }) || stderr.contains("memory allocation of");
    let status = status.map_or_else(|| "unknown status".to_owned(), |s| s.to_string());
    let stderr = stderr.trim();
    HarnessError::ChildFailed {
        consumer,
        detail: if stderr.is_empty() {
            format!("{what} ({status})")
        } else {
            format!("{what} ({status}): {stderr}")
        },
        out_of_memory,
    }
}

fn run_processes(config: &BenchConfig, launcher: &Launcher) -> Result<RunOutcome, HarnessError> {
    let parent = MemorySampler::start(SampleTarget::Current);
    let mut procs = Vec::with_capacity(config.consumers);
    for consumer in 0..config.consumers {
        let request = ChildRequest {
            consumer,
            config: config.clone(),
        };
        match ConsumerProcess::spawn(launcher, &request) {
            Ok(p) => procs.push(p),
            Err(e) => {
                abort_all(&mut procs);
                return Err(e);
            }
        }
    }
    let fail = |procs: &mut Vec<ConsumerProcess>, i: usize, what: &str| {
        abort_all_except(procs, i);
        let (status, stderr, _) = procs[i].finish();
        abort_all(procs);
        child_failure(i, what, status, &stderr)
    };

    for i in 0..procs.len() {
        if procs[i].read_line().as_deref() != Some("ready") {
            return Err(fail(&mut procs, i, "exited before becoming ready"));
        }
    }
    let t0 = Instant::now();
    for i in 0..procs.len() {
        if !procs[i].go() {
            return Err(fail(&mut procs, i, "could not be started"));
        }
    }
    let mut per_consumer = Vec::with_capacity(procs.len());
    for i in 0..procs.len() {
        let parsed = procs[i]
            .read_line()
            .and_then(|l| serde_json::from_str::<ConsumerResult>(&l).ok());
        match parsed {
            Some(r) => per_consumer.push(r),
            None => return Err(fail(&mut procs, i, "exited without a result")),
        }
    }
    let wall = t0.elapsed();

    let mut peaks = Vec::with_capacity(procs.len());
    for (i, p) in procs.iter_mut().enumerate() {
        let (status, stderr, sampled) = p.finish();
        if !status.is_some_and(|s| s.success()) {
            abort_all(&mut procs);
            return Err(child_failure(i, "exited with an error", status, &stderr));
        }
        let peak = sampled.max(per_consumer[i].peak_rss_bytes);
        per_consumer[i].peak_rss_bytes = peak;
        peaks.push(peak);
    }
    let parent_peak = parent.stop().peak_bytes;
    Ok(RunOutcome {
        wall_s: wall.as_secs_f64(),
        peak_sum: peaks.iter().sum::<u64>() + parent_peak,
        peak_paper: paper_style_memory(peaks[0], config.consumers as u32),
        per_consumer,
    })
}

fn abort_all_except(procs: &mut [ConsumerProcess], keep: usize) {
    for (i, p) in procs.iter_mut().enumerate() {
        if i != keep {
            p.kill();
        }
    }
}

fn abort_all(procs: &mut [ConsumerProcess]) {
    for p in procs.iter_mut() {
        p.kill();
        p.finish();
    }
}

fn limit_data_segment(bytes: u64) -> io::Result<()> {
    let lim = libc::rlimit {
        rlim_cur: bytes as libc::rlim_t,
        rlim_max: bytes as libc::rlim_t,
    };
    // SAFETY: `lim` is a valid rlimit for the duration of the call.
    if unsafe { libc::setrlimit(libc::RLIMIT_DATA, &lim) } != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Body of a consumer process: reads its request from `input`, reports
/// `ready` after warm-up, waits for `go`, then prints its result as one JSON
/// line. Returns the process exit status.
pub fn child_main(mut input: impl BufRead, mut output: impl Write) -> i32 {
    let mut line = String::new();
    let request: ChildRequest = match input
        .read_line(&mut line)
        .map_err(|e| e.to_string())
        .and_then(|_| serde_json::from_str(&line).map_err(|e| e.to_string()))
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("bad consumer request: {e}");
            return EXIT_FAILURE;
        }
    };
    let config = &request.config;
    if let Some(quota) = config.memory_quota_bytes {
        if let Err(e) = limit_data_segment(quota / config.consumers as u64) {
            eprintln!("cannot apply memory quota: {e}");
            return EXIT_FAILURE;
        }
    }
    let result = (|| {
        let layout = DataLayout::new(&config.data_dir);
        let store = DocStoreHandle::open(config.backend, &layout)?;
        let workload = Workload::load(&layout, &store)?;
        let ctx = ConsumerCtx {
            consumer_id: request.consumer,
            config,
            workload: &workload,
        };
        run_consumer(ctx, StoreAccess::Owned(store), || {
            let ok = writeln!(output, "ready").and_then(|_| output.flush()).is_ok();
            let mut go = String::new();
            if !ok || input.read_line(&mut go).map_or(true, |n| n == 0) {
                std::process::exit(EXIT_FAILURE);
            }
        })
    })();
    match result {
        Ok(mut r) => {
            r.peak_rss_bytes = read_peak_rss(SampleTarget::Current).unwrap_or(0);
            let json = serde_json::to_string(&r).expect("result serializes");
            match writeln!(output, "{json}").and_then(|_| output.flush()) {
                Ok(()) => 0,
                Err(_) => EXIT_FAILURE,
            }
        }
        Err(e) => {
            eprintln!("{e}");
            if e.is_out_of_memory() {
                EXIT_OUT_OF_MEMORY
            } else {
                EXIT_FAILURE
            }
        }
    }
}
