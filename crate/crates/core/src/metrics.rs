//! Throughput and memory accounting, comparison statistics and result files.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::BenchConfig;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum MetricsError {
    #[error("duration must be positive")]
    ZeroDuration,
    #[error("baseline is zero")]
    ZeroBaseline,
}

/// Samples per second over a wall-clock interval.
pub fn throughput(total_samples: u64, wall_s: f64) -> Result<f64, MetricsError> {
    if !(wall_s > 0.0 && wall_s.is_finite()) {
        return Err(MetricsError::ZeroDuration);
    }
    Ok(total_samples as f64 / wall_s)
}

/// The per-GPU accounting used for multi-process runs: the main process's
/// peak multiplied by the number of consumers.
pub fn paper_style_memory(main_peak_bytes: u64, consumers: u32) -> u64 {
    main_peak_bytes * u64::from(consumers.max(1))
}

/// A signed percentage that renders with two decimals and an explicit sign.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Percent(pub f64);

impl Percent {
    /// Value rounded to two decimals, with negative zero folded to zero.
    pub fn rounded(self) -> f64 {
        let r = (self.0 * 100.0).round() / 100.0;
        if r == 0.0 {
            0.0
        } else {
            r
        }
    }

    /// `+0.81`, `-93.07`, `0.00`: the number without the percent sign.
    pub fn number(self) -> String {
        let r = self.rounded();
        if r == 0.0 {
            "0.00".to_owned()
        } else {
            format!("{r:+.2}")
        }
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.number())
    }
}

/// `100 * (value - baseline) / baseline`.
pub fn percent_diff(value: f64, baseline: f64) -> Result<Percent, MetricsError> {
    if baseline == 0.0 {
        return Err(MetricsError::ZeroBaseline);
    }
    Ok(Percent(100.0 * (value - baseline) / baseline))
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

pub const GB: f64 = 1e9;

/// Which process a [`MemorySampler`] watches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleTarget {
    Current,
    Pid(u32),
}

impl SampleTarget {
    fn status_path(self) -> PathBuf {
        match self {
            SampleTarget::Current => PathBuf::from("/proc/self/status"),
            SampleTarget::Pid(pid) => PathBuf::from(format!("/proc/{pid}/status")),
        }
    }
}

fn status_field_kb(status: &str, field: &str) -> Option<u64> {
    status
        .lines()
        .find_map(|l| l.strip_prefix(field))
        .and_then(|rest| rest.trim_start_matches(':').split_whitespace().next())
        .and_then(|n| n.parse().ok())
}

/// Current resident set in bytes, or `None` if the process is gone (exited
/// processes lose their `VmRSS` line before their status file disappears).
pub fn read_rss(target: SampleTarget) -> Option<u64> {
    let status = fs::read_to_string(target.status_path()).ok()?;
    status_field_kb(&status, "VmRSS").map(|kb| kb * 1024)
}

/// Kernel-tracked peak resident set (`VmHWM`) in bytes.
pub fn read_peak_rss(target: SampleTarget) -> Option<u64> {
    let status = fs::read_to_string(target.status_path()).ok()?;
    status_field_kb(&status, "VmHWM").map(|kb| kb * 1024)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampledPeak {
    pub peak_bytes: u64,
    pub samples: u64,
    /// The process disappeared before sampling was stopped.
    pub partial: bool,
}

/// Reads the resident set of `target` every `period` until `stop` fires or the
/// process is gone, publishing the running maximum into `peak`.
pub fn sample_memory_loop(
    target: SampleTarget,
    period: Duration,
    stop: &crossbeam_channel::Receiver<()>,
    peak: &AtomicU64,
) -> SampledPeak {
    let mut samples = 0;
    loop {
        match read_rss(target) {
            Some(rss) => {
                peak.fetch_max(rss, Ordering::Relaxed);
                samples += 1;
            }
            None => {
                return SampledPeak {
                    peak_bytes: peak.load(Ordering::Relaxed),
                    samples,
                    partial: true,
                }
            }
        }
        match stop.recv_timeout(period) {
            Err(RecvTimeoutError::Timeout) => {}
            _ => {
                return SampledPeak {
                    peak_bytes: peak.load(Ordering::Relaxed),
                    samples,
                    partial: false,
                }
            }
        }
    }
}

/// Background thread tracking the peak resident set of one process.
pub struct MemorySampler {
    stop: Sender<()>,
    peak: Arc<AtomicU64>,
    thread: JoinHandle<SampledPeak>,
}

impl MemorySampler {
    pub const PERIOD: Duration = Duration::from_millis(100);

    pub fn start(target: SampleTarget) -> Self {
        Self::with_period(target, Self::PERIOD)
    }

    pub fn with_period(target: SampleTarget, period: Duration) -> Self {
        let (stop, rx) = bounded(1);
        let peak = Arc::new(AtomicU64::new(0));
        let shared = Arc::clone(&peak);
        let thread = std::thread::Builder::new()
            .name("rss-sampler".into())
            .spawn(move || sample_memory_loop(target, period, &rx, &shared))
            .expect("spawn sampler thread");
        Self { stop, peak, thread }
    }

    /// Peak observed so far; never decreases.
    pub fn peak_so_far(&self) -> u64 {
        self.peak.load(Ordering::Relaxed)
    }

    pub fn stop(self) -> SampledPeak {
        let _ = self.stop.send(());
        self.thread.join().expect("sampler thread panicked")
    }
}

/// Outcome of one consumer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsumerResult {
    pub consumer: usize,
    /// Samples processed in the timed section.
    pub samples: u64,
    /// Length of the timed section.
    pub elapsed_s: f64,
    /// Peak resident set of the consumer's process; 0 when it shares the
    /// benchmark process.
    pub peak_rss_bytes: u64,
    /// Time spent assembling batches during the timed section.
    #[serde(default)]
    pub fetch_s: f64,
    /// Time spent holding the global lock during the timed section.
    #[serde(default)]
    pub lock_hold_s: f64,
    /// Digest of the (query id, positive id) sequence over all steps, in step
    /// order. Lower-case hex.
    #[serde(default)]
    pub stream_digest: String,
    #[serde(default)]
    pub buffers_created: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub logical_cpus: usize,
    pub total_memory_bytes: Option<u64>,
    pub os: String,
    pub arch: String,
}

impl HostInfo {
    pub fn detect() -> Self {
        let total_memory_bytes = fs::read_to_string("/proc/meminfo")
            .ok()
            .and_then(|s| status_field_kb(&s, "MemTotal"))
            .map(|kb| kb * 1024);
        Self {
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            total_memory_bytes,
            os: std::env::consts::OS.to_owned(),
            arch: std::env::consts::ARCH.to_owned(),
        }
    }
}

/// One benchmark run, as persisted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config: BenchConfig,
    /// Total samples over the wall-clock of the parallel section.
    pub samples_per_s: f64,
    pub wall_s: f64,
    pub per_consumer: Vec<ConsumerResult>,
    /// Sum of peak resident sets over every process of the run.
    pub peak_rss_sum_bytes: u64,
    /// Peak of the main process times the consumer count (processes regime),
    /// or the single process's peak otherwise.
    pub peak_rss_paper_bytes: u64,
    pub host_info: HostInfo,
    #[serde(default)]
    pub repetition: u32,
    /// Set when the run did not complete; `"OOM"` for memory exhaustion.
    #[serde(default)]
    pub failure: Option<String>,
    pub timestamp: String,
}

impl BenchResult {
    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }

    /// A placeholder for a run that failed before producing numbers.
    pub fn failed(config: BenchConfig, repetition: u32, reason: impl Into<String>) -> Self {
        Self {
            config,
            samples_per_s: 0.0,
            wall_s: 0.0,
            per_consumer: Vec::new(),
            peak_rss_sum_bytes: 0,
            peak_rss_paper_bytes: 0,
            host_info: HostInfo::detect(),
            repetition,
            failure: Some(reason.into()),
            timestamp: timestamp_now(),
        }
    }
}

pub fn timestamp_now() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string()
}

/// `<backend>_<regime>_<consumers>` followed by `_<tag>` when given.
pub fn result_stem(config: &BenchConfig, tag: Option<&str>) -> String {
    let mut s = format!("{}_{}_{}", config.backend, config.regime, config.consumers);
    if let Some(tag) = tag {
        s.push('_');
        s.push_str(tag);
    }
    s
}

/// Writes `<timestamp>_<stem>.json` into `dir` and returns its path.
pub fn write_result(result: &BenchResult, dir: &Path, tag: Option<&str>) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let name = format!("{}_{}.json", result.timestamp, result_stem(&result.config, tag));
    let path = dir.join(name);
    let json = serde_json::to_string_pretty(result).map_err(io::Error::other)?;
    fs::write(&path, json + "\n")?;
    Ok(path)
}

/// Every parseable result file in `dir`, sorted by file name. Other files are
/// ignored.
pub fn load_results(dir: &Path) -> io::Result<Vec<(PathBuf, BenchResult)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        if let Ok(r) = serde_json::from_str::<BenchResult>(&text) {
            out.push((path, r));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput(1000, 10.0).unwrap(), 100.0);
        assert_eq!(throughput(0, 10.0).unwrap(), 0.0);
        let t = throughput(160, 4.034).unwrap();
        assert!((t - 39.66).abs() <= 0.01, "{t}");
        assert_eq!(throughput(1, 0.0), Err(MetricsError::ZeroDuration));
        assert_eq!(throughput(1, -1.0), Err(MetricsError::ZeroDuration));
    }

    #[test]
    fn paper_memory_examples() {
        let gb = |x: f64| (x * GB).round() as u64;
        assert_eq!(paper_style_memory(gb(2.77), 2), gb(5.54));
        assert_eq!(paper_style_memory(gb(4.21), 4), gb(16.84));
        assert_eq!(paper_style_memory(12345, 1), 12345);
    }

    #[test]
    fn percent_examples() {
        let p = percent_diff(39.88, 39.56).unwrap();
        assert!((p.0 - 0.80).abs() <= 0.05, "{}", p.0);
        assert_eq!(p.to_string(), "+0.81%");
        // Printed tables show -93.07 from unrounded inputs; from the rounded
        // inputs the value is -37.44 / 40.23 = -93.0649...
        let p = percent_diff(2.79, 40.23).unwrap();
        assert!((p.0 + 93.07).abs() <= 0.05, "{}", p.0);
        assert_eq!(p.to_string(), "-93.06%");
        assert_eq!(percent_diff(7.5, 7.5).unwrap().to_string(), "0.00%");
        assert_eq!(percent_diff(1.0, 0.0), Err(MetricsError::ZeroBaseline));
        // Tiny negative values must not print as "-0.00%".
        assert_eq!(Percent(-0.001).to_string(), "0.00%");
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn status_parsing() {
        let s = "Name:\tx\nVmHWM:\t    2048 kB\nVmRSS:\t    1024 kB\n";
        assert_eq!(status_field_kb(s, "VmRSS"), Some(1024));
        assert_eq!(status_field_kb(s, "VmHWM"), Some(2048));
        assert_eq!(status_field_kb(s, "VmSwap"), None);
    }

    #[test]
    fn sampler_sees_own_process() {
        let s = MemorySampler::with_period(SampleTarget::Current, Duration::from_millis(10));
        std::thread::sleep(Duration::from_millis(50));
        let first = s.peak_so_far();
        std::thread::sleep(Duration::from_millis(30));
        assert!(s.peak_so_far() >= first);
        let r = s.stop();
        assert!(!r.partial);
        assert!(r.samples >= 2);
        assert!(r.peak_bytes > 0);
    }

    #[test]
    fn sampler_flags_instant_exit() {
        let mut child = std::process::Command::new("true").spawn().unwrap();
        let pid = child.id();
        child.wait().unwrap();
        let r = MemorySampler::start(SampleTarget::Pid(pid)).stop();
        assert!(r.partial);
    }

    proptest! {
        #[test]
        fn percent_is_linear_in_value(b in 0.1f64..1e6, v1 in -1e6f64..1e6, v2 in -1e6f64..1e6, k in -10.0f64..10.0) {
            // For fixed b, f(v) + 100 = 100 v / b is linear in v.
            let f = |v: f64| percent_diff(v, b).unwrap().0;
            let lhs = f(k * v1 + v2);
            let rhs = k * (f(v1) + 100.0) + (f(v2) + 100.0) - 100.0;
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs() + rhs.abs()) * 1e3);
        }
    }
}
