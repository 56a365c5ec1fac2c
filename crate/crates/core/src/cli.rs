//! Command-line entry point. Exit codes: 0 success, 2 not found, 3 stale or
//! corrupt index, 64 usage error, 70 internal or consumer failure.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{default_query_count, generate_dataset, DataLayout, SynthSpec};
use crate::harness::{child_main, run_bench, BenchConfig, HarnessError, Launcher, Regime, CHILD_SUBCOMMAND};
use crate::index::SortedKeyIndex;
use crate::indexer::{build_compressed_store, build_offset_index, verify_index_with, BuildError, Coverage, Verdict};
use crate::metrics::{load_results, write_result, BenchResult, GB};
use crate::report::ReportTable;
use crate::store::{BackendKind, DocStore, DocStoreHandle, StoreError};
use crate::sweep::{run_sweep, CellOutcome, SweepSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_FOUND: i32 = 2;
pub const EXIT_BAD_INDEX: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_FAILURE: i32 = 70;

/// Overrides `--results-dir` when set.
pub const RESULTS_ENV: &str = "DOCSTORE_RESULTS";

#[derive(Parser, Debug)]
#[command(name = "docstore", version, about = "Document stores and a data-loading benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with queries, triples and a manifest.
    Gen(GenArgs),
    /// Build the index (and data file) for a backend.
    Build(BuildArgs),
    /// Print one document.
    Get(GetArgs),
    /// Print an index header.
    Inspect(IndexArgs),
    /// Check an index against its source file.
    Verify(VerifyArgs),
    /// Run one benchmark and write its result file.
    Bench(BenchArgs),
    /// Run a grid of benchmarks, skipping cells already in the results directory.
    Sweep(SweepArgs),
    /// Summarize a results directory.
    Report(ReportArgs),
    #[command(name = CHILD_SUBCOMMAND, hide = true)]
    Consumer,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 10_000)]
    docs: u64,
    #[arg(long, default_value_t = 1000)]
    mean_len: u64,
    #[arg(long, default_value_t = 0.5)]
    len_dispersion: f64,
    #[arg(long, default_value_t = 50_000)]
    vocab_size: u32,
    #[arg(long, default_value_t = 1.1)]
    zipf_exponent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of queries (one triple each); defaults to one per ten documents.
    #[arg(long)]
    queries: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IndexedBackend {
    Indexed,
    Compressed,
}

impl From<IndexedBackend> for BackendKind {
    fn from(b: IndexedBackend) -> Self {
        match b {
            IndexedBackend::Indexed => BackendKind::Indexed,
            IndexedBackend::Compressed => BackendKind::Compressed,
        }
    }
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[arg(long, value_enum)]
    backend: IndexedBackend,
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GetArgs {
    #[arg(long)]
    backend: BackendKind,
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
    id: String,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long, value_enum)]
    backend: IndexedBackend,
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    index: IndexArgs,
    /// Decode only this many pseudo-randomly chosen entries.
    #[arg(long)]
    sample: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value = ".")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    /// Steps per consumer, warm-up included.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 0.0)]
    compute_ms: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    max_tokens: usize,
    /// Total memory for all consumer processes, e.g. 500M or 2G.
    #[arg(long, value_parser = parse_bytes)]
    memory_quota: Option<u64>,
    #[arg(long, default_value = "results")]
    results_dir: PathBuf,
}

impl RunArgs {
    fn config(&self, backend: BackendKind, regime: Regime) -> BenchConfig {
        BenchConfig {
            batch_size: self.batch_size as usize,
            steps: self.steps as usize,
            compute_ms: self.compute_ms,
            seed: self.seed,
            max_text_tokens: self.max_tokens,
            memory_quota_bytes: self.memory_quota,
            ..BenchConfig::new(&self.data_dir, backend, regime)
        }
    }

    fn results_dir(&self) -> PathBuf {
        std::env::var_os(RESULTS_ENV).map_or_else(|| self.results_dir.clone(), PathBuf::from)
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "indexed")]
    backend: BackendKind,
    #[arg(long, default_value = "threads")]
    regime: Regime,
    #[arg(long, default_value_t = 1)]
    consumers: usize,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    pinned: bool,
    #[arg(long)]
    stage_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Switch {
    Off,
    On,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "in_memory,indexed,compressed")]
    backends: Vec<BackendKind>,
    #[arg(long, value_delimiter = ',', default_value = "global_lock_threads,processes")]
    regimes: Vec<Regime>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    consumers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    workers: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "off")]
    pinned: Vec<Switch>,
    #[arg(long, value_delimiter = ',', value_enum, default_value = "off")]
    staging: Vec<Switch>,
    /// Staging directory used by `--staging on`.
    #[arg(long)]
    stage_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    repetitions: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, default_value = "results")]
    results_dir: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: Format,
}

/// Parses `1234`, `500K`, `500M`, `2G` (powers of 1000) or `KiB`/`MiB`/`GiB`.
fn parse_bytes(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("not a byte count: {s:?}"))?;
    let mult: u64 = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" => 1_000,
        "m" | "mb" => 1_000_000,
        "g" | "gb" => 1_000_000_000,
        "kib" => 1 << 10,
        "mib" => 1 << 20,
        "gib" => 1 << 30,
        _ => return Err(format!("unknown unit in {s:?}")),
    };
    n.checked_mul(mult).ok_or_else(|| format!("{s:?} is too large"))
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::NotFound(_) => EXIT_NOT_FOUND,
            e if e.is_index_problem() => EXIT_BAD_INDEX,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e)
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(_) => Failure::new(EXIT_USAGE, e),
            HarnessError::Store(s) => s.into(),
            e => Failure::new(EXIT_FAILURE, e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new(EXIT_FAILURE, e)
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Build(a) => cmd_build(&a),
        Command::Get(a) => cmd_get(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Consumer => {
            let stdin = io::stdin();
            return child_main(stdin.lock(), io::stdout().lock());
        }
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn cmd_gen(a: &GenArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        n_docs: a.docs,
        mean_len: a.mean_len,
        len_dispersion: a.len_dispersion,
        vocab_size: a.vocab_size,
        seed: a.seed,
        zipf_exponent: a.zipf_exponent,
    };
    spec.validate().map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let layout = DataLayout::new(&a.out_dir);
    let n_queries = a.queries.unwrap_or_else(|| default_query_count(a.docs));
    let summary = generate_dataset(&spec, n_queries, &layout).map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    std::fs::write(layout.manifest(), summary.corpus.render())?;
    print!("{}", summary.corpus.render());
    println!("queries={}", summary.n_queries);
    Ok(())
}

fn build_failure(e: BuildError) -> Failure {
    Failure::new(EXIT_FAILURE, e)
}

fn cmd_build(a: &BuildArgs) -> Result<(), Failure> {
    let layout = DataLayout::new(&a.data_dir);
    match a.backend {
        IndexedBackend::Indexed => {
            let s = build_offset_index(layout.corpus(), layout.offset_index()).map_err(build_failure)?;
            println!(
                "{}: {} entries, {} bytes",
                layout.offset_index().display(),
                s.entries,
                s.index_bytes
            );
        }
        IndexedBackend::Compressed => {
            let s = build_compressed_store(layout.corpus(), layout.compressed_data(), layout.compressed_index())
                .map_err(build_failure)?;
            println!(
                "{}: {} entries, {} data bytes for {} text bytes (ratio {:.3}), index {} bytes",
                layout.compressed_data().display(),
                s.entries,
                s.data_bytes,
                s.text_bytes,
                s.ratio,
                s.index_bytes
            );
        }
    }
    Ok(())
}

fn cmd_get(a: &GetArgs) -> Result<(), Failure> {
    let store = DocStoreHandle::open(a.backend, &DataLayout::new(&a.data_dir))?;
    let text = store.get(a.id.as_bytes())?;
    let mut out = io::stdout().lock();
    writeln!(out, "{text}")?;
    Ok(())
}

fn index_paths(a: &IndexArgs) -> (PathBuf, PathBuf) {
    let layout = DataLayout::new(&a.data_dir);
    match a.backend {
        IndexedBackend::Indexed => (layout.offset_index(), layout.corpus()),
        IndexedBackend::Compressed => (layout.compressed_index(), layout.compressed_data()),
    }
}

fn cmd_inspect(a: &IndexArgs) -> Result<(), Failure> {
    let (index_path, _) = index_paths(a);
    let bytes = std::fs::read(&index_path).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", index_path.display())))?;
    let index = SortedKeyIndex::from_bytes(bytes)
        .map_err(|e| Failure::new(EXIT_BAD_INDEX, format!("{}: {e}", index_path.display())))?;
    let h = index.header();
    println!("kind={:?}", h.kind);
    println!("key_width={}", h.key_width);
    println!("entry_count={}", h.entry_count);
    println!("source_len={}", h.source_len);
    println!("source_checksum={}", crate::checksum::to_hex(h.source_checksum));
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), Failure> {
    let (index_path, source_path) = index_paths(&a.index);
    let coverage = a.sample.map_or(Coverage::All, Coverage::Sample);
    match verify_index_with(&index_path, &source_path, coverage)? {
        Verdict::Ok => {
            println!("ok");
            Ok(())
        }
        Verdict::StaleIndex => Err(Failure::new(
            EXIT_BAD_INDEX,
            format!("stale index {}", index_path.display()),
        )),
        Verdict::Corrupt { entry, detail } => Err(Failure::new(
            EXIT_BAD_INDEX,
            match entry {
                Some(e) => format!("corrupt index {} at entry {e}: {detail}", index_path.display()),
                None => format!("corrupt index {}: {detail}", index_path.display()),
            },
        )),
    }
}

fn launcher() -> Result<Launcher, Failure> {
    Launcher::current_exe().map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot locate executable: {e}")))
}

fn summary_line(r: &BenchResult, path: &Path) -> String {
    format!(
        "{} {} x{}: {:.2} samples/s, peak RSS {:.2} GB summed, {:.2} GB paper-method -> {}",
        r.config.backend,
        r.config.regime,
        r.config.consumers,
        r.samples_per_s,
        r.peak_rss_sum_bytes as f64 / GB,
        r.peak_rss_paper_bytes as f64 / GB,
        path.display()
    )
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let config = BenchConfig {
        consumers: a.consumers,
        workers: a.workers,
        pinned: a.pinned,
        stage_dir: a.stage_dir.clone(),
        ..a.run.config(a.backend, a.regime)
    };
    config.validate()?;
    let dir = a.run.results_dir();
    match run_bench(&config, &launcher()?, 0) {
        Ok(r) => {
            let path = write_result(&r, &dir, None)?;
            println!("{}", summary_line(&r, &path));
            Ok(())
        }
        Err(e) => {
            let reason = if e.is_out_of_memory() { "OOM".to_owned() } else { e.to_string() };
            let path = write_result(&BenchResult::failed(config, 0, reason), &dir, None)?;
            let mut f = Failure::from(e);
            f.message = format!("{} (recorded in {})", f.message, path.display());
            Err(f)
        }
    }
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), Failure> {
    let on_off = |v: &[Switch]| {
        let mut out: Vec<bool> = v.iter().map(|&s| s == Switch::On).collect();
        out.dedup();
        out
    };
    let stage_dirs = on_off(&a.staging)
        .into_iter()
        .map(|on| match (on, &a.stage_dir) {
            (false, _) => Ok(None),
            (true, Some(d)) => Ok(Some(d.clone())),
            (true, None) => Err(Failure::new(EXIT_USAGE, "--staging on needs --stage-dir")),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SweepSpec {
        base: a.run.config(BackendKind::InMemory, Regime::Threads),
        backends: a.backends.clone(),
        regimes: a.regimes.clone(),
        consumer_counts: a.consumers.clone(),
        workers: a.workers.clone(),
        pinned: on_off(&a.pinned),
        stage_dirs,
        repetitions: a.repetitions,
    };
    for cell in spec.expand() {
        cell.config.validate()?;
    }
    let dir = a.run.results_dir();
    let summary = run_sweep(&spec, &dir, &launcher()?, |cell, outcome| {
        let what = match outcome {
            CellOutcome::Skipped => "skipped",
            CellOutcome::Ok => "done",
            CellOutcome::Failed => "FAILED",
        };
        let c = &cell.config;
        eprintln!("{} {} x{} {}: {what}", c.backend, c.regime, c.consumers, cell.tag);
    })?;
    eprintln!(
        "{} ran, {} skipped, {} failed; results in {}",
        summary.ran,
        summary.skipped,
        summary.failed,
        dir.display()
    );
    print_report(&dir, Format::Markdown)
}

fn print_report(dir: &Path, format: Format) -> Result<(), Failure> {
    let results = match load_results(dir) {
        Ok(r) => r,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let table = ReportTable::from_results(results.iter().map(|(_, r)| r));
    let mut out = io::stdout().lock();
    if table.is_empty() {
        writeln!(out, "no results")?;
    } else {
        match format {
            Format::Markdown => write!(out, "{}", table.to_markdown())?,
            Format::Csv => write!(out, "{}", table.to_csv())?,
        }
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), Failure> {
    let dir = std::env::var_os(RESULTS_ENV).map_or_else(|| a.results_dir.clone(), PathBuf::from);
    print_report(&dir, a.format)
}
