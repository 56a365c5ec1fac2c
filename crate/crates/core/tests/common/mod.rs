#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use docstore::corpus::{generate_dataset, DataLayout, SynthSpec};
use docstore::harness::Launcher;
use docstore::indexer::{build_compressed_store, build_offset_index};

pub const FIXTURE: &str = "d1\thello\nd2\tbig world\nd3\t!\n";

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_docstore")
}

pub fn launcher() -> Launcher {
    Launcher::new(bin())
}

pub fn docstore(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("run docstore")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn build_all(layout: &DataLayout) {
    build_offset_index(layout.corpus(), layout.offset_index()).unwrap();
    build_compressed_store(layout.corpus(), layout.compressed_data(), layout.compressed_index()).unwrap();
}

/// The three-line fixture with one query and triple per document, built for
/// every backend.
pub fn fixture(dir: &Path) -> DataLayout {
    let layout = DataLayout::new(dir);
    fs::create_dir_all(dir).unwrap();
    fs::write(layout.corpus(), FIXTURE).unwrap();
    fs::write(layout.queries(), "q1\thello there\nq2\tbig\nq3\twhat\n").unwrap();
    fs::write(layout.triples(), "q1\td1\nq2\td2\nq3\td3\n").unwrap();
    build_all(&layout);
    layout
}

pub fn synthetic(dir: &Path, spec: &SynthSpec, n_queries: u64) -> DataLayout {
    let layout = DataLayout::new(dir);
    generate_dataset(spec, n_queries, &layout).unwrap();
    build_all(&layout);
    layout
}

pub fn small_spec(n_docs: u64, mean_len: u64, seed: u64) -> SynthSpec {
    SynthSpec {
        n_docs,
        mean_len,
        seed,
        ..SynthSpec::default()
    }
}

pub fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Serializes tests within one test binary so throughput measurements do not
/// compete for cores.
pub fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}
