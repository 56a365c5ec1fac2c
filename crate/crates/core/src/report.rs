//! Comparison tables: backends as rows, consumer counts × regimes as columns,
//! each cell the median over repetitions with its difference from the
//! in-memory backend.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::harness::Regime;
use crate::metrics::{median, percent_diff, BenchResult, Percent, GB};
use crate::store::BackendKind;

/// Knob settings shared by every cell of one table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Variant {
    pub workers: usize,
    pub pinned: bool,
    pub staged: bool,
}

impl Variant {
    fn label(self) -> String {
        let on = |b| if b { "on" } else { "off" };
        format!("workers={} pinned={} staged={}", self.workers, on(self.pinned), on(self.staged))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub variant: Variant,
    pub backend: BackendKind,
    pub consumers: usize,
    pub regime: Regime,
}

impl CellKey {
    fn of(r: &BenchResult) -> Self {
        let c = &r.config;
        Self {
            variant: Variant {
                workers: c.workers,
                pinned: c.pinned,
                staged: c.stage_dir.is_some(),
            },
            backend: c.backend,
            consumers: c.consumers,
            regime: c.regime,
        }
    }

    fn baseline(self) -> Self {
        Self {
            backend: BackendKind::InMemory,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Throughput,
    PeakRssSum,
    PeakRssPaper,
}

impl Metric {
    fn title(self) -> &'static str {
        match self {
            Metric::Throughput => "samples/s",
            Metric::PeakRssSum => "peak RSS, summed (GB)",
            Metric::PeakRssPaper => "peak RSS, paper-method (GB)",
        }
    }

    fn higher_is_better(self) -> bool {
        self == Metric::Throughput
    }
}

/// Aggregate of the repetitions of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// `None` when every repetition failed.
    pub samples_per_s: Option<f64>,
    pub peak_rss_sum_gb: Option<f64>,
    pub peak_rss_paper_gb: Option<f64>,
    /// Failure marker of the last failed repetition.
    pub failure: Option<String>,
    pub repetitions: usize,
}

impl Cell {
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Throughput => self.samples_per_s,
            Metric::PeakRssSum => self.peak_rss_sum_gb,
            Metric::PeakRssPaper => self.peak_rss_paper_gb,
        }
    }

    /// What a cell without a value shows.
    fn failure_label(&self) -> &str {
        match self.failure.as_deref() {
            Some("OOM") | None => "OOM",
            Some(_) => "FAIL",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportTable {
    cells: BTreeMap<CellKey, Cell>,
}

impl ReportTable {
    pub fn from_results<'a>(results: impl IntoIterator<Item = &'a BenchResult>) -> Self {
        let mut groups: BTreeMap<CellKey, Vec<&BenchResult>> = BTreeMap::new();
        for r in results {
            groups.entry(CellKey::of(r)).or_default().push(r);
        }
        let cells = groups
            .into_iter()
            .map(|(key, runs)| {
                let ok: Vec<_> = runs.iter().filter(|r| !r.is_failed()).collect();
                let med = |f: &dyn Fn(&BenchResult) -> f64| {
                    let mut v: Vec<f64> = ok.iter().map(|r| f(r)).collect();
                    median(&mut v)
                };
                let cell = Cell {
                    samples_per_s: med(&|r| r.samples_per_s),
                    peak_rss_sum_gb: med(&|r| r.peak_rss_sum_bytes as f64 / GB),
                    peak_rss_paper_gb: med(&|r| r.peak_rss_paper_bytes as f64 / GB),
                    failure: runs.iter().rev().find_map(|r| r.failure.clone()),
                    repetitions: runs.len(),
                };
                (key, cell)
            })
            .collect();
        Self { cells }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, key: &CellKey) -> Option<&Cell> {
        self.cells.get(key)
    }

    /// Difference from the in-memory cell of the same column. `None` for the
    /// baseline itself and when either side has no value.
    pub fn percent_vs_baseline(&self, key: &CellKey, metric: Metric) -> Option<Percent> {
        if key.backend == BackendKind::InMemory {
            return None;
        }
        let value = self.cells.get(key)?.value(metric)?;
        let base = self.cells.get(&key.baseline())?.value(metric)?;
        percent_diff(value, base).ok()
    }

    fn variants(&self) -> BTreeSet<Variant> {
        self.cells.keys().map(|k| k.variant).collect()
    }

    /// Numbers and annotations of one cell, without emphasis.
    fn cell_text(&self, key: &CellKey, metric: Metric) -> String {
        let Some(cell) = self.cells.get(key) else {
            return String::new();
        };
        let Some(v) = cell.value(metric) else {
            return cell.failure_label().to_owned();
        };
        let mut s = format!("{v:.2}");
        if key.backend != BackendKind::InMemory {
            match self.percent_vs_baseline(key, metric) {
                Some(p) => write!(s, " ({p})").unwrap(),
                None => s.push_str(" (-)"),
            }
        }
        s
    }

    fn best<'a>(&self, keys: impl Iterator<Item = &'a CellKey>, metric: Metric) -> Option<f64> {
        let values = keys.filter_map(|k| self.cells.get(k)?.value(metric));
        if metric.higher_is_better() {
            values.reduce(f64::max)
        } else {
            values.reduce(f64::min)
        }
    }

    /// One markdown table per knob variant and metric. Bold marks the best
    /// cell in its column, underline the best in its consumer-count group.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for variant in self.variants() {
            let keys: Vec<&CellKey> = self.cells.keys().filter(|k| k.variant == variant).collect();
            let backends: BTreeSet<BackendKind> = keys.iter().map(|k| k.backend).collect();
            let columns: BTreeSet<(usize, Regime)> = keys.iter().map(|k| (k.consumers, k.regime)).collect();
            for metric in [Metric::Throughput, Metric::PeakRssSum, Metric::PeakRssPaper] {
                writeln!(out, "### {} ({})\n", metric.title(), variant.label()).unwrap();
                out.push_str("| backend |");
                for (consumers, regime) in &columns {
                    write!(out, " {regime} x{consumers} |").unwrap();
                }
                out.push_str("\n|---|");
                out.push_str(&"---|".repeat(columns.len()));
                out.push('\n');
                for &backend in &backends {
                    write!(out, "| {backend} |").unwrap();
                    for &(consumers, regime) in &columns {
                        let key = CellKey {
                            variant,
                            backend,
                            consumers,
                            regime,
                        };
                        let mut text = self.cell_text(&key, metric);
                        if let Some(v) = self.cells.get(&key).and_then(|c| c.value(metric)) {
                            let column = keys
                                .iter()
                                .copied()
                                .filter(|k| k.consumers == consumers && k.regime == regime);
                            let group = keys.iter().copied().filter(|k| k.consumers == consumers);
                            if self.best(column, metric) == Some(v) {
                                text = format!("**{text}**");
                            }
                            if self.best(group, metric) == Some(v) {
                                text = format!("<u>{text}</u>");
                            }
                        }
                        write!(out, " {text} |").unwrap();
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
        }
        out
    }

    /// One row per cell. Failed cells carry their marker in `samples_per_s`
    /// and leave the other numbers empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "backend,regime,consumers,workers,pinned,staged,samples_per_s,pct_vs_inmemory,\
             peak_rss_sum_gb,peak_rss_paper_gb,repetitions\n",
        );
        let num = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.2}"));
        for (key, cell) in &self.cells {
            let throughput = match cell.samples_per_s {
                Some(v) => format!("{v:.2}"),
                None => cell.failure_label().to_owned(),
            };
            let pct = self
                .percent_vs_baseline(key, Metric::Throughput)
                .map_or_else(String::new, Percent::number);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                key.backend,
                key.regime,
                key.consumers,
                key.variant.workers,
                key.variant.pinned,
                key.variant.staged,
                throughput,
                pct,
                num(cell.peak_rss_sum_gb),
                num(cell.peak_rss_paper_gb),
                cell.repetitions,
            )
            .unwrap();
        }
        out
    }
}
