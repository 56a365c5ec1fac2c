mod common;

use std::fs;

use common::{fixture, launcher, small_spec, synthetic};
use docstore::corpus::DataLayout;
use docstore::harness::{
    assemble_batch, run_bench, run_consumer, stage_files, Batch, BenchConfig, ConsumerCtx, HarnessError, Regime,
    StageError, StoreAccess, Workload,
};
use docstore::rng::StreamRng;
use docstore::store::{BackendKind, DocStore, DocStoreHandle};
use docstore::BenchResult;

fn config(layout: &DataLayout, backend: BackendKind, regime: Regime, consumers: usize, steps: usize) -> BenchConfig {
    BenchConfig {
        consumers,
        steps,
        ..BenchConfig::new(&layout.dir, backend, regime)
    }
}

fn consumer_run(layout: &DataLayout, c: &BenchConfig) -> docstore::ConsumerResult {
    let store = DocStoreHandle::open(c.backend, layout).unwrap();
    let workload = Workload::load(layout, &store).unwrap();
    let ctx = ConsumerCtx {
        consumer_id: 0,
        config: c,
        workload: &workload,
    };
    run_consumer(ctx, StoreAccess::Owned(store), || {}).unwrap()
}

fn bench(c: &BenchConfig) -> BenchResult {
    run_bench(c, &launcher(), 0).unwrap()
}

#[test]
fn step_counts() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    let mut c = config(&layout, BackendKind::Indexed, Regime::Threads, 1, 0);
    let r = consumer_run(&layout, &c);
    assert_eq!(r.samples, 0);
    assert!(r.elapsed_s < 0.01, "{}", r.elapsed_s);
    c.steps = 10;
    assert_eq!(consumer_run(&layout, &c).samples, 160);
    c.steps = 100;
    // 5 warm-up steps are not counted.
    assert_eq!(consumer_run(&layout, &c).samples, 95 * 16);
}

#[test]
fn single_triple_batch_has_the_right_texts() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    let texts = [("d1", "hello"), ("d2", "big world"), ("d3", "!")];
    let queries = [("q1", "hello there"), ("q2", "big"), ("q3", "what")];
    for backend in BackendKind::ALL {
        let store = DocStoreHandle::open(backend, &layout).unwrap();
        let workload = Workload::load(&layout, &store).unwrap();
        for seed in 0..20 {
            let mut rng = StreamRng::seeded(seed);
            let mut scratch = String::new();
            let b = assemble_batch(&store, &workload, &mut rng, 1, 512, &mut scratch, Batch::with_capacity(1)).unwrap();
            assert_eq!(b.len(), 1);
            let tr = &b.triples()[0];
            let q = tr.query.join(" ");
            let pos = tr.positive.join(" ");
            let neg = tr.negative.join(" ");
            let qi = queries.iter().position(|(_, text)| *text == q).expect("query text");
            // Triples pair q<i> with d<i>.
            assert_eq!(pos, texts[qi].1);
            assert!(texts.iter().any(|(_, text)| *text == neg));
            assert_ne!(neg, pos);
        }
    }
}

#[test]
fn tokens_are_capped() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    fs::write(layout.queries(), "q1\ta b c d\nq2\ta b c d\nq3\ta b c d\n").unwrap();
    let store = DocStoreHandle::open(BackendKind::InMemory, &layout).unwrap();
    let workload = Workload::load(&layout, &store).unwrap();
    let b = assemble_batch(
        &store,
        &workload,
        &mut StreamRng::seeded(1),
        4,
        2,
        &mut String::new(),
        Batch::with_capacity(4),
    )
    .unwrap();
    for tr in b.triples() {
        assert_eq!(tr.query, ["a", "b"]);
        assert!(tr.positive.len() <= 2 && tr.negative.len() <= 2);
    }
}

#[test]
fn pinned_pool_stops_allocating() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    for workers in [0, 1, 3] {
        let c = BenchConfig {
            pinned: true,
            workers,
            ..config(&layout, BackendKind::Compressed, Regime::Threads, 1, 100)
        };
        let r = consumer_run(&layout, &c);
        assert!(r.buffers_created >= 1);
        assert!(r.buffers_created <= c.pool_size() as u64, "{} > {}", r.buffers_created, c.pool_size());
    }
}

#[test]
fn single_consumer_throughput_is_self_consistent() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = synthetic(t.path(), &small_spec(2000, 500, 1), 200);
    for regime in Regime::ALL {
        let c = BenchConfig {
            compute_ms: 1.0,
            ..config(&layout, BackendKind::Indexed, regime, 1, 300)
        };
        let r = bench(&c);
        let own = r.per_consumer[0].samples as f64 / r.per_consumer[0].elapsed_s;
        let rel = (r.samples_per_s - own).abs() / own;
        assert!(rel <= 0.05, "{regime}: bench {} vs consumer {own}", r.samples_per_s);
    }
}

#[test]
fn compute_bound_threads_scale() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = synthetic(t.path(), &small_spec(2000, 200, 2), 200);
    let run = |consumers| {
        let c = BenchConfig {
            compute_ms: 20.0,
            batch_size: 4,
            ..config(&layout, BackendKind::InMemory, Regime::Threads, consumers, 60)
        };
        bench(&c).samples_per_s
    };
    let (one, four) = (run(1), run(4));
    assert!(four >= 3.0 * one, "1: {one}, 4: {four}");
}

#[test]
fn global_lock_serializes_fetches() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = synthetic(t.path(), &small_spec(2000, 1000, 3), 200);
    let run = |consumers| bench(&config(&layout, BackendKind::Indexed, Regime::GlobalLockThreads, consumers, 200));
    let one = run(1).samples_per_s;
    for k in [2, 4, 8] {
        let r = run(k);
        assert!(r.samples_per_s <= 1.3 * one, "{k}: {} vs {one}", r.samples_per_s);
    }
}

#[test]
fn lock_is_not_held_during_compute() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = synthetic(t.path(), &small_spec(1000, 500, 4), 100);
    let c = BenchConfig {
        compute_ms: 5.0,
        ..config(&layout, BackendKind::Indexed, Regime::GlobalLockThreads, 4, 60)
    };
    let r = bench(&c);
    let hold: f64 = r.per_consumer.iter().map(|c| c.lock_hold_s).sum();
    let total: f64 = r.per_consumer.iter().map(|c| c.elapsed_s).sum();
    let compute = (c.consumers * c.timed_steps()) as f64 * c.compute_ms / 1000.0;
    assert!(hold > 0.0);
    assert!(hold < total - compute, "hold {hold}, total {total}, compute {compute}");
}

#[test]
fn prefetch_is_not_slower() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = synthetic(t.path(), &small_spec(2000, 2000, 5), 200);
    // Interleaved repetitions so drift affects both arms alike.
    let compare = |compute_ms| {
        let (mut w0, mut w1) = (Vec::new(), Vec::new());
        for _ in 0..5 {
            for (workers, out) in [(0, &mut w0), (1, &mut w1)] {
                let c = BenchConfig {
                    workers,
                    compute_ms,
                    ..config(&layout, BackendKind::Compressed, Regime::Threads, 1, 400)
                };
                out.push(bench(&c).samples_per_s);
            }
        }
        let m = docstore::metrics::median;
        (m(&mut w0).unwrap(), m(&mut w1).unwrap())
    };
    let (w0, w1) = compare(0.0);
    assert!(w1 >= 0.95 * w0, "compute 0: workers=0 {w0}, workers=1 {w1}");
    let (w0, w1) = compare(5.0);
    assert!(w1 >= w0, "compute 5: workers=0 {w0}, workers=1 {w1}");
}

#[test]
fn streams_do_not_depend_on_regime_or_workers() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = synthetic(t.path(), &small_spec(500, 100, 6), 50);
    let digests = |regime, workers, backend| {
        let c = BenchConfig {
            workers,
            seed: 99,
            ..config(&layout, backend, regime, 3, 40)
        };
        bench(&c)
            .per_consumer
            .into_iter()
            .map(|r| r.stream_digest)
            .collect::<Vec<_>>()
    };
    let reference = digests(Regime::Threads, 0, BackendKind::Indexed);
    assert_eq!(reference.len(), 3);
    assert!(reference[0] != reference[1] && reference[1] != reference[2]);
    for regime in Regime::ALL {
        for workers in [0, 2] {
            for backend in BackendKind::ALL {
                assert_eq!(digests(regime, workers, backend), reference, "{regime} w{workers} {backend}");
            }
        }
    }
}

#[test]
fn quota_makes_replication_fail() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = synthetic(t.path(), &small_spec(6000, 5000, 7), 100);
    let corpus = fs::metadata(layout.corpus()).unwrap().len();
    let quota = corpus * 100 / 60;
    let c = BenchConfig {
        memory_quota_bytes: Some(quota),
        ..config(&layout, BackendKind::InMemory, Regime::Processes, 2, 20)
    };
    match run_bench(&c, &launcher(), 0) {
        Err(e @ HarnessError::ChildFailed { .. }) => assert!(e.is_out_of_memory(), "{e}"),
        other => panic!("expected an out-of-memory child failure, got {other:?}"),
    }
    // The same quota is ample for a backend that does not load the corpus.
    let c = BenchConfig {
        backend: BackendKind::Compressed,
        ..c
    };
    run_bench(&c, &launcher(), 0).unwrap();
}

#[test]
fn failing_child_is_reported() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    fs::remove_file(layout.offset_index()).unwrap();
    let c = config(&layout, BackendKind::Indexed, Regime::Processes, 2, 20);
    match run_bench(&c, &launcher(), 0) {
        Err(HarnessError::ChildFailed {
            detail, out_of_memory, ..
        }) => {
            assert!(!out_of_memory);
            assert!(detail.contains("corpus.dsix"), "{detail}");
        }
        other => panic!("expected a child failure, got {other:?}"),
    }
}

#[test]
fn staging_copies_and_short_circuits() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    let stage = t.path().join("stage");
    let files = BackendKind::Compressed.files(&layout);
    let r = stage_files(&files, &stage).unwrap();
    assert_eq!((r.copied, r.skipped), (files.len(), 0));
    for (src, dst) in files.iter().zip(&r.paths) {
        assert_eq!(
            docstore::checksum::digest_file(src).unwrap(),
            docstore::checksum::digest_file(dst).unwrap()
        );
    }
    let mtimes: Vec<_> = r.paths.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    let r = stage_files(&files, &stage).unwrap();
    assert_eq!((r.copied, r.skipped), (0, files.len()));
    let again: Vec<_> = r.paths.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    assert_eq!(mtimes, again);

    // A regular file where the directory should be.
    let blocker = t.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    assert!(matches!(stage_files(&files, &blocker), Err(StageError::Io { .. })));
}

#[test]
fn staged_bench_matches_unstaged_streams() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    let base = config(&layout, BackendKind::Compressed, Regime::Processes, 2, 20);
    let staged = BenchConfig {
        stage_dir: Some(t.path().join("stage")),
        ..base.clone()
    };
    let a = bench(&base);
    let b = bench(&staged);
    assert_eq!(b.config.stage_dir, staged.stage_dir);
    let d = |r: &BenchResult| r.per_consumer.iter().map(|c| c.stream_digest.clone()).collect::<Vec<_>>();
    assert_eq!(d(&a), d(&b));
    assert!(t.path().join("stage").join("docs.lz4").exists());
}

#[test]
fn clone_handle_works_across_threads_in_the_harness() {
    let _serial = common::serial();
    let t = tempfile::tempdir().unwrap();
    let layout = fixture(t.path());
    let store = DocStoreHandle::open(BackendKind::Indexed, &layout).unwrap();
    let clones: Vec<_> = (0..4).map(|_| store.clone_handle().unwrap()).collect();
    std::thread::scope(|s| {
        for h in clones {
            s.spawn(move || {
                for _ in 0..200 {
                    assert_eq!(h.get(b"d2").unwrap(), "big world");
                    assert_eq!(h.get(b"d3").unwrap(), "!");
                }
            });
        }
    });
}
