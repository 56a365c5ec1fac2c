use std::time::Duration;

use docstore::metrics::{MemorySampler, SampleTarget};

const GB: u64 = 1_000_000_000;

#[test]
fn sampler_sees_a_transient_gigabyte() {
    let a = MemorySampler::start(SampleTarget::Current);
    let b = MemorySampler::start(SampleTarget::Current);
    let mut block = vec![0u8; GB as usize];
    // Touch every page so it is resident, then hold it across samples.
    for i in (0..block.len()).step_by(4096) {
        block[i] = 1;
    }
    std::hint::black_box(&block);
    std::thread::sleep(Duration::from_millis(350));
    assert!(a.peak_so_far() >= GB);
    drop(block);
    std::thread::sleep(Duration::from_millis(250));
    let (pa, pb) = (a.stop(), b.stop());
    assert!(pa.peak_bytes >= GB && pb.peak_bytes >= GB, "{pa:?} {pb:?}");
    assert!(!pa.partial);
    let diff = pa.peak_bytes.abs_diff(pb.peak_bytes) as f64;
    assert!(diff <= 0.05 * pa.peak_bytes as f64, "{pa:?} {pb:?}");
}
