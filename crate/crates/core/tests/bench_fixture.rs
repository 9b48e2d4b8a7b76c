use ckpt_bridge::bench::{group_runs, peak_throughput, percentile, saturation_qps, summarize_run, Qps, RequestRecord};

/// 30 requests with staggered starts, varied prompt latency and decode pace;
/// every tenth request has one 40 ms stall.
fn fixture() -> Vec<RequestRecord> {
    (0..30u32)
        .map(|i| {
            let ttft = 50.0 + f64::from(i * 37 % 23);
            let out = 64 + u64::from(i * 11 % 50);
            let tpot = 9.0 + f64::from(i % 5) * 0.5;
            let mut itl = vec![tpot; 3];
            if i % 10 == 0 {
                itl.push(40.0);
            }
            RequestRecord {
                qps_target: Qps(4.0),
                input_tokens: 512,
                output_tokens: out,
                ttft_ms: ttft,
                e2e_ms: ttft + (out - 1) as f64 * tpot,
                itl_ms: Some(itl),
                start_ms: Some(f64::from(250 * i + (i % 3) * 40)),
            }
        })
        .collect()
}

// Values recomputed by hand from the fixture: sort, take rank ceil(p*n),
// and divide total output tokens (2655) by the 8297 ms makespan.
#[test]
fn thirty_request_summary() {
    let s = summarize_run(&fixture()).unwrap();
    assert_eq!(s.request_count, 30);
    assert_eq!(s.median_ttft_ms, 60.0);
    assert_eq!(s.p99_itl_ms, Some(40.0));
    assert_eq!(s.median_tpot_ms, Some(10.0));
    assert!((s.output_throughput_tok_s - 2655.0 / 8.297).abs() < 1e-9);
}

#[test]
fn p99_never_below_median() {
    let records = fixture();
    let ttfts: Vec<f64> = records.iter().map(|r| r.ttft_ms).collect();
    for n in 1..=ttfts.len() {
        let slice = &ttfts[..n];
        assert!(percentile(slice, 99.0) >= percentile(slice, 50.0));
    }
}

#[test]
fn sweep_from_records() {
    // same shape at every level; throughput grows with the level until 32
    let mut all = Vec::new();
    for (qps, stretch) in [(4.0, 4.0), (8.0, 2.0), (16.0, 1.1), (32.0, 1.0), (64.0, 1.0)] {
        all.extend(fixture().into_iter().map(|mut r| {
            r.qps_target = Qps(qps);
            r.e2e_ms *= stretch;
            r.ttft_ms *= stretch;
            r
        }));
    }
    let runs = group_runs(&all);
    assert_eq!(runs.len(), 5);
    let summaries: Vec<_> = runs.iter().map(|(_, r)| summarize_run(r).unwrap()).collect();
    assert_eq!(peak_throughput(&summaries).unwrap().0, Qps(32.0));
    assert_eq!(saturation_qps(&summaries, 0.05).unwrap(), Qps(32.0));
}
