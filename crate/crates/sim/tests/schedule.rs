use pixseq_sim::{bubble_ratio, shard_cost, simulate_pipeline, sweep, validate_trace, write_sweep_csv, PipelineSpec, ScheduleTrace, ShardSpec, Strategy as Split};
use proptest::prelude::*;

/// Fill-drain makespan from the stage/microbatch recurrence.
fn fill_drain_makespan(s: usize, m: usize, t_f: f64, t_b: f64, lat: f64) -> f64 {
    let mut f = vec![vec![0.0f64; m]; s];
    for st in 0..s {
        for mb in 0..m {
            let prev_stage = if st > 0 { f[st - 1][mb] + lat } else { 0.0 };
            let prev_mb = if mb > 0 { f[st][mb - 1] } else { 0.0 };
            f[st][mb] = prev_stage.max(prev_mb) + t_f;
        }
    }
    let mut b = vec![vec![0.0f64; m]; s];
    for st in (0..s).rev() {
        for mb in 0..m {
            let dep = if st + 1 == s { f[st][mb] } else { b[st + 1][mb] + lat };
            let prev = if mb > 0 { b[st][mb - 1] } else { f[st][m - 1] };
            b[st][mb] = dep.max(prev) + t_b;
        }
    }
    b[0][m - 1]
}

#[test]
fn fill_drain_matches_closed_form() {
    for s in 1..=8 {
        for m in 1..=16 {
            let t = simulate_pipeline(&PipelineSpec::uniform(s, m, 1)).unwrap();
            assert_eq!(t.makespan, fill_drain_makespan(s, m, 1.0, 1.0, 0.0));
            assert_eq!(bubble_ratio(&t).unwrap(), (s - 1) as f64 / (m + s - 1) as f64, "S={s} M={m}");
        }
    }
}

#[test]
fn circular_beats_fill_drain_at_sixteen_stages() {
    let one = bubble_ratio(&simulate_pipeline(&PipelineSpec::uniform(16, 8, 1)).unwrap()).unwrap();
    let four = bubble_ratio(&simulate_pipeline(&PipelineSpec::circular16(8)).unwrap()).unwrap();
    assert!(four < one, "R=4 {four} vs R=1 {one}");
}

#[test]
fn bubble_never_grows_with_more_microbatches() {
    for s in [2, 4, 8] {
        let mut prev = 1.0;
        for m in 1..=32 {
            let b = bubble_ratio(&simulate_pipeline(&PipelineSpec::uniform(s, m, 1)).unwrap()).unwrap();
            assert!(b <= prev, "S={s} M={m}");
            prev = b;
        }
    }
}

#[test]
fn shard_peak_output_splits_by_n() {
    let base = ShardSpec { n_way: 4, ..Default::default() };
    let ar = shard_cost(&ShardSpec { strategy: Split::Allreduce, ..base.clone() }).unwrap();
    let rs = shard_cost(&ShardSpec { strategy: Split::ReducescatterAllgather, ..base }).unwrap();
    assert_eq!(rs.peak_output_elems * 4, ar.peak_output_elems);
    assert_eq!(rs.comm_bytes_per_layer, ar.comm_bytes_per_layer);
}

#[test]
fn sweep_modes_agree_and_csv_has_header() {
    let specs: Vec<PipelineSpec> = (1..=4).flat_map(|s| (1..=4).map(move |m| PipelineSpec::uniform(s, m, 2))).collect();
    let a = sweep(&specs, false).unwrap();
    assert_eq!(a, sweep(&specs, true).unwrap());
    let mut buf = Vec::new();
    write_sweep_csv(&a, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("stages,microbatches,rounds,t_f,t_b,latency,makespan,bubble_ratio,throughput\n"));
    assert_eq!(text.lines().count(), specs.len() + 1);
}

#[test]
fn empty_trace_is_rejected() {
    let t = ScheduleTrace { devices: vec![], makespan: 0.0, prologue: 0.0, epilogue: 0.0 };
    assert!(bubble_ratio(&t).is_err());
}

fn spec_strategy() -> impl Strategy<Value = PipelineSpec> {
    (1usize..6, 1usize..10, 1usize..4, 0u8..4, 0u8..4, 0u8..3).prop_map(|(s, m, r, f, b, l)| PipelineSpec {
        t_f: 0.5 + f as f64 * 0.5,
        t_b: 0.5 + b as f64 * 0.5,
        latency: l as f64 * 0.25,
        ..PipelineSpec::uniform(s, m, r)
    })
}

proptest! {
    #[test]
    fn traces_are_valid_and_replayable(spec in spec_strategy()) {
        let t = simulate_pipeline(&spec).unwrap();
        validate_trace(&spec, &t).unwrap();
        prop_assert_eq!(&t, &simulate_pipeline(&spec).unwrap());
        let b = bubble_ratio(&t).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn makespan_lower_bounds(spec in spec_strategy()) {
        let t = simulate_pipeline(&spec).unwrap();
        let per_device = (spec.rounds * spec.microbatches) as f64 * (spec.t_f + spec.t_b);
        let chain = (spec.stages * spec.rounds) as f64 * (spec.t_f + spec.t_b);
        prop_assert!(t.makespan >= per_device.max(chain) - 1e-9);
    }

    #[test]
    fn fill_drain_matches_recurrence(spec in spec_strategy()) {
        let spec = PipelineSpec { rounds: 1, ..spec };
        let t = simulate_pipeline(&spec).unwrap();
        let want = fill_drain_makespan(spec.stages, spec.microbatches, spec.t_f, spec.t_b, spec.latency);
        prop_assert!((t.makespan - want).abs() < 1e-9);
    }

    #[test]
    fn circular_no_worse_with_uniform_costs(s in 1usize..6, m in 1usize..10, r in 2usize..4) {
        let one = bubble_ratio(&simulate_pipeline(&PipelineSpec::uniform(s, m, 1)).unwrap()).unwrap();
        let many = bubble_ratio(&simulate_pipeline(&PipelineSpec::uniform(s, m, r)).unwrap()).unwrap();
        prop_assert!(many <= one + 1e-12, "S={} M={} R={}: {} vs {}", s, m, r, many, one);
    }
}
