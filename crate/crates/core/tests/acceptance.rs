//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use visifilter::checks::{
    audit_trace, equivalence_check, invariance_suite, propagation_check, qp_oracle_suite, CheckOutcome,
};
use visifilter::filter::Fallback;
use visifilter::scenario::{wall_inspection_scenario, Mode, Scenario, WallInspectionParams};
use visifilter::sim::{run, Trace};
use visifilter::trace::{trace_csv, Metrics};

fn bundled(name: &str) -> Scenario {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    Scenario::from_json(&std::fs::read_to_string(path).expect("bundled scenario")).expect("bundled scenario parses")
}

struct Gate {
    lines: Vec<(String, bool, String)>,
}

impl Gate {
    fn record(&mut self, id: &str, passed: bool, detail: String) {
        println!("{id:<4} {:<5} {detail}", if passed { "PASS" } else { "FAIL" });
        self.lines.push((id.to_string(), passed, detail));
    }

    fn record_checks(&mut self, id: &str, checks: &[CheckOutcome]) {
        let passed = checks.iter().all(|c| c.passed);
        let detail = checks.iter().map(|c| format!("[{}] {}", c.name, c.detail)).collect::<Vec<_>>().join("; ");
        self.record(id, passed, detail);
    }
}

fn timed(s: &Scenario) -> (Trace, Duration) {
    let t0 = Instant::now();
    let trace = run(s).expect("scenario runs");
    (trace, t0.elapsed())
}

fn main() {
    let mut gate = Gate { lines: Vec::new() };
    let example = bundled("example3.json");
    let w_min = example.filter.w_min;

    // A1
    let (filtered, elapsed) = timed(&example);
    let min_visible = filtered.records.iter().map(|r| r.visible).min().unwrap_or(0);
    let sandwich = filtered.records.iter().filter(|r| r.w_hat < w_min - 1e-6 || r.w_hat > r.w + 1e-6).count();
    gate.record(
        "A1",
        min_visible >= 5 && sandwich == 0 && elapsed <= Duration::from_secs(30),
        format!(
            "{} ticks, min visible {min_visible} (need >= 5), sandwich violations {sandwich}, runtime {:.2} s",
            filtered.records.len(),
            elapsed.as_secs_f64()
        ),
    );

    // A2
    let baseline_scenario = bundled("example3_baseline.json");
    let mut expected = example.clone();
    expected.mode = Mode::Baseline;
    expected.name = baseline_scenario.name.clone();
    let (baseline, _) = timed(&baseline_scenario);
    let baseline_min = baseline.records.iter().map(|r| r.visible).min().unwrap_or(0);
    let deviation = Metrics::from_trace(&filtered).expect("metrics").total_deviation;
    gate.record(
        "A2",
        baseline_scenario == expected && baseline_min < 5 && deviation > 0.0,
        format!("baseline min visible {baseline_min} (need < 5), filtered total deviation {deviation:.4} (need > 0)"),
    );

    // A3 (includes the A8 jump audit over the randomized runs)
    let invariance = invariance_suite(100, 0);
    gate.record_checks("A3", &invariance[..1]);

    let params = WallInspectionParams::default();
    let wall = bundled("wall_inspection.json");
    let builder_match = wall == wall_inspection_scenario(&params);
    let (wall_filtered, wall_elapsed) = timed(&wall);
    let mut wall_base = wall.clone();
    wall_base.mode = Mode::Baseline;
    let (wall_baseline, _) = timed(&wall_base);

    // A4 over the running example, the wall run and ten randomized runs
    let mut passthrough_ticks = 0;
    let mut worst = 0.0f64;
    let mut traces = vec![&filtered, &wall_filtered];
    let extra: Vec<Trace> = (0..10).map(|i| run(&visifilter::checks::random_invariance_scenario(i, 0)).unwrap()).collect();
    traces.extend(extra.iter());
    for t in &traces {
        for r in &t.records {
            if r.active_rows.is_empty() && r.input_active.is_empty() && r.fallback == Fallback::None {
                passthrough_ticks += 1;
                let dv = (&r.v_star - &r.v_ref).amax();
                let da = r.v_lambda.amax().max(r.v_mu.amax());
                worst = worst.max(dv).max(da);
            }
        }
    }
    gate.record(
        "A4",
        passthrough_ticks > 0 && worst <= 1e-9,
        format!("{passthrough_ticks} ticks with an empty active set, worst deviation {worst:.2e}"),
    );

    // A5
    gate.record_checks("A5", &qp_oracle_suite(200, 0));

    // A6
    gate.record_checks("A6", &[equivalence_check(10_000, 1001, 0)]);

    // A7
    gate.record_checks("A7", &[propagation_check(&example, 1000)]);

    // A8
    let a1_jumps = audit_trace(&filtered, w_min);
    let a1_ok = a1_jumps.jump_breaches == 0 && a1_jumps.jump_h1_mismatches == 0 && a1_jumps.jump_decreases == 0;
    let a3_jumps = &invariance[1];
    gate.record(
        "A8",
        a1_ok && a3_jumps.passed,
        format!(
            "running example: {} events, negative rows {}, h1 mismatches {}, h1 decreases {}; randomized: {}",
            a1_jumps.events, a1_jumps.jump_breaches, a1_jumps.jump_h1_mismatches, a1_jumps.jump_decreases, a3_jumps.detail
        ),
    );

    // A9
    let gap = params.gap_interval();
    let in_gap = |q: &nalgebra::DVector<f64>| q[0] >= gap.0 && q[0] <= gap.1;
    let filtered_min = wall_filtered.records.iter().map(|r| r.tracked).min().unwrap_or(0);
    let baseline_gap_min =
        wall_baseline.records.iter().filter(|r| in_gap(&r.q)).map(|r| r.tracked).min().unwrap_or(usize::MAX);
    gate.record(
        "A9",
        builder_match && filtered_min >= params.m as usize && baseline_gap_min < params.m as usize,
        format!(
            "M = {}, filtered min tracked {filtered_min} over the traverse ({:.1} s runtime), baseline min tracked {baseline_gap_min} for x in [{:.1}, {:.1}]",
            params.m,
            wall_elapsed.as_secs_f64(),
            gap.0,
            gap.1
        ),
    );

    // A10
    let first = trace_csv(&filtered).expect("csv");
    let second = trace_csv(&run(&example).expect("rerun")).expect("csv");
    gate.record(
        "A10",
        first.as_bytes() == second.as_bytes(),
        format!("two runs of the running example, {} bytes of trace.csv, identical: {}", first.len(), first == second),
    );

    let failed: Vec<&str> = gate.lines.iter().filter(|l| !l.1).map(|l| l.0.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", gate.lines.len());
    } else {
        println!("acceptance: failed {failed:?}");
        std::process::exit(1);
    }
}
