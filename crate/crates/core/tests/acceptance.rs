//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line is printed even when
//! earlier criteria fail. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use offload_core::consensus::consensus;
use offload_core::scheduler::select_max_edge;
use offload_core::sim::compare::Comparison;
use offload_core::sim::config::{flapping_scenario, stress_scenario, ScenarioConfig};
use offload_core::sim::{compare_schemes, run_scenario, MetricsReport, Scheme};
use offload_core::utility::{
    cpu_utility, memory_utility, rssi_utility, sum_over_edges, total_utility, DeviceSnapshot,
    NetworkBounds, NetworkSnapshot, TaskSpec, UtilityTable, Weights,
};
use offload_core::{EdgeId, RobotId};

const UTILITY_TOL: f64 = 1e-12;
const UTILITY_BUDGET: Duration = Duration::from_secs(1);
const ORACLE_INSTANCES: usize = 10_000;
const ORACLE_MAX_ROBOTS: usize = 10;
const ORACLE_MAX_EDGES: usize = 10;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
/// Utility gap between the two flapping edges under CPU-only weights.
const FLAP_AMPLITUDE: f64 = 3.0;
const FLAP_MIN_REDUCTION: f64 = 0.5;
/// Iterations allowed before the flapping scenario counts as stabilized.
const FLAP_SETTLE_ITERATIONS: u64 = 1;
const FLAP_BUDGET: Duration = Duration::from_secs(10);
const LATENCY_MIN_IMPROVEMENT: f64 = 0.10;
const STRESS_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const STRESS_BUDGET: Duration = Duration::from_secs(300);

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn report(out: &Outcome) {
    println!(
        "{} {:<28} {:>8.3}s  {}",
        if out.pass { "PASS" } else { "FAIL" },
        out.name,
        out.elapsed.as_secs_f64(),
        out.detail
    );
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= UTILITY_TOL
}

fn utility_suite() -> (bool, String) {
    let dev = |cpu_max, cpu_used, mem_max, mem_used| DeviceSnapshot {
        edge_id: "e1".into(),
        t: 0.0,
        cpu_max,
        cpu_used,
        mem_max,
        mem_used,
    };
    let task = |theta| TaskSpec {
        task_id: "t".into(),
        mem_footprint_mb: theta,
        input_rate: 1.0,
        work_per_message_ms: 100.0,
        message_bytes: 1,
    };
    let link = |rssi| NetworkSnapshot {
        robot_id: "r1".into(),
        edge_id: "e1".into(),
        t: 0.0,
        rssi,
    };
    let bounds = NetworkBounds::default();
    let w = |a, b, c| Weights::new(a, b, c).unwrap();
    let table = |pairs: &[(&str, f64)]| -> UtilityTable {
        pairs.iter().map(|&(e, s)| (EdgeId::new(e), s)).collect()
    };
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if !close(got, want) {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    check("eta(100,100)", cpu_utility(&dev(100.0, 100.0, 1.0, 0.0)).unwrap(), 0.0);
    check("eta(100,40)", cpu_utility(&dev(100.0, 40.0, 1.0, 0.0)).unwrap(), 0.6);
    check("sigma(4096,0,0)", memory_utility(&dev(1.0, 0.0, 4096.0, 0.0), &task(0.0)).unwrap(), 1.0);
    check("sigma(4096,512,1536)", memory_utility(&dev(1.0, 0.0, 4096.0, 1536.0), &task(512.0)).unwrap(), 0.5);
    check("sigma(4096,1024,3584)", memory_utility(&dev(1.0, 0.0, 4096.0, 3584.0), &task(1024.0)).unwrap(), 0.0);
    check("kappa(-85)", rssi_utility(&link(-85.0), &bounds).unwrap(), 0.0);
    check("kappa(-30)", rssi_utility(&link(-30.0), &bounds).unwrap(), 1.0);
    check("kappa(-60)", rssi_utility(&link(-60.0), &bounds).unwrap(), 25.0 / 55.0);
    check("total corner", total_utility(0.7, 0.2, 0.9, &w(1.0, 0.0, 0.0)).unwrap(), 0.7);
    check("total mixed", total_utility(0.6, 0.5, 0.5, &w(0.3, 0.3, 0.4)).unwrap(), 0.53);
    let s = sum_over_edges([&table(&[("e1", 0.5)]), &table(&[("e1", 0.3)])]).unwrap();
    check("sum e1", s[&EdgeId::new("e1")], 0.8);
    let s = sum_over_edges([&table(&[("e1", 0.2), ("e2", 0.9)]), &table(&[("e1", 0.9), ("e2", 0.3)])]).unwrap();
    check("sum2 e1", s[&EdgeId::new("e1")], 1.1);
    check("sum2 e2", s[&EdgeId::new("e2")], 1.2);
    // clamping: below the floor and over-committed memory
    check("kappa(-100)", rssi_utility(&link(-100.0), &bounds).unwrap(), 0.0);
    check("kappa(-10)", rssi_utility(&link(-10.0), &bounds).unwrap(), 1.0);
    check("eta(100,150)", cpu_utility(&dev(100.0, 150.0, 1.0, 0.0)).unwrap(), 0.0);
    let rejects = [
        (0.5, 0.6, 0.2),
        (0.5, 0.5, 0.1),
        (0.5 + 2e-9, 0.5, 0.0),
        (-0.1, 0.6, 0.5),
    ];
    for (a, b, c) in rejects {
        if Weights::new(a, b, c).is_ok() {
            failures.push(format!("weights ({a}, {b}, {c}) accepted"));
        }
    }
    if Weights::new(0.5 + 5e-10, 0.5, 0.0).is_err() {
        failures.push("weights within 1e-9 of the simplex rejected".into());
    }
    if NetworkBounds::new(-30.0, -85.0).is_ok() {
        failures.push("inverted bounds accepted".into());
    }
    let n = 16 + rejects.len() + 2;
    if failures.is_empty() {
        (true, format!("{n} checks within {UTILITY_TOL:e}"))
    } else {
        (false, failures.join("; "))
    }
}

/// Exhaustive plurality: counts each candidate by scanning every proposal.
fn brute_plurality(votes: &[usize], edges: usize, previous: usize) -> usize {
    let count = |e: usize| votes.iter().filter(|&&v| v == e).count();
    let top = (0..edges).map(count).max().unwrap();
    if count(previous) == top {
        previous
    } else {
        (0..edges).find(|&e| count(e) == top).unwrap()
    }
}

fn argmax_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11);
    let edge = |i: usize| EdgeId::new(format!("e{i}"));
    let mut mismatches = 0usize;
    for _ in 0..ORACLE_INSTANCES {
        let robots = rng.gen_range(1..=ORACLE_MAX_ROBOTS);
        let edges = rng.gen_range(1..=ORACLE_MAX_EDGES);
        // quarter steps make exact ties frequent
        let tables: Vec<Vec<f64>> = (0..robots)
            .map(|_| (0..edges).map(|_| f64::from(rng.gen_range(0..5u32)) * 0.25).collect())
            .collect();
        let maps: Vec<UtilityTable> = tables
            .iter()
            .map(|t| t.iter().enumerate().map(|(i, &s)| (edge(i), s)).collect())
            .collect();
        let summed = sum_over_edges(&maps).unwrap();
        let got = select_max_edge(&RobotId::new("r0"), 1, &summed).unwrap().max_edge;
        let totals: Vec<f64> = (0..edges).map(|e| tables.iter().map(|t| t[e]).sum()).collect();
        let best = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = (0..edges).find(|&e| totals[e] == best).unwrap();
        if got != edge(want) {
            mismatches += 1;
        }

        let votes: Vec<usize> = (0..robots).map(|_| rng.gen_range(0..edges)).collect();
        let previous = rng.gen_range(0..edges);
        let proposals: BTreeMap<RobotId, EdgeId> = votes
            .iter()
            .enumerate()
            .map(|(r, &e)| (RobotId::new(format!("r{r}")), edge(e)))
            .collect();
        let d = consensus(1, &proposals, Some(&edge(previous)), robots).unwrap();
        let want = brute_plurality(&votes, edges, previous);
        if d.winner != edge(want) || d.switched != (want != previous) {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("{ORACLE_INSTANCES} instances, {mismatches} mismatches"),
    )
}

fn flapping() -> (bool, String, Vec<MetricsReport>) {
    let run = |h: f64| run_scenario(&flapping_scenario(h, FLAP_AMPLITUDE)).unwrap();
    let plain = run(0.0);
    let sticky = run(0.05);
    let reduction = if plain.switch_count == 0 {
        0.0
    } else {
        1.0 - sticky.switch_count as f64 / plain.switch_count as f64
    };
    let mut late_switches = Vec::new();
    let mut runs = vec![plain.clone(), sticky.clone()];
    for h in [0.03, 0.04, 0.05, 0.1, 0.5] {
        let r = run(h);
        let n = r
            .decisions
            .iter()
            .filter(|d| d.iteration > FLAP_SETTLE_ITERATIONS && d.switched)
            .count();
        if n > 0 {
            late_switches.push(format!("h={h}: {n}"));
        }
        runs.push(r);
    }
    let pass = plain.switch_count > 0 && reduction >= FLAP_MIN_REDUCTION && late_switches.is_empty();
    let detail = format!(
        "switches h=0: {}, h=0.05: {} (reduction {:.0}%, need >= {:.0}%); late switches for h>=0.03: {}",
        plain.switch_count,
        sticky.switch_count,
        reduction * 100.0,
        FLAP_MIN_REDUCTION * 100.0,
        if late_switches.is_empty() { "none".into() } else { late_switches.join(", ") }
    );
    (pass, detail, runs)
}

fn determinism(configs: &[ScenarioConfig]) -> (bool, String) {
    let mut differing = Vec::new();
    for cfg in configs {
        let a = run_scenario(cfg).unwrap();
        let b = run_scenario(cfg).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let fa = a.write_to(da.path()).unwrap();
        b.write_to(db.path()).unwrap();
        for path in fa {
            let name = path.file_name().unwrap();
            let same = std::fs::read(&path).unwrap() == std::fs::read(db.path().join(name)).unwrap();
            if !same {
                differing.push(format!("{}/{}:{}", cfg.scheme, cfg.seed, name.to_string_lossy()));
            }
        }
    }
    (
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} configs run twice, all output files byte-identical", configs.len())
        } else {
            differing.join(", ")
        },
    )
}

fn directional(c: &Comparison) -> Vec<(&'static str, bool, String)> {
    let fixed: Vec<_> = c.aggregates.iter().filter(|a| a.scheme.starts_with("fixed_")).collect();
    let both = c.aggregate("dyna_both").unwrap();
    let mem = c.aggregate("dyna_mem").unwrap();

    let worst = fixed.iter().max_by(|a, b| a.mean[0].total_cmp(&b.mean[0])).unwrap();
    let improvement = 1.0 - both.mean[0] / worst.mean[0];
    let a = (
        "reproduction (a) latency",
        improvement >= LATENCY_MIN_IMPROVEMENT,
        format!(
            "dyna_both {:.1}s vs worst fixed {} {:.1}s: {:.1}% lower (need >= {:.0}%)",
            both.mean[0],
            worst.scheme,
            worst.mean[0],
            improvement * 100.0,
            LATENCY_MIN_IMPROVEMENT * 100.0
        ),
    );

    let var_ok = fixed.iter().all(|f| both.mean[2] < f.mean[2]);
    let listed: Vec<String> = fixed.iter().map(|f| format!("{} {:.2}", f.scheme, f.mean[2])).collect();
    let b = (
        "reproduction (b) cpu balance",
        var_ok,
        format!("dyna_both {:.2} < every fixed: {}", both.mean[2], listed.join(", ")),
    );

    let freq_ok = fixed.iter().all(|f| mem.mean[1] >= f.mean[1]);
    let listed: Vec<String> = fixed.iter().map(|f| format!("{} {:.3}", f.scheme, f.mean[1])).collect();
    let c = (
        "reproduction (c) frequency",
        freq_ok,
        format!("dyna_mem {:.3} Hz >= every fixed: {}", mem.mean[1], listed.join(", ")),
    );
    vec![a, b, c]
}

fn main() {
    let mut outcomes = Vec::new();

    let t = Instant::now();
    let (pass, detail) = utility_suite();
    let elapsed = t.elapsed();
    outcomes.push(Outcome {
        name: "utility unit suite",
        pass: pass && elapsed < UTILITY_BUDGET,
        detail: format!("{detail}; budget {UTILITY_BUDGET:?}"),
        elapsed,
    });

    let t = Instant::now();
    let (pass, detail) = argmax_oracle();
    let elapsed = t.elapsed();
    outcomes.push(Outcome {
        name: "argmax oracle",
        pass: pass && elapsed < ORACLE_BUDGET,
        detail: format!("{detail}; budget {ORACLE_BUDGET:?}"),
        elapsed,
    });

    let t = Instant::now();
    let (pass, detail, mut all_runs) = flapping();
    let elapsed = t.elapsed();
    outcomes.push(Outcome {
        name: "hysteresis",
        pass: pass && elapsed < FLAP_BUDGET,
        detail: format!("{detail}; budget {FLAP_BUDGET:?}"),
        elapsed,
    });

    let schemes: Vec<Scheme> = ["fixed_e1", "fixed_e2", "fixed_e3", "dyna_cpu", "dyna_mem", "dyna_both"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();

    let t = Instant::now();
    let mut configs: Vec<ScenarioConfig> =
        schemes.iter().map(|s| stress_scenario().with_scheme(s.clone())).collect();
    configs.push(flapping_scenario(0.0, FLAP_AMPLITUDE));
    let (pass, detail) = determinism(&configs);
    outcomes.push(Outcome {
        name: "determinism",
        pass,
        detail,
        elapsed: t.elapsed(),
    });

    let t = Instant::now();
    let cmp = compare_schemes(&stress_scenario(), &schemes, &STRESS_SEEDS).unwrap();
    let elapsed = t.elapsed();
    for (name, pass, detail) in directional(&cmp) {
        outcomes.push(Outcome {
            name,
            pass: pass && elapsed < STRESS_BUDGET,
            detail: format!("{detail}; {} runs, budget {STRESS_BUDGET:?}", schemes.len() * STRESS_SEEDS.len()),
            elapsed,
        });
    }

    // the comparison keeps only headline numbers; rerun for full logs
    let t = Instant::now();
    for s in &schemes {
        for &seed in &STRESS_SEEDS {
            all_runs.push(run_scenario(&stress_scenario().with_scheme(s.clone()).with_seed(seed)).unwrap());
        }
    }
    let rerun = t.elapsed();

    let t = Instant::now();
    let unbalanced: Vec<String> = all_runs
        .iter()
        .filter(|r| !r.messages.conserved())
        .map(|r| format!("{}/{}: {:?}", r.scheme, r.seed, r.messages))
        .collect();
    let compared_ok = cmp.runs.iter().flatten().all(|r| r.conserved);
    outcomes.push(Outcome {
        name: "conservation",
        pass: unbalanced.is_empty() && compared_ok,
        detail: if unbalanced.is_empty() && compared_ok {
            format!("generated = processed + queued + dropped in all {} runs", all_runs.len())
        } else {
            unbalanced.join("; ")
        },
        elapsed: t.elapsed() + rerun,
    });

    let t = Instant::now();
    let mut disagreements = Vec::new();
    for r in &all_runs {
        let reference = r.decisions_csv();
        for robot in r.executor_logs.keys() {
            if r.executor_csv(robot).as_deref() != Some(reference.as_str()) {
                disagreements.push(format!("{}/{}/{}", r.scheme, r.seed, robot));
            }
        }
    }
    let robots: usize = all_runs.iter().map(|r| r.executor_logs.len()).sum();
    outcomes.push(Outcome {
        name: "consensus agreement",
        pass: disagreements.is_empty(),
        detail: if disagreements.is_empty() {
            format!("{robots} executor logs across {} runs match their run's reference", all_runs.len())
        } else {
            disagreements.join(", ")
        },
        elapsed: t.elapsed(),
    });

    println!();
    for o in &outcomes {
        report(o);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("\n{} passed, {} failed", outcomes.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
