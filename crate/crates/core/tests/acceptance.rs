//! One line per primary acceptance criterion. Criteria run concurrently;
//! lines are written straight to stderr so they survive output capture.

use std::io::Write;
use std::time::Instant;

use hybridlab::config::preset;
use hybridlab::cost::{cost_report, prose_checks, table2_checks, GoldenCheck, GOLDEN_CTX, GOLDEN_TOKENS};
use hybridlab::harness::eval::{niah_eval, NiahGrid};
use hybridlab::harness::tasks::NeedleSource;
use hybridlab::harness::train::{accuracy, train};
use hybridlab::harness::{CopyTask, DataSource, NeedleTask, TrainConfig};
use hybridlab::model::Model;
use hybridlab::verify::{run_suite, VerifyOptions};
use hybridlab::Rng;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
    budget: f64,
}

fn golden(checks: &[GoldenCheck]) -> (bool, String) {
    let detail = checks.iter().map(|c| format!("{} {:.4e}", c.preset, c.got)).collect::<Vec<_>>().join(", ");
    let bad: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| format!("{} {}", c.preset, c.quantity)).collect();
    if bad.is_empty() {
        (true, detail)
    } else {
        (false, format!("drift in {}; {detail}", bad.join(", ")))
    }
}

fn cost_cache() -> (bool, String) {
    let checks: Vec<GoldenCheck> = table2_checks().unwrap().into_iter().filter(|c| c.quantity == "cache_mib").collect();
    let p = preset("llama-1b").unwrap();
    let bytes = cost_report("llama-1b", &p.config, &p.layout, GOLDEN_CTX, GOLDEN_TOKENS).unwrap().cache_bytes;
    let (ok, detail) = golden(&checks);
    (ok && bytes == 268_435_456 && checks.len() == 5, format!("llama {bytes} bytes; MiB: {detail}"))
}

fn cost_flops() -> (bool, String) {
    let checks: Vec<GoldenCheck> = table2_checks().unwrap().into_iter().filter(|c| c.quantity == "train_flops").collect();
    let (ok, detail) = golden(&checks);
    (ok && checks.len() == 5, detail)
}

fn prose() -> (bool, String) {
    let checks = prose_checks().unwrap();
    let detail = checks.iter().map(|c| format!("{} {:.4}", c.quantity, c.got)).collect::<Vec<_>>().join(", ");
    (checks.len() == 4 && checks.iter().all(GoldenCheck::passed), detail)
}

fn suite(name: &str) -> (bool, String) {
    match run_suite(name, &VerifyOptions::default()) {
        Ok(r) => {
            let worst = r.worst.map_or(String::new(), |w| format!(", worst {w:.2e}"));
            let fails = r.failures.first().map_or(String::new(), |f| format!(", first failure: {f}"));
            (r.passed(), format!("{} properties{worst}{fails}", r.properties))
        }
        Err(e) => (false, e.to_string()),
    }
}

fn toy_training() -> (bool, String) {
    // copy task on the two-layer intra-hybrid
    let p = preset("toy-intra").unwrap();
    let mut m = Model::new(&p.config, &p.layout, 0).unwrap();
    let mut copy = CopyTask::new(32, 64).unwrap();
    let cfg = TrainConfig { steps: 600, ..TrainConfig::default() };
    let copy_acc = train(&mut m, &mut copy, &cfg).and_then(|_| {
        let held_out = copy.next_batch(&mut Rng::derive(0, 99), 64)?;
        accuracy(&m, &held_out)
    });
    // 500 steps of every layout preset at lr 1e-3
    let presets = ["toy-llama", "toy-swa", "toy-mamba", "toy-inter", "toy-intra"];
    let runs: Vec<Result<f64, String>> = std::thread::scope(|s| {
        let hs: Vec<_> = presets
            .iter()
            .map(|name| {
                s.spawn(move || {
                    let p = preset(name).map_err(|e| e.to_string())?;
                    let mut m = Model::new(&p.config, &p.layout, 1).map_err(|e| e.to_string())?;
                    let cfg = TrainConfig { steps: 500, peak_lr: 1e-3, ..TrainConfig::default() };
                    let trace = train(&mut m, &mut CopyTask::new(32, 64).unwrap(), &cfg).map_err(|e| e.to_string())?;
                    match trace.iter().find(|r| !r.loss.is_finite()) {
                        Some(r) => Err(format!("non-finite loss at step {}", r.step)),
                        None if trace.len() == 500 => Ok(trace[499].loss),
                        None => Err(format!("{} steps", trace.len())),
                    }
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut ok = true;
    let mut detail = match &copy_acc {
        Ok(a) => {
            ok &= *a >= 0.95;
            format!("copy accuracy {a:.4} after 600 steps")
        }
        Err(e) => {
            ok = false;
            format!("copy run failed: {e}")
        }
    };
    for (name, r) in presets.iter().zip(&runs) {
        match r {
            Ok(loss) => detail.push_str(&format!("; {name} final loss {loss:.3}")),
            Err(e) => {
                ok = false;
                detail.push_str(&format!("; {name} {e}"));
            }
        }
    }
    (ok, detail)
}

fn niah() -> (bool, String) {
    let p = preset("toy-intra").unwrap();
    let mut m = Model::new(&p.config, &p.layout, 0).unwrap();
    let mut src = NeedleSource(NeedleTask::new(32, 64, 0.0, 0));
    let cfg = TrainConfig { steps: 600, ..TrainConfig::default() };
    if let Err(e) = train(&mut m, &mut src, &cfg) {
        return (false, e.to_string());
    }
    let grid = niah_eval(&m, &[0.0, 0.25, 0.5, 0.75, 1.0], &[32, 64], 50, 7).unwrap();
    let worst = grid.accuracy.iter().flatten().cloned().fold(1.0, f64::min);
    let mean = grid.mean_within(64).unwrap();
    let meta = vec![("preset".to_string(), "toy-intra".to_string()), ("seed".to_string(), "0".to_string())];
    let csv = grid.to_csv(&meta);
    let round_trip = NiahGrid::from_csv(&csv).map(|(g, m2)| g == grid && m2 == meta).unwrap_or(false);
    (
        worst >= 0.9 && round_trip,
        format!("in-distribution mean {mean:.3}, worst cell {worst:.2}, CSV round-trip {round_trip}"),
    )
}

type Criterion = (&'static str, f64, fn() -> (bool, String));

const CRITERIA: [Criterion; 11] = [
    ("cost golden: cache", 1.0, cost_cache),
    ("cost golden: FLOPs", 1.0, cost_flops),
    ("prose claims", 1.0, prose),
    ("SSD scan equivalence", 60.0, || suite("ssm")),
    ("decode equivalence", 60.0, || suite("decode")),
    ("mask and causality", f64::INFINITY, || suite("mask")),
    ("gradient checks", 300.0, || suite("grad")),
    ("layout planner", f64::INFINITY, || suite("layout")),
    ("MoE routing and balance", f64::INFINITY, || suite("moe")),
    ("toy training", 900.0, toy_training),
    ("NIAH mechanics", f64::INFINITY, niah),
];

#[test]
fn primary_acceptance_criteria() {
    let outcomes: Vec<Outcome> = std::thread::scope(|s| {
        let hs: Vec<_> = CRITERIA
            .iter()
            .map(|&(name, budget, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let (passed, detail) = f();
                    Outcome { name, passed, detail, seconds: t.elapsed().as_secs_f64(), budget }
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut err = std::io::stderr().lock();
    writeln!(err).unwrap();
    for o in &outcomes {
        let in_time = o.seconds <= o.budget;
        let status = if o.passed && in_time { "PASS" } else { "FAIL" };
        let budget = if o.budget.is_finite() { format!(" / {}s", o.budget) } else { String::new() };
        let late = if in_time { "" } else { " (over time budget)" };
        writeln!(err, "{status}  {:<24} {:>7.2}s{budget}{late}  {}", o.name, o.seconds, o.detail).unwrap();
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed || o.seconds > o.budget).map(|o| o.name).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
