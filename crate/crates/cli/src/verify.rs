use std::process::ExitCode;

use anyhow::Result;
use clap::Args;
use hybridlab::verify::{run_suite, Chaos, VerifyOptions, SUITES};

#[derive(Args)]
pub struct VerifyArgs {
    /// Suites to run (ssm, decode, grad, mask, layout, moe, cost); all by default.
    #[arg(long = "suite", value_delimiter = ',')]
    suites: Vec<String>,
    /// Deliberately corrupt the values under test: none or flip-sign.
    #[arg(long, default_value = "none")]
    chaos: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random configurations in the scan suite.
    #[arg(long, default_value_t = 200)]
    ssm_cases: usize,
    /// Decoded positions per model in the decode suite.
    #[arg(long, default_value_t = 128)]
    decode_steps: usize,
}

pub fn run(a: VerifyArgs) -> Result<ExitCode> {
    let chaos: Chaos = a.chaos.parse()?;
    let opts = VerifyOptions { chaos, seed: a.seed, ssm_cases: a.ssm_cases, decode_steps: a.decode_steps };
    let names: Vec<String> = if a.suites.is_empty() { SUITES.iter().map(|s| s.to_string()).collect() } else { a.suites };
    println!("# seed={} chaos={} ssm_cases={} decode_steps={}", a.seed, a.chaos, a.ssm_cases, a.decode_steps);
    let (mut props, mut failed) = (0, 0);
    for name in &names {
        let r = run_suite(name, &opts)?;
        props += r.properties;
        let worst = r.worst.map_or(String::new(), |w| format!("  worst {w:.2e}"));
        println!(
            "{:<7} {}  {:>5} properties{worst}  {:.2}s",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.properties,
            r.seconds
        );
        for f in r.failures.iter().take(5) {
            println!("    {f}");
        }
        if r.failures.len() > 5 {
            println!("    ... {} more", r.failures.len() - 5);
        }
        failed += usize::from(!r.passed());
    }
    println!("{} of {} suites passed, {props} properties checked", names.len() - failed, names.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
