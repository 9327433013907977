//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the summary is always printed; exits nonzero on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ctmc_diffusion::harness::verify::{run_suite, VerifyOptions};

struct Criterion {
    id: u32,
    suite: &'static str,
    title: &'static str,
    budget: Duration,
}

const fn c(id: u32, suite: &'static str, title: &'static str, secs: u64) -> Criterion {
    Criterion { id, suite, title, budget: Duration::from_secs(secs) }
}

const CRITERIA: &[Criterion] = &[
    c(1, "decomposition", "Poisson plus categorical decomposition", 5),
    c(2, "mdlm", "masked-loss equivalence", 5),
    c(3, "loss_family", "loss-family equivalence and gap", 120),
    c(4, "elbo", "ELBO bounds the exact NLL", 120),
    c(5, "forward", "forward consistency", 180),
    c(6, "reverse", "exact reverse recovers the data", 120),
    c(7, "samplers", "sampler convergence", 300),
    c(8, "learning", "training recovers the reverse rates", 300),
    c(9, "self_correction", "self-correction", 120),
    c(10, "gradients", "gradient checks", 60),
    c(11, "determinism", "determinism", 60),
];

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let opts = VerifyOptions::default();
    let mut failures = 0;
    for crit in CRITERIA {
        if !only.is_empty() && !only.iter().any(|o| o == crit.suite || *o == crit.id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = run_suite(crit.suite, &opts);
        let elapsed = start.elapsed();
        let (ok, detail) = match &result {
            Ok(r) => {
                let failed: Vec<String> = r
                    .checks
                    .iter()
                    .filter(|c| !c.passed)
                    .map(|c| format!("{} measured {:?} tol {:e}", c.name, c.measured, c.tolerance))
                    .collect();
                (r.passed, failed.join("; "))
            }
            Err(e) => (false, e.to_string()),
        };
        let in_budget = elapsed <= crit.budget;
        let pass = ok && in_budget;
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {:>2} {:<40} {} ({:.1}s of {}s){}{}",
            crit.id,
            crit.title,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            crit.budget.as_secs(),
            if in_budget { "" } else { " over budget" },
            if detail.is_empty() { String::new() } else { format!(": {detail}") },
        );
        if let Ok(r) = &result {
            for c in &r.checks {
                println!("    {:<36} {:<5} measured {:?} tolerance {:e}", c.name, c.passed, c.measured, c.tolerance);
            }
        }
    }
    if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
