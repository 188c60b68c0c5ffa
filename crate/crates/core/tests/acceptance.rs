//! One line per acceptance criterion, plus the harness invariants and the
//! sign-flip mutation. Exits nonzero when any line fails.

use std::process::ExitCode;

use twinbranch::harness::verify::{run_criterion, Check, VerifyOptions};

const CRITERIA: [(u32, &str); 10] = [
    (1, "rank-1 forms match dense oracles"),
    (2, "degenerate factors and pass-through routing"),
    (3, "finite-difference gradient suite"),
    (4, "factored attention and parameter counts"),
    (5, "projection and intrinsics update"),
    (6, "corner loss disentanglement"),
    (7, "PQ, NDS and depth metrics"),
    (8, "loss weighting arithmetic"),
    (9, "toy overfit and co-training"),
    (10, "dr1conv speedup"),
];

fn summarize(checks: &[Check]) -> (bool, String) {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let passed = failed.is_empty() && !checks.is_empty();
    let detail = if failed.is_empty() {
        format!("{} checks", checks.len())
    } else {
        failed.join("; ")
    };
    (passed, detail)
}

fn main() -> ExitCode {
    let opts = VerifyOptions::default();
    let mut all = true;
    for (n, title) in CRITERIA {
        let (ok, detail) = summarize(&run_criterion(n, &opts));
        println!("{} criterion {n:>2}: {title} ({detail})", if ok { "PASS" } else { "FAIL" });
        all &= ok;
    }
    let (ok, detail) = summarize(&run_criterion(0, &opts));
    println!("{} harness invariants ({detail})", if ok { "PASS" } else { "FAIL" });
    all &= ok;

    let flipped = VerifyOptions {
        flip_dr1conv_sign: true,
        ..Default::default()
    };
    let caught = run_criterion(1, &flipped)
        .iter()
        .any(|c| !c.passed && c.name.starts_with("dr1conv"));
    println!(
        "{} mutation: negated dr1conv {} the equivalence check",
        if caught { "PASS" } else { "FAIL" },
        if caught { "fails" } else { "still passes" }
    );
    all &= caught;

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
