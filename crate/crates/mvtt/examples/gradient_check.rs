//! Verify every differentiable operation — and the full model — against
//! central finite differences, printing one line per check.
//!
//! Run with: cargo run --release --example gradient_check

use mvtt::gradcheck::run_suite;

fn main() -> mvtt::Result<()> {
    let start = std::time::Instant::now();
    let checks = run_suite(None)?;
    let mut all_ok = true;
    for check in &checks {
        let status = if check.passed() { "pass" } else { "FAIL" };
        println!(
            "{status}  {:<28} max rel err {:.3e} (tolerance {:.0e})",
            check.name, check.max_rel_err, check.tolerance
        );
        all_ok &= check.passed();
    }
    println!(
        "{} checks in {:.2} s: {}",
        checks.len(),
        start.elapsed().as_secs_f64(),
        if all_ok { "all passed" } else { "FAILURES" }
    );
    if !all_ok {
        std::process::exit(1);
    }
    Ok(())
}
