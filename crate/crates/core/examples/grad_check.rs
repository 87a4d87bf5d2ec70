//! Finite-difference verification of every differentiable kernel and of both
//! networks end to end, in 64-bit.
//!
//! ```bash
//! cargo run --release --example grad_check
//! ```

use gid::numerics::gradcheck::{kernel_suite, network_suite};

fn main() -> gid::Result<()> {
    let mut reports = kernel_suite(1)?;
    reports.extend(network_suite(1)?);
    for r in &reports {
        println!(
            "{:<28} probes={:<3} max_rel_err={:.2e} tol={:.0e} {}",
            r.name,
            r.probes,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAILED" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(())
}
