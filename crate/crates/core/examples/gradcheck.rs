//! Runs the finite-difference gradient suite and prints one line per case.

use lemevit::gradcheck::{run_suite, FdConfig};

fn main() -> lemevit::Result<()> {
    let floor = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(FdConfig::default().floor);
    let cfg = FdConfig { floor, ..FdConfig::default() };
    for r in run_suite(&cfg)? {
        println!(
            "{:<16} max_rel_err={:.3e} checked={:<5} worst={} {}",
            r.case,
            r.max_rel_err,
            r.checked,
            r.worst,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
