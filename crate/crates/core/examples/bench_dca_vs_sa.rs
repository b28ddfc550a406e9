//! Forward latency of a DCA block against an SA block of the same width.
//!
//! `cargo run --release --example bench_dca_vs_sa -- 3136 16 64`

use lemevit::bench::{bench_block_pair, emit_results, speedup, BenchConfig};

fn main() -> lemevit::Result<()> {
    let arg = |i: usize, default: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let (n, m, d) = (arg(1, 3136), arg(2, 16), arg(3, 64));
    let (dca, sa) = bench_block_pair(n, m, d, 4, &BenchConfig::default())?;
    print!("{}", emit_results(&[dca.clone(), sa.clone()], "table")?);
    println!("speedup (sa/dca median): {:.2}x", speedup(&dca, &sa));
    Ok(())
}
