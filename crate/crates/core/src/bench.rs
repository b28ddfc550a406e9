//! Wall-clock forward benchmarks: DCA against SA at one shape, and whole
//! models. Timings use the monotonic clock and are single-threaded unless a
//! model benchmark asks for more threads.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockConfig, BlockKind, TokenGrid};
use crate::complexity::ReportFormat;
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::model::{Model, VariantSpec};
use crate::tensor::{Graph, ParamStore, Tensor};

pub const MIN_ITERS: usize = 30;
pub const MIN_WARMUP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: MIN_WARMUP,
            iters: MIN_ITERS,
            seed: 0,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        if self.iters < MIN_ITERS {
            return Err(Error::Usage(format!("need at least {MIN_ITERS} measured iterations, got {}", self.iters)));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::Usage(format!("need at least {MIN_WARMUP} warmup iterations, got {}", self.warmup)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub case: String,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub warmup: usize,
    pub iters: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub stddev_s: f64,
    /// Items per second over the whole measured window.
    pub throughput: f64,
}

/// Summary statistics of per-iteration latencies.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    (median, mean, var.sqrt())
}

/// Times `f` `cfg.iters` times after `cfg.warmup` untimed calls.
pub fn time_it(cfg: &BenchConfig, items_per_call: usize, mut f: impl FnMut() -> Result<()>) -> Result<(Vec<f64>, f64)> {
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(cfg.iters);
    let start = Instant::now();
    for _ in 0..cfg.iters {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    let total = start.elapsed().as_secs_f64();
    Ok((samples, (cfg.iters * items_per_call) as f64 / total))
}

/// Most nearly square `h × w = n` factorisation with both sides at least 2.
pub fn grid_for(n: usize) -> Result<(usize, usize)> {
    let mut h = (n as f64).sqrt() as usize;
    while h >= 2 {
        if n.is_multiple_of(h) && n / h >= 2 {
            return Ok((h, n / h));
        }
        h -= 1;
    }
    Err(Error::Input(format!("{n} tokens cannot form a grid with both sides at least 2")))
}

fn bench_block(kind: BlockKind, n: usize, m: usize, d: usize, e: usize, cfg: &BenchConfig) -> Result<BenchResult> {
    let (h, w) = grid_for(n)?;
    let mut store = ParamStore::<f32>::new();
    let mut bc = BlockConfig::new(d, crate::attention::DEFAULT_HEAD_DIM.min(d));
    bc.expansion = e;
    let block = Block::new(kind, &mut store, "block", bc, &mut Init::new(cfg.seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 1);
    let x = Tensor::<f32>::randn(&[n, d], 1.0, &mut rng);
    let meta = Tensor::<f32>::randn(&[m, d], 1.0, &mut rng);
    let (samples, throughput) = time_it(cfg, 1, || {
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let mv = g.constant(meta.clone());
        let grid = TokenGrid::new(&g, xv, h, w)?;
        let out = block.forward(&mut g, grid, mv)?;
        black_box(g.value(out.grid.tokens));
        Ok(())
    })?;
    let (median_s, mean_s, stddev_s) = summarize(&samples);
    Ok(BenchResult {
        case: format!("{kind:?}").to_lowercase(),
        n,
        m,
        d,
        warmup: cfg.warmup,
        iters: cfg.iters,
        median_s,
        mean_s,
        stddev_s,
        throughput,
    })
}

/// Forward latency of a DCA block and an SA block of equal shape and seed.
pub fn bench_block_pair(n: usize, m: usize, d: usize, e: usize, cfg: &BenchConfig) -> Result<(BenchResult, BenchResult)> {
    cfg.validate()?;
    Ok((bench_block(BlockKind::Dca, n, m, d, e, cfg)?, bench_block(BlockKind::Sa, n, m, d, e, cfg)?))
}

/// `sa.median / dca.median`; above one means DCA is faster.
pub fn speedup(dca: &BenchResult, sa: &BenchResult) -> f64 {
    sa.median_s / dca.median_s
}

/// Images per second of full forward passes. With `threads > 1` each thread
/// runs its own share of the measured iterations concurrently and latency
/// statistics are per image as seen by one thread.
pub fn bench_model(spec: &VariantSpec, input_hw: (usize, usize), cfg: &BenchConfig, threads: usize) -> Result<BenchResult> {
    cfg.validate()?;
    if threads == 0 {
        return Err(Error::Usage("threads must be at least 1".into()));
    }
    let model = Model::<f32>::new(spec.clone(), cfg.seed)?;
    let image = Tensor::<f32>::randn(&[spec.in_channels, input_hw.0, input_hw.1], 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed + 1));
    model.check_image(&image)?;
    let run = || -> Result<()> {
        black_box(model.forward_classify(&image)?);
        Ok(())
    };
    let (samples, throughput) = if threads == 1 {
        time_it(cfg, 1, run)?
    } else {
        for _ in 0..cfg.warmup {
            run()?;
        }
        let per = cfg.iters.div_ceil(threads);
        let start = Instant::now();
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|_| {
                    s.spawn(|| {
                        (0..per)
                            .map(|_| {
                                let t = Instant::now();
                                run().map(|_| t.elapsed().as_secs_f64())
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench thread panicked")).collect()
        });
        let total = start.elapsed().as_secs_f64();
        let mut samples = Vec::new();
        for p in parts {
            samples.extend(p?);
        }
        let count = samples.len() as f64;
        (samples, count / total)
    };
    let (median_s, mean_s, stddev_s) = summarize(&samples);
    let grids = spec.stage_grids(input_hw.0, input_hw.1)?;
    Ok(BenchResult {
        case: format!("{}@{}x{}", spec.name, input_hw.0, input_hw.1),
        n: grids[0].0 * grids[0].1,
        m: spec.meta_len,
        d: spec.dims[0],
        warmup: cfg.warmup,
        iters: samples.len(),
        median_s,
        mean_s,
        stddev_s,
        throughput,
    })
}

pub fn emit_results(results: &[BenchResult], format: &str) -> Result<String> {
    match format.parse::<ReportFormat>()? {
        ReportFormat::Json => serde_json::to_string_pretty(results).map_err(|e| Error::Input(e.to_string())),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in results {
                w.serialize(r).map_err(crate::io::csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        ReportFormat::Table => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>4} {:>4} {:>6} {:>12} {:>12} {:>12} {:>12}",
                "case", "N", "M", "D", "iters", "median ms", "mean ms", "stddev ms", "items/s"
            );
            for r in results {
                let _ = writeln!(
                    s,
                    "{:<20} {:>6} {:>4} {:>4} {:>6} {:>12.3} {:>12.3} {:>12.3} {:>12.2}",
                    r.case,
                    r.n,
                    r.m,
                    r.d,
                    r.iters,
                    r.median_s * 1e3,
                    r.mean_s * 1e3,
                    r.stddev_s * 1e3,
                    r.throughput
                );
            }
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats() {
        let (med, mean, sd) = summarize(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!((med, mean), (2.5, 4.0));
        assert!((sd - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn grids() {
        assert_eq!(grid_for(3136).unwrap(), (56, 56));
        assert_eq!(grid_for(16).unwrap(), (4, 4));
        assert_eq!(grid_for(12).unwrap(), (3, 4));
        assert!(grid_for(7).is_err());
    }

    #[test]
    fn too_few_iterations() {
        let cfg = BenchConfig { iters: 29, ..BenchConfig::default() };
        assert!(matches!(bench_block_pair(16, 4, 32, 4, &cfg), Err(Error::Usage(_))));
        let cfg = BenchConfig { warmup: 9, ..BenchConfig::default() };
        assert!(matches!(bench_block_pair(16, 4, 32, 4, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn throughput_matches_iterations() {
        let cfg = BenchConfig::default();
        let (dca, sa) = bench_block_pair(16, 4, 32, 4, &cfg).unwrap();
        for r in [&dca, &sa] {
            assert_eq!(r.iters, 30);
            let implied = r.iters as f64 / (r.mean_s * r.iters as f64);
            // Loop overhead outside the timed closure is tiny.
            assert!((r.throughput / implied - 1.0).abs() < 0.05, "{r:?}");
        }
    }
}
