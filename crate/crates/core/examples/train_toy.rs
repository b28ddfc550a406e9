//! Trains the desk-scale variant on synthetic stripes and checkerboards.
//!
//! `cargo run --release --example train_toy -- 120 1e-4`

use lemevit::trainer::{evaluate, make_synth, train_toy_with, TrainConfig};
use lemevit::{Model, VariantSpec};

fn main() -> lemevit::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(TrainConfig::default().steps);
    let lr = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(TrainConfig::default().lr);
    let cfg = TrainConfig { steps, lr, ..TrainConfig::default() };
    let ds = make_synth(300, 0.1, cfg.seed)?;
    let mut model = Model::<f32>::new(VariantSpec::tiny_narrow(), cfg.seed)?;
    let t = std::time::Instant::now();
    train_toy_with(&mut model, &ds, &cfg, |row| {
        if row.step % 10 == 0 {
            println!("step {:>4}  loss {:.4}  batch acc {:.2}", row.step, row.loss, row.acc);
        }
    })?;
    println!("train accuracy {:.3} after {:.1}s", evaluate(&model, &ds)?, t.elapsed().as_secs_f64());
    Ok(())
}
