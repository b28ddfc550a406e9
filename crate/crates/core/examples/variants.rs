//! Builds each registered variant and runs one forward pass.
//!
//! `cargo run --release --example variants -- 64`

use std::time::Instant;

use lemevit::{Model, Tensor, VariantSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lemevit::Result<()> {
    let side: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let image = Tensor::<f32>::randn(&[3, side, side], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for name in VariantSpec::NAMES {
        let model = Model::<f32>::new(VariantSpec::by_name(name)?, 0)?;
        let t = Instant::now();
        let out = model.forward(&image, false)?;
        println!(
            "{name:<12} params={:>10} logits={:?} macs={:.3}G  {:.1} ms",
            model.num_params(),
            out.logits.shape(),
            out.macs.total() as f64 / 1e9,
            t.elapsed().as_secs_f64() * 1e3
        );
    }
    Ok(())
}
