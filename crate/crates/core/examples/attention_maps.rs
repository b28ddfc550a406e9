//! Dumps the per-meta-token attention maps of a fresh tiny-narrow model for a
//! striped test image, as ASCII shading and as PGM files.
//!
//! `cargo run --release --example attention_maps -- /tmp/maps`

use lemevit::io::encode_pgm16;
use lemevit::model::attention_maps;
use lemevit::{Model, Tensor, VariantSpec};

const SHADES: &[u8] = b" .:-=+*#%@";

fn main() -> lemevit::Result<()> {
    let out_dir = std::env::args().nth(1);
    let model = Model::<f32>::new(VariantSpec::tiny_narrow(), 0)?;
    // Horizontal stripes of period 8.
    let data = (0..3 * 64 * 64).map(|i| if (i / 64 % 64) % 8 < 4 { 1.0 } else { -1.0 }).collect();
    let image = Tensor::from_vec(&[3, 64, 64], data)?;
    let maps = attention_maps(&model.forward(&image, true)?)?;
    for map in maps.iter().take(4) {
        println!("meta token {} ({}x{}):", map.meta_index, map.height, map.width);
        // Stretch min..max so the small contrasts of an untrained model show.
        let lo = map.values.iter().cloned().fold(f64::MAX, f64::min);
        let hi = map.values.iter().cloned().fold(f64::MIN, f64::max);
        let span = (hi - lo).max(f64::EPSILON);
        println!("  min {lo:.5} max {hi:.5}");
        for row in map.values.chunks(map.width) {
            let line: String = row.iter().map(|v| SHADES[(((v - lo) / span * 9.0).round() as usize).min(9)] as char).collect();
            println!("  {line}");
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir)?;
        for map in &maps {
            let path = format!("{dir}/meta_{:02}.pgm", map.meta_index);
            std::fs::write(&path, encode_pgm16(&map.normalized(), map.height, map.width)?)?;
        }
        println!("wrote {} maps to {dir}", maps.len());
    }
    Ok(())
}
