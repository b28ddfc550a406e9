//! Saves a model, reloads it, checks the logits match bit for bit, then shows
//! the diagnostic for a damaged file.

use lemevit::model::{load_checkpoint, read_checkpoint, save_checkpoint};
use lemevit::{Model, Tensor, VariantSpec};
use rand::SeedableRng;

fn main() -> lemevit::Result<()> {
    let dir = std::env::temp_dir().join("lemevit-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("tiny-narrow.lmvt");

    let spec = VariantSpec::tiny_narrow();
    let model = Model::<f32>::new(spec.clone(), 7)?;
    save_checkpoint(&model, &path)?;
    let loaded = load_checkpoint::<f32>(spec, &path)?;

    let x = Tensor::randn(&[3, 64, 64], 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
    let a = model.forward_classify(&x)?;
    let b = loaded.forward_classify(&x)?;
    println!("{} parameters, {} bytes on disk", model.num_params(), std::fs::metadata(&path)?.len());
    println!("logits before {:?}\nlogits after  {:?}\nidentical: {}", a.data(), b.data(), a.data() == b.data());

    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    match read_checkpoint(&bytes) {
        Ok(_) => println!("damaged file was accepted"),
        Err(e) => println!("damaged file rejected: {e}"),
    }
    Ok(())
}
