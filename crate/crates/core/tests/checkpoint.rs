use lemevit::model::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Model, Toggles, VariantSpec};
use lemevit::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor<f32> {
    Tensor::randn(&[3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn round_trip_gives_bit_identical_logits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmvt");
    let spec = VariantSpec::tiny_narrow();
    let model = Model::<f32>::new(spec.clone(), 11).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint::<f32>(spec, &path).unwrap();
    for (id, name, t) in model.store().iter() {
        assert_eq!(t.data(), loaded.store().get(id).data(), "{name}");
    }
    for seed in 0..3 {
        let a = model.forward_classify(&image(seed)).unwrap();
        let b = loaded.forward_classify(&image(seed)).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn f64_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m64.lmvt");
    let model = Model::<f64>::new(VariantSpec::tiny_narrow(), 2).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint::<f64>(VariantSpec::tiny_narrow(), &path).unwrap();
    let x = image(0).cast::<f64>();
    assert_eq!(model.forward_classify(&x).unwrap().data(), loaded.forward_classify(&x).unwrap().data());
    // Stored as f64, so an f32 model refuses it.
    assert!(matches!(load_checkpoint::<f32>(VariantSpec::tiny_narrow(), &path), Err(Error::Format { .. })));
}

#[test]
fn every_truncation_is_rejected() {
    let model = Model::<f32>::new(VariantSpec::tiny_narrow(), 0).unwrap();
    let buf = write_checkpoint(model.store()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut cuts: Vec<usize> = (0..256).collect();
    cuts.extend((0..200).map(|_| rng.gen_range(0..buf.len())));
    cuts.extend(buf.len() - 8..buf.len());
    for cut in cuts {
        match read_checkpoint(&buf[..cut]) {
            Err(Error::Format { offset, msg }) => assert!(offset as usize <= cut, "cut {cut}: offset {offset} ({msg})"),
            other => panic!("cut {cut}: expected a format error, got {other:?}"),
        }
    }
}

#[test]
fn flipped_bytes_are_rejected() {
    let model = Model::<f32>::new(VariantSpec::tiny_narrow(), 0).unwrap();
    let buf = write_checkpoint(model.store()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let mut bad = buf.clone();
        let at = rng.gen_range(0..bad.len());
        bad[at] ^= 1 << rng.gen_range(0..8);
        assert!(matches!(read_checkpoint(&bad), Err(Error::Format { .. })), "flip at {at} accepted");
    }
    let mut extra = buf.clone();
    extra.push(0);
    assert!(read_checkpoint(&extra).is_err());
}

#[test]
fn architecture_mismatches_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lmvt");
    save_checkpoint(&Model::<f32>::new(VariantSpec::tiny_narrow(), 0).unwrap(), &path).unwrap();

    let wrong_classes = VariantSpec::tiny_narrow().with_num_classes(5);
    let err = load_checkpoint::<f32>(wrong_classes, &path).unwrap_err().to_string();
    assert!(err.contains("head.fc") && err.contains("shape"), "{err}");

    let no_pool = VariantSpec::tiny_narrow().with_toggles(Toggles { use_meta_pooling: false, ..Toggles::default() });
    let err = load_checkpoint::<f32>(no_pool, &path).unwrap_err().to_string();
    assert!(err.contains("unexpected tensor head.norm_meta"), "{err}");

    // The reverse direction: a checkpoint lacking a tensor.
    let pooled_less = Model::<f32>::new(VariantSpec::tiny_narrow().with_toggles(Toggles { use_meta_pooling: false, ..Toggles::default() }), 0).unwrap();
    save_checkpoint(&pooled_less, &path).unwrap();
    let err = load_checkpoint::<f32>(VariantSpec::tiny_narrow(), &path).unwrap_err().to_string();
    assert!(err.contains("missing tensor head.norm_meta"), "{err}");
}

#[test]
fn missing_file_is_io_error() {
    let err = load_checkpoint::<f32>(VariantSpec::tiny_narrow(), "/nonexistent/x.lmvt").unwrap_err();
    assert!(matches!(err, Error::Io(_)));
}
