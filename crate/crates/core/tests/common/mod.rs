//! Helpers shared by the integration tests.
#![allow(dead_code)]

use lemevit::blocks::{Block, BlockConfig, BlockKind, DcaMode, TokenGrid};
use lemevit::gradcheck::randomize;
use lemevit::layers::Init;
use lemevit::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HEAD_DIM: usize = 4;

/// One randomly drawn block configuration.
#[derive(Debug, Clone, Copy)]
pub struct Case {
    pub height: usize,
    pub width: usize,
    pub meta: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Case {
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            height: rng.gen_range(2..6),
            width: rng.gen_range(2..6),
            meta: rng.gen_range(2..7),
            heads: rng.gen_range(1..4),
            seed: rng.gen(),
        }
    }

    pub fn dim(&self) -> usize {
        self.heads * HEAD_DIM
    }

    pub fn n(&self) -> usize {
        self.height * self.width
    }
}

pub struct Built {
    pub block: Block,
    pub store: ParamStore<f64>,
    pub image: Tensor<f64>,
    pub meta: Tensor<f64>,
}

pub fn build(kind: BlockKind, case: &Case, use_cpe: bool, mode: DcaMode) -> Built {
    let mut store = ParamStore::<f64>::new();
    let mut cfg = BlockConfig::new(case.dim(), HEAD_DIM);
    cfg.use_cpe = use_cpe;
    cfg.dca_mode = mode;
    let block = Block::new(kind, &mut store, "b", cfg, &mut Init::new(case.seed)).unwrap();
    // Default init leaves norms at identity and biases at zero; randomise
    // everything so the properties are not trivially satisfied.
    randomize(&mut store, 0.5, case.seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed.wrapping_add(1));
    let image = Tensor::randn(&[case.n(), case.dim()], 1.0, &mut rng);
    let meta = Tensor::randn(&[case.meta, case.dim()], 1.0, &mut rng);
    Built { block, store, image, meta }
}

/// Forward pass returning `(image tokens, meta tokens)`.
pub fn run(b: &Built, case: &Case, image: &Tensor<f64>, meta: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::inference(&b.store);
    let x = g.constant(image.clone());
    let m = g.constant(meta.clone());
    let grid = TokenGrid::new(&g, x, case.height, case.width).unwrap();
    let out = b.block.forward(&mut g, grid, m).unwrap();
    (g.value(out.grid.tokens).clone(), g.value(out.meta).clone())
}

pub fn check_ca_image_passthrough(case: &Case) -> Result<(), String> {
    let b = build(BlockKind::Ca, case, true, DcaMode::Parallel);
    let (img, meta) = run(&b, case, &b.image, &b.meta);
    if img.data() != b.image.data() {
        return Err(format!("{case:?}: CA changed image tokens"));
    }
    if meta.data() == b.meta.data() {
        return Err(format!("{case:?}: CA left meta tokens untouched"));
    }
    Ok(())
}

pub fn check_sa_independence(case: &Case) -> Result<(), String> {
    let b = build(BlockKind::Sa, case, true, DcaMode::Parallel);
    let (img0, meta0) = run(&b, case, &b.image, &b.meta);
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed.wrapping_add(2));
    let meta_p = Tensor::randn(b.meta.shape(), 1.0, &mut rng);
    let image_p = Tensor::randn(b.image.shape(), 1.0, &mut rng);
    let (img1, meta1) = run(&b, case, &b.image, &meta_p);
    if img1.data() != img0.data() {
        return Err(format!("{case:?}: meta perturbation reached the image stream"));
    }
    if meta1.data() == meta0.data() {
        return Err(format!("{case:?}: meta perturbation had no effect on meta output"));
    }
    let (img2, meta2) = run(&b, case, &image_p, &b.meta);
    if meta2.data() != meta0.data() {
        return Err(format!("{case:?}: image perturbation reached the meta stream"));
    }
    if img2.data() == img0.data() {
        return Err(format!("{case:?}: image perturbation had no effect on image output"));
    }
    Ok(())
}

pub fn check_dca_permutation(case: &Case, mode: DcaMode) -> Result<(), String> {
    let b = build(BlockKind::Dca, case, false, mode);
    let (img0, meta0) = run(&b, case, &b.image, &b.meta);
    let mut order: Vec<usize> = (0..case.n()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(case.seed.wrapping_add(3)));
    let permuted = b.image.gather_rows(&order).unwrap();
    let (img1, meta1) = run(&b, case, &permuted, &b.meta);
    let img_err = img0.gather_rows(&order).unwrap().max_abs_diff(&img1).unwrap();
    let meta_err = meta0.max_abs_diff(&meta1).unwrap();
    if img_err > 1e-6 || meta_err > 1e-6 {
        return Err(format!("{case:?} {mode:?}: image err {img_err:e}, meta err {meta_err:e}"));
    }
    Ok(())
}

pub fn check_zero_identity(case: &Case, kind: BlockKind) -> Result<(), String> {
    let mut b = build(kind, case, true, DcaMode::Parallel);
    for (_, t) in b.store.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let (img, meta) = run(&b, case, &b.image, &b.meta);
    if img.data() != b.image.data() || meta.data() != b.meta.data() {
        return Err(format!("{case:?} {kind:?}: zero-weight block is not the identity"));
    }
    Ok(())
}
