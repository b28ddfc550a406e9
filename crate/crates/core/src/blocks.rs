//! Token-mixing blocks (cross-attention, dual cross-attention, self-attention),
//! conditional positional encoding, the image and meta-token stems, and the
//! downsampling transition.
//!
//! All blocks are pre-norm with residual connections. Image and meta tokens
//! use separate LayerNorms but share one attention projection set and one FFN.

use crate::attention::{AttentionConfig, AttentionParams, Scaling};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Ffn, Init, Linear, Norm};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

pub const CPE_KERNEL: usize = 3;

/// Image tokens `[N, D]` laid out on an `height × width` grid (row-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new<T: Scalar>(g: &Graph<'_, T>, tokens: Var, height: usize, width: usize) -> Result<Self> {
        let shape = g.shape(tokens);
        if shape.len() != 2 || shape[0] != height * width {
            return Err(Error::Contract(format!(
                "token grid {height}x{width} does not match tokens of shape {shape:?}"
            )));
        }
        Ok(Self {
            tokens,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn channels<T: Scalar>(&self, g: &Graph<'_, T>) -> usize {
        g.shape(self.tokens)[1]
    }

    /// `[N, D]` → `[D, H, W]`.
    fn to_map<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let d = self.channels(g);
        let t = g.transpose(self.tokens)?;
        g.reshape(t, &[d, self.height, self.width])
    }

    /// `[D, H, W]` → grid of `[H·W, D]` tokens.
    fn from_map<T: Scalar>(g: &mut Graph<'_, T>, map: Var) -> Result<Self> {
        let &[d, h, w] = g.shape(map) else {
            return Err(Error::shape("from_map", g.shape(map), &[]));
        };
        let flat = g.reshape(map, &[d, h * w])?;
        let tokens = g.transpose(flat)?;
        Ok(Self {
            tokens,
            height: h,
            width: w,
        })
    }
}

fn check_width<T: Scalar>(g: &Graph<'_, T>, v: Var, dim: usize, what: &str) -> Result<()> {
    let s = g.shape(v);
    if s.len() != 2 || s[1] != dim {
        return Err(Error::Config(format!(
            "{what} has shape {s:?}, block width is {dim}"
        )));
    }
    Ok(())
}

/// Shared hyper-parameters of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub dim: usize,
    pub head_dim: usize,
    pub expansion: usize,
    pub use_cpe: bool,
    pub dca_mode: DcaMode,
}

impl BlockConfig {
    pub fn new(dim: usize, head_dim: usize) -> Self {
        Self {
            dim,
            head_dim,
            expansion: 4,
            use_cpe: true,
            dca_mode: DcaMode::Parallel,
        }
    }

    fn attention(&self, scaling: Scaling) -> Result<AttentionConfig> {
        AttentionConfig::new(self.dim, self.head_dim, scaling)
    }
}

/// How the two cross-attentions of a DCA block are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DcaMode {
    /// Both branches read the same block input.
    #[default]
    Parallel,
    /// Image tokens are updated first; the meta branch reads the updated image tokens.
    Sequential,
}

/// Residual depthwise 3×3 convolution over the image grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cpe {
    pub conv: Conv2d,
}

impl Cpe {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, init: &mut Init) -> Result<Self> {
        let conv = Conv2d::new(store, name, dim, dim, CPE_KERNEL, 1, CPE_KERNEL / 2, dim, init)?;
        Ok(Self { conv })
    }

    pub fn num_params(dim: usize) -> usize {
        Conv2d::num_params(dim, dim, CPE_KERNEL, dim)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: TokenGrid) -> Result<TokenGrid> {
        let n = g.shape(grid.tokens)[0];
        if n != grid.height * grid.width {
            return Err(Error::Contract(format!(
                "cpe: {n} tokens on a {}x{} grid",
                grid.height, grid.width
            )));
        }
        if grid.height < 2 || grid.width < 2 {
            return Err(Error::Contract(format!(
                "cpe needs a grid at least 2 wide, got {}x{}",
                grid.height, grid.width
            )));
        }
        let map = grid.to_map(g)?;
        let y = self.conv.forward(g, map)?;
        let pos = TokenGrid::from_map(g, y)?;
        let tokens = g.add(grid.tokens, pos.tokens)?;
        Ok(TokenGrid { tokens, ..grid })
    }
}

/// Output of a block: updated streams and, for blocks with a meta-as-query
/// branch, its attention weights `[H, M, N]`.
#[derive(Debug, Clone, Copy)]
pub struct BlockOutput {
    pub grid: TokenGrid,
    pub meta: Var,
    pub meta_attention: Option<Var>,
}

/// Cross-attention block: meta tokens query image tokens; image tokens pass
/// through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaBlock {
    pub cfg: BlockConfig,
    pub norm_meta: Norm,
    pub norm_image: Norm,
    pub attn: AttentionParams,
    pub norm_ffn: Norm,
    pub ffn: Ffn,
}

impl CaBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: BlockConfig, init: &mut Init) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            cfg,
            norm_meta: Norm::new(store, &format!("{name}.norm_meta"), d)?,
            norm_image: Norm::new(store, &format!("{name}.norm_image"), d)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), cfg.attention(Scaling::EntropyInvariant)?, init)?,
            norm_ffn: Norm::new(store, &format!("{name}.norm_ffn"), d)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, cfg.expansion, init)?,
        })
    }

    pub fn num_params(dim: usize, expansion: usize) -> usize {
        3 * Norm::num_params(dim) + AttentionParams::num_params(dim) + Ffn::num_params(dim, expansion)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: TokenGrid, meta: Var) -> Result<BlockOutput> {
        check_width(g, grid.tokens, self.cfg.dim, "image tokens")?;
        check_width(g, meta, self.cfg.dim, "meta tokens")?;
        let mq = self.norm_meta.forward(g, meta)?;
        let xkv = self.norm_image.forward(g, grid.tokens)?;
        let (att, weights) = self.attn.forward(g, mq, xkv, xkv)?;
        let meta = g.add(meta, att)?;
        let h = self.norm_ffn.forward(g, meta)?;
        let h = self.ffn.forward(g, h)?;
        let meta = g.add(meta, h)?;
        Ok(BlockOutput {
            grid,
            meta,
            meta_attention: Some(weights),
        })
    }
}

/// Norms, attention and FFN layout shared by the DCA and SA blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoStreamParams {
    pub cpe: Option<Cpe>,
    pub norm_image: Norm,
    pub norm_meta: Norm,
    pub attn: AttentionParams,
    pub norm_ffn_image: Norm,
    pub norm_ffn_meta: Norm,
    pub ffn: Ffn,
}

impl TwoStreamParams {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: BlockConfig,
        scaling: Scaling,
        init: &mut Init,
    ) -> Result<Self> {
        let d = cfg.dim;
        let cpe = if cfg.use_cpe {
            Some(Cpe::new(store, &format!("{name}.cpe"), d, init)?)
        } else {
            None
        };
        Ok(Self {
            cpe,
            norm_image: Norm::new(store, &format!("{name}.norm_image"), d)?,
            norm_meta: Norm::new(store, &format!("{name}.norm_meta"), d)?,
            attn: AttentionParams::new(store, &format!("{name}.attn"), cfg.attention(scaling)?, init)?,
            norm_ffn_image: Norm::new(store, &format!("{name}.norm_ffn_image"), d)?,
            norm_ffn_meta: Norm::new(store, &format!("{name}.norm_ffn_meta"), d)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, cfg.expansion, init)?,
        })
    }

    fn num_params(dim: usize, expansion: usize, use_cpe: bool) -> usize {
        let cpe = if use_cpe { Cpe::num_params(dim) } else { 0 };
        cpe + 4 * Norm::num_params(dim) + AttentionParams::num_params(dim) + Ffn::num_params(dim, expansion)
    }

    fn enter<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: TokenGrid, meta: Var, dim: usize) -> Result<TokenGrid> {
        check_width(g, grid.tokens, dim, "image tokens")?;
        check_width(g, meta, dim, "meta tokens")?;
        match &self.cpe {
            Some(cpe) => cpe.forward(g, grid),
            None => Ok(grid),
        }
    }

    fn ffn_residual<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, norm: &Norm) -> Result<Var> {
        let h = norm.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }
}

/// Dual cross-attention block: image tokens query meta tokens and meta tokens
/// query image tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DcaBlock {
    pub cfg: BlockConfig,
    pub p: TwoStreamParams,
}

impl DcaBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: BlockConfig, init: &mut Init) -> Result<Self> {
        Ok(Self {
            cfg,
            p: TwoStreamParams::new(store, name, cfg, Scaling::EntropyInvariant, init)?,
        })
    }

    pub fn num_params(dim: usize, expansion: usize, use_cpe: bool) -> usize {
        TwoStreamParams::num_params(dim, expansion, use_cpe)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: TokenGrid, meta: Var) -> Result<BlockOutput> {
        let p = &self.p;
        let grid = p.enter(g, grid, meta, self.cfg.dim)?;
        let xn = p.norm_image.forward(g, grid.tokens)?;
        let mn = p.norm_meta.forward(g, meta)?;
        let (x, m, weights) = match self.cfg.dca_mode {
            DcaMode::Parallel => {
                let px = p.attn.project(g, xn, true, true)?;
                let pm = p.attn.project(g, mn, true, true)?;
                let to_image = p.attn.attend(g, &px, &pm)?;
                let to_meta = p.attn.attend(g, &pm, &px)?;
                let dx = p.attn.project_out(g, to_image.merged)?;
                let dm = p.attn.project_out(g, to_meta.merged)?;
                (g.add(grid.tokens, dx)?, g.add(meta, dm)?, to_meta.weights)
            }
            DcaMode::Sequential => {
                let (dx, _) = p.attn.forward(g, xn, mn, mn)?;
                let x = g.add(grid.tokens, dx)?;
                let xn = p.norm_image.forward(g, x)?;
                let (dm, w) = p.attn.forward(g, mn, xn, xn)?;
                (x, g.add(meta, dm)?, w)
            }
        };
        let x = p.ffn_residual(g, x, &p.norm_ffn_image)?;
        let m = p.ffn_residual(g, m, &p.norm_ffn_meta)?;
        Ok(BlockOutput {
            grid: TokenGrid { tokens: x, ..grid },
            meta: m,
            meta_attention: Some(weights),
        })
    }
}

/// Standard attention block: each stream attends to itself only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaBlock {
    pub cfg: BlockConfig,
    pub p: TwoStreamParams,
}

impl SaBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: BlockConfig, init: &mut Init) -> Result<Self> {
        Ok(Self {
            cfg,
            p: TwoStreamParams::new(store, name, cfg, Scaling::Standard, init)?,
        })
    }

    pub fn num_params(dim: usize, expansion: usize, use_cpe: bool) -> usize {
        TwoStreamParams::num_params(dim, expansion, use_cpe)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: TokenGrid, meta: Var) -> Result<BlockOutput> {
        let p = &self.p;
        let grid = p.enter(g, grid, meta, self.cfg.dim)?;
        let xn = p.norm_image.forward(g, grid.tokens)?;
        let (dx, _) = p.attn.forward(g, xn, xn, xn)?;
        let x = g.add(grid.tokens, dx)?;
        let x = p.ffn_residual(g, x, &p.norm_ffn_image)?;

        let mn = p.norm_meta.forward(g, meta)?;
        let (dm, _) = p.attn.forward(g, mn, mn, mn)?;
        let m = g.add(meta, dm)?;
        let m = p.ffn_residual(g, m, &p.norm_ffn_meta)?;
        Ok(BlockOutput {
            grid: TokenGrid { tokens: x, ..grid },
            meta: m,
            meta_attention: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Ca,
    Dca,
    Sa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Ca(CaBlock),
    Dca(DcaBlock),
    Sa(SaBlock),
}

impl Block {
    pub fn new<T: Scalar>(
        kind: BlockKind,
        store: &mut ParamStore<T>,
        name: &str,
        cfg: BlockConfig,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(match kind {
            BlockKind::Ca => Block::Ca(CaBlock::new(store, name, cfg, init)?),
            BlockKind::Dca => Block::Dca(DcaBlock::new(store, name, cfg, init)?),
            BlockKind::Sa => Block::Sa(SaBlock::new(store, name, cfg, init)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Ca(_) => BlockKind::Ca,
            Block::Dca(_) => BlockKind::Dca,
            Block::Sa(_) => BlockKind::Sa,
        }
    }

    pub fn num_params(kind: BlockKind, dim: usize, expansion: usize, use_cpe: bool) -> usize {
        match kind {
            BlockKind::Ca => CaBlock::num_params(dim, expansion),
            BlockKind::Dca => DcaBlock::num_params(dim, expansion, use_cpe),
            BlockKind::Sa => SaBlock::num_params(dim, expansion, use_cpe),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: TokenGrid, meta: Var) -> Result<BlockOutput> {
        match self {
            Block::Ca(b) => b.forward(g, grid, meta),
            Block::Dca(b) => b.forward(g, grid, meta),
            Block::Sa(b) => b.forward(g, grid, meta),
        }
    }
}

/// Overlapping patch embedding: two stride-2 3×3 convolutions, each followed
/// by GELU, turning `[3, H, W]` into an `H/4 × W/4` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageStem {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ImageStem {
    pub fn hidden_channels(d1: usize) -> usize {
        (d1 / 2).max(1)
    }

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_channels: usize, d1: usize, init: &mut Init) -> Result<Self> {
        let mid = Self::hidden_channels(d1);
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_channels, mid, 3, 2, 1, 1, init)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), mid, d1, 3, 2, 1, 1, init)?,
        })
    }

    pub fn num_params(in_channels: usize, d1: usize) -> usize {
        let mid = Self::hidden_channels(d1);
        Conv2d::num_params(in_channels, mid, 3, 1) + Conv2d::num_params(mid, d1, 3, 1)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<TokenGrid> {
        let &[c, h, w] = g.shape(img) else {
            return Err(Error::Input(format!("stem expects [C, H, W], got {:?}", g.shape(img))));
        };
        if c != self.conv1.in_channels {
            return Err(Error::Input(format!("stem expects {} channels, got {c}", self.conv1.in_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Input(format!("image {h}x{w} is not divisible by 4")));
        }
        let y = self.conv1.forward(g, img)?;
        let y = g.gelu(y);
        let y = self.conv2.forward(g, y)?;
        let y = g.gelu(y);
        TokenGrid::from_map(g, y)
    }
}

/// Two-layer MLP lifting the initial meta tokens from `D0` to `D1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetaStem {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MetaStem {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d0: usize, d1: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d0, d1, init)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d1, d1, init)?,
        })
    }

    pub fn num_params(d0: usize, d1: usize) -> usize {
        Linear::num_params(d0, d1) + Linear::num_params(d1, d1)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, meta: Var) -> Result<Var> {
        check_width(g, meta, self.fc1.in_dim, "initial meta tokens")?;
        let h = self.fc1.forward(g, meta)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Stage transition: a stride-2 3×3 convolution on the image grid and a
/// linear widening of the meta tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Downsample {
    pub conv: Conv2d,
    pub meta_proj: Linear,
}

impl Downsample {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), d_in, d_out, 3, 2, 1, 1, init)?,
            meta_proj: Linear::new(store, &format!("{name}.meta_proj"), d_in, d_out, init)?,
        })
    }

    pub fn num_params(d_in: usize, d_out: usize) -> usize {
        Conv2d::num_params(d_in, d_out, 3, 1) + Linear::num_params(d_in, d_out)
    }

    pub fn forward_grid<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: TokenGrid) -> Result<TokenGrid> {
        if grid.height < 2 || grid.width < 2 {
            return Err(Error::Input(format!(
                "cannot downsample a {}x{} grid",
                grid.height, grid.width
            )));
        }
        check_width(g, grid.tokens, self.conv.in_channels, "image tokens")?;
        let map = grid.to_map(g)?;
        let y = self.conv.forward(g, map)?;
        TokenGrid::from_map(g, y)
    }

    pub fn forward_meta<T: Scalar>(&self, g: &mut Graph<'_, T>, meta: Var) -> Result<Var> {
        check_width(g, meta, self.meta_proj.in_dim, "meta tokens")?;
        self.meta_proj.forward(g, meta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn stem_shapes() {
        let mut store = ParamStore::<f32>::new();
        let stem = ImageStem::new(&mut store, "stem", 3, 64, &mut Init::new(0)).unwrap();
        let mut g = Graph::inference(&store);
        let img = g.constant(Tensor::zeros(&[3, 64, 64]));
        let grid = stem.forward(&mut g, img).unwrap();
        assert_eq!((grid.height, grid.width), (16, 16));
        assert_eq!(g.shape(grid.tokens), &[256, 64]);
        let bad = g.constant(Tensor::zeros(&[3, 30, 32]));
        assert!(matches!(stem.forward(&mut g, bad), Err(Error::Input(_))));
    }

    #[test]
    fn stem_at_224_gives_3136_tokens() {
        let mut store = ParamStore::<f32>::new();
        let stem = ImageStem::new(&mut store, "stem", 3, 64, &mut Init::new(0)).unwrap();
        let mut g = Graph::inference(&store);
        let img = g.constant(Tensor::zeros(&[3, 224, 224]));
        let grid = stem.forward(&mut g, img).unwrap();
        assert_eq!(g.shape(grid.tokens), &[3136, 64]);
    }

    #[test]
    fn zero_stem_gives_zero_tokens() {
        let mut store = ParamStore::<f32>::new();
        let stem = ImageStem::new(&mut store, "stem", 3, 8, &mut Init::new(0)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::inference(&store);
        let img = g.constant(Tensor::zeros(&[3, 8, 8]));
        let grid = stem.forward(&mut g, img).unwrap();
        assert!(g.value(grid.tokens).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn meta_stem_examples() {
        let mut store = ParamStore::<f64>::new();
        let stem = MetaStem::new(&mut store, "ms", 64, 64, &mut Init::new(1)).unwrap();
        let m0 = rand_t(&[16, 64], 2);
        {
            let mut g = Graph::inference(&store);
            let m = g.constant(m0.clone());
            let out = stem.forward(&mut g, m).unwrap();
            assert_eq!(g.shape(out), &[16, 64]);
        }
        store.set(stem.fc1.weight, Tensor::eye(64)).unwrap();
        store.set(stem.fc2.weight, Tensor::eye(64)).unwrap();
        let mut g = Graph::inference(&store);
        let m = g.constant(m0.clone());
        let out = stem.forward(&mut g, m).unwrap();
        let want = crate::tensor::gelu(&m0);
        assert!(g.value(out).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn meta_stem_zero_weights_broadcasts_bias() {
        let mut store = ParamStore::<f64>::new();
        let stem = MetaStem::new(&mut store, "ms", 4, 3, &mut Init::new(1)).unwrap();
        store.set(stem.fc1.weight, Tensor::zeros(&[4, 3])).unwrap();
        store.set(stem.fc2.weight, Tensor::zeros(&[3, 3])).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        store.set(stem.fc2.bias, bias.clone()).unwrap();
        let mut g = Graph::inference(&store);
        let m = g.constant(rand_t(&[5, 4], 0));
        let out = stem.forward(&mut g, m).unwrap();
        for row in g.value(out).data().chunks(3) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn downsample_halves_grid_and_widens() {
        let mut store = ParamStore::<f32>::new();
        let ds = Downsample::new(&mut store, "ds", 64, 128, &mut Init::new(0)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[56 * 56, 64]));
        let grid = TokenGrid::new(&g, x, 56, 56).unwrap();
        let out = ds.forward_grid(&mut g, grid).unwrap();
        assert_eq!((out.height, out.width), (28, 28));
        assert_eq!(g.shape(out.tokens), &[784, 128]);

        let x = g.constant(Tensor::zeros(&[7 * 5, 64]));
        let grid = TokenGrid::new(&g, x, 7, 5).unwrap();
        let out = ds.forward_grid(&mut g, grid).unwrap();
        assert_eq!((out.height, out.width), (4, 3));

        let x = g.constant(Tensor::zeros(&[1, 64]));
        let grid = TokenGrid::new(&g, x, 1, 1).unwrap();
        assert!(matches!(ds.forward_grid(&mut g, grid), Err(Error::Input(_))));
    }

    #[test]
    fn downsample_of_constant_input_with_centre_tap_is_constant() {
        // Weight only on the centre tap, so padding never enters the window.
        let mut store = ParamStore::<f64>::new();
        let ds = Downsample::new(&mut store, "ds", 2, 2, &mut Init::new(0)).unwrap();
        let mut w = Tensor::<f64>::zeros(&[2, 2, 3, 3]);
        for co in 0..2 {
            for ci in 0..2 {
                w.data_mut()[((co * 2 + ci) * 3 + 1) * 3 + 1] = 0.5;
            }
        }
        store.set(ds.conv.weight, w).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::full(&[64, 2], 3.0));
        let grid = TokenGrid::new(&g, x, 8, 8).unwrap();
        let out = ds.forward_grid(&mut g, grid).unwrap();
        assert_eq!((out.height, out.width), (4, 4));
        assert!(g.value(out.tokens).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn cpe_zero_weights_is_identity_and_rejects_thin_grids() {
        let mut store = ParamStore::<f64>::new();
        let cpe = Cpe::new(&mut store, "cpe", 4, &mut Init::new(0)).unwrap();
        store.set(cpe.conv.weight, Tensor::zeros(&[4, 1, 3, 3])).unwrap();
        let mut g = Graph::inference(&store);
        let xt = rand_t(&[12, 4], 9);
        let x = g.constant(xt.clone());
        let grid = TokenGrid::new(&g, x, 3, 4).unwrap();
        let out = cpe.forward(&mut g, grid).unwrap();
        assert_eq!(g.value(out.tokens), &xt);

        let x = g.constant(rand_t(&[4, 4], 1));
        let thin = TokenGrid::new(&g, x, 1, 4).unwrap();
        assert!(matches!(cpe.forward(&mut g, thin), Err(Error::Contract(_))));
        let bogus = TokenGrid { tokens: x, height: 3, width: 3 };
        assert!(matches!(cpe.forward(&mut g, bogus), Err(Error::Contract(_))));
    }

    #[test]
    fn cpe_is_position_sensitive() {
        let mut store = ParamStore::<f64>::new();
        let cpe = Cpe::new(&mut store, "cpe", 3, &mut Init::new(4)).unwrap();
        let xt = rand_t(&[16, 3], 5);
        let swap = [1, 0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15];
        let mut g = Graph::inference(&store);
        let x = g.constant(xt.clone());
        let grid = TokenGrid::new(&g, x, 4, 4).unwrap();
        let a = cpe.forward(&mut g, grid).unwrap();
        let xp = g.constant(xt.gather_rows(&swap).unwrap());
        let grid = TokenGrid::new(&g, xp, 4, 4).unwrap();
        let b = cpe.forward(&mut g, grid).unwrap();
        let a_perm = g.value(a.tokens).gather_rows(&swap).unwrap();
        assert!(a_perm.max_abs_diff(g.value(b.tokens)).unwrap() > 1e-6);
    }

    #[test]
    fn width_mismatch_is_configuration_error() {
        let mut store = ParamStore::<f32>::new();
        let cfg = BlockConfig::new(8, 4);
        let b = DcaBlock::new(&mut store, "b", cfg, &mut Init::new(0)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[16, 8]));
        let m = g.constant(Tensor::zeros(&[4, 6]));
        let grid = TokenGrid::new(&g, x, 4, 4).unwrap();
        assert!(matches!(b.forward(&mut g, grid, m), Err(Error::Config(_))));
    }

    #[test]
    fn dca_preserves_shapes_at_stage_one_scale() {
        let mut store = ParamStore::<f32>::new();
        let b = DcaBlock::new(&mut store, "b", BlockConfig::new(64, 32), &mut Init::new(0)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::randn(&[3136, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let m = g.constant(Tensor::randn(&[16, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let grid = TokenGrid::new(&g, x, 56, 56).unwrap();
        let out = b.forward(&mut g, grid, m).unwrap();
        assert_eq!(g.shape(out.grid.tokens), &[3136, 64]);
        assert_eq!(g.shape(out.meta), &[16, 64]);
        assert_eq!(g.shape(out.meta_attention.unwrap()), &[2, 16, 3136]);
        assert!(g.value(out.grid.tokens).is_finite());
    }
}
