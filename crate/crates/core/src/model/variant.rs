use crate::attention::DEFAULT_HEAD_DIM;
use crate::blocks::CPE_KERNEL;
use crate::error::{Error, Result};

pub const DEFAULT_META_LEN: usize = 16;
pub const DEFAULT_META_DIM0: usize = 64;
pub const DEFAULT_EXPANSION: usize = 4;
pub const DEFAULT_NUM_CLASSES: usize = 1000;

/// Structural switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    /// Run the cross-attention stage that initialises meta tokens.
    pub use_ca_stage: bool,
    /// Lift initial meta tokens through the two-layer stem; otherwise they start at `D1`.
    pub use_meta_stem: bool,
    /// Add pooled meta tokens to pooled image tokens before the classifier.
    pub use_meta_pooling: bool,
    /// Run the two DCA branches one after the other instead of in parallel.
    pub dca_sequential: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_ca_stage: true,
            use_meta_stem: true,
            use_meta_pooling: true,
            dca_sequential: false,
        }
    }
}

/// Architecture description of one variant.
///
/// `blocks` holds the CA stage, two DCA stages and two SA stages; `dims` the
/// widths of the four resolution stages (stride 4, 8, 16, 32). The CA stage
/// runs at the first resolution, before the first DCA stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: String,
    pub blocks: [usize; 5],
    pub dims: [usize; 4],
    pub meta_len: usize,
    pub meta_dim0: usize,
    pub head_dim: usize,
    pub expansion: usize,
    pub cpe_kernel: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub toggles: Toggles,
}

impl VariantSpec {
    fn standard(name: &str, blocks: [usize; 5], dims: [usize; 4]) -> Self {
        Self {
            name: name.to_string(),
            blocks,
            dims,
            meta_len: DEFAULT_META_LEN,
            meta_dim0: DEFAULT_META_DIM0,
            head_dim: DEFAULT_HEAD_DIM,
            expansion: DEFAULT_EXPANSION,
            cpe_kernel: CPE_KERNEL,
            num_classes: DEFAULT_NUM_CLASSES,
            in_channels: 3,
            toggles: Toggles::default(),
        }
    }

    pub fn tiny() -> Self {
        Self::standard("tiny", [1, 2, 2, 8, 2], [64, 128, 192, 320])
    }

    pub fn small() -> Self {
        Self::standard("small", [1, 2, 2, 6, 2], [96, 192, 320, 384])
    }

    pub fn base() -> Self {
        Self::standard("base", [2, 4, 4, 18, 4], [96, 192, 384, 512])
    }

    /// Desk-scale variant for fast tests and toy training; not one of the
    /// published sizes.
    pub fn tiny_narrow() -> Self {
        Self {
            num_classes: 3,
            ..Self::standard("tiny-narrow", [1, 1, 1, 2, 1], [32, 64, 96, 128])
        }
    }

    pub const NAMES: [&'static str; 4] = ["tiny", "small", "base", "tiny-narrow"];

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "tiny-narrow" | "tiny_narrow" => Ok(Self::tiny_narrow()),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected one of {:?}",
                Self::NAMES
            ))),
        }
    }

    pub fn with_meta_len(mut self, m: usize) -> Self {
        self.meta_len = m;
        self
    }

    pub fn with_num_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    /// CA blocks actually built (zero when the CA stage is toggled off).
    pub fn ca_blocks(&self) -> usize {
        if self.toggles.use_ca_stage {
            self.blocks[0]
        } else {
            0
        }
    }

    /// Width of the initial meta-token parameter.
    pub fn initial_meta_dim(&self) -> usize {
        if self.toggles.use_meta_stem {
            self.meta_dim0
        } else {
            self.dims[0]
        }
    }

    pub fn has_cross_attention(&self) -> bool {
        self.ca_blocks() + self.blocks[1] + self.blocks[2] > 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("variant {}: {msg}", self.name)));
        if self.head_dim == 0 {
            return bad("head_dim must be positive".into());
        }
        if let Some(d) = self.dims.iter().find(|&&d| d == 0 || d % self.head_dim != 0) {
            return bad(format!("dim {d} is not a positive multiple of head_dim {}", self.head_dim));
        }
        if self.meta_len == 0 {
            return bad("meta_len must be at least 1".into());
        }
        if self.meta_len < 2 && self.has_cross_attention() {
            return bad("cross-attention needs at least 2 meta tokens".into());
        }
        if self.toggles.use_meta_stem && self.meta_dim0 == 0 {
            return bad("meta_dim0 must be positive".into());
        }
        if self.expansion == 0 {
            return bad("expansion must be positive".into());
        }
        if self.cpe_kernel != CPE_KERNEL {
            return bad(format!("only a {CPE_KERNEL}x{CPE_KERNEL} CPE kernel is supported"));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return bad("num_classes and in_channels must be positive".into());
        }
        Ok(())
    }

    /// Image-token grid side lengths per stage for an `h × w` input.
    pub fn stage_grids(&self, h: usize, w: usize) -> Result<[(usize, usize); 4]> {
        if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(Error::Input(format!(
                "input {h}x{w} must be a positive multiple of 32"
            )));
        }
        Ok([
            (h / 4, w / 4),
            (h / 8, w / 8),
            (h / 16, w / 16),
            (h / 32, w / 32),
        ])
    }
}
