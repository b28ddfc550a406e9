//! The full two-stream classifier.
//!
//! Four resolution stages at strides 4, 8, 16 and 32. The first holds the
//! cross-attention blocks that initialise meta tokens followed by DCA blocks,
//! the second more DCA blocks, the last two self-attention blocks. Images are
//! processed one at a time as `[C, H, W]` tensors; batching is the caller's
//! loop.

mod attmap;
mod checkpoint;
mod variant;

pub use attmap::{attention_maps, AttentionMap};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use variant::{Toggles, VariantSpec, DEFAULT_EXPANSION, DEFAULT_META_DIM0, DEFAULT_META_LEN, DEFAULT_NUM_CLASSES};

use crate::blocks::{Block, BlockConfig, BlockKind, DcaMode, Downsample, ImageStem, MetaStem, TokenGrid};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear, Norm};
use crate::tensor::{Graph, MacCount, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Stage {
    pub dim: usize,
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    spec: VariantSpec,
    store: ParamStore<T>,
    meta_tokens: ParamId,
    image_stem: ImageStem,
    meta_stem: Option<MetaStem>,
    stages: Vec<Stage>,
    head_norm_image: Norm,
    head_norm_meta: Option<Norm>,
    head: Linear,
    /// (stage, block) whose meta-as-query attention can be retained.
    probe: Option<(usize, usize)>,
}

/// Recorded forward pass inside a caller-owned graph.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    pub grids: Vec<TokenGrid>,
    pub meta: Var,
    pub meta_input: Var,
    /// `[heads, M, N]` weights of the probed block, when retention was asked for.
    pub attention: Option<(Var, usize, usize)>,
}

/// Image tokens of one stage as a `[H·W, D]` tensor.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Scalar = f32> {
    pub height: usize,
    pub width: usize,
    pub tokens: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct RetainedAttention<T: Scalar = f32> {
    pub height: usize,
    pub width: usize,
    /// `[heads, M, H·W]`, rows sum to one.
    pub weights: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub features: Vec<FeatureMap<T>>,
    pub meta: Tensor<T>,
    pub attention: Option<RetainedAttention<T>>,
    pub macs: MacCount,
}

/// Result of one differentiated forward pass.
#[derive(Debug, Clone)]
pub struct Backprop<T: Scalar = f32> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub grads: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialised model. Equal seeds give identical weights.
    pub fn new(spec: VariantSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = spec.dims;
        let meta_tokens = store.add("meta_tokens", init.weight(&[spec.meta_len, spec.initial_meta_dim()]))?;
        let image_stem = ImageStem::new(&mut store, "stem", spec.in_channels, d[0], &mut init)?;
        let meta_stem = if spec.toggles.use_meta_stem {
            Some(MetaStem::new(&mut store, "meta_stem", spec.meta_dim0, d[0], &mut init)?)
        } else {
            None
        };

        let mode = if spec.toggles.dca_sequential {
            DcaMode::Sequential
        } else {
            DcaMode::Parallel
        };
        let layout: [Vec<(BlockKind, usize)>; 4] = [
            vec![(BlockKind::Ca, spec.ca_blocks()), (BlockKind::Dca, spec.blocks[1])],
            vec![(BlockKind::Dca, spec.blocks[2])],
            vec![(BlockKind::Sa, spec.blocks[3])],
            vec![(BlockKind::Sa, spec.blocks[4])],
        ];
        let mut stages = Vec::with_capacity(4);
        for (k, kinds) in layout.iter().enumerate() {
            let downsample = if k > 0 {
                Some(Downsample::new(&mut store, &format!("stages.{k}.down"), d[k - 1], d[k], &mut init)?)
            } else {
                None
            };
            let mut cfg = BlockConfig::new(d[k], spec.head_dim);
            cfg.expansion = spec.expansion;
            cfg.dca_mode = mode;
            let mut blocks = Vec::new();
            for &(kind, count) in kinds {
                for _ in 0..count {
                    let name = format!("stages.{k}.blocks.{}", blocks.len());
                    blocks.push(Block::new(kind, &mut store, &name, cfg, &mut init)?);
                }
            }
            stages.push(Stage {
                dim: d[k],
                downsample,
                blocks,
            });
        }

        let head_norm_image = Norm::new(&mut store, "head.norm_image", d[3])?;
        let head_norm_meta = if spec.toggles.use_meta_pooling {
            Some(Norm::new(&mut store, "head.norm_meta", d[3])?)
        } else {
            None
        };
        let head = Linear::new(&mut store, "head.fc", d[3], spec.num_classes, &mut init)?;

        // Prefer the last DCA block at stride 8, then anything earlier with a
        // meta-as-query branch.
        let probe = [1usize, 0]
            .iter()
            .find_map(|&k| {
                stages[k]
                    .blocks
                    .iter()
                    .rposition(|b| b.kind() == BlockKind::Dca)
                    .map(|i| (k, i))
            })
            .or_else(|| stages[0].blocks.iter().rposition(|b| b.kind() == BlockKind::Ca).map(|i| (0, i)));

        Ok(Self {
            spec,
            store,
            meta_tokens,
            image_stem,
            meta_stem,
            stages,
            head_norm_image,
            head_norm_meta,
            head,
            probe,
        })
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn meta_tokens_id(&self) -> ParamId {
        self.meta_tokens
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            meta_tokens: self.meta_tokens,
            image_stem: self.image_stem,
            meta_stem: self.meta_stem,
            stages: self.stages.clone(),
            head_norm_image: self.head_norm_image,
            head_norm_meta: self.head_norm_meta,
            head: self.head,
            probe: self.probe,
        }
    }

    /// Rejects anything that is not a `[C, H, W]` image with `H`, `W`
    /// multiples of 32 and finite values.
    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let &[c, h, w] = image.shape() else {
            return Err(Error::Input(format!("expected a [C, H, W] image, got {:?}", image.shape())));
        };
        if c != self.spec.in_channels {
            return Err(Error::Input(format!("expected {} channels, got {c}", self.spec.in_channels)));
        }
        self.spec.stage_grids(h, w)?;
        if !image.is_finite() {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        Ok(())
    }

    /// Records the whole network into `g`.
    pub fn trace(&self, g: &mut Graph<'_, T>, image: Var, retain_attention: bool) -> Result<ForwardTrace> {
        let &[_, h, w] = g.shape(image) else {
            return Err(Error::Input(format!("expected a [C, H, W] image, got {:?}", g.shape(image))));
        };
        self.spec.stage_grids(h, w)?;

        let mut grid = self.image_stem.forward(g, image)?;
        let meta_input = g.param(self.meta_tokens);
        let mut meta = match &self.meta_stem {
            Some(stem) => stem.forward(g, meta_input)?,
            None => meta_input,
        };

        let mut grids = Vec::with_capacity(4);
        let mut attention = None;
        for (k, stage) in self.stages.iter().enumerate() {
            if let Some(down) = &stage.downsample {
                grid = down.forward_grid(g, grid)?;
                meta = down.forward_meta(g, meta)?;
            }
            for (i, block) in stage.blocks.iter().enumerate() {
                let out = block.forward(g, grid, meta)?;
                if retain_attention && self.probe == Some((k, i)) {
                    attention = out.meta_attention.map(|a| (a, grid.height, grid.width));
                }
                grid = out.grid;
                meta = out.meta;
            }
            grids.push(grid);
        }

        let x = self.head_norm_image.forward(g, grid.tokens)?;
        let mut pooled = g.mean_rows(x)?;
        if let Some(norm) = &self.head_norm_meta {
            let m = norm.forward(g, meta)?;
            let m = g.mean_rows(m)?;
            pooled = g.add(pooled, m)?;
        }
        let d = self.spec.dims[3];
        let pooled = g.reshape(pooled, &[1, d])?;
        let logits = self.head.forward(g, pooled)?;
        let logits = g.reshape(logits, &[self.spec.num_classes])?;
        Ok(ForwardTrace {
            logits,
            grids,
            meta,
            meta_input,
            attention,
        })
    }

    /// Inference pass returning logits, per-stage features and optionally the
    /// probed attention weights.
    pub fn forward(&self, image: &Tensor<T>, retain_attention: bool) -> Result<ForwardOutput<T>> {
        self.check_image(image)?;
        let mut g = Graph::inference(&self.store);
        let x = g.constant(image.clone());
        let t = self.trace(&mut g, x, retain_attention)?;
        let features = t
            .grids
            .iter()
            .map(|grid| FeatureMap {
                height: grid.height,
                width: grid.width,
                tokens: g.value(grid.tokens).clone(),
            })
            .collect();
        let attention = t.attention.map(|(a, height, width)| RetainedAttention {
            height,
            width,
            weights: g.value(a).clone(),
        });
        Ok(ForwardOutput {
            logits: g.value(t.logits).clone(),
            features,
            meta: g.value(t.meta).clone(),
            attention,
            macs: g.macs(),
        })
    }

    pub fn forward_classify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(image, false)?.logits)
    }

    pub fn forward_features(&self, image: &Tensor<T>) -> Result<Vec<FeatureMap<T>>> {
        Ok(self.forward(image, false)?.features)
    }

    /// Cross-entropy against `target` (a distribution over classes) and the
    /// gradient of every parameter.
    pub fn loss_and_grads(&self, image: &Tensor<T>, target: &[T]) -> Result<Backprop<T>> {
        self.check_image(image)?;
        if target.len() != self.spec.num_classes {
            return Err(Error::Input(format!(
                "target has {} entries, model has {} classes",
                target.len(),
                self.spec.num_classes
            )));
        }
        let mut g = Graph::new(&self.store);
        let x = g.constant(image.clone());
        let t = self.trace(&mut g, x, false)?;
        let loss = g.cross_entropy(t.logits, target)?;
        let value = g.value(loss).data()[0];
        let logits = g.value(t.logits).clone();
        g.backward(loss)?;
        Ok(Backprop {
            loss: value,
            logits,
            grads: g.param_grads(),
        })
    }
}
