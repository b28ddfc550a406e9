//! Central finite-difference verification of the reverse pass, in `f64`.
//!
//! The probe loss is a fixed random projection of every output, so each output
//! element contributes a distinct weight. Analytic gradients come from one
//! recorded graph; numeric ones from forward-only evaluations with a single
//! coordinate nudged by `±step`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Block, BlockConfig, BlockKind, DcaMode, TokenGrid};
use crate::error::{Error, Result};
use crate::layers::Init;
use crate::model::{Model, VariantSpec};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Largest relative error accepted by [`FdReport::passed`].
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    /// Denominator floor: the error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Coordinates checked per tensor; tensors at most this size are checked fully.
    pub max_coords_per_tensor: usize,
    /// The same cap for the whole-model case, where each probe is a full forward pass.
    pub model_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            max_coords_per_tensor: 64,
            model_coords_per_tensor: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub case: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Build<'f> = dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Vec<Var>> + 'f;

struct Probe<'f> {
    build: &'f Build<'f>,
    weights: Vec<Tensor<f64>>,
}

impl Probe<'_> {
    fn loss(&self, g: &mut Graph<'_, f64>, inputs: &[Var]) -> Result<Var> {
        let outs = (self.build)(g, inputs)?;
        if outs.len() != self.weights.len() {
            return Err(Error::Contract("probe outputs changed between evaluations".into()));
        }
        let mut total: Option<Var> = None;
        for (o, w) in outs.into_iter().zip(&self.weights) {
            let s = g.weighted_sum(o, w)?;
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
        }
        total.ok_or_else(|| Error::Contract("probe produced no outputs".into()))
    }

    fn eval(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let l = self.loss(&mut g, &vars)?;
        Ok(g.value(l).data()[0])
    }
}

fn coords(len: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        sample(rng, len, cap).into_vec()
    }
}

/// Compares analytic and numeric gradients of every parameter in `store` and
/// every tensor in `inputs` for the outputs produced by `build`.
pub fn check(
    case: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: &FdConfig,
    build: &Build<'_>,
) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Analytic pass; also fixes the probe weights from the output shapes.
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let outs = build(&mut g, &vars)?;
    let weights: Vec<Tensor<f64>> = outs
        .iter()
        .map(|&o| Tensor::randn(g.shape(o), 1.0, &mut rng))
        .collect();
    let probe = Probe { build, weights };
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let loss = probe.loss(&mut g, &vars)?;
    g.backward(loss)?;
    let input_grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut param_grads: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    for (id, t) in g.param_grads() {
        param_grads[id.index()] = Some(t);
    }
    drop(g);

    let mut report = FdReport {
        case: case.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        worst: String::new(),
    };
    let h = cfg.step;
    let note = |report: &mut FdReport, what: String, a: f64, n: f64| {
        let e = relative_error(a, n, cfg.floor);
        report.checked += 1;
        if e > report.max_rel_err || !e.is_finite() {
            report.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            report.worst = what;
        }
    };

    let mut work = inputs.to_vec();
    for (k, grad) in input_grads.iter().enumerate() {
        for i in coords(grad.numel(), cfg.max_coords_per_tensor, &mut rng) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = probe.eval(store, &work)?;
            work[k].data_mut()[i] = orig - h;
            let down = probe.eval(store, &work)?;
            work[k].data_mut()[i] = orig;
            note(&mut report, format!("input{k}[{i}]"), grad.data()[i], (up - down) / (2.0 * h));
        }
    }

    let mut perturbed = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        let numel = store.get(id).numel();
        let analytic = param_grads[id.index()].take();
        for i in coords(numel, cfg.max_coords_per_tensor, &mut rng) {
            let orig = store.get(id).data()[i];
            perturbed.get_mut(id).data_mut()[i] = orig + h;
            let up = probe.eval(&perturbed, inputs)?;
            perturbed.get_mut(id).data_mut()[i] = orig - h;
            let down = probe.eval(&perturbed, inputs)?;
            perturbed.get_mut(id).data_mut()[i] = orig;
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            note(&mut report, format!("{}[{i}]", store.name(id)), a, (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Replaces every parameter with `N(0, std²)` draws so that biases, gains and
/// weights all carry signal.
pub fn randomize(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        let fresh = Tensor::<f64>::randn(t.shape(), std, &mut rng);
        t.data_mut().copy_from_slice(fresh.data());
    }
}

/// Block-level shape used by the suite: a 4×4 grid, 4 meta tokens, width 8
/// split into two heads.
#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub height: usize,
    pub width: usize,
    pub meta: usize,
    pub dim: usize,
    pub head_dim: usize,
}

impl Default for BlockShape {
    fn default() -> Self {
        Self {
            height: 4,
            width: 4,
            meta: 4,
            dim: 8,
            head_dim: 4,
        }
    }
}

pub fn block_case(kind: BlockKind, mode: DcaMode, shape: BlockShape, cfg: &FdConfig) -> Result<FdReport> {
    let mut store = ParamStore::<f64>::new();
    let mut bc = BlockConfig::new(shape.dim, shape.head_dim);
    bc.dca_mode = mode;
    let block = Block::new(kind, &mut store, "block", bc, &mut Init::new(cfg.seed))?;
    randomize(&mut store, 0.3, cfg.seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
    let n = shape.height * shape.width;
    let inputs = [
        Tensor::randn(&[n, shape.dim], 1.0, &mut rng),
        Tensor::randn(&[shape.meta, shape.dim], 1.0, &mut rng),
    ];
    let name = match (kind, mode) {
        (BlockKind::Dca, DcaMode::Sequential) => "dca-sequential".to_string(),
        (BlockKind::Dca, DcaMode::Parallel) => "dca-parallel".to_string(),
        (k, _) => format!("{k:?}").to_lowercase(),
    };
    let build = |g: &mut Graph<'_, f64>, v: &[Var]| -> Result<Vec<Var>> {
        let grid = TokenGrid::new(g, v[0], shape.height, shape.width)?;
        let out = block.forward(g, grid, v[1])?;
        Ok(vec![out.grid.tokens, out.meta])
    };
    check(&name, &store, &inputs, cfg, &build)
}

/// Whole tiny-narrow classifier on a 64×64 image with cross-entropy loss.
pub fn model_case(cfg: &FdConfig) -> Result<FdReport> {
    let model = Model::<f64>::new(VariantSpec::tiny_narrow(), cfg.seed)?;
    let mut store = model.store().clone();
    randomize(&mut store, 0.1, cfg.seed + 1);
    let image = Tensor::randn(&[3, 64, 64], 1.0, &mut ChaCha8Rng::seed_from_u64(cfg.seed + 2));
    let classes = model.spec().num_classes;
    let mut target = vec![0.0; classes];
    target[0] = 1.0;
    let build = |g: &mut Graph<'_, f64>, v: &[Var]| -> Result<Vec<Var>> {
        let t = model.trace(g, v[0], false)?;
        Ok(vec![g.cross_entropy(t.logits, &target)?])
    };
    let cfg = FdConfig {
        max_coords_per_tensor: cfg.model_coords_per_tensor,
        ..*cfg
    };
    check("tiny-narrow", &store, &[image], &cfg, &build)
}

/// Every block type plus the full model.
pub fn run_suite(cfg: &FdConfig) -> Result<Vec<FdReport>> {
    let shape = BlockShape::default();
    let mut out = vec![
        block_case(BlockKind::Ca, DcaMode::Parallel, shape, cfg)?,
        block_case(BlockKind::Dca, DcaMode::Parallel, shape, cfg)?,
        block_case(BlockKind::Dca, DcaMode::Sequential, shape, cfg)?,
        block_case(BlockKind::Sa, DcaMode::Parallel, shape, cfg)?,
    ];
    out.push(model_case(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-12);
        assert!((relative_error(0.0, 1e-9, 1e-5) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x ↦ x·x via mul is correct; a constant in place of one factor is not.
        let store = ParamStore::<f64>::new();
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = |g: &mut Graph<'_, f64>, v: &[Var]| Ok(vec![g.mul(v[0], v[0])?]);
        let r = check("square", &store, std::slice::from_ref(&x), &FdConfig::default(), &ok).unwrap();
        assert!(r.passed(), "{r:?}");
        let bad = |g: &mut Graph<'_, f64>, v: &[Var]| {
            let detached = g.constant(g.value(v[0]).clone());
            Ok(vec![g.mul(v[0], detached)?])
        };
        let r = check("detached", &store, &[x], &FdConfig::default(), &bad).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn block_suite_passes() {
        let cfg = FdConfig::default();
        for (kind, mode) in [
            (BlockKind::Ca, DcaMode::Parallel),
            (BlockKind::Dca, DcaMode::Parallel),
            (BlockKind::Dca, DcaMode::Sequential),
            (BlockKind::Sa, DcaMode::Parallel),
        ] {
            let r = block_case(kind, mode, BlockShape::default(), &cfg).unwrap();
            assert!(r.passed(), "{r:?}");
            assert!(r.checked > 100);
        }
    }
}
