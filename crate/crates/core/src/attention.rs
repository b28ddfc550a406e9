//! Scaled dot-product attention and the multi-head wrapper used by every block.
//!
//! Two divisors are supported: the usual `√d_h`, and an entropy-invariant
//! factor `(ln N_q / ln N_k)·√d_h` for cross-attention between sequences of
//! different lengths. Both use the per-head width `d_h`.

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::tensor::{kernels, Graph, ParamStore, Scalar, Tensor, Var};

pub const DEFAULT_HEAD_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    #[default]
    Standard,
    EntropyInvariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub head_dim: usize,
    pub scaling: Scaling,
}

impl AttentionConfig {
    pub fn new(dim: usize, head_dim: usize, scaling: Scaling) -> Result<Self> {
        if head_dim == 0 || dim == 0 || !dim.is_multiple_of(head_dim) {
            return Err(Error::Config(format!(
                "head_dim {head_dim} must divide dim {dim}"
            )));
        }
        Ok(Self {
            dim,
            head_dim,
            scaling,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.dim / self.head_dim
    }

    pub fn with_scaling(self, scaling: Scaling) -> Self {
        Self { scaling, ..self }
    }

    /// Divisor applied to `q·kᵀ` for `n_query` queries against `n_key` keys.
    pub fn scale(&self, n_query: usize, n_key: usize) -> Result<f64> {
        match self.scaling {
            Scaling::Standard => Ok((self.head_dim as f64).sqrt()),
            Scaling::EntropyInvariant => entropy_scale(n_query, n_key, self.head_dim),
        }
    }
}

/// `(ln n_query / ln n_key) · √c`.
pub fn entropy_scale(n_query: usize, n_key: usize, c: usize) -> Result<f64> {
    if n_query < 2 || n_key < 2 {
        return Err(Error::Domain(format!(
            "entropy-invariant scale needs at least 2 queries and keys, got {n_query} and {n_key}"
        )));
    }
    if c == 0 {
        return Err(Error::Domain("attention width must be positive".into()));
    }
    Ok((n_query as f64).ln() / (n_key as f64).ln() * (c as f64).sqrt())
}

/// Single-head attention on plain tensors. Returns `(output, attention)`.
pub fn scaled_dot_product_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::shape("attention", k.shape(), v.shape()));
    }
    if !(scale > 0.0) {
        return Err(Error::Domain(format!("attention scale must be positive, got {scale}")));
    }
    let inv = T::lit(1.0 / scale);
    let scores = kernels::matmul_nt(q, k)?.map(|s| s * inv);
    let attn = kernels::softmax_rows(&scores);
    let out = kernels::matmul(&attn, v)?;
    Ok((out, attn))
}

/// Q/K/V/output projections for one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub cfg: AttentionConfig,
}

/// Result of [`AttentionParams::attend`]: merged heads `[N_q, C]` and the
/// softmax weights `[H, N_q, N_k]`.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub merged: Var,
    pub weights: Var,
}

/// Per-head projections of one token stream, each `[H, N, d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadProjections {
    pub q: Option<Var>,
    pub k: Option<Var>,
    pub v: Option<Var>,
    pub len: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        init: &mut Init,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, init)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, init)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, init)?,
            o: Linear::new(store, &format!("{name}.proj"), d, d, init)?,
            cfg,
        })
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }

    fn heads<T: Scalar>(&self, g: &mut Graph<'_, T>, lin: &Linear, x: Var) -> Result<Var> {
        let width = *g.shape(x).last().unwrap_or(&0);
        if width != self.cfg.dim {
            return Err(Error::Config(format!(
                "attention expects width {}, got {width}",
                self.cfg.dim
            )));
        }
        let y = lin.forward(g, x)?;
        g.split_heads(y, self.cfg.num_heads())
    }

    /// Projects a `[N, C]` stream into the requested head-split roles.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        want_q: bool,
        want_kv: bool,
    ) -> Result<HeadProjections> {
        let len = g.shape(x)[0];
        let q = if want_q { Some(self.heads(g, &self.q, x)?) } else { None };
        let (k, v) = if want_kv {
            (Some(self.heads(g, &self.k, x)?), Some(self.heads(g, &self.v, x)?))
        } else {
            (None, None)
        };
        Ok(HeadProjections { q, k, v, len })
    }

    /// Softmax attention of `queries` over `keys` (head-split), before the
    /// output projection.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        queries: &HeadProjections,
        keys: &HeadProjections,
    ) -> Result<Attended> {
        let missing = || Error::Contract("attention projections missing".into());
        let q = queries.q.ok_or_else(missing)?;
        let k = keys.k.ok_or_else(missing)?;
        let v = keys.v.ok_or_else(missing)?;
        let scale = self.cfg.scale(queries.len, keys.len)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, T::lit(1.0 / scale));
        let weights = g.softmax_rows(scores);
        let heads = g.matmul(weights, v)?;
        let merged = g.merge_heads(heads)?;
        Ok(Attended { merged, weights })
    }

    pub fn project_out<T: Scalar>(&self, g: &mut Graph<'_, T>, merged: Var) -> Result<Var> {
        self.o.forward(g, merged)
    }

    /// Full multi-head attention: project, attend per head, merge, project out.
    /// Returns the output `[N_q, C]` and attention weights `[H, N_q, N_k]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
    ) -> Result<(Var, Var)> {
        if g.shape(k_src)[0] != g.shape(v_src)[0] {
            return Err(Error::shape("multi_head_attention", g.shape(k_src), g.shape(v_src)));
        }
        let qp = self.project(g, q_src, true, false)?;
        let len = g.shape(k_src)[0];
        let kp = HeadProjections {
            q: None,
            k: Some(self.heads(g, &self.k, k_src)?),
            v: Some(self.heads(g, &self.v, v_src)?),
            len,
        };
        let att = self.attend(g, &qp, &kp)?;
        Ok((self.project_out(g, att.merged)?, att.weights))
    }
}

/// Convenience wrapper returning only the attention output.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
) -> Result<Var> {
    params.forward(g, q, k, v).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Naive double-loop reference, independent of the matmul/softmax kernels.
    fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, scale: f64) -> Vec<f64> {
        let (n1, c) = (q.shape()[0], q.shape()[1]);
        let n2 = k.shape()[0];
        let dv = v.shape()[1];
        let mut out = vec![0.0; n1 * dv];
        for i in 0..n1 {
            let s: Vec<f64> = (0..n2)
                .map(|j| (0..c).map(|t| q.at(&[i, t]) * k.at(&[j, t])).sum::<f64>() / scale)
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n2 {
                for t in 0..dv {
                    out[i * dv + t] += e[j] / z * v.at(&[j, t]);
                }
            }
        }
        out
    }

    #[test]
    fn entropy_scale_examples() {
        assert!((entropy_scale(100, 100, 32).unwrap() - 32f64.sqrt()).abs() < 1e-12);
        assert!((entropy_scale(16, 4, 64).unwrap() - 16.0).abs() < 1e-12);
        // 64-bit evaluation of ln(3136)/ln(16)*sqrt(32)
        assert!((entropy_scale(3136, 16, 32).unwrap() - 16.425_680_184_576_027).abs() < 1e-9);
        assert!(entropy_scale(1, 16, 32).is_err());
        assert!(entropy_scale(16, 1, 32).is_err());
    }

    #[test]
    fn entropy_scale_is_log_base_invariant() {
        let (n1, n2, c) = (3136usize, 16usize, 32usize);
        let ratio2 = (n1 as f64).log2() / (n2 as f64).log2();
        let ratio10 = (n1 as f64).log10() / (n2 as f64).log10();
        let e = entropy_scale(n1, n2, c).unwrap();
        assert!((e - ratio2 * (c as f64).sqrt()).abs() < 1e-9);
        assert!((e - ratio10 * (c as f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn identical_keys_give_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let krow = Tensor::<f64>::randn(&[1, 4], 1.0, &mut rng);
        let k = krow.gather_rows(&[0, 0, 0, 0, 0]).unwrap();
        let v = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
        let (out, _) = scaled_dot_product_attention(&q, &k, &v, 2.0).unwrap();
        let mean = kernels::global_avg_pool(&v).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - mean.data()[0]).abs() < 1e-12);
            assert!((row[1] - mean.data()[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_key_saturates() {
        let q = Tensor::<f32>::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let k = Tensor::<f32>::from_vec(&[3, 2], vec![0.0, 0.0, 1e4, 0.0, 1.0, 0.0]).unwrap();
        let v = Tensor::<f32>::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (out, _) = scaled_dot_product_attention(&q, &k, &v, 1.0).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-4);
        assert!((out.data()[1] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
        let (out, attn) = scaled_dot_product_attention(&q, &k, &v, 8f64.sqrt()).unwrap();
        let want = naive_attention(&q, &k, &v, 8f64.sqrt());
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
        for row in attn.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let q = Tensor::<f32>::zeros(&[2, 4]);
        let k = Tensor::<f32>::zeros(&[3, 4]);
        let v = Tensor::<f32>::zeros(&[2, 4]);
        assert!(scaled_dot_product_attention(&q, &k, &v, 1.0).is_err());
        let k = Tensor::<f32>::zeros(&[3, 5]);
        let v = Tensor::<f32>::zeros(&[3, 4]);
        assert!(scaled_dot_product_attention(&q, &k, &v, 1.0).is_err());
    }

    #[test]
    fn head_count_from_width() {
        let cfg = AttentionConfig::new(64, DEFAULT_HEAD_DIM, Scaling::Standard).unwrap();
        assert_eq!(cfg.num_heads(), 2);
        assert!(AttentionConfig::new(48, 32, Scaling::Standard).is_err());
    }

    fn set_identity(store: &mut ParamStore<f64>, lin: &Linear) {
        store.set(lin.weight, Tensor::eye(lin.in_dim)).unwrap();
    }

    #[test]
    fn single_head_identity_projections_collapse_to_sdpa() {
        let cfg = AttentionConfig::new(6, 6, Scaling::Standard).unwrap();
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut store, "att", cfg, &mut Init::new(0)).unwrap();
        for lin in [p.q, p.k, p.v, p.o] {
            set_identity(&mut store, &lin);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::<f64>::randn(&[3, 6], 1.0, &mut rng);
        let kv = Tensor::<f64>::randn(&[5, 6], 1.0, &mut rng);
        let mut g = Graph::inference(&store);
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let out = multi_head_attention(&mut g, qv, kvv, kvv, &p).unwrap();
        let (want, _) = scaled_dot_product_attention(&q, &kv, &kv, 6f64.sqrt()).unwrap();
        assert!(g.value(out).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn entropy_invariant_equals_standard_when_lengths_match() {
        let cfg = AttentionConfig::new(8, 4, Scaling::Standard).unwrap();
        let mut store = ParamStore::<f32>::new();
        let p = AttentionParams::new(&mut store, "att", cfg, &mut Init::new(5)).unwrap();
        let pe = AttentionParams {
            cfg: cfg.with_scaling(Scaling::EntropyInvariant),
            ..p
        };
        let x = Tensor::<f32>::randn(&[6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::inference(&store);
        let xv = g.constant(x);
        let a = multi_head_attention(&mut g, xv, xv, xv, &p).unwrap();
        let b = multi_head_attention(&mut g, xv, xv, xv, &pe).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() <= 1e-6);
    }

    #[test]
    fn width_mismatch_is_configuration_error() {
        let cfg = AttentionConfig::new(8, 4, Scaling::Standard).unwrap();
        let mut store = ParamStore::<f32>::new();
        let p = AttentionParams::new(&mut store, "att", cfg, &mut Init::new(5)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[3, 6]));
        assert!(matches!(multi_head_attention(&mut g, x, x, x, &p), Err(Error::Config(_))));
    }

    fn arb_qkv() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<usize>, Vec<usize>)> {
        (1usize..6, 2usize..7, 1usize..5, any::<u64>()).prop_flat_map(|(n1, n2, c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::randn(&[n1, c], 1.5, &mut rng);
            let k = Tensor::randn(&[n2, c], 1.5, &mut rng);
            let v = Tensor::randn(&[n2, 3], 1.0, &mut rng);
            (
                Just(q),
                Just(k),
                Just(v),
                Just((0..n1).collect::<Vec<_>>()).prop_shuffle(),
                Just((0..n2).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    }

    proptest! {
        #[test]
        fn output_is_convex_combination_of_values((q, k, v, _, _) in arb_qkv()) {
            let (out, _) = scaled_dot_product_attention(&q, &k, &v, 1.3).unwrap();
            for t in 0..3 {
                let col: Vec<f64> = v.data().iter().skip(t).step_by(3).copied().collect();
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                for row in out.data().chunks(3) {
                    prop_assert!(row[t] >= lo - 1e-12 && row[t] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn joint_key_value_permutation_is_invisible((q, k, v, _, kp) in arb_qkv()) {
            let (a, _) = scaled_dot_product_attention(&q, &k, &v, 1.3).unwrap();
            let (b, _) = scaled_dot_product_attention(
                &q, &k.gather_rows(&kp).unwrap(), &v.gather_rows(&kp).unwrap(), 1.3).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }

        #[test]
        fn query_permutation_permutes_output((q, k, v, qp, _) in arb_qkv()) {
            let (a, _) = scaled_dot_product_attention(&q, &k, &v, 1.3).unwrap();
            let (b, _) = scaled_dot_product_attention(&q.gather_rows(&qp).unwrap(), &k, &v, 1.3).unwrap();
            prop_assert!(a.gather_rows(&qp).unwrap().max_abs_diff(&b).unwrap() < 1e-6);
        }
    }
}
