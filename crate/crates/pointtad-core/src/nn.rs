//! Named parameters and the small layer vocabulary the decoder is built
//! from: affine projections, layer norm, and multi-head self-attention.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// A named learnable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Stable handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> Self {
        ParamId(index)
    }
}

/// Flat, ordered container of model parameters. Names are unique; the
/// registration order defines the optimizer state layout and the
/// checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name: {name}"
        );
        self.params.push(Parameter { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers every parameter as a `requires_grad` leaf of a fresh graph.
    pub fn inject(&self, g: &mut Graph) -> GraphParams {
        let vars = self.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
        GraphParams { vars }
    }
}

/// Per-graph leaf handles, aligned with the store order.
#[derive(Debug, Clone)]
pub struct GraphParams {
    vars: Vec<Var>,
}

impl GraphParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Xavier-uniform initialization for a `[fan_in, fan_out]` weight.
pub fn xavier_uniform(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec([fan_in, fan_out].to_vec(), data).expect("shape/data agree")
}

/// Normal initialization with the given standard deviation (Box-Muller).
pub fn normal(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        data.push(r * libm::cos(theta) * std);
        if data.len() < n {
            data.push(r * libm::sin(theta) * std);
        }
    }
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
}

/// Affine projection `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-initialized weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier_uniform(rng, in_dim, out_dim));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Zero weights and zero bias (the bias can be overwritten afterwards).
    pub fn new_zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Forward for a `[m, in]` input.
    pub fn forward(&self, g: &mut Graph, p: &GraphParams, x: Var) -> Result<Var, TensorError> {
        let wx = g.matmul(x, p.var(self.w))?;
        g.add_row(wx, p.var(self.b))
    }

    /// Forward for a 1-D `[in]` input, returning `[out]`.
    pub fn forward_vec(&self, g: &mut Graph, p: &GraphParams, x: Var) -> Result<Var, TensorError> {
        let row = g.reshape(x, &[1, self.in_dim])?;
        let out = self.forward(g, p, row)?;
        g.reshape(out, &[self.out_dim])
    }
}

/// Layer normalization with learnable gain and bias over one axis extent.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        LayerNorm { gain, bias, dim, eps: 1e-5 }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &GraphParams,
        x: Var,
        axis: usize,
    ) -> Result<Var, TensorError> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias), axis, self.eps)
    }
}

/// Standard multi-head self-attention block with residual connection and
/// post-norm, operating on an `[n, d]` sequence.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm: LayerNorm,
    pub n_heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        assert!(d % n_heads == 0, "width {d} not divisible by {n_heads} heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            n_heads,
            d,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &GraphParams, x: Var) -> Result<Var, TensorError> {
        let n = g.value(x).shape()[0];
        let dh = self.d / self.n_heads;
        let q = self.wq.forward(g, p, x)?;
        let k = self.wk.forward(g, p, x)?;
        let v = self.wv.forward(g, p, x)?;

        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            // column block [h*dh, (h+1)*dh) of an [n, d] matrix
            let idx: Vec<usize> = (0..n)
                .flat_map(|row| (0..dh).map(move |j| row * self.d + h * dh + j))
                .collect();
            let qh_flat = g.gather(q, &idx)?;
            let qh = g.reshape(qh_flat, &[n, dh])?;
            let kh_flat = g.gather(k, &idx)?;
            let kh = g.reshape(kh_flat, &[n, dh])?;
            let vh_flat = g.gather(v, &idx)?;
            let vh = g.reshape(vh_flat, &[n, dh])?;

            let kt = g.transpose(kh)?;
            let scores_raw = g.matmul(qh, kt)?;
            let scores = g.scale(scores_raw, 1.0 / libm::sqrt(dh as f64));
            let attn = g.softmax(scores, 1)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat(&heads, 1)?;
        let projected = self.wo.forward(g, p, merged)?;
        let residual = g.add(x, projected)?;
        self.norm.forward(g, p, residual, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_panic() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        store.add("w", Tensor::zeros(&[2]));
    }

    #[test]
    fn linear_applies_affine_map() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 2, 3, &mut rng);
        store.get_mut(lin.w).value =
            Tensor::matrix(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, -1.0]]).unwrap();
        store.get_mut(lin.b).value = Tensor::vector(&[0.5, 0.5, 0.5]);
        let mut g = Graph::new();
        let p = store.inject(&mut g);
        let x = g.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 0.5]);
    }

    #[test]
    fn attention_rows_sum_to_one_and_shape_is_preserved() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng);
        let mut g = Graph::new();
        let p = store.inject(&mut g);
        let x = g.constant(normal(&mut rng, &[4, 8], 1.0));
        let y = attn.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 8]);
    }

    #[test]
    fn single_query_attention_is_value_plus_residual_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "attn", 4, 1, &mut rng);
        let mut g = Graph::new();
        let p = store.inject(&mut g);
        let x_t = normal(&mut rng, &[1, 4], 1.0);
        let x = g.constant(x_t.clone());
        // with one query the attention weight is exactly 1, so the block is
        // LN(x + Wo(Wv x + bv) + bo)
        let y = attn.forward(&mut g, &p, x).unwrap();

        let mut g2 = Graph::new();
        let p2 = store.inject(&mut g2);
        let x2 = g2.constant(x_t);
        let v = attn.wv.forward(&mut g2, &p2, x2).unwrap();
        let o = attn.wo.forward(&mut g2, &p2, v).unwrap();
        let r = g2.add(x2, o).unwrap();
        let expected = attn.norm.forward(&mut g2, &p2, r, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g2.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_init_has_roughly_unit_std() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let t = normal(&mut rng, &[10_000], 1.0);
        let mean: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var: f64 =
            t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.numel() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }
}
