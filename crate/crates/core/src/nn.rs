//! Layers with explicit forward caches and analytic backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::{c, Real};

/// Borrowed view of one parameter tensor.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

/// Anything that owns trainable tensors. Visiting order is fixed and is the
/// order used by checkpoints and optimizers.
pub trait Parameterized<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = Vec::new();
        self.visit("", &mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = Vec::new();
        self.visit_mut("", &mut v);
        v
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

pub(crate) fn push_ref<'a, T, D>(out: &mut Vec<ParamRef<'a, T>>, prefix: &str, name: &str, a: &'a ndarray::Array<T, D>)
where
    D: ndarray::Dimension,
{
    out.push(ParamRef {
        name: format!("{prefix}{name}"),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_mut<'a, T, D>(
    out: &mut Vec<ParamMut<'a, T>>,
    prefix: &str,
    name: &str,
    a: &'a mut ndarray::Array<T, D>,
) where
    D: ndarray::Dimension,
{
    let shape = a.shape().to_vec();
    out.push(ParamMut {
        name: format!("{prefix}{name}"),
        shape,
        data: a.as_slice_mut().expect("parameters are contiguous"),
    });
}

/// Uniform in `[-bound, bound]`.
pub fn uniform2<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || c(rng.random_range(-bound..=bound)))
}

pub fn uniform1<T: Real>(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Array1<T> {
    Array1::from_shape_simple_fn(n, || c(rng.random_range(-bound..=bound)))
}

/// Affine map `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn init(rng: &mut ChaCha8Rng, input: usize, output: usize, bound: f64) -> Self {
        Self {
            weight: uniform2(rng, input, output, bound),
            bias: uniform1(rng, output, bound),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, grad: &mut Self) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<T: Real> Parameterized<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push_ref(out, prefix, "weight", &self.weight);
        push_ref(out, prefix, "bias", &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_mut(out, prefix, "weight", &mut self.weight);
        push_mut(out, prefix, "bias", &mut self.bias);
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            let s = T::one() / (var + c(LN_EPS)).sqrt();
            row.mapv_inplace(|v| v * s);
            *is = s;
        }
        let y = &normalized * &self.gain + &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<'_, T>, grad: &mut Self) -> Array2<T> {
        grad.gain += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).unwrap();
        let mut dx = &dy * &self.gain;
        for ((mut row, xhat), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_d = row.sum() / d;
            let mean_dx = row.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
            for (v, &xh) in row.iter_mut().zip(xhat.iter()) {
                *v = s * (*v - mean_d - xh * mean_dx);
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push_ref(out, prefix, "gain", &self.gain);
        push_ref(out, prefix, "bias", &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_mut(out, prefix, "gain", &mut self.gain);
        push_mut(out, prefix, "bias", &mut self.bias);
    }
}

/// Row-wise softmax over the first `valid[i]` columns of row `i`; the
/// remaining columns get exactly zero.
pub fn masked_softmax_rows<T: Real>(scores: &mut Array2<T>, valid: impl Fn(usize) -> usize) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let k = valid(i).min(row.len());
        if k == 0 {
            row.fill(T::zero());
            continue;
        }
        let max = row.iter().take(k).fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut().take(k) {
            *v = (*v - max).exp();
            sum += *v;
        }
        for (j, v) in row.iter_mut().enumerate() {
            if j < k {
                *v /= sum;
            } else {
                *v = T::zero();
            }
        }
    }
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
pub fn softmax_backward_rows<T: Real>(probs: &Array2<T>, dprobs: &Array2<T>) -> Array2<T> {
    let mut ds = dprobs.clone();
    for (mut row, p) in ds.rows_mut().into_iter().zip(probs.rows()) {
        let dot = row.iter().zip(p.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for (v, &pv) in row.iter_mut().zip(p.iter()) {
            *v = pv * (*v - dot);
        }
    }
    ds
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub n_heads: usize,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

pub struct AttentionCache<T> {
    xq: Array2<T>,
    xkv: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// One `n × s` probability matrix per head.
    pub probs: Vec<Array2<T>>,
    concat: Array2<T>,
}

impl<T: Real> MultiHeadAttention<T> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, n_heads: usize, bound: f64) -> Self {
        Self {
            n_heads,
            query: Linear::init(rng, d, d, bound),
            key: Linear::init(rng, d, d, bound),
            value: Linear::init(rng, d, d, bound),
            output: Linear::init(rng, d, d, bound),
        }
    }

    pub fn zeros(d: usize, n_heads: usize) -> Self {
        Self {
            n_heads,
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
        }
    }

    /// Queries from `xq` (n × d) attend over `xkv` (s × d). With `causal`,
    /// query `i` only sees keys `0..=i`.
    pub fn forward(&self, xq: ArrayView2<'_, T>, xkv: ArrayView2<'_, T>, causal: bool) -> (Array2<T>, AttentionCache<T>) {
        let q = self.query.forward(xq);
        let k = self.key.forward(xkv);
        let v = self.value.forward(xkv);
        let d = q.ncols();
        let dk = d / self.n_heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let (n, s_len) = (q.nrows(), k.nrows());
        let mut concat = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            masked_softmax_rows(&mut scores, |i| if causal { i + 1 } else { s_len });
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.output.forward(concat.view());
        let cache = AttentionCache {
            xq: xq.to_owned(),
            xkv: xkv.to_owned(),
            q,
            k,
            v,
            probs,
            concat,
        };
        (out, cache)
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(&self, cache: &AttentionCache<T>, dout: ArrayView2<'_, T>, grad: &mut Self) -> (Array2<T>, Array2<T>) {
        let dconcat = self.output.backward(cache.concat.view(), dout, &mut grad.output);
        let d = cache.q.ncols();
        let dk = d / self.n_heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dkey = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let doh = dconcat.slice(cols);
            let dp = doh.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let ds = softmax_backward_rows(p, &dp) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dkey.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }
        let dxq = self.query.backward(cache.xq.view(), dq.view(), &mut grad.query);
        let dxkv = self.key.backward(cache.xkv.view(), dkey.view(), &mut grad.key)
            + self.value.backward(cache.xkv.view(), dv.view(), &mut grad.value);
        (dxq, dxkv)
    }
}

impl<T: Real> Parameterized<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.query.visit(&format!("{prefix}query."), out);
        self.key.visit(&format!("{prefix}key."), out);
        self.value.visit(&format!("{prefix}value."), out);
        self.output.visit(&format!("{prefix}output."), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.query.visit_mut(&format!("{prefix}query."), out);
        self.key.visit_mut(&format!("{prefix}key."), out);
        self.value.visit_mut(&format!("{prefix}value."), out);
        self.output.visit_mut(&format!("{prefix}output."), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub inner: Linear<T>,
    pub outer: Linear<T>,
}

pub struct FeedForwardCache<T> {
    x: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn init(rng: &mut ChaCha8Rng, d: usize, d_ff: usize, bound: f64) -> Self {
        Self {
            inner: Linear::init(rng, d, d_ff, bound),
            outer: Linear::init(rng, d_ff, d, bound),
        }
    }

    pub fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            inner: Linear::zeros(d, d_ff),
            outer: Linear::zeros(d_ff, d),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> (Array2<T>, FeedForwardCache<T>) {
        let hidden = self.inner.forward(x).mapv(|v| v.max(T::zero()));
        let y = self.outer.forward(hidden.view());
        (y, FeedForwardCache { x: x.to_owned(), hidden })
    }

    pub fn backward(&self, cache: &FeedForwardCache<T>, dy: ArrayView2<'_, T>, grad: &mut Self) -> Array2<T> {
        let mut dh = self.outer.backward(cache.hidden.view(), dy, &mut grad.outer);
        dh.zip_mut_with(&cache.hidden, |g, &h| {
            if h <= T::zero() {
                *g = T::zero();
            }
        });
        self.inner.backward(cache.x.view(), dh.view(), &mut grad.inner)
    }
}

impl<T: Real> Parameterized<T> for FeedForward<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.inner.visit(&format!("{prefix}inner."), out);
        self.outer.visit(&format!("{prefix}outer."), out);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.inner.visit_mut(&format!("{prefix}inner."), out);
        self.outer.visit_mut(&format!("{prefix}outer."), out);
    }
}

/// Identifies one training-time forward pass for dropout purposes. Masks are
/// a pure function of `(seed, step, example, site)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub example: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Dropout applicator for one forward pass; `None` key means evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub key: Option<DropoutKey>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { rate: 0.0, key: None }
    }

    pub fn train(rate: f64, key: DropoutKey) -> Self {
        Self { rate, key: Some(key) }
    }

    pub fn is_active(&self) -> bool {
        self.key.is_some() && self.rate > 0.0
    }

    /// Scaled keep-mask for `site`, or `None` when inactive.
    pub fn mask<T: Real>(&self, site: u64, rows: usize, cols: usize) -> Option<Array2<T>> {
        let key = self.key.filter(|_| self.rate > 0.0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[key.seed, key.step, key.example, site]));
        let keep = 1.0 - self.rate;
        let scale: T = c(1.0 / keep);
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        }))
    }
}

pub(crate) fn apply_mask<T: Real>(x: Array2<T>, mask: Option<&Array2<T>>) -> Array2<T> {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding<T: Real>(len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        c(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_softmax_zero_outside_prefix() {
        let mut s = Array2::from_shape_vec((2, 3), vec![1.0f64, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap();
        masked_softmax_rows(&mut s, |i| i + 1);
        assert_eq!(s[[0, 0]], 1.0);
        assert_eq!(s[[0, 1]], 0.0);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(s[[1, 2]], 0.0);
    }

    #[test]
    fn dropout_masks_are_reproducible() {
        let key = DropoutKey { seed: 7, step: 3, example: 1 };
        let d = Dropout::train(0.5, key);
        let a: Array2<f32> = d.mask(2, 4, 4).unwrap();
        let b: Array2<f32> = d.mask(2, 4, 4).unwrap();
        assert_eq!(a, b);
        let other: Array2<f32> = d.mask(3, 4, 4).unwrap();
        assert_ne!(a, other);
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(Dropout::eval().mask::<f32>(0, 2, 2).is_none());
    }

    #[test]
    fn positional_table_first_row() {
        let pe: Array2<f64> = positional_encoding(2, 4);
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
    }
}
