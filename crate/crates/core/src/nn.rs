//! Minimal transformer building blocks with hand-written backward passes.
//!
//! Every layer exposes `forward` returning the activations it needs cached
//! for `backward`; gradients accumulate into each parameter's `grad` buffer
//! until the optimizer consumes them.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scalar::{c, Scalar};

/// A named tensor with a gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(shape.to_vec()))
    }

    pub fn normal(name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let value = ArrayD::from_shape_fn(shape.to_vec(), |_| {
            c::<F>(rng.sample::<f64, _>(StandardNormal) * std)
        });
        Self::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn value2(&self) -> ndarray::ArrayView2<'_, F> {
        self.value.view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn value1(&self) -> ndarray::ArrayView1<'_, F> {
        self.value.view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn grad2_mut(&mut self) -> ndarray::ArrayViewMut2<'_, F> {
        self.grad.view_mut().into_dimensionality::<Ix2>().unwrap()
    }
}

/// Visitor over a model's trainable parameters, in a stable order.
pub trait Parameterized<F: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }
}

pub fn gelu<F: Scalar>(x: F) -> F {
    let k = c::<F>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = c::<F>(0.044715);
    let half = c::<F>(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_prime<F: Scalar>(x: F) -> F {
    let k = c::<F>(0.797_884_560_802_865_4);
    let a = c::<F>(0.044715);
    let half = c::<F>(0.5);
    let three = c::<F>(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * k * (F::one() + three * a * x * x)
}

// ---------------------------------------------------------------------------

pub struct Linear<F: Scalar> {
    pub w: Param<F>, // (in, out)
    pub b: Param<F>, // (out,)
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut impl Rng) -> Self {
        Self {
            w: Param::normal(format!("{name}.w"), &[fan_in, fan_out], std, rng),
            b: Param::zeros(format!("{name}.b"), &[fan_out]),
        }
    }

    /// Xavier-style init scaled by fan-in.
    pub fn xavier(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self::new(name, fan_in, fan_out, (1.0 / fan_in as f64).sqrt(), rng)
    }

    pub fn identity(name: &str, dim: usize) -> Self {
        let mut w = Array2::<F>::zeros((dim, dim));
        for i in 0..dim {
            w[[i, i]] = F::one();
        }
        Self {
            w: Param::new(format!("{name}.w"), w.into_dyn()),
            b: Param::zeros(format!("{name}.b"), &[dim]),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.w.value2()) + &self.b.value1()
    }

    /// Accumulates weight grads; returns grad w.r.t. the input.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let dw = x.t().dot(dy);
        let db = dy.sum_axis(Axis(0));
        self.w.grad.scaled_add(F::one(), &dw.into_dyn());
        self.b.grad.scaled_add(F::one(), &db.into_dyn());
        dy.dot(&self.w.value2().t())
    }
}

impl<F: Scalar> Parameterized<F> for Linear<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

// ---------------------------------------------------------------------------

pub struct LayerNorm<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    eps: F,
}

pub struct LayerNormCache<F: Scalar> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::from_elem(vec![dim], F::one())),
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
            eps: c(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let (n, d) = x.dim();
        let dn = c::<F>(d as f64);
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Array1::zeros(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + self.eps).sqrt();
            inv_std[i] = is;
            let mut out = xhat.row_mut(i);
            for j in 0..d {
                out[j] = (row[j] - mean) * is;
            }
        }
        let gamma = self.gamma.value1();
        let beta = self.beta.value1();
        let y = &xhat * &gamma + &beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: &Array2<F>) -> Array2<F> {
        let (n, d) = dy.dim();
        let dn = c::<F>(d as f64);
        let gamma = self.gamma.value1().to_owned();
        let mut dx = Array2::zeros((n, d));
        let mut dgamma = Array1::<F>::zeros(d);
        let mut dbeta = Array1::<F>::zeros(d);
        for i in 0..n {
            let xhat = cache.xhat.row(i);
            let dyr = dy.row(i);
            let mut g = Array1::<F>::zeros(d);
            for j in 0..d {
                dgamma[j] = dgamma[j] + dyr[j] * xhat[j];
                dbeta[j] = dbeta[j] + dyr[j];
                g[j] = dyr[j] * gamma[j];
            }
            let g_mean = g.sum() / dn;
            let gx_mean = g.iter().zip(xhat.iter()).map(|(a, b)| *a * *b).sum::<F>() / dn;
            let is = cache.inv_std[i];
            let mut out = dx.row_mut(i);
            for j in 0..d {
                out[j] = is * (g[j] - g_mean - xhat[j] * gx_mean);
            }
        }
        self.gamma.grad.scaled_add(F::one(), &dgamma.into_dyn());
        self.beta.grad.scaled_add(F::one(), &dbeta.into_dyn());
        dx
    }
}

impl<F: Scalar> Parameterized<F> for LayerNorm<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

// ---------------------------------------------------------------------------

pub struct MultiHeadAttention<F: Scalar> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub heads: usize,
}

pub struct AttentionCache<F: Scalar> {
    x: Array2<F>,
    q: Array3<F>, // (heads, n, dh)
    k: Array3<F>,
    v: Array3<F>,
    probs: Array3<F>, // (heads, n, n)
    ctx: Array2<F>,   // concatenated context before wo
}

fn split_heads<F: Scalar>(x: &Array2<F>, heads: usize) -> Array3<F> {
    let (n, d) = x.dim();
    let dh = d / heads;
    let mut out = Array3::zeros((heads, n, dh));
    for h in 0..heads {
        for i in 0..n {
            for j in 0..dh {
                out[[h, i, j]] = x[[i, h * dh + j]];
            }
        }
    }
    out
}

fn merge_heads<F: Scalar>(x: &Array3<F>) -> Array2<F> {
    let (heads, n, dh) = x.dim();
    let mut out = Array2::zeros((n, heads * dh));
    for h in 0..heads {
        for i in 0..n {
            for j in 0..dh {
                out[[i, h * dh + j]] = x[[h, i, j]];
            }
        }
    }
    out
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % heads, 0, "width must divide evenly into heads");
        Self {
            wq: Linear::xavier(&format!("{name}.wq"), dim, dim, rng),
            wk: Linear::xavier(&format!("{name}.wk"), dim, dim, rng),
            wv: Linear::xavier(&format!("{name}.wv"), dim, dim, rng),
            wo: Linear::xavier(&format!("{name}.wo"), dim, dim, rng),
            heads: heads,
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, AttentionCache<F>) {
        let heads = self.heads;
        let q = split_heads(&self.wq.forward(x), heads);
        let k = split_heads(&self.wk.forward(x), heads);
        let v = split_heads(&self.wv.forward(x), heads);
        let (_, n, dh) = q.dim();
        let scale = c::<F>(1.0 / (dh as f64).sqrt());
        let mut probs = Array3::zeros((heads, n, n));
        let mut ctx3 = Array3::zeros((heads, n, dh));
        for h in 0..heads {
            let qh = q.index_axis(Axis(0), h);
            let kh = k.index_axis(Axis(0), h);
            let vh = v.index_axis(Axis(0), h);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            // row-wise softmax
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|s| s / sum);
            }
            ctx3.index_axis_mut(Axis(0), h).assign(&scores.dot(&vh));
            probs.index_axis_mut(Axis(0), h).assign(&scores);
        }
        let ctx = merge_heads(&ctx3);
        let y = self.wo.forward(&ctx);
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
        };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &AttentionCache<F>, dy: &Array2<F>) -> Array2<F> {
        let heads = self.heads;
        let dctx = self.wo.backward(&cache.ctx, dy);
        let dctx3 = split_heads(&dctx, heads);
        let (_, n, dh) = cache.q.dim();
        let scale = c::<F>(1.0 / (dh as f64).sqrt());
        let mut dq = Array3::zeros((heads, n, dh));
        let mut dk = Array3::zeros((heads, n, dh));
        let mut dv = Array3::zeros((heads, n, dh));
        for h in 0..heads {
            let p = cache.probs.index_axis(Axis(0), h);
            let qh = cache.q.index_axis(Axis(0), h);
            let kh = cache.k.index_axis(Axis(0), h);
            let vh = cache.v.index_axis(Axis(0), h);
            let dctxh = dctx3.index_axis(Axis(0), h);
            dv.index_axis_mut(Axis(0), h).assign(&p.t().dot(&dctxh));
            let dp = dctxh.dot(&vh.t());
            // softmax backward row-wise: ds = p * (dp - sum(dp * p))
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let dot: F = dp.row(i).iter().zip(p.row(i).iter()).map(|(a, b)| *a * *b).sum();
                for j in 0..n {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                }
            }
            ds.mapv_inplace(|s| s * scale);
            dq.index_axis_mut(Axis(0), h).assign(&ds.dot(&kh));
            dk.index_axis_mut(Axis(0), h).assign(&ds.t().dot(&qh));
        }
        let mut dx = self.wq.backward(&cache.x, &merge_heads(&dq));
        dx = dx + self.wk.backward(&cache.x, &merge_heads(&dk));
        dx = dx + self.wv.backward(&cache.x, &merge_heads(&dv));
        dx
    }
}

impl<F: Scalar> Parameterized<F> for MultiHeadAttention<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.wq.visit_params(f);
        self.wk.visit_params(f);
        self.wv.visit_params(f);
        self.wo.visit_params(f);
    }
}

// ---------------------------------------------------------------------------

pub struct Mlp<F: Scalar> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct MlpCache<F: Scalar> {
    x: Array2<F>,
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new(name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::xavier(&format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::xavier(&format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(&act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dact = self.fc2.backward(&cache.act, dy);
        let dpre = &dact * &cache.pre.mapv(gelu_prime);
        self.fc1.backward(&cache.x, &dpre)
    }
}

impl<F: Scalar> Parameterized<F> for Mlp<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }
}

// ---------------------------------------------------------------------------

/// Pre-norm transformer block: x + attn(ln1(x)), then h + mlp(ln2(h)).
pub struct Block<F: Scalar> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

pub struct BlockCache<F: Scalar> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Scalar> Block<F> {
    pub fn new(name: &str, dim: usize, heads: usize, mlp_hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            mlp: Mlp::new(&format!("{name}.mlp"), dim, mlp_hidden, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, BlockCache<F>) {
        let (n1, ln1_cache) = self.ln1.forward(x);
        let (a, attn_cache) = self.attn.forward(&n1);
        let h = x + &a;
        let (n2, ln2_cache) = self.ln2.forward(&h);
        let (m, mlp_cache) = self.mlp.forward(&n2);
        let y = &h + &m;
        (
            y,
            BlockCache {
                ln1: ln1_cache,
                attn: attn_cache,
                ln2: ln2_cache,
                mlp: mlp_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dm = self.mlp.backward(&cache.mlp, dy);
        let dh = dy + &self.ln2.backward(&cache.ln2, &dm);
        let da = self.attn.backward(&cache.attn, &dh);
        &dh + &self.ln1.backward(&cache.ln1, &da)
    }
}

impl<F: Scalar> Parameterized<F> for Block<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.ln1.visit_params(f);
        self.attn.visit_params(f);
        self.ln2.visit_params(f);
        self.mlp.visit_params(f);
    }
}

/// A stack of transformer blocks with per-layer hidden-state taps.
pub struct Trunk<F: Scalar> {
    pub blocks: Vec<Block<F>>,
}

pub struct TrunkCache<F: Scalar> {
    caches: Vec<BlockCache<F>>,
}

impl<F: Scalar> TrunkCache<F> {
    pub fn from_caches(caches: Vec<BlockCache<F>>) -> Self {
        Self { caches }
    }

    pub fn depth(&self) -> usize {
        self.caches.len()
    }
}

impl<F: Scalar> Trunk<F> {
    pub fn new(name: &str, layers: usize, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..layers)
            .map(|i| Block::new(&format!("{name}.block{i}"), dim, heads, 4 * dim, rng))
            .collect();
        Self { blocks }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Returns the final activation, the hidden state after every block
    /// (index 0 = after block 1), and the cache for backward.
    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, Vec<Array2<F>>, TrunkCache<F>) {
        let mut h = x.clone();
        let mut hiddens = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h);
            h = next;
            hiddens.push(h.clone());
            caches.push(cache);
        }
        (h.clone(), hiddens, TrunkCache { caches })
    }

    /// Backward with an optional extra gradient injected at the hidden state
    /// after 1-based layer `depth` (the tap used for alignment). Walks only
    /// the layers the cache covers, so it pairs with early-exit forwards.
    pub fn backward(
        &mut self,
        cache: &TrunkCache<F>,
        dy: &Array2<F>,
        aux: Option<(usize, &Array2<F>)>,
    ) -> Array2<F> {
        let mut grad = dy.clone();
        for idx in (0..cache.caches.len()).rev() {
            if let Some((depth, extra)) = aux {
                if depth == idx + 1 {
                    grad = &grad + extra;
                }
            }
            grad = self.blocks[idx].backward(&cache.caches[idx], &grad);
        }
        grad
    }
}

impl<F: Scalar> Parameterized<F> for Trunk<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        for block in &mut self.blocks {
            block.visit_params(f);
        }
    }
}

/// Sinusoidal position/timestep features of width `dim`.
pub fn sinusoidal_embedding<F: Scalar>(pos: f64, dim: usize) -> Array1<F> {
    let mut out = Array1::zeros(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[2 * i] = c((pos * freq).sin());
        out[2 * i + 1] = c((pos * freq).cos());
    }
    out
}
