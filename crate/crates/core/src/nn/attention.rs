//! Multi-head self-attention and pre-norm transformer blocks over token
//! matrices of shape `(N * L) x D`.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::layers::{gelu, gelu_backward, LayerNorm, Linear, NormCache};
use super::param::{Init, Param};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T: Scalar> {
    input: Array2<T>,
    qkv: Array2<T>,
    attn: Vec<Array2<T>>,
    context: Array2<T>,
    tokens: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(dim: usize, heads: usize) -> Self {
        let xavier = |i, o| Init::XavierUniform { fan_in: i, fan_out: o };
        Self {
            qkv: Linear::new(dim, 3 * dim, xavier(dim, dim)),
            proj: Linear::new(dim, dim, xavier(dim, dim)),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.proj.weight.value.nrows()
    }

    pub fn forward(&self, x: ArrayView2<T>, tokens: usize) -> (Array2<T>, AttentionCache<T>) {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let n = x.nrows() / tokens;
        let qkv = self.qkv.forward(x);
        let mut context = Array2::zeros((x.nrows(), d));
        let mut attn = Vec::with_capacity(n * self.heads);
        for b in 0..n {
            let rows = b * tokens..(b + 1) * tokens;
            for h in 0..self.heads {
                let c = h * dh;
                let q = qkv.slice(s![rows.clone(), c..c + dh]);
                let k = qkv.slice(s![rows.clone(), d + c..d + c + dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + c..2 * d + c + dh]);
                let mut a = q.dot(&k.t());
                for mut row in a.outer_iter_mut() {
                    let m = row.fold(T::neg_infinity(), |m, &v| m.max(v * scale));
                    row.mapv_inplace(|v| (v * scale - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|v| v / z);
                }
                context.slice_mut(s![rows.clone(), c..c + dh]).assign(&a.dot(&v));
                attn.push(a);
            }
        }
        let y = self.proj.forward(context.view());
        (
            y,
            AttentionCache {
                input: x.to_owned(),
                qkv,
                attn,
                context,
                tokens,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let tokens = cache.tokens;
        let n = dy.nrows() / tokens;
        let dctx = self.proj.backward(cache.context.view(), dy);
        let mut dqkv = Array2::zeros(cache.qkv.dim());
        for b in 0..n {
            let rows = b * tokens..(b + 1) * tokens;
            for h in 0..self.heads {
                let c = h * dh;
                let a = &cache.attn[b * self.heads + h];
                let q = cache.qkv.slice(s![rows.clone(), c..c + dh]);
                let k = cache.qkv.slice(s![rows.clone(), d + c..d + c + dh]);
                let v = cache.qkv.slice(s![rows.clone(), 2 * d + c..2 * d + c + dh]);
                let dout = dctx.slice(s![rows.clone(), c..c + dh]);
                let da = dout.dot(&v.t());
                let dv = a.t().dot(&dout);
                let inner = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (&da - &inner) * a * scale;
                dqkv.slice_mut(s![rows.clone(), c..c + dh]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![rows.clone(), d + c..d + c + dh])
                    .assign(&ds.t().dot(&q));
                dqkv.slice_mut(s![rows.clone(), 2 * d + c..2 * d + c + dh])
                    .assign(&dv);
            }
        }
        self.qkv.backward(cache.input.view(), dqkv.view())
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock<T: Scalar> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T: Scalar> {
    ln1: NormCache<T>,
    attn: AttentionCache<T>,
    ln2: NormCache<T>,
    ln2_out: Array2<T>,
    hidden: Array2<T>,
    activated: Array2<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, Init::XavierUniform { fan_in: dim, fan_out: hidden }),
            fc2: Linear::new(hidden, dim, Init::XavierUniform { fan_in: hidden, fan_out: dim }),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>, tokens: usize) -> (Array2<T>, BlockCache<T>) {
        let (h1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(h1.view(), tokens);
        let x1 = &x + &a;
        let (h2, ln2) = self.ln2.forward(x1.view());
        let hidden = self.fc1.forward(h2.view());
        let activated = gelu(&hidden);
        let y = &x1 + &self.fc2.forward(activated.view());
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                ln2_out: h2,
                hidden,
                activated,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let dact = self.fc2.backward(cache.activated.view(), dy);
        let dhidden = gelu_backward(&cache.hidden, &dact);
        let dh2 = self.fc1.backward(cache.ln2_out.view(), dhidden.view());
        let dx1 = &dy + &self.ln2.backward(&cache.ln2, dh2.view());
        let dh1 = self.attn.backward(&cache.attn, dx1.view());
        &dx1 + &self.ln1.backward(&cache.ln1, dh1.view())
    }

    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (p, [a, b]) in [
            ("ln1", self.ln1.params()),
            ("attn.qkv", self.attn.qkv.params()),
            ("attn.proj", self.attn.proj.params()),
            ("ln2", self.ln2.params()),
            ("mlp.fc1", self.fc1.params()),
            ("mlp.fc2", self.fc2.params()),
        ] {
            out.push((format!("{p}.{}", a.0), a.1));
            out.push((format!("{p}.{}", b.0), b.1));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (p, [a, b]) in [
            ("ln1", self.ln1.params_mut()),
            ("attn.qkv", self.attn.qkv.params_mut()),
            ("attn.proj", self.attn.proj.params_mut()),
            ("ln2", self.ln2.params_mut()),
            ("mlp.fc1", self.fc1.params_mut()),
            ("mlp.fc2", self.fc2.params_mut()),
        ] {
            out.push((format!("{p}.{}", a.0), a.1));
            out.push((format!("{p}.{}", b.0), b.1));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init(block: &mut TransformerBlock<f64>) {
        for (name, p) in block.params_mut() {
            p.initialize(11, &name);
            if p.init == Init::Ones || p.init == Init::Zeros {
                let k = name.len() as f64;
                p.value.mapv_inplace(|v| v + 0.05 * k.sin());
            }
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let mut block = TransformerBlock::<f64>::new(8, 2, 2);
        init(&mut block);
        let tokens = 3;
        let x = Array2::from_shape_fn((2 * tokens, 8), |(i, j)| ((i * 8 + j) as f64 * 0.613).sin());
        let probe = Array2::from_shape_fn((2 * tokens, 8), |(i, j)| ((i * 3 + j) as f64 * 0.271).cos());
        let loss = |b: &TransformerBlock<f64>, x: &Array2<f64>| (&b.forward(x.view(), tokens).0 * &probe).sum();
        let (_, cache) = block.forward(x.view(), tokens);
        let dx = block.backward(&cache, probe.view());
        let h = 1e-6;
        for i in 0..2 * tokens {
            for j in [0, 3, 7] {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-6, "({i},{j}) {fd} vs {}", dx[[i, j]]);
            }
        }
        let grads: Vec<(String, Array2<f64>)> =
            block.params().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
        for (k, (name, g)) in grads.iter().enumerate() {
            let idx = (0, k % g.ncols());
            let bump = |delta: f64| {
                let mut b = block.clone();
                for (n, p) in b.params_mut() {
                    if &n == name {
                        p.value[idx] += delta;
                    }
                }
                loss(&b, &x)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "{name}: {fd} vs {}", g[idx]);
        }
    }
}
