//! Single-head pre-norm transformer block with a gated feed-forward.
//!
//! ```text
//! h   = x + O(attn(Q(n₁), K(n₁), V(n₁)))      n₁ = rms(x)
//! out = h + D(silu(G(n₂)) ⊙ U(n₂))            n₂ = rms(h)
//! ```
//!
//! Attention is causal with `1/√h` scaling; `rms` has no learnable gain.

use super::mlp::{silu, silu_grad};
use super::{AdaptedLinear, AdapterHost, Model, ModuleTag};
use crate::adapters::AdapterGrads;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformerBlock<T> {
    pub q: AdaptedLinear<T>,
    pub k: AdaptedLinear<T>,
    pub v: AdaptedLinear<T>,
    pub o: AdaptedLinear<T>,
    pub g: AdaptedLinear<T>,
    pub u: AdaptedLinear<T>,
    pub d: AdaptedLinear<T>,
    hidden: usize,
    ffn: usize,
}

#[derive(Debug, Clone)]
pub struct TransformerCache<T> {
    batch: usize,
    seq: usize,
    n1: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    probs: Vec<T>,
    ctx: Tensor<T>,
    n2: Tensor<T>,
    inv_r2: Vec<T>,
    gate: Tensor<T>,
    up: Tensor<T>,
    mixed: Tensor<T>,
}

impl<T> TransformerCache<T> {
    /// Attention context before the output projection, `(b·s)×h`.
    pub fn attention_context(&self) -> &Tensor<T> {
        &self.ctx
    }

    /// Value projection of the normalized input, `(b·s)×h`.
    pub fn values(&self) -> &Tensor<T> {
        &self.v
    }
}

fn rms_norm<T: Element>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (rows, h) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[rows, h]);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * h..(r + 1) * h];
        let mean_sq = row.iter().fold(T::zero(), |a, &v| a + v * v) / T::from_f64(h as f64);
        let ir = T::one() / (mean_sq + T::from_f64(RMS_EPS)).sqrt();
        for (o, &v) in out.data_mut()[r * h..(r + 1) * h].iter_mut().zip(row) {
            *o = v * ir;
        }
        inv.push(ir);
    }
    (out, inv)
}

/// `g_x = (g_n - n · mean(g_n ⊙ n)) / r`
fn rms_norm_backward<T: Element>(g_n: &Tensor<T>, n: &Tensor<T>, inv_r: &[T]) -> Tensor<T> {
    let (rows, h) = (n.shape()[0], n.shape()[1]);
    let mut out = Tensor::zeros(&[rows, h]);
    for (r, &ir) in inv_r.iter().enumerate().take(rows) {
        let gn = &g_n.data()[r * h..(r + 1) * h];
        let nr = &n.data()[r * h..(r + 1) * h];
        let dot =
            gn.iter().zip(nr).fold(T::zero(), |a, (&g, &v)| a + g * v) / T::from_f64(h as f64);
        for ((o, &g), &v) in out.data_mut()[r * h..(r + 1) * h]
            .iter_mut()
            .zip(gn)
            .zip(nr)
        {
            *o = (g - v * dot) * ir;
        }
    }
    out
}

impl<T: Element> TinyTransformerBlock<T> {
    /// Random frozen projections; all tags Q,K,V,O,G,U,D present.
    pub fn new(hidden: usize, ffn: usize, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 || ffn == 0 {
            return Err(Error::Config("transformer widths must be positive".into()));
        }
        Ok(Self {
            q: AdaptedLinear::random(hidden, hidden, ModuleTag::Q, rng),
            k: AdaptedLinear::random(hidden, hidden, ModuleTag::K, rng),
            v: AdaptedLinear::random(hidden, hidden, ModuleTag::V, rng),
            o: AdaptedLinear::random(hidden, hidden, ModuleTag::O, rng),
            g: AdaptedLinear::random(hidden, ffn, ModuleTag::G, rng),
            u: AdaptedLinear::random(hidden, ffn, ModuleTag::U, rng),
            d: AdaptedLinear::random(ffn, hidden, ModuleTag::D, rng),
            hidden,
            ffn,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn ffn(&self) -> usize {
        self.ffn
    }

    fn attention(
        &self,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        b: usize,
        s: usize,
    ) -> (Tensor<T>, Vec<T>) {
        let h = self.hidden;
        let scale = T::one() / T::from_f64(h as f64).sqrt();
        let mut probs = vec![T::zero(); b * s * s];
        let mut ctx = Tensor::zeros(&[b * s, h]);
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for bi in 0..b {
            for t in 0..s {
                let qt = &qd[(bi * s + t) * h..(bi * s + t + 1) * h];
                let prow = &mut probs[(bi * s + t) * s..(bi * s + t + 1) * s];
                let mut max = T::neg_infinity();
                for u in 0..=t {
                    let ku = &kd[(bi * s + u) * h..(bi * s + u + 1) * h];
                    let sc = qt.iter().zip(ku).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                    prow[u] = sc;
                    max = max.max(sc);
                }
                let mut denom = T::zero();
                for p in prow[..=t].iter_mut() {
                    *p = (*p - max).exp();
                    denom += *p;
                }
                for p in prow[..=t].iter_mut() {
                    *p = *p / denom;
                }
                let crow = &mut ctx.data_mut()[(bi * s + t) * h..(bi * s + t + 1) * h];
                for u in 0..=t {
                    let vu = &vd[(bi * s + u) * h..(bi * s + u + 1) * h];
                    for (c, &vv) in crow.iter_mut().zip(vu) {
                        *c += prow[u] * vv;
                    }
                }
            }
        }
        (ctx, probs)
    }

    fn attention_backward(
        &self,
        cache: &TransformerCache<T>,
        g_ctx: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (b, s, h) = (cache.batch, cache.seq, self.hidden);
        let scale = T::one() / T::from_f64(h as f64).sqrt();
        let mut g_q = Tensor::zeros(&[b * s, h]);
        let mut g_k = Tensor::zeros(&[b * s, h]);
        let mut g_v = Tensor::zeros(&[b * s, h]);
        let (qd, kd, vd, gd) = (cache.q.data(), cache.k.data(), cache.v.data(), g_ctx.data());
        let mut g_p = vec![T::zero(); s];
        for bi in 0..b {
            for t in 0..s {
                let row = bi * s + t;
                let gc = &gd[row * h..(row + 1) * h];
                let p = &cache.probs[row * s..(row + 1) * s];
                for u in 0..=t {
                    let vu = &vd[(bi * s + u) * h..(bi * s + u + 1) * h];
                    g_p[u] = gc.iter().zip(vu).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    let gv = &mut g_v.data_mut()[(bi * s + u) * h..(bi * s + u + 1) * h];
                    for (o, &x) in gv.iter_mut().zip(gc) {
                        *o += p[u] * x;
                    }
                }
                let inner = (0..=t).fold(T::zero(), |a, u| a + p[u] * g_p[u]);
                for u in 0..=t {
                    let g_s = p[u] * (g_p[u] - inner) * scale;
                    let ku = &kd[(bi * s + u) * h..(bi * s + u + 1) * h];
                    let qt = &qd[row * h..(row + 1) * h];
                    for (o, &kv) in g_q.data_mut()[row * h..(row + 1) * h].iter_mut().zip(ku) {
                        *o += g_s * kv;
                    }
                    for (o, &qv) in g_k.data_mut()[(bi * s + u) * h..(bi * s + u + 1) * h]
                        .iter_mut()
                        .zip(qt)
                    {
                        *o += g_s * qv;
                    }
                }
            }
        }
        (g_q, g_k, g_v)
    }
}

impl<T: Element> AdapterHost<T> for TinyTransformerBlock<T> {
    fn linears(&self) -> Vec<&AdaptedLinear<T>> {
        vec![
            &self.q, &self.k, &self.v, &self.o, &self.g, &self.u, &self.d,
        ]
    }

    fn linears_mut(&mut self) -> Vec<&mut AdaptedLinear<T>> {
        vec![
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.g,
            &mut self.u,
            &mut self.d,
        ]
    }
}

impl<T: Element> Model<T> for TinyTransformerBlock<T> {
    type Cache = TransformerCache<T>;

    /// `x` is `[b×s×h]`; the output has the same shape.
    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, TransformerCache<T>)> {
        let (b, s, h) = x.dims3("TinyTransformerBlock::forward")?;
        if h != self.hidden {
            return Err(Error::Shape {
                op: "TinyTransformerBlock::forward",
                left: x.shape().to_vec(),
                right: vec![self.hidden, self.hidden],
            });
        }
        let xf = x.clone().reshape(&[b * s, h])?;
        let (n1, _) = rms_norm(&xf);
        let q = self.q.forward(&n1)?;
        let k = self.k.forward(&n1)?;
        let v = self.v.forward(&n1)?;
        let (ctx, probs) = self.attention(&q, &k, &v, b, s);
        let h1 = xf.add(&self.o.forward(&ctx)?)?;
        let (n2, inv_r2) = rms_norm(&h1);
        let gate = self.g.forward(&n2)?;
        let up = self.u.forward(&n2)?;
        let mixed = gate.zip_map(&up, |g, u| silu(g) * u)?;
        let out = h1.add(&self.d.forward(&mixed)?)?.reshape(&[b, s, h])?;
        Ok((
            out,
            TransformerCache {
                batch: b,
                seq: s,
                n1,
                q,
                k,
                v,
                probs,
                ctx,
                n2,
                inv_r2,
                gate,
                up,
                mixed,
            },
        ))
    }

    fn backward(
        &self,
        c: &TransformerCache<T>,
        g_y: &Tensor<T>,
    ) -> Result<Vec<Option<AdapterGrads<T>>>> {
        let (b, s, h) = (c.batch, c.seq, self.hidden);
        if g_y.shape() != [b, s, h] {
            return Err(Error::Shape {
                op: "TinyTransformerBlock::backward",
                left: g_y.shape().to_vec(),
                right: vec![b, s, h],
            });
        }
        let g_out = g_y.clone().reshape(&[b * s, h])?;

        let gd = self.d.backward(&c.mixed, &g_out, true)?;
        let g_mixed = gd.input.expect("requested input grad");
        let g_gate = g_mixed
            .zip_map(&c.up, |gm, u| gm * u)?
            .zip_map(&c.gate, |v, g| v * silu_grad(g))?;
        let g_up = g_mixed.zip_map(&c.gate, |gm, g| gm * silu(g))?;
        let gg = self.g.backward(&c.n2, &g_gate, true)?;
        let gu = self.u.backward(&c.n2, &g_up, true)?;
        let mut g_n2 = gg.input.expect("requested input grad");
        g_n2.add_assign(gu.input.as_ref().expect("requested input grad"))?;
        let mut g_h1 = g_out;
        g_h1.add_assign(&rms_norm_backward(&g_n2, &c.n2, &c.inv_r2))?;

        let go = self.o.backward(&c.ctx, &g_h1, true)?;
        let (g_q, g_k, g_v) = self.attention_backward(c, go.input.as_ref().expect("input grad"));
        let gq = self.q.backward(&c.n1, &g_q, false)?;
        let gk = self.k.backward(&c.n1, &g_k, false)?;
        let gv = self.v.backward(&c.n1, &g_v, false)?;

        Ok(vec![
            gq.adapter, gk.adapter, gv.adapter, go.adapter, gg.adapter, gu.adapter, gd.adapter,
        ])
    }
}
