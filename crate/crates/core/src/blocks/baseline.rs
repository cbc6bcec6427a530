use rand::Rng;

use super::{init_bound, run_standalone, uniform, Binder, ParamVisit, NORM_EPS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::profile::OpCounters;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl NormParams {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<NormVars> {
        Ok(NormVars {
            gamma: b.bind(g, "gamma", &self.gamma)?,
            beta: b.bind(g, "beta", &self.beta)?,
        })
    }
}

impl ParamVisit for NormParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

/// Layer norm that consumes `x`.
pub fn layer_norm(g: &mut Graph, p: &NormVars, x: Var) -> Result<Var> {
    let y = g.layer_norm(x, p.gamma, p.beta, NORM_EPS)?;
    g.release(x);
    Ok(y)
}

/// Multi-head attention with `W^Q, W^K, W^V, W^O` and a residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardAttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

pub struct StandardAttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl StandardAttentionParams {
    pub fn init(rng: &mut impl Rng, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!("{heads} heads do not divide d = {d}")));
        }
        let b = init_bound(d);
        Ok(Self {
            wq: uniform(rng, &[d, d], b),
            wk: uniform(rng, &[d, d], b),
            wv: uniform(rng, &[d, d], b),
            wo: uniform(rng, &[d, d], b),
            heads,
        })
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<StandardAttentionVars> {
        Ok(StandardAttentionVars {
            wq: b.bind(g, "wq", &self.wq)?,
            wk: b.bind(g, "wk", &self.wk)?,
            wv: b.bind(g, "wv", &self.wv)?,
            wo: b.bind(g, "wo", &self.wo)?,
            heads: self.heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        run_standalone(x, |g, b, xv| {
            let p = self.bind(g, b)?;
            standard_attention(g, &p, xv)
        })
    }
}

impl ParamVisit for StandardAttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
        f("wo", &self.wo);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
        f("wo", &mut self.wo);
    }
}

/// All `h` score matrices are materialized before the value products.
/// Consumes `x`, which becomes the residual output buffer.
pub fn standard_attention(g: &mut Graph, p: &StandardAttentionVars, x: Var) -> Result<Var> {
    let (len, d) = g.value(x).dims2();
    let h = p.heads;
    if h == 0 || d % h != 0 {
        return Err(Error::InvalidConfig(format!("{h} heads do not divide d = {d}")));
    }
    let dh = d / h;
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;
    let mut weights = Vec::with_capacity(h);
    for i in 0..h {
        let qh = g.slice_cols(q, i * dh, dh)?;
        let kh = g.slice_cols(k, i * dh, dh)?;
        weights.push(g.matmul_t(qh, kh, 1.0)?);
    }
    g.release(q);
    g.release(k);
    let mut parts = Vec::with_capacity(h);
    for (i, s) in weights.into_iter().enumerate() {
        let s = g.scale(s, 1.0 / (dh as f32).sqrt());
        let s = g.softmax(s)?;
        let vh = g.slice_cols(v, i * dh, dh)?;
        parts.push(g.matmul(s, vh)?);
        g.release(s);
    }
    g.release(v);
    let ctx = g.concat_cols(&parts)?;
    let out = g.matmul_add(x, ctx, p.wo)?;
    g.release(ctx);
    // the accounting table charges each head's products at full width d
    let extra = ((h - 1) * len * len * d) as u64;
    g.charge_extra(OpCounters::new(4 * extra, 2 * extra, 2 * extra));
    Ok(out)
}

/// `x + W_down·GELU(W_up·x)` with expansion `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub w_up: Tensor,
    pub w_down: Tensor,
}

pub struct FeedForwardVars {
    pub w_up: Var,
    pub w_down: Var,
}

impl FeedForwardParams {
    pub fn init(rng: &mut impl Rng, d: usize, alpha: usize) -> Self {
        let b = init_bound(d);
        Self {
            w_up: uniform(rng, &[d, d * alpha], b),
            w_down: uniform(rng, &[d * alpha, d], b),
        }
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<FeedForwardVars> {
        Ok(FeedForwardVars {
            w_up: b.bind(g, "w_up", &self.w_up)?,
            w_down: b.bind(g, "w_down", &self.w_down)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        run_standalone(x, |g, b, xv| {
            let p = self.bind(g, b)?;
            feed_forward(g, &p, xv)
        })
    }
}

impl ParamVisit for FeedForwardParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_up", &self.w_up);
        f("w_down", &self.w_down);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_up", &mut self.w_up);
        f("w_down", &mut self.w_down);
    }
}

/// Consumes `x`, which becomes the residual output buffer.
pub fn feed_forward(g: &mut Graph, p: &FeedForwardVars, x: Var) -> Result<Var> {
    let (len, d) = g.value(x).dims2();
    let up = g.matmul(x, p.w_up)?;
    let act = g.gelu(up);
    let down = g.matmul(act, p.w_down)?;
    g.release(act);
    let out = g.add_fused(x, down)?;
    g.release(down);
    // per-unit bias and activation terms of the accounting table
    let ld = (len * d) as u64;
    g.charge_extra(OpCounters::new(4 * ld, ld, 2 * ld));
    Ok(out)
}

/// Depthwise convolution over the `d` embedding channels, kernel `[k × d × 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConvParams {
    pub kernel: Tensor,
}

pub struct DepthwiseConvVars {
    pub kernel: Var,
}

impl DepthwiseConvParams {
    pub fn init(rng: &mut impl Rng, d: usize, k: usize) -> Self {
        Self {
            kernel: uniform(rng, &[k, d, 1], init_bound(d)),
        }
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<DepthwiseConvVars> {
        Ok(DepthwiseConvVars {
            kernel: b.bind(g, "kernel", &self.kernel)?,
        })
    }

    /// Consumes `x`.
    pub fn apply(g: &mut Graph, p: &DepthwiseConvVars, x: Var) -> Result<Var> {
        let y = g.depthwise_conv(x, p.kernel)?;
        g.release(x);
        Ok(y)
    }
}

impl ParamVisit for DepthwiseConvParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("kernel", &self.kernel);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("kernel", &mut self.kernel);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_attention_plus_skip() {
        let d = 3;
        let p = StandardAttentionParams {
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::eye(d),
            wo: Tensor::eye(d),
            heads: 1,
        };
        let x = Tensor::from_rows(&[&[1.0, 0.0, 2.0], &[3.0, -2.0, 0.0]]).unwrap();
        let y = p.forward(&x).unwrap();
        let mean = [2.0, -1.0, 1.0];
        for i in 0..2 {
            for j in 0..3 {
                assert!((y.at(i, j) - (x.at(i, j) + mean[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(StandardAttentionParams::init(&mut rng, 6, 4).is_err());
        let p = StandardAttentionParams::init(&mut rng, 80, 2).unwrap();
        assert_eq!(p.stored_count(), 25_600);
    }

    #[test]
    fn standard_attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = StandardAttentionParams::init(&mut rng, 4, 2).unwrap();
        p.wv = Tensor::eye(4);
        p.wo = Tensor::eye(4);
        let mut x = uniform(&mut rng, &[5, 4], 1.0);
        for i in 0..5 {
            x.data_mut()[i * 4] = 1.0;
        }
        let y = p.forward(&x).unwrap();
        for i in 0..5 {
            assert!((y.at(i, 0) - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_feed_forward_is_identity() {
        let p = FeedForwardParams {
            w_up: Tensor::zeros(&[3, 6]),
            w_down: Tensor::zeros(&[6, 3]),
        };
        let x = Tensor::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        assert!(p.forward(&x).unwrap().bit_eq(&x));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(FeedForwardParams::init(&mut rng, 80, 2).stored_count(), 25_600);
    }

    #[test]
    fn baseline_blocks_pass_grad_check() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = StandardAttentionParams::init(&mut rng, 6, 2).unwrap();
            let mut ins = vec![uniform(&mut rng, &[4, 6], 1.0)];
            p.visit(&mut |_, t| ins.push(t.clone()));
            let err = grad_check(
                |g, v| {
                    let vars = StandardAttentionVars {
                        wq: v[1],
                        wk: v[2],
                        wv: v[3],
                        wo: v[4],
                        heads: 2,
                    };
                    standard_attention(g, &vars, v[0])
                },
                &ins,
                2e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "attention seed {seed}: {err}");

            let p = FeedForwardParams::init(&mut rng, 5, 2);
            let ins = vec![uniform(&mut rng, &[3, 5], 1.0), p.w_up.clone(), p.w_down.clone()];
            let err = grad_check(
                |g, v| {
                    let vars = FeedForwardVars {
                        w_up: v[1],
                        w_down: v[2],
                    };
                    feed_forward(g, &vars, v[0])
                },
                &ins,
                2e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "feed-forward seed {seed}: {err}");
        }
    }

    #[test]
    fn attention_profile_matches_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, d, h) = (10usize, 6usize, 3usize);
        let p = StandardAttentionParams::init(&mut rng, d, h).unwrap();
        let mut g = Graph::profiled();
        let x = g.input(uniform(&mut rng, &[len, d], 1.0)).unwrap();
        let vars = p.bind(&mut g, &mut Binder::frozen()).unwrap();
        standard_attention(&mut g, &vars, x).unwrap();
        let prof = g.profiler().unwrap();
        assert_eq!(prof.peak() as usize, 4 * d * len + len * len * h);
        let (l, d, h) = (len as u64, d as u64, h as u64);
        assert_eq!(
            prof.counters(),
            OpCounters::new(
                8 * l * d * d + 2 * l * l * h * (2 * d + 1),
                l * d * (4 * d + 1) + l * l * h * (2 * d + 1),
                4 * l * d * d + l * l * h * (2 * d + 3),
            )
        );
    }

    #[test]
    fn feed_forward_profile_matches_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (len, d, a) = (7usize, 5usize, 3usize);
        let p = FeedForwardParams::init(&mut rng, d, a);
        let mut g = Graph::profiled();
        let x = g.input(uniform(&mut rng, &[len, d], 1.0)).unwrap();
        let vars = p.bind(&mut g, &mut Binder::frozen()).unwrap();
        feed_forward(&mut g, &vars, x).unwrap();
        let prof = g.profiler().unwrap();
        assert_eq!(prof.peak() as usize, 2 * len * d + len * d * a);
        let (l, d, a) = (len as u64, d as u64, a as u64);
        assert_eq!(
            prof.counters(),
            OpCounters::new(4 * l * d * (d * a + 1), 2 * l * d * (d * a + 1), 2 * l * d * (d * a + 1))
        );
    }
}
