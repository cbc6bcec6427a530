use rand::Rng;

use super::baseline::{NormParams, NormVars};
use super::{init_bound, run_standalone, uniform, Binder, ParamVisit, NORM_EPS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::profile::OpCounters;
use crate::tensor::Tensor;

/// Single-head attention with `K = V = x`: only `W₁` (queries) and `W₂` (output).
#[derive(Clone, Debug, PartialEq)]
pub struct EfficientAttentionParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

pub struct EfficientAttentionVars {
    pub w1: Var,
    pub w2: Var,
}

impl EfficientAttentionParams {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        let b = init_bound(d);
        Self {
            w1: uniform(rng, &[d, d], b),
            w2: uniform(rng, &[d, d], b),
        }
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<EfficientAttentionVars> {
        Ok(EfficientAttentionVars {
            w1: b.bind(g, "w1", &self.w1)?,
            w2: b.bind(g, "w2", &self.w2)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        run_standalone(x, |g, b, xv| {
            let p = self.bind(g, b)?;
            efficient_attention(g, &p, xv, false)
        })
    }
}

impl ParamVisit for EfficientAttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w1", &self.w1);
        f("w2", &self.w2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w1", &mut self.w1);
        f("w2", &mut self.w2);
    }
}

/// `W₂(softmax(Q·xᵀ/√d)·x)` with `Q = x·W₁`; with `residual`, the result is added onto `x`.
pub fn efficient_attention(
    g: &mut Graph,
    p: &EfficientAttentionVars,
    x: Var,
    residual: bool,
) -> Result<Var> {
    let (len, d) = g.value(x).dims2();
    let q = g.matmul(x, p.w1)?;
    let scores = g.matmul_t(q, x, 1.0 / (d as f32).sqrt())?;
    g.release(q);
    let weights = g.softmax(scores)?;
    let ctx = g.matmul(weights, x)?;
    g.release(weights);
    let out = if residual {
        g.matmul_add(x, ctx, p.w2)?
    } else {
        // the accounting table keeps the ℓd output sums with or without the skip
        let o = g.matmul(ctx, p.w2)?;
        g.charge_extra(OpCounters::new(0, (len * d) as u64, 0));
        o
    };
    g.release(ctx);
    Ok(out)
}

/// Depthwise expansion `d → d·α` with kernel `k`, SiLU, then a projection back to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSkipParams {
    /// `[k × d × α]`: output channel `c·α + j` filters input channel `c`.
    pub conv_kernel: Tensor,
    pub fc: Tensor,
}

pub struct ConvSkipVars {
    pub conv_kernel: Var,
    pub fc: Var,
}

impl ConvSkipParams {
    pub fn init(rng: &mut impl Rng, d: usize, alpha: usize, k: usize) -> Self {
        let b = init_bound(d);
        Self {
            conv_kernel: uniform(rng, &[k, d, alpha], b),
            fc: uniform(rng, &[d * alpha, d], b),
        }
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<ConvSkipVars> {
        Ok(ConvSkipVars {
            conv_kernel: b.bind(g, "conv_kernel", &self.conv_kernel)?,
            fc: b.bind(g, "fc", &self.fc)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        run_standalone(x, |g, b, xv| {
            let p = self.bind(g, b)?;
            conv_skip(g, &p, xv)
        })
    }
}

impl ParamVisit for ConvSkipParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("conv_kernel", &self.conv_kernel);
        f("fc", &self.fc);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("conv_kernel", &mut self.conv_kernel);
        f("fc", &mut self.fc);
    }
}

pub fn conv_skip(g: &mut Graph, p: &ConvSkipVars, x: Var) -> Result<Var> {
    conv_skip_inner(g, p, x, false)
}

fn conv_skip_inner(g: &mut Graph, p: &ConvSkipVars, x: Var, consume: bool) -> Result<Var> {
    let conv = g.depthwise_conv(x, p.conv_kernel)?;
    if consume {
        g.release(x);
    }
    let act = g.silu(conv);
    let out = g.matmul(act, p.fc)?;
    g.release(act);
    Ok(out)
}

/// Weights of the two branches, `λ_EA = exp(l1·l2)` and `λ_CS = exp(l3·l4)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaParams {
    pub l1: Tensor,
    pub l2: Tensor,
    pub l3: Tensor,
    pub l4: Tensor,
    frozen: Option<(f32, f32)>,
}

pub enum LambdaVars {
    Live { l1: Var, l2: Var, l3: Var, l4: Var },
    Frozen { ea: Var, cs: Var },
}

fn dot(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

impl LambdaParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            l1: Tensor::zeros(&[d]),
            l2: Tensor::zeros(&[d]),
            l3: Tensor::zeros(&[d]),
            l4: Tensor::zeros(&[d]),
            frozen: None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// `(λ_EA, λ_CS)`.
    pub fn values(&self) -> (f32, f32) {
        self.frozen.unwrap_or_else(|| {
            (
                dot(&self.l1, &self.l2).exp(),
                dot(&self.l3, &self.l4).exp(),
            )
        })
    }

    /// Stores both scalars; later forwards skip the dot products.
    pub fn freeze(&self) -> Result<LambdaParams> {
        if self.is_frozen() {
            return Err(Error::AlreadyFrozen);
        }
        let mut out = self.clone();
        out.frozen = Some(self.values());
        Ok(out)
    }

    pub(crate) fn set_frozen(&mut self, values: Option<(f32, f32)>) {
        self.frozen = values;
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<LambdaVars> {
        Ok(match self.frozen {
            Some((ea, cs)) => LambdaVars::Frozen {
                ea: g.constant(Tensor::scalar(ea))?,
                cs: g.constant(Tensor::scalar(cs))?,
            },
            None => LambdaVars::Live {
                l1: b.bind(g, "l1", &self.l1)?,
                l2: b.bind(g, "l2", &self.l2)?,
                l3: b.bind(g, "l3", &self.l3)?,
                l4: b.bind(g, "l4", &self.l4)?,
            },
        })
    }

    fn scalars(g: &mut Graph, v: &LambdaVars) -> Result<(Var, Var)> {
        Ok(match *v {
            LambdaVars::Frozen { ea, cs } => (ea, cs),
            LambdaVars::Live { l1, l2, l3, l4 } => {
                let a = g.dot(l1, l2)?;
                let c = g.dot(l3, l4)?;
                (g.exp(a), g.exp(c))
            }
        })
    }
}

impl ParamVisit for LambdaParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("l1", &self.l1);
        f("l2", &self.l2);
        f("l3", &self.l3);
        f("l4", &self.l4);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("l1", &mut self.l1);
        f("l2", &mut self.l2);
        f("l3", &mut self.l3);
        f("l4", &mut self.l4);
    }
}

/// Layer norm, then `λ_EA·EA(Δ') − λ_CS·CS(Δ')`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub norm: NormParams,
    pub attn: EfficientAttentionParams,
    pub skip: ConvSkipParams,
    pub lambdas: LambdaParams,
}

pub struct EncoderVars {
    pub norm: NormVars,
    pub attn: EfficientAttentionVars,
    pub skip: ConvSkipVars,
    pub lambdas: LambdaVars,
}

impl EncoderParams {
    pub fn init(rng: &mut impl Rng, d: usize, alpha: usize, k: usize) -> Self {
        Self {
            norm: NormParams::new(d),
            attn: EfficientAttentionParams::init(rng, d),
            skip: ConvSkipParams::init(rng, d, alpha, k),
            lambdas: LambdaParams::zeros(d),
        }
    }

    /// `2d + 2d² + d²α + kdα`; the λ vectors are not part of the count.
    pub fn param_count(&self) -> usize {
        self.norm.stored_count() + self.attn.stored_count() + self.skip.stored_count()
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<EncoderVars> {
        b.push_scope("norm");
        let norm = self.norm.bind(g, b);
        b.pop_scope();
        b.push_scope("attn");
        let attn = self.attn.bind(g, b);
        b.pop_scope();
        b.push_scope("skip");
        let skip = self.skip.bind(g, b);
        b.pop_scope();
        b.push_scope("lambdas");
        let lambdas = self.lambdas.bind(g, b);
        b.pop_scope();
        Ok(EncoderVars {
            norm: norm?,
            attn: attn?,
            skip: skip?,
            lambdas: lambdas?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        run_standalone(x, |g, b, xv| {
            let p = self.bind(g, b)?;
            efficient_encoder(g, &p, xv)
        })
    }

    pub fn freeze_lambdas(&mut self) -> Result<()> {
        self.lambdas = self.lambdas.freeze()?;
        Ok(())
    }
}

impl ParamVisit for EncoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.visit(&mut |n, t| f(&format!("norm.{n}"), t));
        self.attn.visit(&mut |n, t| f(&format!("attn.{n}"), t));
        self.skip.visit(&mut |n, t| f(&format!("skip.{n}"), t));
        self.lambdas.visit(&mut |n, t| f(&format!("lambdas.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.visit_mut(&mut |n, t| f(&format!("norm.{n}"), t));
        self.attn.visit_mut(&mut |n, t| f(&format!("attn.{n}"), t));
        self.skip.visit_mut(&mut |n, t| f(&format!("skip.{n}"), t));
        self.lambdas.visit_mut(&mut |n, t| f(&format!("lambdas.{n}"), t));
    }
}

/// Consumes `x`; the normalized input feeds both branches.
pub fn efficient_encoder(g: &mut Graph, p: &EncoderVars, x: Var) -> Result<Var> {
    let normed = g.layer_norm(x, p.norm.gamma, p.norm.beta, NORM_EPS)?;
    g.release(x);
    let ea = efficient_attention(g, &p.attn, normed, false)?;
    let cs = conv_skip_inner(g, &p.skip, normed, true)?;
    let (la, lc) = LambdaParams::scalars(g, &p.lambdas)?;
    let out = g.weighted_difference(ea, la, cs, lc)?;
    g.release(cs);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::profile::OpCounters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_x(rng: &mut ChaCha8Rng, len: usize, d: usize) -> Tensor {
        uniform(rng, &[len, d], 1.0)
    }

    #[test]
    fn single_token_identity_attention_returns_input() {
        let p = EfficientAttentionParams {
            w1: Tensor::eye(3),
            w2: Tensor::eye(3),
        };
        let x = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap();
        assert!(p.forward(&x).unwrap().max_abs_diff(&x) < 1e-7);
    }

    #[test]
    fn zero_queries_average_the_rows() {
        let p = EfficientAttentionParams {
            w1: Tensor::zeros(&[2, 2]),
            w2: Tensor::eye(2),
        };
        let x = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 0.0]]).unwrap();
        let y = p.forward(&x).unwrap();
        for i in 0..3 {
            assert!((y.at(i, 0) - 3.0).abs() < 1e-6);
            assert!((y.at(i, 1) - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = rand_x(&mut rng, 5, 4);
        for i in 0..5 {
            x.data_mut()[i * 4] = 1.0;
        }
        let p = EfficientAttentionParams {
            w1: uniform(&mut rng, &[4, 4], 1.0),
            w2: Tensor::eye(4),
        };
        let y = p.forward(&x).unwrap();
        for i in 0..5 {
            assert!((y.at(i, 0) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_skip_examples() {
        let mut kernel = Tensor::zeros(&[1, 3, 1]);
        kernel.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let p = ConvSkipParams {
            conv_kernel: kernel,
            fc: Tensor::eye(3),
        };
        let x = Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[0.0, 1.0, -3.0]]).unwrap();
        let y = p.forward(&x).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((crate::ops::silu_scalar(*a) - b).abs() < 1e-7);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = ConvSkipParams {
            conv_kernel: Tensor::zeros(&[3, 3, 2]),
            fc: uniform(&mut rng, &[6, 3], 1.0),
        };
        assert!(z.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_weight_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = EncoderParams::init(&mut rng, 128, 1, 32);
        assert_eq!(p.param_count(), 53_504);
        for (d, a, k) in [(8, 2, 3), (5, 3, 1), (16, 1, 7)] {
            let p = EncoderParams::init(&mut rng, d, a, k);
            assert_eq!(p.param_count(), 2 * d + 2 * d * d + d * d * a + k * d * a);
        }
    }

    #[test]
    fn zero_lambdas_give_plain_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = EncoderParams::init(&mut rng, 6, 2, 3);
        let x = rand_x(&mut rng, 5, 6);
        let normed = crate::ops::layer_norm(&x, &p.norm.gamma, &p.norm.beta, NORM_EPS).unwrap();
        let ea = p.attn.forward(&normed).unwrap();
        let cs = p.skip.forward(&normed).unwrap();
        let y = p.forward(&x).unwrap();
        for i in 0..y.numel() {
            assert!((y.data()[i] - (ea.data()[i] - cs.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_skip_reduces_to_attention_after_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = EncoderParams::init(&mut rng, 4, 1, 3);
        p.skip.fc = Tensor::zeros(&[4, 4]);
        let x = rand_x(&mut rng, 3, 4);
        let normed = crate::ops::layer_norm(&x, &p.norm.gamma, &p.norm.beta, NORM_EPS).unwrap();
        let ea = p.attn.forward(&normed).unwrap();
        assert!(p.forward(&x).unwrap().bit_eq(&ea));
    }

    #[test]
    fn freezing_lambdas() {
        let mut l = LambdaParams::zeros(3);
        assert_eq!(l.freeze().unwrap().values(), (1.0, 1.0));
        l.l1 = Tensor::vector(vec![3f32.ln(), 0.0, 0.0]).unwrap();
        l.l2 = Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap();
        let f = l.freeze().unwrap();
        assert!((f.values().0 - 3.0).abs() < 1e-6);
        assert!(matches!(f.freeze(), Err(Error::AlreadyFrozen)));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = EncoderParams::init(&mut rng, 6, 1, 3);
        for t in [&mut p.lambdas.l1, &mut p.lambdas.l2, &mut p.lambdas.l3, &mut p.lambdas.l4] {
            *t = uniform(&mut rng, &[6], 0.5);
        }
        let x = rand_x(&mut rng, 4, 6);
        let before = p.forward(&x).unwrap();
        p.freeze_lambdas().unwrap();
        let after = p.forward(&x).unwrap();
        for (a, b) in before.data().iter().zip(after.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn encoder_passes_grad_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = EncoderParams::init(&mut rng, 4, 2, 3);
            for t in [&mut p.lambdas.l1, &mut p.lambdas.l2, &mut p.lambdas.l3, &mut p.lambdas.l4] {
                *t = uniform(&mut rng, &[4], 0.3);
            }
            let mut ins = vec![rand_x(&mut rng, 5, 4)];
            p.visit(&mut |_, t| ins.push(t.clone()));
            let err = grad_check(
                |g, v| {
                    let vars = EncoderVars {
                        norm: NormVars { gamma: v[1], beta: v[2] },
                        attn: EfficientAttentionVars { w1: v[3], w2: v[4] },
                        skip: ConvSkipVars { conv_kernel: v[5], fc: v[6] },
                        lambdas: LambdaVars::Live { l1: v[7], l2: v[8], l3: v[9], l4: v[10] },
                    };
                    efficient_encoder(g, &vars, v[0])
                },
                &ins,
                2e-3,
            )
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn encoder_profile_peak_is_max_of_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (len, d, alpha, k) = (12usize, 4usize, 2usize, 3usize);
        let p = EncoderParams::init(&mut rng, d, alpha, k);
        let mut g = Graph::profiled();
        let x = g.input(rand_x(&mut rng, len, d)).unwrap();
        let vars = p.bind(&mut g, &mut Binder::frozen()).unwrap();
        efficient_encoder(&mut g, &vars, x).unwrap();
        let prof = g.profiler().unwrap();
        let ea = 2 * d * len + len * len;
        let cs = d * len * (2 + alpha);
        assert_eq!(prof.peak(), ea.max(cs) as u64);
        let (l, d, a, k) = (len as u64, d as u64, alpha as u64, k as u64);
        let expect = OpCounters::new(
            l * d * d * (4 + 2 * a) + l * l * (4 * d + 2) + l * d * k * a + 2 * d * (l + 1),
            l * d * d * (2 + a) + l * l * (2 * d + 1) + l * d * (a * k + 1) + l * d,
            l * d * d * (2 + a) + l * l * (2 * d + 2) + l * d * a * k + l * d,
        );
        assert_eq!(prof.counters(), expect);
    }
}
