//! Layer-level building blocks.
//!
//! Each block has a parameter struct that owns its tensors and a graph-level
//! forward function that works on bound [`Var`]s. Binding goes through a
//! [`Binder`], which decides per tensor name whether it is trainable and
//! remembers the name → node mapping for the optimizer.
//!
//! Block forwards release dead buffers explicitly so that the profiler's
//! activation peak follows the accounting model.

mod baseline;
mod embed;
mod encoder;

pub use baseline::{
    feed_forward, layer_norm, standard_attention, DepthwiseConvParams, DepthwiseConvVars,
    FeedForwardParams, FeedForwardVars, NormParams, NormVars, StandardAttentionParams,
    StandardAttentionVars,
};
pub use embed::{
    nano_embed, standard_embed, NanoEmbedderParams, NanoEmbedderVars, StandardEmbedderParams,
    StandardEmbedderVars,
};
pub use encoder::{
    conv_skip, efficient_attention, efficient_encoder, ConvSkipParams, ConvSkipVars,
    EfficientAttentionParams, EfficientAttentionVars, EncoderParams, EncoderVars, LambdaParams,
    LambdaVars,
};

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f32 = 1e-5;

/// Visits the named tensors of a parameter struct in a fixed order.
pub trait ParamVisit {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn stored_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Places parameter tensors into a graph, as trainable params or constants.
pub struct Binder<'a> {
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    scope: Vec<String>,
    bound: Vec<(String, Var)>,
}

impl<'a> Binder<'a> {
    /// Everything constant: inference only.
    pub fn frozen() -> Self {
        Self::with(|_| false)
    }

    pub fn all_trainable() -> Self {
        Self::with(|_| true)
    }

    pub fn with(trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            trainable: Box::new(trainable),
            scope: Vec::new(),
            bound: Vec::new(),
        }
    }

    pub fn push_scope(&mut self, s: impl Into<String>) {
        self.scope.push(s.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn full_name(&self, local: &str) -> String {
        let mut name = self.scope.join(".");
        if !name.is_empty() {
            name.push('.');
        }
        name.push_str(local);
        name
    }

    pub fn bind(&mut self, g: &mut Graph, local: &str, t: &Tensor) -> Result<Var> {
        let name = self.full_name(local);
        let v = if (self.trainable)(&name) {
            let v = g.param(t.clone())?;
            self.bound.push((name, v));
            v
        } else {
            g.constant(t.clone())?
        };
        Ok(v)
    }

    /// Trainable tensors bound so far, by full name.
    pub fn trainable_vars(&self) -> &[(String, Var)] {
        &self.bound
    }

    pub fn into_trainable_vars(self) -> Vec<(String, Var)> {
        self.bound
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

pub(crate) fn init_bound(d: usize) -> f32 {
    1.0 / (d as f32).sqrt()
}

/// Runs a block on a fresh unprofiled graph and returns the output value.
pub(crate) fn run_standalone<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, &mut Binder, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut b = Binder::frozen();
    let xv = g.input(x.clone())?;
    let out = f(&mut g, &mut b, xv)?;
    Ok(g.value(out).clone())
}
