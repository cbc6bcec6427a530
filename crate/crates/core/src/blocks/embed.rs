use rand::Rng;

use super::{init_bound, uniform, Binder, ParamVisit};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Token and position tables in a reduced width `r_d`, each projected to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct NanoEmbedderParams {
    pub token_table: Tensor,
    pub pos_table: Tensor,
    pub segment_table: Tensor,
    pub token_proj: Tensor,
    pub pos_proj: Tensor,
}

pub struct NanoEmbedderVars {
    pub token_table: Var,
    pub pos_table: Var,
    pub segment_table: Var,
    pub token_proj: Var,
    pub pos_proj: Var,
}

impl NanoEmbedderParams {
    pub fn init(rng: &mut impl Rng, v: usize, len: usize, d: usize, r_d: usize) -> Self {
        let b = init_bound(d);
        Self {
            token_table: uniform(rng, &[v, r_d], b),
            pos_table: uniform(rng, &[len, r_d], b),
            segment_table: uniform(rng, &[2, d], b),
            token_proj: uniform(rng, &[r_d, d], b),
            pos_proj: uniform(rng, &[r_d, d], b),
        }
    }

    pub fn zeros(v: usize, len: usize, d: usize, r_d: usize) -> Self {
        Self {
            token_table: Tensor::zeros(&[v, r_d]),
            pos_table: Tensor::zeros(&[len, r_d]),
            segment_table: Tensor::zeros(&[2, d]),
            token_proj: Tensor::zeros(&[r_d, d]),
            pos_proj: Tensor::zeros(&[r_d, d]),
        }
    }

    /// `r_d·(v + ℓ + 2d) + 2d`.
    pub fn param_count(&self) -> usize {
        self.stored_count()
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<NanoEmbedderVars> {
        Ok(NanoEmbedderVars {
            token_table: b.bind(g, "token_table", &self.token_table)?,
            pos_table: b.bind(g, "pos_table", &self.pos_table)?,
            segment_table: b.bind(g, "segment_table", &self.segment_table)?,
            token_proj: b.bind(g, "token_proj", &self.token_proj)?,
            pos_proj: b.bind(g, "pos_proj", &self.pos_proj)?,
        })
    }

    pub fn forward(&self, tokens: &[usize], segments: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, &mut Binder::frozen())?;
        let out = nano_embed(&mut g, &vars, tokens, segments)?;
        Ok(g.value(out).clone())
    }
}

impl ParamVisit for NanoEmbedderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("token_table", &self.token_table);
        f("pos_table", &self.pos_table);
        f("segment_table", &self.segment_table);
        f("token_proj", &self.token_proj);
        f("pos_proj", &self.pos_proj);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("token_table", &mut self.token_table);
        f("pos_table", &mut self.pos_table);
        f("segment_table", &mut self.segment_table);
        f("token_proj", &mut self.token_proj);
        f("pos_proj", &mut self.pos_proj);
    }
}

fn check_lengths(g: &Graph, pos_table: Var, tokens: &[usize], segments: &[usize]) -> Result<()> {
    let len = g.value(pos_table).dims2().0;
    if tokens.len() != len {
        return Err(Error::SequenceLength {
            expected: len,
            found: tokens.len(),
        });
    }
    if segments.len() != len {
        return Err(Error::SequenceLength {
            expected: len,
            found: segments.len(),
        });
    }
    Ok(())
}

/// `token_proj(token rows) + pos_proj(pos rows) + segment rows`.
pub fn nano_embed(
    g: &mut Graph,
    p: &NanoEmbedderVars,
    tokens: &[usize],
    segments: &[usize],
) -> Result<Var> {
    check_lengths(g, p.pos_table, tokens, segments)?;
    let rows = g.gather(p.token_table, tokens)?;
    let tok = g.matmul(rows, p.token_proj)?;
    g.release(rows);
    let pos = g.take_rows(p.pos_table, tokens.len())?;
    let pos_d = g.matmul(pos, p.pos_proj)?;
    g.release(pos);
    let sum = g.add_fused(tok, pos_d)?;
    g.release(pos_d);
    g.segment_add(sum, p.segment_table, segments)
}

/// Full-width token, position and segment dictionaries.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardEmbedderParams {
    pub token_table: Tensor,
    pub pos_table: Tensor,
    pub segment_table: Tensor,
}

pub struct StandardEmbedderVars {
    pub token_table: Var,
    pub pos_table: Var,
    pub segment_table: Var,
}

impl StandardEmbedderParams {
    pub fn init(rng: &mut impl Rng, v: usize, len: usize, d: usize) -> Self {
        let b = init_bound(d);
        Self {
            token_table: uniform(rng, &[v, d], b),
            pos_table: uniform(rng, &[len, d], b),
            segment_table: uniform(rng, &[2, d], b),
        }
    }

    /// `d·(v + ℓ + 2)`.
    pub fn param_count(&self) -> usize {
        self.stored_count()
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<StandardEmbedderVars> {
        Ok(StandardEmbedderVars {
            token_table: b.bind(g, "token_table", &self.token_table)?,
            pos_table: b.bind(g, "pos_table", &self.pos_table)?,
            segment_table: b.bind(g, "segment_table", &self.segment_table)?,
        })
    }

    pub fn forward(&self, tokens: &[usize], segments: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, &mut Binder::frozen())?;
        let out = standard_embed(&mut g, &vars, tokens, segments)?;
        Ok(g.value(out).clone())
    }
}

impl ParamVisit for StandardEmbedderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("token_table", &self.token_table);
        f("pos_table", &self.pos_table);
        f("segment_table", &self.segment_table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("token_table", &mut self.token_table);
        f("pos_table", &mut self.pos_table);
        f("segment_table", &mut self.segment_table);
    }
}

pub fn standard_embed(
    g: &mut Graph,
    p: &StandardEmbedderVars,
    tokens: &[usize],
    segments: &[usize],
) -> Result<Var> {
    check_lengths(g, p.pos_table, tokens, segments)?;
    let tok = g.gather(p.token_table, tokens)?;
    let pos = g.take_rows(p.pos_table, tokens.len())?;
    let sum = g.add(tok, pos)?;
    g.release(pos);
    g.segment_add(sum, p.segment_table, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nano_parameter_count_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NanoEmbedderParams::init(&mut rng, 8192, 256, 128, 16);
        assert_eq!(p.param_count(), 139_520);
        for (v, l, d, r) in [(10, 4, 6, 2), (64, 8, 16, 4), (3, 1, 1, 1)] {
            let p = NanoEmbedderParams::init(&mut rng, v, l, d, r);
            assert_eq!(p.param_count(), r * (v + l + 2 * d) + 2 * d);
        }
    }

    #[test]
    fn zero_tables_return_segment_rows() {
        let mut p = NanoEmbedderParams::zeros(5, 3, 4, 2);
        p.segment_table = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[-1.0, -2.0, -3.0, -4.0]]).unwrap();
        let out = p.forward(&[1, 4, 0], &[0, 1, 1]).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
        assert_eq!(out.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out.row(2), &[-1.0, -2.0, -3.0, -4.0]);
    }

    #[test]
    fn input_errors() {
        let p = NanoEmbedderParams::zeros(5, 3, 4, 2);
        assert!(matches!(
            p.forward(&[1, 5, 0], &[0; 3]),
            Err(Error::TokenOutOfRange { id: 5, vocab: 5 })
        ));
        assert!(matches!(p.forward(&[1, 2], &[0; 2]), Err(Error::SequenceLength { .. })));
        assert!(matches!(p.forward(&[1, 2, 3], &[0, 2, 0]), Err(Error::SegmentOutOfRange(2))));
    }

    #[test]
    fn standard_embedder_counts_and_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = StandardEmbedderParams::init(&mut rng, 2048, 256, 80);
        assert_eq!(p.param_count(), 184_480);
        let z = StandardEmbedderParams {
            token_table: Tensor::zeros(&[4, 3]),
            pos_table: Tensor::zeros(&[2, 3]),
            segment_table: Tensor::zeros(&[2, 3]),
        };
        assert!(z.forward(&[3, 1], &[0, 1]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedders_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = NanoEmbedderParams::init(&mut rng, 7, 4, 6, 3);
        let mut ins = Vec::new();
        p.visit(&mut |_, t| ins.push(t.clone()));
        let err = grad_check(
            |g, v| {
                let vars = NanoEmbedderVars {
                    token_table: v[0],
                    pos_table: v[1],
                    segment_table: v[2],
                    token_proj: v[3],
                    pos_proj: v[4],
                };
                nano_embed(g, &vars, &[6, 0, 6, 2], &[0, 0, 1, 1])
            },
            &ins,
            2e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");

        let p = StandardEmbedderParams::init(&mut rng, 5, 3, 4);
        let mut ins = Vec::new();
        p.visit(&mut |_, t| ins.push(t.clone()));
        let err = grad_check(
            |g, v| {
                let vars = StandardEmbedderVars {
                    token_table: v[0],
                    pos_table: v[1],
                    segment_table: v[2],
                };
                standard_embed(g, &vars, &[4, 4, 1], &[1, 0, 0])
            },
            &ins,
            2e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
