//! Budgeted architecture search over a deterministic grid.
//!
//! Candidates are ranked lexicographically: larger `d`, then larger `v`,
//! then more layers, then larger `α`; ties go to smaller `ℓ`, then smaller
//! `k`, then smaller `r_d`, then fewer heads.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::Serialize;

use crate::analyzer::{model_memory, MemoryReport};
use crate::error::{Error, Result};
use crate::model::{Arch, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SearchSpace {
    pub budget_bytes: u64,
    pub v_choices: Vec<usize>,
    pub len_choices: Vec<usize>,
    pub d_choices: Vec<usize>,
    pub r_d_choices: Vec<usize>,
    pub alpha_choices: Vec<usize>,
    pub k_choices: Vec<usize>,
    pub layer_choices: Vec<usize>,
    pub head_choices: Vec<usize>,
    pub d_state_choices: Vec<usize>,
    pub rho_choices: Vec<usize>,
    pub p_w: u32,
    pub p_a: u32,
}

/// Multiples of `step` inside `[lo, hi]`.
pub fn stepped(lo: usize, hi: usize, step: usize) -> Vec<usize> {
    (lo.div_ceil(step)..=hi / step).map(|i| i * step).filter(|&x| x > 0).collect()
}

impl SearchSpace {
    /// v in 2000–10000 on multiples of 512, ℓ ∈ {256, 512}, d from 64 to 512
    /// in steps of 16, r_d in 16–32 in steps of 8, FP32 storage.
    pub fn with_budget(budget_bytes: u64) -> Self {
        Self {
            budget_bytes,
            v_choices: stepped(2000, 10000, 512),
            len_choices: vec![256, 512],
            d_choices: stepped(64, 512, 16),
            r_d_choices: stepped(16, 32, 8),
            alpha_choices: vec![1, 2],
            k_choices: vec![8, 16, 32],
            layer_choices: (1..=8).collect(),
            head_choices: vec![1, 2, 4],
            d_state_choices: vec![6],
            rho_choices: vec![4],
            p_w: 4,
            p_a: 4,
        }
    }

    fn check(&self) -> Result<()> {
        let lists: [(&str, &Vec<usize>); 9] = [
            ("v", &self.v_choices),
            ("len", &self.len_choices),
            ("d", &self.d_choices),
            ("r_d", &self.r_d_choices),
            ("alpha", &self.alpha_choices),
            ("k", &self.k_choices),
            ("layers", &self.layer_choices),
            ("heads", &self.head_choices),
            ("d_state", &self.d_state_choices),
        ];
        for (name, l) in lists {
            if l.is_empty() {
                return Err(Error::EmptySearchSpace(format!("no {name} choices")));
            }
        }
        if self.rho_choices.is_empty() {
            return Err(Error::EmptySearchSpace("no rho choices".into()));
        }
        Ok(())
    }

    /// Every valid config of `arch` in the grid, unfiltered by budget.
    pub fn grid(&self, arch: Arch) -> Result<Vec<ModelConfig>> {
        self.check()?;
        let one = [None];
        let some = |v: &[usize]| v.iter().map(|&x| Some(x)).collect::<Vec<_>>();
        let r_ds = if arch.uses_nano_embedder() { some(&self.r_d_choices) } else { one.to_vec() };
        let ks = if matches!(arch, Arch::EmbBert | Arch::EmbedderConv | Arch::Mamba) {
            some(&self.k_choices)
        } else {
            one.to_vec()
        };
        let (d_states, rhos) = if arch == Arch::Mamba {
            (some(&self.d_state_choices), some(&self.rho_choices))
        } else {
            (one.to_vec(), one.to_vec())
        };
        let heads: Vec<usize> = if matches!(arch, Arch::BertStd | Arch::BertNe) { self.head_choices.clone() } else { vec![1] };
        let layers: Vec<usize> = if arch.is_embedder_only() { vec![0] } else { self.layer_choices.clone() };
        let alphas: Vec<usize> = if arch.is_embedder_only() { vec![1] } else { self.alpha_choices.clone() };
        let mut out = Vec::new();
        for &v in &self.v_choices {
            for &len in &self.len_choices {
                for &d in &self.d_choices {
                    for &r_d in &r_ds {
                        for &alpha in &alphas {
                            for &k in &ks {
                                for &n in &layers {
                                    for &h in &heads {
                                        for &d_state in &d_states {
                                            for &rho in &rhos {
                                                let c = ModelConfig {
                                                    arch,
                                                    v,
                                                    seq_len: len,
                                                    d,
                                                    r_d,
                                                    alpha,
                                                    k,
                                                    heads: h,
                                                    layers: n,
                                                    d_state,
                                                    rho,
                                                    p_w: self.p_w,
                                                    p_a: self.p_a,
                                                };
                                                if c.validate().is_ok() {
                                                    out.push(c);
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::EmptySearchSpace(format!("no valid {arch} config in the grid")));
        }
        Ok(out)
    }
}

/// Best-first ordering.
pub fn priority(a: &ModelConfig, b: &ModelConfig) -> Ordering {
    b.d.cmp(&a.d)
        .then(b.v.cmp(&a.v))
        .then(b.layers.cmp(&a.layers))
        .then(b.alpha.cmp(&a.alpha))
        .then(a.seq_len.cmp(&b.seq_len))
        .then(a.k.cmp(&b.k))
        .then(a.r_d.cmp(&b.r_d))
        .then(a.heads.cmp(&b.heads))
        .then(a.d_state.cmp(&b.d_state))
        .then(a.rho.cmp(&b.rho))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Candidate {
    pub config: ModelConfig,
    pub memory: MemoryReport,
}

/// Configs whose analytic memory fits the budget, best first.
pub fn enumerate_feasible(space: &SearchSpace, arch: Arch) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for config in space.grid(arch)? {
        let memory = model_memory(&config)?;
        if memory.bytes_total <= space.budget_bytes {
            out.push(Candidate { config, memory });
        }
    }
    out.sort_by(|a, b| priority(&a.config, &b.config));
    Ok(out)
}

pub fn select_config(candidates: &[Candidate]) -> Result<ModelConfig> {
    candidates
        .iter()
        .map(|c| &c.config)
        .min_by(|a, b| priority(a, b))
        .cloned()
        .ok_or(Error::EmptyCandidates)
}

/// Ranked table of the first `limit` candidates.
pub fn candidates_to_text(c: &[Candidate], limit: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>4} {:<13} {:>6} {:>5} {:>5} {:>4} {:>3} {:>3} {:>3} {:>3} {:>10} {:>10} {:>12}",
        "rank", "arch", "v", "len", "d", "r_d", "a", "k", "h", "N", "weights", "act_peak", "bytes"
    );
    let opt = |x: Option<usize>| x.map_or("-".to_string(), |v| v.to_string());
    for (i, x) in c.iter().take(limit).enumerate() {
        let cfg = &x.config;
        let _ = writeln!(
            s,
            "{:>4} {:<13} {:>6} {:>5} {:>5} {:>4} {:>3} {:>3} {:>3} {:>3} {:>10} {:>10} {:>12}",
            i + 1,
            cfg.arch.name(),
            cfg.v,
            cfg.seq_len,
            cfg.d,
            opt(cfg.r_d),
            cfg.alpha,
            opt(cfg.k),
            cfg.heads,
            cfg.layers,
            x.memory.w_total,
            x.memory.a_peak,
            x.memory.bytes_total
        );
    }
    let _ = writeln!(s, "{} feasible", c.len());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_MB: u64 = 2 * 1024 * 1024;

    fn small_space(budget: u64) -> SearchSpace {
        SearchSpace {
            v_choices: vec![2048, 8192],
            d_choices: vec![64, 128, 192],
            r_d_choices: vec![16],
            k_choices: vec![32],
            layer_choices: vec![1, 4],
            ..SearchSpace::with_budget(budget)
        }
    }

    #[test]
    fn defaults_cover_the_published_ranges() {
        let s = SearchSpace::with_budget(TWO_MB);
        assert_eq!(s.v_choices.first(), Some(&2048));
        assert_eq!(s.v_choices.last(), Some(&9728));
        assert!(s.v_choices.contains(&8192));
        assert_eq!(s.d_choices[0], 64);
        assert_eq!(s.r_d_choices, vec![16, 24, 32]);
    }

    #[test]
    fn published_config_is_feasible_at_2mb() {
        let f = enumerate_feasible(&small_space(TWO_MB), Arch::EmbBert).unwrap();
        let target = ModelConfig::embbert_q();
        let hit = f.iter().find(|c| c.config == target).expect("published config feasible");
        assert_eq!(hit.memory.bytes_total, 1_938_432);
        for c in &f {
            assert!(model_memory(&c.config).unwrap().bytes_total <= TWO_MB);
        }
    }

    #[test]
    fn tiny_and_unbounded_budgets() {
        assert!(enumerate_feasible(&small_space(100), Arch::EmbBert).unwrap().is_empty());
        let space = small_space(u64::MAX);
        let all = enumerate_feasible(&space, Arch::EmbBert).unwrap();
        assert_eq!(all.len(), space.grid(Arch::EmbBert).unwrap().len());
        let mut empty = small_space(TWO_MB);
        empty.d_choices.clear();
        assert!(matches!(enumerate_feasible(&empty, Arch::EmbBert), Err(Error::EmptySearchSpace(_))));
        assert!(matches!(select_config(&[]), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn priority_prefers_d_then_v() {
        let a = ModelConfig::embbert_q();
        let mut b = a.clone();
        b.d = 144;
        assert_eq!(priority(&b, &a), Ordering::Less);
        let mut c = a.clone();
        c.v = 4096;
        assert_eq!(priority(&a, &c), Ordering::Less);
        let mut e = a.clone();
        e.seq_len = 512;
        assert_eq!(priority(&a, &e), Ordering::Less);
    }

    #[test]
    fn budget_growth_only_adds_candidates() {
        let small = enumerate_feasible(&small_space(1_500_000), Arch::EmbBert).unwrap();
        let big = enumerate_feasible(&small_space(TWO_MB), Arch::EmbBert).unwrap();
        assert!(small.iter().all(|c| big.contains(c)));
        assert!(big.len() > small.len());
    }

    #[test]
    fn full_default_space_selection_fits() {
        let f = enumerate_feasible(&SearchSpace::with_budget(TWO_MB), Arch::EmbBert).unwrap();
        let best = select_config(&f).unwrap();
        assert!(best.d >= 64);
        assert!(model_memory(&best).unwrap().bytes_total <= TWO_MB);
        assert_eq!(best, f[0].config);
    }
}
