//! Operation counters and the activation ledger used for empirical accounting.
//!
//! The accounting model:
//! - elementwise ops, activations and softmax run in place and only occupy
//!   their input buffer;
//! - a matrix product holds both inputs and its output;
//! - a fully connected layer holds one input and its output (weights are not
//!   activations);
//! - a layer's activation size is the high-water mark of live buffers while
//!   it runs, including the buffer it received.
//!
//! Per-op counter charges live next to each op in [`crate::graph`].

use std::collections::HashMap;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpCounters {
    pub memory_accesses: u64,
    pub summations: u64,
    pub multiplications: u64,
}

impl OpCounters {
    pub const ZERO: OpCounters = OpCounters {
        memory_accesses: 0,
        summations: 0,
        multiplications: 0,
    };

    pub fn new(memory_accesses: u64, summations: u64, multiplications: u64) -> Self {
        Self {
            memory_accesses,
            summations,
            multiplications,
        }
    }

    pub fn scaled(self, k: u64) -> Self {
        Self::new(
            self.memory_accesses * k,
            self.summations * k,
            self.multiplications * k,
        )
    }
}

impl Add for OpCounters {
    type Output = OpCounters;
    fn add(self, o: OpCounters) -> OpCounters {
        OpCounters::new(
            self.memory_accesses + o.memory_accesses,
            self.summations + o.summations,
            self.multiplications + o.multiplications,
        )
    }
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, o: OpCounters) {
        *self = *self + o;
    }
}

impl Sub for OpCounters {
    type Output = OpCounters;
    fn sub(self, o: OpCounters) -> OpCounters {
        OpCounters::new(
            self.memory_accesses - o.memory_accesses,
            self.summations - o.summations,
            self.multiplications - o.multiplications,
        )
    }
}

impl std::iter::Sum for OpCounters {
    fn sum<I: Iterator<Item = OpCounters>>(iter: I) -> Self {
        iter.fold(OpCounters::ZERO, |a, b| a + b)
    }
}

/// High-water-mark ledger of live activation buffers, keyed by graph node.
#[derive(Debug, Default)]
pub struct ActivationLedger {
    live: HashMap<usize, u64>,
    current: u64,
    peak: u64,
}

impl ActivationLedger {
    pub fn alloc(&mut self, id: usize, elems: u64) {
        if let Some(old) = self.live.insert(id, elems) {
            self.current -= old;
        }
        self.current += elems;
        self.peak = self.peak.max(self.current);
    }

    pub fn release(&mut self, id: usize) {
        if let Some(n) = self.live.remove(&id) {
            self.current -= n;
        }
    }

    /// The buffer of `from` now belongs to `to` (in-place op).
    pub fn transfer(&mut self, from: usize, to: usize) {
        if let Some(n) = self.live.remove(&from) {
            self.live.insert(to, n);
        }
    }

    /// Several buffers become one, e.g. per-head outputs written side by side.
    pub fn merge(&mut self, from: &[usize], to: usize) {
        let total: u64 = from.iter().filter_map(|id| self.live.remove(id)).sum();
        if total > 0 {
            self.live.insert(to, total);
        }
    }

    pub fn is_live(&self, id: usize) -> bool {
        self.live.contains_key(&id)
    }

    pub fn current(&self) -> u64 {
        self.current
    }

    pub fn peak(&self) -> u64 {
        self.peak
    }

    fn reset_peak(&mut self) {
        self.peak = self.current;
    }
}

/// Counters and activation peak measured over one named section of a forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionProfile {
    pub name: String,
    pub counters: OpCounters,
    pub peak_activations: u64,
}

/// One profiling session. Not shared between threads.
#[derive(Debug, Default)]
pub struct Profiler {
    counters: OpCounters,
    ledger: ActivationLedger,
    open: Option<(String, OpCounters, u64)>,
    sections: Vec<SectionProfile>,
}

impl Profiler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, c: OpCounters) {
        self.counters += c;
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn ledger(&self) -> &ActivationLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut ActivationLedger {
        &mut self.ledger
    }

    /// Starts a named section; the previous one, if open, is closed first.
    pub fn begin_section(&mut self, name: impl Into<String>) {
        self.end_section();
        let overall = self.ledger.peak;
        self.ledger.reset_peak();
        self.open = Some((name.into(), self.counters, overall));
    }

    pub fn end_section(&mut self) {
        if let Some((name, start, overall)) = self.open.take() {
            let peak = self.ledger.peak;
            self.sections.push(SectionProfile {
                name,
                counters: self.counters - start,
                peak_activations: peak,
            });
            self.ledger.peak = overall.max(peak);
        }
    }

    pub fn sections(&self) -> &[SectionProfile] {
        &self.sections
    }

    pub fn into_sections(mut self) -> Vec<SectionProfile> {
        self.end_section();
        self.sections
    }

    pub fn peak(&self) -> u64 {
        self.ledger.peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_tracks_high_water_mark() {
        let mut l = ActivationLedger::default();
        l.alloc(0, 10);
        l.alloc(1, 5);
        assert_eq!(l.peak(), 15);
        l.release(0);
        l.alloc(2, 7);
        assert_eq!(l.current(), 12);
        assert_eq!(l.peak(), 15);
        l.transfer(2, 3);
        assert!(l.is_live(3) && !l.is_live(2));
        l.merge(&[1, 3], 4);
        assert_eq!(l.current(), 12);
        l.release(4);
        assert_eq!(l.current(), 0);
    }

    #[test]
    fn sections_are_additive() {
        let mut p = Profiler::new();
        p.begin_section("a");
        p.charge(OpCounters::new(1, 2, 3));
        p.ledger_mut().alloc(0, 4);
        p.begin_section("b");
        p.charge(OpCounters::new(10, 0, 1));
        p.ledger_mut().alloc(1, 2);
        let total = p.counters();
        let secs = p.into_sections();
        assert_eq!(secs.len(), 2);
        assert_eq!(secs[0].peak_activations, 4);
        assert_eq!(secs[1].peak_activations, 6);
        assert_eq!(secs.iter().map(|s| s.counters).sum::<OpCounters>(), total);
    }
}
