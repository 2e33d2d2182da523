//! Decoders `x -> [N]` and finite decoder classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::ExBmdpSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderKind {
    FactorProjection,
    Tabular,
}

/// A lookup table over the mixed-radix key of a subset of factors.
/// Projections never include the time factor; tabular decoders read every factor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoder {
    pub name: String,
    pub kind: DecoderKind,
    pub factors: Vec<usize>,
    pub radices: Vec<usize>,
    pub table: Vec<u32>,
    pub n_out: usize,
}

const TABULAR_LIMIT: f64 = 1e7;

impl Decoder {
    pub fn projection(spec: &ExBmdpSpec, factors: Vec<usize>, table: Vec<u32>, n_out: usize, name: impl Into<String>) -> Result<Self> {
        let nf = spec.num_factors();
        if factors.iter().any(|&f| f == 0 || f >= nf) {
            return Err(Error::InvalidParameter("projection factors must be non-time factors of the spec".into()));
        }
        let radices: Vec<usize> = factors.iter().map(|&f| spec.emission.factors[f].cardinality).collect();
        Self::build(name.into(), DecoderKind::FactorProjection, factors, radices, table, n_out)
    }

    fn build(name: String, kind: DecoderKind, factors: Vec<usize>, radices: Vec<usize>, table: Vec<u32>, n_out: usize) -> Result<Self> {
        let size: usize = radices.iter().product();
        if table.len() != size {
            return Err(Error::InvalidParameter(format!("table length {} != {size}", table.len())));
        }
        if n_out == 0 || table.iter().any(|&u| u as usize >= n_out) {
            return Err(Error::InvalidParameter(format!("table values must lie in [0, {n_out})")));
        }
        Ok(Decoder { name, kind, factors, radices, table, n_out })
    }

    /// Projection onto one factor, identity labelling.
    pub fn factor_identity(spec: &ExBmdpSpec, factor: usize, name: impl Into<String>) -> Self {
        let card = spec.emission.factors[factor].cardinality;
        Self::projection(spec, vec![factor], (0..card as u32).collect(), card, name).expect("valid factor")
    }

    pub fn constant(_spec: &ExBmdpSpec) -> Self {
        Decoder { name: "constant".into(), kind: DecoderKind::FactorProjection, factors: vec![], radices: vec![], table: vec![0], n_out: 1 }
    }

    pub fn tabular(spec: &ExBmdpSpec, table: Vec<u32>, n_out: usize, name: impl Into<String>) -> Result<Self> {
        let space = spec.observation_space();
        if space.size() > TABULAR_LIMIT {
            return Err(Error::TooLarge { what: "tabular decoder", size: space.size(), limit: TABULAR_LIMIT });
        }
        Self::build(name.into(), DecoderKind::Tabular, (0..spec.num_factors()).collect(), space.radices, table, n_out)
    }

    /// One output per observation.
    pub fn tabular_identity(spec: &ExBmdpSpec) -> Result<Self> {
        let size = spec.observation_space().size();
        if size > TABULAR_LIMIT {
            return Err(Error::TooLarge { what: "tabular decoder", size, limit: TABULAR_LIMIT });
        }
        Self::tabular(spec, (0..size as u32).collect(), size as usize, "identity")
    }

    pub fn is_projection(&self) -> bool {
        self.kind == DecoderKind::FactorProjection
    }

    pub fn base_size(&self) -> usize {
        self.table.len()
    }

    pub fn base_key(&self, obs: &[u16]) -> usize {
        self.factors.iter().zip(&self.radices).fold(0, |acc, (&f, &r)| acc * r + obs[f] as usize)
    }

    pub fn decode(&self, obs: &[u16]) -> usize {
        self.table[self.base_key(obs)] as usize
    }

    /// Same decoder with outputs permuted by `perm`.
    pub fn relabeled(&self, perm: &[u32]) -> Self {
        let mut d = self.clone();
        d.table.iter_mut().for_each(|u| *u = perm[*u as usize]);
        d.name = format!("{}~relabeled", self.name);
        d
    }

    /// Distribution over base keys given the latent configuration at step `t`.
    pub fn base_conditional(&self, spec: &ExBmdpSpec, s: usize, xi: usize, t: usize) -> Vec<(usize, f64)> {
        let mut out = vec![(0usize, 1.0f64)];
        for (&f, &r) in self.factors.iter().zip(&self.radices) {
            let sup = spec.emission.factors[f].dist(s, xi, t).support();
            let mut next = Vec::with_capacity(out.len() * sup.len());
            for &(k, p) in &out {
                for &(v, q) in &sup {
                    next.push((k * r + v, p * q));
                }
            }
            out = next;
        }
        out
    }

    /// Distribution over outputs given the latent configuration at step `t`.
    pub fn latent_conditional(&self, spec: &ExBmdpSpec, s: usize, xi: usize, t: usize) -> Vec<(usize, f64)> {
        let mut acc = vec![0.0; self.n_out];
        let mut seen = Vec::new();
        for (b, p) in self.base_conditional(spec, s, xi, t) {
            let u = self.table[b] as usize;
            if acc[u] == 0.0 {
                seen.push(u);
            }
            acc[u] += p;
        }
        seen.sort_unstable();
        seen.into_iter().map(|u| (u, acc[u])).collect()
    }

    /// When the output is a deterministic, injective function of the endogenous
    /// state on steps `< H`, the map `s -> u`.
    pub fn endo_alignment(&self, spec: &ExBmdpSpec) -> Option<Vec<usize>> {
        let mut map = Vec::with_capacity(spec.latent.num_states);
        for s in 0..spec.latent.num_states {
            let mut val = None;
            for xi in 0..spec.num_exo() {
                for t in 0..spec.horizon() {
                    let c = self.latent_conditional(spec, s, xi, t);
                    if c.len() != 1 {
                        return None;
                    }
                    match val {
                        None => val = Some(c[0].0),
                        Some(v) if v != c[0].0 => return None,
                        _ => {}
                    }
                }
            }
            map.push(val?);
        }
        let mut sorted = map.clone();
        sorted.sort_unstable();
        sorted.dedup();
        (sorted.len() == map.len()).then_some(map)
    }
}

/// Set partitions of `[card]` into at most `max_blocks` blocks, as restricted
/// growth strings (each labelling appears once up to relabelling).
pub fn set_partitions(card: usize, max_blocks: usize) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, max_used: u32, card: usize, max_blocks: usize, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == card {
            out.push(prefix.clone());
            return;
        }
        let hi = (max_used + 1).min(max_blocks as u32 - 1);
        for v in 0..=hi {
            prefix.push(v);
            rec(prefix, max_used.max(v), card, max_blocks, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if card == 0 || max_blocks == 0 {
        return out;
    }
    let mut prefix = vec![0];
    rec(&mut prefix, 0, card, max_blocks, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecoderClass {
    pub decoders: Vec<Decoder>,
}

impl DecoderClass {
    pub fn new(decoders: Vec<Decoder>) -> Self {
        DecoderClass { decoders }
    }

    pub fn len(&self) -> usize {
        self.decoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decoders.is_empty()
    }

    /// Identity projection onto each listed factor.
    pub fn single_factor_identities(spec: &ExBmdpSpec, factors: &[usize]) -> Self {
        let decoders = factors
            .iter()
            .map(|&f| Decoder::factor_identity(spec, f, spec.emission.factors[f].name.clone()))
            .collect();
        DecoderClass { decoders }
    }

    /// Every partition (up to relabelling) of each listed factor into at most `n_out` cells.
    pub fn single_factor_partitions(spec: &ExBmdpSpec, factors: &[usize], n_out: usize) -> Self {
        let mut decoders = Vec::new();
        for &f in factors {
            let card = spec.emission.factors[f].cardinality;
            for rgs in set_partitions(card, n_out) {
                let label: String = rgs.iter().map(|v| char::from_digit(*v, 36).unwrap_or('?')).collect();
                let name = format!("{}:{label}", spec.emission.factors[f].name);
                decoders.push(Decoder::projection(spec, vec![f], rgs, n_out, name).expect("valid partition"));
            }
        }
        DecoderClass { decoders }
    }

    pub fn with(mut self, d: Decoder) -> Self {
        self.decoders.push(d);
        self
    }

    pub fn extend(mut self, other: DecoderClass) -> Self {
        self.decoders.extend(other.decoders);
        self
    }

    /// Index of the first decoder realizing the endogenous state up to relabelling.
    pub fn realizing_index(&self, spec: &ExBmdpSpec) -> Option<usize> {
        self.decoders.iter().position(|d| d.endo_alignment(spec).is_some())
    }
}
