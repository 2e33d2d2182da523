//! Ex-Block MDP specification, validation, simulation and exact latent occupancy.

use std::borrow::Cow;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rl::AbstractPolicy;
use crate::seed::{self, sample_index};

/// Normalisation tolerance for every probability row.
pub const PROB_TOL: f64 = 1e-12;

// ── Types ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMdp {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`, in [0, 1]
    pub reward: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    /// Steps (0-based, `< horizon`) at which reward is paid. All steps when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewarded_steps: Option<Vec<bool>>,
}

impl LatentMdp {
    pub fn is_rewarded(&self, t: usize) -> bool {
        t < self.horizon
            && self
                .rewarded_steps
                .as_ref()
                .map_or(true, |m| m.get(t).copied().unwrap_or(false))
    }

    /// Reward paid at step `t`, zero outside the horizon or on masked steps.
    pub fn reward_at(&self, t: usize, s: usize, a: usize) -> f64 {
        if self.is_rewarded(t) {
            self.reward[s][a]
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExoChain {
    pub num_states: usize,
    /// `transition[xi][xi']`
    pub transition: Vec<Vec<f64>>,
    pub start: Vec<f64>,
}

impl ExoChain {
    pub fn trivial() -> Self {
        ExoChain { num_states: 1, transition: vec![vec![1.0]], start: vec![1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum FactorKind {
    /// Carries the 0-based step index.
    TimeStamp,
    DeterministicEndo { map: Vec<usize> },
    DeterministicExo { map: Vec<usize> },
    /// `table[s][v]`
    NoisyEndo { table: Vec<Vec<f64>> },
    /// `table[xi][v]`
    NoisyExo { table: Vec<Vec<f64>> },
    IidNoise { dist: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub cardinality: usize,
    pub kind: FactorKind,
}

/// What a factor's emission conditional depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dependence {
    Time,
    Endo,
    Exo,
    Independent,
}

/// Emission conditional of one factor given the latent configuration.
#[derive(Debug, Clone, Copy)]
pub enum FactorDist<'a> {
    Point(usize),
    Table(&'a [f64]),
}

impl FactorDist<'_> {
    pub fn prob(&self, v: usize) -> f64 {
        match *self {
            FactorDist::Point(p) => (p == v) as u8 as f64,
            FactorDist::Table(t) => t.get(v).copied().unwrap_or(0.0),
        }
    }

    /// Support points with their probabilities.
    pub fn support(&self) -> Vec<(usize, f64)> {
        match *self {
            FactorDist::Point(p) => vec![(p, 1.0)],
            FactorDist::Table(t) => {
                t.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(v, &p)| (v, p)).collect()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            FactorDist::Point(p) => p,
            FactorDist::Table(t) => sample_index(rng, t),
        }
    }
}

impl FactorSpec {
    pub fn dependence(&self) -> Dependence {
        match self.kind {
            FactorKind::TimeStamp => Dependence::Time,
            FactorKind::DeterministicEndo { .. } | FactorKind::NoisyEndo { .. } => Dependence::Endo,
            FactorKind::DeterministicExo { .. } | FactorKind::NoisyExo { .. } => Dependence::Exo,
            FactorKind::IidNoise { .. } => Dependence::Independent,
        }
    }

    pub fn dist(&self, s: usize, xi: usize, t: usize) -> FactorDist<'_> {
        match &self.kind {
            FactorKind::TimeStamp => FactorDist::Point(t),
            FactorKind::DeterministicEndo { map } => FactorDist::Point(map[s]),
            FactorKind::DeterministicExo { map } => FactorDist::Point(map[xi]),
            FactorKind::NoisyEndo { table } => FactorDist::Table(&table[s]),
            FactorKind::NoisyExo { table } => FactorDist::Table(&table[xi]),
            FactorKind::IidNoise { dist } => FactorDist::Table(dist),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactoredEmission {
    pub factors: Vec<FactorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExBmdpSpec {
    pub name: String,
    pub latent: LatentMdp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exo: Option<ExoChain>,
    pub emission: FactoredEmission,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exo_reward_bonus: Option<Vec<f64>>,
    /// Maximum multistep offset K; episodes run for `horizon + lookahead` steps.
    pub lookahead: usize,
}

impl ExBmdpSpec {
    pub fn horizon(&self) -> usize {
        self.latent.horizon
    }

    pub fn episode_len(&self) -> usize {
        self.latent.horizon + self.lookahead
    }

    pub fn num_exo(&self) -> usize {
        self.exo.as_ref().map_or(1, |e| e.num_states)
    }

    pub fn exo_chain(&self) -> Cow<'_, ExoChain> {
        match &self.exo {
            Some(e) => Cow::Borrowed(e),
            None => Cow::Owned(ExoChain::trivial()),
        }
    }

    pub fn num_factors(&self) -> usize {
        self.emission.factors.len()
    }

    pub fn observation_space(&self) -> ObservationSpace {
        ObservationSpace { radices: self.emission.factors.iter().map(|f| f.cardinality).collect() }
    }

    pub fn exo_bonus(&self, xi: usize) -> f64 {
        self.exo_reward_bonus.as_ref().map_or(0.0, |b| b[xi])
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Content hash of the canonical serialisation (first 16 hex digits).
    pub fn spec_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serialises");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_spec(self);
        match v.first() {
            None => Ok(()),
            Some(first) => Err(Error::InvalidSpec { count: v.len(), first: first.to_string() }),
        }
    }
}

/// Mixed-radix encoding of factored observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSpace {
    pub radices: Vec<usize>,
}

impl ObservationSpace {
    pub fn size(&self) -> f64 {
        self.radices.iter().map(|&r| r as f64).product()
    }

    /// Factor 0 varies slowest.
    pub fn encode(&self, obs: &[u16]) -> u64 {
        obs.iter().zip(&self.radices).fold(0u64, |acc, (&v, &r)| acc * r as u64 + v as u64)
    }

    pub fn decode(&self, mut id: u64) -> Vec<u16> {
        let mut out = vec![0u16; self.radices.len()];
        for (slot, &r) in out.iter_mut().zip(&self.radices).rev() {
            *slot = (id % r as u64) as u16;
            id /= r as u64;
        }
        out
    }

    /// Encoding of the observation with the time factor (factor 0) dropped.
    pub fn encode_untimed(&self, obs: &[u16]) -> u64 {
        obs[1..].iter().zip(&self.radices[1..]).fold(0u64, |acc, (&v, &r)| acc * r as u64 + v as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactoredObservation(pub Vec<u16>);

impl FactoredObservation {
    pub fn time(&self) -> usize {
        self.0[0] as usize
    }
}

// ── Policies ───────────────────────────────────────────────────────────

/// Noise-free policy reading only the latent state: `probs[t][s][a]`.
/// Steps past the last row reuse the last row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl LatentPolicy {
    pub fn stationary(rows: Vec<Vec<f64>>) -> Self {
        LatentPolicy { probs: vec![rows] }
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self::stationary(vec![vec![1.0 / num_actions as f64; num_actions]; num_states])
    }

    /// `actions[t][s]`
    pub fn deterministic(actions: &[Vec<usize>], num_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&a| (0..num_actions).map(|b| (a == b) as u8 as f64).collect())
                    .collect()
            })
            .collect();
        LatentPolicy { probs }
    }

    pub fn action_probs(&self, t: usize, s: usize) -> &[f64] {
        let t = t.min(self.probs.len() - 1);
        &self.probs[t][s]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    LatentTabular(LatentPolicy),
    AbstractComposed(AbstractPolicy),
}

/// Finite mixture of data-collection policies.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyMixture {
    pub components: Vec<(f64, Policy)>,
}

impl PolicyMixture {
    pub fn single(policy: LatentPolicy) -> Self {
        PolicyMixture { components: vec![(1.0, Policy::LatentTabular(policy))] }
    }

    pub fn new(components: Vec<(f64, Policy)>) -> Self {
        PolicyMixture { components }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.0).collect()
    }

    /// The latent components, refusing non-normalised weights and observation-reading policies.
    pub fn latent_components(&self) -> Result<Vec<(f64, &LatentPolicy)>> {
        let sum: f64 = self.components.iter().map(|c| c.0).sum();
        if self.components.is_empty()
            || (sum - 1.0).abs() > PROB_TOL
            || self.components.iter().any(|c| c.0 < 0.0)
        {
            return Err(Error::MixtureNotNormalized { sum });
        }
        self.components
            .iter()
            .enumerate()
            .map(|(i, (w, p))| match p {
                Policy::LatentTabular(lp) => Ok((*w, lp)),
                Policy::AbstractComposed(_) => Err(Error::NoisyDataPolicy { index: i }),
            })
            .collect()
    }

    pub fn mixture_id(&self) -> String {
        let mut h = Sha256::new();
        for (w, p) in &self.components {
            h.update(w.to_le_bytes());
            match p {
                Policy::LatentTabular(lp) => {
                    h.update(b"L");
                    h.update(serde_json::to_vec(lp).expect("policy serialises"));
                }
                Policy::AbstractComposed(ap) => {
                    h.update(b"A");
                    h.update(format!("{ap:?}").as_bytes());
                }
            }
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

// ── Validation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    Normalization,
    Range,
    BlockProperty,
    TimeFactor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.kind, self.location, self.message)
    }
}

struct Checker {
    out: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, kind: ViolationKind, location: impl Into<String>, message: impl Into<String>) {
        self.out.push(Violation { kind, location: location.into(), message: message.into() });
    }

    fn prob_row(&mut self, loc: &str, row: &[f64], len: usize) {
        if row.len() != len {
            self.push(ViolationKind::Shape, loc, format!("length {} != {len}", row.len()));
            return;
        }
        if let Some(i) = row.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            self.push(ViolationKind::Range, format!("{loc}[{i}]"), format!("entry {} is not a probability", row[i]));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            self.push(ViolationKind::Normalization, loc, format!("row sums to {sum}"));
        }
    }
}

/// Every invariant violation of the spec; empty iff the spec is valid.
pub fn validate_spec(spec: &ExBmdpSpec) -> Vec<Violation> {
    let mut c = Checker { out: Vec::new() };
    let l = &spec.latent;
    let (ns, na) = (l.num_states, l.num_actions);
    if ns == 0 || na == 0 || l.horizon == 0 {
        c.push(ViolationKind::Shape, "latent", "num_states, num_actions and horizon must be positive");
        return c.out;
    }
    if spec.lookahead == 0 {
        c.push(ViolationKind::Shape, "lookahead", "lookahead must be at least 1");
    }
    if l.transition.len() != ns {
        c.push(ViolationKind::Shape, "latent.transition", format!("{} rows != {ns}", l.transition.len()));
    } else {
        for (s, per_a) in l.transition.iter().enumerate() {
            if per_a.len() != na {
                c.push(ViolationKind::Shape, format!("latent.transition[{s}]"), "wrong action count");
                continue;
            }
            for (a, row) in per_a.iter().enumerate() {
                c.prob_row(&format!("latent.transition[{s}][{a}]"), row, ns);
            }
        }
    }
    if l.reward.len() != ns || l.reward.iter().any(|r| r.len() != na) {
        c.push(ViolationKind::Shape, "latent.reward", "expected [S][A]");
    } else {
        for (s, row) in l.reward.iter().enumerate() {
            for (a, &r) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&r) {
                    c.push(ViolationKind::Range, format!("latent.reward[{s}][{a}]"), format!("{r} outside [0,1]"));
                }
            }
        }
    }
    c.prob_row("latent.start", &l.start, ns);
    if let Some(mask) = &l.rewarded_steps {
        if mask.len() != l.horizon {
            c.push(ViolationKind::Shape, "latent.rewarded_steps", "length must equal horizon");
        }
    }

    let nx = spec.num_exo();
    if let Some(e) = &spec.exo {
        if e.num_states == 0 || e.transition.len() != e.num_states {
            c.push(ViolationKind::Shape, "exo.transition", "expected [Xi][Xi]");
        } else {
            for (x, row) in e.transition.iter().enumerate() {
                c.prob_row(&format!("exo.transition[{x}]"), row, e.num_states);
            }
        }
        c.prob_row("exo.start", &e.start, e.num_states);
    }
    if let Some(b) = &spec.exo_reward_bonus {
        if b.len() != nx {
            c.push(ViolationKind::Shape, "exo_reward_bonus", format!("length {} != {nx}", b.len()));
        }
    }

    let factors = &spec.emission.factors;
    match factors.first() {
        Some(f) if f.kind == FactorKind::TimeStamp => {
            if f.cardinality != spec.episode_len() {
                c.push(
                    ViolationKind::TimeFactor,
                    "emission.factors[0]",
                    format!("time cardinality {} != H+K = {}", f.cardinality, spec.episode_len()),
                );
            }
        }
        _ => c.push(ViolationKind::TimeFactor, "emission.factors[0]", "factor 0 must be the time stamp"),
    }
    let mut shapes_ok = true;
    for (j, f) in factors.iter().enumerate() {
        let loc = format!("emission.factors[{j}]");
        if f.cardinality == 0 || f.cardinality > u16::MAX as usize {
            c.push(ViolationKind::Shape, &loc, "cardinality must be in [1, 65535]");
            shapes_ok = false;
            continue;
        }
        let before = c.out.len();
        match &f.kind {
            FactorKind::TimeStamp => {
                if j != 0 {
                    c.push(ViolationKind::TimeFactor, &loc, "only factor 0 may be a time stamp");
                }
            }
            FactorKind::DeterministicEndo { map } | FactorKind::DeterministicExo { map } => {
                let want = if f.dependence() == Dependence::Endo { ns } else { nx };
                if map.len() != want {
                    c.push(ViolationKind::Shape, &loc, format!("map length {} != {want}", map.len()));
                } else if let Some(v) = map.iter().find(|&&v| v >= f.cardinality) {
                    c.push(ViolationKind::Range, &loc, format!("value {v} >= cardinality"));
                }
            }
            FactorKind::NoisyEndo { table } | FactorKind::NoisyExo { table } => {
                let want = if f.dependence() == Dependence::Endo { ns } else { nx };
                if table.len() != want {
                    c.push(ViolationKind::Shape, &loc, format!("table rows {} != {want}", table.len()));
                } else {
                    for (r, row) in table.iter().enumerate() {
                        c.prob_row(&format!("{loc}.table[{r}]"), row, f.cardinality);
                    }
                }
            }
            FactorKind::IidNoise { dist } => c.prob_row(&format!("{loc}.dist"), dist, f.cardinality),
        }
        if c.out.len() > before {
            shapes_ok = false;
        }
    }
    if shapes_ok && c.out.is_empty() {
        check_block_property(spec, &mut c);
    }
    c.out
}

/// Product-form supports intersect iff every factor's supports intersect, so the
/// pairwise check over latent configurations is exact.
fn check_block_property(spec: &ExBmdpSpec, c: &mut Checker) {
    let ns = spec.latent.num_states;
    let nx = spec.num_exo();
    let supports: Vec<Vec<Vec<bool>>> = (0..ns * nx)
        .map(|y| {
            let (s, xi) = (y / nx, y % nx);
            spec.emission.factors[1..]
                .iter()
                .map(|f| {
                    let d = f.dist(s, xi, 0);
                    (0..f.cardinality).map(|v| d.prob(v) > 0.0).collect()
                })
                .collect()
        })
        .collect();
    for y1 in 0..ns * nx {
        for y2 in y1 + 1..ns * nx {
            let overlap = supports[y1]
                .iter()
                .zip(&supports[y2])
                .all(|(a, b)| a.iter().zip(b).any(|(&p, &q)| p && q));
            if overlap {
                c.push(
                    ViolationKind::BlockProperty,
                    "emission",
                    format!(
                        "latents (s={}, xi={}) and (s={}, xi={}) share an observation",
                        y1 / nx,
                        y1 % nx,
                        y2 / nx,
                        y2 % nx
                    ),
                );
                return;
            }
        }
    }
}

// ── Simulation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: FactoredObservation,
    pub action: usize,
    pub presented_reward: f64,
    pub true_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    /// `(s, xi)` per step.
    pub latents: Vec<(usize, usize)>,
}

impl Episode {
    pub fn true_return(&self) -> f64 {
        self.steps.iter().map(|s| s.true_reward).sum()
    }

    pub fn presented_return(&self) -> f64 {
        self.steps.iter().map(|s| s.presented_reward).sum()
    }
}

pub fn emit<R: Rng + ?Sized>(spec: &ExBmdpSpec, s: usize, xi: usize, t: usize, rng: &mut R) -> Vec<u16> {
    spec.emission.factors.iter().map(|f| f.dist(s, xi, t).sample(rng) as u16).collect()
}

pub fn choose_action<R: Rng + ?Sized>(policy: &Policy, t: usize, s: usize, obs: &[u16], rng: &mut R) -> usize {
    match policy {
        Policy::LatentTabular(lp) => sample_index(rng, lp.action_probs(t, s)),
        Policy::AbstractComposed(ap) => ap.action(t, ap.decoder.decode(obs)),
    }
}

/// Roll one episode with an explicit RNG. Reward is paid only inside the horizon;
/// the exogenous bonus is added to the presented reward on rewarded steps.
pub fn simulate_with_rng<R: Rng + ?Sized>(
    spec: &ExBmdpSpec,
    policy: &Policy,
    length: usize,
    rng: &mut R,
) -> Result<Episode> {
    if length > spec.episode_len() {
        return Err(Error::EpisodeTooLong { requested: length, max: spec.episode_len() });
    }
    let exo = spec.exo_chain();
    let mut s = sample_index(rng, &spec.latent.start);
    let mut xi = sample_index(rng, &exo.start);
    let mut steps = Vec::with_capacity(length);
    let mut latents = Vec::with_capacity(length);
    for t in 0..length {
        let obs = emit(spec, s, xi, t, rng);
        let a = choose_action(policy, t, s, &obs, rng);
        let true_reward = spec.latent.reward_at(t, s, a);
        let bonus = if spec.latent.is_rewarded(t) { spec.exo_bonus(xi) } else { 0.0 };
        latents.push((s, xi));
        steps.push(Step {
            obs: FactoredObservation(obs),
            action: a,
            presented_reward: true_reward + bonus,
            true_reward,
        });
        s = sample_index(rng, &spec.latent.transition[s][a]);
        xi = sample_index(rng, &exo.transition[xi]);
    }
    Ok(Episode { steps, latents })
}

pub fn simulate_episode(spec: &ExBmdpSpec, policy: &Policy, length: usize, seed: u64) -> Result<Episode> {
    let mut rng = seed::stream(seed, seed::component::SIMULATE, 0);
    simulate_with_rng(spec, policy, length, &mut rng)
}

// ── Exact occupancy ────────────────────────────────────────────────────

/// `occ[t][s]` for one latent policy over `len` steps.
pub fn policy_occupancy(latent: &LatentMdp, policy: &LatentPolicy, len: usize) -> Vec<Vec<f64>> {
    let ns = latent.num_states;
    let mut occ = Vec::with_capacity(len);
    let mut cur = latent.start.clone();
    for t in 0..len {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if cur[s] == 0.0 {
                continue;
            }
            for (a, &pa) in policy.action_probs(t, s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (s2, &p) in latent.transition[s][a].iter().enumerate() {
                    next[s2] += cur[s] * pa * p;
                }
            }
        }
        occ.push(std::mem::replace(&mut cur, next));
    }
    occ
}

/// Mixture occupancy `occ[t][s]` for `t < H + K`.
pub fn latent_occupancy(spec: &ExBmdpSpec, mixture: &PolicyMixture) -> Result<Vec<Vec<f64>>> {
    let comps = mixture.latent_components()?;
    let len = spec.episode_len();
    let ns = spec.latent.num_states;
    let mut occ = vec![vec![0.0; ns]; len];
    for (w, p) in comps {
        for (row, prow) in occ.iter_mut().zip(policy_occupancy(&spec.latent, p, len)) {
            for (o, q) in row.iter_mut().zip(prow) {
                *o += w * q;
            }
        }
    }
    Ok(occ)
}

/// Exogenous marginals `[t][xi]` for `t < len`; independent of any policy.
pub fn exo_marginals(spec: &ExBmdpSpec, len: usize) -> Vec<Vec<f64>> {
    let exo = spec.exo_chain();
    let mut out = Vec::with_capacity(len);
    let mut cur = exo.start.clone();
    for _ in 0..len {
        let mut next = vec![0.0; exo.num_states];
        for (x, &p) in cur.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (x2, &q) in exo.transition[x].iter().enumerate() {
                next[x2] += p * q;
            }
        }
        out.push(std::mem::replace(&mut cur, next));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;

    pub(crate) fn two_state_spec() -> ExBmdpSpec {
        ExBmdpSpec {
            name: "two".into(),
            latent: LatentMdp {
                num_states: 2,
                num_actions: 1,
                horizon: 2,
                transition: vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
                reward: vec![vec![0.0], vec![1.0]],
                start: vec![0.5, 0.5],
                rewarded_steps: None,
            },
            exo: None,
            emission: FactoredEmission {
                factors: vec![
                    FactorSpec { name: "t".into(), cardinality: 3, kind: FactorKind::TimeStamp },
                    FactorSpec {
                        name: "s".into(),
                        cardinality: 2,
                        kind: FactorKind::DeterministicEndo { map: vec![0, 1] },
                    },
                ],
            },
            exo_reward_bonus: None,
            lookahead: 1,
        }
    }

    #[test]
    fn valid_two_state_spec_has_no_violations() {
        assert!(validate_spec(&two_state_spec()).is_empty());
    }

    #[test]
    fn unnormalised_row_is_reported() {
        let mut spec = two_state_spec();
        spec.latent.transition[0][0] = vec![0.4, 0.5];
        let v = validate_spec(&spec);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Normalization);
        assert!(v[0].location.contains("transition[0][0]"));
    }

    #[test]
    fn shared_emission_breaks_block_property() {
        let mut spec = two_state_spec();
        spec.emission.factors[1].kind = FactorKind::DeterministicEndo { map: vec![1, 1] };
        let v = validate_spec(&spec);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::BlockProperty);
    }

    #[test]
    fn noisy_overlap_breaks_block_property_but_deterministic_copy_restores_it() {
        let mut spec = two_state_spec();
        spec.emission.factors[1].kind =
            FactorKind::NoisyEndo { table: vec![vec![0.8, 0.2], vec![0.2, 0.8]] };
        assert_eq!(validate_spec(&spec)[0].kind, ViolationKind::BlockProperty);
        spec.emission.factors.push(FactorSpec {
            name: "copy".into(),
            cardinality: 2,
            kind: FactorKind::DeterministicEndo { map: vec![0, 1] },
        });
        assert!(validate_spec(&spec).is_empty());
    }

    #[test]
    fn time_factor_must_lead() {
        let mut spec = two_state_spec();
        spec.emission.factors.swap(0, 1);
        assert!(validate_spec(&spec).iter().any(|v| v.kind == ViolationKind::TimeFactor));
    }

    #[test]
    fn degenerate_mdp_emits_constant_stream() {
        let mut spec = two_state_spec();
        spec.latent = LatentMdp {
            num_states: 1,
            num_actions: 1,
            horizon: 3,
            transition: vec![vec![vec![1.0]]],
            reward: vec![vec![0.25]],
            start: vec![1.0],
            rewarded_steps: None,
        };
        spec.emission.factors[0].cardinality = 4;
        spec.emission.factors[1] = FactorSpec {
            name: "s".into(),
            cardinality: 1,
            kind: FactorKind::DeterministicEndo { map: vec![0] },
        };
        assert!(validate_spec(&spec).is_empty());
        let pol = Policy::LatentTabular(LatentPolicy::uniform(1, 1));
        for seed in 0..5 {
            let ep = simulate_episode(&spec, &pol, 3, seed).unwrap();
            for (t, st) in ep.steps.iter().enumerate() {
                assert_eq!(st.obs.0, vec![t as u16, 0]);
                assert_eq!(st.true_reward, 0.25);
            }
        }
    }

    #[test]
    fn episode_length_is_bounded() {
        let spec = two_state_spec();
        let pol = Policy::LatentTabular(LatentPolicy::uniform(2, 1));
        match simulate_episode(&spec, &pol, 4, 0) {
            Err(Error::EpisodeTooLong { requested: 4, max: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(simulate_episode(&spec, &pol, 3, 9).unwrap(), simulate_episode(&spec, &pol, 3, 9).unwrap());
    }

    #[test]
    fn appc_episode_flips_both_chains() {
        let inst = envs::make_appc_instance(&envs::AppCParams { m: 4, l: 2 }).unwrap();
        let pol = &inst.data_mixture.components[0].1;
        for seed in 0..50 {
            let ep = simulate_episode(&inst.spec, pol, 2, seed).unwrap();
            let (s1, x1) = ep.latents[0];
            let (s2, x2) = ep.latents[1];
            assert_eq!(s2, 1 - s1);
            assert_eq!(x2, 1 - x1);
        }
    }

    #[test]
    fn hard_instance_exo_flip_rate() {
        let inst = envs::make_hard_instance(&envs::HardInstanceParams { d: 3, p: 1.0 / 3.0, i: 1 }).unwrap();
        let pol = &inst.data_mixture.components[0].1;
        let mut rng = seed::stream(11, 0, 0);
        let (mut flips, mut steps) = (0usize, 0usize);
        while steps < 100_000 {
            let ep = simulate_with_rng(&inst.spec, pol, 3, &mut rng).unwrap();
            for w in ep.steps.windows(2) {
                // factor 2 is exogenous when i = 1
                flips += (w[0].obs.0[2] != w[1].obs.0[2]) as usize;
                steps += 1;
            }
        }
        let rate = flips as f64 / steps as f64;
        assert!((rate - 1.0 / 3.0).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn occupancy_examples() {
        // identity transitions keep the start distribution
        let mut spec = two_state_spec();
        spec.latent.transition = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        spec.latent.start = vec![0.3, 0.7];
        let occ = latent_occupancy(&spec, &PolicyMixture::single(LatentPolicy::uniform(2, 1))).unwrap();
        for row in &occ {
            assert!((row[0] - 0.3).abs() < 1e-15 && (row[1] - 0.7).abs() < 1e-15);
        }

        let appc = envs::make_appc_instance(&envs::AppCParams { m: 2, l: 1 }).unwrap();
        let occ = latent_occupancy(&appc.spec, &appc.data_mixture).unwrap();
        assert_eq!(occ, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    }

    #[test]
    fn mixture_weights_must_normalise() {
        let spec = two_state_spec();
        let p = LatentPolicy::uniform(2, 1);
        let m = PolicyMixture::new(vec![
            (0.5, Policy::LatentTabular(p.clone())),
            (0.4, Policy::LatentTabular(p)),
        ]);
        assert!(matches!(latent_occupancy(&spec, &m), Err(Error::MixtureNotNormalized { .. })));
    }

    #[test]
    fn observation_codec_roundtrip() {
        let space = ObservationSpace { radices: vec![3, 2, 5] };
        for id in 0..30 {
            assert_eq!(space.encode(&space.decode(id)), id);
        }
        assert_eq!(space.size(), 30.0);
    }

    #[test]
    fn spec_toml_roundtrip() {
        let inst = envs::make_lock_env(3, 2, 4, &envs::LockEnvConfig { n_exo: 1, n_iid: 1, ..Default::default() }).unwrap();
        let text = inst.spec.to_toml().unwrap();
        let back = ExBmdpSpec::from_toml(&text).unwrap();
        assert_eq!(back, inst.spec);
        assert_eq!(back.spec_id(), inst.spec.spec_id());
    }
}
