//! Downstream tabular RL through a frozen decoder, policy evaluation and
//! decoder-quality metrics.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::mdp::{emit, ExBmdpSpec, LatentPolicy, Policy, PolicyMixture};
use crate::oracle::ExactModel;
use crate::seed::{self, component, sample_index};

/// Abstract policy `psi(t, u)` composed with a frozen decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstractPolicy {
    pub decoder: Decoder,
    /// `actions[t][u]`
    pub actions: Vec<Vec<usize>>,
    /// Action for cells outside the table.
    pub fallback: usize,
}

impl AbstractPolicy {
    pub fn new(decoder: Decoder, actions: Vec<Vec<usize>>) -> Self {
        AbstractPolicy { decoder, actions, fallback: 0 }
    }

    pub fn action(&self, t: usize, u: usize) -> usize {
        self.actions.get(t).and_then(|r| r.get(u)).copied().unwrap_or(self.fallback)
    }
}

// ── Abstract view ──────────────────────────────────────────────────────

/// Environment seen only through a decoder: the learner gets abstract states,
/// actions and presented rewards, never raw observations.
pub struct AbstractMdpView<'a> {
    spec: &'a ExBmdpSpec,
    decoder: &'a Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractEpisode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Logged for reporting only; the learner never reads it.
    pub true_return: f64,
}

impl<'a> AbstractMdpView<'a> {
    pub fn new(spec: &'a ExBmdpSpec, decoder: &'a Decoder) -> Self {
        AbstractMdpView { spec, decoder }
    }

    pub fn num_states(&self) -> usize {
        self.decoder.n_out
    }

    pub fn num_actions(&self) -> usize {
        self.spec.latent.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon()
    }

    /// Largest presented per-step reward.
    pub fn reward_cap(&self) -> f64 {
        let bonus = (0..self.spec.num_exo()).map(|x| self.spec.exo_bonus(x)).fold(0.0, f64::max);
        1.0 + bonus
    }

    /// One episode of `H` steps, actions chosen from `(t, u)` only.
    pub fn run_episode<R: Rng + ?Sized>(&self, mut act: impl FnMut(usize, usize) -> usize, rng: &mut R) -> AbstractEpisode {
        let spec = self.spec;
        let exo = spec.exo_chain();
        let mut s = sample_index(rng, &spec.latent.start);
        let mut xi = sample_index(rng, &exo.start);
        let h = self.horizon();
        let mut ep = AbstractEpisode { states: Vec::with_capacity(h), actions: Vec::with_capacity(h), rewards: Vec::with_capacity(h), true_return: 0.0 };
        for t in 0..h {
            let u = self.decoder.decode(&emit(spec, s, xi, t, rng));
            let a = act(t, u);
            let r = spec.latent.reward_at(t, s, a);
            let bonus = if spec.latent.is_rewarded(t) { spec.exo_bonus(xi) } else { 0.0 };
            ep.true_return += r;
            ep.states.push(u);
            ep.actions.push(a);
            ep.rewards.push(r + bonus);
            s = sample_index(rng, &spec.latent.transition[s][a]);
            xi = sample_index(rng, &exo.transition[xi]);
        }
        ep
    }
}

// ── Optimistic value iteration ─────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub budget: usize,
    pub bonus_scale: f64,
    pub delta: f64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig { budget: 10_000, bonus_scale: 1.0, delta: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub return_true: f64,
    pub return_presented: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlOutcome {
    /// `actions[t][u]`
    pub actions: Vec<Vec<usize>>,
    pub episodes_used: usize,
    pub log: Vec<EpisodeLog>,
}

impl RlOutcome {
    pub fn policy(&self, decoder: &Decoder) -> AbstractPolicy {
        AbstractPolicy::new(decoder.clone(), self.actions.clone())
    }
}

struct Stats {
    n: Vec<f64>,
    r: Vec<f64>,
    /// Next-state counts, `[(t, u, a)][u']`
    p: Vec<f64>,
    na: usize,
    nu: usize,
}

impl Stats {
    fn cell(&self, t: usize, u: usize, a: usize) -> usize {
        (t * self.nu + u) * self.na + a
    }
}

/// Episodic optimistic value iteration with bonus `c sqrt(ln(N A H budget / delta) / n)`.
/// Unvisited `(t, u, a)` cells keep the maximal value; greedy ties go to the lowest action.
pub fn tabular_rl(view: &AbstractMdpView<'_>, cfg: &RlConfig, seed_value: u64) -> Result<RlOutcome> {
    if cfg.budget == 0 {
        return Err(Error::InvalidParameter("RL budget must be at least 1".into()));
    }
    let (nu, na, h) = (view.num_states(), view.num_actions(), view.horizon());
    let cap = view.reward_cap();
    let log_term = ((nu * na * h) as f64 * cfg.budget as f64 / cfg.delta).ln().max(0.0);
    let mut st = Stats { n: vec![0.0; h * nu * na], r: vec![0.0; h * nu * na], p: vec![0.0; h * nu * na * nu], na, nu };
    let mut rng = seed::stream(seed_value, component::RL, 0);
    let mut actions = plan(&st, h, cap, cfg.bonus_scale, log_term);
    let mut log = Vec::with_capacity(cfg.budget);
    for e in 0..cfg.budget {
        let ep = view.run_episode(|t, u| actions[t][u], &mut rng);
        for t in 0..h {
            let c = st.cell(t, ep.states[t], ep.actions[t]);
            st.n[c] += 1.0;
            st.r[c] += ep.rewards[t];
            if t + 1 < h {
                st.p[c * nu + ep.states[t + 1]] += 1.0;
            }
        }
        log.push(EpisodeLog { episode: e, return_true: ep.true_return, return_presented: ep.rewards.iter().sum() });
        actions = plan(&st, h, cap, cfg.bonus_scale, log_term);
    }
    Ok(RlOutcome { actions, episodes_used: cfg.budget, log })
}

fn plan(st: &Stats, h: usize, cap: f64, c: f64, log_term: f64) -> Vec<Vec<usize>> {
    let (nu, na) = (st.nu, st.na);
    let mut v_next = vec![0.0; nu];
    let mut actions = vec![vec![0; nu]; h];
    for t in (0..h).rev() {
        let vmax = (h - t) as f64 * cap;
        let mut v = vec![0.0; nu];
        for u in 0..nu {
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..na {
                let cell = st.cell(t, u, a);
                let n = st.n[cell];
                let q = if n == 0.0 {
                    vmax
                } else {
                    let future: f64 = if t + 1 < h { (0..nu).map(|u2| st.p[cell * nu + u2] * v_next[u2]).sum::<f64>() / n } else { 0.0 };
                    (st.r[cell] / n + future + c * (log_term / n).sqrt()).min(vmax)
                };
                if q > best.0 {
                    best = (q, a);
                }
            }
            v[u] = best.0;
            actions[t][u] = best.1;
        }
        v_next = v;
    }
    actions
}

// ── Evaluation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EvalMode {
    Exact,
    MonteCarlo(usize),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Exact => f.write_str("exact"),
            EvalMode::MonteCarlo(n) => write!(f, "mc:{n}"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(EvalMode::Exact);
        }
        match s.strip_prefix("mc:").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => Ok(EvalMode::MonteCarlo(n)),
            _ => Err(Error::InvalidParameter(format!("eval mode `{s}`: expected exact or mc:N"))),
        }
    }
}

impl From<EvalMode> for String {
    fn from(m: EvalMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for EvalMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub value: f64,
    /// Zero in exact mode; Hoeffding radius at 95% otherwise.
    pub radius: f64,
}

/// True-reward value `E[sum_{t<H} r_t]`; exogenous bonuses are never counted.
pub fn evaluate_policy(spec: &ExBmdpSpec, policy: &Policy, mode: EvalMode, seed_value: u64) -> Result<ValueEstimate> {
    match mode {
        EvalMode::Exact => exact_value(spec, policy).map(|value| ValueEstimate { value, radius: 0.0 }),
        EvalMode::MonteCarlo(n) => {
            let h = spec.horizon();
            let total: f64 = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = seed::stream(seed_value, component::EVAL, i as u64);
                    crate::mdp::simulate_with_rng(spec, policy, h, &mut rng).map(|e| e.true_return())
                })
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .sum();
            let radius = h as f64 * ((2.0f64 / 0.05).ln() / (2.0 * n as f64)).sqrt();
            Ok(ValueEstimate { value: total / n as f64, radius })
        }
    }
}

/// DP over `(t, s, xi)`. Abstract policies need a projection decoder so the
/// output law given the latent state is available in closed form.
fn exact_value(spec: &ExBmdpSpec, policy: &Policy) -> Result<f64> {
    if let Policy::AbstractComposed(ap) = policy {
        if !ap.decoder.is_projection() {
            return Err(Error::NotProjection);
        }
    }
    let (ns, nx, h) = (spec.latent.num_states, spec.num_exo(), spec.horizon());
    let exo = spec.exo_chain();
    let mut v_next = vec![0.0; ns * nx];
    for t in (0..h).rev() {
        let mut v = vec![0.0; ns * nx];
        for s in 0..ns {
            for xi in 0..nx {
                let action_law: Vec<(usize, f64)> = match policy {
                    Policy::LatentTabular(lp) => lp.action_probs(t, s).iter().copied().enumerate().filter(|x| x.1 > 0.0).collect(),
                    Policy::AbstractComposed(ap) => ap.decoder.latent_conditional(spec, s, xi, t).into_iter().map(|(u, p)| (ap.action(t, u), p)).collect(),
                };
                let mut val = 0.0;
                for (a, pa) in action_law {
                    let mut q = spec.latent.reward_at(t, s, a);
                    if t + 1 < h {
                        for (s2, &ps) in spec.latent.transition[s][a].iter().enumerate() {
                            if ps == 0.0 {
                                continue;
                            }
                            for (x2, &px) in exo.transition[xi].iter().enumerate() {
                                q += ps * px * v_next[s2 * nx + x2];
                            }
                        }
                    }
                    val += pa * q;
                }
                v[s * nx + xi] = val;
            }
        }
        v_next = v;
    }
    let mut total = 0.0;
    for (s, &p0) in spec.latent.start.iter().enumerate() {
        for (xi, &q0) in exo.start.iter().enumerate() {
            total += p0 * q0 * v_next[s * nx + xi];
        }
    }
    Ok(total)
}

/// Optimal true-reward value and a deterministic optimal latent policy.
pub fn optimal_value(spec: &ExBmdpSpec) -> (f64, LatentPolicy) {
    let (ns, na, h) = (spec.latent.num_states, spec.latent.num_actions, spec.horizon());
    let mut v_next = vec![0.0; ns];
    let mut acts = vec![vec![0; ns]; h];
    for t in (0..h).rev() {
        let mut v = vec![0.0; ns];
        for s in 0..ns {
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..na {
                let fut: f64 = if t + 1 < h { spec.latent.transition[s][a].iter().zip(&v_next).map(|(p, v)| p * v).sum() } else { 0.0 };
                let q = spec.latent.reward_at(t, s, a) + fut;
                if q > best.0 + 1e-12 {
                    best = (q, a);
                }
            }
            v[s] = best.0;
            acts[t][s] = best.1;
        }
        v_next = v;
    }
    let value = spec.latent.start.iter().zip(&v_next).map(|(p, v)| p * v).sum();
    (value, LatentPolicy::deterministic(&acts, na))
}

// ── Alignment ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignMode {
    Exact,
    Sampled { episodes: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// `alpha(s) = argmax_j P(j, s)`; `None` for states with zero mass.
    pub alpha: Vec<Option<usize>>,
    pub per_state_accuracy: Vec<Option<f64>>,
    pub is_bijection: bool,
    pub coupling_error: f64,
    /// Minimum per-state accuracy over states with mass.
    pub min_accuracy: f64,
    /// Best minimum accuracy achievable by an injective `alpha`; `None` when
    /// `N < S` or the search is too large.
    pub injective_min_accuracy: Option<f64>,
}

impl AlignmentReport {
    /// Accuracy up to relabelling: the best injective `alpha` when one exists, else 0.
    pub fn accuracy(&self) -> f64 {
        match self.injective_min_accuracy {
            Some(a) => a,
            None if self.is_bijection => self.min_accuracy,
            None => 0.0,
        }
    }
}

const INJECTIVE_LIMIT: f64 = 1e6;

/// Joint `P(j, s)` is time-pooled over `t < H` under the data mixture.
pub fn bijection_align(decoder: &Decoder, spec: &ExBmdpSpec, mixture: &PolicyMixture, mode: AlignMode) -> Result<AlignmentReport> {
    let joint = match mode {
        AlignMode::Exact => ExactModel::new(spec, mixture)?.decoder_state_joint(decoder),
        AlignMode::Sampled { episodes, seed } => sampled_joint(decoder, spec, mixture, episodes, seed)?,
    };
    Ok(align_from_joint(&joint))
}

fn sampled_joint(decoder: &Decoder, spec: &ExBmdpSpec, mixture: &PolicyMixture, episodes: usize, seed_value: u64) -> Result<Vec<Vec<f64>>> {
    if episodes == 0 {
        return Err(Error::Empty("alignment episodes"));
    }
    let weights = mixture.weights();
    let ns = spec.latent.num_states;
    let h = spec.horizon();
    let counts = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(seed_value, component::ALIGN, i as u64);
            let c = sample_index(&mut rng, &weights);
            let ep = crate::mdp::simulate_with_rng(spec, &mixture.components[c].1, h, &mut rng)?;
            Ok(ep.steps.iter().zip(&ep.latents).map(|(st, &(s, _))| (decoder.decode(&st.obs.0), s)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut joint = vec![vec![0.0; ns]; decoder.n_out];
    let total = (episodes * h) as f64;
    for (j, s) in counts.into_iter().flatten() {
        joint[j][s] += 1.0 / total;
    }
    Ok(joint)
}

/// Alignment metrics from a joint table `joint[j][s]`.
pub fn align_from_joint(joint: &[Vec<f64>]) -> AlignmentReport {
    let nj = joint.len();
    let ns = joint.first().map_or(0, Vec::len);
    let ps: Vec<f64> = (0..ns).map(|s| joint.iter().map(|r| r[s]).sum()).collect();
    let mut alpha = vec![None; ns];
    let mut acc = vec![None; ns];
    for s in 0..ns {
        if ps[s] <= 0.0 {
            continue;
        }
        let mut best = 0;
        for j in 1..nj {
            if joint[j][s] > joint[best][s] {
                best = j;
            }
        }
        alpha[s] = Some(best);
        acc[s] = Some(joint[best][s] / ps[s]);
    }
    let mut used: Vec<usize> = alpha.iter().flatten().copied().collect();
    let n_used = used.len();
    used.sort_unstable();
    used.dedup();
    let is_bijection = used.len() == n_used;
    let coupling_error: f64 = joint.iter().map(|r| r.iter().sum::<f64>().powi(2) - r.iter().map(|p| p * p).sum::<f64>()).sum();
    let min_accuracy = acc.iter().flatten().copied().fold(1.0, f64::min);
    let live: Vec<usize> = (0..ns).filter(|&s| ps[s] > 0.0).collect();
    let injective_min_accuracy = best_injective(joint, &ps, &live);
    AlignmentReport { alpha, per_state_accuracy: acc, is_bijection, coupling_error: coupling_error.max(0.0), min_accuracy, injective_min_accuracy }
}

fn best_injective(joint: &[Vec<f64>], ps: &[f64], live: &[usize]) -> Option<f64> {
    let nj = joint.len();
    if nj < live.len() {
        return None;
    }
    let count: f64 = (0..live.len()).map(|i| (nj - i) as f64).product();
    if count > INJECTIVE_LIMIT {
        return None;
    }
    fn rec(i: usize, cur: f64, used: &mut [bool], joint: &[Vec<f64>], ps: &[f64], live: &[usize], best: &mut f64) {
        if cur <= *best {
            return;
        }
        if i == live.len() {
            *best = cur;
            return;
        }
        let s = live[i];
        for j in 0..joint.len() {
            if !used[j] {
                used[j] = true;
                rec(i + 1, cur.min(joint[j][s] / ps[s]), used, joint, ps, live, best);
                used[j] = false;
            }
        }
    }
    let mut best = -1.0;
    rec(0, 1.0, &mut vec![false; nj], joint, ps, live, &mut best);
    Some(best.max(0.0))
}
