//! Environment constructors: the hard-instance family, the H=1 two-chain
//! instance, a combination-lock env with exogenous/iid extras, and random small
//! Block MDPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderClass};
use crate::error::{Error, Result};
use crate::mdp::{
    ExBmdpSpec, ExoChain, FactorKind, FactorSpec, FactoredEmission, LatentMdp, LatentPolicy, Policy,
    PolicyMixture,
};
use crate::seed;

/// A spec bundled with its designated data mixture and factor roles.
#[derive(Debug, Clone)]
pub struct EnvInstance {
    pub spec: ExBmdpSpec,
    pub data_mixture: PolicyMixture,
    /// Observation factors that are deterministic copies of the endogenous state.
    pub endo_factors: Vec<usize>,
    /// Observation factors driven by the exogenous chain.
    pub exo_factors: Vec<usize>,
    pub iid_factors: Vec<usize>,
}

fn time_factor(len: usize) -> FactorSpec {
    FactorSpec { name: "t".into(), cardinality: len, kind: FactorKind::TimeStamp }
}

fn checked(inst: EnvInstance) -> Result<EnvInstance> {
    inst.spec.validate()?;
    Ok(inst)
}

// ── Hard instance ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardInstanceParams {
    pub d: usize,
    pub p: f64,
    /// 1-based index of the endogenous factor.
    pub i: usize,
}

/// Member `i` of the hard family: `d` binary factors, factor `i` endogenous with
/// `s2 = 1(s1 = a)`, the rest flip with probability `p`; reward `s2` at step 2.
pub fn make_hard_instance(params: &HardInstanceParams) -> Result<EnvInstance> {
    let HardInstanceParams { d, p, i } = *params;
    if d == 0 || d > 16 {
        return Err(Error::InvalidParameter(format!("d = {d} must be in [1, 16]")));
    }
    if i == 0 || i > d {
        return Err(Error::InvalidParameter(format!("i = {i} must be in [1, {d}]")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("p = {p} must be in (0, 1)")));
    }
    let n_exo_bits = d - 1;
    let nx = 1usize << n_exo_bits;
    let exo_t: Vec<Vec<f64>> = (0..nx)
        .map(|x| {
            (0..nx)
                .map(|y| {
                    let flips = (x ^ y).count_ones() as i32;
                    p.powi(flips) * (1.0 - p).powi(n_exo_bits as i32 - flips)
                })
                .collect()
        })
        .collect();
    let latent = LatentMdp {
        num_states: 2,
        num_actions: 2,
        horizon: 2,
        transition: (0..2)
            .map(|s| (0..2).map(|a| if s == a { vec![0.0, 1.0] } else { vec![1.0, 0.0] }).collect())
            .collect(),
        reward: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
        start: vec![0.5, 0.5],
        rewarded_steps: Some(vec![false, true]),
    };
    let mut factors = vec![time_factor(3)];
    let mut exo_factors = Vec::new();
    let mut bit = 0;
    for j in 1..=d {
        if j == i {
            factors.push(FactorSpec {
                name: format!("b{j}"),
                cardinality: 2,
                kind: FactorKind::DeterministicEndo { map: vec![0, 1] },
            });
        } else {
            let b = bit;
            factors.push(FactorSpec {
                name: format!("b{j}"),
                cardinality: 2,
                kind: FactorKind::DeterministicExo { map: (0..nx).map(|x| (x >> b) & 1).collect() },
            });
            exo_factors.push(j);
            bit += 1;
        }
    }
    let spec = ExBmdpSpec {
        name: format!("hard-d{d}-i{i}"),
        latent,
        exo: (n_exo_bits > 0).then(|| ExoChain { num_states: nx, transition: exo_t, start: vec![1.0 / nx as f64; nx] }),
        emission: FactoredEmission { factors },
        exo_reward_bonus: None,
        lookahead: 1,
    };
    checked(EnvInstance {
        spec,
        data_mixture: PolicyMixture::single(LatentPolicy::stationary(vec![vec![p, 1.0 - p]; 2])),
        endo_factors: vec![i],
        exo_factors,
        iid_factors: vec![],
    })
}

// ── H = 1 two-chain instance ───────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppCParams {
    /// Total noisy bits.
    pub m: usize,
    /// Noisy bits copied from the exogenous chain.
    pub l: usize,
}

pub const APPC_FLIP: f64 = 0.2;

/// Observation `[t, xi, v_1..v_l, w_1..w_{m-l}, s]`; `v` are noisy copies of `xi`,
/// `w` noisy copies of `s`. Data policy takes `a = s`, sending `s' = 1 - s`.
pub fn make_appc_instance(params: &AppCParams) -> Result<EnvInstance> {
    let AppCParams { m, l } = *params;
    if l > m {
        return Err(Error::InvalidParameter(format!("l = {l} exceeds m = {m}")));
    }
    if m > 24 {
        return Err(Error::InvalidParameter(format!("m = {m} too large")));
    }
    let noisy = vec![vec![1.0 - APPC_FLIP, APPC_FLIP], vec![APPC_FLIP, 1.0 - APPC_FLIP]];
    let mut factors = vec![
        time_factor(2),
        FactorSpec { name: "xi".into(), cardinality: 2, kind: FactorKind::DeterministicExo { map: vec![0, 1] } },
    ];
    for j in 0..l {
        factors.push(FactorSpec {
            name: format!("v{}", j + 1),
            cardinality: 2,
            kind: FactorKind::NoisyExo { table: noisy.clone() },
        });
    }
    for j in 0..m - l {
        factors.push(FactorSpec {
            name: format!("w{}", j + 1),
            cardinality: 2,
            kind: FactorKind::NoisyEndo { table: noisy.clone() },
        });
    }
    factors.push(FactorSpec { name: "s".into(), cardinality: 2, kind: FactorKind::DeterministicEndo { map: vec![0, 1] } });
    let latent = LatentMdp {
        num_states: 2,
        num_actions: 2,
        horizon: 1,
        // a = s flips the state, a != s keeps it
        transition: (0..2)
            .map(|s| (0..2).map(|a| if a == s { unit(2, 1 - s) } else { unit(2, s) }).collect())
            .collect(),
        // paid when s2 = s1, i.e. a != s
        reward: (0..2).map(|s| (0..2).map(|a| (a != s) as u8 as f64).collect()).collect(),
        start: vec![0.5, 0.5],
        rewarded_steps: None,
    };
    let spec = ExBmdpSpec {
        name: format!("appc-m{m}-l{l}"),
        latent,
        exo: Some(ExoChain { num_states: 2, transition: vec![unit(2, 1), unit(2, 0)], start: vec![0.5, 0.5] }),
        emission: FactoredEmission { factors },
        exo_reward_bonus: None,
        lookahead: 1,
    };
    let mut exo_factors = vec![1];
    exo_factors.extend(2..2 + l);
    checked(EnvInstance {
        spec,
        data_mixture: PolicyMixture::single(LatentPolicy::stationary(vec![vec![1.0, 0.0], vec![0.0, 1.0]])),
        endo_factors: vec![m + 2],
        exo_factors,
        iid_factors: vec![],
    })
}

/// `{phi*, phi*_xi}`: projections on the last factor (s) and the first non-time factor (xi).
pub fn appc_decoder_class(inst: &EnvInstance) -> DecoderClass {
    let spec = &inst.spec;
    let last = spec.num_factors() - 1;
    DecoderClass::new(vec![
        Decoder::factor_identity(spec, last, "phi_star"),
        Decoder::factor_identity(spec, 1, "phi_star_xi"),
    ])
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

// ── Lock env ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LockStart {
    Uniform,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LockEnvConfig {
    pub lookahead: usize,
    /// Cyclic exogenous factors, each moving `+1 mod period` every step.
    pub n_exo: usize,
    pub period: usize,
    pub n_iid: usize,
    pub iid_card: usize,
    /// Noisy copies of the endogenous state.
    pub n_noisy_endo: usize,
    pub noisy_flip: f64,
    /// Presented-reward bonus paid when every exogenous factor is at 0.
    pub exo_bonus: Option<f64>,
    pub reward_state: Option<usize>,
    pub start: LockStart,
}

impl Default for LockEnvConfig {
    fn default() -> Self {
        LockEnvConfig {
            lookahead: 1,
            n_exo: 0,
            period: 4,
            n_iid: 0,
            iid_card: 2,
            n_noisy_endo: 0,
            noisy_flip: 0.1,
            exo_bonus: None,
            reward_state: None,
            start: LockStart::Uniform,
        }
    }
}

/// Ring lock: `s' = (s + a) mod S`, reward 1 in the reward state (default `S - 1`).
/// Distinct states reach distinct successor sets whenever `A < S`, so the forward
/// margin is positive under the uniform data policy.
pub fn make_lock_env(num_states: usize, num_actions: usize, horizon: usize, cfg: &LockEnvConfig) -> Result<EnvInstance> {
    if num_states < 2 {
        return Err(Error::InvalidParameter("lock env needs at least 2 states".into()));
    }
    if num_actions < 2 || num_actions >= num_states {
        return Err(Error::InvalidParameter(format!(
            "lock env needs 2 <= actions < states (got {num_actions} actions, {num_states} states)"
        )));
    }
    if horizon == 0 || cfg.lookahead == 0 {
        return Err(Error::InvalidParameter("horizon and lookahead must be positive".into()));
    }
    if cfg.n_exo > 0 && cfg.period < 2 {
        return Err(Error::InvalidParameter("exogenous period must be at least 2".into()));
    }
    if cfg.n_iid > 0 && cfg.iid_card < 2 {
        return Err(Error::InvalidParameter("iid cardinality must be at least 2".into()));
    }
    if cfg.exo_bonus.is_some() && cfg.n_exo == 0 {
        return Err(Error::InvalidParameter("exo bonus needs at least one exogenous factor".into()));
    }
    let reward_state = cfg.reward_state.unwrap_or(num_states - 1);
    if reward_state >= num_states {
        return Err(Error::InvalidParameter(format!("reward state {reward_state} out of range")));
    }
    let start = match cfg.start {
        LockStart::Uniform => vec![1.0 / num_states as f64; num_states],
        LockStart::Fixed(s) if s < num_states => unit(num_states, s),
        LockStart::Fixed(s) => return Err(Error::InvalidParameter(format!("start state {s} out of range"))),
    };
    let transition: Vec<Vec<Vec<f64>>> =
        (0..num_states).map(|s| (0..num_actions).map(|a| unit(num_states, (s + a) % num_states)).collect()).collect();

    // reachability of the reward state within the horizon
    let mut reach: Vec<bool> = start.iter().map(|&p| p > 0.0).collect();
    let mut found = reach[reward_state];
    for _ in 1..horizon {
        let mut next = vec![false; num_states];
        for s in (0..num_states).filter(|&s| reach[s]) {
            for a in 0..num_actions {
                next[(s + a) % num_states] = true;
            }
        }
        reach = next;
        found |= reach[reward_state];
    }
    if !found {
        return Err(Error::UnreachableReward { state: reward_state });
    }

    let len = horizon + cfg.lookahead;
    let mut factors = vec![
        time_factor(len),
        FactorSpec {
            name: "s".into(),
            cardinality: num_states,
            kind: FactorKind::DeterministicEndo { map: (0..num_states).collect() },
        },
    ];
    let endo_factors = vec![1];
    for j in 0..cfg.n_noisy_endo {
        let eps = cfg.noisy_flip;
        let table = (0..num_states)
            .map(|s| (0..num_states).map(|v| if v == s { 1.0 - eps } else { eps / (num_states - 1) as f64 }).collect())
            .collect();
        factors.push(FactorSpec { name: format!("s_noisy{j}"), cardinality: num_states, kind: FactorKind::NoisyEndo { table } });
    }
    let c = cfg.period;
    let nx = c.checked_pow(cfg.n_exo as u32).filter(|&n| n <= 1 << 20).ok_or_else(|| {
        Error::InvalidParameter(format!("exogenous space {c}^{} too large", cfg.n_exo))
    })?;
    let mut exo_factors = Vec::new();
    for j in 0..cfg.n_exo {
        let stride = c.pow(j as u32);
        exo_factors.push(factors.len());
        factors.push(FactorSpec {
            name: format!("exo{j}"),
            cardinality: c,
            kind: FactorKind::DeterministicExo { map: (0..nx).map(|x| (x / stride) % c).collect() },
        });
    }
    let mut iid_factors = Vec::new();
    for j in 0..cfg.n_iid {
        iid_factors.push(factors.len());
        factors.push(FactorSpec {
            name: format!("iid{j}"),
            cardinality: cfg.iid_card,
            kind: FactorKind::IidNoise { dist: vec![1.0 / cfg.iid_card as f64; cfg.iid_card] },
        });
    }
    let exo = (cfg.n_exo > 0).then(|| {
        let step = |x: usize| -> usize {
            (0..cfg.n_exo).map(|j| c.pow(j as u32) * (((x / c.pow(j as u32)) % c + 1) % c)).sum()
        };
        ExoChain { num_states: nx, transition: (0..nx).map(|x| unit(nx, step(x))).collect(), start: vec![1.0 / nx as f64; nx] }
    });
    let spec = ExBmdpSpec {
        name: format!("lock-s{num_states}-a{num_actions}-h{horizon}"),
        latent: LatentMdp {
            num_states,
            num_actions,
            horizon,
            transition,
            reward: (0..num_states).map(|s| vec![(s == reward_state) as u8 as f64; num_actions]).collect(),
            start,
            rewarded_steps: None,
        },
        exo,
        emission: FactoredEmission { factors },
        exo_reward_bonus: cfg.exo_bonus.map(|b| (0..nx).map(|x| if x == 0 { b } else { 0.0 }).collect()),
        lookahead: cfg.lookahead,
    };
    checked(EnvInstance {
        spec,
        data_mixture: PolicyMixture::single(LatentPolicy::uniform(num_states, num_actions)),
        endo_factors,
        exo_factors,
        iid_factors,
    })
}

// ── Random small Block MDPs ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomLimits {
    pub max_states: usize,
    pub max_actions: usize,
    pub max_horizon: usize,
    pub max_lookahead: usize,
}

impl Default for RandomLimits {
    fn default() -> Self {
        RandomLimits { max_states: 4, max_actions: 3, max_horizon: 4, max_lookahead: 3 }
    }
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize, sparse: bool) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n)
            .map(|_| if sparse && rng.gen_bool(0.4) { 0.0 } else { rng.gen_range(0.05..1.0) })
            .collect();
        let sum: f64 = v.iter().sum();
        if sum > 0.0 {
            v.iter_mut().for_each(|x| *x /= sum);
            // exact renormalisation of rounding on the last positive entry
            let resid = 1.0 - v.iter().sum::<f64>();
            if let Some(x) = v.iter_mut().rev().find(|x| **x > 0.0) {
                *x += resid;
            }
            return v;
        }
    }
}

/// Random Block MDP with sparse transitions, full-support start, a noisy endogenous
/// copy next to the deterministic one, and a mixture of 1-3 time-varying policies.
pub fn random_block_mdp(seed_value: u64, limits: &RandomLimits) -> Result<EnvInstance> {
    let mut rng = seed::stream(seed_value, seed::component::RANDOM_ENV, 0);
    let ns = rng.gen_range(1..=limits.max_states);
    let na = rng.gen_range(1..=limits.max_actions);
    let h = rng.gen_range(1..=limits.max_horizon);
    let k = rng.gen_range(1..=limits.max_lookahead);
    let transition = (0..ns).map(|_| (0..na).map(|_| random_simplex(&mut rng, ns, true)).collect()).collect();
    let reward = (0..ns).map(|_| (0..na).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let start = random_simplex(&mut rng, ns, false);
    let n_pol = rng.gen_range(1..=3usize);
    let mut weights = random_simplex(&mut rng, n_pol, false);
    weights.iter_mut().for_each(|w| *w = (*w * 1e6).round() / 1e6);
    let wsum: f64 = weights[..n_pol - 1].iter().sum();
    weights[n_pol - 1] = 1.0 - wsum;
    let comps = weights
        .into_iter()
        .map(|w| {
            let probs = (0..h + k).map(|_| (0..ns).map(|_| random_simplex(&mut rng, na, true)).collect()).collect();
            (w, Policy::LatentTabular(LatentPolicy { probs }))
        })
        .collect();
    let noise = (0..ns).map(|_| random_simplex(&mut rng, 3, false)).collect();
    let spec = ExBmdpSpec {
        name: format!("random-{seed_value}"),
        latent: LatentMdp { num_states: ns, num_actions: na, horizon: h, transition, reward, start, rewarded_steps: None },
        exo: None,
        emission: FactoredEmission {
            factors: vec![
                time_factor(h + k),
                FactorSpec { name: "s".into(), cardinality: ns, kind: FactorKind::DeterministicEndo { map: (0..ns).collect() } },
                FactorSpec { name: "n".into(), cardinality: 3, kind: FactorKind::NoisyEndo { table: noise } },
            ],
        },
        exo_reward_bonus: None,
        lookahead: k,
    };
    checked(EnvInstance {
        spec,
        data_mixture: PolicyMixture::new(comps),
        endo_factors: vec![1],
        exo_factors: vec![],
        iid_factors: vec![],
    })
}

/// Environment selector used by configs and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    Lock {
        states: usize,
        actions: usize,
        horizon: usize,
        #[serde(default)]
        extras: LockEnvConfig,
    },
    Hard(HardInstanceParams),
    Appc(AppCParams),
    Random {
        seed: u64,
    },
}

impl EnvConfig {
    pub fn build(&self) -> Result<EnvInstance> {
        match self {
            EnvConfig::Lock { states, actions, horizon, extras } => make_lock_env(*states, *actions, *horizon, extras),
            EnvConfig::Hard(p) => make_hard_instance(p),
            EnvConfig::Appc(p) => make_appc_instance(p),
            EnvConfig::Random { seed } => random_block_mdp(*seed, &RandomLimits::default()),
        }
    }
}
