//! Video and trajectory datasets, multistep samplers and contrastive pairs.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{simulate_with_rng, ExBmdpSpec, FactoredObservation, PolicyMixture};
use crate::seed::{self, sample_index};

// ── k modes and negatives ──────────────────────────────────────────────

/// Serialised as `fixed:K` or `uniform:K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum KMode {
    Fixed(usize),
    Uniform(usize),
}

impl KMode {
    pub fn max_k(&self) -> usize {
        match *self {
            KMode::Fixed(k) | KMode::Uniform(k) => k,
        }
    }

    pub fn support(&self) -> impl Iterator<Item = usize> {
        match *self {
            KMode::Fixed(k) => k..=k,
            KMode::Uniform(k) => 1..=k,
        }
    }

    pub fn weight(&self, k: usize) -> f64 {
        match *self {
            KMode::Fixed(j) => (j == k) as u8 as f64,
            KMode::Uniform(kk) => {
                if (1..=kk).contains(&k) {
                    1.0 / kk as f64
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            KMode::Fixed(k) => k,
            KMode::Uniform(kk) => rng.gen_range(1..=kk),
        }
    }

    fn check(&self, available: usize) -> Result<()> {
        let k = self.max_k();
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if k > available {
            return Err(Error::LookaheadExceeded { requested: k, available });
        }
        Ok(())
    }
}

impl fmt::Display for KMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KMode::Fixed(k) => write!(f, "fixed:{k}"),
            KMode::Uniform(k) => write!(f, "uniform:{k}"),
        }
    }
}

impl FromStr for KMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("k-mode `{s}`: expected fixed:K or uniform:K"));
        let (kind, k) = s.split_once(':').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match kind {
            "fixed" => Ok(KMode::Fixed(k)),
            "uniform" => Ok(KMode::Uniform(k)),
            _ => Err(bad()),
        }
    }
}

impl From<KMode> for String {
    fn from(k: KMode) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for KMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Where the `z = 0` frame of a contrastive pair comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeSampling {
    /// The partner sample's first frame `x`.
    #[default]
    PartnerFirst,
    /// A fresh frame from the time-averaged marginal (uniform episode, uniform step `< H`).
    FreshRho,
    /// The partner sample's k-step-ahead frame `x'`.
    PartnerNext,
}

impl FromStr for NegativeSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partner-first" => Ok(NegativeSampling::PartnerFirst),
            "fresh-rho" => Ok(NegativeSampling::FreshRho),
            "partner-next" => Ok(NegativeSampling::PartnerNext),
            _ => Err(Error::InvalidParameter(format!("negatives `{s}`: expected partner-first, fresh-rho or partner-next"))),
        }
    }
}

// ── Datasets ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_id: String,
    pub mixture_id: String,
    pub seed: u64,
}

/// Observation-only episodes of length `H + K`, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDataset {
    pub provenance: Provenance,
    pub horizon: usize,
    pub episode_len: usize,
    pub num_factors: usize,
    data: Vec<u16>,
}

impl VideoDataset {
    pub fn new(provenance: Provenance, horizon: usize, episode_len: usize, num_factors: usize, data: Vec<u16>) -> Result<Self> {
        if num_factors == 0 || episode_len == 0 || data.len() % (episode_len * num_factors) != 0 {
            return Err(Error::Format("flat data length is not a whole number of episodes".into()));
        }
        Ok(VideoDataset { provenance, horizon, episode_len, num_factors, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.episode_len * self.num_factors)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn lookahead(&self) -> usize {
        self.episode_len - self.horizon
    }

    pub fn obs(&self, episode: usize, t: usize) -> &[u16] {
        let start = (episode * self.episode_len + t) * self.num_factors;
        &self.data[start..start + self.num_factors]
    }

    pub fn episode(&self, episode: usize) -> impl Iterator<Item = &[u16]> {
        (0..self.episode_len).map(move |t| self.obs(episode, t))
    }
}

/// Episodes with actions and presented rewards alongside the frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub video: VideoDataset,
    actions: Vec<u16>,
    rewards: Vec<f64>,
}

impl TrajectoryDataset {
    pub fn action(&self, episode: usize, t: usize) -> usize {
        self.actions[episode * self.video.episode_len + t] as usize
    }

    pub fn presented_reward(&self, episode: usize, t: usize) -> f64 {
        self.rewards[episode * self.video.episode_len + t]
    }

    pub fn len(&self) -> usize {
        self.video.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video.is_empty()
    }
}

struct RawEpisode {
    obs: Vec<u16>,
    actions: Vec<u16>,
    rewards: Vec<f64>,
}

fn collect_raw(spec: &ExBmdpSpec, mixture: &PolicyMixture, n: usize, seed_value: u64) -> Result<(Provenance, Vec<RawEpisode>)> {
    spec.validate()?;
    let comps = mixture.latent_components()?;
    let weights: Vec<f64> = comps.iter().map(|c| c.0).collect();
    let len = spec.episode_len();
    let episodes = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng: ChaCha8Rng = seed::stream(seed_value, seed::component::EPISODES, i as u64);
            let c = sample_index(&mut rng, &weights);
            let ep = simulate_with_rng(spec, &mixture.components[c].1, len, &mut rng)?;
            let mut obs = Vec::with_capacity(len * spec.num_factors());
            for st in &ep.steps {
                obs.extend_from_slice(&st.obs.0);
            }
            Ok(RawEpisode {
                obs,
                actions: ep.steps.iter().map(|s| s.action as u16).collect(),
                rewards: ep.steps.iter().map(|s| s.presented_reward).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance { spec_id: spec.spec_id(), mixture_id: mixture.mixture_id(), seed: seed_value };
    Ok((prov, episodes))
}

/// `n` iid episodes of length `H + K`. Episode `i` uses its own derived stream.
pub fn collect_video(spec: &ExBmdpSpec, mixture: &PolicyMixture, n: usize, seed_value: u64) -> Result<VideoDataset> {
    let (prov, eps) = collect_raw(spec, mixture, n, seed_value)?;
    let data = eps.into_iter().flat_map(|e| e.obs).collect();
    Ok(VideoDataset { provenance: prov, horizon: spec.horizon(), episode_len: spec.episode_len(), num_factors: spec.num_factors(), data })
}

pub fn collect_trajectories(spec: &ExBmdpSpec, mixture: &PolicyMixture, n: usize, seed_value: u64) -> Result<TrajectoryDataset> {
    let (prov, eps) = collect_raw(spec, mixture, n, seed_value)?;
    let mut data = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for e in eps {
        data.extend(e.obs);
        actions.extend(e.actions);
        rewards.extend(e.rewards);
    }
    let video = VideoDataset { provenance: prov, horizon: spec.horizon(), episode_len: spec.episode_len(), num_factors: spec.num_factors(), data };
    Ok(TrajectoryDataset { video, actions, rewards })
}

// ── Samples ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultistepSample {
    pub x: FactoredObservation,
    pub k: usize,
    pub x_next: FactoredObservation,
}

/// Multistep sample with the action taken at `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledMultistep {
    pub x: FactoredObservation,
    pub k: usize,
    pub x_next: FactoredObservation,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub x: FactoredObservation,
    pub k: usize,
    pub x_prime: FactoredObservation,
    pub z: bool,
}

fn draw(dataset: &VideoDataset, k_mode: KMode, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let t = rng.gen_range(0..dataset.horizon);
    (t, k_mode.sample(rng))
}

fn make_sample(dataset: &VideoDataset, ep: usize, t: usize, k: usize) -> MultistepSample {
    MultistepSample {
        x: FactoredObservation(dataset.obs(ep, t).to_vec()),
        k,
        x_next: FactoredObservation(dataset.obs(ep, t + k).to_vec()),
    }
}

/// `n` iid samples: episode uniform (with replacement), step uniform in `[0, H)`, `k` per mode.
pub fn sample_multistep(dataset: &VideoDataset, k_mode: KMode, n: usize, seed_value: u64) -> Result<Vec<MultistepSample>> {
    k_mode.check(dataset.lookahead())?;
    if dataset.is_empty() && n > 0 {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = seed::stream(seed_value, seed::component::MULTISTEP, 0);
    Ok((0..n)
        .map(|_| {
            let ep = rng.gen_range(0..dataset.len());
            let (t, k) = draw(dataset, k_mode, &mut rng);
            make_sample(dataset, ep, t, k)
        })
        .collect())
}

/// One sample from each episode, in episode order; samples are independent.
pub fn multistep_per_episode(dataset: &VideoDataset, k_mode: KMode, seed_value: u64) -> Result<Vec<MultistepSample>> {
    k_mode.check(dataset.lookahead())?;
    let mut rng = seed::stream(seed_value, seed::component::MULTISTEP, 1);
    Ok((0..dataset.len())
        .map(|ep| {
            let (t, k) = draw(dataset, k_mode, &mut rng);
            make_sample(dataset, ep, t, k)
        })
        .collect())
}

/// One action-labelled sample per episode.
pub fn labeled_per_episode(traj: &TrajectoryDataset, k_mode: KMode, seed_value: u64) -> Result<Vec<LabeledMultistep>> {
    let video = &traj.video;
    k_mode.check(video.lookahead())?;
    let mut rng = seed::stream(seed_value, seed::component::MULTISTEP, 2);
    Ok((0..video.len())
        .map(|ep| {
            let (t, k) = draw(video, k_mode, &mut rng);
            LabeledMultistep {
                x: FactoredObservation(video.obs(ep, t).to_vec()),
                k,
                x_next: FactoredObservation(video.obs(ep, t + k).to_vec()),
                action: traj.action(ep, t),
            }
        })
        .collect())
}

/// Pairs source samples `(2i, 2i+1)` into `floor(n/2)` contrastive datapoints.
/// `z = 1` keeps sample `2i`'s own future; `z = 0` swaps in a negative frame.
pub fn contrastive_from_samples(
    samples: &[MultistepSample],
    negatives: NegativeSampling,
    dataset: Option<&VideoDataset>,
    seed_value: u64,
) -> Result<Vec<ContrastivePair>> {
    if samples.len() < 2 {
        return Err(Error::Empty("contrastive source (need at least 2 multistep samples)"));
    }
    if negatives == NegativeSampling::FreshRho && dataset.is_none() {
        return Err(Error::InvalidParameter("fresh-rho negatives need the source dataset".into()));
    }
    let mut rng = seed::stream(seed_value, seed::component::CONTRASTIVE, 0);
    Ok(samples
        .chunks_exact(2)
        .map(|pair| {
            let z: bool = rng.gen();
            let x_prime = if z {
                pair[0].x_next.clone()
            } else {
                match negatives {
                    NegativeSampling::PartnerFirst => pair[1].x.clone(),
                    NegativeSampling::PartnerNext => pair[1].x_next.clone(),
                    NegativeSampling::FreshRho => {
                        let d = dataset.expect("checked above");
                        let ep = rng.gen_range(0..d.len());
                        let t = rng.gen_range(0..d.horizon);
                        FactoredObservation(d.obs(ep, t).to_vec())
                    }
                }
            };
            ContrastivePair { x: pair[0].x.clone(), k: pair[0].k, x_prime, z }
        })
        .collect())
}

/// Contrastive pairs from one multistep sample per episode.
pub fn build_contrastive(dataset: &VideoDataset, k_mode: KMode, negatives: NegativeSampling, seed_value: u64) -> Result<Vec<ContrastivePair>> {
    let samples = multistep_per_episode(dataset, k_mode, seed_value)?;
    contrastive_from_samples(&samples, negatives, Some(dataset), seed_value)
}

// ── Line-delimited storage ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    spec_id: String,
    mixture_id: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k_mode: Option<String>,
    horizon: usize,
    episode_len: usize,
    num_factors: usize,
    episodes: usize,
}

#[derive(Serialize, Deserialize)]
struct EpisodeLine {
    obs: Vec<Vec<u16>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    actions: Option<Vec<u16>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rewards: Option<Vec<f64>>,
}

fn header_for(v: &VideoDataset, kind: &str, k_mode: Option<KMode>) -> Header {
    Header {
        kind: kind.into(),
        spec_id: v.provenance.spec_id.clone(),
        mixture_id: v.provenance.mixture_id.clone(),
        seed: v.provenance.seed,
        k_mode: k_mode.map(|k| k.to_string()),
        horizon: v.horizon,
        episode_len: v.episode_len,
        num_factors: v.num_factors,
        episodes: v.len(),
    }
}

/// Header line, then one JSON episode per line.
pub fn write_video<W: Write>(v: &VideoDataset, k_mode: Option<KMode>, mut w: W) -> Result<()> {
    serde_json::to_writer(&mut w, &header_for(v, "video", k_mode))?;
    writeln!(w)?;
    for ep in 0..v.len() {
        let line = EpisodeLine { obs: v.episode(ep).map(|o| o.to_vec()).collect(), actions: None, rewards: None };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_trajectories<W: Write>(d: &TrajectoryDataset, k_mode: Option<KMode>, mut w: W) -> Result<()> {
    let v = &d.video;
    serde_json::to_writer(&mut w, &header_for(v, "trajectories", k_mode))?;
    writeln!(w)?;
    let len = v.episode_len;
    for ep in 0..v.len() {
        let line = EpisodeLine {
            obs: v.episode(ep).map(|o| o.to_vec()).collect(),
            actions: Some(d.actions[ep * len..(ep + 1) * len].to_vec()),
            rewards: Some(d.rewards[ep * len..(ep + 1) * len].to_vec()),
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads either format; action and reward columns are kept when present.
pub fn read_dataset<R: BufRead>(r: R) -> Result<(Option<KMode>, std::result::Result<TrajectoryDataset, VideoDataset>)> {
    let mut lines = r.lines();
    let head: Header = serde_json::from_str(&lines.next().ok_or(Error::Empty("dataset file"))??)?;
    let k_mode = head.k_mode.as_deref().map(KMode::from_str).transpose()?;
    let mut data = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: EpisodeLine = serde_json::from_str(&line)?;
        if ep.obs.len() != head.episode_len || ep.obs.iter().any(|o| o.len() != head.num_factors) {
            return Err(Error::Format("episode shape does not match header".into()));
        }
        data.extend(ep.obs.into_iter().flatten());
        if let (Some(a), Some(rw)) = (ep.actions, ep.rewards) {
            actions.extend(a);
            rewards.extend(rw);
        }
    }
    let prov = Provenance { spec_id: head.spec_id, mixture_id: head.mixture_id, seed: head.seed };
    let video = VideoDataset::new(prov, head.horizon, head.episode_len, head.num_factors, data)?;
    if video.len() != head.episodes {
        return Err(Error::Format(format!("header announces {} episodes, found {}", head.episodes, video.len())));
    }
    if head.kind == "trajectories" {
        if actions.len() != video.len() * head.episode_len {
            return Err(Error::Format("missing action columns".into()));
        }
        Ok((k_mode, Ok(TrajectoryDataset { video, actions, rewards })))
    } else {
        Ok((k_mode, Err(video)))
    }
}
