//! Exact ERM over finite decoder classes with closed-form heads.
//!
//! Every head conditions on the time stamp of `x` (factor 0) and the decoder
//! output. Training losses use raw counts; cells never seen fall back to uniform.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ContrastivePair, LabeledMultistep, MultistepSample, VideoDataset};
use crate::decoder::{Decoder, DecoderClass};
use crate::error::{Error, Result};
use crate::oracle::{ExactModel, PopulationOptions};

/// Losses within this distance of the minimum count as tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "auto")]
    Autoencoder,
    #[serde(rename = "forward")]
    Forward,
    #[serde(rename = "contrastive")]
    Contrastive,
    #[serde(rename = "acro")]
    Acro,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Autoencoder => "auto",
            Objective::Forward => "forward",
            Objective::Contrastive => "contrastive",
            Objective::Acro => "acro",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" | "autoencoder" => Ok(Objective::Autoencoder),
            "forward" => Ok(Objective::Forward),
            "contrastive" => Ok(Objective::Contrastive),
            "acro" => Ok(Objective::Acro),
            _ => Err(Error::InvalidParameter(format!("objective `{s}`: expected auto, forward, contrastive or acro"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardHeadKind {
    /// Product of per-factor conditionals.
    #[default]
    Factored,
    /// One categorical over whole observations.
    Joint,
}

// ── Layout ─────────────────────────────────────────────────────────────

/// Observed factor cardinalities, used to key outcomes and size heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub radices: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl Layout {
    fn from_obs<'a>(obs: impl Iterator<Item = &'a [u16]>) -> Result<Self> {
        let mut radices: Vec<usize> = Vec::new();
        for o in obs {
            if radices.is_empty() {
                radices = vec![1; o.len()];
            }
            for (r, &v) in radices.iter_mut().zip(o) {
                *r = (*r).max(v as usize + 1);
            }
        }
        if radices.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let mut offsets = vec![0];
        for r in &radices {
            offsets.push(offsets.last().unwrap() + r);
        }
        Ok(Layout { radices, offsets })
    }

    pub fn width(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn obs_id(&self, obs: &[u16]) -> u64 {
        obs.iter().zip(&self.radices).fold(0u64, |acc, (&v, &r)| acc * r as u64 + v as u64)
    }

    pub fn size(&self) -> f64 {
        self.radices.iter().map(|&r| r as f64).product()
    }
}

type Cell = (usize, usize, usize);

fn xlogx(c: f64) -> f64 {
    if c > 0.0 {
        c * c.ln()
    } else {
        0.0
    }
}

// ── Heads ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardHead {
    pub kind: ForwardHeadKind,
    pub layout: Layout,
    /// Factored: concatenated per-factor conditionals per `(t, u, k)`.
    pub factored: BTreeMap<Cell, Vec<f64>>,
    /// Joint: outcome distribution per `(t, u, k)`.
    pub joint: BTreeMap<Cell, BTreeMap<u64, f64>>,
}

impl ForwardHead {
    pub fn prob(&self, t: usize, u: usize, k: usize, x_next: &[u16]) -> f64 {
        match self.kind {
            ForwardHeadKind::Factored => match self.factored.get(&(t, u, k)) {
                Some(p) => x_next
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| if (v as usize) < self.layout.radices[j] { p[self.layout.offsets[j] + v as usize] } else { 0.0 })
                    .product(),
                None => 1.0 / self.layout.size(),
            },
            ForwardHeadKind::Joint => match self.joint.get(&(t, u, k)) {
                Some(p) => p.get(&self.layout.obs_id(x_next)).copied().unwrap_or(0.0),
                None => 1.0 / self.layout.size(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveHead {
    pub layout: Layout,
    /// Mean of `z` per `(t, u, k, x' id)`; unseen cells give 1/2.
    pub cells: BTreeMap<(usize, usize, usize, u64), f64>,
}

impl ContrastiveHead {
    pub fn value(&self, t: usize, u: usize, k: usize, x_prime: &[u16]) -> f64 {
        self.cells.get(&(t, u, k, self.layout.obs_id(x_prime))).copied().unwrap_or(0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoHead {
    pub layout: Layout,
    /// Mean one-hot vector per `(t, u)`.
    pub cells: BTreeMap<(usize, usize), Vec<f64>>,
}

impl AutoHead {
    pub fn reconstruction(&self, t: usize, u: usize) -> Vec<f64> {
        match self.cells.get(&(t, u)) {
            Some(v) => v.clone(),
            None => {
                let mut v = vec![0.0; self.layout.width()];
                for (j, &r) in self.layout.radices.iter().enumerate() {
                    v[self.layout.offsets[j]..self.layout.offsets[j + 1]].iter_mut().for_each(|x| *x = 1.0 / r as f64);
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcroHead {
    pub layout: Layout,
    pub num_actions: usize,
    /// Action distribution per `(t, u, k, x' id)`.
    pub cells: BTreeMap<(usize, usize, usize, u64), Vec<f64>>,
}

impl AcroHead {
    pub fn prob(&self, t: usize, u: usize, k: usize, x_next: &[u16], a: usize) -> f64 {
        match self.cells.get(&(t, u, k, self.layout.obs_id(x_next))) {
            Some(p) => p.get(a).copied().unwrap_or(0.0),
            None => 1.0 / self.num_actions as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TabularHead {
    Forward(ForwardHead),
    Contrastive(ContrastiveHead),
    Auto(AutoHead),
    Acro(AcroHead),
}

/// Training data for one objective.
#[derive(Debug, Clone, Copy)]
pub enum TrainingData<'a> {
    Video(&'a VideoDataset),
    Multistep(&'a [MultistepSample]),
    Contrastive(&'a [ContrastivePair]),
    Labeled(&'a [LabeledMultistep]),
}

impl TrainingData<'_> {
    fn is_empty(&self) -> bool {
        match self {
            TrainingData::Video(v) => v.is_empty(),
            TrainingData::Multistep(s) => s.is_empty(),
            TrainingData::Contrastive(s) => s.is_empty(),
            TrainingData::Labeled(s) => s.is_empty(),
        }
    }
}

fn mismatch(objective: Objective, what: &str) -> Error {
    Error::InvalidParameter(format!("{objective} objective cannot train on {what}"))
}

/// `(x, k, x')` triples of a forward dataset.
fn forward_triples<'a>(data: TrainingData<'a>) -> Result<Vec<(&'a [u16], usize, &'a [u16])>> {
    match data {
        TrainingData::Multistep(s) => Ok(s.iter().map(|m| (&m.x.0[..], m.k, &m.x_next.0[..])).collect()),
        TrainingData::Labeled(s) => Ok(s.iter().map(|m| (&m.x.0[..], m.k, &m.x_next.0[..])).collect()),
        TrainingData::Video(_) => Err(mismatch(Objective::Forward, "raw video (sample multistep transitions first)")),
        TrainingData::Contrastive(_) => Err(mismatch(Objective::Forward, "contrastive pairs")),
    }
}

fn video_frames(v: &VideoDataset) -> Vec<&[u16]> {
    (0..v.len()).flat_map(|e| (0..v.horizon).map(move |t| v.obs(e, t))).collect()
}

/// Closed-form minimiser of the empirical loss for a fixed decoder.
pub fn fit_head(objective: Objective, decoder: &Decoder, data: TrainingData<'_>) -> Result<TabularHead> {
    fit_head_with(objective, decoder, data, ForwardHeadKind::Factored)
}

pub fn fit_head_with(objective: Objective, decoder: &Decoder, data: TrainingData<'_>, fk: ForwardHeadKind) -> Result<TabularHead> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    match objective {
        Objective::Forward => {
            let triples = forward_triples(data)?;
            let layout = Layout::from_obs(triples.iter().flat_map(|t| [t.0, t.2]))?;
            let mut head = ForwardHead { kind: fk, layout, factored: BTreeMap::new(), joint: BTreeMap::new() };
            let mut totals: BTreeMap<Cell, f64> = BTreeMap::new();
            for &(x, k, xn) in &triples {
                let cell = (x[0] as usize, decoder.decode(x), k);
                *totals.entry(cell).or_insert(0.0) += 1.0;
                match fk {
                    ForwardHeadKind::Factored => {
                        let w = head.layout.width();
                        let row = head.factored.entry(cell).or_insert_with(|| vec![0.0; w]);
                        for (j, &v) in xn.iter().enumerate() {
                            row[head.layout.offsets[j] + v as usize] += 1.0;
                        }
                    }
                    ForwardHeadKind::Joint => {
                        let id = head.layout.obs_id(xn);
                        *head.joint.entry(cell).or_default().entry(id).or_insert(0.0) += 1.0;
                    }
                }
            }
            for (cell, row) in head.factored.iter_mut() {
                row.iter_mut().for_each(|c| *c /= totals[cell]);
            }
            for (cell, row) in head.joint.iter_mut() {
                row.values_mut().for_each(|c| *c /= totals[cell]);
            }
            Ok(TabularHead::Forward(head))
        }
        Objective::Contrastive => {
            let TrainingData::Contrastive(pairs) = data else { return Err(mismatch(objective, "non-contrastive data")) };
            let layout = Layout::from_obs(pairs.iter().flat_map(|p| [&p.x.0[..], &p.x_prime.0[..]]))?;
            let mut acc: BTreeMap<(usize, usize, usize, u64), (f64, f64)> = BTreeMap::new();
            for p in pairs {
                let key = (p.x.time(), decoder.decode(&p.x.0), p.k, layout.obs_id(&p.x_prime.0));
                let e = acc.entry(key).or_insert((0.0, 0.0));
                e.0 += 1.0;
                e.1 += p.z as u8 as f64;
            }
            let cells = acc.into_iter().map(|(k, (c, z))| (k, z / c)).collect();
            Ok(TabularHead::Contrastive(ContrastiveHead { layout, cells }))
        }
        Objective::Autoencoder => {
            let TrainingData::Video(v) = data else { return Err(mismatch(objective, "non-video data")) };
            let frames = video_frames(v);
            let layout = Layout::from_obs(frames.iter().copied())?;
            let mut acc: BTreeMap<(usize, usize), (f64, Vec<f64>)> = BTreeMap::new();
            for x in frames {
                let e = acc.entry((x[0] as usize, decoder.decode(x))).or_insert_with(|| (0.0, vec![0.0; layout.width()]));
                e.0 += 1.0;
                for (j, &val) in x.iter().enumerate() {
                    e.1[layout.offsets[j] + val as usize] += 1.0;
                }
            }
            let cells = acc.into_iter().map(|(k, (c, v))| (k, v.into_iter().map(|x| x / c).collect())).collect();
            Ok(TabularHead::Auto(AutoHead { layout, cells }))
        }
        Objective::Acro => {
            let samples = match data {
                TrainingData::Labeled(s) => s,
                TrainingData::Video(_) | TrainingData::Multistep(_) => return Err(Error::MissingActions),
                TrainingData::Contrastive(_) => return Err(mismatch(objective, "contrastive pairs")),
            };
            let layout = Layout::from_obs(samples.iter().flat_map(|p| [&p.x.0[..], &p.x_next.0[..]]))?;
            let na = samples.iter().map(|s| s.action).max().unwrap() + 1;
            let mut cells: BTreeMap<(usize, usize, usize, u64), Vec<f64>> = BTreeMap::new();
            for s in samples {
                let key = (s.x.time(), decoder.decode(&s.x.0), s.k, layout.obs_id(&s.x_next.0));
                cells.entry(key).or_insert_with(|| vec![0.0; na])[s.action] += 1.0;
            }
            for row in cells.values_mut() {
                let c: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= c);
            }
            Ok(TabularHead::Acro(AcroHead { layout, num_actions: na, cells }))
        }
    }
}

/// Empirical loss of `(decoder, head)` recomputed sample by sample.
pub fn empirical_loss(head: &TabularHead, decoder: &Decoder, data: TrainingData<'_>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    match head {
        TabularHead::Forward(h) => {
            let triples = forward_triples(data)?;
            let nll: f64 = triples.iter().map(|&(x, k, xn)| -h.prob(x[0] as usize, decoder.decode(x), k, xn).ln()).sum();
            Ok(nll / triples.len() as f64)
        }
        TabularHead::Contrastive(h) => {
            let TrainingData::Contrastive(pairs) = data else { return Err(mismatch(Objective::Contrastive, "non-contrastive data")) };
            let sse: f64 = pairs
                .iter()
                .map(|p| {
                    let g = h.value(p.x.time(), decoder.decode(&p.x.0), p.k, &p.x_prime.0);
                    let z = p.z as u8 as f64;
                    (z - g) * (z - g)
                })
                .sum();
            Ok(sse / pairs.len() as f64)
        }
        TabularHead::Auto(h) => {
            let TrainingData::Video(v) = data else { return Err(mismatch(Objective::Autoencoder, "non-video data")) };
            let frames = video_frames(v);
            let mut sse = 0.0;
            for x in &frames {
                let rec = h.reconstruction(x[0] as usize, decoder.decode(x));
                for (j, &val) in x.iter().enumerate() {
                    for v in 0..h.layout.radices[j] {
                        let target = (v == val as usize) as u8 as f64;
                        let d = target - rec[h.layout.offsets[j] + v];
                        sse += d * d;
                    }
                }
            }
            Ok(sse / frames.len() as f64)
        }
        TabularHead::Acro(h) => {
            let TrainingData::Labeled(s) = data else { return Err(Error::MissingActions) };
            let nll: f64 = s.iter().map(|m| -h.prob(m.x.time(), decoder.decode(&m.x.0), m.k, &m.x_next.0, m.action).ln()).sum();
            Ok(nll / s.len() as f64)
        }
    }
}

// ── ERM ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnedRepresentation {
    pub objective: Objective,
    pub decoder_index: usize,
    pub decoder: Decoder,
    /// Absent in population-exact mode.
    pub head: Option<TabularHead>,
    pub empirical_loss: f64,
    pub tie: bool,
    /// Loss of every candidate, in class order.
    pub losses: Vec<f64>,
    /// Population forward mode: KL of every candidate.
    pub kls: Option<Vec<f64>>,
}

/// Lowest index among candidates within `TIE_TOL` of the minimum, and whether others share it.
pub fn select(losses: &[f64]) -> (usize, bool) {
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let near: Vec<usize> = (0..losses.len()).filter(|&i| losses[i] <= min + TIE_TOL).collect();
    (near[0], near.len() > 1)
}

/// Decoders sharing a factor set share base keys; grouping lets one pass of
/// sufficient statistics serve every relabelling in the group.
fn groups(class: &DecoderClass) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut map: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, d) in class.decoders.iter().enumerate() {
        map.entry(d.factors.clone()).or_default().push(i);
    }
    map.into_iter().collect()
}

fn run_grouped<S: Sync, F, G>(class: &DecoderClass, stage1: F, stage2: G) -> Vec<f64>
where
    F: Fn(&Decoder) -> S + Sync,
    G: Fn(&S, &Decoder) -> f64 + Sync,
{
    let mut losses = vec![0.0; class.len()];
    for (_, members) in groups(class) {
        let stats = stage1(&class.decoders[members[0]]);
        let vals: Vec<f64> = members.par_iter().map(|&i| stage2(&stats, &class.decoders[i])).collect();
        for (&i, v) in members.iter().zip(vals) {
            losses[i] = v;
        }
    }
    losses
}

fn finish(objective: Objective, class: &DecoderClass, losses: Vec<f64>, data: TrainingData<'_>, fk: ForwardHeadKind) -> Result<LearnedRepresentation> {
    let (idx, tie) = select(&losses);
    let decoder = class.decoders[idx].clone();
    let head = fit_head_with(objective, &decoder, data, fk)?;
    debug_assert!((empirical_loss(&head, &decoder, data)? - losses[idx]).abs() <= 1e-10);
    Ok(LearnedRepresentation { objective, decoder_index: idx, decoder, head: Some(head), empirical_loss: losses[idx], tie, losses, kls: None })
}

fn check_class(class: &DecoderClass) -> Result<()> {
    if class.is_empty() {
        return Err(Error::Empty("decoder class"));
    }
    Ok(())
}

/// Forward-model ERM: minimises `-(1/n) sum ln f(x' | t, phi(x), k)`.
pub fn erm_forward(class: &DecoderClass, data: &[MultistepSample], fk: ForwardHeadKind) -> Result<LearnedRepresentation> {
    check_class(class)?;
    if data.is_empty() {
        return Err(Error::Empty("multistep data"));
    }
    let td = TrainingData::Multistep(data);
    let losses = forward_losses(class, &forward_triples(td)?, fk)?;
    finish(Objective::Forward, class, losses, td, fk)
}

fn forward_losses(class: &DecoderClass, triples: &[(&[u16], usize, &[u16])], fk: ForwardHeadKind) -> Result<Vec<f64>> {
    let layout = Layout::from_obs(triples.iter().flat_map(|t| [t.0, t.2]))?;
    let n = triples.len() as f64;
    let width = layout.width();
    Ok(match fk {
        ForwardHeadKind::Factored => run_grouped(
            class,
            |d| {
                let mut m: BTreeMap<Cell, Vec<u64>> = BTreeMap::new();
                for &(x, k, xn) in triples {
                    let row = m.entry((x[0] as usize, d.base_key(x), k)).or_insert_with(|| vec![0; width]);
                    for (j, &v) in xn.iter().enumerate() {
                        row[layout.offsets[j] + v as usize] += 1;
                    }
                }
                m
            },
            |stats, d| {
                let mut merged: BTreeMap<Cell, Vec<u64>> = BTreeMap::new();
                for (&(t, b, k), row) in stats {
                    let dst = merged.entry((t, d.table[b] as usize, k)).or_insert_with(|| vec![0; width]);
                    dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                let mut s = 0.0;
                for row in merged.values() {
                    let c: u64 = row[layout.offsets[0]..layout.offsets[1]].iter().sum();
                    s += layout.radices.len() as f64 * xlogx(c as f64) - row.iter().map(|&v| xlogx(v as f64)).sum::<f64>();
                }
                s / n
            },
        ),
        ForwardHeadKind::Joint => run_grouped(
            class,
            |d| {
                let mut m: BTreeMap<Cell, BTreeMap<u64, u64>> = BTreeMap::new();
                for &(x, k, xn) in triples {
                    *m.entry((x[0] as usize, d.base_key(x), k)).or_default().entry(layout.obs_id(xn)).or_insert(0) += 1;
                }
                m
            },
            |stats, d| {
                let mut merged: BTreeMap<Cell, BTreeMap<u64, u64>> = BTreeMap::new();
                for (&(t, b, k), row) in stats {
                    let dst = merged.entry((t, d.table[b] as usize, k)).or_default();
                    for (&id, &c) in row {
                        *dst.entry(id).or_insert(0) += c;
                    }
                }
                let mut s = 0.0;
                for row in merged.values() {
                    let c: u64 = row.values().sum();
                    s += xlogx(c as f64) - row.values().map(|&v| xlogx(v as f64)).sum::<f64>();
                }
                s / n
            },
        ),
    })
}

/// Temporal-contrastive ERM: minimises `(1/n) sum (z - g(t, phi(x), k, x'))^2`.
pub fn erm_contrastive(class: &DecoderClass, pairs: &[ContrastivePair]) -> Result<LearnedRepresentation> {
    check_class(class)?;
    if pairs.is_empty() {
        return Err(Error::Empty("contrastive data"));
    }
    let layout = Layout::from_obs(pairs.iter().flat_map(|p| [&p.x.0[..], &p.x_prime.0[..]]))?;
    let n = pairs.len() as f64;
    let ids: Vec<u64> = pairs.iter().map(|p| layout.obs_id(&p.x_prime.0)).collect();
    let losses = run_grouped(
        class,
        |d| {
            let mut m: BTreeMap<(usize, usize, usize, u64), (u64, u64)> = BTreeMap::new();
            for (p, &id) in pairs.iter().zip(&ids) {
                let e = m.entry((p.x.time(), d.base_key(&p.x.0), p.k, id)).or_insert((0, 0));
                e.0 += 1;
                e.1 += p.z as u64;
            }
            m
        },
        |stats, d| {
            let mut merged: BTreeMap<(usize, usize, usize, u64), (u64, u64)> = BTreeMap::new();
            for (&(t, b, k, id), &(c, z)) in stats {
                let e = merged.entry((t, d.table[b] as usize, k, id)).or_insert((0, 0));
                e.0 += c;
                e.1 += z;
            }
            let sse: f64 = merged.values().map(|&(c, z)| z as f64 - (z as f64) * (z as f64) / c as f64).sum();
            sse / n
        },
    );
    finish(Objective::Contrastive, class, losses, TrainingData::Contrastive(pairs), ForwardHeadKind::Factored)
}

/// Autoencoder ERM over frames at steps `< H`: mean squared one-hot reconstruction error.
pub fn erm_autoencoder(class: &DecoderClass, video: &VideoDataset) -> Result<LearnedRepresentation> {
    check_class(class)?;
    if video.is_empty() {
        return Err(Error::Empty("video data"));
    }
    let frames = video_frames(video);
    let layout = Layout::from_obs(frames.iter().copied())?;
    let width = layout.width();
    let n = frames.len() as f64;
    let losses = run_grouped(
        class,
        |d| {
            let mut m: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
            for x in &frames {
                let row = m.entry((x[0] as usize, d.base_key(x))).or_insert_with(|| vec![0; width]);
                for (j, &v) in x.iter().enumerate() {
                    row[layout.offsets[j] + v as usize] += 1;
                }
            }
            m
        },
        |stats, d| {
            let mut merged: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
            for (&(t, b), row) in stats {
                let dst = merged.entry((t, d.table[b] as usize)).or_insert_with(|| vec![0; width]);
                dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            let mut sse = 0.0;
            for row in merged.values() {
                let c: u64 = row[layout.offsets[0]..layout.offsets[1]].iter().sum();
                let c = c as f64;
                for j in 0..layout.radices.len() {
                    let sq: f64 = row[layout.offsets[j]..layout.offsets[j + 1]].iter().map(|&v| (v as f64) * (v as f64)).sum();
                    sse += c - sq / c;
                }
            }
            sse / n
        },
    );
    finish(Objective::Autoencoder, class, losses, TrainingData::Video(video), ForwardHeadKind::Factored)
}

/// ACRO ERM: minimises `-(1/n) sum ln p(a | t, phi(x), k, x')`. Needs action labels.
pub fn erm_acro(class: &DecoderClass, data: TrainingData<'_>) -> Result<LearnedRepresentation> {
    check_class(class)?;
    let samples = match data {
        TrainingData::Labeled(s) => s,
        TrainingData::Video(_) | TrainingData::Multistep(_) => return Err(Error::MissingActions),
        TrainingData::Contrastive(_) => return Err(mismatch(Objective::Acro, "contrastive pairs")),
    };
    if samples.is_empty() {
        return Err(Error::Empty("trajectory data"));
    }
    let layout = Layout::from_obs(samples.iter().flat_map(|p| [&p.x.0[..], &p.x_next.0[..]]))?;
    let na = samples.iter().map(|s| s.action).max().unwrap() + 1;
    let n = samples.len() as f64;
    let ids: Vec<u64> = samples.iter().map(|s| layout.obs_id(&s.x_next.0)).collect();
    let losses = run_grouped(
        class,
        |d| {
            let mut m: BTreeMap<(usize, usize, usize, u64), Vec<u64>> = BTreeMap::new();
            for (s, &id) in samples.iter().zip(&ids) {
                m.entry((s.x.time(), d.base_key(&s.x.0), s.k, id)).or_insert_with(|| vec![0; na])[s.action] += 1;
            }
            m
        },
        |stats, d| {
            let mut merged: BTreeMap<(usize, usize, usize, u64), Vec<u64>> = BTreeMap::new();
            for (&(t, b, k, id), row) in stats {
                let dst = merged.entry((t, d.table[b] as usize, k, id)).or_insert_with(|| vec![0; na]);
                dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            let mut s = 0.0;
            for row in merged.values() {
                let c: u64 = row.iter().sum();
                s += xlogx(c as f64) - row.iter().map(|&v| xlogx(v as f64)).sum::<f64>();
            }
            s / n
        },
    );
    finish(Objective::Acro, class, losses, data, ForwardHeadKind::Factored)
}

/// ERM with losses computed exactly under the data distribution.
pub fn erm_population(class: &DecoderClass, model: &ExactModel<'_>, objective: Objective, opts: &PopulationOptions) -> Result<LearnedRepresentation> {
    check_class(class)?;
    let results: Vec<_> = class
        .decoders
        .par_iter()
        .map(|d| model.population_loss(objective, d, opts))
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = results.iter().map(|r| r.loss).collect();
    let kls = results.iter().map(|r| r.kl).collect::<Option<Vec<f64>>>();
    let (idx, tie) = select(&losses);
    Ok(LearnedRepresentation {
        objective,
        decoder_index: idx,
        decoder: class.decoders[idx].clone(),
        head: None,
        empirical_loss: losses[idx],
        tie,
        losses,
        kls,
    })
}
