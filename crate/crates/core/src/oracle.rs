//! Exact computation of theory quantities by dynamic programming and enumeration.
//!
//! Latent quantities are pooled over steps `t < H` with the time stamp stripped
//! from futures: the conditioning state is the endogenous `s` (or `(s, xi)` in the
//! full view) and futures live on `y' = (s', xi')`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{KMode, NegativeSampling};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::mdp::{exo_marginals, policy_occupancy, Dependence, ExBmdpSpec, LatentPolicy, PolicyMixture};
use crate::replearn::{ForwardHeadKind, Objective};

/// Slack for comparisons that hold exactly in real arithmetic.
pub const EXACT_TOL: f64 = 1e-10;

pub struct ExactModel<'a> {
    pub spec: &'a ExBmdpSpec,
    pub horizon: usize,
    pub lookahead: usize,
    pub ns: usize,
    pub nx: usize,
    pub na: usize,
    /// `occ[t][s]`, `t < H + K`
    pub occ: Vec<Vec<f64>>,
    /// `exo[t][xi]`, `t < H + K`
    pub exo: Vec<Vec<f64>>,
    /// `P(s_t = s, a_t = a, s_{t+k} = s')`, flat over `[k-1][t][s][a][s']`, `t < H`
    pair: Vec<f64>,
    /// `exo_pow[k-1][xi][xi']`
    exo_pow: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LatentView {
    /// Condition on the endogenous state only.
    Endogenous,
    /// Condition on `(s, xi)`.
    Full,
}

impl<'a> ExactModel<'a> {
    pub fn new(spec: &'a ExBmdpSpec, mixture: &PolicyMixture) -> Result<Self> {
        spec.validate()?;
        let comps = mixture.latent_components()?;
        let (h, kk) = (spec.horizon(), spec.lookahead);
        let (ns, na, nx) = (spec.latent.num_states, spec.latent.num_actions, spec.num_exo());
        let len = h + kk;
        let mut occ = vec![vec![0.0; ns]; len];
        let mut pair = vec![0.0; kk * h * ns * na * ns];
        for (w, pol) in comps {
            let po = policy_occupancy(&spec.latent, pol, len);
            for (row, prow) in occ.iter_mut().zip(&po) {
                for (o, q) in row.iter_mut().zip(prow) {
                    *o += w * q;
                }
            }
            accumulate_pairs(spec, pol, &po, w, &mut pair);
        }
        let exo = exo_marginals(spec, len);
        let chain = spec.exo_chain();
        let mut exo_pow = Vec::with_capacity(kk);
        let mut cur: Vec<Vec<f64>> = chain.transition.clone();
        for _ in 0..kk {
            let next = (0..nx)
                .map(|x| {
                    let mut row = vec![0.0; nx];
                    for (m, &p) in cur[x].iter().enumerate() {
                        if p != 0.0 {
                            for (y, &q) in chain.transition[m].iter().enumerate() {
                                row[y] += p * q;
                            }
                        }
                    }
                    row
                })
                .collect();
            exo_pow.push(std::mem::replace(&mut cur, next));
        }
        Ok(ExactModel { spec, horizon: h, lookahead: kk, ns, nx, na, occ, exo, pair, exo_pow })
    }

    fn pair_index(&self, k: usize, t: usize, s: usize, a: usize) -> usize {
        ((((k - 1) * self.horizon + t) * self.ns + s) * self.na + a) * self.ns
    }

    /// `P(s_t = s, a_t = a, s_{t+k} = .)` for `t < H`.
    pub fn pair_row(&self, k: usize, t: usize, s: usize, a: usize) -> &[f64] {
        let i = self.pair_index(k, t, s, a);
        &self.pair[i..i + self.ns]
    }

    /// `P(s_{t+k} = . | s_t = s)`, or `None` when `s` has no mass at `t`.
    pub fn endo_future(&self, t: usize, s: usize, k: usize) -> Option<Vec<f64>> {
        let o = self.occ[t][s];
        if o <= 0.0 {
            return None;
        }
        let mut out = vec![0.0; self.ns];
        for a in 0..self.na {
            for (x, &p) in out.iter_mut().zip(self.pair_row(k, t, s, a)) {
                *x += p / o;
            }
        }
        Some(out)
    }

    pub fn exo_power(&self, k: usize) -> &[Vec<f64>] {
        &self.exo_pow[k - 1]
    }

    pub fn num_latent(&self) -> usize {
        self.ns * self.nx
    }

    /// `P(t, y) = occ[t][s] exo[t][xi] / H` for `t < H`.
    pub fn p_ty(&self, t: usize, y: usize) -> f64 {
        self.occ[t][y / self.nx] * self.exo[t][y % self.nx] / self.horizon as f64
    }

    // ── Occupancy ──────────────────────────────────────────────────────

    pub fn exact_rho(&self) -> LatentRho {
        let h = self.horizon as f64;
        let mut endo = vec![0.0; self.ns];
        let mut joint = vec![0.0; self.num_latent()];
        let mut eta_min = f64::INFINITY;
        for t in 0..self.horizon {
            for y in 0..self.num_latent() {
                let p = self.occ[t][y / self.nx] * self.exo[t][y % self.nx];
                joint[y] += p / h;
                if p > 0.0 {
                    eta_min = eta_min.min(p);
                }
            }
            for s in 0..self.ns {
                endo[s] += self.occ[t][s] / h;
            }
        }
        let rho = LatentRho { endo, joint, eta_min };
        for &r in rho.joint.iter().filter(|&&r| r > 0.0) {
            assert!(r >= rho.eta_min / h - EXACT_TOL, "rho below eta_min / H");
        }
        rho
    }

    /// Observation-level `rho(x) = (1/H) sum_t P(x_t = x)` keyed by observation id (time included).
    pub fn observation_rho(&self, limit: f64) -> Result<BTreeMap<u64, f64>> {
        let space = self.spec.observation_space();
        let per_step = space.size() / space.radices[0] as f64;
        if per_step * self.num_latent() as f64 * self.horizon as f64 > limit {
            return Err(Error::TooLarge { what: "observation rho", size: per_step * self.horizon as f64, limit });
        }
        let mut out = BTreeMap::new();
        for t in 0..self.horizon {
            for y in 0..self.num_latent() {
                let w = self.p_ty(t, y);
                if w == 0.0 {
                    continue;
                }
                for (obs, q) in emission_support(self.spec, y / self.nx, y % self.nx, t) {
                    *out.entry(space.encode(&obs)).or_insert(0.0) += w * q;
                }
            }
        }
        Ok(out)
    }

    // ── Kernels and Bayes classifiers ──────────────────────────────────

    /// Conditioning states of a view, `rho` over futures, and `D_k(y' | c)` rows
    /// (`None` for conditioning states without mass).
    pub fn forward_kernel(&self, k: usize, view: LatentView) -> Vec<Option<Vec<f64>>> {
        assert!(k >= 1 && k <= self.lookahead, "k out of range");
        let ny = self.num_latent();
        let nc = match view {
            LatentView::Endogenous => self.ns,
            LatentView::Full => ny,
        };
        let pow = self.exo_power(k);
        (0..nc)
            .map(|c| {
                let mut row = vec![0.0; ny];
                let mut mass = 0.0;
                for t in 0..self.horizon {
                    let (s, xis): (usize, Vec<(usize, f64)>) = match view {
                        LatentView::Endogenous => (c, vec![]),
                        LatentView::Full => (c / self.nx, vec![(c % self.nx, self.exo[t][c % self.nx])]),
                    };
                    let o = self.occ[t][s];
                    let wt = match view {
                        LatentView::Endogenous => o,
                        LatentView::Full => o * xis[0].1,
                    };
                    if wt <= 0.0 {
                        continue;
                    }
                    mass += wt;
                    let fut: Vec<f64> = (0..self.ns)
                        .map(|s2| (0..self.na).map(|a| self.pair_row(k, t, s, a)[s2]).sum::<f64>())
                        .collect();
                    for s2 in 0..self.ns {
                        if fut[s2] == 0.0 {
                            continue;
                        }
                        for x2 in 0..self.nx {
                            let pxi = match view {
                                LatentView::Endogenous => self.exo[t + k][x2],
                                LatentView::Full => xis[0].1 * pow[xis[0].0][x2],
                            };
                            row[s2 * self.nx + x2] += fut[s2] * pxi;
                        }
                    }
                }
                (mass > 0.0).then(|| row.into_iter().map(|v| v / mass).collect())
            })
            .collect()
    }

    /// `g*(c, k, y') = D_k(y'|c) / (D_k(y'|c) + rho(y'))`, zero where both vanish.
    pub fn bayes_contrastive(&self, k_mode: KMode, view: LatentView) -> ContrastiveTable {
        let rho = self.exact_rho().joint;
        let ks: Vec<usize> = k_mode.support().collect();
        let g = ks
            .iter()
            .map(|&k| {
                self.forward_kernel(k, view)
                    .into_iter()
                    .map(|row| {
                        row.map(|r| {
                            r.iter()
                                .zip(&rho)
                                .map(|(&d, &p)| if d + p > 0.0 { d / (d + p) } else { 0.0 })
                                .collect()
                        })
                    })
                    .collect()
            })
            .collect();
        ContrastiveTable { view, ks, g, rho }
    }

    // ── Margins ────────────────────────────────────────────────────────

    pub fn margins(&self) -> MarginReport {
        let rho = self.exact_rho();
        let states: Vec<usize> = (0..self.ns).filter(|&s| rho.endo[s] > 0.0).collect();
        let kk = self.lookahead;
        let kernels: Vec<Vec<Option<Vec<f64>>>> =
            (1..=kk).map(|k| self.forward_kernel(k, LatentView::Endogenous)).collect();
        let mut coverage_gap = false;
        for rows in &kernels {
            for &s in &states {
                let row = rows[s].as_ref().expect("state with rho mass has a kernel row");
                if row.iter().zip(&rho.joint).any(|(&d, &r)| d > 0.0 && r == 0.0) {
                    coverage_gap = true;
                }
            }
        }
        let g = |k: usize, s: usize, y: usize| -> f64 {
            let d = kernels[k - 1][s].as_ref().unwrap()[y];
            let r = rho.joint[y];
            if d + r > 0.0 {
                d / (d + r)
            } else {
                0.0
            }
        };
        let mut pairs = Vec::new();
        for (i, &a) in states.iter().enumerate() {
            for &b in &states[i + 1..] {
                pairs.push((a, b));
            }
        }
        let mut report = MarginReport {
            beta_for_fixed: vec![f64::NAN; kk],
            beta_for_unf: f64::NAN,
            beta_temp_fixed: vec![f64::NAN; kk],
            beta_temp_unf: f64::NAN,
            eta_min: if coverage_gap { 0.0 } else { rho.eta_min },
            coverage_gap,
            horizon: self.horizon,
            lookahead: kk,
            states: states.clone(),
            argmin_for: vec![None; kk],
            argmin_temp: vec![None; kk],
        };
        if pairs.is_empty() {
            return report;
        }
        let ny = self.num_latent();
        let mut for_unf = f64::INFINITY;
        let mut temp_unf = f64::INFINITY;
        let mut for_k = vec![f64::INFINITY; kk];
        let mut temp_k = vec![f64::INFINITY; kk];
        for &(a, b) in &pairs {
            let (mut fs, mut ts) = (0.0, 0.0);
            for k in 1..=kk {
                let ra = kernels[k - 1][a].as_ref().unwrap();
                let rb = kernels[k - 1][b].as_ref().unwrap();
                let tv = 0.5 * ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>();
                let temp = 0.5 * (0..ny).map(|y| rho.joint[y] * (g(k, a, y) - g(k, b, y)).abs()).sum::<f64>();
                if tv < for_k[k - 1] {
                    for_k[k - 1] = tv;
                    report.argmin_for[k - 1] = Some((a, b));
                }
                if temp < temp_k[k - 1] {
                    temp_k[k - 1] = temp;
                    report.argmin_temp[k - 1] = Some((a, b));
                }
                fs += tv / kk as f64;
                ts += temp / kk as f64;
            }
            for_unf = for_unf.min(fs);
            temp_unf = temp_unf.min(ts);
        }
        report.beta_for_fixed = for_k;
        report.beta_temp_fixed = temp_k;
        report.beta_for_unf = for_unf;
        report.beta_temp_unf = temp_unf;
        report
    }

    /// Observation-level forward TV between two endogenous states, by enumerating
    /// the lifted (untimed) conditionals. Cross-checks the latent computation.
    pub fn lifted_forward_tv(&self, s1: usize, s2: usize, k: usize, limit: f64) -> Result<f64> {
        let space = self.spec.observation_space();
        let untimed = space.size() / space.radices[0] as f64;
        if untimed * self.num_latent() as f64 > limit {
            return Err(Error::TooLarge { what: "lifted kernel", size: untimed, limit });
        }
        let kernel = self.forward_kernel(k, LatentView::Endogenous);
        let lift = |s: usize| -> Result<BTreeMap<u64, f64>> {
            let row = kernel[s].as_ref().ok_or_else(|| Error::InvalidParameter(format!("state {s} has no mass")))?;
            let mut out = BTreeMap::new();
            for (y, &p) in row.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (obs, q) in emission_support(self.spec, y / self.nx, y % self.nx, 0) {
                    *out.entry(space.encode_untimed(&obs)).or_insert(0.0) += p * q;
                }
            }
            Ok(out)
        };
        Ok(tv_maps(&lift(s1)?, &lift(s2)?))
    }

    // ── Decoder statistics ─────────────────────────────────────────────

    /// `P(u | y, t)` for `t < H`, indexed `[t][y]`.
    pub fn decoder_conditionals(&self, decoder: &Decoder) -> Vec<Vec<Vec<(usize, f64)>>> {
        (0..self.horizon)
            .map(|t| {
                (0..self.num_latent())
                    .map(|y| decoder.latent_conditional(self.spec, y / self.nx, y % self.nx, t))
                    .collect()
            })
            .collect()
    }

    /// Joint `P(j, s)` of decoder output and endogenous state under `rho`; `[j][s]`.
    pub fn decoder_state_joint(&self, decoder: &Decoder) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ns]; decoder.n_out];
        let cond = self.decoder_conditionals(decoder);
        for (t, per_y) in cond.iter().enumerate() {
            for (y, c) in per_y.iter().enumerate() {
                let w = self.p_ty(t, y);
                if w == 0.0 {
                    continue;
                }
                for &(u, p) in c {
                    out[u][y / self.nx] += w * p;
                }
            }
        }
        out
    }

    /// Both sides of the coupling inequality
    /// `E[1{merge} Gamma(x1, x2)] >= beta_for * P(merge and different states)`.
    pub fn coupling_check(&self, decoder: &Decoder, k: usize) -> CouplingCheck {
        let joint = self.decoder_state_joint(decoder);
        let kernel = self.forward_kernel(k, LatentView::Endogenous);
        let tv = |a: usize, b: usize| -> f64 {
            match (&kernel[a], &kernel[b]) {
                (Some(x), Some(y)) => 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>(),
                _ => 0.0,
            }
        };
        let mut lhs = 0.0;
        let mut merge_error = 0.0;
        for row in &joint {
            for a in 0..self.ns {
                for b in 0..self.ns {
                    let m = row[a] * row[b];
                    lhs += m * tv(a, b);
                    if a != b {
                        merge_error += m;
                    }
                }
            }
        }
        let beta = self.margins().beta_for_fixed[k - 1];
        let beta = if beta.is_nan() { 0.0 } else { beta };
        CouplingCheck { lhs, beta_for: beta, merge_error, holds: lhs + EXACT_TOL >= beta * merge_error }
    }

    // ── Population losses ──────────────────────────────────────────────

    /// Exact expected loss of the objective under the data distribution with the
    /// Bayes-optimal head for `decoder`. Heads condition on `(t, u, k)`.
    pub fn population_loss(&self, objective: Objective, decoder: &Decoder, opts: &PopulationOptions) -> Result<PopulationLoss> {
        if opts.k_mode.max_k() > self.lookahead {
            return Err(Error::LookaheadExceeded { requested: opts.k_mode.max_k(), available: self.lookahead });
        }
        let cond = self.decoder_conditionals(decoder);
        Ok(match objective {
            Objective::Forward => match opts.forward_head {
                ForwardHeadKind::Factored => self.forward_factored(decoder.n_out, &cond, opts.k_mode),
                ForwardHeadKind::Joint => self.forward_joint(decoder.n_out, &cond, opts.k_mode),
            },
            Objective::Contrastive => {
                PopulationLoss { loss: self.contrastive(decoder.n_out, &cond, opts.k_mode, opts.negatives), kl: None }
            }
            Objective::Autoencoder => PopulationLoss { loss: self.autoencoder(decoder), kl: None },
            Objective::Acro => PopulationLoss { loss: self.acro(decoder.n_out, &cond, opts.k_mode), kl: None },
        })
    }

    fn k_weights(&self, k_mode: KMode) -> Vec<(usize, f64)> {
        k_mode.support().map(|k| (k, k_mode.weight(k))).collect()
    }

    /// `P(y' | y, t, k)` as a sparse list.
    fn latent_future(&self, t: usize, y: usize, k: usize) -> Vec<(usize, f64)> {
        let (s, xi) = (y / self.nx, y % self.nx);
        let Some(fs) = self.endo_future(t, s, k) else { return vec![] };
        let pow = &self.exo_power(k)[xi];
        let mut out = Vec::new();
        for (s2, &p) in fs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (x2, &q) in pow.iter().enumerate() {
                if q != 0.0 {
                    out.push((s2 * self.nx + x2, p * q));
                }
            }
        }
        out
    }

    /// Per-factor emission entropies summed over non-time factors, per latent.
    fn emission_entropy(&self) -> Vec<f64> {
        (0..self.num_latent())
            .map(|y| {
                self.spec.emission.factors[1..]
                    .iter()
                    .map(|f| entropy(f.dist(y / self.nx, y % self.nx, 0).support().iter().map(|p| p.1)))
                    .sum()
            })
            .collect()
    }

    fn forward_factored(&self, n: usize, cond: &[Vec<Vec<(usize, f64)>>], k_mode: KMode) -> PopulationLoss {
        let factors = &self.spec.emission.factors;
        let mut offsets = vec![0usize];
        for f in factors {
            offsets.push(offsets.last().unwrap() + f.cardinality);
        }
        let width = *offsets.last().unwrap();
        let kw = self.k_weights(k_mode);
        let kk = self.lookahead;
        let h = self.horizon;
        let mut acc = vec![0.0; h * n * kk * width];
        let hq = self.emission_entropy();
        let mut cond_entropy = 0.0;
        let mut m = vec![0.0; width];
        for t in 0..h {
            for y in 0..self.num_latent() {
                let w = self.p_ty(t, y);
                if w == 0.0 {
                    continue;
                }
                let (s, xi) = (y / self.nx, y % self.nx);
                for &(k, wk) in &kw {
                    let fut_s = self.endo_future(t, s, k).expect("mass");
                    let fut_x = &self.exo_power(k)[xi];
                    m.iter_mut().for_each(|v| *v = 0.0);
                    for (j, f) in factors.iter().enumerate() {
                        let slot = &mut m[offsets[j]..offsets[j + 1]];
                        match f.dependence() {
                            Dependence::Time => slot[t + k] = 1.0,
                            Dependence::Endo => {
                                for (s2, &p) in fut_s.iter().enumerate().filter(|e| *e.1 > 0.0) {
                                    for (v, q) in f.dist(s2, 0, 0).support() {
                                        slot[v] += p * q;
                                    }
                                }
                            }
                            Dependence::Exo => {
                                for (x2, &p) in fut_x.iter().enumerate().filter(|e| *e.1 > 0.0) {
                                    for (v, q) in f.dist(0, x2, 0).support() {
                                        slot[v] += p * q;
                                    }
                                }
                            }
                            Dependence::Independent => {
                                for (v, q) in f.dist(0, 0, 0).support() {
                                    slot[v] += q;
                                }
                            }
                        }
                    }
                    let fut = self.latent_future(t, y, k);
                    let h_y = entropy(fut.iter().map(|e| e.1));
                    let h_q: f64 = fut.iter().map(|&(y2, p)| p * hq[y2]).sum();
                    cond_entropy += wk * w * (h_y + h_q);
                    for &(u, pu) in &cond[t][y] {
                        let base = ((t * n + u) * kk + (k - 1)) * width;
                        let scale = wk * w * pu;
                        for (a, &v) in acc[base..base + width].iter_mut().zip(&m) {
                            *a += scale * v;
                        }
                    }
                }
            }
        }
        let mut ce = 0.0;
        for cell in acc.chunks(width) {
            let total: f64 = cell[offsets[0]..offsets[1]].iter().sum();
            if total <= 0.0 {
                continue;
            }
            for &a in cell.iter().filter(|&&a| a > 0.0) {
                ce -= a * (a / total).ln();
            }
        }
        PopulationLoss { loss: ce, kl: Some(ce - cond_entropy) }
    }

    fn forward_joint(&self, n: usize, cond: &[Vec<Vec<(usize, f64)>>], k_mode: KMode) -> PopulationLoss {
        let ny = self.num_latent();
        let kk = self.lookahead;
        let kw = self.k_weights(k_mode);
        let hq = self.emission_entropy();
        let mut acc = vec![0.0; self.horizon * n * kk * ny];
        let mut cond_entropy = 0.0;
        let mut noise = 0.0;
        for t in 0..self.horizon {
            for y in 0..ny {
                let w = self.p_ty(t, y);
                if w == 0.0 {
                    continue;
                }
                for &(k, wk) in &kw {
                    let fut = self.latent_future(t, y, k);
                    cond_entropy += wk * w * entropy(fut.iter().map(|e| e.1));
                    noise += wk * w * fut.iter().map(|&(y2, p)| p * hq[y2]).sum::<f64>();
                    for &(u, pu) in &cond[t][y] {
                        let base = ((t * n + u) * kk + (k - 1)) * ny;
                        for &(y2, p) in &fut {
                            acc[base + y2] += wk * w * pu * p;
                        }
                    }
                }
            }
        }
        let mut ce = 0.0;
        for cell in acc.chunks(ny) {
            let total: f64 = cell.iter().sum();
            for &a in cell.iter().filter(|&&a| a > 0.0) {
                ce -= a * (a / total).ln();
            }
        }
        PopulationLoss { loss: ce + noise, kl: Some(ce - cond_entropy) }
    }

    fn contrastive(&self, n: usize, cond: &[Vec<Vec<(usize, f64)>>], k_mode: KMode, neg: NegativeSampling) -> f64 {
        let ny = self.num_latent();
        let h = self.horizon;
        let len = h + self.lookahead;
        let kw = self.k_weights(k_mode);
        // negative marginal over (t', y')
        let mut negm = vec![0.0; len * ny];
        let latent_at = |t: usize, y: usize| self.occ[t][y / self.nx] * self.exo[t][y % self.nx];
        match neg {
            NegativeSampling::PartnerFirst | NegativeSampling::FreshRho => {
                for t in 0..h {
                    for y in 0..ny {
                        negm[t * ny + y] = latent_at(t, y) / h as f64;
                    }
                }
            }
            NegativeSampling::PartnerNext => {
                for t in 0..h {
                    for &(k, wk) in &kw {
                        for y in 0..ny {
                            negm[(t + k) * ny + y] += wk * latent_at(t + k, y) / h as f64;
                        }
                    }
                }
            }
        }
        let mut p_tu = vec![0.0; h * n];
        let mut pos = vec![0.0; h * n * self.lookahead * ny];
        for t in 0..h {
            for y in 0..ny {
                let w = self.p_ty(t, y);
                if w == 0.0 {
                    continue;
                }
                for &(u, pu) in &cond[t][y] {
                    p_tu[t * n + u] += w * pu;
                }
                for &(k, wk) in &kw {
                    let fut = self.latent_future(t, y, k);
                    for &(u, pu) in &cond[t][y] {
                        let base = ((t * n + u) * self.lookahead + (k - 1)) * ny;
                        for &(y2, p) in &fut {
                            pos[base + y2] += 0.5 * wk * w * pu * p;
                        }
                    }
                }
            }
        }
        let mut loss = 0.0;
        for t in 0..h {
            for u in 0..n {
                if p_tu[t * n + u] == 0.0 {
                    continue;
                }
                for &(k, wk) in &kw {
                    let base = ((t * n + u) * self.lookahead + (k - 1)) * ny;
                    for y2 in 0..ny {
                        let p1 = pos[base + y2];
                        let p0 = 0.5 * wk * p_tu[t * n + u] * negm[(t + k) * ny + y2];
                        if p1 > 0.0 && p0 > 0.0 {
                            loss += p1 * p0 / (p1 + p0);
                        }
                    }
                }
            }
        }
        loss
    }

    fn autoencoder(&self, decoder: &Decoder) -> f64 {
        let factors = &self.spec.emission.factors;
        let n = decoder.n_out;
        let mut offsets = vec![0usize];
        for f in factors {
            offsets.push(offsets.last().unwrap() + f.cardinality);
        }
        let width = *offsets.last().unwrap();
        let mut acc = vec![0.0; self.horizon * n * width];
        let mut p_tu = vec![0.0; self.horizon * n];
        for t in 0..self.horizon {
            for y in 0..self.num_latent() {
                let w = self.p_ty(t, y);
                if w == 0.0 {
                    continue;
                }
                let (s, xi) = (y / self.nx, y % self.nx);
                for (b, pb) in decoder.base_conditional(self.spec, s, xi, t) {
                    let u = decoder.table[b] as usize;
                    let mass = w * pb;
                    p_tu[t * n + u] += mass;
                    let cell = &mut acc[(t * n + u) * width..(t * n + u + 1) * width];
                    // digits of the base key, last factor fastest
                    let mut rest = b;
                    let mut digits = vec![0usize; decoder.factors.len()];
                    for (d, &r) in digits.iter_mut().zip(&decoder.radices).rev() {
                        *d = rest % r;
                        rest /= r;
                    }
                    for (j, f) in factors.iter().enumerate() {
                        if let Some(pos) = decoder.factors.iter().position(|&g| g == j) {
                            cell[offsets[j] + digits[pos]] += mass;
                        } else {
                            for (v, q) in f.dist(s, xi, t).support() {
                                cell[offsets[j] + v] += mass * q;
                            }
                        }
                    }
                }
            }
        }
        let mut loss = 0.0;
        for (i, cell) in acc.chunks(width).enumerate() {
            let c = p_tu[i];
            if c <= 0.0 {
                continue;
            }
            for j in 0..factors.len() {
                let sq: f64 = cell[offsets[j]..offsets[j + 1]].iter().map(|a| a * a).sum();
                loss += c - sq / c;
            }
        }
        loss
    }

    fn acro(&self, n: usize, cond: &[Vec<Vec<(usize, f64)>>], k_mode: KMode) -> f64 {
        let ny = self.num_latent();
        let (na, kk) = (self.na, self.lookahead);
        let kw = self.k_weights(k_mode);
        let mut acc = vec![0.0; self.horizon * n * kk * ny * na];
        for t in 0..self.horizon {
            for y in 0..ny {
                let w = self.p_ty(t, y);
                if w == 0.0 {
                    continue;
                }
                let (s, xi) = (y / self.nx, y % self.nx);
                let o = self.occ[t][s];
                for &(k, wk) in &kw {
                    let pow = &self.exo_power(k)[xi];
                    for a in 0..na {
                        let row = self.pair_row(k, t, s, a);
                        for (s2, &p) in row.iter().enumerate() {
                            if p == 0.0 {
                                continue;
                            }
                            for (x2, &q) in pow.iter().enumerate() {
                                if q == 0.0 {
                                    continue;
                                }
                                let y2 = s2 * self.nx + x2;
                                let mass = wk * w * (p / o) * q;
                                for &(u, pu) in &cond[t][y] {
                                    acc[(((t * n + u) * kk + (k - 1)) * ny + y2) * na + a] += mass * pu;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut loss = 0.0;
        for cell in acc.chunks(na) {
            let total: f64 = cell.iter().sum();
            for &a in cell.iter().filter(|&&a| a > 0.0) {
                loss -= a * (a / total).ln();
            }
        }
        loss
    }
}

fn accumulate_pairs(spec: &ExBmdpSpec, pol: &LatentPolicy, occ: &[Vec<f64>], w: f64, pair: &mut [f64]) {
    let (h, kk) = (spec.horizon(), spec.lookahead);
    let (ns, na) = (spec.latent.num_states, spec.latent.num_actions);
    let tr = &spec.latent.transition;
    for t in 0..h {
        for s in 0..ns {
            if occ[t][s] == 0.0 {
                continue;
            }
            for a in 0..na {
                let mass = w * occ[t][s] * pol.action_probs(t, s)[a];
                if mass == 0.0 {
                    continue;
                }
                let mut cur = tr[s][a].clone();
                for k in 1..=kk {
                    let base = ((((k - 1) * h + t) * ns + s) * na + a) * ns;
                    for (slot, &p) in pair[base..base + ns].iter_mut().zip(&cur) {
                        *slot += mass * p;
                    }
                    if k < kk {
                        let mut next = vec![0.0; ns];
                        for (s1, &p) in cur.iter().enumerate() {
                            if p == 0.0 {
                                continue;
                            }
                            for (b, &pb) in pol.action_probs(t + k, s1).iter().enumerate() {
                                for (s2, &q) in tr[s1][b].iter().enumerate() {
                                    next[s2] += p * pb * q;
                                }
                            }
                        }
                        cur = next;
                    }
                }
            }
        }
    }
}

/// Full observations (time stamp `t`) emitted by `(s, xi)` with their probabilities.
pub fn emission_support(spec: &ExBmdpSpec, s: usize, xi: usize, t: usize) -> Vec<(Vec<u16>, f64)> {
    let mut out: Vec<(Vec<u16>, f64)> = vec![(Vec::with_capacity(spec.num_factors()), 1.0)];
    for f in &spec.emission.factors {
        let sup = f.dist(s, xi, t).support();
        let mut next = Vec::with_capacity(out.len() * sup.len());
        for (obs, p) in &out {
            for &(v, q) in &sup {
                let mut o = obs.clone();
                o.push(v as u16);
                next.push((o, p * q));
            }
        }
        out = next;
    }
    out
}

pub fn entropy(ps: impl Iterator<Item = f64>) -> f64 {
    ps.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

pub fn tv_maps<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> f64 {
    let mut s = 0.0;
    for (k, &p) in a {
        s += (p - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, &q) in b {
        if !a.contains_key(k) {
            s += q;
        }
    }
    0.5 * s
}

// ── Reports ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentRho {
    pub endo: Vec<f64>,
    /// Over `y = s * |Xi| + xi`.
    pub joint: Vec<f64>,
    /// Smallest positive `P(y_t = y)` over `t < H`.
    pub eta_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastiveTable {
    pub view: LatentView,
    pub ks: Vec<usize>,
    /// `g[k index][conditioning state][y']`
    pub g: Vec<Vec<Option<Vec<f64>>>>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub beta_for_fixed: Vec<f64>,
    pub beta_for_unf: f64,
    pub beta_temp_fixed: Vec<f64>,
    pub beta_temp_unf: f64,
    pub eta_min: f64,
    pub coverage_gap: bool,
    pub horizon: usize,
    pub lookahead: usize,
    /// Endogenous states with positive mass under `rho`.
    pub states: Vec<usize>,
    pub argmin_for: Vec<Option<(usize, usize)>>,
    pub argmin_temp: Vec<Option<(usize, usize)>>,
}

impl MarginReport {
    pub fn has_pairs(&self) -> bool {
        self.states.len() >= 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginCheck {
    pub no_pairs: bool,
    pub violations: Vec<String>,
}

impl MarginCheck {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `(eta^2/4H^2) beta_for <= beta_temp <= beta_for` per k and for uniform k,
/// and `beta^(k) / K <= beta^(u)` for both margins.
pub fn check_margin_relations(r: &MarginReport) -> MarginCheck {
    let mut violations = Vec::new();
    if !r.has_pairs() {
        return MarginCheck { no_pairs: true, violations };
    }
    let c = r.eta_min * r.eta_min / (4.0 * (r.horizon * r.horizon) as f64);
    let kk = r.lookahead as f64;
    let mut chk = |ok: bool, what: String| {
        if !ok {
            violations.push(what);
        }
    };
    for k in 0..r.lookahead {
        let (f, t) = (r.beta_for_fixed[k], r.beta_temp_fixed[k]);
        chk(c * f <= t + EXACT_TOL, format!("k={}: lower bound {} > beta_temp {t} (pair {:?})", k + 1, c * f, r.argmin_temp[k]));
        chk(t <= f + EXACT_TOL, format!("k={}: beta_temp {t} > beta_for {f} (pair {:?})", k + 1, r.argmin_for[k]));
        chk(f / kk <= r.beta_for_unf + EXACT_TOL, format!("k={}: beta_for/K {} > beta_for_unf {}", k + 1, f / kk, r.beta_for_unf));
        chk(t / kk <= r.beta_temp_unf + EXACT_TOL, format!("k={}: beta_temp/K {} > beta_temp_unf {}", k + 1, t / kk, r.beta_temp_unf));
    }
    chk(c * r.beta_for_unf <= r.beta_temp_unf + EXACT_TOL, "uniform: lower bound violated".into());
    chk(r.beta_temp_unf <= r.beta_for_unf + EXACT_TOL, "uniform: beta_temp > beta_for".into());
    for v in r.beta_for_fixed.iter().chain(&r.beta_temp_fixed).chain([&r.beta_for_unf, &r.beta_temp_unf]) {
        chk((-EXACT_TOL..=1.0 + EXACT_TOL).contains(v), format!("margin {v} outside [0, 1]"));
    }
    MarginCheck { no_pairs: false, violations }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingCheck {
    pub lhs: f64,
    pub beta_for: f64,
    pub merge_error: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationOptions {
    pub k_mode: KMode,
    pub negatives: NegativeSampling,
    pub forward_head: ForwardHeadKind,
}

impl Default for PopulationOptions {
    fn default() -> Self {
        PopulationOptions { k_mode: KMode::Fixed(1), negatives: NegativeSampling::PartnerFirst, forward_head: ForwardHeadKind::Factored }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationLoss {
    pub loss: f64,
    /// Forward objective only: KL from the true conditional to the head.
    pub kl: Option<f64>,
}

// ── Video distributions ────────────────────────────────────────────────

pub const VIDEO_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoDistribution {
    /// Sequence of per-step observation ids -> probability.
    pub probs: BTreeMap<Vec<u64>, f64>,
}

impl VideoDistribution {
    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    pub fn tv(&self, other: &VideoDistribution) -> f64 {
        tv_maps(&self.probs, &other.probs)
    }
}

/// Exact joint law of observation sequences of length `len` (default `H + K`),
/// by depth-first enumeration with a per-policy forward filter over `(s, xi)`.
pub fn exact_video_distribution(spec: &ExBmdpSpec, mixture: &PolicyMixture, len: Option<usize>) -> Result<VideoDistribution> {
    spec.validate()?;
    let comps = mixture.latent_components()?;
    let len = len.unwrap_or(spec.episode_len()).min(spec.episode_len());
    let space = spec.observation_space();
    let per_step = space.size() / space.radices[0] as f64;
    let size = per_step.powi(len as i32);
    if size > VIDEO_LIMIT {
        return Err(Error::TooLarge { what: "video distribution", size, limit: VIDEO_LIMIT });
    }
    let (ns, nx) = (spec.latent.num_states, spec.num_exo());
    let exo = spec.exo_chain();
    let alphas: Vec<Vec<f64>> = comps
        .iter()
        .map(|(w, _)| {
            let mut a = vec![0.0; ns * nx];
            for s in 0..ns {
                for x in 0..nx {
                    a[s * nx + x] = w * spec.latent.start[s] * exo.start[x];
                }
            }
            a
        })
        .collect();
    let mut out = BTreeMap::new();
    let mut prefix = Vec::with_capacity(len);
    video_dfs(spec, &comps, &space, &exo.transition, alphas, 0, len, &mut prefix, &mut out);
    Ok(VideoDistribution { probs: out })
}

#[allow(clippy::too_many_arguments)]
fn video_dfs(
    spec: &ExBmdpSpec,
    comps: &[(f64, &LatentPolicy)],
    space: &crate::mdp::ObservationSpace,
    exo_t: &[Vec<f64>],
    alphas: Vec<Vec<f64>>,
    t: usize,
    len: usize,
    prefix: &mut Vec<u64>,
    out: &mut BTreeMap<Vec<u64>, f64>,
) {
    let total: f64 = alphas.iter().flatten().sum();
    if total <= 0.0 {
        return;
    }
    if t == len {
        out.insert(prefix.clone(), total);
        return;
    }
    let (ns, nx, na) = (spec.latent.num_states, spec.num_exo(), spec.latent.num_actions);
    let live: Vec<usize> = (0..ns * nx).filter(|&y| alphas.iter().any(|a| a[y] > 0.0)).collect();
    // observations with positive probability under some live latent
    let mut candidates: BTreeMap<u64, Vec<(usize, f64)>> = BTreeMap::new();
    for &y in &live {
        for (obs, q) in emission_support(spec, y / nx, y % nx, t) {
            candidates.entry(space.encode(&obs)).or_default().push((y, q));
        }
    }
    for (id, lik) in candidates {
        let filtered: Vec<Vec<f64>> = alphas
            .iter()
            .map(|a| {
                let mut f = vec![0.0; ns * nx];
                for &(y, q) in &lik {
                    f[y] = a[y] * q;
                }
                f
            })
            .collect();
        let next: Vec<Vec<f64>> = if t + 1 == len {
            filtered
        } else {
            filtered
                .iter()
                .zip(comps)
                .map(|(f, (_, pol))| {
                    let mut n = vec![0.0; ns * nx];
                    for (y, &m) in f.iter().enumerate() {
                        if m == 0.0 {
                            continue;
                        }
                        let (s, x) = (y / nx, y % nx);
                        for a in 0..na {
                            let pa = pol.action_probs(t, s)[a];
                            if pa == 0.0 {
                                continue;
                            }
                            for (s2, &p) in spec.latent.transition[s][a].iter().enumerate() {
                                if p == 0.0 {
                                    continue;
                                }
                                for (x2, &q) in exo_t[x].iter().enumerate() {
                                    n[s2 * nx + x2] += m * pa * p * q;
                                }
                            }
                        }
                    }
                    n
                })
                .collect()
        };
        prefix.push(id);
        video_dfs(spec, comps, space, exo_t, next, t + 1, len, prefix, out);
        prefix.pop();
    }
}

// ── Lower bound ────────────────────────────────────────────────────────

pub const BRUTE_LIMIT: f64 = (1u64 << 24) as f64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub d: usize,
    pub p: f64,
    pub num_cells: usize,
    pub decoders: u64,
    /// `min over decoders of max over i` of suboptimality.
    pub min_max_suboptimality: f64,
    pub bound: f64,
    pub argmin_decoder: Vec<u32>,
    pub exceeds_bound: bool,
}

/// Enumerates every step-1 decoder `{0,1}^d -> [L]`. Only step-1 decoders matter:
/// reward `s2 = 1(s1 = a)` is paid at step 2 and fixed by the step-1 action.
/// Value through a decoder on `M_i` is `sum over cells of max_a P(x1 in cell, s1_i = a)`
/// with `x1` uniform, so the optimum is 1 and suboptimality is one minus that sum.
pub fn lower_bound_bruteforce(d: usize, p: f64, num_cells: usize) -> Result<LowerBoundReport> {
    if d == 0 || d > 5 {
        return Err(Error::InvalidParameter(format!("d = {d} must be in [1, 5]")));
    }
    if num_cells < 2 {
        return Err(Error::InvalidParameter("L must be at least 2".into()));
    }
    let nobs = 1usize << d;
    let count = (num_cells as f64).powi(nobs as i32);
    if count > BRUTE_LIMIT {
        return Err(Error::TooLarge { what: "decoder enumeration", size: count, limit: BRUTE_LIMIT });
    }
    let total = count as u64;
    let chunk = 4096u64;
    let nchunks = total.div_ceil(chunk);
    let best = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let mut best = (f64::INFINITY, 0u64);
            let mut labels = vec![0usize; nobs];
            let mut cnt = vec![0u32; num_cells * d * 2];
            for idx in c * chunk..((c + 1) * chunk).min(total) {
                let mut rest = idx;
                for l in labels.iter_mut() {
                    *l = (rest % num_cells as u64) as usize;
                    rest /= num_cells as u64;
                }
                cnt.iter_mut().for_each(|v| *v = 0);
                for (x, &cell) in labels.iter().enumerate() {
                    for i in 0..d {
                        cnt[(cell * d + i) * 2 + ((x >> i) & 1)] += 1;
                    }
                }
                let mut worst = 0.0f64;
                for i in 0..d {
                    let hit: u32 = (0..num_cells).map(|cell| cnt[(cell * d + i) * 2].max(cnt[(cell * d + i) * 2 + 1])).sum();
                    worst = worst.max(1.0 - hit as f64 / nobs as f64);
                }
                if worst < best.0 {
                    best = (worst, idx);
                }
            }
            best
        })
        .reduce(|| (f64::INFINITY, 0), |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a });
    let mut rest = best.1;
    let argmin: Vec<u32> = (0..nobs)
        .map(|_| {
            let l = (rest % num_cells as u64) as u32;
            rest /= num_cells as u64;
            l
        })
        .collect();
    let bound = (nobs as f64 - num_cells as f64) / (2.0 * d as f64 * nobs as f64);
    Ok(LowerBoundReport {
        d,
        p,
        num_cells,
        decoders: total,
        min_max_suboptimality: best.0,
        bound,
        argmin_decoder: argmin,
        exceeds_bound: best.0 > bound,
    })
}

// ── Generalisation bound ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryBound {
    pub n: f64,
    pub delta: f64,
    pub phi_size: f64,
    pub head_size: f64,
    pub delta_gen: f64,
}

/// `Delta(n, delta) = sqrt((2/n) ln(|Phi| |F| / delta))`.
pub fn theory_bound(n: f64, delta: f64, phi_size: f64, head_size: f64) -> Result<TheoryBound> {
    if n < 1.0 || !(delta > 0.0 && delta < 1.0) || phi_size < 1.0 || head_size < 1.0 {
        return Err(Error::InvalidParameter("need n >= 1, 0 < delta < 1 and class sizes >= 1".into()));
    }
    let delta_gen = ((2.0 / n) * (phi_size * head_size / delta).ln()).sqrt();
    Ok(TheoryBound { n, delta, phi_size, head_size, delta_gen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::*;
    use crate::mdp::{
        ExBmdpSpec, FactorKind, FactorSpec, FactoredEmission, LatentMdp, LatentPolicy, Policy, PolicyMixture,
    };

    fn appc(m: usize, l: usize) -> EnvInstance {
        make_appc_instance(&AppCParams { m, l }).unwrap()
    }

    fn hard(d: usize, p: f64, i: usize) -> EnvInstance {
        make_hard_instance(&HardInstanceParams { d, p, i }).unwrap()
    }

    #[test]
    fn appc_rho_latent_and_observation() {
        let inst = appc(3, 1);
        let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
        let rho = model.exact_rho();
        assert_eq!(rho.endo, vec![0.5, 0.5]);
        // q(x') / 4 with q the per-latent emission probability
        let obs_rho = model.observation_rho(1e6).unwrap();
        let space = inst.spec.observation_space();
        for (&id, &p) in &obs_rho {
            let x = space.decode(id);
            let (xi, s) = (x[1] as usize, x[5] as usize);
            let mut q = 1.0;
            q *= if x[2] as usize == xi { 0.8 } else { 0.2 };
            for &w in &x[3..5] {
                q *= if w as usize == s { 0.8 } else { 0.2 };
            }
            assert!((p - q / 4.0).abs() < 1e-15);
        }
        assert!((obs_rho.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn appc_kernel_and_bayes_values() {
        let inst = appc(4, 2);
        let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
        let full = model.forward_kernel(1, LatentView::Full);
        for y in 0..4 {
            let (s, xi) = (y / 2, y % 2);
            let target = (1 - s) * 2 + (1 - xi);
            let row = full[y].as_ref().unwrap();
            for (y2, &p) in row.iter().enumerate() {
                assert_eq!(p, (y2 == target) as u8 as f64);
            }
        }
        let endo = model.forward_kernel(1, LatentView::Endogenous);
        for s in 0..2 {
            let row = endo[s].as_ref().unwrap();
            let mass_on_flip: f64 = (0..2).map(|xi| row[(1 - s) * 2 + xi]).sum();
            assert_eq!(mass_on_flip, 1.0);
        }
        let g = model.bayes_contrastive(KMode::Fixed(1), LatentView::Full);
        for y in 0..4 {
            let (s, xi) = (y / 2, y % 2);
            let row = g.g[0][y].as_ref().unwrap();
            for (y2, &v) in row.iter().enumerate() {
                let causal = y2 == (1 - s) * 2 + (1 - xi);
                assert!((v - if causal { 0.8 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uninformative_dynamics_give_half() {
        // identity dynamics, uniform start: D_k(.|s) concentrates on s while rho is uniform,
        // so use a fully mixing chain instead
        let spec = ExBmdpSpec {
            name: "mix".into(),
            latent: LatentMdp {
                num_states: 2,
                num_actions: 1,
                horizon: 2,
                transition: vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
                reward: vec![vec![0.0], vec![0.0]],
                start: vec![0.5, 0.5],
                rewarded_steps: None,
            },
            exo: None,
            emission: FactoredEmission {
                factors: vec![
                    FactorSpec { name: "t".into(), cardinality: 3, kind: FactorKind::TimeStamp },
                    FactorSpec { name: "s".into(), cardinality: 2, kind: FactorKind::DeterministicEndo { map: vec![0, 1] } },
                ],
            },
            exo_reward_bonus: None,
            lookahead: 1,
        };
        let mix = PolicyMixture::single(LatentPolicy::uniform(2, 1));
        let model = ExactModel::new(&spec, &mix).unwrap();
        let g = model.bayes_contrastive(KMode::Fixed(1), LatentView::Endogenous);
        for row in &g.g[0] {
            assert!(row.as_ref().unwrap().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn hard_instance_kernels_and_margins() {
        let inst = hard(3, 1.0 / 3.0, 1);
        let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
        let f0 = model.endo_future(0, 0, 1).unwrap();
        assert!((f0[1] - 1.0 / 3.0).abs() < 1e-15);
        let f1 = model.endo_future(0, 1, 1).unwrap();
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-15);
        // exogenous bit flips with probability p
        let pow = model.exo_power(1);
        assert!((pow[0][1] - (1.0 / 3.0) * (2.0 / 3.0)).abs() < 1e-15);
        let r = model.margins();
        assert!((r.beta_for_fixed[0] - 1.0 / 3.0).abs() < 1e-12, "{:?}", r);
        assert!(r.beta_temp_fixed[0] > 0.0);

        let half = hard(2, 0.5, 1);
        let r = ExactModel::new(&half.spec, &half.data_mixture).unwrap().margins();
        assert!(r.beta_for_fixed[0].abs() < 1e-15);
        assert!(r.beta_temp_fixed[0].abs() < 1e-15);

        let d2 = hard(2, 1.0 / 3.0, 1);
        let r = ExactModel::new(&d2.spec, &d2.data_mixture).unwrap().margins();
        assert!((r.beta_for_fixed[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn appc_margins() {
        let inst = appc(4, 1);
        let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
        let r = model.margins();
        assert!((r.beta_for_fixed[0] - 1.0).abs() < 1e-15);
        assert!(r.beta_temp_fixed[0] <= 1.0);
        assert!(check_margin_relations(&r).passed());
        let lifted = model.lifted_forward_tv(0, 1, 1, 1e6).unwrap();
        assert!((lifted - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lifted_tv_matches_latent_tv() {
        let inst = make_lock_env(3, 2, 4, &LockEnvConfig { n_noisy_endo: 1, n_iid: 1, lookahead: 2, ..Default::default() }).unwrap();
        let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
        let kern = model.forward_kernel(2, LatentView::Endogenous);
        for a in 0..3 {
            for b in 0..3 {
                let latent = 0.5 * kern[a].as_ref().unwrap().iter().zip(kern[b].as_ref().unwrap()).map(|(x, y)| (x - y).abs()).sum::<f64>();
                let lifted = model.lifted_forward_tv(a, b, 2, 1e6).unwrap();
                assert!((latent - lifted).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_state_mdp_has_no_pairs() {
        let mut spec = make_lock_env(3, 2, 1, &LockEnvConfig::default()).unwrap().spec;
        spec.latent.num_states = 1;
        spec.latent.num_actions = 1;
        spec.latent.transition = vec![vec![vec![1.0]]];
        spec.latent.reward = vec![vec![0.0]];
        spec.latent.start = vec![1.0];
        spec.emission.factors[1] = FactorSpec { name: "s".into(), cardinality: 1, kind: FactorKind::DeterministicEndo { map: vec![0] } };
        let model = ExactModel::new(&spec, &PolicyMixture::single(LatentPolicy::uniform(1, 1))).unwrap();
        let r = model.margins();
        let c = check_margin_relations(&r);
        assert!(c.no_pairs && c.passed());
    }

    #[test]
    fn mixtures_are_not_markov() {
        // two deterministic policies on a 3-state chain: always-advance and always-stay
        let spec = make_lock_env(3, 2, 2, &LockEnvConfig { lookahead: 2, ..Default::default() }).unwrap().spec;
        let stay = LatentPolicy::deterministic(&[vec![0, 0, 0]], 2);
        let go = LatentPolicy::deterministic(&[vec![1, 1, 1]], 2);
        let single = ExactModel::new(&spec, &PolicyMixture::single(go.clone())).unwrap();
        let mixed = ExactModel::new(
            &spec,
            &PolicyMixture::new(vec![(0.5, Policy::LatentTabular(stay)), (0.5, Policy::LatentTabular(go))]),
        )
        .unwrap();
        let compose = |m: &ExactModel, s: usize| -> Vec<f64> {
            let one = m.endo_future(0, s, 1).unwrap();
            let mut out = vec![0.0; 3];
            for (s1, &p) in one.iter().enumerate() {
                if p > 0.0 {
                    for (s2, &q) in m.endo_future(1, s1, 1).unwrap().iter().enumerate() {
                        out[s2] += p * q;
                    }
                }
            }
            out
        };
        for s in 0..3 {
            let two = single.endo_future(0, s, 2).unwrap();
            assert_eq!(two, compose(&single, s));
        }
        // mixture: two-step kernel from 0 is {0: 1/2, 2: 1/2}; composition gives {0: 1/4, 1: 1/2, 2: 1/4}
        let two = mixed.endo_future(0, 0, 2).unwrap();
        assert_eq!(two, vec![0.5, 0.0, 0.5]);
        assert_eq!(compose(&mixed, 0), vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn video_distributions() {
        for d in 2..=3 {
            let base = exact_video_distribution(&hard(d, 1.0 / 3.0, 1).spec, &hard(d, 1.0 / 3.0, 1).data_mixture, None).unwrap();
            assert!((base.total() - 1.0).abs() < 1e-10);
            for i in 2..=d {
                let inst = hard(d, 1.0 / 3.0, i);
                let other = exact_video_distribution(&inst.spec, &inst.data_mixture, None).unwrap();
                assert!(base.tv(&other) < 1e-15, "d={d} i={i}");
            }
        }
        let a = appc(4, 1);
        let b = appc(4, 3);
        let va = exact_video_distribution(&a.spec, &a.data_mixture, None).unwrap();
        let vb = exact_video_distribution(&b.spec, &b.data_mixture, None).unwrap();
        assert!(va.tv(&vb) > 0.01);

        let l1 = make_lock_env(3, 2, 3, &LockEnvConfig::default()).unwrap();
        let l2 = make_lock_env(3, 2, 3, &LockEnvConfig { reward_state: Some(0), ..Default::default() }).unwrap();
        let v1 = exact_video_distribution(&l1.spec, &l1.data_mixture, None).unwrap();
        let v2 = exact_video_distribution(&l2.spec, &l2.data_mixture, None).unwrap();
        assert_eq!(v1.tv(&v2), 0.0);
    }

    #[test]
    fn video_size_refusal() {
        let inst = appc(12, 3);
        assert!(matches!(exact_video_distribution(&inst.spec, &inst.data_mixture, None), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn next_frame_law_depends_only_on_latent() {
        // D(x' | x) read off the exact joint equals for all x sharing (s, xi)
        let inst = appc(2, 1);
        let v = exact_video_distribution(&inst.spec, &inst.data_mixture, None).unwrap();
        let space = inst.spec.observation_space();
        let mut by_x: BTreeMap<u64, BTreeMap<u64, f64>> = BTreeMap::new();
        for (seq, &p) in &v.probs {
            *by_x.entry(seq[0]).or_default().entry(seq[1]).or_insert(0.0) += p;
        }
        let mut by_latent: BTreeMap<(u16, u16), Vec<BTreeMap<u64, f64>>> = BTreeMap::new();
        for (x, row) in by_x {
            let total: f64 = row.values().sum();
            let obs = space.decode(x);
            let norm = row.into_iter().map(|(k, p)| (k, p / total)).collect();
            by_latent.entry((obs[4], obs[1])).or_default().push(norm);
        }
        for rows in by_latent.values() {
            for r in rows {
                assert!(tv_maps(r, &rows[0]) < 1e-12);
            }
        }
    }

    #[test]
    fn lower_bound_examples() {
        let r = lower_bound_bruteforce(3, 1.0 / 3.0, 2).unwrap();
        assert_eq!(r.decoders, 256);
        assert!((r.bound - 0.125).abs() < 1e-15);
        assert!(r.min_max_suboptimality >= r.bound);
        let r = lower_bound_bruteforce(2, 1.0 / 3.0, 2).unwrap();
        assert_eq!(r.decoders, 16);
        assert!(r.min_max_suboptimality >= 0.125);
        let r = lower_bound_bruteforce(2, 1.0 / 3.0, 4).unwrap();
        assert_eq!(r.min_max_suboptimality, 0.0);
        assert!(lower_bound_bruteforce(5, 0.3, 2).is_err());
    }

    #[test]
    fn theory_bound_examples() {
        let b = theory_bound(1000.0, 0.1, 2.0, 2.0).unwrap();
        assert!((b.delta_gen - (0.002f64 * 40f64.ln()).sqrt()).abs() < 1e-15);
        assert!((b.delta_gen - 0.0859).abs() < 1e-4);
        let n = 2.0 * (6.0f64 / 0.05).ln();
        assert!((theory_bound(n, 0.05, 2.0, 3.0).unwrap().delta_gen - 1.0).abs() < 1e-12);
        let a = theory_bound(100.0, 0.1, 5.0, 7.0).unwrap().delta_gen;
        let b = theory_bound(400.0, 0.1, 5.0, 7.0).unwrap().delta_gen;
        assert!((a - 2.0 * b).abs() < 1e-15);
        assert!(theory_bound(0.5, 0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn coupling_inequality_on_small_instances() {
        for seed in 0..20 {
            let inst = random_block_mdp(seed, &RandomLimits::default()).unwrap();
            let model = ExactModel::new(&inst.spec, &inst.data_mixture).unwrap();
            let class = crate::decoder::DecoderClass::single_factor_partitions(&inst.spec, &[1, 2], 2);
            for d in &class.decoders {
                for k in 1..=inst.spec.lookahead {
                    assert!(model.coupling_check(d, k).holds, "seed {seed}");
                }
            }
        }
    }
}
