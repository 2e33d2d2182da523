//! Named experiment suites, config files and CSV reports.
//!
//! A run is fully determined by its [`ExperimentConfig`]; every output file
//! carries the config hash and seeds, and reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_contrastive, collect_trajectories, labeled_per_episode, multistep_per_episode, KMode, NegativeSampling};
use crate::decoder::DecoderClass;
use crate::envs::{
    appc_decoder_class, make_appc_instance, make_hard_instance, random_block_mdp, AppCParams, EnvConfig, EnvInstance,
    HardInstanceParams, LockEnvConfig, RandomLimits, APPC_FLIP,
};
use crate::error::{Error, Result};
use crate::mdp::Policy;
use crate::oracle::{
    check_margin_relations, entropy, exact_video_distribution, lower_bound_bruteforce, ExactModel, MarginReport,
    PopulationOptions, EXACT_TOL,
};
use crate::replearn::{erm_acro, erm_autoencoder, erm_contrastive, erm_forward, erm_population, ForwardHeadKind, LearnedRepresentation, Objective, TrainingData};
use crate::rl::{bijection_align, evaluate_policy, optimal_value, tabular_rl, AbstractMdpView, AlignMode, EvalMode, RlConfig};
use crate::seed::{component, derive_seed};

pub const SUITES: [&str; 7] =
    ["upper-bound", "margin-relation", "lower-bound", "appc-separation", "exo-ablation", "iid-ablation", "acro-comparison"];

// ── Config ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundCase {
    pub d: usize,
    pub cells: usize,
}

/// Fields a suite does not use are ignored by it but still hashed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: String,
    pub seeds: Vec<u64>,
    pub n_grid: Vec<usize>,
    pub objectives: Vec<Objective>,
    pub k_mode: KMode,
    pub negatives: NegativeSampling,
    /// Decoder classes are all partitions of each non-time factor into at most this many cells.
    pub max_cells: usize,
    /// Zero skips downstream RL.
    pub rl_budget: usize,
    pub bonus_scale: f64,
    pub rl_eval: EvalMode,
    /// Random Block MDPs in the margin-relation suite.
    pub instances: usize,
    pub appc_m: Vec<usize>,
    pub hard_p: f64,
    /// Number of added factors per ablation step.
    pub factor_counts: Vec<usize>,
    /// Not part of the config hash.
    pub out_dir: Option<String>,
    pub lower_bound: Vec<LowerBoundCase>,
    /// Absent means none, not the default lock.
    #[serde(default)]
    pub env: Option<EnvConfig>,
}

fn lock(extras: LockEnvConfig) -> Option<EnvConfig> {
    Some(EnvConfig::Lock { states: 3, actions: 2, horizon: 4, extras })
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            suite: "upper-bound".into(),
            seeds: vec![0, 1, 2],
            n_grid: vec![1_000, 10_000, 100_000],
            objectives: vec![Objective::Forward, Objective::Contrastive],
            k_mode: KMode::Fixed(1),
            negatives: NegativeSampling::PartnerFirst,
            max_cells: 3,
            rl_budget: 10_000,
            bonus_scale: 1.0,
            rl_eval: EvalMode::Exact,
            instances: 100,
            appc_m: (1..=6).collect(),
            hard_p: 1.0 / 3.0,
            factor_counts: (0..=4).collect(),
            out_dir: None,
            lower_bound: vec![LowerBoundCase { d: 3, cells: 2 }, LowerBoundCase { d: 2, cells: 2 }],
            env: lock(LockEnvConfig::default()),
        }
    }
}

impl ExperimentConfig {
    /// Default configuration of a named suite.
    pub fn preset(name: &str) -> Result<Self> {
        check_suite(name)?;
        let base = ExperimentConfig { suite: name.into(), ..Default::default() };
        Ok(match name {
            "upper-bound" => base,
            "margin-relation" => ExperimentConfig { seeds: vec![0], env: None, ..base },
            "lower-bound" | "appc-separation" => ExperimentConfig { seeds: vec![0], env: None, ..base },
            "exo-ablation" => ExperimentConfig {
                n_grid: vec![100_000],
                objectives: vec![Objective::Forward, Objective::Contrastive, Objective::Acro],
                max_cells: 4,
                rl_budget: 0,
                ..base
            },
            "iid-ablation" => ExperimentConfig { n_grid: vec![100_000], rl_budget: 0, ..base },
            "acro-comparison" => ExperimentConfig {
                n_grid: vec![100_000],
                objectives: vec![Objective::Acro, Objective::Contrastive, Objective::Forward],
                max_cells: 4,
                rl_budget: 0,
                env: lock(LockEnvConfig { n_exo: 4, ..Default::default() }),
                ..base
            },
            _ => unreachable!(),
        })
    }

    /// Keys missing from `text` take the values of the named suite's preset.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let suite = match user.get("suite") {
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::InvalidParameter("`suite` must be a string".into())),
            None => ExperimentConfig::default().suite,
        };
        let mut merged: toml::Table = toml::from_str(&Self::preset(&suite)?.to_toml()?)?;
        merged.extend(user);
        Ok(merged.try_into()?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// First 16 hex digits of the SHA-256 of the TOML form, without `out_dir`.
    pub fn config_hash(&self) -> Result<String> {
        let text = ExperimentConfig { out_dir: None, ..self.clone() }.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string())
    }

    fn lock_env(&self) -> Result<(usize, usize, usize, LockEnvConfig)> {
        match &self.env {
            Some(EnvConfig::Lock { states, actions, horizon, extras }) => Ok((*states, *actions, *horizon, extras.clone())),
            _ => Err(Error::InvalidParameter(format!("suite `{}` needs a lock env", self.suite))),
        }
    }
}

fn check_suite(name: &str) -> Result<()> {
    if SUITES.contains(&name) {
        Ok(())
    } else {
        Err(Error::UnknownSuite { name: name.into(), valid: SUITES.join(", ") })
    }
}

// ── Reports ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub suite: String,
    pub config_hash: String,
    pub env: String,
    pub objective: String,
    pub n: Option<usize>,
    pub seed: u64,
    pub decoder: String,
    pub decoder_index: Option<usize>,
    pub selected: Option<bool>,
    pub tie: Option<bool>,
    pub loss: Option<f64>,
    pub kl: Option<f64>,
    pub accuracy: Option<f64>,
    pub coupling_error: Option<f64>,
    pub rl_return: Option<f64>,
    pub v_star: Option<f64>,
    pub beta_for: Option<f64>,
    pub beta_temp: Option<f64>,
    pub note: String,
}

impl Row {
    fn new(ctx: &Ctx, env: impl Into<String>, objective: impl Into<String>, seed: u64) -> Self {
        Row {
            suite: ctx.suite.clone(),
            config_hash: ctx.hash.clone(),
            env: env.into(),
            objective: objective.into(),
            n: None,
            seed,
            decoder: String::new(),
            decoder_index: None,
            selected: None,
            tie: None,
            loss: None,
            kl: None,
            accuracy: None,
            coupling_error: None,
            rl_return: None,
            v_star: None,
            beta_for: None,
            beta_temp: None,
            note: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub config_hash: String,
    pub criterion: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub suite: String,
    pub config_hash: String,
    pub env: String,
    pub objective: String,
    pub n: Option<usize>,
    pub runs: usize,
    pub seeds: String,
    pub accuracy_mean: Option<f64>,
    pub accuracy_min: Option<f64>,
    pub accuracy_max: Option<f64>,
    pub loss_mean: Option<f64>,
    pub loss_min: Option<f64>,
    pub loss_max: Option<f64>,
    pub rl_return_mean: Option<f64>,
    pub rl_return_min: Option<f64>,
    pub rl_return_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub rows: Vec<Row>,
    pub criteria: Vec<CriterionResult>,
    pub summary: Vec<SummaryRow>,
}

fn stats(vals: impl Iterator<Item = Option<f64>>) -> (Option<f64>, Option<f64>, Option<f64>) {
    let v: Vec<f64> = vals.flatten().collect();
    if v.is_empty() {
        return (None, None, None);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (Some(mean), Some(v.iter().copied().fold(f64::INFINITY, f64::min)), Some(v.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
}

/// Aggregates rows by `(suite, env, objective, n)` in first-appearance order.
/// Candidate rows that were not selected are left out.
pub fn emit_report(rows: &[Row]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Empty("result rows"));
    }
    let mut keys: Vec<(String, String, String, Option<usize>)> = Vec::new();
    for r in rows.iter().filter(|r| r.selected != Some(false)) {
        let key = (r.suite.clone(), r.env.clone(), r.objective.clone(), r.n);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    Ok(keys
        .into_iter()
        .map(|key| {
            let group: Vec<&Row> = rows
                .iter()
                .filter(|r| r.selected != Some(false) && (&r.suite, &r.env, &r.objective, r.n) == (&key.0, &key.1, &key.2, key.3))
                .collect();
            let mut seeds: Vec<u64> = group.iter().map(|r| r.seed).collect();
            seeds.dedup();
            let seeds = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
            let acc = stats(group.iter().map(|r| r.accuracy));
            let loss = stats(group.iter().map(|r| r.loss));
            let ret = stats(group.iter().map(|r| r.rl_return));
            SummaryRow {
                suite: key.0,
                config_hash: group[0].config_hash.clone(),
                env: key.1,
                objective: key.2,
                n: key.3,
                runs: group.len(),
                seeds,
                accuracy_mean: acc.0,
                accuracy_min: acc.1,
                accuracy_max: acc.2,
                loss_mean: loss.0,
                loss_min: loss.1,
                loss_max: loss.2,
                rl_return_mean: ret.0,
                rl_return_min: ret.1,
                rl_return_max: ret.2,
            }
        })
        .collect())
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const ROW_HEADER: [&str; 19] = [
    "suite", "config_hash", "env", "objective", "n", "seed", "decoder", "decoder_index", "selected", "tie", "loss", "kl",
    "accuracy", "coupling_error", "rl_return", "v_star", "beta_for", "beta_temp", "note",
];
const SUMMARY_HEADER: [&str; 16] = [
    "suite", "config_hash", "env", "objective", "n", "runs", "seeds", "accuracy_mean", "accuracy_min", "accuracy_max",
    "loss_mean", "loss_min", "loss_max", "rl_return_mean", "rl_return_min", "rl_return_max",
];
const CRITERIA_HEADER: [&str; 5] = ["config_hash", "criterion", "name", "passed", "detail"];

/// Writes `rows.csv`, `summary.csv`, `criteria.csv` and `config.toml` into
/// `<out>/<suite>-<hash>` and returns that directory.
pub fn write_report(report: &SuiteReport, out: &Path) -> Result<PathBuf> {
    let dir = out.join(format!("{}-{}", report.config.suite, report.config_hash));
    fs::create_dir_all(&dir)?;
    write_csv(&dir.join("rows.csv"), &ROW_HEADER, &report.rows)?;
    write_csv(&dir.join("summary.csv"), &SUMMARY_HEADER, &report.summary)?;
    write_csv(&dir.join("criteria.csv"), &CRITERIA_HEADER, &report.criteria)?;
    let portable = ExperimentConfig { out_dir: None, ..report.config.clone() };
    let cfg = format!("# config_hash = \"{}\"\n{}", report.config_hash, portable.to_toml()?);
    fs::write(dir.join("config.toml"), cfg)?;
    Ok(dir)
}

// ── Running ────────────────────────────────────────────────────────────

struct Ctx {
    suite: String,
    hash: String,
}

impl Ctx {
    fn criterion(&self, criterion: u8, name: &str, passed: bool, detail: String) -> CriterionResult {
        CriterionResult { config_hash: self.hash.clone(), criterion, name: name.into(), passed, detail }
    }
}

pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    check_suite(&cfg.suite)?;
    let ctx = Ctx { suite: cfg.suite.clone(), hash: cfg.config_hash()? };
    let (rows, criteria) = match cfg.suite.as_str() {
        "upper-bound" => upper_bound(cfg, &ctx)?,
        "margin-relation" => margin_relation(cfg, &ctx)?,
        "lower-bound" => lower_bound(cfg, &ctx)?,
        "appc-separation" => appc_separation(cfg, &ctx)?,
        "exo-ablation" => ablation(cfg, &ctx, Ablation::Exo)?,
        "iid-ablation" => ablation(cfg, &ctx, Ablation::Iid)?,
        "acro-comparison" => acro_comparison(cfg, &ctx)?,
        _ => unreachable!(),
    };
    let summary = emit_report(&rows)?;
    Ok(SuiteReport { config: cfg.clone(), config_hash: ctx.hash, rows, criteria, summary })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// All partitions of every non-time factor into at most `max_cells` cells.
pub fn partition_class(inst: &EnvInstance, max_cells: usize) -> DecoderClass {
    let factors: Vec<usize> = (1..inst.spec.num_factors()).collect();
    DecoderClass::single_factor_partitions(&inst.spec, &factors, max_cells)
}

fn grid(cfg: &ExperimentConfig) -> Vec<(usize, u64)> {
    cfg.n_grid.iter().flat_map(|&n| cfg.seeds.iter().map(move |&s| (n, s))).collect()
}

/// Sampled ERM for each objective on `n` episodes, scored against the true state.
fn sampled_run(
    ctx: &Ctx,
    cfg: &ExperimentConfig,
    env_name: &str,
    inst: &EnvInstance,
    class: &DecoderClass,
    n: usize,
    seed: u64,
) -> Result<Vec<Row>> {
    let spec = &inst.spec;
    let traj = collect_trajectories(spec, &inst.data_mixture, n, derive_seed(seed, component::EPISODES, n as u64))?;
    let ms_seed = derive_seed(seed, component::MULTISTEP, n as u64);
    let v_star = (cfg.rl_budget > 0).then(|| optimal_value(spec).0);
    let mut rows = Vec::new();
    for &obj in &cfg.objectives {
        let learned: LearnedRepresentation = match obj {
            Objective::Forward => erm_forward(class, &multistep_per_episode(&traj.video, cfg.k_mode, ms_seed)?, ForwardHeadKind::Factored)?,
            Objective::Contrastive => {
                let pairs = build_contrastive(&traj.video, cfg.k_mode, cfg.negatives, derive_seed(seed, component::CONTRASTIVE, n as u64))?;
                erm_contrastive(class, &pairs)?
            }
            Objective::Autoencoder => erm_autoencoder(class, &traj.video)?,
            Objective::Acro => erm_acro(class, TrainingData::Labeled(&labeled_per_episode(&traj, cfg.k_mode, ms_seed)?))?,
        };
        let align = bijection_align(&learned.decoder, spec, &inst.data_mixture, AlignMode::Exact)?;
        let mut row = Row::new(ctx, env_name, obj.name(), seed);
        row.n = Some(n);
        row.decoder = learned.decoder.name.clone();
        row.decoder_index = Some(learned.decoder_index);
        row.tie = Some(learned.tie);
        row.loss = Some(learned.empirical_loss);
        row.accuracy = Some(align.accuracy());
        row.coupling_error = Some(align.coupling_error);
        if cfg.rl_budget > 0 {
            let rl_cfg = RlConfig { budget: cfg.rl_budget, bonus_scale: cfg.bonus_scale, ..Default::default() };
            let rl_seed = derive_seed(seed, component::RL, n as u64);
            let out = tabular_rl(&AbstractMdpView::new(spec, &learned.decoder), &rl_cfg, rl_seed)?;
            let pol = Policy::AbstractComposed(out.policy(&learned.decoder));
            row.rl_return = Some(evaluate_policy(spec, &pol, cfg.rl_eval, derive_seed(seed, component::EVAL, n as u64))?.value);
            row.v_star = v_star;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn run_grid(ctx: &Ctx, cfg: &ExperimentConfig, env_name: &str, inst: &EnvInstance, class: &DecoderClass) -> Result<Vec<Row>> {
    let cells = grid(cfg)
        .into_par_iter()
        .map(|(n, seed)| sampled_run(ctx, cfg, env_name, inst, class, n, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(cells.into_iter().flatten().collect())
}

fn accuracies(rows: &[Row], env: &str, obj: &str, n: usize) -> Vec<f64> {
    rows.iter().filter(|r| r.env == env && r.objective == obj && r.n == Some(n)).filter_map(|r| r.accuracy).collect()
}

type SuiteOut = (Vec<Row>, Vec<CriterionResult>);

fn upper_bound(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<SuiteOut> {
    let inst = cfg.env.as_ref().ok_or_else(|| Error::InvalidParameter("upper-bound needs an env".into()))?.build()?;
    let class = partition_class(&inst, cfg.max_cells);
    let name = inst.spec.name.clone();
    let rows = run_grid(ctx, cfg, &name, &inst, &class)?;
    let mut criteria = Vec::new();
    let Some(&n_max) = cfg.n_grid.iter().max() else { return Ok((rows, criteria)) };
    let mut ok = true;
    let mut detail = Vec::new();
    for obj in cfg.objectives.iter().filter(|o| matches!(o, Objective::Forward | Objective::Contrastive)) {
        let mut ns = cfg.n_grid.clone();
        ns.sort_unstable();
        let medians: Vec<f64> = ns.iter().map(|&n| median(accuracies(&rows, &name, obj.name(), n))).collect();
        let monotone = medians.windows(2).all(|w| w[1] + 1e-12 >= w[0]);
        let top = *medians.last().unwrap();
        ok &= monotone && top >= 0.99;
        detail.push(format!("{obj}: median accuracy by n {medians:?}"));
        if cfg.rl_budget > 0 {
            let gaps: Vec<f64> = rows
                .iter()
                .filter(|r| r.objective == obj.name() && r.n == Some(n_max))
                .map(|r| r.v_star.unwrap_or(f64::NAN) - r.rl_return.unwrap_or(f64::NAN))
                .collect();
            let worst = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ok &= worst <= 0.05;
            detail.push(format!("{obj}: worst V* - V = {worst:.4} after {} episodes", cfg.rl_budget));
        } else {
            ok = false;
            detail.push("RL disabled".into());
        }
    }
    criteria.push(ctx.criterion(6, "upper-bound pipeline", ok, detail.join("; ")));
    Ok((rows, criteria))
}

fn margin_row(ctx: &Ctx, env: &str, seed: u64, m: &MarginReport) -> Row {
    let mut row = Row::new(ctx, env, "oracle", seed);
    row.beta_for = Some(m.beta_for_unf);
    row.beta_temp = Some(m.beta_temp_unf);
    row
}

fn margin_relation(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<SuiteOut> {
    let jobs: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| (0..cfg.instances).map(move |i| (s, i))).collect();
    let results = jobs
        .into_par_iter()
        .map(|(seed, i)| {
            let inst = random_block_mdp(derive_seed(seed, component::RANDOM_ENV, i as u64), &RandomLimits::default())?;
            let m = ExactModel::new(&inst.spec, &inst.data_mixture)?.margins();
            let check = check_margin_relations(&m);
            let mut row = margin_row(ctx, &inst.spec.name, seed, &m);
            row.note = if check.no_pairs {
                "no state pairs".into()
            } else if check.passed() {
                format!("ok; eta_min={}; K={}", m.eta_min, m.lookahead)
            } else {
                check.violations.join(" | ")
            };
            Ok((row, check))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = results.len();
    let passed = results.iter().filter(|r| r.1.passed()).count();
    let vacuous = results.iter().filter(|r| r.1.no_pairs).count();
    let crit = ctx.criterion(1, "margin relations", passed == total && total > 0, format!("{passed}/{total} pass ({vacuous} with a single reachable state)"));
    Ok((results.into_iter().map(|r| r.0).collect(), vec![crit]))
}

fn population_rows(
    ctx: &Ctx,
    env: &str,
    label: &str,
    class: &DecoderClass,
    learned: &LearnedRepresentation,
) -> Vec<Row> {
    class
        .decoders
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut row = Row::new(ctx, env, label, 0);
            row.decoder = d.name.clone();
            row.decoder_index = Some(i);
            row.selected = Some(i == learned.decoder_index);
            row.tie = Some(learned.tie);
            row.loss = Some(learned.losses[i]);
            row.kl = learned.kls.as_ref().map(|k| k[i]);
            row
        })
        .collect()
}

fn appc_separation(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<SuiteOut> {
    let gap = std::f64::consts::LN_2 - entropy([APPC_FLIP, 1.0 - APPC_FLIP].into_iter());
    let mut rows = Vec::new();
    let mut c2: Option<(bool, Vec<String>)> = None;
    let mut c3 = (true, 0.0f64);
    for &m in &cfg.appc_m {
        for l in 0..=m {
            let inst = make_appc_instance(&AppCParams { m, l })?;
            let class = appc_decoder_class(&inst);
            let model = ExactModel::new(&inst.spec, &inst.data_mixture)?;
            let env = inst.spec.name.clone();
            let fwd = erm_population(&class, &model, Objective::Forward, &PopulationOptions::default())?;
            rows.extend(population_rows(ctx, &env, "forward", &class, &fwd));
            if m == 4 {
                let (ok, notes) = c2.get_or_insert_with(|| (true, Vec::new()));
                let kls = fwd.kls.clone().unwrap_or_default();
                let want = [std::f64::consts::LN_2 + gap * l as f64, std::f64::consts::LN_2 + gap * (m - l) as f64];
                let kl_ok = kls.len() == 2 && (kls[0] - want[0]).abs() <= 1e-6 && (kls[1] - want[1]).abs() <= 1e-6;
                let pick_ok = match (2 * l).cmp(&m) {
                    std::cmp::Ordering::Less => fwd.decoder_index == 0 && !fwd.tie,
                    std::cmp::Ordering::Equal => fwd.tie,
                    std::cmp::Ordering::Greater => fwd.decoder_index == 1 && !fwd.tie,
                };
                *ok &= kl_ok && pick_ok;
                let pick = if fwd.tie { "tie".to_string() } else { class.decoders[fwd.decoder_index].name.clone() };
                notes.push(format!("l={l}: {pick}"));
            }
            for neg in [NegativeSampling::PartnerFirst, NegativeSampling::PartnerNext] {
                let opts = PopulationOptions { negatives: neg, ..Default::default() };
                let con = erm_population(&class, &model, Objective::Contrastive, &opts)?;
                let label = format!("contrastive/{}", if neg == NegativeSampling::PartnerFirst { "partner-first" } else { "partner-next" });
                rows.extend(population_rows(ctx, &env, &label, &class, &con));
                let diff = (con.losses[0] - con.losses[1]).abs();
                c3.1 = c3.1.max(diff);
                c3.0 &= diff <= 1e-12 && m <= 6;
            }
        }
    }
    let mut criteria = Vec::new();
    if let Some((ok, notes)) = c2 {
        criteria.push(ctx.criterion(2, "forward threshold (m=4)", ok, notes.join(", ")));
    }
    if !cfg.appc_m.is_empty() {
        criteria.push(ctx.criterion(3, "contrastive blindness", c3.0, format!("max |L(phi*) - L(phi*_xi)| = {:e} over m in {:?}", c3.1, cfg.appc_m)));
    }
    Ok((rows, criteria))
}

fn lower_bound(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<SuiteOut> {
    let p = cfg.hard_p;
    let mut rows = Vec::new();
    let (mut c4, mut c4_notes) = (true, Vec::new());
    let (mut c5, mut c5_notes) = (true, Vec::new());
    for case in &cfg.lower_bound {
        let d = case.d;
        let rep = lower_bound_bruteforce(d, p, case.cells)?;
        let insts: Vec<EnvInstance> = (1..=d).map(|i| make_hard_instance(&HardInstanceParams { d, p, i })).collect::<Result<_>>()?;
        let videos = insts.iter().map(|inst| exact_video_distribution(&inst.spec, &inst.data_mixture, None)).collect::<Result<Vec<_>>>()?;
        let mut max_tv = 0.0f64;
        for a in 0..d {
            for b in a + 1..d {
                max_tv = max_tv.max(videos[a].tv(&videos[b]));
            }
        }
        let mut row = Row::new(ctx, format!("hard-d{d}"), "brute-force", 0);
        row.decoder = rep.argmin_decoder.iter().map(u32::to_string).collect();
        row.loss = Some(rep.min_max_suboptimality);
        row.note = format!("L={}; decoders={}; bound={}; max pairwise video TV={max_tv:e}", case.cells, rep.decoders, rep.bound);
        rows.push(row);
        let ok = rep.min_max_suboptimality >= rep.bound && max_tv <= 1e-12;
        c4 &= ok;
        c4_notes.push(format!("d={d}, L={}: suboptimality {} vs bound {}, TV {max_tv:e}", case.cells, rep.min_max_suboptimality, rep.bound));

        if d < 2 {
            continue;
        }
        let opts = PopulationOptions { negatives: cfg.negatives, ..Default::default() };
        for (idx, inst) in insts.iter().enumerate() {
            let i = idx + 1;
            let class = DecoderClass::single_factor_identities(&inst.spec, &(1..=d).collect::<Vec<_>>());
            let model = ExactModel::new(&inst.spec, &inst.data_mixture)?;
            let env = inst.spec.name.clone();
            for obj in [Objective::Forward, Objective::Contrastive, Objective::Acro] {
                let r = erm_population(&class, &model, obj, &opts)?;
                rows.extend(population_rows(ctx, &env, obj.name(), &class, &r));
                let spread = r.losses.iter().copied().fold(f64::NEG_INFINITY, f64::max) - r.losses.iter().copied().fold(f64::INFINITY, f64::min);
                if obj == Objective::Acro {
                    let runner_up = r.losses.iter().enumerate().filter(|&(j, _)| j != idx).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
                    let margin = runner_up - r.losses[idx];
                    c5 &= r.decoder_index == idx && !r.tie && margin > 0.1;
                    c5_notes.push(format!("d={d} i={i}: ACRO margin {margin:.4}"));
                } else {
                    c5 &= spread < 1e-12;
                    if spread >= 1e-12 {
                        c5_notes.push(format!("d={d} i={i}: {obj} spread {spread:e}"));
                    }
                }
            }
        }
    }
    let criteria = vec![
        ctx.criterion(4, "lower bound", c4, c4_notes.join("; ")),
        ctx.criterion(5, "trajectory/video separation", c5, c5_notes.join("; ")),
    ];
    Ok((rows, criteria))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ablation {
    Exo,
    Iid,
}

fn ablation(cfg: &ExperimentConfig, ctx: &Ctx, which: Ablation) -> Result<SuiteOut> {
    let (s, a, h, base) = cfg.lock_env()?;
    let mut rows = Vec::new();
    let mut margins: Vec<(usize, MarginReport)> = Vec::new();
    for &c in &cfg.factor_counts {
        let extras = match which {
            Ablation::Exo => LockEnvConfig { n_exo: c, ..base.clone() },
            Ablation::Iid => LockEnvConfig { n_iid: c, ..base.clone() },
        };
        let inst = crate::envs::make_lock_env(s, a, h, &extras)?;
        let env = format!("{}+{}{c}", inst.spec.name, if which == Ablation::Exo { "exo" } else { "iid" });
        let m = ExactModel::new(&inst.spec, &inst.data_mixture)?.margins();
        let mut mrow = margin_row(ctx, &env, 0, &m);
        mrow.note = format!("eta_min={}", m.eta_min);
        rows.push(mrow);
        margins.push((c, m));
        rows.extend(run_grid(ctx, cfg, &env, &inst, &partition_class(&inst, cfg.max_cells))?);
    }
    let mut criteria = Vec::new();
    if which == Ablation::Iid && !cfg.factor_counts.is_empty() {
        let base_m = &margins[0].1;
        let same = |x: &MarginReport| {
            let close = |p: &[f64], q: &[f64]| p.len() == q.len() && p.iter().zip(q).all(|(a, b)| (a - b).abs() <= EXACT_TOL);
            close(&x.beta_for_fixed, &base_m.beta_for_fixed)
                && close(&x.beta_temp_fixed, &base_m.beta_temp_fixed)
                && close(&[x.beta_for_unf, x.beta_temp_unf, x.eta_min], &[base_m.beta_for_unf, base_m.beta_temp_unf, base_m.eta_min])
        };
        let margins_ok = margins.iter().all(|(_, m)| same(m));
        let mut worst = 0.0f64;
        let base_env = |c: usize| format!("lock-s{s}-a{a}-h{h}+iid{c}");
        let c0 = cfg.factor_counts[0];
        for obj in cfg.objectives.iter().filter(|o| matches!(o, Objective::Forward | Objective::Contrastive)) {
            for &n in &cfg.n_grid {
                let reference = accuracies(&rows, &base_env(c0), obj.name(), n);
                for &c in &cfg.factor_counts[1..] {
                    for (x, y) in accuracies(&rows, &base_env(c), obj.name(), n).iter().zip(&reference) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        criteria.push(ctx.criterion(
            7,
            "iid-noise robustness",
            margins_ok && worst <= 0.02,
            format!("max accuracy change {worst:.4} over iid counts {:?}; margins unchanged: {margins_ok}", cfg.factor_counts),
        ));
    }
    Ok((rows, criteria))
}

fn acro_comparison(cfg: &ExperimentConfig, ctx: &Ctx) -> Result<SuiteOut> {
    let inst = cfg.env.as_ref().ok_or_else(|| Error::InvalidParameter("acro-comparison needs an env".into()))?.build()?;
    let class = partition_class(&inst, cfg.max_cells);
    let env = format!("{}+exo{}", inst.spec.name, inst.exo_factors.len());
    let model = ExactModel::new(&inst.spec, &inst.data_mixture)?;
    let opts = PopulationOptions { k_mode: cfg.k_mode, negatives: cfg.negatives, ..Default::default() };
    let pop = erm_population(&class, &model, Objective::Contrastive, &opts)?;
    let mut rows = population_rows(ctx, &env, "contrastive-population", &class, &pop);
    let star = class.realizing_index(&inst.spec);
    let best_exo = (0..class.len())
        .filter(|&i| class.decoders[i].factors.iter().all(|f| inst.exo_factors.contains(f)) && !class.decoders[i].factors.is_empty())
        .min_by(|&x, &y| pop.losses[x].total_cmp(&pop.losses[y]));
    let condition = match (star, best_exo) {
        (Some(s), Some(e)) => pop.losses[e] < pop.losses[s],
        _ => false,
    };
    rows.extend(run_grid(ctx, cfg, &env, &inst, &class)?);
    let Some(&n) = cfg.n_grid.iter().max() else { return Ok((rows, vec![])) };
    let acro = accuracies(&rows, &env, "acro", n);
    let con = accuracies(&rows, &env, "contrastive", n);
    let ok = condition && !acro.is_empty() && !con.is_empty() && acro.iter().all(|&a| a >= 0.99) && con.iter().all(|&a| a < 0.7);
    let detail = format!(
        "oracle: best exogenous projection {} has contrastive loss {} vs phi* {}; n={n}: ACRO accuracy {acro:?}, contrastive accuracy {con:?}",
        best_exo.map_or("none".into(), |e| class.decoders[e].name.clone()),
        best_exo.map_or(f64::NAN, |e| pop.losses[e]),
        star.map_or(f64::NAN, |s| pop.losses[s]),
    );
    Ok((rows, vec![ctx.criterion(8, "exogenous degradation", ok, detail)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(ctx: &Ctx, seed: u64, acc: f64) -> Row {
        let mut r = Row::new(ctx, "e", "forward", seed);
        r.n = Some(10);
        r.accuracy = Some(acc);
        r
    }

    #[test]
    fn presets_roundtrip_and_hash_ignores_out_dir() {
        for name in SUITES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            let moved = ExperimentConfig { out_dir: Some("elsewhere".into()), ..cfg.clone() };
            assert_eq!(moved.config_hash().unwrap(), cfg.config_hash().unwrap());
            let minimal = ExperimentConfig::from_toml(&format!("suite = \"{name}\"")).unwrap();
            assert_eq!(minimal, cfg);
        }
        let tweaked = ExperimentConfig::from_toml("suite = \"exo-ablation\"\nseeds = [5]").unwrap();
        assert_eq!(tweaked.seeds, vec![5]);
        assert_eq!(tweaked.objectives, ExperimentConfig::preset("exo-ablation").unwrap().objectives);
        assert!(ExperimentConfig::from_toml("suite = \"lower-bound\"\ncolour = 1").is_err());
        let err = ExperimentConfig::preset("nope").unwrap_err().to_string();
        assert!(err.contains("upper-bound") && err.contains("acro-comparison"));
    }

    #[test]
    fn report_aggregation() {
        let ctx = Ctx { suite: "s".into(), hash: "h".into() };
        let one = emit_report(&[row(&ctx, 0, 0.5)]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].accuracy_mean, Some(0.5));
        let two = emit_report(&[row(&ctx, 0, 0.5), row(&ctx, 1, 1.0)]).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!((two[0].accuracy_mean, two[0].accuracy_min, two[0].accuracy_max), (Some(0.75), Some(0.5), Some(1.0)));
        assert_eq!(two[0].seeds, "0;1");
        assert!(emit_report(&[]).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![1.0, 2.0]), 1.5);
    }
}
