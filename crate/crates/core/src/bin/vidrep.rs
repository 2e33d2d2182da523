use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vidrep::data::{
    build_contrastive, collect_trajectories, collect_video, labeled_per_episode, multistep_per_episode, read_dataset, write_trajectories,
    write_video, KMode, NegativeSampling,
};
use vidrep::decoder::Decoder;
use vidrep::envs::{EnvConfig, EnvInstance};
use vidrep::experiments::{partition_class, run_suite, write_report, ExperimentConfig};
use vidrep::mdp::Policy;
use vidrep::oracle::{check_margin_relations, lower_bound_bruteforce, ExactModel, PopulationOptions};
use vidrep::replearn::{erm_acro, erm_autoencoder, erm_contrastive, erm_forward, erm_population, ForwardHeadKind, Objective, TrainingData};
use vidrep::rl::{evaluate_policy, optimal_value, tabular_rl, AbstractMdpView, EvalMode, RlConfig};
use vidrep::{Error, Result};

#[derive(Parser)]
#[command(name = "vidrep", version, about = "Video pre-training lab for tabular Block MDPs with exogenous noise")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML config: an environment for most commands, an experiment for `suite`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Video,
    Trajectory,
}

#[derive(Subcommand)]
enum Command {
    /// Collect episodes from the data mixture as JSONL.
    GenData {
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = DataKind::Video)]
        kind: DataKind,
        /// Recorded in the header for downstream tools.
        #[arg(long)]
        k_mode: Option<KMode>,
    },
    /// ERM over all factor partitions; prints the choice and writes the decoder as JSON.
    TrainRep {
        /// JSONL dataset from gen-data. Omit with --population.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "forward")]
        objective: Objective,
        #[arg(long, default_value = "fixed:1")]
        k_mode: KMode,
        #[arg(long, default_value = "partner-first")]
        negatives: NegativeSampling,
        #[arg(long, default_value_t = 3)]
        max_cells: usize,
        /// Exact population losses instead of a dataset.
        #[arg(long)]
        population: bool,
    },
    /// Exact margins and the relations between them.
    Margins,
    /// Optimistic tabular RL through a frozen decoder; writes the per-episode log as CSV.
    Rl {
        /// Decoder JSON from train-rep.
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        budget: usize,
        #[arg(long, default_value_t = 1.0)]
        bonus_scale: f64,
        #[arg(long, default_value = "exact")]
        eval: EvalMode,
    },
    /// Brute-force suboptimality over every step-1 decoder of the hard family.
    BruteLower {
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        cells: usize,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        p: f64,
    },
    /// Run a named experiment suite and write its report directory.
    Suite { name: Option<String> },
}

fn load_env(config: Option<&Path>) -> Result<EnvInstance> {
    let path = config.ok_or_else(|| Error::InvalidParameter("--config <env.toml> is required".into()))?;
    let cfg: EnvConfig = toml::from_str(&fs::read_to_string(path)?)?;
    cfg.build()
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::GenData { episodes, kind, k_mode } => {
            let inst = load_env(cli.config.as_deref())?;
            let w = writer(out)?;
            match kind {
                DataKind::Video => write_video(&collect_video(&inst.spec, &inst.data_mixture, episodes, cli.seed)?, k_mode, w)?,
                DataKind::Trajectory => write_trajectories(&collect_trajectories(&inst.spec, &inst.data_mixture, episodes, cli.seed)?, k_mode, w)?,
            }
        }
        Command::TrainRep { data, objective, k_mode, negatives, max_cells, population } => {
            let inst = load_env(cli.config.as_deref())?;
            let class = partition_class(&inst, max_cells);
            let learned = if population {
                let model = ExactModel::new(&inst.spec, &inst.data_mixture)?;
                let opts = PopulationOptions { k_mode, negatives, forward_head: ForwardHeadKind::Factored };
                erm_population(&class, &model, objective, &opts)?
            } else {
                let path = data.ok_or_else(|| Error::InvalidParameter("--data is required without --population".into()))?;
                let (_, ds) = read_dataset(BufReader::new(File::open(path)?))?;
                let (video, traj) = match &ds {
                    Ok(t) => (&t.video, Some(t)),
                    Err(v) => (v, None),
                };
                match objective {
                    Objective::Forward => erm_forward(&class, &multistep_per_episode(video, k_mode, cli.seed)?, ForwardHeadKind::Factored)?,
                    Objective::Contrastive => erm_contrastive(&class, &build_contrastive(video, k_mode, negatives, cli.seed)?)?,
                    Objective::Autoencoder => erm_autoencoder(&class, video)?,
                    Objective::Acro => {
                        let traj = traj.ok_or(Error::MissingActions)?;
                        erm_acro(&class, TrainingData::Labeled(&labeled_per_episode(traj, k_mode, cli.seed)?))?
                    }
                }
            };
            println!(
                "{}",
                serde_json::json!({
                    "objective": objective.name(),
                    "decoder": learned.decoder.name,
                    "decoder_index": learned.decoder_index,
                    "class_size": class.len(),
                    "loss": learned.empirical_loss,
                    "tie": learned.tie,
                })
            );
            if let Some(p) = out {
                fs::write(p, serde_json::to_string_pretty(&learned.decoder)?)?;
            }
        }
        Command::Margins => {
            let inst = load_env(cli.config.as_deref())?;
            let m = ExactModel::new(&inst.spec, &inst.data_mixture)?.margins();
            let check = check_margin_relations(&m);
            let report = serde_json::json!({ "margins": m, "relations": check });
            writeln!(writer(out)?, "{}", serde_json::to_string_pretty(&report)?)?;
        }
        Command::Rl { decoder, budget, bonus_scale, eval } => {
            let inst = load_env(cli.config.as_deref())?;
            let dec: Decoder = serde_json::from_str(&fs::read_to_string(decoder)?)?;
            let cfg = RlConfig { budget, bonus_scale, ..Default::default() };
            let outcome = tabular_rl(&AbstractMdpView::new(&inst.spec, &dec), &cfg, cli.seed)?;
            if let Some(p) = out {
                let mut w = csv::Writer::from_path(p)?;
                for row in &outcome.log {
                    w.serialize(row)?;
                }
                w.flush()?;
            }
            let value = evaluate_policy(&inst.spec, &Policy::AbstractComposed(outcome.policy(&dec)), eval, cli.seed)?;
            let (v_star, _) = optimal_value(&inst.spec);
            println!(
                "{}",
                serde_json::json!({ "episodes": outcome.episodes_used, "value": value.value, "radius": value.radius, "v_star": v_star, "eval": eval.to_string() })
            );
        }
        Command::BruteLower { d, cells, p } => {
            let rep = lower_bound_bruteforce(d, p, cells)?;
            writeln!(writer(out)?, "{}", serde_json::to_string_pretty(&rep)?)?;
        }
        Command::Suite { name } => {
            let mut cfg = match (&cli.config, &name) {
                (Some(path), _) => ExperimentConfig::from_toml(&fs::read_to_string(path)?)?,
                (None, Some(n)) => ExperimentConfig::preset(n)?,
                (None, None) => return Err(Error::InvalidParameter("give a suite name or --config".into())),
            };
            if let Some(n) = &name {
                if *n != cfg.suite {
                    return Err(Error::InvalidParameter(format!("config is for suite `{}`, not `{n}`", cfg.suite)));
                }
            }
            if let Some(p) = out {
                cfg.out_dir = Some(p.display().to_string());
            }
            let report = run_suite(&cfg)?;
            let dir = write_report(&report, Path::new(cfg.out_dir.as_deref().unwrap_or("runs")))?;
            for c in &report.criteria {
                println!("{} criterion {}: {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.criterion, c.name, c.detail);
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
