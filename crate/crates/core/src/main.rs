use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gamma_ddpg::approximator::Mlp;
use gamma_ddpg::divergence::{DiscountConfig, Variant};
use gamma_ddpg::harness::{
    episode_mean_acc, evaluate, load_or_pretrain_codec, pretrain_codec, read_metrics, sliding_window_max, sweep_fixed,
    train, Aggregation, Alternative, AttackSetup, Criterion, EvalReport, ExperimentConfig, StrategyArchive,
    DEFAULT_SWEEP,
};
use gamma_ddpg::Result;

#[derive(Parser)]
#[command(name = "gamma-ddpg", version, about = "Training-time environment poisoning with a dynamic-discount DDPG attacker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; unset fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// wd, klr, targetwd, targetklr or fixed:<gamma>
    #[arg(long)]
    discount: Option<Variant>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Codec directory, loaded if present and written otherwise.
    #[arg(long)]
    codec: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the trace corpus and pretrain the behaviour codec.
    PretrainCodec(Common),
    /// Train an attacker.
    Train(Common),
    /// Train one attacker per fixed discount.
    SweepFixed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Replay a trained actor noiselessly against fresh victims.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Actor weights; defaults to the run's best mean-@Acc snapshot.
        #[arg(long)]
        actor: Option<PathBuf>,
    },
    /// Summarise metrics and compare evaluations.
    Analyze {
        #[arg(long)]
        out: PathBuf,
        /// metrics.csv files to summarise.
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value_t = 75)]
        window: usize,
        /// Two eval.json files; tests whether the first beats the second.
        #[arg(long, num_args = 2)]
        compare: Option<Vec<PathBuf>>,
        #[arg(long, value_enum, default_value = "greater")]
        alternative: AlternativeArg,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AlternativeArg {
    Greater,
    Less,
}

fn resolve(common: &Common, fallback: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(path)) if path.exists() => ExperimentConfig::load(path)?,
        _ => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train_seed = seed;
    }
    if let Some(v) = common.discount {
        cfg.discount = DiscountConfig::new(v);
    }
    if let Some(n) = common.episodes {
        cfg.episodes = n;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(dir) = &common.codec {
        cfg.codec.dir = Some(dir.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainCodec(common) => {
            let mut cfg = resolve(&common, None)?;
            if let Some(seed) = common.seed {
                cfg.codec.seed = seed;
            }
            let (codec, report) = pretrain_codec(&cfg)?;
            codec.save(&cfg.output_dir)?;
            fs::write(cfg.output_dir.join("pretrain_report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "codec saved to {} (train acc {:.3}, held-out acc {:.3})",
                cfg.output_dir.display(),
                report.train_accuracy,
                report.holdout_accuracy
            );
        }
        Command::Train(common) => {
            let cfg = resolve(&common, None)?;
            let codec = load_or_pretrain_codec(&cfg)?;
            let outcome = train(&cfg, &codec, Some(&cfg.output_dir))?;
            let best = outcome.archive.slot(Criterion::Acc, Aggregation::Mean);
            println!(
                "{} episodes, {} updates, best mean @Acc {:.3} (episode {})",
                cfg.episodes,
                outcome.updates,
                best.best.unwrap_or(0.0),
                best.episode.unwrap_or(0)
            );
        }
        Command::SweepFixed { common, gammas } => {
            let cfg = resolve(&common, None)?;
            let codec = load_or_pretrain_codec(&cfg)?;
            let gammas = gammas.unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
            for e in sweep_fixed(&cfg, &gammas, &codec, &cfg.output_dir)? {
                println!("gamma {:.2}: best mean @Acc {:.3}", e.gamma, e.best_mean_acc);
            }
        }
        Command::Evaluate { common, actor } => {
            let run_dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let cfg = resolve(&common, Some(&run_dir.join("config.json")))?;
            let codec = load_or_pretrain_codec(&cfg)?;
            let actor_path = match actor {
                Some(p) => p,
                None => StrategyArchive::saved_actor_path(&run_dir.join("archive"), Criterion::Acc, Aggregation::Mean)?,
            };
            let actor = Mlp::load(&actor_path)?;
            let setup = AttackSetup::new(&cfg, &codec)?;
            let report = evaluate(&setup, &actor)?;
            report.write(&run_dir.join("eval"), &format!("eval-{}", cfg.run_id()))?;
            println!(
                "same-seed final @Acc {:.3}, different-seed final @Acc {:.3}, max effort {:.3}",
                report.same_seed_final_acc, report.different_seed_final_acc, report.max_effort
            );
        }
        Command::Analyze { out, metrics, window, compare, alternative } => {
            fs::create_dir_all(&out)?;
            let mut summary = serde_json::Map::new();
            for path in &metrics {
                let means = episode_mean_acc(&read_metrics(path)?);
                let smoothed = sliding_window_max(&means, window)?;
                let name = path.parent().and_then(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned());
                let name = name.unwrap_or_else(|| path.display().to_string());
                let mut csv = String::from("episode,mean_acc,window_max\n");
                for (i, (m, s)) in means.iter().zip(&smoothed).enumerate() {
                    csv.push_str(&format!("{},{},{}\n", i + 1, m, s));
                }
                fs::write(out.join(format!("{name}_window.csv")), csv)?;
                summary.insert(name, serde_json::json!({ "episodes": means.len(), "final_window_max": smoothed.last() }));
            }
            if let Some(pair) = compare {
                let load = |p: &Path| -> Result<EvalReport> { Ok(serde_json::from_str(&fs::read_to_string(p)?)?) };
                let (a, b) = (load(&pair[0])?, load(&pair[1])?);
                let xs: Vec<f64> = a.traces.iter().map(|t| t.mean_acc()).collect();
                let ys: Vec<f64> = b.traces.iter().map(|t| t.mean_acc()).collect();
                let alt = match alternative {
                    AlternativeArg::Greater => Alternative::Greater,
                    AlternativeArg::Less => Alternative::Less,
                };
                let r = gamma_ddpg::harness::wilcoxon_signed_rank(&xs, &ys, alt)?;
                summary.insert("wilcoxon".into(), serde_json::to_value(r)?);
            }
            let text = serde_json::to_string_pretty(&summary)?;
            fs::write(out.join("analysis.json"), &text)?;
            println!("{text}");
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
