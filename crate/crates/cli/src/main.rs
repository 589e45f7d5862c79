use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use redaug::datagen::BehaviorConfig;
use redaug::dynamics::DynamicsConfig;
use redaug::evalproto::{comparison_table, EvalReport, Protocol};
use redaug::metapolicy::{train_meta_policy, MetaPolicyConfig};
use redaug::orchestrate::{
    build_data, fingerprint, evaluate_run, load_encoder, load_models, load_policy, mark_complete, run_pipeline,
    save_models, save_representation, train_models, train_representation, DataBundle, DataConfig, EvalConfig,
    ExperimentConfig, ReprConfig, ReprSettings, Selection, Variant, SEED_ENV,
};
use redaug::taskrep::EncoderConfig;
use redaug::advpolicy::AdversarialConfig;
use redaug::TaskSet;

#[derive(Parser)]
#[command(name = "redaug", version, about = "Offline meta-RL with adversarial task-representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train behavior policies and collect offline datasets.
    GenData {
        #[arg(long, default_value = "point_mass_2d-gravity")]
        task_set: String,
        #[arg(long, default_value_t = 1)]
        checkpoints: usize,
        #[arg(long, default_value_t = 10_000)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Environment steps of behavior training per task.
        #[arg(long)]
        behavior_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one dynamics ensemble per seen task.
    TrainModels {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        ensemble_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder, alternating with the adversarial policy.
    TrainRepr {
        #[arg(long)]
        data: PathBuf,
        /// Required for every variant except no-model.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        rounds: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda1: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda2: f64,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the context-conditioned policy on frozen embeddings.
    TrainPolicy {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, default_value_t = 2.5)]
        bc_weight: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained policy on every task of a data directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        /// Number of evaluation seeds, counted from 0.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reports from several runs.
    Report {
        /// Report files or directories containing report.json.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Directory for comparison.txt and comparison.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline from one JSON config.
    Run {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// desk, paper, quick or didactic.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.join("COMPLETE").exists() {
        bail!("{} already holds a completed artifact; choose another --out", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_report(path: &Path) -> Result<EvalReport> {
    let file = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    Ok(EvalReport::load(&file)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { task_set, checkpoints, budget, seed, behavior_steps, out } => {
            let task_set: TaskSet = task_set.parse()?;
            let mut behavior = BehaviorConfig::default();
            if let Some(n) = behavior_steps {
                behavior.total_steps = n;
                behavior.checkpoint_interval = (n / 20).max(1);
                behavior.warmup_steps = behavior.warmup_steps.min(n / 4);
            }
            let cfg = DataConfig {
                task_set,
                selection: Selection::Index { n: checkpoints },
                budget,
                behavior,
                seed,
                ..DataConfig::default()
            };
            fresh_dir(&out)?;
            build_data(&cfg, &out.join("behavior-cache"), &out)?;
            mark_complete(&out)?;
            println!("wrote {}", out.display());
        }
        Command::TrainModels { data, ensemble_size, seed, out } => {
            let bundle = DataBundle::load(&data)?;
            let cfg = DynamicsConfig { ensemble_size, ..DynamicsConfig::default() };
            cfg.validate()?;
            fresh_dir(&out)?;
            let ens = train_models(&bundle, &cfg, seed)?;
            save_models(&ens, &cfg.hidden, &out)?;
            mark_complete(&out)?;
            for e in &ens {
                println!("task {}: holdout nll {:?}", e.task_id, e.holdout_nll);
            }
        }
        Command::TrainRepr { data, models, rounds, lambda1, lambda2, variant, seed, out } => {
            let bundle = DataBundle::load(&data)?;
            let variant: Variant = variant.parse()?;
            let mut adversarial = AdversarialConfig::default();
            adversarial.reward.lambda1 = lambda1;
            adversarial.reward.lambda2 = lambda2;
            let settings = ReprSettings {
                encoder: EncoderConfig::default(),
                repr: ReprConfig { rounds, ..ReprConfig::default() },
                adversarial: variant.adjust(&adversarial),
                variant,
            };
            settings.adversarial.validate()?;
            let ens = match (&models, variant.uses_models()) {
                (Some(m), true) => Some(load_models(m)?),
                (None, true) => bail!("--models is required for variant {}", variant.name()),
                (_, false) => None,
            };
            fresh_dir(&out)?;
            let (enc, agent, history) = train_representation(&bundle, ens.as_deref(), &settings, seed)?;
            save_representation(&out, &enc, agent.as_ref(), &history)?;
            mark_complete(&out)?;
            if let Some(l) = history.encoder_loss.last() {
                println!("final encoder loss {l:.4}");
            }
        }
        Command::TrainPolicy { data, encoder, bc_weight, steps, seed, out } => {
            let bundle = DataBundle::load(&data)?;
            let enc = load_encoder(&encoder)?;
            let mut cfg = MetaPolicyConfig { window: enc.config.window, ..MetaPolicyConfig::default() };
            cfg.sac.bc_weight = bc_weight;
            if let Some(n) = steps {
                cfg.steps = n;
            }
            fresh_dir(&out)?;
            let policy = train_meta_policy(&bundle.seen, &enc, &cfg, seed)?;
            policy.save(&out.join("policy"))?;
            std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            mark_complete(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval { data, policy, encoder, protocol, seeds, episodes, out } => {
            let bundle = DataBundle::load(&data)?;
            let enc = load_encoder(&encoder)?;
            let pol = load_policy(&policy)?;
            let protocol = match protocol {
                ProtocolArg::On => Protocol::OnPolicy,
                ProtocolArg::Off => Protocol::OffPolicy,
            };
            let cfg = EvalConfig { episodes, ..EvalConfig::default() };
            let runs = (0..seeds)
                .map(|s| evaluate_run(&bundle, &pol, &enc, &cfg, &[protocol], s, None))
                .collect::<redaug::Result<Vec<_>>>()?;
            let fp = fingerprint(&(protocol.name(), seeds, episodes))?;
            let report = EvalReport::aggregate("eval", &fp, episodes, runs, Vec::new())?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            report.save(&out)?;
            print!("{}", comparison_table(std::slice::from_ref(&report)));
        }
        Command::Report { runs, out } => {
            let reports = runs.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
            let table = comparison_table(&reports);
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("comparison.txt"), &table)?;
                std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&reports)?)?;
            }
        }
        Command::Run { config, preset, output_root } => {
            let mut cfg = match (config, preset) {
                (Some(path), _) => ExperimentConfig::load(&path)?,
                (None, Some(name)) => ExperimentConfig::preset(&name)?,
                (None, None) => ExperimentConfig::desk(),
            };
            if let Some(root) = output_root {
                cfg.output_root = root;
            }
            cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
            let out = run_pipeline(&cfg)?;
            print!("{}", comparison_table(std::slice::from_ref(&out.report)));
            println!("report: {}", out.report_dir.join("report.json").display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
