use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use wmlab::attacks::AttackLr;
use wmlab::harness::commands::{self, CommandReport};
use wmlab::harness::config::{LabelKind, StrategyKind, TriggerKind};
use wmlab::harness::{run_pipeline, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "wmlab", version, about = "Backdoor watermark experiments at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; artifacts go to <out>/<run name>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run name (the artifact subdirectory).
    #[arg(long, global = true)]
    name: Option<String>,
    #[arg(long, global = true, value_parser = parse_lr)]
    lr: Option<AttackLr>,
    #[arg(long, global = true, value_parser = parse_trigger)]
    trigger: Option<TriggerKind>,
    #[arg(long, global = true, value_parser = parse_labels)]
    labels: Option<LabelKind>,
    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<StrategyKind>,
    /// Print command results as JSON.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Every enabled stage in order, writing the full artifact tree.
    Run,
    /// Train the clean reference model.
    Pretrain,
    /// Build the trigger set (FGSM needs `pretrain` first).
    MakeTriggers,
    /// Train a watermarked model with the stored trigger set.
    Embed,
    /// Fine-tune the watermarked model (all configured rates unless --lr).
    AttackFinetune,
    /// Extract a surrogate from the watermarked model, then retrain it.
    AttackExtract,
    /// Retrain a fine-tuned model on the original clean data.
    Restore,
    /// Fine-tune with original training batches interleaved.
    BlendFinetune,
    /// Trigger-loss surface with the fine-tune and retrain trajectory.
    Landscape,
    /// Ownership test for a stored checkpoint.
    Verify {
        /// Checkpoint tag (e.g. retrain-small) or path to a .wmlb file.
        #[arg(long, default_value = "watermarked")]
        model: String,
    },
    /// Markdown summary of every completed run under a directory.
    Report {
        /// Directory to scan; defaults to the output root.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Full pipelines over a grid of seeds, triggers, labelings and strategies.
    Sweep(SweepArgs),
    /// Print the default config as TOML.
    DefaultConfig,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_trigger)]
    triggers: Vec<TriggerKind>,
    #[arg(long = "labelings", value_delimiter = ',', value_parser = parse_labels)]
    labelings: Vec<LabelKind>,
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategies: Vec<StrategyKind>,
    /// Parallel runs; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

fn parse_lr(s: &str) -> Result<AttackLr, String> {
    AttackLr::parse(s).ok_or_else(|| format!("unknown lr {s:?} (small|med|big)"))
}

fn parse_trigger(s: &str) -> Result<TriggerKind, String> {
    TriggerKind::parse(s).ok_or_else(|| format!("unknown trigger {s:?} (noise|content|unrelated|fgsm)"))
}

fn parse_labels(s: &str) -> Result<LabelKind, String> {
    LabelKind::parse(s).ok_or_else(|| format!("unknown labeling {s:?} (single|multi)"))
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    StrategyKind::parse(s).ok_or_else(|| format!("unknown strategy {s:?} (joint|rotation|smoothed)"))
}

fn build_config(c: &Common, for_run: bool) -> wmlab::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.run.out_dir = o.clone();
    }
    if let Some(n) = &c.name {
        cfg.run.name = n.clone();
    }
    if let Some(t) = c.trigger {
        cfg.triggers.kind = t;
    }
    if let Some(l) = c.labels {
        cfg.triggers.labels = l;
    }
    if let Some(s) = c.strategy {
        cfg.embed.strategy = s;
    }
    if let Some(lr) = c.lr {
        cfg.blend.lr = lr;
        cfg.landscape.attack_lr = lr;
        if for_run {
            cfg.attack.lrs = vec![lr];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(rep: &CommandReport, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(rep).expect("report serializes"));
        return;
    }
    println!("[{}]", rep.command);
    for p in &rep.written {
        println!("  wrote {}", p.display());
    }
    if let Some(v) = &rep.verify {
        println!("  {}: {}", v.model, commands::describe(&v.result));
    }
    if let Some(n) = &rep.note {
        println!("  {n}");
    }
}

fn lrs(cfg: &ExperimentConfig, c: &Common) -> Vec<AttackLr> {
    c.lr.map(|l| vec![l]).unwrap_or_else(|| cfg.attack.lrs.clone())
}

fn or_default<T: Copy>(v: &[T], d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v.to_vec()
    }
}

fn sweep(base: &ExperimentConfig, args: &SweepArgs) -> wmlab::Result<()> {
    let triggers = or_default(&args.triggers, base.triggers.kind);
    let labelings = or_default(&args.labelings, base.triggers.labels);
    let strategies = or_default(&args.strategies, base.embed.strategy);
    let mut cfgs = Vec::new();
    for &seed in &args.seeds {
        for &t in &triggers {
            for &l in &labelings {
                for &s in &strategies {
                    let mut cfg = base.clone();
                    cfg.run.seed = seed;
                    cfg.triggers.kind = t;
                    cfg.triggers.labels = l;
                    cfg.embed.strategy = s;
                    cfg.run.name = format!(
                        "{}-{}-{}-{}-s{seed}",
                        base.run.name,
                        cfg.embed.strategy().name(),
                        t.name(),
                        cfg.triggers.scheme().name()
                    );
                    cfg.validate()?;
                    cfgs.push(cfg);
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| wmlab::Error::Config(e.to_string()))?;
    log::info!("sweep of {} runs", cfgs.len());
    let results: Vec<(String, wmlab::Result<()>)> = pool.install(|| {
        cfgs.par_iter()
            .map(|c| (c.run.name.clone(), run_pipeline(c, true).map(|_| ())))
            .collect()
    });
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(()) => println!("done {name}"),
            Err(e) => {
                failed += 1;
                eprintln!("failed {name}: {e}");
            }
        }
    }
    println!("{}", commands::report(&base.run.out_dir)?);
    if failed > 0 {
        return Err(wmlab::Error::Config(format!("{failed} of {} sweep runs failed", results.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> wmlab::Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
        }
        Command::Run => {
            let cfg = build_config(c, true)?;
            let out = run_pipeline(&cfg, true)?;
            println!("wrote {}", cfg.run_dir().display());
            for v in &out.verify {
                println!("  {}: {}", v.model, commands::describe(&v.result));
            }
        }
        Command::Pretrain => print_report(&commands::pretrain(&build_config(c, false)?)?, c.json),
        Command::MakeTriggers => print_report(&commands::make_triggers(&build_config(c, false)?)?, c.json),
        Command::Embed => print_report(&commands::embed(&build_config(c, false)?)?, c.json),
        Command::AttackFinetune => {
            let cfg = build_config(c, false)?;
            for lr in lrs(&cfg, c) {
                print_report(&commands::attack_finetune(&cfg, lr)?, c.json);
            }
        }
        Command::Restore => {
            let cfg = build_config(c, false)?;
            for lr in lrs(&cfg, c) {
                print_report(&commands::restore(&cfg, lr)?, c.json);
            }
        }
        Command::AttackExtract => print_report(&commands::attack_extract(&build_config(c, false)?)?, c.json),
        Command::BlendFinetune => print_report(&commands::blend_finetune(&build_config(c, false)?)?, c.json),
        Command::Landscape => {
            let cfg = build_config(c, false)?;
            print_report(&commands::landscape(&cfg, cfg.landscape.attack_lr)?, c.json);
        }
        Command::Verify { model } => print_report(&commands::verify(&build_config(c, false)?, model)?, c.json),
        Command::Report { runs } => {
            let root = match runs {
                Some(r) => r.clone(),
                None => build_config(c, false)?.run.out_dir,
            };
            print!("{}", commands::report(&root)?);
        }
        Command::Sweep(args) => sweep(&build_config(c, true)?, args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
