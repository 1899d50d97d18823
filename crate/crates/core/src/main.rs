use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fmrivid::pipeline::ablation::{default_axes, parse_axes};
use fmrivid::pipeline::{ablation_suite, GuidanceMode, Outcome, Run, RunConfig, Stage};
use fmrivid::Error;

#[derive(Parser, Debug)]
#[command(name = "fmrivid", version, about = "Staged fMRI-to-video reconstruction pipeline on synthetic data")]
struct Cli {
    /// Flat key = value config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile the config file is applied over.
    #[arg(long, value_enum, default_value_t = Profile::Default)]
    profile: Profile,
    #[arg(long, default_value = "runs/default")]
    run_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run missing prerequisite stages first instead of failing.
    #[arg(long)]
    resume: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Default,
    Quick,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Negative {
    /// Averaged fMRI embedding as the negative condition.
    AvgFmri,
    /// Null negative condition (classifier-free guidance).
    Null,
}

#[derive(Subcommand, Debug)]
enum Command {
    GenData,
    Pretrain,
    Contrastive,
    TrainGen,
    Cotrain,
    Sample {
        /// DDIM steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance_scale: Option<f64>,
        #[arg(long, value_enum)]
        negative: Option<Negative>,
        /// Seed of the sampler's start noise.
        #[arg(long)]
        seed: Option<u64>,
    },
    Evaluate,
    Interpret,
    /// Single-axis ablations, e.g. `window=1,3;contrastive=off`.
    Ablate {
        #[arg(long)]
        axes: Option<String>,
    },
    Report,
}

fn resolve(cli: &Cli) -> fmrivid::Result<RunConfig> {
    let base = match cli.profile {
        Profile::Default => RunConfig::default(),
        Profile::Quick => RunConfig::quick(),
    };
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse_over(base, &text)?
        }
        None => base,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Command::Sample {
        steps,
        guidance_scale,
        negative,
        seed,
    } = &cli.command
    {
        if let Some(s) = steps {
            cfg.ddim_steps = *s;
        }
        if let Some(s) = guidance_scale {
            cfg.guidance_scale = *s;
        }
        if let Some(n) = negative {
            cfg.guidance = match n {
                Negative::AvgFmri => GuidanceMode::Adversarial,
                Negative::Null => GuidanceMode::ClassifierFree,
            };
        }
        if let Some(s) = seed {
            cfg.sample_seed = *s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::GenData => Stage::GenData,
        Command::Pretrain => Stage::Pretrain,
        Command::Contrastive => Stage::Contrastive,
        Command::TrainGen => Stage::TrainGen,
        Command::Cotrain => Stage::Cotrain,
        Command::Sample { .. } => Stage::Sample,
        Command::Evaluate => Stage::Evaluate,
        Command::Interpret => Stage::Interpret,
        Command::Report => Stage::Report,
        Command::Ablate { .. } => return None,
    })
}

fn run(cli: &Cli) -> fmrivid::Result<()> {
    let cfg = resolve(cli)?;
    let mut run = Run::open(&cli.run_dir, cfg)?;
    match &cli.command {
        Command::Ablate { axes } => {
            let axes = match axes {
                Some(s) => parse_axes(s)?,
                None => default_axes(),
            };
            let result = ablation_suite(&mut run, &axes, |line| println!("{line}"))?;
            for r in result.rows.iter().filter(|r| r.metric == "identification") {
                println!("{:<28} identification {:.4} ± {:.4}  p={:.3e} ({})", r.variant, r.mean, r.std, r.p, r.band);
            }
            println!("wrote {}", run.path("ablation.csv").display());
        }
        c => {
            let stage = stage_of(c).expect("single-run stage");
            let before: Vec<Stage> = run.manifest.stages.keys().copied().collect();
            let outcome = run.run_stage(stage, cli.resume)?;
            for s in run.manifest.stages.keys().filter(|s| !before.contains(s) && **s != stage) {
                println!("{s}: ran as a prerequisite");
            }
            let secs = run.manifest.stages.get(&stage).map_or(0.0, |r| r.seconds);
            match outcome {
                Outcome::Ran => println!("{stage}: done in {secs:.1} s"),
                Outcome::Skipped => println!("{stage}: already complete, nothing to do"),
                Outcome::Reused => println!("{stage}: reused from another run"),
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Prerequisite { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
