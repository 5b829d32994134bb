//! Command-line surface tying the pipeline together:
//! `pretrain | refine | sample | eval | gradcheck`.

pub mod commands;
pub mod config;
pub mod eval;
pub mod output;
pub mod svg;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Ctx;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "epoflow",
    about = "Flow-matching lab: pretrain on biased samples of an analytic \
             energy landscape, refine online with SDE sampling and listwise \
             energy-preference losses, evaluate against Boltzmann ground truth."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Flow-matching pretraining: dataset -> checkpoint + loss trace.
    Pretrain(PretrainArgs),
    /// Online preference refinement of a pretrained checkpoint.
    Refine(RefineArgs),
    /// Draw samples from a checkpoint into a CSV.
    Sample(SampleArgs),
    /// Distributional metrics against a reference ensemble.
    Eval(EvalArgs),
    /// Finite-difference verification of every loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace the config potential with a named preset.
    #[arg(long)]
    pub potential: Option<String>,
}

#[derive(Copy, Clone, ValueEnum)]
pub enum MethodFlag {
    #[value(name = "epo-list")]
    EpoList,
    #[value(name = "epo-pair")]
    EpoPair,
    #[value(name = "flowdpo")]
    FlowDpo,
}

impl From<MethodFlag> for epoflow::refine::RefineMethod {
    fn from(m: MethodFlag) -> Self {
        match m {
            MethodFlag::EpoList => epoflow::refine::RefineMethod::EpoList,
            MethodFlag::EpoPair => epoflow::refine::RefineMethod::EpoPair,
            MethodFlag::FlowDpo => epoflow::refine::RefineMethod::FlowDpo,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
pub enum SamplerFlag {
    #[value(name = "ode-euler")]
    OdeEuler,
    #[value(name = "ode-heun")]
    OdeHeun,
    #[value(name = "sde")]
    Sde,
}

impl From<SamplerFlag> for epoflow::sampler::Method {
    fn from(m: SamplerFlag) -> Self {
        match m {
            SamplerFlag::OdeEuler => epoflow::sampler::Method::OdeEuler,
            SamplerFlag::OdeHeun => epoflow::sampler::Method::OdeHeun,
            SamplerFlag::Sde => epoflow::sampler::Method::Sde,
        }
    }
}

/// Sampler overrides shared by several commands.
#[derive(Args)]
pub struct SamplerOverrides {
    /// Integration method.
    #[arg(long)]
    pub sampler: Option<SamplerFlag>,
    /// Number of integration steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// SDE score norm w.
    #[arg(long = "score-norm")]
    pub score_norm: Option<f64>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Pretrained (or partially refined) checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Preference loss driving the update.
    #[arg(long)]
    pub method: Option<MethodFlag>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Preference beta.
    #[arg(long)]
    pub beta: Option<f64>,
    /// List size K.
    #[arg(long)]
    pub k: Option<usize>,
    /// Adapter learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
}

#[derive(Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Evaluate an existing samples CSV.
    #[arg(long, conflicts_with = "checkpoint")]
    pub samples: Option<PathBuf>,
    /// Or draw fresh samples from a checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Sample count when drawing from a checkpoint.
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    /// Reference ensemble CSV (defaults to the config's reference).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Comma-separated metric list (jsd,w2,w2-gauss,modes,fes,tica).
    #[arg(long)]
    pub metrics: Option<String>,
    #[command(flatten)]
    pub sampler: SamplerOverrides,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random configurations per loss.
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    /// Test fixture: corrupt one loss's analytic gradient.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

fn load_ctx(common: &CommonArgs, sampler: Option<&SamplerOverrides>) -> Result<Ctx> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &common.potential {
        cfg.potential = config::potential_preset(name)?;
        cfg.metrics.bounds = None;
    }
    if let Some(s) = sampler {
        if let Some(m) = s.sampler {
            cfg.sampler.method = m.into();
        }
        if let Some(steps) = s.steps {
            cfg.sampler.steps = steps;
        }
        if let Some(w) = s.score_norm {
            cfg.sampler.score_norm = w;
        }
    }
    cfg.validate()?;
    let out_dir = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(Ctx::new(cfg, out_dir))
}

/// Dispatch a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain(args) => {
            let mut ctx = load_ctx(&args.common, None)?;
            if let Some(epochs) = args.epochs {
                ctx.config.pretrain.epochs = epochs;
                ctx = Ctx::new(ctx.config, ctx.out_dir);
            }
            commands::cmd_pretrain(&ctx)?;
            Ok(0)
        }
        Command::Refine(args) => {
            let mut ctx = load_ctx(&args.common, Some(&args.sampler))?;
            if let Some(m) = args.method {
                ctx.config.refine.method = m.into();
            }
            if let Some(it) = args.iterations {
                ctx.config.refine.iterations = it;
            }
            if let Some(beta) = args.beta {
                ctx.config.preference.beta = beta;
            }
            if let Some(k) = args.k {
                ctx.config.preference.k = k;
            }
            if let Some(lr) = args.lr {
                ctx.config.refine.lr = lr;
            }
            ctx.config.validate()?;
            let ctx = Ctx::new(ctx.config, ctx.out_dir);
            commands::cmd_refine(&ctx, &args.checkpoint)?;
            Ok(0)
        }
        Command::Sample(args) => {
            let ctx = load_ctx(&args.common, Some(&args.sampler))?;
            commands::cmd_sample(&ctx, &args.checkpoint, args.n)?;
            Ok(0)
        }
        Command::Eval(args) => {
            let ctx = load_ctx(&args.common, Some(&args.sampler))?;
            let input = match (&args.samples, &args.checkpoint) {
                (Some(csv), None) => eval::SamplesInput::Csv(csv.clone()),
                (None, Some(ckpt)) => eval::SamplesInput::Checkpoint {
                    path: ckpt.clone(),
                    n: args.n,
                },
                _ => bail!("eval needs exactly one of --samples or --checkpoint"),
            };
            eval::cmd_eval(&ctx, input, args.reference.as_deref(), args.metrics.as_deref())?;
            Ok(0)
        }
        Command::Gradcheck(args) => {
            let ok = commands::cmd_gradcheck(args.seed, args.configs, args.corrupt)?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}
