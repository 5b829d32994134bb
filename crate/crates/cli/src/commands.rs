//! The pretrain / refine / sample / gradcheck commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use epoflow::checkpoint::Checkpoint;
use epoflow::diffcore::AdamParams;
use epoflow::energy::{mh_sample, Potential};
use epoflow::flowmodel::{pretrain, ModelConfig, PretrainConfig, VelocityModel};
use epoflow::refine::{init_refinement, refine_run, EvalSpec, RefineConfig};
use epoflow::sampler::generate_ensemble;
use epoflow::seed;
use epoflow::metrics;

use crate::config::{DataSource, MhParams, RunConfig};
use crate::output::{self, Timing};
use crate::svg;

const TAG_DATA: u64 = 0x44;
const TAG_MODEL: u64 = 0x4d;
const TAG_TRAIN: u64 = 0x54;
const TAG_REFERENCE: u64 = 0x52;

/// Effective run context shared by the commands.
pub struct Ctx {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

impl Ctx {
    pub fn new(config: RunConfig, out_dir: PathBuf) -> Ctx {
        let config_hash = config.hash();
        Ctx {
            config,
            out_dir,
            config_hash,
        }
    }
}

#[derive(Serialize)]
pub struct DatasetMeta {
    pub kind: &'static str,
    pub n: usize,
    pub mode_masses: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct PretrainMeta<'a> {
    effective_config: &'a RunConfig,
    config_hash: &'a str,
    dataset: DatasetMeta,
    steps: usize,
    final_loss: Option<f64>,
}

fn mh_dataset(p: &Potential, mh: &MhParams, chain_seed: u64) -> Result<Vec<Vec<f64>>> {
    Ok(mh_sample(p, mh.n, mh.step, mh.burn_in, mh.thinning, chain_seed)?)
}

/// Build the pretraining dataset and its sidecar metadata.
pub fn build_dataset(cfg: &RunConfig) -> Result<(Vec<Vec<f64>>, DatasetMeta)> {
    let chain_seed = seed::mix(cfg.seed, &[TAG_DATA]);
    match &cfg.pretrain.source {
        DataSource::MhOracle { mh } => {
            let data = mh_dataset(&cfg.potential, mh, chain_seed)?;
            let masses = cfg
                .metrics
                .partition
                .as_ref()
                .and_then(|p| metrics::mode_masses(&data, p).ok());
            let n = data.len();
            Ok((
                data,
                DatasetMeta {
                    kind: "mh-oracle",
                    n,
                    mode_masses: masses,
                },
            ))
        }
        DataSource::BiasedWells {
            n,
            boundary,
            left_fraction,
            mh,
        } => {
            if !(0.0..=1.0).contains(left_fraction) {
                bail!("left_fraction must lie in [0, 1], got {left_fraction}");
            }
            let chain = mh_dataset(&cfg.potential, mh, chain_seed)?;
            let (left, right): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
                chain.into_iter().partition(|s| s[0] < *boundary);
            let n_left = (left_fraction * *n as f64).round() as usize;
            let n_right = n - n_left;
            if left.len() < n_left || right.len() < n_right {
                bail!(
                    "biased-wells: oracle chain yields {} left / {} right states, \
                     need {n_left} / {n_right}; raise mh.n",
                    left.len(),
                    right.len()
                );
            }
            let mut data: Vec<Vec<f64>> = Vec::with_capacity(*n);
            data.extend_from_slice(&left[..n_left]);
            data.extend_from_slice(&right[..n_right]);
            let masses = metrics::mode_masses(&data, &[vec![*boundary]]).ok();
            Ok((
                data,
                DatasetMeta {
                    kind: "biased-wells",
                    n: *n,
                    mode_masses: masses,
                },
            ))
        }
        DataSource::Csv { path } => {
            let data = output::read_samples_csv(path)?;
            if data.is_empty() {
                bail!("dataset CSV {} holds no samples", path.display());
            }
            if data[0].len() != cfg.potential.dim() {
                bail!(
                    "dataset CSV has d={}, potential has d={}",
                    data[0].len(),
                    cfg.potential.dim()
                );
            }
            let n = data.len();
            Ok((
                data,
                DatasetMeta {
                    kind: "csv",
                    n,
                    mode_masses: None,
                },
            ))
        }
    }
}

/// Fresh model matching the potential.
pub fn build_model(cfg: &RunConfig) -> Result<VelocityModel> {
    let mc = ModelConfig {
        dim: cfg.potential.dim(),
        hidden: cfg.model.hidden.clone(),
        time_features: cfg.model.time_features,
        periodic: cfg.potential.is_periodic(),
        conditioning: cfg.model.conditioning.clone(),
    };
    Ok(VelocityModel::new(&mc, seed::mix(cfg.seed, &[TAG_MODEL]))?)
}

pub fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    let (data, dataset_meta) = build_dataset(cfg)?;
    let mut model = build_model(cfg)?;
    let train_cfg = PretrainConfig {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        optimizer: AdamParams::with_lr(cfg.pretrain.lr),
        lr_schedule: cfg.pretrain.lr_schedule,
        time_clamp: cfg.sampler.time_clamp,
        seed: seed::mix(cfg.seed, &[TAG_TRAIN]),
    };
    let trace = pretrain(&mut model, &data, cfg.schedule, &train_cfg)?;
    let steps = trace.len();

    let ckpt = Checkpoint::new(
        model,
        cfg.schedule,
        steps as u64,
        cfg.seed,
        ctx.config_hash.clone(),
        None,
    );
    ckpt.save(&ctx.out_dir.join("checkpoint.json"))?;
    output::write_text(
        &ctx.out_dir.join("pretrain_trace.csv"),
        &output::trace_to_csv(&trace),
    )?;
    if !trace.is_empty() {
        let xs: Vec<f64> = (0..trace.len()).map(|i| i as f64).collect();
        output::write_text(
            &ctx.out_dir.join("pretrain_trace.svg"),
            &svg::line_plot("flow-matching loss", &xs, &[("loss", &trace)]),
        )?;
    }
    output::write_json(
        &ctx.out_dir.join("pretrain_meta.json"),
        &PretrainMeta {
            effective_config: cfg,
            config_hash: &ctx.config_hash,
            final_loss: trace.last().copied(),
            steps,
            dataset: dataset_meta,
        },
    )?;
    log::info!(
        "pretrained {} steps; checkpoint at {}",
        steps,
        ctx.out_dir.join("checkpoint.json").display()
    );
    Ok(())
}

/// Assemble the core refine config from the sections.
pub fn refine_config(cfg: &RunConfig) -> RefineConfig {
    let eval = cfg.metrics.partition.as_ref().map(|partition| EvalSpec {
        bounds: cfg.metric_bounds(),
        bins: cfg.metric_bins(),
        partition: partition.clone(),
    });
    RefineConfig {
        method: cfg.refine.method,
        preference: cfg.preference,
        sampler: cfg.sampler,
        iterations: cfg.refine.iterations,
        lists_per_iter: cfg.refine.lists_per_iter,
        optimizer: AdamParams::with_lr(cfg.refine.lr),
        lora_rank: cfg.refine.lora_rank,
        lora_scale: cfg.refine.lora_scale,
        eval_every: cfg.refine.eval_every,
        eval_samples: cfg.refine.eval_samples,
        eval,
        checkpoint_every: cfg.refine.checkpoint_every,
        seed: cfg.seed,
    }
}

#[derive(Serialize)]
struct RefineMeta<'a> {
    effective_config: &'a RunConfig,
    config_hash: &'a str,
    input_checkpoint: String,
    resumed_from_step: u64,
}

pub fn cmd_refine(ctx: &Ctx, checkpoint_path: &Path) -> Result<()> {
    let cfg = &ctx.config;
    let ckpt = Checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    if ckpt.model.dim() != cfg.potential.dim() {
        bail!(
            "checkpoint model d={} does not match potential d={}",
            ckpt.model.dim(),
            cfg.potential.dim()
        );
    }
    if ckpt.schedule != cfg.schedule {
        bail!(
            "checkpoint schedule {:?} does not match config schedule {:?}",
            ckpt.schedule,
            cfg.schedule
        );
    }
    let rcfg = refine_config(cfg);
    // A checkpoint that already carries adapters resumes at its step.
    let (completed, adam) = if ckpt.model.has_adapters() {
        (ckpt.step, ckpt.optimizer.clone())
    } else {
        (0, None)
    };
    let mut refinement = init_refinement(&ckpt.model, &rcfg, completed, adam)?;
    let t0 = Instant::now();
    let out_dir = ctx.out_dir.clone();
    let hash = ctx.config_hash.clone();
    let schedule = cfg.schedule;
    let run_seed = cfg.seed;
    let log = refine_run(
        &mut refinement,
        &cfg.potential,
        &rcfg,
        schedule,
        &ctx.config_hash,
        |r| {
            let c = Checkpoint::new(
                r.pair.opt().clone(),
                schedule,
                r.completed,
                run_seed,
                hash.clone(),
                Some(r.adam.clone()),
            );
            c.save(&out_dir.join(format!("checkpoint_iter{:06}.json", r.completed)))
                .map_err(|e| std::io::Error::other(e.to_string()))
        },
    )?;
    let wall = t0.elapsed().as_secs_f64();

    let final_ckpt = Checkpoint::new(
        refinement.pair.opt().clone(),
        schedule,
        refinement.completed,
        cfg.seed,
        ctx.config_hash.clone(),
        Some(refinement.adam.clone()),
    );
    final_ckpt.save(&ctx.out_dir.join("refined.json"))?;
    output::write_json(&ctx.out_dir.join("runlog.json"), &log)?;
    output::write_json(
        &ctx.out_dir.join("timing.json"),
        &Timing {
            wall_clock_seconds: wall,
        },
    )?;
    output::write_json(
        &ctx.out_dir.join("refine_meta.json"),
        &RefineMeta {
            effective_config: cfg,
            config_hash: &ctx.config_hash,
            input_checkpoint: checkpoint_path.display().to_string(),
            resumed_from_step: completed,
        },
    )?;
    if !log.records.is_empty() {
        let xs: Vec<f64> = log.records.iter().map(|r| r.iteration as f64).collect();
        let losses: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
        let means: Vec<f64> = log.records.iter().map(|r| r.energy_mean).collect();
        output::write_text(
            &ctx.out_dir.join("refine_trace.svg"),
            &svg::line_plot(
                "refinement",
                &xs,
                &[("loss", &losses), ("mean energy", &means)],
            ),
        )?;
    }
    log::info!(
        "refined to iteration {} ({} new); wall clock {wall:.1}s",
        refinement.completed,
        log.records.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    effective_config: &'a RunConfig,
    config_hash: &'a str,
    checkpoint: String,
    n: usize,
    seed: u64,
}

pub fn cmd_sample(ctx: &Ctx, checkpoint_path: &Path, n: usize) -> Result<()> {
    let cfg = &ctx.config;
    let ckpt = Checkpoint::load(checkpoint_path)
        .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
    let sampler_cfg = epoflow::sampler::SamplerConfig {
        seed: cfg.seed,
        ..cfg.sampler
    };
    let samples = if n == 0 {
        Vec::new()
    } else {
        generate_ensemble(&ckpt.model, n, &sampler_cfg, ckpt.schedule)?
    };
    output::write_samples_csv(&ctx.out_dir.join("samples.csv"), &samples, ckpt.model.dim())?;
    output::write_json(
        &ctx.out_dir.join("samples_meta.json"),
        &SampleMeta {
            effective_config: cfg,
            config_hash: &ctx.config_hash,
            checkpoint: checkpoint_path.display().to_string(),
            n,
            seed: cfg.seed,
        },
    )?;
    log::info!("wrote {} samples", samples.len());
    Ok(())
}

/// Reference ensemble for evaluation commands.
pub fn reference_samples(cfg: &RunConfig) -> Result<(Vec<Vec<f64>>, String)> {
    match &cfg.metrics.reference {
        crate::config::RefSource::MhOracle { mh } => {
            let chain_seed = seed::mix(cfg.seed, &[TAG_REFERENCE]);
            Ok((mh_dataset(&cfg.potential, mh, chain_seed)?, "mh-oracle".into()))
        }
        crate::config::RefSource::Csv { path } => Ok((
            output::read_samples_csv(path)?,
            path.display().to_string(),
        )),
    }
}

pub fn cmd_gradcheck(seed: u64, configs: usize, corrupt: Option<String>) -> Result<bool> {
    let cfg = epoflow::gradcheck::GradCheckConfig {
        seed,
        configs_per_loss: configs,
        corrupt,
        ..epoflow::gradcheck::GradCheckConfig::default()
    };
    let t0 = Instant::now();
    let rows = epoflow::gradcheck::run(&cfg);
    let elapsed = t0.elapsed().as_secs_f64();
    println!("{:<16} {:>8} {:>14}  {}", "loss", "configs", "max rel err", "status");
    for r in &rows {
        println!(
            "{:<16} {:>8} {:>14.3e}  {}",
            r.loss,
            r.configs,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!("({} configurations per loss, {elapsed:.1}s)", cfg.configs_per_loss);
    Ok(epoflow::gradcheck::all_pass(&rows))
}
