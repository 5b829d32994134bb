//! The online refinement loop: sample from the current model with the
//! configured sampler, rank the samples by energy, and update the
//! adapters with a preference loss against the frozen reference.
//!
//! Every stochastic draw derives from `(seed, iteration, ...)`, so a
//! run is a pure function of its config and resuming from a checkpoint
//! reproduces the uninterrupted tail exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{AdamParams, AdamState, DiffError, Graph};
use crate::energy::{rank_by_energy, EnergyError, Potential, RankedEnsemble};
use crate::flowmodel::{FlowError, ModelPair, Schedule, Trainable, VelocityModel};
use crate::metrics::{self, HistogramSpec, MetricsError};
use crate::preference::{
    bind_pair, draw_pairs, epo_list_loss_with_pairs, epo_pair_loss_with_pairs,
    flowdpo_pair_loss, PreferenceConfig, PreferenceError,
};
use crate::sampler::{generate_ensemble, Method, SamplerConfig, SamplerError};
use crate::seed;

const TAG_SAMPLING: u64 = 0x5a;
const TAG_COUPLING: u64 = 0x43;
const TAG_EVAL: u64 = 0x45;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },
    #[error("refine config: {0}")]
    BadConfig(String),
    #[error("checkpoint hook: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Which preference loss drives the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefineMethod {
    /// Listwise bound over the whole ranked list.
    #[serde(rename = "epo-list")]
    EpoList,
    /// Mean pairwise loss over energy-adjacent pairs.
    #[serde(rename = "epo-pair")]
    EpoPair,
    /// Single pairwise loss on the (best, worst) extremes.
    #[serde(rename = "flowdpo")]
    FlowDpo,
}

/// Grid and partition used by the evaluation cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub bounds: Vec<(f64, f64)>,
    pub bins: Vec<usize>,
    /// Interior boundaries per dimension defining the mode partition.
    pub partition: Vec<Vec<f64>>,
}

/// All hyperparameters of the online loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub method: RefineMethod,
    pub preference: PreferenceConfig,
    pub sampler: SamplerConfig,
    pub iterations: u64,
    pub lists_per_iter: usize,
    pub optimizer: AdamParams,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// 0 disables the cadence.
    pub eval_every: u64,
    pub eval_samples: usize,
    pub eval: Option<EvalSpec>,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            method: RefineMethod::EpoList,
            preference: PreferenceConfig::default(),
            sampler: SamplerConfig::default(),
            iterations: 1000,
            lists_per_iter: 4,
            optimizer: AdamParams::default(),
            lora_rank: 4,
            lora_scale: 1.0,
            eval_every: 50,
            eval_samples: 5000,
            eval: None,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        self.preference
            .validate()
            .map_err(|e| RefineError::BadConfig(e.to_string()))?;
        self.sampler
            .validate()
            .map_err(|e| RefineError::BadConfig(e.to_string()))?;
        if self.iterations < 1 {
            return Err(RefineError::BadConfig("iterations must be >= 1".into()));
        }
        if self.lists_per_iter == 0 {
            return Err(RefineError::BadConfig("lists_per_iter must be >= 1".into()));
        }
        if self.lora_rank == 0 {
            return Err(RefineError::BadConfig("lora_rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// One iteration record; the loss is the value before the Adam step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    pub loss: f64,
    pub energy_mean: f64,
    pub energy_min: f64,
    pub energy_max: f64,
}

/// Evaluation-cadence record: deterministic-sampler mode masses and the
/// divergence against the Boltzmann oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub mode_masses: Vec<f64>,
    pub jsd_to_oracle: f64,
}

/// Append-only log of a refinement run: one record per iteration.
///
/// Wall-clock time is intentionally not part of this structure; the
/// serialized log must be byte-identical across reruns, so timing goes
/// into a separate sidecar at the command layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub format_version: u32,
    pub config_hash: String,
    pub records: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Refinement state that persists across checkpoints: the model pair,
/// the optimizer moments, and the number of completed iterations.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub pair: ModelPair,
    pub adam: AdamState,
    pub completed: u64,
}

/// Build the model pair for a fresh or resumed run.
///
/// The reference is always the adapter-free base (base weights never
/// change during refinement, so this equals the initial pretrained
/// checkpoint); a model that already carries adapters continues from
/// its recorded step with its saved optimizer moments.
pub fn init_refinement(
    pretrained: &VelocityModel,
    cfg: &RefineConfig,
    completed: u64,
    adam: Option<AdamState>,
) -> Result<Refinement, RefineError> {
    cfg.validate()?;
    let pair = ModelPair::init_refinement(
        pretrained,
        cfg.lora_rank,
        cfg.lora_scale,
        seed::mix(cfg.seed, &[0x4c]),
    )?;
    let adam = match adam {
        Some(state) => state,
        None => AdamState::new(cfg.optimizer, &pair.opt().params(Trainable::AdaptersOnly)),
    };
    Ok(Refinement {
        pair,
        adam,
        completed,
    })
}

/// Generate, rank, and score one batch of lists; update the adapters.
/// Returns the pre-step loss and ensemble energy statistics.
pub fn epo_iteration(
    refinement: &mut Refinement,
    potential: &Potential,
    cfg: &RefineConfig,
    sched: Schedule,
    iteration: u64,
) -> Result<IterRecord, RefineError> {
    let k = cfg.preference.k;
    let mut ranked_lists: Vec<RankedEnsemble> = Vec::with_capacity(cfg.lists_per_iter);
    for list in 0..cfg.lists_per_iter {
        let sampler_cfg = SamplerConfig {
            seed: seed::mix(cfg.seed, &[TAG_SAMPLING, iteration, list as u64]),
            ..cfg.sampler
        };
        let samples = generate_ensemble(refinement.pair.opt(), k, &sampler_cfg, sched)?;
        let energies = potential.energies(&samples)?;
        ranked_lists.push(rank_by_energy(samples, energies)?);
    }

    let mut g = Graph::new();
    let pb = bind_pair(&mut g, &refinement.pair);
    let mut list_losses = Vec::with_capacity(cfg.lists_per_iter);
    for (list, ranked) in ranked_lists.iter().enumerate() {
        let mut rng = seed::stream_rng(
            seed::mix(cfg.seed, &[TAG_COUPLING, iteration, list as u64]),
            0,
        );
        let pairs = draw_pairs(ranked.samples(), &cfg.preference, &mut rng);
        let loss = match cfg.method {
            RefineMethod::EpoList => epo_list_loss_with_pairs(
                &mut g,
                &refinement.pair,
                &pb,
                ranked,
                &pairs,
                cfg.preference.beta,
                sched,
            )?,
            RefineMethod::EpoPair => epo_pair_loss_with_pairs(
                &mut g,
                &refinement.pair,
                &pb,
                ranked,
                &pairs,
                cfg.preference.beta,
                sched,
            )?,
            RefineMethod::FlowDpo => {
                let w = &pairs[ranked.order()[0]];
                let l = &pairs[ranked.order()[ranked.len() - 1]];
                flowdpo_pair_loss(
                    &mut g,
                    &refinement.pair,
                    &pb,
                    w,
                    l,
                    cfg.preference.beta,
                    sched,
                )?
            }
        };
        list_losses.push(loss);
    }
    let mut total = list_losses[0];
    for &l in &list_losses[1..] {
        total = g.add(total, l)?;
    }
    let total = g.scale(total, 1.0 / list_losses.len() as f64);
    let loss_value = g.value(total).item();
    if !loss_value.is_finite() {
        return Err(RefineError::NonFiniteLoss { iteration });
    }

    let grads = g.backward(total)?;
    let grad_arrays = pb.opt.trainable_grads(&g, &grads);
    let mut params = refinement.pair.opt_mut().params_mut(Trainable::AdaptersOnly);
    let mut refs: Vec<&mut crate::diffcore::Array> =
        params.iter_mut().map(|(_, p)| &mut **p).collect();
    refinement.adam.step(&mut refs, &grad_arrays)?;

    let all_energies: Vec<f64> = ranked_lists
        .iter()
        .flat_map(|r| r.energies().iter().copied())
        .collect();
    let n = all_energies.len() as f64;
    Ok(IterRecord {
        iteration,
        loss: loss_value,
        energy_mean: all_energies.iter().sum::<f64>() / n,
        energy_min: all_energies.iter().cloned().fold(f64::INFINITY, f64::min),
        energy_max: all_energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Deterministic-sampler alignment evaluation: ODE mode masses and the
/// JSD between the sample histogram and the Boltzmann oracle.
pub fn eval_alignment(
    model: &VelocityModel,
    spec: &EvalSpec,
    oracle_probs: &[f64],
    n: usize,
    base_cfg: &SamplerConfig,
    sched: Schedule,
    eval_seed: u64,
    iteration: u64,
) -> Result<EvalRecord, RefineError> {
    let ode_cfg = SamplerConfig {
        method: Method::OdeHeun,
        score_norm: 0.0,
        seed: eval_seed,
        ..*base_cfg
    };
    let samples = generate_ensemble(model, n, &ode_cfg, sched)?;
    let mode_masses = metrics::mode_masses(&samples, &spec.partition)?;
    let hist_spec = HistogramSpec::new(spec.bounds.clone(), spec.bins.clone());
    let jsd = metrics::jsd_hist_vs_probs(&samples, oracle_probs, &hist_spec)?;
    Ok(EvalRecord {
        iteration,
        mode_masses,
        jsd_to_oracle: jsd,
    })
}

/// Run the online loop from `refinement.completed` up to
/// `cfg.iterations`, recording per-iteration statistics, cadence
/// evaluations, and periodic checkpoints through `on_checkpoint`.
pub fn refine_run(
    refinement: &mut Refinement,
    potential: &Potential,
    cfg: &RefineConfig,
    sched: Schedule,
    config_hash: &str,
    mut on_checkpoint: impl FnMut(&Refinement) -> std::io::Result<()>,
) -> Result<RunLog, RefineError> {
    cfg.validate()?;
    potential.validate()?;
    if potential.dim() != refinement.pair.opt().dim() {
        return Err(RefineError::BadConfig(format!(
            "model d={} does not match potential d={}",
            refinement.pair.opt().dim(),
            potential.dim()
        )));
    }
    let oracle_probs = match (&cfg.eval, cfg.eval_every) {
        (Some(spec), every) if every > 0 => Some(crate::energy::BoltzmannGrid::cell_probs(
            potential,
            &spec.bounds,
            &spec.bins,
        )?),
        _ => None,
    };
    let mut log = RunLog {
        format_version: 1,
        config_hash: config_hash.to_string(),
        records: Vec::new(),
        evals: Vec::new(),
    };
    for iteration in refinement.completed..cfg.iterations {
        let record = epo_iteration(refinement, potential, cfg, sched, iteration)?;
        log.records.push(record);
        refinement.completed = iteration + 1;
        if let (Some(spec), Some(probs)) = (&cfg.eval, &oracle_probs) {
            if cfg.eval_every > 0 && refinement.completed % cfg.eval_every == 0 {
                let eval = eval_alignment(
                    refinement.pair.opt(),
                    spec,
                    probs,
                    cfg.eval_samples,
                    &cfg.sampler,
                    sched,
                    seed::mix(cfg.seed, &[TAG_EVAL, iteration]),
                    refinement.completed,
                )?;
                log.evals.push(eval);
            }
        }
        if cfg.checkpoint_every > 0 && refinement.completed % cfg.checkpoint_every == 0 {
            on_checkpoint(refinement).map_err(|e| RefineError::Checkpoint(e.to_string()))?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmodel::ModelConfig;
    use approx::assert_abs_diff_eq;

    fn tiny_pretrained(seed: u64) -> VelocityModel {
        let cfg = ModelConfig {
            dim: 1,
            hidden: vec![8, 8],
            time_features: 4,
            periodic: false,
            conditioning: Vec::new(),
        };
        VelocityModel::new(&cfg, seed).unwrap()
    }

    fn fast_cfg(method: RefineMethod, k: usize, iterations: u64, seed: u64) -> RefineConfig {
        RefineConfig {
            method,
            preference: PreferenceConfig {
                k,
                ..PreferenceConfig::default()
            },
            sampler: SamplerConfig {
                steps: 10,
                method: Method::Sde,
                score_norm: 0.01,
                time_clamp: 1e-3,
                seed: 0,
            },
            iterations,
            lists_per_iter: 2,
            optimizer: AdamParams::with_lr(1e-3),
            lora_rank: 2,
            lora_scale: 1.0,
            eval_every: 0,
            eval_samples: 0,
            eval: None,
            checkpoint_every: 0,
            seed,
        }
    }

    fn double_well() -> Potential {
        Potential::DoubleWell1d {
            a: 2.0,
            tilt: 0.0,
            kt: 1.0,
        }
    }

    #[test]
    fn first_iteration_loss_is_log_k_factorial() {
        let model = tiny_pretrained(1);
        let cfg = fast_cfg(RefineMethod::EpoList, 8, 1, 5);
        let mut refinement = init_refinement(&model, &cfg, 0, None).unwrap();
        let record =
            epo_iteration(&mut refinement, &double_well(), &cfg, Schedule::LinearOt, 0).unwrap();
        let ln_kfact: f64 = (1..=8).map(|i| (i as f64).ln()).sum();
        assert_abs_diff_eq!(record.loss, ln_kfact, epsilon = 1e-9);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let model = tiny_pretrained(2);
        let mut cfg = fast_cfg(RefineMethod::EpoList, 4, 3, 6);
        cfg.optimizer = AdamParams::with_lr(0.0);
        let mut refinement = init_refinement(&model, &cfg, 0, None).unwrap();
        let before = serde_json::to_string(refinement.pair.opt()).unwrap();
        refine_run(
            &mut refinement,
            &double_well(),
            &cfg,
            Schedule::LinearOt,
            "h",
            |_| Ok(()),
        )
        .unwrap();
        let after = serde_json::to_string(refinement.pair.opt()).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn reference_and_base_weights_stay_byte_identical() {
        let model = tiny_pretrained(3);
        let cfg = fast_cfg(RefineMethod::EpoList, 4, 5, 7);
        let mut refinement = init_refinement(&model, &cfg, 0, None).unwrap();
        let ref_before = serde_json::to_string(refinement.pair.reference()).unwrap();
        let base_before = serde_json::to_string(&refinement.pair.opt().without_adapters()).unwrap();
        refine_run(
            &mut refinement,
            &double_well(),
            &cfg,
            Schedule::LinearOt,
            "h",
            |_| Ok(()),
        )
        .unwrap();
        let ref_after = serde_json::to_string(refinement.pair.reference()).unwrap();
        let base_after = serde_json::to_string(&refinement.pair.opt().without_adapters()).unwrap();
        assert_eq!(ref_before, ref_after);
        assert_eq!(base_before, base_after);
        // and the adapters did change
        let adapters_moved = refinement
            .pair
            .opt()
            .adapters()
            .unwrap()
            .iter()
            .any(|a| a.up.data().iter().any(|&v| v != 0.0));
        assert!(adapters_moved);
    }

    #[test]
    fn run_log_is_deterministic() {
        let model = tiny_pretrained(4);
        let cfg = fast_cfg(RefineMethod::EpoPair, 4, 4, 8);
        let run = || {
            let mut refinement = init_refinement(&model, &cfg, 0, None).unwrap();
            refine_run(
                &mut refinement,
                &double_well(),
                &cfg,
                Schedule::LinearOt,
                "hash",
                |_| Ok(()),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 4);
    }

    #[test]
    fn k2_list_matches_flowdpo_trace() {
        let model = tiny_pretrained(5);
        let list_cfg = fast_cfg(RefineMethod::EpoList, 2, 4, 9);
        let mut flow_cfg = list_cfg.clone();
        flow_cfg.method = RefineMethod::FlowDpo;
        let trace = |cfg: &RefineConfig| {
            let mut refinement = init_refinement(&model, cfg, 0, None).unwrap();
            refine_run(
                &mut refinement,
                &double_well(),
                cfg,
                Schedule::LinearOt,
                "h",
                |_| Ok(()),
            )
            .unwrap()
            .records
            .iter()
            .map(|r| r.loss)
            .collect::<Vec<_>>()
        };
        let a = trace(&list_cfg);
        let b = trace(&flow_cfg);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn resume_reproduces_the_tail() {
        let model = tiny_pretrained(6);
        let mut cfg = fast_cfg(RefineMethod::EpoList, 4, 6, 10);
        cfg.checkpoint_every = 3;
        // uninterrupted run
        let mut full = init_refinement(&model, &cfg, 0, None).unwrap();
        let mut snapshot: Option<Refinement> = None;
        let full_log = refine_run(
            &mut full,
            &double_well(),
            &cfg,
            Schedule::LinearOt,
            "h",
            |r| {
                if r.completed == 3 {
                    snapshot = Some(r.clone());
                }
                Ok(())
            },
        )
        .unwrap();
        // resume from the iteration-3 checkpoint
        let mut resumed = snapshot.expect("checkpoint at iteration 3");
        let tail_log = refine_run(
            &mut resumed,
            &double_well(),
            &cfg,
            Schedule::LinearOt,
            "h",
            |_| Ok(()),
        )
        .unwrap();
        assert_eq!(&full_log.records[3..], &tail_log.records[..]);
        assert_eq!(
            serde_json::to_string(full.pair.opt()).unwrap(),
            serde_json::to_string(resumed.pair.opt()).unwrap()
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = tiny_pretrained(7);
        let cfg = fast_cfg(RefineMethod::EpoList, 4, 1, 11);
        let p2 = Potential::MuellerBrown2d {
            terms: crate::energy::mueller_brown_classic(),
            kt: 10.0,
        };
        let mut refinement = init_refinement(&model, &cfg, 0, None).unwrap();
        let err = refine_run(
            &mut refinement,
            &p2,
            &cfg,
            Schedule::LinearOt,
            "h",
            |_| Ok(()),
        );
        assert!(matches!(err, Err(RefineError::BadConfig(_))));
    }
}
