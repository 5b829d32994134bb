//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line (visible with `--nocapture` or on failure).
//!
//! The heavy fixtures (pretrained and refined double-well models) are
//! built once and shared; every tolerance is pinned here, not
//! calibrated at runtime. Criteria rely only on analytic ground truth
//! (Boltzmann quadrature, closed-form Gaussians) and the
//! Metropolis-Hastings oracle.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use epoflow::checkpoint::Checkpoint;
use epoflow::diffcore::{AdamParams, Graph};
use epoflow::energy::{boltzmann_oracle, rank_by_energy, BoltzmannGrid, GridSpec, Potential};
use epoflow::flowmodel::{pretrain, ModelPair, PretrainConfig, Schedule, Trainable, VelocityModel};
use epoflow::gradcheck::{self, GradCheckConfig};
use epoflow::metrics::{self, HistogramSpec};
use epoflow::preference::{
    bind_pair, dpo_bt_from_scores, draw_pairs, epo_list_loss_with_pairs, flowdpo_pair_loss,
    listwise_pl_from_scores, PreferenceConfig,
};
use epoflow::refine::{
    eval_alignment, init_refinement, refine_run, EvalRecord, EvalSpec, RefineConfig, RefineMethod,
};
use epoflow::sampler::{
    generate_ensemble, score_from_velocity, sde_sample, GaussianTargetVelocity, Method,
    SamplerConfig, Velocity,
};
use epoflow::seed;
use epoflow_cli::commands::{build_dataset, build_model, refine_config};
use epoflow_cli::config::RunConfig;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn ln_factorial(k: usize) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

// ---------------------------------------------------------------- fixtures

struct Canonical {
    config: RunConfig,
    pretrained: VelocityModel,
    refined: VelocityModel,
    potential: Potential,
    eval_spec: EvalSpec,
    oracle_probs: Vec<f64>,
    pretrain_eval: EvalRecord,
    refined_eval: EvalRecord,
    refine_cfg: RefineConfig,
}

const EVAL_SAMPLES: usize = 10_000;

fn pretrain_from_config(cfg: &RunConfig) -> VelocityModel {
    let (data, _) = build_dataset(cfg).expect("dataset");
    let mut model = build_model(cfg).expect("model");
    let train_cfg = PretrainConfig {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        optimizer: AdamParams::with_lr(cfg.pretrain.lr),
        lr_schedule: cfg.pretrain.lr_schedule,
        time_clamp: cfg.sampler.time_clamp,
        seed: seed::mix(cfg.seed, &[0x54]),
    };
    pretrain(&mut model, &data, cfg.schedule, &train_cfg).expect("pretraining");
    model
}

fn eval_model(
    model: &VelocityModel,
    spec: &EvalSpec,
    oracle_probs: &[f64],
    base: &SamplerConfig,
    sched: Schedule,
    eval_seed: u64,
) -> EvalRecord {
    eval_alignment(
        model,
        spec,
        oracle_probs,
        EVAL_SAMPLES,
        base,
        sched,
        eval_seed,
        0,
    )
    .expect("evaluation")
}

/// Run the canonical biased double-well experiment once.
fn canonical() -> &'static Canonical {
    static CANONICAL: OnceLock<Canonical> = OnceLock::new();
    CANONICAL.get_or_init(|| {
        let config = RunConfig::load(&config_path("double_well_biased.json")).expect("config");
        let potential = config.potential.clone();
        let pretrained = pretrain_from_config(&config);
        let mut refine_cfg = refine_config(&config);
        refine_cfg.eval_every = 0;
        refine_cfg.checkpoint_every = 0;
        let eval_spec = refine_cfg.eval.clone().expect("eval spec in config");
        let oracle_probs =
            BoltzmannGrid::cell_probs(&potential, &eval_spec.bounds, &eval_spec.bins)
                .expect("oracle");
        let pretrain_eval = eval_model(
            &pretrained,
            &eval_spec,
            &oracle_probs,
            &refine_cfg.sampler,
            config.schedule,
            seed::mix(config.seed, &[0xE0]),
        );
        let mut refinement = init_refinement(&pretrained, &refine_cfg, 0, None).expect("init");
        refine_run(
            &mut refinement,
            &potential,
            &refine_cfg,
            config.schedule,
            "acceptance",
            |_| Ok(()),
        )
        .expect("refinement");
        let refined = refinement.pair.opt().clone();
        let refined_eval = eval_model(
            &refined,
            &eval_spec,
            &oracle_probs,
            &refine_cfg.sampler,
            config.schedule,
            seed::mix(config.seed, &[0xE1]),
        );
        Canonical {
            config,
            pretrained,
            refined,
            potential,
            eval_spec,
            oracle_probs,
            pretrain_eval,
            refined_eval,
            refine_cfg,
        }
    })
}

/// Single-well pretrained model for the exploration ablation.
fn single_well() -> &'static (RunConfig, VelocityModel) {
    static SINGLE: OnceLock<(RunConfig, VelocityModel)> = OnceLock::new();
    SINGLE.get_or_init(|| {
        let config = RunConfig::load(&config_path("double_well_single.json")).expect("config");
        let model = pretrain_from_config(&config);
        (config, model)
    })
}

// ---------------------------------------------------------------- criteria

/// Criterion 1: every loss matches central finite differences with max
/// relative error < 1e-4 over 100 random configurations; < 2 min.
#[test]
fn c1_gradient_suite() {
    let t0 = Instant::now();
    let rows = gradcheck::run(&GradCheckConfig {
        seed: 1234,
        configs_per_loss: 100,
        ..GradCheckConfig::default()
    });
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = rows
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0_f64, f64::max);
    let pass = gradcheck::all_pass(&rows) && elapsed < 120.0;
    report(
        "1 (gradient suite)",
        pass,
        &format!("worst rel err {worst:.2e} over {} losses, {elapsed:.1}s", rows.len()),
    );
    for r in &rows {
        assert!(
            r.pass,
            "{}: max relative error {:.3e} >= 1e-4",
            r.loss, r.max_rel_err
        );
    }
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1}s (limit 120s)");
}

/// Criterion 2: algebraic reductions of the listwise bound.
#[test]
fn c2_algebraic_reductions() {
    // (a) identical models give ln K!
    let base = VelocityModel::new(
        &epoflow::flowmodel::ModelConfig {
            dim: 2,
            hidden: vec![16, 16],
            time_features: 8,
            periodic: false,
            conditioning: vec![],
        },
        99,
    )
    .unwrap();
    let pair = ModelPair::init_refinement(&base, 4, 1.0, 7).unwrap();
    let mut worst_a = 0.0_f64;
    for k in [2usize, 4, 8] {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let samples: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..2).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let energies: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ranked = rank_by_energy(samples, energies).unwrap();
        let cfg = PreferenceConfig {
            k,
            ..PreferenceConfig::default()
        };
        let mut g = Graph::new();
        let pb = bind_pair(&mut g, &pair);
        let pairs = draw_pairs(ranked.samples(), &cfg, &mut rng);
        let loss = epo_list_loss_with_pairs(
            &mut g,
            &pair,
            &pb,
            &ranked,
            &pairs,
            cfg.beta,
            Schedule::LinearOt,
        )
        .unwrap();
        worst_a = worst_a.max((g.value(loss).item() - ln_factorial(k)).abs());
    }

    // (b) K = 2 listwise equals the pairwise loss on shared draws
    let mut perturbed = pair.clone();
    {
        let mut params = perturbed.opt_mut().params_mut(Trainable::AdaptersOnly);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            for (j, v) in p.data_mut().iter_mut().enumerate() {
                *v += 0.04 * ((i + 1) as f64) * ((j % 3) as f64 - 1.0);
            }
        }
    }
    let mut worst_b = 0.0_f64;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let samples: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..2).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let energies: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ranked = rank_by_energy(samples, energies).unwrap();
        let cfg = PreferenceConfig {
            k: 2,
            ..PreferenceConfig::default()
        };
        let pairs = draw_pairs(ranked.samples(), &cfg, &mut rng);
        let mut g = Graph::new();
        let pb = bind_pair(&mut g, &perturbed);
        let list = epo_list_loss_with_pairs(
            &mut g,
            &perturbed,
            &pb,
            &ranked,
            &pairs,
            cfg.beta,
            Schedule::LinearOt,
        )
        .unwrap();
        let w = &pairs[ranked.order()[0]];
        let l = &pairs[ranked.order()[1]];
        let pairwise =
            flowdpo_pair_loss(&mut g, &perturbed, &pb, w, l, cfg.beta, Schedule::LinearOt)
                .unwrap();
        worst_b = worst_b.max((g.value(list).item() - g.value(pairwise).item()).abs());
    }

    // (c) two-element Plackett-Luce equals the logistic loss
    let mut worst_c = 0.0_f64;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let s1 = rng.random_range(-10.0..10.0);
        let s2 = rng.random_range(-10.0..10.0);
        let list = listwise_pl_from_scores(&[s1, s2]).unwrap();
        worst_c = worst_c.max((list - dpo_bt_from_scores(s1, s2)).abs());
    }

    let pass = worst_a < 1e-9 && worst_b < 1e-10 && worst_c < 1e-12;
    report(
        "2 (algebraic reductions)",
        pass,
        &format!("lnK! err {worst_a:.2e}, K=2 err {worst_b:.2e}, PL/BT err {worst_c:.2e}"),
    );
    assert!(worst_a < 1e-9, "ln K! deviation {worst_a:.3e}");
    assert!(worst_b < 1e-10, "K=2 reduction deviation {worst_b:.3e}");
    assert!(worst_c < 1e-12, "PL/BT deviation {worst_c:.3e}");
}

/// Criterion 3: the Jensen step bounds in the right direction:
/// E[PL(a(X))] >= PL(E[a(X)]) for random score functions.
#[test]
fn c3_jensen_bound_direction() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let trials = 1000;
    let draws = 10_000;
    let mut violations = 0;
    for _ in 0..trials {
        let k = rng.random_range(2..=6usize);
        // a_j(X) = c_j + b_j X + d_j X^2, X ~ N(0, 1)
        let coeffs: Vec<(f64, f64, f64)> = (0..k)
            .map(|_| {
                (
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let mut losses = Vec::with_capacity(draws);
        let mut mean_scores = vec![0.0; k];
        let mut scores = vec![0.0; k];
        for _ in 0..draws {
            let x: f64 = rng.sample(StandardNormal);
            for (j, &(c, b, d)) in coeffs.iter().enumerate() {
                scores[j] = c + b * x + d * x * x;
                mean_scores[j] += scores[j];
            }
            losses.push(listwise_pl_from_scores(&scores).unwrap());
        }
        for m in mean_scores.iter_mut() {
            *m /= draws as f64;
        }
        let mean_loss: f64 = losses.iter().sum::<f64>() / draws as f64;
        let var: f64 = losses
            .iter()
            .map(|l| (l - mean_loss) * (l - mean_loss))
            .sum::<f64>()
            / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        let bound = listwise_pl_from_scores(&mean_scores).unwrap();
        if mean_loss < bound - 3.0 * se {
            violations += 1;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = violations == 0 && elapsed < 60.0;
    report(
        "3 (Jensen bound direction)",
        pass,
        &format!("{violations}/{trials} violations, {elapsed:.1}s"),
    );
    assert_eq!(violations, 0, "Jensen direction violated in {violations} trials");
    assert!(elapsed < 60.0, "took {elapsed:.1}s (limit 60s)");
}

/// Criterion 4: sampler correctness against the exactly-solvable
/// single-Gaussian target.
#[test]
fn c4_sampler_correctness() {
    let t0 = Instant::now();
    let sched = Schedule::LinearOt;
    let vel = GaussianTargetVelocity {
        mean: vec![0.0],
        var: 1.0,
        sched,
    };

    // (a) the score transform reproduces the analytic Gaussian score
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_score = 0.0_f64;
    for _ in 0..50 {
        let x = rng.random_range(-2.5..2.5);
        let t = rng.random_range(0.05..0.95);
        let v = vel.velocity(&[x], t);
        let s = score_from_velocity(&v, &[x], t, sched).unwrap()[0];
        worst_score = worst_score.max((s - vel.score(&[x], t)[0]).abs());
    }

    // (b) SDE terminal moments at w in {0.01, 0.1}
    let n = 100_000;
    let mut moment_errs = Vec::new();
    for w in [0.01, 0.1] {
        let cfg = SamplerConfig {
            steps: 200,
            method: Method::Sde,
            score_norm: w,
            time_clamp: 1e-3,
            seed: 11,
        };
        let samples = generate_ensemble(&vel, n, &cfg, sched).unwrap();
        let mean: f64 = samples.iter().map(|s| s[0]).sum::<f64>() / n as f64;
        let var: f64 =
            samples.iter().map(|s| (s[0] - mean) * (s[0] - mean)).sum::<f64>() / n as f64;
        moment_errs.push((w, mean.abs(), (var - 1.0).abs()));
    }

    // (c) w = 0 SDE equals the Euler ODE bitwise
    let cfg0 = SamplerConfig {
        steps: 64,
        method: Method::Sde,
        score_norm: 0.0,
        time_clamp: 1e-3,
        seed: 5,
    };
    let sde0 = generate_ensemble(&vel, 256, &cfg0, sched).unwrap();
    let euler = generate_ensemble(
        &vel,
        256,
        &SamplerConfig {
            method: Method::OdeEuler,
            ..cfg0
        },
        sched,
    )
    .unwrap();
    let degenerate_equal = sde0 == euler;

    let elapsed = t0.elapsed().as_secs_f64();
    let moments_ok = moment_errs.iter().all(|&(_, m, v)| m < 0.02 && v < 0.03);
    let pass = worst_score < 1e-5 && moments_ok && degenerate_equal && elapsed < 180.0;
    report(
        "4 (sampler correctness)",
        pass,
        &format!(
            "score err {worst_score:.2e}; moments {:?}; w=0 exact: {degenerate_equal}; {elapsed:.1}s",
            moment_errs
        ),
    );
    assert!(worst_score < 1e-5, "score transform error {worst_score:.3e}");
    for (w, m, v) in moment_errs {
        assert!(m < 0.02, "w={w}: terminal mean off by {m:.4}");
        assert!(v < 0.03, "w={w}: terminal variance off by {v:.4}");
    }
    assert!(degenerate_equal, "w=0 SDE must equal the Euler ODE exactly");
    assert!(elapsed < 180.0, "took {elapsed:.1}s (limit 180s)");
}

/// Criterion 5: the canonical refinement experiment. The thresholds are
/// asserted exactly as stated; the refinement dynamics specified by the
/// loss family do not reach them (see the decisions ledger for the
/// measurements and the fixed-reference analysis), so this criterion
/// documents the honest gap rather than a calibrated pass.
#[test]
fn c5_canonical_epo_experiment() {
    let c = canonical();
    let masses = &c.refined_eval.mode_masses;
    let mass_err = masses
        .iter()
        .map(|m| (m - 0.5).abs())
        .fold(0.0_f64, f64::max);
    let jsd_before = c.pretrain_eval.jsd_to_oracle;
    let jsd_after = c.refined_eval.jsd_to_oracle;
    let pass = mass_err <= 0.10 && jsd_after <= 0.5 * jsd_before;
    report(
        "5 (canonical EPO experiment)",
        pass,
        &format!(
            "pretrained masses {:?} JSD {jsd_before:.4}; refined masses {masses:?} JSD {jsd_after:.4}",
            c.pretrain_eval.mode_masses
        ),
    );
    assert!(
        mass_err <= 0.10,
        "refined mode masses {masses:?} are not within 0.10 of (0.5, 0.5); \
         the listwise bound anchors well masses to the frozen reference on \
         degenerate wells (see decisions ledger)"
    );
    assert!(
        jsd_after <= 0.5 * jsd_before,
        "JSD {jsd_after:.4} not reduced by half from {jsd_before:.4} \
         (see decisions ledger)"
    );
}

/// Criterion 6: the SDE-vs-ODE exploration ablation.
#[test]
fn c6_sde_vs_ode_ablation() {
    let (config, model) = single_well();
    let sched = config.schedule;
    // (a) ensemble mass comparison on the single-well model at w = 0.05
    let n = 20_000;
    let ode_cfg = SamplerConfig {
        steps: 50,
        method: Method::OdeHeun,
        score_norm: 0.0,
        time_clamp: 1e-3,
        seed: seed::mix(config.seed, &[0xA0]),
    };
    let sde_cfg = SamplerConfig {
        steps: 50,
        method: Method::Sde,
        score_norm: 0.05,
        time_clamp: 1e-3,
        seed: seed::mix(config.seed, &[0xA1]),
    };
    let minority = |samples: &[Vec<f64>]| {
        samples.iter().filter(|s| s[0] >= 0.0).count() as f64 / samples.len() as f64
    };
    let ode_mass = minority(&generate_ensemble(model, n, &ode_cfg, sched).unwrap());
    let sde_mass = minority(&generate_ensemble(model, n, &sde_cfg, sched).unwrap());

    // (b) the canonical SDE refinement vs its ODE twin
    let c = canonical();
    let mut ode_refine_cfg = c.refine_cfg.clone();
    ode_refine_cfg.sampler.method = Method::OdeHeun;
    ode_refine_cfg.sampler.score_norm = 0.0;
    let mut refinement = init_refinement(&c.pretrained, &ode_refine_cfg, 0, None).unwrap();
    refine_run(
        &mut refinement,
        &c.potential,
        &ode_refine_cfg,
        c.config.schedule,
        "acceptance-ode-twin",
        |_| Ok(()),
    )
    .unwrap();
    let ode_eval = eval_model(
        refinement.pair.opt(),
        &c.eval_spec,
        &c.oracle_probs,
        &ode_refine_cfg.sampler,
        c.config.schedule,
        seed::mix(c.config.seed, &[0xE2]),
    );
    let ode_refined_minority = ode_eval.mode_masses[1];
    let sde_mass_err = c
        .refined_eval
        .mode_masses
        .iter()
        .map(|m| (m - 0.5).abs())
        .fold(0.0_f64, f64::max);
    let sde_jsd_halved =
        c.refined_eval.jsd_to_oracle <= 0.5 * c.pretrain_eval.jsd_to_oracle;

    let pass = ode_mass < 0.001
        && sde_mass > 0.01
        && sde_mass_err <= 0.10
        && sde_jsd_halved
        && ode_refined_minority < 0.20;
    report(
        "6 (SDE-vs-ODE ablation)",
        pass,
        &format!(
            "single-well minority mass: ODE {ode_mass:.4}, SDE {sde_mass:.4}; \
             ODE-refined minority {ode_refined_minority:.3}; SDE-refined masses {:?}",
            c.refined_eval.mode_masses
        ),
    );
    assert!(
        ode_refined_minority < 0.20,
        "ODE refinement moved minority mass to {ode_refined_minority:.3}"
    );
    assert!(
        ode_mass < 0.001,
        "single-well ODE ensemble leaks {ode_mass:.4} into the unseen well \
         (limit 0.001; see decisions ledger)"
    );
    assert!(
        sde_mass > 0.01,
        "single-well SDE ensemble places only {sde_mass:.4} in the unseen well \
         (needs > 0.01; the marginal-preserving SDE does not out-explore the \
         ODE at this fit quality; see decisions ledger)"
    );
    assert!(
        sde_mass_err <= 0.10 && sde_jsd_halved,
        "the SDE refinement run does not reach the criterion-5 targets \
         (see decisions ledger)"
    );
}

/// Criterion 7: listwise vs adjacent-pair refinement on the tilted
/// double-well: the listwise bound should match or beat the pairwise
/// variant in final oracle divergence (median over 3 seeds).
#[test]
fn c7_list_vs_pair_on_tilted_well() {
    let config = RunConfig::load(&config_path("double_well_tilted.json")).expect("config");
    let potential = config.potential.clone();
    let pretrained = pretrain_from_config(&config);
    let base_cfg = {
        let mut rc = refine_config(&config);
        rc.eval_every = 0;
        rc.checkpoint_every = 0;
        rc.iterations = 400;
        rc
    };
    let eval_spec = base_cfg.eval.clone().expect("eval spec");
    let oracle_probs =
        BoltzmannGrid::cell_probs(&potential, &eval_spec.bounds, &eval_spec.bins).unwrap();
    let run = |method: RefineMethod, run_seed: u64| -> f64 {
        let cfg = RefineConfig {
            method,
            seed: run_seed,
            ..base_cfg.clone()
        };
        let mut refinement = init_refinement(&pretrained, &cfg, 0, None).unwrap();
        refine_run(
            &mut refinement,
            &potential,
            &cfg,
            config.schedule,
            "acceptance-tilted",
            |_| Ok(()),
        )
        .unwrap();
        eval_model(
            refinement.pair.opt(),
            &eval_spec,
            &oracle_probs,
            &cfg.sampler,
            config.schedule,
            seed::mix(run_seed, &[0xE3]),
        )
        .jsd_to_oracle
    };
    let seeds = [101u64, 202, 303];
    let mut list_jsd: Vec<f64> = seeds.iter().map(|&s| run(RefineMethod::EpoList, s)).collect();
    let mut pair_jsd: Vec<f64> = seeds.iter().map(|&s| run(RefineMethod::EpoPair, s)).collect();
    list_jsd.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pair_jsd.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (list_med, pair_med) = (list_jsd[1], pair_jsd[1]);
    let pass = list_med <= pair_med;
    report(
        "7 (EPO-List vs EPO-Pair)",
        pass,
        &format!("median JSD: list {list_med:.4} vs pair {pair_med:.4} (3 seeds)"),
    );
    assert!(
        pass,
        "epo-list median JSD {list_med:.4} exceeds epo-pair {pair_med:.4} \
         (seeds {seeds:?}: list {list_jsd:?}, pair {pair_jsd:?})"
    );
}

/// Criterion 8: metric unit anchors.
#[test]
fn c8_metric_anchors() {
    // JSD(a, a) = 0
    let a: Vec<Vec<f64>> = (0..2000).map(|i| vec![((i * 31) % 101) as f64 * 0.01 - 0.5]).collect();
    let spec = HistogramSpec::new(vec![(-1.0, 1.0)], vec![100]);
    let self_jsd = metrics::jsd_hist(&a, &a, &spec).unwrap();

    // disjoint supports -> ln 2
    let left: Vec<Vec<f64>> = (0..10_000).map(|i| vec![-0.6 - (i % 100) as f64 * 0.003]).collect();
    let right: Vec<Vec<f64>> = (0..10_000).map(|i| vec![0.6 + (i % 100) as f64 * 0.003]).collect();
    let disjoint = metrics::jsd_hist(&left, &right, &spec).unwrap();
    let disjoint_err = (disjoint - 2.0_f64.ln()).abs();

    // 1-D W2 shift is exactly 1
    let xs: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
    let shifted: Vec<f64> = xs.iter().map(|x| x + 1.0).collect();
    let w2_shift = metrics::w2_1d(&xs, &shifted).unwrap();

    // Gaussian W2 with equal covariances is the mean distance
    let eye = [1.0, 0.0, 0.0, 1.0];
    let mu = [0.6, -0.8];
    let w2g = metrics::w2_gauss(&[0.0, 0.0], &eye, &mu, &eye).unwrap();
    let w2g_err = (w2g - 1.0).abs();

    // TICA recovers the slow axis of a 2-D AR(1)
    let mut rng = seed::stream_rng(77, 0);
    let rho = [0.99_f64, 0.5];
    let mut x = [0.0, 0.0];
    let traj: Vec<Vec<f64>> = (0..100_000)
        .map(|_| {
            for d in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                x[d] = rho[d] * x[d] + (1.0 - rho[d] * rho[d]).sqrt() * z;
            }
            x.to_vec()
        })
        .collect();
    let (tica_model, _) = metrics::tica(&traj, 1, 2).unwrap();
    let dirs = tica_model.directions();
    let v = [dirs[0], dirs[2]];
    let cosine = v[0].abs() / (v[0] * v[0] + v[1] * v[1]).sqrt();

    // FES of oracle samples reproduces the double-well shape at the wells
    let p = Potential::DoubleWell1d {
        a: 2.0,
        tilt: 0.0,
        kt: 1.0,
    };
    let oracle_samples = epoflow::energy::mh_sample(&p, 1_000_000, 0.7, 2000, 1, 99).unwrap();
    let fes_spec = HistogramSpec::new(vec![(-3.0, 3.0)], vec![200]);
    let fes = metrics::fes_grid(&oracle_samples, &fes_spec, 1.0).unwrap();
    // bin-averaged reference energy, shifted like the FES
    let mut fes_err = 0.0_f64;
    for target in [-1.0, 1.0] {
        let bin = ((target - (-3.0)) / 6.0 * 200.0) as usize;
        let center = fes_spec.center(bin)[0];
        let e = p.energy(&[center]).unwrap();
        fes_err = fes_err.max((fes.values[bin] - e).abs());
    }

    let pass = self_jsd == 0.0
        && disjoint_err < 1e-3
        && w2_shift == 1.0
        && w2g_err < 1e-10
        && cosine > 0.99
        && fes_err < 0.2;
    report(
        "8 (metric anchors)",
        pass,
        &format!(
            "self-JSD {self_jsd:.1e}, disjoint err {disjoint_err:.1e}, shift W2 {w2_shift}, \
             gauss err {w2g_err:.1e}, TICA cosine {cosine:.4}, FES err {fes_err:.3}"
        ),
    );
    assert_eq!(self_jsd, 0.0);
    assert!(disjoint_err < 1e-3, "disjoint JSD err {disjoint_err:.2e}");
    assert_eq!(w2_shift, 1.0, "shift W2 must be exact");
    assert!(w2g_err < 1e-10, "gaussian W2 err {w2g_err:.2e}");
    assert!(cosine > 0.99, "TICA slow-axis cosine {cosine:.4}");
    assert!(fes_err < 0.2, "FES deviates {fes_err:.3} kT at the well centers");
}

/// Criterion 9: byte-identical reruns of every command.
#[test]
fn c9_reproducibility() {
    let bin = env!("CARGO_BIN_EXE_epoflow");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    // a reduced copy of the canonical config so the rerun stays fast
    let mut cfg = RunConfig::load(&config_path("double_well_biased.json")).unwrap();
    cfg.pretrain.epochs = 2;
    if let epoflow_cli::config::DataSource::BiasedWells { n, mh, .. } = &mut cfg.pretrain.source {
        *n = 512;
        mh.n = 4000;
        mh.burn_in = 200;
    }
    cfg.refine.iterations = 4;
    cfg.refine.eval_every = 2;
    cfg.refine.eval_samples = 200;
    cfg.refine.checkpoint_every = 2;
    cfg.metrics.reference = epoflow_cli::config::RefSource::MhOracle {
        mh: epoflow_cli::config::MhParams {
            n: 2000,
            step: 0.7,
            burn_in: 200,
            thinning: 2,
        },
    };
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let run_all = |tag: &str| -> Vec<(String, Vec<u8>)> {
        let out = dir.path().join(tag);
        let run = |args: &[&str]| {
            let status = std::process::Command::new(bin)
                .args(args)
                .status()
                .expect("spawn epoflow");
            assert!(status.success(), "command failed: {args:?}");
        };
        let cfg_s = cfg_path.to_str().unwrap();
        let pre = out.join("pre");
        let refi = out.join("ref");
        let smp = out.join("smp");
        let evl = out.join("evl");
        run(&["pretrain", "--config", cfg_s, "--out", pre.to_str().unwrap()]);
        let ckpt = pre.join("checkpoint.json");
        run(&[
            "refine", "--config", cfg_s,
            "--checkpoint", ckpt.to_str().unwrap(),
            "--out", refi.to_str().unwrap(),
        ]);
        run(&[
            "sample", "--config", cfg_s,
            "--checkpoint", ckpt.to_str().unwrap(),
            "--n", "50",
            "--out", smp.to_str().unwrap(),
        ]);
        run(&[
            "eval", "--config", cfg_s,
            "--samples", smp.join("samples.csv").to_str().unwrap(),
            "--out", evl.to_str().unwrap(),
        ]);
        let mut artifacts = Vec::new();
        for f in [
            pre.join("checkpoint.json"),
            pre.join("pretrain_trace.csv"),
            refi.join("refined.json"),
            refi.join("runlog.json"),
            refi.join("checkpoint_iter000002.json"),
            smp.join("samples.csv"),
            evl.join("report.json"),
        ] {
            artifacts.push((
                f.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&f).unwrap_or_else(|e| panic!("{}: {e}", f.display())),
            ));
        }
        artifacts
    };

    let first = run_all("first");
    let second = run_all("second");
    let mut all_equal = true;
    for ((name_a, bytes_a), (_, bytes_b)) in first.iter().zip(&second) {
        if bytes_a != bytes_b {
            all_equal = false;
            eprintln!("artifact {name_a} differs between reruns");
        }
    }
    report(
        "9 (reproducibility)",
        all_equal,
        &format!("{} artifacts byte-compared", first.len()),
    );
    assert!(all_equal, "reruns must produce byte-identical artifacts");
}

/// The degenerate SDE flag equivalence at the CLI level: sampling with
/// `--sampler sde --score-norm 0` matches `--sampler ode-euler`.
#[test]
fn sde_zero_noise_flag_matches_euler_csv() {
    let c = canonical();
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("ckpt.json");
    Checkpoint::new(
        c.pretrained.clone(),
        c.config.schedule,
        0,
        c.config.seed,
        "x".into(),
        None,
    )
    .save(&ckpt_path)
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_epoflow");
    let cfg = config_path("double_well_biased.json");
    let run = |out: &Path, flags: &[&str]| {
        let mut args = vec![
            "sample",
            "--config",
            cfg.to_str().unwrap(),
            "--checkpoint",
            ckpt_path.to_str().unwrap(),
            "--n",
            "64",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(flags);
        assert!(std::process::Command::new(bin).args(&args).status().unwrap().success());
    };
    let a = dir.path().join("sde0");
    let b = dir.path().join("euler");
    run(&a, &["--sampler", "sde", "--score-norm", "0"]);
    run(&b, &["--sampler", "ode-euler"]);
    let csv_a = std::fs::read(a.join("samples.csv")).unwrap();
    let csv_b = std::fs::read(b.join("samples.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "w=0 SDE and Euler ODE must emit identical CSVs");
}
