//! Central finite-difference verification for every loss in the crate.
//!
//! Each loss gets a batch of random small configurations; the analytic
//! gradient from the tape is compared per coordinate against
//! `(f(x+h) - f(x-h)) / 2h`. Relative error uses the floor
//! `max(1, |analytic|, |numeric|)` so near-zero coordinates compare
//! absolutely.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Graph;
use crate::energy::{rank_by_energy, RankedEnsemble};
use crate::flowmodel::{fm_loss, ModelConfig, ModelPair, Schedule, Trainable, VelocityModel};
use crate::preference::{
    bind_pair, dpo_bt, draw_pairs, epo_list_loss_with_pairs, epo_pair_loss_with_pairs, epo_score,
    flowdpo_pair_loss, listwise_pl, CouplingPair, PreferenceConfig,
};
use crate::seed;

/// The losses covered by the suite, in report order.
pub const LOSS_NAMES: [&str; 7] = [
    "fm_loss",
    "dpo_bt",
    "listwise_pl",
    "flowdpo_pair",
    "epo_score",
    "epo_list",
    "epo_pair",
];

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub configs_per_loss: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    /// Test fixture: add a large error to this loss's first analytic
    /// gradient coordinate so the row fails.
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            configs_per_loss: 100,
            fd_step: 1e-4,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub loss: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub fn all_pass(rows: &[GradCheckRow]) -> bool {
    rows.iter().all(|r| r.pass)
}

/// Run the whole suite.
pub fn run(cfg: &GradCheckConfig) -> Vec<GradCheckRow> {
    LOSS_NAMES
        .iter()
        .map(|&name| {
            let mut max_rel = 0.0_f64;
            for c in 0..cfg.configs_per_loss {
                let corrupt_here = c == 0 && cfg.corrupt.as_deref() == Some(name);
                let rel = check_one(name, cfg, c as u64, corrupt_here);
                max_rel = max_rel.max(rel);
            }
            GradCheckRow {
                loss: name.to_string(),
                configs: cfg.configs_per_loss,
                max_rel_err: max_rel,
                pass: max_rel < cfg.tolerance,
            }
        })
        .collect()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn check_one(name: &str, cfg: &GradCheckConfig, config_idx: u64, corrupt: bool) -> f64 {
    let mut rng = seed::stream_rng(seed::mix(cfg.seed, &[hash_name(name), config_idx]), 0);
    match name {
        "dpo_bt" => {
            let scores: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            score_level_check(
                &scores,
                cfg.fd_step,
                corrupt,
                |g, ids| dpo_bt(g, ids[0], ids[1]).unwrap(),
            )
        }
        "listwise_pl" => {
            let k = 2 + (config_idx as usize % 7);
            let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
            score_level_check(&scores, cfg.fd_step, corrupt, |g, ids| {
                listwise_pl(g, ids).unwrap()
            })
        }
        "fm_loss" => fm_loss_check(cfg, &mut rng, config_idx, corrupt),
        _ => flow_loss_check(name, cfg, &mut rng, config_idx, corrupt),
    }
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0u64, |acc, b| acc.wrapping_mul(31).wrapping_add(b as u64))
}

/// FD over plain score leaves.
fn score_level_check(
    scores: &[f64],
    h: f64,
    corrupt: bool,
    build: impl Fn(&mut Graph, &[crate::diffcore::NodeId]) -> crate::diffcore::NodeId,
) -> f64 {
    let eval = |vals: &[f64]| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let ids: Vec<_> = vals
            .iter()
            .map(|&s| g.leaf(crate::diffcore::Array::scalar(s), true))
            .collect();
        let node = build(&mut g, &ids);
        let value = g.value(node).item();
        let grads = g.backward(node).unwrap();
        let gvec = ids
            .iter()
            .map(|&id| grads.get(id).map_or(0.0, |a| a.item()))
            .collect();
        (value, gvec)
    };
    let (_, mut analytic) = eval(scores);
    if corrupt {
        analytic[0] += 1.0;
    }
    let mut vals = scores.to_vec();
    let mut max_rel = 0.0_f64;
    for i in 0..vals.len() {
        let orig = vals[i];
        vals[i] = orig + h;
        let (fp, _) = eval(&vals);
        vals[i] = orig - h;
        let (fm, _) = eval(&vals);
        vals[i] = orig;
        max_rel = max_rel.max(rel_err(analytic[i], (fp - fm) / (2.0 * h)));
    }
    max_rel
}

fn tiny_model_config(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        hidden: vec![6, 6],
        time_features: 4,
        periodic: false,
        conditioning: Vec::new(),
    }
}

/// FD over every parameter of a plain model under the FM loss.
fn fm_loss_check(cfg: &GradCheckConfig, rng: &mut ChaCha8Rng, config_idx: u64, corrupt: bool) -> f64 {
    let dim = 1 + (config_idx as usize % 3);
    let mut model = VelocityModel::new(&tiny_model_config(dim), rng.random()).unwrap();
    let batch: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let draw_seed: u64 = rng.random();
    let eval = |model: &VelocityModel| -> f64 {
        let mut g = Graph::new();
        let binding = model.bind(&mut g, Trainable::Frozen, true);
        let mut draw = seed::stream_rng(draw_seed, 0);
        let loss = fm_loss(
            &mut g,
            model,
            &binding,
            &batch,
            Schedule::LinearOt,
            1e-3,
            &mut draw,
        )
        .unwrap();
        g.value(loss).item()
    };
    // analytic pass
    let mut analytic: Vec<f64> = {
        let mut g = Graph::new();
        let binding = model.bind(&mut g, Trainable::All, true);
        let mut draw = seed::stream_rng(draw_seed, 0);
        let loss = fm_loss(
            &mut g,
            &model,
            &binding,
            &batch,
            Schedule::LinearOt,
            1e-3,
            &mut draw,
        )
        .unwrap();
        let grads = g.backward(loss).unwrap();
        binding
            .trainable_grads(&g, &grads)
            .iter()
            .flat_map(|a| a.data().to_vec())
            .collect()
    };
    if corrupt {
        analytic[0] += 1.0;
    }
    fd_over_model_params(&mut model, Trainable::All, &analytic, cfg.fd_step, eval)
}

/// FD over the adapter parameters of a model pair under a flow-level
/// preference loss.
fn flow_loss_check(
    name: &str,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    config_idx: u64,
    corrupt: bool,
) -> f64 {
    let dim = 1 + (config_idx as usize % 3);
    let k = 2 + (config_idx as usize % 5);
    let base = VelocityModel::new(&tiny_model_config(dim), rng.random()).unwrap();
    let mut pair = ModelPair::init_refinement(&base, 2, 1.0, rng.random()).unwrap();
    {
        let mut params = pair.opt_mut().params_mut(Trainable::AdaptersOnly);
        for (_, p) in params.iter_mut() {
            for v in p.data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
    }
    let beta = (10.0_f64).powf(rng.random_range(-1.0..1.0));
    let samples: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let energies: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ranked = rank_by_energy(samples, energies).unwrap();
    let pref = PreferenceConfig {
        beta,
        k,
        ..PreferenceConfig::default()
    };
    let pairs = draw_pairs(ranked.samples(), &pref, rng);

    let eval_loss = |p: &ModelPair| eval_flow_loss(name, p, &ranked, &pairs, beta);
    let mut analytic = {
        let mut g = Graph::new();
        let pb = bind_pair(&mut g, &pair);
        let node = build_flow_loss(name, &mut g, &pair, &pb, &ranked, &pairs, beta);
        let grads = g.backward(node).unwrap();
        pb.opt
            .trainable_grads(&g, &grads)
            .iter()
            .flat_map(|a| a.data().to_vec())
            .collect::<Vec<f64>>()
    };
    if corrupt {
        analytic[0] += 1.0;
    }
    fd_over_pair_adapters(&mut pair, &analytic, cfg.fd_step, eval_loss)
}

fn build_flow_loss(
    name: &str,
    g: &mut Graph,
    pair: &ModelPair,
    pb: &crate::preference::PairBinding,
    ranked: &RankedEnsemble,
    pairs: &[CouplingPair],
    beta: f64,
) -> crate::diffcore::NodeId {
    let sched = Schedule::LinearOt;
    match name {
        "flowdpo_pair" => {
            let w = &pairs[ranked.order()[0]];
            let l = &pairs[ranked.order()[ranked.len() - 1]];
            flowdpo_pair_loss(g, pair, pb, w, l, beta, sched).unwrap()
        }
        "epo_score" => epo_score(g, pair, pb, &pairs[0], beta, sched).unwrap(),
        "epo_list" => {
            epo_list_loss_with_pairs(g, pair, pb, ranked, pairs, beta, sched).unwrap()
        }
        "epo_pair" => {
            epo_pair_loss_with_pairs(g, pair, pb, ranked, pairs, beta, sched).unwrap()
        }
        other => unreachable!("unknown loss {other}"),
    }
}

fn eval_flow_loss(
    name: &str,
    pair: &ModelPair,
    ranked: &RankedEnsemble,
    pairs: &[CouplingPair],
    beta: f64,
) -> f64 {
    let mut g = Graph::new();
    let pb = bind_pair(&mut g, pair);
    let node = build_flow_loss(name, &mut g, pair, &pb, ranked, pairs, beta);
    g.value(node).item()
}

fn fd_over_model_params(
    model: &mut VelocityModel,
    set: Trainable,
    analytic: &[f64],
    h: f64,
    eval: impl Fn(&VelocityModel) -> f64,
) -> f64 {
    let n_params = model.params(set).len();
    let mut max_rel = 0.0_f64;
    let mut flat_idx = 0usize;
    for p in 0..n_params {
        let len = model.params(set)[p].1.numel();
        for i in 0..len {
            let orig = model.params(set)[p].1.data()[i];
            set_param(model, set, p, i, orig + h);
            let fp = eval(model);
            set_param(model, set, p, i, orig - h);
            let fm = eval(model);
            set_param(model, set, p, i, orig);
            max_rel = max_rel.max(rel_err(analytic[flat_idx], (fp - fm) / (2.0 * h)));
            flat_idx += 1;
        }
    }
    max_rel
}

fn set_param(model: &mut VelocityModel, set: Trainable, p: usize, i: usize, v: f64) {
    let mut params = model.params_mut(set);
    params[p].1.data_mut()[i] = v;
}

fn fd_over_pair_adapters(
    pair: &mut ModelPair,
    analytic: &[f64],
    h: f64,
    eval: impl Fn(&ModelPair) -> f64,
) -> f64 {
    let n_params = pair.opt().params(Trainable::AdaptersOnly).len();
    let mut max_rel = 0.0_f64;
    let mut flat_idx = 0usize;
    for p in 0..n_params {
        let len = pair.opt().params(Trainable::AdaptersOnly)[p].1.numel();
        for i in 0..len {
            let orig = pair.opt().params(Trainable::AdaptersOnly)[p].1.data()[i];
            set_param(pair.opt_mut(), Trainable::AdaptersOnly, p, i, orig + h);
            let fp = eval(pair);
            set_param(pair.opt_mut(), Trainable::AdaptersOnly, p, i, orig - h);
            let fm = eval(pair);
            set_param(pair.opt_mut(), Trainable::AdaptersOnly, p, i, orig);
            max_rel = max_rel.max(rel_err(analytic[flat_idx], (fp - fm) / (2.0 * h)));
            flat_idx += 1;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cfg = GradCheckConfig {
            configs_per_loss: 5,
            ..GradCheckConfig::default()
        };
        let rows = run(&cfg);
        assert_eq!(rows.len(), LOSS_NAMES.len());
        for r in &rows {
            assert!(r.pass, "{}: max rel err {}", r.loss, r.max_rel_err);
        }
        assert!(all_pass(&rows));
    }

    #[test]
    fn corrupted_gradient_fails_its_row_only() {
        let cfg = GradCheckConfig {
            configs_per_loss: 2,
            corrupt: Some("epo_list".into()),
            ..GradCheckConfig::default()
        };
        let rows = run(&cfg);
        for r in &rows {
            if r.loss == "epo_list" {
                assert!(!r.pass, "corrupted row must fail");
            } else {
                assert!(r.pass, "{} unexpectedly failed", r.loss);
            }
        }
        assert!(!all_pass(&rows));
    }

    #[test]
    fn suite_is_deterministic() {
        let cfg = GradCheckConfig {
            configs_per_loss: 3,
            ..GradCheckConfig::default()
        };
        let a = run(&cfg);
        let b = run(&cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_rel_err, y.max_rel_err);
        }
    }
}
