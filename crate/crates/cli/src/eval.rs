//! The eval command: distributional metrics between a model ensemble
//! and a reference ensemble, emitted as a JSON report plus CSV/SVG
//! artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use epoflow::checkpoint::Checkpoint;
use epoflow::metrics::{
    fes_grid, histogram, jsd_hist, jsd_probs, mode_masses, moments, normalize_probs, tica, w2_1d,
    w2_gauss, HistogramSpec, HISTOGRAM_SMOOTHING,
};
use epoflow::sampler::generate_ensemble;

use crate::commands::{reference_samples, Ctx};
use crate::output::{self, MetricEntry, Report, ReportInputs};
use crate::svg;

/// Where the evaluated ensemble comes from.
pub enum SamplesInput {
    Csv(PathBuf),
    Checkpoint { path: PathBuf, n: usize },
}

const DEFAULT_METRICS: [&str; 5] = ["jsd", "w2", "w2-gauss", "modes", "fes"];
const KNOWN_METRICS: [&str; 6] = ["jsd", "w2", "w2-gauss", "modes", "fes", "tica"];

pub fn cmd_eval(
    ctx: &Ctx,
    input: SamplesInput,
    reference_csv: Option<&Path>,
    metric_list: Option<&str>,
) -> Result<()> {
    let cfg = &ctx.config;
    let (samples, samples_name) = match input {
        SamplesInput::Csv(path) => {
            let s = output::read_samples_csv(&path)?;
            (s, path.display().to_string())
        }
        SamplesInput::Checkpoint { path, n } => {
            let ckpt = Checkpoint::load(&path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let sampler_cfg = epoflow::sampler::SamplerConfig {
                seed: cfg.seed,
                ..cfg.sampler
            };
            let s = generate_ensemble(&ckpt.model, n, &sampler_cfg, ckpt.schedule)?;
            (s, format!("{} (n={n})", path.display()))
        }
    };
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    let (reference, reference_name) = match reference_csv {
        Some(path) => (output::read_samples_csv(path)?, path.display().to_string()),
        None => reference_samples(cfg)?,
    };
    if reference.is_empty() {
        bail!("empty reference ensemble");
    }
    let d = samples[0].len();
    if reference[0].len() != d {
        bail!(
            "dimension mismatch: samples have d={d}, reference has d={}",
            reference[0].len()
        );
    }
    if d != cfg.potential.dim() {
        bail!(
            "dimension mismatch: samples have d={d}, potential has d={}",
            cfg.potential.dim()
        );
    }

    let requested: Vec<String> = match metric_list {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => DEFAULT_METRICS.iter().map(|s| s.to_string()).collect(),
    };
    for m in &requested {
        if !KNOWN_METRICS.contains(&m.as_str()) {
            bail!("unknown metric `{m}` (available: {})", KNOWN_METRICS.join(", "));
        }
    }

    let spec = HistogramSpec {
        bounds: cfg.metric_bounds(),
        bins: cfg.metric_bins(),
        periodic: vec![cfg.potential.is_periodic(); d],
    };
    let mut entries: Vec<MetricEntry> = Vec::new();

    for metric in &requested {
        match metric.as_str() {
            "jsd" => {
                let value = jsd_hist(&samples, &reference, &spec)?;
                entries.push(MetricEntry {
                    name: "jsd".into(),
                    value: Some(value),
                    values: None,
                    reference_values: None,
                    params: json!({
                        "bins": spec.bins,
                        "bounds": spec.bounds,
                        "log_base": "e",
                        "smoothing": HISTOGRAM_SMOOTHING,
                    }),
                    artifacts: vec![],
                });
            }
            "w2" => {
                if d == 1 {
                    let a: Vec<f64> = samples.iter().map(|s| s[0]).collect();
                    let b: Vec<f64> = reference.iter().map(|s| s[0]).collect();
                    entries.push(MetricEntry {
                        name: "w2_1d".into(),
                        value: Some(w2_1d(&a, &b)?),
                        values: None,
                        reference_values: None,
                        params: json!({"coupling": "quantile"}),
                        artifacts: vec![],
                    });
                } else {
                    log::warn!("w2 (1-D quantile) skipped: samples have d={d}");
                }
            }
            "w2-gauss" => {
                let (mu1, cov1) = moments(&samples)?;
                let (mu2, cov2) = moments(&reference)?;
                entries.push(MetricEntry {
                    name: "w2_gauss".into(),
                    value: Some(w2_gauss(&mu1, &cov1, &mu2, &cov2)?),
                    values: None,
                    reference_values: None,
                    params: json!({
                        "mean": mu1,
                        "reference_mean": mu2,
                    }),
                    artifacts: vec![],
                });
            }
            "modes" => {
                let Some(partition) = &cfg.metrics.partition else {
                    log::warn!("modes skipped: metrics.partition not configured");
                    continue;
                };
                let ours = mode_masses(&samples, partition)?;
                let theirs = mode_masses(&reference, partition)?;
                entries.push(MetricEntry {
                    name: "mode_masses".into(),
                    value: None,
                    values: Some(ours),
                    reference_values: Some(theirs),
                    params: json!({"partition": partition}),
                    artifacts: vec![],
                });
            }
            "fes" => {
                if d > 2 {
                    log::warn!("fes skipped: d={d} > 2");
                    continue;
                }
                let kt = cfg.potential.kt();
                let mut artifacts = Vec::new();
                for (set, tag) in [(&samples, "model"), (&reference, "reference")] {
                    let fes = fes_grid(set, &spec, kt)?;
                    let centers: Vec<Vec<f64>> =
                        (0..spec.total_bins()).map(|i| spec.center(i)).collect();
                    let csv_name = format!("fes_{tag}.csv");
                    output::write_text(
                        &ctx.out_dir.join(&csv_name),
                        &output::grid_to_csv(&centers, &fes.values, "fes"),
                    )?;
                    let svg_name = format!("fes_{tag}.svg");
                    let rendering = if d == 1 {
                        let xs: Vec<f64> = centers.iter().map(|c| c[0]).collect();
                        svg::line_plot(
                            &format!("free energy ({tag})"),
                            &xs,
                            &[("fes", &fes.values)],
                        )
                    } else {
                        svg::heatmap(
                            &format!("free energy ({tag})"),
                            &fes.values,
                            spec.bins[0],
                            spec.bins[1],
                            (spec.bounds[0], spec.bounds[1]),
                        )
                    };
                    output::write_text(&ctx.out_dir.join(&svg_name), &rendering)?;
                    artifacts.push(csv_name);
                    artifacts.push(svg_name);
                }
                let fes_model = fes_grid(&samples, &spec, kt)?;
                entries.push(MetricEntry {
                    name: "fes".into(),
                    value: None,
                    values: None,
                    reference_values: None,
                    params: json!({
                        "kt": kt,
                        "cap": fes_model.cap,
                        "bins": spec.bins,
                        "bounds": spec.bounds,
                    }),
                    artifacts,
                });
            }
            "tica" => {
                entries.push(tica_entry(cfg, &samples, &reference, d)?);
            }
            _ => unreachable!("validated above"),
        }
    }

    // histogram artifacts + 1-D overlay plot
    let h_model = histogram(&samples, &spec)?;
    let h_ref = histogram(&reference, &spec)?;
    let centers: Vec<Vec<f64>> = (0..spec.total_bins()).map(|i| spec.center(i)).collect();
    output::write_text(
        &ctx.out_dir.join("hist_model.csv"),
        &output::grid_to_csv(&centers, &h_model, "count"),
    )?;
    output::write_text(
        &ctx.out_dir.join("hist_reference.csv"),
        &output::grid_to_csv(&centers, &h_ref, "count"),
    )?;
    if d == 1 {
        let xs: Vec<f64> = centers.iter().map(|c| c[0]).collect();
        let pm = normalize_probs(&h_model);
        let pr = normalize_probs(&h_ref);
        output::write_text(
            &ctx.out_dir.join("hist.svg"),
            &svg::line_plot("sample densities", &xs, &[("model", &pm), ("reference", &pr)]),
        )?;
    }

    let report = Report {
        format_version: 1,
        config_hash: ctx.config_hash.clone(),
        inputs: ReportInputs {
            samples: samples_name,
            reference: reference_name,
            n_samples: samples.len(),
            n_reference: reference.len(),
            dim: d,
        },
        metrics: entries,
    };
    output::write_json(&ctx.out_dir.join("report.json"), &report)?;
    log::info!(
        "wrote report with {} metric entries to {}",
        report.metrics.len(),
        ctx.out_dir.join("report.json").display()
    );
    Ok(())
}

/// TIC-space divergences: fit on the reference trajectory, project both
/// ensembles, compare histograms over the leading components.
fn tica_entry(
    cfg: &crate::config::RunConfig,
    samples: &[Vec<f64>],
    reference: &[Vec<f64>],
    d: usize,
) -> Result<MetricEntry> {
    let lag = cfg.metrics.lag;
    let n_components = cfg.metrics.tica_components.min(d).max(1);
    let (model, ref_proj) = tica(reference, lag, n_components)?;
    let sample_proj: Vec<Vec<f64>> = samples.iter().map(|x| model.project(x)).collect();

    // binning over the empirical range of the reference projection
    let bins_per_dim = 50usize;
    let mut values = Vec::new();
    let mut names = Vec::new();
    {
        let bounds = projection_bounds(&ref_proj, 1);
        let spec = HistogramSpec::new(bounds, vec![bins_per_dim]);
        let take1 = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
            set.iter().map(|p| vec![p[0]]).collect()
        };
        let pm = normalize_probs(&histogram(&take1(&sample_proj), &spec)?);
        let pr = normalize_probs(&histogram(&take1(&ref_proj), &spec)?);
        values.push(jsd_probs(&pm, &pr));
        names.push("tic0");
    }
    if n_components >= 2 {
        let bounds = projection_bounds(&ref_proj, 2);
        let spec = HistogramSpec::new(bounds, vec![bins_per_dim, bins_per_dim]);
        let take2 = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
            set.iter().map(|p| vec![p[0], p[1]]).collect()
        };
        let pm = normalize_probs(&histogram(&take2(&sample_proj), &spec)?);
        let pr = normalize_probs(&histogram(&take2(&ref_proj), &spec)?);
        values.push(jsd_probs(&pm, &pr));
        names.push("tic01");
    }
    Ok(MetricEntry {
        name: "tica_jsd".into(),
        value: None,
        values: Some(values),
        reference_values: None,
        params: json!({
            "components": names,
            "lag": lag,
            "bins_per_dim": bins_per_dim,
            "eigenvalues": model.eigenvalues,
            "log_base": "e",
        }),
        artifacts: vec![],
    })
}

fn projection_bounds(proj: &[Vec<f64>], dims: usize) -> Vec<(f64, f64)> {
    (0..dims)
        .map(|k| {
            let lo = proj.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let hi = proj.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            let pad = 1e-9 * (hi - lo).abs().max(1.0);
            (lo - pad, hi + pad)
        })
        .collect()
}
