//! Run configuration: one JSON document with command-specific sections.
//!
//! Unknown keys are rejected everywhere, every field has a recorded
//! default, and the parsed struct round-trips losslessly; the effective
//! config (after CLI overrides) is what gets hashed and echoed into
//! metadata sidecars.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use epoflow::energy::{mueller_brown_classic, Potential};
use epoflow::flowmodel::Schedule;
use epoflow::preference::PreferenceConfig;
use epoflow::refine::RefineMethod;
use epoflow::sampler::SamplerConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub potential: Potential,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub preference: PreferenceConfig,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub conditioning: Vec<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![128, 128, 128],
            time_features: 16,
            conditioning: Vec::new(),
        }
    }
}

/// Metropolis-Hastings chain settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MhParams {
    pub n: usize,
    pub step: f64,
    pub burn_in: usize,
    pub thinning: usize,
}

impl Default for MhParams {
    fn default() -> Self {
        MhParams {
            n: 20_000,
            step: 0.5,
            burn_in: 2_000,
            thinning: 5,
        }
    }
}

/// Where pretraining data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    /// Samples straight from the Metropolis oracle chain.
    #[serde(rename = "mh-oracle")]
    MhOracle {
        #[serde(default)]
        mh: MhParams,
    },
    /// A rejection-split of the oracle stream: states are pooled by the
    /// sign of `x0 - boundary` and resampled to the requested fraction.
    #[serde(rename = "biased-wells")]
    BiasedWells {
        n: usize,
        boundary: f64,
        left_fraction: f64,
        mh: MhParams,
    },
    /// A samples CSV (`index,x0,...`).
    #[serde(rename = "csv")]
    Csv { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::MhOracle {
            mh: MhParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub source: DataSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: epoflow::flowmodel::LrSchedule,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            source: DataSource::default(),
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            lr_schedule: epoflow::flowmodel::LrSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub method: RefineMethod,
    pub iterations: u64,
    pub lists_per_iter: usize,
    pub lr: f64,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub checkpoint_every: u64,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            method: RefineMethod::EpoList,
            iterations: 1000,
            lists_per_iter: 4,
            lr: 1e-5,
            lora_rank: 4,
            lora_scale: 1.0,
            eval_every: 50,
            eval_samples: 5000,
            checkpoint_every: 500,
        }
    }
}

/// Reference ensemble for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum RefSource {
    #[serde(rename = "mh-oracle")]
    MhOracle {
        #[serde(default)]
        mh: MhParams,
    },
    #[serde(rename = "csv")]
    Csv { path: PathBuf },
}

impl Default for RefSource {
    fn default() -> Self {
        RefSource::MhOracle {
            mh: MhParams {
                n: 100_000,
                ..MhParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Histogram bounds per dimension; derived from the potential when
    /// absent.
    pub bounds: Option<Vec<(f64, f64)>>,
    pub bins: Vec<usize>,
    /// Interior mode-partition boundaries per dimension.
    pub partition: Option<Vec<Vec<f64>>>,
    pub lag: usize,
    pub tica_components: usize,
    pub reference: RefSource,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            bounds: None,
            bins: vec![200],
            partition: None,
            lag: 10,
            tica_components: 2,
            reference: RefSource::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            bail!(
                "config format_version {} unsupported (expected {})",
                self.format_version,
                CONFIG_FORMAT_VERSION
            );
        }
        self.potential
            .validate()
            .map_err(|e| anyhow::anyhow!("potential: {e}"))?;
        self.sampler
            .validate()
            .map_err(|e| anyhow::anyhow!("sampler: {e}"))?;
        self.preference
            .validate()
            .map_err(|e| anyhow::anyhow!("preference: {e}"))?;
        if let Some(bounds) = &self.metrics.bounds {
            if bounds.len() != self.potential.dim() {
                bail!(
                    "metrics.bounds rank {} does not match potential d={}",
                    bounds.len(),
                    self.potential.dim()
                );
            }
        }
        Ok(())
    }

    /// Histogram bounds, falling back to per-potential defaults.
    pub fn metric_bounds(&self) -> Vec<(f64, f64)> {
        if let Some(b) = &self.metrics.bounds {
            return b.clone();
        }
        default_bounds(&self.potential)
    }

    /// Per-dimension bin counts, repeating the last entry as needed.
    pub fn metric_bins(&self) -> Vec<usize> {
        let d = self.potential.dim();
        let mut bins = self.metrics.bins.clone();
        let last = *bins.last().unwrap_or(&200);
        bins.resize(d, last);
        bins.truncate(d);
        bins
    }

    /// Canonical serialization used for hashing and sidecars.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        use sha2::Digest;
        let mut h = sha2::Sha256::new();
        h.update(self.canonical_json().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Default evaluation bounds per potential family.
pub fn default_bounds(p: &Potential) -> Vec<(f64, f64)> {
    match p {
        Potential::DoubleWell1d { .. } => vec![(-3.0, 3.0)],
        Potential::GaussianMixture { means, .. } => {
            let d = p.dim();
            (0..d)
                .map(|i| {
                    let lo = means.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
                    let hi = means.iter().map(|m| m[i]).fold(f64::NEG_INFINITY, f64::max);
                    (lo - 5.0, hi + 5.0)
                })
                .collect()
        }
        Potential::MuellerBrown2d { .. } => vec![(-2.0, 1.5), (-0.8, 2.5)],
        Potential::PeriodicTorsion { .. } => {
            vec![(-std::f64::consts::PI, std::f64::consts::PI); p.dim()]
        }
    }
}

/// Named potential presets selectable with `--potential`.
pub fn potential_preset(name: &str) -> Result<Potential> {
    let p = match name {
        "double-well" => Potential::DoubleWell1d {
            a: 2.0,
            tilt: 0.0,
            kt: 1.0,
        },
        "double-well-tilted" => Potential::DoubleWell1d {
            a: 2.0,
            tilt: 0.5,
            kt: 1.0,
        },
        "mueller-brown" => Potential::MuellerBrown2d {
            terms: mueller_brown_classic(),
            kt: 15.0,
        },
        "torsion-2d" => Potential::PeriodicTorsion {
            coefficients: vec![vec![1.5, 0.0], vec![1.0, 0.8]],
            kt: 1.0,
        },
        other => bail!(
            "unknown potential preset `{other}` \
             (available: double-well, double-well-tilted, mueller-brown, torsion-2d)"
        ),
    };
    Ok(p)
}
