//! Run configuration files.
//!
//! A config is a JSON object; every field except `system` and `schedule` has
//! a default. Example:
//!
//! ```json
//! {
//!   "system": { "name": "moving_mean" },
//!   "schedule": { "epsilon": 0.6666666666666666, "steps": 4 },
//!   "gauge": { "kind": "polynomial", "order": 5 },
//!   "seed": 7,
//!   "output_dir": "out/moving_mean"
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::analytic_gauge_moving_mean;
use crate::error::{ChmcError, Result};
use crate::gauge::{Activation, GaugeKind};
use crate::smc::{FitLambda, GaugeChoice, RunSettings};
use crate::systems::{make_benchmark, make_linear_schedule, BenchmarkName, HamiltonianProblem, MixtureParams, Schedule};
use crate::training::FitConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "CHMC_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub name: BenchmarkName,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub mixture: MixtureParams,
}

fn one() -> usize {
    1
}

/// Either `{epsilon, steps}` for `lambda(t) = 0.5 t` sampled at `steps` grid
/// points, or `{epsilon, lambdas}` for an explicit grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ScheduleConfig {
    Linear { epsilon: f64, steps: usize },
    Grid { epsilon: f64, lambdas: Vec<f64> },
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        match self {
            ScheduleConfig::Linear { epsilon, steps } => make_linear_schedule(*epsilon, *steps),
            ScheduleConfig::Grid { epsilon, lambdas } => Schedule::from_grid(lambdas.clone(), *epsilon),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GaugeConfig {
    Polynomial {
        #[serde(default = "default_order")]
        order: usize,
    },
    Mlp {
        #[serde(default = "default_hidden")]
        hidden_sizes: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    /// `A = p`, held fixed. Only valid for the 1-D moving-mean system.
    AnalyticMovingMean,
    None,
}

fn default_order() -> usize {
    5
}

fn default_hidden() -> Vec<usize> {
    vec![32, 64]
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for GaugeConfig {
    fn default() -> Self {
        GaugeConfig::Polynomial { order: default_order() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub gauge: GaugeConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub fit_lambda: FitLambda,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    #[serde(default = "default_threshold")]
    pub resample_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// Run with `A = 0` regardless of `gauge`.
    #[serde(default)]
    pub baseline: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub deterministic: bool,
}

fn default_particles() -> usize {
    1000
}

fn default_refresh() -> usize {
    2
}

fn default_threshold() -> f64 {
    0.5
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("chmc-out")
}

fn yes() -> bool {
    true
}

/// Everything a run needs, built and checked from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub problem: HamiltonianProblem,
    pub schedule: Schedule,
    pub settings: RunSettings,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| ChmcError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ChmcError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Output directory after applying the `CHMC_OUTPUT_DIR` override.
    pub fn effective_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.output_dir.clone(),
        }
    }

    fn gauge_choice(&self) -> Result<GaugeChoice> {
        if self.baseline {
            return Ok(GaugeChoice::None);
        }
        Ok(match &self.gauge {
            GaugeConfig::Polynomial { order } => {
                if *order < 1 {
                    return Err(ChmcError::Config("gauge.order must be at least 1".into()));
                }
                GaugeChoice::Learned(GaugeKind::Polynomial { order: *order })
            }
            GaugeConfig::Mlp { hidden_sizes, activation } => {
                if hidden_sizes.is_empty() || hidden_sizes.contains(&0) {
                    return Err(ChmcError::Config("gauge.hidden_sizes must be nonempty and positive".into()));
                }
                GaugeChoice::Learned(GaugeKind::Mlp { hidden_sizes: hidden_sizes.clone(), activation: *activation })
            }
            GaugeConfig::AnalyticMovingMean => {
                if self.system.name != BenchmarkName::MovingMean || self.system.dim != 1 {
                    return Err(ChmcError::Config(
                        "gauge analytic_moving_mean requires the 1-D moving_mean system".into(),
                    ));
                }
                GaugeChoice::Fixed(analytic_gauge_moving_mean())
            }
            GaugeConfig::None => GaugeChoice::None,
        })
    }

    /// Validates every field and builds the run inputs without doing any sampling.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        if self.system.dim < 1 {
            return Err(ChmcError::Config("system.dim must be at least 1".into()));
        }
        let problem = make_benchmark(self.system.name, self.system.dim, self.system.mixture)?;
        let schedule = self.schedule.build()?;
        let settings = RunSettings {
            gauge: self.gauge_choice()?,
            fit: self.fit.clone(),
            fit_lambda: self.fit_lambda,
            n_particles: self.n_particles,
            refresh_every: self.refresh_every,
            resample_threshold: self.resample_threshold,
            seed: self.seed,
            deterministic: self.deterministic,
        };
        settings.validate()?;
        Ok(ResolvedRun { problem, schedule, settings, output_dir: self.effective_output_dir() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"system": {"name": "moving_mean"}, "schedule": {"epsilon": 0.6666666666666666, "steps": 4}}"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.n_particles, 1000);
        assert_eq!(c.refresh_every, 2);
        assert_eq!(c.gauge, GaugeConfig::Polynomial { order: 5 });
        assert_eq!(c.fit, FitConfig::default());
        assert!(c.deterministic && !c.baseline);
        let r = c.resolve().unwrap();
        assert_eq!(r.schedule.len(), 4);
    }

    #[test]
    fn round_trip() {
        let text = r#"{
            "system": {"name": "mixture_path", "mixture": {"a": 1.5, "sigma": 0.3}},
            "schedule": {"epsilon": 0.1, "lambdas": [0.0, 0.25, 0.5, 1.0]},
            "gauge": {"kind": "mlp", "activation": "tanh"},
            "fit": {"iterations": 50},
            "fit_lambda": "target",
            "seed": 11, "baseline": false, "output_dir": "x/y"
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        let again = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.gauge, GaugeConfig::Mlp { hidden_sizes: vec![32, 64], activation: Activation::Tanh });
    }

    #[test]
    fn endpoint_error_names_constraint() {
        let c = RunConfig::from_json(r#"{"system": {"name": "annealing"}, "schedule": {"epsilon": 0.5, "steps": 4}}"#)
            .unwrap();
        let e = c.resolve().unwrap_err();
        assert_eq!(e.kind(), "config");
        assert!(e.to_string().contains("end at lambda = 1"), "{e}");
    }

    #[test]
    fn rejects_bad_fields() {
        for bad in [
            r#"{"system": {"name": "nope"}, "schedule": {"epsilon": 1.0, "steps": 3}}"#,
            r#"{"system": {"name": "annealing"}, "schedule": {"epsilon": 1.0, "steps": 3}, "typo": 1}"#,
            r#"{"system": {"name": "annealing"}, "schedule": {"epsilon": 1.0}}"#,
        ] {
            assert!(RunConfig::from_json(bad).is_err(), "{bad}");
        }
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.n_particles = 1;
        assert!(c.resolve().is_err());
        c.n_particles = 10;
        c.resample_threshold = 1.5;
        assert!(c.resolve().is_err());
        c.resample_threshold = 0.5;
        c.system.name = BenchmarkName::Annealing;
        c.gauge = GaugeConfig::AnalyticMovingMean;
        assert!(c.resolve().is_err());
    }
}
