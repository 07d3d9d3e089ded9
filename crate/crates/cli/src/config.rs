//! Experiment configuration: JSON schema, defaults, and validation.

use std::path::PathBuf;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use twonoise_core::driving::OuSpec;
use twonoise_core::integrator::{SemilinearModel, StepScheme};
use twonoise_core::navier_stokes::{as_semilinear, NsModelSpec, SpectralGrid};
use twonoise_core::oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    OracleValidate,
    EvoPullback,
    FlowCheck,
    KrylovBogoliubov,
    Asf,
    Lyapunov,
    Mixing,
    NsEnergy,
    SmallBall,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::OracleValidate => "oracle-validate",
            Experiment::EvoPullback => "evo-pullback",
            Experiment::FlowCheck => "flow-check",
            Experiment::KrylovBogoliubov => "krylov-bogoliubov",
            Experiment::Asf => "asf",
            Experiment::Lyapunov => "lyapunov",
            Experiment::Mixing => "mixing",
            Experiment::NsEnergy => "ns-energy",
            Experiment::SmallBall => "small-ball",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Example1d,
    Ns2d {
        #[serde(default = "default_grid_n")]
        n: usize,
        #[serde(default = "default_viscosity")]
        viscosity: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_trace_c")]
        trace_c: f64,
        #[serde(default = "default_coupling_gain")]
        coupling_gain: f64,
        #[serde(default = "default_driving_modes")]
        driving_modes: usize,
    },
}

fn default_grid_n() -> usize {
    32
}
fn default_viscosity() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    3.0
}
fn default_trace_c() -> f64 {
    1.0
}
fn default_coupling_gain() -> f64 {
    0.25
}
fn default_driving_modes() -> usize {
    10
}

/// The numerical knobs. Every referenced horizon must be a grid multiple of
/// `dt`; validation enforces it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Numerics {
    pub dt: f64,
    #[serde(default = "default_t_hist")]
    pub t_hist: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Ensemble size N.
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    /// Secondary count M: driving realizations, coupling pairs, probes.
    #[serde(default = "default_n_secondary")]
    pub n_secondary: usize,
    #[serde(default)]
    pub s_list: Option<Vec<f64>>,
    #[serde(default)]
    pub t_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub checkpoints: Option<Vec<f64>>,
    #[serde(default)]
    pub gammas: Option<Vec<f64>>,
    #[serde(default)]
    pub metric_ns: Option<Vec<u32>>,
    #[serde(default)]
    pub asf_horizons: Option<Vec<f64>>,
    #[serde(default = "default_t_block")]
    pub t_block: f64,
    #[serde(default = "default_m_small")]
    pub m_small: f64,
    #[serde(default = "default_rho1")]
    pub rho1: f64,
    #[serde(default = "default_delta1")]
    pub delta1: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: f64,
    #[serde(default = "default_thin")]
    pub thin: f64,
    #[serde(default = "default_delta_couple")]
    pub delta_couple: f64,
    #[serde(default = "default_attempt_every")]
    pub attempt_every: usize,
}

fn default_t_hist() -> f64 {
    10.0
}
fn default_horizon() -> f64 {
    2.0
}
fn default_n_paths() -> usize {
    4096
}
fn default_n_secondary() -> usize {
    8
}
fn default_t_block() -> f64 {
    0.25
}
fn default_m_small() -> f64 {
    2.0
}
fn default_rho1() -> f64 {
    2.0
}
fn default_delta1() -> f64 {
    0.5
}
fn default_burn_in() -> f64 {
    20.0
}
fn default_thin() -> f64 {
    0.5
}
fn default_delta_couple() -> f64 {
    0.1
}
fn default_attempt_every() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub driving: u64,
    pub wiener: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: ModelConfig,
    pub numerics: Numerics,
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Frozen driving realization (JSON written by a previous run); when
    /// set, single-realization experiments reuse it instead of sampling a
    /// fresh one.
    #[serde(default)]
    pub driving_path: Option<PathBuf>,
}

/// The assembled model plus everything experiments need to know about it.
pub struct BuiltModel {
    pub model: SemilinearModel,
    pub driver: OuSpec,
    pub is_example1d: bool,
    pub grid: Option<SpectralGrid>,
    pub ns_spec: Option<NsModelSpec>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let dt = self.numerics.dt;
        if !(dt > 0.0) {
            bail!("numerics.dt must be positive");
        }
        let check = |value: f64, field: &str| -> Result<()> {
            let n = (value / dt).round();
            if (value - n * dt).abs() > 1e-9 * dt.max(value.abs()) {
                bail!("numerics.dt = {dt} does not divide {field} = {value}");
            }
            Ok(())
        };
        check(self.numerics.horizon, "numerics.horizon")?;
        check(self.numerics.t_hist, "numerics.t_hist")?;
        check(self.numerics.t_block, "numerics.t_block")?;
        check(self.numerics.burn_in, "numerics.burn_in")?;
        check(self.numerics.thin, "numerics.thin")?;
        for (name, list) in [
            ("numerics.s_list", &self.numerics.s_list),
            ("numerics.t_grid", &self.numerics.t_grid),
            ("numerics.checkpoints", &self.numerics.checkpoints),
            ("numerics.asf_horizons", &self.numerics.asf_horizons),
        ] {
            if let Some(values) = list {
                for v in values {
                    check(*v, name)?;
                }
            }
        }
        if self.seeds.driving == self.seeds.wiener {
            bail!("seeds.driving and seeds.wiener must differ (disjoint noise domains)");
        }
        if self.numerics.n_paths == 0 {
            bail!("numerics.n_paths must be at least 1");
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<BuiltModel> {
        match &self.model {
            ModelConfig::Example1d => Ok(BuiltModel {
                model: oracle::example1d_model(),
                driver: oracle::example1d_driver(),
                is_example1d: true,
                grid: None,
                ns_spec: None,
            }),
            ModelConfig::Ns2d {
                n,
                viscosity,
                alpha,
                trace_c,
                coupling_gain,
                driving_modes,
            } => {
                let grid = SpectralGrid::new(*n)?;
                let spec = NsModelSpec {
                    viscosity: *viscosity,
                    alpha: *alpha,
                    trace_c: *trace_c,
                    coupling_gain: *coupling_gain,
                    driving_modes: *driving_modes,
                };
                let model = as_semilinear(&spec, &grid)?;
                Ok(BuiltModel {
                    model,
                    driver: spec.ou_driver(),
                    is_example1d: false,
                    grid: Some(grid),
                    ns_spec: Some(spec),
                })
            }
        }
    }

    pub fn scheme(&self) -> StepScheme {
        StepScheme::exponential_euler(self.numerics.dt)
    }
}
