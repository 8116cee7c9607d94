//! Experiment configuration: one TOML file, every key optional, unknown keys
//! rejected. Any key can be overridden from the environment as
//! `SDEX_<SECTION>_<KEY>` (or `SDEX_<KEY>` for top-level keys), e.g.
//! `SDEX_BS_M_TRAJECTORIES=10` or `SDEX_MASTER_SEED=7`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use sdex::circuit::{CrossbarConfig, RestState};
use sdex::device::DeviceSpec;
use sdex::energy::PulseModel;
use sdex::gauss::DEFAULT_CALIB_N;
use sdex::sde::BlackScholesParams;

pub const ENV_PREFIX: &str = "SDEX_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub crossbar: CrossbarConfig,
    pub device: DeviceSpec,
    pub pulse: PulseModel,
    pub rng: RngExperiment,
    pub bs: BsExperiment,
    pub thresholds: Thresholds,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 2022,
            crossbar: CrossbarConfig::default(),
            device: DeviceSpec::default(),
            pulse: PulseModel::default(),
            rng: RngExperiment::default(),
            bs: BsExperiment::default(),
            thresholds: Thresholds::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Gaussian-source characterization on a large tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RngExperiment {
    pub rows: usize,
    pub cols: usize,
    /// Word line holding the pairs.
    pub word_line: usize,
    pub n_vectors: usize,
    pub vector_len: usize,
    pub calib_n: usize,
    /// State of every device outside the pairs.
    pub unused: RestState,
}

impl Default for RngExperiment {
    fn default() -> Self {
        Self {
            rows: 32,
            cols: 32,
            word_line: 0,
            n_vectors: 500,
            vector_len: 16,
            calib_n: DEFAULT_CALIB_N,
            unused: RestState::Lrs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BsExperiment {
    pub r: f64,
    pub sigma: f64,
    pub x0: f64,
    pub t1: f64,
    pub n_steps: usize,
    pub m_trajectories: usize,
    /// VMM input range, in units of x0.
    pub x_max_factor: f64,
    pub calib_n: usize,
    /// Steps of trajectory 0 whose source-tile currents are written out.
    pub trace_steps: usize,
    /// Write every state of every trajectory.
    pub dump_paths: bool,
}

impl Default for BsExperiment {
    fn default() -> Self {
        let p = BlackScholesParams::default();
        Self {
            r: p.r,
            sigma: p.sigma,
            x0: p.x0,
            t1: 1.0,
            n_steps: 100,
            m_trajectories: 1000,
            x_max_factor: 8.0,
            calib_n: DEFAULT_CALIB_N,
            trace_steps: 16,
            dump_paths: false,
        }
    }
}

impl BsExperiment {
    pub fn params(&self) -> BlackScholesParams {
        BlackScholesParams {
            r: self.r,
            sigma: self.sigma,
            x0: self.x0,
        }
    }
}

/// Pass/fail limits of every command's verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub rng_moment_max: f64,
    pub rng_mean_se: f64,
    pub rng_std_ratio_tol: f64,
    pub bs_mean_se: f64,
    pub bs_var_rel: f64,
    pub bs_ks_max: f64,
    /// Largest skew difference accepted when writes are exact.
    pub bs_skew_exact_max: f64,
    pub energy_factor: f64,
    pub pair_energy_j: f64,
    pub total_energy_j: f64,
    pub read_energy_j: f64,
    pub write_ops: f64,
    pub write_ops_rel: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            rng_moment_max: 0.6,
            rng_mean_se: 3.0,
            rng_std_ratio_tol: 0.05,
            bs_mean_se: 3.0,
            bs_var_rel: 0.10,
            bs_ks_max: 0.08,
            bs_skew_exact_max: 0.15,
            energy_factor: 2.0,
            pair_energy_j: 0.8e-6,
            total_energy_j: 0.16,
            read_energy_j: 3e-6,
            write_ops: 200_000.0,
            write_ops_rel: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

const SECTIONS: [&str; 7] = ["crossbar", "device", "pulse", "rng", "bs", "thresholds", "output"];

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`) and applies the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            apply_override(&mut table, &key, &raw)?;
        }
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.crossbar.validate()?;
        self.device.validate()?;
        self.bs.params().validate()?;
        if !(self.bs.t1 > 0.0) {
            bail!("bs.t1 must be positive");
        }
        if !(self.bs.x_max_factor > 0.0) {
            bail!("bs.x_max_factor must be positive");
        }
        Ok(())
    }
}

fn apply_override(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let rest = key[ENV_PREFIX.len()..].to_ascii_lowercase();
    let (section, field) = match SECTIONS
        .iter()
        .find(|s| rest.starts_with(&format!("{s}_")))
    {
        Some(s) => (Some(*s), rest[s.len() + 1..].to_string()),
        None => (None, rest),
    };
    let value = parse_scalar(raw);
    let target = match section {
        Some(s) => table
            .entry(s)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("config key {s} is not a section"))?,
        None => table,
    };
    target.insert(field, value);
    Ok(())
}

/// TOML scalar syntax first (numbers, booleans, quoted strings), bare text
/// otherwise.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
