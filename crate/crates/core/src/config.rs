//! Run configuration: a TOML file with dotted section keys
//! (`system.t0_mhz = 900`), `--section.key value` flag overrides and the
//! `SPINFORGE_SEED` environment variable. Precedence: flags > env > file > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::gates::Gate;
use crate::model::SystemParams;
use crate::noise::NoiseSpec;
use crate::optimize::OptimizationConfig;
use crate::pulse::FilterModel;

pub const SEED_ENV: &str = "SPINFORGE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    CharacterizeNoise,
    Optimize,
    Evaluate,
    SweepSigma,
    SweepT0,
    SweepAlpha,
    SingleQubit,
    DephasingContribution,
    ExportPulse,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::CharacterizeNoise => "characterize-noise",
            Command::Optimize => "optimize",
            Command::Evaluate => "evaluate",
            Command::SweepSigma => "sweep-sigma",
            Command::SweepT0 => "sweep-t0",
            Command::SweepAlpha => "sweep-alpha",
            Command::SingleQubit => "single-qubit",
            Command::DephasingContribution => "dephasing-contribution",
            Command::ExportPulse => "export-pulse",
        }
    }
}

/// Per-command inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub gate: Gate,
    /// Pulse-coefficient file (fine-tuned pulse, or warm start for `optimize`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pulse: Option<PathBuf>,
    /// Optional stage-1 pulse, evaluated without the filter in the sweeps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unfiltered_pulse: Option<PathBuf>,
    /// Evaluate `pulse` through the waveform filter.
    pub filtered: bool,
    /// Static tunnel-coupling offset for `evaluate`, MHz.
    pub alpha_t0_mhz: f64,
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs {
            gate: Gate::Cnot,
            pulse: None,
            unfiltered_pulse: None,
            filtered: true,
            alpha_t0_mhz: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSettings {
    /// Noise realizations per ensemble.
    pub realizations: usize,
    pub sigma_values_mhz: Vec<f64>,
    /// Tunnel-coupling offsets as fractions of t0.
    pub alpha_t0_fractions: Vec<f64>,
    pub spectral_alphas: Vec<f64>,
    pub tau_max_ns: f64,
    pub tau_points: usize,
    /// Target single-qubit Ramsey T2* for the Zeeman-noise calibration, µs.
    pub ramsey_t2_us: f64,
    pub ramsey_exponent: f64,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            realizations: 1000,
            sigma_values_mhz: vec![
                240.0, 600.0, 1200.0, 2400.0, 4800.0, 6000.0, 10_000.0, 20_000.0, 40_000.0,
            ],
            alpha_t0_fractions: vec![0.0, 0.005, 0.01, 0.02, 0.03, 0.05, 0.08, 0.10, 0.12],
            spectral_alphas: vec![0.7, 0.8, 0.9, 1.01],
            tau_max_ns: 25_000.0,
            tau_points: 200,
            ramsey_t2_us: 120.0,
            ramsey_exponent: 2.0,
        }
    }
}

impl ExperimentSettings {
    pub fn tau_grid(&self) -> Vec<f64> {
        let m = (self.tau_points - 1) as f64;
        (0..self.tau_points)
            .map(|k| self.tau_max_ns * k as f64 / m)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::invalid("experiments.realizations", "must be >= 1"));
        }
        if self.tau_points < 2 || !(self.tau_max_ns > 0.0) {
            return Err(Error::invalid(
                "experiments.tau_points",
                "need at least 2 points and tau_max_ns > 0",
            ));
        }
        if self.sigma_values_mhz.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid(
                "experiments.sigma_values_mhz",
                "values must be >= 0",
            ));
        }
        if self
            .spectral_alphas
            .iter()
            .any(|a| !(0.5..=3.0).contains(a))
        {
            return Err(Error::invalid(
                "experiments.spectral_alphas",
                "values must lie in [0.5, 3]",
            ));
        }
        if !(self.ramsey_t2_us > 0.0) || !(self.ramsey_exponent > 0.0) {
            return Err(Error::invalid(
                "experiments.ramsey_t2_us",
                "T2* and exponent must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub inputs: Inputs,
    pub system: SystemParams,
    pub noise: NoiseSpec,
    pub optimization: OptimizationConfig,
    pub filter: FilterModel,
    pub experiments: ExperimentSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            output_dir: PathBuf::from("out"),
            master_seed: 1,
            threads: 0,
            inputs: Inputs::default(),
            system: SystemParams::default(),
            noise: NoiseSpec::default(),
            optimization: OptimizationConfig::default(),
            filter: FilterModel::default(),
            experiments: ExperimentSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.noise.validate()?;
        self.optimization.validate()?;
        self.filter.validate()?;
        self.experiments.validate()
    }

    /// Optimization settings with the master seed applied.
    pub fn optimization(&self) -> OptimizationConfig {
        OptimizationConfig {
            seed: self.master_seed,
            ..self.optimization
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }
}

/// Flag value as a TOML scalar or array; bare words become strings.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `--system.t0-mhz` → `system.t0_mhz`
pub fn normalize_key(flag: &str) -> String {
    flag.trim_start_matches('-').replace('-', "_")
}

fn insert_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn has_path(table: &Table, key: &str) -> bool {
    let mut cur = table;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        match cur.get(part) {
            Some(Value::Table(t)) if parts.peek().is_some() => cur = t,
            Some(_) if parts.peek().is_none() => return true,
            _ => return false,
        }
    }
    false
}

fn decode(table: &Table) -> std::result::Result<RunConfig, String> {
    RunConfig::deserialize(Value::Table(table.clone())).map_err(|e| e.to_string())
}

/// Build a validated configuration from an optional file, `(key, raw value)`
/// overrides and the value of `SPINFORGE_SEED`, if set.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
    env_seed: Option<&str>,
) -> Result<RunConfig> {
    let source = file.map_or("defaults".to_string(), |p| p.display().to_string());
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{source}: {e}")))?
        }
        None => Table::new(),
    };
    let from_file = table.clone();
    decode(&table).map_err(|e| Error::Config(format!("{source}: {e}")))?;

    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={raw}: not an unsigned integer")))?;
        table.insert("master_seed".into(), Value::Integer(seed as i64));
    }
    for (key, raw) in overrides {
        insert_path(&mut table, key, parse_value(raw))?;
        decode(&table).map_err(|e| Error::Config(format!("flag --{key}: {e}")))?;
    }

    let mut cfg = decode(&table).map_err(|e| Error::Config(e.to_string()))?;

    // gate-specific timing unless set explicitly
    let gate = cfg.inputs.gate;
    if gate != Gate::Cnot {
        let timing = OptimizationConfig::for_gate(gate);
        if !has_path(&table, "optimization.t_f_ns") {
            cfg.optimization.t_f = timing.t_f;
        }
        if !has_path(&table, "optimization.k_max") {
            cfg.optimization.k_max = timing.k_max;
        }
        if !has_path(&table, "optimization.steps") {
            cfg.optimization.steps = (cfg.optimization.t_f * 10.0).round() as usize;
        }
    }

    cfg.validate().map_err(|e| match e {
        Error::InvalidParameter { name, reason } => {
            let origin = if overrides.iter().any(|(k, _)| *k == name) {
                format!("flag --{name}")
            } else if has_path(&from_file, &name) {
                format!("{source}, key {name}")
            } else {
                name.clone()
            };
            Error::Config(format!("{origin}: {reason}"))
        }
        other => other,
    })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config(None, &[], None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.system.t0, 900.0);
        assert_eq!(cfg.noise.sigma, 2400.0);
        assert_eq!(cfg.filter.f_c_mhz, 425.4);
        assert_eq!(cfg.optimization.xi, 1e-6);
        assert_eq!(cfg.experiments.realizations, 1000);
    }

    #[test]
    fn dotted_keys_and_flag_precedence() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "system.t0_mhz = 850\nnoise.sigma_mhz = 1200\nmaster_seed = 4"
        )
        .unwrap();
        let ov = vec![("noise.sigma_mhz".to_string(), "0".to_string())];
        let cfg = parse_config(Some(f.path()), &ov, Some("17")).unwrap();
        assert_eq!(cfg.system.t0, 850.0);
        assert_eq!(cfg.noise.sigma, 0.0);
        assert_eq!(cfg.master_seed, 17);
        assert_eq!(cfg.optimization().seed, 17);
    }

    #[test]
    fn out_of_range_alpha_is_rejected_with_provenance() {
        let ov = vec![("noise.alpha".to_string(), "0.4".to_string())];
        let err = parse_config(None, &ov, None).unwrap_err().to_string();
        assert!(err.contains("flag --noise.alpha"), "{err}");
    }

    #[test]
    fn unknown_keys_report_the_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "[system]\nt0_mhz = 900\nbogus = 1").unwrap();
        let err = parse_config(Some(f.path()), &[], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus"), "{err}");
        let bad = vec![("system.nope".to_string(), "1".to_string())];
        let err = parse_config(None, &bad, None).unwrap_err().to_string();
        assert!(err.contains("flag --system.nope"), "{err}");
        assert!(parse_config(None, &[], Some("x")).is_err());
    }

    #[test]
    fn single_qubit_gates_get_their_own_timing() {
        let ov = vec![("inputs.gate".to_string(), "i-x".to_string())];
        let cfg = parse_config(None, &ov, None).unwrap();
        assert_eq!(cfg.optimization.t_f, 200.0);
        assert_eq!(cfg.optimization.k_max, 8);
        assert_eq!(cfg.optimization.steps, 2000);
    }

    #[test]
    fn manifest_round_trips() {
        let mut cfg = RunConfig {
            command: Some(Command::Evaluate),
            ..Default::default()
        };
        cfg.inputs.pulse = Some(PathBuf::from("out/cnot.pulse"));
        cfg.noise = cfg.noise.with_sigma(240.0);
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flag_values_parse_as_toml() {
        assert_eq!(parse_value("2400"), Value::Integer(2400));
        assert_eq!(parse_value("cnot"), Value::String("cnot".into()));
        assert_eq!(parse_value("[0.7, 1.01]").as_array().unwrap().len(), 2);
        assert_eq!(normalize_key("--system.t0-mhz"), "system.t0_mhz");
    }
}
