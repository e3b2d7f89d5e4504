//! Command-line front end: argument handling, run directories, manifests and
//! dispatch to the experiments.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::config::{normalize_key, parse_config, Command, RunConfig, SEED_ENV};
use crate::cost::{j1, CostBreakdown};
use crate::error::{Error, Result};
use crate::experiments::{
    calibrate_dephasing, dephasing_characterization, dephasing_contribution, ideal_cphase,
    quasi_static_t2, sigma_sweep, single_qubit_gates, spectral_alpha_sweep, t0_uncertainty_sweep,
    GateKind, GateUnderTest,
};
use crate::noise::{
    analytic_spectrum, build_bank, derive_seed, periodogram, sample_trajectory,
    DEFAULT_PROCESSES_PER_DECADE,
};
use crate::optimize::{constraint_check, optimize_fine_tune, optimize_stage1};
use crate::pulse::{apply_filter, max_field, sample_envelope, PulseParameterization};

#[derive(Debug, Parser)]
#[command(
    name = "spinforge",
    version,
    about = "Noise-robust pulse synthesis for double-dot spin qubits",
    after_help = "Any config key can be overridden as --section.key VALUE, e.g. --system.t0-mhz 880.\n\
                  SPINFORGE_SEED overrides master_seed. Exit codes: 0 ok, 2 config error, \
                  3 numerical failure, 4 constraint violation."
)]
pub struct Cli {
    /// Command to run; taken from the config file when omitted.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// TOML configuration (a previous run's manifest.toml replays that run).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Target gate: cnot, i-x, h-i, identity, cz.
    #[arg(long)]
    pub gate: Option<String>,
    /// Pulse-coefficient file.
    #[arg(long)]
    pub pulse: Option<PathBuf>,
    /// Detuning-noise standard deviation, MHz.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub master_seed: Option<u64>,
    /// Noise realizations per ensemble.
    #[arg(long, short = 'n')]
    pub realizations: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Evaluate pulses without the waveform filter.
    #[arg(long)]
    pub no_filter: bool,
}

/// (dotted key, raw value) pairs in command-line order.
pub type Overrides = Vec<(String, String)>;

/// Split `--section.key value` / `--section.key=value` pairs from the rest.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter().peekable();
    while let Some(a) = it.next() {
        let dotted = a.starts_with("--") && a.split('=').next().is_some_and(|k| k.contains('.'));
        if !dotted {
            rest.push(a.clone());
            continue;
        }
        let (key, value) = match a.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("flag {a} needs a value")))?;
                (a.clone(), v.clone())
            }
        };
        overrides.push((normalize_key(&key), value));
    }
    Ok((rest, overrides))
}

fn shortcut_overrides(cli: &Cli) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut push = |k: &str, v: String| out.push((k.to_string(), v));
    if let Some(c) = cli.command {
        push("command", format!("\"{}\"", c.name()));
    }
    if let Some(g) = &cli.gate {
        push("inputs.gate", g.to_ascii_lowercase());
    }
    if let Some(p) = &cli.pulse {
        push("inputs.pulse", toml_string(p));
    }
    if let Some(s) = cli.sigma {
        push("noise.sigma_mhz", format!("{s:?}"));
    }
    if let Some(d) = &cli.output_dir {
        push("output_dir", toml_string(d));
    }
    if let Some(s) = cli.master_seed {
        push("master_seed", s.to_string());
    }
    if let Some(n) = cli.realizations {
        push("experiments.realizations", n.to_string());
    }
    if let Some(t) = cli.threads {
        push("threads", t.to_string());
    }
    if cli.no_filter {
        push("inputs.filtered", "false".into());
    }
    out
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParameter { .. } => 2,
        Error::Constraint(_) => 4,
        _ => 3,
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let (rest, mut overrides) = match split_overrides(&args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut all = shortcut_overrides(&cli);
    all.append(&mut overrides);
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = match parse_config(cli.config.as_deref(), &all, env_seed.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if cfg.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match run(&cfg) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Fresh `run-<timestamp>-<seed>` directory under the output directory.
fn create_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f");
    let base = format!("run-{stamp}-{}", cfg.master_seed);
    for k in 0.. {
        let name = if k == 0 {
            base.clone()
        } else {
            format!("{base}-{k}")
        };
        let dir = cfg.output_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn write_manifest(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let header = format!(
        "# spinforge {} manifest, created {}\n# replay: spinforge --config {}\n",
        env!("CARGO_PKG_VERSION"),
        chrono::Local::now().to_rfc3339(),
        dir.join("manifest.toml").display()
    );
    fs::write(dir.join("manifest.toml"), header + &cfg.to_toml()?)?;
    Ok(())
}

fn csv_writer(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Execute the configured command, writing artifacts to a new run directory.
pub fn run(cfg: &RunConfig) -> Result<PathBuf> {
    let command = cfg
        .command
        .ok_or_else(|| Error::Config("no command given (argument or `command` key)".into()))?;
    let dir = create_run_dir(cfg)?;
    write_manifest(cfg, &dir)?;
    log::info!("{} → {}", command.name(), dir.display());
    match command {
        Command::CharacterizeNoise => characterize_noise(cfg, &dir)?,
        Command::Optimize => optimize(cfg, &dir)?,
        Command::Evaluate => evaluate(cfg, &dir)?,
        Command::SweepSigma => sweep_sigma(cfg, &dir)?,
        Command::SweepT0 => sweep_t0(cfg, &dir)?,
        Command::SweepAlpha => sweep_alpha(cfg, &dir)?,
        Command::SingleQubit => single_qubit(cfg, &dir)?,
        Command::DephasingContribution => dephasing(cfg, &dir)?,
        Command::ExportPulse => export_pulse(cfg, &dir)?,
    }
    Ok(dir)
}

fn load_pulse(path: Option<&PathBuf>) -> Result<PulseParameterization> {
    let path = path.ok_or_else(|| Error::Config("this command needs --pulse".into()))?;
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    PulseParameterization::from_text(&text)
}

fn pulse_gate(cfg: &RunConfig, pulses: &PulseParameterization) -> Result<GateUnderTest> {
    let (kind, filter) = if cfg.inputs.filtered {
        (GateKind::OptimalFineTuned, Some(&cfg.filter))
    } else {
        (GateKind::OptimalUnfiltered, None)
    };
    GateUnderTest::from_pulses(kind, pulses, cfg.inputs.gate.unitary(), filter)
}

/// Gates compared in the robustness sweeps.
fn sweep_gates(cfg: &RunConfig) -> Result<Vec<GateUnderTest>> {
    let mut gates = vec![GateUnderTest::ideal_cphase(&ideal_cphase(&cfg.system)?)];
    if let Some(path) = &cfg.inputs.unfiltered_pulse {
        let p = load_pulse(Some(path))?;
        gates.push(GateUnderTest::from_pulses(
            GateKind::OptimalUnfiltered,
            &p,
            cfg.inputs.gate.unitary(),
            None,
        )?);
    }
    if cfg.inputs.pulse.is_some() {
        gates.push(pulse_gate(cfg, &load_pulse(cfg.inputs.pulse.as_ref())?)?);
    }
    Ok(gates)
}

fn characterize_noise(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let n = cfg.experiments.realizations;
    let grid = cfg.experiments.tau_grid();
    let (curve, fit) =
        dephasing_characterization(&cfg.system, &cfg.noise, &grid, n, cfg.master_seed)?;
    curve.write_csv(csv_writer(dir, "dephasing_curve.csv")?, Some(&fit))?;
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "dephasing_fit.csv")?);
    wr.write_record([
        "t2_star_us",
        "frequency_MHz",
        "exponent",
        "residual_rms",
        "converged",
        "quasi_static_t2_us",
    ])?;
    wr.write_record([
        format!("{:.6}", fit.t2_star),
        format!("{:.6}", fit.frequency),
        format!("{:.4}", fit.exponent),
        format!("{:.3e}", fit.residual),
        fit.converged.to_string(),
        format!("{:.6}", quasi_static_t2(&cfg.system, cfg.noise.sigma)),
    ])?;
    wr.flush()?;
    log::info!(
        "T2* = {:.3} µs, a = {:.3}, residual {:.2e}",
        fit.t2_star,
        fit.exponent,
        fit.residual
    );

    // spectrum and example trajectories: 10 records of 2^20 samples at 1 µs
    let bank = build_bank(&cfg.noise, DEFAULT_PROCESSES_PER_DECADE)?;
    let (dt, len, count) = (1000.0, 1usize << 20, 10usize);
    let seed = derive_seed(cfg.master_seed, u64::MAX);
    let trajs = (0..count)
        .map(|i| sample_trajectory(&bank, dt, len, derive_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut freqs = Vec::new();
    let mut mean_psd = Vec::new();
    for t in &trajs {
        let (f, s) = periodogram(&t.samples, dt);
        if mean_psd.is_empty() {
            freqs = f;
            mean_psd = vec![0.0; s.len()];
        }
        for (m, v) in mean_psd.iter_mut().zip(s) {
            *m += v / count as f64;
        }
    }
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "noise_spectrum.csv")?);
    wr.write_record([
        "frequency_Hz",
        "psd_MHz2_per_Hz",
        "model_MHz2_per_Hz",
        "bins",
    ])?;
    for (f, s, nb) in log_bins(&freqs, &mean_psd, 20.0) {
        wr.write_record([
            format!("{f:.6e}"),
            format!("{s:.6e}"),
            format!("{:.6e}", 2.0 * analytic_spectrum(&cfg.noise, f)),
            nb.to_string(),
        ])?;
    }
    wr.flush()?;
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "noise_trajectories.csv")?);
    let mut header = vec!["time_ns".to_string()];
    header.extend((0..count).map(|i| format!("beta{i}_MHz")));
    wr.write_record(&header)?;
    for k in 0..5000 {
        let mut row = vec![format!("{}", k as f64 * dt)];
        row.extend(trajs.iter().map(|t| format!("{:.6}", t.samples[k])));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Geometric-mean frequency and mean density per logarithmic bin.
fn log_bins(freqs: &[f64], psd: &[f64], per_decade: f64) -> Vec<(f64, f64, usize)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    let mut current = i64::MIN;
    let (mut lf, mut s, mut n) = (0.0, 0.0, 0usize);
    for (f, v) in freqs.iter().zip(psd) {
        let b = (f.log10() * per_decade).floor() as i64;
        if b != current && n > 0 {
            out.push(((lf / n as f64).exp(), s / n as f64, n));
            lf = 0.0;
            s = 0.0;
            n = 0;
        }
        current = b;
        lf += f.ln();
        s += v;
        n += 1;
    }
    if n > 0 {
        out.push(((lf / n as f64).exp(), s / n as f64, n));
    }
    out
}

fn breakdown_record(stage: &str, b: &CostBreakdown, raw: f64, filtered: f64) -> [String; 8] {
    [
        stage.to_string(),
        format!("{:.9e}", b.j1),
        format!("{:.9e}", b.j2),
        format!("{:.9e}", b.fluence),
        format!("{:.3e}", b.xi),
        format!("{:.9e}", b.total),
        format!("{raw:.6}"),
        format!("{filtered:.6}"),
    ]
}

const SUMMARY_HEADER: [&str; 8] = [
    "stage",
    "j1",
    "j2",
    "fluence_mT2us",
    "xi",
    "total",
    "max_field_mT",
    "max_field_filtered_mT",
];

fn optimize(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ocfg = cfg.optimization();
    let target = cfg.inputs.gate.unitary();
    let warm = match &cfg.inputs.pulse {
        Some(p) => Some(load_pulse(Some(p))?),
        None => None,
    };
    let s1 = optimize_stage1(&ocfg, &cfg.system, &target, &cfg.noise, warm.as_ref())?;
    s1.write_csv(csv_writer(dir, "trace_stage1.csv")?)?;
    let name = cfg.inputs.gate.name();
    fs::write(dir.join(format!("{name}_stage1.pulse")), s1.best.to_text())?;
    let ft = optimize_fine_tune(
        &ocfg,
        &cfg.system,
        &target,
        &cfg.noise,
        &cfg.filter,
        &s1.best,
    )?;
    ft.write_csv(csv_writer(dir, "trace_fine_tune.csv")?)?;
    fs::write(dir.join(format!("{name}.pulse")), ft.best.to_text())?;
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "optimization_summary.csv")?);
    wr.write_record(SUMMARY_HEADER)?;
    for (stage, trace) in [("stage1", &s1), ("fine-tune", &ft)] {
        let c = constraint_check(&trace.best, &ocfg, &cfg.filter)?;
        wr.write_record(breakdown_record(
            stage,
            &trace.best_breakdown,
            c.unfiltered.channel_max(),
            c.filtered.channel_max(),
        ))?;
    }
    wr.flush()?;
    log::info!("fine-tuned {name}: {:?}", ft.best_breakdown);
    Ok(())
}

fn evaluate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let pulses = load_pulse(cfg.inputs.pulse.as_ref())?;
    let gate = pulse_gate(cfg, &pulses)?;
    let n = cfg.experiments.realizations;
    let a = cfg.inputs.alpha_t0_mhz;
    let res = gate.evaluate(&cfg.system, a, &cfg.noise, n, cfg.master_seed)?;
    let noiseless = j1(&cfg.system, &gate.waveform, &gate.target);
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "evaluation.csv")?);
    wr.write_record([
        "gate",
        "filtered",
        "sigma_MHz",
        "alpha_t0_MHz",
        "mean_infidelity",
        "std_error",
        "n",
        "j1",
    ])?;
    let row = [
        cfg.inputs.gate.name().to_string(),
        cfg.inputs.filtered.to_string(),
        format!("{}", cfg.noise.sigma),
        format!("{a}"),
        format!("{:.9e}", res.mean_infidelity),
        format!("{:.3e}", res.std_error),
        res.n_realizations.to_string(),
        format!("{noiseless:.9e}"),
    ];
    wr.write_record(&row)?;
    wr.flush()?;
    log::info!("⟨I⟩ = {:.4e} ± {:.1e}", res.mean_infidelity, res.std_error);
    Ok(())
}

fn sweep_sigma(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let gates = sweep_gates(cfg)?;
    let results = sigma_sweep(
        &cfg.system,
        &gates,
        &cfg.experiments.sigma_values_mhz,
        &cfg.noise,
        cfg.experiments.realizations,
        cfg.master_seed,
    )?;
    for r in &results {
        r.write_csv(csv_writer(
            dir,
            &format!("sigma_sweep_{}.csv", r.gate.name()),
        )?)?;
    }
    Ok(())
}

fn sweep_t0(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let values: Vec<f64> = cfg
        .experiments
        .alpha_t0_fractions
        .iter()
        .map(|f| f * cfg.system.t0)
        .collect();
    for g in sweep_gates(cfg)? {
        let r = t0_uncertainty_sweep(
            &cfg.system,
            &g,
            &values,
            &cfg.noise,
            cfg.experiments.realizations,
            cfg.master_seed,
        )?;
        r.write_csv(csv_writer(dir, &format!("t0_sweep_{}.csv", r.gate.name()))?)?;
    }
    Ok(())
}

fn sweep_alpha(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let warm = load_pulse(cfg.inputs.pulse.as_ref())?;
    let (res, pulses) = spectral_alpha_sweep(
        &cfg.system,
        &cfg.experiments.spectral_alphas,
        &cfg.noise,
        &cfg.optimization(),
        &cfg.filter,
        &warm,
        cfg.experiments.realizations,
        cfg.master_seed,
    )?;
    res.write_csv(csv_writer(dir, "alpha_sweep.csv")?)?;
    for (pt, p) in res.points.iter().zip(&pulses) {
        fs::write(dir.join(format!("cnot_alpha_{}.pulse", pt.x)), p.to_text())?;
    }
    Ok(())
}

fn single_qubit(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let outcomes = single_qubit_gates(
        &cfg.system,
        &cfg.noise,
        &cfg.optimization(),
        &cfg.filter,
        cfg.experiments.realizations,
        cfg.master_seed,
    )?;
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "single_qubit.csv")?);
    wr.write_record([
        "gate",
        "t_f_ns",
        "k_max",
        "j1",
        "j2",
        "sigma_MHz",
        "mean_infidelity",
        "std_error",
        "n",
    ])?;
    for o in &outcomes {
        let p = &o.optimized.fine_tuned;
        let b = &o.optimized.fine_tuned_breakdown;
        wr.write_record([
            o.gate.name().to_string(),
            format!("{}", p.t_f),
            p.k_max().to_string(),
            format!("{:.9e}", b.j1),
            format!("{:.9e}", b.j2),
            format!("{}", cfg.noise.sigma),
            format!("{:.9e}", o.result.mean_infidelity),
            format!("{:.3e}", o.result.std_error),
            o.result.n_realizations.to_string(),
        ])?;
        fs::write(dir.join(format!("{}.pulse", o.gate.name())), p.to_text())?;
    }
    wr.flush()?;
    Ok(())
}

fn dephasing(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let n = cfg.experiments.realizations;
    let cal = calibrate_dephasing(
        cfg.experiments.ramsey_t2_us,
        cfg.experiments.ramsey_exponent,
        n,
        cfg.master_seed,
    )?;
    cal.curve
        .write_csv(csv_writer(dir, "ramsey_calibration.csv")?, Some(&cal.fit))?;
    let mut gates = vec![GateUnderTest::ideal_cphase(&ideal_cphase(&cfg.system)?)];
    if cfg.inputs.pulse.is_some() {
        gates.push(pulse_gate(cfg, &load_pulse(cfg.inputs.pulse.as_ref())?)?);
    }
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "dephasing_contribution.csv")?);
    wr.write_record([
        "gate",
        "zeeman_sigma_MHz",
        "ramsey_t2_us",
        "mean_infidelity",
        "std_error",
        "n",
    ])?;
    for g in &gates {
        let r = dephasing_contribution(
            &cfg.system,
            &g.waveform,
            &g.target,
            &cal.spec,
            n,
            cfg.master_seed,
        )?;
        wr.write_record([
            g.kind.name().to_string(),
            format!("{:.6e}", cal.spec.sigma),
            format!("{:.4}", cal.fit.t2_star),
            format!("{:.9e}", r.mean_infidelity),
            format!("{:.3e}", r.std_error),
            r.n_realizations.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn export_pulse(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let pulses = load_pulse(cfg.inputs.pulse.as_ref())?;
    let raw = sample_envelope(&pulses, crate::experiments::EVAL_DT)?;
    let filt = apply_filter(&raw, &cfg.filter)?;
    let mut wr = csv::Writer::from_writer(csv_writer(dir, "waveform.csv")?);
    wr.write_record([
        "time_ns",
        "omega_x_mT",
        "omega_y_mT",
        "omega_x_filtered_mT",
        "omega_y_filtered_mT",
    ])?;
    for k in 0..raw.omega_x.len() {
        wr.write_record([
            format!("{}", k as f64 * raw.dt),
            format!("{:.12e}", raw.omega_x[k]),
            format!("{:.12e}", raw.omega_y[k]),
            format!("{:.12e}", filt.omega_x[k]),
            format!("{:.12e}", filt.omega_y[k]),
        ])?;
    }
    wr.flush()?;
    fs::write(dir.join("pulse.txt"), pulses.to_text())?;
    log::info!(
        "peak field {:.4} mT raw, {:.4} mT filtered",
        max_field(&raw).channel_max(),
        max_field(&filt).channel_max()
    );
    Ok(())
}
