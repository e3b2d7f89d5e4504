//! Numerical experiments: dephasing-sequence noise calibration, the ideal
//! C-phase baseline, robustness sweeps, single-qubit gates and the Zeeman
//! dephasing contribution.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostBreakdown;
use crate::error::{Error, Result};
use crate::evolve::{
    effective_report, ensemble_infidelity_with, infidelity, reconstruct_rotating, run_effective,
    run_effective_zeeman, EnsembleOptions, EnsembleResult, Evaluation,
};
use crate::gates::{self, Gate};
use crate::linalg::{c, C64, M2, M4, PHASE_PER_MHZ_NS};
use crate::model::{
    effective_detuning, middle_block, EffectiveModel, SystemParams, SystematicError,
};
use crate::noise::{
    build_bank, derive_seed, sample_trajectory, NoiseSpec, OUBank, DEFAULT_PROCESSES_PER_DECADE,
};
use crate::optimize::{optimize_fine_tune, optimize_stage1, OptimizationConfig};
use crate::pulse::{apply_filter, sample_envelope, FilterModel, PulseParameterization, Waveform};

/// Propagation step (ns) used when evaluating gates.
pub const EVAL_DT: f64 = 0.1;

// ---------------------------------------------------------------- C-phase

#[derive(Debug, Clone, PartialEq)]
pub struct IdealCphase {
    /// ns
    pub duration: f64,
    /// Rotating-frame propagator of the idle evolution (SW dressing included).
    pub unitary: M4,
    /// Local Z phases (dot 1, dot 2) folded into `target`.
    pub z_phases: (f64, f64),
    /// local_z(φ1, φ2)·CZ, so that infidelity(unitary, target) = j1.
    pub target: M4,
    pub j1: f64,
}

impl IdealCphase {
    pub fn waveform(&self) -> Waveform {
        let steps = (self.duration / EVAL_DT).ceil() as usize;
        Waveform::zeros(self.duration / steps as f64, steps)
    }
}

/// 1/(2ν_↑↓) in ns.
pub fn half_detuning_period(p: &SystemParams) -> f64 {
    0.5e3 / effective_detuning(p)
}

/// Z phases maximizing the overlap of a diagonal-dominant U with CZ, and the
/// resulting infidelity. Alternating closed-form updates from a grid of starts.
pub fn best_z_phases(u: &M4) -> (f64, f64, f64) {
    let d = [u[(0, 0)], u[(1, 1)], u[(2, 2)], u[(3, 3)]];
    let arg = |z: C64| z.im.atan2(z.re);
    let e = |phi: f64| c(phi.cos(), -phi.sin());
    let overlap = |p1: f64, p2: f64| d[0] + e(p1) * d[1] + e(p2) * d[2] - e(p1 + p2) * d[3];
    let mut best = (0.0, 0.0, f64::INFINITY);
    for s in 0..16 {
        let mut p2 = 2.0 * PI * s as f64 / 16.0;
        let mut p1 = 0.0;
        for _ in 0..60 {
            p1 = arg(d[1] - e(p2) * d[3]) - arg(d[0] + e(p2) * d[2]);
            p2 = arg(d[2] - e(p1) * d[3]) - arg(d[0] + e(p1) * d[1]);
        }
        let target = gates::local_z(p1, p2) * gates::cz();
        let inf = infidelity(u, &target);
        debug_assert!((inf - (1.0 - overlap(p1, p2).norm_sqr() / 16.0).max(0.0)).abs() < 1e-9);
        if inf < best.2 {
            best = (p1.rem_euclid(2.0 * PI), p2.rem_euclid(2.0 * PI), inf);
        }
    }
    best
}

/// Rotating-frame idle propagator of duration `tau` (constant Hamiltonian, one exact step).
pub fn idle_unitary(p: &SystemParams, tau: f64) -> M4 {
    let run = run_effective(p, 0.0, &Waveform::zeros(tau, 1), None, 0);
    reconstruct_rotating(p, 0.0, &run).0
}

fn cphase_at(p: &SystemParams, tau: f64) -> IdealCphase {
    let u = idle_unitary(p, tau);
    let (p1, p2, j1) = best_z_phases(&u);
    IdealCphase {
        duration: tau,
        unitary: u,
        z_phases: (p1, p2),
        target: gates::local_z(p1, p2) * gates::cz(),
        j1,
    }
}

/// Threshold on J1 below which an idle evolution counts as a C-phase.
pub const CPHASE_J1_TOLERANCE: f64 = 1e-4;

/// Shortest zero-drive evolution that realizes a C-phase up to local Z
/// phases with J1 below [`CPHASE_J1_TOLERANCE`].
///
/// The conditional phase grows at 2·J_m while the |↑↓⟩/|↓↑⟩ admixture
/// oscillates at the middle-block gap; both must line up, so the duration is
/// found by scanning rather than taken as 1/(2ν).
pub fn ideal_cphase(p: &SystemParams) -> Result<IdealCphase> {
    p.validate()?;
    let step = 0.25;
    let t_max = 5000.0;
    let mut prev = (f64::INFINITY, f64::INFINITY);
    let mut tau = step;
    while tau <= t_max {
        let j = cphase_at(p, tau).j1;
        // prev.1 is a local minimum
        if prev.1 < prev.0 && prev.1 <= j && prev.1 < 10.0 * CPHASE_J1_TOLERANCE {
            let best = golden_min(|t| cphase_at(p, t).j1, tau - 2.0 * step, tau);
            let cp = cphase_at(p, best);
            if cp.j1 < CPHASE_J1_TOLERANCE {
                return Ok(cp);
            }
        }
        prev = (prev.1, j);
        tau += step;
    }
    Err(Error::Numerical(format!(
        "no idle duration below {t_max} ns reaches J1 < {CPHASE_J1_TOLERANCE}"
    )))
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while b - a > 1e-6 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    0.5 * (a + b)
}

// -------------------------------------------------------------- dephasing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DephasingFit {
    /// µs; infinite when the data show no decay.
    pub t2_star: f64,
    /// MHz (held fixed during the fit)
    pub frequency: f64,
    /// Undefined (NaN) when there is no decay.
    pub exponent: f64,
    /// RMS deviation of the data from the fitted curve.
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityCurve {
    /// ns
    pub tau: Vec<f64>,
    pub probability: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl ProbabilityCurve {
    pub fn write_csv<W: std::io::Write>(&self, w: W, fit: Option<&DephasingFit>) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["tau_ns", "probability", "std_error", "fit"])?;
        for k in 0..self.tau.len() {
            let model = fit.map_or(String::new(), |f| {
                format!(
                    "{:.9}",
                    decay_model(self.tau[k], f.frequency, f.t2_star, f.exponent)
                )
            });
            wr.write_record([
                format!("{}", self.tau[k]),
                format!("{:.9}", self.probability[k]),
                format!("{:.3e}", self.std_error[k]),
                model,
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// 0–25 µs in 200 points.
pub fn default_tau_grid() -> Vec<f64> {
    (0..200).map(|k| 25_000.0 * k as f64 / 199.0).collect()
}

/// Noise sampling step (ns) of the dephasing sequence.
pub const DEPHASING_DT: f64 = 10.0;

/// Spread of ν_↑↓ (MHz) caused by detuning noise of standard deviation
/// `sigma`, to first order.
pub fn detuning_spread(p: &SystemParams, sigma: f64) -> f64 {
    let h = 10.0;
    let at = |du: f64| {
        effective_detuning(&SystemParams {
            u_minus_eps: p.u_minus_eps + du,
            ..*p
        })
    };
    ((at(h) - at(-h)) / (2.0 * h)).abs() * sigma
}

/// Quasi-static Gaussian estimate T2* = √2/(2π σ_ν), µs.
pub fn quasi_static_t2(p: &SystemParams, sigma: f64) -> f64 {
    2f64.sqrt() / (2.0 * PI * detuning_spread(p, sigma))
}

fn rotation(axis: usize, theta: f64) -> M2 {
    let (s, co) = (0.5 * theta).sin_cos();
    let (z, one) = (c(0.0, 0.0), c(co, 0.0));
    match axis {
        0 => M2::new(one, c(0.0, -s), c(0.0, -s), one),
        1 => M2::new(one, c(-s, 0.0), c(s, 0.0), one),
        _ => M2::new(c(co, -s), z, z, c(co, s)),
    }
}

/// exp(−i·2π·h·M) for the middle block at detuning offset β.
fn middle_step(p: &SystemParams, beta: f64, h: f64) -> M2 {
    let m = middle_block(p, &EffectiveModel::shifted(p, 0.0, beta));
    let a = 0.5 * (m[0][0] + m[1][1]);
    let b = 0.5 * (m[0][0] - m[1][1]);
    let x = m[0][1];
    let rr = b.hypot(x);
    let th = PHASE_PER_MHZ_NS * h;
    let (sn, cs) = (th * rr).sin_cos();
    let k = if rr > 0.0 { sn / rr } else { th };
    let g = c((th * a).cos(), -(th * a).sin());
    M2::new(
        g * c(cs, -k * b),
        g * c(0.0, -k * x),
        g * c(0.0, -k * x),
        g * c(cs, k * b),
    )
}

/// P(|↑,↓⟩) along the sequence (π/2)_X2 → (π/2)_Z2 → free evolution τ → (π/2)_Y2,
/// starting from |↓,↓⟩, for one detuning trajectory sampled every `dt`.
fn sequence_probabilities(p: &SystemParams, tau: &[f64], beta: &[f64], dt: f64) -> Vec<f64> {
    // dot-2 amplitudes (↑, ↓) with dot 1 down
    let prep = rotation(2, PI / 2.0) * rotation(0, PI / 2.0);
    let a_up = prep[(0, 1)];
    let a_dn = prep[(1, 1)];
    let ry = rotation(1, PI / 2.0);
    let bare = 0.5 * p.delta_ez;
    let mut m = M2::identity();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(tau.len());
    for &target in tau {
        while t < target - 1e-9 {
            let idx = ((t / dt).floor() as usize).min(beta.len() - 1);
            let end = ((idx + 1) as f64 * dt).min(target);
            m = middle_step(p, beta[idx], end - t) * m;
            t = end;
        }
        // remove the bare Zeeman offset of |↑,↓⟩ in the Ē_Z frame
        let ph = PHASE_PER_MHZ_NS * bare * target;
        let up = m[(0, 0)] * a_up * c(ph.cos(), ph.sin());
        let b_up = ry[(0, 0)] * up + ry[(0, 1)] * a_dn;
        out.push(b_up.norm_sqr());
    }
    out
}

fn check_grid(tau: &[f64]) -> Result<()> {
    if tau.is_empty() {
        return Err(Error::invalid("tau_grid", "empty"));
    }
    if tau[0] < 0.0 || tau.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(
            "tau_grid",
            "must be non-negative and sorted",
        ));
    }
    Ok(())
}

/// Ensemble mean and standard error of per-realization curves.
fn curve_statistics(tau: &[f64], runs: &[Vec<f64>]) -> ProbabilityCurve {
    let n = runs.len() as f64;
    let mut mean = vec![0.0; tau.len()];
    let mut sq = vec![0.0; tau.len()];
    for r in runs {
        for (k, v) in r.iter().enumerate() {
            mean[k] += v;
            sq[k] += v * v;
        }
    }
    let mut se = vec![0.0; tau.len()];
    for k in 0..tau.len() {
        mean[k] /= n;
        if runs.len() > 1 {
            let var = ((sq[k] - n * mean[k] * mean[k]) / (n - 1.0)).max(0.0);
            se[k] = (var / n).sqrt();
        }
    }
    ProbabilityCurve {
        tau: tau.to_vec(),
        probability: mean,
        std_error: se,
    }
}

/// Two-qubit dephasing sequence under detuning noise, fitted with the
/// frequency held at ν_↑↓.
pub fn dephasing_characterization(
    p: &SystemParams,
    spec: &NoiseSpec,
    tau_grid: &[f64],
    n: usize,
    seed: u64,
) -> Result<(ProbabilityCurve, DephasingFit)> {
    check_grid(tau_grid)?;
    if n == 0 {
        return Err(Error::invalid("n", "need at least one realization"));
    }
    let bank = build_bank(spec, DEFAULT_PROCESSES_PER_DECADE)?;
    let t_max = *tau_grid.last().unwrap();
    let samples = (t_max / DEPHASING_DT).floor() as usize + 1;
    let runs: Vec<Vec<f64>> = if bank.variance() == 0.0 {
        vec![sequence_probabilities(
            p,
            tau_grid,
            &vec![0.0; samples],
            DEPHASING_DT,
        )]
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let tr =
                    sample_trajectory(&bank, DEPHASING_DT, samples, derive_seed(seed, i as u64))?;
                Ok(sequence_probabilities(
                    p,
                    tau_grid,
                    &tr.samples,
                    DEPHASING_DT,
                ))
            })
            .collect::<Result<_>>()?
    };
    let curve = curve_statistics(tau_grid, &runs);
    let fit = fit_decay(&curve.tau, &curve.probability, effective_detuning(p), None);
    Ok((curve, fit))
}

/// ½ + ½·cos(2π f τ)·exp(−(τ/T2)^a), τ in ns, T2 in µs, f in MHz.
pub fn decay_model(tau: f64, f: f64, t2: f64, a: f64) -> f64 {
    let env = if t2.is_infinite() {
        1.0
    } else {
        (-(tau * 1e-3 / t2).powf(a)).exp()
    };
    0.5 + 0.5 * (PHASE_PER_MHZ_NS * f * tau).cos() * env
}

pub const EXPONENT_BOUNDS: (f64, f64) = (1.0, 3.0);

/// Least-squares fit of [`decay_model`] with `f` fixed. The exponent is fitted
/// within [`EXPONENT_BOUNDS`] unless `exponent` pins it. T2* is seeded from a
/// log grid and refined by damped Gauss–Newton in (ln T2, a).
pub fn fit_decay(tau: &[f64], data: &[f64], f: f64, exponent: Option<f64>) -> DephasingFit {
    let sse = |t2: f64, a: f64| -> f64 {
        tau.iter()
            .zip(data)
            .map(|(t, y)| (decay_model(*t, f, t2, a) - y).powi(2))
            .sum()
    };
    let rms = |s: f64| (s / tau.len() as f64).sqrt();
    let (lo, hi) = EXPONENT_BOUNDS;
    let a_grid: Vec<f64> = match exponent {
        Some(a) => vec![a],
        None => (0..=8).map(|k| lo + (hi - lo) * k as f64 / 8.0).collect(),
    };
    let mut seed = (f64::INFINITY, a_grid[0], f64::INFINITY);
    for k in 0..=100 {
        let t2 = 10f64.powf(-1.0 + 5.0 * k as f64 / 100.0);
        for &a in &a_grid {
            let s = sse(t2, a);
            if s < seed.2 {
                seed = (t2, a, s);
            }
        }
    }
    let no_decay = sse(f64::INFINITY, 2.0);
    let (mut u, mut a, mut s) = (seed.0.ln(), seed.1, seed.2);
    let free_a = exponent.is_none();
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        let t2 = u.exp();
        let (mut jtj, mut jtr) = ([[0.0; 2]; 2], [0.0; 2]);
        for (t, y) in tau.iter().zip(data) {
            let x = (t * 1e-3 / t2).powf(a);
            let e = (-x).exp();
            let cs = 0.5 * (PHASE_PER_MHZ_NS * f * t).cos();
            let res = 0.5 + cs * e - y;
            let du = cs * e * a * x;
            let da = if *t > 0.0 {
                -cs * e * x * (t * 1e-3 / t2).ln()
            } else {
                0.0
            };
            let g = [du, if free_a { da } else { 0.0 }];
            for i in 0..2 {
                jtr[i] += g[i] * res;
                for j in 0..2 {
                    jtj[i][j] += g[i] * g[j];
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let m00 = jtj[0][0] * (1.0 + lambda) + 1e-300;
            let m11 = jtj[1][1] * (1.0 + lambda) + if free_a { 1e-300 } else { 1.0 };
            let m01 = jtj[0][1];
            let det = m00 * m11 - m01 * m01;
            let du = -(m11 * jtr[0] - m01 * jtr[1]) / det;
            let da = -(m00 * jtr[1] - m01 * jtr[0]) / det;
            let (nu, na) = (u + du, (a + da).clamp(lo, hi));
            let na = if free_a { na } else { a };
            let ns = sse(nu.exp(), na);
            if ns <= s {
                let small =
                    (s - ns) <= 1e-14 * s.max(1e-300) || (du.abs() < 1e-12 && da.abs() < 1e-12);
                u = nu;
                a = na;
                s = ns;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                converged = small;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            converged = true;
            break;
        }
        if converged {
            break;
        }
        if u > 1e9f64.ln() {
            break;
        }
    }
    let t2 = u.exp();
    let tau_max = tau.iter().fold(0.0f64, |m, t| m.max(*t)) * 1e-3;
    // no decay: the envelope stays within 1e-3 of one over the grid, or it
    // removes less than half of the undamped cosine's squared residual
    if 2.0 * s >= no_decay || (tau_max / t2).powf(a) < 1e-3 {
        return DephasingFit {
            t2_star: f64::INFINITY,
            frequency: f,
            exponent: f64::NAN,
            residual: rms(no_decay),
            converged: true,
        };
    }
    DephasingFit {
        t2_star: t2,
        frequency: f,
        exponent: a,
        residual: rms(s),
        converged,
    }
}

// ------------------------------------------------- Zeeman dephasing noise

/// Single-qubit Ramsey step (ns) for the Zeeman-noise calibration.
pub const RAMSEY_DT: f64 = 100.0;

/// Accumulated Ramsey phases per unit noise σ at `times` (multiples of
/// [`RAMSEY_DT`]); outer index realization, inner index time point.
fn unit_ramsey_phases(times: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let bank = build_bank(&NoiseSpec::dephasing(1.0), DEFAULT_PROCESSES_PER_DECADE)?;
    let t_max = *times.last().unwrap();
    let samples = (t_max / RAMSEY_DT).ceil() as usize + 1;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let tr = sample_trajectory(&bank, RAMSEY_DT, samples, derive_seed(seed, i as u64))?;
            let mut cum = Vec::with_capacity(samples + 1);
            cum.push(0.0);
            for s in &tr.samples {
                cum.push(cum.last().unwrap() + PHASE_PER_MHZ_NS * RAMSEY_DT * s);
            }
            let out: Vec<f64> = times
                .iter()
                .map(|t| cum[((t / RAMSEY_DT).round() as usize).min(samples)])
                .collect();
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamseyCalibration {
    /// Calibrated Zeeman-noise spectrum (per dot).
    pub spec: NoiseSpec,
    pub fit: DephasingFit,
    pub curve: ProbabilityCurve,
}

/// Noise strength whose simulated single-qubit Ramsey decay
/// ½ + ½exp(−(t/T2*)^n) fits `t2_target` (µs) with the given exponent.
pub fn calibrate_dephasing(
    t2_target: f64,
    exponent: f64,
    n: usize,
    seed: u64,
) -> Result<RamseyCalibration> {
    if !(t2_target > 0.0) || n == 0 {
        return Err(Error::invalid("calibration", "need t2 > 0 and n >= 1"));
    }
    let times: Vec<f64> = (0..120)
        .map(|k| (k as f64 * 3.0 * t2_target * 1e3 / 119.0 / RAMSEY_DT).round() * RAMSEY_DT)
        .collect();
    let phases = unit_ramsey_phases(&times, n, seed)?;
    let curve_at = |sigma: f64| {
        let runs: Vec<Vec<f64>> = phases
            .iter()
            .map(|ph| ph.iter().map(|x| 0.5 + 0.5 * (sigma * x).cos()).collect())
            .collect();
        curve_statistics(&times, &runs)
    };
    let t2_at = |sigma: f64| {
        let cv = curve_at(sigma);
        fit_decay(&cv.tau, &cv.probability, 0.0, Some(exponent)).t2_star
    };
    let guess = 2f64.sqrt() / (2.0 * PI * t2_target);
    let (mut lo, mut hi) = (0.1 * guess, 10.0 * guess);
    if !(t2_at(lo) > t2_target && t2_at(hi) < t2_target) {
        return Err(Error::Numerical(
            "Ramsey calibration: target T2* not bracketed".into(),
        ));
    }
    while hi / lo - 1.0 > 1e-7 {
        let mid = (lo * hi).sqrt();
        if t2_at(mid) > t2_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = (lo * hi).sqrt();
    let curve = curve_at(sigma);
    let fit = fit_decay(&curve.tau, &curve.probability, 0.0, Some(exponent));
    Ok(RamseyCalibration {
        spec: NoiseSpec::dephasing(sigma),
        fit,
        curve,
    })
}

/// Ensemble infidelity under independent Zeeman noise on both dots, with the
/// detuning noise switched off.
pub fn dephasing_contribution(
    p: &SystemParams,
    pulses: &Waveform,
    target: &M4,
    dephasing: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<EnsembleResult> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one realization"));
    }
    let bank: OUBank = build_bank(dephasing, DEFAULT_PROCESSES_PER_DECADE)?;
    let report = |z: Option<(&[f64], &[f64])>| {
        let run = run_effective_zeeman(p, 0.0, pulses, None, z, 0);
        effective_report(p, 0.0, &run, target, Evaluation::Rotating).infidelity
    };
    if bank.variance() == 0.0 {
        return Ok(EnsembleResult::from_samples(vec![report(None); n], false));
    }
    let steps = pulses.steps();
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            let z1 = sample_trajectory(&bank, pulses.dt, steps, derive_seed(s, 1))?;
            let z2 = sample_trajectory(&bank, pulses.dt, steps, derive_seed(s, 2))?;
            Ok(report(Some((&z1.samples, &z2.samples))))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EnsembleResult::from_samples(samples, false))
}

// ----------------------------------------------------------------- sweeps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Sigma,
    AlphaT0,
    SpectralAlpha,
}

impl SweepAxis {
    pub fn column(&self) -> &'static str {
        match self {
            SweepAxis::Sigma => "sigma_MHz",
            SweepAxis::AlphaT0 => "alpha_t0_MHz",
            SweepAxis::SpectralAlpha => "spectral_alpha",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    IdealCphase,
    OptimalUnfiltered,
    OptimalFineTuned,
    SingleQubit,
}

impl GateKind {
    pub fn name(&self) -> &'static str {
        match self {
            GateKind::IdealCphase => "ideal-cphase",
            GateKind::OptimalUnfiltered => "optimal-unfiltered",
            GateKind::OptimalFineTuned => "optimal-fine-tuned",
            GateKind::SingleQubit => "single-qubit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub mean_infidelity: f64,
    pub std_error: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub gate: GateKind,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "gate",
            self.axis.column(),
            "mean_infidelity",
            "std_error",
            "n",
        ])?;
        for pt in &self.points {
            wr.write_record([
                self.gate.name().to_string(),
                format!("{}", pt.x),
                format!("{:.9e}", pt.mean_infidelity),
                format!("{:.3e}", pt.std_error),
                pt.n.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// A sampled gate waveform with the target it is judged against.
#[derive(Debug, Clone)]
pub struct GateUnderTest {
    pub kind: GateKind,
    pub waveform: Waveform,
    pub target: M4,
}

impl GateUnderTest {
    /// Sample the pulses on the evaluation grid, optionally through the filter.
    pub fn from_pulses(
        kind: GateKind,
        pulses: &PulseParameterization,
        target: M4,
        filter: Option<&FilterModel>,
    ) -> Result<Self> {
        let raw = sample_envelope(pulses, EVAL_DT)?;
        let waveform = match filter {
            Some(f) => apply_filter(&raw, f)?,
            None => raw,
        };
        Ok(GateUnderTest {
            kind,
            waveform,
            target,
        })
    }

    pub fn ideal_cphase(cp: &IdealCphase) -> Self {
        GateUnderTest {
            kind: GateKind::IdealCphase,
            waveform: cp.waveform(),
            target: cp.target,
        }
    }

    pub fn evaluate(
        &self,
        p: &SystemParams,
        alpha_t0: f64,
        spec: &NoiseSpec,
        n: usize,
        seed: u64,
    ) -> Result<EnsembleResult> {
        ensemble_infidelity_with(
            p,
            &SystematicError { alpha_t0 },
            spec,
            &self.waveform,
            &self.target,
            n,
            seed,
            &EnsembleOptions::default(),
        )
    }
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn point(x: f64, r: &EnsembleResult) -> SweepPoint {
    SweepPoint {
        x,
        mean_infidelity: r.mean_infidelity,
        std_error: r.std_error,
        n: r.n_realizations,
    }
}

/// ⟨I⟩ versus σ for each gate. Every point reuses the master seed, so the
/// curves are built from the same (rescaled) trajectories.
pub fn sigma_sweep(
    p: &SystemParams,
    gates: &[GateUnderTest],
    sigma_values: &[f64],
    base: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<SweepResult>> {
    let xs = sorted(sigma_values);
    gates
        .iter()
        .map(|g| {
            let points = xs
                .iter()
                .map(|&s| Ok(point(s, &g.evaluate(p, 0.0, &base.with_sigma(s), n, seed)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepResult {
                axis: SweepAxis::Sigma,
                gate: g.kind,
                points,
            })
        })
        .collect()
}

/// ⟨I⟩ versus a static tunnel-coupling offset at fixed noise.
pub fn t0_uncertainty_sweep(
    p: &SystemParams,
    gate: &GateUnderTest,
    alpha_t0_values: &[f64],
    spec: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<SweepResult> {
    let points = sorted(alpha_t0_values)
        .into_iter()
        .map(|a| Ok(point(a, &gate.evaluate(p, a, spec, n, seed)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        axis: SweepAxis::AlphaT0,
        gate: gate.kind,
        points,
    })
}

/// Stage-1 and fine-tuned pulses for one target.
#[derive(Debug, Clone)]
pub struct OptimizedGate {
    pub stage1: PulseParameterization,
    pub stage1_breakdown: CostBreakdown,
    pub fine_tuned: PulseParameterization,
    pub fine_tuned_breakdown: CostBreakdown,
}

pub fn optimize_gate(
    p: &SystemParams,
    target: &M4,
    spec: &NoiseSpec,
    cfg: &OptimizationConfig,
    filter: &FilterModel,
    warm: Option<&PulseParameterization>,
) -> Result<OptimizedGate> {
    let s1 = optimize_stage1(cfg, p, target, spec, warm)?;
    let ft = optimize_fine_tune(cfg, p, target, spec, filter, &s1.best)?;
    Ok(OptimizedGate {
        stage1: s1.best,
        stage1_breakdown: s1.best_breakdown,
        fine_tuned: ft.best,
        fine_tuned_breakdown: ft.best_breakdown,
    })
}

/// Optimal ⟨I⟩ versus the spectral exponent: each α gets its own fine-tuned
/// pulse, started from `warm`.
#[allow(clippy::too_many_arguments)]
pub fn spectral_alpha_sweep(
    p: &SystemParams,
    alphas: &[f64],
    base: &NoiseSpec,
    cfg: &OptimizationConfig,
    filter: &FilterModel,
    warm: &PulseParameterization,
    n: usize,
    seed: u64,
) -> Result<(SweepResult, Vec<PulseParameterization>)> {
    let target = gates::cnot();
    let mut points = Vec::new();
    let mut pulses = Vec::new();
    for a in sorted(alphas) {
        let spec = NoiseSpec { alpha: a, ..*base };
        let ft = optimize_fine_tune(cfg, p, &target, &spec, filter, warm)?;
        let g =
            GateUnderTest::from_pulses(GateKind::OptimalFineTuned, &ft.best, target, Some(filter))?;
        points.push(point(a, &g.evaluate(p, 0.0, &spec, n, seed)?));
        pulses.push(ft.best);
    }
    Ok((
        SweepResult {
            axis: SweepAxis::SpectralAlpha,
            gate: GateKind::OptimalFineTuned,
            points,
        },
        pulses,
    ))
}

#[derive(Debug, Clone)]
pub struct SingleQubitOutcome {
    pub gate: Gate,
    pub optimized: OptimizedGate,
    pub result: EnsembleResult,
}

/// Optimize and evaluate I⊗X (200 ns) and H⊗I (250 ns). Search settings
/// other than timing come from `base`.
pub fn single_qubit_gates(
    p: &SystemParams,
    spec: &NoiseSpec,
    base: &OptimizationConfig,
    filter: &FilterModel,
    n: usize,
    seed: u64,
) -> Result<Vec<SingleQubitOutcome>> {
    [Gate::IX, Gate::HI]
        .into_iter()
        .map(|gate| {
            let timing = OptimizationConfig::for_gate(gate);
            let cfg = OptimizationConfig {
                k_max: timing.k_max,
                t_f: timing.t_f,
                steps: timing.steps,
                ..*base
            };
            let target = gate.unitary();
            let optimized = optimize_gate(p, &target, spec, &cfg, filter, None)?;
            let g = GateUnderTest::from_pulses(
                GateKind::SingleQubit,
                &optimized.fine_tuned,
                target,
                Some(filter),
            )?;
            let result = g.evaluate(p, 0.0, spec, n, seed)?;
            Ok(SingleQubitOutcome {
                gate,
                optimized,
                result,
            })
        })
        .collect()
}
