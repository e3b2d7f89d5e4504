//! Multi-start quasi-Newton search over the sin³ pulse coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{CostBreakdown, CostEvaluator, Evaluated, DEFAULT_XI};
use crate::error::{Error, Result};
use crate::linalg::M4;
use crate::model::SystemParams;
use crate::noise::{derive_seed, rng_from_seed, NoiseSpec};
use crate::pulse::{
    apply_filter, max_field, sample_envelope, FieldReport, FilterModel, PulseParameterization,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Unfiltered,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Adjoint,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizationConfig {
    pub k_max: usize,
    /// ns
    #[serde(rename = "t_f_ns")]
    pub t_f: f64,
    /// Propagation steps over [0, t_f].
    pub steps: usize,
    pub xi: f64,
    /// mT, per channel
    #[serde(rename = "max_field_mt")]
    pub max_field: f64,
    pub restarts: usize,
    pub max_iterations: usize,
    /// Taken from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
    pub stage: Stage,
    pub convergence_tol: f64,
    /// Random starts are uniform in [−init_range, init_range] mT.
    #[serde(rename = "init_range_mt")]
    pub init_range: f64,
    /// Central-difference step, mT.
    #[serde(rename = "fd_step_mt")]
    pub fd_step: f64,
    pub gradient: GradientMode,
    /// Fraction of max_field at which the exterior penalty starts.
    pub penalty_margin: f64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig {
            k_max: 11,
            t_f: 500.0,
            steps: 5000,
            xi: DEFAULT_XI,
            max_field: 1.0,
            restarts: 32,
            max_iterations: 2000,
            seed: 1,
            stage: Stage::Unfiltered,
            convergence_tol: 1e-9,
            init_range: 0.3,
            fd_step: 1e-4,
            gradient: GradientMode::Adjoint,
            penalty_margin: 0.97,
        }
    }
}

impl OptimizationConfig {
    pub fn for_gate(gate: crate::gates::Gate) -> Self {
        let (t_f, k_max) = gate.default_timing();
        OptimizationConfig {
            t_f,
            k_max,
            steps: (t_f * 10.0).round() as usize,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::invalid("optimization.k_max", "must be >= 1"));
        }
        if !(self.max_field > 0.0) {
            return Err(Error::invalid(
                "optimization.max_field_mt",
                "must be positive",
            ));
        }
        if !(self.t_f > 0.0) {
            return Err(Error::invalid("optimization.t_f_ns", "must be positive"));
        }
        if self.steps < 1000 {
            return Err(Error::invalid(
                "optimization.steps",
                "at least 1000 steps required",
            ));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("optimization.restarts", "must be >= 1"));
        }
        if !(self.convergence_tol > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::invalid(
                "optimization",
                "tolerances must be positive",
            ));
        }
        if !(self.penalty_margin > 0.0 && self.penalty_margin <= 1.0) {
            return Err(Error::invalid(
                "optimization.penalty_margin",
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub restart: usize,
    /// Penalty escalation round within the restart.
    pub round: usize,
    pub iteration: usize,
    pub j1: f64,
    pub j2: f64,
    pub fluence: f64,
    pub total: f64,
    /// Exterior field penalty added to `total` during the search.
    pub penalty: f64,
    /// mT, largest channel
    pub max_field: f64,
}

#[derive(Debug, Clone)]
pub struct RestartOutcome {
    pub restart: usize,
    pub coefficients: Vec<f64>,
    pub breakdown: CostBreakdown,
    pub objective: f64,
    pub converged: bool,
    pub feasible: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizationTrace {
    pub iterations: Vec<TraceRow>,
    pub best: PulseParameterization,
    pub best_breakdown: CostBreakdown,
    pub restarts: Vec<RestartOutcome>,
    pub converged: bool,
}

impl OptimizationTrace {
    pub const CSV_HEADER: [&'static str; 9] = [
        "restart",
        "round",
        "iteration",
        "j1",
        "j2",
        "fluence_mT2us",
        "total",
        "penalty",
        "max_field_mT",
    ];

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(Self::CSV_HEADER)?;
        for row in &self.iterations {
            wr.write_record([
                row.restart.to_string(),
                row.round.to_string(),
                row.iteration.to_string(),
                format!("{:.12e}", row.j1),
                format!("{:.12e}", row.j2),
                format!("{:.12e}", row.fluence),
                format!("{:.12e}", row.total),
                format!("{:.12e}", row.penalty),
                format!("{:.9}", row.max_field),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintReport {
    pub pass: bool,
    pub unfiltered: FieldReport,
    pub filtered: FieldReport,
}

/// Per-channel field limit on both the raw and the filtered waveform.
pub fn constraint_check(
    pulses: &PulseParameterization,
    cfg: &OptimizationConfig,
    filter: &FilterModel,
) -> Result<ConstraintReport> {
    let raw = sample_envelope(pulses, pulses.t_f / cfg.steps as f64)?;
    let filt = apply_filter(&raw, filter)?;
    let (unfiltered, filtered) = (max_field(&raw), max_field(&filt));
    let pass = unfiltered.channel_max() <= cfg.max_field && filtered.channel_max() <= cfg.max_field;
    Ok(ConstraintReport {
        pass,
        unfiltered,
        filtered,
    })
}

struct LocalResult {
    x: Vec<f64>,
    eval: Evaluated,
    converged: bool,
    rows: Vec<TraceRow>,
}

fn row_for(
    ev: &CostEvaluator,
    restart: usize,
    iteration: usize,
    x: &[f64],
    e: &Evaluated,
) -> TraceRow {
    let b = &e.breakdown;
    let field = max_field(&ev.waveform(x)).channel_max();
    TraceRow {
        restart,
        round: 0,
        iteration,
        j1: b.j1,
        j2: b.j2,
        fluence: b.fluence,
        total: b.total,
        penalty: e.penalty,
        max_field: field,
    }
}

fn gradient_eval(ev: &CostEvaluator, cfg: &OptimizationConfig, x: &[f64]) -> Evaluated {
    match cfg.gradient {
        GradientMode::Adjoint => ev.evaluate(x),
        GradientMode::FiniteDifference => {
            let mut e = ev.evaluate(x);
            e.gradient = ev.fd_gradient(x, cfg.fd_step);
            e
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with Armijo backtracking; falls back to compass search when the line search stalls.
fn local_search(
    ev: &CostEvaluator,
    cfg: &OptimizationConfig,
    x0: &[f64],
    restart: usize,
) -> LocalResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut cur = gradient_eval(ev, cfg, &x);
    let mut rows = vec![row_for(ev, restart, 0, &x, &cur)];
    let mut history = vec![cur.objective];
    let gnorm = dot(&cur.gradient, &cur.gradient).sqrt();
    // first step limited to ~0.05 mT
    let mut hinv = DMatrix::<f64>::identity(n, n)
        * if gnorm > 0.0 {
            (0.05 / gnorm).min(1e6)
        } else {
            1.0
        };
    let mut first = true;
    let mut converged = false;
    let mut stalled = false;
    let mut it = 0;
    while it < cfg.max_iterations {
        it += 1;
        let g = DVector::from_column_slice(&cur.gradient);
        let mut d = -(&hinv * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n) * (0.05 / g.norm().max(1e-300));
            d = -(&hinv * &g);
            slope = g.dot(&d);
            if !(slope < 0.0) {
                converged = true;
                break;
            }
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            let f = ev.objective(&trial);
            if f.is_finite() && f <= cur.objective + 1e-4 * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(xn) = accepted else {
            stalled = true;
            break;
        };
        let next = gradient_eval(ev, cfg, &xn);
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(
            n,
            next.gradient.iter().zip(&cur.gradient).map(|(a, b)| a - b),
        );
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if first {
                hinv = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H ← H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = xn;
        cur = next;
        history.push(cur.objective);
        rows.push(row_for(ev, restart, it, &x, &cur));
        if history.len() > 10
            && (history[history.len() - 11] - cur.objective).abs() < cfg.convergence_tol
        {
            converged = true;
            break;
        }
    }
    if stalled {
        let (xp, improved) = pattern_search(ev, &x, cur.objective, 4 * cfg.max_iterations.max(50));
        if improved {
            x = xp;
            cur = gradient_eval(ev, cfg, &x);
            it += 1;
            rows.push(row_for(ev, restart, it, &x, &cur));
        }
        converged = true;
    }
    LocalResult {
        x,
        eval: cur,
        converged,
        rows,
    }
}

/// Compass search on the objective; returns (point, whether it improved).
fn pattern_search(ev: &CostEvaluator, x0: &[f64], f0: f64, max_evals: usize) -> (Vec<f64>, bool) {
    let mut x = x0.to_vec();
    let mut f = f0;
    let mut step = 1e-3;
    let mut evals = 0;
    let mut improved = false;
    while step > 1e-7 && evals < max_evals {
        let mut moved = false;
        for k in 0..x.len() {
            for sgn in [1.0, -1.0] {
                let mut y = x.clone();
                y[k] += sgn * step;
                let fy = ev.objective(&y);
                evals += 1;
                if fy < f {
                    x = y;
                    f = fy;
                    moved = true;
                    improved = true;
                    break;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (x, improved)
}

/// Local search repeated with a ten-fold heavier field penalty until the
/// result satisfies the constraint (at most `PENALTY_ROUNDS` rounds).
fn escalating_search(
    ev: &CostEvaluator,
    cfg: &OptimizationConfig,
    x0: &[f64],
    restart: usize,
    filter: &FilterModel,
) -> Result<LocalResult> {
    let mut ev = ev.clone();
    let mut x = x0.to_vec();
    let mut rows = Vec::new();
    let mut offset = 0;
    for round in 0..PENALTY_ROUNDS {
        let mut res = local_search(&ev, cfg, &x, restart);
        for row in &mut res.rows {
            row.round = round;
            row.iteration += offset;
        }
        offset = res.rows.last().map_or(offset, |r| r.iteration + 1);
        rows.append(&mut res.rows);
        let pulses = PulseParameterization::from_slice(&res.x, cfg.t_f);
        if round + 1 == PENALTY_ROUNDS || constraint_check(&pulses, cfg, filter)?.pass {
            return Ok(LocalResult { rows, ..res });
        }
        x = res.x;
        ev.penalty_weight *= 10.0;
    }
    unreachable!()
}

const PENALTY_ROUNDS: usize = 6;

fn run_restarts(
    ev: &CostEvaluator,
    cfg: &OptimizationConfig,
    starts: Vec<Vec<f64>>,
    filter: &FilterModel,
) -> Result<OptimizationTrace> {
    let results: Vec<LocalResult> = starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| escalating_search(ev, cfg, x0, i, filter))
        .collect::<Result<_>>()?;
    let mut outcomes = Vec::with_capacity(results.len());
    let mut iterations = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        let pulses = PulseParameterization::from_slice(&res.x, cfg.t_f);
        let feasible = constraint_check(&pulses, cfg, filter)?.pass;
        log::debug!(
            "restart {i}: total {:.4e} (j1 {:.3e}, j2 {:.3e}) after {} iterations, feasible {feasible}",
            res.eval.breakdown.total,
            res.eval.breakdown.j1,
            res.eval.breakdown.j2,
            res.rows.len() - 1
        );
        iterations.extend(res.rows.iter().copied());
        outcomes.push(RestartOutcome {
            restart: i,
            iterations: res.rows.len() - 1,
            coefficients: res.x,
            breakdown: res.eval.breakdown,
            objective: res.eval.objective,
            converged: res.converged,
            feasible,
        });
    }
    let best = outcomes
        .iter()
        .filter(|o| o.feasible)
        .min_by(|a, b| a.breakdown.total.total_cmp(&b.breakdown.total))
        .ok_or_else(|| {
            let peak = outcomes
                .iter()
                .map(|o| max_field(&ev.waveform(&o.coefficients)).channel_max())
                .fold(f64::INFINITY, f64::min);
            Error::Constraint(format!(
                "no restart satisfies the {} mT field limit (lowest peak {peak:.4} mT)",
                cfg.max_field
            ))
        })?;
    Ok(OptimizationTrace {
        best: PulseParameterization::from_slice(&best.coefficients, cfg.t_f),
        best_breakdown: best.breakdown,
        converged: outcomes.iter().any(|o| o.converged),
        iterations,
        restarts: outcomes,
    })
}

fn evaluator(
    cfg: &OptimizationConfig,
    p: &SystemParams,
    target: &M4,
    spec: &NoiseSpec,
    filter: Option<FilterModel>,
) -> Result<CostEvaluator> {
    cfg.validate()?;
    CostEvaluator::new(
        p,
        target,
        spec,
        cfg.k_max,
        cfg.t_f,
        cfg.steps,
        filter,
        cfg.xi,
        cfg.max_field * cfg.penalty_margin,
    )
}

/// Stage 1: unfiltered pulses, random multi-start (restart 0 uses `warm` when given).
pub fn optimize_stage1(
    cfg: &OptimizationConfig,
    p: &SystemParams,
    target: &M4,
    spec: &NoiseSpec,
    warm: Option<&PulseParameterization>,
) -> Result<OptimizationTrace> {
    let ev = evaluator(cfg, p, target, spec, None)?;
    let dim = 2 * cfg.k_max;
    let mut starts: Vec<Vec<f64>> = (0..cfg.restarts)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(cfg.seed, i as u64));
            (0..dim)
                .map(|_| rng.random_range(-cfg.init_range..=cfg.init_range))
                .collect()
        })
        .collect();
    if let Some(w) = warm {
        if w.k_max() != cfg.k_max {
            return Err(Error::invalid(
                "warm start",
                "k_max does not match the configuration",
            ));
        }
        starts[0] = w.to_vec();
    }
    run_restarts(&ev, cfg, starts, &FilterModel::default())
}

/// Stage 2: the same search with the filtered waveform inside every cost evaluation.
pub fn optimize_fine_tune(
    cfg: &OptimizationConfig,
    p: &SystemParams,
    target: &M4,
    spec: &NoiseSpec,
    filter: &FilterModel,
    start: &PulseParameterization,
) -> Result<OptimizationTrace> {
    filter.validate()?;
    if start.k_max() != cfg.k_max {
        return Err(Error::invalid(
            "start",
            "k_max does not match the configuration",
        ));
    }
    let ev = evaluator(cfg, p, target, spec, Some(*filter))?;
    run_restarts(&ev, cfg, vec![start.to_vec()], filter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates;

    fn small_cfg() -> OptimizationConfig {
        OptimizationConfig {
            k_max: 3,
            t_f: 100.0,
            steps: 1000,
            restarts: 2,
            max_iterations: 60,
            ..Default::default()
        }
    }

    #[test]
    fn constraint_check_cases() {
        let cfg = OptimizationConfig::default();
        let mut c = PulseParameterization::zeros(11, 500.0);
        assert!(
            constraint_check(&c, &cfg, &FilterModel::default())
                .unwrap()
                .pass
        );
        c.a[0] = 1.2;
        let rep = constraint_check(&c, &cfg, &FilterModel::default()).unwrap();
        assert!(!rep.pass);
        assert!((rep.unfiltered.max_x - 1.2).abs() < 1e-9);
    }

    #[test]
    fn identity_target_without_noise_prefers_no_drive() {
        let p = SystemParams::default();
        let spec = NoiseSpec::default().with_sigma(0.0);
        let cfg = small_cfg();
        let ev = evaluator(&cfg, &p, &gates::identity(), &spec, None).unwrap();
        let zero = vec![0.0; 6];
        let k0 = ev.breakdown(&zero).total;
        let trace = optimize_stage1(&cfg, &p, &gates::identity(), &spec, None).unwrap();
        let mut rng = rng_from_seed(derive_seed(cfg.seed, 0));
        let start: Vec<f64> = (0..6).map(|_| rng.random_range(-0.3..=0.3)).collect();
        assert!(trace.best_breakdown.total <= ev.breakdown(&start).total);
        // the idle exchange phase keeps zero drive from being exact; the search must not do worse
        assert!(trace.best_breakdown.total <= k0);
    }

    #[test]
    fn runs_are_deterministic_and_monotone() {
        let p = SystemParams::default();
        let spec = NoiseSpec::default();
        let cfg = small_cfg();
        let a = optimize_stage1(&cfg, &p, &gates::cnot(), &spec, None).unwrap();
        let b = optimize_stage1(&cfg, &p, &gates::cnot(), &spec, None).unwrap();
        assert_eq!(a.best.to_vec(), b.best.to_vec());
        assert_eq!(a.iterations, b.iterations);
        for r in 0..cfg.restarts {
            let rounds = a
                .iterations
                .iter()
                .filter(|t| t.restart == r)
                .map(|t| t.round)
                .max()
                .unwrap();
            for round in 0..=rounds {
                let totals: Vec<f64> = a
                    .iterations
                    .iter()
                    .filter(|t| t.restart == r && t.round == round)
                    .map(|t| t.total + t.penalty)
                    .collect();
                for w in totals.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "{w:?}");
                }
            }
        }
        let ev = evaluator(&cfg, &p, &gates::cnot(), &spec, None).unwrap();
        let again = ev.breakdown(&a.best.to_vec());
        assert!((again.total - a.best_breakdown.total).abs() < 1e-12);
    }

    #[test]
    fn fine_tune_with_identity_filter_keeps_a_converged_start() {
        let p = SystemParams::default();
        let spec = NoiseSpec::default();
        let cfg = OptimizationConfig {
            restarts: 1,
            max_iterations: 400,
            ..small_cfg()
        };
        let s1 = optimize_stage1(&cfg, &p, &gates::cnot(), &spec, None).unwrap();
        let ft = optimize_fine_tune(
            &cfg,
            &p,
            &gates::cnot(),
            &spec,
            &FilterModel::identity(),
            &s1.best,
        )
        .unwrap();
        assert!(ft.best_breakdown.total <= s1.best_breakdown.total + 1e-12);
        assert!(s1.best_breakdown.total - ft.best_breakdown.total < 100.0 * cfg.convergence_tol);
    }
}
