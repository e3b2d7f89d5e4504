//! Robust-control cost K = J1 + ⟨J2⟩ + ξ·F for a candidate pulse.
//!
//! J2 is evaluated from the slow noise response R̃(t) = Ũ†(t) N Ũ(t), where Ũ is
//! the rotating-frame effective propagator and N = ∂H̃/∂(U−ε). For a 4-level
//! block the lowest-order ensemble infidelity reduces to
//! J2 = ¼(2π)² ∬ C(t1−t2) Tr[R̄(t1) R̄(t2)] dt1 dt2 with R̄ the traceless part.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::{effective_report, run_effective, EffectiveRun, Evaluation};
use crate::linalg::{c, embed_4x4, expm_frechet, expm_taylor, r, C64, M4, M5, PHASE_PER_MHZ_NS};
use crate::model::{
    rotating_frame_map, rwa_detuning_derivative, rwa_matrix, sw_frame_maps_for, EffectiveModel,
    SystemParams,
};
use crate::noise::{build_bank, NoiseSpec, OUBank, DEFAULT_PROCESSES_PER_DECADE};
use crate::pulse::{FilterModel, FilterPlan, PulseBasis, PulseParameterization, Waveform};

pub const DEFAULT_XI: f64 = 1e-6;
/// Upper bound on the number of J2 quadrature points.
pub const J2_MAX_GRID: usize = 2000;

/// (2π·10⁻³)²/4: converts MHz²·ns² into a dimensionless infidelity.
const J2_PREFACTOR: f64 = 0.25 * PHASE_PER_MHZ_NS * PHASE_PER_MHZ_NS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub j1: f64,
    pub j2: f64,
    /// mT²·µs
    pub fluence: f64,
    pub xi: f64,
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(j1: f64, j2: f64, fluence: f64, xi: f64) -> Self {
        CostBreakdown {
            j1,
            j2,
            fluence,
            xi,
            total: j1 + j2 + xi * fluence,
        }
    }
}

/// mT²·ns → mT²·µs
const FLUENCE_SCALE: f64 = 1e-3;

/// F = ∫Ω_X² + ∫Ω_Y² + |∫Ω_X² − ∫Ω_Y²|, in mT²·µs.
pub fn fluence(pulses: &Waveform) -> f64 {
    let (ex, ey) = pulses.energies();
    FLUENCE_SCALE * (ex + ey + (ex - ey).abs())
}

/// Noiseless infidelity of the reconstructed propagator, leakage included.
pub fn j1(p: &SystemParams, pulses: &Waveform, target: &M4) -> f64 {
    let run = run_effective(p, 0.0, pulses, None, 0);
    effective_report(p, 0.0, &run, target, Evaluation::Rotating).infidelity
}

/// Smallest stride dividing `steps` that keeps the grid within `J2_MAX_GRID` points.
pub fn quadrature_stride(steps: usize) -> usize {
    let min = steps.div_ceil(J2_MAX_GRID - 1).max(1);
    (min..=steps)
        .find(|m| steps.is_multiple_of(*m))
        .unwrap_or(steps.max(1))
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    if n > 0 {
        w[0] *= 0.5;
        w[n - 1] *= 0.5;
    }
    if n == 1 {
        w[0] = 0.0;
    }
    w
}

/// Noise response of the ideal evolution on a quadrature grid.
#[derive(Debug, Clone)]
pub struct NoiseResponseCache {
    /// ns
    pub times: Vec<f64>,
    /// Rotating-frame effective propagator at each grid time.
    pub u_slow: Vec<M4>,
    /// ∂H̃/∂(U−ε)
    pub detuning_op: M4,
    params: SystemParams,
    model: EffectiveModel,
}

impl NoiseResponseCache {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    /// Ũ†(t) N Ũ(t): the computational-block response seen by slow noise.
    pub fn r_slow(&self, i: usize) -> M4 {
        let u = &self.u_slow[i];
        u.adjoint() * self.detuning_op * u
    }

    /// Lab-frame response R(t) = U†(t)|0,2⟩⟨0,2|U(t) of the reconstructed propagator.
    pub fn r_op(&self, i: usize) -> M5 {
        let t = self.times[i];
        let (exp_minus_s, exp_plus_s) = sw_frame_maps_for(&self.model);
        let rate = (self.params.u_minus_eps + self.model.j_p + self.model.j_m) * 1e-3;
        let ph = 2.0 * std::f64::consts::PI * (rate * t).fract();
        let u_sw = embed_4x4(
            &(rotating_frame_map(&self.params, t) * self.u_slow[i]),
            c(ph.cos(), -ph.sin()),
        );
        let u = exp_minus_s * u_sw * exp_plus_s;
        let row = u.row(4).into_owned();
        row.adjoint() * row
    }

    /// Tr of the computational block of `r_op(i)`.
    pub fn trace_4x4(&self, i: usize) -> f64 {
        let rop = self.r_op(i);
        (0..4).map(|k| rop[(k, k)].re).sum()
    }
}

pub fn build_noise_response(
    p: &SystemParams,
    pulses: &Waveform,
    stride: usize,
) -> Result<NoiseResponseCache> {
    let steps = pulses.steps();
    if stride == 0 || !steps.is_multiple_of(stride) {
        return Err(Error::invalid(
            "stride",
            format!("{stride} does not divide {steps} steps"),
        ));
    }
    let run = run_effective(p, 0.0, pulses, None, stride);
    let h = pulses.dt * stride as f64;
    let times = (0..run.history.len()).map(|i| i as f64 * h).collect();
    let model = EffectiveModel::new(p);
    Ok(NoiseResponseCache {
        times,
        u_slow: run.history,
        detuning_op: rwa_detuning_derivative(&model),
        params: *p,
        model,
    })
}

/// Stationary correlation written as Σ w_k e^{−λ_k|τ|}, MHz².
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationKernel {
    pub weights: Vec<f64>,
    /// 1/ns
    pub rates: Vec<f64>,
}

impl CorrelationKernel {
    pub fn from_bank(bank: &OUBank) -> Self {
        CorrelationKernel {
            weights: bank.amplitudes.iter().map(|a| a * a).collect(),
            rates: bank.rates.clone(),
        }
    }

    pub fn from_spec(spec: &NoiseSpec) -> Result<Self> {
        Ok(Self::from_bank(&build_bank(
            spec,
            DEFAULT_PROCESSES_PER_DECADE,
        )?))
    }

    pub fn eval(&self, tau: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(w, l)| w * (-l * tau.abs()).exp())
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }

    /// S_i = Σ_j w_j C(t_i − t_j) X_j on a uniform grid, in O(n) per term.
    fn smooth(&self, xs: &[M4], w: &[f64], h: f64) -> Vec<M4> {
        let n = xs.len();
        let mut out = vec![M4::zeros(); n];
        for (amp, lam) in self.weights.iter().zip(&self.rates) {
            if *amp == 0.0 {
                continue;
            }
            let d = r((-lam * h).exp());
            let mut acc = M4::zeros();
            for i in 0..n {
                acc = acc * d + xs[i] * r(w[i]);
                out[i] += acc * r(*amp);
            }
            acc = M4::zeros();
            for i in (0..n).rev() {
                acc = acc * d + xs[i] * r(w[i]);
                // the diagonal term was already counted in the forward sweep
                out[i] += (acc - xs[i] * r(w[i])) * r(*amp);
            }
        }
        out
    }
}

fn traceless(m: &M4) -> M4 {
    let tr = m.trace() * r(0.25);
    m - M4::identity() * tr
}

fn re_trace_product(a: &M4, b: &M4) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        for k in 0..4 {
            acc += (a[(i, k)] * b[(k, i)]).re;
        }
    }
    acc
}

/// Lowest-order detuning-noise infidelity with an exponential-sum correlation.
pub fn j2(cache: &NoiseResponseCache, kernel: &CorrelationKernel) -> f64 {
    if kernel.is_zero() || cache.len() < 2 {
        return 0.0;
    }
    let rbar: Vec<M4> = (0..cache.len())
        .map(|i| traceless(&cache.r_slow(i)))
        .collect();
    let w = trapezoid_weights(cache.len(), cache.spacing());
    let s = kernel.smooth(&rbar, &w, cache.spacing());
    let sum: f64 = (0..rbar.len())
        .map(|i| w[i] * re_trace_product(&rbar[i], &s[i]))
        .sum();
    J2_PREFACTOR * sum
}

/// Same quantity by dense O(n²) quadrature with an arbitrary even correlation.
pub fn j2_dense(cache: &NoiseResponseCache, corr: impl Fn(f64) -> f64) -> f64 {
    let n = cache.len();
    if n < 2 {
        return 0.0;
    }
    let rbar: Vec<M4> = (0..n).map(|i| traceless(&cache.r_slow(i))).collect();
    let h = cache.spacing();
    let w = trapezoid_weights(n, h);
    let lags: Vec<f64> = (0..n).map(|k| corr(k as f64 * h)).collect();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += w[i] * w[j] * lags[i.abs_diff(j)] * re_trace_product(&rbar[i], &rbar[j]);
        }
    }
    J2_PREFACTOR * sum
}

pub fn total_cost(
    p: &SystemParams,
    pulses: &Waveform,
    target: &M4,
    spec: &NoiseSpec,
    xi: f64,
) -> Result<CostBreakdown> {
    let kernel = CorrelationKernel::from_spec(spec)?;
    let j1v = j1(p, pulses, target);
    let cache = build_noise_response(p, pulses, quadrature_stride(pulses.steps()))?;
    Ok(CostBreakdown::new(
        j1v,
        j2(&cache, &kernel),
        fluence(pulses),
        xi,
    ))
}

/// Cost with its analytic gradient over the sin³ coefficients on a fixed grid.
///
/// With a filter the basis functions are filtered once up front, which is exact
/// because the filter is linear.
#[derive(Debug, Clone)]
pub struct CostEvaluator {
    p: SystemParams,
    model: EffectiveModel,
    target: M4,
    kernel: CorrelationKernel,
    k_max: usize,
    t_f: f64,
    steps: usize,
    stride: usize,
    bx: Vec<Vec<f64>>,
    by: Vec<Vec<f64>>,
    filtered: bool,
    pub xi: f64,
    /// Per-channel level above which the exterior penalty acts, mT.
    pub field_limit: f64,
    /// Penalty weight, 1/(mT²·ns).
    pub penalty_weight: f64,
    /// B·T†·U0†·A·U0: maps Ũ to the non-constant part of Tr[T†U_4×4].
    trace_map: M4,
}

/// Value, breakdown and gradient from one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluated {
    pub objective: f64,
    pub breakdown: CostBreakdown,
    pub penalty: f64,
    pub gradient: Vec<f64>,
}

impl CostEvaluator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &SystemParams,
        target: &M4,
        spec: &NoiseSpec,
        k_max: usize,
        t_f: f64,
        steps: usize,
        filter: Option<FilterModel>,
        xi: f64,
        field_limit: f64,
    ) -> Result<Self> {
        p.validate()?;
        if k_max == 0 {
            return Err(Error::invalid("k_max", "must be >= 1"));
        }
        let basis = PulseBasis::new(k_max, t_f, steps);
        let mut bx = Vec::with_capacity(k_max);
        let mut by = Vec::with_capacity(k_max);
        let plan = filter.map(|f| FilterPlan::new(f, steps + 1, basis.dt()));
        for k in 0..k_max {
            let mut ax = PulseParameterization::zeros(k_max, t_f);
            ax.a[k] = 1.0;
            let mut ay = PulseParameterization::zeros(k_max, t_f);
            ay.b[k] = 1.0;
            let (wx, wy) = (basis.expand(&ax), basis.expand(&ay));
            let (wx, wy) = match &plan {
                Some(pl) => (pl.apply(&wx), pl.apply(&wy)),
                None => (wx, wy),
            };
            bx.push(wx.omega_x);
            by.push(wy.omega_y);
        }
        let model = EffectiveModel::new(p);
        let (exp_minus_s, exp_plus_s) = sw_frame_maps_for(&model);
        let a4 = exp_minus_s.fixed_view::<4, 4>(0, 0).into_owned();
        let b4 = exp_plus_s.fixed_view::<4, 4>(0, 0).into_owned();
        let u0 = rotating_frame_map(p, t_f);
        let trace_map = b4 * target.adjoint() * u0.adjoint() * a4 * u0;
        Ok(CostEvaluator {
            p: *p,
            model,
            target: *target,
            kernel: CorrelationKernel::from_spec(spec)?,
            k_max,
            t_f,
            steps,
            stride: quadrature_stride(steps),
            bx,
            by,
            filtered: filter.is_some(),
            xi,
            field_limit,
            penalty_weight: 10.0,
            trace_map,
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.k_max
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn t_f(&self) -> f64 {
        self.t_f
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.t_f / self.steps as f64
    }

    pub fn is_filtered(&self) -> bool {
        self.filtered
    }

    /// Waveform seen by the cost (filtered when the evaluator was built with a filter).
    pub fn waveform(&self, x: &[f64]) -> Waveform {
        let mut w = Waveform::zeros(self.dt(), self.steps);
        for (a, col) in x[..self.k_max].iter().zip(&self.bx) {
            for (o, v) in w.omega_x.iter_mut().zip(col) {
                *o += a * v;
            }
        }
        for (b, col) in x[self.k_max..].iter().zip(&self.by) {
            for (o, v) in w.omega_y.iter_mut().zip(col) {
                *o += b * v;
            }
        }
        w.filtered = self.filtered;
        w
    }

    fn penalty(&self, w: &Waveform) -> (f64, Vec<f64>, Vec<f64>) {
        let n = w.omega_x.len();
        let mut gx = vec![0.0; n];
        let mut gy = vec![0.0; n];
        let mut total = 0.0;
        let scale = self.penalty_weight * w.dt;
        for j in 0..n {
            for (v, g) in [(w.omega_x[j], &mut gx[j]), (w.omega_y[j], &mut gy[j])] {
                let excess = v.abs() - self.field_limit;
                if excess > 0.0 {
                    total += scale * excess * excess;
                    *g = 2.0 * scale * excess * v.signum();
                }
            }
        }
        (total, gx, gy)
    }

    fn forward(&self, w: &Waveform) -> Vec<M4> {
        let g = self.p.g_factor_rate;
        let scale = c(0.0, -PHASE_PER_MHZ_NS * w.dt);
        let mut us = Vec::with_capacity(self.steps + 1);
        let mut u = M4::identity();
        us.push(u);
        for k in 0..self.steps {
            let (ox, oy) = w.midpoint(k);
            let h = rwa_matrix(&self.p, &self.model, g * ox, g * oy);
            u = expm_taylor(&(h * scale)) * u;
            us.push(u);
        }
        us
    }

    fn run_from(&self, us: &[M4]) -> EffectiveRun {
        let dt = self.dt();
        let mut phase5 = (self.p.u_minus_eps * self.t_f * 1e-3).fract();
        let mut extra = 0.0;
        for _ in 0..self.steps {
            extra += (self.model.j_p + self.model.j_m) * dt * 1e-3;
        }
        phase5 = (phase5 + extra).fract();
        EffectiveRun {
            u_rwa: us[self.steps],
            phase5_cycles: phase5,
            beta_start: 0.0,
            beta_end: 0.0,
            t_f: self.t_f,
            history: Vec::new(),
        }
    }

    fn j1_and_trace(&self, us: &[M4]) -> (f64, C64) {
        let run = self.run_from(us);
        let (u4, _) = crate::evolve::reconstruct_rotating(&self.p, 0.0, &run);
        let z = (self.target.adjoint() * u4).trace();
        (crate::evolve::infidelity(&u4, &self.target), z)
    }

    fn grid_response(&self, us: &[M4]) -> (Vec<M4>, Vec<f64>, f64) {
        let n_op = rwa_detuning_derivative(&self.model);
        let rt: Vec<M4> = us
            .iter()
            .step_by(self.stride)
            .map(|u| u.adjoint() * n_op * u)
            .collect();
        let h = self.dt() * self.stride as f64;
        (rt, trapezoid_weights(self.steps / self.stride + 1, h), h)
    }

    pub fn breakdown(&self, x: &[f64]) -> CostBreakdown {
        let w = self.waveform(x);
        let us = self.forward(&w);
        let (j1v, _) = self.j1_and_trace(&us);
        let (rt, wq, h) = self.grid_response(&us);
        let rbar: Vec<M4> = rt.iter().map(traceless).collect();
        let j2v = if self.kernel.is_zero() {
            0.0
        } else {
            let s = self.kernel.smooth(&rbar, &wq, h);
            J2_PREFACTOR
                * (0..rbar.len())
                    .map(|i| wq[i] * re_trace_product(&rbar[i], &s[i]))
                    .sum::<f64>()
        };
        CostBreakdown::new(j1v, j2v, fluence(&w), self.xi)
    }

    /// Objective K + penalty without a gradient.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let w = self.waveform(x);
        self.breakdown(x).total + self.penalty(&w).0
    }

    pub fn evaluate(&self, x: &[f64]) -> Evaluated {
        let w = self.waveform(x);
        let n = self.steps;
        let us = self.forward(&w);
        let (j1v, z) = self.j1_and_trace(&us);

        // J2 and its matrix sensitivities X_i = ∂J2/∂R̄_i
        let (rt, wq, h) = self.grid_response(&us);
        let rbar: Vec<M4> = rt.iter().map(traceless).collect();
        let mut j2v = 0.0;
        let mut xs = vec![M4::zeros(); rt.len()];
        if !self.kernel.is_zero() {
            let s = self.kernel.smooth(&rbar, &wq, h);
            for i in 0..rbar.len() {
                j2v += wq[i] * re_trace_product(&rbar[i], &s[i]);
                xs[i] = s[i] * r(2.0 * J2_PREFACTOR * wq[i]);
            }
            j2v *= J2_PREFACTOR;
        }

        // adjoint sweep: dK = Re Σ_k Tr[Ũ_k Z_k Ũ_{k+1}† dU_k]
        let g = self.p.g_factor_rate;
        let scale = c(0.0, -PHASE_PER_MHZ_NS * w.dt);
        let j1_part = self.trace_map * us[n] * (-z.conj() / 8.0);
        let mut hx = M4::zeros();
        let mut hy = M4::zeros();
        for (i, j) in [(0, 1), (0, 2), (1, 3), (2, 3)] {
            hx[(i, j)] = r(0.25 * g);
            hx[(j, i)] = r(0.25 * g);
            hy[(i, j)] = c(0.0, -0.25 * g);
            hy[(j, i)] = c(0.0, 0.25 * g);
        }
        let (ex, ey) = (hx * scale, hy * scale);
        let mut acc = M4::zeros();
        let mut gx = vec![0.0; n];
        let mut gy = vec![0.0; n];
        for k in (0..n).rev() {
            if (k + 1) % self.stride == 0 {
                let i = (k + 1) / self.stride;
                acc += xs[i] * rt[i] * r(2.0);
            }
            let zk = j1_part + acc;
            let a = us[k] * zk * us[k + 1].adjoint();
            let (ox, oy) = w.midpoint(k);
            let step = rwa_matrix(&self.p, &self.model, g * ox, g * oy) * scale;
            let (_, l) = expm_frechet(&step, &a);
            gx[k] = re_trace_product(&ex, &l);
            gy[k] = re_trace_product(&ey, &l);
        }

        // chain through midpoint averaging, fluence and penalty to the samples
        let (enx, eny) = w.energies();
        let flu = FLUENCE_SCALE * (enx + eny + (enx - eny).abs());
        let sgn = if enx >= eny { 1.0 } else { -1.0 };
        let (pen, px, py) = self.penalty(&w);
        let mut sx = px;
        let mut sy = py;
        for k in 0..n {
            sx[k] += 0.5 * gx[k];
            sx[k + 1] += 0.5 * gx[k];
            sy[k] += 0.5 * gy[k];
            sy[k + 1] += 0.5 * gy[k];
        }
        let fx = self.xi * FLUENCE_SCALE * (1.0 + sgn);
        let fy = self.xi * FLUENCE_SCALE * (1.0 - sgn);
        for j in 0..=n {
            let tw = if j == 0 || j == n { 0.5 } else { 1.0 } * w.dt * 2.0;
            sx[j] += fx * tw * w.omega_x[j];
            sy[j] += fy * tw * w.omega_y[j];
        }
        let mut gradient = Vec::with_capacity(self.dim());
        for col in &self.bx {
            gradient.push(col.iter().zip(&sx).map(|(a, b)| a * b).sum());
        }
        for col in &self.by {
            gradient.push(col.iter().zip(&sy).map(|(a, b)| a * b).sum());
        }
        let breakdown = CostBreakdown::new(j1v, j2v, flu, self.xi);
        Evaluated {
            objective: breakdown.total + pen,
            breakdown,
            penalty: pen,
            gradient,
        }
    }

    /// Central finite-difference gradient of the objective.
    pub fn fd_gradient(&self, x: &[f64], h: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        (0..x.len())
            .map(|k| {
                y[k] = x[k] + h;
                let up = self.objective(&y);
                y[k] = x[k] - h;
                let dn = self.objective(&y);
                y[k] = x[k];
                (up - dn) / (2.0 * h)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates;
    use crate::linalg::{eigh, hermiticity_error, max_abs};
    use crate::pulse::sample_envelope;

    fn defaults() -> SystemParams {
        SystemParams::default()
    }

    fn test_pulse(t_f: f64) -> PulseParameterization {
        let mut c = PulseParameterization::zeros(4, t_f);
        c.a = vec![0.31, -0.12, 0.05, 0.2];
        c.b = vec![-0.22, 0.08, 0.15, -0.04];
        c
    }

    #[test]
    fn fluence_cases() {
        let w = Waveform::zeros(0.1, 1000);
        assert_eq!(fluence(&w), 0.0);
        let mut c = PulseParameterization::zeros(2, 100.0);
        c.a[0] = 0.5;
        let w = sample_envelope(&c, 0.1).unwrap();
        let (ex, ey) = w.energies();
        assert_eq!(ey, 0.0);
        assert!((fluence(&w) - 2e-3 * ex).abs() < 1e-15 * ex);
        // a single sin³ lobe: ∫ sin⁶ over a half period = 5/16 · t_f
        assert!((ex - 0.25 * 5.0 / 16.0 * 100.0).abs() < 1e-9);
        let mut both = w.clone();
        both.omega_y = w.omega_x.clone();
        assert!((fluence(&both) - 2e-3 * ex).abs() < 1e-15);
    }

    #[test]
    fn response_operator_invariants() {
        let p = defaults();
        let w = sample_envelope(&test_pulse(100.0), 0.1).unwrap();
        let cache = build_noise_response(&p, &w, 10).unwrap();
        assert!(cache.trace_4x4(0).abs() < 1e-9);
        for i in [0, 17, 50, cache.len() - 1] {
            let rop = cache.r_op(i);
            assert!(hermiticity_error(&rop) < 1e-12);
            let (vals, _) = eigh(&rop);
            let mut v = vals.to_vec();
            v.sort_by(f64::total_cmp);
            assert!((v[4] - 1.0).abs() < 1e-7, "{v:?}");
            assert!(v[..4].iter().all(|x| x.abs() < 1e-7));
            assert!((rop.trace().re - 1.0).abs() < 1e-7);
            assert!(cache.trace_4x4(i) < 1e-4);
        }
        let r0 = cache.r_slow(0);
        assert!(max_abs(&(r0 - cache.detuning_op)) < 1e-15);
    }

    #[test]
    fn j2_scales_with_variance_and_vanishes_without_noise() {
        let p = defaults();
        let w = sample_envelope(&test_pulse(200.0), 0.1).unwrap();
        let cache = build_noise_response(&p, &w, quadrature_stride(w.steps())).unwrap();
        let base = NoiseSpec::default();
        let k1 = CorrelationKernel::from_spec(&base.with_sigma(1200.0)).unwrap();
        let k2 = CorrelationKernel::from_spec(&base.with_sigma(2400.0)).unwrap();
        let (a, b) = (j2(&cache, &k1), j2(&cache, &k2));
        assert!(a > 0.0);
        assert!((b / a - 4.0).abs() < 1e-12, "{}", b / a);
        let k0 = CorrelationKernel::from_spec(&base.with_sigma(0.0)).unwrap();
        assert_eq!(j2(&cache, &k0), 0.0);
    }

    #[test]
    fn recursive_kernel_matches_dense_quadrature() {
        let p = defaults();
        let w = sample_envelope(&test_pulse(200.0), 0.1).unwrap();
        let cache = build_noise_response(&p, &w, 4).unwrap();
        let kernel = CorrelationKernel::from_spec(&NoiseSpec::default()).unwrap();
        let fast = j2(&cache, &kernel);
        let dense = j2_dense(&cache, |t| kernel.eval(t));
        assert!((fast - dense).abs() < 1e-10 * dense, "{fast} {dense}");
    }

    #[test]
    fn symmetric_form_equals_ordered_expression() {
        // ½∬_{t2<t1} C Re Tr[R1 R2] − (1/16)∬ C Tr R1 Tr R2, both on the slow block
        let p = defaults();
        let w = sample_envelope(&test_pulse(100.0), 0.1).unwrap();
        let cache = build_noise_response(&p, &w, 10).unwrap();
        let kernel = CorrelationKernel::from_spec(&NoiseSpec::default()).unwrap();
        let n = cache.len();
        let h = cache.spacing();
        let wq = trapezoid_weights(n, h);
        let rs: Vec<M4> = (0..n).map(|i| cache.r_slow(i)).collect();
        let two_pi_sq = PHASE_PER_MHZ_NS * PHASE_PER_MHZ_NS;
        let mut ordered = 0.0;
        let mut traces = 0.0;
        for i in 0..n {
            for j in 0..n {
                let cw = wq[i] * wq[j] * kernel.eval((i as f64 - j as f64) * h);
                let rr = re_trace_product(&rs[i], &rs[j]);
                // the diagonal of the ordered region carries half weight
                let ord = if j < i {
                    1.0
                } else if j == i {
                    0.5
                } else {
                    0.0
                };
                ordered += ord * cw * rr;
                traces += cw * rs[i].trace().re * rs[j].trace().re;
            }
        }
        let literal = 0.5 * two_pi_sq * ordered - two_pi_sq * traces / 16.0;
        let ours = j2(&cache, &kernel);
        assert!((literal - ours).abs() < 1e-9 * ours, "{literal} {ours}");
    }

    #[test]
    fn idle_j2_matches_closed_form() {
        // zero drive: R̃ rotates at the middle-block gap, so each exponential term
        // integrates in closed form: ∬ e^{−λ|τ|} e^{iωτ} = 2 Re[T/s − (1 − e^{−sT})/s²], s = λ − iω
        let p = defaults();
        let t_f = 300.0;
        let w = Waveform::zeros(0.1, 3000);
        let cache = build_noise_response(&p, &w, 2).unwrap();
        let kernel = CorrelationKernel::from_spec(&NoiseSpec::default()).unwrap();
        let em = EffectiveModel::new(&p);
        let mb = crate::model::middle_block(&p, &em);
        let mut h0 = M4::zeros();
        for a in 0..2 {
            for b in 0..2 {
                h0[(a + 1, b + 1)] = r(mb[a][b]);
            }
        }
        let (vals, v) = eigh(&h0);
        let nbar = traceless(&(v.adjoint() * cache.detuning_op * v));
        let mut expected = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                let weight = nbar[(a, b)].norm_sqr();
                if weight == 0.0 {
                    continue;
                }
                let omega = 2.0 * std::f64::consts::PI * 1e-3 * (vals[a] - vals[b]);
                for (amp, lam) in kernel.weights.iter().zip(&kernel.rates) {
                    let s = c(*lam, -omega);
                    let term = r(t_f) / s - (r(1.0) - (-s * r(t_f)).exp()) / (s * s);
                    expected += weight * amp * 2.0 * term.re;
                }
            }
        }
        expected *= J2_PREFACTOR;
        let got = j2(&cache, &kernel);
        // trapezoid error on the 40 MHz oscillation at 0.2 ns spacing is ~2e-4
        assert!((got - expected).abs() < 1e-3 * expected, "{got} {expected}");
    }

    #[test]
    fn grid_halving_changes_j2_little() {
        let p = defaults();
        let w = sample_envelope(&test_pulse(500.0), 0.1).unwrap();
        let kernel = CorrelationKernel::from_spec(&NoiseSpec::default()).unwrap();
        let a = j2(&build_noise_response(&p, &w, 4).unwrap(), &kernel);
        let b = j2(&build_noise_response(&p, &w, 8).unwrap(), &kernel);
        assert!((a - b).abs() < 1e-3 * a, "{a} {b}");
    }

    #[test]
    fn evaluator_matches_free_functions() {
        let p = defaults();
        let spec = NoiseSpec::default();
        let c = test_pulse(200.0);
        let ev = CostEvaluator::new(
            &p,
            &gates::cnot(),
            &spec,
            4,
            200.0,
            2000,
            None,
            DEFAULT_XI,
            1.0,
        )
        .unwrap();
        let x = c.to_vec();
        let w = sample_envelope(&c, 0.1).unwrap();
        let direct = total_cost(&p, &w, &gates::cnot(), &spec, DEFAULT_XI).unwrap();
        let b = ev.breakdown(&x);
        assert!((b.j1 - direct.j1).abs() < 1e-12);
        assert!((b.j2 - direct.j2).abs() < 1e-12 * direct.j2);
        assert!((b.fluence - direct.fluence).abs() < 1e-9);
        let e = ev.evaluate(&x);
        assert_eq!(e.breakdown, b);
        assert_eq!(e.penalty, 0.0);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let p = defaults();
        let spec = NoiseSpec::default();
        for (filter, limit) in [(None, 1.0), (Some(FilterModel { f_c_mhz: 60.0 }), 0.25)] {
            let ev = CostEvaluator::new(
                &p,
                &gates::cnot(),
                &spec,
                4,
                200.0,
                2000,
                filter,
                1e-3,
                limit,
            )
            .unwrap();
            let x = test_pulse(200.0).to_vec();
            let e = ev.evaluate(&x);
            if limit < 1.0 {
                assert!(e.penalty > 0.0);
            }
            let fd = ev.fd_gradient(&x, 1e-5);
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (k, (a, b)) in e.gradient.iter().zip(&fd).enumerate() {
                assert!((a - b).abs() < 1e-6 * scale, "k={k}: adjoint {a} fd {b}");
            }
        }
    }
}
