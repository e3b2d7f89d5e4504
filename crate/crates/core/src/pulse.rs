//! sin³-basis control envelopes, sampling, the Gaussian AWG filter and field limits.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseParameterization {
    /// Ω_X coefficients, mT.
    pub a: Vec<f64>,
    /// Ω_Y coefficients, mT.
    pub b: Vec<f64>,
    /// Gate time, ns.
    pub t_f: f64,
}

impl PulseParameterization {
    pub fn new(a: Vec<f64>, b: Vec<f64>, t_f: f64) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::invalid(
                "pulse",
                "a and b need the same non-zero length",
            ));
        }
        if !(t_f > 0.0) {
            return Err(Error::invalid("t_f", "must be positive"));
        }
        Ok(PulseParameterization { a, b, t_f })
    }

    pub fn zeros(k_max: usize, t_f: f64) -> Self {
        PulseParameterization {
            a: vec![0.0; k_max],
            b: vec![0.0; k_max],
            t_f,
        }
    }

    pub fn k_max(&self) -> usize {
        self.a.len()
    }

    /// Coefficients as one vector [a_1..a_K, b_1..b_K].
    pub fn to_vec(&self) -> Vec<f64> {
        self.a.iter().chain(&self.b).cloned().collect()
    }

    pub fn from_slice(x: &[f64], t_f: f64) -> Self {
        let k = x.len() / 2;
        PulseParameterization {
            a: x[..k].to_vec(),
            b: x[k..2 * k].to_vec(),
            t_f,
        }
    }

    pub fn omega_x(&self, t: f64) -> f64 {
        self.a
            .iter()
            .enumerate()
            .map(|(k, a)| a * basis_x(k + 1, self.t_f, t))
            .sum()
    }

    pub fn omega_y(&self, t: f64) -> f64 {
        self.b
            .iter()
            .enumerate()
            .map(|(k, b)| b * basis_y(k + 1, self.t_f, t))
            .sum()
    }

    /// Plain-text coefficient file: header lines then one "a b" row per k.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "k_max = {}\nt_f_ns = {}\n# a_mT b_mT\n",
            self.k_max(),
            self.t_f
        );
        for (a, b) in self.a.iter().zip(&self.b) {
            s.push_str(&format!("{a:.17e} {b:.17e}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut k_max = None;
        let mut t_f = None;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("pulse file line {}: {what}", ln + 1));
            if let Some((key, val)) = line.split_once('=') {
                let v = val.trim();
                match key.trim() {
                    "k_max" => k_max = Some(v.parse::<usize>().map_err(|_| bad("bad k_max"))?),
                    "t_f_ns" => t_f = Some(v.parse::<f64>().map_err(|_| bad("bad t_f_ns"))?),
                    other => return Err(bad(&format!("unknown key `{other}`"))),
                }
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 2 {
                return Err(bad("expected two coefficient columns"));
            }
            a.push(
                cols[0]
                    .parse::<f64>()
                    .map_err(|_| bad("bad a coefficient"))?,
            );
            b.push(
                cols[1]
                    .parse::<f64>()
                    .map_err(|_| bad("bad b coefficient"))?,
            );
        }
        let k_max = k_max.ok_or_else(|| Error::Config("pulse file: missing k_max".into()))?;
        let t_f = t_f.ok_or_else(|| Error::Config("pulse file: missing t_f_ns".into()))?;
        if a.len() != k_max {
            return Err(Error::Config(format!(
                "pulse file: k_max = {k_max} but {} rows",
                a.len()
            )));
        }
        PulseParameterization::new(a, b, t_f)
    }
}

#[inline]
pub fn basis_x(k: usize, t_f: f64, t: f64) -> f64 {
    ((2 * k - 1) as f64 * PI * t / t_f).sin().powi(3)
}

#[inline]
pub fn basis_y(k: usize, t_f: f64, t: f64) -> f64 {
    ((2 * k) as f64 * PI * t / t_f).sin().powi(3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    /// ns
    pub dt: f64,
    /// mT, samples at t = k·dt, k = 0..=n
    pub omega_x: Vec<f64>,
    pub omega_y: Vec<f64>,
    pub filtered: bool,
}

impl Waveform {
    pub fn zeros(dt: f64, steps: usize) -> Self {
        Waveform {
            dt,
            omega_x: vec![0.0; steps + 1],
            omega_y: vec![0.0; steps + 1],
            filtered: false,
        }
    }

    pub fn steps(&self) -> usize {
        self.omega_x.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.steps() as f64
    }

    /// Envelope at the midpoint of step k (average of the bracketing samples).
    #[inline]
    pub fn midpoint(&self, k: usize) -> (f64, f64) {
        (
            0.5 * (self.omega_x[k] + self.omega_x[k + 1]),
            0.5 * (self.omega_y[k] + self.omega_y[k + 1]),
        )
    }

    /// Linear interpolation at arbitrary t (zero outside the record).
    pub fn at(&self, t: f64) -> (f64, f64) {
        let x = t / self.dt;
        if x < 0.0 || x > self.steps() as f64 {
            return (0.0, 0.0);
        }
        let k = (x.floor() as usize).min(self.steps() - 1);
        let w = x - k as f64;
        (
            self.omega_x[k] * (1.0 - w) + self.omega_x[k + 1] * w,
            self.omega_y[k] * (1.0 - w) + self.omega_y[k + 1] * w,
        )
    }

    /// Trapezoidal ∫Ω_X² dt and ∫Ω_Y² dt, mT²·ns.
    pub fn energies(&self) -> (f64, f64) {
        let trap = |v: &[f64]| {
            let n = v.len();
            let inner: f64 = v[1..n - 1].iter().map(|x| x * x).sum();
            (inner + 0.5 * (v[0] * v[0] + v[n - 1] * v[n - 1])) * self.dt
        };
        (trap(&self.omega_x), trap(&self.omega_y))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Waveform {
            dt: self.dt,
            omega_x: self.omega_x.iter().map(|x| x * s).collect(),
            omega_y: self.omega_y.iter().map(|x| x * s).collect(),
            filtered: self.filtered,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["time_ns", "omega_x_mT", "omega_y_mT"])?;
        for k in 0..self.omega_x.len() {
            wr.write_record([
                format!("{}", k as f64 * self.dt),
                format!("{:.17e}", self.omega_x[k]),
                format!("{:.17e}", self.omega_y[k]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R, filtered: bool) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut t = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let get = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Config(format!("waveform csv: bad field {i} in {rec:?}")))
            };
            t.push(get(0)?);
            x.push(get(1)?);
            y.push(get(2)?);
        }
        if t.len() < 2 {
            return Err(Error::Config("waveform csv needs at least two rows".into()));
        }
        let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        Ok(Waveform {
            dt,
            omega_x: x,
            omega_y: y,
            filtered,
        })
    }
}

/// Grid helper: number of steps for `dt` on [0, t_f], checking that it divides.
pub fn grid_steps(t_f: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    let n = (t_f / dt).round();
    if (n * dt - t_f).abs() > 1e-9 * t_f {
        return Err(Error::invalid(
            "dt",
            format!("{dt} ns does not divide t_f = {t_f} ns"),
        ));
    }
    Ok(n as usize)
}

pub fn sample_envelope(p: &PulseParameterization, dt: f64) -> Result<Waveform> {
    let n = grid_steps(p.t_f, dt)?;
    if n < 1000 {
        return Err(Error::invalid(
            "dt",
            format!("{n} steps; at least 1000 required"),
        ));
    }
    Ok(PulseBasis::new(p.k_max(), p.t_f, n).expand(p))
}

/// Precomputed basis functions on a fixed grid.
#[derive(Debug, Clone)]
pub struct PulseBasis {
    pub t_f: f64,
    pub steps: usize,
    bx: Vec<Vec<f64>>,
    by: Vec<Vec<f64>>,
}

impl PulseBasis {
    pub fn new(k_max: usize, t_f: f64, steps: usize) -> Self {
        let dt = t_f / steps as f64;
        let table = |f: fn(usize, f64, f64) -> f64| -> Vec<Vec<f64>> {
            (1..=k_max)
                .map(|k| (0..=steps).map(|j| f(k, t_f, j as f64 * dt)).collect())
                .collect()
        };
        PulseBasis {
            t_f,
            steps,
            bx: table(basis_x),
            by: table(basis_y),
        }
    }

    pub fn dt(&self) -> f64 {
        self.t_f / self.steps as f64
    }

    pub fn expand(&self, p: &PulseParameterization) -> Waveform {
        let mut w = Waveform::zeros(self.dt(), self.steps);
        for (a, col) in p.a.iter().zip(&self.bx) {
            for (o, v) in w.omega_x.iter_mut().zip(col) {
                *o += a * v;
            }
        }
        for (b, col) in p.b.iter().zip(&self.by) {
            for (o, v) in w.omega_y.iter_mut().zip(col) {
                *o += b * v;
            }
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterModel {
    /// Cutoff ω_c/2π, MHz. Infinite means no filtering.
    pub f_c_mhz: f64,
}

impl Default for FilterModel {
    fn default() -> Self {
        FilterModel { f_c_mhz: 425.4 }
    }
}

impl FilterModel {
    pub fn identity() -> Self {
        FilterModel {
            f_c_mhz: f64::INFINITY,
        }
    }

    /// Angular cutoff in rad/ns.
    pub fn omega_c(&self) -> f64 {
        2.0 * PI * self.f_c_mhz * 1e-3
    }

    /// Amplitude response at frequency f (MHz).
    pub fn response(&self, f_mhz: f64) -> f64 {
        (-(f_mhz / self.f_c_mhz).powi(2)).exp()
    }

    /// Standard deviation of the equivalent Gaussian time kernel, ns.
    pub fn kernel_width(&self) -> f64 {
        std::f64::consts::SQRT_2 / self.omega_c()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_c_mhz > 0.0) {
            return Err(Error::invalid("filter.f_c_mhz", "must be positive"));
        }
        Ok(())
    }
}

/// Reusable FFT plan for filtering waveforms of one length.
pub struct FilterPlan {
    filter: FilterModel,
    len: usize,
    pad: usize,
    response: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FilterPlan {
    pub fn new(filter: FilterModel, samples: usize, dt: f64) -> Self {
        let pad = if filter.f_c_mhz.is_finite() {
            ((10.0 * filter.kernel_width() / dt).ceil() as usize).max(8)
        } else {
            0
        };
        let len = (samples + 2 * pad).next_power_of_two();
        let df_mhz = 1e3 / (len as f64 * dt);
        let response = (0..len)
            .map(|k| {
                let kk = if k <= len / 2 {
                    k as f64
                } else {
                    k as f64 - len as f64
                };
                filter.response(kk * df_mhz)
            })
            .collect();
        let mut planner = FftPlanner::new();
        FilterPlan {
            filter,
            len,
            pad,
            response,
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }

    pub fn apply(&self, w: &Waveform) -> Waveform {
        if !self.filter.f_c_mhz.is_finite() {
            return Waveform {
                filtered: true,
                ..w.clone()
            };
        }
        let n = w.omega_x.len();
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        // both real channels in one complex transform; the response is real and even
        for k in 0..n {
            buf[self.pad + k] = Complex::new(w.omega_x[k], w.omega_y[k]);
        }
        self.fwd.process(&mut buf);
        for (z, g) in buf.iter_mut().zip(&self.response) {
            *z *= g / self.len as f64;
        }
        self.inv.process(&mut buf);
        let slice = &buf[self.pad..self.pad + n];
        Waveform {
            dt: w.dt,
            omega_x: slice.iter().map(|z| z.re).collect(),
            omega_y: slice.iter().map(|z| z.im).collect(),
            filtered: true,
        }
    }
}

pub fn apply_filter(w: &Waveform, f: &FilterModel) -> Result<Waveform> {
    if w.filtered {
        return Err(Error::invalid("waveform", "already filtered"));
    }
    f.validate()?;
    Ok(FilterPlan::new(*f, w.omega_x.len(), w.dt).apply(w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldReport {
    /// max_t sqrt(Ω_X² + Ω_Y²), mT
    pub magnitude: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl FieldReport {
    pub fn channel_max(&self) -> f64 {
        self.max_x.max(self.max_y)
    }
}

pub fn max_field(w: &Waveform) -> FieldReport {
    let mut rep = FieldReport {
        magnitude: 0.0,
        max_x: 0.0,
        max_y: 0.0,
    };
    for (x, y) in w.omega_x.iter().zip(&w.omega_y) {
        rep.magnitude = rep.magnitude.max(x.hypot(*y));
        rep.max_x = rep.max_x.max(x.abs());
        rep.max_y = rep.max_y.max(y.abs());
    }
    rep
}
