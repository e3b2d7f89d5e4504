//! 1/f^α detuning noise: analytic spectrum, correlation function and an
//! Ornstein–Uhlenbeck bank that synthesizes trajectories.
//!
//! Spectra are two-sided densities S(f) in MHz²/Hz with ∫_{-∞}^{∞} S df = σ².

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub alpha: f64,
    /// Standard deviation, MHz.
    #[serde(rename = "sigma_mhz")]
    pub sigma: f64,
    /// Hz
    #[serde(rename = "f_low_hz")]
    pub f_low: f64,
    /// Hz
    #[serde(rename = "f_high_hz")]
    pub f_high: f64,
    /// MHz²/Hz
    #[serde(rename = "white_floor_mhz2_per_hz")]
    pub white_floor: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            alpha: 1.01,
            sigma: 2400.0,
            f_low: 1e-2,
            f_high: 1e6,
            white_floor: 0.0,
        }
    }
}

impl NoiseSpec {
    pub fn with_sigma(self, sigma: f64) -> Self {
        let scale = if self.sigma > 0.0 {
            (sigma / self.sigma).powi(2)
        } else {
            0.0
        };
        NoiseSpec {
            sigma,
            white_floor: self.white_floor * scale,
            ..self
        }
    }

    /// 1/f^2.5 + c Zeeman noise over 10³–10⁵ Hz, with the floor meeting the
    /// power law at the band top.
    pub fn dephasing(sigma: f64) -> Self {
        let mut spec = NoiseSpec {
            alpha: 2.5,
            sigma,
            f_low: 1e3,
            f_high: 1e5,
            white_floor: 0.0,
        };
        let i_pl = spec.power_law_integral();
        let top = spec.f_high.powf(1.0 - spec.alpha);
        let a = sigma * sigma / (2.0 * (i_pl + top));
        spec.white_floor = a * spec.f_high.powf(-spec.alpha);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.5..=3.0).contains(&self.alpha) {
            return Err(Error::invalid(
                "noise.alpha",
                format!("{} outside [0.5, 3]", self.alpha),
            ));
        }
        if !(self.f_low > 0.0 && self.f_low < self.f_high) {
            return Err(Error::invalid("noise.f_low_hz", "need 0 < f_low < f_high"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(
                "noise.sigma_mhz",
                format!("{} must be finite and >= 0", self.sigma),
            ));
        }
        if self.white_floor < 0.0 {
            return Err(Error::invalid(
                "noise.white_floor_mhz2_per_hz",
                "must be >= 0",
            ));
        }
        if self.power_law_variance() < -1e-9 * self.sigma * self.sigma {
            return Err(Error::invalid(
                "noise.white_floor_mhz2_per_hz",
                "white floor alone exceeds sigma²",
            ));
        }
        Ok(())
    }

    /// f_low^{1-α} + ∫_{f_low}^{f_high} f^{-α} df
    fn power_law_integral(&self) -> f64 {
        let e = 1.0 - self.alpha;
        let band = if e.abs() < 1e-12 {
            (self.f_high / self.f_low).ln()
        } else {
            (self.f_high.powf(e) - self.f_low.powf(e)) / e
        };
        self.f_low.powf(e) + band
    }

    fn power_law_variance(&self) -> f64 {
        self.sigma * self.sigma - 2.0 * self.white_floor * self.f_high
    }

    /// Prefactor A of the A/f^α term.
    pub fn amplitude(&self) -> f64 {
        self.power_law_variance().max(0.0) / (2.0 * self.power_law_integral())
    }
}

pub fn analytic_spectrum(spec: &NoiseSpec, f: f64) -> f64 {
    let f = f.abs();
    if f > spec.f_high {
        return 0.0;
    }
    let a = spec.amplitude();
    a * f.max(spec.f_low).powf(-spec.alpha) + spec.white_floor
}

/// sin(2π f τ)/(2π τ), the integral of cos(2π f' τ) over f' ∈ [0, f].
fn sinc_integral(f: f64, tau_s: f64) -> f64 {
    let x = 2.0 * PI * tau_s;
    if (x * f).abs() < 1e-8 {
        f
    } else {
        (x * f).sin() / x
    }
}

/// C(τ) = ∫ S(f) cos(2π f τ) df, τ in ns, result in MHz².
pub fn correlation(spec: &NoiseSpec, tau: f64) -> f64 {
    let tau_s = tau.abs() * 1e-9;
    let a = spec.amplitude();
    let flat = 2.0 * a * spec.f_low.powf(-spec.alpha) * sinc_integral(spec.f_low, tau_s);
    let white = 2.0 * spec.white_floor * sinc_integral(spec.f_high, tau_s);
    // power-law band on a log grid: ∫ A f^{1-α} cos(2π f τ) du, f = e^u
    let (u0, u1) = (spec.f_low.ln(), spec.f_high.ln());
    let phase_span = 2.0 * PI * spec.f_high * tau_s * (u1 - u0);
    let mut n = ((phase_span / 0.02).ceil() as usize).max(4000);
    n += n % 2;
    let h = (u1 - u0) / n as f64;
    let g = |u: f64| {
        let f = u.exp();
        f.powf(1.0 - spec.alpha) * (2.0 * PI * f * tau_s).cos()
    };
    let mut acc = g(u0) + g(u1);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * g(u0 + k as f64 * h);
    }
    let band = 2.0 * a * acc * h / 3.0;
    flat + white + band
}

/// Correlation function sampled on a uniform lag grid with linear interpolation.
#[derive(Debug, Clone)]
pub struct CorrelationTable {
    pub dtau: f64,
    pub values: Vec<f64>,
}

impl CorrelationTable {
    pub fn from_fn(tau_max: f64, points: usize, f: impl Fn(f64) -> f64) -> Self {
        let points = points.max(2);
        let dtau = tau_max / (points - 1) as f64;
        let values = (0..points).map(|k| f(k as f64 * dtau)).collect();
        CorrelationTable { dtau, values }
    }

    pub fn analytic(spec: &NoiseSpec, tau_max: f64, points: usize) -> Self {
        Self::from_fn(tau_max, points, |t| correlation(spec, t))
    }

    pub fn of_bank(bank: &OUBank, tau_max: f64, points: usize) -> Self {
        Self::from_fn(tau_max, points, |t| bank.correlation(t))
    }

    pub fn eval(&self, tau: f64) -> f64 {
        let x = tau.abs() / self.dtau;
        let k = x.floor() as usize;
        if k + 1 >= self.values.len() {
            return *self.values.last().unwrap();
        }
        let w = x - k as f64;
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }

    pub fn scaled(&self, factor: f64) -> Self {
        CorrelationTable {
            dtau: self.dtau,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OUBank {
    /// Relaxation rates, 1/ns.
    pub rates: Vec<f64>,
    /// Stationary standard deviations, MHz.
    pub amplitudes: Vec<f64>,
    /// Current values, MHz.
    pub states: Vec<f64>,
}

pub const DEFAULT_PROCESSES_PER_DECADE: usize = 2;

pub fn build_bank(spec: &NoiseSpec, processes_per_decade: usize) -> Result<OUBank> {
    spec.validate()?;
    if processes_per_decade == 0 {
        return Err(Error::invalid("processes_per_decade", "must be >= 1"));
    }
    let decades = (spec.f_high / spec.f_low).log10();
    let n = ((decades * processes_per_decade as f64).round() as usize).max(1);
    let step = decades / n as f64;
    // corners at the centres of equal log-width bins spanning [f_low, f_high]
    let corners: Vec<f64> = (0..n)
        .map(|k| spec.f_low * 10f64.powf((k as f64 + 0.5) * step))
        .collect();
    let mut weights: Vec<f64> = corners.iter().map(|f| f.powf(1.0 - spec.alpha)).collect();
    if n > 1 {
        weights[0] *= 0.5;
        weights[n - 1] *= 0.5;
    }
    let total: f64 = weights.iter().sum();
    let var = spec.power_law_variance().max(0.0);
    let mut rates: Vec<f64> = corners.iter().map(|f| 2.0 * PI * f * 1e-9).collect();
    let mut amplitudes: Vec<f64> = weights.iter().map(|w| (var * w / total).sqrt()).collect();
    if spec.white_floor > 0.0 {
        // flat level 2a²/λ = c with total variance 2·c·f_high  ⇒  λ = 4·f_high (1/s)
        rates.push(4.0 * spec.f_high * 1e-9);
        amplitudes.push((2.0 * spec.white_floor * spec.f_high).sqrt());
        let mut idx: Vec<usize> = (0..rates.len()).collect();
        idx.sort_by(|&i, &j| rates[i].total_cmp(&rates[j]));
        rates = idx.iter().map(|&i| rates[i]).collect();
        amplitudes = idx.iter().map(|&i| amplitudes[i]).collect();
    }
    let states = vec![0.0; rates.len()];
    Ok(OUBank {
        rates,
        amplitudes,
        states,
    })
}

impl OUBank {
    pub fn variance(&self) -> f64 {
        self.amplitudes.iter().map(|a| a * a).sum()
    }

    /// Two-sided Lorentzian-sum spectrum, MHz²/Hz.
    pub fn spectrum(&self, f: f64) -> f64 {
        let w = 2.0 * PI * f;
        self.rates
            .iter()
            .zip(&self.amplitudes)
            .map(|(r, a)| {
                let lam = r * 1e9;
                2.0 * a * a * lam / (lam * lam + w * w)
            })
            .sum()
    }

    /// Exact stationary correlation Σ a_k² e^{−λ_k |τ|}, τ in ns.
    pub fn correlation(&self, tau: f64) -> f64 {
        self.rates
            .iter()
            .zip(&self.amplitudes)
            .map(|(r, a)| a * a * (-r * tau.abs()).exp())
            .sum()
    }

    pub fn draw_stationary<R: Rng>(&mut self, rng: &mut R) {
        for (s, a) in self.states.iter_mut().zip(&self.amplitudes) {
            let z: f64 = rng.sample(StandardNormal);
            *s = a * z;
        }
    }

    pub fn value(&self) -> f64 {
        self.states.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrajectory {
    pub dt: f64,
    pub samples: Vec<f64>,
    pub seed: u64,
}

impl NoiseTrajectory {
    pub fn zeros(dt: f64, n: usize) -> Self {
        NoiseTrajectory {
            dt,
            samples: vec![0.0; n],
            seed: 0,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["time_ns", "beta_MHz"])?;
        for (k, b) in self.samples.iter().enumerate() {
            wr.write_record([format!("{}", k as f64 * self.dt), format!("{b:.9e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Per-realization seed from (master seed, index) via a SplitMix64 finalizer.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Exact OU updates summed over the bank. The bank's own `states` are not
/// used; each trajectory starts from a fresh stationary draw so the result
/// depends only on (bank, dt, n, seed).
pub fn sample_trajectory(bank: &OUBank, dt: f64, n: usize, seed: u64) -> Result<NoiseTrajectory> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    if n == 0 {
        return Err(Error::invalid("n", "must be >= 1"));
    }
    let mut rng = rng_from_seed(seed);
    let mut b = bank.clone();
    b.draw_stationary(&mut rng);
    let decay: Vec<f64> = b.rates.iter().map(|r| (-r * dt).exp()).collect();
    let kick: Vec<f64> = b
        .amplitudes
        .iter()
        .zip(&decay)
        .map(|(a, d)| a * (1.0 - d * d).max(0.0).sqrt())
        .collect();
    let active: Vec<usize> = (0..b.rates.len())
        .filter(|&k| b.amplitudes[k] > 0.0)
        .collect();
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(b.value());
        for &k in &active {
            let z: f64 = rng.sample(StandardNormal);
            b.states[k] = b.states[k] * decay[k] + kick[k] * z;
        }
    }
    Ok(NoiseTrajectory { dt, samples, seed })
}

/// One-sided periodogram (MHz²/Hz) of a mean-removed record sampled every `dt` ns.
pub fn periodogram(samples: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .map(|x| Complex::new(x - mean, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let dt_s = dt * 1e-9;
    let df = 1.0 / (n as f64 * dt_s);
    let half = n / 2;
    let mut freqs = Vec::with_capacity(half);
    let mut psd = Vec::with_capacity(half);
    for (k, x) in buf.iter().enumerate().take(half).skip(1) {
        freqs.push(k as f64 * df);
        psd.push(2.0 * x.norm_sqr() * dt_s / n as f64);
    }
    (freqs, psd)
}

/// Least-squares slope of log10 S vs log10 f over [f_lo, f_hi] after
/// averaging into logarithmic bins (10 per decade).
pub fn fit_log_slope(freqs: &[f64], psd: &[f64], f_lo: f64, f_hi: f64) -> f64 {
    let bins_per_decade = 10.0;
    let nb = (((f_hi / f_lo).log10() * bins_per_decade).ceil() as usize).max(1);
    let mut sum = vec![0.0; nb];
    let mut cnt = vec![0usize; nb];
    let mut lf = vec![0.0; nb];
    for (f, s) in freqs.iter().zip(psd) {
        if *f < f_lo || *f >= f_hi {
            continue;
        }
        let b = (((f / f_lo).log10() * bins_per_decade) as usize).min(nb - 1);
        sum[b] += s;
        lf[b] += f.log10();
        cnt[b] += 1;
    }
    let pts: Vec<(f64, f64)> = (0..nb)
        .filter(|&b| cnt[b] > 0)
        .map(|b| (lf[b] / cnt[b] as f64, (sum[b] / cnt[b] as f64).log10()))
        .collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trapezoid_log(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
        let (u0, u1) = (lo.ln(), hi.ln());
        let h = (u1 - u0) / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let u = u0 + k as f64 * h;
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            acc += w * f(u.exp()) * u.exp();
        }
        acc * h
    }

    #[test]
    fn spectrum_normalization() {
        let spec = NoiseSpec::default();
        // ∫_{-∞}^{∞} S df = 2·(flat part + band)
        let flat = spec.f_low * analytic_spectrum(&spec, spec.f_low * 0.5);
        let band = trapezoid_log(
            |f| analytic_spectrum(&spec, f),
            spec.f_low,
            spec.f_high,
            200_000,
        );
        let total = 2.0 * (flat + band);
        assert!((total / (spec.sigma * spec.sigma) - 1.0).abs() < 1e-2);
    }

    #[test]
    fn spectrum_shape() {
        let spec = NoiseSpec::default();
        let ratio = analytic_spectrum(&spec, 1.0) / analytic_spectrum(&spec, 100.0);
        assert!((ratio - 100f64.powf(1.01)).abs() < 1e-9 * ratio);
        assert!((ratio - 104.7).abs() < 0.05);
        assert_eq!(analytic_spectrum(&spec, 2e6), 0.0);
        assert_eq!(
            analytic_spectrum(&spec, 1e-4),
            analytic_spectrum(&spec, 1e-3)
        );
    }

    #[test]
    fn correlation_at_zero_is_variance() {
        let spec = NoiseSpec::default();
        let c0 = correlation(&spec, 0.0);
        assert!((c0 / 5.76e6 - 1.0).abs() < 1e-6, "{c0}");
        assert_eq!(correlation(&spec, 300.0), correlation(&spec, -300.0));
        let ds = NoiseSpec::dephasing(0.5);
        assert!((correlation(&ds, 0.0) / 0.25 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn correlation_at_500ns() {
        // oracle value from an independent dense cosine transform
        let spec = NoiseSpec::default();
        let rho = correlation(&spec, 500.0) / correlation(&spec, 0.0);
        assert!((rho - 0.92261).abs() < 2e-4, "{rho}");
    }

    #[test]
    fn bank_layout_and_variance() {
        let spec = NoiseSpec::default();
        let bank = build_bank(&spec, 2).unwrap();
        assert_eq!(bank.rates.len(), 16);
        assert!(bank.rates.windows(2).all(|w| w[1] > w[0]));
        assert!((bank.variance() / 5.76e6 - 1.0).abs() < 1e-12);
        let flat = bank.spectrum(spec.f_low / 10.0) / bank.spectrum(spec.f_low);
        assert!((0.8..=1.2).contains(&flat), "{flat}");
        let zero = build_bank(&spec.with_sigma(0.0), 2).unwrap();
        assert!(zero.amplitudes.iter().all(|a| *a == 0.0));
        assert!(build_bank(&NoiseSpec { alpha: 0.4, ..spec }, 2).is_err());
        assert!(build_bank(&spec, 0).is_err());
    }

    #[test]
    fn bank_slope_over_band() {
        let spec = NoiseSpec::default();
        let bank = build_bank(&spec, 2).unwrap();
        let fs: Vec<f64> = (0..=50)
            .map(|k| 10f64.powf(-1.0 + k as f64 * 0.1))
            .collect();
        let ss: Vec<f64> = fs.iter().map(|f| bank.spectrum(*f)).collect();
        let slope = fit_log_slope(&fs, &ss, 0.1, 1e5 * 1.0001);
        assert!((slope + 1.01).abs() < 0.05, "{slope}");
    }

    #[test]
    fn bank_tracks_analytic_correlation() {
        let spec = NoiseSpec::default();
        let bank = build_bank(&spec, 2).unwrap();
        let c0 = correlation(&spec, 0.0);
        for tau in [10.0, 100.0, 300.0, 500.0, 1000.0] {
            let d = (bank.correlation(tau) - correlation(&spec, tau)).abs() / c0;
            assert!(d < 0.05, "tau {tau}: {d}");
        }
    }

    #[test]
    fn dephasing_spec_white_floor() {
        let ds = NoiseSpec::dephasing(1.0);
        assert!(ds.validate().is_ok());
        let top = analytic_spectrum(&ds, ds.f_high);
        assert!((top - 2.0 * ds.white_floor).abs() < 1e-12 * top);
        let bank = build_bank(&ds, 2).unwrap();
        assert!((bank.variance() - 1.0).abs() < 1e-12);
        let scaled = ds.with_sigma(2.0);
        assert!((scaled.white_floor - 4.0 * ds.white_floor).abs() < 1e-18);
    }

    #[test]
    fn trajectories_are_deterministic() {
        let bank = build_bank(&NoiseSpec::default(), 2).unwrap();
        let a = sample_trajectory(&bank, 0.1, 1000, 7).unwrap();
        let b = sample_trajectory(&bank, 0.1, 1000, 7).unwrap();
        let c = sample_trajectory(&bank, 0.1, 1000, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
        assert!(sample_trajectory(&bank, 0.0, 10, 1).is_err());
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }

    #[test]
    fn table_interpolates() {
        let t = CorrelationTable::from_fn(10.0, 11, |x| 2.0 * x);
        assert!((t.eval(2.5) - 5.0).abs() < 1e-12);
        assert!((t.eval(-2.5) - 5.0).abs() < 1e-12);
        assert_eq!(t.eval(50.0), 20.0);
    }

    #[test]
    fn periodogram_of_white_noise_is_flat() {
        let mut rng = rng_from_seed(3);
        let x: Vec<f64> = (0..1 << 14)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (f, p) = periodogram(&x, 1.0);
        let slope = fit_log_slope(&f, &p, 2e6, 4e8);
        assert!(slope.abs() < 0.1, "{slope}");
        // one-sided level 2·dt for unit-variance white noise
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean / 2e-9 - 1.0).abs() < 0.05);
    }
}
