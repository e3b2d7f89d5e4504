//! Double-dot system parameters and the four Hamiltonian representations.
//!
//! Basis order everywhere: |↑↑⟩, |↑↓⟩, |↓↑⟩, |↓↓⟩, |0,2⟩, labelled |dot2, dot1⟩.
//! Matrices are H/h in MHz; times are in ns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, cis_neg, r, M4, M5, PHASE_PER_MHZ_NS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    /// Mean Zeeman splitting, MHz.
    #[serde(rename = "ebar_z_mhz")]
    pub ebar_z: f64,
    /// E_Z2 - E_Z1, MHz.
    #[serde(rename = "delta_ez_mhz")]
    pub delta_ez: f64,
    /// Interdot tunnel coupling, MHz.
    #[serde(rename = "t0_mhz")]
    pub t0: f64,
    /// Detuned Coulomb energy U - ε, MHz.
    #[serde(rename = "u_minus_eps_mhz")]
    pub u_minus_eps: f64,
    pub eta: f64,
    /// gμ_B/h, MHz per mT.
    #[serde(rename = "g_factor_mhz_per_mt")]
    pub g_factor_rate: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            ebar_z: 39_160.0,
            delta_ez: -40.0,
            t0: 900.0,
            u_minus_eps: 276_710.0,
            eta: 0.0,
            g_factor_rate: 27.97,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.ebar_z,
            self.delta_ez,
            self.t0,
            self.u_minus_eps,
            self.eta,
            self.g_factor_rate,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("system", "all parameters must be finite"));
        }
        if self.t0 <= 0.0 {
            return Err(Error::invalid(
                "system.t0_mhz",
                format!("must be positive, got {}", self.t0),
            ));
        }
        if self.eta.abs() > 0.1 {
            return Err(Error::invalid(
                "system.eta",
                format!("|eta| must be <= 0.1, got {}", self.eta),
            ));
        }
        if self.g_factor_rate <= 0.0 {
            return Err(Error::invalid(
                "system.g_factor_mhz_per_mt",
                "must be positive",
            ));
        }
        if !self.sw_valid() {
            log::warn!(
                "u_minus_eps = {} MHz is below 50·t0 = {} MHz; Schrieffer-Wolff truncation is unreliable",
                self.u_minus_eps,
                50.0 * self.t0
            );
        }
        Ok(())
    }

    pub fn sw_valid(&self) -> bool {
        self.u_minus_eps >= 50.0 * self.t0 && self.u_minus_eps >= 50.0 * self.delta_ez.abs()
    }

    fn require_sw(&self) -> Result<()> {
        if self.sw_valid() {
            Ok(())
        } else {
            Err(Error::invalid(
                "u_minus_eps",
                format!(
                    "{} MHz violates u_minus_eps >= 50·max(t0, |delta_ez|) needed by the SW expansion",
                    self.u_minus_eps
                ),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystematicError {
    /// Fixed offset of the tunnel coupling, MHz.
    pub alpha_t0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianSample {
    pub matrix: M5,
    pub time: f64,
}

/// Second-order exchange quantities and the SW generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveModel {
    pub j_p: f64,
    pub j_m: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub sw_generator: M5,
}

impl EffectiveModel {
    pub fn new(p: &SystemParams) -> Self {
        Self::shifted(p, 0.0, 0.0)
    }

    /// Same construction with t0 → t0 + alpha_t0 and U−ε → U−ε + beta.
    pub fn shifted(p: &SystemParams, alpha_t0: f64, beta: f64) -> Self {
        let t0 = p.t0 + alpha_t0;
        let u = p.u_minus_eps + beta;
        let dp = u + 0.5 * p.delta_ez;
        let dm = u - 0.5 * p.delta_ez;
        let gamma_plus = t0 / dp;
        let gamma_minus = t0 / dm;
        let mut s = M5::zeros();
        s[(1, 4)] = r(-gamma_minus);
        s[(2, 4)] = r(gamma_plus);
        s[(4, 1)] = r(gamma_minus);
        s[(4, 2)] = r(-gamma_plus);
        EffectiveModel {
            j_p: t0 * t0 / dp,
            j_m: t0 * t0 / dm,
            gamma_plus,
            gamma_minus,
            sw_generator: s,
        }
    }

    /// Mean exchange J = (J_p + J_m)/2.
    pub fn exchange(&self) -> f64 {
        0.5 * (self.j_p + self.j_m)
    }
}

/// Coupling pattern of the transverse field (multiplies E_X).
pub fn drive_structure(eta: f64) -> M5 {
    let mut m = M5::zeros();
    let a = r(0.5);
    let b = r(0.5 * (1.0 + eta));
    m[(0, 1)] = a;
    m[(1, 0)] = a;
    m[(2, 3)] = a;
    m[(3, 2)] = a;
    m[(0, 2)] = b;
    m[(2, 0)] = b;
    m[(1, 3)] = b;
    m[(3, 1)] = b;
    m
}

/// Field-free part of the realistic Hamiltonian with all shifts applied.
pub fn static_hamiltonian(p: &SystemParams, alpha_t0: f64, beta: f64) -> M5 {
    let mut h = M5::zeros();
    h[(0, 0)] = r(p.ebar_z);
    h[(1, 1)] = r(0.5 * p.delta_ez);
    h[(2, 2)] = r(-0.5 * p.delta_ez);
    h[(3, 3)] = r(-p.ebar_z);
    h[(4, 4)] = r(p.u_minus_eps + beta);
    let t = p.t0 + alpha_t0;
    h[(1, 4)] = r(t);
    h[(4, 1)] = r(t);
    h[(2, 4)] = r(-t);
    h[(4, 2)] = r(-t);
    h
}

/// Lab-frame transverse field E_X(t) in MHz from envelopes in mT.
pub fn lab_field(p: &SystemParams, omega_x_mt: f64, omega_y_mt: f64, t: f64) -> f64 {
    let (s, co) = (p.ebar_z * PHASE_PER_MHZ_NS * t).sin_cos();
    p.g_factor_rate * (omega_x_mt * co - omega_y_mt * s)
}

pub fn ideal_hamiltonian(p: &SystemParams, ex: f64, t: f64) -> HamiltonianSample {
    let matrix = static_hamiltonian(p, 0.0, 0.0) + drive_structure(p.eta) * r(ex);
    HamiltonianSample { matrix, time: t }
}

pub fn realistic_hamiltonian(
    p: &SystemParams,
    se: &SystematicError,
    beta: f64,
    ex_filt: f64,
    t: f64,
) -> HamiltonianSample {
    let matrix = static_hamiltonian(p, se.alpha_t0, beta) + drive_structure(0.0) * r(ex_filt);
    HamiltonianSample { matrix, time: t }
}

/// Computational block of the SW-approximated Hamiltonian, plus its decoupled (5,5) entry.
pub fn sw_effective_hamiltonian_4x4(p: &SystemParams, ex: f64) -> Result<(M4, f64)> {
    p.require_sw()?;
    let em = EffectiveModel::new(p);
    let mut h = M4::zeros();
    h[(0, 0)] = r(p.ebar_z);
    h[(1, 1)] = r(0.5 * p.delta_ez - em.j_m);
    h[(2, 2)] = r(-0.5 * p.delta_ez - em.j_m);
    h[(3, 3)] = r(-p.ebar_z);
    h[(1, 2)] = r(em.exchange());
    h[(2, 1)] = r(em.exchange());
    let a = r(0.5 * ex);
    let b = r(0.5 * (1.0 + p.eta) * ex);
    h[(0, 1)] = a;
    h[(1, 0)] = a;
    h[(2, 3)] = a;
    h[(3, 2)] = a;
    h[(0, 2)] = b;
    h[(2, 0)] = b;
    h[(1, 3)] = b;
    h[(3, 1)] = b;
    Ok((h, p.u_minus_eps + em.j_p + em.j_m))
}

/// Rotating-frame RWA Hamiltonian; drive envelopes already converted to MHz.
pub fn rwa_hamiltonian_4x4(p: &SystemParams, omega_x: f64, omega_y: f64) -> Result<M4> {
    let limit = p.ebar_z / 100.0;
    if omega_x.hypot(omega_y) >= limit {
        return Err(Error::invalid(
            "drive envelope",
            format!(
                "|Ω| = {:.3} MHz exceeds Ē_Z/100 = {:.3} MHz",
                omega_x.hypot(omega_y),
                limit
            ),
        ));
    }
    Ok(rwa_matrix(p, &EffectiveModel::new(p), omega_x, omega_y))
}

/// Unchecked RWA matrix builder for arbitrary exchange values.
#[inline]
pub fn rwa_matrix(p: &SystemParams, em: &EffectiveModel, omega_x: f64, omega_y: f64) -> M4 {
    let mut h = M4::zeros();
    let d = c(0.25 * omega_x, -0.25 * omega_y);
    let dc = d.conj();
    h[(0, 1)] = d;
    h[(0, 2)] = d;
    h[(1, 3)] = d;
    h[(2, 3)] = d;
    h[(1, 0)] = dc;
    h[(2, 0)] = dc;
    h[(3, 1)] = dc;
    h[(3, 2)] = dc;
    h[(1, 1)] = r(0.5 * p.delta_ez - em.j_m);
    h[(2, 2)] = r(-0.5 * p.delta_ez - em.j_m);
    h[(1, 2)] = r(em.exchange());
    h[(2, 1)] = r(em.exchange());
    h
}

/// Derivative of the RWA Hamiltonian with respect to U−ε (drive independent).
pub fn rwa_detuning_derivative(em: &EffectiveModel) -> M4 {
    let gp2 = em.gamma_plus * em.gamma_plus;
    let gm2 = em.gamma_minus * em.gamma_minus;
    let mut n = M4::zeros();
    n[(1, 1)] = r(gm2);
    n[(2, 2)] = r(gm2);
    n[(1, 2)] = r(-0.5 * (gp2 + gm2));
    n[(2, 1)] = r(-0.5 * (gp2 + gm2));
    n
}

/// (e^{−S}, e^{+S}) truncated at second order.
pub fn sw_frame_maps(p: &SystemParams) -> (M5, M5) {
    sw_frame_maps_for(&EffectiveModel::new(p))
}

pub fn sw_frame_maps_for(em: &EffectiveModel) -> (M5, M5) {
    let s = em.sw_generator;
    let half_s2 = (s * s) * r(0.5);
    let id = M5::identity();
    (id - s + half_s2, id + s + half_s2)
}

pub fn rotating_frame_map(p: &SystemParams, t: f64) -> M4 {
    let ph = p.ebar_z * PHASE_PER_MHZ_NS * t;
    let mut u = M4::identity();
    u[(0, 0)] = cis_neg(ph);
    u[(3, 3)] = cis_neg(-ph);
    u
}

/// Effective detuning shift ν_↑↓ of the |↑↓⟩ branch.
pub fn effective_detuning(p: &SystemParams) -> f64 {
    let em = EffectiveModel::new(p);
    let half = 0.5 * p.delta_ez.abs();
    em.j_m + (half * half + em.exchange() * em.exchange()).sqrt() - half
}

/// Middle (|↑↓⟩, |↓↑⟩) block of the zero-drive RWA Hamiltonian.
pub fn middle_block(p: &SystemParams, em: &EffectiveModel) -> [[f64; 2]; 2] {
    [
        [0.5 * p.delta_ez - em.j_m, em.exchange()],
        [em.exchange(), -0.5 * p.delta_ez - em.j_m],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigh, expm_hermitian, hermiticity_error, max_abs, upper_4x4};

    fn defaults() -> SystemParams {
        SystemParams::default()
    }

    #[test]
    fn ideal_hamiltonian_zero_field_entries() {
        let h = ideal_hamiltonian(&defaults(), 0.0, 0.0).matrix;
        let diag = [39_160.0, -20.0, 20.0, -39_160.0, 276_710.0];
        for (k, d) in diag.iter().enumerate() {
            assert_eq!(h[(k, k)].re, *d);
        }
        assert_eq!(h[(1, 4)].re, 900.0);
        assert_eq!(h[(2, 4)].re, -900.0);
        assert_eq!(hermiticity_error(&h), 0.0);
    }

    #[test]
    fn no_tunnel_no_field_is_diagonal() {
        let p = SystemParams {
            t0: 1e-300,
            ..defaults()
        };
        let h = ideal_hamiltonian(&p, 0.0, 0.0).matrix;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!(h[(i, j)].norm() < 1e-299);
                }
            }
        }
    }

    #[test]
    fn eta_scales_cross_entries() {
        let p = SystemParams {
            eta: 0.05,
            ..defaults()
        };
        let h = ideal_hamiltonian(&p, 10.0, 0.0).matrix;
        assert!((h[(0, 2)].re - 5.25).abs() < 1e-12);
        assert!((h[(1, 3)].re - 5.25).abs() < 1e-12);
        assert!((h[(0, 1)].re - 5.0).abs() < 1e-12);
    }

    #[test]
    fn realistic_reduces_to_ideal() {
        let p = defaults();
        let a = ideal_hamiltonian(&p, 12.5, 3.0).matrix;
        let b = realistic_hamiltonian(&p, &SystematicError::default(), 0.0, 12.5, 3.0).matrix;
        assert_eq!(a, b);
        let b =
            realistic_hamiltonian(&p, &SystematicError { alpha_t0: 90.0 }, 2400.0, 0.0, 0.0).matrix;
        assert_eq!(b[(1, 4)].re, 990.0);
        assert_eq!(b[(4, 4)].re, 279_110.0);
    }

    #[test]
    fn exchange_values() {
        let em = EffectiveModel::new(&defaults());
        assert!((em.j_m - 810_000.0 / 276_730.0).abs() < 1e-12);
        assert!((em.j_p - 810_000.0 / 276_690.0).abs() < 1e-12);
        assert!((em.j_m - 2.9270).abs() < 1e-4);
        assert!((em.j_p - 2.9274).abs() < 1e-4);
        let sym = EffectiveModel::new(&SystemParams {
            delta_ez: 0.0,
            ..defaults()
        });
        assert_eq!(sym.j_p, sym.j_m);
    }

    #[test]
    fn rwa_zero_drive_block() {
        let h = rwa_hamiltonian_4x4(&defaults(), 0.0, 0.0).unwrap();
        let round = |x: f64| (x * 100.0).round() / 100.0;
        assert_eq!(round(h[(1, 1)].re), -22.93);
        assert_eq!(round(h[(2, 2)].re), 17.07);
        assert_eq!(round(h[(1, 2)].re), 2.93);
        assert_eq!(h[(0, 0)].norm() + h[(3, 3)].norm(), 0.0);
        let h = rwa_hamiltonian_4x4(&defaults(), 4.0, 0.0).unwrap();
        assert_eq!(h[(0, 1)], c(1.0, 0.0));
        assert!(rwa_hamiltonian_4x4(&defaults(), 400.0, 0.0).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn effective_detuning_from_eigenvalues() {
        let p = defaults();
        let nu = effective_detuning(&p);
        assert!((nu - 3.14).abs() < 0.02, "nu = {nu}");
        // oracle: shift of the |↑↓⟩-like eigenvalue away from its bare value δE_Z/2
        let h = rwa_hamiltonian_4x4(&p, 0.0, 0.0).unwrap();
        let (vals, _) = eigh(&h);
        let lowest = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(((0.5 * p.delta_ez - lowest) - nu).abs() < 1e-10);
        assert!((nu - 3.140_13).abs() < 1e-4);
    }

    #[test]
    fn sw_generator_block_diagonalizes() {
        let p = defaults();
        let em = EffectiveModel::new(&p);
        let s = em.sw_generator;
        assert_eq!(s.adjoint(), -s);
        // exact conjugation e^{S} H e^{-S}; S is anti-Hermitian so S = -i·(iS) with iS Hermitian
        let hs = s * c(0.0, 1.0);
        let es = expm_hermitian(&hs, 1.0); // exp(-i·iS) = exp(S)
        let h = ideal_hamiltonian(&p, 0.0, 0.0).matrix;
        let conj = es * h * es.adjoint();
        assert!(
            conj[(1, 4)].norm() < 0.05 && conj[(2, 4)].norm() < 0.05,
            "{}",
            conj[(1, 4)]
        );
        let (h4, h55) = sw_effective_hamiltonian_4x4(&p, 0.0).unwrap();
        assert!(max_abs(&(upper_4x4(&conj) - h4)) < 1e-2);
        assert!((conj[(4, 4)].re - h55).abs() < 1e-2);
        // with the opposite sign convention the coupling would double instead
        let es_bad = expm_hermitian(&(-hs), 1.0);
        let bad = es_bad * h * es_bad.adjoint();
        assert!(bad[(1, 4)].norm() > 1000.0);
    }

    #[test]
    fn sw_maps_are_near_inverse() {
        let (em_, ep) = sw_frame_maps(&defaults());
        let prod = em_ * ep - M5::identity();
        assert!(max_abs(&prod) < 1e-7);
        let (a, b) = sw_frame_maps(&SystemParams {
            t0: 1e-300,
            ..defaults()
        });
        assert!(max_abs(&(a - M5::identity())) < 1e-200);
        assert!(max_abs(&(b - M5::identity())) < 1e-200);
    }

    #[test]
    fn rotating_frame_map_cases() {
        let p = defaults();
        assert_eq!(rotating_frame_map(&p, 0.0), M4::identity());
        let u = rotating_frame_map(&p, 500.0); // Ē_Z·t = 19580 cycles
        assert!(max_abs(&(u - M4::identity())) < 1e-9);
        let q = rotating_frame_map(&p, 1.0 / (4.0 * p.ebar_z * 1e-3));
        assert!((q[(0, 0)] - c(0.0, -1.0)).norm() < 1e-12);
        assert!((q[(3, 3)] - c(0.0, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(defaults().validate().is_ok());
        assert!(SystemParams {
            t0: 0.0,
            ..defaults()
        }
        .validate()
        .is_err());
        assert!(SystemParams {
            eta: 0.2,
            ..defaults()
        }
        .validate()
        .is_err());
        let weak = SystemParams {
            u_minus_eps: 10_000.0,
            ..defaults()
        };
        assert!(weak.validate().is_ok());
        assert!(sw_effective_hamiltonian_4x4(&weak, 0.0).is_err());
    }
}
