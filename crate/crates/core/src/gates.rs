//! Target unitaries in the |dot2, dot1⟩ computational basis (↑ = |0⟩).

use crate::linalg::{c, kron2, r, M2, M4, ONE, ZERO};

pub fn identity() -> M4 {
    M4::identity()
}

/// Control dot 2, target dot 1.
pub fn cnot() -> M4 {
    let mut u = M4::zeros();
    u[(0, 0)] = ONE;
    u[(1, 1)] = ONE;
    u[(2, 3)] = ONE;
    u[(3, 2)] = ONE;
    u
}

pub fn cz() -> M4 {
    let mut u = M4::identity();
    u[(3, 3)] = r(-1.0);
    u
}

pub fn pauli_x() -> M2 {
    M2::new(ZERO, ONE, ONE, ZERO)
}

pub fn hadamard() -> M2 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    M2::new(r(s), r(s), r(s), r(-s))
}

/// X on dot 1, identity on dot 2.
pub fn i_x() -> M4 {
    kron2(&M2::identity(), &pauli_x())
}

/// Hadamard on dot 2, identity on dot 1.
pub fn h_i() -> M4 {
    kron2(&hadamard(), &M2::identity())
}

/// diag(1, e^{iφ1}, e^{iφ2}, e^{i(φ1+φ2)}): independent Z phases on dot 1 and dot 2.
pub fn local_z(phi_dot1: f64, phi_dot2: f64) -> M4 {
    let e = |p: f64| c(p.cos(), p.sin());
    M4::from_diagonal(&nalgebra::Vector4::new(
        ONE,
        e(phi_dot1),
        e(phi_dot2),
        e(phi_dot1 + phi_dot2),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gate {
    Cnot,
    IX,
    HI,
    Identity,
    Cz,
}

impl Gate {
    pub fn unitary(&self) -> M4 {
        match self {
            Gate::Cnot => cnot(),
            Gate::IX => i_x(),
            Gate::HI => h_i(),
            Gate::Identity => identity(),
            Gate::Cz => cz(),
        }
    }

    /// Gate time (ns) and basis size used for the optimized pulses.
    pub fn default_timing(&self) -> (f64, usize) {
        match self {
            Gate::Cnot => (500.0, 11),
            Gate::IX => (200.0, 8),
            Gate::HI => (250.0, 8),
            Gate::Identity | Gate::Cz => (500.0, 11),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Gate::Cnot => "cnot",
            Gate::IX => "i-x",
            Gate::HI => "h-i",
            Gate::Identity => "identity",
            Gate::Cz => "cz",
        }
    }

    pub fn parse(s: &str) -> Option<Gate> {
        match s.to_ascii_lowercase().as_str() {
            "cnot" => Some(Gate::Cnot),
            "i-x" | "ix" | "i_x" => Some(Gate::IX),
            "h-i" | "hi" | "h_i" => Some(Gate::HI),
            "identity" | "id" => Some(Gate::Identity),
            "cz" => Some(Gate::Cz),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::unitarity_error;

    #[test]
    fn targets_are_unitary() {
        for g in [Gate::Cnot, Gate::IX, Gate::HI, Gate::Identity, Gate::Cz] {
            assert!(unitarity_error(&g.unitary()) < 1e-15);
            assert_eq!(Gate::parse(g.name()), Some(g));
        }
    }

    #[test]
    fn cnot_flips_dot1_when_dot2_down() {
        let u = cnot();
        // |↓↑⟩ (index 2) ↔ |↓↓⟩ (index 3)
        assert_eq!(u[(3, 2)], ONE);
        assert_eq!(u[(1, 1)], ONE);
        // I⊗X flips dot 1 regardless of dot 2
        let x = i_x();
        assert_eq!(x[(1, 0)], ONE);
        assert_eq!(x[(3, 2)], ONE);
    }

    #[test]
    fn cz_is_cnot_conjugated_by_hadamard_on_target() {
        let h1 = kron2(&M2::identity(), &hadamard());
        let v = h1 * cz() * h1;
        assert!(crate::linalg::max_abs(&(v - cnot())) < 1e-15);
    }
}
