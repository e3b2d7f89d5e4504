//! Small dense complex matrices and the exponentials used by the propagators.

use nalgebra::{Complex, DMatrix, SMatrix};

pub type C64 = Complex<f64>;
pub type M2 = SMatrix<C64, 2, 2>;
pub type M4 = SMatrix<C64, 4, 4>;
pub type M5 = SMatrix<C64, 5, 5>;

/// Radians accumulated per MHz·ns.
pub const PHASE_PER_MHZ_NS: f64 = 2.0 * std::f64::consts::PI * 1e-3;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn r(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// e^{-i phi}
#[inline]
pub fn cis_neg(phi: f64) -> C64 {
    let (s, co) = phi.sin_cos();
    C64::new(co, -s)
}

pub fn max_abs<const D: usize>(m: &SMatrix<C64, D, D>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// max |U†U - I|
pub fn unitarity_error<const D: usize>(u: &SMatrix<C64, D, D>) -> f64 {
    let g = u.adjoint() * u - SMatrix::<C64, D, D>::identity();
    max_abs(&g)
}

/// max |H - H†|
pub fn hermiticity_error<const D: usize>(h: &SMatrix<C64, D, D>) -> f64 {
    max_abs(&(h - h.adjoint()))
}

/// Eigen-decomposition of a Hermitian matrix: (eigenvalues, eigenvectors as columns).
pub fn eigh<const D: usize>(h: &SMatrix<C64, D, D>) -> ([f64; D], SMatrix<C64, D, D>) {
    let dm = DMatrix::from_iterator(D, D, h.iter().cloned());
    let eig = dm.symmetric_eigen();
    let mut vals = [0.0; D];
    for (v, e) in vals.iter_mut().zip(eig.eigenvalues.iter()) {
        *v = *e;
    }
    let vecs = SMatrix::<C64, D, D>::from_iterator(eig.eigenvectors.iter().cloned());
    (vals, vecs)
}

/// exp(-i·theta·H) for Hermitian H, by diagonalization.
pub fn expm_hermitian<const D: usize>(h: &SMatrix<C64, D, D>, theta: f64) -> SMatrix<C64, D, D> {
    let (vals, v) = eigh(h);
    let mut scaled = v;
    for (j, lam) in vals.iter().enumerate() {
        let ph = cis_neg(theta * lam);
        for i in 0..D {
            scaled[(i, j)] *= ph;
        }
    }
    scaled * v.adjoint()
}

/// General matrix exponential by scaling and squaring of a Taylor polynomial.
///
/// Accurate to roughly machine precision; used in the propagation hot loops
/// where the generator norm per step is already small.
pub fn expm_taylor<const D: usize>(x: &SMatrix<C64, D, D>) -> SMatrix<C64, D, D> {
    let mut norm = 0.0f64;
    for j in 0..D {
        let col: f64 = (0..D).map(|i| x[(i, j)].norm()).sum();
        norm = norm.max(col);
    }
    let mut squarings = 0;
    while norm > 0.5 {
        norm *= 0.5;
        squarings += 1;
    }
    let a = x * r(0.5f64.powi(squarings));
    // smallest degree whose remainder term drops below 1e-17
    let mut degree = 1usize;
    let mut term = norm;
    while term > 1e-17 && degree < 18 {
        degree += 1;
        term *= norm / degree as f64;
    }
    let id = SMatrix::<C64, D, D>::identity();
    let mut out = id;
    for k in (1..=degree).rev() {
        out = id + (a * out) * r(1.0 / k as f64);
    }
    for _ in 0..squarings {
        out = out * out;
    }
    out
}

/// exp(x) together with its Fréchet derivative in direction e,
/// L = ∫₀¹ e^{sx} e e^{(1−s)x} ds, from the block-triangular exponential.
pub fn expm_frechet<const D: usize>(
    x: &SMatrix<C64, D, D>,
    e: &SMatrix<C64, D, D>,
) -> (SMatrix<C64, D, D>, SMatrix<C64, D, D>) {
    let mut norm = 0.0f64;
    for j in 0..D {
        let col: f64 = (0..D).map(|i| x[(i, j)].norm()).sum();
        norm = norm.max(col);
    }
    let mut squarings = 0;
    while norm > 0.5 {
        norm *= 0.5;
        squarings += 1;
    }
    let s = r(0.5f64.powi(squarings));
    let (a, b) = (x * s, e * s);
    let mut degree = 1usize;
    let mut term = norm;
    while term > 1e-17 && degree < 18 {
        degree += 1;
        term *= norm / degree as f64;
    }
    let id = SMatrix::<C64, D, D>::identity();
    let mut p = id;
    let mut q = SMatrix::<C64, D, D>::zeros();
    for k in (1..=degree).rev() {
        let inv = r(1.0 / k as f64);
        let nq = (a * q + b * p) * inv;
        p = id + (a * p) * inv;
        q = nq;
    }
    for _ in 0..squarings {
        let nq = p * q + q * p;
        p = p * p;
        q = nq;
    }
    (p, q)
}

/// Newton–Schulz steps toward the nearest unitary; removes the O(ε) drift
/// left by eigen-decomposition before a matrix is reused millions of times.
pub fn polish_unitary<const D: usize>(u: &SMatrix<C64, D, D>) -> SMatrix<C64, D, D> {
    let three = SMatrix::<C64, D, D>::identity() * r(3.0);
    let mut out = *u;
    for _ in 0..2 {
        out = out * (three - out.adjoint() * out) * r(0.5);
    }
    out
}

pub fn kron2(a: &M2, b: &M2) -> M4 {
    let mut out = M4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    out[(2 * i + k, 2 * j + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Embed a 4×4 block into the upper-left corner of a 5×5 matrix, with `corner` at (5,5).
pub fn embed_4x4(u4: &M4, corner: C64) -> M5 {
    let mut out = M5::zeros();
    out.fixed_view_mut::<4, 4>(0, 0).copy_from(u4);
    out[(4, 4)] = corner;
    out
}

pub fn upper_4x4(u: &M5) -> M4 {
    u.fixed_view::<4, 4>(0, 0).into_owned()
}
