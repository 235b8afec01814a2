//! Problem-instance types and assembly of the chain generator matrices.
//!
//! The single-excitation sector of an N-site chain is an N-dimensional
//! Hilbert space. The nearest-neighbor Hamiltonian is the real symmetric
//! tridiagonal matrix H with H[m, m+1] = H[m+1, m] = J_m, and the full
//! generator H + D carries the Lagrange-multiplier matrix D on the bands
//! with |row - col| >= 2:
//!
//!   (H + D)[k+n, k] = lambda_{k,k+n} * i^(n-1) / sqrt(2),   n >= 2,
//!
//! with the conjugate entry above the diagonal. Sites are labelled 1..N
//! throughout, matching the physics convention; storage is 0-based.

use std::f64::consts::SQRT_2;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Problem instance: chain length N and coupling budget J0.
///
/// The budget constrains the couplings as sum_m J_m^2 = J0^2 at every
/// instant along an optimal trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    n_sites: usize,
    j0: f64,
}

impl ChainSpec {
    pub fn new(n_sites: usize, j0: f64) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 sites, got {n_sites}"
            )));
        }
        if !(j0 > 0.0) || !j0.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "coupling budget must be positive and finite, got {j0}"
            )));
        }
        Ok(Self { n_sites, j0 })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn j0(&self) -> f64 {
        self.j0
    }

    /// Number of couplings J_1..J_{N-1}.
    pub fn n_couplings(&self) -> usize {
        self.n_sites - 1
    }

    /// Number of Lagrange multipliers lambda_{k,k+n}: (N-1)(N-2)/2.
    pub fn n_multipliers(&self) -> usize {
        (self.n_sites - 1) * (self.n_sites - 2) / 2
    }
}

/// Packed ordinal of the multiplier lambda_{k,k+n}.
///
/// Canonical order is row-major: k ascending, then spacing n ascending
/// within each k. Valid domain: 1 <= k <= N-1 and 2 <= n <= N-k.
pub fn multiplier_index(k: usize, n: usize, spec: &ChainSpec) -> Result<usize> {
    let n_sites = spec.n_sites();
    if k < 1 || n < 2 || k + n > n_sites {
        return Err(Error::IndexDomain { k, n, n_sites });
    }
    // Rows before k hold (N-1-j) entries each for j = 1..k-1.
    let offset = (k - 1) * (n_sites - 1) - k * (k - 1) / 2;
    Ok(offset + (n - 2))
}

/// Inverse of [`multiplier_index`]: packed ordinal -> (k, n).
pub fn multiplier_unindex(ordinal: usize, spec: &ChainSpec) -> Result<(usize, usize)> {
    let n_sites = spec.n_sites();
    let mut remaining = ordinal;
    for k in 1..n_sites {
        let row_len = n_sites - 1 - k;
        if remaining < row_len {
            return Ok((k, remaining + 2));
        }
        remaining -= row_len;
    }
    Err(Error::IndexDomain {
        k: 0,
        n: ordinal,
        n_sites,
    })
}

/// Dynamical control variables: couplings J_m and multipliers lambda_{k,k+n}.
///
/// Couplings may pass through zero and change sign during the evolution;
/// only the lengths and finiteness are constrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    couplings: Vec<f64>,
    multipliers: Vec<f64>,
}

impl ControlState {
    pub fn new(couplings: Vec<f64>, multipliers: Vec<f64>, spec: &ChainSpec) -> Result<Self> {
        if couplings.len() != spec.n_couplings() {
            return Err(Error::Shape {
                what: "couplings",
                expected: spec.n_couplings(),
                got: couplings.len(),
            });
        }
        if multipliers.len() != spec.n_multipliers() {
            return Err(Error::Shape {
                what: "multipliers",
                expected: spec.n_multipliers(),
                got: multipliers.len(),
            });
        }
        if let Some(bad) = couplings
            .iter()
            .chain(multipliers.iter())
            .find(|x| !x.is_finite())
        {
            return Err(Error::Precondition(format!(
                "non-finite control entry {bad}"
            )));
        }
        Ok(Self {
            couplings,
            multipliers,
        })
    }

    pub fn zeros(spec: &ChainSpec) -> Self {
        Self {
            couplings: vec![0.0; spec.n_couplings()],
            multipliers: vec![0.0; spec.n_multipliers()],
        }
    }

    pub fn couplings(&self) -> &[f64] {
        &self.couplings
    }

    pub fn multipliers(&self) -> &[f64] {
        &self.multipliers
    }

    /// Coupling J_m with the convention J_m = 0 for m outside 1..=N-1.
    pub fn coupling(&self, m: isize) -> f64 {
        if m >= 1 && (m as usize) <= self.couplings.len() {
            self.couplings[m as usize - 1]
        } else {
            0.0
        }
    }

    /// Multiplier lambda_{a,b} with the convention that entries outside
    /// the packed family (b - a < 2 or indices outside 1..=N) vanish.
    pub fn multiplier(&self, a: isize, b: isize, spec: &ChainSpec) -> f64 {
        let n_sites = spec.n_sites() as isize;
        if a < 1 || b > n_sites || b - a < 2 {
            return 0.0;
        }
        let (k, n) = (a as usize, (b - a) as usize);
        match multiplier_index(k, n, spec) {
            Ok(idx) => self.multipliers[idx],
            Err(_) => 0.0,
        }
    }

    pub fn set_multiplier(&mut self, k: usize, n: usize, value: f64, spec: &ChainSpec) -> Result<()> {
        let idx = multiplier_index(k, n, spec)?;
        self.multipliers[idx] = value;
        Ok(())
    }

    pub(crate) fn from_flat(couplings: &[f64], multipliers: &[f64]) -> Self {
        Self {
            couplings: couplings.to_vec(),
            multipliers: multipliers.to_vec(),
        }
    }
}

/// Single-excitation amplitudes psi_n, optionally carrying the real-gauge
/// image phi_n with psi_n = i^(n-1) phi_n.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    amplitudes: Vec<Complex64>,
    gauge_amplitudes: Option<Vec<f64>>,
}

impl WaveState {
    /// Tolerance on the norm at construction; integration keeps states far
    /// tighter than this.
    const NORM_TOL: f64 = 1e-6;

    pub fn from_complex(amplitudes: Vec<Complex64>) -> Result<Self> {
        let norm_sq: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm_sq - 1.0).abs() > Self::NORM_TOL {
            return Err(Error::Precondition(format!(
                "wave state norm^2 = {norm_sq} is not 1"
            )));
        }
        Ok(Self {
            amplitudes,
            gauge_amplitudes: None,
        })
    }

    /// Build from real-gauge amplitudes phi via psi_n = i^(n-1) phi_n.
    pub fn from_real_gauge(phi: &[f64]) -> Result<Self> {
        let norm_sq: f64 = phi.iter().map(|x| x * x).sum();
        if (norm_sq - 1.0).abs() > Self::NORM_TOL {
            return Err(Error::Precondition(format!(
                "wave state norm^2 = {norm_sq} is not 1"
            )));
        }
        let amplitudes = phi
            .iter()
            .enumerate()
            .map(|(idx, &x)| i_power(idx) * x)
            .collect();
        Ok(Self {
            amplitudes,
            gauge_amplitudes: Some(phi.to_vec()),
        })
    }

    /// The excitation localized on `site` (1-based).
    pub fn site_basis(n_sites: usize, site: usize) -> Self {
        let mut phi = vec![0.0; n_sites];
        phi[site - 1] = 1.0;
        Self::from_real_gauge(&phi).expect("basis state is normalized")
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn gauge_amplitudes(&self) -> Option<&[f64]> {
        self.gauge_amplitudes.as_deref()
    }

    pub fn n_sites(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    /// Site occupation probability |psi_n|^2 (1-based site index).
    pub fn probability(&self, site: usize) -> f64 {
        self.amplitudes[site - 1].norm_sqr()
    }

    /// Position expectation sum_n n |psi_n|^2, in 1-based site units.
    pub fn position_expectation(&self) -> f64 {
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(idx, a)| (idx + 1) as f64 * a.norm_sqr())
            .sum()
    }
}

/// i^(idx) for a 0-based site offset (idx = n - 1).
pub(crate) fn i_power(idx: usize) -> Complex64 {
    match idx % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// N x N Hermitian traceless generator, either H alone or H + D.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorMatrix {
    mat: DMatrix<Complex64>,
}

impl GeneratorMatrix {
    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.mat
    }

    pub fn n_sites(&self) -> usize {
        self.mat.nrows()
    }

    /// Max absolute deviation from Hermiticity; zero by construction here.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.mat.nrows();
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let d = (self.mat[(r, c)] - self.mat[(c, r)].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.mat.nrows()).map(|i| self.mat[(i, i)]).sum()
    }

    /// Sorted real eigenvalues (ascending).
    pub fn spectrum(&self) -> Vec<f64> {
        let eig = self.mat.clone().symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals
    }
}

/// The bare chain Hamiltonian: real symmetric tridiagonal with zero
/// diagonal and entry (m, m+1) = J_m.
pub fn build_hamiltonian(couplings: &[f64], spec: &ChainSpec) -> Result<GeneratorMatrix> {
    if couplings.len() != spec.n_couplings() {
        return Err(Error::Shape {
            what: "couplings",
            expected: spec.n_couplings(),
            got: couplings.len(),
        });
    }
    let n = spec.n_sites();
    let mut mat = DMatrix::<Complex64>::zeros(n, n);
    for (m, &j) in couplings.iter().enumerate() {
        mat[(m, m + 1)] = Complex64::new(j, 0.0);
        mat[(m + 1, m)] = Complex64::new(j, 0.0);
    }
    Ok(GeneratorMatrix { mat })
}

/// The full generator H + D.
///
/// Bands at spacing n >= 2 hold lambda_{k,k+n} * i^(n-1) / sqrt(2) below
/// the diagonal (row k+n, col k) and the conjugate above; the spacing-1
/// band holds the couplings; the diagonal is zero, so the matrix is
/// traceless.
pub fn build_generator(control: &ControlState, spec: &ChainSpec) -> Result<GeneratorMatrix> {
    if control.couplings().len() != spec.n_couplings()
        || control.multipliers().len() != spec.n_multipliers()
    {
        return Err(Error::Shape {
            what: "control state",
            expected: spec.n_couplings() + spec.n_multipliers(),
            got: control.couplings().len() + control.multipliers().len(),
        });
    }
    let n = spec.n_sites();
    let mut gen = build_hamiltonian(control.couplings(), spec)?;
    for k in 1..n {
        for sp in 2..=(n - k) {
            let lam = control.multipliers()[multiplier_index(k, sp, spec)?];
            let phase = i_power(sp - 1) / SQRT_2;
            let below = phase * lam;
            gen.mat[(k + sp - 1, k - 1)] = below;
            gen.mat[(k - 1, k + sp - 1)] = below.conj();
        }
    }
    Ok(gen)
}

/// The coupling budget functional sum_m J_m^2.
pub fn coupling_norm(couplings: &[f64]) -> f64 {
    couplings.iter().map(|j| j * j).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(n: usize) -> ChainSpec {
        ChainSpec::new(n, 1.0).unwrap()
    }

    #[test]
    fn spec_rejects_bad_instances() {
        assert!(ChainSpec::new(1, 1.0).is_err());
        assert!(ChainSpec::new(3, 0.0).is_err());
        assert!(ChainSpec::new(3, -1.0).is_err());
        assert!(ChainSpec::new(3, f64::NAN).is_err());
    }

    #[test]
    fn multiplier_index_canonical_order() {
        let s = spec(5);
        // (1,2),(1,3),(1,4),(2,2),(2,3),(3,2)
        assert_eq!(multiplier_index(1, 2, &s).unwrap(), 0);
        assert_eq!(multiplier_index(3, 2, &s).unwrap(), 5);
        assert_eq!(s.n_multipliers(), 6);
    }

    #[test]
    fn multiplier_index_rejects_out_of_domain() {
        let s = spec(5);
        assert!(multiplier_index(0, 2, &s).is_err());
        assert!(multiplier_index(1, 1, &s).is_err());
        assert!(multiplier_index(4, 2, &s).is_err());
        assert!(multiplier_index(1, 5, &s).is_err());
    }

    #[test]
    fn multiplier_index_is_a_bijection() {
        for n_sites in 2..=40 {
            let s = spec(n_sites);
            let mut seen = vec![false; s.n_multipliers()];
            for k in 1..n_sites {
                for sp in 2..=(n_sites - k) {
                    let idx = multiplier_index(k, sp, &s).unwrap();
                    assert!(!seen[idx], "duplicate ordinal {idx} for N={n_sites}");
                    seen[idx] = true;
                    assert_eq!(multiplier_unindex(idx, &s).unwrap(), (k, sp));
                }
            }
            assert!(seen.iter().all(|&x| x), "ordinals not covered for N={n_sites}");
        }
    }

    #[test]
    fn hamiltonian_single_bond() {
        let s = spec(3);
        let h = build_hamiltonian(&[1.0, 0.0], &s).unwrap();
        let expect = [
            [0.0, 1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
        ];
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(h.matrix()[(r, c)], Complex64::new(expect[r][c], 0.0));
            }
        }
    }

    #[test]
    fn hamiltonian_frobenius_norm_is_twice_coupling_norm() {
        let s = spec(3);
        let h = build_hamiltonian(&[0.6, 0.8], &s).unwrap();
        let frob: f64 = h.matrix().iter().map(|z| z.norm_sqr()).sum();
        assert_relative_eq!(frob, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn hamiltonian_two_level() {
        let s = ChainSpec::new(2, 0.7).unwrap();
        let h = build_hamiltonian(&[0.7], &s).unwrap();
        assert_eq!(h.matrix()[(0, 1)], Complex64::new(0.7, 0.0));
        assert_eq!(h.matrix()[(1, 0)], Complex64::new(0.7, 0.0));
        assert_eq!(h.matrix()[(0, 0)], Complex64::new(0.0, 0.0));
    }

    #[test]
    fn hamiltonian_rejects_wrong_length() {
        let s = spec(3);
        assert!(build_hamiltonian(&[1.0], &s).is_err());
    }

    #[test]
    fn generator_places_multiplier_phases() {
        let s = spec(3);
        let lam = -0.816497;
        let mut c = ControlState::new(vec![1.0, 0.0], vec![0.0], &s).unwrap();
        c.set_multiplier(1, 2, lam, &s).unwrap();
        let g = build_generator(&c, &s).unwrap();
        // Entry (3,1) = lambda * i / sqrt(2); (1,3) is its conjugate.
        let below = g.matrix()[(2, 0)];
        assert_relative_eq!(below.re, 0.0, epsilon = 1e-15);
        assert_relative_eq!(below.im, lam / SQRT_2, epsilon = 1e-15);
        assert_eq!(g.matrix()[(0, 2)], below.conj());
        assert_eq!(g.matrix()[(0, 1)], Complex64::new(1.0, 0.0));
        assert_eq!(g.matrix()[(1, 0)], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn generator_zero_controls_is_zero() {
        let s = spec(4);
        let g = build_generator(&ControlState::zeros(&s), &s).unwrap();
        assert!(g.matrix().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn hamiltonian_equals_generator_band() {
        let s = spec(5);
        let j = [0.3, -0.2, 0.9, 0.1];
        let c = ControlState::new(j.to_vec(), vec![0.0; s.n_multipliers()], &s).unwrap();
        let g = build_generator(&c, &s).unwrap();
        let h = build_hamiltonian(&j, &s).unwrap();
        assert_eq!(g.matrix(), h.matrix());
    }

    #[test]
    fn coupling_norm_examples() {
        assert_relative_eq!(coupling_norm(&[0.6, 0.8]), 1.0, epsilon = 1e-15);
        assert_relative_eq!(coupling_norm(&[0.7, 0.0, 0.0]), 0.49, epsilon = 1e-15);
        // Perfect-transfer profile for N=3, gamma=1: J_m = sqrt(m(N-m))/2.
        let j = [f64::sqrt(2.0) / 2.0, f64::sqrt(2.0) / 2.0];
        assert_relative_eq!(coupling_norm(&j), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gauge_powers_cycle() {
        assert_eq!(i_power(0), Complex64::new(1.0, 0.0));
        assert_eq!(i_power(3), Complex64::new(0.0, -1.0));
        assert_eq!(i_power(4), Complex64::new(1.0, 0.0));
    }

    proptest! {
        #[test]
        fn generator_is_hermitian_and_traceless(
            n_sites in 2usize..9,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let s = spec(n_sites);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let couplings: Vec<f64> = (0..s.n_couplings()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let multipliers: Vec<f64> = (0..s.n_multipliers()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c = ControlState::new(couplings, multipliers, &s).unwrap();
            let g = build_generator(&c, &s).unwrap();
            prop_assert_eq!(g.hermiticity_defect(), 0.0);
            prop_assert_eq!(g.trace(), Complex64::new(0.0, 0.0));
        }
    }
}
