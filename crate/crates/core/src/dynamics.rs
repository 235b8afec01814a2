//! Right-hand sides and time integration for the coupled control/wave system.
//!
//! The control variables obey
//!
//!   sqrt(2) dJ_m/dt      = J_{m+1} lambda_{m,m+2} - J_{m-1} lambda_{m-1,m+1}
//!   dlambda_{k,k+n}/dt   = J_{k+n} lambda_{k,k+n+1} - J_{k-1} lambda_{k-1,k+n}
//!                        - J_{k+n-1} lambda_{k,k+n-1} + J_k lambda_{k+1,k+n}
//!
//! with J_m = 0 outside 1..=N-1 and lambda_{a,b} = 0 whenever the pair is
//! outside the packed family (spacing < 2 or an index outside 1..=N). The
//! spacing-1 terms entering the lambda equation at n = 2 cancel pairwise,
//! so the zero convention is consistent; the dense commutator oracle
//! arbitrates this independently.
//!
//! The wavefunction is propagated in the real gauge psi_n = i^(n-1) phi_n,
//! where the Schroedinger equation becomes the real antisymmetric flow
//! dphi_n/dt = -J_{n-1} phi_{n-1} + J_n phi_{n+1}. For real couplings and
//! a gauge-compatible start this is exact, not an approximation; complex
//! propagation is retained as a cross-check and fallback path.

use std::f64::consts::SQRT_2;

use num_complex::Complex64;

use crate::chain::{build_generator, coupling_norm, ChainSpec, ControlState, WaveState};
use crate::error::{Error, Result};
use crate::ode::{solve_ivp, OdeOptions};

/// Flat state layout used by the integrator: [J | lambda | phi].
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub n_sites: usize,
    pub n_couplings: usize,
    pub n_multipliers: usize,
}

impl Layout {
    pub fn new(n_sites: usize) -> Self {
        Self {
            n_sites,
            n_couplings: n_sites - 1,
            n_multipliers: (n_sites - 1) * (n_sites - 2) / 2,
        }
    }

    pub fn control_dim(&self) -> usize {
        self.n_couplings + self.n_multipliers
    }

    pub fn dim(&self) -> usize {
        self.control_dim() + self.n_sites
    }

    pub fn split<'a>(&self, y: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let (j, rest) = y.split_at(self.n_couplings);
        let (lam, phi) = rest.split_at(self.n_multipliers);
        (j, lam, phi)
    }

    pub fn split_mut<'a>(&self, y: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64]) {
        let (j, rest) = y.split_at_mut(self.n_couplings);
        let (lam, phi) = rest.split_at_mut(self.n_multipliers);
        (j, lam, phi)
    }

    /// Packed ordinal of lambda_{k,k+n}; caller guarantees validity.
    #[inline]
    pub fn lam_index(&self, k: usize, n: usize) -> usize {
        (k - 1) * (self.n_sites - 1) - k * (k - 1) / 2 + (n - 2)
    }

    /// Start of row k in the packed multiplier storage.
    #[inline]
    pub fn row_offset(&self, k: usize) -> usize {
        (k - 1) * (self.n_sites - 1) - k * (k - 1) / 2
    }

}

/// Control block of the flow: writes (dJ, dlambda) into the output slices.
///
/// The multiplier loops walk the packed rows contiguously: within row k,
/// element i holds lambda_{k,k+i+2}, its n+-1 neighbors are the adjacent
/// row entries, and the spacing-(n+1) partners sit at index i+1 of row
/// k-1 and index i-1 of row k+1. The boundary gates below are exactly
/// the out-of-family zero conventions.
pub(crate) fn control_rhs_into(lay: &Layout, j: &[f64], lam: &[f64], dj: &mut [f64], dlam: &mut [f64]) {
    let n = lay.n_sites;
    let nc = lay.n_couplings;
    for m in 1..=nc {
        let ta = if m + 1 <= nc {
            j[m] * lam[lay.row_offset(m)]
        } else {
            0.0
        };
        let tb = if m >= 2 {
            j[m - 2] * lam[lay.row_offset(m - 1)]
        } else {
            0.0
        };
        dj[m - 1] = (ta - tb) / SQRT_2;
    }
    for k in 1..=n.saturating_sub(2) {
        let off_k = lay.row_offset(k);
        let len_k = n - 1 - k;
        let off_km1 = if k >= 2 { lay.row_offset(k - 1) } else { 0 };
        let off_kp1 = if len_k >= 2 { lay.row_offset(k + 1) } else { 0 };
        let jk = j[k - 1];
        let jkm1 = if k >= 2 { j[k - 2] } else { 0.0 };
        for i in 0..len_k {
            let mut acc = 0.0;
            if i + 1 < len_k {
                acc += j[k + i + 1] * lam[off_k + i + 1];
            }
            if k >= 2 {
                acc -= jkm1 * lam[off_km1 + i + 1];
            }
            if i >= 1 {
                acc -= j[k + i] * lam[off_k + i - 1];
                acc += jk * lam[off_kp1 + i - 1];
            }
            dlam[off_k + i] = acc;
        }
    }
}

/// Real-gauge wave block: dphi_n = -J_{n-1} phi_{n-1} + J_n phi_{n+1}.
pub(crate) fn wave_rhs_into(lay: &Layout, j: &[f64], phi: &[f64], dphi: &mut [f64]) {
    let n = lay.n_sites;
    for site in 0..n {
        let left = if site > 0 { -j[site - 1] * phi[site - 1] } else { 0.0 };
        let right = if site + 1 < n { j[site] * phi[site + 1] } else { 0.0 };
        dphi[site] = left + right;
    }
}

/// Full coupled flow on the flat layout.
pub(crate) fn coupled_rhs_into(lay: &Layout, y: &[f64], dy: &mut [f64]) {
    let (j, lam, phi) = lay.split(y);
    let (dj, dlam, dphi) = lay.split_mut(dy);
    control_rhs_into(lay, j, lam, dj, dlam);
    wave_rhs_into(lay, j, phi, dphi);
}

/// Time derivative (dJ, dlambda) of a control state.
pub fn qbe_rhs(control: &ControlState, spec: &ChainSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if control.couplings().len() != spec.n_couplings()
        || control.multipliers().len() != spec.n_multipliers()
    {
        return Err(Error::Shape {
            what: "control state",
            expected: spec.n_couplings() + spec.n_multipliers(),
            got: control.couplings().len() + control.multipliers().len(),
        });
    }
    let lay = Layout::new(spec.n_sites());
    let mut dj = vec![0.0; lay.n_couplings];
    let mut dlam = vec![0.0; lay.n_multipliers];
    control_rhs_into(&lay, control.couplings(), control.multipliers(), &mut dj, &mut dlam);
    Ok((dj, dlam))
}

/// Complex Schroedinger derivative dpsi_n = -i (J_{n-1} psi_{n-1} + J_n psi_{n+1}).
pub fn schrodinger_rhs(psi: &WaveState, couplings: &[f64], spec: &ChainSpec) -> Result<Vec<Complex64>> {
    if couplings.len() != spec.n_couplings() || psi.n_sites() != spec.n_sites() {
        return Err(Error::Shape {
            what: "schrodinger operands",
            expected: spec.n_sites(),
            got: psi.n_sites(),
        });
    }
    let amp = psi.amplitudes();
    let n = spec.n_sites();
    let minus_i = Complex64::new(0.0, -1.0);
    Ok((0..n)
        .map(|site| {
            let mut h_psi = Complex64::new(0.0, 0.0);
            if site > 0 {
                h_psi += couplings[site - 1] * amp[site - 1];
            }
            if site + 1 < n {
                h_psi += couplings[site] * amp[site + 1];
            }
            minus_i * h_psi
        })
        .collect())
}

/// Tolerance on the imaginary residue when mapping into the real gauge.
const GAUGE_TOL: f64 = 1e-9;

/// Map complex amplitudes to the real gauge phi_n = i^(1-n) psi_n.
///
/// Fails when any rotated amplitude has an imaginary part above tolerance,
/// which signals that the real-gauge assumption does not hold for this
/// state.
pub fn to_real_gauge(psi: &WaveState) -> Result<Vec<f64>> {
    let mut phi = Vec::with_capacity(psi.n_sites());
    for (idx, amp) in psi.amplitudes().iter().enumerate() {
        let rotated = amp * crate::chain::i_power(idx).conj();
        if rotated.im.abs() > GAUGE_TOL {
            return Err(Error::Gauge {
                site: idx + 1,
                residual: rotated.im.abs(),
            });
        }
        phi.push(rotated.re);
    }
    Ok(phi)
}

/// Inverse gauge map; see [`WaveState::from_real_gauge`].
pub fn from_real_gauge(phi: &[f64]) -> Result<WaveState> {
    WaveState::from_real_gauge(phi)
}

/// Dense output of the coupled flow.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub spec: ChainSpec,
    pub times: Vec<f64>,
    pub controls: Vec<ControlState>,
    pub waves: Vec<WaveState>,
}

impl Trajectory {
    pub fn final_wave(&self) -> &WaveState {
        self.waves.last().expect("trajectory is nonempty")
    }

    pub fn final_control(&self) -> &ControlState {
        self.controls.last().expect("trajectory is nonempty")
    }
}

/// Drift figures for the conserved quantities of the flow.
///
/// The flow conserves sum J^2 (telescoping), sum lambda^2 (via the trace
/// of the squared generator), the wave norm, and the full spectrum of
/// H + D, which evolves by conjugation.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ConservationReport {
    pub coupling_norm_drift: f64,
    pub multiplier_norm_drift: f64,
    pub wave_norm_drift: f64,
    pub spectrum_drift: f64,
}

impl ConservationReport {
    pub fn max_drift(&self) -> f64 {
        self.coupling_norm_drift
            .max(self.multiplier_norm_drift)
            .max(self.wave_norm_drift)
            .max(self.spectrum_drift)
    }
}

/// Integrate the coupled system and return a uniformly sampled trajectory.
///
/// `samples` is the number of output points (>= 2), covering [0, t_end]
/// inclusive. `tol` is the local error per unit time.
pub fn integrate(
    c0: &ControlState,
    psi0: &WaveState,
    t_end: f64,
    tol: f64,
    samples: usize,
    spec: &ChainSpec,
) -> Result<Trajectory> {
    if !(t_end > 0.0) {
        return Err(Error::Precondition(format!("t_end must be positive, got {t_end}")));
    }
    if !(1e-14..=1e-6).contains(&tol) {
        return Err(Error::Precondition(format!(
            "tol must lie in [1e-14, 1e-6], got {tol}"
        )));
    }
    let samples = samples.max(2);
    let times: Vec<f64> = (0..samples)
        .map(|i| t_end * i as f64 / (samples - 1) as f64)
        .collect();

    match to_real_gauge(psi0) {
        Ok(phi0) => integrate_real(c0, &phi0, &times, tol, spec),
        // Not gauge-compatible: fall back to propagating the complex pair.
        Err(Error::Gauge { .. }) => integrate_complex(c0, psi0, &times, tol, spec),
        Err(e) => Err(e),
    }
}

fn integrate_real(
    c0: &ControlState,
    phi0: &[f64],
    times: &[f64],
    tol: f64,
    spec: &ChainSpec,
) -> Result<Trajectory> {
    let lay = Layout::new(spec.n_sites());
    let mut y0 = Vec::with_capacity(lay.dim());
    y0.extend_from_slice(c0.couplings());
    y0.extend_from_slice(c0.multipliers());
    y0.extend_from_slice(phi0);

    let mut controls = Vec::with_capacity(times.len());
    let mut waves = Vec::with_capacity(times.len());
    let opts = OdeOptions { tol, ..Default::default() };
    solve_ivp(
        |_t, y, dy| coupled_rhs_into(&lay, y, dy),
        0.0,
        *times.last().unwrap(),
        &y0,
        &opts,
        times,
        |_, _, y| {
            let (j, lam, phi) = lay.split(y);
            controls.push(ControlState::from_flat(j, lam));
            waves.push(wave_from_phi_renormalized(phi));
        },
    )?;

    Ok(Trajectory {
        spec: *spec,
        times: times.to_vec(),
        controls,
        waves,
    })
}

/// Interpolated phi can be off unit norm by the interpolation error; the
/// WaveState constructor tolerates that, but keep the stored state exact.
fn wave_from_phi_renormalized(phi: &[f64]) -> WaveState {
    let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 && norm > 0.0 {
        let scaled: Vec<f64> = phi.iter().map(|x| x / norm).collect();
        WaveState::from_real_gauge(&scaled).expect("renormalized state")
    } else {
        WaveState::from_real_gauge(phi).expect("state within norm tolerance")
    }
}

/// Complex-propagation path: state is [J | lambda | Re psi | Im psi].
pub(crate) fn integrate_complex(
    c0: &ControlState,
    psi0: &WaveState,
    times: &[f64],
    tol: f64,
    spec: &ChainSpec,
) -> Result<Trajectory> {
    let lay = Layout::new(spec.n_sites());
    let n = spec.n_sites();
    let mut y0 = Vec::with_capacity(lay.control_dim() + 2 * n);
    y0.extend_from_slice(c0.couplings());
    y0.extend_from_slice(c0.multipliers());
    y0.extend(psi0.amplitudes().iter().map(|a| a.re));
    y0.extend(psi0.amplitudes().iter().map(|a| a.im));

    let ctrl = lay.control_dim();
    let rhs = move |_t: f64, y: &[f64], dy: &mut [f64]| {
        let (c, wave) = y.split_at(ctrl);
        let (j, lam) = c.split_at(lay.n_couplings);
        let (re, im) = wave.split_at(n);
        let (dc, dwave) = dy.split_at_mut(ctrl);
        let (dj, dlam) = dc.split_at_mut(lay.n_couplings);
        control_rhs_into(&lay, j, lam, dj, dlam);
        let (dre, dim) = dwave.split_at_mut(n);
        for site in 0..n {
            let mut h_re = 0.0;
            let mut h_im = 0.0;
            if site > 0 {
                h_re += j[site - 1] * re[site - 1];
                h_im += j[site - 1] * im[site - 1];
            }
            if site + 1 < n {
                h_re += j[site] * re[site + 1];
                h_im += j[site] * im[site + 1];
            }
            // dpsi = -i H psi
            dre[site] = h_im;
            dim[site] = -h_re;
        }
    };

    let mut controls = Vec::with_capacity(times.len());
    let mut waves = Vec::with_capacity(times.len());
    let opts = OdeOptions { tol, ..Default::default() };
    solve_ivp(
        rhs,
        0.0,
        *times.last().unwrap(),
        &y0,
        &opts,
        times,
        |_, _, y| {
            let (c, wave) = y.split_at(ctrl);
            let (j, lam) = c.split_at(lay.n_couplings);
            let (re, im) = wave.split_at(n);
            controls.push(ControlState::from_flat(j, lam));
            let amps: Vec<Complex64> = re
                .iter()
                .zip(im)
                .map(|(r, i)| Complex64::new(*r, *i))
                .collect();
            let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            let amps = amps.into_iter().map(|a| a / norm).collect();
            waves.push(WaveState::from_complex(amps).expect("normalized state"));
        },
    )?;

    Ok(Trajectory {
        spec: *spec,
        times: times.to_vec(),
        controls,
        waves,
    })
}

/// Fast final-state propagation of the coupled flow on the flat layout.
pub(crate) fn propagate_flat(y0: &[f64], n_sites: usize, t_end: f64, tol: f64) -> Result<Vec<f64>> {
    let lay = Layout::new(n_sites);
    debug_assert_eq!(y0.len(), lay.dim());
    let opts = OdeOptions { tol, ..Default::default() };
    let out = solve_ivp(
        |_t, y, dy| coupled_rhs_into(&lay, y, dy),
        0.0,
        t_end,
        y0,
        &opts,
        &[],
        |_, _, _| {},
    )?;
    Ok(out.y_end)
}

/// Compute the four drift figures over a trajectory.
pub fn conservation_report(traj: &Trajectory) -> Result<ConservationReport> {
    if traj.times.is_empty() {
        return Err(Error::Precondition("empty trajectory".into()));
    }
    let base_j = coupling_norm(traj.controls[0].couplings());
    let base_l = coupling_norm(traj.controls[0].multipliers());
    let base_spectrum = build_generator(&traj.controls[0], &traj.spec)?.spectrum();

    let mut report = ConservationReport {
        coupling_norm_drift: 0.0,
        multiplier_norm_drift: 0.0,
        wave_norm_drift: 0.0,
        spectrum_drift: 0.0,
    };
    for (control, wave) in traj.controls.iter().zip(&traj.waves) {
        let jn = coupling_norm(control.couplings());
        let ln = coupling_norm(control.multipliers());
        report.coupling_norm_drift = report.coupling_norm_drift.max(relative_dev(jn, base_j));
        report.multiplier_norm_drift = report.multiplier_norm_drift.max(relative_dev(ln, base_l));
        report.wave_norm_drift = report.wave_norm_drift.max((wave.norm_sq() - 1.0).abs());
        let spectrum = build_generator(control, &traj.spec)?.spectrum();
        let dev = spectrum
            .iter()
            .zip(&base_spectrum)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        report.spectrum_drift = report.spectrum_drift.max(dev);
    }
    Ok(report)
}

fn relative_dev(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        value.abs()
    } else {
        (value - base).abs() / base.abs()
    }
}
