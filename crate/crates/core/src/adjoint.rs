//! Adjoint (costate) propagation through the coupled control/wave flow.
//!
//! The infidelity at the scaled terminal time is g(y(1)) with
//! g = sum_{k<N} phi_k^2. Its gradient with respect to the shooting
//! unknowns follows from the costate a(t) solving
//!
//!   da/dt = -(dF/dy)^T a,   a(1) = grad g(y(1)),
//!
//! integrated backward alongside the state itself; the gradient is the
//! restriction of a(0) to the J_1 and lambda_{1,q} slots. The
//! vector-Jacobian product below is written term by term from the flow
//! equations: every bilinear term c * u * v in dF contributes
//! a * c * v to the u-slot and a * c * u to the v-slot, with reads and
//! writes outside the variable family dropping out exactly as the
//! corresponding terms vanish.

use crate::dynamics::{coupled_rhs_into, Layout};
use crate::error::Result;
use crate::ode::{solve_ivp, OdeOptions};

/// out = (dF/dy)^T a for the coupled flow at state y.
///
/// Mirrors the row-structured gates of the forward flow: every product
/// term scatters into both of its operand slots under the same boundary
/// conditions that make the term exist at all.
pub(crate) fn coupled_vjp(lay: &Layout, y: &[f64], a: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (j, lam, phi) = lay.split(y);
    let (aj, alam, aphi) = lay.split(a);

    let n = lay.n_sites;
    let nc = lay.n_couplings;
    let sqrt2 = std::f64::consts::SQRT_2;

    let (oj, rest) = out.split_at_mut(nc);
    let (olam, ophi) = rest.split_at_mut(lay.n_multipliers);

    // Rows dJ_m = (J_{m+1} lam_{m,m+2} - J_{m-1} lam_{m-1,m+1}) / sqrt2.
    for m in 1..=nc {
        let am = aj[m - 1] / sqrt2;
        if m + 1 <= nc {
            let off = lay.row_offset(m);
            oj[m] += am * lam[off];
            olam[off] += am * j[m];
        }
        if m >= 2 {
            let off = lay.row_offset(m - 1);
            oj[m - 2] -= am * lam[off];
            olam[off] -= am * j[m - 2];
        }
    }

    // Rows dlam_{k,k+i+2}.
    for k in 1..=n.saturating_sub(2) {
        let off_k = lay.row_offset(k);
        let len_k = n - 1 - k;
        let off_km1 = if k >= 2 { lay.row_offset(k - 1) } else { 0 };
        let off_kp1 = if len_k >= 2 { lay.row_offset(k + 1) } else { 0 };
        for i in 0..len_k {
            let al = alam[off_k + i];
            if i + 1 < len_k {
                oj[k + i + 1] += al * lam[off_k + i + 1];
                olam[off_k + i + 1] += al * j[k + i + 1];
            }
            if k >= 2 {
                oj[k - 2] -= al * lam[off_km1 + i + 1];
                olam[off_km1 + i + 1] -= al * j[k - 2];
            }
            if i >= 1 {
                oj[k + i] -= al * lam[off_k + i - 1];
                olam[off_k + i - 1] -= al * j[k + i];
                oj[k - 1] += al * lam[off_kp1 + i - 1];
                olam[off_kp1 + i - 1] += al * j[k - 1];
            }
        }
    }

    // Rows dphi_s = -J_{s-1} phi_{s-1} + J_s phi_{s+1} (0-based below).
    for s in 0..n {
        let ap = aphi[s];
        if s >= 1 {
            ophi[s - 1] -= ap * j[s - 1];
            oj[s - 1] -= ap * phi[s - 1];
        }
        if s + 1 < n {
            ophi[s + 1] += ap * j[s];
            oj[s] += ap * phi[s + 1];
        }
    }
}

/// Terminal infidelity sum_{k<N} phi_k(1)^2 and its gradient with respect
/// to the initial state slots, via one forward and one backward pass.
///
/// Returns (infidelity, gradient over the full initial flat state).
pub(crate) fn infidelity_and_state_gradient(
    y0: &[f64],
    n_sites: usize,
    tol: f64,
) -> Result<(f64, Vec<f64>)> {
    let lay = Layout::new(n_sites);
    let dim = lay.dim();
    debug_assert_eq!(y0.len(), dim);
    let opts = OdeOptions { tol, ..Default::default() };

    let forward = solve_ivp(
        |_t, y, dy| coupled_rhs_into(&lay, y, dy),
        0.0,
        1.0,
        y0,
        &opts,
        &[],
        |_, _, _| {},
    )?;
    let y1 = forward.y_end;
    let (_, _, phi1) = lay.split(&y1);
    let infidelity: f64 = phi1[..n_sites - 1].iter().map(|p| p * p).sum();

    // Augmented state [y | a], integrated backward from t = 1.
    let mut z1 = Vec::with_capacity(2 * dim);
    z1.extend_from_slice(&y1);
    z1.extend(std::iter::repeat(0.0).take(dim));
    {
        let a_phi = &mut z1[dim + lay.control_dim()..];
        for k in 0..n_sites - 1 {
            a_phi[k] = 2.0 * phi1[k];
        }
    }

    let mut vjp_buf = vec![0.0; dim];
    let backward = solve_ivp(
        move |_t, z, dz| {
            let (y, a) = z.split_at(dim);
            let (dy, da) = dz.split_at_mut(dim);
            coupled_rhs_into(&lay, y, dy);
            coupled_vjp(&lay, y, a, &mut vjp_buf);
            da.iter_mut().zip(&vjp_buf).for_each(|(o, v)| *o = -v);
        },
        1.0,
        0.0,
        &z1,
        &opts,
        &[],
        |_, _, _| {},
    )?;
    let grad = backward.y_end[dim..].to_vec();
    Ok((infidelity, grad))
}
