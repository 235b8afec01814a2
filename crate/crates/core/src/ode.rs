//! Adaptive Dormand-Prince 5(4) integration with PI step control.
//!
//! The error controller works per unit time: a step of size h is accepted
//! when the embedded error estimate satisfies err <= tol * |h|, so the
//! accumulated drift over an interval of length T stays near tol * T.
//! Dense output is produced by a single fifth-order sub-step from the
//! enclosing accepted step, so sample accuracy matches node accuracy.

use crate::error::{Error, Result};

const STAGES: usize = 7;

// Dormand-Prince 5(4) tableau; the last row of A equals the fifth-order
// weights, so the seventh stage is the derivative at the accepted point
// (FSAL).
const A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

const C: [f64; STAGES] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

// Fifth-order solution weights.
const B_HIGH: [f64; STAGES] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];

// Embedded fourth-order weights for error estimation.
const B_LOW: [f64; STAGES] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    /// Local error per unit time.
    pub tol: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_steps: 50_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OdeOutcome {
    pub y_end: Vec<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Integrate dy/dt = rhs(t, y) from t0 to t1 (either direction).
///
/// `sample_times` must be sorted in integration direction and lie within
/// [t0, t1]; `on_sample(i, t, y)` fires once per entry, computed by a
/// single sixth-order sub-step from the enclosing accepted step, so
/// sample accuracy matches node accuracy. Pass an empty slice to skip
/// sampling.
pub fn solve_ivp<F, S>(
    mut rhs: F,
    t0: f64,
    t1: f64,
    y0: &[f64],
    opts: &OdeOptions,
    sample_times: &[f64],
    mut on_sample: S,
) -> Result<OdeOutcome>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    S: FnMut(usize, f64, &[f64]),
{
    let dim = y0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    if span == 0.0 {
        for (i, &ts) in sample_times.iter().enumerate() {
            on_sample(i, ts, y0);
        }
        return Ok(OdeOutcome {
            y_end: y0.to_vec(),
            accepted_steps: 0,
            rejected_steps: 0,
        });
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f = vec![0.0; dim];
    rhs(t, &y, &mut f);

    // Initial step from the magnitude of the derivative; the controller
    // adapts within a few steps either way.
    let f_scale = rms_scaled(&f, &y, &y);
    let mut h = dir * (0.01 / f_scale.max(1e-4)).min(span);

    let mut k = vec![vec![0.0; dim]; STAGES];
    let mut y_stage = vec![0.0; dim];
    let mut y_new = vec![0.0; dim];
    let mut err_vec = vec![0.0; dim];

    let mut sample_idx = 0usize;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut err_old: f64 = 1e-4;
    const SAFETY: f64 = 0.9;
    const BETA: f64 = 0.05;
    // The embedded estimate scales as h^5, so error per unit time ~ h^4.
    const EXPO: f64 = 0.25 - BETA * 0.75;

    while (t1 - t) * dir > 1e-14 * span.max(1.0) {
        if accepted + rejected > opts.max_steps {
            return Err(Error::Stiffness { t, h });
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Stiffness { t, h });
        }
        // Do not step past the end point.
        if (t + h - t1) * dir > 0.0 {
            h = t1 - t;
        }

        k[0].copy_from_slice(&f);
        for stage in 1..STAGES {
            let row = &A[stage - 1];
            for i in 0..dim {
                let mut acc = 0.0;
                for (j, kj) in k.iter().enumerate().take(stage) {
                    let a = row[j];
                    if a != 0.0 {
                        acc += a * kj[i];
                    }
                }
                y_stage[i] = y[i] + h * acc;
            }
            let (head, tail) = k.split_at_mut(stage);
            let _ = head;
            rhs(t + C[stage] * h, &y_stage, &mut tail[0]);
        }

        // The last stage was evaluated at the fifth-order solution point.
        y_new.copy_from_slice(&y_stage);
        let mut floor_acc = 0.0f64;
        for i in 0..dim {
            let mut acce = 0.0;
            let mut mag = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let w = B_HIGH[j] - B_LOW[j];
                if w != 0.0 {
                    acce += w * kj[i];
                    mag += w.abs() * kj[i].abs();
                }
            }
            err_vec[i] = h * acce;
            let sc = 1.0 + y[i].abs().max(y_new[i].abs());
            floor_acc += (mag / sc) * (mag / sc);
        }

        if y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { t });
        }

        let err_norm = rms_scaled(&err_vec, &y, &y_new);
        let err = err_norm / (opts.tol * h.abs());
        // The pair carries large internal weights, so once the estimate
        // falls to a few ulps of the weighted stage magnitudes it is
        // roundoff, not truncation; treating it as truncation would pin
        // the step size near the noise floor.
        let noise_floor = 8.0 * f64::EPSILON * h.abs() * (floor_acc / dim as f64).sqrt();
        let noise_dominated = err_norm <= noise_floor;

        if err <= 1.0 || noise_dominated {
            // Accepted; k[8] is rhs(t+h, y_new) by the FSAL property.
            let t_new = t + h;
            while sample_idx < sample_times.len()
                && (sample_times[sample_idx] - t_new) * dir <= 1e-14 * span.max(1.0)
            {
                let ts = sample_times[sample_idx];
                if (ts - t_new).abs() <= 1e-14 * span.max(1.0) {
                    on_sample(sample_idx, ts, &y_new);
                } else if (ts - t).abs() <= 1e-14 * span.max(1.0) {
                    on_sample(sample_idx, ts, &y);
                } else {
                    let interp = sub_step(&mut rhs, t, &y, &k[0], ts - t, &mut y_stage);
                    on_sample(sample_idx, ts, &interp);
                }
                sample_idx += 1;
            }
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            f.copy_from_slice(&k[STAGES - 1]);
            accepted += 1;

            if noise_dominated && err > 1.0 {
                // Climb back toward the truncation-controlled regime.
                h *= 2.0;
                err_old = 1e-4;
            } else {
                let fac = (err.max(1e-16)).powf(EXPO) / err_old.powf(BETA);
                let scale = (SAFETY / fac).clamp(0.2, 6.0);
                h *= scale;
                err_old = err.max(1e-4);
            }
        } else {
            rejected += 1;
            let scale = (SAFETY * err.powf(-0.25)).clamp(0.2, 1.0);
            h *= scale;
        }
    }

    // Flush samples that coincide with the end point.
    while sample_idx < sample_times.len() {
        on_sample(sample_idx, sample_times[sample_idx], &y);
        sample_idx += 1;
    }

    Ok(OdeOutcome {
        y_end: y,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

/// RMS of e_i / (1 + max(|a_i|, |b_i|)).
fn rms_scaled(e: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let n = e.len() as f64;
    let sum: f64 = e
        .iter()
        .zip(a.iter().zip(b.iter()))
        .map(|(ei, (ai, bi))| {
            let sc = 1.0 + ai.abs().max(bi.abs());
            (ei / sc) * (ei / sc)
        })
        .sum();
    (sum / n).sqrt()
}

/// One fifth-order step of size h from (t, y) with f0 = rhs(t, y) known;
/// used for dense output inside accepted steps.
fn sub_step<F>(rhs: &mut F, t: f64, y: &[f64], f0: &[f64], h: f64, scratch: &mut [f64]) -> Vec<f64>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y.len();
    let mut k = vec![vec![0.0; dim]; STAGES - 1];
    k[0].copy_from_slice(f0);
    for stage in 1..STAGES - 1 {
        let row = &A[stage - 1];
        for i in 0..dim {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate().take(stage) {
                let a = row[j];
                if a != 0.0 {
                    acc += a * kj[i];
                }
            }
            scratch[i] = y[i] + h * acc;
        }
        let (head, tail) = k.split_at_mut(stage);
        let _ = head;
        rhs(t + C[stage] * h, scratch, &mut tail[0]);
    }
    (0..dim)
        .map(|i| {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                let w = B_HIGH[j];
                if w != 0.0 {
                    acc += w * kj[i];
                }
            }
            y[i] + h * acc
        })
        .collect()
}
