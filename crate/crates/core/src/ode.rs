//! Dormand–Prince 5(4) integrator with exact output points and a stop predicate.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-10, h_init: 1e-4, max_steps: 2_000_000 }
    }
}

#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    /// Where the stop predicate fired, if it did.
    pub stopped_at: Option<f64>,
    pub steps: usize,
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

fn step<F: Fn(f64, &[f64], &mut [f64])>(f: &F, t: f64, y: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    for s in 0..7 {
        for i in 0..n {
            tmp[i] = y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
        }
        f(t + C[s] * h, &tmp, &mut k[s]);
    }
    let y5: Vec<f64> = (0..n).map(|i| y[i] + h * (0..7).map(|s| B5[s] * k[s][i]).sum::<f64>()).collect();
    let e: Vec<f64> = (0..n).map(|i| h * (0..7).map(|s| (B5[s] - B4[s]) * k[s][i]).sum::<f64>()).collect();
    (y5, e)
}

/// Integrates y' = f(t, y) from t0 through the monotone output points `outputs`.
pub fn solve<F, S>(f: F, t0: f64, y0: &[f64], outputs: &[f64], opts: OdeOptions, stop: S) -> Result<OdeSolution>
where
    F: Fn(f64, &[f64], &mut [f64]),
    S: Fn(&[f64]) -> bool,
{
    let mut sol = OdeSolution { t: Vec::new(), y: Vec::new(), stopped_at: None, steps: 0 };
    if outputs.is_empty() {
        return Ok(sol);
    }
    let dir = if outputs[outputs.len() - 1] >= t0 { 1.0 } else { -1.0 };
    if outputs.windows(2).any(|w| (w[1] - w[0]) * dir < 0.0) || (outputs[0] - t0) * dir < 0.0 {
        return Err(Error::Integration("output points must be monotone away from t0".into()));
    }
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h = opts.h_init.abs() * dir;
    for &target in outputs {
        while (target - t) * dir > 0.0 {
            if sol.steps >= opts.max_steps {
                return Err(Error::Integration(format!("step limit reached at t = {t}")));
            }
            let last = (t + h - target) * dir >= 0.0;
            let hh = if last { target - t } else { h };
            let (ynew, err) = step(&f, t, &y, hh);
            sol.steps += 1;
            let en = (err
                .iter()
                .zip(y.iter().zip(&ynew))
                .map(|(e, (a, b))| {
                    let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
                    (e / sc).powi(2)
                })
                .sum::<f64>()
                / y.len() as f64)
                .sqrt();
            let finite = ynew.iter().all(|v| v.is_finite()) && en.is_finite();
            if finite && en <= 1.0 && !stop(&ynew) {
                t = if last { target } else { t + hh };
                y = ynew;
                let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
                if !last {
                    h = hh * fac;
                }
                continue;
            }
            if finite && en <= 1.0 {
                // stop predicate fired inside this step: shrink until the step is negligible
                if hh.abs() <= 1e-14 * t.abs().max(1.0) {
                    sol.stopped_at = Some(t + hh);
                    return Ok(sol);
                }
                h = 0.5 * hh;
                continue;
            }
            let fac = if finite { (0.9 * en.powf(-0.2)).clamp(0.1, 0.5) } else { 0.25 };
            h = hh * fac;
            if h.abs() <= 1e-15 * t.abs().max(1.0) {
                sol.stopped_at = Some(t);
                return Ok(sol);
            }
        }
        sol.t.push(target);
        sol.y.push(y.clone());
    }
    Ok(sol)
}
