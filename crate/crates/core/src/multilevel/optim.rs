use std::cell::Cell;

use crate::error::{MetaError, Result};
use crate::metareg::golden_section;

pub(crate) const TOL: f64 = 1e-8;
pub(crate) const BUDGET: usize = 1000;
const PRESCAN: usize = 15;
const ROUNDS: usize = 2;

pub(crate) struct Optimum {
    pub theta: [f64; 2],
    pub evaluations: usize,
    pub converged: bool,
}

/// Maximizes `f(omega2, tau2)` over `[0, upper]^2` with the coordinates in
/// `free` searched and the others held at zero: a coarse grid, coordinate-wise
/// golden-section refinement, then a Nelder-Mead polish on `log1p(theta)`.
pub(crate) fn maximize<F>(f: F, upper: f64, free: [bool; 2]) -> Result<Optimum>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    let evals = Cell::new(0usize);
    let g = |t: [f64; 2]| -> Result<f64> {
        evals.set(evals.get() + 1);
        let v = f(t[0], t[1])?;
        Ok(if v.is_finite() { v } else { f64::NEG_INFINITY })
    };
    let dims: Vec<usize> = (0..2).filter(|&i| free[i]).collect();
    if dims.is_empty() || !(upper > 0.0) {
        g([0.0, 0.0])?;
        return Ok(Optimum { theta: [0.0, 0.0], evaluations: evals.get(), converged: true });
    }

    let grid: Vec<f64> = (0..=PRESCAN).map(|i| upper * (i as f64 / PRESCAN as f64).powi(2)).collect();
    let mut best = ([0.0, 0.0], f64::NEG_INFINITY, [0usize; 2]);
    let first = &grid[..];
    let second: &[f64] = if dims.len() == 2 { &grid[..] } else { &grid[..1] };
    for (i, &a) in first.iter().enumerate() {
        for (j, &b) in second.iter().enumerate() {
            let mut t = [0.0, 0.0];
            t[dims[0]] = a;
            if dims.len() == 2 {
                t[dims[1]] = b;
            }
            let v = g(t)?;
            if v > best.1 {
                let mut cell = [0, 0];
                cell[dims[0]] = i;
                if dims.len() == 2 {
                    cell[dims[1]] = j;
                }
                best = (t, v, cell);
            }
        }
    }
    if !best.1.is_finite() {
        return Err(MetaError::NonConvergence { evaluations: evals.get() });
    }
    let (mut theta, mut value, cell) = best;

    for _ in 0..ROUNDS {
        for &d in &dims {
            let lo = grid[cell[d].saturating_sub(1)];
            let hi = grid[(cell[d] + 1).min(PRESCAN)];
            let line = |x: f64| {
                let mut t = theta;
                t[d] = x;
                g(t)
            };
            let m = golden_section(line, lo, hi, TOL, 200)?;
            if m.value > value {
                theta[d] = m.arg;
                value = m.value;
            }
            // endpoints of the bracket, the boundary in particular
            for x in [lo, hi] {
                let mut t = theta;
                t[d] = x;
                let v = g(t)?;
                if v > value {
                    theta = t;
                    value = v;
                }
            }
        }
    }

    let to_theta = |u: &[f64]| -> [f64; 2] {
        let mut t = [0.0, 0.0];
        for (n, &d) in dims.iter().enumerate() {
            t[d] = u[n].max(0.0).exp_m1();
        }
        t
    };
    let start: Vec<f64> = dims.iter().map(|&d| theta[d].ln_1p()).collect();
    let remaining = BUDGET.saturating_sub(evals.get());
    let nm = nelder_mead(|u| g(to_theta(u)).map(|v| -v), &start, remaining)?;
    let polished = to_theta(&nm.point);
    if -nm.value > value {
        theta = polished;
    }
    Ok(Optimum { theta, evaluations: evals.get(), converged: nm.converged })
}

struct NmResult {
    point: Vec<f64>,
    value: f64,
    converged: bool,
}

/// Nelder-Mead minimization with standard coefficients.
fn nelder_mead<F>(f: F, start: &[f64], budget: usize) -> Result<NmResult>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = start.len();
    let used = Cell::new(0usize);
    let eval = |p: &[f64]| -> Result<f64> {
        used.set(used.get() + 1);
        f(p)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), eval(start)?));
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += (0.05 * p[i].abs()).max(1e-3);
        let v = eval(&p)?;
        simplex.push((p, v));
    }
    let mut converged = false;
    while used.get() + n + 2 <= budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fb, fw) = (simplex[0].1, simplex[n].1);
        let diameter = simplex[1..]
            .iter()
            .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (fw - fb).abs() <= 1e-12 * (1.0 + fb.abs()) && diameter <= TOL {
            converged = true;
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(p, _)| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n].0[j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr)?;
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe)?;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = along(-0.5);
                let v = eval(&x)?;
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x)?;
                (x, v)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let b = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let p: Vec<f64> = s.0.iter().zip(&b).map(|(a, c)| c + 0.5 * (a - c)).collect();
                    let v = eval(&p)?;
                    *s = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (point, value) = simplex.swap_remove(0);
    Ok(NmResult { point, value, converged })
}
