//! Adaptive embedded Runge–Kutta integration with grid output.
//!
//! Dormand–Prince 5(4) with PI-free step control: accept when the WRMS error
//! norm is below one, scale the step by `0.9 * err^(-1/5)` clamped to
//! [0.2, 5.0]. The driver lands exactly on each requested output node, so
//! tabulated coefficient tables carry exact values plus exact slopes (the
//! right-hand side) for cubic Hermite dense output.

use crate::error::{Error, Result};

/// Default absolute tolerance for coefficient ODEs.
pub const DEFAULT_ABS_TOL: f64 = 1e-10;
/// Default relative tolerance for coefficient ODEs.
pub const DEFAULT_REL_TOL: f64 = 1e-9;

const SAFETY: f64 = 0.9;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;
const MAX_STEPS_PER_SEGMENT: usize = 100_000;

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = B1 - 5179.0 / 57600.0;
const E3: f64 = B3 - 7571.0 / 16695.0;
const E4: f64 = B4 - 393.0 / 640.0;
const E5: f64 = B5 + 92097.0 / 339200.0;
const E6: f64 = B6 - 187.0 / 2100.0;
const E7: f64 = -1.0 / 40.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

/// Solution tabulated on the requested output grid.
#[derive(Debug, Clone)]
pub struct GridSolution {
    /// Output abscissae (as passed in, strictly increasing).
    pub t: Vec<f64>,
    /// State at each node; `values[i][k]` is component `k` at `t[i]`.
    pub values: Vec<Vec<f64>>,
    /// Right-hand side at each node (exact slopes for dense output).
    pub slopes: Vec<Vec<f64>>,
}

/// Integrate `dy/dt = rhs(t, y)` from `grid[0]`, storing the state at every
/// grid node. The grid must be strictly increasing.
pub fn integrate_on_grid<F>(rhs: F, grid: &[f64], y0: &[f64]) -> Result<GridSolution>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    integrate_on_grid_tol(rhs, grid, y0, DEFAULT_ABS_TOL, DEFAULT_REL_TOL)
}

/// Same as [`integrate_on_grid`] with explicit tolerances.
pub fn integrate_on_grid_tol<F>(
    rhs: F,
    grid: &[f64],
    y0: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<GridSolution>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    assert!(grid.len() >= 2, "output grid needs at least two nodes");
    assert!(
        grid.windows(2).all(|w| w[0] < w[1]),
        "output grid must be strictly increasing"
    );
    let dim = y0.len();
    let mut y = y0.to_vec();
    let mut t = grid[0];

    let mut values = Vec::with_capacity(grid.len());
    let mut slopes = Vec::with_capacity(grid.len());
    let mut k1 = vec![0.0; dim];
    rhs(t, &y, &mut k1);
    values.push(y.clone());
    slopes.push(k1.clone());

    // Scratch stages.
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut k5 = vec![0.0; dim];
    let mut k6 = vec![0.0; dim];
    let mut k7 = vec![0.0; dim];
    let mut ytmp = vec![0.0; dim];
    let mut ynew = vec![0.0; dim];

    let mut h = (grid[1] - grid[0]) * 0.1;

    for &t_target in &grid[1..] {
        let mut steps = 0usize;
        while t < t_target {
            steps += 1;
            if steps > MAX_STEPS_PER_SEGMENT {
                return Err(Error::OdeStepFailure {
                    t,
                    h,
                    h_min: f64::EPSILON * t.abs().max(1.0),
                });
            }
            let h_min = 16.0 * f64::EPSILON * t.abs().max(1.0);
            if h < h_min {
                return Err(Error::OdeStepFailure { t, h, h_min });
            }
            let mut hs = h.min(t_target - t);
            if t + hs > t_target {
                hs = t_target - t;
            }

            // FSAL: k1 holds rhs(t, y) from the previous accepted step.
            for i in 0..dim {
                ytmp[i] = y[i] + hs * A21 * k1[i];
            }
            rhs(t + C2 * hs, &ytmp, &mut k2);
            for i in 0..dim {
                ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(t + C3 * hs, &ytmp, &mut k3);
            for i in 0..dim {
                ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(t + C4 * hs, &ytmp, &mut k4);
            for i in 0..dim {
                ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(t + C5 * hs, &ytmp, &mut k5);
            for i in 0..dim {
                ytmp[i] = y[i]
                    + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs(t + hs, &ytmp, &mut k6);
            for i in 0..dim {
                ynew[i] = y[i]
                    + hs * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs(t + hs, &ynew, &mut k7);

            // WRMS error norm against abs/rel scale.
            let mut err_sq = 0.0;
            for i in 0..dim {
                let e = hs
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i]
                        + E7 * k7[i]);
                let scale = abs_tol + rel_tol * y[i].abs().max(ynew[i].abs());
                err_sq += (e / scale) * (e / scale);
            }
            let err = (err_sq / dim as f64).sqrt();

            if err <= 1.0 {
                t += hs;
                y.copy_from_slice(&ynew);
                k1.copy_from_slice(&k7);
                let scale = if err == 0.0 {
                    MAX_SCALE
                } else {
                    (SAFETY * err.powf(-0.2)).clamp(MIN_SCALE, MAX_SCALE)
                };
                h = hs * scale;
            } else {
                h = hs * (SAFETY * err.powf(-0.2)).clamp(MIN_SCALE, 1.0);
            }
        }
        values.push(y.clone());
        slopes.push(k1.clone());
    }

    Ok(GridSolution {
        t: grid.to_vec(),
        values,
        slopes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_matches_closed_form() {
        let grid: Vec<f64> = (0..=400).map(|i| i as f64 * 0.01).collect();
        let sol = integrate_on_grid(|_, y, dy| dy[0] = -2.5 * y[0], &grid, &[1.0]).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            let exact = (-2.5 * t).exp();
            assert!(
                (sol.values[i][0] - exact).abs() < 1e-9,
                "t={t}: got {}, want {exact}",
                sol.values[i][0]
            );
        }
    }

    #[test]
    fn harmonic_oscillator_energy_preserved() {
        let grid: Vec<f64> = (0..=500).map(|i| i as f64 * 0.02).collect();
        let sol = integrate_on_grid(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            &grid,
            &[1.0, 0.0],
        )
        .unwrap();
        let last = sol.values.last().unwrap();
        let t_end = *grid.last().unwrap();
        assert!((last[0] - t_end.cos()).abs() < 1e-7);
        assert!((last[1] + t_end.sin()).abs() < 1e-7);
    }

    #[test]
    fn riccati_scalar_against_tanh_solution() {
        // dB/dtau = 1 - B^2 has solution tanh(tau).
        let grid: Vec<f64> = (0..=400).map(|i| i as f64 * 0.01).collect();
        let sol = integrate_on_grid(|_, y, dy| dy[0] = 1.0 - y[0] * y[0], &grid, &[0.0]).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            assert!(
                (sol.values[i][0] - t.tanh()).abs() < 1e-9,
                "t={t}: got {}",
                sol.values[i][0]
            );
        }
    }

    #[test]
    fn slopes_equal_rhs_at_nodes() {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let sol = integrate_on_grid(|t, _, dy| dy[0] = t.cos(), &grid, &[0.0]).unwrap();
        for (i, &t) in grid.iter().enumerate() {
            assert!((sol.slopes[i][0] - t.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn stiff_linear_system_stays_accurate() {
        // Moderately stiff decay; adaptive control must shrink steps.
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.01).collect();
        let sol = integrate_on_grid(|_, y, dy| dy[0] = -200.0 * (y[0] - 1.0), &grid, &[0.0]).unwrap();
        let exact = 1.0 - (-200.0 * 1.0f64).exp();
        assert!((sol.values.last().unwrap()[0] - exact).abs() < 1e-8);
    }
}
