//! Adaptive composite Gauss–Kronrod quadrature.
//!
//! A 7-point Gauss rule nested in a 15-point Kronrod rule gives an integral
//! value and an error estimate per panel; the adaptive driver bisects the
//! panel with the largest estimated error until the requested tolerance is
//! met. Default tolerances are `abs = 1e-12`, `rel = 1e-10` per integral.

use crate::error::{Error, Result};

/// Default absolute tolerance for density and moment integrals.
pub const DEFAULT_ABS_TOL: f64 = 1e-12;
/// Default relative tolerance for density and moment integrals.
pub const DEFAULT_REL_TOL: f64 = 1e-10;
/// Maximum number of panel bisections before giving up.
const MAX_PANELS: usize = 4000;

// Abscissae of the 15-point Kronrod rule on [-1, 1]; odd entries are the
// nested 7-point Gauss nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_813,
    0.949_107_912_342_759,
    0.864_864_423_359_769,
    0.741_531_185_599_394,
    0.586_087_235_467_691,
    0.405_845_151_377_397,
    0.207_784_955_007_898,
    0.0,
];

// Kronrod weights matching XGK.
const WGK: [f64; 8] = [
    0.022_935_322_010_529,
    0.063_092_092_629_979,
    0.104_790_010_322_250,
    0.140_653_259_715_525,
    0.169_004_726_639_267,
    0.190_350_578_064_785,
    0.204_432_940_075_298,
    0.209_482_141_084_728,
];

// Weights of the nested 7-point Gauss rule (nodes XGK[1], XGK[3], XGK[5], XGK[7]).
const WG: [f64; 4] = [
    0.129_484_966_168_870,
    0.279_705_391_489_277,
    0.381_830_050_505_119,
    0.417_959_183_673_469,
];

/// Result of one Gauss–Kronrod panel.
#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

/// Apply the 15-point Kronrod rule on `[a, b]`.
///
/// Returns the Kronrod value and a conservative error estimate based on the
/// difference from the nested Gauss value, rescaled as in QUADPACK.
fn kronrod_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);

    let fc = f(center);
    let mut result_gauss = WG[3] * fc;
    let mut result_kronrod = WGK[7] * fc;
    let mut resabs = WGK[7] * fc.abs();

    let mut fv = [0.0f64; 15];
    fv[7] = fc;
    for (j, &x) in XGK.iter().enumerate().take(7) {
        let dx = half * x;
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        fv[j] = f1;
        fv[14 - j] = f2;
        let sum = f1 + f2;
        result_kronrod += WGK[j] * sum;
        resabs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            result_gauss += WG[j / 2] * sum;
        }
    }

    let mean = 0.5 * result_kronrod;
    let mut resasc = WGK[7] * (fc - mean).abs();
    for (j, &v) in fv.iter().enumerate().take(7) {
        resasc += WGK[j] * ((v - mean).abs() + (fv[14 - j] - mean).abs());
    }

    let value = result_kronrod * half;
    let resabs = resabs * half.abs();
    let resasc = resasc * half.abs();
    let mut error = ((result_kronrod - result_gauss) * half).abs();
    if resasc != 0.0 && error != 0.0 {
        error = resasc * 1.0f64.min((200.0 * error / resasc).powf(1.5));
    }
    let round_off = 50.0 * f64::EPSILON * resabs;
    if round_off > error {
        error = round_off;
    }

    Panel {
        a,
        b,
        value,
        error,
    }
}

/// Integrate `f` over `[a, b]` with the default tolerances.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> Result<f64> {
    integrate_tol(f, a, b, DEFAULT_ABS_TOL, DEFAULT_REL_TOL)
}

/// Integrate `f` over `[a, b]` to the given absolute/relative tolerance.
///
/// The tolerance is met when the summed panel error estimate drops below
/// `max(abs_tol, rel_tol * |integral|)`. Fails with
/// [`Error::QuadratureFailure`] if the panel budget is exhausted first.
pub fn integrate_tol<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut panels = vec![kronrod_panel(&f, a, b)];
    loop {
        let mut total = 0.0;
        let mut total_err = 0.0;
        let mut worst = 0usize;
        let mut worst_err = -1.0;
        for (i, p) in panels.iter().enumerate() {
            total += p.value;
            total_err += p.error;
            if p.error > worst_err {
                worst_err = p.error;
                worst = i;
            }
        }
        let tol = abs_tol.max(rel_tol * total.abs());
        if total_err <= tol {
            return Ok(total);
        }
        if panels.len() >= MAX_PANELS {
            return Err(Error::QuadratureFailure {
                a,
                b,
                estimate: total_err,
                tolerance: tol,
            });
        }
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if mid <= p.a || mid >= p.b {
            // Interval no longer splittable in f64; accept what we have.
            return Err(Error::QuadratureFailure {
                a,
                b,
                estimate: total_err,
                tolerance: tol,
            });
        }
        panels.push(kronrod_panel(&f, p.a, mid));
        panels.push(kronrod_panel(&f, mid, p.b));
    }
}

/// Cumulative integrals of `f` along an ascending grid.
///
/// Returns `c` with `c[i] = integral of f from grid[0] to grid[i]`, each
/// inter-node segment integrated adaptively. Errors accumulate additively,
/// so per-segment tolerances are tightened by the segment count.
pub fn cumulative_on_grid<F: Fn(f64) -> f64>(f: F, grid: &[f64]) -> Result<Vec<f64>> {
    let n = grid.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return Ok(out);
    }
    let seg_abs = DEFAULT_ABS_TOL / n as f64;
    let mut acc = 0.0;
    let mut comp = 0.0; // Neumaier compensation for the running sum
    for i in 1..n {
        let seg = integrate_tol(&f, grid[i - 1], grid[i], seg_abs, DEFAULT_REL_TOL)?;
        let t = acc + seg;
        if acc.abs() >= seg.abs() {
            comp += (acc - t) + seg;
        } else {
            comp += (seg - t) + acc;
        }
        acc = t;
        out[i] = acc + comp;
    }
    Ok(out)
}
