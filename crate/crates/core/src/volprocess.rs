//! Stationary analysis of the dispersion (stochastic variance) process.
//!
//! The dispersion y follows dy = alpha(y) dt + v sqrt(y) dw. For the linear
//! drift alpha(y) = kappa_y (theta - y) the stationary law is
//! Gamma(2 kappa_y theta / v^2, 2 kappa_y / v^2). A two-level clustering
//! drift is built so that the stationary law is a prescribed mixture
//! k g1 + (1-k) g2 of two such Gamma densities:
//!
//!   alpha(y) = w(y) alpha1(y) + (1 - w(y)) alpha2(y),
//!   w(y) = k g1(y) / (k g1(y) + (1-k) g2(y)).
//!
//! Conversely, any drift satisfying the mean-reversion hypothesis
//! (alpha in C^1, 2 alpha(0)/v^2 > 1, limsup alpha(y)/y < 0) has stationary
//! density
//!
//!   g(y) = C y^(2 alpha(0)/v^2 - 1) exp((2/v^2) Int_1^y alpha_hat(xi) dxi),
//!
//! with alpha_hat(y) = (alpha(y) - alpha(0)) / y. This module evaluates that
//! density in the log domain on a tabulation grid, computes the moment
//! constants sigma^2, D, S, K2, K3, K4 used by the price expansion, and
//! provides the kernel H(y) = (1/(y g(y))) Int_0^y (xi - sigma^2) g(xi) dxi
//! together with its cumulative integral.

use std::sync::Arc;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::interp::{inverse_monotone, CubicHermite};
use crate::quad::{cumulative_on_grid, integrate_tol, DEFAULT_ABS_TOL, DEFAULT_REL_TOL};

/// Below this point H(y) is evaluated from its local power-law series
/// rather than the quadrature ratio.
pub const H_SERIES_CUT: f64 = 1e-5;

/// One-sided finite-difference abscissa for the alpha_hat limit at zero.
const ALPHA_HAT_FD_POINT: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Parameters of the two-level dispersion process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolParams {
    /// Mean-reversion speed of the dispersion.
    pub kappa_y: f64,
    /// Volatility-of-dispersion coefficient.
    pub v: f64,
    /// Low dispersion level.
    pub theta1: f64,
    /// High dispersion level.
    pub theta2: f64,
    /// Mixture weight of the `theta1` component, strictly inside (0, 1).
    pub k: f64,
    /// Time-scale ratio of the fast dispersion. The stationary analysis is
    /// invariant under it; simulation applies the 1/epsilon speed-up.
    pub epsilon: f64,
}

impl VolParams {
    /// Reference parameter set used throughout the examples: a fast-switching
    /// dispersion with levels 0.025 and 0.1 mixed 1:2.
    pub fn reference() -> Self {
        VolParams {
            kappa_y: 100.0,
            v: 1.1832,
            theta1: 0.025,
            theta2: 0.1,
            k: 1.0 / 3.0,
            epsilon: 0.01,
        }
    }

    /// Validate positivity, the mixture weight range, and the Feller
    /// condition 2 kappa_y theta_i > v^2 for both components.
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_y > 0.0) {
            return Err(Error::param("kappa_y", "must be positive", self.kappa_y));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be positive", self.epsilon));
        }
        if !(self.v > 0.0) {
            return Err(Error::param("v", "must be positive", self.v));
        }
        if !(self.theta1 > 0.0) {
            return Err(Error::param("theta1", "must be positive", self.theta1));
        }
        if !(self.theta2 > 0.0) {
            return Err(Error::param("theta2", "must be positive", self.theta2));
        }
        if !(self.k > 0.0 && self.k < 1.0) {
            return Err(Error::param("k", "must lie strictly in (0, 1)", self.k));
        }
        let v2 = self.v * self.v;
        for (name, theta) in [("theta1", self.theta1), ("theta2", self.theta2)] {
            if 2.0 * self.kappa_y * theta <= v2 {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "Feller condition 2*kappa_y*theta > v^2 fails",
                    value: theta,
                });
            }
        }
        Ok(())
    }

    /// Gamma shape of component `i` (1-based): 2 kappa_y theta_i / v^2.
    pub fn shape(&self, i: usize) -> f64 {
        let theta = if i == 1 { self.theta1 } else { self.theta2 };
        2.0 * self.kappa_y * theta / (self.v * self.v)
    }

    /// Common Gamma rate 2 kappa_y / v^2.
    pub fn rate(&self) -> f64 {
        2.0 * self.kappa_y / (self.v * self.v)
    }

    /// Mixture mean k theta1 + (1-k) theta2; this is the averaged dispersion
    /// sigma^2 of the limiting stationary law.
    pub fn sigma2_mixture(&self) -> f64 {
        self.k * self.theta1 + (1.0 - self.k) * self.theta2
    }

    /// Log-density of the limiting Gamma mixture, evaluated by log-sum-exp.
    pub fn mixture_log_density(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let l1 = self.k.ln() + gamma_log_density(self.shape(1), self.rate(), y);
        let l2 = (1.0 - self.k).ln() + gamma_log_density(self.shape(2), self.rate(), y);
        let m = l1.max(l2);
        m + ((l1 - m).exp() + (l2 - m).exp()).ln()
    }
}

/// Log-density of Gamma(shape, rate) at `y > 0`.
pub fn gamma_log_density(shape: f64, rate: f64, y: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * y.ln() - rate * y
}

// ---------------------------------------------------------------------------
// Tabulation grid
// ---------------------------------------------------------------------------

/// Layout of the density tabulation grid: a geometric section resolving the
/// power-law head followed by a uniform section covering the bulk and tail.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GridConfig {
    /// First node; the density is extended below it by its local power law.
    pub y_min: f64,
    /// Seam between the geometric and uniform sections.
    pub knee: f64,
    /// Ratio of consecutive nodes in the geometric section.
    pub geometric_ratio: f64,
    /// Node spacing of the uniform section.
    pub h_uniform: f64,
    /// Last node; chosen so the stationary tail mass beyond it is < 1e-12.
    pub y_max: f64,
}

impl GridConfig {
    /// Default grid for a parameter set: y_max = theta_max + 40 sd_max with
    /// sd_max the largest component standard deviation, uniform spacing
    /// fine enough to keep log-density interpolation error below 1e-8.
    pub fn for_params(p: &VolParams) -> Self {
        let theta_max = p.theta1.max(p.theta2);
        let theta_min = p.theta1.min(p.theta2);
        let v2 = p.v * p.v;
        let sd_max = (theta_max * v2 / (2.0 * p.kappa_y)).sqrt();
        let sd_min = (theta_min * v2 / (2.0 * p.kappa_y)).sqrt();
        let y_max = theta_max + 40.0 * sd_max;
        let h = (sd_min / 40.0).min(1e-4).max(y_max / 40_000.0);
        let knee = 0.01f64.min(y_max / 8.0);
        GridConfig {
            y_min: 1e-6,
            knee,
            geometric_ratio: 1.01,
            h_uniform: h,
            y_max,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.y_min > 0.0) {
            return Err(Error::param("y_min", "must be positive", self.y_min));
        }
        if !(self.knee > self.y_min) {
            return Err(Error::param("knee", "must exceed y_min", self.knee));
        }
        if !(self.y_max > self.knee) {
            return Err(Error::param("y_max", "must exceed knee", self.y_max));
        }
        if !(self.geometric_ratio > 1.0) {
            return Err(Error::param(
                "geometric_ratio",
                "must exceed 1",
                self.geometric_ratio,
            ));
        }
        if !(self.h_uniform > 0.0) {
            return Err(Error::param("h_uniform", "must be positive", self.h_uniform));
        }
        Ok(())
    }

    /// Materialize the node set. Endpoints are hit exactly; the uniform
    /// section spacing is adjusted to divide its span evenly.
    pub fn nodes(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n_geo = ((self.knee / self.y_min).ln() / self.geometric_ratio.ln()).ceil() as usize;
        let n_geo = n_geo.max(1);
        let log_step = (self.knee / self.y_min).ln() / n_geo as f64;
        let mut nodes = Vec::with_capacity(n_geo + 16);
        for j in 0..n_geo {
            nodes.push(self.y_min * (log_step * j as f64).exp());
        }
        let n_uni = ((self.y_max - self.knee) / self.h_uniform).ceil() as usize;
        let n_uni = n_uni.max(1);
        let h = (self.y_max - self.knee) / n_uni as f64;
        for j in 0..=n_uni {
            nodes.push(self.knee + h * j as f64);
        }
        // Guard against rounding producing a non-increasing pair at the seam.
        nodes.dedup_by(|b, a| *b <= *a);
        Ok(nodes)
    }
}

// ---------------------------------------------------------------------------
// Drift specification
// ---------------------------------------------------------------------------

/// A dispersion drift alpha together with its value at zero and the reduced
/// drift alpha_hat(y) = (alpha(y) - alpha(0)) / y extended continuously to 0.
#[derive(Clone)]
pub struct DriftSpec {
    alpha: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    alpha_hat: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    alpha_at_zero: f64,
}

impl std::fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftSpec")
            .field("alpha_at_zero", &self.alpha_at_zero)
            .finish_non_exhaustive()
    }
}

impl DriftSpec {
    /// Wrap an arbitrary drift. When no closed-form `alpha_hat` is supplied
    /// its value at zero is taken by a one-sided difference at y = 1e-8 and
    /// the generic quotient is used elsewhere.
    pub fn new<F>(alpha: F, alpha_at_zero: f64) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let alpha = Arc::new(alpha);
        let a0 = alpha_at_zero;
        let hat_limit = (alpha(ALPHA_HAT_FD_POINT) - a0) / ALPHA_HAT_FD_POINT;
        let alpha_for_hat = Arc::clone(&alpha);
        let alpha_hat = Arc::new(move |y: f64| {
            if y < ALPHA_HAT_FD_POINT {
                hat_limit
            } else {
                (alpha_for_hat(y) - a0) / y
            }
        });
        DriftSpec {
            alpha,
            alpha_hat,
            alpha_at_zero,
        }
    }

    /// Wrap a drift with a closed-form reduced drift.
    pub fn with_alpha_hat<F, G>(alpha: F, alpha_hat: G, alpha_at_zero: f64) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        DriftSpec {
            alpha: Arc::new(alpha),
            alpha_hat: Arc::new(alpha_hat),
            alpha_at_zero,
        }
    }

    /// Linear CIR drift kappa (theta - y); alpha_hat is the constant -kappa.
    pub fn linear(kappa: f64, theta: f64) -> Self {
        DriftSpec {
            alpha: Arc::new(move |y| kappa * (theta - y)),
            alpha_hat: Arc::new(move |_| -kappa),
            alpha_at_zero: kappa * theta,
        }
    }

    /// Drift value alpha(y).
    pub fn alpha(&self, y: f64) -> f64 {
        (self.alpha)(y)
    }

    /// Reduced drift alpha_hat(y), continuous at zero.
    pub fn alpha_hat(&self, y: f64) -> f64 {
        (self.alpha_hat)(y)
    }

    /// alpha(0).
    pub fn alpha_at_zero(&self) -> f64 {
        self.alpha_at_zero
    }
}

/// Build the clustering drift whose stationary law is the two-component
/// Gamma mixture of `p`. The weight w(y) is evaluated through the log-odds
///
///   u(y) = ln(k_lo g_lo(y)) - ln(k_hi g_hi(y)) = c0 + (a_lo - a_hi) ln y,
///
/// which is exactly affine in ln y because the rate parameters coincide; no
/// density underflow can occur. The mean-reversion hypothesis is verified
/// numerically on [10 theta_max, y_max]: alpha(y)/y < -kappa_y/2 there.
pub fn clustering_drift(p: &VolParams) -> Result<DriftSpec> {
    p.validate()?;
    let (theta_lo, k_lo, theta_hi, k_hi) = if p.theta1 <= p.theta2 {
        (p.theta1, p.k, p.theta2, 1.0 - p.k)
    } else {
        (p.theta2, 1.0 - p.k, p.theta1, p.k)
    };
    let v2 = p.v * p.v;
    let a_lo = 2.0 * p.kappa_y * theta_lo / v2;
    let a_hi = 2.0 * p.kappa_y * theta_hi / v2;
    // c0 collects the y-independent part of the log-odds; the common factor
    // exp(-rate*y) cancels between the components.
    let beta = p.rate();
    let c0 = k_lo.ln() - k_hi.ln() + a_lo * beta.ln() - ln_gamma(a_lo) - a_hi * beta.ln()
        + ln_gamma(a_hi);
    let kappa_y = p.kappa_y;
    let dtheta = theta_hi - theta_lo;

    // ln of the high-component weight 1/(1+e^u), computed without overflow.
    let ln_w_hi = move |y: f64| -> f64 {
        let u = c0 + (a_lo - a_hi) * y.ln();
        if u > 35.0 {
            -u
        } else if u < -35.0 {
            0.0
        } else {
            -u.exp().ln_1p()
        }
    };

    let alpha = move |y: f64| -> f64 {
        if y <= 0.0 {
            return kappa_y * theta_lo;
        }
        let w_hi = ln_w_hi(y).exp();
        kappa_y * (theta_lo + dtheta * w_hi - y)
    };

    // alpha_hat(y) = kappa_y (dtheta w_hi(y) / y - 1); the quotient is formed
    // in the log domain so the y^(a_hi - a_lo - 1) decay near zero is exact.
    let hat_limit_exponent = a_hi - a_lo - 1.0;
    let alpha_hat = move |y: f64| -> f64 {
        if y <= 0.0 {
            if hat_limit_exponent > 0.0 {
                return -kappa_y;
            }
            // Non-smooth edge (a_hi - a_lo <= 1): fall back to the
            // one-sided value just inside the support.
            let w_over_y = (ln_w_hi(ALPHA_HAT_FD_POINT).exp()) / ALPHA_HAT_FD_POINT;
            return kappa_y * (dtheta * w_over_y - 1.0);
        }
        let lw = ln_w_hi(y) - y.ln();
        kappa_y * (dtheta * lw.exp() - 1.0)
    };

    let spec = DriftSpec::with_alpha_hat(alpha, alpha_hat, kappa_y * theta_lo);

    // Hypothesis check on the tail: the pull must be at least kappa_y/2.
    let theta_max = theta_hi;
    let y_hi = GridConfig::for_params(p).y_max.max(20.0 * theta_max);
    let y_lo = 10.0 * theta_max;
    if y_hi > y_lo {
        for j in 0..=200 {
            let y = y_lo + (y_hi - y_lo) * j as f64 / 200.0;
            let ratio = spec.alpha(y) / y;
            if !(ratio < -kappa_y / 2.0) {
                return Err(Error::HypothesisViolation {
                    y,
                    ratio,
                    bound: -kappa_y / 2.0,
                });
            }
        }
    }
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Density grid
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct DensityInner {
    /// Hermite interpolant of the shifted log-density u(y) - M.
    log_interp: CubicHermite,
    /// Additive constant turning the interpolant into the normalized log g.
    log_shift: f64,
    /// Power-law exponent a0 - 1 governing the head below y_min.
    head_exponent: f64,
    /// Normalized density values at the nodes.
    g_values: Vec<f64>,
    /// Normalized CDF values at the nodes (head mass included).
    cdf_values: Vec<f64>,
    /// ln C for g = C * exp(u); may be +-inf for extreme normalizations.
    log_norm_constant: f64,
    /// Declared stationary mass beyond the last node (normalized).
    tail_bound: f64,
}

/// Tabulated stationary density with log-domain cubic Hermite evaluation.
///
/// The density is zero for y <= 0, follows its local power law below the
/// first node, and is treated as out of support beyond the last node (the
/// declared tail bound is available via [`DensityGrid::tail_bound`]).
/// Cloning is cheap; the tables are shared.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    inner: Arc<DensityInner>,
}

impl Serialize for DensityGrid {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("DensityGrid", 5)?;
        s.serialize_field("y_nodes", self.inner.log_interp.nodes())?;
        s.serialize_field("g_values", &self.inner.g_values)?;
        s.serialize_field("norm_constant", &self.inner.log_norm_constant.exp())?;
        s.serialize_field("interpolation", "log-domain cubic Hermite, exact slopes")?;
        s.serialize_field("tail_bound", &self.inner.tail_bound)?;
        s.end()
    }
}

impl DensityGrid {
    /// Build a normalized density grid from an unnormalized log-density and
    /// its exact derivative. `head_exponent` is the power a0 - 1 such that
    /// the density behaves like y^(a0-1) as y -> 0; it controls the mass
    /// and evaluation below the first node.
    pub fn from_log_density<F, G>(
        log_unnorm: F,
        dlog: G,
        head_exponent: f64,
        cfg: &GridConfig,
    ) -> Result<Self>
    where
        F: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        let nodes = cfg.nodes()?;
        if nodes.len() < 16 {
            return Err(Error::GridTooCoarse {
                needed: 16,
                available: nodes.len(),
            });
        }
        let u: Vec<f64> = nodes.iter().map(|&y| log_unnorm(y)).collect();
        let s: Vec<f64> = nodes.iter().map(|&y| dlog(y)).collect();
        if u.iter().any(|v| !v.is_finite()) || s.iter().any(|v| !v.is_finite()) {
            return Err(Error::param(
                "log_density",
                "non-finite log-density or slope on the grid",
                f64::NAN,
            ));
        }
        let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = u.iter().map(|v| v - m).collect();
        let interp = CubicHermite::new(nodes.clone(), shifted, s);

        // Main mass via per-segment adaptive panels; this doubles as the CDF.
        let mut cdf = cumulative_on_grid(|y| interp.eval(y).exp(), &nodes)?;
        let main_mass = *cdf.last().unwrap();
        if !(main_mass > 0.0) || !main_mass.is_finite() {
            return Err(Error::QuadratureFailure {
                a: cfg.y_min,
                b: cfg.y_max,
                estimate: f64::NAN,
                tolerance: DEFAULT_ABS_TOL,
            });
        }

        // Head mass below y_min from the power law g ~ c y^(a0-1):
        // integral_0^{y0} = g(y0) * y0 / a0.
        let a0 = head_exponent + 1.0;
        let g0 = interp.eval(cfg.y_min).exp();
        let head_mass = if a0 > 0.0 { g0 * cfg.y_min / a0 } else { 0.0 };

        // Tail mass beyond y_max from the local exponential decay rate.
        let slope_end = *interp.slopes().last().unwrap();
        let g_end = interp.eval(cfg.y_max).exp();
        let tail_mass = if slope_end < 0.0 {
            g_end / (-slope_end)
        } else {
            f64::INFINITY
        };
        if !(tail_mass.is_finite()) {
            return Err(Error::HypothesisViolation {
                y: cfg.y_max,
                ratio: slope_end,
                bound: 0.0,
            });
        }

        let total = head_mass + main_mass + tail_mass;
        let ln_total = total.ln();
        for c in cdf.iter_mut() {
            *c = (*c + head_mass) / total;
        }
        let g_values: Vec<f64> = nodes
            .iter()
            .map(|&y| (interp.eval(y) - ln_total).exp())
            .collect();

        Ok(DensityGrid {
            inner: Arc::new(DensityInner {
                log_interp: interp,
                log_shift: -ln_total,
                head_exponent,
                g_values,
                cdf_values: cdf,
                log_norm_constant: -m - ln_total,
                tail_bound: tail_mass / total,
            }),
        })
    }

    /// Support of the tabulation, `(y_min, y_max)`.
    pub fn support(&self) -> (f64, f64) {
        (self.inner.log_interp.x_min(), self.inner.log_interp.x_max())
    }

    /// Grid nodes.
    pub fn nodes(&self) -> &[f64] {
        self.inner.log_interp.nodes()
    }

    /// Normalized density values at the nodes.
    pub fn node_values(&self) -> &[f64] {
        &self.inner.g_values
    }

    /// Declared (normalized) mass beyond the last node.
    pub fn tail_bound(&self) -> f64 {
        self.inner.tail_bound
    }

    /// Power-law exponent a0 - 1 of the head.
    pub fn head_exponent(&self) -> f64 {
        self.inner.head_exponent
    }

    /// Normalized log-density; `-inf` outside (0, y_max].
    pub fn log_density(&self, y: f64) -> f64 {
        let (lo, hi) = self.support();
        if y <= 0.0 || y > hi {
            return f64::NEG_INFINITY;
        }
        if y < lo {
            // Power-law continuation of the head.
            return self.inner.log_interp.eval(lo)
                + self.inner.log_shift
                + self.inner.head_exponent * (y / lo).ln();
        }
        self.inner.log_interp.eval(y) + self.inner.log_shift
    }

    /// Normalized density; zero outside (0, y_max].
    pub fn density(&self, y: f64) -> f64 {
        self.log_density(y).exp()
    }

    /// Derivative of the log-density (power-law value below the first node).
    pub fn dlog_density(&self, y: f64) -> f64 {
        let (lo, _) = self.support();
        if y < lo {
            return self.inner.head_exponent / y;
        }
        self.inner.log_interp.eval_derivative(y)
    }

    /// CDF of the tabulated density (0 below the support, 1 above).
    pub fn cdf(&self, y: f64) -> f64 {
        let (lo, hi) = self.support();
        if y <= 0.0 {
            return 0.0;
        }
        if y >= hi {
            return 1.0;
        }
        if y < lo {
            let a0 = self.inner.head_exponent + 1.0;
            return self.inner.cdf_values[0] * (y / lo).powf(a0);
        }
        let nodes = self.inner.log_interp.nodes();
        let k = nodes.partition_point(|&v| v <= y).max(1) - 1;
        // Local trapezoid correction on top of the tabulated node CDF.
        let g0 = self.density(nodes[k]);
        let gy = self.density(y);
        self.inner.cdf_values[k] + 0.5 * (g0 + gy) * (y - nodes[k])
    }

    /// Quantile by monotone inversion of the node CDF table.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        inverse_monotone(
            self.inner.log_interp.nodes(),
            &self.inner.cdf_values,
            p,
        )
    }
}

/// Stationary Gamma density of a single linear-drift component.
pub fn gamma_component_density(
    kappa_y: f64,
    v: f64,
    theta: f64,
    cfg: &GridConfig,
) -> Result<DensityGrid> {
    if !(kappa_y > 0.0) {
        return Err(Error::param("kappa_y", "must be positive", kappa_y));
    }
    if !(v > 0.0) {
        return Err(Error::param("v", "must be positive", v));
    }
    if !(theta > 0.0) {
        return Err(Error::param("theta", "must be positive", theta));
    }
    let v2 = v * v;
    if 2.0 * kappa_y * theta <= v2 {
        return Err(Error::InvalidParameter {
            name: "theta",
            reason: "Feller condition 2*kappa_y*theta > v^2 fails",
            value: theta,
        });
    }
    let a = 2.0 * kappa_y * theta / v2;
    let beta = 2.0 * kappa_y / v2;
    DensityGrid::from_log_density(
        |y| (a - 1.0) * y.ln() - beta * y,
        |y| (a - 1.0) / y - beta,
        a - 1.0,
        cfg,
    )
}

/// Stationary density of an arbitrary admissible drift via the closed form
/// above. `v` is the volatility-of-dispersion coefficient of the process.
pub fn stationary_density(drift: &DriftSpec, v: f64, cfg: &GridConfig) -> Result<DensityGrid> {
    if !(v > 0.0) {
        return Err(Error::param("v", "must be positive", v));
    }
    let v2 = v * v;
    let a0 = 2.0 * drift.alpha_at_zero() / v2;
    if !(a0 > 1.0) {
        return Err(Error::HypothesisViolation {
            y: 0.0,
            ratio: a0,
            bound: 1.0,
        });
    }
    // Numerical tail check of the mean-reversion hypothesis on the grid.
    for j in 0..=32 {
        let y = cfg.y_max * (0.5 + 0.5 * j as f64 / 32.0);
        if !(drift.alpha(y) < 0.0) {
            return Err(Error::HypothesisViolation {
                y,
                ratio: drift.alpha(y) / y,
                bound: 0.0,
            });
        }
    }

    let nodes = cfg.nodes()?;
    // Exponent integral J(y) = Int_{y_min}^{y} alpha_hat; the base-point
    // shift relative to the closed form's Int_1^y is absorbed by the
    // numerical normalization.
    let j_table = cumulative_on_grid(|y| drift.alpha_hat(y), &nodes)?;
    let j_interp = CubicHermite::new(
        nodes.clone(),
        j_table,
        nodes.iter().map(|&y| drift.alpha_hat(y)).collect(),
    );
    let g = 2.0 / v2;
    let head_exponent = a0 - 1.0;
    DensityGrid::from_log_density(
        |y| head_exponent * y.ln() + g * j_interp.eval(y),
        |y| head_exponent / y + g * drift.alpha_hat(y),
        head_exponent,
        cfg,
    )
}

// ---------------------------------------------------------------------------
// H kernel
// ---------------------------------------------------------------------------

/// The kernel H(y) = F(y) / (y g(y)) with F(y) = Int_0^y (xi - sigma^2) g,
/// its cumulative integral, and the mean sigma^2 it is built around.
///
/// Below [`H_SERIES_CUT`] the local power-law series is used:
/// H(y) = -sigma^2/a0 + h1 y + O(y^2) with
/// h1 = (1 - sigma^2 b1)/(a0 + 1) + sigma^2 b1 / a0, where b1 is the linear
/// correction of the log-density at zero. For a pure Gamma density the
/// series collapses to the exact constant -1/rate.
#[derive(Debug, Clone)]
pub struct HKernel {
    density: DensityGrid,
    sigma2: f64,
    f_interp: CubicHermite,
    cumh_interp: CubicHermite,
    h0: f64,
    h1: f64,
}

impl HKernel {
    /// Build the kernel tables for a density grid.
    pub fn build(density: &DensityGrid) -> Result<Self> {
        let (y_lo, y_hi) = density.support();
        let nodes = density.nodes().to_vec();
        let a0 = density.head_exponent() + 1.0;

        // sigma^2 = Int y g dy, including the sub-grid head correction.
        let head_mean = density.density(y_lo) * y_lo * y_lo / (a0 + 1.0);
        let sigma2 = integrate_tol(
            |y| y * density.density(y),
            y_lo,
            y_hi,
            DEFAULT_ABS_TOL,
            DEFAULT_REL_TOL,
        )? + head_mean;

        // F on the nodes: forward cumulation through the bulk, backward
        // cumulation from the far tail where the forward sum loses relative
        // accuracy, spliced at the 0.9 mass quantile.
        let f_head = density.density(y_lo) * y_lo * (y_lo / (a0 + 1.0) - sigma2 / a0);
        let mut f_vals = cumulative_on_grid(|y| (y - sigma2) * density.density(y), &nodes)?;
        for v in f_vals.iter_mut() {
            *v += f_head;
        }
        let splice_y = density.quantile(0.9).max(2.0 * sigma2);
        let splice_idx = nodes.partition_point(|&v| v < splice_y).min(nodes.len() - 1);
        if splice_idx + 1 < nodes.len() {
            let tail_nodes = &nodes[splice_idx..];
            let rev = cumulative_on_grid(|y| (y - sigma2) * density.density(y), tail_nodes)?;
            let r_end = *rev.last().unwrap();
            // Tail of Int (xi - sigma2) g beyond y_max by local exponential
            // decay: Int ~ g (y - sigma2)/L + g/L^2 with L = -dlog g.
            let l_end = -density.dlog_density(y_hi);
            let tail_corr = if l_end > 0.0 {
                let g_end = density.density(y_hi);
                g_end * ((y_hi - sigma2) / l_end + 1.0 / (l_end * l_end))
            } else {
                0.0
            };
            for (j, r) in rev.iter().enumerate() {
                f_vals[splice_idx + j] = -(r_end - r) - tail_corr;
            }
        }
        let f_slopes: Vec<f64> = nodes.iter().map(|&y| (y - sigma2) * density.density(y)).collect();
        let f_interp = CubicHermite::new(nodes.clone(), f_vals, f_slopes);

        // Series coefficients at zero: b1 is the deviation of dlog g from its
        // pure power-law part at the first node.
        let b1 = density.dlog_density(y_lo) - (a0 - 1.0) / y_lo;
        let h0 = -sigma2 / a0;
        let h1 = (1.0 - sigma2 * b1) / (a0 + 1.0) + sigma2 * b1 / a0;

        let mut kernel = HKernel {
            density: density.clone(),
            sigma2,
            f_interp,
            cumh_interp: CubicHermite::new(vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]),
            h0,
            h1,
        };

        // Cumulative Int_0^y H with the sub-grid head H ~ h0 included.
        let cumh_head = kernel.h_raw(y_lo) * y_lo;
        let mut cumh = cumulative_on_grid(|y| kernel.h_raw(y), &nodes)?;
        for v in cumh.iter_mut() {
            *v += cumh_head;
        }
        let cumh_slopes: Vec<f64> = nodes.iter().map(|&y| kernel.h_raw(y)).collect();
        kernel.cumh_interp = CubicHermite::new(nodes, cumh, cumh_slopes);
        Ok(kernel)
    }

    /// Mean of the underlying density.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Underlying density grid.
    pub fn density(&self) -> &DensityGrid {
        &self.density
    }

    /// H(0+), the finite limit -sigma^2 / a0.
    pub fn h_at_zero(&self) -> f64 {
        self.h0
    }

    /// F(y) = Int_0^y (xi - sigma^2) g(xi) dxi.
    pub fn f(&self, y: f64) -> Result<f64> {
        self.check_range(y)?;
        Ok(self.f_interp.eval(y))
    }

    fn h_raw(&self, y: f64) -> f64 {
        if y < H_SERIES_CUT {
            return self.h0 + self.h1 * y;
        }
        let g = self.density.density(y);
        self.f_interp.eval(y) / (y * g)
    }

    /// Kernel value H(y).
    pub fn h(&self, y: f64) -> Result<f64> {
        if y <= 0.0 {
            return Ok(self.h0);
        }
        self.check_range(y)?;
        if y >= H_SERIES_CUT {
            let g = self.density.density(y);
            if g <= 0.0 {
                return Err(Error::DivisionByZeroDensity { y });
            }
        }
        Ok(self.h_raw(y))
    }

    /// Derivative H'(y) = (y - sigma^2)/y - H(y) (1/y + d ln g(y)).
    pub fn h_prime(&self, y: f64) -> Result<f64> {
        if y <= 0.0 || y < H_SERIES_CUT {
            return Ok(self.h1);
        }
        self.check_range(y)?;
        let h = self.h_raw(y);
        Ok((y - self.sigma2) / y - h * (1.0 / y + self.density.dlog_density(y)))
    }

    /// Cumulative kernel Int_0^y H(xi) dxi.
    pub fn cumulative_h(&self, y: f64) -> Result<f64> {
        if y <= 0.0 {
            return Ok(0.0);
        }
        let (lo, _) = self.density.support();
        if y < lo {
            return Ok(self.h0 * y);
        }
        self.check_range(y)?;
        Ok(self.cumh_interp.eval(y))
    }

    fn check_range(&self, y: f64) -> Result<()> {
        let (lo, hi) = self.density.support();
        if y > hi || y <= 0.0 {
            return Err(Error::YOutOfRange { y, lo, hi });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

/// Moment and kernel constants of a stationary dispersion law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSet {
    /// Mean dispersion sigma^2 = Int y g dy.
    pub sigma2: f64,
    /// Variance D = Int (y - sigma^2)^2 g dy.
    #[serde(rename = "D")]
    pub d: f64,
    /// Skewness S = D^(-3/2) Int (y - sigma^2)^3 g dy.
    #[serde(rename = "S")]
    pub s: f64,
    /// K2 = Int g(s) Int_0^s H(xi) dxi ds, the mean cumulative kernel.
    #[serde(rename = "K2")]
    pub k2: f64,
    /// K3 = Int y^2 H(y) g(y) dy = -S D^(3/2)/2 - sigma^2 D.
    #[serde(rename = "K3")]
    pub k3: f64,
    /// K4 = Int (Int_0^y H)(y - sigma^2) g(y) dy.
    #[serde(rename = "K4")]
    pub k4: f64,
    /// Variance recomputed through the double integral
    /// D = -Int_0^inf Int_0^y (xi - sigma^2) g(xi) dxi dy.
    #[serde(rename = "D_double_integral")]
    pub d_double_integral: f64,
}

impl MomentSet {
    /// First-order slow-scale constant K1 = (2 lambda2 / v) D.
    pub fn k1(&self, lambda2: f64, v: f64) -> f64 {
        2.0 * lambda2 / v * self.d
    }
}

/// Compute the moment set of a density through its H kernel.
pub fn moments(density: &DensityGrid, kernel: &HKernel) -> Result<MomentSet> {
    let (y_lo, y_hi) = density.support();
    let sigma2 = kernel.sigma2();
    let d = integrate_tol(
        |y| (y - sigma2) * (y - sigma2) * density.density(y),
        y_lo,
        y_hi,
        DEFAULT_ABS_TOL,
        DEFAULT_REL_TOL,
    )? + sigma2 * sigma2 * density.cdf(y_lo);
    if !(d > 0.0) || d < sigma2 * sigma2 * 1e-12 {
        return Err(Error::DegenerateVariance { variance: d });
    }
    let mu3 = integrate_tol(
        |y| {
            let c = y - sigma2;
            c * c * c * density.density(y)
        },
        y_lo,
        y_hi,
        DEFAULT_ABS_TOL,
        DEFAULT_REL_TOL,
    )?;
    let s = mu3 / d.powf(1.5);

    // K3 = Int y^2 H g = Int y F(y) dy after substituting H = F/(y g).
    let k3 = integrate_tol(
        |y| y * kernel.f_interp.eval(y),
        y_lo,
        y_hi,
        DEFAULT_ABS_TOL,
        DEFAULT_REL_TOL,
    )?;
    // D as the double integral -Int F.
    let d_double_integral = -integrate_tol(
        |y| kernel.f_interp.eval(y),
        y_lo,
        y_hi,
        DEFAULT_ABS_TOL,
        DEFAULT_REL_TOL,
    )?;
    let k2 = integrate_tol(
        |y| density.density(y) * kernel.cumh_interp.eval(y),
        y_lo,
        y_hi,
        DEFAULT_ABS_TOL,
        DEFAULT_REL_TOL,
    )?;
    let k4 = integrate_tol(
        |y| kernel.cumh_interp.eval(y) * (y - sigma2) * density.density(y),
        y_lo,
        y_hi,
        DEFAULT_ABS_TOL,
        DEFAULT_REL_TOL,
    )?;

    Ok(MomentSet {
        sigma2,
        d,
        s,
        k2,
        k3,
        k4,
        d_double_integral,
    })
}

// ---------------------------------------------------------------------------
// Stationary Fokker-Planck residual
// ---------------------------------------------------------------------------

/// Sup-norm residual of the stationary Fokker-Planck equation
/// (v^2/2)(y g)'' - (alpha g)' = 0, evaluated with fourth-order central
/// stencils on the uniform section of the grid. A density consistent with
/// the drift yields a residual at the stencil truncation level; a perturbed
/// density is flagged by a residual orders of magnitude larger.
pub fn fp_stationary_residual(density: &DensityGrid, drift: &DriftSpec, v: f64) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::param("v", "must be positive", v));
    }
    let nodes = density.nodes();
    let n = nodes.len();
    // Longest run of uniformly spaced nodes (relative spacing jitter 1e-9).
    let mut best = (0usize, 0usize);
    let mut start = 0usize;
    for i in 1..n - 1 {
        let h0 = nodes[i] - nodes[i - 1];
        let h1 = nodes[i + 1] - nodes[i];
        if (h1 - h0).abs() > 1e-9 * h0 {
            if i - start > best.1 - best.0 {
                best = (start, i);
            }
            start = i;
        }
    }
    if (n - 1) - start > best.1 - best.0 {
        best = (start, n - 1);
    }
    let (lo, hi) = best;
    let run = hi - lo + 1;
    if run < 9 {
        return Err(Error::GridTooCoarse {
            needed: 5,
            available: run.saturating_sub(4),
        });
    }
    let h = nodes[lo + 1] - nodes[lo];
    let yg: Vec<f64> = (lo..=hi)
        .map(|i| nodes[i] * density.node_values()[i])
        .collect();
    let ag: Vec<f64> = (lo..=hi)
        .map(|i| drift.alpha(nodes[i]) * density.node_values()[i])
        .collect();
    let mut sup = 0.0f64;
    for i in 2..run - 2 {
        let d2 = (-yg[i - 2] + 16.0 * yg[i - 1] - 30.0 * yg[i] + 16.0 * yg[i + 1] - yg[i + 2])
            / (12.0 * h * h);
        let d1 = (ag[i - 2] - 8.0 * ag[i - 1] + 8.0 * ag[i + 1] - ag[i + 2]) / (12.0 * h);
        sup = sup.max((0.5 * v * v * d2 - d1).abs());
    }
    Ok(sup)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
