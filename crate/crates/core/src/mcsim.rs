//! Monte Carlo simulation of the two-factor short-rate system.
//!
//! The pair (y, r) follows
//!
//!   dy = alpha(y)/eps dt + v sqrt(y/eps) dw_y,
//!   dr = kappa (theta - r) dt + sqrt(y r) dw_r,
//!
//! with independent Wiener drivers. Under the pricing measure the drifts
//! pick up the market prices of risk: -lambda1 r y on the rate and
//! -lambda2 v y / sqrt(eps) on the dispersion.
//!
//! The fast factor relaxes on the O(eps) time scale, so a step that
//! resolves the rate process would destroy the dispersion dynamics.
//! Each stored step of width dt is therefore internally divided into
//! substeps chosen so the fast relaxation rate per substep stays small;
//! the rate process advances once per stored step using the substep
//! average of the dispersion, which matches the conditional quadratic
//! variation of the rate over the bracket.
//!
//! Per-path random streams are derived from (seed, path index) on a
//! counter-based generator, so ensembles are reproducible bit-for-bit
//! and embarrassingly parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::CIRParams;
use crate::volprocess::{clustering_drift, DensityGrid, DriftSpec, VolParams};

/// Target fast-relaxation rate per internal substep: substeps are chosen
/// so that (relaxation rate) x (substep) <= this.
const FAST_RATE_PER_SUBSTEP: f64 = 0.2;

/// Probability measure the paths are generated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Physical,
    RiskNeutral,
}

/// Discretization of the square-root diffusions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Drift and diffusion arguments replaced by max(x, 0); the iterate
    /// itself may dip below zero, stored values are truncated.
    FullTruncationEuler,
    /// Iterate reflected to |x| after every step.
    ReflectedEuler,
}

/// Simulation request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Stored step size; must resolve the fast scale (dt <= eps/20).
    pub dt: f64,
    pub n_paths: usize,
    pub horizon: f64,
    pub seed: u64,
    pub measure: Measure,
    pub scheme: Scheme,
    /// Keep full (r, y) paths; terminal values and discount integrals are
    /// always kept.
    #[serde(default)]
    pub store_paths: bool,
    /// Antithetic pairing: odd path indices reuse the stream of the
    /// preceding even index with negated Gaussian draws (and mirrored
    /// initial-dispersion uniforms).
    #[serde(default)]
    pub antithetic: bool,
}

impl SimConfig {
    /// Validate against the fast-scale constraint of a given epsilon.
    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::param("dt", "must be positive", self.dt));
        }
        if !(epsilon > 0.0) {
            return Err(Error::param("epsilon", "must be positive", epsilon));
        }
        let bound = epsilon / 20.0;
        if self.dt > bound * (1.0 + 1e-12) {
            return Err(Error::StepTooLarge {
                dt: self.dt,
                bound,
                eps: epsilon,
            });
        }
        if self.n_paths < 1 {
            return Err(Error::param("n_paths", "must be at least 1", 0.0));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(Error::param(
                "n_paths",
                "antithetic pairing needs an even path count",
                self.n_paths as f64,
            ));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::param("horizon", "must be positive", self.horizon));
        }
        Ok(())
    }
}

/// Initial dispersion: a fixed level or a per-path stationary draw.
#[derive(Debug, Clone, Copy)]
pub enum YInit<'a> {
    Fixed(f64),
    /// Inverse-CDF draw from a stationary density, one uniform per path.
    Stationary(&'a DensityGrid),
}

/// Simulated ensemble. Stored values are nonnegative by scheme
/// construction; full paths are present only when requested.
#[derive(Debug, Clone, Serialize)]
pub struct PathEnsemble {
    /// Stored time grid (length n_steps + 1), last node = horizon.
    pub times: Vec<f64>,
    /// Per-path rate paths (empty unless `store_paths`).
    pub r_paths: Vec<Vec<f64>>,
    /// Per-path dispersion paths (empty unless `store_paths`).
    pub y_paths: Vec<Vec<f64>>,
    /// Trapezoidal accumulators of int_0^horizon r dt, one per path.
    pub discount_integrals: Vec<f64>,
    /// Terminal rate per path.
    pub r_terminal: Vec<f64>,
    /// Terminal dispersion per path.
    pub y_terminal: Vec<f64>,
    pub config: SimConfig,
}

struct PathOut {
    discount: f64,
    r_term: f64,
    y_term: f64,
    r_path: Vec<f64>,
    y_path: Vec<f64>,
}

/// Uniform-grid tabulation of the drift for the inner loop: the clustering
/// drift costs a log and an exp per call, which dominates the substep
/// budget. Linear interpolation on a fine uniform grid is exact for linear
/// drifts and accurate to O(h^2) otherwise; queries beyond the table fall
/// back to the closure.
struct AlphaTable {
    h_inv: f64,
    y_max: f64,
    vals: Vec<f64>,
}

impl AlphaTable {
    const RANGE: f64 = 8.0;
    const NODES: usize = 1 << 16;

    fn build(drift: &DriftSpec) -> Self {
        let h = Self::RANGE / (Self::NODES - 1) as f64;
        let vals = (0..Self::NODES)
            .map(|i| drift.alpha(i as f64 * h))
            .collect();
        AlphaTable {
            h_inv: 1.0 / h,
            y_max: Self::RANGE,
            vals,
        }
    }

    #[inline]
    fn eval(&self, y: f64, drift: &DriftSpec) -> f64 {
        if y >= self.y_max {
            return drift.alpha(y);
        }
        let u = y * self.h_inv;
        let i = u as usize;
        let w = u - i as f64;
        self.vals[i] * (1.0 - w) + self.vals[i + 1] * w
    }
}

/// Simulate the clustering model: the drift is built from `vol` and the
/// substep count from its stiffness kappa_y / eps (plus the risk-neutral
/// dispersion-premium rate when applicable).
pub fn simulate(
    vol: &VolParams,
    cir: &CIRParams,
    cfg: &SimConfig,
    r0: f64,
    y0: YInit,
) -> Result<PathEnsemble> {
    vol.validate()?;
    let drift = clustering_drift(vol)?;
    let mut rate = vol.kappa_y / vol.epsilon;
    if cfg.measure == Measure::RiskNeutral {
        rate += cir.lambda2.abs() * vol.v / vol.epsilon.sqrt();
    }
    let n_sub = ((cfg.dt * rate / FAST_RATE_PER_SUBSTEP).ceil() as usize).max(1);
    simulate_with_drift(&drift, cir, vol.v, vol.epsilon, n_sub, cfg, r0, y0)
}

/// Simulate with an explicit drift specification and substep count; the
/// high-level [`simulate`] wrapper chooses both from `VolParams`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_drift(
    drift: &DriftSpec,
    cir: &CIRParams,
    v: f64,
    epsilon: f64,
    n_substeps: usize,
    cfg: &SimConfig,
    r0: f64,
    y0: YInit,
) -> Result<PathEnsemble> {
    cfg.validate(epsilon)?;
    cir.validate()?;
    if !(v >= 0.0) {
        return Err(Error::param("v", "must be nonnegative", v));
    }
    if n_substeps < 1 {
        return Err(Error::param("n_substeps", "must be at least 1", 0.0));
    }
    if !(r0 >= 0.0) {
        return Err(Error::param("r0", "must be nonnegative", r0));
    }
    if let YInit::Fixed(y) = y0 {
        if !(y >= 0.0) {
            return Err(Error::param("y0", "must be nonnegative", y));
        }
    }
    let n_steps = ((cfg.horizon / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
    let dt_last = cfg.horizon - (n_steps - 1) as f64 * cfg.dt;
    let table = AlphaTable::build(drift);

    let outs: Vec<PathOut> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|idx| {
            run_path(
                idx, drift, &table, cir, v, epsilon, n_substeps, cfg, &y0, r0, n_steps, dt_last,
            )
        })
        .collect();

    let mut times = Vec::with_capacity(n_steps + 1);
    for k in 0..n_steps {
        times.push(k as f64 * cfg.dt);
    }
    times.push(cfg.horizon);

    let mut ensemble = PathEnsemble {
        times,
        r_paths: Vec::new(),
        y_paths: Vec::new(),
        discount_integrals: Vec::with_capacity(cfg.n_paths),
        r_terminal: Vec::with_capacity(cfg.n_paths),
        y_terminal: Vec::with_capacity(cfg.n_paths),
        config: *cfg,
    };
    for out in outs {
        ensemble.discount_integrals.push(out.discount);
        ensemble.r_terminal.push(out.r_term);
        ensemble.y_terminal.push(out.y_term);
        if cfg.store_paths {
            ensemble.r_paths.push(out.r_path);
            ensemble.y_paths.push(out.y_path);
        }
    }
    Ok(ensemble)
}

/// One path with its own deterministic stream. Draw order per path:
/// first the initial-dispersion uniform (when sampled), then for every
/// stored step all dispersion substep Gaussians followed by one rate
/// Gaussian.
#[allow(clippy::too_many_arguments)]
fn run_path(
    idx: usize,
    drift: &DriftSpec,
    table: &AlphaTable,
    cir: &CIRParams,
    v: f64,
    epsilon: f64,
    n_sub: usize,
    cfg: &SimConfig,
    y0: &YInit,
    r0: f64,
    n_steps: usize,
    dt_last: f64,
) -> PathOut {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (stream, anti) = if cfg.antithetic {
        ((idx / 2) as u64, idx % 2 == 1)
    } else {
        (idx as u64, false)
    };
    rng.set_stream(stream);
    let sign = if anti { -1.0 } else { 1.0 };

    let mut y = match y0 {
        YInit::Fixed(val) => *val,
        YInit::Stationary(density) => {
            let mut u: f64 = rng.gen();
            if anti {
                u = 1.0 - u;
            }
            density.quantile(u)
        }
    };
    let mut r = r0;
    let sqrt_eps = epsilon.sqrt();
    let vol_fast = v / sqrt_eps;
    let premium_rate = cir.lambda2 * v / sqrt_eps;
    let risk_neutral = cfg.measure == Measure::RiskNeutral;
    let reflected = cfg.scheme == Scheme::ReflectedEuler;

    let mut r_path = Vec::new();
    let mut y_path = Vec::new();
    if cfg.store_paths {
        r_path.reserve(n_steps + 1);
        y_path.reserve(n_steps + 1);
        r_path.push(r.max(0.0));
        y_path.push(y.max(0.0));
    }

    // Neumaier-compensated discount accumulator.
    let mut disc = 0.0f64;
    let mut disc_c = 0.0f64;

    for step in 0..n_steps {
        let h = if step + 1 == n_steps { dt_last } else { cfg.dt };
        let hs = h / n_sub as f64;
        let sq_hs = hs.sqrt();
        let mut ybar = 0.0f64;
        for _ in 0..n_sub {
            let yp = y.max(0.0);
            ybar += yp;
            let z: f64 = rng.sample::<f64, _>(StandardNormal) * sign;
            let mut drift_y = table.eval(yp, drift) / epsilon;
            if risk_neutral {
                drift_y -= premium_rate * yp;
            }
            let next = y + drift_y * hs + vol_fast * yp.sqrt() * sq_hs * z;
            y = if reflected { next.abs() } else { next };
        }
        ybar /= n_sub as f64;

        let z_r: f64 = rng.sample::<f64, _>(StandardNormal) * sign;
        let rp = r.max(0.0);
        let mut drift_r = cir.kappa * (cir.theta - rp);
        if risk_neutral {
            drift_r -= cir.lambda1 * rp * ybar;
        }
        let next = r + drift_r * h + (ybar * rp).sqrt() * h.sqrt() * z_r;
        let r_next = if reflected { next.abs() } else { next };

        // Trapezoid on the truncated rate, compensated accumulation.
        let term = 0.5 * (rp + r_next.max(0.0)) * h;
        let s = disc + term;
        disc_c += if disc.abs() >= term.abs() {
            (disc - s) + term
        } else {
            (term - s) + disc
        };
        disc = s;
        r = r_next;

        if cfg.store_paths {
            r_path.push(r.max(0.0));
            y_path.push(y.max(0.0));
        }
    }

    PathOut {
        discount: disc + disc_c,
        r_term: r.max(0.0),
        y_term: y.max(0.0),
        r_path,
        y_path,
    }
}

/// Monte Carlo bond-price estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct McPrice {
    pub price: f64,
    pub std_error: f64,
    /// Independent averaging units (pair count under antithetic pairing).
    pub n_samples: usize,
}

/// Discounted-payoff estimator mean(exp(-int r)) with its standard error.
/// Requires a risk-neutral ensemble; antithetic runs are averaged over
/// pair means so the standard error stays unbiased.
pub fn mc_bond_price(ensemble: &PathEnsemble) -> Result<McPrice> {
    if ensemble.config.measure != Measure::RiskNeutral {
        return Err(Error::MeasureMismatch {
            operation: "mc_bond_price",
            required: "risk-neutral",
            actual: "physical",
        });
    }
    let disc = &ensemble.discount_integrals;
    if disc.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: 1,
            available: 0,
        });
    }
    let samples: Vec<f64> = if ensemble.config.antithetic {
        disc.chunks_exact(2)
            .map(|pair| 0.5 * ((-pair[0]).exp() + (-pair[1]).exp()))
            .collect()
    } else {
        disc.iter().map(|&d| (-d).exp()).collect()
    };
    let n = samples.len();
    let mean = neumaier_sum(samples.iter().copied()) / n as f64;
    let std_error = if n > 1 {
        let ssq = neumaier_sum(samples.iter().map(|&x| (x - mean) * (x - mean)));
        (ssq / ((n - 1) as f64 * n as f64)).sqrt()
    } else {
        0.0
    };
    Ok(McPrice {
        price: mean,
        std_error,
        n_samples: n,
    })
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in values {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// Normalized histogram of dispersion samples with the two-sided
/// Kolmogorov-Smirnov distance to a reference stationary density.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalDensity {
    /// Bin edges (length bins + 1).
    pub bin_edges: Vec<f64>,
    /// Histogram heights normalized to unit mass.
    pub bin_densities: Vec<f64>,
    pub ks_distance: f64,
    pub n_samples: usize,
}

/// Histogram `samples` against `density` and compute the KS statistic
/// between the empirical CDF and the quadrature CDF of the density.
pub fn empirical_density(samples: &[f64], density: &DensityGrid) -> Result<EmpiricalDensity> {
    const MIN_SAMPLES: usize = 100;
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_SAMPLES,
            available: samples.len(),
        });
    }
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));

    let (sup_lo, sup_hi) = density.support();
    let lo = sup_lo.min(sorted[0]);
    let hi = sup_hi.max(sorted[n - 1]);
    let n_bins = ((n as f64).sqrt().ceil() as usize).clamp(10, 200);
    let width = (hi - lo) / n_bins as f64;
    let mut counts = vec![0usize; n_bins];
    for &x in &sorted {
        let k = (((x - lo) / width) as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    let bin_edges: Vec<f64> = (0..=n_bins).map(|k| lo + k as f64 * width).collect();
    let bin_densities: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / (n as f64 * width))
        .collect();

    let cdf = |y: f64| -> f64 {
        if y <= sup_lo {
            0.0
        } else if y >= sup_hi {
            1.0
        } else {
            density.cdf(y)
        }
    };
    let mut ks = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        ks = ks.max(f - i as f64 / n as f64);
        ks = ks.max((i + 1) as f64 / n as f64 - f);
    }
    Ok(EmpiricalDensity {
        bin_edges,
        bin_densities,
        ks_distance: ks,
        n_samples: n,
    })
}

/// Draw independent stationary-dispersion samples by inverse CDF.
pub fn stationary_y_samples(density: &DensityGrid, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| density.quantile(rng.gen())).collect()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::closed_form_p0;
    use crate::volprocess::{stationary_density, GridConfig};
    use std::sync::OnceLock;

    fn base_cfg() -> SimConfig {
        SimConfig {
            dt: 5e-4,
            n_paths: 64,
            horizon: 0.1,
            seed: 42,
            measure: Measure::RiskNeutral,
            scheme: Scheme::FullTruncationEuler,
            store_paths: false,
            antithetic: false,
        }
    }

    static REF_DENSITY: OnceLock<DensityGrid> = OnceLock::new();

    fn reference_density() -> &'static DensityGrid {
        REF_DENSITY.get_or_init(|| {
            let vol = VolParams::reference();
            let drift = clustering_drift(&vol).unwrap();
            stationary_density(&drift, vol.v, &GridConfig::for_params(&vol)).unwrap()
        })
    }

    #[test]
    fn degenerate_noise_reduces_to_one_factor_cir() {
        // v = 0 with linear drift freezes y at theta1; the rate is then a
        // one-factor CIR with dispersion theta1 and the closed form must
        // agree within Monte Carlo error. With no dispersion noise the
        // fast time scale is irrelevant, so run at epsilon = 1 with a
        // unit-rate drift to keep the deterministic iteration stable.
        let theta1 = 0.06;
        let drift = DriftSpec::linear(1.0, theta1);
        let cir = CIRParams {
            maturity: 0.5,
            ..CIRParams::reference()
        };
        let cfg = SimConfig {
            n_paths: 20_000,
            horizon: 0.5,
            ..base_cfg()
        };
        let ens = simulate_with_drift(&drift, &cir, 0.0, 1.0, 1, &cfg, 0.03, YInit::Fixed(theta1))
            .unwrap();
        assert!(ens.y_terminal.iter().all(|&y| (y - theta1).abs() < 1e-12));
        let mc = mc_bond_price(&ens).unwrap();
        let exact = closed_form_p0(&cir, theta1).unwrap().price(0.0, 0.03);
        assert!(
            (mc.price - exact).abs() < 3.0 * mc.std_error,
            "mc {} vs closed form {} (se {})",
            mc.price,
            exact,
            mc.std_error
        );
    }

    #[test]
    fn zero_horizon_limit_price_one() {
        let drift = DriftSpec::linear(1.0, 0.075);
        let cfg = SimConfig {
            horizon: 1e-3,
            n_paths: 500,
            ..base_cfg()
        };
        let ens = simulate_with_drift(
            &drift,
            &CIRParams::reference(),
            0.3,
            1.0,
            1,
            &cfg,
            0.03,
            YInit::Fixed(0.075),
        )
        .unwrap();
        let mc = mc_bond_price(&ens).unwrap();
        assert!((mc.price - 1.0).abs() < 1e-4, "price {}", mc.price);
        assert!(mc.std_error < 1e-5, "se {}", mc.std_error);
    }

    #[test]
    fn fixed_seed_reproduces_ensemble_bitwise() {
        let vol = VolParams::reference();
        let cir = CIRParams::reference();
        let cfg = SimConfig {
            n_paths: 16,
            horizon: 0.02,
            ..base_cfg()
        };
        let a = simulate(&vol, &cir, &cfg, 0.03, YInit::Fixed(0.075)).unwrap();
        let b = simulate(&vol, &cir, &cfg, 0.03, YInit::Fixed(0.075)).unwrap();
        assert_eq!(a.discount_integrals, b.discount_integrals);
        assert_eq!(a.y_terminal, b.y_terminal);
        let other = SimConfig { seed: 43, ..cfg };
        let c = simulate(&vol, &cir, &other, 0.03, YInit::Fixed(0.075)).unwrap();
        assert_ne!(a.discount_integrals, c.discount_integrals);
    }

    #[test]
    fn stored_paths_stay_nonnegative_under_both_schemes() {
        let vol = VolParams::reference();
        let cir = CIRParams::reference();
        for scheme in [Scheme::FullTruncationEuler, Scheme::ReflectedEuler] {
            let cfg = SimConfig {
                n_paths: 8,
                horizon: 0.05,
                store_paths: true,
                scheme,
                ..base_cfg()
            };
            // Start the rate at zero to stress the boundary.
            let ens = simulate(&vol, &cir, &cfg, 0.0, YInit::Fixed(0.02)).unwrap();
            for path in ens.r_paths.iter().chain(ens.y_paths.iter()) {
                assert!(path.iter().all(|&x| x >= 0.0));
            }
            assert_eq!(ens.r_paths[0].len(), ens.times.len());
        }
    }

    #[test]
    fn risk_neutral_dispersion_premium_shifts_y_upward() {
        // lambda2 < 0 adds a positive drift to y under the pricing
        // measure, so the terminal dispersion mean must exceed the
        // physical-measure mean well beyond sampling noise.
        let vol = VolParams::reference();
        let cir = CIRParams::reference();
        let mean = |measure: Measure| -> f64 {
            let cfg = SimConfig {
                n_paths: 400,
                horizon: 0.02,
                measure,
                ..base_cfg()
            };
            let ens = simulate(&vol, &cir, &cfg, 0.03, YInit::Fixed(0.075)).unwrap();
            ens.y_terminal.iter().sum::<f64>() / ens.y_terminal.len() as f64
        };
        let physical = mean(Measure::Physical);
        let neutral = mean(Measure::RiskNeutral);
        assert!(
            neutral > physical * 1.2,
            "risk-neutral mean {neutral} vs physical {physical}"
        );
    }

    #[test]
    fn physical_terminal_ensemble_matches_stationary_law() {
        // Distributional checks need a finer substep than pricing does:
        // Euler biases the stationary variance by about half the
        // relaxation rate per substep, so push that down to 4%.
        let vol = VolParams::reference();
        let drift = clustering_drift(&vol).unwrap();
        let cir = CIRParams::reference();
        let cfg = SimConfig {
            n_paths: 2000,
            horizon: 0.02,
            measure: Measure::Physical,
            ..base_cfg()
        };
        let n_sub = (cfg.dt * vol.kappa_y / vol.epsilon / 0.04).ceil() as usize;
        let ens = simulate_with_drift(
            &drift,
            &cir,
            vol.v,
            vol.epsilon,
            n_sub,
            &cfg,
            0.03,
            YInit::Stationary(reference_density()),
        )
        .unwrap();
        let emp = empirical_density(&ens.y_terminal, reference_density()).unwrap();
        // 95% sampling threshold at n=2000 is 0.030.
        assert!(emp.ks_distance < 0.04, "KS {}", emp.ks_distance);
    }

    #[test]
    fn bond_price_rejects_physical_measure() {
        let drift = DriftSpec::linear(1.0, 0.075);
        let cfg = SimConfig {
            measure: Measure::Physical,
            n_paths: 4,
            horizon: 0.01,
            ..base_cfg()
        };
        let ens = simulate_with_drift(
            &drift,
            &CIRParams::reference(),
            0.3,
            1.0,
            1,
            &cfg,
            0.03,
            YInit::Fixed(0.075),
        )
        .unwrap();
        assert!(matches!(
            mc_bond_price(&ens),
            Err(Error::MeasureMismatch { .. })
        ));
    }

    #[test]
    fn oversized_step_rejected() {
        let vol = VolParams::reference();
        let cfg = SimConfig {
            dt: 0.01,
            ..base_cfg()
        };
        let r = simulate(&vol, &CIRParams::reference(), &cfg, 0.03, YInit::Fixed(0.075));
        assert!(matches!(r, Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn antithetic_needs_even_path_count() {
        let cfg = SimConfig {
            antithetic: true,
            n_paths: 7,
            ..base_cfg()
        };
        assert!(cfg.validate(0.01).is_err());
    }

    #[test]
    fn antithetic_estimate_consistent_with_plain() {
        let vol = VolParams::reference();
        let cir = CIRParams {
            maturity: 0.1,
            ..CIRParams::reference()
        };
        let plain_cfg = SimConfig {
            n_paths: 4000,
            ..base_cfg()
        };
        let anti_cfg = SimConfig {
            antithetic: true,
            ..plain_cfg
        };
        let plain =
            mc_bond_price(&simulate(&vol, &cir, &plain_cfg, 0.03, YInit::Fixed(0.075)).unwrap())
                .unwrap();
        let anti =
            mc_bond_price(&simulate(&vol, &cir, &anti_cfg, 0.03, YInit::Fixed(0.075)).unwrap())
                .unwrap();
        assert_eq!(anti.n_samples, 2000);
        assert!(
            (plain.price - anti.price).abs() < 4.0 * (plain.std_error + anti.std_error),
            "plain {} vs antithetic {}",
            plain.price,
            anti.price
        );
    }

    #[test]
    fn halved_step_moves_price_within_noise() {
        let vol = VolParams::reference();
        let cir = CIRParams {
            maturity: 0.25,
            ..CIRParams::reference()
        };
        let coarse = SimConfig {
            n_paths: 4000,
            horizon: 0.25,
            ..base_cfg()
        };
        let fine = SimConfig {
            dt: coarse.dt / 2.0,
            ..coarse
        };
        let pc =
            mc_bond_price(&simulate(&vol, &cir, &coarse, 0.03, YInit::Fixed(0.075)).unwrap())
                .unwrap();
        let pf = mc_bond_price(&simulate(&vol, &cir, &fine, 0.03, YInit::Fixed(0.075)).unwrap())
            .unwrap();
        assert!(
            (pc.price - pf.price).abs() < 2.0 * (pc.std_error + pf.std_error),
            "coarse {} fine {}",
            pc.price,
            pf.price
        );
    }

    #[test]
    fn inverse_cdf_sampler_passes_ks_at_theory_threshold() {
        let density = reference_density();
        let samples = stationary_y_samples(density, 10_000, 7);
        let emp = empirical_density(&samples, density).unwrap();
        // 95% two-sided threshold 1.36 / sqrt(n).
        assert!(
            emp.ks_distance <= 1.36 / (10_000f64).sqrt(),
            "KS {}",
            emp.ks_distance
        );
    }

    #[test]
    fn constant_samples_produce_large_ks() {
        let density = reference_density();
        let samples = vec![0.07; 500];
        let emp = empirical_density(&samples, density).unwrap();
        assert!(emp.ks_distance > 0.3, "KS {}", emp.ks_distance);
    }

    #[test]
    fn too_few_samples_rejected() {
        let density = reference_density();
        let samples = vec![0.05; 50];
        assert!(matches!(
            empirical_density(&samples, density),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn histogram_normalizes_to_unit_mass() {
        let density = reference_density();
        let samples = stationary_y_samples(density, 5000, 11);
        let emp = empirical_density(&samples, density).unwrap();
        let mass: f64 = emp
            .bin_densities
            .iter()
            .zip(emp.bin_edges.windows(2))
            .map(|(&d, e)| d * (e[1] - e[0]))
            .sum();
        assert!((mass - 1.0).abs() < 1e-12, "mass {mass}");
    }

    #[test]
    fn wiener_increments_uncorrelated_across_factors() {
        // Reconstruct the driving Gaussians from stored paths of a linear
        // model and check the cross correlation at the 3/sqrt(N) level.
        let drift = DriftSpec::linear(50.0, 0.075);
        let cir = CIRParams {
            lambda1: 0.0,
            lambda2: 0.0,
            ..CIRParams::reference()
        };
        let (v, eps) = (0.4, 1.0);
        let cfg = SimConfig {
            n_paths: 50,
            horizon: 0.1,
            store_paths: true,
            measure: Measure::Physical,
            ..base_cfg()
        };
        let ens =
            simulate_with_drift(&drift, &cir, v, eps, 1, &cfg, 0.03, YInit::Fixed(0.075)).unwrap();
        let dt = cfg.dt;
        let mut zy = Vec::new();
        let mut zr = Vec::new();
        for (yp, rp) in ens.y_paths.iter().zip(ens.r_paths.iter()) {
            for k in 0..yp.len() - 1 {
                let (y, r) = (yp[k], rp[k]);
                if y <= 0.0 || r <= 0.0 {
                    continue;
                }
                zy.push(
                    (yp[k + 1] - y - drift.alpha(y) / eps * dt) / (v / eps.sqrt() * y.sqrt() * dt.sqrt()),
                );
                zr.push((rp[k + 1] - r - cir.kappa * (cir.theta - r) * dt) / ((y * r * dt).sqrt()));
            }
        }
        let n = zy.len() as f64;
        let my = zy.iter().sum::<f64>() / n;
        let mr = zr.iter().sum::<f64>() / n;
        let cov: f64 = zy.iter().zip(&zr).map(|(a, b)| (a - my) * (b - mr)).sum::<f64>() / n;
        let vy: f64 = zy.iter().map(|a| (a - my) * (a - my)).sum::<f64>() / n;
        let vr: f64 = zr.iter().map(|b| (b - mr) * (b - mr)).sum::<f64>() / n;
        let corr = cov / (vy * vr).sqrt();
        assert!(corr.abs() < 3.0 / n.sqrt(), "cross correlation {corr}");
    }

    #[test]
    fn deterministic_discount_matches_ode_quadrature() {
        // v = 0 and y0 = 0 freeze the rate diffusion entirely; the
        // discount integral must match the closed-form integral of the
        // deterministic relaxation r' = kappa (theta - r).
        let drift = DriftSpec::linear(100.0, 0.0);
        let cir = CIRParams::reference();
        let cfg = SimConfig {
            n_paths: 1,
            horizon: 0.5,
            ..base_cfg()
        };
        let ens = simulate_with_drift(&drift, &cir, 0.0, 0.01, 1, &cfg, 0.08, YInit::Fixed(0.0))
            .unwrap();
        let (kappa, theta, h) = (cir.kappa, cir.theta, 0.5);
        let exact = theta * h + (0.08 - theta) * (1.0 - (-kappa * h).exp()) / kappa;
        assert!(
            (ens.discount_integrals[0] - exact).abs() < 1e-5,
            "trapezoid {} vs exact {exact}",
            ens.discount_integrals[0]
        );
    }

    #[test]
    fn sim_config_serializes_with_kebab_case_enums() {
        let cfg = base_cfg();
        let json = serde_json::to_value(cfg).unwrap();
        assert_eq!(json["measure"], "risk-neutral");
        assert_eq!(json["scheme"], "full-truncation-euler");
        let back: SimConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
    }
}
