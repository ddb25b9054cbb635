//! Windowed dispersion estimation and clustering diagnostics.
//!
//! On business-day short-rate data the one-factor CIR increment model
//!
//!   dr_i ~ kappa (theta - r_i) dt + sqrt(sigma^2 r_i dt) Z_i
//!
//! admits a closed-form windowed quasi-likelihood estimate of sigma^2:
//! per window the drift pair (kappa theta, -kappa) is profiled out by
//! weighted least squares with weights 1/(r_i dt), and the dispersion is
//! the weighted residual mean square. When the generating process is the
//! two-factor clustering model, the window estimates inherit the hidden
//! dispersion's regime structure, and a kernel density estimate over the
//! windows shows two local maxima instead of one.
//!
//! The estimator deliberately divides residuals by n - 2, not n: two
//! drift parameters are fitted per window, and on 20-observation windows
//! the uncorrected divisor biases every estimate down by about ten
//! percent, which a ground-truth recovery check at the ten-percent level
//! would misread as model error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::CIRParams;
use crate::mcsim::{simulate_with_drift, Measure, Scheme, SimConfig, YInit};
use crate::volprocess::{clustering_drift, stationary_density, DriftSpec, GridConfig, VolParams};

/// Observations per business day-count year.
pub const TRADING_DAYS: f64 = 252.0;

/// Rates below this are excluded from the weighted fit; windows keeping
/// fewer than [`MIN_WINDOW_INCREMENTS`] increments are dropped.
const RATE_FLOOR: f64 = 1e-8;
const MIN_WINDOW_INCREMENTS: usize = 5;

/// Bandwidth floor of the kernel density estimate.
const KDE_BANDWIDTH_FLOOR: f64 = 1e-6;
/// Evaluation grid points of the kernel density estimate.
const KDE_GRID_POINTS: usize = 1024;
/// Grid halo in bandwidths beyond the extreme estimates. Six bandwidths
/// keep the truncated Gaussian mass below 1e-9 per kernel, so the curve
/// integrates to one at the 1e-6 level.
const KDE_HALO: f64 = 6.0;

// ---------------------------------------------------------------------------
// Series
// ---------------------------------------------------------------------------

/// Provenance of a rate series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeriesSource {
    Synthetic,
    Csv,
}

/// A short-rate time series on (near-)uniform business-day spacing.
#[derive(Debug, Clone, Serialize)]
pub struct RateSeries {
    /// Times in year fractions, strictly increasing.
    pub timestamps: Vec<f64>,
    /// Nonnegative short-rate observations.
    pub rates: Vec<f64>,
    pub source: SeriesSource,
    /// Generating dispersion path, retained by the synthetic generator
    /// for ground-truth comparisons; absent for loaded data.
    pub hidden_y: Option<Vec<f64>>,
}

impl RateSeries {
    /// Observation count.
    pub fn len(&self) -> usize {
        self.rates.len()
    }

    /// True when the series holds no observations.
    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Median observation spacing in years.
    pub fn delta_t(&self) -> f64 {
        let mut gaps: Vec<f64> = self.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_by(|a, b| a.partial_cmp(b).expect("non-finite timestamp gap"));
        gaps[gaps.len() / 2]
    }

    /// Validate monotonicity and nonnegativity.
    pub fn validate(&self) -> Result<()> {
        if self.timestamps.len() != self.rates.len() {
            return Err(Error::param(
                "series",
                "timestamp and rate lengths differ",
                self.timestamps.len() as f64,
            ));
        }
        if self.len() < 2 {
            return Err(Error::InsufficientData {
                context: "rate series",
                needed: 2,
                available: self.len(),
            });
        }
        for (i, w) in self.timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::NonmonotoneTimestamps {
                    line: i + 2,
                    t: w[1],
                    prev: w[0],
                });
            }
        }
        if let Some((i, &r)) = self.rates.iter().enumerate().find(|(_, &r)| r < 0.0) {
            return Err(Error::NegativeRate { line: i + 1, rate: r });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Generate a business-day series from the clustering model under the
/// physical measure: one simulated path sampled every 1/252 year, with
/// the initial dispersion drawn from the stationary law. The hidden
/// dispersion path is kept alongside the rates.
pub fn synth_series(
    vol: &VolParams,
    cir: &CIRParams,
    days: usize,
    dt: f64,
    seed: u64,
) -> Result<RateSeries> {
    vol.validate()?;
    let drift = clustering_drift(vol)?;
    let density = stationary_density(&drift, vol.v, &GridConfig::for_params(vol))?;
    let fast_rate = vol.kappa_y / vol.epsilon;
    let n_sub = ((dt * fast_rate / 0.2).ceil() as usize).max(1);
    synth_series_with(
        &drift,
        vol.v,
        vol.epsilon,
        n_sub,
        YInit::Stationary(&density),
        cir,
        days,
        dt,
        seed,
    )
}

/// Synthetic generator with explicit dynamics, used both by
/// [`synth_series`] and by constant-dispersion controls (v = 0 with the
/// dispersion pinned by a linear drift).
#[allow(clippy::too_many_arguments)]
pub fn synth_series_with(
    drift: &DriftSpec,
    v: f64,
    epsilon: f64,
    n_substeps: usize,
    y0: YInit,
    cir: &CIRParams,
    days: usize,
    dt: f64,
    seed: u64,
) -> Result<RateSeries> {
    if days < 2 {
        return Err(Error::InsufficientData {
            context: "synthetic series",
            needed: 2,
            available: days,
        });
    }
    let day = 1.0 / TRADING_DAYS;
    let stride = (day / dt).round() as usize;
    if stride == 0 || (stride as f64 * dt - day).abs() > 1e-9 * day {
        return Err(Error::param(
            "dt",
            "must divide the business day 1/252",
            dt,
        ));
    }
    let cfg = SimConfig {
        dt,
        n_paths: 1,
        horizon: days as f64 * day,
        seed,
        measure: Measure::Physical,
        scheme: Scheme::FullTruncationEuler,
        store_paths: true,
        antithetic: false,
    };
    let ens = simulate_with_drift(drift, cir, v, epsilon, n_substeps, &cfg, cir.theta, y0)?;
    let r_path = &ens.r_paths[0];
    let y_path = &ens.y_paths[0];
    let mut timestamps = Vec::with_capacity(days + 1);
    let mut rates = Vec::with_capacity(days + 1);
    let mut hidden = Vec::with_capacity(days + 1);
    for i in 0..=days {
        timestamps.push(i as f64 * day);
        rates.push(r_path[i * stride]);
        hidden.push(y_path[i * stride]);
    }
    Ok(RateSeries {
        timestamps,
        rates,
        source: SeriesSource::Synthetic,
        hidden_y: Some(hidden),
    })
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

/// Load a two-column (timestamp-or-date, rate) CSV. A non-numeric first
/// data row is treated as a header and skipped. Numeric first columns
/// are used as timestamps directly; ISO dates (YYYY-MM-DD) are mapped to
/// consecutive business-day fractions, with the date order validated.
pub fn load_csv(path: &Path) -> Result<RateSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::CsvParse {
            line: 0,
            reason: e.to_string(),
        })?;
    let mut timestamps = Vec::new();
    let mut rates = Vec::new();
    let mut prev_date: Option<(i64, u32, u32)> = None;
    let mut row_index = 0usize;
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::CsvParse {
            line,
            reason: e.to_string(),
        })?;
        if record.len() < 2 {
            return Err(Error::CsvParse {
                line,
                reason: format!("expected 2 columns, found {}", record.len()),
            });
        }
        let rate_txt = &record[1];
        let rate: f64 = match rate_txt.parse() {
            Ok(v) => v,
            Err(_) if idx == 0 => continue, // header row
            Err(_) => {
                return Err(Error::CsvParse {
                    line,
                    reason: format!("rate column is not a number: `{rate_txt}`"),
                })
            }
        };
        if rate < 0.0 {
            return Err(Error::NegativeRate { line, rate });
        }
        let time_txt = &record[0];
        let t = if let Ok(v) = time_txt.parse::<f64>() {
            if let Some(&prev) = timestamps.last() {
                if v <= prev {
                    return Err(Error::NonmonotoneTimestamps { line, t: v, prev });
                }
            }
            v
        } else {
            let date = parse_iso_date(time_txt).ok_or_else(|| Error::CsvParse {
                line,
                reason: format!("first column is neither a number nor YYYY-MM-DD: `{time_txt}`"),
            })?;
            if let Some(prev) = prev_date {
                if date <= prev {
                    return Err(Error::NonmonotoneTimestamps {
                        line,
                        t: row_index as f64 / TRADING_DAYS,
                        prev: (row_index as f64 - 1.0) / TRADING_DAYS,
                    });
                }
            }
            prev_date = Some(date);
            row_index as f64 / TRADING_DAYS
        };
        timestamps.push(t);
        rates.push(rate);
        row_index += 1;
    }
    let series = RateSeries {
        timestamps,
        rates,
        source: SeriesSource::Csv,
        hidden_y: None,
    };
    series.validate()?;
    Ok(series)
}

fn parse_iso_date(text: &str) -> Option<(i64, u32, u32)> {
    let mut parts = text.split('-');
    let year: i64 = parts.next()?.parse().ok()?;
    let month: u32 = parts.next()?.parse().ok()?;
    let day: u32 = parts.next()?.parse().ok()?;
    if parts.next().is_some() || !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return None;
    }
    Some((year, month, day))
}

// ---------------------------------------------------------------------------
// Windowed dispersion estimation
// ---------------------------------------------------------------------------

/// Per-window dispersion estimates over consecutive non-overlapping
/// windows of `window_length` observations.
#[derive(Debug, Clone, Serialize)]
pub struct DispersionEstimates {
    /// Index of the first observation of each retained window.
    pub window_starts: Vec<usize>,
    /// Weighted residual mean squares, one per retained window.
    pub sigma2_hats: Vec<f64>,
    pub window_length: usize,
}

/// Windowed quasi-likelihood dispersion estimation. Each window fits
/// (c1, c2) = (kappa theta, -kappa) by least squares of the scaled
/// increments s_i = dr_i / dt on (1, r_i) with weights 1/r_i and reports
///
///   sigma2_hat = dt / (n - 2) * sum (s_i - c1 - c2 r_i)^2 / r_i.
///
/// Observations below 1e-8 are excluded from the fit; windows left with
/// fewer than five usable increments are dropped.
///
/// Short windows carry a systematic downward attenuation beyond the
/// explicit n - 2 degree-of-freedom correction: the regressor r_i is
/// driven by the same shocks as the residuals, so the per-window drift
/// fit absorbs part of the diffusion variance. At daily sampling with
/// the reference mean-reversion speed the measured effect is close to
/// -1.6 / n relative (about -8% for 20-observation windows, -4% for 40).
/// Regime detection is unaffected because every window is attenuated by
/// the same factor; for level-accurate dispersion readings prefer longer
/// windows when the data allow it.
pub fn mle_dispersion(series: &RateSeries, window: usize) -> Result<DispersionEstimates> {
    series.validate()?;
    if window < MIN_WINDOW_INCREMENTS {
        return Err(Error::param(
            "window",
            "must contain at least 5 observations",
            window as f64,
        ));
    }
    if series.len() < window {
        return Err(Error::InsufficientData {
            context: "mle_dispersion",
            needed: window,
            available: series.len(),
        });
    }
    let dt = series.delta_t();
    let mut window_starts = Vec::new();
    let mut sigma2_hats = Vec::new();
    let mut start = 0usize;
    while start + window <= series.len() {
        if let Some(s2) = window_estimate(&series.rates[start..start + window], dt) {
            window_starts.push(start);
            sigma2_hats.push(s2);
        }
        start += window;
    }
    if sigma2_hats.is_empty() {
        return Err(Error::InsufficientData {
            context: "mle_dispersion: every window dropped by the zero-rate guard",
            needed: 1,
            available: 0,
        });
    }
    Ok(DispersionEstimates {
        window_starts,
        sigma2_hats,
        window_length: window,
    })
}

/// One window: profile the drift by weighted least squares, return the
/// dispersion estimate, or None when too few usable increments remain.
fn window_estimate(rates: &[f64], dt: f64) -> Option<f64> {
    let mut xs = Vec::with_capacity(rates.len() - 1);
    let mut ss = Vec::with_capacity(rates.len() - 1);
    for i in 0..rates.len() - 1 {
        if rates[i] >= RATE_FLOOR {
            xs.push(rates[i]);
            ss.push((rates[i + 1] - rates[i]) / dt);
        }
    }
    let n = xs.len();
    if n < MIN_WINDOW_INCREMENTS {
        return None;
    }
    // Weighted normal equations for s ~ c1 + c2 x, weights 1/x.
    let s0: f64 = xs.iter().map(|&x| 1.0 / x).sum();
    let s1 = n as f64;
    let s2: f64 = xs.iter().sum();
    let t0: f64 = xs.iter().zip(&ss).map(|(&x, &s)| s / x).sum();
    let t1: f64 = ss.iter().sum();
    let det = s0 * s2 - s1 * s1;
    let (c1, c2, dof) = if det.abs() > 1e-12 * s0 * s2 {
        (
            (t0 * s2 - t1 * s1) / det,
            (s0 * t1 - s1 * t0) / det,
            (n - 2) as f64,
        )
    } else {
        // Degenerate design (all rates equal): fit the constant only.
        (t0 / s0, 0.0, (n - 1) as f64)
    };
    let rss: f64 = xs
        .iter()
        .zip(&ss)
        .map(|(&x, &s)| {
            let e = s - c1 - c2 * x;
            e * e / x
        })
        .sum();
    Some(dt * rss / dof)
}

// ---------------------------------------------------------------------------
// Kernel density estimation
// ---------------------------------------------------------------------------

/// Gaussian kernel density estimate on a uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct KdeCurve {
    pub xs: Vec<f64>,
    pub densities: Vec<f64>,
    pub bandwidth: f64,
}

/// Gaussian KDE with Silverman's bandwidth
/// h = 0.9 min(sd, IQR/1.34) n^(-1/5), floored at 1e-6, evaluated on a
/// uniform grid spanning the estimates plus six bandwidths on each side.
pub fn kde(estimates: &[f64]) -> Result<KdeCurve> {
    const MIN_ESTIMATES: usize = 10;
    if estimates.len() < MIN_ESTIMATES {
        return Err(Error::InsufficientData {
            context: "kde",
            needed: MIN_ESTIMATES,
            available: estimates.len(),
        });
    }
    let n = estimates.len();
    let mean = estimates.iter().sum::<f64>() / n as f64;
    let var = estimates.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let mut sorted = estimates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite estimate"));
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bandwidth = (0.9 * spread * (n as f64).powf(-0.2)).max(KDE_BANDWIDTH_FLOOR);

    let lo = sorted[0] - KDE_HALO * bandwidth;
    let hi = sorted[n - 1] + KDE_HALO * bandwidth;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let norm = 1.0 / (n as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let xs: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + i as f64 * step).collect();
    let densities: Vec<f64> = xs
        .iter()
        .map(|&x| {
            norm * sorted
                .iter()
                .map(|&xi| {
                    let z = (x - xi) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect();
    Ok(KdeCurve {
        xs,
        densities,
        bandwidth,
    })
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let w = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - w) + sorted[i + 1] * w
    } else {
        sorted[i]
    }
}

impl KdeCurve {
    /// Trapezoid mass of the curve over its grid.
    pub fn total_mass(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.densities.windows(2))
            .map(|(x, d)| 0.5 * (d[0] + d[1]) * (x[1] - x[0]))
            .sum()
    }

    /// Count strict interior local maxima; plateaus of equal values
    /// collapse to a single candidate judged by their neighbors.
    pub fn local_maxima(&self) -> usize {
        let d = &self.densities;
        let mut count = 0usize;
        let mut i = 1usize;
        while i + 1 < d.len() {
            if d[i] > d[i - 1] {
                // Walk across any plateau at this height.
                let mut j = i;
                while j + 1 < d.len() && d[j + 1] == d[i] {
                    j += 1;
                }
                if j + 1 < d.len() && d[j + 1] < d[i] {
                    count += 1;
                }
                i = j + 1;
            } else {
                i += 1;
            }
        }
        count
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
