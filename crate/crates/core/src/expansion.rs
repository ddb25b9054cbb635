//! Singular-perturbation expansion of the zero-coupon bond price.
//!
//! With the fast dispersion averaged out, prices expand as
//! P ~ P0 + sqrt(eps) P1 + eps (barP2 + tildeP2), where
//!
//! - P0(t, r) = A0(t) exp(-B(t) r) is the one-factor CIR price at the
//!   averaged dispersion sigma^2,
//! - P1(t, r) = (A10 + A11 r) exp(-B r) solves the averaged equation with
//!   source K1 f(t) r exp(-B r), K1 = (2 lambda2 / v) D,
//! - barP2(t, r) = (A20 + A21 r + A22 r^2) exp(-B r) absorbs the averaged
//!   second-order sources, and tildeP2(t, r, y) is the zero-mean
//!   fluctuation -(2/v^2) f(t) r exp(-B r) (Int_0^y H - K2).
//!
//! All coefficient ODEs are integrated backward in tau = T - t. The
//! second-order system is obtained by substituting the quadratic ansatz
//! into the averaged operator and matching powers of r; because that step
//! is easy to get wrong, construction always verifies itself against
//! finite-difference and quadrature cross-checks and refuses to hand out
//! coefficients that fail them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::interp::CubicHermite;
use crate::ode::{integrate_on_grid_tol, GridSolution};
use crate::quad::integrate_tol;
use crate::volprocess::{moments, DriftSpec, GridConfig, HKernel, MomentSet};

/// Number of backward time nodes used by default (spec floor is 400).
const DEFAULT_TIME_NODES: usize = 801;

/// Tolerances of the backward coefficient integration.
const ODE_ABS_TOL: f64 = 1e-12;
const ODE_REL_TOL: f64 = 1e-11;

/// Built-in gate thresholds: construction aborts beyond these.
const RICCATI_GATE: f64 = 1e-8;
const P1_RESIDUAL_GATE: f64 = 1e-5;
const RHS_CROSSCHECK_GATE: f64 = 1e-6;
const BARP2_RESIDUAL_GATE: f64 = 1e-4;

// ---------------------------------------------------------------------------
// Parameters and the leading order
// ---------------------------------------------------------------------------

/// Short-rate dynamics and market-price-of-risk parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CIRParams {
    /// Mean-reversion speed of the short rate.
    pub kappa: f64,
    /// Long-term rate level.
    pub theta: f64,
    /// Market price of short-rate risk (scales sqrt(r) sqrt(y)).
    pub lambda1: f64,
    /// Market price of dispersion risk (scales sqrt(y)).
    pub lambda2: f64,
    /// Bond maturity T.
    pub maturity: f64,
}

impl CIRParams {
    /// Reference parameter set: kappa=5, theta=0.03, lambda1=-1,
    /// lambda2=-100, maturity 1.
    pub fn reference() -> Self {
        CIRParams {
            kappa: 5.0,
            theta: 0.03,
            lambda1: -1.0,
            lambda2: -100.0,
            maturity: 1.0,
        }
    }

    /// Validate positivity of kappa, theta, and maturity.
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::param("kappa", "must be positive", self.kappa));
        }
        if !(self.theta > 0.0) {
            return Err(Error::param("theta", "must be positive", self.theta));
        }
        if !(self.maturity > 0.0) {
            return Err(Error::param("maturity", "must be positive", self.maturity));
        }
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::param(
                "lambda",
                "market prices of risk must be finite",
                self.lambda1,
            ));
        }
        Ok(())
    }
}

/// Closed-form leading order: the classical CIR bond price at the averaged
/// dispersion, P0(t, r) = A0(tau) exp(-B(tau) r) with tau = T - t and
///
///   psi = kappa + lambda1 sigma^2,  phi = sqrt(psi^2 + 2 sigma^2),
///   B(tau) = 2 (e^{phi tau} - 1) / ((phi + psi)(e^{phi tau} - 1) + 2 phi),
///   A0(tau) = [2 phi e^{(phi+psi) tau / 2} / ((phi+psi)(e^{phi tau}-1)+2 phi)]^{2 kappa theta / sigma^2}.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LeadingOrder {
    cir: CIRParams,
    sigma2: f64,
    psi: f64,
    phi: f64,
}

/// Build the closed-form leading order for a given averaged dispersion.
pub fn closed_form_p0(cir: &CIRParams, sigma2: f64) -> Result<LeadingOrder> {
    cir.validate()?;
    if !(sigma2 > 0.0) {
        return Err(Error::param("sigma2", "must be positive", sigma2));
    }
    let psi = cir.kappa + cir.lambda1 * sigma2;
    let phi = (psi * psi + 2.0 * sigma2).sqrt();
    Ok(LeadingOrder {
        cir: *cir,
        sigma2,
        psi,
        phi,
    })
}

impl LeadingOrder {
    /// Averaged dispersion the leading order was built at.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Underlying short-rate parameters.
    pub fn cir(&self) -> &CIRParams {
        &self.cir
    }

    /// Duration factor B as a function of time to maturity.
    pub fn b_tau(&self, tau: f64) -> f64 {
        let (phi, psi) = (self.phi, self.psi);
        if phi * tau > 350.0 {
            // e^{phi tau} dominates both numerator and denominator.
            return 2.0 / (phi + psi);
        }
        let em = (phi * tau).exp_m1();
        2.0 * em / ((phi + psi) * em + 2.0 * phi)
    }

    /// ln A0 as a function of time to maturity (kept in logs so large
    /// maturities cannot overflow).
    pub fn ln_a0_tau(&self, tau: f64) -> f64 {
        let (phi, psi) = (self.phi, self.psi);
        let exponent = 2.0 * self.cir.kappa * self.cir.theta / self.sigma2;
        let ln_den = if phi * tau > 350.0 {
            (phi + psi).ln() + phi * tau
        } else {
            ((phi + psi) * (phi * tau).exp_m1() + 2.0 * phi).ln()
        };
        exponent * ((2.0 * phi).ln() + 0.5 * (phi + psi) * tau - ln_den)
    }

    /// A0 as a function of time to maturity.
    pub fn a0_tau(&self, tau: f64) -> f64 {
        self.ln_a0_tau(tau).exp()
    }

    /// Riccati source factor q = lambda1 B + B^2 / 2.
    pub fn q_tau(&self, tau: f64) -> f64 {
        let b = self.b_tau(tau);
        self.cir.lambda1 * b + 0.5 * b * b
    }

    /// Source amplitude f = (lambda1 B + B^2/2) A0 of all corrections.
    pub fn f_tau(&self, tau: f64) -> f64 {
        self.q_tau(tau) * self.a0_tau(tau)
    }

    /// dB/dt along calendar time: psi B + (sigma^2/2) B^2 - 1.
    pub fn db_dt_tau(&self, tau: f64) -> f64 {
        let b = self.b_tau(tau);
        self.psi * b + 0.5 * self.sigma2 * b * b - 1.0
    }

    /// df/dt along calendar time, from the A0 and B Riccati equations.
    pub fn df_dt_tau(&self, tau: f64) -> f64 {
        let b = self.b_tau(tau);
        let a0 = self.a0_tau(tau);
        let db = self.db_dt_tau(tau);
        let q = self.cir.lambda1 * b + 0.5 * b * b;
        a0 * ((self.cir.lambda1 + b) * db + q * self.cir.kappa * self.cir.theta * b)
    }

    /// Leading-order price P0(t, r).
    pub fn price(&self, t: f64, r: f64) -> f64 {
        let tau = self.cir.maturity - t;
        (self.ln_a0_tau(tau) - self.b_tau(tau) * r).exp()
    }
}

// ---------------------------------------------------------------------------
// Expansion coefficients
// ---------------------------------------------------------------------------

/// Tabulated coefficient functions of the expansion together with the
/// moment constants that produced them. Construction performs the
/// Riccati, first-order, source-assembly, and second-order residual gates
/// and fails rather than return coefficients that do not satisfy them.
#[derive(Debug, Clone)]
pub struct ExpansionCoeffs {
    lead: LeadingOrder,
    moments: MomentSet,
    v: f64,
    k1: f64,
    tau_grid: Vec<f64>,
    a10: CubicHermite,
    a11: CubicHermite,
    a20: CubicHermite,
    a21: CubicHermite,
    a22: CubicHermite,
}

impl Serialize for ExpansionCoeffs {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("ExpansionCoeffs", 12)?;
        let t = self.lead.cir.maturity;
        let time_grid: Vec<f64> = self.tau_grid.iter().map(|&tau| t - tau).collect();
        let a0: Vec<f64> = self.tau_grid.iter().map(|&tau| self.lead.a0_tau(tau)).collect();
        let b: Vec<f64> = self.tau_grid.iter().map(|&tau| self.lead.b_tau(tau)).collect();
        let f: Vec<f64> = self.tau_grid.iter().map(|&tau| self.lead.f_tau(tau)).collect();
        s.serialize_field("time_grid", &time_grid)?;
        s.serialize_field("A0", &a0)?;
        s.serialize_field("B", &b)?;
        s.serialize_field("f", &f)?;
        s.serialize_field("A10", self.a10.values())?;
        s.serialize_field("A11", self.a11.values())?;
        s.serialize_field("A20", self.a20.values())?;
        s.serialize_field("A21", self.a21.values())?;
        s.serialize_field("A22", self.a22.values())?;
        s.serialize_field("moments", &self.moments)?;
        s.serialize_field("K1", &self.k1)?;
        s.serialize_field("v", &self.v)?;
        s.end()
    }
}

fn hermite_component(grid: &[f64], sol: &GridSolution, j: usize) -> CubicHermite {
    CubicHermite::new(
        grid.to_vec(),
        sol.values.iter().map(|s| s[j]).collect(),
        sol.slopes.iter().map(|s| s[j]).collect(),
    )
}

impl ExpansionCoeffs {
    /// Build with the default time resolution.
    pub fn build(cir: &CIRParams, momset: &MomentSet, kernel: &HKernel, v: f64) -> Result<Self> {
        Self::build_with_nodes(cir, momset, kernel, v, DEFAULT_TIME_NODES)
    }

    /// Build the coefficient tables on `n_nodes` backward time nodes
    /// (at least 401), running all construction gates.
    pub fn build_with_nodes(
        cir: &CIRParams,
        momset: &MomentSet,
        kernel: &HKernel,
        v: f64,
        n_nodes: usize,
    ) -> Result<Self> {
        cir.validate()?;
        if !(v > 0.0) {
            return Err(Error::param("v", "must be positive", v));
        }
        if n_nodes < 401 {
            return Err(Error::GridTooCoarse {
                needed: 401,
                available: n_nodes,
            });
        }
        let lead = closed_form_p0(cir, momset.sigma2)?;
        let t_mat = cir.maturity;
        let tau_grid: Vec<f64> = (0..n_nodes)
            .map(|i| t_mat * i as f64 / (n_nodes - 1) as f64)
            .collect();

        // Gate 1: closed-form A0 and B against backward Runge-Kutta.
        let (kappa, theta) = (cir.kappa, cir.theta);
        let (psi, sigma2) = (lead.psi, lead.sigma2);
        let riccati = integrate_on_grid_tol(
            |_, s, out| {
                out[0] = 1.0 - psi * s[0] - 0.5 * sigma2 * s[0] * s[0];
                out[1] = -kappa * theta * s[0] * s[1];
            },
            &tau_grid,
            &[0.0, 1.0],
            ODE_ABS_TOL,
            ODE_REL_TOL,
        )?;
        let mut worst = 0.0f64;
        for (i, &tau) in tau_grid.iter().enumerate() {
            worst = worst.max((riccati.values[i][0] - lead.b_tau(tau)).abs());
            worst = worst.max((riccati.values[i][1] - lead.a0_tau(tau)).abs());
        }
        if worst > RICCATI_GATE {
            return Err(Error::ResidualCheckFailure {
                check: "closed-form A0/B vs Runge-Kutta",
                residual: worst,
                tolerance: RICCATI_GATE,
            });
        }

        // First-order coefficients. In calendar time the averaged equation
        // forces A11' = (psi + kappa theta B + sigma^2 B) A11 + K1 f and
        // A10' = kappa theta (B A10 - A11); integrating in tau = T - t
        // flips the signs and starts both at zero.
        let k1 = momset.k1(cir.lambda2, v);
        let lead_c = lead;
        let p1_sol = integrate_on_grid_tol(
            |tau, s, out| {
                let b = lead_c.b_tau(tau);
                let f = lead_c.f_tau(tau);
                out[0] = -((psi + kappa * theta * b + sigma2 * b) * s[0] + k1 * f);
                out[1] = kappa * theta * (s[0] - b * s[1]);
            },
            &tau_grid,
            &[0.0, 0.0],
            ODE_ABS_TOL,
            ODE_REL_TOL,
        )?;
        let a11 = hermite_component(&tau_grid, &p1_sol, 0);
        let a10 = hermite_component(&tau_grid, &p1_sol, 1);

        // Second-order averaged system. Calendar time:
        //   A22' = (2 psi + kappa theta B + 2 sigma^2 B) A22 + c,
        //   A21' = (psi + kappa theta B + sigma^2 B) A21
        //          - (2 kappa theta + sigma^2) A22 + b,
        //   A20' = kappa theta (B A20 - A21) + a,
        // flipped for tau; see `rhs_abc` for the sources a, b, c.
        let partial = ExpansionCoeffs {
            lead,
            moments: *momset,
            v,
            k1,
            tau_grid: tau_grid.clone(),
            a10: a10.clone(),
            a11: a11.clone(),
            a20: CubicHermite::new(vec![0.0, t_mat], vec![0.0, 0.0], vec![0.0, 0.0]),
            a21: CubicHermite::new(vec![0.0, t_mat], vec![0.0, 0.0], vec![0.0, 0.0]),
            a22: CubicHermite::new(vec![0.0, t_mat], vec![0.0, 0.0], vec![0.0, 0.0]),
        };

        // Gate 2: the first-order PDE residual by finite differences.
        let p1_res = partial.p1_fd_residual(20, 20)?;
        if p1_res > P1_RESIDUAL_GATE {
            return Err(Error::ResidualCheckFailure {
                check: "first-order PDE residual",
                residual: p1_res,
                tolerance: P1_RESIDUAL_GATE,
            });
        }

        // Gate 3: symbolic (a, b, c) against quadrature + finite differences.
        let rhs_dev = partial.rhs_fd_crosscheck(kernel, 20)?;
        if rhs_dev > RHS_CROSSCHECK_GATE {
            return Err(Error::ResidualCheckFailure {
                check: "second-order source assembly",
                residual: rhs_dev,
                tolerance: RHS_CROSSCHECK_GATE,
            });
        }

        let partial_c = partial.clone();
        let p2_sol = integrate_on_grid_tol(
            |tau, s, out| {
                let b = lead_c.b_tau(tau);
                let (a_src, b_src, c_src) = partial_c.rhs_abc(tau);
                // s = [A22, A21, A20]; calendar-time signs flipped for tau.
                out[0] = -(2.0 * psi + kappa * theta * b + 2.0 * sigma2 * b) * s[0] - c_src;
                out[1] = -(psi + kappa * theta * b + sigma2 * b) * s[1]
                    + (2.0 * kappa * theta + sigma2) * s[0]
                    - b_src;
                out[2] = kappa * theta * (s[1] - b * s[2]) - a_src;
            },
            &tau_grid,
            &[0.0, 0.0, 0.0],
            ODE_ABS_TOL,
            ODE_REL_TOL,
        )?;
        let full = ExpansionCoeffs {
            a22: hermite_component(&tau_grid, &p2_sol, 0),
            a21: hermite_component(&tau_grid, &p2_sol, 1),
            a20: hermite_component(&tau_grid, &p2_sol, 2),
            ..partial
        };

        // Gate 4: the derived second-order system against the averaged
        // operator applied by finite differences.
        let bar_res = full.barp2_fd_residual(20, 20)?;
        if bar_res > BARP2_RESIDUAL_GATE {
            return Err(Error::ResidualCheckFailure {
                check: "second-order averaged PDE residual",
                residual: bar_res,
                tolerance: BARP2_RESIDUAL_GATE,
            });
        }
        Ok(full)
    }

    /// Closed-form leading order.
    pub fn lead(&self) -> &LeadingOrder {
        &self.lead
    }

    /// Moment constants used in construction.
    pub fn moments(&self) -> &MomentSet {
        &self.moments
    }

    /// First-order constant K1 = (2 lambda2 / v) D.
    pub fn k1(&self) -> f64 {
        self.k1
    }

    /// Volatility-of-dispersion coefficient.
    pub fn v(&self) -> f64 {
        self.v
    }

    /// Bond maturity.
    pub fn maturity(&self) -> f64 {
        self.lead.cir.maturity
    }

    /// Backward time grid (tau = T - t, ascending).
    pub fn tau_grid(&self) -> &[f64] {
        &self.tau_grid
    }

    /// First-order coefficients at a given time to maturity.
    pub fn a10_tau(&self, tau: f64) -> f64 {
        self.a10.eval(tau)
    }

    /// See [`ExpansionCoeffs::a10_tau`].
    pub fn a11_tau(&self, tau: f64) -> f64 {
        self.a11.eval(tau)
    }

    /// Second-order averaged coefficients at a given time to maturity.
    pub fn a20_tau(&self, tau: f64) -> f64 {
        self.a20.eval(tau)
    }

    /// See [`ExpansionCoeffs::a20_tau`].
    pub fn a21_tau(&self, tau: f64) -> f64 {
        self.a21.eval(tau)
    }

    /// See [`ExpansionCoeffs::a20_tau`].
    pub fn a22_tau(&self, tau: f64) -> f64 {
        self.a22.eval(tau)
    }

    /// First correction P1(t, r) = (A10 + A11 r) e^{-B r}.
    pub fn p1(&self, t: f64, r: f64) -> f64 {
        let tau = self.lead.cir.maturity - t;
        (self.a10.eval(tau) + self.a11.eval(tau) * r) * (-self.lead.b_tau(tau) * r).exp()
    }

    /// Averaged second correction barP2(t, r) = (A20 + A21 r + A22 r^2) e^{-B r}.
    pub fn bar_p2(&self, t: f64, r: f64) -> f64 {
        let tau = self.lead.cir.maturity - t;
        let q = self.a20.eval(tau) + self.a21.eval(tau) * r + self.a22.eval(tau) * r * r;
        q * (-self.lead.b_tau(tau) * r).exp()
    }

    /// Source coefficients (a, b, c) of the averaged second-order equation
    /// <L2> barP2 = (a + b r + c r^2) e^{-B r}, assembled from
    ///
    ///   -<L2 tildeP2> = (2/v^2) K4 f [-(lambda1 + B) r + q r^2] e^{-B r},
    ///   -<L1 P3> = Lam [ (Lam K3 + K1 sigma^2) f r
    ///              + D (q A10 - (lambda1 + B) A11) r + D q A11 r^2 ] e^{-B r},
    ///
    /// with Lam = 2 lambda2 / v and q = lambda1 B + B^2/2. The expansion of
    /// the r-derivatives leaves no r^0 term: every contribution carries the
    /// overall factor r.
    pub fn rhs_abc(&self, tau: f64) -> (f64, f64, f64) {
        let lam = 2.0 * self.lead.cir.lambda2 / self.v;
        let g = 2.0 / (self.v * self.v);
        let b_dur = self.lead.b_tau(tau);
        let f = self.lead.f_tau(tau);
        let q = self.lead.q_tau(tau);
        let l1 = self.lead.cir.lambda1;
        let m = &self.moments;
        let a10 = self.a10.eval(tau);
        let a11 = self.a11.eval(tau);

        let a_src = 0.0;
        let b_src = -g * m.k4 * f * (l1 + b_dur)
            + lam * ((lam * m.k3 + self.k1 * m.sigma2) * f
                + m.d * (q * a10 - (l1 + b_dur) * a11));
        let c_src = g * m.k4 * f * q + lam * m.d * q * a11;
        (a_src, b_src, c_src)
    }

    /// Sup-relative finite-difference residual of the first-order equation
    /// <L2> P1 = K1 f r e^{-B r} over an (nt x nr) interior grid,
    /// normalized by the sup of the right-hand side.
    pub fn p1_fd_residual(&self, nt: usize, nr: usize) -> Result<f64> {
        self.averaged_fd_residual(nt, nr, |t, r| self.p1(t, r), |tau, r| {
            let b = self.lead.b_tau(tau);
            self.k1 * self.lead.f_tau(tau) * r * (-b * r).exp()
        })
    }

    /// Sup-relative finite-difference residual of the second-order averaged
    /// equation <L2> barP2 = (a + b r + c r^2) e^{-B r}.
    pub fn barp2_fd_residual(&self, nt: usize, nr: usize) -> Result<f64> {
        self.averaged_fd_residual(nt, nr, |t, r| self.bar_p2(t, r), |tau, r| {
            let (a, b, c) = self.rhs_abc(tau);
            (a + b * r + c * r * r) * (-self.lead.b_tau(tau) * r).exp()
        })
    }

    /// Shared helper: apply <L2> to `field` by central differences on an
    /// interior (t, r) lattice and compare with `rhs(tau, r)`.
    fn averaged_fd_residual<F, R>(&self, nt: usize, nr: usize, field: F, rhs: R) -> Result<f64>
    where
        F: Fn(f64, f64) -> f64,
        R: Fn(f64, f64) -> f64,
    {
        if nt < 2 || nr < 2 {
            return Err(Error::GridTooCoarse {
                needed: 2,
                available: nt.min(nr),
            });
        }
        let t_mat = self.lead.cir.maturity;
        let (kappa, theta) = (self.lead.cir.kappa, self.lead.cir.theta);
        let l1 = self.lead.cir.lambda1;
        let sigma2 = self.lead.sigma2;
        let ht = (1e-5 * t_mat).min(0.02 * t_mat);
        let hr = 1e-3;
        let mut sup_dev = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..nt {
            let t = t_mat * (0.05 + 0.90 * i as f64 / (nt - 1) as f64);
            let tau = t_mat - t;
            for j in 0..nr {
                let r = 0.002 + (0.15 - 0.002) * j as f64 / (nr - 1) as f64;
                let p = field(t, r);
                let dt = (field(t + ht, r) - field(t - ht, r)) / (2.0 * ht);
                let dr = (field(t, r + hr) - field(t, r - hr)) / (2.0 * hr);
                let drr = (field(t, r + hr) - 2.0 * p + field(t, r - hr)) / (hr * hr);
                let lhs = dt + (kappa * (theta - r) - l1 * sigma2 * r) * dr
                    + 0.5 * sigma2 * r * drr
                    - r * p;
                let target = rhs(tau, r);
                sup_dev = sup_dev.max((lhs - target).abs());
                scale = scale.max(target.abs());
            }
        }
        Ok(sup_dev / scale.max(1e-300))
    }

    /// Cross-check the symbolic source assembly at `n_points` random
    /// interior (t, r) points: the quadrature-plus-finite-difference
    /// evaluation of -<L2 tildeP2> - <L1 P3> must match (a + b r + c r^2)
    /// e^{-B r}. Returns the worst deviation relative to the source scale.
    pub fn rhs_fd_crosscheck(&self, kernel: &HKernel, n_points: usize) -> Result<f64> {
        let t_mat = self.lead.cir.maturity;
        let density = kernel.density().clone();
        let (y_lo, y_hi) = density.support();
        let g = 2.0 / (self.v * self.v);
        let lam = 2.0 * self.lead.cir.lambda2 / self.v;
        let m = &self.moments;
        let l1 = self.lead.cir.lambda1;
        let hr = 2e-3;

        // tildeP2 as an opaque (t, r, y) function for the quadrature route.
        let tilde = |t: f64, r: f64, y: f64| -> f64 {
            let tau = t_mat - t;
            let w = kernel.cumulative_h(y).unwrap_or(0.0) - m.k2;
            -g * self.lead.f_tau(tau) * r * (-self.lead.b_tau(tau) * r).exp() * w
        };
        let rho = |t: f64, r: f64| -> Result<f64> {
            integrate_tol(
                |y| (y - m.sigma2) * tilde(t, r, y) * density.density(y),
                y_lo,
                y_hi,
                1e-14,
                1e-10,
            )
        };

        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for _ in 0..n_points {
            let t = t_mat * rng.gen_range(0.05..0.95);
            let r = rng.gen_range(0.005..0.15);
            let tau = t_mat - t;

            // Route 1: symbolic coefficients.
            let (a_src, b_src, c_src) = self.rhs_abc(tau);
            let symbolic = (a_src + b_src * r + c_src * r * r)
                * (-self.lead.b_tau(tau) * r).exp();

            // Route 2a: -<L2 tildeP2> by quadrature in y and differences in r.
            let rp = rho(t, r + hr)?;
            let r0 = rho(t, r)?;
            let rm = rho(t, r - hr)?;
            let d1 = (rp - rm) / (2.0 * hr);
            let d2 = (rp - 2.0 * r0 + rm) / (hr * hr);
            let l2_tilde = -l1 * r * d1 + 0.5 * r * d2;

            // Route 2b: -<L1 P3> from the quoted form with P1 derivatives
            // taken by finite differences.
            let p1 = |rr: f64| self.p1(t, rr);
            let p1_d1 = (p1(r + hr) - p1(r - hr)) / (2.0 * hr);
            let p1_d2 = (p1(r + hr) - 2.0 * p1(r) + p1(r - hr)) / (hr * hr);
            let f = self.lead.f_tau(tau);
            let b_dur = self.lead.b_tau(tau);
            let l1p3 = -lam
                * ((lam * m.k3 + self.k1 * m.sigma2) * f * r * (-b_dur * r).exp()
                    + m.d * (-l1 * r * p1_d1 + 0.5 * r * p1_d2));

            let assembled = -l2_tilde - l1p3;
            worst = worst.max((symbolic - assembled).abs());
            scale = scale.max(symbolic.abs());
        }
        Ok(worst / scale.max(1e-300))
    }
}

// ---------------------------------------------------------------------------
// Pricing queries
// ---------------------------------------------------------------------------

/// A bond-price request against the expansion.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PriceQuery {
    /// Valuation time in [0, T].
    pub t: f64,
    /// Short rate, nonnegative.
    pub r: f64,
    /// Dispersion level; `None` prices the averaged series (tildeP2 off).
    pub y: Option<f64>,
    /// Time-scale ratio of the fast dispersion.
    pub epsilon: f64,
    /// Truncation order, 0, 1, or 2.
    pub order: u8,
}

/// A priced query with its term-by-term breakdown. `in_unit_interval`
/// flags whether the truncated series stayed inside (0, 1]; out-of-range
/// values are returned unclamped.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PriceResult {
    pub price: f64,
    pub p0: f64,
    /// sqrt(eps) P1 contribution.
    pub p1_term: f64,
    /// eps barP2 contribution.
    pub p2_bar_term: f64,
    /// eps tildeP2 contribution (zero when y was not supplied).
    pub p2_tilde_term: f64,
    pub in_unit_interval: bool,
}

/// One row of a term-structure curve; yields that could not be computed
/// because the truncated price was nonpositive are reported as NaN.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TermPoint {
    pub tau: f64,
    pub r_order0: f64,
    pub r_order1: f64,
    pub r_order2: f64,
}

/// Residual statistics of the full pricing PDE over a sample.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualStats {
    pub sup: f64,
    pub rms: f64,
    pub n_samples: usize,
}

/// A sample point for the PDE residual diagnostics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ResidualSample {
    pub t: f64,
    pub r: f64,
    pub y: f64,
}

// ---------------------------------------------------------------------------
// The assembled model
// ---------------------------------------------------------------------------

/// Expansion coefficients bundled with the stationary analysis they came
/// from: prices, fluctuation terms, term structures, and PDE residual
/// diagnostics all live here.
#[derive(Debug, Clone)]
pub struct ExpansionModel {
    coeffs: ExpansionCoeffs,
    kernel: HKernel,
    drift: DriftSpec,
}

impl ExpansionModel {
    /// Build everything from a drift specification: stationary density,
    /// kernel tables, moments, then the coefficient ODEs with their gates.
    pub fn build(cir: &CIRParams, drift: DriftSpec, v: f64, cfg: &GridConfig) -> Result<Self> {
        let density = crate::volprocess::stationary_density(&drift, v, cfg)?;
        let kernel = HKernel::build(&density)?;
        let momset = moments(&density, &kernel)?;
        let coeffs = ExpansionCoeffs::build(cir, &momset, &kernel, v)?;
        Ok(ExpansionModel {
            coeffs,
            kernel,
            drift,
        })
    }

    /// Wrap precomputed parts (the kernel must match the moments used).
    pub fn from_parts(coeffs: ExpansionCoeffs, kernel: HKernel, drift: DriftSpec) -> Self {
        ExpansionModel {
            coeffs,
            kernel,
            drift,
        }
    }

    /// Coefficient tables.
    pub fn coeffs(&self) -> &ExpansionCoeffs {
        &self.coeffs
    }

    /// Kernel tables (H, cumulative H, underlying density).
    pub fn kernel(&self) -> &HKernel {
        &self.kernel
    }

    /// Drift the stationary analysis was built from.
    pub fn drift(&self) -> &DriftSpec {
        &self.drift
    }

    /// Zero-mean fluctuation tildeP2(t, r, y) =
    /// -(2/v^2) f(tau) r e^{-B r} (Int_0^y H - K2).
    pub fn tilde_p2(&self, t: f64, r: f64, y: f64) -> Result<f64> {
        let t_mat = self.coeffs.maturity();
        if !(0.0..=t_mat).contains(&t) {
            return Err(Error::param("t", "outside [0, maturity]", t));
        }
        if !(r >= 0.0) {
            return Err(Error::param("r", "must be nonnegative", r));
        }
        let g = 2.0 / (self.coeffs.v * self.coeffs.v);
        let tau = t_mat - t;
        let w = self.kernel.cumulative_h(y)? - self.coeffs.moments.k2;
        let b = self.coeffs.lead.b_tau(tau);
        Ok(-g * self.coeffs.lead.f_tau(tau) * r * (-b * r).exp() * w)
    }

    fn validate_query(&self, q: &PriceQuery) -> Result<()> {
        let t_mat = self.coeffs.maturity();
        if !(0.0..=t_mat).contains(&q.t) {
            return Err(Error::param("t", "outside [0, maturity]", q.t));
        }
        if !(q.r >= 0.0) {
            return Err(Error::param("r", "must be nonnegative", q.r));
        }
        if !(q.epsilon >= 0.0) {
            return Err(Error::param("epsilon", "must be nonnegative", q.epsilon));
        }
        if q.order > 2 {
            return Err(Error::param("order", "supported orders are 0, 1, 2", q.order as f64));
        }
        if let Some(y) = q.y {
            if !(y >= 0.0) {
                return Err(Error::param("y", "must be nonnegative", y));
            }
        }
        Ok(())
    }

    /// Price the truncated expansion at the requested order. With `y`
    /// supplied the second-order term includes the fluctuation part.
    pub fn price(&self, q: &PriceQuery) -> Result<PriceResult> {
        self.validate_query(q)?;
        let p0 = self.coeffs.lead.price(q.t, q.r);
        let sqrt_eps = q.epsilon.sqrt();
        let p1_term = if q.order >= 1 {
            sqrt_eps * self.coeffs.p1(q.t, q.r)
        } else {
            0.0
        };
        let (p2_bar_term, p2_tilde_term) = if q.order >= 2 {
            let bar = q.epsilon * self.coeffs.bar_p2(q.t, q.r);
            let tilde = match q.y {
                Some(y) => q.epsilon * self.tilde_p2(q.t, q.r, y)?,
                None => 0.0,
            };
            (bar, tilde)
        } else {
            (0.0, 0.0)
        };
        let price = p0 + p1_term + p2_bar_term + p2_tilde_term;
        Ok(PriceResult {
            price,
            p0,
            p1_term,
            p2_bar_term,
            p2_tilde_term,
            in_unit_interval: price > 0.0 && price <= 1.0,
        })
    }

    /// Averaged yield curve R = -ln(P)/tau at truncation orders 0, 1, 2.
    /// Maturities must lie in (0, T] of the built coefficients.
    pub fn term_structure(&self, r0: f64, taus: &[f64], epsilon: f64) -> Result<Vec<TermPoint>> {
        if !(r0 >= 0.0) {
            return Err(Error::param("r0", "must be nonnegative", r0));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::param("epsilon", "must be nonnegative", epsilon));
        }
        let t_mat = self.coeffs.maturity();
        let mut out = Vec::with_capacity(taus.len());
        for &tau in taus {
            if !(tau > 0.0 && tau <= t_mat) {
                return Err(Error::param("tau", "outside (0, maturity]", tau));
            }
            let t = t_mat - tau;
            let p0 = self.coeffs.lead.price(t, r0);
            let p1 = p0 + epsilon.sqrt() * self.coeffs.p1(t, r0);
            let p2 = p1 + epsilon * self.coeffs.bar_p2(t, r0);
            let yield_of = |p: f64| if p > 0.0 { -p.ln() / tau } else { f64::NAN };
            out.push(TermPoint {
                tau,
                r_order0: yield_of(p0),
                r_order1: yield_of(p1),
                r_order2: yield_of(p2),
            });
        }
        Ok(out)
    }

    /// Residual of the full pricing PDE applied to the truncated series,
    /// evaluated analytically at each sample. The fast-scale orders cancel
    /// exactly; what remains is sqrt(eps)(L1 P2 + L2 P1) + eps L2 P2 at
    /// order 2, so the sup residual scales like sqrt(eps).
    pub fn pde_residual(
        &self,
        epsilon: f64,
        samples: &[ResidualSample],
        order: u8,
    ) -> Result<ResidualStats> {
        if !(epsilon >= 0.0) {
            return Err(Error::param("epsilon", "must be nonnegative", epsilon));
        }
        if order > 2 {
            return Err(Error::param("order", "supported orders are 0, 1, 2", order as f64));
        }
        if samples.is_empty() {
            return Err(Error::InsufficientSamples {
                needed: 1,
                available: 0,
            });
        }
        let mut sup = 0.0f64;
        let mut sumsq = 0.0f64;
        for s in samples {
            let r = self.residual_at(epsilon, s, order)?;
            sup = sup.max(r.abs());
            sumsq += r * r;
        }
        Ok(ResidualStats {
            sup,
            rms: (sumsq / samples.len() as f64).sqrt(),
            n_samples: samples.len(),
        })
    }

    fn residual_at(&self, epsilon: f64, s: &ResidualSample, order: u8) -> Result<f64> {
        let t_mat = self.coeffs.maturity();
        if !(0.0..=t_mat).contains(&s.t) {
            return Err(Error::param("t", "outside [0, maturity]", s.t));
        }
        if !(s.r >= 0.0) {
            return Err(Error::param("r", "must be nonnegative", s.r));
        }
        let (y_lo, y_hi) = self.kernel.density().support();
        if order == 2 && !(s.y > 0.0 && s.y <= y_hi) {
            return Err(Error::YOutOfRange {
                y: s.y,
                lo: y_lo,
                hi: y_hi,
            });
        }
        let lead = &self.coeffs.lead;
        let m = &self.coeffs.moments;
        let cir = &lead.cir;
        let tau = t_mat - s.t;
        let (r, y) = (s.r, s.y);
        let b = lead.b_tau(tau);
        let f = lead.f_tau(tau);
        let q = lead.q_tau(tau);
        let e = (-b * r).exp();
        let (l1, lam) = (cir.lambda1, 2.0 * cir.lambda2 / self.coeffs.v);
        let v2 = self.coeffs.v * self.coeffs.v;
        let g = 2.0 / v2;

        // Order 0 truncation: residual is L2 P0 = (y - sigma2) f r e^{-Br}.
        let l2_p0 = (y - m.sigma2) * f * r * e;
        if order == 0 {
            return Ok(l2_p0);
        }

        // L2 P1 = K1 f r e + (y - sigma2) [ (q A10 - (l1+B) A11) r + q A11 r^2 ] e.
        let a10 = self.coeffs.a10_tau(tau);
        let a11 = self.coeffs.a11_tau(tau);
        let l2_p1 = e
            * (self.coeffs.k1 * f * r
                + (y - m.sigma2) * ((q * a10 - (l1 + b) * a11) * r + q * a11 * r * r));
        if order == 1 {
            return Ok(l2_p0 + epsilon.sqrt() * l2_p1);
        }

        // Order 2: the fluctuation enters. H and its derivative via the
        // exact log-density identity of the drift, so the O(1) corrector
        // cancellation holds to rounding.
        let h = self.kernel.h(y)?;
        let a0_exp = 2.0 * self.drift.alpha_at_zero() / v2;
        let dlogg = (a0_exp - 1.0) / y + g * self.drift.alpha_hat(y);
        let hp = (y - m.sigma2) / y - h * (1.0 / y + dlogg);
        let alpha = self.drift.alpha(y);

        // O(1): L0 tildeP2 + L2 P0 (analytic cancellation, kept honestly).
        let l0_tilde = -g * f * r * e * (alpha * h + 0.5 * v2 * y * hp);
        let piece0 = l0_tilde + l2_p0;

        // O(sqrt eps): L1 tildeP2 + L2 P1.
        let l1_tilde = lam * y * h * f * r * e;
        let piece_half = l1_tilde + l2_p1;

        // O(eps): L2 barP2 + L2 tildeP2.
        let (a_src, b_src, c_src) = self.coeffs.rhs_abc(tau);
        let a20 = self.coeffs.a20_tau(tau);
        let a21 = self.coeffs.a21_tau(tau);
        let a22 = self.coeffs.a22_tau(tau);
        let qq = a20 + a21 * r + a22 * r * r;
        let qr = a21 + 2.0 * a22 * r;
        let qrr = 2.0 * a22;
        let bar_dr = (qr - b * qq) * e;
        let bar_drr = (qrr - 2.0 * b * qr + b * b * qq) * e;
        let l2_bar = (a_src + b_src * r + c_src * r * r) * e
            + (y - m.sigma2) * r * (-l1 * bar_dr + 0.5 * bar_drr);

        let w = self.kernel.cumulative_h(y)? - m.k2;
        let tilde = -g * f * w * r * e;
        let fp = lead.df_dt_tau(tau);
        let bp = lead.db_dt_tau(tau);
        let tilde_dt = -g * w * r * e * (fp - f * bp * r);
        let tilde_dr = -g * f * w * (1.0 - b * r) * e;
        let tilde_drr = -g * f * w * (b * b * r - 2.0 * b) * e;
        let l2_tilde = tilde_dt
            + (cir.kappa * (cir.theta - r) - l1 * r * y) * tilde_dr
            + 0.5 * r * y * tilde_drr
            - r * tilde;
        let piece_one = l2_bar + l2_tilde;

        Ok(piece0 + epsilon.sqrt() * piece_half + epsilon * piece_one)
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
