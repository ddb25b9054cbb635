//! Bond pricing under a generalized Cox-Ingersoll-Ross short rate whose
//! dispersion is a rapidly oscillating ergodic diffusion.
//!
//! The short rate r and its dispersion y follow
//!
//!   dr = kappa (theta - r) dt + sqrt(y) sqrt(r) dw_r,
//!   dy = (1/eps) alpha(y) dt + (v/sqrt(eps)) sqrt(y) dw_y,
//!
//! with eps small. Zero-coupon prices admit the singular-perturbation
//! expansion P ~ P0 + sqrt(eps) P1 + eps P2, where P0 is the classical CIR
//! price at the averaged dispersion sigma^2 and the corrections are driven
//! by moment constants of the stationary law of y.
//!
//! Modules:
//! - [`volprocess`]: stationary analysis of the dispersion (clustering
//!   drift, Gamma mixtures, the kernel H, moment constants).
//! - [`expansion`]: the closed-form leading order, the correction term
//!   ODE systems, term structures, and PDE residual diagnostics.
//! - [`mcsim`]: exact-measure Monte Carlo simulation of the pair (r, y)
//!   with discretization-bias controls, used as the pricing oracle.
//! - [`calibration`]: dispersion estimation from short-rate time series
//!   (windowed quasi-likelihood, dispersion KDE, regime counting).
//! - [`quad`], [`ode`], [`interp`]: the supporting numerics (adaptive
//!   Gauss-Kronrod quadrature, a Dormand-Prince 5(4) integrator with dense
//!   grid output, cubic Hermite interpolation).

pub mod calibration;
pub mod error;
pub mod expansion;
pub mod interp;
pub mod mcsim;
pub mod ode;
pub mod quad;
pub mod volprocess;

pub use error::{Error, Result};
