//! Piecewise cubic Hermite interpolation on an ascending node set.
//!
//! Most tabulated quantities in this crate (log-densities, cumulative
//! kernels, expansion coefficients) come with analytically known first
//! derivatives, so the interpolant stores exact slopes and achieves O(h^4)
//! accuracy between nodes without global spline solves. Values are clamped
//! to node-range queries by the callers; this module itself extrapolates
//! with the boundary cubic when asked.

/// Cubic Hermite interpolant: nodes, values, and first derivatives.
#[derive(Debug, Clone)]
pub struct CubicHermite {
    x: Vec<f64>,
    y: Vec<f64>,
    dy: Vec<f64>,
}

impl CubicHermite {
    /// Build from nodes, values, and exact slopes. Panics if the lengths
    /// differ, fewer than two nodes are given, or nodes are not strictly
    /// increasing; tabulation builders validate their grids beforehand.
    pub fn new(x: Vec<f64>, y: Vec<f64>, dy: Vec<f64>) -> Self {
        assert_eq!(x.len(), y.len());
        assert_eq!(x.len(), dy.len());
        assert!(x.len() >= 2, "need at least two nodes");
        assert!(
            x.windows(2).all(|w| w[0] < w[1]),
            "nodes must be strictly increasing"
        );
        CubicHermite { x, y, dy }
    }

    /// Index of the segment containing `xq` (clamped to valid segments).
    fn segment(&self, xq: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&v| v <= xq) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    /// Interpolated value at `xq`.
    pub fn eval(&self, xq: f64) -> f64 {
        let i = self.segment(xq);
        let h = self.x[i + 1] - self.x[i];
        let t = (xq - self.x[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[i] + h10 * h * self.dy[i] + h01 * self.y[i + 1] + h11 * h * self.dy[i + 1]
    }

    /// Interpolated first derivative at `xq`.
    pub fn eval_derivative(&self, xq: f64) -> f64 {
        let i = self.segment(xq);
        let h = self.x[i + 1] - self.x[i];
        let t = (xq - self.x[i]) / h;
        let t2 = t * t;
        let d00 = (6.0 * t2 - 6.0 * t) / h;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = (-6.0 * t2 + 6.0 * t) / h;
        let d11 = 3.0 * t2 - 2.0 * t;
        d00 * self.y[i] + d10 * self.dy[i] + d01 * self.y[i + 1] + d11 * self.dy[i + 1]
    }

    /// Node abscissae.
    pub fn nodes(&self) -> &[f64] {
        &self.x
    }

    /// Node values.
    pub fn values(&self) -> &[f64] {
        &self.y
    }

    /// Node slopes.
    pub fn slopes(&self) -> &[f64] {
        &self.dy
    }

    /// First node.
    pub fn x_min(&self) -> f64 {
        self.x[0]
    }

    /// Last node.
    pub fn x_max(&self) -> f64 {
        *self.x.last().unwrap()
    }
}

/// Inverse lookup on a non-decreasing tabulated function (used for CDF
/// inversion). Returns the abscissa where the piecewise-linear chord of
/// `(x, y)` reaches level `target`, clamped to the node range.
pub fn inverse_monotone(x: &[f64], y: &[f64], target: f64) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    if target <= y[0] {
        return x[0];
    }
    if target >= y[n - 1] {
        return x[n - 1];
    }
    let k = y.partition_point(|&v| v < target);
    let (y0, y1) = (y[k - 1], y[k]);
    let (x0, x1) = (x[k - 1], x[k]);
    if y1 <= y0 {
        return x0;
    }
    x0 + (x1 - x0) * (target - y0) / (y1 - y0)
}
