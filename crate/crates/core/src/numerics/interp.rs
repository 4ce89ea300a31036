//! Piecewise Hermite interpolants with derivative data at the knots.

use crate::error::{Error, Result};

/// Locates the segment `[xs[i], xs[i+1]]` containing `x` (clamped to the ends).
fn segment(xs: &[f64], x: f64) -> usize {
    let n = xs.len();
    let i = xs.partition_point(|&s| s <= x);
    i.saturating_sub(1).min(n - 2)
}

fn check_knots(xs: &[f64]) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two knots".into()));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("knots must be strictly increasing".into()));
    }
    Ok(())
}

/// Cubic Hermite interpolant. Each knot carries a left and a right slope so
/// that kinks can be represented exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicHermite {
    xs: Vec<f64>,
    ys: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
}

impl CubicHermite {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, slopes: Vec<f64>) -> Result<Self> {
        Self::with_kinks(xs, ys, slopes.clone(), slopes)
    }

    pub fn with_kinks(xs: Vec<f64>, ys: Vec<f64>, left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        check_knots(&xs)?;
        if ys.len() != xs.len() || left.len() != xs.len() || right.len() != xs.len() {
            return Err(Error::InvalidArgument("knot data lengths differ".into()));
        }
        Ok(Self { xs, ys, left, right })
    }

    /// Monotone piecewise cubic (Fritsch–Carlson slopes) through the data.
    pub fn monotone(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        check_knots(&xs)?;
        let n = xs.len();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i])).collect();
        let mut m = vec![0.0; n];
        m[0] = delta[0];
        m[n - 1] = delta[n - 2];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] > 0.0 {
                let h0 = xs[i] - xs[i - 1];
                let h1 = xs[i + 1] - xs[i];
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                m[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        Self::new(xs, ys, m)
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    pub fn knots(&self) -> &[f64] {
        &self.xs
    }

    pub fn values(&self) -> &[f64] {
        &self.ys
    }

    /// Value and first derivative. Outside the knots the end tangent line is
    /// used.
    pub fn eval2(&self, x: f64) -> (f64, f64) {
        let n = self.xs.len();
        if x <= self.xs[0] {
            let s = self.right[0];
            return (self.ys[0] + s * (x - self.xs[0]), s);
        }
        if x >= self.xs[n - 1] {
            let s = self.left[n - 1];
            return (self.ys[n - 1] + s * (x - self.xs[n - 1]), s);
        }
        let i = segment(&self.xs, x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (y0, y1) = (self.ys[i], self.ys[i + 1]);
        let (m0, m1) = (self.right[i] * h, self.left[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1;
        let d = ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * m1)
            / h;
        (v, d)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval2(x).0
    }
}

/// Quintic Hermite interpolant matching value, first and second derivative
/// at every knot.
#[derive(Debug, Clone, PartialEq)]
pub struct QuinticHermite {
    xs: Vec<f64>,
    y0: Vec<f64>,
    y1: Vec<f64>,
    y2: Vec<f64>,
}

impl QuinticHermite {
    pub fn new(xs: Vec<f64>, y0: Vec<f64>, y1: Vec<f64>, y2: Vec<f64>) -> Result<Self> {
        check_knots(&xs)?;
        if y0.len() != xs.len() || y1.len() != xs.len() || y2.len() != xs.len() {
            return Err(Error::InvalidArgument("knot data lengths differ".into()));
        }
        Ok(Self { xs, y0, y1, y2 })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    pub fn contains(&self, x: f64) -> bool {
        let (a, b) = self.domain();
        x >= a && x <= b
    }

    /// Value, first and second derivative inside the knot range.
    pub fn eval3(&self, x: f64) -> (f64, f64, f64) {
        let i = segment(&self.xs, x);
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (p0, v0, a0) = (self.y0[i], self.y1[i] * h, self.y2[i] * h * h);
        let (p1, v1, a1) = (self.y0[i + 1], self.y1[i + 1] * h, self.y2[i + 1] * h * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        // Basis polynomials and their first two derivatives.
        let h00 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
        let h01 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let h02 = 0.5 * t2 - 1.5 * t3 + 1.5 * t4 - 0.5 * t5;
        let h12 = 0.5 * t3 - t4 + 0.5 * t5;
        let h11 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let h10 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;

        let d00 = -30.0 * t2 + 60.0 * t3 - 30.0 * t4;
        let d01 = 1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4;
        let d02 = t - 4.5 * t2 + 6.0 * t3 - 2.5 * t4;
        let d12 = 1.5 * t2 - 4.0 * t3 + 2.5 * t4;
        let d11 = -12.0 * t2 + 28.0 * t3 - 15.0 * t4;
        let d10 = -d00;

        let s00 = -60.0 * t + 180.0 * t2 - 120.0 * t3;
        let s01 = -36.0 * t + 96.0 * t2 - 60.0 * t3;
        let s02 = 1.0 - 9.0 * t + 18.0 * t2 - 10.0 * t3;
        let s12 = 3.0 * t - 12.0 * t2 + 10.0 * t3;
        let s11 = -24.0 * t + 84.0 * t2 - 60.0 * t3;
        let s10 = -s00;

        let v = h00 * p0 + h01 * v0 + h02 * a0 + h10 * p1 + h11 * v1 + h12 * a1;
        let d = (d00 * p0 + d01 * v0 + d02 * a0 + d10 * p1 + d11 * v1 + d12 * a1) / h;
        let s = (s00 * p0 + s01 * v0 + s02 * a0 + s10 * p1 + s11 * v1 + s12 * a1) / (h * h);
        (v, d, s)
    }
}
