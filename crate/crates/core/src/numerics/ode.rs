//! Dormand–Prince 5(4) integrator that keeps every accepted step so the
//! solution can be re-evaluated anywhere on the interval afterwards.

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub initial_step: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-11,
            abs_tol: 1e-13,
            initial_step: 1e-4,
            max_step: f64::INFINITY,
            max_steps: 200_000,
        }
    }
}

/// One Dormand–Prince step; returns the new state and the embedded error.
fn step<const N: usize, F>(f: &F, x: f64, y: &[f64; N], h: f64) -> ([f64; N], [f64; N])
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let mut k = [[0.0; N]; 7];
    k[0] = f(x, y);
    for s in 1..7 {
        let mut ys = *y;
        for (j, kj) in k.iter().enumerate().take(s) {
            let a = A[s][j];
            if a != 0.0 {
                for i in 0..N {
                    ys[i] += h * a * kj[i];
                }
            }
        }
        k[s] = f(x + C[s] * h, &ys);
    }
    let mut ynew = *y;
    let mut err = [0.0; N];
    for (j, kj) in k.iter().enumerate() {
        let b = if j < 6 { A[6][j] } else { 0.0 };
        for i in 0..N {
            ynew[i] += h * b * kj[i];
            err[i] += h * E[j] * kj[i];
        }
    }
    (ynew, err)
}

/// Accepted steps of an integration, in the direction of integration.
#[derive(Debug, Clone)]
pub struct Trajectory<const N: usize> {
    pub xs: Vec<f64>,
    pub ys: Vec<[f64; N]>,
}

impl<const N: usize> Trajectory<N> {
    pub fn start(&self) -> f64 {
        self.xs[0]
    }

    pub fn end(&self) -> f64 {
        *self.xs.last().expect("trajectory has at least one node")
    }

    /// Evaluates the solution at `x` by one step from the nearest stored node
    /// behind it. `x` must lie between the first and last node.
    pub fn eval<F>(&self, f: &F, x: f64) -> [f64; N]
    where
        F: Fn(f64, &[f64; N]) -> [f64; N],
    {
        let forward = self.end() >= self.start();
        let n = self.xs.len();
        let idx = if forward {
            self.xs.partition_point(|&s| s <= x)
        } else {
            self.xs.partition_point(|&s| s >= x)
        };
        let i = idx.saturating_sub(1).min(n - 1);
        let h = x - self.xs[i];
        if h == 0.0 {
            return self.ys[i];
        }
        step(f, self.xs[i], &self.ys[i], h).0
    }
}

/// Integrates `y' = f(x, y)` from `x0` to `x1` (either direction).
pub fn integrate<const N: usize, F>(
    f: &F,
    x0: f64,
    y0: [f64; N],
    x1: f64,
    opts: &OdeOptions,
) -> Result<Trajectory<N>>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    let dir = if x1 >= x0 { 1.0 } else { -1.0 };
    let span = (x1 - x0).abs();
    let mut h = opts.initial_step.min(span).min(opts.max_step);
    let mut x = x0;
    let mut y = y0;
    let mut traj = Trajectory {
        xs: vec![x0],
        ys: vec![y0],
    };
    let mut steps = 0;
    while dir * (x1 - x) > 0.0 {
        if steps >= opts.max_steps {
            return Err(Error::Ode {
                at: x,
                reason: "step budget exhausted".into(),
            });
        }
        steps += 1;
        let remaining = (x1 - x).abs();
        let last = h >= remaining;
        let hh = if last { remaining } else { h };
        let (ynew, err) = step(f, x, &y, dir * hh);
        let mut norm = 0.0;
        for i in 0..N {
            let sc = opts.abs_tol + opts.rel_tol * y[i].abs().max(ynew[i].abs());
            norm += (err[i] / sc).powi(2);
        }
        let norm = (norm / N as f64).sqrt();
        if !norm.is_finite() {
            h *= 0.2;
            if h < 1e-14 * (x.abs() + 1.0) {
                return Err(Error::Ode {
                    at: x,
                    reason: "solution is not finite".into(),
                });
            }
            continue;
        }
        if norm <= 1.0 {
            x = if last { x1 } else { x + dir * hh };
            y = ynew;
            traj.xs.push(x);
            traj.ys.push(y);
        }
        let factor = if norm == 0.0 {
            5.0
        } else {
            (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = (hh * factor).min(opts.max_step);
        if h < 1e-14 * (x.abs() + 1.0) {
            return Err(Error::Ode {
                at: x,
                reason: "step size underflow".into(),
            });
        }
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_growth() {
        let f = |_x: f64, y: &[f64; 1]| [y[0]];
        let tr = integrate(&f, 0.0, [1.0], 3.0, &OdeOptions::default()).unwrap();
        let y = tr.ys.last().unwrap()[0];
        assert!((y - 3.0f64.exp()).abs() < 1e-9 * 3.0f64.exp());
        let mid = tr.eval(&f, 1.234)[0];
        assert!((mid - 1.234f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn backward_oscillator() {
        let f = |_x: f64, y: &[f64; 2]| [y[1], -y[0]];
        let tr = integrate(&f, 2.0, [2.0f64.sin(), 2.0f64.cos()], -1.0, &OdeOptions::default()).unwrap();
        let y = tr.eval(&f, 0.3);
        assert!((y[0] - 0.3f64.sin()).abs() < 1e-9);
        assert!((y[1] - 0.3f64.cos()).abs() < 1e-9);
    }
}
