//! Quadratic running cost `g(c,d) = ½(c² − 2β₀(d)c + α₀(d))`, its resolvent
//! coefficients `α = R α₀`, `β = R β₀`, the no-action value
//! `V̂ = ½(c²/ρ − 2βc + α)` and the cost-induced thresholds on the c-axis.

use std::fmt;
use std::sync::Arc;

use crate::diffusion::{Coordinate, DiffusionModel, FundamentalPair};
use crate::error::{Error, Result};
use crate::numerics::bisect;

/// A coefficient function of demand.
#[derive(Clone)]
pub enum Profile {
    Identity,
    Square,
    Affine { slope: f64, intercept: f64 },
    Constant(f64),
    /// Piecewise linear through the samples, extended linearly.
    Table(Arc<TableProfile>),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Identity => write!(f, "Identity"),
            Profile::Square => write!(f, "Square"),
            Profile::Affine { slope, intercept } => write!(f, "Affine({slope}, {intercept})"),
            Profile::Constant(k) => write!(f, "Constant({k})"),
            Profile::Table(t) => write!(f, "Table({} samples)", t.xs.len()),
            Profile::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableProfile {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl TableProfile {
    pub fn new(samples: &[(f64, f64)]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidCost("a tabulated profile needs at least two samples".into()));
        }
        let xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidCost("tabulated abscissae must be strictly increasing".into()));
        }
        if ys.iter().chain(xs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCost("tabulated samples must be finite".into()));
        }
        Ok(Self { xs, ys })
    }

    fn slope(&self, i: usize) -> f64 {
        (self.ys[i + 1] - self.ys[i]) / (self.xs[i + 1] - self.xs[i])
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = self.xs.partition_point(|&s| s <= x).saturating_sub(1).min(n - 2);
        if x.is_infinite() {
            let s = if x > 0.0 { self.slope(n - 2) } else { self.slope(0) };
            let base = if x > 0.0 { self.ys[n - 1] } else { self.ys[0] };
            return if s == 0.0 { base } else { s * x };
        }
        self.ys[i] + self.slope(i) * (x - self.xs[i])
    }
}

impl Profile {
    pub fn table(samples: &[(f64, f64)]) -> Result<Self> {
        Ok(Profile::Table(Arc::new(TableProfile::new(samples)?)))
    }

    pub fn custom<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Profile::Custom(Arc::new(f))
    }

    pub fn eval(&self, d: f64) -> f64 {
        match self {
            Profile::Identity => d,
            Profile::Square => d * d,
            Profile::Affine { slope, intercept } => {
                if *slope == 0.0 {
                    *intercept
                } else {
                    slope * d + intercept
                }
            }
            Profile::Constant(k) => *k,
            Profile::Table(t) => t.eval(d),
            Profile::Custom(f) => f(d),
        }
    }

    /// Exact inverse when one is available in closed form.
    fn closed_inverse(&self, y: f64) -> Option<f64> {
        match self {
            Profile::Identity => Some(y),
            Profile::Affine { slope, intercept } if *slope != 0.0 => Some((y - intercept) / slope),
            _ => None,
        }
    }
}

/// Data of the quadratic cost.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    alpha0: Profile,
    beta0: Profile,
    q_plus: f64,
    q_minus: f64,
}

impl QuadraticCost {
    /// `q_minus` may be `f64::INFINITY` (irreversible investment).
    pub fn new(alpha0: Profile, beta0: Profile, q_plus: f64, q_minus: f64) -> Result<Self> {
        if !(q_plus > 0.0) || !q_plus.is_finite() {
            return Err(Error::InvalidCost(format!("q_plus must be positive and finite, got {q_plus}")));
        }
        if !(q_minus > 0.0) {
            return Err(Error::InvalidCost(format!("q_minus must be positive or infinite, got {q_minus}")));
        }
        Ok(Self {
            alpha0,
            beta0,
            q_plus,
            q_minus,
        })
    }

    pub fn alpha0(&self) -> &Profile {
        &self.alpha0
    }

    pub fn beta0(&self) -> &Profile {
        &self.beta0
    }

    pub fn q_plus(&self) -> f64 {
        self.q_plus
    }

    pub fn q_minus(&self) -> f64 {
        self.q_minus
    }

    pub fn is_irreversible(&self) -> bool {
        self.q_minus.is_infinite()
    }

    /// Same cost with a different investment price.
    pub fn with_q_plus(&self, q_plus: f64) -> Result<Self> {
        Self::new(self.alpha0.clone(), self.beta0.clone(), q_plus, self.q_minus)
    }

    pub fn running_cost(&self, c: f64, d: f64) -> f64 {
        0.5 * (c * c - 2.0 * self.beta0.eval(d) * c + self.alpha0.eval(d))
    }

    pub fn marginal_cost(&self, c: f64, d: f64) -> f64 {
        c - self.beta0.eval(d)
    }

    /// Checks `β₀` strictly increasing and `g ≥ 0` (i.e. `α₀ ≥ β₀²`) on a
    /// 1000-point grid spanning `[lo, hi]`.
    pub fn validate(&self, model: &DiffusionModel, lo: f64, hi: f64) -> Result<()> {
        let grid = Coordinate::of(model).grid(lo, hi, 1000);
        let mut prev = f64::NEG_INFINITY;
        for &d in &grid {
            let b = self.beta0.eval(d);
            let a = self.alpha0.eval(d);
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidCost(format!("cost coefficients are not finite at d = {d}")));
            }
            if !(b > prev) {
                return Err(Error::InvalidCost(format!(
                    "beta0 must be strictly increasing; it fails at d = {d}"
                )));
            }
            prev = b;
            let slack = a - b * b;
            if slack < -1e-12 * (1.0 + a.abs()) {
                return Err(Error::InvalidCost(format!(
                    "running cost is negative for some capacity at d = {d} (alpha0 - beta0^2 = {slack:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn thresholds(&self, model: &DiffusionModel) -> Thresholds {
        let beta_inf = self.beta0.eval(model.d_min());
        let beta_sup = self.beta0.eval(model.d_max());
        Thresholds {
            beta0: self.beta0.clone(),
            rho: model.rho(),
            q_plus: self.q_plus,
            q_minus: self.q_minus,
            coord: Coordinate::of(model),
            d_min: model.d_min(),
            d_max: model.d_max(),
            d0: model.d0(),
            beta_inf,
            beta_sup,
        }
    }
}

/// The cost-only thresholds. Empty infima and suprema over the state interval
/// resolve to its endpoints.
#[derive(Debug, Clone)]
pub struct Thresholds {
    beta0: Profile,
    rho: f64,
    q_plus: f64,
    q_minus: f64,
    coord: Coordinate,
    d_min: f64,
    d_max: f64,
    d0: f64,
    beta_inf: f64,
    beta_sup: f64,
}

impl Thresholds {
    /// `ĉ₊,g(d) = β₀(d) − ρq⁺`.
    pub fn chat_plus_g(&self, d: f64) -> f64 {
        self.beta0.eval(d) - self.rho * self.q_plus
    }

    /// `ĉ₋,g(d) = β₀(d) + ρq⁻` (infinite when irreversible).
    pub fn chat_minus_g(&self, d: f64) -> f64 {
        if self.q_minus.is_infinite() {
            f64::INFINITY
        } else {
            self.beta0.eval(d) + self.rho * self.q_minus
        }
    }

    /// `c̲₋,g = inf β₀ + ρq⁻`.
    pub fn c_lower_minus_g(&self) -> f64 {
        if self.q_minus.is_infinite() {
            f64::INFINITY
        } else {
            self.beta_inf + self.rho * self.q_minus
        }
    }

    /// `c̄₊,g = sup β₀ − ρq⁺`.
    pub fn c_upper_plus_g(&self) -> f64 {
        self.beta_sup - self.rho * self.q_plus
    }

    pub fn beta0_bounds(&self) -> (f64, f64) {
        (self.beta_inf, self.beta_sup)
    }

    /// Inverse of `β₀` for `y` strictly inside its range.
    pub fn beta0_inverse(&self, y: f64) -> Result<f64> {
        if !(y > self.beta_inf && y < self.beta_sup) {
            return Err(Error::InvalidArgument(format!(
                "{y} is outside the range ({}, {}) of beta0",
                self.beta_inf, self.beta_sup
            )));
        }
        if let Some(d) = self.beta0.closed_inverse(y) {
            return Ok(d);
        }
        let g = |z: f64| Ok(self.beta0.eval(self.coord.from_z(z)) - y);
        let z0 = self.coord.to_z(self.d0);
        let (mut a, mut b) = (z0 - 1.0, z0 + 1.0);
        let mut k = 0;
        while g(a)? > 0.0 {
            a -= 2f64.powi(k);
            k += 1;
            if k > 60 {
                return Err(Error::Root("could not bracket the inverse of beta0".into()));
            }
        }
        k = 0;
        while g(b)? < 0.0 {
            b += 2f64.powi(k);
            k += 1;
            if k > 60 {
                return Err(Error::Root("could not bracket the inverse of beta0".into()));
            }
        }
        let z = bisect(g, a, b, 1e-13 * (1.0 + z0.abs()), 200)?;
        Ok(self.coord.from_z(z))
    }

    /// `d*₊(c) = inf{ξ : β₀(ξ) > c + ρq⁺}`.
    pub fn dstar_plus(&self, c: f64) -> Result<f64> {
        let y = c + self.rho * self.q_plus;
        if y < self.beta_inf {
            Ok(self.d_min)
        } else if y >= self.beta_sup {
            Ok(self.d_max)
        } else if y == self.beta_inf {
            Ok(self.d_min)
        } else {
            self.beta0_inverse(y)
        }
    }

    /// `d*₋(c) = sup{ξ : β₀(ξ) < c − ρq⁻}`.
    pub fn dstar_minus(&self, c: f64) -> Result<f64> {
        if self.q_minus.is_infinite() {
            return Ok(self.d_min);
        }
        let y = c - self.rho * self.q_minus;
        if y <= self.beta_inf {
            Ok(self.d_min)
        } else if y >= self.beta_sup {
            Ok(self.d_max)
        } else {
            self.beta0_inverse(y)
        }
    }
}

/// α, β and their first two derivatives at one demand level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffSample {
    pub d: f64,
    pub alpha: f64,
    pub alpha_p: f64,
    pub alpha_pp: f64,
    pub beta: f64,
    pub beta_p: f64,
    pub beta_pp: f64,
}

/// `V̂` and the derivatives used downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vhat {
    pub value: f64,
    pub c: f64,
    pub cd: f64,
    pub d: f64,
    pub dd: f64,
}

impl CoeffSample {
    pub fn vhat(&self, rho: f64, c: f64) -> Vhat {
        Vhat {
            value: 0.5 * (c * c / rho - 2.0 * self.beta * c + self.alpha),
            c: c / rho - self.beta,
            cd: -self.beta_p,
            d: -self.beta_p * c + 0.5 * self.alpha_p,
            dd: -self.beta_pp * c + 0.5 * self.alpha_pp,
        }
    }
}

/// Resolvent coefficients of the cost, evaluated pointwise by quadrature.
#[derive(Debug, Clone)]
pub struct ResolventCoeffs {
    pair: FundamentalPair,
    alpha0: Profile,
    beta0: Profile,
}

impl ResolventCoeffs {
    pub fn new(pair: &FundamentalPair, cost: &QuadraticCost) -> Self {
        Self {
            pair: pair.clone(),
            alpha0: cost.alpha0.clone(),
            beta0: cost.beta0.clone(),
        }
    }

    pub fn pair(&self) -> &FundamentalPair {
        &self.pair
    }

    pub fn rho(&self) -> f64 {
        self.pair.rho()
    }

    pub fn at(&self, d: f64) -> Result<CoeffSample> {
        let (alpha, alpha_p, alpha_pp) = self.pair.resolvent_with_derivatives(|x| self.alpha0.eval(x), d)?;
        let (beta, beta_p, beta_pp) = match self.pair.resolvent_with_derivatives(|x| self.beta0.eval(x), d) {
            Ok(v) => v,
            Err(_) => self.beta_by_differences(d)?,
        };
        Ok(CoeffSample {
            d,
            alpha,
            alpha_p,
            alpha_pp,
            beta,
            beta_p,
            beta_pp,
        })
    }

    pub fn alpha(&self, d: f64) -> Result<f64> {
        self.pair.resolvent(|x| self.alpha0.eval(x), d)
    }

    pub fn beta(&self, d: f64) -> Result<f64> {
        self.pair.resolvent(|x| self.beta0.eval(x), d)
    }

    pub fn beta_prime(&self, d: f64) -> Result<f64> {
        match self.pair.resolvent_with_derivatives(|x| self.beta0.eval(x), d) {
            Ok(v) => Ok(v.1),
            Err(_) => Ok(self.beta_by_differences(d)?.1),
        }
    }

    /// Five-point central differences of β.
    fn beta_by_differences(&self, d: f64) -> Result<(f64, f64, f64)> {
        let h = 1e-4 * (1.0 + d.abs());
        let b = |x: f64| self.beta(x);
        let (m2, m1, c0, p1, p2) = (b(d - 2.0 * h)?, b(d - h)?, b(d)?, b(d + h)?, b(d + 2.0 * h)?);
        let d1 = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
        let d2 = (-m2 + 16.0 * m1 - 30.0 * c0 + 16.0 * p1 - p2) / (12.0 * h * h);
        Ok((c0, d1, d2))
    }

    pub fn vhat(&self, c: f64, d: f64) -> Result<Vhat> {
        Ok(self.at(d)?.vhat(self.rho(), c))
    }
}
