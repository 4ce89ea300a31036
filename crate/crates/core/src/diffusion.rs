//! Demand diffusion `dD = μ(D)dt + σ(D)dW` on an open interval, together
//! with its scale/speed densities, fundamental solutions of
//! `ρu − μu' − ½σ²u'' = 0`, Green kernel and resolvent.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::ode::{self, OdeOptions, Trajectory};
use crate::numerics::{integrate, QuadOptions};

pub type CoefFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiffusionKind {
    Gbm { mu: f64, sigma: f64 },
    Generic,
}

/// An immutable demand model. Cloning is cheap.
#[derive(Clone)]
pub struct DiffusionModel {
    kind: DiffusionKind,
    drift: CoefFn,
    volatility: CoefFn,
    d_min: f64,
    d_max: f64,
    rho: f64,
    d0: f64,
    growth_rate: f64,
}

impl fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("kind", &self.kind)
            .field("d_min", &self.d_min)
            .field("d_max", &self.d_max)
            .field("rho", &self.rho)
            .field("d0", &self.d0)
            .finish()
    }
}

impl DiffusionModel {
    /// Geometric Brownian motion on `(0, ∞)`. Requires `ρ > max(0, 2μ+σ²)`
    /// so that quadratic costs have finite discounted expectations.
    pub fn gbm(mu: f64, sigma: f64, rho: f64, d0: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidModel(format!("volatility must be positive, got {sigma}")));
        }
        if !mu.is_finite() {
            return Err(Error::InvalidModel("drift must be finite".into()));
        }
        let k1 = (2.0 * mu + sigma * sigma).max(0.0);
        if !(rho > k1) {
            return Err(Error::InvalidModel(format!(
                "discount condition violated: rho = {rho} must exceed max(0, 2*mu + sigma^2) = {k1}"
            )));
        }
        if !(d0 > 0.0) || !d0.is_finite() {
            return Err(Error::InvalidModel(format!("reference point d0 = {d0} must lie in (0, inf)")));
        }
        Ok(Self {
            kind: DiffusionKind::Gbm { mu, sigma },
            drift: Arc::new(move |d| mu * d),
            volatility: Arc::new(move |d| sigma * d),
            d_min: 0.0,
            d_max: f64::INFINITY,
            rho,
            d0,
            growth_rate: k1,
        })
    }

    /// A diffusion given by arbitrary coefficient functions. The endpoints are
    /// assumed natural; only the limit behaviour of ψ and φ is sanity checked.
    pub fn generic<M, S>(drift: M, volatility: S, d_min: f64, d_max: f64, rho: f64, d0: f64) -> Result<Self>
    where
        M: Fn(f64) -> f64 + Send + Sync + 'static,
        S: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        if !(d_min < d_max) {
            return Err(Error::InvalidModel(format!("empty state interval ({d_min}, {d_max})")));
        }
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidModel(format!("discount rate must be positive, got {rho}")));
        }
        if !(d0 > d_min && d0 < d_max) {
            return Err(Error::InvalidModel(format!(
                "reference point d0 = {d0} is not inside ({d_min}, {d_max})"
            )));
        }
        let s0 = volatility(d0);
        if !(s0 > 0.0) || !s0.is_finite() {
            return Err(Error::InvalidModel(format!("volatility at d0 must be positive, got {s0}")));
        }
        Ok(Self {
            kind: DiffusionKind::Generic,
            drift: Arc::new(drift),
            volatility: Arc::new(volatility),
            d_min,
            d_max,
            rho,
            d0,
            growth_rate: 0.0,
        })
    }

    /// Mean-reverting `dD = κ(θ − D)dt + σ dW` on the real line.
    pub fn ornstein_uhlenbeck(kappa: f64, theta: f64, sigma: f64, rho: f64, d0: f64) -> Result<Self> {
        if !(kappa > 0.0) || !(sigma > 0.0) {
            return Err(Error::InvalidModel("kappa and sigma must be positive".into()));
        }
        Self::generic(
            move |d| kappa * (theta - d),
            move |_| sigma,
            f64::NEG_INFINITY,
            f64::INFINITY,
            rho,
            d0,
        )
    }

    /// Declares an exponential growth rate `K` with `E[D_t²] ≲ e^{Kt}`; used
    /// only to size simulation horizons. Must stay below `ρ`.
    pub fn with_growth_rate(mut self, k: f64) -> Result<Self> {
        if !(k >= 0.0 && k < self.rho) {
            return Err(Error::InvalidModel(format!(
                "growth rate {k} must lie in [0, rho = {})",
                self.rho
            )));
        }
        self.growth_rate = k;
        Ok(self)
    }

    pub fn kind(&self) -> DiffusionKind {
        self.kind
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }

    pub fn growth_rate(&self) -> f64 {
        self.growth_rate
    }

    pub fn drift(&self, d: f64) -> f64 {
        (self.drift)(d)
    }

    pub fn volatility(&self, d: f64) -> f64 {
        (self.volatility)(d)
    }

    pub fn is_interior(&self, d: f64) -> bool {
        d > self.d_min && d < self.d_max
    }

    pub fn check_interior(&self, d: f64) -> Result<()> {
        if self.is_interior(d) {
            Ok(())
        } else {
            Err(Error::Domain {
                value: d,
                lo: self.d_min,
                hi: self.d_max,
            })
        }
    }

    /// `S'(d) = exp(−∫_{d0}^d 2μ/σ²)`.
    pub fn scale_density(&self, d: f64) -> Result<f64> {
        self.check_interior(d)?;
        match self.kind {
            DiffusionKind::Gbm { mu, sigma } => Ok((d / self.d0).powf(-2.0 * mu / (sigma * sigma))),
            DiffusionKind::Generic => {
                let q = integrate(
                    |x| {
                        let s = self.volatility(x);
                        2.0 * self.drift(x) / (s * s)
                    },
                    self.d0,
                    d,
                    &QuadOptions::default(),
                )?;
                Ok((-q.value).exp())
            }
        }
    }

    /// `m'(d) = 2/(σ²(d) S'(d))`.
    pub fn speed_density(&self, d: f64) -> Result<f64> {
        let s = self.scale_density(d)?;
        let v = self.volatility(d);
        Ok(2.0 / (v * v * s))
    }

    pub fn fundamental_pair(&self) -> Result<FundamentalPair> {
        self.fundamental_pair_with(&PairOptions::default())
    }

    pub fn fundamental_pair_with(&self, opts: &PairOptions) -> Result<FundamentalPair> {
        let rho = self.rho;
        let (repr, w) = match self.kind {
            DiffusionKind::Gbm { mu, sigma } => {
                let s2 = sigma * sigma;
                let (m, n) = gbm_exponents(mu, s2, rho);
                let k = -2.0 * mu / s2;
                (
                    PairRepr::Power {
                        m,
                        n,
                        k,
                        half_s2: 0.5 * s2,
                    },
                    (m - n) / self.d0,
                )
            }
            DiffusionKind::Generic => {
                let np = NumericPair::build(self, opts)?;
                let w = np.wronskian_at_d0();
                (PairRepr::Numeric(Arc::new(np)), w)
            }
        };
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::InvalidModel(format!("non-positive Wronskian {w}")));
        }
        Ok(FundamentalPair {
            model: self.clone(),
            repr,
            wronskian: w,
            quad: opts.quad,
        })
    }

    /// Exact lognormal transition for GBM, Euler–Maruyama otherwise.
    pub fn scheme(&self) -> Scheme {
        match self.kind {
            DiffusionKind::Gbm { .. } => Scheme::ExactGbm,
            DiffusionKind::Generic => Scheme::EulerMaruyama,
        }
    }

    /// Advances the state by `dt` given a standard normal draw `z`.
    pub fn step(&self, d: f64, dt: f64, z: f64) -> f64 {
        match self.kind {
            DiffusionKind::Gbm { mu, sigma } => d * ((mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z).exp(),
            DiffusionKind::Generic => {
                let next = d + self.drift(d) * dt + self.volatility(d) * dt.sqrt() * z;
                self.fold_inside(d, next)
            }
        }
    }

    /// Reflects an Euler overshoot past an endpoint back inside.
    fn fold_inside(&self, prev: f64, mut x: f64) -> f64 {
        for _ in 0..2 {
            if x <= self.d_min {
                x = 2.0 * self.d_min - x;
            } else if x >= self.d_max {
                x = 2.0 * self.d_max - x;
            } else {
                return x;
            }
        }
        if self.is_interior(x) {
            x
        } else {
            prev
        }
    }

    /// Local volatility of the driving Brownian motion in the coordinate in
    /// which the bridge law is used (log-demand for GBM, demand otherwise).
    pub fn bridge_sd(&self, d: f64, dt: f64) -> f64 {
        match self.kind {
            DiffusionKind::Gbm { sigma, .. } => sigma * dt.sqrt(),
            DiffusionKind::Generic => self.volatility(d) * dt.sqrt(),
        }
    }

    /// Samples the running maximum and minimum over one step whose endpoints
    /// are `d_a`, `d_b`, conditionally on the endpoints (Brownian bridge).
    pub fn bridge_extremes(&self, d_a: f64, d_b: f64, dt: f64, u_max: f64, u_min: f64) -> (f64, f64) {
        let s = self.bridge_sd(d_a, dt);
        let s2 = s * s;
        match self.kind {
            DiffusionKind::Gbm { .. } => {
                let (a, b) = (d_a.ln(), d_b.ln());
                let diff = (b - a) * (b - a);
                let hi = 0.5 * (a + b + (diff - 2.0 * s2 * u_max.ln()).sqrt());
                let lo = 0.5 * (a + b - (diff - 2.0 * s2 * u_min.ln()).sqrt());
                (hi.exp(), lo.exp())
            }
            DiffusionKind::Generic => {
                let diff = (d_b - d_a) * (d_b - d_a);
                let hi = 0.5 * (d_a + d_b + (diff - 2.0 * s2 * u_max.ln()).sqrt());
                let lo = 0.5 * (d_a + d_b - (diff - 2.0 * s2 * u_min.ln()).sqrt());
                (hi.min(self.d_max), lo.max(self.d_min))
            }
        }
    }

    /// Probability that the bridge between `d_a` and `d_b` touches `level`
    /// (both endpoints on the same side of it).
    pub fn bridge_cross_probability(&self, d_a: f64, d_b: f64, level: f64, dt: f64) -> f64 {
        let s = self.bridge_sd(d_a, dt);
        let (a, b, l) = match self.kind {
            DiffusionKind::Gbm { .. } => (d_a.ln(), d_b.ln(), level.ln()),
            DiffusionKind::Generic => (d_a, d_b, level),
        };
        if (a - l) * (b - l) <= 0.0 {
            return 1.0;
        }
        (-2.0 * (a - l) * (b - l) / (s * s)).exp()
    }

    /// Simulates one demand path on the grid `0, dt, …, ⌈horizon/dt⌉·dt`.
    pub fn sample_path(&self, d_start: f64, dt: f64, horizon: f64, seed: u64) -> Result<SamplePath> {
        self.sample_path_indexed(d_start, dt, horizon, seed, 0)
    }

    /// As [`Self::sample_path`] but on stream `index` of the seed.
    pub fn sample_path_indexed(&self, d_start: f64, dt: f64, horizon: f64, seed: u64, index: u64) -> Result<SamplePath> {
        self.check_interior(d_start)?;
        if !(dt > 0.0) || !(horizon > 0.0) {
            return Err(Error::InvalidArgument("dt and horizon must be positive".into()));
        }
        let n = (horizon / dt).ceil() as usize;
        let mut rng = path_rng(seed, index);
        let mut times = Vec::with_capacity(n + 1);
        let mut values = Vec::with_capacity(n + 1);
        let mut d = d_start;
        times.push(0.0);
        values.push(d);
        for k in 1..=n {
            let z: f64 = rng.sample(StandardNormal);
            d = self.step(d, dt, z);
            times.push(k as f64 * dt);
            values.push(d);
        }
        Ok(SamplePath {
            times,
            values,
            seed,
            scheme: self.scheme(),
        })
    }
}

/// Monotone map of the state interval onto the real line: logarithmic next
/// to a finite endpoint, linear towards an infinite one. Used for brackets and
/// grids so that steps scale with the distance to the boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coordinate {
    lo: f64,
    hi: f64,
}

impl Coordinate {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn of(model: &DiffusionModel) -> Self {
        Self::new(model.d_min, model.d_max)
    }

    pub fn to_z(&self, d: f64) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, false) => (d - self.lo).ln(),
            (false, true) => -(self.hi - d).ln(),
            (false, false) => d,
            (true, true) => ((d - self.lo) / (self.hi - d)).ln(),
        }
    }

    pub fn from_z(&self, z: f64) -> f64 {
        let d = match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, false) => self.lo + z.exp(),
            (false, true) => self.hi - (-z).exp(),
            (false, false) => z,
            (true, true) => {
                let e = (-z.abs()).exp();
                if z >= 0.0 {
                    (self.lo * e + self.hi) / (1.0 + e)
                } else {
                    (self.lo + self.hi * e) / (1.0 + e)
                }
            }
        };
        d.clamp(self.lo, self.hi)
    }

    /// `dd/dz` at `d`.
    pub fn jacobian(&self, d: f64) -> f64 {
        match (self.lo.is_finite(), self.hi.is_finite()) {
            (true, false) => d - self.lo,
            (false, true) => self.hi - d,
            (false, false) => 1.0,
            (true, true) => (d - self.lo) * (self.hi - d) / (self.hi - self.lo),
        }
    }

    /// `n` points equally spaced in `z` between `a` and `b` (inclusive).
    pub fn grid(&self, a: f64, b: f64, n: usize) -> Vec<f64> {
        let (za, zb) = (self.to_z(a), self.to_z(b));
        if n == 1 {
            return vec![a];
        }
        (0..n)
            .map(|i| {
                if i == 0 {
                    a
                } else if i == n - 1 {
                    b
                } else {
                    self.from_z(za + (zb - za) * i as f64 / (n - 1) as f64)
                }
            })
            .collect()
    }
}

/// Random stream for path `index` of a Monte Carlo run keyed by `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scheme {
    ExactGbm,
    EulerMaruyama,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub seed: u64,
    pub scheme: Scheme,
}

/// Roots `m > 0 > n` of `ρ − μz − ½σ²z(z−1) = 0`.
pub fn gbm_exponents(mu: f64, sigma2: f64, rho: f64) -> (f64, f64) {
    let b = 0.5 - mu / sigma2;
    let disc = (b * b + 2.0 * rho / sigma2).sqrt();
    // Avoid cancellation in the smaller-magnitude root.
    let (m, n) = if b >= 0.0 {
        let m = b + disc;
        (m, -2.0 * rho / (sigma2 * m))
    } else {
        let n = b - disc;
        (-2.0 * rho / (sigma2 * n), n)
    };
    (m, n)
}

/// Options for building a [`FundamentalPair`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOptions {
    pub quad: QuadOptions,
    /// Relative tolerance of the Riccati integration (generic models).
    pub ode_rel_tol: f64,
    /// Explicit integration window for generic models; chosen automatically
    /// when absent.
    pub window: Option<(f64, f64)>,
    /// Maximum flux ratio at the window ends relative to the reference point.
    pub tail_ratio: f64,
}

impl Default for PairOptions {
    fn default() -> Self {
        Self {
            quad: QuadOptions {
                rel_tol: 1e-13,
                accept_rel: 1e-9,
                max_intervals: 600,
                ..QuadOptions::default()
            },
            ode_rel_tol: 1e-11,
            window: None,
            tail_ratio: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
enum PairRepr {
    Power { m: f64, n: f64, k: f64, half_s2: f64 },
    Numeric(Arc<NumericPair>),
}

/// Values of the pair and densities at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPoint {
    pub psi: f64,
    pub dpsi: f64,
    pub phi: f64,
    pub dphi: f64,
    pub scale: f64,
    pub speed: f64,
    /// `ψ·m'`, evaluated without intermediate overflow.
    pub psi_speed: f64,
    /// `φ·m'`, evaluated without intermediate overflow.
    pub phi_speed: f64,
}

impl PairPoint {
    const NAN: PairPoint = PairPoint {
        psi: f64::NAN,
        dpsi: f64::NAN,
        phi: f64::NAN,
        dphi: f64::NAN,
        scale: f64::NAN,
        speed: f64::NAN,
        psi_speed: f64::NAN,
        phi_speed: f64::NAN,
    };
}

/// Fundamental solutions ψ (increasing) and φ (decreasing) normalised by
/// `ψ(d0) = φ(d0) = 1`, with the scale and speed densities. Evaluators return
/// NaN outside the interval on which the pair is represented.
#[derive(Debug, Clone)]
pub struct FundamentalPair {
    model: DiffusionModel,
    repr: PairRepr,
    wronskian: f64,
    quad: QuadOptions,
}

impl FundamentalPair {
    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn rho(&self) -> f64 {
        self.model.rho
    }

    pub fn wronskian(&self) -> f64 {
        self.wronskian
    }

    pub fn quad_options(&self) -> &QuadOptions {
        &self.quad
    }

    /// GBM exponents `(m, n)` when the pair is a power pair.
    pub fn exponents(&self) -> Option<(f64, f64)> {
        match self.repr {
            PairRepr::Power { m, n, .. } => Some((m, n)),
            PairRepr::Numeric(_) => None,
        }
    }

    /// Interval on which ψ, φ are available: the state interval for GBM, the
    /// integration window for generic models.
    pub fn window(&self) -> (f64, f64) {
        match &self.repr {
            PairRepr::Power { .. } => (self.model.d_min, self.model.d_max),
            PairRepr::Numeric(np) => (np.lo, np.hi),
        }
    }

    pub fn in_window(&self, d: f64) -> bool {
        let (a, b) = self.window();
        match self.repr {
            PairRepr::Power { .. } => d > a && d < b,
            PairRepr::Numeric(_) => d >= a && d <= b,
        }
    }

    pub fn check(&self, d: f64) -> Result<()> {
        if self.in_window(d) {
            Ok(())
        } else {
            let (lo, hi) = self.window();
            Err(Error::Domain { value: d, lo, hi })
        }
    }

    pub fn at(&self, d: f64) -> PairPoint {
        match &self.repr {
            PairRepr::Power { m, n, k, half_s2 } => {
                if !(d > 0.0) || d.is_infinite() {
                    return PairPoint::NAN;
                }
                let d0 = self.model.d0;
                let l = (d / d0).ln();
                let psi = (m * l).exp();
                let phi = (n * l).exp();
                let scale = (k * l).exp();
                let c = 1.0 / (half_s2 * d0 * d0);
                PairPoint {
                    psi,
                    dpsi: m * psi / d,
                    phi,
                    dphi: n * phi / d,
                    scale,
                    speed: c * (-(k + 2.0) * l).exp(),
                    psi_speed: c * ((m - k - 2.0) * l).exp(),
                    phi_speed: c * ((n - k - 2.0) * l).exp(),
                }
            }
            PairRepr::Numeric(np) => np.at(d, &self.model),
        }
    }

    pub fn psi(&self, d: f64) -> f64 {
        self.at(d).psi
    }

    pub fn phi(&self, d: f64) -> f64 {
        self.at(d).phi
    }

    pub fn dpsi(&self, d: f64) -> f64 {
        self.at(d).dpsi
    }

    pub fn dphi(&self, d: f64) -> f64 {
        self.at(d).dphi
    }

    /// Second derivative of a solution from the ODE itself.
    pub fn second_derivative(&self, d: f64, u: f64, du: f64) -> f64 {
        let s = self.model.volatility(d);
        2.0 * (self.model.rho * u - self.model.drift(d) * du) / (s * s)
    }

    pub fn d2psi(&self, d: f64) -> f64 {
        let p = self.at(d);
        self.second_derivative(d, p.psi, p.dpsi)
    }

    pub fn d2phi(&self, d: f64) -> f64 {
        let p = self.at(d);
        self.second_derivative(d, p.phi, p.dphi)
    }

    pub fn scale_density(&self, d: f64) -> f64 {
        self.at(d).scale
    }

    pub fn speed_density(&self, d: f64) -> f64 {
        self.at(d).speed
    }

    /// `ψ'/S'`, which equals `ρ∫_{d_min}^d ψ m'`.
    pub fn psi_flux(&self, d: f64) -> f64 {
        let p = self.at(d);
        p.dpsi / p.scale
    }

    /// `φ'/S'`, which equals `−ρ∫_d^{d_max} φ m'`.
    pub fn phi_flux(&self, d: f64) -> f64 {
        let p = self.at(d);
        p.dphi / p.scale
    }

    /// Green kernel `G(d, h)`.
    pub fn green(&self, d: f64, h: f64) -> Result<f64> {
        self.check(d)?;
        self.check(h)?;
        let (lo, hi) = if d <= h { (d, h) } else { (h, d) };
        Ok(self.psi(lo) * self.phi(hi) / self.wronskian)
    }

    /// `∫_a^b f` with endpoints clipped to the window. For power pairs the
    /// integral is taken in log-demand, which turns the natural boundaries
    /// into infinite endpoints with exponentially decaying integrands.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> Result<f64> {
        let (lo, hi) = self.window();
        let a = a.clamp(lo, hi);
        let b = b.clamp(lo, hi);
        match self.repr {
            PairRepr::Power { .. } => {
                let ua = if a <= 0.0 { f64::NEG_INFINITY } else { a.ln() };
                let ub = if b.is_infinite() { f64::INFINITY } else { b.ln() };
                let u0 = self.model.d0.ln();
                let q = integrate(
                    |u: f64| {
                        let x = u.exp();
                        let v = f(x) * x;
                        // Far out in log-demand the factors of a decaying
                        // integrand can individually leave the f64 range.
                        if !v.is_finite() && (u - u0).abs() > 100.0 {
                            return 0.0;
                        }
                        v
                    },
                    ua,
                    ub,
                    &self.quad,
                )?;
                Ok(q.value)
            }
            PairRepr::Numeric(_) => Ok(integrate(f, a, b, &self.quad)?.value),
        }
    }

    /// `(∫_{d_min}^d ψ f m', ∫_d^{d_max} φ f m')`.
    pub fn resolvent_parts<F: Fn(f64) -> f64>(&self, f: &F, d: f64) -> Result<(f64, f64)> {
        self.check(d)?;
        let (lo, hi) = self.window();
        let left = self.integrate(
            |x| {
                let p = self.at(x);
                p.psi_speed * f(x)
            },
            lo,
            d,
        )?;
        let right = self.integrate(
            |x| {
                let p = self.at(x);
                p.phi_speed * f(x)
            },
            d,
            hi,
        )?;
        Ok((left, right))
    }

    /// `E ∫_0^∞ e^{−ρt} f(D_t) dt` started at `d`.
    pub fn resolvent<F: Fn(f64) -> f64>(&self, f: F, d: f64) -> Result<f64> {
        let (l, r) = self.resolvent_parts(&f, d)?;
        let p = self.at(d);
        Ok((p.phi * l + p.psi * r) / self.wronskian)
    }

    /// Resolvent together with its first and second derivatives in `d`.
    pub fn resolvent_with_derivatives<F: Fn(f64) -> f64>(&self, f: F, d: f64) -> Result<(f64, f64, f64)> {
        let (l, r) = self.resolvent_parts(&f, d)?;
        let p = self.at(d);
        let w = self.wronskian;
        let u = (p.phi * l + p.psi * r) / w;
        let du = (p.dphi * l + p.dpsi * r) / w;
        let s = self.model.volatility(d);
        let ddu = 2.0 * (self.model.rho * u - self.model.drift(d) * du - f(d)) / (s * s);
        Ok((u, du, ddu))
    }
}

/// Fundamental solutions of a generic model obtained from the Riccati
/// equations for `u = ψ'/ψ` (integrated forward from the left end of the
/// window, where that direction is stable) and `v = φ'/φ` (backward from the
/// right end), carrying `ln ψ`, `ln φ` and `ln S'` alongside.
struct NumericPair {
    lo: f64,
    hi: f64,
    psi_traj: Trajectory<3>,
    phi_traj: Trajectory<2>,
    ln_psi0: f64,
    ln_phi0: f64,
    ln_s0: f64,
    u0: f64,
    v0: f64,
}

impl fmt::Debug for NumericPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NumericPair")
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("psi_steps", &self.psi_traj.xs.len())
            .field("phi_steps", &self.phi_traj.xs.len())
            .finish()
    }
}

fn riccati_psi(model: &DiffusionModel) -> impl Fn(f64, &[f64; 3]) -> [f64; 3] + '_ {
    move |x, y| {
        let s = model.volatility(x);
        let s2 = s * s;
        let mu = model.drift(x);
        let u = y[0];
        [2.0 * (model.rho - mu * u) / s2 - u * u, u, -2.0 * mu / s2]
    }
}

fn riccati_phi(model: &DiffusionModel) -> impl Fn(f64, &[f64; 2]) -> [f64; 2] + '_ {
    move |x, y| {
        let s = model.volatility(x);
        let v = y[0];
        [2.0 * (model.rho - model.drift(x) * v) / (s * s) - v * v, v]
    }
}

/// Roots of `½σ²z² + μz − ρ = 0` at `x`: the log-derivatives of the locally
/// frozen-coefficient solutions.
fn local_roots(model: &DiffusionModel, x: f64) -> (f64, f64) {
    let s2 = model.volatility(x).powi(2);
    let mu = model.drift(x);
    let disc = (mu * mu + 2.0 * model.rho * s2).sqrt();
    ((-mu + disc) / s2, (-mu - disc) / s2)
}

impl NumericPair {
    fn build(model: &DiffusionModel, opts: &PairOptions) -> Result<Self> {
        let d0 = model.d0;
        let width = 10.0 * model.volatility(d0) / (2.0 * model.rho).sqrt();
        let mut attempt = 0;
        let (mut lo, mut hi) = match opts.window {
            Some(w) => w,
            None => (
                initial_cut(model.d_min, d0, -width),
                initial_cut(model.d_max, d0, width),
            ),
        };
        loop {
            if !(lo > model.d_min && hi < model.d_max && lo < d0 && d0 < hi) {
                return Err(Error::InvalidModel(format!(
                    "integration window [{lo}, {hi}] must be interior and contain d0"
                )));
            }
            let np = Self::solve(model, lo, hi, opts)?;
            let left_ok = np.tail_ok_left(model, opts.tail_ratio);
            let right_ok = np.tail_ok_right(model, opts.tail_ratio);
            if (left_ok && right_ok) || opts.window.is_some() {
                np.check_limits()?;
                return Ok(np);
            }
            attempt += 1;
            if attempt > 12 {
                return Err(Error::InvalidModel(
                    "could not find a window where the fundamental solutions' tails are negligible".into(),
                ));
            }
            if !left_ok {
                lo = widen(model.d_min, d0, lo);
            }
            if !right_ok {
                hi = widen(model.d_max, d0, hi);
            }
        }
    }

    fn solve(model: &DiffusionModel, lo: f64, hi: f64, opts: &PairOptions) -> Result<Self> {
        let ode_opts = OdeOptions {
            rel_tol: opts.ode_rel_tol,
            abs_tol: opts.ode_rel_tol * 1e-2,
            initial_step: (hi - lo) * 1e-6,
            ..OdeOptions::default()
        };
        let fpsi = riccati_psi(model);
        let fphi = riccati_phi(model);
        let u_lo = local_roots(model, lo).0;
        let v_hi = local_roots(model, hi).1;
        let psi_traj = ode::integrate(&fpsi, lo, [u_lo, 0.0, 0.0], hi, &ode_opts)?;
        let phi_traj = ode::integrate(&fphi, hi, [v_hi, 0.0], lo, &ode_opts)?;
        let y0 = psi_traj.eval(&fpsi, model.d0);
        let z0 = phi_traj.eval(&fphi, model.d0);
        Ok(Self {
            lo,
            hi,
            ln_psi0: y0[1],
            ln_s0: y0[2],
            u0: y0[0],
            ln_phi0: z0[1],
            v0: z0[0],
            psi_traj,
            phi_traj,
        })
    }

    fn wronskian_at_d0(&self) -> f64 {
        self.u0 - self.v0
    }

    fn raw(&self, model: &DiffusionModel, d: f64) -> ([f64; 3], [f64; 2]) {
        let fpsi = riccati_psi(model);
        let fphi = riccati_phi(model);
        (self.psi_traj.eval(&fpsi, d), self.phi_traj.eval(&fphi, d))
    }

    fn at(&self, d: f64, model: &DiffusionModel) -> PairPoint {
        if !(d >= self.lo && d <= self.hi) {
            return PairPoint::NAN;
        }
        let (y, z) = self.raw(model, d);
        let psi = (y[1] - self.ln_psi0).exp();
        let phi = (z[1] - self.ln_phi0).exp();
        let scale = (y[2] - self.ln_s0).exp();
        let s = model.volatility(d);
        let speed = 2.0 / (s * s * scale);
        PairPoint {
            psi,
            dpsi: y[0] * psi,
            phi,
            dphi: z[0] * phi,
            scale,
            speed,
            psi_speed: psi * speed,
            phi_speed: phi * speed,
        }
    }

    fn tail_ok_left(&self, model: &DiffusionModel, ratio: f64) -> bool {
        let p = self.at(self.lo, model);
        (p.dpsi / p.scale) <= ratio * self.u0
    }

    fn tail_ok_right(&self, model: &DiffusionModel, ratio: f64) -> bool {
        let p = self.at(self.hi, model);
        (-p.dphi / p.scale) <= ratio * (-self.v0)
    }

    fn check_limits(&self) -> Result<()> {
        if !(self.u0 > 0.0) || !(self.v0 < 0.0) {
            return Err(Error::InvalidModel(
                "fundamental solutions are not monotone at d0".into(),
            ));
        }
        let psi_lo = (self.psi_traj.ys[0][1] - self.ln_psi0).exp();
        let phi_hi = (self.phi_traj.ys[0][1] - self.ln_phi0).exp();
        if !(psi_lo < 1.0 && phi_hi < 1.0) {
            return Err(Error::InvalidModel(
                "fundamental solutions do not decay towards the boundaries".into(),
            ));
        }
        Ok(())
    }
}

fn initial_cut(end: f64, d0: f64, width: f64) -> f64 {
    if end.is_finite() {
        end + (d0 - end) * (-8.0f64).exp()
    } else {
        d0 + width
    }
}

fn widen(end: f64, d0: f64, cut: f64) -> f64 {
    if end.is_finite() {
        end + (cut - end) * (-4.0f64).exp()
    } else {
        d0 + 4.0 * (cut - d0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> DiffusionModel {
        DiffusionModel::gbm(0.0, 2f64.sqrt(), 6.0, 1.0).unwrap()
    }

    #[test]
    fn gbm_exponents_of_fast_instance() {
        let (m, n) = gbm_exponents(0.0, 2.0, 6.0);
        assert!((m - 3.0).abs() < 1e-14);
        assert!((n + 2.0).abs() < 1e-14);
    }

    #[test]
    fn gbm_rejects_weak_discount() {
        assert!(DiffusionModel::gbm(0.05, 0.3, 0.19, 1.0).is_err());
        assert!(DiffusionModel::gbm(0.0, 2f64.sqrt(), 2.0, 1.0).is_err());
    }

    #[test]
    fn densities_at_reference_point() {
        let m = DiffusionModel::gbm(0.05, 0.3, 1.0, 1.0).unwrap();
        assert_eq!(m.scale_density(1.0).unwrap(), 1.0);
        assert!((m.speed_density(1.0).unwrap() - 2.0 / 0.09).abs() < 1e-12);
        assert!(m.scale_density(0.0).is_err());
        assert!(m.scale_density(-1.0).is_err());
    }

    #[test]
    fn green_of_fast_instance() {
        let p = fast().fundamental_pair().unwrap();
        assert!((p.wronskian() - 5.0).abs() < 1e-14);
        assert!((p.green(1.0, 2.0).unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(p.green(2.0, 1.0).unwrap(), p.green(1.0, 2.0).unwrap());
    }

    #[test]
    fn exact_step_is_deterministic() {
        let m = fast();
        let a = m.sample_path(2.0, 0.01, 1.0, 11).unwrap();
        let b = m.sample_path(2.0, 0.01, 1.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times.len(), 101);
        assert_eq!(a.scheme, Scheme::ExactGbm);
    }

    #[test]
    fn euler_fold_keeps_interior() {
        let m = DiffusionModel::generic(|_| 0.0, |_| 5.0, 0.0, 1.0, 1.0, 0.5).unwrap();
        let p = m.sample_path(0.5, 0.1, 5.0, 3).unwrap();
        assert!(p.values.iter().all(|&d| d > 0.0 && d < 1.0));
    }

    #[test]
    fn coordinate_round_trips() {
        for (lo, hi) in [(0.0, f64::INFINITY), (f64::NEG_INFINITY, f64::INFINITY), (-1.0, 2.0), (f64::NEG_INFINITY, 3.0)] {
            let c = Coordinate::new(lo, hi);
            for d in [0.5, 1.0, 1.9] {
                assert!((c.from_z(c.to_z(d)) - d).abs() < 1e-14);
            }
            let g = c.grid(0.5, 1.9, 11);
            assert!(g.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn bridge_extremes_bracket_endpoints() {
        let m = fast();
        let (hi, lo) = m.bridge_extremes(1.0, 1.1, 1e-3, 0.3, 0.7);
        assert!(hi >= 1.1 && lo <= 1.0);
    }
}
