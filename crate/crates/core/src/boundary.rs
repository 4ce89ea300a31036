//! Free boundaries of the quadratic-cost problem.
//!
//! Inside the capacity band (c̲₋,g, c̄₊,g) both boundaries are pinned by the
//! pair of equations L₁ = L₂ = 0. They are solved by nesting: for fixed x the
//! unique root y*(x) of L₁(x, ·), then the root of x ↦ L₂(x, y*(x)). Outside
//! the band only one boundary exists and it has an explicit formula.

use std::fmt;

use rayon::prelude::*;

use crate::cost::{CoeffSample, QuadraticCost, ResolventCoeffs, Thresholds};
use crate::diffusion::{Coordinate, FundamentalPair};
use crate::error::{Error, Result};
use crate::numerics::{brent_bracketed, CubicHermite, RootOptions};

/// Partial derivatives of L₁, L₂ at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LPartials {
    pub l1_x: f64,
    pub l1_y: f64,
    pub l1_c: f64,
    pub l2_x: f64,
    pub l2_y: f64,
    pub l2_c: f64,
}

/// A solved point of the middle region together with its slopes in `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSolution {
    pub c: f64,
    /// Lower boundary d̂₋(c).
    pub x: f64,
    /// Upper boundary d̂₊(c).
    pub y: f64,
    pub l1: f64,
    pub l2: f64,
    pub dx_dc: f64,
    pub dy_dc: f64,
    /// Size of the boundary terms `(q⁺+q⁻)|ψ'/S'|` at y and `(q⁺+q⁻)|φ'/S'|`
    /// at x, against which L₁ and L₂ cancel.
    pub scale: (f64, f64),
}

impl PairSolution {
    pub fn residual(&self) -> f64 {
        self.l1.abs().max(self.l2.abs())
    }

    /// Residuals relative to `max(1, term size)`.
    pub fn relative_residual(&self) -> f64 {
        (self.l1.abs() / self.scale.0.max(1.0)).max(self.l2.abs() / self.scale.1.max(1.0))
    }
}

/// A point of a one-sided boundary: `c = ĉ(d)` and `dĉ/dd`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeNode {
    pub d: f64,
    pub c: f64,
    pub slope: f64,
}

/// Where a one-sided piece meets the middle region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Junction {
    pub d: f64,
    /// Value of the explicit one-sided formula at `d`.
    pub c_onesided: f64,
    /// Capacity of the middle-region solve at `d`.
    pub c_middle: f64,
    pub slope_onesided: f64,
    pub slope_middle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Invest,
    Continue,
    Disinvest,
}

impl Region {
    pub fn as_str(&self) -> &'static str {
        match self {
            Region::Invest => "invest",
            Region::Continue => "continue",
            Region::Disinvest => "disinvest",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a table has to cover, and how finely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TableSpec {
    pub d_range: (f64, f64),
    pub c_range: (f64, f64),
    /// Node spacing, in the transformed demand coordinate.
    pub step: f64,
    /// Allowed interpolation error (relative to `max(1, |c|)`) at mid-panel
    /// re-solves.
    pub tolerance: f64,
    /// Re-solve the midpoint of every `check_every`-th panel.
    pub check_every: usize,
}

impl TableSpec {
    pub fn new(d_range: (f64, f64), c_range: (f64, f64)) -> Self {
        Self {
            d_range,
            c_range,
            step: 0.025,
            tolerance: 1e-6,
            check_every: 4,
        }
    }
}

/// Running evaluation of `v0 + ∫_{d0}^{d} f`, starting each new integral at
/// the nearest point evaluated so far.
struct Walker<'a, F: Fn(f64) -> f64> {
    pair: &'a FundamentalPair,
    coord: Coordinate,
    f: F,
    known: Vec<(f64, f64, f64)>,
}

impl<'a, F: Fn(f64) -> f64> Walker<'a, F> {
    fn new(pair: &'a FundamentalPair, coord: Coordinate, f: F, d0: f64, v0: f64) -> Self {
        Self {
            pair,
            coord,
            f,
            known: vec![(coord.to_z(d0), d0, v0)],
        }
    }

    fn eval(&mut self, d: f64) -> Result<f64> {
        let z = self.coord.to_z(d);
        let &(_, dk, vk) = self
            .known
            .iter()
            .min_by(|a, b| (a.0 - z).abs().total_cmp(&(b.0 - z).abs()))
            .unwrap();
        if dk == d {
            return Ok(vk);
        }
        let f = &self.f;
        let v = vk + self.pair.integrate(f, dk, d)?;
        self.known.push((z, d, v));
        Ok(v)
    }
}

type Bracket = ((f64, f64), (f64, f64));

/// Brackets the sign change of a decreasing function of `z` by walking from
/// `z0` with doubling steps. `floor` is a point known to be positive, `ceil`
/// one known to be non-positive. `None` when the walk leaves the representable
/// range first.
pub(crate) fn bracket_decreasing<F>(f: &mut F, z0: f64, step: f64, floor: Option<f64>, ceil: Option<f64>) -> Result<Option<Bracket>>
where
    F: FnMut(f64) -> Result<Option<f64>>,
{
    let Some(f0) = f(z0)? else { return Ok(None) };
    if f0 == 0.0 {
        return Ok(Some(((z0, f0), (z0, f0))));
    }
    if f0 > 0.0 {
        let (mut za, mut fa) = (z0, f0);
        for k in 0..64 {
            let z = za + step * 2f64.powi(k);
            if let Some(zc) = ceil {
                if z >= zc {
                    let Some(fc) = f(zc)? else { return Ok(None) };
                    if fc > 0.0 {
                        return Err(Error::Root(format!("expected a sign change below z = {zc} (f = {fc:e})")));
                    }
                    return Ok(Some(((za, fa), (zc, fc))));
                }
            }
            let Some(fz) = f(z)? else { return Ok(None) };
            if fz <= 0.0 {
                return Ok(Some(((za, fa), (z, fz))));
            }
            za = z;
            fa = fz;
        }
    } else {
        let (mut zc, mut fc) = (z0, f0);
        for k in 0..64 {
            let z = zc - step * 2f64.powi(k);
            if let Some(za) = floor {
                if z <= za {
                    let Some(fa) = f(za)? else { return Ok(None) };
                    if fa <= 0.0 {
                        return Err(Error::Root(format!("expected a sign change above z = {za} (f = {fa:e})")));
                    }
                    return Ok(Some(((za, fa), (zc, fc))));
                }
            }
            let Some(fz) = f(z)? else { return Ok(None) };
            if fz > 0.0 {
                return Ok(Some(((z, fz), (zc, fc))));
            }
            zc = z;
            fc = fz;
        }
    }
    Ok(None)
}

pub(crate) fn solve_bracket<F>(f: &mut F, b: Bracket) -> Result<f64>
where
    F: FnMut(f64) -> Result<Option<f64>>,
{
    let ((za, fa), (zc, fc)) = b;
    if fa == 0.0 || za == zc {
        return Ok(za);
    }
    if fc == 0.0 {
        return Ok(zc);
    }
    let opts = RootOptions {
        x_abs: 4.0 * f64::EPSILON * (1.0 + za.abs().max(zc.abs())),
        x_rel: 0.0,
        f_abs: 0.0,
        max_iter: 200,
    };
    let root = brent_bracketed(
        |z| f(z)?.ok_or_else(|| Error::Root(format!("left the representable range at z = {z}"))),
        za,
        fa,
        zc,
        fc,
        &opts,
    )?;
    Ok(root.x)
}

/// The boundary equations of one model and cost.
#[derive(Debug, Clone)]
pub struct BoundarySystem {
    pair: FundamentalPair,
    cost: QuadraticCost,
    coeffs: ResolventCoeffs,
    thresholds: Thresholds,
    rho: f64,
    coord: Coordinate,
}

impl BoundarySystem {
    pub fn new(pair: &FundamentalPair, cost: &QuadraticCost) -> Self {
        let model = pair.model();
        Self {
            pair: pair.clone(),
            cost: cost.clone(),
            coeffs: ResolventCoeffs::new(pair, cost),
            thresholds: cost.thresholds(model),
            rho: model.rho(),
            coord: Coordinate::of(model),
        }
    }

    pub fn pair(&self) -> &FundamentalPair {
        &self.pair
    }

    pub fn cost(&self) -> &QuadraticCost {
        &self.cost
    }

    pub fn coeffs(&self) -> &ResolventCoeffs {
        &self.coeffs
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn coordinate(&self) -> Coordinate {
        self.coord
    }

    /// `(c̲₋,g, c̄₊,g)`.
    pub fn splits(&self) -> (f64, f64) {
        (self.thresholds.c_lower_minus_g(), self.thresholds.c_upper_plus_g())
    }

    /// Whether both boundaries exist for some capacity.
    pub fn has_middle(&self) -> bool {
        let (lo, hi) = self.splits();
        !self.cost.is_irreversible() && lo < hi
    }

    fn q_sum(&self) -> f64 {
        self.cost.q_plus() + self.cost.q_minus()
    }

    /// Points where ψ, φ and the densities are finite and positive.
    pub(crate) fn usable(&self, d: f64) -> bool {
        let m = self.pair.model();
        if !(d > m.d_min() && d < m.d_max()) || !self.pair.in_window(d) {
            return false;
        }
        let p = self.pair.at(d);
        p.psi > 0.0
            && p.phi > 0.0
            && p.psi.is_finite()
            && p.phi.is_finite()
            && p.psi_speed.is_finite()
            && p.phi_speed.is_finite()
            && p.dpsi.is_finite()
            && p.dphi.is_finite()
    }

    fn require_reversible(&self) -> Result<()> {
        if self.cost.is_irreversible() {
            Err(Error::InvalidArgument("the boundary equations need a finite disinvestment price".into()))
        } else {
            Ok(())
        }
    }

    fn l1_integrand(&self, c: f64) -> impl Fn(f64) -> f64 + '_ {
        let k = c + self.rho * self.cost.q_plus();
        move |h| self.pair.at(h).psi_speed * (k - self.cost.beta0().eval(h))
    }

    fn l2_integrand(&self, c: f64) -> impl Fn(f64) -> f64 + '_ {
        let k = c - self.rho * self.cost.q_minus();
        move |h| self.pair.at(h).phi_speed * (k - self.cost.beta0().eval(h))
    }

    fn check_pair(&self, x: f64, y: f64) -> Result<()> {
        self.require_reversible()?;
        self.pair.check(x)?;
        self.pair.check(y)
    }

    /// `L₁(x, y; c) = ∫_x^y ψ (g_c + ρq⁺) m' + (q⁺ + q⁻) ψ'(x)/S'(x)`.
    pub fn eval_l1(&self, x: f64, y: f64, c: f64) -> Result<f64> {
        self.check_pair(x, y)?;
        let i = self.pair.integrate(self.l1_integrand(c), x, y)?;
        Ok(i + self.q_sum() * self.pair.psi_flux(x))
    }

    /// `L₂(x, y; c) = ∫_x^y φ (g_c − ρq⁻) m' + (q⁺ + q⁻) φ'(y)/S'(y)`.
    pub fn eval_l2(&self, x: f64, y: f64, c: f64) -> Result<f64> {
        self.check_pair(x, y)?;
        let i = self.pair.integrate(self.l2_integrand(c), x, y)?;
        Ok(i + self.q_sum() * self.pair.phi_flux(y))
    }

    /// L₁ as originally stated, `∫_x^y ψ g_c m' + q⁺ψ'(y)/S'(y) + q⁻ψ'(x)/S'(x)`.
    pub fn eval_l1_direct(&self, x: f64, y: f64, c: f64) -> Result<f64> {
        self.check_pair(x, y)?;
        let i = self
            .pair
            .integrate(|h| self.pair.at(h).psi_speed * (c - self.cost.beta0().eval(h)), x, y)?;
        Ok(i + self.cost.q_plus() * self.pair.psi_flux(y) + self.cost.q_minus() * self.pair.psi_flux(x))
    }

    /// L₂ as originally stated, `∫_x^y φ g_c m' + q⁺φ'(y)/S'(y) + q⁻φ'(x)/S'(x)`.
    pub fn eval_l2_direct(&self, x: f64, y: f64, c: f64) -> Result<f64> {
        self.check_pair(x, y)?;
        let i = self
            .pair
            .integrate(|h| self.pair.at(h).phi_speed * (c - self.cost.beta0().eval(h)), x, y)?;
        Ok(i + self.cost.q_plus() * self.pair.phi_flux(y) + self.cost.q_minus() * self.pair.phi_flux(x))
    }

    pub fn partials(&self, x: f64, y: f64, c: f64) -> Result<LPartials> {
        self.check_pair(x, y)?;
        let (qp, qm) = (self.cost.q_plus(), self.cost.q_minus());
        let gx = self.cost.marginal_cost(c, x);
        let gy = self.cost.marginal_cost(c, y);
        let (px, py) = (self.pair.at(x), self.pair.at(y));
        let (fx, fy) = (px.dpsi / px.scale, py.dpsi / py.scale);
        let (hx, hy) = (px.dphi / px.scale, py.dphi / py.scale);
        Ok(LPartials {
            l1_x: -px.psi_speed * (gx - self.rho * qm),
            l1_y: py.psi_speed * (gy + self.rho * qp),
            l1_c: (fy - fx) / self.rho,
            l2_x: -px.phi_speed * (gx - self.rho * qm),
            l2_y: py.phi_speed * (gy + self.rho * qp),
            l2_c: (hy - hx) / self.rho,
        })
    }

    /// The root `y*(x; c)` of `L₁(x, ·; c)` in `(d*₊(c), d_max)`, or `None`
    /// when no sign change is found inside the representable range.
    pub fn inner_root_y(&self, x: f64, c: f64) -> Result<Option<f64>> {
        self.inner_root(x, c, None)
    }

    fn inner_root(&self, x: f64, c: f64, hint: Option<f64>) -> Result<Option<f64>> {
        self.require_reversible()?;
        if !(c < self.thresholds.c_upper_plus_g()) || !self.usable(x) {
            return Ok(None);
        }
        let base = x.max(self.thresholds.dstar_plus(c)?);
        if !self.usable(base) {
            return Ok(None);
        }
        let zb = self.coord.to_z(base);
        let start = self.q_sum() * self.pair.psi_flux(x);
        let mut walker = Walker::new(&self.pair, self.coord, self.l1_integrand(c), x, start);
        let mut f = |z: f64| -> Result<Option<f64>> {
            let d = self.coord.from_z(z);
            if !self.usable(d) {
                return Ok(None);
            }
            walker.eval(d).map(Some)
        };
        let (z0, step) = match hint {
            Some(h) if h > base && self.usable(h) => (self.coord.to_z(h), 0.02),
            _ => (zb, 0.25),
        };
        let Some(b) = bracket_decreasing(&mut f, z0, step, Some(zb), None)? else {
            return Ok(None);
        };
        let z = solve_bracket(&mut f, b)?;
        Ok(Some(self.coord.from_z(z)))
    }

    /// `x ↦ L₂(x, y*(x; c); c)`, decreasing on `(d_min, d*₋(c))`.
    pub fn outer_function(&self, x: f64, c: f64) -> Result<Option<f64>> {
        match self.inner_root_y(x, c)? {
            Some(y) => Ok(Some(self.eval_l2(x, y, c)?)),
            None => Ok(None),
        }
    }

    /// Both boundaries at capacity `c`; `None` outside `(c̲₋,g, c̄₊,g)`.
    pub fn solve_pair(&self, c: f64) -> Result<Option<PairSolution>> {
        self.solve_pair_near(c, None)
    }

    /// As [`solve_pair`](Self::solve_pair), with a guess `(x, y)` that only
    /// affects where the bracket searches start.
    pub fn solve_pair_near(&self, c: f64, guess: Option<(f64, f64)>) -> Result<Option<PairSolution>> {
        let (lo, hi) = self.splits();
        if self.cost.is_irreversible() || !(c > lo && c < hi) {
            return Ok(None);
        }
        let dm = self.thresholds.dstar_minus(c)?;
        if !self.usable(dm) {
            return Ok(None);
        }
        let z_ceil = self.coord.to_z(dm);
        let mut y_hint = guess.map(|g| g.1);
        let mut g = |z: f64| -> Result<Option<f64>> {
            let x = self.coord.from_z(z);
            if !self.usable(x) {
                return Ok(None);
            }
            match self.inner_root(x, c, y_hint)? {
                Some(y) => {
                    y_hint = Some(y);
                    Ok(Some(self.eval_l2(x, y, c)?))
                }
                None => Ok(None),
            }
        };
        let (z0, step) = match guess {
            Some((gx, _)) if gx < dm && self.usable(gx) => (self.coord.to_z(gx), 0.02),
            _ => (z_ceil - 0.25, 0.25),
        };
        let Some(b) = bracket_decreasing(&mut g, z0, step, None, Some(z_ceil))? else {
            return Ok(None);
        };
        let zx = solve_bracket(&mut g, b)?;
        let x = self.coord.from_z(zx);
        let Some(y) = self.inner_root(x, c, y_hint)? else {
            return Err(Error::Root(format!("inner root lost at x = {x}, c = {c}")));
        };
        self.finish(c, x, y).map(Some)
    }

    /// Fresh residuals, one guarded Newton step, and the slopes in `c`.
    fn finish(&self, c: f64, mut x: f64, mut y: f64) -> Result<PairSolution> {
        let mut l1 = self.eval_l1(x, y, c)?;
        let mut l2 = self.eval_l2(x, y, c)?;
        let p = self.partials(x, y, c)?;
        let det = p.l1_x * p.l2_y - p.l1_y * p.l2_x;
        let dx = -(p.l2_y * l1 - p.l1_y * l2) / det;
        let dy = -(-p.l2_x * l1 + p.l1_x * l2) / det;
        let (nx, ny) = (x + dx, y + dy);
        if dx.is_finite() && dy.is_finite() && nx < ny && self.usable(nx) && self.usable(ny) {
            let (m1, m2) = (self.eval_l1(nx, ny, c)?, self.eval_l2(nx, ny, c)?);
            if m1.abs().max(m2.abs()) < l1.abs().max(l2.abs()) {
                (x, y, l1, l2) = (nx, ny, m1, m2);
            }
        }
        let p = self.partials(x, y, c)?;
        let det = p.l1_x * p.l2_y - p.l1_y * p.l2_x;
        Ok(PairSolution {
            c,
            x,
            y,
            l1,
            l2,
            dx_dc: -(p.l2_y * p.l1_c - p.l1_y * p.l2_c) / det,
            dy_dc: -(-p.l2_x * p.l1_c + p.l1_x * p.l2_c) / det,
            scale: (
                self.q_sum() * self.pair.psi_flux(y).abs(),
                self.q_sum() * self.pair.phi_flux(x).abs(),
            ),
        })
    }

    /// `d̂₊(c)` from the one-sided formula, searching from `hint`. `None` when
    /// the level is not reached inside the representable range.
    pub fn onesided_dhat_plus(&self, c: f64, hint: f64) -> Result<Option<f64>> {
        self.invert_onesided(c, hint, |d| self.chat_plus_onesided(d))
    }

    pub fn onesided_dhat_minus(&self, c: f64, hint: f64) -> Result<Option<f64>> {
        self.invert_onesided(c, hint, |d| self.chat_minus_onesided(d))
    }

    fn invert_onesided<F: Fn(f64) -> Result<f64>>(&self, c: f64, hint: f64, edge: F) -> Result<Option<f64>> {
        let mut f = |z: f64| -> Result<Option<f64>> {
            let d = self.coord.from_z(z);
            if !self.usable(d) {
                return Ok(None);
            }
            Ok(Some(c - edge(d)?))
        };
        let z0 = self.coord.to_z(hint);
        let Some(b) = bracket_decreasing(&mut f, z0, 0.01, None, None)? else {
            return Ok(None);
        };
        let z = solve_bracket(&mut f, b)?;
        Ok(Some(self.coord.from_z(z)))
    }

    /// `ĉ₊(d) = ρ[β(d) − (ψ/ψ')(d) β'(d) − q⁺]`, valid below the lower junction.
    pub fn chat_plus_onesided(&self, d: f64) -> Result<f64> {
        Ok(self.onesided_plus(d)?.c)
    }

    /// `ĉ₋(d) = ρ[β(d) − (φ/φ')(d) β'(d) + q⁻]`, valid above the upper junction.
    pub fn chat_minus_onesided(&self, d: f64) -> Result<f64> {
        Ok(self.onesided_minus(d)?.c)
    }

    pub fn onesided_plus(&self, d: f64) -> Result<EdgeNode> {
        Ok(self.onesided_plus_from(&self.coeffs.at(d)?))
    }

    pub fn onesided_plus_from(&self, s: &CoeffSample) -> EdgeNode {
        let d = s.d;
        let p = self.pair.at(d);
        let qp = self.cost.q_plus();
        let c = self.rho * (s.beta - p.psi / p.dpsi * s.beta_p - qp);
        let sig = self.pair.model().volatility(d);
        let slope = 2.0 * self.rho * p.psi / (sig * sig * p.dpsi) * (self.cost.beta0().eval(d) - c - self.rho * qp);
        EdgeNode { d, c, slope }
    }

    pub fn onesided_minus(&self, d: f64) -> Result<EdgeNode> {
        if self.cost.is_irreversible() {
            return Ok(EdgeNode {
                d,
                c: f64::INFINITY,
                slope: 0.0,
            });
        }
        Ok(self.onesided_minus_from(&self.coeffs.at(d)?))
    }

    pub fn onesided_minus_from(&self, s: &CoeffSample) -> EdgeNode {
        let d = s.d;
        let p = self.pair.at(d);
        let qm = self.cost.q_minus();
        let c = self.rho * (s.beta - p.phi / p.dphi * s.beta_p + qm);
        let sig = self.pair.model().volatility(d);
        let slope = 2.0 * self.rho * p.phi / (sig * sig * p.dphi) * (self.cost.beta0().eval(d) - c + self.rho * qm);
        EdgeNode { d, c, slope }
    }

    /// Builds the boundary table, halving the node spacing (at most three
    /// times) until mid-panel re-solves agree with the interpolants.
    pub fn tabulate(&self, spec: &TableSpec) -> Result<BoundaryTable> {
        let (d_lo, d_hi) = spec.d_range;
        if !(d_lo < d_hi) || !self.usable(d_lo) || !self.usable(d_hi) {
            return Err(Error::InvalidArgument(format!(
                "demand range [{d_lo}, {d_hi}] must be increasing and interior"
            )));
        }
        if !(spec.c_range.0 < spec.c_range.1) || !(spec.step > 0.0) {
            return Err(Error::InvalidArgument("capacity range must be increasing and the step positive".into()));
        }
        let mut step = spec.step;
        let mut round = 0;
        loop {
            let mut table = self.build(spec, step)?;
            table.interp_error = self.check_table(&table, spec)?;
            if table.interp_error <= spec.tolerance || round == 3 {
                return Ok(table);
            }
            step *= 0.5;
            round += 1;
        }
    }

    fn build(&self, spec: &TableSpec, h: f64) -> Result<BoundaryTable> {
        let (clo, chi) = self.splits();
        let (d_lo, d_hi) = spec.d_range;
        let (c_lo, c_hi) = spec.c_range;
        let middle = if self.has_middle() { self.march(spec, h)? } else { Vec::new() };

        let lower = if clo > f64::NEG_INFINITY {
            let top = match middle.first() {
                Some(m) => m.y,
                None => self.extend(d_hi, 1.0, |d| Ok(self.onesided_plus(d)?.c < c_hi))?,
            };
            let bottom = self.extend(d_lo.min(top), -1.0, |d| Ok(self.onesided_plus(d)?.c > c_lo))?;
            self.edge(bottom, top, h, |d| self.onesided_plus(d))?
        } else {
            Vec::new()
        };

        let upper = if chi < f64::INFINITY && !self.cost.is_irreversible() {
            let bottom = match middle.last() {
                Some(m) => m.x,
                None => self.extend(d_lo, -1.0, |d| Ok(self.onesided_minus(d)?.c > c_lo))?,
            };
            let top = self.extend(d_hi.max(bottom), 1.0, |d| Ok(self.onesided_minus(d)?.c < c_hi))?;
            self.edge(bottom, top, h, |d| self.onesided_minus(d))?
        } else {
            Vec::new()
        };
        BoundaryTable::assemble(self, *spec, middle, lower, upper)
    }

    /// Moves from `d` in unit steps of the transformed coordinate (at most 40)
    /// while `more` holds.
    fn extend<F: Fn(f64) -> Result<bool>>(&self, d: f64, dir: f64, more: F) -> Result<f64> {
        let mut d = d;
        for _ in 0..40 {
            if !more(d)? {
                break;
            }
            let next = self.coord.from_z(self.coord.to_z(d) + dir);
            if !self.usable(next) {
                break;
            }
            d = next;
        }
        Ok(d)
    }

    fn edge<F>(&self, bottom: f64, top: f64, h: f64, node: F) -> Result<Vec<EdgeNode>>
    where
        F: Fn(f64) -> Result<EdgeNode> + Sync,
    {
        if !(top > bottom) {
            return Ok(vec![node(top)?]);
        }
        let span = self.coord.to_z(top) - self.coord.to_z(bottom);
        let n = (span / h).ceil().max(1.0) as usize + 1;
        let nodes = self
            .coord
            .grid(bottom, top, n)
            .into_par_iter()
            .map(&node)
            .collect::<Result<Vec<_>>>()?;
        let mut out: Vec<EdgeNode> = Vec::with_capacity(nodes.len());
        for n in nodes {
            if !n.c.is_finite() {
                return Err(Error::NonFinite { at: n.d });
            }
            match out.last() {
                Some(p) if n.c <= p.c && n.d != top => continue,
                Some(p) if n.c <= p.c => {
                    out.pop();
                }
                _ => {}
            }
            out.push(n);
        }
        Ok(out)
    }

    /// Solves the middle region along a capacity grid adapted to the motion
    /// of the boundaries, starting next to a finite end of the band.
    fn march(&self, spec: &TableSpec, h: f64) -> Result<Vec<PairSolution>> {
        let (clo, chi) = self.splits();
        let eps = 1e-6 * self.rho * self.q_sum();
        let start = if clo.is_finite() {
            clo + eps
        } else if chi.is_finite() {
            chi - eps
        } else {
            self.cost.beta0().eval(self.pair.model().d0())
        };
        let first = self
            .solve_pair(start)?
            .ok_or_else(|| Error::NoSolution(format!("boundary equations have no solution at c = {start}")))?;
        let mut down = if clo.is_finite() { Vec::new() } else { self.walk(spec, h, first, -1.0, eps)? };
        let up = if chi.is_finite() && !clo.is_finite() { Vec::new() } else { self.walk(spec, h, first, 1.0, eps)? };
        down.reverse();
        down.push(first);
        down.extend(up);
        Ok(down)
    }

    fn walk(&self, spec: &TableSpec, h: f64, from: PairSolution, dir: f64, eps: f64) -> Result<Vec<PairSolution>> {
        let (clo, chi) = self.splits();
        let (d_lo, d_hi) = spec.d_range;
        let (c_lo, c_hi) = spec.c_range;
        let z_lo = self.coord.to_z(d_lo) - 1.0;
        let end = if dir > 0.0 { chi - eps } else { clo + eps };
        let mut out = Vec::new();
        let mut cur = from;
        let mut prev = f64::INFINITY;
        for _ in 0..50_000 {
            if end.is_finite() {
                if (end - cur.c) * dir <= 0.0 {
                    break;
                }
            } else if (dir > 0.0 && cur.x >= d_hi && cur.c >= c_hi) || (dir < 0.0 && cur.y <= d_lo && cur.c <= c_lo) {
                break;
            }
            let rate_y = cur.dy_dc.abs() / self.coord.jacobian(cur.y);
            let rate_x = if self.coord.to_z(cur.x) >= z_lo {
                cur.dx_dc.abs() / self.coord.jacobian(cur.x)
            } else {
                0.0
            };
            let mut dc = (h / rate_x.max(rate_y)).min(2.0 * prev);
            // grow geometrically away from a finite end of the band
            let behind = if dir > 0.0 { cur.c - clo } else { chi - cur.c };
            if behind.is_finite() {
                dc = dc.min(behind.max(eps));
            }
            let mut next_c = cur.c + dir * dc;
            if end.is_finite() {
                let remaining = (end - cur.c) * dir;
                dc = dc.min(0.5 * remaining);
                next_c = if remaining - dc < eps { end } else { cur.c + dir * dc };
            }
            if !dc.is_finite() || dc <= 0.0 {
                return Err(Error::NoSolution(format!("boundary march stalled at c = {}", cur.c)));
            }
            let s = next_c - cur.c;
            let guess = (cur.x + cur.dx_dc * s, cur.y + cur.dy_dc * s);
            let guess = (guess.0 < guess.1 && guess.0.is_finite() && guess.1.is_finite()).then_some(guess);
            let Some(next) = self.solve_pair_near(next_c, guess)? else {
                // the solve can leave the representable range once the
                // demand range is covered
                let covered = if dir > 0.0 { cur.x >= d_hi } else { cur.y <= d_lo };
                if covered && !end.is_finite() {
                    break;
                }
                return Err(Error::NoSolution(format!("boundary equations have no solution at c = {next_c}")));
            };
            out.push(next);
            prev = s.abs();
            cur = next;
        }
        Ok(out)
    }

    /// Largest relative mismatch between the interpolated boundaries and
    /// direct solves at panel midpoints.
    fn check_table(&self, table: &BoundaryTable, spec: &TableSpec) -> Result<f64> {
        let every = spec.check_every.max(1);
        let z_lo = self.coord.to_z(spec.d_range.0);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        let mid_errs = (0..table.middle.len().saturating_sub(1))
            .into_par_iter()
            .filter(|i| i % every == 0)
            .map(|i| {
                let (a, b) = (table.middle[i], table.middle[i + 1]);
                let c = 0.5 * (a.c + b.c);
                let Some(s) = self.solve_pair_near(c, Some((0.5 * (a.x + b.x), 0.5 * (a.y + b.y))))? else {
                    // as in the march, panels past the demand range may be unsolvable
                    if a.y.max(b.y) <= spec.d_range.0 || a.x.min(b.x) >= spec.d_range.1 {
                        return Ok(0.0);
                    }
                    return Err(Error::NoSolution(format!("no solution at c = {c}")));
                };
                let mut e = rel(table.chat_plus(s.y), c);
                if self.coord.to_z(s.x) >= z_lo {
                    e = e.max(rel(table.chat_minus(s.x), c));
                }
                Ok(e)
            })
            .collect::<Result<Vec<f64>>>()?;
        let edge_err = |nodes: &[EdgeNode], plus: bool| -> Result<f64> {
            (0..nodes.len().saturating_sub(1))
                .into_par_iter()
                .filter(|i| i % every == 0)
                .map(|i| {
                    let z = 0.5 * (self.coord.to_z(nodes[i].d) + self.coord.to_z(nodes[i + 1].d));
                    let d = self.coord.from_z(z);
                    if plus {
                        Ok(rel(table.chat_plus(d), self.onesided_plus(d)?.c))
                    } else {
                        Ok(rel(table.chat_minus(d), self.onesided_minus(d)?.c))
                    }
                })
                .collect::<Result<Vec<f64>>>()
                .map(|v| v.into_iter().fold(0.0, f64::max))
        };
        let lo = edge_err(&table.lower, true)?;
        let hi = edge_err(&table.upper, false)?;
        Ok(mid_errs.into_iter().fold(lo.max(hi), f64::max))
    }
}

/// Cubic Hermite with Fritsch–Carlson limiting: each end slope of an
/// increasing segment is clipped to `[0, 3δ]`, which keeps the interpolant
/// monotone whatever the supplied slopes.
fn monotone_hermite(xs: Vec<f64>, ys: Vec<f64>, mut left: Vec<f64>, mut right: Vec<f64>) -> Result<CubicHermite> {
    for i in 0..xs.len().saturating_sub(1) {
        let delta = (ys[i + 1] - ys[i]) / (xs[i + 1] - xs[i]);
        let cap = 3.0 * delta.max(0.0);
        let clip = |s: f64| if s.is_nan() { cap } else { s.clamp(0.0, cap) };
        right[i] = clip(right[i]);
        left[i + 1] = clip(left[i + 1]);
    }
    CubicHermite::with_kinks(xs, ys, left, right)
}

#[derive(Default)]
struct Knots {
    xs: Vec<f64>,
    ys: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
}

impl Knots {
    fn push(&mut self, x: f64, y: f64, left: f64, right: f64) {
        self.xs.push(x);
        self.ys.push(y);
        self.left.push(left);
        self.right.push(right);
    }

    fn pop(&mut self) {
        self.xs.pop();
        self.ys.pop();
        self.left.pop();
        self.right.pop();
    }

    fn build(self) -> Result<Option<CubicHermite>> {
        match self.xs.len() {
            0 => Ok(None),
            1 => {
                // a single node: extend it by its tangent
                let (x, y, s) = (self.xs[0], self.ys[0], self.right[0]);
                let s = if s.is_finite() { s } else { 0.0 };
                let dx = 1e-9 * x.abs().max(1.0);
                CubicHermite::new(vec![x, x + dx], vec![y, y + s * dx], vec![s, s]).map(Some)
            }
            _ => monotone_hermite(self.xs, self.ys, self.left, self.right).map(Some),
        }
    }
}

/// The boundaries over a working range: the solved middle region, the
/// one-sided pieces, and interpolants for `ĉ±` and their pseudo-inverses
/// `d̂±`. Outside the tabulated nodes the interpolants extend linearly.
#[derive(Debug, Clone)]
pub struct BoundaryTable {
    spec: TableSpec,
    splits: (f64, f64),
    d_min: f64,
    d_max: f64,
    middle: Vec<PairSolution>,
    lower: Vec<EdgeNode>,
    upper: Vec<EdgeNode>,
    chat_plus: Option<CubicHermite>,
    chat_minus: Option<CubicHermite>,
    dhat_plus: Option<CubicHermite>,
    dhat_minus: Option<CubicHermite>,
    lower_junction: Option<Junction>,
    upper_junction: Option<Junction>,
    /// Largest relative mismatch found by the mid-panel re-solves.
    pub interp_error: f64,
}

impl BoundaryTable {
    fn assemble(
        sys: &BoundarySystem,
        spec: TableSpec,
        middle: Vec<PairSolution>,
        lower: Vec<EdgeNode>,
        upper: Vec<EdgeNode>,
    ) -> Result<Self> {
        let mut cp = Knots::default();
        let mut dp = Knots::default();
        let mut lower_junction = None;
        for n in &lower {
            cp.push(n.d, n.c, n.slope, n.slope);
            dp.push(n.c, n.d, 1.0 / n.slope, 1.0 / n.slope);
        }
        for (i, m) in middle.iter().enumerate() {
            let s = 1.0 / m.dy_dc;
            if i == 0 {
                if let Some(last) = lower.last() {
                    cp.pop();
                    dp.pop();
                    cp.push(m.y, m.c, last.slope, s);
                    dp.push(m.c, m.y, 1.0 / last.slope, m.dy_dc);
                    lower_junction = Some(Junction {
                        d: m.y,
                        c_onesided: last.c,
                        c_middle: m.c,
                        slope_onesided: last.slope,
                        slope_middle: s,
                    });
                    continue;
                }
            }
            cp.push(m.y, m.c, s, s);
            dp.push(m.c, m.y, m.dy_dc, m.dy_dc);
        }

        let mut cm = Knots::default();
        let mut dm = Knots::default();
        for m in &middle {
            cm.push(m.x, m.c, 1.0 / m.dx_dc, 1.0 / m.dx_dc);
            dm.push(m.c, m.x, m.dx_dc, m.dx_dc);
        }
        let mut upper_junction = None;
        for (i, n) in upper.iter().enumerate() {
            if i == 0 {
                if let Some(m) = middle.last() {
                    cm.pop();
                    dm.pop();
                    cm.push(m.x, m.c, 1.0 / m.dx_dc, n.slope);
                    dm.push(m.c, m.x, m.dx_dc, 1.0 / n.slope);
                    upper_junction = Some(Junction {
                        d: m.x,
                        c_onesided: n.c,
                        c_middle: m.c,
                        slope_onesided: n.slope,
                        slope_middle: 1.0 / m.dx_dc,
                    });
                    continue;
                }
            }
            cm.push(n.d, n.c, n.slope, n.slope);
            dm.push(n.c, n.d, 1.0 / n.slope, 1.0 / n.slope);
        }
        let model = sys.pair().model();
        Ok(Self {
            spec,
            splits: sys.splits(),
            d_min: model.d_min(),
            d_max: model.d_max(),
            chat_plus: cp.build()?,
            chat_minus: cm.build()?,
            dhat_plus: dp.build()?,
            dhat_minus: dm.build()?,
            middle,
            lower,
            upper,
            lower_junction,
            upper_junction,
            interp_error: 0.0,
        })
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    /// `(c̲₋,g, c̄₊,g)`.
    pub fn splits(&self) -> (f64, f64) {
        self.splits
    }

    pub fn middle(&self) -> &[PairSolution] {
        &self.middle
    }

    /// One-sided nodes of `ĉ₊` (capacities at or below `c̲₋,g`).
    pub fn lower_edge(&self) -> &[EdgeNode] {
        &self.lower
    }

    /// One-sided nodes of `ĉ₋` (capacities at or above `c̄₊,g`).
    pub fn upper_edge(&self) -> &[EdgeNode] {
        &self.upper
    }

    pub fn lower_junction(&self) -> Option<Junction> {
        self.lower_junction
    }

    pub fn upper_junction(&self) -> Option<Junction> {
        self.upper_junction
    }

    /// `ĉ₊(d)`; `−∞` when there is no investment boundary.
    pub fn chat_plus(&self, d: f64) -> f64 {
        self.chat_plus.as_ref().map_or(f64::NEG_INFINITY, |h| h.eval(d))
    }

    /// `ĉ₋(d)`; `+∞` when there is no disinvestment boundary.
    pub fn chat_minus(&self, d: f64) -> f64 {
        self.chat_minus.as_ref().map_or(f64::INFINITY, |h| h.eval(d))
    }

    pub fn chat_plus_with_slope(&self, d: f64) -> (f64, f64) {
        self.chat_plus.as_ref().map_or((f64::NEG_INFINITY, 0.0), |h| h.eval2(d))
    }

    pub fn chat_minus_with_slope(&self, d: f64) -> (f64, f64) {
        self.chat_minus.as_ref().map_or((f64::INFINITY, 0.0), |h| h.eval2(d))
    }

    /// `d̂₊(c)`: demand at and above which capacity `c` is raised.
    pub fn dhat_plus(&self, c: f64) -> f64 {
        if c >= self.splits.1 {
            return self.d_max;
        }
        match &self.dhat_plus {
            Some(h) => h.eval(c).clamp(self.d_min, self.d_max),
            None => self.d_max,
        }
    }

    /// `d̂₋(c)`: demand at and below which capacity `c` is lowered.
    pub fn dhat_minus(&self, c: f64) -> f64 {
        if c <= self.splits.0 {
            return self.d_min;
        }
        match &self.dhat_minus {
            Some(h) => h.eval(c).clamp(self.d_min, self.d_max),
            None => self.d_min,
        }
    }

    /// Closed action regions. A point on `ĉ₊` up to rounding counts as Invest.
    pub fn classify(&self, c: f64, d: f64) -> Region {
        let plus = self.chat_plus(d);
        if c <= plus + 1e-12 * plus.abs().max(1.0) {
            return Region::Invest;
        }
        let minus = self.chat_minus(d);
        if c >= minus - 1e-12 * minus.abs().max(1.0) {
            Region::Disinvest
        } else {
            Region::Continue
        }
    }

    /// Rows `(c, x*, y*)` over every capacity node. One-sided nodes report
    /// the missing boundary as the corresponding end of the state interval.
    pub fn c_rows(&self) -> Vec<[f64; 3]> {
        let mut rows: Vec<[f64; 3]> = self.lower.iter().map(|n| [n.c, self.d_min, n.d]).collect();
        if !self.middle.is_empty() {
            if !self.lower.is_empty() {
                rows.pop();
            }
            rows.extend(self.middle.iter().map(|m| [m.c, m.x, m.y]));
        }
        let skip = usize::from(!self.middle.is_empty());
        rows.extend(self.upper.iter().skip(skip).map(|n| [n.c, n.d, self.d_max]));
        rows
    }

    /// Rows `(d, ĉ₊(d), ĉ₋(d))` at the given demand levels.
    pub fn d_rows(&self, ds: &[f64]) -> Vec<[f64; 3]> {
        ds.iter().map(|&d| [d, self.chat_plus(d), self.chat_minus(d)]).collect()
    }
}
