//! The value function `v(c, d)`, pieced together from the boundary table:
//! `Aψ + Bφ + V̂` between the boundaries, affine in `c` beyond them.
//!
//! `A` and `B` are recovered by integrating their capacity derivatives. In the
//! middle region those come from the two smooth-fit conditions at `x*(c)` and
//! `y*(c)`; in the one-sided regions only one boundary is active and the
//! derivative has a closed expression in terms of `β` and `ψ` (or `φ`).

use rayon::prelude::*;
use serde::Serialize;
use std::cell::RefCell;

use crate::boundary::{BoundarySystem, BoundaryTable, EdgeNode, PairSolution, Region, TableSpec};
use crate::cost::QuadraticCost;
use crate::diffusion::FundamentalPair;
use crate::numerics::{integrate, QuadOptions, QuinticHermite, GL5};
use crate::{Error, Result};

/// Interpolation budget for `A` and `B`, in units of the value function.
pub const COEFF_BUDGET: f64 = 1e-7;

/// How many capacity scales the tail integrals of `A'`, `B'` are carried
/// before switching to a fitted power law.
const TAIL_SCALES: f64 = 1e5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeffDerivatives {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub b2: f64,
}

/// `v` and its derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub v_c: f64,
    pub v_d: f64,
    pub v_dd: f64,
    pub v_cc: f64,
    pub v_cd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViPoint {
    pub c: f64,
    pub d: f64,
    pub region: Region,
    pub lv_minus_g: f64,
    /// `−v_c − q⁺`
    pub invest_term: f64,
    /// `v_c − q⁻`
    pub disinvest_term: f64,
    /// The maximum of the three terms.
    pub residual: f64,
    /// Set when the difference stencil for `v_dd` had to be one-sided.
    pub one_sided: bool,
}

/// Smooth-fit residuals at one capacity. `minus` is taken at `x*(c)`,
/// `plus` at `y*(c)`; a side is `None` when that boundary does not exist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothFit {
    pub c: f64,
    /// `A'ψ' + B'φ' + V̂_cd` at `x*(c)`.
    pub minus: Option<f64>,
    pub plus: Option<f64>,
    /// `A'ψ + B'φ + V̂_c − q⁻` at `x*(c)`.
    pub c1_minus: Option<f64>,
    /// `A'ψ + B'φ + V̂_c + q⁺` at `y*(c)`.
    pub c1_plus: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SurfaceRow {
    pub c: f64,
    pub d: f64,
    pub v: f64,
    pub v_c: f64,
    pub region: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoeffRow {
    pub c: f64,
    pub a: f64,
    pub a_c: f64,
    pub b: f64,
    pub b_c: f64,
}

/// `(value, first, second derivative)` of a coefficient curve.
type Triple = (f64, f64, f64);

#[derive(Debug, Clone)]
struct Curve {
    h: Option<QuinticHermite>,
    /// Interval on which evaluation is allowed; may extend a little past the
    /// last knot up to a finite split point.
    lo: f64,
    hi: f64,
}

impl Curve {
    fn build(knots: Knots, lo_ext: Option<f64>, hi_ext: Option<f64>) -> Result<Self> {
        if knots.c.len() < 2 {
            return Ok(Self {
                h: None,
                lo: f64::NAN,
                hi: f64::NAN,
            });
        }
        let lo = lo_ext.unwrap_or(knots.c[0]);
        let hi = hi_ext.unwrap_or(*knots.c.last().unwrap());
        Ok(Self {
            h: Some(QuinticHermite::new(knots.c, knots.v, knots.d1, knots.d2)?),
            lo,
            hi,
        })
    }

    fn eval(&self, what: &'static str, c: f64) -> Result<Triple> {
        match &self.h {
            Some(h) if c >= self.lo && c <= self.hi => Ok(h.eval3(c)),
            _ => Err(Error::OutOfTable {
                what,
                value: c,
                lo: self.lo,
                hi: self.hi,
            }),
        }
    }
}

#[derive(Debug, Default)]
struct Knots {
    c: Vec<f64>,
    v: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl Knots {
    fn push(&mut self, c: f64, v: f64, d1: f64, d2: f64) {
        if self.c.last().is_some_and(|&l| c <= l) {
            return;
        }
        self.c.push(c);
        self.v.push(v);
        self.d1.push(d1);
        self.d2.push(d2);
    }
}

#[derive(Debug, Clone)]
pub struct ValueFunction {
    sys: BoundarySystem,
    table: BoundaryTable,
    a: Curve,
    b: Curve,
    splits: (f64, f64),
    /// Largest mid-panel deviation of the `A`, `B` interpolants, weighted by
    /// `ψ`, `φ` at the active boundary so that it is in units of `v`.
    pub coeff_error: f64,
}

impl ValueFunction {
    /// Tabulates the boundaries and recovers `A`, `B`, halving the table step
    /// (at most twice) until the coefficient interpolants meet [`COEFF_BUDGET`].
    pub fn solve(pair: &FundamentalPair, cost: &QuadraticCost, spec: &TableSpec) -> Result<Self> {
        let sys = BoundarySystem::new(pair, cost);
        let mut spec = *spec;
        let mut last = None;
        for _ in 0..3 {
            let table = sys.tabulate(&spec)?;
            let vf = Self::new(sys.clone(), table)?;
            if vf.coeff_error <= COEFF_BUDGET {
                return Ok(vf);
            }
            spec.step *= 0.5;
            last = Some(vf);
        }
        Ok(last.unwrap())
    }

    pub fn new(sys: BoundarySystem, table: BoundaryTable) -> Result<Self> {
        let splits = table.splits();
        let rec = Recovery { sys: &sys, table: &table };
        let (a, b, coeff_error) = rec.run()?;
        Ok(Self {
            sys,
            table,
            a,
            b,
            splits,
            coeff_error,
        })
    }

    pub fn system(&self) -> &BoundarySystem {
        &self.sys
    }

    pub fn table(&self) -> &BoundaryTable {
        &self.table
    }

    fn rho(&self) -> f64 {
        self.sys.rho()
    }

    fn q_plus(&self) -> f64 {
        self.sys.cost().q_plus()
    }

    fn q_minus(&self) -> f64 {
        self.sys.cost().q_minus()
    }

    /// `A(c)`, `A'(c)`, `A''(c)`; zero from `c̄₊,g` on.
    pub fn coeff_a(&self, c: f64) -> Result<Triple> {
        if c >= self.splits.1 {
            return Ok((0.0, 0.0, 0.0));
        }
        self.a.eval("capacity (A)", c)
    }

    /// `B(c)`, `B'(c)`, `B''(c)`; zero up to `c̲₋,g`.
    pub fn coeff_b(&self, c: f64) -> Result<Triple> {
        if c <= self.splits.0 {
            return Ok((0.0, 0.0, 0.0));
        }
        self.b.eval("capacity (B)", c)
    }

    /// `A'`, `A''`, `B'`, `B''` from freshly solved boundaries rather than
    /// the interpolants.
    pub fn coeff_derivatives(&self, c: f64) -> Result<CoeffDerivatives> {
        let (lo, hi) = self.splits;
        let mut out = CoeffDerivatives {
            a1: 0.0,
            a2: 0.0,
            b1: 0.0,
            b2: 0.0,
        };
        if c > lo && c < hi {
            let s = self.solve_exact(c)?;
            return middle_derivatives(&self.sys, &s);
        }
        if c <= lo && c < hi {
            let d = self.exact_dhat(c, true)?;
            let (a1, a2) = edge_derivatives(&self.sys, d, true)?;
            out.a1 = a1;
            out.a2 = a2;
        }
        if c >= hi && c > lo {
            let d = self.exact_dhat(c, false)?;
            let (b1, b2) = edge_derivatives(&self.sys, d, false)?;
            out.b1 = b1;
            out.b2 = b2;
        }
        Ok(out)
    }

    fn solve_exact(&self, c: f64) -> Result<PairSolution> {
        let guess = (self.table.dhat_minus(c), self.table.dhat_plus(c));
        self.sys
            .solve_pair_near(c, Some(guess))?
            .ok_or_else(|| Error::NoSolution(format!("boundary pair at c = {c}")))
    }

    fn exact_dhat(&self, c: f64, plus: bool) -> Result<f64> {
        let r = if plus {
            self.sys.onesided_dhat_plus(c, self.table.dhat_plus(c))?
        } else {
            self.sys.onesided_dhat_minus(c, self.table.dhat_minus(c))?
        };
        r.ok_or_else(|| Error::NoSolution(format!("one-sided boundary at c = {c}")))
    }

    /// The continuation formula `Aψ + Bφ + V̂` and its derivatives, whatever
    /// region `(c, d)` lies in.
    pub fn branch(&self, c: f64, d: f64) -> Result<Jet> {
        let pair = self.sys.pair();
        pair.check(d)?;
        let (a, a1, a2) = self.coeff_a(c)?;
        let (b, b1, b2) = self.coeff_b(c)?;
        let p = pair.at(d);
        let vh = self.sys.coeffs().at(d)?.vhat(self.rho(), c);
        let mut jet = Jet {
            v: vh.value,
            v_c: vh.c,
            v_d: vh.d,
            v_dd: vh.dd,
            v_cc: 1.0 / self.rho(),
            v_cd: vh.cd,
        };
        if a != 0.0 || a1 != 0.0 {
            let psi2 = pair.second_derivative(d, p.psi, p.dpsi);
            jet.v += a * p.psi;
            jet.v_c += a1 * p.psi;
            jet.v_d += a * p.dpsi;
            jet.v_dd += a * psi2;
            jet.v_cc += a2 * p.psi;
            jet.v_cd += a1 * p.dpsi;
        }
        if b != 0.0 || b1 != 0.0 {
            let phi2 = pair.second_derivative(d, p.phi, p.dphi);
            jet.v += b * p.phi;
            jet.v_c += b1 * p.phi;
            jet.v_d += b * p.dphi;
            jet.v_dd += b * phi2;
            jet.v_cc += b2 * p.phi;
            jet.v_cd += b1 * p.dphi;
        }
        Ok(jet)
    }

    pub fn classify(&self, c: f64, d: f64) -> Region {
        self.table.classify(c, d)
    }

    pub fn value_at(&self, c: f64, d: f64) -> Result<f64> {
        match self.classify(c, d) {
            Region::Continue => Ok(self.branch(c, d)?.v),
            Region::Invest => Ok(self.z_plus(d)? - self.q_plus() * c),
            Region::Disinvest => Ok(self.z_minus(d)? + self.q_minus() * c),
        }
    }

    pub fn value_c_at(&self, c: f64, d: f64) -> Result<f64> {
        match self.classify(c, d) {
            Region::Continue => Ok(self.branch(c, d)?.v_c),
            Region::Invest => Ok(-self.q_plus()),
            Region::Disinvest => Ok(self.q_minus()),
        }
    }

    /// `z₊(d) = v(ĉ₊(d), d) + q⁺ĉ₊(d)`, the intercept of the affine piece.
    pub fn z_plus(&self, d: f64) -> Result<f64> {
        let c = self.table.chat_plus(d);
        if !c.is_finite() {
            return Err(Error::InvalidArgument(format!("no investment boundary at d = {d}")));
        }
        Ok(self.branch(c, d)?.v + self.q_plus() * c)
    }

    /// `z₋(d) = v(ĉ₋(d), d) − q⁻ĉ₋(d)`.
    pub fn z_minus(&self, d: f64) -> Result<f64> {
        let c = self.table.chat_minus(d);
        if !c.is_finite() {
            return Err(Error::InvalidArgument(format!("no disinvestment boundary at d = {d}")));
        }
        Ok(self.branch(c, d)?.v - self.q_minus() * c)
    }

    /// `z`, `z'`, `z''` by five-point differences (one-sided near the ends of
    /// the tabulated range). The flag reports the fallback.
    fn z_jet(&self, d: f64, plus: bool) -> Result<(f64, f64, f64, bool)> {
        let f = |x: f64| if plus { self.z_plus(x) } else { self.z_minus(x) };
        let h = 5e-3 * self.sys.coordinate().jacobian(d);
        // The stencil stays inside the tabulated demand range.
        let (lo, hi) = self.table.spec().d_range;
        let ok = |x: f64| self.sys.usable(x) && x >= lo.min(d) && x <= hi.max(d);
        if ok(d - 2.0 * h) && ok(d + 2.0 * h) {
            let (m2, m1, z0, p1, p2) = (f(d - 2.0 * h)?, f(d - h)?, f(d)?, f(d + h)?, f(d + 2.0 * h)?);
            let d1 = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
            let d2 = (-m2 + 16.0 * m1 - 30.0 * z0 + 16.0 * p1 - p2) / (12.0 * h * h);
            return Ok((z0, d1, d2, false));
        }
        let s = if ok(d + 3.0 * h) { h } else { -h };
        let (f0, f1, f2, f3) = (f(d)?, f(d + s)?, f(d + 2.0 * s)?, f(d + 3.0 * s)?);
        let d1 = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * s);
        let d2 = (2.0 * f0 - 5.0 * f1 + 4.0 * f2 - f3) / (s * s);
        Ok((f0, d1, d2, true))
    }

    /// `max{Lv − g, −v_c − q⁺, v_c − q⁻}` with `Lv = ρv − μv_d − ½σ²v_dd`.
    pub fn vi_residual(&self, c: f64, d: f64) -> Result<ViPoint> {
        let region = self.classify(c, d);
        let (qp, qm) = (self.q_plus(), self.q_minus());
        let (v, v_c, v_d, v_dd, one_sided) = match region {
            Region::Continue => {
                let j = self.branch(c, d)?;
                (j.v, j.v_c, j.v_d, j.v_dd, false)
            }
            Region::Invest => {
                let (z, z1, z2, flag) = self.z_jet(d, true)?;
                (z - qp * c, -qp, z1, z2, flag)
            }
            Region::Disinvest => {
                let (z, z1, z2, flag) = self.z_jet(d, false)?;
                (z + qm * c, qm, z1, z2, flag)
            }
        };
        let model = self.sys.pair().model();
        let sig = model.volatility(d);
        let lv = self.rho() * v - model.drift(d) * v_d - 0.5 * sig * sig * v_dd;
        let lv_minus_g = lv - self.sys.cost().running_cost(c, d);
        let invest_term = -v_c - qp;
        let disinvest_term = v_c - qm;
        Ok(ViPoint {
            c,
            d,
            region,
            lv_minus_g,
            invest_term,
            disinvest_term,
            residual: lv_minus_g.max(invest_term).max(disinvest_term),
            one_sided,
        })
    }

    /// Second-order smooth fit `v_cd = 0` and first-order fit
    /// `v_c = −q⁺` / `q⁻` at freshly solved boundaries, using the stored `A'`, `B'`.
    pub fn smooth_fit_residual(&self, c: f64) -> Result<SmoothFit> {
        let (lo, hi) = self.splits;
        let (xm, yp) = if c > lo && c < hi {
            let s = self.solve_exact(c)?;
            (Some(s.x), Some(s.y))
        } else {
            let yp = if c <= lo && c < hi { Some(self.exact_dhat(c, true)?) } else { None };
            let xm = if c >= hi && c > lo { Some(self.exact_dhat(c, false)?) } else { None };
            (xm, yp)
        };
        let (_, a1, _) = self.coeff_a(c)?;
        let (_, b1, _) = self.coeff_b(c)?;
        let at = |d: f64| -> Result<(f64, f64)> {
            let p = self.sys.pair().at(d);
            let vh = self.sys.coeffs().at(d)?.vhat(self.rho(), c);
            Ok((a1 * p.dpsi + b1 * p.dphi + vh.cd, a1 * p.psi + b1 * p.phi + vh.c))
        };
        let mut out = SmoothFit {
            c,
            minus: None,
            plus: None,
            c1_minus: None,
            c1_plus: None,
        };
        if let Some(x) = xm {
            let (r2, r1) = at(x)?;
            out.minus = Some(r2);
            out.c1_minus = Some(r1 - self.q_minus());
        }
        if let Some(y) = yp {
            let (r2, r1) = at(y)?;
            out.plus = Some(r2);
            out.c1_plus = Some(r1 + self.q_plus());
        }
        Ok(out)
    }

    /// One-sided difference quotient of `v_c(c, ·)` from `d`, a step `h` in
    /// direction `dir` (±1) of the working coordinate. For GBM that is
    /// log-demand, so both step and quotient are relative to the boundary
    /// location.
    pub fn one_sided_vcd(&self, c: f64, d: f64, h: f64, dir: f64) -> Result<f64> {
        let coord = self.sys.coordinate();
        let e = coord.from_z(coord.to_z(d) + dir * h);
        Ok((self.value_c_at(c, e)? - self.value_c_at(c, d)?) / (dir * h))
    }

    /// `[Δ²v(·, d)](c; ε)`.
    pub fn second_difference(&self, c: f64, d: f64, eps: f64) -> Result<f64> {
        let (m, z, p) = (self.value_at(c - eps, d)?, self.value_at(c, d)?, self.value_at(c + eps, d)?);
        Ok((p - 2.0 * z + m) / (eps * eps))
    }

    /// Tensor grid over the table's working box: linear in `c`, equally
    /// spaced in the working coordinate in `d`.
    pub fn grid(&self, nc: usize, nd: usize) -> (Vec<f64>, Vec<f64>) {
        let spec = self.table.spec();
        let (c0, c1) = spec.c_range;
        let cs = (0..nc)
            .map(|i| if nc == 1 { c0 } else { c0 + (c1 - c0) * i as f64 / (nc - 1) as f64 })
            .collect();
        let ds = self.sys.coordinate().grid(spec.d_range.0, spec.d_range.1, nd);
        (cs, ds)
    }

    pub fn surface(&self, cs: &[f64], ds: &[f64]) -> Result<Vec<SurfaceRow>> {
        tensor(cs, ds)
            .into_par_iter()
            .map(|(c, d)| {
                let region = self.classify(c, d);
                Ok(SurfaceRow {
                    c,
                    d,
                    v: self.value_at(c, d)?,
                    v_c: self.value_c_at(c, d)?,
                    region: region.as_str(),
                })
            })
            .collect()
    }

    pub fn vi_grid(&self, cs: &[f64], ds: &[f64]) -> Result<Vec<ViPoint>> {
        tensor(cs, ds).into_par_iter().map(|(c, d)| self.vi_residual(c, d)).collect()
    }

    pub fn smooth_fit_rows(&self, cs: &[f64]) -> Result<Vec<SmoothFit>> {
        cs.par_iter().map(|&c| self.smooth_fit_residual(c)).collect()
    }

    pub fn coeff_rows(&self, cs: &[f64]) -> Result<Vec<CoeffRow>> {
        cs.iter()
            .map(|&c| {
                let (a, a_c, _) = self.coeff_a(c)?;
                let (b, b_c, _) = self.coeff_b(c)?;
                Ok(CoeffRow { c, a, a_c, b, b_c })
            })
            .collect()
    }
}

fn tensor(cs: &[f64], ds: &[f64]) -> Vec<(f64, f64)> {
    cs.iter().flat_map(|&c| ds.iter().map(move |&d| (c, d))).collect()
}

/// `A'`, `A''`, `B'`, `B''` from the smooth-fit conditions at a solved pair.
pub fn middle_derivatives(sys: &BoundarySystem, s: &PairSolution) -> Result<CoeffDerivatives> {
    let rho = sys.rho();
    let cost = sys.cost();
    let (px, py) = (sys.pair().at(s.x), sys.pair().at(s.y));
    let vc_plus = s.c / rho - sys.coeffs().beta(s.y)?;
    let vc_minus = s.c / rho - sys.coeffs().beta(s.x)?;
    let den = py.psi * px.phi - py.phi * px.psi;
    if !(den.abs() >= 1e-14 * (py.psi * px.phi).abs()) {
        return Err(Error::NoSolution(format!(
            "degenerate coefficient system at c = {} (x = {}, y = {})",
            s.c, s.x, s.y
        )));
    }
    let r_plus = -cost.q_plus() - vc_plus;
    let r_minus = cost.q_minus() - vc_minus;
    Ok(CoeffDerivatives {
        a1: (r_plus * px.phi - r_minus * py.phi) / den,
        a2: -(px.phi - py.phi) / (rho * den),
        b1: (py.psi * r_minus - px.psi * r_plus) / den,
        b2: -(py.psi - px.psi) / (rho * den),
    })
}

/// One-sided `(A', A'')` at `d = d̂₊(c)` (or `(B', B'')` at `d̂₋(c)`).
fn edge_derivatives(sys: &BoundarySystem, d: f64, plus: bool) -> Result<(f64, f64)> {
    let beta_p = sys.coeffs().beta_prime(d)?;
    let p = sys.pair().at(d);
    Ok(if plus {
        (beta_p / p.dpsi, -1.0 / (sys.rho() * p.psi))
    } else {
        (beta_p / p.dphi, -1.0 / (sys.rho() * p.phi))
    })
}

/// Anchored coefficient values: `A` and `B` at the middle nodes, `A` along
/// the lower edge, `B` along the upper edge.
type Anchors<'v> = (&'v [f64], &'v [f64], &'v [f64], &'v [f64]);

/// Coefficient recovery over one boundary table.
struct Recovery<'a> {
    sys: &'a BoundarySystem,
    table: &'a BoundaryTable,
}

/// Per-node data along a one-sided edge.
#[derive(Debug, Clone, Copy)]
struct EdgeSample {
    node: EdgeNode,
    d1: f64,
    d2: f64,
}

impl Recovery<'_> {
    fn run(&self) -> Result<(Curve, Curve, f64)> {
        let (lo, hi) = self.table.splits();
        let middle = self.table.middle();
        let lower = self.table.lower_edge();
        let upper = self.table.upper_edge();
        let every = self.table.spec().check_every.max(1);

        // Middle region: derivatives at the nodes and panel integrals.
        let derivs: Vec<CoeffDerivatives> = middle
            .par_iter()
            .map(|s| middle_derivatives(self.sys, s))
            .collect::<Result<_>>()?;
        let panels: Vec<(f64, f64)> = (0..middle.len().saturating_sub(1))
            .into_par_iter()
            .map(|k| self.middle_panel(&middle[k], middle[k + 1].c))
            .collect::<Result<_>>()?;
        let n = middle.len();
        let mut a_mid = vec![0.0; n];
        let mut b_mid = vec![0.0; n];
        if n > 0 {
            let last = &middle[n - 1];
            a_mid[n - 1] = if hi.is_finite() {
                -(hi - last.c) * derivs[n - 1].a1
            } else {
                -self.middle_tail(last.c, f64::INFINITY, true)?
            };
            for k in (0..n - 1).rev() {
                a_mid[k] = a_mid[k + 1] - panels[k].0;
            }
            let first = &middle[0];
            b_mid[0] = if lo.is_finite() {
                (first.c - lo) * derivs[0].b1
            } else {
                self.middle_tail(first.c, f64::NEG_INFINITY, false)?
            };
            for k in 0..n - 1 {
                b_mid[k + 1] = b_mid[k] + panels[k].1;
            }
        }

        // Lower edge: A along ĉ₊, integrated in d.
        let lower_s = self.edge_samples(lower, true)?;
        let lower_panels = self.edge_panels(&lower_s, true)?;
        let mut a_low = vec![0.0; lower_s.len()];
        if let Some(top) = lower_s.last() {
            let m = lower_s.len();
            a_low[m - 1] = if n > 0 {
                a_mid[0] + (top.node.c - middle[0].c) * derivs[0].a1
            } else {
                -self.edge_tail(top.node.d, true)?
            };
            for k in (0..m - 1).rev() {
                a_low[k] = a_low[k + 1] - lower_panels[k];
            }
        }

        // Upper edge: B along ĉ₋.
        let upper_s = self.edge_samples(upper, false)?;
        let upper_panels = self.edge_panels(&upper_s, false)?;
        let mut b_up = vec![0.0; upper_s.len()];
        if let Some(bottom) = upper_s.first() {
            b_up[0] = if n > 0 {
                b_mid[n - 1] + (bottom.node.c - middle[n - 1].c) * derivs[n - 1].b1
            } else {
                self.edge_tail(bottom.node.d, false)?
            };
            for k in 0..upper_s.len() - 1 {
                b_up[k + 1] = b_up[k] + upper_panels[k];
            }
        }

        let mut ka = Knots::default();
        let keep_low = if n > 0 { lower_s.len().saturating_sub(1) } else { lower_s.len() };
        for (s, &a) in lower_s.iter().zip(&a_low).take(keep_low) {
            ka.push(s.node.c, a, s.d1, s.d2);
        }
        for k in 0..n {
            ka.push(middle[k].c, a_mid[k], derivs[k].a1, derivs[k].a2);
        }
        let mut kb = Knots::default();
        for k in 0..n {
            kb.push(middle[k].c, b_mid[k], derivs[k].b1, derivs[k].b2);
        }
        let skip_up = usize::from(n > 0);
        for (s, &b) in upper_s.iter().zip(&b_up).skip(skip_up) {
            kb.push(s.node.c, b, s.d1, s.d2);
        }
        // The last middle node sits a hair inside a finite split; evaluation
        // is allowed up to the split itself.
        let a_hi = (n > 0 && hi.is_finite()).then_some(hi);
        let b_lo = (n > 0 && lo.is_finite()).then_some(lo);
        let a = Curve::build(ka, None, a_hi)?;
        let b = Curve::build(kb, b_lo, None)?;

        let err = self.validate(&a, &b, &(&a_mid[..], &b_mid[..], &a_low[..], &b_up[..]), &lower_s, &upper_s, every)?;
        Ok((a, b, err))
    }

    fn validate(
        &self,
        a: &Curve,
        b: &Curve,
        vals: &Anchors,
        lower_s: &[EdgeSample],
        upper_s: &[EdgeSample],
        every: usize,
    ) -> Result<f64> {
        let middle = self.table.middle();
        let n = middle.len();
        let (a_mid, b_mid, a_low, b_up) = (vals.0, vals.1, vals.2, vals.3);
        let mut checks: Vec<Box<dyn Fn() -> Result<f64> + Send + Sync + '_>> = Vec::new();
        for k in (0..n.saturating_sub(1)).step_by(every) {
            let (a0, b0) = (a_mid[k], b_mid[k]);
            checks.push(Box::new(move || {
                let s = &middle[k];
                let cm = 0.5 * (s.c + middle[k + 1].c);
                let (ia, ib) = self.middle_panel(s, cm)?;
                let sol = self
                    .sys
                    .solve_pair_near(cm, Some((s.x + s.dx_dc * (cm - s.c), s.y + s.dy_dc * (cm - s.c))))?
                    .ok_or_else(|| Error::NoSolution(format!("boundary pair at c = {cm}")))?;
                let p = self.sys.pair();
                let ea = (a.eval("capacity (A)", cm)?.0 - (a0 + ia)).abs() * p.psi(sol.y);
                let eb = (b.eval("capacity (B)", cm)?.0 - (b0 + ib)).abs() * p.phi(sol.x);
                Ok(ea.max(eb))
            }));
        }
        for (samples, vals, plus) in [(lower_s, a_low, true), (upper_s, b_up, false)] {
            let m = samples.len();
            let skip_last = plus && n > 0;
            let skip_first = !plus && n > 0;
            for k in (usize::from(skip_first)..m.saturating_sub(1 + usize::from(skip_last))).step_by(every) {
                let (curve, v0) = (if plus { a } else { b }, vals[k]);
                checks.push(Box::new(move || {
                    let coord = self.sys.coordinate();
                    let (d0, d1) = (samples[k].node.d, samples[k + 1].node.d);
                    let dm = coord.from_z(0.5 * (coord.to_z(d0) + coord.to_z(d1)));
                    let exact = v0 + self.edge_integral(d0, dm, plus)?;
                    let s = self.sys.coeffs().at(dm)?;
                    let (cm, w) = if plus {
                        (self.sys.onesided_plus_from(&s).c, self.sys.pair().psi(dm))
                    } else {
                        (self.sys.onesided_minus_from(&s).c, self.sys.pair().phi(dm))
                    };
                    Ok((curve.eval("capacity", cm)?.0 - exact).abs() * w)
                }));
            }
        }
        let errs: Vec<f64> = checks.par_iter().map(|f| f()).collect::<Result<_>>()?;
        Ok(errs.into_iter().fold(0.0, f64::max))
    }

    /// `(∫A', ∫B')` from `s.c` to `c1` by five-point Gauss–Legendre.
    fn middle_panel(&self, s: &PairSolution, c1: f64) -> Result<(f64, f64)> {
        let half = 0.5 * (c1 - s.c);
        let mid = 0.5 * (c1 + s.c);
        let (mut ia, mut ib) = (0.0, 0.0);
        for &(t, w) in &GL5 {
            let xi = mid + half * t;
            let guess = (s.x + s.dx_dc * (xi - s.c), s.y + s.dy_dc * (xi - s.c));
            let sol = self
                .sys
                .solve_pair_near(xi, Some(guess))?
                .ok_or_else(|| Error::NoSolution(format!("boundary pair at c = {xi}")))?;
            let der = middle_derivatives(self.sys, &sol)?;
            ia += w * der.a1;
            ib += w * der.b1;
        }
        Ok((ia * half, ib * half))
    }

    /// `∫_{c0}^{±∞} A'` (or `B'`) through the middle region out to an
    /// infinite split. The integral runs in `ln|c − c0|` up to `10⁵` capacity
    /// scales; beyond that the derivative is extrapolated as a power law
    /// fitted to the last two samples. Capacities whose boundaries leave the
    /// representable range contribute nothing.
    fn middle_tail(&self, c0: f64, end: f64, want_a: bool) -> Result<f64> {
        let scale = c0.abs().max(1.0);
        let dir = end.signum();
        let deriv = |xi: f64| -> Result<f64> {
            Ok(match self.sys.solve_pair(xi)? {
                Some(s) => {
                    let der = middle_derivatives(self.sys, &s)?;
                    if want_a {
                        der.a1
                    } else {
                        der.b1
                    }
                }
                None => 0.0,
            })
        };
        let failure = RefCell::new(None);
        let f = |u: f64| -> f64 {
            let e = u.exp();
            match deriv(c0 + dir * scale * (e - 1.0)) {
                Ok(v) => v * scale * e,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let u_end = (1.0 + TAIL_SCALES).ln();
        let r = integrate(f, 0.0, u_end, &QuadOptions::with_tolerances(1e-18, 1e-11));
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        let body = r?.value;
        let far = c0 + dir * scale * TAIL_SCALES;
        let near = c0 + dir * scale * 0.5 * TAIL_SCALES;
        let (f1, f2) = (deriv(near)?, deriv(far)?);
        let mut tail = 0.0;
        if f1 != 0.0 && f2 != 0.0 && f1.signum() == f2.signum() {
            let p = (f1 / f2).ln() / (far.abs() / near.abs()).ln();
            if p > 1.0 {
                tail = f2 * far.abs() / (p - 1.0);
            }
        }
        Ok(dir * body + tail)
    }

    fn edge_samples(&self, nodes: &[EdgeNode], plus: bool) -> Result<Vec<EdgeSample>> {
        nodes
            .par_iter()
            .map(|&node| {
                let (d1, d2) = edge_derivatives(self.sys, node.d, plus)?;
                Ok(EdgeSample { node, d1, d2 })
            })
            .collect()
    }

    fn edge_panels(&self, s: &[EdgeSample], plus: bool) -> Result<Vec<f64>> {
        (0..s.len().saturating_sub(1))
            .into_par_iter()
            .map(|k| self.edge_integral(s[k].node.d, s[k + 1].node.d, plus))
            .collect()
    }

    /// `d ↦ A'(ĉ₊(d))ĉ₊'(d)` (or the `B` mirror along `ĉ₋`) in the working
    /// coordinate, i.e. multiplied by `dd/dz`.
    fn edge_integrand(&self, d: f64, plus: bool) -> Result<f64> {
        let s = self.sys.coeffs().at(d)?;
        let p = self.sys.pair().at(d);
        let jac = self.sys.coordinate().jacobian(d);
        Ok(if plus {
            s.beta_p / p.dpsi * self.sys.onesided_plus_from(&s).slope * jac
        } else {
            s.beta_p / p.dphi * self.sys.onesided_minus_from(&s).slope * jac
        })
    }

    /// Change of `A` (or `B`) along the edge between demand levels `d0`, `d1`.
    fn edge_integral(&self, d0: f64, d1: f64, plus: bool) -> Result<f64> {
        let coord = self.sys.coordinate();
        let (z0, z1) = (coord.to_z(d0), coord.to_z(d1));
        let half = 0.5 * (z1 - z0);
        let mid = 0.5 * (z1 + z0);
        let mut acc = 0.0;
        for &(t, w) in &GL5 {
            acc += w * self.edge_integrand(coord.from_z(mid + half * t), plus)?;
        }
        Ok(acc * half)
    }

    /// Change of `A` from `d0` to the upper end of the state space (or of
    /// `B` from the lower end to `d0`) along a one-sided edge.
    fn edge_tail(&self, d0: f64, plus: bool) -> Result<f64> {
        let coord = self.sys.coordinate();
        let z0 = coord.to_z(d0);
        let failure = RefCell::new(None);
        let f = |z: f64| -> f64 {
            let d = coord.from_z(z);
            if !self.sys.usable(d) {
                return 0.0;
            }
            match self.edge_integrand(d, plus) {
                Ok(v) => v,
                Err(_) if (z - z0).abs() > 30.0 => 0.0,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let opts = QuadOptions::with_tolerances(1e-16, 1e-11);
        let r = if plus {
            integrate(f, z0, f64::INFINITY, &opts)
        } else {
            integrate(f, f64::NEG_INFINITY, z0, &opts)
        };
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        Ok(r?.value)
    }
}
