//! Adaptive Gauss–Kronrod (10/21) quadrature with global bisection of the
//! worst subinterval. Infinite endpoints are mapped to a finite parameter
//! interval by rational transforms, so no truncation is involved.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_1,
    0.973_906_528_517_171_7,
    0.930_157_491_355_708_2,
    0.865_063_366_688_984_5,
    0.780_817_726_586_416_9,
    0.679_409_568_299_024_4,
    0.562_757_134_668_604_7,
    0.433_395_394_129_247_2,
    0.294_392_862_701_460_2,
    0.148_874_338_981_631_2,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874,
    0.032_558_162_307_964_73,
    0.054_755_896_574_351_996,
    0.075_039_674_810_919_95,
    0.093_125_454_583_697_6,
    0.109_387_158_802_297_64,
    0.123_491_976_262_065_85,
    0.134_709_217_311_473_33,
    0.142_775_938_577_060_08,
    0.147_739_104_901_338_5,
    0.149_445_554_002_916_9,
];

const WG: [f64; 5] = [
    0.066_671_344_308_688_14,
    0.149_451_349_150_580_6,
    0.219_086_362_515_982_04,
    0.269_266_719_309_996_36,
    0.295_524_224_714_752_87,
];

/// Tolerances for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOptions {
    /// Requested absolute error.
    pub abs_tol: f64,
    /// Requested relative error.
    pub rel_tol: f64,
    /// Error level that is still accepted when the subdivision budget runs
    /// out (relative to the magnitude of the result).
    pub accept_rel: f64,
    /// Absolute counterpart of `accept_rel`.
    pub accept_abs: f64,
    pub max_intervals: usize,
    /// Length scale of the rational map used for infinite endpoints.
    pub scale: f64,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-300,
            rel_tol: 1e-13,
            accept_rel: 1e-9,
            accept_abs: 1e-300,
            max_intervals: 400,
            scale: 1.0,
        }
    }
}

impl QuadOptions {
    pub fn with_tolerances(abs_tol: f64, rel_tol: f64) -> Self {
        Self {
            abs_tol,
            rel_tol,
            accept_abs: abs_tol.max(1e-300),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    abs: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Returns the 21-point estimate, its error estimate and the integral of |f|.
fn kronrod<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64, f64)> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    if !fc.is_finite() {
        return Err(Error::NonFinite { at: center });
    }
    let mut resk = fc * WGK[10];
    let mut resg = 0.0;
    let mut resabs = resk.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];
    for j in 0..10 {
        let dx = half * XGK[j];
        let (x1, x2) = (center - dx, center + dx);
        let (f1, f2) = (f(x1), f(x2));
        if !f1.is_finite() {
            return Err(Error::NonFinite { at: x1 });
        }
        if !f2.is_finite() {
            return Err(Error::NonFinite { at: x2 });
        }
        fv1[j] = f1;
        fv2[j] = f2;
        resk += WGK[j] * (f1 + f2);
        resabs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            resg += WG[j / 2] * (f1 + f2);
        }
    }
    let mean = 0.5 * resk;
    let mut resasc = WGK[10] * (fc - mean).abs();
    for j in 0..10 {
        resasc += WGK[j] * ((fv1[j] - mean).abs() + (fv2[j] - mean).abs());
    }
    let h = half.abs();
    let value = resk * half;
    resabs *= h;
    resasc *= h;
    let mut err = ((resk - resg) * half).abs();
    if resasc != 0.0 && err != 0.0 {
        err = resasc * (200.0 * err / resasc).powf(1.5).min(1.0);
    }
    if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * resabs);
    }
    Ok((value, err, resabs))
}

fn adaptive<F: FnMut(f64) -> f64>(
    f: &mut F,
    a: f64,
    b: f64,
    opts: &QuadOptions,
    report: (f64, f64),
) -> Result<Quad> {
    if a == b {
        return Ok(Quad {
            value: 0.0,
            error: 0.0,
            evals: 0,
        });
    }
    let (value, error, abs) = kronrod(f, a, b)?;
    let mut evals = 21;
    let mut heap = BinaryHeap::new();
    heap.push(Piece { a, b, value, error, abs });
    let mut total = value;
    let mut total_err = error;
    let mut total_abs = abs;
    // With cancellation the result cannot be resolved below the rounding
    // level of ∫|f|.
    let floor = |abs: f64| 100.0 * f64::EPSILON * abs;
    loop {
        let target = opts.abs_tol.max(opts.rel_tol * total.abs()).max(floor(total_abs));
        if total_err <= target {
            break;
        }
        if heap.len() >= opts.max_intervals {
            break;
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a.min(worst.b) || mid >= worst.a.max(worst.b) {
            heap.push(worst);
            break;
        }
        let (v1, e1, a1) = kronrod(f, worst.a, mid)?;
        let (v2, e2, a2) = kronrod(f, mid, worst.b)?;
        total_abs += a1 + a2 - worst.abs;
        evals += 42;
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Piece {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
            abs: a1,
        });
        heap.push(Piece {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
            abs: a2,
        });
    }
    // Resum to shed the drift of the running updates.
    let mut pieces: Vec<Piece> = heap.into_vec();
    pieces.sort_by(|p, q| p.a.total_cmp(&q.a));
    let total: f64 = pieces.iter().map(|p| p.value).sum();
    let total_err: f64 = pieces.iter().map(|p| p.error).sum();
    let total_abs: f64 = pieces.iter().map(|p| p.abs).sum();
    let accept = opts.accept_abs.max(opts.accept_rel * total.abs()).max(floor(total_abs));
    if total_err > accept {
        return Err(Error::Integration {
            lo: report.0,
            hi: report.1,
            estimate: total,
            error: total_err,
        });
    }
    Ok(Quad {
        value: total,
        error: total_err,
        evals,
    })
}

/// Integrates `f` over `[a, b]`; either endpoint may be infinite.
/// Reversed limits give the negated integral.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: &QuadOptions) -> Result<Quad> {
    if a.is_nan() || b.is_nan() {
        return Err(Error::InvalidArgument("integration limit is NaN".into()));
    }
    if a > b {
        let q = integrate(f, b, a, opts)?;
        return Ok(Quad {
            value: -q.value,
            ..q
        });
    }
    let s = opts.scale;
    match (a.is_finite(), b.is_finite()) {
        (true, true) => adaptive(&mut f, a, b, opts, (a, b)),
        (true, false) => {
            let mut g = |t: f64| {
                let u = 1.0 - t;
                let x = a + s * t / u;
                if x.is_infinite() {
                    return 0.0;
                }
                f(x) * s / (u * u)
            };
            adaptive(&mut g, 0.0, 1.0, opts, (a, b))
        }
        (false, true) => {
            let mut g = |t: f64| {
                let x = b - s * (1.0 - t) / t;
                if x.is_infinite() {
                    return 0.0;
                }
                f(x) * s / (t * t)
            };
            adaptive(&mut g, 0.0, 1.0, opts, (a, b))
        }
        (false, false) => {
            let mut g = |t: f64| {
                let u = 1.0 - t * t;
                let x = s * t / u;
                if x.is_infinite() {
                    return 0.0;
                }
                f(x) * s * (1.0 + t * t) / (u * u)
            };
            adaptive(&mut g, -1.0, 1.0, opts, (a, b))
        }
    }
}
