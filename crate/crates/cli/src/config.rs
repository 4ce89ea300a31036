//! TOML problem files.
//!
//! ```toml
//! [diffusion]
//! kind = "gbm"            # or "ou" (kappa, theta, sigma)
//! mu = 0.0
//! sigma = 1.4142135623730951
//! rho = 6.0
//! d_min = 0.5             # demand range used for tables and grids
//! d_max = 60.0
//! d0 = 1.0                # optional, defaults to the geometric midpoint
//!
//! [cost]
//! alpha0 = "square"       # "identity" | "square" | { affine = [slope, intercept] }
//! beta0 = "identity"      #   | { constant = k } | { table = [[d, y], ...] }
//! q_plus = 1.0
//! q_minus = "inf"         # or a positive number
//!
//! [numerics]
//! c_range = [-5.0, 20.0]
//! ```

use std::fmt;
use std::ops::Range;
use std::path::Path;

use log::warn;
use revcap::boundary::TableSpec;
use revcap::cost::{Profile, QuadraticCost};
use revcap::diffusion::DiffusionModel;
use serde::Deserialize;
use toml::Spanned;

#[derive(Debug, Clone)]
pub struct Numerics {
    pub grid: (usize, usize),
    /// Variational-inequality residual tolerance for `verify`.
    pub tolerance: f64,
    pub smooth_fit_tolerance: f64,
    pub dt: f64,
    pub horizon: Option<f64>,
    /// Target accuracy used to size the horizon when none is given.
    pub tail_eps: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub c0: f64,
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub model: DiffusionModel,
    pub cost: QuadraticCost,
    pub table: TableSpec,
    pub numerics: Numerics,
    pub d0: f64,
    pub kind: String,
    pub mu: f64,
    pub sigma: f64,
}

/// All violations found in a file, each tied to a line.
#[derive(Debug)]
pub struct ConfigError {
    pub path: String,
    pub issues: Vec<(usize, String)>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (line, msg)) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}:{}: {}", self.path, line, msg)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    diffusion: Spanned<RawDiffusion>,
    cost: Spanned<RawCost>,
    numerics: Spanned<RawNumerics>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiffusion {
    kind: Spanned<String>,
    mu: Option<Spanned<f64>>,
    sigma: Spanned<f64>,
    kappa: Option<Spanned<f64>>,
    theta: Option<Spanned<f64>>,
    rho: Spanned<f64>,
    d_min: Spanned<f64>,
    d_max: Spanned<f64>,
    d0: Option<Spanned<f64>>,
    growth_rate: Option<Spanned<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawProfile {
    Name(String),
    Affine { affine: [f64; 2] },
    Constant { constant: f64 },
    Table { table: Vec<[f64; 2]> },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawPrice {
    Number(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    alpha0: Spanned<RawProfile>,
    beta0: Spanned<RawProfile>,
    q_plus: Spanned<f64>,
    q_minus: Spanned<RawPrice>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNumerics {
    c_range: Spanned<[f64; 2]>,
    grid: Option<Spanned<[usize; 2]>>,
    tolerance: Option<Spanned<f64>>,
    smooth_fit_tolerance: Option<Spanned<f64>>,
    table_step: Option<Spanned<f64>>,
    table_tolerance: Option<Spanned<f64>>,
    dt: Option<Spanned<f64>>,
    horizon: Option<Spanned<f64>>,
    tail_eps: Option<Spanned<f64>>,
    n_paths: Option<Spanned<usize>>,
    seed: Option<Spanned<u64>>,
    c0: Option<Spanned<f64>>,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

struct Issues<'s> {
    src: &'s str,
    list: Vec<(usize, String)>,
}

impl Issues<'_> {
    fn at(&mut self, span: Range<usize>, msg: impl Into<String>) {
        self.list.push((line_of(self.src, span.start), msg.into()));
    }

    fn positive(&mut self, name: &str, v: &Spanned<f64>) {
        let x = *v.get_ref();
        if !(x > 0.0 && x.is_finite()) {
            self.at(v.span(), format!("{name} must be positive and finite, got {x}"));
        }
    }
}

fn profile(raw: &RawProfile) -> Result<Profile, String> {
    match raw {
        RawProfile::Name(s) => match s.as_str() {
            "identity" => Ok(Profile::Identity),
            "square" => Ok(Profile::Square),
            other => Err(format!("unknown profile preset {other:?} (expected identity, square, affine, constant or table)")),
        },
        RawProfile::Affine { affine } => Ok(Profile::Affine {
            slope: affine[0],
            intercept: affine[1],
        }),
        RawProfile::Constant { constant } => Ok(Profile::Constant(*constant)),
        RawProfile::Table { table } => {
            let samples: Vec<(f64, f64)> = table.iter().map(|p| (p[0], p[1])).collect();
            Profile::table(&samples).map_err(|e| e.to_string())
        }
    }
}

pub fn parse_config(path: &Path) -> anyhow::Result<ProblemSpec> {
    let src = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    parse_str(&src, &path.display().to_string()).map_err(Into::into)
}

pub fn parse_str(src: &str, name: &str) -> Result<ProblemSpec, ConfigError> {
    let raw: RawFile = toml::from_str(src).map_err(|e| {
        let line = e.span().map_or(1, |s| line_of(src, s.start));
        ConfigError {
            path: name.to_string(),
            issues: vec![(line, e.message().to_string())],
        }
    })?;
    let mut bad = Issues { src, list: Vec::new() };
    let dif = raw.diffusion.get_ref();
    let cst = raw.cost.get_ref();
    let num = raw.numerics.get_ref();

    let kind = dif.kind.get_ref().to_ascii_lowercase();
    bad.positive("sigma", &dif.sigma);
    bad.positive("rho", &dif.rho);
    let (sigma, rho) = (*dif.sigma.get_ref(), *dif.rho.get_ref());
    let mu = dif.mu.as_ref().map_or(0.0, |m| *m.get_ref());
    match kind.as_str() {
        "gbm" => {
            let k1 = (2.0 * mu + sigma * sigma).max(0.0);
            if rho > 0.0 && !(rho > k1) {
                bad.at(
                    dif.rho.span(),
                    format!("discount condition rho > max(0, 2*mu + sigma^2) violated: rho = {rho}, 2*mu + sigma^2 = {}", 2.0 * mu + sigma * sigma),
                );
            }
            if !(*dif.d_min.get_ref() > 0.0) {
                bad.at(dif.d_min.span(), "d_min must be positive for GBM demand");
            }
            for (key, v) in [("kappa", &dif.kappa), ("theta", &dif.theta)] {
                if let Some(v) = v {
                    bad.at(v.span(), format!("{key} is only used with kind = \"ou\""));
                }
            }
        }
        "ou" => {
            for (key, v) in [("kappa", &dif.kappa), ("theta", &dif.theta)] {
                if v.is_none() {
                    bad.at(raw.diffusion.span(), format!("kind = \"ou\" needs {key}"));
                }
            }
            if let Some(k) = &dif.kappa {
                bad.positive("kappa", k);
            }
            if let Some(m) = &dif.mu {
                bad.at(m.span(), "mu is only used with kind = \"gbm\"");
            }
        }
        other => bad.at(dif.kind.span(), format!("unknown diffusion kind {other:?} (expected \"gbm\" or \"ou\")")),
    }
    let (d_min, d_max) = (*dif.d_min.get_ref(), *dif.d_max.get_ref());
    if !(d_min < d_max) || !d_max.is_finite() {
        bad.at(dif.d_max.span(), format!("need d_min < d_max < inf, got ({d_min}, {d_max})"));
    }
    let d0 = match &dif.d0 {
        Some(v) => {
            let d0 = *v.get_ref();
            if !(d0 > d_min && d0 < d_max) {
                bad.at(v.span(), format!("d0 = {d0} must lie strictly between d_min and d_max"));
            }
            d0
        }
        None => {
            let d0 = if d_min > 0.0 { (d_min * d_max).sqrt() } else { 0.5 * (d_min + d_max) };
            warn!("{name}: d0 not given, using the midpoint {d0} of (d_min, d_max)");
            d0
        }
    };

    bad.positive("q_plus", &cst.q_plus);
    let q_minus = match cst.q_minus.get_ref() {
        RawPrice::Number(x) => {
            if !(*x > 0.0) {
                bad.at(cst.q_minus.span(), format!("q_minus must be positive or \"inf\", got {x}"));
            }
            *x
        }
        RawPrice::Text(s) if matches!(s.to_ascii_lowercase().as_str(), "inf" | "infinity") => f64::INFINITY,
        RawPrice::Text(s) => {
            bad.at(cst.q_minus.span(), format!("q_minus must be positive or \"inf\", got {s:?}"));
            f64::NAN
        }
    };
    let alpha0 = profile(cst.alpha0.get_ref()).map_err(|e| bad.at(cst.alpha0.span(), format!("alpha0: {e}"))).ok();
    let beta0 = profile(cst.beta0.get_ref()).map_err(|e| bad.at(cst.beta0.span(), format!("beta0: {e}"))).ok();

    let [c_lo, c_hi] = *num.c_range.get_ref();
    if !(c_lo < c_hi) || !c_hi.is_finite() || !c_lo.is_finite() {
        bad.at(num.c_range.span(), format!("c_range must be an increasing finite pair, got [{c_lo}, {c_hi}]"));
    }
    let get = |v: &Option<Spanned<f64>>, default: f64| v.as_ref().map_or(default, |s| *s.get_ref());
    for (key, v) in [
        ("tolerance", &num.tolerance),
        ("smooth_fit_tolerance", &num.smooth_fit_tolerance),
        ("table_step", &num.table_step),
        ("table_tolerance", &num.table_tolerance),
        ("dt", &num.dt),
        ("horizon", &num.horizon),
        ("tail_eps", &num.tail_eps),
    ] {
        if let Some(v) = v {
            bad.positive(key, v);
        }
    }
    let grid = num.grid.as_ref().map_or((100, 100), |g| (g.get_ref()[0], g.get_ref()[1]));
    if grid.0 < 2 || grid.1 < 2 {
        bad.at(num.grid.as_ref().unwrap().span(), "grid needs at least 2 points per axis");
    }
    let n_paths = num.n_paths.as_ref().map_or(100_000, |n| *n.get_ref());
    if n_paths < 2 {
        bad.at(num.n_paths.as_ref().unwrap().span(), "n_paths must be at least 2");
    }

    if !bad.list.is_empty() {
        return Err(ConfigError {
            path: name.to_string(),
            issues: bad.list,
        });
    }

    let model = match kind.as_str() {
        "gbm" => DiffusionModel::gbm(mu, sigma, rho, d0),
        _ => DiffusionModel::ornstein_uhlenbeck(
            *dif.kappa.as_ref().unwrap().get_ref(),
            *dif.theta.as_ref().unwrap().get_ref(),
            sigma,
            rho,
            d0,
        ),
    };
    let model = match (model, &dif.growth_rate) {
        (Ok(m), Some(k)) => m.with_growth_rate(*k.get_ref()).map_err(|e| (k.span(), e)),
        (Ok(m), None) => Ok(m),
        (Err(e), _) => Err((raw.diffusion.span(), e)),
    };
    let model = match model {
        Ok(m) => m,
        Err((span, e)) => {
            bad.at(span, e.to_string());
            return Err(ConfigError {
                path: name.to_string(),
                issues: bad.list,
            });
        }
    };
    let qp = *cst.q_plus.get_ref();
    let cost = match QuadraticCost::new(alpha0.unwrap(), beta0.unwrap(), qp, q_minus)
        .and_then(|c| c.validate(&model, d_min, d_max).map(|_| c))
    {
        Ok(c) => c,
        Err(e) => {
            bad.at(raw.cost.span(), e.to_string());
            return Err(ConfigError {
                path: name.to_string(),
                issues: bad.list,
            });
        }
    };

    let mut table = TableSpec::new((d_min, d_max), (c_lo, c_hi));
    table.step = get(&num.table_step, table.step);
    table.tolerance = get(&num.table_tolerance, table.tolerance);
    Ok(ProblemSpec {
        model,
        cost,
        table,
        numerics: Numerics {
            grid,
            tolerance: get(&num.tolerance, 1e-4),
            smooth_fit_tolerance: get(&num.smooth_fit_tolerance, 1e-8),
            dt: get(&num.dt, 1e-3),
            horizon: num.horizon.as_ref().map(|h| *h.get_ref()),
            tail_eps: get(&num.tail_eps, 1e-5),
            n_paths,
            seed: num.seed.as_ref().map_or(7, |s| *s.get_ref()),
            c0: get(&num.c0, 0.0),
        },
        d0,
        kind,
        mu,
        sigma,
    })
}
