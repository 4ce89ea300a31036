use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use revcap::boundary::{BoundarySystem, BoundaryTable};
use revcap::cost::Profile;
use revcap::diffusion::gbm_exponents;
use revcap::simulate::{compare_policies, mc_dynkin, mc_value, tail_horizon, trace_policy, McParams, PolicySpec};
use revcap::value::ValueFunction;
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_config, ProblemSpec};
use crate::{Cli, Command, Overrides, SimArgs};

pub fn run(cli: &Cli) -> Result<bool> {
    let path = cli.config.as_deref().context("--config is required")?;
    let mut spec = parse_config(path)?;
    apply(&mut spec, &cli.overrides)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Boundaries { by_demand } => boundaries(&spec, *by_demand, out),
        Command::Value => value(&spec, out),
        Command::Verify => verify(&spec, out),
        Command::Simulate(args) => simulate(&spec, args, out),
        Command::Dynkin { c, d } => dynkin(&spec, *c, *d, out),
        Command::ClosedForm => closed_form(&spec, cli.overrides.tolerance.unwrap_or(1e-8), out),
    }
}

fn apply(spec: &mut ProblemSpec, o: &Overrides) -> Result<()> {
    let n = &mut spec.numerics;
    if let Some(p) = o.paths {
        if p < 2 {
            bail!("--paths must be at least 2");
        }
        n.n_paths = p;
    }
    if let Some(s) = o.seed {
        n.seed = s;
    }
    if let Some(dt) = o.dt {
        if !(dt > 0.0) {
            bail!("--dt must be positive");
        }
        n.dt = dt;
    }
    if let Some(h) = o.horizon {
        if !(h > 0.0) {
            bail!("--horizon must be positive");
        }
        n.horizon = Some(h);
    }
    if let Some(g) = o.grid {
        n.grid = g;
    }
    if let Some(t) = o.tolerance {
        if !(t > 0.0) {
            bail!("--tolerance must be positive");
        }
        n.tolerance = t;
    }
    Ok(())
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn system(spec: &ProblemSpec) -> Result<BoundarySystem> {
    Ok(BoundarySystem::new(&spec.model.fundamental_pair()?, &spec.cost))
}

fn solve(spec: &ProblemSpec) -> Result<ValueFunction> {
    let t = Instant::now();
    let vf = ValueFunction::solve(&spec.model.fundamental_pair()?, &spec.cost, &spec.table)?;
    info!("value function assembled in {:.2?} (coefficient error {:.2e})", t.elapsed(), vf.coeff_error);
    Ok(vf)
}

fn write_csv<R: Serialize>(w: Box<dyn Write>, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(header)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

fn boundaries(spec: &ProblemSpec, by_demand: Option<usize>, out: Option<&Path>) -> Result<bool> {
    let sys = system(spec)?;
    let table = sys.tabulate(&spec.table)?;
    match by_demand {
        Some(n) => {
            let (lo, hi) = spec.table.d_range;
            let ds = sys.coordinate().grid(lo, hi, n.max(2));
            let rows: Vec<(f64, f64, f64)> = table.d_rows(&ds).iter().map(|r| (r[0], r[1], r[2])).collect();
            write_csv(sink(out)?, &["d", "chat_plus", "chat_minus"], rows)?;
        }
        None => {
            let rows: Vec<(f64, f64, f64)> = table.c_rows().iter().map(|r| (r[0], r[1], r[2])).collect();
            write_csv(sink(out)?, &["c", "x_star", "y_star"], rows)?;
        }
    }
    Ok(true)
}

fn value(spec: &ProblemSpec, out: Option<&Path>) -> Result<bool> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let vf = solve(spec)?;
    let (cs, ds) = vf.grid(spec.numerics.grid.0, spec.numerics.grid.1);
    let surface = vf.surface(&cs, &ds)?;
    write_csv(sink(Some(&dir.join("surface.csv")))?, &["c", "d", "v", "v_c", "region"], &surface)?;
    let coeffs = vf.coeff_rows(&cs)?;
    write_csv(sink(Some(&dir.join("coefficients.csv")))?, &["c", "a", "a_c", "b", "b_c"], &coeffs)?;
    eprintln!("wrote {} surface rows and {} coefficient rows to {}", surface.len(), coeffs.len(), dir.display());
    Ok(true)
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    fn below(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self {
            name,
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

fn max_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x) })
}

fn verify(spec: &ProblemSpec, out: Option<&Path>) -> Result<bool> {
    let vf = solve(spec)?;
    let n = &spec.numerics;
    let (cs, ds) = vf.grid(n.grid.0, n.grid.1);
    let rho = spec.model.rho();
    let mut checks = vec![Check::below("coefficient error budget", vf.coeff_error, 1e-7)];

    let vi = vf.vi_grid(&cs, &ds)?;
    checks.push(Check::below("variational inequality residual", max_of(vi.iter().map(|p| p.residual.abs())), n.tolerance));

    let fits = vf.smooth_fit_rows(&cs)?;
    let second = max_of(fits.iter().flat_map(|f| [f.minus, f.plus]).flatten().map(f64::abs));
    let first = max_of(fits.iter().flat_map(|f| [f.c1_minus, f.c1_plus]).flatten().map(f64::abs));
    checks.push(Check::below("smooth fit v_cd at the boundaries", second, n.smooth_fit_tolerance));
    checks.push(Check::below("first-order fit v_c = -q+ / q-", first, n.smooth_fit_tolerance));

    let eps = 1e-2 * (spec.table.c_range.1 - spec.table.c_range.0);
    let inner: Vec<f64> = cs.iter().copied().filter(|&c| c - eps >= cs[0] && c + eps <= cs[cs.len() - 1]).collect();
    let mut band = 0.0f64;
    for &c in &inner {
        for &d in &ds {
            let q = vf.second_difference(c, d, eps)?;
            band = band.max(-q).max(q - 1.0 / rho);
        }
    }
    checks.push(Check::below("convexity band 0 <= D2v <= 1/rho (excess)", band.max(0.0), 1e-6));

    let surface = vf.surface(&cs, &ds)?;
    let mut rise = 0.0f64;
    for w in surface.windows(2) {
        if w[0].c == w[1].c {
            rise = rise.max((w[1].v_c - w[0].v_c) / w[0].v_c.abs().max(1.0));
        }
    }
    checks.push(Check::below("v_c nonincreasing in d (largest rise)", rise.max(0.0), 1e-9));

    let th = vf.system().thresholds();
    let table = vf.table();
    let over_plus = max_of(ds.iter().map(|&d| (table.chat_plus(d) - th.chat_plus_g(d)).max(0.0)));
    let under_minus = max_of(ds.iter().map(|&d| {
        let (m, g) = (table.chat_minus(d), th.chat_minus_g(d));
        if m.is_infinite() && g.is_infinite() {
            0.0
        } else {
            (g - m).max(0.0)
        }
    }));
    let ordered = ds.iter().all(|&d| table.chat_plus(d) < table.chat_minus(d));
    checks.push(Check::below("chat_plus <= chat_plus_g (excess)", over_plus, 1e-9));
    checks.push(Check::below("chat_minus >= chat_minus_g (shortfall)", under_minus, 1e-9));
    checks.push(Check {
        name: "chat_plus < chat_minus",
        value: if ordered { 0.0 } else { 1.0 },
        tolerance: 0.0,
        pass: ordered,
    });

    let all = checks.iter().all(|c| c.pass);
    match out {
        Some(_) => {
            let mut w = sink(out)?;
            serde_json::to_writer_pretty(&mut w, &json!({ "pass": all, "grid": [cs.len(), ds.len()], "checks": checks }))?;
            writeln!(w)?;
        }
        None => {
            let mut w = sink(None)?;
            for c in &checks {
                writeln!(w, "{} {:<45} {:.3e} (tol {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance)?;
            }
        }
    }
    for c in checks.iter().filter(|c| !c.pass) {
        eprintln!("failed: {} = {:.3e} exceeds {:.1e}", c.name, c.value, c.tolerance);
    }
    Ok(all)
}

fn horizon(spec: &ProblemSpec, scale: f64) -> f64 {
    spec.numerics
        .horizon
        .unwrap_or_else(|| tail_horizon(&spec.model, scale.abs(), spec.numerics.tail_eps))
}

fn mc_params(spec: &ProblemSpec, scale: f64, bridge: bool) -> McParams {
    let n = &spec.numerics;
    let mut p = McParams::new(n.dt, horizon(spec, scale), n.n_paths, n.seed);
    p.bridge = bridge;
    p
}

fn simulate(spec: &ProblemSpec, args: &SimArgs, out: Option<&Path>) -> Result<bool> {
    let vf = solve(spec)?;
    let table: &BoundaryTable = vf.table();
    let c0 = args.c0.unwrap_or(spec.numerics.c0);
    let d0 = args.d0.unwrap_or(spec.d0);
    let v = vf.value_at(c0, d0).ok();
    let scale = v.unwrap_or_else(|| spec.cost.running_cost(c0, d0) / spec.model.rho());
    let params = mc_params(spec, scale, !args.no_bridge);
    let t = Instant::now();
    let (doc, pass) = if let Some(shift) = args.compare {
        let specs = [
            PolicySpec::optimal(table),
            PolicySpec::shifted(table, shift, 0.0),
            PolicySpec::shifted(table, -shift, 0.0),
            PolicySpec::do_nothing(table),
        ];
        let rows = compare_policies(&specs, &spec.model, &spec.cost, c0, d0, &params)?;
        let pass = rows[1..].iter().all(|r| r.excess >= -r.excess_se);
        let doc = json!({
            "c0": c0, "d0": d0, "value": v, "n_paths": params.n_paths, "dt": params.dt,
            "horizon": params.horizon, "seed": params.seed, "policies": rows, "optimal_is_best": pass,
        });
        (doc, pass)
    } else {
        let policy = if args.do_nothing {
            PolicySpec::do_nothing(table)
        } else {
            PolicySpec::shifted(table, args.shift_plus, args.shift_minus)
        };
        let r = mc_value(&policy, &spec.model, &spec.cost, c0, d0, &params)?;
        if let Some(tp) = &args.trace {
            let path = trace_policy(&policy, &spec.model, &spec.cost, (c0, d0), &params, 0)?;
            write_csv(sink(Some(tp))?, &["t", "d", "c", "d_invest", "d_disinvest"], &path)?;
        }
        let doc = json!({
            "policy": policy.label(), "c0": c0, "d0": d0, "value": v,
            "mean": r.discounted_cost, "std_error": r.std_error, "n_paths": r.n_paths,
            "dt": r.dt, "horizon": r.horizon, "seed": r.seed,
            "total_invest": r.total_invest, "total_disinvest": r.total_disinvest,
        });
        (doc, true)
    };
    info!("simulation took {:.2?}", t.elapsed());
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    Ok(pass)
}

fn dynkin(spec: &ProblemSpec, c: Option<f64>, d: Option<f64>, out: Option<&Path>) -> Result<bool> {
    let vf = solve(spec)?;
    let c = c.unwrap_or(spec.numerics.c0);
    let d = d.unwrap_or(spec.d0);
    let vc = vf.value_c_at(c, d).ok();
    let (qp, qm) = (spec.cost.q_plus(), spec.cost.q_minus());
    let scale = vc.unwrap_or(qp).abs().max(qp).max(if qm.is_finite() { qm } else { 0.0 });
    let params = mc_params(spec, scale, true);
    let est = mc_dynkin(&spec.model, &spec.cost, c, d, vf.table(), &params)?;
    let within = est.mean >= -qp - 3.0 * est.std_error && est.mean <= qm + 3.0 * est.std_error;
    let doc = json!({
        "c": c, "d": d, "mean": est.mean, "std_error": est.std_error, "n_paths": est.n_paths,
        "dt": est.dt, "horizon": est.horizon, "seed": est.seed, "value_c": vc, "within_price_bounds": within,
    });
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    if !within {
        eprintln!("failed: game value {} outside [-q+, q-] by more than 3 standard errors", est.mean);
    }
    Ok(within)
}

fn closed_form(spec: &ProblemSpec, tol: f64, out: Option<&Path>) -> Result<bool> {
    if spec.kind != "gbm" || !spec.cost.is_irreversible() || !matches!(spec.cost.beta0(), Profile::Identity) {
        bail!("closed-form needs kind = \"gbm\", q_minus = \"inf\" and beta0 = \"identity\"");
    }
    let (mu, s2, rho, qp, d0) = (spec.mu, spec.sigma * spec.sigma, spec.model.rho(), spec.cost.q_plus(), spec.d0);
    let (m, _) = gbm_exponents(mu, s2, rho);
    let a = rho * (m - 1.0) / (m * (rho - mu));
    let b = rho * qp;
    // A' = β'/ψ' at d̂₊(c) = (c + b)/a, integrated from c to ∞.
    let k = d0.powf(m) * a.powf(m - 1.0) / ((rho - mu) * m * (m - 2.0));
    let a_closed = |c: f64| -k * (c + b).powf(-(m - 2.0));

    let vf = solve(spec)?;
    let table = vf.table();
    let m_num = vf.system().pair().exponents().map_or_else(
        || (vf.system().pair().psi(d0 * std::f64::consts::E) / vf.system().pair().psi(d0)).ln(),
        |e| e.0,
    );
    let (c_lo, c_hi) = spec.table.c_range;
    let (d_lo, d_hi) = spec.table.d_range;
    // Demand values whose boundary capacity lies inside the tabulated range.
    let (e_lo, e_hi) = (d_lo.max((c_lo + b) / a), d_hi.min((c_hi + b) / a));
    if !(e_lo < e_hi) {
        bail!("c_range and the demand range do not overlap along the investment boundary");
    }
    let d_mid = (e_lo * e_hi).sqrt();
    let (chat, slope) = table.chat_plus_with_slope(d_mid);
    let (a_num, b_num) = (slope, slope * d_mid - chat);
    let dev_c = max_of((0..200).map(|i| {
        let d = e_lo + (e_hi - e_lo) * i as f64 / 199.0;
        (table.chat_plus(d) - (a * d - b)).abs()
    }));
    let c_start = c_lo.max(-b + 1e-9 * b.abs().max(1.0));
    let mut dev_a = 0.0f64;
    for i in 0..200 {
        let c = c_start + (c_hi - c_start) * i as f64 / 199.0;
        dev_a = dev_a.max((vf.coeff_a(c)?.0 - a_closed(c)).abs());
    }
    let pass = dev_c < tol && dev_a < tol;
    let mut w = sink(out)?;
    writeln!(w, "m = {m:.12} (pipeline {m_num:.12})")?;
    writeln!(w, "a = {a:.12} (fitted slope {a_num:.12})")?;
    writeln!(w, "b = {b:.12} (fitted intercept {b_num:.12})")?;
    writeln!(w, "chat_plus(d) = a*d - b, A(c) = -{k:.12e} * (c + b)^-{:.12}", m - 2.0)?;
    writeln!(w, "{} max |chat_plus - (a*d - b)| over 200 points = {dev_c:.3e} (tol {tol:.1e})", if dev_c < tol { "PASS" } else { "FAIL" })?;
    writeln!(w, "{} max |A(c) - closed form| over 200 points = {dev_a:.3e} (tol {tol:.1e})", if dev_a < tol { "PASS" } else { "FAIL" })?;
    Ok(pass)
}
