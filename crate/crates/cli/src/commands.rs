use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use foliwill::catalog::{self, LeafHarmonic, TrigField};
use foliwill::functionals::{
    conformal_density_check, el_residuals, evaluate, second_variation_analytic, Criticality, SecondVariationForm,
};
use foliwill::ode::OdeOptions;
use foliwill::revolution::{
    critical_closed_form, critical_ode_solve, second_variation_revolution, slope_exponent, sphere_area, CriticalProfile,
};
use foliwill::varcheck::{run_suite, verify_integral_identity, IdentityFields, IntegralIdentity, MIN_ORDER};

use crate::config::{
    ConfCheckConfig, ElCheckConfig, EvalConfig, Form, Functional, Map, ProfileConfig, SecondVarConfig, Surface, VarCheckConfig,
};
use crate::report::{float_rows, fmt17, read_columns, svg_plot, write_csv, Check};

pub struct Ctx {
    pub out_dir: PathBuf,
    pub verbose: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn linspace(a: f64, b: f64, m: usize) -> Vec<f64> {
    (0..m).map(|i| a + (b - a) * i as f64 / (m - 1) as f64).collect()
}

/// Max of |a − b| / max(1, |b|).
fn scaled_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn profile(cfg: &ProfileConfig, ctx: &Ctx) -> Result<Vec<Check>> {
    let n = cfg.n;
    ensure!(n >= 2, "hypersurface of revolution needs n >= 2, got {n}");
    ensure!(!cfg.p_values.is_empty(), "p_values is empty");
    for &p in &cfg.p_values {
        if slope_exponent(n, p) == 0.0 {
            bail!("degenerate: f'' ≡ 0 for p = n - 1 = {}", n - 1);
        }
    }
    let restart = match &cfg.initial_csv {
        Some(path) => {
            ensure!(cfg.p_values.len() == 1, "initial_csv needs exactly one p value");
            let cols = read_columns(path, &["rho", "f", "fprime"])?;
            ensure!(cols[0].len() >= 2, "{} has fewer than two rows", path.display());
            Some(cols)
        }
        None => {
            ensure!(cfg.samples >= 2, "samples must be at least 2");
            ensure!(cfg.rho_min > 0.0 && cfg.rho_max > cfg.rho_min, "need 0 < rho_min < rho_max");
            None
        }
    };
    let (rho0, f0, fp0, grid) = match &restart {
        Some(c) => (c[0][0], c[1][0], c[2][0], c[0].clone()),
        None => (cfg.rho0, cfg.f0, cfg.fp0, linspace(cfg.rho_min, cfg.rho_max, cfg.samples)),
    };
    let opts = OdeOptions { rtol: cfg.rtol, atol: cfg.atol, ..OdeOptions::default() };
    let mut checks = Vec::new();
    let mut curves = Vec::new();
    for &p in &cfg.p_values {
        let ode = critical_ode_solve(n, p, rho0, f0, fp0, &grid, opts)?;
        ensure!(ode.len() >= 2, "p = {p}: fewer than two samples before the vertical tangent");
        let fit = CriticalProfile::fit(n, p, rho0, f0, fp0)?;
        let closed = critical_closed_form(n, p, fit.c1, f0, rho0, fit.sign, &ode.rho)?;
        let dev = max_abs(ode.f.iter().zip(&closed.f).map(|(a, b)| a - b));
        let c = slope_exponent(n, p);
        let curv = ode.curvatures()?;
        let crit = max_abs(curv.iter().map(|(k1, kn)| kn - c * k1));
        let (k1, kn): (Vec<f64>, Vec<f64>) = curv.into_iter().unzip();
        let name = format!("profile_p{p}.csv");
        write_csv(
            &ctx.path(&name),
            &["rho", "f", "fprime", "k1", "kn"],
            &float_rows(&[&ode.rho, &ode.f, &ode.fprime, &k1, &kn]),
        )?;
        println!(
            "p = {p}: {} samples on [{:.6}, {:.6}], max |f_ode - f_closed| = {dev:.3e}, max |k_n - (p-n+1)k_1| = {crit:.3e}",
            ode.len(),
            ode.rho[0],
            ode.rho[ode.len() - 1]
        );
        ctx.log(format!("wrote {name}"));
        checks.push(Check::below(format!("ode_vs_closed_p{p}"), dev, cfg.tolerance));
        checks.push(Check::below(format!("criticality_p{p}"), crit, cfg.criticality_tolerance));
        if let Some(cols) = &restart {
            let m = ode.len().min(cols[0].len());
            let gap = scaled_gap(&ode.f[..m], &cols[1][..m]).max(scaled_gap(&ode.fprime[..m], &cols[2][..m]));
            checks.push(Check::below(format!("roundtrip_p{p}"), gap, 1e-9));
            checks.push(Check::predicate(format!("roundtrip_samples_p{p}"), m as f64, ode.len() == cols[0].len()));
        }
        curves.push((format!("p = {p}"), ode.rho, ode.f));
    }
    std::fs::write(ctx.path("profile.svg"), svg_plot(&curves, "rho", "f"))?;
    Ok(checks)
}

fn coarse(counts: &[usize]) -> Vec<usize> {
    counts.iter().map(|&c| (c / 2).max(4)).collect()
}

pub fn eval(cfg: &EvalConfig, ctx: &Ctx) -> Result<Vec<Check>> {
    let spec = cfg.functional.spec()?;
    let patch = cfg.surface.build(cfg.grid.as_deref())?;
    let counts: Vec<usize> = patch.grid.axes.iter().map(|a| a.len()).collect();
    let value = evaluate(&spec, &patch)?;
    ctx.log(format!("evaluated on {counts:?}"));
    let rough = evaluate(&spec, &cfg.surface.build(Some(&coarse(&counts)))?)?;
    let estimate = (value - rough).abs();
    println!("{} = {} (quadrature error estimate {estimate:.3e})", spec.label(), fmt17(value));
    let mut checks = vec![Check::info("value", value), Check::info("quadrature_error_estimate", estimate)];
    let reference = cfg.expected.or(match (&cfg.surface, cfg.functional) {
        (Surface::Sphere { n, .. }, Functional::W { p }) if p == *n as f64 && patch.s == *n => Some(sphere_area(*n)),
        _ => None,
    });
    if let Some(r) = reference {
        let err = (value - r).abs() / r.abs().max(f64::MIN_POSITIVE);
        println!("reference {} relative error {err:.3e}", fmt17(r));
        checks.push(Check::info("reference", r));
        checks.push(Check::below("relative_error", err, cfg.tolerance));
    }
    Ok(checks)
}

pub fn elcheck(cfg: &ElCheckConfig, ctx: &Ctx) -> Result<Vec<Check>> {
    let spec = cfg.functional.spec()?;
    let patch = cfg.surface.build(cfg.grid.as_deref())?;
    let nodes = match cfg.form {
        Form::Leafwise => patch.interior_nodes(&patch.leaf_axes(), 1),
        Form::Exact => patch.interior_nodes(&(0..patch.n).collect::<Vec<_>>(), 2),
    };
    ensure!(!nodes.is_empty(), "no grid node lies clear of the stencil margin; refine the grid");
    let res = el_residuals(&spec, &patch, cfg.form.into(), &nodes)?;
    let worst = max_abs(res.iter().copied());
    println!("{} {:?} form: max |EL residual| = {worst:.3e} over {} nodes", spec.label(), cfg.form, nodes.len());
    let mut header: Vec<String> = (0..patch.n).map(|i| format!("x{i}")).collect();
    header.insert(0, "node".into());
    header.push("residual".into());
    let rows: Vec<Vec<String>> = nodes
        .iter()
        .zip(&res)
        .map(|(&k, &r)| {
            let mut row = vec![k.to_string()];
            row.extend(patch.grid.point(k).into_iter().map(fmt17));
            row.push(fmt17(r));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(&ctx.path("elcheck_residuals.csv"), &header, &rows)?;
    Ok(vec![Check::info("nodes", nodes.len() as f64), Check::below("max_el_residual", worst, cfg.tolerance)])
}

pub fn varcheck(cfg: &VarCheckConfig, ctx: &Ctx) -> Result<Vec<Check>> {
    let patch = cfg.surface.build(cfg.grid.as_deref())?;
    let n = patch.n;
    let u = TrigField::random(n, cfg.u_degree, cfg.u_seed).scaled(cfg.u_scale);
    let f = TrigField::random(n, 2, cfg.f_seed);
    let suite = run_suite(&patch, &u, &f, &cfg.t_values)?;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for c in &suite.cases {
        let floor = 1e-9 * c.scale.max(1.0);
        let order = c
            .orders
            .iter()
            .zip(c.errors.iter().skip(1))
            .filter(|(_, e)| **e > floor)
            .map(|(o, _)| *o)
            .fold(f64::NAN, f64::min);
        ctx.log(format!("{}: errors {:?} orders {:?}", c.id, c.errors, c.orders));
        let shown = if order.is_nan() { "at roundoff".to_string() } else { format!("min order {order:.3}") };
        println!("{:<14} {} {shown}", c.id, if c.pass { "PASS" } else { "FAIL" });
        checks.push(Check { name: c.id.clone(), value: order, tolerance: Some(MIN_ORDER), pass: c.pass });
        if let Some(e) = c.printed_error {
            checks.push(Check::info(format!("{}.printed_form_gap", c.id), e));
        }
        for (i, (&t, &e)) in c.t_values.iter().zip(&c.errors).enumerate() {
            let o = if i == 0 { String::new() } else { fmt17(c.orders[i - 1]) };
            rows.push(vec![c.id.clone(), fmt17(t), fmt17(e), o]);
        }
    }
    if let Some(kf) = &suite.kf_chain {
        checks.push(Check::predicate("KF.direct_vs_formula", kf.direct_vs_formula.richardson_error, kf.direct_vs_formula.pass));
        checks.push(Check::predicate("KF.direct_vs_chain", kf.direct_vs_chain.richardson_error, kf.direct_vs_chain.pass));
        checks.push(Check::below("KF.formula_vs_chain", kf.formula_vs_chain, 1e-10));
    }
    checks.push(Check::predicate("dGamma.tensor", suite.tensor.numeric_deviation.max(suite.tensor.analytic_deviation), suite.tensor.pass));
    write_csv(&ctx.path("varcheck_table.csv"), &["id", "t", "error", "order"], &rows)?;
    if let Some(ic) = &cfg.identities {
        let host = ic.surface.build(ic.grid.as_deref())?;
        ensure!(host.grid.axes.iter().all(|a| a.is_periodic()), "identity surface must be periodic along every axis");
        let fields = IdentityFields::random(host.n, host.s, ic.seed);
        for id in IntegralIdentity::ALL {
            let r = verify_integral_identity(id, &host, &fields, ic.tolerance)?;
            let scaled = r.discrepancy / r.lhs.abs().max(r.rhs.abs()).max(1.0);
            if r.applicable {
                println!("identity {:<10} {} gap {scaled:.3e}, max |(div P)P| {:.3e}", r.id, if r.pass { "PASS" } else { "FAIL" }, r.div_p);
                checks.push(Check::below(format!("identity.{}", r.id), scaled, ic.tolerance));
            } else {
                println!("identity {:<10} skipped: max |(div P)P| = {:.3e}", r.id, r.div_p);
                checks.push(Check::info(format!("identity.{}.not_applicable", r.id), r.div_p));
            }
        }
    }
    Ok(checks)
}

pub fn confcheck(cfg: &ConfCheckConfig, _ctx: &Ctx) -> Result<Vec<Check>> {
    let patch = cfg.surface.build(cfg.grid.as_deref())?;
    let tol = cfg.tolerance.unwrap_or(match cfg.map {
        Map::Inversion => 1e-6,
        Map::Scaling { .. } => 1e-12,
    });
    let rep = conformal_density_check(&patch, cfg.r, cfg.map.into())?;
    println!(
        "density deviation {:.3e}, leaf shape-law deviation {:.3e} over {} nodes",
        rep.density_deviation, rep.shape_law_deviation, rep.nodes
    );
    Ok(vec![
        Check::info("nodes", rep.nodes as f64),
        Check::info("max_density", rep.max_density),
        Check::below("density_deviation", rep.density_deviation, tol),
        Check::below("shape_law_deviation", rep.shape_law_deviation, tol.max(1e-9)),
    ])
}

pub fn secondvar(cfg: &SecondVarConfig, ctx: &Ctx) -> Result<Vec<Check>> {
    let (n, p) = (cfg.n, cfg.p);
    ensure!(n >= 2, "hypersurface of revolution needs n >= 2, got {n}");
    ensure!(!cfg.harmonics.is_empty(), "harmonics is empty");
    let window = (cfg.window[0], cfg.window[1]);
    let prof = CriticalProfile::fit(n, p, cfg.rho0, cfg.f0, cfg.fp0)?;
    prof.check_feasible(window.0)?;
    prof.check_feasible(window.1)?;
    let patch = if cfg.cross_check {
        let mut counts = vec![cfg.leaf_nodes; n - 1];
        counts.push(cfg.nodes);
        Some(catalog::revolution(n, Arc::new(prof.clone()), window.0, window.1, &counts)?)
    } else {
        None
    };
    let spec = Functional::W { p }.spec()?;
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    for &j in &cfg.harmonics {
        let r = second_variation_revolution(n, p, &prof, j, None, window, cfg.nodes)
            .with_context(|| format!("harmonic j = {j}"))?;
        rows.push(vec![j.to_string(), fmt17(r.value), fmt17(r.lower_bound), fmt17(r.constant_mode), fmt17(r.eigenvalue)]);
        println!("j = {j}: second variation {:.9e}, lower bound {:.9e}", r.value, r.lower_bound);
        checks.push(Check::info(format!("criticality_residual_j{j}"), r.max_criticality_residual));
        if j == 0 {
            checks.push(Check::predicate("delta2_j0_negative", r.value, r.value < 0.0));
        } else {
            checks.push(Check::predicate(format!("delta2_j{j}_positive"), r.value, r.value > 0.0));
            let slack = 1e-10 * r.lower_bound.abs().max(1.0);
            checks.push(Check::predicate(format!("delta2_j{j}_above_bound"), r.value - r.lower_bound, r.value >= r.lower_bound - slack));
        }
        if let Some(patch) = &patch {
            let u = LeafHarmonic { n, j, radial: None };
            let b = second_variation_analytic(&spec, patch, &u, SecondVariationForm::PowerCritical, Criticality::Strict)?;
            let gap = (b - r.value).abs() / r.value.abs().max(f64::MIN_POSITIVE);
            ctx.log(format!("j = {j}: general power form {b:.15e}"));
            checks.push(Check::below(format!("cross_check_j{j}"), gap, cfg.tolerance));
        }
    }
    write_csv(&ctx.path("secondvar.csv"), &["j", "value", "lower_bound", "constant_mode", "eigenvalue"], &rows)?;
    Ok(checks)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
