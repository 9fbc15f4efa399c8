//! Finite-difference verification of the evolution equations along r + t·u·N.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{domain, Error, Result};
use crate::functionals::{convergence_orders, richardson};
use crate::geom_patch::{
    covector_divergence, double_divergence, fstar_squared, varied_jet, DerivativeSupplier, FoliatedPatch, JetSource,
    PointGeometry,
};
use crate::grid::{Axis, AxisKind, Grid};
use crate::jet::{chart_change_jacobian, pull_back_jet, ChartChange, MapJet, Real, ScalarFn, ScalarJet};
use crate::symfunc::newton_transform;

pub const DEFAULT_T: [f64; 3] = [1e-3, 5e-4, 2.5e-4];
pub const MIN_ORDER: f64 = 1.9;
/// Precondition threshold on ‖(div P)∘P‖ for the leafwise identities.
pub const DIVP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    G,
    GInv,
    H,
    NormHSq,
    NH,
    DV,
    SHF,
    NormHFSq,
    NormHmixSq,
    LapFF,
    Tau(usize),
    Sigma(usize),
    TwoHF,
    KF,
    Christoffel,
}

impl Quantity {
    pub fn id(&self) -> String {
        match self {
            Quantity::G => "g".into(),
            Quantity::GInv => "g_inv".into(),
            Quantity::H => "h".into(),
            Quantity::NormHSq => "norm_h_sq".into(),
            Quantity::NH => "nH".into(),
            Quantity::DV => "dV".into(),
            Quantity::SHF => "sH_F".into(),
            Quantity::NormHFSq => "norm_hF_sq".into(),
            Quantity::NormHmixSq => "norm_hmix_sq".into(),
            Quantity::LapFF => "lapF_f".into(),
            Quantity::Tau(i) => format!("tau_{i}"),
            Quantity::Sigma(r) => format!("sigma_{r}"),
            Quantity::TwoHF => "twoH_F".into(),
            Quantity::KF => "K_F".into(),
            Quantity::Christoffel => "Christoffel".into(),
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        let q = match id {
            "g" => Quantity::G,
            "g_inv" => Quantity::GInv,
            "h" => Quantity::H,
            "norm_h_sq" => Quantity::NormHSq,
            "nH" => Quantity::NH,
            "dV" => Quantity::DV,
            "sH_F" => Quantity::SHF,
            "norm_hF_sq" => Quantity::NormHFSq,
            "norm_hmix_sq" => Quantity::NormHmixSq,
            "lapF_f" => Quantity::LapFF,
            "twoH_F" => Quantity::TwoHF,
            "K_F" => Quantity::KF,
            "Christoffel" => Quantity::Christoffel,
            _ => {
                let num = |p: &str| id.strip_prefix(p).and_then(|v| v.parse::<usize>().ok()).filter(|&v| v >= 1);
                if let Some(i) = num("tau_") {
                    Quantity::Tau(i)
                } else if let Some(r) = num("sigma_") {
                    Quantity::Sigma(r)
                } else {
                    return domain(format!("unknown evolution quantity '{id}'"));
                }
            }
        };
        Ok(q)
    }

    /// Every quantity applicable to leaves of dimension s; τ_1..τ_{s+1} and σ_1..σ_s.
    pub fn suite(s: usize) -> Vec<Quantity> {
        let mut out = vec![
            Quantity::G,
            Quantity::GInv,
            Quantity::H,
            Quantity::NormHSq,
            Quantity::NH,
            Quantity::DV,
            Quantity::SHF,
            Quantity::NormHFSq,
            Quantity::NormHmixSq,
            Quantity::LapFF,
        ];
        out.extend((1..=s + 1).map(Quantity::Tau));
        out.extend((1..=s).map(Quantity::Sigma));
        if s == 2 {
            out.push(Quantity::TwoHF);
            out.push(Quantity::KF);
        }
        out.push(Quantity::Christoffel);
        out
    }

    pub fn needs_f(&self) -> bool {
        *self == Quantity::LapFF
    }

    fn check(&self, s: usize) -> Result<()> {
        match self {
            Quantity::TwoHF | Quantity::KF if s != 2 => {
                Err(Error::Spec(format!("{} needs leaves of dimension 2, got s = {s}", self.id())))
            }
            Quantity::Tau(0) | Quantity::Sigma(0) => domain("indices start at 1"),
            Quantity::Sigma(r) if *r > s => Err(Error::Spec(format!("σ_{r} needs s ≥ {r}, got s = {s}"))),
            _ => Ok(()),
        }
    }

    /// Components of the quantity itself at a point.
    pub fn value(&self, geo: &PointGeometry, f: Option<&ScalarJet>) -> Result<Vec<f64>> {
        let s = geo.s;
        Ok(match self {
            Quantity::G => flat(&geo.g),
            Quantity::GInv => flat(&geo.g_inv),
            Quantity::H => flat(&geo.h),
            Quantity::NormHSq => vec![geo.norm_h_sq],
            Quantity::NH => vec![geo.n as f64 * geo.mean_curvature],
            Quantity::DV => vec![geo.sqrt_det_g],
            Quantity::SHF | Quantity::TwoHF => vec![geo.sigma[1]],
            Quantity::NormHFSq => vec![geo.norm_hf_sq],
            Quantity::NormHmixSq => vec![geo.norm_hmix_sq],
            Quantity::LapFF => vec![geo.leaf_laplacian(need_f(f)?)],
            Quantity::Tau(i) => vec![sym(&geo.h_f).pow(*i as u32).trace()],
            Quantity::Sigma(r) => vec![geo.sigma[*r]],
            Quantity::KF => vec![geo.sigma[2]],
            Quantity::Christoffel => geo.gamma.iter().flat_map(flat).collect(),
        })
        .and_then(|v| if s == 0 { domain("leaf dimension 0") } else { Ok(v) })
    }

    /// Tensorial first variation; leaf blocks use the ambient Hessian restricted to the leaves.
    pub fn analytic(&self, geo: &PointGeometry, u: &ScalarJet, f: Option<&ScalarJet>) -> Result<Vec<f64>> {
        let n = geo.n;
        let p = Pieces::new(geo, u);
        Ok(match self {
            Quantity::G => flat(&(&geo.h * (-2.0 * u.v))),
            Quantity::GInv => flat(&(&geo.g_inv * &geo.h * &geo.g_inv * (2.0 * u.v))),
            Quantity::H => flat(&(&p.hess - &geo.h * &geo.g_inv * &geo.h * u.v)),
            Quantity::NormHSq => {
                let a3 = (&geo.a * &geo.a * &geo.a).trace();
                vec![2.0 * geo.inner(&p.hess, &geo.h) + 2.0 * u.v * a3]
            }
            Quantity::NH => vec![geo.laplacian(u) + u.v * geo.norm_h_sq],
            Quantity::DV => vec![-(n as f64) * u.v * geo.mean_curvature * geo.sqrt_det_g],
            Quantity::SHF | Quantity::TwoHF => vec![p.delta_a.trace()],
            Quantity::NormHFSq => vec![2.0 * fro(&p.a, &p.delta_a)],
            Quantity::NormHmixSq => vec![4.0 * u.v * (&p.a * &p.mm).trace() + 2.0 * fro(&p.mix_hess, &geo.h_mix)],
            Quantity::LapFF => vec![lap_f_variation(geo, u, need_f(f)?, false)?],
            Quantity::Tau(i) => {
                let i = *i as u32;
                vec![i as f64 * fro(&p.a.pow(i - 1), &p.delta_a)]
            }
            Quantity::Sigma(r) => vec![fro(&newton_transform(&p.a, r - 1)?.matrix, &p.delta_a)],
            Quantity::KF => vec![fro(&newton_transform(&p.a, 1)?.matrix, &p.delta_a)],
            Quantity::Christoffel => christoffel_variation(geo, u)?,
        })
    }

    /// The formula as printed, where it differs from the tensorial form; None otherwise.
    pub fn printed(&self, geo: &PointGeometry, u: &ScalarJet, f: Option<&ScalarJet>) -> Result<Option<Vec<f64>>> {
        let p = Pieces::new(geo, u);
        let (uv, sg) = (u.v, &geo.sigma);
        let lap_f = geo.leaf_laplacian(u);
        let nm = geo.norm_hmix_sq;
        Ok(Some(match self {
            Quantity::SHF | Quantity::TwoHF => vec![lap_f + uv * (geo.norm_hf_sq - nm)],
            Quantity::NormHFSq => vec![2.0 * fro(&p.a, &(&(&p.a2 + &p.mm) * uv + &p.leaf_hess))],
            Quantity::NormHmixSq => {
                let c = &geo.h_fperp;
                let mtm = geo.h_mix.transpose() * &geo.h_mix;
                vec![uv * ((&p.a * &p.mm).trace() + (c * mtm).trace()) + 2.0 * fro(&geo.h_mix, &p.mix_hess)]
            }
            Quantity::LapFF => vec![lap_f_variation(geo, u, need_f(f)?, true)?],
            Quantity::Tau(i) => {
                let i = *i as u32;
                let ai = p.a.pow(i - 1);
                let tau_next = p.a.pow(i + 1).trace();
                vec![i as f64 * (fro(&ai, &p.leaf_hess) + uv * (tau_next + fro(&ai, &p.mm)))]
            }
            Quantity::Sigma(r) => {
                let r = *r;
                let t = newton_transform(&p.a, r - 1)?.matrix;
                let next = if r < sg.len() - 1 { sg[r + 1] } else { 0.0 };
                let alg = sg[1] * sg[r - 1] - (r as f64 + 1.0) * next;
                vec![fro(&t, &p.leaf_hess) + uv * (alg + fro(&t, &p.mm))]
            }
            Quantity::KF => {
                let hf = 0.5 * sg[1];
                vec![2.0 * hf * lap_f - fro(&p.a, &(&p.mm * uv + &p.leaf_hess)) + 2.0 * uv * hf * (sg[2] - nm)]
            }
            _ => return Ok(None),
        }))
    }
}

fn need_f(f: Option<&ScalarJet>) -> Result<&ScalarJet> {
    f.ok_or_else(|| Error::Domain("lapF_f needs a test function f".into()))
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Frame blocks shared by the leaf cases.
struct Pieces {
    hess: DMatrix<f64>,
    a: DMatrix<f64>,
    a2: DMatrix<f64>,
    mm: DMatrix<f64>,
    mix_hess: DMatrix<f64>,
    leaf_hess: DMatrix<f64>,
    /// δa = Hess_u|_F + u(a² − m mᵀ).
    delta_a: DMatrix<f64>,
}

impl Pieces {
    fn new(geo: &PointGeometry, u: &ScalarJet) -> Self {
        let hs = geo.hessians(u);
        let a = sym(&geo.h_f);
        let a2 = &a * &a;
        let mm = &geo.h_mix * geo.h_mix.transpose();
        let delta_a = sym(&hs.leaf_restricted_frame) + (&a2 - &mm) * u.v;
        Pieces { hess: hs.full, a, a2, mm, mix_hess: hs.mix_frame, leaf_hess: sym(&hs.leaf_frame), delta_a }
    }
}

/// δ(Δ_F f) for a fixed f. The exact form carries 2u⟨div_F h_F − ∇σ_1, ∇^F f⟩ beyond the printed one.
fn lap_f_variation(geo: &PointGeometry, u: &ScalarJet, f: &ScalarJet, printed: bool) -> Result<f64> {
    let s = geo.s;
    let gi = &geo.leaf_g_inv;
    let hff = geo.h.view((0, 0), (s, s)).into_owned();
    let hess_f = geo.leaf_hessian(f);
    let mut v = 2.0 * u.v * (gi * &hff * gi * &hess_f).trace();
    let gu = geo.leaf_gradient(u);
    let gf = geo.leaf_gradient(f);
    v += 2.0 * gu.dot(&(&hff * &gf)) - geo.sigma[1] * geo.leaf_grad_dot(u, f);
    let third = geo.third()?;
    let dsig: Vec<f64> = third.d_s_hf[..s].to_vec();
    let grad_sig_f: f64 = (0..s).map(|d| dsig[d] * gf[d]).sum();
    if printed {
        return Ok(v + u.v * grad_sig_f);
    }
    // (div_F h_F)_d = G^{ab} ∇^F_a h_bd
    let mut div = vec![0.0; s];
    for (d, dv) in div.iter_mut().enumerate() {
        for a in 0..s {
            for b in 0..s {
                let mut cov = third.dh[a][(b, d)];
                for e in 0..s {
                    cov -= geo.leaf_gamma[e][(a, b)] * hff[(e, d)] + geo.leaf_gamma[e][(a, d)] * hff[(b, e)];
                }
                *dv += gi[(a, b)] * cov;
            }
        }
    }
    let div_f: f64 = (0..s).map(|d| div[d] * gf[d]).sum();
    Ok(v + 2.0 * u.v * div_f - u.v * grad_sig_f)
}

/// δΓ^k_ij = −g^{kl}(∇_i(uh)_jl + ∇_j(uh)_il − ∇_l(uh)_ij), flattened [k][i][j].
fn christoffel_variation(geo: &PointGeometry, u: &ScalarJet) -> Result<Vec<f64>> {
    let n = geo.n;
    let cov = &geo.third()?.cov_dh;
    let nab = |i: usize, j: usize, l: usize| u.d1[i] * geo.h[(j, l)] + u.v * cov[i][(j, l)];
    let mut out = vec![0.0; n * n * n];
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for l in 0..n {
                    v -= geo.g_inv[(k, l)] * (nab(i, j, l) + nab(j, i, l) - nab(l, i, j));
                }
                out[(k * n + i) * n + j] = v;
            }
        }
    }
    Ok(out)
}

pub type AnalyticRhs = Arc<dyn Fn(&PointGeometry, &ScalarJet, Option<&ScalarJet>) -> Result<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
pub struct EvolutionCase {
    pub quantity: Quantity,
    /// Replaces the built-in tensorial right side when set.
    pub analytic_rhs: Option<AnalyticRhs>,
    pub t_values: Vec<f64>,
    /// Node-count multipliers for the grid-step study; empty skips it.
    pub grid_levels: Vec<usize>,
}

impl std::fmt::Debug for EvolutionCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvolutionCase")
            .field("quantity", &self.quantity)
            .field("custom_rhs", &self.analytic_rhs.is_some())
            .field("t_values", &self.t_values)
            .field("grid_levels", &self.grid_levels)
            .finish()
    }
}

impl EvolutionCase {
    pub fn new(quantity: Quantity) -> Self {
        EvolutionCase { quantity, analytic_rhs: None, t_values: DEFAULT_T.to_vec(), grid_levels: Vec::new() }
    }

    pub fn with_t_values(mut self, t: &[f64]) -> Result<Self> {
        check_t(t)?;
        self.t_values = t.to_vec();
        Ok(self)
    }

    pub fn with_analytic(mut self, rhs: AnalyticRhs) -> Self {
        self.analytic_rhs = Some(rhs);
        self
    }

    pub fn with_grid_levels(mut self, levels: &[usize]) -> Self {
        self.grid_levels = levels.to_vec();
        self
    }

    fn rhs(&self, geo: &PointGeometry, u: &ScalarJet, f: Option<&ScalarJet>) -> Result<Vec<f64>> {
        match &self.analytic_rhs {
            Some(r) => r(geo, u, f),
            None => self.quantity.analytic(geo, u, f),
        }
    }
}

fn check_t(t: &[f64]) -> Result<()> {
    if t.len() < 2 || t.iter().any(|v| !(*v > 0.0)) || t.windows(2).any(|w| w[1] >= w[0]) {
        return domain("t values must be positive, strictly decreasing, at least two");
    }
    Ok(())
}

/// Both sides at one node and component, kept for failing cases.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSample {
    pub node: usize,
    pub component: usize,
    pub numeric: f64,
    pub analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub id: String,
    pub t_values: Vec<f64>,
    /// max over nodes and components of |central difference − analytic|, per t.
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
    /// max |Richardson value − analytic|.
    pub richardson_error: f64,
    /// Worst node: Richardson value and analytic value.
    pub numeric: f64,
    pub analytic: f64,
    pub scale: f64,
    /// max |Richardson value − printed formula| where a printed formula differs.
    pub printed_error: Option<f64>,
    /// Grid-step study with finite-difference jets: errors and orders per refinement.
    pub grid_errors: Vec<f64>,
    pub grid_orders: Vec<f64>,
    pub pass: bool,
    /// Every node and component, filled only when the case fails.
    pub diagnostics: Vec<NodeSample>,
}

impl ConvergenceReport {
    pub fn printed_agrees(&self) -> Option<bool> {
        self.printed_error.map(|e| e <= 1e-6 * self.scale.max(1.0))
    }
}

/// Geometry of r + t·u·N from the base 3-jet, with the normal kept on the side of the base normal.
fn varied_geometry(jet: &MapJet, geo: &PointGeometry, u: &ScalarJet, t: f64) -> Result<PointGeometry> {
    let vj = varied_jet(jet, geo, u, t)?;
    let mut out = PointGeometry::from_jet(&vj, geo.s, 1.0)?;
    if out.normal.dot(&geo.normal) < 0.0 {
        out = PointGeometry::from_jet(&vj, geo.s, -1.0)?;
    }
    Ok(out)
}

/// Central differences of the quantity along r + t·u·N against the analytic right side at t = 0.
pub fn verify_evolution(
    case: &EvolutionCase,
    patch: &FoliatedPatch,
    u: &dyn ScalarFn,
    f: Option<&dyn ScalarFn>,
) -> Result<ConvergenceReport> {
    check_t(&case.t_values)?;
    let q = case.quantity;
    q.check(patch.s)?;
    if q.needs_f() && f.is_none() {
        return domain("lapF_f needs a test function f");
    }
    let ts = &case.t_values;
    let m = ts.len();
    let len = patch.grid.len();
    let mut errors = vec![0.0f64; m];
    let (mut rich_err, mut scale, mut printed_err) = (0.0f64, 0.0f64, None::<f64>);
    let (mut worst, mut worst_pair) = (-1.0f64, (0.0, 0.0));
    let mut samples = Vec::new();
    for k in 0..len {
        let x = patch.grid.point(k);
        let jet = patch.jet(k, 3)?;
        let geo = PointGeometry::from_jet(&jet, patch.s, patch.orientation)?;
        let uj = u.jet(&x, 2);
        let fj = f.map(|f| f.jet(&x, 2));
        let ana = case.rhs(&geo, &uj, fj.as_ref())?;
        let q0 = q.value(&geo, fj.as_ref())?;
        let mut diffs: Vec<Vec<f64>> = Vec::with_capacity(m);
        for &t in ts {
            let qp = q.value(&varied_geometry(&jet, &geo, &uj, t)?, fj.as_ref())?;
            let qm = q.value(&varied_geometry(&jet, &geo, &uj, -t)?, fj.as_ref())?;
            diffs.push(qp.iter().zip(&qm).map(|(a, b)| (a - b) / (2.0 * t)).collect());
        }
        let printed = q.printed(&geo, &uj, fj.as_ref())?;
        for c in 0..ana.len() {
            scale = scale.max(ana[c].abs()).max(q0[c].abs());
            for (i, d) in diffs.iter().enumerate() {
                errors[i] = errors[i].max((d[c] - ana[c]).abs());
            }
            let rich = richardson(ts[m - 2], diffs[m - 2][c], ts[m - 1], diffs[m - 1][c]);
            let e = (rich - ana[c]).abs();
            rich_err = rich_err.max(e);
            if e > worst {
                worst = e;
                worst_pair = (rich, ana[c]);
            }
            if let Some(p) = &printed {
                let pe = (rich - p[c]).abs();
                printed_err = Some(printed_err.map_or(pe, |v: f64| v.max(pe)));
            }
            samples.push(NodeSample { node: k, component: c, numeric: rich, analytic: ana[c] });
        }
    }
    let floor = 1e-9 * scale.max(1.0);
    let (orders, pass) = convergence_orders(ts, &errors, floor);
    let pass = pass && orders.iter().zip(errors.iter().skip(1)).all(|(o, e)| *o >= MIN_ORDER || *e <= floor);
    let (grid_errors, grid_orders) = if case.grid_levels.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        grid_study(case, patch, u, f)?
    };
    Ok(ConvergenceReport {
        id: q.id(),
        t_values: ts.clone(),
        errors,
        orders,
        richardson_error: rich_err,
        numeric: worst_pair.0,
        analytic: worst_pair.1,
        scale,
        printed_error: printed_err,
        grid_errors,
        grid_orders,
        pass,
        diagnostics: if pass { Vec::new() } else { samples },
    })
}

/// Analytic right side from stencil jets on refined grids, against analytic jets at the shared node 0.
fn grid_study(case: &EvolutionCase, patch: &FoliatedPatch, u: &dyn ScalarFn, f: Option<&dyn ScalarFn>) -> Result<(Vec<f64>, Vec<f64>)> {
    if patch.grid.axes.iter().any(|a| a.kind != AxisKind::Periodic) {
        return Err(Error::Precondition("the grid-step study needs a fully periodic grid".into()));
    }
    let x = patch.grid.point(0);
    let uj = u.jet(&x, 2);
    let fj = f.map(|f| f.jet(&x, 2));
    let exact = case.rhs(&PointGeometry::from_jet(&patch.jet(0, 3)?, patch.s, patch.orientation)?, &uj, fj.as_ref())?;
    let mut errs = Vec::new();
    let mut hs = Vec::new();
    for &level in &case.grid_levels {
        let axes = patch
            .grid
            .axes
            .iter()
            .map(|a| Axis::periodic(a.a, a.b, a.len() * level))
            .collect::<Result<Vec<_>>>()?;
        let fine = patch.with_grid(Grid::new(axes)?)?.with_supplier(DerivativeSupplier::FiniteDifference)?;
        let geo = PointGeometry::from_jet(&fine.jet(0, 3)?, fine.s, fine.orientation)?;
        let got = case.rhs(&geo, &uj, fj.as_ref())?;
        errs.push(got.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        hs.push(1.0 / level as f64);
    }
    let orders = (1..errs.len()).map(|i| (errs[i - 1] / errs[i]).ln() / (hs[i - 1] / hs[i]).ln()).collect();
    Ok((errs, orders))
}

/// δK_F three ways on an s = 2 patch: finite differences, the σ_2 formula, and 2H_F δ(2H_F) − ½ δ‖h_F‖².
#[derive(Debug, Clone, PartialEq)]
pub struct KfChain {
    pub direct_vs_formula: ConvergenceReport,
    pub direct_vs_chain: ConvergenceReport,
    /// max |formula − chain| over nodes.
    pub formula_vs_chain: f64,
}

pub fn verify_kf_chain(patch: &FoliatedPatch, u: &dyn ScalarFn, t: &[f64]) -> Result<KfChain> {
    Quantity::KF.check(patch.s)?;
    let chain: AnalyticRhs = Arc::new(|geo, u, _| {
        let d2h = Quantity::TwoHF.analytic(geo, u, None)?[0];
        let dhf = Quantity::NormHFSq.analytic(geo, u, None)?[0];
        Ok(vec![geo.sigma[1] * d2h - 0.5 * dhf])
    });
    let direct_vs_formula = verify_evolution(&EvolutionCase::new(Quantity::KF).with_t_values(t)?, patch, u, None)?;
    let direct_vs_chain =
        verify_evolution(&EvolutionCase::new(Quantity::KF).with_t_values(t)?.with_analytic(chain.clone()), patch, u, None)?;
    let mut gap = 0.0f64;
    for k in 0..patch.grid.len() {
        let geo = patch.point_geometry3(k)?;
        let uj = u.jet(&patch.grid.point(k), 2);
        let a = Quantity::KF.analytic(&geo, &uj, None)?[0];
        let b = chain(&geo, &uj, None)?[0];
        gap = gap.max((a - b).abs());
    }
    Ok(KfChain { direct_vs_formula, direct_vs_chain, formula_vs_chain: gap })
}

/// Smooth near-identity chart change y ↦ y + ε·(sin of the next coordinate).
#[derive(Debug, Clone, Copy)]
pub struct ShearChange {
    pub dim: usize,
    pub eps: f64,
}

impl ChartChange for ShearChange {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval<D: Real>(&self, y: &[D]) -> Vec<D> {
        (0..self.dim).map(|i| y[i] + (y[(i + 1) % self.dim] * 0.7 + y[i] * 0.3).sin() * self.eps).collect()
    }
}

struct PulledField<'a, C: ChartChange> {
    inner: &'a dyn ScalarFn,
    change: C,
}

impl<C: ChartChange> PulledField<'_, C> {
    /// Jet of u∘φ at y, by pulling back the jet of u at φ(y) as a one-component map.
    fn jet(&self, y: &[f64]) -> ScalarJet {
        let x = self.change.eval(y);
        let uj = self.inner.jet(&x, 3);
        let n = uj.n;
        let mut mj = MapJet::zeros(n, 1, 3);
        mj.v[0] = uj.v;
        for i in 0..n {
            mj.d1[i][0] = uj.d1[i];
            for j in 0..n {
                mj.d2[i * n + j][0] = uj.d2[(i, j)];
                for k in 0..n {
                    mj.d3[(i * n + j) * n + k][0] = uj.d3(i, j, k);
                }
            }
        }
        let pj = pull_back_jet(&self.change, &mj, y);
        crate::jet::scalar_from_map_jet(&pj)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    /// max relative deviation of the transformed finite-difference δΓ from the one computed in the new chart.
    pub numeric_deviation: f64,
    pub analytic_deviation: f64,
    pub pass: bool,
}

/// δΓ transforms as a (1,2)-tensor: compares both charts at y, x = φ(y).
pub fn christoffel_tensor_check<C: ChartChange + Copy>(
    patch: &FoliatedPatch,
    u: &dyn ScalarFn,
    change: C,
    y: &[f64],
    t: f64,
) -> Result<TensorCheck> {
    let n = patch.n;
    if change.dim() != n || y.len() != n {
        return domain("chart change dimension must match the patch");
    }
    let x = change.eval(y);
    let jx = patch.immersion.jet(&x, 3);
    let gx = PointGeometry::from_jet(&jx, patch.s, patch.orientation)?;
    let jy = pull_back_jet(&change, &jx, y);
    let mut gy = PointGeometry::from_jet(&jy, patch.s, 1.0)?;
    if gy.normal.dot(&gx.normal) < 0.0 {
        gy = PointGeometry::from_jet(&jy, patch.s, -1.0)?;
    }
    let ux = u.jet(&x, 2);
    let uy = PulledField { inner: u, change }.jet(y);
    let fd = |jet: &MapJet, geo: &PointGeometry, uj: &ScalarJet| -> Result<Vec<f64>> {
        let p = Quantity::Christoffel.value(&varied_geometry(jet, geo, uj, t)?, None)?;
        let m = Quantity::Christoffel.value(&varied_geometry(jet, geo, uj, -t)?, None)?;
        Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * t)).collect())
    };
    let jac = chart_change_jacobian(&change, y);
    let jinv = jac.clone().try_inverse().ok_or_else(|| Error::Domain("chart change is singular".into()))?;
    let transform = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * n * n];
        for c in 0..n {
            for a in 0..n {
                for b in 0..n {
                    let mut acc = 0.0;
                    for k in 0..n {
                        for i in 0..n {
                            for j in 0..n {
                                acc += jinv[(c, k)] * jac[(i, a)] * jac[(j, b)] * v[(k * n + i) * n + j];
                            }
                        }
                    }
                    out[(c * n + a) * n + b] = acc;
                }
            }
        }
        out
    };
    let dev = |a: &[f64], b: &[f64]| {
        let s = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max) / s
    };
    let numeric_deviation = dev(&transform(&fd(&jx, &gx, &ux)?), &fd(&jy, &gy, &uy)?);
    let analytic_deviation = dev(&transform(&christoffel_variation(&gx, &ux)?), &christoffel_variation(&gy, &uy)?);
    Ok(TensorCheck { numeric_deviation, analytic_deviation, pass: numeric_deviation < 1e-6 && analytic_deviation < 1e-6 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<ConvergenceReport>,
    pub kf_chain: Option<KfChain>,
    pub tensor: TensorCheck,
    pub pass: bool,
}

/// Every applicable quantity on one patch, plus the δK_F chain (s = 2) and the δΓ tensor check.
pub fn run_suite(patch: &FoliatedPatch, u: &dyn ScalarFn, f: &dyn ScalarFn, t: &[f64]) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for q in Quantity::suite(patch.s) {
        cases.push(verify_evolution(&EvolutionCase::new(q).with_t_values(t)?, patch, u, Some(f))?);
    }
    let kf_chain = if patch.s == 2 { Some(verify_kf_chain(patch, u, t)?) } else { None };
    let y: Vec<f64> = patch.grid.point(patch.grid.len() / 3);
    let tensor = christoffel_tensor_check(patch, u, ShearChange { dim: patch.n, eps: 0.1 }, &y, t[t.len() - 1])?;
    let kf_ok = kf_chain
        .as_ref()
        .map_or(true, |c| c.direct_vs_formula.pass && c.direct_vs_chain.pass && c.formula_vs_chain < 1e-10);
    let pass = cases.iter().all(|c| c.pass) && kf_ok && tensor.pass;
    Ok(SuiteReport { cases, kf_chain, tensor, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegralIdentity {
    /// ∫ f₁ Δ_F f₂ = −∫ ⟨∇^F f₁, ∇^F f₂⟩
    GreenF,
    /// ∫ f₁ Δ_F f₂ = ∫ f₂ Δ_F f₁
    SymmF,
    /// ∫ ⟨B, Hess u⟩ = ∫ u (∇*)² B on M
    IbpFull,
    /// ∫ ⟨B, Hess^F u⟩ = ∫ u (∇^{F*})² B
    IbpF,
    /// ∫ ⟨ω, ∇^F u⟩ = ∫ u ∇^{F*} ω
    AdjointF,
}

impl IntegralIdentity {
    pub const ALL: [IntegralIdentity; 5] =
        [IntegralIdentity::GreenF, IntegralIdentity::SymmF, IntegralIdentity::IbpFull, IntegralIdentity::IbpF, IntegralIdentity::AdjointF];

    pub fn id(&self) -> &'static str {
        match self {
            IntegralIdentity::GreenF => "green_F",
            IntegralIdentity::SymmF => "symm_F",
            IntegralIdentity::IbpFull => "ibp_full",
            IntegralIdentity::IbpF => "ibp_F",
            IntegralIdentity::AdjointF => "adjoint_F",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|i| i.id() == id).ok_or_else(|| Error::Domain(format!("unknown identity '{id}'")))
    }

    fn leafwise(&self) -> bool {
        *self != IntegralIdentity::IbpFull
    }
}

/// Test fields: scalars f₁ (also u) and f₂, covariant tensor components (n×n, the leaf block is used
/// by ibp_F) and a leaf 1-form.
#[derive(Clone)]
pub struct IdentityFields {
    pub f1: Arc<dyn ScalarFn>,
    pub f2: Arc<dyn ScalarFn>,
    pub b: Vec<Arc<dyn ScalarFn>>,
    pub omega: Vec<Arc<dyn ScalarFn>>,
}

impl IdentityFields {
    /// Random trigonometric fields on a periodic patch; B symmetric.
    pub fn random(n: usize, s: usize, seed: u64) -> Self {
        use crate::catalog::TrigField;
        let field = |k: u64| -> Arc<dyn ScalarFn> { Arc::new(TrigField::random(n, 2, seed.wrapping_mul(97).wrapping_add(k))) };
        let mut b: Vec<Arc<dyn ScalarFn>> = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                b.push(if j < i { b[j * n + i].clone() } else { field(10 + (i * n + j) as u64) });
            }
        }
        IdentityFields { f1: field(1), f2: field(2), b, omega: (0..s).map(|a| field(100 + a as u64)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityReport {
    pub id: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub discrepancy: f64,
    /// max ‖(div P)∘P‖ over the nodes.
    pub div_p: f64,
    /// false when the leafwise precondition fails; the identity is then not claimed.
    pub applicable: bool,
    pub pass: bool,
}

/// Both sides by quadrature over the patch; pass when |lhs − rhs| ≤ tol·max(1, |lhs|, |rhs|).
pub fn verify_integral_identity(
    id: IntegralIdentity,
    patch: &FoliatedPatch,
    fields: &IdentityFields,
    tol: f64,
) -> Result<IdentityReport> {
    let (n, s) = (patch.n, patch.s);
    if fields.b.len() != n * n || fields.omega.len() != s {
        return domain(format!("fields need {} tensor and {s} 1-form components", n * n));
    }
    let mut div_p = 0.0f64;
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for k in 0..patch.grid.len() {
        let x = patch.grid.point(k);
        let jet = patch.jet(k, 3)?;
        let geo = PointGeometry::from_jet(&jet, s, patch.orientation)?;
        div_p = div_p.max(geo.div_projector().norm());
        let w = patch.grid.weight(k) * geo.sqrt_det_g;
        let f1 = fields.f1.jet(&x, 2);
        let (l, r) = match id {
            IntegralIdentity::GreenF => {
                let f2 = fields.f2.jet(&x, 2);
                (f1.v * geo.leaf_laplacian(&f2), -geo.leaf_grad_dot(&f1, &f2))
            }
            IntegralIdentity::SymmF => {
                let f2 = fields.f2.jet(&x, 2);
                (f1.v * geo.leaf_laplacian(&f2), f2.v * geo.leaf_laplacian(&f1))
            }
            IntegralIdentity::IbpFull => {
                let comps: Vec<ScalarJet> = fields.b.iter().map(|c| c.jet(&x, 2)).collect();
                let bm = DMatrix::from_fn(n, n, |i, j| comps[i * n + j].v);
                (geo.inner(&bm, &geo.hessian(&f1)), f1.v * double_divergence(&jet, &comps, n)?)
            }
            IntegralIdentity::IbpF => {
                let leaf: Vec<Arc<dyn ScalarFn>> =
                    (0..s).flat_map(|i| (0..s).map(move |j| (i, j))).map(|(i, j)| fields.b[i * n + j].clone()).collect();
                let bm = DMatrix::from_fn(s, s, |i, j| leaf[i * s + j].value(&x));
                let gi = &geo.leaf_g_inv;
                ((gi * bm * gi * geo.leaf_hessian(&f1)).trace(), f1.v * fstar_squared(patch, &leaf, k)?)
            }
            IntegralIdentity::AdjointF => {
                let om: Vec<ScalarJet> = fields.omega.iter().map(|c| c.jet(&x, 2)).collect();
                let omv: Vec<f64> = om.iter().map(|o| o.v).collect();
                let grad = geo.leaf_gradient(&f1);
                let pair: f64 = (0..s).map(|a| omv[a] * grad[a]).sum();
                (pair, -f1.v * covector_divergence(&jet, &om, s)?)
            }
        };
        lhs += w * l;
        rhs += w * r;
    }
    let applicable = !id.leafwise() || div_p <= DIVP_TOL;
    let discrepancy = (lhs - rhs).abs();
    let pass = applicable && discrepancy <= tol * lhs.abs().max(rhs.abs()).max(1.0);
    Ok(IdentityReport { id: id.id(), lhs, rhs, discrepancy, div_p, applicable, pass })
}
