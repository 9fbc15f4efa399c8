//! Curvature functionals of foliated hypersurfaces: quadrature values, first and second
//! variations, Euler–Lagrange residuals and conformal-invariance checks.
//!
//! Every integrand is a spectral function F of the leaf block a of h in an orthonormal leaf
//! frame. B = ∂F/∂a commutes with a, and along r + t·u·N the leaf block moves by
//! D = Hess_u|_{TF} + u(a² − m mᵀ), m the mixed block; hence δ(F dV) = (⟨B, D⟩ − n u H F) dV.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_dual::Dual64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::Profile;
use crate::error::{domain, Error, Result};
use crate::geom_patch::{
    double_divergence, fd_scalar_jet, fstar_squared_fd, FoliatedPatch, JetSource, PointGeometry, VariationBase,
};
use crate::grid::Axis;
use crate::jet::{compose_jet, AmbientMap, Real, ScalarFn, ScalarJet};
use crate::revolution::{sphere_area, RevolutionInvariants, RevolutionProfile};
use crate::symfunc::{binomial, newton_transform, safe_pow, SymmetricSpectrum};

/// Threshold on ‖(div P)∘P‖ for the leafwise Euler–Lagrange forms.
pub const DIVP_TOL: f64 = 1e-8;
/// Relative Euler–Lagrange residual accepted as critical.
pub const CRITICAL_TOL: f64 = 1e-6;

pub type Callable = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// User integrand with its partial derivatives (and F″ for functions of H_F alone).
#[derive(Clone)]
pub struct UserFunction {
    pub arity: usize,
    pub f: Callable,
    pub partials: Vec<Callable>,
    pub second: Option<Callable>,
}

impl fmt::Debug for UserFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserFunction").field("arity", &self.arity).field("second", &self.second.is_some()).finish()
    }
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let h = 1e-4 * x[i].abs().max(1.0);
    let at = |d: f64| {
        let mut y = x.to_vec();
        y[i] += d;
        f(&y)
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

impl UserFunction {
    /// Validates the supplied partials against central differences at random points of [0.3, 1.7]^arity.
    pub fn new(arity: usize, f: Callable, partials: Vec<Callable>, second: Option<Callable>) -> Result<Self> {
        if arity == 0 {
            return domain("integrand needs at least one argument");
        }
        if partials.len() != arity {
            return Err(Error::Validation(format!("expected {arity} partial derivatives, got {}", partials.len())));
        }
        if second.is_some() && arity != 1 {
            return Err(Error::Validation("F'' is only used for functions of H_F".into()));
        }
        let uf = Self { arity, f, partials, second };
        uf.spot_check()?;
        Ok(uf)
    }

    fn spot_check(&self) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..5 {
            let x: Vec<f64> = (0..self.arity).map(|_| rng.gen_range(0.3..1.7)).collect();
            let mut pairs: Vec<(String, f64, f64)> = Vec::new();
            for (i, d) in self.partials.iter().enumerate() {
                pairs.push((format!("partial {}", i + 1), d(&x), central_difference(&*self.f, &x, i)));
            }
            if let Some(d2) = &self.second {
                pairs.push(("second derivative".into(), d2(&x), central_difference(&*self.partials[0], &x, 0)));
            }
            for (name, given, fd) in pairs {
                if !((given - fd).abs() <= 1e-6 * given.abs().max(1.0)) {
                    return Err(Error::Validation(format!(
                        "{name} disagrees with finite differences at {x:?}: supplied {given}, numeric {fd}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum FunctionalKind {
    /// ∫ H_F^p dV.
    Wnps { p: f64 },
    /// ∫ ‖h_F‖^p dV.
    Jnps { p: f64 },
    /// ∫ F(σ_1, …, σ_s) dV.
    Wf(UserFunction),
    /// ∫ F(τ_1, …, τ_s) dV.
    Jf(UserFunction),
    /// ∫ F(H_F) dV.
    WfOfHf(UserFunction),
    /// ∫ (Q_r)^{n/r} dV.
    WConf { r: usize },
    /// ∫ F(H_F, K_F) dV, s = 2.
    WfHk(UserFunction),
}

#[derive(Debug, Clone)]
pub struct FunctionalSpec {
    pub kind: FunctionalKind,
}

impl FunctionalSpec {
    pub fn w_nps(p: f64) -> Result<Self> {
        if !p.is_finite() {
            return domain("exponent p must be finite");
        }
        Ok(Self { kind: FunctionalKind::Wnps { p } })
    }

    pub fn j_nps(p: f64) -> Result<Self> {
        if !p.is_finite() {
            return domain("exponent p must be finite");
        }
        Ok(Self { kind: FunctionalKind::Jnps { p } })
    }

    pub fn conformal(r: usize) -> Result<Self> {
        if r < 1 {
            return domain("conformal order r must be at least 1");
        }
        Ok(Self { kind: FunctionalKind::WConf { r } })
    }

    pub fn wf(arity: usize, f: Callable, partials: Vec<Callable>) -> Result<Self> {
        Ok(Self { kind: FunctionalKind::Wf(UserFunction::new(arity, f, partials, None)?) })
    }

    pub fn jf(arity: usize, f: Callable, partials: Vec<Callable>) -> Result<Self> {
        Ok(Self { kind: FunctionalKind::Jf(UserFunction::new(arity, f, partials, None)?) })
    }

    pub fn wf_of_hf(f: Callable, d1: Callable, d2: Option<Callable>) -> Result<Self> {
        Ok(Self { kind: FunctionalKind::WfOfHf(UserFunction::new(1, f, vec![d1], d2)?) })
    }

    pub fn wf_hk(f: Callable, f_h: Callable, f_k: Callable) -> Result<Self> {
        Ok(Self { kind: FunctionalKind::WfHk(UserFunction::new(2, f, vec![f_h, f_k], None)?) })
    }

    pub fn label(&self) -> String {
        match &self.kind {
            FunctionalKind::Wnps { p } => format!("W_nps(p={p})"),
            FunctionalKind::Jnps { p } => format!("J_nps(p={p})"),
            FunctionalKind::Wf(_) => "WF".into(),
            FunctionalKind::Jf(_) => "JF".into(),
            FunctionalKind::WfOfHf(_) => "WF_of_HF".into(),
            FunctionalKind::WConf { r } => format!("W_conf(r={r})"),
            FunctionalKind::WfHk(_) => "WF_HK".into(),
        }
    }

    /// Kind/leaf-dimension compatibility.
    pub fn check_leaf_dim(&self, s: usize) -> Result<()> {
        match &self.kind {
            FunctionalKind::Wf(uf) | FunctionalKind::Jf(uf) if uf.arity != s => {
                Err(Error::Spec(format!("{} takes {} arguments but the leaves have dimension {s}", self.label(), uf.arity)))
            }
            FunctionalKind::WfHk(_) if s != 2 => Err(Error::Spec(format!("WF_HK needs s = 2, got s = {s}"))),
            FunctionalKind::WConf { r } if *r > s => Err(Error::Spec(format!("W_conf needs r <= s, got r = {r}, s = {s}"))),
            _ => Ok(()),
        }
    }

    /// F and B = ∂F/∂a at a leaf state.
    pub fn local(&self, st: &LeafState) -> Result<LocalDensity> {
        self.eval_local(st, true)
    }

    pub fn value(&self, st: &LeafState) -> Result<f64> {
        Ok(self.eval_local(st, false)?.value)
    }

    fn eval_local(&self, st: &LeafState, grad: bool) -> Result<LocalDensity> {
        let s = st.s;
        let sf = s as f64;
        let eye = || DMatrix::<f64>::identity(s, s);
        let zero = || DMatrix::<f64>::zeros(s, s);
        self.check_leaf_dim(s)?;
        let spec = SymmetricSpectrum::from_matrix(&st.a)?;
        let (value, b) = match &self.kind {
            FunctionalKind::Wnps { p } => {
                let hf = st.h_f();
                let v = safe_pow(hf, *p)?;
                let b = if grad { eye() * (p / sf * safe_pow(hf, p - 1.0)?) } else { zero() };
                (v, b)
            }
            FunctionalKind::Jnps { p } => {
                let t2 = (&st.a * &st.a).trace();
                let v = safe_pow(t2, 0.5 * p)?;
                let b = if grad { &st.a * (p * safe_pow(t2, 0.5 * p - 1.0)?) } else { zero() };
                (v, b)
            }
            FunctionalKind::Wf(uf) => {
                let sig = spec.elementary_symmetric();
                let args = &sig[1..];
                let mut b = zero();
                if grad {
                    for (r, d) in uf.partials.iter().enumerate() {
                        b += newton_transform(&st.a, r)?.matrix * d(args);
                    }
                }
                ((uf.f)(args), b)
            }
            FunctionalKind::Jf(uf) => {
                let tau = spec.power_sums(s)?;
                let mut b = zero();
                if grad {
                    let mut pow = eye();
                    for (i, d) in uf.partials.iter().enumerate() {
                        b += &pow * ((i + 1) as f64 * d(&tau));
                        pow = &pow * &st.a;
                    }
                }
                ((uf.f)(&tau), b)
            }
            FunctionalKind::WfOfHf(uf) => {
                let x = [st.h_f()];
                let b = if grad { eye() * ((uf.partials[0])(&x) / sf) } else { zero() };
                ((uf.f)(&x), b)
            }
            FunctionalKind::WfHk(uf) => {
                let sig = spec.elementary_symmetric();
                let x = [0.5 * sig[1], sig[2]];
                let b = if grad {
                    eye() * (0.5 * (uf.partials[0])(&x)) + (eye() * sig[1] - &st.a) * (uf.partials[1])(&x)
                } else {
                    zero()
                };
                ((uf.f)(&x), b)
            }
            FunctionalKind::WConf { r } => {
                let e = st.n as f64 / *r as f64;
                let sig = spec.elementary_symmetric();
                let q = q_of_sigma(&sig[1..], s, *r);
                let v = safe_pow(q, e)?;
                let mut b = zero();
                if grad {
                    let outer = e * safe_pow(q, e - 1.0)?;
                    for j in 1..=*r {
                        let seeded: Vec<Dual64> = (1..=s)
                            .map(|k| {
                                let mut d = Dual64::from_re(sig[k]);
                                if k == j {
                                    d.eps = 1.0;
                                }
                                d
                            })
                            .collect();
                        let dq = q_of_sigma(&seeded, s, *r).eps;
                        b += newton_transform(&st.a, j - 1)?.matrix * (outer * dq);
                    }
                }
                (v, b)
            }
        };
        Ok(LocalDensity { value, grad: b })
    }
}

/// Q_r = Σ_j (−1)^{j+1} C(r,j) S_1^{r−j} S_j with S_j = σ_j / C(s,j); `sig` holds σ_1..σ_s.
fn q_of_sigma<D: Real>(sig: &[D], s: usize, r: usize) -> D {
    let sn = |j: usize| if j == 0 { D::from(1.0) } else { sig[j - 1] / binomial(s, j) };
    let s1 = sn(1);
    let mut q = D::from(0.0);
    for j in 0..=r {
        let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
        q += s1.powi((r - j) as i32) * sn(j) * (sign * binomial(r, j));
    }
    q
}

/// Leaf-frame blocks of h at a point: a (s×s), m (s×t), c (t×t), and H.
#[derive(Debug, Clone)]
pub struct LeafState {
    pub n: usize,
    pub s: usize,
    pub a: DMatrix<f64>,
    pub mix: DMatrix<f64>,
    pub perp: DMatrix<f64>,
    pub mean_curvature: f64,
}

impl LeafState {
    pub fn from_geometry(geo: &PointGeometry) -> Self {
        Self {
            n: geo.n,
            s: geo.s,
            a: (&geo.h_f + geo.h_f.transpose()) * 0.5,
            mix: geo.h_mix.clone(),
            perp: geo.h_fperp.clone(),
            mean_curvature: geo.mean_curvature,
        }
    }

    /// Parallels of a hypersurface of revolution: a = k_1·I, no mixed block, c = k_n.
    pub fn from_revolution(inv: &RevolutionInvariants) -> Self {
        let s = inv.n - 1;
        Self {
            n: inv.n,
            s,
            a: DMatrix::identity(s, s) * inv.k1,
            mix: DMatrix::zeros(s, 1),
            perp: DMatrix::from_element(1, 1, inv.kn),
            mean_curvature: inv.mean_curvature,
        }
    }

    pub fn h_f(&self) -> f64 {
        self.a.trace() / self.s as f64
    }

    /// a² − m mᵀ, the zeroth-order part of the leaf-block variation.
    pub fn zeroth_order(&self) -> DMatrix<f64> {
        &self.a * &self.a - &self.mix * self.mix.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct LocalDensity {
    pub value: f64,
    /// ∂F/∂a in the orthonormal leaf frame.
    pub grad: DMatrix<f64>,
}

fn fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// Tensor-product quadrature of F·dV over the patch.
pub fn evaluate(spec: &FunctionalSpec, patch: &FoliatedPatch) -> Result<f64> {
    spec.check_leaf_dim(patch.s)?;
    let mut acc = 0.0;
    for k in 0..patch.grid.len() {
        let geo = patch.point_geometry(k)?;
        acc += patch.grid.weight(k) * spec.value(&LeafState::from_geometry(&geo))? * geo.sqrt_det_g;
    }
    Ok(acc)
}

fn revolution_state(n: usize, rho: f64, d: &[f64; 4]) -> Result<(LeafState, f64)> {
    let inv = RevolutionInvariants::new(n, rho, d[1], d[2])?;
    Ok((LeafState::from_revolution(&inv), inv.area_density * sphere_area(n - 1)))
}

/// Gauss–Legendre quadrature in ρ of a functional on a hypersurface of revolution.
pub fn evaluate_revolution(
    spec: &FunctionalSpec,
    n: usize,
    profile: &dyn Profile,
    window: (f64, f64),
    nodes: usize,
) -> Result<f64> {
    if n < 2 {
        return domain("hypersurface of revolution needs n >= 2");
    }
    spec.check_leaf_dim(n - 1)?;
    let axis = Axis::gauss_legendre(window.0, window.1, nodes)?;
    let mut acc = 0.0;
    for (&r, &w) in axis.nodes.iter().zip(&axis.weights) {
        let (st, dv) = revolution_state(n, r, &profile.derivs(r))?;
        acc += w * spec.value(&st)? * dv;
    }
    Ok(acc)
}

/// Trapezoid rule over the samples of a solved profile.
pub fn evaluate_profile(spec: &FunctionalSpec, profile: &RevolutionProfile) -> Result<f64> {
    let n = profile.n;
    if profile.len() < 2 {
        return domain("profile needs at least two samples");
    }
    spec.check_leaf_dim(n - 1)?;
    let mut vals = Vec::with_capacity(profile.len());
    for i in 0..profile.len() {
        let d = [profile.f[i], profile.fprime[i], profile.fsecond[i], 0.0];
        let (st, dv) = revolution_state(n, profile.rho[i], &d)?;
        vals.push(spec.value(&st)? * dv);
    }
    Ok(profile.rho.windows(2).zip(vals.windows(2)).map(|(r, v)| 0.5 * (r[1] - r[0]) * (v[0] + v[1])).sum())
}

/// Pointwise first-variation density δ(F dV)/dV.
pub fn first_variation_density(spec: &FunctionalSpec, geo: &PointGeometry, u: &ScalarJet) -> Result<f64> {
    let st = LeafState::from_geometry(geo);
    let ld = spec.local(&st)?;
    let hs = geo.hessians(u);
    let d = &hs.leaf_restricted_frame + st.zeroth_order() * u.v;
    Ok(fro(&ld.grad, &d) - geo.n as f64 * u.v * geo.mean_curvature * ld.value)
}

/// δ of the functional along r + t·u·N, by quadrature of the pointwise variation.
pub fn first_variation_analytic(spec: &FunctionalSpec, patch: &FoliatedPatch, u: &dyn ScalarFn) -> Result<f64> {
    spec.check_leaf_dim(patch.s)?;
    let mut acc = 0.0;
    for k in 0..patch.grid.len() {
        let geo = patch.point_geometry(k)?;
        let uj = u.jet(&patch.grid.point(k), 2);
        acc += patch.grid.weight(k) * first_variation_density(spec, &geo, &uj)? * geo.sqrt_det_g;
    }
    Ok(acc)
}

/// Quadrature of the functional on the varied immersion r + t·u·N.
pub fn functional_along(spec: &FunctionalSpec, patch: &FoliatedPatch, base: &VariationBase, t: f64) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..base.len() {
        let geo = base.geometry(k, t)?;
        acc += patch.grid.weight(k) * spec.value(&LeafState::from_geometry(&geo))? * geo.sqrt_det_g;
    }
    Ok(acc)
}

fn check_ladder(t_steps: &[f64]) -> Result<()> {
    if t_steps.len() < 2 {
        return domain("t ladder needs at least two values");
    }
    if t_steps.iter().any(|t| !(*t > 0.0)) || t_steps.windows(2).any(|w| w[1] >= w[0]) {
        return domain("t ladder must be positive and strictly decreasing");
    }
    Ok(())
}

/// Richardson extrapolation of two O(t²) estimates taken at t1 > t2.
pub fn richardson(t1: f64, d1: f64, t2: f64, d2: f64) -> f64 {
    let r = (t1 / t2).powi(2);
    (r * d2 - d1) / (r - 1.0)
}

/// Central differences of the functional over a t ladder.
pub fn first_variation_differences(
    spec: &FunctionalSpec,
    patch: &FoliatedPatch,
    u: &dyn ScalarFn,
    t_steps: &[f64],
) -> Result<Vec<f64>> {
    check_ladder(t_steps)?;
    spec.check_leaf_dim(patch.s)?;
    let base = VariationBase::new(patch, u)?;
    t_steps
        .iter()
        .map(|&t| Ok((functional_along(spec, patch, &base, t)? - functional_along(spec, patch, &base, -t)?) / (2.0 * t)))
        .collect()
}

/// Central difference of the functional, Richardson-extrapolated over the last two t values.
pub fn first_variation_numeric(spec: &FunctionalSpec, patch: &FoliatedPatch, u: &dyn ScalarFn, t_steps: &[f64]) -> Result<f64> {
    let d = first_variation_differences(spec, patch, u, t_steps)?;
    let m = t_steps.len();
    Ok(richardson(t_steps[m - 2], d[m - 2], t_steps[m - 1], d[m - 1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationCheck {
    pub analytic: f64,
    pub t_steps: Vec<f64>,
    pub numeric: Vec<f64>,
    pub errors: Vec<f64>,
    /// Observed orders between consecutive t values.
    pub orders: Vec<f64>,
    pub richardson: f64,
    pub pass: bool,
}

/// Observed convergence orders; pairs already at the floor count as converged.
pub fn convergence_orders(t_steps: &[f64], errors: &[f64], floor: f64) -> (Vec<f64>, bool) {
    let mut orders = Vec::new();
    let mut pass = true;
    for i in 1..errors.len() {
        let (e1, e2) = (errors[i - 1], errors[i]);
        let ord = (e1 / e2).ln() / (t_steps[i - 1] / t_steps[i]).ln();
        orders.push(ord);
        if !(e2 <= floor || (e1 > floor && ord >= 1.9)) {
            pass = false;
        }
    }
    (orders, pass)
}

/// Analytic first variation against central differences over a t ladder.
pub fn check_first_variation(spec: &FunctionalSpec, patch: &FoliatedPatch, u: &dyn ScalarFn, t_steps: &[f64]) -> Result<VariationCheck> {
    let analytic = first_variation_analytic(spec, patch, u)?;
    let numeric = first_variation_differences(spec, patch, u, t_steps)?;
    let errors: Vec<f64> = numeric.iter().map(|d| (d - analytic).abs()).collect();
    let floor = 1e-10 * analytic.abs().max(1.0);
    let (orders, pass) = convergence_orders(t_steps, &errors, floor);
    let m = t_steps.len();
    Ok(VariationCheck {
        analytic,
        richardson: richardson(t_steps[m - 2], numeric[m - 2], t_steps[m - 1], numeric[m - 1]),
        t_steps: t_steps.to_vec(),
        numeric,
        errors,
        orders,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElForm {
    /// (∇^{F*})²B♭ + ⟨B, a² − m mᵀ⟩ − nFH, the leafwise form valid under (div P)∘P = 0.
    Leafwise,
    /// Full double divergence on M of B extended by zero off the leaves; no precondition.
    Exact,
}

struct ElData {
    geos: Vec<PointGeometry>,
    locals: Vec<LocalDensity>,
}

fn el_data(spec: &FunctionalSpec, patch: &FoliatedPatch) -> Result<ElData> {
    spec.check_leaf_dim(patch.s)?;
    let mut geos = Vec::with_capacity(patch.grid.len());
    let mut locals = Vec::with_capacity(patch.grid.len());
    for k in 0..patch.grid.len() {
        let geo = patch.point_geometry(k)?;
        locals.push(spec.local(&LeafState::from_geometry(&geo))?);
        geos.push(geo);
    }
    Ok(ElData { geos, locals })
}

/// Coordinate components L B Lᵀ of a leaf-frame tensor, G = L Lᵀ the leaf metric.
fn leaf_coords(geo: &PointGeometry, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = geo
        .leaf_g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularImmersion("leaf metric not positive definite".into()))?
        .l();
    Ok(&l * b * l.transpose())
}

fn zeroth_order_el(geo: &PointGeometry, ld: &LocalDensity) -> f64 {
    let st = LeafState::from_geometry(geo);
    fro(&ld.grad, &st.zeroth_order()) - geo.n as f64 * ld.value * geo.mean_curvature
}

/// Pointwise Euler–Lagrange residuals at the requested nodes.
pub fn el_residuals(spec: &FunctionalSpec, patch: &FoliatedPatch, form: ElForm, nodes: &[usize]) -> Result<Vec<f64>> {
    let data = el_data(spec, patch)?;
    let (n, s) = (patch.n, patch.s);
    let len = patch.grid.len();
    match form {
        ElForm::Leafwise => {
            let ss = s * s;
            let mut bflat = Vec::with_capacity(len * ss);
            for (geo, ld) in data.geos.iter().zip(&data.locals) {
                let bc = leaf_coords(geo, &ld.grad)?;
                for i in 0..s {
                    for j in 0..s {
                        bflat.push(bc[(i, j)]);
                    }
                }
            }
            nodes
                .iter()
                .map(|&k| {
                    let dp = patch.point_geometry3(k)?.div_projector().norm();
                    if dp > DIVP_TOL {
                        return Err(Error::Precondition(format!(
                            "(div P)∘P = {dp:e} at node {k}; the leafwise Euler-Lagrange form does not apply"
                        )));
                    }
                    Ok(fstar_squared_fd(patch, &bflat, k)? + zeroth_order_el(&data.geos[k], &data.locals[k]))
                })
                .collect()
        }
        ElForm::Exact => {
            let nn = n * n;
            let mut bt = vec![0.0; len * nn];
            for (k, (geo, ld)) in data.geos.iter().zip(&data.locals).enumerate() {
                let bc = leaf_coords(geo, &ld.grad)?;
                let ptop = geo.p.rows(0, s).into_owned();
                let full = ptop.transpose() * bc * ptop;
                for i in 0..n {
                    for j in 0..n {
                        bt[k * nn + i * n + j] = full[(i, j)];
                    }
                }
            }
            let axes: Vec<usize> = (0..n).collect();
            nodes
                .iter()
                .map(|&k| {
                    let mut comps = Vec::with_capacity(nn);
                    for c in 0..nn {
                        let vals: Vec<f64> = (0..len).map(|q| bt[q * nn + c]).collect();
                        comps.push(fd_scalar_jet(&patch.grid, &vals, k, 2, &axes)?);
                    }
                    Ok(double_divergence(&patch.jet(k, 3)?, &comps, n)? + zeroth_order_el(&data.geos[k], &data.locals[k]))
                })
                .collect()
        }
    }
}

/// Scalar mean-curvature form Δ_F(H_F^{p−1}) + H_F^{p−1}(‖h_F‖² − ‖h_mix‖² − (ns/p) H H_F).
pub fn mean_leaf_el_residuals(patch: &FoliatedPatch, p: f64, nodes: &[usize]) -> Result<Vec<f64>> {
    let len = patch.grid.len();
    let mut geos = Vec::with_capacity(len);
    let mut field = Vec::with_capacity(len);
    for k in 0..len {
        let geo = patch.point_geometry(k)?;
        field.push(safe_pow(geo.h_f_mean, p - 1.0)?);
        geos.push(geo);
    }
    let (n, s) = (patch.n as f64, patch.s as f64);
    nodes
        .iter()
        .map(|&k| {
            let g = &geos[k];
            let x = g.norm_hf_sq - g.norm_hmix_sq - n * s / p * g.mean_curvature * g.h_f_mean;
            Ok(patch.leaf_laplacian_field(&field, k)? + field[k] * x)
        })
        .collect()
}

/// Euler–Lagrange residual on a hypersurface of revolution; curvatures are constant on parallels,
/// so the divergence term drops and the residual is algebraic.
pub fn el_residual_revolution(spec: &FunctionalSpec, inv: &RevolutionInvariants) -> Result<f64> {
    let st = LeafState::from_revolution(inv);
    let ld = spec.local(&st)?;
    Ok(fro(&ld.grad, &st.zeroth_order()) - st.n as f64 * ld.value * st.mean_curvature)
}

fn all_periodic(patch: &FoliatedPatch) -> Result<()> {
    if patch.grid.axes.iter().all(|a| a.is_periodic()) {
        Ok(())
    } else {
        domain("weak forms need a patch periodic along every axis")
    }
}

/// ∫ u·EL dV over a fully periodic patch.
pub fn weak_first_variation(spec: &FunctionalSpec, patch: &FoliatedPatch, u: &dyn ScalarFn, form: ElForm) -> Result<f64> {
    all_periodic(patch)?;
    let nodes: Vec<usize> = (0..patch.grid.len()).collect();
    let res = el_residuals(spec, patch, form, &nodes)?;
    let mut acc = 0.0;
    for (k, r) in res.iter().enumerate() {
        let geo = patch.point_geometry(k)?;
        acc += patch.grid.weight(k) * u.value(&patch.grid.point(k)) * r * geo.sqrt_det_g;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondVariationForm {
    /// Before using criticality, general F(H_F).
    General,
    /// At a critical hypersurface, general F(H_F).
    Critical,
    /// At a critical hypersurface, F = H_F^p written out.
    PowerCritical,
    /// s = 2 form in terms of H_F and K_F.
    LeafSurface,
    /// s = n, F = F(H).
    FullMean,
    /// n = s = 2, F = H^p in terms of H and K.
    SurfacePower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criticality {
    /// Euler–Lagrange residual vanishes.
    Strict,
    /// Residual is constant (a volume Lagrange multiplier) and ∫u dV = 0.
    VolumeConstrained,
    /// No check; the formula is evaluated as given.
    Unchecked,
}

/// F, F′, F″ of the mean-leaf integrand at H_F.
fn mean_leaf_derivatives(spec: &FunctionalSpec, hf: f64) -> Result<[f64; 3]> {
    match &spec.kind {
        FunctionalKind::Wnps { p } => {
            Ok([safe_pow(hf, *p)?, p * safe_pow(hf, p - 1.0)?, p * (p - 1.0) * safe_pow(hf, p - 2.0)?])
        }
        FunctionalKind::WfOfHf(uf) => {
            let x = [hf];
            let f2 = uf
                .second
                .as_ref()
                .ok_or_else(|| Error::Spec("second variation of WF_of_HF needs F''".into()))?;
            Ok([(uf.f)(&x), (uf.partials[0])(&x), f2(&x)])
        }
        _ => Err(Error::Spec(format!("second variation is defined for F(H_F) integrands, not {}", spec.label()))),
    }
}

fn power_exponent(spec: &FunctionalSpec) -> Result<f64> {
    match spec.kind {
        FunctionalKind::Wnps { p } => Ok(p),
        _ => Err(Error::Spec(format!("this second-variation form needs W_nps, not {}", spec.label()))),
    }
}

/// Pointwise ingredients of the second-variation integrands.
struct Pieces {
    u: f64,
    lap_leaf: f64,
    lap: f64,
    hf_hess: f64,
    grad_hf_u: f64,
    h_grad: f64,
    grad_sq: f64,
    x: f64,
    norm_hmix_sq: f64,
    norm_h_sq: f64,
    tr_a3: f64,
    tr_amm: f64,
    tr_cmm: f64,
    mix_hess: f64,
    hf: f64,
    h: f64,
    k_f: f64,
}

fn pieces(geo: &PointGeometry, u: &ScalarJet) -> Result<Pieces> {
    let s = geo.s;
    let hs = geo.hessians(u);
    let (a, m, c) = (&geo.h_f, &geo.h_mix, &geo.h_fperp);
    let mm = m * m.transpose();
    let third = geo.third()?;
    let mut hjet = ScalarJet::zeros(geo.n, 1);
    for k in 0..s {
        hjet.d1[k] = third.d_s_hf[k] / s as f64;
    }
    Ok(Pieces {
        u: u.v,
        lap_leaf: geo.leaf_laplacian(u),
        lap: geo.laplacian(u),
        hf_hess: fro(a, &hs.leaf_frame),
        grad_hf_u: geo.leaf_grad_dot(&hjet, u),
        h_grad: geo.h_leaf_grads(u, u),
        grad_sq: geo.leaf_grad_dot(u, u),
        x: geo.norm_hf_sq - geo.norm_hmix_sq,
        norm_hmix_sq: geo.norm_hmix_sq,
        norm_h_sq: geo.norm_h_sq,
        tr_a3: (a * a * a).trace(),
        tr_amm: (a * &mm).trace(),
        tr_cmm: (c * m.transpose() * m).trace(),
        mix_hess: fro(m, &hs.mix_frame),
        hf: geo.h_f_mean,
        h: geo.mean_curvature,
        k_f: geo.k_f(),
    })
}

/// Integrand of the selected second-variation form; `lap_field` is Δ_F of F′(H_F)
/// (of H_F^{p−1} for the power form).
fn second_variation_density(
    form: SecondVariationForm,
    f: [f64; 3],
    p: f64,
    lap_field: f64,
    n: usize,
    s: usize,
    q: &Pieces,
) -> Result<f64> {
    let (nf, sf) = (n as f64, s as f64);
    let [f0, f1, f2] = f;
    let u = q.u;
    let lu = q.lap_leaf;
    let tail = |f1: f64| {
        (f1 / sf) * (2.0 * (u * (q.tr_a3 + q.tr_amm) + q.hf_hess) - u * (q.tr_amm + q.tr_cmm) - 2.0 * q.mix_hess)
    };
    let grad_part = 2.0 * u * q.hf_hess + sf * u * q.grad_hf_u + 2.0 * q.h_grad - sf * q.hf * q.grad_sq;
    let v = match form {
        SecondVariationForm::General | SecondVariationForm::Critical => {
            let t1 = match form {
                SecondVariationForm::General => -(nf / sf) * (f1 * lu + (f1 * q.x - sf * nf * f0 * q.h) * u) * u * q.h,
                _ => -(nf / sf) * (f1 * lu - u * lap_field) * u * q.h,
            };
            let t2 = (f1 / sf) * grad_part + f2 / (sf * sf) * lu * (lu + u * q.x);
            let t3 = u
                * ((f2 / (sf * sf) * q.x - nf / sf * q.h * f1) * (lu + u * q.x) - f0 * (q.lap + u * q.norm_h_sq)
                    + tail(f1));
            t1 + t2 + t3
        }
        SecondVariationForm::PowerCritical => {
            let hf = q.hf;
            let q1 = safe_pow(hf, p - 1.0)?;
            let q2 = safe_pow(hf, p - 2.0)?;
            let t1 = -(nf * p / sf) * (q1 * lu - u * lap_field) * u * q.h;
            let t2 = (p / sf) * q2 * (hf * grad_part + (p - 1.0) / sf * lu * (lu + u * q.x));
            let t3 = q2
                * u
                * ((p / sf) * ((p - 1.0) / sf * q.x - nf * q.h * hf) * (lu + u * q.x)
                    - hf * hf * (q.lap + u * q.norm_h_sq)
                    + (p / sf)
                        * hf
                        * (2.0 * (u * (q.tr_a3 + q.tr_amm) + q.hf_hess) - u * (q.tr_amm + q.tr_cmm) - 2.0 * q.mix_hess));
            t1 + t2 + t3
        }
        SecondVariationForm::LeafSurface => {
            if s != 2 {
                return Err(Error::Spec(format!("the H_F, K_F form needs s = 2, got s = {s}")));
            }
            let (hf, kf) = (q.hf, q.k_f);
            let x2 = 4.0 * hf * hf - 2.0 * kf - q.norm_hmix_sq;
            let t1 = -(nf / 2.0) * (f1 * lu - u * lap_field) * u * q.h;
            let t2 = (f1 / 2.0) * (2.0 * u * q.hf_hess + 2.0 * u * q.grad_hf_u + 2.0 * q.h_grad - 2.0 * hf * q.grad_sq)
                + f2 / 4.0 * lu * (lu + u * x2);
            let t3 = u
                * ((f2 / 4.0 * x2 - nf / 2.0 * f1 * q.h) * (lu + u * x2)
                    + (f1 / 2.0)
                        * (4.0 * u * hf * (4.0 * hf * hf - 3.0 * kf) + 2.0 * u * q.tr_amm + 2.0 * q.hf_hess
                            - u * (q.tr_amm + q.tr_cmm)
                            - 2.0 * q.mix_hess)
                    - f0 * (q.lap + u * q.norm_h_sq));
            t1 + t2 + t3
        }
        SecondVariationForm::FullMean => {
            if s != n {
                return Err(Error::Spec(format!("the full mean-curvature form needs s = n, got s = {s}, n = {n}")));
            }
            let lap = q.lap;
            let t1 = -(f1 * lap + (f1 * q.norm_h_sq - nf * nf * f0 * q.h) * u) * u * q.h;
            let t2 = (f1 / nf) * (2.0 * u * q.hf_hess + nf * u * q.grad_hf_u + 2.0 * q.h_grad - nf * q.h * q.grad_sq)
                + f2 / (nf * nf) * lap * (lap + u * q.norm_h_sq);
            let t3 = u
                * ((f2 / (nf * nf) * q.norm_h_sq - q.h * f1 - f0) * (lap + u * q.norm_h_sq)
                    + 2.0 * f1 / nf * (u * q.tr_a3 + q.hf_hess));
            t1 + t2 + t3
        }
        SecondVariationForm::SurfacePower => {
            if n != 2 || s != 2 {
                return Err(Error::Spec("the W_{2,p} surface form needs n = s = 2".into()));
            }
            let (h, k) = (q.h, q.k_f);
            let lap = q.lap;
            safe_pow(h, p - 2.0)?
                * (p * (p - 1.0) / 4.0 * lap * lap
                    + p * h * (q.h_grad + 2.0 * u * q.hf_hess + u * q.grad_hf_u - h * q.grad_sq)
                    + ((2.0 * p * p - 4.0 * p - 1.0) * h * h - p * (p - 1.0) * k) * u * lap
                    + (4.0 * p * (p - 1.0) * h.powi(4) - 2.0 * (p - 1.0) * (2.0 * p + 1.0) * k * h * h
                        + p * (p - 1.0) * k * k)
                        * u
                        * u)
        }
    };
    Ok(v)
}

fn criticality_check(spec: &FunctionalSpec, patch: &FoliatedPatch, u: &dyn ScalarFn, crit: Criticality) -> Result<()> {
    if crit == Criticality::Unchecked {
        return Ok(());
    }
    let nodes = patch.interior_nodes(&patch.leaf_axes(), 1);
    let res = el_residuals(spec, patch, ElForm::Leafwise, &nodes)?;
    let mut scale = 0.0f64;
    for &k in &nodes {
        let geo = patch.point_geometry(k)?;
        let v = spec.value(&LeafState::from_geometry(&geo))?;
        scale = scale.max((patch.n as f64 * v * geo.mean_curvature).abs());
    }
    let scale = scale.max(f64::MIN_POSITIVE);
    let centre = match crit {
        Criticality::VolumeConstrained => {
            let mean = res.iter().sum::<f64>() / res.len().max(1) as f64;
            let (mut iu, mut iabs) = (0.0, 0.0);
            for k in 0..patch.grid.len() {
                let geo = patch.point_geometry(k)?;
                let v = u.value(&patch.grid.point(k));
                iu += patch.grid.weight(k) * v * geo.sqrt_det_g;
                iabs += patch.grid.weight(k) * v.abs() * geo.sqrt_det_g;
            }
            if iu.abs() > 1e-8 * iabs.max(f64::MIN_POSITIVE) {
                return Err(Error::Precondition(format!("variation is not volume preserving: ∫u dV = {iu:e}")));
            }
            mean
        }
        _ => 0.0,
    };
    let worst = res.iter().map(|r| (r - centre).abs()).fold(0.0, f64::max) / scale;
    if worst > CRITICAL_TOL {
        return Err(Error::Precondition(format!(
            "surface is not critical for {}: relative Euler-Lagrange residual {worst:e}",
            spec.label()
        )));
    }
    Ok(())
}

/// Quadrature of the selected second-variation form.
pub fn second_variation_analytic(
    spec: &FunctionalSpec,
    patch: &FoliatedPatch,
    u: &dyn ScalarFn,
    form: SecondVariationForm,
    crit: Criticality,
) -> Result<f64> {
    let power = matches!(form, SecondVariationForm::PowerCritical | SecondVariationForm::SurfacePower);
    let p = if power { power_exponent(spec)? } else { 0.0 };
    criticality_check(spec, patch, u, crit)?;
    let len = patch.grid.len();
    let mut geos = Vec::with_capacity(len);
    for k in 0..len {
        geos.push(patch.point_geometry3(k)?);
    }
    let needs_field = matches!(
        form,
        SecondVariationForm::Critical | SecondVariationForm::PowerCritical | SecondVariationForm::LeafSurface
    );
    let field: Vec<f64> = if !needs_field {
        Vec::new()
    } else if form == SecondVariationForm::PowerCritical {
        geos.iter().map(|g| safe_pow(g.h_f_mean, p - 1.0)).collect::<Result<_>>()?
    } else {
        geos.iter().map(|g| Ok(mean_leaf_derivatives(spec, g.h_f_mean)?[1])).collect::<Result<_>>()?
    };
    let mut acc = 0.0;
    for (k, geo) in geos.iter().enumerate() {
        let x = patch.grid.point(k);
        let q = pieces(geo, &u.jet(&x, 2))?;
        let f = if power { [0.0; 3] } else { mean_leaf_derivatives(spec, geo.h_f_mean)? };
        let lap_field = if needs_field { patch.leaf_laplacian_field(&field, k)? } else { 0.0 };
        let d = second_variation_density(form, f, p, lap_field, patch.n, patch.s, &q)?;
        acc += patch.grid.weight(k) * d * geo.sqrt_det_g;
    }
    Ok(acc)
}

/// Second difference (W(t) − 2W(0) + W(−t))/t², Richardson-extrapolated over the last two t values.
pub fn second_variation_numeric(spec: &FunctionalSpec, patch: &FoliatedPatch, u: &dyn ScalarFn, t_steps: &[f64]) -> Result<f64> {
    check_ladder(t_steps)?;
    spec.check_leaf_dim(patch.s)?;
    let base = VariationBase::new(patch, u)?;
    let w0 = functional_along(spec, patch, &base, 0.0)?;
    let d: Vec<f64> = t_steps
        .iter()
        .map(|&t| {
            Ok((functional_along(spec, patch, &base, t)? - 2.0 * w0 + functional_along(spec, patch, &base, -t)?) / (t * t))
        })
        .collect::<Result<_>>()?;
    let m = t_steps.len();
    Ok(richardson(t_steps[m - 2], d[m - 2], t_steps[m - 1], d[m - 1]))
}

/// u − ∫u dV / ∫dV over a patch.
pub struct VolumePreserving {
    pub inner: Arc<dyn ScalarFn>,
    pub shift: f64,
}

impl VolumePreserving {
    pub fn new(patch: &FoliatedPatch, inner: Arc<dyn ScalarFn>) -> Result<Self> {
        let (mut iu, mut vol) = (0.0, 0.0);
        for k in 0..patch.grid.len() {
            let geo = patch.point_geometry(k)?;
            let w = patch.grid.weight(k) * geo.sqrt_det_g;
            iu += w * inner.value(&patch.grid.point(k));
            vol += w;
        }
        Ok(Self { inner, shift: iu / vol })
    }
}

impl ScalarFn for VolumePreserving {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(x) - self.shift
    }
    fn jet(&self, x: &[f64], order: usize) -> ScalarJet {
        let mut j = self.inner.jet(x, order);
        j.v -= self.shift;
        j
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConformalMode {
    /// x ↦ c x.
    Scaling(f64),
    /// x ↦ x / |x|².
    Inversion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalReport {
    /// max |d^c − d| / max |d| over nodes, d = Q_r^{n/r} √det g; absolute when d ≡ 0.
    pub density_deviation: f64,
    /// max deviation of the image leaf curvatures from (λ − ⟨∇̄μ, N⟩/μ)/μ, relative to max(1, max|λ^c|).
    pub shape_law_deviation: f64,
    pub max_density: f64,
    pub nodes: usize,
}

/// Compares the conformal density and the leaf shape operator of the patch and its image.
pub fn conformal_density_check(patch: &FoliatedPatch, r: usize, mode: ConformalMode) -> Result<ConformalReport> {
    let (n, s) = (patch.n, patch.s);
    if r < 1 || r > s {
        return Err(Error::Spec(format!("conformal density needs 1 <= r <= s, got r = {r}, s = {s}")));
    }
    let map = match mode {
        ConformalMode::Scaling(c) if c > 0.0 && c.is_finite() => AmbientMap::Homothety(c),
        ConformalMode::Scaling(c) => return domain(format!("scaling factor must be positive, got {c}")),
        ConformalMode::Inversion => AmbientMap::Inversion,
    };
    let e = n as f64 / r as f64;
    let density = |g: &PointGeometry| -> Result<f64> {
        let q = SymmetricSpectrum::new(g.leaf_curvatures.clone())?.q_r(r)?;
        Ok(safe_pow(q, e)? * g.sqrt_det_g)
    };
    let (mut max_d, mut max_dev, mut max_lam, mut max_shape) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut max_ref = 0.0f64;
    for k in 0..patch.grid.len() {
        let x = patch.grid.point(k);
        let jet = patch.jet(k, 2)?;
        let geo = PointGeometry::from_jet(&jet, s, patch.orientation)?;
        let y: Vec<f64> = geo.position.iter().copied().collect();
        let r2: f64 = y.iter().map(|v| v * v).sum();
        if map == AmbientMap::Inversion && r2.sqrt() < 1e-8 {
            return domain(format!("patch meets the centre of inversion at node {k}"));
        }
        let nv = &geo.normal;
        let dn = match map {
            AmbientMap::Homothety(c) => nv * c,
            AmbientMap::Inversion => {
                let yv = &geo.position;
                (nv - yv * (2.0 * yv.dot(nv) / r2)) / r2
            }
        };
        let jc = compose_jet(map, &jet, &x);
        let mut gc = PointGeometry::from_jet(&jc, s, 1.0)?;
        if gc.normal.dot(&dn) < 0.0 {
            gc = PointGeometry::from_jet(&jc, s, -1.0)?;
        }
        let (d, dc) = (density(&geo)?, density(&gc)?);
        max_d = max_d.max(d.abs());
        max_dev = max_dev.max((dc - d).abs());
        let lam = geo.leaf_curvatures.iter().fold(0.0f64, |a, l| a.max(l.abs()));
        max_ref = max_ref.max(lam.powi(patch.n as i32) * geo.sqrt_det_g);
        let mu = map.conformal_factor(&y);
        let grad = map.conformal_factor_gradient(&y);
        let gn: f64 = grad.iter().zip(nv.iter()).map(|(a, b)| a * b).sum();
        let mut pred: Vec<f64> = geo.leaf_curvatures.iter().map(|l| (l - gn / mu) / mu).collect();
        pred.sort_by(f64::total_cmp);
        let mut got = gc.leaf_curvatures.clone();
        got.sort_by(f64::total_cmp);
        for (a, b) in pred.iter().zip(&got) {
            max_shape = max_shape.max((a - b).abs());
            max_lam = max_lam.max(b.abs());
        }
    }
    Ok(ConformalReport {
        // an umbilic leaf has zero density; measure against the curvature scale instead
        density_deviation: max_dev / max_d.max(1e-10 * max_ref).max(f64::MIN_POSITIVE),
        shape_law_deviation: max_shape / max_lam.max(1.0),
        max_density: max_d,
        nodes: patch.grid.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{self, ConstantField, LeafHarmonic, SphereHarmonic, TrigField};
    use crate::revolution::CriticalProfile;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    const LADDER: [f64; 3] = [1e-3, 5e-4, 2.5e-4];

    fn call(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Callable {
        Arc::new(f)
    }

    fn area_spec() -> FunctionalSpec {
        FunctionalSpec::wf_of_hf(call(|_| 1.0), call(|_| 0.0), Some(call(|_| 0.0))).unwrap()
    }

    #[test]
    fn sphere_and_torus_equality_cases() {
        let sphere = catalog::sphere(2, 1.0, 2, &[32, 32]).unwrap();
        let w = evaluate(&FunctionalSpec::w_nps(2.0).unwrap(), &sphere).unwrap();
        assert_relative_eq!(w, 4.0 * PI, max_relative = 1e-12);
        let torus = catalog::torus(2f64.sqrt(), 1.0, 2, &[48, 48]).unwrap();
        let w = evaluate(&FunctionalSpec::w_nps(2.0).unwrap(), &torus).unwrap();
        assert_relative_eq!(w, 2.0 * PI * PI, max_relative = 1e-10);
        for n in 2..=4 {
            let mut counts = vec![12; n];
            counts[0] = 8;
            let s = catalog::sphere(n, 1.0, n, &counts).unwrap();
            let w = evaluate(&FunctionalSpec::w_nps(n as f64).unwrap(), &s).unwrap();
            assert_relative_eq!(w, sphere_area(n), max_relative = 1e-10);
        }
    }

    #[test]
    fn reductions_to_power_functionals() {
        let patch = catalog::sheared_torus3(&[8, 8, 8], 1.0).unwrap();
        let p = 3.0;
        let wf = FunctionalSpec::wf(2, call(|x| (x[0] / 2.0).powi(3)), vec![call(|x| 1.5 * (x[0] / 2.0).powi(2)), call(|_| 0.0)])
            .unwrap();
        let a = evaluate(&wf, &patch).unwrap();
        let b = evaluate(&FunctionalSpec::w_nps(p).unwrap(), &patch).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
        let jf = FunctionalSpec::jf(2, call(|x| x[1].powi(2)), vec![call(|_| 0.0), call(|x| 2.0 * x[1])]).unwrap();
        let a = evaluate(&jf, &patch).unwrap();
        let b = evaluate(&FunctionalSpec::j_nps(4.0).unwrap(), &patch).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
    }

    #[test]
    fn full_leaf_dimension_reduces_to_mean_curvature_power() {
        let patch = catalog::bumpy_torus_s(&[12, 12], 0.8, 2).unwrap();
        for p in [1.0, 2.0, 3.0] {
            let mut direct = 0.0;
            for k in 0..patch.grid.len() {
                let g = patch.point_geometry(k).unwrap();
                direct += patch.grid.weight(k) * g.sqrt_det_g * g.mean_curvature.powf(p);
            }
            let w = evaluate(&FunctionalSpec::w_nps(p).unwrap(), &patch).unwrap();
            assert_relative_eq!(w, direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn second_variation_of_zero_field_is_zero() {
        let sphere = catalog::sphere(2, 1.0, 2, &[8, 12]).unwrap();
        let zero = ConstantField { dim: 2, value: 0.0 };
        let spec = FunctionalSpec::w_nps(2.0).unwrap();
        for form in [SecondVariationForm::General, SecondVariationForm::FullMean, SecondVariationForm::SurfacePower] {
            assert_eq!(second_variation_analytic(&spec, &sphere, &zero, form, Criticality::Unchecked).unwrap(), 0.0);
        }
    }

    #[test]
    fn line_field_residual() {
        // s = 1, p = 2: Δ_F κ + (κ² − ‖h_mix‖² − (n/2)Hκ)κ
        let patch = catalog::bumpy_torus(&[24, 24], 1.0).unwrap();
        let kappa: Vec<f64> = (0..patch.grid.len()).map(|k| patch.point_geometry(k).unwrap().h_f_mean).collect();
        let nodes: Vec<usize> = (0..patch.grid.len()).step_by(7).collect();
        let res = mean_leaf_el_residuals(&patch, 2.0, &nodes).unwrap();
        for (r, &k) in res.iter().zip(&nodes) {
            let g = patch.point_geometry(k).unwrap();
            let kk = kappa[k];
            let expect = patch.leaf_laplacian_field(&kappa, k).unwrap() + (kk * kk - g.norm_hmix_sq - g.mean_curvature * kk) * kk;
            assert_relative_eq!(*r, expect, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn stencil_and_algebraic_residuals_agree_on_revolution_patches() {
        let kind = catalog::ProfileKind::Catenoid { a: 0.3 };
        let patch = catalog::revolution_analytic(2, kind, 0.4, 0.9, &[16, 40]).unwrap();
        let spec = FunctionalSpec::w_nps(3.0).unwrap();
        let nodes = patch.interior_nodes(&[0, 1], 1);
        let lw = el_residuals(&spec, &patch, ElForm::Leafwise, &nodes).unwrap();
        for (r, &k) in lw.iter().zip(&nodes) {
            let rho = patch.grid.point(k)[1];
            let d = kind.derivs(rho);
            let alg = el_residual_revolution(&spec, &RevolutionInvariants::new(2, rho, d[1], d[2]).unwrap()).unwrap();
            assert!((r - alg).abs() < 1e-6 * alg.abs().max(1.0), "{rho}: {r} vs {alg}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn surface_identities_hold_pointwise(eps in 0.0f64..1.2, x in 0.0f64..6.28, y in 0.0f64..6.28) {
            let patch = catalog::bumpy_torus_s(&[5, 5], eps, 2).unwrap();
            let g = patch.geometry_at(&[x, y], 2).unwrap();
            let (h, k) = (g.mean_curvature, g.k_f());
            proptest::prop_assert!((g.norm_h_sq - 2.0 * h * h - 2.0 * (h * h - k)).abs() < 1e-10);
            let hhh = (&g.h_frame * &g.h_frame * &g.h_frame).trace();
            proptest::prop_assert!((hhh - (8.0 * h.powi(3) - 6.0 * h * k)).abs() < 1e-10);
        }

        #[test]
        fn leaf_identities_hold_pointwise(eps in 0.0f64..1.2, x in 0.0f64..6.28, y in 0.0f64..6.28, z in 0.0f64..6.28) {
            let patch = catalog::sheared_torus3(&[5, 5, 5], eps).unwrap();
            let g = patch.geometry_at(&[x, y, z], 2).unwrap();
            let (hf, kf) = (g.h_f_mean, g.k_f());
            proptest::prop_assert!((g.norm_hf_sq - (4.0 * hf * hf - 2.0 * kf)).abs() < 1e-10);
            proptest::prop_assert!((g.tau[2] - (8.0 * hf.powi(3) - 6.0 * hf * kf)).abs() < 1e-10);
        }

        #[test]
        fn reductions_hold_for_any_power(p in 1u32..5, eps in 0.2f64..1.0) {
            let patch = catalog::sheared_torus3(&[5, 5, 5], eps).unwrap();
            let pf = p as f64;
            let wf = FunctionalSpec::wf(
                2,
                call(move |x| (x[0] / 2.0).powi(p as i32)),
                vec![call(move |x| pf / 2.0 * (x[0] / 2.0).powi(p as i32 - 1)), call(|_| 0.0)],
            ).unwrap();
            let a = evaluate(&wf, &patch).unwrap();
            let b = evaluate(&FunctionalSpec::w_nps(pf).unwrap(), &patch).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            let jf = FunctionalSpec::jf(
                2,
                call(move |x| x[1].powi(p as i32)),
                vec![call(|_| 0.0), call(move |x| pf * x[1].powi(p as i32 - 1))],
            ).unwrap();
            let a = evaluate(&jf, &patch).unwrap();
            let b = evaluate(&FunctionalSpec::j_nps(2.0 * pf).unwrap(), &patch).unwrap();
            proptest::prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn wrong_partials_are_rejected() {
        let bad = FunctionalSpec::wf_of_hf(call(|x| x[0].powi(3)), call(|x| 2.0 * x[0] * x[0]), None);
        assert!(matches!(bad, Err(Error::Validation(_))));
        let bad2 = FunctionalSpec::wf_of_hf(call(|x| x[0].powi(3)), call(|x| 3.0 * x[0] * x[0]), Some(call(|x| x[0])));
        assert!(matches!(bad2, Err(Error::Validation(_))));
        let hk = FunctionalSpec::wf_hk(call(|x| x[0] * x[1]), call(|x| x[1]), call(|x| x[0])).unwrap();
        let patch = catalog::bumpy_torus(&[8, 8], 1.0).unwrap();
        assert!(matches!(evaluate(&hk, &patch), Err(Error::Spec(_))));
    }

    #[test]
    fn fractional_power_of_negative_mean_is_refused() {
        let patch = catalog::sphere(2, 1.0, 2, &[8, 8]).unwrap();
        let flipped = FoliatedPatch::new(patch.immersion.clone(), 2, patch.grid.clone(), -patch.orientation, patch.supplier)
            .unwrap();
        assert!(matches!(evaluate(&FunctionalSpec::w_nps(2.5).unwrap(), &flipped), Err(Error::Domain(_))));
        let w = evaluate(&FunctionalSpec::w_nps(3.0).unwrap(), &flipped).unwrap();
        assert_relative_eq!(w, -4.0 * PI, max_relative = 1e-10);
    }

    #[test]
    fn surface_and_leaf_identities() {
        let patch = catalog::bumpy_torus_s(&[10, 10], 1.0, 2).unwrap();
        for k in 0..patch.grid.len() {
            let g = patch.point_geometry(k).unwrap();
            let (h, kk) = (g.mean_curvature, g.k_f());
            assert!((g.norm_h_sq - 2.0 * h * h - 2.0 * (h * h - kk)).abs() < 1e-10);
            let hhh = (&g.h_frame * &g.h_frame * &g.h_frame).trace();
            assert!((hhh - (8.0 * h.powi(3) - 6.0 * h * kk)).abs() < 1e-10);
        }
        let patch = catalog::sheared_torus3(&[6, 6, 6], 1.0).unwrap();
        for k in 0..patch.grid.len() {
            let g = patch.point_geometry(k).unwrap();
            let (hf, kf) = (g.h_f_mean, g.k_f());
            assert!((g.norm_hf_sq - (4.0 * hf * hf - 2.0 * kf)).abs() < 1e-10);
            assert!((g.tau[2] - (8.0 * hf.powi(3) - 6.0 * hf * kf)).abs() < 1e-10);
        }
    }

    #[test]
    fn area_variation_examples() {
        let sphere = catalog::sphere(2, 1.0, 2, &[16, 16]).unwrap();
        let zero = ConstantField { dim: 2, value: 0.0 };
        assert_eq!(first_variation_analytic(&area_spec(), &sphere, &zero).unwrap(), 0.0);
        assert_eq!(first_variation_numeric(&area_spec(), &sphere, &zero, &LADDER).unwrap(), 0.0);
        // the inward normal makes u = 1 a shrink: d/dt of 4π(1 − t)²
        let one = ConstantField { dim: 2, value: 1.0 };
        assert_relative_eq!(first_variation_analytic(&area_spec(), &sphere, &one).unwrap(), -8.0 * PI, max_relative = 1e-12);
        assert_relative_eq!(first_variation_numeric(&area_spec(), &sphere, &one, &LADDER).unwrap(), -8.0 * PI, max_relative = 1e-8);
        // ∫H dV with constant u: u(1 − n)·area
        let c = ConstantField { dim: 2, value: 0.3 };
        let v = first_variation_analytic(&FunctionalSpec::w_nps(1.0).unwrap(), &sphere, &c).unwrap();
        assert_relative_eq!(v, -0.3 * 4.0 * PI, max_relative = 1e-12);
    }

    fn all_kinds() -> Vec<FunctionalSpec> {
        vec![
            FunctionalSpec::w_nps(3.0).unwrap(),
            FunctionalSpec::j_nps(3.0).unwrap(),
            FunctionalSpec::wf(2, call(|x| x[0] * x[0] + x[1]), vec![call(|x| 2.0 * x[0]), call(|_| 1.0)]).unwrap(),
            FunctionalSpec::jf(2, call(|x| x[0] * x[1]), vec![call(|x| x[1]), call(|x| x[0])]).unwrap(),
            FunctionalSpec::wf_of_hf(call(|x| x[0].powi(4)), call(|x| 4.0 * x[0].powi(3)), Some(call(|x| 12.0 * x[0] * x[0])))
                .unwrap(),
            FunctionalSpec::conformal(2).unwrap(),
            FunctionalSpec::wf_hk(call(|x| x[0] * x[0] * x[1]), call(|x| 2.0 * x[0] * x[1]), call(|x| x[0] * x[0])).unwrap(),
        ]
    }

    #[test]
    fn first_variation_matches_central_differences() {
        let patch = catalog::sheared_torus3(&[6, 6, 6], 1.0).unwrap();
        let u = TrigField::random(3, 2, 11).scaled(0.5);
        for spec in all_kinds() {
            let chk = check_first_variation(&spec, &patch, &u, &LADDER).unwrap();
            assert!(chk.pass, "{}: {chk:?}", spec.label());
            assert!((chk.richardson - chk.analytic).abs() < 1e-9 * chk.analytic.abs().max(1.0), "{}", spec.label());
        }
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    #[test]
    fn leafwise_el_on_sphere_and_revolution() {
        // round sphere, s = n = 2: ΔH + 2H(H² − K) = 0 up to the stencil error of the polar chart
        let spec2 = FunctionalSpec::w_nps(2.0).unwrap();
        let res = |m: usize| {
            let sphere = catalog::sphere(2, 1.0, 2, &[16, m]).unwrap();
            max_abs(&el_residuals(&spec2, &sphere, ElForm::Leafwise, &sphere.interior_nodes(&[0, 1], 1)).unwrap())
        };
        let (r1, r2) = (res(32), res(64));
        assert!(r2 < 1e-4 && r1 / r2 > 10.0, "{r1:e} {r2:e}");
        let prof = CriticalProfile::fit(2, 3.0, 0.4, 1.0, 0.4).unwrap();
        let patch = catalog::revolution(2, Arc::new(prof.clone()), 0.25, 0.55, &[16, 10]).unwrap();
        let spec = FunctionalSpec::w_nps(3.0).unwrap();
        let nodes: Vec<usize> = (0..patch.grid.len()).collect();
        let lw = el_residuals(&spec, &patch, ElForm::Leafwise, &nodes).unwrap();
        let scalar = mean_leaf_el_residuals(&patch, 3.0, &nodes).unwrap();
        for (a, b) in lw.iter().zip(&scalar) {
            assert!(a.abs() < 1e-8 && b.abs() < 1e-8, "{a} {b}");
        }
        // off-critical profile: leafwise form equals (p/s) times the scalar mean-curvature form
        let cat = catalog::revolution_analytic(2, catalog::ProfileKind::Catenoid { a: 0.3 }, 0.4, 0.9, &[16, 10]).unwrap();
        let lw = el_residuals(&spec, &cat, ElForm::Leafwise, &nodes).unwrap();
        let scalar = mean_leaf_el_residuals(&cat, 3.0, &nodes).unwrap();
        for (a, b) in lw.iter().zip(&scalar) {
            assert_relative_eq!(*a, 3.0 * b, max_relative = 1e-8);
        }
        for rho in [0.3, 0.4, 0.5] {
            let inv = prof.invariants(rho).unwrap();
            let r = el_residual_revolution(&spec, &inv).unwrap();
            let ee = inv.criticality_residuals(3.0).0;
            assert!(r.abs() < 1e-10 && ee.abs() < 1e-10);
            let cat_inv = {
                let d = catalog::ProfileKind::Catenoid { a: 0.3 }.derivs(rho + 0.2);
                RevolutionInvariants::new(2, rho + 0.2, d[1], d[2]).unwrap()
            };
            // both are multiples of k_1^p (p k_1 − nH)
            let r = el_residual_revolution(&spec, &cat_inv).unwrap();
            let ee = cat_inv.criticality_residuals(3.0).0;
            assert_relative_eq!(r, ee * cat_inv.k1.powi(2), max_relative = 1e-12);
        }
    }

    #[test]
    fn leafwise_form_refused_without_transversal_harmonicity() {
        let patch = catalog::sheared_torus3(&[8, 8, 8], 1.0).unwrap();
        let res = el_residuals(&FunctionalSpec::w_nps(2.0).unwrap(), &patch, ElForm::Leafwise, &[0]);
        assert!(matches!(res, Err(Error::Precondition(_))));
    }

    #[test]
    fn exact_el_weak_form_reproduces_first_variation() {
        let u = TrigField::random(2, 2, 5).scaled(0.3);
        let specs = [FunctionalSpec::w_nps(2.0).unwrap(), FunctionalSpec::j_nps(3.0).unwrap(), area_spec()];
        let gap = |m: usize, spec: &FunctionalSpec| {
            let patch = catalog::bumpy_torus(&[m, m], 1.0).unwrap();
            let strong = first_variation_analytic(spec, &patch, &u).unwrap();
            let weak = weak_first_variation(spec, &patch, &u, ElForm::Exact).unwrap();
            (weak - strong).abs() / strong.abs()
        };
        for spec in &specs {
            let (e1, e2) = (gap(40, spec), gap(80, spec));
            // stencil error only: the gap shrinks at better than third order per halving
            assert!(e2 < 5e-3 && (e2 < 1e-12 || e1 / e2 > 6.0), "{}: {e1:e} {e2:e}", spec.label());
        }
    }

    #[test]
    fn ode_profiles_are_not_stationary_under_radial_variations() {
        // the profile ODE holds, yet a radial bump changes W_{2,3,1} at first order
        let prof = CriticalProfile::fit(2, 3.0, 0.4, 1.0, 0.4).unwrap();
        let patch = catalog::revolution(2, Arc::new(prof.clone()), 0.25, 0.55, &[8, 24]).unwrap();
        let u = TrigField::random(2, 2, 3).frozen_along(&[0]).fit_to(&patch.grid);
        let spec = FunctionalSpec::w_nps(3.0).unwrap();
        let a = first_variation_analytic(&spec, &patch, &u).unwrap();
        let b = first_variation_numeric(&spec, &patch, &u, &LADDER).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-7);
        let w = evaluate(&spec, &patch).unwrap();
        assert!(a.abs() > 1e-3 * w.abs(), "first variation {a} vs functional {w}");
        for rho in [0.3, 0.4, 0.5] {
            assert!(prof.invariants(rho).unwrap().criticality_residuals(3.0).0.abs() < 1e-10);
        }
    }

    #[test]
    fn second_variation_on_the_round_sphere() {
        // the polar chart leaves an O(h⁴) Euler-Lagrange residual near the poles, so the guard is skipped
        let sphere = catalog::sphere(2, 1.0, 2, &[16, 24]).unwrap();
        let u = SphereHarmonic { n: 2, j: 2 };
        let spec = FunctionalSpec::w_nps(2.0).unwrap();
        let mut u2 = 0.0;
        for k in 0..sphere.grid.len() {
            let g = sphere.point_geometry(k).unwrap();
            u2 += sphere.grid.weight(k) * g.sqrt_det_g * u.value(&sphere.grid.point(k)).powi(2);
        }
        // λ = 6: (p(p−1)/4)λ² − (p² − p − 1)λ + (p − 1)(p − 2) = 12
        let expect = 12.0 * u2;
        for form in [SecondVariationForm::FullMean, SecondVariationForm::General, SecondVariationForm::SurfacePower] {
            let v = second_variation_analytic(&spec, &sphere, &u, form, Criticality::Unchecked).unwrap();
            assert_relative_eq!(v, expect, max_relative = 1e-9);
        }
        let num = second_variation_numeric(&spec, &sphere, &u, &[1e-2, 5e-3]).unwrap();
        assert_relative_eq!(num, expect, max_relative = 1e-6);
        // W_{2,3}: (6·36/4) − 5·6 + 2 = 26
        let spec3 = FunctionalSpec::w_nps(3.0).unwrap();
        for form in [SecondVariationForm::FullMean, SecondVariationForm::SurfacePower] {
            let v = second_variation_analytic(&spec3, &sphere, &u, form, Criticality::Unchecked).unwrap();
            assert_relative_eq!(v, 26.0 * u2, max_relative = 1e-8);
        }
    }

    #[test]
    fn volume_constrained_guard_on_a_spherical_band() {
        // parallels of the unit sphere: the residual is the constant p − 2
        let band = catalog::revolution_analytic(2, catalog::ProfileKind::Hemisphere { radius: 1.0 }, 0.2, 0.9, &[16, 24]).unwrap();
        let u = LeafHarmonic { n: 2, j: 2, radial: None };
        let spec2 = FunctionalSpec::w_nps(2.0).unwrap();
        let spec3 = FunctionalSpec::w_nps(3.0).unwrap();
        let form = SecondVariationForm::Critical;
        assert!(second_variation_analytic(&spec2, &band, &u, form, Criticality::Strict).is_ok());
        assert!(matches!(
            second_variation_analytic(&spec3, &band, &u, form, Criticality::Strict),
            Err(Error::Precondition(_))
        ));
        let shifted = Arc::new(ConstantField { dim: 2, value: 1.0 });
        assert!(matches!(
            second_variation_analytic(&spec3, &band, shifted.as_ref(), form, Criticality::VolumeConstrained),
            Err(Error::Precondition(_))
        ));
        let vp = VolumePreserving::new(&band, shifted).unwrap();
        assert!(second_variation_analytic(&spec3, &band, &vp, form, Criticality::VolumeConstrained).is_ok());
    }

    #[test]
    fn power_form_matches_revolution_reduction() {
        let prof = CriticalProfile::fit(2, 3.0, 0.4, 1.0, 0.4).unwrap();
        let window = (0.2, 0.6);
        let patch = catalog::revolution(2, Arc::new(prof.clone()), window.0, window.1, &[16, 24]).unwrap();
        let spec = FunctionalSpec::w_nps(3.0).unwrap();
        for j in [0u32, 1, 2] {
            let u = LeafHarmonic { n: 2, j, radial: None };
            let a = second_variation_analytic(&spec, &patch, &u, SecondVariationForm::PowerCritical, Criticality::Strict).unwrap();
            let b = second_variation_analytic(&spec, &patch, &u, SecondVariationForm::Critical, Criticality::Strict).unwrap();
            let r = crate::revolution::second_variation_revolution(2, 3.0, &prof, j, None, window, 24).unwrap();
            assert_relative_eq!(a, r.value, max_relative = 1e-8);
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
    }

    #[test]
    fn conformal_density_is_invariant() {
        let patch = catalog::sheared_torus3(&[8, 8, 8], 1.0).unwrap();
        let hom = conformal_density_check(&patch, 2, ConformalMode::Scaling(2.5)).unwrap();
        assert!(hom.density_deviation < 1e-12 && hom.shape_law_deviation < 1e-12, "{hom:?}");
        let inv = conformal_density_check(&patch, 2, ConformalMode::Inversion).unwrap();
        assert!(inv.density_deviation < 1e-6 && inv.shape_law_deviation < 1e-8, "{inv:?}");
        assert!(inv.max_density > 1e-3);
        let sphere = catalog::sphere(2, 1.0, 2, &[8, 8]).unwrap();
        let umb = conformal_density_check(&sphere, 2, ConformalMode::Inversion).unwrap();
        assert!(umb.max_density < 1e-14 && umb.density_deviation < 1e-5, "{umb:?}");
        assert!(matches!(conformal_density_check(&patch, 3, ConformalMode::Inversion), Err(Error::Spec(_))));
    }
}
