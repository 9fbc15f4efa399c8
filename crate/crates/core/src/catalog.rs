//! Closed-form test immersions, test fields and leaf harmonics.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use num_dual::HyperHyperDual64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Result};
use crate::geom_patch::{DerivativeSupplier, FoliatedPatch, JetSource};
use crate::grid::{Axis, Grid};
use crate::jet::{Chart, Field, Immersion, Real};

/// Unit vector on S^{k} from (φ, θ_1, …, θ_{k−1}): start on the circle, lift by each polar angle.
fn sphere_point<D: Real>(angles: &[D]) -> Vec<D> {
    let mut v = vec![angles[0].cos(), angles[0].sin()];
    for &t in &angles[1..] {
        let st = t.sin();
        for c in v.iter_mut() {
            *c *= st;
        }
        v.push(t.cos());
    }
    v
}

fn count(counts: &[usize], i: usize) -> Result<usize> {
    counts.get(i).copied().ok_or_else(|| crate::Error::Domain(format!("missing grid count for axis {i}")))
}

/// Builds a patch and picks the orientation for which `want` holds at a sample node.
fn oriented(
    imm: Arc<dyn Immersion>,
    s: usize,
    grid: Grid,
    want: impl Fn(&crate::geom_patch::PointGeometry) -> bool,
) -> Result<FoliatedPatch> {
    let patch = FoliatedPatch::new(imm.clone(), s, grid.clone(), 1.0, DerivativeSupplier::Analytic)?;
    let mid: Vec<usize> = grid.axes.iter().map(|a| a.len() / 2).collect();
    let sample = grid.index(&mid);
    if want(&patch.point_geometry(sample)?) {
        Ok(patch)
    } else {
        FoliatedPatch::new(imm, s, grid, -1.0, DerivativeSupplier::Analytic)
    }
}

#[derive(Debug, Clone)]
pub struct SphereChart {
    pub n: usize,
    pub radius: f64,
}

impl Chart for SphereChart {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D> {
        sphere_point(x).into_iter().map(|c| c * self.radius).collect()
    }
}

/// Round sphere S^n(R) in hyperspherical coordinates (φ, θ_1, …, θ_{n−1}), inward normal.
pub fn sphere(n: usize, radius: f64, s: usize, counts: &[usize]) -> Result<FoliatedPatch> {
    if n < 1 || radius <= 0.0 {
        return domain("sphere needs n >= 1 and a positive radius");
    }
    let mut axes = vec![Axis::periodic(0.0, TAU, count(counts, 0)?)?];
    for i in 1..n {
        axes.push(Axis::gauss_legendre(0.0, PI, count(counts, i)?)?);
    }
    oriented(Arc::new(SphereChart { n, radius }), s, Grid::new(axes)?, |g| g.mean_curvature > 0.0)
}

#[derive(Debug, Clone)]
pub struct TorusChart {
    pub big: f64,
    pub small: f64,
}

impl Chart for TorusChart {
    fn dim(&self) -> usize {
        2
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D> {
        let w = x[1].cos() * self.small + self.big;
        vec![w * x[0].cos(), w * x[0].sin(), x[1].sin() * self.small]
    }
}

/// Torus of revolution with radii R > r, coordinates (φ, θ); s = 1 gives the parallels.
pub fn torus(big: f64, small: f64, s: usize, counts: &[usize]) -> Result<FoliatedPatch> {
    if !(big > small && small > 0.0) {
        return domain("torus needs R > r > 0");
    }
    let grid = Grid::new(vec![Axis::periodic(0.0, TAU, count(counts, 0)?)?, Axis::periodic(0.0, TAU, count(counts, 1)?)?])?;
    oriented(Arc::new(TorusChart { big, small }), s, grid, |g| g.h[(1, 1)] > 0.0)
}

#[derive(Debug, Clone)]
pub struct CylinderChart {
    pub radius: f64,
}

impl Chart for CylinderChart {
    fn dim(&self) -> usize {
        2
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D> {
        vec![x[0].cos() * self.radius, x[0].sin() * self.radius, x[1]]
    }
}

/// Cylinder S¹(R) × (0, L) foliated by circles, inward normal.
pub fn cylinder(radius: f64, length: f64, counts: &[usize]) -> Result<FoliatedPatch> {
    if radius <= 0.0 || length <= 0.0 {
        return domain("cylinder needs positive radius and length");
    }
    let grid = Grid::new(vec![
        Axis::periodic(0.0, TAU, count(counts, 0)?)?,
        Axis::gauss_legendre(0.0, length, count(counts, 1)?)?,
    ])?;
    oriented(Arc::new(CylinderChart { radius }), 1, grid, |g| g.mean_curvature > 0.0)
}

#[derive(Debug, Clone)]
pub struct PlaneChart;

impl Chart for PlaneChart {
    fn dim(&self) -> usize {
        2
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D> {
        vec![x[0], x[1], D::from(0.0)]
    }
}

pub fn plane(counts: &[usize]) -> Result<FoliatedPatch> {
    let grid = Grid::new(vec![Axis::periodic(0.0, 1.0, count(counts, 0)?)?, Axis::periodic(0.0, 1.0, count(counts, 1)?)?])?;
    FoliatedPatch::new(Arc::new(PlaneChart), 1, grid, 1.0, DerivativeSupplier::Analytic)
}

/// Profile f(ρ) of a hypersurface of revolution; `derivs` returns f, f′, f″, f‴.
pub trait Profile: Send + Sync {
    fn derivs(&self, rho: f64) -> [f64; 4];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProfileKind {
    /// f = a·acosh(ρ/a).
    Catenoid { a: f64 },
    /// f = √(R² − ρ²).
    Hemisphere { radius: f64 },
    /// f = cρ.
    Cone { slope: f64 },
    /// f = c·ρ^k.
    Power { c: f64, k: f64 },
}

impl ProfileKind {
    pub fn eval<D: Real>(&self, rho: D) -> D {
        match *self {
            ProfileKind::Catenoid { a } => {
                let q = rho / a;
                (q + (q * q - 1.0).sqrt()).ln() * a
            }
            ProfileKind::Hemisphere { radius } => (-(rho * rho) + radius * radius).sqrt(),
            ProfileKind::Cone { slope } => rho * slope,
            ProfileKind::Power { c, k } => rho.powf(k) * c,
        }
    }
}

impl Profile for ProfileKind {
    fn derivs(&self, rho: f64) -> [f64; 4] {
        let mut x = HyperHyperDual64::from_re(rho);
        x.eps1 = 1.0;
        x.eps2 = 1.0;
        x.eps3 = 1.0;
        let y = self.eval(x);
        [y.re, y.eps1, y.eps1eps2, y.eps1eps2eps3]
    }
}

/// Taylor model of the profile about the real part of ρ, exact through third order.
fn profile_taylor<D: Real>(profile: &dyn Profile, rho: D) -> D {
    let r0 = rho.re();
    let d = profile.derivs(r0);
    let e = rho - r0;
    e * e * e * (d[3] / 6.0) + e * e * (0.5 * d[2]) + e * d[1] + d[0]
}

/// x = (φ, θ_1, …, θ_{n−2}, ρ) ↦ (ρ ω, f(ρ)).
#[derive(Clone)]
pub struct RevolutionChart {
    pub n: usize,
    pub profile: Arc<dyn Profile>,
}

impl Chart for RevolutionChart {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D> {
        let n = self.n;
        let rho = x[n - 1];
        let mut out: Vec<D> = if n == 1 { vec![D::from(1.0)] } else { sphere_point(&x[..n - 1]) };
        for c in out.iter_mut() {
            *c *= rho;
        }
        out.push(profile_taylor(self.profile.as_ref(), rho));
        out
    }
}

/// Hypersurface of revolution over ρ ∈ (ρ_min, ρ_max), leaves are the parallels (s = n − 1).
pub fn revolution(n: usize, profile: Arc<dyn Profile>, rho_min: f64, rho_max: f64, counts: &[usize]) -> Result<FoliatedPatch> {
    if n < 2 {
        return domain("hypersurface of revolution needs n >= 2");
    }
    if !(rho_min > 0.0 && rho_max > rho_min) {
        return domain("revolution window needs 0 < rho_min < rho_max");
    }
    let mut axes = vec![Axis::periodic(0.0, TAU, count(counts, 0)?)?];
    for i in 1..n - 1 {
        axes.push(Axis::gauss_legendre(0.0, PI, count(counts, i)?)?);
    }
    axes.push(Axis::gauss_legendre(rho_min, rho_max, count(counts, n - 1)?)?);
    // normal chosen so that k_1 has the sign of f′
    let probe = profile.derivs(0.5 * (rho_min + rho_max))[1];
    oriented(Arc::new(RevolutionChart { n, profile }), n - 1, Grid::new(axes)?, move |g| {
        g.h_f[(0, 0)] * probe >= 0.0
    })
}

pub fn revolution_analytic(n: usize, kind: ProfileKind, rho_min: f64, rho_max: f64, counts: &[usize]) -> Result<FoliatedPatch> {
    revolution(n, Arc::new(kind), rho_min, rho_max, counts)
}

pub fn cone(n: usize, slope: f64, rho_min: f64, rho_max: f64, counts: &[usize]) -> Result<FoliatedPatch> {
    revolution_analytic(n, ProfileKind::Cone { slope }, rho_min, rho_max, counts)
}

/// Torus with a non-symmetric bump, s = 1 (parallels) or s = 2.
#[derive(Debug, Clone)]
pub struct BumpyTorusChart {
    pub eps: f64,
}

impl Chart for BumpyTorusChart {
    fn dim(&self) -> usize {
        2
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D> {
        let (p, t) = (x[0], x[1]);
        let e = self.eps;
        let a = ((p * 2.0 - t).cos() * 0.2 + (t * 3.0).sin() * 0.1) * e + 0.7;
        let big = p.sin() * (0.3 * e) + 2.0;
        let w = t.cos() * a + big;
        vec![w * p.cos(), w * p.sin(), t.sin() * a + (p + t).cos() * (0.05 * e)]
    }
}

pub fn bumpy_torus(counts: &[usize], eps: f64) -> Result<FoliatedPatch> {
    bumpy_torus_s(counts, eps, 1)
}

pub fn bumpy_torus_s(counts: &[usize], eps: f64, s: usize) -> Result<FoliatedPatch> {
    let grid = Grid::new(vec![Axis::periodic(0.0, TAU, count(counts, 0)?)?, Axis::periodic(0.0, TAU, count(counts, 1)?)?])?;
    oriented(Arc::new(BumpyTorusChart { eps }), s, grid, |g| g.h[(1, 1)] > 0.0)
}

/// Bumpy torus T³ ⊂ R⁴ foliated by 2-tori (x³ = const) in sheared coordinates.
#[derive(Debug, Clone)]
pub struct ShearedTorus3Chart {
    pub eps: f64,
}

impl Chart for ShearedTorus3Chart {
    fn dim(&self) -> usize {
        3
    }
    fn ambient_dim(&self) -> usize {
        4
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D> {
        let e = self.eps;
        let p1 = x[0] + x[2].sin() * (0.3 * e);
        let p2 = x[1] + (x[0] - x[2]).cos() * (0.1 * e);
        let p3 = x[2];
        let a = (p1 + p2 * 2.0 - p3).sin() * (0.15 * 0.6 * e) + 0.6;
        let b = (p1 * 2.0 - p3).cos() * (0.1 * e) + 1.6;
        let w = p3.cos() * a + b;
        let rho = p2.cos() * w + 4.0;
        vec![rho * p1.cos(), rho * p1.sin(), p2.sin() * w, p3.sin() * a]
    }
}

pub fn sheared_torus3(counts: &[usize], eps: f64) -> Result<FoliatedPatch> {
    let mut axes = Vec::new();
    for i in 0..3 {
        axes.push(Axis::periodic(0.0, TAU, count(counts, i)?)?);
    }
    FoliatedPatch::new(Arc::new(ShearedTorus3Chart { eps }), 2, Grid::new(axes)?, 1.0, DerivativeSupplier::Analytic)
}

/// Random trigonometric polynomial, optionally windowed by sin⁴ on non-periodic axes.
#[derive(Debug, Clone)]
pub struct TrigField {
    pub dim: usize,
    pub terms: Vec<(Vec<i32>, f64, f64)>,
    pub constant: f64,
    /// Per axis: None for periodic axes, Some((a, b)) for a sin⁴ window on [a, b].
    pub windows: Vec<Option<(f64, f64)>>,
    /// Axes along which the field does not vary.
    pub frozen: Vec<usize>,
}

impl TrigField {
    pub fn random(dim: usize, degree: i32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut terms = Vec::new();
        for _ in 0..(2 + degree as usize * 2) {
            let k: Vec<i32> = (0..dim).map(|_| rng.gen_range(-degree..=degree)).collect();
            terms.push((k, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
        Self { dim, terms, constant: rng.gen_range(-0.5..0.5), windows: vec![None; dim], frozen: Vec::new() }
    }

    pub fn windowed(mut self, axis: usize, a: f64, b: f64) -> Self {
        self.windows[axis] = Some((a, b));
        self
    }

    /// Removes dependence on the given axes (e.g. leaf-constant or transverse-constant fields).
    pub fn frozen_along(mut self, axes: &[usize]) -> Self {
        for t in self.terms.iter_mut() {
            for &a in axes {
                t.0[a] = 0;
            }
        }
        self.frozen = axes.to_vec();
        self
    }

    pub fn scaled(mut self, c: f64) -> Self {
        for t in self.terms.iter_mut() {
            t.1 *= c;
            t.2 *= c;
        }
        self.constant *= c;
        self
    }

    /// Builds windows for every non-periodic axis of the grid.
    pub fn fit_to(mut self, grid: &Grid) -> Self {
        for (i, ax) in grid.axes.iter().enumerate() {
            if !ax.is_periodic() {
                self.windows[i] = Some((ax.a, ax.b));
            }
        }
        self
    }
}

impl Field for TrigField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval<D: Real>(&self, x: &[D]) -> D {
        let mut acc = D::from(self.constant);
        for (k, a, b) in &self.terms {
            let mut arg = D::from(0.0);
            for (i, &ki) in k.iter().enumerate() {
                if ki != 0 {
                    arg += x[i] * ki as f64;
                }
            }
            acc += arg.cos() * *a + arg.sin() * *b;
        }
        for (i, w) in self.windows.iter().enumerate() {
            if let Some((a, b)) = *w {
                let s = ((x[i] - a) * (PI / (b - a))).sin();
                let s2 = s * s;
                acc *= s2 * s2;
            }
        }
        acc
    }
}

/// Re((ω_1 + iω_2)^j) on the parallels of a hypersurface of revolution, optionally times a polynomial in ρ.
#[derive(Debug, Clone)]
pub struct LeafHarmonic {
    pub n: usize,
    pub j: u32,
    pub radial: Option<Vec<f64>>,
}

impl Field for LeafHarmonic {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval<D: Real>(&self, x: &[D]) -> D {
        let n = self.n;
        let mut v = (x[0] * self.j as f64).cos();
        for &t in &x[1..n - 1] {
            v *= t.sin().powi(self.j as i32);
        }
        if let Some(c) = &self.radial {
            let rho = x[n - 1];
            let mut poly = D::from(0.0);
            for &ck in c.iter().rev() {
                poly = poly * rho + ck;
            }
            v *= poly;
        }
        v
    }
}

/// Uniform sphere harmonic on S^n in the sphere chart: Re((x_1 + i x_2)^j).
#[derive(Debug, Clone)]
pub struct SphereHarmonic {
    pub n: usize,
    pub j: u32,
}

impl Field for SphereHarmonic {
    fn dim(&self) -> usize {
        self.n
    }
    fn eval<D: Real>(&self, x: &[D]) -> D {
        let mut v = (x[0] * self.j as f64).cos();
        for &t in &x[1..] {
            v *= t.sin().powi(self.j as i32);
        }
        v
    }
}

/// Constant function.
#[derive(Debug, Clone)]
pub struct ConstantField {
    pub dim: usize,
    pub value: f64,
}

impl Field for ConstantField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval<D: Real>(&self, _x: &[D]) -> D {
        D::from(self.value)
    }
}
