//! Hypersurfaces of revolution x_{n+1} = f(ρ) foliated by parallels.

use std::f64::consts::PI;

use num_dual::{DualNum, HyperHyperDual64};

use crate::catalog::Profile;
use crate::error::{domain, Error, Result};
use crate::grid::Axis;
use crate::ode::{self, OdeOptions};
use crate::quadrature;
use crate::symfunc::safe_pow;

/// Slope magnitude at which the graph is treated as vertical.
pub const VERTICAL_SLOPE: f64 = 1e6;
/// Distance in ρ kept from the singular point of the closed-form integrand.
pub const SINGULAR_MARGIN: f64 = 1e-8;

/// Γ(k/2).
pub fn gamma_half(k: usize) -> f64 {
    assert!(k > 0, "Γ(0) is undefined");
    let (mut g, mut x) = if k % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while x < k as f64 / 2.0 - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Area of the unit sphere S^m ⊂ R^{m+1}.
pub fn sphere_area(m: usize) -> f64 {
    2.0 * PI.powf((m + 1) as f64 / 2.0) / gamma_half(m + 1)
}

/// Eigenvalue j(j+n−2) of the Laplacian on the unit (n−1)-sphere.
pub fn leaf_eigenvalue(n: usize, j: u32) -> f64 {
    let j = j as f64;
    j * (j + n as f64 - 2.0)
}

/// ∫_{S^{n−1}} Y_j² for Y_j = Re((ω_1 + iω_2)^j), matching `catalog::LeafHarmonic`.
pub fn leaf_harmonic_norm_sq(n: usize, j: u32) -> Result<f64> {
    if n < 2 {
        return domain("leaf spheres need n >= 2");
    }
    let area = sphere_area(n - 1);
    let nf = n as f64;
    match j {
        0 => Ok(area),
        1 => Ok(area / nf),
        2 => Ok(4.0 * area / (nf * (nf + 2.0))),
        _ => {
            // cos²(jφ) over the circle, then one sin-power integral per polar angle
            let mut v = PI;
            for k in 1..n - 1 {
                let e = (2 * j as usize + k) as i32;
                v *= quadrature::integrate(|t| t.sin().powi(e), 0.0, PI, 1e-14)?.value;
            }
            Ok(v)
        }
    }
}

pub fn principal_curvatures(rho: f64, fp: f64, fpp: f64) -> Result<(f64, f64)> {
    if !(rho > 0.0) {
        return domain(format!("principal curvatures need rho > 0, got {rho}"));
    }
    if !fp.is_finite() || !fpp.is_finite() {
        return domain(format!("non-finite slope data at rho = {rho}"));
    }
    let w = 1.0 + fp * fp;
    let k1 = fp / (rho * w.sqrt());
    let kn = fpp / (w * w.sqrt());
    if k1.abs() > 1.0 / rho * (1.0 + 1e-12) {
        return Err(Error::Validation(format!("|k1| = {} exceeds 1/rho at rho = {rho}", k1.abs())));
    }
    Ok((k1, kn))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevolutionInvariants {
    pub n: usize,
    pub k1: f64,
    pub kn: f64,
    pub mean_curvature: f64,
    pub h_f: f64,
    pub norm_hf_sq: f64,
    pub norm_h_sq: f64,
    pub h_dot_h2: f64,
    pub hf_dot_hf2: f64,
    /// ρ^{n−1}√(1+f′²), per unit measure of S^{n−1} and dρ.
    pub area_density: f64,
}

impl RevolutionInvariants {
    pub fn new(n: usize, rho: f64, fp: f64, fpp: f64) -> Result<Self> {
        if n < 2 {
            return domain("hypersurface of revolution needs n >= 2");
        }
        let (k1, kn) = principal_curvatures(rho, fp, fpp)?;
        let m = (n - 1) as f64;
        Ok(Self {
            n,
            k1,
            kn,
            mean_curvature: (m * k1 + kn) / n as f64,
            h_f: k1,
            norm_hf_sq: m * k1 * k1,
            norm_h_sq: m * k1 * k1 + kn * kn,
            h_dot_h2: m * k1.powi(3) + kn.powi(3),
            hf_dot_hf2: m * k1.powi(3),
            area_density: rho.powi(n as i32 - 1) * (1.0 + fp * fp).sqrt(),
        })
    }

    /// Both algebraic Euler–Lagrange residuals for W_{n,p,n−1} (mean-curvature and norm forms).
    pub fn criticality_residuals(&self, p: f64) -> (f64, f64) {
        let n = self.n as f64;
        (
            p * self.norm_hf_sq - n * (n - 1.0) * self.mean_curvature * self.h_f,
            p * self.hf_dot_hf2 - n * self.norm_hf_sq * self.mean_curvature,
        )
    }
}

/// Exponent c = p − n + 1 of the critical slope equation ρy′ = c·y(1+y²).
pub fn slope_exponent(n: usize, p: f64) -> f64 {
    p - n as f64 + 1.0
}

/// C1 = ρ0^{2c}(1+y0²)/y0², the constant for which the closed-form slope equals |f0′| at ρ0.
pub fn fit_constants(n: usize, p: f64, rho0: f64, fp0: f64) -> Result<f64> {
    if !(rho0 > 0.0) {
        return domain("fit_constants needs rho0 > 0");
    }
    if fp0 == 0.0 || !fp0.is_finite() {
        return domain(format!("no real C1 for slope {fp0}"));
    }
    let a = 2.0 * slope_exponent(n, p);
    Ok(rho0.powf(a) * (1.0 + fp0 * fp0) / (fp0 * fp0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevolutionProfile {
    pub n: usize,
    pub p: f64,
    pub rho: Vec<f64>,
    pub f: Vec<f64>,
    pub fprime: Vec<f64>,
    pub fsecond: Vec<f64>,
    /// Locations where the slope became vertical and the graph was cut off.
    pub truncation: Vec<f64>,
    /// f″ ≡ 0 (p = n − 1): a cone, cylinder or hyperplane.
    pub degenerate: bool,
}

impl RevolutionProfile {
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn invariants(&self, i: usize) -> Result<RevolutionInvariants> {
        RevolutionInvariants::new(self.n, self.rho[i], self.fprime[i], self.fsecond[i])
    }

    pub fn curvatures(&self) -> Result<Vec<(f64, f64)>> {
        (0..self.len()).map(|i| principal_curvatures(self.rho[i], self.fprime[i], self.fsecond[i])).collect()
    }

    /// max |k_n − (p−n+1)k_1| / |k_1| over the samples.
    pub fn criticality_defect(&self) -> Result<f64> {
        let c = slope_exponent(self.n, self.p);
        let mut worst: f64 = 0.0;
        for (k1, kn) in self.curvatures()? {
            if k1 != 0.0 {
                worst = worst.max((kn - c * k1).abs() / k1.abs());
            }
        }
        Ok(worst)
    }
}

/// Solves ρf″ = (p−n+1)f′(1+f′²) for (f′, f) from ρ0 outwards in both directions over `rho_grid`.
pub fn critical_ode_solve(
    n: usize,
    p: f64,
    rho0: f64,
    f0: f64,
    fp0: f64,
    rho_grid: &[f64],
    opts: OdeOptions,
) -> Result<RevolutionProfile> {
    if n < 2 {
        return domain("hypersurface of revolution needs n >= 2");
    }
    if !(rho0 > 0.0) || rho_grid.iter().any(|&r| !(r > 0.0)) {
        return domain("the rho range must exclude 0");
    }
    if !fp0.is_finite() {
        return domain("initial slope must be finite");
    }
    if rho_grid.windows(2).any(|w| w[1] <= w[0]) {
        return domain("rho grid must be strictly increasing");
    }
    let c = slope_exponent(n, p);
    let rhs = move |r: f64, y: &[f64], dy: &mut [f64]| {
        dy[0] = c * y[0] * (1.0 + y[0] * y[0]) / r;
        dy[1] = y[0];
    };
    let stop = |y: &[f64]| y[0].abs() > VERTICAL_SLOPE;
    let below: Vec<f64> = rho_grid.iter().rev().copied().filter(|&r| r < rho0).collect();
    let above: Vec<f64> = rho_grid.iter().copied().filter(|&r| r >= rho0).collect();
    let lo = ode::solve(rhs, rho0, &[fp0, f0], &below, opts, stop)?;
    let hi = ode::solve(rhs, rho0, &[fp0, f0], &above, opts, stop)?;
    let mut out = RevolutionProfile {
        n,
        p,
        rho: Vec::new(),
        f: Vec::new(),
        fprime: Vec::new(),
        fsecond: Vec::new(),
        truncation: lo.stopped_at.into_iter().chain(hi.stopped_at).collect(),
        degenerate: c == 0.0,
    };
    let samples = lo.t.iter().zip(&lo.y).rev().chain(hi.t.iter().zip(&hi.y));
    for (&r, y) in samples {
        out.rho.push(r);
        out.fprime.push(y[0]);
        out.f.push(y[1]);
        out.fsecond.push(c * y[0] * (1.0 + y[0] * y[0]) / r);
    }
    Ok(out)
}

/// Closed-form critical profile: f′ = sign·ρ^c/√(C1 − ρ^{2c}), f(anchor) = f_anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalProfile {
    pub n: usize,
    pub p: f64,
    pub c1: f64,
    pub sign: f64,
    pub anchor: f64,
    pub f_anchor: f64,
}

impl CriticalProfile {
    pub fn new(n: usize, p: f64, c1: f64, sign: f64, anchor: f64, f_anchor: f64) -> Result<Self> {
        if n < 2 {
            return domain("hypersurface of revolution needs n >= 2");
        }
        if !(anchor > 0.0) {
            return domain("anchor must satisfy rho > 0");
        }
        let prof = Self { n, p, c1, sign: sign.signum(), anchor, f_anchor };
        prof.check_feasible(anchor)?;
        Ok(prof)
    }

    /// Profile through (ρ0, f0) with slope f0′.
    pub fn fit(n: usize, p: f64, rho0: f64, f0: f64, fp0: f64) -> Result<Self> {
        let c1 = fit_constants(n, p, rho0, fp0)?;
        Self::new(n, p, c1, fp0.signum(), rho0, f0)
    }

    fn exponent(&self) -> f64 {
        slope_exponent(self.n, self.p)
    }

    /// ρ at which the slope becomes vertical, if any.
    pub fn vertical_tangent(&self) -> Option<f64> {
        let a = 2.0 * self.exponent();
        if a == 0.0 || self.c1 <= 0.0 {
            None
        } else {
            Some(self.c1.powf(1.0 / a))
        }
    }

    /// Open interval of ρ on which C1 − ρ^{2c} > 0.
    pub fn feasible_window(&self) -> (f64, f64) {
        let a = 2.0 * self.exponent();
        match self.vertical_tangent() {
            Some(r) if a > 0.0 => (0.0, r),
            Some(r) => (r, f64::INFINITY),
            None if self.c1 > 1.0 || (a != 0.0 && self.c1 > 0.0) => (0.0, f64::INFINITY),
            None => (0.0, 0.0),
        }
    }

    pub fn check_feasible(&self, rho: f64) -> Result<()> {
        if !(rho > 0.0) {
            return domain(format!("rho = {rho} must be positive"));
        }
        let a = 2.0 * self.exponent();
        if self.c1 - rho.powf(a) <= 0.0 {
            return domain(format!("radicand C1 rho^a - rho^2a is negative at rho = {rho} (C1 = {})", self.c1));
        }
        if let Some(r) = self.vertical_tangent() {
            if (rho - r).abs() < SINGULAR_MARGIN {
                return domain(format!("rho = {rho} is within the singular margin of the vertical tangent {r}"));
            }
        }
        Ok(())
    }

    fn slope_dual(&self, rho: HyperHyperDual64) -> HyperHyperDual64 {
        let c = self.exponent();
        rho.powf(c) * (-rho.powf(2.0 * c) + self.c1).powf(-0.5) * self.sign
    }

    /// f′, f″, f‴ at ρ.
    pub fn slope_derivs(&self, rho: f64) -> Result<[f64; 3]> {
        self.check_feasible(rho)?;
        let mut x = HyperHyperDual64::from_re(rho);
        x.eps1 = 1.0;
        x.eps2 = 1.0;
        x.eps3 = 1.0;
        let y = self.slope_dual(x);
        Ok([y.re, y.eps1, y.eps1eps2])
    }

    pub fn slope(&self, rho: f64) -> Result<f64> {
        self.check_feasible(rho)?;
        let c = self.exponent();
        Ok(self.sign * rho.powf(c) / (self.c1 - rho.powf(2.0 * c)).sqrt())
    }

    /// f(ρ) by adaptive quadrature of the slope from the anchor.
    pub fn value(&self, rho: f64) -> Result<f64> {
        self.check_feasible(rho)?;
        let c = self.exponent();
        let g = |r: f64| r.powf(c) / (self.c1 - r.powf(2.0 * c)).sqrt();
        Ok(self.f_anchor + self.sign * quadrature::integrate(g, self.anchor, rho, 1e-12)?.value)
    }

    pub fn invariants(&self, rho: f64) -> Result<RevolutionInvariants> {
        let d = self.slope_derivs(rho)?;
        RevolutionInvariants::new(self.n, rho, d[0], d[1])
    }
}

impl Profile for CriticalProfile {
    fn derivs(&self, rho: f64) -> [f64; 4] {
        match (self.value(rho), self.slope_derivs(rho)) {
            (Ok(f), Ok(d)) => [f, d[0], d[1], d[2]],
            _ => [f64::NAN; 4],
        }
    }
}

/// Closed-form profile sampled on `rho_grid`; C2 is the value of f at `anchor`.
pub fn critical_closed_form(
    n: usize,
    p: f64,
    c1: f64,
    c2: f64,
    anchor: f64,
    sign: f64,
    rho_grid: &[f64],
) -> Result<RevolutionProfile> {
    let prof = CriticalProfile::new(n, p, c1, sign, anchor, c2)?;
    if rho_grid.windows(2).any(|w| w[1] <= w[0]) {
        return domain("rho grid must be strictly increasing");
    }
    for &r in rho_grid {
        prof.check_feasible(r)?;
    }
    let c = prof.exponent();
    let g = |r: f64| r.powf(c) / (c1 - r.powf(2.0 * c)).sqrt();
    // accumulate interval integrals outward from the anchor
    let split = rho_grid.partition_point(|&r| r < anchor);
    let mut f = vec![0.0; rho_grid.len()];
    let mut acc = 0.0;
    let mut prev = anchor;
    for i in (0..split).rev() {
        acc += quadrature::integrate(g, prev, rho_grid[i], 1e-12)?.value;
        prev = rho_grid[i];
        f[i] = c2 + prof.sign * acc;
    }
    acc = 0.0;
    prev = anchor;
    for i in split..rho_grid.len() {
        acc += quadrature::integrate(g, prev, rho_grid[i], 1e-12)?.value;
        prev = rho_grid[i];
        f[i] = c2 + prof.sign * acc;
    }
    let mut out = RevolutionProfile {
        n,
        p,
        rho: rho_grid.to_vec(),
        f,
        fprime: Vec::with_capacity(rho_grid.len()),
        fsecond: Vec::with_capacity(rho_grid.len()),
        truncation: Vec::new(),
        degenerate: c == 0.0,
    };
    for &r in rho_grid {
        let d = prof.slope_derivs(r)?;
        out.fprime.push(d[0]);
        out.fsecond.push(d[1]);
    }
    Ok(out)
}

/// True when samples (k1, kn) lie on a single-valued curve kn = φ(k1): nearby k1 never carries distant kn.
pub fn is_single_valued(samples: &[(f64, f64)], tol: f64) -> bool {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    s.windows(2).all(|w| (w[1].0 - w[0].0).abs() > tol || (w[1].1 - w[0].1).abs() <= tol.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevolutionSecondVariation {
    pub value: f64,
    /// ∫{n(p−n)+p(6n−11)+1}k1^{p+2}u² dV.
    pub lower_bound: f64,
    /// −∫(p−n)(p−n+1)k1^{p+2}u² dV, the value for a leafwise harmonic u.
    pub constant_mode: f64,
    pub eigenvalue: f64,
    pub max_criticality_residual: f64,
}

/// Second variation of W_{n,p,n−1} at a critical profile for u = a(ρ)·Y_j, with Y_j as in `catalog::LeafHarmonic`.
pub fn second_variation_revolution(
    n: usize,
    p: f64,
    profile: &dyn Profile,
    j: u32,
    amplitude: Option<&dyn Fn(f64) -> f64>,
    window: (f64, f64),
    nodes: usize,
) -> Result<RevolutionSecondVariation> {
    if n < 2 {
        return domain("hypersurface of revolution needs n >= 2");
    }
    let axis = Axis::gauss_legendre(window.0, window.1, nodes)?;
    let lam = leaf_eigenvalue(n, j);
    let norm = leaf_harmonic_norm_sq(n, j)?;
    let (nf, m) = (n as f64, (n - 1) as f64);
    let lin = m * (5.0 * nf * p - nf - 9.0 * p + 1.0);
    let quad = m * m * (p - nf) * (p - nf + 1.0);
    let bound = nf * (p - nf) + p * (6.0 * nf - 11.0) + 1.0;
    let mut out = RevolutionSecondVariation {
        value: 0.0,
        lower_bound: 0.0,
        constant_mode: 0.0,
        eigenvalue: lam,
        max_criticality_residual: 0.0,
    };
    for (&r, &w) in axis.nodes.iter().zip(&axis.weights) {
        let d = profile.derivs(r);
        let inv = RevolutionInvariants::new(n, r, d[1], d[2])?;
        let k1 = inv.k1;
        let res = inv.criticality_residuals(p).0.abs() / (k1 * k1).max(f64::MIN_POSITIVE);
        out.max_criticality_residual = out.max_criticality_residual.max(res);
        if res > 1e-6 {
            return Err(Error::Precondition(format!(
                "profile is not critical at rho = {r} (relative residual {res:e})"
            )));
        }
        let a = amplitude.map_or(1.0, |f| f(r));
        // ∫ over the parallel of u², with dV_ρ = ρ^{n−1} dω, times the profile arclength factor
        let u2 = a * a * norm * inv.area_density * w;
        let lap_ratio = lam / (r * r);
        let kp = safe_pow(k1, p - 2.0)?;
        out.value += kp / (m * m) * (p * (p - 1.0) * lap_ratio * lap_ratio - lin * k1 * k1 * lap_ratio - quad * k1.powi(4)) * u2;
        let kp2 = safe_pow(k1, p + 2.0)?;
        out.lower_bound += bound * kp2 * u2;
        out.constant_mode -= (p - nf) * (p - nf + 1.0) * kp2 * u2;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ProfileKind;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(a: f64, b: f64, m: usize) -> Vec<f64> {
        (0..m).map(|i| a + (b - a) * i as f64 / (m - 1) as f64).collect()
    }

    #[test]
    fn sphere_areas_and_gamma() {
        assert_relative_eq!(sphere_area(1), 2.0 * PI, epsilon = 1e-14);
        assert_relative_eq!(sphere_area(2), 4.0 * PI, epsilon = 1e-14);
        assert_relative_eq!(sphere_area(3), 2.0 * PI * PI, epsilon = 1e-13);
        assert_relative_eq!(gamma_half(5), 0.75 * PI.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn harmonic_norms_analytic_match_quadrature() {
        for n in 2..=4 {
            let area = sphere_area(n - 1);
            // j = 3 takes the quadrature path; on the circle ∫cos²3φ = π
            if n == 2 {
                assert_relative_eq!(leaf_harmonic_norm_sq(2, 3).unwrap(), PI, epsilon = 1e-12);
            }
            assert_relative_eq!(leaf_harmonic_norm_sq(n, 0).unwrap(), area, epsilon = 1e-14);
        }
        // n = 3, j = 2: π ∫ sin⁵ = π · 16/15
        let v: f64 = PI * 16.0 / 15.0;
        assert_relative_eq!(leaf_harmonic_norm_sq(3, 2).unwrap(), v, epsilon = 1e-13);
    }

    #[test]
    fn curvature_examples() {
        let r = 2.0;
        let hemi = ProfileKind::Hemisphere { radius: r };
        for rho in [0.3, 1.0, 1.7] {
            let d = hemi.derivs(rho);
            let (k1, kn) = principal_curvatures(rho, d[1], d[2]).unwrap();
            assert_relative_eq!(k1.abs(), 1.0 / r, epsilon = 1e-13);
            assert_relative_eq!(k1, kn, epsilon = 1e-13);
        }
        let (_, kn) = principal_curvatures(0.7, 0.4, 0.0).unwrap();
        assert_eq!(kn, 0.0);
        assert!(principal_curvatures(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn fit_constants_examples() {
        let (n, p, rho0) = (2, 3.0, 0.7);
        let a = 2.0 * slope_exponent(n, p);
        assert_relative_eq!(fit_constants(n, p, rho0, 1.0).unwrap(), 2.0 * rho0.powf(a), epsilon = 1e-15);
        assert!(fit_constants(n, p, rho0, 0.0).is_err());
        let steep = fit_constants(n, p, rho0, 1e8).unwrap();
        assert_relative_eq!(steep, rho0.powf(a), max_relative = 1e-15);
        // closed-form slope at C1 = 2ρ^a is one
        let prof = CriticalProfile::new(n, p, 2.0 * rho0.powf(a), 1.0, rho0, 0.0).unwrap();
        assert_relative_eq!(prof.slope(rho0).unwrap(), 1.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn fit_round_trip(rho0 in 0.1f64..2.0, fp0 in -5.0f64..5.0, p in 2u32..8) {
            prop_assume!(fp0.abs() > 1e-3);
            let prof = CriticalProfile::fit(2, p as f64, rho0, 1.0, fp0).unwrap();
            prop_assert!((prof.slope(rho0).unwrap() - fp0).abs() <= 1e-10 * fp0.abs().max(1.0));
        }

        #[test]
        fn closed_form_slope_solves_ode(rho in 0.2f64..0.6, p in 2u32..9, n in 2usize..5) {
            let p = (p as usize).max(n) as f64;
            let prof = CriticalProfile::fit(n, p, 0.4, 1.0, 0.4).unwrap();
            prop_assume!(prof.check_feasible(rho).is_ok());
            let d = prof.slope_derivs(rho).unwrap();
            let c = slope_exponent(n, p);
            let lhs = rho * d[1];
            let rhs = c * d[0] * (1.0 + d[0] * d[0]);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn ode_matches_closed_form_for_fig_family() {
        for p in 2..=8 {
            let p = p as f64;
            let g = grid(0.05, 1.2, 300);
            let ode = critical_ode_solve(2, p, 0.4, 1.0, 0.4, &g, OdeOptions::default()).unwrap();
            let prof = CriticalProfile::fit(2, p, 0.4, 1.0, 0.4).unwrap();
            let tangent = prof.vertical_tangent().unwrap();
            assert_eq!(ode.truncation.len(), 1);
            assert!((ode.truncation[0] - tangent).abs() < 1e-6, "p={p}: {} vs {tangent}", ode.truncation[0]);
            let cf = critical_closed_form(2, p, prof.c1, 1.0, 0.4, 1.0, &ode.rho).unwrap();
            for i in 0..ode.len() {
                assert!((ode.f[i] - cf.f[i]).abs() < 1e-6, "p={p} rho={} {} {}", ode.rho[i], ode.f[i], cf.f[i]);
            }
            assert!(ode.criticality_defect().unwrap() < 1e-8);
            assert!(cf.criticality_defect().unwrap() < 1e-8);
        }
    }

    #[test]
    fn closed_form_and_ode_derivatives_agree() {
        // finite differences of the ODE slope samples against the closed-form curvature
        let g = grid(0.2, 0.6, 401);
        let ode = critical_ode_solve(2, 3.0, 0.4, 1.0, 0.4, &g, OdeOptions::default()).unwrap();
        let prof = CriticalProfile::fit(2, 3.0, 0.4, 1.0, 0.4).unwrap();
        for i in (1..ode.len() - 1).step_by(37) {
            let h = ode.rho[i + 1] - ode.rho[i];
            let fd = (ode.fprime[i + 1] - ode.fprime[i - 1]) / (2.0 * h);
            assert_relative_eq!(fd, prof.slope_derivs(ode.rho[i]).unwrap()[1], max_relative = 1e-4);
        }
    }

    #[test]
    fn n3_p3_has_equal_curvatures_and_h2_over_k_for_surfaces() {
        let g = grid(0.2, 0.6, 50);
        let prof = critical_ode_solve(3, 3.0, 0.4, 0.0, 0.3, &g, OdeOptions::default()).unwrap();
        for (k1, kn) in prof.curvatures().unwrap() {
            assert_relative_eq!(kn, k1, max_relative = 1e-8);
        }
        for p in [2.0, 3.0, 5.0] {
            let prof = critical_ode_solve(2, p, 0.4, 1.0, 0.4, &g, OdeOptions::default()).unwrap();
            for (k1, k2) in prof.curvatures().unwrap() {
                let h = 0.5 * (k1 + k2);
                assert_relative_eq!(h * h / (k1 * k2), p * p / (4.0 * (p - 1.0)), max_relative = 1e-8);
            }
            let samples = prof.curvatures().unwrap();
            assert!(is_single_valued(&samples, 1e-9));
        }
        assert!(!is_single_valued(&[(1.0, 2.0), (1.0, 3.0)], 1e-9));
    }

    #[test]
    fn degenerate_exponent_gives_straight_line() {
        let g = grid(0.5, 2.0, 20);
        let prof = critical_ode_solve(3, 2.0, 1.0, 0.0, 0.7, &g, OdeOptions::default()).unwrap();
        assert!(prof.degenerate);
        for i in 0..prof.len() {
            assert_relative_eq!(prof.f[i], 0.7 * (prof.rho[i] - 1.0), epsilon = 1e-12);
            assert_eq!(prof.fsecond[i], 0.0);
        }
    }

    #[test]
    fn closed_form_rejects_infeasible_points() {
        let prof = CriticalProfile::fit(2, 3.0, 0.4, 1.0, 0.4).unwrap();
        let t = prof.vertical_tangent().unwrap();
        assert!(critical_closed_form(2, 3.0, prof.c1, 1.0, 0.4, 1.0, &[0.3, t + 0.01]).is_err());
        assert!(prof.check_feasible(t + 5e-9).is_err());
        assert_relative_eq!(t, 0.1856f64.powf(0.25), epsilon = 1e-12);
    }

    #[test]
    fn second_variation_signs_n2_p3() {
        let prof = CriticalProfile::fit(2, 3.0, 0.4, 1.0, 0.4).unwrap();
        let w = (0.2, 0.6);
        let c = second_variation_revolution(2, 3.0, &prof, 0, None, w, 64).unwrap();
        assert!(c.value < 0.0);
        assert_relative_eq!(c.value, c.constant_mode, max_relative = 1e-13);
        let one = second_variation_revolution(2, 3.0, &prof, 1, None, w, 64).unwrap();
        assert!(one.value > 0.0 && one.value >= one.lower_bound);
        // p = n: constant mode vanishes
        let prof2 = CriticalProfile::fit(2, 2.0, 0.4, 1.0, 0.4).unwrap();
        let c2 = second_variation_revolution(2, 2.0, &prof2, 0, None, w, 32).unwrap();
        assert!(c2.value.abs() < 1e-14);
    }

    #[test]
    fn second_variation_refuses_non_critical_profiles() {
        let cat = ProfileKind::Catenoid { a: 0.3 };
        let e = second_variation_revolution(2, 3.0, &cat, 1, None, (0.4, 0.8), 16).unwrap_err();
        assert!(matches!(e, Error::Precondition(_)));
    }

    #[test]
    fn bound_fails_where_slope_exceeds_sqrt3() {
        // the integrand of δ² minus the bound is k1 ρ^{-4}(6 − 2x − 8x²)u² with x = y²/(1+y²)
        let prof = CriticalProfile::fit(2, 3.0, 0.4, 1.0, 0.4).unwrap();
        let t = prof.vertical_tangent().unwrap();
        let w = (t - 0.02, t - 1e-4);
        let one = second_variation_revolution(2, 3.0, &prof, 1, None, w, 64).unwrap();
        assert!(one.value > 0.0);
        assert!(one.value < one.lower_bound);
    }
}
