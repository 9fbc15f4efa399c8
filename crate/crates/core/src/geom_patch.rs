//! Pointwise geometry of foliated hypersurface patches on tensor-product grids.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_dual::HyperDual64;

use crate::error::{domain, Error, Result};
use crate::grid::Grid;
use crate::jet::{Immersion, MapJet, Real, ScalarFn, ScalarJet};
use crate::symfunc::{sym_eigenvalues, SymmetricSpectrum};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeSupplier {
    Analytic,
    /// Fourth-order central stencils on the grid samples.
    FiniteDifference,
}

/// Source of immersion jets at grid nodes.
pub trait JetSource: Sync {
    fn n(&self) -> usize;
    fn s(&self) -> usize;
    fn orientation(&self) -> f64;
    fn grid(&self) -> &Grid;
    fn jet(&self, node: usize, order: usize) -> Result<MapJet>;

    fn point_geometry(&self, node: usize) -> Result<PointGeometry> {
        PointGeometry::from_jet(&self.jet(node, 2)?, self.s(), self.orientation())
    }
    fn point_geometry3(&self, node: usize) -> Result<PointGeometry> {
        PointGeometry::from_jet(&self.jet(node, 3)?, self.s(), self.orientation())
    }
}

#[derive(Clone)]
pub struct FoliatedPatch {
    pub n: usize,
    pub s: usize,
    pub immersion: Arc<dyn Immersion>,
    pub supplier: DerivativeSupplier,
    pub grid: Grid,
    pub orientation: f64,
    samples: Option<Arc<Vec<f64>>>,
}

impl std::fmt::Debug for FoliatedPatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FoliatedPatch")
            .field("n", &self.n)
            .field("s", &self.s)
            .field("supplier", &self.supplier)
            .field("nodes", &self.grid.len())
            .field("orientation", &self.orientation)
            .finish()
    }
}

impl FoliatedPatch {
    pub fn new(
        immersion: Arc<dyn Immersion>,
        s: usize,
        grid: Grid,
        orientation: f64,
        supplier: DerivativeSupplier,
    ) -> Result<Self> {
        let n = immersion.dim();
        if grid.dim() != n {
            return domain(format!("grid has {} axes, immersion dimension is {n}", grid.dim()));
        }
        if immersion.ambient_dim() != n + 1 {
            return domain("immersion must map into R^{n+1}");
        }
        if s < 1 || s > n {
            return domain(format!("leaf dimension s={s} outside 1..={n}"));
        }
        if orientation != 1.0 && orientation != -1.0 {
            return domain("normal orientation must be +1 or -1");
        }
        let samples = match supplier {
            DerivativeSupplier::Analytic => None,
            DerivativeSupplier::FiniteDifference => {
                let mut v = Vec::with_capacity(grid.len() * (n + 1));
                for k in 0..grid.len() {
                    v.extend(immersion.point(&grid.point(k)));
                }
                Some(Arc::new(v))
            }
        };
        Ok(Self { n, s, immersion, supplier, grid, orientation, samples })
    }

    pub fn with_supplier(&self, supplier: DerivativeSupplier) -> Result<Self> {
        Self::new(self.immersion.clone(), self.s, self.grid.clone(), self.orientation, supplier)
    }

    pub fn with_grid(&self, grid: Grid) -> Result<Self> {
        Self::new(self.immersion.clone(), self.s, grid, self.orientation, self.supplier)
    }

    /// Geometry at an arbitrary parameter point through the analytic immersion.
    pub fn geometry_at(&self, x: &[f64], order: usize) -> Result<PointGeometry> {
        PointGeometry::from_jet(&self.immersion.jet(x, order), self.s, self.orientation)
    }

    /// Every node whose stencils of the given depth fit along the listed axes.
    pub fn interior_nodes(&self, axes: &[usize], depth: usize) -> Vec<usize> {
        (0..self.grid.len()).filter(|&k| self.grid.interior(k, axes, depth)).collect()
    }

    pub fn leaf_axes(&self) -> Vec<usize> {
        (0..self.s).collect()
    }

    fn fd_jet(&self, samples: &[f64], node: usize, order: usize) -> Result<MapJet> {
        let n = self.n;
        let m = n + 1;
        let g = &self.grid;
        let mut jet = MapJet::zeros(n, m, order);
        jet.v = DVector::from_column_slice(&samples[node * m..node * m + m]);
        for c in 0..m {
            for i in 0..n {
                jet.d1[i][c] = g.d1(samples, m, c, node, i)?;
            }
            if order >= 2 {
                for i in 0..n {
                    for j in 0..n {
                        jet.d2[i * n + j][c] = if j < i {
                            jet.d2[j * n + i][c]
                        } else {
                            g.d2(samples, m, c, node, i, j)?
                        };
                    }
                }
            }
            if order >= 3 {
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let mut idx = [i, j, k];
                            idx.sort_unstable();
                            // differentiate along the axis that occurs most, inner pair by stencils
                            jet.d3[(i * n + j) * n + k][c] = g.d3(samples, m, c, node, idx[0], idx[1], idx[2])?;
                        }
                    }
                }
            }
        }
        Ok(jet)
    }

    /// Δ_F of a field sampled on the grid, derivatives by leafwise stencils.
    pub fn leaf_laplacian_field(&self, values: &[f64], node: usize) -> Result<f64> {
        let geo = self.point_geometry(node)?;
        let jet = fd_scalar_jet(&self.grid, values, node, 2, &self.leaf_axes())?;
        Ok(geo.leaf_laplacian(&jet))
    }

    /// Samples a scalar function on the grid.
    pub fn sample(&self, f: &dyn ScalarFn) -> Vec<f64> {
        (0..self.grid.len()).map(|k| f.value(&self.grid.point(k))).collect()
    }
}

impl JetSource for FoliatedPatch {
    fn n(&self) -> usize {
        self.n
    }
    fn s(&self) -> usize {
        self.s
    }
    fn orientation(&self) -> f64 {
        self.orientation
    }
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn jet(&self, node: usize, order: usize) -> Result<MapJet> {
        match &self.samples {
            None => Ok(self.immersion.jet(&self.grid.point(node), order)),
            Some(s) => self.fd_jet(s, node, order),
        }
    }
}

/// Scalar jet from grid samples; derivatives only along `axes`, zero elsewhere.
pub fn fd_scalar_jet(grid: &Grid, values: &[f64], node: usize, order: usize, axes: &[usize]) -> Result<ScalarJet> {
    let n = grid.dim();
    let mut jet = ScalarJet::zeros(n, order.min(2));
    jet.v = values[node];
    for &a in axes {
        jet.d1[a] = grid.d1(values, 1, 0, node, a)?;
    }
    if order >= 2 {
        for &a in axes {
            for &b in axes {
                if b >= a {
                    let v = grid.d2(values, 1, 0, node, a, b)?;
                    jet.d2[(a, b)] = v;
                    jet.d2[(b, a)] = v;
                }
            }
        }
    }
    Ok(jet)
}

/// Third-order data: derivatives of h and of s·H_F.
#[derive(Debug, Clone)]
pub struct ThirdOrder {
    /// ∂_k h_ij, indexed [k].
    pub dh: Vec<DMatrix<f64>>,
    /// ∇_k h_ij with the Levi-Civita connection of g, indexed [k].
    pub cov_dh: Vec<DMatrix<f64>>,
    /// ∂_k (s H_F).
    pub d_s_hf: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PointGeometry {
    pub n: usize,
    pub s: usize,
    pub position: DVector<f64>,
    pub r1: Vec<DVector<f64>>,
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub sqrt_det_g: f64,
    /// Γ^k_ij, indexed [k][(i, j)].
    pub gamma: Vec<DMatrix<f64>>,
    /// ∂_k g_ij, indexed [k].
    pub dg: Vec<DMatrix<f64>>,
    pub normal: DVector<f64>,
    pub h: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Columns: g-orthonormal frame, first s tangent to the leaf.
    pub frame: DMatrix<f64>,
    pub h_frame: DMatrix<f64>,
    /// Leaf block of h in the frame (A_F in an orthonormal leaf frame).
    pub h_f: DMatrix<f64>,
    /// Mixed index block h(e_a, f_α) in the frame.
    pub h_mix: DMatrix<f64>,
    pub h_fperp: DMatrix<f64>,
    pub a_f: DMatrix<f64>,
    pub h_f_coords: DMatrix<f64>,
    /// Symmetrized mixed part ½(h(P·,·) + h(·,P·)) − h(P·,P·) in coordinates.
    pub h_mix_sym: DMatrix<f64>,
    pub h_fperp_coords: DMatrix<f64>,
    pub h_mix_sq: DMatrix<f64>,
    pub leaf_g: DMatrix<f64>,
    pub leaf_g_inv: DMatrix<f64>,
    /// Leaf Christoffels γ^k_ij for k, i, j < s.
    pub leaf_gamma: Vec<DMatrix<f64>>,
    pub leaf_curvatures: Vec<f64>,
    /// σ^F_0..σ^F_s.
    pub sigma: Vec<f64>,
    /// τ^F_1..τ^F_{s+1}.
    pub tau: Vec<f64>,
    pub mean_curvature: f64,
    pub h_f_mean: f64,
    pub norm_h_sq: f64,
    pub norm_hf_sq: f64,
    pub norm_hmix_sq: f64,
    pub third: Option<ThirdOrder>,
}

fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}

fn generalized_cross(r1: &[DVector<f64>]) -> DVector<f64> {
    let n = r1.len();
    let m = n + 1;
    let mut out = DVector::zeros(m);
    for a in 0..m {
        let mut sub = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut c = 0;
            for b in 0..m {
                if b != a {
                    sub[(i, c)] = r1[i][b];
                    c += 1;
                }
            }
        }
        let sign = if (n + a) % 2 == 0 { 1.0 } else { -1.0 };
        out[a] = sign * sub.determinant();
    }
    out
}

fn block(m: &DMatrix<f64>, r0: usize, c0: usize, nr: usize, nc: usize) -> DMatrix<f64> {
    m.view((r0, c0), (nr, nc)).into_owned()
}

fn fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

impl PointGeometry {
    pub fn from_jet(jet: &MapJet, s: usize, orientation: f64) -> Result<Self> {
        let n = jet.n;
        if jet.order < 2 {
            return domain("point geometry needs a 2-jet");
        }
        if s < 1 || s > n {
            return domain(format!("leaf dimension s={s} outside 1..={n}"));
        }
        let r1: Vec<DVector<f64>> = jet.d1.clone();
        let g = DMatrix::from_fn(n, n, |i, j| dot(&r1[i], &r1[j]));
        let det = g.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::SingularImmersion(format!("metric determinant {det:e}")));
        }
        let eig = g.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo < 1e-13 * hi {
            return Err(Error::SingularImmersion(format!("metric condition {:e} is degenerate", lo / hi)));
        }
        let g_inv = g.clone().try_inverse().ok_or_else(|| Error::SingularImmersion("metric not invertible".into()))?;
        let mut normal = generalized_cross(&r1);
        let nn = normal.norm();
        if nn == 0.0 {
            return Err(Error::SingularImmersion("tangent vectors are dependent".into()));
        }
        normal *= orientation / nn;

        let rl_rij: Vec<DMatrix<f64>> =
            (0..n).map(|l| DMatrix::from_fn(n, n, |i, j| dot(jet.r2(i, j), &r1[l]))).collect();
        let gamma: Vec<DMatrix<f64>> = (0..n)
            .map(|k| {
                let mut m = DMatrix::zeros(n, n);
                for l in 0..n {
                    m += &rl_rij[l] * g_inv[(k, l)];
                }
                m
            })
            .collect();
        let dg: Vec<DMatrix<f64>> = (0..n)
            .map(|k| DMatrix::from_fn(n, n, |a, b| dot(jet.r2(a, k), &r1[b]) + dot(&r1[a], jet.r2(b, k))))
            .collect();
        let h = DMatrix::from_fn(n, n, |i, j| dot(jet.r2(i, j), &normal));
        let h = (&h + h.transpose()) * 0.5;
        let a = &g_inv * &h;

        let leaf_g = block(&g, 0, 0, s, s);
        let leaf_g_inv = leaf_g.clone().try_inverse().ok_or_else(|| Error::SingularImmersion("leaf metric".into()))?;
        let mut p = DMatrix::zeros(n, n);
        {
            let gc = block(&g, 0, 0, s, n);
            let top = &leaf_g_inv * gc;
            p.view_mut((0, 0), (s, n)).copy_from(&top);
        }
        let q = DMatrix::identity(n, n) - &p;

        let frame = adapted_frame(&g, s)?;
        let h_frame = frame.transpose() * &h * &frame;
        let t = n - s;
        let h_f = block(&h_frame, 0, 0, s, s);
        let h_mix = block(&h_frame, 0, s, s, t);
        let h_fperp = block(&h_frame, s, s, t, t);
        let a_f = &p * &a * &p;
        let h_f_coords = p.transpose() * &h * &p;
        let h_mix_sym = (p.transpose() * &h + &h * &p) * 0.5 - &h_f_coords;
        let h_fperp_coords = q.transpose() * &h * &q;
        let mut sq_frame = DMatrix::zeros(n, n);
        if t > 0 {
            sq_frame.view_mut((0, 0), (s, s)).copy_from(&(&h_mix * h_mix.transpose()));
            sq_frame.view_mut((s, s), (t, t)).copy_from(&(h_mix.transpose() * &h_mix));
        }
        let gof = &g * &frame;
        let h_mix_sq = &gof * sq_frame * gof.transpose();

        let leaf_gamma: Vec<DMatrix<f64>> = (0..s)
            .map(|k| {
                let mut m = DMatrix::zeros(s, s);
                for l in 0..s {
                    m += block(&rl_rij[l], 0, 0, s, s) * leaf_g_inv[(k, l)];
                }
                m
            })
            .collect();

        let spec = SymmetricSpectrum::new(sym_eigenvalues(&h_f))?;
        let sigma = spec.elementary_symmetric();
        let tau = spec.power_sums(s + 1)?;
        let norm_h_sq = fro(&h_frame, &h_frame);
        let norm_hf_sq = fro(&h_f, &h_f);
        let norm_hmix_sq = fro(&h_mix, &h_mix);

        let third = if jet.order >= 3 {
            let n_k: Vec<DVector<f64>> = (0..n)
                .map(|k| {
                    let mut v = DVector::zeros(n + 1);
                    for m in 0..n {
                        v -= &r1[m] * a[(m, k)];
                    }
                    v
                })
                .collect();
            let dh: Vec<DMatrix<f64>> = (0..n)
                .map(|k| {
                    DMatrix::from_fn(n, n, |i, j| dot(jet.r3(i, j, k), &normal) + dot(jet.r2(i, j), &n_k[k]))
                })
                .collect();
            let cov_dh: Vec<DMatrix<f64>> = (0..n)
                .map(|k| {
                    DMatrix::from_fn(n, n, |i, j| {
                        let mut v = dh[k][(i, j)];
                        for m in 0..n {
                            v -= gamma[m][(k, i)] * h[(m, j)] + gamma[m][(k, j)] * h[(i, m)];
                        }
                        v
                    })
                })
                .collect();
            let hss = block(&h, 0, 0, s, s);
            let d_s_hf = (0..n)
                .map(|k| {
                    let dgs = block(&dg[k], 0, 0, s, s);
                    let dhs = block(&dh[k], 0, 0, s, s);
                    (&leaf_g_inv * dhs - &leaf_g_inv * dgs * &leaf_g_inv * &hss).trace()
                })
                .collect();
            Some(ThirdOrder { dh, cov_dh, d_s_hf })
        } else {
            None
        };

        Ok(Self {
            n,
            s,
            position: jet.v.clone(),
            r1,
            sqrt_det_g: det.sqrt(),
            g,
            g_inv,
            gamma,
            dg,
            normal,
            mean_curvature: a.trace() / n as f64,
            h_f_mean: sigma[1] / s as f64,
            h,
            a,
            p,
            q,
            frame,
            h_frame,
            h_f,
            h_mix,
            h_fperp,
            a_f,
            h_f_coords,
            h_mix_sym,
            h_fperp_coords,
            h_mix_sq,
            leaf_g,
            leaf_g_inv,
            leaf_gamma,
            leaf_curvatures: spec.eigs().to_vec(),
            sigma,
            tau,
            norm_h_sq,
            norm_hf_sq,
            norm_hmix_sq,
            third,
        })
    }

    pub fn third(&self) -> Result<&ThirdOrder> {
        self.third.as_ref().ok_or_else(|| Error::Domain("third-order data requires a 3-jet".into()))
    }

    pub fn k_f(&self) -> f64 {
        if self.s >= 2 {
            self.sigma[2]
        } else {
            0.0
        }
    }

    /// Frame components O^T X O of a (0,2) tensor.
    pub fn to_frame(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.frame.transpose() * x * &self.frame
    }

    /// ⟨B, C⟩_g for (0,2) tensors in coordinates.
    pub fn inner(&self, b: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
        (&self.g_inv * b * &self.g_inv * c.transpose()).trace()
    }

    /// Hess_u = u_ij − Γ^k_ij u_k.
    pub fn hessian(&self, u: &ScalarJet) -> DMatrix<f64> {
        let mut hs = u.d2.clone();
        for k in 0..self.n {
            hs -= &self.gamma[k] * u.d1[k];
        }
        hs
    }

    /// Intrinsic leaf Hessian (s×s) with the leaf connection.
    pub fn leaf_hessian(&self, u: &ScalarJet) -> DMatrix<f64> {
        let s = self.s;
        let mut hs = block(&u.d2, 0, 0, s, s);
        for k in 0..s {
            hs -= &self.leaf_gamma[k] * u.d1[k];
        }
        hs
    }

    pub fn laplacian(&self, u: &ScalarJet) -> f64 {
        (&self.g_inv * self.hessian(u)).trace()
    }

    /// Laplace–Beltrami operator of the leaf through the point.
    pub fn leaf_laplacian(&self, u: &ScalarJet) -> f64 {
        (&self.leaf_g_inv * self.leaf_hessian(u)).trace()
    }

    /// Leaf trace of the ambient Hessian, tr_F Hess_u.
    pub fn leaf_trace_hessian(&self, u: &ScalarJet) -> f64 {
        let s = self.s;
        (&self.leaf_g_inv * block(&self.hessian(u), 0, 0, s, s)).trace()
    }

    pub fn hessians(&self, u: &ScalarJet) -> Hessians {
        let full = self.hessian(u);
        let fr = self.to_frame(&full);
        let s = self.s;
        let t = self.n - s;
        let linv = leaf_frame(&self.leaf_g);
        let leaf = self.leaf_hessian(u);
        Hessians {
            leaf_frame: linv.transpose() * &leaf * &linv,
            leaf_restricted_frame: block(&fr, 0, 0, s, s),
            mix_frame: block(&fr, 0, s, s, t),
            full_frame: fr,
            full,
            leaf,
        }
    }

    /// Leaf gradient ∇^F u as coordinate components along the leaf axes.
    pub fn leaf_gradient(&self, u: &ScalarJet) -> DVector<f64> {
        let du = DVector::from_column_slice(&u.d1[..self.s]);
        &self.leaf_g_inv * du
    }

    pub fn leaf_grad_dot(&self, u: &ScalarJet, f: &ScalarJet) -> f64 {
        let du = DVector::from_column_slice(&u.d1[..self.s]);
        let df = DVector::from_column_slice(&f.d1[..self.s]);
        du.dot(&(&self.leaf_g_inv * df))
    }

    pub fn grad_dot(&self, u: &ScalarJet, f: &ScalarJet) -> f64 {
        let du = DVector::from_column_slice(&u.d1);
        let df = DVector::from_column_slice(&f.d1);
        du.dot(&(&self.g_inv * df))
    }

    /// h(∇^F u, ∇^F f).
    pub fn h_leaf_grads(&self, u: &ScalarJet, f: &ScalarJet) -> f64 {
        let s = self.s;
        let gu = self.leaf_gradient(u);
        let gf = self.leaf_gradient(f);
        gu.dot(&(block(&self.h, 0, 0, s, s) * gf))
    }

    /// Projector divergence data and the normal-distribution mean curvature.
    pub fn div_projector(&self) -> DivProjector {
        let n = self.n;
        let s = self.s;
        // ∂_k P^i_b for i < s
        let dp: Vec<DMatrix<f64>> = (0..n)
            .map(|k| {
                let dgs = block(&self.dg[k], 0, 0, s, s);
                let dginv = -(&self.leaf_g_inv * dgs * &self.leaf_g_inv);
                let gc = block(&self.g, 0, 0, s, n);
                let dgc = block(&self.dg[k], 0, 0, s, n);
                let top = dginv * gc + &self.leaf_g_inv * dgc;
                let mut m = DMatrix::zeros(n, n);
                m.view_mut((0, 0), (s, n)).copy_from(&top);
                m
            })
            .collect();
        let p = &self.p;
        let div_p: DVector<f64> = DVector::from_fn(n, |b, _| {
            let mut v = 0.0;
            for a in 0..n {
                v += dp[a][(a, b)];
                for c in 0..n {
                    v += self.gamma[a][(a, c)] * p[(c, b)] - p[(a, c)] * self.gamma[c][(a, b)];
                }
            }
            v
        });
        let div_p_on_p = p.transpose() * &div_p;
        let t = n - s;
        let mut hperp = DVector::zeros(n);
        if t > 0 {
            // (n−s) H^⊥ = S^{αβ} P ∇_{V_α} V_β with V_β = Q ∂_β
            let qm = &self.q;
            let sm = block(&(qm.transpose() * &self.g * qm), s, s, t, t);
            let s_inv = sm.try_inverse().unwrap_or_else(|| DMatrix::zeros(t, t));
            for al in 0..t {
                for be in 0..t {
                    let va = qm.column(s + al).into_owned();
                    let vb = qm.column(s + be).into_owned();
                    let mut cov = DVector::zeros(n);
                    for a in 0..n {
                        let mut v = 0.0;
                        for k in 0..n {
                            v += va[k] * (-dp[k][(a, s + be)]);
                            for c in 0..n {
                                v += va[k] * self.gamma[a][(k, c)] * vb[c];
                            }
                        }
                        cov[a] = v;
                    }
                    hperp += (p * cov) * s_inv[(al, be)];
                }
            }
        }
        let gh = &self.g * &hperp;
        let frame_vals: Vec<f64> = (0..n).map(|c| self.frame.column(c).dot(&div_p_on_p)).collect();
        let residual = (0..n)
            .map(|c| (frame_vals[c] + self.frame.column(c).dot(&gh)).abs())
            .fold(0.0, f64::max);
        DivProjector { div_p_on_leaf_frame: frame_vals, h_perp_times_codim: hperp, identity_residual: residual }
    }
}

/// Lower-triangular inverse transpose L^{-T} with G = L L^T; its columns are a g-orthonormal leaf frame.
fn leaf_frame(leaf_g: &DMatrix<f64>) -> DMatrix<f64> {
    let l = leaf_g.clone().cholesky().expect("leaf metric positive definite").l();
    l.try_inverse().expect("triangular inverse").transpose()
}

/// Orthonormal frame [E | F]: E spans the leaf, F spans its g-orthogonal complement.
fn adapted_frame(g: &DMatrix<f64>, s: usize) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    let t = n - s;
    let gl = block(g, 0, 0, s, s);
    let e = leaf_frame(&gl);
    let mut o = DMatrix::zeros(n, n);
    o.view_mut((0, 0), (s, s)).copy_from(&e);
    if t > 0 {
        let c = block(g, 0, s, s, t);
        let d = block(g, s, s, t, t);
        let gl_inv = gl.try_inverse().ok_or_else(|| Error::SingularImmersion("leaf metric".into()))?;
        let schur = &d - c.transpose() * &gl_inv * &c;
        let ls = schur
            .cholesky()
            .ok_or_else(|| Error::SingularImmersion("transverse Schur complement not positive".into()))?
            .l();
        let ls_inv_t = ls.try_inverse().expect("triangular inverse").transpose();
        let mut basis = DMatrix::zeros(n, t);
        basis.view_mut((0, 0), (s, t)).copy_from(&(-(&gl_inv * &c)));
        basis.view_mut((s, 0), (t, t)).copy_from(&DMatrix::identity(t, t));
        o.view_mut((0, s), (n, t)).copy_from(&(basis * ls_inv_t));
    }
    Ok(o)
}

#[derive(Debug, Clone)]
pub struct Hessians {
    pub full: DMatrix<f64>,
    pub full_frame: DMatrix<f64>,
    /// Intrinsic leaf Hessian in coordinates (s×s).
    pub leaf: DMatrix<f64>,
    /// Intrinsic leaf Hessian in the orthonormal leaf frame.
    pub leaf_frame: DMatrix<f64>,
    /// Leaf block of the ambient Hessian in the frame.
    pub leaf_restricted_frame: DMatrix<f64>,
    /// Mixed index block of the ambient Hessian in the frame.
    pub mix_frame: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct DivProjector {
    /// (div P)(P e_c) for the frame vectors e_c.
    pub div_p_on_leaf_frame: Vec<f64>,
    /// (n − s) H^⊥ in coordinates.
    pub h_perp_times_codim: DVector<f64>,
    /// max_c |(div P)(P e_c) + ⟨e_c, (n−s)H^⊥⟩|.
    pub identity_residual: f64,
}

impl DivProjector {
    pub fn norm(&self) -> f64 {
        self.div_p_on_leaf_frame.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Local model of the metric quantities on the first `s` coordinates, from a 3-jet.
struct LocalMetric<D> {
    g_inv: Vec<Vec<D>>,
    sqrt_g: D,
    /// γ^k_ij
    gamma: Vec<Vec<Vec<D>>>,
}

fn local_metric<D: Real>(jet: &MapJet, dx: &[D], s: usize) -> LocalMetric<D> {
    let n = jet.n;
    let m = jet.m;
    let zero = D::from(0.0);
    // r_i and r_ij as Taylor models
    let r1: Vec<Vec<D>> = (0..s)
        .map(|i| {
            (0..m)
                .map(|c| {
                    let mut v = D::from(jet.r1(i)[c]);
                    for j in 0..n {
                        v += dx[j] * jet.r2(i, j)[c];
                        if jet.order >= 3 {
                            for k in 0..n {
                                v += dx[j] * dx[k] * (0.5 * jet.r3(i, j, k)[c]);
                            }
                        }
                    }
                    v
                })
                .collect()
        })
        .collect();
    let r2: Vec<Vec<Vec<D>>> = (0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    (0..m)
                        .map(|c| {
                            let mut v = D::from(jet.r2(i, j)[c]);
                            if jet.order >= 3 {
                                for k in 0..n {
                                    v += dx[k] * jet.r3(i, j, k)[c];
                                }
                            }
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let dotd = |a: &[D], b: &[D]| a.iter().zip(b).fold(zero, |acc, (&x, &y)| acc + x * y);
    let g: Vec<Vec<D>> = (0..s).map(|i| (0..s).map(|j| dotd(&r1[i], &r1[j])).collect()).collect();
    let (g_inv, det) = invert_spd(&g);
    let sqrt_g = det.sqrt();
    let low: Vec<Vec<Vec<D>>> = (0..s)
        .map(|l| (0..s).map(|i| (0..s).map(|j| dotd(&r2[i][j], &r1[l])).collect()).collect())
        .collect();
    let gamma = (0..s)
        .map(|k| {
            (0..s)
                .map(|i| {
                    (0..s)
                        .map(|j| (0..s).fold(zero, |acc, l| acc + g_inv[k][l] * low[l][i][j]))
                        .collect()
                })
                .collect()
        })
        .collect();
    LocalMetric { g_inv, sqrt_g, gamma }
}

/// Gauss–Jordan inverse and determinant of a small symmetric positive definite matrix.
fn invert_spd<D: Real>(a: &[Vec<D>]) -> (Vec<Vec<D>>, D) {
    let n = a.len();
    let mut m: Vec<Vec<D>> = a.to_vec();
    let mut inv: Vec<Vec<D>> =
        (0..n).map(|i| (0..n).map(|j| D::from(if i == j { 1.0 } else { 0.0 })).collect()).collect();
    let mut det = D::from(1.0);
    for c in 0..n {
        let piv = m[c][c];
        det *= piv;
        let pinv = piv.recip();
        for j in 0..n {
            m[c][j] *= pinv;
            inv[c][j] *= pinv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                for j in 0..n {
                    let mv = m[c][j];
                    let iv = inv[c][j];
                    m[r][j] -= f * mv;
                    inv[r][j] -= f * iv;
                }
            }
        }
    }
    (inv, det)
}

fn pair_seed(n: usize, i: usize, j: usize) -> Vec<HyperDual64> {
    (0..n)
        .map(|a| {
            let mut d = HyperDual64::from_re(0.0);
            if a == i {
                d.eps1 = 1.0;
            }
            if a == j {
                d.eps2 = 1.0;
            }
            d
        })
        .collect()
}

/// Double covariant divergence div div B over the first `s` coordinates, B_ij given by jets
/// (row-major s×s). With s = n this is (∇*)²B on M; with s < n it is the leafwise (∇^{F*})²B.
pub fn double_divergence(jet: &MapJet, b: &[ScalarJet], s: usize) -> Result<f64> {
    if jet.order < 3 {
        return domain("double divergence needs a 3-jet of the immersion");
    }
    if b.len() != s * s {
        return domain("tensor must have s*s components");
    }
    let n = jet.n;
    // φ^{kl} = √G B^{kl},  ψ^k = √G γ^k_lm B^{ml}
    let eval = |dx: &[HyperDual64]| -> (Vec<Vec<HyperDual64>>, Vec<HyperDual64>) {
        let lm = local_metric(jet, dx, s);
        let bl: Vec<Vec<HyperDual64>> =
            (0..s).map(|i| (0..s).map(|j| b[i * s + j].taylor(dx)).collect()).collect();
        let zero = HyperDual64::from_re(0.0);
        let raised: Vec<Vec<HyperDual64>> = (0..s)
            .map(|k| {
                (0..s)
                    .map(|l| {
                        let mut v = zero;
                        for i in 0..s {
                            for j in 0..s {
                                v += lm.g_inv[k][i] * lm.g_inv[l][j] * bl[i][j];
                            }
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        let phi = raised.iter().map(|row| row.iter().map(|&v| v * lm.sqrt_g).collect()).collect();
        let psi = (0..s)
            .map(|k| {
                let mut v = zero;
                for l in 0..s {
                    for m in 0..s {
                        v += lm.gamma[k][l][m] * raised[m][l];
                    }
                }
                v * lm.sqrt_g
            })
            .collect();
        (phi, psi)
    };
    let mut acc = 0.0;
    for k in 0..s {
        for l in 0..s {
            let (phi, psi) = eval(&pair_seed(n, k, l));
            acc += phi[k][l].eps1eps2;
            if k == l {
                acc += psi[k].eps1;
            }
        }
    }
    let sqrt_g = local_metric(jet, &vec![0.0f64; n], s).sqrt_g;
    Ok(acc / sqrt_g)
}

/// Divergence over the first `s` coordinates of the vector field G^{kl} ω_l; −div is the adjoint ∇^{F*}ω.
pub fn covector_divergence(jet: &MapJet, omega: &[ScalarJet], s: usize) -> Result<f64> {
    if omega.len() != s {
        return domain("1-form must have s components");
    }
    let n = jet.n;
    let mut acc = 0.0;
    for k in 0..s {
        let dx = pair_seed(n, k, k);
        let lm = local_metric(jet, &dx, s);
        let mut v = HyperDual64::from_re(0.0);
        for l in 0..s {
            v += lm.g_inv[k][l] * omega[l].taylor(&dx);
        }
        acc += (v * lm.sqrt_g).eps1;
    }
    let sqrt_g = local_metric(jet, &vec![0.0f64; n], s).sqrt_g;
    Ok(acc / sqrt_g)
}

/// Leafwise double divergence of a tensor sampled on the grid (components row-major, stride s²).
pub fn fstar_squared_fd(patch: &FoliatedPatch, b: &[f64], node: usize) -> Result<f64> {
    let s = patch.s;
    let ss = s * s;
    let leaf_axes = patch.leaf_axes();
    let mut comps = Vec::with_capacity(ss);
    for c in 0..ss {
        let vals: Vec<f64> = (0..patch.grid.len()).map(|k| b[k * ss + c]).collect();
        comps.push(fd_scalar_jet(&patch.grid, &vals, node, 2, &leaf_axes)?);
    }
    double_divergence(&patch.jet(node, 3)?, &comps, s)
}

/// Leafwise double divergence of a tensor field given by exact component functions.
pub fn fstar_squared(patch: &FoliatedPatch, b: &[Arc<dyn ScalarFn>], node: usize) -> Result<f64> {
    let x = patch.grid.point(node);
    let comps: Vec<ScalarJet> = b.iter().map(|f| f.jet(&x, 2)).collect();
    double_divergence(&patch.jet(node, 3)?, &comps, patch.s)
}

/// 2-jet of r + t·u·N at a point, from the 3-jet of r (through `geo`) and the 2-jet of u.
pub fn varied_jet(jet: &MapJet, geo: &PointGeometry, u: &ScalarJet, t: f64) -> Result<MapJet> {
    let third = geo.third()?;
    let n = jet.n;
    let nv = &geo.normal;
    let a = &geo.a;
    let dn: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut v = DVector::zeros(jet.m);
            for m in 0..n {
                v -= jet.r1(m) * a[(m, i)];
            }
            v
        })
        .collect();
    let mut out = MapJet::zeros(n, jet.m, 2);
    out.v = &jet.v + nv * (t * u.v);
    for i in 0..n {
        out.d1[i] = jet.r1(i) + (nv * u.d1[i] + &dn[i] * u.v) * t;
    }
    for j in 0..n {
        // ∂_j A = g⁻¹(∂_j h − ∂_j g A)
        let da = &geo.g_inv * (&third.dh[j] - &geo.dg[j] * a);
        for i in 0..n {
            let mut nij = DVector::zeros(jet.m);
            for m in 0..n {
                nij -= jet.r1(m) * da[(m, i)] + jet.r2(m, j) * a[(m, i)];
            }
            let var = nv * u.d2[(i, j)] + &dn[j] * u.d1[i] + &dn[i] * u.d1[j] + nij * u.v;
            out.d2[i * n + j] = jet.r2(i, j) + var * t;
        }
    }
    Ok(out)
}

/// Base jets and geometry at every node, reused for the family r + t·u·N.
pub struct VariationBase {
    pub s: usize,
    pub orientation: f64,
    pub jets: Vec<MapJet>,
    pub geos: Vec<PointGeometry>,
    pub u: Vec<ScalarJet>,
}

impl VariationBase {
    pub fn new(patch: &FoliatedPatch, u: &dyn ScalarFn) -> Result<Self> {
        let mut jets = Vec::with_capacity(patch.grid.len());
        let mut geos = Vec::with_capacity(patch.grid.len());
        let mut us = Vec::with_capacity(patch.grid.len());
        for k in 0..patch.grid.len() {
            let jet = patch.jet(k, 3)?;
            geos.push(PointGeometry::from_jet(&jet, patch.s, patch.orientation)?);
            jets.push(jet);
            us.push(u.jet(&patch.grid.point(k), 2));
        }
        Ok(Self { s: patch.s, orientation: patch.orientation, jets, geos, u: us })
    }

    pub fn len(&self) -> usize {
        self.jets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jets.is_empty()
    }

    /// Geometry of the varied immersion at node k; the normal keeps the orientation of the base.
    pub fn geometry(&self, k: usize, t: f64) -> Result<PointGeometry> {
        if t == 0.0 {
            return Ok(self.geos[k].clone());
        }
        let jet = varied_jet(&self.jets[k], &self.geos[k], &self.u[k], t)?;
        let mut geo = PointGeometry::from_jet(&jet, self.s, self.orientation)?;
        if geo.normal.dot(&self.geos[k].normal) < 0.0 {
            geo = PointGeometry::from_jet(&jet, self.s, -self.orientation)?;
        }
        Ok(geo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use approx::assert_relative_eq;

    #[test]
    fn unit_sphere_inward() {
        for n in 2..=4 {
            let patch = catalog::sphere(n, 1.0, n, &vec![8; n]).unwrap();
            let mid: Vec<usize> = (0..n).map(|i| if i == 0 { 1 } else { 4 }).collect();
            let geo = patch.point_geometry(patch.grid.index(&mid)).unwrap();
            assert!((&geo.a - DMatrix::identity(n, n)).amax() < 1e-12);
            assert_relative_eq!(geo.mean_curvature, 1.0, epsilon = 1e-12);
            assert_relative_eq!(geo.norm_h_sq, n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn flat_plane() {
        let patch = catalog::plane(&[6, 6]).unwrap();
        let geo = patch.point_geometry(7).unwrap();
        assert!(geo.h.amax() < 1e-15);
        assert_eq!(geo.mean_curvature, 0.0);
    }

    #[test]
    fn cylinder_circle_foliation() {
        let r = 1.7;
        let patch = catalog::cylinder(r, 2.0, &[16, 8]).unwrap();
        let geo = patch.point_geometry(20).unwrap();
        assert_relative_eq!(geo.h_f[(0, 0)], 1.0 / r, epsilon = 1e-12);
        assert!(geo.h_fperp[(0, 0)].abs() < 1e-12);
        assert!(geo.norm_hmix_sq < 1e-24);
        assert_relative_eq!(geo.mean_curvature, 0.5 / r, epsilon = 1e-12);
    }

    #[test]
    fn foliated_invariants_on_bumpy_patches() {
        for patch in [catalog::bumpy_torus(&[16, 16], 0.3).unwrap(), catalog::sheared_torus3(&[8, 8, 8], 1.0).unwrap()] {
            for node in (0..patch.grid.len()).step_by(17) {
                let geo = patch.point_geometry(node).unwrap();
                let n = geo.n;
                assert!((&geo.p * &geo.p - &geo.p).amax() < 1e-10);
                let gp = &geo.g * &geo.p;
                assert!((&gp - gp.transpose()).amax() < 1e-10);
                assert!((&geo.a_f - &geo.p * &geo.a * &geo.p).amax() < 1e-10);
                let ortho = geo.frame.transpose() * &geo.g * &geo.frame;
                assert!((ortho - DMatrix::identity(n, n)).amax() < 1e-10);
                assert!(geo.inner(&geo.h_f_coords, &geo.h_mix_sym).abs() < 1e-9);
                let recon = &geo.h_f_coords + &geo.h_mix_sym * 2.0 + &geo.h_fperp_coords;
                assert!((recon - &geo.h).amax() < 1e-10);
                assert_relative_eq!(geo.normal.norm(), 1.0, epsilon = 1e-13);
                for r in &geo.r1 {
                    assert!(r.dot(&geo.normal).abs() < 1e-12);
                }
                // index-form ‖h_mix‖² is twice the norm of the symmetrized tensor
                assert_relative_eq!(geo.norm_hmix_sq, 2.0 * geo.inner(&geo.h_mix_sym, &geo.h_mix_sym), epsilon = 1e-10, max_relative = 1e-9);
                // A_F in coordinates and in the frame share the spectrum
                let eigs = crate::symfunc::sym_eigenvalues(&geo.h_f);
                let tr: f64 = eigs.iter().sum();
                assert_relative_eq!(geo.a_f.trace(), tr, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn laplacian_is_trace_of_hessian_and_leaf_examples() {
        let patch = catalog::bumpy_torus(&[12, 12], 0.3).unwrap();
        let u = catalog::TrigField::random(2, 3, 5);
        for node in [3, 40, 77] {
            let x = patch.grid.point(node);
            let geo = patch.point_geometry(node).unwrap();
            let uj = u.jet(&x, 2);
            let hs = geo.hessians(&uj);
            assert_relative_eq!(geo.laplacian(&uj), hs.full_frame.trace(), epsilon = 1e-10);
            let c = ScalarJet { v: 2.0, ..ScalarJet::zeros(2, 2) };
            assert_eq!(geo.laplacian(&c), 0.0);
            assert_eq!(geo.leaf_laplacian(&c), 0.0);
        }
        // flat chart, u = |x|²/2
        let plane = catalog::plane(&[6, 6]).unwrap();
        let geo = plane.point_geometry(8).unwrap();
        let mut uj = ScalarJet::zeros(2, 2);
        let x = plane.grid.point(8);
        uj.d1 = x.clone();
        uj.d2 = DMatrix::identity(2, 2);
        assert!((geo.hessian(&uj) - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn leaf_laplacian_of_first_harmonics() {
        // unit circle leaves of the cylinder: Δ_F cos φ = −cos φ
        let patch = catalog::cylinder(1.0, 1.0, &[32, 8]).unwrap();
        let vals: Vec<f64> = (0..patch.grid.len()).map(|k| patch.grid.point(k)[0].cos()).collect();
        for node in [5, 50, 100] {
            let lap = patch.leaf_laplacian_field(&vals, node).unwrap();
            assert_relative_eq!(lap, -vals[node], epsilon = 1e-4);
        }
        // parallels of a surface of revolution in R^4 are 2-spheres: Δ_F Y_1 = −(n−1) ρ^{-2} Y_1
        let rev = catalog::revolution_analytic(3, catalog::ProfileKind::Catenoid { a: 0.5 }, 0.7, 1.4, &[8, 12, 6]).unwrap();
        let y1 = catalog::LeafHarmonic { n: 3, j: 1, radial: None };
        for node in [100, 250] {
            let x = rev.grid.point(node);
            let geo = rev.point_geometry(node).unwrap();
            let rho = x[2];
            let lap = geo.leaf_laplacian(&y1.jet(&x, 2));
            assert_relative_eq!(lap, -2.0 / (rho * rho) * y1.value(&x), epsilon = 1e-11);
        }
    }

    #[test]
    fn fd_supplier_converges_at_fourth_order() {
        let errs: Vec<f64> = [32usize, 64]
            .iter()
            .map(|&m| {
                let p = catalog::bumpy_torus(&[m, m], 0.3).unwrap();
                let fd = p.with_supplier(DerivativeSupplier::FiniteDifference).unwrap();
                let node = p.grid.index(&[m / 4, m / 3]);
                let a = p.jet(node, 2).unwrap();
                let b = fd.jet(node, 2).unwrap();
                a.d2.iter().zip(&b.d2).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
            })
            .collect();
        assert!((errs[0] / errs[1]).log2() >= 3.8, "{errs:?}");
    }

    #[test]
    fn div_projector_cases() {
        let torus = catalog::torus(2.0, 0.7, 1, &[16, 16]).unwrap();
        for node in [0, 33, 101] {
            let d = torus.point_geometry(node).unwrap().div_projector();
            assert!(d.norm() < 1e-12 && d.h_perp_times_codim.norm() < 1e-12);
        }
        let cyl = catalog::cylinder(1.0, 1.0, &[16, 8]).unwrap();
        let d = cyl.point_geometry(20).unwrap().div_projector();
        assert!(d.norm() < 1e-14 && d.h_perp_times_codim.norm() < 1e-14);
        let sheared = catalog::sheared_torus3(&[8, 8, 8], 1.0).unwrap();
        let mut seen = 0.0f64;
        for node in (0..sheared.grid.len()).step_by(29) {
            let d = sheared.point_geometry(node).unwrap().div_projector();
            assert!(d.identity_residual < 1e-8, "{}", d.identity_residual);
            seen = seen.max(d.h_perp_times_codim.norm());
        }
        assert!(seen > 1e-3);
    }

    #[test]
    fn fstar_squared_of_metric_multiple_is_leaf_laplacian() {
        let patch = catalog::sheared_torus3(&[8, 8, 8], 1.0).unwrap();
        let u = catalog::TrigField::random(3, 2, 11);
        for node in [10, 200, 411] {
            let x = patch.grid.point(node);
            let jet = patch.jet(node, 3).unwrap();
            let geo = patch.point_geometry3(node).unwrap();
            // B = u G as exact jets: components u·⟨r_i, r_j⟩ through the local model
            let comps = metric_times_field(&jet, &u.jet(&x, 2), geo.s);
            let dd = double_divergence(&jet, &comps, geo.s).unwrap();
            assert_relative_eq!(dd, geo.leaf_laplacian(&u.jet(&x, 2)), epsilon = 1e-9, max_relative = 1e-9);
            let zero = vec![ScalarJet::zeros(3, 2); 4];
            assert_eq!(double_divergence(&jet, &zero, 2).unwrap(), 0.0);
        }
    }

    /// Second-order jets of u·g_ij (leaf block) at the base point.
    fn metric_times_field(jet: &MapJet, u: &ScalarJet, s: usize) -> Vec<ScalarJet> {
        let n = jet.n;
        let mut out = Vec::new();
        for i in 0..s {
            for j in 0..s {
                let mut sj = ScalarJet::zeros(n, 2);
                for a in 0..n {
                    for b in a..n {
                        let h = |x: &[HyperDual64]| {
                            let r: Vec<HyperDual64> = (0..jet.m)
                                .map(|c| {
                                    let mut vi = HyperDual64::from(jet.r1(i)[c]);
                                    let mut vj = HyperDual64::from(jet.r1(j)[c]);
                                    for k in 0..n {
                                        vi += x[k] * jet.r2(i, k)[c];
                                        vj += x[k] * jet.r2(j, k)[c];
                                        for l in 0..n {
                                            vi += x[k] * x[l] * (0.5 * jet.r3(i, k, l)[c]);
                                            vj += x[k] * x[l] * (0.5 * jet.r3(j, k, l)[c]);
                                        }
                                    }
                                    vi * vj
                                })
                                .collect();
                            r.into_iter().fold(HyperDual64::from(0.0), |acc, v| acc + v) * u.taylor(x)
                        };
                        let v = h(&pair_seed(n, a, b));
                        sj.v = v.re;
                        if a == b {
                            sj.d1[a] = v.eps1;
                        }
                        sj.d2[(a, b)] = v.eps1eps2;
                        sj.d2[(b, a)] = v.eps1eps2;
                    }
                }
                out.push(sj);
            }
        }
        out
    }
}
