//! Exact derivative jets of maps and scalar functions through hyper-dual numbers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_dual::{Dual64, DualNum, HyperDual64, HyperHyperDual64};

pub trait Real: DualNum<Primitive = f64> + Copy + Send + Sync {}
impl<T: DualNum<Primitive = f64> + Copy + Send + Sync> Real for T {}

/// A smooth map R^n ⊃ U → R^m written once for every dual-number type.
pub trait Chart: Send + Sync {
    fn dim(&self) -> usize;
    fn ambient_dim(&self) -> usize {
        self.dim() + 1
    }
    fn eval<D: Real>(&self, x: &[D]) -> Vec<D>;
}

/// A smooth scalar function written once for every dual-number type.
pub trait Field: Send + Sync {
    fn dim(&self) -> usize;
    fn eval<D: Real>(&self, x: &[D]) -> D;
}

#[derive(Debug, Clone)]
pub struct MapJet {
    pub n: usize,
    pub m: usize,
    pub order: usize,
    pub v: DVector<f64>,
    pub d1: Vec<DVector<f64>>,
    pub d2: Vec<DVector<f64>>,
    pub d3: Vec<DVector<f64>>,
}

impl MapJet {
    pub fn zeros(n: usize, m: usize, order: usize) -> Self {
        let z = DVector::zeros(m);
        Self {
            n,
            m,
            order,
            v: z.clone(),
            d1: vec![z.clone(); n],
            d2: if order >= 2 { vec![z.clone(); n * n] } else { Vec::new() },
            d3: if order >= 3 { vec![z; n * n * n] } else { Vec::new() },
        }
    }
    pub fn r1(&self, i: usize) -> &DVector<f64> {
        &self.d1[i]
    }
    pub fn r2(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.d2[i * self.n + j]
    }
    pub fn r3(&self, i: usize, j: usize, k: usize) -> &DVector<f64> {
        &self.d3[(i * self.n + j) * self.n + k]
    }
    fn set2(&mut self, i: usize, j: usize, v: DVector<f64>) {
        self.d2[j * self.n + i] = v.clone();
        self.d2[i * self.n + j] = v;
    }
    fn set3(&mut self, i: usize, j: usize, k: usize, v: DVector<f64>) {
        let n = self.n;
        for (a, b, c) in perms3(i, j, k) {
            self.d3[(a * n + b) * n + c] = v.clone();
        }
    }

    /// Taylor polynomial about the base point evaluated at a nilpotent offset.
    pub fn taylor<D: Real>(&self, dx: &[D]) -> Vec<D> {
        let n = self.n;
        (0..self.m)
            .map(|c| {
                let mut acc = D::from(self.v[c]);
                for i in 0..n {
                    acc += dx[i] * self.d1[i][c];
                }
                if self.order >= 2 {
                    for i in 0..n {
                        for j in 0..n {
                            acc += dx[i] * dx[j] * (0.5 * self.r2(i, j)[c]);
                        }
                    }
                }
                if self.order >= 3 {
                    for i in 0..n {
                        for j in 0..n {
                            for k in 0..n {
                                acc += dx[i] * dx[j] * dx[k] * (self.r3(i, j, k)[c] / 6.0);
                            }
                        }
                    }
                }
                acc
            })
            .collect()
    }
}

fn perms3(i: usize, j: usize, k: usize) -> [(usize, usize, usize); 6] {
    [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)]
}

#[derive(Debug, Clone)]
pub struct ScalarJet {
    pub n: usize,
    pub order: usize,
    pub v: f64,
    pub d1: Vec<f64>,
    pub d2: DMatrix<f64>,
    pub d3: Vec<f64>,
}

impl ScalarJet {
    pub fn zeros(n: usize, order: usize) -> Self {
        Self {
            n,
            order,
            v: 0.0,
            d1: vec![0.0; n],
            d2: DMatrix::zeros(n, n),
            d3: if order >= 3 { vec![0.0; n * n * n] } else { Vec::new() },
        }
    }
    pub fn d3(&self, i: usize, j: usize, k: usize) -> f64 {
        self.d3[(i * self.n + j) * self.n + k]
    }
    pub fn taylor<D: Real>(&self, dx: &[D]) -> D {
        let n = self.n;
        let mut acc = D::from(self.v);
        for i in 0..n {
            acc += dx[i] * self.d1[i];
            if self.order >= 2 {
                for j in 0..n {
                    acc += dx[i] * dx[j] * (0.5 * self.d2[(i, j)]);
                    if self.order >= 3 {
                        for k in 0..n {
                            acc += dx[i] * dx[j] * dx[k] * (self.d3(i, j, k) / 6.0);
                        }
                    }
                }
            }
        }
        acc
    }
}

fn seed_dual(x: &[f64], i: usize) -> Vec<Dual64> {
    x.iter()
        .enumerate()
        .map(|(a, &xa)| if a == i { Dual64::from(xa).derivative() } else { Dual64::from(xa) })
        .collect()
}

fn seed_hyper(x: &[f64], i: usize, j: usize) -> Vec<HyperDual64> {
    x.iter()
        .enumerate()
        .map(|(a, &xa)| {
            let mut d = HyperDual64::from_re(xa);
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

fn seed_hyperhyper(x: &[f64], i: usize, j: usize, k: usize) -> Vec<HyperHyperDual64> {
    x.iter()
        .enumerate()
        .map(|(a, &xa)| {
            let mut d = HyperHyperDual64::from_re(xa);
            if a == i {
                d.eps1 = 1.0;
            }
            if a == j {
                d.eps2 = 1.0;
            }
            if a == k {
                d.eps3 = 1.0;
            }
            d
        })
        .collect()
}

/// Evaluates a dual-generic map on the three seed types; used by every jet builder.
pub trait DualEval: Send + Sync {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn eval_f64(&self, x: &[f64]) -> Vec<f64>;
    fn eval_dual(&self, x: &[Dual64]) -> Vec<Dual64>;
    fn eval_hyper(&self, x: &[HyperDual64]) -> Vec<HyperDual64>;
    fn eval_hyperhyper(&self, x: &[HyperHyperDual64]) -> Vec<HyperHyperDual64>;
}

pub fn jet_of(e: &(impl DualEval + ?Sized), x: &[f64], order: usize) -> MapJet {
    let n = e.n();
    let m = e.m();
    let mut jet = MapJet::zeros(n, m, order);
    jet.v = DVector::from_vec(e.eval_f64(x));
    if order <= 1 {
        for i in 0..n {
            let y = e.eval_dual(&seed_dual(x, i));
            jet.d1[i] = DVector::from_iterator(m, y.iter().map(|d| d.eps));
        }
        return jet;
    }
    for i in 0..n {
        for j in i..n {
            let y = e.eval_hyper(&seed_hyper(x, i, j));
            if j == i {
                jet.d1[i] = DVector::from_iterator(m, y.iter().map(|d| d.eps1));
            }
            jet.set2(i, j, DVector::from_iterator(m, y.iter().map(|d| d.eps1eps2)));
        }
    }
    if order >= 3 {
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    let y = e.eval_hyperhyper(&seed_hyperhyper(x, i, j, k));
                    jet.set3(i, j, k, DVector::from_iterator(m, y.iter().map(|d| d.eps1eps2eps3)));
                }
            }
        }
    }
    jet
}

/// Object-safe immersion interface.
pub trait Immersion: Send + Sync {
    fn dim(&self) -> usize;
    fn ambient_dim(&self) -> usize;
    fn point(&self, x: &[f64]) -> Vec<f64>;
    fn jet(&self, x: &[f64], order: usize) -> MapJet;
}

/// Object-safe scalar function interface.
pub trait ScalarFn: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn jet(&self, x: &[f64], order: usize) -> ScalarJet;
}

struct ChartEval<'a, C: Chart + ?Sized>(&'a C);

impl<C: Chart + ?Sized> DualEval for ChartEval<'_, C> {
    fn n(&self) -> usize {
        self.0.dim()
    }
    fn m(&self) -> usize {
        self.0.ambient_dim()
    }
    fn eval_f64(&self, x: &[f64]) -> Vec<f64> {
        self.0.eval(x)
    }
    fn eval_dual(&self, x: &[Dual64]) -> Vec<Dual64> {
        self.0.eval(x)
    }
    fn eval_hyper(&self, x: &[HyperDual64]) -> Vec<HyperDual64> {
        self.0.eval(x)
    }
    fn eval_hyperhyper(&self, x: &[HyperHyperDual64]) -> Vec<HyperHyperDual64> {
        self.0.eval(x)
    }
}

impl<C: Chart> Immersion for C {
    fn dim(&self) -> usize {
        Chart::dim(self)
    }
    fn ambient_dim(&self) -> usize {
        Chart::ambient_dim(self)
    }
    fn point(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x)
    }
    fn jet(&self, x: &[f64], order: usize) -> MapJet {
        jet_of(&ChartEval(self), x, order)
    }
}

struct FieldEval<'a, F: Field + ?Sized>(&'a F);

impl<F: Field + ?Sized> DualEval for FieldEval<'_, F> {
    fn n(&self) -> usize {
        self.0.dim()
    }
    fn m(&self) -> usize {
        1
    }
    fn eval_f64(&self, x: &[f64]) -> Vec<f64> {
        vec![self.0.eval(x)]
    }
    fn eval_dual(&self, x: &[Dual64]) -> Vec<Dual64> {
        vec![self.0.eval(x)]
    }
    fn eval_hyper(&self, x: &[HyperDual64]) -> Vec<HyperDual64> {
        vec![self.0.eval(x)]
    }
    fn eval_hyperhyper(&self, x: &[HyperHyperDual64]) -> Vec<HyperHyperDual64> {
        vec![self.0.eval(x)]
    }
}

pub fn scalar_from_map_jet(j: &MapJet) -> ScalarJet {
    let n = j.n;
    let mut s = ScalarJet::zeros(n, j.order);
    s.v = j.v[0];
    for i in 0..n {
        s.d1[i] = j.d1[i][0];
    }
    if j.order >= 2 {
        for a in 0..n {
            for b in 0..n {
                s.d2[(a, b)] = j.r2(a, b)[0];
            }
        }
    }
    if j.order >= 3 {
        s.d3 = j.d3.iter().map(|v| v[0]).collect();
    }
    s
}

impl<F: Field> ScalarFn for F {
    fn dim(&self) -> usize {
        Field::dim(self)
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.eval(x)
    }
    fn jet(&self, x: &[f64], order: usize) -> ScalarJet {
        scalar_from_map_jet(&jet_of(&FieldEval(self), x, order))
    }
}

/// Conformal maps of the ambient Euclidean space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AmbientMap {
    /// x ↦ c x.
    Homothety(f64),
    /// x ↦ x / |x|².
    Inversion,
}

impl AmbientMap {
    pub fn eval<D: Real>(&self, y: &[D]) -> Vec<D> {
        match *self {
            AmbientMap::Homothety(c) => y.iter().map(|&v| v * c).collect(),
            AmbientMap::Inversion => {
                let r2 = y.iter().fold(D::from(0.0), |acc, &v| acc + v * v);
                let inv = r2.recip();
                y.iter().map(|&v| v * inv).collect()
            }
        }
    }

    /// μ with ι*ḡ = μ² ḡ.
    pub fn conformal_factor(&self, y: &[f64]) -> f64 {
        match *self {
            AmbientMap::Homothety(c) => c.abs(),
            AmbientMap::Inversion => 1.0 / y.iter().map(|v| v * v).sum::<f64>(),
        }
    }

    /// Euclidean gradient of μ.
    pub fn conformal_factor_gradient(&self, y: &[f64]) -> Vec<f64> {
        match *self {
            AmbientMap::Homothety(_) => vec![0.0; y.len()],
            AmbientMap::Inversion => {
                let r2: f64 = y.iter().map(|v| v * v).sum();
                y.iter().map(|v| -2.0 * v / (r2 * r2)).collect()
            }
        }
    }
}

struct Composed<'a> {
    map: AmbientMap,
    jet: &'a MapJet,
    x0: &'a [f64],
}

impl Composed<'_> {
    fn go<D: Real>(&self, x: &[D]) -> Vec<D> {
        let dx: Vec<D> = x.iter().zip(self.x0).map(|(&a, &b)| a - b).collect();
        self.map.eval(&self.jet.taylor(&dx))
    }
}

impl DualEval for Composed<'_> {
    fn n(&self) -> usize {
        self.jet.n
    }
    fn m(&self) -> usize {
        self.jet.m
    }
    fn eval_f64(&self, x: &[f64]) -> Vec<f64> {
        self.go(x)
    }
    fn eval_dual(&self, x: &[Dual64]) -> Vec<Dual64> {
        self.go(x)
    }
    fn eval_hyper(&self, x: &[HyperDual64]) -> Vec<HyperDual64> {
        self.go(x)
    }
    fn eval_hyperhyper(&self, x: &[HyperHyperDual64]) -> Vec<HyperHyperDual64> {
        self.go(x)
    }
}

/// Jet of `map ∘ r` from the jet of r.
pub fn compose_jet(map: AmbientMap, jet: &MapJet, x0: &[f64]) -> MapJet {
    jet_of(&Composed { map, jet, x0 }, x0, jet.order)
}

/// Immersion followed by an ambient conformal map.
pub struct MappedImmersion {
    pub inner: Arc<dyn Immersion>,
    pub map: AmbientMap,
}

impl Immersion for MappedImmersion {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }
    fn point(&self, x: &[f64]) -> Vec<f64> {
        let p = self.inner.point(x);
        self.map.eval(&p)
    }
    fn jet(&self, x: &[f64], order: usize) -> MapJet {
        compose_jet(self.map, &self.inner.jet(x, order), x)
    }
}

/// A change of chart y ↦ x = φ(y) written once for every dual-number type.
pub trait ChartChange: Send + Sync {
    fn dim(&self) -> usize;
    fn eval<D: Real>(&self, y: &[D]) -> Vec<D>;
}

struct Pulled<'a, T: ChartChange> {
    change: &'a T,
    jet: &'a MapJet,
    x0: Vec<f64>,
}

impl<T: ChartChange> Pulled<'_, T> {
    fn go<D: Real>(&self, y: &[D]) -> Vec<D> {
        let x = self.change.eval(y);
        let dx: Vec<D> = x.iter().zip(&self.x0).map(|(&a, &b)| a - b).collect();
        self.jet.taylor(&dx)
    }
}

impl<T: ChartChange> DualEval for Pulled<'_, T> {
    fn n(&self) -> usize {
        self.jet.n
    }
    fn m(&self) -> usize {
        self.jet.m
    }
    fn eval_f64(&self, x: &[f64]) -> Vec<f64> {
        self.go(x)
    }
    fn eval_dual(&self, x: &[Dual64]) -> Vec<Dual64> {
        self.go(x)
    }
    fn eval_hyper(&self, x: &[HyperDual64]) -> Vec<HyperDual64> {
        self.go(x)
    }
    fn eval_hyperhyper(&self, x: &[HyperHyperDual64]) -> Vec<HyperHyperDual64> {
        self.go(x)
    }
}

/// Jet at y of `r ∘ φ` given the jet of r at φ(y).
pub fn pull_back_jet<T: ChartChange>(change: &T, jet_at_x: &MapJet, y: &[f64]) -> MapJet {
    let x0 = change.eval(y);
    jet_of(&Pulled { change, jet: jet_at_x, x0 }, y, jet_at_x.order)
}

/// Jacobian ∂x^a/∂y^b of a chart change.
pub fn chart_change_jacobian<T: ChartChange>(change: &T, y: &[f64]) -> DMatrix<f64> {
    let n = change.dim();
    let mut jac = DMatrix::zeros(n, n);
    for b in 0..n {
        let x = change.eval(&seed_dual(y, b));
        for a in 0..n {
            jac[(a, b)] = x[a].eps;
        }
    }
    jac
}

/// Second derivatives ∂²x^a/∂y^b∂y^c, indexed [a][(b, c)].
pub fn chart_change_hessians<T: ChartChange>(change: &T, y: &[f64]) -> Vec<DMatrix<f64>> {
    let n = change.dim();
    let mut out = vec![DMatrix::zeros(n, n); n];
    for b in 0..n {
        for c in b..n {
            let x = change.eval(&seed_hyper(y, b, c));
            for a in 0..n {
                out[a][(b, c)] = x[a].eps1eps2;
                out[a][(c, b)] = x[a].eps1eps2;
            }
        }
    }
    out
}
