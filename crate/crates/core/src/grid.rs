//! Tensor-product grids, quadrature weights and finite-difference stencils.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisKind {
    /// Uniform nodes over one period, trapezoid weights.
    Periodic,
    /// Gauss–Legendre nodes strictly inside [a, b].
    GaussLegendre,
    /// Uniform nodes including both ends, trapezoid weights.
    Uniform,
}

#[derive(Debug, Clone)]
pub struct Axis {
    pub kind: AxisKind,
    pub a: f64,
    pub b: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    stencils: Vec<Option<Stencil>>,
}

/// Five-point weights for first and second derivatives at one node.
#[derive(Debug, Clone)]
struct Stencil {
    offsets: [isize; 5],
    w1: [f64; 5],
    w2: [f64; 5],
}

pub const STENCIL_RADIUS: usize = 2;

impl Axis {
    pub fn periodic(a: f64, b: f64, count: usize) -> Result<Self> {
        check_axis(a, b, count, 5)?;
        let h = (b - a) / count as f64;
        let nodes = (0..count).map(|i| a + h * i as f64).collect();
        let weights = vec![h; count];
        let st = uniform_stencil(h);
        Ok(Self {
            kind: AxisKind::Periodic,
            a,
            b,
            nodes,
            weights,
            stencils: vec![Some(st); count],
        })
    }

    pub fn gauss_legendre(a: f64, b: f64, count: usize) -> Result<Self> {
        check_axis(a, b, count, 1)?;
        let rule = GaussLegendre::new(NonZeroUsize::new(count).expect("count checked"));
        let mut pairs: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .into_iter()
            .map(|(x, w)| (0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w))
            .collect();
        pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
        let nodes: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let weights = pairs.iter().map(|p| p.1).collect();
        let stencils = nonuniform_stencils(&nodes);
        Ok(Self {
            kind: AxisKind::GaussLegendre,
            a,
            b,
            nodes,
            weights,
            stencils,
        })
    }

    pub fn uniform(a: f64, b: f64, count: usize) -> Result<Self> {
        check_axis(a, b, count, 2)?;
        let h = (b - a) / (count - 1) as f64;
        let nodes: Vec<f64> = (0..count).map(|i| a + h * i as f64).collect();
        let mut weights = vec![h; count];
        weights[0] = 0.5 * h;
        weights[count - 1] = 0.5 * h;
        let stencils = nonuniform_stencils(&nodes);
        Ok(Self {
            kind: AxisKind::Uniform,
            a,
            b,
            nodes,
            weights,
            stencils,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_periodic(&self) -> bool {
        self.kind == AxisKind::Periodic
    }

    /// Whether a stencil of the given nesting depth fits at index i.
    pub fn interior(&self, i: usize, depth: usize) -> bool {
        self.is_periodic() || (i >= STENCIL_RADIUS * depth && i + STENCIL_RADIUS * depth < self.len())
    }

    fn neighbour(&self, i: usize, off: isize) -> usize {
        let n = self.len() as isize;
        (((i as isize + off) % n + n) % n) as usize
    }
}

fn check_axis(a: f64, b: f64, count: usize, min: usize) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && b > a) {
        return domain(format!("axis bounds must satisfy a < b, got [{a}, {b}]"));
    }
    if count < min {
        return domain(format!("axis needs at least {min} nodes, got {count}"));
    }
    Ok(())
}

fn uniform_stencil(h: f64) -> Stencil {
    Stencil {
        offsets: [-2, -1, 0, 1, 2],
        w1: [1.0 / (12.0 * h), -8.0 / (12.0 * h), 0.0, 8.0 / (12.0 * h), -1.0 / (12.0 * h)],
        w2: [
            -1.0 / (12.0 * h * h),
            16.0 / (12.0 * h * h),
            -30.0 / (12.0 * h * h),
            16.0 / (12.0 * h * h),
            -1.0 / (12.0 * h * h),
        ],
    }
}

fn nonuniform_stencils(nodes: &[f64]) -> Vec<Option<Stencil>> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            if i < 2 || i + 2 >= n {
                return None;
            }
            let xs = &nodes[i - 2..=i + 2];
            let w = fornberg(nodes[i], xs, 2);
            Some(Stencil {
                offsets: [-2, -1, 0, 1, 2],
                w1: [w[1][0], w[1][1], w[1][2], w[1][3], w[1][4]],
                w2: [w[2][0], w[2][1], w[2][2], w[2][3], w[2][4]],
            })
        })
        .collect()
}

/// Fornberg's finite-difference weights; result[m][j] for derivative order m at node j.
pub fn fornberg(z: f64, x: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub axes: Vec<Axis>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return domain("grid needs at least one axis");
        }
        let mut strides = vec![1; axes.len()];
        for a in (0..axes.len() - 1).rev() {
            strides[a] = strides[a + 1] * axes[a + 1].len();
        }
        Ok(Self { axes, strides })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Axis::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|s| {
                let i = node / s;
                node %= s;
                i
            })
            .collect()
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .zip(&self.axes)
            .map(|(&i, ax)| ax.nodes[i])
            .collect()
    }

    pub fn weight(&self, node: usize) -> f64 {
        self.multi_index(node)
            .iter()
            .zip(&self.axes)
            .map(|(&i, ax)| ax.weights[i])
            .product()
    }

    /// Tensor-product quadrature of sampled values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        values.iter().enumerate().map(|(k, v)| v * self.weight(k)).sum()
    }

    /// Whether nested stencils of the given depth fit along the listed axes at the node.
    pub fn interior(&self, node: usize, axes: &[usize], depth: usize) -> bool {
        let mi = self.multi_index(node);
        axes.iter().all(|&a| self.axes[a].interior(mi[a], depth))
    }

    fn taps(&self, node: usize, axis: usize, second: bool) -> Result<Vec<(usize, f64)>> {
        let mi = self.multi_index(node);
        let ax = &self.axes[axis];
        let st = ax.stencils[mi[axis]].as_ref().ok_or_else(|| {
            Error::Stencil(format!(
                "node index {} on axis {axis} lies within the stencil margin",
                mi[axis]
            ))
        })?;
        let w = if second { &st.w2 } else { &st.w1 };
        Ok(st
            .offsets
            .iter()
            .zip(w)
            .filter(|(_, &c)| c != 0.0)
            .map(|(&o, &c)| {
                let j = ax.neighbour(mi[axis], o);
                (node - mi[axis] * self.strides[axis] + j * self.strides[axis], c)
            })
            .collect())
    }

    /// Fourth-order first derivative of a component-packed field along an axis.
    pub fn d1(&self, values: &[f64], stride: usize, comp: usize, node: usize, axis: usize) -> Result<f64> {
        Ok(self
            .taps(node, axis, false)?
            .iter()
            .map(|&(k, c)| c * values[k * stride + comp])
            .sum())
    }

    /// Fourth-order second derivative ∂_a∂_b; mixed derivatives use tensor stencils.
    pub fn d2(
        &self,
        values: &[f64],
        stride: usize,
        comp: usize,
        node: usize,
        a: usize,
        b: usize,
    ) -> Result<f64> {
        if a == b {
            return Ok(self
                .taps(node, a, true)?
                .iter()
                .map(|&(k, c)| c * values[k * stride + comp])
                .sum());
        }
        let mut acc = 0.0;
        for (k, c) in self.taps(node, a, false)? {
            acc += c * self.d1(values, stride, comp, k, b)?;
        }
        Ok(acc)
    }

    /// Third derivative ∂_a∂_b∂_c by nesting first-derivative stencils over second derivatives.
    #[allow(clippy::too_many_arguments)]
    pub fn d3(
        &self,
        values: &[f64],
        stride: usize,
        comp: usize,
        node: usize,
        a: usize,
        b: usize,
        c: usize,
    ) -> Result<f64> {
        let mut acc = 0.0;
        for (k, w) in self.taps(node, a, false)? {
            acc += w * self.d2(values, stride, comp, k, b, c)?;
        }
        Ok(acc)
    }
}
