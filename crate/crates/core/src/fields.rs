//! Box grids, vector-valued fields on them, periodic scalar fields on the
//! unit circle, and the circle Wasserstein-1 distance.
//!
//! Nodes of a [`Grid`] are stored with axis 0 varying fastest. A node's
//! coordinate along axis `a` is `lower[a] + index[a] * spacing[a]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    /// Build a tensor grid on the box `[lower, upper]`.
    ///
    /// Fails on the first axis with `upper <= lower` or fewer than two nodes.
    pub fn new(lower: &[f64], upper: &[f64], nodes: &[usize]) -> Result<Self> {
        let d = lower.len();
        if upper.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: upper.len() });
        }
        if nodes.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: nodes.len() });
        }
        if d == 0 {
            return Err(Error::InvalidParameter("grid needs at least one axis".into()));
        }
        for a in 0..d {
            if nodes[a] < 2 {
                return Err(Error::DegenerateAxis {
                    axis: a,
                    reason: format!("needs at least 2 nodes, got {}", nodes[a]),
                });
            }
            if !(lower[a].is_finite() && upper[a].is_finite()) || upper[a] <= lower[a] {
                return Err(Error::DegenerateAxis {
                    axis: a,
                    reason: format!("upper {} must exceed lower {}", upper[a], lower[a]),
                });
            }
        }
        let spacing = (0..d)
            .map(|a| (upper[a] - lower[a]) / (nodes[a] - 1) as f64)
            .collect();
        let mut strides = vec![1; d];
        for a in 1..d {
            strides[a] = strides[a - 1] * nodes[a - 1];
        }
        let len = nodes.iter().product();
        Ok(Self {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            nodes: nodes.to_vec(),
            spacing,
            strides,
            len,
        })
    }

    /// Same number of nodes `n` on every one of `d` axes of the cube `[lo, hi]^d`.
    pub fn cube(d: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(&vec![lo; d], &vec![hi; d], &vec![n; d])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Largest spacing over all axes.
    pub fn h(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    /// Euclidean length of the box diagonal.
    pub fn diam(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (a, slot) in idx.iter_mut().enumerate() {
            *slot = node % self.nodes[a];
            node /= self.nodes[a];
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Axis-`a` component of the node's multi-index.
    #[inline]
    pub fn axis_index(&self, node: usize, a: usize) -> usize {
        (node / self.strides[a]) % self.nodes[a]
    }

    pub fn coord(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.coord_into(node, &mut x);
        x
    }

    pub fn coord_into(&self, node: usize, out: &mut [f64]) {
        for (a, slot) in out.iter_mut().enumerate() {
            *slot = self.lower[a] + self.axis_index(node, a) as f64 * self.spacing[a];
        }
    }

    pub fn coords(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|i| self.coord(i)).collect()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .enumerate()
            .all(|(a, &x)| x >= self.lower[a] && x <= self.upper[a])
    }

    pub fn clamp(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .enumerate()
            .map(|(a, &x)| x.clamp(self.lower[a], self.upper[a]))
            .collect()
    }
}

/// A map from grid nodes to `R^d`: one `d`-vector per node, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: Grid,
    values: Vec<f64>,
}

impl ValueField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * grid.dim();
        if values.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: f64::NAN });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let d = grid.dim();
        let mut values = Vec::with_capacity(grid.len() * d);
        for node in 0..grid.len() {
            let v = f(&grid.coord(node));
            if v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.len() });
            }
            values.extend_from_slice(&v);
        }
        Self::new(grid.clone(), values)
    }

    pub fn constant(grid: &Grid, value: &[f64]) -> Result<Self> {
        Self::from_fn(grid, |_| value.to_vec())
    }

    /// `U(x) = M x + b` with `M` given row-major.
    pub fn affine(grid: &Grid, m: &[Vec<f64>], b: &[f64]) -> Result<Self> {
        let d = grid.dim();
        if m.len() != d || b.len() != d || m.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: m.len() });
        }
        Self::from_fn(grid, |x| {
            (0..d)
                .map(|i| b[i] + (0..d).map(|j| m[i][j] * x[j]).sum::<f64>())
                .collect()
        })
    }

    /// Wraps values without the finiteness scan; used inside solvers that
    /// check finiteness themselves.
    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len() * grid.dim());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, node: usize) -> &[f64] {
        let d = self.dim();
        &self.values[node * d..(node + 1) * d]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup over nodes and components of the difference.
    pub fn max_abs_diff(&self, other: &ValueField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Multilinear interpolation of every component; points are clamped to
    /// the box first, so this is total.
    pub fn interpolate(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.interpolate_into(point, &mut out);
        out
    }

    pub fn interpolate_into(&self, point: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let d = g.dim();
        debug_assert_eq!(point.len(), d);
        // d <= 4 in practice; fixed buffers avoid allocation in the hot path.
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        assert!(d <= 8, "interpolation supports at most 8 axes");
        for a in 0..d {
            let n = g.nodes[a];
            let s = ((point[a].clamp(g.lower[a], g.upper[a]) - g.lower[a]) / g.spacing[a])
                .clamp(0.0, (n - 1) as f64);
            // snap to a node when rounding left us within 1e-12 of it
            let r = s.round();
            let s = if (s - r).abs() < 1e-12 { r } else { s };
            let i = (s.floor() as usize).min(n - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut node = 0;
            for a in 0..d {
                let up = (corner >> a) & 1;
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                node += (base[a] + up) * g.strides[a];
            }
            if w == 0.0 {
                continue;
            }
            let v = &self.values[node * d..(node + 1) * d];
            for (o, vi) in out.iter_mut().zip(v) {
                *o += w * vi;
            }
        }
    }
}

/// Samples on the periodic unit circle `[0, 1)`, node `i` at `x = i / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField1D {
    values: Vec<f64>,
}

impl ScalarField1D {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "periodic field needs at least 2 nodes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: f64::NAN });
        }
        Ok(Self { values })
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new((0..n).map(|i| f(i as f64 / n as f64)).collect())
    }

    /// Samples `f` and rescales so that `h * sum = 1`.
    pub fn density_from_fn(n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut field = Self::from_fn(n, f)?;
        if field.values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("density samples must be nonnegative".into()));
        }
        let mass = field.mass();
        if mass <= 0.0 {
            return Err(Error::InvalidParameter("density has zero mass".into()));
        }
        field.values.iter_mut().for_each(|v| *v /= mass);
        Ok(field)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    /// Unit mass concentrated on the node nearest to `x`.
    pub fn point_mass(n: usize, x: f64) -> Result<Self> {
        let mut v = vec![0.0; n];
        let i = ((x.rem_euclid(1.0) * n as f64).round() as usize) % n;
        v[i] = n as f64;
        Self::new(v)
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn h(&self) -> f64 {
        1.0 / self.values.len() as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.values.len() as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: isize) -> f64 {
        let n = self.values.len() as isize;
        self.values[i.rem_euclid(n) as usize]
    }

    pub fn mass(&self) -> f64 {
        self.h() * self.values.iter().sum::<f64>()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn is_density(&self, tol: f64) -> bool {
        self.values.iter().all(|&v| v >= 0.0) && (self.mass() - 1.0).abs() <= tol
    }

    /// Circular shift by `s` cells: `result[i] = self[i - s]`.
    pub fn shifted(&self, s: isize) -> Self {
        let n = self.values.len() as isize;
        Self::from_raw((0..n).map(|i| self.get(i - s)).collect())
    }

    /// Periodic linear interpolation at `x` (taken modulo 1).
    pub fn interpolate(&self, x: f64) -> f64 {
        let n = self.values.len();
        let s = x.rem_euclid(1.0) * n as f64;
        let i = s.floor();
        let t = s - i;
        let i = i as isize;
        (1.0 - t) * self.get(i) + t * self.get(i + 1)
    }

    /// `x -> self(x + s)` sampled at the nodes. The same interpolation
    /// weights are used at every node, so this commutes with the
    /// difference operators below.
    pub fn translated(&self, s: f64) -> Self {
        let n = self.values.len();
        let cells = s.rem_euclid(1.0) * n as f64;
        let k = cells.floor();
        let t = cells - k;
        let k = k as isize;
        Self::from_raw(
            (0..n as isize)
                .map(|i| (1.0 - t) * self.get(i + k) + t * self.get(i + k + 1))
                .collect(),
        )
    }

    /// Centered first difference `(v[i+1] - v[i-1]) / 2h`.
    pub fn centered_gradient(&self) -> Vec<f64> {
        let n = self.values.len() as isize;
        let inv = 0.5 * n as f64;
        (0..n).map(|i| (self.get(i + 1) - self.get(i - 1)) * inv).collect()
    }

    /// Second difference `(v[i+1] - 2 v[i] + v[i-1]) / h^2`.
    pub fn laplacian(&self) -> Vec<f64> {
        let n = self.values.len() as isize;
        let inv = (n * n) as f64;
        (0..n)
            .map(|i| (self.get(i + 1) - 2.0 * self.get(i) + self.get(i - 1)) * inv)
            .collect()
    }

    /// Discrete `L^2` norm `sqrt(h * sum v^2)`.
    pub fn l2_norm(&self) -> f64 {
        (self.h() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Wasserstein-1 distance between two grid densities on the circle.
///
/// With cumulative masses `F1`, `F2`, the distance is
/// `min_k h * sum |F1 - F2 - k|`, attained at the median of `F1 - F2`.
pub fn wasserstein1_periodic(m1: &ScalarField1D, m2: &ScalarField1D) -> Result<f64> {
    if m1.len() != m2.len() {
        return Err(Error::GridMismatch);
    }
    let h = m1.h();
    let mut acc = 0.0;
    let mut diff: Vec<f64> = m1
        .values
        .iter()
        .zip(&m2.values)
        .map(|(a, b)| {
            acc += h * (a - b);
            acc
        })
        .collect();
    let mut sorted = diff.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted[sorted.len() / 2];
    diff.iter_mut().for_each(|v| *v = (*v - k).abs());
    Ok(h * diff.iter().sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_square_grid() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[3, 3]).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.spacing(), &[0.5, 0.5]);
        assert_eq!(g.coord(4), vec![0.5, 0.5]);
        assert_eq!(g.linear_index(&g.multi_index(7)), 7);
    }

    #[test]
    fn one_axis_spacing() {
        let g = Grid::new(&[0.0], &[2.0], &[5]).unwrap();
        assert_eq!(g.spacing(), &[0.5]);
        assert_eq!(g.coord(3), vec![1.5]);
    }

    #[test]
    fn degenerate_axes_are_named() {
        match Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[1, 3]) {
            Err(Error::DegenerateAxis { axis, .. }) => assert_eq!(axis, 0),
            other => panic!("unexpected {other:?}"),
        }
        match Grid::new(&[0.0, 1.0], &[1.0, 1.0], &[3, 3]) {
            Err(Error::DegenerateAxis { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn interpolation_reproduces_nodes_and_clamps() {
        let g = Grid::new(&[0.0, -1.0], &[2.0, 1.0], &[5, 4]).unwrap();
        let f = ValueField::from_fn(&g, |x| vec![x[0].sin() * x[1], x[0] * x[0]]).unwrap();
        for node in 0..g.len() {
            let v = f.interpolate(&g.coord(node));
            assert_eq!(v, f.at(node));
        }
        let outside = f.interpolate(&[3.0, -5.0]);
        let clamped = f.interpolate(&[2.0, -1.0]);
        assert_eq!(outside, clamped);
    }

    #[test]
    fn point_masses_transport_on_circle() {
        let n = 100;
        let a = ScalarField1D::point_mass(n, 0.2).unwrap();
        let b = ScalarField1D::point_mass(n, 0.5).unwrap();
        let w = wasserstein1_periodic(&a, &b).unwrap();
        assert!((w - 0.3).abs() <= 1.0 / n as f64, "{w}");

        let c = ScalarField1D::point_mass(n, 0.0).unwrap();
        let d = ScalarField1D::point_mass(n, 0.9).unwrap();
        let w = wasserstein1_periodic(&c, &d).unwrap();
        assert!((w - 0.1).abs() <= 1.0 / n as f64, "{w}");
        assert_eq!(wasserstein1_periodic(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = ScalarField1D::uniform(10).unwrap();
        let b = ScalarField1D::uniform(12).unwrap();
        assert_eq!(wasserstein1_periodic(&a, &b), Err(Error::GridMismatch));
    }

    /// Brute-force oracle: minimize the CDF gap over a dense set of shift
    /// constants instead of taking the median.
    fn w1_by_shift_scan(m1: &ScalarField1D, m2: &ScalarField1D) -> f64 {
        let h = m1.h();
        let mut acc = 0.0;
        let d: Vec<f64> = m1
            .values()
            .iter()
            .zip(m2.values())
            .map(|(a, b)| {
                acc += h * (a - b);
                acc
            })
            .collect();
        // The objective is piecewise linear with kinks at the d values, so
        // its minimum is attained at one of them.
        d.iter()
            .map(|k| h * d.iter().map(|v| (v - k).abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    fn density_strategy(n: usize) -> impl Strategy<Value = ScalarField1D> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|mut v| {
            v[0] += 1e-3;
            let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x /= s);
            ScalarField1D::new(v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn interpolation_exact_for_affine(
            m in prop::collection::vec(-3.0f64..3.0, 9),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            p in prop::collection::vec(0.0f64..1.0, 3),
        ) {
            let g = Grid::new(&[-1.0, 0.0, 2.0], &[1.0, 3.0, 2.5], &[4, 5, 3]).unwrap();
            let rows: Vec<Vec<f64>> = m.chunks(3).map(|r| r.to_vec()).collect();
            let f = ValueField::affine(&g, &rows, &b).unwrap();
            let point: Vec<f64> = (0..3).map(|a| g.lower()[a] + p[a] * (g.upper()[a] - g.lower()[a])).collect();
            let v = f.interpolate(&point);
            for i in 0..3 {
                let exact = b[i] + (0..3).map(|j| rows[i][j] * point[j]).sum::<f64>();
                prop_assert!((v[i] - exact).abs() < 1e-12);
            }
        }

        #[test]
        fn w1_is_a_metric(a in density_strategy(24), b in density_strategy(24), c in density_strategy(24)) {
            let ab = wasserstein1_periodic(&a, &b).unwrap();
            let ba = wasserstein1_periodic(&b, &a).unwrap();
            let bc = wasserstein1_periodic(&b, &c).unwrap();
            let ac = wasserstein1_periodic(&a, &c).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!((ab - w1_by_shift_scan(&a, &b)).abs() < 1e-12);
            prop_assert!(wasserstein1_periodic(&a, &a).unwrap() < 1e-15);
        }

        #[test]
        fn w1_of_shifted_point_mass(n in 4usize..64, i in 0usize..64, s in 0isize..64) {
            let i = i % n;
            let s = s % n as isize;
            let a = ScalarField1D::point_mass(n, i as f64 / n as f64).unwrap();
            let b = a.shifted(s);
            let w = wasserstein1_periodic(&a, &b).unwrap();
            let s = s as usize;
            let expected = s.min(n - s) as f64 / n as f64;
            prop_assert!((w - expected).abs() < 1e-12);
        }

        #[test]
        fn w1_of_shift_never_exceeds_shift_cost(a in density_strategy(20), s in 0isize..20) {
            // Translation by s cells is one admissible plan, so it bounds the
            // optimal cost; equality holds for point masses (above).
            let w = wasserstein1_periodic(&a, &a.shifted(s)).unwrap();
            let s = s as usize;
            prop_assert!(w <= s.min(20 - s) as f64 / 20.0 + 1e-12);
        }
    }
}
