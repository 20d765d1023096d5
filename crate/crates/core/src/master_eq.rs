//! Explicit grid solvers for the finite-state master equation
//!
//! ```text
//! dU/dt + (F(x,U) . grad) U + discount U + [noise terms] = G(x,U),   U(0) = U0
//! ```
//!
//! under every supported jump regime, and for the two limit operators that
//! arise when jumps become small and frequent.
//!
//! Transport is first-order upwind per axis on the sign of the total drift.
//! Jump terms evaluate `S^T U(Sx + e)` through clamped multilinear
//! interpolation. Time stepping is forward Euler; every step checks a CFL
//! bound that keeps the update a convex combination for scalar transport.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fields::{Grid, ValueField};
use crate::linalg::{self, Mat};

/// `(x, u) -> R^d`.
pub type VecMap = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// `(x, u) -> R`, a potential on `R^{2d}`.
pub type Potential = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Tolerance used when checking positive semidefiniteness of a block matrix.
const PSD_TOL: f64 = 1e-12;

#[derive(Clone)]
pub enum Certificate {
    /// `G = A x + B u (+ g0)`, `F = C x + D u (+ f0)` with `[[A, B], [C, D]]`
    /// having a positive semidefinite symmetric part.
    LinearBlock { a: Mat, b: Mat, c: Mat, d: Mat },
    /// `(G, F)` is the gradient of a convex potential on `R^{2d}`.
    ConvexGradient { potential: Potential },
    Unverified,
}

impl std::fmt::Debug for Certificate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Certificate::LinearBlock { .. } => write!(f, "LinearBlock"),
            Certificate::ConvexGradient { .. } => write!(f, "ConvexGradient"),
            Certificate::Unverified => write!(f, "Unverified"),
        }
    }
}

#[derive(Clone)]
enum Evaluator {
    Linear { mx: Mat, mu: Mat, offset: Vec<f64> },
    Closure(VecMap),
}

impl Evaluator {
    #[inline]
    fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            Evaluator::Linear { mx, mu, offset } => {
                let d = out.len();
                for i in 0..d {
                    let mut acc = offset[i];
                    for j in 0..d {
                        acc += mx[(i, j)] * x[j] + mu[(i, j)] * u[j];
                    }
                    out[i] = acc;
                }
            }
            Evaluator::Closure(f) => out.copy_from_slice(&f(x, u)),
        }
    }
}

/// The pair `(F, G)` together with Lipschitz constants and a monotonicity
/// certificate.
#[derive(Clone)]
pub struct Coupling {
    dim: usize,
    f: Evaluator,
    g: Evaluator,
    pub lip_f_x: f64,
    pub lip_f_u: f64,
    pub lip_g_x: f64,
    pub lip_g_u: f64,
    certificate: Certificate,
}

impl std::fmt::Debug for Coupling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coupling")
            .field("dim", &self.dim)
            .field("lip_f_x", &self.lip_f_x)
            .field("lip_f_u", &self.lip_f_u)
            .field("lip_g_x", &self.lip_g_x)
            .field("lip_g_u", &self.lip_g_u)
            .field("certificate", &self.certificate)
            .finish()
    }
}

/// Lipschitz constants of `F` and `G` in `x` and in `u`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LipschitzConstants {
    pub f_x: f64,
    pub f_u: f64,
    pub g_x: f64,
    pub g_u: f64,
}

impl Coupling {
    /// Linear coupling `G = A x + B u`, `F = C x + D u`. Rejected unless the
    /// symmetric part of `[[A, B], [C, D]]` is positive semidefinite.
    pub fn linear_block(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        let dim = a.nrows();
        Self::linear_block_with_offsets(a, b, c, d, vec![0.0; dim], vec![0.0; dim])
    }

    /// As [`Coupling::linear_block`] with constant offsets `G += g0`,
    /// `F += f0`. Constants do not change monotonicity.
    pub fn linear_block_with_offsets(
        a: Mat,
        b: Mat,
        c: Mat,
        d: Mat,
        g0: Vec<f64>,
        f0: Vec<f64>,
    ) -> Result<Self> {
        let dim = a.nrows();
        for m in [&a, &b, &c, &d] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: m.nrows() });
            }
        }
        if g0.len() != dim || f0.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: g0.len() });
        }
        let block = block_matrix(&a, &b, &c, &d);
        let min_eig = linalg::min_sym_eigenvalue(&block);
        if min_eig < -PSD_TOL {
            return Err(Error::Certificate(format!(
                "symmetric part of [[A,B],[C,D]] has eigenvalue {min_eig:.3e} < 0"
            )));
        }
        Ok(Self {
            dim,
            f: Evaluator::Linear { mx: c.clone(), mu: d.clone(), offset: f0 },
            g: Evaluator::Linear { mx: a.clone(), mu: b.clone(), offset: g0 },
            lip_f_x: linalg::op_norm(&c),
            lip_f_u: linalg::op_norm(&d),
            lip_g_x: linalg::op_norm(&a),
            lip_g_u: linalg::op_norm(&b),
            certificate: Certificate::LinearBlock { a, b, c, d },
        })
    }

    /// `F = 0`, `G = 0`.
    pub fn zero(dim: usize) -> Self {
        let z = Mat::zeros(dim, dim);
        Self::linear_block(z.clone(), z.clone(), z.clone(), z).expect("zero block is PSD")
    }

    /// Arbitrary evaluators without a monotonicity certificate.
    pub fn unverified(dim: usize, f: VecMap, g: VecMap, lip: LipschitzConstants) -> Self {
        Self {
            dim,
            f: Evaluator::Closure(f),
            g: Evaluator::Closure(g),
            lip_f_x: lip.f_x,
            lip_f_u: lip.f_u,
            lip_g_x: lip.g_x,
            lip_g_u: lip.g_u,
            certificate: Certificate::Unverified,
        }
    }

    /// `(G, F) = grad Phi` for a convex potential `Phi(x, u)`. `gradient`
    /// returns the `2d` vector `(d_x Phi, d_u Phi)`.
    pub fn convex_gradient(
        dim: usize,
        potential: Potential,
        gradient: Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
        lip: LipschitzConstants,
    ) -> Self {
        let gx = gradient.clone();
        let g: VecMap = Arc::new(move |x, u| gx(x, u)[..x.len()].to_vec());
        let gu = gradient;
        let f: VecMap = Arc::new(move |x, u| gu(x, u)[x.len()..].to_vec());
        Self {
            dim,
            f: Evaluator::Closure(f),
            g: Evaluator::Closure(g),
            lip_f_x: lip.f_x,
            lip_f_u: lip.f_u,
            lip_g_x: lip.g_x,
            lip_g_u: lip.g_u,
            certificate: Certificate::ConvexGradient { potential },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    pub fn is_certified_monotone(&self) -> bool {
        !matches!(self.certificate, Certificate::Unverified)
    }

    /// Smallest eigenvalue of the symmetric block part for linear couplings:
    /// the largest `alpha` for which `(G, F)` is `alpha`-monotone.
    pub fn linear_modulus(&self) -> Option<f64> {
        match &self.certificate {
            Certificate::LinearBlock { a, b, c, d } => {
                Some(linalg::min_sym_eigenvalue(&block_matrix(a, b, c, d)))
            }
            _ => None,
        }
    }

    pub fn f(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.f.eval_into(x, u, &mut out);
        out
    }

    pub fn g(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.g.eval_into(x, u, &mut out);
        out
    }

    #[inline]
    pub(crate) fn f_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.f.eval_into(x, u, out)
    }

    #[inline]
    pub(crate) fn g_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.g.eval_into(x, u, out)
    }
}

fn block_matrix(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Mat {
    let n = a.nrows();
    let mut m = Mat::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(a);
    m.view_mut((0, n), (n, n)).copy_from(b);
    m.view_mut((n, 0), (n, n)).copy_from(c);
    m.view_mut((n, n), (n, n)).copy_from(d);
    m
}

/// An affine jump `T(x) = S x + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineJump {
    s: Mat,
    e: Vec<f64>,
    op_norm_s: f64,
}

impl AffineJump {
    pub fn new(s: Mat, e: Vec<f64>) -> Result<Self> {
        if s.nrows() != s.ncols() || e.len() != s.nrows() {
            return Err(Error::DimensionMismatch { expected: s.nrows(), got: e.len() });
        }
        let op_norm_s = linalg::op_norm(&s);
        Ok(Self { s, e, op_norm_s })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Mat::identity(dim, dim), vec![0.0; dim]).expect("square")
    }

    /// `T(x) = center + S (x - center)`: a linear map acting about `center`.
    pub fn about(s: Mat, center: &[f64]) -> Result<Self> {
        let sc = linalg::matvec(&s, center);
        let e = center.iter().zip(&sc).map(|(c, v)| c - v).collect();
        Self::new(s, e)
    }

    pub fn dim(&self) -> usize {
        self.e.len()
    }

    pub fn is_identity(&self) -> bool {
        let d = self.dim();
        self.e.iter().all(|v| *v == 0.0)
            && (0..d).all(|i| (0..d).all(|j| self.s[(i, j)] == if i == j { 1.0 } else { 0.0 }))
    }

    pub fn s(&self) -> &Mat {
        &self.s
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    pub fn op_norm(&self) -> f64 {
        self.op_norm_s
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(x, &mut out);
        out
    }

    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        linalg::matvec_into(&self.s, x, out);
        for (o, e) in out.iter_mut().zip(&self.e) {
            *o += e;
        }
    }

    /// `T^{-1}(y) = S^{-1}(y - e)`, or `None` when `S` is singular.
    pub fn inverse(&self) -> Option<AffineJump> {
        let inv = self.s.clone().try_inverse()?;
        let e = linalg::matvec(&inv, &self.e).iter().map(|v| -v).collect();
        AffineJump::new(inv, e).ok()
    }

    /// `S^T U(S x + e)` written into `out`; `scratch` holds `T(x)`.
    #[inline]
    fn pullback_at(&self, u: &ValueField, x: &[f64], scratch: &mut [f64], val: &mut [f64], out: &mut [f64]) {
        self.apply_into(x, scratch);
        u.interpolate_into(scratch, val);
        linalg::matvec_t_into(&self.s, val, out);
    }
}

/// Jump regime in the master equation.
#[derive(Debug, Clone)]
pub enum NoiseSpec {
    None,
    /// One jump of every player at time `t1`.
    DeterministicJump { t1: f64, jump: AffineJump },
    /// All players jump together at the times of a Poisson process.
    CommonPoisson { rate: f64, jump: AffineJump },
    /// Each player jumps at the times of its own Poisson process.
    IidPoisson { rate: f64, jump: AffineJump },
    /// Common jumps drawn from a finite family of affine maps.
    Mixture { rate: f64, atoms: Vec<(AffineJump, f64)> },
}

impl NoiseSpec {
    pub fn mixture(rate: f64, atoms: Vec<(AffineJump, f64)>) -> Result<Self> {
        let spec = NoiseSpec::Mixture { rate, atoms };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let check_rate = |rate: f64| {
            if rate.is_finite() && rate >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("jump rate must be >= 0, got {rate}")))
            }
        };
        match self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::DeterministicJump { t1, .. } => {
                if *t1 > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("jump time t1 must be > 0, got {t1}")))
                }
            }
            NoiseSpec::CommonPoisson { rate, .. } | NoiseSpec::IidPoisson { rate, .. } => check_rate(*rate),
            NoiseSpec::Mixture { rate, atoms } => {
                check_rate(*rate)?;
                if atoms.is_empty() {
                    return Err(Error::InvalidParameter("mixture needs at least one atom".into()));
                }
                if atoms.iter().any(|(_, w)| !(*w >= 0.0)) {
                    return Err(Error::InvalidParameter("mixture weights must be >= 0".into()));
                }
                let total: f64 = atoms.iter().map(|(_, w)| w).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!(
                        "mixture weights sum to {total}, expected 1"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NoiseSpec::None => "none",
            NoiseSpec::DeterministicJump { .. } => "deterministic_jump",
            NoiseSpec::CommonPoisson { .. } => "common_poisson",
            NoiseSpec::IidPoisson { .. } => "iid_poisson",
            NoiseSpec::Mixture { .. } => "mixture",
        }
    }
}

/// Scheme parameters recorded alongside a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeMeta {
    /// Requested time step.
    pub dt: f64,
    /// Largest step actually taken (segments are split into equal steps).
    pub dt_used: f64,
    pub h: f64,
    /// Largest `dt / dt_limit` seen over all steps.
    pub cfl_max: f64,
    pub steps: usize,
    pub blowup_cap: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<ValueField>,
    pub meta: SchemeMeta,
}

impl Trajectory {
    pub fn grid(&self) -> &Grid {
        self.fields[0].grid()
    }

    pub fn last(&self) -> &ValueField {
        self.fields.last().expect("trajectory is never empty")
    }

    /// Field at time `t`, linear in time between recorded outputs and
    /// clamped outside `[0, t_f]`. At a recorded jump the post-jump field is
    /// used for `t` equal to the jump time.
    pub fn value_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid().dim()];
        self.value_at_into(t, x, &mut out);
        out
    }

    pub fn value_at_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let n = self.times.len();
        if t <= self.times[0] || n == 1 {
            self.fields[0].interpolate_into(x, out);
            return;
        }
        if t >= self.times[n - 1] {
            self.fields[n - 1].interpolate_into(x, out);
            return;
        }
        // last index with times[k] <= t
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        if t1 <= t0 {
            self.fields[k + 1].interpolate_into(x, out);
            return;
        }
        let w = (t - t0) / (t1 - t0);
        let d = out.len();
        let mut a = [0.0f64; 8];
        let mut b = [0.0f64; 8];
        self.fields[k].interpolate_into(x, &mut a[..d]);
        self.fields[k + 1].interpolate_into(x, &mut b[..d]);
        for i in 0..d {
            out[i] = (1.0 - w) * a[i] + w * b[i];
        }
    }
}

/// Which displayed form of the second-order limit operator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondOrderForm {
    /// `-S^T (Sx . grad) U - 2 (Sx . grad^2 . Sx) U`.
    #[default]
    Displayed,
    /// `-2 S^T (Sx . grad) U - (Sx . grad^2 . Sx) U`, the form the formal
    /// expansion of the paired jumps produces.
    Derived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsymptoticOrder {
    First,
    Second,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Abort when `sup |U|` exceeds this; defaults to `1e6 (1 + |U0|)`.
    pub blowup_cap: Option<f64>,
    /// Target number of recorded steps (outputs every `ceil(steps / n)`).
    pub max_outputs: usize,
    pub second_order_form: SecondOrderForm,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { blowup_cap: None, max_outputs: 200, second_order_form: SecondOrderForm::Displayed }
    }
}

/// Directional diffusion and mixing terms of the second-order limit.
#[derive(Debug, Clone)]
struct DirectionalTerms {
    s: Mat,
    first_coef: f64,
    second_coef: f64,
}

/// Everything one explicit step needs beyond `F` and `G`.
#[derive(Debug, Clone, Default)]
struct Operator {
    /// Extra drift `drift_lin x + drift_off` added to `F`.
    drift_lin: Option<Mat>,
    drift_off: Option<Vec<f64>>,
    /// `dU/dt += zero_order U`.
    zero_order: Option<Mat>,
    /// `dU/dt -= rate (U - S^T U(Sx + e))` for each entry.
    relax: Vec<(f64, AffineJump)>,
    discount: f64,
    directional: Option<DirectionalTerms>,
}

impl Operator {
    fn for_noise(noise: &NoiseSpec, discount: f64) -> Self {
        let mut op = Operator { discount, ..Default::default() };
        match noise {
            NoiseSpec::None | NoiseSpec::DeterministicJump { .. } => {}
            NoiseSpec::CommonPoisson { rate, jump } => {
                if *rate > 0.0 && !jump.is_identity() {
                    op.relax.push((*rate, jump.clone()));
                }
            }
            NoiseSpec::Mixture { rate, atoms } => {
                for (jump, w) in atoms {
                    if rate * w > 0.0 && !jump.is_identity() {
                        op.relax.push((rate * w, jump.clone()));
                    }
                }
            }
            NoiseSpec::IidPoisson { rate, jump } => {
                if *rate > 0.0 {
                    let d = jump.dim();
                    let id = Mat::identity(d, d);
                    // drift rate (x - T x) = rate (I - S) x - rate e
                    op.drift_lin = Some((&id - jump.s()) * *rate);
                    op.drift_off = Some(jump.e().iter().map(|e| -rate * e).collect());
                    // zero order -rate (I - S^T) U
                    op.zero_order = Some((jump.s().transpose() - id) * *rate);
                }
            }
        }
        op
    }

    fn rate_sum(&self) -> f64 {
        self.relax.iter().map(|(r, _)| r).sum::<f64>()
            + self.discount
            + self.zero_order.as_ref().map_or(0.0, linalg::op_norm)
    }
}

/// Record of the worst CFL usage in a step.
struct StepStats {
    max_drift: f64,
    /// smallest admissible dt over nodes
    dt_limit: f64,
}

/// One explicit Euler step of the operator; returns the new values.
fn explicit_step(
    u: &ValueField,
    coupling: &Coupling,
    op: &Operator,
    dt: f64,
    time: f64,
) -> Result<(ValueField, StepStats)> {
    let grid = u.grid();
    let d = grid.dim();
    if coupling.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: coupling.dim() });
    }
    let spacing = grid.spacing().to_vec();
    let nodes = grid.nodes_per_axis().to_vec();
    let strides = grid.strides().to_vec();
    let vals = u.values();
    let rate_sum = op.rate_sum();
    let h_min = spacing.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut out = vec![0.0; vals.len()];
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut tmp2 = vec![0.0; d];
    let mut pb = vec![0.0; d];
    let mut rhs = vec![0.0; d];
    let mut sx = vec![0.0; d];
    let mut dir = vec![0.0; d];
    let mut max_drift: f64 = 0.0;
    let mut dt_limit = f64::INFINITY;

    for node in 0..grid.len() {
        grid.coord_into(node, &mut x);
        let un = &vals[node * d..(node + 1) * d];
        coupling.f_into(&x, un, &mut b);
        if let Some(lin) = &op.drift_lin {
            linalg::matvec_into(lin, &x, &mut tmp);
            for a in 0..d {
                b[a] += tmp[a];
            }
        }
        if let Some(off) = &op.drift_off {
            for a in 0..d {
                b[a] += off[a];
            }
        }
        coupling.g_into(&x, un, &mut g);

        let mut courant = 0.0;
        let mut drift_norm: f64 = 0.0;
        for i in 0..d {
            rhs[i] = g[i] - op.discount * un[i];
        }
        for a in 0..d {
            let ba = b[a];
            drift_norm = drift_norm.max(ba.abs());
            courant += ba.abs() / spacing[a];
            if ba == 0.0 {
                continue;
            }
            let ia = (node / strides[a]) % nodes[a];
            let (lo, hi) = if ba > 0.0 {
                if ia == 0 {
                    continue;
                }
                (node - strides[a], node)
            } else {
                if ia + 1 == nodes[a] {
                    continue;
                }
                (node, node + strides[a])
            };
            let inv = ba / spacing[a];
            for i in 0..d {
                rhs[i] -= inv * (vals[hi * d + i] - vals[lo * d + i]);
            }
        }
        max_drift = max_drift.max(drift_norm);

        if let Some(z) = &op.zero_order {
            linalg::matvec_into(z, un, &mut tmp);
            for i in 0..d {
                rhs[i] += tmp[i];
            }
        }
        for (rate, jump) in &op.relax {
            jump.pullback_at(u, &x, &mut tmp, &mut tmp2, &mut pb);
            for i in 0..d {
                rhs[i] -= rate * (un[i] - pb[i]);
            }
        }

        let mut diffusive = 0.0;
        if let Some(dt_terms) = &op.directional {
            linalg::matvec_into(&dt_terms.s, &x, &mut sx);
            // centered directional derivative (Sx . grad) U_i
            dir.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..d {
                if sx[a] == 0.0 {
                    continue;
                }
                let ia = (node / strides[a]) % nodes[a];
                let lo = if ia == 0 { node } else { node - strides[a] };
                let hi = if ia + 1 == nodes[a] { node } else { node + strides[a] };
                for i in 0..d {
                    dir[i] += sx[a] * (vals[hi * d + i] - vals[lo * d + i]) / (2.0 * spacing[a]);
                }
            }
            linalg::matvec_t_into(&dt_terms.s, &dir, &mut tmp);
            for i in 0..d {
                rhs[i] += dt_terms.first_coef * tmp[i];
            }
            // (Sx)^T Hess(U_i) (Sx), clamped stencils at the box boundary
            for a in 0..d {
                for c in 0..d {
                    let w = sx[a] * sx[c];
                    if w == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        let second = second_difference(vals, d, i, node, a, c, &nodes, &strides, &spacing);
                        rhs[i] += dt_terms.second_coef * w * second;
                    }
                }
            }
            let v2: f64 = sx.iter().map(|v| v * v).sum();
            diffusive = 2.0 * dt_terms.second_coef * v2 / (h_min * h_min);
        }

        let local = courant + rate_sum + diffusive;
        if local > 0.0 {
            dt_limit = dt_limit.min(1.0 / local);
        }
        for i in 0..d {
            out[node * d + i] = un[i] + dt * rhs[i];
        }
    }

    if dt > dt_limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, limit: dt_limit, max_drift, rate: rate_sum });
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { time: time + dt });
    }
    Ok((ValueField::from_raw(grid.clone(), out), StepStats { max_drift, dt_limit }))
}

/// Second difference of component `i` along axes `a`, `c` at `node`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn second_difference(
    vals: &[f64],
    d: usize,
    i: usize,
    node: usize,
    a: usize,
    c: usize,
    nodes: &[usize],
    strides: &[usize],
    spacing: &[f64],
) -> f64 {
    let step = |n: usize, axis: usize, dir: isize| -> usize {
        let ia = (n / strides[axis]) % nodes[axis];
        match dir {
            1 if ia + 1 < nodes[axis] => n + strides[axis],
            -1 if ia > 0 => n - strides[axis],
            _ => n,
        }
    };
    let v = |n: usize| vals[n * d + i];
    if a == c {
        let p = step(node, a, 1);
        let m = step(node, a, -1);
        (v(p) - 2.0 * v(node) + v(m)) / (spacing[a] * spacing[a])
    } else {
        let pp = step(step(node, a, 1), c, 1);
        let pm = step(step(node, a, 1), c, -1);
        let mp = step(step(node, a, -1), c, 1);
        let mm = step(step(node, a, -1), c, -1);
        (v(pp) - v(pm) - v(mp) + v(mm)) / (4.0 * spacing[a] * spacing[c])
    }
}

/// `x -> S^T U(S x + e)` sampled on the grid nodes.
pub fn jump_pullback(u: &ValueField, jump: &AffineJump) -> Result<ValueField> {
    let grid = u.grid();
    let d = grid.dim();
    if jump.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: jump.dim() });
    }
    if jump.is_identity() {
        return Ok(u.clone());
    }
    let mut out = vec![0.0; u.values().len()];
    let mut x = vec![0.0; d];
    let mut tx = vec![0.0; d];
    let mut val = vec![0.0; d];
    for node in 0..grid.len() {
        grid.coord_into(node, &mut x);
        jump.pullback_at(u, &x, &mut tx, &mut val, &mut out[node * d..(node + 1) * d]);
    }
    Ok(ValueField::from_raw(grid.clone(), out))
}

/// One explicit upwind step of the master equation under `noise`.
///
/// A deterministic jump contributes nothing here; [`solve_master`] applies
/// it between steps.
pub fn step_master(
    u: &ValueField,
    coupling: &Coupling,
    noise: &NoiseSpec,
    t: f64,
    dt: f64,
    discount: f64,
) -> Result<ValueField> {
    noise.validate()?;
    check_step_inputs(dt, discount)?;
    let op = Operator::for_noise(noise, discount);
    explicit_step(u, coupling, &op, dt, t).map(|(f, _)| f)
}

fn check_step_inputs(dt: f64, discount: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if !(discount >= 0.0 && discount.is_finite()) {
        return Err(Error::InvalidParameter(format!("discount must be >= 0, got {discount}")));
    }
    Ok(())
}

/// Marches segments of equal-size steps and records outputs.
struct Marcher<'a> {
    coupling: &'a Coupling,
    op: Operator,
    dt: f64,
    stride: usize,
    cap: f64,
    step_index: usize,
    dt_used: f64,
    cfl_max: f64,
    times: Vec<f64>,
    fields: Vec<ValueField>,
}

impl<'a> Marcher<'a> {
    fn new(coupling: &'a Coupling, op: Operator, u0: &ValueField, t_f: f64, dt: f64, opts: &SolveOptions) -> Self {
        let total = (t_f / dt - 1e-9).ceil().max(1.0);
        let stride = ((total / opts.max_outputs.max(1) as f64).ceil() as usize).max(1);
        let cap = opts.blowup_cap.unwrap_or(1e6 * (1.0 + u0.sup_norm()));
        Self {
            coupling,
            op,
            dt,
            stride,
            cap,
            step_index: 0,
            dt_used: 0.0,
            cfl_max: 0.0,
            times: vec![0.0],
            fields: vec![u0.clone()],
        }
    }

    /// Steps from `t0` to `t1` in `ceil((t1 - t0) / dt)` equal steps.
    fn march(&mut self, mut u: ValueField, t0: f64, t1: f64) -> Result<ValueField> {
        let len = t1 - t0;
        if len <= 0.0 {
            return Ok(u);
        }
        let n = ((len / self.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = len / n as f64;
        self.dt_used = self.dt_used.max(h);
        for k in 0..n {
            let t = t0 + k as f64 * h;
            let (next, stats) = explicit_step(&u, self.coupling, &self.op, h, t)?;
            self.cfl_max = self.cfl_max.max(h / stats.dt_limit);
            let _ = stats.max_drift;
            let sup = next.sup_norm();
            let t_next = if k + 1 == n { t1 } else { t0 + (k + 1) as f64 * h };
            if sup > self.cap {
                return Err(Error::BlowUp { time: t_next, value: sup, cap: self.cap });
            }
            u = next;
            self.step_index += 1;
            if k + 1 == n || self.step_index % self.stride == 0 {
                self.times.push(t_next);
                self.fields.push(u.clone());
            }
        }
        Ok(u)
    }

    fn record(&mut self, t: f64, u: &ValueField) {
        self.times.push(t);
        self.fields.push(u.clone());
    }

    fn finish(self, u0: &ValueField) -> Trajectory {
        Trajectory {
            times: self.times,
            fields: self.fields,
            meta: SchemeMeta {
                dt: self.dt,
                dt_used: self.dt_used,
                h: u0.grid().h(),
                cfl_max: self.cfl_max,
                steps: self.step_index,
                blowup_cap: self.cap,
            },
        }
    }
}

fn check_solve_inputs(u0: &ValueField, coupling: &Coupling, t_f: f64, dt: f64, discount: f64) -> Result<()> {
    if !(t_f > 0.0 && t_f.is_finite()) {
        return Err(Error::InvalidParameter(format!("t_f must be > 0, got {t_f}")));
    }
    check_step_inputs(dt, discount)?;
    if dt > t_f {
        return Err(Error::InvalidParameter(format!("dt = {dt} exceeds t_f = {t_f}")));
    }
    if coupling.dim() != u0.dim() {
        return Err(Error::DimensionMismatch { expected: u0.dim(), got: coupling.dim() });
    }
    Ok(())
}

/// Time-marched solution of the master equation with default options.
pub fn solve_master(
    u0: &ValueField,
    coupling: &Coupling,
    noise: &NoiseSpec,
    t_f: f64,
    dt: f64,
    discount: f64,
) -> Result<Trajectory> {
    solve_master_with(u0, coupling, noise, t_f, dt, discount, &SolveOptions::default())
}

pub fn solve_master_with(
    u0: &ValueField,
    coupling: &Coupling,
    noise: &NoiseSpec,
    t_f: f64,
    dt: f64,
    discount: f64,
    opts: &SolveOptions,
) -> Result<Trajectory> {
    check_solve_inputs(u0, coupling, t_f, dt, discount)?;
    noise.validate()?;
    let op = Operator::for_noise(noise, discount);
    let mut marcher = Marcher::new(coupling, op, u0, t_f, dt, opts);
    match noise {
        NoiseSpec::DeterministicJump { t1, jump } if *t1 < t_f => {
            if jump.dim() != u0.dim() {
                return Err(Error::DimensionMismatch { expected: u0.dim(), got: jump.dim() });
            }
            let before = marcher.march(u0.clone(), 0.0, *t1)?;
            let after = jump_pullback(&before, jump)?;
            marcher.record(*t1, &after);
            marcher.march(after, *t1, t_f)?;
        }
        _ => {
            marcher.march(u0.clone(), 0.0, t_f)?;
        }
    }
    Ok(marcher.finish(u0))
}

/// Solves one of the two small-jump limit equations
///
/// ```text
/// first:  dU/dt + (F . grad) U - (Sx . grad) U - S^T U = G
/// second: dU/dt + (F . grad) U - S^T (Sx . grad) U - 2 (Sx . grad^2 . Sx) U = G
/// ```
///
/// The second-order form can be switched with
/// [`SolveOptions::second_order_form`].
pub fn solve_asymptotic(
    u0: &ValueField,
    coupling: &Coupling,
    s: &Mat,
    order: AsymptoticOrder,
    t_f: f64,
    dt: f64,
) -> Result<Trajectory> {
    solve_asymptotic_with(u0, coupling, s, order, t_f, dt, &SolveOptions::default())
}

pub fn solve_asymptotic_with(
    u0: &ValueField,
    coupling: &Coupling,
    s: &Mat,
    order: AsymptoticOrder,
    t_f: f64,
    dt: f64,
    opts: &SolveOptions,
) -> Result<Trajectory> {
    check_solve_inputs(u0, coupling, t_f, dt, 0.0)?;
    let d = u0.dim();
    if s.nrows() != d || s.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: s.nrows() });
    }
    let mut op = Operator::default();
    if s.iter().any(|v| *v != 0.0) {
        match order {
            AsymptoticOrder::First => {
                op.drift_lin = Some(-s.clone());
                op.zero_order = Some(s.transpose());
            }
            AsymptoticOrder::Second => {
                let (first_coef, second_coef) = match opts.second_order_form {
                    SecondOrderForm::Displayed => (1.0, 2.0),
                    SecondOrderForm::Derived => (2.0, 1.0),
                };
                op.directional = Some(DirectionalTerms { s: s.clone(), first_coef, second_coef });
            }
        }
    }
    let mut marcher = Marcher::new(coupling, op, u0, t_f, dt, opts);
    marcher.march(u0.clone(), 0.0, t_f)?;
    Ok(marcher.finish(u0))
}
