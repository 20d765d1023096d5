//! Mean field game systems on the one-dimensional torus.
//!
//! ```text
//! -u_t - nu u_xx + H(t, x, u_x, m) + lambda (u - psi(m)) = 0,   u(T) = phi
//!  m_t - nu m_xx - (D_p H(t, x, u_x, m) m)_x = 0,                m(0) = m0
//! ```
//!
//! Both equations are marched explicitly on `n` periodic nodes. Agents move
//! with velocity `v = -D_p H`. Where the cell Peclet number
//! `|v| h / (2 nu)` is at most 1 the HJB uses the centered gradient and the
//! Fokker-Planck flux is its discrete adjoint (centered). Elsewhere the HJB
//! uses the Engquist-Osher flux of the convex Hamiltonian and the
//! Fokker-Planck flux is upwinded. Both choices keep densities nonnegative
//! under the step restriction `dt (2 nu / h^2 + max|v| / h) <= 1`.
//!
//! Also here: the Cole-Hopf solution of `-u_t - nu u_xx + u_x^2 / 2 = 0`
//! through the exact spectral heat propagator, the strongly coupled
//! mean-control example and its scalar fixed-point equation, and the
//! large-discount limits.

use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::fields::{wasserstein1_periodic, ScalarField1D};

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `(t, x, m) -> R`.
pub type DriftFn = Arc<dyn Fn(f64, f64, &ScalarField1D) -> f64 + Send + Sync>;

/// Floor applied to the heat solution before taking its logarithm.
const W_FLOOR: f64 = 1e-300;
/// Densities below this value count as negative.
const NEG_TOL: f64 = -1e-12;

#[derive(Clone)]
pub enum HamiltonianSpec {
    /// `H(p, m) = h(p) - f(m)` with `h` convex.
    Separable {
        h: ScalarFn,
        dh: ScalarFn,
        ddh: ScalarFn,
        f: ScalarFn,
        df: ScalarFn,
    },
    /// `H(t, x, p, m) = B(t, x, m) p + delta p^2`, `delta > 0`, `B` bounded.
    Quadratic { b: DriftFn, delta: f64 },
}

impl std::fmt::Debug for HamiltonianSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HamiltonianSpec::Separable { .. } => write!(f, "Separable"),
            HamiltonianSpec::Quadratic { delta, .. } => write!(f, "Quadratic {{ delta: {delta} }}"),
        }
    }
}

impl HamiltonianSpec {
    /// `H(p, m) = p^2 / 2 - f(m)`.
    pub fn kinetic(f: ScalarFn, df: ScalarFn) -> Self {
        HamiltonianSpec::Separable {
            h: Arc::new(|p| 0.5 * p * p),
            dh: Arc::new(|p| p),
            ddh: Arc::new(|_| 1.0),
            f,
            df,
        }
    }

    /// `H = 0`.
    pub fn zero() -> Self {
        HamiltonianSpec::Separable {
            h: Arc::new(|_| 0.0),
            dh: Arc::new(|_| 0.0),
            ddh: Arc::new(|_| 0.0),
            f: Arc::new(|_| 0.0),
            df: Arc::new(|_| 0.0),
        }
    }

    pub fn quadratic(b: DriftFn, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!("delta must be > 0, got {delta}")));
        }
        Ok(HamiltonianSpec::Quadratic { b, delta })
    }

    pub fn is_separable(&self) -> bool {
        matches!(self, HamiltonianSpec::Separable { .. })
    }

    /// `B(t, x_i, m)` at every node, or `None` for separable Hamiltonians.
    fn node_b(&self, t: f64, m: &ScalarField1D) -> Option<Vec<f64>> {
        match self {
            HamiltonianSpec::Separable { .. } => None,
            HamiltonianSpec::Quadratic { b, .. } => Some((0..m.len()).map(|i| b(t, m.x(i), m)).collect()),
        }
    }

    #[inline]
    fn value(&self, b: f64, p: f64, m: f64) -> f64 {
        match self {
            HamiltonianSpec::Separable { h, f, .. } => h(p) - f(m),
            HamiltonianSpec::Quadratic { delta, .. } => b * p + delta * p * p,
        }
    }

    #[inline]
    fn dp(&self, b: f64, p: f64) -> f64 {
        match self {
            HamiltonianSpec::Separable { dh, .. } => dh(p),
            HamiltonianSpec::Quadratic { delta, .. } => b + 2.0 * delta * p,
        }
    }

    #[inline]
    fn dpp(&self, p: f64) -> f64 {
        match self {
            HamiltonianSpec::Separable { ddh, .. } => ddh(p),
            HamiltonianSpec::Quadratic { delta, .. } => 2.0 * delta,
        }
    }

    /// Derivative in the density slot.
    #[inline]
    fn dz(&self, m: f64) -> f64 {
        match self {
            HamiltonianSpec::Separable { df, .. } => -df(m),
            HamiltonianSpec::Quadratic { .. } => 0.0,
        }
    }
}

/// Minimiser of a convex function of `p`, possibly at infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PStar {
    At(f64),
    MinusInf,
    PlusInf,
}

fn separable_pstar(dh: &ScalarFn) -> PStar {
    let d0 = dh(0.0);
    if d0 == 0.0 {
        return PStar::At(0.0);
    }
    let dir = if d0 > 0.0 { -1.0 } else { 1.0 };
    let mut far = dir;
    while dh(far).signum() == d0.signum() {
        if far.abs() > 1e8 {
            return if d0 > 0.0 { PStar::MinusInf } else { PStar::PlusInf };
        }
        far *= 2.0;
    }
    let (mut lo, mut hi) = if dir < 0.0 { (far, 0.0) } else { (0.0, far) };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dh(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    PStar::At(0.5 * (lo + hi))
}

/// Per-step view of the Hamiltonian with node data resolved.
struct Frozen<'a> {
    ham: &'a HamiltonianSpec,
    b: Option<Vec<f64>>,
    sep_pstar: PStar,
}

impl<'a> Frozen<'a> {
    fn new(ham: &'a HamiltonianSpec, sep_pstar: PStar, t: f64, m: &ScalarField1D) -> Self {
        Self { ham, b: ham.node_b(t, m), sep_pstar }
    }

    #[inline]
    fn b(&self, i: usize) -> f64 {
        self.b.as_ref().map_or(0.0, |b| b[i])
    }

    fn pstar(&self, i: usize) -> PStar {
        match self.ham {
            HamiltonianSpec::Separable { .. } => self.sep_pstar,
            HamiltonianSpec::Quadratic { delta, .. } => PStar::At(-self.b(i) / (2.0 * delta)),
        }
    }

    /// Engquist-Osher numerical Hamiltonian at node `i`.
    fn eo(&self, i: usize, pm: f64, pp: f64, m: f64) -> f64 {
        let b = self.b(i);
        let h = |p| self.ham.value(b, p, m);
        match self.pstar(i) {
            PStar::At(ps) => h(pm.max(ps)) + h(pp.min(ps)) - h(ps),
            PStar::MinusInf => h(pm),
            PStar::PlusInf => h(pp),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries1D {
    pub times: Vec<f64>,
    pub fields: Vec<ScalarField1D>,
}

impl TimeSeries1D {
    pub fn last(&self) -> &ScalarField1D {
        self.fields.last().expect("non-empty")
    }

    pub fn n(&self) -> usize {
        self.fields[0].len()
    }
}

fn time_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidParameter(format!("horizon must be > 0, got {horizon}")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    let n = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((0..=n).map(|k| horizon * k as f64 / n as f64).collect())
}

fn check_nu(nu: f64) -> Result<()> {
    if nu >= 0.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("nu must be >= 0, got {nu}")))
    }
}

fn check_density(m0: &ScalarField1D) -> Result<()> {
    if m0.is_density(1e-8) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "m0 must be a nonnegative unit-mass density (mass {}, min {})",
            m0.mass(),
            m0.min()
        )))
    }
}

/// Solution of `-u_t - nu u_xx + u_x^2 / 2 = 0`, `u(T) = phi` on
/// `[0, horizon]` through `u = -2 nu log w` with `w` propagated exactly by
/// the periodic heat semigroup. Sampled every `dt` (rounded to divide the
/// horizon).
pub fn cole_hopf_hjb(phi: &ScalarField1D, nu: f64, horizon: f64, dt: f64) -> Result<TimeSeries1D> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidParameter(format!("nu must be > 0, got {nu}")));
    }
    let times = time_grid(horizon, dt)?;
    let n = phi.len();
    let shift = phi.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spectrum: Vec<Complex<f64>> = phi
        .values()
        .iter()
        .map(|p| Complex::new((-(p - shift) / (2.0 * nu)).exp(), 0.0))
        .collect();
    fwd.process(&mut spectrum);
    let wavenumber = |j: usize| -> f64 {
        let k = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
        2.0 * std::f64::consts::PI * k
    };
    let mut floored = 0usize;
    let fields = times
        .iter()
        .map(|t| {
            let tau = horizon - t;
            let mut buf: Vec<Complex<f64>> = spectrum
                .iter()
                .enumerate()
                .map(|(j, c)| c * (-nu * wavenumber(j).powi(2) * tau).exp())
                .collect();
            inv.process(&mut buf);
            let vals = buf
                .iter()
                .map(|c| {
                    let mut w = c.re / n as f64;
                    if w < W_FLOOR {
                        floored += 1;
                        w = W_FLOOR;
                    }
                    -2.0 * nu * w.ln() + shift
                })
                .collect();
            ScalarField1D::from_raw(vals)
        })
        .collect();
    if floored > 0 {
        warn!("cole_hopf_hjb: heat solution floored at {W_FLOOR:e} at {floored} samples");
    }
    Ok(TimeSeries1D { times, fields })
}

/// Largest finite-difference residual of `-u_t - nu u_xx + u_x^2 / 2` over
/// all time levels but the last (forward time difference, centered space).
pub fn hjb_residual(u: &TimeSeries1D, nu: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..u.times.len() - 1 {
        let dt = u.times[k + 1] - u.times[k];
        let (a, b) = (&u.fields[k], &u.fields[k + 1]);
        let lap = a.laplacian();
        let grad = a.centered_gradient();
        for i in 0..a.len() {
            let ut = (b.values()[i] - a.values()[i]) / dt;
            let r = -ut - nu * lap[i] + 0.5 * grad[i] * grad[i];
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Per face `i + 1/2`: velocity seen from the left node and from the right
/// node.
type FaceSpeeds = Vec<(f64, f64)>;

/// Explicit Fokker-Planck march; `speeds(k, m)` gives face velocities for
/// the step from `times[k]` to `times[k + 1]`.
fn fp_march(
    m0: &ScalarField1D,
    nu: f64,
    times: &[f64],
    mut speeds: impl FnMut(usize, &ScalarField1D) -> Result<FaceSpeeds>,
) -> Result<Vec<ScalarField1D>> {
    let n = m0.len();
    let h = m0.h();
    let mut out = Vec::with_capacity(times.len());
    out.push(m0.clone());
    let mut flux = vec![0.0; n];
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        let m = &out[k];
        let faces = speeds(k, m)?;
        let mut vmax: f64 = 0.0;
        for (i, &(a, b)) in faces.iter().enumerate() {
            vmax = vmax.max(a.abs()).max(b.abs());
            let (mi, mj) = (m.get(i as isize), m.get(i as isize + 1));
            let centered = nu > 0.0 && a.abs().max(b.abs()) * h <= 2.0 * nu;
            flux[i] = if centered { 0.5 * (a * mi + b * mj) } else { a.max(0.0) * mi + b.min(0.0) * mj };
        }
        let rate = 2.0 * nu / (h * h) + vmax / h;
        if dt * rate > 1.0 + 1e-12 {
            return Err(Error::Cfl { dt, limit: 1.0 / rate, max_drift: vmax, rate: 2.0 * nu / (h * h) });
        }
        let lap = m.laplacian();
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let left = flux[(i + n - 1) % n];
                m.values()[i] + dt * (nu * lap[i] - (flux[i] - left) / h)
            })
            .collect();
        if let Some((i, v)) = next.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < NEG_TOL) {
            if !v.is_finite() {
                return Err(Error::NonFinite { time: times[k + 1] });
            }
            return Err(Error::NegativeDensity { time: times[k + 1], node: i, value: *v });
        }
        out.push(ScalarField1D::from_raw(next));
    }
    Ok(out)
}

fn node_to_faces(v: &[f64]) -> FaceSpeeds {
    let n = v.len();
    (0..n).map(|i| (v[i], v[(i + 1) % n])).collect()
}

/// `m_t - nu m_xx - (B m)_x = 0`: agents move with velocity `-B`.
pub fn solve_fp(drift: &DriftFn, nu: f64, m0: &ScalarField1D, horizon: f64, dt: f64) -> Result<TimeSeries1D> {
    check_nu(nu)?;
    check_density(m0)?;
    let times = time_grid(horizon, dt)?;
    let fields = fp_march(m0, nu, &times, |k, m| {
        let v: Vec<f64> = (0..m.len()).map(|i| -drift(times[k], m.x(i), m)).collect();
        Ok(node_to_faces(&v))
    })?;
    Ok(TimeSeries1D { times, fields })
}

/// Fokker-Planck equation with velocity `-D_p H(t, x, 0, m)`: the
/// no-anticipation limit of the discounted system.
pub fn solve_fp_limit(ham: &HamiltonianSpec, nu: f64, m0: &ScalarField1D, horizon: f64, dt: f64) -> Result<TimeSeries1D> {
    check_nu(nu)?;
    check_density(m0)?;
    let times = time_grid(horizon, dt)?;
    let pstar = sep_pstar(ham);
    let fields = fp_march(m0, nu, &times, |k, m| {
        let fz = Frozen::new(ham, pstar, times[k], m);
        let v: Vec<f64> = (0..m.len()).map(|i| -ham.dp(fz.b(i), 0.0)).collect();
        Ok(node_to_faces(&v))
    })?;
    Ok(TimeSeries1D { times, fields })
}

fn sep_pstar(ham: &HamiltonianSpec) -> PStar {
    match ham {
        HamiltonianSpec::Separable { dh, .. } => separable_pstar(dh),
        HamiltonianSpec::Quadratic { .. } => PStar::At(0.0),
    }
}

/// Fokker-Planck equation whose velocity is `-D_p H(p, m)` with
/// `p = scale * d/dx g(m)`, evaluated on faces. Checks the effective
/// diffusion `nu + scale m g'(m) D_pp H` stays nonnegative.
fn solve_fp_gradient_drift(
    ham: &HamiltonianSpec,
    g: &ScalarFn,
    dg: &ScalarFn,
    scale: f64,
    nu: f64,
    m0: &ScalarField1D,
    horizon: f64,
    dt: f64,
) -> Result<TimeSeries1D> {
    check_nu(nu)?;
    check_density(m0)?;
    let times = time_grid(horizon, dt)?;
    let pstar = sep_pstar(ham);
    let fields = fp_march(m0, nu, &times, |k, m| {
        let n = m.len();
        let h = m.h();
        let fz = Frozen::new(ham, pstar, times[k], m);
        let gm: Vec<f64> = m.values().iter().map(|v| g(*v)).collect();
        let mut faces = Vec::with_capacity(n);
        let (mut eff_max, mut w_max): (f64, f64) = (nu, 0.0);
        for i in 0..n {
            let j = (i + 1) % n;
            let p = scale * (gm[j] - gm[i]) / h;
            let mf = 0.5 * (m.values()[i] + m.values()[j]);
            let eff = nu + scale * mf * dg(mf) * ham.dpp(p);
            if eff < 0.0 {
                return Err(Error::EffectiveDiffusion { x: (i as f64 + 0.5) * h, m: mf, value: eff });
            }
            let b = 0.5 * (fz.b(i) + fz.b(j));
            let w = -ham.dp(b, p);
            eff_max = eff_max.max(eff);
            w_max = w_max.max(w.abs());
            faces.push((w, w));
        }
        // the drift carries a nonlinear diffusion; the plain step check in
        // fp_march only sees nu
        let step = times[k + 1] - times[k];
        let rate = 2.0 * eff_max / (h * h) + w_max / h;
        if step * rate > 1.0 + 1e-12 {
            return Err(Error::Cfl { dt: step, limit: 1.0 / rate, max_drift: w_max, rate: 2.0 * eff_max / (h * h) });
        }
        Ok(faces)
    })?;
    Ok(TimeSeries1D { times, fields })
}

/// Corrected Fokker-Planck equation with velocity
/// `-D_p H(x, d/dx(-H(x, 0, m) / lambda), m)` for a separable Hamiltonian.
pub fn solve_fp_higher_order(
    ham: &HamiltonianSpec,
    lambda_disc: f64,
    nu: f64,
    m0: &ScalarField1D,
    horizon: f64,
    dt: f64,
) -> Result<TimeSeries1D> {
    let HamiltonianSpec::Separable { f, df, .. } = ham else {
        return Err(Error::InvalidParameter("higher-order correction needs a separable Hamiltonian".into()));
    };
    if !(lambda_disc > 0.0 && lambda_disc.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be > 0, got {lambda_disc}")));
    }
    // -H(x, 0, m) / lambda = (f(m) - h(0)) / lambda; the constant drops out
    solve_fp_gradient_drift(ham, f, df, 1.0 / lambda_disc, nu, m0, horizon, dt)
}

/// Closed-form effective diffusion `nu - m D_z H D_pp H / lambda` of the
/// corrected equation at density `m` and momentum `p`.
pub fn effective_diffusion(ham: &HamiltonianSpec, lambda_disc: f64, nu: f64, m: f64, p: f64) -> f64 {
    nu - m * ham.dz(m) * ham.dpp(p) / lambda_disc
}

/// Limit of the relative-running-cost system: velocity
/// `-D_p H(x, d/dx psi(m), m)`.
pub fn solve_relative_cost_limit(
    ham: &HamiltonianSpec,
    psi: &ScalarFn,
    dpsi: &ScalarFn,
    nu: f64,
    m0: &ScalarField1D,
    horizon: f64,
    dt: f64,
) -> Result<TimeSeries1D> {
    solve_fp_gradient_drift(ham, psi, dpsi, 1.0, nu, m0, horizon, dt)
}

#[derive(Clone)]
pub enum Terminal {
    Fixed(ScalarField1D),
    /// `u(T, x) = g(m(T, x))`.
    Local(ScalarFn),
}

impl std::fmt::Debug for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Terminal::Fixed(_) => write!(f, "Fixed"),
            Terminal::Local(_) => write!(f, "Local"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitialGuess {
    /// Pure heat evolution of `m0`.
    #[default]
    HeatSmoothed,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    pub max_iter: usize,
    pub damping: f64,
    pub tol: f64,
    pub initial: InitialGuess,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { max_iter: 200, damping: 0.5, tol: 1e-7, initial: InitialGuess::HeatSmoothed }
    }
}

#[derive(Clone)]
pub struct MfgProblem {
    pub ham: HamiltonianSpec,
    pub lambda_disc: f64,
    pub psi: Option<ScalarFn>,
    pub nu: f64,
    pub horizon: f64,
    pub m0: ScalarField1D,
    pub terminal: Terminal,
    pub dt: f64,
}

impl std::fmt::Debug for MfgProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfgProblem")
            .field("ham", &self.ham)
            .field("lambda_disc", &self.lambda_disc)
            .field("psi", &self.psi.is_some())
            .field("nu", &self.nu)
            .field("horizon", &self.horizon)
            .field("n", &self.m0.len())
            .field("terminal", &self.terminal)
            .field("dt", &self.dt)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfgSolution1D {
    pub times: Vec<f64>,
    pub u: Vec<ScalarField1D>,
    pub m: Vec<ScalarField1D>,
    pub picard_iterations: usize,
    /// Fixed-point gap after each iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Backward explicit HJB sweep against a given density path.
fn hjb_march(p: &MfgProblem, pstar: PStar, times: &[f64], m: &[ScalarField1D]) -> Result<Vec<ScalarField1D>> {
    let n = p.m0.len();
    let h = p.m0.h();
    let nt = times.len();
    let terminal = match &p.terminal {
        Terminal::Fixed(phi) => {
            if phi.len() != n {
                return Err(Error::GridMismatch);
            }
            phi.clone()
        }
        Terminal::Local(g) => ScalarField1D::from_raw(m[nt - 1].values().iter().map(|v| g(*v)).collect()),
    };
    let mut u = vec![terminal; nt];
    for k in (0..nt - 1).rev() {
        let dt = times[k + 1] - times[k];
        let (un, mn) = (&u[k + 1], &m[k + 1]);
        let fz = Frozen::new(&p.ham, pstar, times[k + 1], mn);
        let lap = un.laplacian();
        let mut speed: f64 = 0.0;
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let ii = i as isize;
                let (ul, uc, ur) = (un.get(ii - 1), un.get(ii), un.get(ii + 1));
                let pm = (uc - ul) / h;
                let pp = (ur - uc) / h;
                let pc = 0.5 * (pm + pp);
                let mi = mn.values()[i];
                let b = fz.b(i);
                let v = p.ham.dp(b, pc);
                speed = speed.max(v.abs()).max(p.ham.dp(b, pm).abs()).max(p.ham.dp(b, pp).abs());
                let hn = if p.nu > 0.0 && v.abs() * h <= 2.0 * p.nu {
                    p.ham.value(b, pc, mi)
                } else {
                    fz.eo(i, pm, pp, mi)
                };
                let target = p.psi.as_ref().map_or(0.0, |psi| psi(mi));
                uc + dt * (p.nu * lap[i] - hn - p.lambda_disc * (uc - target))
            })
            .collect();
        let rate = 2.0 * p.nu / (h * h) + speed / h + p.lambda_disc;
        if dt * rate > 1.0 + 1e-12 {
            return Err(Error::Cfl { dt, limit: 1.0 / rate, max_drift: speed, rate: p.lambda_disc });
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { time: times[k] });
        }
        u[k] = ScalarField1D::from_raw(next);
    }
    Ok(u)
}

/// Forward FP sweep with velocity `-D_p H(t, x, u_x, m)` from a value path.
fn fp_from_values(p: &MfgProblem, pstar: PStar, times: &[f64], u: &[ScalarField1D]) -> Result<Vec<ScalarField1D>> {
    fp_march(&p.m0, p.nu, times, |k, m| {
        let fz = Frozen::new(&p.ham, pstar, times[k], m);
        let grad = u[k].centered_gradient();
        let v: Vec<f64> = (0..m.len()).map(|i| -p.ham.dp(fz.b(i), grad[i])).collect();
        Ok(node_to_faces(&v))
    })
}

fn sup_gap(a: &[ScalarField1D], b: &[ScalarField1D]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Damped Picard iteration between the backward HJB and forward FP sweeps.
///
/// Non-convergence is not an error: the partial result comes back with
/// `converged = false`.
pub fn solve_mfg_discounted(p: &MfgProblem, opts: &PicardOptions) -> Result<MfgSolution1D> {
    check_nu(p.nu)?;
    check_density(&p.m0)?;
    if !(p.lambda_disc >= 0.0 && p.lambda_disc.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", p.lambda_disc)));
    }
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidParameter(format!("damping must lie in (0, 1], got {}", opts.damping)));
    }
    let times = time_grid(p.horizon, p.dt)?;
    let pstar = sep_pstar(&p.ham);
    let n = p.m0.len();
    let mut m: Vec<ScalarField1D> = match opts.initial {
        InitialGuess::HeatSmoothed => fp_march(&p.m0, p.nu, &times, |_, _| Ok(vec![(0.0, 0.0); n]))?,
        InitialGuess::Uniform => {
            let mut g = vec![ScalarField1D::from_raw(vec![1.0; n]); times.len()];
            g[0] = p.m0.clone();
            g
        }
    };
    let mut u_prev: Option<Vec<ScalarField1D>> = None;
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut u = Vec::new();
    for _ in 0..opts.max_iter {
        u = hjb_march(p, pstar, &times, &m)?;
        let m_new = fp_from_values(p, pstar, &times, &u)?;
        let th = opts.damping;
        let damped: Vec<ScalarField1D> = m
            .iter()
            .zip(&m_new)
            .map(|(a, b)| {
                ScalarField1D::from_raw(a.values().iter().zip(b.values()).map(|(x, y)| (1.0 - th) * x + th * y).collect())
            })
            .collect();
        let gap_m = sup_gap(&damped, &m);
        let gap_u = u_prev.as_ref().map_or(f64::INFINITY, |prev| sup_gap(&u, prev));
        let gap = gap_m.max(gap_u);
        residuals.push(gap);
        m = damped;
        u_prev = Some(u.clone());
        if gap <= opts.tol {
            converged = true;
            break;
        }
    }
    // report the value path consistent with the final density path
    if converged {
        u = hjb_march(p, pstar, &times, &m)?;
    }
    Ok(MfgSolution1D { times, picard_iterations: residuals.len(), u, m, residuals, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSeries {
    pub times: Vec<f64>,
    /// `h sum D u(t) m(t)` with the centered difference `D`.
    pub a: Vec<f64>,
    pub max_drift: f64,
}

pub fn conserved_momentum(sol: &MfgSolution1D) -> MomentumSeries {
    let a: Vec<f64> = sol
        .u
        .iter()
        .zip(&sol.m)
        .map(|(u, m)| {
            let g = u.centered_gradient();
            u.h() * g.iter().zip(m.values()).map(|(x, y)| x * y).sum::<f64>()
        })
        .collect();
    let max_drift = a.iter().map(|v| (v - a[0]).abs()).fold(0.0, f64::max);
    MomentumSeries { times: sol.times.clone(), a, max_drift }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRange {
    pub a_min: f64,
    pub a_max: f64,
    pub n_scan: usize,
}

impl Default for ScanRange {
    fn default() -> Self {
        Self { a_min: -5.0, a_max: 5.0, n_scan: 2001 }
    }
}

#[derive(Debug, Clone)]
pub struct StrongCouplingParams {
    pub lambda_ctrl: f64,
    pub nu: f64,
    pub horizon: f64,
    pub dt: f64,
    pub scan: ScanRange,
    /// Semiconcavity constant of the terminal data, when known.
    pub c: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StrongCouplingResult {
    pub a_grid: Vec<f64>,
    pub phi_of_a: Vec<f64>,
    pub roots: Vec<f64>,
    pub solutions: Vec<MfgSolution1D>,
    pub threshold: Option<f64>,
    pub u0: TimeSeries1D,
}

impl StrongCouplingResult {
    /// True when `A - Phi(A)` increases between every pair of scan points.
    pub fn strictly_increasing(&self) -> bool {
        let g: Vec<f64> = self.a_grid.iter().zip(&self.phi_of_a).map(|(a, p)| a - p).collect();
        g.windows(2).all(|w| w[1] > w[0])
    }
}

/// `Phi(A) = h sum m0_i D u0(0)(x_i + lambda A T)`.
pub fn mean_control_map(u0_at_zero: &ScalarField1D, m0: &ScalarField1D, lambda_ctrl: f64, horizon: f64, a: f64) -> f64 {
    let grad = ScalarField1D::from_raw(u0_at_zero.centered_gradient());
    let shifted = grad.translated(lambda_ctrl * a * horizon);
    m0.h() * shifted.values().iter().zip(m0.values()).map(|(g, m)| g * m).sum::<f64>()
}

/// Sign changes of `A - Phi(A)` on a uniform scan, refined by bisection.
fn scan_roots(g: &dyn Fn(f64) -> f64, scan: &ScanRange) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = scan.n_scan.max(2);
    let grid: Vec<f64> = (0..n)
        .map(|k| scan.a_min + (scan.a_max - scan.a_min) * k as f64 / (n - 1) as f64)
        .collect();
    let vals: Vec<f64> = grid.iter().map(|a| g(*a)).collect();
    let mut roots = Vec::new();
    for k in 0..n {
        if vals[k] == 0.0 {
            roots.push(grid[k]);
            continue;
        }
        if k + 1 < n && vals[k + 1] != 0.0 && vals[k].signum() != vals[k + 1].signum() {
            let (mut lo, mut hi) = (grid[k], grid[k + 1]);
            let s_lo = vals[k].signum();
            while hi - lo > 1e-10 {
                let mid = 0.5 * (lo + hi);
                if g(mid).signum() == s_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
    }
    (grid, vals, roots)
}

/// Strongly coupled example: the HJB with mean-control term
/// `-lambda A u_x` and `A = int u_x m`. Each root of `A = Phi(A)` gives a
/// solution `u(t, x) = u0(t, x + lambda A (T - t))`, with the density from
/// the Fokker-Planck equation with velocity `-(u_x - lambda A)`.
pub fn solve_strong_coupling(phi: &ScalarField1D, m0: &ScalarField1D, params: &StrongCouplingParams) -> Result<StrongCouplingResult> {
    check_density(m0)?;
    if phi.len() != m0.len() {
        return Err(Error::GridMismatch);
    }
    let StrongCouplingParams { lambda_ctrl, nu, horizon, dt, scan, c } = params.clone();
    if !(scan.a_max > scan.a_min) || scan.n_scan < 2 {
        return Err(Error::InvalidParameter("scan range must be increasing with n_scan >= 2".into()));
    }
    let u0 = cole_hopf_hjb(phi, nu, horizon, dt)?;
    let at_zero = u0.fields[0].clone();
    let phi_map = |a: f64| mean_control_map(&at_zero, m0, lambda_ctrl, horizon, a);
    let (a_grid, g_vals, roots) = scan_roots(&|a| a - phi_map(a), &scan);
    let phi_of_a = a_grid.iter().zip(&g_vals).map(|(a, g)| a - g).collect();
    let solutions = roots
        .iter()
        .map(|&a| {
            let u: Vec<ScalarField1D> = u0
                .times
                .iter()
                .zip(&u0.fields)
                .map(|(t, f)| f.translated(lambda_ctrl * a * (horizon - t)))
                .collect();
            let mut m = vec![m0.clone()];
            for k in 0..u.len() - 1 {
                let v: Vec<f64> = u[k].centered_gradient().iter().map(|g| -(g - lambda_ctrl * a)).collect();
                let faces = node_to_faces(&v);
                let step = u0.times[k + 1] - u0.times[k];
                let sub = substep_times(step, nu, m0.h(), &v);
                let next = fp_march(&m[k], nu, &sub, |_, _| Ok(faces.clone()))?;
                m.push(next.into_iter().last().expect("non-empty"));
            }
            Ok(MfgSolution1D { times: u0.times.clone(), u, m, picard_iterations: 0, residuals: vec![], converged: true })
        })
        .collect::<Result<Vec<_>>>()?;
    let threshold = c.map(|c| uniqueness_threshold(c, horizon));
    Ok(StrongCouplingResult { a_grid, phi_of_a, roots, solutions, threshold, u0 })
}

/// Uniform substeps of `[0, step]` inside the Fokker-Planck step limit.
fn substep_times(step: f64, nu: f64, h: f64, v: &[f64]) -> Vec<f64> {
    let vmax = v.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    let rate = 2.0 * nu / (h * h) + vmax / h;
    let n = (step * rate / 0.9).ceil().max(1.0) as usize;
    (0..=n).map(|j| step * j as f64 / n as f64).collect()
}

/// `(1 + c T) / (c T)`: uniqueness of the mean-control fixed point holds for
/// `lambda_ctrl` below this value.
pub fn uniqueness_threshold(c: f64, horizon: f64) -> f64 {
    (1.0 + c * horizon) / (c * horizon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Semiconcavity {
    pub holds: bool,
    /// `max (D^2 u0(t) - c / (1 + c (T - t)))` over times and nodes.
    pub max_violation: f64,
    pub tol: f64,
}

/// Compares second differences of `u0` to `c / (1 + c (T - t))`, with
/// tolerance `10 (h^2 + dt)`.
pub fn semiconcavity_check(u0: &TimeSeries1D, c: f64) -> Semiconcavity {
    let horizon = *u0.times.last().expect("non-empty");
    let h = u0.fields[0].h();
    let dt = if u0.times.len() > 1 { u0.times[1] - u0.times[0] } else { 0.0 };
    let tol = 10.0 * (h * h + dt);
    let mut worst = f64::NEG_INFINITY;
    for (t, f) in u0.times.iter().zip(&u0.fields) {
        let bound = c / (1.0 + c * (horizon - t));
        for v in f.laplacian() {
            worst = worst.max(v - bound);
        }
    }
    Semiconcavity { holds: worst <= tol, max_violation: worst, tol }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `f64::INFINITY` for the limit row.
    pub lambda: f64,
    /// `sup_t |u(t)|_2`.
    pub u_l2_sup: f64,
    /// `max_t W1(m_lambda(t), m_inf(t))`.
    pub w1_max: f64,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
}

/// Solves the discounted system for each `lambda` and compares against the
/// no-anticipation limit. Rows run in parallel; failures are recorded per
/// row and the table is always returned.
pub fn lambda_sweep(lambdas: &[f64], base: &MfgProblem, opts: &PicardOptions) -> Result<Vec<SweepRow>> {
    let limit = solve_fp_limit(&base.ham, base.nu, &base.m0, base.horizon, base.dt)?;
    let mut rows: Vec<SweepRow> = lambdas
        .par_iter()
        .map(|&lambda| {
            let p = MfgProblem { lambda_disc: lambda, ..base.clone() };
            match solve_mfg_discounted(&p, opts) {
                Ok(sol) => {
                    let u_l2_sup = sol.u.iter().map(|u| u.l2_norm()).fold(0.0, f64::max);
                    let w1_max = sol
                        .m
                        .iter()
                        .zip(&limit.fields)
                        .map(|(a, b)| wasserstein1_periodic(a, b).unwrap_or(f64::NAN))
                        .fold(0.0, f64::max);
                    SweepRow { lambda, u_l2_sup, w1_max, converged: sol.converged, iterations: sol.picard_iterations, error: None }
                }
                Err(e) => SweepRow {
                    lambda,
                    u_l2_sup: f64::NAN,
                    w1_max: f64::NAN,
                    converged: false,
                    iterations: 0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    rows.push(SweepRow { lambda: f64::INFINITY, u_l2_sup: 0.0, w1_max: 0.0, converged: true, iterations: 0, error: None });
    Ok(rows)
}
