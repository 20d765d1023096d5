//! Characteristic curves of the master equation.
//!
//! * Deterministic characteristics `Y' = F(Y, V)`, `V' = G(Y, V)` started
//!   from `(x0, U0(x0))`.
//! * Jump characteristics: `Y` is pinned at the final time and run backward
//!   through Poisson jump times, then `V` runs forward from `U0(Y_0)`. The
//!   sample mean of `V_t` estimates `U(t, x0)`.
//! * The agent-based jump flow `Y' = F(Y, 0)` with `Y -> T Y` at jumps.
//!
//! All ODE segments use classical RK4.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::master_eq::{AffineJump, Coupling, Trajectory};
use crate::rng::{derive_seed, XorShift64Star};

/// Largest condition number of `S` accepted when jumps must be inverted.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct CharPath {
    pub times: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Jump times; each appears twice in `times` (before and after).
    pub jump_times: Vec<f64>,
    pub seed: Option<u64>,
    /// True when some sample of `Y` left the solver box.
    pub left_box: bool,
}

impl CharPath {
    pub fn final_y(&self) -> &[f64] {
        self.y.last().expect("path is never empty")
    }

    pub fn final_v(&self) -> &[f64] {
        self.v.last().expect("path is never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
    /// Average number of jumps per path.
    pub mean_jumps: f64,
}

/// How `Y` crosses a jump when run backward from the pinned final time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JumpOrientation {
    /// `Y(t_i-) = T^{-1} Y(t_i+)`; needs invertible `S`.
    #[default]
    Inverse,
    /// `Y(t_i-) = T Y(t_i+)`. With this orientation `E[V_t]` solves the
    /// Poisson master equation `... + rate (U - S^T U(Tx)) = G`.
    Forward,
}

/// How the discount enters the value channel between jumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiscountForm {
    /// `V' = G - discount V`.
    #[default]
    Decay,
    /// `d(e^{discount s} V) = G ds`, i.e. `V' = e^{-discount s} G - discount V`.
    Integrating,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JumpCharOptions {
    pub orientation: JumpOrientation,
    pub discount_form: DiscountForm,
}

fn rk4<F>(f: &F, t: f64, y: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let n = y.len();
    let k1 = f(t, y);
    let tmp: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    let k2 = f(t + 0.5 * h, &tmp);
    let tmp: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
    let k3 = f(t + 0.5 * h, &tmp);
    let tmp: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
    let k4 = f(t + h, &tmp);
    (0..n)
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn steps_for(len: f64, dt: f64) -> usize {
    ((len.abs() / dt) - 1e-9).ceil().max(1.0) as usize
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")))
    }
}

/// Integrates the joint `(Y, V)` system from 0 and returns its state at each
/// checkpoint (increasing, first one 0).
fn integrate_fb(
    x0: &[f64],
    v0: &[f64],
    coupling: &Coupling,
    checkpoints: &[f64],
    dt: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let d = x0.len();
    let rhs = |_: f64, z: &[f64]| {
        let (y, v) = z.split_at(d);
        let mut out = coupling.f(y, v);
        out.extend(coupling.g(y, v));
        out
    };
    let mut z: Vec<f64> = x0.iter().chain(v0).cloned().collect();
    let mut out = vec![(x0.to_vec(), v0.to_vec())];
    for w in checkpoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b > a {
            let n = steps_for(b - a, dt);
            let h = (b - a) / n as f64;
            for k in 0..n {
                z = rk4(&rhs, a + k as f64 * h, &z, h);
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { time: a + (k + 1) as f64 * h });
                }
            }
        }
        out.push((z[..d].to_vec(), z[d..].to_vec()));
    }
    Ok(out)
}

/// RK4 for `Y' = F(Y, V)`, `V' = G(Y, V)`, `Y(0) = x0`, `V(0) = U0(x0)`,
/// sampled every `dt` (last step shortened to land on `t_f`).
pub fn solve_fb_characteristics(
    x0: &[f64],
    u0_eval: &dyn Fn(&[f64]) -> Vec<f64>,
    coupling: &Coupling,
    t_f: f64,
    dt: f64,
) -> Result<CharPath> {
    if !(t_f > 0.0 && t_f.is_finite()) {
        return Err(Error::InvalidParameter(format!("t_f must be > 0, got {t_f}")));
    }
    check_dt(dt)?;
    if x0.len() != coupling.dim() {
        return Err(Error::DimensionMismatch { expected: coupling.dim(), got: x0.len() });
    }
    let n = steps_for(t_f, dt);
    let times: Vec<f64> = (0..=n).map(|k| t_f * k as f64 / n as f64).collect();
    let v0 = u0_eval(x0);
    let states = integrate_fb(x0, &v0, coupling, &times, dt)?;
    let (y, v) = states.into_iter().unzip();
    Ok(CharPath { times, y, v, jump_times: vec![], seed: None, left_box: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointGap {
    pub x0: Vec<f64>,
    /// `sup_t |U(t, Y(t)) - V(t)|` over output times while `Y` is in the box.
    pub max_gap: f64,
    pub left_box: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharCompareReport {
    pub points: Vec<PointGap>,
    pub max_gap: f64,
}

/// Integrates characteristics from each sample point and measures how far
/// `V(t)` is from the grid solution evaluated at `Y(t)`.
pub fn compare_characteristics_to_grid(
    traj: &Trajectory,
    coupling: &Coupling,
    sample_points: &[Vec<f64>],
    dt: f64,
) -> Result<CharCompareReport> {
    check_dt(dt)?;
    let grid = traj.grid();
    // post-jump duplicates carry no new time
    let mut checkpoints = traj.times.clone();
    checkpoints.dedup();
    let mut points = Vec::with_capacity(sample_points.len());
    for x0 in sample_points {
        if x0.len() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), got: x0.len() });
        }
        let v0 = traj.fields[0].interpolate(x0);
        let states = integrate_fb(x0, &v0, coupling, &checkpoints, dt)?;
        let mut max_gap: f64 = 0.0;
        let mut left_box = false;
        for (t, (y, v)) in checkpoints.iter().zip(&states) {
            if !grid.contains(y) {
                left_box = true;
                break;
            }
            let u = traj.value_at(*t, y);
            for i in 0..u.len() {
                max_gap = max_gap.max((u[i] - v[i]).abs());
            }
        }
        points.push(PointGap { x0: x0.clone(), max_gap, left_box });
    }
    let max_gap = points.iter().map(|p| p.max_gap).fold(0.0, f64::max);
    Ok(CharCompareReport { points, max_gap })
}

fn sample_jump_times(rng: &mut XorShift64Star, rate: f64, t: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let mut s = rng.exponential(rate);
    while s < t {
        out.push(s);
        s += rng.exponential(rate);
    }
    out
}

/// One jump characteristic with the default options.
#[allow(clippy::too_many_arguments)]
pub fn simulate_jump_characteristics(
    x0: &[f64],
    t: f64,
    traj: &Trajectory,
    coupling: &Coupling,
    jump: &AffineJump,
    jump_rate: f64,
    discount: f64,
    dt: f64,
    seed: u64,
) -> Result<CharPath> {
    let ctx = JumpContext::new(t, traj, coupling, jump, jump_rate, discount, dt, JumpCharOptions::default())?;
    ctx.path(x0, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_jump_characteristics_with(
    x0: &[f64],
    t: f64,
    traj: &Trajectory,
    coupling: &Coupling,
    jump: &AffineJump,
    jump_rate: f64,
    discount: f64,
    dt: f64,
    seed: u64,
    opts: JumpCharOptions,
) -> Result<CharPath> {
    let ctx = JumpContext::new(t, traj, coupling, jump, jump_rate, discount, dt, opts)?;
    ctx.path(x0, seed)
}

/// Validated inputs shared by every path of a Monte Carlo estimate.
struct JumpContext<'a> {
    t: f64,
    traj: &'a Trajectory,
    coupling: &'a Coupling,
    jump: &'a AffineJump,
    /// map applied to `Y(t_i+)` to get `Y(t_i-)`
    backward: AffineJump,
    rate: f64,
    discount: f64,
    dt: f64,
    opts: JumpCharOptions,
}

impl<'a> JumpContext<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        t: f64,
        traj: &'a Trajectory,
        coupling: &'a Coupling,
        jump: &'a AffineJump,
        rate: f64,
        discount: f64,
        dt: f64,
        opts: JumpCharOptions,
    ) -> Result<Self> {
        check_dt(dt)?;
        let t_end = *traj.times.last().expect("non-empty");
        if !(t > 0.0 && t <= t_end * (1.0 + 1e-12)) {
            return Err(Error::InvalidParameter(format!("t must lie in (0, {t_end}], got {t}")));
        }
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("jump rate must be >= 0, got {rate}")));
        }
        if !(discount >= 0.0 && discount.is_finite()) {
            return Err(Error::InvalidParameter(format!("discount must be >= 0, got {discount}")));
        }
        let d = traj.grid().dim();
        if jump.dim() != d || coupling.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: jump.dim() });
        }
        let backward = match opts.orientation {
            JumpOrientation::Forward => jump.clone(),
            JumpOrientation::Inverse => {
                let condition = linalg::condition_number(jump.s());
                if !(condition.is_finite() && condition <= MAX_CONDITION) {
                    return Err(Error::SingularJump { condition });
                }
                jump.inverse().ok_or(Error::SingularJump { condition })?
            }
        };
        Ok(Self { t, traj, coupling, jump, backward, rate, discount, dt, opts })
    }

    fn drift(&self, s: f64, y: &[f64]) -> Vec<f64> {
        let u = self.traj.value_at(s, y);
        self.coupling.f(y, &u)
    }

    fn source(&self, s: f64, y: &[f64]) -> Vec<f64> {
        let u = self.traj.value_at(s, y);
        let g = self.coupling.g(y, &u);
        match self.opts.discount_form {
            DiscountForm::Decay => g,
            DiscountForm::Integrating => {
                let w = (-self.discount * s).exp();
                g.into_iter().map(|v| w * v).collect()
            }
        }
    }

    fn path(&self, x0: &[f64], seed: u64) -> Result<CharPath> {
        let d = x0.len();
        if d != self.jump.dim() {
            return Err(Error::DimensionMismatch { expected: self.jump.dim(), got: d });
        }
        let mut rng = XorShift64Star::new(seed);
        let jump_times = sample_jump_times(&mut rng, self.rate, self.t);
        let grid = self.traj.grid();

        // Backward pass for Y. Samples are collected from time t down to 0;
        // `mids[k]` holds Y at the midpoint between samples k and k+1 (None
        // across a jump).
        let mut bounds = vec![0.0];
        bounds.extend(&jump_times);
        bounds.push(self.t);
        let mut times = vec![self.t];
        let mut ys = vec![x0.to_vec()];
        let mut mids: Vec<Option<Vec<f64>>> = Vec::new();
        let mut y = x0.to_vec();
        let drift = |s: f64, y: &[f64]| self.drift(s, y);
        for seg in (0..bounds.len() - 1).rev() {
            let (lo, hi) = (bounds[seg], bounds[seg + 1]);
            let n = steps_for(hi - lo, self.dt);
            let h = (hi - lo) / n as f64;
            let mut f_prev = drift(hi, &y);
            for k in 0..n {
                let s = hi - k as f64 * h;
                let next = rk4(&drift, s, &y, -h);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { time: s - h });
                }
                let s_next = if k + 1 == n { lo } else { s - h };
                let f_next = drift(s_next, &next);
                // cubic Hermite midpoint, step taken from s_next to s
                let mid = (0..d)
                    .map(|i| 0.5 * (y[i] + next[i]) + h / 8.0 * (f_next[i] - f_prev[i]))
                    .collect();
                mids.push(Some(mid));
                y = next;
                f_prev = f_next;
                times.push(s_next);
                ys.push(y.clone());
            }
            if seg > 0 {
                // crossing jump time `lo`
                y = self.backward.apply(&y);
                mids.push(None);
                times.push(lo);
                ys.push(y.clone());
            }
        }
        times.reverse();
        ys.reverse();
        mids.reverse();

        // Forward pass for V.
        let mut v = self.traj.fields[0].interpolate(&ys[0]);
        let mut vs = Vec::with_capacity(times.len());
        vs.push(v.clone());
        let lam = self.discount;
        for k in 0..times.len() - 1 {
            match &mids[k] {
                None => {
                    let mut out = vec![0.0; d];
                    linalg::matvec_t_into(self.jump.s(), &v, &mut out);
                    v = out;
                }
                Some(mid) => {
                    let (s0, s1) = (times[k], times[k + 1]);
                    let h = s1 - s0;
                    let g0 = self.source(s0, &ys[k]);
                    let gm = self.source(s0 + 0.5 * h, mid);
                    let g1 = self.source(s1, &ys[k + 1]);
                    let k1: Vec<f64> = (0..d).map(|i| g0[i] - lam * v[i]).collect();
                    let k2: Vec<f64> = (0..d).map(|i| gm[i] - lam * (v[i] + 0.5 * h * k1[i])).collect();
                    let k3: Vec<f64> = (0..d).map(|i| gm[i] - lam * (v[i] + 0.5 * h * k2[i])).collect();
                    let k4: Vec<f64> = (0..d).map(|i| g1[i] - lam * (v[i] + h * k3[i])).collect();
                    for i in 0..d {
                        v[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { time: times[k + 1] });
            }
            vs.push(v.clone());
        }
        let left_box = ys.iter().any(|y| !grid.contains(y));
        Ok(CharPath { times, y: ys, v: vs, jump_times, seed: Some(seed), left_box })
    }
}

/// Monte Carlo estimate of `E[V_t]` with the default options.
#[allow(clippy::too_many_arguments)]
pub fn estimate_value_mc(
    x0: &[f64],
    t: f64,
    traj: &Trajectory,
    coupling: &Coupling,
    jump: &AffineJump,
    jump_rate: f64,
    discount: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    estimate_value_mc_with(x0, t, traj, coupling, jump, jump_rate, discount, dt, n_paths, seed, JumpCharOptions::default())
}

/// Path `i` uses seed `derive_seed(seed, i)`, so the estimate does not
/// depend on how paths are scheduled across threads.
#[allow(clippy::too_many_arguments)]
pub fn estimate_value_mc_with(
    x0: &[f64],
    t: f64,
    traj: &Trajectory,
    coupling: &Coupling,
    jump: &AffineJump,
    jump_rate: f64,
    discount: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    opts: JumpCharOptions,
) -> Result<McEstimate> {
    if n_paths < 2 {
        return Err(Error::InvalidParameter(format!("n_paths must be >= 2, got {n_paths}")));
    }
    let ctx = JumpContext::new(t, traj, coupling, jump, jump_rate, discount, dt, opts)?;
    let samples: Vec<(Vec<f64>, usize)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            ctx.path(x0, derive_seed(seed, i))
                .map(|p| (p.final_v().to_vec(), p.jump_times.len()))
        })
        .collect::<Result<_>>()?;
    let d = x0.len();
    let n = n_paths as f64;
    // shift by the first sample so identical samples give exactly zero spread
    let pivot = samples[0].0.clone();
    let mut mean = vec![0.0; d];
    let mut stderr = vec![0.0; d];
    for i in 0..d {
        let shifted: Vec<f64> = samples.iter().map(|(v, _)| v[i] - pivot[i]).collect();
        let m = shifted.iter().sum::<f64>() / n;
        let var = shifted.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        mean[i] = pivot[i] + m;
        stderr[i] = (var / n).sqrt();
    }
    let mean_jumps = samples.iter().map(|(_, k)| *k as f64).sum::<f64>() / n;
    Ok(McEstimate { mean, stderr, n_paths, seed, mean_jumps })
}

/// Forward agent-based path: `Y' = F(Y, 0)` between Poisson jump times,
/// `Y -> T Y` at each jump.
pub fn simulate_abm(
    x0: &[f64],
    coupling: &Coupling,
    jump: &AffineJump,
    rate: f64,
    t_f: f64,
    dt: f64,
    seed: u64,
) -> Result<CharPath> {
    check_dt(dt)?;
    if !(t_f > 0.0 && t_f.is_finite()) {
        return Err(Error::InvalidParameter(format!("t_f must be > 0, got {t_f}")));
    }
    if !(rate >= 0.0 && rate.is_finite()) {
        return Err(Error::InvalidParameter(format!("jump rate must be >= 0, got {rate}")));
    }
    let d = x0.len();
    if jump.dim() != d || coupling.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: jump.dim() });
    }
    let mut rng = XorShift64Star::new(seed);
    let jump_times = sample_jump_times(&mut rng, rate, t_f);
    let zero = vec![0.0; d];
    let rhs = |_: f64, y: &[f64]| coupling.f(y, &zero);
    let mut bounds = vec![0.0];
    bounds.extend(&jump_times);
    bounds.push(t_f);
    let mut y = x0.to_vec();
    let mut times = vec![0.0];
    let mut ys = vec![y.clone()];
    for seg in 0..bounds.len() - 1 {
        let (lo, hi) = (bounds[seg], bounds[seg + 1]);
        let n = steps_for(hi - lo, dt);
        let h = (hi - lo) / n as f64;
        for k in 0..n {
            y = rk4(&rhs, lo + k as f64 * h, &y, h);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { time: lo + (k + 1) as f64 * h });
            }
            times.push(if k + 1 == n { hi } else { lo + (k + 1) as f64 * h });
            ys.push(y.clone());
        }
        if seg + 1 < bounds.len() - 1 {
            y = jump.apply(&y);
            times.push(hi);
            ys.push(y.clone());
        }
    }
    let v = vec![zero; times.len()];
    Ok(CharPath { times, y: ys, v, jump_times, seed: Some(seed), left_box: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{Grid, ValueField};
    use crate::linalg::{expm, mat_from_rows, Mat};
    use crate::master_eq::{solve_master, LipschitzConstants, NoiseSpec};
    use std::sync::Arc;

    fn linear_f(m: Mat) -> Coupling {
        Coupling::unverified(
            m.nrows(),
            Arc::new(move |y, _| linalg::matvec(&m, y)),
            Arc::new(|_, v| vec![0.0; v.len()]),
            LipschitzConstants::default(),
        )
    }

    fn still_traj(d: usize) -> Trajectory {
        let g = Grid::cube(d, -3.0, 3.0, 13).unwrap();
        let u0 = ValueField::from_fn(&g, |x| x.iter().map(|v| 0.5 * v).collect()).unwrap();
        solve_master(&u0, &Coupling::zero(d), &NoiseSpec::None, 1.0, 0.1, 0.0).unwrap()
    }

    #[test]
    fn constant_value_without_source() {
        let c = linear_f(mat_from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.0]]).unwrap());
        let u0 = |x: &[f64]| vec![x[0] + 1.0, x[1] * 2.0];
        let p = solve_fb_characteristics(&[0.3, -0.4], &u0, &c, 1.0, 0.01).unwrap();
        for v in &p.v {
            assert_eq!(v, &vec![1.3, -0.8]);
        }
    }

    #[test]
    fn linear_flow_matches_matrix_exponential() {
        let m = mat_from_rows(&[vec![-0.5, 1.0], vec![-1.0, -0.2]]).unwrap();
        let c = linear_f(m.clone());
        let x0 = [1.0, 0.5];
        let p = solve_fb_characteristics(&x0, &|x: &[f64]| x.to_vec(), &c, 1.0, 1e-3).unwrap();
        let expected = linalg::matvec(&expm(&m), &x0);
        for i in 0..2 {
            assert!((p.final_y()[i] - expected[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn exponential_decay_of_value() {
        let c = Coupling::unverified(
            1,
            Arc::new(|_, _| vec![0.0]),
            Arc::new(|_, v| vec![-v[0]]),
            LipschitzConstants { g_u: 1.0, ..Default::default() },
        );
        let p = solve_fb_characteristics(&[0.2], &|_: &[f64]| vec![2.0], &c, 1.0, 1e-2).unwrap();
        assert!((p.final_v()[0] - 2.0 * (-1f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn zero_rate_path_has_no_jumps() {
        let traj = still_traj(2);
        let j = AffineJump::new(Mat::identity(2, 2) * 0.5, vec![0.0, 0.0]).unwrap();
        let p = simulate_jump_characteristics(&[0.5, 0.5], 1.0, &traj, &Coupling::zero(2), &j, 0.0, 0.0, 0.1, 3).unwrap();
        assert!(p.jump_times.is_empty());
        assert_eq!(p.final_v(), &[0.25, 0.25]);
        assert_eq!(p.y[0], vec![0.5, 0.5]);
    }

    #[test]
    fn pure_jump_composition_inverse_orientation() {
        let traj = still_traj(2);
        let s = mat_from_rows(&[vec![1.1, 0.2], vec![0.0, 0.9]]).unwrap();
        let j = AffineJump::new(s.clone(), vec![0.0, 0.0]).unwrap();
        let x0 = [0.4, -0.3];
        for seed in 0..20 {
            let p = simulate_jump_characteristics(&x0, 1.0, &traj, &Coupling::zero(2), &j, 2.0, 0.0, 0.1, seed).unwrap();
            let k = p.jump_times.len();
            let inv = s.clone().try_inverse().unwrap();
            let mut y = x0.to_vec();
            for _ in 0..k {
                y = linalg::matvec(&inv, &y);
            }
            let mut v: Vec<f64> = y.iter().map(|a| 0.5 * a).collect();
            for _ in 0..k {
                v = linalg::matvec(&s.transpose(), &v);
            }
            for i in 0..2 {
                assert!((p.final_v()[i] - v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_jump_rejected_for_inverse_orientation() {
        let traj = still_traj(2);
        let s = mat_from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let j = AffineJump::new(s, vec![0.0, 0.0]).unwrap();
        let r = simulate_jump_characteristics(&[0.0, 0.0], 1.0, &traj, &Coupling::zero(2), &j, 1.0, 0.0, 0.1, 1);
        assert!(matches!(r, Err(Error::SingularJump { .. })));
        let opts = JumpCharOptions { orientation: JumpOrientation::Forward, ..Default::default() };
        let r = simulate_jump_characteristics_with(&[0.0, 0.0], 1.0, &traj, &Coupling::zero(2), &j, 1.0, 0.0, 0.1, 1, opts);
        assert!(r.is_ok());
    }

    #[test]
    fn identical_seeds_identical_paths() {
        let traj = still_traj(2);
        let j = AffineJump::new(Mat::identity(2, 2) * 0.9, vec![0.1, 0.0]).unwrap();
        let c = linear_f(mat_from_rows(&[vec![0.1, 0.0], vec![0.0, -0.1]]).unwrap());
        let a = simulate_jump_characteristics(&[0.3, 0.2], 1.0, &traj, &c, &j, 3.0, 0.2, 0.05, 77).unwrap();
        let b = simulate_jump_characteristics(&[0.3, 0.2], 1.0, &traj, &c, &j, 3.0, 0.2, 0.05, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jump_count_law() {
        let traj = still_traj(1);
        let j = AffineJump::identity(1);
        let rate = 2.5;
        let est = estimate_value_mc(&[0.1], 1.0, &traj, &Coupling::zero(1), &j, rate, 0.0, 0.1, 10_000, 5).unwrap();
        // Poisson count: variance rate * t
        let se = (rate / 10_000f64).sqrt();
        assert!((est.mean_jumps - rate).abs() < 5.0 * se, "{}", est.mean_jumps);
    }

    #[test]
    fn zero_rate_estimate_has_zero_spread() {
        let traj = still_traj(1);
        let est = estimate_value_mc(&[0.4], 1.0, &traj, &Coupling::zero(1), &AffineJump::identity(1), 0.0, 0.0, 0.1, 16, 9).unwrap();
        assert_eq!(est.stderr, vec![0.0]);
        assert!((est.mean[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn abm_pure_jump_chain() {
        let j = AffineJump::new(Mat::identity(2, 2) * 0.5, vec![1.0, 0.0]).unwrap();
        let p = simulate_abm(&[2.0, 2.0], &Coupling::zero(2), &j, 3.0, 2.0, 0.1, 4).unwrap();
        let mut y = vec![2.0, 2.0];
        for _ in 0..p.jump_times.len() {
            y = j.apply(&y);
        }
        assert_eq!(p.final_y(), &y[..]);
    }

    #[test]
    fn abm_identity_jump_follows_linear_flow() {
        let m = mat_from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let c = linear_f(m.clone());
        let p = simulate_abm(&[1.0, 0.0], &c, &AffineJump::identity(2), 4.0, 1.0, 1e-3, 8).unwrap();
        let expected = linalg::matvec(&expm(&m), &[1.0, 0.0]);
        for i in 0..2 {
            assert!((p.final_y()[i] - expected[i]).abs() < 1e-8);
        }
    }
}
