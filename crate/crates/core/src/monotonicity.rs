//! Monotonicity moduli, propagation checks on grid trajectories, Lipschitz
//! budgets for monotone couplings, and a discrete maximum-principle check.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::ValueField;
use crate::master_eq::Trajectory;
use crate::rng::XorShift64Star;

/// Grids with at most this many nodes are checked on all pairs.
pub const ALL_PAIRS_MAX_NODES: usize = 41 * 41;
/// Random pair count used beyond [`ALL_PAIRS_MAX_NODES`].
pub const DEFAULT_RANDOM_PAIRS: usize = 100_000;

/// `10 (h + dt) diam^2`, the default propagation tolerance.
pub fn default_tolerance(h: f64, dt: f64, diam: f64) -> f64 {
    10.0 * (h + dt) * diam * diam
}

#[derive(Debug, Clone, PartialEq)]
pub struct Modulus {
    /// `min <V(x) - V(y), x - y> / |x - y|^2`; `+inf` if no pair was usable.
    pub value: f64,
    pub argmin: Option<usize>,
    pub evaluated: usize,
    /// Pairs with coincident endpoints.
    pub skipped: usize,
}

fn pairing(vx: &[f64], vy: &[f64], x: &[f64], y: &[f64]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - y[i];
        num += (vx[i] - vy[i]) * dx;
        den += dx * dx;
    }
    (den > 0.0).then(|| num / den)
}

/// Lower estimate of the monotonicity modulus of `map` over `pairs`.
pub fn monotonicity_modulus(map: &dyn Fn(&[f64]) -> Vec<f64>, pairs: &[(Vec<f64>, Vec<f64>)]) -> Modulus {
    let mut out = Modulus { value: f64::INFINITY, argmin: None, evaluated: 0, skipped: 0 };
    for (k, (x, y)) in pairs.iter().enumerate() {
        match pairing(&map(x), &map(y), x, y) {
            Some(p) => {
                out.evaluated += 1;
                if p < out.value {
                    out.value = p;
                    out.argmin = Some(k);
                }
            }
            None => out.skipped += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStrategy {
    AllNodes,
    Random { n: usize, seed: u64 },
    /// All pairs up to [`ALL_PAIRS_MAX_NODES`] nodes, random pairs beyond.
    Auto { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub times: Vec<f64>,
    pub min_pairing: Vec<f64>,
    pub argmin_pair: Vec<(usize, usize)>,
    pub pair_count: usize,
    pub tol: f64,
    pub holds: bool,
}

impl MonotonicityReport {
    pub fn worst(&self) -> f64 {
        self.min_pairing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Index of the first output time where the verdict fails.
    pub fn first_violation(&self) -> Option<usize> {
        self.min_pairing.iter().position(|p| *p < -self.tol)
    }
}

fn node_pairs(n_nodes: usize, strategy: PairStrategy) -> Vec<(usize, usize)> {
    let random = |n: usize, seed: u64| {
        let mut rng = XorShift64Star::new(seed);
        let mut pairs = Vec::with_capacity(n);
        while pairs.len() < n {
            let a = rng.below(n_nodes);
            let b = rng.below(n_nodes);
            if a != b {
                pairs.push((a, b));
            }
        }
        pairs
    };
    let all = || {
        let mut pairs = Vec::with_capacity(n_nodes * (n_nodes - 1) / 2);
        for a in 0..n_nodes {
            for b in a + 1..n_nodes {
                pairs.push((a, b));
            }
        }
        pairs
    };
    match strategy {
        PairStrategy::AllNodes => all(),
        PairStrategy::Random { n, seed } => random(n, seed),
        PairStrategy::Auto { seed } => {
            if n_nodes <= ALL_PAIRS_MAX_NODES {
                all()
            } else {
                random(DEFAULT_RANDOM_PAIRS, seed)
            }
        }
    }
}

/// Minimum pairing of one field over node pairs.
pub fn field_modulus(field: &ValueField, pairs: &[(usize, usize)]) -> (f64, (usize, usize)) {
    let grid = field.grid();
    let coords = grid.coords();
    let mut best = (f64::INFINITY, (0, 0));
    for &(a, b) in pairs {
        if let Some(p) = pairing(field.at(a), field.at(b), &coords[a], &coords[b]) {
            if p < best.0 {
                best = (p, (a, b));
            }
        }
    }
    best
}

/// Per-output-time minimum pairing; the verdict holds iff every minimum is
/// at least `-tol`.
pub fn verify_propagation(traj: &Trajectory, strategy: PairStrategy, tol: f64) -> Result<MonotonicityReport> {
    let n_nodes = traj.grid().len();
    if n_nodes < 2 {
        return Err(Error::InvalidParameter("need at least two nodes".into()));
    }
    let pairs = node_pairs(n_nodes, strategy);
    let per_time: Vec<(f64, (usize, usize))> =
        traj.fields.par_iter().map(|f| field_modulus(f, &pairs)).collect();
    let min_pairing: Vec<f64> = per_time.iter().map(|p| p.0).collect();
    let holds = min_pairing.iter().all(|p| *p >= -tol);
    Ok(MonotonicityReport {
        times: traj.times.clone(),
        min_pairing,
        argmin_pair: per_time.iter().map(|p| p.1).collect(),
        pair_count: pairs.len(),
        tol,
        holds,
    })
}

/// Constants entering the Lipschitz budget of a monotone coupling.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BudgetInputs {
    pub alpha: f64,
    pub rate: f64,
    pub s_norm: f64,
    pub lip_g_x: f64,
    pub lip_f_x: f64,
    pub lip_f_u: f64,
    pub lip_g_u: f64,
    pub lip_u0: f64,
}

impl BudgetInputs {
    /// `(|S|^2 - 1)^+`.
    fn expansion(&self) -> f64 {
        (self.s_norm * self.s_norm - 1.0).max(0.0)
    }
}

/// `min(alpha / (rate (|S|^2 - 1)^+ + |grad_x G| + 2 |grad_x F|), |grad U0|)`.
///
/// A zero denominator with `alpha > 0` leaves only the second branch.
/// `alpha = 0` gives 0, meaning no bound.
pub fn lipschitz_beta(inp: &BudgetInputs) -> f64 {
    if inp.alpha <= 0.0 {
        return 0.0;
    }
    let den = inp.rate * inp.expansion() + inp.lip_g_x + 2.0 * inp.lip_f_x;
    let first = if den > 0.0 { inp.alpha / den } else { f64::INFINITY };
    first.min(inp.lip_u0).max(0.0)
}

/// `1 / beta`, or `None` when `beta` gives no bound.
pub fn lipschitz_bound(beta: f64) -> Option<f64> {
    (beta > 0.0 && beta.is_finite()).then(|| 1.0 / beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotoneCase {
    /// `U0` and `G` are alpha-monotone.
    GMonotone,
    /// `F` is alpha-monotone.
    FMonotone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub times: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub valid: bool,
    /// First tabulated time with `beta <= 0`.
    pub crossing_time: Option<f64>,
}

impl Schedule {
    /// Lipschitz bound implied at sample `k`: the positive root of
    /// `beta L^2 - L - gamma = 0`, which is `1 / beta` when `gamma = 0`.
    pub fn lipschitz_bound(&self, k: usize) -> Option<f64> {
        let (b, g) = (self.beta[k], self.gamma[k]);
        (b > 0.0).then(|| (1.0 + (1.0 + 4.0 * b * g).sqrt()) / (2.0 * b))
    }
}

/// Number of tabulated intervals in a schedule.
const SCHEDULE_INTERVALS: usize = 1000;
const SCHEDULE_SUBSTEPS: usize = 8;

/// Time-dependent `(beta, gamma)` pair for the two monotone cases.
///
/// G-monotone: `beta(t) = alpha exp(-(2|grad_x F| + |grad_x G| + (|S|^2-1)^+ rate) t)`,
/// `gamma = 0`. F-monotone: RK4 integration of
///
/// ```text
/// beta'  = alpha - beta (|grad_x G| + 2 |grad_x F| + rate (1-|S|^2)^-) - gamma |D_p F|
/// gamma' = gamma (-rate (1-|S|^2)^- + |D_p F| + 2 |D_p G|) + beta |grad_x G|
/// ```
///
/// with `gamma(0) = beta0 |D U0|^2`.
pub fn beta_gamma_schedule(case: MonotoneCase, inp: &BudgetInputs, t_f: f64, beta0: f64) -> Result<Schedule> {
    if !(t_f > 0.0 && t_f.is_finite()) {
        return Err(Error::InvalidParameter(format!("t_f must be > 0, got {t_f}")));
    }
    let n = SCHEDULE_INTERVALS;
    let times: Vec<f64> = (0..=n).map(|k| t_f * k as f64 / n as f64).collect();
    let (beta, gamma) = match case {
        MonotoneCase::GMonotone => {
            let k = 2.0 * inp.lip_f_x + inp.lip_g_x + inp.expansion() * inp.rate;
            (times.iter().map(|t| inp.alpha * (-k * t).exp()).collect(), vec![0.0; n + 1])
        }
        MonotoneCase::FMonotone => {
            if !(beta0 > 0.0) {
                return Err(Error::InvalidParameter(format!("beta0 must be > 0, got {beta0}")));
            }
            let neg = inp.expansion();
            let rhs = |b: f64, g: f64| {
                (
                    inp.alpha - b * (inp.lip_g_x + 2.0 * inp.lip_f_x + inp.rate * neg) - g * inp.lip_f_u,
                    g * (-inp.rate * neg + inp.lip_f_u + 2.0 * inp.lip_g_u) + b * inp.lip_g_x,
                )
            };
            let mut b = beta0;
            let mut g = beta0 * inp.lip_u0 * inp.lip_u0;
            let mut betas = vec![b];
            let mut gammas = vec![g];
            let h = t_f / (n * SCHEDULE_SUBSTEPS) as f64;
            for _ in 0..n {
                for _ in 0..SCHEDULE_SUBSTEPS {
                    let k1 = rhs(b, g);
                    let k2 = rhs(b + 0.5 * h * k1.0, g + 0.5 * h * k1.1);
                    let k3 = rhs(b + 0.5 * h * k2.0, g + 0.5 * h * k2.1);
                    let k4 = rhs(b + h * k3.0, g + h * k3.1);
                    b += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
                    g += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
                }
                betas.push(b);
                gammas.push(g);
            }
            (betas, gammas)
        }
    };
    let crossing = beta.iter().position(|b| *b <= 0.0).map(|k| times[k]);
    let valid = crossing.is_none() && gamma.iter().all(|g| *g >= 0.0);
    Ok(Schedule { times, beta, gamma, valid, crossing_time: crossing })
}

/// Largest `|U(x) - U(y)| / |x - y|` over axis-adjacent node pairs.
pub fn field_lipschitz(field: &ValueField) -> f64 {
    let grid = field.grid();
    let d = grid.dim();
    let mut best: f64 = 0.0;
    for node in 0..grid.len() {
        for a in 0..d {
            if grid.axis_index(node, a) + 1 == grid.nodes_per_axis()[a] {
                continue;
            }
            let other = node + grid.strides()[a];
            let (u, v) = (field.at(node), field.at(other));
            let diff = u.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            best = best.max(diff / grid.spacing()[a]);
        }
    }
    best
}

/// [`field_lipschitz`] at every output time.
pub fn measured_lipschitz(traj: &Trajectory) -> Vec<f64> {
    traj.fields.par_iter().map(field_lipschitz).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPrinciple {
    pub holds: bool,
    pub min_value: f64,
    /// `(time index, node)` of the minimum.
    pub arg: (usize, usize),
}

/// Global minimum of a time-indexed scalar field; holds iff it is `>= -tol`.
pub fn max_principle_check(values: &[Vec<f64>], tol: f64) -> Result<MaxPrinciple> {
    let mut out = MaxPrinciple { holds: true, min_value: f64::INFINITY, arg: (0, 0) };
    for (t, slice) in values.iter().enumerate() {
        for (node, v) in slice.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { time: t as f64 });
            }
            if *v < out.min_value {
                out.min_value = *v;
                out.arg = (t, node);
            }
        }
    }
    if !out.min_value.is_finite() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    out.holds = out.min_value >= -tol;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Grid;
    use crate::linalg::{self, mat_from_rows};
    use crate::master_eq::{solve_master, Coupling, NoiseSpec};
    use proptest::prelude::*;

    fn random_pairs(d: usize, n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = XorShift64Star::new(seed);
        (0..n)
            .map(|_| {
                let x = (0..d).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
                let y = (0..d).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
                (x, y)
            })
            .collect()
    }

    #[test]
    fn identity_and_rotation() {
        let pairs = random_pairs(2, 100, 1);
        let id = monotonicity_modulus(&|x: &[f64]| x.to_vec(), &pairs);
        assert!((id.value - 1.0).abs() < 1e-12);
        let rot = monotonicity_modulus(&|x: &[f64]| vec![-x[1], x[0]], &pairs);
        assert!(rot.value.abs() < 1e-12);
    }

    #[test]
    fn coincident_pairs_skipped() {
        let pairs = vec![(vec![1.0, 2.0], vec![1.0, 2.0]), (vec![0.0, 0.0], vec![1.0, 0.0])];
        let m = monotonicity_modulus(&|x: &[f64]| x.to_vec(), &pairs);
        assert_eq!(m.skipped, 1);
        assert_eq!(m.evaluated, 1);
    }

    #[test]
    fn dense_sample_reaches_symmetric_eigenvalue() {
        let m = mat_from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let pairs = random_pairs(2, 10_000, 3);
        let r = monotonicity_modulus(&|x: &[f64]| linalg::matvec(&m, x), &pairs);
        let expected = (3.0 - 2f64.sqrt()) / 2.0;
        assert!(r.value >= expected - 1e-12);
        assert!(r.value - expected < 1e-3, "{}", r.value);
    }

    #[test]
    fn three_dimensional_dense_sample() {
        let m = mat_from_rows(&[vec![1.0, 0.5, 0.0], vec![-0.2, 0.8, 0.3], vec![0.1, 0.0, 0.6]]).unwrap();
        let pairs = random_pairs(3, 10_000, 5);
        let r = monotonicity_modulus(&|x: &[f64]| linalg::matvec(&m, x), &pairs);
        let expected = linalg::min_sym_eigenvalue(&m);
        assert!(r.value >= expected - 1e-12);
        assert!(r.value - expected < 1e-3, "{} vs {expected}", r.value);
    }

    #[test]
    fn stationary_modulus_is_constant() {
        let g = Grid::cube(2, -1.0, 1.0, 9).unwrap();
        let u0 = ValueField::from_fn(&g, |x| vec![2.0 * x[0] + 0.5 * x[1], x[1]]).unwrap();
        let traj = solve_master(&u0, &Coupling::zero(2), &NoiseSpec::None, 1.0, 0.1, 0.0).unwrap();
        let r = verify_propagation(&traj, PairStrategy::AllNodes, 1e-12).unwrap();
        let m = mat_from_rows(&[vec![2.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let alpha = linalg::min_sym_eigenvalue(&m);
        for p in &r.min_pairing {
            assert_eq!(*p, r.min_pairing[0]);
            assert!(*p >= alpha - 1e-12);
        }
        assert!(r.holds);
        assert_eq!(r.pair_count, 81 * 80 / 2);
    }

    #[test]
    fn anti_monotone_start_fails_with_witness() {
        let g = Grid::cube(2, -1.0, 1.0, 5).unwrap();
        let u0 = ValueField::from_fn(&g, |x| x.iter().map(|v| -v).collect()).unwrap();
        let traj = solve_master(&u0, &Coupling::zero(2), &NoiseSpec::None, 0.5, 0.1, 0.0).unwrap();
        let r = verify_propagation(&traj, PairStrategy::AllNodes, 1e-6).unwrap();
        assert!(!r.holds);
        assert_eq!(r.first_violation(), Some(0));
        let (a, b) = r.argmin_pair[0];
        let coords = g.coords();
        let p = pairing(u0.at(a), u0.at(b), &coords[a], &coords[b]).unwrap();
        assert_eq!(p, r.min_pairing[0]);
    }

    #[test]
    fn beta_direct_substitution() {
        let inp = BudgetInputs { alpha: 1.0, rate: 1.0, s_norm: 1.0, lip_g_x: 1.0, lip_f_x: 1.0, lip_u0: 10.0, ..Default::default() };
        assert!((lipschitz_beta(&inp) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(lipschitz_beta(&BudgetInputs { alpha: 0.0, ..inp }), 0.0);
        assert_eq!(lipschitz_bound(0.0), None);
        let open = BudgetInputs { alpha: 1.0, lip_u0: 2.0, ..Default::default() };
        assert_eq!(lipschitz_beta(&open), 2.0);
    }

    #[test]
    fn g_schedule_is_exponential() {
        let inp = BudgetInputs { alpha: 0.7, rate: 2.0, s_norm: 1.2, lip_g_x: 0.3, lip_f_x: 0.1, ..Default::default() };
        let s = beta_gamma_schedule(MonotoneCase::GMonotone, &inp, 2.0, 0.0).unwrap();
        assert_eq!(s.beta[0], 0.7);
        let k = 0.2 + 0.3 + 0.44 * 2.0;
        let (i, j) = (100, 700);
        let ratio = s.beta[j] / s.beta[i];
        assert!((ratio - (-k * (s.times[j] - s.times[i])).exp()).abs() < 1e-10);
        assert!(s.valid);
    }

    #[test]
    fn f_schedule_decoupled() {
        let inp = BudgetInputs { alpha: 0.5, lip_u0: 2.0, ..Default::default() };
        let s = beta_gamma_schedule(MonotoneCase::FMonotone, &inp, 1.5, 0.1).unwrap();
        for k in 0..s.times.len() {
            assert!((s.beta[k] - (0.1 + 0.5 * s.times[k])).abs() < 1e-12);
            assert!((s.gamma[k] - 0.4).abs() < 1e-12);
        }
        assert!(s.valid);
    }

    #[test]
    fn f_schedule_crossing_reported() {
        let inp = BudgetInputs { alpha: 0.0, lip_f_u: 5.0, lip_u0: 3.0, ..Default::default() };
        let s = beta_gamma_schedule(MonotoneCase::FMonotone, &inp, 2.0, 0.1).unwrap();
        assert!(!s.valid);
        assert!(s.crossing_time.unwrap() > 0.0);
    }

    #[test]
    fn measured_lipschitz_of_affine_field() {
        let g = Grid::cube(2, -1.0, 1.0, 11).unwrap();
        let rows = vec![vec![1.0, 2.0], vec![-0.5, 0.3]];
        let u = ValueField::affine(&g, &rows, &[0.1, 0.2]).unwrap();
        let m = mat_from_rows(&rows).unwrap();
        let l = field_lipschitz(&u);
        assert!(l <= linalg::op_norm(&m) + 1e-10);
        let col = |j: usize| (m[(0, j)].powi(2) + m[(1, j)].powi(2)).sqrt();
        assert!(l >= col(0).max(col(1)) - 1e-12);
        let c = ValueField::constant(&g, &[1.0, 1.0]).unwrap();
        assert_eq!(field_lipschitz(&c), 0.0);
    }

    #[test]
    fn max_principle_witness() {
        let mut vals = vec![vec![1.0; 10]; 5];
        let ok = max_principle_check(&vals, 0.0).unwrap();
        assert!(ok.holds);
        assert_eq!(ok.min_value, 1.0);
        vals[3][7] = -0.5;
        let bad = max_principle_check(&vals, 1e-12).unwrap();
        assert!(!bad.holds);
        assert_eq!(bad.arg, (3, 7));
    }

    #[test]
    fn explicit_diffusion_stays_nonnegative() {
        let n = 64;
        let h = 1.0 / n as f64;
        let dt = 0.4 * h * h;
        let mut rng = XorShift64Star::new(2);
        let mut u: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let mut hist = vec![u.clone()];
        for _ in 0..500 {
            u = (0..n)
                .map(|i| {
                    let l = u[(i + n - 1) % n];
                    let r = u[(i + 1) % n];
                    u[i] + dt / (h * h) * (l - 2.0 * u[i] + r)
                })
                .collect();
            hist.push(u.clone());
        }
        let r = max_principle_check(&hist, 1e-12).unwrap();
        assert!(r.holds && r.min_value >= -1e-12);
    }

    proptest! {
        #[test]
        fn positive_scaling(s in 0.01f64..10.0, a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0) {
            let pairs = random_pairs(2, 50, 9);
            let f = |x: &[f64]| vec![a * x[0] + b * x[1], c * x[0] + d * x[1]];
            let g = |x: &[f64]| f(x).into_iter().map(|v| s * v).collect::<Vec<_>>();
            let m1 = monotonicity_modulus(&f, &pairs).value;
            let m2 = monotonicity_modulus(&g, &pairs).value;
            prop_assert!((m2 - s * m1).abs() <= 1e-12 * (1.0 + m1.abs() * s));
        }

        #[test]
        fn constant_shift_invariance(c0 in -50.0f64..50.0, c1 in -50.0f64..50.0) {
            let g = Grid::cube(2, -1.0, 1.0, 6).unwrap();
            let u0 = ValueField::from_fn(&g, |x| vec![x[0] + 0.3 * x[1].powi(3), 0.2 * x[0] + x[1]]).unwrap();
            let shifted = ValueField::from_fn(&g, |x| vec![x[0] + 0.3 * x[1].powi(3) + c0, 0.2 * x[0] + x[1] + c1]).unwrap();
            let t1 = solve_master(&u0, &Coupling::zero(2), &NoiseSpec::None, 0.2, 0.1, 0.0).unwrap();
            let t2 = solve_master(&shifted, &Coupling::zero(2), &NoiseSpec::None, 0.2, 0.1, 0.0).unwrap();
            let r1 = verify_propagation(&t1, PairStrategy::AllNodes, 0.0).unwrap();
            let r2 = verify_propagation(&t2, PairStrategy::AllNodes, 0.0).unwrap();
            prop_assert_eq!(r1.holds, r2.holds);
            for (a, b) in r1.min_pairing.iter().zip(&r2.min_pairing) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + c0.abs() + c1.abs()) * 10.0);
            }
        }
    }
}
