//! Critical value, weak KAM solutions, sub-solution certification, the
//! Mañé potential, calibrated curves and Aubry / invariant sets on the
//! torus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::action::{minimal_action_with, ActionOptions, BrokenPath};
use crate::error::{Error, Result};
use crate::flow::{flow_map, PhaseState, Trajectory};
use crate::generating::{generating_s_from, Dynamics};
use crate::laxoleinik::{GridFunction, LaxOleinik};

/// History entry of `t ↦ (max T^t 0, min T^t 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelSample {
    pub t: f64,
    pub a_plus: f64,
    pub a_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakKamResult {
    pub alpha: f64,
    pub u: Option<GridFunction>,
    /// `‖T^{t_probe} u + t_probe·α − u‖_∞`.
    pub residual: Option<f64>,
    pub t_probe: f64,
    pub history: Vec<LevelSample>,
    pub iterations: usize,
}

/// Settings of the long-time iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationSettings {
    pub grid_n: usize,
    pub t_step: f64,
    pub t_max: f64,
    pub tol_alpha: f64,
    pub tol_wk: f64,
}

impl Default for IterationSettings {
    fn default() -> Self {
        Self { grid_n: 256, t_step: 0.1, t_max: 100.0, tol_alpha: 1e-2, tol_wk: 1e-7 }
    }
}

fn require_torus(lo: &LaxOleinik) -> Result<()> {
    let model = &lo.dynamics.model;
    if !model.periodic() || !model.autonomous() {
        return Err(Error::InvalidInput("a periodic autonomous model is required".into()));
    }
    Ok(())
}

fn steps(s: &IterationSettings) -> usize {
    (s.t_max / s.t_step).round().max(1.0) as usize
}

/// Least-squares slope of `y` against `x`.
fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// `α(0)` from the growth of `a^±(t) = max/min T^t 0`.
pub fn critical_value(lo: &LaxOleinik, s: &IterationSettings) -> Result<WeakKamResult> {
    require_torus(lo)?;
    let d = lo.dynamics.dim();
    let mut v = GridFunction::constant(d, s.grid_n, 0.0);
    let k = steps(s);
    let mut history = Vec::with_capacity(k);
    for i in 1..=k {
        v = lo.apply_t(&v, 0.0, s.t_step)?;
        // keep the values bounded; a^± are tracked through the offset
        history.push(LevelSample { t: i as f64 * s.t_step, a_plus: v.max(), a_minus: v.min() });
    }
    let half = &history[history.len() / 2..];
    let ts: Vec<f64> = half.iter().map(|h| h.t).collect();
    let alpha_plus = -slope(&ts, &half.iter().map(|h| h.a_plus).collect::<Vec<_>>());
    let alpha_minus = -slope(&ts, &half.iter().map(|h| h.a_minus).collect::<Vec<_>>());
    let last = history.last().unwrap();
    let width = (last.a_plus - last.a_minus) / last.t;
    if (alpha_plus - alpha_minus).abs() > s.tol_alpha || width > s.tol_alpha {
        return Err(Error::NonConvergence {
            what: "critical value",
            detail: format!(
                "slopes {:.6} / {:.6}, bracket width {:.3e} at t={}",
                alpha_plus, alpha_minus, width, last.t
            ),
        });
    }
    let alpha = alpha_plus;
    let big_m = lo.dynamics.model.M();
    if alpha < -big_m - s.tol_alpha || alpha > big_m + s.tol_alpha {
        return Err(Error::NonConvergence { what: "critical value", detail: format!("α={alpha} outside [−M, M]") });
    }
    Ok(WeakKamResult { alpha, u: None, residual: None, t_probe: s.t_step, history, iterations: k })
}

/// `‖T^t u + tα − u‖_∞`.
pub fn fixed_point_residual(lo: &LaxOleinik, u: &GridFunction, alpha: f64, t: f64) -> Result<f64> {
    let tu = lo.apply_t(u, 0.0, t)?;
    Ok(tu.add_const(t * alpha).sup_dist(u))
}

/// Monotone iteration `v ← T^{t_step} v + t_step·α` from `u0`, shifted
/// each step so that `min(v − u0) = 0`. Returns the limit and the number
/// of steps.
fn monotone_limit(
    lo: &LaxOleinik,
    u0: &GridFunction,
    alpha: f64,
    s: &IterationSettings,
) -> Result<(GridFunction, usize)> {
    let mut v = u0.clone();
    let k = steps(s);
    for i in 1..=k {
        let next = lo.apply_t(&v, 0.0, s.t_step)?.add_const(s.t_step * alpha);
        let shift = next.values.iter().zip(&u0.values).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
        let next = next.add_const(-shift);
        let change = next.sup_dist(&v);
        v = next;
        if change < s.tol_wk {
            return Ok((v, i));
        }
    }
    Err(Error::NonConvergence {
        what: "weak KAM iteration",
        detail: format!("no fixed point within t_max={} at level {alpha}", s.t_max),
    })
}

/// Sub-solution at level `α` used to seed the monotone iteration: `0`
/// when it certifies, otherwise the regularized Mañé potential.
pub fn seed_subsolution(lo: &LaxOleinik, alpha: f64, s: &IterationSettings) -> Result<GridFunction> {
    let d = lo.dynamics.dim();
    let zero = GridFunction::constant(d, s.grid_n, 0.0);
    let slack = grid_slack(&zero);
    if is_subsolution(lo, &zero, alpha + s.tol_alpha, &SubsolutionOptions { slack, ..Default::default() })?.pass {
        return Ok(zero);
    }
    let base = vec![0.0; d];
    let field = mane_potential(lo, alpha + s.tol_alpha, &base, s.grid_n, &ManeOptions::default())?;
    let delta = lo.default_delta();
    lo.regularize_r(&field.phi, 0.0, 0.5 * lo.dynamics.sigma_eff(), delta)
}

/// Weak KAM solution at level `alpha`, normalized to `min u = 0`.
pub fn weak_kam_solve(lo: &LaxOleinik, alpha: f64, s: &IterationSettings) -> Result<WeakKamResult> {
    require_torus(lo)?;
    let u0 = seed_subsolution(lo, alpha, s)?;
    let (v, iterations) = monotone_limit(lo, &u0, alpha, s)?;
    let u = v.add_const(-v.min());
    let residual = fixed_point_residual(lo, &u, alpha, s.t_step)?;
    Ok(WeakKamResult { alpha, u: Some(u), residual: Some(residual), t_probe: s.t_step, history: Vec::new(), iterations })
}

/// `Δx·(1 + Lip)`: the first-order error of node-only extrema.
pub fn grid_slack(u: &GridFunction) -> f64 {
    u.dx() * (1.0 + u.lip_estimate())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsolutionOptions {
    pub n_pairs: usize,
    pub n_times: usize,
    pub slack: f64,
    pub seed: u64,
}

impl Default for SubsolutionOptions {
    fn default() -> Self {
        Self { n_pairs: 64, n_times: 4, slack: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsolutionCheck {
    pub pass: bool,
    pub worst_violation: f64,
    /// Node where the worst violation occurs.
    pub worst_at: Vec<f64>,
}

/// `A^t` on the torus: the least action over the lifts `q1 + w`,
/// `w ∈ {−1,0,1}^d`.
pub fn torus_action(dynamics: &Dynamics, tau: f64, t: f64, q0: &[f64], q1: &[f64]) -> Result<(f64, BrokenPath)> {
    let d = q0.len();
    let opts = ActionOptions { restarts: 2, ..ActionOptions::default() };
    let mut best: Option<(f64, BrokenPath)> = None;
    for code in 0..3usize.pow(d as u32) {
        let mut c = code;
        let target: Vec<f64> = q1
            .iter()
            .map(|x| {
                let w = (c % 3) as f64 - 1.0;
                c /= 3;
                x + w
            })
            .collect();
        let (a, path) = match minimal_action_with(dynamics, tau, t, q0, &target, &opts) {
            // long horizons near a hyperbolic point can trap both starts
            Err(Error::MultistartExhausted { .. }) => {
                minimal_action_with(dynamics, tau, t, q0, &target, &ActionOptions { seed: 1, ..ActionOptions::default() })?
            }
            other => other?,
        };
        if best.as_ref().is_none_or(|b| a < b.0) {
            best = Some((a, path));
        }
    }
    Ok(best.expect("at least one lift"))
}

/// Sampled characterization: `u(q1) − u(q0) ≤ A^t(q0,q1) + at` on random
/// node pairs at horizons `σ_eff·2^{j−2}`, plus `H(q, du) ≤ a` at nodes
/// where the one-sided differences agree.
pub fn is_subsolution(lo: &LaxOleinik, u: &GridFunction, a: f64, opts: &SubsolutionOptions) -> Result<SubsolutionCheck> {
    let dynamics = &lo.dynamics;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pairs: Vec<(usize, usize, f64)> = (0..opts.n_pairs)
        .flat_map(|_| {
            let i = rng.gen_range(0..u.len());
            let j = rng.gen_range(0..u.len());
            (0..opts.n_times).map(move |k| (i, j, dynamics.sigma_eff() * 2f64.powi(k as i32 - 2)))
        })
        .collect();
    let violations: Vec<(f64, usize)> = pairs
        .par_iter()
        .map(|&(i, j, t)| -> Result<(f64, usize)> {
            let (a_t, _) = torus_action(dynamics, 0.0, t, &u.node(i), &u.node(j))?;
            Ok((u.values[j] - u.values[i] - a_t - a * t, j))
        })
        .collect::<Result<_>>()?;
    let mut worst = (f64::NEG_INFINITY, 0usize);
    for v in violations {
        if v.0 > worst.0 {
            worst = v;
        }
    }
    let consistency = 10.0 * u.dx() * (1.0 + u.lip_estimate());
    for i in 0..u.len() {
        let (f, b) = u.one_sided(i);
        if f.iter().zip(&b).any(|(x, y)| (x - y).abs() > consistency) {
            continue;
        }
        let du = u.gradient_fd(i);
        let h = dynamics.model.value(0.0, &u.node(i), &du) - a;
        if h > worst.0 {
            worst = (h, i);
        }
    }
    Ok(SubsolutionCheck { pass: worst.0 <= opts.slack, worst_violation: worst.0, worst_at: u.node(worst.1) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ManeOptions {
    /// Number of log-spaced horizons in `[Δx/10, t_max]`.
    pub n_log: usize,
    pub t_max: f64,
    /// Horizon step of the Lax-Oleinik continuation past `σ_eff`.
    pub t_step: f64,
}

impl Default for ManeOptions {
    fn default() -> Self {
        Self { n_log: 40, t_max: 4.0, t_step: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManeField {
    pub a: f64,
    pub q_base: Vec<f64>,
    pub phi: GridFunction,
    pub t_argmin: Vec<f64>,
}

/// Short-time `A^t(q_base, ·)` on the grid (least over lifts), with
/// continuation of the shooting momenta along each row.
fn short_action_row(dynamics: &Dynamics, q_base: &[f64], t: f64, grid: &GridFunction) -> Result<Vec<f64>> {
    let d = grid.d;
    (0..grid.len())
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let x = grid.node(i);
            let mut best = f64::INFINITY;
            for code in 0..3usize.pow(d as u32) {
                let mut c = code;
                let y: Vec<f64> = x
                    .iter()
                    .map(|v| {
                        let w = (c % 3) as f64 - 1.0;
                        c /= 3;
                        v + w
                    })
                    .collect();
                best = best.min(generating_s_from(dynamics, 0.0, t, q_base, &y, None)?.s);
            }
            Ok(best)
        })
        .collect()
}

fn golden<F: Fn(f64) -> Result<f64>>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> Result<(f64, f64)> {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > tol * (1.0 + lo.abs()) {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2)?;
        }
    }
    Ok(if f1 <= f2 { (x1, f1) } else { (x2, f2) })
}

/// `Φ^a(q_base, ·) = inf_t (A^t(q_base, ·) + at)` on the grid.
pub fn mane_potential(lo: &LaxOleinik, a: f64, q_base: &[f64], grid_n: usize, opts: &ManeOptions) -> Result<ManeField> {
    let dynamics = &lo.dynamics;
    let d = dynamics.dim();
    let grid = GridFunction::constant(d, grid_n, 0.0);
    let sigma = dynamics.sigma_eff();
    let t_min = 0.1 * grid.dx();
    let ratio = (opts.t_max / t_min).powf(1.0 / (opts.n_log.max(2) - 1) as f64);
    let mut horizons: Vec<f64> = (0..opts.n_log).map(|j| t_min * ratio.powi(j as i32)).filter(|&t| t < sigma).collect();
    horizons.push(sigma);
    // rows of A^t(q_base, ·) + at for every sampled horizon, increasing in t
    let mut ts = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut last = Vec::new();
    for &t in &horizons {
        last = short_action_row(dynamics, q_base, t, &grid)?;
        ts.push(t);
        rows.push(last.iter().map(|v| v + a * t).collect());
    }
    // past σ_eff: A^{σ+kh}(q_base, ·) = (T^h)^k A^σ(q_base, ·)
    let mut f = GridFunction { values: last, ..grid.clone() };
    let mut t = sigma;
    while t + opts.t_step <= opts.t_max * (1.0 + 1e-12) {
        f = lo.apply_t(&f, 0.0, opts.t_step)?;
        t += opts.t_step;
        ts.push(t);
        rows.push(f.values.iter().map(|v| v + a * t).collect());
    }
    // golden refinement around interior argmins that sit in a real dip
    let refined: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let j = (0..ts.len()).min_by(|&x, &y| rows[x][i].total_cmp(&rows[y][i])).unwrap();
            let best = rows[j][i];
            if j == 0 || j + 1 == ts.len() {
                return Ok((best, ts[j]));
            }
            let rise = rows[j - 1][i].max(rows[j + 1][i]) - best;
            if rise <= 1e-8 * (1.0 + best.abs()) {
                return Ok((best, ts[j]));
            }
            let x = grid.node(i);
            let lift = torus_action(dynamics, 0.0, ts[j], q_base, &x)?.1.q1;
            let opts = ActionOptions { restarts: 2, ..ActionOptions::default() };
            let (tg, vg) = golden(
                |s| Ok(minimal_action_with(dynamics, 0.0, s, q_base, &lift, &opts)?.0 + a * s),
                ts[j - 1],
                ts[j + 1],
                1e-4,
            )?;
            Ok(if vg < best { (vg, tg) } else { (best, ts[j]) })
        })
        .collect::<Result<_>>()?;
    let (mut values, mut t_argmin): (Vec<f64>, Vec<f64>) = refined.into_iter().unzip();
    // Φ(x, x) = 0 is reached only as t → 0
    let ib = grid.nearest(q_base);
    if grid.node(ib).iter().zip(q_base).all(|(x, y)| (x - y.rem_euclid(1.0)).abs() < 1e-12) && values[ib] > 0.0 {
        values[ib] = 0.0;
        t_argmin[ib] = 0.0;
    }
    let phi = GridFunction::new(d, grid_n, values)?;
    let base_value = phi.values[phi.nearest(q_base)];
    if base_value < -1e-6 * (1.0 + a.abs() * opts.t_max) {
        return Err(Error::LevelBelowCritical { level: a });
    }
    Ok(ManeField { a, q_base: q_base.to_vec(), phi, t_argmin })
}

/// Pointwise `Φ^a(q0, q1)` on the torus, with the minimizing horizon.
pub fn mane_value(dynamics: &Dynamics, a: f64, q0: &[f64], q1: &[f64], t_max: f64) -> Result<(f64, f64)> {
    let f = |s: f64| -> Result<f64> { Ok(torus_action(dynamics, 0.0, s, q0, q1)?.0 + a * s) };
    let t_min = 1e-4;
    let n = 40usize;
    let ratio = (t_max / t_min).powf(1.0 / (n - 1) as f64);
    let ts: Vec<f64> = (0..n).map(|j| t_min * ratio.powi(j as i32)).collect();
    let vals: Vec<f64> = ts.par_iter().map(|&s| f(s)).collect::<Result<_>>()?;
    let j = (0..n).min_by(|&x, &y| vals[x].total_cmp(&vals[y])).unwrap();
    if j == 0 || j + 1 == n {
        return Ok((vals[j], ts[j]));
    }
    let (t, v) = golden(f, ts[j - 1], ts[j + 1], 1e-9)?;
    Ok(if v < vals[j] { (v, t) } else { (vals[j], ts[j]) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibratedCurve {
    pub a: f64,
    pub q0: Vec<f64>,
    /// Lift of `q1` reached by the orbit.
    pub q1: Vec<f64>,
    /// Horizon `τ` of the orbit (defined on `[−τ, 0]`).
    pub tau: f64,
    /// Whether `inf_t` is attained before the cap.
    pub attained: bool,
    pub trajectory: Trajectory,
    pub max_energy_deviation: f64,
}

/// Minimizing orbit of `inf_t (A^t(q0, q1) + at)`, located by solving
/// `H(q1, ρ1(t)) = a` for the horizon.
pub fn calibrated_curve(dynamics: &Dynamics, a: f64, q0: &[f64], q1: &[f64], horizon_cap: f64) -> Result<CalibratedCurve> {
    if q0.iter().zip(q1).all(|(x, y)| x == y) {
        return Err(Error::InvalidInput("calibrated curve needs q0 ≠ q1".into()));
    }
    let (_, t_guess) = mane_value(dynamics, a, q0, q1, horizon_cap)?;
    let (_, path0) = torus_action(dynamics, 0.0, t_guess, q0, q1)?;
    let target = path0.q1.clone();
    let opts = ActionOptions { restarts: 2, ..ActionOptions::default() };
    let energy = |t: f64, warm: Option<Vec<Vec<f64>>>| -> Result<(f64, BrokenPath)> {
        let o = ActionOptions { warm_start: warm, ..opts.clone() };
        let (_, path) = minimal_action_with(dynamics, 0.0, t, q0, &target, &o)?;
        let p1 = path.p_minus.last().cloned().unwrap_or_else(|| terminal_momentum(dynamics, &path));
        let p1 = if path.n > 1 { terminal_momentum(dynamics, &path) } else { p1 };
        Ok((dynamics.model.value(t, &target, &p1) - a, path))
    };
    // E(t) − a decreases through zero at the minimizing horizon
    let (mut lo_t, mut hi_t) = (0.5 * t_guess, (2.0 * t_guess).min(horizon_cap));
    let (mut e_lo, _) = energy(lo_t, None)?;
    let (mut e_hi, mut path) = energy(hi_t, None)?;
    while e_lo < 0.0 && lo_t > 1e-6 {
        hi_t = lo_t;
        e_hi = e_lo;
        lo_t *= 0.5;
        e_lo = energy(lo_t, None)?.0;
    }
    let attained = e_hi <= 0.0;
    let mut t = hi_t;
    if attained {
        for _ in 0..200 {
            // regula falsi with bisection safeguard
            let mut mid = hi_t - e_hi * (hi_t - lo_t) / (e_hi - e_lo);
            if !(mid > lo_t && mid < hi_t) || (hi_t - lo_t) < 1e-3 * t_guess {
                mid = 0.5 * (lo_t + hi_t);
            }
            let (e, p) = energy(mid, Some(path.nodes.clone()))?;
            t = mid;
            path = p;
            if e.abs() <= 1e-8 * (1.0 + a.abs()) || hi_t - lo_t < 1e-13 {
                break;
            }
            if e > 0.0 {
                lo_t = mid;
                e_lo = e;
            } else {
                hi_t = mid;
                e_hi = e;
            }
        }
    }
    let traj = path.reconstruct(dynamics)?;
    let dev = traj.energy.iter().fold(0.0, |m: f64, e| m.max((e - a).abs()));
    Ok(CalibratedCurve {
        a,
        q0: q0.to_vec(),
        q1: target,
        tau: t,
        attained,
        trajectory: traj,
        max_energy_deviation: dev,
    })
}

fn terminal_momentum(dynamics: &Dynamics, path: &BrokenPath) -> Vec<f64> {
    let last = path.n - 1;
    let start_q = path.positions()[last].clone();
    let start_p = if last == 0 { path.rho0.clone() } else { path.p_plus[last - 1].clone() };
    flow_map(
        &dynamics.model,
        &PhaseState::new(start_q, start_p),
        path.node_time(last),
        path.t,
        dynamics.step(),
    )
    .map(|s| s.p)
    .unwrap_or_else(|_| vec![f64::NAN; path.q0.len()])
}

/// Aubry mask: nodes where the long-time limit of a near-strict
/// sub-solution does not rise above it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AubryResult {
    pub alpha: f64,
    pub mask: Vec<bool>,
    pub eps: f64,
    pub u0: GridFunction,
    pub u_inf: GridFunction,
}

impl AubryResult {
    pub fn marked_nodes(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect()
    }
}

/// `eps = 5·tol_wk + 2·Δx²·Lip(u_∞)`: the gap `u_∞ − u_0` vanishes to
/// second order at the Aubry set.
pub fn default_aubry_eps(u_inf: &GridFunction, tol_wk: f64) -> f64 {
    5.0 * tol_wk + 2.0 * u_inf.dx() * u_inf.dx() * u_inf.lip_estimate()
}

pub fn aubry_set(lo: &LaxOleinik, alpha: f64, s: &IterationSettings, eps: Option<f64>) -> Result<AubryResult> {
    require_torus(lo)?;
    let seed = seed_subsolution(lo, alpha, s)?;
    let u0 = lo.regularize_r(&seed, 0.0, 0.5 * lo.dynamics.sigma_eff(), lo.default_delta())?;
    let (u_inf, _) = monotone_limit(lo, &u0, alpha, s)?;
    let eps = eps.unwrap_or_else(|| default_aubry_eps(&u_inf, s.tol_wk));
    let mask: Vec<bool> = u_inf.values.iter().zip(&u0.values).map(|(a, b)| a - b <= eps).collect();
    if !mask.iter().any(|m| *m) {
        return Err(Error::NonConvergence { what: "Aubry mask", detail: "no node within eps".into() });
    }
    Ok(AubryResult { alpha, mask, eps, u0, u_inf })
}

/// Backward images of the graph of `du` that stay near the graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvariantSet {
    pub points: Vec<PhaseState>,
    /// Seeds dropped because their backward orbit left the graph.
    pub dropped: usize,
    pub seeds: usize,
}

fn wrap(q: &[f64]) -> Vec<f64> {
    q.iter().map(|x| x.rem_euclid(1.0)).collect()
}

/// Graph distance `|p − du(q)|` with `du` the centered-difference
/// gradient, interpolated linearly between nodes.
fn graph_distance(du: &[GridFunction], q: &[f64], p: &[f64]) -> f64 {
    let wq = wrap(q);
    du.iter().zip(p).map(|(g, pi)| (pi - g.interpolate(&wq)).powi(2)).sum::<f64>().sqrt()
}

pub fn invariant_set(lo: &LaxOleinik, u: &GridFunction, t_step: f64, n_steps: usize, tol_graph: f64) -> Result<InvariantSet> {
    let dynamics = &lo.dynamics;
    let d = u.d;
    let du: Vec<GridFunction> = (0..d)
        .map(|k| GridFunction { values: (0..u.len()).map(|i| u.gradient_fd(i)[k]).collect(), ..u.clone() })
        .collect();
    let consistency = 10.0 * u.dx() * (1.0 + u.lip_estimate());
    let seeds: Vec<usize> = (0..u.len())
        .filter(|&i| {
            let (f, b) = u.one_sided(i);
            f.iter().zip(&b).all(|(x, y)| (x - y).abs() <= consistency)
        })
        .collect();
    let results: Vec<Option<PhaseState>> = seeds
        .par_iter()
        .map(|&i| {
            let mut x = PhaseState::new(u.node(i), u.gradient_fd(i));
            for k in 0..n_steps {
                let t = -(k as f64) * t_step;
                x = flow_map(&dynamics.model, &x, t, t - t_step, dynamics.step()).ok()?;
                if graph_distance(&du, &x.q, &x.p) > tol_graph {
                    return None;
                }
            }
            Some(PhaseState::new(wrap(&x.q), x.p))
        })
        .collect();
    let dropped = results.iter().filter(|r| r.is_none()).count();
    Ok(InvariantSet { points: results.into_iter().flatten().collect(), dropped, seeds: seeds.len() })
}

impl InvariantSet {
    /// Largest graph distance after one more step forward and backward.
    pub fn stability_defect(&self, lo: &LaxOleinik, u: &GridFunction, t_step: f64) -> Result<f64> {
        let du: Vec<GridFunction> = (0..u.d)
            .map(|k| GridFunction { values: (0..u.len()).map(|i| u.gradient_fd(i)[k]).collect(), ..u.clone() })
            .collect();
        let mut worst: f64 = 0.0;
        for x in &self.points {
            for dt in [t_step, -t_step] {
                let y = flow_map(&lo.dynamics.model, x, 0.0, dt, lo.dynamics.step())?;
                worst = worst.max(graph_distance(&du, &y.q, &y.p));
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::HamiltonianModel;

    fn free_lo() -> LaxOleinik {
        LaxOleinik::new(Dynamics::declared(HamiltonianModel::free(1))).unwrap()
    }

    #[test]
    fn free_critical_value_and_solution() {
        let lo = free_lo();
        let s = IterationSettings { grid_n: 32, t_step: 0.1, t_max: 2.0, ..Default::default() };
        let r = critical_value(&lo, &s).unwrap();
        assert!(r.alpha.abs() < 1e-12);
        let w = weak_kam_solve(&lo, 0.0, &s).unwrap();
        assert!(w.u.unwrap().max() <= 1e-12 && w.residual.unwrap() <= 1e-10);
    }

    #[test]
    fn subsolution_examples() {
        let lo = free_lo();
        let pi = std::f64::consts::PI;
        let u = GridFunction::from_fn(1, 64, |q| 0.1 * (2.0 * pi * q[0]).sin() / (2.0 * pi));
        let c = is_subsolution(&lo, &u, 0.005, &SubsolutionOptions { n_pairs: 16, ..Default::default() }).unwrap();
        assert!(c.pass, "{c:?}");
        let c = is_subsolution(&lo, &u, 0.003, &SubsolutionOptions { n_pairs: 16, ..Default::default() }).unwrap();
        assert!(!c.pass);
    }

    #[test]
    fn free_mane_closed_form() {
        let lo = free_lo();
        let field = mane_potential(&lo, 0.5, &[0.0], 20, &ManeOptions { t_max: 2.0, ..Default::default() }).unwrap();
        for i in 0..20 {
            let q = i as f64 / 20.0;
            let dist = q.min(1.0 - q);
            assert!((field.phi.values[i] - dist).abs() < 2e-3, "q={q}: {}", field.phi.values[i]);
        }
        let (v, t) = mane_value(&lo.dynamics, 0.5, &[0.0], &[0.3], 2.0).unwrap();
        assert!((v - 0.3).abs() < 1e-9 && (t - 0.3).abs() < 1e-4);
    }

    #[test]
    fn free_calibrated_curve() {
        let dy = Dynamics::declared(HamiltonianModel::free(1));
        let c = calibrated_curve(&dy, 0.5, &[0.0], &[0.4], 4.0).unwrap();
        assert!(c.attained);
        assert!((c.tau - 0.4).abs() < 1e-6, "{}", c.tau);
        assert!(c.max_energy_deviation < 1e-6);
    }

    #[test]
    fn free_aubry_is_everything() {
        let lo = free_lo();
        let s = IterationSettings { grid_n: 32, t_step: 0.1, t_max: 2.0, ..Default::default() };
        let r = aubry_set(&lo, 0.0, &s, None).unwrap();
        assert!(r.mask.iter().all(|m| *m));
        let inv = invariant_set(&lo, &r.u_inf, 0.1, 10, 1e-2).unwrap();
        assert_eq!(inv.points.len(), 32);
        assert!(inv.points.iter().all(|x| x.p[0] == 0.0));
    }
}
