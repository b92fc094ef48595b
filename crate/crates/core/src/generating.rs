//! Short-time two-point boundary problem, the generating function
//! `S_τ^t(q0, q1)`, geometric fronts and the classical Cauchy problem.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{propagate, Carry, Endpoint, SigmaEff, SigmaPolicy};
use crate::hamiltonian::HamiltonianModel;
use crate::linalg;

const SHOOT_MAX_ITER: usize = 50;

/// A model together with its short-time window and integration step.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub model: HamiltonianModel,
    pub sigma: SigmaEff,
    max_step: f64,
}

impl Dynamics {
    pub fn new(model: HamiltonianModel, sigma: SigmaEff) -> Self {
        Self { model, sigma, max_step: f64::INFINITY }
    }

    /// Uses the declared constants for `σ`.
    pub fn declared(model: HamiltonianModel) -> Self {
        let sigma = crate::flow::resolve_sigma(&model, SigmaPolicy::Declared).expect("declared sigma");
        Self::new(model, sigma)
    }

    /// Caps the RK4 step below the default `σ_eff/20`.
    pub fn with_max_step(mut self, step: f64) -> Self {
        self.max_step = step;
        self
    }

    pub fn sigma_eff(&self) -> f64 {
        self.sigma.value
    }

    pub fn step(&self) -> f64 {
        (self.sigma.value / 20.0).min(self.max_step)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    fn check_horizon(&self, tau: f64, t: f64) -> Result<()> {
        let h = t - tau;
        if !(h > 0.0) || h > self.sigma.value * (1.0 + 1e-12) {
            return Err(Error::SigmaExceeded { horizon: h, sigma: self.sigma.value });
        }
        Ok(())
    }
}

pub fn tol_shoot(q0: &[f64], q1: &[f64]) -> f64 {
    let dist: f64 = q0.iter().zip(q1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    1e-9 * (1.0 + dist)
}

/// Converged shot: initial momentum and the full endpoint data.
#[derive(Debug, Clone)]
pub(crate) struct Shot {
    pub rho0: Vec<f64>,
    pub end: Endpoint,
    pub residual: f64,
}

fn legendre_guess(dynamics: &Dynamics, tau: f64, t: f64, q0: &[f64], q1: &[f64]) -> Vec<f64> {
    let h = t - tau;
    let v: Vec<f64> = q0.iter().zip(q1).map(|(a, b)| (b - a) / h).collect();
    let mid: Vec<f64> = q0.iter().zip(q1).map(|(a, b)| 0.5 * (a + b)).collect();
    dynamics
        .model
        .legendre(tau, &mid, &v)
        .map(|l| l.momentum)
        .unwrap_or(v)
}

fn newton_shoot(dynamics: &Dynamics, tau: f64, t: f64, q0: &[f64], q1: &[f64], guess: Vec<f64>) -> std::result::Result<Shot, f64> {
    let d = dynamics.dim();
    let step = dynamics.step();
    let carry = Carry { monodromy: true, action: true };
    let tol = tol_shoot(q0, q1);
    let eval = |p: &[f64]| propagate(&dynamics.model, q0, p, tau, t, step, carry, None).ok();
    let mut p = guess;
    let Some(mut end) = eval(&p) else { return Err(f64::INFINITY) };
    let residual_of = |e: &Endpoint| -> (Vec<f64>, f64) {
        let r: Vec<f64> = e.q.iter().zip(q1).map(|(a, b)| a - b).collect();
        let n = linalg::norm(&r);
        (r, n)
    };
    let (mut r, mut rn) = residual_of(&end);
    for _ in 0..SHOOT_MAX_ITER {
        if rn <= tol {
            return Ok(Shot { rho0: p, end, residual: rn });
        }
        let blocks = end.blocks().expect("monodromy carried");
        let Some(dp) = linalg::solve(&blocks[1], &r, d) else { return Err(rn) };
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= 1.0 / 256.0 {
            let trial: Vec<f64> = p.iter().zip(&dp).map(|(a, s)| a - lambda * s).collect();
            if let Some(e) = eval(&trial) {
                let (rt, rtn) = residual_of(&e);
                if rtn < (1.0 - 1e-4 * lambda) * rn {
                    p = trial;
                    end = e;
                    r = rt;
                    rn = rtn;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(rn);
        }
    }
    if rn <= tol {
        Ok(Shot { rho0: p, end, residual: rn })
    } else {
        Err(rn)
    }
}

/// Shooting with an optional warm start, falling back to continuation in
/// the horizon (`h/4`, `h/2`, `h`).
pub(crate) fn shoot(dynamics: &Dynamics, tau: f64, t: f64, q0: &[f64], q1: &[f64], guess: Option<&[f64]>) -> Result<Shot> {
    dynamics.check_horizon(tau, t)?;
    let init = guess.map(|g| g.to_vec()).unwrap_or_else(|| legendre_guess(dynamics, tau, t, q0, q1));
    let mut last = match newton_shoot(dynamics, tau, t, q0, q1, init) {
        Ok(s) => return Ok(s),
        Err(r) => r,
    };
    let h = t - tau;
    let mut prev: Option<(f64, Vec<f64>)> = None;
    for frac in [0.25, 0.5, 1.0] {
        let tk = tau + frac * h;
        let guess = match &prev {
            None => legendre_guess(dynamics, tau, tk, q0, q1),
            Some((tp, p)) => {
                let a = legendre_guess(dynamics, tau, *tp, q0, q1);
                let b = legendre_guess(dynamics, tau, tk, q0, q1);
                p.iter().zip(a.iter().zip(&b)).map(|(x, (a, b))| x + b - a).collect()
            }
        };
        match newton_shoot(dynamics, tau, tk, q0, q1, guess) {
            Ok(s) if frac == 1.0 => return Ok(s),
            Ok(s) => prev = Some((tk, s.rho0)),
            Err(r) => {
                last = r;
                break;
            }
        }
    }
    Err(Error::SolverDiverged { solver: "shooting", iterations: SHOOT_MAX_ITER, residual: last })
}

/// The unique initial momentum `ρ0` with `Q_τ^t(q0, ρ0) = q1`.
pub fn shoot_rho0(dynamics: &Dynamics, tau: f64, t: f64, q0: &[f64], q1: &[f64]) -> Result<Vec<f64>> {
    Ok(shoot(dynamics, tau, t, q0, q1, None)?.rho0)
}

/// Generating function value with the boundary momenta.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratingSample {
    pub tau: f64,
    pub t: f64,
    pub q0: Vec<f64>,
    pub q1: Vec<f64>,
    #[serde(rename = "S")]
    pub s: f64,
    pub rho0: Vec<f64>,
    pub rho1: Vec<f64>,
    pub shoot_residual: f64,
}

/// Generating sample plus the analytic second derivatives of `S`.
#[derive(Debug, Clone)]
pub(crate) struct GeneratingJet {
    pub sample: GeneratingSample,
    /// `∂²S/∂q0²`
    pub d00: Vec<f64>,
    /// `∂²S/∂q1²`
    pub d11: Vec<f64>,
    /// `∂²S/∂q0_i ∂q1_j`
    pub d01: Vec<f64>,
}

pub(crate) fn generating_jet(
    dynamics: &Dynamics,
    tau: f64,
    t: f64,
    q0: &[f64],
    q1: &[f64],
    guess: Option<&[f64]>,
) -> Result<GeneratingJet> {
    let d = dynamics.dim();
    let shot = shoot(dynamics, tau, t, q0, q1, guess)?;
    let [dq_q, dp_q, _dq_p, dp_p] = shot.end.blocks().expect("monodromy carried");
    let jinv = linalg::invert(&dp_q, d).ok_or(Error::SolverDiverged {
        solver: "shooting (singular ∂pQ)",
        iterations: 0,
        residual: shot.residual,
    })?;
    let d11 = linalg::matmul(&dp_p, &jinv, d);
    let d00 = linalg::matmul(&jinv, &dq_q, d);
    let d01: Vec<f64> = jinv.iter().map(|x| -x).collect();
    Ok(GeneratingJet {
        sample: GeneratingSample {
            tau,
            t,
            q0: q0.to_vec(),
            q1: q1.to_vec(),
            s: shot.end.action,
            rho0: shot.rho0,
            rho1: shot.end.p.clone(),
            shoot_residual: shot.residual,
        },
        d00,
        d11,
        d01,
    })
}

/// `S_τ^t(q0, q1)`: action of the unique short orbit from `q0` to `q1`.
pub fn generating_s(dynamics: &Dynamics, tau: f64, t: f64, q0: &[f64], q1: &[f64]) -> Result<GeneratingSample> {
    generating_s_from(dynamics, tau, t, q0, q1, None)
}

pub fn generating_s_from(
    dynamics: &Dynamics,
    tau: f64,
    t: f64,
    q0: &[f64],
    q1: &[f64],
    guess: Option<&[f64]>,
) -> Result<GeneratingSample> {
    let shot = shoot(dynamics, tau, t, q0, q1, guess)?;
    Ok(GeneratingSample {
        tau,
        t,
        q0: q0.to_vec(),
        q1: q1.to_vec(),
        s: shot.end.action,
        rho0: shot.rho0,
        rho1: shot.end.p,
        shoot_residual: shot.residual,
    })
}

/// Central-difference Hessian blocks of `S`, each `d x d` row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondDiffs {
    pub d00: Vec<f64>,
    pub d11: Vec<f64>,
    pub d01: Vec<f64>,
}

/// Differences the exact gradients `∂0S = −ρ0`, `∂1S = ρ1` with a
/// symmetric step.
pub fn second_diff_probe(dynamics: &Dynamics, tau: f64, t: f64, q0: &[f64], q1: &[f64]) -> Result<SecondDiffs> {
    let d = dynamics.dim();
    let base = generating_s(dynamics, tau, t, q0, q1)?;
    let eps = 1e-4 * (t - tau).sqrt().min(1.0);
    let mut out = SecondDiffs { d00: vec![0.0; d * d], d11: vec![0.0; d * d], d01: vec![0.0; d * d] };
    for i in 0..d {
        let mut a = q0.to_vec();
        let mut b = q0.to_vec();
        a[i] += eps;
        b[i] -= eps;
        let sa = generating_s_from(dynamics, tau, t, &a, q1, Some(&base.rho0))?;
        let sb = generating_s_from(dynamics, tau, t, &b, q1, Some(&base.rho0))?;
        for j in 0..d {
            out.d00[i * d + j] = -(sa.rho0[j] - sb.rho0[j]) / (2.0 * eps);
            out.d01[i * d + j] = (sa.rho1[j] - sb.rho1[j]) / (2.0 * eps);
        }
        let mut a = q1.to_vec();
        let mut b = q1.to_vec();
        a[i] += eps;
        b[i] -= eps;
        let sa = generating_s_from(dynamics, tau, t, q0, &a, Some(&base.rho0))?;
        let sb = generating_s_from(dynamics, tau, t, q0, &b, Some(&base.rho0))?;
        for j in 0..d {
            out.d11[i * d + j] = (sa.rho1[j] - sb.rho1[j]) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// One sample `(q, du0(q), u0(q))` of an initial graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphSample {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub u: f64,
}

/// Initial condition sampled on a regular grid of seeds (row-major, last
/// axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGraph {
    pub samples: Vec<GraphSample>,
    pub shape: Vec<usize>,
}

impl InitialGraph {
    /// Samples `u0` and `du0` on `shape` nodes spanning `[lower, upper]`.
    pub fn from_fn<U, G>(lower: &[f64], upper: &[f64], shape: &[usize], u0: U, du0: G) -> Self
    where
        U: Fn(&[f64]) -> f64,
        G: Fn(&[f64]) -> Vec<f64>,
    {
        let d = shape.len();
        let total: usize = shape.iter().product();
        let mut samples = Vec::with_capacity(total);
        for idx in 0..total {
            let mut rem = idx;
            let mut q = vec![0.0; d];
            for k in (0..d).rev() {
                let c = rem % shape[k];
                rem /= shape[k];
                let frac = if shape[k] > 1 { c as f64 / (shape[k] - 1) as f64 } else { 0.0 };
                q[k] = lower[k] + frac * (upper[k] - lower[k]);
            }
            let p = du0(&q);
            let u = u0(&q);
            samples.push(GraphSample { q, p, u });
        }
        Self { samples, shape: shape.to_vec() }
    }

    pub fn interval<U, G>(a: f64, b: f64, n: usize, u0: U, du0: G) -> Self
    where
        U: Fn(f64) -> f64,
        G: Fn(f64) -> f64,
    {
        Self::from_fn(&[a], &[b], &[n], |q| u0(q[0]), |q| vec![du0(q[0])])
    }

    fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    fn coords(&self, mut idx: usize) -> Vec<usize> {
        let d = self.shape.len();
        let mut c = vec![0; d];
        for k in (0..d).rev() {
            c[k] = idx % self.shape[k];
            idx /= self.shape[k];
        }
        c
    }

    /// Largest trapezoid mismatch between `u0` differences and the
    /// integrated slope along grid edges.
    pub fn consistency_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        for (idx, s) in self.samples.iter().enumerate() {
            let c = self.coords(idx);
            for k in 0..self.shape.len() {
                if c[k] + 1 >= self.shape[k] {
                    continue;
                }
                let n = &self.samples[idx + self.stride(k)];
                let dq: Vec<f64> = n.q.iter().zip(&s.q).map(|(a, b)| a - b).collect();
                let mean: Vec<f64> = n.p.iter().zip(&s.p).map(|(a, b)| 0.5 * (a + b)).collect();
                gap = gap.max((n.u - s.u - linalg::dot(&mean, &dq)).abs());
            }
        }
        gap
    }
}

pub const TOL_GRAPH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontSample {
    /// Index of the seed in the initial graph.
    pub seed: usize,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub w: f64,
}

/// Flow image of an initial graph, with the transported action.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometricFront {
    pub t: f64,
    pub samples: Vec<FrontSample>,
    pub fold_flag: bool,
    /// Seeds whose orbit escaped.
    pub dropped: usize,
    pub shape: Vec<usize>,
}

/// Transports each graph sample by `φ_0^t`, accumulating `w` with the
/// action integrand `p·q̇ − H`.
pub fn propagate_front(model: &HamiltonianModel, graph: &InitialGraph, t: f64, max_step: f64) -> Result<GeometricFront> {
    let gap = graph.consistency_gap();
    if gap > TOL_GRAPH {
        return Err(Error::InconsistentGraph { gap });
    }
    let carry = Carry { monodromy: false, action: true };
    let mut samples = Vec::with_capacity(graph.samples.len());
    let mut dropped = 0;
    for (seed, s) in graph.samples.iter().enumerate() {
        match propagate(model, &s.q, &s.p, 0.0, t, max_step, carry, None) {
            Ok(e) => samples.push(FrontSample { seed, q: e.q, p: e.p, w: s.u + e.action }),
            Err(Error::TrajectoryEscape { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut front = GeometricFront { t, samples, fold_flag: false, dropped, shape: graph.shape.clone() };
    front.fold_flag = detect_fold(&front, graph);
    Ok(front)
}

/// 1-d: an adjacent pair whose order collapsed or reversed. d > 1: the
/// symmetric part of the discrete seed-to-q Jacobian has an eigenvalue
/// below 0.01 in some cell.
fn detect_fold(front: &GeometricFront, graph: &InitialGraph) -> bool {
    let d = graph.shape.len();
    if front.dropped > 0 {
        // the cell structure is broken; treat gaps conservatively
        return true;
    }
    let s = &front.samples;
    if d == 1 {
        return s.windows(2).any(|w| {
            let ds = graph.samples[w[1].seed].q[0] - graph.samples[w[0].seed].q[0];
            let dq = w[1].q[0] - w[0].q[0];
            dq * ds.signum() <= 1e-9 * ds.abs()
        });
    }
    for idx in 0..s.len() {
        let c = graph.coords(idx);
        if (0..d).any(|k| c[k] + 1 >= graph.shape[k]) {
            continue;
        }
        let mut jac = vec![0.0; d * d];
        for k in 0..d {
            let n = idx + graph.stride(k);
            let dseed = graph.samples[n].q[k] - graph.samples[idx].q[k];
            for i in 0..d {
                jac[i * d + k] = (s[n].q[i] - s[idx].q[i]) / dseed;
            }
        }
        let sym: Vec<f64> = (0..d * d)
            .map(|ij| 0.5 * (jac[ij] + jac[(ij % d) * d + ij / d]))
            .collect();
        if linalg::symmetric_eigenvalues(&sym, d)[0] < 0.01 {
            return true;
        }
    }
    false
}

/// Existence time `T = (4M(1 + ℓ))^{-1}` of the classical solution.
pub fn existence_horizon(model: &HamiltonianModel, lip_du0: f64) -> f64 {
    1.0 / (4.0 * model.M() * (1.0 + lip_du0))
}

/// Classical solution `(u_t, du_t)` at query points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CauchySolution {
    pub t: f64,
    pub horizon: f64,
    pub queries: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub du: Vec<Vec<f64>>,
    /// Measured `Lip(du_t)` along the front.
    pub lip_du: f64,
    /// `Lip(du0) + 4|t|M(1 + Lip(du0))²`.
    pub lip_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CauchyOptions {
    /// Solve past `T` as long as the front stays unfolded.
    pub allow_past_horizon: bool,
}

impl Default for CauchyOptions {
    fn default() -> Self {
        Self { allow_past_horizon: false }
    }
}

/// Inverts the characteristic map on the propagated front.
pub fn classical_cauchy(
    model: &HamiltonianModel,
    graph: &InitialGraph,
    lip_du0: f64,
    t: f64,
    queries: &[Vec<f64>],
    max_step: f64,
    opts: CauchyOptions,
) -> Result<CauchySolution> {
    let horizon = existence_horizon(model, lip_du0);
    if t.abs() >= horizon && !opts.allow_past_horizon {
        return Err(Error::ExistenceHorizonExceeded { t, horizon });
    }
    let front = propagate_front(model, graph, t, max_step)?;
    if front.fold_flag {
        return Err(Error::FoldDetected { t });
    }
    let d = graph.shape.len();
    // characteristics reaching a query must start inside the window
    let mut speed: f64 = 0.0;
    let mut dq = vec![0.0; d];
    let mut dp = vec![0.0; d];
    for s in &graph.samples {
        model.grads_into(0.0, &s.q, &s.p, &mut dq, &mut dp);
        speed = speed.max(linalg::norm(&dp));
    }
    let margin = speed * t.abs();
    for q in queries {
        for k in 0..d {
            let lo = graph.samples.first().unwrap().q[k];
            let hi = graph.samples.last().unwrap().q[k];
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            if q[k] < lo + margin || q[k] > hi - margin {
                return Err(Error::QueryOutsideFront { q: q.clone() });
            }
        }
    }
    let (u, du) = if d == 1 {
        interpolate_1d(&front, queries)?
    } else {
        interpolate_simplicial(&front, graph, queries)?
    };
    let lip_du = front_lipschitz(&front, graph);
    Ok(CauchySolution {
        t,
        horizon,
        queries: queries.to_vec(),
        u,
        du,
        lip_du,
        lip_bound: lip_du0 + 4.0 * t.abs() * model.M() * (1.0 + lip_du0).powi(2),
    })
}

fn front_lipschitz(front: &GeometricFront, graph: &InitialGraph) -> f64 {
    let s = &front.samples;
    let d = graph.shape.len();
    let mut lip: f64 = 0.0;
    for idx in 0..s.len() {
        let c = graph.coords(idx);
        for k in 0..d {
            if c[k] + 1 >= graph.shape[k] {
                continue;
            }
            let n = idx + graph.stride(k);
            let dq: Vec<f64> = s[n].q.iter().zip(&s[idx].q).map(|(a, b)| a - b).collect();
            let dp: Vec<f64> = s[n].p.iter().zip(&s[idx].p).map(|(a, b)| a - b).collect();
            lip = lip.max(linalg::norm(&dp) / linalg::norm(&dq));
        }
    }
    lip
}

/// Cubic Hermite interpolation of `w` using the front momenta as exact
/// slopes; `p` itself is interpolated with finite-difference slopes.
fn interpolate_1d(front: &GeometricFront, queries: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut pts: Vec<(f64, f64, f64)> = front.samples.iter().map(|s| (s.q[0], s.w, s.p[0])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    let slope_p = |i: usize| -> f64 {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
        (pts[b].2 - pts[a].2) / (pts[b].0 - pts[a].0)
    };
    let mut us = Vec::with_capacity(queries.len());
    let mut dus = Vec::with_capacity(queries.len());
    for q in queries {
        let x = q[0];
        let i = match pts.partition_point(|p| p.0 <= x) {
            0 => return Err(Error::QueryOutsideFront { q: q.clone() }),
            k if k >= n => {
                if (x - pts[n - 1].0).abs() < 1e-15 {
                    n - 2
                } else {
                    return Err(Error::QueryOutsideFront { q: q.clone() });
                }
            }
            k => k - 1,
        };
        let (x0, w0, p0) = pts[i];
        let (x1, w1, p1) = pts[i + 1];
        let h = x1 - x0;
        let s = (x - x0) / h;
        let (h00, h10, h01, h11) = hermite_basis(s);
        us.push(h00 * w0 + h10 * h * p0 + h01 * w1 + h11 * h * p1);
        dus.push(vec![h00 * p0 + h10 * h * slope_p(i) + h01 * p1 + h11 * h * slope_p(i + 1)]);
    }
    Ok((us, dus))
}

fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2)
}

/// Kuhn triangulation of each seed cell, mapped to `q` space; linear
/// barycentric interpolation inside the simplex containing the query.
fn interpolate_simplicial(
    front: &GeometricFront,
    graph: &InitialGraph,
    queries: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let d = graph.shape.len();
    let s = &front.samples;
    let perms = permutations(d);
    let mut us = Vec::new();
    let mut dus = Vec::new();
    'query: for q in queries {
        for idx in 0..s.len() {
            let c = graph.coords(idx);
            if (0..d).any(|k| c[k] + 1 >= graph.shape[k]) {
                continue;
            }
            for perm in &perms {
                let mut verts = vec![idx];
                let mut cur = idx;
                for &axis in perm {
                    cur += graph.stride(axis);
                    verts.push(cur);
                }
                // barycentric coordinates: q − v0 = Σ λ_k (v_k − v0)
                let v0 = &s[verts[0]].q;
                let mut mat = vec![0.0; d * d];
                for k in 0..d {
                    for i in 0..d {
                        mat[i * d + k] = s[verts[k + 1]].q[i] - v0[i];
                    }
                }
                let rhs: Vec<f64> = q.iter().zip(v0).map(|(a, b)| a - b).collect();
                let Some(lam) = linalg::solve(&mat, &rhs, d) else { continue };
                let l0 = 1.0 - lam.iter().sum::<f64>();
                if l0 < -1e-12 || lam.iter().any(|&l| l < -1e-12) {
                    continue;
                }
                let weights: Vec<f64> = std::iter::once(l0).chain(lam).collect();
                let u = verts.iter().zip(&weights).map(|(&v, w)| w * s[v].w).sum();
                let du = (0..d)
                    .map(|i| verts.iter().zip(&weights).map(|(&v, w)| w * s[v].p[i]).sum())
                    .collect();
                us.push(u);
                dus.push(du);
                continue 'query;
            }
        }
        return Err(Error::QueryOutsideFront { q: q.clone() });
    }
    Ok((us, dus))
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(d - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, d - 1);
            out.push(p);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{flow_map, PhaseState};

    fn free() -> Dynamics {
        Dynamics::declared(HamiltonianModel::free(1))
    }

    fn pendulum() -> Dynamics {
        let model = HamiltonianModel::pendulum();
        let sigma = crate::flow::resolve_sigma(&model, SigmaPolicy::Override { sigma: 0.2, p_max: 4.0 }).unwrap();
        Dynamics::new(model, sigma)
    }

    #[test]
    fn free_shooting() {
        let dy = Dynamics::declared(HamiltonianModel::free(1)).with_max_step(0.01);
        let s = Dynamics { sigma: SigmaEff { value: 1.0, ..dy.sigma.clone() }, ..dy };
        assert!((shoot_rho0(&s, 0.0, 1.0, &[0.0], &[1.0]).unwrap()[0] - 1.0).abs() < 1e-12);
        assert_eq!(shoot_rho0(&free(), 0.0, 0.2, &[0.4], &[0.4]).unwrap()[0], 0.0);
        assert!(matches!(
            shoot_rho0(&free(), 0.0, 0.3, &[0.0], &[1.0]),
            Err(Error::SigmaExceeded { .. })
        ));
    }

    #[test]
    fn pendulum_short_shot_is_near_free() {
        let dy = pendulum();
        let rho = shoot_rho0(&dy, 0.0, 1e-4, &[0.0], &[1e-4]).unwrap()[0];
        // oracle: dense scan of |Q(p) − q1| over p
        let (mut best_p, mut best) = (0.0, f64::INFINITY);
        for i in 0..=4000 {
            let p = 0.5 + i as f64 * 2.5e-4;
            let q = flow_map(&dy.model, &PhaseState::new(vec![0.0], vec![p]), 0.0, 1e-4, 1e-5).unwrap().q[0];
            if (q - 1e-4).abs() < best {
                best = (q - 1e-4).abs();
                best_p = p;
            }
        }
        assert!((rho - best_p).abs() < 1e-3 && (rho - 1.0).abs() < 1e-3, "{rho} {best_p}");
    }

    #[test]
    fn hopf_lax_values() {
        for (a, expect) in [(1.0, 0.5), (2.0, 0.25)] {
            let model = HamiltonianModel::quadratic(1, a);
            let dy = Dynamics::new(
                model,
                SigmaEff { value: 1.0, policy: SigmaPolicy::Override { sigma: 1.0, p_max: 1.0 }, twist_margin: None },
            );
            let s = generating_s(&dy, 0.0, 1.0, &[0.0], &[1.0]).unwrap();
            assert!((s.s - expect).abs() < 1e-12, "a={a}: {}", s.s);
        }
    }

    #[test]
    fn shift_lowers_action() {
        let base = pendulum();
        let shifted = Dynamics { model: base.model.clone().with_shift(1.0), ..base.clone() };
        let a = generating_s(&base, 0.0, 0.1, &[0.1], &[0.2]).unwrap().s;
        let b = generating_s(&shifted, 0.0, 0.1, &[0.1], &[0.2]).unwrap().s;
        assert!((b - a + 0.1).abs() < 1e-12);
    }

    #[test]
    fn free_second_differences() {
        let h = second_diff_probe(&free(), 0.0, 0.25, &[0.1], &[0.3]).unwrap();
        assert!((h.d11[0] - 4.0).abs() < 1e-6);
        assert!((h.d01[0] + 4.0).abs() < 1e-6);
        assert!((h.d00[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn analytic_jet_matches_probe() {
        let dy = pendulum();
        let jet = generating_jet(&dy, 0.0, 0.15, &[0.1], &[0.35], None).unwrap();
        let fd = second_diff_probe(&dy, 0.0, 0.15, &[0.1], &[0.35]).unwrap();
        for (a, b) in [(jet.d00[0], fd.d00[0]), (jet.d11[0], fd.d11[0]), (jet.d01[0], fd.d01[0])] {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn time_derivative_is_minus_energy() {
        // a fine step keeps the RK4 error far below the difference quotient
        let dy = pendulum().with_max_step(5e-4);
        let (q0, q1) = ([0.05], [0.3]);
        let s = generating_s(&dy, 0.0, 0.1, &q0, &q1).unwrap();
        let e = 1e-5;
        let sp = generating_s(&dy, 0.0, 0.1 + e, &q0, &q1).unwrap().s;
        let sm = generating_s(&dy, 0.0, 0.1 - e, &q0, &q1).unwrap().s;
        let dt = (sp - sm) / (2.0 * e);
        let h = dy.model.value(0.1, &q1, &s.rho1);
        assert!((dt + h).abs() < 1e-5, "{dt} vs {}", -h);
    }

    #[test]
    fn blow_up_front() {
        let model = HamiltonianModel::free(1);
        let graph = InitialGraph::interval(-1.0, 1.0, 201, |q| -q * q, |q| -2.0 * q);
        let at = |t: f64| propagate_front(&model, &graph, t, 0.01).unwrap();
        assert!(!at(0.49).fold_flag);
        assert!(at(0.5).fold_flag);
        assert!(at(0.51).fold_flag);
        let zero = InitialGraph::interval(-1.0, 1.0, 11, |_| 0.0, |_| 0.0);
        let f = propagate_front(&model, &zero, 3.0, 0.01).unwrap();
        assert!(!f.fold_flag && f.samples.iter().all(|s| s.p[0] == 0.0 && s.w == 0.0));
    }

    #[test]
    fn inconsistent_graph_is_rejected() {
        let graph = InitialGraph::interval(-1.0, 1.0, 21, |q| q, |_| 0.0);
        assert!(matches!(
            propagate_front(&HamiltonianModel::free(1), &graph, 0.1, 0.01),
            Err(Error::InconsistentGraph { .. })
        ));
    }

    #[test]
    fn cauchy_existence_window() {
        let model = HamiltonianModel::free(1);
        let graph = InitialGraph::interval(-1.0, 1.0, 2001, |q| -q * q, |q| -2.0 * q);
        assert!((existence_horizon(&model, 2.0) - 1.0 / 12.0).abs() < 1e-15);
        let qs: Vec<Vec<f64>> = (-5..=5).map(|i| vec![i as f64 * 0.1]).collect();
        let sol = classical_cauchy(&model, &graph, 2.0, 0.08, &qs, 0.01, CauchyOptions::default()).unwrap();
        for (q, (u, du)) in qs.iter().zip(sol.u.iter().zip(&sol.du)) {
            let exact = -q[0] * q[0] / (1.0 - 0.16);
            assert!((u - exact).abs() < 1e-9, "{u} vs {exact}");
            assert!((du[0] + 2.0 * q[0] / 0.84).abs() < 1e-6);
        }
        assert!(sol.lip_du <= sol.lip_bound);
        assert!(matches!(
            classical_cauchy(&model, &graph, 2.0, 0.09, &qs, 0.01, CauchyOptions::default()),
            Err(Error::ExistenceHorizonExceeded { .. })
        ));
        let past = CauchyOptions { allow_past_horizon: true };
        let sol = classical_cauchy(&model, &graph, 2.0, 0.25, &[vec![0.5]], 0.01, past).unwrap();
        assert!((sol.u[0] + 0.5).abs() < 1e-9);
        assert!(matches!(
            classical_cauchy(&model, &graph, 2.0, 0.6, &[vec![0.0]], 0.01, past),
            Err(Error::FoldDetected { .. })
        ));
    }

    #[test]
    fn constant_initial_data() {
        let pend = HamiltonianModel::pendulum();
        let graph = InitialGraph::interval(-1.0, 2.0, 301, |_| 3.0, |_| 0.0);
        let sol = classical_cauchy(&pend, &graph, 0.0, 0.005, &[vec![0.25], vec![0.5]], 1e-3, CauchyOptions::default())
            .unwrap();
        // u(t,q) = c − t·H(q,0) up to O(t²) curvature of the characteristics
        assert!((sol.u[0] - 3.0).abs() < 1e-6);
        assert!((sol.u[1] - (3.0 + 0.005)).abs() < 1e-4);
    }

    #[test]
    fn two_dimensional_front_interpolation() {
        let model = HamiltonianModel::free(2);
        let graph = InitialGraph::from_fn(&[-1.0, -1.0], &[1.0, 1.0], &[41, 41], |q| -0.5 * (q[0] * q[0] + q[1] * q[1]), |q| {
            vec![-q[0], -q[1]]
        });
        let t = 0.1;
        let sol = classical_cauchy(&model, &graph, 1.0, t, &[vec![0.2, -0.3]], 0.01, CauchyOptions { allow_past_horizon: true })
            .unwrap();
        // exact: u = −|q|²/(2(1−t))
        let exact = -0.5 * (0.04 + 0.09) / (1.0 - t);
        assert!((sol.u[0] - exact).abs() < 1e-3, "{} vs {exact}", sol.u[0]);
    }
}
