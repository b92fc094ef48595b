//! Hamiltonian flow `φ_τ^t`, its variational equation, and the twist
//! window that licenses short-time shooting.
//!
//! Integration is classical fourth-order Runge-Kutta with a fixed step,
//! carrying the state, the accumulated action `∫ p·∂pH − H` and, when
//! requested, the `2d x 2d` monodromy matrix in one vector so that all of
//! them see the same discretization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hamiltonian::{HamiltonianModel, SampleBox};
use crate::linalg;

pub const TOL_ENERGY: f64 = 1e-8;
pub const TOL_SYMP: f64 = 1e-7;
pub const OVERFLOW_GUARD: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseState {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        Self { q, p }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|x| x.is_finite())
    }
}

/// Sampled orbit; `times` is monotone in the direction of integration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    pub energy: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &PhaseState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn max_energy_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy.iter().fold(0.0, |m, e| f64::max(m, (e - e0).abs()))
    }

    /// Appends `other`, skipping its first sample when it repeats our last.
    pub fn append(&mut self, other: Trajectory) {
        let skip = usize::from(
            self.times.last().is_some_and(|&t| other.times.first().is_some_and(|&s| (s - t).abs() < 1e-14)),
        );
        self.times.extend(other.times.into_iter().skip(skip));
        self.states.extend(other.states.into_iter().skip(skip));
        self.energy.extend(other.energy.into_iter().skip(skip));
    }
}

/// Blocks of `dφ_τ^t` at a point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonodromyResult {
    /// `∂qQ`
    pub dq_q: Vec<f64>,
    /// `∂pQ`
    pub dp_q: Vec<f64>,
    /// `∂qP`
    pub dq_p: Vec<f64>,
    /// `∂pP`
    pub dp_p: Vec<f64>,
    /// `‖dφ − I‖` in operator norm.
    pub deviation: f64,
    pub terminal: PhaseState,
}

impl MonodromyResult {
    pub fn dim(&self) -> usize {
        (self.dq_q.len() as f64).sqrt().round() as usize
    }

    /// The assembled `2d x 2d` matrix.
    pub fn assembled(&self) -> Vec<f64> {
        let d = self.dim();
        let n = 2 * d;
        let mut x = vec![0.0; n * n];
        for i in 0..d {
            for j in 0..d {
                x[i * n + j] = self.dq_q[i * d + j];
                x[i * n + d + j] = self.dp_q[i * d + j];
                x[(d + i) * n + j] = self.dq_p[i * d + j];
                x[(d + i) * n + d + j] = self.dp_p[i * d + j];
            }
        }
        x
    }

    /// `max |ᵀX J X − J|`.
    pub fn symplectic_defect(&self) -> f64 {
        let d = self.dim();
        let n = 2 * d;
        let x = self.assembled();
        let mut j = vec![0.0; n * n];
        for i in 0..d {
            j[i * n + d + i] = 1.0;
            j[(d + i) * n + i] = -1.0;
        }
        let xtjx = linalg::matmul(&linalg::transpose(&x, n), &linalg::matmul(&j, &x, n), n);
        xtjx.iter().zip(&j).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

/// What the fixed-step integrator carries along the orbit.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Carry {
    pub monodromy: bool,
    pub action: bool,
}

/// Terminal data of one integration.
#[derive(Debug, Clone)]
pub(crate) struct Endpoint {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub action: f64,
    /// Row-major `2d x 2d`, present when requested.
    pub monodromy: Option<Vec<f64>>,
}

impl Endpoint {
    /// Splits the monodromy into `(∂qQ, ∂pQ, ∂qP, ∂pP)`.
    pub fn blocks(&self) -> Option<[Vec<f64>; 4]> {
        let x = self.monodromy.as_ref()?;
        let d = self.q.len();
        let n = 2 * d;
        let mut b = [vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]];
        for i in 0..d {
            for j in 0..d {
                b[0][i * d + j] = x[i * n + j];
                b[1][i * d + j] = x[i * n + d + j];
                b[2][i * d + j] = x[(d + i) * n + j];
                b[3][i * d + j] = x[(d + i) * n + d + j];
            }
        }
        Some(b)
    }
}

struct Rhs<'a> {
    model: &'a HamiltonianModel,
    d: usize,
    carry: Carry,
    dq: Vec<f64>,
    dp: Vec<f64>,
    hqq: Vec<f64>,
    hqp: Vec<f64>,
    hpp: Vec<f64>,
    a: Vec<f64>,
}

impl<'a> Rhs<'a> {
    fn new(model: &'a HamiltonianModel, carry: Carry) -> Self {
        let d = model.dim();
        Self {
            model,
            d,
            carry,
            dq: vec![0.0; d],
            dp: vec![0.0; d],
            hqq: vec![0.0; d * d],
            hqp: vec![0.0; d * d],
            hpp: vec![0.0; d * d],
            a: vec![0.0; 4 * d * d],
        }
    }

    fn len(&self) -> usize {
        2 * self.d + 1 + if self.carry.monodromy { 4 * self.d * self.d } else { 0 }
    }

    fn eval(&mut self, t: f64, y: &[f64], out: &mut [f64]) {
        let d = self.d;
        let (q, rest) = y.split_at(d);
        let p = &rest[..d];
        self.model.grads_into(t, q, p, &mut self.dq, &mut self.dp);
        out[..d].copy_from_slice(&self.dp);
        for i in 0..d {
            out[d + i] = -self.dq[i];
        }
        out[2 * d] = if self.carry.action {
            linalg::dot(p, &self.dp) - self.model.value(t, q, p)
        } else {
            0.0
        };
        if self.carry.monodromy {
            self.model
                .hessian_into(t, q, p, &mut self.hqq, &mut self.hqp, &mut self.hpp);
            let n = 2 * d;
            for i in 0..d {
                for j in 0..d {
                    self.a[i * n + j] = self.hqp[j * d + i];
                    self.a[i * n + d + j] = self.hpp[i * d + j];
                    self.a[(d + i) * n + j] = -self.hqq[i * d + j];
                    self.a[(d + i) * n + d + j] = -self.hqp[i * d + j];
                }
            }
            let x = &y[2 * d + 1..];
            let dx = &mut out[2 * d + 1..];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += self.a[i * n + k] * x[k * n + j];
                    }
                    dx[i * n + j] = s;
                }
            }
        }
    }
}

/// Number of equal steps covering `[tau, t]` with steps no longer than `max_step`.
pub(crate) fn step_count(tau: f64, t: f64, max_step: f64) -> usize {
    let span = (t - tau).abs();
    if span == 0.0 {
        0
    } else {
        ((span / max_step) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Fixed-step RK4 from `(q0, p0)` at `tau` to time `t` (either direction).
/// `observer` sees every node including the first.
pub(crate) fn propagate(
    model: &HamiltonianModel,
    q0: &[f64],
    p0: &[f64],
    tau: f64,
    t: f64,
    max_step: f64,
    carry: Carry,
    mut observer: Option<&mut dyn FnMut(f64, &[f64])>,
) -> Result<Endpoint> {
    let d = model.dim();
    let mut rhs = Rhs::new(model, carry);
    let len = rhs.len();
    let mut y = vec![0.0; len];
    y[..d].copy_from_slice(q0);
    y[d..2 * d].copy_from_slice(p0);
    if carry.monodromy {
        let n = 2 * d;
        for i in 0..n {
            y[2 * d + 1 + i * n + i] = 1.0;
        }
    }
    let steps = step_count(tau, t, max_step);
    let h = if steps == 0 { 0.0 } else { (t - tau) / steps as f64 };
    let mut k1 = vec![0.0; len];
    let mut k2 = vec![0.0; len];
    let mut k3 = vec![0.0; len];
    let mut k4 = vec![0.0; len];
    let mut tmp = vec![0.0; len];
    if let Some(obs) = observer.as_mut() {
        obs(tau, &y[..2 * d]);
    }
    for s in 0..steps {
        let ts = tau + s as f64 * h;
        rhs.eval(ts, &y, &mut k1);
        for i in 0..len {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        rhs.eval(ts + 0.5 * h, &tmp, &mut k2);
        for i in 0..len {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        rhs.eval(ts + 0.5 * h, &tmp, &mut k3);
        for i in 0..len {
            tmp[i] = y[i] + h * k3[i];
        }
        rhs.eval(ts + h, &tmp, &mut k4);
        for i in 0..len {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let tn = if s + 1 == steps { t } else { ts + h };
        if y[..2 * d].iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD) {
            return Err(Error::TrajectoryEscape { time: tn });
        }
        if let Some(obs) = observer.as_mut() {
            obs(tn, &y[..2 * d]);
        }
    }
    Ok(Endpoint {
        q: y[..d].to_vec(),
        p: y[d..2 * d].to_vec(),
        action: y[2 * d],
        monodromy: carry.monodromy.then(|| y[2 * d + 1..].to_vec()),
    })
}

/// Integrates the Hamiltonian system from `x0` at time `tau` to time `t`,
/// recording every step. `max_step` bounds the fixed RK4 step.
pub fn integrate_flow(model: &HamiltonianModel, x0: &PhaseState, tau: f64, t: f64, max_step: f64) -> Result<Trajectory> {
    if !x0.is_finite() {
        return Err(Error::InvalidInput("initial state is not finite".into()));
    }
    let d = model.dim();
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new(), energy: Vec::new() };
    let mut record = |s: f64, y: &[f64]| {
        let (q, p) = y.split_at(d);
        traj.times.push(s);
        traj.states.push(PhaseState::new(q.to_vec(), p.to_vec()));
        traj.energy.push(model.value(s, q, p));
    };
    propagate(model, &x0.q, &x0.p, tau, t, max_step, Carry::default(), Some(&mut record))?;
    Ok(traj)
}

/// Terminal state of `φ_τ^t(x0)` without recording the orbit.
pub fn flow_map(model: &HamiltonianModel, x0: &PhaseState, tau: f64, t: f64, max_step: f64) -> Result<PhaseState> {
    let e = propagate(model, &x0.q, &x0.p, tau, t, max_step, Carry::default(), None)?;
    Ok(PhaseState::new(e.q, e.p))
}

/// Solves the variational equation along the orbit of `x0`.
pub fn monodromy(model: &HamiltonianModel, x0: &PhaseState, tau: f64, t: f64, max_step: f64) -> Result<MonodromyResult> {
    if !x0.is_finite() {
        return Err(Error::InvalidInput("initial state is not finite".into()));
    }
    let carry = Carry { monodromy: true, action: false };
    let e = propagate(model, &x0.q, &x0.p, tau, t, max_step, carry, None)?;
    let [dq_q, dp_q, dq_p, dp_p] = e.blocks().expect("monodromy requested");
    let n = 2 * model.dim();
    let mut dev = e.monodromy.clone().unwrap();
    for i in 0..n {
        dev[i * n + i] -= 1.0;
    }
    Ok(MonodromyResult {
        dq_q,
        dp_q,
        dq_p,
        dp_p,
        deviation: linalg::operator_norm(&dev, n),
        terminal: PhaseState::new(e.q, e.p),
    })
}

/// `σ = m/(4M²)`, with the declared or sampled constants.
pub fn sigma_bound(model: &HamiltonianModel, use_empirical: bool) -> f64 {
    let (m, big_m) = if use_empirical {
        let r = model.check_hypotheses(&SampleBox::standard(model.dim()), 10_000, 0);
        (r.m_emp, r.big_m_emp)
    } else {
        (model.m(), model.M())
    };
    m / (4.0 * big_m * big_m)
}

/// Sampled monotonicity margin of `p ↦ Q_0^t(q, p)` against `mt/2`.
///
/// Returns `min [(Q(p′) − Q(p))·(p′ − p)] / |p′ − p|² − mt/2` over
/// `n_samples` random pairs in `p_box`. A nonnegative value certifies the
/// estimate on the sample only.
pub fn check_twist(
    model: &HamiltonianModel,
    q: &[f64],
    t: f64,
    p_box: &[(f64, f64)],
    n_samples: usize,
    max_step: f64,
) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidInput("twist check needs t > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x7715);
    let mut draw = || -> Vec<f64> { p_box.iter().map(|&(a, b)| rng.gen_range(a..=b)).collect() };
    let mut worst = f64::INFINITY;
    for _ in 0..n_samples.max(1) {
        let p = draw();
        let pp = draw();
        let dp: Vec<f64> = pp.iter().zip(&p).map(|(a, b)| a - b).collect();
        let n2 = linalg::dot(&dp, &dp);
        if n2 < 1e-20 {
            continue;
        }
        let q_a = propagate(model, q, &p, 0.0, t, max_step, Carry::default(), None)?.q;
        let q_b = propagate(model, q, &pp, 0.0, t, max_step, Carry::default(), None)?.q;
        let dq: Vec<f64> = q_b.iter().zip(&q_a).map(|(a, b)| a - b).collect();
        worst = worst.min(linalg::dot(&dq, &dp) / n2);
    }
    Ok(worst - 0.5 * model.m() * t)
}

/// How the short-time window `σ_eff` was chosen.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaPolicy {
    Declared,
    Empirical,
    /// A user-supplied window accepted after a passing twist scan over
    /// `|p_i| ≤ p_max`.
    Override { sigma: f64, p_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaEff {
    pub value: f64,
    pub policy: SigmaPolicy,
    /// Smallest margin of the twist scan backing an override.
    pub twist_margin: Option<f64>,
}

/// Resolves the short-time window. Overrides are accepted only when the
/// twist scan passes at `t ∈ {σ/4, σ/2, σ}` on a set of base points.
pub fn resolve_sigma(model: &HamiltonianModel, policy: SigmaPolicy) -> Result<SigmaEff> {
    match policy {
        SigmaPolicy::Declared => Ok(SigmaEff { value: sigma_bound(model, false), policy, twist_margin: None }),
        SigmaPolicy::Empirical => Ok(SigmaEff { value: sigma_bound(model, true), policy, twist_margin: None }),
        SigmaPolicy::Override { sigma, p_max } => {
            if !(sigma > 0.0 && p_max > 0.0) {
                return Err(Error::InvalidInput("sigma override and p_max must be positive".into()));
            }
            let d = model.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5167);
            let bases: Vec<Vec<f64>> = (0..8)
                .map(|i| {
                    if d == 1 {
                        vec![i as f64 / 8.0]
                    } else {
                        (0..d).map(|_| rng.gen_range(0.0..1.0)).collect()
                    }
                })
                .collect();
            let p_box = vec![(-p_max, p_max); d];
            let step = sigma / 20.0;
            let mut margin = f64::INFINITY;
            for q in &bases {
                for frac in [0.25, 0.5, 1.0] {
                    margin = margin.min(check_twist(model, q, frac * sigma, &p_box, 200, step)?);
                }
            }
            if margin < 0.0 {
                return Err(Error::TwistNotVerified { sigma, margin });
            }
            Ok(SigmaEff { value: sigma, policy, twist_margin: Some(margin) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn free() -> HamiltonianModel {
        HamiltonianModel::free(1)
    }

    #[test]
    fn free_flow_is_a_straight_line() {
        let tr = integrate_flow(&free(), &PhaseState::new(vec![0.0], vec![1.0]), 0.0, 2.0, 0.01).unwrap();
        let x = tr.terminal();
        assert!((x.q[0] - 2.0).abs() < 1e-13 && (x.p[0] - 1.0).abs() < 1e-14);
        assert_eq!(*tr.times.last().unwrap(), 2.0);
    }

    #[test]
    fn pendulum_conserves_energy_and_round_trips() {
        let m = HamiltonianModel::pendulum();
        let x0 = PhaseState::new(vec![0.3], vec![0.7]);
        let tr = integrate_flow(&m, &x0, 0.0, 10.0, 0.0025).unwrap();
        assert!(tr.max_energy_drift() <= TOL_ENERGY, "{}", tr.max_energy_drift());
        let back = flow_map(&m, tr.terminal(), 10.0, 0.0, 0.0025).unwrap();
        assert!((back.q[0] - 0.3).abs() < 1e-8 && (back.p[0] - 0.7).abs() < 1e-8);
    }

    #[test]
    fn escape_is_reported() {
        // ṗ = p² style blow-up
        let m = HamiltonianModel::custom(1, |_, q, p| 0.5 * p[0] * p[0] - q[0].powi(4), 1.0, 1.0, false, true);
        match integrate_flow(&m, &PhaseState::new(vec![1.0], vec![1.0]), 0.0, 10.0, 1e-3) {
            Err(Error::TrajectoryEscape { time }) => assert!(time > 0.0 && time < 10.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn free_monodromy() {
        let r = monodromy(&free(), &PhaseState::new(vec![0.2], vec![-1.0]), 0.0, 0.3, 0.01).unwrap();
        assert!((r.dq_q[0] - 1.0).abs() < 1e-14);
        assert!((r.dp_q[0] - 0.3).abs() < 1e-14);
        assert!(r.dq_p[0].abs() < 1e-14 && (r.dp_p[0] - 1.0).abs() < 1e-14);
        assert!((r.deviation - 0.3).abs() < 1e-12);
        assert!(r.deviation <= 2.0 * 0.3);
    }

    #[test]
    fn pendulum_monodromy_estimates() {
        let m = HamiltonianModel::pendulum();
        let big_m = 4.0 * PI * PI;
        for &t in &[0.005, 0.01, 1.0 / big_m] {
            let r = monodromy(&m, &PhaseState::new(vec![0.0], vec![0.4]), 0.0, t, 1e-3).unwrap();
            assert!(r.deviation <= 2.0 * big_m * t + 1e-9, "t={t}: {}", r.deviation);
            assert!(r.symplectic_defect() <= TOL_SYMP);
        }
    }

    #[test]
    fn monodromy_matches_finite_difference_jacobian() {
        let m = HamiltonianModel::pendulum();
        let x0 = PhaseState::new(vec![0.37], vec![-0.8]);
        let r = monodromy(&m, &x0, 0.0, 0.05, 1e-3).unwrap();
        let h = 1e-6;
        let col = |dq: f64, dp: f64| {
            let a = flow_map(&m, &PhaseState::new(vec![0.37 + dq], vec![-0.8 + dp]), 0.0, 0.05, 1e-3).unwrap();
            let b = flow_map(&m, &PhaseState::new(vec![0.37 - dq], vec![-0.8 - dp]), 0.0, 0.05, 1e-3).unwrap();
            ((a.q[0] - b.q[0]) / (2.0 * h), (a.p[0] - b.p[0]) / (2.0 * h))
        };
        let (qq, pq) = col(h, 0.0);
        let (qp, pp) = col(0.0, h);
        let det = qq * pp - qp * pq;
        assert!((det - 1.0).abs() <= 1e-8, "det {det}");
        assert!((r.dq_q[0] - qq).abs() < 1e-7 && (r.dp_q[0] - qp).abs() < 1e-7);
        assert!((r.dq_p[0] - pq).abs() < 1e-6 && (r.dp_p[0] - pp).abs() < 1e-7);
    }

    #[test]
    fn fourth_order_convergence() {
        let m = HamiltonianModel::pendulum();
        let x0 = PhaseState::new(vec![0.1], vec![1.3]);
        let reference = flow_map(&m, &x0, 0.0, 1.0, 1e-4).unwrap();
        let err = |h: f64| {
            let x = flow_map(&m, &x0, 0.0, 1.0, h).unwrap();
            (x.q[0] - reference.q[0]).abs() + (x.p[0] - reference.p[0]).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!(ratio > 12.0 && ratio < 20.0, "ratio {ratio}");
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(sigma_bound(&free(), false), 0.25);
        let s = sigma_bound(&HamiltonianModel::pendulum(), true);
        assert!((s - 1.0 / (64.0 * PI.powi(4))).abs() / s < 1e-3, "{s}");
    }

    #[test]
    fn twist_margins() {
        let margin = check_twist(&free(), &[0.3], 0.25, &[(-4.0, 4.0)], 50, 0.01).unwrap();
        assert!((margin - 0.125).abs() < 1e-12);
        let pend = HamiltonianModel::pendulum();
        let sigma = sigma_bound(&pend, false);
        let m = check_twist(&pend, &[0.0], sigma, &[(-4.0, 4.0)], 1000, sigma / 20.0).unwrap();
        assert!(m >= 0.0);
        let m = check_twist(&pend, &[0.0], 0.2, &[(-4.0, 4.0)], 1000, 0.01).unwrap();
        assert!(m >= 0.0, "{m}");
    }

    #[test]
    fn override_requires_twist() {
        let pend = HamiltonianModel::pendulum();
        let s = resolve_sigma(&pend, SigmaPolicy::Override { sigma: 0.2, p_max: 4.0 }).unwrap();
        assert_eq!(s.value, 0.2);
        assert!(s.twist_margin.unwrap() >= 0.0);
        // far past the first conjugate time the map is not monotone
        assert!(matches!(
            resolve_sigma(&pend, SigmaPolicy::Override { sigma: 1.5, p_max: 1.0 }),
            Err(Error::TwistNotVerified { .. })
        ));
    }
}
