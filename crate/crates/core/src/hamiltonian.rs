//! Hamiltonian models, their derivatives, the standing hypotheses and the
//! Legendre transform.
//!
//! A model is an immutable description of `H(t, q, p)` on `R^d x R^d*`
//! together with the declared constants `m` (lower bound of `∂²ppH`) and
//! `M` (bound on `d²H` and on the growth of `H`). Built-in families carry
//! analytic first and second derivatives; custom closures fall back to
//! central finite differences.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const TWO_PI: f64 = 2.0 * PI;

/// Default relative finite-difference step.
pub const DEFAULT_H_FD: f64 = 1e-5;
/// Gradient residual at which the Legendre Newton solve stops.
pub const TOL_NEWTON: f64 = 1e-10;
pub const LEGENDRE_MAX_ITER: usize = 50;

/// One Fourier mode `a cos(2π k·q) + b sin(2π k·q)`; `k = 0` is a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub k: Vec<i32>,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
}

impl TrigTerm {
    pub fn cos(k: Vec<i32>, a: f64) -> Self {
        Self { k, a, b: 0.0 }
    }

    fn phase(&self, q: &[f64]) -> f64 {
        TWO_PI * self.k.iter().zip(q).map(|(&k, &x)| k as f64 * x).sum::<f64>()
    }
}

/// Trigonometric polynomial on the torus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrigPotential {
    pub terms: Vec<TrigTerm>,
}

impl TrigPotential {
    pub fn new(terms: Vec<TrigTerm>) -> Self {
        Self { terms }
    }

    /// `amp · cos(2π q)` in one dimension.
    pub fn cosine(amp: f64) -> Self {
        Self::new(vec![TrigTerm::cos(vec![1], amp)])
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let ph = t.phase(q);
                t.a * ph.cos() + t.b * ph.sin()
            })
            .sum()
    }

    pub fn grad_into(&self, q: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for t in &self.terms {
            let ph = t.phase(q);
            let s = TWO_PI * (-t.a * ph.sin() + t.b * ph.cos());
            for (o, &k) in out.iter_mut().zip(&t.k) {
                *o += s * k as f64;
            }
        }
    }

    pub fn hess_add(&self, q: &[f64], out: &mut [f64], d: usize) {
        for t in &self.terms {
            let ph = t.phase(q);
            let s = -TWO_PI * TWO_PI * (t.a * ph.cos() + t.b * ph.sin());
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] += s * t.k[i] as f64 * t.k[j] as f64;
                }
            }
        }
    }

    /// Crude global bounds `(sup|V|, sup‖d²V‖)` from the coefficients.
    pub fn bounds(&self) -> (f64, f64) {
        let mut v = 0.0;
        let mut h = 0.0;
        for t in &self.terms {
            let amp = t.a.hypot(t.b);
            v += amp;
            let k2: f64 = t.k.iter().map(|&k| (k as f64).powi(2)).sum();
            h += amp * TWO_PI * TWO_PI * k2;
        }
        (v, h)
    }

    /// Maximum of `V` by a dense scan of the unit cell (d ≤ 2) refined by
    /// golden-section search in 1-d.
    pub fn max_value(&self, d: usize) -> f64 {
        match d {
            1 => {
                let n = 4096;
                let (i_best, _) = (0..n)
                    .map(|i| (i, self.value(&[i as f64 / n as f64])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                let (mut lo, mut hi) = ((i_best as f64 - 1.0) / n as f64, (i_best as f64 + 1.0) / n as f64);
                let g = 0.5 * (5f64.sqrt() - 1.0);
                for _ in 0..80 {
                    let a = hi - g * (hi - lo);
                    let b = lo + g * (hi - lo);
                    if self.value(&[a]) > self.value(&[b]) {
                        hi = b;
                    } else {
                        lo = a;
                    }
                }
                self.value(&[0.5 * (lo + hi)])
            }
            _ => {
                let n = 256usize;
                let total = n.pow(d as u32);
                (0..total)
                    .map(|mut idx| {
                        let q: Vec<f64> = (0..d)
                            .map(|_| {
                                let c = idx % n;
                                idx /= n;
                                c as f64 / n as f64
                            })
                            .collect();
                        self.value(&q)
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }
}

type CustomFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Family {
    /// `a |p|²/2`; `a = 1` is the free model.
    Quadratic { scale: f64 },
    /// `|p|²/2 + V(q)`.
    Mechanical { potential: TrigPotential },
    /// `|p|²/2 + V(q) + cos(2π ω t) W(q)`, time-periodic and non-autonomous.
    Forced {
        potential: TrigPotential,
        forcing: TrigPotential,
        omega: f64,
    },
    /// User-supplied evaluator; derivatives by finite differences.
    Custom { eval: CustomFn, autonomous: bool },
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Quadratic { scale } => f.debug_struct("Quadratic").field("scale", scale).finish(),
            Family::Mechanical { potential } => {
                f.debug_struct("Mechanical").field("potential", potential).finish()
            }
            Family::Forced { potential, forcing, omega } => f
                .debug_struct("Forced")
                .field("potential", potential)
                .field("forcing", forcing)
                .field("omega", omega)
                .finish(),
            Family::Custom { autonomous, .. } => {
                f.debug_struct("Custom").field("autonomous", autonomous).finish()
            }
        }
    }
}

/// An evaluable Hamiltonian with its declared constants.
#[derive(Debug, Clone)]
pub struct HamiltonianModel {
    d: usize,
    family: Family,
    shift: f64,
    m: f64,
    big_m: f64,
    periodic: bool,
    h_fd: f64,
}

impl HamiltonianModel {
    /// Free particle `|p|²/2` with `m = M = 1`.
    pub fn free(d: usize) -> Self {
        Self::quadratic(d, 1.0)
    }

    /// `a |p|²/2` with `m = M = a`.
    pub fn quadratic(d: usize, a: f64) -> Self {
        Self {
            d,
            family: Family::Quadratic { scale: a },
            shift: 0.0,
            m: a,
            big_m: a,
            periodic: true,
            h_fd: DEFAULT_H_FD,
        }
    }

    /// `|p|²/2 + V(q)` with `m = 1` and `M` from the coefficient bounds.
    pub fn mechanical(d: usize, potential: TrigPotential) -> Self {
        let (vb, hb) = potential.bounds();
        Self {
            d,
            family: Family::Mechanical { potential },
            shift: 0.0,
            m: 1.0,
            big_m: 1f64.max(hb).max(vb),
            periodic: true,
            h_fd: DEFAULT_H_FD,
        }
    }

    /// `p²/2 + cos(2π q)` with the declared constants `m = 1`, `M = 40`.
    pub fn pendulum() -> Self {
        Self::mechanical(1, TrigPotential::cosine(1.0)).with_constants(1.0, 40.0)
    }

    pub fn forced(d: usize, potential: TrigPotential, forcing: TrigPotential, omega: f64) -> Self {
        let (vb, hb) = potential.bounds();
        let (wb, whb) = forcing.bounds();
        Self {
            d,
            family: Family::Forced { potential, forcing, omega },
            shift: 0.0,
            m: 1.0,
            big_m: 1f64.max(hb + whb).max(vb + wb),
            periodic: true,
            h_fd: DEFAULT_H_FD,
        }
    }

    pub fn custom<F>(d: usize, eval: F, m: f64, big_m: f64, periodic: bool, autonomous: bool) -> Self
    where
        F: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            d,
            family: Family::Custom { eval: Arc::new(eval), autonomous },
            shift: 0.0,
            m,
            big_m,
            periodic,
            h_fd: DEFAULT_H_FD,
        }
    }

    pub fn with_constants(mut self, m: f64, big_m: f64) -> Self {
        self.m = m;
        self.big_m = big_m;
        self
    }

    /// Adds a constant to the energy.
    pub fn with_shift(mut self, c: f64) -> Self {
        self.shift += c;
        self
    }

    pub fn with_h_fd(mut self, h_fd: f64) -> Self {
        self.h_fd = h_fd;
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }
    pub fn family(&self) -> &Family {
        &self.family
    }
    pub fn m(&self) -> f64 {
        self.m
    }
    #[allow(non_snake_case)]
    pub fn M(&self) -> f64 {
        self.big_m
    }
    pub fn shift(&self) -> f64 {
        self.shift
    }
    pub fn periodic(&self) -> bool {
        self.periodic
    }
    pub fn h_fd(&self) -> f64 {
        self.h_fd
    }

    pub fn autonomous(&self) -> bool {
        match &self.family {
            Family::Forced { .. } => false,
            Family::Custom { autonomous, .. } => *autonomous,
            _ => true,
        }
    }

    /// True when `H` depends on `p` only, so kernels are translation invariant.
    pub fn q_homogeneous(&self) -> bool {
        matches!(self.family, Family::Quadratic { .. })
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        !matches!(self.family, Family::Custom { .. })
    }

    /// Raw evaluation, no finiteness check.
    pub fn value(&self, t: f64, q: &[f64], p: &[f64]) -> f64 {
        let kinetic = || 0.5 * linalg::dot(p, p);
        self.shift
            + match &self.family {
                Family::Quadratic { scale } => scale * kinetic(),
                Family::Mechanical { potential } => kinetic() + potential.value(q),
                Family::Forced { potential, forcing, omega } => {
                    kinetic() + potential.value(q) + (TWO_PI * omega * t).cos() * forcing.value(q)
                }
                Family::Custom { eval, .. } => eval(t, q, p),
            }
    }

    pub fn eval(&self, t: f64, q: &[f64], p: &[f64]) -> Result<f64> {
        let h = self.value(t, q, p);
        if h.is_finite() {
            Ok(h)
        } else {
            Err(self.domain_error(t, q, p))
        }
    }

    fn domain_error(&self, t: f64, q: &[f64], p: &[f64]) -> Error {
        Error::NumericalDomain { t, q: q.to_vec(), p: p.to_vec() }
    }

    /// Writes `∂qH` and `∂pH` into the given buffers.
    pub fn grads_into(&self, t: f64, q: &[f64], p: &[f64], dq: &mut [f64], dp: &mut [f64]) {
        match &self.family {
            Family::Quadratic { scale } => {
                dq.iter_mut().for_each(|x| *x = 0.0);
                for (o, &pi) in dp.iter_mut().zip(p) {
                    *o = scale * pi;
                }
            }
            Family::Mechanical { potential } => {
                potential.grad_into(q, dq);
                dp.copy_from_slice(p);
            }
            Family::Forced { potential, forcing, omega } => {
                potential.grad_into(q, dq);
                let mut w = vec![0.0; self.d];
                forcing.grad_into(q, &mut w);
                let c = (TWO_PI * omega * t).cos();
                for (o, wi) in dq.iter_mut().zip(w) {
                    *o += c * wi;
                }
                dp.copy_from_slice(p);
            }
            Family::Custom { .. } => self.fd_grads_into(t, q, p, dq, dp),
        }
    }

    /// Energy together with `(∂qH, ∂pH)`.
    pub fn eval_and_grads(&self, t: f64, q: &[f64], p: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_dims(q, p)?;
        let h = self.eval(t, q, p)?;
        let mut dq = vec![0.0; self.d];
        let mut dp = vec![0.0; self.d];
        self.grads_into(t, q, p, &mut dq, &mut dp);
        if dq.iter().chain(&dp).any(|x| !x.is_finite()) {
            return Err(self.domain_error(t, q, p));
        }
        Ok((h, dq, dp))
    }

    fn check_dims(&self, q: &[f64], p: &[f64]) -> Result<()> {
        if q.len() != self.d || p.len() != self.d {
            return Err(Error::InvalidInput(format!(
                "expected q and p of length {}, got {} and {}",
                self.d,
                q.len(),
                p.len()
            )));
        }
        Ok(())
    }

    fn fd_step(&self, x: f64) -> f64 {
        self.h_fd * x.abs().max(1.0)
    }

    /// Central finite-difference gradients of the evaluator.
    pub fn fd_grads_into(&self, t: f64, q: &[f64], p: &[f64], dq: &mut [f64], dp: &mut [f64]) {
        let mut qq = q.to_vec();
        let mut pp = p.to_vec();
        for i in 0..self.d {
            let h = self.fd_step(q[i]);
            qq[i] = q[i] + h;
            let fp = self.value(t, &qq, p);
            qq[i] = q[i] - h;
            let fm = self.value(t, &qq, p);
            qq[i] = q[i];
            dq[i] = (fp - fm) / (2.0 * h);

            let h = self.fd_step(p[i]);
            pp[i] = p[i] + h;
            let fp = self.value(t, q, &pp);
            pp[i] = p[i] - h;
            let fm = self.value(t, q, &pp);
            pp[i] = p[i];
            dp[i] = (fp - fm) / (2.0 * h);
        }
    }

    /// Second derivatives restricted to `(q, p)`: `hqq`, `hqp` (`∂qi ∂pj`),
    /// `hpp`, each `d x d` row-major.
    pub fn hessian_into(&self, t: f64, q: &[f64], p: &[f64], hqq: &mut [f64], hqp: &mut [f64], hpp: &mut [f64]) {
        let d = self.d;
        match &self.family {
            Family::Quadratic { scale } => {
                hqq.iter_mut().for_each(|x| *x = 0.0);
                hqp.iter_mut().for_each(|x| *x = 0.0);
                hpp.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..d {
                    hpp[i * d + i] = *scale;
                }
            }
            Family::Mechanical { potential } => {
                hqq.iter_mut().for_each(|x| *x = 0.0);
                potential.hess_add(q, hqq, d);
                hqp.iter_mut().for_each(|x| *x = 0.0);
                hpp.copy_from_slice(&linalg::identity(d));
            }
            Family::Forced { potential, forcing, omega } => {
                hqq.iter_mut().for_each(|x| *x = 0.0);
                potential.hess_add(q, hqq, d);
                let mut w = vec![0.0; d * d];
                forcing.hess_add(q, &mut w, d);
                let c = (TWO_PI * omega * t).cos();
                for (o, wi) in hqq.iter_mut().zip(w) {
                    *o += c * wi;
                }
                hqp.iter_mut().for_each(|x| *x = 0.0);
                hpp.copy_from_slice(&linalg::identity(d));
            }
            Family::Custom { .. } => self.fd_hessian_into(t, q, p, hqq, hqp, hpp),
        }
    }

    /// Finite differences of the gradients (which are themselves finite
    /// differences for custom models).
    pub fn fd_hessian_into(&self, t: f64, q: &[f64], p: &[f64], hqq: &mut [f64], hqp: &mut [f64], hpp: &mut [f64]) {
        let d = self.d;
        let mut gq_p = vec![0.0; d];
        let mut gp_p = vec![0.0; d];
        let mut gq_m = vec![0.0; d];
        let mut gp_m = vec![0.0; d];
        let mut qq = q.to_vec();
        let mut pp = p.to_vec();
        // a coarser step for the outer difference keeps round-off in check
        let outer = |x: f64| (self.h_fd.sqrt() * 0.1) * x.abs().max(1.0);
        for j in 0..d {
            let h = outer(q[j]);
            qq[j] = q[j] + h;
            self.grads_into(t, &qq, p, &mut gq_p, &mut gp_p);
            qq[j] = q[j] - h;
            self.grads_into(t, &qq, p, &mut gq_m, &mut gp_m);
            qq[j] = q[j];
            for i in 0..d {
                hqq[i * d + j] = (gq_p[i] - gq_m[i]) / (2.0 * h);
                // ∂qj ∂pi
                hqp[j * d + i] = (gp_p[i] - gp_m[i]) / (2.0 * h);
            }
            let h = outer(p[j]);
            pp[j] = p[j] + h;
            self.grads_into(t, q, &pp, &mut gq_p, &mut gp_p);
            pp[j] = p[j] - h;
            self.grads_into(t, q, &pp, &mut gq_m, &mut gp_m);
            pp[j] = p[j];
            for i in 0..d {
                hpp[i * d + j] = (gp_p[i] - gp_m[i]) / (2.0 * h);
            }
        }
    }

    /// Full symmetric `2d x 2d` Hessian in `(q, p)`.
    pub fn phase_hessian(&self, t: f64, q: &[f64], p: &[f64]) -> Vec<f64> {
        let d = self.d;
        let (mut hqq, mut hqp, mut hpp) = (vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]);
        self.hessian_into(t, q, p, &mut hqq, &mut hqp, &mut hpp);
        let n = 2 * d;
        let mut h = vec![0.0; n * n];
        for i in 0..d {
            for j in 0..d {
                h[i * n + j] = hqq[i * d + j];
                h[i * n + d + j] = hqp[i * d + j];
                h[(d + j) * n + i] = hqp[i * d + j];
                h[(d + i) * n + d + j] = hpp[i * d + j];
            }
        }
        h
    }

    /// Legendre transform `L(t,q,v) = sup_p (p·v − H(t,q,p))` by damped
    /// Newton on `∂pH(t,q,p) = v`.
    pub fn legendre(&self, t: f64, q: &[f64], v: &[f64]) -> Result<Legendre> {
        self.legendre_from(t, q, v, None)
    }

    pub fn legendre_from(&self, t: f64, q: &[f64], v: &[f64], guess: Option<&[f64]>) -> Result<Legendre> {
        let d = self.d;
        if let Family::Quadratic { scale } = self.family {
            let p: Vec<f64> = v.iter().map(|x| x / scale).collect();
            let lag = linalg::dot(&p, v) - self.value(t, q, &p);
            return Ok(Legendre { lagrangian: lag, momentum: p, iterations: 0 });
        }
        let mut p = guess.map(|g| g.to_vec()).unwrap_or_else(|| match self.family {
            Family::Mechanical { .. } | Family::Forced { .. } => v.to_vec(),
            _ => vec![0.0; d],
        });
        let objective = |p: &[f64]| linalg::dot(p, v) - self.value(t, q, p);
        let mut dq = vec![0.0; d];
        let mut dp = vec![0.0; d];
        let (mut hqq, mut hqp, mut hpp) = (vec![0.0; d * d], vec![0.0; d * d], vec![0.0; d * d]);
        let tol = TOL_NEWTON * linalg::norm(v).max(1.0);
        let mut residual = f64::INFINITY;
        for it in 0..=LEGENDRE_MAX_ITER {
            self.grads_into(t, q, &p, &mut dq, &mut dp);
            let r: Vec<f64> = v.iter().zip(&dp).map(|(a, b)| a - b).collect();
            residual = linalg::norm(&r);
            if !residual.is_finite() {
                return Err(self.domain_error(t, q, &p));
            }
            if residual <= tol {
                let lag = objective(&p);
                return Ok(Legendre { lagrangian: lag, momentum: p, iterations: it });
            }
            self.hessian_into(t, q, &p, &mut hqq, &mut hqp, &mut hpp);
            let step = linalg::solve(&hpp, &r, d).unwrap_or_else(|| r.clone());
            let f0 = objective(&p);
            let slope = linalg::dot(&step, &r);
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = p.iter().zip(&step).map(|(a, s)| a + lambda * s).collect();
                let f = objective(&trial);
                if f >= f0 + 1e-4 * lambda * slope || lambda < 1e-8 {
                    p = trial;
                    break;
                }
                lambda *= 0.5;
            }
        }
        Err(Error::SolverDiverged { solver: "legendre", iterations: LEGENDRE_MAX_ITER, residual })
    }

    /// Samples the hypotheses on a box. Sampling only: a passing report is
    /// evidence on the box, never a global proof.
    pub fn check_hypotheses(&self, bounds: &SampleBox, n_samples: usize, seed: u64) -> HypothesisReport {
        let d = self.d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tol_hyp = 1e-6 * (1.0 + self.big_m);
        let mut m_emp = f64::INFINITY;
        let mut big_m_emp: f64 = 0.0;
        let mut worst_m = None;
        let mut worst_big_m = None;
        let mut h3_violation: f64 = 0.0;
        let mut worst_h3 = None;
        let mut h5_violation: f64 = 0.0;
        let mut worst_h5 = None;
        for _ in 0..n_samples.max(1) {
            let s = bounds.sample(&mut rng);
            let hess = self.phase_hessian(s.t, &s.q, &s.p);
            let ev = linalg::symmetric_eigenvalues(&hess, 2 * d);
            let op = ev[0].abs().max(ev[2 * d - 1].abs());
            if op > big_m_emp {
                big_m_emp = op;
                worst_big_m = Some(s.clone());
            }
            let mut hpp = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    hpp[i * d + j] = hess[(d + i) * 2 * d + d + j];
                }
            }
            let lo = linalg::symmetric_eigenvalues(&hpp, d)[0];
            if lo < m_emp {
                m_emp = lo;
                worst_m = Some(s.clone());
            }
            let h = self.value(s.t, &s.q, &s.p);
            let p2 = linalg::dot(&s.p, &s.p);
            let lower = 0.5 * self.m * p2 - self.big_m;
            let upper = 0.5 * self.big_m * p2 + self.big_m;
            let v = (lower - h).max(h - upper);
            if v > h3_violation {
                h3_violation = v;
                worst_h3 = Some(s.clone());
            }
            if self.periodic {
                for i in 0..d {
                    let mut q1 = s.q.clone();
                    q1[i] += 1.0;
                    let diff = (self.value(s.t, &q1, &s.p) - h).abs();
                    if diff > h5_violation {
                        h5_violation = diff;
                        worst_h5 = Some(s.clone());
                    }
                }
            }
        }
        let h1 = HypothesisCheck {
            pass: big_m_emp <= self.big_m + tol_hyp,
            measured: big_m_emp,
            worst: worst_big_m,
        };
        let h2 = HypothesisCheck {
            pass: m_emp >= self.m - tol_hyp,
            measured: m_emp,
            worst: worst_m,
        };
        let h3 = HypothesisCheck {
            pass: h3_violation <= tol_hyp,
            measured: h3_violation,
            worst: worst_h3,
        };
        let h5 = self.periodic.then(|| HypothesisCheck {
            pass: h5_violation <= 1e-12 * (1.0 + self.big_m),
            measured: h5_violation,
            worst: worst_h5,
        });
        HypothesisReport {
            m_declared: self.m,
            big_m_declared: self.big_m,
            m_emp,
            big_m_emp,
            h1,
            h2,
            h3,
            h5,
            samples: n_samples.max(1),
            seed,
            note: "constants are measured on the sampled box only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Legendre {
    pub lagrangian: f64,
    pub momentum: Vec<f64>,
    pub iterations: usize,
}

/// Axis-aligned sampling box in `(t, q, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub t: (f64, f64),
    pub q: Vec<(f64, f64)>,
    pub p: Vec<(f64, f64)>,
}

impl SampleBox {
    pub fn cube(d: usize, q: (f64, f64), p: (f64, f64), t: (f64, f64)) -> Self {
        Self { t, q: vec![q; d], p: vec![p; d] }
    }

    /// Unit cell in `q`, `|p| ≤ 4`, `t ∈ [0, 1]`.
    pub fn standard(d: usize) -> Self {
        Self::cube(d, (0.0, 1.0), (-4.0, 4.0), (0.0, 1.0))
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> SamplePoint {
        let mut draw = |(a, b): (f64, f64)| if b > a { rng.gen_range(a..b) } else { a };
        SamplePoint {
            t: draw(self.t),
            q: self.q.iter().map(|&r| draw(r)).collect(),
            p: self.p.iter().map(|&r| draw(r)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePoint {
    pub t: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub pass: bool,
    pub measured: f64,
    pub worst: Option<SamplePoint>,
}

/// Empirical check of the curvature, bound, growth and periodicity
/// hypotheses on a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub m_declared: f64,
    #[serde(rename = "M_declared")]
    pub big_m_declared: f64,
    pub m_emp: f64,
    #[serde(rename = "M_emp")]
    pub big_m_emp: f64,
    /// `‖d²H‖ ≤ M`; `measured` is the sampled maximum norm.
    pub h1: HypothesisCheck,
    /// `∂²ppH ≥ m`; `measured` is the sampled minimum eigenvalue.
    pub h2: HypothesisCheck,
    /// `(m/2)|p|² − M ≤ H ≤ (M/2)|p|² + M`; `measured` is the worst excess.
    pub h3: HypothesisCheck,
    /// Integer-translation invariance in `q` (periodic models only).
    pub h5: Option<HypothesisCheck>,
    pub samples: usize,
    pub seed: u64,
    pub note: &'static str,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.h1.pass && self.h2.pass && self.h3.pass && self.h5.as_ref().map_or(true, |h| h.pass)
    }
}

/// JSON model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: String,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(rename = "V_coeffs", default, skip_serializing_if = "Option::is_none")]
    pub v_coeffs: Option<Vec<TrigTerm>>,
    #[serde(rename = "W_coeffs", default, skip_serializing_if = "Option::is_none")]
    pub w_coeffs: Option<Vec<TrigTerm>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodic: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_fd: Option<f64>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("model description: {e}")))
    }

    pub fn build(&self) -> Result<HamiltonianModel> {
        if self.d == 0 {
            return Err(Error::InvalidInput("d must be positive".into()));
        }
        let check_terms = |terms: &Option<Vec<TrigTerm>>, key: &str| -> Result<TrigPotential> {
            let terms = terms.clone().unwrap_or_default();
            if let Some(t) = terms.iter().find(|t| t.k.len() != self.d) {
                return Err(Error::InvalidInput(format!(
                    "{key}: wave vector {:?} does not have length d={}",
                    t.k, self.d
                )));
            }
            Ok(TrigPotential::new(terms))
        };
        let reject = |key: &str, present: bool| -> Result<()> {
            if present {
                Err(Error::InvalidInput(format!("key `{key}` does not apply to family `{}`", self.family)))
            } else {
                Ok(())
            }
        };
        let mut model = match self.family.as_str() {
            "free" => {
                reject("a", self.a.is_some())?;
                reject("V_coeffs", self.v_coeffs.is_some())?;
                reject("W_coeffs", self.w_coeffs.is_some())?;
                reject("omega", self.omega.is_some())?;
                HamiltonianModel::free(self.d)
            }
            "quadratic" => {
                reject("V_coeffs", self.v_coeffs.is_some())?;
                reject("W_coeffs", self.w_coeffs.is_some())?;
                reject("omega", self.omega.is_some())?;
                let a = self.a.ok_or_else(|| Error::InvalidInput("quadratic family needs `a`".into()))?;
                if !(a > 0.0) {
                    return Err(Error::InvalidInput("`a` must be positive".into()));
                }
                HamiltonianModel::quadratic(self.d, a)
            }
            "mechanical" => {
                reject("a", self.a.is_some())?;
                reject("W_coeffs", self.w_coeffs.is_some())?;
                reject("omega", self.omega.is_some())?;
                HamiltonianModel::mechanical(self.d, check_terms(&self.v_coeffs, "V_coeffs")?)
            }
            "forced" => {
                reject("a", self.a.is_some())?;
                HamiltonianModel::forced(
                    self.d,
                    check_terms(&self.v_coeffs, "V_coeffs")?,
                    check_terms(&self.w_coeffs, "W_coeffs")?,
                    self.omega.unwrap_or(1.0),
                )
            }
            other => return Err(Error::InvalidInput(format!("unknown family `{other}`"))),
        };
        if let Some(c) = self.shift {
            model = model.with_shift(c);
        }
        let m = self.m.unwrap_or(model.m);
        let big_m = self.big_m.unwrap_or(model.big_m);
        if !(m > 0.0 && big_m > 0.0) {
            return Err(Error::InvalidInput("m and M must be positive".into()));
        }
        if m > big_m {
            return Err(Error::InvalidInput(format!("m={m} exceeds M={big_m}")));
        }
        model = model.with_constants(m, big_m);
        if self.periodic == Some(false) {
            model.periodic = false;
        }
        if let Some(h) = self.h_fd {
            if !(h > 0.0) {
                return Err(Error::InvalidInput("h_fd must be positive".into()));
            }
            model = model.with_h_fd(h);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn free_model_values() {
        let m = HamiltonianModel::free(2);
        let (h, dq, dp) = m.eval_and_grads(0.0, &[0.3, 0.1], &[3.0, 4.0]).unwrap();
        assert_eq!(h, 12.5);
        assert_eq!(dp, vec![3.0, 4.0]);
        assert_eq!(dq, vec![0.0, 0.0]);
    }

    #[test]
    fn pendulum_values() {
        let m = HamiltonianModel::pendulum();
        let (h, dq, dp) = m.eval_and_grads(0.0, &[0.0], &[0.0]).unwrap();
        assert_eq!((h, dq[0], dp[0]), (1.0, 0.0, 0.0));
        let (h, dq, _) = m.eval_and_grads(0.0, &[0.25], &[1.0]).unwrap();
        assert!(close(h, 0.5, 1e-15));
        assert!(close(dq[0], -2.0 * PI, 1e-12));
    }

    #[test]
    fn non_finite_is_a_domain_error() {
        let m = HamiltonianModel::custom(1, |_, q, p| p[0] * p[0] / q[0], 1.0, 1.0, false, true);
        match m.eval_and_grads(0.0, &[0.0], &[0.0]) {
            Err(Error::NumericalDomain { q, .. }) => assert_eq!(q, vec![0.0]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(m.eval_and_grads(0.0, &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn custom_model_uses_finite_differences() {
        let m = HamiltonianModel::custom(1, |_, q, p| 0.5 * p[0] * p[0] + q[0].sin(), 1.0, 2.0, false, true);
        let (_, dq, dp) = m.eval_and_grads(0.0, &[0.4], &[1.5]).unwrap();
        assert!(close(dq[0], 0.4f64.cos(), 1e-8));
        assert!(close(dp[0], 1.5, 1e-8));
        let hess = m.phase_hessian(0.0, &[0.4], &[1.5]);
        assert!(close(hess[0], -0.4f64.sin(), 1e-4));
        assert!(close(hess[3], 1.0, 1e-4));
    }

    #[test]
    fn legendre_examples() {
        let free = HamiltonianModel::free(1);
        let l = free.legendre(0.0, &[0.0], &[2.0]).unwrap();
        assert_eq!((l.lagrangian, l.momentum[0]), (2.0, 2.0));

        let quad = HamiltonianModel::quadratic(1, 2.0);
        let l = quad.legendre(0.0, &[0.0], &[2.0]).unwrap();
        assert!(close(l.lagrangian, 1.0, 1e-14));

        let pend = HamiltonianModel::pendulum();
        let l = pend.legendre(0.0, &[0.0], &[0.0]).unwrap();
        assert!(close(l.lagrangian, -1.0, 1e-14));
        assert_eq!(l.momentum[0], 0.0);
    }

    #[test]
    fn legendre_custom_converges_from_zero() {
        // h(p) = cosh(p) has ∂pH = sinh p, conjugate v asinh v − sqrt(1+v²)
        let m = HamiltonianModel::custom(1, |_, _, p| p[0].cosh(), 1.0, 10.0, false, true);
        let v = 3.0f64;
        let l = m.legendre(0.0, &[0.0], &[v]).unwrap();
        let exact = v * v.asinh() - (1.0 + v * v).sqrt();
        assert!(close(l.lagrangian, exact, 1e-8), "{} vs {exact}", l.lagrangian);
    }

    #[test]
    fn hypotheses_free_and_pendulum() {
        let free = HamiltonianModel::free(1);
        let r = free.check_hypotheses(&SampleBox::standard(1), 200, 7);
        assert!(r.all_pass());
        assert!(close(r.m_emp, 1.0, 1e-14) && close(r.big_m_emp, 1.0, 1e-14));

        let pend = HamiltonianModel::pendulum();
        let r = pend.check_hypotheses(&SampleBox::standard(1), 10_000, 1);
        assert!(r.all_pass(), "{r:?}");
        assert!(close(r.big_m_emp, 4.0 * PI * PI, 1e-2), "{}", r.big_m_emp);

        let bad = HamiltonianModel::pendulum().with_constants(1.0, 1.0);
        let r = bad.check_hypotheses(&SampleBox::standard(1), 10_000, 1);
        assert!(!r.h1.pass);
        let q = r.h1.worst.unwrap().q[0];
        // |V''| peaks where cos(2πq) = ±1
        assert!((TWO_PI * q).sin().abs() < 0.05, "worst q = {q}");
    }

    #[test]
    fn hypothesis_report_is_deterministic() {
        let pend = HamiltonianModel::pendulum();
        let a = pend.check_hypotheses(&SampleBox::standard(1), 300, 42);
        let b = pend.check_hypotheses(&SampleBox::standard(1), 300, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn model_spec_parsing() {
        let spec = ModelSpec::from_json(
            r#"{"family": "mechanical", "d": 1, "V_coeffs": [{"k": [1], "a": 1.0}], "m": 1.0, "M": 40.0, "periodic": true}"#,
        )
        .unwrap();
        let m = spec.build().unwrap();
        assert_eq!(m.value(0.0, &[0.0], &[0.0]), 1.0);
        assert_eq!(m.M(), 40.0);
        let err = ModelSpec::from_json(r#"{"family": "free", "d": 1, "colour": 3}"#).unwrap_err();
        assert!(err.to_string().contains("colour"));
        assert!(ModelSpec::from_json(r#"{"family": "free", "d": 1, "m": 2.0, "M": 1.0}"#)
            .unwrap()
            .build()
            .is_err());
    }
}
