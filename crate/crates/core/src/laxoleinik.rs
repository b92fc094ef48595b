//! Lax-Oleinik operators on periodic grid functions.
//!
//! Infima and suprema run over grid nodes of the universal cover only, so
//! monotony and translation invariance hold exactly; the price is a
//! first-order grid error.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::action::{minimal_action_with, ActionOptions};
use crate::error::{Error, Result};
use crate::generating::{generating_jet, generating_s_from, Dynamics};
use crate::linalg;

/// Values on the uniform grid of `[0,1)^d`, row-major with the last axis
/// fastest. Indices wrap periodically.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridFunction {
    pub d: usize,
    pub n_per_dim: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(d: usize, n_per_dim: usize, values: Vec<f64>) -> Result<Self> {
        if d == 0 || n_per_dim < 3 {
            return Err(Error::InvalidInput(format!("grid needs d ≥ 1 and n ≥ 3, got d={d}, n={n_per_dim}")));
        }
        if values.len() != n_per_dim.pow(d as u32) {
            return Err(Error::InvalidInput(format!(
                "grid of {}^{} nodes given {} values",
                n_per_dim,
                d,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("grid value {v} is not finite")));
        }
        Ok(Self { d, n_per_dim, values })
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(d: usize, n: usize, f: F) -> Self {
        let len = n.pow(d as u32);
        let mut g = Self { d, n_per_dim: n, values: vec![0.0; len] };
        for i in 0..len {
            let q = g.node(i);
            g.values[i] = f(&q);
        }
        g
    }

    pub fn constant(d: usize, n: usize, c: f64) -> Self {
        Self { d, n_per_dim: n, values: vec![c; n.pow(d as u32)] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n_per_dim as f64
    }

    pub fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut c = vec![0; self.d];
        for k in (0..self.d).rev() {
            c[k] = idx % self.n_per_dim;
            idx /= self.n_per_dim;
        }
        c
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.coords(idx).into_iter().map(|c| c as f64 / self.n_per_dim as f64).collect()
    }

    /// Index of `coords + shift`, wrapped on the torus.
    pub fn shifted(&self, idx: usize, shift: &[i64]) -> usize {
        let n = self.n_per_dim as i64;
        let c = self.coords(idx);
        c.iter().zip(shift).fold(0usize, |acc, (&ci, &s)| {
            acc * self.n_per_dim + (ci as i64 + s).rem_euclid(n) as usize
        })
    }

    /// Nearest node to a point of the torus.
    pub fn nearest(&self, q: &[f64]) -> usize {
        let n = self.n_per_dim as f64;
        q.iter().fold(0usize, |acc, &x| {
            acc * self.n_per_dim + ((x * n).round().rem_euclid(n) as usize % self.n_per_dim)
        })
    }

    /// Multilinear periodic interpolation.
    pub fn interpolate(&self, q: &[f64]) -> f64 {
        let n = self.n_per_dim as f64;
        let base: Vec<f64> = q.iter().map(|&x| (x * n).floor()).collect();
        let frac: Vec<f64> = q.iter().zip(&base).map(|(&x, b)| x * n - b).collect();
        let mut total = 0.0;
        for corner in 0..(1usize << self.d) {
            let mut w = 1.0;
            let mut shift = vec![0i64; self.d];
            for k in 0..self.d {
                let bit = (corner >> k) & 1;
                shift[k] = base[k] as i64 + bit as i64;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
            }
            if w != 0.0 {
                total += w * self.values[self.shifted(0, &shift)];
            }
        }
        total
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn osc(&self) -> f64 {
        self.max() - self.min()
    }

    /// Largest adjacent difference times `n`.
    pub fn lip_estimate(&self) -> f64 {
        let mut lip: f64 = 0.0;
        for i in 0..self.len() {
            for k in 0..self.d {
                let mut e = vec![0i64; self.d];
                e[k] = 1;
                lip = lip.max((self.values[self.shifted(i, &e)] - self.values[i]).abs());
            }
        }
        lip * self.n_per_dim as f64
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> Self {
        Self { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn add_const(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn sup_dist(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()))
    }

    /// Centered second differences `(u(i+e_k) − 2u(i) + u(i−e_k))·n²`.
    pub fn second_differences(&self) -> Vec<f64> {
        let n2 = (self.n_per_dim * self.n_per_dim) as f64;
        let mut out = Vec::with_capacity(self.len() * self.d);
        for i in 0..self.len() {
            for k in 0..self.d {
                let mut e = vec![0i64; self.d];
                e[k] = 1;
                let fwd = self.values[self.shifted(i, &e)];
                e[k] = -1;
                let bwd = self.values[self.shifted(i, &e)];
                out.push((fwd - 2.0 * self.values[i] + bwd) * n2);
            }
        }
        out
    }

    /// Centered-difference gradient at a node.
    pub fn gradient_fd(&self, idx: usize) -> Vec<f64> {
        let n = self.n_per_dim as f64;
        (0..self.d)
            .map(|k| {
                let mut e = vec![0i64; self.d];
                e[k] = 1;
                let fwd = self.values[self.shifted(idx, &e)];
                e[k] = -1;
                let bwd = self.values[self.shifted(idx, &e)];
                0.5 * (fwd - bwd) * n
            })
            .collect()
    }

    /// Forward and backward one-sided differences along each axis.
    pub fn one_sided(&self, idx: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_per_dim as f64;
        let mut f = Vec::with_capacity(self.d);
        let mut b = Vec::with_capacity(self.d);
        for k in 0..self.d {
            let mut e = vec![0i64; self.d];
            e[k] = 1;
            f.push((self.values[self.shifted(idx, &e)] - self.values[idx]) * n);
            e[k] = -1;
            b.push((self.values[idx] - self.values[self.shifted(idx, &e)]) * n);
        }
        (f, b)
    }
}

/// Positive part of the largest centered second difference.
pub fn semiconcavity_constant(u: &GridFunction) -> f64 {
    u.second_differences().into_iter().fold(0.0, f64::max)
}

/// Largest absolute centered second difference.
pub fn second_difference_bound(u: &GridFunction) -> f64 {
    u.second_differences().into_iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

/// Offsets `k ∈ [−r, r]^d`, row-major; negation maps index `o` to
/// `len − 1 − o`.
fn offsets(d: usize, r: usize) -> Vec<Vec<i64>> {
    let w = 2 * r + 1;
    let total = w.pow(d as u32);
    (0..total)
        .map(|mut o| {
            let mut k = vec![0i64; d];
            for j in (0..d).rev() {
                k[j] = (o % w) as i64 - r as i64;
                o /= w;
            }
            k
        })
        .collect()
}

/// Minimal-action table `D[i][o] = A_τ^t(x_i, x_i + k_o Δx)` on the cover.
#[derive(Debug, Clone)]
pub struct LaxKernel {
    pub tau: f64,
    pub t: f64,
    pub d: usize,
    pub n: usize,
    pub radius: usize,
    offsets: Vec<Vec<i64>>,
    homogeneous: bool,
    table: Vec<f64>,
}

impl LaxKernel {
    pub fn build(dynamics: &Dynamics, tau: f64, t: f64, d: usize, n: usize, radius: usize) -> Result<Self> {
        let offsets = offsets(d, radius);
        let homogeneous = dynamics.model.q_homogeneous();
        let rows = if homogeneous { 1 } else { n.pow(d as u32) };
        let probe = GridFunction::constant(d, n, 0.0);
        let h = 1.0 / n as f64;
        let short = t - tau <= dynamics.sigma_eff() * (1.0 + 1e-12);
        let table: Vec<Vec<f64>> = (0..rows)
            .into_par_iter()
            .map(|i| -> Result<Vec<f64>> {
                let x = probe.node(i);
                let mut row = Vec::with_capacity(offsets.len());
                let mut warm_p: Option<Vec<f64>> = None;
                let mut warm_nodes: Option<Vec<Vec<f64>>> = None;
                for k in &offsets {
                    let y: Vec<f64> = x.iter().zip(k).map(|(a, &b)| a + b as f64 * h).collect();
                    if short {
                        let s = generating_s_from(dynamics, tau, t, &x, &y, warm_p.as_deref())?;
                        warm_p = Some(s.rho0);
                        row.push(s.s);
                    } else {
                        let opts = ActionOptions { restarts: 2, warm_start: warm_nodes.take(), ..ActionOptions::default() };
                        let (a, path) = minimal_action_with(dynamics, tau, t, &x, &y, &opts)?;
                        warm_nodes = Some(path.nodes);
                        row.push(a);
                    }
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;
        Ok(Self { tau, t, d, n, radius, offsets, homogeneous, table: table.concat() })
    }

    fn width(&self) -> usize {
        self.offsets.len()
    }

    /// `A(x_i, x_i + k_o Δx)`.
    fn from_node(&self, i: usize, o: usize) -> f64 {
        let row = if self.homogeneous { 0 } else { i };
        self.table[row * self.width() + o]
    }

    fn on_boundary(&self, o: usize) -> bool {
        self.offsets[o].iter().any(|k| k.unsigned_abs() as usize == self.radius)
    }
}

/// Search radius (in cells) for an operand with oscillation `osc` over a
/// horizon `h`: `sqrt(2 m h (osc + 2 M h + 1)) + Δx`.
pub fn search_radius(dynamics: &Dynamics, osc: f64, h: f64, n: usize) -> usize {
    let m = dynamics.model.m();
    let big_m = dynamics.model.M();
    let r = (2.0 * m * h * (osc + 2.0 * big_m * h + 1.0)).sqrt() + 1.0 / n as f64;
    // rounded up to a multiple of 8 so nearby operands share a kernel
    let cells = (r * n as f64).ceil() as usize;
    cells.div_ceil(8) * 8
}

/// Lax-Oleinik operators of one model, with a kernel cache keyed by
/// `(τ, t, n)`.
pub struct LaxOleinik {
    pub dynamics: Dynamics,
    cache: Mutex<HashMap<(u64, u64, usize, usize), Arc<LaxKernel>>>,
}

impl LaxOleinik {
    pub fn new(dynamics: Dynamics) -> Result<Self> {
        if !dynamics.model.periodic() {
            return Err(Error::InvalidInput("Lax-Oleinik operators on grids need a periodic model".into()));
        }
        Ok(Self { dynamics, cache: Mutex::new(HashMap::new()) })
    }

    /// Cached kernel with at least `radius` cells; a larger cached one is
    /// reused as is.
    pub fn kernel(&self, tau: f64, t: f64, d: usize, n: usize, radius: usize) -> Result<Arc<LaxKernel>> {
        let key = if self.dynamics.model.autonomous() {
            (0f64.to_bits(), (t - tau).to_bits(), d, n)
        } else {
            (tau.to_bits(), t.to_bits(), d, n)
        };
        if let Some(k) = self.cache.lock().unwrap().get(&key) {
            if k.radius >= radius {
                return Ok(k.clone());
            }
        }
        let built = Arc::new(LaxKernel::build(&self.dynamics, tau, t, d, n, radius)?);
        self.cache.lock().unwrap().insert(key, built.clone());
        Ok(built)
    }

    fn check_args(&self, u: &GridFunction, tau: f64, t: f64) -> Result<()> {
        if !(t > tau) {
            return Err(Error::InvalidInput(format!("operator horizon needs t > τ, got τ={tau}, t={t}")));
        }
        if u.d != self.dynamics.dim() {
            return Err(Error::InvalidInput(format!("grid dimension {} vs model dimension {}", u.d, self.dynamics.dim())));
        }
        Ok(())
    }

    fn with_radius<F>(&self, u: &GridFunction, tau: f64, t: f64, pass: F) -> Result<GridFunction>
    where
        F: Fn(&LaxKernel) -> (Vec<f64>, bool),
    {
        self.check_args(u, tau, t)?;
        let r = search_radius(&self.dynamics, u.osc(), t - tau, u.n_per_dim);
        let kernel = self.kernel(tau, t, u.d, u.n_per_dim, r)?;
        let (values, hit) = pass(&kernel);
        if !hit {
            return Ok(GridFunction { values, ..u.clone() });
        }
        let doubled = 2 * kernel.radius;
        let kernel = self.kernel(tau, t, u.d, u.n_per_dim, doubled)?;
        let (values, hit) = pass(&kernel);
        if hit {
            return Err(Error::SearchRadiusExceeded { radius: doubled });
        }
        Ok(GridFunction { values, ..u.clone() })
    }

    /// `T_τ^t u(q) = min_θ (u(θ) + A_τ^t(θ, q))`.
    pub fn apply_t(&self, u: &GridFunction, tau: f64, t: f64) -> Result<GridFunction> {
        self.with_radius(u, tau, t, |k| inf_pass(u, k))
    }

    /// `Ť_t^τ u(q) = max_θ (u(θ) − A_τ^t(q, θ))`.
    pub fn apply_t_dual(&self, u: &GridFunction, t: f64, tau: f64) -> Result<GridFunction> {
        self.with_radius(u, tau, t, |k| sup_pass(u, k))
    }

    /// `T` iterated `steps` times with horizon `dt` each.
    pub fn apply_t_steps(&self, u: &GridFunction, tau: f64, dt: f64, steps: usize) -> Result<GridFunction> {
        let mut v = u.clone();
        for s in 0..steps {
            let a = tau + s as f64 * dt;
            v = self.apply_t(&v, a, a + dt)?;
        }
        Ok(v)
    }

    /// `R^t = Ť_{t0+δt}^{t0} ∘ T_{t0−t}^{t0+δt} ∘ Ť_{t0}^{t0−t}`.
    pub fn regularize_r(&self, u: &GridFunction, t0: f64, t: f64, delta: f64) -> Result<GridFunction> {
        if !(t > 0.0 && t < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidInput(format!("regularization needs t, δ in (0,1), got t={t}, δ={delta}")));
        }
        let a = self.apply_t_dual(u, t0, t0 - t)?;
        let b = self.apply_t(&a, t0 - t, t0 + delta * t)?;
        self.apply_t_dual(&b, t0 + delta * t, t0)
    }

    /// `Ř^t = T_{t0−δt}^{t0} ∘ Ť_{t0+t}^{t0−δt} ∘ T_{t0}^{t0+t}`.
    pub fn regularize_r_dual(&self, u: &GridFunction, t0: f64, t: f64, delta: f64) -> Result<GridFunction> {
        if !(t > 0.0 && t < 1.0) || !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidInput(format!("regularization needs t, δ in (0,1), got t={t}, δ={delta}")));
        }
        let a = self.apply_t(u, t0, t0 + t)?;
        let b = self.apply_t_dual(&a, t0 + t, t0 - delta * t)?;
        self.apply_t(&b, t0 - delta * t, t0)
    }

    /// `0.1·min(1, C/(M(3 + 2C)))` with `C` the semi-concavity constant of
    /// short-time images.
    pub fn default_delta(&self) -> f64 {
        let c = universal_constant(&self.dynamics);
        0.1 * (c / (self.dynamics.model.M() * (3.0 + 2.0 * c))).min(1.0)
    }
}

fn inf_pass(u: &GridFunction, k: &LaxKernel) -> (Vec<f64>, bool) {
    let w = k.width();
    let res: Vec<(f64, bool)> = (0..u.len())
        .into_par_iter()
        .map(|i| {
            let mut best = f64::INFINITY;
            let mut arg = 0;
            for o in 0..w {
                let j = u.shifted(i, &k.offsets[o]);
                // A(x_i + kΔx, x_i) = D[j][−k] by periodicity
                let v = u.values[j] + k.from_node(j, w - 1 - o);
                if v < best {
                    best = v;
                    arg = o;
                }
            }
            (best, k.on_boundary(arg))
        })
        .collect();
    let hit = res.iter().any(|r| r.1);
    (res.into_iter().map(|r| r.0).collect(), hit)
}

fn sup_pass(u: &GridFunction, k: &LaxKernel) -> (Vec<f64>, bool) {
    let w = k.width();
    let res: Vec<(f64, bool)> = (0..u.len())
        .into_par_iter()
        .map(|i| {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for o in 0..w {
                let j = u.shifted(i, &k.offsets[o]);
                let v = u.values[j] - k.from_node(i, o);
                if v > best {
                    best = v;
                    arg = o;
                }
            }
            (best, k.on_boundary(arg))
        })
        .collect();
    let hit = res.iter().any(|r| r.1);
    (res.into_iter().map(|r| r.0).collect(), hit)
}

/// `C` such that short-time images `T^t u` are `C/t`-semi-concave: the
/// largest `h·‖∂²S‖` over sampled pairs and horizons `h ≤ σ_eff`.
pub fn universal_constant(dynamics: &Dynamics) -> f64 {
    let d = dynamics.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c);
    let sigma = dynamics.sigma_eff();
    let mut c: f64 = 0.0;
    for &h in &[0.25 * sigma, 0.5 * sigma, sigma] {
        for _ in 0..8 {
            let q0: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..1.0)).collect();
            let q1: Vec<f64> = q0.iter().map(|x| x + rng.gen_range(-2.0..2.0) * h).collect();
            if let Ok(jet) = generating_jet(dynamics, 0.0, h, &q0, &q1, None) {
                for block in [&jet.d11, &jet.d00] {
                    let ev = linalg::symmetric_eigenvalues(block, d);
                    c = c.max(h * ev[d - 1].abs().max(ev[0].abs()));
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{resolve_sigma, SigmaPolicy};
    use crate::hamiltonian::HamiltonianModel;

    fn pendulum() -> LaxOleinik {
        let model = HamiltonianModel::pendulum();
        let sigma = resolve_sigma(&model, SigmaPolicy::Override { sigma: 0.2, p_max: 4.0 }).unwrap();
        LaxOleinik::new(Dynamics::new(model, sigma)).unwrap()
    }

    fn free() -> LaxOleinik {
        LaxOleinik::new(Dynamics::declared(HamiltonianModel::free(1))).unwrap()
    }

    #[test]
    fn grid_basics() {
        let g = GridFunction::from_fn(1, 8, |q| q[0]);
        assert_eq!(g.shifted(7, &[1]), 0);
        assert_eq!(g.shifted(0, &[-9]), 7);
        assert!((g.lip_estimate() - 7.0).abs() < 1e-12);
        let g = GridFunction::from_fn(2, 4, |q| q[0] + 10.0 * q[1]);
        assert_eq!(g.node(6), vec![0.25, 0.5]);
        assert!((g.interpolate(&[0.125, 0.5]) - (0.125 + 5.0)).abs() < 1e-12);
        assert!(GridFunction::new(1, 4, vec![0.0, 1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn semiconcavity_examples() {
        let pi = std::f64::consts::PI;
        let u = GridFunction::from_fn(1, 256, |q| -(2.0 * pi * q[0]).cos() / (4.0 * pi * pi));
        assert!((semiconcavity_constant(&u) - 1.0).abs() < 1e-3);
        for n in [64, 128] {
            let hat = GridFunction::from_fn(1, n, |q| (q[0] - 0.5).abs());
            assert!((second_difference_bound(&hat) - 2.0 * n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn free_zero_is_fixed() {
        let lo = free();
        let z = GridFunction::constant(1, 32, 0.0);
        // zero up to the round-off of the shooting residual
        assert!(lo.apply_t(&z, 0.0, 0.2).unwrap().sup_dist(&z) <= 1e-15);
        assert!(lo.apply_t_dual(&z, 0.2, 0.0).unwrap().sup_dist(&z) <= 1e-15);
    }

    #[test]
    fn exact_order_properties() {
        let lo = pendulum();
        let pi = std::f64::consts::PI;
        let u = GridFunction::from_fn(1, 64, |q| 0.1 * (2.0 * pi * q[0]).sin());
        let v = GridFunction::from_fn(1, 64, |q| 0.1 * (2.0 * pi * q[0]).sin() + 0.05 * (1.0 + (6.0 * pi * q[0]).cos()));
        let tu = lo.apply_t(&u, 0.0, 0.1).unwrap();
        let tv = lo.apply_t(&v, 0.0, 0.1).unwrap();
        assert!(tu.values.iter().zip(&tv.values).all(|(a, b)| a <= b));
        let shifted = lo.apply_t(&u.add_const(3.7), 0.0, 0.1).unwrap();
        assert!(shifted.values.iter().zip(&tu.values).all(|(a, b)| *a == b + 3.7 || (a - b - 3.7).abs() <= 4.0 * f64::EPSILON * a.abs()));
    }

    #[test]
    fn dual_inequalities() {
        let lo = pendulum();
        let pi = std::f64::consts::PI;
        let u = GridFunction::from_fn(1, 64, |q| 0.2 * (2.0 * pi * q[0]).cos() + (q[0] - 0.5).abs());
        let tu = lo.apply_t(&u, 0.0, 0.1).unwrap();
        let back = lo.apply_t_dual(&tu, 0.1, 0.0).unwrap();
        // exact up to the rounding of (a + b) − b
        assert!(back.values.iter().zip(&u.values).all(|(a, b)| *a <= b + 1e-14));
        let du = lo.apply_t_dual(&u, 0.1, 0.0).unwrap();
        let fwd = lo.apply_t(&du, 0.0, 0.1).unwrap();
        assert!(fwd.values.iter().zip(&u.values).all(|(a, b)| *a >= b - 1e-14));
    }

    #[test]
    fn regularization_of_constant() {
        let lo = free();
        let c = GridFunction::constant(1, 32, 2.5);
        let r = lo.regularize_r(&c, 0.0, 0.2, lo.default_delta()).unwrap();
        assert!(r.sup_dist(&c) <= 1e-12);
    }

    #[test]
    fn free_delta() {
        let lo = free();
        assert!((universal_constant(&lo.dynamics) - 1.0).abs() < 1e-9);
        assert!((lo.default_delta() - 0.02).abs() < 1e-10);
    }
}
