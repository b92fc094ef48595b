use hjkam::action::{action_bounds, minimal_action, minimal_action_with, tol_a, ActionOptions};
use hjkam::flow::{resolve_sigma, SigmaPolicy};
use hjkam::generating::Dynamics;
use hjkam::hamiltonian::HamiltonianModel;
use hjkam::laxoleinik::{universal_constant, GridFunction, LaxOleinik};
use proptest::prelude::*;

fn pendulum() -> Dynamics {
    let model = HamiltonianModel::pendulum();
    let sigma = resolve_sigma(&model, SigmaPolicy::Override { sigma: 0.2, p_max: 4.0 }).unwrap();
    Dynamics::new(model, sigma)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn action_within_bounds_and_refinement_stable(q0 in -0.5f64..0.5, q1 in -0.5f64..1.5, t in 0.05f64..1.2) {
        let dy = pendulum();
        let (a, path) = minimal_action(&dy, 0.0, t, &[q0], &[q1]).unwrap();
        let (lo, hi) = action_bounds(&dy.model, 0.0, t, &[q0], &[q1]);
        prop_assert!(lo <= a + 1e-12 && a <= hi + 1e-12, "{lo} <= {a} <= {hi}");
        let fine = ActionOptions { n: Some(2 * path.n), warm_start: None, ..ActionOptions::default() };
        let (a2, _) = minimal_action_with(&dy, 0.0, t, &[q0], &[q1], &fine).unwrap();
        prop_assert!((a - a2).abs() <= tol_a(a), "n={} {a} vs {a2}", path.n);
    }

    #[test]
    fn energy_identity_lower_bound(q0 in 0.0f64..1.0, q1 in -1.0f64..2.0, t in 0.1f64..1.0) {
        let dy = pendulum();
        let (_, path) = minimal_action(&dy, 0.0, t, &[q0], &[q1]).unwrap();
        let traj = path.reconstruct(&dy).unwrap();
        let (m, big_m) = (dy.model.m(), dy.model.M());
        for (s, &tt) in traj.states.iter().zip(&traj.times) {
            let (h, _, dp) = dy.model.eval_and_grads(tt, &s.q, &s.p).unwrap();
            let lhs = s.p[0] * dp[0] - h;
            prop_assert!(lhs >= (m / big_m) * h - (m + big_m) - 1e-12);
        }
    }

    #[test]
    fn lax_oleinik_monotone(c1 in -1.0f64..1.0, c2 in -1.0f64..1.0, gap in 0.0f64..0.5) {
        let lo = LaxOleinik::new(pendulum()).unwrap();
        let pi = std::f64::consts::PI;
        let u = GridFunction::from_fn(1, 32, |q| c1 * (2.0 * pi * q[0]).cos() + c2 * (4.0 * pi * q[0]).sin());
        let v = GridFunction::from_fn(1, 32, |q| u.values[(q[0] * 32.0).round() as usize % 32] + gap * (2.0 * pi * q[0]).sin().powi(2));
        let (tu, tv) = (lo.apply_t(&u, 0.0, 0.1).unwrap(), lo.apply_t(&v, 0.0, 0.1).unwrap());
        prop_assert!(tu.values.iter().zip(&tv.values).all(|(a, b)| a <= b));
        let (du, dv) = (lo.apply_t_dual(&u, 0.1, 0.0).unwrap(), lo.apply_t_dual(&v, 0.1, 0.0).unwrap());
        prop_assert!(du.values.iter().zip(&dv.values).all(|(a, b)| a <= b));
    }
}

#[test]
fn action_semiconcave_in_endpoint() {
    let dy = pendulum();
    let c = universal_constant(&dy) * (1.0 + 2.0 / dy.sigma_eff());
    for &t in &[0.1, 0.3, 0.8] {
        let k = 64;
        let vals: Vec<f64> = (0..k)
            .map(|i| minimal_action(&dy, 0.0, t, &[0.3], &[i as f64 / k as f64]).unwrap().0)
            .collect();
        let g = GridFunction::new(1, k, vals).unwrap();
        // interior second differences; the wrap-around pair joins different lifts
        let d2 = g.second_differences();
        let worst = d2[1..k - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(worst <= c * (1.0 + 1.0 / t), "t={t}: {worst} vs {}", c * (1.0 + 1.0 / t));
    }
}

#[test]
fn lax_oleinik_output_semiconcave() {
    let dy = pendulum();
    let c = universal_constant(&dy);
    let lo = LaxOleinik::new(dy).unwrap();
    let u = GridFunction::from_fn(1, 128, |q| (q[0] - 0.5).abs());
    for t in [0.1, 0.2] {
        let tu = lo.apply_t(&u, 0.0, t).unwrap();
        let sc = hjkam::laxoleinik::semiconcavity_constant(&tu);
        assert!(sc <= c / t + 1e-9, "t={t}: {sc} vs {}", c / t);
    }
}
