use dspib_core::diffusion::NoiseSchedule;
use dspib_core::eval::{kl_between, Binning};
use dspib_core::featurize::coordination_numbers;
use dspib_core::sim::{potential_energy, potential_gradient, PotentialSpec};
use ndarray::Array2;
use proptest::prelude::*;

/// Hexagon plus center at the pair-potential minimum, jittered.
fn cluster() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.1f64..0.1, 14).prop_map(|jitter| {
        let r = 2f64.powf(1.0 / 6.0);
        let mut x = vec![0.0, 0.0];
        for k in 0..6 {
            let a = k as f64 * std::f64::consts::PI / 3.0;
            x.extend([r * a.cos(), r * a.sin()]);
        }
        x.iter().zip(&jitter).map(|(a, b)| a + b).collect()
    })
}

fn points(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, 2 * n).prop_map(move |v| Array2::from_shape_vec((n, 2), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lj7_energy_is_invariant_under_rigid_motion_and_relabeling(
        x in cluster(),
        angle in 0.0f64..std::f64::consts::TAU,
        shift in (-5.0f64..5.0, -5.0f64..5.0),
        perm in Just((0..7).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let spec = PotentialSpec::lj7(1.0, 1.0);
        let e = potential_energy(&spec, &x).unwrap();
        let (c, s) = (angle.cos(), angle.sin());
        let mut y = vec![0.0; 14];
        for (i, &p) in perm.iter().enumerate() {
            let (a, b) = (x[2 * p], x[2 * p + 1]);
            y[2 * i] = c * a - s * b + shift.0;
            y[2 * i + 1] = s * a + c * b + shift.1;
        }
        let moved = potential_energy(&spec, &y).unwrap();
        prop_assert!((e - moved).abs() < 1e-9 * e.abs().max(1.0), "{e} vs {moved}");

        let cx = coordination_numbers(&x, 1.5);
        let cy = coordination_numbers(&y, 1.5);
        for (a, b) in cx.iter().zip(&cy) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lj7_forces_sum_to_zero(x in cluster()) {
        let g = potential_gradient(&PotentialSpec::lj7(1.0, 1.0), &x).unwrap();
        let fx: f64 = g.iter().step_by(2).sum();
        let fy: f64 = g.iter().skip(1).step_by(2).sum();
        let scale = g.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        prop_assert!(fx.abs() < 1e-10 * scale && fy.abs() < 1e-10 * scale);
    }

    #[test]
    fn symmetrized_kl_is_nonnegative_and_symmetric(a in points(40), b in points(60), bins in 2usize..20) {
        let binning = Binning::covering(&[a.view(), b.view()], bins, 0.05).unwrap();
        let ab = kl_between(a.view(), b.view(), &binning).unwrap();
        let ba = kl_between(b.view(), a.view(), &binning).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(kl_between(a.view(), a.view(), &binning).unwrap(), 0.0);
    }

    #[test]
    fn alpha_bar_decreases_within_unit_interval(steps in 2usize..300, lo in 1e-5f64..0.01, span in 1e-4f64..0.5) {
        let s = NoiseSchedule::new(steps, lo, lo + span).unwrap();
        let mut prev = 1.0;
        for t in 1..=steps {
            let ab = s.alpha_bar(t);
            prop_assert!(ab > 0.0 && ab < prev);
            prev = ab;
        }
    }

    #[test]
    fn noiseless_forward_step_only_rescales(z in prop::collection::vec(-5.0f64..5.0, 1..6), t in 1usize..=100) {
        let s = NoiseSchedule::standard();
        let zt = s.forward_noise(&z, t, &vec![0.0; z.len()]).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (a, b) in z.iter().zip(&zt) {
            prop_assert!((a * k - b).abs() < 1e-12);
        }
    }
}
