mod common;

use dogseg::encoding::{mahalanobis, normalized_velocity, overall_variance};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn covariance() -> impl Strategy<Value = (f64, f64, f64)> {
    (1e-3f64..100.0, 1e-3f64..100.0, -0.95f64..0.95).prop_map(|(a, d, rho)| (a, d, rho * (a * d).sqrt()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mahalanobis_matches_cholesky(vx in -50.0f64..50.0, vy in -50.0f64..50.0, (a, d, c) in covariance()) {
        let got = mahalanobis(vx, vy, a, d, c).unwrap();
        let want = common::mahalanobis_cholesky([vx, vy], a, d, c, 1e-6);
        prop_assert!(close(got, want, 1e-9), "{} vs {}", got, want);
    }

    #[test]
    fn mahalanobis_is_scale_equivariant(vx in -50.0f64..50.0, vy in -50.0f64..50.0, (a, d, c) in covariance(), k in 0.1f64..10.0) {
        let m = mahalanobis(vx, vy, a, d, c).unwrap();
        let mk = mahalanobis(k * vx, k * vy, a, d, c).unwrap();
        prop_assert!(close(mk, k * m, 1e-9));
    }

    #[test]
    fn normalized_velocity_matches_direct_arithmetic(v in -100.0f64..100.0, var in 0.0f64..100.0) {
        let raw = v / (var + 1e-6).sqrt();
        let want = if raw > 3.0 { 3.0 } else if raw < -3.0 { -3.0 } else { raw };
        let got = normalized_velocity(v, var);
        prop_assert!(close(got, want, 1e-9), "{} vs {}", got, want);
        prop_assert!(got.abs() <= 3.0);
    }

    #[test]
    fn overall_variance_matches_direct_arithmetic((a, d, c) in covariance()) {
        prop_assert!(close(overall_variance(a, c, d), a + d + 2.0 * c, 1e-9));
    }
}

#[test]
fn overall_variance_is_variance_of_the_sum() {
    let mut r = common::rng(3);
    for k in 0..1000u64 {
        use rand::Rng;
        let (a, d) = (r.gen_range(0.1..10.0), r.gen_range(0.1..10.0));
        // keep the sum's variance away from zero so a relative bound is meaningful
        let rho: f64 = r.gen_range(-0.5..0.95);
        let c = rho * f64::sqrt(a * d);
        let want = overall_variance(a, c, d);
        let got = common::sampled_sum_variance(a, d, c, 400_000, &mut common::rng(1000 + k));
        assert!((got - want).abs() <= 0.02 * want, "case {k}: sampled {got} vs {want}");
    }
}
