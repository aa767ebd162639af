use fredholm_core::calculus::{is_elliptic, Resolution};
use fredholm_core::opdsl::Rational;
use fredholm_core::sampling::{class_fixtures, random_operator};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composition_is_associative(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        for fx in class_fixtures() {
            let p = random_operator(&fx.frame, &fx.pool, &mut rng);
            let q = random_operator(&fx.frame, &fx.pool, &mut rng);
            let r = random_operator(&fx.frame, &fx.pool, &mut rng);
            let left = p.compose(&q).unwrap().compose(&r).unwrap();
            let right = p.compose(&q.compose(&r).unwrap()).unwrap();
            prop_assert_eq!(left.normalized(), right.normalized(), "{}", fx.name);
        }
    }

    #[test]
    fn principal_symbol_is_multiplicative(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        for fx in class_fixtures() {
            let p = random_operator(&fx.frame, &fx.pool, &mut rng);
            let q = random_operator(&fx.frame, &fx.pool, &mut rng);
            let product = p.principal_symbol().mul(&q.principal_symbol());
            // a vanishing leading part on either side is a cancellation, not a counterexample
            if product.is_zero() {
                continue;
            }
            prop_assert_eq!(p.compose(&q).unwrap().principal_symbol(), product, "{}", fx.name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn ellipticity_is_scale_invariant(seed in any::<u64>(), num in -5i64..=5, den in 1i64..=4) {
        prop_assume!(num != 0);
        let c = Rational::new(num.into(), den.into());
        let mut rng = StdRng::seed_from_u64(seed);
        let res = Resolution { directions: 16, base_points: 5 };
        for fx in class_fixtures().into_iter().filter(|f| f.space.ambient_dim <= 2) {
            let p = random_operator(&fx.frame, &fx.pool, &mut rng);
            let a = is_elliptic(&p, res);
            let b = is_elliptic(&p.scale(&c), res);
            prop_assert_eq!(a.elliptic, b.elliptic, "{}: {}", fx.name, p);
        }
    }
}
