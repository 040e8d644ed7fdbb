use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

use qepdx::kernels::{gram, psi_stats_closed, KernelFamily, KernelSpec};

fn min_eig(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

fn points(n: usize, d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| DMatrix::from_vec(n, d, v))
}

fn family() -> impl Strategy<Value = KernelFamily> {
    prop_oneof![Just(KernelFamily::SeArd), Just(KernelFamily::Matern32Ard)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stationary_gram_is_positive_definite(
        x in points(8, 2),
        fam in family(),
        alpha in 0.2f64..5.0,
        g0 in 0.01f64..10.0,
        g1 in 0.01f64..10.0,
    ) {
        let k = KernelSpec::new(fam, alpha, vec![g0, g1]).unwrap();
        let kxx = gram(&k, &x, &x).unwrap();
        prop_assert!((&kxx - kxx.transpose()).amax() == 0.0);
        prop_assert!(min_eig(&kxx) > 0.0);
        for i in 0..8 {
            prop_assert!((kxx[(i, i)] - (1.0 + k.jitter) / alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_gram_is_psd(x in points(6, 3), g in prop::collection::vec(0.01f64..5.0, 3)) {
        let k = KernelSpec::new(KernelFamily::LinearArd, 1.0, g).unwrap();
        let kxx = gram(&k, &x, &x).unwrap();
        prop_assert!(min_eig(&kxx) >= -1e-10 * kxx.trace().max(1.0));
    }

    #[test]
    fn psi2_is_psd(
        mu in points(6, 2),
        s in prop::collection::vec(0.0f64..1.0, 12),
        z in points(4, 2),
        linear in any::<bool>(),
    ) {
        let fam = if linear { KernelFamily::LinearArd } else { KernelFamily::SeArd };
        let k = KernelSpec::new(fam, 1.5, vec![0.7, 1.3]).unwrap();
        let psi = psi_stats_closed(&k, &mu, &DMatrix::from_vec(6, 2, s), &z).unwrap();
        prop_assert!(min_eig(&psi.psi2) >= -1e-10 * psi.psi2.trace().max(1.0));
    }

    #[test]
    fn larger_ard_weight_decorrelates(
        fam in family(),
        a in prop::collection::vec(-2.0f64..2.0, 2),
        b in prop::collection::vec(-2.0f64..2.0, 2),
        g in 0.01f64..5.0,
        factor in 1.01f64..4.0,
    ) {
        prop_assume!((a[0] - b[0]).abs() > 1e-3);
        let lo = KernelSpec::new(fam, 1.0, vec![g, 0.5]).unwrap();
        let hi = KernelSpec::new(fam, 1.0, vec![g * factor, 0.5]).unwrap();
        prop_assert!(hi.eval(&a, &b) < lo.eval(&a, &b));
    }

    #[test]
    fn zero_variance_psi_is_the_gram(mu in points(5, 2), z in points(3, 2)) {
        let k = KernelSpec::new(KernelFamily::SeArd, 0.8, vec![1.1, 0.4]).unwrap();
        let psi = psi_stats_closed(&k, &mu, &DMatrix::zeros(5, 2), &z).unwrap();
        let g = gram(&k, &mu, &z).unwrap();
        prop_assert!((&psi.psi1 - &g).amax() < 1e-12);
        prop_assert!((&psi.psi2 - g.transpose() * &g).amax() < 1e-12);
    }
}
