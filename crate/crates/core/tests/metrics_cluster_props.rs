use proptest::prelude::*;
use zeus_core::cluster::{gmm_em, kmeans, pca_fit, CovarianceRegime, GmmConfig, KMeansConfig};
use zeus_core::metrics::{ari, brier, hungarian_match, matched_brier, one_hot};
use zeus_core::tensor::Tensor;

fn labelings() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..40).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..5, n)))
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn points() -> impl Strategy<Value = Tensor> {
    (6usize..30, 1usize..4)
        .prop_flat_map(|(n, d)| prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| Tensor::new(n, d, v).unwrap()))
}

proptest! {
    #[test]
    fn ari_is_symmetric_bounded_and_label_free((a, b) in labelings(), shift in 1usize..100) {
        let s = ari(&a, &b).unwrap();
        prop_assert!((s - ari(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
        let renamed: Vec<usize> = b.iter().map(|l| (4 - l) * shift).collect();
        prop_assert!((s - ari(&a, &renamed).unwrap()).abs() < 1e-12);
        prop_assert_eq!(ari(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hungarian_is_optimal(k in 1usize..6, vals in prop::collection::vec(-10.0f64..10.0, 36)) {
        let a: Vec<Vec<f64>> = (0..k).map(|j| vals[j * 6..j * 6 + k].to_vec()).collect();
        let sigma = hungarian_match(&a).unwrap();
        let score = |p: &[usize]| p.iter().enumerate().map(|(j, &c)| a[j][c]).sum::<f64>();
        let best = permutations(k).iter().map(|p| score(p)).fold(f64::NEG_INFINITY, f64::max);
        let mut seen = sigma.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..k).collect::<Vec<_>>());
        prop_assert!((score(&sigma) - best).abs() < 1e-9);
    }

    #[test]
    fn matched_brier_ignores_column_order(y in prop::collection::vec(0usize..3, 2..30), seed in 0usize..6) {
        let k = 3;
        let p = Tensor::from_fn(y.len(), k, |i, j| ((i * 7 + j * 3) % 5 + 1) as f64);
        let p = Tensor::from_fn(y.len(), k, |i, j| p.get(i, j) / p.row(i).iter().sum::<f64>());
        let perm = &permutations(k)[seed];
        let shuffled = Tensor::from_fn(y.len(), k, |i, j| p.get(i, perm[j]));
        let a = matched_brier(&p, &y).unwrap();
        prop_assert!((a - matched_brier(&shuffled, &y).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&a));
        prop_assert!(a <= brier(&p, &y).unwrap() + 1e-12);
        prop_assert_eq!(matched_brier(&one_hot(&y, k), &y).unwrap(), 0.0);
    }

    #[test]
    fn kmeans_inertia_matches_its_labels(x in points(), k in 1usize..4, seed in 0u64..50) {
        let r = kmeans(&x, &KMeansConfig { n_init: 3, ..KMeansConfig::new(k, seed) }).unwrap();
        let mut inertia = 0.0;
        for (i, &l) in r.labels.iter().enumerate() {
            let dist = |c: usize| x.row(i).iter().zip(r.centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            prop_assert!((0..k).all(|c| dist(l) <= dist(c) + 1e-9));
            inertia += dist(l);
        }
        prop_assert!((inertia - r.inertia).abs() <= 1e-8 * (1.0 + inertia));
    }

    #[test]
    fn gmm_responsibilities_are_distributions(x in points(), k in 1usize..4, seed in 0u64..50) {
        for regime in [CovarianceRegime::Identity, CovarianceRegime::Full] {
            let r = gmm_em(&x, &GmmConfig { n_init: 2, ..GmmConfig::new(k, regime, seed) }).unwrap();
            for row in r.responsibilities.iter_rows() {
                prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            prop_assert!((r.params.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_axes_are_orthonormal_and_ordered(x in points()) {
        let m = pca_fit(&x, x.cols()).unwrap();
        let q = m.axes.matmul(&m.axes.transpose()).unwrap();
        prop_assert!(q.max_abs_diff(&Tensor::identity(x.cols())) < 1e-9);
        prop_assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        // Full-rank projection preserves total variance.
        let n = x.rows() as f64;
        let total: f64 = (0..x.cols())
            .map(|j| {
                let mean = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
                (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum();
        let kept: f64 = m.explained_variance.iter().sum();
        prop_assert!((total - kept).abs() <= 1e-8 * (1.0 + total));
    }
}
