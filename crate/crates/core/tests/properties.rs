use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use nsvae::classifier::{AccuracyMatrix, AiaMode, CosineClassifier};
use nsvae::codec::Container;
use nsvae::dataio::{ClasswiseStats, Dataset, FeatureRecord};
use nsvae::nullspace::{project_gradient, NullSpaceState};
use nsvae::priors::{run_fpi, Anchors, FpiConfig, PriorBank};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn state_for(x: &Array2<f64>) -> NullSpaceState {
    let mut ns = NullSpaceState::new(&BTreeMap::from([(0, x.ncols())]), 100.0, 1e-12).unwrap();
    ns.accumulate_covariance(0, x.view()).unwrap();
    ns.compute_projector(0).unwrap();
    ns
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_is_an_orthogonal_projection(x in sized_matrix(40, 16)) {
        let ns = state_for(&x);
        let lp = ns.layer(0).unwrap().projector.as_ref().unwrap();
        let p = &lp.projector;
        prop_assert!(max_abs(&(p.dot(p) - p)) <= 1e-7);
        prop_assert!(max_abs(&(p - &p.t())) <= 1e-8);
        let gram = lp.basis.t().dot(&lp.basis) - Array2::<f64>::eye(lp.basis.ncols());
        prop_assert!(max_abs(&gram) <= 1e-8);
        prop_assert!(lp.basis.ncols() >= 1);
        let r = ns.proportion(0).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn covariance_is_symmetric_psd(x in sized_matrix(30, 10)) {
        let ns = state_for(&x);
        let cov = ns.layer(0).unwrap();
        prop_assert!(max_abs(&(&cov.sigma - &cov.sigma.t())) <= 1e-9);
        let lp = cov.projector.as_ref().unwrap();
        let trace: f64 = cov.sigma.diag().sum();
        prop_assert!(lp.eigenvalues[0] >= -1e-8 * trace.max(1e-300));
        prop_assert_eq!(cov.count, x.nrows() as u64);
    }

    #[test]
    fn streaming_matches_batch(x in sized_matrix(60, 8), cut in 0usize..60) {
        let cut = cut.min(x.nrows());
        let mut ns = NullSpaceState::new(&BTreeMap::from([(0, x.ncols())]), 100.0, 1e-12).unwrap();
        ns.accumulate_covariance(0, x.slice(ndarray::s![..cut, ..])).unwrap();
        ns.accumulate_covariance(0, x.slice(ndarray::s![cut.., ..])).unwrap();
        let batch = x.t().dot(&x) / x.nrows() as f64;
        let streamed = &ns.layer(0).unwrap().sigma;
        let scale = batch.mapv(|v| v * v).sum().sqrt().max(1e-300);
        prop_assert!((streamed - &batch).mapv(|v| v * v).sum().sqrt() / scale <= 1e-10);
    }

    #[test]
    fn projected_gradient_spares_principal_direction(u in matrix(1, 6), g in matrix(5, 6), scales in prop::collection::vec(0.5f64..4.0, 10)) {
        let u = u.row(0).to_owned();
        prop_assume!(u.dot(&u) > 0.1);
        let x = Array2::from_shape_fn((10, 6), |(i, j)| scales[i] * u[j]);
        let ns = state_for(&x);
        let basis = &ns.layer(0).unwrap().projector.as_ref().unwrap().basis;
        let projected = project_gradient(&g, basis).unwrap();
        let gu = g.dot(&u).mapv(|v| v * v).sum().sqrt();
        prop_assume!(gu > 1e-3);
        prop_assert!(projected.dot(&u).mapv(|v| v * v).sum().sqrt() / gu <= 1e-6);
    }

    #[test]
    fn fpi_never_writes_frozen_means(
        old in matrix(3, 4),
        new in matrix(2, 4),
        lambda in 0.0f64..20.0,
    ) {
        let mut bank = PriorBank::new(4);
        let first: Anchors = (0..3u32).map(|c| (c, old.row(c as usize).to_owned() * 4.0 + c as f64)).collect();
        bank.init_means(&first).unwrap();
        bank.freeze_all();
        let before: Vec<Vec<u64>> = (0..3).map(|c| bank.mean(c).unwrap().iter().map(|v| v.to_bits()).collect()).collect();
        let second: Anchors = (0..2u32).map(|i| (10 + i, new.row(i as usize).to_owned() - 7.0 * i as f64)).collect();
        bank.init_means(&second).unwrap();
        let cfg = FpiConfig { lambda, max_iter: 500, ..FpiConfig::default() };
        if run_fpi(&mut bank, &second, &cfg).is_ok() {
            for c in 0..3u32 {
                let bits: Vec<u64> = bank.mean(c).unwrap().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(&bits, &before[c as usize]);
            }
        }
    }

    #[test]
    fn normalization_roundtrips(x in sized_matrix(20, 6)) {
        let records = x.rows().into_iter().enumerate()
            .map(|(i, r)| FeatureRecord { label: (i % 2) as u32, features: r.iter().map(|&v| v as f32).collect() })
            .collect();
        let data = Dataset::new(x.ncols(), records).unwrap();
        let mut st = ClasswiseStats::new(x.ncols());
        st.update(&data).unwrap();
        for r in data.records() {
            let v = Array1::from_iter(r.features.iter().map(|&f| f64::from(f)));
            let back = st.denormalize(st.normalize(v.view(), r.label).unwrap().view(), r.label).unwrap();
            prop_assert!((back - &v).iter().all(|d| d.abs() <= 1e-6 * (1.0 + v.iter().fold(0.0f64, |m, a| m.max(a.abs())))));
        }
    }

    #[test]
    fn classifier_probabilities_are_distributions(x in sized_matrix(8, 5), k in 2usize..6, seed in 0u64..1000) {
        let classes: BTreeSet<u32> = (0..k as u32).collect();
        let clf = CosineClassifier::new(&classes, x.ncols(), 0.05, seed).unwrap();
        let p = clf.probabilities(x.view()).unwrap();
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn accuracy_summaries_stay_in_range(t in 1usize..6, seed in prop::collection::vec(0.0f64..=1.0, 36)) {
        let rows: Vec<Vec<f64>> = (0..t).map(|r| (0..=r).map(|i| (seed[r * 6 + i] * 40.0).round() / 40.0).collect()).collect();
        let m = AccuracyMatrix::from_accuracies(&rows, vec![40; t]).unwrap();
        let faa = m.faa().unwrap();
        prop_assert!((0.0..=1.0).contains(&faa));
        let mean_last = rows[t - 1].iter().sum::<f64>() / t as f64;
        prop_assert!((faa - mean_last).abs() <= 1e-12);
        for mode in [AiaMode::Pooled, AiaMode::TaskMean] {
            prop_assert!((0.0..=1.0).contains(&m.avg_incremental_accuracy(mode).unwrap()));
        }
    }

    #[test]
    fn containers_roundtrip(payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 0..5)) {
        let mut c = Container::new();
        let tags: Vec<[u8; 4]> = (0..payloads.len()).map(|i| [b'T', b'A', b'G', b'0' + i as u8]).collect();
        for (t, p) in tags.iter().zip(&payloads) {
            c.push(t, p.clone());
        }
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        for (t, p) in tags.iter().zip(&payloads) {
            prop_assert_eq!(back.get(t).unwrap(), p.as_slice());
        }
    }
}
