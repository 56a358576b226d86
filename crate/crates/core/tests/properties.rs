use lfr_core::lm::{lm_minimize, LmOptions};
use lfr_core::lti::{simulate_lti, LtiStateSpace};
use lfr_core::metrics::rmse;
use lfr_core::signals::{excited_bins, gen_multisine, MultisineSpec, SignalRecord};
use lfr_core::util;
use lfr_core::Result;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn stable_system(entries: &[f64], n: usize) -> LtiStateSpace {
    let mut a = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    let rho = util::spectral_radius(&a);
    if rho > 0.0 {
        a *= 0.9 / rho;
    }
    LtiStateSpace::new(
        a,
        DMatrix::from_row_slice(n, 1, &entries[n * n..n * n + n]),
        DMatrix::from_row_slice(1, n, &entries[n * n + n..n * n + 2 * n]),
        DMatrix::from_element(1, 1, entries[n * n + 2 * n]),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn multisine_hits_rms_and_band(seed in any::<u64>(), n in 64usize..512, rms in 0.1f64..100.0, lo in 0.0f64..0.2, width in 0.05f64..0.25) {
        let spec = MultisineSpec { n_samples_per_period: n, fs: 1.0, f_min: lo, f_max: lo + width, amplitude_rms: rms, seed };
        prop_assume!(!excited_bins(n, 1.0, lo, lo + width).is_empty());
        let rec = gen_multisine(&spec).unwrap();
        prop_assert!((util::rms(rec.u().as_slice()) - rms).abs() < 1e-9 * rms);
        prop_assert!(util::mean(rec.u().as_slice()).abs() < 1e-9 * rms);
    }

    #[test]
    fn rmse_of_constant_offset_is_its_magnitude(e in -10.0f64..10.0, data in prop::collection::vec(-5.0f64..5.0, 1..50)) {
        let y = DMatrix::from_column_slice(data.len(), 1, &data);
        let r = rmse(&y, &y.add_scalar(e)).unwrap()[0];
        prop_assert!((r - e.abs()).abs() < 1e-12);
    }

    #[test]
    fn similarity_preserves_the_output(entries in prop::collection::vec(-1.0f64..1.0, 16), diag in prop::collection::vec(0.2f64..5.0, 3)) {
        let ss = stable_system(&entries, 3);
        let t = DMatrix::from_diagonal(&DVector::from_vec(diag));
        let u = DMatrix::from_fn(40, 1, |k, _| ((k * 7 % 11) as f64) - 5.0);
        let (y1, _) = simulate_lti(&ss, &u, &DVector::zeros(3)).unwrap();
        let (y2, _) = simulate_lti(&ss.similarity(&t).unwrap(), &u, &DVector::zeros(3)).unwrap();
        prop_assert!((&y1 - &y2).amax() <= 1e-9 * (1.0 + y1.amax()));
    }

    #[test]
    fn lm_accepted_costs_never_increase(target in prop::collection::vec(-3.0f64..3.0, 3), start in prop::collection::vec(-3.0f64..3.0, 2)) {
        // Curve fit y_i = a·exp(b·t_i), nonlinear in b.
        let t = [0.0, 0.5, 1.0];
        let y: Vec<f64> = target.clone();
        let problem = move |p: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
            let r = DVector::from_fn(3, |i, _| p[0] * (p[1] * t[i]).exp() - y[i]);
            let j = DMatrix::from_fn(3, 2, |i, c| if c == 0 { (p[1] * t[i]).exp() } else { p[0] * t[i] * (p[1] * t[i]).exp() });
            Ok((r, j))
        };
        let (_, report) = lm_minimize(&problem, DVector::from_vec(start), &LmOptions { max_iter: 50, ..LmOptions::default() }).unwrap();
        prop_assert!(report.is_monotone());
        prop_assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn csv_round_trip_is_exact(data in prop::collection::vec(-1e6f64..1e6, 2..40)) {
        let n = data.len() / 2;
        let u = DMatrix::from_column_slice(n, 1, &data[..n]);
        let y = DMatrix::from_column_slice(n, 1, &data[n..2 * n]);
        let rec = SignalRecord::new(u, Some(y), 3.0, 1, lfr_core::signals::Excitation::External).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        rec.write_csv(&path).unwrap();
        prop_assert_eq!(SignalRecord::read_csv(&path).unwrap(), rec);
    }
}
