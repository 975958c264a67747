use anticonc::bootstrap::{argmax_prob, multiplier_replicates, DataMatrix, Multiplier};
use anticonc::design::{gen_design, DesignConfig, DesignKind};
use anticonc::experiment::ExperimentConfig;
use anticonc::levy::{levy_exact, levy_hat_single};
use anticonc::sampler::{max_diff, max_diff_streamed, sample};
use anticonc::{CovSpec, Partition};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn equicorr(p: usize, rho: f64) -> CovSpec {
    let s = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { rho });
    CovSpec::explicit(s, DVector::zeros(p)).unwrap()
}

#[test]
fn gaussian_and_beta_multipliers_agree() {
    let p = 10;
    let batch = sample(&equicorr(p, 0.4), 1500, 8).unwrap();
    let data = DataMatrix::from_batch(&batch, DVector::zeros(p)).unwrap();
    let g = multiplier_replicates(&data, 20_000, 1, Multiplier::Gaussian).unwrap();
    let b = multiplier_replicates(&data, 20_000, 1, Multiplier::Beta).unwrap();
    for a in [vec![0], vec![0, 1, 2], vec![3, 4, 5, 6, 7]] {
        let part = Partition::from_a(a.clone(), p).unwrap();
        let pg = argmax_prob(&g, &part, &[]).unwrap().prob;
        let pb = argmax_prob(&b, &part, &[]).unwrap().prob;
        assert!((pg - pb).abs() < 0.02, "A = {a:?}: {pg} vs {pb}");
    }
}

#[test]
fn manifest_config_round_trips() {
    let cfg = ExperimentConfig::from_json(r#"{"seed": 9, "epsilons": [0.2, 0.05], "design": {"kind": "table1", "p": 40}}"#)
        .unwrap();
    let manifest = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg });
    let back = ExperimentConfig::from_json(&manifest.to_string()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn complementary_partitions_split_the_mass(seed in 0u64..1000, k in 1usize..6) {
        let p = 6;
        let batch = sample(&equicorr(p, 0.2), 200, seed).unwrap();
        let data = DataMatrix::from_batch(&batch, DVector::zeros(p)).unwrap();
        let reps = multiplier_replicates(&data, 300, seed, Multiplier::Gaussian).unwrap();
        let part = Partition::split_at(k, p).unwrap();
        let fwd = argmax_prob(&reps, &part, &[]).unwrap().prob;
        let back = argmax_prob(&reps, &part.swapped(), &[]).unwrap().prob;
        // Continuous replicates tie with probability zero.
        prop_assert!((fwd + back - 1.0).abs() < 1e-12);
    }

    #[test]
    fn streamed_and_batch_differences_agree(seed in any::<u64>(), n in 1usize..700, d in 1usize..6) {
        let design = gen_design(&DesignConfig::new(DesignKind::HomogLowrank, 12).rank(d).seed(seed)).unwrap();
        let batch = sample(&design.spec, n, seed).unwrap();
        let a = max_diff(&batch, &design.part).unwrap();
        let b = max_diff_streamed(&design.spec, &design.part, n, seed).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn grid_estimate_never_beats_exact(values in prop::collection::vec(-5.0f64..5.0, 2..300), eps in 0.01f64..1.0) {
        prop_assume!(values.iter().any(|v| *v != values[0]));
        let grid = levy_hat_single(&values, eps, 200).unwrap();
        let exact = levy_exact(&values, eps).unwrap();
        prop_assert!(grid.value <= exact.value);
        prop_assert!(grid.value > 0.0);
    }

    #[test]
    fn nested_designs_share_a_prefix(seed in any::<u64>(), small in 3usize..20, extra in 1usize..20) {
        let cfg = |p| DesignConfig::new(DesignKind::K0Split, p).rank(3).k0(2).seed(seed);
        let a = gen_design(&cfg(small)).unwrap();
        let b = gen_design(&cfg(small + extra)).unwrap();
        let (anticonc::CovForm::Factor(ga), anticonc::CovForm::Factor(gb)) = (a.spec.form(), b.spec.form()) else {
            panic!("factor form expected");
        };
        prop_assert_eq!(ga, &gb.rows(0, small).into_owned());
    }
}
