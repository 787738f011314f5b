use ndarray::Array2;
use proptest::prelude::*;

use otdistill::barycenter::{free_support_barycenter, project_simplex, BarycenterParams};
use otdistill::bench_io::{read_dataset, write_dataset};
use otdistill::distill::{distill_msda_dm, distill_wbt, DmParams};
use otdistill::distributions::{
    sq_distances, standardize, stratified_sample, Domain, LabeledMeasure, MultiDomainDataset,
};
use otdistill::ot::{exact_ot, sinkhorn, SinkhornParams};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn labeled(n_per_class: usize, n_c: usize, d: usize) -> impl Strategy<Value = LabeledMeasure> {
    matrix(n_per_class * n_c, d).prop_map(move |mut x| {
        let labels: Vec<usize> = (0..x.nrows()).map(|i| i % n_c).collect();
        // spread classes apart so no two points coincide by construction
        for (mut row, &l) in x.outer_iter_mut().zip(&labels) {
            row[0] += 4.0 * l as f64;
        }
        LabeledMeasure::labeled(x, labels, n_c).unwrap()
    })
}

fn dataset(sources: Vec<LabeledMeasure>, target: LabeledMeasure) -> MultiDomainDataset {
    let n_c = target.n_classes();
    let mut domains: Vec<Domain> = sources
        .into_iter()
        .enumerate()
        .map(|(k, measure)| Domain {
            name: format!("s{k}"),
            measure,
        })
        .collect();
    domains.push(Domain {
        name: "t".into(),
        measure: target,
    });
    MultiDomainDataset::new(domains, (0..n_c).map(|c| format!("c{c}")).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sinkhorn_plan_is_feasible_and_above_exact(x in matrix(7, 2), y in matrix(7, 2)) {
        let c = sq_distances(x.view(), y.view());
        let plan = sinkhorn(&c, &SinkhornParams::relative(0.05)).unwrap();
        let n = 7.0;
        for s in plan.coupling.sum_axis(ndarray::Axis(1)).iter().chain(plan.coupling.sum_axis(ndarray::Axis(0)).iter()) {
            prop_assert!((s - 1.0 / n).abs() <= 1e-9);
        }
        prop_assert!(plan.coupling.iter().all(|&v| v >= 0.0));
        let exact = exact_ot(&c).unwrap().cost_value;
        prop_assert!(plan.cost_value >= exact - 1e-9);
    }

    #[test]
    fn simplex_projection_is_feasible_and_idempotent(v in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let p = project_simplex(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&w| w >= 0.0));
        let again = project_simplex(&p);
        for (a, b) in p.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn stratified_sample_takes_spc_per_class(m in labeled(6, 3, 2), spc in 1usize..=6, seed in any::<u64>()) {
        let s = stratified_sample(&m, spc, seed).unwrap();
        prop_assert_eq!(s.class_counts().unwrap(), vec![spc; 3]);
        let again = stratified_sample(&m, spc, seed).unwrap();
        prop_assert_eq!(s.support(), again.support());
    }

    #[test]
    fn standardize_is_idempotent(src in labeled(5, 2, 3), tgt in matrix(8, 3)) {
        let ds = dataset(vec![src], LabeledMeasure::unlabeled(tgt, 2).unwrap());
        let (once, _) = standardize(&ds).unwrap();
        let (twice, scaler) = standardize(&once).unwrap();
        prop_assert!(scaler.mean.iter().all(|v| v.abs() <= 1e-9));
        prop_assert!(scaler.std.iter().all(|v| (v - 1.0).abs() <= 1e-9));
        for (a, b) in once.domains().iter().zip(twice.domains()) {
            for (x, y) in a.measure.support().iter().zip(b.measure.support()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn barycenter_ignores_input_order(a in matrix(6, 2), b in matrix(6, 2), c in matrix(6, 2)) {
        let ms: Vec<LabeledMeasure> = [a, b, c].into_iter().map(|x| LabeledMeasure::unlabeled(x, 1).unwrap()).collect();
        let params = BarycenterParams { support_size: 4, ..BarycenterParams::default() };
        let fwd = free_support_barycenter(&[&ms[0], &ms[1], &ms[2]], &[0.2, 0.3, 0.5], &params).unwrap();
        let rev = free_support_barycenter(&[&ms[2], &ms[1], &ms[0]], &[0.5, 0.3, 0.2], &params).unwrap();
        let (fo, ro) = (fwd.history.last().unwrap(), rev.history.last().unwrap());
        prop_assert!((fo - ro).abs() <= 1e-6 * (1.0 + fo.abs()), "{} vs {}", fo, ro);
    }

    #[test]
    fn wbt_summary_stays_in_target_box(s1 in labeled(4, 2, 2), s2 in labeled(4, 2, 2), tgt in matrix(10, 2), seed in 0u64..100) {
        let target = LabeledMeasure::unlabeled(tgt.clone(), 2).unwrap();
        let ds = dataset(vec![s1, s2], target);
        let s = distill_wbt(&ds, 2, &SinkhornParams::default(), &BarycenterParams::default(), seed).unwrap();
        for j in 0..2 {
            let col = tgt.column(j);
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            prop_assert!(s.measure.support().column(j).iter().all(|&v| v >= lo - 1e-9 && v <= hi + 1e-9));
        }
        prop_assert_eq!(s.measure.class_counts().unwrap(), vec![2, 2]);
    }

    #[test]
    fn dm_objective_never_increases(s1 in labeled(5, 2, 3), s2 in labeled(5, 2, 3), tgt in matrix(9, 3), seed in 0u64..100) {
        let ds = dataset(vec![s1, s2], LabeledMeasure::unlabeled(tgt, 2).unwrap());
        let params = DmParams { iters: 60, ..DmParams::default() };
        let s = distill_msda_dm(&ds, 2, &params, seed).unwrap();
        let curve: Vec<f64> = serde_json::from_value(s.diagnostics["objective"].clone()).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn dataset_csv_round_trip(src in labeled(3, 2, 3), tgt in matrix(4, 3)) {
        let ds = dataset(vec![src], LabeledMeasure::unlabeled(tgt, 2).unwrap());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back.class_names(), ds.class_names());
        for (a, b) in ds.domains().iter().zip(back.domains()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert_eq!(a.measure.labels(), b.measure.labels());
            prop_assert_eq!(a.measure.support(), b.measure.support());
        }
    }
}
