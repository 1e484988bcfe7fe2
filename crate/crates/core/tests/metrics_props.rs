use proptest::prelude::*;

use dtvit_core::metrics::{
    binary_metrics, confusion, macro_metrics, macro_metrics_over, report, to_f64, ConfusionMatrix, EvalScope, Exact,
};

fn q(n: u128, d: u128) -> Exact {
    Exact::new(n, d)
}

#[test]
fn reference_presence_outcome() {
    // rows are true normal / true ICH, columns predicted
    let cm = ConfusionMatrix::from_rows(&[vec![458, 1], vec![0, 807]]).unwrap();
    let b = binary_metrics(&cm, 1).unwrap();
    assert_eq!(b.accuracy, q(1265, 1266));
    assert_eq!(b.recall, q(1, 1));
    assert_eq!(b.precision, q(807, 808));
    assert_eq!(b.specificity, q(458, 459));
    assert_eq!(b.f1, q(1614, 1615));
    assert!((to_f64(b.accuracy) - 1265.0 / 1266.0).abs() <= 1e-12);
    assert!((to_f64(b.accuracy) - 0.999_210_110_584_518).abs() <= 1e-12);
    assert!((to_f64(b.precision) - 807.0 / 808.0).abs() <= 1e-12);
    assert!((to_f64(b.specificity) - 458.0 / 459.0).abs() <= 1e-12);
}

fn labels(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..200).prop_flat_map(move |n| (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn two_class_macro_on_positive_equals_binary((p, t) in labels(2)) {
        let cm = confusion(&p, &t, 2).unwrap();
        let b = binary_metrics(&cm, 1).unwrap();
        let m = macro_metrics_over(&cm, &[1]);
        prop_assert_eq!(m.accuracy, b.accuracy);
        prop_assert_eq!(m.precision, b.precision);
        prop_assert_eq!(m.recall, b.recall);
        prop_assert_eq!(m.f1, b.f1);
        prop_assert_eq!(m.specificity, b.specificity);
    }

    #[test]
    fn accuracy_is_trace_over_total(k in 2usize..6, seed in any::<u64>(), n in 1usize..300) {
        let mut rng = dtvit_core::SplitMix64::new(seed);
        let mut draw = || (0..n).map(|_| rng.below(k as u64) as usize).collect::<Vec<_>>();
        let (p, t) = (draw(), draw());
        let cm = confusion(&p, &t, k).unwrap();
        let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
        prop_assert_eq!(cm.total(), n as u64);
        prop_assert_eq!(macro_metrics(&cm).accuracy, q(hits as u128, n as u128));
    }

    #[test]
    fn relabeling_permutes_the_matrix((p, t) in labels(3), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let a = confusion(&p, &t, 3).unwrap();
        let pp: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
        let tt: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
        let b = confusion(&pp, &tt, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(a.get(i, j), b.get(perm[i], perm[j]));
            }
        }
        let (ma, mb) = (macro_metrics(&a), macro_metrics(&b));
        prop_assert_eq!(ma.accuracy, mb.accuracy);
        prop_assert_eq!(ma.precision, mb.precision);
        prop_assert_eq!(ma.recall, mb.recall);
        prop_assert_eq!(ma.f1, mb.f1);
        prop_assert_eq!(ma.specificity, mb.specificity);
    }

    #[test]
    fn recall_and_specificity_complements((p, t) in labels(2)) {
        let cm = confusion(&p, &t, 2).unwrap();
        let b = binary_metrics(&cm, 1).unwrap();
        let (tp, fp, fn_, tn) = (cm.tp(1) as u128, cm.fp(1) as u128, cm.fn_(1) as u128, cm.tn(1) as u128);
        let one = Exact::from_integer(1);
        if tp + fn_ > 0 {
            prop_assert_eq!(b.recall + q(fn_, tp + fn_), one);
        }
        if tn + fp > 0 {
            prop_assert_eq!(b.specificity + q(fp, tn + fp), one);
        }
    }

    #[test]
    fn report_json_round_trips((p, t) in labels(2), (lp, lt) in labels(3)) {
        let r = report(&confusion(&p, &t, 2).unwrap(), &confusion(&lp, &lt, 3).unwrap(), EvalScope::IchOnly).unwrap();
        prop_assert_eq!(dtvit_core::metrics::Report::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
