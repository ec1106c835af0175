mod common;

use common::{oracle, prf};
use proptest::prelude::*;
use seqcoder::metrics::{exact_match, micro_prf, per_label_report, LabelSet, MetricsReport};

fn sets(m: usize) -> impl Strategy<Value = Vec<(LabelSet, LabelSet)>> {
    prop::collection::vec(
        (prop::collection::btree_set(0..m, 0..=m), prop::collection::btree_set(0..m, 0..=m)),
        0..30,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_confusion_oracle(docs in sets(6)) {
        let m = 6;
        let (preds, golds): (Vec<LabelSet>, Vec<LabelSet>) = docs.into_iter().unzip();
        let labels: Vec<String> = (0..m).map(|j| format!("l{j}")).collect();
        let (cells, em) = oracle(&preds, &golds, m);
        prop_assert_eq!(exact_match(&preds, &golds).unwrap(), em);
        let tot = cells.iter().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
        prop_assert_eq!(micro_prf(&preds, &golds).unwrap(), prf(tot[0], tot[1], tot[2]));
        let rows = per_label_report(&preds, &golds, &labels).unwrap();
        for (j, row) in rows.iter().enumerate() {
            let (p, r, f) = prf(cells[j][0], cells[j][1], cells[j][2]);
            prop_assert_eq!((row.p, row.r, row.f1, row.support), (p, r, f, cells[j][0] + cells[j][2]));
        }
    }

    #[test]
    fn metrics_are_order_invariant(docs in sets(4), rot in 0usize..30) {
        let labels: Vec<String> = (0..4).map(|j| format!("l{j}")).collect();
        let (p, g): (Vec<LabelSet>, Vec<LabelSet>) = docs.iter().cloned().unzip();
        let mut shifted = docs.clone();
        if !shifted.is_empty() {
            let k = rot % shifted.len();
            shifted.rotate_left(k);
        }
        let (p2, g2): (Vec<LabelSet>, Vec<LabelSet>) = shifted.into_iter().unzip();
        let a = MetricsReport::compute(&p, &g, &labels).unwrap();
        let b = MetricsReport::compute(&p2, &g2, &labels).unwrap();
        prop_assert_eq!(a.em, b.em);
        prop_assert_eq!(a.micro_f1, b.micro_f1);
        prop_assert_eq!(a.per_label, b.per_label);
        if a.em == 1.0 {
            prop_assert_eq!(a.micro_f1, if p.iter().all(|s| s.is_empty()) { 0.0 } else { 1.0 });
        }
        for v in [a.em, a.micro_p, a.micro_r, a.micro_f1, a.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
