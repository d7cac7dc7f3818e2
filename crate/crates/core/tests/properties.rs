use indexmap::IndexMap;
use proptest::prelude::*;

use lexadapt::corpus::{read_records, write_records, DocRecord};
use lexadapt::elements::Value;
use lexadapt::grpo::{advantages, clipped_term};
use lexadapt::metrics::{extraction_counts, rouge, SlotMap};
use lexadapt::retrieve::{chunk_text, overlap_accuracy};
use lexadapt::rewards::{duplication_penalty, format_reward, garbled_penalty, FormatSpec};

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["被告", "人", "罚金", "a", "b", "七"]), 1..20)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn slots() -> impl Strategy<Value = SlotMap> {
    prop::collection::btree_map(0u8..8, 0u64..4, 0..6)
        .prop_map(|m| m.into_iter().map(|(k, v)| (format!("s{k}"), Value::Integer(v))).collect())
}

proptest! {
    #[test]
    fn garbled_penalty_in_range(s in "\\PC{0,40}", lambda in 0.0f64..5.0) {
        let p = garbled_penalty(&s, lambda);
        prop_assert!(p <= 0.0 && p >= -lambda);
    }

    #[test]
    fn clean_text_is_not_garbled(s in "[a-z0-9 ，。被告人罚金]{0,40}") {
        prop_assert_eq!(garbled_penalty(&s, 1.0), 0.0);
    }

    #[test]
    fn format_reward_is_a_fraction(s in "\\PC{0,60}") {
        let r = format_reward(&s, &FormatSpec::supervision_decision());
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn short_outputs_never_duplicate(out in "[被告人罚金]{0,30}", input in "[被告人罚金]{0,200}") {
        prop_assert_eq!(duplication_penalty(&out, &input, 1.0), 0.0);
    }

    #[test]
    fn rouge_bounded_and_symmetric_f1(c in words(), r in words()) {
        let a = rouge(&c.join(" "), &r.join(" ")).unwrap();
        let b = rouge(&r.join(" "), &c.join(" ")).unwrap();
        for (x, y) in [(a.rouge1, b.rouge1), (a.rouge2, b.rouge2), (a.rouge_l, b.rouge_l)] {
            prop_assert!((0.0..=1.0).contains(&x.f1));
            prop_assert!((x.f1 - y.f1).abs() < 1e-12);
            prop_assert!((x.recall - y.precision).abs() < 1e-12);
        }
    }

    #[test]
    fn rouge_identity(c in words()) {
        let s = rouge(&c.join(" "), &c.join(" ")).unwrap();
        prop_assert_eq!(s.rouge1.f1, 1.0);
        prop_assert_eq!(s.rouge_l.f1, 1.0);
    }

    #[test]
    fn extraction_counts_balance(gold in slots(), pred in slots()) {
        let c = extraction_counts(&gold, &pred);
        prop_assert_eq!(c.true_positive + c.false_negative, gold.len());
        prop_assert!(c.true_positive + c.false_positive >= pred.len());
        prop_assert!((0.0..=1.0).contains(&c.accuracy()));
        let own = extraction_counts(&gold, &gold);
        prop_assert_eq!(own.true_positive, gold.len());
        prop_assert_eq!(own.false_positive, 0);
    }

    #[test]
    fn chunks_partition_text(s in "[被告人罚金 ，a-z]{1,80}", k in 1usize..10) {
        prop_assume!(!s.trim().is_empty());
        let chunks = chunk_text(&s, k).unwrap();
        let joined: String = chunks.iter().map(|c| c.text.as_str()).collect();
        prop_assert_eq!(joined, s);
        for w in chunks.windows(2) {
            prop_assert_eq!(w[0].token_span.1, w[1].token_span.0);
        }
        prop_assert!(chunks.iter().all(|c| c.token_span.1 - c.token_span.0 <= k));
    }

    #[test]
    fn overlap_is_a_fraction(t in prop::collection::vec(0u8..10, 1..6), r in prop::collection::vec(0u8..10, 0..6)) {
        let a = overlap_accuracy(&t.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
                                 &r.iter().map(|x| x.to_string()).collect::<Vec<_>>()).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn advantages_zero_mean(r in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        let a = advantages(&r).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn clipped_term_never_exceeds_unclipped(ratio in 0.0f64..4.0, adv in -3.0f64..3.0, eps in 0.01f64..0.9) {
        prop_assert!(clipped_term(ratio, adv, eps) <= ratio * adv + 1e-12);
    }

    #[test]
    fn records_round_trip(
        id in "[a-z0-9]{1,8}",
        features in prop::collection::btree_map("[罚金刑期]{1,3}", "[0-9一二三年]{0,5}", 0..4),
        sections in prop::collection::btree_map("[本院认为判决如下]{2,4}", "\\PC{0,30}", 0..4),
    ) {
        let record = DocRecord {
            index: id,
            doc_type: "judgment".into(),
            procedure: "一审".into(),
            features: features.into_iter().collect::<IndexMap<_, _>>(),
            sections: sections.into_iter().collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, [&record]).unwrap();
        prop_assert_eq!(read_records(&path).unwrap(), vec![record]);
    }
}
