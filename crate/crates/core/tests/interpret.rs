mod common;

use proptest::prelude::*;
use seqcoder::interpret::*;
use seqcoder::metrics::LabelSet;
use seqcoder::{EncoderKind, Model};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn linear_probe_scores_sum_to_logit(t in 1usize..12, d in 1usize..10, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = common::rand_matrix(&mut rng, t, d);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (logit, scores) = linear_probe(&x, &w).unwrap();
        prop_assert!((scores.iter().sum::<f64>() - logit).abs() <= 1e-10);
        let direct: f64 = x.values().iter().enumerate().map(|(i, v)| v * w[i % d]).sum();
        prop_assert!((direct - logit).abs() <= 1e-10);
    }

    #[test]
    fn normalized_scores_are_bounded(raw in prop::collection::vec(-50.0f64..50.0, 0..30)) {
        let n = normalize_max_abs(&raw);
        prop_assert!(n.iter().all(|v| v.abs() <= 1.0));
        if raw.iter().any(|v| *v != 0.0) {
            prop_assert!(n.iter().any(|v| v.abs() == 1.0));
        }
    }
}

#[test]
fn zero_embedding_gives_zero_score() {
    let fx = common::Fixture::new(8, 3);
    for kind in [EncoderKind::Transformer, EncoderKind::Lstm] {
        let mut model = Model::new(fx.tiny_config(kind)).unwrap();
        let ids = vec![1, 7, 9, 7, 11, 2];
        let emb = model.embedding;
        let d = model.config.d_model;
        model.params.get_mut(emb).values_mut()[7 * d..8 * d].iter_mut().for_each(|v| *v = 0.0);
        let raw = grad_times_input_raw(&model, &ids, 1).unwrap();
        assert_eq!(raw[1], 0.0);
        assert_eq!(raw[3], 0.0);
        assert!(raw[2] != 0.0 && raw[4] != 0.0, "{kind:?} {raw:?}");
    }
}

#[test]
fn salient_set_shrinks_as_threshold_rises() {
    let fx = common::Fixture::new(8, 3);
    let model = Model::new(fx.tiny_config(EncoderKind::Transformer)).unwrap();
    let text = fx.tok.encode(&fx.a.records[0].text);
    let attr = grad_times_input(&model, "n", &text.ids, 0).unwrap();
    let mut prev = usize::MAX;
    for k in -20..=20 {
        let n = salient_words(&attr, &text, k as f64 / 20.0).len();
        assert!(n <= prev);
        prev = n;
    }
    assert_eq!(salient_words(&attr, &text, -1.0).len(), text.words.len());
    let nonneg = seqcoder::interpret::word_scores(&attr, &text).iter().filter(|s| s.unwrap() >= 0.0).count();
    assert_eq!(salient_words(&attr, &text, 0.0).len(), nonneg);
    assert!(grad_times_input(&model, "n", &text.ids, 3).is_err());
}

fn inputs(fx: &common::Fixture) -> Vec<AttributionInput> {
    fx.a.records
        .iter()
        .map(|r| AttributionInput {
            id: r.id.clone(),
            text: fx.tok.encode(&r.text),
            gold: seqcoder::data::Dataset::label_ids(r, &fx.labels).unwrap(),
        })
        .collect()
}

#[test]
fn keyword_table_respects_dictionary_and_top_k() {
    let fx = common::Fixture::new(10, 3);
    let model = Model::new(fx.tiny_config(EncoderKind::Transformer)).unwrap();
    let notes = inputs(&fx);
    let dict = seqcoder::data::synth_dictionary(&fx.cfg).unwrap();
    let all = keyword_table(&model, &notes, &fx.labels, &dict, 1000, -1.0, 2.0).unwrap();
    let two = keyword_table(&model, &notes, &fx.labels, &dict, 2, -1.0, 2.0).unwrap();
    assert_eq!(all.pairs, notes.iter().map(|n| n.gold.len()).sum::<usize>());
    assert!((all.mean_salient_fraction - 1.0).abs() < 1e-12);
    for (a, t) in all.rows.iter().zip(&two.rows) {
        assert!(a.words.iter().all(|(w, c)| dict.contains(w) && *c >= 1));
        assert!(a.words.windows(2).all(|p| p[0].1 >= p[1].1));
        assert_eq!(t.words[..], a.words[..a.words.len().min(2)]);
    }

    let stranger = KeywordDictionary::from_terms(["qqqq".to_string()].into()).unwrap();
    let none = keyword_table(&model, &notes, &fx.labels, &stranger, 5, -1.0, 2.0).unwrap();
    assert!(none.rows.is_empty());
}

#[test]
fn keyword_table_with_no_labels_is_empty() {
    let fx = common::Fixture::new(6, 3);
    let model = Model::new(fx.tiny_config(EncoderKind::Transformer)).unwrap();
    let mut notes = inputs(&fx);
    notes.iter_mut().for_each(|n| n.gold = LabelSet::new());
    let dict = seqcoder::data::synth_dictionary(&fx.cfg).unwrap();
    let t = keyword_table(&model, &notes, &fx.labels, &dict, 5, 0.2, 2.0).unwrap();
    assert_eq!(t.pairs, 0);
    assert_eq!(t.mean_salient_fraction, 0.0);
}
