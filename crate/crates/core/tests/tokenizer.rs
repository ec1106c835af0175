use proptest::prelude::*;
use seqcoder::tokenizer::*;

fn corpus() -> Vec<Vec<String>> {
    let pre = Preprocessor::default();
    [
        "Patient presented with azotemia and polyuria, creatinine elevated.",
        "Chronic otitis externa; headshaking noted. Recheck in 2 weeks!",
        "Owner reports vomiting x3 and diarrhea. Suspect gastroenteritis.",
        "zebra quickly jumps over 0123456789 lazy foxes",
    ]
    .iter()
    .map(|t| pre.preprocess(t))
    .collect()
}

fn alphabet(bpe: &BpeModel) -> Vec<char> {
    (4..bpe.vocab_size())
        .filter_map(|i| bpe.symbol(i))
        .filter(|s| s.chars().count() == 1 && *s != END_OF_WORD)
        .map(|s| s.chars().next().unwrap())
        .collect()
}

fn trained() -> BpeModel {
    BpeModel::train(&corpus(), 80).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]
    #[test]
    fn decode_inverts_encode(picks in prop::collection::vec(prop::collection::vec(any::<prop::sample::Index>(), 1..12), 0..10)) {
        let bpe = trained();
        let abc = alphabet(&bpe);
        let words: Vec<String> = picks.iter().map(|w| w.iter().map(|i| abc[i.index(abc.len())]).collect()).collect();
        let ids = bpe.encode(&words);
        prop_assert!(!ids.contains(&UNK_ID));
        prop_assert_eq!(bpe.decode(&ids), words.join(" "));
        let pre = Preprocessor::default();
        prop_assert_eq!(bpe.decode(&pre.frame(&ids)), words.join(" "));
    }
}

#[test]
fn training_is_deterministic() {
    let a = trained();
    let b = trained();
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.to_file_string(), b.to_file_string());
}

#[test]
fn file_roundtrip_preserves_model_and_hash() {
    let a = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bpe.txt");
    a.save(&path).unwrap();
    let b = BpeModel::load(&path).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.hash(), b.hash());
    let w: Vec<String> = vec!["azotemia".into(), "polyuria".into()];
    assert_eq!(a.encode(&w), b.encode(&w));
}

#[test]
fn unseen_characters_become_unknown() {
    let bpe = trained();
    let ids = bpe.encode_word("q\u{b7}%");
    assert!(ids.contains(&UNK_ID));
}

#[test]
fn vocab_size_is_respected() {
    let small = BpeModel::train(&corpus(), 70).unwrap();
    assert!(small.vocab_size() <= 70);
    let big = BpeModel::train(&corpus(), 100_000).unwrap();
    assert!(big.vocab_size() < 100_000);
    assert!(BpeModel::train(&corpus(), 3).is_err());
}

#[test]
fn frame_truncates_to_max_tokens() {
    let pre = Preprocessor::new(5).unwrap();
    assert_eq!(pre.frame(&[9, 8, 7, 6, 5]), vec![BOS_ID, 9, 8, 7, EOS_ID]);
    assert_eq!(pre.frame(&[]), vec![BOS_ID, EOS_ID]);
    assert!(Preprocessor::new(2).is_err());
}

#[test]
fn encoded_text_aligns_subwords_to_words() {
    let bpe = trained();
    let tok = Tokenizer::new(Preprocessor::default(), bpe);
    let e = tok.encode("Azotemia, polyuria.");
    assert_eq!(e.words, ["azotemia", ",", "polyuria", "."]);
    assert_eq!(e.ids.len(), e.word_of.len());
    assert_eq!(e.word_of[0], None);
    assert_eq!(*e.word_of.last().unwrap(), None);
    let seen: Vec<usize> = e.word_of.iter().flatten().copied().collect();
    assert!(seen.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(seen.last(), Some(&3));
}
