use mvlt_core::rng;
use mvlt_core::text::{apply_mlm_mask, tokenize, Vocab, CLS, MASK, PAD, TEXT_LEN};
use proptest::prelude::*;

#[test]
fn frequency_ties_are_broken_lexicographically() {
    // "pear" and "apple" both occur twice; only one content slot is left
    // after "fig" (three occurrences).
    let corpus = ["pear fig apple", "fig apple pear", "fig"];
    let v = Vocab::build(&corpus, 6).unwrap();
    assert_eq!(v.len(), 6);
    assert_eq!(v.token(4), Some("fig"));
    assert_eq!(v.token(5), Some("apple"));
    assert!(!v.contains("pear"));
    // Rebuilding from a permuted corpus gives the same vocabulary.
    let permuted = ["fig", "fig apple pear", "pear fig apple"];
    assert_eq!(Vocab::build(&permuted, 6).unwrap(), v);
}

#[test]
fn long_captions_keep_the_first_tokens() {
    let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let caption = words.join(" ");
    let v = Vocab::build(&[caption.as_str()], 300).unwrap();
    let s = v.encode(&caption, TEXT_LEN);
    assert_eq!(s.ids.len(), 128);
    assert_eq!(s.content_len(), 127);
    assert_eq!(s.truncated, 73);
    assert_eq!(v.decode(&s), words[..127].to_vec());
}

#[test]
fn vocab_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.tsv");
    let v = Vocab::build(&["striped red square", "dotted blue circle"], 50).unwrap();
    v.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("[PAD]\t0\n[CLS]\t1\n[MASK]\t2\n[UNK]\t3\n"));
    assert_eq!(Vocab::load(&path).unwrap(), v);

    std::fs::write(&path, "[CLS]\t0\n[PAD]\t1\n[MASK]\t2\n[UNK]\t3\n").unwrap();
    assert!(Vocab::load(&path).is_err());
    std::fs::write(&path, "[PAD]\t0\n[CLS]\t1\n[MASK]\t2\n[UNK]\t3\nred\t9\n").unwrap();
    assert!(Vocab::load(&path).is_err());
}

#[test]
fn mask_ratio_extremes() {
    let v = Vocab::build(&["a b c d e"], 20).unwrap();
    let s = v.encode("a b c d e", 16);
    let mut r = rng::seeded(1);
    let none = apply_mlm_mask(&s, 0.0, v.len(), &mut r).unwrap();
    assert!(none.masked_positions.is_empty());
    assert!(none.mlm_labels.iter().all(Option::is_none));
    assert_eq!(none.ids, s.ids);

    let all = apply_mlm_mask(&s, 1.0, v.len(), &mut r).unwrap();
    assert_eq!(all.masked_positions, vec![1, 2, 3, 4, 5]);
    assert_eq!(all.ids[0], CLS);
    assert!(all.ids[6..].iter().all(|&i| i == PAD));
    assert_eq!(all.mlm_targets(), s.ids[1..6].to_vec());
}

#[test]
fn selection_rate_and_replacement_split_match_bert_defaults() {
    // 10,000 captions of 20 tokens at ratio 0.15.
    let words: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
    let caption = words.join(" ");
    let v = Vocab::build(&[caption.as_str()], 64).unwrap();
    let s = v.encode(&caption, 32);
    let (mut selected, mut masked, mut kept) = (0usize, 0usize, 0usize);
    for i in 0..10_000u64 {
        let mut r = rng::rng_for(99, "mlm-mc", i);
        let m = apply_mlm_mask(&s, 0.15, v.len(), &mut r).unwrap();
        selected += m.masked_positions.len();
        for &p in &m.masked_positions {
            if m.ids[p] == MASK {
                masked += 1;
            } else if m.ids[p] == s.ids[p] {
                kept += 1;
            }
        }
    }
    let frac = selected as f64 / 200_000.0;
    assert!((0.14..=0.16).contains(&frac), "selected fraction {frac}");
    let mask_frac = masked as f64 / selected as f64;
    assert!((0.78..=0.82).contains(&mask_frac), "[MASK] share {mask_frac}");
    // Unchanged covers the explicit 10% plus random draws of the same id.
    let kept_frac = kept as f64 / selected as f64;
    assert!((0.09..=0.12).contains(&kept_frac), "unchanged share {kept_frac}");
}

proptest! {
    #[test]
    fn encode_decode_round_trip(words in prop::collection::vec("[a-z]{1,6}", 0..20)) {
        let caption = words.join(" ");
        let v = Vocab::build(&[caption.as_str(), "x"], 100).unwrap();
        let s = v.encode(&caption, TEXT_LEN);
        prop_assert_eq!(v.decode(&s), tokenize(&caption));
    }

    #[test]
    fn masking_never_touches_cls_or_pad_and_is_seeded(
        n in 0usize..30, ratio in 0.0f64..=1.0, seed in 0u64..500
    ) {
        let words: Vec<String> = (0..n).map(|i| format!("w{}", i % 7)).collect();
        let caption = words.join(" ");
        let v = Vocab::build(&[caption.as_str(), "w0"], 40).unwrap();
        let s = v.encode(&caption, 24);
        let a = apply_mlm_mask(&s, ratio, v.len(), &mut rng::seeded(seed)).unwrap();
        let b = apply_mlm_mask(&s, ratio, v.len(), &mut rng::seeded(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.ids[0], CLS);
        for p in 0..s.len() {
            if !s.valid[p] {
                prop_assert_eq!(a.ids[p], PAD);
                prop_assert!(a.mlm_labels[p].is_none());
            }
            prop_assert_eq!(a.mlm_labels[p].is_some(), a.masked_positions.contains(&p));
        }
    }
}
