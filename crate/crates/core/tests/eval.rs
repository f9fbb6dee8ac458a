use mvlt_core::data::{synthetic_dataset, SyntheticSpec};
use mvlt_core::encoder::EncoderConfig;
use mvlt_core::eval::*;
use mvlt_core::model::{Granularity, ModelConfig, Mvlt};
use mvlt_core::rng::{rng_for, seeded};
use mvlt_core::text::Vocab;
use mvlt_core::vision::MaskStyle;
use mvlt_core::Float;
use proptest::prelude::*;

#[test]
fn third_place_hits_five_and_ten() {
    let scores = [0.9, 0.2, 0.5, 0.7, 0.1];
    assert_eq!(positive_rank(&scores, 2).unwrap(), 3);
    assert_eq!(recall_at_k(&scores, 2, &RECALL_KS).unwrap(), [false, true, true]);
    assert!(recall_at_k(&scores, 5, &RECALL_KS).is_err());
}

#[test]
fn ties_resolve_by_candidate_order() {
    let scores = [0.5, 0.5, 0.5];
    assert_eq!(positive_rank(&scores, 0).unwrap(), 1);
    assert_eq!(positive_rank(&scores, 2).unwrap(), 3);
}

#[test]
fn published_rows_sum() {
    let tir = RetrievalReport::from_percentages("tir", 0, 33.88, 60.60, 68.59);
    assert!((tir.sum_r - 163.07).abs() < 0.01);
    assert!((sum_c(0.9507, 0.714) - 166.47).abs() < 0.01);
}

#[test]
fn report_from_ranks() {
    let r = RetrievalReport::from_ranks("itr", &[1, 3, 7, 20]);
    assert_eq!((r.r1, r.r5, r.r10), (25.0, 50.0, 75.0));
    assert!((r.sum_r - 150.0).abs() < 1e-9);
    assert!(r.to_text().starts_with("ITR: R@1 25.00"));
}

#[test]
fn perfect_recognition_sums_to_200() {
    let labels = [0, 1, 2, 1, 0];
    let r = category_metrics(&labels, &labels, 3).unwrap();
    assert_eq!((r.accuracy, r.macro_f), (1.0, 1.0));
    assert_eq!(r.sum_c, 200.0);
}

#[test]
fn absent_class_pulls_macro_f_down() {
    // Class 2 is neither present nor predicted.
    let labels = [0, 0, 1, 1];
    let preds = [0, 1, 1, 1];
    let r = category_metrics(&preds, &labels, 3).unwrap();
    // Class 0: P 1, R 0.5, F 2/3. Class 1: P 2/3, R 1, F 0.8.
    let expected = (2.0 / 3.0 + 0.8 + 0.0) / 3.0;
    assert!((r.macro_f - expected).abs() < 1e-12);
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.per_class_f1[2], 0.0);
}

#[test]
fn recognition_input_errors() {
    assert!(category_metrics(&[0], &[0], 1).is_err());
    assert!(category_metrics(&[0, 1], &[0], 2).is_err());
    assert!(category_metrics(&[0, 3], &[0, 1], 2).is_err());
    assert!("sideways".parse::<Direction>().is_err());
    assert_eq!("TIR".parse::<Direction>().unwrap(), Direction::Tir);
}

#[test]
fn sets_have_one_positive_in_its_sub_category() {
    let ds = synthetic_dataset(96, 16, &SyntheticSpec::default(), 4).unwrap();
    let mut rng = seeded(1);
    let mut total = 0;
    for dir in [Direction::Tir, Direction::Itr] {
        let mut opts = CandidateOptions::new(dir);
        opts.n_neg = 3;
        let sets = build_candidate_sets(&ds, &opts, &mut rng).unwrap();
        assert_eq!(sets.len(), ds.pairs().len());
        for s in &sets {
            let pos = s.candidates[s.positive];
            let positives = s
                .candidates
                .iter()
                .filter(|c| c.caption == c.image.0)
                .count();
            assert_eq!(positives, 1);
            assert_eq!(pos.caption, pos.image.0);
            for c in &s.candidates {
                assert_eq!(ds.products[c.caption].sub, s.sub.unwrap());
                assert_eq!(ds.products[c.image.0].sub, s.sub.unwrap());
            }
        }
        total += sets.len();
    }
    assert!(total > 100);
}

#[test]
fn small_sub_category_shrinks_negatives() {
    let ds = synthetic_dataset(64, 16, &SyntheticSpec::default(), 2024).unwrap();
    let groups = ds.by_sub_category();
    let mut opts = CandidateOptions::new(Direction::Tir);
    opts.aggregation = Aggregation::Products;
    let sets = build_candidate_sets(&ds, &opts, &mut seeded(2)).unwrap();
    let answerable = groups.values().filter(|g| g.len() >= 2).map(|g| g.len()).sum::<usize>();
    assert!(answerable < 64, "expected a singleton sub-category");
    assert_eq!(sets.len(), answerable);
    for s in &sets {
        assert_eq!(s.candidates.len(), groups[&s.sub.unwrap()].len());
    }
    opts.pool = NegativePool::AllProducts;
    opts.n_neg = 20;
    let sets = build_candidate_sets(&ds, &opts, &mut seeded(2)).unwrap();
    assert!(sets.iter().all(|s| s.candidates.len() == 21 && s.sub.is_none()));
}

#[test]
fn random_scores_sit_at_chance() {
    let ranks = random_ranks(10_000, 101, &mut rng_for(5, "chance", 0));
    let r = RetrievalReport::from_ranks("tir", &ranks);
    assert!((r.r1 - 100.0 / 101.0).abs() <= 0.5, "R@1 {}", r.r1);
}

#[test]
fn scoring_and_dumps_on_a_fresh_model() {
    let ds = synthetic_dataset(6, 32, &SyntheticSpec::default(), 8).unwrap();
    let vocab = Vocab::build(&ds.captions(), 100).unwrap();
    let mut cfg = ModelConfig::new(EncoderConfig::toy(vocab.len()));
    cfg.main_classes = ds.main_names.len().max(2);
    let (model, store) = Mvlt::new(&cfg, 3).unwrap();

    let mut opts = CandidateOptions::new(Direction::Itr);
    opts.pool = NegativePool::AllProducts;
    opts.n_neg = 4;
    let sets = build_candidate_sets(&ds, &opts, &mut seeded(0)).unwrap();
    let mut dup = sets[0].clone();
    dup.candidates.push(dup.candidates[0]);
    let scores = score_candidates(&model, &store, &ds, &vocab, &dup).unwrap();
    assert_eq!(scores[0], *scores.last().unwrap());
    assert!(scores.iter().all(|s| s.is_finite() && (0.0..=1.0).contains(s)));
    let (report, outcomes) = evaluate_retrieval(&model, &store, &ds, &vocab, &sets).unwrap();
    assert_eq!(outcomes.len(), sets.len());
    assert!(report.r1 <= report.r5 && report.r5 <= report.r10);

    let rec = evaluate_recognition(&model, &store, &ds, &vocab, Granularity::Main).unwrap();
    assert_eq!(rec.samples, ds.pairs().len());

    let dir = tempfile::tempdir().unwrap();
    let settings = MigSettings {
        ratio: 0.5,
        patch: 4,
        alpha: 2,
        style: MaskStyle::RandomGrid,
        seed: 11,
    };
    let rows = mig_dump(&model, &store, &ds, &vocab, &settings, dir.path()).unwrap();
    assert_eq!(rows.len(), ds.pairs().len());
    let csv = std::fs::read_to_string(dir.path().join(MIG_SCORES)).unwrap();
    assert_eq!(csv.lines().count(), rows.len() + 1);
    let id = &ds.products[0].id;
    for kind in ["masked", "recon", "gt"] {
        assert!(dir.path().join(format!("{id}_v0_{kind}.png")).exists());
    }
    let again = mig_dump(&model, &store, &ds, &vocab, &settings, dir.path()).unwrap();
    assert_eq!(rows, again);
}

proptest! {
    #[test]
    fn recall_is_monotone_and_order_invariant(
        raw in prop::collection::vec(0.0f64..1.0, 2..40),
        pick in 0usize..40,
    ) {
        let scores: Vec<Float> = raw.iter().map(|&x| x as Float).collect();
        let positive = pick % scores.len();
        let hits = recall_at_k(&scores, positive, &RECALL_KS).unwrap();
        prop_assert!(hits[0] <= hits[1] && hits[1] <= hits[2]);
        let squashed: Vec<Float> = scores.iter().map(|s| 2.0 * s).collect();
        prop_assert_eq!(positive_rank(&scores, positive).unwrap(), positive_rank(&squashed, positive).unwrap());
    }

    #[test]
    fn macro_f_ignores_relabeling(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..50), shift in 1usize..4) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = category_metrics(&p, &l, 4).unwrap();
        let relabel = |v: &[usize]| v.iter().map(|c| (c + shift) % 4).collect::<Vec<_>>();
        let b = category_metrics(&relabel(&p), &relabel(&l), 4).unwrap();
        prop_assert!((a.macro_f - b.macro_f).abs() < 1e-12);
        prop_assert_eq!(a.accuracy, b.accuracy);
    }
}
