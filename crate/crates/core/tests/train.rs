use mvlt_core::data::{synthetic_dataset, Dataset, ShapeKind, SyntheticSpec};
use mvlt_core::encoder::EncoderConfig;
use mvlt_core::model::{Granularity, ModelConfig, Mvlt};
use mvlt_core::rng::seeded;
use mvlt_core::text::Vocab;
use mvlt_core::train::*;
use mvlt_core::vision::MaskStyle;
use mvlt_core::{Error, Float, ParamStore, Tensor};

const MASKS: MaskSettings = MaskSettings {
    vision_ratio: 0.5,
    text_ratio: 0.15,
    patch: 4,
    alpha: 2,
    style: MaskStyle::RandomGrid,
};

fn toy(n: usize) -> (Dataset, Vocab, Mvlt, ParamStore) {
    let ds = synthetic_dataset(n, 32, &SyntheticSpec::default(), 2024).unwrap();
    let vocab = Vocab::build(&ds.captions(), 1000).unwrap();
    let (model, store) = Mvlt::new(&ModelConfig::new(EncoderConfig::toy(vocab.len())), 2024).unwrap();
    (ds, vocab, model, store)
}

fn settings(steps: usize) -> PretrainSettings {
    PretrainSettings {
        steps,
        batch_size: 16,
        warmup_steps: steps / 50,
        neg_prob: 0.5,
        masks: MASKS,
        optim: OptimConfig::default(),
        objectives: ObjectiveSettings::default(),
        seed: 2024,
        checkpoint_every: 0,
    }
}

fn snapshot(store: &ParamStore) -> Vec<Vec<Float>> {
    store.iter().map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn cosine_schedule_landmarks() {
    let base = 2.5e-3;
    assert_eq!(cosine_lr(10, 110, base, 10).unwrap(), base);
    assert_eq!(cosine_lr(110, 110, base, 10).unwrap(), 0.0);
    assert!((cosine_lr(60, 110, base, 10).unwrap() - base / 2.0).abs() < 1e-9);
    assert_eq!(cosine_lr(5, 110, base, 10).unwrap(), base / 2.0);
    assert!(cosine_lr(0, 0, base, 0).is_err());
    assert!(cosine_lr(111, 110, base, 0).is_err());
}

#[test]
fn negative_sampling_rates() {
    let (ds, vocab, ..) = toy(8);
    let all_pos = make_pretrain_batch(&ds, &vocab, 16, 64, &MASKS, 0.0, &mut seeded(1)).unwrap();
    assert!(all_pos.labels().iter().all(|&m| m));
    let all_neg = make_pretrain_batch(&ds, &vocab, 16, 64, &MASKS, 1.0, &mut seeded(1)).unwrap();
    assert!(all_neg.samples.iter().all(|s| !s.matched && s.caption_product != s.product));
    let big = make_pretrain_batch(&ds, &vocab, 16, 10_000, &MASKS, 0.5, &mut seeded(2)).unwrap();
    let frac = big.labels().iter().filter(|&&m| !m).count() as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&frac), "negative fraction {frac}");
    let one = synthetic_dataset(1, 32, &SyntheticSpec::default(), 0).unwrap();
    assert!(matches!(
        make_pretrain_batch(&one, &vocab, 16, 4, &MASKS, 0.5, &mut seeded(0)),
        Err(Error::Dataset(_))
    ));
}

#[test]
fn total_is_weighted_sum() {
    let (ds, vocab, model, store) = toy(16);
    let batch = make_pretrain_batch(&ds, &vocab, 16, 8, &MASKS, 0.5, &mut seeded(3)).unwrap();
    let (loss, grads) = batch_gradients(&model, &store, &batch, &ObjectiveSettings::default()).unwrap();
    let w = model.config.weights;
    let expect = w.mir * loss.mir + w.itm * loss.itm + w.mlm * loss.mlm;
    assert!((loss.total - expect).abs() <= 1e-5 * expect.abs().max(1.0));
    assert!(grads.iter().all(|(_, g)| g.data().iter().all(|x| x.is_finite())));
}

#[test]
fn two_small_steps_reduce_the_loss() {
    let (ds, vocab, model, mut store) = toy(16);
    let batch = make_pretrain_batch(&ds, &vocab, 16, 8, &MASKS, 0.5, &mut seeded(4)).unwrap();
    let mut opt = AdamW::new(OptimConfig::default());
    let objectives = ObjectiveSettings::default();
    let a = pretrain_step(&model, &mut store, &batch, &mut opt, 1e-4, &objectives).unwrap();
    let b = pretrain_step(&model, &mut store, &batch, &mut opt, 1e-4, &objectives).unwrap();
    let (c, _) = batch_gradients(&model, &store, &batch, &objectives).unwrap();
    assert!(b.loss.total < a.loss.total && c.total < b.loss.total);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (ds, vocab, model, mut store) = toy(8);
    let before = snapshot(&store);
    let batch = make_pretrain_batch(&ds, &vocab, 16, 4, &MASKS, 0.5, &mut seeded(5)).unwrap();
    let mut opt = AdamW::new(OptimConfig::default());
    pretrain_step(&model, &mut store, &batch, &mut opt, 0.0, &ObjectiveSettings::default()).unwrap();
    assert_eq!(before, snapshot(&store));
}

#[test]
fn non_finite_loss_leaves_parameters_untouched() {
    let (ds, vocab, model, mut store) = toy(8);
    let id = store.id("decoder.to_pixels.bias").unwrap();
    store.get_mut(id).value.data_mut()[0] = f32::NAN as _;
    let before = snapshot(&store);
    let batch = make_pretrain_batch(&ds, &vocab, 16, 4, &MASKS, 0.0, &mut seeded(6)).unwrap();
    let mut opt = AdamW::new(OptimConfig::default());
    let err = pretrain_step(&model, &mut store, &batch, &mut opt, 1e-3, &ObjectiveSettings::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let after = snapshot(&store);
    assert_eq!(before.len(), after.len());
    for (a, b) in before.iter().zip(&after) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn decoupled_decay_shrinks_weights() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full([3], 2.0), true).unwrap();
    let b = store.add("b", Tensor::full([3], 2.0), false).unwrap();
    let cfg = OptimConfig {
        weight_decay: 0.1,
        ..OptimConfig::default()
    };
    let mut opt = AdamW::new(cfg);
    let zeros = vec![(w, Tensor::zeros([3])), (b, Tensor::zeros([3]))];
    for _ in 0..3 {
        opt.update(&mut store, &zeros, 0.5);
    }
    let expect = 2.0 * (1.0 - 0.5 * 0.1f64).powi(3);
    assert!(store.get(w).value.data().iter().all(|&x| (x as f64 - expect).abs() < 1e-6));
    assert!(store.get(b).value.data().iter().all(|&x| x == 2.0));
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::zeros([2]), true).unwrap();
    let b = store.add("b", Tensor::zeros([1]), true).unwrap();
    let mut grads = vec![(a, Tensor::new([2], vec![3.0, 0.0]).unwrap()), (b, Tensor::new([1], vec![4.0]).unwrap())];
    let norm = clip_gradients(&mut grads, 1.0);
    assert!((norm - 5.0).abs() < 1e-6);
    let after: f64 = grads.iter().flat_map(|(_, g)| g.data().to_vec()).map(|x| (x as f64).powi(2)).sum();
    assert!((after.sqrt() - 1.0).abs() < 1e-5);
    let mut same = grads.clone();
    clip_gradients(&mut same, 0.0);
    assert_eq!(same, grads);
}

#[test]
fn loss_curve_halves_by_step_300() {
    let (ds, vocab, model, mut store) = toy(64);
    let history = pretrain(&model, &mut store, &ds, &vocab, &settings(300), None).unwrap();
    let early = history[9].total;
    let late = history[299].total;
    assert!(late <= 0.5 * early, "step 10 {early}, step 300 {late}");
}

#[test]
fn runs_are_repeatable_and_write_artifacts() {
    let (ds, vocab, model, store) = toy(16);
    let run = |dir: &std::path::Path| {
        let mut s = store.clone();
        let out = RunOutput {
            dir,
            run_config: "seed = 2024\n",
            vocab: &vocab,
        };
        let mut cfg = settings(6);
        cfg.checkpoint_every = 2;
        pretrain(&model, &mut s, &ds, &vocab, &cfg, Some(&out)).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, METRICS_FILE), read(&b, METRICS_FILE));
    let final_ckpt = format!("checkpoints/{FINAL_CHECKPOINT}");
    assert_eq!(read(&a, &final_ckpt), read(&b, &final_ckpt));
    assert!(a.path().join("checkpoints/step_000002.ckpt").exists());
    assert!(a.path().join("checkpoints/step_000004.ckpt").exists());
    let csv = String::from_utf8(read(&a, METRICS_FILE)).unwrap();
    assert!(csv.starts_with("step,lr,mir,itm,mlm,total"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn two_class_finetune_overfits() {
    let spec = SyntheticSpec {
        shapes: vec![ShapeKind::Square, ShapeKind::Circle],
        ..SyntheticSpec::default()
    };
    let ds = synthetic_dataset(12, 32, &spec, 9).unwrap();
    assert_eq!(ds.main_names.len(), 2);
    let vocab = Vocab::build(&ds.captions(), 100).unwrap();
    let (mut model, mut store) = Mvlt::new(&ModelConfig::new(EncoderConfig::toy(vocab.len())), 1).unwrap();
    let ft = FinetuneSettings {
        steps: 200,
        batch_size: 8,
        lr: 1e-3,
        warmup_steps: 4,
        optim: OptimConfig::default(),
        frozen_encoder: false,
        seed: 3,
    };
    let report = finetune_category(&mut model, &mut store, &ds, &vocab, Granularity::Main, &ft).unwrap();
    assert_eq!(report.train_accuracy, 1.0, "final loss {:?}", report.losses.last());
}

#[test]
fn frozen_finetune_only_moves_the_head() {
    let (ds, vocab, mut model, mut store) = toy(12);
    let ft = FinetuneSettings {
        steps: 3,
        batch_size: 4,
        lr: 1e-3,
        warmup_steps: 0,
        optim: OptimConfig::default(),
        frozen_encoder: true,
        seed: 3,
    };
    finetune_category(&mut model, &mut store, &ds, &vocab, Granularity::Sub, &ft).unwrap();
    let before = store.clone();
    finetune_category(&mut model, &mut store, &ds, &vocab, Granularity::Sub, &ft).unwrap();
    for ((_, p), (_, q)) in before.iter().zip(store.iter()) {
        let moved = p.value != q.value;
        assert_eq!(moved, p.name.starts_with("head.sub"), "{}", p.name);
    }
    model.attach_head(&mut store, Granularity::Main, ds.main_names.len(), 4).unwrap();
    let main = model.head(Granularity::Main).unwrap();
    let sub = model.head(Granularity::Sub).unwrap();
    assert_ne!(main.weight, sub.weight);
    assert!(store.get(main.weight).name.starts_with("head.main"));
}

#[test]
fn accuracy_probe_counts_every_pair() {
    let (ds, vocab, model, store) = toy(16);
    let acc = pretrain_accuracy(&model, &store, &ds, &vocab, &settings(1), 2, 7).unwrap();
    assert_eq!(acc.itm_pairs, 32);
    assert!((0.0..=1.0).contains(&acc.itm) && (0.0..=1.0).contains(&acc.mlm));
}
