use mvlt_core::encoder::{Encoder, EncoderConfig, TextInput};
use mvlt_core::gradcheck::{self, GRAD_TOLERANCE};
use mvlt_core::heads::{loss_itm, loss_mir, total_loss, LossWeights, ReconDecoder};
use mvlt_core::model::{ModelConfig, Mvlt};
use mvlt_core::rng;
use mvlt_core::text::{CLS, PAD};
use mvlt_core::{Error, Float, Graph, ParamStore, Tensor};
use rand::Rng;

fn ids_and_valid(len: usize, content: usize, vocab: usize, seed: u64) -> (Vec<usize>, Vec<bool>) {
    let mut r = rng::seeded(seed);
    let mut ids = vec![PAD; len];
    let mut valid = vec![false; len];
    ids[0] = CLS;
    valid[0] = true;
    for i in 1..=content {
        ids[i] = r.gen_range(4..vocab);
        valid[i] = true;
    }
    (ids, valid)
}

fn random_image(size: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::new([3, size, size], (0..3 * size * size).map(|_| r.gen::<Float>()).collect()).unwrap()
}

fn build(config: &EncoderConfig, seed: u64) -> (Encoder, ParamStore) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(config, &mut store, &mut rng::seeded(seed)).unwrap();
    (enc, store)
}

fn zero_all(store: &mut ParamStore) {
    for (_, p) in store.iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
    }
}

#[test]
fn full_size_shapes() {
    let config = EncoderConfig::full(100);
    assert_eq!(config.reductions(), vec![4, 8, 16, 32]);
    let (enc, store) = build(&config, 1);
    let (ids, valid) = ids_and_valid(128, 20, 100, 2);
    let mut g = Graph::inference(&store);
    let img = g.constant(random_image(256, 3));
    let out = enc.forward(&mut g, img, &ids, &valid).unwrap();
    let expected = [(64, 64), (128, 32), (320, 16), (512, 8)];
    for (k, &(d, side)) in expected.iter().enumerate() {
        assert_eq!(g.shape(out.vision[k]), [d, side, side]);
        assert_eq!(g.shape(out.vision_seq[k]), [side * side, d]);
        assert_eq!(g.shape(out.text[k]), [128, d]);
    }
}

#[test]
fn stage_embeddings_at_full_size() {
    let config = EncoderConfig::full(50);
    let (enc, store) = build(&config, 4);
    let mut g = Graph::inference(&store);
    let img = g.constant(random_image(256, 5));
    let n1 = enc.embed_vision(&mut g, 0, img).unwrap();
    assert_eq!(g.shape(n1), [4096, 64]);
    let prev = g.constant(Tensor::zeros([128, 64]));
    let m2 = enc.embed_language(&mut g, 1, TextInput::Hidden(prev)).unwrap();
    assert_eq!(g.shape(m2), [128, 128]);
    let v3 = g.constant(Tensor::zeros([320, 16, 16]));
    let n4 = enc.embed_vision(&mut g, 3, v3).unwrap();
    assert_eq!(g.shape(n4), [64, 512]);
}

#[test]
fn embedding_errors() {
    let config = EncoderConfig::toy(30);
    let (enc, store) = build(&config, 6);
    let mut g = Graph::inference(&store);
    let wrong = g.constant(Tensor::zeros([16, 9]));
    let err = enc.embed_language(&mut g, 1, TextInput::Hidden(wrong)).unwrap_err();
    assert!(matches!(err, Error::Shape(_)), "{err}");
    let odd = g.constant(Tensor::zeros([3, 30, 30]));
    assert!(matches!(enc.embed_vision(&mut g, 0, odd), Err(Error::Shape(_))));
    let m = g.constant(Tensor::zeros([16, 8]));
    let n = g.constant(Tensor::zeros([64, 16]));
    assert!(matches!(enc.encode_stage(&mut g, 0, m, n, None), Err(Error::Shape(_))));
}

#[test]
fn zero_weights_leave_position_embeddings() {
    let config = EncoderConfig::toy(30);
    let (enc, mut store) = build(&config, 7);
    zero_all(&mut store);
    let pos = store.id("stage1.vision_pos").unwrap();
    let mut r = rng::seeded(8);
    let vals: Vec<Float> = (0..64 * 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    store.get_mut(pos).value = Tensor::new([64, 8], vals.clone()).unwrap();
    let (ids, _) = ids_and_valid(16, 5, 30, 9);

    let mut g = Graph::inference(&store);
    let m = enc.embed_language(&mut g, 0, TextInput::Ids(&ids)).unwrap();
    assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    let zero = g.constant(Tensor::zeros([3, 32, 32]));
    let n = enc.embed_vision(&mut g, 0, zero).unwrap();
    assert_eq!(g.value(n).data(), vals.as_slice());

    // Only position embeddings are non-zero: outputs ignore the image.
    let valid = vec![true; 16];
    let a = g.constant(random_image(32, 10));
    let b = g.constant(random_image(32, 11));
    let oa = enc.forward(&mut g, a, &ids, &valid).unwrap();
    let ob = enc.forward(&mut g, b, &ids, &valid).unwrap();
    for k in 0..4 {
        assert!(g.value(oa.vision[k]).bit_eq(g.value(ob.vision[k])));
        assert!(g.value(oa.text[k]).bit_eq(g.value(ob.text[k])));
    }
}

#[test]
fn zero_layers_are_identity() {
    let mut config = EncoderConfig::toy(30);
    for s in &mut config.stages {
        s.layers = 0;
    }
    let (enc, store) = build(&config, 12);
    let mut g = Graph::inference(&store);
    let m = g.constant(Tensor::full([16, 8], 0.25));
    let n = g.constant(random_image(8, 14).reshape(vec![24, 8]).unwrap());
    let n = g.concat(&[n, n, n]).unwrap();
    let n = g.slice_rows(n, 0, 64).unwrap();
    let (t, v) = enc.encode_stage(&mut g, 0, m, n, None).unwrap();
    assert!(g.value(t).bit_eq(g.value(m)));
    assert!(g.value(v).bit_eq(g.value(n)));
}

#[test]
fn forward_is_deterministic_and_finite_on_toy() {
    let config = EncoderConfig::toy(40);
    let (enc, store) = build(&config, 15);
    let (ids, valid) = ids_and_valid(16, 9, 40, 16);
    let run = || {
        let mut g = Graph::inference(&store);
        let img = g.constant(random_image(32, 17));
        let out = enc.forward(&mut g, img, &ids, &valid).unwrap();
        out.text
            .iter()
            .chain(&out.vision)
            .map(|&v| g.value(v).clone())
            .collect::<Vec<_>>()
    };
    let a = run();
    let b = run();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.is_finite());
        assert!(x.bit_eq(y));
    }
    assert_eq!(a[7].shape(), [32, 1, 1]);
}

#[test]
fn concatenated_attention_rows_sum_to_one() {
    let config = EncoderConfig::toy(40);
    let (enc, store) = build(&config, 18);
    let (_, valid) = ids_and_valid(16, 6, 40, 19);
    let mut g = Graph::inference(&store);
    let mut r = rng::seeded(20);
    let z = g.constant(Tensor::new([80, 8], (0..640).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap());
    let probs = enc.layer_attention(&mut g, 0, 0, z, Some(&valid)).unwrap();
    // 16 text keys plus the 8x8 grid reduced by 4 to 2x2.
    assert_eq!(probs.shape(), [1, 80, 20]);
    for row in probs.data().chunks(20) {
        let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
        assert!((s - 1.0).abs() <= 1e-6, "row sums to {s}");
        for (k, &p) in row[..16].iter().enumerate() {
            if !valid[k] {
                assert_eq!(p, 0.0);
            }
        }
    }
}

#[test]
fn padding_positions_do_not_leak() {
    let config = EncoderConfig::toy(40);
    let (enc, mut store) = build(&config, 21);
    let (ids, valid) = ids_and_valid(16, 7, 40, 22);
    let img = random_image(32, 23);
    let run = |store: &ParamStore| {
        let mut g = Graph::inference(store);
        let x = g.constant(img.clone());
        let out = enc.forward(&mut g, x, &ids, &valid).unwrap();
        (0..4)
            .map(|k| (g.value(out.text[k]).clone(), g.value(out.vision[k]).clone()))
            .collect::<Vec<_>>()
    };
    let before = run(&store);
    // Perturb the stage-1 position rows at [PAD] positions only.
    let pos = store.id("stage1.text_pos").unwrap();
    let mut r = rng::seeded(24);
    let data = store.get_mut(pos).value.data_mut();
    for (i, row) in data.chunks_mut(8).enumerate() {
        if !valid[i] {
            row.iter_mut().for_each(|v| *v = r.gen_range(-3.0..3.0));
        }
    }
    let after = run(&store);
    for ((t0, v0), (t1, v1)) in before.iter().zip(&after) {
        let d = t0.shape()[1];
        for i in (0..16).filter(|&i| valid[i]) {
            for j in 0..d {
                let (a, b) = (t0.data()[i * d + j], t1.data()[i * d + j]);
                assert!((a - b).abs() <= 1e-5, "text row {i}: {a} vs {b}");
            }
        }
        for (a, b) in v0.data().iter().zip(v1.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn projection_gradients_match_finite_differences() {
    let config = EncoderConfig::toy(30);
    let (enc, store) = build(&config, 25);
    let (ids, valid) = ids_and_valid(16, 8, 30, 26);
    let img = random_image(32, 27);
    let targets = [
        "stage2.text_embed.weight",
        "stage3.text_embed.weight",
        "stage1.token_embed",
        "stage2.patch_embed.weight",
        "stage1.layer0.attn.sr.weight",
    ];
    let ids_p: Vec<_> = targets.iter().map(|n| store.id(n).unwrap()).collect();
    let err = gradcheck::check_params(&store, &ids_p, 6, &mut rng::seeded(28), |g| {
        let x = g.constant(img.clone());
        let out = enc.forward(g, x, &ids, &valid)?;
        let t = out.text[2];
        let v = out.vision_seq[2];
        let both = g.concat(&[t, v])?;
        gradcheck::project(g, both, &mut rng::seeded(29))
    })
    .unwrap();
    assert!(err <= GRAD_TOLERANCE, "relative error {err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = EncoderConfig::toy(30);
    c.stages[1].heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = EncoderConfig::toy(30);
    c.stages[0].kernel = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = EncoderConfig::toy(30);
    c.image_size = 36;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}

#[test]
fn decoder_shapes_and_neutral_output() {
    let config = EncoderConfig::full(20);
    let mut store = ParamStore::new();
    let dec = ReconDecoder::new(&config, &mut store, &mut rng::seeded(30)).unwrap();
    zero_all(&mut store);
    let mut g = Graph::inference(&store);
    let maps: Vec<_> = [(64, 64), (128, 32), (320, 16), (512, 8)]
        .iter()
        .map(|&(d, s)| g.constant(Tensor::zeros([d, s, s])))
        .collect();
    let out = dec.forward(&mut g, &maps).unwrap();
    assert_eq!(g.shape(out), [3, 256, 256]);
    assert!(g.value(out).data().iter().all(|&v| v == 0.5));
    let bad = g.constant(Tensor::zeros([64, 32, 32]));
    let mut wrong = maps.clone();
    wrong[0] = bad;
    assert!(matches!(dec.forward(&mut g, &wrong), Err(Error::Shape(_))));
}

#[test]
fn decoder_gradient_wrt_finest_map() {
    let config = EncoderConfig::toy(20);
    let mut store = ParamStore::new();
    let dec = ReconDecoder::new(&config, &mut store, &mut rng::seeded(31)).unwrap();
    let shapes = [(8, 8), (16, 4), (24, 2), (32, 1)];
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(i, &(d, s))| {
            let mut r = rng::seeded(32 + i as u64);
            Tensor::new([d, s, s], (0..d * s * s).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect();
    let target = random_image(32, 40);
    let n = target.numel();
    let mut g = Graph::with_params(&store);
    let v1 = g.variable(inputs[0].clone());
    let rest: Vec<_> = inputs[1..].iter().map(|t| g.constant(t.clone())).collect();
    let recon = dec.forward(&mut g, &[v1, rest[0], rest[1], rest[2]]).unwrap();
    let tgt = g.constant(target.clone());
    let loss = loss_mir(&mut g, recon, tgt, None).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<f64> = grads.wrt(v1).unwrap().data().iter().map(|&v| f64::from(v)).collect();

    let decode = |x: &Tensor| {
        let mut g = Graph::inference(&store);
        let v = g.constant(x.clone());
        let rest: Vec<_> = inputs[1..].iter().map(|t| g.constant(t.clone())).collect();
        let recon = dec.forward(&mut g, &[v, rest[0], rest[1], rest[2]]).unwrap();
        g.value(recon).clone()
    };
    // Loss differences accumulated per pixel in double precision; the
    // single-precision scalar loss is too coarse to difference directly.
    let smooth = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    let eps = gradcheck::FD_EPS;
    let numeric: Vec<f64> = (0..inputs[0].numel())
        .map(|j| {
            let mut p = inputs[0].clone();
            p.data_mut()[j] += eps as Float;
            let mut m = inputs[0].clone();
            m.data_mut()[j] -= eps as Float;
            let (rp, rm) = (decode(&p), decode(&m));
            let diff: f64 = (0..n)
                .map(|i| {
                    let t = f64::from(target.data()[i]);
                    smooth(f64::from(rp.data()[i]) - t) - smooth(f64::from(rm.data()[i]) - t)
                })
                .sum();
            diff / (2.0 * eps * n as f64)
        })
        .collect();
    let err = gradcheck::relative_error(&analytic, &numeric);
    assert!(err <= GRAD_TOLERANCE, "relative error {err}");
}

#[test]
fn mir_loss_examples() {
    let n = 3 * 4 * 4;
    let base = Tensor::full([3, 4, 4], 0.3);
    let mut g = Graph::new();
    let a = g.constant(base.clone());
    let l = loss_mir(&mut g, a, a, None).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    for (d, expected) in [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5)] {
        let mut p = base.clone();
        p.data_mut()[5] += d;
        let pv = g.constant(p);
        let l = loss_mir(&mut g, pv, a, None).unwrap();
        let got = g.value(l).item();
        assert!((got - expected / n as Float).abs() < 1e-6, "d={d}: {got}");
    }
    // Masked-only variant averages over flagged pixels of all channels.
    let mut p = base.clone();
    p.data_mut()[0] += 0.5;
    let pv = g.constant(p);
    let mut flags = vec![false; 16];
    flags[0] = true;
    let l = loss_mir(&mut g, pv, a, Some(&flags)).unwrap();
    assert!((g.value(l).item() - 0.125 / 3.0).abs() < 1e-6);
}

#[test]
fn itm_loss_examples() {
    let mut g = Graph::new();
    let even = g.constant(Tensor::zeros([1, 2]));
    for y in [0.0, 1.0] {
        let l = loss_itm(&mut g, even, &[y]).unwrap();
        assert!((g.value(l).item() - std::f32::consts::LN_2 as Float).abs() < 1e-6);
    }
    let sure = g.constant(Tensor::new([1, 2], vec![-50.0, 50.0]).unwrap());
    let l = loss_itm(&mut g, sure, &[1.0]).unwrap();
    assert!(g.value(l).item() < 1e-6);
    let wrong = loss_itm(&mut g, sure, &[0.0]).unwrap();
    assert!(g.value(wrong).item().is_finite());

    let two = g.constant(Tensor::new([2, 2], vec![0.0, 0.0, -50.0, 50.0]).unwrap());
    let l = loss_itm(&mut g, two, &[1.0, 1.0]).unwrap();
    let expected = (std::f64::consts::LN_2 + 0.0) / 2.0;
    assert!((f64::from(g.value(l).item()) - expected).abs() < 1e-6);
}

#[test]
fn mlm_loss_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros([3, 100]));
    let l = g.cross_entropy(uniform, &[4, 50, 99]).unwrap();
    assert!((f64::from(g.value(l).item()) - 100f64.ln()).abs() < 1e-5);
    let mut sharp = vec![0.0; 100];
    sharp[7] = 40.0;
    let s = g.constant(Tensor::new([1, 100], sharp).unwrap());
    let l = g.cross_entropy(s, &[7]).unwrap();
    assert!(g.value(l).item() < 1e-6);
    assert!(matches!(g.cross_entropy(s, &[100]), Err(Error::InvalidArgument(_))));
}

#[test]
fn total_loss_examples() {
    let w = LossWeights::default();
    assert_eq!(total_loss(0.0, 0.0, 0.0, w).unwrap().total, 0.0);
    let b = total_loss(0.1, 0.7, 4.6, w).unwrap();
    assert!((b.total - 6.3).abs() < 1e-5);
    let plain = LossWeights { mir: 1.0, itm: 1.0, mlm: 1.0 };
    assert!((total_loss(0.1, 0.7, 4.6, plain).unwrap().total - 5.4).abs() < 1e-5);
    match total_loss(0.1, Float::NAN, 1.0, w) {
        Err(Error::NonFinite { term, .. }) => assert_eq!(term, "itm"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn model_round_trips_through_checkpoint() {
    let mut config = ModelConfig::new(EncoderConfig::toy(30));
    config.main_classes = 4;
    let (model, store) = Mvlt::new(&config, 33).unwrap();
    assert!(model.main_head.is_some() && model.sub_head.is_none());
    let ckpt = model.checkpoint(&store, "", "");
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();
    let back = mvlt_core::checkpoint::Checkpoint::read_from(bytes.as_slice()).unwrap();
    let (m2, s2, _) = Mvlt::from_checkpoint(&back).unwrap();
    assert_eq!(m2.config, model.config);
    assert!(s2.bit_eq(&store));
}
