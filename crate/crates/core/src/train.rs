//! Pre-training and category fine-tuning.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::heads::{total_loss, LossBreakdown};
use crate::model::{argmax, Granularity, Mvlt, SampleView};
use crate::params::{ParamId, ParamStore};
use crate::rng::{rng_for, Rng};
use crate::tensor::{Float, Tensor};
use crate::text::{apply_mlm_mask, TokenSequence, Vocab};
use crate::vision::{apply_mask, make_mask_plan, Image, MaskPlan, MaskStyle};

/// How pre-training inputs are corrupted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSettings {
    /// Fraction of masking units zero-filled.
    pub vision_ratio: f64,
    /// Fraction of caption tokens selected for prediction.
    pub text_ratio: f64,
    /// Patch size `P` of the masking grid.
    pub patch: usize,
    /// Units are `α·P` pixels wide.
    pub alpha: usize,
    pub style: MaskStyle,
}

#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub product: usize,
    pub view: usize,
    /// Product whose caption was paired with the image.
    pub caption_product: usize,
    pub matched: bool,
    pub original: Image,
    pub masked: Image,
    pub plan: MaskPlan,
    /// Caption after language masking, with recorded labels.
    pub tokens: TokenSequence,
}

#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub samples: Vec<PretrainSample>,
}

impl PretrainBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.matched).collect()
    }
}

/// Samples `size` image-caption pairs. With probability `neg_prob` a slot
/// receives the caption of another, uniformly chosen product.
pub fn make_pretrain_batch(
    dataset: &Dataset,
    vocab: &Vocab,
    text_len: usize,
    size: usize,
    masks: &MaskSettings,
    neg_prob: f64,
    rng: &mut Rng,
) -> Result<PretrainBatch> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::Dataset(format!(
            "{n} product(s) cannot form mismatched pairs; at least 2 are required"
        )));
    }
    if !(0.0..=1.0).contains(&neg_prob) {
        return Err(Error::invalid(format!("negative probability {neg_prob} outside [0, 1]")));
    }
    let mut samples = Vec::with_capacity(size);
    for _ in 0..size {
        let product = rng.gen_range(0..n);
        let view = rng.gen_range(0..dataset.products[product].images.len());
        let matched = !rng.gen_bool(neg_prob);
        let caption_product = if matched {
            product
        } else {
            let other = rng.gen_range(0..n - 1);
            if other >= product {
                other + 1
            } else {
                other
            }
        };
        let original = dataset.products[product].images[view].clone();
        let plan = make_mask_plan(
            original.height(),
            original.width(),
            masks.patch,
            masks.alpha,
            masks.vision_ratio,
            masks.style,
            rng,
        )?;
        let masked = apply_mask(&original, &plan)?;
        let clean = vocab.encode(&dataset.products[caption_product].caption, text_len);
        let tokens = apply_mlm_mask(&clean, masks.text_ratio, vocab.len(), rng)?;
        samples.push(PretrainSample {
            product,
            view,
            caption_product,
            matched,
            original,
            masked,
            plan,
            tokens,
        });
    }
    Ok(PretrainBatch { samples })
}

/// Linear warm-up to `base` over `warmup` steps, then cosine decay to zero
/// at `total`.
pub fn cosine_lr(step: usize, total: usize, base: Float, warmup: usize) -> Result<Float> {
    if total == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond total {total}")));
    }
    if warmup > total {
        return Err(Error::invalid(format!("warmup {warmup} longer than total {total}")));
    }
    if step < warmup {
        return Ok(base * step as Float / warmup as Float);
    }
    if total == warmup {
        return Ok(base);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok((f64::from(base) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as Float)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
    /// Global gradient-norm clip; zero disables.
    pub clip_norm: Float,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with decay applied directly to the weights of parameters flagged
/// for decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient or marked frozen are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: Float) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads {
            let param = store.get_mut(*id);
            if !param.trainable {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (md, vd) = (m.data_mut(), v.data_mut());
            for ((mi, vi), &gi) in md.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let shrink = if param.decay { 1.0 - lr * c.weight_decay } else { 1.0 };
            let p = param.value.data_mut();
            for ((pi, &mi), &vi) in p.iter_mut().zip(md.iter()).zip(vd.iter()) {
                let step = (mi / bias1) / ((vi / bias2).sqrt() + c.eps);
                *pi = *pi * shrink - lr * step;
            }
        }
    }
}

/// Loss-construction switches for pre-training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct ObjectiveSettings {
    /// Reconstruction loss over masked pixels only.
    pub mir_masked_only: bool,
    /// Apply reconstruction and language losses to mismatched pairs too.
    pub include_negatives: bool,
}


#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss breakdown and summed gradients for a batch, without updating.
pub fn batch_gradients(
    model: &Mvlt,
    store: &ParamStore,
    batch: &PretrainBatch,
    settings: &ObjectiveSettings,
) -> Result<(LossBreakdown, Vec<(ParamId, Tensor)>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.len() as Float;
    let active = |s: &PretrainSample| s.matched || settings.include_negatives;
    let n_rec = batch.samples.iter().filter(|s| active(s)).count();
    let n_tok: usize = batch
        .samples
        .iter()
        .filter(|s| active(s))
        .map(|s| s.tokens.masked_positions.len())
        .sum();
    let w = model.config.weights;
    let per_sample: Vec<Result<([Float; 3], crate::autodiff::Gradients)>> = batch
        .samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::with_params(store);
            let pixels = settings.mir_masked_only.then(|| s.plan.pixel_mask());
            let view = SampleView {
                masked: &s.masked,
                original: &s.original,
                tokens: &s.tokens,
                matched: s.matched,
                mir_pixels: pixels.as_deref(),
            };
            let on = active(s);
            let terms = model.sample_terms(&mut g, &view, on, on)?;
            let mut raw = [0.0; 3];
            let mut loss = g.scale(terms.itm, w.itm / b);
            raw[1] = g.value(terms.itm).item();
            if let Some(mir) = terms.mir {
                raw[0] = g.value(mir).item();
                let scaled = g.scale(mir, w.mir / n_rec as Float);
                loss = g.add(loss, scaled)?;
            }
            if let Some((mlm, count)) = terms.mlm {
                raw[2] = g.value(mlm).item() * count as Float;
                let scaled = g.scale(mlm, w.mlm * count as Float / n_tok as Float);
                loss = g.add(loss, scaled)?;
            }
            Ok((raw, g.backward(loss)?))
        })
        .collect();

    let mut sums = [0.0 as Float; 3];
    let mut acc: Vec<Option<Tensor>> = vec![None; store.len()];
    for r in per_sample {
        let (raw, grads) = r?;
        for (s, v) in sums.iter_mut().zip(raw) {
            *s += v;
        }
        for (id, g) in grads.params() {
            match &mut acc[id.index()] {
                slot @ None => *slot = Some(g.clone()),
                Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, &x)| *a += x),
            }
        }
    }
    let mean = |s: Float, n: usize| if n > 0 { s / n as Float } else { 0.0 };
    let loss = total_loss(mean(sums[0], n_rec), sums[1] / b, mean(sums[2], n_tok), w)?;
    let grads = acc
        .into_iter()
        .zip(store.iter().map(|(id, _)| id))
        .filter_map(|(g, id)| g.map(|g| (id, g)))
        .collect();
    Ok((loss, grads))
}

/// Clips in place to `max_norm` (when positive) and returns the original
/// global norm.
pub fn clip_gradients(grads: &mut [(ParamId, Tensor)], max_norm: Float) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > f64::from(max_norm) {
        let s = (f64::from(max_norm) / norm) as Float;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Forward, backward and one optimizer update. Non-finite losses or
/// gradients abort before any parameter changes.
pub fn pretrain_step(
    model: &Mvlt,
    store: &mut ParamStore,
    batch: &PretrainBatch,
    optim: &mut AdamW,
    lr: Float,
    settings: &ObjectiveSettings,
) -> Result<StepReport> {
    let (loss, mut grads) = batch_gradients(model, store, batch, settings).map_err(|e| {
        if matches!(e, Error::NonFinite { .. }) {
            log::error!("step {} aborted: {e}", optim.step + 1);
        }
        e
    })?;
    let grad_norm = clip_gradients(&mut grads, optim.config.clip_norm);
    if !grad_norm.is_finite() {
        log::error!("step {} aborted: non-finite gradient norm", optim.step + 1);
        return Err(Error::NonFinite {
            term: "gradient",
            value: grad_norm,
        });
    }
    optim.update(store, &grads, lr);
    Ok(StepReport { loss, grad_norm })
}

/// Everything a pre-training run needs besides data and model.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub neg_prob: f64,
    pub masks: MaskSettings,
    pub optim: OptimConfig,
    pub objectives: ObjectiveSettings,
    pub seed: u64,
    /// Save a checkpoint every this many steps; zero saves only the final one.
    pub checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: Float,
    pub mir: Float,
    pub itm: Float,
    pub mlm: Float,
    pub total: Float,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Output locations and provenance text for a run.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    pub run_config: &'a str,
    pub vocab: &'a Vocab,
}

/// Runs `settings.steps` pre-training steps. With an output directory the
/// metrics CSV and checkpoints are written as training proceeds; a run of
/// zero steps writes the initial checkpoint.
pub fn pretrain(
    model: &Mvlt,
    store: &mut ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    settings: &PretrainSettings,
    out: Option<&RunOutput<'_>>,
) -> Result<Vec<StepRecord>> {
    let text_len = model.config.encoder.text_len;
    let mut optim = AdamW::new(settings.optim);
    let mut writer = match out {
        Some(o) => {
            let path = o.dir.join(METRICS_FILE);
            Some(csv::Writer::from_writer(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let save = |store: &ParamStore, name: &str| -> Result<Option<PathBuf>> {
        match out {
            None => Ok(None),
            Some(o) => {
                let dir = o.dir.join("checkpoints");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let path = dir.join(name);
                model.checkpoint(store, o.run_config, &o.vocab.to_text()).save(&path)?;
                Ok(Some(path))
            }
        }
    };
    let mut history = Vec::with_capacity(settings.steps);
    for s in 0..settings.steps {
        let step = s + 1;
        let lr = cosine_lr(step, settings.steps, settings.optim.lr, settings.warmup_steps)?;
        let mut rng = rng_for(settings.seed, "pretrain-batch", s as u64);
        let batch = make_pretrain_batch(
            dataset,
            vocab,
            text_len,
            settings.batch_size,
            &settings.masks,
            settings.neg_prob,
            &mut rng,
        )?;
        let report = pretrain_step(model, store, &batch, &mut optim, lr, &settings.objectives)?;
        let l = report.loss;
        let record = StepRecord {
            step,
            lr,
            mir: l.mir,
            itm: l.itm,
            mlm: l.mlm,
            total: l.total,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(record)?;
            w.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        log::debug!(
            "step {step} lr {lr:.3e} mir {:.4} itm {:.4} mlm {:.4} total {:.4}",
            l.mir,
            l.itm,
            l.mlm,
            l.total
        );
        history.push(record);
        if settings.checkpoint_every > 0 && step % settings.checkpoint_every == 0 && step < settings.steps {
            save(store, &format!("step_{step:06}.ckpt"))?;
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
    }
    save(store, FINAL_CHECKPOINT)?;
    Ok(history)
}

/// Training-distribution accuracies of the matching and language heads.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PretrainAccuracy {
    pub itm: f64,
    pub mlm: f64,
    pub itm_pairs: usize,
    pub mlm_tokens: usize,
}

/// Scores `batches` fresh masked batches: ITM is correct when the match
/// probability falls on the label's side of 0.5; MLM when the arg-max id
/// equals the original token at a masked position of a matched pair.
pub fn pretrain_accuracy(
    model: &Mvlt,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    settings: &PretrainSettings,
    batches: usize,
    seed: u64,
) -> Result<PretrainAccuracy> {
    let text_len = model.config.encoder.text_len;
    let mut samples = Vec::new();
    for i in 0..batches {
        let mut rng = rng_for(seed, "accuracy-batch", i as u64);
        let b = make_pretrain_batch(
            dataset,
            vocab,
            text_len,
            settings.batch_size,
            &settings.masks,
            settings.neg_prob,
            &mut rng,
        )?;
        samples.extend(b.samples);
    }
    let scored: Vec<Result<(bool, usize, usize)>> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::inference(store);
            let out = model.encode(&mut g, &s.masked, &s.tokens)?;
            let cls = out.cls(&mut g)?;
            let p = model.itm.match_probability(&mut g, cls)?;
            let itm_ok = (p > 0.5) == s.matched;
            let (mut hit, mut total) = (0, 0);
            if s.matched && !s.tokens.masked_positions.is_empty() {
                let text = *out.text.last().expect("stages");
                let logits = model.mlm.logits(&mut g, text, &s.tokens.masked_positions)?;
                let v = g.value(logits).data();
                for (row, label) in v.chunks(model.mlm.vocab_size).zip(s.tokens.mlm_targets()) {
                    total += 1;
                    hit += usize::from(argmax(row) == label);
                }
            }
            Ok((itm_ok, hit, total))
        })
        .collect();
    let (mut itm_hits, mut mlm_hits, mut mlm_total) = (0, 0, 0);
    for r in scored {
        let (ok, h, t) = r?;
        itm_hits += usize::from(ok);
        mlm_hits += h;
        mlm_total += t;
    }
    Ok(PretrainAccuracy {
        itm: itm_hits as f64 / samples.len().max(1) as f64,
        mlm: if mlm_total > 0 { mlm_hits as f64 / mlm_total as f64 } else { 0.0 },
        itm_pairs: samples.len(),
        mlm_tokens: mlm_total,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Float,
    pub warmup_steps: usize,
    pub optim: OptimConfig,
    /// Train only the recognition head.
    pub frozen_encoder: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub losses: Vec<Float>,
    pub train_accuracy: f64,
}

/// Attaches (if needed) and trains a recognition head on the `[CLS]`
/// embedding with cross-entropy, using unmasked inputs.
pub fn finetune_category(
    model: &mut Mvlt,
    store: &mut ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    gran: Granularity,
    settings: &FinetuneSettings,
) -> Result<FinetuneReport> {
    let n_classes = match gran {
        Granularity::Main => dataset.main_names.len(),
        Granularity::Sub => dataset.sub_names.len(),
    };
    let label = |p: usize| match gran {
        Granularity::Main => dataset.products[p].main,
        Granularity::Sub => dataset.products[p].sub,
    };
    if let Some(bad) = (0..dataset.len()).map(label).find(|&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {bad} outside {n_classes} classes")));
    }
    if model.head(gran).is_none() {
        model.attach_head(store, gran, n_classes, settings.seed)?;
    } else if model.head(gran).map(|h| store.get(h.weight).value.shape()[1]) != Some(n_classes) {
        return Err(Error::invalid(format!("existing {gran} head does not have {n_classes} outputs")));
    }
    let head_prefix = gran.head_name();
    if settings.frozen_encoder {
        store.set_trainable(|name| name.starts_with(head_prefix));
    }
    let result = finetune_loop(model, store, dataset, vocab, gran, settings, &label);
    store.set_trainable(|_| true);
    result
}

fn finetune_loop(
    model: &Mvlt,
    store: &mut ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    gran: Granularity,
    settings: &FinetuneSettings,
    label: &(dyn Fn(usize) -> usize + Sync),
) -> Result<FinetuneReport> {
    let text_len = model.config.encoder.text_len;
    let tokens: Vec<TokenSequence> = dataset.products.iter().map(|p| vocab.encode(&p.caption, text_len)).collect();
    let pairs = dataset.pairs();
    let mut optim = AdamW::new(settings.optim);
    let mut losses = Vec::with_capacity(settings.steps);
    for s in 0..settings.steps {
        let lr = cosine_lr(s + 1, settings.steps, settings.lr, settings.warmup_steps)?;
        let mut rng = rng_for(settings.seed, "finetune-batch", s as u64);
        let picks: Vec<(usize, usize)> = (0..settings.batch_size)
            .map(|_| pairs[rng.gen_range(0..pairs.len())])
            .collect();
        let b = picks.len() as Float;
        let results: Vec<Result<(Float, crate::autodiff::Gradients)>> = picks
            .par_iter()
            .map(|&(p, v)| {
                let mut g = Graph::with_params(store);
                let logits = model.category_logits(&mut g, gran, &dataset.products[p].images[v], &tokens[p])?;
                let ce = g.cross_entropy(logits, &[label(p)])?;
                let value = g.value(ce).item();
                let scaled = g.scale(ce, 1.0 / b);
                Ok((value, g.backward(scaled)?))
            })
            .collect();
        let mut total = 0.0;
        let mut acc: Vec<Option<Tensor>> = vec![None; store.len()];
        for r in results {
            let (v, grads) = r?;
            total += v;
            for (id, g) in grads.params() {
                match &mut acc[id.index()] {
                    slot @ None => *slot = Some(g.clone()),
                    Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, &x)| *a += x),
                }
            }
        }
        let loss = total / b;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                term: "recognition",
                value: f64::from(loss),
            });
        }
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        let mut grads: Vec<(ParamId, Tensor)> = acc
            .into_iter()
            .zip(ids)
            .filter_map(|(g, id)| g.map(|g| (id, g)))
            .collect();
        clip_gradients(&mut grads, optim.config.clip_norm);
        optim.update(store, &grads, lr);
        losses.push(loss);
    }
    let correct: usize = pairs
        .par_iter()
        .map(|&(p, v)| {
            model
                .classify(store, gran, &dataset.products[p].images[v], &tokens[p])
                .map(|c| usize::from(c == label(p)))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(FinetuneReport {
        losses,
        train_accuracy: correct as f64 / pairs.len().max(1) as f64,
    })
}
