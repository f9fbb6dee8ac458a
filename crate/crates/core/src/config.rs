//! Run configuration: every hyperparameter of a run in one flat TOML table.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{synthetic_dataset, Dataset, SyntheticSpec};
use crate::encoder::{EncoderConfig, StageConfig};
use crate::error::{Error, Result};
use crate::eval::{Aggregation, CandidateOptions, Direction, MigSettings, NegativePool};
use crate::heads::LossWeights;
use crate::model::{Granularity, ModelConfig};
use crate::tensor::Float;
use crate::text::Vocab;
use crate::train::{FinetuneSettings, MaskSettings, ObjectiveSettings, OptimConfig, PretrainSettings};
use crate::vision::MaskStyle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synth_products: usize,
    pub vocab_size: usize,

    pub image_size: usize,
    pub text_len: usize,
    pub stage_layers: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub stage_heads: Vec<usize>,
    pub mlp_ratios: Vec<usize>,
    pub pad_mask: bool,

    pub mask_style: MaskStyle,
    pub vision_mask_ratio: f64,
    pub text_mask_ratio: f64,
    pub patch: usize,
    pub alpha: usize,

    pub w_mir: Float,
    pub w_itm: Float,
    pub w_mlm: Float,
    pub mir_masked_only: bool,
    pub include_negatives: bool,

    pub steps: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    pub neg_prob: f64,
    pub lr: Float,
    pub beta1: Float,
    pub beta2: Float,
    pub eps: Float,
    pub weight_decay: Float,
    pub clip_norm: Float,
    pub checkpoint_every: usize,

    pub granularity: Granularity,
    pub finetune_steps: usize,
    pub finetune_batch_size: usize,
    pub finetune_lr: Float,
    pub frozen_encoder: bool,

    pub direction: Direction,
    pub n_neg: usize,
    pub negative_pool: NegativePool,
    pub aggregation: Aggregation,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_itm_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_mlm_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_recall_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_accuracy: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            manifest: None,
            synth_products: 64,
            vocab_size: 30522,
            image_size: 256,
            text_len: 128,
            stage_layers: vec![2, 2, 2, 2],
            stage_widths: vec![64, 128, 320, 512],
            stage_strides: vec![4, 2, 2, 2],
            sr_ratios: vec![8, 4, 2, 1],
            stage_heads: vec![1, 2, 5, 8],
            mlp_ratios: vec![8, 8, 4, 4],
            pad_mask: true,
            mask_style: MaskStyle::RandomGrid,
            vision_mask_ratio: 0.5,
            text_mask_ratio: 0.15,
            patch: 4,
            alpha: 4,
            w_mir: 10.0,
            w_itm: 1.0,
            w_mlm: 1.0,
            mir_masked_only: false,
            include_negatives: false,
            steps: 500,
            batch_size: 16,
            warmup_steps: None,
            neg_prob: 0.5,
            lr: 2.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            checkpoint_every: 0,
            granularity: Granularity::Main,
            finetune_steps: 200,
            finetune_batch_size: 16,
            finetune_lr: 1e-3,
            frozen_encoder: false,
            direction: Direction::Tir,
            n_neg: 100,
            negative_pool: NegativePool::SameSubCategory,
            aggregation: Aggregation::Pairs,
            min_itm_accuracy: None,
            min_mlm_accuracy: None,
            min_recall_at_1: None,
            min_accuracy: None,
        }
    }
}

/// `(key, default, description)` for every key, in file order.
pub const KEY_DOCS: &[(&str, &str, &str)] = &[
    ("seed", "2024", "root seed; every random stream derives from it"),
    ("manifest", "unset", "dataset manifest; unset generates the synthetic set"),
    ("synth_products", "64", "synthetic products when no manifest is given"),
    ("vocab_size", "30522", "vocabulary cap including the four reserved tokens"),
    ("image_size", "256", "square input side H = W"),
    ("text_len", "128", "caption length L including [CLS]"),
    ("stage_layers", "[2, 2, 2, 2]", "transformer layers per stage"),
    ("stage_widths", "[64, 128, 320, 512]", "stage widths D_k"),
    ("stage_strides", "[4, 2, 2, 2]", "patch-embedding stride (and kernel) per stage"),
    ("sr_ratios", "[8, 4, 2, 1]", "spatial-reduction ratio per stage"),
    ("stage_heads", "[1, 2, 5, 8]", "attention heads per stage"),
    ("mlp_ratios", "[8, 8, 4, 4]", "MLP expansion per stage"),
    ("pad_mask", "true", "exclude [PAD] keys from attention"),
    ("mask_style", "random-grid", "random-grid, grid, stroke or center"),
    ("vision_mask_ratio", "0.5", "r_v, fraction of masking units replaced"),
    ("text_mask_ratio", "0.15", "r_l, fraction of caption tokens selected"),
    ("patch", "4", "patch size P of the masking grid"),
    ("alpha", "4", "masking unit edge is alpha * P pixels"),
    ("w_mir", "10", "reconstruction loss weight"),
    ("w_itm", "1", "matching loss weight"),
    ("w_mlm", "1", "masked-language loss weight"),
    ("mir_masked_only", "false", "reconstruction loss over masked pixels only"),
    ("include_negatives", "false", "reconstruction and language losses on mismatched pairs too"),
    ("steps", "500", "pre-training steps"),
    ("batch_size", "16", "pre-training pairs per step"),
    ("warmup_steps", "2% of steps", "linear warm-up length"),
    ("neg_prob", "0.5", "probability a pair gets a mismatched caption"),
    ("lr", "0.0025", "AdamW base learning rate"),
    ("beta1", "0.9", "AdamW first-moment decay"),
    ("beta2", "0.999", "AdamW second-moment decay"),
    ("eps", "1e-8", "AdamW denominator epsilon"),
    ("weight_decay", "0.0001", "decoupled weight decay"),
    ("clip_norm", "1.0", "global gradient-norm clip; 0 disables"),
    ("checkpoint_every", "0", "intermediate checkpoint period; 0 keeps only the final one"),
    ("granularity", "main", "recognition head: main or sub"),
    ("finetune_steps", "200", "fine-tuning steps"),
    ("finetune_batch_size", "16", "fine-tuning pairs per step"),
    ("finetune_lr", "0.001", "fine-tuning base learning rate"),
    ("frozen_encoder", "false", "fine-tune only the recognition head"),
    ("direction", "tir", "retrieval direction: tir or itr"),
    ("n_neg", "100", "negatives per candidate set"),
    ("negative_pool", "same-sub-category", "same-sub-category or all-products"),
    ("aggregation", "pairs", "one candidate set per image (pairs) or per product (products)"),
    ("min_itm_accuracy", "unset", "pretrain fails with exit 3 below this ITM accuracy"),
    ("min_mlm_accuracy", "unset", "pretrain fails with exit 3 below this masked-token accuracy"),
    ("min_recall_at_1", "unset", "eval-retrieval fails with exit 3 below this R@1 (percent)"),
    ("min_accuracy", "unset", "finetune and eval-recognition fail with exit 3 below this accuracy"),
];

/// Parses a command-line value as a TOML value, falling back to a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// The toy configuration used by the desk-scale experiments.
    pub fn toy() -> Self {
        RunConfig {
            image_size: 32,
            text_len: 16,
            vocab_size: 1000,
            stage_widths: vec![8, 16, 24, 32],
            sr_ratios: vec![4, 2, 1, 1],
            stage_heads: vec![1, 2, 3, 4],
            mlp_ratios: vec![4, 4, 4, 4],
            alpha: 2,
            ..RunConfig::default()
        }
    }

    /// Parses `text`, applies `key=value` overrides, and validates.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for (key, _) in table.iter() {
            check_key(key)?;
        }
        for (key, value) in overrides {
            check_key(key)?;
            table.insert(key.clone(), parse_value(value));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let n = self.stage_widths.len();
        for (name, v) in [
            ("stage_layers", &self.stage_layers),
            ("stage_strides", &self.stage_strides),
            ("sr_ratios", &self.sr_ratios),
            ("stage_heads", &self.stage_heads),
            ("mlp_ratios", &self.mlp_ratios),
        ] {
            if v.len() != n {
                return bad(format!("{name} has {} entries but stage_widths has {n}", v.len()));
            }
        }
        self.encoder_config(self.vocab_size.max(5))?.validate()?;
        let unit = self.alpha * self.patch;
        if unit == 0 || !self.image_size.is_multiple_of(unit) {
            return bad(format!(
                "alpha {} with patch {} gives {unit}-pixel units, which do not tile a {}-pixel image",
                self.alpha, self.patch, self.image_size
            ));
        }
        for (name, r) in [
            ("vision_mask_ratio", self.vision_mask_ratio),
            ("text_mask_ratio", self.text_mask_ratio),
            ("neg_prob", self.neg_prob),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no room for content tokens", self.vocab_size));
        }
        if self.batch_size == 0 || self.finetune_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if let Some(w) = self.warmup_steps {
            if w > self.steps {
                return bad(format!("warmup_steps {w} exceeds steps {}", self.steps));
            }
        }
        if !(self.lr >= 0.0 && self.finetune_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if self.manifest.is_none() && self.synth_products < 2 {
            return bad(format!("synth_products {} is below the 2 needed for mismatched pairs", self.synth_products));
        }
        let capacity = SyntheticSpec::default().capacity();
        if self.manifest.is_none() && self.synth_products > capacity {
            return bad(format!("synth_products {} exceeds the {capacity} distinct synthetic products", self.synth_products));
        }
        if self.n_neg == 0 {
            return bad("n_neg must be positive".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self, vocab_size: usize) -> Result<EncoderConfig> {
        let stages = (0..self.stage_widths.len())
            .map(|k| {
                let get = |v: &[usize]| {
                    v.get(k)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("stage {} is missing a setting", k + 1)))
                };
                Ok(StageConfig {
                    layers: get(&self.stage_layers)?,
                    width: self.stage_widths[k],
                    kernel: get(&self.stage_strides)?,
                    stride: get(&self.stage_strides)?,
                    sr_ratio: get(&self.sr_ratios)?,
                    heads: get(&self.stage_heads)?,
                    mlp_ratio: get(&self.mlp_ratios)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderConfig {
            image_size: self.image_size,
            text_len: self.text_len,
            vocab_size,
            stages,
            pad_mask: self.pad_mask,
        })
    }

    /// Pre-training model; category heads are attached by fine-tuning.
    pub fn model_config(&self, vocab: &Vocab) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(self.encoder_config(vocab.len())?);
        cfg.weights = LossWeights {
            mir: self.w_mir,
            itm: self.w_itm,
            mlm: self.w_mlm,
        };
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.manifest {
            Some(path) => Dataset::load(path, self.image_size),
            None => synthetic_dataset(self.synth_products, self.image_size, &SyntheticSpec::default(), self.seed),
        }
    }

    pub fn vocab(&self, dataset: &Dataset) -> Result<Vocab> {
        Vocab::build(&dataset.captions(), self.vocab_size)
    }

    pub fn masks(&self) -> MaskSettings {
        MaskSettings {
            vision_ratio: self.vision_mask_ratio,
            text_ratio: self.text_mask_ratio,
            patch: self.patch,
            alpha: self.alpha,
            style: self.mask_style,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    /// Warm-up length, defaulting to 2% of the steps.
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 50)
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            steps: self.steps,
            batch_size: self.batch_size,
            warmup_steps: self.warmup(),
            neg_prob: self.neg_prob,
            masks: self.masks(),
            optim: self.optim(),
            objectives: ObjectiveSettings {
                mir_masked_only: self.mir_masked_only,
                include_negatives: self.include_negatives,
            },
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn finetune_settings(&self) -> FinetuneSettings {
        FinetuneSettings {
            steps: self.finetune_steps,
            batch_size: self.finetune_batch_size,
            lr: self.finetune_lr,
            warmup_steps: self.finetune_steps / 50,
            optim: OptimConfig {
                lr: self.finetune_lr,
                ..self.optim()
            },
            frozen_encoder: self.frozen_encoder,
            seed: self.seed,
        }
    }

    pub fn candidate_options(&self) -> CandidateOptions {
        CandidateOptions {
            direction: self.direction,
            n_neg: self.n_neg,
            pool: self.negative_pool,
            aggregation: self.aggregation,
        }
    }

    pub fn mig_settings(&self) -> MigSettings {
        MigSettings {
            ratio: self.vision_mask_ratio,
            patch: self.patch,
            alpha: self.alpha,
            style: self.mask_style,
            seed: self.seed,
        }
    }
}

fn check_key(key: &str) -> Result<()> {
    if KEY_DOCS.iter().any(|(k, ..)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config key `{key}`")))
    }
}

/// Key reference for `--help`.
pub fn key_help() -> String {
    let width = KEY_DOCS.iter().map(|(k, ..)| k.len()).max().unwrap_or(0);
    KEY_DOCS
        .iter()
        .map(|(k, d, doc)| format!("  {k:<width$}  {doc} [default: {d}]\n"))
        .collect()
}
