//! The full model: encoder, reconstruction decoder and task heads sharing
//! one parameter store.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{load_exact, Checkpoint};
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::heads::{loss_itm, loss_mir, ItmHead, LossWeights, MlmHead, ReconDecoder};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::rng::rng_for;
use crate::tensor::Float;
use crate::text::TokenSequence;
use crate::vision::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub weights: LossWeights,
    /// Recognition classes per granularity; zero means no head.
    #[serde(default)]
    pub main_classes: usize,
    #[serde(default)]
    pub sub_classes: usize,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        ModelConfig {
            encoder,
            weights: LossWeights::default(),
            main_classes: 0,
            sub_classes: 0,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Category granularity for recognition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Main,
    Sub,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Main => "main",
            Granularity::Sub => "sub",
        }
    }

    pub fn head_name(self) -> &'static str {
        match self {
            Granularity::Main => "head.main",
            Granularity::Sub => "head.sub",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(Granularity::Main),
            "sub" => Ok(Granularity::Sub),
            other => Err(Error::invalid(format!("granularity must be main or sub, got {other:?}"))),
        }
    }
}

/// Graph handles of one sample's objectives before batch weighting.
#[derive(Clone, Copy, Debug)]
pub struct SampleTerms {
    pub mir: Option<Var>,
    pub itm: Var,
    /// Mean cross-entropy over this sample's masked tokens and their count.
    pub mlm: Option<(Var, usize)>,
}

/// One pre-training example as seen by the model.
#[derive(Clone, Copy, Debug)]
pub struct SampleView<'a> {
    pub masked: &'a Image,
    pub original: &'a Image,
    pub tokens: &'a TokenSequence,
    pub matched: bool,
    /// Restrict reconstruction loss to these pixels.
    pub mir_pixels: Option<&'a [bool]>,
}

#[derive(Clone, Debug)]
pub struct Mvlt {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: ReconDecoder,
    pub itm: ItmHead,
    pub mlm: MlmHead,
    pub main_head: Option<Linear>,
    pub sub_head: Option<Linear>,
}

impl Mvlt {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init", 0);
        let enc = &config.encoder;
        let encoder = Encoder::new(enc, &mut store, &mut rng)?;
        let decoder = ReconDecoder::new(enc, &mut store, &mut rng)?;
        let width = *enc.widths().last().expect("validated");
        let itm = ItmHead::new(&mut store, width, &mut rng)?;
        let mlm = MlmHead::new(&mut store, width, enc.vocab_size, &mut rng)?;
        let mut model = Mvlt {
            config: config.clone(),
            encoder,
            decoder,
            itm,
            mlm,
            main_head: None,
            sub_head: None,
        };
        for (gran, n) in [(Granularity::Main, config.main_classes), (Granularity::Sub, config.sub_classes)] {
            if n > 0 {
                model.attach_head(&mut store, gran, n, seed)?;
            }
        }
        Ok((model, store))
    }

    /// Adds a fresh recognition head. Its initialisation draws from its own
    /// stream, so the backbone is unaffected.
    pub fn attach_head(&mut self, store: &mut ParamStore, gran: Granularity, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes < 2 {
            return Err(Error::invalid(format!("{gran} recognition needs at least 2 classes, got {n_classes}")));
        }
        if self.head(gran).is_some() {
            return Err(Error::invalid(format!("{gran} head already attached")));
        }
        let width = *self.config.encoder.widths().last().expect("validated");
        let mut rng = rng_for(seed, gran.head_name(), 0);
        let head = Linear::new(store, gran.head_name(), width, n_classes, &mut rng)?;
        match gran {
            Granularity::Main => {
                self.main_head = Some(head);
                self.config.main_classes = n_classes;
            }
            Granularity::Sub => {
                self.sub_head = Some(head);
                self.config.sub_classes = n_classes;
            }
        }
        Ok(())
    }

    pub fn head(&self, gran: Granularity) -> Option<&Linear> {
        match gran {
            Granularity::Main => self.main_head.as_ref(),
            Granularity::Sub => self.sub_head.as_ref(),
        }
    }

    pub fn encode(&self, g: &mut Graph<'_>, image: &Image, tokens: &TokenSequence) -> Result<EncoderOutput> {
        self.encoder.forward_image(g, image, &tokens.ids, &tokens.valid)
    }

    /// Builds the objectives of one sample. Reconstruction and masked
    /// language terms are skipped when their flags are off.
    pub fn sample_terms(&self, g: &mut Graph<'_>, s: &SampleView<'_>, with_mir: bool, with_mlm: bool) -> Result<SampleTerms> {
        let out = self.encode(g, s.masked, s.tokens)?;
        let cls = out.cls(g)?;
        let logits = self.itm.logits(g, cls)?;
        let itm = loss_itm(g, logits, &[if s.matched { 1.0 } else { 0.0 }])?;
        let mir = if with_mir {
            let recon = self.decoder.forward(g, &out.vision)?;
            let target = g.constant(s.original.to_tensor());
            Some(loss_mir(g, recon, target, s.mir_pixels)?)
        } else {
            None
        };
        let mlm = if with_mlm && !s.tokens.masked_positions.is_empty() {
            let text = *out.text.last().expect("at least one stage");
            let logits = self.mlm.logits(g, text, &s.tokens.masked_positions)?;
            let labels = s.tokens.mlm_targets();
            let n = labels.len();
            Some((g.cross_entropy(logits, &labels)?, n))
        } else {
            None
        };
        Ok(SampleTerms { mir, itm, mlm })
    }

    /// Recognition logits for one image-caption pair.
    pub fn category_logits(&self, g: &mut Graph<'_>, gran: Granularity, image: &Image, tokens: &TokenSequence) -> Result<Var> {
        let head = self
            .head(gran)
            .ok_or_else(|| Error::invalid(format!("model has no {gran} recognition head")))?;
        let out = self.encode(g, image, tokens)?;
        let cls = out.cls(g)?;
        head.forward(g, cls)
    }

    /// Matching probability of an image and caption.
    pub fn match_score(&self, store: &ParamStore, image: &Image, tokens: &TokenSequence) -> Result<Float> {
        let mut g = Graph::inference(store);
        let out = self.encode(&mut g, image, tokens)?;
        let cls = out.cls(&mut g)?;
        self.itm.match_probability(&mut g, cls)
    }

    /// Predicted class index.
    pub fn classify(&self, store: &ParamStore, gran: Granularity, image: &Image, tokens: &TokenSequence) -> Result<usize> {
        let mut g = Graph::inference(store);
        let logits = self.category_logits(&mut g, gran, image, tokens)?;
        let v = g.value(logits).data();
        Ok(argmax(v))
    }

    /// Reconstructed image from a (masked) input.
    pub fn reconstruct(&self, store: &ParamStore, image: &Image, tokens: &TokenSequence) -> Result<Image> {
        let mut g = Graph::inference(store);
        let out = self.encode(&mut g, image, tokens)?;
        let recon = self.decoder.forward(&mut g, &out.vision)?;
        Image::from_tensor(g.value(recon))
    }

    /// Checkpoint carrying the model description plus optional run
    /// configuration and vocabulary text.
    pub fn checkpoint(&self, store: &ParamStore, run: &str, vocab: &str) -> Checkpoint {
        let header = CheckpointHeader {
            model: self.config.clone(),
            run: run.to_string(),
            vocab: vocab.to_string(),
        };
        Checkpoint::from_store(header.to_toml(), store)
    }

    /// Rebuilds the model described by a checkpoint header and loads every
    /// parameter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamStore, CheckpointHeader)> {
        let header = CheckpointHeader::parse(&ckpt.header)?;
        let (model, mut store) = Mvlt::new(&header.model, 0)?;
        load_exact(&mut store, ckpt)?;
        Ok((model, store, header))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Run configuration as TOML text.
    #[serde(default)]
    pub run: String,
    /// Vocabulary file contents.
    #[serde(default)]
    pub vocab: String,
}

impl CheckpointHeader {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("header serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[Float]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
