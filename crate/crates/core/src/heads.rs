//! Pre-training objectives: image reconstruction through a U-Net decoder,
//! image-text matching and masked language modelling, plus the weighted
//! total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{grid_to_seq, seq_to_grid, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Float;

/// One up-path level: two pointwise convolutions over the channel-wise
/// concatenation of the upsampled coarser map and the skip connection.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub fuse: Linear,
    pub refine: Linear,
}

/// Four-level U-Net over the pyramid vision embeddings.
#[derive(Clone, Debug)]
pub struct ReconDecoder {
    /// Ordered from the coarsest skip (stage `n−1`) to stage 1.
    pub blocks: Vec<DecoderBlock>,
    pub to_pixels: Linear,
    pub patch: usize,
    pub image_size: usize,
    widths: Vec<usize>,
    grids: Vec<usize>,
}

impl ReconDecoder {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if let Some((k, _)) = config.stages.iter().enumerate().skip(1).find(|(_, s)| s.stride != 2) {
            return Err(Error::Config(format!(
                "the reconstruction decoder needs stride 2 after stage 1, stage {} has {}",
                k + 1,
                config.stages[k].stride
            )));
        }
        let widths = config.widths();
        let n = widths.len();
        let mut blocks = Vec::with_capacity(n - 1);
        for k in (0..n - 1).rev() {
            let name = format!("decoder.up{}", k + 1);
            blocks.push(DecoderBlock {
                fuse: Linear::new(store, &format!("{name}.fuse"), widths[k + 1] + widths[k], widths[k], rng)?,
                refine: Linear::new(store, &format!("{name}.refine"), widths[k], widths[k], rng)?,
            });
        }
        let patch = config.stages[0].stride;
        let to_pixels = Linear::new(store, "decoder.to_pixels", widths[0], 3 * patch * patch, rng)?;
        Ok(ReconDecoder {
            blocks,
            to_pixels,
            patch,
            image_size: config.image_size,
            widths,
            grids: (0..n).map(|k| config.grid(k)).collect(),
        })
    }

    /// Reconstruction `I'` in `[0, 1]`, shape `3×H×W`, from the vision grids
    /// `V^1 … V^n`.
    pub fn forward(&self, g: &mut Graph<'_>, vision: &[Var]) -> Result<Var> {
        if vision.len() != self.widths.len() {
            return Err(Error::shape(format!(
                "decoder expects {} vision maps, got {}",
                self.widths.len(),
                vision.len()
            )));
        }
        for (k, &v) in vision.iter().enumerate() {
            let expected = [self.widths[k], self.grids[k], self.grids[k]];
            if g.shape(v) != expected {
                return Err(Error::shape(format!(
                    "vision map {} is {:?}, expected {expected:?}",
                    k + 1,
                    g.shape(v)
                )));
            }
        }
        let n = vision.len();
        let mut cur = vision[n - 1];
        for (block, k) in self.blocks.iter().zip((0..n - 1).rev()) {
            let up = g.upsample2x(cur)?;
            let cat = g.concat(&[up, vision[k]])?;
            let seq = grid_to_seq(g, cat)?;
            let h = block.fuse.forward(g, seq)?;
            let h = g.gelu(h);
            let h = block.refine.forward(g, h)?;
            let h = g.gelu(h);
            cur = seq_to_grid(g, h, self.grids[k], self.grids[k])?;
        }
        let seq = grid_to_seq(g, cur)?;
        let pix = self.to_pixels.forward(g, seq)?;
        let size = self.image_size;
        let img = g.unpatchify(pix, 3, size, size, self.patch)?;
        Ok(g.sigmoid(img))
    }
}

/// Smooth-l1 reconstruction loss averaged over every pixel and channel, or
/// over the pixels flagged in `only` (one flag per pixel, shared by the
/// channels).
pub fn loss_mir(g: &mut Graph<'_>, recon: Var, target: Var, only: Option<&[bool]>) -> Result<Var> {
    let weights = match only {
        None => None,
        Some(mask) => {
            let numel = g.value(recon).numel();
            if mask.is_empty() || !numel.is_multiple_of(mask.len()) {
                return Err(Error::shape(format!(
                    "{} pixel flags for a {:?} image",
                    mask.len(),
                    g.shape(recon)
                )));
            }
            let channels = numel / mask.len();
            let w: Vec<Float> = (0..channels)
                .flat_map(|_| mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
                .collect();
            Some(w)
        }
    };
    g.smooth_l1(recon, target, weights)
}

/// Two-way classifier on the `[CLS]` embedding.
#[derive(Clone, Debug)]
pub struct ItmHead {
    pub fc: Linear,
}

impl ItmHead {
    pub fn new(store: &mut ParamStore, width: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ItmHead {
            fc: Linear::new(store, "head.itm", width, 2, rng)?,
        })
    }

    /// `n×2` logits from `n×D` `[CLS]` rows.
    pub fn logits(&self, g: &mut Graph<'_>, cls: Var) -> Result<Var> {
        self.fc.forward(g, cls)
    }

    /// Probability that the pair matches.
    pub fn match_probability(&self, g: &mut Graph<'_>, cls: Var) -> Result<Float> {
        let logits = self.logits(g, cls)?;
        let v = g.value(logits).data();
        let (a, b) = (v[0], v[1]);
        Ok(1.0 / (1.0 + (a - b).exp()))
    }
}

pub fn loss_itm(g: &mut Graph<'_>, logits: Var, labels: &[Float]) -> Result<Var> {
    g.binary_cross_entropy(logits, labels)
}

/// Shared vocabulary projection applied at masked positions.
#[derive(Clone, Debug)]
pub struct MlmHead {
    pub fc: Linear,
    pub vocab_size: usize,
}

impl MlmHead {
    pub fn new(store: &mut ParamStore, width: usize, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        Ok(MlmHead {
            fc: Linear::new(store, "head.mlm", width, vocab_size, rng)?,
            vocab_size,
        })
    }

    /// `|positions|×|V|` logits gathered from the language rows.
    pub fn logits(&self, g: &mut Graph<'_>, text: Var, positions: &[usize]) -> Result<Var> {
        let rows = g.gather_rows(text, positions)?;
        self.fc.forward(g, rows)
    }
}

/// Mean cross-entropy over masked positions; zero when nothing is masked.
pub fn loss_mlm(g: &mut Graph<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Objective weights `(w1, w2, w3)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mir: Float,
    pub itm: Float,
    pub mlm: Float,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mir: 10.0,
            itm: 1.0,
            mlm: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mir: Float,
    pub itm: Float,
    pub mlm: Float,
    pub total: Float,
}

/// Weighted sum of the three objectives. Errors name the first non-finite
/// term.
pub fn total_loss(mir: Float, itm: Float, mlm: Float, w: LossWeights) -> Result<LossBreakdown> {
    for (term, value) in [("mir", mir), ("itm", itm), ("mlm", mlm)] {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term,
                value: value as f64,
            });
        }
    }
    let total = w.mir * mir + w.itm * itm + w.mlm * mlm;
    if !total.is_finite() {
        return Err(Error::NonFinite {
            term: "total",
            value: total as f64,
        });
    }
    Ok(LossBreakdown { mir, itm, mlm, total })
}
