//! Four-stage pyramid vision-language encoder.
//!
//! Stage `k` embeds the language input (token ids at stage 1, the previous
//! stage's language output otherwise) and the vision input (the masked image
//! at stage 1, the previous vision grid otherwise) to width `D_k`, adds
//! learned position matrices, concatenates `[language; vision]` and runs
//! `M_k` pre-norm transformer layers whose attention reduces the vision keys
//! and values spatially. The output is split back at position `L`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionMask, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{grid_to_seq, seq_to_grid, LayerNorm, Linear, Mlp, PatchConv};
use crate::params::{uniform, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};
use crate::vision::Image;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Transformer layers `M_k`.
    pub layers: usize,
    /// Hidden width `D_k`.
    pub width: usize,
    /// Patch-embedding kernel `K_k`; equals the stride.
    pub kernel: usize,
    /// Patch-embedding stride `S_k`.
    pub stride: usize,
    /// Spatial reduction of attention keys/values over the vision part.
    pub sr_ratio: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub stages: Vec<StageConfig>,
    /// Block attention to `[PAD]` language keys.
    pub pad_mask: bool,
}

impl EncoderConfig {
    /// Full-size hyper-parameters: widths 64/128/320/512, cumulative
    /// reductions 4/8/16/32, two layers per stage, 256×256 images and
    /// 128-token captions.
    pub fn full(vocab_size: usize) -> Self {
        let stage = |width, stride, sr_ratio, heads, mlp_ratio| StageConfig {
            layers: 2,
            width,
            kernel: stride,
            stride,
            sr_ratio,
            heads,
            mlp_ratio,
        };
        EncoderConfig {
            image_size: 256,
            text_len: 128,
            vocab_size,
            stages: vec![
                stage(64, 4, 8, 1, 8),
                stage(128, 2, 4, 2, 8),
                stage(320, 2, 2, 5, 4),
                stage(512, 2, 1, 8, 4),
            ],
            pad_mask: true,
        }
    }

    /// Desk-scale configuration: 32×32 images, 16-token captions, widths
    /// 8/16/24/32.
    pub fn toy(vocab_size: usize) -> Self {
        let stage = |width, stride, sr_ratio, heads| StageConfig {
            layers: 2,
            width,
            kernel: stride,
            stride,
            sr_ratio,
            heads,
            mlp_ratio: 4,
        };
        EncoderConfig {
            image_size: 32,
            text_len: 16,
            vocab_size,
            stages: vec![
                stage(8, 4, 4, 1),
                stage(16, 2, 2, 2),
                stage(24, 2, 1, 3),
                stage(32, 2, 1, 4),
            ],
            pad_mask: true,
        }
    }

    /// Cumulative vision reduction `R_k` after each stage.
    pub fn reductions(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(1, |r, s| {
                *r *= s.stride;
                Some(*r)
            })
            .collect()
    }

    /// Vision grid side after stage `k` (0-based).
    pub fn grid(&self, k: usize) -> usize {
        self.image_size / self.reductions()[k]
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        if self.text_len < 1 {
            return bad("text length must leave room for [CLS]".into());
        }
        if self.vocab_size < 5 {
            return bad(format!("vocabulary size {} too small", self.vocab_size));
        }
        let mut side = self.image_size;
        for (k, s) in self.stages.iter().enumerate() {
            let n = k + 1;
            if s.kernel != s.stride || s.stride == 0 {
                return bad(format!("stage {n}: kernel {} must equal stride {}", s.kernel, s.stride));
            }
            if !side.is_multiple_of(s.stride) {
                return bad(format!("stage {n}: grid {side} not divisible by stride {}", s.stride));
            }
            side /= s.stride;
            if s.sr_ratio == 0 || !side.is_multiple_of(s.sr_ratio) {
                return bad(format!(
                    "stage {n}: grid {side} not divisible by reduction ratio {}",
                    s.sr_ratio
                ));
            }
            if s.heads == 0 || s.width % s.heads != 0 {
                return bad(format!("stage {n}: {} heads do not divide width {}", s.heads, s.width));
            }
            if s.mlp_ratio == 0 {
                return bad(format!("stage {n}: mlp ratio must be positive"));
            }
        }
        Ok(())
    }
}

const POS_INIT: Float = 0.02;

/// Spatial-reduction attention: queries cover the whole concatenated
/// sequence; keys and values keep the language rows and a strided-conv
/// reduction of the vision grid.
#[derive(Clone, Debug)]
pub struct ReducedAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub reduce: Option<(PatchConv, LayerNorm)>,
    pub heads: usize,
}

impl ReducedAttention {
    fn new(store: &mut ParamStore, name: &str, s: &StageConfig, rng: &mut Rng) -> Result<Self> {
        let d = s.width;
        let reduce = if s.sr_ratio > 1 {
            Some((
                PatchConv::new(store, &format!("{name}.sr"), d, d, s.sr_ratio, rng)?,
                LayerNorm::new(store, &format!("{name}.sr_norm"), d)?,
            ))
        } else {
            None
        };
        Ok(ReducedAttention {
            query: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, rng)?,
            reduce,
            heads: s.heads,
        })
    }

    /// Key/value source rows and the key-padding mask that goes with them.
    fn key_source(&self, g: &mut Graph<'_>, x: Var, ctx: &LayerContext<'_>) -> Result<(Var, Option<AttentionMask>)> {
        let n = g.shape(x)[0];
        let (src, vision_keys) = match &self.reduce {
            None => (x, n - ctx.text_len),
            Some((conv, norm)) => {
                let text = g.slice_rows(x, 0, ctx.text_len)?;
                let vision = g.slice_rows(x, ctx.text_len, n)?;
                let grid = seq_to_grid(g, vision, ctx.grid, ctx.grid)?;
                let reduced = conv.forward(g, grid)?;
                let reduced = norm.forward(g, reduced)?;
                let keys = g.shape(reduced)[0];
                (g.concat(&[text, reduced])?, keys)
            }
        };
        let mask = ctx.text_valid.map(|valid| {
            let mut key_valid = valid.to_vec();
            key_valid.resize(ctx.text_len + vision_keys, true);
            AttentionMask::key_padding(n, &key_valid)
        });
        Ok((src, mask))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &LayerContext<'_>) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let (src, mask) = self.key_source(g, x, ctx)?;
        let k = self.key.forward(g, src)?;
        let v = self.value.forward(g, src)?;
        let a = g.attention(q, k, v, mask.as_ref(), self.heads)?;
        self.out.forward(g, a)
    }

    /// Attention probabilities (`heads × n × n_kv`) for inspection.
    pub fn weights(&self, g: &mut Graph<'_>, x: Var, ctx: &LayerContext<'_>) -> Result<Tensor> {
        let q = self.query.forward(g, x)?;
        let (src, mask) = self.key_source(g, x, ctx)?;
        let k = self.key.forward(g, src)?;
        g.attention_weights(q, k, mask.as_ref(), self.heads)
    }
}

/// Per-stage facts a layer needs besides its input.
pub struct LayerContext<'a> {
    pub text_len: usize,
    /// Side of the square vision grid.
    pub grid: usize,
    /// Validity flags of the language rows when padding is masked.
    pub text_valid: Option<&'a [bool]>,
}

/// Pre-norm transformer layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: ReducedAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, s: &StageConfig, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), s.width)?,
            attn: ReducedAttention::new(store, &format!("{name}.attn"), s, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), s.width)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), s.width, s.width * s.mlp_ratio, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, ctx: &LayerContext<'_>) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, ctx)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub enum TextEmbed {
    /// Token-id lookup table `|V|×D_1`.
    Table(ParamId),
    /// Projection from the previous stage width.
    Project(Linear),
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub config: StageConfig,
    pub text_embed: TextEmbed,
    pub text_pos: ParamId,
    pub patch_embed: PatchConv,
    pub patch_norm: LayerNorm,
    pub vision_pos: ParamId,
    pub layers: Vec<EncoderLayer>,
    /// Applied after the last layer; absent when the stage has no layers.
    pub norm: Option<LayerNorm>,
    /// Vision grid side produced by this stage.
    pub grid: usize,
}

/// Language input of a stage.
#[derive(Clone, Copy, Debug)]
pub enum TextInput<'a> {
    Ids(&'a [usize]),
    Hidden(Var),
}

/// Outputs of every stage. `vision[k]` is a `D_k×h_k×w_k` grid and
/// `vision_seq[k]` the same values as `h_k·w_k` rows.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub text: Vec<Var>,
    pub vision: Vec<Var>,
    pub vision_seq: Vec<Var>,
}

impl EncoderOutput {
    /// `[CLS]` row of the last language output.
    pub fn cls(&self, g: &mut Graph<'_>) -> Result<Var> {
        let last = *self.text.last().expect("at least one stage");
        g.slice_rows(last, 0, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev_width = 3;
        let mut side = config.image_size;
        for (k, s) in config.stages.iter().enumerate() {
            let name = format!("stage{}", k + 1);
            let d = s.width;
            let text_embed = if k == 0 {
                let bound = 1.0 / (d as Float).sqrt();
                TextEmbed::Table(store.add(
                    format!("{name}.token_embed"),
                    uniform(rng, &[config.vocab_size, d], bound),
                    true,
                )?)
            } else {
                TextEmbed::Project(Linear::new(store, &format!("{name}.text_embed"), prev_width, d, rng)?)
            };
            let text_pos = store.add(format!("{name}.text_pos"), uniform(rng, &[config.text_len, d], POS_INIT), false)?;
            let patch_embed = PatchConv::new(store, &format!("{name}.patch_embed"), prev_width, d, s.stride, rng)?;
            let patch_norm = LayerNorm::new(store, &format!("{name}.patch_norm"), d)?;
            side /= s.stride;
            let vision_pos = store.add(format!("{name}.vision_pos"), uniform(rng, &[side * side, d], POS_INIT), false)?;
            let layers = (0..s.layers)
                .map(|j| EncoderLayer::new(store, &format!("{name}.layer{j}"), s, rng))
                .collect::<Result<_>>()?;
            let norm = if s.layers > 0 {
                Some(LayerNorm::new(store, &format!("{name}.norm"), d)?)
            } else {
                None
            };
            stages.push(Stage {
                config: s.clone(),
                text_embed,
                text_pos,
                patch_embed,
                patch_norm,
                vision_pos,
                layers,
                norm,
                grid: side,
            });
            prev_width = d;
        }
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    /// Language embedding `m^k`: `L×D_k`.
    pub fn embed_language(&self, g: &mut Graph<'_>, k: usize, input: TextInput<'_>) -> Result<Var> {
        let stage = &self.stages[k];
        let m = match (&stage.text_embed, input) {
            (TextEmbed::Table(table), TextInput::Ids(ids)) => {
                if ids.len() != self.config.text_len {
                    return Err(Error::shape(format!(
                        "{} token ids for text length {}",
                        ids.len(),
                        self.config.text_len
                    )));
                }
                let t = g.param(*table);
                g.embedding(t, ids)?
            }
            (TextEmbed::Project(lin), TextInput::Hidden(prev)) => {
                let expected = [self.config.text_len, self.config.stages[k - 1].width];
                if g.shape(prev) != expected {
                    return Err(Error::shape(format!(
                        "stage {} language input {:?}, expected {expected:?}",
                        k + 1,
                        g.shape(prev)
                    )));
                }
                lin.forward(g, prev)?
            }
            _ => {
                return Err(Error::invalid(format!(
                    "stage {} takes {} as language input",
                    k + 1,
                    if k == 0 { "token ids" } else { "hidden states" }
                )))
            }
        };
        let pos = g.param(stage.text_pos);
        g.add(m, pos)
    }

    /// Vision embedding `n^k`: `(h_k·w_k)×D_k` from a `C×H×W` input.
    pub fn embed_vision(&self, g: &mut Graph<'_>, k: usize, input: Var) -> Result<Var> {
        let stage = &self.stages[k];
        let seq = stage.patch_embed.forward(g, input)?;
        let seq = stage.patch_norm.forward(g, seq)?;
        let pos = g.param(stage.vision_pos);
        if g.shape(seq) != g.shape(pos) {
            return Err(Error::shape(format!(
                "stage {} vision embedding {:?} does not match position matrix {:?}",
                k + 1,
                g.shape(seq),
                g.shape(pos)
            )));
        }
        g.add(seq, pos)
    }

    /// Runs the transformer layers of stage `k` over `[m; n]` and splits the
    /// result into language rows and the vision sequence.
    pub fn encode_stage(
        &self,
        g: &mut Graph<'_>,
        k: usize,
        m: Var,
        n: Var,
        text_valid: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let stage = &self.stages[k];
        let d = stage.config.width;
        if g.shape(m)[1] != d || g.shape(n)[1] != d {
            return Err(Error::shape(format!(
                "stage {} expects width {d}, got {:?} and {:?}",
                k + 1,
                g.shape(m),
                g.shape(n)
            )));
        }
        let text_len = g.shape(m)[0];
        let mut z = g.concat(&[m, n])?;
        let ctx = LayerContext {
            text_len,
            grid: stage.grid,
            text_valid: text_valid.filter(|_| self.config.pad_mask),
        };
        for layer in &stage.layers {
            z = layer.forward(g, z, &ctx)?;
        }
        if let Some(norm) = &stage.norm {
            z = norm.forward(g, z)?;
        }
        let total = g.shape(z)[0];
        let text = g.slice_rows(z, 0, text_len)?;
        let vision = g.slice_rows(z, text_len, total)?;
        Ok((text, vision))
    }

    /// Full forward pass. `ids` and `text_valid` have length `L`.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var, ids: &[usize], text_valid: &[bool]) -> Result<EncoderOutput> {
        let size = self.config.image_size;
        if g.shape(image) != [3, size, size] {
            return Err(Error::shape(format!(
                "image {:?} does not match configured 3x{size}x{size}",
                g.shape(image)
            )));
        }
        if text_valid.len() != self.config.text_len {
            return Err(Error::shape(format!(
                "{} validity flags for text length {}",
                text_valid.len(),
                self.config.text_len
            )));
        }
        let mut out = EncoderOutput {
            text: Vec::new(),
            vision: Vec::new(),
            vision_seq: Vec::new(),
        };
        let mut vision_in = image;
        for k in 0..self.stages.len() {
            let text_in = match out.text.last() {
                None => TextInput::Ids(ids),
                Some(&t) => TextInput::Hidden(t),
            };
            let m = self.embed_language(g, k, text_in)?;
            let n = self.embed_vision(g, k, vision_in)?;
            let (t, v) = self.encode_stage(g, k, m, n, Some(text_valid))?;
            let grid = self.stages[k].grid;
            let v_grid = seq_to_grid(g, v, grid, grid)?;
            out.text.push(t);
            out.vision.push(v_grid);
            out.vision_seq.push(v);
            vision_in = v_grid;
        }
        Ok(out)
    }

    /// Convenience wrapper placing an image on the graph first.
    pub fn forward_image(&self, g: &mut Graph<'_>, image: &Image, ids: &[usize], text_valid: &[bool]) -> Result<EncoderOutput> {
        let x = g.constant(image.to_tensor());
        self.forward(g, x, ids, text_valid)
    }

    /// Attention probabilities of layer `j` of stage `k` given that layer's
    /// input.
    pub fn layer_attention(&self, g: &mut Graph<'_>, k: usize, j: usize, z: Var, text_valid: Option<&[bool]>) -> Result<Tensor> {
        let stage = &self.stages[k];
        let ctx = LayerContext {
            text_len: self.config.text_len,
            grid: stage.grid,
            text_valid: text_valid.filter(|_| self.config.pad_mask),
        };
        let layer = &stage.layers[j];
        let h = layer.norm1.forward(g, z)?;
        layer.attn.weights(g, h, &ctx)
    }
}

/// `D×h×w` view of a vision sequence for callers holding only rows.
pub fn vision_grid(g: &mut Graph<'_>, seq: Var, side: usize) -> Result<Var> {
    seq_to_grid(g, seq, side, side)
}

/// Rows of a vision grid.
pub fn vision_rows(g: &mut Graph<'_>, grid: Var) -> Result<Var> {
    grid_to_seq(g, grid)
}
