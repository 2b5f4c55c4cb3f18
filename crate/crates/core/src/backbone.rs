//! Cross-scale BEV backbone with attention gating, and the detection and
//! planning headers on top of it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionMask, AttentionVars, UNetScorer};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ConvGeom, Deconv2d, Graph, ParamStore, Padding, Real, Tensor, Var};
use crate::scene::{FEATURE_STRIDE, FUTURE_STEPS, INPUT_CHANNELS, REG_CHANNELS};
use crate::sparse::{mask_to_blocks, BlockIndex, CrossScaleBlock, FlopReport, LayerFlops};

/// Version tag accepted by [`BackboneConfig::from_toml`].
pub const CONFIG_VERSION: u32 = 1;

/// Every width, depth and scale of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub version: u32,
    pub input_channels: usize,
    /// Widths of the two stride-2 stem convolutions.
    pub stem_widths: [usize; 2],
    /// Feature width at 1/4 resolution.
    pub channels: usize,
    /// Number of cross-scale blocks.
    pub depth: usize,
    /// Downsampling factor of each of the three branches.
    pub branch_scales: [usize; 3],
    pub branch_widths: [usize; 3],
    /// Blocks run ungated before attention is computed from their output;
    /// 0 taps the stem.
    pub attention_tap: usize,
    pub unet_encoder: [usize; 3],
    pub unet_decoder: [usize; 2],
    pub header_width: usize,
    /// Side of a sparse execution block in feature cells.
    pub block_size: usize,
    /// Wrap-around padding everywhere; only for equivariance checks.
    #[serde(default)]
    pub circular_padding: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            version: CONFIG_VERSION,
            input_channels: INPUT_CHANNELS,
            stem_widths: [16, 64],
            channels: 128,
            depth: 3,
            branch_scales: [1, 2, 4],
            branch_widths: [64, 96, 128],
            attention_tap: 0,
            unet_encoder: [32, 64, 128],
            unet_decoder: [32, 16],
            header_width: 64,
            block_size: 4,
            circular_padding: false,
        }
    }
}

impl BackboneConfig {
    /// A compact model for tests and quick experiments.
    pub fn tiny() -> Self {
        BackboneConfig {
            stem_widths: [8, 16],
            channels: 16,
            depth: 2,
            branch_widths: [8, 12, 16],
            unet_encoder: [8, 12, 16],
            unet_decoder: [8, 8],
            header_width: 16,
            ..Self::default()
        }
    }

    /// All channel counts multiplied by `factor` (at least 1), input kept.
    pub fn scale_width(&self, factor: f64) -> Self {
        let s = |c: usize| ((c as f64 * factor).round() as usize).max(1);
        BackboneConfig {
            stem_widths: self.stem_widths.map(s),
            channels: s(self.channels),
            branch_widths: self.branch_widths.map(s),
            unet_encoder: self.unet_encoder.map(s),
            unet_decoder: self.unet_decoder.map(s),
            header_width: s(self.header_width),
            ..self.clone()
        }
    }

    pub fn with_depth(&self, depth: usize) -> Self {
        BackboneConfig { depth, attention_tap: self.attention_tap.min(depth), ..self.clone() }
    }

    pub fn padding(&self) -> Padding {
        if self.circular_padding {
            Padding::Circular
        } else {
            Padding::Zero
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported model config version {}", self.version));
        }
        let widths = [self.input_channels, self.channels, self.header_width]
            .into_iter()
            .chain(self.stem_widths)
            .chain(self.branch_widths)
            .chain(self.unet_encoder)
            .chain(self.unet_decoder);
        if widths.into_iter().any(|c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.branch_scales.iter().any(|&s| s == 0 || self.block_size % s != 0) {
            return bad(format!("branch scales {:?} must divide block size {}", self.branch_scales, self.block_size));
        }
        if self.attention_tap > self.depth {
            return bad(format!("attention tap {} beyond depth {}", self.attention_tap, self.depth));
        }
        if self.header_width < 2 {
            return bad("header width must be at least 2".into());
        }
        Ok(())
    }

    /// Feature grid of an `h x w` input, checking divisibility.
    pub fn feature_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let unit = FEATURE_STRIDE * self.block_size;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::shape("backbone", format!("input {h}x{w} must be divisible by {unit}")));
        }
        Ok((h / FEATURE_STRIDE, w / FEATURE_STRIDE))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// How the gated blocks see the attention mask.
#[derive(Clone, Copy, Debug)]
pub enum Gate<'a, T: Real> {
    /// Plain residual blocks.
    None,
    /// A fixed mask at feature resolution.
    Fixed(&'a AttentionMask),
    /// Mask predicted by the scorer, optionally Gumbel-perturbed.
    Learned { noise: Option<(&'a Tensor<T>, &'a Tensor<T>)>, temperature: f64 },
}

/// Whether gated blocks run on the full grid or on gathered blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Dense,
    #[default]
    Sparse,
}

/// Everything a forward pass records.
pub struct ModelOutput {
    /// `[1, channels, h/4, w/4]`.
    pub features: Var,
    /// Scorer logits `z` when the gate is learned.
    pub logits: Option<Var>,
    pub attention: Option<AttentionVars>,
    /// Mask on the tape (forward value binary), when gated.
    pub mask_var: Option<Var>,
    pub mask: Option<AttentionMask>,
    pub blocks: Option<BlockIndex>,
    /// Detection scores in (0, 1), `[1, 1, h/4, w/4]`.
    pub scores: Var,
    /// Box deltas, `[1, 6 (T + 1), h/4, w/4]`.
    pub regression: Var,
    /// Cost volume `[1, T, h, w]`.
    pub cost: Var,
}

/// Stem, cross-scale blocks, attention scorer and both headers.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: BackboneConfig,
    stem: [Conv2d; 3],
    blocks: Vec<CrossScaleBlock>,
    pub scorer: UNetScorer,
    cls: [Conv2d; 2],
    reg: [Conv2d; 2],
    plan_conv: Conv2d,
    plan_up: [Deconv2d; 2],
}

impl Model {
    /// Registers all parameters in `store`, initialised from `seed`.
    pub fn new<T: Real>(config: &BackboneConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = config.padding();
        let g = |k, s, p| ConvGeom { mode: pad, ..ConvGeom::new(k, s, p) };
        let c = config.channels;
        let [w0, w1] = config.stem_widths;
        let stem = [
            Conv2d::new(store, &mut rng, "stem.0", config.input_channels, w0, g(3, 2, 1), true),
            Conv2d::new(store, &mut rng, "stem.1", w0, w1, g(3, 2, 1), true),
            Conv2d::new(store, &mut rng, "stem.2", w1, c, g(1, 1, 0), true),
        ];
        let blocks = (0..config.depth)
            .map(|i| {
                CrossScaleBlock::new(
                    store,
                    &mut rng,
                    &format!("block{i}"),
                    c,
                    &config.branch_scales,
                    &config.branch_widths,
                    pad,
                )
            })
            .collect();
        let scorer =
            UNetScorer::new(store, &mut rng, "attn", c, config.unet_encoder, config.unet_decoder, pad);
        let hw = config.header_width;
        let cls = [
            Conv2d::new(store, &mut rng, "det.cls.0", c, hw, g(3, 1, 1), true),
            Conv2d::new(store, &mut rng, "det.cls.1", hw, 1, g(1, 1, 0), true).zeroed(store),
        ];
        let reg = [
            Conv2d::new(store, &mut rng, "det.reg.0", c, hw, g(3, 1, 1), true),
            Conv2d::new(store, &mut rng, "det.reg.1", hw, REG_CHANNELS, g(1, 1, 0), true).zeroed(store),
        ];
        let plan_conv = Conv2d::new(store, &mut rng, "plan.0", c, hw, g(3, 1, 1), true);
        let up = g(4, 2, 1);
        let plan_up = [
            Deconv2d::new(store, &mut rng, "plan.up0", hw, hw / 2, up, true),
            Deconv2d::new(store, &mut rng, "plan.up1", hw / 2, FUTURE_STEPS, up, true),
        ];
        Ok(Model { config: config.clone(), stem, blocks, scorer, cls, reg, plan_conv, plan_up })
    }

    pub fn blocks(&self) -> &[CrossScaleBlock] {
        &self.blocks
    }

    fn stem<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4();
        if c != self.config.input_channels {
            return Err(Error::shape("backbone", format!("expected {} input channels, got {c}", self.config.input_channels)));
        }
        self.config.feature_dims(h, w)?;
        let mut y = x;
        for conv in &self.stem {
            y = conv.forward(g, p, y)?;
            y = g.relu(y);
        }
        Ok(y)
    }

    /// Features only; see [`forward`](Self::forward) for the return fields.
    pub fn backbone_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        gate: Gate<'_, T>,
        exec: Exec,
    ) -> Result<BackboneOutput> {
        let mut y = self.stem(g, p, x)?;
        let tap = self.config.attention_tap;
        for blk in &self.blocks[..tap] {
            y = blk.forward(g, p, y)?;
        }
        let [_, _, fh, fw] = g.value(y).dims4();
        let (logits, attention, mask_var, mask) = match gate {
            Gate::None => (None, None, None, None),
            Gate::Fixed(m) => {
                if (m.rows(), m.cols()) != (fh, fw) {
                    return Err(Error::shape("backbone", format!("mask {}x{} vs features {fh}x{fw}", m.rows(), m.cols())));
                }
                let v = g.constant(m.hard.cast());
                (None, None, Some(v), Some(m.clone()))
            }
            Gate::Learned { noise, temperature } => {
                let z = self.scorer.forward(g, p, y)?;
                let att = attend(g, z, noise, temperature)?;
                let (v, m) = (att.hard, att.mask.clone());
                (Some(z), Some(att), Some(v), Some(m))
            }
        };
        let blocks = match &mask {
            Some(m) => Some(mask_to_blocks(m, self.config.block_size, self.blocks.first().map_or(0, |b| b.halo()))?),
            None => None,
        };
        for blk in &self.blocks[tap..] {
            y = match (mask_var, &blocks, exec) {
                (Some(a), Some(idx), Exec::Sparse) => blk.forward_sparse(g, p, y, a, idx)?,
                (Some(a), Some(idx), Exec::Dense) => blk.forward_gated(g, p, y, a, idx)?,
                _ => blk.forward(g, p, y)?,
            };
        }
        Ok(BackboneOutput { features: y, logits, attention, mask_var, mask, blocks })
    }

    /// Score map in (0, 1) and box-delta map.
    pub fn detection_header<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<(Var, Var)> {
        let h = self.cls[0].forward(g, p, f)?;
        let h = g.relu(h);
        let s = self.cls[1].forward(g, p, h)?;
        let s = g.sigmoid(s);
        let h = self.reg[0].forward(g, p, f)?;
        let h = g.relu(h);
        let r = self.reg[1].forward(g, p, h)?;
        Ok((s, r))
    }

    /// Cost volume at input resolution.
    pub fn planning_header<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Result<Var> {
        let h = self.plan_conv.forward(g, p, f)?;
        let h = g.relu(h);
        let h = self.plan_up[0].forward(g, p, h)?;
        let h = g.relu(h);
        self.plan_up[1].forward(g, p, h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, gate: Gate<'_, T>, exec: Exec) -> Result<ModelOutput> {
        let b = self.backbone_forward(g, p, x, gate, exec)?;
        let (scores, regression) = self.detection_header(g, p, b.features)?;
        let cost = self.planning_header(g, p, b.features)?;
        Ok(ModelOutput {
            features: b.features,
            logits: b.logits,
            attention: b.attention,
            mask_var: b.mask_var,
            mask: b.mask,
            blocks: b.blocks,
            scores,
            regression,
            cost,
        })
    }

    /// Backbone FLOPs (stem, blocks, scorer) for an `h x w` input. Blocks
    /// after the attention tap are counted sparse under `mask`; the scorer
    /// is counted whenever a mask is given.
    pub fn flops(&self, h: usize, w: usize, mask: Option<&AttentionMask>) -> Result<FlopReport> {
        let (fh, fw) = self.config.feature_dims(h, w)?;
        let mut layers = Vec::new();
        let (mut sh, mut sw) = (h, w);
        for (i, conv) in self.stem.iter().enumerate() {
            layers.push(LayerFlops::ungated(format!("stem.{i}"), conv.flops(sh, sw)?));
            sh = conv.geom.conv_out(sh)?;
            sw = conv.geom.conv_out(sw)?;
        }
        let idx = match mask {
            Some(m) => {
                if (m.rows(), m.cols()) != (fh, fw) {
                    return Err(Error::shape("count_flops", format!("mask {}x{} vs features {fh}x{fw}", m.rows(), m.cols())));
                }
                Some(mask_to_blocks(m, self.config.block_size, self.blocks.first().map_or(0, |b| b.halo()))?)
            }
            None => None,
        };
        for (i, blk) in self.blocks.iter().enumerate() {
            let gated = if i < self.config.attention_tap { None } else { idx.as_ref() };
            let mut l = blk.flops(&format!("block{i}"), fh, fw, gated);
            if gated.is_none() {
                l.iter_mut().for_each(|l| l.gated = false);
            }
            layers.extend(l);
        }
        if mask.is_some() {
            for (name, f) in self.scorer.flops(fh, fw)? {
                layers.push(LayerFlops::ungated(name, f));
            }
        }
        let sparsity = mask.map_or(0.0, |m| m.sparsity());
        Ok(FlopReport::new(layers, sparsity))
    }
}

/// Backbone features plus the attention state that produced them.
pub struct BackboneOutput {
    pub features: Var,
    pub logits: Option<Var>,
    pub attention: Option<AttentionVars>,
    pub mask_var: Option<Var>,
    pub mask: Option<AttentionMask>,
    pub blocks: Option<BlockIndex>,
}

/// FLOP report for `config` on an `h x w` input without allocating a
/// trained model.
pub fn count_flops(config: &BackboneConfig, h: usize, w: usize, mask: Option<&AttentionMask>) -> Result<FlopReport> {
    let mut store = ParamStore::<f32>::new();
    Model::new(config, &mut store, 0)?.flops(h, w, mask)
}

#[cfg(test)]
mod tests;
