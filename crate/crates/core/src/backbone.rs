//! Toy UNet: four stride-2 encoder stages, an additive-skip decoder, and
//! decoder taps at 1/16, 1/8 and 1/4 resolution.

use rand::Rng;

use crate::attention::Tokens;
use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, IclError, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "backbone";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Classes including background.
    pub classes: usize,
    /// Base channel width `C`.
    pub base_width: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            base_width: 8,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(16)
            || !self.width.is_multiple_of(16)
        {
            return Err(IclError::Config(format!(
                "image size {}×{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.classes > u8::MAX as usize {
            return Err(IclError::Config(format!(
                "class count {} must be in [2, 255]",
                self.classes
            )));
        }
        if self.base_width < 1 || self.heads < 1 {
            return Err(IclError::Config(
                "base width and head count must be positive".into(),
            ));
        }
        for d in [4 * self.base_width, 2 * self.base_width, self.base_width] {
            if d % self.heads != 0 {
                return Err(IclError::Config(format!(
                    "proxy width {d} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    /// Token grids `(h, w)` of the three tapped scales.
    pub fn scale_grids(&self) -> [(usize, usize); 3] {
        [
            (self.height / 16, self.width / 16),
            (self.height / 8, self.width / 8),
            (self.height / 4, self.width / 4),
        ]
    }
}

/// Decoder feature maps tapped for the proxy heads.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    /// `4C × H/16 × W/16`
    pub f1: Var,
    /// `2C × H/8 × W/8`
    pub f2: Var,
    /// `C × H/4 × W/4`
    pub f3: Var,
    /// `C × H × W`
    pub last: Var,
}

impl MultiScaleFeatures {
    pub fn scales(&self) -> [Var; 3] {
        [self.f1, self.f2, self.f3]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// `Z × H × W` logits.
    pub logits: Var,
    pub feats: MultiScaleFeatures,
}

/// 3×3 conv → single-group norm → ReLU.
#[derive(Clone, Copy, Debug)]
struct ConvBlock {
    w: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
}

impl ConvBlock {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * 9;
        let bound = (3.0 / fan_in as f64).sqrt();
        Ok(Self {
            w: store.add(
                format!("{PREFIX}.{name}.w"),
                Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng),
            )?,
            gamma: store.add(
                format!("{PREFIX}.{name}.gamma"),
                Tensor::filled(&[c_out], 1.0),
            )?,
            beta: store.add(format!("{PREFIX}.{name}.beta"), Tensor::zeros(&[c_out]))?,
            stride,
        })
    }

    fn load(
        store: &ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: store.expect(&format!("{PREFIX}.{name}.w"), &[c_out, c_in, 3, 3])?,
            gamma: store.expect(&format!("{PREFIX}.{name}.gamma"), &[c_out])?,
            beta: store.expect(&format!("{PREFIX}.{name}.beta"), &[c_out])?,
            stride,
        })
    }

    fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, b.var(self.w), None, self.stride)?;
        let y = tape.group_norm(y, b.var(self.gamma), b.var(self.beta))?;
        Ok(tape.relu(y))
    }
}

// (name, in-channel multiple of C, out-channel multiple of C, stride); the stem
// reads the single image channel.
const LAYOUT: [(&str, usize, usize, usize); 10] = [
    ("stem", 0, 1, 1),
    ("down1", 1, 1, 2),
    ("down2", 1, 2, 2),
    ("down3", 2, 4, 2),
    ("down4", 4, 4, 2),
    ("dec1", 4, 4, 1),
    ("dec2", 4, 2, 1),
    ("dec3", 2, 1, 1),
    ("dec4", 1, 1, 1),
    ("dec5", 1, 1, 1),
];

#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    blocks: Vec<ConvBlock>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Backbone {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.base_width;
        let blocks = LAYOUT
            .iter()
            .map(|&(name, ci, co, s)| {
                ConvBlock::init(
                    store,
                    name,
                    if ci == 0 { 1 } else { ci * c },
                    co * c,
                    s,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let bound = 1.0 / (c as f64).sqrt();
        let head_w = store.add(
            format!("{PREFIX}.head.w"),
            Tensor::uniform(&[config.classes, c, 1, 1], bound, rng),
        )?;
        let head_b = store.add(format!("{PREFIX}.head.b"), Tensor::zeros(&[config.classes]))?;
        Ok(Self {
            config,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Resolves backbone parameters by name; other entries in `store` are ignored.
    pub fn load(store: &ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_width;
        let blocks = LAYOUT
            .iter()
            .map(|&(name, ci, co, s)| {
                ConvBlock::load(store, name, if ci == 0 { 1 } else { ci * c }, co * c, s)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            blocks,
            head_w: store.expect(&format!("{PREFIX}.head.w"), &[config.classes, c, 1, 1])?,
            head_b: store.expect(&format!("{PREFIX}.head.b"), &[config.classes])?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter this backbone reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .blocks
            .iter()
            .flat_map(|b| [b.w, b.gamma, b.beta])
            .collect();
        ids.extend([self.head_w, self.head_b]);
        ids
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, image: Var) -> Result<BackboneOutput> {
        let (h, w) = (self.config.height, self.config.width);
        if tape.shape(image) != [1, h, w] {
            return Err(dim_err(
                "backbone",
                format!(
                    "image {:?} does not match configured 1×{h}×{w}",
                    tape.shape(image)
                ),
            ));
        }
        let [stem, down1, down2, down3, down4, dec1, dec2, dec3, dec4, dec5] =
            <[ConvBlock; 10]>::try_from(self.blocks.as_slice()).expect("ten blocks");
        let e0 = stem.forward(tape, b, image)?;
        let e1 = down1.forward(tape, b, e0)?;
        let e2 = down2.forward(tape, b, e1)?;
        let e3 = down3.forward(tape, b, e2)?;
        let e4 = down4.forward(tape, b, e3)?;

        let f1 = dec1.forward(tape, b, e4)?;
        let x = up_add(tape, f1, e3)?;
        let f2 = dec2.forward(tape, b, x)?;
        let x = up_add(tape, f2, e2)?;
        let f3 = dec3.forward(tape, b, x)?;
        let x = up_add(tape, f3, e1)?;
        let d4 = dec4.forward(tape, b, x)?;
        let x = up_add(tape, d4, e0)?;
        let last = dec5.forward(tape, b, x)?;
        let logits = tape.conv2d(last, b.var(self.head_w), Some(b.var(self.head_b)), 1)?;
        Ok(BackboneOutput {
            logits,
            feats: MultiScaleFeatures { f1, f2, f3, last },
        })
    }

    /// Inference: logits for one image, no gradient tracking.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Upsamples `x` onto `skip`'s grid and adds the skip connection.
fn up_add(tape: &mut Tape, x: Var, skip: Var) -> Result<Var> {
    let s = tape.shape(skip).to_vec();
    if tape.shape(x)[0] != s[0] {
        return Err(dim_err(
            "skip connection",
            format!(
                "decoder {:?} and skip {:?} differ in channels",
                tape.shape(x),
                s
            ),
        ));
    }
    let up = tape.bilinear_upsample(x, s[1], s[2])?;
    tape.add(up, skip)
}

/// `[c×h×w]` feature map → `[(h·w)×c]` tokens, row-major over space.
pub fn tokenize(tape: &mut Tape, feature: Var) -> Result<Tokens> {
    let s = tape.shape(feature).to_vec();
    if s.len() != 3 {
        return Err(dim_err("tokenize", format!("expected c×h×w, got {s:?}")));
    }
    let flat = tape.reshape(feature, &[s[0], s[1] * s[2]])?;
    let var = tape.transpose(flat)?;
    Ok(Tokens {
        var,
        h: s[1],
        w: s[2],
    })
}

/// Inverse of [`tokenize`].
pub fn untokenize(tape: &mut Tape, tokens: Tokens) -> Result<Var> {
    let s = tape.shape(tokens.var).to_vec();
    if s.len() != 2 || s[0] != tokens.h * tokens.w {
        return Err(dim_err(
            "untokenize",
            format!("tokens {s:?} do not cover a {}×{} grid", tokens.h, tokens.w),
        ));
    }
    let t = tape.transpose(tokens.var)?;
    tape.reshape(t, &[s[1], tokens.h, tokens.w])
}
