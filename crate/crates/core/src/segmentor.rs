//! Prompted segmentor: a four-stage convolutional encoder and an all-stage
//! fusion decoder producing per-pixel class logits.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{argmax_channels, conv};
use crate::params::{Bound, Initializer, ParameterSet};
use crate::tensor::{Element, Tensor};

/// Output stride of the deepest encoder stage.
pub const ENCODER_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentorConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub decoder_channels: usize,
    /// Whether the very first convolution carries a bias.
    pub first_layer_bias: bool,
}

impl Default for SegmentorConfig {
    fn default() -> Self {
        SegmentorConfig {
            in_channels: 3,
            stage_channels: [16, 32, 64, 64],
            decoder_channels: 64,
            first_layer_bias: true,
        }
    }
}

/// Stride of each stage relative to the input. The last stage keeps the
/// resolution of the third.
pub const STAGE_STRIDES: [usize; 4] = [2, 4, 8, 8];

impl SegmentorConfig {
    pub fn feature_channels(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn init<T: Element>(&self, num_classes: usize, seed: u64) -> Result<ParameterSet<T>> {
        let mut init = Initializer::new(seed);
        let mut c_in = self.in_channels;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            let bias0 = s > 0 || self.first_layer_bias;
            init.conv(&format!("enc.stage{}.conv0", s), c_in, c, 3, bias0, 1.0)?;
            init.conv(&format!("enc.stage{}.conv1", s), c, c, 3, true, 1.0)?;
            c_in = c;
        }
        for (s, &c) in self.stage_channels.iter().enumerate() {
            init.conv(&format!("dec.proj{}", s), c, self.decoder_channels, 1, true, 1.0)?;
        }
        init.conv("dec.cls", 4 * self.decoder_channels, num_classes, 1, true, 0.5)?;
        Ok(init.finish())
    }

    /// Pre-activation of the first convolution, the first thing `encode` computes.
    pub fn first_preactivation<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x)?;
        conv(b, "enc.stage0.conv0", x.avg_pool(2)?, 1, 1)
    }

    fn check_input<T: Element>(&self, x: &Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        match shape.as_slice() {
            &[_, c, h, w] if c == self.in_channels && h % ENCODER_STRIDE == 0 && w % ENCODER_STRIDE == 0 && h > 0 && w > 0 => {
                Ok(())
            }
            _ => Err(shape_err!(
                "segmentor expects [N, {}, H, W] with H, W positive multiples of {}, got {:?}",
                self.in_channels,
                ENCODER_STRIDE,
                shape
            )),
        }
    }

    /// All four stage outputs; the last one is the feature map used for
    /// feature-level discrimination.
    pub fn encode<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.check_input(&x)?;
        let mut h = x;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            if s < 3 {
                h = h.avg_pool(2)?;
            }
            h = conv(b, &format!("enc.stage{}.conv0", s), h, 1, 1)?.relu();
            h = conv(b, &format!("enc.stage{}.conv1", s), h, 1, 1)?.relu();
            stages.push(h);
        }
        Ok(stages)
    }

    /// Logits at `out_h × out_w` from the four stage outputs.
    pub fn decode<'t, T: Element>(
        &self,
        b: &Bound<'t, '_, T>,
        stages: &[Var<'t, T>],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var<'t, T>> {
        if stages.len() != 4 {
            return Err(shape_err!("decoder expects 4 stages, got {}", stages.len()));
        }
        let (fh, fw) = (out_h.div_ceil(4).max(1), out_w.div_ceil(4).max(1));
        let mut fused = Vec::with_capacity(4);
        for (s, &f) in stages.iter().enumerate() {
            let shape = f.shape();
            if shape.len() != 4 || shape[1] != self.stage_channels[s] {
                return Err(shape_err!(
                    "stage {} features {:?} do not have {} channels",
                    s,
                    shape,
                    self.stage_channels[s]
                ));
            }
            let p = conv(b, &format!("dec.proj{}", s), f, 1, 0)?;
            fused.push(if (shape[2], shape[3]) == (fh, fw) {
                p
            } else {
                p.resize_bilinear(fh, fw)?
            });
        }
        let cat = Var::concat_channels(&fused)?;
        conv(b, "dec.cls", cat, 1, 0)?.resize_bilinear(out_h, out_w)
    }

    pub fn forward<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<SegOutput<'t, T>> {
        let shape = x.shape();
        let stages = self.encode(b, x)?;
        let logits = self.decode(b, &stages, shape[2], shape[3])?;
        Ok(SegOutput { stages, logits })
    }
}

pub struct SegOutput<'t, T: Element> {
    pub stages: Vec<Var<'t, T>>,
    pub logits: Var<'t, T>,
}

impl<'t, T: Element> SegOutput<'t, T> {
    pub fn features(&self) -> Var<'t, T> {
        self.stages[3]
    }
}

/// Prompt mask: per-pixel argmax of the logits.
pub fn argmax_mask<T: Element>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    argmax_channels(logits)
}
