//! Finetuning decoder: sum-fusion neck, prompted-map channel attention and a
//! convolutional head.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::foundation::FeatureSet;
use crate::nn::{conv, conv_bn_relu, BnMode};
use crate::ops::resize_bilinear_tensor;
use crate::params::{Bound, Initializer, ParameterSet};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub channels: usize,
    /// Softmax temperature for the channel weights; 1 is the plain softmax.
    pub temperature: f64,
    /// Divide the guidance sums by the number of neck positions before the
    /// softmax. Off gives the raw spatial sums.
    pub spatial_mean: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: 64,
            temperature: 1.0,
            spatial_mean: true,
        }
    }
}

pub struct FdOutput<'t, T: Element> {
    pub neck: Var<'t, T>,
    /// Channel weights `[N, C_d]`.
    pub weights: Var<'t, T>,
    pub guided: Var<'t, T>,
    pub logits: Var<'t, T>,
}

impl DecoderConfig {
    pub fn init<T: Element>(&self, level_channels: &[usize; 4], num_classes: usize, seed: u64) -> Result<ParameterSet<T>> {
        let c = self.channels;
        let mut init = Initializer::new(seed);
        for (i, &lc) in level_channels.iter().enumerate() {
            init.conv(&format!("neck.proj{}", i), lc, c, 1, false, 1.0)?;
        }
        init.conv("att.conv", c, c, 3, true, 1.0)?;
        init.batch_norm("att.bn", c)?;
        for stage in ["head.block0", "head.block1"] {
            init.conv(&format!("{}.conv", stage), c, c, 3, true, 1.0)?;
            init.batch_norm(&format!("{}.bn", stage), c)?;
        }
        init.conv("head.cls", c, num_classes, 1, true, 0.5)?;
        Ok(init.finish())
    }

    /// Projects every level to `C_d` channels, resamples onto the stride-8
    /// grid and sums.
    pub fn neck<'t, T: Element>(&self, b: &Bound<'t, '_, T>, f: &FeatureSet<T>) -> Result<Var<'t, T>> {
        if f.levels.len() != 4 {
            return Err(shape_err!("neck expects 4 levels, got {}", f.levels.len()));
        }
        let (_, _, gh, gw) = f.levels[1].dims4()?;
        let tape = b.tape();
        let mut sum: Option<Var<'t, T>> = None;
        for (i, level) in f.levels.iter().enumerate() {
            let x = tape.constant(level.clone());
            let mut p = conv(b, &format!("neck.proj{}", i), x, 1, 0)?;
            let (_, _, h, w) = level.dims4()?;
            if (h, w) != (gh, gw) {
                p = p.resize_bilinear(gh, gw)?;
            }
            sum = Some(match sum {
                Some(s) => s.add(&p)?,
                None => p,
            });
        }
        Ok(sum.expect("four levels"))
    }

    /// `v = softmax_c(Σ_{h,w} g(F)_{c,h,w} · M_{h,w})` per sample, with `M`
    /// the integrated map bilinearly resized to the neck grid. With
    /// `spatial_mean` the sum becomes a mean over the grid.
    pub fn attention_weights<'t, T: Element>(
        &self,
        b: &Bound<'t, '_, T>,
        neck: Var<'t, T>,
        integrated: &Tensor<T>,
        mode: BnMode,
    ) -> Result<Var<'t, T>> {
        if !integrated.all_finite() || !neck.value().all_finite() {
            return Err(Error::NonFinite("attention inputs".into()));
        }
        let shape = neck.shape();
        let (im_n, im_c, _, _) = integrated.dims4()?;
        if im_n != shape[0] || im_c != 1 {
            return Err(shape_err!(
                "integrated map {:?} does not match neck {:?}",
                integrated.shape(),
                shape
            ));
        }
        let m = resize_bilinear_tensor(integrated, shape[2], shape[3])?;
        let g = conv_bn_relu(b, "att", neck, mode)?;
        let mut s = g.spatial_weighted_sum(&b.tape().constant(m))?;
        if self.spatial_mean {
            s = s.mul_scalar(1.0 / (shape[2] * shape[3]) as f64);
        }
        s.softmax_rows(self.temperature)
    }

    /// `F'[c,h,w] = F[c,h,w] · v[c]`.
    pub fn apply_guidance<'t, T: Element>(&self, neck: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
        neck.scale_channels(&v)
    }

    pub fn head<'t, T: Element>(
        &self,
        b: &Bound<'t, '_, T>,
        guided: Var<'t, T>,
        out_h: usize,
        out_w: usize,
        mode: BnMode,
    ) -> Result<Var<'t, T>> {
        let y = conv_bn_relu(b, "head.block0", guided, mode)?;
        let y = conv_bn_relu(b, "head.block1", y, mode)?;
        conv(b, "head.cls", y, 1, 0)?.resize_bilinear(out_h, out_w)
    }

    pub fn forward<'t, T: Element>(
        &self,
        b: &Bound<'t, '_, T>,
        f: &FeatureSet<T>,
        integrated: &Tensor<T>,
        mode: BnMode,
    ) -> Result<FdOutput<'t, T>> {
        let neck = self.neck(b, f)?;
        let weights = self.attention_weights(b, neck, integrated, mode)?;
        let guided = self.apply_guidance(neck, weights)?;
        let (h, w) = f.input_hw;
        let logits = self.head(b, guided, h, w, mode)?;
        Ok(FdOutput {
            neck,
            weights,
            guided,
            logits,
        })
    }
}
