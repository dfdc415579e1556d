//! Patch discriminators and the adversarial losses.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::conv;
use crate::ops::conv_out_dim;
use crate::params::{Bound, Initializer, ParameterSet};
use crate::tensor::Element;

/// Clamp applied to σ inside the logarithms.
pub const SIGMOID_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub block_channels: [usize; 4],
    pub kernel: usize,
    pub strides: [usize; 4],
    pub padding: usize,
    pub leaky_slope: f64,
}

impl DiscriminatorSpec {
    pub fn new(in_channels: usize) -> Self {
        DiscriminatorSpec {
            in_channels,
            block_channels: [64, 128, 256, 1],
            kernel: 4,
            strides: [2, 2, 1, 1],
            padding: 1,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels[3] != 1 {
            return Err(Error::InvalidArgument("the last discriminator block must have one output channel".into()));
        }
        if self.in_channels == 0 || self.kernel == 0 || self.strides.contains(&0) {
            return Err(Error::InvalidArgument("discriminator sizes must be positive".into()));
        }
        Ok(())
    }

    /// Score-map size for an `h × w` input, or `None` if the input is too small.
    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for &s in &self.strides {
            h = conv_out_dim(h, self.kernel, s, self.padding)?;
            w = conv_out_dim(w, self.kernel, s, self.padding)?;
        }
        Some((h, w))
    }

    pub fn init<T: Element>(&self, seed: u64) -> Result<ParameterSet<T>> {
        self.validate()?;
        let mut init = Initializer::new(seed);
        let mut c_in = self.in_channels;
        for (i, &c) in self.block_channels.iter().enumerate() {
            init.conv(&format!("block{}", i), c_in, c, self.kernel, true, 1.0)?;
            c_in = c;
        }
        Ok(init.finish())
    }

    /// Pre-sigmoid patch scores `[N, 1, h', w']`.
    pub fn forward<'t, T: Element>(&self, b: &Bound<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(shape_err!(
                "discriminator expects {} input channels, got {:?}",
                self.in_channels,
                shape
            ));
        }
        let mut h = x;
        for (i, &s) in self.strides.iter().enumerate() {
            h = conv(b, &format!("block{}", i), h, s, self.padding)?;
            if i < 3 {
                h = h.leaky_relu(self.leaky_slope);
            }
        }
        Ok(h)
    }
}

/// `mean(-log σ(real)) + mean(-log(1 - σ(fake)))`.
pub fn disc_loss<'t, T: Element>(real: Var<'t, T>, fake: Var<'t, T>) -> Result<Var<'t, T>> {
    real.ensure_finite("real discriminator scores")?;
    fake.ensure_finite("fake discriminator scores")?;
    real.bce_with_logits(true, SIGMOID_EPS)
        .add(&fake.bce_with_logits(false, SIGMOID_EPS))
}

/// Non-saturating generator objective `mean(-log σ(fake))`.
pub fn gen_adv_loss<'t, T: Element>(fake: Var<'t, T>) -> Result<Var<'t, T>> {
    fake.ensure_finite("generator discriminator scores")?;
    Ok(fake.bce_with_logits(true, SIGMOID_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn neutral_scores_closed_forms() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let d = disc_loss(z, z).unwrap().item();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let g = gen_adv_loss(z).unwrap().item();
        assert!((g - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_output_dims() {
        let spec = DiscriminatorSpec::new(2);
        let p = spec.init::<f32>(0).unwrap();
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let y = spec.forward(&b, tape.constant(Tensor::zeros(&[1, 2, 32, 32]))).unwrap();
        let (h, w) = spec.output_dims(32, 32).unwrap();
        assert_eq!(y.shape(), vec![1, 1, h, w]);
        assert_eq!((h, w), (6, 6));
    }
}
