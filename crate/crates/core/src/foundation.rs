//! Frozen foundation-model surrogate: a multi-scale image encoder, a mask
//! prompt encoder and a three-map mask decoder, all seeded and never trained.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::conv;
use crate::params::{Bound, Initializer, ParameterSet};
use crate::tensor::{Element, Tensor};

pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Number of raw class-agnostic maps.
pub const RAW_MAPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoundationConfig {
    pub seed: u64,
    pub level_channels: [usize; 4],
    pub prompt_hidden: usize,
    pub decoder_channels: [usize; 2],
}

impl Default for FoundationConfig {
    fn default() -> Self {
        FoundationConfig {
            seed: 0x5eed_f00d,
            level_channels: [32, 64, 128, 128],
            prompt_hidden: 32,
            decoder_channels: [64, 32],
        }
    }
}

/// Features at strides 4, 8, 16 and 32, plus the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet<T> {
    pub levels: Vec<Tensor<T>>,
    pub input_hw: (usize, usize),
}

impl<T: Element> FeatureSet<T> {
    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |l| l.shape()[0])
    }

    pub fn all_finite(&self) -> bool {
        self.levels.iter().all(|l| l.all_finite())
    }
}

/// Three sigmoid maps `[N, 3, H, W]` and their channel mean `[N, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAgnosticMap<T> {
    pub raw: Tensor<T>,
    pub integrated: Tensor<T>,
}

impl<T: Element> ClassAgnosticMap<T> {
    /// All-zero maps, used when prompt guidance is disabled.
    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        ClassAgnosticMap {
            raw: Tensor::zeros(&[n, RAW_MAPS, h, w]),
            integrated: Tensor::zeros(&[n, 1, h, w]),
        }
    }

    pub fn from_raw(raw: Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = raw.dims4()?;
        if c != RAW_MAPS {
            return Err(shape_err!("expected {} raw maps, got {}", RAW_MAPS, c));
        }
        let hw = h * w;
        let third = T::one() / T::of(RAW_MAPS as f64);
        let mut integrated = vec![T::zero(); n * hw];
        for b in 0..n {
            for ch in 0..c {
                let src = &raw.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, &v) in integrated[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        for v in &mut integrated {
            *v = *v * third;
        }
        Ok(ClassAgnosticMap {
            integrated: Tensor::from_vec(&[n, 1, h, w], integrated)?,
            raw,
        })
    }
}

/// The frozen surrogate with its parameters.
#[derive(Clone, Debug)]
pub struct Foundation<T: Element> {
    cfg: FoundationConfig,
    num_classes: usize,
    params: ParameterSet<T>,
}

impl<T: Element> Foundation<T> {
    pub fn new(cfg: &FoundationConfig, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        let [c0, c1, c2, c3] = cfg.level_channels;
        let mut init = Initializer::new(cfg.seed);
        init.conv("img.patch", 3, c0, 4, true, 1.0)?;
        init.conv("img.down1", c0, c1, 3, true, 1.0)?;
        init.conv("img.down2", c1, c2, 3, true, 1.0)?;
        init.conv("img.down3", c2, c3, 3, true, 1.0)?;
        init.conv("prompt.conv0", num_classes, cfg.prompt_hidden, 3, true, 1.0)?;
        init.conv("prompt.conv1", cfg.prompt_hidden, c2, 3, true, 1.0)?;
        let [d0, d1] = cfg.decoder_channels;
        init.conv("mask.conv0", c2, d0, 3, true, 1.0)?;
        init.conv("mask.conv1", d0, d1, 3, true, 1.0)?;
        init.conv("mask.head", d1, RAW_MAPS, 1, true, 0.5)?;
        let mut params = init.finish();
        params.set_frozen(true);
        Ok(Foundation {
            cfg: cfg.clone(),
            num_classes,
            params,
        })
    }

    pub fn config(&self) -> &FoundationConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, '_, T> {
        self.params.bind(tape, false)
    }

    /// Four-level feature pyramid of a normalized `[N, 3, H, W]` batch.
    pub fn encode_image(&self, x: &Tensor<T>) -> Result<FeatureSet<T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h < 4 || w < 4 {
            return Err(shape_err!("foundation encoder expects [N, 3, H>=4, W>=4], got {:?}", x.shape()));
        }
        let tape = Tape::new();
        let b = self.bind(&tape);
        let l0 = conv(&b, "img.patch", tape.constant(x.clone()), 4, 0)?.relu();
        let l1 = conv(&b, "img.down1", l0, 2, 1)?.relu();
        let l2 = conv(&b, "img.down2", l1, 2, 1)?.relu();
        let l3 = conv(&b, "img.down3", l2, 2, 1)?.relu();
        let levels = [l0, l1, l2, l3].iter().map(|v| (*v.value()).clone()).collect();
        Ok(FeatureSet {
            levels,
            input_hw: (h, w),
        })
    }

    /// One-hot expansion followed by two stride-4 convolutions, landing on the
    /// stride-16 grid.
    pub fn encode_prompt(&self, mask: &[u8], n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let onehot = one_hot::<T>(mask, n, self.num_classes, h, w)?;
        let tape = Tape::new();
        let b = self.bind(&tape);
        let e = conv(&b, "prompt.conv0", tape.constant(onehot), 4, 1)?.relu();
        let e = conv(&b, "prompt.conv1", e, 4, 1)?;
        Ok((*e.value()).clone())
    }

    /// Three class-agnostic maps at input resolution from the features and a
    /// prompt embedding added onto the stride-16 level.
    pub fn decode_masks(&self, f: &FeatureSet<T>, e: &Tensor<T>) -> Result<ClassAgnosticMap<T>> {
        if f.levels.len() != 4 {
            return Err(shape_err!("feature set has {} levels, expected 4", f.levels.len()));
        }
        let l2 = &f.levels[2];
        if l2.shape() != e.shape() {
            return Err(shape_err!(
                "prompt embedding {:?} does not match the stride-16 level {:?}",
                e.shape(),
                l2.shape()
            ));
        }
        let (h, w) = f.input_hw;
        let tape = Tape::new();
        let b = self.bind(&tape);
        let fused = tape.constant(l2.zip_map(e, |a, b| a + b));
        let y = conv(&b, "mask.conv0", fused, 1, 1)?.relu();
        let y = y.resize_bilinear(h.div_ceil(4), w.div_ceil(4))?;
        let y = conv(&b, "mask.conv1", y, 1, 1)?.relu();
        let y: Var<'_, T> = conv(&b, "mask.head", y, 1, 0)?.resize_bilinear(h, w)?.sigmoid();
        ClassAgnosticMap::from_raw((*y.value()).clone())
    }

    /// Class-agnostic maps for an image batch prompted with `mask`.
    pub fn prompted_maps(&self, f: &FeatureSet<T>, mask: &[u8]) -> Result<ClassAgnosticMap<T>> {
        let (h, w) = f.input_hw;
        let e = self.encode_prompt(mask, f.batch(), h, w)?;
        self.decode_masks(f, &e)
    }
}

/// `[N, C, H, W]` one-hot expansion of class indices.
pub fn one_hot<T: Element>(mask: &[u8], n: usize, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let hw = h * w;
    if mask.len() != n * hw {
        return Err(shape_err!("mask has {} entries, expected {}", mask.len(), n * hw));
    }
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        for p in 0..hw {
            let k = mask[b * hw + p] as usize;
            if k >= c {
                return Err(Error::InvalidArgument(format!("class {} out of range for {} classes", k, c)));
            }
            out[(b * c + k) * hw + p] = T::one();
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}
