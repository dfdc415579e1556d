//! EMA teachers, pseudo-labels and the self-training loss.

use crate::autograd::{Tape, Var};
use crate::decoder::DecoderConfig;
use crate::error::{shape_err, Error, Result};
use crate::foundation::FeatureSet;
use crate::nn::{argmax_channels, BnMode};
use crate::ops::softmax_channels_tensor;
use crate::params::ParameterSet;
use crate::segmentor::SegmentorConfig;
use crate::tensor::{Element, Tensor};

/// `teacher ← α·teacher + (1 - α)·student`, over every entry including buffers.
pub fn ema_update<T: Element>(teacher: &mut ParameterSet<T>, student: &ParameterSet<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("EMA decay {} outside [0, 1]", alpha)));
    }
    teacher.check_aligned(student)?;
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    for (t, s) in teacher.entries_mut().iter_mut().zip(student.entries()) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *tv = a * *tv + b * sv;
        }
    }
    Ok(())
}

/// Teacher logits and pseudo-labels for target images under the EMA segmentor.
pub fn pseudo_label_ps<T: Element>(
    cfg: &SegmentorConfig,
    teacher: &ParameterSet<T>,
    x: &Tensor<T>,
) -> Result<PseudoLabels<T>> {
    let tape = Tape::new();
    let b = teacher.bind(&tape, false);
    let out = cfg.forward(&b, tape.constant(x.clone()))?;
    PseudoLabels::from_logits((*out.logits.value()).clone())
}

/// Teacher logits and pseudo-labels under the EMA finetuning decoder.
pub fn pseudo_label_fd<T: Element>(
    cfg: &DecoderConfig,
    teacher: &ParameterSet<T>,
    features: &FeatureSet<T>,
    integrated: &Tensor<T>,
) -> Result<PseudoLabels<T>> {
    let tape = Tape::new();
    let b = teacher.bind(&tape, false);
    let out = cfg.forward(&b, features, integrated, BnMode::Eval)?;
    PseudoLabels::from_logits((*out.logits.value()).clone())
}

#[derive(Clone, Debug)]
pub struct PseudoLabels<T> {
    pub logits: Tensor<T>,
    pub labels: Vec<u8>,
}

impl<T: Element> PseudoLabels<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        let labels = argmax_channels(&logits)?;
        Ok(PseudoLabels { logits, labels })
    }

    /// Per-pixel weights keeping only pixels whose teacher confidence reaches
    /// `threshold`.
    pub fn confidence_mask(&self, threshold: f64) -> Result<Vec<f64>> {
        let probs = softmax_channels_tensor(&self.logits)?;
        let (n, c, h, w) = probs.dims4()?;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            for p in 0..hw {
                let l = self.labels[b * hw + p] as usize;
                let conf = probs.data()[(b * c + l) * hw + p].as_f64();
                out.push(if conf >= threshold { 1.0 } else { 0.0 });
            }
        }
        Ok(out)
    }
}

/// Pixel-averaged cross-entropy of the student logits against pseudo-labels.
pub fn st_loss<'t, T: Element>(pseudo: &[u8], logits: Var<'t, T>, weights: Option<&[f64]>) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 4 || pseudo.len() != shape[0] * shape[2] * shape[3] {
        return Err(shape_err!(
            "{} pseudo-labels for student logits {:?}",
            pseudo.len(),
            shape
        ));
    }
    logits.cross_entropy_weighted(pseudo, weights)
}
