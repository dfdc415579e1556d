//! Layer helpers over bound parameter sets.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch-norm layers normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; recorded for running-average updates when `track`.
    Train { track: bool },
    /// Running statistics.
    Eval,
}

/// Convolution with `name.weight` and, when present, `name.bias`.
pub fn conv<'t, T: Element>(
    b: &Bound<'t, '_, T>,
    name: &str,
    x: Var<'t, T>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t, T>> {
    let w = b.var(&format!("{}.weight", name))?;
    let bias_name = format!("{}.bias", name);
    let bias = if b.has(&bias_name) {
        Some(b.var(&bias_name)?)
    } else {
        None
    };
    x.conv2d(&w, bias.as_ref(), stride, pad)
}

pub fn batch_norm<'t, T: Element>(
    b: &Bound<'t, '_, T>,
    name: &str,
    x: Var<'t, T>,
    mode: BnMode,
) -> Result<Var<'t, T>> {
    let gamma = b.var(&format!("{}.weight", name))?;
    let beta = b.var(&format!("{}.bias", name))?;
    match mode {
        BnMode::Train { track } => {
            let (y, stats) = x.batch_norm_train(&gamma, &beta, BN_EPS)?;
            if track {
                b.record_stats(name, stats);
            }
            Ok(y)
        }
        BnMode::Eval => x.batch_norm_eval(
            &gamma,
            &beta,
            b.buffer(&format!("{}.running_mean", name))?,
            b.buffer(&format!("{}.running_var", name))?,
            BN_EPS,
        ),
    }
}

/// 3×3 Conv-BN-ReLU with padding 1, the `{name}.conv` / `{name}.bn` pair.
pub fn conv_bn_relu<'t, T: Element>(
    b: &Bound<'t, '_, T>,
    name: &str,
    x: Var<'t, T>,
    mode: BnMode,
) -> Result<Var<'t, T>> {
    let y = conv(b, &format!("{}.conv", name), x, 1, 1)?;
    Ok(batch_norm(b, &format!("{}.bn", name), y, mode)?.relu())
}

/// Per-pixel index of the largest channel, lowest index on ties.
pub fn argmax_channels<T: Element>(x: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, h, w) = x.dims4()?;
    if !(2..=256).contains(&c) {
        return Err(Error::InvalidArgument(format!("argmax over {} channels", c)));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("argmax input".into()));
    }
    let hw = h * w;
    let d = x.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = d[b * c * hw + p];
            for ch in 1..c {
                let v = d[(b * c + ch) * hw + p];
                if v > best_v {
                    best = ch;
                    best_v = v;
                }
            }
            out[b * hw + p] = best as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let x = Tensor::<f32>::from_vec(&[1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&x).unwrap(), vec![0, 1]);
    }

    #[test]
    fn argmax_rejects_nan() {
        let x = Tensor::<f32>::from_vec(&[1, 2, 1, 1], vec![f32::NAN, 0.0]).unwrap();
        assert!(argmax_channels(&x).is_err());
    }
}
