//! Two-stage joint optimization: the segmentor stage with feature-level
//! adversarial alignment and self-training, then the decoder stage with
//! logits-level alignment and self-training.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{disc_loss, gen_adv_loss, DiscriminatorSpec};
use crate::autograd::{Tape, Var};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::foundation::{ClassAgnosticMap, FeatureSet, Foundation, FoundationConfig};
use crate::nn::{argmax_channels, BnMode, BN_MOMENTUM};
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamGrads, ParameterSet};
use crate::segmentor::SegmentorConfig;
use crate::self_training::{ema_update, pseudo_label_fd, pseudo_label_ps, st_loss};
use crate::tensor::{Element, Tensor};

/// Component switches; all on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_ps: bool,
    pub use_f_adv: bool,
    pub use_l_adv: bool,
    pub use_st: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_ps: true,
            use_f_adv: true,
            use_l_adv: true,
            use_st: true,
        }
    }
}

impl Ablation {
    pub const COMPONENTS: [&'static str; 4] = ["ps", "f_adv", "l_adv", "st"];

    /// Turns off the named components (`ps`, `f_adv`, `l_adv`, `st`).
    pub fn without(mut self, names: &[&str]) -> Result<Self> {
        for &name in names {
            match name.trim().to_ascii_lowercase().replace('-', "_").as_str() {
                "ps" => self.use_ps = false,
                "f_adv" => self.use_f_adv = false,
                "l_adv" => self.use_l_adv = false,
                "st" => self.use_st = false,
                "" => {}
                other => {
                    return Err(Error::Config(format!(
                        "unknown component {:?}; expected one of {:?}",
                        other,
                        Self::COMPONENTS
                    )))
                }
            }
        }
        Ok(self)
    }

    pub fn none() -> Self {
        Ablation {
            use_ps: false,
            use_f_adv: false,
            use_l_adv: false,
            use_st: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
    pub alpha: f64,
    pub lr_main: f64,
    pub wd_main: f64,
    pub lr_disc: f64,
    pub wd_disc: f64,
    pub seed: u64,
    /// Keep only pseudo-labels whose teacher confidence reaches this value.
    pub pseudo_label_threshold: Option<f64>,
    pub ablation: Ablation,
    pub segmentor: SegmentorConfig,
    pub foundation: FoundationConfig,
    pub decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch_size: 2,
            num_classes: 4,
            gamma1: 0.001,
            gamma2: 1.0,
            gamma3: 0.001,
            gamma4: 1.0,
            alpha: 0.999,
            lr_main: 6e-5,
            wd_main: 0.01,
            lr_disc: 1e-4,
            wd_disc: 0.01,
            seed: 0,
            pseudo_label_threshold: None,
            ablation: Ablation::default(),
            segmentor: SegmentorConfig::default(),
            foundation: FoundationConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes {} must lie in [2, 255]", self.num_classes));
        }
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3), ("gamma4", self.gamma4)] {
            if !(g >= 0.0 && g.is_finite()) {
                return bad(format!("{} must be a finite non-negative weight, got {}", name, g));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        for (name, v) in [("lr_main", self.lr_main), ("lr_disc", self.lr_disc)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{} must be positive, got {}", name, v));
            }
        }
        for (name, v) in [("wd_main", self.wd_main), ("wd_disc", self.wd_disc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{} must be non-negative, got {}", name, v));
            }
        }
        if let Some(t) = self.pseudo_label_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("pseudo_label_threshold {} must lie in [0, 1]", t));
            }
        }
        if self.decoder.channels == 0 || !(self.decoder.temperature > 0.0) {
            return bad("decoder channels and temperature must be positive".into());
        }
        if self.foundation.level_channels[2] == 0 || self.segmentor.stage_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    pub fn main_optimizer(&self) -> AdamConfig {
        AdamConfig::adamw(self.lr_main, self.wd_main)
    }

    pub fn disc_optimizer(&self) -> AdamConfig {
        AdamConfig::adam(self.lr_disc, self.wd_disc)
    }

    pub fn df_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec::new(self.segmentor.feature_channels())
    }

    pub fn dl_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec::new(self.num_classes)
    }
}

/// Names of the parameter sets in a training state.
pub const SET_NAMES: [&str; 6] = ["ps", "ema_ps", "df", "fd", "ema_fd", "dl"];

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Element> {
    pub step: u64,
    pub ps: ParameterSet<T>,
    pub ema_ps: ParameterSet<T>,
    pub df: ParameterSet<T>,
    pub fd: ParameterSet<T>,
    pub ema_fd: ParameterSet<T>,
    pub dl: ParameterSet<T>,
    pub opt_ps: AdamState<T>,
    pub opt_df: AdamState<T>,
    pub opt_fd: AdamState<T>,
    pub opt_dl: AdamState<T>,
    pub foundation: Foundation<T>,
    pub rng: ChaCha8Rng,
}

impl<T: Element> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let sub = |k: u64| seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(k);
        let ps = cfg.segmentor.init::<T>(cfg.num_classes, sub(1))?;
        let fd = cfg
            .decoder
            .init::<T>(&cfg.foundation.level_channels, cfg.num_classes, sub(2))?;
        let df = cfg.df_spec().init::<T>(sub(3))?;
        let dl = cfg.dl_spec().init::<T>(sub(4))?;
        let mut ema_ps = ps.clone();
        ema_ps.set_frozen(true);
        let mut ema_fd = fd.clone();
        ema_fd.set_frozen(true);
        let mut rng = ChaCha8Rng::seed_from_u64(sub(5));
        rng.set_stream(7);
        Ok(TrainState {
            step: 0,
            opt_ps: AdamState::new(&ps),
            opt_df: AdamState::new(&df),
            opt_fd: AdamState::new(&fd),
            opt_dl: AdamState::new(&dl),
            foundation: Foundation::new(&cfg.foundation, cfg.num_classes)?,
            ps,
            ema_ps,
            df,
            fd,
            ema_fd,
            dl,
            rng,
        })
    }

    pub fn set(&self, name: &str) -> Option<&ParameterSet<T>> {
        Some(match name {
            "ps" => &self.ps,
            "ema_ps" => &self.ema_ps,
            "df" => &self.df,
            "fd" => &self.fd,
            "ema_fd" => &self.ema_fd,
            "dl" => &self.dl,
            _ => return None,
        })
    }

    /// Hash of every parameter set plus the foundation surrogate.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = SET_NAMES
            .iter()
            .map(|&n| (n.to_string(), self.set(n).expect("known set").hash()))
            .collect();
        out.insert("foundation".into(), self.foundation.hash());
        out
    }

    /// Draws `n` source and `n` target indices uniformly with replacement.
    pub fn sample_indices(&mut self, n: usize, n_source: usize, n_target: usize) -> (Vec<usize>, Vec<usize>) {
        let s = (0..n).map(|_| self.rng.random_range(0..n_source)).collect();
        let t = (0..n).map(|_| self.rng.random_range(0..n_target)).collect();
        (s, t)
    }
}

/// Labeled source batch.
#[derive(Clone, Debug)]
pub struct SourceBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
}

/// Loss values of one step. Terms that were not computed are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub seg_ps: Option<f64>,
    pub adv_ps: Option<f64>,
    pub st_ps: Option<f64>,
    pub seg_fd: Option<f64>,
    pub adv_fd: Option<f64>,
    pub st_fd: Option<f64>,
    pub disc_f: Option<f64>,
    pub disc_l: Option<f64>,
}

impl LossRecord {
    fn terms(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("seg_ps", self.seg_ps),
            ("adv_ps", self.adv_ps),
            ("st_ps", self.st_ps),
            ("seg_fd", self.seg_fd),
            ("adv_fd", self.adv_fd),
            ("st_fd", self.st_fd),
            ("disc_f", self.disc_f),
            ("disc_l", self.disc_l),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.map_or(true, f64::is_finite))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("loss record serializes")
    }
}

/// Per-set gradient norms of one stage, for audits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub grad_norms: BTreeMap<&'static str, f64>,
}

impl StageReport {
    fn record(&mut self, set: &'static str, grads: &ParamGrads<impl Element>) {
        *self.grad_norms.entry(set).or_insert(0.0) += grads.norm();
    }

    /// Sets that received a nonzero gradient.
    pub fn touched(&self) -> Vec<&'static str> {
        self.grad_norms
            .iter()
            .filter(|(_, &n)| n > 0.0)
            .map(|(&k, _)| k)
            .collect()
    }
}

/// Stage-1 outputs consumed by stage 2.
#[derive(Clone, Debug)]
pub struct Prompts {
    pub source: Vec<u8>,
    pub target: Vec<u8>,
}

fn finite_or_abort(record: &LossRecord, what: &str) -> Result<()> {
    if record.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} at step {}: {}", what, record.step, record.to_json())))
    }
}

fn to_f64<T: Element>(v: Var<'_, T>) -> f64 {
    v.item().as_f64()
}

/// Discriminator step on detached inputs, followed by the generator loss on
/// `fake` through the updated, now constant, discriminator.
#[allow(clippy::too_many_arguments)]
fn adversarial_round<'t, T: Element>(
    spec: &DiscriminatorSpec,
    d: &mut ParameterSet<T>,
    opt: &mut AdamState<T>,
    opt_cfg: &AdamConfig,
    real: &Tensor<T>,
    fake_detached: &Tensor<T>,
    fake: Var<'t, T>,
    report: &mut StageReport,
    name: &'static str,
) -> Result<(f64, Var<'t, T>)> {
    d.set_frozen(false);
    let d_loss_value;
    {
        let tape = Tape::new();
        let b = d.bind(&tape, true);
        let real_scores = spec.forward(&b, tape.constant(real.clone()))?;
        let fake_scores = spec.forward(&b, tape.constant(fake_detached.clone()))?;
        let loss = disc_loss(real_scores, fake_scores)?;
        d_loss_value = to_f64(loss);
        if !d_loss_value.is_finite() {
            return Err(Error::NonFinite(format!("{} discriminator loss", name)));
        }
        let grads = b.gradients(&tape.backward(loss)?);
        report.record(name, &grads);
        drop(b);
        opt.step(d, &grads, opt_cfg)?;
    }
    d.set_frozen(true);
    let b = d.bind(fake.tape(), false);
    let g = gen_adv_loss(spec.forward(&b, fake)?)?;
    Ok((d_loss_value, g))
}

fn combine<'t, T: Element>(terms: Vec<(Var<'t, T>, f64)>) -> Result<Var<'t, T>> {
    let kept: Vec<_> = terms.into_iter().filter(|(_, w)| *w != 0.0).collect();
    Var::weighted_sum(&kept)
}

/// Segmentor stage. Returns the prompt masks of both domains computed before
/// the segmentor update.
pub fn stage1<T: Element>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    src: &SourceBatch<T>,
    tgt: &Tensor<T>,
    record: &mut LossRecord,
) -> Result<(Prompts, StageReport)> {
    let mut report = StageReport::default();
    state.ps.set_frozen(false);
    let seg = &cfg.segmentor;
    let tape = Tape::new();
    let b = state.ps.bind(&tape, true);
    let out_s = seg.forward(&b, tape.constant(src.images.clone()))?;
    let out_t = seg.forward(&b, tape.constant(tgt.clone()))?;
    let prompts = Prompts {
        source: argmax_channels(&out_s.logits.value())?,
        target: argmax_channels(&out_t.logits.value())?,
    };
    let l_seg = out_s.logits.cross_entropy(&src.labels)?;
    record.seg_ps = Some(to_f64(l_seg));
    let mut terms = vec![(l_seg, 1.0)];

    if cfg.ablation.use_f_adv {
        let feat_s = out_s.features().value();
        let feat_t = out_t.features().value();
        let (d, g) = adversarial_round(
            &cfg.df_spec(),
            &mut state.df,
            &mut state.opt_df,
            &cfg.disc_optimizer(),
            &feat_s,
            &feat_t,
            out_t.features(),
            &mut report,
            "df",
        )?;
        record.disc_f = Some(d);
        record.adv_ps = Some(to_f64(g));
        terms.push((g, cfg.gamma1));
    }

    if cfg.ablation.use_st {
        ema_update(&mut state.ema_ps, &state.ps, cfg.alpha)?;
        let pseudo = pseudo_label_ps(seg, &state.ema_ps, tgt)?;
        let weights = match cfg.pseudo_label_threshold {
            Some(th) => Some(pseudo.confidence_mask(th)?),
            None => None,
        };
        let l_st = st_loss(&pseudo.labels, out_t.logits, weights.as_deref())?;
        record.st_ps = Some(to_f64(l_st));
        terms.push((l_st, cfg.gamma2));
    }

    finite_or_abort(record, "segmentor stage")?;
    let total = combine(terms)?;
    let grads = b.gradients(&tape.backward(total)?);
    report.record("ps", &grads);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("segmentor gradients at step {}", record.step)));
    }
    drop(b);
    state.opt_ps.step(&mut state.ps, &grads, &cfg.main_optimizer())?;
    state.ps.set_frozen(true);
    Ok((prompts, report))
}

/// Foundation features and class-agnostic maps for one domain.
pub fn foundation_pass<T: Element>(
    foundation: &Foundation<T>,
    images: &Tensor<T>,
    prompt: Option<&[u8]>,
) -> Result<(FeatureSet<T>, ClassAgnosticMap<T>)> {
    let fs = foundation.encode_image(images)?;
    let maps = match prompt {
        Some(p) => foundation.prompted_maps(&fs, p)?,
        None => {
            let (h, w) = fs.input_hw;
            ClassAgnosticMap::zeros(fs.batch(), h, w)
        }
    };
    Ok((fs, maps))
}

/// Decoder stage; increments the step counter.
pub fn stage2<T: Element>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    src: &SourceBatch<T>,
    tgt: &Tensor<T>,
    prompts: Option<&Prompts>,
    record: &mut LossRecord,
) -> Result<StageReport> {
    let mut report = StageReport::default();
    let (fs_s, m_s) = foundation_pass(&state.foundation, &src.images, prompts.map(|p| p.source.as_slice()))?;
    let (fs_t, m_t) = foundation_pass(&state.foundation, tgt, prompts.map(|p| p.target.as_slice()))?;

    state.fd.set_frozen(false);
    let dec = &cfg.decoder;
    let tape = Tape::new();
    let b = state.fd.bind(&tape, true);
    let out_s = dec.forward(&b, &fs_s, &m_s.integrated, BnMode::Train { track: true })?;
    let bn_stats = b.take_stats();
    let out_t = dec.forward(&b, &fs_t, &m_t.integrated, BnMode::Train { track: false })?;
    let l_seg = out_s.logits.cross_entropy(&src.labels)?;
    record.seg_fd = Some(to_f64(l_seg));
    let mut terms = vec![(l_seg, 1.0)];

    if cfg.ablation.use_l_adv {
        let prob_s = out_s.logits.softmax_channels()?;
        let prob_t = out_t.logits.softmax_channels()?;
        let (d, g) = adversarial_round(
            &cfg.dl_spec(),
            &mut state.dl,
            &mut state.opt_dl,
            &cfg.disc_optimizer(),
            &prob_s.value(),
            &prob_t.value(),
            prob_t,
            &mut report,
            "dl",
        )?;
        record.disc_l = Some(d);
        record.adv_fd = Some(to_f64(g));
        terms.push((g, cfg.gamma3));
    }

    if cfg.ablation.use_st {
        ema_update(&mut state.ema_fd, &state.fd, cfg.alpha)?;
        let pseudo = pseudo_label_fd(dec, &state.ema_fd, &fs_t, &m_t.integrated)?;
        let weights = match cfg.pseudo_label_threshold {
            Some(th) => Some(pseudo.confidence_mask(th)?),
            None => None,
        };
        let l_st = st_loss(&pseudo.labels, out_t.logits, weights.as_deref())?;
        record.st_fd = Some(to_f64(l_st));
        terms.push((l_st, cfg.gamma4));
    }

    finite_or_abort(record, "decoder stage")?;
    let total = combine(terms)?;
    let grads = b.gradients(&tape.backward(total)?);
    report.record("fd", &grads);
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("decoder gradients at step {}", record.step)));
    }
    drop(b);
    state.opt_fd.step(&mut state.fd, &grads, &cfg.main_optimizer())?;
    state.fd.apply_batch_stats(&bn_stats, BN_MOMENTUM)?;
    state.fd.set_frozen(true);
    state.step += 1;
    Ok(report)
}

/// One full iteration over both stages.
pub fn train_step<T: Element>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    src: &SourceBatch<T>,
    tgt: &Tensor<T>,
) -> Result<(LossRecord, StageReport, StageReport)> {
    let mut record = LossRecord {
        step: state.step,
        ..LossRecord::default()
    };
    let (prompts, r1) = if cfg.ablation.use_ps {
        let (p, r) = stage1(state, cfg, src, tgt, &mut record)?;
        (Some(p), r)
    } else {
        (None, StageReport::default())
    };
    let r2 = stage2(state, cfg, src, tgt, prompts.as_ref(), &mut record)?;
    Ok((record, r1, r2))
}

/// Inference outputs for a batch.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub classes: Vec<u8>,
    pub prompt: Option<Vec<u8>>,
    pub maps: ClassAgnosticMap<T>,
}

/// Live segmentor prompt, foundation maps, decoder with running statistics.
pub fn predict<T: Element>(state: &TrainState<T>, cfg: &TrainConfig, images: &Tensor<T>) -> Result<Prediction<T>> {
    let prompt = if cfg.ablation.use_ps {
        let tape = Tape::new();
        let b = state.ps.bind(&tape, false);
        let out = cfg.segmentor.forward(&b, tape.constant(images.clone()))?;
        Some(argmax_channels(&out.logits.value())?)
    } else {
        None
    };
    let (fs, maps) = foundation_pass(&state.foundation, images, prompt.as_deref())?;
    let tape = Tape::new();
    let b = state.fd.bind(&tape, false);
    let out = cfg.decoder.forward(&b, &fs, &maps.integrated, BnMode::Eval)?;
    Ok(Prediction {
        classes: argmax_channels(&out.logits.value())?,
        prompt,
        maps,
    })
}
