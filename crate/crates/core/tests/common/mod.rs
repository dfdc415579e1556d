#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uda_core::autograd::{Tape, Var};
use uda_core::data::{generate_synthetic_pair, SceneSpec, ShiftSpec};
use uda_core::params::{Bound, EntryKind, ParameterSet};
use uda_core::runner::TensorSet;
use uda_core::self_training::ema_update;
use uda_core::tensor::Tensor;
use uda_core::trainer::{stage1, stage2, LossRecord, TrainConfig, TrainState};
use uda_core::Result;

pub fn random_tensor(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_f32(shape: &[usize], scale: f64, seed: u64) -> Tensor<f32> {
    random_tensor(shape, scale, seed).cast()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    // a structurally zero gradient shows up as rounding noise in the difference
    if analytic.abs() < 1e-10 && numeric.abs() < 1e-6 {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

fn unit_direction(shape: &[usize], seed: u64) -> Tensor<f64> {
    let d = random_tensor(shape, 1.0, seed);
    let norm = d.sq_norm().sqrt();
    d.map(|v| v / norm)
}

/// Directional-derivative check of a scalar loss in every weight entry of
/// `params` and in the input `x`: the analytic `<g, d>` is compared with the
/// central difference along a random direction `d`. Returns the worst
/// relative error and the number of directions checked.
pub fn jvp_check<F>(params: &ParameterSet<f64>, x: &Tensor<f64>, loss: F) -> (f64, usize)
where
    F: for<'t, 'p> Fn(&Bound<'t, 'p, f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let eval = |p: &ParameterSet<f64>, x: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        loss(&b, tape.constant(x.clone())).unwrap().item()
    };
    let tape = Tape::new();
    let b = params.bind(&tape, true);
    let xv = tape.leaf(x.clone(), true);
    let l = loss(&b, xv).unwrap();
    let grads = tape.backward(l).unwrap();
    let pg = b.gradients(&grads);
    let gx = grads.get(xv).cloned();

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, e) in params.entries().iter().enumerate() {
        if e.kind != EntryKind::Weight {
            continue;
        }
        let d = unit_direction(e.value.shape(), 1000 + i as u64);
        let analytic = pg.entries[i]
            .as_ref()
            .map_or(0.0, |g| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum());
        let shifted = |sign: f64| {
            let mut p = params.clone();
            let v = &mut p.entries_mut()[i].value;
            for (a, b) in v.data_mut().iter_mut().zip(d.data()) {
                *a += sign * h * b;
            }
            eval(&p, x)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let err = rel_err(analytic, numeric);
        assert!(err.is_finite(), "{}: analytic {} numeric {}", e.name, analytic, numeric);
        if err > 1e-4 {
            eprintln!("{}: analytic {} numeric {} rel {}", e.name, analytic, numeric, err);
        }
        worst = worst.max(err);
        checked += 1;
    }
    let d = unit_direction(x.shape(), 999);
    let analytic = gx.map_or(0.0, |g| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum());
    let plus = x.zip_map(&d, |a, b| a + h * b);
    let minus = x.zip_map(&d, |a, b| a - h * b);
    let numeric = (eval(params, &plus) - eval(params, &minus)) / (2.0 * h);
    worst = worst.max(rel_err(analytic, numeric));
    (worst, checked + 1)
}

/// Source (labeled) and target training sets from the synthetic generator.
pub fn synthetic_sets(n: usize, size: usize, classes: usize, seed: u64) -> (TensorSet<f32>, TensorSet<f32>) {
    let scene = SceneSpec {
        size,
        ..SceneSpec::default()
    };
    let (src, tgt) = generate_synthetic_pair(seed, n, classes, &ShiftSpec::default(), &scene).unwrap();
    let source = TensorSet::from_labeled(&src.iter().map(|s| (&s.image, &s.label)).collect::<Vec<_>>(), classes).unwrap();
    let target = TensorSet::from_images(&tgt.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    (source, target)
}

fn changed(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> BTreeSet<String> {
    before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect()
}

/// Runs `steps` training steps stage by stage, hashing every parameter set
/// around each stage. Returns one message per violation of the update
/// partition: stage 1 may touch only the segmentor, its discriminator and
/// its teacher; stage 2 only the decoder, its discriminator and its teacher;
/// teachers move exactly as one EMA update of the pre-step student (or not at
/// all without self-training); the foundation never changes.
pub fn partition_audit(
    state: &mut TrainState<f32>,
    cfg: &TrainConfig,
    source: &TensorSet<f32>,
    target: &TensorSet<f32>,
    steps: usize,
) -> Vec<String> {
    let mut violations = Vec::new();
    let foundation = state.foundation.hash();
    for _ in 0..steps {
        let t = state.step;
        let (si, ti) = state.sample_indices(cfg.batch_size, source.len(), target.len());
        let src = source.labeled_batch(&si).unwrap();
        let tgt = target.batch(&ti).unwrap();
        let mut record = LossRecord {
            step: t,
            ..LossRecord::default()
        };

        let h0 = state.hashes();
        let mut expected_ema_ps = state.ema_ps.clone();
        if cfg.ablation.use_st {
            ema_update(&mut expected_ema_ps, &state.ps, cfg.alpha).unwrap();
        }
        let prompts = if cfg.ablation.use_ps {
            Some(stage1(state, cfg, &src, &tgt, &mut record).unwrap().0)
        } else {
            None
        };
        let h1 = state.hashes();
        let allowed1: &[&str] = if cfg.ablation.use_ps { &["ps", "df", "ema_ps"] } else { &[] };
        for name in changed(&h0, &h1) {
            if !allowed1.contains(&name.as_str()) {
                violations.push(format!("step {}: stage 1 changed {}", t, name));
            }
        }
        if cfg.ablation.use_ps && state.ema_ps.hash() != expected_ema_ps.hash() {
            violations.push(format!("step {}: ema_ps is not one EMA update of ps", t));
        }

        let mut expected_ema_fd = state.ema_fd.clone();
        if cfg.ablation.use_st {
            ema_update(&mut expected_ema_fd, &state.fd, cfg.alpha).unwrap();
        }
        stage2(state, cfg, &src, &tgt, prompts.as_ref(), &mut record).unwrap();
        let h2 = state.hashes();
        for name in changed(&h1, &h2) {
            if !["fd", "dl", "ema_fd"].contains(&name.as_str()) {
                violations.push(format!("step {}: stage 2 changed {}", t, name));
            }
        }
        if state.ema_fd.hash() != expected_ema_fd.hash() {
            violations.push(format!("step {}: ema_fd is not one EMA update of fd", t));
        }
        if state.foundation.hash() != foundation {
            violations.push(format!("step {}: foundation changed", t));
        }
    }
    violations
}
