mod common;

use std::path::Path;

use common::{partition_audit, random_tensor, synthetic_sets};
use uda_core::autograd::Tape;
use uda_core::checkpoint::{load_checkpoint, load_checkpoint_for, read_manifest, save_checkpoint, MANIFEST};
use uda_core::runner::{run_training, RunOptions, TensorSet};
use uda_core::tensor::Tensor;
use uda_core::trainer::*;

const C: usize = 4;
const SIZE: usize = 96;

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        num_classes: C,
        ..TrainConfig::default()
    }
}

fn ce_oracle(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[(b * c + k) * hw + p]).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            total -= (z[labels[b * hw + p] as usize].exp() / denom).ln();
        }
    }
    total / (n * hw) as f64
}

#[test]
fn seg_loss_closed_forms_and_oracle() {
    let tape = Tape::<f64>::new();
    let labels: Vec<u8> = (0..2 * 16).map(|i| (i % 6) as u8).collect();
    let uniform = tape.constant(Tensor::zeros(&[2, 6, 4, 4]));
    assert!((uniform.cross_entropy(&labels).unwrap().item() - 6f64.ln()).abs() < 1e-6);

    let mut onehot = Tensor::zeros(&[2, 6, 4, 4]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[((i / 16) * 6 + l as usize) * 16 + i % 16] = 100.0;
    }
    assert!(tape.constant(onehot).cross_entropy(&labels).unwrap().item() < 1e-12);

    for seed in 0..5 {
        let logits = random_tensor(&[2, 3, 4, 4], 2.0, seed);
        let labels: Vec<u8> = (0..32).map(|i| ((i * 7 + seed as usize) % 3) as u8).collect();
        let v = tape.constant(logits.clone()).cross_entropy(&labels).unwrap().item();
        assert!((v - ce_oracle(&logits, &labels)).abs() < 1e-6);
    }
    let bad = vec![3u8; 32];
    assert!(tape.constant(random_tensor(&[2, 3, 4, 4], 1.0, 0)).cross_entropy(&bad).is_err());
}

fn blob_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn trained_state(cfg: &TrainConfig, steps: u64) -> TrainState<f32> {
    let (source, target) = synthetic_sets(4, SIZE, C, 1);
    let mut state = TrainState::new(cfg).unwrap();
    let opts = RunOptions {
        stop_at: Some(steps),
        ..RunOptions::default()
    };
    run_training(&mut state, cfg, &source, &target, &opts, |_| {}).unwrap();
    state
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let cfg = small_config(10);
    let state = trained_state(&cfg, 2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_checkpoint(&state, &cfg, a.path()).unwrap();
    let (cfg2, loaded) = load_checkpoint::<f32>(a.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(loaded.hashes(), state.hashes());
    assert_eq!(loaded.step, 2);
    assert_eq!(loaded.opt_fd.m, state.opt_fd.m);
    assert_eq!(loaded.opt_fd.v, state.opt_fd.v);
    save_checkpoint(&loaded, &cfg2, b.path()).unwrap();
    assert_eq!(blob_files(a.path()), blob_files(b.path()));
}

#[test]
fn checkpoint_validation() {
    let cfg = small_config(10);
    let state = TrainState::<f32>::new(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&state, &cfg, dir.path()).unwrap();

    // a different step budget is fine, anything else is not
    let longer = small_config(20);
    assert!(load_checkpoint_for::<f32>(dir.path(), &longer).is_ok());
    let other = TrainConfig {
        gamma1: 0.5,
        ..small_config(10)
    };
    let err = load_checkpoint_for::<f32>(dir.path(), &other).unwrap_err();
    assert!(err.to_string().contains("different configuration"), "{}", err);
    assert!(load_checkpoint::<f64>(dir.path()).is_err());

    let m = read_manifest(dir.path()).unwrap();
    let blob = dir.path().join("blobs").join(&m.sets[0].entries[0].file);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[0] ^= 0x40;
    std::fs::write(&blob, &bytes).unwrap();
    let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
    assert!(err.to_string().contains("corrupt"), "{}", err);
    bytes.pop();
    std::fs::write(&blob, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());

    let manifest = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("\"version\": 1", "\"version\": 99")).unwrap();
    let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
    assert!(err.to_string().contains("version"), "{}", err);
    std::fs::write(&manifest, "{").unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
}

#[test]
fn update_partition_holds_for_every_component_combination() {
    let (source, target) = synthetic_sets(4, SIZE, C, 2);
    let mut variants = vec![Ablation::default(), Ablation::none()];
    for name in Ablation::COMPONENTS {
        variants.push(Ablation::default().without(&[name]).unwrap());
    }
    for ablation in variants {
        let cfg = TrainConfig {
            ablation,
            batch_size: 1,
            ..small_config(10)
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let (ema_ps, ema_fd) = (state.ema_ps.hash(), state.ema_fd.hash());
        let violations = partition_audit(&mut state, &cfg, &source, &target, 3);
        assert!(violations.is_empty(), "{:?}: {:?}", ablation, violations);
        if !ablation.use_st {
            assert_eq!(state.ema_ps.hash(), ema_ps);
            assert_eq!(state.ema_fd.hash(), ema_fd);
        }
    }
}

#[test]
fn gradient_presence_matches_enabled_components() {
    let (source, target) = synthetic_sets(2, SIZE, C, 3);
    let src = source.labeled_batch(&[0, 1]).unwrap();
    let tgt = target.batch(&[0, 1]).unwrap();
    let mut variants = vec![Ablation::default(), Ablation::none()];
    for name in Ablation::COMPONENTS {
        variants.push(Ablation::default().without(&[name]).unwrap());
    }
    for a in variants {
        let cfg = TrainConfig {
            ablation: a,
            ..small_config(10)
        };
        let mut state = TrainState::new(&cfg).unwrap();
        let (record, r1, r2) = train_step(&mut state, &cfg, &src, &tgt).unwrap();
        let mut s1 = vec![];
        if a.use_f_adv && a.use_ps {
            s1.push("df");
        }
        if a.use_ps {
            s1.push("ps");
        }
        let mut s2 = vec![];
        if a.use_l_adv {
            s2.push("dl");
        }
        s2.push("fd");
        assert_eq!(r1.touched(), s1, "{:?}", a);
        assert_eq!(r2.touched(), s2, "{:?}", a);
        assert_eq!(record.seg_ps.is_some(), a.use_ps);
        assert_eq!(record.adv_ps.is_some(), a.use_ps && a.use_f_adv);
        assert_eq!(record.disc_f.is_some(), a.use_ps && a.use_f_adv);
        assert_eq!(record.st_ps.is_some(), a.use_ps && a.use_st);
        assert!(record.seg_fd.is_some());
        assert_eq!(record.adv_fd.is_some(), a.use_l_adv);
        assert_eq!(record.disc_l.is_some(), a.use_l_adv);
        assert_eq!(record.st_fd.is_some(), a.use_st);
        assert!(!r2.grad_norms.contains_key("ps"));
    }
}

#[test]
fn zero_weights_reduce_to_supervised_training() {
    let (source, target) = synthetic_sets(2, SIZE, C, 4);
    let src = source.labeled_batch(&[0, 1]).unwrap();
    let tgt = target.batch(&[1, 0]).unwrap();
    let zero = TrainConfig {
        gamma1: 0.0,
        gamma2: 0.0,
        gamma3: 0.0,
        gamma4: 0.0,
        ..small_config(10)
    };
    let supervised = TrainConfig {
        ablation: Ablation::default().without(&["f_adv", "l_adv", "st"]).unwrap(),
        ..zero.clone()
    };
    let mut a = TrainState::<f32>::new(&zero).unwrap();
    let mut b = TrainState::<f32>::new(&supervised).unwrap();
    for _ in 0..2 {
        train_step(&mut a, &zero, &src, &tgt).unwrap();
        train_step(&mut b, &supervised, &src, &tgt).unwrap();
    }
    assert_eq!(a.ps.hash(), b.ps.hash());
    assert_eq!(a.fd.hash(), b.fd.hash());
}

#[test]
fn non_finite_input_aborts_the_step() {
    let cfg = small_config(10);
    let (source, target) = synthetic_sets(1, SIZE, C, 5);
    let src = source.labeled_batch(&[0]).unwrap();
    let tgt = target.batch(&[0]).unwrap().map(|_| f32::NAN);
    let mut state = TrainState::new(&cfg).unwrap();
    assert!(train_step(&mut state, &cfg, &src, &tgt).is_err());
}

fn seg_means(records: &[LossRecord], f: impl Fn(&LossRecord) -> Option<f64>) -> (f64, f64) {
    let vals: Vec<f64> = records.iter().map(|r| f(r).unwrap()).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&vals[..20]), mean(&vals[vals.len() - 20..]))
}

#[test]
fn smoke_run_is_finite_and_learns() {
    let cfg = small_config(200);
    let (source, target) = synthetic_sets(16, SIZE, C, 6);
    let mut state = TrainState::new(&cfg).unwrap();
    let records = run_training(&mut state, &cfg, &source, &target, &RunOptions::default(), |_| {}).unwrap();
    assert_eq!(records.len(), 200);
    for r in &records {
        assert!(r.all_finite(), "{}", r.to_json());
        for v in [r.seg_ps, r.adv_ps, r.st_ps, r.seg_fd, r.adv_fd, r.st_fd, r.disc_f, r.disc_l] {
            assert!(v.is_some(), "{}", r.to_json());
        }
    }
    let (first, last) = seg_means(&records, |r| r.seg_ps);
    assert!(last < first, "segmentor loss {} -> {}", first, last);
    let (first, last) = seg_means(&records, |r| r.seg_fd);
    assert!(last < first, "decoder loss {} -> {}", first, last);
}

fn trace(cfg: &TrainConfig, source: &TensorSet<f32>, target: &TensorSet<f32>, dir: &Path) -> Vec<String> {
    let mut state = TrainState::new(cfg).unwrap();
    let opts = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    };
    run_training(&mut state, cfg, source, target, &opts, |_| {}).unwrap();
    std::fs::read_to_string(dir.join(uda_core::runner::LOSS_TRACE))
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn same_seed_same_trace_and_resume_matches() {
    let cfg = TrainConfig {
        batch_size: 1,
        ..small_config(6)
    };
    let (source, target) = synthetic_sets(4, SIZE, C, 7);
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let first = trace(&cfg, &source, &target, a.path());
    assert_eq!(first.len(), 6);
    assert_eq!(first, trace(&cfg, &source, &target, b.path()));

    let other = trace(&TrainConfig { seed: 1, ..cfg.clone() }, &source, &target, b.path());
    assert_ne!(first, other);

    let mut state = TrainState::new(&cfg).unwrap();
    let stop = RunOptions {
        out_dir: Some(c.path().to_path_buf()),
        stop_at: Some(3),
        ..RunOptions::default()
    };
    run_training(&mut state, &cfg, &source, &target, &stop, |_| {}).unwrap();
    drop(state);
    let mut resumed = load_checkpoint_for::<f32>(&c.path().join(uda_core::runner::CHECKPOINT_DIR), &cfg).unwrap();
    assert_eq!(resumed.step, 3);
    let rest = RunOptions {
        out_dir: Some(c.path().to_path_buf()),
        ..RunOptions::default()
    };
    run_training(&mut resumed, &cfg, &source, &target, &rest, |_| {}).unwrap();
    let joined: Vec<String> = std::fs::read_to_string(c.path().join(uda_core::runner::LOSS_TRACE))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(joined, first);
}

#[test]
fn predictions_cover_the_batch() {
    let cfg = small_config(10);
    let state = TrainState::<f32>::new(&cfg).unwrap();
    let (_, target) = synthetic_sets(2, SIZE, C, 8);
    let p = predict(&state, &cfg, &target.batch(&[0, 1]).unwrap()).unwrap();
    assert_eq!(p.classes.len(), 2 * SIZE * SIZE);
    assert!(p.classes.iter().all(|&c| (c as usize) < C));
    assert_eq!(p.prompt.as_ref().unwrap().len(), 2 * SIZE * SIZE);
    assert_eq!(p.maps.raw.shape(), &[2, 3, SIZE, SIZE]);
}
