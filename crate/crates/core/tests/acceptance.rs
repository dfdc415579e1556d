//! Acceptance criteria. Runs without the libtest harness and prints one
//! PASS/FAIL line per criterion; exits nonzero when any criterion fails.
//!
//! The benchmark criterion stops once its 30-minute budget is spent. Set
//! `UDA_BENCH_TO_COMPLETION=1` to finish every run anyway and report the
//! mIoU ordering.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::{jvp_check, partition_audit, random_tensor, synthetic_sets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uda_core::adversarial::{disc_loss, gen_adv_loss, DiscriminatorSpec};
use uda_core::autograd::Tape;
use uda_core::benchmark::{run_one, BenchmarkConfig, BenchmarkData, BenchmarkReport, Variant};
use uda_core::data::{crop_patches, PatchSpec, RasterImage};
use uda_core::decoder::DecoderConfig;
use uda_core::foundation::{Foundation, FoundationConfig};
use uda_core::metrics::{ConfusionCounts, UndefinedPolicy};
use uda_core::nn::BnMode;
use uda_core::params::{EntryKind, ParameterSet};
use uda_core::runner::{run_training, RunOptions, CHECKPOINT_DIR, LOSS_TRACE};
use uda_core::self_training::{ema_update, st_loss};
use uda_core::tensor::Tensor;
use uda_core::trainer::{Ablation, TrainConfig, TrainState};
use uda_core::checkpoint::load_checkpoint_for;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

// 1. tiling fidelity

fn tiling() -> Outcome {
    let spec = PatchSpec {
        patch_size: 512,
        stride: 512,
    };
    let mut total = 0;
    let mut cropping = Duration::ZERO;
    for k in 0..38u8 {
        let (h, w) = (6000, 6000);
        let mut pixels = vec![0u8; h * w * 3];
        for (i, px) in pixels.chunks_exact_mut(3).enumerate() {
            px.copy_from_slice(&[(i % 251) as u8 ^ k, (i / w) as u8, k]);
        }
        let image = RasterImage::new(h, w, pixels).unwrap();
        let start = Instant::now();
        let patches = crop_patches(&image, None, &spec).map_err(|e| e.to_string())?;
        cropping += start.elapsed();
        let last = &patches.last().unwrap().0;
        check(
            last.pixel(511, 511) == image.pixel(10 * 512 + 511, 10 * 512 + 511),
            format!("raster {}: last patch misplaced", k),
        )?;
        total += patches.len();
    }
    check(total == 4598, format!("{} patches, expected 4598", total))?;
    let secs = cropping.as_secs_f64();
    check(secs < 30.0, format!("cropping took {:.1}s", secs))?;
    Ok(format!("{} patches in {:.2}s", total, secs))
}

// 2. metric oracle equivalence

fn set_scores(pred: &[u8], gt: &[u8], k: u8) -> Option<(f64, f64)> {
    let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == k).collect();
    let g: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == k).collect();
    let union = p.union(&g).count();
    if union == 0 {
        return None;
    }
    let inter = p.intersection(&g).count() as f64;
    Some((inter / union as f64, 2.0 * inter / (p.len() + g.len()) as f64))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 6u8;
    let mut worst = 0.0f64;
    let mut identity = 0.0f64;
    for _ in 0..50 {
        let gt: Vec<u8> = (0..32 * 32).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<u8> = gt
            .iter()
            .map(|&g| if rng.random_bool(0.5) { g } else { rng.random_range(0..c) })
            .collect();
        let mut counts = ConfusionCounts::new(c as usize);
        counts.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        let r = counts.evaluate(UndefinedPolicy::Exclude);
        for k in 0..c {
            let (iou, f1) = (r.iou.per_class[k as usize], r.f1.per_class[k as usize]);
            match set_scores(&pred, &gt, k) {
                None => check(iou.is_none() && f1.is_none(), format!("class {} should be undefined", k))?,
                Some((oi, of)) => {
                    let (iou, f1) = (iou.ok_or("missing IoU")?, f1.ok_or("missing F1")?);
                    worst = worst.max((iou - oi).abs()).max((f1 - of).abs());
                    identity = identity.max((f1 - 2.0 * iou / (1.0 + iou)).abs());
                }
            }
        }
    }
    check(worst <= 1e-12, format!("oracle deviation {:.3e}", worst))?;
    check(identity <= 1e-12, format!("F1/IoU identity deviation {:.3e}", identity))?;
    Ok(format!("max deviation {:.1e}, identity {:.1e}", worst, identity))
}

// 3. attention guidance

fn attention() -> Outcome {
    let mut notes = Vec::new();
    for spatial_mean in [true, false] {
        let cfg = DecoderConfig {
            spatial_mean,
            ..DecoderConfig::default()
        };
        let (sum, n, err) = attention_with(&cfg)?;
        notes.push(format!(
            "spatial_mean {}: |Σv - 1| ≤ {:.1e}, {} gradient directions, worst relative error {:.1e}",
            spatial_mean, sum, n, err
        ));
    }
    Ok(notes.join("; "))
}

fn attention_with(cfg: &DecoderConfig) -> Result<(f64, usize, f64), String> {
    let f = Foundation::<f64>::new(&FoundationConfig::default(), 4).map_err(|e| e.to_string())?;
    let channels = FoundationConfig::default().level_channels;
    let mut worst_sum = 0.0f64;
    for seed in 0..10 {
        let fs = f.encode_image(&random_tensor(&[3, 3, 32, 32], 1.0, seed)).map_err(|e| e.to_string())?;
        let m = random_tensor(&[3, 1, 32, 32], 2.0, seed + 50).map(|v| 1.0 / (1.0 + (-v).exp()));
        let p = cfg.init::<f64>(&channels, 4, seed).map_err(|e| e.to_string())?;
        let tape = Tape::new();
        let b = p.bind(&tape, false);
        let out = cfg.forward(&b, &fs, &m, BnMode::Train { track: false }).map_err(|e| e.to_string())?;
        for row in out.weights.value().data().chunks(cfg.channels) {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(worst_sum <= 1e-6, format!("channel weights sum off by {:.3e}", worst_sum))?;

    let fs = f.encode_image(&random_tensor(&[1, 3, 16, 16], 1.0, 77)).map_err(|e| e.to_string())?;
    let m = random_tensor(&[1, 1, 16, 16], 1.0, 78).map(|v| 1.0 / (1.0 + (-v).exp()));
    let r = random_tensor(&[1, 4, 16, 16], 1.0, 79);
    let p = cfg.init::<f64>(&channels, 4, 80).map_err(|e| e.to_string())?;
    let (err, n) = jvp_check(&p, &Tensor::zeros(&[1]), |b, _| {
        cfg.forward(b, &fs, &m, BnMode::Train { track: false })?.logits.dot_const(&r)
    });
    check(err < 1e-4, format!("gradient relative error {:.3e}", err))?;
    Ok((worst_sum, n, err))
}

// 4. EMA law

fn ema_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let alpha: f64 = rng.random_range(0.0..1.0);
        let n = (trial * 100 / 19).max(1);
        let t0 = random_tensor(&[7], 3.0, trial as u64);
        let s = random_tensor(&[7], 3.0, 100 + trial as u64);
        let set = |t: &Tensor<f64>| {
            let mut p = ParameterSet::new();
            p.insert("w", t.clone(), EntryKind::Weight).unwrap();
            p
        };
        let mut teacher = set(&t0);
        let student = set(&s);
        for _ in 0..n {
            ema_update(&mut teacher, &student, alpha).map_err(|e| e.to_string())?;
        }
        let dist = |a: &Tensor<f64>, b: &Tensor<f64>| a.zip_map(b, |x, y| x - y).sq_norm().sqrt();
        let got = dist(teacher.get("w").unwrap(), &s);
        let want = alpha.powi(n) * dist(&t0, &s);
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-9, format!("deviation {:.3e}", worst))?;
    Ok(format!("20 trials, 1 ≤ n ≤ 100, max deviation {:.1e}", worst))
}

// 5. freeze / partition audit

fn partition() -> Outcome {
    let (source, target) = synthetic_sets(8, 128, 4, 5);
    let cfg = TrainConfig {
        steps: 50,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let violations = partition_audit(&mut state, &cfg, &source, &target, 50);
    check(violations.is_empty(), format!("{:?}", violations))?;

    let no_st = TrainConfig {
        ablation: Ablation::default().without(&["st"]).unwrap(),
        ..cfg
    };
    let mut state = TrainState::new(&no_st).map_err(|e| e.to_string())?;
    let (ema_ps, ema_fd) = (state.ema_ps.hash(), state.ema_fd.hash());
    let violations = partition_audit(&mut state, &no_st, &source, &target, 50);
    check(violations.is_empty(), format!("without self-training: {:?}", violations))?;
    check(
        state.ema_ps.hash() == ema_ps && state.ema_fd.hash() == ema_fd,
        "teachers changed without self-training".into(),
    )?;
    Ok("2 × 50 steps, no violations".into())
}

// 6. loss oracles

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ce_scalar(logits: &Tensor<f64>, labels: &[u8]) -> f64 {
    let s = logits.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let z: Vec<f64> = (0..c).map(|k| logits.data()[(b * c + k) * hw + p]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[labels[b * hw + p] as usize];
        }
    }
    total / (n * hw) as f64
}

fn loss_oracles() -> Outcome {
    let tape = Tape::<f64>::new();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let logits = random_tensor(&[2, 3, 4, 4], 2.0, seed);
        let labels: Vec<u8> = (0..32).map(|i| ((i * 5 + seed as usize) % 3) as u8).collect();
        let seg = tape.constant(logits.clone()).cross_entropy(&labels).map_err(|e| e.to_string())?.item();
        worst = worst.max((seg - ce_scalar(&logits, &labels)).abs());
        let st = st_loss(&labels, tape.constant(logits.clone()), None).map_err(|e| e.to_string())?.item();
        worst = worst.max((st - ce_scalar(&logits, &labels)).abs());

        let real = random_tensor(&[2, 3, 4, 4], 2.0, seed + 10);
        let fake = random_tensor(&[2, 3, 4, 4], 2.0, seed + 20);
        let d = disc_loss(tape.constant(real.clone()), tape.constant(fake.clone())).map_err(|e| e.to_string())?.item();
        let m = real.len() as f64;
        let want = -real.data().iter().map(|&x| sigmoid(x).ln()).sum::<f64>() / m
            - fake.data().iter().map(|&x| (1.0 - sigmoid(x)).ln()).sum::<f64>() / m;
        worst = worst.max((d - want).abs());
        let g = gen_adv_loss(tape.constant(fake.clone())).map_err(|e| e.to_string())?.item();
        worst = worst.max((g + fake.data().iter().map(|&x| sigmoid(x).ln()).sum::<f64>() / m).abs());
    }
    check(worst <= 1e-6, format!("oracle deviation {:.3e}", worst))?;

    let labels: Vec<u8> = (0..32).map(|i| (i % 6) as u8).collect();
    let uniform = tape.constant(Tensor::zeros(&[2, 6, 4, 4]));
    let ce = uniform.cross_entropy(&labels).map_err(|e| e.to_string())?.item();
    let zeros = tape.constant(Tensor::zeros(&[2, 3, 4, 4]));
    let d = disc_loss(zeros, zeros).map_err(|e| e.to_string())?.item();
    let closed = (ce - 6f64.ln()).abs().max((d - 2.0 * 2f64.ln()).abs());
    check(closed <= 1e-6, format!("closed-form deviation {:.3e}", closed))?;
    Ok(format!("oracle deviation {:.1e}, closed forms {:.1e}", worst, closed))
}

// 7. discriminator geometry

fn geometry() -> Outcome {
    let spec = DiscriminatorSpec::new(4);
    check(spec.output_dims(512, 512) == Some((126, 126)), format!("{:?} at 512", spec.output_dims(512, 512)))?;
    let p = spec.init::<f32>(0).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let b = p.bind(&tape, false);
    let small = spec.forward(&b, tape.constant(Tensor::zeros(&[1, 4, 128, 128]))).map_err(|e| e.to_string())?;
    check(small.shape() == [1, 1, 30, 30], format!("{:?} at 128", small.shape()))?;
    let big = spec.forward(&b, tape.constant(Tensor::zeros(&[1, 4, 512, 512]))).map_err(|e| e.to_string())?;
    check(big.shape() == [1, 1, 126, 126], format!("{:?} at 512", big.shape()))?;
    Ok("512 → 1×126×126, 128 → 1×30×30".into())
}

// 8. desk-scale adaptation benchmark

fn benchmark() -> Outcome {
    let budget = Duration::from_secs(30 * 60);
    let to_completion = std::env::var("UDA_BENCH_TO_COMPLETION").is_ok_and(|v| v == "1");
    let cfg = BenchmarkConfig::default();
    let start = Instant::now();
    let data = BenchmarkData::generate(&cfg).map_err(|e| e.to_string())?;
    // baseline and full first so that a partial run still compares them
    let mut jobs = Vec::new();
    for &s in &cfg.seeds {
        jobs.push((Variant::SourceOnly, s));
        jobs.push((Variant::Full, s));
    }
    for v in Variant::ABLATIONS {
        for &s in &cfg.seeds {
            jobs.push((v, s));
        }
    }
    let total = jobs.len();
    let mut report = BenchmarkReport {
        runs: Vec::new(),
        wall_seconds: 0.0,
        threads: 1,
    };
    for (v, s) in jobs {
        if start.elapsed() > budget && !to_completion {
            break;
        }
        let r = run_one(&data, &cfg.train, v, s).map_err(|e| e.to_string())?;
        eprintln!(
            "  {:<12} seed {}  target mIoU {:6.2}  source mIoU {:6.2}  ({:.0}s)",
            v.name(),
            s,
            100.0 * r.target_miou,
            100.0 * r.source_miou,
            r.seconds
        );
        report.runs.push(r);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    eprint!("{}", report.summary());
    let done = report.runs.len();
    let baseline = report.full_beats_baseline_per_seed(&cfg.seeds);
    let ablations = report.full_beats_ablations();
    let minutes = report.wall_seconds / 60.0;
    let summary = format!(
        "{}/{} runs in {:.1} min; full > source-only on every seed: {}; full > every ablation: {}",
        done, total, minutes, baseline, ablations
    );
    check(done == total && baseline && ablations && minutes < 30.0, summary.clone())?;
    Ok(summary)
}

// 9. determinism and resume

fn trace_lines(dir: &std::path::Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(LOSS_TRACE))
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

fn determinism() -> Outcome {
    let (source, target) = synthetic_sets(8, 128, 4, 9);
    let cfg = TrainConfig {
        steps: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = |stop: Option<u64>, dir: &std::path::Path, state: Option<TrainState<f32>>| -> Result<(), String> {
        let mut state = match state {
            Some(s) => s,
            None => TrainState::new(&cfg).map_err(|e| e.to_string())?,
        };
        let opts = RunOptions {
            out_dir: Some(dir.to_path_buf()),
            stop_at: stop,
            ..RunOptions::default()
        };
        run_training(&mut state, &cfg, &source, &target, &opts, |_| {}).map_err(|e| e.to_string())?;
        Ok(())
    };
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    run(None, a.path(), None)?;
    run(None, b.path(), None)?;
    let first = trace_lines(a.path());
    check(first.len() == 20, format!("{} trace lines", first.len()))?;
    check(first == trace_lines(b.path()), "same-seed traces differ".into())?;

    run(Some(10), c.path(), None)?;
    let resumed = load_checkpoint_for::<f32>(&c.path().join(CHECKPOINT_DIR), &cfg).map_err(|e| e.to_string())?;
    run(None, c.path(), Some(resumed))?;
    check(trace_lines(c.path()) == first, "resumed trace differs from the unbroken run".into())?;
    Ok("20-step traces bit-identical; resume at step 10 reproduces the trace".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 tiling fidelity", tiling),
        ("2 metric oracle equivalence", metric_oracle),
        ("3 attention-guidance correctness", attention),
        ("4 EMA law", ema_law),
        ("5 freeze/partition audit", partition),
        ("6 loss oracles", loss_oracles),
        ("7 discriminator geometry", geometry),
        ("8 desk-scale adaptation benchmark", benchmark),
        ("9 determinism and resume", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  criterion {} ({:.1}s): {}", name, secs, msg),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {} ({:.1}s): {}", name, secs, msg);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
