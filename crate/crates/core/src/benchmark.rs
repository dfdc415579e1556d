//! Desk-scale adaptation benchmark: the full method, a source-only baseline
//! and the four single-component ablations over several seeds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic_pair, split_dataset, Sample, SceneSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::metrics::UndefinedPolicy;
use crate::runner::{evaluate, run_training, RunOptions, TensorSet};
use crate::trainer::{Ablation, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SourceOnly,
    WithoutPs,
    WithoutFAdv,
    WithoutLAdv,
    WithoutSt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::SourceOnly,
        Variant::WithoutPs,
        Variant::WithoutFAdv,
        Variant::WithoutLAdv,
        Variant::WithoutSt,
    ];

    pub const ABLATIONS: [Variant; 4] = [
        Variant::WithoutPs,
        Variant::WithoutFAdv,
        Variant::WithoutLAdv,
        Variant::WithoutSt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SourceOnly => "source-only",
            Variant::WithoutPs => "w/o PS",
            Variant::WithoutFAdv => "w/o F-Adv",
            Variant::WithoutLAdv => "w/o L-Adv",
            Variant::WithoutSt => "w/o ST",
        }
    }

    /// Training configuration of this variant derived from the full one.
    /// The source-only baseline zeroes all four auxiliary weights and turns
    /// every component off.
    pub fn config(self, full: &TrainConfig) -> TrainConfig {
        let mut cfg = full.clone();
        let drop = |c: &str| Ablation::default().without(&[c]).expect("known component");
        cfg.ablation = match self {
            Variant::Full => Ablation::default(),
            Variant::SourceOnly => {
                cfg.gamma1 = 0.0;
                cfg.gamma2 = 0.0;
                cfg.gamma3 = 0.0;
                cfg.gamma4 = 0.0;
                Ablation::none()
            }
            Variant::WithoutPs => drop("ps"),
            Variant::WithoutFAdv => drop("f_adv"),
            Variant::WithoutLAdv => drop("l_adv"),
            Variant::WithoutSt => drop("st"),
        };
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub train_images: usize,
    pub test_images: usize,
    pub shift: ShiftSpec,
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seeds: vec![0, 1, 2],
            data_seed: 2024,
            train_images: 400,
            test_images: 100,
            shift: ShiftSpec::channel_permutation([2, 0, 1]),
            scene: SceneSpec::default(),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub target_miou: f64,
    pub source_miou: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub runs: Vec<RunResult>,
    pub wall_seconds: f64,
    pub threads: usize,
}

impl BenchmarkReport {
    pub fn runs_of(&self, v: Variant) -> Vec<&RunResult> {
        self.runs.iter().filter(|r| r.variant == v).collect()
    }

    pub fn target_miou(&self, v: Variant, seed: u64) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.variant == v && r.seed == seed)
            .map(|r| r.target_miou)
    }

    pub fn mean_target_miou(&self, v: Variant) -> Option<f64> {
        let runs = self.runs_of(v);
        (!runs.is_empty()).then(|| runs.iter().map(|r| r.target_miou).sum::<f64>() / runs.len() as f64)
    }

    /// Full strictly above source-only on every seed.
    pub fn full_beats_baseline_per_seed(&self, seeds: &[u64]) -> bool {
        seeds.iter().all(|&s| match (self.target_miou(Variant::Full, s), self.target_miou(Variant::SourceOnly, s)) {
            (Some(f), Some(b)) => f > b,
            _ => false,
        })
    }

    /// Full strictly above every single-component ablation in mean mIoU.
    pub fn full_beats_ablations(&self) -> bool {
        let Some(full) = self.mean_target_miou(Variant::Full) else {
            return false;
        };
        Variant::ABLATIONS
            .iter()
            .all(|&v| self.mean_target_miou(v).is_some_and(|m| full > m))
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for v in Variant::ALL {
            let runs = self.runs_of(v);
            if runs.is_empty() {
                continue;
            }
            let per_seed: Vec<String> = runs
                .iter()
                .map(|r| format!("{}:{:.2}", r.seed, 100.0 * r.target_miou))
                .collect();
            out.push_str(&format!(
                "{:<12} mean target mIoU {:6.2}  [{}]  source {:6.2}\n",
                v.name(),
                100.0 * self.mean_target_miou(v).unwrap_or(f64::NAN),
                per_seed.join(" "),
                100.0 * runs.iter().map(|r| r.source_miou).sum::<f64>() / runs.len() as f64
            ));
        }
        out
    }
}

/// Train and test splits of both domains.
pub struct BenchmarkData {
    pub source_train: TensorSet<f32>,
    pub source_test: TensorSet<f32>,
    pub target_train: TensorSet<f32>,
    pub target_test: TensorSet<f32>,
}

impl BenchmarkData {
    pub fn generate(cfg: &BenchmarkConfig) -> Result<Self> {
        let n = cfg.train_images + cfg.test_images;
        let c = cfg.train.num_classes;
        let (source, target) = generate_synthetic_pair(cfg.data_seed, n, c, &cfg.shift, &cfg.scene)?;
        let fraction = cfg.train_images as f64 / n as f64;
        let (s_train, s_test) = split_dataset(&source, fraction, cfg.data_seed)?;
        let (t_train, t_test) = split_dataset(&target, fraction, cfg.data_seed ^ 1)?;
        let labeled = |s: &[Sample]| {
            TensorSet::from_labeled(&s.iter().map(|x| (&x.image, &x.label)).collect::<Vec<_>>(), c)
        };
        Ok(BenchmarkData {
            source_train: labeled(&s_train)?,
            source_test: labeled(&s_test)?,
            target_train: TensorSet::from_images(&t_train.iter().map(|x| &x.image).collect::<Vec<_>>())?,
            target_test: labeled(&t_test)?,
        })
    }
}

pub fn run_one(data: &BenchmarkData, cfg: &TrainConfig, variant: Variant, seed: u64) -> Result<RunResult> {
    let start = Instant::now();
    let mut cfg = variant.config(cfg);
    cfg.seed = seed;
    let mut state = TrainState::<f32>::new(&cfg)?;
    run_training(&mut state, &cfg, &data.source_train, &data.target_train, &RunOptions::default(), |_| {})?;
    let miou = |set: &TensorSet<f32>| -> Result<f64> {
        evaluate(&state, &cfg, set, 4)?
            .iou(UndefinedPolicy::Exclude)
            .mean
            .ok_or_else(|| Error::InvalidArgument("empty evaluation set".into()))
    };
    Ok(RunResult {
        variant,
        seed,
        target_miou: miou(&data.target_test)?,
        source_miou: miou(&data.source_test)?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs every (variant, seed) pair, in parallel across worker threads.
pub fn run_benchmark(cfg: &BenchmarkConfig, mut progress: impl FnMut(&RunResult) + Send) -> Result<BenchmarkReport> {
    let start = Instant::now();
    let data = BenchmarkData::generate(cfg)?;
    let mut jobs: Vec<(Variant, u64)> = Vec::new();
    for &v in &cfg.variants {
        for &s in &cfg.seeds {
            jobs.push((v, s));
        }
    }
    // longest jobs first
    let cost = |v: Variant| match v {
        Variant::Full => 0,
        Variant::WithoutFAdv | Variant::WithoutSt => 1,
        Variant::WithoutPs => 2,
        Variant::WithoutLAdv => 3,
        Variant::SourceOnly => 4,
    };
    jobs.sort_by_key(|&(v, s)| (cost(v), s));
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<RunResult>>> = Mutex::new(Vec::new());
    let progress = Mutex::new(&mut progress);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(v, s)) = jobs.get(i) else { break };
                let r = run_one(&data, &cfg.train, v, s);
                if let Ok(run) = &r {
                    (progress.lock().expect("progress lock"))(run);
                }
                results.lock().expect("results lock").push(r);
            });
        }
    });
    let mut runs = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by_key(|r| (Variant::ALL.iter().position(|&v| v == r.variant), r.seed));
    Ok(BenchmarkReport {
        runs,
        wall_seconds: start.elapsed().as_secs_f64(),
        threads,
    })
}
