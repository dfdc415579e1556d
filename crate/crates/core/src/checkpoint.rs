//! Checkpoint directories: a JSON manifest plus one little-endian blob per
//! parameter array and optimizer moment.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::{EntryKind, ParameterSet};
use crate::tensor::{Element, Tensor};
use crate::trainer::{TrainConfig, TrainState, SET_NAMES};

pub const FORMAT: &str = "uda-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const BLOBS: &str = "blobs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub step: u64,
    pub config: TrainConfig,
    pub rng: RngState,
    pub foundation_seed: u64,
    pub foundation_hash: String,
    pub sets: Vec<SetManifest>,
    pub optimizers: Vec<OptimizerManifest>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128 exactly.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetManifest {
    pub name: String,
    pub hash: String,
    pub entries: Vec<EntryManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryManifest {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerManifest {
    pub name: String,
    pub step: u64,
    pub m_files: Vec<String>,
    pub v_files: Vec<String>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode_rng(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed().iter().map(|b| format!("{:02x}", b)).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn decode_rng(s: &RngState) -> Result<ChaCha8Rng> {
    if s.seed.len() != 64 {
        return Err(ckpt_err("RNG seed must be 32 hex bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16).map_err(|_| ckpt_err("RNG seed is not hex"))?;
    }
    let word_pos: u128 = s.word_pos.parse().map_err(|_| ckpt_err("RNG word position is not an integer"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' })
        .collect()
}

fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn write_blob(dir: &Path, file: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(file);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob<T: Element>(dir: &Path, file: &str, shape: &[usize]) -> Result<Tensor<T>> {
    if file.contains('/') || file.contains('\\') || file.starts_with('.') {
        return Err(ckpt_err(format!("invalid blob name {:?}", file)));
    }
    let path = dir.join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let len: usize = shape.iter().product();
    if bytes.len() != len * T::BYTES {
        return Err(ckpt_err(format!(
            "blob {} has {} bytes, expected {}",
            file,
            bytes.len(),
            len * T::BYTES
        )));
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

fn set_mut<'a, T: Element>(state: &'a mut TrainState<T>, name: &str) -> &'a mut ParameterSet<T> {
    match name {
        "ps" => &mut state.ps,
        "ema_ps" => &mut state.ema_ps,
        "df" => &mut state.df,
        "fd" => &mut state.fd,
        "ema_fd" => &mut state.ema_fd,
        _ => &mut state.dl,
    }
}

const OPT_NAMES: [&str; 4] = ["ps", "df", "fd", "dl"];

fn opt<'a, T: Element>(state: &'a TrainState<T>, name: &str) -> &'a AdamState<T> {
    match name {
        "ps" => &state.opt_ps,
        "df" => &state.opt_df,
        "fd" => &state.opt_fd,
        _ => &state.opt_dl,
    }
}

fn opt_mut<'a, T: Element>(state: &'a mut TrainState<T>, name: &str) -> &'a mut AdamState<T> {
    match name {
        "ps" => &mut state.opt_ps,
        "df" => &mut state.opt_df,
        "fd" => &mut state.opt_fd,
        _ => &mut state.opt_dl,
    }
}

pub fn save_checkpoint<T: Element>(state: &TrainState<T>, cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let blob_dir = dir.join(BLOBS);
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let mut sets = Vec::new();
    for &set_name in &SET_NAMES {
        let set = state.set(set_name).expect("known set");
        let mut entries = Vec::new();
        for (i, e) in set.entries().iter().enumerate() {
            let file = format!("{}.{:03}.{}.bin", set_name, i, sanitize(&e.name));
            write_blob(&blob_dir, &file, &encode(&e.value))?;
            entries.push(EntryManifest {
                name: e.name.clone(),
                kind: e.kind,
                shape: e.value.shape().to_vec(),
                frozen: e.frozen,
                file,
            });
        }
        sets.push(SetManifest {
            name: set_name.to_string(),
            hash: set.hash(),
            entries,
        });
    }
    let mut optimizers = Vec::new();
    for &name in &OPT_NAMES {
        let o = opt(state, name);
        let mut m_files = Vec::new();
        let mut v_files = Vec::new();
        for (i, (m, v)) in o.m.iter().zip(&o.v).enumerate() {
            let mf = format!("opt.{}.m.{:03}.bin", name, i);
            let vf = format!("opt.{}.v.{:03}.bin", name, i);
            write_blob(&blob_dir, &mf, &encode(m))?;
            write_blob(&blob_dir, &vf, &encode(v))?;
            m_files.push(mf);
            v_files.push(vf);
        }
        optimizers.push(OptimizerManifest {
            name: name.to_string(),
            step: o.step,
            m_files,
            v_files,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::NAME.into(),
        step: state.step,
        config: cfg.clone(),
        rng: encode_rng(&state.rng),
        foundation_seed: cfg.foundation.seed,
        foundation_hash: state.foundation.hash(),
        sets,
        optimizers,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ckpt_err(format!("corrupt manifest: {}", e)))?;
    if m.format != FORMAT {
        return Err(ckpt_err(format!("not a checkpoint manifest (format {:?})", m.format)));
    }
    if m.version != VERSION {
        return Err(ckpt_err(format!(
            "checkpoint version {} is not supported (expected {})",
            m.version, VERSION
        )));
    }
    Ok(m)
}

/// Loads a checkpoint with the configuration stored inside it.
pub fn load_checkpoint<T: Element>(dir: &Path) -> Result<(TrainConfig, TrainState<T>)> {
    let m = read_manifest(dir)?;
    let state = restore(dir, &m)?;
    Ok((m.config, state))
}

/// Loads a checkpoint, rejecting it unless its configuration equals `cfg`
/// in everything but the step budget.
pub fn load_checkpoint_for<T: Element>(dir: &Path, cfg: &TrainConfig) -> Result<TrainState<T>> {
    let m = read_manifest(dir)?;
    let mut stored = m.config.clone();
    stored.steps = cfg.steps;
    if &stored != cfg {
        return Err(ckpt_err("checkpoint was written with a different configuration"));
    }
    restore(dir, &m)
}

fn restore<T: Element>(dir: &Path, m: &Manifest) -> Result<TrainState<T>> {
    if m.dtype != T::NAME {
        return Err(ckpt_err(format!("checkpoint holds {} arrays, expected {}", m.dtype, T::NAME)));
    }
    m.config
        .validate()
        .map_err(|e| ckpt_err(format!("stored configuration is invalid: {}", e)))?;
    let mut state = TrainState::<T>::new(&m.config)?;
    if m.foundation_seed != m.config.foundation.seed || state.foundation.hash() != m.foundation_hash {
        return Err(ckpt_err("foundation surrogate does not match the recorded seed and hash"));
    }
    let blob_dir = dir.join(BLOBS);
    if m.sets.len() != SET_NAMES.len() {
        return Err(ckpt_err("checkpoint does not list every parameter set"));
    }
    for (sm, &want) in m.sets.iter().zip(&SET_NAMES) {
        if sm.name != want {
            return Err(ckpt_err(format!("unexpected parameter set {:?}", sm.name)));
        }
        let set = set_mut(&mut state, want);
        if sm.entries.len() != set.len() {
            return Err(ckpt_err(format!("set {} has {} entries, expected {}", want, sm.entries.len(), set.len())));
        }
        for (em, entry) in sm.entries.iter().zip(set.entries_mut()) {
            if em.name != entry.name || em.kind != entry.kind || em.shape != entry.value.shape() {
                return Err(ckpt_err(format!("entry {} of set {} does not match the model", em.name, want)));
            }
            entry.value = read_blob(&blob_dir, &em.file, &em.shape)?;
            entry.frozen = em.frozen;
        }
        if set.hash() != sm.hash {
            return Err(ckpt_err(format!("hash mismatch for set {}; the checkpoint is corrupt", want)));
        }
    }
    if m.optimizers.len() != OPT_NAMES.len() {
        return Err(ckpt_err("checkpoint does not list every optimizer"));
    }
    for (om, &want) in m.optimizers.iter().zip(&OPT_NAMES) {
        if om.name != want {
            return Err(ckpt_err(format!("unexpected optimizer {:?}", om.name)));
        }
        let shapes: Vec<Vec<usize>> = state
            .set(want)
            .expect("known set")
            .entries()
            .iter()
            .map(|e| e.value.shape().to_vec())
            .collect();
        if om.m_files.len() != shapes.len() || om.v_files.len() != shapes.len() {
            return Err(ckpt_err(format!("optimizer {} has the wrong number of moments", want)));
        }
        let o = opt_mut(&mut state, want);
        o.step = om.step;
        for (i, shape) in shapes.iter().enumerate() {
            o.m[i] = read_blob(&blob_dir, &om.m_files[i], shape)?;
            o.v[i] = read_blob(&blob_dir, &om.v_files[i], shape)?;
        }
    }
    state.step = m.step;
    state.rng = decode_rng(&m.rng)?;
    Ok(state)
}
