//! Checkpoint archives: one safetensors file holding every parameter, the
//! optimizer moments, and a JSON header with the config and loop state.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use autograd::{Adam, ParamGroup, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{Phase, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::networks::{Group, Model, ModelParams};

pub const FORMAT: &str = "pdanet-checkpoint";
pub const VERSION: u32 = 1;
const HEADER_KEY: &str = "pdanet";
pub const EXTENSION: &str = "safetensors";

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    /// `u128` as decimal text.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    mmd_bandwidth: Option<f64>,
    rng: RngState,
    /// Adam step count keyed by `phase/group`.
    adam_steps: BTreeMap<String, u64>,
    config: TrainConfig,
}

fn param_key(group: Group, name: &str) -> String {
    format!("param/{}/{name}", group.name())
}

fn moment_key(phase: Phase, group: Group, which: &str, name: &str) -> String {
    format!("adam/{}/{}/{which}/{name}", phase.name(), group.name())
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serialises `state` and `cfg`. Equal inputs give identical bytes.
pub fn to_bytes(state: &TrainState, cfg: &TrainConfig) -> Result<Vec<u8>> {
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (group, p) in state.params.groups() {
        for (name, t) in p.iter() {
            blobs.push((param_key(group, name), t.shape().to_vec(), le_bytes(t)));
        }
    }
    let mut adam_steps = BTreeMap::new();
    for ((phase, group), opt) in &state.optimizers {
        adam_steps.insert(format!("{}/{}", phase.name(), group.name()), opt.step);
        for (which, g) in [("m", &opt.m), ("v", &opt.v)] {
            for (name, t) in g.iter() {
                blobs.push((moment_key(*phase, *group, which, name), t.shape().to_vec(), le_bytes(t)));
            }
        }
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        step: state.step,
        mmd_bandwidth: state.mmd_bandwidth,
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        adam_steps,
        config: cfg.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let views = blobs
        .iter()
        .map(|(k, shape, bytes)| Ok((k.clone(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
        .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    safetensors::serialize(views, Some(HashMap::from([(HEADER_KEY.to_string(), json)])))
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn bad(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::format(path, message)
}

/// Parses an archive written by [`to_bytes`]. `path` is only used in errors.
pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(TrainConfig, TrainState)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(path, e.to_string()))?;
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(path, e.to_string()))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| bad(path, "missing checkpoint header"))?;
    let header: Header = serde_json::from_str(json).map_err(|e| bad(path, format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(path, format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.version != VERSION {
        return Err(bad(path, format!("unsupported checkpoint version {}", header.version)));
    }

    // Collect tensors by key.
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(bad(path, format!("tensor {name} is not f32")));
        }
        let data: Vec<f32> =
            view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let t = Tensor::from_vec(view.shape().to_vec(), data).map_err(|e| bad(path, e.to_string()))?;
        tensors.insert(name, t);
    }

    let mut groups: BTreeMap<Group, ParamGroup<f32>> = BTreeMap::new();
    let mut moments: BTreeMap<(Phase, Group), (ParamGroup<f32>, ParamGroup<f32>)> = BTreeMap::new();
    for (key, t) in tensors {
        let parts: Vec<&str> = key.splitn(5, '/').collect();
        match parts.as_slice() {
            ["param", g, name] => {
                let group = Group::from_name(g).ok_or_else(|| bad(path, format!("unknown group in {key}")))?;
                groups.entry(group).or_default().insert(*name, t);
            }
            ["adam", ph, g, which, name] => {
                let phase = Phase::from_name(ph).ok_or_else(|| bad(path, format!("unknown phase in {key}")))?;
                let group = Group::from_name(g).ok_or_else(|| bad(path, format!("unknown group in {key}")))?;
                let e = moments.entry((phase, group)).or_default();
                match *which {
                    "m" => e.0.insert(*name, t),
                    "v" => e.1.insert(*name, t),
                    _ => return Err(bad(path, format!("unknown moment in {key}"))),
                }
            }
            _ => return Err(bad(path, format!("unexpected tensor {key}"))),
        }
    }
    let params = ModelParams::from_groups(groups).map_err(|e| bad(path, e.to_string()))?;
    let cfg = header.config;

    let mut optimizers = BTreeMap::new();
    for ((phase, group), (m, v)) in moments {
        let key = format!("{}/{}", phase.name(), group.name());
        let step = *header.adam_steps.get(&key).ok_or_else(|| bad(path, format!("no step count for {key}")))?;
        let config = cfg.adam(phase.lr(group, &cfg));
        optimizers.insert((phase, group), Adam { config, step, m, v });
    }
    // Groups with no parameters have no moment tensors; restore them empty.
    for (key, &step) in &header.adam_steps {
        let (ph, g) = key.split_once('/').ok_or_else(|| bad(path, format!("bad optimizer key {key}")))?;
        let phase = Phase::from_name(ph).ok_or_else(|| bad(path, format!("bad optimizer key {key}")))?;
        let group = Group::from_name(g).ok_or_else(|| bad(path, format!("bad optimizer key {key}")))?;
        optimizers.entry((phase, group)).or_insert_with(|| Adam {
            config: cfg.adam(phase.lr(group, &cfg)),
            step,
            m: ParamGroup::new(),
            v: ParamGroup::new(),
        });
    }

    let seed: [u8; 32] = hex::decode(&header.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad(path, "bad RNG seed"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| bad(path, "bad RNG position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    let state = TrainState { params, optimizers, step: header.step, rng, mmd_bandwidth: header.mmd_bandwidth };
    state.check_compatible(&cfg).map_err(|e| bad(path, e.to_string()))?;
    Ok((cfg, state))
}

/// Writes the archive atomically (temporary file, then rename).
pub fn save(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let bytes = to_bytes(state, cfg)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Loads only what inference needs.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Model)> {
    let (cfg, state) = load(path)?;
    Ok((cfg.clone(), Model::new(cfg.net, state.params)))
}

/// File name of the checkpoint for `step`.
pub fn file_name(step: u64) -> String {
    format!("step_{step:06}.{EXTENSION}")
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_in(dir: &Path) -> Result<Option<PathBuf>> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(&format!(".{EXTENSION}")))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(s) = step {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
