use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{Matcher, TrainStage};
use super::{MatcherConfig, MatcherError};
use crate::io::{atomic_write, read_bytes};
use crate::nn::{map_params, Params};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"EPIMASK1";
pub const WEIGHTS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraInfo {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
}

/// JSON header of a weights or checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub schema: u32,
    pub config_hash: String,
    pub config: MatcherConfig,
    pub lora: Option<LoraInfo>,
    pub tensors: Vec<TensorEntry>,
    /// Training state, present in checkpoints only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    pub stage: TrainStage,
    /// Optimizer steps taken, which can differ from `step` under accumulation.
    pub opt_steps: u64,
}

/// Weights plus AdamW moments aligned with `flatten(&matcher)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub matcher: Matcher,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub state: TrainState,
}

fn encode(m: &Matcher, extra: &[(&str, &[f64])], train: Option<TrainState>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    m.visit("", &mut |name, shape, d| {
        tensors.push(TensorEntry { name: name.to_string(), shape: shape.to_vec(), offset: data.len() });
        data.extend_from_slice(d);
    });
    for (prefix, flat) in extra {
        let mut at = 0;
        for info in map_params(m) {
            tensors.push(TensorEntry { name: format!("{prefix}.{}", info.name), shape: info.shape, offset: data.len() });
            data.extend_from_slice(&flat[at..at + info.len]);
            at += info.len;
        }
    }
    let lora = m.has_lora().then_some(LoraInfo { rank: m.cfg.lora.rank, alpha: m.cfg.lora.alpha });
    let header = WeightsHeader {
        schema: WEIGHTS_SCHEMA,
        config_hash: m.cfg.hash(),
        config: m.cfg.clone(),
        lora,
        tensors,
        train,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Decoded {
    header: WeightsHeader,
    tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded, MatcherError> {
    let bad = |m: &str| MatcherError::Weights(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: WeightsHeader = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
    if header.schema != WEIGHTS_SCHEMA {
        return Err(bad(&format!("unsupported schema {}", header.schema)));
    }
    let found = header.config.hash();
    if found != header.config_hash {
        return Err(MatcherError::HashMismatch { expected: header.config_hash.clone(), found });
    }
    let body = &bytes[16 + hlen..];
    if body.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64"));
    }
    let data: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut tensors = BTreeMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let slice = data.get(t.offset..t.offset + n).ok_or_else(|| bad(&format!("tensor {} out of range", t.name)))?;
        tensors.insert(t.name.clone(), (t.shape.clone(), slice.to_vec()));
    }
    Ok(Decoded { header, tensors })
}

fn rebuild(d: &Decoded, expected: Option<&MatcherConfig>) -> Result<Matcher, MatcherError> {
    if let Some(cfg) = expected {
        if cfg.hash() != d.header.config_hash {
            return Err(MatcherError::HashMismatch { expected: d.header.config_hash.clone(), found: cfg.hash() });
        }
    }
    let mut m = Matcher::new(d.header.config.clone())?;
    if d.header.lora.is_some() {
        m.attach_lora();
    }
    let mut missing = None;
    let infos = map_params(&m);
    for info in &infos {
        match d.tensors.get(&info.name) {
            Some((shape, _)) if *shape == info.shape => {}
            _ => {
                missing = Some(info.name.clone());
                break;
            }
        }
    }
    if let Some(name) = missing {
        return Err(MatcherError::Weights(format!("tensor {name} missing or misshapen")));
    }
    m.visit_mut("", &mut |name, dst| dst.copy_from_slice(&d.tensors[name].1));
    Ok(m)
}

pub fn save_weights(path: &Path, m: &Matcher) -> Result<(), MatcherError> {
    Ok(atomic_write(path, &encode(m, &[], None))?)
}

/// Load weights, optionally checking them against an expected config.
pub fn load_weights(path: &Path, expected: Option<&MatcherConfig>) -> Result<Matcher, MatcherError> {
    rebuild(&decode(&read_bytes(path)?)?, expected)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), MatcherError> {
        let bytes = encode(&self.matcher, &[("adam_m", &self.adam_m), ("adam_v", &self.adam_v)], Some(self.state.clone()));
        Ok(atomic_write(path, &bytes)?)
    }

    /// Reads a checkpoint. Plain weight files load with zero moments and step 0.
    pub fn load(path: &Path) -> Result<Self, MatcherError> {
        let d = decode(&read_bytes(path)?)?;
        let matcher = rebuild(&d, None)?;
        let infos = map_params(&matcher);
        let gather = |prefix: &str| -> Option<Vec<f64>> {
            let mut out = Vec::new();
            for info in &infos {
                out.extend_from_slice(&d.tensors.get(&format!("{prefix}.{}", info.name))?.1);
            }
            Some(out)
        };
        let n = crate::nn::param_count(&matcher);
        let (adam_m, adam_v) = match (gather("adam_m"), gather("adam_v")) {
            (Some(m), Some(v)) => (m, v),
            _ => (vec![0.0; n], vec![0.0; n]),
        };
        let state = d.header.train.clone().unwrap_or(TrainState { step: 0, epoch: 0, stage: TrainStage::Base, opt_steps: 0 });
        Ok(Self { matcher, adam_m, adam_v, state })
    }

    pub fn is_checkpoint(path: &Path) -> Result<bool, MatcherError> {
        Ok(decode(&read_bytes(path)?)?.header.train.is_some())
    }
}

/// SHA-256 hex of a file, for manifests.
pub fn file_digest(path: &Path) -> Result<String, MatcherError> {
    Ok(hex::encode(Sha256::digest(read_bytes(path)?)))
}
