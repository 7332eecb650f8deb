//! Single-file weight container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "DIFFUPCK"
//! version   u32
//! meta_len  u64, then meta_len bytes of JSON metadata
//! count     u32, then per tensor:
//!     name_len u32, name bytes, n c h w as u32, n*c*h*w f32 values
//! sha256    32 bytes over everything above
//! ```

use std::path::Path;

use diffup_core::diffusion::ScheduleKind;
use diffup_core::encoders::{Encoder, EncoderFamily, EncoderId};
use diffup_core::nn::{hex, AdamState, ParamSet};
use diffup_core::trainer::{EpochRecord, TrainConfig, TrainState};
use diffup_core::uqdd::{ModelConfig, UNet};
use diffup_core::{Shape, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"DIFFUPCK";
pub const FORMAT_VERSION: u32 = 1;

const WEIGHTS: &str = "weights/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";
const BEST: &str = "best/";

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&c.meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + meta.len() + c.tensors.iter().map(|(_, t)| 4 * t.data.len() + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&out).into();
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing magic header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest.as_slice() != tail {
        return Err(Error::CorruptCheckpoint("content digest does not match".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let meta_len = r.u64()? as usize;
    let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let d: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let shape = Shape::new(d[0], d[1], d[2], d[3]);
        let raw = r.take(shape.len().checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::from_vec(shape, data)));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Container { meta, tensors })
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let bytes = encode(c)?;
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).at(&tmp)?;
    std::fs::rename(&tmp, path).at(path)
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode(&std::fs::read(path).at(path)?)
}

fn params_with_prefix<'a>(prefix: &str, p: &'a ParamSet<f32>) -> impl Iterator<Item = (String, Tensor<f32>)> + 'a {
    let prefix = prefix.to_owned();
    p.entries().iter().map(move |e| (format!("{prefix}{}", e.name), e.value.clone()))
}

fn collect_prefix(tensors: &[(String, Tensor<f32>)], prefix: &str) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(prefix) {
            p.add(rest, t.clone());
        }
    }
    p
}

fn typed_meta<M: DeserializeOwned>(c: &Container, kind: &str) -> Result<M> {
    let found = c.meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::CorruptCheckpoint(format!("expected a {kind} container, found {found:?}")));
    }
    serde_json::from_value(c.meta.clone()).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))
}

fn to_meta<M: Serialize>(m: &M) -> Result<serde_json::Value> {
    serde_json::to_value(m).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub kind: ScheduleKind,
    pub steps: usize,
}

/// Where the per-step random streams stand; all draws are indexed by
/// `(seed, step)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderMeta {
    pub kind: String,
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleMeta,
    /// Encoder the decoder was trained with. Not needed to load it.
    pub encoder: EncoderId,
    /// Text bank file used during training, if any.
    pub text_bank: Option<String>,
    pub rng: RngState,
    pub adam_step: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_miou: Option<f64>,
    pub stale_validations: usize,
    pub stopped_early: bool,
    /// Digest of the tensors under `weights/`.
    pub weights_digest: String,
}

/// Decoder weights plus everything needed to resume training.
#[derive(Clone, Debug)]
pub struct DecoderCheckpoint {
    pub meta: DecoderMeta,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState>,
    pub best_params: Option<ParamSet<f32>>,
}

impl DecoderCheckpoint {
    pub fn from_state(
        model: &ModelConfig,
        train: &TrainConfig,
        encoder: &EncoderId,
        text_bank: Option<String>,
        state: &TrainState,
    ) -> Self {
        let meta = DecoderMeta {
            kind: "decoder".into(),
            format_version: FORMAT_VERSION,
            model: model.clone(),
            train: train.clone(),
            schedule: ScheduleMeta { kind: train.schedule, steps: train.diffusion_steps },
            encoder: encoder.clone(),
            text_bank,
            rng: RngState { seed: train.seed, step: state.step },
            adam_step: state.adam.step,
            history: state.history.clone(),
            best_epoch: state.best_epoch,
            best_miou: state.best_miou,
            stale_validations: state.stale_validations,
            stopped_early: state.stopped_early,
            weights_digest: hex(&state.params.digest()),
        };
        Self { meta, params: state.params.clone(), adam: Some(state.adam.clone()), best_params: state.best_params.clone() }
    }

    /// Inference-only copy holding `params` (e.g. the best validated ones).
    pub fn for_inference(&self, params: ParamSet<f32>) -> Self {
        let mut meta = self.meta.clone();
        meta.weights_digest = hex(&params.digest());
        Self { meta, params, adam: None, best_params: None }
    }

    pub fn weights_digest(&self) -> String {
        hex(&self.params.digest())
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors: Vec<(String, Tensor<f32>)> = params_with_prefix(WEIGHTS, &self.params).collect();
        if let Some(adam) = &self.adam {
            for (i, e) in self.params.entries().iter().enumerate() {
                let s = e.value.shape;
                tensors.push((format!("{ADAM_M}{}", e.name), Tensor::from_vec(s, adam.m[i].clone())));
                tensors.push((format!("{ADAM_V}{}", e.name), Tensor::from_vec(s, adam.v[i].clone())));
            }
        }
        if let Some(best) = &self.best_params {
            tensors.extend(params_with_prefix(BEST, best));
        }
        Ok(Container { meta: to_meta(&self.meta)?, tensors })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DecoderMeta = typed_meta(c, "decoder")?;
        let params = collect_prefix(&c.tensors, WEIGHTS);
        if hex(&params.digest()) != meta.weights_digest {
            return Err(Error::CorruptCheckpoint("weights digest does not match metadata".into()));
        }
        let m = collect_prefix(&c.tensors, ADAM_M);
        let v = collect_prefix(&c.tensors, ADAM_V);
        let adam = if m.is_empty() {
            None
        } else {
            let pick = |set: &ParamSet<f32>| -> Result<Vec<Vec<f32>>> {
                params
                    .entries()
                    .iter()
                    .map(|e| {
                        set.find(&e.name)
                            .map(|id| set.get(id).data.clone())
                            .ok_or_else(|| Error::CorruptCheckpoint(format!("optimizer state misses {}", e.name)))
                    })
                    .collect()
            };
            Some(AdamState { step: meta.adam_step, m: pick(&m)?, v: pick(&v)? })
        };
        let best = collect_prefix(&c.tensors, BEST);
        Ok(Self { meta, params, adam, best_params: (!best.is_empty()).then_some(best) })
    }

    /// Rebuilds the network around the stored weights.
    pub fn model(&self) -> Result<(UNet, ParamSet<f32>)> {
        let (model, mut params) = UNet::new::<f32>(&self.meta.model, 0)?;
        params.load_from(&self.params).map_err(Error::CorruptCheckpoint)?;
        Ok((model, params))
    }

    /// Training state to continue from.
    pub fn train_state(&self) -> Result<TrainState> {
        let (_, params) = self.model()?;
        let adam = self.adam.clone().ok_or_else(|| Error::Format("checkpoint carries no optimizer state".into()))?;
        Ok(TrainState {
            params,
            adam,
            step: self.meta.rng.step,
            history: self.meta.history.clone(),
            best_miou: self.meta.best_miou,
            best_epoch: self.meta.best_epoch,
            best_params: self.best_params.clone(),
            stale_validations: self.meta.stale_validations,
            stopped_early: self.meta.stopped_early,
            epoch_losses: Vec::new(),
        })
    }
}

pub fn save_decoder(path: &Path, ckpt: &DecoderCheckpoint) -> Result<()> {
    write_container(path, &ckpt.to_container()?)
}

pub fn load_decoder(path: &Path) -> Result<DecoderCheckpoint> {
    DecoderCheckpoint::from_container(&read_container(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub kind: String,
    pub format_version: u32,
    pub id: EncoderId,
    pub num_classes: usize,
    pub input_size: usize,
    /// Free-form provenance (pretraining recipe and report).
    pub provenance: serde_json::Value,
}

pub fn save_encoder(path: &Path, enc: &Encoder, num_classes: usize, provenance: serde_json::Value) -> Result<()> {
    let meta = EncoderMeta {
        kind: "encoder".into(),
        format_version: FORMAT_VERSION,
        id: enc.id().clone(),
        num_classes,
        input_size: enc.input_size(),
        provenance,
    };
    let tensors = params_with_prefix(WEIGHTS, enc.params()).collect();
    write_container(path, &Container { meta: to_meta(&meta)?, tensors })
}

/// Loads stored encoder weights under `name`.
pub fn load_encoder(path: &Path, name: &str) -> Result<(Encoder, EncoderMeta)> {
    let c = read_container(path)?;
    let meta: EncoderMeta = typed_meta(&c, "encoder")?;
    let params = collect_prefix(&c.tensors, WEIGHTS);
    if hex(&params.digest()) != meta.id.weights_hash {
        return Err(Error::CorruptCheckpoint("encoder weights digest does not match metadata".into()));
    }
    let family: EncoderFamily = meta.id.family;
    let enc = Encoder::from_weights(name, family, meta.id.dims, meta.num_classes, meta.input_size, &params)?;
    Ok((enc, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            meta: serde_json::json!({"kind": "test", "x": 1}),
            tensors: vec![
                ("a".into(), Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, -2.0, 3.5, 0.0])),
                ("b/c".into(), Tensor::from_vec(Shape::vector(1, 1), vec![f32::MIN_POSITIVE])),
            ],
        }
    }

    #[test]
    fn container_roundtrip() {
        let c = sample();
        assert_eq!(decode(&encode(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode(&bytes[..20]), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::VersionMismatch { found: 7, .. })));
    }
}
