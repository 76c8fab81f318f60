//! NVF1 checkpoint container: magic, length-prefixed JSON header with the
//! model configuration and a tensor index, then raw little-endian f32
//! payloads. Byte-identical for identical parameters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use nvf_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{LoraAdapters, LoraConfig, LoraPair, ModelConfig, ModelParams};
use crate::error::{CoreError, Result};
use crate::ingest::ResolutionPolicy;
use crate::patchify::PatchSpec;

const NVF_MAGIC: &[u8; 4] = b"NVF1";
pub const FORMAT_VERSION: u32 = 1;

/// Preprocessing geometry a checkpoint was trained with; `predict` reuses it
/// unless the caller overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolutionMode {
    /// Shorter side to 224, then a 224×224 crop (random in training,
    /// centered at evaluation).
    Crop224,
    /// Aspect-preserving resize to the ~224² pixel budget.
    Resize224,
    /// smart_resize within [min_pixels, max_pixels].
    Dynamic { min_pixels: usize, max_pixels: usize },
}

impl ResolutionMode {
    pub fn dynamic_paper() -> Self {
        let p = ResolutionPolicy::paper_default();
        ResolutionMode::Dynamic {
            min_pixels: p.min_pixels,
            max_pixels: p.max_pixels,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    patch: PatchSpec,
    resolution: ResolutionMode,
    frames_t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lora: Option<LoraConfig>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub patch: PatchSpec,
    pub resolution: ResolutionMode,
    pub frames_t: usize,
    pub lora: Option<LoraConfig>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_params(
        params: &ModelParams<f32>,
        config: &ModelConfig,
        patch: &PatchSpec,
        resolution: &ResolutionMode,
        frames_t: usize,
    ) -> Self {
        let tensors = params
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, t.clone()))
            .collect();
        Checkpoint {
            config: config.clone(),
            patch: *patch,
            resolution: resolution.clone(),
            frames_t,
            lora: params.lora.as_ref().map(|l| l.config.clone()),
            tensors,
        }
    }

    /// Rebuild runnable parameters; errors if any tensor is missing or
    /// mis-shaped.
    pub fn to_params(&self) -> Result<ModelParams<f32>> {
        let patch_dim = self.patch.flat_len();
        let mut params = ModelParams::<f32>::init(&self.config, patch_dim, 0)?;
        if let Some(lora_cfg) = &self.lora {
            params.attach_lora(&self.config, lora_cfg.clone(), 0);
        }
        let names: Vec<String> = params
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for name in names {
            let stored = self.tensors.get(&name).ok_or_else(|| {
                CoreError::Config(format!("checkpoint missing tensor {name}"))
            })?;
            let slot = params
                .tensor_mut(&name)
                .ok_or_else(|| CoreError::Config(format!("unknown tensor {name}")))?;
            if slot.shape() != stored.shape() {
                return Err(CoreError::Config(format!(
                    "tensor {name}: shape {:?} in checkpoint, expected {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored.clone();
        }
        Ok(params)
    }

    /// LoRA adapters folded into the base weights removed; used by tests
    /// comparing adapter-zero checkpoints against their base.
    pub fn lora_adapters(&self) -> Option<LoraAdapters<f32>> {
        let cfg = self.lora.clone()?;
        let layers = (0..self.config.num_layers)
            .map(|i| {
                cfg.targets
                    .iter()
                    .map(|t| {
                        let w = t.weight_name();
                        LoraPair {
                            a: self.tensors[&format!("layers.{i}.{w}.lora_a")].clone(),
                            b: self.tensors[&format!("layers.{i}.{w}.lora_b")].clone(),
                        }
                    })
                    .collect()
            })
            .collect();
        Some(LoraAdapters {
            config: cfg,
            layers,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut index = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        index.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            },
        );
        offset += (t.numel() * 4) as u64;
    }
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        patch: ckpt.patch,
        resolution: ckpt.resolution.clone(),
        frames_t: ckpt.frames_t,
        lora: ckpt.lora.clone(),
        tensors: index,
    })?;
    let mut buf = Vec::with_capacity(8 + header.len() + offset as usize);
    buf.extend_from_slice(NVF_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in ckpt.tensors.values() {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CoreError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| CoreError::io(path, e))?;
    if &magic != NVF_MAGIC {
        return Err(CoreError::Integrity {
            path: path.into(),
            message: format!("bad magic {magic:?}, expected NVF1"),
        });
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)
        .map_err(|e| CoreError::io(path, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_buf = vec![0u8; header_len];
    file.read_exact(&mut header_buf)
        .map_err(|e| CoreError::io(path, e))?;
    let header: Header = serde_json::from_slice(&header_buf)?;
    if header.version != FORMAT_VERSION {
        return Err(CoreError::Integrity {
            path: path.into(),
            message: format!("unsupported format version {}", header.version),
        });
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| CoreError::io(path, e))?;
    let mut tensors = BTreeMap::new();
    for (name, entry) in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(CoreError::Integrity {
                path: path.into(),
                message: format!("tensor {name} extends past payload"),
            });
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(Checkpoint {
        config: header.config,
        patch: header.patch,
        resolution: header.resolution,
        frames_t: header.frames_t,
        lora: header.lora,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::sized(2, 16, 2);
        let params = ModelParams::<f32>::init(&cfg, 12, 77).unwrap();
        let ckpt = Checkpoint::from_params(
            &params,
            &cfg,
            &PatchSpec::new(1, 2, 2).unwrap(),
            &ResolutionMode::Resize224,
            8,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nvf");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for (name, t) in &ckpt.tensors {
            assert_eq!(loaded.tensors[name].data(), t.data(), "{name}");
        }
        let rebuilt = loaded.to_params().unwrap();
        assert_eq!(rebuilt.embed.data(), params.embed.data());
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let cfg = ModelConfig::sized(1, 16, 2);
        let params = ModelParams::<f32>::init(&cfg, 12, 3).unwrap();
        let ckpt = Checkpoint::from_params(
            &params,
            &cfg,
            &PatchSpec::new(1, 2, 2).unwrap(),
            &ResolutionMode::dynamic_paper(),
            8,
        );
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.nvf"), dir.path().join("b.nvf"));
        save_checkpoint(&p1, &ckpt).unwrap();
        save_checkpoint(&p2, &ckpt).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }
}
