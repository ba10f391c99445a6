//! Named-array checkpoints with the model config and its fingerprint embedded
//! in the file header.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Stage2Toggles};
use crate::training::TrainConfig;

const FORMAT: &str = "llfer-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Present on stage-2 checkpoints.
    pub toggles: Option<Stage2Toggles>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn st_dtype(dtype: DType) -> Result<StDtype> {
    match dtype {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported parameter dtype {other:?}"))),
    }
}

/// Rewrites the JSON header with sorted keys so that equal checkpoints are
/// byte-identical; the metadata map otherwise serializes in hash order.
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n])?;
    let sorted = serde_json::to_vec(&header)?;
    if sorted.len() > n {
        return Err(Error::Checkpoint("canonical header longer than original".into()));
    }
    bytes[8..8 + sorted.len()].copy_from_slice(&sorted);
    bytes[8 + sorted.len()..8 + n].fill(b' ');
    Ok(bytes)
}

impl Checkpoint {
    pub fn stage(&self) -> u8 {
        self.meta.stage
    }

    pub fn model(&self) -> &ModelConfig {
        &self.meta.model
    }

    pub fn dtype(&self) -> DType {
        self.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32)
    }

    /// Tensors whose path starts with `prefix/`.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}/");
        self.tensors.iter().filter(|(k, _)| k.starts_with(&p)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut raw: Vec<(String, StDtype, Vec<usize>, Vec<u8>)> = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let dt = st_dtype(t.dtype())?;
            let flat = t.flatten_all()?;
            let bytes: Vec<u8> = match t.dtype() {
                DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
                _ => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            };
            raw.push((name.clone(), dt, t.dims().to_vec(), bytes));
        }
        let views = raw
            .iter()
            .map(|(n, dt, shape, bytes)| {
                TensorView::new(*dt, shape.clone(), bytes)
                    .map(|v| (n.as_str(), v))
                    .map_err(|e| Error::Checkpoint(format!("{n}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut header = HashMap::new();
        header.insert("format".to_string(), FORMAT.to_string());
        header.insert("stage".to_string(), self.meta.stage.to_string());
        header.insert("meta".to_string(), serde_json::to_string(&self.meta)?);
        header.insert("fingerprint".to_string(), self.meta.model.fingerprint());
        let bytes = safetensors::serialize(views, Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        canonical_header(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let md = header.metadata().as_ref().ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let get = |k: &str| md.get(k).ok_or_else(|| Error::Checkpoint(format!("header lacks `{k}`")));
        if get("format")? != FORMAT {
            return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", get("format")?)));
        }
        let meta: CheckpointMeta = serde_json::from_str(get("meta")?)?;
        let stored = get("fingerprint")?;
        let actual = meta.model.fingerprint();
        if *stored != actual {
            return Err(Error::Checkpoint(format!(
                "config fingerprint mismatch: header {stored}, config hashes to {actual}"
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let t = match view.dtype() {
                StDtype::F32 => {
                    let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), &Device::Cpu)?
                }
                StDtype::F64 => {
                    let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, view.shape(), &Device::Cpu)?
                }
                other => return Err(Error::Checkpoint(format!("{name}: unsupported dtype {other:?}"))),
            };
            tensors.insert(name, t);
        }
        Ok(Self { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks that this checkpoint can seed stage 2 for `expected`.
    pub fn validate_stage1(&self, expected: Option<&ModelConfig>) -> Result<()> {
        if self.meta.stage != 1 {
            return Err(Error::Checkpoint(format!("expected a stage-1 checkpoint, found stage {}", self.meta.stage)));
        }
        for prefix in [crate::model::LACLIP, crate::model::PNET_S1, crate::model::LLFORMER] {
            if self.with_prefix(prefix).is_empty() {
                return Err(Error::Checkpoint(format!("stage-1 checkpoint has no `{prefix}` arrays")));
            }
        }
        if let Some(exp) = expected {
            if exp.fingerprint() != self.meta.model.fingerprint() {
                return Err(Error::Checkpoint(format!(
                    "stage-1 model config differs from the requested one (C {} vs {}, D_e {} vs {}, scales {} vs {})",
                    self.meta.model.c_epd(),
                    exp.c_epd(),
                    self.meta.model.prior.d_embed,
                    exp.prior.d_embed,
                    self.meta.model.llformer.n_scales(),
                    exp.llformer.n_scales()
                )));
            }
        }
        Ok(())
    }
}
