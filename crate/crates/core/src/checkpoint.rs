//! Single-file checkpoints: trainable tensors, optimizer moments, the config
//! and the training state, in a safetensors archive.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::{ExperimentConfig, ValidatedConfig};
use crate::error::{Error, Result};
use crate::nn::optim::Moments;
use crate::sam::SegModel;
use crate::train::TrainState;

const KEY_CONFIG: &str = "config";
const KEY_HASH: &str = "config_hash";
const KEY_STATE: &str = "train_state";
const KEY_STEPS: &str = "adam_steps";
const KEY_DTYPE: &str = "dtype";
const PARAM_PREFIX: &str = "param.";
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

pub const EXTENSION: &str = "ckpt";

/// Loaded checkpoint: a model with its trainable groups restored, plus the
/// state needed to resume.
pub struct Checkpoint {
    pub model: SegModel,
    pub state: TrainState,
    pub moments: BTreeMap<String, Moments>,
    /// Free-form string metadata stored alongside (data root, split, ...).
    pub extra: BTreeMap<String, String>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (Dtype::F32, shape, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, shape, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(ck(format!("unsupported dtype {other:?}"))),
    })
}

fn view_tensor(view: &TensorView, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, view.shape(), device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, view.shape(), device)?
        }
        other => return Err(ck(format!("unsupported stored dtype {other:?}"))),
    };
    Ok(t.to_dtype(dtype)?)
}

fn dtype_label(d: DType) -> &'static str {
    if d == DType::F64 {
        "f64"
    } else {
        "f32"
    }
}

pub fn save(
    path: impl AsRef<Path>,
    model: &SegModel,
    state: &TrainState,
    moments: &BTreeMap<String, Moments>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries: Vec<(String, (Dtype, Vec<usize>, Vec<u8>))> = Vec::new();
    for p in model.store.trainable() {
        entries.push((format!("{PARAM_PREFIX}{}", p.name()), tensor_bytes(&p.value())?));
    }
    let mut steps = BTreeMap::new();
    for (name, mo) in moments {
        entries.push((format!("{M_PREFIX}{name}"), tensor_bytes(&mo.m)?));
        entries.push((format!("{V_PREFIX}{name}"), tensor_bytes(&mo.v)?));
        steps.insert(name.clone(), mo.steps);
    }
    let views = entries
        .iter()
        .map(|(n, (dt, shape, bytes))| Ok((n.clone(), TensorView::new(*dt, shape.clone(), bytes).map_err(|e| ck(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;

    let cfg = model.config();
    let mut meta: HashMap<String, String> = extra.iter().map(|(k, v)| (format!("extra.{k}"), v.clone())).collect();
    meta.insert(KEY_CONFIG.into(), cfg.to_toml_string());
    meta.insert(KEY_HASH.into(), cfg.hash());
    meta.insert(KEY_STATE.into(), serde_json::to_string(state)?);
    meta.insert(KEY_STEPS.into(), serde_json::to_string(&steps)?);
    meta.insert(KEY_DTYPE.into(), dtype_label(model.dtype()).into());
    let bytes = safetensors::tensor::serialize(views, Some(meta)).map_err(|e| ck(e.to_string()))?;
    if let Some(dir) = path.as_ref().parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads only the stored configuration.
pub fn read_config(path: impl AsRef<Path>) -> Result<ValidatedConfig> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ck(e.to_string()))?;
    let meta = meta.metadata().clone().unwrap_or_default();
    parse_config(&meta)
}

fn parse_config(meta: &HashMap<String, String>) -> Result<ValidatedConfig> {
    let text = meta.get(KEY_CONFIG).ok_or_else(|| ck("no config in checkpoint"))?;
    let cfg = ExperimentConfig::from_toml_str(text)?.validate()?;
    match meta.get(KEY_HASH) {
        Some(h) if *h == cfg.hash() => Ok(cfg),
        Some(h) => Err(ck(format!("config hash mismatch: stored {h}, computed {}", cfg.hash()))),
        None => Err(ck("no config hash in checkpoint")),
    }
}

/// Rebuilds the frozen model from the stored config and restores every
/// trainable tensor. Missing or surplus trainable tensors are errors.
pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ck(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let cfg = parse_config(&meta)?;
    let dtype = match meta.get(KEY_DTYPE).map(String::as_str) {
        Some("f64") => DType::F64,
        Some("f32") | None => DType::F32,
        Some(other) => return Err(ck(format!("unknown dtype {other}"))),
    };
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ck(e.to_string()))?;
    let model = SegModel::new(&cfg, dtype)?;
    let device = model.store.device().clone();

    let mut expected = 0;
    for p in model.store.trainable() {
        let name = format!("{PARAM_PREFIX}{}", p.name());
        let view = st.tensor(&name).map_err(|_| ck(format!("missing tensor {name}")))?;
        if view.shape() != p.shape().dims() {
            return Err(ck(format!("{name}: stored shape {:?}, model expects {:?}", view.shape(), p.shape().dims())));
        }
        p.set(&view_tensor(&view, dtype, &device)?)?;
        expected += 1;
    }
    let stored = st.names().iter().filter(|n| n.starts_with(PARAM_PREFIX)).count();
    if stored != expected {
        return Err(ck(format!("checkpoint holds {stored} parameter tensors, model has {expected} trainable")));
    }

    let state: TrainState =
        serde_json::from_str(meta.get(KEY_STATE).ok_or_else(|| ck("no training state in checkpoint"))?)?;
    let steps: BTreeMap<String, u64> = match meta.get(KEY_STEPS) {
        Some(s) => serde_json::from_str(s)?,
        None => BTreeMap::new(),
    };
    let mut moments = BTreeMap::new();
    for (name, n) in steps {
        let m = st.tensor(&format!("{M_PREFIX}{name}")).map_err(|_| ck(format!("missing first moment of {name}")))?;
        let v = st.tensor(&format!("{V_PREFIX}{name}")).map_err(|_| ck(format!("missing second moment of {name}")))?;
        moments.insert(
            name,
            Moments { m: view_tensor(&m, dtype, &device)?, v: view_tensor(&v, dtype, &device)?, steps: n },
        );
    }
    let extra = meta
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint { model, state, moments, extra })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::param::{params_hash, to_f64_vec};
    use crate::train::{train_model, PreparedSample};

    fn trained() -> (crate::train::TrainOutcome, Vec<PreparedSample>) {
        let frames = gen_synthetic(1, 3, 32, 4).unwrap();
        let cfg = ExperimentConfig { epochs: 1, ..ExperimentConfig::tiny() }.validate().unwrap();
        let model = SegModel::new(&cfg, DType::F32).unwrap();
        let s: Vec<PreparedSample> = frames
            .iter()
            .map(|f| PreparedSample::from_image(&model, f.frame_id.clone(), &f.image, Some(f.mask.clone())).unwrap())
            .collect();
        (train_model(model, &s[..2], &s[2..]).unwrap(), s)
    }

    #[test]
    fn round_trip_reproduces_outputs_exactly() {
        let (out, s) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let extra = BTreeMap::from([("data".to_string(), "somewhere".to_string())]);
        save(&path, &out.model, &out.state, &out.moments, &extra).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.state, out.state);
        assert_eq!(back.extra, extra);
        assert_eq!(back.moments.len(), out.moments.len());
        assert_eq!(params_hash(back.model.store.iter()).unwrap(), params_hash(out.model.store.iter()).unwrap());
        let f = s[0].image.clone();
        let lb = s[0].letterbox;
        let run = |m: &SegModel| {
            let feats = m.image_encoder.encode(&f, lb).unwrap();
            let base = m.base_prompts(&m.text_prompt().unwrap(), &feats).unwrap();
            to_f64_vec(&m.decode(&feats, &base, None).unwrap().working).unwrap()
        };
        assert_eq!(run(&back.model), run(&out.model));
        assert_eq!(read_config(&path).unwrap().hash(), out.model.config().hash());
    }

    #[test]
    fn only_trainable_tensors_are_stored() {
        let (out, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &out.model, &out.state, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        assert_eq!(st.names().len(), out.model.store.trainable().count());
    }

    #[test]
    fn missing_group_is_an_error() {
        let (out, _) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut cfg = (**out.model.config()).clone();
        cfg.lora_scopes = vec![crate::config::LoraScope::MaskDecoder];
        let small = SegModel::new(&cfg.validate().unwrap(), DType::F32).unwrap();
        save(&path, &small, &out.state, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        // Rewrite the config so the loader expects LoRA tensors that are absent.
        let bytes = std::fs::read(&path).unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let (_, header) = SafeTensors::read_metadata(&bytes).unwrap();
        let mut meta = header.metadata().clone().unwrap();
        meta.insert(KEY_CONFIG.into(), out.model.config().to_toml_string());
        meta.insert(KEY_HASH.into(), out.model.config().hash());
        let tensors: Vec<(String, TensorView)> = st.tensors();
        std::fs::write(&path, safetensors::tensor::serialize(tensors, Some(meta)).unwrap()).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load(dir.path().join("nope.ckpt")), Err(Error::Checkpoint(_))));
    }
}
