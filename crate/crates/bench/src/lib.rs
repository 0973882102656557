//! Shared fixtures for the benchmarks.

use candle_core::DType;
use promptseg_core::data::gen_synthetic;
use promptseg_core::sam::SegModel;
use promptseg_core::train::PreparedSample;
use promptseg_core::{BinaryMask, ExperimentConfig, ValidatedConfig};

/// Prediction/ground-truth pairs from the synthetic generator, perturbed by a
/// small shift so boundaries differ.
pub fn mask_pairs(size: usize, n: usize) -> Vec<(BinaryMask, BinaryMask)> {
    gen_synthetic(1, n, size, 11)
        .expect("valid synthetic size")
        .into_iter()
        .map(|f| (f.mask.translated(2, -1), f.mask))
        .collect()
}

pub fn model(cfg: ExperimentConfig) -> (ValidatedConfig, SegModel) {
    let cfg = cfg.validate().expect("valid config");
    let model = SegModel::new(&cfg, DType::F32).expect("model builds");
    (cfg, model)
}

pub fn samples(model: &SegModel, n: usize) -> Vec<PreparedSample> {
    let size = model.config().image_size;
    gen_synthetic(1, n, size, 12)
        .expect("valid synthetic size")
        .iter()
        .map(|f| PreparedSample::from_image(model, f.frame_id.clone(), &f.image, Some(f.mask.clone())).expect("sample"))
        .collect()
}
