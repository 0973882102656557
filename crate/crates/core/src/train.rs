//! Training loop with validation-loss model selection, and evaluation in
//! automatic and manual prompting modes.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use image::GrayImage;
use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ValidatedConfig;
use crate::data::{perturb_bbox, sample_point, Dataset, Letterbox, PatientSplit, SampleEntry, SplitPart};
use crate::error::{Error, Result};
use crate::metrics::{composite_loss, dsc, mask_tensor, nsd, MetricReport, MetricRow};
use crate::nn::optim::{cosine_lr, AdamW, AdamWConfig, Moments};
use crate::nn::param::{params_hash, Param};
use crate::refine::{derive_prompts, extract_box, RefinementTrace, Refiner};
use crate::sam::{binarize, GeometricPrompt, SegModel};
use crate::types::{BinaryMask, PromptOrigin};

/// A frame ready for the model: working-resolution input, its letterbox and
/// (when labelled) the ground truth at both resolutions.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub key: String,
    pub image: Tensor,
    pub letterbox: Letterbox,
    pub gt_working: Option<Tensor>,
    pub gt_native: Option<BinaryMask>,
}

impl PreparedSample {
    pub fn from_image(model: &SegModel, key: String, pixels: &GrayImage, gt: Option<BinaryMask>) -> Result<Self> {
        let (image, letterbox) = model.prepare(pixels)?;
        let gt_working = match &gt {
            Some(m) => {
                if m.dims() != (letterbox.native_w, letterbox.native_h) {
                    return Err(Error::Shape(format!("mask of {key} does not match its image")));
                }
                Some(mask_tensor(&letterbox.mask_to_working(m), model.dtype(), model.store.device())?)
            }
            None => None,
        };
        Ok(Self { key, image, letterbox, gt_working, gt_native: gt })
    }
}

pub fn prepare_samples<'a>(model: &SegModel, entries: impl IntoIterator<Item = &'a SampleEntry>, with_masks: bool) -> Result<Vec<PreparedSample>> {
    entries
        .into_iter()
        .map(|e| {
            let img = e.load_image()?;
            let gt = if with_masks { Some(e.load_mask()?) } else { None };
            PreparedSample::from_image(model, e.key(), &img.pixels, gt)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub total_steps: usize,
    pub lr: f64,
    /// Mean composite loss over the training part before any update.
    pub initial_train_loss: f64,
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochLoss>,
}

/// Trained model (restored to the best epoch) and the matching optimizer state.
pub struct TrainOutcome {
    pub model: SegModel,
    pub state: TrainState,
    pub moments: BTreeMap<String, Moments>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Composite loss of the text-only prediction for one sample. With
/// `through_refinement` it is averaged with the loss after one refinement
/// round prompted from the (detached) prediction.
fn sample_loss(model: &SegModel, text: &Tensor, s: &PreparedSample, through_refinement: bool, rng: &mut impl rand::Rng) -> Result<Tensor> {
    let gt = s.gt_working.as_ref().ok_or_else(|| Error::Training(format!("{} has no mask", s.key)))?;
    let features = model.image_encoder.encode(&s.image, s.letterbox)?;
    let base = model.base_prompts(text, &features)?;
    let logits = model.decode(&features, &base, None)?;
    let mut loss = composite_loss(&logits.working, gt)?;
    if through_refinement {
        let native = logits.native()?;
        let pred = binarize(&native, s.letterbox.native_w, s.letterbox.native_h, 0.0);
        if !pred.is_empty() {
            let prompts: Vec<GeometricPrompt> =
                derive_prompts(&pred, model.config().refinement_prompts, rng)?.into_iter().map(|(p, _)| p).collect();
            if !prompts.is_empty() {
                let geo = model.encode_geometric(&prompts, &s.letterbox)?;
                let refined = model.decode(&features, &base, Some(&geo))?;
                loss = ((loss + composite_loss(&refined.working, gt)?)? * 0.5)?;
            }
        }
    }
    Ok(loss)
}

/// Mean text-only composite loss, no parameter update.
pub fn mean_loss(model: &SegModel, samples: &[PreparedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let text = model.text_prompt()?.detach();
    let mut rng = model.store.seeds().rng("unused");
    let mut total = 0.0;
    for s in samples {
        total += scalar(&sample_loss(model, &text, s, false, &mut rng)?)?;
    }
    Ok(total / samples.len() as f64)
}

fn snapshot(params: &[Param]) -> Vec<Tensor> {
    params.iter().map(|p| p.value().copy().expect("cpu copy")).collect()
}

/// Trains the trainable groups of `model` and restores the epoch with the
/// lowest validation loss.
pub fn train_model(model: SegModel, train: &[PreparedSample], val: &[PreparedSample]) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Training("empty training split".into()));
    }
    let cfg = model.config().clone();
    let params: Vec<Param> = model.store.trainable().cloned().collect();
    let frozen_before = params_hash(model.store.frozen())?;
    let mut opt = AdamW::new(params.clone(), AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let seeds = model.store.seeds();
    let mut refine_rng = seeds.rng("train/refine");

    let initial = mean_loss(&model, train)?;
    info!("initial train loss {initial:.4}, {total} steps");
    let mut state = TrainState {
        epoch: 0,
        step: 0,
        total_steps: total,
        lr: cfg.lr,
        initial_train_loss: initial,
        best_val_loss: f64::INFINITY,
        best_epoch: None,
        history: Vec::new(),
    };
    let mut best: Option<(Vec<Tensor>, BTreeMap<String, Moments>)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds.rng(&format!("train/shuffle/{epoch}")));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let text = model.text_prompt()?;
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                losses.push(sample_loss(&model, &text, &train[i], cfg.train_through_refinement, &mut refine_rng)?);
            }
            let loss = (Tensor::stack(&losses, 0)?.sum_all()? / batch.len() as f64)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at step {}", state.step)));
            }
            epoch_loss += value;
            let grads = loss.backward()?;
            let lr = cosine_lr(cfg.lr, state.step, total);
            opt.set_lr(lr);
            opt.step(&grads)?;
            state.step += 1;
            state.lr = cosine_lr(cfg.lr, state.step, total);
            debug!("step {} loss {value:.4} lr {lr:.2e}", state.step);
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(&model, val)? };
        state.history.push(EpochLoss { train: train_loss, val: val_loss });
        state.epoch = epoch + 1;
        info!("epoch {} train {train_loss:.4} val {val_loss:.4}", epoch + 1);
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            state.best_epoch = Some(epoch);
            best = Some((snapshot(&params), opt.state().clone()));
        }
    }

    let (values, moments) = match best {
        Some(b) => b,
        None => (snapshot(&params), opt.state().clone()),
    };
    for (p, v) in params.iter().zip(&values) {
        p.set(v)?;
    }
    if params_hash(model.store.frozen())? != frozen_before {
        return Err(Error::Training("frozen parameters changed during training".into()));
    }
    Ok(TrainOutcome { model, state, moments })
}

/// Builds the model from `cfg`, loads the split's train/val frames and trains.
pub fn train(cfg: &ValidatedConfig, dataset: &Dataset, split: &PatientSplit) -> Result<TrainOutcome> {
    split.check_disjoint()?;
    let model = SegModel::new(cfg, DType::F32)?;
    let train = prepare_samples(&model, dataset.for_patients(split.part(SplitPart::Train)), true)?;
    let val = prepare_samples(&model, dataset.for_patients(split.part(SplitPart::Val)), true)?;
    train_model(model, &train, &val)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Automatic,
    Manual,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "automatic" | "auto" => Ok(EvalMode::Automatic),
            "manual" => Ok(EvalMode::Manual),
            other => Err(Error::Evaluation(format!("unknown mode `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EvalMode::Automatic => "automatic",
            EvalMode::Manual => "manual",
        }
    }
}

/// One geometric prompt used during evaluation, for the provenance audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub frame_id: String,
    pub iteration: usize,
    pub prompt: GeometricPrompt,
    pub origin: PromptOrigin,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub mode: EvalMode,
    pub report: MetricReport,
    pub traces: Vec<(String, RefinementTrace)>,
}

impl Evaluation {
    pub fn provenance(&self) -> Vec<ProvenanceEntry> {
        let mut out = Vec::new();
        for (id, t) in &self.traces {
            for (k, prompts) in t.geometric.iter().enumerate() {
                for (p, o) in prompts {
                    out.push(ProvenanceEntry { frame_id: id.clone(), iteration: k, prompt: *p, origin: *o });
                }
            }
        }
        out
    }

    pub fn ground_truth_prompt_count(&self) -> usize {
        self.provenance().iter().filter(|e| e.origin.uses_ground_truth()).count()
    }
}

/// Automatic refinement trace for one image; no ground truth involved.
pub fn predict(model: &SegModel, text: &Tensor, sample: &PreparedSample) -> Result<RefinementTrace> {
    let cfg = model.config();
    let features = model.image_encoder.encode(&sample.image, sample.letterbox)?;
    let base = model.base_prompts(text, &features)?;
    let r = Refiner::new(model, &features, &base);
    let mut rng = model.store.seeds().rng(&format!("eval/automatic/{}", sample.key));
    r.refine(r.initial()?, cfg.refinement_iters, cfg.refinement_prompts, cfg.accumulate_prompts, &mut rng)
}

/// Scores every sample. Automatic mode refines from the model's own output;
/// manual mode starts refinement from a ground-truth point and a perturbed
/// ground-truth box.
pub fn evaluate(model: &SegModel, samples: &[PreparedSample], mode: EvalMode, method: &str) -> Result<Evaluation> {
    let cfg = model.config();
    let text = model.text_prompt()?.detach();
    let mut report = MetricReport::new(method);
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = match (&s.gt_native, mode) {
            (Some(g), _) => g,
            (None, EvalMode::Manual) => return Err(Error::Evaluation("manual mode requires ground truth".into())),
            (None, EvalMode::Automatic) => return Err(Error::Evaluation(format!("{} has no mask to score against", s.key))),
        };
        let trace = match mode {
            EvalMode::Automatic => predict(model, &text, s)?,
            EvalMode::Manual => {
                let features = model.image_encoder.encode(&s.image, s.letterbox)?;
                let base = model.base_prompts(&text, &features)?;
                let r = Refiner::new(model, &features, &base);
                let mut rng = model.store.seeds().rng(&format!("eval/manual/{}", s.key));
                let (w, h) = gt.dims();
                let gt_box = extract_box(gt).map_err(|_| Error::Evaluation(format!("{} has an empty mask", s.key)))?;
                let loose = perturb_bbox(gt_box, w, h, &mut rng)?;
                let point = sample_point(gt, &mut rng)?;
                let iters = cfg.refinement_iters.max(1);
                r.manual_refine(r.initial()?, loose, point, iters, cfg.refinement_prompts, cfg.accumulate_prompts, &mut rng)?
            }
        };
        let mut dsc_iters = Vec::with_capacity(trace.masks.len());
        let mut nsd_iters = Vec::with_capacity(trace.masks.len());
        for m in &trace.masks {
            dsc_iters.push(dsc(&m.mask, gt)?);
            nsd_iters.push(nsd(&m.mask, gt, cfg.nsd_tolerance)?);
        }
        report.rows.push(MetricRow {
            frame_id: s.key.clone(),
            dsc: *dsc_iters.last().expect("nonempty"),
            nsd: *nsd_iters.last().expect("nonempty"),
            dsc_iters,
            nsd_iters,
        });
        traces.push((s.key.clone(), trace));
    }
    Ok(Evaluation { mode, report, traces })
}

/// Loads one split part of `dataset` and evaluates it.
pub fn evaluate_part(model: &SegModel, dataset: &Dataset, split: &PatientSplit, part: SplitPart, mode: EvalMode, method: &str) -> Result<Evaluation> {
    let entries: Vec<&SampleEntry> = dataset.for_patients(split.part(part)).collect();
    if mode == EvalMode::Manual && entries.iter().any(|e| e.mask_path.is_none()) {
        return Err(Error::Evaluation("manual mode requires ground truth".into()));
    }
    let samples = prepare_samples(model, entries, true)?;
    evaluate(model, &samples, mode, method)
}
