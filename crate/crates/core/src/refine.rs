//! Iterative refinement: re-prompt the decoder with geometry read off its own
//! previous mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RefinementPrompts;
use crate::data::sample_point;
use crate::error::{Error, Result};
use crate::sam::{binarize, BasePrompts, GeometricPrompt, ImageFeatures, SegModel};
use crate::types::{BinaryMask, BoundingBox, MaskRecord, MaskSource, Point, PromptKind, PromptOrigin};

/// Tight exclusive box over the foreground.
pub fn extract_box(mask: &BinaryMask) -> Result<BoundingBox> {
    let mut it = mask.foreground();
    let first = it.next().ok_or_else(|| Error::Prompt("cannot take the box of an empty mask".into()))?;
    let (mut x1, mut y1, mut x2, mut y2) = (first.x, first.y, first.x, first.y);
    for p in it {
        x1 = x1.min(p.x);
        y1 = y1.min(p.y);
        x2 = x2.max(p.x);
        y2 = y2.max(p.y);
    }
    Ok(BoundingBox::new(x1, y1, x2 + 1, y2 + 1))
}

/// Mass centroid rounded to a pixel. When that pixel is background the
/// nearest foreground pixel to the unrounded centroid is returned instead,
/// ties going to the first in row-major order.
pub fn extract_centroid(mask: &BinaryMask) -> Result<Point> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::Prompt("cannot take the centroid of an empty mask".into()));
    }
    let (sx, sy) = mask.foreground().fold((0u64, 0u64), |(sx, sy), p| (sx + p.x as u64, sy + p.y as u64));
    let cx = sx as f64 / n as f64;
    let cy = sy as f64 / n as f64;
    let rounded = Point::new(cx.round() as u32, cy.round() as u32);
    if mask.get(rounded.x as usize, rounded.y as usize) {
        return Ok(rounded);
    }
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for p in mask.foreground() {
        let d = (p.x as f64 - cx).powi(2) + (p.y as f64 - cy).powi(2);
        if d < best_d {
            best_d = d;
            best = Some(p);
        }
    }
    Ok(best.expect("mask is nonempty"))
}

/// Geometric prompts derived from a previous prediction.
pub fn derive_prompts(mask: &BinaryMask, strategy: RefinementPrompts, rng: &mut impl Rng) -> Result<Vec<(GeometricPrompt, PromptOrigin)>> {
    let mut out = Vec::new();
    if strategy.uses_box() {
        out.push((GeometricPrompt::Box(extract_box(mask)?), PromptOrigin::Prediction));
    }
    match strategy {
        RefinementPrompts::None => {}
        RefinementPrompts::BoxCentroid => out.push((GeometricPrompt::Point(extract_centroid(mask)?), PromptOrigin::Prediction)),
        RefinementPrompts::BoxRandom(k) | RefinementPrompts::Random(k) => {
            for _ in 0..k {
                out.push((GeometricPrompt::Point(sample_point(mask, rng)?), PromptOrigin::PredictionSample));
            }
        }
    }
    Ok(out)
}

/// Everything produced for one image: masks per iteration (index 0 is the
/// text-only prediction) and the prompts behind each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    #[serde(skip)]
    pub masks: Vec<MaskRecord>,
    /// Decoder token kinds per iteration; empty for a skipped iteration.
    pub prompts_used: Vec<Vec<PromptKind>>,
    /// Geometric prompts per iteration with their origin.
    pub geometric: Vec<Vec<(GeometricPrompt, PromptOrigin)>>,
}

impl RefinementTrace {
    pub fn final_mask(&self) -> &BinaryMask {
        &self.masks.last().expect("trace always holds the initial mask").mask
    }

    pub fn origins(&self) -> impl Iterator<Item = PromptOrigin> + '_ {
        self.geometric.iter().flatten().map(|(_, o)| *o)
    }

    pub fn uses_ground_truth(&self) -> bool {
        self.origins().any(|o| o.uses_ground_truth())
    }
}

/// Shared state for decoding one image repeatedly.
pub struct Refiner<'a> {
    pub model: &'a SegModel,
    pub features: &'a ImageFeatures,
    pub base: &'a BasePrompts,
}

impl<'a> Refiner<'a> {
    pub fn new(model: &'a SegModel, features: &'a ImageFeatures, base: &'a BasePrompts) -> Self {
        Self { model, features, base }
    }

    fn base_kinds(&self) -> Vec<PromptKind> {
        let mut k = vec![PromptKind::Text];
        if self.base.dense.is_some() {
            k.push(PromptKind::DenseSummary);
        }
        k
    }

    /// Native-resolution mask from text (+ dense) tokens and optional geometry.
    pub fn decode(&self, geometric: &[GeometricPrompt]) -> Result<(BinaryMask, Vec<PromptKind>)> {
        let lb = &self.features.letterbox;
        let geo = if geometric.is_empty() { None } else { Some(self.model.encode_geometric(geometric, lb)?) };
        let logits = self.model.decode(self.features, self.base, geo.as_ref())?.native()?;
        let mut kinds = self.base_kinds();
        if let Some(g) = &geo {
            kinds.extend(g.kinds.iter().copied());
        }
        Ok((binarize(&logits, lb.native_w, lb.native_h, 0.0), kinds))
    }

    /// Text-only prediction, the first entry of every trace.
    pub fn initial(&self) -> Result<MaskRecord> {
        let (mask, kinds) = self.decode(&[])?;
        Ok(MaskRecord { mask, source: MaskSource::Prediction { iteration: 0, prompts: kinds } })
    }

    /// Automatic refinement from `initial`.
    pub fn refine(
        &self,
        initial: MaskRecord,
        iters: usize,
        strategy: RefinementPrompts,
        accumulate: bool,
        rng: &mut impl Rng,
    ) -> Result<RefinementTrace> {
        self.run(initial, iters, strategy, accumulate, None, rng)
    }

    /// Iteration 1 uses the supplied ground-truth-derived prompts; later
    /// iterations derive theirs from the prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn manual_refine(
        &self,
        initial: MaskRecord,
        gt_box_perturbed: BoundingBox,
        gt_point: Point,
        iters: usize,
        strategy: RefinementPrompts,
        accumulate: bool,
        rng: &mut impl Rng,
    ) -> Result<RefinementTrace> {
        let lb = &self.features.letterbox;
        let manual = vec![
            (GeometricPrompt::Box(gt_box_perturbed), PromptOrigin::PerturbedGroundTruth),
            (GeometricPrompt::Point(gt_point), PromptOrigin::GroundTruth),
        ];
        for (p, _) in &manual {
            p.validate(lb.native_w, lb.native_h)?;
        }
        self.run(initial, iters, strategy, accumulate, Some(manual), rng)
    }

    fn run(
        &self,
        initial: MaskRecord,
        iters: usize,
        strategy: RefinementPrompts,
        accumulate: bool,
        mut manual: Option<Vec<(GeometricPrompt, PromptOrigin)>>,
        rng: &mut impl Rng,
    ) -> Result<RefinementTrace> {
        let initial_kinds = match &initial.source {
            MaskSource::Prediction { prompts, .. } => prompts.clone(),
            MaskSource::GroundTruth => Vec::new(),
        };
        let mut trace = RefinementTrace { masks: vec![initial], prompts_used: vec![initial_kinds], geometric: vec![Vec::new()] };
        let mut carried: Vec<(GeometricPrompt, PromptOrigin)> = Vec::new();
        for k in 1..=iters {
            let prev = trace.masks[k - 1].mask.clone();
            let fresh = match manual.take() {
                Some(m) => m,
                None if prev.is_empty() || strategy == RefinementPrompts::None => {
                    trace.masks.push(MaskRecord { mask: prev, source: MaskSource::Prediction { iteration: k, prompts: Vec::new() } });
                    trace.prompts_used.push(Vec::new());
                    trace.geometric.push(Vec::new());
                    continue;
                }
                None => derive_prompts(&prev, strategy, rng)?,
            };
            let used = if accumulate {
                carried.extend(fresh);
                carried.clone()
            } else {
                fresh
            };
            let geometric: Vec<GeometricPrompt> = used.iter().map(|(p, _)| *p).collect();
            let (mask, kinds) = self.decode(&geometric)?;
            trace.masks.push(MaskRecord { mask, source: MaskSource::Prediction { iteration: k, prompts: kinds.clone() } });
            trace.prompts_used.push(kinds);
            trace.geometric.push(used);
        }
        Ok(trace)
    }
}
