//! One-axis sweeps over rank, context length, prompt depth and refinement
//! prompts. Each cell trains (or reuses an identical training) and evaluates
//! automatically on the test part.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RefinementPrompts, ValidatedConfig};
use crate::data::{Dataset, PatientSplit, SplitPart};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::nn::lora::count_trainable;
use crate::report::mean_sd;
use crate::sam::SegModel;
use crate::train::{evaluate, prepare_samples, train_model, EvalMode, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Rank,
    Context,
    Depth,
    Refinement,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Rank, Axis::Context, Axis::Depth, Axis::Refinement];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rank" => Ok(Axis::Rank),
            "context" => Ok(Axis::Context),
            "depth" => Ok(Axis::Depth),
            "refinement" => Ok(Axis::Refinement),
            other => Err(Error::Ablation(format!("unknown axis `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Axis::Rank => "rank",
            Axis::Context => "context",
            Axis::Depth => "depth",
            Axis::Refinement => "refinement",
        }
    }

    pub fn default_values(&self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Rank => &["1", "4", "16"],
            Axis::Context => &["4", "8", "12"],
            Axis::Depth => &["1", "4", "9", "12"],
            Axis::Refinement => &["none", "box+1random", "1random", "box+5random", "box+centroid"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Column headers of the rendered table.
    pub fn headers(&self) -> Vec<&'static str> {
        match self {
            Axis::Rank => vec!["LoRA Rank", "Params.#", "DSC", "NSD"],
            Axis::Context => vec!["Context Length", "DSC", "NSD"],
            Axis::Depth => vec!["Layer Depth", "DSC", "NSD"],
            Axis::Refinement => vec!["BBoxes", "Points", "DSC", "NSD"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub axis: Axis,
    pub values: Vec<String>,
}

impl Grid {
    pub fn default_for(axis: Axis) -> Self {
        Self { axis, values: axis.default_values() }
    }

    pub fn defaults() -> Vec<Self> {
        Axis::ALL.iter().map(|a| Self::default_for(*a)).collect()
    }

    /// `axis` or `axis=v1,v2,...`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('=') {
            None => Ok(Self::default_for(Axis::parse(s)?)),
            Some((a, vals)) => {
                let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
                if values.is_empty() {
                    return Err(Error::Ablation(format!("grid `{s}` has no values")));
                }
                Ok(Self { axis: Axis::parse(a)?, values })
            }
        }
    }

    /// Base config with the cell value applied.
    pub fn cell_config(&self, base: &ExperimentConfig, value: &str) -> Result<ValidatedConfig> {
        let mut c = base.clone();
        let int = || value.parse::<usize>().map_err(|_| Error::Ablation(format!("{} value `{value}` is not an integer", self.axis.label())));
        match self.axis {
            Axis::Rank => c.lora_rank = int()?,
            Axis::Context => c.context_tokens = int()?,
            Axis::Depth => c.prompt_depth = int()?,
            Axis::Refinement => match RefinementPrompts::parse(value)? {
                RefinementPrompts::None => c.refinement_iters = 0,
                p => {
                    c.refinement_prompts = p;
                    c.refinement_iters = c.refinement_iters.max(1);
                }
            },
        }
        c.validate()
    }
}

/// Identity of the training a config implies: fields that only affect
/// evaluation are normalized away.
pub fn training_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.refinement_iters = 0;
    c.accumulate_prompts = false;
    if !c.train_through_refinement {
        c.refinement_prompts = RefinementPrompts::None;
    }
    crate::repro::config_hash(&c)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub value: String,
    pub config_hash: String,
    pub trainable_params: usize,
    pub dsc: (f64, f64),
    pub nsd: (f64, f64),
    pub best_epoch: Option<usize>,
    #[serde(skip)]
    pub report: Option<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub axis: Axis,
    pub cells: Vec<CellResult>,
}

fn refinement_columns(value: &str) -> Result<[String; 2]> {
    let yes_no = |b: bool| if b { "✓" } else { "✗" }.to_string();
    Ok(match RefinementPrompts::parse(value)? {
        RefinementPrompts::None => [yes_no(false), yes_no(false)],
        RefinementPrompts::BoxRandom(n) => [yes_no(true), format!("{n} Random")],
        RefinementPrompts::Random(n) => [yes_no(false), format!("{n} Random")],
        RefinementPrompts::BoxCentroid => [yes_no(true), "Centroid".into()],
    })
}

impl GridResult {
    pub fn rows(&self) -> Result<Vec<Vec<String>>> {
        self.cells
            .iter()
            .map(|c| {
                let mut row = match self.axis {
                    Axis::Rank => vec![c.value.clone(), c.trainable_params.to_string()],
                    Axis::Context | Axis::Depth => vec![c.value.clone()],
                    Axis::Refinement => refinement_columns(&c.value)?.to_vec(),
                };
                row.push(mean_sd(c.dsc));
                row.push(mean_sd(c.nsd));
                Ok(row)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.axis.headers())?;
        for r in self.rows()? {
            w.write_record(&r)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?).expect("utf8"))
    }

    pub fn to_markdown(&self) -> Result<String> {
        let headers = self.axis.headers();
        let mut s = format!("| {} |\n|{}\n", headers.join(" | "), " --- |".repeat(headers.len()));
        for r in self.rows()? {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub grids: Vec<GridResult>,
}

impl AblationReport {
    pub fn summary_markdown(&self) -> Result<String> {
        let mut s = String::new();
        for g in &self.grids {
            s.push_str(&format!("## {}\n\n{}\n", g.axis.label(), g.to_markdown()?));
        }
        Ok(s)
    }

    /// `ablation_<axis>.csv` per grid, `ablation_summary.md` and the JSON form.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for g in &self.grids {
            std::fs::write(dir.join(format!("ablation_{}.csv", g.axis.label())), g.to_csv()?)?;
        }
        std::fs::write(dir.join("ablation_summary.md"), self.summary_markdown()?)?;
        std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

struct Trained {
    model: SegModel,
    state: TrainState,
}

/// Runs every cell of every grid. Identical trainings are shared across cells.
pub fn ablate(base: &ExperimentConfig, grids: &[Grid], dataset: &Dataset, split: &PatientSplit) -> Result<AblationReport> {
    split.check_disjoint()?;
    for g in grids {
        if g.values.is_empty() {
            return Err(Error::Ablation(format!("{} grid has no values", g.axis.label())));
        }
    }
    let mut cache: BTreeMap<String, Trained> = BTreeMap::new();
    let mut out = Vec::with_capacity(grids.len());
    for g in grids {
        let mut cells = Vec::with_capacity(g.values.len());
        for value in &g.values {
            let cfg = g.cell_config(base, value)?;
            let key = training_key(&cfg);
            if !cache.contains_key(&key) {
                info!("ablation {}={value}: training", g.axis.label());
                let model = SegModel::new(&cfg, DType::F32)?;
                let train = prepare_samples(&model, dataset.for_patients(split.part(SplitPart::Train)), true)?;
                let val = prepare_samples(&model, dataset.for_patients(split.part(SplitPart::Val)), true)?;
                let o = train_model(model, &train, &val)?;
                cache.insert(key.clone(), Trained { model: o.model, state: o.state });
            } else {
                info!("ablation {}={value}: reusing training", g.axis.label());
            }
            let trained = &cache[&key];
            let model = trained.model.with_eval_config(&cfg)?;
            let test = prepare_samples(&model, dataset.for_patients(split.part(SplitPart::Test)), true)?;
            let ev = evaluate(&model, &test, EvalMode::Automatic, &format!("{}={value}", g.axis.label()))?;
            cells.push(CellResult {
                value: value.clone(),
                config_hash: cfg.hash(),
                trainable_params: count_trainable(&model.store).trainable,
                dsc: ev.report.dsc_summary(),
                nsd: ev.report.nsd_summary(),
                best_epoch: trained.state.best_epoch,
                report: Some(ev.report),
            });
        }
        out.push(GridResult { axis: g.axis, cells });
    }
    Ok(AblationReport { grids: out })
}
