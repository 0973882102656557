use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use promptseg_core::ablate::{ablate, Grid};
use promptseg_core::checkpoint;
use promptseg_core::data::{
    gen_synthetic, load_dataset, load_dataset_unlabeled, load_image_dir, split_by_patient, write_mask, write_tree, Dataset,
    PatientSplit, SplitPart,
};
use promptseg_core::metrics::MetricReport;
use promptseg_core::repro::RunManifest;
use promptseg_core::report::{render_overlay, render_tables, save_overlay};
use promptseg_core::train::{evaluate, predict, prepare_samples, train, EvalMode};
use promptseg_core::{ExperimentConfig, ValidatedConfig};

#[derive(Parser, Debug)]
#[command(name = "promptseg", version, about = "Text-prompted segmentation: data, training, evaluation and ablation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Global seed; overrides the config's seed.
    #[arg(long, global = true, env = "PROMPTSEG_SEED")]
    seed: Option<u64>,
    /// TOML config file, or one of the presets `desk`, `tiny`, `full`.
    #[arg(long, global = true, default_value = "desk")]
    config: String,
    /// Output directory.
    #[arg(long, global = true, env = "PROMPTSEG_OUT", default_value = "out")]
    out: PathBuf,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic speckle dataset tree.
    Synth {
        #[arg(long, default_value_t = 8)]
        patients: usize,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Split a dataset's patients into train/val/test and write split.txt.
    Split {
        #[arg(long)]
        data: PathBuf,
        /// Patient counts `train,val,test`.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Train and write best.ckpt.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Split manifest; created from --counts when absent.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        counts: Option<String>,
    },
    /// Evaluate a checkpoint on one split part.
    Eval {
        /// Checkpoint file, run directory, or path without the extension.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "automatic")]
        mode: String,
        /// Defaults to the data root stored in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the split stored in the checkpoint.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        part: String,
        /// Method name in the report.
        #[arg(long)]
        method: Option<String>,
        /// Also write overlay PNGs.
        #[arg(long)]
        overlays: bool,
    },
    /// Segment unlabeled images; writes masks and prediction overlays.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset tree or flat directory of PNGs.
        #[arg(long)]
        images: PathBuf,
    },
    /// Run the ablation grids.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        counts: Option<String>,
        /// `axis` or `axis=v1,v2`; repeatable. Defaults to all four grids.
        #[arg(long = "grid")]
        grids: Vec<String>,
    },
    /// Tabulate metric CSVs, optionally with paired tests.
    Report {
        /// `path` or `name=path`; repeatable.
        #[arg(long = "metrics", required = true)]
        metrics: Vec<String>,
        /// Method to test the others against.
        #[arg(long)]
        reference: Option<String>,
    },
}

fn resolve_config(common: &Common) -> Result<ValidatedConfig> {
    let mut cfg = match common.config.as_str() {
        "desk" => ExperimentConfig::desk(),
        "tiny" => ExperimentConfig::tiny(),
        "full" => ExperimentConfig::default(),
        path => ExperimentConfig::load(path).with_context(|| format!("loading config {path}"))?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg.validate()?)
}

fn parse_counts(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>()
        .with_context(|| format!("counts `{s}` must be three integers"))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("counts `{s}` must be three integers"),
    }
}

/// Roughly 5:1:2, at least one patient in val and test.
fn default_counts(n: usize) -> (usize, usize, usize) {
    let val = (n / 8).max(1);
    let test = (n / 4).max(1);
    (n.saturating_sub(val + test), val, test)
}

fn make_split(dataset: &Dataset, split: Option<&Path>, counts: Option<&str>, seed: u64, out: &Path) -> Result<PatientSplit> {
    let split = match split {
        Some(p) => PatientSplit::from_manifest(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => {
            let patients = dataset.patients();
            let counts = match counts {
                Some(c) => parse_counts(c)?,
                None => default_counts(patients.len()),
            };
            split_by_patient(&patients, counts, seed)?
        }
    };
    split.check_covers(&dataset.patients())?;
    std::fs::write(out.join("split.txt"), split.to_manifest())?;
    Ok(split)
}

fn resolve_checkpoint(p: &Path) -> Result<PathBuf> {
    let candidates = [p.to_path_buf(), p.join(format!("best.{}", checkpoint::EXTENSION)), p.with_extension(checkpoint::EXTENSION)];
    candidates
        .into_iter()
        .find(|c| c.is_file())
        .with_context(|| format!("no checkpoint at {}", p.display()))
}

fn file_stem(key: &str) -> String {
    key.replace('/', "_")
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let out = &common.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut cfg = resolve_config(common)?;

    match &cli.command {
        Command::Synth { patients, frames, size } => {
            let data = gen_synthetic(*patients, *frames, *size, cfg.seed)?;
            let ds = write_tree(&data, out)?;
            info!("wrote {} frames of {} patients to {}", ds.samples.len(), patients, out.display());
        }
        Command::Split { data, counts } => {
            let ds = load_dataset_unlabeled(data)?;
            let split = make_split(&ds, None, counts.as_deref(), cfg.seed, out)?;
            println!("{}", split.to_manifest());
        }
        Command::Train { data, split, counts } => {
            let ds = load_dataset(data)?;
            let split = make_split(&ds, split.as_deref(), counts.as_deref(), cfg.seed, out)?;
            let outcome = train(&cfg, &ds, &split)?;
            let extra = BTreeMap::from([
                ("data".to_string(), std::fs::canonicalize(data)?.display().to_string()),
                ("split".to_string(), split.to_manifest()),
            ]);
            let path = out.join(format!("best.{}", checkpoint::EXTENSION));
            checkpoint::save(&path, &outcome.model, &outcome.state, &outcome.moments, &extra)?;
            std::fs::write(out.join("train_state.json"), serde_json::to_string_pretty(&outcome.state)?)?;
            println!(
                "initial loss {:.4}, best epoch {:?}, best val loss {:.4}; checkpoint {}",
                outcome.state.initial_train_loss,
                outcome.state.best_epoch.map(|e| e + 1),
                outcome.state.best_val_loss,
                path.display()
            );
        }
        Command::Eval { checkpoint: ck, mode, data, split, part, method, overlays } => {
            let mode = EvalMode::parse(mode)?;
            let part = SplitPart::parse(part)?;
            let loaded = checkpoint::load(resolve_checkpoint(ck)?)?;
            cfg = loaded.model.config().clone();
            let data = match data {
                Some(d) => d.clone(),
                None => PathBuf::from(loaded.extra.get("data").context("checkpoint has no data root; pass --data")?),
            };
            let ds = load_dataset_unlabeled(&data)?;
            let split = match split {
                Some(p) => PatientSplit::from_manifest(&std::fs::read_to_string(p)?)?,
                None => PatientSplit::from_manifest(loaded.extra.get("split").context("checkpoint has no split; pass --split")?)?,
            };
            let entries: Vec<_> = ds.for_patients(split.part(part)).collect();
            if entries.iter().any(|e| e.mask_path.is_none()) {
                if mode == EvalMode::Manual {
                    bail!("manual mode requires ground truth");
                }
                bail!("evaluation needs masks for every frame");
            }
            let method = method.clone().unwrap_or_else(|| mode.label().to_string());
            let samples = prepare_samples(&loaded.model, entries.iter().copied(), true)?;
            let ev = evaluate(&loaded.model, &samples, mode, &method)?;
            let csv = out.join(format!("metrics_{}.csv", mode.label()));
            ev.report.write_csv(&csv)?;
            std::fs::write(out.join(format!("provenance_{}.json", mode.label())), serde_json::to_string_pretty(&ev.provenance())?)?;
            if *overlays {
                for (entry, (key, trace)) in entries.iter().zip(&ev.traces) {
                    let img = entry.load_image()?;
                    let gt = entry.load_mask()?;
                    let o = render_overlay(&img.pixels, trace.final_mask(), Some(&gt))?;
                    save_overlay(out.join("overlays").join(format!("{}.png", file_stem(key))), &o)?;
                }
            }
            let (d, n) = (ev.report.dsc_summary(), ev.report.nsd_summary());
            println!("{method}: DSC {:.2} ± {:.2}, NSD {:.2} ± {:.2} over {} frames -> {}", d.0, d.1, n.0, n.1, ev.report.rows.len(), csv.display());
        }
        Command::Infer { checkpoint: ck, images } => {
            let loaded = checkpoint::load(resolve_checkpoint(ck)?)?;
            cfg = loaded.model.config().clone();
            let ds = load_image_dir(images)?;
            let samples = prepare_samples(&loaded.model, &ds.samples, false)?;
            let text = loaded.model.text_prompt()?.detach();
            std::fs::create_dir_all(out.join("masks"))?;
            for (entry, s) in ds.samples.iter().zip(&samples) {
                let trace = predict(&loaded.model, &text, s)?;
                let mask = trace.final_mask();
                let stem = file_stem(&s.key);
                write_mask(mask, &out.join("masks").join(format!("{stem}.png")))?;
                let img = entry.load_image()?;
                save_overlay(out.join("overlays").join(format!("{stem}.png")), &render_overlay(&img.pixels, mask, None)?)?;
            }
            println!("segmented {} images into {}", samples.len(), out.display());
        }
        Command::Ablate { data, split, counts, grids } => {
            let ds = load_dataset(data)?;
            let split = make_split(&ds, split.as_deref(), counts.as_deref(), cfg.seed, out)?;
            let grids = if grids.is_empty() {
                Grid::defaults()
            } else {
                grids.iter().map(|g| Grid::parse(g)).collect::<promptseg_core::Result<Vec<_>>>()?
            };
            let report = ablate(&cfg, &grids, &ds, &split)?;
            report.write(out)?;
            print!("{}", report.summary_markdown()?);
        }
        Command::Report { metrics, reference } => {
            let reports = metrics
                .iter()
                .map(|m| {
                    let (name, path) = match m.split_once('=') {
                        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                        None => {
                            let p = PathBuf::from(m);
                            (p.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default(), p)
                        }
                    };
                    Ok(MetricReport::read_csv(&path, &name)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let tables = render_tables(&reports, reference.as_deref())?;
            std::fs::write(out.join("table.md"), &tables.markdown)?;
            std::fs::write(out.join("table.csv"), &tables.csv)?;
            print!("{}", tables.markdown);
        }
    }

    RunManifest::new(&cfg, std::env::args().collect()).write(out.join("manifest.json"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
