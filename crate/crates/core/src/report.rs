//! Overlay figures and metric tables.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::{paired_ttest, MetricReport};
use crate::types::BinaryMask;

pub const GREEN: Rgb<u8> = Rgb([0, 200, 0]);
pub const RED: Rgb<u8> = Rgb([220, 0, 0]);
pub const ORANGE: Rgb<u8> = Rgb([255, 150, 0]);

/// `"mm.dd ± ss.dd"`.
pub fn mean_sd((mean, sd): (f64, f64)) -> String {
    format!("{mean:.2} ± {sd:.2}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverlayRole {
    Background,
    Prediction,
    GroundTruth,
    Overlap,
}

pub fn overlay_role(pred: bool, gt: bool) -> OverlayRole {
    match (pred, gt) {
        (false, false) => OverlayRole::Background,
        (true, false) => OverlayRole::Prediction,
        (false, true) => OverlayRole::GroundTruth,
        (true, true) => OverlayRole::Overlap,
    }
}

/// Prediction-only pixels green, ground-truth-only red, overlap orange, the
/// rest the original grey level. Without `gt` only the prediction is coloured.
pub fn render_overlay(image: &GrayImage, pred: &BinaryMask, gt: Option<&BinaryMask>) -> Result<RgbImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if pred.dims() != (w, h) {
        return Err(Error::Shape(format!("prediction {:?} vs image {:?}", pred.dims(), (w, h))));
    }
    if let Some(g) = gt {
        pred.ensure_same_shape(g)?;
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (xu, yu) = (x as usize, y as usize);
        match overlay_role(pred.get(xu, yu), gt.is_some_and(|g| g.get(xu, yu))) {
            OverlayRole::Background => {
                let v = image.get_pixel(x, y).0[0];
                Rgb([v, v, v])
            }
            OverlayRole::Prediction => GREEN,
            OverlayRole::GroundTruth => RED,
            OverlayRole::Overlap => ORANGE,
        }
    }))
}

pub fn save_overlay(path: impl AsRef<Path>, overlay: &RgbImage) -> Result<()> {
    if let Some(dir) = path.as_ref().parent() {
        std::fs::create_dir_all(dir)?;
    }
    overlay.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tables {
    pub markdown: String,
    pub csv: String,
}

fn by_frame(r: &MetricReport) -> BTreeMap<&str, (f64, f64)> {
    r.rows.iter().map(|row| (row.frame_id.as_str(), (row.dsc, row.nsd))).collect()
}

/// Paired two-sided p-values `(dsc, nsd)` of `other` against `reference`.
pub fn paired_p(reference: &MetricReport, other: &MetricReport) -> Result<(Option<f64>, Option<f64>)> {
    let a = by_frame(reference);
    let b = by_frame(other);
    if a.len() != reference.rows.len() || b.len() != other.rows.len() || !a.keys().eq(b.keys()) {
        return Err(Error::Report(format!(
            "`{}` and `{}` cover different frames; paired tests need identical sets",
            reference.method, other.method
        )));
    }
    let p = |f: fn(&(f64, f64)) -> f64| -> Result<Option<f64>> {
        let xs: Vec<f64> = a.values().map(f).collect();
        let ys: Vec<f64> = b.values().map(f).collect();
        match paired_ttest(&xs, &ys) {
            Ok(t) => Ok(Some(t.p)),
            Err(Error::DegenerateTest(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok((p(|v| v.0)?, p(|v| v.1)?))
}

/// One row per report. With `reference`, adds paired-test p-value columns
/// against the report of that method name.
pub fn render_tables(reports: &[MetricReport], reference: Option<&str>) -> Result<Tables> {
    if reports.is_empty() {
        return Err(Error::Report("no reports to tabulate".into()));
    }
    let reference = match reference {
        Some(name) => Some(
            reports
                .iter()
                .find(|r| r.method == name)
                .ok_or_else(|| Error::Report(format!("reference method `{name}` not among the reports")))?,
        ),
        None => None,
    };
    let mut headers = vec!["Method", "DSC", "NSD"];
    if reference.is_some() {
        headers.extend(["p (DSC)", "p (NSD)"]);
    }
    let fmt_p = |p: Option<f64>| p.map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}"));
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let mut row = vec![r.method.clone(), mean_sd(r.dsc_summary()), mean_sd(r.nsd_summary())];
        if let Some(base) = reference {
            if std::ptr::eq(base, r) {
                row.extend(["-".to_string(), "-".to_string()]);
            } else {
                let (pd, pn) = paired_p(base, r)?;
                row.extend([fmt_p(pd), fmt_p(pn)]);
            }
        }
        rows.push(row);
    }
    let mut markdown = format!("| {} |\n|{}\n", headers.join(" | "), " --- |".repeat(headers.len()));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&headers)?;
    for row in &rows {
        markdown.push_str(&format!("| {} |\n", row.join(" | ")));
        w.write_record(row)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Report(e.to_string()))?).expect("utf8");
    Ok(Tables { markdown, csv })
}
