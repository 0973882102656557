//! Training losses, overlap and boundary metrics, and the paired t-test.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::types::{BinaryMask, Point};

pub const DICE_SMOOTH: f64 = 1.0;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `{0, 1}` tensor of a mask, `(height, width)`.
pub fn mask_tensor(mask: &BinaryMask, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = mask.as_slice().iter().map(|b| *b as f32).collect();
    Ok(Tensor::from_vec(v, (mask.height(), mask.width()), device)?.to_dtype(dtype)?)
}

/// `1 − (2 Σ p g + ε) / (Σ p + Σ g + ε)`.
pub fn dice_loss(probabilities: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(probabilities, gt)?;
    let inter = (probabilities * gt)?.sum_all()?;
    let num = ((inter * 2.0)? + DICE_SMOOTH)?;
    let den = ((probabilities.sum_all()? + gt.sum_all()?)? + DICE_SMOOTH)?;
    Ok((1.0 - (num / den)?)?)
}

/// Mean of `log(1 + e^{−|ℓ|}) + max(ℓ, 0) − ℓ g`.
pub fn bce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    same_shape(logits, gt)?;
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    let per = ((soft + logits.relu()?)? - (logits * gt)?)?;
    Ok(per.mean_all()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x.neg()?.exp()? + 1.0)?).recip()?)
}

/// Dice on sigmoid probabilities plus BCE on logits, weighted 1:1.
pub fn composite_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((dice_loss(&sigmoid(logits)?, gt)? + bce_loss(logits, gt)?)?)
}

/// Dice similarity in percent.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let (p, g) = (pred.count(), gt.count());
    if p == 0 && g == 0 {
        return Ok(100.0);
    }
    if p == 0 || g == 0 {
        return Ok(0.0);
    }
    let inter = pred.as_slice().iter().zip(gt.as_slice()).filter(|(a, b)| **a == 1 && **b == 1).count();
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Foreground pixels with a 4-neighbour outside the foreground, counting
/// the image edge as outside.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    BinaryMask::from_fn(w, h, |x, y| {
        mask.get(x, y)
            && (x == 0 || y == 0 || x + 1 == w || y + 1 == h || !mask.get(x - 1, y) || !mask.get(x + 1, y) || !mask.get(x, y - 1) || !mask.get(x, y + 1))
    })
}

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel
/// of `sites` (infinite when there are none).
pub fn squared_distance_transform(sites: &BinaryMask) -> Vec<f64> {
    let (w, h) = sites.dims();
    let mut grid: Vec<f64> = sites.as_slice().iter().map(|b| if *b == 1 { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Normalized surface distance (surface Dice) at tolerance `tau`, in percent.
pub fn nsd(pred: &BinaryMask, gt: &BinaryMask, tau: f64) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(100.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    let dp = squared_distance_transform(&bp);
    let dg = squared_distance_transform(&bg);
    let t2 = tau * tau;
    let within = |b: &BinaryMask, d: &[f64]| b.as_slice().iter().zip(d).filter(|(on, d)| **on == 1 && **d <= t2).count();
    let hits = within(&bp, &dg) + within(&bg, &dp);
    Ok(100.0 * hits as f64 / (bp.count() + bg.count()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
}

/// Two-tailed paired-sample t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::DegenerateTest("need at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TTest { t: 0.0, p: 1.0 });
        }
        return Err(Error::DegenerateTest("differences have zero variance".into()));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::DegenerateTest(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0);
    Ok(TTest { t, p })
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub frame_id: String,
    pub dsc: f64,
    pub nsd: f64,
    /// Scores after each refinement iteration, index 0 being text-only.
    pub dsc_iters: Vec<f64>,
    pub nsd_iters: Vec<f64>,
}

/// Per-image scores with mean ± sd aggregates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<MetricRow>,
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

impl MetricReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self { method: method.into(), rows: Vec::new() }
    }

    pub fn dsc_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.dsc).collect()
    }

    pub fn nsd_values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.nsd).collect()
    }

    pub fn dsc_summary(&self) -> (f64, f64) {
        mean_std(&self.dsc_values())
    }

    pub fn nsd_summary(&self) -> (f64, f64) {
        mean_std(&self.nsd_values())
    }

    pub fn iterations(&self) -> usize {
        self.rows.iter().map(|r| r.dsc_iters.len()).max().unwrap_or(0)
    }

    /// Mean DSC after iteration `k`.
    pub fn dsc_at(&self, k: usize) -> f64 {
        mean_std(&self.rows.iter().filter_map(|r| r.dsc_iters.get(k).copied()).collect::<Vec<_>>()).0
    }

    pub fn frame_ids(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.frame_id.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let iters = self.iterations();
        let mut header = vec!["frame_id".to_string(), "dsc".into(), "nsd".into()];
        header.extend((0..iters).map(|k| format!("dsc_iter{k}")));
        header.extend((0..iters).map(|k| format!("nsd_iter{k}")));
        let mut out = header.join(",");
        out.push('\n');
        let mut line = |id: &str, vals: Vec<f64>| {
            out.push_str(id);
            for v in vals {
                out.push(',');
                out.push_str(&fmt(v));
            }
            out.push('\n');
        };
        for r in &self.rows {
            let mut v = vec![r.dsc, r.nsd];
            v.extend((0..iters).map(|k| r.dsc_iters.get(k).copied().unwrap_or(f64::NAN)));
            v.extend((0..iters).map(|k| r.nsd_iters.get(k).copied().unwrap_or(f64::NAN)));
            line(&r.frame_id, v);
        }
        let column = |f: &dyn Fn(&MetricRow) -> f64| mean_std(&self.rows.iter().map(f).collect::<Vec<_>>());
        let mut stats: Vec<(f64, f64)> = vec![column(&|r| r.dsc), column(&|r| r.nsd)];
        for k in 0..iters {
            stats.push(column(&|r| r.dsc_iters.get(k).copied().unwrap_or(f64::NAN)));
        }
        for k in 0..iters {
            stats.push(column(&|r| r.nsd_iters.get(k).copied().unwrap_or(f64::NAN)));
        }
        line("mean", stats.iter().map(|s| s.0).collect());
        line("std", stats.iter().map(|s| s.1).collect());
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Reads the per-image rows back, ignoring the summary rows.
    pub fn read_csv(path: impl AsRef<Path>, method: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let idx = |name: &str| headers.iter().position(|h| h == name);
        let (Some(id), Some(d), Some(n)) = (idx("frame_id"), idx("dsc"), idx("nsd")) else {
            return Err(Error::load(path, "missing frame_id/dsc/nsd columns"));
        };
        let iter_cols = |prefix: &str| -> Vec<usize> { (0..).map_while(|k| idx(&format!("{prefix}{k}"))).collect() };
        let (dcols, ncols) = (iter_cols("dsc_iter"), iter_cols("nsd_iter"));
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::load(path, e.to_string()));
        let mut report = Self::new(method);
        for rec in reader.records() {
            let rec = rec?;
            if matches!(&rec[id], "mean" | "std") {
                continue;
            }
            report.rows.push(MetricRow {
                frame_id: rec[id].to_string(),
                dsc: num(&rec[d])?,
                nsd: num(&rec[n])?,
                dsc_iters: dcols.iter().map(|c| num(&rec[*c])).collect::<Result<_>>()?,
                nsd_iters: ncols.iter().map(|c| num(&rec[*c])).collect::<Result<_>>()?,
            });
        }
        Ok(report)
    }
}

/// Brute-force reference implementations, exposed for tests and benches.
pub mod reference {
    use super::*;

    pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> f64 {
        let p: Vec<Point> = pred.foreground().collect();
        let g: Vec<Point> = gt.foreground().collect();
        if p.is_empty() && g.is_empty() {
            return 100.0;
        }
        if p.is_empty() || g.is_empty() {
            return 0.0;
        }
        let inter = p.iter().filter(|x| g.contains(x)).count();
        100.0 * 2.0 * inter as f64 / (p.len() + g.len()) as f64
    }

    fn boundary_points(m: &BinaryMask) -> Vec<Point> {
        let (w, h) = (m.width() as i64, m.height() as i64);
        m.foreground()
            .filter(|p| {
                let (x, y) = (p.x as i64, p.y as i64);
                [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)]
                    .iter()
                    .any(|&(a, b)| a < 0 || b < 0 || a >= w || b >= h || !m.get(a as usize, b as usize))
            })
            .collect()
    }

    /// All-pairs boundary distances.
    pub fn nsd(pred: &BinaryMask, gt: &BinaryMask, tau: f64) -> f64 {
        if pred.is_empty() && gt.is_empty() {
            return 100.0;
        }
        if pred.is_empty() || gt.is_empty() {
            return 0.0;
        }
        let bp = boundary_points(pred);
        let bg = boundary_points(gt);
        let close = |a: &Point, set: &[Point]| {
            set.iter().any(|b| {
                let dx = a.x as f64 - b.x as f64;
                let dy = a.y as f64 - b.y as f64;
                (dx * dx + dy * dy).sqrt() <= tau
            })
        };
        let hits = bp.iter().filter(|p| close(p, &bg)).count() + bg.iter().filter(|p| close(p, &bp)).count();
        100.0 * hits as f64 / (bp.len() + bg.len()) as f64
    }
}
