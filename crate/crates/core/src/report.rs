//! Evaluation report files and their static renderings.
//!
//! Every number is written with a fixed precision so reports from identical
//! inputs are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{f1_frame, EvalReport, LabelStats};

/// F1 of every class at every grid threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauSweep {
    pub grid: Vec<f64>,
    /// `f1[k][j]`: class `j` at `grid[k]`.
    pub f1: Vec<Vec<f64>>,
}

pub fn tau_sweep(scores: &[Vec<f64>], labels: &[Vec<u8>], grid: &[f64]) -> Result<TauSweep> {
    let n = labels.first().map_or(0, Vec::len);
    let f1 = grid
        .iter()
        .map(|&t| Ok(f1_frame(scores, labels, &vec![t; n])?.classes.iter().map(|c| c.f1).collect()))
        .collect::<Result<_>>()?;
    Ok(TauSweep {
        grid: grid.to_vec(),
        f1,
    })
}

/// Everything measured for one prediction head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    pub head: String,
    pub report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuned: Option<EvalReport>,
    pub sweep: TauSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub label_names: Vec<String>,
    pub label_stats: LabelStats,
    pub correlation: Vec<Vec<f64>>,
    pub heads: Vec<HeadReport>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row per class, then a `macro` row.
pub fn report_tsv(report: &EvalReport, label_names: &[String]) -> String {
    let mut s = String::from("class\ttp\tfp\tfn\ttn\tprecision\trecall\tf1\tthreshold\n");
    for (c, name) in report.classes.iter().zip(label_names) {
        let _ = writeln!(
            s,
            "{name}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.2}",
            c.tp, c.fp, c.fn_, c.tn, c.precision, c.recall, c.f1, c.threshold
        );
    }
    let n = report.classes.len().max(1) as f64;
    let mean = |f: fn(&crate::eval::ClassReport) -> f64| report.classes.iter().map(f).sum::<f64>() / n;
    let _ = writeln!(
        s,
        "macro\t\t\t\t\t{:.6}\t{:.6}\t{:.6}\t",
        mean(|c| c.precision),
        mean(|c| c.recall),
        report.macro_f1
    );
    s
}

pub fn sweep_tsv(sweep: &TauSweep, label_names: &[String]) -> String {
    let mut s = String::from("tau");
    for name in label_names {
        let _ = write!(s, "\t{name}");
    }
    s.push('\n');
    for (t, row) in sweep.grid.iter().zip(&sweep.f1) {
        let _ = write!(s, "{t:.2}");
        for v in row {
            let _ = write!(s, "\t{v:.6}");
        }
        s.push('\n');
    }
    s
}

pub fn matrix_tsv(matrix: &[Vec<f64>], label_names: &[String]) -> String {
    let mut s = String::new();
    for name in label_names {
        let _ = write!(s, "\t{name}");
    }
    s.push('\n');
    for (row, name) in matrix.iter().zip(label_names) {
        s.push_str(name);
        for v in row {
            let _ = write!(s, "\t{v:.6}");
        }
        s.push('\n');
    }
    s
}

/// Writes `report.json`, `correlation.tsv` and per head `report_<head>.tsv`,
/// `tau_sweep_<head>.tsv` and, when tuned, `report_<head>_tuned.tsv`.
pub fn write_run_report(dir: &Path, run: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = &run.label_names;
    for h in &run.heads {
        write(&dir.join(format!("report_{}.tsv", h.head)), &report_tsv(&h.report, names))?;
        if let Some(t) = &h.tuned {
            write(&dir.join(format!("report_{}_tuned.tsv", h.head)), &report_tsv(t, names))?;
        }
        write(&dir.join(format!("tau_sweep_{}.tsv", h.head)), &sweep_tsv(&h.sweep, names))?;
    }
    write(&dir.join("correlation.tsv"), &matrix_tsv(&run.correlation, names))?;
    let json = serde_json::to_string_pretty(run).map_err(|e| Error::Contract(format!("report serialization: {e}")))?;
    write(&dir.join("report.json"), &(json + "\n"))
}

/// Reads back a table written by [`matrix_tsv`] or [`sweep_tsv`]: header names and numeric rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or_default()
        .split('\t')
        .skip(1)
        .map(str::to_owned)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut cells = l.split('\t');
            let key = cells.next().unwrap_or_default().to_owned();
            let vals = cells
                .map(|c| {
                    c.parse::<f64>().map_err(|_| Error::Manifest {
                        path: path.to_path_buf(),
                        detail: format!("non-numeric cell {c:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != header.len() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    detail: format!("row {key} has {} cells, header has {}", vals.len(), header.len()),
                });
            }
            Ok((key, vals))
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Blue for −1, white for 0, red for +1.
fn diverging(v: f64) -> Rgb<u8> {
    let v = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade(v), fade(v)])
    } else {
        Rgb([fade(-v), fade(-v), 255])
    }
}

/// Square heat map, `cell` pixels per entry.
pub fn render_heatmap(matrix: &[Vec<f64>], cell: u32) -> RgbImage {
    let n = matrix.len() as u32;
    RgbImage::from_fn(n * cell, n * cell, |x, y| {
        let (i, j) = ((y / cell) as usize, (x / cell) as usize);
        if x % cell == 0 || y % cell == 0 {
            Rgb([160, 160, 160])
        } else {
            diverging(matrix[i][j])
        }
    })
}

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// One polyline per class on `τ ∈ [0, 1] × F1 ∈ [0, 1]` axes.
pub fn render_tau_sweep(sweep: &TauSweep, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let at = |t: f64, f: f64| (margin + (t * w as f64).round() as i64, margin + h - (f * h as f64).round() as i64);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, at(0.0, 0.0), at(1.0, 0.0), axis);
    draw_line(&mut img, at(0.0, 0.0), at(0.0, 1.0), axis);
    let classes = sweep.f1.first().map_or(0, Vec::len);
    for j in 0..classes {
        let color = Rgb(PALETTE[j % PALETTE.len()]);
        for k in 1..sweep.grid.len() {
            let a = at(sweep.grid[k - 1], sweep.f1[k - 1][j]);
            let b = at(sweep.grid[k], sweep.f1[k][j]);
            draw_line(&mut img, a, b, color);
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
