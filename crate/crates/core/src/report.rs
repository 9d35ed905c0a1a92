//! Writes evaluation outputs: `metrics.json`, `metrics.csv` and `confusion_matrix.png`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{ConfusionMatrix, MetricsReport};

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFUSION_PNG: &str = "confusion_matrix.png";
pub const CSV_HEADER: &str = "model,accuracy,precision,recall,f1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(String),
    #[error("nothing to report")]
    Empty,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct EmittedFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub heatmap: PathBuf,
}

pub fn emit_report(report: &MetricsReport<f64>, outdir: &Path) -> Result<EmittedFiles, ReportError> {
    emit_reports(std::slice::from_ref(report), outdir)
}

/// One JSON array entry and one CSV row per report. The heatmap shows the last report.
pub fn emit_reports(reports: &[MetricsReport<f64>], outdir: &Path) -> Result<EmittedFiles, ReportError> {
    let last = reports.last().ok_or(ReportError::Empty)?;
    fs::create_dir_all(outdir).map_err(io_err(outdir))?;

    let json = outdir.join(METRICS_JSON);
    fs::write(&json, serde_json::to_string_pretty(reports)?).map_err(io_err(&json))?;

    let csv = outdir.join(METRICS_CSV);
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4}\n",
            r.model_id, r.accuracy, r.precision, r.recall, r.f1
        ));
    }
    fs::write(&csv, text).map_err(io_err(&csv))?;

    let heatmap = outdir.join(CONFUSION_PNG);
    write_heatmap(&last.confusion, &last.model_id, &heatmap)?;
    Ok(EmittedFiles { json, csv, heatmap })
}

pub fn load_reports(path: &Path) -> Result<Vec<MetricsReport<f64>>, ReportError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

const CELL: u32 = 180;
const MARGIN: u32 = 20;
const SCALE: u32 = 5;

// 5x7 glyphs, one byte per row, bit 4 = leftmost column.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        _ => [0; 7],
    }
}

struct Canvas {
    width: u32,
    height: u32,
    rgb: Vec<u8>,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Self {
        Canvas {
            width,
            height,
            rgb: vec![255; (width * height * 3) as usize],
        }
    }

    fn fill(&mut self, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                let i = ((y * self.width + x) * 3) as usize;
                self.rgb[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    fn text_centered(&mut self, text: &str, cx: u32, cy: u32, scale: u32, color: [u8; 3]) {
        let advance = 6 * scale;
        let width = advance * text.chars().count() as u32 - scale;
        let x0 = cx.saturating_sub(width / 2);
        let y0 = cy.saturating_sub(7 * scale / 2);
        for (i, c) in text.chars().enumerate() {
            let gx = x0 + i as u32 * advance;
            for (row, bits) in glyph(c).iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.fill(gx + col * scale, y0 + row as u32 * scale, scale, scale, color);
                    }
                }
            }
        }
    }
}

/// 2x2 heatmap. Rows: actual infected / notinfected. Columns: predicted infected / notinfected.
/// The counts are also stored as PNG `tEXt` chunks `tp`, `fp`, `fn`, `tn` and `model`.
pub fn write_heatmap(cm: &ConfusionMatrix, model_id: &str, path: &Path) -> Result<(), ReportError> {
    let side = 2 * CELL + 3 * MARGIN;
    let mut canvas = Canvas::new(side, side);
    let max = cm.tp.max(cm.fp).max(cm.fn_).max(cm.tn).max(1) as f64;
    let cells = [(0, 0, "TP", cm.tp), (0, 1, "FN", cm.fn_), (1, 0, "FP", cm.fp), (1, 1, "TN", cm.tn)];
    for (row, col, tag, count) in cells {
        let t = count as f64 / max;
        let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
        let color = [lerp(239.0, 8.0), lerp(243.0, 48.0), lerp(255.0, 107.0)];
        let ink = if t > 0.5 { [255, 255, 255] } else { [0, 0, 0] };
        let x = MARGIN + col * (CELL + MARGIN);
        let y = MARGIN + row * (CELL + MARGIN);
        canvas.fill(x, y, CELL, CELL, color);
        canvas.text_centered(tag, x + CELL / 2, y + CELL / 4, 3, ink);
        let digits = count.to_string();
        let scale = if digits.len() > 4 { SCALE - 2 } else { SCALE };
        canvas.text_centered(&digits, x + CELL / 2, y + CELL * 3 / 5, scale, ink);
    }

    let file = File::create(path).map_err(io_err(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), side, side);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| ReportError::Png(e.to_string());
    for (key, value) in [
        ("tp", cm.tp.to_string()),
        ("fp", cm.fp.to_string()),
        ("fn", cm.fn_.to_string()),
        ("tn", cm.tn.to_string()),
        ("model", model_id.to_string()),
    ] {
        encoder.add_text_chunk(key.to_string(), value).map_err(png_err)?;
    }
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&canvas.rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads back the `tEXt` annotations of a heatmap written by [`write_heatmap`].
pub fn read_heatmap_annotations(path: &Path) -> Result<Vec<(String, String)>, ReportError> {
    let file = File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let reader = decoder.read_info().map_err(|e| ReportError::Png(e.to_string()))?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::compute_metrics;

    fn sample() -> Vec<MetricsReport<f64>> {
        let a = ConfusionMatrix { tp: 40, fp: 3, fn_: 7, tn: 50 };
        let b = ConfusionMatrix { tp: 1140, fp: 33, fn_: 1, tn: 748 };
        vec![compute_metrics(&a, "residual_cnn"), compute_metrics(&b, "denconrest")]
    }

    #[test]
    fn json_round_trip_and_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let reports = sample();
        let files = emit_reports(&reports, dir.path()).unwrap();
        assert_eq!(load_reports(&files.json).unwrap(), reports);
        let csv = fs::read_to_string(&files.csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "model,accuracy,precision,recall,f1");
        assert_eq!(lines[2], "denconrest,0.9823,0.9719,0.9991,0.9853");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn heatmap_annotations_match_counts() {
        let dir = tempfile::tempdir().unwrap();
        let reports = sample();
        let files = emit_reports(&reports, dir.path()).unwrap();
        let ann = read_heatmap_annotations(&files.heatmap).unwrap();
        let get = |k: &str| ann.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).unwrap();
        assert_eq!(get("tp"), "1140");
        assert_eq!(get("fp"), "33");
        assert_eq!(get("fn"), "1");
        assert_eq!(get("tn"), "748");
        assert_eq!(get("model"), "denconrest");
        let img = image::open(&files.heatmap).unwrap();
        assert_eq!(img.width(), 2 * CELL + 3 * MARGIN);
    }

    #[test]
    fn empty_report_list_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_reports(&[], dir.path()), Err(ReportError::Empty)));
    }
}
