use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{ComparisonReport, LevelRow};
use crate::error::{Error, Result};

pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub plot: PathBuf,
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_rows(report: &ComparisonReport) -> String {
    let mut out = String::from(
        "id,baseline_rate,cascade_rate,truths,degradation_level,baseline_matched,cascade_matched,\
         baseline_detections,cascade_detections,candidates,promoted\n",
    );
    for r in &report.scenes {
        let level = r.degradation_level.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.baseline_rate,
            r.cascade_rate,
            r.truths,
            level,
            r.baseline_matched,
            r.cascade_matched,
            r.baseline_detections,
            r.cascade_detections,
            r.candidates,
            r.promoted
        )
        .expect("writing to a String");
    }
    out
}

const BASELINE: Rgb<u8> = Rgb([110, 110, 110]);
const CASCADE: Rgb<u8> = Rgb([40, 100, 200]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);
const REFERENCE: Rgb<u8> = Rgb([220, 120, 30]);

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(img.height())..y1.min(img.height()) {
        for x in x0.min(img.width())..x1.min(img.width()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// Grouped bar chart of detection rate per degradation level: grey for the
/// detector alone, blue for the cascade. Horizontal grid lines sit at
/// quarter steps; the orange dashes mark the published reference rates.
pub fn write_rate_plot(levels: &[LevelRow], reference: (f64, f64), path: &Path) -> Result<()> {
    let (w, h) = (480u32, 320u32);
    let (left, right, top, bottom) = (40u32, 20u32, 20u32, 30u32);
    let plot_h = h - top - bottom;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let y_of = |v: f64| top + plot_h - (v.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
    for q in 1..=4 {
        let y = y_of(q as f64 / 4.0);
        fill(&mut img, left, y, w - right, y + 1, GRID);
    }
    for r in [reference.0, reference.1] {
        let y = y_of(r);
        let mut x = left;
        while x < w - right {
            fill(&mut img, x, y, (x + 6).min(w - right), y + 2, REFERENCE);
            x += 10;
        }
    }
    let groups = levels.len().max(1) as u32;
    let slot = (w - left - right) / groups;
    let bar = (slot / 3).max(2);
    for (i, l) in levels.iter().enumerate() {
        let x = left + i as u32 * slot + slot / 6;
        fill(&mut img, x, y_of(l.baseline), x + bar, top + plot_h, BASELINE);
        fill(&mut img, x + bar, y_of(l.cascade), x + 2 * bar, top + plot_h, CASCADE);
    }
    fill(&mut img, left, top, left + 1, top + plot_h + 1, AXIS);
    fill(&mut img, left, top + plot_h, w - right, top + plot_h + 1, AXIS);
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes `report.json`, `report.csv` and `detection_rate_by_level.png`.
pub fn emit_report(report: &ComparisonReport, out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        json: out_dir.join("report.json"),
        csv: out_dir.join("report.csv"),
        plot: out_dir.join("detection_rate_by_level.png"),
    };
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write(&files.json, json.as_bytes())?;
    write(&files.csv, csv_rows(report).as_bytes())?;
    let r = &report.published_reference;
    write_rate_plot(&report.by_degradation, (r.ssd_only, r.dcgan_ssd), &files.plot)?;
    Ok(files)
}
