//! Report files: JSON reports, flat CSV tables, line plots and image grids.

use std::path::Path;

use diffup_core::evalkit::{format_stitch_table, EvalReport, StitchRow, SweepPoint};
use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, IoContext, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).at(path)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).at(path)?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

/// Per-episode IoUs of one evaluation.
pub fn write_episode_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["episode", "class_id", "iou", "otsu_iou", "ensemble_variance", "sample_passes"]).map_err(&err)?;
    for e in &report.episodes {
        w.write_record([
            e.index.to_string(),
            e.class_id.to_string(),
            format!("{:.6}", e.iou),
            format!("{:.6}", e.otsu_iou),
            format!("{:.6e}", e.ensemble_variance),
            e.sample_passes.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().at(path)
}

pub fn write_eval(dir: &Path, stem: &str, report: &EvalReport) -> Result<Vec<std::path::PathBuf>> {
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}_episodes.csv"));
    write_json(&json, report)?;
    write_episode_csv(&csv, report)?;
    Ok(vec![json, csv])
}

pub fn write_stitch_csv(path: &Path, rows: &[StitchRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["upgrade", "before", "after", "before_miou", "after_miou", "delta"]).map_err(&err)?;
    for r in rows {
        w.write_record([
            r.upgrade.clone(),
            r.before.clone(),
            r.after.clone(),
            format!("{:.6}", r.before_miou),
            format!("{:.6}", r.after_miou),
            format!("{:+.6}", r.delta),
        ])
        .map_err(&err)?;
    }
    w.flush().at(path)
}

pub fn write_stitch_text(path: &Path, rows: &[StitchRow]) -> Result<()> {
    std::fs::write(path, format_stitch_table(rows)).at(path)
}

pub fn write_sweep_csv(path: &Path, axis: &str, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record([axis, "miou", "fb_iou", "sample_calls", "episodes"]).map_err(&err)?;
    for p in points {
        w.write_record([
            p.value.to_string(),
            format!("{:.6}", p.miou),
            format!("{:.6}", p.fb_iou),
            p.sample_calls.to_string(),
            p.episodes.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().at(path)
}

/// Per-step training losses.
pub struct LossLog {
    w: csv::Writer<std::fs::File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = csv_writer(path)?;
        w.write_record(["step", "total", "diff", "em", "iou", "grad_norm"]).map_err(csv_err(path))?;
        Ok(Self { w })
    }

    pub fn push(&mut self, r: &diffup_core::trainer::StepRecord) -> Result<()> {
        let l = &r.loss;
        self.w
            .write_record([
                r.step.to_string(),
                format!("{:.9e}", l.total),
                format!("{:.9e}", l.diff),
                format!("{:.9e}", l.em),
                format!("{:.9e}", l.iou),
                format!("{:.6e}", r.grad_norm),
            ])
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of one or more series over shared x values, y in `[0, 1]`.
/// Gridlines mark every 0.1 on y; x positions are evenly spaced by index.
pub fn line_plot(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let (w, h, m) = (480u32, 320u32, 30i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (pw, ph) = (w as i64 - 2 * m, h as i64 - 2 * m);
    for k in 0..=10 {
        let y = m + ph - ph * k / 10;
        let shade = if k % 5 == 0 { 170 } else { 225 };
        draw_line(&mut img, (m, y), (m + pw, y), Rgb([shade; 3]));
    }
    draw_line(&mut img, (m, m), (m, m + ph), Rgb([0; 3]));
    for (si, ys) in series.iter().enumerate() {
        let n = ys.len();
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = ys
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = if n > 1 { m + pw * i as i64 / (n as i64 - 1) } else { m + pw / 2 };
                (x, m + ph - (v.clamp(0.0, 1.0) * ph as f64).round() as i64)
            })
            .collect();
        for p in pts.windows(2) {
            draw_line(&mut img, p[0], p[1], color);
        }
        for &(x, y) in &pts {
            for dx in -3..=3 {
                for dy in -3..=3 {
                    let (px, py) = (x + dx, y + dy);
                    if px >= 0 && py >= 0 && (px as u32) < w && (py as u32) < h {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}

/// Tile of grayscale (`[h*w]`, values in `[lo, hi]`) or RGB (`[3*h*w]`,
/// values in `[0, 1]`) panels.
pub enum Panel<'a> {
    Gray { data: &'a [f32], lo: f32, hi: f32 },
    Rgb(&'a [f32]),
}

/// Writes `rows` of equally sized `size x size` panels, scaled up by
/// `zoom`, separated by a 2 px gutter.
pub fn image_grid(path: &Path, rows: &[Vec<Panel<'_>>], size: usize, zoom: usize) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let cell = size * zoom + 2;
    let mut img = RgbImage::from_pixel((cols * cell + 2) as u32, (rows.len() * cell + 2) as u32, Rgb([40, 40, 40]));
    let p = size * size;
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            for y in 0..size * zoom {
                for x in 0..size * zoom {
                    let k = (y / zoom) * size + x / zoom;
                    let px = match panel {
                        Panel::Gray { data, lo, hi } => {
                            let v = ((data[k] - lo) / (hi - lo)).clamp(0.0, 1.0);
                            let g = (v * 255.0).round() as u8;
                            [g, g, g]
                        }
                        Panel::Rgb(data) => {
                            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                            [q(data[k]), q(data[p + k]), q(data[2 * p + k])]
                        }
                    };
                    img.put_pixel((2 + c * cell + x) as u32, (2 + r * cell + y) as u32, Rgb(px));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}
