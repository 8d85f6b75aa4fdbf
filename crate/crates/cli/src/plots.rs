//! PNG renderings of the CSV artifacts. Plots are read back from disk so
//! they can be regenerated from a finished run.

use std::io::Cursor;
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{ImageFormat, Rgb, RgbImage};

use mixdiff::nn::write_atomic;

const CELL: u32 = 24;
const MARGIN: u32 = 8;
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok((header, rows))
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    write_atomic(path, buf.get_ref())?;
    Ok(())
}

fn lerp(a: Rgb<u8>, b: Rgb<u8>, t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb(std::array::from_fn(|i| (a.0[i] as f64 + (b.0[i] as f64 - a.0[i] as f64) * t).round() as u8))
}

/// Blue below the midpoint of `[lo, hi]`, red above, grey for missing.
fn diverging(v: Option<f64>, lo: f64, hi: f64) -> Rgb<u8> {
    let Some(v) = v else { return Rgb([200, 200, 200]) };
    let mid = 0.5 * (lo + hi);
    let white = Rgb([250, 250, 250]);
    if v < mid {
        lerp(white, Rgb([33, 102, 172]), (mid - v) / (mid - lo))
    } else {
        lerp(white, Rgb([178, 24, 43]), (v - mid) / (hi - mid))
    }
}

fn grid(values: &[Vec<Option<f64>>], color: impl Fn(Option<f64>) -> Rgb<u8>) -> RgbImage {
    let rows = values.len() as u32;
    let cols = values.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut img = RgbImage::from_pixel(cols * CELL + 2 * MARGIN, rows * CELL + 2 * MARGIN, BACKGROUND);
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let px = color(v);
            for dy in 1..CELL {
                for dx in 1..CELL {
                    img.put_pixel(MARGIN + c as u32 * CELL + dx, MARGIN + r as u32 * CELL + dy, px);
                }
            }
        }
    }
    img
}

fn numeric_block(rows: &[Vec<String>]) -> Vec<Vec<Option<f64>>> {
    rows.iter()
        .map(|r| r.iter().skip(1).map(|c| c.parse::<f64>().ok()).collect())
        .collect()
}

/// Correlation-style matrix: first column holds row labels.
pub fn matrix_plot(csv: &Path, png: &Path, lo: f64, hi: f64) -> Result<()> {
    let (_, rows) = read_csv(csv)?;
    save(&grid(&numeric_block(&rows), |v| diverging(v, lo, hi)), png)
}

/// Action heatmap in percent.
pub fn heatmap_plot(csv: &Path, png: &Path) -> Result<()> {
    let (_, rows) = read_csv(csv)?;
    let values = numeric_block(&rows);
    let max = values.iter().flatten().flatten().copied().fold(0.0, f64::max).max(1e-9);
    let white = Rgb([250, 250, 250]);
    save(
        &grid(&values, |v| v.map_or(Rgb([200, 200, 200]), |x| lerp(white, Rgb([8, 48, 107]), x / max))),
        png,
    )
}

/// Paired bars of real (dark) and synthetic (light) counts per cell.
pub fn coverage_plot(csv: &Path, png: &Path) -> Result<()> {
    let (header, rows) = read_csv(csv)?;
    let n = header.len();
    if n < 2 {
        bail!("{} has no count columns", csv.display());
    }
    let counts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let get = |i: usize| r.get(i).and_then(|c| c.parse::<f64>().ok()).unwrap_or(0.0);
            (get(n - 2), get(n - 1))
        })
        .collect();
    let max = counts.iter().map(|&(a, b)| a.max(b)).fold(0.0, f64::max).max(1.0);
    let (bar, height) = (6u32, 200u32);
    let width = counts.len() as u32 * (2 * bar + 4) + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(width.max(2 * MARGIN + 1), height + 2 * MARGIN, BACKGROUND);
    for (i, &(real, syn)) in counts.iter().enumerate() {
        let x0 = MARGIN + i as u32 * (2 * bar + 4);
        for (k, (v, px)) in [(real, Rgb([31, 78, 121])), (syn, Rgb([140, 190, 230]))].into_iter().enumerate() {
            let h = ((v / max) * height as f64).round() as u32;
            for dx in 0..bar {
                for dy in 0..h {
                    img.put_pixel(x0 + k as u32 * bar + dx, MARGIN + height - 1 - dy, px);
                }
            }
        }
    }
    save(&img, png)
}

/// Total loss per iteration on a log scale.
pub fn loss_plot(csv: &Path, png: &Path) -> Result<()> {
    let (header, rows) = read_csv(csv)?;
    let col = header
        .iter()
        .position(|h| h == "loss_total")
        .context("loss log has no loss_total column")?;
    let ys: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.get(col)?.parse::<f64>().ok())
        .filter(|v| *v > 0.0 && v.is_finite())
        .map(f64::ln)
        .collect();
    let (w, h) = (640u32, 360u32);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, h - MARGIN, AXIS);
    }
    for y in MARGIN..=h - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    if ys.len() >= 2 {
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let (pw, ph) = ((w - 2 * MARGIN - 2) as f64, (h - 2 * MARGIN - 2) as f64);
        for (i, y) in ys.iter().enumerate() {
            let px = MARGIN + 1 + (i as f64 / (ys.len() - 1) as f64 * pw).round() as u32;
            let py = h - MARGIN - 1 - ((y - lo) / span * ph).round() as u32;
            img.put_pixel(px, py, Rgb([178, 24, 43]));
        }
    }
    save(&img, png)
}
