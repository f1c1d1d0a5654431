//! Static plot rendering: loss curves as PNG line charts and a text summary
//! table for sweep results.

use std::path::Path;

use atlasreg::{Error, Result};

const W: usize = 900;
const H: usize = 540;
const MARGIN: usize = 60;

struct Canvas {
    px: Vec<u8>, // RGB
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            px: vec![255u8; W * H * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && (x as usize) < W && y >= 0 && (y as usize) < H {
            let off = (y as usize * W + x as usize) * 3;
            self.px[off..off + 3].copy_from_slice(&rgb);
        }
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.set(
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
                rgb,
            );
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), W as u32, H as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        writer
            .write_image_data(&self.px)
            .map_err(|e| Error::Format(format!("png: {e}")))?;
        Ok(())
    }
}

/// Thins a long series to at most `n` evenly spaced points.
fn thin(series: &[f64], n: usize) -> Vec<(f64, f64)> {
    if series.is_empty() {
        return Vec::new();
    }
    let len = series.len();
    let take = len.min(n);
    (0..take)
        .map(|i| {
            let idx = i * (len - 1) / take.max(1).max(1).max(take - 1).max(1);
            (idx as f64, series[idx])
        })
        .collect()
}

/// Renders the four loss-term columns of a curves.csv as one line chart.
pub fn render_loss_curves(csv_path: &Path, out_png: &Path) -> Result<()> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut sim = Vec::new();
    let mut diffusion = Vec::new();
    let mut scaling = Vec::new();
    let mut total = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        sim.push(parse(cols[2]));
        diffusion.push(parse(cols[3]));
        scaling.push(parse(cols[4]));
        total.push(parse(cols[5]));
    }
    if total.is_empty() {
        return Err(Error::Format(format!(
            "{}: no loss rows",
            csv_path.display()
        )));
    }

    let series: [(&str, &Vec<f64>, [u8; 3]); 4] = [
        ("total", &total, [20, 20, 20]),
        ("sim", &sim, [200, 40, 40]),
        ("diffusion", &diffusion, [40, 120, 220]),
        ("scaling", &scaling, [30, 160, 60]),
    ];

    let hi = total
        .iter()
        .chain(sim.iter())
        .cloned()
        .filter(|v| v.is_finite())
        .fold(f64::MIN, f64::max)
        .max(1e-12);

    let mut canvas = Canvas::new();
    // Axes.
    let x0 = MARGIN as f64;
    let y0 = (H - MARGIN) as f64;
    let x1 = (W - MARGIN / 2) as f64;
    let y1 = (MARGIN / 2) as f64;
    canvas.line(x0, y0, x1, y0, [0, 0, 0]);
    canvas.line(x0, y0, x0, y1, [0, 0, 0]);
    // Horizontal gridlines at quarters.
    for q in 1..=4 {
        let y = y0 + (y1 - y0) * q as f64 / 4.0;
        canvas.line(x0, y, x1, y, [225, 225, 225]);
    }

    for (_, data, rgb) in &series {
        let pts = thin(data, 1600);
        let n = pts.last().map(|p| p.0).unwrap_or(1.0).max(1.0);
        let mut prev: Option<(f64, f64)> = None;
        for (ix, v) in pts {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let px = x0 + (x1 - x0) * ix / n;
            let py = y0 + (y1 - y0) * (v / hi).clamp(0.0, 1.0);
            if let Some((qx, qy)) = prev {
                canvas.line(qx, qy, px, py, *rgb);
            }
            prev = Some((px, py));
        }
    }
    // Legend swatches, top-left.
    for (i, (_, _, rgb)) in series.iter().enumerate() {
        let y = (MARGIN / 2 + 10 + i * 10) as f64;
        canvas.line(x0 + 8.0, y, x0 + 40.0, y, *rgb);
    }

    canvas.save(out_png)
}

/// Plain-text table of a sweep.csv, grouped by cell.
pub fn summarize_sweep(csv: &str) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>22} {:>22} {:>22}\n",
        "model", "l_diff", "l_scale", "train TRE", "val TRE", "test TRE"
    ));
    // rows keyed (model, ld, ls) -> [train, val, test]
    let mut rows: Vec<(String, String, String, [Option<(f64, f64)>; 3])> = Vec::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 6 {
            continue;
        }
        let key = (cols[0].to_string(), cols[1].to_string(), cols[2].to_string());
        let slot = match cols[3] {
            "train" => 0usize,
            "val" => 1,
            "test" => 2,
            _ => continue,
        };
        let mean = cols[4].parse::<f64>().ok();
        let std = cols[5].parse::<f64>().ok();
        let entry = rows.iter_mut().find(|r| (r.0.clone(), r.1.clone(), r.2.clone()) == key);
        let stats = mean.zip(std);
        match entry {
            Some(r) => r.3[slot] = stats,
            None => {
                let mut arr: [Option<(f64, f64)>; 3] = [None, None, None];
                arr[slot] = stats;
                rows.push((key.0, key.1, key.2, arr));
            }
        }
    }
    for (model, ld, ls, stats) in rows {
        let fmt = |s: Option<(f64, f64)>| match s {
            Some((mean, std)) => format!("{mean:.2} ({std:.2})"),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "{model:<12} {ld:>10} {ls:>10} {:>22} {:>22} {:>22}\n",
            fmt(stats[0]),
            fmt(stats[1]),
            fmt(stats[2])
        ));
    }
    out
}
