//! Raster figures for a finished run directory: magnitude panels with an
//! NRMSE banner, amplified error maps, loss traces and cohort box plots.
//!
//! Every number drawn on a figure is also stored verbatim in a PNG `tEXt`
//! chunk so it can be checked against the CSV it came from.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use font8x8::{UnicodeFonts, BASIC_FONTS};

use crate::array::ComplexArray;
use crate::container::load_array;
use crate::error::{Error, Result};
use crate::experiment::{read_cohort_csv, read_metrics_csv, Arm};

/// Amplification applied to error maps.
pub const ERROR_GAIN: f32 = 5.0;
/// Nearest-neighbour upscale factor for image panels.
pub const UPSCALE: usize = 4;
const GLYPH: usize = 2;
const BANNER: usize = 8 * GLYPH + 8;

/// 8-bit grayscale canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Canvas { width, height, pixels: vec![fill; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, v: u8) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, v);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), v: u8) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, v);
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

    /// Draw `text` with its top-left corner at `(x, y)`; unknown glyphs are skipped.
    pub fn text(&mut self, x: i64, y: i64, text: &str, v: u8) {
        for (k, ch) in text.chars().enumerate() {
            let Some(glyph) = BASIC_FONTS.get(ch) else { continue };
            let ox = x + (k * 8 * GLYPH) as i64;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        let (px, py) = (ox + (col * GLYPH) as i64, y + (row * GLYPH) as i64);
                        self.fill_rect(px, py, px + GLYPH as i64 - 1, py + GLYPH as i64 - 1, v);
                    }
                }
            }
        }
    }

    pub fn text_width(text: &str) -> usize {
        text.chars().count() * 8 * GLYPH
    }

    /// Write as an 8-bit grayscale PNG with the given `tEXt` entries.
    pub fn save_png(&self, path: &Path, text: &[(&str, String)]) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.clone()).map_err(png_err)?;
        }
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.pixels).map_err(png_err)?;
        w.finish().map_err(png_err)?;
        Ok(())
    }
}

fn png_err(e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("png encoding: {other}")),
    }
}

/// Read the `tEXt` chunks of a PNG file.
pub fn read_png_text(path: &Path) -> Result<Vec<(String, String)>> {
    let dec = png::Decoder::new(fs::File::open(path)?);
    let reader = dec.read_info().map_err(|e| Error::Format { offset: 0, reason: e.to_string() })?;
    Ok(reader.info().uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect())
}

/// Decode a grayscale PNG into a canvas.
pub fn read_png(path: &Path) -> Result<Canvas> {
    let dec = png::Decoder::new(fs::File::open(path)?);
    let mut reader = dec.read_info().map_err(|e| Error::Format { offset: 0, reason: e.to_string() })?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format { offset: 0, reason: e.to_string() })?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format { offset: 0, reason: "expected 8-bit grayscale".into() });
    }
    buf.truncate(info.buffer_size());
    Ok(Canvas { width: info.width as usize, height: info.height as usize, pixels: buf })
}

/// Magnitude of a 2D image, or of the centre x-y plane of a volume.
fn display_plane(a: &ComplexArray<f32>) -> (usize, usize, Vec<f32>) {
    let plane = if a.ndim() == 3 { a.plane(a.shape()[2] / 2) } else { a.clone() };
    (plane.shape()[0], plane.shape()[1], plane.abs())
}

/// Grayscale panel of `values` scaled by `1 / peak`, upscaled, with a banner.
fn image_panel(rows: usize, cols: usize, values: &[f32], peak: f32, banner: &str) -> Canvas {
    let (w, h) = (cols * UPSCALE, rows * UPSCALE);
    let mut c = Canvas::new(w.max(Canvas::text_width(banner) + 8), h + BANNER, 0);
    c.text(4, 4, banner, 255);
    let inv = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    for r in 0..rows {
        for q in 0..cols {
            let v = (values[r * cols + q] * inv).clamp(0.0, 1.0);
            let g = (v * 255.0).round() as u8;
            let (x0, y0) = ((q * UPSCALE) as i64, (BANNER + r * UPSCALE) as i64);
            c.fill_rect(x0, y0, x0 + UPSCALE as i64 - 1, y0 + UPSCALE as i64 - 1, g);
        }
    }
    c
}

pub fn format_nrmse(v: f64) -> String {
    format!("{v:.4}")
}

struct TraceSeries {
    j: Vec<f64>,
    l_data: Vec<f64>,
    l_total: Vec<f64>,
}

fn read_trace(path: &Path) -> Result<TraceSeries> {
    let text = fs::read_to_string(path)?;
    let mut s = TraceSeries { j: vec![], l_data: vec![], l_total: vec![] };
    for l in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<f64> = l.split(',').map(|v| v.parse::<f64>()).collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("malformed trace row '{l}' in {}", path.display())))?;
        if f.len() != 5 {
            return Err(Error::Config(format!("malformed trace row '{l}' in {}", path.display())));
        }
        s.j.push(f[0]);
        s.l_data.push(f[1]);
        s.l_total.push(f[4]);
    }
    Ok(s)
}

/// Log-scale line plot of `L_data` (bright) and `L_total` (grey) against `j`.
fn trace_plot(title: &str, s: &TraceSeries) -> Canvas {
    let (w, h, margin) = (480usize, 320usize, 40i64);
    let mut c = Canvas::new(w, h, 0);
    c.text(margin, 4, title, 255);
    let (x0, y0, x1, y1) = (margin, h as i64 - margin, w as i64 - 10, BANNER as i64 + 8);
    c.line((x0, y0), (x1, y0), 160);
    c.line((x0, y0), (x0, y1), 160);
    let logs = |v: &[f64]| v.iter().map(|&x| if x > 0.0 { x.log10() } else { f64::NAN }).collect::<Vec<_>>();
    let (ld, lt) = (logs(&s.l_data), logs(&s.l_total));
    let finite = ld.iter().chain(&lt).copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let jmax = s.j.iter().copied().fold(1.0, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |j: f64| x0 + ((j / jmax) * (x1 - x0) as f64).round() as i64;
    let py = |v: f64| y0 - (((v - lo) / span) * (y0 - y1) as f64).round() as i64;
    for (series, shade) in [(&lt, 128u8), (&ld, 255u8)] {
        let mut prev: Option<(i64, i64)> = None;
        for (&j, &v) in s.j.iter().zip(series.iter()) {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = (px(j), py(v));
            if let Some(q) = prev {
                c.line(q, p, shade);
            }
            prev = Some(p);
        }
    }
    c.text(x1 - Canvas::text_width("L_data") as i64, y0 + 8, "L_data", 255);
    c.text(x0, y0 + 8, "L_total", 128);
    c
}

/// Box plot of per-arm distributions: whiskers at min/max, box at the
/// quartiles, a bar at the median.
fn box_plot(arms: &[Arm], dists: &[Vec<f64>]) -> Canvas {
    let slot = 120i64;
    let (h, margin) = (360i64, 40i64);
    let w = (margin + slot * arms.len() as i64 + 10).max(240);
    let mut c = Canvas::new(w as usize, h as usize, 0);
    c.text(margin, 4, "NRMSE", 255);
    let (y0, y1) = (h - margin, BANNER as i64 + 8);
    c.line((margin, y0), (w - 10, y0), 160);
    c.line((margin, y0), (margin, y1), 160);
    let all = dists.iter().flatten().copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let py = |v: f64| y0 - 4 - (((v - lo) / span) * (y0 - y1 - 8) as f64).round() as i64;
    for (k, (arm, d)) in arms.iter().zip(dists).enumerate() {
        let cx = margin + slot * k as i64 + slot / 2;
        let q = quartiles(d);
        c.line((cx, py(q[0])), (cx, py(q[4])), 200);
        c.line((cx - 10, py(q[0])), (cx + 10, py(q[0])), 200);
        c.line((cx - 10, py(q[4])), (cx + 10, py(q[4])), 200);
        c.fill_rect(cx - 25, py(q[3]), cx + 25, py(q[1]), 90);
        c.fill_rect(cx - 25, py(q[2]), cx + 25, py(q[2]) + 1, 255);
        let label = short_name(*arm);
        c.text(cx - Canvas::text_width(label) as i64 / 2, y0 + 8, label, 255);
    }
    c
}

fn short_name(arm: Arm) -> &'static str {
    match arm {
        Arm::ZeroFilled => "zf",
        Arm::CsWavelet => "cs",
        Arm::InrNone => "none",
        Arm::InrWavelet => "wavelet",
        Arm::Infusion => "infusion",
    }
}

/// Min, lower quartile, median, upper quartile, max (linear interpolation).
fn quartiles(d: &[f64]) -> [f64; 5] {
    let mut v = d.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let at = |p: f64| {
        let t = p * (v.len() - 1) as f64;
        let (i, f) = (t.floor() as usize, t - t.floor());
        if i + 1 < v.len() { v[i] * (1.0 - f) + v[i + 1] * f } else { v[i] }
    };
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

/// Render every figure for `run_dir` into `run_dir/figures/` and return the
/// written paths.
///
/// Needs `metrics.csv`, `ground_truth.cpxa`, and `<arm>.cpxa` plus
/// `error_<arm>.cpxa` for each listed arm; INR arms also need
/// `trace_<arm>.csv`. A `cohort.csv`, when present, yields `boxplot.png`.
pub fn emit_figures(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics_path = run_dir.join("metrics.csv");
    let gt_path = run_dir.join("ground_truth.cpxa");
    let cohort_path = run_dir.join("cohort.csv");
    let mut missing: Vec<PathBuf> = Vec::new();
    let rows = if metrics_path.is_file() {
        read_metrics_csv(&metrics_path)?
    } else if cohort_path.is_file() {
        Vec::new()
    } else {
        missing.push(metrics_path.clone());
        Vec::new()
    };
    if !rows.is_empty() && !gt_path.is_file() {
        missing.push(gt_path.clone());
    }
    for r in &rows {
        let mut need = vec![run_dir.join(format!("{}.cpxa", r.arm)), run_dir.join(format!("error_{}.cpxa", r.arm))];
        if matches!(r.arm, Arm::InrNone | Arm::InrWavelet | Arm::Infusion) {
            need.push(run_dir.join(format!("trace_{}.csv", r.arm)));
        }
        missing.extend(need.into_iter().filter(|p| !p.is_file()));
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Config(format!("missing run outputs: {}", list.join(", "))));
    }

    let fig_dir = run_dir.join("figures");
    fs::create_dir_all(&fig_dir)?;
    let mut written = Vec::new();

    if !rows.is_empty() {
        let gt = load_array(&gt_path)?;
        let (nr, nc, gmag) = display_plane(&gt);
        let peak = gmag.iter().copied().fold(0.0f32, f32::max);
        let path = fig_dir.join("panel_ground_truth.png");
        image_panel(nr, nc, &gmag, peak, "reference").save_png(&path, &[("arm", "ground-truth".into())])?;
        written.push(path);
        let path = fig_dir.join("error_ground_truth.png");
        let zero = vec![0.0f32; gmag.len()];
        image_panel(nr, nc, &zero, peak / ERROR_GAIN, "error x5").save_png(&path, &[("arm", "ground-truth".into())])?;
        written.push(path);

        for r in &rows {
            let arm = r.arm.name();
            let nrmse = format_nrmse(r.nrmse);
            let meta = [("arm", arm.to_string()), ("nrmse", nrmse.clone())];
            let image = load_array(run_dir.join(format!("{arm}.cpxa")))?;
            let (ar, ac, mag) = display_plane(&image);
            let path = fig_dir.join(format!("panel_{arm}.png"));
            image_panel(ar, ac, &mag, peak, &format!("{arm} NRMSE {nrmse}")).save_png(&path, &meta)?;
            written.push(path);

            let err = load_array(run_dir.join(format!("error_{arm}.cpxa")))?;
            let (er, ec, emag) = display_plane(&err);
            let path = fig_dir.join(format!("error_{arm}.png"));
            image_panel(er, ec, &emag, peak / ERROR_GAIN, &format!("error x5 {arm}")).save_png(&path, &meta)?;
            written.push(path);

            let trace_path = run_dir.join(format!("trace_{arm}.csv"));
            if trace_path.is_file() {
                let series = read_trace(&trace_path)?;
                let path = fig_dir.join(format!("trace_{arm}.png"));
                trace_plot(&format!("loss {arm}"), &series).save_png(&path, &[("arm", arm.to_string())])?;
                written.push(path);
            }
        }
    }

    if cohort_path.is_file() {
        let cohort = read_cohort_csv(&cohort_path)?;
        let dists: Vec<Vec<f64>> = cohort.arms.iter().map(|&a| cohort.distribution(a).unwrap_or_default()).collect();
        if dists.iter().all(|d| !d.is_empty()) {
            let meta: Vec<(String, String)> = cohort
                .arms
                .iter()
                .zip(&dists)
                .map(|(a, d)| (format!("median {a}"), format_nrmse(quartiles(d)[2])))
                .collect();
            let meta_ref: Vec<(&str, String)> = meta.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            let path = fig_dir.join("boxplot.png");
            box_plot(&cohort.arms, &dists).save_png(&path, &meta_ref)?;
            written.push(path);
        }
    }
    Ok(written)
}
