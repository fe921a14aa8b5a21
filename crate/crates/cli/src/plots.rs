//! Score histograms and FAR/FRR curves rendered as PNG images.
//!
//! Each score file yields two images per stream:
//! `<stem>.<stream>.hist.png` and `<stem>.<stream>.far_frr.png`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use sasv_core::eval::{read_scores, ScoreRecord, Stream};
use sasv_core::protocol::TrialType;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const BINS: usize = 40;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const TYPE_COLOURS: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
];
const FAR_COLOUR: Rgb<u8> = Rgb([214, 39, 40]);
const FRR_COLOUR: Rgb<u8> = Rgb([31, 119, 180]);

/// Plot area with data coordinates mapped to pixels.
struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BACKGROUND);
        let (l, b) = (MARGIN, HEIGHT - MARGIN);
        for px in l..WIDTH - MARGIN / 2 {
            img.put_pixel(px, b, AXIS);
        }
        for py in MARGIN / 2..=b {
            img.put_pixel(l, py, AXIS);
        }
        Self { img, x, y }
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = (WIDTH - MARGIN - MARGIN / 2) as f64;
        let h = (HEIGHT - MARGIN - MARGIN / 2) as f64;
        let fx = if self.x.1 > self.x.0 { (x - self.x.0) / (self.x.1 - self.x.0) } else { 0.5 };
        let fy = if self.y.1 > self.y.0 { (y - self.y.0) / (self.y.1 - self.y.0) } else { 0.0 };
        (MARGIN as f64 + fx * w, (HEIGHT - MARGIN) as f64 - fy * h)
    }

    fn dot(&mut self, px: f64, py: f64, c: Rgb<u8>) {
        let (x, y) = (px.round(), py.round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (p, q) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        let steps = (q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.dot(p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1), c);
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], c: Rgb<u8>) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// Per-type score histograms of one stream as step outlines of the bin
/// densities. Empty trial types are skipped with a warning.
fn histogram(records: &[ScoreRecord<f64>], stream: Stream, label: &str, path: &Path) -> Result<()> {
    let (lo, hi) = range(records.iter().map(|r| stream.of(r))).unwrap_or((0.0, 1.0));
    let width = if hi > lo { (hi - lo) / BINS as f64 } else { 1.0 };
    let mut series = Vec::new();
    for t in TrialType::ALL {
        let scores: Vec<f64> = records.iter().filter(|r| r.trial.trial_type == t).map(|r| stream.of(r)).collect();
        if scores.is_empty() {
            log::warn!("{label}: no {t} trials in the {} stream; series omitted", stream.name());
            continue;
        }
        let mut counts = [0usize; BINS];
        for s in &scores {
            let b = (((s - lo) / width) as usize).min(BINS - 1);
            counts[b] += 1;
        }
        let density: Vec<f64> = counts.iter().map(|&c| c as f64 / scores.len() as f64).collect();
        series.push((t, density));
    }
    let top = series.iter().flat_map(|(_, d)| d.iter().copied()).fold(0.0, f64::max).max(1e-9);
    let mut canvas = Canvas::new((lo, lo + width * BINS as f64), (0.0, top));
    for (t, density) in &series {
        let mut pts = vec![(lo, 0.0)];
        for (i, &d) in density.iter().enumerate() {
            let x0 = lo + width * i as f64;
            pts.push((x0, d));
            pts.push((x0 + width, d));
        }
        pts.push((lo + width * BINS as f64, 0.0));
        canvas.polyline(&pts, TYPE_COLOURS[t.index()]);
    }
    canvas.save(path)
}

/// FAR and FRR against the acceptance threshold, with type 1 as targets and
/// types 2 and 3 as non-targets.
fn far_frr(records: &[ScoreRecord<f64>], stream: Stream, label: &str, path: &Path) -> Result<()> {
    let pick = |types: &[TrialType]| -> Vec<f64> {
        let mut v: Vec<f64> = records
            .iter()
            .filter(|r| types.contains(&r.trial.trial_type))
            .map(|r| stream.of(r))
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let pos = pick(&[TrialType::T1]);
    let neg = pick(&[TrialType::T2, TrialType::T3]);
    let mut thresholds: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (lo, hi) = range(thresholds.iter().copied()).unwrap_or((0.0, 1.0));
    let mut canvas = Canvas::new((lo, hi), (0.0, 1.0));
    // Fraction of `v` (sorted) at or above `t`.
    let above = |v: &[f64], t: f64| (v.len() - v.partition_point(|&s| s < t)) as f64 / v.len() as f64;
    if neg.is_empty() {
        log::warn!("{label}: no non-target trials in the {} stream; FAR omitted", stream.name());
    } else {
        let pts: Vec<(f64, f64)> = thresholds.iter().map(|&t| (t, above(&neg, t))).collect();
        canvas.polyline(&pts, FAR_COLOUR);
    }
    if pos.is_empty() {
        log::warn!("{label}: no target trials in the {} stream; FRR omitted", stream.name());
    } else {
        let pts: Vec<(f64, f64)> = thresholds.iter().map(|&t| (t, 1.0 - above(&pos, t))).collect();
        canvas.polyline(&pts, FRR_COLOUR);
    }
    canvas.save(path)
}

/// Writes two images per stream for every score file and returns their
/// paths in writing order.
pub fn emit_plots(score_files: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stems: Vec<String> = Vec::new();
    for f in score_files {
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scores".into());
        if stems.contains(&stem) {
            bail!("score files {} share the stem `{stem}`", f.display());
        }
        stems.push(stem);
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::new();
    for (f, stem) in score_files.iter().zip(&stems) {
        let records: Vec<ScoreRecord<f64>> = read_scores(f)?;
        if records.is_empty() {
            log::warn!("{}: no score lines", f.display());
        }
        let label = f.display().to_string();
        for stream in Stream::ALL {
            let hist = out_dir.join(format!("{stem}.{}.hist.png", stream.name()));
            histogram(&records, stream, &label, &hist)?;
            let curve = out_dir.join(format!("{stem}.{}.far_frr.png", stream.name()));
            far_frr(&records, stream, &label, &curve)?;
            written.push(hist);
            written.push(curve);
        }
    }
    Ok(written)
}
