//! Plain-text report and SVG figures for a finished run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::commands::{read_sample_with_names, BAND_FILE, DIAGNOSTICS_FILE, POSTERIOR_FILE};
use crate::{write_file, CliError};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const BINS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub marginals: Vec<Marginal>,
    /// Fraction of observations inside the 95% predictive band.
    pub coverage: Option<f64>,
    pub files: Vec<PathBuf>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn marginal(name: &str, values: &[f64]) -> Marginal {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Marginal {
        name: name.to_string(),
        mean,
        sd: var.sqrt(),
        lower: quantile(&sorted, 0.025),
        upper: quantile(&sorted, 0.975),
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, b + 0.5) };
        Self {
            x: widen(x),
            y: widen(y),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn points(&self, xs: &[f64], ys: &[f64]) -> String {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| format!("{:.2},{:.2}", self.px(*x), self.py(*y)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn svg(title: &str, xlabel: &str, frame: &Frame, body: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#,
        WIDTH / 2.0
    )
    .unwrap();
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        s,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for (v, anchor, x) in [(frame.x.0, "start", x0), (frame.x.1, "end", x1)] {
        writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="{anchor}">{v:.4}</text>"#,
            y1 + 16.0
        )
        .unwrap();
    }
    for (v, y) in [(frame.y.0, y1), (frame.y.1, y0)] {
        writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0).unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0
    )
    .unwrap();
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

pub fn histogram_svg(name: &str, values: &[f64]) -> String {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / BINS as f64 } else { 1.0 };
    let mut counts = [0usize; BINS];
    for v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        counts[b] += 1;
    }
    let top = *counts.iter().max().unwrap_or(&1) as f64;
    let frame = Frame::new((lo, lo + width * BINS as f64), (0.0, top));
    let mut body = String::new();
    for (b, &c) in counts.iter().enumerate() {
        let x0 = frame.px(lo + b as f64 * width);
        let x1 = frame.px(lo + (b + 1) as f64 * width);
        let y = frame.py(c as f64);
        writeln!(
            body,
            r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5" stroke="white"/>"##,
            x1 - x0,
            frame.py(0.0) - y
        )
        .unwrap();
    }
    svg(&format!("Posterior of {name}"), name, &frame, &body)
}

pub struct Band {
    pub time: Vec<f64>,
    pub lower: Vec<f64>,
    pub median: Vec<f64>,
    pub upper: Vec<f64>,
    pub observed: Vec<f64>,
}

impl Band {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let (names, rows) = read_sample_with_names(path)?;
        if names != ["time_s", "lower", "median", "upper", "observed"] {
            return Err(CliError::Config(format!("{}: unexpected band header", path.display())));
        }
        let col = |j: usize| rows.iter().map(|r| r[j]).collect();
        Ok(Self {
            time: col(0),
            lower: col(1),
            median: col(2),
            upper: col(3),
            observed: col(4),
        })
    }

    pub fn coverage(&self) -> f64 {
        let inside = self
            .observed
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .filter(|(o, (l, u))| *l <= *o && *o <= *u)
            .count();
        inside as f64 / self.observed.len() as f64
    }

    pub fn svg(&self, units: &str) -> String {
        let hours: Vec<f64> = self.time.iter().map(|t| t / 3600.0).collect();
        let top = self.upper.iter().chain(&self.observed).copied().fold(0.0, f64::max);
        let frame = Frame::new((hours[0], *hours.last().unwrap()), (0.0, top));
        let mut body = String::new();
        let mut outline = frame.points(&hours, &self.upper);
        let back: Vec<f64> = hours.iter().rev().copied().collect();
        let lower_back: Vec<f64> = self.lower.iter().rev().copied().collect();
        outline.push(' ');
        outline.push_str(&frame.points(&back, &lower_back));
        writeln!(body, r##"<polygon points="{outline}" fill="#9cc3e6" stroke="none"/>"##).unwrap();
        writeln!(
            body,
            r##"<polyline points="{}" fill="none" stroke="#1f4e89" stroke-width="1.5"/>"##,
            frame.points(&hours, &self.median)
        )
        .unwrap();
        for (x, y) in hours.iter().zip(&self.observed) {
            writeln!(
                body,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="black"/>"#,
                frame.px(*x),
                frame.py(*y)
            )
            .unwrap();
        }
        svg(&format!("95% predictive band ({units})"), "time [h]", &frame, &body)
    }
}

pub fn trend_svg(iterations: &[f64], distances: &[f64], threshold: f64) -> String {
    let lo = distances.iter().copied().fold(threshold.min(0.0), f64::min);
    let hi = distances.iter().copied().fold(threshold, f64::max);
    let frame = Frame::new((iterations[0], *iterations.last().unwrap()), (lo, hi));
    let mut body = String::new();
    writeln!(
        body,
        r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#c0392b" stroke-dasharray="4 3"/>"##,
        frame.px(frame.x.0),
        frame.px(frame.x.1),
        y = frame.py(threshold)
    )
    .unwrap();
    writeln!(
        body,
        r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#,
        frame.points(iterations, distances)
    )
    .unwrap();
    for (x, y) in iterations.iter().zip(distances) {
        writeln!(
            body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="black"/>"#,
            frame.px(*x),
            frame.py(*y)
        )
        .unwrap();
    }
    svg("Cross-match distance to previous iteration", "iteration", &frame, &body)
}

fn first_existing(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.exists())
}

/// Summarize the posterior, predictive band and refinement trend of `dir`.
pub fn cmd_report(dir: &Path) -> Result<Report, CliError> {
    let (posterior, band_name) = if dir.join(POSTERIOR_FILE).exists() {
        (dir.join(POSTERIOR_FILE), BAND_FILE)
    } else if let Some(p) = first_existing(dir, &["posterior_emulator.csv"]) {
        (p, "band_emulator.csv")
    } else if let Some(p) = first_existing(dir, &["posterior_direct.csv"]) {
        (p, "band_direct.csv")
    } else {
        return Err(CliError::Config(format!(
            "no posterior in {}; run `infer` or `refine` first",
            dir.display()
        )));
    };
    let (names, rows) = read_sample_with_names(&posterior)?;
    let mut files = Vec::new();
    let mut md = String::from("# Calibration report\n\n");
    writeln!(md, "Posterior: `{}` ({} samples)\n", posterior.display(), rows.len()).unwrap();
    md.push_str("| parameter | mean | sd | 2.5% | 97.5% |\n|---|---|---|---|---|\n");
    let mut marginals = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let values: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let m = marginal(name, &values);
        writeln!(
            md,
            "| {} | {:.5} | {:.5} | {:.5} | {:.5} |",
            m.name, m.mean, m.sd, m.lower, m.upper
        )
        .unwrap();
        let path = dir.join(format!("hist_{name}.svg"));
        write_file(&path, histogram_svg(name, &values))?;
        files.push(path);
        marginals.push(m);
    }

    let units = std::fs::read_to_string(dir.join(crate::commands::UNITS_FILE)).unwrap_or_else(|_| "m3/s".into());
    let units = units.trim();
    let mut coverage = None;
    if let Some(band_path) = first_existing(dir, &[band_name]) {
        let band = Band::read(&band_path)?;
        let c = band.coverage();
        writeln!(md, "\nObservations inside the 95% predictive band: {:.1}%", 100.0 * c).unwrap();
        let path = dir.join("band.svg");
        write_file(&path, band.svg(units))?;
        files.push(path);
        coverage = Some(c);
    }

    if let Some(diag) = first_existing(dir, &[DIAGNOSTICS_FILE]) {
        let (dnames, drows) = read_sample_with_names(&diag).unwrap_or_default();
        let it = dnames.iter().position(|n| n == "iteration");
        let dc = dnames.iter().position(|n| n == "d_cm_previous");
        if let (Some(it), Some(dc)) = (it, dc) {
            let pairs: Vec<(f64, f64)> = drows
                .iter()
                .filter(|r| r[dc].is_finite())
                .map(|r| (r[it], r[dc]))
                .collect();
            if !pairs.is_empty() {
                md.push_str("\n| iteration | d_cm to previous |\n|---|---|\n");
                for (i, d) in &pairs {
                    writeln!(md, "| {i} | {d:.3} |").unwrap();
                }
                let threshold = std::fs::read_to_string(dir.join(crate::commands::SUMMARY_FILE))
                    .ok()
                    .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                    .and_then(|v| v["threshold"].as_f64())
                    .unwrap_or(mechemu_core::refinement::DEFAULT_THRESHOLD);
                let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let path = dir.join("dcm_trend.svg");
                write_file(&path, trend_svg(&xs, &ys, threshold))?;
                files.push(path);
            }
        }
    }

    let path = dir.join("report.md");
    write_file(&path, &md)?;
    files.push(path);
    print!("{md}");
    Ok(Report {
        marginals,
        coverage,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginal_of_uniform_grid() {
        let v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        let m = marginal("x", &v);
        assert_eq!(m.mean, 50.0);
        assert!((m.lower - 2.5).abs() < 1e-12);
        assert!((m.upper - 97.5).abs() < 1e-12);
    }

    #[test]
    fn histogram_is_valid_svg() {
        let s = histogram_svg("a", &[1.0, 1.0, 2.0, 3.5]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<rect").count(), BINS + 1);
    }
}
