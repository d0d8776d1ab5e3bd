use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use super::{OrchestratorError, Result};
use crate::distmath::{classical_mds, euclidean, pairwise_distances};
use crate::encoder::RepresentationRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdsMode {
    /// One point per representation row.
    PerStep,
    /// One point per episode: the mean of its rows.
    EpisodeMean,
}

impl std::str::FromStr for MdsMode {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-step" => Ok(MdsMode::PerStep),
            "per-episode-mean" => Ok(MdsMode::EpisodeMean),
            _ => Err(OrchestratorError::Config(format!("unknown MDS mode {s:?} (per-step, per-episode-mean)"))),
        }
    }
}

/// A representation point before or after reduction.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub label: String,
    pub episode_id: u64,
    /// `None` for episode means.
    pub t: Option<usize>,
    pub coords: Vec<f64>,
}

/// Keeps the last `last` rows of every episode (by `t`), or all rows.
pub fn last_steps(rows: &[RepresentationRow], last: Option<usize>) -> Vec<RepresentationRow> {
    let Some(k) = last else {
        return rows.to_vec();
    };
    let mut max_t: HashMap<(String, u64), usize> = HashMap::new();
    for r in rows {
        let e = max_t.entry((r.label.clone(), r.episode_id)).or_insert(0);
        *e = (*e).max(r.t);
    }
    rows.iter().filter(|r| r.t + k > max_t[&(r.label.clone(), r.episode_id)]).cloned().collect()
}

/// Rows as points, or averaged per episode in order of first appearance.
pub fn representation_points(rows: &[RepresentationRow], mode: MdsMode) -> Vec<LabeledPoint> {
    match mode {
        MdsMode::PerStep => rows
            .iter()
            .map(|r| LabeledPoint { label: r.label.clone(), episode_id: r.episode_id, t: Some(r.t), coords: r.values.clone() })
            .collect(),
        MdsMode::EpisodeMean => {
            let mut order: Vec<(String, u64)> = Vec::new();
            let mut sums: HashMap<(String, u64), (Vec<f64>, usize)> = HashMap::new();
            for r in rows {
                let key = (r.label.clone(), r.episode_id);
                let e = sums.entry(key.clone()).or_insert_with(|| {
                    order.push(key);
                    (vec![0.0; r.values.len()], 0)
                });
                e.0.iter_mut().zip(&r.values).for_each(|(a, v)| *a += v);
                e.1 += 1;
            }
            order
                .into_iter()
                .map(|key| {
                    let (s, n) = &sums[&key];
                    LabeledPoint { label: key.0, episode_id: key.1, t: None, coords: s.iter().map(|v| v / *n as f64).collect() }
                })
                .collect()
        }
    }
}

/// Two-dimensional classical MDS of the representation rows. Returns the
/// reduced points and the negative eigenvalue mass of the embedding.
pub fn export_mds(rows: &[RepresentationRow], mode: MdsMode, last: Option<usize>) -> Result<(Vec<LabeledPoint>, f64)> {
    let points = representation_points(&last_steps(rows, last), mode);
    if points.len() < 3 {
        return Err(OrchestratorError::Config(format!("MDS needs at least 3 points, got {}", points.len())));
    }
    let coords: Vec<Vec<f64>> = points.iter().map(|p| p.coords.clone()).collect();
    let emb = classical_mds(pairwise_distances(&coords).view(), 2)?;
    let out = points.into_iter().zip(emb.points).map(|(p, c)| LabeledPoint { coords: c, ..p }).collect();
    Ok((out, emb.negative_mass))
}

pub fn write_mds_csv<W: Write>(points: &[LabeledPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "episode", "t", "x", "y"])?;
    for p in points {
        let t = p.t.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([p.label.clone(), p.episode_id.to_string(), t, p.coords[0].to_string(), p.coords[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Labels in order of first appearance.
pub fn labels_present(points: &[LabeledPoint]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for p in points {
        if !out.contains(&p.label) {
            out.push(p.label.clone());
        }
    }
    out
}

/// Mean point per label, in order of first appearance.
pub fn centroids(points: &[LabeledPoint]) -> Vec<(String, Vec<f64>)> {
    labels_present(points)
        .into_iter()
        .map(|l| {
            let mine: Vec<&LabeledPoint> = points.iter().filter(|p| p.label == l).collect();
            let dim = mine[0].coords.len();
            let mut c = vec![0.0; dim];
            for p in &mine {
                c.iter_mut().zip(&p.coords).for_each(|(a, v)| *a += v);
            }
            c.iter_mut().for_each(|a| *a /= mine.len() as f64);
            (l, c)
        })
        .collect()
}

/// Position of `c` projected onto the line from `a` to `b`, as a fraction
/// of `|b - a|`: 0 at `a`, 1 at `b`.
pub fn projection_fraction(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let ac: Vec<f64> = a.iter().zip(c).map(|(x, y)| y - x).collect();
    let den: f64 = ab.iter().map(|v| v * v).sum();
    if den == 0.0 {
        return f64::NAN;
    }
    ab.iter().zip(&ac).map(|(u, v)| u * v).sum::<f64>() / den
}

/// The pair of labels whose centroids are closest.
pub fn closest_pair(centroids: &[(String, Vec<f64>)]) -> Option<(String, String, f64)> {
    let mut best: Option<(String, String, f64)> = None;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let d = euclidean(&centroids[i].1, &centroids[j].1);
            if best.as_ref().is_none_or(|b| d < b.2) {
                best = Some((centroids[i].0.clone(), centroids[j].0.clone(), d));
            }
        }
    }
    best
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 50.0;

impl Frame {
    fn around(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let lo = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let hi = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
        let (mut x0, mut x1) = (lo(&mut xs.clone()), hi(&mut xs.clone()));
        let (mut y0, mut y1) = (lo(&mut ys.clone()), hi(&mut ys.clone()));
        if !(x1 > x0) {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if !(y1 > y0) {
            y0 -= 1.0;
            y1 += 1.0;
        }
        Self { x0, x1, y0, y1 }
    }

    fn x(&self, v: f64) -> f64 {
        PAD + (v - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD - 120.0)
    }

    fn y(&self, v: f64) -> f64 {
        H - PAD - (v - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn axes(&self, svg: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (PAD, W - PAD - 120.0, PAD, H - PAD);
        let _ = writeln!(svg, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
        let _ = writeln!(svg, r#"<text x="{l}" y="{}" font-size="11">{:.3}</text>"#, b + 15.0, self.x0);
        let _ = writeln!(svg, r#"<text x="{r}" y="{}" font-size="11" text-anchor="end">{:.3}</text>"#, b + 15.0, self.x1);
        let _ = writeln!(svg, r#"<text x="{}" y="{b}" font-size="11" text-anchor="end">{:.3}</text>"#, l - 4.0, self.y0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{:.3}</text>"#, l - 4.0, t + 10.0, self.y1);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#, (l + r) / 2.0, b + 35.0, escape(xlabel));
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(ylabel)
        );
    }
}

fn legend(svg: &mut String, labels: &[String]) {
    for (k, l) in labels.iter().enumerate() {
        let y = PAD + 10.0 + 18.0 * k as f64;
        let x = W - PAD - 105.0;
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[k % PALETTE.len()]);
        let _ = writeln!(svg, r#"<text x="{}" y="{y}" font-size="12">{}</text>"#, x + 15.0, escape(l));
    }
}

fn open_svg(title: &str) -> String {
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    svg.push('\n');
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="25" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    svg
}

/// Scatter of 2-D points colored by label, with a legend of the labels present.
pub fn mds_svg(points: &[LabeledPoint], title: &str) -> String {
    let labels = labels_present(points);
    let frame = Frame::around(points.iter().map(|p| p.coords[0]), points.iter().map(|p| p.coords[1]));
    let mut svg = open_svg(title);
    frame.axes(&mut svg, "MDS 1", "MDS 2");
    for p in points {
        let k = labels.iter().position(|l| *l == p.label).unwrap_or(0);
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
            frame.x(p.coords[0]),
            frame.y(p.coords[1]),
            PALETTE[k % PALETTE.len()]
        );
    }
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    svg
}

/// One curve of a reward plot: `(x, mean, std)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64, f64)>,
}

/// Mean and population standard deviation across runs at each shared `x`.
/// Runs are `(x, y)` series; only x values present in every run are kept.
pub fn mean_std_curve(label: &str, runs: &[Vec<(f64, f64)>]) -> Curve {
    let Some(first) = runs.first() else {
        return Curve { label: label.to_string(), points: Vec::new() };
    };
    let points = first
        .iter()
        .filter_map(|&(x, _)| {
            let ys: Vec<f64> = runs.iter().filter_map(|r| r.iter().find(|p| p.0 == x).map(|p| p.1)).collect();
            (ys.len() == runs.len()).then(|| {
                let m = ys.iter().sum::<f64>() / ys.len() as f64;
                let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64).sqrt();
                (x, m, sd)
            })
        })
        .collect();
    Curve { label: label.to_string(), points }
}

/// Line plot of mean curves with shaded one-standard-deviation bands.
pub fn reward_svg(curves: &[Curve], title: &str, xlabel: &str) -> String {
    let all = curves.iter().flat_map(|c| c.points.iter());
    let frame = Frame::around(all.clone().map(|p| p.0), all.flat_map(|p| [p.1 - p.2, p.1 + p.2]));
    let mut svg = open_svg(title);
    frame.axes(&mut svg, xlabel, "test reward");
    for (k, c) in curves.iter().enumerate() {
        if c.points.is_empty() {
            continue;
        }
        let color = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", frame.x(p.0), frame.y(p.1 + p.2))).collect();
        let lower: Vec<String> = c.points.iter().rev().map(|p| format!("{:.2},{:.2}", frame.x(p.0), frame.y(p.1 - p.2))).collect();
        let _ = writeln!(svg, r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
        let line: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", frame.x(p.0), frame.y(p.1))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" "));
    }
    let labels: Vec<String> = curves.iter().map(|c| c.label.clone()).collect();
    legend(&mut svg, &labels);
    svg.push_str("</svg>\n");
    svg
}
