//! Trend and delta figures as dependency-free SVG, each with its data CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::report::size_label;
use super::store::{RunRecord, Store};
use crate::error::{Error, Result};
use crate::metrics::aggregate;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    /// mIoU against fine-tune size, one series per pre-train size.
    Trend,
    /// mIoU with intermediate training minus without, paired by run index.
    Delta,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trend" => Ok(Self::Trend),
            "delta" => Ok(Self::Delta),
            _ => Err(Error::Plan(format!("unknown plot kind `{s}` (trend, delta)"))),
        }
    }
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Trend => "trend",
            Self::Delta => "delta",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub finetune_size: usize,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub pretrain_size: usize,
    pub points: Vec<Point>,
}

impl Series {
    pub fn label(&self) -> String {
        if self.pretrain_size == 0 {
            "no pre-training".into()
        } else {
            format!("{} pre-train", size_label(self.pretrain_size))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub kind: PlotKind,
    pub series: Vec<Series>,
    pub warnings: Vec<String>,
}

fn complete_miou(records: &[RunRecord], intermediate: bool) -> BTreeMap<(usize, usize), BTreeMap<usize, f64>> {
    let mut out: BTreeMap<(usize, usize), BTreeMap<usize, f64>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.key.intermediate == intermediate && r.is_complete())
    {
        if let Some(m) = &r.metrics {
            out.entry((r.key.pretrain_size, r.key.finetune_size))
                .or_default()
                .insert(r.key.run, m.miou);
        }
    }
    out
}

pub fn build_plot(records: &[RunRecord], kind: PlotKind) -> Result<Plot> {
    let mut warnings = Vec::new();
    let mut by_series: BTreeMap<usize, Vec<Point>> = BTreeMap::new();
    match kind {
        PlotKind::Trend => {
            for ((pt, ft), runs) in complete_miou(records, false) {
                let a = aggregate(&runs.into_values().collect::<Vec<_>>())?;
                by_series.entry(pt).or_default().push(Point {
                    finetune_size: ft,
                    mean: a.mean,
                    stderr: a.stderr,
                    n: a.n,
                });
            }
        }
        PlotKind::Delta => {
            let without = complete_miou(records, false);
            let with = complete_miou(records, true);
            for ((pt, ft), runs_with) in &with {
                let Some(runs_without) = without.get(&(*pt, *ft)) else {
                    warnings.push(format!("{pt}/{ft}: no runs without the intermediate phase"));
                    continue;
                };
                let diffs: Vec<f64> = runs_with
                    .iter()
                    .filter_map(|(run, w)| runs_without.get(run).map(|wo| w - wo))
                    .collect();
                if diffs.is_empty() {
                    warnings.push(format!("{pt}/{ft}: no run index present on both sides"));
                    continue;
                }
                let a = aggregate(&diffs)?;
                by_series.entry(*pt).or_default().push(Point {
                    finetune_size: *ft,
                    mean: a.mean,
                    stderr: a.stderr,
                    n: a.n,
                });
            }
            if with.is_empty() {
                warnings.push("no complete records with the intermediate phase".into());
            }
        }
    }
    let series = by_series
        .into_iter()
        .map(|(pretrain_size, points)| Series { pretrain_size, points })
        .collect();
    Ok(Plot { kind, series, warnings })
}

pub fn emit_plot(store: &Store, kind: PlotKind) -> Result<Plot> {
    let records = store.records()?;
    if records.is_empty() {
        return Err(Error::Empty("no records".into()));
    }
    build_plot(&records, kind)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

impl Plot {
    pub const CSV_HEADER: &'static str = "series,pretrain_size,finetune_size,mean,stderr,n";

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for s in &self.series {
            for p in &s.points {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    s.label(),
                    s.pretrain_size,
                    p.finetune_size,
                    p.mean,
                    p.stderr,
                    p.n
                );
            }
        }
        out
    }

    /// Fine-tune sizes are placed at even spacing; points carry ±stderr bars.
    pub fn to_svg(&self) -> String {
        let (w, h) = (720.0, 440.0);
        let (left, right, top, bottom) = (70.0, 190.0, 40.0, 60.0);
        let mut xs: Vec<usize> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.finetune_size))
            .collect();
        xs.sort_unstable();
        xs.dedup();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in self.series.iter().flat_map(|s| &s.points) {
            lo = lo.min(p.mean - p.stderr);
            hi = hi.max(p.mean + p.stderr);
        }
        if self.kind == PlotKind::Delta {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        let pad = ((hi - lo) * 0.08).max(0.5);
        let (lo, hi) = (lo - pad, hi + pad);
        let plot_w = w - left - right;
        let plot_h = h - top - bottom;
        let x_at = |ft: usize| {
            let i = xs.iter().position(|&x| x == ft).unwrap_or(0) as f64;
            let n = (xs.len().max(2) - 1) as f64;
            left + plot_w * if xs.len() == 1 { 0.5 } else { i / n }
        };
        let y_at = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));
        let title = match self.kind {
            PlotKind::Trend => "mIoU (%) by fine-tuning size",
            PlotKind::Delta => "mIoU difference (%), with minus without intermediate training",
        };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{title}</text>"#,
            left + plot_w / 2.0
        );
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        for i in 0..=5 {
            let v = lo + (hi - lo) * i as f64 / 5.0;
            let y = y_at(v);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
                left + plot_w
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
                left - 6.0,
                y + 4.0
            );
        }
        if self.kind == PlotKind::Delta {
            let y = y_at(0.0);
            let _ = writeln!(
                s,
                r#"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
                left + plot_w
            );
        }
        for &ft in &xs {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{ft}</text>"#,
                x_at(ft),
                top + plot_h + 18.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle"># fine-tuning examples</text>"#,
            left + plot_w / 2.0,
            h - 16.0
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|p| format!("{:.1},{:.1}", x_at(p.finetune_size), y_at(p.mean)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
            for p in &series.points {
                let x = x_at(p.finetune_size);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" x2="{x:.1}" y1="{:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    y_at(p.mean - p.stderr),
                    y_at(p.mean + p.stderr)
                );
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#,
                    y_at(p.mean)
                );
            }
            let ly = top + 16.0 + 20.0 * i as f64;
            let lx = left + plot_w + 16.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
                lx + 22.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                lx + 28.0,
                ly + 4.0,
                series.label()
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
