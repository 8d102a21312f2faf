//! SVG curves from metrics streams.
//!
//! Each run contributes a per-epoch mean of its losses and, when the stream
//! has evaluation events, its held-out mAP and Rank-1. Several runs share one
//! figure for side-by-side comparison.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use m3l_core::trainer::MetricEvent;
use plotters::prelude::*;

/// One run's curves, keyed by epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Curves {
    pub label: String,
    pub l_mtr: Vec<(f64, f64)>,
    pub l_mte: Vec<(f64, f64)>,
    pub map: Vec<(f64, f64)>,
    pub rank1: Vec<(f64, f64)>,
}

impl Curves {
    pub fn from_events(label: &str, events: &[MetricEvent]) -> Self {
        let mut mtr: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut mte: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        let mut out = Curves {
            label: label.to_string(),
            ..Default::default()
        };
        for e in events {
            match e {
                MetricEvent::Iteration(m) => {
                    let s = mtr.entry(m.epoch).or_default();
                    s.0 += m.l_mtr;
                    s.1 += 1;
                    if let Some(v) = m.l_mte {
                        let s = mte.entry(m.epoch).or_default();
                        s.0 += v;
                        s.1 += 1;
                    }
                }
                MetricEvent::Eval(m) => {
                    out.map.push((m.epoch as f64 + 1.0, m.report.map));
                    out.rank1.push((m.epoch as f64 + 1.0, m.report.rank1));
                }
            }
        }
        let means = |m: BTreeMap<usize, (f64, usize)>| {
            m.into_iter()
                .map(|(e, (s, n))| (e as f64 + 1.0, s / n as f64))
                .collect()
        };
        out.l_mtr = means(mtr);
        out.l_mte = means(mte);
        out
    }

    pub fn has_eval(&self) -> bool {
        !self.map.is_empty()
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricEvent>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut events = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(events)
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

fn bounds(series: &[&[(f64, f64)]]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    ((x0, x1), (y0 - pad, y1 + pad))
}

type Series<'a> = (String, &'a [(f64, f64)], RGBColor, bool);

fn draw(path: &Path, caption: &str, y_label: &str, series: &[Series<'_>]) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let data: Vec<&[(f64, f64)]> = series.iter().map(|s| s.1).collect();
    let ((x0, x1), (y0, y1)) = bounds(&data);
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc("epoch").y_desc(y_label).draw()?;
    for (name, pts, color, dashed) in series {
        let style = ShapeStyle::from(color).stroke_width(2);
        let drawn = if *dashed {
            chart.draw_series(DashedLineSeries::new(pts.iter().copied(), 6, 4, style))?
        } else {
            chart.draw_series(LineSeries::new(pts.iter().copied(), style))?
        };
        let c = *color;
        drawn
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Writes `<stem>-loss.svg` and, if any run has evaluations,
/// `<stem>-eval.svg`. Returns the written paths.
pub fn plot_runs(runs: &[Curves], out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    if runs.is_empty() || runs.iter().all(|r| r.l_mtr.is_empty()) {
        bail!("nothing to plot: the metrics history is empty");
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let mut loss = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        loss.push((format!("{} meta-train", r.label), r.l_mtr.as_slice(), color, false));
        if !r.l_mte.is_empty() {
            loss.push((format!("{} meta-test", r.label), r.l_mte.as_slice(), color, true));
        }
    }
    let path = out_dir.join(format!("{stem}-loss.svg"));
    draw(&path, "training loss (epoch mean)", "loss", &loss)?;
    written.push(path);

    if runs.iter().any(Curves::has_eval) {
        let mut eval = Vec::new();
        for (i, r) in runs.iter().enumerate().filter(|(_, r)| r.has_eval()) {
            let color = PALETTE[i % PALETTE.len()];
            eval.push((format!("{} mAP", r.label), r.map.as_slice(), color, false));
            eval.push((format!("{} Rank-1", r.label), r.rank1.as_slice(), color, true));
        }
        let path = out_dir.join(format!("{stem}-eval.svg"));
        draw(&path, "held-out retrieval", "score", &eval)?;
        written.push(path);
    }
    Ok(written)
}
