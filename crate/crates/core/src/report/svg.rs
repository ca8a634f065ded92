//! Static SVG charts written as plain text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{aggregate, fmt2, result_rows, SuiteSummary, SummaryRow};
use crate::error::Result;
use crate::harness::RunRecord;
use crate::textcodec::Direction;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const FWD: &str = "#1f77b4";
const INV: &str = "#d62728";
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];

#[derive(Debug, Clone, Default)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    /// Series that were skipped and why.
    pub notes: Vec<String>,
}

struct Canvas {
    body: String,
    y_max: f64,
    y_min: f64,
}

impl Canvas {
    fn new(title: &str, y_label: &str, y_min: f64, y_max: f64) -> Self {
        let (y_min, y_max) = if y_max - y_min < 1e-9 { (y_min, y_min + 1.0) } else { (y_min, y_max) };
        let mut c = Canvas {
            body: String::new(),
            y_max,
            y_min,
        };
        let _ = write!(
            c.body,
            r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let _ = write!(
            c.body,
            r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
            TOP + (H - TOP - BOTTOM) / 2.0,
            TOP + (H - TOP - BOTTOM) / 2.0,
            escape(y_label)
        );
        for i in 0..=5 {
            let v = y_min + (y_max - y_min) * i as f64 / 5.0;
            let y = c.y(v);
            let _ = write!(
                c.body,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
                W - RIGHT,
                LEFT - 4.0,
                y + 3.0,
                fmt2(v)
            );
        }
        let _ = write!(
            c.body,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#,
            H - BOTTOM
        );
        c
    }

    fn y(&self, v: f64) -> f64 {
        let frac = (v - self.y_min) / (self.y_max - self.y_min);
        H - BOTTOM - frac * (H - TOP - BOTTOM)
    }

    fn legend(&mut self, items: &[(&str, &str)]) {
        for (i, (label, color)) in items.iter().enumerate() {
            let x = LEFT + 10.0 + 150.0 * i as f64;
            let y = H - 18.0;
            let _ = write!(
                self.body,
                r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{y:.1}" font-size="11">{}</text>"#,
                y - 9.0,
                x + 14.0,
                escape(label)
            );
        }
    }

    fn finish(self) -> String {
        format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/>{}</svg>
"#,
            self.body
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn series_name(row: &SummaryRow) -> String {
    match (row.regime.as_str(), row.rank) {
        ("scratch", _) => "Transformer".into(),
        ("mlp", _) => "MLP".into(),
        ("finetune", _) => "FT".into(),
        ("finetune_reg", _) => "FT-Reg".into(),
        ("lora", Some(r)) => format!("LoRA r{r}"),
        (other, _) => other.into(),
    }
}

/// Forward and inverse excess bars per cell, with the inverse floor noted under each group.
pub fn excess_bars(summary: &SuiteSummary, title: &str) -> Option<String> {
    let rows: Vec<&SummaryRow> = summary
        .rows
        .iter()
        .filter(|r| r.forward.is_some() || r.inverse.is_some())
        .collect();
    if rows.is_empty() {
        return None;
    }
    let vals = rows
        .iter()
        .flat_map(|r| [r.forward, r.inverse])
        .flatten()
        .map(|s| s.excess);
    let y_max = vals.clone().fold(0.0, f64::max) * 1.1;
    let y_min = vals.fold(0.0, f64::min).min(0.0) * 1.1;
    let mut c = Canvas::new(title, "excess loss (nats)", y_min, y_max);
    let slot = (W - LEFT - RIGHT) / rows.len() as f64;
    let bar = (slot * 0.35).min(40.0);
    let zero = c.y(0.0);
    for (i, row) in rows.iter().enumerate() {
        let x0 = LEFT + slot * i as f64 + slot / 2.0;
        for (j, (side, color)) in [(row.forward, FWD), (row.inverse, INV)].into_iter().enumerate() {
            let Some(s) = side else { continue };
            let x = x0 - bar + j as f64 * bar;
            let y = c.y(s.excess);
            let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
            let _ = write!(
                c.body,
                r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{h:.1}" fill="{color}"><title>{}</title></rect>"#,
                bar - 2.0,
                fmt2(s.excess)
            );
        }
        let floor = row.inverse.map(|s| s.floor).unwrap_or(0.0);
        let _ = write!(
            c.body,
            r##"<text x="{x0:.1}" y="{:.1}" font-size="10" text-anchor="middle">{} K={}</text><text x="{x0:.1}" y="{:.1}" font-size="9" fill="#555" text-anchor="middle">floor {}</text>"##,
            H - BOTTOM + 14.0,
            escape(&series_name(row)),
            row.k,
            H - BOTTOM + 26.0,
            fmt2(floor)
        );
    }
    c.legend(&[("forward A->B", FWD), ("inverse B->A", INV)]);
    Some(c.finish())
}

/// Directional gap against K, one polyline per series.
pub fn gap_lines(summary: &SuiteSummary) -> Option<String> {
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for row in &summary.rows {
        if let Some(g) = row.gap() {
            series.entry(series_name(row)).or_default().push((row.k, g));
        }
    }
    if series.is_empty() {
        return None;
    }
    let all: Vec<(usize, f64)> = series.values().flatten().copied().collect();
    let k_max = all.iter().map(|p| p.0).max().unwrap_or(1).max(2) as f64;
    let y_max = all.iter().map(|p| p.1).fold(0.0, f64::max) * 1.1;
    let y_min = all.iter().map(|p| p.1).fold(0.0, f64::min) * 1.1;
    let mut c = Canvas::new("Directional gap vs branching factor", "gap (nats)", y_min, y_max);
    let x = |k: f64| LEFT + (k - 1.0) / (k_max - 1.0) * (W - LEFT - RIGHT - 20.0) + 10.0;
    for k in 1..=k_max as usize {
        let _ = write!(
            c.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{k}</text>"#,
            x(k as f64),
            H - BOTTOM + 14.0
        );
    }
    let _ = write!(
        c.body,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">K</text>"#,
        W / 2.0,
        H - BOTTOM + 32.0
    );
    let mut legend = Vec::new();
    for (i, (name, pts)) in series.iter_mut().enumerate() {
        pts.sort_by_key(|p| p.0);
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(k, g)| format!("{:.1},{:.1}", x(k as f64), c.y(g)))
            .collect();
        let _ = write!(
            c.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(k, g) in pts.iter() {
            let _ = write!(
                c.body,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"><title>K={k} gap {}</title></circle>"#,
                x(k as f64),
                c.y(g),
                fmt2(g)
            );
        }
        legend.push((name.clone(), color));
    }
    let items: Vec<(&str, &str)> = legend.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    c.legend(&items);
    Some(c.finish())
}

/// Per-epoch training loss of each direction with its floor as a dashed line.
pub fn loss_curves(records: &[&RunRecord], title: &str) -> Option<String> {
    let records: Vec<&&RunRecord> = records.iter().filter(|r| !r.epochs.is_empty()).collect();
    if records.is_empty() {
        return None;
    }
    let n_epochs = records.iter().map(|r| r.epochs.len()).max().unwrap_or(1).max(2);
    let y_max = records
        .iter()
        .flat_map(|r| r.epochs.iter().map(|e| e.train_loss))
        .fold(0.0, f64::max)
        * 1.05;
    let mut c = Canvas::new(title, "train loss (nats)", 0.0, y_max);
    let x = |e: usize| LEFT + (e as f64 - 1.0) / (n_epochs as f64 - 1.0) * (W - LEFT - RIGHT);
    for e in [1, n_epochs / 2, n_epochs] {
        let _ = write!(
            c.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{e}</text>"#,
            x(e),
            H - BOTTOM + 14.0
        );
    }
    let _ = write!(
        c.body,
        r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">epoch</text>"#,
        W / 2.0,
        H - BOTTOM + 32.0
    );
    for r in &records {
        let color = match r.direction {
            Direction::Forward => FWD,
            Direction::Inverse => INV,
        };
        let pts: Vec<String> = r
            .epochs
            .iter()
            .map(|e| format!("{:.1},{:.1}", x(e.epoch), c.y(e.train_loss)))
            .collect();
        let _ = write!(
            c.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let fy = c.y(r.metrics.floor_nats);
        let _ = write!(
            c.body,
            r#"<line x1="{LEFT}" y1="{fy:.1}" x2="{:.1}" y2="{fy:.1}" stroke="{color}" stroke-dasharray="6 4"/>"#,
            W - RIGHT
        );
    }
    c.legend(&[("forward (dashed: floor 0)", FWD), ("inverse (dashed: floor ln K)", INV)]);
    Some(c.finish())
}

/// Writes the excess bars, the gap-vs-K lines and one loss-curve chart per cell under `out_dir`.
pub fn emit_plots(records: &[RunRecord], out_dir: &Path) -> Result<PlotOutput> {
    fs::create_dir_all(out_dir)?;
    let mut out = PlotOutput::default();
    let summary = aggregate(&result_rows(records));
    let write = |name: &str, svg: Option<String>, what: &str, out: &mut PlotOutput| -> Result<()> {
        match svg {
            Some(s) => {
                let path = out_dir.join(name);
                fs::write(&path, s)?;
                out.files.push(path);
            }
            None => out.notes.push(format!("skipped {what}: no data")),
        }
        Ok(())
    };

    let arch = SuiteSummary {
        rows: summary
            .rows
            .iter()
            .filter(|r| r.regime != "lora")
            .cloned()
            .collect(),
    };
    write("excess_bars.svg", excess_bars(&arch, "Excess loss by architecture and direction"), "excess bars", &mut out)?;
    let lora = SuiteSummary {
        rows: summary.regime_rows("lora").cloned().collect(),
    };
    if lora.rows.is_empty() {
        out.notes.push("no LoRA runs; LoRA panel omitted".into());
    } else {
        write("excess_bars_lora.svg", excess_bars(&lora, "LoRA excess loss by rank"), "LoRA bars", &mut out)?;
    }
    write("gap_vs_k.svg", gap_lines(&summary), "gap vs K", &mut out)?;

    let mut cells: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let regime = match r.rank {
            Some(rank) => format!("{}_r{rank}", r.regime),
            None => r.regime.clone(),
        };
        cells.entry(format!("k{}_{regime}", r.k)).or_default().push(r);
    }
    for (name, recs) in cells {
        let svg = loss_curves(&recs, &format!("Training loss, {name}"));
        write(&format!("curves_{name}.svg"), svg, &format!("curves for {name}"), &mut out)?;
    }
    Ok(out)
}
