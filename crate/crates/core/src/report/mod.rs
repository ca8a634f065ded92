//! Aggregation of run records into tables, CSV and SVG plots, plus the CLI.

pub mod cli;
mod svg;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::RunRecord;
use crate::metrics::directional_gap;
use crate::textcodec::Direction;

pub use svg::{emit_plots, PlotOutput};

/// One run flattened to the CSV columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub k: usize,
    pub regime: String,
    pub rank: Option<usize>,
    pub direction: Direction,
    pub floor: f64,
    pub observed: f64,
    pub excess: f64,
    pub gap: Option<f64>,
    pub seconds: f64,
    pub params_total: usize,
    pub params_trainable: usize,
}

impl ResultRow {
    pub fn from_record(r: &RunRecord) -> Self {
        ResultRow {
            k: r.k,
            regime: r.regime.clone(),
            rank: r.rank,
            direction: r.direction,
            floor: r.metrics.floor_nats,
            observed: r.metrics.observed_nats,
            excess: r.metrics.excess_nats,
            gap: None,
            seconds: r.seconds,
            params_total: r.params_total,
            params_trainable: r.params_trainable,
        }
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            regime_order: regime_order(&self.regime),
            regime: self.regime.clone(),
            k: self.k,
            rank: self.rank,
        }
    }
}

fn regime_order(regime: &str) -> usize {
    ["scratch", "mlp", "finetune", "finetune_reg", "lora"]
        .iter()
        .position(|r| *r == regime)
        .unwrap_or(usize::MAX)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    regime_order: usize,
    pub regime: String,
    pub k: usize,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Side {
    pub observed: f64,
    pub excess: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: String,
    pub k: usize,
    pub rank: Option<usize>,
    pub forward: Option<Side>,
    pub inverse: Option<Side>,
}

impl SummaryRow {
    pub fn gap(&self) -> Option<f64> {
        Some(directional_gap(self.inverse?.excess, self.forward?.excess))
    }

    pub fn side(&self, d: Direction) -> Option<Side> {
        match d {
            Direction::Forward => self.forward,
            Direction::Inverse => self.inverse,
        }
    }
}

/// Forward and inverse results per `(regime, K, rank)` cell, ordered by regime then K then rank.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub rows: Vec<SummaryRow>,
}

impl SuiteSummary {
    pub fn get(&self, regime: &str, k: usize, rank: Option<usize>) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.regime == regime && r.k == k && r.rank == rank)
    }

    pub fn regime_rows<'a>(&'a self, regime: &'a str) -> impl Iterator<Item = &'a SummaryRow> + 'a {
        self.rows.iter().filter(move |r| r.regime == regime)
    }
}

/// Later rows replace earlier ones for the same cell and direction.
pub fn aggregate(rows: &[ResultRow]) -> SuiteSummary {
    let mut cells: BTreeMap<CellKey, SummaryRow> = BTreeMap::new();
    for r in rows {
        let cell = cells.entry(r.key()).or_insert_with(|| SummaryRow {
            regime: r.regime.clone(),
            k: r.k,
            rank: r.rank,
            forward: None,
            inverse: None,
        });
        let side = Some(Side {
            observed: r.observed,
            excess: r.excess,
            floor: r.floor,
        });
        match r.direction {
            Direction::Forward => cell.forward = side,
            Direction::Inverse => cell.inverse = side,
        }
    }
    SuiteSummary {
        rows: cells.into_values().collect(),
    }
}

/// CSV rows for `records` with the gap of each complete cell filled in on both directions.
pub fn result_rows(records: &[RunRecord]) -> Vec<ResultRow> {
    let mut rows: Vec<ResultRow> = records.iter().map(ResultRow::from_record).collect();
    let summary = aggregate(&rows);
    for row in &mut rows {
        row.gap = summary.get(&row.regime, row.k, row.rank).and_then(|c| c.gap());
    }
    rows
}

pub fn write_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Decode(format!("csv: {e}"))
}

/// Two decimals, with negative zero printed as `0.00`.
pub fn fmt2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), fmt2)
}

fn side_excess(row: Option<&SummaryRow>, d: Direction) -> Option<f64> {
    row.and_then(|r| r.side(d)).map(|s| s.excess)
}

fn ks_of(summary: &SuiteSummary, regimes: &[&str]) -> Vec<usize> {
    let mut ks: Vec<usize> = summary
        .rows
        .iter()
        .filter(|r| regimes.contains(&r.regime.as_str()))
        .map(|r| r.k)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Scratch Transformer beside the MLP: forward excess, inverse excess and gap per K.
pub fn table_scratch_vs_mlp(summary: &SuiteSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Excess loss (nats): scratch Transformer vs MLP");
    let _ = writeln!(
        out,
        "{:>3} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
        "K", "T fwd", "T inv", "T gap", "MLP fwd", "MLP inv", "MLP gap"
    );
    for k in ks_of(summary, &["scratch", "mlp"]) {
        let t = summary.get("scratch", k, None);
        let m = summary.get("mlp", k, None);
        let _ = writeln!(
            out,
            "{:>3} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}",
            k,
            cell(side_excess(t, Direction::Forward)),
            cell(side_excess(t, Direction::Inverse)),
            cell(t.and_then(|r| r.gap())),
            cell(side_excess(m, Direction::Forward)),
            cell(side_excess(m, Direction::Inverse)),
            cell(m.and_then(|r| r.gap())),
        );
    }
    out
}

/// Finetuning regimes: one line per direction with floor, excess and total loss.
pub fn table_finetune(summary: &SuiteSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Excess loss (nats): finetuning from the pretrained base");
    let _ = writeln!(
        out,
        "{:<8} {:>3} {:<5} {:>6} {:>7} {:>7}",
        "Regime", "K", "Dir", "Floor", "Excess", "Total"
    );
    for k in ks_of(summary, &["finetune", "finetune_reg"]) {
        for (regime, name) in [("finetune", "FT"), ("finetune_reg", "FT-Reg")] {
            let Some(row) = summary.get(regime, k, None) else {
                continue;
            };
            for d in Direction::BOTH {
                if let Some(s) = row.side(d) {
                    let _ = writeln!(
                        out,
                        "{:<8} {:>3} {:<5} {:>6} {:>7} {:>7}",
                        name,
                        k,
                        d.arrow(),
                        fmt2(s.floor),
                        fmt2(s.excess),
                        fmt2(s.observed)
                    );
                }
            }
        }
    }
    out
}

/// LoRA ranks: excess and loss per direction.
pub fn table_lora(summary: &SuiteSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Excess loss (nats): LoRA by rank");
    let _ = writeln!(
        out,
        "{:>3} {:>5} | {:>8} {:>8} | {:>8} {:>8}",
        "K", "r", "fwd exc", "fwd loss", "inv exc", "inv loss"
    );
    for row in summary.regime_rows("lora") {
        let f = row.forward;
        let i = row.inverse;
        let _ = writeln!(
            out,
            "{:>3} {:>5} | {:>8} {:>8} | {:>8} {:>8}",
            row.k,
            row.rank.map_or("-".into(), |r| r.to_string()),
            cell(f.map(|s| s.excess)),
            cell(f.map(|s| s.observed)),
            cell(i.map(|s| s.excess)),
            cell(i.map(|s| s.observed)),
        );
    }
    out
}

/// All three tables, skipping those without rows.
pub fn render_tables(summary: &SuiteSummary) -> String {
    let mut parts = Vec::new();
    if !ks_of(summary, &["scratch", "mlp"]).is_empty() {
        parts.push(table_scratch_vs_mlp(summary));
    }
    if !ks_of(summary, &["finetune", "finetune_reg"]).is_empty() {
        parts.push(table_finetune(summary));
    }
    if summary.regime_rows("lora").next().is_some() {
        parts.push(table_lora(summary));
    }
    parts.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(regime: &str, k: usize, rank: Option<usize>, d: Direction, observed: f64) -> ResultRow {
        let floor = crate::metrics::floor(d, k);
        ResultRow {
            k,
            regime: regime.into(),
            rank,
            direction: d,
            floor,
            observed,
            excess: observed - floor,
            gap: None,
            seconds: 1.5,
            params_total: 100,
            params_trainable: 10,
        }
    }

    fn sample() -> Vec<ResultRow> {
        vec![
            row("scratch", 5, None, Direction::Forward, 0.91),
            row("scratch", 5, None, Direction::Inverse, 2.07 + 5f64.ln()),
            row("mlp", 5, None, Direction::Forward, 0.46),
            row("lora", 5, Some(8), Direction::Inverse, 5.06),
            row("finetune", 8, None, Direction::Inverse, 3.07),
        ]
    }

    #[test]
    fn aggregate_pairs_directions() {
        let s = aggregate(&sample());
        assert_eq!(s.rows.len(), 4);
        assert_eq!(s.rows[0].regime, "scratch");
        assert_eq!(fmt2(s.get("scratch", 5, None).unwrap().gap().unwrap()), "1.16");
        assert!(s.get("mlp", 5, None).unwrap().gap().is_none());
        assert_eq!(fmt2(s.get("lora", 5, Some(8)).unwrap().inverse.unwrap().excess), "3.45");
    }

    #[test]
    fn csv_round_trip() {
        let rows = sample();
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "k,regime,rank,direction,floor,observed,excess,gap,seconds,params_total,params_trainable\n"
        ));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back, rows);
        assert_eq!(aggregate(&back), aggregate(&rows));
        assert!(read_csv("k,regime\n1\n".as_bytes()).is_err());
    }

    #[test]
    fn tables_render_missing_cells() {
        let s = aggregate(&sample());
        let t1 = table_scratch_vs_mlp(&s);
        assert!(t1.contains("1.16"), "{t1}");
        assert!(t1.lines().nth(2).unwrap().contains('-'));
        let t3 = table_lora(&s);
        assert!(t3.contains("3.45") && t3.contains("5.06"));
        let all = render_tables(&s);
        assert!(all.contains("FT ") && all.contains("0.99"));
        assert_eq!(fmt2(-0.001), "0.00");
    }
}
