//! Plot-ready CSV and JSON bundles built from run outputs.
//!
//! Every table has a fixed column list (see the `*_COLUMNS` constants).
//! Reading a CSV whose header differs from the expected columns is a
//! format error, as is merging tables with different schemas.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchReport;
use crate::classifier::{GridRow, RunManifest};
use crate::spiking::GridReport;
use crate::{Error, Result};

pub const ACCURACY_COLUMNS: &[&str] = &["model", "seed", "epoch", "train_loss", "train_acc", "val_loss", "val_acc"];
pub const RUNTIME_COLUMNS: &[&str] = &["model", "n", "k", "median_ms", "p10_ms", "p90_ms", "slope"];
pub const KSWEEP_COLUMNS: &[&str] = &["k", "seed", "val_acc", "train_loss"];
pub const REGIME_COLUMNS: &[&str] = &[
    "seed",
    "regime",
    "i_s",
    "i_c",
    "i_u",
    "drive_na",
    "spikes",
    "burst_spikes",
    "p_burst",
    "mean_rate_hz",
];

/// A named table of stringly-typed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::format(
                0,
                format!("{}: row has {} cells, schema has {}", self.name, row.len(), self.columns.len()),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    /// Parses a CSV that must carry exactly `columns` as its header.
    pub fn from_csv(name: &str, columns: &[&str], text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != columns.join(",") {
            return Err(Error::format(
                0,
                format!("{name}: header {header:?} does not match {:?}", columns.join(",")),
            ));
        }
        let mut t = Table::new(name, columns);
        let mut offset = header.len() as u64 + 1;
        for line in lines {
            if !line.is_empty() {
                let cells: Vec<String> = line.split(',').map(str::to_string).collect();
                if cells.len() != columns.len() {
                    return Err(Error::format(
                        offset,
                        format!("{name}: expected {} cells, got {}", columns.len(), cells.len()),
                    ));
                }
                t.rows.push(cells);
            }
            offset += line.len() as u64 + 1;
        }
        Ok(t)
    }

    /// Appends `other`'s rows; schemas must match.
    pub fn merge(&mut self, other: &Table) -> Result<()> {
        if self.columns != other.columns {
            return Err(Error::format(
                0,
                format!(
                    "cannot merge {} [{}] with {} [{}]",
                    self.name,
                    self.columns.join(","),
                    other.name,
                    other.columns.join(",")
                ),
            ));
        }
        self.rows.extend(other.rows.iter().cloned());
        Ok(())
    }
}

/// Everything a report is built from.
#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub manifests: Vec<RunManifest>,
    pub benches: Vec<BenchReport>,
    pub k_sweep: Vec<GridRow>,
    pub regimes: Vec<GridReport>,
}

/// The four figure tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub accuracy: Table,
    pub runtime: Table,
    pub k_sweep: Table,
    pub regimes: Table,
}

impl ReportBundle {
    pub fn empty() -> Self {
        ReportBundle {
            accuracy: Table::new("accuracy_vs_epoch", ACCURACY_COLUMNS),
            runtime: Table::new("runtime_vs_n", RUNTIME_COLUMNS),
            k_sweep: Table::new("k_sweep", KSWEEP_COLUMNS),
            regimes: Table::new("regime_grid", REGIME_COLUMNS),
        }
    }

    pub fn tables(&self) -> [&Table; 4] {
        [&self.accuracy, &self.runtime, &self.k_sweep, &self.regimes]
    }

    pub fn merge(&mut self, other: &ReportBundle) -> Result<()> {
        self.accuracy.merge(&other.accuracy)?;
        self.runtime.merge(&other.runtime)?;
        self.k_sweep.merge(&other.k_sweep)?;
        self.regimes.merge(&other.regimes)
    }

    /// Writes `<name>.csv` per table and `report.json` with all of them.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in self.tables() {
            fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv())?;
        }
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Reads a bundle previously written by [`ReportBundle::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let load = |name: &str, cols: &[&str]| -> Result<Table> {
            Table::from_csv(name, cols, &fs::read_to_string(dir.join(format!("{name}.csv")))?)
        };
        Ok(ReportBundle {
            accuracy: load("accuracy_vs_epoch", ACCURACY_COLUMNS)?,
            runtime: load("runtime_vs_n", RUNTIME_COLUMNS)?,
            k_sweep: load("k_sweep", KSWEEP_COLUMNS)?,
            regimes: load("regime_grid", REGIME_COLUMNS)?,
        })
    }
}

/// Parses a grid CSV written by [`crate::classifier::grid_csv`].
pub fn read_grid_csv(text: &str) -> Result<Vec<GridRow>> {
    let cols: Vec<&str> = crate::classifier::GRID_HEADER.split(',').collect();
    let t = Table::from_csv("grid", &cols, text)?;
    t.rows
        .iter()
        .map(|r| {
            let num = |v: &str| {
                v.parse::<f64>()
                    .map_err(|_| Error::format(0, format!("bad number {v:?} in grid row")))
            };
            Ok(GridRow {
                key: r[0].clone(),
                label: r[1].clone(),
                seed: r[2]
                    .parse()
                    .map_err(|_| Error::format(0, format!("bad seed {:?} in grid row", r[2])))?,
                val_acc: num(&r[3])?,
                train_loss: num(&r[4])?,
            })
        })
        .collect()
}

/// Builds the figure tables from run outputs.
pub fn emit_report(inputs: &ReportInputs) -> Result<ReportBundle> {
    let mut b = ReportBundle::empty();
    for m in &inputs.manifests {
        for e in &m.epochs {
            b.accuracy.push(vec![
                m.model.clone(),
                m.seed.to_string(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_acc.to_string(),
                e.val_loss.to_string(),
                e.val_acc.to_string(),
            ])?;
        }
    }
    for r in &inputs.benches {
        for row in &r.rows {
            b.runtime.push(vec![
                row.model.clone(),
                row.n.to_string(),
                row.k.to_string(),
                row.median_ms.to_string(),
                row.p10_ms.to_string(),
                row.p90_ms.to_string(),
                r.slope.to_string(),
            ])?;
        }
    }
    for g in &inputs.k_sweep {
        let k = g
            .label
            .strip_prefix("k=")
            .ok_or_else(|| Error::format(0, format!("k-sweep row label {:?} is not of the form k=<int>", g.label)))?;
        b.k_sweep.push(vec![
            k.to_string(),
            g.seed.to_string(),
            g.val_acc.to_string(),
            g.train_loss.to_string(),
        ])?;
    }
    for rep in &inputs.regimes {
        for s in &rep.regimes {
            b.regimes.push(vec![
                rep.seed.to_string(),
                s.regime.clone(),
                s.i_s.to_string(),
                s.i_c.to_string(),
                s.i_u.to_string(),
                s.drive_na.to_string(),
                s.spikes.to_string(),
                s.burst_spikes.to_string(),
                s.p_burst.to_string(),
                s.mean_rate_hz.to_string(),
            ])?;
        }
    }
    Ok(b)
}
