//! File output: time-series CSV, field snapshots and summary tables. Every
//! file is written to a temporary sibling and renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::diagnostics::DiagnosticsRecord;
use crate::error::{Error, Result};
use crate::grid::{Field2D, Grid2D, RadialField, RadialGrid};

pub const TIME_SERIES_HEADER: &str = "time,mass,free_energy,max_rho,min_rho,dt_grad_rho,small_data_lhs,cg_iters";

/// Diagnostics rows of one run in increasing time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeSeries {
    records: Vec<DiagnosticsRecord>,
}

impl TimeSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: DiagnosticsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if !(record.time > last.time) {
                return Err(Error::param(
                    "time",
                    format!("series times must increase: {} after {}", record.time, last.time),
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[DiagnosticsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&DiagnosticsRecord> {
        self.records.last()
    }

    /// CSV text; the mass column sums the species.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(TIME_SERIES_HEADER);
        out.push('\n');
        for r in &self.records {
            let mass: f64 = r.mass.iter().sum();
            let _ = writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.time, mass, r.free_energy, r.max_rho, r.min_rho, r.dt_grad_rho, r.small_data_lhs, r.cg_iterations
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnapshotGrid {
    Cartesian(Grid2D),
    Radial(RadialGrid),
}

/// A density or concentration field at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub grid: SnapshotGrid,
    pub time: f64,
    /// Row-major; radial fields include the ghost node first.
    pub values: Vec<f64>,
}

impl Snapshot {
    pub fn cartesian(field: &Field2D, time: f64) -> Self {
        Self {
            grid: SnapshotGrid::Cartesian(*field.grid()),
            time,
            values: field.values().to_vec(),
        }
    }

    pub fn radial(field: &RadialField, time: f64) -> Self {
        Self {
            grid: SnapshotGrid::Radial(*field.grid()),
            time,
            values: field.values().to_vec(),
        }
    }

    pub fn to_field(&self) -> Result<Field2D> {
        match self.grid {
            SnapshotGrid::Cartesian(g) => Field2D::from_values(g, self.values.clone()),
            SnapshotGrid::Radial(_) => Err(Error::Snapshot("radial snapshot read as cartesian".into())),
        }
    }

    pub fn to_radial(&self) -> Result<RadialField> {
        match self.grid {
            SnapshotGrid::Radial(g) => RadialField::from_values(g, self.values.clone()),
            SnapshotGrid::Cartesian(_) => Err(Error::Snapshot("cartesian snapshot read as radial".into())),
        }
    }

    /// Four header lines (grid size, bounds, spacing, time), then the values
    /// one grid row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let row_len = match self.grid {
            SnapshotGrid::Cartesian(g) => {
                let (a, b, c, d) = g.bounds();
                let _ = writeln!(out, "grid,cartesian,{},{}", g.nx(), g.ny());
                let _ = writeln!(out, "bounds,{a:.16e},{b:.16e},{c:.16e},{d:.16e}");
                let _ = writeln!(out, "spacing,{:.16e},{:.16e}", g.dx(), g.dy());
                g.nx()
            }
            SnapshotGrid::Radial(g) => {
                let _ = writeln!(out, "grid,radial,{}", g.nr());
                let _ = writeln!(out, "bounds,0,{:.16e}", g.length());
                let _ = writeln!(out, "spacing,{:.16e}", g.dr());
                g.len()
            }
        };
        let _ = writeln!(out, "time,{:.16e}", self.time);
        for row in self.values.chunks(row_len) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Snapshot(msg.to_string());
        let mut lines = text.lines();
        let mut header = |tag: &str| -> Result<Vec<&str>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{tag}` line")))?;
            let mut parts = line.split(',');
            if parts.next() != Some(tag) {
                return Err(bad(&format!("expected `{tag}` line, got `{line}`")));
            }
            Ok(parts.collect())
        };
        let size = header("grid")?;
        let bounds = header("bounds")?;
        let _spacing = header("spacing")?;
        let time = header("time")?;
        let float = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("cannot parse `{s}`")));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(&format!("cannot parse `{s}`")));
        let grid = match size.as_slice() {
            ["cartesian", nx, ny] => {
                let b: Vec<f64> = bounds.iter().map(|s| float(s)).collect::<Result<_>>()?;
                if b.len() != 4 {
                    return Err(bad("cartesian bounds need four values"));
                }
                SnapshotGrid::Cartesian(Grid2D::new(b[0], b[1], b[2], b[3], int(nx)?, int(ny)?)?)
            }
            ["radial", nr] => {
                let length = bounds.get(1).ok_or_else(|| bad("radial bounds need two values"))?;
                SnapshotGrid::Radial(RadialGrid::new(float(length)?, int(nr)?)?)
            }
            _ => return Err(bad("unknown grid line")),
        };
        let time = float(time.first().ok_or_else(|| bad("missing time value"))?)?;
        let values: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .flat_map(|l| l.split(','))
            .map(float)
            .collect::<Result<_>>()?;
        let expected = match grid {
            SnapshotGrid::Cartesian(g) => g.len(),
            SnapshotGrid::Radial(g) => g.len(),
        };
        if values.len() != expected {
            return Err(bad(&format!("expected {expected} values, found {}", values.len())));
        }
        Ok(Self { grid, time, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Plain-text table with right-aligned columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Self {
            title: title.into(),
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut width: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (k, c) in r.iter().enumerate().take(cols) {
                width[k] = width[k].max(c.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = (0..cols)
                .map(|k| format!("{:>w$}", cells.get(k).map(String::as_str).unwrap_or(""), w = width[k]))
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            out.push_str(&self.title);
            out.push('\n');
        }
        out.push_str(&line(&self.headers));
        out.push('\n');
        let total: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(time: f64) -> DiagnosticsRecord {
        DiagnosticsRecord {
            time,
            mass: vec![1.5, 0.5],
            free_energy: -0.25,
            max_rho: 3.0,
            min_rho: 0.0,
            grad_rho_l2: 1.0,
            dt_grad_rho: 0.1,
            small_data_lhs: 2.0,
            cg_iterations: 7,
        }
    }

    #[test]
    fn series_rejects_nonincreasing_time() {
        let mut s = TimeSeries::new();
        s.push(row(0.1)).unwrap();
        assert!(s.push(row(0.1)).is_err());
        s.push(row(0.2)).unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn series_csv_layout() {
        let mut s = TimeSeries::new();
        for k in 1..=3 {
            s.push(row(k as f64 * 0.1)).unwrap();
        }
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TIME_SERIES_HEADER);
        assert_eq!(lines.len(), 4);
        let cells: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[1].parse::<f64>().unwrap(), 2.0);
        assert_eq!(cells[7], "7");
    }

    #[test]
    fn cartesian_snapshot_round_trip() {
        let g = Grid2D::new(-1.0, 3.0, 0.0, 0.7, 4, 4).unwrap();
        let f = Field2D::from_fn(g, |x, y| (x * 1.3 + y).sin() / 3.0 + 1e-300);
        let snap = Snapshot::cartesian(&f, 0.1 + 0.2);
        let text = snap.to_csv();
        assert_eq!(text.lines().count(), 4 + 4);
        assert_eq!(text.lines().skip(4).flat_map(|l| l.split(',')).count(), 16);
        let back = Snapshot::parse(&text).unwrap();
        assert_eq!(back, snap);
        assert!(back.values.iter().zip(f.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.time.to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn radial_snapshot_round_trip() {
        let g = RadialGrid::new(2.0, 7).unwrap();
        let f = RadialField::from_fn(g, |r| (-r * r).exp() * std::f64::consts::PI);
        let snap = Snapshot::radial(&f, 1.0 / 3.0);
        let back = Snapshot::parse(&snap.to_csv()).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.to_radial().unwrap(), f);
        assert!(back.to_field().is_err());
    }

    #[test]
    fn malformed_snapshots_rejected() {
        assert!(Snapshot::parse("").is_err());
        assert!(Snapshot::parse("grid,cartesian,2,2\nbounds,0,1,0,1\nspacing,0.5,0.5\ntime,0\n1,2\n3\n").is_err());
        assert!(Snapshot::parse("grid,sphere,2\nbounds,0,1\nspacing,0.5\ntime,0\n1,2,3\n").is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let missing = dir.path().join("absent").join("x.csv");
        let err = write_atomic(&missing, b"x").unwrap_err().to_string();
        assert!(err.contains("absent"), "{err}");
    }

    #[test]
    fn table_aligns_columns() {
        let mut t = Table::new("demo", &["mesh", "error"]);
        t.row(vec!["10".into(), "1.0e-1".into()]);
        t.row(vec!["160".into(), "2.5e-3".into()]);
        let s = t.render();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "demo");
        assert_eq!(lines[1], "mesh   error");
        assert_eq!(lines[3], "  10  1.0e-1");
    }
}
