//! Plot-ready CSV tables with versioned `#` headers.
//!
//! Layout: a banner line `# mandelq <kind> v1`, sorted `# key=value` lines,
//! one column-name line, then rows. Reals are written with 17 significant
//! digits so they parse back bit-exactly; an absent value is an empty field.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::stats::{
    CorrelationHistogram, LifetimeHistogram, PhotonNumberDistribution, QEntry, QSeries, SweepPoint,
};

pub const TABLE_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const HISTOGRAM_COLUMNS: [&str; 4] = ["bin_left_ps", "bin_right_ps", "counts", "normalized"];
pub const QSERIES_COLUMNS: [&str; 5] = ["t_ps", "q_mean", "q_std", "n_acquisitions", "n_windows"];
pub const LIFETIME_COLUMNS: [&str; 3] = ["bin_left_ps", "bin_right_ps", "counts"];
pub const PND_COLUMNS: [&str; 3] = ["n", "probability", "poisson"];
pub const SWEEP_COLUMNS: [&str; 4] = ["width_ps", "q_mean", "q_std", "n_acquisitions"];

/// Formats a real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_real).unwrap_or_default()
}

/// A parsed or to-be-written table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(kind: &str, columns: &[&str]) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("toolkit_version".into(), TOOLKIT_VERSION.into());
        Self {
            kind: kind.into(),
            meta,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta<K: ToString, V: ToString>(mut self, entries: impl IntoIterator<Item = (K, V)>) -> Self {
        for (k, v) in entries {
            self.meta.insert(k.to_string(), v.to_string());
        }
        self
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# mandelq {} v{TABLE_VERSION}", self.kind)?;
        for (k, v) in &self.meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "{}", self.columns.join(","))?;
        for row in &self.rows {
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to memory");
        out
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut kind = None;
        let mut meta = BTreeMap::new();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let err = |msg: String| Error::Parse { line: lineno, msg };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if i == 0 {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    if parts.len() != 3 || parts[0] != "mandelq" {
                        return Err(err(format!("expected '# mandelq <kind> v{TABLE_VERSION}' banner")));
                    }
                    if parts[2] != format!("v{TABLE_VERSION}") {
                        return Err(err(format!("unsupported table version {}", parts[2])));
                    }
                    kind = Some(parts[1].to_string());
                } else if let Some((k, v)) = rest.split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
            match &columns {
                None => columns = Some(fields),
                Some(c) => {
                    if fields.len() != c.len() {
                        return Err(err(format!("expected {} fields, found {}", c.len(), fields.len())));
                    }
                    rows.push(fields);
                }
            }
        }
        Ok(Self {
            kind: kind.ok_or(Error::Parse {
                line: 1,
                msg: "missing banner".into(),
            })?,
            meta,
            columns: columns.unwrap_or_default(),
            rows,
        })
    }

    fn expect(&self, kind: &str, columns: &[&str]) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected a {kind} table, found {}", self.kind),
            });
        }
        if self.columns != columns {
            return Err(Error::Parse {
                line: self.meta.len() + 2,
                msg: format!("expected columns {}", columns.join(",")),
            });
        }
        Ok(())
    }

    fn header_len(&self) -> usize {
        self.meta.len() + 2
    }

    /// Parses cell `(row, col)`; errors carry the file line number.
    pub fn cell<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T> {
        let s = &self.rows[row][col];
        s.parse().map_err(|_| Error::Parse {
            line: self.header_len() + row + 1,
            msg: format!("cannot parse {} value '{s}'", self.columns[col]),
        })
    }

    fn opt_cell(&self, row: usize, col: usize) -> Result<Option<f64>> {
        if self.rows[row][col].is_empty() {
            Ok(None)
        } else {
            self.cell(row, col).map(Some)
        }
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("header key '{key}' missing"),
        })?;
        v.parse().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("cannot parse header value {key}={v}"),
        })
    }

    /// Column by name as reals.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let col = self.columns.iter().position(|c| c == name).ok_or_else(|| Error::Parse {
            line: self.header_len(),
            msg: format!("column '{name}' missing"),
        })?;
        (0..self.rows.len()).map(|r| self.cell(r, col)).collect()
    }
}

pub fn histogram_table(h: &CorrelationHistogram) -> Table {
    let mut t = Table::new("g2", &HISTOGRAM_COLUMNS).with_meta([
        ("n_a", h.n_a.to_string()),
        ("n_b", h.n_b.to_string()),
        ("duration_ps", h.duration.to_string()),
        ("folded", h.folded.to_string()),
    ]);
    let norm = h.normalized();
    for i in 0..h.counts.len() {
        t.rows.push(vec![
            fmt_real(h.edges[i]),
            fmt_real(h.edges[i + 1]),
            h.counts[i].to_string(),
            fmt_real(norm[i]),
        ]);
    }
    t
}

pub fn histogram_from_table(t: &Table) -> Result<CorrelationHistogram> {
    t.expect("g2", &HISTOGRAM_COLUMNS)?;
    let mut edges = Vec::with_capacity(t.rows.len() + 1);
    let mut counts = Vec::with_capacity(t.rows.len());
    for r in 0..t.rows.len() {
        if r == 0 {
            edges.push(t.cell(r, 0)?);
        }
        edges.push(t.cell(r, 1)?);
        counts.push(t.cell(r, 2)?);
    }
    if edges.windows(2).any(|e| e[0] >= e[1]) {
        return Err(Error::Parse {
            line: t.header_len() + 1,
            msg: "bin edges must increase".into(),
        });
    }
    Ok(CorrelationHistogram {
        edges,
        counts,
        n_a: t.meta_value("n_a")?,
        n_b: t.meta_value("n_b")?,
        duration: t.meta_value("duration_ps")?,
        folded: t.meta_value("folded")?,
    })
}

pub fn qseries_table(s: &QSeries) -> Table {
    let mut t = Table::new("qseries", &QSERIES_COLUMNS);
    for e in &s.entries {
        t.rows.push(vec![
            e.t.to_string(),
            fmt_real(e.mean),
            fmt_opt(e.std),
            e.n_acquisitions.to_string(),
            e.n_windows.to_string(),
        ]);
    }
    t
}

pub fn qseries_from_table(t: &Table) -> Result<QSeries> {
    t.expect("qseries", &QSERIES_COLUMNS)?;
    let entries = (0..t.rows.len())
        .map(|r| {
            Ok(QEntry {
                t: t.cell(r, 0)?,
                mean: t.cell(r, 1)?,
                std: t.opt_cell(r, 2)?,
                n_acquisitions: t.cell(r, 3)?,
                n_windows: t.cell(r, 4)?,
                values: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QSeries { entries })
}

pub fn lifetime_table(h: &LifetimeHistogram) -> Table {
    let mut t = Table::new("lifetime", &LIFETIME_COLUMNS).with_meta([
        ("bin_width_ps", h.bin_width),
        ("tau_rep_ps", h.tau_rep),
        ("duration_ps", h.duration),
    ]);
    let w = h.bin_width;
    for (i, &c) in h.counts.iter().enumerate() {
        let left = i as u64 * w;
        t.rows.push(vec![left.to_string(), (left + w).to_string(), c.to_string()]);
    }
    t
}

pub fn lifetime_from_table(t: &Table) -> Result<LifetimeHistogram> {
    t.expect("lifetime", &LIFETIME_COLUMNS)?;
    let counts = (0..t.rows.len()).map(|r| t.cell(r, 2)).collect::<Result<Vec<u64>>>()?;
    Ok(LifetimeHistogram {
        bin_width: t.meta_value("bin_width_ps")?,
        tau_rep: t.meta_value("tau_rep_ps")?,
        duration: t.meta_value("duration_ps")?,
        counts,
    })
}

pub fn pnd_table(p: &PhotonNumberDistribution) -> Table {
    let mut t = Table::new("pnd", &PND_COLUMNS).with_meta([
        ("t_ps", p.t.to_string()),
        ("n_windows", p.n_windows.to_string()),
        ("mean", fmt_real(p.mean)),
        ("std", fmt_real(p.std)),
        ("poisson_std", fmt_real(p.poisson_std)),
    ]);
    let mut ln_fact = 0.0;
    for (n, &prob) in p.probabilities.iter().enumerate() {
        if n > 0 {
            ln_fact += (n as f64).ln();
        }
        let poisson = if p.mean > 0.0 {
            (n as f64 * p.mean.ln() - p.mean - ln_fact).exp()
        } else if n == 0 {
            1.0
        } else {
            0.0
        };
        t.rows.push(vec![n.to_string(), fmt_real(prob), fmt_real(poisson)]);
    }
    t
}

pub fn sweep_table(points: &[SweepPoint]) -> Table {
    let mut t = Table::new("sweep", &SWEEP_COLUMNS);
    for p in points {
        t.rows.push(vec![
            p.width.map(|w| w.to_string()).unwrap_or_else(|| "raw".into()),
            fmt_real(p.mean),
            fmt_opt(p.std),
            p.n_acquisitions.to_string(),
        ]);
    }
    t
}

/// Two-column `(x, value)` table, e.g. a model curve.
pub fn xy_table(kind: &str, x_name: &str, y_name: &str, x: &[f64], y: &[f64]) -> Table {
    let mut t = Table::new(kind, &[x_name, y_name]);
    for (a, b) in x.iter().zip(y) {
        t.rows.push(vec![fmt_real(*a), fmt_real(*b)]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_real(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn histogram_round_trip() {
        let h = CorrelationHistogram {
            edges: vec![-1.5, -0.5, 0.5, 1.5],
            counts: vec![3, 0, 7],
            n_a: 10,
            n_b: 12,
            duration: 1_000,
            folded: false,
        };
        let bytes = histogram_table(&h).to_bytes();
        let back = histogram_from_table(&Table::read(&bytes[..]).unwrap()).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn qseries_round_trip_without_values() {
        let s = QSeries {
            entries: vec![
                QEntry {
                    t: 100,
                    mean: -0.25,
                    std: None,
                    n_acquisitions: 1,
                    n_windows: 40,
                    values: vec![],
                },
                QEntry {
                    t: 200,
                    mean: 0.1,
                    std: Some(0.01),
                    n_acquisitions: 3,
                    n_windows: 20,
                    values: vec![],
                },
            ],
        };
        let bytes = qseries_table(&s).to_bytes();
        assert_eq!(qseries_from_table(&Table::read(&bytes[..]).unwrap()).unwrap(), s);
    }

    #[test]
    fn bad_cell_reports_line() {
        let text = "# mandelq qseries v1\n# toolkit_version=0\nt_ps,q_mean,q_std,n_acquisitions,n_windows\n100,x,,1,2\n";
        let t = Table::read(text.as_bytes()).unwrap();
        match qseries_from_table(&t) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }
}
