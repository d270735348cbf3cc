//! Method-by-metric result tables with computed per-column winners.

use serde::Serialize;

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub stats: Vec<Stat>,
}

/// Rows keep first-appearance order of their method.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinnerRow {
    pub metric: String,
    pub method: String,
    pub mean: f64,
}

impl Table {
    /// Groups `(method, values)` rows by method and summarizes each column.
    pub fn aggregate(columns: Vec<String>, rows: &[(String, Vec<f64>)]) -> Table {
        let mut order: Vec<String> = Vec::new();
        for (m, _) in rows {
            if !order.contains(m) {
                order.push(m.clone());
            }
        }
        let rows = order
            .into_iter()
            .map(|method| {
                let stats = (0..columns.len())
                    .map(|c| {
                        let v: Vec<f64> = rows.iter().filter(|(m, _)| *m == method).map(|(_, v)| v[c]).collect();
                        Stat::of(&v)
                    })
                    .collect();
                TableRow { method, stats }
            })
            .collect();
        Table { columns, rows }
    }

    /// Row index with the highest mean per column. Every reported metric is
    /// higher-is-better (NLL is reported as a nonpositive log-likelihood).
    /// NaN means never win; ties go to the earlier row.
    pub fn winners(&self) -> Vec<Option<usize>> {
        (0..self.columns.len())
            .map(|c| {
                let mut best: Option<usize> = None;
                for (r, row) in self.rows.iter().enumerate() {
                    let v = row.stats[c].mean;
                    if v.is_nan() {
                        continue;
                    }
                    if best.is_none_or(|b| v > self.rows[b].stats[c].mean) {
                        best = Some(r);
                    }
                }
                best
            })
            .collect()
    }

    pub fn winner_rows(&self) -> Vec<WinnerRow> {
        self.columns
            .iter()
            .zip(self.winners())
            .filter_map(|(c, w)| {
                w.map(|r| WinnerRow {
                    metric: c.clone(),
                    method: self.rows[r].method.clone(),
                    mean: self.rows[r].stats[self.columns.iter().position(|x| x == c).expect("own column")].mean,
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        header.push("replicates".into());
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.method.clone()];
            for s in &row.stats {
                rec.push(s.mean.to_string());
                rec.push(s.std.to_string());
            }
            rec.push(row.stats.first().map_or(0, |s| s.n).to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    /// Markdown with `mean ± std` cells; each column's winner is bold.
    pub fn to_markdown(&self) -> String {
        let winners = self.winners();
        let mut s = String::from("| method |");
        for c in &self.columns {
            s.push_str(&format!(" {c} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(self.columns.len()));
        s.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            s.push_str(&format!("| {} |", row.method));
            for (c, st) in row.stats.iter().enumerate() {
                let cell = format!("{:.4} ± {:.4}", st.mean, st.std);
                if winners[c] == Some(r) {
                    s.push_str(&format!(" **{cell}** |"));
                } else {
                    s.push_str(&format!(" {cell} |"));
                }
            }
            s.push('\n');
        }
        s
    }
}
