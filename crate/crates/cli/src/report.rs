//! CSV artifacts and their companion plot scripts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Header of the generic estimate table.
pub const ESTIMATE_HEADER: [&str; 6] = ["quantity", "value", "stderr", "n", "seed", "params_hash"];

/// Header of the per-`n` tables of the tuning experiments.
pub const MW_HEADER: [&str; 9] = ["n", "rbar", "upsilon", "upsilon_bound", "Q", "ratio_dev", "ratio_stderr", "seed", "params_hash"];

/// Rows of one artifact, written as `<out>/<name>.csv` with a one-line
/// comment header carrying the command and hash.
#[derive(Debug)]
pub struct Table {
    name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    seed: u64,
    params_hash: String,
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.12e}")
    }
}

impl Table {
    pub fn new(name: &str, header: &[&str], seed: u64, params_hash: &str) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            seed,
            params_hash: params_hash.to_string(),
        }
    }

    pub fn estimates(name: &str, seed: u64, params_hash: &str) -> Self {
        Self::new(name, &ESTIMATE_HEADER, seed, params_hash)
    }

    pub fn mw(name: &str, seed: u64, params_hash: &str) -> Self {
        Self::new(name, &MW_HEADER, seed, params_hash)
    }

    /// Appends `quantity,value,stderr,n` plus seed and hash.
    pub fn estimate(&mut self, quantity: &str, value: f64, stderr: f64, n: usize) {
        let row = vec![quantity.to_string(), fmt(value), fmt(stderr), n.to_string(), self.seed.to_string(), self.params_hash.clone()];
        self.rows.push(row);
    }

    /// Appends an exact value.
    pub fn exact(&mut self, quantity: &str, value: f64) {
        self.estimate(quantity, value, 0.0, 0);
    }

    /// Appends an MW row; `NaN` marks a column that does not apply.
    #[allow(clippy::too_many_arguments)]
    pub fn mw_row(&mut self, n: usize, rbar: usize, upsilon: f64, bound: f64, q: f64, dev: f64, dev_se: f64) {
        let mut row = vec![n.to_string(), rbar.to_string()];
        row.extend([upsilon, bound, q, dev, dev_se].map(fmt));
        row.push(self.seed.to_string());
        row.push(self.params_hash.clone());
        self.rows.push(row);
    }

    /// Writes the CSV and its plot script; returns the CSV path.
    pub fn write(&self, out: &Path, command: &str) -> Result<PathBuf> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(format!("{}.csv", self.name));
        let mut body = format!("# fkloopgas {command} params_hash={}\n", self.params_hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut body);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        fs::write(out.join(format!("plot_{}.py", self.name)), self.plot_script())?;
        Ok(path)
    }

    fn plot_script(&self) -> String {
        let (x, y, e) = if self.header[0] == "n" { ("n", "ratio_dev", "ratio_stderr") } else { ("quantity", "value", "stderr") };
        format!(
            r##""""Plot {name}.csv."""
import sys

import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv("{name}.csv", comment="#")
df = df.dropna(subset=["{y}"])
fig, ax = plt.subplots(figsize=(7, 4))
ax.errorbar(df["{x}"].astype(str), df["{y}"], yerr=df["{e}"].fillna(0), fmt="o", capsize=3)
ax.set_xlabel("{x}")
ax.set_ylabel("{y}")
ax.set_title("{name}")
plt.xticks(rotation=45, ha="right")
fig.tight_layout()
fig.savefig(sys.argv[1] if len(sys.argv) > 1 else "{name}.png", dpi=150)
"##,
            name = self.name
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_carry_seed_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::estimates("xi", 7, "abc");
        t.estimate("log_xi", 0.5, 0.01, 100);
        t.exact("kappa", 2.0);
        let path = t.write(dir.path(), "xi").unwrap();
        let text = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "quantity,value,stderr,n,seed,params_hash");
        assert!(lines[2].starts_with("log_xi,5.000000000000e-1,") && lines[2].ends_with(",100,7,abc"));
        assert!(dir.path().join("plot_xi.py").exists());
    }

    #[test]
    fn missing_mw_columns_are_blank() {
        let mut t = Table::mw("mw", 1, "h");
        t.mw_row(16, 3, 0.1, 0.2, 2.5, f64::NAN, f64::NAN);
        assert_eq!(t.rows[0][5], "");
        assert_eq!(t.rows.len(), 1);
    }
}
