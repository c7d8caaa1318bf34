use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sqrt(mean squared error) / v_max`.
pub fn normalized_rmse(pred: &[f64], truth: &[f64], v_max: f64) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::param("normalized RMSE of an empty set"));
    }
    if pred.len() != truth.len() {
        return Err(Error::param(format!(
            "{} predictions for {} outcomes",
            pred.len(),
            truth.len()
        )));
    }
    if !(v_max > 0.0) {
        return Err(Error::param("normalizing volume must be positive"));
    }
    let mse = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mse.sqrt() / v_max)
}

/// One evaluated (run, method, γ, τ, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Experiment or ablation label.
    pub run: String,
    pub method: String,
    pub gamma: f64,
    pub tau: usize,
    pub seed: u64,
    /// Normalized RMSE in percent.
    pub rmse_pct: f64,
    pub n: usize,
    pub wall_s: f64,
}

impl MetricsRecord {
    fn key(&self) -> (String, String, u64, usize, u64) {
        (
            self.run.clone(),
            self.method.clone(),
            self.gamma.to_bits(),
            self.tau,
            self.seed,
        )
    }
}

/// Appends records to a delimited metrics file, writing the manifest and
/// header on creation. Records whose key is already present are skipped, so
/// reruns never duplicate rows. Returns the number of rows written.
pub fn append_metrics(path: &Path, manifest: &str, records: &[MetricsRecord]) -> Result<usize> {
    let existing = if path.exists() {
        read_metrics(path)?
    } else {
        Vec::new()
    };
    let seen: HashSet<_> = existing.iter().map(MetricsRecord::key).collect();
    let fresh: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| !seen.contains(&r.key()))
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let new_file = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if new_file {
        for line in manifest.lines() {
            writeln!(f, "# {line}")?;
        }
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(new_file)
        .from_writer(f);
    if new_file && fresh.is_empty() {
        w.write_record([
            "run", "method", "gamma", "tau", "seed", "rmse_pct", "n", "wall_s",
        ])?;
    }
    for r in &fresh {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(fresh.len())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// The `# `-prefixed manifest lines of a delimited file.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        match line.strip_prefix("# ") {
            Some(rest) => out.push(rest.to_string()),
            None => break,
        }
    }
    Ok(out)
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(
            normalized_rmse(&[1.0, 2.0], &[1.0, 2.0], 1150.0).unwrap(),
            0.0
        );
        let r = normalized_rmse(&[3.0, 5.0, 8.0], &[1.0, 3.0, 6.0], 1150.0).unwrap();
        assert!((r - 2.0 / 1150.0).abs() < 1e-15);
        let r = normalized_rmse(&[1150.0, 0.0], &[0.0, 0.0], 1150.0).unwrap();
        assert!((r - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(normalized_rmse(&[], &[], 1150.0).is_err());
    }

    #[test]
    fn append_skips_existing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rec = MetricsRecord {
            run: "base".into(),
            method: "ct".into(),
            gamma: 2.0,
            tau: 1,
            seed: 3,
            rmse_pct: 1.25,
            n: 10,
            wall_s: 0.5,
        };
        assert_eq!(append_metrics(&path, "seed: 3", &[rec.clone()]).unwrap(), 1);
        assert_eq!(append_metrics(&path, "seed: 3", &[rec.clone()]).unwrap(), 0);
        let mut other = rec.clone();
        other.tau = 2;
        assert_eq!(
            append_metrics(&path, "seed: 3", &[rec.clone(), other.clone()]).unwrap(),
            1
        );
        assert_eq!(read_metrics(&path).unwrap(), vec![rec, other]);
        assert_eq!(read_manifest(&path).unwrap(), vec!["seed: 3".to_string()]);
    }
}
