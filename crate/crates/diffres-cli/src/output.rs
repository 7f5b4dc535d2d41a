//! Output-file helpers: every CSV starts with a `# config <hash>` comment
//! and every JSON document carries a `config_hash` field, so any artifact
//! can be traced back to the exact config that produced it.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value;

/// Opens `path` with the provenance comment already written; append CSV
/// rows to the returned writer.
pub fn csv_writer(path: &Path, hash: &str) -> Result<csv::Writer<File>> {
    let mut file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "# config {hash}").with_context(|| format!("writing {}", path.display()))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes a JSON document with `config_hash` injected as the first field.
pub fn write_json(path: &Path, hash: &str, doc: Value) -> Result<()> {
    let mut map = serde_json::Map::new();
    map.insert("config_hash".to_string(), Value::String(hash.to_string()));
    if let Value::Object(fields) = doc {
        for (k, v) in fields {
            map.insert(k, v);
        }
    } else {
        map.insert("value".to_string(), doc);
    }
    let text = serde_json::to_string_pretty(&Value::Object(map))?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Writes coordinates plus labels in the [`diffres::points::PointSet`] CSV
/// layout (`x_1..x_d,label`, `-1` for unlabeled), hash comment first, so
/// `PointSet::read_csv` reads the file back.
pub fn write_points_csv(
    path: &Path,
    hash: &str,
    coords: &ndarray::ArrayView2<f64>,
    labels: &[Option<usize>],
) -> Result<()> {
    let mut writer = csv_writer(path, hash)?;
    let d = coords.ncols();
    let mut header: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
    header.push("label".to_string());
    writer.write_record(&header)?;
    for (i, row) in coords.rows().into_iter().enumerate() {
        let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        record.push(match labels.get(i).copied().flatten() {
            Some(c) => c.to_string(),
            None => "-1".to_string(),
        });
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Sample mean; zero on an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); zero below two samples.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Half-width of the normal-approximation 95% confidence interval.
pub fn ci95(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    1.96 * std_dev(values) / (values.len() as f64).sqrt()
}
