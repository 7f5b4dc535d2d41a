//! Point sets: the raw material every graph is built from.
//!
//! A [`PointSet`] is an `N x d` coordinate matrix with an optional class label
//! per row. Labels are partial: `None` marks an unlabeled point, which matters
//! for semi-supervised training where the loss only sees labeled rows.
//!
//! CSV layout is one row per point, columns `x_1..x_d`, final column `label`
//! with `-1` meaning unlabeled.

use ndarray::{Array2, ArrayView2};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    coords: Array2<f64>,
    labels: Vec<Option<usize>>,
}

impl PointSet {
    pub fn new(coords: Array2<f64>, labels: Vec<Option<usize>>) -> Result<Self> {
        if coords.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinate rows vs {} labels",
                coords.nrows(),
                labels.len()
            )));
        }
        Ok(PointSet { coords, labels })
    }

    /// All rows unlabeled.
    pub fn unlabeled(coords: Array2<f64>) -> Self {
        let labels = vec![None; coords.nrows()];
        PointSet { coords, labels }
    }

    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    pub fn dim(&self) -> usize {
        self.coords.ncols()
    }

    pub fn coords(&self) -> ArrayView2<'_, f64> {
        self.coords.view()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Labeled row indices in ascending order.
    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<Option<usize>>) {
        (self.coords, self.labels)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(&display, e))?;
        let d = self.dim();
        let mut header: Vec<String> = (1..=d).map(|j| format!("x_{j}")).collect();
        header.push("label".to_string());
        wtr.write_record(&header).map_err(|e| Error::csv(&display, e))?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = (0..d).map(|j| self.coords[[i, j]].to_string()).collect();
            rec.push(match self.labels[i] {
                Some(c) => c.to_string(),
                None => "-1".to_string(),
            });
            wtr.write_record(&rec).map_err(|e| Error::csv(&display, e))?;
        }
        wtr.flush().map_err(|e| Error::io(&display, e))?;
        Ok(())
    }

    /// Reads a point set back; lines starting with `#` (provenance
    /// headers) are skipped.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::csv(&display, e))?;
        let headers = rdr.headers().map_err(|e| Error::csv(&display, e))?.clone();
        let has_label = headers.iter().last() == Some("label");
        let d = if has_label {
            headers.len().saturating_sub(1)
        } else {
            headers.len()
        };
        if d == 0 {
            return Err(Error::MalformedLine {
                path: display,
                line: 1,
                reason: "no coordinate columns".into(),
            });
        }
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 2; // 1-based, after the header
            let record = record.map_err(|e| Error::csv(&display, e))?;
            if record.len() != headers.len() {
                return Err(Error::MalformedLine {
                    path: display,
                    line,
                    reason: format!("expected {} fields, got {}", headers.len(), record.len()),
                });
            }
            for j in 0..d {
                let v: f64 = record[j].trim().parse().map_err(|_| Error::MalformedLine {
                    path: display.clone(),
                    line,
                    reason: format!("bad float {:?}", &record[j]),
                })?;
                coords.push(v);
            }
            if has_label {
                let raw = record[d].trim();
                let v: i64 = raw.parse().map_err(|_| Error::MalformedLine {
                    path: display.clone(),
                    line,
                    reason: format!("bad label {raw:?}"),
                })?;
                labels.push(if v < 0 { None } else { Some(v as usize) });
            } else {
                labels.push(None);
            }
        }
        let n = labels.len();
        let coords = Array2::from_shape_vec((n, d), coords)
            .expect("row-major buffer matches (n, d) by construction");
        PointSet::new(coords, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_coords_and_labels() {
        let ps = PointSet::new(
            array![[0.5, -1.25], [3.0, 0.1], [1e-9, 2.0]],
            vec![Some(0), None, Some(3)],
        )
        .unwrap();
        let dir = std::env::temp_dir().join("diffres_points_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pts.csv");
        ps.write_csv(&path).unwrap();
        let back = PointSet::read_csv(&path).unwrap();
        assert_eq!(ps, back);
    }

    #[test]
    fn label_mismatch_rejected() {
        let err = PointSet::new(array![[0.0, 0.0]], vec![]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn labeled_rows_skips_none() {
        let ps = PointSet::new(
            array![[0.0], [1.0], [2.0]],
            vec![None, Some(1), None],
        )
        .unwrap();
        assert_eq!(ps.labeled_rows(), vec![1]);
    }
}
