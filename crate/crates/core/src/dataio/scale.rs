use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::gradcore::Matrix;

/// Per-column min/max used to map values onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ScaleParams {
    /// Fits on the given rows of `x`. When `mask` is given only entries with
    /// mask 1 count; a column with no such entry falls back to all its values
    /// in those rows.
    pub fn fit_rows(x: &Matrix, rows: &[usize], mask: Option<&Matrix>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::config("cannot fit scaling on zero rows"));
        }
        if let Some(m) = mask {
            x.check_same(m, "scale mask")?;
        }
        let d = x.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for &i in rows {
            for j in 0..d {
                if mask.map_or(true, |m| m.get(i, j) == 1.0) {
                    let v = x.get(i, j);
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        for j in 0..d {
            if min[j] > max[j] {
                for &i in rows {
                    let v = x.get(i, j);
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        Ok(Self { min, max })
    }

    pub fn fit(x: &Matrix) -> Result<Self> {
        let rows: Vec<usize> = (0..x.rows()).collect();
        Self::fit_rows(x, &rows, None)
    }

    /// Maps `x ↦ (x − min)/(max − min)` clipped to `[0, 1]`; constant columns
    /// map to 0.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            let span = self.max[j] - self.min[j];
            if span > 0.0 {
                ((x.get(i, j) - self.min[j]) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        }))
    }

    pub fn inverse(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            self.min[j] + x.get(i, j) * (self.max[j] - self.min[j])
        }))
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.min.len() {
            return Err(Error::Dimension {
                op: "scale",
                left: x.shape(),
                right: (1, self.min.len()),
            });
        }
        Ok(())
    }
}

/// Scales every feature column of `data` onto `[0, 1]` using its own range.
pub fn minmax_scale(data: &Dataset) -> Result<(Dataset, ScaleParams)> {
    let params = ScaleParams::fit(&data.features)?;
    let mut scaled = data.clone();
    scaled.features = params.transform(&data.features)?;
    Ok((scaled, params))
}
