//! Pearson correlations between attribute dimensions and the stability-penalty
//! coefficients derived from them.
//!
//! For a target dimension `i`, every other dimension `j` receives
//! `β_j = c · |ρ_ij| / max_{u≠i} |ρ_iu|`, so the most strongly coupled
//! dimension is penalized with exactly `c`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreVector;

/// Global penalty factor.
pub const DEFAULT_C: f64 = 0.3;

/// Grid for the `c` search: 0.1, 0.2, …, 1.0.
pub fn c_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 10.0).collect()
}

/// Per-text attribute scores, one row per corpus text.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSampleMatrix {
    dims: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl ScoreSampleMatrix {
    pub fn new(dims: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Validation("score samples need at least one dimension".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dims.len() {
                return Err(Error::Validation(format!(
                    "row {i} has {} values, expected {}",
                    r.len(),
                    dims.len()
                )));
            }
        }
        Ok(Self { dims, rows })
    }

    pub fn from_score_vectors(dims: Vec<String>, vectors: &[ScoreVector]) -> Result<Self> {
        let rows = vectors
            .iter()
            .map(|v| {
                if v.scores.len() != dims.len() {
                    return Err(Error::Validation(
                        "score vector does not cover exactly the sample dims".into(),
                    ));
                }
                dims.iter().map(|d| v.require(d)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims, rows)
    }

    /// CSV with a header of attribute ids and one row per text.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let dims: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Validation(format!("non-numeric score {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::new(dims, rows)
    }

    pub fn dims(&self) -> &[String] {
        &self.dims
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub dims: Vec<String>,
    pub rho: Vec<Vec<f64>>,
    /// Zero-variance columns, correlated 0 against everything else.
    #[serde(default)]
    pub degenerate: Vec<String>,
}

impl CorrelationMatrix {
    pub fn index_of(&self, dim: &str) -> Option<usize> {
        self.dims.iter().position(|d| d == dim)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.rho[self.index_of(a)?][self.index_of(b)?])
    }

    /// Symmetric CSV: header `dim,<ids…>`, one row per dimension.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["dim".to_string()];
        header.extend(self.dims.iter().cloned());
        w.write_record(&header)?;
        for (d, row) in self.dims.iter().zip(&self.rho) {
            let mut rec = vec![d.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("dim") {
            return Err(Error::Validation(
                "correlation CSV must start with a `dim` column".into(),
            ));
        }
        let dims: Vec<String> = header[1..].to_vec();
        let mut rho = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.get(0) != dims.get(i).map(String::as_str) {
                return Err(Error::Validation(format!(
                    "correlation CSV row {i} is not labelled {:?}",
                    dims.get(i)
                )));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Validation(format!("bad correlation {v:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != dims.len() {
                return Err(Error::Validation(format!(
                    "correlation CSV row {i} has {} values",
                    row.len()
                )));
            }
            rho.push(row);
        }
        if rho.len() != dims.len() {
            return Err(Error::Validation("correlation CSV is not square".into()));
        }
        Ok(Self {
            dims,
            rho,
            degenerate: Vec::new(),
        })
    }
}

/// Pairwise Pearson correlations between the columns of `samples`.
pub fn pearson_matrix(samples: &ScoreSampleMatrix) -> Result<CorrelationMatrix> {
    let n = samples.rows.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("correlation needs >= 3 rows, got {n}")));
    }
    let d = samples.dims.len();
    let centered: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let col = samples.column(j);
            let mean = col.iter().sum::<f64>() / n as f64;
            col.into_iter().map(|x| x - mean).collect()
        })
        .collect();
    let sum_sq: Vec<f64> = centered.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    // Scores live in [0, 1]; anything below this is rounding noise on a constant column.
    let degenerate_idx: Vec<bool> = sum_sq.iter().map(|s| *s <= 1e-20).collect();

    let mut rho = vec![vec![0.0; d]; d];
    for i in 0..d {
        rho[i][i] = 1.0;
        for j in (i + 1)..d {
            let r = if degenerate_idx[i] || degenerate_idx[j] {
                0.0
            } else {
                let cov: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (cov / (sum_sq[i].sqrt() * sum_sq[j].sqrt())).clamp(-1.0, 1.0)
            };
            rho[i][j] = r;
            rho[j][i] = r;
        }
    }
    let degenerate = samples
        .dims
        .iter()
        .zip(&degenerate_idx)
        .filter(|(_, deg)| **deg)
        .map(|(d, _)| d.clone())
        .collect();
    Ok(CorrelationMatrix {
        dims: samples.dims.clone(),
        rho,
        degenerate,
    })
}

/// Stability-penalty coefficients for the dimensions outside `target_dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub c: f64,
    pub betas: BTreeMap<String, f64>,
    pub target_dims: Vec<String>,
    /// Target dimensions whose correlation row was all zero and fell back to `c/2`.
    #[serde(default)]
    pub fallback_dims: Vec<String>,
}

impl PenaltyConfig {
    /// Every listed dimension gets the same β.
    pub fn uniform(c: f64, beta: f64, target_dims: &[String], others: &[String]) -> Result<Self> {
        check_c(c)?;
        Ok(Self {
            c,
            betas: others.iter().map(|d| (d.clone(), beta)).collect(),
            target_dims: target_dims.to_vec(),
            fallback_dims: Vec::new(),
        })
    }

    pub fn beta(&self, dim: &str) -> Option<f64> {
        self.betas.get(dim).copied()
    }

    pub fn used_fallback(&self) -> bool {
        !self.fallback_dims.is_empty()
    }
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("penalty factor c must be positive, got {c}")));
    }
    Ok(())
}

/// `β_j = c·|ρ_ij| / max_{u≠i} |ρ_iu|` for one target dimension `i`.
pub fn derive_betas(matrix: &CorrelationMatrix, target_dim: &str, c: f64) -> Result<PenaltyConfig> {
    derive_betas_multi(matrix, &[target_dim.to_string()], c)
}

/// β for several simultaneously optimized dimensions: each non-target `j`
/// takes the maximum over targets of its normalized coupling.
pub fn derive_betas_multi(matrix: &CorrelationMatrix, target_dims: &[String], c: f64) -> Result<PenaltyConfig> {
    check_c(c)?;
    if target_dims.is_empty() {
        return Err(Error::Config(
            "beta derivation needs at least one target dimension".into(),
        ));
    }
    let targets = target_dims
        .iter()
        .map(|t| {
            matrix
                .index_of(t)
                .ok_or_else(|| Error::Config(format!("target dimension {t} not in correlation matrix")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut betas: BTreeMap<String, f64> = BTreeMap::new();
    let mut fallback_dims = Vec::new();
    for (&i, name) in targets.iter().zip(target_dims) {
        let row = &matrix.rho[i];
        let others = (0..matrix.dims.len()).filter(|j| !targets.contains(j));
        let max = (0..matrix.dims.len())
            .filter(|&u| u != i)
            .map(|u| row[u].abs())
            .fold(0.0, f64::max);
        if max == 0.0 {
            fallback_dims.push(name.clone());
        }
        for j in others {
            let b = if max == 0.0 { c / 2.0 } else { c * row[j].abs() / max };
            let entry = betas.entry(matrix.dims[j].clone()).or_insert(0.0);
            *entry = entry.max(b);
        }
    }
    Ok(PenaltyConfig {
        c,
        betas,
        target_dims: target_dims.to_vec(),
        fallback_dims,
    })
}

/// Outcome of evaluating one candidate `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub c: f64,
    pub loss: f64,
}

/// Evaluates `objective` at every grid value and returns all points plus the
/// minimizer (earliest on ties).
pub fn grid_search_c<F>(grid: &[f64], mut objective: F) -> Result<(Vec<GridPoint>, GridPoint)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::Validation("empty c grid".into()));
    }
    let points = grid
        .iter()
        .map(|&c| Ok(GridPoint { c, loss: objective(c)? }))
        .collect::<Result<Vec<_>>>()?;
    let best = points
        .iter()
        .copied()
        .reduce(|best, p| if p.loss < best.loss { p } else { best })
        .expect("grid is non-empty");
    Ok((points, best))
}
