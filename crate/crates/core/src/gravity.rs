//! Gravity-law baseline: `T_ij = G · m_i^alpha · m_j^beta / d_ij^gamma`.

use std::io::{Read, Write};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::FlowMatrix;
use crate::dynmap::DynamicMap;
use crate::mobility::ODDataset;

#[derive(Debug, Error)]
pub enum GravityError {
    #[error("dataset has no entries")]
    EmptyDataset,
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("{masses} masses for a map of {cells} cells")]
    SizeMismatch { masses: usize, cells: usize },
    #[error("invalid parameter file: {0}")]
    Parse(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GravityError>;

/// Relative size of the smallest normal-matrix singular value below which
/// the design counts as rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityParams {
    #[serde(rename = "G")]
    pub g: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// In-flow plus out-flow of every cell, summed over all entries.
pub fn derive_masses(dataset: &ODDataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(GravityError::EmptyDataset);
    }
    let pooled = dataset.pooled();
    let n = pooled.n();
    let mut m = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let t = pooled.get(i, j) as f64;
            m[i] += t;
            m[j] += t;
        }
    }
    Ok(m)
}

/// Log-linear least squares over the pooled flows of `dataset`, using every
/// pair with at least one trip and positive masses at both ends.
pub fn fit(dataset: &ODDataset, map: &DynamicMap, masses: &[f64]) -> Result<GravityParams> {
    if dataset.is_empty() {
        return Err(GravityError::EmptyDataset);
    }
    fit_matrix(&dataset.pooled(), map, masses)
}

pub fn fit_matrix(flows: &FlowMatrix, map: &DynamicMap, masses: &[f64]) -> Result<GravityParams> {
    let n = map.len();
    if masses.len() != n || flows.n() != n {
        return Err(GravityError::SizeMismatch {
            masses: masses.len(),
            cells: n,
        });
    }
    let mut xtx = Matrix4::<f64>::zeros();
    let mut xty = Vector4::<f64>::zeros();
    let mut pairs = 0;
    for i in 0..n {
        for j in 0..n {
            let t = flows.get(i, j);
            if i == j || t == 0 || masses[i] <= 0.0 || masses[j] <= 0.0 {
                continue;
            }
            let x = Vector4::new(1.0, masses[i].ln(), masses[j].ln(), -map.centroid_distance(i, j).ln());
            xtx += x * x.transpose();
            xty += x * (t as f64).ln();
            pairs += 1;
        }
    }
    if pairs < 4 {
        return Err(GravityError::DegenerateDesign(format!(
            "{pairs} usable pairs for 4 parameters"
        )));
    }
    let sv = xtx.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if !(hi > 0.0 && lo / hi > RANK_TOL) {
        return Err(GravityError::DegenerateDesign(format!(
            "normal matrix condition {:e}",
            hi / lo
        )));
    }
    let coef = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| GravityError::DegenerateDesign("singular normal matrix".into()))?;
    Ok(GravityParams {
        g: coef[0].exp(),
        alpha: coef[1],
        beta: coef[2],
        gamma: coef[3],
    })
}

/// Real-valued predicted flows; row-major `n × n` with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Prediction {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Nearest-integer counts for metric comparison.
    pub fn rounded(&self) -> FlowMatrix {
        let counts = self.values.iter().map(|v| v.round() as u64).collect();
        FlowMatrix::new(self.n, counts).expect("zero diagonal by construction")
    }
}

pub fn predict(params: &GravityParams, masses: &[f64], map: &DynamicMap) -> Result<Prediction> {
    let n = map.len();
    if masses.len() != n {
        return Err(GravityError::SizeMismatch {
            masses: masses.len(),
            cells: n,
        });
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || masses[i] <= 0.0 || masses[j] <= 0.0 {
                continue;
            }
            values[i * n + j] = params.g * masses[i].powf(params.alpha) * masses[j].powf(params.beta)
                / map.centroid_distance(i, j).powf(params.gamma);
        }
    }
    Ok(Prediction { n, values })
}

/// Writes `split,G,alpha,beta,gamma` with one row.
pub fn write_params<W: Write>(params: &GravityParams, split: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["split", "G", "alpha", "beta", "gamma"])?;
    w.write_record([
        split.to_string(),
        params.g.to_string(),
        params.alpha.to_string(),
        params.beta.to_string(),
        params.gamma.to_string(),
    ])?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Reads a file written by [`write_params`]; returns the split identifier too.
pub fn read_params<R: Read>(input: R) -> Result<(GravityParams, String)> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows = rdr.records();
    let row = rows
        .next()
        .ok_or_else(|| GravityError::Parse("no parameter row".into()))??;
    if rows.next().is_some() {
        return Err(GravityError::Parse("more than one parameter row".into()));
    }
    let num = |k: usize| -> Result<f64> {
        row.get(k)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GravityError::Parse(format!("column {k} is not a number")))
    };
    let params = GravityParams {
        g: num(1)?,
        alpha: num(2)?,
        beta: num(3)?,
        gamma: num(4)?,
    };
    if !(params.g > 0.0 && params.gamma.is_finite()) {
        return Err(GravityError::Parse(format!("invalid parameters {params:?}")));
    }
    Ok((params, row[0].to_string()))
}
