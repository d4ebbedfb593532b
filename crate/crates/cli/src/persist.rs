//! JSON persistence of fitted score matrices.

use std::path::Path;

use btlinfer::geometry::{ScoreMatrix, TangentFrame};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub n: usize,
    pub method: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub seed: u64,
}

/// Row-major `rows × cols` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Array2 {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> CliResult<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(CliError::Parse(format!("array of shape {}×{} holds {} values", self.rows, self.cols, self.data.len())));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedModel {
    pub format_version: String,
    pub model_names: Vec<String>,
    pub category_names: Vec<String>,
    pub rank: usize,
    pub bound: f64,
    pub u: Array2,
    pub singular_values: Vec<f64>,
    pub v: Array2,
    /// The fitted score matrix itself; after clipping it need not equal `UΣVᵀ`.
    pub scores: Array2,
    pub metadata: FitMetadata,
}

impl PersistedModel {
    pub fn new(
        model_names: Vec<String>,
        category_names: Vec<String>,
        estimate: &ScoreMatrix,
        frame: &TangentFrame,
        metadata: FitMetadata,
    ) -> CliResult<Self> {
        let p = Self {
            format_version: FORMAT_VERSION.to_string(),
            model_names,
            category_names,
            rank: frame.rank(),
            bound: estimate.bound(),
            u: Array2::from_matrix(frame.u()),
            singular_values: frame.singular_values().iter().copied().collect(),
            v: Array2::from_matrix(frame.v()),
            scores: Array2::from_matrix(estimate.entries()),
            metadata,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> CliResult<()> {
        let major = self.format_version.split('.').next().unwrap_or("");
        if major != FORMAT_VERSION.split('.').next().unwrap_or("") {
            return Err(CliError::Parse(format!("unsupported format_version {:?}", self.format_version)));
        }
        let (d1, d2) = (self.model_names.len(), self.category_names.len());
        let shape_ok = self.scores.rows == d1
            && self.scores.cols == d2
            && self.u.rows == d1
            && self.u.cols == self.rank
            && self.v.rows == d2
            && self.v.cols == self.rank
            && self.singular_values.len() == self.rank;
        if !shape_ok {
            return Err(CliError::Parse("persisted arrays do not match the name tables and rank".into()));
        }
        self.score_matrix()?;
        Ok(())
    }

    pub fn score_matrix(&self) -> CliResult<ScoreMatrix> {
        ScoreMatrix::new(self.scores.to_matrix()?, self.bound).map_err(|e| CliError::Parse(format!("persisted scores: {e}")))
    }

    pub fn frame(&self) -> CliResult<TangentFrame> {
        let s = nalgebra::DVector::from_vec(self.singular_values.clone());
        TangentFrame::new(self.u.to_matrix()?, self.v.to_matrix()?, s).map_err(|e| CliError::Parse(format!("persisted frame: {e}")))
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> CliResult<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}
