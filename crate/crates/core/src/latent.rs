//! Flat latent vectors with an optional square-grid layout.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Vector,
    /// `G x G` image stored row-major.
    Grid(usize),
}

/// A clean or noisy sample `z`. All entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    values: Vec<f64>,
    layout: Layout,
}

impl Latent {
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "latent")?;
        if values.is_empty() {
            return Err(Error::Layout("latent must have at least one value".into()));
        }
        Ok(Self {
            values,
            layout: Layout::Vector,
        })
    }

    pub fn grid(values: Vec<f64>, side: usize) -> Result<Self> {
        check_finite(&values, "latent")?;
        if side == 0 || values.len() != side * side {
            return Err(Error::Layout(format!(
                "grid layout {side}x{side} needs {} values, got {}",
                side * side,
                values.len()
            )));
        }
        Ok(Self {
            values,
            layout: Layout::Grid(side),
        })
    }

    pub fn with_layout(values: Vec<f64>, layout: Layout) -> Result<Self> {
        match layout {
            Layout::Vector => Self::vector(values),
            Layout::Grid(side) => Self::grid(values, side),
        }
    }

    /// Same layout as `self`, new values.
    pub fn like(&self, values: Vec<f64>) -> Result<Self> {
        check_len(self.values.len(), values.len())?;
        Self::with_layout(values, self.layout)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            layout: Layout::Vector,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn grid_side(&self) -> Option<usize> {
        match self.layout {
            Layout::Grid(side) => Some(side),
            Layout::Vector => None,
        }
    }
}

impl AsRef<[f64]> for Latent {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    check_len(a.len(), b.len())
}
