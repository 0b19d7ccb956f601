//! The unpaired two-sample dataset type.
//!
//! One sample pairs instruments with outcomes, the other pairs instruments
//! with covariates; covariates and outcomes are never observed jointly.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InstrumentKind {
    /// Categorical environments, encoded as standard basis vectors of R^m.
    OneHot,
    /// Dense continuous instrument vectors in R^m.
    Continuous,
}

/// Instrument columns of one sample.
///
/// One-hot instruments are stored as environment indices; semantically each
/// observation's instrument is the standard basis vector for its environment.
#[derive(Debug, Clone, PartialEq)]
pub enum Instruments {
    OneHot { env: Vec<usize> },
    Continuous { rows: DMatrix<f64> },
}

impl Instruments {
    pub fn len(&self) -> usize {
        match self {
            Instruments::OneHot { env } => env.len(),
            Instruments::Continuous { rows } => rows.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> InstrumentKind {
        match self {
            Instruments::OneHot { .. } => InstrumentKind::OneHot,
            Instruments::Continuous { .. } => InstrumentKind::Continuous,
        }
    }

    /// Materialize observation `i` as a dense vector in R^m.
    pub fn dense_row(&self, i: usize, m: usize) -> DVector<f64> {
        match self {
            Instruments::OneHot { env } => {
                let mut v = DVector::zeros(m);
                v[env[i]] = 1.0;
                v
            }
            Instruments::Continuous { rows } => rows.row(i).transpose(),
        }
    }
}

/// The two unpaired samples: `(instrument, outcome)` of size `n` and
/// `(instrument, covariates)` of size `ñ`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpairedDataset {
    pub m: usize,
    pub d: usize,
    /// Instruments of the outcome sample (length n).
    pub y_inst: Instruments,
    /// Outcomes (length n).
    pub y: DVector<f64>,
    /// Instruments of the covariate sample (length ñ).
    pub x_inst: Instruments,
    /// Covariates, one row per observation (ñ × d).
    pub x: DMatrix<f64>,
}

impl UnpairedDataset {
    pub fn new(
        m: usize,
        d: usize,
        y_inst: Instruments,
        y: DVector<f64>,
        x_inst: Instruments,
        x: DMatrix<f64>,
    ) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::DimensionMismatch("m and d must be positive".into()));
        }
        if y_inst.kind() != x_inst.kind() {
            return Err(Error::DimensionMismatch(
                "both samples must share the instrument kind".into(),
            ));
        }
        if y_inst.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "y sample: {} instruments vs {} outcomes",
                y_inst.len(),
                y.len()
            )));
        }
        if x_inst.len() != x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "x sample: {} instruments vs {} covariate rows",
                x_inst.len(),
                x.nrows()
            )));
        }
        if x.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "covariates have {} columns, expected d = {}",
                x.ncols(),
                d
            )));
        }
        if y.len() < 2 || x.nrows() < 2 {
            return Err(Error::DegenerateSample(
                "each sample needs at least 2 observations".into(),
            ));
        }
        for inst in [&y_inst, &x_inst] {
            match inst {
                Instruments::OneHot { env } => {
                    if let Some(&bad) = env.iter().find(|&&e| e >= m) {
                        return Err(Error::DimensionMismatch(format!(
                            "environment index {bad} out of range (m = {m})"
                        )));
                    }
                }
                Instruments::Continuous { rows } => {
                    if rows.ncols() != m {
                        return Err(Error::DimensionMismatch(format!(
                            "instrument rows have {} columns, expected m = {}",
                            rows.ncols(),
                            m
                        )));
                    }
                }
            }
        }
        if y.iter().any(|v| !v.is_finite())
            || x.iter().any(|v| !v.is_finite())
            || matches!(&y_inst, Instruments::Continuous { rows } if rows.iter().any(|v| !v.is_finite()))
            || matches!(&x_inst, Instruments::Continuous { rows } if rows.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(
                "dataset contains non-finite values".into(),
            ));
        }
        Ok(Self {
            m,
            d,
            y_inst,
            y,
            x_inst,
            x,
        })
    }

    pub fn kind(&self) -> InstrumentKind {
        self.y_inst.kind()
    }

    /// Outcome-sample size n.
    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Covariate-sample size ñ.
    pub fn n_tilde(&self) -> usize {
        self.x.nrows()
    }

    /// n + ñ, the total used in asymptotic scalings.
    pub fn n_total(&self) -> usize {
        self.n() + self.n_tilde()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UnpairedDataset {
        UnpairedDataset::new(
            2,
            1,
            Instruments::OneHot { env: vec![0, 1] },
            DVector::from_vec(vec![1.0, 3.0]),
            Instruments::OneHot { env: vec![0, 1] },
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
        )
        .unwrap()
    }

    #[test]
    fn sizes_and_kind() {
        let ds = small();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.n_tilde(), 2);
        assert_eq!(ds.n_total(), 4);
        assert_eq!(ds.kind(), InstrumentKind::OneHot);
    }

    #[test]
    fn rejects_out_of_range_environment() {
        let err = UnpairedDataset::new(
            2,
            1,
            Instruments::OneHot { env: vec![0, 2] },
            DVector::from_vec(vec![1.0, 3.0]),
            Instruments::OneHot { env: vec![0, 1] },
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn rejects_single_observation() {
        let err = UnpairedDataset::new(
            2,
            1,
            Instruments::OneHot { env: vec![0] },
            DVector::from_vec(vec![1.0]),
            Instruments::OneHot { env: vec![0, 1] },
            DMatrix::from_row_slice(2, 1, &[0.0, 2.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateSample(_)));
    }
}
