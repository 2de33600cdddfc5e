//! Rollout posterior entropy.
//!
//! A chart is reconstructed `N` times by a vision-language model; the `K`
//! reconstructions that execute are embedded into a `K × d` matrix. The rows
//! are centered, the Gram matrix `G = V_c V_cᵀ` is formed, and the Shannon
//! entropy (natural log) of its normalized spectrum is divided by `K`. Failed
//! executions therefore raise the score, and `K = 0` maps to a sentinel that
//! sorts above every finite score.
//!
//! Everything in this module is a pure function over immutable inputs.

mod jacobi;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use jacobi::{symmetric_eigenvalues, JacobiConfig, SymMatrix};

#[derive(Debug, Error, PartialEq)]
pub enum RpeError {
    #[error("embedding matrix is empty")]
    Empty,
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has dimension {got}, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("{valid} valid rows exceed {attempted} attempted rollouts")]
    TooManyRows { valid: usize, attempted: usize },
    #[error("attempted rollout count must be at least 1")]
    NoAttempts,
}

/// `K × d` matrix of reconstruction embeddings, one row per successfully
/// executed rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from row vectors. All rows must share one dimension
    /// and contain only finite values.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, RpeError> {
        let Some(first) = rows.first() else {
            return Err(RpeError::Empty);
        };
        let dim = first.as_ref().len();
        if dim == 0 {
            return Err(RpeError::ZeroDimension);
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(RpeError::RaggedRow {
                    row: r,
                    got: row.len(),
                    expected: dim,
                });
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(RpeError::NonFinite { row: r, col: c });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_finite(&self) -> Result<(), RpeError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(idx) => Err(RpeError::NonFinite {
                row: idx / self.dim,
                col: idx % self.dim,
            }),
            None => Ok(()),
        }
    }
}

/// Subtracts the column-wise mean from every row, i.e. `(I − 11ᵀ/K) V`.
pub fn center_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, RpeError> {
    if m.rows == 0 {
        return Err(RpeError::Empty);
    }
    let k = m.rows as f64;
    let mut mean = vec![0.0; m.dim];
    for i in 0..m.rows {
        for (acc, v) in mean.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= k);

    let mut data = Vec::with_capacity(m.data.len());
    for i in 0..m.rows {
        data.extend(m.row(i).iter().zip(&mean).map(|(v, mu)| v - mu));
    }
    Ok(EmbeddingMatrix {
        rows: m.rows,
        dim: m.dim,
        data,
    })
}

/// Which spectrum is normalized into a mass distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    /// Eigenvalues of `G = V_c V_cᵀ`.
    #[default]
    GramEigenvalues,
    /// Singular values of `V_c` (square roots of the Gram eigenvalues).
    /// Kept for sensitivity checks.
    CenteredSingularValues,
}

/// What to report when no rollout executed successfully.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroValidPolicy {
    #[default]
    SentinelMax,
    DropRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpeConfig {
    pub spectrum: SpectrumSource,
    pub zero_valid: ZeroValidPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSummary {
    /// Nonincreasing, clamped at zero. Length `K`.
    pub singular_values: Vec<f64>,
    /// Empty when the total mass is degenerate.
    pub mass_distribution: Vec<f64>,
    /// Nats.
    pub entropy: f64,
}

/// Spectrum and entropy of the Gram matrix of an already centered matrix.
pub fn gram_spectrum(centered: &EmbeddingMatrix) -> Result<SpectralSummary, RpeError> {
    gram_spectrum_with(centered, SpectrumSource::GramEigenvalues)
}

pub fn gram_spectrum_with(
    centered: &EmbeddingMatrix,
    source: SpectrumSource,
) -> Result<SpectralSummary, RpeError> {
    centered.check_finite()?;
    let k = centered.rows;
    let gram = SymMatrix::from_fn(k, |i, j| {
        centered
            .row(i)
            .iter()
            .zip(centered.row(j))
            .map(|(a, b)| a * b)
            .sum()
    });
    let mut values: Vec<f64> = symmetric_eigenvalues(&gram, JacobiConfig::default())
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    if source == SpectrumSource::CenteredSingularValues {
        values.iter_mut().for_each(|v| *v = v.sqrt());
    }
    values.sort_by(|a, b| b.total_cmp(a));

    let total: f64 = values.iter().sum();
    let fro_sq = centered.frobenius_sq();
    let eps_mass = match source {
        SpectrumSource::GramEigenvalues => 1e-12 * fro_sq.max(1.0),
        // singular values scale like ‖V_c‖_F, not its square
        SpectrumSource::CenteredSingularValues => 1e-12 * fro_sq.sqrt().max(1.0),
    };
    if total <= eps_mass {
        return Ok(SpectralSummary {
            singular_values: values,
            mass_distribution: Vec::new(),
            entropy: 0.0,
        });
    }
    let mass: Vec<f64> = values.iter().map(|v| v / total).collect();
    let entropy = mass
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum::<f64>()
        .max(0.0);
    Ok(SpectralSummary {
        singular_values: values,
        mass_distribution: mass,
        entropy,
    })
}

/// Score value: finite nats-per-valid-rollout, or the all-failed sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RpeValue {
    Finite(f64),
    MaxDifficulty,
}

const SENTINEL_LABEL: &str = "max_difficulty";

impl RpeValue {
    /// `self ≥ threshold`; the sentinel passes every finite threshold.
    pub fn at_least(&self, threshold: f64) -> bool {
        match *self {
            RpeValue::Finite(v) => v >= threshold,
            RpeValue::MaxDifficulty => true,
        }
    }

    pub fn as_finite(&self) -> Option<f64> {
        match *self {
            RpeValue::Finite(v) => Some(v),
            RpeValue::MaxDifficulty => None,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        matches!(self, RpeValue::MaxDifficulty)
    }
}

impl PartialOrd for RpeValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (RpeValue::Finite(a), RpeValue::Finite(b)) => a.partial_cmp(b),
            (RpeValue::Finite(_), RpeValue::MaxDifficulty) => Some(Ordering::Less),
            (RpeValue::MaxDifficulty, RpeValue::Finite(_)) => Some(Ordering::Greater),
            (RpeValue::MaxDifficulty, RpeValue::MaxDifficulty) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for RpeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RpeValue::Finite(v) => write!(f, "{v}"),
            RpeValue::MaxDifficulty => f.write_str(SENTINEL_LABEL),
        }
    }
}

impl Serialize for RpeValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RpeValue::Finite(v) => s.serialize_f64(*v),
            RpeValue::MaxDifficulty => s.serialize_str(SENTINEL_LABEL),
        }
    }
}

impl<'de> Deserialize<'de> for RpeValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Label(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(RpeValue::Finite(v)),
            Raw::Label(l) if l == SENTINEL_LABEL => Ok(RpeValue::MaxDifficulty),
            Raw::Label(l) => Err(serde::de::Error::custom(format!("unknown rpe label {l:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpeScore {
    pub value: RpeValue,
    pub valid_count: usize,
    pub attempted_count: usize,
    /// Two or fewer valid rollouts out of a larger attempt budget always
    /// score 0 (rank ≤ 1 after centering) regardless of how many failed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_valid: bool,
}

/// Scores one chart. `embeddings = None` means every rollout failed.
///
/// Returns `Ok(None)` only under [`ZeroValidPolicy::DropRecord`] with `K = 0`.
pub fn rpe(
    attempted: usize,
    embeddings: Option<&EmbeddingMatrix>,
    cfg: &RpeConfig,
) -> Result<Option<RpeScore>, RpeError> {
    if attempted == 0 {
        return Err(RpeError::NoAttempts);
    }
    let Some(m) = embeddings.filter(|m| m.rows > 0) else {
        return Ok(match cfg.zero_valid {
            ZeroValidPolicy::SentinelMax => Some(RpeScore {
                value: RpeValue::MaxDifficulty,
                valid_count: 0,
                attempted_count: attempted,
                low_valid: false,
            }),
            ZeroValidPolicy::DropRecord => None,
        });
    };
    if m.rows > attempted {
        return Err(RpeError::TooManyRows {
            valid: m.rows,
            attempted,
        });
    }
    let centered = center_rows(m)?;
    let spectrum = gram_spectrum_with(&centered, cfg.spectrum)?;
    Ok(Some(RpeScore {
        value: RpeValue::Finite(spectrum.entropy / m.rows as f64),
        valid_count: m.rows,
        attempted_count: attempted,
        low_valid: m.rows <= 2 && m.rows < attempted,
    }))
}

/// Upper bound of the finite score for `k` valid rollouts: `ln(K−1)/K`.
pub fn finite_upper_bound(k: usize) -> f64 {
    if k < 2 {
        0.0
    } else {
        ((k - 1) as f64).ln() / k as f64
    }
}

/// Column sums must vanish after centering up to this tolerance.
pub fn centering_tolerance(m: &EmbeddingMatrix) -> f64 {
    1e-10 * m.rows as f64 * m.max_abs().max(f64::MIN_POSITIVE)
}
