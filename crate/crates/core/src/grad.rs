use std::fmt;

use crate::error::{Error, Result};

/// Where a gradient came from. Exact oracle outputs, enumerated expectations
/// of the truncated estimator and single-trajectory estimates are kept apart
/// so they cannot be mixed by accident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Exact,
    ExpectedTruncated,
    Sampled,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Exact => "exact",
            Provenance::ExpectedTruncated => "expected-truncated",
            Provenance::Sampled => "sampled",
        })
    }
}

/// A vector shaped like the policy logits, tagged with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    entries: Vec<f64>,
    provenance: Provenance,
}

impl GradVector {
    pub fn new(entries: Vec<f64>, provenance: Provenance) -> Self {
        Self {
            entries,
            provenance,
        }
    }

    pub fn zeros(len: usize, provenance: Provenance) -> Self {
        Self::new(vec![0.0; len], provenance)
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|x| x.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.entries.len() == expected {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected,
                actual: self.entries.len(),
            })
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &GradVector) -> Result<()> {
        other.check_len(self.len())?;
        for (x, y) in self.entries.iter_mut().zip(&other.entries) {
            *x += scale * y;
        }
        Ok(())
    }

    /// Entrywise mean of equally shaped vectors, summed in slice order.
    /// The result takes the provenance of the inputs when they agree.
    pub fn mean(vectors: &[GradVector]) -> Result<GradVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::InsufficientData("mean of zero gradients".into()))?;
        let mut acc = GradVector::zeros(first.len(), first.provenance);
        for v in vectors {
            v.check_len(acc.len())?;
            if v.provenance != acc.provenance {
                return Err(Error::Config(format!(
                    "cannot average {} and {} gradients",
                    acc.provenance, v.provenance
                )));
            }
            for (a, x) in acc.entries.iter_mut().zip(&v.entries) {
                *a += x;
            }
        }
        let n = vectors.len() as f64;
        for a in &mut acc.entries {
            *a /= n;
        }
        Ok(acc)
    }

    /// `‖self − other‖∞`.
    pub fn max_abs_diff(&self, other: &GradVector) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_rejects_mixed_provenance() {
        let a = GradVector::zeros(2, Provenance::Exact);
        let b = GradVector::zeros(2, Provenance::Sampled);
        assert!(GradVector::mean(&[a, b]).is_err());
    }

    #[test]
    fn mean_of_two() {
        let a = GradVector::new(vec![1.0, 2.0], Provenance::Sampled);
        let b = GradVector::new(vec![3.0, -2.0], Provenance::Sampled);
        let m = GradVector::mean(&[a, b]).unwrap();
        assert_eq!(m.entries(), &[2.0, 0.0]);
        assert_eq!(m.provenance(), Provenance::Sampled);
    }

    #[test]
    fn add_scaled_checks_shape() {
        let mut a = GradVector::zeros(2, Provenance::Exact);
        let b = GradVector::zeros(3, Provenance::Exact);
        assert!(matches!(
            a.add_scaled(1.0, &b),
            Err(Error::ShapeMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }
}
