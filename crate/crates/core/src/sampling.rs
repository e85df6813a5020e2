//! Deterministic sampling of axis-aligned boxes.

use nalgebra::DVector;

use crate::error::{Error, Result};

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Radical inverse of `index` in base `base`.
fn radical_inverse(mut index: u64, base: u32) -> f64 {
    let b = base as u64;
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % b) as f64;
        index /= b;
        f *= inv;
    }
    r
}

/// Axis-aligned box `[lo_j, hi_j]` in state space.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "box bounds must satisfy lo < hi: {lo:?} / {hi:?}"
            )));
        }
        Ok(BoxDomain {
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        })
    }

    /// Box `[-r_j, r_j]` for each half-width `r_j`.
    pub fn symmetric(half_widths: Vec<f64>) -> Result<Self> {
        let lo = half_widths.iter().map(|r| -r).collect();
        Self::new(lo, half_widths)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    /// Maps a point of the unit cube onto the box.
    pub fn scale(&self, unit: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            unit.iter()
                .enumerate()
                .map(|(j, u)| self.lo[j] + (self.hi[j] - self.lo[j]) * u),
        )
    }

    /// The first `count` Halton points (skipping index 0, which is a corner)
    /// starting at sequence position `offset`.
    pub fn halton(&self, count: usize, offset: usize) -> Vec<DVector<f64>> {
        assert!(self.dim() <= PRIMES.len(), "Halton sampling supports up to 12 dimensions");
        (0..count)
            .map(|k| {
                let idx = (offset + k + 1) as u64;
                let unit: Vec<f64> = (0..self.dim())
                    .map(|j| radical_inverse(idx, PRIMES[j]))
                    .collect();
                self.scale(&unit)
            })
            .collect()
    }
}
