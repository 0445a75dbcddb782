//! Generalized coordinates q = [x, y, θ, q_f] and their rates.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::PlatformPose;

/// Platform pose followed by the modal coordinates of links 1..3, each block
/// of length `n`, plus the matching rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedState {
    pub q: DVector<f64>,
    pub q_dot: DVector<f64>,
}

impl GeneralizedState {
    pub fn new(q: DVector<f64>, q_dot: DVector<f64>) -> Result<Self> {
        if q.len() < 3 || !(q.len() - 3).is_multiple_of(3) {
            return Err(Error::Domain(format!("coordinate vector length {} is not 3 + 3n", q.len())));
        }
        if q_dot.len() != q.len() {
            return Err(Error::Dimension { expected: q.len(), got: q_dot.len() });
        }
        Ok(Self { q, q_dot })
    }

    /// State at rest with the given pose and zero deformation.
    pub fn at_rest(pose: PlatformPose, n: usize) -> Self {
        let mut q = DVector::zeros(3 + 3 * n);
        q.fixed_rows_mut::<3>(0).copy_from(&pose.to_vector());
        Self { q_dot: DVector::zeros(q.len()), q }
    }

    pub fn n_modes(&self) -> usize {
        (self.q.len() - 3) / 3
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn pose(&self) -> PlatformPose {
        PlatformPose::from_slice(&self.q.as_slice()[..3])
    }

    pub fn pose_rate(&self) -> Vector3<f64> {
        self.q_dot.fixed_rows::<3>(0).into_owned()
    }

    pub fn q_f(&self) -> &[f64] {
        &self.q.as_slice()[3..]
    }

    pub fn q_f_dot(&self) -> &[f64] {
        &self.q_dot.as_slice()[3..]
    }

    /// Modal coordinates of one link (0-based).
    pub fn link_q_f(&self, link: usize) -> &[f64] {
        let n = self.n_modes();
        &self.q.as_slice()[3 + link * n..3 + (link + 1) * n]
    }

    pub fn link_q_f_dot(&self, link: usize) -> &[f64] {
        let n = self.n_modes();
        &self.q_dot.as_slice()[3 + link * n..3 + (link + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let q = DVector::from_iterator(9, (0..9).map(|v| v as f64));
        let s = GeneralizedState::new(q.clone(), q * 2.0).unwrap();
        assert_eq!(s.n_modes(), 2);
        assert_eq!(s.pose(), PlatformPose::new(0.0, 1.0, 2.0));
        assert_eq!(s.link_q_f(1), &[5.0, 6.0]);
        assert_eq!(s.link_q_f_dot(2), &[14.0, 16.0]);
        assert!(GeneralizedState::new(DVector::zeros(5), DVector::zeros(5)).is_err());
        assert!(GeneralizedState::new(DVector::zeros(6), DVector::zeros(3)).is_err());
    }
}
