//! Computed-torque control laws, the joint-space PD baseline and the
//! Lyapunov diagnostic.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::EomMatrices;
use crate::error::{Error, Result};
use crate::modal::BoundaryCondition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerKind {
    ComputedTorque,
    JointPd,
}

/// Dynamic model used for compensation inside the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompensationModel {
    /// Clamped-free assumed modes (the identified shape).
    Developed,
    /// No link flexibility.
    Rigid,
    /// Clamped-pinned assumed modes.
    ClampedPinned,
}

impl CompensationModel {
    pub const ALL: [CompensationModel; 3] =
        [CompensationModel::Developed, CompensationModel::Rigid, CompensationModel::ClampedPinned];

    /// Boundary condition and modal order of the compensation basis.
    pub fn basis(self, n_ctrl: usize) -> (BoundaryCondition, usize) {
        match self {
            CompensationModel::Developed => (BoundaryCondition::ClampedFree, n_ctrl),
            CompensationModel::Rigid => (BoundaryCondition::ClampedFree, 0),
            CompensationModel::ClampedPinned => (BoundaryCondition::ClampedPinned, n_ctrl),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CompensationModel::Developed => "developed",
            CompensationModel::Rigid => "rigid",
            CompensationModel::ClampedPinned => "clamped-pinned",
        }
    }
}

impl FromStr for CompensationModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "developed" | "cf" => Ok(CompensationModel::Developed),
            "rigid" => Ok(CompensationModel::Rigid),
            "clamped-pinned" | "cp" => Ok(CompensationModel::ClampedPinned),
            _ => Err(Error::Config(format!("unknown compensation model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLawConfig {
    pub kind: ControllerKind,
    pub kp: f64,
    pub kd: f64,
    pub compensation: CompensationModel,
    pub control_rate: f64,
    pub observer_rate: f64,
    pub n_ctrl: usize,
}

impl ControlLawConfig {
    /// Model-based controller with K_p = 200, K_d = 1 at 1 kHz.
    pub fn proposed() -> Self {
        Self {
            kind: ControllerKind::ComputedTorque,
            kp: 200.0,
            kd: 1.0,
            compensation: CompensationModel::Developed,
            control_rate: 1000.0,
            observer_rate: 1000.0,
            n_ctrl: 3,
        }
    }

    /// Joint-space PD baseline with K_p = 200, K_d = 0.2.
    pub fn joint_pd() -> Self {
        Self { kind: ControllerKind::JointPd, kd: 0.2, ..Self::proposed() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kp > 0.0 && self.kd > 0.0) {
            return Err(Error::Validation("Kp > 0 and Kd > 0".into()));
        }
        if !(self.observer_rate > 0.0 && self.control_rate >= self.observer_rate) {
            return Err(Error::Validation("control_rate >= observer_rate > 0".into()));
        }
        Ok(())
    }
}

/// e = q_d − q̂ and its rate. Desired modal coordinates are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingError {
    pub e: DVector<f64>,
    pub e_dot: DVector<f64>,
}

impl TrackingError {
    /// Error against a desired pose trajectory with zero desired deformation.
    pub fn from_desired(q_d_e: &Vector3<f64>, qd_d_e: &Vector3<f64>, q: &DVector<f64>, q_dot: &DVector<f64>) -> Self {
        let mut e = -q;
        let mut e_dot = -q_dot;
        for k in 0..3 {
            e[k] += q_d_e[k];
            e_dot[k] += qd_d_e[k];
        }
        Self { e, e_dot }
    }

    pub fn e_e(&self) -> Vector3<f64> {
        self.e.fixed_rows::<3>(0).into_owned()
    }

    pub fn e_f(&self) -> DVector<f64> {
        self.e.rows(3, self.e.len() - 3).into_owned()
    }

    pub fn e_dot_e(&self) -> Vector3<f64> {
        self.e_dot.fixed_rows::<3>(0).into_owned()
    }

    pub fn e_dot_f(&self) -> DVector<f64> {
        self.e_dot.rows(3, self.e_dot.len() - 3).into_owned()
    }
}

/// Fully actuated computed torque, returning [τ_a; τ_f].
///
/// Solves Jᵀτ = M̂(q̈_d + K_p e + K_d ė) + Ĉq̇ + K̂q, which gives the error
/// dynamics ë + K_d ė + K_p e = 0 for an exact model.
pub fn computed_torque_full(
    eom: &EomMatrices,
    error: &TrackingError,
    q: &DVector<f64>,
    q_dot: &DVector<f64>,
    qdd_desired: &DVector<f64>,
    kp: f64,
    kd: f64,
) -> Result<DVector<f64>> {
    let rhs = &eom.m_hat * (qdd_desired + kp * &error.e + kd * &error.e_dot) + &eom.c_hat * q_dot + &eom.k_hat * q;
    eom.jacobians.j.transpose().lu().solve(&rhs).ok_or_else(|| Error::Singular("Jᵀ is not invertible".into()))
}

/// Under-actuated computed torque on the three actuated joints, from the
/// pose rows of the reduced equations with zero desired modal acceleration.
pub fn computed_torque_actuated(
    eom: &EomMatrices,
    error: &TrackingError,
    q_dot: &DVector<f64>,
    qdd_e_desired: &Vector3<f64>,
    kp: f64,
    kd: f64,
) -> Result<[f64; 3]> {
    let m_rr = eom.m_rr();
    let m_rf = eom.m_rf();
    let c_rr = eom.c_rr();
    let c_rf = eom.c_rf();
    let nf = q_dot.len() - 3;
    let qd_e = q_dot.rows(0, 3).into_owned();
    let qd_f = q_dot.rows(3, nf).into_owned();
    let mut rhs: DVector<f64> = &m_rr
        * (DVector::from_column_slice(qdd_e_desired.as_slice())
            + kp * DVector::from_column_slice(error.e_e().as_slice())
            + kd * DVector::from_column_slice(error.e_dot_e().as_slice()))
        + &c_rr * qd_e;
    if nf > 0 {
        rhs += &m_rf * (kp * error.e_f() + kd * error.e_dot_f()) + &c_rf * qd_f;
    }
    let j_ax: Matrix3<f64> = eom.jacobians.j_ax();
    let tau = j_ax
        .transpose()
        .lu()
        .solve(&Vector3::new(rhs[0], rhs[1], rhs[2]))
        .ok_or_else(|| Error::Singular("J_axᵀ is not invertible".into()))?;
    Ok([tau[0], tau[1], tau[2]])
}

/// Decoupled joint PD, τ = K_p(q_a^d − q_a) − K_d q̇_a.
pub fn joint_pd(q_a_desired: &[f64; 3], q_a: &[f64; 3], q_a_dot: &[f64; 3], kp: f64, kd: f64) -> [f64; 3] {
    std::array::from_fn(|i| kp * (q_a_desired[i] - q_a[i]) - kd * q_a_dot[i])
}

/// V = ½ėᵀė + ½K_p eᵀe.
pub fn lyapunov_value(error: &TrackingError, kp: f64) -> f64 {
    0.5 * error.e_dot.norm_squared() + 0.5 * kp * error.e.norm_squared()
}

/// V̇ along ë + K_d ė + K_p e = 0, which equals −K_d ėᵀė.
pub fn lyapunov_rate(error: &TrackingError, e_ddot: &DVector<f64>, kp: f64) -> f64 {
    error.e_dot.dot(&(e_ddot + kp * &error.e))
}

/// Pads a matrix or vector block with zeros; helper for tests.
#[doc(hidden)]
pub fn zero_padded(m: &DMatrix<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicModel;
    use crate::kinematics::Mechanism;
    use crate::modal::ModalBasis;
    use crate::params::{MechanismParams, PlatformPose};
    use crate::state::GeneralizedState;

    fn model(n: usize) -> DynamicModel {
        let p = MechanismParams::table1();
        let b = ModalBasis::new(BoundaryCondition::ClampedFree, p.l1, n).unwrap();
        DynamicModel::new(Mechanism::new(p, b))
    }

    #[test]
    fn equilibrium_feedforward_balances_stiffness() {
        let m = model(2);
        let mut st = GeneralizedState::at_rest(PlatformPose::new(0.02, 0.01, 0.0), 2);
        st.q[3] = 1e-3;
        st.q[6] = -5e-4;
        let eom = m.assemble_eom(&st).unwrap();
        let err = TrackingError { e: DVector::zeros(9), e_dot: DVector::zeros(9) };
        let tau = computed_torque_full(&eom, &err, &st.q, &st.q_dot, &DVector::zeros(9), 200.0, 1.0).unwrap();
        let q = eom.jacobians.j.transpose() * &tau;
        assert!((q - &eom.k_hat * &st.q).amax() < 1e-12);
    }

    #[test]
    fn actuated_law_reduces_to_rigid_block() {
        let m = model(3);
        let mut st = GeneralizedState::at_rest(PlatformPose::new(0.05, -0.02, 0.1), 3);
        st.q_dot[0] = 0.1;
        st.q_dot[5] = 0.02;
        let eom = m.assemble_eom(&st).unwrap();
        let mut err = TrackingError { e: DVector::zeros(12), e_dot: DVector::zeros(12) };
        err.e[0] = 0.01;
        err.e_dot[2] = -0.05;
        let qdd = Vector3::new(0.3, 0.0, -0.1);
        let tau = computed_torque_actuated(&eom, &err, &st.q_dot, &qdd, 200.0, 1.0).unwrap();
        let rhs = eom.m_rr() * DVector::from_column_slice((qdd + 200.0 * err.e_e() + err.e_dot_e()).as_slice())
            + eom.c_rr() * st.q_dot.rows(0, 3)
            + eom.c_rf() * st.q_dot.rows(3, 9);
        let lhs = eom.jacobians.j_ax().transpose() * Vector3::from(tau);
        for k in 0..3 {
            assert!((lhs[k] - rhs[k]).abs() < 1e-12);
        }
        // zero gains and static target leave only the velocity terms
        let zero = computed_torque_actuated(&eom, &err, &st.q_dot, &Vector3::zeros(), 0.0, 0.0).unwrap();
        let c_only = eom.c_rr() * st.q_dot.rows(0, 3) + eom.c_rf() * st.q_dot.rows(3, 9);
        let lhs = eom.jacobians.j_ax().transpose() * Vector3::from(zero);
        for k in 0..3 {
            assert!((lhs[k] - c_only[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_pd_is_decoupled() {
        assert_eq!(joint_pd(&[0.1; 3], &[0.1; 3], &[0.0; 3], 200.0, 0.2), [0.0; 3]);
        let tau = joint_pd(&[1.0, 0.0, 0.0], &[0.0; 3], &[0.0; 3], 200.0, 0.2);
        assert_eq!(tau, [200.0, 0.0, 0.0]);
        let tau = joint_pd(&[0.0; 3], &[0.0; 3], &[0.0, 2.0, 0.0], 200.0, 0.2);
        assert_eq!(tau, [0.0, -0.4, 0.0]);
    }

    #[test]
    fn lyapunov_basics() {
        let zero = TrackingError { e: DVector::zeros(4), e_dot: DVector::zeros(4) };
        assert_eq!(lyapunov_value(&zero, 200.0), 0.0);
        let err = TrackingError {
            e: DVector::from_vec(vec![0.1, -0.2, 0.0, 0.05]),
            e_dot: DVector::from_vec(vec![0.3, 0.1, -0.2, 0.0]),
        };
        let (kp, kd) = (50.0, 10.0);
        let e_ddot = -kp * &err.e - kd * &err.e_dot;
        let rate = lyapunov_rate(&err, &e_ddot, kp);
        assert!((rate + kd * err.e_dot.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(ControlLawConfig::proposed().validate().is_ok());
        let mut c = ControlLawConfig::joint_pd();
        c.kd = 0.0;
        assert!(c.validate().is_err());
        let mut c = ControlLawConfig::proposed();
        c.observer_rate = 2000.0;
        assert!(c.validate().is_err());
        assert_eq!("cp".parse::<CompensationModel>().unwrap(), CompensationModel::ClampedPinned);
    }
}
