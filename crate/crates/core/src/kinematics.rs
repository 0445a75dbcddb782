//! Inverse kinematics with flexible-link corrections and the velocity
//! Jacobians J and S.
//!
//! Every branch is the chain A → B → C, with B = A + l1·u + δ·v the deformed
//! tip of the actuation link and C = B + l2·w. The tip deflection δ and tip
//! slope β1 depend on the modal coordinates alone, so the branch triangle
//! A B C is known before any joint angle is and the inverse problem has a
//! closed form.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modal::ModalBasis;
use crate::params::{branch_unit_vectors, platform_corner_positions, MechanismParams, PlatformPose};
use crate::state::GeneralizedState;

/// Which of the two circle intersections the elbow B_i takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ElbowMode {
    /// Elbows turn the same way on every branch (the nominal assembly).
    #[default]
    Positive,
    Negative,
}

impl ElbowMode {
    fn sign(self) -> f64 {
        match self {
            ElbowMode::Positive => 1.0,
            ElbowMode::Negative => -1.0,
        }
    }
}

/// Joint angles and auxiliary branch angles from the inverse problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkSolution {
    pub q_a: [f64; 3],
    pub q_p: [f64; 3],
    /// Tip slope of each actuation link.
    pub beta1: [f64; 3],
    /// Angle of chord A_iB_i from the undeformed link direction.
    pub beta2: [f64; 3],
    /// beta2 − beta1.
    pub beta3: [f64; 3],
    pub angle_abc: [f64; 3],
}

/// Geometry of one solved branch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Branch {
    pub q_a: f64,
    pub q_p: f64,
    pub delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub angle_abc: f64,
    pub u: Vector2<f64>,
    pub v: Vector2<f64>,
    pub w: Vector2<f64>,
    pub w_perp: Vector2<f64>,
}

impl Branch {
    /// σ = β1 + q_p, the intermediate-link angle relative to u.
    pub fn sigma(&self) -> f64 {
        self.beta1 + self.q_p
    }

    /// l1 v·w − δ u·w; vanishes at a branch singularity.
    pub fn projection_denominator(&self, l1: f64) -> f64 {
        l1 * self.v.dot(&self.w) - self.delta * self.u.dot(&self.w)
    }
}

/// The manipulator together with the modal basis of its actuation links.
#[derive(Debug, Clone)]
pub struct Mechanism {
    pub params: MechanismParams,
    pub basis: ModalBasis,
    pub elbow: ElbowMode,
    tip_values: DVector<f64>,
    tip_slopes: DVector<f64>,
}

/// J and S at one state, with the 3×3 block J_ax exposed.
#[derive(Debug, Clone)]
pub struct Jacobians {
    /// (3+3n)×(3+3n), maps q̇ to [q̇_a; q̇_f].
    pub j: DMatrix<f64>,
    /// (6+3n)×(3+3n), maps q̇ to q̇_w = [q̇_a; q̇_p; q̇_f].
    pub s: DMatrix<f64>,
}

impl Jacobians {
    pub fn j_ax(&self) -> nalgebra::Matrix3<f64> {
        self.j.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn j_af(&self) -> DMatrix<f64> {
        self.j.view((0, 3), (3, self.j.ncols() - 3)).into_owned()
    }
}

const SINGULAR_TOL: f64 = 1e-9;
const FORWARD_TOL: f64 = 1e-13;
const FORWARD_MAX_ITER: usize = 20;

impl Mechanism {
    pub fn new(params: MechanismParams, basis: ModalBasis) -> Self {
        let tip_values = basis.tip_values();
        let tip_slopes = basis.tip_slopes();
        Self { params, basis, elbow: ElbowMode::default(), tip_values, tip_slopes }
    }

    pub fn with_elbow(mut self, elbow: ElbowMode) -> Self {
        self.elbow = elbow;
        self
    }

    pub fn n_modes(&self) -> usize {
        self.basis.n()
    }

    /// Dimension 3 + 3n of the generalized coordinates.
    pub fn dim(&self) -> usize {
        3 + 3 * self.n_modes()
    }

    pub(crate) fn tip_values(&self) -> &DVector<f64> {
        &self.tip_values
    }

    pub(crate) fn tip_slopes(&self) -> &DVector<f64> {
        &self.tip_slopes
    }

    /// Tip deflection and tip slope of one link.
    pub fn tip_state(&self, q_f_link: &[f64]) -> (f64, f64) {
        let q = DVector::from_column_slice(q_f_link);
        (self.tip_values.dot(&q), self.tip_slopes.dot(&q))
    }

    fn check_q_f(&self, q_f: &[f64]) -> Result<()> {
        let n = 3 * self.n_modes();
        if q_f.len() != n {
            return Err(Error::Dimension { expected: n, got: q_f.len() });
        }
        Ok(())
    }

    pub(crate) fn solve_branch(&self, i: usize, corner: Vector2<f64>, q_f_link: &[f64]) -> Result<Branch> {
        let p = &self.params;
        let (delta, beta1) = self.tip_state(q_f_link);
        if delta.abs() >= p.l1 / 5.0 {
            return Err(Error::Domain(format!("tip deflection {delta:.4} m on link {} exceeds l1/5", i + 1)));
        }
        let ac = corner - p.base_joint(i);
        let dist = ac.norm();
        let chord = (p.l1 * p.l1 + delta * delta).sqrt();
        if dist > chord + p.l2 || dist < (chord - p.l2).abs() {
            return Err(Error::Unreachable(format!(
                "branch {}: |AC| = {dist:.6} m outside [{:.6}, {:.6}]",
                i + 1,
                (chord - p.l2).abs(),
                chord + p.l2
            )));
        }
        let cos_abc = (chord * chord + p.l2 * p.l2 - dist * dist) / (2.0 * chord * p.l2);
        let angle_abc = cos_abc.clamp(-1.0, 1.0).acos();
        if angle_abc.sin() < SINGULAR_TOL {
            return Err(Error::Singular(format!("branch {} is fully stretched or folded", i + 1)));
        }
        let beta2 = delta.atan2(p.l1);
        let q_p = self.elbow.sign() * (PI - angle_abc) + beta2 - beta1;

        // C in the frame of the undeformed actuation link.
        let sigma = beta1 + q_p;
        let c = p.l1 + p.l2 * sigma.cos();
        let d = delta + p.l2 * sigma.sin();
        let raw = ac.y.atan2(ac.x) - d.atan2(c);
        let center = if i < 2 { PI } else { 2.0 * PI };
        let psi = raw - 2.0 * PI * ((raw - center) / (2.0 * PI)).round();
        let q_a = psi - p.alpha[i];

        let (u, v) = branch_unit_vectors(p, q_a, i);
        let gamma = psi + sigma;
        let w = Vector2::new(gamma.cos(), gamma.sin());
        let w_perp = Vector2::new(-gamma.sin(), gamma.cos());
        let branch = Branch { q_a, q_p, delta, beta1, beta2, angle_abc, u, v, w, w_perp };
        if branch.projection_denominator(p.l1).abs() < SINGULAR_TOL {
            return Err(Error::Singular(format!("branch {} velocity projection vanishes", i + 1)));
        }
        Ok(branch)
    }

    pub(crate) fn solve_branches(&self, pose: &PlatformPose, q_f: &[f64]) -> Result<[Branch; 3]> {
        self.check_q_f(q_f)?;
        let n = self.n_modes();
        let corners = platform_corner_positions(&self.params, pose);
        let b0 = self.solve_branch(0, corners[0], &q_f[..n])?;
        let b1 = self.solve_branch(1, corners[1], &q_f[n..2 * n])?;
        let b2 = self.solve_branch(2, corners[2], &q_f[2 * n..])?;
        Ok([b0, b1, b2])
    }

    /// Actuation and passive joint angles realising `pose` with link
    /// deformation `q_f` (length 3n, link-major).
    pub fn inverse_kinematics(&self, pose: &PlatformPose, q_f: &[f64]) -> Result<IkSolution> {
        let b = self.solve_branches(pose, q_f)?;
        Ok(IkSolution {
            q_a: b.map(|x| x.q_a),
            q_p: b.map(|x| x.q_p),
            beta1: b.map(|x| x.beta1),
            beta2: b.map(|x| x.beta2),
            beta3: b.map(|x| x.beta2 - x.beta1),
            angle_abc: b.map(|x| x.angle_abc),
        })
    }

    /// Platform joint positions reached by the serial chains.
    pub fn forward_position(&self, q_a: &[f64; 3], q_p: &[f64; 3], q_f: &[f64]) -> Result<[Vector2<f64>; 3]> {
        self.check_q_f(q_f)?;
        let p = &self.params;
        let n = self.n_modes();
        Ok(std::array::from_fn(|i| {
            let (delta, beta1) = self.tip_state(&q_f[i * n..(i + 1) * n]);
            let (u, v) = branch_unit_vectors(p, q_a[i], i);
            let gamma = p.alpha[i] + q_a[i] + beta1 + q_p[i];
            let w = Vector2::new(gamma.cos(), gamma.sin());
            p.base_joint(i) + p.l1 * u + delta * v + p.l2 * w
        }))
    }

    /// Platform pose whose inverse kinematics gives the joint angles `q_a`
    /// under deformation `q_f`. Newton iteration from `guess` on the
    /// closed-form inverse map with a central-difference Jacobian.
    pub fn pose_from_joints(&self, q_a: &[f64; 3], q_f: &[f64], guess: &PlatformPose) -> Result<PlatformPose> {
        const STEP: f64 = 1e-7;
        let residual = |x: &Vector3<f64>| -> Result<Vector3<f64>> {
            let sol = self.inverse_kinematics(&PlatformPose::from(*x), q_f)?;
            Ok(Vector3::from_fn(|i, _| sol.q_a[i] - q_a[i]))
        };
        let mut x = guess.to_vector();
        for _ in 0..FORWARD_MAX_ITER {
            let r = residual(&x)?;
            if r.amax() < FORWARD_TOL {
                return Ok(PlatformPose::from(x));
            }
            let mut jac = Matrix3::zeros();
            for k in 0..3 {
                let mut hi = x;
                let mut lo = x;
                hi[k] += STEP;
                lo[k] -= STEP;
                jac.set_column(k, &((residual(&hi)? - residual(&lo)?) / (2.0 * STEP)));
            }
            let dx = jac.lu().solve(&r).ok_or_else(|| Error::Singular("forward kinematics Jacobian".into()))?;
            x -= dx;
        }
        Err(Error::Numerical(format!("forward kinematics did not converge in {FORWARD_MAX_ITER} iterations")))
    }

    /// Per-branch linearized closure: G·[dq_a; dq_p] = H_e·dq_e − F_f·dq_f.
    fn branch_blocks(&self, i: usize, b: &Branch, theta: f64) -> (Matrix2<f64>, nalgebra::Matrix2x3<f64>, DMatrix<f64>) {
        let p = &self.params;
        let n = self.n_modes();
        let col0 = p.l1 * b.v - b.delta * b.u + p.l2 * b.w_perp;
        let col1 = p.l2 * b.w_perp;
        let g = Matrix2::from_columns(&[col0, col1]);
        let ang = theta + p.alpha[i];
        let h_e = nalgebra::Matrix2x3::new(1.0, 0.0, -p.platform_radius * ang.sin(), 0.0, 1.0, p.platform_radius * ang.cos());
        let mut f_f = DMatrix::zeros(2, n);
        for j in 0..n {
            let col = self.tip_values[j] * b.v + p.l2 * self.tip_slopes[j] * b.w_perp;
            f_f.set_column(j, &col);
        }
        (g, h_e, f_f)
    }

    /// Rows ∂q_a/∂q and ∂q_p/∂q for one branch, as a 2×(3+3n) matrix.
    fn branch_sensitivity(&self, i: usize, b: &Branch, theta: f64) -> Result<DMatrix<f64>> {
        let n = self.n_modes();
        let (g, h_e, f_f) = self.branch_blocks(i, b, theta);
        let g_inv = g.try_inverse().ok_or_else(|| Error::Singular(format!("branch {} closure Jacobian", i + 1)))?;
        let mut rows = DMatrix::zeros(2, self.dim());
        rows.view_mut((0, 0), (2, 3)).copy_from(&(g_inv * h_e));
        if n > 0 {
            let ff = -(nalgebra::DMatrix::from_column_slice(2, 2, g_inv.as_slice()) * f_f);
            rows.view_mut((0, 3 + i * n), (2, n)).copy_from(&ff);
        }
        Ok(rows)
    }

    /// Both Jacobians at a state (only the coordinates are used).
    pub fn jacobians(&self, state: &GeneralizedState) -> Result<Jacobians> {
        let (jac, _) = self.jacobians_with_branches(state)?;
        Ok(jac)
    }

    pub(crate) fn jacobians_with_branches(&self, state: &GeneralizedState) -> Result<(Jacobians, [Branch; 3])> {
        let pose = state.pose();
        let branches = self.solve_branches(&pose, state.q_f())?;
        let dim = self.dim();
        let nf = dim - 3;
        let mut s = DMatrix::zeros(6 + nf, dim);
        for (i, b) in branches.iter().enumerate() {
            let rows = self.branch_sensitivity(i, b, pose.theta)?;
            s.row_mut(i).copy_from(&rows.row(0));
            s.row_mut(3 + i).copy_from(&rows.row(1));
        }
        for k in 0..nf {
            s[(6 + k, 3 + k)] = 1.0;
        }
        let mut j = DMatrix::zeros(dim, dim);
        j.rows_mut(0, 3).copy_from(&s.rows(0, 3));
        for k in 0..nf {
            j[(3 + k, 3 + k)] = 1.0;
        }
        let det = j.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Singular(format!("det J_ax = {det:.3e}")));
        }
        Ok((Jacobians { j, s }, branches))
    }

    /// Condition number of J_ax at a state.
    pub fn j_ax_condition(&self, state: &GeneralizedState) -> Result<f64> {
        let jac = self.jacobians(state)?;
        let sv = jac.j_ax().singular_values();
        Ok(sv.max() / sv.min())
    }

    /// Ṡ along the state's own velocity, from the time derivative of the
    /// linearized closure equations.
    pub fn s_dot(&self, state: &GeneralizedState) -> Result<DMatrix<f64>> {
        let (jac, branches) = self.jacobians_with_branches(state)?;
        Ok(self.s_dot_from(state, &jac, &branches))
    }

    pub(crate) fn s_dot_from(&self, state: &GeneralizedState, jac: &Jacobians, branches: &[Branch; 3]) -> DMatrix<f64> {
        let p = &self.params;
        let n = self.n_modes();
        let dim = self.dim();
        let pose = state.pose();
        let theta_dot = state.q_dot[2];
        let q_w_dot = &jac.s * &state.q_dot;
        let mut s_dot = DMatrix::zeros(jac.s.nrows(), dim);
        for (i, b) in branches.iter().enumerate() {
            let qf_dot = DVector::from_column_slice(state.link_q_f_dot(i));
            let psi_dot = q_w_dot[i];
            let delta_dot = self.tip_values.dot(&qf_dot);
            let gamma_dot = psi_dot + self.tip_slopes.dot(&qf_dot) + q_w_dot[3 + i];

            let (g, _, _) = self.branch_blocks(i, b, pose.theta);
            let g_inv = g.try_inverse().expect("checked in jacobians");
            let g_dot = Matrix2::from_columns(&[
                -p.l1 * psi_dot * b.u - delta_dot * b.u - b.delta * psi_dot * b.v - p.l2 * gamma_dot * b.w,
                -p.l2 * gamma_dot * b.w,
            ]);
            let ang = pose.theta + p.alpha[i];
            let mut rhs_dot = DMatrix::zeros(2, dim);
            rhs_dot[(0, 2)] = -p.platform_radius * ang.cos() * theta_dot;
            rhs_dot[(1, 2)] = -p.platform_radius * ang.sin() * theta_dot;
            for j in 0..n {
                let col = -(-self.tip_values[j] * psi_dot * b.u - p.l2 * self.tip_slopes[j] * gamma_dot * b.w);
                rhs_dot.view_mut((0, 3 + i * n + j), (2, 1)).copy_from(&col);
            }
            let mut s_b = DMatrix::zeros(2, dim);
            s_b.row_mut(0).copy_from(&jac.s.row(i));
            s_b.row_mut(1).copy_from(&jac.s.row(3 + i));
            let g_inv_d = DMatrix::from_column_slice(2, 2, g_inv.as_slice());
            let g_dot_d = DMatrix::from_column_slice(2, 2, g_dot.as_slice());
            let rows = &g_inv_d * (rhs_dot - g_dot_d * s_b);
            s_dot.row_mut(i).copy_from(&rows.row(0));
            s_dot.row_mut(3 + i).copy_from(&rows.row(1));
        }
        s_dot
    }

    /// Ṡ by central differencing S along the state's velocity.
    pub fn s_dot_finite_difference(&self, state: &GeneralizedState) -> Result<DMatrix<f64>> {
        let speed = state.q_dot.norm();
        if speed == 0.0 {
            return Ok(DMatrix::zeros(6 + 3 * self.n_modes(), self.dim()));
        }
        let h = 1e-6 / speed;
        let shifted = |sign: f64| {
            GeneralizedState::new(&state.q + sign * h * &state.q_dot, state.q_dot.clone()).and_then(|s| self.jacobians(&s))
        };
        let plus = shifted(1.0)?;
        let minus = shifted(-1.0)?;
        Ok((plus.s - minus.s) / (2.0 * h))
    }

    /// Actuation-joint rates and intermediate-link angular velocities from
    /// the platform joint velocities and the state's modal rates.
    pub fn passive_rates(&self, state: &GeneralizedState, corner_rates: &[Vector2<f64>; 3]) -> Result<([f64; 3], [f64; 3])> {
        let branches = self.solve_branches(&state.pose(), state.q_f())?;
        let l1 = self.params.l1;
        let l2 = self.params.l2;
        let mut q_a_dot = [0.0; 3];
        let mut omega2 = [0.0; 3];
        for (i, b) in branches.iter().enumerate() {
            let qf_dot = DVector::from_column_slice(state.link_q_f_dot(i));
            let delta_dot = self.tip_values.dot(&qf_dot);
            let denom = b.projection_denominator(l1);
            if denom.abs() < SINGULAR_TOL {
                return Err(Error::Singular(format!("branch {} velocity projection", i + 1)));
            }
            let rate = (corner_rates[i].dot(&b.w) - delta_dot * b.v.dot(&b.w)) / denom;
            q_a_dot[i] = rate;
            omega2[i] = (corner_rates[i] - (l1 * rate + delta_dot) * b.v + b.delta * rate * b.u).dot(&b.w_perp) / l2;
        }
        Ok((q_a_dot, omega2))
    }

    /// Actuation-joint angles and rates, as an encoder would report them.
    pub fn actuated_joints(&self, state: &GeneralizedState) -> Result<([f64; 3], [f64; 3])> {
        let ik = self.inverse_kinematics(&state.pose(), state.q_f())?;
        let (rates, _) = self.passive_rates(state, &self.corner_rates(state))?;
        Ok((ik.q_a, rates))
    }

    /// Platform joint velocities Ṗ_Ci from the pose rate.
    pub fn corner_rates(&self, state: &GeneralizedState) -> [Vector2<f64>; 3] {
        let pose = state.pose();
        let rate = state.pose_rate();
        let r = self.params.platform_radius;
        std::array::from_fn(|i| {
            let ang = pose.theta + self.params.alpha[i];
            Vector2::new(rate[0] - r * ang.sin() * rate[2], rate[1] + r * ang.cos() * rate[2])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modal::BoundaryCondition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mech(n: usize) -> Mechanism {
        let p = MechanismParams::table1();
        let b = ModalBasis::new(BoundaryCondition::ClampedFree, p.l1, n).unwrap();
        Mechanism::new(p, b)
    }

    /// Circle intersection of radius l1 about A and l2 about C; returns both
    /// candidate elbows.
    fn circle_intersections(a: Vector2<f64>, c: Vector2<f64>, l1: f64, l2: f64) -> [Vector2<f64>; 2] {
        let d = (c - a).norm();
        let along = (l1 * l1 - l2 * l2 + d * d) / (2.0 * d);
        let h = (l1 * l1 - along * along).sqrt();
        let e = (c - a) / d;
        let perp = Vector2::new(-e.y, e.x);
        [a + along * e + h * perp, a + along * e - h * perp]
    }

    #[test]
    fn pose_from_joints_inverts_inverse_kinematics() {
        let m = mech(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let pose = PlatformPose::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.15..0.15));
            let q_f: Vec<f64> = (0..6).map(|_| rng.random_range(-0.01..0.01)).collect();
            let sol = m.inverse_kinematics(&pose, &q_f).unwrap();
            let back = m.pose_from_joints(&sol.q_a, &q_f, &PlatformPose::default()).unwrap();
            assert!((back.to_vector() - pose.to_vector()).amax() < 1e-11);
        }
    }

    #[test]
    fn rigid_center_pose_matches_circle_intersection() {
        let m = mech(0);
        let sol = m.inverse_kinematics(&PlatformPose::default(), &[]).unwrap();
        let p = &m.params;
        let corners = platform_corner_positions(p, &PlatformPose::default());
        for i in 0..3 {
            assert!((sol.q_a[i] - sol.q_a[0]).abs() < 1e-12);
            assert!((sol.q_p[i] - sol.q_p[0]).abs() < 1e-12);
            assert_eq!(sol.beta1[i], 0.0);
            assert_eq!(sol.beta2[i], 0.0);
            assert_eq!(sol.beta3[i], 0.0);
            assert!((sol.q_p[i] - (PI - sol.angle_abc[i])).abs() < 1e-12);
            let a = p.base_joint(i);
            let elbows = circle_intersections(a, corners[i], p.l1, p.l2);
            let (u, _) = branch_unit_vectors(p, sol.q_a[i], i);
            let b = a + p.l1 * u;
            let hit = elbows.iter().map(|e| (e - b).norm()).fold(f64::MAX, f64::min);
            assert!(hit < 1e-12, "branch {i}");
        }
        // frozen from the circle-intersection oracle
        assert!((sol.q_a[0].to_degrees() - 115.2).abs() < 0.1);
    }

    #[test]
    fn elbow_modes_pick_opposite_intersections() {
        let m = mech(0);
        let pose = PlatformPose::new(0.03, -0.02, 0.05);
        let pos = m.inverse_kinematics(&pose, &[]).unwrap();
        let neg = mech(0).with_elbow(ElbowMode::Negative).inverse_kinematics(&pose, &[]).unwrap();
        for i in 0..3 {
            assert!((pos.q_p[i] + neg.q_p[i]).abs() < 1e-12);
            let cp = m.forward_position(&pos.q_a, &pos.q_p, &[]).unwrap();
            let cn = m.forward_position(&neg.q_a, &neg.q_p, &[]).unwrap();
            assert!((cp[i] - cn[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn straight_branch_reaches_full_length() {
        let m = mech(0);
        let c = m.forward_position(&[0.3, 0.2, 0.1], &[0.0; 3], &[]).unwrap();
        for i in 0..3 {
            let d = (c[i] - m.params.base_joint(i)).norm();
            assert!((d - 1.2).abs() < 1e-14);
        }
    }

    #[test]
    fn deformed_round_trip() {
        let m = mech(3);
        let pose = PlatformPose::new(0.05, 0.05, 0.1);
        let mut q_f = vec![0.0; 9];
        q_f[0] = 0.005;
        let sol = m.inverse_kinematics(&pose, &q_f).unwrap();
        let got = m.forward_position(&sol.q_a, &sol.q_p, &q_f).unwrap();
        let want = platform_corner_positions(&m.params, &pose);
        for i in 0..3 {
            assert!((got[i] - want[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn errors_are_typed() {
        let m = mech(1);
        assert!(matches!(m.inverse_kinematics(&PlatformPose::new(0.9, 0.0, 0.0), &[0.0; 3]), Err(Error::Unreachable(_))));
        assert!(matches!(m.inverse_kinematics(&PlatformPose::default(), &[0.2, 0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(m.inverse_kinematics(&PlatformPose::default(), &[0.0; 2]), Err(Error::Dimension { .. })));
    }

    fn random_state(m: &Mechanism, rng: &mut ChaCha8Rng) -> GeneralizedState {
        let n = m.n_modes();
        let mut q = DVector::zeros(m.dim());
        q[0] = rng.random_range(-0.15..0.15);
        q[1] = rng.random_range(-0.15..0.15);
        q[2] = rng.random_range(-0.2..0.2);
        for k in 0..3 * n {
            q[3 + k] = rng.random_range(-0.01..0.01) / (1 + k % n.max(1)) as f64;
        }
        let q_dot = DVector::from_fn(m.dim(), |_, _| rng.random_range(-0.5..0.5));
        GeneralizedState::new(q, q_dot).unwrap()
    }

    /// Joint angles as a vector [q_a; q_p].
    fn joint_angles(m: &Mechanism, q: &DVector<f64>) -> DVector<f64> {
        let sol = m.inverse_kinematics(&PlatformPose::from_slice(q.as_slice()), &q.as_slice()[3..]).unwrap();
        DVector::from_iterator(6, sol.q_a.into_iter().chain(sol.q_p))
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let m = mech(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let st = random_state(&m, &mut rng);
            let jac = m.jacobians(&st).unwrap();
            for k in 0..m.dim() {
                let h = 1e-6;
                let mut qp = st.q.clone();
                qp[k] += h;
                let mut qm = st.q.clone();
                qm[k] -= h;
                let fd = (joint_angles(&m, &qp) - joint_angles(&m, &qm)) / (2.0 * h);
                for r in 0..6 {
                    let a = jac.s[(r, k)];
                    assert!((a - fd[r]).abs() <= 1e-6 * a.abs().max(1e-3), "row {r} col {k}: {a} vs {}", fd[r]);
                }
            }
            assert_eq!(jac.s.view((6, 3), (9, 9)).into_owned(), DMatrix::identity(9, 9));
            assert_eq!(jac.j.view((3, 0), (9, 3)).into_owned(), DMatrix::zeros(9, 3));
        }
    }

    #[test]
    fn rigid_jacobian_matches_velocity_projection() {
        let m = mech(0);
        let st = GeneralizedState::at_rest(PlatformPose::default(), 0);
        let jac = m.jacobians(&st).unwrap();
        let sol = m.inverse_kinematics(&PlatformPose::default(), &[]).unwrap();
        let p = &m.params;
        for i in 0..3 {
            // classical rigid relation: l1 (v·w) q̇_a = w·ẋ + r θ̇ (e_θ·w)
            let (_, v) = branch_unit_vectors(p, sol.q_a[i], i);
            let g = p.alpha[i] + sol.q_a[i] + sol.q_p[i];
            let w = Vector2::new(g.cos(), g.sin());
            let e_theta = Vector2::new(-p.alpha[i].sin(), p.alpha[i].cos()) * p.platform_radius;
            let denom = p.l1 * v.dot(&w);
            assert!((jac.j[(i, 0)] - w.x / denom).abs() < 1e-12);
            assert!((jac.j[(i, 1)] - w.y / denom).abs() < 1e-12);
            assert!((jac.j[(i, 2)] - e_theta.dot(&w) / denom).abs() < 1e-12);
        }
        assert!(m.j_ax_condition(&st).unwrap().is_finite());
    }

    #[test]
    fn s_dot_analytic_matches_difference() {
        let m = mech(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let st = random_state(&m, &mut rng);
            let a = m.s_dot(&st).unwrap();
            let f = m.s_dot_finite_difference(&st).unwrap();
            let err = (&a - &f).amax();
            assert!(err <= 1e-6 * a.amax(), "{err} vs {}", a.amax());
        }
        let mut still = random_state(&m, &mut rng);
        still.q_dot.fill(0.0);
        assert_eq!(m.s_dot(&still).unwrap().amax(), 0.0);
    }

    #[test]
    fn s_times_rate_matches_trajectory_derivative() {
        let m = mech(2);
        // q(t) smooth; compare S q̇ with d/dt of the joint angles
        let q_of = |t: f64| {
            DVector::from_vec(vec![
                0.05 * (2.0 * t).sin(),
                -0.03 * t,
                0.1 * t.cos(),
                0.004 * (30.0 * t).sin(),
                -0.001 * t,
                0.002 * t * t,
                0.0,
                -0.003 * (10.0 * t).cos(),
                0.001,
            ])
        };
        let t = 0.37;
        let h = 1e-6;
        let qd = (q_of(t + h) - q_of(t - h)) / (2.0 * h);
        let st = GeneralizedState::new(q_of(t), qd).unwrap();
        let s = m.jacobians(&st).unwrap().s;
        let rates = &s * &st.q_dot;
        let fd = (joint_angles(&m, &q_of(t + h)) - joint_angles(&m, &q_of(t - h))) / (2.0 * h);
        for r in 0..6 {
            assert!((rates[r] - fd[r]).abs() < 1e-6 * rates[r].abs().max(1e-2));
        }
    }

    #[test]
    fn passive_rates_agree_with_s() {
        let m = mech(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let st = random_state(&m, &mut rng);
            let s = m.jacobians(&st).unwrap().s;
            let qw = &s * &st.q_dot;
            let (qa_dot, omega2) = m.passive_rates(&st, &m.corner_rates(&st)).unwrap();
            for i in 0..3 {
                let slope_rate = m.tip_slopes().dot(&DVector::from_column_slice(st.link_q_f_dot(i)));
                assert!((qa_dot[i] - qw[i]).abs() < 1e-9);
                assert!((omega2[i] - (qw[i] + slope_rate + qw[3 + i])).abs() < 1e-9);
            }
        }
        let mut still = random_state(&m, &mut rng);
        still.q_dot.fill(0.0);
        let (a, b) = m.passive_rates(&still, &m.corner_rates(&still)).unwrap();
        assert_eq!(a, [0.0; 3]);
        assert_eq!(b, [0.0; 3]);
    }

    #[test]
    fn q_a_continuous_along_sweep() {
        let m = mech(1);
        let mut prev: Option<IkSolution> = None;
        for k in 0..=2000 {
            let s = k as f64 / 2000.0 * 2.0 * PI;
            let pose = PlatformPose::new(0.15 * s.cos(), 0.15 * s.sin(), 0.2 * (3.0 * s).sin());
            let sol = m.inverse_kinematics(&pose, &[0.01 * s.sin(), -0.01, 0.005]).unwrap();
            if let Some(p) = &prev {
                for i in 0..3 {
                    assert!((sol.q_a[i] - p.q_a[i]).abs() < 0.05, "jump on branch {i} at step {k}");
                }
            }
            prev = Some(sol);
        }
    }

    proptest::proptest! {
        #[test]
        fn round_trip_random_poses(x in -0.15f64..0.15, y in -0.15f64..0.15, th in -0.2f64..0.2,
                                   d in proptest::collection::vec(-0.02f64..0.02, 3)) {
            let m = mech(3);
            let mut q_f = vec![0.0; 9];
            for i in 0..3 { q_f[3 * i] = d[i]; }
            let pose = PlatformPose::new(x, y, th);
            let sol = m.inverse_kinematics(&pose, &q_f).unwrap();
            let got = m.forward_position(&sol.q_a, &sol.q_p, &q_f).unwrap();
            let want = platform_corner_positions(&m.params, &pose);
            for i in 0..3 {
                proptest::prop_assert!((got[i] - want[i]).norm() < 1e-9);
                proptest::prop_assert!(sol.angle_abc[i] > 0.0 && sol.angle_abc[i] < PI);
            }
        }
    }
}
