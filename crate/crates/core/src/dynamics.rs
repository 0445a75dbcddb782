//! Assumed-mode equations of motion and the forward-dynamics plant.
//!
//! Each branch contributes a kinetic-energy quadratic form in its local
//! coordinates (q_a, q_p, q_f of that link). The constant beam integrals
//! ρ∫φφᵀ, ρ∫xφ and EI∫φ″φ″ᵀ are computed once by quadrature; the
//! configuration dependence enters only through σ = β1 + q_p and the tip
//! deflection δ, which keeps M and its derivatives in closed form.
//!
//! Platform inertia is added directly in pose coordinates.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{Branch, Jacobians, Mechanism};
use crate::quadrature::GaussLegendre;
use crate::state::GeneralizedState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Integrator {
    #[default]
    Rk4,
    SemiImplicitEuler,
}

/// Reduced matrices M̂, Ĉ, K̂ with the Jacobians they were built from.
#[derive(Debug, Clone)]
pub struct EomMatrices {
    pub m_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub k_hat: DMatrix<f64>,
    pub jacobians: Jacobians,
}

impl EomMatrices {
    pub fn m_rr(&self) -> DMatrix<f64> {
        self.m_hat.view((0, 0), (3, 3)).into_owned()
    }

    pub fn m_rf(&self) -> DMatrix<f64> {
        self.m_hat.view((0, 3), (3, self.m_hat.ncols() - 3)).into_owned()
    }

    pub fn c_rr(&self) -> DMatrix<f64> {
        self.c_hat.view((0, 0), (3, 3)).into_owned()
    }

    pub fn c_rf(&self) -> DMatrix<f64> {
        self.c_hat.view((0, 3), (3, self.c_hat.ncols() - 3)).into_owned()
    }
}

/// Kinetic energy split by body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticEnergy {
    pub flexible_links: f64,
    pub intermediate_links: f64,
    pub platform: f64,
    pub rotors: f64,
}

impl KineticEnergy {
    pub fn total(&self) -> f64 {
        self.flexible_links + self.intermediate_links + self.platform + self.rotors
    }
}

/// Simulation state with time and the actuator-work ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x: GeneralizedState,
    pub t: f64,
    /// ∫ q̇ᵀ Jᵀ τ dt so far.
    pub work_in: f64,
    /// Energy removed by modal damping so far.
    pub dissipated: f64,
}

impl PlantState {
    pub fn new(x: GeneralizedState) -> Self {
        Self { x, t: 0.0, work_in: 0.0, dissipated: 0.0 }
    }
}

/// The dynamic model of the manipulator.
#[derive(Debug, Clone)]
pub struct DynamicModel {
    pub mech: Mechanism,
    /// ρ∫φ_j φ_k dx.
    phi_mass: DMatrix<f64>,
    /// ρ∫x φ_j dx.
    x_mass: DVector<f64>,
    /// ρ l1³ / 3.
    hub_inertia: f64,
    /// EI∫φ″_j φ″_k dx for one link.
    link_stiffness: DMatrix<f64>,
    /// Viscous coefficient per mode, 2 ζ ω_j m_jj.
    modal_damping: DVector<f64>,
    /// Rotor inertia on each actuation joint.
    rotor_inertia: f64,
    quad: GaussLegendre,
}

/// Reflected actuator inertia used by the plant and by model-based
/// controllers, kg·m². Without it the hub and link root form a mode fast
/// enough that a 1 kHz sampled joint servo injects energy.
pub const DEFAULT_ROTOR_INERTIA: f64 = 1e-3;

/// Structural damping ratio of the closed-loop plant's link modes.
pub const DEFAULT_PLANT_DAMPING: f64 = 0.01;

/// Local index layout of one branch: q_a, q_p, then the link's modes.
#[cfg(test)]
const LOCAL_A: usize = 0;
#[cfg(test)]
const LOCAL_P: usize = 1;

impl DynamicModel {
    pub fn new(mech: Mechanism) -> Self {
        let quad = GaussLegendre::new(32);
        let ints = mech.basis.integrals(&quad);
        let p = &mech.params;
        let n = mech.n_modes();
        let phi_mass = p.rho * &ints.phi_phi;
        let link_stiffness = p.flexural_rigidity() * &ints.curv_curv;
        Self {
            x_mass: p.rho * &ints.x_phi,
            hub_inertia: p.rho * p.l1.powi(3) / 3.0,
            phi_mass,
            link_stiffness,
            modal_damping: DVector::zeros(n),
            rotor_inertia: 0.0,
            quad,
            mech,
        }
    }

    /// Adds viscous modal damping with ratio ζ on every retained mode.
    pub fn with_damping_ratio(mut self, zeta: f64) -> Self {
        let p = &self.mech.params;
        let omegas = self.mech.basis.natural_frequencies(p.flexural_rigidity(), p.rho);
        self.modal_damping = DVector::from_fn(self.mech.n_modes(), |j, _| 2.0 * zeta * omegas[j] * self.phi_mass[(j, j)]);
        self
    }

    /// Adds rotor inertia to every actuation joint. A very large value
    /// holds the joints still without a stiff feedback loop.
    pub fn with_rotor_inertia(mut self, inertia: f64) -> Self {
        self.rotor_inertia = inertia;
        self
    }

    pub fn n_modes(&self) -> usize {
        self.mech.n_modes()
    }

    pub fn dim(&self) -> usize {
        self.mech.dim()
    }

    /// Per-link stiffness matrix EI∫φ″φ″ᵀ.
    pub fn link_stiffness(&self) -> &DMatrix<f64> {
        &self.link_stiffness
    }

    /// Per-link modal mass matrix ρ∫φφᵀ.
    pub fn link_modal_mass(&self) -> &DMatrix<f64> {
        &self.phi_mass
    }

    fn local_indices(&self, i: usize) -> Vec<usize> {
        let n = self.n_modes();
        let mut idx = vec![i, 3 + i];
        idx.extend((0..n).map(|j| 6 + i * n + j));
        idx
    }

    /// Kinetic-energy matrix of one branch in (q_a, q_p, q_f) coordinates.
    fn branch_mass(&self, b: &Branch, q_f: &DVector<f64>) -> DMatrix<f64> {
        let p = &self.mech.params;
        let n = self.n_modes();
        let tv = self.mech.tip_values();
        let ts = self.mech.tip_slopes();
        let (m_r, j_r, l_c, l1) = (p.m_r, p.j_r, p.l_c, p.l1);
        let (ss, cs) = b.sigma().sin_cos();
        let kappa = l1 * cs + b.delta * ss;
        let mut m = DMatrix::zeros(2 + n, 2 + n);
        m[(0, 0)] = self.hub_inertia
            + q_f.dot(&(&self.phi_mass * q_f))
            + m_r * (l1 * l1 + b.delta * b.delta + l_c * l_c + 2.0 * l_c * kappa)
            + j_r
            + self.rotor_inertia;
        m[(0, 1)] = m_r * (l_c * l_c + l_c * kappa) + j_r;
        m[(1, 0)] = m[(0, 1)];
        m[(1, 1)] = m_r * l_c * l_c + j_r;
        for j in 0..n {
            let (pj, tj) = (tv[j], ts[j]);
            let af = self.x_mass[j] + m_r * (l1 * pj + l_c * pj * cs + l_c * tj * kappa + l_c * l_c * tj) + j_r * tj;
            let pf = m_r * (l_c * pj * cs + l_c * l_c * tj) + j_r * tj;
            m[(0, 2 + j)] = af;
            m[(2 + j, 0)] = af;
            m[(1, 2 + j)] = pf;
            m[(2 + j, 1)] = pf;
            for k in 0..n {
                let (pk, tk) = (tv[k], ts[k]);
                m[(2 + j, 2 + k)] = self.phi_mass[(j, k)]
                    + m_r * (pj * pk + l_c * (pj * tk + pk * tj) * cs + l_c * l_c * tj * tk)
                    + j_r * tj * tk;
            }
        }
        m
    }

    /// ∂M/∂q for each local coordinate of one branch (q_a has none).
    fn branch_mass_gradients(&self, b: &Branch, q_f: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let p = &self.mech.params;
        let n = self.n_modes();
        let tv = self.mech.tip_values();
        let ts = self.mech.tip_slopes();
        let (m_r, l_c, l1) = (p.m_r, p.l_c, p.l1);
        let (ss, cs) = b.sigma().sin_cos();
        let kappa_s = -l1 * ss + b.delta * cs;

        let mut d_sigma = DMatrix::zeros(2 + n, 2 + n);
        d_sigma[(0, 0)] = 2.0 * m_r * l_c * kappa_s;
        d_sigma[(0, 1)] = m_r * l_c * kappa_s;
        d_sigma[(1, 0)] = d_sigma[(0, 1)];
        let mut d_delta = DMatrix::zeros(2 + n, 2 + n);
        d_delta[(0, 0)] = m_r * (2.0 * b.delta + 2.0 * l_c * ss);
        d_delta[(0, 1)] = m_r * l_c * ss;
        d_delta[(1, 0)] = d_delta[(0, 1)];
        for j in 0..n {
            let (pj, tj) = (tv[j], ts[j]);
            let af = m_r * (-l_c * pj * ss + l_c * tj * kappa_s);
            d_sigma[(0, 2 + j)] = af;
            d_sigma[(2 + j, 0)] = af;
            let pf = -m_r * l_c * pj * ss;
            d_sigma[(1, 2 + j)] = pf;
            d_sigma[(2 + j, 1)] = pf;
            let afd = m_r * l_c * tj * ss;
            d_delta[(0, 2 + j)] = afd;
            d_delta[(2 + j, 0)] = afd;
            for k in 0..n {
                d_sigma[(2 + j, 2 + k)] = -m_r * l_c * (pj * ts[k] + tv[k] * tj) * ss;
            }
        }
        let phi_q = &self.phi_mass * q_f;
        let mut grads = Vec::with_capacity(2 + n);
        grads.push(DMatrix::zeros(2 + n, 2 + n));
        grads.push(d_sigma.clone());
        for k in 0..n {
            let mut g = ts[k] * &d_sigma + tv[k] * &d_delta;
            g[(0, 0)] += 2.0 * phi_q[k];
            grads.push(g);
        }
        grads
    }

    /// Christoffel-symbol Coriolis matrix of one branch.
    fn branch_coriolis(grads: &[DMatrix<f64>], rates: &DVector<f64>) -> DMatrix<f64> {
        let dim = rates.len();
        let mut m_dot = DMatrix::zeros(dim, dim);
        let mut b = DMatrix::zeros(dim, dim);
        for (i, g) in grads.iter().enumerate() {
            m_dot += rates[i] * g;
            b.set_column(i, &(g * rates));
        }
        0.5 * (&m_dot + &b - b.transpose())
    }

    fn local_rates(&self, i: usize, q_w_dot: &DVector<f64>) -> DVector<f64> {
        let idx = self.local_indices(i);
        DVector::from_iterator(idx.len(), idx.iter().map(|&k| q_w_dot[k]))
    }

    /// M in q_w coordinates (platform excluded).
    pub fn mass_w(&self, state: &GeneralizedState) -> Result<DMatrix<f64>> {
        let branches = self.mech.solve_branches(&state.pose(), state.q_f())?;
        let nw = 6 + 3 * self.n_modes();
        let mut m = DMatrix::zeros(nw, nw);
        for (i, b) in branches.iter().enumerate() {
            let q_f = DVector::from_column_slice(state.link_q_f(i));
            let mb = self.branch_mass(b, &q_f);
            let idx = self.local_indices(i);
            for (r, &gr) in idx.iter().enumerate() {
                for (c, &gc) in idx.iter().enumerate() {
                    m[(gr, gc)] = mb[(r, c)];
                }
            }
        }
        Ok(m)
    }

    fn platform_mass(&self) -> [f64; 3] {
        let p = &self.mech.params;
        [p.m_e, p.m_e, p.j_e]
    }

    /// Stiffness matrix K̂ (non-zero on the modal block only).
    pub fn stiffness(&self) -> DMatrix<f64> {
        let n = self.n_modes();
        let mut k = DMatrix::zeros(self.dim(), self.dim());
        for i in 0..3 {
            k.view_mut((3 + i * n, 3 + i * n), (n, n)).copy_from(&self.link_stiffness);
        }
        k
    }

    /// M̂, Ĉ and K̂ at a state.
    pub fn assemble_eom(&self, state: &GeneralizedState) -> Result<EomMatrices> {
        let (jac, branches) = self.mech.jacobians_with_branches(state)?;
        let s_dot = self.mech.s_dot_from(state, &jac, &branches);
        let s = &jac.s;
        let q_w_dot = s * &state.q_dot;
        let dim = self.dim();
        let mut m_hat = DMatrix::zeros(dim, dim);
        let mut c_hat = DMatrix::zeros(dim, dim);
        for (i, b) in branches.iter().enumerate() {
            let q_f = DVector::from_column_slice(state.link_q_f(i));
            let idx = self.local_indices(i);
            let s_b = s.select_rows(idx.iter());
            let s_dot_b = s_dot.select_rows(idx.iter());
            let mb = self.branch_mass(b, &q_f);
            let cb = Self::branch_coriolis(&self.branch_mass_gradients(b, &q_f), &self.local_rates(i, &q_w_dot));
            let st_m = s_b.transpose() * &mb;
            m_hat += &st_m * &s_b;
            c_hat += &st_m * &s_dot_b + s_b.transpose() * cb * &s_b;
        }
        for (k, m) in self.platform_mass().into_iter().enumerate() {
            m_hat[(k, k)] += m;
        }
        let m_hat = 0.5 * (&m_hat + m_hat.transpose());
        Ok(EomMatrices { m_hat, c_hat, k_hat: self.stiffness(), jacobians: jac })
    }

    /// Kinetic energy from the body velocities, integrating the flexible
    /// links over their length.
    pub fn kinetic_energy(&self, state: &GeneralizedState) -> Result<KineticEnergy> {
        let (jac, branches) = self.mech.jacobians_with_branches(state)?;
        let q_w_dot = &jac.s * &state.q_dot;
        let p = &self.mech.params;
        let basis = &self.mech.basis;
        let mut flex = 0.0;
        let mut inter = 0.0;
        let mut rotors = 0.0;
        for (i, b) in branches.iter().enumerate() {
            let q_f = state.link_q_f(i);
            let q_f_dot = state.link_q_f_dot(i);
            let psi_dot = q_w_dot[i];
            for (x, w) in self.quad.on_interval(0.0, p.l1) {
                let phi = basis.phi_vector(x, 0);
                let defl: f64 = phi.iter().zip(q_f).map(|(a, b)| a * b).sum();
                let defl_dot: f64 = phi.iter().zip(q_f_dot).map(|(a, b)| a * b).sum();
                let vel: Vector2<f64> = (x * psi_dot + defl_dot) * b.v - defl * psi_dot * b.u;
                flex += 0.5 * w * p.rho * vel.norm_squared();
            }
            let (delta_dot, slope_dot) = self.mech.tip_state(q_f_dot);
            let gamma_dot = psi_dot + slope_dot + q_w_dot[3 + i];
            let tip_vel = (p.l1 * psi_dot + delta_dot) * b.v - b.delta * psi_dot * b.u;
            let com_vel = tip_vel + p.l_c * gamma_dot * b.w_perp;
            inter += 0.5 * p.m_r * com_vel.norm_squared() + 0.5 * p.j_r * gamma_dot * gamma_dot;
            rotors += 0.5 * self.rotor_inertia * psi_dot * psi_dot;
        }
        let r = state.pose_rate();
        let platform = 0.5 * p.m_e * (r[0] * r[0] + r[1] * r[1]) + 0.5 * p.j_e * r[2] * r[2];
        Ok(KineticEnergy { flexible_links: flex, intermediate_links: inter, platform, rotors })
    }

    /// Strain energy ½ q_fᵀ K_ff q_f.
    pub fn potential_energy(&self, q_f: &[f64]) -> Result<f64> {
        let n = self.n_modes();
        if q_f.len() != 3 * n {
            return Err(Error::Dimension { expected: 3 * n, got: q_f.len() });
        }
        Ok((0..3)
            .map(|i| {
                let q = DVector::from_column_slice(&q_f[i * n..(i + 1) * n]);
                0.5 * q.dot(&(&self.link_stiffness * &q))
            })
            .sum())
    }

    /// Total mechanical energy T + V.
    pub fn energy(&self, state: &GeneralizedState) -> Result<f64> {
        Ok(self.kinetic_energy(state)?.total() + self.potential_energy(state.q_f())?)
    }

    /// Q = Jᵀ[τ_a; τ_f] and Q_w = [τ_a; 0; τ_f].
    pub fn generalized_force_map(&self, jac: &Jacobians, tau_a: &[f64; 3], tau_f: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let nf = 3 * self.n_modes();
        let mut tau = DVector::zeros(3 + nf);
        tau.rows_mut(0, 3).copy_from_slice(tau_a);
        tau.rows_mut(3, nf).copy_from_slice(tau_f);
        let mut q_w = DVector::zeros(6 + nf);
        q_w.rows_mut(0, 3).copy_from_slice(tau_a);
        q_w.rows_mut(6, nf).copy_from_slice(tau_f);
        (jac.j.transpose() * tau, q_w)
    }

    /// Generalized accelerations and the input power at a state.
    pub fn accelerations(&self, state: &GeneralizedState, tau_a: &[f64; 3]) -> Result<(DVector<f64>, f64, f64)> {
        self.accelerations_with_modal_force(state, tau_a, &[])
    }

    /// As [`DynamicModel::accelerations`] with generalized forces `tau_f` on
    /// the modal coordinates as well; an empty slice means none.
    pub fn accelerations_with_modal_force(
        &self,
        state: &GeneralizedState,
        tau_a: &[f64; 3],
        tau_f: &[f64],
    ) -> Result<(DVector<f64>, f64, f64)> {
        if !tau_f.is_empty() && tau_f.len() != 3 * self.n_modes() {
            return Err(Error::Dimension { expected: 3 * self.n_modes(), got: tau_f.len() });
        }
        let (jac, branches) = self.mech.jacobians_with_branches(state)?;
        let s = &jac.s;
        let q_w_dot = s * &state.q_dot;
        let n = self.n_modes();
        let dim = self.dim();

        let s_dot = self.mech.s_dot_from(state, &jac, &branches);
        let bias_w = &s_dot * &state.q_dot;

        let mut m_hat = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        for (i, b) in branches.iter().enumerate() {
            let q_f = DVector::from_column_slice(state.link_q_f(i));
            let idx = self.local_indices(i);
            let s_b = s.select_rows(idx.iter());
            let mb = self.branch_mass(b, &q_f);
            let rates = self.local_rates(i, &q_w_dot);
            let grads = self.branch_mass_gradients(b, &q_f);
            let mut coriolis = DVector::zeros(rates.len());
            for (k, g) in grads.iter().enumerate() {
                coriolis += rates[k] * (g * &rates);
                coriolis[k] -= 0.5 * rates.dot(&(g * &rates));
            }
            let bias = DVector::from_iterator(idx.len(), idx.iter().map(|&k| bias_w[k]));
            let st = s_b.transpose();
            m_hat += &st * &mb * &s_b;
            rhs -= st * (mb * bias + coriolis);
        }
        for (k, m) in self.platform_mass().into_iter().enumerate() {
            m_hat[(k, k)] += m;
        }
        for i in 0..3 {
            let q = DVector::from_column_slice(state.link_q_f(i));
            let qd = DVector::from_column_slice(state.link_q_f_dot(i));
            let mut f = -(&self.link_stiffness * q);
            f -= self.modal_damping.component_mul(&qd);
            let mut block = rhs.rows_mut(3 + i * n, n);
            block += &f;
        }
        let mut power: f64 = (0..3).map(|i| tau_a[i] * q_w_dot[i]).sum();
        for (k, f) in tau_f.iter().enumerate() {
            rhs[3 + k] += f;
            power += f * state.q_dot[3 + k];
        }
        let q_tau = s.rows(0, 3).transpose() * nalgebra::Vector3::from_column_slice(tau_a);
        rhs += q_tau;
        let dissipation: f64 = (0..3)
            .map(|i| {
                let qd = DVector::from_column_slice(state.link_q_f_dot(i));
                qd.dot(&self.modal_damping.component_mul(&qd))
            })
            .sum();
        let chol = nalgebra::Cholesky::new(0.5 * (&m_hat + m_hat.transpose()))
            .ok_or_else(|| Error::Numerical("mass matrix is not positive definite".into()))?;
        Ok((chol.solve(&rhs), power, dissipation))
    }

    /// Advances the plant by `dt` with the torque held constant.
    pub fn step(&self, plant: &mut PlantState, tau_a: &[f64; 3], dt: f64, integrator: Integrator) -> Result<()> {
        self.step_with_modal_force(plant, tau_a, &[], dt, integrator)
    }

    /// Advances the plant with joint torques and modal forces held constant.
    pub fn step_with_modal_force(
        &self,
        plant: &mut PlantState,
        tau_a: &[f64; 3],
        tau_f: &[f64],
        dt: f64,
        integrator: Integrator,
    ) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("time step {dt} must be positive")));
        }
        let x = &plant.x;
        match integrator {
            Integrator::SemiImplicitEuler => {
                let (acc, power, diss) = self.accelerations_with_modal_force(x, tau_a, tau_f)?;
                let q_dot = &x.q_dot + dt * acc;
                let q = &x.q + dt * &q_dot;
                plant.x = GeneralizedState { q, q_dot };
                plant.work_in += dt * power;
                plant.dissipated += dt * diss;
            }
            Integrator::Rk4 => {
                let eval = |q: DVector<f64>, v: DVector<f64>| -> Result<(DVector<f64>, DVector<f64>, f64, f64)> {
                    let st = GeneralizedState { q, q_dot: v };
                    let (a, p, d) = self.accelerations_with_modal_force(&st, tau_a, tau_f)?;
                    Ok((st.q_dot, a, p, d))
                };
                let (v1, a1, p1, d1) = eval(x.q.clone(), x.q_dot.clone())?;
                let (v2, a2, p2, d2) = eval(&x.q + 0.5 * dt * &v1, &x.q_dot + 0.5 * dt * &a1)?;
                let (v3, a3, p3, d3) = eval(&x.q + 0.5 * dt * &v2, &x.q_dot + 0.5 * dt * &a2)?;
                let (v4, a4, p4, d4) = eval(&x.q + dt * &v3, &x.q_dot + dt * &a3)?;
                let q = &x.q + dt / 6.0 * (v1 + 2.0 * v2 + 2.0 * v3 + v4);
                let q_dot = &x.q_dot + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
                plant.x = GeneralizedState { q, q_dot };
                plant.work_in += dt / 6.0 * (p1 + 2.0 * p2 + 2.0 * p3 + p4);
                plant.dissipated += dt / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4);
            }
        }
        plant.t += dt;
        if plant.x.q.iter().chain(plant.x.q_dot.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at t = {:.4}", plant.t)));
        }
        Ok(())
    }
}
