//! Closed-loop case studies: the rapid-positioning trajectory, the
//! co-simulation of plant, observer and controller, episode metrics and
//! the CSV reports.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{
    computed_torque_actuated, computed_torque_full, joint_pd, lyapunov_rate, lyapunov_value, CompensationModel, ControlLawConfig,
    ControllerKind, TrackingError,
};
use crate::dynamics::{DynamicModel, Integrator, PlantState, DEFAULT_PLANT_DAMPING, DEFAULT_ROTOR_INERTIA};
use crate::error::{Error, Result};
use crate::kinematics::Mechanism;
use crate::modal::{BoundaryCondition, ModalBasis};
use crate::observer::ObserverNet;
use crate::params::{MechanismParams, PlatformPose};
use crate::quadrature::GaussLegendre;
use crate::state::GeneralizedState;

/// Point-to-point positioning: cubic moves with zero end rates, each
/// followed by a dwell. The platform angle is held at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub start: [f64; 2],
    /// Targets visited in order, one move and one dwell each.
    pub waypoints: Vec<[f64; 2]>,
    pub move_time: f64,
    pub dwell_time: f64,
}

impl Default for TrajectorySpec {
    /// O → A → B → C → D → O with 1 s moves and 3 s dwells.
    fn default() -> Self {
        Self {
            start: [0.0, 0.0],
            waypoints: vec![[0.1, 0.0], [0.1, 0.1], [-0.1, 0.1], [-0.1, -0.1], [0.0, 0.0]],
            move_time: 1.0,
            dwell_time: 3.0,
        }
    }
}

impl TrajectorySpec {
    /// Holds `at` for `duration` seconds.
    pub fn hold(at: [f64; 2], duration: f64) -> Self {
        Self { start: at, waypoints: vec![at], move_time: 0.0, dwell_time: duration }
    }

    pub fn leg_time(&self) -> f64 {
        self.move_time + self.dwell_time
    }

    pub fn duration(&self) -> f64 {
        self.waypoints.len() as f64 * self.leg_time()
    }
}

/// Desired platform pose and its derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Desired {
    pub pose: Vector3<f64>,
    pub rate: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub moving: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub spec: TrajectorySpec,
}

/// Checks every waypoint against the rigid inverse kinematics.
pub fn build_trajectory(spec: TrajectorySpec, params: &MechanismParams) -> Result<Trajectory> {
    if !(spec.move_time >= 0.0 && spec.dwell_time >= 0.0 && spec.leg_time() > 0.0) {
        return Err(Error::Validation("move_time >= 0, dwell_time >= 0 and their sum > 0".into()));
    }
    let rigid = Mechanism::new(params.clone(), ModalBasis::clamped_free(params, 0)?);
    for p in std::iter::once(&spec.start).chain(&spec.waypoints) {
        rigid
            .inverse_kinematics(&PlatformPose::new(p[0], p[1], 0.0), &[])
            .map_err(|e| Error::Validation(format!("waypoint ({}, {}) is outside the workspace: {e}", p[0], p[1])))?;
    }
    Ok(Trajectory { spec })
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        self.spec.duration()
    }

    pub fn desired(&self, t: f64) -> Desired {
        let spec = &self.spec;
        let hold = |p: [f64; 2]| Desired {
            pose: Vector3::new(p[0], p[1], 0.0),
            rate: Vector3::zeros(),
            accel: Vector3::zeros(),
            moving: false,
        };
        if spec.waypoints.is_empty() || t < 0.0 {
            return hold(spec.start);
        }
        let leg = ((t / spec.leg_time()).floor() as usize).min(spec.waypoints.len() - 1);
        let from = if leg == 0 { spec.start } else { spec.waypoints[leg - 1] };
        let to = spec.waypoints[leg];
        let local = t - leg as f64 * spec.leg_time();
        if local >= spec.move_time || spec.move_time == 0.0 {
            return hold(to);
        }
        let tm = spec.move_time;
        let s = local / tm;
        let d = Vector3::new(to[0] - from[0], to[1] - from[1], 0.0);
        Desired {
            pose: Vector3::new(from[0], from[1], 0.0) + d * (s * s * (3.0 - 2.0 * s)),
            rate: d * (6.0 * s * (1.0 - s) / tm),
            accel: d * (6.0 * (1.0 - 2.0 * s) / (tm * tm)),
            moving: true,
        }
    }
}

/// Where the controller's pose estimate comes from.
#[derive(Debug, Clone, Default)]
pub enum PoseSource {
    /// Plant truth.
    #[default]
    Truth,
    /// Trained network on joint angles and tip deflections.
    Network(Arc<ObserverNet>),
    /// Forward kinematics of the compensation model from the measured joint
    /// angles and the projected modal coordinates, so a controller built on
    /// a model also estimates the pose with it.
    ModelKinematics,
}

/// How pose and modal rates reach the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RateSource {
    /// Plant truth, for idealized loops.
    Exact,
    /// Backward differences at the observer rate with an optional low-pass.
    Differenced { cutoff_hz: Option<f64> },
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub n_plant: usize,
    pub plant_dt: f64,
    pub rotor_inertia: f64,
    pub plant_damping: f64,
    pub controller: ControlLawConfig,
    pub pose_source: PoseSource,
    pub rates: RateSource,
    /// Standard deviation of additive noise on measured deformation.
    pub noise_std: f64,
    pub seed: u64,
    /// Applies the fully actuated law including modal forces (test fixture).
    pub full_actuation: bool,
    /// Starting state; at rest on the trajectory start when absent.
    pub initial_state: Option<GeneralizedState>,
}

impl EpisodeConfig {
    pub fn new(controller: ControlLawConfig) -> Self {
        Self {
            n_plant: 5,
            plant_dt: 1e-4,
            rotor_inertia: DEFAULT_ROTOR_INERTIA,
            plant_damping: DEFAULT_PLANT_DAMPING,
            controller,
            pose_source: PoseSource::Truth,
            rates: RateSource::Differenced { cutoff_hz: Some(100.0) },
            noise_std: 0.0,
            seed: 0,
            full_actuation: false,
            initial_state: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        if !(self.plant_dt > 0.0) {
            return Err(Error::Validation("plant_dt > 0".into()));
        }
        if self.n_plant < self.controller.n_ctrl {
            return Err(Error::Validation("plant modal order >= compensation order".into()));
        }
        if self.controller.control_rate * self.plant_dt > 1.0 + 1e-9 {
            return Err(Error::Validation("control period must not be shorter than the plant step".into()));
        }
        Ok(())
    }
}

/// One control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub moving: bool,
    pub desired: [f64; 3],
    pub observed: [f64; 3],
    pub truth: [f64; 3],
    /// Plant tip deflection of each flexible link.
    pub tip: [f64; 3],
    pub tau: [f64; 3],
    pub q_a_dot: [f64; 3],
    pub lyapunov: f64,
}

pub const EPISODE_LOG_HEADER: &str =
    "t,moving,x_d,y_d,theta_d,x_hat,y_hat,theta_hat,x,y,theta,tip1,tip2,tip3,tau1,tau2,tau3,qa_dot1,qa_dot2,qa_dot3,V";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Mean absolute true pose error per axis over the whole episode.
    pub mae: [f64; 3],
    pub moving_mae: [f64; 3],
    /// Mean absolute pose error per axis over the dwell phases.
    pub dwell_mae: [f64; 3],
    /// RMS tip deflection per link over the dwell phases.
    pub dwell_deformation_rms: [f64; 3],
    pub torque_peak: [f64; 3],
    /// ∫|τ_i q̇_ai| dt per joint.
    pub energy: [f64; 3],
    pub final_lyapunov: f64,
    pub max_lyapunov: f64,
    /// Largest ratio of V at the end of a dwell to V at its start.
    pub dwell_lyapunov_ratio: f64,
}

impl EpisodeMetrics {
    /// Mean of the x and y dwell errors.
    pub fn dwell_position_mae(&self) -> f64 {
        0.5 * (self.dwell_mae[0] + self.dwell_mae[1])
    }

    pub fn position_mae(&self) -> f64 {
        0.5 * (self.mae[0] + self.mae[1])
    }

    pub fn dwell_deformation(&self) -> f64 {
        (self.dwell_deformation_rms.iter().map(|v| v * v).sum::<f64>() / 3.0).sqrt()
    }

    pub fn total_energy(&self) -> f64 {
        self.energy.iter().sum()
    }

    /// Recomputes every metric from the log.
    pub fn from_log(log: &[LogRow]) -> Self {
        let mut m = Self::default();
        if log.is_empty() {
            return m;
        }
        let err = |r: &LogRow, k: usize| (r.desired[k] - r.truth[k]).abs();
        let mean_over = |rows: &[&LogRow], f: &dyn Fn(&LogRow) -> f64| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
            }
        };
        let all: Vec<&LogRow> = log.iter().collect();
        let moving: Vec<&LogRow> = log.iter().filter(|r| r.moving).collect();
        let dwell: Vec<&LogRow> = log.iter().filter(|r| !r.moving).collect();
        for k in 0..3 {
            m.mae[k] = mean_over(&all, &|r| err(r, k));
            m.moving_mae[k] = mean_over(&moving, &|r| err(r, k));
            m.dwell_mae[k] = mean_over(&dwell, &|r| err(r, k));
            m.dwell_deformation_rms[k] = mean_over(&dwell, &|r| r.tip[k] * r.tip[k]).sqrt();
            m.torque_peak[k] = log.iter().map(|r| r.tau[k].abs()).fold(0.0, f64::max);
            m.energy[k] = log
                .windows(2)
                .map(|w| {
                    0.5 * (w[1].t - w[0].t) * ((w[0].tau[k] * w[0].q_a_dot[k]).abs() + (w[1].tau[k] * w[1].q_a_dot[k]).abs())
                })
                .sum();
        }
        m.final_lyapunov = log.last().unwrap().lyapunov;
        m.max_lyapunov = log.iter().map(|r| r.lyapunov).fold(0.0, f64::max);
        let mut start: Option<f64> = None;
        for (k, r) in log.iter().enumerate() {
            if r.moving {
                continue;
            }
            let v0 = *start.get_or_insert(r.lyapunov);
            if log.get(k + 1).is_none_or(|next| next.moving) {
                if v0 > 0.0 {
                    m.dwell_lyapunov_ratio = m.dwell_lyapunov_ratio.max(r.lyapunov / v0);
                }
                start = None;
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub log: Vec<LogRow>,
    pub metrics: EpisodeMetrics,
    /// Reason the episode stopped early, if it did.
    pub failure: Option<String>,
}

impl EpisodeResult {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(EPISODE_LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            let _ = write!(s, "{:.6},{}", r.t, r.moving as u8);
            for v in r.desired.iter().chain(&r.observed).chain(&r.truth).chain(&r.tip).chain(&r.tau).chain(&r.q_a_dot) {
                let _ = write!(s, ",{v:.9e}");
            }
            let _ = writeln!(s, ",{:.9e}", r.lyapunov);
        }
        s
    }
}

/// L2 projection of plant deformation onto the compensation basis, one link.
fn projection_matrix(plant: &ModalBasis, ctrl: &ModalBasis) -> Result<DMatrix<f64>> {
    if ctrl.n() == 0 {
        return Ok(DMatrix::zeros(0, plant.n()));
    }
    let quad = GaussLegendre::new(48);
    let pts = quad.on_interval(0.0, plant.length);
    let gram =
        DMatrix::from_fn(ctrl.n(), ctrl.n(), |a, b| pts.iter().map(|&(x, w)| w * ctrl.phi(a, x, 0) * ctrl.phi(b, x, 0)).sum());
    let cross =
        DMatrix::from_fn(ctrl.n(), plant.n(), |a, b| pts.iter().map(|&(x, w)| w * ctrl.phi(a, x, 0) * plant.phi(b, x, 0)).sum());
    gram.lu().solve(&cross).ok_or_else(|| Error::Singular("compensation basis Gram matrix".into()))
}

/// Controller-side dynamic model for a compensation variant.
pub fn compensation_model(
    params: &MechanismParams,
    variant: CompensationModel,
    n_ctrl: usize,
    rotor_inertia: f64,
) -> Result<DynamicModel> {
    let (bc, n) = variant.basis(n_ctrl);
    let basis = ModalBasis::new(bc, params.l1, n)?;
    Ok(DynamicModel::new(Mechanism::new(params.clone(), basis)).with_rotor_inertia(rotor_inertia))
}

/// Runs one closed-loop episode. Failures inside the loop end the episode
/// with zero torque and are reported in the result, not as an error.
pub fn run_episode(params: &MechanismParams, cfg: &EpisodeConfig, trajectory: &Trajectory) -> Result<EpisodeResult> {
    cfg.validate()?;
    let ctrl_cfg = &cfg.controller;
    let plant_basis = ModalBasis::clamped_free(params, cfg.n_plant)?;
    let plant = DynamicModel::new(Mechanism::new(params.clone(), plant_basis.clone()))
        .with_rotor_inertia(cfg.rotor_inertia)
        .with_damping_ratio(cfg.plant_damping);
    let ctrl_model = compensation_model(params, ctrl_cfg.compensation, ctrl_cfg.n_ctrl, cfg.rotor_inertia)?;
    let n_ctrl = ctrl_model.n_modes();
    if cfg.full_actuation && (n_ctrl != cfg.n_plant || ctrl_cfg.compensation != CompensationModel::Developed) {
        return Err(Error::Validation("full actuation needs the plant basis as compensation basis".into()));
    }
    let projection = projection_matrix(&plant_basis, &ctrl_model.mech.basis)?;
    let plant_tips = plant_basis.tip_values();
    let rigid = Mechanism::new(params.clone(), ModalBasis::clamped_free(params, 0)?);

    let steps_per_tick = (1.0 / (ctrl_cfg.control_rate * cfg.plant_dt)).round().max(1.0) as usize;
    let ticks_per_obs = (ctrl_cfg.control_rate / ctrl_cfg.observer_rate).round().max(1.0) as usize;
    let tick_dt = steps_per_tick as f64 * cfg.plant_dt;
    let obs_dt = ticks_per_obs as f64 * tick_dt;
    let ticks = (trajectory.duration() / tick_dt).round() as usize;

    let start = trajectory.desired(0.0).pose;
    let init = match &cfg.initial_state {
        Some(s) => s.clone(),
        None => GeneralizedState::at_rest(PlatformPose::from(start), cfg.n_plant),
    };
    if init.n_modes() != cfg.n_plant {
        return Err(Error::Dimension { expected: 3 + 3 * cfg.n_plant, got: init.dim() });
    }
    let mut state = PlantState::new(init);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let cutoff = match cfg.rates {
        RateSource::Differenced { cutoff_hz } => cutoff_hz,
        RateSource::Exact => None,
    };
    let mut pose_rates = crate::observer::RateEstimator::new(3, obs_dt, cutoff);
    let mut modal_rates = crate::observer::RateEstimator::new(3 * n_ctrl, obs_dt, cutoff);

    let mut q_hat = DVector::zeros(3 + 3 * n_ctrl);
    let mut q_hat_dot = DVector::zeros(3 + 3 * n_ctrl);
    let mut log = Vec::with_capacity(ticks + 1);
    let mut failure = None;

    for tick in 0..=ticks {
        let t = tick as f64 * tick_dt;
        let x = &state.x;
        let desired = trajectory.desired(t);
        let tips: [f64; 3] = std::array::from_fn(|i| plant_tips.dot(&DVector::from_column_slice(x.link_q_f(i))));
        let (q_a, q_a_dot) = match plant.mech.actuated_joints(x) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(format!("t = {t:.4}: {e}"));
                break;
            }
        };

        if tick % ticks_per_obs == 0 {
            let measured: Vec<f64> = (0..3 * cfg.n_plant)
                .map(|k| x.q_f()[k] + if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                .collect();
            let mut q_f_ctrl = DVector::zeros(3 * n_ctrl);
            for i in 0..3 {
                let link = DVector::from_column_slice(&measured[i * cfg.n_plant..(i + 1) * cfg.n_plant]);
                q_f_ctrl.rows_mut(i * n_ctrl, n_ctrl).copy_from(&(&projection * link));
            }
            let pose = match &cfg.pose_source {
                PoseSource::Truth => x.pose().to_vector(),
                PoseSource::Network(net) => {
                    let noisy_tips: [f64; 3] = std::array::from_fn(|i| {
                        let link = &measured[i * cfg.n_plant..(i + 1) * cfg.n_plant];
                        plant_tips.dot(&DVector::from_column_slice(link))
                    });
                    let input = [q_a[0], q_a[1], q_a[2], noisy_tips[0], noisy_tips[1], noisy_tips[2]];
                    net.predict_pose(&input).to_vector()
                }
                PoseSource::ModelKinematics => {
                    let guess = PlatformPose::from(q_hat.fixed_rows::<3>(0).into_owned());
                    let guess = if tick == 0 { PlatformPose::from(start) } else { guess };
                    match ctrl_model.mech.pose_from_joints(&q_a, q_f_ctrl.as_slice(), &guess) {
                        Ok(p) => p.to_vector(),
                        Err(e) => {
                            failure = Some(format!("t = {t:.4}: {e}"));
                            break;
                        }
                    }
                }
            };
            let pose_v = DVector::from_column_slice(pose.as_slice());
            let (pose_dot, qf_dot) = match cfg.rates {
                RateSource::Exact => {
                    let mut qf_dot = DVector::zeros(3 * n_ctrl);
                    for i in 0..3 {
                        let link = DVector::from_column_slice(x.link_q_f_dot(i));
                        qf_dot.rows_mut(i * n_ctrl, n_ctrl).copy_from(&(&projection * link));
                    }
                    (DVector::from_column_slice(x.pose_rate().as_slice()), qf_dot)
                }
                RateSource::Differenced { .. } => (pose_rates.update(&pose_v), modal_rates.update(&q_f_ctrl)),
            };
            q_hat.rows_mut(0, 3).copy_from(&pose_v);
            q_hat.rows_mut(3, 3 * n_ctrl).copy_from(&q_f_ctrl);
            q_hat_dot.rows_mut(0, 3).copy_from(&pose_dot);
            q_hat_dot.rows_mut(3, 3 * n_ctrl).copy_from(&qf_dot);
        }

        let error = TrackingError::from_desired(&desired.pose, &desired.rate, &q_hat, &q_hat_dot);
        let lyapunov = lyapunov_value(&error, ctrl_cfg.kp);
        let command = control_command(ctrl_cfg, cfg, &ctrl_model, &rigid, &error, &q_hat, &q_hat_dot, &desired, &q_a, &q_a_dot);
        let (tau, tau_f) = match command {
            Ok(c) => c,
            Err(e) => {
                log::warn!("control failure at t = {t:.4}: {e}; commanding zero torque");
                failure = Some(format!("t = {t:.4}: {e}"));
                ([0.0; 3], Vec::new())
            }
        };
        log.push(LogRow {
            t,
            moving: desired.moving,
            desired: desired.pose.into(),
            observed: [q_hat[0], q_hat[1], q_hat[2]],
            truth: x.pose().to_vector().into(),
            tip: tips,
            tau,
            q_a_dot,
            lyapunov,
        });
        if failure.is_some() || tick == ticks {
            break;
        }
        for _ in 0..steps_per_tick {
            if let Err(e) = plant.step_with_modal_force(&mut state, &tau, &tau_f, cfg.plant_dt, Integrator::Rk4) {
                failure = Some(format!("t = {:.4}: {e}", state.t));
                break;
            }
        }
        if failure.is_some() {
            break;
        }
    }
    Ok(EpisodeResult { metrics: EpisodeMetrics::from_log(&log), log, failure })
}

#[allow(clippy::too_many_arguments)]
fn control_command(
    ctrl_cfg: &ControlLawConfig,
    cfg: &EpisodeConfig,
    ctrl_model: &DynamicModel,
    rigid: &Mechanism,
    error: &TrackingError,
    q_hat: &DVector<f64>,
    q_hat_dot: &DVector<f64>,
    desired: &Desired,
    q_a: &[f64; 3],
    q_a_dot: &[f64; 3],
) -> Result<([f64; 3], Vec<f64>)> {
    match ctrl_cfg.kind {
        ControllerKind::JointPd => {
            let target = rigid.inverse_kinematics(&PlatformPose::from(desired.pose), &[])?;
            Ok((joint_pd(&target.q_a, q_a, q_a_dot, ctrl_cfg.kp, ctrl_cfg.kd), Vec::new()))
        }
        ControllerKind::ComputedTorque => {
            let est = GeneralizedState::new(q_hat.clone(), q_hat_dot.clone())?;
            let eom = ctrl_model.assemble_eom(&est)?;
            if cfg.full_actuation {
                let mut qdd = DVector::zeros(q_hat.len());
                qdd.rows_mut(0, 3).copy_from(&desired.accel);
                let tau = computed_torque_full(&eom, error, q_hat, q_hat_dot, &qdd, ctrl_cfg.kp, ctrl_cfg.kd)?;
                Ok(([tau[0], tau[1], tau[2]], tau.as_slice()[3..].to_vec()))
            } else {
                let tau = computed_torque_actuated(&eom, error, q_hat_dot, &desired.accel, ctrl_cfg.kp, ctrl_cfg.kd)?;
                Ok((tau, Vec::new()))
            }
        }
    }
}

/// Proposed controller against the joint PD baseline.
pub fn run_case_study(
    params: &MechanismParams,
    base: &EpisodeConfig,
    trajectory: &Trajectory,
) -> Result<Vec<(String, EpisodeResult)>> {
    let mut proposed = base.clone();
    proposed.controller = ControlLawConfig { observer_rate: base.controller.observer_rate, ..ControlLawConfig::proposed() };
    let mut pd = base.clone();
    pd.controller = ControlLawConfig { observer_rate: base.controller.observer_rate, ..ControlLawConfig::joint_pd() };
    let runs = run_parallel(params, trajectory, vec![("proposed", proposed), ("joint_pd", pd)])?;
    Ok(runs.into_iter().map(|(l, r)| (l.to_string(), r)).collect())
}

/// One sample of the idealized loop.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealSample {
    pub t: f64,
    pub error: TrackingError,
    pub lyapunov: f64,
    /// ėᵀ(ë + K_p e) from the plant accelerations.
    pub lyapunov_rate: f64,
}

/// Fully actuated computed torque with the plant itself as model, evaluated
/// continuously inside every integrator stage, holding the pose `target`.
/// This isolates the control law from sampling and model mismatch.
#[allow(clippy::too_many_arguments)]
pub fn run_ideal_loop(
    params: &MechanismParams,
    n_modes: usize,
    kp: f64,
    kd: f64,
    target: &PlatformPose,
    initial: GeneralizedState,
    duration: f64,
    dt: f64,
) -> Result<Vec<IdealSample>> {
    if initial.n_modes() != n_modes {
        return Err(Error::Dimension { expected: 3 + 3 * n_modes, got: initial.dim() });
    }
    let model = DynamicModel::new(Mechanism::new(params.clone(), ModalBasis::clamped_free(params, n_modes)?))
        .with_rotor_inertia(DEFAULT_ROTOR_INERTIA);
    let dim = model.dim();
    let mut q_desired = DVector::zeros(dim);
    q_desired.fixed_rows_mut::<3>(0).copy_from(&target.to_vector());
    let zero = DVector::zeros(dim);
    let closed_loop = |x: &GeneralizedState| -> Result<(TrackingError, DVector<f64>)> {
        let error = TrackingError { e: &q_desired - &x.q, e_dot: -&x.q_dot };
        let eom = model.assemble_eom(x)?;
        let tau = computed_torque_full(&eom, &error, &x.q, &x.q_dot, &zero, kp, kd)?;
        let (acc, _, _) = model.accelerations_with_modal_force(x, &[tau[0], tau[1], tau[2]], &tau.as_slice()[3..])?;
        Ok((error, acc))
    };
    let steps = (duration / dt).round() as usize;
    let mut x = initial;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let (error, acc) = closed_loop(&x)?;
        out.push(IdealSample {
            t: k as f64 * dt,
            lyapunov: lyapunov_value(&error, kp),
            lyapunov_rate: lyapunov_rate(&error, &(-&acc), kp),
            error,
        });
        if k == steps {
            break;
        }
        let shifted = |q: &DVector<f64>, v: &DVector<f64>| GeneralizedState { q: q.clone(), q_dot: v.clone() };
        let a1 = acc;
        let v1 = x.q_dot.clone();
        let s2 = shifted(&(&x.q + 0.5 * dt * &v1), &(&x.q_dot + 0.5 * dt * &a1));
        let a2 = closed_loop(&s2)?.1;
        let s3 = shifted(&(&x.q + 0.5 * dt * &s2.q_dot), &(&x.q_dot + 0.5 * dt * &a2));
        let a3 = closed_loop(&s3)?.1;
        let s4 = shifted(&(&x.q + dt * &s3.q_dot), &(&x.q_dot + dt * &a3));
        let a4 = closed_loop(&s4)?.1;
        let q = &x.q + dt / 6.0 * (v1 + 2.0 * &s2.q_dot + 2.0 * &s3.q_dot + &s4.q_dot);
        let q_dot = &x.q_dot + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
        x = GeneralizedState { q, q_dot };
    }
    Ok(out)
}

/// The same controller with each compensation model. Each variant also
/// estimates the pose with its own kinematics.
pub fn compare_models(
    params: &MechanismParams,
    base: &EpisodeConfig,
    trajectory: &Trajectory,
    variants: &[CompensationModel],
) -> Result<Vec<(CompensationModel, EpisodeResult)>> {
    let jobs = variants
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.controller.compensation = v;
            cfg.pose_source = PoseSource::ModelKinematics;
            (v, cfg)
        })
        .collect();
    run_parallel(params, trajectory, jobs)
}

pub const DEFAULT_OBSERVER_RATES: [f64; 5] = [1000.0, 500.0, 200.0, 100.0, 50.0];

/// The same controller with the observer sampled at each rate.
pub fn sweep_observer_rate(
    params: &MechanismParams,
    base: &EpisodeConfig,
    trajectory: &Trajectory,
    rates: &[f64],
) -> Result<Vec<(f64, EpisodeResult)>> {
    let jobs = rates
        .iter()
        .map(|&r| {
            let mut cfg = base.clone();
            cfg.controller.observer_rate = r;
            (r, cfg)
        })
        .collect();
    run_parallel(params, trajectory, jobs)
}

/// Runs labelled episodes on scoped threads; results keep input order.
fn run_parallel<L: Copy + Send + Sync>(
    params: &MechanismParams,
    trajectory: &Trajectory,
    jobs: Vec<(L, EpisodeConfig)>,
) -> Result<Vec<(L, EpisodeResult)>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(label, cfg)| scope.spawn(move || run_episode(params, cfg, trajectory).map(|r| (*label, r))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Numerical("episode thread panicked".into()))))
            .collect()
    })
}

/// Results of one study, ready for [`emit_report`].
#[derive(Debug, Clone)]
pub enum Study {
    CaseStudy(Vec<(String, EpisodeResult)>),
    ModelComparison(Vec<(CompensationModel, EpisodeResult)>),
    RateSweep(Vec<(f64, EpisodeResult)>),
}

pub const TRACKING_HEADER: &str = "t,case,x_d,y_d,theta_d,x,y,theta";
pub const DEFORMATION_HEADER: &str = "t,case,tip1,tip2,tip3";
pub const TORQUE_HEADER: &str = "case,joint,peak_torque,energy";
pub const MAE_HEADER: &str = "observer_rate_hz,mae_x,mae_y,mae_theta,dwell_mae_x,dwell_mae_y,dwell_mae_theta,completed";
pub const MODEL_HEADER: &str = "model,dwell_deformation_rms1,dwell_deformation_rms2,dwell_deformation_rms3,dwell_mae_x,dwell_mae_y,moving_mae_x,moving_mae_y,completed";

/// Every `stride`-th row of each labelled log, as tracking and deformation
/// series.
fn series(runs: &[(String, &EpisodeResult)], stride: usize) -> (String, String) {
    let mut track = format!("{TRACKING_HEADER}\n");
    let mut deform = format!("{DEFORMATION_HEADER}\n");
    for (label, res) in runs {
        for r in res.log.iter().step_by(stride.max(1)) {
            let _ = writeln!(
                track,
                "{:.4},{label},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                r.t, r.desired[0], r.desired[1], r.desired[2], r.truth[0], r.truth[1], r.truth[2]
            );
            let _ = writeln!(deform, "{:.4},{label},{:.9e},{:.9e},{:.9e}", r.t, r.tip[0], r.tip[1], r.tip[2]);
        }
    }
    (track, deform)
}

fn summary_line(label: &str, r: &EpisodeResult) -> String {
    let m = &r.metrics;
    format!(
        "{label:<16} dwell_pos_mae={:.3e} m  dwell_deform_rms={:.3e} m  mae=({:.3e}, {:.3e}, {:.3e})  peak_torque=({:.3}, {:.3}, {:.3}) N*m  energy={:.4} J  {}\n",
        m.dwell_position_mae(),
        m.dwell_deformation(),
        m.mae[0],
        m.mae[1],
        m.mae[2],
        m.torque_peak[0],
        m.torque_peak[1],
        m.torque_peak[2],
        m.total_energy(),
        r.failure.as_deref().map_or("completed".to_string(), |f| format!("FAILED {f}")),
    )
}

/// Writes the per-figure CSV files and a summary table into `out_dir`;
/// returns the written paths.
pub fn emit_report(out_dir: &Path, study: &Study, stride: usize) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files: Vec<(String, String)> = Vec::new();
    let mut summary = String::new();
    match study {
        Study::CaseStudy(runs) => {
            let labelled: Vec<(String, &EpisodeResult)> = runs.iter().map(|(l, r)| (l.clone(), r)).collect();
            let (track, deform) = series(&labelled, stride);
            files.push(("fig7_tracking.csv".into(), track));
            files.push(("fig8_deformation.csv".into(), deform));
            let mut torque = format!("{TORQUE_HEADER}\n");
            for (label, r) in runs {
                for k in 0..3 {
                    let _ = writeln!(torque, "{label},{},{:.9e},{:.9e}", k + 1, r.metrics.torque_peak[k], r.metrics.energy[k]);
                }
                summary.push_str(&summary_line(label, r));
            }
            files.push(("fig9_torque.csv".into(), torque));
        }
        Study::ModelComparison(runs) => {
            let labelled: Vec<(String, &EpisodeResult)> = runs.iter().map(|(m, r)| (m.name().to_string(), r)).collect();
            let (track, deform) = series(&labelled, stride);
            files.push(("fig10_tracking.csv".into(), track));
            files.push(("fig11_deformation.csv".into(), deform));
            let mut table = format!("{MODEL_HEADER}\n");
            for (model, r) in runs {
                let m = &r.metrics;
                let _ = writeln!(
                    table,
                    "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                    model.name(),
                    m.dwell_deformation_rms[0],
                    m.dwell_deformation_rms[1],
                    m.dwell_deformation_rms[2],
                    m.dwell_mae[0],
                    m.dwell_mae[1],
                    m.moving_mae[0],
                    m.moving_mae[1],
                    r.completed()
                );
                summary.push_str(&summary_line(model.name(), r));
            }
            files.push(("model_comparison.csv".into(), table));
        }
        Study::RateSweep(runs) => {
            let labelled: Vec<(String, &EpisodeResult)> = runs.iter().map(|(f, r)| (format!("{f}"), r)).collect();
            let (_, deform) = series(&labelled, stride);
            files.push(("fig13_deformation.csv".into(), deform.replacen("t,case", "t,observer_rate_hz", 1)));
            let mut mae = format!("{MAE_HEADER}\n");
            for (rate, r) in runs {
                let m = &r.metrics;
                let _ = writeln!(
                    mae,
                    "{rate},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                    m.mae[0],
                    m.mae[1],
                    m.mae[2],
                    m.dwell_mae[0],
                    m.dwell_mae[1],
                    m.dwell_mae[2],
                    r.completed()
                );
                summary.push_str(&summary_line(&format!("{rate} Hz"), r));
            }
            files.push(("fig12_mae.csv".into(), mae));
        }
    }
    files.push(("summary.txt".into(), summary));
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Plant tip deflection of every link from a state in the clamped-free basis.
pub fn tip_deflections(basis: &ModalBasis, state: &GeneralizedState) -> [f64; 3] {
    debug_assert_eq!(basis.bc, BoundaryCondition::ClampedFree);
    let tips = basis.tip_values();
    std::array::from_fn(|i| tips.dot(&DVector::from_column_slice(state.link_q_f(i))))
}
