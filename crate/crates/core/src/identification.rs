//! Data-driven selection of the link mode shape: snapshot collection,
//! dynamic mode decomposition and sparse regression over candidate beam
//! shapes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::joint_pd;
use crate::dynamics::{DynamicModel, Integrator, PlantState};
use crate::error::{Error, Result};
use crate::kinematics::Mechanism;
use crate::modal::{BoundaryCondition, ModalBasis};
use crate::params::{MechanismParams, PlatformPose};
use crate::state::GeneralizedState;

/// Number of spatial samples along a link.
pub const SAMPLE_COUNT: usize = 9;
/// Delay copies stacked into each DMD snapshot by default. One copy cannot
/// represent an oscillation whose spatial shape is a single vector.
pub const DEFAULT_DELAYS: usize = 2;
/// Relative singular value cut-off for automatic rank selection.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Coefficients below this fraction of the largest are outside the active set.
pub const ACTIVE_FRACTION: f64 = 0.1;
/// Second-largest coefficient at or above this fraction of the first is ambiguous.
pub const AMBIGUITY_RATIO: f64 = 0.5;
const LAMBDA_GRID_POINTS: usize = 30;
const LAMBDA_GRID_SPAN: f64 = 1e-6;
const LASSO_TOL: f64 = 1e-10;
const LASSO_MAX_SWEEPS: usize = 50_000;
const MAX_FIT_RESIDUAL: f64 = 0.5;

/// Uniform abscissae k·l/8, k = 0..8.
pub fn sample_points(length: f64) -> Vec<f64> {
    (0..SAMPLE_COUNT).map(|k| k as f64 * length / (SAMPLE_COUNT - 1) as f64).collect()
}

/// Time-ordered deformation samples, one column per instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    data: DMatrix<f64>,
    pub dt: f64,
    pub sample_points: Vec<f64>,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<f64>, dt: f64, sample_points: Vec<f64>) -> Result<Self> {
        if data.nrows() != sample_points.len() {
            return Err(Error::Dimension { expected: sample_points.len(), got: data.nrows() });
        }
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("snapshot interval {dt} must be positive")));
        }
        Ok(Self { data, dt, sample_points })
    }

    /// Samples a known field ω(x, t) at `count` instants.
    pub fn from_field(field: impl Fn(f64, f64) -> f64, sample_points: Vec<f64>, dt: f64, count: usize) -> Result<Self> {
        let data = DMatrix::from_fn(sample_points.len(), count, |k, j| field(sample_points[k], j as f64 * dt));
        Self::new(data, dt, sample_points)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    /// Columns 0..m−1.
    pub fn y(&self) -> DMatrix<f64> {
        self.data.columns(0, self.len().saturating_sub(1)).into_owned()
    }

    /// Columns 1..m, the one-step shift of `y`.
    pub fn y_prime(&self) -> DMatrix<f64> {
        self.data.columns(1.min(self.len()), self.len().saturating_sub(1)).into_owned()
    }

    /// Stacks `delays` consecutive snapshots into each column.
    fn delay_embedded(&self, delays: usize) -> DMatrix<f64> {
        let rows = self.data.nrows();
        let cols = self.len() + 1 - delays;
        let mut out = DMatrix::zeros(rows * delays, cols);
        for d in 0..delays {
            out.view_mut((d * rows, 0), (rows, cols)).copy_from(&self.data.columns(d, cols));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# dt={}\nt", self.dt);
        for k in 1..=self.data.nrows() {
            let _ = write!(s, ",x{k}");
        }
        s.push('\n');
        for (j, col) in self.data.column_iter().enumerate() {
            let _ = write!(s, "{:.6}", j as f64 * self.dt);
            for v in col.iter() {
                let _ = write!(s, ",{v:.9e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses the CSV layout written by [`SnapshotMatrix::to_csv`]. Sample
    /// abscissae are not stored and are taken uniform on [0, length].
    pub fn from_csv(text: &str, length: f64) -> Result<Self> {
        let mut dt = None;
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("dt=") {
                    dt = Some(v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad dt: {e}")))?);
                }
                continue;
            }
            if line.starts_with('t') {
                continue;
            }
            let vals = line
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("bad snapshot value: {e}")))?;
            if vals.len() != SAMPLE_COUNT {
                return Err(Error::Dimension { expected: SAMPLE_COUNT, got: vals.len() });
            }
            columns.push(vals);
        }
        let dt = dt.ok_or_else(|| Error::MissingKey("# dt=".into()))?;
        let data = DMatrix::from_fn(SAMPLE_COUNT, columns.len(), |k, j| columns[j][k]);
        Self::new(data, dt, sample_points(length))
    }

    pub fn read_csv(path: &Path, length: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, length)
    }
}

/// Excitation applied while recording snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Excitation {
    /// Every actuation joint turns by `degrees` along a cubic ramp lasting
    /// `ramp_time`, then the joint servos hold the final angle.
    ActuationRamp { degrees: f64, ramp_time: f64 },
    /// Joints held at the starting angles with the plant at rest.
    None,
}

/// Plant run used to record snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRun {
    pub n_plant: usize,
    pub start: PlatformPose,
    pub excitation: Excitation,
    pub duration: f64,
    pub sample_dt: f64,
    pub plant_dt: f64,
    pub control_rate: f64,
    pub kp: f64,
    pub kd: f64,
    pub rotor_inertia: f64,
    pub damping_ratio: f64,
}

impl Default for SnapshotRun {
    fn default() -> Self {
        Self {
            n_plant: 5,
            start: PlatformPose::default(),
            excitation: Excitation::ActuationRamp { degrees: 5.0, ramp_time: 0.2 },
            duration: 20.0,
            sample_dt: 1e-3,
            plant_dt: 1e-4,
            control_rate: 1000.0,
            kp: 200.0,
            kd: 0.2,
            rotor_inertia: crate::dynamics::DEFAULT_ROTOR_INERTIA,
            damping_ratio: crate::dynamics::DEFAULT_PLANT_DAMPING,
        }
    }
}

fn cubic_blend(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Runs the plant and records the deformation of `link` (1-based) at the
/// nine sample points every `sample_dt`.
pub fn collect_snapshots(params: &MechanismParams, run: &SnapshotRun, link: usize) -> Result<SnapshotMatrix> {
    if !(1..=3).contains(&link) {
        return Err(Error::Domain(format!("link index {link} must be 1, 2 or 3")));
    }
    let basis = ModalBasis::clamped_free(params, run.n_plant)?;
    let model = DynamicModel::new(Mechanism::new(params.clone(), basis.clone()))
        .with_rotor_inertia(run.rotor_inertia)
        .with_damping_ratio(run.damping_ratio);
    let points = sample_points(params.l1);
    let shapes = DMatrix::from_fn(SAMPLE_COUNT, run.n_plant, |k, j| basis.phi(j, points[k], 0));

    let steps_per_sample = (run.sample_dt / run.plant_dt).round().max(1.0) as usize;
    let steps_per_control = (1.0 / (run.control_rate * run.plant_dt)).round().max(1.0) as usize;
    let samples = (run.duration / run.sample_dt).round() as usize;

    let mut plant = PlantState::new(GeneralizedState::at_rest(run.start, run.n_plant));
    let (home, _) = model.mech.actuated_joints(&plant.x)?;
    let mut data = DMatrix::zeros(SAMPLE_COUNT, samples);
    let mut tau = [0.0; 3];
    let mut step = 0usize;
    let partial = |recorded: usize, e: Error| Error::PartialData { steps: recorded, reason: e.to_string() };

    for j in 0..samples {
        let q_f = DVector::from_column_slice(plant.x.link_q_f(link - 1));
        data.set_column(j, &(&shapes * q_f));
        for _ in 0..steps_per_sample {
            if step.is_multiple_of(steps_per_control) {
                let offset = match run.excitation {
                    Excitation::ActuationRamp { degrees, ramp_time } => degrees.to_radians() * cubic_blend(plant.t / ramp_time),
                    Excitation::None => 0.0,
                };
                let target = home.map(|q| q + offset);
                let (q_a, q_a_dot) = model.mech.actuated_joints(&plant.x).map_err(|e| partial(j, e))?;
                tau = joint_pd(&target, &q_a, &q_a_dot, run.kp, run.kd);
            }
            model.step(&mut plant, &tau, run.plant_dt, Integrator::Rk4).map_err(|e| partial(j, e))?;
            step += 1;
        }
    }
    SnapshotMatrix::new(data, run.sample_dt, points)
}

/// Options for [`dmd_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmdOptions {
    pub rank: Option<usize>,
    pub delays: usize,
}

impl Default for DmdOptions {
    fn default() -> Self {
        Self { rank: None, delays: DEFAULT_DELAYS }
    }
}

/// Exact DMD of a snapshot sequence.
#[derive(Debug, Clone)]
pub struct DmdResult {
    pub rank: usize,
    pub delays: usize,
    pub dt: f64,
    /// Eigenvalues of the reduced operator, sorted by mode amplitude.
    pub eigenvalues: Vec<Complex<f64>>,
    /// Spatial part of each mode, phase-aligned and projected to real,
    /// max-abs-normalized, in the same order.
    pub modes: Vec<DVector<f64>>,
    /// RMS modal amplitude over the record.
    pub amplitudes: Vec<f64>,
    /// Oscillation frequency of each mode in Hz.
    pub frequencies: Vec<f64>,
    /// Max-abs-normalized real shape of the largest mode, tip sample positive.
    pub dominant_mode: DVector<f64>,
    /// ‖Y′ − AY‖_F / ‖Y′‖_F.
    pub residual: f64,
    /// Leading left singular vectors of the (embedded) snapshot matrix.
    pub basis: DMatrix<f64>,
    /// Operator projected onto `basis`.
    pub reduced_operator: DMatrix<f64>,
}

impl DmdResult {
    /// The best-fit linear operator lifted back to snapshot space.
    pub fn operator(&self) -> DMatrix<f64> {
        &self.basis * &self.reduced_operator * self.basis.transpose()
    }
}

/// DMD with the default delay embedding.
pub fn dmd(snapshots: &SnapshotMatrix, rank: Option<usize>) -> Result<DmdResult> {
    dmd_with(snapshots, DmdOptions { rank, ..DmdOptions::default() })
}

pub fn dmd_with(snapshots: &SnapshotMatrix, opts: DmdOptions) -> Result<DmdResult> {
    let delays = opts.delays.max(1);
    let needed = opts.rank.unwrap_or(1) + delays;
    if snapshots.len() < needed {
        return Err(Error::Rank { requested: needed, available: snapshots.len() });
    }
    let embedded = snapshots.delay_embedded(delays);
    let cols = embedded.ncols() - 1;
    let y = embedded.columns(0, cols).into_owned();
    let y_prime = embedded.columns(1, cols).into_owned();
    if y.amax() == 0.0 {
        return Err(Error::Identification("degenerate snapshot data: all samples are zero".into()));
    }

    let svd = y.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma_max = svd.singular_values[order[0]];
    let numeric = order.iter().filter(|&&k| svd.singular_values[k] > RANK_TOLERANCE * sigma_max).count();
    let rank = match opts.rank {
        Some(r) if r > numeric || r == 0 => return Err(Error::Rank { requested: r, available: numeric }),
        Some(r) => r,
        None => numeric,
    };
    let keep = &order[..rank];
    let u_r = u.select_columns(keep.iter());
    let v_r = vt.select_rows(keep.iter()).transpose();
    let sigma_inv = DMatrix::from_diagonal(&DVector::from_iterator(rank, keep.iter().map(|&k| 1.0 / svd.singular_values[k])));
    let lifted = &y_prime * &v_r * &sigma_inv;
    let reduced = u_r.transpose() * &lifted;

    let eigenvalues: Vec<Complex<f64>> = reduced.complex_eigenvalues().iter().copied().collect();
    let reduced_c = reduced.map(|v| Complex::new(v, 0.0));
    let lifted_c = lifted.map(|v| Complex::new(v, 0.0));
    let mut modes_c = DMatrix::<Complex<f64>>::zeros(embedded.nrows(), rank);
    for (k, &lam) in eigenvalues.iter().enumerate() {
        let w = null_vector(&reduced_c, lam);
        // exact DMD modes Y′VΣ⁻¹w / λ; projected modes when λ vanishes
        let mut mode = if lam.norm() > 1e-12 { &lifted_c * &w / lam } else { u_r.map(|v| Complex::new(v, 0.0)) * &w };
        let norm = mode.norm();
        if norm > 0.0 {
            mode /= Complex::new(norm, 0.0);
        }
        modes_c.set_column(k, &mode);
    }

    // modal coordinates over the record, via the pseudo-inverse of the modes
    let coords = modes_c.clone().pseudo_inverse(1e-12).map_err(|e| Error::Numerical(format!("DMD mode pseudo-inverse: {e}")))?
        * embedded.map(|v| Complex::new(v, 0.0));
    let amplitudes: Vec<f64> =
        (0..rank).map(|k| (coords.row(k).iter().map(|c| c.norm_sqr()).sum::<f64>() / coords.ncols() as f64).sqrt()).collect();

    let mut idx: Vec<usize> = (0..rank).collect();
    idx.sort_by(|&a, &b| amplitudes[b].total_cmp(&amplitudes[a]).then(a.cmp(&b)));
    let rows = snapshots.data().nrows();
    let spatial = |k: usize| -> DVector<f64> {
        let block = modes_c.view(((delays - 1) * rows, k), (rows, 1));
        real_shape(&block.column(0).into_owned())
    };

    let a_full = &u_r * &reduced * u_r.transpose();
    let residual = (&y_prime - &a_full * &y).norm() / y_prime.norm();
    let modes: Vec<DVector<f64>> = idx.iter().map(|&k| spatial(k)).collect();
    let dominant_mode = modes[0].clone();
    Ok(DmdResult {
        rank,
        delays,
        dt: snapshots.dt,
        frequencies: idx.iter().map(|&k| eigenvalues[k].arg().abs() / (2.0 * std::f64::consts::PI * snapshots.dt)).collect(),
        eigenvalues: idx.iter().map(|&k| eigenvalues[k]).collect(),
        amplitudes: idx.iter().map(|&k| amplitudes[k]).collect(),
        modes,
        dominant_mode,
        residual,
        basis: u_r,
        reduced_operator: reduced,
    })
}

/// Unit vector spanning the (near) null space of A − λI.
fn null_vector(a: &DMatrix<Complex<f64>>, lam: Complex<f64>) -> DVector<Complex<f64>> {
    let n = a.nrows();
    let shifted = a - DMatrix::from_diagonal_element(n, n, lam);
    let svd = shifted.svd(false, true);
    let vt = svd.v_t.unwrap();
    let k = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k);
    vt.row(k).transpose().map(|c| c.conj())
}

/// Rotates a complex shape so its largest entry is real, keeps the real part,
/// scales to unit max-abs and makes the last (tip) sample non-negative.
fn real_shape(mode: &DVector<Complex<f64>>) -> DVector<f64> {
    let big = mode.iter().max_by(|a, b| a.norm().total_cmp(&b.norm())).copied().unwrap_or_default();
    let phase = if big.norm() > 0.0 { big.conj() / big.norm() } else { Complex::new(1.0, 0.0) };
    let mut real = mode.map(|c| (c * phase).re);
    let peak = real.amax();
    if peak > 0.0 {
        real /= peak;
    }
    if real[real.len() - 1] < 0.0 {
        real = -real;
    }
    real
}

/// Candidate shapes sampled at the snapshot abscissae.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateLibrary {
    pub theta: DMatrix<f64>,
    pub labels: Vec<(BoundaryCondition, usize)>,
}

impl CandidateLibrary {
    pub fn label(&self, k: usize) -> String {
        let (bc, order) = self.labels[k];
        format!("{}{}", bc.abbrev(), order)
    }

    pub fn column_index(&self, bc: BoundaryCondition, order: usize) -> Option<usize> {
        self.labels.iter().position(|&l| l == (bc, order))
    }
}

/// First three modes of every family, each column max-abs-normalized.
pub fn build_library(families: &[BoundaryCondition], sample_points: &[f64], length: f64) -> Result<CandidateLibrary> {
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    for &bc in families {
        let basis = ModalBasis::new(bc, length, 3)?;
        for j in 0..3 {
            let mut col = DVector::from_iterator(sample_points.len(), sample_points.iter().map(|&x| basis.phi(j, x, 0)));
            col /= col.amax();
            cols.push(col);
            labels.push((bc, j + 1));
        }
    }
    Ok(CandidateLibrary { theta: DMatrix::from_columns(&cols), labels })
}

/// Minimizes ½‖y − Θξ‖² + λ‖ξ‖₁ by cyclic coordinate descent.
pub fn lasso(theta: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, warm: Option<&DVector<f64>>) -> DVector<f64> {
    let p = theta.ncols();
    let mut xi = warm.cloned().unwrap_or_else(|| DVector::zeros(p));
    let col_sq: Vec<f64> = theta.column_iter().map(|c| c.norm_squared()).collect();
    let mut resid = y - theta * &xi;
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut change = 0.0f64;
        for k in 0..p {
            if col_sq[k] == 0.0 {
                continue;
            }
            let col = theta.column(k);
            let rho = col.dot(&resid) + col_sq[k] * xi[k];
            let updated = soft_threshold(rho, lambda) / col_sq[k];
            let delta = updated - xi[k];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                xi[k] = updated;
                change = change.max(delta.abs());
            }
        }
        if change < LASSO_TOL {
            break;
        }
    }
    xi
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Outcome of the sparse regression.
#[derive(Debug, Clone, PartialEq)]
pub struct SindyResult {
    pub xi: DVector<f64>,
    pub lambda: f64,
    /// Columns surviving the thresholded least-squares refit of the
    /// LASSO support, largest refit coefficient first.
    pub active_set: Vec<usize>,
    /// Least-squares coefficients on `active_set`, zero elsewhere.
    pub refit: DVector<f64>,
    pub labels: Vec<(BoundaryCondition, usize)>,
    /// ‖ω_e − Θξ‖ / ‖ω_e‖.
    pub residual: f64,
    /// The swept grid with leave-one-out error, when λ was chosen automatically.
    pub path: Vec<LambdaPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub cv_error: f64,
    pub cv_se: f64,
    pub residual: f64,
    pub active: usize,
}

impl SindyResult {
    pub fn coefficient(&self, bc: BoundaryCondition, order: usize) -> f64 {
        self.labels.iter().position(|&l| l == (bc, order)).map_or(0.0, |k| self.xi[k])
    }

    /// |largest| / |second largest| coefficient.
    pub fn dominance_ratio(&self) -> f64 {
        let (first, second) = top_two(&self.xi);
        self.xi[first].abs() / self.xi[second].abs()
    }
}

fn top_two(xi: &DVector<f64>) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..xi.len()).collect();
    idx.sort_by(|&a, &b| xi[b].abs().total_cmp(&xi[a].abs()).then(a.cmp(&b)));
    (idx[0], idx.get(1).copied().unwrap_or(idx[0]))
}

fn active_set(xi: &DVector<f64>) -> Vec<usize> {
    let peak = xi.amax();
    if peak == 0.0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..xi.len()).filter(|&k| xi[k].abs() >= ACTIVE_FRACTION * peak).collect();
    idx.sort_by(|&a, &b| xi[b].abs().total_cmp(&xi[a].abs()).then(a.cmp(&b)));
    idx
}

/// Least squares on the active columns, dropping those below
/// ACTIVE_FRACTION of the largest refit coefficient until the set is
/// stable. Removes the shrinkage bias that lets correlated columns share
/// weight.
fn refit_support(theta: &DMatrix<f64>, y: &DVector<f64>, mut active: Vec<usize>) -> (Vec<usize>, DVector<f64>) {
    let mut coef = DVector::zeros(0);
    for _ in 0..theta.ncols().max(1) {
        if active.is_empty() {
            break;
        }
        let sub = theta.select_columns(active.iter());
        coef = match sub.svd(true, true).solve(y, RANK_TOLERANCE) {
            Ok(c) => c,
            Err(_) => break,
        };
        let peak = coef.amax();
        let keep: Vec<usize> = (0..active.len()).filter(|&k| coef[k].abs() >= ACTIVE_FRACTION * peak).collect();
        if keep.len() == active.len() {
            break;
        }
        active = keep.iter().map(|&k| active[k]).collect();
    }
    let mut full = DVector::zeros(theta.ncols());
    if coef.len() == active.len() {
        for (k, &col) in active.iter().enumerate() {
            full[col] = coef[k];
        }
    }
    let mut order: Vec<usize> = active.clone();
    order.sort_by(|&a, &b| full[b].abs().total_cmp(&full[a].abs()).then(a.cmp(&b)));
    (order, full)
}

fn relative_residual(theta: &DMatrix<f64>, y: &DVector<f64>, xi: &DVector<f64>) -> f64 {
    (y - theta * xi).norm() / y.norm()
}

/// Descending logarithmic grid over [1e-6, 1]·λ_max.
pub fn lambda_grid(theta: &DMatrix<f64>, y: &DVector<f64>) -> Vec<f64> {
    let lambda_max = (theta.transpose() * y).amax();
    (0..LAMBDA_GRID_POINTS).map(|k| lambda_max * LAMBDA_GRID_SPAN.powf(k as f64 / (LAMBDA_GRID_POINTS - 1) as f64)).collect()
}

/// Sparse regression of the extracted mode onto the library. Without an
/// explicit λ the grid is swept and the largest λ whose leave-one-out error
/// is within one standard error of the minimum is kept.
pub fn sindy_select(omega_e: &DVector<f64>, library: &CandidateLibrary, lambda: Option<f64>) -> Result<SindyResult> {
    let theta = &library.theta;
    if omega_e.len() != theta.nrows() {
        return Err(Error::Dimension { expected: theta.nrows(), got: omega_e.len() });
    }
    if omega_e.norm() == 0.0 {
        return Err(Error::Identification("extracted mode is identically zero".into()));
    }
    let finish = |xi: DVector<f64>, lambda: f64, path: Vec<LambdaPoint>| {
        let (active_set, refit) = refit_support(theta, omega_e, active_set(&xi));
        SindyResult {
            residual: relative_residual(theta, omega_e, &xi),
            active_set,
            refit,
            labels: library.labels.clone(),
            xi,
            lambda,
            path,
        }
    };
    if let Some(lambda) = lambda {
        if !(lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda {lambda} must be non-negative")));
        }
        return Ok(finish(lasso(theta, omega_e, lambda, None), lambda, Vec::new()));
    }

    let grid = lambda_grid(theta, omega_e);
    let rows = theta.nrows();
    // leave-one-out errors, each fold warm-started down the path
    let mut fold_err = vec![vec![0.0; rows]; grid.len()];
    for out in 0..rows {
        let keep: Vec<usize> = (0..rows).filter(|&r| r != out).collect();
        let t_fold = theta.select_rows(keep.iter());
        let y_fold = omega_e.select_rows(keep.iter());
        let mut warm: Option<DVector<f64>> = None;
        for (g, &lam) in grid.iter().enumerate() {
            let xi = lasso(&t_fold, &y_fold, lam, warm.as_ref());
            let pred = theta.row(out).dot(&xi.transpose());
            fold_err[g][out] = (omega_e[out] - pred).powi(2);
            warm = Some(xi);
        }
    }
    let mut full = Vec::with_capacity(grid.len());
    let mut warm: Option<DVector<f64>> = None;
    for &lam in &grid {
        let xi = lasso(theta, omega_e, lam, warm.as_ref());
        warm = Some(xi.clone());
        full.push(xi);
    }
    let path: Vec<LambdaPoint> = grid
        .iter()
        .enumerate()
        .map(|(g, &lam)| {
            let errs = &fold_err[g];
            let mean = errs.iter().sum::<f64>() / rows as f64;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (rows - 1) as f64;
            LambdaPoint {
                lambda: lam,
                cv_error: mean,
                cv_se: (var / rows as f64).sqrt(),
                residual: relative_residual(theta, omega_e, &full[g]),
                active: active_set(&full[g]).len(),
            }
        })
        .collect();

    let fits: Vec<usize> = (0..grid.len()).filter(|&g| path[g].residual < MAX_FIT_RESIDUAL).collect();
    if fits.is_empty() {
        return Err(Error::Identification(format!(
            "no lambda fits the mode below relative residual {MAX_FIT_RESIDUAL}; the library is inadequate"
        )));
    }
    let best = *fits.iter().min_by(|&&a, &&b| path[a].cv_error.total_cmp(&path[b].cv_error)).unwrap();
    let bound = path[best].cv_error + path[best].cv_se;
    // grid is descending, so the first admissible point is the sparsest
    let chosen = *fits.iter().find(|&&g| path[g].cv_error <= bound).unwrap();
    Ok(finish(full[chosen].clone(), grid[chosen], path))
}

/// Label of the largest coefficient, refusing near ties.
pub fn select_mode_shape(sindy: &SindyResult) -> Result<(BoundaryCondition, usize)> {
    if sindy.active_set.is_empty() {
        return Err(Error::Identification("empty active set".into()));
    }
    let (first, second) = top_two(&sindy.xi);
    let (a, b) = (sindy.xi[first].abs(), sindy.xi[second].abs());
    if first != second && b >= AMBIGUITY_RATIO * a {
        let name = |k: usize| format!("{}{}", sindy.labels[k].0.abbrev(), sindy.labels[k].1);
        return Err(Error::Ambiguous {
            first: name(first),
            first_coef: sindy.xi[first],
            second: name(second),
            second_coef: sindy.xi[second],
        });
    }
    Ok(sindy.labels[first])
}

/// Everything the identification pipeline produced, for reporting.
#[derive(Debug, Clone)]
pub struct IdentificationReport {
    pub selected: Option<(BoundaryCondition, usize)>,
    pub selection_error: Option<String>,
    pub dmd: DmdResult,
    pub sindy: SindyResult,
    pub snapshot_norm: f64,
}

impl IdentificationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match (&self.selected, &self.selection_error) {
            (Some((bc, order)), _) => {
                let _ = writeln!(s, "selected: {}{} ({bc}, mode {order})", bc.abbrev(), order);
            }
            (None, Some(e)) => {
                let _ = writeln!(s, "selected: none ({e})");
            }
            _ => {}
        }
        let _ = writeln!(s, "dominance_ratio: {:.3}", self.sindy.dominance_ratio());
        let _ = writeln!(s, "lambda: {:.6e}", self.sindy.lambda);
        let _ = writeln!(s, "fit_residual: {:.6e}", self.sindy.residual);
        let _ = writeln!(s, "dmd_rank: {}", self.dmd.rank);
        let _ = writeln!(s, "dmd_residual: {:.6e}", self.dmd.residual);
        let _ = writeln!(s, "snapshot_norm: {:.6e}", self.snapshot_norm);
        let _ = writeln!(s, "dominant_mode: {}", join(self.dmd.dominant_mode.iter()));
        s.push_str("dmd_modes:\n");
        for k in 0..self.dmd.rank {
            let _ = writeln!(
                s,
                "  {k}: freq_hz={:.4} amplitude={:.4e} |eig|={:.6}",
                self.dmd.frequencies[k],
                self.dmd.amplitudes[k],
                self.dmd.eigenvalues[k].norm()
            );
        }
        s.push_str("coefficients:\n");
        for (k, &(bc, order)) in self.sindy.labels.iter().enumerate() {
            let mark = if self.sindy.active_set.contains(&k) { " *" } else { "" };
            let _ = writeln!(s, "  {}{}: {:.6e}{mark}", bc.abbrev(), order, self.sindy.xi[k]);
        }
        if !self.sindy.path.is_empty() {
            s.push_str("lambda_path:\n");
            for p in &self.sindy.path {
                let _ = writeln!(
                    s,
                    "  lambda={:.4e} loo={:.4e} se={:.4e} residual={:.4e} active={}",
                    p.lambda, p.cv_error, p.cv_se, p.residual, p.active
                );
            }
        }
        s
    }
}

fn join<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    vals.map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
}

/// DMD, library regression and selection on recorded snapshots. Selection
/// ambiguity is kept in the report rather than raised.
pub fn identify(snapshots: &SnapshotMatrix, length: f64) -> Result<IdentificationReport> {
    let dmd = dmd(snapshots, None)?;
    let library = build_library(&BoundaryCondition::ALL, &snapshots.sample_points, length)?;
    let sindy = sindy_select(&dmd.dominant_mode, &library, None)?;
    let (selected, selection_error) = match select_mode_shape(&sindy) {
        Ok(sel) => (Some(sel), None),
        Err(e @ Error::Ambiguous { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(IdentificationReport { selected, selection_error, snapshot_norm: snapshots.data().norm(), dmd, sindy })
}
