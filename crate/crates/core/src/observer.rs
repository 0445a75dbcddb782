//! Neural-network pose observer: training data from inverse kinematics, a
//! small tanh multilayer perceptron trained with Adam, and the rate
//! estimator used on its output.

use std::hash::{Hash, Hasher};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Mechanism;
use crate::modal::ModalBasis;
use crate::params::{MechanismParams, PlatformPose};

pub const INPUT_DIM: usize = 6;
pub const OUTPUT_DIM: usize = 3;
pub const HIDDEN: [usize; 3] = [30, 30, 30];
const MODEL_VERSION: u32 = 1;
/// Below this IK acceptance rate the sampling ranges are rejected.
const MIN_ACCEPTANCE: f64 = 0.9;

/// Sampling box for training data: platform pose and tip deflection of
/// every link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRanges {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub theta: (f64, f64),
    pub tip_deflection: (f64, f64),
}

impl Default for TrainingRanges {
    fn default() -> Self {
        Self { x: (-0.15, 0.15), y: (-0.15, 0.15), theta: (-0.2, 0.2), tip_deflection: (-0.06, 0.06) }
    }
}

impl TrainingRanges {
    /// Whether an observer input lies within `factor` times the ranges. Joint
    /// angles are not range-limited here.
    fn covers_deflections(&self, input: &[f64; INPUT_DIM], factor: f64) -> bool {
        let (lo, hi) = self.tip_deflection;
        input[3..].iter().all(|&w| w >= factor * lo && w <= factor * hi)
    }
}

/// Column-per-sample inputs (q_a1..3, tip deflection 1..3) and targets
/// (x, y, θ).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.ncols() == 0
    }

    pub fn input(&self, k: usize) -> [f64; INPUT_DIM] {
        std::array::from_fn(|r| self.inputs[(r, k)])
    }

    pub fn target(&self, k: usize) -> PlatformPose {
        PlatformPose::new(self.targets[(0, k)], self.targets[(1, k)], self.targets[(2, k)])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("q_a1,q_a2,q_a3,w1,w2,w3,x,y,theta\n");
        for k in 0..self.len() {
            let row: Vec<String> =
                self.inputs.column(k).iter().chain(self.targets.column(k).iter()).map(|v| format!("{v:.17e}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("bad training row: {e}")))?;
            if vals.len() != INPUT_DIM + OUTPUT_DIM {
                return Err(Error::Dimension { expected: INPUT_DIM + OUTPUT_DIM, got: vals.len() });
            }
            rows.push(vals);
        }
        Ok(Self {
            inputs: DMatrix::from_fn(INPUT_DIM, rows.len(), |r, k| rows[k][r]),
            targets: DMatrix::from_fn(OUTPUT_DIM, rows.len(), |r, k| rows[k][INPUT_DIM + r]),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Order-sensitive hash of every value, stored with trained models.
    pub fn content_hash(&self) -> String {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.inputs.iter().chain(self.targets.iter()) {
            v.to_bits().hash(&mut h);
        }
        format!("{:016x}", h.finish())
    }
}

/// Samples poses and tip deflections uniformly and labels them through
/// inverse kinematics. Each tip deflection sets the first clamped-free
/// mode of its link; higher modes are zero.
pub fn generate_training_set(params: &MechanismParams, ranges: &TrainingRanges, count: usize, seed: u64) -> Result<TrainingSet> {
    let basis = ModalBasis::clamped_free(params, 1)?;
    let tip = basis.tip_values()[0];
    let mech = Mechanism::new(params.clone(), basis);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = DMatrix::zeros(INPUT_DIM, count);
    let mut targets = DMatrix::zeros(OUTPUT_DIM, count);
    let (mut accepted, mut attempts) = (0usize, 0usize);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    while accepted < count {
        attempts += 1;
        if attempts >= 100 && (accepted as f64) < MIN_ACCEPTANCE * attempts as f64 - 10.0 {
            return Err(Error::Validation(format!(
                "training ranges lie outside the workspace: {accepted} of {attempts} samples solved"
            )));
        }
        let pose = PlatformPose::new(draw(&mut rng, ranges.x), draw(&mut rng, ranges.y), draw(&mut rng, ranges.theta));
        let tips: [f64; 3] = std::array::from_fn(|_| draw(&mut rng, ranges.tip_deflection));
        let q_f: Vec<f64> = tips.iter().map(|w| w / tip).collect();
        let Ok(ik) = mech.inverse_kinematics(&pose, &q_f) else { continue };
        for i in 0..3 {
            inputs[(i, accepted)] = ik.q_a[i];
            inputs[(3 + i, accepted)] = tips[i];
        }
        targets.set_column(accepted, &pose.to_vector());
        accepted += 1;
    }
    Ok(TrainingSet { inputs, targets })
}

/// Per-feature affine map v ↦ (v − offset)/scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    /// Mean and standard deviation of each row; constant rows get scale 1.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let n = data.ncols().max(1) as f64;
        let offset: Vec<f64> = data.row_iter().map(|r| r.sum() / n).collect();
        let scale = data
            .row_iter()
            .zip(&offset)
            .map(|(r, m)| {
                let sd = (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { offset, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self { offset: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn normalize(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |r, c| (data[(r, c)] - self.offset[r]) / self.scale[r])
    }

    pub fn denormalize(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(data.nrows(), data.ncols(), |r, c| data[(r, c)] * self.scale[r] + self.offset[r])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub data_hash: String,
    pub epochs: usize,
    pub best_test_mse: f64,
}

/// 6 → 30 → 30 → 30 → 3 perceptron, tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverNet {
    pub version: u32,
    pub sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
    pub ranges: TrainingRanges,
    pub meta: TrainingMeta,
}

/// Gradients with the same layout as the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl ObserverNet {
    /// Glorot-uniform weights and zero biases from a seeded stream.
    pub fn new(seed: u64) -> Self {
        let mut sizes = vec![INPUT_DIM];
        sizes.extend(HIDDEN);
        sizes.push(OUTPUT_DIM);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-limit..limit)));
            biases.push(DVector::zeros(w[1]));
        }
        Self {
            version: MODEL_VERSION,
            sizes,
            weights,
            biases,
            input_norm: Normalizer::identity(INPUT_DIM),
            output_norm: Normalizer::identity(OUTPUT_DIM),
            ranges: TrainingRanges::default(),
            meta: TrainingMeta { seed, ..TrainingMeta::default() },
        }
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Activations of every layer for normalized inputs, one column per sample.
    fn forward_all(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l + 1 < self.layers() {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Network output in normalized units.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_all(x).pop().unwrap()
    }

    /// Mean squared error over all entries and its parameter gradient.
    pub fn loss_and_gradients(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Gradients) {
        let acts = self.forward_all(x);
        let out = acts.last().unwrap();
        let diff = out - y;
        let count = diff.len() as f64;
        let loss = diff.norm_squared() / count;
        let mut delta = diff * (2.0 / count);
        let mut gw = vec![DMatrix::zeros(0, 0); self.layers()];
        let mut gb = vec![DVector::zeros(0); self.layers()];
        for l in (0..self.layers()).rev() {
            gw[l] = &delta * acts[l].transpose();
            gb[l] = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                back.zip_apply(&acts[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        (loss, Gradients { weights: gw, biases: gb })
    }

    /// Mean squared error on normalized targets.
    pub fn mse(&self, data: &TrainingSet) -> f64 {
        let x = self.input_norm.normalize(&data.inputs);
        let y = self.output_norm.normalize(&data.targets);
        (self.forward(&x) - y).norm_squared() / (data.len() * OUTPUT_DIM) as f64
    }

    /// Pose estimate from joint angles and tip deflections.
    pub fn predict_pose(&self, input: &[f64; INPUT_DIM]) -> PlatformPose {
        if !self.ranges.covers_deflections(input, 1.2) {
            log::warn!("observer input {input:?} is outside 1.2x the training ranges");
        }
        let mut a = DVector::from_fn(INPUT_DIM, |r, _| (input[r] - self.input_norm.offset[r]) / self.input_norm.scale[r]);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a + b;
            if l + 1 < self.layers() {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        let out: [f64; OUTPUT_DIM] = std::array::from_fn(|r| a[r] * self.output_norm.scale[r] + self.output_norm.offset[r]);
        PlatformPose::new(out[0], out[1], out[2])
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if net.version != MODEL_VERSION {
            return Err(Error::Config(format!("observer model version {} is not supported", net.version)));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch, with exponential decay.
    pub final_learning_rate: f64,
    pub seed: u64,
    /// Wall-clock cap; training stops at the first epoch boundary past it.
    pub time_budget: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 3000, batch_size: 32, learning_rate: 3e-3, final_learning_rate: 1e-6, seed: 0, time_budget: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    /// Lowest test error so far.
    pub best_test_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_test_mse: f64,
    pub elapsed: Duration,
}

struct Adam {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &ObserverNet) -> Self {
        let zw = || net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect::<Vec<_>>();
        let zb = || net.biases.iter().map(|b| DVector::zeros(b.len())).collect::<Vec<_>>();
        Self { m_w: zw(), v_w: zw(), m_b: zb(), v_b: zb(), t: 0 }
    }

    fn step(&mut self, net: &mut ObserverNet, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        };
        for l in 0..net.layers() {
            for k in 0..net.weights[l].len() {
                update(&mut net.weights[l][k], g.weights[l][k], &mut self.m_w[l][k], &mut self.v_w[l][k]);
            }
            for k in 0..net.biases[l].len() {
                update(&mut net.biases[l][k], g.biases[l][k], &mut self.m_b[l][k], &mut self.v_b[l][k]);
            }
        }
    }
}

/// Mini-batch Adam on normalized targets. The returned network is the
/// checkpoint with the lowest test error. A non-finite loss restores that
/// checkpoint into `net` and returns a training error.
pub fn train(net: &mut ObserverNet, train_set: &TrainingSet, test_set: &TrainingSet, cfg: &TrainConfig) -> Result<TrainReport> {
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Validation("training and test sets must be non-empty".into()));
    }
    let start = Instant::now();
    net.input_norm = Normalizer::fit(&train_set.inputs);
    net.output_norm = Normalizer::fit(&train_set.targets);
    let x = net.input_norm.normalize(&train_set.inputs);
    let y = net.output_norm.normalize(&train_set.targets);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = net.clone();
    let mut best_mse = f64::INFINITY;
    let mut history = Vec::new();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let frac = if cfg.epochs > 1 { epoch as f64 / (cfg.epochs - 1) as f64 } else { 0.0 };
        let lr = cfg.learning_rate * (cfg.final_learning_rate / cfg.learning_rate).powf(frac);
        order.shuffle(&mut rng);
        let mut running = 0.0;
        for chunk in order.chunks(batch) {
            let xb = x.select_columns(chunk.iter());
            let yb = y.select_columns(chunk.iter());
            let (loss, g) = net.loss_and_gradients(&xb, &yb);
            if !loss.is_finite() {
                *net = best;
                return Err(Error::Training { epoch });
            }
            running += loss * chunk.len() as f64;
            adam.step(net, &g, lr);
        }
        let test_mse = net.mse(test_set);
        if !test_mse.is_finite() {
            *net = best;
            return Err(Error::Training { epoch });
        }
        if test_mse < best_mse {
            best_mse = test_mse;
            best = net.clone();
        }
        history.push(EpochRecord { epoch, train_mse: running / train_set.len() as f64, test_mse, best_test_mse: best_mse });
        if cfg.time_budget.is_some_and(|b| start.elapsed() >= b) {
            break;
        }
    }
    *net = best;
    net.meta =
        TrainingMeta { seed: cfg.seed, data_hash: train_set.content_hash(), epochs: history.len(), best_test_mse: best_mse };
    Ok(TrainReport { history, best_test_mse: best_mse, elapsed: start.elapsed() })
}

/// Held-out accuracy in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalized_mse: f64,
    pub rmse: [f64; 3],
    pub max_abs_error: [f64; 3],
    pub samples: usize,
}

pub fn evaluate(net: &ObserverNet, data: &TrainingSet) -> EvalReport {
    let x = net.input_norm.normalize(&data.inputs);
    let pred = net.output_norm.denormalize(&net.forward(&x));
    let err = pred - &data.targets;
    let n = data.len().max(1) as f64;
    EvalReport {
        normalized_mse: net.mse(data),
        rmse: std::array::from_fn(|r| (err.row(r).norm_squared() / n).sqrt()),
        max_abs_error: std::array::from_fn(|r| err.row(r).amax()),
        samples: data.len(),
    }
}

/// Backward-difference rate of a sampled signal with an optional
/// first-order low-pass.
#[derive(Debug, Clone)]
pub struct RateEstimator {
    interval: f64,
    smoothing: Option<f64>,
    previous: Option<DVector<f64>>,
    rate: Option<DVector<f64>>,
    dim: usize,
}

impl RateEstimator {
    /// `interval` is the sample spacing; `cutoff_hz` enables the filter.
    pub fn new(dim: usize, interval: f64, cutoff_hz: Option<f64>) -> Self {
        let smoothing = cutoff_hz.map(|fc| {
            let tau = 1.0 / (2.0 * std::f64::consts::PI * fc);
            interval / (interval + tau)
        });
        Self { interval, smoothing, previous: None, rate: None, dim }
    }

    /// Feeds one sample and returns the current rate estimate.
    pub fn update(&mut self, sample: &DVector<f64>) -> DVector<f64> {
        if let Some(prev) = &self.previous {
            let raw = (sample - prev) / self.interval;
            self.rate = Some(match (&self.rate, self.smoothing) {
                (Some(old), Some(a)) => old + a * (raw - old),
                _ => raw,
            });
        }
        self.previous = Some(sample.clone());
        self.current()
    }

    pub fn current(&self) -> DVector<f64> {
        self.rate.clone().unwrap_or_else(|| DVector::zeros(self.dim))
    }
}
