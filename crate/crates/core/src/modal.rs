//! Euler–Bernoulli mode shapes for the candidate boundary conditions.
//!
//! Every family is evaluated in the split form
//!
//! ```text
//! φ(z) = A cos z + B sin z + P e^(z−λ) + Q e^(−z),   z = λ x / l
//! ```
//!
//! which never forms cosh or sinh of large arguments, so high modes keep
//! full precision.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::MechanismParams;
use crate::quadrature::GaussLegendre;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryCondition {
    ClampedFree,
    PinnedPinned,
    FreeFree,
    PinnedFree,
    ClampedPinned,
    ClampedClamped,
}

impl BoundaryCondition {
    pub const ALL: [BoundaryCondition; 6] = [
        BoundaryCondition::ClampedFree,
        BoundaryCondition::PinnedPinned,
        BoundaryCondition::FreeFree,
        BoundaryCondition::PinnedFree,
        BoundaryCondition::ClampedPinned,
        BoundaryCondition::ClampedClamped,
    ];

    /// Short label such as `CF` or `PP`.
    pub fn abbrev(self) -> &'static str {
        match self {
            BoundaryCondition::ClampedFree => "CF",
            BoundaryCondition::PinnedPinned => "PP",
            BoundaryCondition::FreeFree => "FF",
            BoundaryCondition::PinnedFree => "PF",
            BoundaryCondition::ClampedPinned => "CP",
            BoundaryCondition::ClampedClamped => "CC",
        }
    }

    /// Characteristic function scaled to stay O(1) for large arguments.
    pub fn characteristic(self, lambda: f64) -> f64 {
        use BoundaryCondition::*;
        match self {
            ClampedFree => lambda.cos() + 1.0 / lambda.cosh(),
            ClampedClamped | FreeFree => lambda.cos() - 1.0 / lambda.cosh(),
            ClampedPinned | PinnedFree => lambda.sin() - lambda.cos() * lambda.tanh(),
            PinnedPinned => lambda.sin(),
        }
    }

    fn characteristic_slope(self, lambda: f64) -> f64 {
        use BoundaryCondition::*;
        let sech = 1.0 / lambda.cosh();
        let tanh = lambda.tanh();
        match self {
            ClampedFree => -lambda.sin() - sech * tanh,
            ClampedClamped | FreeFree => -lambda.sin() + sech * tanh,
            ClampedPinned | PinnedFree => lambda.cos() + lambda.sin() * tanh - lambda.cos() * sech * sech,
            PinnedPinned => lambda.cos(),
        }
    }

    /// Whether the mode is scaled to unit tip value (otherwise unit peak).
    fn tip_normalized(self) -> bool {
        matches!(self, BoundaryCondition::ClampedFree | BoundaryCondition::FreeFree | BoundaryCondition::PinnedFree)
    }
}

impl fmt::Display for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

impl FromStr for BoundaryCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "cf" | "clampedfree" => BoundaryCondition::ClampedFree,
            "pp" | "pinnedpinned" => BoundaryCondition::PinnedPinned,
            "ff" | "freefree" => BoundaryCondition::FreeFree,
            "pf" | "pinnedfree" => BoundaryCondition::PinnedFree,
            "cp" | "clampedpinned" => BoundaryCondition::ClampedPinned,
            "cc" | "clampedclamped" => BoundaryCondition::ClampedClamped,
            _ => return Err(Error::Config(format!("unknown boundary condition `{s}`"))),
        })
    }
}

const SCAN_START: f64 = 0.5;
const SCAN_STEP: f64 = std::f64::consts::PI / 64.0;

/// First `n` positive dimensionless roots λ_j = β_j·l of the characteristic
/// equation, excluding the rigid-body root at zero.
pub fn solve_dimensionless_roots(bc: BoundaryCondition, n: usize) -> Result<Vec<f64>> {
    if bc == BoundaryCondition::PinnedPinned {
        return Ok((1..=n).map(|j| j as f64 * std::f64::consts::PI).collect());
    }
    let f = |x: f64| bc.characteristic(x);
    let mut roots = Vec::with_capacity(n);
    let mut lo = SCAN_START;
    let mut f_lo = f(lo);
    let limit = SCAN_START + (n as f64 + 2.0) * std::f64::consts::PI;
    while roots.len() < n {
        let hi = lo + SCAN_STEP;
        if hi > limit {
            return Err(Error::RootBracket { family: bc.to_string(), lo: SCAN_START, hi: limit });
        }
        let f_hi = f(hi);
        if f_lo == 0.0 {
            roots.push(lo);
        } else if f_lo * f_hi < 0.0 {
            roots.push(refine_root(bc, lo, hi));
        }
        lo = hi;
        f_lo = f_hi;
    }
    Ok(roots)
}

fn refine_root(bc: BoundaryCondition, mut lo: f64, mut hi: f64) -> f64 {
    let f = |x: f64| bc.characteristic(x);
    let s_lo = f(lo).signum();
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..20 {
        let step = f(x) / bc.characteristic_slope(x);
        let next = x - step;
        if !(lo - 1e-6..=hi + 1e-6).contains(&next) {
            break;
        }
        x = next;
        if step.abs() < 1e-15 {
            break;
        }
    }
    x
}

/// Wavenumbers β_j (1/m) for a link of the given length.
pub fn solve_characteristic_roots(bc: BoundaryCondition, length: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Domain("at least one root must be requested".into()));
    }
    Ok(solve_dimensionless_roots(bc, n)?.into_iter().map(|l| l / length).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct ShapeCoefficients {
    cos: f64,
    sin: f64,
    grow: f64,
    decay: f64,
    scale: f64,
}

impl ShapeCoefficients {
    fn raw(bc: BoundaryCondition, lam: f64) -> Self {
        use BoundaryCondition::*;
        let (s, c) = lam.sin_cos();
        let em = (-lam).exp();
        let (cos, sin, grow, decay) = match bc {
            ClampedFree => {
                let r = (s - lam.sinh()) / (c + lam.cosh());
                let p = -(c + s + em) / (2.0 * c * em + 1.0 + em * em);
                (1.0, r, p, -(1.0 - r) / 2.0)
            }
            ClampedClamped | ClampedPinned | FreeFree => {
                let sigma = (lam.cosh() - c) / (lam.sinh() - s);
                let p = (c - s - em) / (1.0 - em * em - 2.0 * s * em);
                let q = (1.0 + sigma) / 2.0;
                if bc == FreeFree {
                    (1.0, -sigma, p, q)
                } else {
                    (-1.0, sigma, p, q)
                }
            }
            PinnedFree => {
                let k = s / (1.0 - em * em);
                (0.0, 1.0, k, -k * em)
            }
            PinnedPinned => (0.0, 1.0, 0.0, 0.0),
        };
        Self { cos, sin, grow, decay, scale: 1.0 }
    }

    /// k-th derivative with respect to z.
    fn eval(&self, lam: f64, z: f64, order: u32) -> f64 {
        let (s, c) = z.sin_cos();
        let trig = match order % 4 {
            0 => self.cos * c + self.sin * s,
            1 => -self.cos * s + self.sin * c,
            2 => -self.cos * c - self.sin * s,
            _ => self.cos * s - self.sin * c,
        };
        let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
        self.scale * (trig + self.grow * (z - lam).exp() + sign * self.decay * (-z).exp())
    }
}

/// A boundary-condition family solved for the first `n` modes on a link.
///
/// Mode indices are zero-based throughout the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalBasis {
    pub bc: BoundaryCondition,
    pub length: f64,
    lambdas: Vec<f64>,
    coeffs: Vec<ShapeCoefficients>,
}

impl ModalBasis {
    /// Solves roots and normalization for `n` modes. `n = 0` gives an empty
    /// basis, which turns every link rigid.
    pub fn new(bc: BoundaryCondition, length: f64, n: usize) -> Result<Self> {
        if !(length > 0.0) {
            return Err(Error::Domain(format!("link length {length} must be positive")));
        }
        let lambdas = solve_dimensionless_roots(bc, n)?;
        let coeffs = lambdas
            .iter()
            .map(|&lam| {
                let mut c = ShapeCoefficients::raw(bc, lam);
                let scale = if bc.tip_normalized() { c.eval(lam, lam, 0) } else { peak_value(&c, lam) };
                c.scale = 1.0 / scale;
                c
            })
            .collect();
        Ok(Self { bc, length, lambdas, coeffs })
    }

    /// Clamped-free basis on the actuation links of `params`.
    pub fn clamped_free(params: &MechanismParams, n: usize) -> Result<Self> {
        Self::new(BoundaryCondition::ClampedFree, params.l1, n)
    }

    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    /// Dimensionless roots λ_j = β_j l.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Wavenumbers β_j, 1/m.
    pub fn roots(&self) -> Vec<f64> {
        self.lambdas.iter().map(|l| l / self.length).collect()
    }

    /// Natural frequencies in rad/s, ω_j = β_j² √(EI/ρ).
    pub fn natural_frequencies(&self, flexural_rigidity: f64, rho: f64) -> Vec<f64> {
        let k = (flexural_rigidity / rho).sqrt();
        self.roots().iter().map(|b| b * b * k).collect()
    }

    /// Unchecked evaluation of d^order φ_j / dx^order.
    pub fn phi(&self, j: usize, x: f64, order: u32) -> f64 {
        let lam = self.lambdas[j];
        let z = lam * x / self.length;
        self.coeffs[j].eval(lam, z, order) * (lam / self.length).powi(order as i32)
    }

    /// Checked evaluation of d^order φ_j / dx^order.
    pub fn eval_phi(&self, j: usize, x: f64, order: u32) -> Result<f64> {
        if j >= self.n() {
            return Err(Error::Domain(format!("mode index {j} outside 0..{}", self.n())));
        }
        self.check_x(x)?;
        Ok(self.phi(j, x, order))
    }

    /// All mode values (or derivatives) at one abscissa.
    pub fn phi_vector(&self, x: f64, order: u32) -> DVector<f64> {
        DVector::from_fn(self.n(), |j, _| self.phi(j, x, order))
    }

    /// Tip values φ_j(l).
    pub fn tip_values(&self) -> DVector<f64> {
        self.phi_vector(self.length, 0)
    }

    /// Tip slopes φ′_j(l).
    pub fn tip_slopes(&self) -> DVector<f64> {
        self.phi_vector(self.length, 1)
    }

    /// ω(x) = Σ φ_j(x) q_j for one link.
    pub fn deformation_field(&self, q_f: &[f64], x: f64) -> Result<f64> {
        self.check_len(q_f)?;
        self.check_x(x)?;
        Ok(q_f.iter().enumerate().map(|(j, q)| self.phi(j, x, 0) * q).sum())
    }

    /// Slope of the deformed link at its tip, Σ φ′_j(l) q_j.
    pub fn tip_slope(&self, q_f: &[f64]) -> Result<f64> {
        self.check_len(q_f)?;
        let slope: f64 = q_f.iter().enumerate().map(|(j, q)| self.phi(j, self.length, 1) * q).sum();
        if slope.abs() > 0.3 {
            log::warn!("tip slope {slope:.3} rad outside the small-deflection regime");
        }
        Ok(slope)
    }

    /// Characteristic-equation residual of each root.
    pub fn root_residuals(&self) -> Vec<f64> {
        self.lambdas.iter().map(|&l| self.bc.characteristic(l)).collect()
    }

    /// Gram-type integrals used by the energy expressions.
    pub fn integrals(&self, quad: &GaussLegendre) -> BeamIntegrals {
        let n = self.n();
        let mut phi_phi = DMatrix::zeros(n, n);
        let mut curv_curv = DMatrix::zeros(n, n);
        let mut x_phi = DVector::zeros(n);
        for (x, w) in quad.on_interval(0.0, self.length) {
            let p = self.phi_vector(x, 0);
            let c = self.phi_vector(x, 2);
            phi_phi += w * &p * p.transpose();
            curv_curv += w * &c * c.transpose();
            x_phi += w * x * &p;
        }
        BeamIntegrals { phi_phi, curv_curv, x_phi }
    }

    /// CSV table of roots and natural frequencies.
    pub fn summary_csv(&self, params: &MechanismParams) -> String {
        let omegas = self.natural_frequencies(params.flexural_rigidity(), params.rho);
        let mut out = String::from("family,mode,lambda,beta_per_m,omega_rad_s,freq_hz\n");
        for (j, (lam, w)) in self.lambdas.iter().zip(omegas).enumerate() {
            out.push_str(&format!(
                "{},{},{:.12},{:.12},{:.9},{:.9}\n",
                self.bc,
                j + 1,
                lam,
                lam / self.length,
                w,
                w / (2.0 * std::f64::consts::PI)
            ));
        }
        out
    }

    fn check_x(&self, x: f64) -> Result<()> {
        let tol = 1e-12 * self.length;
        if x < -tol || x > self.length + tol || !x.is_finite() {
            return Err(Error::Domain(format!("x = {x} outside [0, {}]", self.length)));
        }
        Ok(())
    }

    fn check_len(&self, q_f: &[f64]) -> Result<()> {
        if q_f.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), got: q_f.len() });
        }
        Ok(())
    }
}

/// ∫φφᵀ, ∫φ″φ″ᵀ and ∫xφ over one link.
#[derive(Debug, Clone)]
pub struct BeamIntegrals {
    pub phi_phi: DMatrix<f64>,
    pub curv_curv: DMatrix<f64>,
    pub x_phi: DVector<f64>,
}

fn peak_value(c: &ShapeCoefficients, lam: f64) -> f64 {
    let samples = 2000;
    let (mut best_z, mut best) = (0.0, 0.0f64);
    for k in 0..=samples {
        let z = lam * k as f64 / samples as f64;
        let v = c.eval(lam, z, 0);
        if v.abs() > best.abs() {
            best = v;
            best_z = z;
        }
    }
    let mut z = best_z;
    for _ in 0..20 {
        let d2 = c.eval(lam, z, 2);
        if d2 == 0.0 {
            break;
        }
        let next = (z - c.eval(lam, z, 1) / d2).clamp(0.0, lam);
        if (next - z).abs() < 1e-15 {
            break;
        }
        z = next;
    }
    let v = c.eval(lam, z, 0);
    if v.abs() >= best.abs() {
        v
    } else {
        best
    }
}
