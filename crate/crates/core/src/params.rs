//! Physical parameters, frames and elementary geometry of the mechanism.
//!
//! Everything is stored in SI units. Configuration documents may declare
//! millimetres and kg·mm² (the form the nominal specification sheet uses);
//! [`load_params`] converts them on the way in.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Branch angles α_i = (i−1)·2π/3.
pub const BRANCH_ANGLES: [f64; 3] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

/// The canonical parameter file shipped with the crate.
pub const TABLE1_CFG: &str = include_str!("../../../table1.cfg");

/// Geometry, inertia and material constants of the manipulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismParams {
    /// Radius of the circle through the base joints A_i, m.
    pub base_radius: f64,
    /// Radius of the circle through the platform joints C_i, m.
    pub platform_radius: f64,
    /// Flexible actuation-link length l1, m.
    pub l1: f64,
    /// Rigid intermediate-link length l2, m.
    pub l2: f64,
    /// Mass per unit length of the actuation links, kg/m.
    pub rho: f64,
    /// Young's modulus, Pa.
    pub youngs_modulus: f64,
    /// Area moment of inertia for in-plane bending, m⁴.
    pub area_moment: f64,
    pub link_width: f64,
    pub link_thickness: f64,
    /// Intermediate-link mass, kg.
    pub m_r: f64,
    /// Intermediate-link rotational inertia about its centre of mass, kg·m².
    pub j_r: f64,
    /// Distance from B_i to the intermediate-link centre of mass, m.
    pub l_c: f64,
    /// Platform mass, kg.
    pub m_e: f64,
    /// Platform rotational inertia, kg·m².
    pub j_e: f64,
    pub alpha: [f64; 3],
}

impl MechanismParams {
    /// Parameters of the nominal specification sheet (`table1.cfg`).
    pub fn table1() -> Self {
        load_params(TABLE1_CFG).expect("bundled table1.cfg is valid")
    }

    /// Flexural rigidity E·I of the actuation links.
    pub fn flexural_rigidity(&self) -> f64 {
        self.youngs_modulus * self.area_moment
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(what.to_string()))
            }
        };
        check(self.platform_radius > 0.0, "r > 0")?;
        check(self.base_radius > self.platform_radius, "R > r")?;
        check(self.l1 > 0.0 && self.l2 > 0.0, "l1, l2 > 0")?;
        check(self.rho > 0.0, "rho > 0")?;
        check(self.youngs_modulus > 0.0, "E > 0")?;
        check(self.area_moment > 0.0, "I > 0")?;
        check(self.m_r > 0.0 && self.j_r > 0.0, "m_r, J_r > 0")?;
        check(self.m_e > 0.0 && self.j_e > 0.0, "m_e, J_e > 0")?;
        check(self.l_c >= 0.0 && self.l_c <= self.l2, "0 <= l_c <= l2")?;
        check(self.alpha == BRANCH_ANGLES, "alpha = [0, 2pi/3, 4pi/3]")?;
        check(
            [
                self.base_radius,
                self.platform_radius,
                self.l1,
                self.l2,
                self.rho,
                self.youngs_modulus,
                self.area_moment,
                self.m_r,
                self.j_r,
                self.l_c,
                self.m_e,
                self.j_e,
            ]
            .iter()
            .all(|v| v.is_finite()),
            "all parameters finite",
        )
    }

    /// Base joint position P_Ai.
    pub fn base_joint(&self, branch: usize) -> Vector2<f64> {
        let a = self.alpha[branch];
        Vector2::new(self.base_radius * a.cos(), self.base_radius * a.sin())
    }
}

/// Platform pose q_e = (x, y, θ).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlatformPose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PlatformPose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Vector3<f64>> for PlatformPose {
    fn from(v: Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Unit vectors u_i (along the undeformed actuation link) and v_i (its
/// in-plane normal) for actuation angle `q_a` on `branch` (0-based).
pub fn branch_unit_vectors(params: &MechanismParams, q_a: f64, branch: usize) -> (Vector2<f64>, Vector2<f64>) {
    let psi = params.alpha[branch] + q_a;
    let (s, c) = psi.sin_cos();
    (Vector2::new(c, s), Vector2::new(-s, c))
}

/// Platform joint positions P_Ci for a given pose.
pub fn platform_corner_positions(params: &MechanismParams, pose: &PlatformPose) -> [Vector2<f64>; 3] {
    std::array::from_fn(|i| {
        let ang = pose.theta + params.alpha[i];
        Vector2::new(pose.x + params.platform_radius * ang.cos(), pose.y + params.platform_radius * ang.sin())
    })
}

/// Reads and converts a parameter document from disk.
pub fn load_params_file(path: impl AsRef<Path>) -> Result<MechanismParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_params(&text)
}

/// Parses a TOML parameter document with an explicit `[units]` block and
/// returns SI parameters. Intermediate-link properties default to a uniform
/// beam with the actuation-link section when not given.
pub fn load_params(text: &str) -> Result<MechanismParams> {
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let units = Units::from_doc(&doc)?;

    let length = |key: &str| -> Result<f64> { Ok(get_f64(&doc, key)? * units.length) };
    let base_radius = length("base.radius")?;
    let platform_radius = length("platform.radius")?;
    let l1 = length("links.actuation_length")?;
    let l2 = length("links.intermediate_length")?;
    let link_width = length("links.width")?;
    let link_thickness = length("links.thickness")?;
    let rho = get_f64(&doc, "links.linear_density")? * units.linear_density;
    let youngs_modulus = get_f64(&doc, "links.youngs_modulus")? * units.modulus;
    let m_e = get_f64(&doc, "platform.mass")? * units.mass;
    let j_e = get_f64(&doc, "platform.inertia")? * units.inertia;

    let area_moment = match opt_f64(&doc, "links.area_moment")? {
        Some(v) => v * units.length.powi(4),
        None => link_width * link_thickness.powi(3) / 12.0,
    };
    let m_r = match opt_f64(&doc, "intermediate.mass")? {
        Some(v) => v * units.mass,
        None => rho * l2,
    };
    let l_c = match opt_f64(&doc, "intermediate.com_offset")? {
        Some(v) => v * units.length,
        None => 0.5 * l2,
    };
    let j_r = match opt_f64(&doc, "intermediate.inertia")? {
        Some(v) => v * units.inertia,
        None => m_r * l2 * l2 / 12.0,
    };

    let params = MechanismParams {
        base_radius,
        platform_radius,
        l1,
        l2,
        rho,
        youngs_modulus,
        area_moment,
        link_width,
        link_thickness,
        m_r,
        j_r,
        l_c,
        m_e,
        j_e,
        alpha: BRANCH_ANGLES,
    };
    params.validate()?;
    Ok(params)
}

struct Units {
    length: f64,
    mass: f64,
    inertia: f64,
    modulus: f64,
    linear_density: f64,
}

impl Units {
    fn from_doc(doc: &toml::Table) -> Result<Self> {
        let unit = |key: &str, table: &[(&str, f64)]| -> Result<f64> {
            let name = get_str(doc, key)?;
            table
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, f)| *f)
                .ok_or_else(|| Error::Config(format!("unsupported unit `{name}` for `{key}`")))
        };
        Ok(Self {
            length: unit("units.length", &[("m", 1.0), ("mm", 1e-3)])?,
            mass: unit("units.mass", &[("kg", 1.0), ("g", 1e-3)])?,
            inertia: unit("units.inertia", &[("kg*m^2", 1.0), ("kg*mm^2", 1e-6), ("g*mm^2", 1e-9)])?,
            modulus: unit("units.modulus", &[("Pa", 1.0), ("MPa", 1e6), ("GPa", 1e9)])?,
            linear_density: unit("units.linear_density", &[("kg/m", 1.0), ("g/mm", 1.0)])?,
        })
    }
}

fn lookup<'a>(doc: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = doc.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn opt_f64(doc: &toml::Table, key: &str) -> Result<Option<f64>> {
    match lookup(doc, key) {
        None => Ok(None),
        Some(toml::Value::Float(f)) => Ok(Some(*f)),
        Some(toml::Value::Integer(i)) => Ok(Some(*i as f64)),
        Some(other) => Err(Error::Config(format!("`{key}` must be a number, found {}", other.type_str()))),
    }
}

fn get_f64(doc: &toml::Table, key: &str) -> Result<f64> {
    opt_f64(doc, key)?.ok_or_else(|| Error::MissingKey(key.to_string()))
}

fn get_str<'a>(doc: &'a toml::Table, key: &str) -> Result<&'a str> {
    match lookup(doc, key) {
        None => Err(Error::MissingKey(key.to_string())),
        Some(v) => v.as_str().ok_or_else(|| Error::Config(format!("`{key}` must be a string"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn table1_converts_to_si() {
        let p = MechanismParams::table1();
        assert_eq!(p.base_radius, 0.8);
        assert_eq!(p.platform_radius, 0.289);
        assert_relative_eq!(p.j_e, 5.764e-3, max_relative = 1e-12);
        assert_relative_eq!(p.area_moment, 3.125e-10, max_relative = 1e-12);
        assert_relative_eq!(p.m_r, 0.2493, max_relative = 1e-12);
        assert_relative_eq!(p.l_c, 0.3, max_relative = 1e-12);
        assert_relative_eq!(p.j_r, 7.479e-3, max_relative = 1e-12);
        assert_relative_eq!(p.flexural_rigidity(), 7.102e10 * 3.125e-10, max_relative = 1e-12);
    }

    #[test]
    fn missing_key_is_named() {
        let text = TABLE1_CFG.replace("youngs_modulus", "# youngs_modulus");
        match load_params(&text) {
            Err(Error::MissingKey(k)) => assert_eq!(k, "links.youngs_modulus"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violation_reports_predicate() {
        let text = TABLE1_CFG.replace("radius = 289.0", "radius = 900.0");
        match load_params(&text) {
            Err(Error::Validation(p)) => assert_eq!(p, "R > r"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unit_vectors() {
        let p = MechanismParams::table1();
        let (u, v) = branch_unit_vectors(&p, 0.0, 0);
        assert_relative_eq!(u, Vector2::new(1.0, 0.0));
        assert_relative_eq!(v, Vector2::new(0.0, 1.0));
        let (u, _) = branch_unit_vectors(&p, 0.0, 1);
        assert_relative_eq!(u, Vector2::new((2.0 * PI / 3.0).cos(), (2.0 * PI / 3.0).sin()));
        let (u, v) = branch_unit_vectors(&p, PI / 2.0, 0);
        assert_relative_eq!(u, Vector2::new(0.0, 1.0), epsilon = 1e-15);
        assert_relative_eq!(v, Vector2::new(-1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn corners_at_home() {
        let p = MechanismParams::table1();
        let c = platform_corner_positions(&p, &PlatformPose::default());
        assert_relative_eq!(c[0], Vector2::new(0.289, 0.0));
        for (i, ci) in c.iter().enumerate() {
            assert_relative_eq!(ci.norm(), 0.289, max_relative = 1e-14);
            let next = c[(i + 1) % 3];
            let ang = (ci.x * next.x + ci.y * next.y) / (0.289 * 0.289);
            assert_relative_eq!(ang, (2.0 * PI / 3.0).cos(), epsilon = 1e-14);
        }
    }

    #[test]
    fn corners_off_center() {
        let p = MechanismParams::table1();
        let c = platform_corner_positions(&p, &PlatformPose::new(0.1, -0.05, 0.2));
        // independent evaluation
        let r = 0.289_f64;
        let exp = [
            (0.1 + r * 0.2_f64.cos(), -0.05 + r * 0.2_f64.sin()),
            (0.1 + r * (0.2 + 2.0 * PI / 3.0).cos(), -0.05 + r * (0.2 + 2.0 * PI / 3.0).sin()),
            (0.1 + r * (0.2 + 4.0 * PI / 3.0).cos(), -0.05 + r * (0.2 + 4.0 * PI / 3.0).sin()),
        ];
        for (ci, e) in c.iter().zip(exp) {
            assert_relative_eq!(ci.x, e.0, epsilon = 1e-15);
            assert_relative_eq!(ci.y, e.1, epsilon = 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn unit_vectors_orthonormal(q in -10.0f64..10.0, b in 0usize..3) {
            let p = MechanismParams::table1();
            let (u, v) = branch_unit_vectors(&p, q, b);
            proptest::prop_assert!((u.norm() - 1.0).abs() < 1e-15);
            proptest::prop_assert!((v.norm() - 1.0).abs() < 1e-15);
            proptest::prop_assert!(u.dot(&v).abs() < 1e-15);
        }

        #[test]
        fn corners_equivariant(x in -0.2f64..0.2, y in -0.2f64..0.2, th in -1.0f64..1.0,
                               dx in -0.1f64..0.1, dy in -0.1f64..0.1) {
            let p = MechanismParams::table1();
            let a = platform_corner_positions(&p, &PlatformPose::new(x, y, th));
            let b = platform_corner_positions(&p, &PlatformPose::new(x + dx, y + dy, th));
            for i in 0..3 {
                proptest::prop_assert!((b[i] - a[i] - Vector2::new(dx, dy)).norm() < 1e-14);
            }
            let c = platform_corner_positions(&p, &PlatformPose::new(0.0, 0.0, th));
            let d = platform_corner_positions(&p, &PlatformPose::new(0.0, 0.0, th + 2.0 * PI / 3.0));
            for i in 0..3 {
                proptest::prop_assert!((d[i] - c[(i + 1) % 3]).norm() < 1e-14);
            }
        }
    }
}
