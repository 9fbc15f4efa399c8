use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Result};
use foliwill::catalog::{self, ProfileKind};
use foliwill::functionals::{ConformalMode, ElForm, FunctionalSpec};
use foliwill::geom_patch::FoliatedPatch;
use foliwill::revolution::CriticalProfile;
use foliwill::varcheck::DEFAULT_T;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Surface {
    Sphere {
        n: usize,
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        s: Option<usize>,
    },
    Torus {
        big: f64,
        small: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        s: Option<usize>,
    },
    Cylinder {
        radius: f64,
        length: f64,
    },
    Cone {
        n: usize,
        slope: f64,
        rho_min: f64,
        rho_max: f64,
    },
    Revolution {
        n: usize,
        profile: Shape,
        rho_min: f64,
        rho_max: f64,
    },
    CriticalProfile {
        n: usize,
        p: f64,
        rho0: f64,
        f0: f64,
        fp0: f64,
        rho_min: f64,
        rho_max: f64,
    },
    BumpyTorus {
        eps: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        s: Option<usize>,
    },
    ShearedTorus3 {
        eps: f64,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Catenoid { a: f64 },
    Hemisphere { radius: f64 },
    Cone { slope: f64 },
    Power { c: f64, k: f64 },
}

impl From<Shape> for ProfileKind {
    fn from(s: Shape) -> Self {
        match s {
            Shape::Catenoid { a } => ProfileKind::Catenoid { a },
            Shape::Hemisphere { radius } => ProfileKind::Hemisphere { radius },
            Shape::Cone { slope } => ProfileKind::Cone { slope },
            Shape::Power { c, k } => ProfileKind::Power { c, k },
        }
    }
}

impl Surface {
    pub fn dim(&self) -> usize {
        match self {
            Surface::Sphere { n, .. } | Surface::Cone { n, .. } | Surface::Revolution { n, .. } => *n,
            Surface::CriticalProfile { n, .. } => *n,
            Surface::ShearedTorus3 { .. } => 3,
            _ => 2,
        }
    }

    pub fn default_counts(&self) -> Vec<usize> {
        match self {
            Surface::Sphere { n, .. } => vec![32; *n],
            Surface::Torus { .. } => vec![48, 48],
            Surface::BumpyTorus { .. } => vec![10, 10],
            Surface::ShearedTorus3 { .. } => vec![10, 10, 10],
            _ => {
                let mut c = vec![16; self.dim() - 1];
                c.push(24);
                c
            }
        }
    }

    pub fn build(&self, grid: Option<&[usize]>) -> Result<FoliatedPatch> {
        let default = self.default_counts();
        let counts = grid.unwrap_or(&default);
        if counts.len() != self.dim() {
            bail!("grid needs {} node counts for this surface, got {}", self.dim(), counts.len());
        }
        let patch = match *self {
            Surface::Sphere { n, radius, s } => catalog::sphere(n, radius, s.unwrap_or(n), counts),
            Surface::Torus { big, small, s } => catalog::torus(big, small, s.unwrap_or(1), counts),
            Surface::Cylinder { radius, length } => catalog::cylinder(radius, length, counts),
            Surface::Cone { n, slope, rho_min, rho_max } => catalog::cone(n, slope, rho_min, rho_max, counts),
            Surface::Revolution { n, profile, rho_min, rho_max } => {
                catalog::revolution_analytic(n, profile.into(), rho_min, rho_max, counts)
            }
            Surface::CriticalProfile { n, p, rho0, f0, fp0, rho_min, rho_max } => {
                let prof = CriticalProfile::fit(n, p, rho0, f0, fp0)?;
                prof.check_feasible(rho_min)?;
                prof.check_feasible(rho_max)?;
                catalog::revolution(n, Arc::new(prof), rho_min, rho_max, counts)
            }
            Surface::BumpyTorus { eps, s } => catalog::bumpy_torus_s(counts, eps, s.unwrap_or(1)),
            Surface::ShearedTorus3 { eps } => catalog::sheared_torus3(counts, eps),
        }?;
        Ok(patch)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Functional {
    /// ∫ H_F^p dV.
    W { p: f64 },
    /// ∫ ‖h_F‖^p dV.
    J { p: f64 },
    /// ∫ Q_r^{n/r} dV.
    Conformal { r: usize },
}

impl Functional {
    pub fn spec(&self) -> Result<FunctionalSpec> {
        Ok(match *self {
            Functional::W { p } => FunctionalSpec::w_nps(p)?,
            Functional::J { p } => FunctionalSpec::j_nps(p)?,
            Functional::Conformal { r } => FunctionalSpec::conformal(r)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub n: usize,
    pub p_values: Vec<f64>,
    pub rho0: f64,
    pub f0: f64,
    pub fp0: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub samples: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Max |f_ode − f_closed| over the common window.
    pub tolerance: f64,
    /// Max |k_n − (p−n+1)k_1| along each curve.
    pub criticality_tolerance: f64,
    /// Restart from the first row of an emitted CSV on its own ρ samples; needs a single p.
    pub initial_csv: Option<PathBuf>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            n: 2,
            p_values: (2..=8).map(f64::from).collect(),
            rho0: 0.4,
            f0: 1.0,
            fp0: 0.4,
            rho_min: 0.05,
            rho_max: 1.2,
            samples: 400,
            rtol: 1e-12,
            atol: 0.0,
            tolerance: 1e-6,
            criticality_tolerance: 1e-8,
            initial_csv: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub surface: Surface,
    pub grid: Option<Vec<usize>>,
    pub functional: Functional,
    /// Reference value; defaults to C_n for W_{n,n} on a sphere.
    pub expected: Option<f64>,
    /// Relative tolerance against the reference.
    pub tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            surface: Surface::Sphere { n: 2, radius: 1.0, s: None },
            grid: Some(vec![128, 128]),
            functional: Functional::W { p: 2.0 },
            expected: None,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    Leafwise,
    Exact,
}

impl From<Form> for ElForm {
    fn from(f: Form) -> Self {
        match f {
            Form::Leafwise => ElForm::Leafwise,
            Form::Exact => ElForm::Exact,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElCheckConfig {
    pub surface: Surface,
    pub grid: Option<Vec<usize>>,
    pub functional: Functional,
    pub form: Form,
    /// Max |EL residual| over the nodes clear of the stencil margin.
    pub tolerance: f64,
}

impl Default for ElCheckConfig {
    fn default() -> Self {
        Self {
            surface: Surface::CriticalProfile { n: 2, p: 3.0, rho0: 0.4, f0: 1.0, fp0: 0.4, rho_min: 0.25, rho_max: 0.55 },
            grid: Some(vec![16, 10]),
            functional: Functional::W { p: 3.0 },
            form: Form::Leafwise,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarCheckConfig {
    pub surface: Surface,
    pub grid: Option<Vec<usize>>,
    /// Variation field u: random trigonometric polynomial.
    pub u_seed: u64,
    pub u_degree: i32,
    pub u_scale: f64,
    /// Test function f for δΔ_F f.
    pub f_seed: u64,
    pub t_values: Vec<f64>,
    /// Integral identities on a separate fully periodic patch; null skips them.
    pub identities: Option<IdentityConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentityConfig {
    pub surface: Surface,
    pub grid: Option<Vec<usize>>,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for IdentityConfig {
    fn default() -> Self {
        Self { surface: Surface::Torus { big: 2.0, small: 1.0, s: None }, grid: Some(vec![48, 48]), seed: 7, tolerance: 1e-8 }
    }
}

impl Default for VarCheckConfig {
    fn default() -> Self {
        Self {
            surface: Surface::BumpyTorus { eps: 1.0, s: None },
            grid: None,
            u_seed: 31,
            u_degree: 2,
            u_scale: 0.5,
            f_seed: 32,
            t_values: DEFAULT_T.to_vec(),
            identities: Some(IdentityConfig::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Map {
    Inversion,
    Scaling { factor: f64 },
}

impl From<Map> for ConformalMode {
    fn from(m: Map) -> Self {
        match m {
            Map::Inversion => ConformalMode::Inversion,
            Map::Scaling { factor } => ConformalMode::Scaling(factor),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfCheckConfig {
    pub surface: Surface,
    pub grid: Option<Vec<usize>>,
    pub r: usize,
    pub map: Map,
    /// Defaults to 1e-6 for inversion and 1e-12 for scaling.
    pub tolerance: Option<f64>,
}

impl Default for ConfCheckConfig {
    fn default() -> Self {
        Self { surface: Surface::ShearedTorus3 { eps: 1.0 }, grid: None, r: 2, map: Map::Inversion, tolerance: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecondVarConfig {
    pub n: usize,
    pub p: f64,
    pub rho0: f64,
    pub f0: f64,
    pub fp0: f64,
    pub window: [f64; 2],
    pub nodes: usize,
    pub harmonics: Vec<u32>,
    /// Compare against the general power form on the revolution patch.
    pub cross_check: bool,
    pub leaf_nodes: usize,
    pub tolerance: f64,
}

impl Default for SecondVarConfig {
    fn default() -> Self {
        Self {
            n: 2,
            p: 3.0,
            rho0: 0.4,
            f0: 1.0,
            fp0: 0.4,
            window: [0.2, 0.6],
            nodes: 32,
            harmonics: vec![0, 1],
            cross_check: true,
            leaf_nodes: 16,
            tolerance: 1e-6,
        }
    }
}

pub fn parse<T: DeserializeOwned + Default>(text: Option<&str>) -> Result<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => Ok(serde_json::from_str(t)?),
    }
}

pub fn defaults_json<T: Serialize + Default>() -> String {
    serde_json::to_string_pretty(&T::default()).expect("defaults serialize")
}
