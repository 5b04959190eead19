//! Run configuration: a strict TOML document whose physical keys carry
//! their units. Lengths are millimetres and times microseconds internally,
//! so `c0_m_per_s` becomes mm/µs and `f_khz` becomes 1/µs.

use std::path::{Path, PathBuf};

use fcmfwi_core::adjoint::KernelRule;
use fcmfwi_core::assembly::MassKind;
use fcmfwi_core::geometry::{Aabb, Point, Shape};
use fcmfwi_core::material::Strategy;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainConfig,
    pub sources: SourcesConfig,
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub width_mm: f64,
    pub height_mm: f64,
    pub rho0_kg_per_m3: f64,
    pub c0_m_per_s: f64,
    #[serde(default = "default_eps")]
    pub eps_fict: f64,
    /// Material below the natural cubic spline through these points is void.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lower_boundary_mm: Vec<[f64; 2]>,
    /// Known voids.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<ShapeConfig>,
    /// Unknown voids, used only when synthesizing reference data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defects: Vec<ShapeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ShapeConfig {
    Circle { x_mm: f64, y_mm: f64, r_mm: f64 },
    Ellipse { x_mm: f64, y_mm: f64, a_mm: f64, b_mm: f64, angle_deg: f64 },
    Rect { x0_mm: f64, y0_mm: f64, x1_mm: f64, y1_mm: f64 },
}

impl ShapeConfig {
    pub fn to_shape(&self) -> Shape {
        match *self {
            Self::Circle { x_mm, y_mm, r_mm } => Shape::Circle { center: Point::new(x_mm, y_mm), radius: r_mm },
            Self::Ellipse { x_mm, y_mm, a_mm, b_mm, angle_deg } => {
                Shape::Ellipse { center: Point::new(x_mm, y_mm), a: a_mm, b: b_mm, angle: angle_deg.to_radians() }
            }
            Self::Rect { x0_mm, y0_mm, x1_mm, y1_mm } => Shape::Box(Aabb::from_coords(x0_mm, y0_mm, x1_mm, y1_mm)),
        }
    }

    fn sizes(&self) -> Vec<f64> {
        match *self {
            Self::Circle { r_mm, .. } => vec![r_mm],
            Self::Ellipse { a_mm, b_mm, .. } => vec![a_mm, b_mm],
            Self::Rect { x0_mm, y0_mm, x1_mm, y1_mm } => vec![x1_mm - x0_mm, y1_mm - y0_mm],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesConfig {
    pub x_mm: Vec<f64>,
    pub y_mm: f64,
    pub sigma_mm: f64,
    pub f_khz: f64,
    /// Exponent of the sine window of the two-cycle burst.
    #[serde(default = "default_envelope")]
    pub envelope_exponent: f64,
    /// Receiver positions; empty means every source position (full matrix capture).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub receivers_mm: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassChoice {
    Consistent,
    Lumped,
}

impl From<MassChoice> for MassKind {
    fn from(m: MassChoice) -> Self {
        match m {
            MassChoice::Consistent => MassKind::Consistent,
            MassChoice::Lumped => MassKind::Lumped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub p: usize,
    pub h_mm: f64,
    #[serde(default = "one")]
    pub n_v: usize,
    #[serde(default = "default_mass")]
    pub mass: MassChoice,
    pub t_max_us: f64,
    pub n_t: usize,
    /// Take more steps than `n_t` when `dt_safety · Δt_c` demands it.
    #[serde(default = "yes")]
    pub auto_dt: bool,
    #[serde(default = "default_safety")]
    pub dt_safety: f64,
    /// Gauss points per direction; default p + 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauss_order: Option<usize>,
    /// Quadtree depth on cut voxels; default p + 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadtree_depth: Option<u32>,
    #[serde(default = "default_source_order")]
    pub source_order: usize,
    #[serde(default = "one")]
    pub history_stride: usize,
    /// Synthesis mesh uses h / synthesis_h_factor ...
    #[serde(default = "two")]
    pub synthesis_h_factor: usize,
    /// ... and degree p + synthesis_p_increase.
    #[serde(default = "one")]
    pub synthesis_p_increase: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyChoice {
    WarmStart,
    Restart,
}

impl From<StrategyChoice> for Strategy {
    fn from(s: StrategyChoice) -> Self {
        match s {
            StrategyChoice::WarmStart => Strategy::WarmStart,
            StrategyChoice::Restart => Strategy::Restart,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    VoxelIntegral,
    Midpoint,
}

impl From<KernelChoice> for KernelRule {
    fn from(k: KernelChoice) -> Self {
        match k {
            KernelChoice::VoxelIntegral => KernelRule::VoxelIntegral,
            KernelChoice::Midpoint => KernelRule::Midpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    #[serde(default = "default_stage1")]
    pub iterations_stage1: usize,
    #[serde(default = "default_stage2")]
    pub iterations_stage2: usize,
    /// Skip the indicator and stage 2.
    #[serde(default = "yes")]
    pub refine: bool,
    #[serde(default = "default_nvs")]
    pub n_vs: usize,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default = "default_tau")]
    pub tau_fraction: f64,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyChoice,
    #[serde(default = "default_gamma_min")]
    pub gamma_min: f64,
    #[serde(default = "default_gamma_max")]
    pub gamma_max: f64,
    /// `[x0, y0, x1, y1]`; voxels outside stay at γ = 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_mm: Option<[f64; 4]>,
    #[serde(default = "default_kernel")]
    pub kernel: KernelChoice,
    /// Precondition the optimizer by level-0 over voxel area.
    #[serde(default = "yes")]
    pub area_scaling: bool,
    #[serde(default = "default_memory")]
    pub memory: usize,
    #[serde(default = "default_armijo")]
    pub armijo: f64,
    #[serde(default = "default_trials")]
    pub max_trials: usize,
    #[serde(default)]
    pub tol_grad: f64,
    #[serde(default)]
    pub tol_chi: f64,
    /// Directory of reference trace files; default `<output.dir>/reference`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_dir: Option<String>,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations_stage1: default_stage1(),
            iterations_stage2: default_stage2(),
            refine: true,
            n_vs: default_nvs(),
            layers: 1,
            tau_fraction: default_tau(),
            strategy: default_strategy(),
            gamma_min: default_gamma_min(),
            gamma_max: default_gamma_max(),
            window_mm: None,
            kernel: default_kernel(),
            area_scaling: true,
            memory: default_memory(),
            armijo: default_armijo(),
            max_trials: default_trials(),
            tol_grad: 0.0,
            tol_chi: 0.0,
            reference_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_log")]
    pub log: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dump_gradient: bool,
    #[serde(default)]
    pub dump_history: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir(), threads: 0, log: default_log(), seed: 0, dump_gradient: false, dump_history: false }
    }
}

/// Mesh family of the forward convergence study. Geometry, source and time
/// grid come from the other sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub p: Vec<usize>,
    pub h_mm: Vec<f64>,
    pub mass: Vec<MassChoice>,
    pub reference_h_mm: f64,
    pub reference_p: usize,
    /// `[x0, y0, x1, y1]`
    pub window_mm: [f64; 4],
    pub eval_nx: usize,
    pub eval_ny: usize,
    /// Number of finest meshes used for the slope fit.
    #[serde(default = "three")]
    pub fit_last: usize,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_envelope() -> f64 {
    2.0
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn yes() -> bool {
    true
}
fn default_mass() -> MassChoice {
    MassChoice::Consistent
}
fn default_safety() -> f64 {
    0.8
}
fn default_source_order() -> usize {
    10
}
fn default_stage1() -> usize {
    3
}
fn default_stage2() -> usize {
    10
}
fn default_nvs() -> usize {
    4
}
fn default_tau() -> f64 {
    0.5
}
fn default_strategy() -> StrategyChoice {
    StrategyChoice::Restart
}
fn default_gamma_min() -> f64 {
    1e-5
}
fn default_gamma_max() -> f64 {
    1.0
}
fn default_kernel() -> KernelChoice {
    KernelChoice::VoxelIntegral
}
fn default_memory() -> usize {
    10
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_trials() -> usize {
    20
}
fn default_dir() -> String {
    "out".into()
}
fn default_log() -> String {
    "info".into()
}

/// A parsed configuration together with the directory its relative paths
/// refer to.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn output_dir(&self) -> PathBuf {
        self.base.join(&self.config.output.dir)
    }

    pub fn reference_dir(&self) -> PathBuf {
        match &self.config.inversion.reference_dir {
            Some(d) => self.base.join(d),
            None => self.output_dir().join("reference"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        Self::parse_with(text, &[])
    }

    /// Parses `text` and applies `section.key=value` overrides before
    /// deserializing. Values are TOML literals; bare words become strings.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self, String> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> AppResult<Loaded> {
        let err = |message: String| AppError::Config { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(format!("cannot read: {e}")))?;
        let config = Self::parse_with(&text, overrides).map_err(err)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { config, base })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        let d = &self.domain;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        positive("domain.width_mm", d.width_mm)?;
        positive("domain.height_mm", d.height_mm)?;
        positive("domain.rho0_kg_per_m3", d.rho0_kg_per_m3)?;
        positive("domain.c0_m_per_s", d.c0_m_per_s)?;
        if !(d.eps_fict > 0.0 && d.eps_fict < 1.0) {
            return Err(format!("domain.eps_fict must lie in (0, 1), got {}", d.eps_fict));
        }
        if d.lower_boundary_mm.len() == 1 {
            return Err("domain.lower_boundary_mm needs at least two points".into());
        }
        for s in d.holes.iter().chain(&d.defects) {
            for v in s.sizes() {
                positive("shape size", v)?;
            }
        }
        let s = &self.sources;
        if s.x_mm.is_empty() {
            return Err("sources.x_mm is empty".into());
        }
        positive("sources.sigma_mm", s.sigma_mm)?;
        positive("sources.f_khz", s.f_khz)?;
        if !(s.envelope_exponent >= 0.0) {
            return Err("sources.envelope_exponent must be non-negative".into());
        }
        let inside = |x: f64, y: f64| (0.0..=d.width_mm).contains(&x) && (0.0..=d.height_mm).contains(&y);
        for &x in &s.x_mm {
            if !inside(x, s.y_mm) {
                return Err(format!("source ({x}, {}) mm lies outside the domain", s.y_mm));
            }
        }
        for r in &s.receivers_mm {
            if !inside(r[0], r[1]) {
                return Err(format!("receiver ({}, {}) mm lies outside the domain", r[0], r[1]));
            }
        }
        let t = &self.discretization;
        if !(1..=8).contains(&t.p) {
            return Err(format!("discretization.p must lie in 1..=8, got {}", t.p));
        }
        positive("discretization.h_mm", t.h_mm)?;
        self.spans_for(t.h_mm)?;
        positive("discretization.t_max_us", t.t_max_us)?;
        if t.n_t == 0 || t.n_v == 0 || t.history_stride == 0 || t.synthesis_h_factor == 0 {
            return Err("discretization counts must be positive".into());
        }
        if t.p + t.synthesis_p_increase > 8 {
            return Err("synthesis degree exceeds 8".into());
        }
        if !(t.dt_safety > 0.0 && t.dt_safety <= 1.0) {
            return Err(format!("discretization.dt_safety must lie in (0, 1], got {}", t.dt_safety));
        }
        if t.gauss_order.is_some_and(|q| !(1..=10).contains(&q)) || !(1..=10).contains(&t.source_order) {
            return Err("Gauss orders must lie in 1..=10".into());
        }
        let i = &self.inversion;
        if !(i.gamma_min >= 0.0 && i.gamma_min < i.gamma_max) {
            return Err(format!("need 0 <= gamma_min < gamma_max, got {} and {}", i.gamma_min, i.gamma_max));
        }
        if !(i.tau_fraction > 0.0 && i.tau_fraction <= 1.0) {
            return Err(format!("inversion.tau_fraction must lie in (0, 1], got {}", i.tau_fraction));
        }
        if i.n_vs < 2 {
            return Err("inversion.n_vs must be at least 2".into());
        }
        if let Some(w) = i.window_mm {
            if !(w[0] < w[2] && w[1] < w[3]) {
                return Err("inversion.window_mm must be [x0, y0, x1, y1] with x0 < x1, y0 < y1".into());
            }
        }
        if let Some(c) = &self.convergence {
            if c.p.is_empty() || c.h_mm.is_empty() || c.mass.is_empty() {
                return Err("convergence lists must not be empty".into());
            }
            for &p in c.p.iter().chain([&c.reference_p]) {
                if !(1..=8).contains(&p) {
                    return Err(format!("convergence degree {p} outside 1..=8"));
                }
            }
            for &h in c.h_mm.iter().chain([&c.reference_h_mm]) {
                self.spans_for(h)?;
            }
            if c.eval_nx < 2 || c.eval_ny < 2 || c.fit_last < 2 {
                return Err("convergence evaluation grid and fit need at least two points".into());
            }
        }
        Ok(())
    }

    /// Span counts for knot span length `h`, which must tile the domain.
    pub fn spans_for(&self, h: f64) -> Result<(usize, usize), String> {
        let count = |len: f64| {
            let n = (len / h).round();
            if n >= 1.0 && (n * h - len).abs() <= 1e-9 * len {
                Ok(n as usize)
            } else {
                Err(format!("span length {h} mm does not divide the domain side {len} mm"))
            }
        };
        Ok((count(self.domain.width_mm)?, count(self.domain.height_mm)?))
    }

    /// Wave speed in mm/µs.
    pub fn c0(&self) -> f64 {
        self.domain.c0_m_per_s * 1e-3
    }

    /// Burst frequency in 1/µs.
    pub fn frequency(&self) -> f64 {
        self.sources.f_khz * 1e-3
    }

    pub fn source_points(&self) -> Vec<Point> {
        self.sources.x_mm.iter().map(|&x| Point::new(x, self.sources.y_mm)).collect()
    }

    pub fn receiver_points(&self) -> Vec<Point> {
        if self.sources.receivers_mm.is_empty() {
            self.source_points()
        } else {
            self.sources.receivers_mm.iter().map(|r| Point::new(r[0], r[1])).collect()
        }
    }

    pub fn window(&self) -> Option<Aabb> {
        self.inversion.window_mm.map(|w| Aabb::from_coords(w[0], w[1], w[2], w[3]))
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (path, raw) =
        assignment.split_once('=').ok_or_else(|| format!("override `{assignment}` is not of the form key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(format!("override key `{}` must be section.key", path.trim()));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| format!("override `{path}`: `{k}` is not a section"))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEMO: &str = r#"
[domain]
width_mm = 100.0
height_mm = 50.0
rho0_kg_per_m3 = 2700.0
c0_m_per_s = 6000.0
lower_boundary_mm = [[0.0, 10.0], [50.0, 15.0], [100.0, 10.0]]
holes = [{ kind = "circle", x_mm = 35.0, y_mm = 20.0, r_mm = 7.5 }]
defects = [{ kind = "ellipse", x_mm = 63.0, y_mm = 18.0, a_mm = 6.0, b_mm = 1.0, angle_deg = 67.5 }]

[sources]
x_mm = [18.0, 50.0, 82.0]
y_mm = 50.0
sigma_mm = 1.25
f_khz = 250.0

[discretization]
p = 2
h_mm = 2.5
t_max_us = 30.0
n_t = 800

[inversion]
window_mm = [10.0, 5.0, 90.0, 45.0]
strategy = "warm-start"
"#;

    #[test]
    fn parses_with_defaults_and_units() {
        let c = RunConfig::parse(DEMO).unwrap();
        assert_eq!(c.discretization.mass, MassChoice::Consistent);
        assert_eq!(c.inversion.iterations_stage1, 3);
        assert_eq!(c.inversion.strategy, StrategyChoice::WarmStart);
        assert!((c.c0() - 6.0).abs() < 1e-15);
        assert!((c.frequency() - 0.25).abs() < 1e-15);
        assert_eq!(c.spans_for(2.5).unwrap(), (40, 20));
        assert_eq!(c.receiver_points().len(), 3);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut c = RunConfig::parse(DEMO).unwrap();
        c.convergence = Some(ConvergenceConfig {
            p: vec![1, 2],
            h_mm: vec![0.5, 0.25],
            mass: vec![MassChoice::Consistent, MassChoice::Lumped],
            reference_h_mm: 0.125,
            reference_p: 4,
            window_mm: [70.0, 0.0, 100.0, 50.0],
            eval_nx: 11,
            eval_ny: 21,
            fit_last: 2,
        });
        c.discretization.gauss_order = Some(4);
        let back = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = DEMO.replace("sigma_mm", "sigma");
        let e = RunConfig::parse(&bad).unwrap_err();
        assert!(e.contains("sigma"), "{e}");
        let e = RunConfig::parse(&format!("{DEMO}\n[extra]\na = 1\n")).unwrap_err();
        assert!(e.contains("extra"), "{e}");
        let bad = DEMO.replace("r_mm = 7.5", "r_mm = 7.5, z_mm = 1.0");
        assert!(RunConfig::parse(&bad).is_err());
    }

    #[test]
    fn overrides_apply_in_any_order() {
        let sets = ["discretization.p=3".to_string(), "inversion.strategy=restart".into(), "sources.f_khz = 500".into()];
        let a = RunConfig::parse_with(DEMO, &sets).unwrap();
        let rev: Vec<String> = sets.iter().rev().cloned().collect();
        let b = RunConfig::parse_with(DEMO, &rev).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.discretization.p, 3);
        assert_eq!(a.inversion.strategy, StrategyChoice::Restart);
        assert_eq!(a.sources.f_khz, 500.0);
        assert!(RunConfig::parse_with(DEMO, &["discretization.q=3".into()]).is_err());
        assert!(RunConfig::parse_with(DEMO, &["p".into()]).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (from, to) in [
            ("h_mm = 2.5", "h_mm = 3.0"),
            ("y_mm = 50.0", "y_mm = 51.0"),
            ("p = 2", "p = 0"),
            ("f_khz = 250.0", "f_khz = -1.0"),
            ("strategy = \"warm-start\"", "strategy = \"sideways\""),
        ] {
            assert!(RunConfig::parse(&DEMO.replace(from, to)).is_err(), "{to}");
        }
    }
}
