//! Builds geometry, meshes, sources and time grids from a [`RunConfig`].

use fcmfwi_core::assembly::{Assembler, IntegrationConfig, MassKind, SourceSpec, WaveSystem};
use fcmfwi_core::dynamics::{critical_dt, TimeGrid};
use fcmfwi_core::geometry::{AlphaField, NaturalCubicSpline, Point, Shape};
use fcmfwi_core::material::MaterialGrid;
use fcmfwi_core::splines::TensorBasis;
use fcmfwi_core::Result;

use crate::config::RunConfig;

/// Known geometry: the box minus the region below the lower boundary and
/// minus the holes.
pub fn known_alpha(cfg: &RunConfig) -> Result<AlphaField> {
    let d = &cfg.domain;
    let mut voids: Vec<Shape> = d.holes.iter().map(|s| s.to_shape()).collect();
    if !d.lower_boundary_mm.is_empty() {
        let pts: Vec<Point> = d.lower_boundary_mm.iter().map(|p| Point::new(p[0], p[1])).collect();
        voids.push(Shape::BelowSpline(NaturalCubicSpline::new(&pts)?));
    }
    AlphaField::with_holes(voids, d.eps_fict)
}

/// Known geometry with the defects carved out as well.
pub fn true_alpha(cfg: &RunConfig) -> Result<AlphaField> {
    Ok(known_alpha(cfg)?.subtract(cfg.domain.defects.iter().map(|s| s.to_shape()).collect()))
}

pub fn basis(cfg: &RunConfig, h: f64, p: usize) -> Result<TensorBasis> {
    let (sx, sy) = cfg.spans_for(h).map_err(fcmfwi_core::Error::invalid)?;
    TensorBasis::uniform(sx, sy, p, cfg.domain.width_mm, cfg.domain.height_mm)
}

/// Explicit orders never drop below the exact order p + 1 of uncut spans.
pub fn integration(cfg: &RunConfig, p: usize) -> IntegrationConfig {
    let t = &cfg.discretization;
    IntegrationConfig {
        order: t.gauss_order.map_or(p + 1, |q| q.max(p + 1)),
        depth: t.quadtree_depth.unwrap_or(p as u32 + 1),
        source_order: t.source_order,
    }
}

pub fn material_grid(cfg: &RunConfig, basis: &TensorBasis, n_v: usize) -> Result<MaterialGrid> {
    let i = &cfg.inversion;
    MaterialGrid::new(basis.spans(), basis.extent(), n_v, (i.gamma_min, i.gamma_max))
}

pub fn sources(cfg: &RunConfig) -> Result<Vec<SourceSpec>> {
    let s = &cfg.sources;
    cfg.source_points()
        .into_iter()
        .map(|c| {
            let spec = SourceSpec {
                center: c,
                sigma: (s.sigma_mm, s.sigma_mm),
                frequency: cfg.frequency(),
                envelope_exponent: s.envelope_exponent,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

/// A mesh with its cached integration rules.
pub struct Mesh {
    pub h: f64,
    pub p: usize,
    pub assembler: Assembler,
    pub grid: MaterialGrid,
}

impl Mesh {
    pub fn new(cfg: &RunConfig, alpha: &AlphaField, h: f64, p: usize, n_v: usize) -> Result<Self> {
        let basis = basis(cfg, h, p)?;
        let grid = material_grid(cfg, &basis, n_v)?;
        let assembler = Assembler::new(&basis, alpha, &grid, integration(cfg, p))?;
        Ok(Self { h, p, assembler, grid })
    }

    pub fn system(&self, gamma: &[f64], cfg: &RunConfig) -> Result<WaveSystem> {
        self.assembler.assemble(gamma, cfg.domain.rho0_kg_per_m3, cfg.c0())
    }
}

/// Time grid for a system: the configured count, refined when auto mode
/// demands it. Returns the grid and `Δt_c`.
pub fn time_grid(cfg: &RunConfig, system: &WaveSystem, mass: MassKind) -> Result<(TimeGrid, f64)> {
    let solver = system.mass_solver(mass)?;
    let dt_c = critical_dt(system, &solver)?;
    let t = &cfg.discretization;
    let grid = if t.auto_dt {
        TimeGrid::auto(t.t_max_us, t.n_t, dt_c, t.dt_safety)?
    } else {
        TimeGrid::new(t.t_max_us, t.n_t)?
    };
    Ok((grid, dt_c))
}
