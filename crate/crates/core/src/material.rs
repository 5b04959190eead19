//! Piecewise constant voxel representation of the density scaling γ, with a
//! single level of local refinement driven by a jump indicator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{Aabb, AlphaField, Point};
use crate::{Error, Result};

/// State of one level-0 cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    /// Active itself, holding voxel `id`.
    Coarse(usize),
    /// Replaced by `n_vs^2` sub-voxels with ids `first..first + n_vs^2`,
    /// ordered x fastest.
    Refined(usize),
}

/// Active voxel: refinement level and integer coordinates on that level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Voxel {
    pub level: u8,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Sub-voxels inherit the parent value.
    WarmStart,
    /// The whole field restarts from γ = 1.
    Restart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialGrid {
    extent: (f64, f64),
    spans: (usize, usize),
    n_v: usize,
    n_vs: usize,
    bounds: (f64, f64),
    cells: Vec<Cell>,
    voxels: Vec<Voxel>,
    gamma: Vec<f64>,
}

impl MaterialGrid {
    /// Homogeneous γ = 1 grid with `n_v` voxels per knot span and direction.
    pub fn new(spans: (usize, usize), extent: (f64, f64), n_v: usize, bounds: (f64, f64)) -> Result<Self> {
        if spans.0 == 0 || spans.1 == 0 || n_v == 0 {
            return Err(Error::invalid("voxel grid needs positive span and voxel counts"));
        }
        if !(extent.0 > 0.0 && extent.1 > 0.0) {
            return Err(Error::invalid("voxel grid needs a positive extent"));
        }
        if !(bounds.0 >= 0.0 && bounds.0 <= bounds.1) {
            return Err(Error::invalid(format!("invalid γ bounds [{}, {}]", bounds.0, bounds.1)));
        }
        let (nx, ny) = (spans.0 * n_v, spans.1 * n_v);
        let cells = (0..nx * ny).map(Cell::Coarse).collect();
        let voxels = (0..ny).flat_map(|j| (0..nx).map(move |i| Voxel { level: 0, i, j })).collect();
        let gamma = vec![1.0_f64.clamp(bounds.0, bounds.1); nx * ny];
        Ok(Self { extent, spans, n_v, n_vs: 1, bounds, cells, voxels, gamma })
    }

    pub fn extent(&self) -> (f64, f64) {
        self.extent
    }

    pub fn spans(&self) -> (usize, usize) {
        self.spans
    }

    pub fn voxels_per_span(&self) -> usize {
        self.n_v
    }

    /// Sub-voxels per direction in refined cells (1 before refinement).
    pub fn subdivision(&self) -> usize {
        self.n_vs
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// Level-0 cell counts.
    pub fn level0_dims(&self) -> (usize, usize) {
        (self.spans.0 * self.n_v, self.spans.1 * self.n_v)
    }

    /// Level-0 voxel size `h^v`.
    pub fn level0_size(&self) -> (f64, f64) {
        let (nx, ny) = self.level0_dims();
        (self.extent.0 / nx as f64, self.extent.1 / ny as f64)
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn is_refined(&self) -> bool {
        self.cells.iter().any(|c| matches!(c, Cell::Refined(_)))
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }

    /// Replaces all coefficients; values are clipped to the bounds.
    pub fn set_gammas(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.gamma.len() {
            return Err(Error::invalid(format!(
                "expected {} voxel values, got {}",
                self.gamma.len(),
                values.len()
            )));
        }
        let (lo, hi) = self.bounds;
        for (g, v) in self.gamma.iter_mut().zip(values) {
            *g = v.clamp(lo, hi);
        }
        Ok(())
    }

    pub fn set_gamma(&mut self, id: usize, value: f64) {
        self.gamma[id] = value.clamp(self.bounds.0, self.bounds.1);
    }

    pub fn voxel_box(&self, id: usize) -> Aabb {
        let v = self.voxels[id];
        let (hx, hy) = self.level0_size();
        let (hx, hy) = if v.level == 0 { (hx, hy) } else { (hx / self.n_vs as f64, hy / self.n_vs as f64) };
        Aabb::from_coords(v.i as f64 * hx, v.j as f64 * hy, (v.i + 1) as f64 * hx, (v.j + 1) as f64 * hy)
    }

    pub fn voxel_area(&self, id: usize) -> f64 {
        self.voxel_box(id).area()
    }

    /// Knot span containing a voxel.
    pub fn voxel_span(&self, id: usize) -> (usize, usize) {
        let v = self.voxels[id];
        let f = if v.level == 0 { self.n_v } else { self.n_v * self.n_vs };
        (v.i / f, v.j / f)
    }

    /// Level-0 cell index of a voxel.
    pub fn voxel_cell(&self, id: usize) -> usize {
        let v = self.voxels[id];
        let f = if v.level == 0 { 1 } else { self.n_vs };
        v.i / f + self.level0_dims().0 * (v.j / f)
    }

    /// Voxels inside knot span `(sx, sy)` with their boxes.
    pub fn span_voxels(&self, sx: usize, sy: usize) -> Vec<(usize, Aabb)> {
        let nx = self.level0_dims().0;
        let per_cell = self.n_vs * self.n_vs;
        let mut out = Vec::with_capacity(self.n_v * self.n_v);
        for cj in sy * self.n_v..(sy + 1) * self.n_v {
            for ci in sx * self.n_v..(sx + 1) * self.n_v {
                match self.cells[ci + nx * cj] {
                    Cell::Coarse(id) => out.push((id, self.voxel_box(id))),
                    Cell::Refined(first) => {
                        out.extend((first..first + per_cell).map(|id| (id, self.voxel_box(id))))
                    }
                }
            }
        }
        out
    }

    /// Active voxel containing a point; ties on faces go to the +x/+y side.
    pub fn locate(&self, p: Point) -> Result<usize> {
        let (lx, ly) = self.extent;
        if !(p.x >= 0.0 && p.x <= lx && p.y >= 0.0 && p.y <= ly) {
            return Err(Error::out_of_range(format!("point ({}, {}) outside the voxel grid", p.x, p.y)));
        }
        let (nx, ny) = self.level0_dims();
        let (hx, hy) = self.level0_size();
        let ci = index_of(p.x, hx, nx);
        let cj = index_of(p.y, hy, ny);
        match self.cells[ci + nx * cj] {
            Cell::Coarse(id) => Ok(id),
            Cell::Refined(first) => {
                let n = self.n_vs;
                let si = index_of(p.x - ci as f64 * hx, hx / n as f64, n);
                let sj = index_of(p.y - cj as f64 * hy, hy / n as f64, n);
                Ok(first + si + n * sj)
            }
        }
    }

    pub fn gamma_at(&self, p: Point) -> Result<f64> {
        Ok(self.gamma[self.locate(p)?])
    }

    /// Geometric centre of every active voxel, in id order.
    pub fn voxel_midpoints(&self) -> Vec<(usize, Point)> {
        (0..self.voxels.len()).map(|id| (id, self.voxel_box(id).center())).collect()
    }

    /// Voxels that the optimizer may change: midpoint in the physical domain
    /// and inside the optional search window.
    pub fn optimizable(&self, alpha: &AlphaField, window: Option<&Aabb>) -> Vec<bool> {
        self.voxel_midpoints()
            .into_iter()
            .map(|(_, m)| alpha.alpha(m) == 1.0 && window.is_none_or(|w| w.contains(m)))
            .collect()
    }

    /// Replaces the marked level-0 cells by `n_vs^2` sub-voxels each. The
    /// new voxels inherit their parent value.
    pub fn refine_cells(&self, marked: &[bool], n_vs: usize) -> Result<Self> {
        if self.is_refined() {
            return Err(Error::InvalidState("grid already carries refined cells".into()));
        }
        if marked.len() != self.cells.len() {
            return Err(Error::invalid("refinement mask length differs from the level-0 cell count"));
        }
        if n_vs < 2 {
            return Err(Error::invalid(format!("sub-voxel count must be at least 2, got {n_vs}")));
        }
        let (nx, _) = self.level0_dims();
        let mut cells = Vec::with_capacity(self.cells.len());
        let mut voxels = Vec::new();
        let mut gamma = Vec::new();
        for (c, cell) in self.cells.iter().enumerate() {
            let Cell::Coarse(old) = *cell else { unreachable!() };
            let (ci, cj) = (c % nx, c / nx);
            if marked[c] {
                cells.push(Cell::Refined(voxels.len()));
                for b in 0..n_vs {
                    for a in 0..n_vs {
                        voxels.push(Voxel { level: 1, i: ci * n_vs + a, j: cj * n_vs + b });
                        gamma.push(self.gamma[old]);
                    }
                }
            } else {
                cells.push(Cell::Coarse(voxels.len()));
                voxels.push(Voxel { level: 0, i: ci, j: cj });
                gamma.push(self.gamma[old]);
            }
        }
        let n_vs = if marked.iter().any(|&m| m) { n_vs } else { 1 };
        Ok(Self { cells, voxels, gamma, n_vs, ..self.clone() })
    }

    /// Level-0 values as a row-major `nx * ny` array.
    pub fn level0_values(&self) -> Result<Vec<f64>> {
        self.cells
            .iter()
            .map(|c| match c {
                Cell::Coarse(id) => Ok(self.gamma[*id]),
                Cell::Refined(_) => Err(Error::InvalidState("level-0 values requested on a refined cell".into())),
            })
            .collect()
    }
}

fn index_of(x: f64, h: f64, n: usize) -> usize {
    let mut i = libm::floor(x / h) as usize;
    if i >= n {
        i = n - 1;
    }
    // floor may land one below when x sits on a face
    if i + 1 < n && x >= (i + 1) as f64 * h {
        i += 1;
    }
    i
}

/// Jump indicator `η` per level-0 voxel, in units of 1/length.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorField {
    pub nx: usize,
    pub ny: usize,
    pub eta: Vec<f64>,
}

impl IndicatorField {
    pub fn max(&self) -> f64 {
        self.eta.iter().copied().fold(0.0, f64::max)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.eta[i + self.nx * j]
    }
}

/// `G_x = (|γ_r - γ_i| + |γ_i - γ_l|) / (2 h_x)`, likewise `G_y` with the
/// upper and lower neighbours, `η = sqrt(G_x^2 + G_y^2)`. Missing neighbours
/// at the box boundary contribute no jump.
pub fn compute_indicator(grid: &MaterialGrid) -> Result<IndicatorField> {
    let g = grid.level0_values()?;
    let (nx, ny) = grid.level0_dims();
    let (hx, hy) = grid.level0_size();
    let mut eta = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let c = g[i + nx * j];
            let jump = |other: Option<usize>| other.map_or(0.0, |k| libm::fabs(g[k] - c));
            let l = (i > 0).then(|| i - 1 + nx * j);
            let r = (i + 1 < nx).then(|| i + 1 + nx * j);
            let d = (j > 0).then(|| i + nx * (j - 1));
            let u = (j + 1 < ny).then(|| i + nx * (j + 1));
            let gx = (jump(r) + jump(l)) / (2.0 * hx);
            let gy = (jump(u) + jump(d)) / (2.0 * hy);
            eta[i + nx * j] = libm::sqrt(gx * gx + gy * gy);
        }
    }
    Ok(IndicatorField { nx, ny, eta })
}

/// Cells with `η >= τ_fraction * max η`, dilated by `layers` rings of the
/// 8-neighbourhood.
pub fn mark_cells(indicator: &IndicatorField, tau_fraction: f64, layers: usize) -> Vec<bool> {
    let (nx, ny) = (indicator.nx, indicator.ny);
    let max = indicator.max();
    let tau = tau_fraction * max;
    let mut marked: Vec<bool> = indicator.eta.iter().map(|&e| max > 0.0 && e >= tau).collect();
    for _ in 0..layers {
        let prev = marked.clone();
        for j in 0..ny {
            for i in 0..nx {
                if prev[i + nx * j] {
                    for jj in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                        for ii in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                            marked[ii + nx * jj] = true;
                        }
                    }
                }
            }
        }
    }
    marked
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub grid: MaterialGrid,
    /// Level-0 cells that were refined.
    pub marked: Vec<bool>,
    pub nothing_to_refine: bool,
}

pub fn select_and_refine(
    grid: &MaterialGrid,
    indicator: &IndicatorField,
    tau_fraction: f64,
    layers: usize,
    n_vs: usize,
    strategy: Strategy,
) -> Result<Refinement> {
    if grid.is_refined() {
        return Err(Error::InvalidState("grid is already refined".into()));
    }
    if (indicator.nx, indicator.ny) != grid.level0_dims() {
        return Err(Error::invalid("indicator does not match the grid"));
    }
    if !(tau_fraction > 0.0 && tau_fraction <= 1.0) {
        return Err(Error::invalid(format!("threshold fraction must lie in (0, 1], got {tau_fraction}")));
    }
    if !(indicator.max() > 0.0) {
        return Ok(Refinement {
            grid: grid.clone(),
            marked: vec![false; indicator.eta.len()],
            nothing_to_refine: true,
        });
    }
    let marked = mark_cells(indicator, tau_fraction, layers);
    let mut refined = grid.refine_cells(&marked, n_vs)?;
    if strategy == Strategy::Restart {
        let ones = vec![1.0; refined.len()];
        refined.set_gammas(&ones)?;
    }
    Ok(Refinement { grid: refined, marked, nothing_to_refine: false })
}
