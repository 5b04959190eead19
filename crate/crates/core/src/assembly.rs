//! Mass, stiffness and source assembly for
//! `α γ ρ0 ü - div(α γ ρ0 c0² grad u) = f` on the embedding box.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{composed_rule, gauss_legendre, Aabb, AlphaField, Point, QuadratureCell};
use crate::material::MaterialGrid;
use crate::sparse::{CsrMatrix, SkylineCholesky};
use crate::splines::TensorBasis;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationConfig {
    /// Gauss points per direction per quadtree leaf.
    pub order: usize,
    /// Quadtree depth on cut voxels.
    pub depth: u32,
    /// Gauss points per direction for the Gaussian source integral.
    pub source_order: usize,
}

impl IntegrationConfig {
    /// `q = p + 1`, quadtree depth `p + 1`.
    pub fn for_degree(p: usize) -> Self {
        Self { order: p + 1, depth: p as u32 + 1, source_order: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MassKind {
    Consistent,
    Lumped,
}

/// Gaussian source footprint with a windowed sine burst in time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSpec {
    pub center: Point,
    pub sigma: (f64, f64),
    /// Burst centre frequency (1/time).
    pub frequency: f64,
    /// Exponent of the `sin(π f t / 2)` envelope.
    pub envelope_exponent: f64,
}

impl SourceSpec {
    pub fn new(center: Point, sigma: f64, frequency: f64) -> Result<Self> {
        let s = Self { center, sigma: (sigma, sigma), frequency, envelope_exponent: 2.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.0 > 0.0 && self.sigma.1 > 0.0) {
            return Err(Error::invalid("source widths must be positive"));
        }
        if !(self.frequency > 0.0) {
            return Err(Error::invalid("burst frequency must be positive"));
        }
        Ok(())
    }

    /// Dominant wavelength `c0 / f`.
    pub fn dominant_wavelength(&self, c0: f64) -> f64 {
        c0 / self.frequency
    }

    pub fn signal(&self, t: f64) -> f64 {
        burst_shaped(t, self.frequency, self.envelope_exponent)
    }
}

/// Two-cycle sine burst `sin(2π f t) sin²(π f t / 2)` for `t <= 2/f`.
pub fn burst(t: f64, f: f64) -> f64 {
    burst_shaped(t, f, 2.0)
}

/// Burst with a configurable envelope exponent.
pub fn burst_shaped(t: f64, f: f64, exponent: f64) -> f64 {
    use core::f64::consts::PI;
    if t < 0.0 || t > 2.0 / f {
        return 0.0;
    }
    let env = libm::sin(PI * f * t / 2.0);
    let env = if exponent == 2.0 { env * env } else { libm::pow(env, exponent) };
    libm::sin(2.0 * PI * f * t) * env
}

/// Assembled system. `mass` and `stiffness` share the tensor pattern.
#[derive(Debug, Clone)]
pub struct WaveSystem {
    pub basis: TensorBasis,
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub lumped: Option<Vec<f64>>,
    pub rho0: f64,
    pub c0: f64,
}

impl WaveSystem {
    pub fn num_dofs(&self) -> usize {
        self.basis.num_dofs()
    }

    /// Factorizes or lumps the mass matrix.
    pub fn mass_solver(&self, kind: MassKind) -> Result<MassSolver> {
        match kind {
            MassKind::Consistent => {
                let perm = self.basis.envelope_permutation();
                Ok(MassSolver::Consistent(SkylineCholesky::factor(&self.mass, &perm)?))
            }
            MassKind::Lumped => {
                let diag = match &self.lumped {
                    Some(d) => d.clone(),
                    None => row_sum_lump(&self.mass)?,
                };
                Ok(MassSolver::Lumped(diag))
            }
        }
    }
}

/// Inverse of the (consistent or lumped) mass matrix.
#[derive(Debug, Clone)]
pub enum MassSolver {
    Consistent(SkylineCholesky),
    Lumped(Vec<f64>),
}

impl MassSolver {
    pub fn kind(&self) -> MassKind {
        match self {
            MassSolver::Consistent(_) => MassKind::Consistent,
            MassSolver::Lumped(_) => MassKind::Lumped,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MassSolver::Consistent(c) => c.dim(),
            MassSolver::Lumped(d) => d.len(),
        }
    }

    /// `x = M^-1 b`; `work` needs the system dimension.
    pub fn solve_into(&self, b: &[f64], x: &mut [f64], work: &mut [f64]) {
        match self {
            MassSolver::Consistent(c) => c.solve_into(b, x, work),
            MassSolver::Lumped(d) => {
                for ((xi, bi), di) in x.iter_mut().zip(b).zip(d) {
                    *xi = bi / di;
                }
            }
        }
    }
}

/// Diagonal row-sum approximation of `M`.
pub fn row_sum_lump(mass: &CsrMatrix) -> Result<Vec<f64>> {
    let diag = mass.row_sums();
    if let Some((row, &value)) = diag.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::LumpingFailure { row, value });
    }
    Ok(diag)
}

/// Composed quadrature for one knot span.
#[derive(Debug, Clone)]
pub struct SpanRule {
    pub span: (usize, usize),
    pub dofs: Vec<usize>,
    pub cell: QuadratureCell,
}

/// Geometry-dependent part of the assembly: composed rules of all knot spans
/// for a fixed basis, α field and voxel layout. Reusable while only the
/// voxel values change.
#[derive(Debug, Clone)]
pub struct Assembler {
    basis: TensorBasis,
    rules: Vec<SpanRule>,
    num_voxels: usize,
    config: IntegrationConfig,
}

impl Assembler {
    pub fn new(basis: &TensorBasis, alpha: &AlphaField, grid: &MaterialGrid, config: IntegrationConfig) -> Result<Self> {
        if grid.spans() != basis.spans() {
            return Err(Error::invalid(format!(
                "voxel grid spans {:?} do not match the basis spans {:?}",
                grid.spans(),
                basis.spans()
            )));
        }
        let (ex, ey) = basis.extent();
        let (gx, gy) = grid.extent();
        if libm::fabs(ex - gx) > 1e-12 * ex || libm::fabs(ey - gy) > 1e-12 * ey {
            return Err(Error::invalid("voxel grid and basis cover different boxes"));
        }
        gauss_legendre(config.order)?;
        let (sx, sy) = basis.spans();
        let mut rules = Vec::with_capacity(sx * sy);
        for j in 0..sy {
            for i in 0..sx {
                let span_box = span_box(basis, i, j);
                let voxels = grid.span_voxels(i, j);
                let cell = composed_rule(span_box, alpha, &voxels, config.depth, config.order)?;
                rules.push(SpanRule { span: (i, j), dofs: basis.span_dofs(i, j), cell });
            }
        }
        Ok(Self { basis: basis.clone(), rules, num_voxels: grid.len(), config })
    }

    pub fn basis(&self) -> &TensorBasis {
        &self.basis
    }

    pub fn rules(&self) -> &[SpanRule] {
        &self.rules
    }

    pub fn config(&self) -> IntegrationConfig {
        self.config
    }

    pub fn num_voxels(&self) -> usize {
        self.num_voxels
    }

    pub fn num_points(&self) -> usize {
        self.rules.iter().map(|r| r.cell.points.len()).sum()
    }

    /// `M_ij = ∫ α γ ρ0 N_i N_j`, `K_ij = ∫ α γ ρ0 c0² ∇N_i·∇N_j`.
    pub fn assemble(&self, gamma: &[f64], rho0: f64, c0: f64) -> Result<WaveSystem> {
        if gamma.len() != self.num_voxels {
            return Err(Error::invalid(format!(
                "expected {} voxel values, got {}",
                self.num_voxels,
                gamma.len()
            )));
        }
        if !(rho0 > 0.0 && c0 > 0.0) {
            return Err(Error::invalid("density and wave speed must be positive"));
        }
        let mut mass = CsrMatrix::tensor_pattern(&self.basis);
        let mut stiffness = mass.clone();
        let l = self.basis.local_size();
        let mut m_loc = vec![0.0; l * l];
        let mut k_loc = vec![0.0; l * l];
        let c2 = c0 * c0;
        for rule in &self.rules {
            m_loc.iter_mut().for_each(|v| *v = 0.0);
            k_loc.iter_mut().for_each(|v| *v = 0.0);
            for_each_point(&self.basis, rule, |qp, n, g| {
                let w = qp.weight * qp.alpha * gamma[qp.voxel] * rho0;
                local_products(w, c2, n, g, &mut m_loc, &mut k_loc);
            });
            mass.scatter(&rule.dofs, &m_loc);
            stiffness.scatter(&rule.dofs, &k_loc);
        }
        Ok(WaveSystem { basis: self.basis.clone(), mass, stiffness, lumped: None, rho0, c0 })
    }

    /// Per-voxel derivative blocks `∂M/∂γ_i` and `∂K/∂γ_i` on the dofs of
    /// the containing span, row-major `L x L`. Voxels not listed in `want`
    /// get empty blocks.
    pub fn voxel_blocks(&self, rho0: f64, c0: f64, want: &[bool]) -> Vec<VoxelBlock> {
        let l = self.basis.local_size();
        let mut out: Vec<VoxelBlock> = (0..self.num_voxels).map(|_| VoxelBlock::default()).collect();
        let c2 = c0 * c0;
        for (r, rule) in self.rules.iter().enumerate() {
            for_each_point(&self.basis, rule, |qp, n, g| {
                if !want[qp.voxel] {
                    return;
                }
                let b = &mut out[qp.voxel];
                if b.mass.is_empty() {
                    b.rule = r;
                    b.mass = vec![0.0; l * l];
                    b.stiffness = vec![0.0; l * l];
                }
                local_products(qp.weight * qp.alpha * rho0, c2, n, g, &mut b.mass, &mut b.stiffness);
            });
        }
        out
    }
}

/// Derivative blocks of one voxel, see [`Assembler::voxel_blocks`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoxelBlock {
    /// Index into [`Assembler::rules`].
    pub rule: usize,
    pub mass: Vec<f64>,
    pub stiffness: Vec<f64>,
}

fn local_products(w: f64, c2: f64, n: &[f64], g: &[[f64; 2]], m: &mut [f64], k: &mut [f64]) {
    let l = n.len();
    let wk = w * c2;
    for a in 0..l {
        let wn = w * n[a];
        let (gx, gy) = (wk * g[a][0], wk * g[a][1]);
        let m_row = &mut m[a * l..(a + 1) * l];
        let k_row = &mut k[a * l..(a + 1) * l];
        for b in 0..l {
            m_row[b] += wn * n[b];
            k_row[b] += gx * g[b][0] + gy * g[b][1];
        }
    }
}

/// Calls `f(point, values, gradients)` for every point of a span rule.
fn for_each_point(
    basis: &TensorBasis,
    rule: &SpanRule,
    mut f: impl FnMut(&crate::geometry::QuadPoint, &[f64], &[[f64; 2]]),
) {
    let q = basis.degree() + 1;
    let mut n = vec![0.0; q * q];
    let mut g = vec![[0.0; 2]; q * q];
    let (sx, sy) = rule.span;
    for qp in &rule.cell.points {
        let ex = basis.x.eval_in_span(sx, qp.point.x);
        let ey = basis.y.eval_in_span(sy, qp.point.y);
        let (vx, dx, vy, dy) = (ex.values(), ex.derivs(), ey.values(), ey.derivs());
        for b in 0..q {
            for a in 0..q {
                n[a + q * b] = vx[a] * vy[b];
                g[a + q * b] = [dx[a] * vy[b], vx[a] * dy[b]];
            }
        }
        f(qp, &n, &g);
    }
}

pub fn span_box(basis: &TensorBasis, sx: usize, sy: usize) -> Aabb {
    let (hx, hy) = basis.span_size();
    let x0 = basis.x.span_start(sx);
    let y0 = basis.y.span_start(sy);
    Aabb::from_coords(x0, y0, x0 + hx, y0 + hy)
}

/// One-shot assembly.
pub fn assemble(
    basis: &TensorBasis,
    alpha: &AlphaField,
    grid: &MaterialGrid,
    rho0: f64,
    c0: f64,
    config: IntegrationConfig,
) -> Result<WaveSystem> {
    Assembler::new(basis, alpha, grid, config)?.assemble(grid.gammas(), rho0, c0)
}

/// `F_i = ∫ N_i exp(-(x-xs)²/2σx² - (y-ys)²/2σy²)` over the embedding box,
/// by tensor Gauss rules of `config.source_order` per knot span. Spans where
/// the Gaussian is below 1e-18 everywhere are skipped.
pub fn spatial_source(basis: &TensorBasis, spec: &SourceSpec, config: &IntegrationConfig) -> Result<Vec<f64>> {
    spec.validate()?;
    let rule = gauss_legendre(config.source_order)?;
    let (sx, sy) = basis.spans();
    let q = basis.degree() + 1;
    let mut f = vec![0.0; basis.num_dofs()];
    let cutoff = 9.0;
    let (cx, cy) = (spec.center.x, spec.center.y);
    let (sgx, sgy) = spec.sigma;
    for j in 0..sy {
        for i in 0..sx {
            let b = span_box(basis, i, j);
            let dx = (b.min.x - cx).max(cx - b.max.x).max(0.0) / sgx;
            let dy = (b.min.y - cy).max(cy - b.max.y).max(0.0) / sgy;
            if dx * dx + dy * dy > cutoff * cutoff {
                continue;
            }
            let dofs = basis.span_dofs(i, j);
            let c = b.center();
            let (hx, hy) = (0.5 * b.width(), 0.5 * b.height());
            let mut local = vec![0.0; q * q];
            for (yn, yw) in rule.nodes.iter().zip(&rule.weights) {
                let y = c.y + hy * yn;
                let ey = basis.y.eval_in_span(j, y);
                let gy = (y - cy) / sgy;
                for (xn, xw) in rule.nodes.iter().zip(&rule.weights) {
                    let x = c.x + hx * xn;
                    let ex = basis.x.eval_in_span(i, x);
                    let gx = (x - cx) / sgx;
                    let w = xw * yw * hx * hy * libm::exp(-0.5 * (gx * gx + gy * gy));
                    for bb in 0..q {
                        for aa in 0..q {
                            local[aa + q * bb] += w * ex.values()[aa] * ey.values()[bb];
                        }
                    }
                }
            }
            for (d, v) in dofs.iter().zip(&local) {
                f[*d] += v;
            }
        }
    }
    Ok(f)
}
