//! Misfit and adjoint-state gradient with respect to the voxel values γ̂.
//!
//! The default kernel rule differentiates the time-discrete problem exactly:
//! with the forward recursion
//! `M(u_{n+1} - 2u_n + u_{n-1}) + Δt² K u_n = Δt² f_n` and the adjoint field
//! `u†` driven by `w_n (u⁰ - u)` backwards in time,
//!
//! ```text
//! dχ/dγ̂_i = Σ_n  -(u†_{n+1} - u†_n)ᵀ M_i (u_{n+1} - u_n) / Δt + Δt u†_nᵀ K_i u_n
//! ```
//!
//! where `M_i`, `K_i` are the mass and stiffness integrals restricted to
//! voxel `i` (without γ). This is the sensitivity kernel
//! `-α ρ0 u̇† u̇ + α ρ0 c0² ∇u†·∇u` integrated over the voxel, with
//! staggered velocities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::assembly::{spatial_source, Assembler, MassKind, MassSolver, SourceSpec, WaveSystem};
use crate::dynamics::{adjoint_run, Propagator, Receivers, Separable, TimeGrid, Traces, WaveHistory};
use crate::geometry::AlphaField;
use crate::material::MaterialGrid;
use crate::{Error, Result};

/// `χ = ½ Σ_s Σ_r Σ_n w_n Δt (u - u⁰)²` with trapezoid weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Misfit {
    pub chi: f64,
    pub per_source: Vec<f64>,
    /// `u - u⁰` per source on the simulation grid.
    pub residuals: Vec<Traces>,
}

/// Brings reference traces onto the simulation time grid.
pub fn align_reference(reference: &Traces, dt: f64, n_samples: usize) -> Result<Traces> {
    let same = libm::fabs(reference.dt - dt) <= 1e-12 * dt && reference.n_samples() == n_samples;
    if same {
        return Ok(reference.clone());
    }
    let needed = dt * (n_samples - 1) as f64;
    if reference.t_max() < needed * (1.0 - 1e-9) {
        return Err(Error::invalid(format!(
            "reference traces end at t = {}, simulation needs {needed}",
            reference.t_max()
        )));
    }
    Ok(reference.resample(dt, n_samples))
}

/// Misfit of one source; `reference` must already be aligned.
pub fn source_misfit(traces: &Traces, reference: &Traces) -> Result<(f64, Traces)> {
    if traces.n_receivers() != reference.n_receivers() || traces.n_samples() != reference.n_samples() {
        return Err(Error::invalid(format!(
            "trace shapes differ: {}x{} vs {}x{}",
            traces.n_receivers(),
            traces.n_samples(),
            reference.n_receivers(),
            reference.n_samples()
        )));
    }
    let n = traces.n_samples();
    let mut residual = Traces::zeros(traces.n_receivers(), n, traces.dt);
    let mut chi = 0.0;
    for r in 0..traces.n_receivers() {
        let mut sum = 0.0;
        for i in 0..n {
            let d = traces.get(r, i) - reference.get(r, i);
            residual.set(r, i, d);
            let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            sum += w * d * d;
        }
        chi += 0.5 * traces.dt * sum;
    }
    Ok((chi, residual))
}

/// Misfit over all sources; references with another time grid are linearly
/// resampled first.
pub fn misfit(traces: &[Traces], reference: &[Traces]) -> Result<Misfit> {
    if traces.len() != reference.len() {
        return Err(Error::invalid(format!(
            "{} simulated vs {} reference trace sets",
            traces.len(),
            reference.len()
        )));
    }
    let mut out = Misfit { chi: 0.0, per_source: Vec::new(), residuals: Vec::new() };
    for (t, r) in traces.iter().zip(reference) {
        let aligned = align_reference(r, t.dt, t.n_samples())?;
        let (chi, res) = source_misfit(t, &aligned)?;
        out.chi += chi;
        out.per_source.push(chi);
        out.residuals.push(res);
    }
    Ok(out)
}

/// Adjoint forcing series `w_n (u⁰ - u)_n` from a residual `u - u⁰`.
pub fn adjoint_sources(residual: &Traces) -> Traces {
    let n = residual.n_samples();
    let mut out = Traces::zeros(residual.n_receivers(), n, residual.dt);
    for r in 0..residual.n_receivers() {
        for i in 0..n {
            let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            out.set(r, i, -w * residual.get(r, i));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelRule {
    /// Exact derivative of the discrete misfit.
    VoxelIntegral,
    /// Kernel value at the voxel midpoint with central-difference velocities
    /// and end-halved rectangle rule, not weighted by the voxel area.
    Midpoint,
}

#[derive(Debug, Clone)]
struct SpanGroup {
    dofs: Vec<usize>,
    /// `(slot in the gradient, offset into the data arrays)`
    members: Vec<(usize, usize)>,
}

/// Per-voxel kernel data for one voxel layout, computed once per stage.
#[derive(Debug, Clone)]
pub struct KernelCache {
    rule: KernelRule,
    local: usize,
    n_free: usize,
    groups: Vec<SpanGroup>,
    /// VoxelIntegral: `M_i` then `K_i`, `L²` each. Midpoint: `N` (L), then
    /// `dN/dx` (L), `dN/dy` (L).
    data: Vec<f64>,
    rho0: f64,
    c0: f64,
}

impl KernelCache {
    /// `free` lists the voxel ids the gradient is taken for, in slot order.
    pub fn new(
        assembler: &Assembler,
        grid: &MaterialGrid,
        free: &[usize],
        rho0: f64,
        c0: f64,
        rule: KernelRule,
        mass: MassKind,
    ) -> Result<Self> {
        if grid.len() != assembler.num_voxels() {
            return Err(Error::invalid("voxel grid does not match the assembler"));
        }
        let basis = assembler.basis();
        let l = basis.local_size();
        let (nsx, _) = basis.spans();
        let mut want = vec![false; grid.len()];
        for &id in free {
            if id >= grid.len() {
                return Err(Error::out_of_range(format!("voxel {id} does not exist")));
            }
            want[id] = true;
        }
        let mut groups: Vec<SpanGroup> = assembler
            .rules()
            .iter()
            .map(|r| SpanGroup { dofs: r.dofs.clone(), members: Vec::new() })
            .collect();
        let mut data = Vec::new();
        match rule {
            KernelRule::VoxelIntegral => {
                let blocks = assembler.voxel_blocks(rho0, c0, &want);
                for (slot, &id) in free.iter().enumerate() {
                    let b = &blocks[id];
                    if b.mass.is_empty() {
                        // a voxel without quadrature points cannot affect χ
                        continue;
                    }
                    groups[b.rule].members.push((slot, data.len()));
                    if mass == MassKind::Lumped {
                        for a in 0..l {
                            let s: f64 = b.mass[a * l..(a + 1) * l].iter().sum();
                            data.extend((0..l).map(|c| if c == a { s } else { 0.0 }));
                        }
                    } else {
                        data.extend_from_slice(&b.mass);
                    }
                    data.extend_from_slice(&b.stiffness);
                }
            }
            KernelRule::Midpoint => {
                for (slot, &id) in free.iter().enumerate() {
                    let (sx, sy) = grid.voxel_span(id);
                    let mid = grid.voxel_box(id).center();
                    let fp = basis.combine(&basis.x.eval_in_span(sx, mid.x), &basis.y.eval_in_span(sy, mid.y));
                    groups[sx + nsx * sy].members.push((slot, data.len()));
                    data.extend_from_slice(&fp.values);
                    data.extend(fp.gradients.iter().map(|g| g[0]));
                    data.extend(fp.gradients.iter().map(|g| g[1]));
                }
            }
        }
        groups.retain(|g| !g.members.is_empty());
        Ok(Self { rule, local: l, n_free: free.len(), groups, data, rho0, c0 })
    }

    pub fn rule(&self) -> KernelRule {
        self.rule
    }

    pub fn len(&self) -> usize {
        self.n_free
    }

    pub fn is_empty(&self) -> bool {
        self.n_free == 0
    }

    /// Adds one source's contribution to `out` (one entry per free voxel).
    pub fn accumulate(&self, forward: &WaveHistory, adjoint: &WaveHistory, dt: f64, out: &mut [f64]) -> Result<()> {
        if out.len() != self.n_free {
            return Err(Error::invalid("gradient buffer has the wrong length"));
        }
        if forward.len() != adjoint.len() || forward.stride() != adjoint.stride() || forward.len() < 2 {
            return Err(Error::invalid(format!(
                "forward ({} snapshots, stride {}) and adjoint ({} snapshots, stride {}) histories do not align",
                forward.len(),
                forward.stride(),
                adjoint.len(),
                adjoint.stride()
            )));
        }
        let step = forward.stride() as f64 * dt;
        let snaps = forward.len();
        let l = self.local;
        if self.rule == KernelRule::VoxelIntegral {
            match l {
                4 => self.exact::<4>(forward, adjoint, step, out),
                9 => self.exact::<9>(forward, adjoint, step, out),
                16 => self.exact::<16>(forward, adjoint, step, out),
                25 => self.exact::<25>(forward, adjoint, step, out),
                36 => self.exact::<36>(forward, adjoint, step, out),
                49 => self.exact::<49>(forward, adjoint, step, out),
                64 => self.exact::<64>(forward, adjoint, step, out),
                81 => self.exact::<81>(forward, adjoint, step, out),
                _ => unreachable!("local size {l} exceeds the supported degree"),
            }
            return Ok(());
        }
        let mut u = vec![0.0; snaps * l];
        let mut a = vec![0.0; snaps * l];
        for g in &self.groups {
            for k in 0..snaps {
                let (fu, fa) = (forward.snapshot(k), adjoint.snapshot(k));
                for (c, &d) in g.dofs.iter().enumerate() {
                    u[k * l + c] = fu[d];
                    a[k * l + c] = fa[d];
                }
            }
            midpoint_group(l, &u, &a, snaps, g, &self.data, step, self.rho0, self.c0, out);
        }
        Ok(())
    }

    /// Exact rule, processed in blocks of time steps so that the snapshots
    /// of a block stay in cache while every span group reads them.
    fn exact<const L: usize>(&self, forward: &WaveHistory, adjoint: &WaveHistory, step: f64, out: &mut [f64]) {
        const CACHE_BYTES: usize = 1 << 20;
        let steps = forward.len() - 1;
        let width = forward.snapshot(0).len().max(1);
        let block = (CACHE_BYTES / (16 * width)).clamp(8, 256).min(steps);
        let mut s = Scratch::<L>::new(block);
        let mut k0 = 0;
        while k0 < steps {
            let n = block.min(steps - k0);
            for g in &self.groups {
                s.load(forward, adjoint, &g.dofs, k0, n);
                for &(slot, off) in &g.members {
                    let m = &self.data[off..off + L * L];
                    let kk = &self.data[off + L * L..off + 2 * L * L];
                    let mut acc_m = 0.0;
                    let mut acc_k = 0.0;
                    for k in 0..n {
                        acc_m += quad_form::<L>(m, &s.da[k], &s.du[k]);
                        acc_k += quad_form::<L>(kk, &s.a[k], &s.u[k]);
                    }
                    out[slot] += -acc_m / step + step * acc_k;
                }
            }
            k0 += n;
        }
    }
}

/// Local values of one span at the steps of a block (one more than the
/// block length) and their forward increments.
struct Scratch<const L: usize> {
    u: Vec<[f64; L]>,
    a: Vec<[f64; L]>,
    du: Vec<[f64; L]>,
    da: Vec<[f64; L]>,
}

impl<const L: usize> Scratch<L> {
    fn new(block: usize) -> Self {
        let z = |n| vec![[0.0; L]; n];
        Self { u: z(block + 1), a: z(block + 1), du: z(block), da: z(block) }
    }

    fn load(&mut self, forward: &WaveHistory, adjoint: &WaveHistory, dofs: &[usize], k0: usize, n: usize) {
        let w = forward.n_dof();
        let dofs: &[usize; L] = dofs.try_into().expect("one dof per local function");
        let range = k0 * w..(k0 + n + 1) * w;
        let fu = forward.as_slice()[range.clone()].chunks_exact(w);
        let fa = adjoint.as_slice()[range].chunks_exact(w);
        for (k, (su, sa)) in fu.zip(fa).enumerate() {
            for c in 0..L {
                self.u[k][c] = su[dofs[c]];
                self.a[k][c] = sa[dofs[c]];
            }
        }
        for k in 0..n {
            for c in 0..L {
                self.du[k][c] = self.u[k + 1][c] - self.u[k][c];
                self.da[k][c] = self.a[k + 1][c] - self.a[k][c];
            }
        }
    }
}

#[inline(always)]
fn quad_form<const L: usize>(m: &[f64], x: &[f64; L], y: &[f64; L]) -> f64 {
    let mut total = 0.0;
    for r in 0..L {
        let row: &[f64; L] = m[r * L..(r + 1) * L].try_into().unwrap();
        let mut s = 0.0;
        for c in 0..L {
            s += row[c] * y[c];
        }
        total += x[r] * s;
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn midpoint_group(
    l: usize,
    u: &[f64],
    a: &[f64],
    snaps: usize,
    g: &SpanGroup,
    data: &[f64],
    step: f64,
    rho0: f64,
    c0: f64,
    out: &mut [f64],
) {
    let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
    let mut vu = vec![0.0; snaps];
    let mut va = vec![0.0; snaps];
    for &(slot, off) in &g.members {
        let n = &data[off..off + l];
        let gx = &data[off + l..off + 2 * l];
        let gy = &data[off + 2 * l..off + 3 * l];
        let mut acc = 0.0;
        for k in 0..snaps {
            let (uk, ak) = (&u[k * l..(k + 1) * l], &a[k * l..(k + 1) * l]);
            vu[k] = dot(n, uk);
            va[k] = dot(n, ak);
            let grad = dot(gx, uk) * dot(gx, ak) + dot(gy, uk) * dot(gy, ak);
            let w = if k == 0 || k + 1 == snaps { 0.5 } else { 1.0 };
            acc += w * rho0 * c0 * c0 * grad;
        }
        for k in 0..snaps {
            let vel = |s: &[f64]| {
                if k == 0 {
                    (s[1] - s[0]) / step
                } else if k + 1 == snaps {
                    (s[k] - s[k - 1]) / step
                } else {
                    (s[k + 1] - s[k - 1]) / (2.0 * step)
                }
            };
            let w = if k == 0 || k + 1 == snaps { 0.5 } else { 1.0 };
            acc -= w * rho0 * vel(&va) * vel(&vu);
        }
        out[slot] += step * acc;
    }
}

/// Gradient over all sources; histories are paired per source.
pub fn gradient(cache: &KernelCache, forward: &[WaveHistory], adjoint: &[WaveHistory], dt: f64) -> Result<Vec<f64>> {
    if forward.len() != adjoint.len() {
        return Err(Error::invalid("forward and adjoint history counts differ"));
    }
    let mut out = vec![0.0; cache.len()];
    for (f, a) in forward.iter().zip(adjoint) {
        cache.accumulate(f, a, dt, &mut out)?;
    }
    Ok(out)
}

/// Assembled system with its mass inverse for one γ.
pub struct Prepared {
    pub system: WaveSystem,
    pub mass: MassSolver,
}

/// Everything needed to evaluate `χ(γ̂)` and its gradient over the free
/// voxels for a fixed voxel layout.
pub struct InversionProblem {
    pub assembler: Assembler,
    pub kernel: KernelCache,
    pub rho0: f64,
    pub c0: f64,
    pub mass_kind: MassKind,
    pub time: TimeGrid,
    pub sources: Vec<SourceSpec>,
    pub spatial: Vec<Vec<f64>>,
    pub receivers: Receivers,
    /// Reference traces on the simulation time grid.
    pub reference: Vec<Traces>,
    pub stride: usize,
    base: Vec<f64>,
    free: Vec<usize>,
    skipped: Vec<usize>,
    bounds: (f64, f64),
}

/// Outcome of one source.
pub struct SourceEvaluation {
    pub chi: f64,
    pub traces: Traces,
    pub gradient: Vec<f64>,
}

/// Inputs of [`InversionProblem::new`] besides the grid and geometry.
#[derive(Debug, Clone)]
pub struct ProblemSetup {
    pub rho0: f64,
    pub c0: f64,
    pub mass: MassKind,
    pub time: TimeGrid,
    pub stride: usize,
    pub rule: KernelRule,
    pub sources: Vec<SourceSpec>,
    pub receivers: Vec<crate::geometry::Point>,
    pub window: Option<crate::geometry::Aabb>,
}

impl InversionProblem {
    pub fn new(
        assembler: Assembler,
        grid: &MaterialGrid,
        alpha: &AlphaField,
        setup: &ProblemSetup,
        reference: &[Traces],
    ) -> Result<Self> {
        if reference.len() != setup.sources.len() {
            return Err(Error::invalid(format!(
                "{} sources but {} reference trace sets",
                setup.sources.len(),
                reference.len()
            )));
        }
        if setup.stride == 0 || !setup.time.steps.is_multiple_of(setup.stride) {
            return Err(Error::invalid("history stride must divide the step count"));
        }
        let mids = grid.voxel_midpoints();
        let mask = grid.optimizable(alpha, setup.window.as_ref());
        let free: Vec<usize> = (0..grid.len()).filter(|&i| mask[i]).collect();
        let skipped: Vec<usize> = mids.iter().filter(|(_, m)| alpha.alpha(*m) != 1.0).map(|(i, _)| *i).collect();
        let kernel = KernelCache::new(&assembler, grid, &free, setup.rho0, setup.c0, setup.rule, setup.mass)?;
        let receivers = Receivers::new(assembler.basis(), &setup.receivers)?;
        let cfg = assembler.config();
        let spatial = setup
            .sources
            .iter()
            .map(|s| spatial_source(assembler.basis(), s, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let reference = reference
            .iter()
            .map(|r| {
                if r.n_receivers() != receivers.len() {
                    return Err(Error::invalid(format!(
                        "reference has {} receivers, configuration {}",
                        r.n_receivers(),
                        receivers.len()
                    )));
                }
                align_reference(r, setup.time.dt, setup.time.samples())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            assembler,
            kernel,
            rho0: setup.rho0,
            c0: setup.c0,
            mass_kind: setup.mass,
            time: setup.time,
            sources: setup.sources.clone(),
            spatial,
            receivers,
            reference,
            stride: setup.stride,
            base: grid.gammas().to_vec(),
            free,
            skipped,
            bounds: grid.bounds(),
        })
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    /// Voxel ids of the optimization variables.
    pub fn free(&self) -> &[usize] {
        &self.free
    }

    /// Voxels whose midpoint is not in the physical domain.
    pub fn skipped(&self) -> &[usize] {
        &self.skipped
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// Current values of the free voxels.
    pub fn initial(&self) -> Vec<f64> {
        self.free.iter().map(|&i| self.base[i]).collect()
    }

    /// Full voxel vector with the free entries replaced by `x`.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.base.clone();
        for (&i, &v) in self.free.iter().zip(x) {
            g[i] = v;
        }
        g
    }

    pub fn prepare(&self, x: &[f64]) -> Result<Prepared> {
        if x.len() != self.free.len() {
            return Err(Error::invalid(format!("expected {} free values, got {}", self.free.len(), x.len())));
        }
        let system = self.assembler.assemble(&self.expand(x), self.rho0, self.c0)?;
        let mass = system.mass_solver(self.mass_kind)?;
        Ok(Prepared { system, mass })
    }

    /// Forward run of source `s`; a history is kept only if `with_history`.
    pub fn forward(&self, prep: &Prepared, s: usize, with_history: bool) -> Result<(WaveHistory, Traces)> {
        let spec = self.sources[s];
        let forcing = Separable { spatial: &self.spatial[s], signal: |t| spec.signal(t) };
        let prop = Propagator::new(&prep.system, &prep.mass, self.time)?;
        let (h, t) = prop.run(&forcing, Some(&self.receivers), with_history.then_some(self.stride))?;
        Ok((h, t.expect("receivers were given")))
    }

    pub fn residual(&self, s: usize, traces: &Traces) -> Result<(f64, Traces)> {
        source_misfit(traces, &self.reference[s])
    }

    pub fn adjoint(&self, prep: &Prepared, residual: &Traces) -> Result<WaveHistory> {
        let src = adjoint_sources(residual);
        adjoint_run(&prep.system, &prep.mass, &self.time, &self.receivers, &src, self.stride)
    }

    /// Misfit and gradient of one source.
    pub fn evaluate_source(&self, prep: &Prepared, s: usize) -> Result<SourceEvaluation> {
        let (fwd, traces) = self.forward(prep, s, true)?;
        let (chi, residual) = self.residual(s, &traces)?;
        let adj = self.adjoint(prep, &residual)?;
        let mut gradient = vec![0.0; self.free.len()];
        self.kernel.accumulate(&fwd, &adj, self.time.dt, &mut gradient)?;
        Ok(SourceEvaluation { chi, traces, gradient })
    }

    /// `χ` and `dχ/dx`, summed over sources in order.
    pub fn evaluate(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let prep = self.prepare(x)?;
        let mut chi = 0.0;
        let mut grad = vec![0.0; self.free.len()];
        for s in 0..self.sources.len() {
            let e = self.evaluate_source(&prep, s)?;
            chi += e.chi;
            grad.iter_mut().zip(&e.gradient).for_each(|(g, v)| *g += v);
        }
        Ok((chi, grad))
    }

    pub fn misfit_only(&self, x: &[f64]) -> Result<f64> {
        let prep = self.prepare(x)?;
        let mut chi = 0.0;
        for s in 0..self.sources.len() {
            let (_, traces) = self.forward(&prep, s, false)?;
            chi += self.residual(s, &traces)?.0;
        }
        Ok(chi)
    }
}
