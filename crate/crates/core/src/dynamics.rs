//! Central difference time stepping, critical step estimation and receiver
//! recording.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::assembly::{MassSolver, WaveSystem};
use crate::geometry::Point;
use crate::splines::{Footprint, TensorBasis};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_max: f64,
    pub steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_max: f64, steps: usize) -> Result<Self> {
        if !(t_max > 0.0 && t_max.is_finite()) || steps == 0 {
            return Err(Error::invalid(format!("invalid time grid: T = {t_max}, steps = {steps}")));
        }
        Ok(Self { t_max, steps, dt: t_max / steps as f64 })
    }

    /// At least `requested` steps, more if `safety * dt_c` demands it.
    pub fn auto(t_max: f64, requested: usize, dt_c: f64, safety: f64) -> Result<Self> {
        if !(safety > 0.0 && safety <= 1.0) {
            return Err(Error::invalid(format!("safety factor must lie in (0, 1], got {safety}")));
        }
        let base = Self::new(t_max, requested)?;
        let limit = safety * dt_c;
        if base.dt <= limit {
            return Ok(base);
        }
        Self::new(t_max, libm::ceil(t_max / limit) as usize)
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn samples(&self) -> usize {
        self.steps + 1
    }
}

/// Coefficient snapshots every `stride` steps, from step 0 to the last.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveHistory {
    n_dof: usize,
    stride: usize,
    data: Vec<f64>,
}

impl WaveHistory {
    pub fn new(n_dof: usize, stride: usize) -> Self {
        Self { n_dof, stride, data: Vec::new() }
    }

    pub fn from_snapshots(n_dof: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if n_dof == 0 || !data.len().is_multiple_of(n_dof) {
            return Err(Error::invalid("history data is not a whole number of snapshots"));
        }
        Ok(Self { n_dof, stride, data })
    }

    pub fn n_dof(&self) -> usize {
        self.n_dof
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_dof.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn snapshot(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_dof..(k + 1) * self.n_dof]
    }

    pub fn last(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.snapshot(self.len() - 1))
    }

    pub fn push(&mut self, u: &[f64]) {
        self.data.extend_from_slice(u);
    }

    /// Snapshot order reversed.
    pub fn reversed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for k in (0..self.len()).rev() {
            data.extend_from_slice(self.snapshot(k));
        }
        Self { n_dof: self.n_dof, stride: self.stride, data }
    }

    /// All snapshots back to back, row = snapshot.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn memory_bytes(&self) -> usize {
        self.data.len() * core::mem::size_of::<f64>()
    }
}

/// Point receivers with cached basis footprints.
#[derive(Debug, Clone, PartialEq)]
pub struct Receivers {
    points: Vec<Point>,
    footprints: Vec<Footprint>,
}

impl Receivers {
    pub fn new(basis: &TensorBasis, points: &[Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("at least one receiver is required"));
        }
        let footprints = points.iter().map(|p| basis.footprint(*p)).collect::<Result<Vec<_>>>()?;
        Ok(Self { points: points.to_vec(), footprints })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn footprint(&self, r: usize) -> &Footprint {
        &self.footprints[r]
    }

    pub fn sample(&self, r: usize, u: &[f64]) -> f64 {
        let fp = &self.footprints[r];
        fp.indices.iter().zip(&fp.values).map(|(&i, &v)| u[i] * v).sum()
    }

    /// Adds `weights[r] * N(x_r)` to `f`.
    pub fn spread(&self, weights: impl Iterator<Item = f64>, f: &mut [f64]) {
        for (fp, w) in self.footprints.iter().zip(weights) {
            if w != 0.0 {
                for (&i, &v) in fp.indices.iter().zip(&fp.values) {
                    f[i] += w * v;
                }
            }
        }
    }
}

/// Receiver time series, one row per receiver, one column per time sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Traces {
    n_receivers: usize,
    n_samples: usize,
    pub dt: f64,
    data: Vec<f64>,
}

impl Traces {
    pub fn zeros(n_receivers: usize, n_samples: usize, dt: f64) -> Self {
        Self { n_receivers, n_samples, dt, data: vec![0.0; n_receivers * n_samples] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, dt: f64) -> Result<Self> {
        let n_samples = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || n_samples == 0 || rows.iter().any(|r| r.len() != n_samples) {
            return Err(Error::invalid("trace rows must be non-empty and of equal length"));
        }
        let n_receivers = rows.len();
        Ok(Self { n_receivers, n_samples, dt, data: rows.concat() })
    }

    pub fn n_receivers(&self) -> usize {
        self.n_receivers
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn get(&self, r: usize, i: usize) -> f64 {
        self.data[r * self.n_samples + i]
    }

    pub fn set(&mut self, r: usize, i: usize, v: f64) {
        self.data[r * self.n_samples + i] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_samples..(r + 1) * self.n_samples]
    }

    pub fn t_max(&self) -> f64 {
        self.dt * (self.n_samples - 1) as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Linear interpolation onto `n_samples` points spaced `dt`; times past
    /// the end of the record are held at the last value.
    pub fn resample(&self, dt: f64, n_samples: usize) -> Self {
        let mut out = Self::zeros(self.n_receivers, n_samples, dt);
        let last = self.n_samples - 1;
        for i in 0..n_samples {
            let s = i as f64 * dt / self.dt;
            // snap to the source grid to keep coincident samples exact
            let nearest = libm::round(s);
            let s = if libm::fabs(s - nearest) < 1e-9 { nearest } else { s };
            let k = (libm::floor(s) as usize).min(last);
            let frac = if k >= last { 0.0 } else { s - k as f64 };
            for r in 0..self.n_receivers {
                let a = self.get(r, k);
                let v = if frac == 0.0 { a } else { a + frac * (self.get(r, k + 1) - a) };
                out.set(r, i, v);
            }
        }
        out
    }
}

/// Right-hand side provider for the time loop.
pub trait Forcing {
    /// Writes `f(t_step)` into `f` (already zeroed). Returns `false` when the
    /// force vanishes, letting the caller skip it.
    fn force(&self, step: usize, time: f64, f: &mut [f64]) -> bool;
}

/// No external force.
pub struct Unforced;

impl Forcing for Unforced {
    fn force(&self, _: usize, _: f64, _: &mut [f64]) -> bool {
        false
    }
}

/// `f(t) = g(t) F`.
pub struct Separable<'a, G: Fn(f64) -> f64> {
    pub spatial: &'a [f64],
    pub signal: G,
}

impl<G: Fn(f64) -> f64> Forcing for Separable<'_, G> {
    fn force(&self, _: usize, time: f64, f: &mut [f64]) -> bool {
        let g = (self.signal)(time);
        if g == 0.0 {
            return false;
        }
        for (fi, si) in f.iter_mut().zip(self.spatial) {
            *fi = g * si;
        }
        true
    }
}

/// Receiver series injected in reverse time: step `j` is driven by sample
/// `N - j` of every series.
pub struct ReversedReceiverSources<'a> {
    pub receivers: &'a Receivers,
    pub series: &'a Traces,
}

impl Forcing for ReversedReceiverSources<'_> {
    fn force(&self, step: usize, _: f64, f: &mut [f64]) -> bool {
        let last = self.series.n_samples() - 1;
        if step > last {
            return false;
        }
        let i = last - step;
        let mut any = false;
        for r in 0..self.series.n_receivers() {
            any |= self.series.get(r, i) != 0.0;
        }
        if any {
            self.receivers.spread((0..self.series.n_receivers()).map(|r| self.series.get(r, i)), f);
        }
        any
    }
}

/// Explicit central difference integrator
/// `u_{n+1} = 2 u_n - u_{n-1} + dt² M^-1 (f_n - K u_n)` from rest.
pub struct Propagator<'a> {
    system: &'a WaveSystem,
    mass: &'a MassSolver,
    grid: TimeGrid,
}

impl<'a> Propagator<'a> {
    pub fn new(system: &'a WaveSystem, mass: &'a MassSolver, grid: TimeGrid) -> Result<Self> {
        if mass.dim() != system.num_dofs() {
            return Err(Error::invalid("mass solver does not match the system size"));
        }
        Ok(Self { system, mass, grid })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Runs all steps and hands `(step, u_step)` to `observe` for steps
    /// `0..=N`.
    pub fn run_with(&self, forcing: &dyn Forcing, mut observe: impl FnMut(usize, &[f64])) -> Result<()> {
        let n = self.system.num_dofs();
        let dt2 = self.grid.dt * self.grid.dt;
        let mut prev = vec![0.0; n];
        let mut cur = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut acc = vec![0.0; n];
        let mut work = vec![0.0; n];
        let mut quiet = true;
        observe(0, &cur);
        for step in 0..self.grid.steps {
            rhs.iter_mut().for_each(|v| *v = 0.0);
            let forced = forcing.force(step, self.grid.time(step), &mut rhs);
            if quiet && !forced {
                // still at rest: u stays exactly zero
                observe(step + 1, &cur);
                continue;
            }
            quiet = false;
            self.system.stiffness.matvec_into(&cur, &mut acc);
            for (r, a) in rhs.iter_mut().zip(&acc) {
                *r -= a;
            }
            self.mass.solve_into(&rhs, &mut acc, &mut work);
            let mut norm = 0.0;
            for i in 0..n {
                let next = 2.0 * cur[i] - prev[i] + dt2 * acc[i];
                prev[i] = next;
                norm += next * next;
            }
            if !norm.is_finite() {
                return Err(Error::Instability { step: step + 1 });
            }
            core::mem::swap(&mut prev, &mut cur);
            observe(step + 1, &cur);
        }
        Ok(())
    }

    /// Traces at every step and snapshots every `stride` steps (none for
    /// `None`). The stride must divide the step count.
    pub fn run(
        &self,
        forcing: &dyn Forcing,
        receivers: Option<&Receivers>,
        stride: Option<usize>,
    ) -> Result<(WaveHistory, Option<Traces>)> {
        let n = self.system.num_dofs();
        if let Some(s) = stride {
            if s == 0 || !self.grid.steps.is_multiple_of(s) {
                return Err(Error::invalid(format!(
                    "history stride {s} must divide the step count {}",
                    self.grid.steps
                )));
            }
        }
        let mut history = WaveHistory::new(n, stride.unwrap_or(0));
        if let Some(s) = stride {
            history.data.reserve((self.grid.steps / s + 1) * n);
        }
        let mut traces = receivers.map(|r| Traces::zeros(r.len(), self.grid.samples(), self.grid.dt));
        self.run_with(forcing, |step, u| {
            if let (Some(t), Some(rec)) = (traces.as_mut(), receivers) {
                for r in 0..rec.len() {
                    t.set(r, step, rec.sample(r, u));
                }
            }
            if let Some(s) = stride {
                if step % s == 0 {
                    history.push(u);
                }
            }
        })?;
        Ok((history, traces))
    }

    /// Final state only.
    pub fn final_state(&self, forcing: &dyn Forcing) -> Result<Vec<f64>> {
        let mut last = Vec::new();
        let steps = self.grid.steps;
        self.run_with(forcing, |step, u| {
            if step == steps {
                last = u.to_vec();
            }
        })?;
        Ok(last)
    }
}

/// Forward run with receiver traces and a history every `stride` steps.
pub fn cdm_run(
    system: &WaveSystem,
    mass: &MassSolver,
    grid: &TimeGrid,
    forcing: &dyn Forcing,
    receivers: &Receivers,
    stride: usize,
) -> Result<(WaveHistory, Traces)> {
    let (h, t) = Propagator::new(system, mass, *grid)?.run(forcing, Some(receivers), Some(stride))?;
    Ok((h, t.expect("receivers were given")))
}

/// Adjoint field driven by `sources` (one series per receiver, `N + 1`
/// samples) injected backwards in time. The returned history is reversed so
/// that snapshot `k` belongs to physical step `k * stride`.
pub fn adjoint_run(
    system: &WaveSystem,
    mass: &MassSolver,
    grid: &TimeGrid,
    receivers: &Receivers,
    sources: &Traces,
    stride: usize,
) -> Result<WaveHistory> {
    if sources.n_receivers() != receivers.len() || sources.n_samples() != grid.samples() {
        return Err(Error::invalid(format!(
            "adjoint sources are {}x{}, expected {}x{}",
            sources.n_receivers(),
            sources.n_samples(),
            receivers.len(),
            grid.samples()
        )));
    }
    let forcing = ReversedReceiverSources { receivers, series: sources };
    let (h, _) = Propagator::new(system, mass, *grid)?.run(&forcing, None, Some(stride))?;
    Ok(h.reversed())
}

/// Largest eigenvalue of `M^-1 K` by power iteration with Rayleigh quotients,
/// relative tolerance 1e-6, at most 10 000 iterations.
pub fn max_eigenvalue(system: &WaveSystem, mass: &MassSolver) -> Result<f64> {
    max_eigenvalue_with(system, mass, 1e-6, 10_000)
}

pub fn max_eigenvalue_with(system: &WaveSystem, mass: &MassSolver, tol: f64, max_iter: usize) -> Result<f64> {
    let n = system.num_dofs();
    let mut v: Vec<f64> = (0..n).map(|i| start_vector_entry(i as u64)).collect();
    let mut kv = vec![0.0; n];
    let mut mv = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut last = 0.0;
    for it in 0..max_iter {
        system.stiffness.matvec_into(&v, &mut kv);
        match mass {
            MassSolver::Consistent(_) => system.mass.matvec_into(&v, &mut mv),
            MassSolver::Lumped(d) => {
                for i in 0..n {
                    mv[i] = d[i] * v[i];
                }
            }
        }
        let num: f64 = v.iter().zip(&kv).map(|(a, b)| a * b).sum();
        let den: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        let lambda = num / den;
        if !lambda.is_finite() {
            return Err(Error::EstimationFailure { iterations: it, last });
        }
        if it > 0 && libm::fabs(lambda - last) <= tol * libm::fabs(lambda) {
            return Ok(lambda);
        }
        last = lambda;
        mass.solve_into(&kv, &mut v, &mut work);
        let scale = v.iter().fold(0.0f64, |m, x| m.max(libm::fabs(*x)));
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::EstimationFailure { iterations: it, last });
        }
        v.iter_mut().for_each(|x| *x /= scale);
    }
    Err(Error::EstimationFailure { iterations: max_iter, last })
}

/// `dt_c = 2 / sqrt(λ_max(K, M))`.
pub fn critical_dt(system: &WaveSystem, mass: &MassSolver) -> Result<f64> {
    Ok(2.0 / libm::sqrt(max_eigenvalue(system, mass)?))
}

/// Deterministic pseudo-random entries in `[0.5, 1.5)`.
fn start_vector_entry(i: u64) -> f64 {
    let mut z = i.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    0.5 + (z >> 11) as f64 / (1u64 << 53) as f64
}

/// `½ v^T M v + ½ u_n^T K u_{n+1}` with `v = (u_{n+1} - u_n) / dt`, the
/// quantity the central difference scheme conserves without forcing.
pub fn discrete_energy(system: &WaveSystem, u_n: &[f64], u_next: &[f64], dt: f64) -> f64 {
    let v: Vec<f64> = u_next.iter().zip(u_n).map(|(a, b)| (a - b) / dt).collect();
    0.5 * system.mass.bilinear(&v, &v) + 0.5 * system.stiffness.bilinear(u_n, u_next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{Assembler, IntegrationConfig, MassKind};
    use crate::geometry::{AlphaField, Shape};
    use crate::material::MaterialGrid;
    use crate::sparse::CsrMatrix;

    fn square(spans: usize, p: usize, c0: f64, alpha: &AlphaField) -> WaveSystem {
        let basis = TensorBasis::uniform(spans, spans, p, 1.0, 1.0).unwrap();
        let grid = MaterialGrid::new((spans, spans), (1.0, 1.0), 1, (1e-5, 1.0)).unwrap();
        Assembler::new(&basis, alpha, &grid, IntegrationConfig::for_degree(p))
            .unwrap()
            .assemble(grid.gammas(), 1.0, c0)
            .unwrap()
    }

    fn full() -> AlphaField {
        AlphaField::full(1e-8).unwrap()
    }

    #[test]
    fn single_dof_first_step() {
        let basis = TensorBasis::uniform(1, 1, 1, 1.0, 1.0).unwrap();
        let mut sys = square(1, 1, 1.0, &full());
        // decoupled unit masses, no stiffness
        sys.mass = CsrMatrix::from_triplets(4, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (3, 3, 1.0)]).unwrap();
        sys.stiffness = CsrMatrix::from_triplets(4, &[]).unwrap();
        sys.basis = basis;
        let mass = MassSolver::Lumped(vec![1.0; 4]);
        let grid = TimeGrid::new(0.3, 3).unwrap();
        let ones = [1.0, 0.0, 0.0, 0.0];
        let forcing = Separable { spatial: &ones, signal: |_| 1.0 };
        let (h, _) = Propagator::new(&sys, &mass, grid).unwrap().run(&forcing, None, Some(1)).unwrap();
        let dt = grid.dt;
        assert_eq!(h.snapshot(0)[0], 0.0);
        assert!((h.snapshot(1)[0] - dt * dt).abs() < 1e-18);
        // constant unit force from rest: u_n = dt² n(n+1)/2
        assert!((h.snapshot(3)[0] - 6.0 * dt * dt).abs() < 1e-15);
    }

    #[test]
    fn zero_forcing_stays_zero() {
        let sys = square(3, 2, 1.0, &full());
        let mass = sys.mass_solver(MassKind::Consistent).unwrap();
        let basis = sys.basis.clone();
        let rec = Receivers::new(&basis, &[Point::new(0.3, 0.4)]).unwrap();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let (h, t) = cdm_run(&sys, &mass, &grid, &Unforced, &rec, 1).unwrap();
        assert_eq!(h.len(), 51);
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
        assert!(t.row(0).iter().all(|&v| v == 0.0));
        let zero = Traces::zeros(1, 51, grid.dt);
        let a = adjoint_run(&sys, &mass, &grid, &rec, &zero, 1).unwrap();
        assert!(a.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stride_must_divide() {
        let sys = square(2, 1, 1.0, &full());
        let mass = sys.mass_solver(MassKind::Lumped).unwrap();
        let p = Propagator::new(&sys, &mass, TimeGrid::new(1.0, 10).unwrap()).unwrap();
        assert!(p.run(&Unforced, None, Some(3)).is_err());
        assert_eq!(p.run(&Unforced, None, Some(5)).unwrap().0.len(), 3);
    }

    #[test]
    fn unstable_step_is_reported() {
        let sys = square(4, 2, 1.0, &full());
        let mass = sys.mass_solver(MassKind::Lumped).unwrap();
        let dt_c = critical_dt(&sys, &mass).unwrap();
        let grid = TimeGrid::new(400.0 * dt_c, 200).unwrap();
        let f = vec![1.0; sys.num_dofs()];
        let forcing = Separable { spatial: &f, signal: |t| if t < 4.0 * dt_c { 1.0 } else { 0.0 } };
        let err = Propagator::new(&sys, &mass, grid).unwrap().run(&forcing, None, None).unwrap_err();
        assert!(matches!(err, Error::Instability { .. }));
    }

    #[test]
    fn critical_step_matches_dense_eigensolver() {
        use nalgebra::DMatrix;
        for kind in [MassKind::Lumped, MassKind::Consistent] {
            let sys = square(1, 1, 1.0, &full());
            let mass = sys.mass_solver(kind).unwrap();
            let lambda = max_eigenvalue(&sys, &mass).unwrap();
            let n = sys.num_dofs();
            let m = match &mass {
                MassSolver::Lumped(d) => DMatrix::from_fn(n, n, |i, j| if i == j { d[i] } else { 0.0 }),
                MassSolver::Consistent(_) => DMatrix::from_fn(n, n, |i, j| sys.mass.get(i, j)),
            };
            let k = DMatrix::from_fn(n, n, |i, j| sys.stiffness.get(i, j));
            // symmetric reduction L^-1 K L^-T
            let l = m.cholesky().unwrap().l();
            let li = l.clone().try_inverse().unwrap();
            let s = &li * k * li.transpose();
            let exact = s.symmetric_eigen().eigenvalues.max();
            assert!(((lambda - exact) / exact).abs() < 1e-6, "{kind:?}: {lambda} vs {exact}");
        }
    }

    #[test]
    fn critical_step_scaling() {
        let a = square(4, 1, 1.0, &full());
        let b = square(4, 1, 2.0, &full());
        let dta = critical_dt(&a, &a.mass_solver(MassKind::Lumped).unwrap()).unwrap();
        let dtb = critical_dt(&b, &b.mass_solver(MassKind::Lumped).unwrap()).unwrap();
        assert!((dtb / dta - 0.5).abs() < 1e-5);
        let fine = square(8, 1, 1.0, &full());
        let dtf = critical_dt(&fine, &fine.mass_solver(MassKind::Lumped).unwrap()).unwrap();
        let ratio = dtf / dta;
        assert!((0.45..=0.55).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn energy_is_conserved_after_burst() {
        let sys = square(6, 2, 1.0, &full());
        let mass = sys.mass_solver(MassKind::Consistent).unwrap();
        let dt_c = critical_dt(&sys, &mass).unwrap();
        let f = 4.0;
        let steps = libm::ceil(3.0 / (0.5 * dt_c)) as usize;
        let grid = TimeGrid::new(steps as f64 * 0.5 * dt_c, steps).unwrap();
        let spec = crate::assembly::SourceSpec::new(Point::new(0.4, 0.6), 0.1, f).unwrap();
        let spatial =
            crate::assembly::spatial_source(&sys.basis, &spec, &IntegrationConfig::for_degree(2)).unwrap();
        let forcing = Separable { spatial: &spatial, signal: |t| spec.signal(t) };
        let (h, _) = Propagator::new(&sys, &mass, grid).unwrap().run(&forcing, None, Some(1)).unwrap();
        let first = (2.0 / f / grid.dt) as usize + 2;
        let e0 = discrete_energy(&sys, h.snapshot(first), h.snapshot(first + 1), grid.dt);
        assert!(e0 > 0.0);
        for n in first..grid.steps {
            let e = discrete_energy(&sys, h.snapshot(n), h.snapshot(n + 1), grid.dt);
            assert!(((e - e0) / e0).abs() < 0.01);
        }
    }

    #[test]
    fn trace_error_is_second_order_in_time() {
        let sys = square(4, 2, 1.0, &full());
        let mass = sys.mass_solver(MassKind::Consistent).unwrap();
        let dt_c = critical_dt(&sys, &mass).unwrap();
        let t_max = 1.0;
        let spec = crate::assembly::SourceSpec::new(Point::new(0.5, 0.5), 0.15, 2.0).unwrap();
        let spatial =
            crate::assembly::spatial_source(&sys.basis, &spec, &IntegrationConfig::for_degree(2)).unwrap();
        let rec = Receivers::new(&sys.basis, &[Point::new(0.8, 0.3)]).unwrap();
        let base = libm::ceil(t_max / (0.5 * dt_c)) as usize;
        let run = |steps: usize| {
            let grid = TimeGrid::new(t_max, steps).unwrap();
            let forcing = Separable { spatial: &spatial, signal: |t| spec.signal(t) };
            let (_, t) = cdm_run(&sys, &mass, &grid, &forcing, &rec, steps).unwrap();
            t
        };
        let reference = run(base * 64);
        let err = |steps: usize| {
            let t = run(steps);
            let r = reference.resample(t.dt, t.n_samples());
            (0..t.n_samples()).map(|i| (t.get(0, i) - r.get(0, i)).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(base * 2), err(base * 4));
        let order = libm::log2(e1 / e2);
        assert!((1.8..=2.2).contains(&order), "order {order}");
    }

    #[test]
    fn lumped_step_ignores_cut_ratio() {
        // one row of quadratic spans; a physical sliver of width `ratio` inside the
        // last span
        let mut dts = Vec::new();
        for ratio in [1e-3, 1e-2, 1e-1, 0.5] {
            let edge = 3.0 + ratio;
            let alpha = AlphaField::new(
                Shape::Box(crate::geometry::Aabb::from_coords(-1.0, -1.0, edge, 2.0)),
                1e-5,
            )
            .unwrap();
            let basis = TensorBasis::uniform(4, 1, 2, 4.0, 1.0).unwrap();
            let grid = MaterialGrid::new((4, 1), (4.0, 1.0), 1, (1e-5, 1.0)).unwrap();
            let mut cfg = IntegrationConfig::for_degree(2);
            cfg.depth = 12;
            let sys = Assembler::new(&basis, &alpha, &grid, cfg).unwrap().assemble(grid.gammas(), 1.0, 1.0).unwrap();
            dts.push(critical_dt(&sys, &sys.mass_solver(MassKind::Lumped).unwrap()).unwrap());
        }
        let max = dts.iter().copied().fold(0.0, f64::max);
        let min = dts.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((max - min) / max < 0.2, "{dts:?}");
    }

    #[test]
    fn adjoint_of_delta_is_time_shifted_forward() {
        let sys = square(5, 2, 1.0, &full());
        let mass = sys.mass_solver(MassKind::Consistent).unwrap();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let x_r = Point::new(0.3, 0.7);
        let rec = Receivers::new(&sys.basis, &[x_r]).unwrap();
        // delta at the final sample → adjoint run starts at reversed step 0
        let mut delta = Traces::zeros(1, grid.samples(), grid.dt);
        delta.set(0, grid.steps, 1.0);
        let adj = adjoint_run(&sys, &mass, &grid, &rec, &delta, 1).unwrap();
        // same as a forward run with an impulse at step 0, reversed in time
        let fp = rec.footprint(0);
        let mut spatial = vec![0.0; sys.num_dofs()];
        for (&i, &v) in fp.indices.iter().zip(&fp.values) {
            spatial[i] = v;
        }
        struct Kick<'a>(&'a [f64]);
        impl Forcing for Kick<'_> {
            fn force(&self, step: usize, _: f64, f: &mut [f64]) -> bool {
                if step == 0 {
                    f.copy_from_slice(self.0);
                }
                step == 0
            }
        }
        let (fwd, _) = Propagator::new(&sys, &mass, grid).unwrap().run(&Kick(&spatial), None, Some(1)).unwrap();
        for k in 0..=grid.steps {
            let a = adj.snapshot(grid.steps - k);
            let b = fwd.snapshot(k);
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
        // doubling the sources doubles the field
        let adj2 = adjoint_run(&sys, &mass, &grid, &rec, &delta.scaled(2.0), 1).unwrap();
        for (x, y) in adj.as_slice().iter().zip(adj2.as_slice()) {
            assert!((2.0 * x - y).abs() <= 1e-14 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn reciprocity() {
        let sys = square(5, 2, 1.0, &full());
        let mass = sys.mass_solver(MassKind::Consistent).unwrap();
        let grid = TimeGrid::new(2.0, 300).unwrap();
        let a = Point::new(0.25, 0.35);
        let b = Point::new(0.7, 0.6);
        let cfg = IntegrationConfig::for_degree(2);
        let spec_at = |p| crate::assembly::SourceSpec::new(p, 0.08, 3.0).unwrap();
        // exchange of two Gaussian source footprints, observed through the
        // other footprint
        let spec_a = spec_at(a);
        let spec_b = spec_at(b);
        let fa = crate::assembly::spatial_source(&sys.basis, &spec_a, &cfg).unwrap();
        let fb = crate::assembly::spatial_source(&sys.basis, &spec_b, &cfg).unwrap();
        let run_final = |f: &[f64]| {
            let forcing = Separable { spatial: f, signal: |t| spec_a.signal(t) };
            let (h, _) = Propagator::new(&sys, &mass, grid).unwrap().run(&forcing, None, Some(1)).unwrap();
            h
        };
        let ha = run_final(&fa);
        let hb = run_final(&fb);
        let max = (0..=grid.steps)
            .map(|k| fb.iter().zip(ha.snapshot(k)).map(|(x, y)| x * y).sum::<f64>().abs())
            .fold(0.0, f64::max);
        for k in 0..=grid.steps {
            let ab: f64 = fb.iter().zip(ha.snapshot(k)).map(|(x, y)| x * y).sum();
            let ba: f64 = fa.iter().zip(hb.snapshot(k)).map(|(x, y)| x * y).sum();
            assert!((ab - ba).abs() < 1e-6 * max);
        }
    }
}
