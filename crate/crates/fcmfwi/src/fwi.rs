//! Reference synthesis, forward runs and the two-stage inversion.

use std::time::Instant;

use fcmfwi_core::adjoint::{InversionProblem, ProblemSetup};
use fcmfwi_core::assembly::{Assembler, MassKind};
use fcmfwi_core::dynamics::{Propagator, Separable, TimeGrid, Traces, WaveHistory};
use fcmfwi_core::geometry::AlphaField;
use fcmfwi_core::material::{compute_indicator, select_and_refine, IndicatorField, MaterialGrid};
use fcmfwi_core::optimize::{OptimizerConfig, OptimizerState, StepStatus, StopReason};
use fcmfwi_core::{Error, Result};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::io::JournalRow;
use crate::setup::{self, Mesh};

/// Seconds spent per phase. Source-parallel phases add up the time of
/// every source.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub assembly: f64,
    pub forward: f64,
    pub adjoint: f64,
    pub gradient: f64,
    pub optimizer: f64,
    /// Number of misfit and gradient evaluations.
    pub evaluations: usize,
}

impl Timings {
    /// Time spent inside misfit and gradient evaluations.
    pub fn evaluation(&self) -> f64 {
        self.assembly + self.forward + self.adjoint + self.gradient
    }

    pub fn total(&self) -> f64 {
        self.evaluation() + self.optimizer
    }

    pub fn add(&mut self, o: &Timings) {
        self.assembly += o.assembly;
        self.forward += o.forward;
        self.adjoint += o.adjoint;
        self.gradient += o.gradient;
        self.optimizer += o.optimizer;
        self.evaluations += o.evaluations;
    }

    /// `phase seconds share` lines.
    pub fn table(&self) -> String {
        let total = self.total().max(f64::MIN_POSITIVE);
        [
            ("assembly", self.assembly),
            ("forward", self.forward),
            ("adjoint", self.adjoint),
            ("gradient", self.gradient),
            ("optimizer", self.optimizer),
        ]
        .iter()
        .map(|(n, t)| format!("{n:<10} {t:>10.3} s {:>6.1} %\n", 100.0 * t / total))
        .collect()
    }
}

/// Misfit and gradient of an [`InversionProblem`] with sources run in
/// parallel and summed in source order.
pub struct Evaluator<'a> {
    pub problem: &'a InversionProblem,
    pub timings: Timings,
}

/// One evaluation with its per-source traces.
pub struct Evaluation {
    pub chi: f64,
    pub gradient: Vec<f64>,
    pub traces: Vec<Traces>,
}

struct SourceOut {
    chi: f64,
    gradient: Vec<f64>,
    traces: Traces,
    forward: f64,
    adjoint: f64,
    kernel: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(problem: &'a InversionProblem) -> Self {
        Self { problem, timings: Timings::default() }
    }

    /// `(χ, ∇χ)`; an unstable trial model yields `χ = ∞`.
    pub fn evaluate(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.evaluate_full(x) {
            Ok(e) => Ok((e.chi, e.gradient)),
            Err(Error::Instability { step }) => {
                log::debug!("trial model unstable at step {step}");
                Ok((f64::INFINITY, vec![0.0; x.len()]))
            }
            Err(e) => Err(e),
        }
    }

    pub fn evaluate_full(&mut self, x: &[f64]) -> Result<Evaluation> {
        let p = self.problem;
        self.timings.evaluations += 1;
        let t0 = Instant::now();
        let prep = p.prepare(x)?;
        self.timings.assembly += t0.elapsed().as_secs_f64();
        let outs: Vec<Result<SourceOut>> = (0..p.sources.len())
            .into_par_iter()
            .map(|s| {
                let t = Instant::now();
                let (fwd, traces) = p.forward(&prep, s, true)?;
                let forward = t.elapsed().as_secs_f64();
                let t = Instant::now();
                let (chi, residual) = p.residual(s, &traces)?;
                let adj = p.adjoint(&prep, &residual)?;
                let adjoint = t.elapsed().as_secs_f64();
                let t = Instant::now();
                let mut gradient = vec![0.0; p.num_free()];
                p.kernel.accumulate(&fwd, &adj, p.time.dt, &mut gradient)?;
                let kernel = t.elapsed().as_secs_f64();
                Ok(SourceOut { chi, gradient, traces, forward, adjoint, kernel })
            })
            .collect();
        let mut chi = 0.0;
        let mut gradient = vec![0.0; p.num_free()];
        let mut traces = Vec::with_capacity(outs.len());
        for o in outs {
            let o = o?;
            chi += o.chi;
            gradient.iter_mut().zip(&o.gradient).for_each(|(g, v)| *g += v);
            traces.push(o.traces);
            self.timings.forward += o.forward;
            self.timings.adjoint += o.adjoint;
            self.timings.gradient += o.kernel;
        }
        Ok(Evaluation { chi, gradient, traces })
    }
}

/// Outcome of one optimization stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub journal: Vec<JournalRow>,
    pub reason: StopReason,
    pub n_free: usize,
    pub n_voxels: usize,
    pub timings: Timings,
}

impl StageReport {
    /// χ after every iteration, starting with the initial model.
    pub fn chi(&self) -> Vec<f64> {
        self.journal.iter().map(|r| r.chi).collect()
    }

    pub fn final_chi(&self) -> f64 {
        self.journal.last().map_or(f64::NAN, |r| r.chi)
    }
}

pub fn optimizer_config(cfg: &RunConfig, iterations: usize) -> OptimizerConfig {
    let i = &cfg.inversion;
    OptimizerConfig {
        memory: i.memory,
        lower: i.gamma_min,
        upper: i.gamma_max,
        max_iter: iterations,
        tol_grad: i.tol_grad,
        tol_chi: i.tol_chi,
        armijo: i.armijo,
        max_trials: i.max_trials,
    }
}

/// Runs a fresh bounded quasi-Newton optimizer from the problem's current
/// values. Returns the final free values.
/// `scaling` preconditions the optimizer (see [`area_scaling`]).
pub fn run_stage(
    problem: &InversionProblem,
    config: OptimizerConfig,
    scaling: Option<Vec<f64>>,
) -> Result<(Vec<f64>, StageReport)> {
    let start = Instant::now();
    let mut state = OptimizerState::new(config)?;
    if let Some(d) = scaling {
        state = state.with_scaling(d)?;
    }
    let mut ev = Evaluator::new(problem);
    let mut x = problem.initial();
    state.clip(&mut x);
    let (mut chi, mut grad) = ev.evaluate(&x)?;
    if !chi.is_finite() {
        return Err(Error::Instability { step: 0 });
    }
    let mut journal =
        vec![JournalRow { iter: 0, chi, proj_grad_norm: state.projected_gradient_norm(&x, &grad), step_len: 0.0, n_evals: 1 }];
    log::info!("iter 0: chi = {chi:.6e}");
    let reason = loop {
        let pg = state.projected_gradient_norm(&x, &grad);
        if let Some(r) = state.converged(pg) {
            break r;
        }
        let out = state.step(&x, chi, &grad, &mut |y: &[f64]| ev.evaluate(y))?;
        let pg = state.projected_gradient_norm(&out.x, &out.grad);
        journal.push(JournalRow {
            iter: state.k,
            chi: out.chi,
            proj_grad_norm: pg,
            step_len: out.step_len,
            n_evals: out.evaluations,
        });
        log::info!("iter {}: chi = {:.6e}, |Pg| = {pg:.3e}, evals = {}", state.k, out.chi, out.evaluations);
        if out.status == StepStatus::NoProgress {
            break StopReason::Stalled;
        }
        x = out.x;
        chi = out.chi;
        grad = out.grad;
    };
    let mut timings = ev.timings;
    timings.optimizer = (start.elapsed().as_secs_f64() - timings.evaluation()).max(0.0);
    let report =
        StageReport { journal, reason, n_free: problem.num_free(), n_voxels: problem.expand(&x).len(), timings };
    Ok((x, report))
}

pub fn problem_setup(cfg: &RunConfig, time: TimeGrid) -> Result<ProblemSetup> {
    let stride = cfg.discretization.history_stride;
    if !time.steps.is_multiple_of(stride) {
        return Err(Error::invalid(format!("history stride {stride} does not divide {} steps", time.steps)));
    }
    Ok(ProblemSetup {
        rho0: cfg.domain.rho0_kg_per_m3,
        c0: cfg.c0(),
        mass: cfg.discretization.mass.into(),
        time,
        stride,
        rule: cfg.inversion.kernel.into(),
        sources: setup::sources(cfg)?,
        receivers: cfg.receiver_points(),
        window: cfg.window(),
    })
}

/// Time grid of the inversion: derived once from the homogeneous model on
/// the level-0 grid and kept for every stage.
pub fn inversion_time(cfg: &RunConfig, mesh: &Mesh) -> Result<(TimeGrid, f64)> {
    let sys = mesh.system(mesh.grid.gammas(), cfg)?;
    setup::time_grid(cfg, &sys, cfg.discretization.mass.into())
}

pub struct Synthesis {
    pub traces: Vec<Traces>,
    pub time: TimeGrid,
    pub dt_c: f64,
    pub n_dof: usize,
}

/// Reference traces on the finer synthesis mesh with the defects in α.
/// The synthesis step is an integer fraction of the inversion step.
pub fn synthesize(cfg: &RunConfig) -> Result<Synthesis> {
    let t = &cfg.discretization;
    let inv_mesh = Mesh::new(cfg, &setup::known_alpha(cfg)?, t.h_mm, t.p, t.n_v)?;
    let (inv_time, _) = inversion_time(cfg, &inv_mesh)?;
    drop(inv_mesh);
    let h = t.h_mm / t.synthesis_h_factor as f64;
    let p = t.p + t.synthesis_p_increase;
    let mesh = Mesh::new(cfg, &setup::true_alpha(cfg)?, h, p, 1)?;
    let sys = mesh.system(mesh.grid.gammas(), cfg)?;
    let kind: MassKind = t.mass.into();
    let mass = sys.mass_solver(kind)?;
    let dt_c = fcmfwi_core::dynamics::critical_dt(&sys, &mass)?;
    let factor = if t.auto_dt { (inv_time.dt / (t.dt_safety * dt_c)).ceil().max(1.0) as usize } else { 1 };
    let time = TimeGrid::new(t.t_max_us, inv_time.steps * factor)?;
    log::info!(
        "synthesis: h = {h} mm, p = {p}, {} dofs, dt = {:.4e} us ({} x inversion), dt_c = {dt_c:.4e} us",
        sys.num_dofs(),
        time.dt,
        factor
    );
    let traces = run_sources(cfg, &sys, &mass, mesh.assembler.config(), time, None)?
        .into_iter()
        .map(|(t, _)| t)
        .collect();
    Ok(Synthesis { traces, time, dt_c, n_dof: sys.num_dofs() })
}

fn run_sources(
    cfg: &RunConfig,
    sys: &fcmfwi_core::assembly::WaveSystem,
    mass: &fcmfwi_core::assembly::MassSolver,
    integration: fcmfwi_core::assembly::IntegrationConfig,
    time: TimeGrid,
    stride: Option<usize>,
) -> Result<Vec<(Traces, Option<WaveHistory>)>> {
    let specs = setup::sources(cfg)?;
    let receivers = fcmfwi_core::dynamics::Receivers::new(&sys.basis, &cfg.receiver_points())?;
    let prop = Propagator::new(sys, mass, time)?;
    specs
        .par_iter()
        .map(|spec| {
            let spatial = fcmfwi_core::assembly::spatial_source(&sys.basis, spec, &integration)?;
            let forcing = Separable { spatial: &spatial, signal: |t| spec.signal(t) };
            let (h, traces) = prop.run(&forcing, Some(&receivers), stride)?;
            Ok((traces.expect("receivers were given"), stride.map(|_| h)))
        })
        .collect()
}

pub struct ForwardRun {
    pub traces: Vec<Traces>,
    pub histories: Vec<WaveHistory>,
    pub time: TimeGrid,
    pub dt_c: f64,
    pub n_dof: usize,
}

/// Forward runs on the inversion mesh for a given γ field (γ ≡ 1 if none).
pub fn forward(cfg: &RunConfig, gamma: Option<&MaterialGrid>, with_defects: bool, keep_history: bool) -> Result<ForwardRun> {
    let t = &cfg.discretization;
    let alpha = if with_defects { setup::true_alpha(cfg)? } else { setup::known_alpha(cfg)? };
    let b = setup::basis(cfg, t.h_mm, t.p)?;
    let grid = match gamma {
        Some(g) => {
            if g.spans() != b.spans() || g.extent() != b.extent() {
                return Err(Error::invalid("γ grid does not match the wave mesh"));
            }
            g.clone()
        }
        None => setup::material_grid(cfg, &b, t.n_v)?,
    };
    let assembler = Assembler::new(&b, &alpha, &grid, setup::integration(cfg, t.p))?;
    let sys = assembler.assemble(grid.gammas(), cfg.domain.rho0_kg_per_m3, cfg.c0())?;
    let kind: MassKind = t.mass.into();
    let (time, dt_c) = setup::time_grid(cfg, &sys, kind)?;
    let mass = sys.mass_solver(kind)?;
    let stride = keep_history.then_some(t.history_stride);
    let runs = run_sources(cfg, &sys, &mass, assembler.config(), time, stride)?;
    let (traces, histories): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    Ok(ForwardRun { traces, histories: histories.into_iter().flatten().collect(), time, dt_c, n_dof: sys.num_dofs() })
}

#[derive(Debug, Clone)]
pub struct InversionReport {
    pub grid: MaterialGrid,
    pub stage1_grid: MaterialGrid,
    pub stages: Vec<StageReport>,
    pub indicator: Option<IndicatorField>,
    pub marked: Option<Vec<bool>>,
    pub nothing_to_refine: bool,
    /// Stage 2 did not run.
    pub early_exit: bool,
    pub timings: Timings,
    pub time: TimeGrid,
    pub dt_c: f64,
    pub n_dof: usize,
}

/// Level-0 voxel area over each free voxel's area, so that the optimizer
/// sees kernel densities and sub-voxels move as fast as coarse voxels.
/// `None` when disabled in the configuration.
pub fn area_scaling(cfg: &RunConfig, grid: &MaterialGrid, problem: &InversionProblem) -> Option<Vec<f64>> {
    if !cfg.inversion.area_scaling {
        return None;
    }
    let (hx, hy) = grid.level0_size();
    Some(problem.free().iter().map(|&id| hx * hy / grid.voxel_area(id)).collect())
}

/// Stage 1 on the level-0 grid, indicator and refinement, stage 2 on the
/// refined grid with a fresh optimizer.
pub fn invert(cfg: &RunConfig, reference: &[Traces]) -> Result<InversionReport> {
    let t = &cfg.discretization;
    let inv = &cfg.inversion;
    let alpha = setup::known_alpha(cfg)?;
    let t0 = Instant::now();
    let mesh = Mesh::new(cfg, &alpha, t.h_mm, t.p, t.n_v)?;
    let (time, dt_c) = inversion_time(cfg, &mesh)?;
    let n_dof = mesh.assembler.basis().num_dofs();
    log::info!("inversion: {n_dof} dofs, {} steps, dt = {:.4e} us, dt_c = {dt_c:.4e} us", time.steps, time.dt);
    let setup = problem_setup(cfg, time)?;
    let basis = mesh.assembler.basis().clone();
    let Mesh { assembler, grid, .. } = mesh;
    let problem = InversionProblem::new(assembler, &grid, &alpha, &setup, reference)?;
    let setup_time = t0.elapsed().as_secs_f64();
    log::info!("stage 1: {} voxels, {} free", grid.len(), problem.num_free());
    let (x1, mut s1) = run_stage(
        &problem,
        optimizer_config(cfg, inv.iterations_stage1),
        area_scaling(cfg, &grid, &problem),
    )?;
    s1.timings.assembly += setup_time;
    let mut stage1_grid = grid.clone();
    stage1_grid.set_gammas(&problem.expand(&x1))?;
    drop(problem);
    let mut timings = s1.timings;
    let mut report = InversionReport {
        grid: stage1_grid.clone(),
        stage1_grid,
        stages: vec![s1],
        indicator: None,
        marked: None,
        nothing_to_refine: false,
        early_exit: true,
        timings,
        time,
        dt_c,
        n_dof,
    };
    if !inv.refine || inv.iterations_stage2 == 0 {
        return Ok(report);
    }
    let indicator = compute_indicator(&report.stage1_grid)?;
    let refinement =
        select_and_refine(&report.stage1_grid, &indicator, inv.tau_fraction, inv.layers, inv.n_vs, inv.strategy.into())?;
    report.indicator = Some(indicator);
    report.marked = Some(refinement.marked.clone());
    if refinement.nothing_to_refine {
        log::info!("nothing to refine; stage 2 skipped");
        report.nothing_to_refine = true;
        return Ok(report);
    }
    let t0 = Instant::now();
    let grid2 = refinement.grid;
    let assembler = Assembler::new(&basis, &alpha, &grid2, setup::integration(cfg, t.p))?;
    let problem = InversionProblem::new(assembler, &grid2, &alpha, &setup, reference)?;
    let setup_time = t0.elapsed().as_secs_f64();
    log::info!(
        "stage 2: {} marked cells, {} voxels, {} free",
        report.marked.as_ref().map_or(0, |m| m.iter().filter(|&&b| b).count()),
        grid2.len(),
        problem.num_free()
    );
    let (x2, mut s2) = run_stage(
        &problem,
        optimizer_config(cfg, inv.iterations_stage2),
        area_scaling(cfg, &grid2, &problem),
    )?;
    s2.timings.assembly += setup_time;
    let mut final_grid = grid2.clone();
    final_grid.set_gammas(&problem.expand(&x2))?;
    timings.add(&s2.timings);
    report.grid = final_grid;
    report.stages.push(s2);
    report.timings = timings;
    report.early_exit = false;
    Ok(report)
}

/// Level-0 indicator and refinement mask of a γ field.
pub fn indicator(cfg: &RunConfig, grid: &MaterialGrid) -> Result<(IndicatorField, Vec<bool>)> {
    let inv = &cfg.inversion;
    let ind = compute_indicator(grid)?;
    let marked = fcmfwi_core::material::mark_cells(&ind, inv.tau_fraction, inv.layers);
    Ok((ind, marked))
}

/// Alpha field actually used by the inversion, for reporting.
pub fn inversion_alpha(cfg: &RunConfig) -> Result<AlphaField> {
    setup::known_alpha(cfg)
}
