//! Subcommand implementations shared by the binary and the tests.

use std::path::{Path, PathBuf};

use fcmfwi_core::adjoint::InversionProblem;
use fcmfwi_core::material::MaterialGrid;

use crate::config::{KernelChoice, Loaded, RunConfig};
use crate::convergence::{self, StudyResult};
use crate::error::{AppError, AppResult};
use crate::fwi::{self, InversionReport};
use crate::io;
use crate::setup;

/// Provenance record: command, version, modelling choices and the resolved
/// configuration.
pub fn manifest(cfg: &RunConfig, command: &str) -> String {
    let mut run = toml::Table::new();
    run.insert("command".into(), command.into());
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    let mut design = toml::Table::new();
    let kernel = match cfg.inversion.kernel {
        KernelChoice::VoxelIntegral => "exact discrete adjoint, kernel integrated over each voxel (area weighted)",
        KernelChoice::Midpoint => "kernel at voxel midpoint, central-difference velocities, not area weighted",
    };
    let entries = [
        (
            "burst_envelope",
            format!("sin(2 pi f t) * sin(pi f t / 2)^{} for t <= 2/f", cfg.sources.envelope_exponent),
        ),
        ("kernel_weighting", kernel.to_string()),
        ("refinement_neighborhood", "moore (8 neighbours per layer)".into()),
        ("indicator_boundary_jumps", "zero at the embedding box".into()),
        ("adjoint_injection", "at time steps, trapezoid end weights".into()),
        ("optimizer", "projected L-BFGS, memory discarded at refinement".into()),
        ("source_integration", "Gauss rule on whole spans, no alpha".into()),
        ("reference_interpolation", "linear in time".into()),
    ];
    for (k, v) in entries {
        design.insert(k.into(), v.into());
    }
    let mut doc = toml::Table::new();
    doc.insert("run".into(), toml::Value::Table(run));
    doc.insert("design".into(), toml::Value::Table(design));
    if let toml::Value::Table(t) = toml::Value::try_from(cfg).expect("configuration serializes") {
        doc.extend(t);
    }
    toml::to_string(&doc).expect("manifest serializes")
}

fn write_manifest(loaded: &Loaded, dir: &Path, command: &str) -> AppResult<()> {
    io::write_text(&dir.join("manifest.toml"), &manifest(&loaded.config, command))
}

pub fn synthesize(loaded: &Loaded) -> AppResult<Vec<PathBuf>> {
    let cfg = &loaded.config;
    let syn = fwi::synthesize(cfg)?;
    let dir = loaded.reference_dir();
    let files = io::write_trace_set(&dir, &syn.traces)?;
    write_manifest(loaded, &dir, "synthesize")?;
    println!(
        "synthesized {} trace files: dt = {:.6e} us, dt_c = {:.6e} us, n_dof = {}",
        files.len(),
        syn.time.dt,
        syn.dt_c,
        syn.n_dof
    );
    Ok(files)
}

pub fn forward(loaded: &Loaded, gamma: Option<&Path>, with_defects: bool) -> AppResult<fwi::ForwardRun> {
    let cfg = &loaded.config;
    let grid = gamma.map(|p| read_grid(cfg, &loaded.base.join(p))).transpose()?;
    let run = fwi::forward(cfg, grid.as_ref(), with_defects, cfg.output.dump_history)?;
    let dir = loaded.output_dir().join("forward");
    io::write_trace_set(&dir, &run.traces)?;
    for (s, h) in run.histories.iter().enumerate() {
        io::write_history(&dir.join(format!("history_s{s:03}.bin")), h)?;
    }
    write_manifest(loaded, &dir, "forward")?;
    println!("dt = {:.6e} us, dt_c = {:.6e} us, n_dof = {}, steps = {}", run.time.dt, run.dt_c, run.n_dof, run.time.steps);
    Ok(run)
}

pub fn read_grid(cfg: &RunConfig, path: &Path) -> AppResult<MaterialGrid> {
    let i = &cfg.inversion;
    io::read_gamma_grid(path, cfg.discretization.n_v, (i.gamma_min, i.gamma_max))
}

fn write_grid_files(dir: &Path, stem: &str, grid: &MaterialGrid) -> AppResult<()> {
    io::write_gamma_grid(&dir.join(format!("{stem}.txt")), grid)?;
    io::write_gamma_csv(&dir.join(format!("{stem}.csv")), grid)?;
    io::write_gamma_pgm(&dir.join(format!("{stem}.pgm")), grid)
}

pub fn invert(loaded: &Loaded) -> AppResult<InversionReport> {
    let cfg = &loaded.config;
    let reference = io::read_trace_set(&loaded.reference_dir(), cfg.sources.x_mm.len())?;
    let report = fwi::invert(cfg, &reference)?;
    let dir = loaded.output_dir();
    write_manifest(loaded, &dir, "invert")?;
    write_grid_files(&dir, "gamma_stage1", &report.stage1_grid)?;
    write_grid_files(&dir, "gamma_final", &report.grid)?;
    for (k, s) in report.stages.iter().enumerate() {
        io::write_journal(&dir.join(format!("journal_stage{}.csv", k + 1)), &s.journal)?;
    }
    if let (Some(ind), Some(marked)) = (&report.indicator, &report.marked) {
        io::write_indicator_csv(&dir.join("indicator.csv"), &report.stage1_grid, ind, marked)?;
    }
    if cfg.output.dump_gradient {
        let (ids, g) = gradient_at(cfg, &report.grid, &reference)?;
        io::write_voxel_csv(&dir.join("gradient.csv"), &report.grid, &ids, &g, "gradient")?;
    }
    io::write_text(&dir.join("report.toml"), &report_text(&report))?;
    let chi: Vec<String> = report.stages.iter().map(|s| format!("{:.6e}", s.final_chi())).collect();
    println!(
        "stages = {}, final chi = [{}], nothing_to_refine = {}, voxels = {}",
        report.stages.len(),
        chi.join(", "),
        report.nothing_to_refine,
        report.grid.len()
    );
    print!("{}", report.timings.table());
    Ok(report)
}

/// Gradient over the free voxels of `grid`, with their ids.
pub fn gradient_at(
    cfg: &RunConfig,
    grid: &MaterialGrid,
    reference: &[fcmfwi_core::dynamics::Traces],
) -> AppResult<(Vec<usize>, Vec<f64>)> {
    let t = &cfg.discretization;
    let alpha = setup::known_alpha(cfg)?;
    let level0 = setup::Mesh::new(cfg, &alpha, t.h_mm, t.p, t.n_v)?;
    let (time, _) = fwi::inversion_time(cfg, &level0)?;
    let basis = level0.assembler.basis().clone();
    let assembler = fcmfwi_core::assembly::Assembler::new(&basis, &alpha, grid, setup::integration(cfg, t.p))?;
    let problem = InversionProblem::new(assembler, grid, &alpha, &fwi::problem_setup(cfg, time)?, reference)?;
    let (_, g) = problem.evaluate(&problem.initial())?;
    Ok((problem.free().to_vec(), g))
}

pub fn report_text(r: &InversionReport) -> String {
    let mut s = String::new();
    s += &format!(
        "n_dof = {}\nsteps = {}\ndt_us = {:?}\ndt_c_us = {:?}\nnothing_to_refine = {}\nearly_exit = {}\n",
        r.n_dof, r.time.steps, r.time.dt, r.dt_c, r.nothing_to_refine, r.early_exit
    );
    if let Some(m) = &r.marked {
        s += &format!("marked_cells = {}\n", m.iter().filter(|&&b| b).count());
    }
    for (k, st) in r.stages.iter().enumerate() {
        let chi: Vec<String> = st.chi().iter().map(|c| format!("{c:?}")).collect();
        s += &format!(
            "\n[stage{}]\nvoxels = {}\nfree = {}\nstop = \"{}\"\nchi = [{}]\n",
            k + 1,
            st.n_voxels,
            st.n_free,
            st.reason.as_str(),
            chi.join(", ")
        );
    }
    let t = &r.timings;
    let total = t.total().max(f64::MIN_POSITIVE);
    s += "\n[timings]\n";
    for (n, v) in [
        ("assembly", t.assembly),
        ("forward", t.forward),
        ("adjoint", t.adjoint),
        ("gradient", t.gradient),
        ("optimizer", t.optimizer),
    ] {
        s += &format!("{n}_s = {v:?}\n{n}_share = {:?}\n", v / total);
    }
    s += &format!("evaluations = {}\n", t.evaluations);
    s
}

pub fn convergence_study(loaded: &Loaded) -> AppResult<StudyResult> {
    let res = convergence::convergence_study(&loaded.config)?;
    let dir = loaded.output_dir();
    io::write_text(&dir.join("convergence.csv"), &res.csv())?;
    io::write_text(&dir.join("convergence_slopes.csv"), &res.slopes_csv())?;
    write_manifest(loaded, &dir, "convergence-study")?;
    for s in &res.slopes {
        println!("p = {}, {}: slope = {:.3}", s.p, convergence::mass_name(s.mass), s.slope);
    }
    Ok(res)
}

pub fn indicator(loaded: &Loaded, gamma: &Path) -> AppResult<usize> {
    let cfg = &loaded.config;
    let grid = read_grid(cfg, &loaded.base.join(gamma))?;
    let (ind, marked) = fwi::indicator(cfg, &grid)?;
    let dir = loaded.output_dir();
    io::write_indicator_csv(&dir.join("indicator.csv"), &grid, &ind, &marked)?;
    write_manifest(loaded, &dir, "indicator")?;
    let n = marked.iter().filter(|&&b| b).count();
    println!("eta_max = {:.6e}, tau = {:.6e}, marked cells = {n}", ind.max(), cfg.inversion.tau_fraction * ind.max());
    Ok(n)
}

/// Reads the configuration, naming the path on failure.
pub fn load(path: &Path, overrides: &[String]) -> AppResult<Loaded> {
    if !path.exists() {
        return Err(AppError::Config { path: path.to_path_buf(), message: "file not found".into() });
    }
    RunConfig::load(path, overrides)
}
