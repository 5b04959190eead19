//! Forward convergence study: final wave fields of a mesh family compared
//! against a finer run of the same solver on an evaluation window.

use std::time::Instant;

use fcmfwi_core::assembly::{spatial_source, MassKind};
use fcmfwi_core::dynamics::{Propagator, Separable, TimeGrid};
use fcmfwi_core::geometry::Point;
use fcmfwi_core::splines::TensorBasis;
use fcmfwi_core::{Error, Result};
use rayon::prelude::*;

use crate::config::{ConvergenceConfig, MassChoice, RunConfig};
use crate::setup::{self, Mesh};

/// Wave field at `T_max` for one discretization.
pub struct FinalField {
    pub basis: TensorBasis,
    pub coeffs: Vec<f64>,
    pub time: TimeGrid,
    pub dt_c: f64,
}

pub fn final_field(cfg: &RunConfig, h: f64, p: usize, mass: MassChoice) -> Result<FinalField> {
    let alpha = setup::known_alpha(cfg)?;
    let mesh = Mesh::new(cfg, &alpha, h, p, 1)?;
    let sys = mesh.system(mesh.grid.gammas(), cfg)?;
    let kind: MassKind = mass.into();
    let (time, dt_c) = setup::time_grid(cfg, &sys, kind)?;
    let solver = sys.mass_solver(kind)?;
    let integration = mesh.assembler.config();
    let specs = setup::sources(cfg)?;
    let mut spatial = vec![0.0; sys.num_dofs()];
    for s in &specs {
        let f = spatial_source(&sys.basis, s, &integration)?;
        spatial.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
    }
    let spec = specs[0];
    let prop = Propagator::new(&sys, &solver, time)?;
    let coeffs = prop.final_state(&Separable { spatial: &spatial, signal: |t| spec.signal(t) })?;
    Ok(FinalField { basis: sys.basis.clone(), coeffs, time, dt_c })
}

/// Field values on an `nx × ny` equidistant grid over `window`, x fastest.
pub fn sample(field: &FinalField, window: [f64; 4], nx: usize, ny: usize) -> Result<Vec<f64>> {
    let at = |k: usize, n: usize, a: f64, b: f64| a + (b - a) * k as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let y = at(j, ny, window[1], window[3]);
        for i in 0..nx {
            out.push(field.basis.evaluate(&field.coeffs, Point::new(at(i, nx, window[0], window[2]), y))?);
        }
    }
    Ok(out)
}

/// `‖u - u_ref‖ / ‖u_ref‖` over the sample points.
pub fn relative_error(u: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = u.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Least-squares slope of `ln y` over `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub p: usize,
    pub mass: MassChoice,
    pub h: f64,
    pub eps: f64,
    pub n_dof: usize,
    pub steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slope {
    pub p: usize,
    pub mass: MassChoice,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub slopes: Vec<Slope>,
    pub reference_seconds: f64,
}

impl StudyResult {
    pub fn slope(&self, p: usize, mass: MassChoice) -> Option<f64> {
        self.slopes.iter().find(|s| s.p == p && s.mass == mass).map(|s| s.slope)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("p,mass,h,eps\n");
        for r in &self.rows {
            s += &format!("{},{},{:?},{:?}\n", r.p, mass_name(r.mass), r.h, r.eps);
        }
        s
    }

    pub fn slopes_csv(&self) -> String {
        let mut s = String::from("p,mass,slope\n");
        for r in &self.slopes {
            s += &format!("{},{},{:?}\n", r.p, mass_name(r.mass), r.slope);
        }
        s
    }
}

pub fn mass_name(m: MassChoice) -> &'static str {
    match m {
        MassChoice::Consistent => "consistent",
        MassChoice::Lumped => "lumped",
    }
}

/// Runs the reference (consistent mass) and every `(p, mass, h)` member.
/// Slopes are fitted over the `fit_last` finest meshes.
pub fn convergence_study(cfg: &RunConfig) -> Result<StudyResult> {
    let study: &ConvergenceConfig =
        cfg.convergence.as_ref().ok_or_else(|| Error::InvalidState("no [convergence] reference configuration".into()))?;
    let t0 = Instant::now();
    let reference = final_field(cfg, study.reference_h_mm, study.reference_p, MassChoice::Consistent)?;
    let u_ref = sample(&reference, study.window_mm, study.eval_nx, study.eval_ny)?;
    drop(reference);
    let reference_seconds = t0.elapsed().as_secs_f64();
    log::info!("reference h = {} mm, p = {}: {reference_seconds:.1} s", study.reference_h_mm, study.reference_p);
    let mut hs = study.h_mm.clone();
    hs.sort_by(|a, b| b.partial_cmp(a).expect("finite h"));
    let mut combos = Vec::new();
    for &mass in &study.mass {
        for &p in &study.p {
            for &h in &hs {
                combos.push((p, mass, h));
            }
        }
    }
    let rows = combos
        .par_iter()
        .map(|&(p, mass, h)| {
            let t = Instant::now();
            let f = final_field(cfg, h, p, mass)?;
            let eps = relative_error(&sample(&f, study.window_mm, study.eval_nx, study.eval_ny)?, &u_ref);
            let seconds = t.elapsed().as_secs_f64();
            log::info!("p = {p}, {}, h = {h}: eps = {eps:.4e} ({seconds:.1} s)", mass_name(mass));
            Ok(StudyRow { p, mass, h, eps, n_dof: f.coeffs.len(), steps: f.time.steps, seconds })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut slopes = Vec::new();
    for &mass in &study.mass {
        for &p in &study.p {
            let fam: Vec<&StudyRow> = rows.iter().filter(|r| r.p == p && r.mass == mass).collect();
            let k = study.fit_last.min(fam.len());
            if k < 2 {
                continue;
            }
            let tail = &fam[fam.len() - k..];
            let h: Vec<f64> = tail.iter().map(|r| r.h).collect();
            let e: Vec<f64> = tail.iter().map(|r| r.eps).collect();
            slopes.push(Slope { p, mass, slope: loglog_slope(&h, &e) });
        }
    }
    Ok(StudyResult { rows, slopes, reference_seconds })
}
