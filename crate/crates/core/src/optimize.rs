//! Projected limited-memory BFGS for box-constrained minimization.
//!
//! Search directions come from the two-loop recursion applied to the
//! gradient with the active bound components removed; trial points are
//! clipped to the box and accepted by Armijo backtracking. An optional
//! positive diagonal scaling `D` preconditions the recursion (`H₀ = h₀ D`).

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Misfit and gradient at a point.
pub type Objective<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Stored correction pairs.
    pub memory: usize,
    pub lower: f64,
    pub upper: f64,
    /// Iteration budget `N^i`.
    pub max_iter: usize,
    /// Stop when `‖P(x - g) - x‖∞ <= tol_grad`.
    pub tol_grad: f64,
    /// Stop when the relative decrease over the last two iterations is
    /// `<= tol_chi`.
    pub tol_chi: f64,
    pub armijo: f64,
    pub max_trials: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            lower: 1e-5,
            upper: 1.0,
            max_iter: 10,
            tol_grad: 0.0,
            tol_chi: 0.0,
            armijo: 1e-4,
            max_trials: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Accepted,
    /// No trial point satisfied the Armijo condition; `x` is unchanged.
    NoProgress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    Stationary,
    Stalled,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Budget => "budget",
            StopReason::Stationary => "stationary",
            StopReason::Stalled => "stalled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub x: Vec<f64>,
    pub chi: f64,
    pub grad: Vec<f64>,
    pub status: StepStatus,
    /// `‖x_new - x‖∞`
    pub step_len: f64,
    /// Objective evaluations spent in this step.
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
    /// Diagonal of `D`; empty means the identity.
    scaling: Vec<f64>,
    /// Completed iterations.
    pub k: usize,
    /// `χ` at the start and after every iteration.
    pub chi_history: Vec<f64>,
    pub evaluations: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.lower <= config.upper) {
            return Err(Error::invalid(format!("empty box [{}, {}]", config.lower, config.upper)));
        }
        if !(config.armijo > 0.0 && config.armijo < 1.0) || config.max_trials == 0 {
            return Err(Error::invalid("line search needs 0 < c < 1 and at least one trial"));
        }
        Ok(Self { config, pairs: VecDeque::new(), scaling: Vec::new(), k: 0, chi_history: Vec::new(), evaluations: 0 })
    }

    /// Sets the diagonal preconditioner; entries must be positive and finite.
    pub fn with_scaling(mut self, scaling: Vec<f64>) -> Result<Self> {
        if scaling.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::invalid("scaling entries must be positive and finite"));
        }
        self.scaling = scaling;
        Ok(self)
    }

    fn scale(&self, v: &mut [f64]) {
        if self.scaling.is_empty() {
            return;
        }
        v.iter_mut().zip(&self.scaling).for_each(|(a, d)| *a *= d);
    }

    pub fn memory_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn clip(&self, x: &mut [f64]) {
        for v in x {
            *v = v.clamp(self.config.lower, self.config.upper);
        }
    }

    /// `‖P(x - g) - x‖∞`
    pub fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        x.iter()
            .zip(g)
            .map(|(xi, gi)| libm::fabs((xi - gi).clamp(self.config.lower, self.config.upper) - xi))
            .fold(0.0, f64::max)
    }

    /// Gradient with components pushing against an active bound zeroed.
    pub fn free_gradient(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(g)
            .map(|(&xi, &gi)| {
                let at_lower = xi <= self.config.lower && gi > 0.0;
                let at_upper = xi >= self.config.upper && gi < 0.0;
                if at_lower || at_upper {
                    0.0
                } else {
                    gi
                }
            })
            .collect()
    }

    /// Two-loop recursion on the free gradient; with empty memory the
    /// direction is `-D g_F / ‖D g_F‖∞`.
    pub fn direction(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        if !self.scaling.is_empty() {
            assert_eq!(self.scaling.len(), x.len(), "scaling length differs from the iterate");
        }
        let gf = self.free_gradient(x, g);
        let mut dg = gf.clone();
        self.scale(&mut dg);
        let gmax = dg.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
        if gmax == 0.0 {
            return vec![0.0; x.len()];
        }
        let steepest = || dg.iter().map(|v| -v / gmax).collect::<Vec<f64>>();
        if self.pairs.is_empty() {
            return steepest();
        }
        let mut q = gf.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        let (s, y, _) = self.pairs.back().unwrap();
        let mut dy = y.clone();
        self.scale(&mut dy);
        let h0 = dot(s, y) / dot(y, &dy);
        self.scale(&mut q);
        q.iter_mut().for_each(|v| *v *= h0);
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        for (di, gi) in d.iter_mut().zip(&gf) {
            if *gi == 0.0 {
                *di = 0.0;
            }
        }
        if dot(&d, &gf) < 0.0 {
            d
        } else {
            steepest()
        }
    }

    /// One iteration from `(x, chi, grad)`. `eval` returns `(χ, ∇χ)`.
    pub fn step(
        &mut self,
        x: &[f64],
        chi: f64,
        grad: &[f64],
        eval: &mut Objective<'_>,
    ) -> Result<StepOutcome> {
        if grad.len() != x.len() {
            return Err(Error::invalid("gradient and iterate lengths differ"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("gradient contains non-finite entries"));
        }
        if !chi.is_finite() {
            return Err(Error::invalid("objective is not finite"));
        }
        if self.chi_history.is_empty() {
            self.chi_history.push(chi);
        }
        let d = self.direction(x, grad);
        let mut alpha = 1.0;
        let mut evaluations = 0;
        let mut trial = vec![0.0; x.len()];
        let mut accepted = None;
        if d.iter().any(|v| *v != 0.0) {
            for _ in 0..self.config.max_trials {
                for i in 0..x.len() {
                    trial[i] = (x[i] + alpha * d[i]).clamp(self.config.lower, self.config.upper);
                }
                let decrease: f64 = grad.iter().zip(&trial).zip(x).map(|((g, t), xi)| g * (t - xi)).sum();
                if decrease >= 0.0 {
                    alpha *= 0.5;
                    continue;
                }
                let (f, g) = eval(&trial)?;
                evaluations += 1;
                if f.is_finite() && f <= chi + self.config.armijo * decrease {
                    accepted = Some((f, g));
                    break;
                }
                alpha *= 0.5;
            }
        }
        self.evaluations += evaluations;
        self.k += 1;
        let Some((f, g)) = accepted else {
            self.chi_history.push(chi);
            return Ok(StepOutcome {
                x: x.to_vec(),
                chi,
                grad: grad.to_vec(),
                status: StepStatus::NoProgress,
                step_len: 0.0,
                evaluations,
            });
        };
        if g.len() != x.len() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("evaluator returned a non-finite or mis-sized gradient"));
        }
        let s: Vec<f64> = trial.iter().zip(x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g.iter().zip(grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * libm::sqrt(dot(&s, &s)) * libm::sqrt(dot(&y, &y)) {
            if self.pairs.len() == self.config.memory {
                self.pairs.pop_front();
            }
            if self.config.memory > 0 {
                self.pairs.push_back((s.clone(), y, 1.0 / sy));
            }
        }
        self.chi_history.push(f);
        let step_len = s.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
        Ok(StepOutcome { x: trial, chi: f, grad: g, status: StepStatus::Accepted, step_len, evaluations })
    }

    pub fn converged(&self, proj_grad_norm: f64) -> Option<StopReason> {
        if self.k >= self.config.max_iter {
            return Some(StopReason::Budget);
        }
        if proj_grad_norm <= self.config.tol_grad {
            return Some(StopReason::Stationary);
        }
        let h = &self.chi_history;
        if h.len() >= 3 {
            let old = h[h.len() - 3];
            let new = h[h.len() - 1];
            let rel = if old == 0.0 { 0.0 } else { (old - new) / libm::fabs(old) };
            if rel <= self.config.tol_chi {
                return Some(StopReason::Stalled);
            }
        }
        None
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Runs `step` until `converged` fires or a step makes no progress.
pub fn minimize(
    state: &mut OptimizerState,
    x0: &[f64],
    eval: &mut Objective<'_>,
) -> Result<(Vec<f64>, f64, StopReason)> {
    let mut x = x0.to_vec();
    state.clip(&mut x);
    let (mut chi, mut grad) = eval(&x)?;
    state.evaluations += 1;
    loop {
        if let Some(r) = state.converged(state.projected_gradient_norm(&x, &grad)) {
            return Ok((x, chi, r));
        }
        let out = state.step(&x, chi, &grad, eval)?;
        if out.status == StepStatus::NoProgress {
            return Ok((x, chi, StopReason::Stalled));
        }
        x = out.x;
        chi = out.chi;
        grad = out.grad;
    }
}
