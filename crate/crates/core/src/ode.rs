//! Explicit Runge-Kutta integration of linear complex ODE systems.
//!
//! Two methods are provided: classical fixed-step RK4 and the adaptive
//! Dormand-Prince 5(4) pair. Both report the state at every point of a
//! caller-supplied output grid, landing on the grid points exactly.

#![allow(clippy::needless_range_loop)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Rk45,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Upper bound on the step; for RK4 this is the step.
    pub max_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_step: 1.0,
        }
    }
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            method: Method::Rk4,
            max_step: step,
            ..Self::default()
        }
    }

    pub fn rk45(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            method: Method::Rk45,
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = h;
        self
    }

    pub fn check(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.rel_tol) || !ok(self.abs_tol) {
            return Err(Error::InvalidInput(format!(
                "integrator tolerances must be positive (rel_tol = {}, abs_tol = {})",
                self.rel_tol, self.abs_tol
            )));
        }
        if !ok(self.max_step) {
            return Err(Error::InvalidInput(format!(
                "max_step must be positive and finite, got {}",
                self.max_step
            )));
        }
        Ok(())
    }
}

/// Right-hand side of dy/dt = f(t, y).
#[allow(clippy::len_without_is_empty)]
pub trait OdeSystem {
    fn len(&self) -> usize;
    fn rhs(&mut self, t: f64, y: &[C64], dy: &mut [C64]);
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

/// Checks that `t_grid` is non-empty and strictly increasing.
pub fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(Error::InvalidInput("time grid is empty".into()));
    }
    if t_grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("time grid contains non-finite values".into()));
    }
    if let Some(w) = t_grid.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(format!(
            "time grid must be strictly increasing ({} followed by {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// `n` equally spaced points on [0, t_max].
pub fn uniform_grid(t_max: f64, n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|k| t_max * k as f64 / (n - 1) as f64).collect()
}

/// Integrates `sys` from `y0` at `t_grid[0]` and calls `observe(k, t_k, y)`
/// at every grid point, including the first. The observer may modify the
/// state in place. `stiffness` is the fastest decay rate of the system and
/// only feeds the step-underflow diagnostic.
pub fn integrate<S, F>(
    sys: &mut S,
    y0: &[C64],
    t_grid: &[f64],
    cfg: &IntegratorConfig,
    stiffness: f64,
    mut observe: F,
) -> Result<Stats>
where
    S: OdeSystem,
    F: FnMut(usize, f64, &mut [C64]) -> Result<()>,
{
    cfg.check()?;
    check_grid(t_grid)?;
    if y0.len() != sys.len() {
        return Err(Error::Dimension {
            context: "initial state length".into(),
            expected: sys.len(),
            found: y0.len(),
        });
    }
    let mut y = y0.to_vec();
    observe(0, t_grid[0], &mut y)?;
    let mut stats = Stats::default();
    match cfg.method {
        Method::Rk4 => {
            let mut ws = Rk4Work::new(y.len());
            for k in 1..t_grid.len() {
                let (t0, t1) = (t_grid[k - 1], t_grid[k]);
                let n = ((t1 - t0) / cfg.max_step).ceil().max(1.0) as usize;
                let h = (t1 - t0) / n as f64;
                for i in 0..n {
                    ws.step(sys, t0 + i as f64 * h, h, &mut y);
                    stats.steps += 1;
                    stats.rhs_evals += 4;
                }
                observe(k, t1, &mut y)?;
            }
        }
        Method::Rk45 => {
            let mut ws = DopriWork::new(y.len());
            let mut h = cfg.max_step.min(t_grid.last().unwrap() - t_grid[0]).max(f64::MIN_POSITIVE);
            let mut fsal_valid = false;
            let mut t = t_grid[0];
            for k in 1..t_grid.len() {
                let t1 = t_grid[k];
                while t < t1 {
                    let remaining = t1 - t;
                    let last = h >= remaining;
                    let step = if last { remaining } else { h };
                    if step < 1e-14 * t.abs().max(1.0) && !last {
                        return Err(Error::StepUnderflow {
                            t,
                            step,
                            gamma_max: stiffness,
                        });
                    }
                    if !fsal_valid {
                        sys.rhs(t, &y, &mut ws.k[0]);
                        stats.rhs_evals += 1;
                    }
                    let err = ws.attempt(sys, t, step, &y, cfg);
                    stats.rhs_evals += 6;
                    if err <= 1.0 {
                        t = if last { t1 } else { t + step };
                        std::mem::swap(&mut y, &mut ws.y_new);
                        ws.k.swap(0, 6);
                        fsal_valid = true;
                        stats.steps += 1;
                        let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                        if !last || step >= h {
                            h = (step * grow).min(cfg.max_step);
                        }
                    } else {
                        stats.rejected += 1;
                        h = step * (0.9 * err.powf(-0.25)).clamp(0.1, 0.5);
                        if h < 1e-14 * t.abs().max(1.0) {
                            return Err(Error::StepUnderflow {
                                t,
                                step: h,
                                gamma_max: stiffness,
                            });
                        }
                    }
                }
                let before = y.clone();
                observe(k, t1, &mut y)?;
                if y != before {
                    fsal_valid = false;
                }
            }
        }
    }
    Ok(stats)
}

struct Rk4Work {
    k1: Vec<C64>,
    k2: Vec<C64>,
    k3: Vec<C64>,
    k4: Vec<C64>,
    tmp: Vec<C64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        let z = vec![C64::default(); n];
        Self {
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z.clone(),
            tmp: z,
        }
    }

    fn step<S: OdeSystem>(&mut self, sys: &mut S, t: f64, h: f64, y: &mut [C64]) {
        sys.rhs(t, y, &mut self.k1);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k1[i] * (0.5 * h);
        }
        sys.rhs(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k2[i] * (0.5 * h);
        }
        sys.rhs(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..y.len() {
            self.tmp[i] = y[i] + self.k3[i] * h;
        }
        sys.rhs(t + h, &self.tmp, &mut self.k4);
        for i in 0..y.len() {
            y[i] += (self.k1[i] + (self.k2[i] + self.k3[i]) * 2.0 + self.k4[i]) * (h / 6.0);
        }
    }
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// 5th order weights equal A[6]; embedded 4th order weights below.
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct DopriWork {
    k: Vec<Vec<C64>>,
    tmp: Vec<C64>,
    y_new: Vec<C64>,
}

impl DopriWork {
    fn new(n: usize) -> Self {
        Self {
            k: vec![vec![C64::default(); n]; 7],
            tmp: vec![C64::default(); n],
            y_new: vec![C64::default(); n],
        }
    }

    /// Fills `y_new` and `k[6]` (derivative at the new point) and returns the
    /// scaled error norm; `k[0]` must hold f(t, y).
    fn attempt<S: OdeSystem>(&mut self, sys: &mut S, t: f64, h: f64, y: &[C64], cfg: &IntegratorConfig) -> f64 {
        let n = y.len();
        for s in 1..7 {
            for i in 0..n {
                let mut acc = C64::default();
                for (j, a) in A[s].iter().enumerate().take(s) {
                    if *a != 0.0 {
                        acc += self.k[j][i] * *a;
                    }
                }
                self.tmp[i] = y[i] + acc * h;
            }
            if s == 6 {
                self.y_new.copy_from_slice(&self.tmp);
            }
            sys.rhs(t + C[s] * h, &self.tmp, &mut self.k[s]);
        }
        let mut err: f64 = 0.0;
        for i in 0..n {
            let mut e = C64::default();
            for s in 0..7 {
                let w = A[6].get(s).copied().unwrap_or(0.0) - B4[s];
                if w != 0.0 {
                    e += self.k[s][i] * w;
                }
            }
            let scale = cfg.abs_tol + cfg.rel_tol * y[i].norm().max(self.y_new[i].norm());
            err = err.max((e * h).norm() / scale);
        }
        err
    }
}
