//! RARE fixed-point iteration and a FISTA-TV baseline.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ComplexImage, KSpaceData};
use crate::operators::MeasurementOperator;
use crate::priors::{red_residual, tv_denoise, tv_value, ArtifactRemover, TvParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tau: f64,
    /// Initial step; `None` uses `1 / ||H^* H||`.
    pub gamma0: Option<f64>,
    /// Backtracking factor in `(0, 1)`.
    pub beta: f64,
    /// Step-size floor.
    pub rho: f64,
    pub max_iters: usize,
    pub accelerate: bool,
    /// Keep only the real part of each update.
    pub real_projection: bool,
    /// Power iterations for the default step.
    pub norm_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            gamma0: None,
            beta: 0.5,
            rho: 1e-6,
            max_iters: 100,
            accelerate: true,
            real_projection: false,
            norm_iters: 30,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau", "must be positive and finite"));
        }
        if let Some(g) = self.gamma0 {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::param("gamma0", "must be positive and finite"));
            }
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::param("beta", "must lie in (0, 1)"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::param("rho", "must be positive and finite"));
        }
        if self.max_iters == 0 {
            return Err(Error::param("max_iters", "must be >= 1"));
        }
        if self.gamma0.is_none() && self.norm_iters == 0 {
            return Err(Error::param("norm_iters", "must be >= 1 when gamma0 is unset"));
        }
        Ok(())
    }

    fn initial_step(&self, op: &MeasurementOperator) -> Result<f64> {
        match self.gamma0 {
            Some(g) => Ok(g),
            None => {
                let l = op.norm_estimate(self.norm_iters, 0)?;
                if l > 0.0 {
                    Ok(1.0 / l)
                } else {
                    Err(Error::ZeroEnergy)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    MaxIters,
    StepFloor,
    Converged,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::MaxIters => "max-iters",
            Termination::StepFloor => "step-floor",
            Termination::Converged => "converged",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    /// `||G(x^k)||` for RARE, gradient-mapping norm for FISTA.
    pub g_norm: f64,
    /// `||G(s^{k-1})||`, the line-search reference.
    pub g_norm_anchor: f64,
    pub gamma: f64,
    pub q: f64,
    pub objective: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct ReconReport {
    pub image: ComplexImage,
    pub trace: Vec<TraceEntry>,
    pub termination: Termination,
}

impl ReconReport {
    pub fn final_g_norm(&self) -> Option<f64> {
        self.trace.last().map(|t| t.g_norm)
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,g_norm,gamma,q,objective,wall_ms\n");
        for t in &self.trace {
            let obj = t.objective.map(|v| format!("{v:.17e}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{},{:.3}",
                t.iteration, t.g_norm, t.gamma, t.q, obj, t.wall_ms
            );
        }
        s
    }
}

/// `q_k = (1 + sqrt(1 + q_{k-1}^2)) / 2`.
pub fn nesterov_q_update(q_prev: f64) -> f64 {
    0.5 * (1.0 + (1.0 + q_prev * q_prev).sqrt())
}

/// `G(x) = H^*(Hx - y) + tau (x - R(x))`.
pub fn operator_g(
    x: &ComplexImage,
    op: &MeasurementOperator,
    y: &KSpaceData,
    r: &dyn ArtifactRemover,
    tau: f64,
) -> Result<ComplexImage> {
    let grad = op.datafid_gradient(x, y)?;
    let res = red_residual(x, r, tau)?;
    Ok(grad.add(&res))
}

fn momentum(x: &ComplexImage, x_prev: &ComplexImage, coef: f64) -> ComplexImage {
    if coef == 0.0 {
        return x.clone();
    }
    let mut s = x.clone();
    s.axpy(coef, &x.sub(x_prev));
    s
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Accelerated RARE iteration with backtracking on `||G||`.
///
/// `x0 = None` starts from `R(H^dagger y)`. When the step falls below `rho`
/// the solve stops and returns the last accepted iterate.
pub fn rare_solve(
    y: &KSpaceData,
    op: &MeasurementOperator,
    r: &dyn ArtifactRemover,
    cfg: &SolverConfig,
    x0: Option<&ComplexImage>,
) -> Result<ReconReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut x_prev = match x0 {
        Some(x) => {
            x.check_shape(op.shape())?;
            x.clone()
        }
        None => r.apply(&op.pseudoinverse(y)?)?,
    };
    if cfg.real_projection {
        x_prev.project_real();
    }
    let gamma0 = cfg.initial_step(op)?;
    let g = |x: &ComplexImage| operator_g(x, op, y, r, cfg.tau);

    let mut s = x_prev.clone();
    let mut gs = g(&s)?;
    let mut gs_norm = gs.norm();
    let mut q = 1.0;
    let mut gamma_acc = gamma0;
    let mut trace = Vec::new();
    if gs_norm == 0.0 {
        return Ok(ReconReport {
            image: x_prev,
            trace,
            termination: Termination::Converged,
        });
    }
    for k in 1..=cfg.max_iters {
        let mut gamma = gamma0.min(4.0 * gamma_acc);
        let (x, gx_norm, gx) = loop {
            let mut x = s.clone();
            x.axpy(-gamma, &gs);
            if cfg.real_projection {
                x.project_real();
            }
            if !x.is_finite() {
                return Err(Error::Diverged { iteration: k });
            }
            let gx = g(&x)?;
            let n = gx.norm();
            if n <= gs_norm {
                break (x, n, gx);
            }
            gamma *= cfg.beta;
            if gamma < cfg.rho {
                return Ok(ReconReport {
                    image: x_prev,
                    trace,
                    termination: Termination::StepFloor,
                });
            }
        };
        assert!(gx_norm <= gs_norm, "accepted step violates the line-search guard");
        gamma_acc = gamma;
        let q_next = if cfg.accelerate { nesterov_q_update(q) } else { 1.0 };
        let coef = (q - 1.0) / q_next;
        trace.push(TraceEntry {
            iteration: k,
            g_norm: gx_norm,
            g_norm_anchor: gs_norm,
            gamma,
            q: q_next,
            objective: None,
            wall_ms: elapsed_ms(start),
        });
        if coef == 0.0 {
            s = x.clone();
            gs = gx;
        } else {
            s = momentum(&x, &x_prev, coef);
            gs = g(&s)?;
        }
        gs_norm = gs.norm();
        x_prev = x;
        q = q_next;
        if gx_norm == 0.0 {
            return Ok(ReconReport {
                image: x_prev,
                trace,
                termination: Termination::Converged,
            });
        }
    }
    Ok(ReconReport {
        image: x_prev,
        trace,
        termination: Termination::MaxIters,
    })
}

/// `1/2 ||Hx - y||^2 + lambda TV(x)`.
pub fn tv_objective(x: &ComplexImage, op: &MeasurementOperator, y: &KSpaceData, p: &TvParams) -> Result<f64> {
    Ok(op.datafid_value(x, y)? + p.lambda * tv_value(x, p.axis_weights))
}

/// Accelerated proximal gradient for `1/2 ||Hx - y||^2 + lambda TV(x)`,
/// starting from `H^dagger y`, with a monotone restart: a step that raises
/// the objective is discarded and the momentum is reset.
///
/// Stops early when the relative change of an accepted iterate drops below
/// `rho`, or when a restarted plain step makes no progress.
pub fn fista_tv_solve(
    y: &KSpaceData,
    op: &MeasurementOperator,
    p: &TvParams,
    cfg: &SolverConfig,
) -> Result<ReconReport> {
    cfg.validate()?;
    p.validate()?;
    let start = Instant::now();
    let gamma = cfg.initial_step(op)?;
    let prox = TvParams {
        lambda: p.lambda * gamma,
        ..p.clone()
    };
    let mut x_prev = op.pseudoinverse(y)?;
    if cfg.real_projection {
        x_prev.project_real();
    }
    let mut obj_prev = tv_objective(&x_prev, op, y, p)?;
    let mut s = x_prev.clone();
    let mut q = 1.0;
    let mut restarted = false;
    let mut trace = Vec::new();
    for k in 1..=cfg.max_iters {
        let mut z = s.clone();
        z.axpy(-gamma, &op.datafid_gradient(&s, y)?);
        let mut x = tv_denoise(&z, &prox)?;
        if cfg.real_projection {
            x.project_real();
        }
        if !x.is_finite() {
            return Err(Error::Diverged { iteration: k });
        }
        let obj = tv_objective(&x, op, y, p)?;
        let g_norm = s.sub(&x).norm() / gamma;
        if obj > obj_prev {
            if restarted {
                trace.push(TraceEntry {
                    iteration: k,
                    g_norm,
                    g_norm_anchor: g_norm,
                    gamma,
                    q: 1.0,
                    objective: Some(obj_prev),
                    wall_ms: elapsed_ms(start),
                });
                return Ok(ReconReport {
                    image: x_prev,
                    trace,
                    termination: Termination::Converged,
                });
            }
            s = x_prev.clone();
            q = 1.0;
            restarted = true;
            trace.push(TraceEntry {
                iteration: k,
                g_norm,
                g_norm_anchor: g_norm,
                gamma,
                q,
                objective: Some(obj_prev),
                wall_ms: elapsed_ms(start),
            });
            continue;
        }
        restarted = false;
        let q_next = if cfg.accelerate { nesterov_q_update(q) } else { 1.0 };
        s = momentum(&x, &x_prev, (q - 1.0) / q_next);
        let change = x.sub(&x_prev).norm();
        let scale = x.norm();
        trace.push(TraceEntry {
            iteration: k,
            g_norm,
            g_norm_anchor: g_norm,
            gamma,
            q: q_next,
            objective: Some(obj),
            wall_ms: elapsed_ms(start),
        });
        x_prev = x;
        obj_prev = obj;
        q = q_next;
        if change <= cfg.rho * scale {
            return Ok(ReconReport {
                image: x_prev,
                trace,
                termination: Termination::Converged,
            });
        }
    }
    Ok(ReconReport {
        image: x_prev,
        trace,
        termination: Termination::MaxIters,
    })
}
