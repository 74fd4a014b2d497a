//! Interacting-particle simulation of the controlled mean-field jump
//! diffusion, cost evaluation, and state-moment diagnostics.
//!
//! The mean-field argument `y` of every coefficient is the empirical mean of
//! the particle system at the current node, synchronized before any particle
//! steps. One Euler step per particle reads
//!
//! ```text
//! x_{i+1} = x_i + f(t_i, x_i, m_i, u_i) dt + sigma(t_i, x_i, m_i, u_i) dW_i
//!         + sum_{events in [t_i, t_{i+1})} g(t_i, x_i, u_i, theta)
//!         - dt * sum_k w_k g(t_i, x_i, u_i, theta_k)
//! ```
//!
//! with coefficients frozen at the left node and jump events applied at the
//! end of their interval, consistent with the left-limit state in the jump
//! integral. The last line is the compensator of the jump measure.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{ControlProcess, ModelError, ModelSpec};
use crate::stochastics::{sample_noise, NoiseBundle, RngStreams, TimeGrid};

/// Hard cap on |x| before the simulation aborts.
pub const BLOW_UP_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("state blew up at step {step}, particle {particle} (|x| > 1e12 or non-finite)")]
    BlowUp { step: usize, particle: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Control values actually applied, after clamping. Constant and piecewise
/// controls are shared by all particles; feedback laws are traced per
/// particle.
#[derive(Clone, Debug)]
pub enum ControlTrace {
    Shared(Vec<f64>),
    /// `values[j][i]`: particle `j`, interval `i`.
    PerParticle(Vec<Vec<f64>>),
}

impl ControlTrace {
    pub fn value(&self, particle: usize, step: usize) -> f64 {
        match self {
            ControlTrace::Shared(vals) => vals[step],
            ControlTrace::PerParticle(vals) => vals[particle][step],
        }
    }
}

/// Simulated particle system. States are stored node-major (`nodes[i][j]` is
/// particle `j` at node `i`) so that per-node reductions and the backward
/// solvers touch contiguous memory; `state(j, i)` provides the per-particle
/// view.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    pub grid: TimeGrid,
    pub nodes: Vec<Vec<f64>>,
    /// Empirical mean per node, the `y` argument fed to every coefficient.
    pub mean: Vec<f64>,
    /// The noise that drove this ensemble, retained so that adjoint and
    /// variational simulations can couple to the same paths.
    pub noise: Arc<NoiseBundle>,
    pub control: ControlTrace,
}

impl ParticleEnsemble {
    pub fn n_particles(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// State of particle `j` at node `i`.
    pub fn state(&self, j: usize, i: usize) -> f64 {
        self.nodes[i][j]
    }

    /// All particle states at node `i`.
    pub fn node_states(&self, i: usize) -> &[f64] {
        &self.nodes[i]
    }

    pub fn terminal_states(&self) -> &[f64] {
        &self.nodes[self.grid.n_steps()]
    }

    pub fn control_value(&self, particle: usize, step: usize) -> f64 {
        self.control.value(particle, step)
    }
}

/// Serial index-ordered mean; the deterministic reduction used everywhere a
/// cross-particle expectation is needed.
pub fn empirical_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One Euler increment for one particle (state `x`, mean `m`, control `u`).
fn euler_step(
    model: &ModelSpec,
    t: f64,
    dt: f64,
    x: f64,
    m: f64,
    u: f64,
    dw: f64,
    events: &[(u32, u32)],
) -> f64 {
    let drift = (model.drift.eval)(t, x, m, u);
    let diffusion = (model.diffusion.eval)(t, x, m, u);
    let mut next = x + drift * dt + diffusion * dw;
    if !model.jump_measure.is_empty() {
        let atoms = model.jump_measure.atoms();
        for &(_, k) in events {
            next += (model.jump.eval)(t, x, u, atoms[k as usize].0);
        }
        next -= dt * model.jump_measure.integrate(|theta| (model.jump.eval)(t, x, u, theta));
    }
    next
}

/// Simulates the particle system with freshly sampled noise.
pub fn simulate_particles(
    model: &ModelSpec,
    control: &ControlProcess,
    grid: &TimeGrid,
    n_particles: usize,
    streams: &RngStreams,
) -> Result<ParticleEnsemble, ForwardError> {
    let noise = Arc::new(sample_noise(streams, grid, &model.jump_measure, n_particles));
    simulate_with_noise(model, control, noise)
}

/// Simulates the particle system driven by an existing noise bundle. The
/// bundle fixes the grid and the particle count; reusing one bundle across
/// controls yields common-random-number coupled ensembles.
pub fn simulate_with_noise(
    model: &ModelSpec,
    control: &ControlProcess,
    noise: Arc<NoiseBundle>,
) -> Result<ParticleEnsemble, ForwardError> {
    model.validate()?;
    let grid = noise.grid;
    let n_steps = grid.n_steps();
    let n = noise.n_particles();
    control.validate_len(n_steps)?;
    let dt = grid.dt();
    let bounds = model.control_set;

    let mut nodes: Vec<Vec<f64>> = Vec::with_capacity(n_steps + 1);
    let mut mean: Vec<f64> = Vec::with_capacity(n_steps + 1);
    let mut shared_trace: Vec<f64> = Vec::new();
    let mut per_particle_trace: Vec<Vec<f64>> = Vec::new();
    let feedback = control.is_feedback();
    if feedback {
        per_particle_trace = vec![Vec::with_capacity(n_steps); n];
    } else {
        shared_trace.reserve(n_steps);
    }

    let mut current = vec![model.initial_state; n];
    for i in 0..n_steps {
        let t = grid.node(i);
        let m = empirical_mean(&current);
        mean.push(m);

        let controls: Vec<f64> = if feedback {
            let vals: Vec<f64> =
                current.par_iter().map(|&x| control.value(i, t, x, m, bounds)).collect();
            for (j, &u) in vals.iter().enumerate() {
                per_particle_trace[j].push(u);
            }
            vals
        } else {
            let u = control.value(i, t, m, m, bounds);
            shared_trace.push(u);
            Vec::new()
        };

        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|j| {
                let u = if feedback { controls[j] } else { shared_trace[i] };
                euler_step(
                    model,
                    t,
                    dt,
                    current[j],
                    m,
                    u,
                    noise.dw[j][i],
                    noise.trains[j].events_in_step(i as u32),
                )
            })
            .collect();

        for (j, &x) in next.iter().enumerate() {
            if !x.is_finite() || x.abs() > BLOW_UP_LIMIT {
                return Err(ForwardError::BlowUp { step: i, particle: j });
            }
        }
        nodes.push(current);
        current = next;
    }
    mean.push(empirical_mean(&current));
    nodes.push(current);

    let control_trace = if feedback {
        ControlTrace::PerParticle(per_particle_trace)
    } else {
        ControlTrace::Shared(shared_trace)
    };
    Ok(ParticleEnsemble { grid, nodes, mean, noise, control: control_trace })
}

/// Monte Carlo cost estimate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    /// Particle-sample standard error of the per-particle cost terms. The
    /// empirical-mean coupling makes particles weakly dependent; the O(1/N)
    /// bias of this estimate is documented, not corrected.
    pub std_error: f64,
    pub n_particles: usize,
}

/// Per-particle realized cost `h(x_T, m_T) + sum_i l(t_i, x_i, m_i, u_i) dt`.
pub fn particle_costs(model: &ModelSpec, ensemble: &ParticleEnsemble) -> Vec<f64> {
    let n_steps = ensemble.n_steps();
    let dt = ensemble.grid.dt();
    let m_terminal = ensemble.mean[n_steps];
    (0..ensemble.n_particles())
        .into_par_iter()
        .map(|j| {
            let mut running = 0.0;
            for i in 0..n_steps {
                let t = ensemble.grid.node(i);
                running += (model.running_cost.eval)(
                    t,
                    ensemble.state(j, i),
                    ensemble.mean[i],
                    ensemble.control_value(j, i),
                ) * dt;
            }
            running + (model.terminal_cost.eval)(ensemble.state(j, n_steps), m_terminal)
        })
        .collect()
}

/// Cost functional estimate over the ensemble.
pub fn evaluate_cost(model: &ModelSpec, ensemble: &ParticleEnsemble) -> CostEstimate {
    let costs = particle_costs(model, ensemble);
    let n = costs.len();
    let mean = empirical_mean(&costs);
    let std_error = if n > 1 {
        let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    CostEstimate { mean, std_error, n_particles: n }
}

/// Estimate of `E[sup_i |x_i|^q]`: the particle average of each path's
/// supremum moment. Finite by construction (the simulation aborts on
/// blow-up); tests assert stability under refinement of `N`.
pub fn check_state_moments(ensemble: &ParticleEnsemble, q: f64) -> f64 {
    let sups: Vec<f64> = (0..ensemble.n_particles())
        .into_par_iter()
        .map(|j| {
            let mut sup = 0.0f64;
            for i in 0..=ensemble.n_steps() {
                sup = sup.max(ensemble.state(j, i).abs());
            }
            sup.powf(q)
        })
        .collect();
    empirical_mean(&sups)
}
