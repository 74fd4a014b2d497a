//! Spike-variation machinery: spike controls, the first- and second-order
//! variational processes, remainder tracking, perturbation-rate estimation,
//! duality checks between the variational processes and the adjoints, the
//! exponential representation of the first variation, and the
//! integration-by-parts identity for jump processes.
//!
//! Everything here runs under common random numbers: the perturbed state, the
//! variational processes and the exponential factor all consume the exact
//! Brownian increments and jump trains stored in the reference ensemble.
//! Pathwise coupling is what makes second-order (`eps^2`) effects visible
//! above Monte Carlo noise.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adjoint::{sweep_adjoints, AdjointError, AdjointTriple, SecondOrderAdjoint};
use crate::forward::{
    empirical_mean, simulate_with_noise, ControlTrace, ForwardError, ParticleEnsemble,
    BLOW_UP_LIMIT,
};
use crate::model::{ControlProcess, ModelError, ModelSpec};
use crate::stochastics::TimeGrid;

#[derive(Debug, Error)]
pub enum VariationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error("spike window [{t0}, {t0} + {eps}) does not fit inside the horizon after snapping")]
    WindowOutsideHorizon { t0: f64, eps: f64 },
    #[error("control out of bounds: spike value {value} outside [{lo}, {hi}]")]
    ControlOutOfBounds { value: f64, lo: f64, hi: f64 },
    #[error("epsilon ladder needs at least 4 points, got {len}")]
    LadderTooShort { len: usize },
    #[error("rate estimation needs at least 3 repeats, got {repeats}")]
    TooFewRepeats { repeats: usize },
    #[error("duality order must be 1 or 2, got {0}")]
    BadOrder(usize),
    #[error("spike does not match the one stored in the bundle")]
    SpikeMismatch,
    #[error("exponential factor left the guard range at particle {particle}, node {node}")]
    ExponentialOverflow { particle: usize, node: usize },
}

/// A spike perturbation request: replace the control by `u_spike` on
/// `[t0, t0 + eps)`. Times are snapped to the grid before use.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SpikeSpec {
    pub t0: f64,
    pub eps: f64,
    pub u_spike: f64,
}

/// The snapped window: `len` whole grid intervals starting at interval
/// `start`, so the realized perturbation has measure exactly `len * dt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SpikeWindow {
    pub start: usize,
    pub len: usize,
}

impl SpikeWindow {
    pub fn contains_interval(&self, i: usize) -> bool {
        self.start <= i && i < self.start + self.len
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    /// Realized window measure.
    pub fn eps(&self, grid: &TimeGrid) -> f64 {
        self.len as f64 * grid.dt()
    }
}

impl SpikeSpec {
    /// Snaps the window onto whole grid intervals: the start time to the
    /// nearest node, the length to the nearest positive interval count.
    pub fn snap(&self, grid: &TimeGrid) -> Result<SpikeWindow, VariationError> {
        let start = grid.nearest_node(self.t0);
        let len = ((self.eps / grid.dt()).round() as usize).max(1);
        if start + len > grid.n_steps() {
            return Err(VariationError::WindowOutsideHorizon { t0: self.t0, eps: self.eps });
        }
        Ok(SpikeWindow { start, len })
    }
}

/// Builds the piecewise control equal to `u_spike` on the snapped window and
/// to the baseline control elsewhere. Feedback baselines are rejected: a
/// spike of a feedback law has no single per-interval value.
pub fn spike_control(
    u_star: &ControlProcess,
    spike: &SpikeSpec,
    grid: &TimeGrid,
    model: &ModelSpec,
) -> Result<ControlProcess, VariationError> {
    if u_star.is_feedback() {
        return Err(VariationError::Model(ModelError::FeedbackSpike));
    }
    if !model.control_set.contains(spike.u_spike) {
        return Err(VariationError::ControlOutOfBounds {
            value: spike.u_spike,
            lo: model.control_set.lo,
            hi: model.control_set.hi,
        });
    }
    let window = spike.snap(grid)?;
    let values: Vec<f64> = (0..grid.n_steps())
        .map(|i| {
            if window.contains_interval(i) {
                spike.u_spike
            } else {
                u_star.value(i, grid.node(i), 0.0, 0.0, model.control_set)
            }
        })
        .collect();
    Ok(ControlProcess::Piecewise(values))
}

/// Which variational order a linearized simulation computes.
enum VariationOrder<'a> {
    First,
    Second { x1: &'a ParticleEnsemble, source_times_x1: bool },
}

/// Euler scheme for the linearized processes. Both orders share the same
/// linear part (coefficient derivatives frozen along the reference paths,
/// mean coupling through the process's own empirical mean) and differ in the
/// window sources: the first order gets the raw coefficient differences, the
/// second order gets the control-differences of the state derivatives
/// (optionally multiplied by the first variation) plus the half-curvature
/// terms in the first variation squared.
fn simulate_linearized(
    model: &ModelSpec,
    star: &ParticleEnsemble,
    window: SpikeWindow,
    u_spike: f64,
    order: VariationOrder,
) -> Result<ParticleEnsemble, VariationError> {
    let grid = star.grid;
    let n = star.n_particles();
    let n_steps = star.n_steps();
    let dt = grid.dt();
    let atoms = model.jump_measure.atoms();

    let mut nodes: Vec<Vec<f64>> = Vec::with_capacity(n_steps + 1);
    let mut mean = Vec::with_capacity(n_steps + 1);
    nodes.push(vec![0.0; n]);

    for i in 0..n_steps {
        let current = &nodes[i];
        mean.push(empirical_mean(current));
        let mv = mean[i];
        let t = grid.node(i);
        let in_window = window.contains_interval(i);
        let ms = star.mean[i];

        let next: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|j| {
                let v = current[j];
                let xs = star.state(j, i);
                let us = star.control_value(j, i);
                let dw = star.noise.dw[j][i];

                let fx = (model.drift.dx)(t, xs, ms, us);
                let fy = (model.drift.dy)(t, xs, ms, us);
                let sx = (model.diffusion.dx)(t, xs, ms, us);
                let sy = (model.diffusion.dy)(t, xs, ms, us);

                let (drift_src, diff_src) = if in_window {
                    match &order {
                        VariationOrder::First => (
                            (model.drift.eval)(t, xs, ms, u_spike)
                                - (model.drift.eval)(t, xs, ms, us),
                            (model.diffusion.eval)(t, xs, ms, u_spike)
                                - (model.diffusion.eval)(t, xs, ms, us),
                        ),
                        VariationOrder::Second { x1, source_times_x1 } => {
                            let s1 = if *source_times_x1 { x1.state(j, i) } else { 1.0 };
                            (
                                ((model.drift.dx)(t, xs, ms, u_spike) - fx) * s1,
                                ((model.diffusion.dx)(t, xs, ms, u_spike) - sx) * s1,
                            )
                        }
                    }
                } else {
                    (0.0, 0.0)
                };
                let (curv_drift, curv_diff) = match &order {
                    VariationOrder::First => (0.0, 0.0),
                    VariationOrder::Second { x1, .. } => {
                        let sq = x1.state(j, i).powi(2);
                        (
                            0.5 * (model.drift.dxx)(t, xs, ms, us) * sq,
                            0.5 * (model.diffusion.dxx)(t, xs, ms, us) * sq,
                        )
                    }
                };

                let drift_part = fx * v + fy * mv + curv_drift + drift_src;
                let diff_part = sx * v + sy * mv + curv_diff + diff_src;

                let jump_value = |theta: f64| -> f64 {
                    let gx = (model.jump.dx)(t, xs, us, theta);
                    match &order {
                        VariationOrder::First => {
                            let src = if in_window {
                                (model.jump.eval)(t, xs, u_spike, theta)
                                    - (model.jump.eval)(t, xs, us, theta)
                            } else {
                                0.0
                            };
                            gx * v + src
                        }
                        VariationOrder::Second { x1, source_times_x1 } => {
                            let curv =
                                0.5 * (model.jump.dxx)(t, xs, us, theta) * x1.state(j, i).powi(2);
                            let src = if in_window {
                                let s1 = if *source_times_x1 { x1.state(j, i) } else { 1.0 };
                                ((model.jump.dx)(t, xs, u_spike, theta) - gx) * s1
                            } else {
                                0.0
                            };
                            gx * v + curv + src
                        }
                    }
                };

                let mut jump_part = 0.0;
                if !atoms.is_empty() {
                    for &(_, k) in star.noise.trains[j].events_in_step(i as u32) {
                        jump_part += jump_value(atoms[k as usize].0);
                    }
                    for &(theta, w) in atoms {
                        jump_part -= dt * w * jump_value(theta);
                    }
                }

                v + drift_part * dt + diff_part * dw + jump_part
            })
            .collect();

        for (j, v) in next.iter().enumerate() {
            if !v.is_finite() || v.abs() > BLOW_UP_LIMIT {
                return Err(VariationError::Forward(ForwardError::BlowUp {
                    step: i,
                    particle: j,
                }));
            }
        }
        nodes.push(next);
    }
    mean.push(empirical_mean(&nodes[n_steps]));

    Ok(ParticleEnsemble {
        grid,
        nodes,
        mean,
        noise: star.noise.clone(),
        control: star.control.clone(),
    })
}

/// Simulates the first-order variational process along the reference
/// ensemble, reusing its stored noise (pathwise coupling).
pub fn simulate_first_variation(
    model: &ModelSpec,
    star: &ParticleEnsemble,
    spike: &SpikeSpec,
) -> Result<ParticleEnsemble, VariationError> {
    let window = spike.snap(&star.grid)?;
    if !model.control_set.contains(spike.u_spike) {
        return Err(VariationError::ControlOutOfBounds {
            value: spike.u_spike,
            lo: model.control_set.lo,
            hi: model.control_set.hi,
        });
    }
    simulate_linearized(model, star, window, spike.u_spike, VariationOrder::First)
}

/// Simulates the second-order variational process. `source_times_x1` selects
/// whether the window sources are the state-derivative differences times the
/// first variation (the pairing the second duality relation uses; default in
/// the bundle constructor) or the bare differences.
pub fn simulate_second_variation(
    model: &ModelSpec,
    star: &ParticleEnsemble,
    x1: &ParticleEnsemble,
    spike: &SpikeSpec,
    source_times_x1: bool,
) -> Result<ParticleEnsemble, VariationError> {
    let window = spike.snap(&star.grid)?;
    simulate_linearized(
        model,
        star,
        window,
        spike.u_spike,
        VariationOrder::Second { x1, source_times_x1 },
    )
}

/// The coupled quadruple of processes for one spike, plus the second-order
/// remainder computed exactly as the stored difference.
pub struct VariationBundle {
    pub star: ParticleEnsemble,
    pub spiked: ParticleEnsemble,
    pub x1: ParticleEnsemble,
    pub x2: ParticleEnsemble,
    /// `lambda[i][j] = spiked - star - x1 - x2` at node `i`, particle `j`.
    pub lambda: Vec<Vec<f64>>,
    pub window: SpikeWindow,
    pub u_spike: f64,
    pub source_times_x1: bool,
}

impl VariationBundle {
    pub fn n_particles(&self) -> usize {
        self.star.n_particles()
    }

    pub fn n_steps(&self) -> usize {
        self.star.n_steps()
    }
}

/// Simulates the full bundle with the default window-source convention.
pub fn simulate_variation_bundle(
    model: &ModelSpec,
    star: ParticleEnsemble,
    spike: &SpikeSpec,
) -> Result<VariationBundle, VariationError> {
    simulate_variation_bundle_with_sources(model, star, spike, true)
}

/// As `simulate_variation_bundle` with the window-source convention
/// switchable.
pub fn simulate_variation_bundle_with_sources(
    model: &ModelSpec,
    star: ParticleEnsemble,
    spike: &SpikeSpec,
    source_times_x1: bool,
) -> Result<VariationBundle, VariationError> {
    let window = spike.snap(&star.grid)?;
    let perturbed = spike_control(&star_control(&star), spike, &star.grid, model)?;
    let spiked = simulate_with_noise(model, &perturbed, star.noise.clone())?;
    let x1 = simulate_first_variation(model, &star, spike)?;
    let x2 = simulate_second_variation(model, &star, &x1, spike, source_times_x1)?;

    let lambda: Vec<Vec<f64>> = (0..=star.n_steps())
        .map(|i| {
            (0..star.n_particles())
                .map(|j| spiked.state(j, i) - star.state(j, i) - x1.state(j, i) - x2.state(j, i))
                .collect()
        })
        .collect();

    Ok(VariationBundle {
        star,
        spiked,
        x1,
        x2,
        lambda,
        window,
        u_spike: spike.u_spike,
        source_times_x1,
    })
}

/// Reconstructs a per-interval control process from the shared trace of an
/// ensemble (spiking a feedback trace is rejected upstream).
fn star_control(star: &ParticleEnsemble) -> ControlProcess {
    match &star.control {
        ControlTrace::Shared(values) => ControlProcess::Piecewise(values.clone()),
        ControlTrace::PerParticle(_) => ControlProcess::Feedback(std::sync::Arc::new(
            |_, _, _| f64::NAN, // rejected by spike_control with the feedback error
        )),
    }
}

/// Two empirical sides of an identity and their disagreement.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResidualReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// `max(|lhs|, |rhs|, 1e-12)`.
    pub scale: f64,
    pub relative: f64,
}

impl ResidualReport {
    fn new(lhs: f64, rhs: f64) -> Self {
        let residual = (lhs - rhs).abs();
        let scale = lhs.abs().max(rhs.abs()).max(1e-12);
        Self { lhs, rhs, residual, scale, relative: residual / scale }
    }
}

/// Trapezoid average of a variational quantity over one interval. Adjoint
/// values and frozen coefficients stay at the left node; averaging the
/// variational factor kills the half-interval mismatch that otherwise leaves
/// an O(eps dt) error in the closed-form window oracles.
fn trap(a: f64, b: f64) -> f64 {
    0.5 * (a + b)
}

/// First-order duality accumulator: pairs the terminal product
/// `E[Psi(T) x1(T)]` against the running-cost pairing (entering with a plus
/// sign, since the adjoint driver carries the running-cost gradient
/// negatively), the window sources paired with the adjoint, and the
/// jump-source pairing. Fed backward from the terminal node so that
/// streaming and materialized solves produce bit-identical sums.
struct Order1Acc<'a> {
    model: &'a ModelSpec,
    bundle: &'a VariationBundle,
    next_psi: Vec<f64>,
    lhs: f64,
    rhs: f64,
}

impl<'a> Order1Acc<'a> {
    fn new(model: &'a ModelSpec, bundle: &'a VariationBundle) -> Self {
        Self { model, bundle, next_psi: Vec::new(), lhs: 0.0, rhs: 0.0 }
    }

    fn node(&mut self, i: usize, psi: &[f64], k: &[f64], gamma: &[f64]) {
        let b = self.bundle;
        let n = b.n_particles();
        let n_steps = b.n_steps();
        if i == n_steps {
            self.lhs = empirical_mean(
                &(0..n).map(|j| psi[j] * b.x1.state(j, i)).collect::<Vec<f64>>(),
            );
            self.next_psi = psi.to_vec();
            return;
        }
        let model = self.model;
        let t = b.star.grid.node(i);
        let dt = b.star.grid.dt();
        let ms = b.star.mean[i];
        let in_window = b.window.contains_interval(i);
        let atoms = model.jump_measure.atoms();
        let n_atoms = atoms.len();

        let mean_ly = empirical_mean(
            &(0..n)
                .map(|j| {
                    (model.running_cost.dy)(t, b.star.state(j, i), ms, b.star.control_value(j, i))
                })
                .collect::<Vec<f64>>(),
        );

        let mut sum = 0.0;
        for j in 0..n {
            let xs = b.star.state(j, i);
            let us = b.star.control_value(j, i);
            let v1 = trap(b.x1.state(j, i), b.x1.state(j, i + 1));
            let mut term = v1 * ((model.running_cost.dx)(t, xs, ms, us) + mean_ly);
            if in_window {
                let psi_bar = trap(psi[j], self.next_psi[j]);
                let df = (model.drift.eval)(t, xs, ms, b.u_spike)
                    - (model.drift.eval)(t, xs, ms, us);
                let dsig = (model.diffusion.eval)(t, xs, ms, b.u_spike)
                    - (model.diffusion.eval)(t, xs, ms, us);
                term += psi_bar * df + k[j] * dsig;
                for (a, &(theta, w)) in atoms.iter().enumerate() {
                    let dg = (model.jump.eval)(t, xs, b.u_spike, theta)
                        - (model.jump.eval)(t, xs, us, theta);
                    term += w * gamma[j * n_atoms + a] * dg;
                }
            }
            sum += term;
        }
        self.rhs += dt * sum / n as f64;
        self.next_psi.copy_from_slice(psi);
    }

    fn finish(self) -> ResidualReport {
        ResidualReport::new(self.lhs, self.rhs)
    }
}

/// Second-order duality accumulator: `E[Psi(T) x2(T)]` against the
/// running-cost pairing in `x2` plus the pairing of the second variation's
/// own sources (window sources exactly as simulated, plus the
/// half-curvature terms in the first variation squared).
struct Order2Acc<'a> {
    model: &'a ModelSpec,
    bundle: &'a VariationBundle,
    next_psi: Vec<f64>,
    lhs: f64,
    rhs: f64,
}

impl<'a> Order2Acc<'a> {
    fn new(model: &'a ModelSpec, bundle: &'a VariationBundle) -> Self {
        Self { model, bundle, next_psi: Vec::new(), lhs: 0.0, rhs: 0.0 }
    }

    fn node(&mut self, i: usize, psi: &[f64], k: &[f64], gamma: &[f64]) {
        let b = self.bundle;
        let n = b.n_particles();
        let n_steps = b.n_steps();
        if i == n_steps {
            self.lhs = empirical_mean(
                &(0..n).map(|j| psi[j] * b.x2.state(j, i)).collect::<Vec<f64>>(),
            );
            self.next_psi = psi.to_vec();
            return;
        }
        let model = self.model;
        let t = b.star.grid.node(i);
        let dt = b.star.grid.dt();
        let ms = b.star.mean[i];
        let in_window = b.window.contains_interval(i);
        let atoms = model.jump_measure.atoms();
        let n_atoms = atoms.len();

        let mean_ly = empirical_mean(
            &(0..n)
                .map(|j| {
                    (model.running_cost.dy)(t, b.star.state(j, i), ms, b.star.control_value(j, i))
                })
                .collect::<Vec<f64>>(),
        );

        let mut sum = 0.0;
        for j in 0..n {
            let xs = b.star.state(j, i);
            let us = b.star.control_value(j, i);
            let psi_bar = trap(psi[j], self.next_psi[j]);
            let v2 = trap(b.x2.state(j, i), b.x2.state(j, i + 1));
            let x1_left = b.x1.state(j, i);
            let sq1 = x1_left * x1_left;

            let mut term = v2 * ((model.running_cost.dx)(t, xs, ms, us) + mean_ly);
            // Curvature terms, everywhere on the horizon.
            term += psi_bar * 0.5 * (model.drift.dxx)(t, xs, ms, us) * sq1
                + k[j] * 0.5 * (model.diffusion.dxx)(t, xs, ms, us) * sq1;
            for (a, &(theta, w)) in atoms.iter().enumerate() {
                term += w
                    * gamma[j * n_atoms + a]
                    * 0.5
                    * (model.jump.dxx)(t, xs, us, theta)
                    * sq1;
            }
            if in_window {
                let s1 = if b.source_times_x1 { x1_left } else { 1.0 };
                let dfx = (model.drift.dx)(t, xs, ms, b.u_spike)
                    - (model.drift.dx)(t, xs, ms, us);
                let dsx = (model.diffusion.dx)(t, xs, ms, b.u_spike)
                    - (model.diffusion.dx)(t, xs, ms, us);
                term += psi_bar * dfx * s1 + k[j] * dsx * s1;
                for (a, &(theta, w)) in atoms.iter().enumerate() {
                    let dgx = (model.jump.dx)(t, xs, b.u_spike, theta)
                        - (model.jump.dx)(t, xs, us, theta);
                    term += w * gamma[j * n_atoms + a] * dgx * s1;
                }
            }
            sum += term;
        }
        self.rhs += dt * sum / n as f64;
        self.next_psi.copy_from_slice(psi);
    }

    fn finish(self) -> ResidualReport {
        ResidualReport::new(self.lhs, self.rhs)
    }
}

/// Terminal-quadratic duality accumulator:
/// `E[h_xx(x*(T), m(T)) x1(T)^2]` against the time integral produced by
/// expanding `d(Q x1^2)`: the Hamiltonian-curvature term in `x1^2`, the
/// mean-coupling quadratic in `E(x1)`, the window quadratics in the
/// coefficient differences, and the mixed linear terms.
struct TerminalAcc<'a> {
    model: &'a ModelSpec,
    bundle: &'a VariationBundle,
    lhs: f64,
    rhs: f64,
}

impl<'a> TerminalAcc<'a> {
    fn new(model: &'a ModelSpec, bundle: &'a VariationBundle) -> Self {
        Self { model, bundle, lhs: 0.0, rhs: 0.0 }
    }

    #[allow(clippy::too_many_arguments)]
    fn node(
        &mut self,
        i: usize,
        psi: &[f64],
        k: &[f64],
        gamma: &[f64],
        q: &[f64],
        r: &[f64],
        big_gamma: &[f64],
    ) {
        let b = self.bundle;
        let n = b.n_particles();
        let n_steps = b.n_steps();
        if i == n_steps {
            let m_end = b.star.mean[i];
            self.lhs = empirical_mean(
                &(0..n)
                    .map(|j| {
                        (self.model.terminal_cost.dxx)(b.star.state(j, i), m_end)
                            * b.x1.state(j, i).powi(2)
                    })
                    .collect::<Vec<f64>>(),
            );
            return;
        }
        let model = self.model;
        let t = b.star.grid.node(i);
        let dt = b.star.grid.dt();
        let ms = b.star.mean[i];
        let in_window = b.window.contains_interval(i);
        let atoms = model.jump_measure.atoms();
        let n_atoms = atoms.len();

        let me_l = b.x1.mean[i];
        let me_r = b.x1.mean[i + 1];
        let me = trap(me_l, me_r);
        let msq = trap(me_l * me_l, me_r * me_r);

        let mut sum = 0.0;
        for j in 0..n {
            let xs = b.star.state(j, i);
            let us = b.star.control_value(j, i);
            let x1l = b.x1.state(j, i);
            let x1r = b.x1.state(j, i + 1);
            let v1 = trap(x1l, x1r);
            let sq1 = trap(x1l * x1l, x1r * x1r);
            let xe = trap(x1l * me_l, x1r * me_r);

            let fy = (model.drift.dy)(t, xs, ms, us);
            let sx = (model.diffusion.dx)(t, xs, ms, us);
            let sy = (model.diffusion.dy)(t, xs, ms, us);
            let qj = q[j];
            let rj = r[j];

            let mut hxx = (model.drift.dxx)(t, xs, ms, us) * psi[j]
                + (model.diffusion.dxx)(t, xs, ms, us) * k[j]
                - (model.running_cost.dxx)(t, xs, ms, us);
            for (a, &(theta, w)) in atoms.iter().enumerate() {
                hxx += w * (model.jump.dxx)(t, xs, us, theta) * gamma[j * n_atoms + a];
            }

            let mut term = -hxx * sq1 + qj * sy * sy * msq
                + 2.0 * xe * (qj * fy + qj * sx * sy + rj * sy);

            if in_window {
                let df =
                    (model.drift.eval)(t, xs, ms, b.u_spike) - (model.drift.eval)(t, xs, ms, us);
                let dsig = (model.diffusion.eval)(t, xs, ms, b.u_spike)
                    - (model.diffusion.eval)(t, xs, ms, us);
                let mut quad_jump = 0.0;
                let mut lin_jump = 0.0;
                for (a, &(theta, w)) in atoms.iter().enumerate() {
                    let dg = (model.jump.eval)(t, xs, b.u_spike, theta)
                        - (model.jump.eval)(t, xs, us, theta);
                    let gx = (model.jump.dx)(t, xs, us, theta);
                    let gam2 = big_gamma[j * n_atoms + a];
                    quad_jump += w * (qj * dg * dg + gam2 * dg * dg);
                    lin_jump += w * (qj * gx * dg + gam2 * (1.0 + gx) * dg);
                }
                term += qj * dsig * dsig + quad_jump
                    + 2.0 * v1 * (qj * df + (qj * sx + rj) * dsig + lin_jump)
                    + 2.0 * qj * sy * dsig * me;
            }
            sum += term;
        }
        self.rhs -= dt * sum / n as f64;
    }

    fn finish(self) -> ResidualReport {
        ResidualReport::new(self.lhs, self.rhs)
    }
}

fn validate_spike(bundle: &VariationBundle, spike: &SpikeSpec) -> Result<(), VariationError> {
    let window = spike.snap(&bundle.star.grid)?;
    if window != bundle.window || spike.u_spike != bundle.u_spike {
        return Err(VariationError::SpikeMismatch);
    }
    Ok(())
}

/// Verifies the duality relation pairing the terminal product of the first
/// adjoint with the chosen variational order against its time-integral form.
pub fn check_duality(
    order: usize,
    model: &ModelSpec,
    bundle: &VariationBundle,
    adj1: &AdjointTriple,
    spike: &SpikeSpec,
) -> Result<ResidualReport, VariationError> {
    validate_spike(bundle, spike)?;
    let n_steps = bundle.n_steps();
    match order {
        1 => {
            let mut acc = Order1Acc::new(model, bundle);
            for i in (0..=n_steps).rev() {
                acc.node(i, &adj1.psi[i], &adj1.k[i], &adj1.gamma[i]);
            }
            Ok(acc.finish())
        }
        2 => {
            let mut acc = Order2Acc::new(model, bundle);
            for i in (0..=n_steps).rev() {
                acc.node(i, &adj1.psi[i], &adj1.k[i], &adj1.gamma[i]);
            }
            Ok(acc.finish())
        }
        other => Err(VariationError::BadOrder(other)),
    }
}

/// Verifies the terminal-quadratic duality relation, which needs both
/// adjoints.
pub fn check_second_duality(
    model: &ModelSpec,
    bundle: &VariationBundle,
    adj1: &AdjointTriple,
    adj2: &SecondOrderAdjoint,
    spike: &SpikeSpec,
) -> Result<ResidualReport, VariationError> {
    validate_spike(bundle, spike)?;
    let mut acc = TerminalAcc::new(model, bundle);
    for i in (0..=bundle.n_steps()).rev() {
        acc.node(
            i,
            &adj1.psi[i],
            &adj1.k[i],
            &adj1.gamma[i],
            &adj2.q[i],
            &adj2.r[i],
            &adj2.big_gamma[i],
        );
    }
    Ok(acc.finish())
}

/// All three duality residuals for one bundle.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DualitySuite {
    pub order1: ResidualReport,
    pub order2: ResidualReport,
    pub terminal_quadratic: ResidualReport,
}

/// Computes all three duality residuals in one backward regression sweep
/// without materializing the adjoint arrays — the memory-bounded path for
/// refined grids. Bit-identical to running the materialized checks.
pub fn check_duality_suite(
    model: &ModelSpec,
    bundle: &VariationBundle,
) -> Result<DualitySuite, VariationError> {
    let mut o1 = Order1Acc::new(model, bundle);
    let mut o2 = Order2Acc::new(model, bundle);
    let mut term = TerminalAcc::new(model, bundle);
    sweep_adjoints(model, &bundle.star, |view| {
        o1.node(view.node, view.psi, view.k, view.gamma);
        o2.node(view.node, view.psi, view.k, view.gamma);
        term.node(view.node, view.psi, view.k, view.gamma, view.q, view.r, view.big_gamma);
    })?;
    Ok(DualitySuite {
        order1: o1.finish(),
        order2: o2.finish(),
        terminal_quadratic: term.finish(),
    })
}

/// Sup-over-nodes of the mean absolute gap between the directly simulated
/// first variation and its exponential-factor representation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DeviationReport {
    pub sup_mean_abs: f64,
    pub worst_node: usize,
}

const EXPONENT_GUARD: f64 = 50.0;

/// Reconstructs the first variation through the exponential factor: the
/// factor solves its own linear jump SDE under the shared noise, and the
/// variation is the factor times accumulated source integrals (drift,
/// Brownian, jump) discounted by the factor's reciprocal. Returns the
/// sup-node mean absolute deviation from the directly simulated process.
pub fn check_exponential_representation(
    model: &ModelSpec,
    bundle: &VariationBundle,
    spike: &SpikeSpec,
) -> Result<DeviationReport, VariationError> {
    validate_spike(bundle, spike)?;
    let b = bundle;
    let star = &b.star;
    let grid = star.grid;
    let n = star.n_particles();
    let n_steps = star.n_steps();
    let dt = grid.dt();
    let atoms = model.jump_measure.atoms();

    let paths: Result<Vec<Vec<f64>>, VariationError> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut eta = 1.0f64;
            let mut drift_acc = 0.0f64;
            let mut brownian_acc = 0.0f64;
            let mut jump_acc = 0.0f64;
            let mut devs = Vec::with_capacity(n_steps + 1);
            devs.push(b.x1.state(j, 0).abs());
            for i in 0..n_steps {
                let t = grid.node(i);
                let xs = star.state(j, i);
                let ms = star.mean[i];
                let us = star.control_value(j, i);
                let dw = star.noise.dw[j][i];
                let in_window = b.window.contains_interval(i);
                let me1 = b.x1.mean[i];

                let fx = (model.drift.dx)(t, xs, ms, us);
                let fy = (model.drift.dy)(t, xs, ms, us);
                let sx = (model.diffusion.dx)(t, xs, ms, us);
                let sy = (model.diffusion.dy)(t, xs, ms, us);
                let (df, dsig) = if in_window {
                    (
                        (model.drift.eval)(t, xs, ms, b.u_spike)
                            - (model.drift.eval)(t, xs, ms, us),
                        (model.diffusion.eval)(t, xs, ms, b.u_spike)
                            - (model.diffusion.eval)(t, xs, ms, us),
                    )
                } else {
                    (0.0, 0.0)
                };

                let mut gx_mass = 0.0;
                let mut gx2_mass = 0.0;
                let mut gx_dg_mass = 0.0;
                let mut dg_mass = 0.0;
                let mut gx_events = 0.0;
                let mut dg_events = 0.0;
                if !atoms.is_empty() {
                    for &(theta, w) in atoms {
                        let gx = (model.jump.dx)(t, xs, us, theta);
                        gx_mass += w * gx;
                        gx2_mass += w * gx * gx;
                        if in_window {
                            let dg = (model.jump.eval)(t, xs, b.u_spike, theta)
                                - (model.jump.eval)(t, xs, us, theta);
                            gx_dg_mass += w * gx * dg;
                            dg_mass += w * dg;
                        }
                    }
                    for &(_, k) in star.noise.trains[j].events_in_step(i as u32) {
                        let theta = atoms[k as usize].0;
                        gx_events += (model.jump.dx)(t, xs, us, theta);
                        if in_window {
                            dg_events += (model.jump.eval)(t, xs, b.u_spike, theta)
                                - (model.jump.eval)(t, xs, us, theta);
                        }
                    }
                }

                let diff_source = sy * me1 + dsig;
                drift_acc += eta * (fy * me1 + df - sx * diff_source - gx_dg_mass) * dt;
                brownian_acc += eta * diff_source * dw;
                jump_acc += eta * (dg_events - dt * dg_mass);

                eta -= eta
                    * ((fx - sx * sx - gx2_mass) * dt
                        + sx * dw
                        + (gx_events - dt * gx_mass));
                if !(eta.is_finite()) || eta <= 0.0 || eta.ln().abs() > EXPONENT_GUARD {
                    return Err(VariationError::ExponentialOverflow { particle: j, node: i + 1 });
                }
                let rhs = (drift_acc + brownian_acc + jump_acc) / eta;
                devs.push((rhs - b.x1.state(j, i + 1)).abs());
            }
            Ok(devs)
        })
        .collect();
    let paths = paths?;

    let mut sup = 0.0f64;
    let mut worst = 0;
    for i in 0..=n_steps {
        let mean_abs = empirical_mean(&paths.iter().map(|p| p[i]).collect::<Vec<f64>>());
        if mean_abs > sup {
            sup = mean_abs;
            worst = i;
        }
    }
    Ok(DeviationReport { sup_mean_abs: sup, worst_node: worst })
}

/// Verifies the product identity for two jump processes that share the same
/// noise and start at zero: the terminal product mean against the sum of the
/// two cross integrals (exact pathwise sums over increments), the Brownian
/// covariation quadrature, and the jump covariation compensator. For
/// processes with nonzero initial states the identity would pick up the
/// initial product.
pub fn check_integration_by_parts(
    ens_a: &ParticleEnsemble,
    ens_b: &ParticleEnsemble,
    model_a: &ModelSpec,
    model_b: &ModelSpec,
) -> ResidualReport {
    let n = ens_a.n_particles();
    let n_steps = ens_a.n_steps();
    let grid = ens_a.grid;
    let dt = grid.dt();

    let per_particle: Vec<f64> = (0..n)
        .map(|j| {
            let mut rhs = 0.0;
            for i in 0..n_steps {
                let a = ens_a.state(j, i);
                let b = ens_b.state(j, i);
                let da = ens_a.state(j, i + 1) - a;
                let db = ens_b.state(j, i + 1) - b;
                let t = grid.node(i);
                let sa = (model_a.diffusion.eval)(
                    t,
                    a,
                    ens_a.mean[i],
                    ens_a.control_value(j, i),
                );
                let sb = (model_b.diffusion.eval)(
                    t,
                    b,
                    ens_b.mean[i],
                    ens_b.control_value(j, i),
                );
                let mut jump_cov = 0.0;
                for &(theta, w) in model_a.jump_measure.atoms() {
                    jump_cov += w
                        * (model_a.jump.eval)(t, a, ens_a.control_value(j, i), theta)
                        * (model_b.jump.eval)(t, b, ens_b.control_value(j, i), theta);
                }
                rhs += a * db + b * da + sa * sb * dt + jump_cov * dt;
            }
            rhs
        })
        .collect();

    let lhs = empirical_mean(
        &(0..n)
            .map(|j| ens_a.state(j, n_steps) * ens_b.state(j, n_steps))
            .collect::<Vec<f64>>(),
    );
    ResidualReport::new(lhs, empirical_mean(&per_particle))
}

/// A spike family: fixed start and spike value, window length swept over a
/// ladder.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SpikeFamily {
    pub t0: f64,
    pub u_spike: f64,
}

/// One estimated perturbation-rate row.
#[derive(Clone, Debug, Serialize)]
pub struct RateRow {
    pub quantity: &'static str,
    /// Internal tag for the rate family (R1..R6), echoed into reports.
    pub eq_tag: &'static str,
    pub k: usize,
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub n_seeds: usize,
    pub degenerate: bool,
}

/// Log-log perturbation-rate estimates across an epsilon ladder.
#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Ladder after grid snapping.
    pub eps_values: Vec<f64>,
    pub n_particles: usize,
    pub n_steps: usize,
}

const RATE_QUANTITIES: [(&str, &str); 6] = [
    ("first_variation_sup_moment", "R1"),
    ("first_variation_mean_sup_sq", "R2"),
    ("second_variation_sup_moment", "R3"),
    ("state_perturbation_sup_moment", "R4"),
    ("first_order_remainder_sup_moment", "R5"),
    ("second_order_remainder_sup_moment", "R6"),
];

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Per-bundle rate quantities: each is a mean (or sup of a mean) of
/// sup-over-nodes path functionals raised to `2k` (the mean-curve quantity is
/// always squared).
fn rate_quantities(bundle: &VariationBundle, k: usize) -> [f64; 6] {
    let n = bundle.n_particles();
    let n_steps = bundle.n_steps();
    let p = 2 * k as i32;
    let sup_path = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        (0..n)
            .map(|j| (0..=n_steps).map(|i| f(j, i).abs()).fold(0.0f64, f64::max))
            .collect()
    };
    let moment = |sups: &[f64]| -> f64 {
        empirical_mean(&sups.iter().map(|s| s.powi(p)).collect::<Vec<f64>>())
    };

    let x1_sup = sup_path(&|j, i| bundle.x1.state(j, i));
    let x2_sup = sup_path(&|j, i| bundle.x2.state(j, i));
    let pert_sup = sup_path(&|j, i| bundle.spiked.state(j, i) - bundle.star.state(j, i));
    let rem1_sup = sup_path(&|j, i| {
        bundle.spiked.state(j, i) - bundle.star.state(j, i) - bundle.x1.state(j, i)
    });
    let rem2_sup = sup_path(&|j, i| bundle.lambda[i][j]);
    let mean_sup_sq = (0..=n_steps)
        .map(|i| bundle.x1.mean[i] * bundle.x1.mean[i])
        .fold(0.0f64, f64::max);

    [
        moment(&x1_sup),
        mean_sup_sq,
        moment(&x2_sup),
        moment(&pert_sup),
        moment(&rem1_sup),
        moment(&rem2_sup),
    ]
}

/// Estimates log-log slopes of the six perturbation-rate quantities over an
/// epsilon ladder, repeated over independent seeds; default window-source
/// convention.
#[allow(clippy::too_many_arguments)]
pub fn estimate_rates(
    model: &ModelSpec,
    u_star: &ControlProcess,
    family: &SpikeFamily,
    eps_ladder: &[f64],
    k: usize,
    n_particles: usize,
    n_steps: usize,
    repeats: usize,
    master_seed: u64,
) -> Result<RateReport, VariationError> {
    estimate_rates_with_sources(
        model,
        u_star,
        family,
        eps_ladder,
        k,
        n_particles,
        n_steps,
        repeats,
        master_seed,
        true,
    )
}

/// As `estimate_rates` with the window-source convention switchable.
#[allow(clippy::too_many_arguments)]
pub fn estimate_rates_with_sources(
    model: &ModelSpec,
    u_star: &ControlProcess,
    family: &SpikeFamily,
    eps_ladder: &[f64],
    k: usize,
    n_particles: usize,
    n_steps: usize,
    repeats: usize,
    master_seed: u64,
    source_times_x1: bool,
) -> Result<RateReport, VariationError> {
    use crate::forward::simulate_particles;
    use crate::stochastics::RngStreams;

    if eps_ladder.len() < 4 {
        return Err(VariationError::LadderTooShort { len: eps_ladder.len() });
    }
    if repeats < 3 {
        return Err(VariationError::TooFewRepeats { repeats });
    }
    let grid = TimeGrid::new(model.horizon.0, model.horizon.1, n_steps)
        .expect("horizon validated by the model");
    let snapped: Vec<f64> = eps_ladder
        .iter()
        .map(|&eps| {
            SpikeSpec { t0: family.t0, eps, u_spike: family.u_spike }
                .snap(&grid)
                .map(|w| w.eps(&grid))
        })
        .collect::<Result<_, _>>()?;
    let log_eps: Vec<f64> = snapped.iter().map(|e| e.ln()).collect();

    // Per-seed, per-quantity slopes; a seed marks a quantity degenerate when
    // any ladder point is non-positive (identically-zero processes).
    let mut per_quantity_slopes: [Vec<f64>; 6] = Default::default();
    let mut degenerate = [false; 6];
    for rep in 0..repeats {
        let streams = RngStreams::new(master_seed.wrapping_add(rep as u64));
        let star = simulate_particles(model, u_star, &grid, n_particles, &streams)?;
        let mut values = [Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for &eps in &snapped {
            let spike = SpikeSpec { t0: family.t0, eps, u_spike: family.u_spike };
            let bundle = simulate_variation_bundle_with_sources(
                model,
                star.clone(),
                &spike,
                source_times_x1,
            )?;
            let qs = rate_quantities(&bundle, k);
            for (slot, q) in values.iter_mut().zip(qs) {
                slot.push(q);
            }
        }
        for (idx, slot) in values.iter().enumerate() {
            if slot.iter().all(|&q| q > 0.0) {
                let logs: Vec<f64> = slot.iter().map(|q| q.ln()).collect();
                per_quantity_slopes[idx].push(ls_slope(&log_eps, &logs));
            } else {
                degenerate[idx] = true;
            }
        }
    }

    let rows = RATE_QUANTITIES
        .iter()
        .enumerate()
        .map(|(idx, &(quantity, eq_tag))| {
            let slopes = &per_quantity_slopes[idx];
            if degenerate[idx] || slopes.is_empty() {
                RateRow {
                    quantity,
                    eq_tag,
                    k,
                    slope: None,
                    slope_stderr: None,
                    n_seeds: repeats,
                    degenerate: true,
                }
            } else {
                let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
                let var = slopes.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
                    / (slopes.len() - 1).max(1) as f64;
                RateRow {
                    quantity,
                    eq_tag,
                    k,
                    slope: Some(mean),
                    slope_stderr: Some((var / slopes.len() as f64).sqrt()),
                    n_seeds: slopes.len(),
                    degenerate: false,
                }
            }
        })
        .collect();

    Ok(RateReport { rows, eps_values: snapped, n_particles, n_steps })
}
