//! Backward solvers for the two adjoint equations, Hamiltonian evaluation,
//! and adjoint moment diagnostics.
//!
//! The first-order adjoint `(Psi, K, gamma)` solves a linear backward SDE of
//! mean-field type: the driver couples every particle to the population
//! through cross-particle means of `f_y Psi`, `sigma_y K` and `l_y`. The
//! second-order adjoint `(Q, R, Gamma)` solves a classical linear backward
//! SDE with jumps whose driver consumes the first adjoint through the
//! second state derivative of the Hamiltonian.
//!
//! Sign convention: `Psi` is the negative of the cost sensitivity. Its
//! terminal value is `-(h_x + E(h_y))` and its driver is the state
//! derivative of the Hamiltonian, so running-cost gradients enter with a
//! minus sign. With this pairing, ascending the Hamiltonian in the control
//! descends the cost, which is what the maximum-principle check and the
//! optimizer rely on.
//!
//! Two backends are provided. The regression backend performs backward
//! induction with least-squares Monte Carlo: conditional expectations are
//! projections on the polynomial basis `{1, x, x^2}` of the particle state,
//! `K` comes from the Brownian-increment covariation, and each `gamma(theta)`
//! from the compensated-count covariation of its atom. The deterministic
//! backend integrates the scalar backward ODE obtained when driver and
//! terminal value are deterministic functions of time (`K = 0`, `gamma = 0`);
//! it exists to serve as an oracle for the regression backend on the model
//! families that qualify.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::forward::{empirical_mean, ControlTrace, ParticleEnsemble};
use crate::model::{JumpMeasureSpec, ModelSpec};
use crate::stochastics::TimeGrid;

#[derive(Debug, Error)]
pub enum AdjointError {
    #[error("deterministic backend is not valid for the {order} adjoint of family `{family}`")]
    DeterministicUnsupported { family: String, order: &'static str },
    #[error("deterministic backend requires a control shared by all particles")]
    DeterministicNeedsSharedControl,
    #[error("adjoint solution became non-finite at node {node}")]
    NonFinite { node: usize },
}

/// Solver backend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjointMethod {
    Regression,
    Deterministic,
}

/// Whether the mean-field coupling terms are included. `Classical` drops
/// `E(f_y Psi)`, `E(sigma_y K)`, `E(l_y)` and the terminal `E(h_y)`,
/// recovering the standard jump adjoint; with all `y`-derivatives identically
/// zero the two forms coincide bit for bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjointForm {
    MeanField,
    Classical,
}

/// First-order adjoint values. Node-major like the ensemble: `psi[i][j]` is
/// particle `j` at node `i`; `gamma[i]` is flat particle-major with `n_atoms`
/// entries per particle. The rows at the terminal node carry `k = gamma = 0`
/// (no increment is left to project on).
#[derive(Clone, Debug)]
pub struct AdjointTriple {
    pub psi: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub n_atoms: usize,
}

impl AdjointTriple {
    pub fn psi(&self, i: usize, j: usize) -> f64 {
        self.psi[i][j]
    }

    pub fn k(&self, i: usize, j: usize) -> f64 {
        self.k[i][j]
    }

    pub fn gamma(&self, i: usize, j: usize, atom: usize) -> f64 {
        self.gamma[i][j * self.n_atoms + atom]
    }
}

/// Second-order adjoint values, same layout.
#[derive(Clone, Debug)]
pub struct SecondOrderAdjoint {
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub big_gamma: Vec<Vec<f64>>,
    pub n_atoms: usize,
}

impl SecondOrderAdjoint {
    pub fn q(&self, i: usize, j: usize) -> f64 {
        self.q[i][j]
    }

    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.r[i][j]
    }

    pub fn big_gamma(&self, i: usize, j: usize, atom: usize) -> f64 {
        self.big_gamma[i][j * self.n_atoms + atom]
    }
}

/// Regression health over one backward sweep.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SolveDiagnostics {
    /// Largest Gram-matrix condition number accepted.
    pub max_condition: f64,
    /// Nodes where the quadratic basis was rejected and a smaller one used
    /// (includes nodes with a degenerate state cross-section, such as the
    /// initial node where every particle sits at the same point).
    pub reduced_basis_nodes: usize,
}

impl SolveDiagnostics {
    fn absorb(&mut self, reg: &NodeRegression) {
        self.max_condition = self.max_condition.max(reg.condition);
        if reg.p < 3 {
            self.reduced_basis_nodes += 1;
        }
    }
}

const CONDITION_LIMIT: f64 = 1e12;

/// Per-node least-squares projector onto `{1, z, z^2}` with `z` the
/// standardized particle state. Standardizing changes nothing about the
/// projection space but keeps the Gram matrix well scaled; the basis degrades
/// to `{1, z}` and then `{1}` when the Gram condition number passes 1e12.
struct NodeRegression {
    p: usize,
    z: Vec<f64>,
    lu3: Option<nalgebra::linalg::LU<f64, nalgebra::U3, nalgebra::U3>>,
    lu2: Option<nalgebra::linalg::LU<f64, nalgebra::U2, nalgebra::U2>>,
    condition: f64,
}

fn sym_condition_3(m: &Matrix3<f64>) -> f64 {
    let eig = m.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    max / min
}

fn sym_condition_2(m: &Matrix2<f64>) -> f64 {
    let eig = m.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    max / min
}

impl NodeRegression {
    fn new(states: &[f64]) -> Self {
        let n = states.len() as f64;
        let mean = empirical_mean(states);
        let sd = (states.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !sd.is_finite() || sd == 0.0 {
            return Self { p: 1, z: Vec::new(), lu3: None, lu2: None, condition: 1.0 };
        }
        let z: Vec<f64> = states.iter().map(|x| (x - mean) / sd).collect();
        let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
        for &v in &z {
            let v2 = v * v;
            s1 += v;
            s2 += v2;
            s3 += v2 * v;
            s4 += v2 * v2;
        }
        let g3 = Matrix3::new(n, s1, s2, s1, s2, s3, s2, s3, s4);
        let cond3 = sym_condition_3(&g3);
        if cond3.is_finite() && cond3 < CONDITION_LIMIT {
            return Self { p: 3, z, lu3: Some(g3.lu()), lu2: None, condition: cond3 };
        }
        let g2 = Matrix2::new(n, s1, s1, s2);
        let cond2 = sym_condition_2(&g2);
        if cond2.is_finite() && cond2 < CONDITION_LIMIT {
            return Self { p: 2, z, lu3: None, lu2: Some(g2.lu()), condition: cond2 };
        }
        Self { p: 1, z, lu3: None, lu2: None, condition: 1.0 }
    }

    /// Fitted conditional-expectation values, one per particle.
    fn fit(&self, y: &[f64]) -> Vec<f64> {
        match self.p {
            3 => {
                let (mut r0, mut r1, mut r2) = (0.0, 0.0, 0.0);
                for (v, &yi) in self.z.iter().zip(y) {
                    r0 += yi;
                    r1 += yi * v;
                    r2 += yi * v * v;
                }
                if let Some(beta) =
                    self.lu3.as_ref().unwrap().solve(&Vector3::new(r0, r1, r2))
                {
                    return self
                        .z
                        .iter()
                        .map(|&v| beta[0] + beta[1] * v + beta[2] * v * v)
                        .collect();
                }
                vec![empirical_mean(y); y.len()]
            }
            2 => {
                let (mut r0, mut r1) = (0.0, 0.0);
                for (v, &yi) in self.z.iter().zip(y) {
                    r0 += yi;
                    r1 += yi * v;
                }
                if let Some(beta) = self.lu2.as_ref().unwrap().solve(&Vector2::new(r0, r1)) {
                    return self.z.iter().map(|&v| beta[0] + beta[1] * v).collect();
                }
                vec![empirical_mean(y); y.len()]
            }
            _ => vec![empirical_mean(y); y.len()],
        }
    }
}

/// Shared state of one backward sweep.
struct SweepCtx<'a> {
    model: &'a ModelSpec,
    ens: &'a ParticleEnsemble,
    form: AdjointForm,
    dt: f64,
    n: usize,
    n_atoms: usize,
}

/// One node's worth of both adjoints, borrowed from the sweep. `gamma` and
/// `big_gamma` are flat particle-major with `n_atoms` entries per particle.
pub struct AdjointNodeView<'a> {
    pub node: usize,
    pub psi: &'a [f64],
    pub k: &'a [f64],
    pub gamma: &'a [f64],
    pub q: &'a [f64],
    pub r: &'a [f64],
    pub big_gamma: &'a [f64],
    pub n_atoms: usize,
}

impl<'a> SweepCtx<'a> {
    fn new(model: &'a ModelSpec, ens: &'a ParticleEnsemble, form: AdjointForm) -> Self {
        Self {
            model,
            ens,
            form,
            dt: ens.grid.dt(),
            n: ens.n_particles(),
            n_atoms: model.jump_measure.atoms().len(),
        }
    }

    fn terminal_psi(&self) -> Vec<f64> {
        let i = self.ens.n_steps();
        let m = self.ens.mean[i];
        let states = self.ens.node_states(i);
        let mean_hy = match self.form {
            AdjointForm::MeanField => {
                empirical_mean(
                    &states
                        .iter()
                        .map(|&x| (self.model.terminal_cost.dy)(x, m))
                        .collect::<Vec<f64>>(),
                )
            }
            AdjointForm::Classical => 0.0,
        };
        states.iter().map(|&x| -((self.model.terminal_cost.dx)(x, m) + mean_hy)).collect()
    }

    fn terminal_q(&self) -> Vec<f64> {
        let i = self.ens.n_steps();
        let m = self.ens.mean[i];
        self.ens.node_states(i).iter().map(|&x| -(self.model.terminal_cost.dxx)(x, m)).collect()
    }

    /// Per-particle, per-atom event counts in interval `i`.
    fn counts(&self, i: usize) -> Vec<f64> {
        let mut counts = vec![0.0; self.n * self.n_atoms];
        for j in 0..self.n {
            for &(_, a) in self.ens.noise.trains[j].events_in_step(i as u32) {
                counts[j * self.n_atoms + a as usize] += 1.0;
            }
        }
        counts
    }

    /// Regressed `K` and `gamma` for the value process with one-step-ahead
    /// values `next`: `K` from the Brownian covariation, `gamma(theta_a)`
    /// from the atom's compensated-count covariation.
    fn martingale_parts(
        &self,
        i: usize,
        reg: &NodeRegression,
        next: &[f64],
        counts: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let target: Vec<f64> =
            (0..self.n).map(|j| next[j] * self.ens.noise.dw[j][i]).collect();
        let mut k: Vec<f64> = reg.fit(&target);
        for v in &mut k {
            *v /= self.dt;
        }

        let mut gamma = vec![0.0; self.n * self.n_atoms];
        for (a, &(_, w)) in self.model.jump_measure.atoms().iter().enumerate() {
            let scale = w * self.dt;
            let target: Vec<f64> = (0..self.n)
                .map(|j| next[j] * (counts[j * self.n_atoms + a] - scale))
                .collect();
            let fitted = reg.fit(&target);
            for j in 0..self.n {
                gamma[j * self.n_atoms + a] = fitted[j] / scale;
            }
        }
        (k, gamma)
    }

    /// One regression step of the first adjoint at node `i`, given the values
    /// at node `i + 1`. Returns `(psi_i, k_i, gamma_i)`.
    fn first_step(
        &self,
        i: usize,
        reg: &NodeRegression,
        counts: &[f64],
        next_psi: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = self.ens.grid.node(i);
        let m = self.ens.mean[i];
        let states = self.ens.node_states(i);
        let atoms = self.model.jump_measure.atoms();

        let ce = reg.fit(next_psi);
        let (k, gamma) = self.martingale_parts(i, reg, next_psi, counts);

        let coupling = match self.form {
            AdjointForm::Classical => 0.0,
            AdjointForm::MeanField => {
                let (mut fy_psi, mut sy_k, mut ly) = (0.0, 0.0, 0.0);
                for j in 0..self.n {
                    let (x, u) = (states[j], self.ens.control_value(j, i));
                    fy_psi += (self.model.drift.dy)(t, x, m, u) * ce[j];
                    sy_k += (self.model.diffusion.dy)(t, x, m, u) * k[j];
                    ly += (self.model.running_cost.dy)(t, x, m, u);
                }
                (fy_psi + sy_k - ly) / self.n as f64
            }
        };

        let psi: Vec<f64> = (0..self.n)
            .map(|j| {
                let (x, u) = (states[j], self.ens.control_value(j, i));
                let mut jump_term = 0.0;
                for (a, &(theta, w)) in atoms.iter().enumerate() {
                    jump_term +=
                        w * (self.model.jump.dx)(t, x, u, theta) * gamma[j * self.n_atoms + a];
                }
                let driver = (self.model.drift.dx)(t, x, m, u) * ce[j]
                    + (self.model.diffusion.dx)(t, x, m, u) * k[j]
                    - (self.model.running_cost.dx)(t, x, m, u)
                    + jump_term
                    + coupling;
                ce[j] + self.dt * driver
            })
            .collect();
        (psi, k, gamma)
    }

    /// Second state derivative of the Hamiltonian per particle at node `i`,
    /// from first-adjoint values at the same node.
    fn hxx_row(&self, i: usize, psi: &[f64], k: &[f64], gamma: &[f64]) -> Vec<f64> {
        let t = self.ens.grid.node(i);
        let m = self.ens.mean[i];
        let states = self.ens.node_states(i);
        let atoms = self.model.jump_measure.atoms();
        (0..self.n)
            .map(|j| {
                let (x, u) = (states[j], self.ens.control_value(j, i));
                let mut jump = 0.0;
                for (a, &(theta, w)) in atoms.iter().enumerate() {
                    jump += w * (self.model.jump.dxx)(t, x, u, theta)
                        * gamma[j * self.n_atoms + a];
                }
                (self.model.drift.dxx)(t, x, m, u) * psi[j]
                    + (self.model.diffusion.dxx)(t, x, m, u) * k[j]
                    + jump
                    - (self.model.running_cost.dxx)(t, x, m, u)
            })
            .collect()
    }

    /// One regression step of the second adjoint at node `i`.
    fn second_step(
        &self,
        i: usize,
        reg: &NodeRegression,
        counts: &[f64],
        next_q: &[f64],
        hxx: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let t = self.ens.grid.node(i);
        let m = self.ens.mean[i];
        let states = self.ens.node_states(i);
        let atoms = self.model.jump_measure.atoms();

        let ce = reg.fit(next_q);
        let (r, big_gamma) = self.martingale_parts(i, reg, next_q, counts);

        let q: Vec<f64> = (0..self.n)
            .map(|j| {
                let (x, u) = (states[j], self.ens.control_value(j, i));
                let fx = (self.model.drift.dx)(t, x, m, u);
                let sx = (self.model.diffusion.dx)(t, x, m, u);
                let mut jump = 0.0;
                for (a, &(theta, w)) in atoms.iter().enumerate() {
                    let gx = (self.model.jump.dx)(t, x, u, theta);
                    let gam = big_gamma[j * self.n_atoms + a];
                    jump += w * ((gam + ce[j]) * gx * gx + 2.0 * gam * gx);
                }
                let driver =
                    2.0 * fx * ce[j] + sx * sx * ce[j] + 2.0 * sx * r[j] + jump + hxx[j];
                ce[j] + self.dt * driver
            })
            .collect();
        (q, r, big_gamma)
    }

    fn check_finite(&self, node: usize, row: &[f64]) -> Result<(), AdjointError> {
        if row.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(AdjointError::NonFinite { node })
        }
    }
}

fn shared_controls(ens: &ParticleEnsemble) -> Result<&[f64], AdjointError> {
    match &ens.control {
        ControlTrace::Shared(vals) => Ok(vals),
        ControlTrace::PerParticle(_) => Err(AdjointError::DeterministicNeedsSharedControl),
    }
}

/// Scalar backward-Euler solution of the first adjoint ODE, valid when the
/// driver and terminal value are deterministic. Coefficients are evaluated at
/// the node's empirical mean state; `E(f_y Psi)` collapses to `f_y Psi`.
fn deterministic_first(
    model: &ModelSpec,
    ens: &ParticleEnsemble,
) -> Result<Vec<f64>, AdjointError> {
    if !model.deterministic_first_adjoint {
        return Err(AdjointError::DeterministicUnsupported {
            family: model.family.clone(),
            order: "first",
        });
    }
    let controls = shared_controls(ens)?;
    let n_steps = ens.n_steps();
    let dt = ens.grid.dt();
    let m_end = ens.mean[n_steps];
    let mut values = vec![0.0; n_steps + 1];
    values[n_steps] =
        -((model.terminal_cost.dx)(m_end, m_end) + (model.terminal_cost.dy)(m_end, m_end));
    for i in (0..n_steps).rev() {
        let t = ens.grid.node(i);
        let m = ens.mean[i];
        let u = controls[i];
        let next = values[i + 1];
        let driver = (model.drift.dx)(t, m, m, u) * next
            + (model.drift.dy)(t, m, m, u) * next
            - (model.running_cost.dx)(t, m, m, u)
            - (model.running_cost.dy)(t, m, m, u);
        values[i] = next + dt * driver;
        if !values[i].is_finite() {
            return Err(AdjointError::NonFinite { node: i });
        }
    }
    Ok(values)
}

/// Scalar backward-Euler solution of the second adjoint ODE (`R = 0`,
/// `Gamma = 0`); the `H_xx` input is the cross-particle mean of the supplied
/// first-adjoint rows, which is exact when those rows are deterministic.
fn deterministic_second(
    model: &ModelSpec,
    ens: &ParticleEnsemble,
    adj1: &AdjointTriple,
) -> Result<Vec<f64>, AdjointError> {
    if !model.deterministic_second_adjoint {
        return Err(AdjointError::DeterministicUnsupported {
            family: model.family.clone(),
            order: "second",
        });
    }
    let controls = shared_controls(ens)?;
    let n_steps = ens.n_steps();
    let dt = ens.grid.dt();
    let m_end = ens.mean[n_steps];
    let mut values = vec![0.0; n_steps + 1];
    values[n_steps] = -(model.terminal_cost.dxx)(m_end, m_end);
    for i in (0..n_steps).rev() {
        let t = ens.grid.node(i);
        let m = ens.mean[i];
        let u = controls[i];
        let next = values[i + 1];
        let psi = empirical_mean(&adj1.psi[i]);
        let k = empirical_mean(&adj1.k[i]);
        let mut gx2 = 0.0;
        let mut hxx_jump = 0.0;
        for (a, &(theta, w)) in model.jump_measure.atoms().iter().enumerate() {
            let gx = (model.jump.dx)(t, m, u, theta);
            gx2 += w * gx * gx;
            let mean_gamma = empirical_mean(
                &(0..ens.n_particles()).map(|j| adj1.gamma(i, j, a)).collect::<Vec<f64>>(),
            );
            hxx_jump += w * (model.jump.dxx)(t, m, u, theta) * mean_gamma;
        }
        let fx = (model.drift.dx)(t, m, m, u);
        let sx = (model.diffusion.dx)(t, m, m, u);
        let hxx = (model.drift.dxx)(t, m, m, u) * psi
            + (model.diffusion.dxx)(t, m, m, u) * k
            + hxx_jump
            - (model.running_cost.dxx)(t, m, m, u);
        values[i] = next + dt * ((2.0 * fx + sx * sx + gx2) * next + hxx);
        if !values[i].is_finite() {
            return Err(AdjointError::NonFinite { node: i });
        }
    }
    Ok(values)
}

/// Solves the first-order adjoint equation backward over the ensemble.
pub fn solve_first_adjoint(
    model: &ModelSpec,
    ens: &ParticleEnsemble,
    method: AdjointMethod,
) -> Result<(AdjointTriple, SolveDiagnostics), AdjointError> {
    solve_first_adjoint_with_form(model, ens, method, AdjointForm::MeanField)
}

/// As `solve_first_adjoint`, with the mean-field coupling switchable for
/// reduction experiments.
pub fn solve_first_adjoint_with_form(
    model: &ModelSpec,
    ens: &ParticleEnsemble,
    method: AdjointMethod,
    form: AdjointForm,
) -> Result<(AdjointTriple, SolveDiagnostics), AdjointError> {
    let ctx = SweepCtx::new(model, ens, form);
    let n_steps = ens.n_steps();
    let n = ctx.n;
    let n_atoms = ctx.n_atoms;
    let mut diag = SolveDiagnostics::default();

    let mut psi = vec![Vec::new(); n_steps + 1];
    let mut k = vec![vec![0.0; n]; n_steps + 1];
    let mut gamma = vec![vec![0.0; n * n_atoms]; n_steps + 1];
    psi[n_steps] = ctx.terminal_psi();
    ctx.check_finite(n_steps, &psi[n_steps])?;

    match method {
        AdjointMethod::Deterministic => {
            let values = deterministic_first(model, ens)?;
            for i in (0..n_steps).rev() {
                psi[i] = vec![values[i]; n];
            }
            psi[n_steps] = vec![values[n_steps]; n];
        }
        AdjointMethod::Regression => {
            for i in (0..n_steps).rev() {
                let reg = NodeRegression::new(ens.node_states(i));
                diag.absorb(&reg);
                let counts = ctx.counts(i);
                let (p, kk, g) = ctx.first_step(i, &reg, &counts, &psi[i + 1]);
                ctx.check_finite(i, &p)?;
                psi[i] = p;
                k[i] = kk;
                gamma[i] = g;
            }
        }
    }
    Ok((AdjointTriple { psi, k, gamma, n_atoms }, diag))
}

/// Solves the second-order adjoint equation backward, consuming a solved
/// first adjoint (for `H_xx`) from the same ensemble.
pub fn solve_second_adjoint(
    model: &ModelSpec,
    ens: &ParticleEnsemble,
    adj1: &AdjointTriple,
    method: AdjointMethod,
) -> Result<(SecondOrderAdjoint, SolveDiagnostics), AdjointError> {
    let ctx = SweepCtx::new(model, ens, AdjointForm::MeanField);
    let n_steps = ens.n_steps();
    let n = ctx.n;
    let n_atoms = ctx.n_atoms;
    let mut diag = SolveDiagnostics::default();

    let mut q = vec![Vec::new(); n_steps + 1];
    let mut r = vec![vec![0.0; n]; n_steps + 1];
    let mut big_gamma = vec![vec![0.0; n * n_atoms]; n_steps + 1];
    q[n_steps] = ctx.terminal_q();
    ctx.check_finite(n_steps, &q[n_steps])?;

    match method {
        AdjointMethod::Deterministic => {
            let values = deterministic_second(model, ens, adj1)?;
            for i in 0..=n_steps {
                q[i] = vec![values[i]; n];
            }
        }
        AdjointMethod::Regression => {
            for i in (0..n_steps).rev() {
                let reg = NodeRegression::new(ens.node_states(i));
                diag.absorb(&reg);
                let counts = ctx.counts(i);
                let hxx = ctx.hxx_row(i, &adj1.psi[i], &adj1.k[i], &adj1.gamma[i]);
                let (qq, rr, gg) = ctx.second_step(i, &reg, &counts, &q[i + 1], &hxx);
                ctx.check_finite(i, &qq)?;
                q[i] = qq;
                r[i] = rr;
                big_gamma[i] = gg;
            }
        }
    }
    Ok((SecondOrderAdjoint { q, r, big_gamma, n_atoms }, diag))
}

/// Runs one backward regression sweep computing both adjoints together,
/// calling `visit` with each node's rows from the terminal node down to node
/// 0, and never materializing more than two nodes at a time. This is the
/// memory-bounded path for large `N * M` products; at small sizes its rows
/// equal the materialized solvers' bit for bit.
pub fn sweep_adjoints(
    model: &ModelSpec,
    ens: &ParticleEnsemble,
    mut visit: impl FnMut(AdjointNodeView),
) -> Result<SolveDiagnostics, AdjointError> {
    let ctx = SweepCtx::new(model, ens, AdjointForm::MeanField);
    let n_steps = ens.n_steps();
    let n = ctx.n;
    let n_atoms = ctx.n_atoms;
    let mut diag = SolveDiagnostics::default();

    let mut psi = ctx.terminal_psi();
    let mut k = vec![0.0; n];
    let mut gamma = vec![0.0; n * n_atoms];
    let mut q = ctx.terminal_q();
    let mut r = vec![0.0; n];
    let mut big_gamma = vec![0.0; n * n_atoms];
    ctx.check_finite(n_steps, &psi)?;
    visit(AdjointNodeView {
        node: n_steps,
        psi: &psi,
        k: &k,
        gamma: &gamma,
        q: &q,
        r: &r,
        big_gamma: &big_gamma,
        n_atoms,
    });

    for i in (0..n_steps).rev() {
        let reg = NodeRegression::new(ens.node_states(i));
        diag.absorb(&reg);
        let counts = ctx.counts(i);
        let (p1, k1, g1) = ctx.first_step(i, &reg, &counts, &psi);
        ctx.check_finite(i, &p1)?;
        let hxx = ctx.hxx_row(i, &p1, &k1, &g1);
        let (q1, r1, gg1) = ctx.second_step(i, &reg, &counts, &q, &hxx);
        ctx.check_finite(i, &q1)?;
        psi = p1;
        k = k1;
        gamma = g1;
        q = q1;
        r = r1;
        big_gamma = gg1;
        visit(AdjointNodeView {
            node: i,
            psi: &psi,
            k: &k,
            gamma: &gamma,
            q: &q,
            r: &r,
            big_gamma: &big_gamma,
            n_atoms,
        });
    }
    Ok(diag)
}

/// Arguments of the Hamiltonian at one node.
#[derive(Clone, Debug)]
pub struct HamiltonianInputs {
    pub t: f64,
    pub x: f64,
    /// Population-mean surrogate fed to the mean-field coefficient slots.
    pub y: f64,
    pub u: f64,
    pub psi: f64,
    pub k: f64,
    /// One value per jump atom.
    pub gamma: Vec<f64>,
}

/// `H = Psi f + K sigma + integral(gamma g d-measure) - l`, evaluated as the
/// exact finite sum over atoms. The jump coefficient is evaluated at the same
/// `(x, u)` as the other coefficients.
pub fn hamiltonian(model: &ModelSpec, inputs: &HamiltonianInputs) -> f64 {
    let HamiltonianInputs { t, x, y, u, psi, k, ref gamma } = *inputs;
    let mut jump = 0.0;
    for (a, &(theta, w)) in model.jump_measure.atoms().iter().enumerate() {
        jump += w * gamma[a] * (model.jump.eval)(t, x, u, theta);
    }
    psi * (model.drift.eval)(t, x, y, u) + k * (model.diffusion.eval)(t, x, y, u) + jump
        - (model.running_cost.eval)(t, x, y, u)
}

/// Spike-direction and state derivatives of the Hamiltonian at one node.
#[derive(Clone, Copy, Debug)]
pub struct HamiltonianDerivatives {
    /// `delta H = Psi delta f + K delta sigma + integral(delta g gamma) - delta l`,
    /// where `delta phi = phi(u_alt) - phi(u)` at frozen `(t, x, y)`.
    pub delta_h: f64,
    pub h_x: f64,
    pub h_xx: f64,
}

/// Evaluates `delta H`, `H_x` and `H_xx` at one node from first-adjoint
/// values. All three vanish or collapse exactly as the formulas dictate:
/// `u_alt = u` gives `delta_h = 0`, zero adjoints give `(-delta l, -l_x, -l_xx)`.
pub fn hamiltonian_derivatives(
    model: &ModelSpec,
    inputs: &HamiltonianInputs,
    u_alt: f64,
) -> HamiltonianDerivatives {
    let HamiltonianInputs { t, x, y, u, psi, k, ref gamma } = *inputs;
    let atoms = model.jump_measure.atoms();
    let (mut delta_jump, mut jump_x, mut jump_xx) = (0.0, 0.0, 0.0);
    for (a, &(theta, w)) in atoms.iter().enumerate() {
        let wg = w * gamma[a];
        delta_jump += wg * ((model.jump.eval)(t, x, u_alt, theta) - (model.jump.eval)(t, x, u, theta));
        jump_x += wg * (model.jump.dx)(t, x, u, theta);
        jump_xx += wg * (model.jump.dxx)(t, x, u, theta);
    }
    let delta_h = psi * ((model.drift.eval)(t, x, y, u_alt) - (model.drift.eval)(t, x, y, u))
        + k * ((model.diffusion.eval)(t, x, y, u_alt) - (model.diffusion.eval)(t, x, y, u))
        + delta_jump
        - ((model.running_cost.eval)(t, x, y, u_alt) - (model.running_cost.eval)(t, x, y, u));
    let h_x = (model.drift.dx)(t, x, y, u) * psi
        + (model.diffusion.dx)(t, x, y, u) * k
        + jump_x
        - (model.running_cost.dx)(t, x, y, u);
    let h_xx = (model.drift.dxx)(t, x, y, u) * psi
        + (model.diffusion.dxx)(t, x, y, u) * k
        + jump_xx
        - (model.running_cost.dxx)(t, x, y, u);
    HamiltonianDerivatives { delta_h, h_x, h_xx }
}

/// Totals of the adjoint moment bounds.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AdjointMomentReport {
    /// `E[sup Psi^2] + E int K^2 dt + E int int gamma^2 d-measure dt`.
    pub first_total: f64,
    /// Same quantity for `(Q, R, Gamma)`.
    pub second_total: f64,
}

fn moment_total(
    sup_rows: &[Vec<f64>],
    sq_rows: &[Vec<f64>],
    atom_rows: &[Vec<f64>],
    n_atoms: usize,
    grid: &TimeGrid,
    measure: &JumpMeasureSpec,
) -> f64 {
    let n = sup_rows[0].len();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let per_particle: Vec<f64> = (0..n)
        .map(|j| {
            let mut sup = 0.0f64;
            for row in sup_rows {
                sup = sup.max(row[j] * row[j]);
            }
            let mut quad = 0.0;
            for i in 0..n_steps {
                quad += sq_rows[i][j] * sq_rows[i][j] * dt;
                for (a, &(_, w)) in measure.atoms().iter().enumerate() {
                    let g = atom_rows[i][j * n_atoms + a];
                    quad += w * g * g * dt;
                }
            }
            sup + quad
        })
        .collect();
    empirical_mean(&per_particle)
}

/// Monte Carlo totals for the adjoint moment bounds; tests assert finiteness
/// and stability under particle refinement.
pub fn check_adjoint_moments(
    adj1: &AdjointTriple,
    adj2: &SecondOrderAdjoint,
    grid: &TimeGrid,
    measure: &JumpMeasureSpec,
) -> AdjointMomentReport {
    AdjointMomentReport {
        first_total: moment_total(&adj1.psi, &adj1.k, &adj1.gamma, adj1.n_atoms, grid, measure),
        second_total: moment_total(
            &adj2.q,
            &adj2.r,
            &adj2.big_gamma,
            adj2.n_atoms,
            grid,
            measure,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_particles;
    use crate::model::{build_model, CoeffSet, ControlProcess, JumpMeasureSpec};
    use crate::stochastics::{RngStreams, TimeGrid};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    fn lq_fixture() -> BTreeMap<String, f64> {
        params(&[
            ("a", -0.7),
            ("a_bar", 0.3),
            ("b", 0.6),
            ("c", 0.25),
            ("c_bar", 0.1),
            ("d", 0.4),
            ("e", 0.2),
            ("kappa", 0.3),
            ("q", 0.8),
            ("q_bar", 0.4),
            ("r", 0.5),
            ("m", 0.9),
            ("m_bar", 0.4),
            ("zeta", 1.0),
        ])
    }

    /// Deterministic-coefficient sub-case: state-dependent cost curvature
    /// removed so driver and terminal value are deterministic.
    fn lq_deterministic_fixture() -> BTreeMap<String, f64> {
        let mut p = lq_fixture();
        p.insert("q".into(), 0.0);
        p.insert("m".into(), 0.0);
        p
    }

    fn simulate_lq(
        params: &BTreeMap<String, f64>,
        n: usize,
        steps: usize,
        seed: u64,
    ) -> (crate::model::ModelSpec, crate::forward::ParticleEnsemble) {
        let model = build_model("lq_meanfield_jump", params).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, steps).unwrap();
        let streams = RngStreams::new(seed);
        let ens =
            simulate_particles(&model, &ControlProcess::Constant(0.1), &grid, n, &streams)
                .unwrap();
        (model, ens)
    }

    fn sup_node_mean_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(ra, rb)| {
                empirical_mean(
                    &ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).collect::<Vec<f64>>(),
                )
            })
            .fold(0.0f64, f64::max)
    }

    #[test]
    fn zero_model_has_zero_adjoints_in_both_backends() {
        let model = build_model("zero", &params(&[("zeta", 1.0)])).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let streams = RngStreams::new(5);
        let ens =
            simulate_particles(&model, &ControlProcess::Constant(0.0), &grid, 50, &streams)
                .unwrap();
        for method in [AdjointMethod::Deterministic, AdjointMethod::Regression] {
            let (adj1, _) = solve_first_adjoint(&model, &ens, method).unwrap();
            let (adj2, _) = solve_second_adjoint(&model, &ens, &adj1, method).unwrap();
            for i in 0..=20 {
                assert!(adj1.psi[i].iter().all(|&v| v == 0.0), "method {method:?}");
                assert!(adj1.k[i].iter().all(|&v| v == 0.0));
                assert!(adj2.q[i].iter().all(|&v| v == 0.0));
                assert!(adj2.r[i].iter().all(|&v| v == 0.0));
                assert!(adj1.gamma[i].is_empty() && adj2.big_gamma[i].is_empty());
            }
        }
    }

    /// Model whose only nonzero datum is `l_x = 1`: the adjoint is the ramp
    /// `Psi(t) = T - t`, reproduced exactly by backward Euler.
    fn ramp_model() -> crate::model::ModelSpec {
        let mut model = build_model("zero", &BTreeMap::new()).unwrap();
        model.running_cost.dx = Arc::new(|_, _, _, _| 1.0);
        model
    }

    #[test]
    fn unit_running_gradient_gives_the_linear_ramp() {
        let model = ramp_model();
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let streams = RngStreams::new(6);
        let ens =
            simulate_particles(&model, &ControlProcess::Constant(0.0), &grid, 40, &streams)
                .unwrap();
        let (det, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Deterministic).unwrap();
        for i in 0..=64 {
            // Raising the state raises the accumulated cost one-for-one, so
            // the costate is the negated remaining horizon; on a dyadic grid
            // the backward sum of dt hits -(T - t_i) exactly.
            let expected = -((64 - i) as f64 * grid.dt());
            assert_eq!(det.psi[i][0], expected);
            assert!(det.k[i].iter().all(|&v| v == 0.0));
        }
        let (reg, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Regression).unwrap();
        let gap = sup_node_mean_gap(&reg.psi, &det.psi);
        assert!(gap < 1e-10, "gap {gap}");
    }

    #[test]
    fn constant_curvature_terminal_gives_constant_q() {
        // h_xx = 2 with every driver coefficient zero: Q = -2 on all of [s, T].
        let mut model = build_model("zero", &BTreeMap::new()).unwrap();
        model.terminal_cost.dxx = Arc::new(|_, _| 2.0);
        let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let streams = RngStreams::new(7);
        let ens =
            simulate_particles(&model, &ControlProcess::Constant(0.0), &grid, 30, &streams)
                .unwrap();
        for method in [AdjointMethod::Deterministic, AdjointMethod::Regression] {
            let (adj1, _) = solve_first_adjoint(&model, &ens, method).unwrap();
            let (adj2, _) = solve_second_adjoint(&model, &ens, &adj1, method).unwrap();
            for i in 0..=32 {
                for j in 0..30 {
                    assert!(
                        (adj2.q(i, j) + 2.0).abs() < 1e-12,
                        "method {method:?}, node {i}: {}",
                        adj2.q(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn terminal_conditions_hold_exactly_per_particle() {
        let (model, ens) = simulate_lq(&lq_fixture(), 500, 40, 8);
        let (adj1, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Regression).unwrap();
        let (adj2, _) =
            solve_second_adjoint(&model, &ens, &adj1, AdjointMethod::Regression).unwrap();
        let m_end = ens.mean[40];
        let states = ens.node_states(40);
        let mean_hy = empirical_mean(
            &states.iter().map(|&x| (model.terminal_cost.dy)(x, m_end)).collect::<Vec<f64>>(),
        );
        for j in 0..500 {
            let expected = -((model.terminal_cost.dx)(states[j], m_end) + mean_hy);
            assert_eq!(adj1.psi(40, j), expected);
            assert_eq!(adj2.q(40, j), -(model.terminal_cost.dxx)(states[j], m_end));
        }
    }

    #[test]
    fn regression_matches_deterministic_oracle_on_the_qualifying_subcase() {
        let (model, ens) = simulate_lq(&lq_deterministic_fixture(), 2000, 50, 9);
        assert!(model.deterministic_first_adjoint);
        let (det1, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Deterministic).unwrap();
        let (reg1, diag) = solve_first_adjoint(&model, &ens, AdjointMethod::Regression).unwrap();
        let gap1 = sup_node_mean_gap(&reg1.psi, &det1.psi);
        assert!(gap1 < 5e-2, "first adjoint gap {gap1}");
        assert!(diag.max_condition.is_finite());

        let (det2, _) =
            solve_second_adjoint(&model, &ens, &det1, AdjointMethod::Deterministic).unwrap();
        let (reg2, _) =
            solve_second_adjoint(&model, &ens, &reg1, AdjointMethod::Regression).unwrap();
        let gap2 = sup_node_mean_gap(&reg2.q, &det2.q);
        assert!(gap2 < 5e-2, "second adjoint gap {gap2}");
    }

    #[test]
    fn deterministic_backend_rejects_state_dependent_costs() {
        let (model, ens) = simulate_lq(&lq_fixture(), 20, 10, 10);
        assert!(matches!(
            solve_first_adjoint(&model, &ens, AdjointMethod::Deterministic),
            Err(AdjointError::DeterministicUnsupported { .. })
        ));
    }

    #[test]
    fn adjoints_scale_linearly_with_the_cost_data() {
        // Both backward equations are linear in (h, l); scaling the cost
        // parameters scales the solutions. The regression pipeline is linear
        // in its targets, so this holds to round-off, not just in law.
        let lambda = 3.5;
        let mut scaled = lq_fixture();
        for key in ["q", "q_bar", "r", "m", "m_bar"] {
            let v = scaled[key];
            scaled.insert(key.into(), lambda * v);
        }
        let (model, ens) = simulate_lq(&lq_fixture(), 400, 30, 11);
        let scaled_model = build_model("lq_meanfield_jump", &scaled).unwrap();
        let (base, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Regression).unwrap();
        let (big, _) =
            solve_first_adjoint(&scaled_model, &ens, AdjointMethod::Regression).unwrap();
        for i in 0..=30 {
            for j in 0..400 {
                assert!(
                    (lambda * base.psi(i, j) - big.psi(i, j)).abs() < 1e-9,
                    "node {i} particle {j}"
                );
            }
        }
    }

    #[test]
    fn mean_field_form_reduces_to_classical_when_decoupled() {
        let mut p = lq_fixture();
        p.insert("a_bar".into(), 0.0);
        p.insert("c_bar".into(), 0.0);
        p.insert("q_bar".into(), 0.0);
        p.insert("m_bar".into(), 0.0);
        let (model, ens) = simulate_lq(&p, 300, 25, 12);
        let (mf, _) = solve_first_adjoint_with_form(
            &model,
            &ens,
            AdjointMethod::Regression,
            AdjointForm::MeanField,
        )
        .unwrap();
        let (cl, _) = solve_first_adjoint_with_form(
            &model,
            &ens,
            AdjointMethod::Regression,
            AdjointForm::Classical,
        )
        .unwrap();
        for i in 0..=25 {
            assert_eq!(mf.psi[i], cl.psi[i], "node {i}");
            assert_eq!(mf.k[i], cl.k[i]);
            assert_eq!(mf.gamma[i], cl.gamma[i]);
        }
    }

    #[test]
    fn jump_free_models_carry_no_gamma_components() {
        let mut p = lq_fixture();
        p.insert("no_jumps".into(), 1.0);
        let (model, ens) = simulate_lq(&p, 200, 20, 13);
        let (adj1, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Regression).unwrap();
        let (adj2, _) =
            solve_second_adjoint(&model, &ens, &adj1, AdjointMethod::Regression).unwrap();
        assert_eq!(adj1.n_atoms, 0);
        assert!(adj1.gamma.iter().all(|row| row.is_empty()));
        assert!(adj2.big_gamma.iter().all(|row| row.is_empty()));
        assert!(adj1.psi.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn streaming_sweep_equals_materialized_solvers() {
        let (model, ens) = simulate_lq(&lq_fixture(), 300, 25, 14);
        let (adj1, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Regression).unwrap();
        let (adj2, _) =
            solve_second_adjoint(&model, &ens, &adj1, AdjointMethod::Regression).unwrap();
        let mut visited = 0;
        sweep_adjoints(&model, &ens, |view| {
            assert_eq!(view.psi, &adj1.psi[view.node][..], "node {}", view.node);
            assert_eq!(view.k, &adj1.k[view.node][..]);
            assert_eq!(view.gamma, &adj1.gamma[view.node][..]);
            assert_eq!(view.q, &adj2.q[view.node][..]);
            assert_eq!(view.r, &adj2.r[view.node][..]);
            assert_eq!(view.big_gamma, &adj2.big_gamma[view.node][..]);
            visited += 1;
        })
        .unwrap();
        assert_eq!(visited, 26);
    }

    #[test]
    fn hamiltonian_evaluates_the_direct_substitution_example() {
        // Psi=2 against drift 3, K=1 against diffusion 0.5, one atom of
        // weight 0.4 with gamma*g = 1, running cost 1: H = 5.9.
        let mut model = build_model("zero", &BTreeMap::new()).unwrap();
        model.drift = CoeffSet::constant(3.0);
        model.diffusion = CoeffSet::constant(0.5);
        model.running_cost = CoeffSet::constant(1.0);
        model.jump = crate::model::JumpCoeffSet {
            eval: Arc::new(|_, _, _, _| 2.0),
            dx: Arc::new(|_, _, _, _| 0.0),
            dxx: Arc::new(|_, _, _, _| 0.0),
        };
        model.jump_measure = JumpMeasureSpec::new(vec![(1.0, 0.4)]).unwrap();
        let inputs = HamiltonianInputs {
            t: 0.0,
            x: 0.0,
            y: 0.0,
            u: 0.0,
            psi: 2.0,
            k: 1.0,
            gamma: vec![0.5],
        };
        let h = hamiltonian(&model, &inputs);
        assert!((h - 5.9).abs() < 1e-12, "{h}");
        let zero_inputs =
            HamiltonianInputs { psi: 0.0, k: 0.0, gamma: vec![0.0], ..inputs };
        assert_eq!(
            hamiltonian(&model, &zero_inputs),
            -1.0,
            "only the running cost survives zero adjoints"
        );
    }

    #[test]
    fn hamiltonian_control_gradient_matches_hand_differentiation() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let inputs = HamiltonianInputs {
            t: 0.3,
            x: 0.8,
            y: 0.5,
            u: 0.2,
            psi: 1.3,
            k: -0.4,
            gamma: vec![0.6, -0.2],
        };
        let h = 1e-6;
        let mut plus = inputs.clone();
        plus.u += h;
        let mut minus = inputs.clone();
        minus.u -= h;
        let fd = (hamiltonian(&model, &plus) - hamiltonian(&model, &minus)) / (2.0 * h);
        // d/du for the fixture: psi*(b2*x + b) + k*(d2*x + d)
        //   + sum_a w_a gamma_a theta_a (e2*x + kappa) - r*u, with b2=d2=e2=0.
        let atoms = model.jump_measure.atoms();
        let analytic = 1.3 * 0.6 + (-0.4) * 0.4
            + atoms[0].1 * 0.6 * atoms[0].0 * 0.3
            + atoms[1].1 * (-0.2) * atoms[1].0 * 0.3
            - 0.5 * 0.2;
        assert!((fd - analytic).abs() < 1e-6, "fd {fd}, analytic {analytic}");
    }

    #[test]
    fn hamiltonian_derivatives_collapse_as_the_formulas_dictate() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let inputs = HamiltonianInputs {
            t: 0.5,
            x: 1.1,
            y: 0.9,
            u: 0.3,
            psi: 0.7,
            k: 0.2,
            gamma: vec![0.1, 0.4],
        };
        // Degenerate spike: all differences vanish identically.
        assert_eq!(hamiltonian_derivatives(&model, &inputs, 0.3).delta_h, 0.0);
        // Zero adjoints: only the running-cost terms survive.
        let zeroed = HamiltonianInputs { psi: 0.0, k: 0.0, gamma: vec![0.0, 0.0], ..inputs };
        let d = hamiltonian_derivatives(&model, &zeroed, 0.8);
        let l = |u: f64| (model.running_cost.eval)(0.5, 1.1, 0.9, u);
        assert_eq!(d.delta_h, -(l(0.8) - l(0.3)));
        assert_eq!(d.h_x, -(model.running_cost.dx)(0.5, 1.1, 0.9, 0.3));
        // For this family H_xx = -l_xx = -q.
        assert_eq!(d.h_xx, -0.8);
        let full = hamiltonian_derivatives(&model, &inputs, 0.8);
        assert_eq!(full.h_xx, -0.8);
    }

    #[test]
    fn moment_totals_are_stable_under_particle_refinement() {
        // The quadratic terms are plug-in second moments of regression
        // estimates, which carry O(basis/(N dt)) estimator variance on top of
        // the true quadratic variation; the stability diagnostic is
        // informative in the regime N dt >> basis, hence the modest grid.
        let totals = |n: usize| {
            let (model, ens) = simulate_lq(&lq_fixture(), n, 20, 15);
            let (adj1, _) =
                solve_first_adjoint(&model, &ens, AdjointMethod::Regression).unwrap();
            let (adj2, _) =
                solve_second_adjoint(&model, &ens, &adj1, AdjointMethod::Regression).unwrap();
            check_adjoint_moments(&adj1, &adj2, &ens.grid, &model.jump_measure)
        };
        let small = totals(1000);
        let large = totals(10000);
        assert!(small.first_total.is_finite() && small.second_total.is_finite());
        assert!(
            (small.first_total - large.first_total).abs() / large.first_total < 0.2,
            "first totals {} vs {}",
            small.first_total,
            large.first_total
        );
        assert!(
            (small.second_total - large.second_total).abs() / large.second_total < 0.2,
            "second totals {} vs {}",
            small.second_total,
            large.second_total
        );
    }

    #[test]
    fn ramp_moment_total_is_the_squared_horizon() {
        let model = ramp_model();
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let streams = RngStreams::new(16);
        let ens =
            simulate_particles(&model, &ControlProcess::Constant(0.0), &grid, 10, &streams)
                .unwrap();
        let (adj1, _) = solve_first_adjoint(&model, &ens, AdjointMethod::Deterministic).unwrap();
        let (adj2, _) =
            solve_second_adjoint(&model, &ens, &adj1, AdjointMethod::Deterministic).unwrap();
        let report = check_adjoint_moments(&adj1, &adj2, &grid, &model.jump_measure);
        // sup Psi^2 = (T - s)^2 = 1, K and gamma vanish.
        assert_eq!(report.first_total, 1.0);
        assert_eq!(report.second_total, 0.0);
    }
}
