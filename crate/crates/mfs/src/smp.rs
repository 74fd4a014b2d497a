//! Maximum-principle verification: the pointwise optimality functional, its
//! evaluation over a time x control-mesh lattice with an averaged verdict,
//! common-random-number cost-gap comparison, and a projected-gradient oracle
//! that produces a reference optimal control directly from the discretized
//! problem (independent of the verification machinery, so the two views
//! cross-check each other).

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adjoint::{
    solve_first_adjoint, solve_second_adjoint, AdjointError, AdjointMethod, AdjointTriple,
    SecondOrderAdjoint,
};
use crate::forward::{
    empirical_mean, particle_costs, simulate_particles, simulate_with_noise, ForwardError,
    ParticleEnsemble,
};
use crate::model::{ControlProcess, ModelSpec};
use crate::stochastics::{sample_noise, RngStreams, TimeGrid};
use crate::variation::{spike_control, SpikeSpec, VariationError};

#[derive(Debug, Error)]
pub enum SmpError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Adjoint(#[from] AdjointError),
    #[error(transparent)]
    Variation(#[from] VariationError),
    #[error("control mesh needs at least 2 points, got {0}")]
    MeshTooSmall(usize),
}

/// Frozen per-particle node data for one functional evaluation.
#[derive(Clone, Copy, Debug)]
pub struct NodePoint {
    pub t: f64,
    pub x: f64,
    pub m: f64,
    /// The candidate control's value at this node (the value the functional
    /// measures alternatives against).
    pub u_star: f64,
}

/// First-adjoint values at one node and particle.
#[derive(Clone, Copy, Debug)]
pub struct FirstAdjointValues<'a> {
    pub psi: f64,
    pub k: f64,
    pub gamma: &'a [f64],
}

/// Second-adjoint values at one node and particle (the martingale component
/// does not enter the functional).
#[derive(Clone, Copy, Debug)]
pub struct SecondAdjointValues<'a> {
    pub q: f64,
    pub big_gamma: &'a [f64],
}

/// The pointwise optimality functional: the Hamiltonian gain of switching
/// the control to `u`, plus the half-squared diffusion and jump differences
/// weighted by the second adjoint. At an optimal control this is non-positive
/// for every `u` in the control set.
pub fn smp_functional(
    model: &ModelSpec,
    node: &NodePoint,
    u: f64,
    adj1: &FirstAdjointValues,
    adj2: &SecondAdjointValues,
) -> f64 {
    let (t, x, m, us) = (node.t, node.x, node.m, node.u_star);
    let df = (model.drift.eval)(t, x, m, u) - (model.drift.eval)(t, x, m, us);
    let dsig = (model.diffusion.eval)(t, x, m, u) - (model.diffusion.eval)(t, x, m, us);
    let dl = (model.running_cost.eval)(t, x, m, u) - (model.running_cost.eval)(t, x, m, us);
    let mut value = adj1.psi * df + adj1.k * dsig - dl + 0.5 * dsig * dsig * adj2.q;
    for (a, &(theta, w)) in model.jump_measure.atoms().iter().enumerate() {
        let dg = (model.jump.eval)(t, x, u, theta) - (model.jump.eval)(t, x, us, theta);
        value += w * (adj1.gamma[a] * dg + 0.5 * dg * dg * (adj2.q + adj2.big_gamma[a]));
    }
    value
}

/// One lattice entry of the verdict: the functional averaged over particles
/// at node `t_index` and mesh value `u_value`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SmpRow {
    pub t_index: usize,
    pub t: f64,
    pub u_value: f64,
    pub mean_lhs: f64,
}

/// The full lattice of averaged functional values with the worst case and
/// the pass decision, carrying its provenance.
#[derive(Clone, Debug, Serialize)]
pub struct SmpVerdict {
    pub rows: Vec<SmpRow>,
    pub worst: f64,
    pub worst_t: f64,
    pub worst_u: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
    pub n_particles: usize,
    pub n_steps: usize,
    pub u_mesh: usize,
}

/// Default verdict tolerance: two percent of the problem scale
/// `max(1, |J(candidate)|)`, absorbing time-discretization and regression
/// bias.
pub fn default_smp_tolerance(candidate_cost: f64) -> f64 {
    0.02 * candidate_cost.abs().max(1.0)
}

/// Simulates the candidate, solves both adjoints along it, and evaluates the
/// averaged optimality functional on a uniform control mesh at every grid
/// node. The verdict passes when the worst (largest) average stays at or
/// below the tolerance. A positive worst value on a suboptimal candidate is
/// informational: the principle is necessary, not sufficient.
pub fn verify_maximum_principle(
    model: &ModelSpec,
    candidate: &ControlProcess,
    n_particles: usize,
    n_steps: usize,
    u_mesh: usize,
    tolerance: f64,
    seed: u64,
) -> Result<SmpVerdict, SmpError> {
    if u_mesh < 2 {
        return Err(SmpError::MeshTooSmall(u_mesh));
    }
    let grid = TimeGrid::new(model.horizon.0, model.horizon.1, n_steps)
        .expect("horizon validated by the model");
    let streams = RngStreams::new(seed);
    let star = simulate_particles(model, candidate, &grid, n_particles, &streams)?;
    let (adj1, _) = solve_first_adjoint(model, &star, AdjointMethod::Regression)?;
    let (adj2, _) = solve_second_adjoint(model, &star, &adj1, AdjointMethod::Regression)?;
    let verdict =
        evaluate_verdict(model, &star, &adj1, &adj2, u_mesh, tolerance, seed)?;
    Ok(verdict)
}

/// Mesh evaluation along an already simulated candidate with solved
/// adjoints (shared by the public verifier and the orchestration layer).
pub fn evaluate_verdict(
    model: &ModelSpec,
    star: &ParticleEnsemble,
    adj1: &AdjointTriple,
    adj2: &SecondOrderAdjoint,
    u_mesh: usize,
    tolerance: f64,
    seed: u64,
) -> Result<SmpVerdict, SmpError> {
    if u_mesh < 2 {
        return Err(SmpError::MeshTooSmall(u_mesh));
    }
    let grid = star.grid;
    let n = star.n_particles();
    let n_steps = star.n_steps();
    let n_atoms = model.jump_measure.atoms().len();
    let (lo, hi) = (model.control_set.lo, model.control_set.hi);
    let mesh: Vec<f64> =
        (0..u_mesh).map(|j| lo + (hi - lo) * j as f64 / (u_mesh - 1) as f64).collect();

    let mut rows = Vec::with_capacity(n_steps * u_mesh);
    for i in 0..n_steps {
        let t = grid.node(i);
        let node_rows: Vec<SmpRow> = mesh
            .par_iter()
            .map(|&u| {
                let mut sum = 0.0;
                for j in 0..n {
                    let node = NodePoint {
                        t,
                        x: star.state(j, i),
                        m: star.mean[i],
                        u_star: star.control_value(j, i),
                    };
                    let a1 = FirstAdjointValues {
                        psi: adj1.psi[i][j],
                        k: adj1.k[i][j],
                        gamma: &adj1.gamma[i][j * n_atoms..j * n_atoms + n_atoms],
                    };
                    let a2 = SecondAdjointValues {
                        q: adj2.q[i][j],
                        big_gamma: &adj2.big_gamma[i][j * n_atoms..j * n_atoms + n_atoms],
                    };
                    sum += smp_functional(model, &node, u, &a1, &a2);
                }
                SmpRow { t_index: i, t, u_value: u, mean_lhs: sum / n as f64 }
            })
            .collect();
        rows.extend(node_rows);
    }

    let mut worst = f64::NEG_INFINITY;
    let mut worst_t = grid.node(0);
    let mut worst_u = mesh[0];
    for row in &rows {
        if row.mean_lhs > worst {
            worst = row.mean_lhs;
            worst_t = row.t;
            worst_u = row.u_value;
        }
    }
    Ok(SmpVerdict {
        rows,
        worst,
        worst_t,
        worst_u,
        tolerance,
        pass: worst <= tolerance,
        seed,
        n_particles: n,
        n_steps,
        u_mesh,
    })
}

/// Per-seed and pooled comparison of the spiked cost against the candidate
/// cost under common random numbers.
#[derive(Clone, Debug, Serialize)]
pub struct GapReport {
    pub per_seed: Vec<SeedGap>,
    /// Pooled mean of all per-particle cost differences.
    pub gap: f64,
    pub std_error: f64,
    pub n_total: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SeedGap {
    pub seed: u64,
    pub gap: f64,
}

/// Evaluates `J(spiked) - J(candidate)` pathwise under shared noise, per
/// seed, with the pooled standard error of the per-particle differences. At
/// an optimal candidate the pooled gap must not be significantly negative.
pub fn cost_gap(
    model: &ModelSpec,
    spike: &SpikeSpec,
    u_star: &ControlProcess,
    n_particles: usize,
    n_steps: usize,
    seeds: &[u64],
) -> Result<GapReport, SmpError> {
    let grid = TimeGrid::new(model.horizon.0, model.horizon.1, n_steps)
        .expect("horizon validated by the model");
    let perturbed = spike_control(u_star, spike, &grid, model)?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut pooled_sum = 0.0;
    let mut pooled_sq = 0.0;
    let mut n_total = 0usize;
    for &seed in seeds {
        let streams = RngStreams::new(seed);
        let star = simulate_particles(model, u_star, &grid, n_particles, &streams)?;
        let spiked = simulate_with_noise(model, &perturbed, star.noise.clone())?;
        let base_costs = particle_costs(model, &star);
        let spiked_costs = particle_costs(model, &spiked);
        let diffs: Vec<f64> =
            base_costs.iter().zip(&spiked_costs).map(|(b, s)| s - b).collect();
        let seed_gap = empirical_mean(&diffs);
        per_seed.push(SeedGap { seed, gap: seed_gap });
        for d in diffs {
            pooled_sum += d;
            pooled_sq += d * d;
            n_total += 1;
        }
    }
    let gap = pooled_sum / n_total as f64;
    let var = (pooled_sq - n_total as f64 * gap * gap) / (n_total - 1).max(1) as f64;
    let std_error = (var.max(0.0) / n_total as f64).sqrt();
    Ok(GapReport { per_seed, gap, std_error, n_total })
}

/// Outcome of the discretized-problem optimizer: the best control found, its
/// cost under the fixed optimization noise, and the cost trace.
#[derive(Clone)]
pub struct OptimumResult {
    pub control: ControlProcess,
    pub best_cost: f64,
    pub trace: Vec<f64>,
}

const FD_STEP: f64 = 1e-4;
const STALL_LIMIT: usize = 10;

/// Projected gradient descent on the per-interval control values of the
/// fully discretized problem: the descent direction comes from the adjoint
/// representation of the cost gradient (control derivative of the
/// Hamiltonian by central finite differences), the step adapts (grows 1.1x
/// on improvement, halves otherwise), everything runs under one fixed noise
/// draw, and the best iterate by cost is returned. Independent of the
/// verification lattice, so it can serve as its oracle.
pub fn find_optimum_oracle(
    model: &ModelSpec,
    n_particles: usize,
    n_steps: usize,
    seed: u64,
    iterations: usize,
) -> Result<OptimumResult, SmpError> {
    let grid = TimeGrid::new(model.horizon.0, model.horizon.1, n_steps)
        .expect("horizon validated by the model");
    let streams = RngStreams::new(seed);
    let noise =
        std::sync::Arc::new(sample_noise(&streams, &grid, &model.jump_measure, n_particles));
    let clamp = |u: f64| model.control_set.clamp(u);

    let cost_of = |values: &[f64]| -> Result<(f64, ParticleEnsemble), SmpError> {
        let control = ControlProcess::Piecewise(values.to_vec());
        let ens = simulate_with_noise(model, &control, noise.clone())?;
        let costs = particle_costs(model, &ens);
        Ok((empirical_mean(&costs), ens))
    };

    let mut u: Vec<f64> = vec![clamp(0.0); n_steps];
    let (mut current_cost, mut current_ens) = cost_of(&u)?;
    let mut best_u = u.clone();
    let mut best_cost = current_cost;
    let mut trace = vec![current_cost];
    let mut step = 0.5;
    let mut stall = 0usize;

    for _ in 0..iterations {
        let (adj1, _) = solve_first_adjoint(model, &current_ens, AdjointMethod::Regression)?;
        // Control gradient of the averaged Hamiltonian per interval, by
        // central differences in u around the current value.
        let grad: Vec<f64> = (0..n_steps)
            .into_par_iter()
            .map(|i| {
                let t = grid.node(i);
                let m = current_ens.mean[i];
                let n_atoms = model.jump_measure.atoms().len();
                let mut sum = 0.0;
                for j in 0..current_ens.n_particles() {
                    let x = current_ens.state(j, i);
                    let uc = current_ens.control_value(j, i);
                    let h_at = |uv: f64| -> f64 {
                        let mut h = adj1.psi[i][j] * (model.drift.eval)(t, x, m, uv)
                            + adj1.k[i][j] * (model.diffusion.eval)(t, x, m, uv)
                            - (model.running_cost.eval)(t, x, m, uv);
                        for (a, &(theta, w)) in model.jump_measure.atoms().iter().enumerate() {
                            h += w
                                * adj1.gamma[i][j * n_atoms + a]
                                * (model.jump.eval)(t, x, uv, theta);
                        }
                        h
                    };
                    sum += (h_at(uc + FD_STEP) - h_at(uc - FD_STEP)) / (2.0 * FD_STEP);
                }
                sum / current_ens.n_particles() as f64
            })
            .collect();

        // Ascend the Hamiltonian to descend the cost.
        let proposal: Vec<f64> =
            u.iter().zip(&grad).map(|(&ui, &gi)| clamp(ui + step * gi)).collect();
        let (proposal_cost, proposal_ens) = cost_of(&proposal)?;
        trace.push(proposal_cost);

        if proposal_cost < current_cost {
            u = proposal;
            current_cost = proposal_cost;
            current_ens = proposal_ens;
            step *= 1.1;
            stall = 0;
            if current_cost < best_cost {
                best_cost = current_cost;
                best_u = u.clone();
            }
        } else {
            step *= 0.5;
            stall += 1;
            if stall >= STALL_LIMIT {
                break;
            }
        }
    }

    Ok(OptimumResult { control: ControlProcess::Piecewise(best_u), best_cost, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::evaluate_cost;
    use crate::model::build_model;
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
            ("b2", 0.25),
            ("c", 0.25),
            ("c_bar", 0.1),
            ("d", 0.4),
            ("d2", 0.2),
            ("e", 0.2),
            ("e2", 0.1),
            ("kappa", 0.3),
            ("q", 0.8),
            ("q_bar", 0.4),
            ("r", 0.5),
            ("m", 0.9),
            ("m_bar", 0.4),
            ("zeta", 1.0),
        ])
    }

    #[test]
    fn functional_vanishes_exactly_at_the_candidate_value() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let node = NodePoint { t: 0.3, x: 1.2, m: 0.9, u_star: 0.25 };
        let gamma = [0.4, -0.2];
        let big_gamma = [0.1, 0.3];
        let a1 = FirstAdjointValues { psi: -0.8, k: 0.3, gamma: &gamma };
        let a2 = SecondAdjointValues { q: -1.1, big_gamma: &big_gamma };
        assert_eq!(smp_functional(&model, &node, 0.25, &a1, &a2), 0.0);
    }

    #[test]
    fn functional_reduces_to_the_cost_difference_with_zero_adjoints() {
        let mut model = build_model("zero", &BTreeMap::new()).unwrap();
        model.running_cost.eval = Arc::new(|_, _, _, u| 0.5 * u * u);
        let node = NodePoint { t: 0.0, x: 0.0, m: 0.0, u_star: 0.0 };
        let a1 = FirstAdjointValues { psi: 0.0, k: 0.0, gamma: &[] };
        let a2 = SecondAdjointValues { q: 0.0, big_gamma: &[] };
        let value = smp_functional(&model, &node, 1.0, &a1, &a2);
        assert!((value + 0.5).abs() < 1e-15, "value {value}");
    }

    #[test]
    fn zero_model_verdict_passes_with_zero_worst() {
        let model = build_model("zero", &params(&[("zeta", 1.0)])).unwrap();
        let verdict = verify_maximum_principle(
            &model,
            &ControlProcess::Constant(0.0),
            200,
            20,
            11,
            default_smp_tolerance(0.0),
            5,
        )
        .unwrap();
        assert_eq!(verdict.worst, 0.0);
        assert!(verdict.pass);
    }

    #[test]
    fn verdict_rejects_a_degenerate_mesh() {
        let model = build_model("zero", &BTreeMap::new()).unwrap();
        let result = verify_maximum_principle(
            &model,
            &ControlProcess::Constant(0.0),
            50,
            10,
            1,
            0.02,
            5,
        );
        assert!(matches!(result, Err(SmpError::MeshTooSmall(1))));
    }

    #[test]
    fn mesh_refinement_barely_moves_the_worst_value() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let worst = |mesh: usize| {
            verify_maximum_principle(
                &model,
                &ControlProcess::Constant(0.1),
                2000,
                50,
                mesh,
                0.02,
                11,
            )
            .unwrap()
            .worst
        };
        let coarse = worst(41);
        let fine = worst(81);
        assert!((coarse - fine).abs() < 1e-2, "{coarse} vs {fine}");
    }

    #[test]
    fn oracle_beats_both_constant_controls() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let result = find_optimum_oracle(&model, 2000, 50, 17, 60).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let streams = RngStreams::new(17);
        let noise =
            std::sync::Arc::new(sample_noise(&streams, &grid, &model.jump_measure, 2000));
        let cost_of = |control: &ControlProcess| {
            let ens = simulate_with_noise(&model, control, noise.clone()).unwrap();
            evaluate_cost(&model, &ens).mean
        };
        let at_zero = cost_of(&ControlProcess::Constant(0.0));
        let at_max = cost_of(&ControlProcess::Constant(model.control_set.hi));
        assert!(result.best_cost <= at_zero, "{} vs {}", result.best_cost, at_zero);
        assert!(result.best_cost <= at_max, "{} vs {}", result.best_cost, at_max);
        assert_eq!(result.trace[0], cost_of(&ControlProcess::Piecewise(vec![0.0; 50])));
    }

    #[test]
    fn doubling_iterations_leaves_the_cost_on_its_plateau() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let short = find_optimum_oracle(&model, 1500, 40, 19, 30).unwrap().best_cost;
        let long = find_optimum_oracle(&model, 1500, 40, 19, 60).unwrap().best_cost;
        let relative = (short - long).abs() / short.abs().max(1.0);
        assert!(relative < 1e-4, "plateau moved by {relative}");
    }

    #[test]
    fn degenerate_spike_gap_is_exactly_zero() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let spike = SpikeSpec { t0: 0.25, eps: 0.1, u_spike: 0.1 };
        let report =
            cost_gap(&model, &spike, &ControlProcess::Constant(0.1), 500, 40, &[1, 2, 3])
                .unwrap();
        assert_eq!(report.gap, 0.0);
        assert_eq!(report.std_error, 0.0);
        for seed_gap in &report.per_seed {
            assert_eq!(seed_gap.gap, 0.0);
        }
    }

    #[test]
    fn optimum_passes_the_verdict_and_the_extreme_control_does_not_look_optimal() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let optimum = find_optimum_oracle(&model, 4000, 50, 23, 80).unwrap();
        let tolerance = default_smp_tolerance(optimum.best_cost);
        let verdict = verify_maximum_principle(
            &model,
            &optimum.control,
            4000,
            50,
            41,
            tolerance,
            23,
        )
        .unwrap();
        assert!(
            verdict.pass,
            "worst {} at (t={}, u={}) vs tolerance {}",
            verdict.worst, verdict.worst_t, verdict.worst_u, verdict.tolerance
        );

        let at_max = verify_maximum_principle(
            &model,
            &ControlProcess::Constant(model.control_set.hi),
            4000,
            50,
            41,
            tolerance,
            23,
        )
        .unwrap();
        assert!(at_max.worst > 0.0, "worst at the extreme control {}", at_max.worst);
    }

    #[test]
    fn cost_gap_at_the_optimum_is_not_significantly_negative() {
        let model = build_model("lq_meanfield_jump", &lq_fixture()).unwrap();
        let optimum = find_optimum_oracle(&model, 2000, 50, 29, 60).unwrap();
        let spike = SpikeSpec { t0: 0.25, eps: 8.0 / 50.0, u_spike: 0.8 };
        let report = cost_gap(&model, &spike, &optimum.control, 2000, 50, &[31, 32, 33])
            .unwrap();
        assert!(
            report.gap >= -3.0 * report.std_error,
            "gap {} stderr {}",
            report.gap,
            report.std_error
        );
    }

    #[test]
    fn verdict_serializes_with_its_provenance() {
        let model = build_model("zero", &BTreeMap::new()).unwrap();
        let verdict = verify_maximum_principle(
            &model,
            &ControlProcess::Constant(0.0),
            50,
            10,
            5,
            0.02,
            77,
        )
        .unwrap();
        let json = serde_json::to_value(&verdict).unwrap();
        for key in ["seed", "n_particles", "n_steps", "u_mesh", "tolerance", "pass", "worst"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["seed"], 77);
        assert_eq!(json["u_mesh"], 5);
    }
}
