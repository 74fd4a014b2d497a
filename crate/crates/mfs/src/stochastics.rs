//! Noise infrastructure: time grids, counter-keyed random streams, Brownian
//! and Poisson sampling, compensated jump integrals, and a martingale moment
//! check.
//!
//! Every random draw is keyed by `(master_seed, particle, purpose, step)`.
//! A fresh generator is instantiated per key, so the draw for one particle
//! and step never depends on how many draws any other particle consumed.
//! This makes simulations reproducible across thread counts and lets callers
//! regenerate any slice of the noise on demand.

use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::JumpMeasureSpec;

/// Errors raised by the noise layer.
#[derive(Debug, Error)]
pub enum StochasticsError {
    #[error("time grid needs a positive step count, got 0")]
    EmptyGrid,
    #[error("time grid horizon is empty or non-finite: [{s}, {t_end}]")]
    BadHorizon { s: f64, t_end: f64 },
    #[error("coarsening factor {factor} does not divide the step count {n_steps}")]
    CoarsenFactor { factor: usize, n_steps: usize },
    #[error("moment check needs at least 100 trials, got {got}")]
    TooFewTrials { got: usize },
    #[error("moment check supports order p = 2 only, got {p}")]
    UnsupportedOrder { p: u32 },
}

/// Uniform grid `t_i = s + i*dt` on `[s, T]` with `t_M` pinned to `T`
/// exactly, so terminal-time logic never depends on accumulated rounding.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TimeGrid {
    s: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(s: f64, t_end: f64, n_steps: usize) -> Result<Self, StochasticsError> {
        if n_steps == 0 {
            return Err(StochasticsError::EmptyGrid);
        }
        if !(s.is_finite() && t_end.is_finite() && s < t_end) {
            return Err(StochasticsError::BadHorizon { s, t_end });
        }
        Ok(Self { s, t_end, n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.s) / self.n_steps as f64
    }

    pub fn start(&self) -> f64 {
        self.s
    }

    pub fn end(&self) -> f64 {
        self.t_end
    }

    /// Node `t_i`; `node(n_steps)` returns the right endpoint exactly.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        if i == self.n_steps {
            self.t_end
        } else {
            self.s + i as f64 * self.dt()
        }
    }

    /// Index of the grid node nearest to `t`, clamped into `0..=n_steps`.
    pub fn nearest_node(&self, t: f64) -> usize {
        let raw = ((t - self.s) / self.dt()).round();
        raw.clamp(0.0, self.n_steps as f64) as usize
    }
}

/// What a stream is consumed for. Keying the purpose separately keeps the
/// Brownian draws of a particle untouched when, say, its jump train is
/// resampled on a finer grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamPurpose {
    Brownian,
    Jump,
    /// Scratch randomness for optimizer probes and diagnostics.
    Probe,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Brownian => 1,
            StreamPurpose::Jump => 2,
            StreamPurpose::Probe => 3,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Factory of counter-keyed generators.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RngStreams {
    master_seed: u64,
}

impl RngStreams {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Fresh generator for `(particle, purpose, step)`. The key is absorbed
    /// into a 256-bit seed through a splitmix chain, so neighbouring keys
    /// yield statistically independent streams.
    pub fn stream(&self, particle: u64, purpose: StreamPurpose, step: u64) -> ChaCha8Rng {
        let mut state = self.master_seed;
        for word in [particle, purpose.tag(), step] {
            state ^= word.wrapping_mul(0xd6e8_feb8_6659_fd93);
            splitmix64(&mut state);
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// Jump events of one particle: `(step, atom)` pairs sorted by step, one
/// entry per event. The same step may appear multiple times.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JumpTrain {
    pub events: Vec<(u32, u32)>,
}

impl JumpTrain {
    /// Events falling into grid interval `step`, as a contiguous slice.
    pub fn events_in_step(&self, step: u32) -> &[(u32, u32)] {
        let lo = self.events.partition_point(|&(s, _)| s < step);
        let hi = self.events.partition_point(|&(s, _)| s <= step);
        &self.events[lo..hi]
    }
}

/// Brownian increments and jump trains for a whole particle system on one
/// grid. `dw[j][i]` is particle `j`'s increment over interval `i`.
#[derive(Clone, Debug)]
pub struct NoiseBundle {
    pub grid: TimeGrid,
    pub dw: Vec<Vec<f64>>,
    pub trains: Vec<JumpTrain>,
}

impl NoiseBundle {
    pub fn n_particles(&self) -> usize {
        self.dw.len()
    }

    /// Same noise seen on a grid coarsened by `factor`: Brownian increments
    /// are summed over blocks and jump events rebinned, so a simulation on
    /// the coarse grid is driven by the identical underlying paths.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseBundle, StochasticsError> {
        let n = self.grid.n_steps();
        if factor == 0 || n % factor != 0 {
            return Err(StochasticsError::CoarsenFactor { factor, n_steps: n });
        }
        let grid = TimeGrid::new(self.grid.start(), self.grid.end(), n / factor)?;
        let dw = self
            .dw
            .iter()
            .map(|path| {
                path.chunks_exact(factor).map(|block| block.iter().sum()).collect()
            })
            .collect();
        let trains = self
            .trains
            .iter()
            .map(|train| JumpTrain {
                events: train
                    .events
                    .iter()
                    .map(|&(step, atom)| (step / factor as u32, atom))
                    .collect(),
            })
            .collect();
        Ok(NoiseBundle { grid, dw, trains })
    }
}

/// Brownian increments of one particle: `dw_i ~ Normal(0, dt)`, one draw per
/// interval from the interval's own stream.
pub fn sample_brownian_increments(
    streams: &RngStreams,
    grid: &TimeGrid,
    particle: u64,
) -> Vec<f64> {
    let sqrt_dt = grid.dt().sqrt();
    (0..grid.n_steps())
        .map(|i| {
            let mut rng = streams.stream(particle, StreamPurpose::Brownian, i as u64);
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sqrt_dt
        })
        .collect()
}

/// Jump train of one particle: per interval and atom, a Poisson count with
/// mean `w_k * dt`, recorded as individual events.
pub fn sample_jump_train(
    streams: &RngStreams,
    grid: &TimeGrid,
    measure: &JumpMeasureSpec,
    particle: u64,
) -> JumpTrain {
    if measure.is_empty() {
        return JumpTrain::default();
    }
    let dt = grid.dt();
    let mut events = Vec::new();
    for i in 0..grid.n_steps() {
        let mut rng = streams.stream(particle, StreamPurpose::Jump, i as u64);
        for (k, &(_theta, w)) in measure.atoms().iter().enumerate() {
            let count = Poisson::new(w * dt)
                .expect("atom weights are validated strictly positive")
                .sample(&mut rng) as u64;
            for _ in 0..count {
                events.push((i as u32, k as u32));
            }
        }
    }
    JumpTrain { events }
}

/// Noise for a full particle system. Particles are independent, so the loop
/// parallelizes; the counter-keyed streams make the result identical for any
/// thread count.
pub fn sample_noise(
    streams: &RngStreams,
    grid: &TimeGrid,
    measure: &JumpMeasureSpec,
    n_particles: usize,
) -> NoiseBundle {
    let dw: Vec<Vec<f64>> = (0..n_particles)
        .into_par_iter()
        .map(|j| sample_brownian_increments(streams, grid, j as u64))
        .collect();
    let trains: Vec<JumpTrain> = (0..n_particles)
        .into_par_iter()
        .map(|j| sample_jump_train(streams, grid, measure, j as u64))
        .collect();
    NoiseBundle { grid: *grid, dw, trains }
}

/// Integral of a deterministic `phi(theta)` against one particle's
/// compensated jump measure over the whole horizon:
/// `sum_events phi(theta) - (T - s) * integral(phi d-measure)`.
/// A martingale increment, so its expectation is zero.
pub fn compensated_integral(
    phi: impl Fn(f64) -> f64,
    train: &JumpTrain,
    measure: &JumpMeasureSpec,
    grid: &TimeGrid,
) -> f64 {
    let atoms = measure.atoms();
    let event_sum: f64 = train.events.iter().map(|&(_, k)| phi(atoms[k as usize].0)).sum();
    event_sum - (grid.end() - grid.start()) * measure.integrate(&phi)
}

/// Result of the second-moment martingale check.
#[derive(Clone, Debug, Serialize)]
pub struct BdgReport {
    pub p: u32,
    pub n_trials: usize,
    /// Monte Carlo estimate of `E[sup_t |M_t|^2]`.
    pub lhs: f64,
    /// Exact `E[integral of phi^2 d-measure dt]` for deterministic `phi`.
    pub rhs: f64,
    /// `lhs / rhs`; `None` when the integrand is identically zero and the
    /// bound degenerates to `0 <= 0`.
    pub ratio: Option<f64>,
}

/// Estimates `E[sup_t |M_t|^2] / E[int phi^2 d-mu dt]` for the compensated
/// integral `M_t` of a deterministic integrand `phi(t, theta)`, by simulating
/// `n_trials` independent trains. Only the order `p = 2` is supported; the
/// theoretical constant at that order is 4.
pub fn check_bdg_moment(
    phi: impl Fn(f64, f64) -> f64,
    measure: &JumpMeasureSpec,
    grid: &TimeGrid,
    p: u32,
    n_trials: usize,
    streams: &RngStreams,
) -> Result<BdgReport, StochasticsError> {
    if p != 2 {
        return Err(StochasticsError::UnsupportedOrder { p });
    }
    if n_trials < 100 {
        return Err(StochasticsError::TooFewTrials { got: n_trials });
    }
    let dt = grid.dt();
    let atoms = measure.atoms();

    // Deterministic integrand: the right-hand side is a plain quadrature.
    let rhs: f64 = (0..grid.n_steps())
        .map(|i| {
            let t = grid.node(i);
            dt * measure.integrate(|theta| phi(t, theta).powi(2))
        })
        .sum();

    let sup_sq_sum: f64 = (0..n_trials)
        .map(|trial| {
            let train = sample_jump_train(streams, grid, measure, trial as u64);
            let mut m = 0.0f64;
            let mut sup_sq = 0.0f64;
            for i in 0..grid.n_steps() {
                let t = grid.node(i);
                for &(_, k) in train.events_in_step(i as u32) {
                    m += phi(t, atoms[k as usize].0);
                }
                m -= dt * measure.integrate(|theta| phi(t, theta));
                sup_sq = sup_sq.max(m * m);
            }
            sup_sq
        })
        .sum();
    let lhs = sup_sq_sum / n_trials as f64;

    let ratio = if rhs == 0.0 { None } else { Some(lhs / rhs) };
    Ok(BdgReport { p, n_trials, lhs, rhs, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_atom_measure() -> JumpMeasureSpec {
        JumpMeasureSpec::new(vec![(1.0, 0.5), (-1.0, 1.5)]).unwrap()
    }

    #[test]
    fn grid_pins_endpoint_and_keeps_uniform_steps() {
        let grid = TimeGrid::new(0.1, 0.93, 7).unwrap();
        assert_eq!(grid.node(7), 0.93);
        assert_eq!(grid.node(0), 0.1);
        for i in 0..7 {
            assert!(grid.node(i) < grid.node(i + 1));
        }
        assert!((grid.dt() * 7.0 - 0.83).abs() < 1e-15);
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
    }

    #[test]
    fn nearest_node_rounds_and_clamps() {
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert_eq!(grid.nearest_node(0.0), 0);
        assert_eq!(grid.nearest_node(0.24), 2);
        assert_eq!(grid.nearest_node(0.26), 3);
        assert_eq!(grid.nearest_node(-5.0), 0);
        assert_eq!(grid.nearest_node(5.0), 10);
    }

    #[test]
    fn streams_are_reproducible_and_key_sensitive() {
        use rand::RngCore;
        let streams = RngStreams::new(42);
        let draw = |p, purpose, step| streams.stream(p, purpose, step).next_u64();
        assert_eq!(
            draw(3, StreamPurpose::Brownian, 17),
            draw(3, StreamPurpose::Brownian, 17)
        );
        assert_ne!(
            draw(3, StreamPurpose::Brownian, 17),
            draw(3, StreamPurpose::Jump, 17)
        );
        assert_ne!(
            draw(3, StreamPurpose::Brownian, 17),
            draw(4, StreamPurpose::Brownian, 17)
        );
        assert_ne!(
            draw(3, StreamPurpose::Brownian, 17),
            draw(3, StreamPurpose::Brownian, 18)
        );
        assert_ne!(
            RngStreams::new(43).stream(3, StreamPurpose::Brownian, 17).next_u64(),
            draw(3, StreamPurpose::Brownian, 17)
        );
    }

    #[test]
    fn sampling_one_particle_matches_the_bundle() {
        // Scheduling independence: a particle's noise does not depend on which
        // other particles were sampled, or in which order.
        let streams = RngStreams::new(7);
        let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let measure = two_atom_measure();
        let bundle = sample_noise(&streams, &grid, &measure, 16);
        assert_eq!(bundle.dw[5], sample_brownian_increments(&streams, &grid, 5));
        assert_eq!(bundle.trains[11], sample_jump_train(&streams, &grid, &measure, 11));
    }

    #[test]
    fn brownian_increments_have_the_right_variance() {
        let streams = RngStreams::new(2024);
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let n = 1000;
        let bundle = sample_noise(&streams, &grid, &JumpMeasureSpec::empty(), n);
        let dt = grid.dt();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let count = (n * grid.n_steps()) as f64;
        for path in &bundle.dw {
            for &dw in path {
                sum += dw;
                sum_sq += dw * dw;
            }
        }
        // Normalized second moment is chi-square with 50_000 degrees of
        // freedom: relative deviation beyond 4*sqrt(2/n) is a failure.
        let mean = sum / count;
        let var_ratio = sum_sq / (count * dt);
        assert!(mean.abs() < 4.0 * (dt / count).sqrt(), "mean {mean}");
        let band = 4.0 * (2.0 / count).sqrt();
        assert!((var_ratio - 1.0).abs() < band, "variance ratio {var_ratio}");
    }

    #[test]
    fn jump_counts_and_marks_match_the_measure() {
        let streams = RngStreams::new(99);
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let measure = two_atom_measure();
        let n = 10_000;
        let mut total = 0u64;
        let mut atom1 = 0u64;
        for j in 0..n {
            let train = sample_jump_train(&streams, &grid, &measure, j);
            total += train.events.len() as u64;
            atom1 += train.events.iter().filter(|&&(_, k)| k == 1).count() as u64;
        }
        // Total event count is Poisson with mean 2 per particle.
        let mean_count = total as f64 / n as f64;
        let count_band = 3.0 * (2.0 / n as f64).sqrt();
        assert!((mean_count - 2.0).abs() < count_band, "mean count {mean_count}");
        // Each event lands on atom 1 with probability w1/(w0+w1) = 0.75.
        let frac = atom1 as f64 / total as f64;
        let frac_band = 3.0 * (0.75f64 * 0.25 / total as f64).sqrt();
        assert!((frac - 0.75).abs() < frac_band, "atom fraction {frac}");
    }

    #[test]
    fn empty_measure_yields_no_events() {
        let streams = RngStreams::new(1);
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let train = sample_jump_train(&streams, &grid, &JumpMeasureSpec::empty(), 0);
        assert!(train.events.is_empty());
    }

    #[test]
    fn compensated_integral_is_centered_with_exact_variance() {
        let streams = RngStreams::new(314);
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let measure = JumpMeasureSpec::new(vec![(1.0, 0.5), (-1.0, 0.5)]).unwrap();
        let n = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for j in 0..n {
            let train = sample_jump_train(&streams, &grid, &measure, j);
            let m = compensated_integral(|theta| theta, &train, &measure, &grid);
            sum += m;
            sum_sq += m * m;
        }
        let mean = sum / n as f64;
        let second = sum_sq / n as f64;
        // Var = (T - s) * integral of theta^2 d-measure = 1; the second
        // moment of M^2 for this compound Poisson difference is 10, which
        // sets the standard error band.
        let stderr_mean = (1.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * stderr_mean, "mean {mean}");
        let stderr_second = ((10.0 - 1.0) / n as f64).sqrt();
        assert!((second - 1.0).abs() < 4.0 * stderr_second, "second moment {second}");
    }

    #[test]
    fn moment_check_respects_the_theoretical_constant() {
        let streams = RngStreams::new(555);
        let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
        let measure = JumpMeasureSpec::new(vec![(1.0, 1.0)]).unwrap();
        let report =
            check_bdg_moment(|_t, _theta| 1.0, &measure, &grid, 2, 10_000, &streams).unwrap();
        assert_eq!(report.rhs, 1.0);
        let ratio = report.ratio.unwrap();
        assert!(ratio <= 4.2, "ratio {ratio}");
        assert!(ratio > 0.5, "ratio suspiciously small: {ratio}");
    }

    #[test]
    fn moment_check_flags_degenerate_integrand() {
        let streams = RngStreams::new(556);
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let measure = JumpMeasureSpec::new(vec![(1.0, 1.0)]).unwrap();
        let report =
            check_bdg_moment(|_, _| 0.0, &measure, &grid, 2, 200, &streams).unwrap();
        assert!(report.ratio.is_none());
        assert_eq!(report.lhs, 0.0);
    }

    #[test]
    fn moment_check_rejects_bad_arguments() {
        let streams = RngStreams::new(557);
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let measure = JumpMeasureSpec::new(vec![(1.0, 1.0)]).unwrap();
        assert!(matches!(
            check_bdg_moment(|_, _| 1.0, &measure, &grid, 2, 50, &streams),
            Err(StochasticsError::TooFewTrials { got: 50 })
        ));
        assert!(matches!(
            check_bdg_moment(|_, _| 1.0, &measure, &grid, 4, 200, &streams),
            Err(StochasticsError::UnsupportedOrder { p: 4 })
        ));
    }

    #[test]
    fn coarsening_rejects_non_divisors() {
        let streams = RngStreams::new(5);
        let grid = TimeGrid::new(0.0, 1.0, 12).unwrap();
        let bundle = sample_noise(&streams, &grid, &JumpMeasureSpec::empty(), 2);
        assert!(bundle.coarsen(5).is_err());
        assert!(bundle.coarsen(0).is_err());
        assert!(bundle.coarsen(3).is_ok());
    }

    proptest! {
        #[test]
        fn coarsening_preserves_displacement_and_events(
            seed in 0u64..1000,
            factor_pow in 0u32..4,
            n_particles in 1usize..6,
        ) {
            let streams = RngStreams::new(seed);
            let grid = TimeGrid::new(0.0, 1.0, 64).unwrap();
            let measure = two_atom_measure();
            let bundle = sample_noise(&streams, &grid, &measure, n_particles);
            let factor = 1usize << factor_pow;
            let coarse = bundle.coarsen(factor).unwrap();
            prop_assert_eq!(coarse.grid.n_steps(), 64 / factor);
            for j in 0..n_particles {
                let fine_total: f64 = bundle.dw[j].iter().sum();
                let coarse_total: f64 = coarse.dw[j].iter().sum();
                prop_assert!((fine_total - coarse_total).abs() < 1e-12);
                prop_assert_eq!(coarse.trains[j].events.len(), bundle.trains[j].events.len());
                // Rebinned steps stay sorted and within the coarse grid.
                let steps: Vec<u32> = coarse.trains[j].events.iter().map(|e| e.0).collect();
                prop_assert!(steps.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(steps.iter().all(|&s| (s as usize) < coarse.grid.n_steps()));
            }
        }

        #[test]
        fn compensated_constant_counts_events(seed in 0u64..500) {
            let streams = RngStreams::new(seed);
            let grid = TimeGrid::new(0.0, 2.0, 32).unwrap();
            let measure = two_atom_measure();
            let train = sample_jump_train(&streams, &grid, &measure, 0);
            let m = compensated_integral(|_| 1.0, &train, &measure, &grid);
            let expected = train.events.len() as f64 - 2.0 * measure.total_mass();
            prop_assert!((m - expected).abs() < 1e-12);
        }
    }
}
