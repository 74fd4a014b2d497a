//! Model primitives: coefficient sets with analytic derivatives, finite
//! atomic jump measures, admissible controls, builtin model families, and
//! an empirical probe of the standing regularity hypotheses.
//!
//! A model consists of drift `f(t, x, y, u)`, diffusion `sigma(t, x, y, u)`,
//! jump amplitude `g(t, x, u, theta)`, running cost `l(t, x, y, u)` and
//! terminal cost `h(x, y)`, where `y` stands for the population mean that the
//! particle system feeds back into each coefficient. Derivatives are supplied
//! analytically by the family constructors; nothing is differentiated
//! numerically at runtime (the probe uses finite differences only to audit
//! the supplied callbacks).

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

/// Scalar coefficient of `(t, x, y, u)`.
pub type StateCoeffFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// Jump coefficient of `(t, x, u, theta)`.
pub type JumpCoeffFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;
/// Terminal coefficient of `(x, y)`.
pub type TerminalFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
/// Feedback control law `(t, x, y) -> u`.
pub type FeedbackFn = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;

/// Errors raised while building or validating models.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model family `{0}`")]
    UnknownFamily(String),
    #[error("family `{family}` is missing required parameter `{key}`")]
    MissingParam { family: &'static str, key: &'static str },
    #[error("family `{family}` does not accept parameter `{key}`")]
    UnknownParam { family: &'static str, key: String },
    #[error("control interval is empty (u_min {lo} > u_max {hi})")]
    EmptyControlInterval { lo: f64, hi: f64 },
    #[error("invalid horizon: start {s} must be strictly below end {t_end}")]
    InvalidHorizon { s: f64, t_end: f64 },
    #[error("invalid jump measure: {0}")]
    InvalidJumpMeasure(String),
    #[error("piecewise control has {got} values but the grid has {expected} intervals")]
    PiecewiseLength { expected: usize, got: usize },
    #[error("spiking a feedback control is unsupported; materialize it as a piecewise control first")]
    FeedbackSpike,
}

/// Finite atomic jump measure: atoms `theta_i` with strictly positive
/// weights `w_i`. An empty atom list models a jump-free dynamic and carries
/// total mass zero.
#[derive(Clone, Debug, Serialize)]
pub struct JumpMeasureSpec {
    atoms: Vec<(f64, f64)>,
    total_mass: f64,
}

impl JumpMeasureSpec {
    /// Builds a measure from `(theta, weight)` atoms.
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        for &(theta, w) in &atoms {
            if !theta.is_finite() || !w.is_finite() {
                return Err(ModelError::InvalidJumpMeasure(format!(
                    "non-finite atom ({theta}, {w})"
                )));
            }
            if w <= 0.0 {
                return Err(ModelError::InvalidJumpMeasure(format!(
                    "atom weight must be strictly positive, got {w}"
                )));
            }
        }
        let total_mass = atoms.iter().map(|&(_, w)| w).sum();
        Ok(Self { atoms, total_mass })
    }

    /// Jump-free measure (no atoms, total mass zero).
    pub fn empty() -> Self {
        Self { atoms: Vec::new(), total_mass: 0.0 }
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Exact integral of `phi` against the measure: `sum_i w_i phi(theta_i)`.
    pub fn integrate(&self, phi: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|&(theta, w)| w * phi(theta)).sum()
    }
}

/// Admissible control interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ControlSet {
    pub lo: f64,
    pub hi: f64,
}

impl ControlSet {
    pub fn new(lo: f64, hi: f64) -> Result<Self, ModelError> {
        if !(lo <= hi) {
            return Err(ModelError::EmptyControlInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.lo, self.hi)
    }

    pub fn contains(&self, u: f64) -> bool {
        self.lo <= u && u <= self.hi
    }
}

/// A state coefficient together with its first and second derivatives in the
/// state `x` and the mean argument `y`.
#[derive(Clone)]
pub struct CoeffSet {
    pub eval: StateCoeffFn,
    pub dx: StateCoeffFn,
    pub dy: StateCoeffFn,
    pub dxx: StateCoeffFn,
    pub dxy: StateCoeffFn,
    pub dyy: StateCoeffFn,
}

fn state_const(v: f64) -> StateCoeffFn {
    Arc::new(move |_, _, _, _| v)
}

impl CoeffSet {
    /// Coefficient identically zero (all derivatives zero).
    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// Constant coefficient (derivatives zero).
    pub fn constant(v: f64) -> Self {
        Self {
            eval: state_const(v),
            dx: state_const(0.0),
            dy: state_const(0.0),
            dxx: state_const(0.0),
            dxy: state_const(0.0),
            dyy: state_const(0.0),
        }
    }
}

/// Jump coefficient with its state derivatives.
#[derive(Clone)]
pub struct JumpCoeffSet {
    pub eval: JumpCoeffFn,
    pub dx: JumpCoeffFn,
    pub dxx: JumpCoeffFn,
}

fn jump_const(v: f64) -> JumpCoeffFn {
    Arc::new(move |_, _, _, _| v)
}

impl JumpCoeffSet {
    pub fn zero() -> Self {
        Self { eval: jump_const(0.0), dx: jump_const(0.0), dxx: jump_const(0.0) }
    }
}

/// Terminal cost with first and second derivatives in `(x, y)`.
#[derive(Clone)]
pub struct TerminalSet {
    pub eval: TerminalFn,
    pub dx: TerminalFn,
    pub dy: TerminalFn,
    pub dxx: TerminalFn,
    pub dxy: TerminalFn,
    pub dyy: TerminalFn,
}

fn terminal_const(v: f64) -> TerminalFn {
    Arc::new(move |_, _| v)
}

impl TerminalSet {
    pub fn zero() -> Self {
        Self {
            eval: terminal_const(0.0),
            dx: terminal_const(0.0),
            dy: terminal_const(0.0),
            dxx: terminal_const(0.0),
            dxy: terminal_const(0.0),
            dyy: terminal_const(0.0),
        }
    }
}

/// Complete problem description for one model.
#[derive(Clone)]
pub struct ModelSpec {
    /// Family label echoed into reports.
    pub family: String,
    /// Time horizon `(s, T)` with `s < T`.
    pub horizon: (f64, f64),
    /// Deterministic initial state shared by every particle.
    pub initial_state: f64,
    /// Admissible control interval.
    pub control_set: ControlSet,
    /// Drift `f(t, x, y, u)`.
    pub drift: CoeffSet,
    /// Diffusion `sigma(t, x, y, u)`.
    pub diffusion: CoeffSet,
    /// Jump amplitude `g(t, x, u, theta)`.
    pub jump: JumpCoeffSet,
    /// Running cost `l(t, x, y, u)`.
    pub running_cost: CoeffSet,
    /// Terminal cost `h(x, y)`.
    pub terminal_cost: TerminalSet,
    /// Jump measure driving the Poisson random measure.
    pub jump_measure: JumpMeasureSpec,
    /// Whether the first-order adjoint equation has deterministic
    /// coefficients and terminal value along any simulated trajectory, so the
    /// backward-Euler scalar solver applies.
    pub deterministic_first_adjoint: bool,
    /// Same for the second-order adjoint equation.
    pub deterministic_second_adjoint: bool,
}

impl ModelSpec {
    /// Structural validation (horizon, control interval, measure).
    pub fn validate(&self) -> Result<(), ModelError> {
        let (s, t_end) = self.horizon;
        if !(s.is_finite() && t_end.is_finite() && s < t_end) {
            return Err(ModelError::InvalidHorizon { s, t_end });
        }
        if !(self.control_set.lo <= self.control_set.hi) {
            return Err(ModelError::EmptyControlInterval {
                lo: self.control_set.lo,
                hi: self.control_set.hi,
            });
        }
        Ok(())
    }
}

/// Control process evaluated along the grid. Every emitted value is clamped
/// into the admissible interval.
#[derive(Clone)]
pub enum ControlProcess {
    /// One value for the whole horizon.
    Constant(f64),
    /// One value per grid interval, left-continuous.
    Piecewise(Vec<f64>),
    /// State feedback `u(t, x, y)`.
    Feedback(FeedbackFn),
}

impl ControlProcess {
    /// Value applied on interval `i` (left node `t`, state `x`, mean `y`).
    pub fn value(&self, i: usize, t: f64, x: f64, y: f64, bounds: ControlSet) -> f64 {
        let raw = match self {
            ControlProcess::Constant(u) => *u,
            ControlProcess::Piecewise(vals) => vals[i],
            ControlProcess::Feedback(law) => law(t, x, y),
        };
        bounds.clamp(raw)
    }

    /// Whether the value depends on the particle state (and therefore must be
    /// traced per particle).
    pub fn is_feedback(&self) -> bool {
        matches!(self, ControlProcess::Feedback(_))
    }

    /// Checks a piecewise control against the number of grid intervals.
    pub fn validate_len(&self, intervals: usize) -> Result<(), ModelError> {
        if let ControlProcess::Piecewise(vals) = self {
            if vals.len() != intervals {
                return Err(ModelError::PiecewiseLength { expected: intervals, got: vals.len() });
            }
        }
        Ok(())
    }
}

const COMMON_KEYS: [&str; 5] = ["s", "T", "zeta", "u_min", "u_max"];

struct ParamReader<'a> {
    family: &'static str,
    params: &'a BTreeMap<String, f64>,
}

impl<'a> ParamReader<'a> {
    fn require(&self, key: &'static str) -> Result<f64, ModelError> {
        self.params
            .get(key)
            .copied()
            .ok_or(ModelError::MissingParam { family: self.family, key })
    }

    fn optional(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), ModelError> {
        for key in self.params.keys() {
            if !allowed.contains(&key.as_str()) && !COMMON_KEYS.contains(&key.as_str()) {
                return Err(ModelError::UnknownParam {
                    family: self.family,
                    key: key.clone(),
                });
            }
        }
        Ok(())
    }

    fn horizon(&self) -> Result<(f64, f64), ModelError> {
        let s = self.optional("s", 0.0);
        let t_end = self.optional("T", 1.0);
        if !(s.is_finite() && t_end.is_finite() && s < t_end) {
            return Err(ModelError::InvalidHorizon { s, t_end });
        }
        Ok((s, t_end))
    }

    fn control_set(&self) -> Result<ControlSet, ModelError> {
        ControlSet::new(self.optional("u_min", -1.0), self.optional("u_max", 1.0))
    }
}

/// Parameters of the linear-quadratic mean-field jump family.
#[derive(Clone, Copy)]
struct LqParams {
    a: f64,
    a_bar: f64,
    b: f64,
    b2: f64,
    c: f64,
    c_bar: f64,
    d: f64,
    d2: f64,
    e: f64,
    e2: f64,
    kappa: f64,
    q: f64,
    q_bar: f64,
    r: f64,
    m: f64,
    m_bar: f64,
}

/// Builds one of the builtin families.
///
/// * `"zero"` — every coefficient identically zero.
/// * `"drift_only"` — constant drift `v`, no noise, no cost.
/// * `"lq_meanfield_jump"` — linear dynamics, quadratic costs:
///   `f = (a + b2*u)x + a_bar*y + b*u`, `sigma = (c + d2*u)x + c_bar*y + d*u`,
///   `g = theta*((e + e2*u)x + kappa*u)`, `l = (q*x^2 + q_bar*y^2 + r*u^2)/2`,
///   `h = (m*x^2 + m_bar*y^2)/2`. The bilinear terms `b2, d2, e2` default to
///   zero. Jump atoms default to `{(+1, 0.5), (-1, 0.5)}` and can be replaced
///   via `theta1..theta4`/`w1..w4` or removed with `no_jumps = 1`.
///
/// Common optional keys for every family: `s`, `T` (horizon, default `(0,1)`),
/// `zeta` (initial state), `u_min`, `u_max` (control interval, default
/// `[-1, 1]`).
pub fn build_model(name: &str, params: &BTreeMap<String, f64>) -> Result<ModelSpec, ModelError> {
    match name {
        "zero" => build_zero(params),
        "drift_only" => build_drift_only(params),
        "lq_meanfield_jump" => build_lq(params),
        other => Err(ModelError::UnknownFamily(other.to_string())),
    }
}

fn build_zero(params: &BTreeMap<String, f64>) -> Result<ModelSpec, ModelError> {
    let reader = ParamReader { family: "zero", params };
    reader.check_keys(&[])?;
    Ok(ModelSpec {
        family: "zero".into(),
        horizon: reader.horizon()?,
        initial_state: reader.optional("zeta", 0.0),
        control_set: reader.control_set()?,
        drift: CoeffSet::zero(),
        diffusion: CoeffSet::zero(),
        jump: JumpCoeffSet::zero(),
        running_cost: CoeffSet::zero(),
        terminal_cost: TerminalSet::zero(),
        jump_measure: JumpMeasureSpec::empty(),
        deterministic_first_adjoint: true,
        deterministic_second_adjoint: true,
    })
}

fn build_drift_only(params: &BTreeMap<String, f64>) -> Result<ModelSpec, ModelError> {
    let reader = ParamReader { family: "drift_only", params };
    reader.check_keys(&["v"])?;
    let v = reader.require("v")?;
    Ok(ModelSpec {
        family: "drift_only".into(),
        horizon: reader.horizon()?,
        initial_state: reader.optional("zeta", 0.0),
        control_set: reader.control_set()?,
        drift: CoeffSet::constant(v),
        diffusion: CoeffSet::zero(),
        jump: JumpCoeffSet::zero(),
        running_cost: CoeffSet::zero(),
        terminal_cost: TerminalSet::zero(),
        jump_measure: JumpMeasureSpec::empty(),
        deterministic_first_adjoint: true,
        deterministic_second_adjoint: true,
    })
}

fn lq_measure(reader: &ParamReader) -> Result<JumpMeasureSpec, ModelError> {
    if reader.optional("no_jumps", 0.0) != 0.0 {
        return Ok(JumpMeasureSpec::empty());
    }
    let mut atoms = Vec::new();
    for i in 1..=4 {
        let theta_key = format!("theta{i}");
        let w_key = format!("w{i}");
        match (reader.params.get(&theta_key), reader.params.get(&w_key)) {
            (Some(&theta), Some(&w)) => atoms.push((theta, w)),
            (None, None) => {}
            _ => {
                return Err(ModelError::InvalidJumpMeasure(format!(
                    "atom {i} needs both `{theta_key}` and `{w_key}`"
                )))
            }
        }
    }
    if atoms.is_empty() {
        atoms = vec![(1.0, 0.5), (-1.0, 0.5)];
    }
    JumpMeasureSpec::new(atoms)
}

fn build_lq(params: &BTreeMap<String, f64>) -> Result<ModelSpec, ModelError> {
    let reader = ParamReader { family: "lq_meanfield_jump", params };
    reader.check_keys(&[
        "a", "a_bar", "b", "b2", "c", "c_bar", "d", "d2", "e", "e2", "kappa", "q", "q_bar", "r",
        "m", "m_bar", "no_jumps", "theta1", "w1", "theta2", "w2", "theta3", "w3", "theta4", "w4",
    ])?;
    let p = LqParams {
        a: reader.require("a")?,
        a_bar: reader.require("a_bar")?,
        b: reader.require("b")?,
        b2: reader.optional("b2", 0.0),
        c: reader.require("c")?,
        c_bar: reader.require("c_bar")?,
        d: reader.require("d")?,
        d2: reader.optional("d2", 0.0),
        e: reader.require("e")?,
        e2: reader.optional("e2", 0.0),
        kappa: reader.require("kappa")?,
        q: reader.require("q")?,
        q_bar: reader.require("q_bar")?,
        r: reader.require("r")?,
        m: reader.require("m")?,
        m_bar: reader.require("m_bar")?,
    };

    let drift = CoeffSet {
        eval: Arc::new(move |_t, x, y, u| (p.a + p.b2 * u) * x + p.a_bar * y + p.b * u),
        dx: Arc::new(move |_t, _x, _y, u| p.a + p.b2 * u),
        dy: state_const(p.a_bar),
        dxx: state_const(0.0),
        dxy: state_const(0.0),
        dyy: state_const(0.0),
    };
    let diffusion = CoeffSet {
        eval: Arc::new(move |_t, x, y, u| (p.c + p.d2 * u) * x + p.c_bar * y + p.d * u),
        dx: Arc::new(move |_t, _x, _y, u| p.c + p.d2 * u),
        dy: state_const(p.c_bar),
        dxx: state_const(0.0),
        dxy: state_const(0.0),
        dyy: state_const(0.0),
    };
    let jump = JumpCoeffSet {
        eval: Arc::new(move |_t, x, u, theta| theta * ((p.e + p.e2 * u) * x + p.kappa * u)),
        dx: Arc::new(move |_t, _x, u, theta| theta * (p.e + p.e2 * u)),
        dxx: jump_const(0.0),
    };
    let running_cost = CoeffSet {
        eval: Arc::new(move |_t, x, y, u| {
            0.5 * (p.q * x * x + p.q_bar * y * y + p.r * u * u)
        }),
        dx: Arc::new(move |_t, x, _y, _u| p.q * x),
        dy: Arc::new(move |_t, _x, y, _u| p.q_bar * y),
        dxx: state_const(p.q),
        dxy: state_const(0.0),
        dyy: state_const(p.q_bar),
    };
    let terminal_cost = TerminalSet {
        eval: Arc::new(move |x, y| 0.5 * (p.m * x * x + p.m_bar * y * y)),
        dx: Arc::new(move |x, _y| p.m * x),
        dy: Arc::new(move |_x, y| p.m_bar * y),
        dxx: terminal_const(p.m),
        dxy: terminal_const(0.0),
        dyy: terminal_const(p.m_bar),
    };

    Ok(ModelSpec {
        family: "lq_meanfield_jump".into(),
        horizon: reader.horizon()?,
        initial_state: reader.optional("zeta", 1.0),
        control_set: reader.control_set()?,
        drift,
        diffusion,
        jump,
        running_cost,
        terminal_cost,
        jump_measure: lq_measure(&reader)?,
        // The scalar backward solver needs deterministic driver and terminal
        // values: l_x = q*x and h_x = m*x must not depend on the particle.
        deterministic_first_adjoint: p.q == 0.0 && p.m == 0.0,
        // All second state derivatives vanish, so the second-order driver and
        // terminal value are deterministic for every parameter choice.
        deterministic_second_adjoint: true,
    })
}

/// Sampling box for the hypothesis probe. Controls are sampled from the
/// model's admissible interval and times from its horizon.
#[derive(Clone, Copy, Debug)]
pub struct ProbeBox {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Default for ProbeBox {
    fn default() -> Self {
        Self { x: (-2.0, 2.0), y: (-2.0, 2.0) }
    }
}

/// One audited derivative: worst relative mismatch between the supplied
/// callback and a central finite difference of its parent.
#[derive(Clone, Debug, Serialize)]
pub struct DerivativeCheck {
    pub coefficient: &'static str,
    pub derivative: &'static str,
    pub max_mismatch: f64,
    pub unverifiable: bool,
}

/// Outcome of `probe_hypotheses`.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub rows: Vec<DerivativeCheck>,
    /// Empirical Lipschitz constant of `x -> g` and `x -> g_x` (sup over
    /// atoms, max over sampled pairs).
    pub jump_lipschitz: f64,
    /// Empirical growth ratio `sup_theta |g| / (1 + |x|)`.
    pub jump_growth: f64,
    /// Relative tolerance applied to every derivative row.
    pub tolerance: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub pass: bool,
}

const PROBE_TOL: f64 = 1e-4;

fn fd_step(v: f64) -> f64 {
    1e-5 * v.abs().max(1.0)
}

fn rel_mismatch(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / analytic.abs().max(1.0)
}

struct MismatchRow {
    coefficient: &'static str,
    derivative: &'static str,
    worst: f64,
    unverifiable: bool,
}

impl MismatchRow {
    fn new(coefficient: &'static str, derivative: &'static str) -> Self {
        Self { coefficient, derivative, worst: 0.0, unverifiable: false }
    }

    fn record(&mut self, fd: f64, analytic: f64) {
        if !fd.is_finite() || !analytic.is_finite() {
            self.unverifiable = true;
            return;
        }
        self.worst = self.worst.max(rel_mismatch(fd, analytic));
    }

    fn finish(self) -> DerivativeCheck {
        DerivativeCheck {
            coefficient: self.coefficient,
            derivative: self.derivative,
            max_mismatch: self.worst,
            unverifiable: self.unverifiable,
        }
    }
}

/// Audits the supplied analytic derivatives against central finite
/// differences of their parent callbacks on `n_samples` points drawn
/// uniformly from the box (times from the horizon, controls from the
/// admissible set, jump marks from the atom list), and estimates the
/// Lipschitz and growth constants of the jump coefficient.
pub fn probe_hypotheses(
    model: &ModelSpec,
    probe_box: &ProbeBox,
    n_samples: usize,
    seed: u64,
) -> HypothesisReport {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (s, t_end) = model.horizon;
    let (ulo, uhi) = (model.control_set.lo, model.control_set.hi);

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let t = rng.gen_range(s..=t_end);
        let x = rng.gen_range(probe_box.x.0..=probe_box.x.1);
        let y = rng.gen_range(probe_box.y.0..=probe_box.y.1);
        let u = if ulo < uhi { rng.gen_range(ulo..=uhi) } else { ulo };
        samples.push((t, x, y, u));
    }

    let mut rows: Vec<MismatchRow> = Vec::new();

    for (name, coeff) in [
        ("drift", &model.drift),
        ("diffusion", &model.diffusion),
        ("running_cost", &model.running_cost),
    ] {
        let mut dx = MismatchRow::new(name, "dx");
        let mut dy = MismatchRow::new(name, "dy");
        let mut dxx = MismatchRow::new(name, "dxx");
        let mut dxy = MismatchRow::new(name, "dxy");
        let mut dyy = MismatchRow::new(name, "dyy");
        for &(t, x, y, u) in &samples {
            let hx = fd_step(x);
            let hy = fd_step(y);
            dx.record(
                ((coeff.eval)(t, x + hx, y, u) - (coeff.eval)(t, x - hx, y, u)) / (2.0 * hx),
                (coeff.dx)(t, x, y, u),
            );
            dy.record(
                ((coeff.eval)(t, x, y + hy, u) - (coeff.eval)(t, x, y - hy, u)) / (2.0 * hy),
                (coeff.dy)(t, x, y, u),
            );
            dxx.record(
                ((coeff.dx)(t, x + hx, y, u) - (coeff.dx)(t, x - hx, y, u)) / (2.0 * hx),
                (coeff.dxx)(t, x, y, u),
            );
            dxy.record(
                ((coeff.dx)(t, x, y + hy, u) - (coeff.dx)(t, x, y - hy, u)) / (2.0 * hy),
                (coeff.dxy)(t, x, y, u),
            );
            dyy.record(
                ((coeff.dy)(t, x, y + hy, u) - (coeff.dy)(t, x, y - hy, u)) / (2.0 * hy),
                (coeff.dyy)(t, x, y, u),
            );
        }
        rows.extend([dx, dy, dxx, dxy, dyy]);
    }

    {
        let terminal = &model.terminal_cost;
        let mut dx = MismatchRow::new("terminal_cost", "dx");
        let mut dy = MismatchRow::new("terminal_cost", "dy");
        let mut dxx = MismatchRow::new("terminal_cost", "dxx");
        let mut dxy = MismatchRow::new("terminal_cost", "dxy");
        let mut dyy = MismatchRow::new("terminal_cost", "dyy");
        for &(_t, x, y, _u) in &samples {
            let hx = fd_step(x);
            let hy = fd_step(y);
            dx.record(
                ((terminal.eval)(x + hx, y) - (terminal.eval)(x - hx, y)) / (2.0 * hx),
                (terminal.dx)(x, y),
            );
            dy.record(
                ((terminal.eval)(x, y + hy) - (terminal.eval)(x, y - hy)) / (2.0 * hy),
                (terminal.dy)(x, y),
            );
            dxx.record(
                ((terminal.dx)(x + hx, y) - (terminal.dx)(x - hx, y)) / (2.0 * hx),
                (terminal.dxx)(x, y),
            );
            dxy.record(
                ((terminal.dx)(x, y + hy) - (terminal.dx)(x, y - hy)) / (2.0 * hy),
                (terminal.dxy)(x, y),
            );
            dyy.record(
                ((terminal.dy)(x, y + hy) - (terminal.dy)(x, y - hy)) / (2.0 * hy),
                (terminal.dyy)(x, y),
            );
        }
        rows.extend([dx, dy, dxx, dxy, dyy]);
    }

    let mut jump_lipschitz: f64 = 0.0;
    let mut jump_growth: f64 = 0.0;
    {
        let jump = &model.jump;
        let mut dx = MismatchRow::new("jump", "dx");
        let mut dxx = MismatchRow::new("jump", "dxx");
        for &(t, x, _y, u) in &samples {
            let hx = fd_step(x);
            for &(theta, _w) in model.jump_measure.atoms() {
                dx.record(
                    ((jump.eval)(t, x + hx, u, theta) - (jump.eval)(t, x - hx, u, theta))
                        / (2.0 * hx),
                    (jump.dx)(t, x, u, theta),
                );
                dxx.record(
                    ((jump.dx)(t, x + hx, u, theta) - (jump.dx)(t, x - hx, u, theta))
                        / (2.0 * hx),
                    (jump.dxx)(t, x, u, theta),
                );
                jump_growth =
                    jump_growth.max((jump.eval)(t, x, u, theta).abs() / (1.0 + x.abs()));
            }
        }
        // Lipschitz estimate over consecutive sample pairs sharing (t, u).
        for pair in samples.windows(2) {
            let (t, x0, _y0, u) = pair[0];
            let x1 = pair[1].1;
            let gap = (x1 - x0).abs();
            if gap < 1e-9 {
                continue;
            }
            let mut dg: f64 = 0.0;
            let mut dgx: f64 = 0.0;
            for &(theta, _w) in model.jump_measure.atoms() {
                dg = dg.max(((jump.eval)(t, x1, u, theta) - (jump.eval)(t, x0, u, theta)).abs());
                dgx = dgx.max(((jump.dx)(t, x1, u, theta) - (jump.dx)(t, x0, u, theta)).abs());
            }
            jump_lipschitz = jump_lipschitz.max((dg + dgx) / gap);
        }
        rows.extend([dx, dxx]);
    }

    let rows: Vec<DerivativeCheck> = rows.into_iter().map(MismatchRow::finish).collect();
    let pass = rows.iter().all(|r| !r.unverifiable && r.max_mismatch < PROBE_TOL);
    HypothesisReport {
        rows,
        jump_lipschitz,
        jump_growth,
        tolerance: PROBE_TOL,
        n_samples,
        seed,
        pass,
    }
}
