//! Recombining trinomial lattice for the canonical process under volatility
//! uncertainty.
//!
//! The space step is fixed at `h = σ̄·√dt`. A volatility choice `σ²` moves
//! the state by `±h` with probability `p = σ²/(2σ̄²)` each and stays put
//! with probability `1 − 2p`, so the one-step variance is exactly `σ²·dt`.
//! Because the average is affine in `σ²`, the supremum over the whole
//! interval `[σ̲², σ̄²]` is attained at one of the two endpoints:
//!
//! ```text
//! sup_σ E_σ[v] = v_0 + dt · G(Δ²v),   G(a) = ½(σ̄² a⁺ − σ̲² a⁻)
//! ```
//!
//! which is the explicit monotone scheme for `∂_t u + G(∂²_x u) = 0`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{evaluate, Bindings, EvalError, Expr, Var};
use crate::parallel::map_indexed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatticeError {
    #[error("volatility bounds must satisfy 0 < sigma_lo <= sigma_hi, got [{lo}, {hi}]")]
    InvalidVolatility { lo: f64, hi: f64 },
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
    #[error("non-finite input to the one-step operator")]
    NonFinite,
    #[error("grid shape does not match the lattice (expected {expected_steps} steps, found {found_steps})")]
    ShapeMismatch { expected_steps: usize, found_steps: usize },
    #[error("evaluation failed at node (step {step}, offset {offset}, x = {x}): {source}")]
    Eval {
        step: usize,
        offset: i64,
        x: f64,
        #[source]
        source: EvalError,
    },
}

/// Volatility uncertainty interval `[σ̲, σ̄]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GParams {
    sigma_lo: f64,
    sigma_hi: f64,
}

impl GParams {
    pub fn new(sigma_lo: f64, sigma_hi: f64) -> Result<Self, LatticeError> {
        if !(sigma_lo.is_finite() && sigma_hi.is_finite() && sigma_lo > 0.0 && sigma_lo <= sigma_hi) {
            return Err(LatticeError::InvalidVolatility {
                lo: sigma_lo,
                hi: sigma_hi,
            });
        }
        Ok(Self { sigma_lo, sigma_hi })
    }

    pub fn sigma_lo(&self) -> f64 {
        self.sigma_lo
    }

    pub fn sigma_hi(&self) -> f64 {
        self.sigma_hi
    }

    pub fn var_lo(&self) -> f64 {
        self.sigma_lo * self.sigma_lo
    }

    pub fn var_hi(&self) -> f64 {
        self.sigma_hi * self.sigma_hi
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma_lo == self.sigma_hi
    }

    pub fn g(&self, a: f64) -> f64 {
        g_value(self, a)
    }

    /// Probability of each of the `±h` moves under variance `sigma_sq`.
    pub fn branch_probability(&self, sigma_sq: f64) -> f64 {
        sigma_sq / (2.0 * self.var_hi())
    }

    /// Trinomial average of `(v_minus, v_mid, v_plus)` under variance `sigma_sq`.
    #[inline]
    pub fn trinomial_average(&self, sigma_sq: f64, v_minus: f64, v_mid: f64, v_plus: f64) -> f64 {
        v_mid + self.branch_probability(sigma_sq) * (v_plus + v_minus - 2.0 * v_mid)
    }
}

/// `G(a) = ½(σ̄² a⁺ − σ̲² a⁻)`.
pub fn g_value(params: &GParams, a: f64) -> f64 {
    0.5 * (params.var_hi() * a.max(0.0) - params.var_lo() * (-a).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    horizon: f64,
    steps: usize,
    dt: f64,
    x0: f64,
    h: f64,
}

impl LatticeSpec {
    pub fn new(horizon: f64, steps: usize, x0: f64, params: &GParams) -> Result<Self, LatticeError> {
        if steps == 0 {
            return Err(LatticeError::InvalidLattice("need at least one time step".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LatticeError::InvalidLattice(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !x0.is_finite() {
            return Err(LatticeError::InvalidLattice(format!("x0 must be finite, got {x0}")));
        }
        let dt = horizon / steps as f64;
        let h = params.sigma_hi() * dt.sqrt();
        if !(h > 0.0 && h.is_finite()) {
            return Err(LatticeError::InvalidLattice(format!("space step {h} is not positive")));
        }
        Ok(Self {
            horizon,
            steps,
            dt,
            x0,
            h,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn time(&self, step: usize) -> f64 {
        if step == self.steps {
            self.horizon
        } else {
            step as f64 * self.dt
        }
    }

    pub fn x(&self, offset: i64) -> f64 {
        self.x0 + offset as f64 * self.h
    }

    /// Number of nodes at `step`, i.e. `2·step + 1`.
    pub fn width(step: usize) -> usize {
        2 * step + 1
    }

    /// Space offset of array index `index` at `step`.
    pub fn offset(step: usize, index: usize) -> i64 {
        index as i64 - step as i64
    }

    /// Coordinates of the node at array position `index` of `step`.
    pub fn node_x(&self, step: usize, index: usize) -> f64 {
        self.x(Self::offset(step, index))
    }
}

/// One real per reachable node: `2k + 1` values at step `k`, indexed from
/// offset `−k` upward.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGrid {
    slices: Vec<Vec<f64>>,
}

impl NodeGrid {
    pub fn zeros(steps: usize) -> Self {
        Self::filled(steps, 0.0)
    }

    pub fn filled(steps: usize, value: f64) -> Self {
        Self {
            slices: (0..=steps).map(|k| vec![value; LatticeSpec::width(k)]).collect(),
        }
    }

    /// Builds a grid from `f(step, offset)`.
    pub fn from_fn(steps: usize, mut f: impl FnMut(usize, i64) -> f64) -> Self {
        Self {
            slices: (0..=steps)
                .map(|k| {
                    (0..LatticeSpec::width(k))
                        .map(|i| f(k, LatticeSpec::offset(k, i)))
                        .collect()
                })
                .collect(),
        }
    }

    /// Assembles a grid from per-step slices; slice `k` must have `2k + 1` entries.
    pub fn from_slices(slices: Vec<Vec<f64>>) -> Result<Self, LatticeError> {
        if slices.is_empty() {
            return Err(LatticeError::InvalidLattice("grid has no slices".into()));
        }
        for (k, s) in slices.iter().enumerate() {
            if s.len() != LatticeSpec::width(k) {
                return Err(LatticeError::InvalidLattice(format!(
                    "slice {k} has {} entries, expected {}",
                    s.len(),
                    LatticeSpec::width(k)
                )));
            }
        }
        Ok(Self { slices })
    }

    pub fn steps(&self) -> usize {
        self.slices.len() - 1
    }

    pub fn slice(&self, step: usize) -> &[f64] {
        &self.slices[step]
    }

    pub fn slice_mut(&mut self, step: usize) -> &mut [f64] {
        &mut self.slices[step]
    }

    pub fn slices(&self) -> &[Vec<f64>] {
        &self.slices
    }

    pub fn get(&self, step: usize, offset: i64) -> f64 {
        self.slices[step][(offset + step as i64) as usize]
    }

    pub fn set(&mut self, step: usize, offset: i64, value: f64) {
        self.slices[step][(offset + step as i64) as usize] = value;
    }

    /// Value at the root node.
    pub fn root(&self) -> f64 {
        self.slices[0][0]
    }

    pub fn check_shape(&self, lattice: &LatticeSpec) -> Result<(), LatticeError> {
        if self.steps() != lattice.steps() {
            return Err(LatticeError::ShapeMismatch {
                expected_steps: lattice.steps(),
                found_steps: self.steps(),
            });
        }
        Ok(())
    }

    /// Iterates `(step, offset, value)` over every node.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, i64, f64)> + '_ {
        self.slices.iter().enumerate().flat_map(|(k, s)| {
            s.iter()
                .enumerate()
                .map(move |(i, &v)| (k, LatticeSpec::offset(k, i), v))
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NodeGrid {
        NodeGrid {
            slices: self.slices.iter().map(|s| s.iter().map(|&v| f(v)).collect()).collect(),
        }
    }

    /// Pointwise combination of two grids of equal shape.
    pub fn zip_map(&self, other: &NodeGrid, f: impl Fn(f64, f64) -> f64) -> Result<NodeGrid, LatticeError> {
        if self.steps() != other.steps() {
            return Err(LatticeError::ShapeMismatch {
                expected_steps: self.steps(),
                found_steps: other.steps(),
            });
        }
        Ok(NodeGrid {
            slices: self
                .slices
                .iter()
                .zip(&other.slices)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().flatten().all(|v| v.is_finite())
    }

    /// CSV dump with columns `step,offset,x,value`.
    pub fn write_csv<W: Write>(&self, lattice: &LatticeSpec, mut out: W) -> io::Result<()> {
        writeln!(out, "step,offset,x,value")?;
        for (k, j, v) in self.nodes() {
            writeln!(out, "{k},{j},{:e},{v:e}", lattice.x(j))?;
        }
        Ok(())
    }
}

/// Maximum of `transform(value)` over every reachable node.
pub fn node_sup(grid: &NodeGrid, transform: impl Fn(f64) -> f64) -> f64 {
    grid.slices
        .iter()
        .flatten()
        .map(|&v| transform(v))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Result of the one-step supremum at a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSup {
    pub value: f64,
    /// Maximising variance, `σ̲²` or `σ̄²` (ties go to `σ̄²`).
    pub sigma_star_sq: f64,
}

/// `v_mid + dt·G((v_plus − 2v_mid + v_minus)/h²)`, computed as the larger of
/// the two endpoint trinomial averages. Requires `h = σ̄·√dt`.
pub fn one_step_sup(
    params: &GParams,
    dt: f64,
    h: f64,
    v_minus: f64,
    v_mid: f64,
    v_plus: f64,
) -> Result<StepSup, LatticeError> {
    if !(v_minus.is_finite() && v_mid.is_finite() && v_plus.is_finite()) {
        return Err(LatticeError::NonFinite);
    }
    debug_assert!((h - params.sigma_hi() * dt.sqrt()).abs() <= 1e-12 * h.max(1.0));
    Ok(sup_step(params, v_minus, v_mid, v_plus))
}

#[inline]
pub(crate) fn sup_step(params: &GParams, v_minus: f64, v_mid: f64, v_plus: f64) -> StepSup {
    let lo = params.trinomial_average(params.var_lo(), v_minus, v_mid, v_plus);
    let hi = params.trinomial_average(params.var_hi(), v_minus, v_mid, v_plus);
    if hi >= lo {
        StepSup {
            value: hi,
            sigma_star_sq: params.var_hi(),
        }
    } else {
        StepSup {
            value: lo,
            sigma_star_sq: params.var_lo(),
        }
    }
}

/// Applies the one-step supremum to every node of `step` given the slice at
/// `step + 1`.
fn sup_slice(params: &GParams, next: &[f64], step: usize) -> Result<Vec<f64>, LatticeError> {
    map_indexed(LatticeSpec::width(step), |i| {
        let (a, b, c) = (next[i], next[i + 1], next[i + 2]);
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(LatticeError::NonFinite);
        }
        Ok(sup_step(params, a, b, c).value)
    })
}

/// Discrete conditional G-expectation of a terminal slice: `u(N) = terminal`,
/// `u(k) = sup-step(u(k+1))`.
pub fn g_expectation_grid(
    lattice: &LatticeSpec,
    params: &GParams,
    terminal: Vec<f64>,
) -> Result<NodeGrid, LatticeError> {
    let n = lattice.steps();
    if terminal.len() != LatticeSpec::width(n) {
        return Err(LatticeError::InvalidLattice(format!(
            "terminal slice has {} entries, expected {}",
            terminal.len(),
            LatticeSpec::width(n)
        )));
    }
    let mut slices = vec![Vec::new(); n + 1];
    slices[n] = terminal;
    for k in (0..n).rev() {
        slices[k] = sup_slice(params, &slices[k + 1], k)?;
    }
    NodeGrid::from_slices(slices)
}

/// Evaluates an expression in `x` on the terminal nodes.
pub fn terminal_slice(lattice: &LatticeSpec, terminal: &Expr) -> Result<Vec<f64>, LatticeError> {
    let n = lattice.steps();
    let t = lattice.horizon();
    map_indexed(LatticeSpec::width(n), |i| {
        let x = lattice.node_x(n, i);
        evaluate(terminal, &Bindings::new().with(Var::T, t).with(Var::X, x)).map_err(|source| LatticeError::Eval {
            step: n,
            offset: LatticeSpec::offset(n, i),
            x,
            source,
        })
    })
}

/// `Ê_{t_k}[ξ(B_T)]` at every node, for a terminal expression in `x`.
pub fn conditional_g_expectation(
    lattice: &LatticeSpec,
    params: &GParams,
    terminal: &Expr,
) -> Result<NodeGrid, LatticeError> {
    g_expectation_grid(lattice, params, terminal_slice(lattice, terminal)?)
}

/// `Ê[Σ_{k<N} w(t_k, B_{t_k})·dt]`, the left-point discretisation of
/// `Ê[∫₀ᵀ w(s, B_s) ds]`, by backward dynamic programming.
pub fn expected_path_integral(
    lattice: &LatticeSpec,
    params: &GParams,
    integrand: &NodeGrid,
) -> Result<f64, LatticeError> {
    integrand.check_shape(lattice)?;
    let dt = lattice.dt();
    let mut value: Vec<f64> = vec![0.0; LatticeSpec::width(lattice.steps())];
    for k in (0..lattice.steps()).rev() {
        let w = integrand.slice(k);
        let next = value;
        value = map_indexed(LatticeSpec::width(k), |i| {
            let (a, b, c) = (next[i], next[i + 1], next[i + 2]);
            if !(a.is_finite() && b.is_finite() && c.is_finite() && w[i].is_finite()) {
                return Err(LatticeError::NonFinite);
            }
            Ok(sup_step(params, a, b, c).value + w[i] * dt)
        })?;
    }
    Ok(value[0])
}

/// A volatility scenario: the variance chosen at each node.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioPolicy {
    ConstantLo,
    ConstantHi,
    /// Per-node variance, typically the maximiser field of a solution.
    Field(NodeGrid),
}

impl ScenarioPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioPolicy::ConstantLo => "constant-lo",
            ScenarioPolicy::ConstantHi => "constant-hi",
            ScenarioPolicy::Field(_) => "argmax",
        }
    }

    pub fn sigma_sq(&self, params: &GParams, step: usize, offset: i64) -> f64 {
        match self {
            ScenarioPolicy::ConstantLo => params.var_lo(),
            ScenarioPolicy::ConstantHi => params.var_hi(),
            ScenarioPolicy::Field(grid) => grid.get(step, offset),
        }
    }

    fn check_shape(&self, lattice: &LatticeSpec) -> Result<(), LatticeError> {
        match self {
            ScenarioPolicy::Field(grid) => grid.check_shape(lattice),
            _ => Ok(()),
        }
    }
}

/// Linear expectation `E_P[Σ_{k<N} increment(t_k, B_{t_k})]` under the
/// scenario `policy`.
pub fn policy_expectation(
    lattice: &LatticeSpec,
    params: &GParams,
    policy: &ScenarioPolicy,
    increments: &NodeGrid,
) -> Result<f64, LatticeError> {
    increments.check_shape(lattice)?;
    policy.check_shape(lattice)?;
    let mut value: Vec<f64> = vec![0.0; LatticeSpec::width(lattice.steps())];
    for k in (0..lattice.steps()).rev() {
        let w = increments.slice(k);
        let next = value;
        value = map_indexed(LatticeSpec::width(k), |i| {
            let s2 = policy.sigma_sq(params, k, LatticeSpec::offset(k, i));
            Ok(params.trinomial_average(s2, next[i], next[i + 1], next[i + 2]) + w[i])
        })?;
    }
    Ok(value[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expression;

    fn params() -> GParams {
        GParams::new(0.5, 1.0).unwrap()
    }

    #[test]
    fn g_function_examples() {
        let p = params();
        assert_eq!(g_value(&p, 2.0), 1.0);
        assert_eq!(g_value(&p, 0.0), 0.0);
        assert_eq!(g_value(&p, -2.0), -0.25);
    }

    #[test]
    fn invalid_params() {
        assert!(GParams::new(0.0, 1.0).is_err());
        assert!(GParams::new(1.2, 1.0).is_err());
        assert!(GParams::new(0.5, f64::NAN).is_err());
        assert!(LatticeSpec::new(1.0, 0, 0.0, &params()).is_err());
        assert!(LatticeSpec::new(-1.0, 4, 0.0, &params()).is_err());
    }

    #[test]
    fn one_step_examples() {
        let p = params();
        let (dt, h) = (0.01, 0.1);
        let c = one_step_sup(&p, dt, h, 3.7, 3.7, 3.7).unwrap();
        assert_eq!(
            c,
            StepSup {
                value: 3.7,
                sigma_star_sq: 1.0
            }
        );

        let convex = one_step_sup(&p, dt, h, 0.01, 0.0, 0.01).unwrap();
        assert!((convex.value - 0.01).abs() < 1e-15);
        assert_eq!(convex.sigma_star_sq, 1.0);

        let concave = one_step_sup(&p, dt, h, -0.01, 0.0, -0.01).unwrap();
        assert!((concave.value + 0.0025).abs() < 1e-15);
        assert_eq!(concave.sigma_star_sq, 0.25);

        assert_eq!(
            one_step_sup(&p, dt, h, f64::NAN, 0.0, 0.0),
            Err(LatticeError::NonFinite)
        );
    }

    #[test]
    fn one_step_matches_g_form() {
        let p = GParams::new(0.6, 1.3).unwrap();
        let dt: f64 = 0.004;
        let h = p.sigma_hi() * dt.sqrt();
        for &(a, b, c) in &[(0.3, -0.1, 0.7), (1.0, 2.0, 0.5), (-4.0, -4.0, -4.0), (0.0, 1e-3, -2.0)] {
            let s = one_step_sup(&p, dt, h, a, b, c).unwrap();
            let delta2 = (c - 2.0 * b + a) / (h * h);
            let expected = b + dt * g_value(&p, delta2);
            assert!((s.value - expected).abs() < 1e-14, "{} vs {}", s.value, expected);
        }
    }

    #[test]
    fn quadratics_are_exact() {
        let p = params();
        for steps in [1, 2, 7, 50, 333] {
            let lat = LatticeSpec::new(1.0, steps, 0.0, &p).unwrap();
            let up = conditional_g_expectation(&lat, &p, &parse_expression("x^2").unwrap()).unwrap();
            let down = conditional_g_expectation(&lat, &p, &parse_expression("-(x^2)").unwrap()).unwrap();
            let lin = conditional_g_expectation(&lat, &p, &parse_expression("x").unwrap()).unwrap();
            assert!((up.root() - 1.0).abs() < 1e-12, "N={steps}: {}", up.root());
            assert!((down.root() + 0.25).abs() < 1e-12, "N={steps}: {}", down.root());
            assert!(lin.root().abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_off_origin() {
        // Ê[(x0 + B_T)²] = x0² + σ̄²T
        let p = params();
        let lat = LatticeSpec::new(2.0, 40, 0.3, &p).unwrap();
        let g = conditional_g_expectation(&lat, &p, &parse_expression("x^2").unwrap()).unwrap();
        assert!((g.root() - (0.09 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn path_integral_examples() {
        let p = params();
        let lat = LatticeSpec::new(1.5, 30, 0.0, &p).unwrap();
        assert_eq!(expected_path_integral(&lat, &p, &NodeGrid::zeros(30)).unwrap(), 0.0);
        let t = expected_path_integral(&lat, &p, &NodeGrid::filled(30, 1.0)).unwrap();
        assert!((t - 1.5).abs() < 1e-12);
        assert!(matches!(
            expected_path_integral(&lat, &p, &NodeGrid::zeros(29)),
            Err(LatticeError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn path_integral_degenerate_fubini() {
        // σ̲ = σ̄ = 1: Ê[Σ_{k<N} B_{t_k}² dt] = Σ t_k dt = T²(N−1)/(2N),
        // which is T²/2 up to the left-point quadrature error T²/(2N).
        let p = GParams::new(1.0, 1.0).unwrap();
        let (horizon, steps) = (2.0, 64);
        let lat = LatticeSpec::new(horizon, steps, 0.0, &p).unwrap();
        let w = NodeGrid::from_fn(steps, |_, j| lat.x(j).powi(2));
        let v = expected_path_integral(&lat, &p, &w).unwrap();
        let discrete = horizon * horizon * (steps as f64 - 1.0) / (2.0 * steps as f64);
        assert!((v - discrete).abs() < 1e-10, "{v} vs {discrete}");
        assert!((v - horizon * horizon / 2.0).abs() <= horizon * horizon / (2.0 * steps as f64) + 1e-12);
    }

    #[test]
    fn node_sup_examples() {
        let p = params();
        let lat = LatticeSpec::new(0.01, 1, 0.0, &p).unwrap();
        assert_eq!(node_sup(&NodeGrid::filled(5, 2.5), |v| v), 2.5);
        let mut g = NodeGrid::zeros(1);
        for j in -1..=1 {
            g.set(1, j, lat.x(j));
        }
        assert!((node_sup(&g, f64::abs) - lat.h()).abs() < 1e-15);
        let any = NodeGrid::from_fn(3, |k, j| k as f64 - 0.3 * j as f64);
        let diff = any.zip_map(&any, |a, b| a - b).unwrap();
        assert_eq!(node_sup(&diff, |v| v.max(0.0)), 0.0);
    }

    #[test]
    fn policy_expectation_of_constant_increment() {
        let p = params();
        let lat = LatticeSpec::new(1.0, 10, 0.0, &p).unwrap();
        let ones = NodeGrid::filled(10, 1.0);
        for pol in [ScenarioPolicy::ConstantLo, ScenarioPolicy::ConstantHi] {
            assert!((policy_expectation(&lat, &p, &pol, &ones).unwrap() - 10.0).abs() < 1e-12);
        }
        // E_P[B_{t_k}²] = σ²·t_k under a constant policy.
        let w = NodeGrid::from_fn(10, |_, j| lat.x(j).powi(2));
        let v = policy_expectation(&lat, &p, &ScenarioPolicy::ConstantLo, &w).unwrap();
        let expected: f64 = (0..10).map(|k| 0.25 * lat.time(k)).sum();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn csv_dump() {
        let p = params();
        let lat = LatticeSpec::new(1.0, 1, 0.0, &p).unwrap();
        let g = NodeGrid::from_fn(1, |k, j| (k as i64 * 10 + j) as f64);
        let mut buf = Vec::new();
        g.write_csv(&lat, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(
            s,
            "step,offset,x,value\n0,0,0e0,0e0\n1,-1,-1e0,9e0\n1,0,0e0,1e1\n1,1,1e0,1.1e1\n"
        );
    }
}
