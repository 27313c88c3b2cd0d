//! Backward solver for the penalized doubly reflected G-BSDE
//!
//! ```text
//! Yⁿ_t = ξ + ∫_t^T f(s, Yⁿ, Zⁿ) ds + n∫_t^T (Yⁿ − L)⁻ ds − n∫_t^T (Yⁿ − U)⁺ ds
//!        − ∫_t^T Zⁿ dB − (Kⁿ_T − Kⁿ_t)
//! ```
//!
//! on the trinomial lattice. Each node solves the scalar equation
//!
//! ```text
//! y = max_σ E_σ[Y_{k+1}] + dt·f(t, x, y, z) + dt·n·(y − L)⁻ − dt·n·(y − U)⁺
//! ```
//!
//! implicitly in `y` with `z` taken from the next slice, which keeps the
//! scheme monotone for every `n ≥ 0`. The per-scenario slack
//! `dK_σ = E_σ − max_σ' E_σ'` is stored at every node.

use std::fmt;
use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{evaluate, evaluate_with_derivative, parse_expression, Bindings, EvalError, Expr, ExprError, Var};
use crate::lattice::{terminal_slice, GParams, LatticeError, LatticeSpec, NodeGrid, ScenarioPolicy};
use crate::parallel::map_indexed;

/// Root-solver stopping tolerance, relative to `1 + |y|`.
pub const ROOT_TOLERANCE: f64 = 1e-13;
const MAX_ROOT_ITERATIONS: usize = 200;
const MAX_BRACKET_EXPANSIONS: usize = 200;

/// Default penalty ladder.
pub const DEFAULT_LADDER: [f64; 7] = [4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Terminal,
    Driver,
    DriverG,
    Lower,
    Upper,
}

impl Role {
    /// Variables an expression in this role may reference.
    pub fn allowed(self) -> &'static [Var] {
        match self {
            Role::Terminal => &[Var::X],
            Role::Lower | Role::Upper => &[Var::T, Var::X],
            Role::Driver | Role::DriverG => &[Var::T, Var::X, Var::Y, Var::Z],
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Terminal => "terminal",
            Role::Driver => "driver",
            Role::DriverG => "driver_g",
            Role::Lower => "lower",
            Role::Upper => "upper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("{role}: {source}")]
    Parse {
        role: Role,
        #[source]
        source: ExprError,
    },
    #[error("{role} may not depend on '{var}'")]
    VariableNotAllowed { role: Role, var: Var },
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("lattice does not match the problem: {0}")]
    LatticeMismatch(String),
    #[error("lipschitz constant {lipschitz} with dt = {dt} violates dt·κ < 1")]
    LipschitzViolation { dt: f64, lipschitz: f64 },
    #[error("invalid lipschitz constant {0}")]
    InvalidLipschitz(f64),
    #[error("invalid penalty level {0}")]
    InvalidPenalty(f64),
    #[error("{role} evaluation failed at (step {step}, offset {offset}, x = {x}): {source}")]
    Eval {
        role: Role,
        step: usize,
        offset: i64,
        x: f64,
        #[source]
        source: EvalError,
    },
    #[error("root solve did not converge at (step {step}, offset {offset}): y = {y}, residual = {residual}")]
    RootNotConverged {
        step: usize,
        offset: i64,
        y: f64,
        residual: f64,
    },
    #[error("non-finite value at (step {step}, offset {offset})")]
    NonFinite { step: usize, offset: i64 },
    #[error("lower obstacle {lower} exceeds upper obstacle {upper} at (step {step}, offset {offset}, x = {x})")]
    ObstacleOrder {
        step: usize,
        offset: i64,
        x: f64,
        lower: f64,
        upper: f64,
    },
    #[error("terminal value {terminal} outside [{lower}, {upper}] at (offset {offset}, x = {x})")]
    TerminalOutsideObstacles {
        offset: i64,
        x: f64,
        terminal: f64,
        lower: f64,
        upper: f64,
    },
    #[error("penalty ladder must be nonempty")]
    EmptyLadder,
    #[error("penalty ladder must be strictly increasing")]
    LadderNotIncreasing,
    #[error("path does not fit the lattice: {0}")]
    PathMismatch(String),
}

fn check_vars(role: Role, e: &Expr) -> Result<(), SolverError> {
    match e.free_vars().into_iter().find(|v| !role.allowed().contains(v)) {
        Some(var) => Err(SolverError::VariableNotAllowed { role, var }),
        None => Ok(()),
    }
}

fn parse_role(role: Role, src: &str) -> Result<Expr, SolverError> {
    let e = parse_expression(src).map_err(|source| SolverError::Parse { role, source })?;
    check_vars(role, &e)?;
    Ok(e)
}

/// Problem data `(ξ, f, g, L, U)` with the volatility interval and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    params: GParams,
    horizon: f64,
    terminal: Expr,
    driver: Expr,
    driver_g: Option<Expr>,
    lower: Option<Expr>,
    upper: Option<Expr>,
    lipschitz: f64,
}

impl ProblemSpec {
    /// Unconstrained problem with `f = 0`.
    pub fn new(params: GParams, horizon: f64, terminal: Expr) -> Result<Self, SolverError> {
        check_vars(Role::Terminal, &terminal)?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LatticeError::InvalidLattice(format!("horizon must be positive, got {horizon}")).into());
        }
        Ok(Self {
            params,
            horizon,
            terminal,
            driver: Expr::Const(0.0),
            driver_g: None,
            lower: None,
            upper: None,
            lipschitz: 0.0,
        })
    }

    /// Parses the terminal payoff from source text.
    pub fn parse(params: GParams, horizon: f64, terminal: &str) -> Result<Self, SolverError> {
        Self::new(params, horizon, parse_role(Role::Terminal, terminal)?)
    }

    pub fn with_driver(mut self, driver: Expr) -> Result<Self, SolverError> {
        check_vars(Role::Driver, &driver)?;
        self.driver = driver;
        Ok(self)
    }

    pub fn with_driver_g(mut self, g: Option<Expr>) -> Result<Self, SolverError> {
        if let Some(g) = &g {
            check_vars(Role::DriverG, g)?;
        }
        self.driver_g = g;
        Ok(self)
    }

    pub fn with_lower(mut self, lower: Option<Expr>) -> Result<Self, SolverError> {
        if let Some(l) = &lower {
            check_vars(Role::Lower, l)?;
        }
        self.lower = lower;
        Ok(self)
    }

    pub fn with_upper(mut self, upper: Option<Expr>) -> Result<Self, SolverError> {
        if let Some(u) = &upper {
            check_vars(Role::Upper, u)?;
        }
        self.upper = upper;
        Ok(self)
    }

    pub fn with_lipschitz(mut self, lipschitz: f64) -> Result<Self, SolverError> {
        if !(lipschitz.is_finite() && lipschitz >= 0.0) {
            return Err(SolverError::InvalidLipschitz(lipschitz));
        }
        self.lipschitz = lipschitz;
        Ok(self)
    }

    pub fn driver_src(self, src: &str) -> Result<Self, SolverError> {
        self.with_driver(parse_role(Role::Driver, src)?)
    }

    pub fn driver_g_src(self, src: &str) -> Result<Self, SolverError> {
        self.with_driver_g(Some(parse_role(Role::DriverG, src)?))
    }

    pub fn lower_src(self, src: &str) -> Result<Self, SolverError> {
        self.with_lower(Some(parse_role(Role::Lower, src)?))
    }

    pub fn upper_src(self, src: &str) -> Result<Self, SolverError> {
        self.with_upper(Some(parse_role(Role::Upper, src)?))
    }

    /// Replaces `ξ` by `ξ` clamped into `[L(T, x), U(T, x)]`.
    pub fn with_clamped_terminal(mut self) -> Self {
        let at_t = |e: &Option<Expr>| e.as_ref().map(|e| e.substitute(Var::T, self.horizon));
        let mut xi = self.terminal.clone();
        if let Some(l) = at_t(&self.lower) {
            xi = Expr::call(crate::expr::Func::Max, vec![xi, l]);
        }
        if let Some(u) = at_t(&self.upper) {
            xi = Expr::call(crate::expr::Func::Min, vec![xi, u]);
        }
        self.terminal = xi;
        self
    }

    pub fn params(&self) -> &GParams {
        &self.params
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn terminal(&self) -> &Expr {
        &self.terminal
    }

    pub fn driver(&self) -> &Expr {
        &self.driver
    }

    pub fn driver_g(&self) -> Option<&Expr> {
        self.driver_g.as_ref()
    }

    pub fn lower(&self) -> Option<&Expr> {
        self.lower.as_ref()
    }

    pub fn upper(&self) -> Option<&Expr> {
        self.upper.as_ref()
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Lipschitz constant of the full implicit right-hand side in `y`.
    pub fn effective_lipschitz(&self) -> f64 {
        if self.driver_g.is_some() {
            self.lipschitz * (1.0 + self.params.var_hi())
        } else {
            self.lipschitz
        }
    }

    /// Lattice for this problem with `steps` time steps started at `x0`.
    pub fn lattice(&self, steps: usize, x0: f64) -> Result<LatticeSpec, SolverError> {
        Ok(LatticeSpec::new(self.horizon, steps, x0, &self.params)?)
    }

    fn check_lattice(&self, lattice: &LatticeSpec) -> Result<(), SolverError> {
        if lattice.horizon() != self.horizon {
            return Err(SolverError::LatticeMismatch(format!(
                "horizon {} vs {}",
                lattice.horizon(),
                self.horizon
            )));
        }
        let h = self.params.sigma_hi() * lattice.dt().sqrt();
        if (lattice.h() - h).abs() > 1e-12 * h {
            return Err(SolverError::LatticeMismatch(format!(
                "space step {} is not sigma_hi·sqrt(dt) = {h}",
                lattice.h()
            )));
        }
        let kappa = self.effective_lipschitz();
        if lattice.dt() * kappa >= 1.0 {
            return Err(SolverError::LipschitzViolation {
                dt: lattice.dt(),
                lipschitz: kappa,
            });
        }
        Ok(())
    }

    pub(crate) fn obstacle(
        &self,
        role: Role,
        lattice: &LatticeSpec,
        step: usize,
        offset: i64,
    ) -> Result<Option<f64>, SolverError> {
        let e = match role {
            Role::Lower => self.lower.as_ref(),
            Role::Upper => self.upper.as_ref(),
            _ => unreachable!("not an obstacle"),
        };
        let Some(e) = e else { return Ok(None) };
        let (t, x) = (lattice.time(step), lattice.x(offset));
        evaluate(e, &Bindings::tx(t, x))
            .map(Some)
            .map_err(|source| SolverError::Eval {
                role,
                step,
                offset,
                x,
                source,
            })
    }

    /// Obstacle values on every node (`±∞` when absent).
    pub fn obstacle_grids(&self, lattice: &LatticeSpec) -> Result<(NodeGrid, NodeGrid), SolverError> {
        let mut lower = NodeGrid::filled(lattice.steps(), f64::NEG_INFINITY);
        let mut upper = NodeGrid::filled(lattice.steps(), f64::INFINITY);
        for k in 0..=lattice.steps() {
            for j in -(k as i64)..=k as i64 {
                if let Some(l) = self.obstacle(Role::Lower, lattice, k, j)? {
                    lower.set(k, j, l);
                }
                if let Some(u) = self.obstacle(Role::Upper, lattice, k, j)? {
                    upper.set(k, j, u);
                }
            }
        }
        Ok((lower, upper))
    }

    /// Checks `L ≤ U` at every node and `L(T) ≤ ξ ≤ U(T)` at the terminal nodes.
    pub fn validate_on(&self, lattice: &LatticeSpec) -> Result<(), SolverError> {
        self.check_lattice(lattice)?;
        let (lower, upper) = self.obstacle_grids(lattice)?;
        for (k, j, l) in lower.nodes() {
            let u = upper.get(k, j);
            if l > u {
                return Err(SolverError::ObstacleOrder {
                    step: k,
                    offset: j,
                    x: lattice.x(j),
                    lower: l,
                    upper: u,
                });
            }
        }
        let n = lattice.steps();
        let xi = terminal_slice(lattice, &self.terminal)?;
        for (i, &v) in xi.iter().enumerate() {
            let j = LatticeSpec::offset(n, i);
            let (l, u) = (lower.get(n, j), upper.get(n, j));
            if v < l || v > u {
                return Err(SolverError::TerminalOutsideObstacles {
                    offset: j,
                    x: lattice.x(j),
                    terminal: v,
                    lower: l,
                    upper: u,
                });
            }
        }
        Ok(())
    }
}

/// Penalty intensity `n ≥ 0`; `n = 0` disables reflection.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PenaltyLevel(f64);

impl PenaltyLevel {
    pub fn new(n: f64) -> Result<Self, SolverError> {
        if !(n.is_finite() && n >= 0.0) {
            return Err(SolverError::InvalidPenalty(n));
        }
        Ok(Self(n))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Nodewise solution of one penalized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionBundle {
    pub y: NodeGrid,
    pub z: NodeGrid,
    /// `n·(Y − L)⁻`, per unit time.
    pub a_plus: NodeGrid,
    /// `n·(Y − U)⁺`, per unit time.
    pub a_minus: NodeGrid,
    /// `E_σ̲ − max_σ E_σ`, per step.
    pub dk_lo: NodeGrid,
    /// `E_σ̄ − max_σ E_σ`, per step.
    pub dk_hi: NodeGrid,
    pub sigma_star: NodeGrid,
    pub meta: BundleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleMeta {
    pub spec: ProblemSpec,
    pub lattice: LatticeSpec,
    pub penalty: PenaltyLevel,
}

impl SolutionBundle {
    pub fn y0(&self) -> f64 {
        self.y.root()
    }

    /// Scenario that picks the maximising variance at every node.
    pub fn argmax_policy(&self) -> ScenarioPolicy {
        ScenarioPolicy::Field(self.sigma_star.clone())
    }

    /// `dK` of the variance chosen by `policy` at each node.
    pub fn dk_under(&self, policy: &ScenarioPolicy) -> NodeGrid {
        let params = self.meta.spec.params();
        NodeGrid::from_fn(self.y.steps(), |k, j| {
            let s2 = policy.sigma_sq(params, k, j);
            if s2 == params.var_hi() {
                self.dk_hi.get(k, j)
            } else {
                self.dk_lo.get(k, j)
            }
        })
    }

    /// CSV dump: `step,offset,x,Y,Z,a_plus,a_minus,dK_lo,dK_hi,sigma_star_sq`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step,offset,x,Y,Z,a_plus,a_minus,dK_lo,dK_hi,sigma_star_sq")?;
        let lattice = &self.meta.lattice;
        for (k, j, y) in self.y.nodes() {
            writeln!(
                out,
                "{k},{j},{:e},{y:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                lattice.x(j),
                self.z.get(k, j),
                self.a_plus.get(k, j),
                self.a_minus.get(k, j),
                self.dk_lo.get(k, j),
                self.dk_hi.get(k, j),
                self.sigma_star.get(k, j)
            )?;
        }
        Ok(())
    }
}

/// All fields of one time slice.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepSlice {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub a_plus: Vec<f64>,
    pub a_minus: Vec<f64>,
    pub dk_lo: Vec<f64>,
    pub dk_hi: Vec<f64>,
    pub sigma_star: Vec<f64>,
}

struct NodeOut {
    y: f64,
    z: f64,
    a_plus: f64,
    a_minus: f64,
    dk_lo: f64,
    dk_hi: f64,
    sigma_star: f64,
}

impl StepSlice {
    fn from_nodes(nodes: Vec<NodeOut>) -> Self {
        let mut s = StepSlice::default();
        for n in nodes {
            s.y.push(n.y);
            s.z.push(n.z);
            s.a_plus.push(n.a_plus);
            s.a_minus.push(n.a_minus);
            s.dk_lo.push(n.dk_lo);
            s.dk_hi.push(n.dk_hi);
            s.sigma_star.push(n.sigma_star);
        }
        s
    }
}

/// The scalar equation at one node.
struct NodeEquation<'a> {
    spec: &'a ProblemSpec,
    step: usize,
    offset: i64,
    t: f64,
    x: f64,
    z: f64,
    e_lo: f64,
    e_hi: f64,
    dt: f64,
    n: f64,
    lower: Option<f64>,
    upper: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Residual {
    value: f64,
    slope: f64,
}

/// `max_σ (E_σ + dt·σ²·g)` and its pieces at a given `y`.
struct SupTerm {
    value: f64,
    slope: f64,
    sigma_star: f64,
    c_lo: f64,
    c_hi: f64,
}

impl NodeEquation<'_> {
    fn eval_err(&self, role: Role, source: EvalError) -> SolverError {
        SolverError::Eval {
            role,
            step: self.step,
            offset: self.offset,
            x: self.x,
            source,
        }
    }

    fn sup_term(&self, y: f64) -> Result<SupTerm, SolverError> {
        let params = self.spec.params();
        let (mut c_lo, mut c_hi, mut d_lo, mut d_hi) = (self.e_lo, self.e_hi, 0.0, 0.0);
        if let Some(g) = self.spec.driver_g() {
            let gd = evaluate_with_derivative(g, &Bindings::txyz(self.t, self.x, y, self.z), Var::Y)
                .map_err(|e| self.eval_err(Role::DriverG, e))?;
            c_lo += self.dt * params.var_lo() * gd.value;
            c_hi += self.dt * params.var_hi() * gd.value;
            d_lo = self.dt * params.var_lo() * gd.deriv;
            d_hi = self.dt * params.var_hi() * gd.deriv;
        }
        Ok(if c_hi >= c_lo {
            SupTerm {
                value: c_hi,
                slope: d_hi,
                sigma_star: params.var_hi(),
                c_lo,
                c_hi,
            }
        } else {
            SupTerm {
                value: c_lo,
                slope: d_lo,
                sigma_star: params.var_lo(),
                c_lo,
                c_hi,
            }
        })
    }

    /// `F(y) = y − T*(y) − dt·f − dt·n·(y − L)⁻ + dt·n·(y − U)⁺`.
    fn residual(&self, y: f64) -> Result<Residual, SolverError> {
        let sup = self.sup_term(y)?;
        let f = evaluate_with_derivative(self.spec.driver(), &Bindings::txyz(self.t, self.x, y, self.z), Var::Y)
            .map_err(|e| self.eval_err(Role::Driver, e))?;
        let mut value = y - sup.value - self.dt * f.value;
        let mut slope = 1.0 - sup.slope - self.dt * f.deriv;
        if let Some(l) = self.lower {
            if y < l {
                value -= self.dt * self.n * (l - y);
                slope += self.dt * self.n;
            }
        }
        if let Some(u) = self.upper {
            if y > u {
                value += self.dt * self.n * (y - u);
                slope += self.dt * self.n;
            }
        }
        if !value.is_finite() {
            return Err(SolverError::NonFinite {
                step: self.step,
                offset: self.offset,
            });
        }
        Ok(Residual { value, slope })
    }

    /// Bracketed Newton with bisection fallback. `F` is strictly increasing
    /// with slope at least `slope_floor`.
    fn solve(&self, guess: f64, slope_floor: f64) -> Result<f64, SolverError> {
        let tol = |y: f64| ROOT_TOLERANCE * (1.0 + y.abs());
        let r0 = self.residual(guess)?;
        if r0.value == 0.0 {
            return Ok(guess);
        }
        let not_converged = |y, residual| SolverError::RootNotConverged {
            step: self.step,
            offset: self.offset,
            y,
            residual,
        };

        // Bracket [lo, hi] with F(lo) < 0 < F(hi).
        let mut width = r0.value.abs() / slope_floor;
        let (mut lo, mut hi) = (guess, guess);
        let mut expansions = 0;
        loop {
            let probe = if r0.value > 0.0 { guess - width } else { guess + width };
            let rp = self.residual(probe)?;
            if rp.value == 0.0 {
                return Ok(probe);
            }
            if (rp.value < 0.0) == (r0.value > 0.0) {
                if r0.value > 0.0 {
                    lo = probe;
                } else {
                    hi = probe;
                }
                break;
            }
            expansions += 1;
            if expansions > MAX_BRACKET_EXPANSIONS {
                return Err(not_converged(probe, rp.value));
            }
            width *= 2.0;
        }

        let (mut y, mut r) = (guess, r0);
        // Consecutive Newton steps that failed to halve the bracket; at kinks
        // Newton can cycle, so bisection takes over after two of them.
        let mut stalls = 0;
        for _ in 0..MAX_ROOT_ITERATIONS {
            let width = hi - lo;
            let newton = y - r.value / r.slope;
            let use_newton = stalls < 2 && r.slope > 0.0 && newton >= lo && newton <= hi;
            let candidate = if use_newton {
                if (newton - y).abs() <= f64::EPSILON * (1.0 + y.abs()) {
                    return Ok(newton);
                }
                newton
            } else {
                0.5 * (lo + hi)
            };
            let rc = self.residual(candidate)?;
            if rc.value == 0.0 {
                return Ok(candidate);
            }
            if rc.value < 0.0 {
                lo = candidate;
            } else {
                hi = candidate;
            }
            stalls = if use_newton && hi - lo > 0.5 * width {
                stalls + 1
            } else {
                0
            };
            if hi - lo <= tol(candidate) {
                return Ok(candidate);
            }
            y = candidate;
            r = rc;
        }
        Err(not_converged(y, r.value))
    }
}

fn check_next_slice(next: &[f64], step: usize) -> Result<(), SolverError> {
    if next.len() != LatticeSpec::width(step + 1) {
        return Err(SolverError::LatticeMismatch(format!(
            "slice at step {} has {} entries, expected {}",
            step + 1,
            next.len(),
            LatticeSpec::width(step + 1)
        )));
    }
    if let Some(i) = next.iter().position(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite {
            step: step + 1,
            offset: LatticeSpec::offset(step + 1, i),
        });
    }
    Ok(())
}

fn node_equation<'a>(
    spec: &'a ProblemSpec,
    lattice: &LatticeSpec,
    next: &[f64],
    step: usize,
    i: usize,
    n: f64,
    with_obstacles: bool,
) -> Result<NodeEquation<'a>, SolverError> {
    let params = spec.params();
    let offset = LatticeSpec::offset(step, i);
    let (vm, v0, vp) = (next[i], next[i + 1], next[i + 2]);
    let (lower, upper) = if with_obstacles {
        (
            spec.obstacle(Role::Lower, lattice, step, offset)?,
            spec.obstacle(Role::Upper, lattice, step, offset)?,
        )
    } else {
        (None, None)
    };
    Ok(NodeEquation {
        spec,
        step,
        offset,
        t: lattice.time(step),
        x: lattice.x(offset),
        z: (vp - vm) / (2.0 * lattice.h()),
        e_lo: params.trinomial_average(params.var_lo(), vm, v0, vp),
        e_hi: params.trinomial_average(params.var_hi(), vm, v0, vp),
        dt: lattice.dt(),
        n,
        lower,
        upper,
    })
}

/// One backward step of the penalized scheme from slice `step + 1` to `step`.
pub fn backward_step(
    next: &[f64],
    step: usize,
    n: PenaltyLevel,
    spec: &ProblemSpec,
    lattice: &LatticeSpec,
) -> Result<StepSlice, SolverError> {
    spec.check_lattice(lattice)?;
    check_next_slice(next, step)?;
    let slope_floor = 1.0 - lattice.dt() * spec.effective_lipschitz();
    let n = n.value();
    let nodes = map_indexed(LatticeSpec::width(step), |i| {
        let eq = node_equation(spec, lattice, next, step, i, n, true)?;
        let guess = eq.e_hi.max(eq.e_lo);
        let y = eq.solve(guess, slope_floor)?;
        let sup = eq.sup_term(y)?;
        Ok::<_, SolverError>(NodeOut {
            y,
            z: eq.z,
            a_plus: eq.lower.map_or(0.0, |l| n * (l - y).max(0.0)),
            a_minus: eq.upper.map_or(0.0, |u| n * (y - u).max(0.0)),
            dk_lo: sup.c_lo - sup.value,
            dk_hi: sup.c_hi - sup.value,
            sigma_star: sup.sigma_star,
        })
    })?;
    Ok(StepSlice::from_nodes(nodes))
}

/// Solves the penalized problem at level `n` on every node.
pub fn solve_penalized(
    spec: &ProblemSpec,
    n: PenaltyLevel,
    lattice: &LatticeSpec,
) -> Result<SolutionBundle, SolverError> {
    spec.validate_on(lattice)?;
    let steps = lattice.steps();
    let terminal = terminal_slice(lattice, spec.terminal())?;
    let width = LatticeSpec::width(steps);

    let mut slices: Vec<StepSlice> = vec![StepSlice::default(); steps + 1];
    slices[steps] = StepSlice {
        y: terminal,
        z: vec![0.0; width],
        a_plus: vec![0.0; width],
        a_minus: vec![0.0; width],
        dk_lo: vec![0.0; width],
        dk_hi: vec![0.0; width],
        sigma_star: vec![spec.params().var_hi(); width],
    };
    for k in (0..steps).rev() {
        slices[k] = backward_step(&slices[k + 1].y, k, n, spec, lattice)?;
    }

    let field =
        |get: fn(&StepSlice) -> &Vec<f64>| NodeGrid::from_slices(slices.iter().map(|s| get(s).clone()).collect());
    Ok(SolutionBundle {
        y: field(|s| &s.y)?,
        z: field(|s| &s.z)?,
        a_plus: field(|s| &s.a_plus)?,
        a_minus: field(|s| &s.a_minus)?,
        dk_lo: field(|s| &s.dk_lo)?,
        dk_hi: field(|s| &s.dk_hi)?,
        sigma_star: field(|s| &s.sigma_star)?,
        meta: BundleMeta {
            spec: spec.clone(),
            lattice: *lattice,
            penalty: n,
        },
    })
}

/// Solution of the projection scheme `Y = clamp(y_free, L, U)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSolution {
    pub y: NodeGrid,
    /// `(L − y_free)⁺ / dt`.
    pub slack_plus: NodeGrid,
    /// `(y_free − U)⁺ / dt`.
    pub slack_minus: NodeGrid,
}

/// Backward recursion where the unconstrained implicit step is projected
/// onto `[L, U]`; the `n → ∞` limit of the penalized scheme.
pub fn solve_projected(spec: &ProblemSpec, lattice: &LatticeSpec) -> Result<ProjectedSolution, SolverError> {
    spec.validate_on(lattice)?;
    let steps = lattice.steps();
    let dt = lattice.dt();
    let slope_floor = 1.0 - dt * spec.effective_lipschitz();
    let mut y = vec![Vec::new(); steps + 1];
    let mut slack_plus = vec![Vec::new(); steps + 1];
    let mut slack_minus = vec![Vec::new(); steps + 1];
    y[steps] = terminal_slice(lattice, spec.terminal())?;
    slack_plus[steps] = vec![0.0; LatticeSpec::width(steps)];
    slack_minus[steps] = vec![0.0; LatticeSpec::width(steps)];

    for k in (0..steps).rev() {
        let next = &y[k + 1];
        let nodes = map_indexed(LatticeSpec::width(k), |i| {
            let eq = node_equation(spec, lattice, next, k, i, 0.0, false)?;
            let free = eq.solve(eq.e_hi.max(eq.e_lo), slope_floor)?;
            let j = LatticeSpec::offset(k, i);
            let lower = spec.obstacle(Role::Lower, lattice, k, j)?.unwrap_or(f64::NEG_INFINITY);
            let upper = spec.obstacle(Role::Upper, lattice, k, j)?.unwrap_or(f64::INFINITY);
            Ok::<_, SolverError>((
                free.max(lower).min(upper),
                (lower - free).max(0.0) / dt,
                (free - upper).max(0.0) / dt,
            ))
        })?;
        y[k] = nodes.iter().map(|n| n.0).collect();
        slack_plus[k] = nodes.iter().map(|n| n.1).collect();
        slack_minus[k] = nodes.iter().map(|n| n.2).collect();
    }
    Ok(ProjectedSolution {
        y: NodeGrid::from_slices(y)?,
        slack_plus: NodeGrid::from_slices(slack_plus)?,
        slack_minus: NodeGrid::from_slices(slack_minus)?,
    })
}

/// Penalized solutions over increasing `n` plus the projected limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Ladder {
    pub bundles: Vec<SolutionBundle>,
    pub projected: ProjectedSolution,
}

impl Ladder {
    pub fn levels(&self) -> Vec<f64> {
        self.bundles.iter().map(|b| b.meta.penalty.value()).collect()
    }
}

pub fn penalty_ladder(spec: &ProblemSpec, ns: &[PenaltyLevel], lattice: &LatticeSpec) -> Result<Ladder, SolverError> {
    if ns.is_empty() {
        return Err(SolverError::EmptyLadder);
    }
    if ns.windows(2).any(|w| w[1].value() <= w[0].value()) {
        return Err(SolverError::LadderNotIncreasing);
    }
    let (bundles, projected) = rayon::join(
        || {
            ns.par_iter()
                .map(|&n| solve_penalized(spec, n, lattice))
                .collect::<Vec<_>>()
        },
        || solve_projected(spec, lattice),
    );
    Ok(Ladder {
        bundles: bundles.into_iter().collect::<Result<_, _>>()?,
        projected: projected?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Down,
    Stay,
    Up,
}

impl Move {
    pub fn delta(self) -> i64 {
        match self {
            Move::Down => -1,
            Move::Stay => 0,
            Move::Up => 1,
        }
    }
}

/// State along a lattice path after `step` moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessPoint {
    pub step: usize,
    pub t: f64,
    pub b: f64,
    pub y: f64,
    pub z: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    pub k: f64,
}

/// Follows `path` (one move per step, `N` moves) from the root and
/// accumulates `A^{n,±}` and `Kⁿ` along it, with `dK` taken under the
/// variance `policy` picks at each visited node.
pub fn extract_processes(
    bundle: &SolutionBundle,
    policy: &ScenarioPolicy,
    path: &[Move],
) -> Result<Vec<ProcessPoint>, SolverError> {
    let lattice = &bundle.meta.lattice;
    if path.len() != lattice.steps() {
        return Err(SolverError::PathMismatch(format!(
            "{} moves for a lattice with {} steps",
            path.len(),
            lattice.steps()
        )));
    }
    if let ScenarioPolicy::Field(grid) = policy {
        if grid.steps() != lattice.steps() {
            return Err(SolverError::PathMismatch("policy field has a different shape".into()));
        }
    }
    let params = bundle.meta.spec.params();
    let dt = lattice.dt();
    let point = |k: usize, j: i64, a_plus, a_minus, kk| ProcessPoint {
        step: k,
        t: lattice.time(k),
        b: lattice.x(j),
        y: bundle.y.get(k, j),
        z: bundle.z.get(k, j),
        a_plus,
        a_minus,
        k: kk,
    };
    let (mut j, mut a_plus, mut a_minus, mut k_cum) = (0i64, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(path.len() + 1);
    out.push(point(0, 0, 0.0, 0.0, 0.0));
    for (k, mv) in path.iter().enumerate() {
        a_plus += bundle.a_plus.get(k, j) * dt;
        a_minus += bundle.a_minus.get(k, j) * dt;
        let s2 = policy.sigma_sq(params, k, j);
        k_cum += if s2 == params.var_hi() {
            bundle.dk_hi.get(k, j)
        } else {
            bundle.dk_lo.get(k, j)
        };
        j += mv.delta();
        out.push(point(k + 1, j, a_plus, a_minus, k_cum));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::conditional_g_expectation;

    fn params() -> GParams {
        GParams::new(0.5, 1.0).unwrap()
    }

    fn pen(n: f64) -> PenaltyLevel {
        PenaltyLevel::new(n).unwrap()
    }

    #[test]
    fn variable_restrictions() {
        let p = params();
        assert!(matches!(
            ProblemSpec::parse(p, 1.0, "x + t"),
            Err(SolverError::VariableNotAllowed {
                role: Role::Terminal,
                var: Var::T
            })
        ));
        let spec = ProblemSpec::parse(p, 1.0, "x").unwrap();
        assert!(matches!(
            spec.clone().lower_src("y"),
            Err(SolverError::VariableNotAllowed {
                role: Role::Lower,
                var: Var::Y
            })
        ));
        assert!(spec.clone().driver_src("t*x*y*z").is_ok());
        assert!(matches!(
            spec.driver_src("y +"),
            Err(SolverError::Parse { role: Role::Driver, .. })
        ));
    }

    #[test]
    fn step_without_obstacles_is_one_step_sup() {
        let p = params();
        let spec = ProblemSpec::parse(p, 1.0, "x^2").unwrap();
        let lat = spec.lattice(4, 0.0).unwrap();
        let next: Vec<f64> = (0..7).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = backward_step(&next, 2, pen(10.0), &spec, &lat).unwrap();
        for i in 0..5 {
            let sup = crate::lattice::one_step_sup(&p, lat.dt(), lat.h(), next[i], next[i + 1], next[i + 2]).unwrap();
            assert_eq!(s.y[i], sup.value);
            assert_eq!(s.sigma_star[i], sup.sigma_star_sq);
            assert_eq!((s.a_plus[i], s.a_minus[i]), (0.0, 0.0));
        }
    }

    #[test]
    fn step_inside_band() {
        let spec = ProblemSpec::parse(params(), 1.0, "2")
            .unwrap()
            .lower_src("1")
            .unwrap()
            .upper_src("3")
            .unwrap();
        let lat = spec.lattice(5, 0.0).unwrap();
        let s = backward_step(&[2.0; 7], 2, pen(50.0), &spec, &lat).unwrap();
        for i in 0..5 {
            assert_eq!(s.y[i], 2.0);
            assert_eq!(
                (s.a_plus[i], s.a_minus[i], s.dk_lo[i], s.dk_hi[i]),
                (0.0, 0.0, 0.0, 0.0)
            );
        }
    }

    #[test]
    fn step_below_lower_obstacle_closed_form() {
        // dt·n = 1: y = c + (c + 1 − y)  ⇒  y = c + 1/2
        let c = 0.7;
        let spec = ProblemSpec::parse(params(), 1.0, "0.7")
            .unwrap()
            .lower_src("1.7")
            .unwrap();
        let lat = spec.lattice(4, 0.0).unwrap();
        let n = pen(1.0 / lat.dt());
        let s = backward_step(&[c; 5], 1, n, &spec, &lat).unwrap();
        for &y in &s.y {
            assert!((y - (c + 0.5)).abs() < 1e-14, "{y}");
        }
        assert!((s.a_plus[0] - n.value() * 0.5).abs() < 1e-10);
    }

    #[test]
    fn unconstrained_matches_g_expectation() {
        let p = params();
        let spec = ProblemSpec::parse(p, 1.0, "x^2")
            .unwrap()
            .lower_src("-1e6")
            .unwrap()
            .upper_src("1e6")
            .unwrap();
        let lat = spec.lattice(25, 0.0).unwrap();
        for n in [0.0, 3.0, 1e4] {
            let b = solve_penalized(&spec, pen(n), &lat).unwrap();
            assert!((b.y0() - 1.0).abs() < 1e-12);
            assert_eq!(crate::lattice::node_sup(&b.a_plus, f64::abs), 0.0);
            assert_eq!(crate::lattice::node_sup(&b.a_minus, f64::abs), 0.0);
        }
        let g = conditional_g_expectation(&lat, &p, spec.terminal()).unwrap();
        let b = solve_penalized(&spec, pen(7.0), &lat).unwrap();
        assert_eq!(b.y, g);
    }

    #[test]
    fn linear_ode_driver() {
        let spec = ProblemSpec::parse(params(), 1.0, "1")
            .unwrap()
            .driver_src("-0.05*y")
            .unwrap()
            .with_lipschitz(0.05)
            .unwrap();
        let steps = 200;
        let lat = spec.lattice(steps, 0.0).unwrap();
        let b = solve_penalized(&spec, pen(0.0), &lat).unwrap();
        // Implicit Euler: y_k = y_{k+1} / (1 + 0.05·dt).
        let exact_discrete = (1.0 + 0.05 * lat.dt()).powi(-(steps as i32));
        assert!(
            (b.y0() - exact_discrete).abs() < 1e-13,
            "{} vs {exact_discrete}",
            b.y0()
        );
        assert!((b.y0() - (-0.05f64).exp()).abs() < 0.05 * lat.dt());
    }

    #[test]
    fn nonlinear_driver_residual_is_small() {
        let spec = ProblemSpec::parse(params(), 1.0, "sqrt(1 + x^2)")
            .unwrap()
            .driver_src("0.5*abs(y) - 0.2*exp(-y^2) + 0.1*z")
            .unwrap()
            .with_lipschitz(0.6)
            .unwrap();
        let lat = spec.lattice(20, 0.0).unwrap();
        let next: Vec<f64> = (0..41).map(|i| lat.node_x(20, i).abs()).collect();
        let s = backward_step(&next, 19, pen(0.0), &spec, &lat).unwrap();
        let p = spec.params();
        for i in 0..39 {
            let y = s.y[i];
            let t_star = p
                .trinomial_average(p.var_lo(), next[i], next[i + 1], next[i + 2])
                .max(p.trinomial_average(p.var_hi(), next[i], next[i + 1], next[i + 2]));
            let f = 0.5 * y.abs() - 0.2 * (-y * y).exp() + 0.1 * s.z[i];
            assert!((y - t_star - lat.dt() * f).abs() < 1e-13 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn lipschitz_precondition() {
        let spec = ProblemSpec::parse(params(), 1.0, "1")
            .unwrap()
            .driver_src("-5*y")
            .unwrap()
            .with_lipschitz(5.0)
            .unwrap();
        let lat = spec.lattice(4, 0.0).unwrap();
        assert!(matches!(
            solve_penalized(&spec, pen(1.0), &lat),
            Err(SolverError::LipschitzViolation { .. })
        ));
        let fine = spec.lattice(10, 0.0).unwrap();
        assert!(solve_penalized(&spec, pen(1.0), &fine).is_ok());
    }

    #[test]
    fn obstacle_ordering_is_validated() {
        let spec = ProblemSpec::parse(params(), 1.0, "0")
            .unwrap()
            .lower_src("x")
            .unwrap()
            .upper_src("0.5")
            .unwrap();
        let lat = spec.lattice(4, 0.0).unwrap();
        assert!(matches!(
            solve_penalized(&spec, pen(1.0), &lat),
            Err(SolverError::ObstacleOrder { .. })
        ));
        let spec = ProblemSpec::parse(params(), 1.0, "x")
            .unwrap()
            .lower_src("-1")
            .unwrap()
            .upper_src("1")
            .unwrap();
        assert!(matches!(
            solve_penalized(&spec, pen(1.0), &spec.lattice(16, 0.0).unwrap()),
            Err(SolverError::TerminalOutsideObstacles { .. })
        ));
        let clamped = spec.with_clamped_terminal();
        assert!(solve_penalized(&clamped, pen(1.0), &clamped.lattice(16, 0.0).unwrap()).is_ok());
    }

    #[test]
    fn projected_examples() {
        let spec = ProblemSpec::parse(params(), 1.0, "0.3")
            .unwrap()
            .lower_src("-0.7")
            .unwrap()
            .upper_src("1.3")
            .unwrap();
        let lat = spec.lattice(8, 0.0).unwrap();
        let p = solve_projected(&spec, &lat).unwrap();
        assert_eq!(crate::lattice::node_sup(&p.y, |v| (v - 0.3).abs()), 0.0);
        assert_eq!(crate::lattice::node_sup(&p.slack_plus, f64::abs), 0.0);
        assert_eq!(crate::lattice::node_sup(&p.slack_minus, f64::abs), 0.0);

        let phi = "0.2*t - 0.1*x";
        let spec = ProblemSpec::parse(params(), 1.0, "0.2 - 0.1*x")
            .unwrap()
            .lower_src(phi)
            .unwrap()
            .upper_src(phi)
            .unwrap();
        let lat = spec.lattice(12, 0.0).unwrap();
        let p = solve_projected(&spec, &lat).unwrap();
        for (k, j, v) in p.y.nodes() {
            assert!((v - (0.2 * lat.time(k) - 0.1 * lat.x(j))).abs() < 1e-15);
        }
    }

    #[test]
    fn ladder_preconditions() {
        let spec = ProblemSpec::parse(params(), 1.0, "x").unwrap();
        let lat = spec.lattice(4, 0.0).unwrap();
        assert_eq!(penalty_ladder(&spec, &[], &lat), Err(SolverError::EmptyLadder));
        assert_eq!(
            penalty_ladder(&spec, &[pen(4.0), pen(4.0)], &lat),
            Err(SolverError::LadderNotIncreasing)
        );
        let single = penalty_ladder(&spec, &[pen(4.0)], &lat).unwrap();
        assert_eq!(single.bundles[0], solve_penalized(&spec, pen(4.0), &lat).unwrap());
        assert!(PenaltyLevel::new(-1.0).is_err());
    }

    #[test]
    fn process_extraction() {
        let spec = ProblemSpec::parse(params(), 1.0, "x^2").unwrap();
        let lat = spec.lattice(6, 0.0).unwrap();
        let b = solve_penalized(&spec, pen(16.0), &lat).unwrap();
        let path = [Move::Up, Move::Up, Move::Stay, Move::Down, Move::Down, Move::Down];

        let worst = extract_processes(&b, &b.argmax_policy(), &path).unwrap();
        assert_eq!(worst.len(), 7);
        assert!(worst.iter().all(|p| p.k == 0.0 && p.a_plus == 0.0 && p.a_minus == 0.0));
        assert!((worst[6].b - lat.x(-1)).abs() < 1e-15);

        // Δ² = 2 everywhere, so dK_lo = (σ̲² − σ̄²)·dt per step.
        let lo = extract_processes(&b, &ScenarioPolicy::ConstantLo, &path).unwrap();
        for w in lo.windows(2) {
            assert!(w[1].k < w[0].k);
            assert!((w[1].k - w[0].k + 0.75 * lat.dt()).abs() < 1e-14);
        }
        assert!(matches!(
            extract_processes(&b, &ScenarioPolicy::ConstantHi, &path[..3]),
            Err(SolverError::PathMismatch(_))
        ));
    }

    #[test]
    fn g_driver_adds_quadratic_variation_term() {
        // g ≡ c with ξ = 0: Y_0 = max_σ c·σ²·T.
        let p = params();
        for (c, expected) in [(1.0, 1.0), (-1.0, -0.25)] {
            let spec = ProblemSpec::parse(p, 1.0, "0")
                .unwrap()
                .with_driver_g(Some(Expr::Const(c)))
                .unwrap();
            let lat = spec.lattice(10, 0.0).unwrap();
            let b = solve_penalized(&spec, pen(0.0), &lat).unwrap();
            assert!((b.y0() - expected).abs() < 1e-13, "{}", b.y0());
        }
    }

    #[test]
    fn bundle_csv_header_and_rows() {
        let spec = ProblemSpec::parse(params(), 1.0, "x").unwrap();
        let lat = spec.lattice(2, 0.0).unwrap();
        let b = solve_penalized(&spec, pen(1.0), &lat).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,offset,x,Y,Z,a_plus,a_minus,dK_lo,dK_hi,sigma_star_sq");
        assert_eq!(lines.len(), 1 + 1 + 3 + 5);
    }
}
