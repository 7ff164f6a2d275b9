//! Solver-agnostic second-order cone programs.
//!
//! A [`ConicProgram`] holds named variables, a linear objective plus separable
//! convex quadratic terms, and tagged constraints of three kinds:
//!
//! * `Eq(g)`: `g(x) = 0`,
//! * `Le(g)`: `g(x) ≤ 0`,
//! * `Soc { t, u }`: `‖u(x)‖₂ ≤ t(x)`.
//!
//! Dual sign convention: the Lagrangian is
//! `L = f(x) + Σ λ_i g_i(x) + Σ_k z_k (‖u_k(x)‖ − t_k(x))`, so inequality and
//! cone multipliers are nonnegative and equality multipliers are free. The
//! scalar dual reported for a cone is `z_0`, the multiplier on `t`; the full
//! cone dual `(z_0, z_u)` with `z_u = −z_0 u/‖u‖` at a non-degenerate point is
//! kept as well.
//!
//! Quadratic terms `c x²` are either handed to the engine as a diagonal
//! quadratic form (the default) or lowered to rotated-cone epigraphs so the
//! engine only sees a linear objective. Both give the same optimum; the
//! native form keeps the duals accurate to the solver tolerance, while cone
//! complementarity only pins epigraph duals to about its square root.

use std::collections::HashMap;
use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use serde::Serialize;

use crate::error::{Error, Result};

/// Solver tolerance.
pub const SOLVER_TOL: f64 = 1e-10;

/// Acceptance tolerance on scaled residuals.
pub const ACCEPT_TOL: f64 = 1e-6;

/// Acceptance tolerance when quadratic terms are lowered to epigraph cones,
/// whose duals are only pinned to about the square root of the engine
/// tolerance.
pub const EPIGRAPH_ACCEPT_TOL: f64 = 1e-4;

/// Duals below this are treated as zero when classifying binding constraints.
pub const BINDING_DUAL_TOL: f64 = 1e-7;

/// Affine expression `Σ a_j x_j + c`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        LinExpr { terms: Vec::new(), constant: c }
    }

    pub fn var(j: usize) -> Self {
        LinExpr { terms: vec![(j, 1.0)], constant: 0.0 }
    }

    pub fn term(mut self, j: usize, a: f64) -> Self {
        self.add_term(j, a);
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn add_term(&mut self, j: usize, a: f64) {
        if a != 0.0 {
            self.terms.push((j, a));
        }
    }

    pub fn add_expr(&mut self, other: &LinExpr, scale: f64) {
        for &(j, a) in &other.terms {
            self.add_term(j, a * scale);
        }
        self.constant += other.constant * scale;
    }

    pub fn scaled(&self, s: f64) -> LinExpr {
        let mut out = LinExpr::new();
        out.add_expr(self, s);
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum::<f64>() + self.constant
    }

    /// Merges repeated variables and drops zeros.
    pub fn compact(&self) -> LinExpr {
        let mut map: Vec<(usize, f64)> = Vec::with_capacity(self.terms.len());
        let mut sorted = self.terms.clone();
        sorted.sort_by_key(|&(j, _)| j);
        for (j, a) in sorted {
            match map.last_mut() {
                Some((k, b)) if *k == j => *b += a,
                _ => map.push((j, a)),
            }
        }
        map.retain(|&(_, a)| a != 0.0);
        LinExpr { terms: map, constant: self.constant }
    }

    fn max_coeff(&self) -> f64 {
        self.terms.iter().fold(self.constant.abs(), |m, &(_, a)| m.max(a.abs()))
    }
}

/// Constraint body.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ConstraintKind {
    Eq(LinExpr),
    Le(LinExpr),
    Soc { t: LinExpr, u: Vec<LinExpr> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constraint {
    pub tag: String,
    pub kind: ConstraintKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variable {
    pub name: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// A second-order cone program in minimization form.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConicProgram {
    pub variables: Vec<Variable>,
    pub objective: Vec<f64>,
    pub objective_constant: f64,
    /// Separable quadratic objective terms `c x_j²`.
    pub quadratic: Vec<(usize, f64)>,
    pub constraints: Vec<Constraint>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// Adds a variable; finite bounds become tagged `Le` rows named
    /// `lb:<name>` and `ub:<name>`.
    pub fn add_var(&mut self, name: impl Into<String>, lower: Option<f64>, upper: Option<f64>) -> usize {
        let name = name.into();
        let j = self.variables.len();
        self.variables.push(Variable { name: name.clone(), lower, upper });
        self.objective.push(0.0);
        if let Some(l) = lower {
            self.add_le(format!("lb:{name}"), LinExpr::var(j).scaled(-1.0).plus(l));
        }
        if let Some(u) = upper {
            self.add_le(format!("ub:{name}"), LinExpr::var(j).plus(-u));
        }
        j
    }

    pub fn add_eq(&mut self, tag: impl Into<String>, g: LinExpr) -> usize {
        self.push(tag.into(), ConstraintKind::Eq(g))
    }

    pub fn add_le(&mut self, tag: impl Into<String>, g: LinExpr) -> usize {
        self.push(tag.into(), ConstraintKind::Le(g))
    }

    pub fn add_soc(&mut self, tag: impl Into<String>, t: LinExpr, u: Vec<LinExpr>) -> usize {
        self.push(tag.into(), ConstraintKind::Soc { t, u })
    }

    fn push(&mut self, tag: String, kind: ConstraintKind) -> usize {
        self.constraints.push(Constraint { tag, kind });
        self.constraints.len() - 1
    }

    pub fn set_cost(&mut self, j: usize, c: f64) {
        self.objective[j] = c;
    }

    pub fn add_cost(&mut self, j: usize, c: f64) {
        self.objective[j] += c;
    }

    pub fn add_quadratic(&mut self, j: usize, c: f64) {
        self.quadratic.push((j, c));
    }

    /// Index of the constraint with a given tag.
    pub fn find(&self, tag: &str) -> Option<usize> {
        self.constraints.iter().position(|c| c.tag == tag)
    }

    /// Objective value at `x`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            + self.quadratic.iter().map(|&(j, c)| c * x[j] * x[j]).sum::<f64>()
            + self.objective_constant
    }

    /// Checks dimensions, finiteness and tag uniqueness.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        if self.objective.len() != n {
            return Err(Error::IndexMismatch(format!("objective has {} entries for {n} variables", self.objective.len())));
        }
        let check = |e: &LinExpr, tag: &str| -> Result<()> {
            for &(j, a) in &e.terms {
                if j >= n {
                    return Err(Error::IndexMismatch(format!("constraint {tag} references variable {j} of {n}")));
                }
                if !a.is_finite() {
                    return Err(Error::NonPhysicalInput(format!("constraint {tag} has a non-finite coefficient")));
                }
            }
            if e.constant.is_finite() {
                Ok(())
            } else {
                Err(Error::NonPhysicalInput(format!("constraint {tag} has a non-finite constant")))
            }
        };
        let mut seen = HashMap::new();
        for c in &self.constraints {
            if seen.insert(c.tag.as_str(), ()).is_some() {
                return Err(Error::Validation(format!("duplicate constraint tag {}", c.tag)));
            }
            match &c.kind {
                ConstraintKind::Eq(g) | ConstraintKind::Le(g) => check(g, &c.tag)?,
                ConstraintKind::Soc { t, u } => {
                    check(t, &c.tag)?;
                    for e in u {
                        check(e, &c.tag)?;
                    }
                }
            }
        }
        for &(j, c) in &self.quadratic {
            if j >= n {
                return Err(Error::IndexMismatch(format!("quadratic term references variable {j} of {n}")));
            }
            if c < 0.0 {
                return Err(Error::NegativeCurvature(self.variables[j].name.clone()));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonPhysicalInput("non-finite objective coefficient".into()));
        }
        Ok(())
    }

    /// Writes the program in the conic benchmark format (CBF, version 3).
    /// Quadratic terms are written in their epigraph form.
    pub fn to_cbf(&self) -> Result<String> {
        let lowered = self.lowered(QuadraticForm::Epigraph)?;
        let p = &lowered.program;
        let rows = Rows::build(p);
        let mut s = String::new();
        let _ = writeln!(s, "VER\n3\n\nOBJSENSE\nMIN\n\nVAR\n{} 1\nF {}\n", p.n_vars(), p.n_vars());
        let _ = writeln!(s, "CON\n{} {}", rows.b.len(), rows.blocks.len());
        for blk in &rows.blocks {
            let _ = match blk {
                Block::Zero(k) => writeln!(s, "L= {k}"),
                Block::Nonneg(k) => writeln!(s, "L+ {k}"),
                Block::Soc(k) => writeln!(s, "Q {k}"),
            };
        }
        let obj: Vec<(usize, f64)> = p.objective.iter().copied().enumerate().filter(|&(_, c)| c != 0.0).collect();
        let _ = writeln!(s, "\nOBJACOORD\n{}", obj.len());
        for (j, c) in obj {
            let _ = writeln!(s, "{j} {c:e}");
        }
        if p.objective_constant != 0.0 {
            let _ = writeln!(s, "\nOBJBCOORD\n{:e}", p.objective_constant);
        }
        // CBF rows read `Ax + b ∈ K`; the internal rows read `b − Ax ∈ K`.
        let _ = writeln!(s, "\nACOORD\n{}", rows.a.len());
        for &(i, j, v) in &rows.a {
            let _ = writeln!(s, "{i} {j} {:e}", -v);
        }
        let nz: Vec<(usize, f64)> = rows.b.iter().copied().enumerate().filter(|&(_, v)| v != 0.0).collect();
        let _ = writeln!(s, "\nBCOORD\n{}", nz.len());
        for (i, v) in nz {
            let _ = writeln!(s, "{i} {v:e}");
        }
        Ok(s)
    }

    fn lowered(&self, form: QuadraticForm) -> Result<Lowered> {
        self.validate()?;
        if form == QuadraticForm::Native {
            let mut p = self.clone();
            p.quadratic = merge_quadratic(&self.quadratic)?;
            return Ok(Lowered { program: p, n_original: self.n_vars(), n_original_constraints: self.constraints.len() });
        }
        let mut p = ConicProgram {
            variables: self.variables.clone(),
            objective: self.objective.clone(),
            objective_constant: self.objective_constant,
            quadratic: Vec::new(),
            constraints: self.constraints.clone(),
        };
        let blocks = epigraph_quadratic(&self.quadratic, self.n_vars())?;
        for blk in &blocks {
            let name = format!("epi:{}", self.variables[blk.var].name);
            let t = p.variables.len();
            debug_assert_eq!(t, blk.aux);
            p.variables.push(Variable { name: name.clone(), lower: None, upper: None });
            p.objective.push(blk.coeff);
            p.constraints.push(Constraint { tag: name, kind: blk.cone.clone() });
        }
        Ok(Lowered { program: p, n_original: self.n_vars(), n_original_constraints: self.constraints.len() })
    }
}

/// Epigraph of one quadratic term: `c x²` is replaced by `c·s` with the
/// rotated cone `x² ≤ s` written as `‖(2x, s − 1)‖ ≤ s + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpigraphBlock {
    pub var: usize,
    pub aux: usize,
    pub coeff: f64,
    pub cone: ConstraintKind,
}

/// Builds epigraph blocks for the quadratic terms, numbering auxiliary
/// variables from `first_aux`. Zero coefficients emit nothing.
pub fn epigraph_quadratic(terms: &[(usize, f64)], first_aux: usize) -> Result<Vec<EpigraphBlock>> {
    Ok(merge_quadratic(terms)?
        .into_iter()
        .enumerate()
        .map(|(k, (j, c))| {
            let aux = first_aux + k;
            EpigraphBlock {
                var: j,
                aux,
                coeff: c,
                cone: ConstraintKind::Soc {
                    t: LinExpr::var(aux).plus(1.0),
                    u: vec![LinExpr::new().term(j, 2.0), LinExpr::var(aux).plus(-1.0)],
                },
            }
        })
        .collect())
}

/// Sums repeated quadratic terms and drops zeros.
fn merge_quadratic(terms: &[(usize, f64)]) -> Result<Vec<(usize, f64)>> {
    let mut merged: Vec<(usize, f64)> = Vec::new();
    for &(j, c) in terms {
        if c < 0.0 || !c.is_finite() {
            return Err(Error::NegativeCurvature(format!("x{j}")));
        }
        match merged.iter_mut().find(|(k, _)| *k == j) {
            Some((_, b)) => *b += c,
            None => merged.push((j, c)),
        }
    }
    merged.retain(|&(_, c)| c > 0.0);
    Ok(merged)
}

/// How quadratic objective terms reach the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum QuadraticForm {
    #[default]
    Native,
    Epigraph,
}

struct Lowered {
    program: ConicProgram,
    n_original: usize,
    n_original_constraints: usize,
}

enum Block {
    Zero(usize),
    Nonneg(usize),
    Soc(usize),
}

/// Constraint rows in the engine form `b − Ax ∈ K`, grouped into blocks.
struct Rows {
    a: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    blocks: Vec<Block>,
    /// First row of each constraint.
    start: Vec<usize>,
}

impl Rows {
    fn build(p: &ConicProgram) -> Rows {
        let mut rows = Rows { a: Vec::new(), b: Vec::new(), blocks: Vec::new(), start: Vec::new() };
        // Engine row for `s = b − Ax = expr`: A = −coeffs, b = constant.
        let push = |rows: &mut Rows, e: &LinExpr| {
            let i = rows.b.len();
            for &(j, a) in &e.compact().terms {
                rows.a.push((i, j, -a));
            }
            rows.b.push(e.constant);
        };
        for c in &p.constraints {
            rows.start.push(rows.b.len());
            match &c.kind {
                // g = 0  →  s = g ∈ {0}
                ConstraintKind::Eq(g) => {
                    push(&mut rows, g);
                    rows.blocks.push(Block::Zero(1));
                }
                // g ≤ 0  →  s = −g ≥ 0
                ConstraintKind::Le(g) => {
                    push(&mut rows, &g.scaled(-1.0));
                    rows.blocks.push(Block::Nonneg(1));
                }
                ConstraintKind::Soc { t, u } => {
                    push(&mut rows, t);
                    for e in u {
                        push(&mut rows, e);
                    }
                    rows.blocks.push(Block::Soc(1 + u.len()));
                }
            }
        }
        rows
    }
}

/// Terminal status of a successful solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    /// Engine reported reduced accuracy but the independent residuals pass.
    AlmostOptimal,
}

/// Scaled residuals evaluated independently of the engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals {
    /// Largest constraint violation divided by `1 + |constant|`.
    pub primal: f64,
    /// Largest stationarity residual divided by the coefficient scale.
    pub dual: f64,
    /// `|primal − dual objective| / (1 + |primal objective|)`.
    pub gap: f64,
    /// Largest `|λ g(x)|` over inequalities and cones, scaled.
    pub complementarity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap).max(self.complementarity)
    }
}

/// Primal-dual answer of a solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    /// Scalar multiplier per constraint (cone: `z_0`).
    pub duals: Vec<f64>,
    /// Full cone duals `(z_0, z_u)`, `None` for linear rows.
    pub cone_duals: Vec<Option<Vec<f64>>>,
    pub objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: u32,
    #[serde(skip)]
    tags: HashMap<String, usize>,
}

impl ConicSolution {
    /// Scalar dual of the constraint tagged `tag`.
    pub fn dual(&self, tag: &str) -> Option<f64> {
        self.tags.get(tag).map(|&i| self.duals[i])
    }

    /// Dual of `tag`, or zero when the constraint does not exist.
    pub fn dual_or_zero(&self, tag: &str) -> f64 {
        self.dual(tag).unwrap_or(0.0)
    }

    /// Full conic multiplier `(z₀, z_u)` of a tagged second-order cone.
    pub fn cone_dual(&self, tag: &str) -> Option<&Vec<f64>> {
        self.tags.get(tag).and_then(|&k| self.cone_duals[k].as_ref())
    }
}

/// Solves the program with the embedded interior-point engine.
pub fn solve(prog: &ConicProgram) -> Result<ConicSolution> {
    solve_with(prog, QuadraticForm::default())
}

/// Solves with an explicit treatment of the quadratic terms.
pub fn solve_with(prog: &ConicProgram, form: QuadraticForm) -> Result<ConicSolution> {
    let lowered = prog.lowered(form)?;
    let p = &lowered.program;
    let tags: HashMap<String, usize> =
        prog.constraints.iter().enumerate().map(|(i, c)| (c.tag.clone(), i)).collect();
    if p.n_vars() == 0 {
        let infeasible = p.constraints.iter().any(|c| match &c.kind {
            ConstraintKind::Eq(g) => g.constant.abs() > ACCEPT_TOL,
            ConstraintKind::Le(g) => g.constant > ACCEPT_TOL,
            ConstraintKind::Soc { t, u } => {
                u.iter().map(|e| e.constant * e.constant).sum::<f64>().sqrt() > t.constant + ACCEPT_TOL
            }
        });
        if infeasible {
            return Err(Error::Infeasible);
        }
        return Ok(ConicSolution {
            status: SolveStatus::Optimal,
            x: Vec::new(),
            duals: vec![0.0; prog.constraints.len()],
            cone_duals: prog
                .constraints
                .iter()
                .map(|c| match &c.kind {
                    ConstraintKind::Soc { u, .. } => Some(vec![0.0; 1 + u.len()]),
                    _ => None,
                })
                .collect(),
            objective: p.objective_constant,
            dual_objective: p.objective_constant,
            residuals: Residuals { primal: 0.0, dual: 0.0, gap: 0.0, complementarity: 0.0 },
            iterations: 0,
            tags,
        });
    }
    let rows = Rows::build(p);
    let n = p.n_vars();
    let m = rows.b.len();
    let (ri, (cj, vv)): (Vec<usize>, (Vec<usize>, Vec<f64>)) =
        rows.a.iter().map(|&(i, j, v)| (i, (j, v))).unzip();
    let a = CscMatrix::new_from_triplets(m, n, ri, cj, vv);
    // The engine minimizes ½xᵀPx, so P holds 2c on the diagonal.
    let (pi, pv): (Vec<usize>, Vec<f64>) = p.quadratic.iter().map(|&(j, c)| (j, 2.0 * c)).unzip();
    let pm = CscMatrix::new_from_triplets(n, n, pi.clone(), pi, pv);
    let cones: Vec<SupportedConeT<f64>> = rows
        .blocks
        .iter()
        .map(|b| match *b {
            Block::Zero(k) => ZeroConeT(k),
            Block::Nonneg(k) => NonnegativeConeT(k),
            Block::Soc(k) => SecondOrderConeT(k),
        })
        .collect();
    let settings = DefaultSettings {
        verbose: false,
        max_iter: 400,
        tol_gap_abs: SOLVER_TOL,
        tol_gap_rel: SOLVER_TOL,
        tol_feas: SOLVER_TOL,
        tol_ktratio: 1e-7,
        ..DefaultSettings::default()
    };
    let mut engine = DefaultSolver::new(&pm, &p.objective, &a, &rows.b, &cones, settings).map_err(|e| {
        Error::NumericalFailure { status: format!("setup: {e:?}"), r_prim: f64::NAN, r_dual: f64::NAN }
    })?;
    engine.solve();
    let sol = &engine.solution;
    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::AlmostOptimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => return Err(Error::Infeasible),
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => return Err(Error::Unbounded),
        other => {
            return Err(Error::NumericalFailure {
                status: format!("{other:?}"),
                r_prim: sol.r_prim,
                r_dual: sol.r_dual,
            })
        }
    };
    let x_full = sol.x.clone();
    let z = &sol.z;
    let mut duals = Vec::with_capacity(prog.constraints.len());
    let mut cone_duals = Vec::with_capacity(prog.constraints.len());
    for (k, c) in prog.constraints.iter().enumerate() {
        let s = rows.start[k];
        match &c.kind {
            // Engine rows read `b − Ax = g` for equalities, so the
            // multiplier of `g` is `−z`.
            ConstraintKind::Eq(_) => {
                duals.push(-z[s]);
                cone_duals.push(None);
            }
            ConstraintKind::Le(_) => {
                duals.push(z[s]);
                cone_duals.push(None);
            }
            ConstraintKind::Soc { u, .. } => {
                duals.push(z[s]);
                cone_duals.push(Some(z[s..s + 1 + u.len()].to_vec()));
            }
        }
    }
    let x: Vec<f64> = x_full[..lowered.n_original].to_vec();
    let objective = prog.objective_value(&x);
    let residuals = residuals(prog, &x, &duals, &cone_duals, objective);
    debug_assert_eq!(lowered.n_original_constraints, duals.len());
    debug_assert!(
        sign_convention_holds(prog, &duals, &residuals),
        "dual sign convention self-test failed: stationarity residual {:.2e}",
        residuals.dual
    );
    let accept_tol = match form {
        QuadraticForm::Native => ACCEPT_TOL,
        QuadraticForm::Epigraph => EPIGRAPH_ACCEPT_TOL,
    };
    if status == SolveStatus::AlmostOptimal && residuals.max() > accept_tol {
        return Err(Error::NumericalFailure {
            status: "AlmostSolved".into(),
            r_prim: residuals.primal,
            r_dual: residuals.dual,
        });
    }
    if residuals.max() > accept_tol {
        log::warn!(
            "solve residuals above acceptance: primal {:.2e} dual {:.2e} gap {:.2e} compl {:.2e}",
            residuals.primal,
            residuals.dual,
            residuals.gap,
            residuals.complementarity
        );
    }
    let dual_objective = lagrangian_dual(prog, &x, &duals, &cone_duals);
    Ok(ConicSolution {
        status,
        x,
        duals,
        cone_duals,
        objective,
        dual_objective,
        residuals,
        iterations: sol.iterations,
        tags,
    })
}

/// Stationarity self-test run on every solve in debug builds: inequality
/// and cone multipliers are nonnegative and the Lagrangian gradient vanishes.
/// A flipped sign shows up as an order-one residual, so the bound is loose
/// enough to ignore solver noise.
fn sign_convention_holds(prog: &ConicProgram, duals: &[f64], r: &Residuals) -> bool {
    const SELF_TEST_TOL: f64 = 1e-3;
    let signs = prog.constraints.iter().zip(duals).all(|(c, &d)| match c.kind {
        ConstraintKind::Eq(_) => true,
        _ => d >= -SELF_TEST_TOL * (1.0 + d.abs()),
    });
    signs && r.dual <= SELF_TEST_TOL
}

/// Dual objective evaluated as the Lagrangian at the returned point.
fn lagrangian_dual(prog: &ConicProgram, x: &[f64], duals: &[f64], cone_duals: &[Option<Vec<f64>>]) -> f64 {
    let mut l = prog.objective_value(x);
    for (k, c) in prog.constraints.iter().enumerate() {
        l += match &c.kind {
            ConstraintKind::Eq(g) | ConstraintKind::Le(g) => duals[k] * g.eval(x),
            ConstraintKind::Soc { t, u } => {
                let z = cone_duals[k].as_ref().expect("cone dual");
                -z[0] * t.eval(x) - u.iter().zip(&z[1..]).map(|(e, zu)| zu * e.eval(x)).sum::<f64>()
            }
        };
    }
    l
}

/// Independent residual evaluation of a primal-dual point in the documented
/// sign convention.
pub fn residuals(
    prog: &ConicProgram,
    x: &[f64],
    duals: &[f64],
    cone_duals: &[Option<Vec<f64>>],
    objective: f64,
) -> Residuals {
    let n = prog.n_vars();
    let mut grad = prog.objective.clone();
    let mut scale = vec![1.0f64; n];
    for (j, c) in prog.objective.iter().enumerate() {
        scale[j] = scale[j].max(c.abs());
    }
    for &(j, c) in &prog.quadratic {
        grad[j] += 2.0 * c * x[j];
        scale[j] = scale[j].max((2.0 * c * x[j]).abs());
    }
    let mut primal = 0.0f64;
    let mut compl = 0.0f64;
    let add = |grad: &mut Vec<f64>, scale: &mut Vec<f64>, e: &LinExpr, w: f64| {
        for &(j, a) in &e.terms {
            grad[j] += w * a;
            scale[j] = scale[j].max((w * a).abs());
        }
    };
    for (k, c) in prog.constraints.iter().enumerate() {
        match &c.kind {
            ConstraintKind::Eq(g) => {
                primal = primal.max(g.eval(x).abs() / (1.0 + g.max_coeff()));
                add(&mut grad, &mut scale, g, duals[k]);
            }
            ConstraintKind::Le(g) => {
                let v = g.eval(x);
                primal = primal.max(v.max(0.0) / (1.0 + g.max_coeff()));
                compl = compl.max((duals[k] * v).abs() / (1.0 + duals[k].abs() * g.max_coeff()));
                add(&mut grad, &mut scale, g, duals[k]);
            }
            ConstraintKind::Soc { t, u } => {
                let z = cone_duals[k].as_ref().expect("cone dual");
                let tv = t.eval(x);
                let un = u.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt();
                let mag = 1.0 + u.iter().fold(t.max_coeff(), |m, e| m.max(e.max_coeff()));
                primal = primal.max((un - tv).max(0.0) / mag);
                let zu = z[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
                primal = primal.max((zu - z[0]).max(0.0) / (1.0 + z[0].abs()));
                let inner = z[0] * tv + u.iter().zip(&z[1..]).map(|(e, w)| w * e.eval(x)).sum::<f64>();
                compl = compl.max(inner.abs() / (1.0 + z[0].abs() * mag));
                add(&mut grad, &mut scale, t, -z[0]);
                for (e, w) in u.iter().zip(&z[1..]) {
                    add(&mut grad, &mut scale, e, -w);
                }
            }
        }
    }
    let dual = grad.iter().zip(&scale).map(|(g, s)| g.abs() / s).fold(0.0, f64::max);
    let dual_obj = lagrangian_dual(prog, x, duals, cone_duals);
    let gap = (objective - dual_obj).abs() / (1.0 + objective.abs());
    Residuals { primal, dual, gap, complementarity: compl }
}
