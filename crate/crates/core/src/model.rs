//! Problem specification, grids, and data-assumption validation.
//!
//! A problem spec fixes the dimensions, horizon, growth order `p`, structural
//! constant `K`, per-mode coefficients `(sigma, b, c0, f)`, jump components,
//! switching costs, and terminal payoffs. All coefficient fields are
//! [`Expr`] trees (see [`crate::expr`]); `validate_assumptions` samples them
//! on a deterministic low-discrepancy plan and reports, per assumption
//! group, the best empirical constant alongside the declared bound `K`:
//!
//! - `F2`: space-Lipschitz coefficients, weighted-Lipschitz running payoff,
//!   boundedness at the origin;
//! - `F3`: Levy-measure moment bound and jump-map growth/Lipschitz bounds;
//! - `O1`: every switching loop has strictly positive total cost;
//! - `O2`: triangle inequality between switching costs;
//! - `O3`: weighted Lipschitz and one-sided second differences of the costs;
//! - `G`: weighted-Lipschitz terminal data, consistent with the obstacle at
//!   the horizon.

use crate::expr::{EvalPoint, Expr};
use crate::nonlocal::{self, JumpComponent, LevyMeasureSpec};
use crate::switchgraph::SwitchingCostField;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Maximum spatial dimension the discretization supports.
pub const MAX_DIM: usize = 2;

/// Per-mode coefficient fields of the local operator and running payoff.
///
/// `sigma` is the n x n diffusion factor; the operator uses
/// `a = sigma sigma^T` directly (no extra 1/2), so the matching SDE has
/// diffusion term `sqrt(2) sigma dW`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeCoefficients {
    pub sigma: Vec<Vec<Expr>>,
    pub b: Vec<Expr>,
    pub c0: Expr,
    pub f: Expr,
}

/// Terminal payoffs `g_i(x)`, one per mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TerminalData {
    pub g: Vec<Expr>,
}

/// Complete problem description. `p >= 2` is the polynomial growth order and
/// `k_bound` the structural constant `K` that every assumption is checked
/// against.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub n: usize,
    pub m: usize,
    pub t_end: f64,
    pub domain: Vec<[f64; 2]>,
    pub p: u32,
    pub k_bound: f64,
    pub modes: Vec<ModeCoefficients>,
    pub jumps: Vec<JumpComponent>,
    pub costs: SwitchingCostField,
    pub terminal: TerminalData,
}

// --------------------------------------------------------------------------
// File schema (JSON-shaped).
// --------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DimsFile {
    n: usize,
    m: usize,
    #[serde(rename = "T")]
    t_end: f64,
    #[serde(rename = "box")]
    domain: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    dims: DimsFile,
    p: u32,
    #[serde(rename = "K")]
    k_bound: f64,
    modes: Vec<ModeCoefficients>,
    #[serde(default)]
    jumps: Vec<JumpComponentFile>,
    costs: Vec<Vec<Expr>>,
    terminal: TerminalData,
}

#[derive(Serialize, Deserialize)]
struct JumpComponentFile {
    measure: LevyMeasureSpec,
    eta: Vec<Expr>,
}

impl ProblemSpec {
    /// Parse and structurally validate a JSON problem spec.
    pub fn from_json_str(s: &str) -> Result<ProblemSpec> {
        let file: SpecFile =
            serde_json::from_str(s).map_err(|e| Error::Spec(format!("parse failure: {e}")))?;
        Self::from_file(file)
    }

    pub fn from_path(path: &std::path::Path) -> Result<ProblemSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Spec(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Serialize back to the JSON file schema.
    pub fn to_json_value(&self) -> serde_json::Value {
        let file = SpecFile {
            dims: DimsFile {
                n: self.n,
                m: self.m,
                t_end: self.t_end,
                domain: self.domain.clone(),
            },
            p: self.p,
            k_bound: self.k_bound,
            modes: self.modes.clone(),
            jumps: self
                .jumps
                .iter()
                .map(|j| JumpComponentFile {
                    measure: j.measure.clone(),
                    eta: j.eta.clone(),
                })
                .collect(),
            costs: self.costs.rows(),
            terminal: self.terminal.clone(),
        };
        serde_json::to_value(file).expect("spec serialization cannot fail")
    }

    fn from_file(file: SpecFile) -> Result<ProblemSpec> {
        let n = file.dims.n;
        let m = file.dims.m;
        let fail = |msg: String| Err(Error::Spec(msg));
        if !(1..=MAX_DIM).contains(&n) {
            return fail(format!("dims.n must be 1 or 2, got {n}"));
        }
        if m < 1 {
            return fail("dims.m must be at least 1".into());
        }
        if !(file.dims.t_end.is_finite() && file.dims.t_end > 0.0) {
            return fail(format!("dims.T must be positive, got {}", file.dims.t_end));
        }
        if file.dims.domain.len() != n {
            return fail(format!(
                "dims.box must list {n} axis ranges, got {}",
                file.dims.domain.len()
            ));
        }
        for (k, r) in file.dims.domain.iter().enumerate() {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return fail(format!("dims.box[{k}] must be a finite range lo < hi"));
            }
        }
        if file.p < 2 {
            return fail(format!("p must be an integer >= 2, got {}", file.p));
        }
        if !(file.k_bound.is_finite() && file.k_bound > 0.0) {
            return fail(format!("K must be positive, got {}", file.k_bound));
        }
        if file.modes.len() != m {
            return fail(format!("expected {m} modes, got {}", file.modes.len()));
        }
        for (i, mode) in file.modes.iter().enumerate() {
            if mode.sigma.len() != n || mode.sigma.iter().any(|row| row.len() != n) {
                return fail(format!("modes[{i}].sigma must be an {n}x{n} matrix"));
            }
            if mode.b.len() != n {
                return fail(format!("modes[{i}].b must have {n} components"));
            }
            for (name, e) in mode_fields(mode) {
                e.check_vars(n, true, None)
                    .map_err(|msg| Error::Spec(format!("modes[{i}].{name}: {msg}")))?;
            }
        }
        if !(file.jumps.is_empty() || file.jumps.len() == m) {
            return fail(format!(
                "jumps must be empty or list one component per mode ({m}), got {}",
                file.jumps.len()
            ));
        }
        let mut jumps = Vec::with_capacity(m);
        for (i, j) in file.jumps.into_iter().enumerate() {
            let comp = JumpComponent::new(j.measure, j.eta, n)
                .map_err(|e| Error::Spec(format!("jumps[{i}]: {e}")))?;
            jumps.push(comp);
        }
        while jumps.len() < m {
            jumps.push(JumpComponent::empty(n));
        }
        if file.costs.len() != m || file.costs.iter().any(|row| row.len() != m) {
            return fail(format!("costs must be an {m}x{m} matrix of expressions"));
        }
        for (i, row) in file.costs.iter().enumerate() {
            if !row[i].is_const_zero() {
                return fail(format!("costs[{i}][{i}] must be the literal 0"));
            }
            for (j, e) in row.iter().enumerate() {
                e.check_vars(n, true, None)
                    .map_err(|msg| Error::Spec(format!("costs[{i}][{j}]: {msg}")))?;
            }
        }
        let costs = SwitchingCostField::new(file.costs)?;
        if file.terminal.g.len() != m {
            return fail(format!(
                "terminal.g must list {m} payoffs, got {}",
                file.terminal.g.len()
            ));
        }
        for (i, g) in file.terminal.g.iter().enumerate() {
            g.check_vars(n, false, None)
                .map_err(|msg| Error::Spec(format!("terminal.g[{i}]: {msg}")))?;
        }
        Ok(ProblemSpec {
            n,
            m,
            t_end: file.dims.t_end,
            domain: file.dims.domain,
            p: file.p,
            k_bound: file.k_bound,
            modes: file.modes,
            jumps,
            costs,
            terminal: file.terminal,
        })
    }

    /// Weight `1 + |x|^(p-1)` used by the Lipschitz-type assumptions.
    pub fn lip_weight(&self, x: &[f64]) -> f64 {
        1.0 + norm(x).powi(self.p as i32 - 1)
    }

    /// Terminal payoff `g_i(x)`.
    pub fn g(&self, i: usize, x: &[f64]) -> f64 {
        self.terminal.g[i].eval(&EvalPoint::xt(x, self.t_end))
    }
}

fn mode_fields(mode: &ModeCoefficients) -> Vec<(String, &Expr)> {
    let mut v = Vec::new();
    for (k, row) in mode.sigma.iter().enumerate() {
        for (l, e) in row.iter().enumerate() {
            v.push((format!("sigma[{k}][{l}]"), e));
        }
    }
    for (k, e) in mode.b.iter().enumerate() {
        v.push((format!("b[{k}]"), e));
    }
    v.push(("c0".into(), &mode.c0));
    v.push(("f".into(), &mode.f));
    v
}

/// Euclidean norm of a point.
pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

// --------------------------------------------------------------------------
// Coefficient evaluation.
// --------------------------------------------------------------------------

/// Evaluated local coefficients at one `(x, t)`: `a = sigma sigma^T`, drift,
/// discount rate, and running payoff. Entries beyond the active dimension
/// are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalCoeffs {
    pub a: [[f64; MAX_DIM]; MAX_DIM],
    pub b: [f64; MAX_DIM],
    pub c0: f64,
    pub f: f64,
}

/// Evaluate `(a, b, c0, f)` for mode `i` at `(x, t)`.
pub fn evaluate_coefficients(spec: &ProblemSpec, i: usize, x: &[f64], t: f64) -> LocalCoeffs {
    let p = EvalPoint::xt(x, t);
    let mode = &spec.modes[i];
    let n = spec.n;
    let mut sig = [[0.0; MAX_DIM]; MAX_DIM];
    for k in 0..n {
        for l in 0..n {
            sig[k][l] = mode.sigma[k][l].eval(&p);
        }
    }
    let mut a = [[0.0; MAX_DIM]; MAX_DIM];
    for k in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            for r in 0..n {
                acc += sig[k][r] * sig[l][r];
            }
            a[k][l] = acc;
        }
    }
    let mut b = [0.0; MAX_DIM];
    for k in 0..n {
        b[k] = mode.b[k].eval(&p);
    }
    LocalCoeffs {
        a,
        b,
        c0: mode.c0.eval(&p),
        f: mode.f.eval(&p),
    }
}

// --------------------------------------------------------------------------
// Grids and grid functions.
// --------------------------------------------------------------------------

/// Uniform tensor grid on the spec's box crossed with `[0, T]`.
/// Spacing is `dx = (hi - lo)/(nx - 1)` per axis and `dt = T/(nt - 1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub domain: Vec<[f64; 2]>,
    pub nx: Vec<usize>,
    pub nt: usize,
}

impl GridSpec {
    pub fn new(domain: Vec<[f64; 2]>, nx: Vec<usize>, nt: usize) -> Result<GridSpec> {
        if domain.len() != nx.len() || domain.is_empty() || domain.len() > MAX_DIM {
            return Err(Error::Spec(format!(
                "grid must cover 1 or 2 axes with one node count per axis, got {} ranges and {} counts",
                domain.len(),
                nx.len()
            )));
        }
        for (k, r) in domain.iter().enumerate() {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return Err(Error::Spec(format!("grid box[{k}] must satisfy lo < hi")));
            }
            if nx[k] < 3 {
                return Err(Error::Spec(format!(
                    "grid needs at least 3 nodes per axis, got nx[{k}] = {}",
                    nx[k]
                )));
            }
        }
        if nt < 2 {
            return Err(Error::Spec(format!(
                "grid needs at least 2 time levels, got {nt}"
            )));
        }
        Ok(GridSpec { domain, nx, nt })
    }

    pub fn n(&self) -> usize {
        self.domain.len()
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.domain[axis][1] - self.domain[axis][0]) / (self.nx[axis] - 1) as f64
    }

    pub fn dt(&self, t_end: f64) -> f64 {
        t_end / (self.nt - 1) as f64
    }

    pub fn time(&self, t_end: f64, k: usize) -> f64 {
        if k == self.nt - 1 {
            t_end
        } else {
            k as f64 * self.dt(t_end)
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nx.iter().product()
    }

    pub fn coord(&self, axis: usize, idx: usize) -> f64 {
        if idx == self.nx[axis] - 1 {
            self.domain[axis][1]
        } else {
            self.domain[axis][0] + idx as f64 * self.dx(axis)
        }
    }

    /// Multi-index of a flat node index (row-major over axis 0 fastest).
    pub fn unflatten(&self, flat: usize) -> [usize; MAX_DIM] {
        match self.n() {
            1 => [flat, 0],
            _ => [flat % self.nx[0], flat / self.nx[0]],
        }
    }

    pub fn flatten(&self, ix: &[usize]) -> usize {
        match self.n() {
            1 => ix[0],
            _ => ix[0] + self.nx[0] * ix[1],
        }
    }

    /// Node coordinates; the returned array has zeros beyond the dimension.
    pub fn node(&self, flat: usize) -> [f64; MAX_DIM] {
        let ix = self.unflatten(flat);
        let mut x = [0.0; MAX_DIM];
        for axis in 0..self.n() {
            x[axis] = self.coord(axis, ix[axis]);
        }
        x
    }

    pub fn is_boundary(&self, flat: usize) -> bool {
        let ix = self.unflatten(flat);
        (0..self.n()).any(|a| ix[a] == 0 || ix[a] == self.nx[a] - 1)
    }

    /// Clamp a point onto the box, returning the clamped point.
    pub fn clamp(&self, x: &[f64]) -> [f64; MAX_DIM] {
        let mut c = [0.0; MAX_DIM];
        for a in 0..self.n() {
            c[a] = x[a].clamp(self.domain[a][0], self.domain[a][1]);
        }
        c
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.n()).all(|a| x[a] >= self.domain[a][0] && x[a] <= self.domain[a][1])
    }
}

/// Values indexed by `(mode, time level, node)`, stored flat with the
/// spatial index fastest; `slice(mode, k)` is contiguous.
#[derive(Debug, Clone)]
pub struct GridFunction {
    pub m: usize,
    pub nt: usize,
    pub num_nodes: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(m: usize, nt: usize, num_nodes: usize) -> GridFunction {
        GridFunction {
            m,
            nt,
            num_nodes,
            values: vec![0.0; m * nt * num_nodes],
        }
    }

    #[inline]
    fn offset(&self, mode: usize, k: usize) -> usize {
        (mode * self.nt + k) * self.num_nodes
    }

    pub fn slice(&self, mode: usize, k: usize) -> &[f64] {
        let o = self.offset(mode, k);
        &self.values[o..o + self.num_nodes]
    }

    pub fn slice_mut(&mut self, mode: usize, k: usize) -> &mut [f64] {
        let o = self.offset(mode, k);
        &mut self.values[o..o + self.num_nodes]
    }

    pub fn get(&self, mode: usize, k: usize, node: usize) -> f64 {
        self.values[self.offset(mode, k) + node]
    }

    pub fn set(&mut self, mode: usize, k: usize, node: usize, v: f64) {
        let o = self.offset(mode, k);
        self.values[o + node] = v;
    }

    /// Error if any stored value is non-finite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            let node = pos % self.num_nodes;
            let k = (pos / self.num_nodes) % self.nt;
            let mode = pos / (self.num_nodes * self.nt);
            return Err(Error::NonFinite {
                field: what.to_string(),
                point: format!("mode {mode}, time level {k}, node {node}"),
            });
        }
        Ok(())
    }
}

// --------------------------------------------------------------------------
// Deterministic sample plan.
// --------------------------------------------------------------------------

/// Deterministic sample plan: Halton points in the box (singles and pairs,
/// each with one or two time stamps) plus all box corners, and per-axis
/// steps for second-difference checks.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub singles: Vec<(Vec<f64>, f64)>,
    pub pairs: Vec<(Vec<f64>, Vec<f64>, f64, f64)>,
    pub h: Vec<f64>,
}

fn halton(index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

impl SamplePlan {
    /// Default number of sample points.
    pub const DEFAULT_COUNT: usize = 4096;

    pub fn build(domain: &[[f64; 2]], t_end: f64, count: usize) -> SamplePlan {
        const BASES: [u64; 6] = [2, 3, 5, 7, 11, 13];
        let n = domain.len();
        let map = |u: f64, r: [f64; 2]| r[0] + u * (r[1] - r[0]);
        let mut singles = Vec::with_capacity(count + 8);
        let mut pairs = Vec::with_capacity(count + 8);
        for idx in 0..count as u64 {
            // Skip index 0 (all zeros) for better equidistribution.
            let i = idx + 1;
            let coord = |d: usize| halton(i, BASES[d]);
            let x: Vec<f64> = (0..n).map(|a| map(coord(a), domain[a])).collect();
            let y: Vec<f64> = (0..n).map(|a| map(coord(n + a), domain[a])).collect();
            let t = coord(2 * n) * t_end;
            let t2 = if 2 * n + 1 < BASES.len() {
                coord(2 * n + 1) * t_end
            } else {
                t_end - t
            };
            singles.push((x.clone(), t));
            pairs.push((x, y, t, t2));
        }
        // Box corners at the ends and middle of the horizon.
        let corners: Vec<Vec<f64>> = match n {
            1 => vec![vec![domain[0][0]], vec![domain[0][1]]],
            _ => vec![
                vec![domain[0][0], domain[1][0]],
                vec![domain[0][1], domain[1][0]],
                vec![domain[0][0], domain[1][1]],
                vec![domain[0][1], domain[1][1]],
            ],
        };
        for c in &corners {
            for &t in &[0.0, 0.5 * t_end, t_end] {
                singles.push((c.clone(), t));
            }
            for c2 in &corners {
                if c2 != c {
                    pairs.push((c.clone(), c2.clone(), t_end, t_end));
                }
            }
        }
        let h = domain
            .iter()
            .map(|r| (r[1] - r[0]) / 64.0)
            .collect::<Vec<_>>();
        SamplePlan { singles, pairs, h }
    }

    /// Same plan but with second-difference steps taken from a grid.
    pub fn with_grid_steps(mut self, grid: &GridSpec) -> SamplePlan {
        self.h = (0..grid.n()).map(|a| grid.dx(a)).collect();
        self
    }
}

// --------------------------------------------------------------------------
// Assumption validation.
// --------------------------------------------------------------------------

/// Result of one assumption group.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    /// Short tag: `F2`, `F3`, `O1`, `O2`, `O3`, or `G`.
    pub tag: &'static str,
    pub description: &'static str,
    pub pass: bool,
    /// Best constant observed on the samples (for `O1`, the minimum loop
    /// cost; for `O2`/`G`-consistency, the worst violation).
    pub empirical: f64,
    /// Value the empirical constant is compared against.
    pub bound: f64,
    /// Human-readable description of the worst sample.
    pub worst: String,
}

/// Full validation report; `pass` is the conjunction of all checks.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn first_failure(&self) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| !c.pass)
    }
}

/// Tolerance for zero-threshold comparisons (exact inequalities checked in
/// floating point).
const EXACT_SLACK: f64 = 1e-12;

struct Worst {
    value: f64,
    desc: String,
}

impl Worst {
    fn new() -> Worst {
        Worst {
            value: f64::NEG_INFINITY,
            desc: String::new(),
        }
    }

    fn update(&mut self, value: f64, desc: impl FnOnce() -> String) {
        if value > self.value {
            self.value = value;
            self.desc = desc();
        }
    }
}

fn fmt_point(x: &[f64], t: f64) -> String {
    let coords: Vec<String> = x.iter().map(|v| format!("{v:.6}")).collect();
    format!("x = ({}), t = {:.6}", coords.join(", "), t)
}

fn finite_or_err(v: f64, field: &str, x: &[f64], t: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            field: field.to_string(),
            point: fmt_point(x, t),
        })
    }
}

/// Sample every assumption group on the plan and report empirical constants.
///
/// Returns an error (not a failed check) if any coefficient evaluates to a
/// non-finite value, naming the field and the sample point.
pub fn validate_assumptions(spec: &ProblemSpec, plan: &SamplePlan) -> Result<ValidationReport> {
    let k_bound = spec.k_bound;
    let mut checks = Vec::new();

    // ---- F2: coefficient regularity -------------------------------------
    let mut f2 = Worst::new();
    for (x, y, t, _) in &plan.pairs {
        let dist = dist(x, y);
        if dist < 1e-12 {
            continue;
        }
        let w = 1.0 + norm(x).powi(spec.p as i32 - 1) + norm(y).powi(spec.p as i32 - 1);
        for (i, mode) in spec.modes.iter().enumerate() {
            let px = EvalPoint::xt(x, *t);
            let py = EvalPoint::xt(y, *t);
            // Per-entry sums |sigma_kl(x)-sigma_kl(y)| + |b_k(x)-b_k(y)| +
            // |c0(x)-c0(y)| <= K |x-y|.
            let dc = (finite_or_err(mode.c0.eval(&px), &format!("modes[{i}].c0"), x, *t)?
                - finite_or_err(mode.c0.eval(&py), &format!("modes[{i}].c0"), y, *t)?)
            .abs();
            for k in 0..spec.n {
                let db = (mode.b[k].eval(&px) - mode.b[k].eval(&py)).abs();
                for l in 0..spec.n {
                    let ds = (mode.sigma[k][l].eval(&px) - mode.sigma[k][l].eval(&py)).abs();
                    f2.update((ds + db + dc) / dist, || {
                        format!("mode {i}, sigma[{k}][{l}]/b[{k}]/c0 between {} and {}", fmt_point(x, *t), fmt_point(y, *t))
                    });
                }
            }
            let df = (finite_or_err(mode.f.eval(&px), &format!("modes[{i}].f"), x, *t)?
                - mode.f.eval(&py))
            .abs();
            f2.update(df / (w * dist), || {
                format!("mode {i}, f between {} and {}", fmt_point(x, *t), fmt_point(y, *t))
            });
        }
    }
    // Boundedness at the origin: |b_k(0,t)| + |sigma_kl(0,t)| + |f(0,t)| -
    // c0(x,t) <= K.
    let origin = vec![0.0; spec.n];
    for (x, t) in &plan.singles {
        let p0 = EvalPoint::xt(&origin, *t);
        let px = EvalPoint::xt(x, *t);
        for (i, mode) in spec.modes.iter().enumerate() {
            let f0 = finite_or_err(mode.f.eval(&p0), &format!("modes[{i}].f"), &origin, *t)?.abs();
            let c_at_x = mode.c0.eval(&px);
            for k in 0..spec.n {
                let b0 = mode.b[k].eval(&p0).abs();
                for l in 0..spec.n {
                    let s0 = mode.sigma[k][l].eval(&p0).abs();
                    f2.update(b0 + s0 + f0 - c_at_x, || {
                        format!("mode {i}, origin bound with c0 at {}", fmt_point(x, *t))
                    });
                }
            }
        }
    }
    checks.push(AssumptionCheck {
        tag: "F2",
        description: "coefficient Lipschitz and origin bounds",
        pass: f2.value <= k_bound * (1.0 + EXACT_SLACK),
        empirical: f2.value,
        bound: k_bound,
        worst: f2.desc,
    });

    // ---- F3: Levy measure moments and jump-map bounds --------------------
    let mut f3 = Worst::new();
    for (i, comp) in spec.jumps.iter().enumerate() {
        let quad = nonlocal::build_quadrature(&comp.measure, nonlocal::QuadratureConfig::default())?;
        let moment = quad.second_moment_inner() + quad.p_moment_outer(spec.p);
        f3.update(moment, || format!("mode {i}, measure moment bound"));
        // Jump-map bounds sampled at quadrature nodes.
        let zs = quad.sample_marks();
        for (x, y, t, _) in plan.pairs.iter().take(512) {
            let d = dist(x, y);
            for z in &zs {
                let zn = norm(z);
                if zn == 0.0 {
                    continue;
                }
                for k in 0..spec.n {
                    let ex = comp.eta[k].eval(&EvalPoint { x, t: *t, z });
                    let ey = comp.eta[k].eval(&EvalPoint { x: y, t: *t, z });
                    let ex = finite_or_err(ex, &format!("jumps[{i}].eta[{k}]"), x, *t)?;
                    f3.update(ex.abs() / ((1.0 + norm(x)) * zn), || {
                        format!("mode {i}, |eta_{k}| growth at {}", fmt_point(x, *t))
                    });
                    if d >= 1e-12 {
                        f3.update((ex - ey).abs() / ((1.0 + zn) * d), || {
                            format!("mode {i}, eta_{k} Lipschitz between {} and {}", fmt_point(x, *t), fmt_point(y, *t))
                        });
                    }
                }
            }
        }
    }
    if spec.jumps.iter().all(|c| c.measure.is_empty()) {
        f3.update(0.0, || "no jump components".to_string());
    }
    checks.push(AssumptionCheck {
        tag: "F3",
        description: "Levy moment and jump-map bounds",
        pass: f3.value <= k_bound * (1.0 + EXACT_SLACK),
        empirical: f3.value,
        bound: k_bound,
        worst: f3.desc,
    });

    // ---- O1: strictly positive switching loops ---------------------------
    let loop_report = crate::switchgraph::no_loop_check(&spec.costs, &plan.singles)?;
    checks.push(AssumptionCheck {
        tag: "O1",
        description: "every switching loop has positive cost",
        pass: loop_report.pass,
        empirical: loop_report.min_loop_value,
        bound: 0.0,
        worst: loop_report.worst,
    });

    // ---- O2: triangle inequality -----------------------------------------
    let mut o2 = Worst::new();
    if spec.m >= 3 {
        for (x, t) in &plan.singles {
            let c = spec.costs.matrix_at(x, *t)?;
            for i in 0..spec.m {
                for j in 0..spec.m {
                    for k in 0..spec.m {
                        if i != j && j != k && i != k {
                            let viol = c[i * spec.m + k] - c[i * spec.m + j] - c[j * spec.m + k];
                            o2.update(viol, || {
                                format!("c[{i}][{k}] vs c[{i}][{j}]+c[{j}][{k}] at {}", fmt_point(x, *t))
                            });
                        }
                    }
                }
            }
        }
    } else {
        o2.update(0.0, || "fewer than three modes; vacuous".to_string());
    }
    checks.push(AssumptionCheck {
        tag: "O2",
        description: "switching costs satisfy the triangle inequality",
        pass: o2.value <= EXACT_SLACK,
        empirical: o2.value,
        bound: 0.0,
        worst: o2.desc,
    });

    // ---- O3: cost regularity ----------------------------------------------
    let mut o3 = Worst::new();
    if spec.m >= 2 {
        for (x, y, t, t2) in &plan.pairs {
            let mut dxy2 = (t - t2) * (t - t2);
            for a in 0..spec.n {
                dxy2 += (x[a] - y[a]) * (x[a] - y[a]);
            }
            let dxy = dxy2.sqrt();
            if dxy < 1e-12 {
                continue;
            }
            let w = 1.0 + norm(x).powi(spec.p as i32 - 1) + norm(y).powi(spec.p as i32 - 1);
            for i in 0..spec.m {
                for j in 0..spec.m {
                    if i == j {
                        continue;
                    }
                    let cx = spec.costs.eval(i, j, x, *t)?;
                    let cy = spec.costs.eval(i, j, y, *t2)?;
                    o3.update((cx - cy).abs() / (w * dxy), || {
                        format!("c[{i}][{j}] between {} and {}", fmt_point(x, *t), fmt_point(y, *t2))
                    });
                }
            }
        }
        // One-sided second differences: c(x+h) + c(x-h) - 2 c(x) <=
        // K (1 + |x|^(p-2)) |h|^2 along each axis.
        for (x, t) in &plan.singles {
            let wx = 1.0 + norm(x).powi(spec.p as i32 - 2);
            for a in 0..spec.n {
                let h = plan.h[a];
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += h;
                xm[a] -= h;
                for i in 0..spec.m {
                    for j in 0..spec.m {
                        if i == j {
                            continue;
                        }
                        let second = spec.costs.eval(i, j, &xp, *t)?
                            + spec.costs.eval(i, j, &xm, *t)?
                            - 2.0 * spec.costs.eval(i, j, x, *t)?;
                        o3.update(second / (h * h * wx), || {
                            format!("second difference of c[{i}][{j}] at {}, axis {a}", fmt_point(x, *t))
                        });
                    }
                }
            }
        }
    } else {
        o3.update(0.0, || "single mode; vacuous".to_string());
    }
    checks.push(AssumptionCheck {
        tag: "O3",
        description: "switching-cost Lipschitz and semiconcavity bounds",
        pass: o3.value <= k_bound * (1.0 + EXACT_SLACK),
        empirical: o3.value,
        bound: k_bound,
        worst: o3.desc,
    });

    // ---- G: terminal data -------------------------------------------------
    let mut g_lip = Worst::new();
    for (x, y, _, _) in &plan.pairs {
        let d = dist(x, y);
        if d < 1e-12 {
            continue;
        }
        let w = 1.0 + norm(x).powi(spec.p as i32 - 1) + norm(y).powi(spec.p as i32 - 1);
        for i in 0..spec.m {
            let gx = finite_or_err(spec.g(i, x), &format!("terminal.g[{i}]"), x, spec.t_end)?;
            let gy = spec.g(i, y);
            g_lip.update((gx - gy).abs() / (w * d), || {
                format!("g[{i}] between {} and {}", fmt_point(x, spec.t_end), fmt_point(y, spec.t_end))
            });
        }
    }
    let mut g_cons = Worst::new();
    g_cons.update(0.0, || "no obstacle (single mode)".to_string());
    if spec.m >= 2 {
        for (x, _) in &plan.singles {
            let c = spec.costs.matrix_at(x, spec.t_end)?;
            for i in 0..spec.m {
                let gi = spec.g(i, x);
                for j in 0..spec.m {
                    if j != i {
                        let viol = (spec.g(j, x) - c[i * spec.m + j]) - gi;
                        g_cons.update(viol, || {
                            format!(
                                "g[{i}] below obstacle from mode {j} at {}",
                                fmt_point(x, spec.t_end)
                            )
                        });
                    }
                }
            }
        }
    }
    let g_pass = g_lip.value <= k_bound * (1.0 + EXACT_SLACK) && g_cons.value <= EXACT_SLACK;
    let (g_emp, g_worst) = if g_cons.value > EXACT_SLACK {
        (g_cons.value, g_cons.desc.clone())
    } else {
        (g_lip.value, g_lip.desc.clone())
    };
    checks.push(AssumptionCheck {
        tag: "G",
        description: "terminal payoff Lipschitz bound and obstacle consistency",
        pass: g_pass,
        empirical: g_emp,
        bound: k_bound,
        worst: g_worst,
    });

    Ok(ValidationReport { checks })
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn heat_spec_json() -> String {
        r#"{
            "dims": {"n": 1, "m": 1, "T": 1.0, "box": [[-1.0, 1.0]]},
            "p": 2,
            "K": 2.0,
            "modes": [{"sigma": [[1.0]], "b": [0.0], "c0": 0.0, "f": 0.0}],
            "costs": [[0.0]],
            "terminal": {"g": [{"pow": ["x0", 2]}]}
        }"#
        .to_string()
    }

    #[test]
    fn parses_minimal_spec() {
        let spec = ProblemSpec::from_json_str(&heat_spec_json()).unwrap();
        assert_eq!(spec.n, 1);
        assert_eq!(spec.m, 1);
        assert_eq!(spec.p, 2);
        assert_relative_eq!(spec.g(0, &[0.5]), 0.25);
        assert!(spec.jumps[0].measure.is_empty());
    }

    #[test]
    fn rejects_structural_errors() {
        let bad_n = heat_spec_json().replace("\"n\": 1", "\"n\": 3");
        assert!(ProblemSpec::from_json_str(&bad_n).is_err());
        let bad_diag = heat_spec_json().replace("[[0.0]]", "[[1.0]]");
        assert!(ProblemSpec::from_json_str(&bad_diag).is_err());
        let bad_var = heat_spec_json().replace("{\"pow\": [\"x0\", 2]}", "\"x1\"");
        assert!(ProblemSpec::from_json_str(&bad_var).is_err());
    }

    /// `a = sigma sigma^T` for an upper-triangular factor: the product, not
    /// the entrywise square.
    #[test]
    fn coefficient_product_matches_hand_calculation() {
        let json = r#"{
            "dims": {"n": 2, "m": 1, "T": 1.0, "box": [[-1.0, 1.0], [-1.0, 1.0]]},
            "p": 2,
            "K": 5.0,
            "modes": [{
                "sigma": [[1.0, 1.0], [0.0, 1.0]],
                "b": [0.0, 0.0], "c0": 0.0, "f": 0.0
            }],
            "costs": [[0.0]],
            "terminal": {"g": [0.0]}
        }"#;
        let spec = ProblemSpec::from_json_str(json).unwrap();
        let c = evaluate_coefficients(&spec, 0, &[0.3, -0.7], 0.5);
        // [[1,1],[0,1]] * [[1,0],[1,1]] = [[2,1],[1,1]]
        assert_relative_eq!(c.a[0][0], 2.0);
        assert_relative_eq!(c.a[0][1], 1.0);
        assert_relative_eq!(c.a[1][0], 1.0);
        assert_relative_eq!(c.a[1][1], 1.0);
    }

    #[test]
    fn grid_spacing_is_exact() {
        let g = GridSpec::new(vec![[-3.0, 3.0]], vec![301], 201).unwrap();
        assert_relative_eq!(g.dx(0), 0.02);
        assert_relative_eq!(g.dt(1.0), 0.005);
        assert_relative_eq!(g.coord(0, 150), 0.0);
        assert!(g.is_boundary(0));
        assert!(g.is_boundary(300));
        assert!(!g.is_boundary(150));
        assert!(GridSpec::new(vec![[-1.0, 1.0]], vec![2], 10).is_err());
        assert!(GridSpec::new(vec![[-1.0, 1.0]], vec![11], 1).is_err());
    }

    #[test]
    fn grid_function_layout_roundtrips() {
        let mut u = GridFunction::zeros(2, 3, 5);
        u.set(1, 2, 4, 7.5);
        assert_eq!(u.get(1, 2, 4), 7.5);
        assert_eq!(u.slice(1, 2)[4], 7.5);
        assert_eq!(u.slice(0, 0)[0], 0.0);
        assert!(u.check_finite("u").is_ok());
        u.set(0, 1, 2, f64::NAN);
        assert!(u.check_finite("u").is_err());
    }

    #[test]
    fn validation_passes_on_the_heat_spec() {
        let spec = ProblemSpec::from_json_str(&heat_spec_json()).unwrap();
        let plan = SamplePlan::build(&spec.domain, spec.t_end, 1024);
        let report = validate_assumptions(&spec, &plan).unwrap();
        assert!(report.pass(), "report: {report:?}");
        assert_eq!(report.checks.len(), 6);
        // Empirical Lipschitz constant of g(x) = x^2 on [-1,1] with weight
        // 1 + |x| + |y| is sup |x+y|/(1+|x|+|y|) = 2/3 <= 2.
        let g = report.checks.iter().find(|c| c.tag == "G").unwrap();
        assert!(g.empirical <= 2.0 / 3.0 + 1e-9, "got {}", g.empirical);
    }

    #[test]
    fn empirical_constants_do_not_exceed_declared_bound_when_passing() {
        let spec = ProblemSpec::from_json_str(&heat_spec_json()).unwrap();
        let plan = SamplePlan::build(&spec.domain, spec.t_end, 512);
        let report = validate_assumptions(&spec, &plan).unwrap();
        for check in &report.checks {
            if check.pass && check.bound > 0.0 {
                assert!(
                    check.empirical <= check.bound * (1.0 + 1e-12),
                    "{}: empirical {} exceeds bound {}",
                    check.tag,
                    check.empirical,
                    check.bound
                );
            }
        }
    }

    /// A two-mode instance with a zero-cost round trip must fail the loop
    /// check with the loop reported.
    #[test]
    fn zero_cost_loop_fails_o1() {
        let json = r#"{
            "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-1.0, 1.0]]},
            "p": 2,
            "K": 2.0,
            "modes": [
                {"sigma": [[1.0]], "b": [0.0], "c0": 0.0, "f": 0.0},
                {"sigma": [[1.0]], "b": [0.0], "c0": 0.0, "f": 0.0}
            ],
            "costs": [[0.0, 1.0], [-1.0, 0.0]],
            "terminal": {"g": [0.0, 0.0]}
        }"#;
        let spec = ProblemSpec::from_json_str(json).unwrap();
        let plan = SamplePlan::build(&spec.domain, spec.t_end, 128);
        let report = validate_assumptions(&spec, &plan).unwrap();
        let o1 = report.checks.iter().find(|c| c.tag == "O1").unwrap();
        assert!(!o1.pass);
        assert_relative_eq!(o1.empirical, 0.0);
    }

    /// Terminal data must dominate the horizon obstacle: g1 = 0, g2 = 1,
    /// c12 = 0.5 violates g1 >= g2 - c12.
    #[test]
    fn inconsistent_terminal_data_fails_g() {
        let json = r#"{
            "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-1.0, 1.0]]},
            "p": 2,
            "K": 2.0,
            "modes": [
                {"sigma": [[1.0]], "b": [0.0], "c0": 0.0, "f": 0.0},
                {"sigma": [[1.0]], "b": [0.0], "c0": 0.0, "f": 0.0}
            ],
            "costs": [[0.0, 0.5], [0.0, 0.0]],
            "terminal": {"g": [0.0, 1.0]}
        }"#;
        let spec = ProblemSpec::from_json_str(json).unwrap();
        let plan = SamplePlan::build(&spec.domain, spec.t_end, 128);
        let report = validate_assumptions(&spec, &plan).unwrap();
        let g = report.checks.iter().find(|c| c.tag == "G").unwrap();
        assert!(!g.pass);
        assert!(g.empirical >= 0.5 - 1e-9);
    }

    #[test]
    fn validation_is_monotone_in_k() {
        // If all checks pass with K0, they pass with any K >= K0.
        let base = ProblemSpec::from_json_str(&heat_spec_json()).unwrap();
        let plan = SamplePlan::build(&base.domain, base.t_end, 256);
        let mut spec = base.clone();
        for k in [2.0, 2.5, 10.0, 1e6] {
            spec.k_bound = k;
            let report = validate_assumptions(&spec, &plan).unwrap();
            assert!(report.pass(), "failed with K = {k}");
        }
    }

    #[test]
    fn non_finite_coefficient_is_an_error_naming_the_field() {
        let json = heat_spec_json().replace(
            "\"f\": 0.0",
            "\"f\": {\"div\": [1.0, {\"sub\": [\"x0\", \"x0\"]}]}",
        );
        let spec = ProblemSpec::from_json_str(&json).unwrap();
        let plan = SamplePlan::build(&spec.domain, spec.t_end, 64);
        let err = validate_assumptions(&spec, &plan).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains(".f"), "message should name the field: {msg}");
    }

    #[test]
    fn spec_roundtrips_through_json_value() {
        let spec = ProblemSpec::from_json_str(&heat_spec_json()).unwrap();
        let value = spec.to_json_value();
        let spec2 = ProblemSpec::from_json_str(&value.to_string()).unwrap();
        assert_eq!(spec2.m, spec.m);
        assert_relative_eq!(spec2.g(0, &[0.3]), spec.g(0, &[0.3]));
    }
}
