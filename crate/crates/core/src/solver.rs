//! Backward-in-time IMEX stepping for the obstacle-coupled system.
//!
//! Starting from the terminal data, each step solves, mode by mode,
//!
//! ```text
//! (u_k - u_{k+1})/dt = theta (D2 u_k - c0 u_k)
//!                    + (1-theta)(D2 u_{k+1} - c0 u_{k+1})
//!                    + Up u_{k+1} + Jsum u_{k+1} + f
//! ```
//!
//! where `D2` is the monotone second-order stencil built from the effective
//! diffusion `a + a_corr` (small jumps folded in), `Up` the upwind drift built
//! from the effective drift `b - beta` (jump compensator folded in), and
//! `Jsum u = sum_w [u(x + eta) - u(x)]` the explicit jump sum with targets
//! priced by the extension rule when they leave the box. The implicit part is
//! unconditionally stable; the explicit part obeys a CFL bound
//! `dt * (intensity + drift rate + explicit diffusion rate) <= cfl_safety`.
//!
//! The switching obstacle is enforced per time level: after an unconstrained
//! per-mode solve, Gauss-Seidel sweeps over modes recompute the obstacle
//! `psi_i = max_{j != i} (u_j - c_ij)` and re-solve each mode's linear
//! complementarity problem until no mode moves by more than `obstacle_tol`.
//! Strictly positive switching loops bound the number of sweeps by the mode
//! count; a sweep budget overrun is therefore reported as a loop-condition
//! violation rather than retried.

use crate::barrier::growth_term;
use crate::expr::EvalPoint;
use crate::localop::{apply_stencil, diffusion_stencil, upwind_stencil};
use crate::model::{
    evaluate_coefficients, norm, GridFunction, GridSpec, ProblemSpec, MAX_DIM,
};
use crate::nonlocal::{
    apply_nonlocal_smooth, build_quadrature, value_at, ExtensionRule, Quadrature,
    QuadratureConfig, SmoothField,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dirichlet policy on the lateral boundary of the truncated box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum BoundaryRule {
    /// `u_i(x_b, t) = g_i(x_b) + (T - t) (L_i g_i + J g_i + f_i)(x_b, T)`:
    /// first-order expansion around the terminal time, exact for solutions
    /// linear in time. The default.
    #[default]
    TerminalGrowth,
    /// Freeze the terminal data: `u_i(x_b, t) = g_i(x_b)`.
    TerminalValue,
    /// Clamp to the upper barrier anchored at the boundary point itself;
    /// used by the envelope checks.
    BarrierClamp { c: f64, lambda: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grid: GridSpec,
    /// Implicitness of the local diffusion/zeroth-order part; 1 is fully
    /// implicit (unconditionally stable), 0 fully explicit.
    pub theta: f64,
    /// Convergence tolerance for the obstacle sweeps across modes.
    pub obstacle_tol: f64,
    /// Target for the linear-complementarity residual of each mode solve.
    pub linear_tol: f64,
    /// Iteration cap for the projected Gauss-Seidel solver.
    pub max_iters: usize,
    pub boundary: BoundaryRule,
    /// How jump targets outside the box are priced.
    pub extension: ExtensionRule,
    /// The explicit part must satisfy `dt * rate <= cfl_safety`.
    pub cfl_safety: f64,
    pub quadrature: QuadratureConfig,
}

impl SolverConfig {
    pub fn new(grid: GridSpec) -> SolverConfig {
        SolverConfig {
            grid,
            theta: 1.0,
            obstacle_tol: 1e-9,
            linear_tol: 1e-11,
            max_iters: 20_000,
            boundary: BoundaryRule::default(),
            extension: ExtensionRule::default(),
            cfl_safety: 0.9,
            quadrature: QuadratureConfig::default(),
        }
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        if self.grid.n() != spec.n {
            return Err(Error::Spec(format!(
                "grid covers {} axes but the problem has {} spatial dimensions",
                self.grid.n(),
                spec.n
            )));
        }
        if self.grid.domain != spec.domain {
            return Err(Error::Spec(
                "grid box must coincide with the problem box".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Spec(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if self.obstacle_tol <= 0.0 || self.linear_tol <= 0.0 {
            return Err(Error::Spec("tolerances must be positive".into()));
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Spec(format!(
                "cfl_safety must lie in (0, 1], got {}",
                self.cfl_safety
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Spec("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveDiagnostics {
    pub dt: f64,
    /// Tightest time-step requirement seen across levels (explicit part).
    pub cfl_required_dt: f64,
    /// Largest number of obstacle sweeps any time level needed.
    pub obstacle_sweeps_max: usize,
    /// Largest inner iteration count any mode solve needed.
    pub linear_iters_max: usize,
    /// Quadrature node counts per jump component.
    pub quadrature_nodes: Vec<usize>,
}

/// Space-time solution with per-node complementarity data.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub u: GridFunction,
    /// `min(PDE residual, u_i - M_i u)` on interior nodes, zero on the
    /// boundary and at the terminal level.
    pub residual: GridFunction,
    /// Per (mode, level, node): the argmax mode of the obstacle when it
    /// binds, `-1` otherwise. Same layout as [`GridFunction`].
    pub binding: Vec<i16>,
    pub diagnostics: SolveDiagnostics,
}

impl SolveResult {
    pub fn binding_at(&self, mode: usize, k: usize, node: usize) -> Option<usize> {
        let off = (mode * self.u.nt + k) * self.u.num_nodes + node;
        let b = self.binding[off];
        (b >= 0).then_some(b as usize)
    }
}

/// One eliminated row of the implicit system `A u = rhs`: boundary neighbors
/// have already been folded into the right-hand side.
#[derive(Debug, Clone, Default)]
struct ImplicitRow {
    diag: f64,
    nbs: Vec<(usize, f64)>,
}

fn apply_row(rows: &[ImplicitRow], u: &[f64], idx: usize) -> f64 {
    let row = &rows[idx];
    let mut s = row.diag * u[idx];
    for (nb, c) in &row.nbs {
        s += c * u[*nb];
    }
    s
}

/// Tridiagonal elimination over the interior unknowns of a 1-D grid.
fn thomas(rows: &[ImplicitRow], rhs: &[f64], u: &mut [f64], nx: usize) {
    let nun = nx - 2;
    let mut diag = vec![0.0; nun];
    let mut sub = vec![0.0; nun];
    let mut sup = vec![0.0; nun];
    let mut r = vec![0.0; nun];
    for i in 0..nun {
        let idx = i + 1;
        diag[i] = rows[idx].diag;
        r[i] = rhs[idx];
        for (nb, c) in &rows[idx].nbs {
            if *nb == idx - 1 {
                sub[i] = *c;
            } else if *nb == idx + 1 {
                sup[i] = *c;
            }
        }
    }
    for i in 1..nun {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        r[i] -= w * r[i - 1];
    }
    u[nun] = r[nun - 1] / diag[nun - 1];
    for i in (0..nun - 1).rev() {
        u[i + 1] = (r[i] - sup[i] * u[i + 2]) / diag[i];
    }
}

/// Projected Gauss-Seidel for `min(A u - rhs, u - psi) = 0`; returns the
/// iteration count. `psi` entries of `-inf` turn the node unconstrained.
fn projected_gauss_seidel(
    rows: &[ImplicitRow],
    rhs: &[f64],
    psi: &[f64],
    u: &mut [f64],
    interior: &[usize],
    linear_tol: f64,
    max_iters: usize,
) -> Result<usize> {
    let mut res = f64::INFINITY;
    for it in 1..=max_iters {
        for &idx in interior {
            let row = &rows[idx];
            let mut s = rhs[idx];
            for (nb, c) in &row.nbs {
                s -= c * u[*nb];
            }
            u[idx] = (s / row.diag).max(psi[idx]);
        }
        res = 0.0;
        for &idx in interior {
            let lcp = (apply_row(rows, u, idx) - rhs[idx]).min(u[idx] - psi[idx]);
            res = res.max(lcp.abs());
        }
        if res <= linear_tol {
            return Ok(it);
        }
    }
    Err(Error::LinearSolve(format!(
        "projected Gauss-Seidel stalled at residual {res:.3e} after {max_iters} iterations \
         (target {linear_tol:.1e})"
    )))
}

/// Solve one mode's complementarity problem. Uses direct tridiagonal
/// elimination in 1-D when the constraint turns out inactive, projected
/// Gauss-Seidel otherwise.
#[allow(clippy::too_many_arguments)]
fn solve_mode(
    rows: &[ImplicitRow],
    rhs: &[f64],
    psi: &[f64],
    u: &mut [f64],
    interior: &[usize],
    grid: &GridSpec,
    linear_tol: f64,
    max_iters: usize,
) -> Result<usize> {
    if grid.n() == 1 {
        thomas(rows, rhs, u, grid.nx[0]);
        if interior.iter().all(|&idx| u[idx] >= psi[idx]) {
            return Ok(1);
        }
        for &idx in interior {
            u[idx] = u[idx].max(psi[idx]);
        }
    }
    projected_gauss_seidel(rows, rhs, psi, u, interior, linear_tol, max_iters)
}

/// Effective pointwise coefficients with the small-jump corrections folded
/// in: `a + a_corr` and `b - beta`.
struct EffectiveCoeffs {
    a: [[f64; MAX_DIM]; MAX_DIM],
    b: [f64; MAX_DIM],
    c0: f64,
    f: f64,
}

fn effective_coeffs(
    spec: &ProblemSpec,
    quads: &[Quadrature],
    i: usize,
    x: &[f64],
    t: f64,
) -> Result<EffectiveCoeffs> {
    let lc = evaluate_coefficients(spec, i, x, t);
    let mut eff = EffectiveCoeffs {
        a: lc.a,
        b: lc.b,
        c0: lc.c0,
        f: lc.f,
    };
    // Jump components are per mode: mode i jumps with spec.jumps[i].
    {
        let (comp, quad) = (&spec.jumps[i], &quads[i]);
        let beta = quad.compensator_drift(comp, x, t)?;
        let corr = quad.diffusion_correction(comp, x, t)?;
        for k in 0..MAX_DIM {
            eff.b[k] -= beta[k];
            for l in 0..MAX_DIM {
                eff.a[k][l] += corr[k][l];
            }
        }
    }
    if !(eff.c0.is_finite() && eff.f.is_finite() && eff.b.iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite {
            field: format!("coefficients of mode {i}"),
            point: format!("x = {x:?}, t = {t}"),
        });
    }
    Ok(eff)
}

/// Terminal values and time-growth rates on boundary nodes, used by
/// [`BoundaryRule::TerminalGrowth`]. Entries at interior nodes stay zero.
fn boundary_terminal_data(
    spec: &ProblemSpec,
    quads: &[Quadrature],
    grid: &GridSpec,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = grid.n();
    let mut gvals = vec![vec![0.0; grid.num_nodes()]; spec.m];
    let mut rates = vec![vec![0.0; grid.num_nodes()]; spec.m];
    for i in 0..spec.m {
        let field = SmoothField::new(&spec.terminal.g[i], n);
        for idx in 0..grid.num_nodes() {
            if !grid.is_boundary(idx) {
                continue;
            }
            let xfull = grid.node(idx);
            let x = &xfull[..n];
            let pt = EvalPoint::xt(x, spec.t_end);
            let g = field.value.eval(&pt);
            let lc = evaluate_coefficients(spec, i, x, spec.t_end);
            let mut rate = -lc.c0 * g + lc.f;
            for k in 0..n {
                rate += lc.b[k] * field.grad[k].eval(&pt);
                for l in 0..n {
                    rate += lc.a[k][l] * field.hess[k][l].eval(&pt);
                }
            }
            rate += apply_nonlocal_smooth(&spec.jumps[i], &quads[i], &field, x, spec.t_end)?;
            if !(g.is_finite() && rate.is_finite()) {
                return Err(Error::NonFinite {
                    field: format!("boundary data of mode {i}"),
                    point: format!("x = {x:?}"),
                });
            }
            gvals[i][idx] = g;
            rates[i][idx] = rate;
        }
    }
    Ok((gvals, rates))
}

struct BoundaryData {
    gvals: Vec<Vec<f64>>,
    rates: Vec<Vec<f64>>,
}

impl BoundaryData {
    /// Pre-obstacle Dirichlet value of mode `i` at boundary node `idx`.
    fn value(
        &self,
        rule: &BoundaryRule,
        spec: &ProblemSpec,
        grid: &GridSpec,
        i: usize,
        idx: usize,
        t: f64,
    ) -> f64 {
        match rule {
            BoundaryRule::TerminalGrowth => {
                self.gvals[i][idx] + (spec.t_end - t) * self.rates[i][idx]
            }
            BoundaryRule::TerminalValue => self.gvals[i][idx],
            BoundaryRule::BarrierClamp { c, lambda } => {
                let x = grid.node(idx);
                self.gvals[i][idx]
                    + growth_term(*c, *lambda, spec.p, norm(&x[..grid.n()]), 0.0, spec.t_end - t)
            }
        }
    }
}

/// Backward IMEX solve of the full obstacle system on the configured grid.
///
/// Terminal data is attained exactly; each earlier level solves the
/// per-mode linear complementarity problems and iterates the switching
/// obstacle across modes. Boundary nodes take the configured Dirichlet rule
/// projected onto the obstacle.
pub fn solve(spec: &ProblemSpec, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate(spec)?;
    let grid = &cfg.grid;
    let n = grid.n();
    let m = spec.m;
    let nt = grid.nt;
    let num_nodes = grid.num_nodes();
    let dx: Vec<f64> = (0..n).map(|a| grid.dx(a)).collect();
    let theta = cfg.theta;

    let quads: Vec<Quadrature> = spec
        .jumps
        .iter()
        .map(|c| build_quadrature(&c.measure, cfg.quadrature.clone()))
        .collect::<Result<_>>()?;
    let lam: Vec<f64> = quads.iter().map(|q| q.intensity()).collect();
    let bdata = {
        let (gvals, rates) = boundary_terminal_data(spec, &quads, grid)?;
        BoundaryData { gvals, rates }
    };

    let interior: Vec<usize> = (0..num_nodes).filter(|&i| !grid.is_boundary(i)).collect();
    let boundary: Vec<usize> = (0..num_nodes).filter(|&i| grid.is_boundary(i)).collect();

    let mut u = GridFunction::zeros(m, nt, num_nodes);
    let mut residual = GridFunction::zeros(m, nt, num_nodes);
    let mut binding = vec![-1i16; m * nt * num_nodes];
    let mut diag = SolveDiagnostics {
        dt: grid.dt(spec.t_end),
        cfl_required_dt: f64::INFINITY,
        obstacle_sweeps_max: 0,
        linear_iters_max: 0,
        quadrature_nodes: quads.iter().map(|q| q.nodes().len()).collect(),
    };

    // Cost matrices per node at one time level, row-major m x m.
    let cost_level = |t: f64| -> Result<Vec<f64>> {
        let mut c = Vec::with_capacity(num_nodes * m * m);
        for idx in 0..num_nodes {
            let x = grid.node(idx);
            c.extend(spec.costs.matrix_at(&x[..n], t)?);
        }
        Ok(c)
    };
    let obstacle_of = |vals: &[Vec<f64>], cmat: &[f64], i: usize, idx: usize| -> (f64, i16) {
        let mut best = f64::NEG_INFINITY;
        let mut arg = -1i16;
        for j in 0..m {
            if j == i {
                continue;
            }
            let v = vals[j][idx] - cmat[idx * m * m + i * m + j];
            if v > best {
                best = v;
                arg = j as i16;
            }
        }
        (best, arg)
    };

    // Terminal level: exact attainment, plus binding labels for reporting.
    let cmat_end = cost_level(spec.t_end)?;
    let mut terminal: Vec<Vec<f64>> = vec![vec![0.0; num_nodes]; m];
    for (i, vals) in terminal.iter_mut().enumerate() {
        for (idx, v) in vals.iter_mut().enumerate() {
            let x = grid.node(idx);
            *v = spec.g(i, &x[..n]);
        }
    }
    for i in 0..m {
        for idx in 0..num_nodes {
            u.set(i, nt - 1, idx, terminal[i][idx]);
            let (psi, arg) = obstacle_of(&terminal, &cmat_end, i, idx);
            if terminal[i][idx] - psi <= cfg.obstacle_tol {
                binding[(i * nt + nt - 1) * num_nodes + idx] = arg;
            }
        }
    }
    u.check_finite("terminal data")?;

    let mut u_old = terminal;
    for k in (0..nt - 1).rev() {
        let t_new = grid.time(spec.t_end, k);
        let t_old = grid.time(spec.t_end, k + 1);
        let dt = t_old - t_new;
        let cmat = cost_level(t_new)?;

        // Explicit stage and implicit assembly, mode by mode.
        let mut rhs: Vec<Vec<f64>> = vec![vec![0.0; num_nodes]; m];
        let mut rows: Vec<Vec<ImplicitRow>> = vec![vec![ImplicitRow::default(); num_nodes]; m];
        let mut bvals: Vec<Vec<f64>> = vec![vec![0.0; num_nodes]; m];
        let mut rate_max: f64 = 0.0;
        for i in 0..m {
            for &idx in &boundary {
                bvals[i][idx] = bdata.value(&cfg.boundary, spec, grid, i, idx, t_new);
            }
        }
        // Project the boundary values onto the switching obstacle; the
        // Dirichlet data must satisfy the same system as the interior.
        if m >= 2 {
            let base = bvals.clone();
            let mut converged = false;
            for sweep in 1..=m {
                let mut change: f64 = 0.0;
                for i in 0..m {
                    for &idx in &boundary {
                        let (psi, _) = obstacle_of(&bvals, &cmat, i, idx);
                        let v = base[i][idx].max(psi);
                        change = change.max((v - bvals[i][idx]).abs());
                        bvals[i][idx] = v;
                    }
                }
                if change <= cfg.obstacle_tol {
                    converged = true;
                    break;
                }
                if sweep == m {
                    return Err(Error::SweepOverrun { sweeps: m, change });
                }
            }
            debug_assert!(converged || m == 1);
        }

        for i in 0..m {
            let uo = &u_old[i];
            for &idx in &interior {
                let xfull = grid.node(idx);
                let x = &xfull[..n];
                let ix = grid.unflatten(idx);
                let eff_old = effective_coeffs(spec, &quads, i, x, t_old)?;
                let drift = upwind_stencil(&eff_old.b[..n], n, &dx);
                let mut rate = lam[i] + drift.neighbor_sum();
                let mut expl = apply_stencil(&drift, grid, uo, &ix) + eff_old.f;
                let comp = &spec.jumps[i];
                for q in quads[i].nodes() {
                    let eta = comp.eta_at(x, t_old, &q.z)?;
                    let mut target = [0.0; MAX_DIM];
                    for a in 0..n {
                        target[a] = x[a] + eta[a];
                    }
                    let uy = value_at(spec, grid, i, uo, &target[..n], &cfg.extension)?;
                    expl += q.w * (uy - uo[idx]);
                }
                if theta < 1.0 {
                    let context = format!("node {x:?}, t = {t_old}");
                    let dst = diffusion_stencil(&eff_old.a, n, &dx, &context)?;
                    expl += (1.0 - theta)
                        * (apply_stencil(&dst, grid, uo, &ix) - eff_old.c0 * uo[idx]);
                    rate += (1.0 - theta) * (dst.neighbor_sum() + eff_old.c0.max(0.0));
                }
                rate_max = rate_max.max(rate);
                let r = uo[idx] + dt * expl;
                if !r.is_finite() {
                    return Err(Error::NonFinite {
                        field: format!("explicit stage of mode {i}"),
                        point: format!("x = {x:?}, t = {t_old}"),
                    });
                }
                rhs[i][idx] = r;

                // Implicit row at the new time level.
                let eff_new = effective_coeffs(spec, &quads, i, x, t_new)?;
                let context = format!("node {x:?}, t = {t_new}");
                let dst = diffusion_stencil(&eff_new.a, n, &dx, &context)?;
                let row = &mut rows[i][idx];
                row.diag = 1.0 + theta * dt * (dst.neighbor_sum() + eff_new.c0);
                if 1.0 + theta * dt * eff_new.c0 <= 1e-12 {
                    return Err(Error::Monotonicity(format!(
                        "zeroth-order coefficient c0 = {} destroys diagonal dominance of the \
                         implicit system at {context}; reduce the time step",
                        eff_new.c0
                    )));
                }
                for (d0, d1, w) in &dst.neighbors {
                    let nb = grid.flatten(
                        &[
                            (ix[0] as isize + d0) as usize,
                            (ix[1] as isize + d1) as usize,
                        ][..n],
                    );
                    let coef = -theta * dt * w;
                    if grid.is_boundary(nb) {
                        rhs[i][idx] -= coef * bvals[i][nb];
                    } else if *w != 0.0 {
                        row.nbs.push((nb, coef));
                    }
                }
            }
        }
        if dt * rate_max > cfg.cfl_safety {
            return Err(Error::CflViolation {
                dt,
                required_dt: cfg.cfl_safety / rate_max,
            });
        }
        if rate_max > 0.0 {
            diag.cfl_required_dt = diag.cfl_required_dt.min(cfg.cfl_safety / rate_max);
        }

        // Unconstrained per-mode solves, then obstacle sweeps across modes.
        let mut u_new = bvals;
        let free = vec![f64::NEG_INFINITY; num_nodes];
        for i in 0..m {
            for &idx in &interior {
                u_new[i][idx] = u_old[i][idx];
            }
            let iters = solve_mode(
                &rows[i],
                &rhs[i],
                &free,
                &mut u_new[i],
                &interior,
                grid,
                cfg.linear_tol,
                cfg.max_iters,
            )?;
            diag.linear_iters_max = diag.linear_iters_max.max(iters);
        }
        if m >= 2 {
            let mut psi = vec![0.0; num_nodes];
            let mut prev = vec![0.0; num_nodes];
            let mut converged = false;
            for sweep in 1..=m {
                let mut change: f64 = 0.0;
                for i in 0..m {
                    for &idx in &interior {
                        psi[idx] = obstacle_of(&u_new, &cmat, i, idx).0;
                    }
                    prev.copy_from_slice(&u_new[i]);
                    let iters = solve_mode(
                        &rows[i],
                        &rhs[i],
                        &psi,
                        &mut u_new[i],
                        &interior,
                        grid,
                        cfg.linear_tol,
                        cfg.max_iters,
                    )?;
                    diag.linear_iters_max = diag.linear_iters_max.max(iters);
                    for &idx in &interior {
                        change = change.max((u_new[i][idx] - prev[idx]).abs());
                    }
                }
                diag.obstacle_sweeps_max = diag.obstacle_sweeps_max.max(sweep);
                if change <= cfg.obstacle_tol {
                    converged = true;
                    break;
                }
                if sweep == m {
                    return Err(Error::SweepOverrun { sweeps: m, change });
                }
            }
            debug_assert!(converged);
        }

        // Complementarity residual and binding labels at this level.
        for i in 0..m {
            for &idx in &interior {
                let (psi, arg) = obstacle_of(&u_new, &cmat, i, idx);
                let gap = u_new[i][idx] - psi;
                let pde = (apply_row(&rows[i], &u_new[i], idx) - rhs[i][idx]) / dt;
                residual.set(i, k, idx, pde.min(gap));
                if gap <= cfg.obstacle_tol {
                    binding[(i * nt + k) * num_nodes + idx] = arg;
                }
            }
            for &idx in &boundary {
                let (psi, arg) = obstacle_of(&u_new, &cmat, i, idx);
                if u_new[i][idx] - psi <= cfg.obstacle_tol {
                    binding[(i * nt + k) * num_nodes + idx] = arg;
                }
            }
            u.slice_mut(i, k).copy_from_slice(&u_new[i]);
        }
        u_old = u_new;
    }

    u.check_finite("solution")?;
    residual.check_finite("complementarity residual")?;
    Ok(SolveResult {
        u,
        residual,
        binding,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn parse(text: &str) -> ProblemSpec {
        ProblemSpec::from_json_str(text).unwrap()
    }

    fn heat_spec() -> ProblemSpec {
        parse(
            r#"{
              "dims": {"n": 1, "m": 1, "T": 1.0, "box": [[-3.0, 3.0]]},
              "p": 2, "K": 10.0,
              "modes": [{"sigma": [[1.0]], "b": [0.0], "c0": 0, "f": 0}],
              "costs": [[0]],
              "terminal": {"g": [{"pow": ["x", 2]}]}
            }"#,
        )
    }

    #[test]
    fn quadratic_heat_solution_is_reproduced_to_solver_precision() {
        // u(x,t) = x^2 + 2(T - t) satisfies the discrete scheme exactly:
        // second differences are exact on quadratics and the boundary rule
        // expands g linearly in time.
        let spec = heat_spec();
        for theta in [1.0, 0.5] {
            let mut cfg = SolverConfig::new(GridSpec::new(vec![[-3.0, 3.0]], vec![61], 21).unwrap());
            cfg.theta = theta;
            if theta < 1.0 {
                // Half-explicit diffusion needs the CFL bound satisfied.
                cfg.grid = GridSpec::new(vec![[-3.0, 3.0]], vec![61], 1001).unwrap();
            }
            let out = solve(&spec, &cfg).unwrap();
            let grid = &cfg.grid;
            for k in 0..grid.nt {
                let t = grid.time(1.0, k);
                for idx in 0..grid.num_nodes() {
                    let x = grid.node(idx)[0];
                    let exact = x * x + 2.0 * (1.0 - t);
                    assert_relative_eq!(out.u.get(0, k, idx), exact, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_forcing_integrates_exactly() {
        let spec = parse(
            r#"{
              "dims": {"n": 1, "m": 1, "T": 2.0, "box": [[-1.0, 1.0]]},
              "p": 2, "K": 10.0,
              "modes": [{"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 0.7}],
              "costs": [[0]],
              "terminal": {"g": [0]}
            }"#,
        );
        let cfg = SolverConfig::new(GridSpec::new(vec![[-1.0, 1.0]], vec![11], 9).unwrap());
        let out = solve(&spec, &cfg).unwrap();
        for k in 0..9 {
            let t = cfg.grid.time(2.0, k);
            for idx in 0..11 {
                assert_relative_eq!(out.u.get(0, k, idx), 0.7 * (2.0 - t), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_mode_switching_example_matches_dynamic_programming() {
        // Mode 1 earns nothing, mode 2 earns 1 per unit time, switching
        // costs 0.6 each way: u2 = T - t and u1 = max(0, T - t - 0.6).
        let spec = parse(
            r#"{
              "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-1.0, 1.0]]},
              "p": 2, "K": 10.0,
              "modes": [
                {"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 0},
                {"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 1}
              ],
              "costs": [[0, 0.6], [0.6, 0]],
              "terminal": {"g": [0, 0]}
            }"#,
        );
        let cfg = SolverConfig::new(GridSpec::new(vec![[-1.0, 1.0]], vec![21], 201).unwrap());
        let out = solve(&spec, &cfg).unwrap();
        for idx in 0..21 {
            assert_relative_eq!(out.u.get(0, 0, idx), 0.4, epsilon = 1e-12);
            assert_relative_eq!(out.u.get(1, 0, idx), 1.0, epsilon = 1e-12);
        }
        // The obstacle binds for mode 1 wherever u1 = u2 - 0.6 > 0.
        assert_eq!(out.binding_at(0, 0, 10), Some(1));
        assert_eq!(out.binding_at(1, 0, 10), None);
        assert!(out.diagnostics.obstacle_sweeps_max <= 2);
    }

    #[test]
    fn terminal_level_reproduces_g_bit_for_bit() {
        let spec = heat_spec();
        let cfg = SolverConfig::new(GridSpec::new(vec![[-3.0, 3.0]], vec![31], 5).unwrap());
        let out = solve(&spec, &cfg).unwrap();
        for idx in 0..31 {
            let x = cfg.grid.node(idx)[0];
            assert_eq!(out.u.get(0, 4, idx), x * x);
        }
    }

    #[test]
    fn cfl_violation_reports_the_required_time_step() {
        let spec = parse(
            r#"{
              "dims": {"n": 1, "m": 1, "T": 1.0, "box": [[-1.0, 1.0]]},
              "p": 2, "K": 60.0,
              "modes": [{"sigma": [[0.0]], "b": [50.0], "c0": 0, "f": 0}],
              "costs": [[0]],
              "terminal": {"g": [0]}
            }"#,
        );
        // dx = 0.2, rate = 50 / 0.2 = 250, dt = 0.25 -> dt * rate = 62.5.
        let cfg = SolverConfig::new(GridSpec::new(vec![[-1.0, 1.0]], vec![11], 5).unwrap());
        match solve(&spec, &cfg) {
            Err(Error::CflViolation { dt, required_dt }) => {
                assert_relative_eq!(dt, 0.25);
                assert_relative_eq!(required_dt, 0.9 / 250.0, epsilon = 1e-12);
            }
            other => panic!("expected CFL violation, got {other:?}"),
        }
    }

    #[test]
    fn negative_switching_loop_overruns_the_sweep_budget() {
        // c_12 + c_21 = -0.1 < 0: each sweep lifts both modes further, so
        // the fixed point never settles and the loop condition is reported.
        let spec = parse(
            r#"{
              "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-1.0, 1.0]]},
              "p": 2, "K": 10.0,
              "modes": [
                {"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 0},
                {"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 0}
              ],
              "costs": [[0, -0.2], [0.1, 0]],
              "terminal": {"g": [0, 0]}
            }"#,
        );
        let cfg = SolverConfig::new(GridSpec::new(vec![[-1.0, 1.0]], vec![5], 3).unwrap());
        match solve(&spec, &cfg) {
            Err(Error::SweepOverrun { sweeps, change }) => {
                assert_eq!(sweeps, 2);
                assert!(change > 0.0);
            }
            other => panic!("expected sweep overrun, got {other:?}"),
        }
    }

    #[test]
    fn refinement_improves_a_smooth_solution_by_a_first_order_factor() {
        // g = sin(x) on [-pi, pi]: u(x,t) = exp(-(T-t)) sin(x), boundary
        // values vanish identically, so all error is truncation.
        let pi = std::f64::consts::PI;
        let spec = parse(&format!(
            r#"{{
              "dims": {{"n": 1, "m": 1, "T": 0.5, "box": [[{:.17}, {:.17}]]}},
              "p": 2, "K": 10.0,
              "modes": [{{"sigma": [[1.0]], "b": [0.0], "c0": 0, "f": 0}}],
              "costs": [[0]],
              "terminal": {{"g": [{{"sin": "x"}}]}}
            }}"#,
            -pi, pi
        ));
        let mut errs = Vec::new();
        for (nx, nt) in [(41, 41), (81, 81)] {
            let cfg = SolverConfig::new(GridSpec::new(vec![[-pi, pi]], vec![nx], nt).unwrap());
            let out = solve(&spec, &cfg).unwrap();
            let mut worst: f64 = 0.0;
            for idx in 0..nx {
                let x = cfg.grid.node(idx)[0];
                let exact = (-0.5f64).exp() * x.sin();
                worst = worst.max((out.u.get(0, 0, idx) - exact).abs());
            }
            errs.push(worst);
        }
        assert!(
            errs[0] / errs[1] >= 1.7,
            "refinement factor {} too small (errors {errs:?})",
            errs[0] / errs[1]
        );
    }

    #[test]
    fn two_dimensional_quadratic_with_cross_term_is_exact() {
        // a = [[1, 0.5], [0.5, 1]], g = x^2 + y^2 + x y: L g = 5, so
        // u = g + 5 (T - t); the mixed stencil is exact on this g.
        let spec = parse(
            r#"{
              "dims": {"n": 2, "m": 1, "T": 0.5, "box": [[-2.0, 2.0], [-2.0, 2.0]]},
              "p": 2, "K": 10.0,
              "modes": [{"sigma": [[1.0, 0.0], [0.5, 0.8660254037844386]], "b": [0.0, 0.0], "c0": 0, "f": 0}],
              "costs": [[0]],
              "terminal": {"g": [{"add": [{"pow": ["x0", 2]}, {"pow": ["x1", 2]}, {"mul": ["x0", "x1"]}]}]}
            }"#,
        );
        let cfg = SolverConfig::new(
            GridSpec::new(vec![[-2.0, 2.0], [-2.0, 2.0]], vec![13, 13], 6).unwrap(),
        );
        let out = solve(&spec, &cfg).unwrap();
        let grid = &cfg.grid;
        for idx in 0..grid.num_nodes() {
            let p = grid.node(idx);
            let exact = p[0] * p[0] + p[1] * p[1] + p[0] * p[1] + 5.0 * 0.5;
            assert_relative_eq!(out.u.get(0, 0, idx), exact, epsilon = 1e-8);
        }
    }

    #[test]
    fn compensated_atom_jump_matches_the_closed_form_mean() {
        // sigma = 1 plus a unit-rate jump of size 0.5 (inner, so the
        // compensator removes its mean drift): for g = x^2 the value is
        // u = x^2 + (2 + 0.25)(T - t). Jump targets land on grid nodes, so
        // the only discretization error is the first-order upwind bias of
        // the compensator drift, O(dx).
        let spec = parse(
            r#"{
              "dims": {"n": 1, "m": 1, "T": 1.0, "box": [[-8.0, 8.0]]},
              "p": 2, "K": 10.0,
              "modes": [{"sigma": [[1.0]], "b": [0.0], "c0": 0, "f": 0}],
              "jumps": [{"measure": {"kind": "finite-atoms", "atoms": [{"z": 1.0, "w": 1.0}]},
                         "eta": [{"mul": [0.5, "z"]}]}],
              "costs": [[0]],
              "terminal": {"g": [{"pow": ["x", 2]}]}
            }"#,
        );
        let cfg = SolverConfig::new(GridSpec::new(vec![[-8.0, 8.0]], vec![1601], 81).unwrap());
        let out = solve(&spec, &cfg).unwrap();
        let mid = 800; // x = 0
        assert_relative_eq!(cfg.grid.node(mid)[0], 0.0);
        assert!((out.u.get(0, 0, mid) - 2.25).abs() < 0.01);
    }

    #[test]
    fn complementarity_residual_stays_within_the_reporting_bound() {
        // Diffusive two-mode problem with a binding obstacle; the stored
        // residual min(PDE, u - M u) must stay near zero everywhere.
        let spec = parse(
            r#"{
              "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-2.0, 2.0]]},
              "p": 2, "K": 10.0,
              "modes": [
                {"sigma": [[0.3]], "b": [0.0], "c0": 0, "f": 0},
                {"sigma": [[0.3]], "b": [0.0], "c0": 0, "f": 1}
              ],
              "costs": [[0, 0.6], [0.6, 0]],
              "terminal": {"g": [0, 0]}
            }"#,
        );
        let cfg = SolverConfig::new(GridSpec::new(vec![[-2.0, 2.0]], vec![41], 101).unwrap());
        let out = solve(&spec, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for k in 0..101 {
                for idx in 0..41 {
                    worst = worst.max(out.residual.get(i, k, idx).abs());
                }
            }
        }
        assert!(worst <= 1e-8, "complementarity residual {worst:.3e}");
        // The obstacle does bind for mode 1 near t = 0.
        assert_eq!(out.binding_at(0, 0, 20), Some(1));
    }

    #[test]
    fn barrier_clamp_boundary_rule_runs_and_dominates_terminal_data() {
        let spec = heat_spec();
        let mut cfg = SolverConfig::new(GridSpec::new(vec![[-3.0, 3.0]], vec![31], 11).unwrap());
        cfg.boundary = BoundaryRule::BarrierClamp { c: 8.0, lambda: 1.0 };
        let out = solve(&spec, &cfg).unwrap();
        // The clamp anchors the barrier at the boundary point, so values
        // there sit above the terminal data for earlier times.
        assert!(out.u.get(0, 0, 0) > out.u.get(0, 10, 0));
    }

    #[test]
    fn config_validation_rejects_mismatched_grids() {
        let spec = heat_spec();
        let cfg = SolverConfig::new(GridSpec::new(vec![[-2.0, 2.0]], vec![11], 5).unwrap());
        assert!(matches!(solve(&spec, &cfg), Err(Error::Spec(_))));
    }

    #[test]
    fn fully_explicit_stepping_matches_the_quadratic_solution() {
        let spec = heat_spec();
        let mut cfg = SolverConfig::new(GridSpec::new(vec![[-3.0, 3.0]], vec![21], 201).unwrap());
        cfg.theta = 0.0;
        // dx = 0.3, rate = 2/0.09 = 22.2, dt = 0.005 -> margin 0.11.
        let out = solve(&spec, &cfg).unwrap();
        for idx in 0..21 {
            let x = cfg.grid.node(idx)[0];
            assert_relative_eq!(out.u.get(0, 0, idx), x * x + 2.0, epsilon = 1e-9);
        }
    }
}
