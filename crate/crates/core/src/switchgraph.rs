//! Switching-cost fields and the mode-switching graph.
//!
//! The `m` modes form a complete directed graph whose edge weights are the
//! switching costs `c_ij(x, t)` (zero on the diagonal). This module provides
//! the obstacle operator `M_i u = max_{j != i} (u_j - c_ij)`, the strict
//! no-free-loop check (every directed cycle has positive total cost), and
//! the cheapest-chain closure
//!
//! ```text
//! c~_ij(x, t) = min over chains i = i_1, ..., i_l = j
//!               of  c_{i_1 i_2} + ... + c_{i_{l-1} i_l},
//! ```
//!
//! computed pointwise by Floyd-Warshall relaxation. The closure never
//! increases costs, satisfies the triangle inequality, is idempotent, and
//! leaves the value functions of the switching problem unchanged.

use crate::expr::{EvalPoint, Expr};
use crate::{Error, Result};

/// An `m x m` field of switching-cost expressions in `(x, t)`.
///
/// With `closed` set, every evaluation returns the cheapest-chain closure of
/// the underlying matrix at that point (computed lazily per point).
#[derive(Debug, Clone)]
pub struct SwitchingCostField {
    m: usize,
    exprs: Vec<Expr>,
    closed: bool,
}

impl SwitchingCostField {
    pub fn new(rows: Vec<Vec<Expr>>) -> Result<SwitchingCostField> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Spec("cost matrix must be square".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if !row[i].is_const_zero() {
                return Err(Error::Spec(format!("costs[{i}][{i}] must be 0")));
            }
        }
        Ok(SwitchingCostField {
            m,
            exprs: rows.into_iter().flatten().collect(),
            closed: false,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Expression rows (the base matrix, regardless of closure state).
    pub fn rows(&self) -> Vec<Vec<Expr>> {
        (0..self.m)
            .map(|i| (0..self.m).map(|j| self.exprs[i * self.m + j].clone()).collect())
            .collect()
    }

    pub fn expr(&self, i: usize, j: usize) -> &Expr {
        &self.exprs[i * self.m + j]
    }

    /// Evaluate the raw (unclosed) matrix at a point, row-major.
    fn base_matrix_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let p = EvalPoint::xt(x, t);
        let mut c = Vec::with_capacity(self.m * self.m);
        for i in 0..self.m {
            for j in 0..self.m {
                let v = self.exprs[i * self.m + j].eval(&p);
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        field: format!("costs[{i}][{j}]"),
                        point: format!("x = {x:?}, t = {t}"),
                    });
                }
                c.push(v);
            }
        }
        Ok(c)
    }

    /// Cost matrix at a point (closed if this field is the closure).
    pub fn matrix_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let base = self.base_matrix_at(x, t)?;
        if self.closed {
            close_matrix(&base, self.m).map_err(|loop_desc| {
                Error::NegativeLoop(format!("{loop_desc} at x = {x:?}, t = {t}"))
            })
        } else {
            Ok(base)
        }
    }

    /// Single entry `c_ij(x, t)` (or its closure).
    pub fn eval(&self, i: usize, j: usize, x: &[f64], t: f64) -> Result<f64> {
        if self.closed {
            Ok(self.matrix_at(x, t)?[i * self.m + j])
        } else {
            let v = self.exprs[i * self.m + j].eval(&EvalPoint::xt(x, t));
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    field: format!("costs[{i}][{j}]"),
                    point: format!("x = {x:?}, t = {t}"),
                });
            }
            Ok(v)
        }
    }
}

/// Replace a cost field by its cheapest-chain closure. Evaluation errors
/// on points where the underlying matrix has a nonpositive-cost loop.
pub fn triangle_closure(field: &SwitchingCostField) -> SwitchingCostField {
    SwitchingCostField {
        m: field.m,
        exprs: field.exprs.clone(),
        closed: true,
    }
}

/// Floyd-Warshall closure of one matrix, run to a floating-point fixed
/// point so that the triangle inequality `d_ik <= d_ij + d_jk` holds exactly
/// for the returned values. Errors (with a description) when a negative
/// loop is detected.
pub fn close_matrix(c: &[f64], m: usize) -> std::result::Result<Vec<f64>, String> {
    let mut d = c.to_vec();
    // One classical pass finds all shortest simple paths; extra passes only
    // settle floating-point fixed-point status. If values still decrease
    // after m + 1 full sweeps, some loop must have negative total cost.
    let max_sweeps = m + 2;
    for sweep in 0..max_sweeps {
        let mut changed = false;
        for k in 0..m {
            for i in 0..m {
                let dik = d[i * m + k];
                for j in 0..m {
                    let cand = dik + d[k * m + j];
                    if cand < d[i * m + j] {
                        d[i * m + j] = cand;
                        changed = true;
                    }
                }
            }
        }
        for i in 0..m {
            if d[i * m + i] < 0.0 {
                return Err(format!(
                    "mode {i} reachable from itself at total cost {}",
                    d[i * m + i]
                ));
            }
        }
        if !changed {
            return Ok(d);
        }
        if sweep == max_sweeps - 1 {
            return Err("relaxation kept improving; nonpositive loop present".into());
        }
    }
    Ok(d)
}

/// Obstacle operator at one point: `max_{j != i} (u_j - c_ij)` given the
/// mode values `u` and the cost matrix `c` (row-major `m x m`). Returns
/// negative infinity when there is no other mode to switch to.
pub fn obstacle(u: &[f64], c: &[f64], m: usize, i: usize) -> f64 {
    obstacle_argmax(u, c, m, i).0
}

/// Obstacle value together with the best switch target.
pub fn obstacle_argmax(u: &[f64], c: &[f64], m: usize, i: usize) -> (f64, Option<usize>) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = None;
    for j in 0..m {
        if j == i {
            continue;
        }
        let v = u[j] - c[i * m + j];
        if v > best {
            best = v;
            arg = Some(j);
        }
    }
    (best, arg)
}

/// Result of the strict no-free-loop check.
#[derive(Debug, Clone)]
pub struct LoopReport {
    pub pass: bool,
    /// Minimum total cost over all directed simple loops and sample points;
    /// `+inf` when there are no loops (single mode).
    pub min_loop_value: f64,
    /// Loop attaining the minimum (mode indices, first repeated implicitly).
    pub min_loop: Vec<usize>,
    pub worst: String,
}

/// Check strict positivity of every directed simple loop (length 2..=m) of
/// the cost matrix at each sample point.
pub fn no_loop_check(
    field: &SwitchingCostField,
    points: &[(Vec<f64>, f64)],
) -> Result<LoopReport> {
    let m = field.m;
    if m < 2 {
        return Ok(LoopReport {
            pass: true,
            min_loop_value: f64::INFINITY,
            min_loop: vec![],
            worst: "single mode: no loops".into(),
        });
    }
    let loops = enumerate_simple_loops(m);
    let mut min_value = f64::INFINITY;
    let mut min_loop = Vec::new();
    let mut worst = String::new();
    for (x, t) in points {
        let c = field.matrix_at(x, *t)?;
        for lp in &loops {
            let mut total = 0.0;
            for w in 0..lp.len() {
                let a = lp[w];
                let b = lp[(w + 1) % lp.len()];
                total += c[a * m + b];
            }
            if total < min_value {
                min_value = total;
                min_loop = lp.clone();
                worst = format!("loop {:?} at x = {:?}, t = {}", lp, x, t);
            }
        }
    }
    Ok(LoopReport {
        pass: min_value > 0.0,
        min_loop_value: min_value,
        min_loop,
        worst,
    })
}

/// All directed simple loops on `0..m`, each listed once (canonical start =
/// smallest mode in the loop). Loop lengths range over `2..=m`.
pub fn enumerate_simple_loops(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut path = Vec::new();
    let mut used = vec![false; m];
    fn dfs(start: usize, m: usize, path: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if path.len() >= 2 {
            out.push(path.clone());
        }
        for next in (start + 1)..m {
            if !used[next] {
                used[next] = true;
                path.push(next);
                dfs(start, m, path, used, out);
                path.pop();
                used[next] = false;
            }
        }
    }
    for start in 0..m {
        path.clear();
        path.push(start);
        used.fill(false);
        used[start] = true;
        dfs(start, m, &mut path, &mut used, &mut out);
    }
    out
}

/// Reference implementation for verification: the cheapest cost over simple
/// chains from `i` to `j` of length at most `m`, by direct enumeration.
pub fn cheapest_chain_by_enumeration(c: &[f64], m: usize, i: usize, j: usize) -> f64 {
    fn dfs(c: &[f64], m: usize, cur: usize, target: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if cur == target && acc < *best {
            *best = acc;
        }
        for next in 0..m {
            if !used[next] && next != cur {
                used[next] = true;
                dfs(c, m, next, target, used, acc + c[cur * m + next], best);
                used[next] = false;
            }
        }
    }
    if i == j {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; m];
    used[i] = true;
    dfs(c, m, i, j, &mut used, 0.0, &mut best);
    best
}
