//! Barrier (super/subsolution) profiles anchored at a point, and the
//! calibration of their amplitude constant.
//!
//! For an anchor `(y, s, i)` with data `h = (h_1, ..., h_m)` the upper
//! barrier in mode `j` is
//!
//! ```text
//! psi_j(x, t) = c lam e^{c(s-t)} { A c (s-t) + A/lam^2 + B|x-y|^2 + |x-y|^p }
//!               + h_i(y) + c_ij(x, t),
//! ```
//!
//! with `A = 1 + |y|^p`, `B = 1 + |y|^(p-2)`; the lower barrier flips the
//! sign of the growth part and replaces `h_i(y) + c_ij` by `h_j(y)`. For
//! large enough `c` the upper family dominates the terminal data, dominates
//! the switching obstacle (an exact cost identity), and is a supersolution
//! of every mode equation; `calibrate_c` finds such a `c` by doubling and
//! bisection on a numerically evaluated one-sided residual. Evaluating the
//! family at the anchor and tuning the steepness `lam` yields the time
//! regularity bound `u_i(y, t) - u_i(y, s) <= 2 c^2 e^{c(s-t)} A (s-t)^(1/2)`
//! that the regularity experiment probes.

use crate::expr::{EvalPoint, Expr};
use crate::model::{evaluate_coefficients, norm, GridSpec, ProblemSpec, MAX_DIM};
use crate::nonlocal::{self, is_inner, Quadrature};
use crate::switchgraph::SwitchingCostField;
use crate::{Error, Result};

/// Growth part of the barrier:
/// `c lam e^{c smt} (A c smt + A / lam^2 + B r^2 + r^p)` with the weights
/// `A`, `B` computed from the anchor norm.
pub fn growth_term(c: f64, lambda: f64, p: u32, y_norm: f64, r: f64, s_minus_t: f64) -> f64 {
    let a_big = 1.0 + y_norm.powi(p as i32);
    let b_big = 1.0 + y_norm.powi(p as i32 - 2);
    c * lambda
        * (c * s_minus_t).exp()
        * (a_big * c * s_minus_t + a_big / (lambda * lambda) + b_big * r * r + r.powi(p as i32))
}

/// Anchor data for one barrier family.
#[derive(Debug, Clone)]
pub struct BarrierParams {
    pub c: f64,
    pub lambda: f64,
    /// Anchor point.
    pub y: Vec<f64>,
    /// Anchor time; the barrier is defined for `t <= s`.
    pub s: f64,
    /// Anchor mode.
    pub i: usize,
    /// Anchor data, one expression in `x` per mode.
    pub h: Vec<Expr>,
    /// Growth exponent of the problem class.
    pub p: u32,
}

impl BarrierParams {
    pub fn new(
        c: f64,
        lambda: f64,
        y: Vec<f64>,
        s: f64,
        i: usize,
        h: Vec<Expr>,
        p: u32,
    ) -> Result<BarrierParams> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Spec(format!("barrier constant must be positive, got {c}")));
        }
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return Err(Error::Spec(format!("barrier steepness must be >= 1, got {lambda}")));
        }
        if y.iter().any(|v| !v.is_finite()) || !s.is_finite() {
            return Err(Error::Spec("barrier anchor must be finite".into()));
        }
        if i >= h.len() {
            return Err(Error::Spec(format!(
                "anchor mode {i} out of range for {} modes",
                h.len()
            )));
        }
        if p < 2 {
            return Err(Error::Spec(format!("growth exponent must be >= 2, got {p}")));
        }
        Ok(BarrierParams { c, lambda, y, s, i, h, p })
    }

    /// `A = 1 + |y|^p`, recomputed from the anchor.
    pub fn a_weight(&self) -> f64 {
        1.0 + norm(&self.y).powi(self.p as i32)
    }

    /// `B = 1 + |y|^(p-2)`, recomputed from the anchor.
    pub fn b_weight(&self) -> f64 {
        1.0 + norm(&self.y).powi(self.p as i32 - 2)
    }

    /// Anchor data value `h_j(y)`.
    pub fn h_at_anchor(&self, j: usize) -> f64 {
        self.h[j].eval(&EvalPoint::xt(&self.y, self.s))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t > self.s {
            return Err(Error::Domain(format!(
                "barrier queried at t = {t} past its anchor time s = {}",
                self.s
            )));
        }
        Ok(())
    }
}

/// Upper barrier `psi_j(x, t)`; errors for `t > s`.
pub fn upper_barrier(
    params: &BarrierParams,
    costs: &SwitchingCostField,
    j: usize,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    params.check_time(t)?;
    let r = dist(x, &params.y);
    let cost = costs.eval(params.i, j, x, t)?;
    Ok(
        growth_term(params.c, params.lambda, params.p, norm(&params.y), r, params.s - t)
            + params.h_at_anchor(params.i)
            + cost,
    )
}

/// Lower barrier `psi_check_j(x, t)`: sign-flipped growth, mode-matched
/// anchor data, no cost term; errors for `t > s`.
pub fn lower_barrier(params: &BarrierParams, j: usize, x: &[f64], t: f64) -> Result<f64> {
    params.check_time(t)?;
    let r = dist(x, &params.y);
    Ok(
        -growth_term(params.c, params.lambda, params.p, norm(&params.y), r, params.s - t)
            + params.h_at_anchor(j),
    )
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Outcome of a sampled dominance check.
#[derive(Debug, Clone)]
pub struct DominanceReport {
    pub pass: bool,
    /// Smallest margin (barrier minus dominated quantity) seen.
    pub worst_margin: f64,
    pub worst_node: String,
    /// For the terminal check: smallest constant that passes on the same
    /// samples, found by bisection.
    pub minimal_c: Option<f64>,
}

/// Check `psi_j(x, s) >= h_j(x)` at the sample points for every mode, and
/// bisect for the smallest constant that still passes.
pub fn verify_terminal_dominance(
    params: &BarrierParams,
    costs: &SwitchingCostField,
    samples: &[Vec<f64>],
) -> Result<DominanceReport> {
    let m = params.h.len();
    let margin_at_c = |c: f64| -> Result<(f64, String)> {
        let probe = BarrierParams { c, ..params.clone() };
        let mut worst = f64::INFINITY;
        let mut node = String::new();
        for x in samples {
            for j in 0..m {
                let psi = upper_barrier(&probe, costs, j, x, params.s)?;
                let hj = params.h[j].eval(&EvalPoint::xt(x, params.s));
                if !(psi.is_finite() && hj.is_finite()) {
                    return Err(Error::NonFinite {
                        field: "terminal dominance margin".into(),
                        point: format!("x = {x:?}, mode {j}"),
                    });
                }
                if psi - hj < worst {
                    worst = psi - hj;
                    node = format!("mode {j} at x = {x:?}");
                }
            }
        }
        Ok((worst, node))
    };
    let (worst_margin, worst_node) = margin_at_c(params.c)?;
    // The barrier grows monotonically in c, so bisection brackets the
    // smallest passing constant on these samples.
    let minimal_c = if worst_margin >= 0.0 {
        let mut lo = 0.0f64;
        let mut hi = params.c;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid <= 0.0 || mid == lo || mid == hi {
                break;
            }
            if margin_at_c(mid)?.0 >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    } else {
        None
    };
    Ok(DominanceReport {
        pass: worst_margin >= 0.0,
        worst_margin,
        worst_node,
        minimal_c,
    })
}

/// Check the obstacle dominance identity
/// `psi_j - max_{k != j}(psi_k - c_jk) = min_{k != j} (c_ij - c_ik + c_jk)`
/// at the samples: nonnegativity (the triangle inequality at work) and the
/// exact algebraic agreement between the two sides.
pub fn verify_obstacle_dominance(
    params: &BarrierParams,
    costs: &SwitchingCostField,
    samples: &[(Vec<f64>, f64)],
) -> Result<DominanceReport> {
    let m = params.h.len();
    let mut worst = f64::INFINITY;
    let mut node = String::from("no switch alternatives");
    for (x, t) in samples {
        if *t > params.s {
            continue;
        }
        let c = costs.matrix_at(x, *t)?;
        let i = params.i;
        for j in 0..m {
            let psi_j = upper_barrier(params, costs, j, x, *t)?;
            for k in 0..m {
                if k == j {
                    continue;
                }
                let psi_k = upper_barrier(params, costs, k, x, *t)?;
                // The growth and anchor terms of the barrier are shared by
                // every mode, so the switch margin reduces to the pure cost
                // expression below.  Evaluate it from the cost side, which
                // stays well conditioned even when the growth term dwarfs
                // the costs, and cross-check the barrier values against it
                // within the resolution their magnitude leaves available.
                let margin = c[i * m + j] - c[i * m + k] + c[j * m + k];
                let observed = psi_j - (psi_k - c[j * m + k]);
                let resolution =
                    1e-9 * (1.0 + margin.abs() + psi_j.abs().max(psi_k.abs()));
                if (observed - margin).abs() > resolution {
                    return Err(Error::Assumption {
                        tag: "O2",
                        detail: format!(
                            "barrier obstacle margin {observed} disagrees with the cost identity \
                             {margin} for (i, j, k) = ({i}, {j}, {k}) at x = {x:?}, t = {t}"
                        ),
                    });
                }
                if margin < worst {
                    worst = margin;
                    node = format!("(i, j, k) = ({i}, {j}, {k}) at x = {x:?}, t = {t}");
                }
            }
        }
    }
    Ok(DominanceReport {
        pass: worst >= -1e-12,
        worst_margin: worst,
        worst_node: node,
        minimal_c: None,
    })
}

/// Calibration outcome: the accepted constant and the worst residual seen
/// at that constant.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub c_star: f64,
    /// Terminal-dominance floor `K 2^(p+1)` the search starts from.
    pub floor: f64,
    pub worst_residual: f64,
    pub worst_node: String,
    pub evaluations: usize,
}

/// One-sided lower bound on the supersolution residual
/// `-d_t psi + F_j(x, t, psi, D psi, D^2 psi, psi(.))` of the upper barrier
/// anchored at `(y, s, i)`, for equation mode `j`.
///
/// The smooth growth part is differentiated analytically; the switching
/// cost inside `psi` only enters through its value plus the one-sided
/// envelope bounds (time slope `K(1+|x|^p)`, gradient `K(1+|x|^(p-1))`,
/// Hessian `K(1+|x|^(p-2)) I`, and the matching jump increments), so a
/// nonnegative return certifies the pointwise inequality.
#[allow(clippy::too_many_arguments)]
pub fn residual_lower_bound(
    spec: &ProblemSpec,
    quads: &[Quadrature],
    params: &BarrierParams,
    j: usize,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    params.check_time(t)?;
    let n = spec.n;
    let p = params.p as i32;
    let (c, lam) = (params.c, params.lambda);
    let kk = spec.k_bound;
    let smt = params.s - t;
    let a_big = params.a_weight();
    let b_big = params.b_weight();
    let v: Vec<f64> = (0..n).map(|k| x[k] - params.y[k]).collect();
    let r = norm(&v);
    let phi = |xx: &[f64]| -> f64 {
        let rr = dist(xx, &params.y);
        a_big / (lam * lam) + b_big * rr * rr + rr.powi(p)
    };
    let grad_coef = 2.0 * b_big + p as f64 * r.powi(p - 2);
    let brace = a_big * c * smt + phi(x);

    let lc = evaluate_coefficients(spec, j, x, t);
    let tr_a: f64 = (0..n).map(|k| lc.a[k][k]).sum();
    // tr(a D^2 Phi) and <b, grad Phi>.
    let mut q_a = grad_coef * tr_a;
    if r > 0.0 && p > 2 {
        let mut vav = 0.0;
        for k in 0..n {
            for l in 0..n {
                vav += v[k] * lc.a[k][l] * v[l];
            }
        }
        q_a += (p * (p - 2)) as f64 * r.powi(p - 4) * vav;
    }
    let q_b: f64 = (0..n).map(|k| lc.b[k] * grad_coef * v[k]).sum();
    let b_norm = norm(&lc.b[..n]);

    // Jump terms: the growth part exactly, the cost part by its envelope.
    let comp = &spec.jumps[j];
    let quad = &quads[j];
    let mut j_phi = 0.0;
    let mut j_cost_slack = 0.0;
    let xw = 1.0 + norm(x).powi(p - 1);
    for q in quad.nodes() {
        let eta = comp.eta_at(x, t, &q.z)?;
        let mut target = [0.0; MAX_DIM];
        for k in 0..n {
            target[k] = x[k] + eta[k];
        }
        let eta_norm = norm(&eta[..n]);
        let mut inc = phi(&target[..n]) - phi(x);
        if is_inner(&q.z) {
            for k in 0..n {
                inc -= eta[k] * grad_coef * v[k];
            }
            let wmax = 1.0 + norm(x).max(norm(&target[..n])).powi(p - 2);
            j_cost_slack += q.w * 0.5 * kk * wmax * eta_norm * eta_norm;
        } else {
            let tw = 1.0 + norm(&target[..n]).powi(p - 1);
            j_cost_slack += q.w * kk * (xw + tw - 1.0) * eta_norm;
        }
        j_phi += q.w * inc;
    }
    for q in quad.corr_nodes() {
        let eta = comp.eta_at(x, t, &q.z)?;
        let eta_norm = norm(&eta[..n]);
        // eta^T D^2 Phi eta for the folded sub-cutoff mass.
        let mut quadform = grad_coef * eta_norm * eta_norm;
        if r > 0.0 && p > 2 {
            let ve: f64 = (0..n).map(|k| v[k] * eta[k]).sum();
            quadform += (p * (p - 2)) as f64 * r.powi(p - 4) * ve * ve;
        }
        j_phi += 0.5 * q.w * quadform;
        let wmax = 1.0 + norm(x).powi(p - 2).max((norm(x) + eta_norm).powi(p - 2));
        j_cost_slack += q.w * 0.5 * kk * wmax * eta_norm * eta_norm;
    }

    let cost = spec.costs.eval(params.i, j, x, t)?;
    let anchor_level = params.h_at_anchor(params.i) + cost;

    // Everything sharing the c lam e^{c smt} factor, kept together so a
    // huge c yields +inf rather than inf - inf.
    let bracket = c * (brace + a_big) - q_a - q_b - j_phi + lc.c0 * brace;
    let envelope = kk * (1.0 + norm(x).powi(p))
        + kk * (1.0 + norm(x).powi(p - 2)) * tr_a
        + b_norm * kk * xw
        + j_cost_slack
        + lc.f
        - lc.c0 * anchor_level;
    let amp = (c * smt).exp();
    let main = if amp.is_infinite() {
        match bracket.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => f64::INFINITY,
            Some(std::cmp::Ordering::Less) => f64::NEG_INFINITY,
            _ => 0.0,
        }
    } else {
        amp * c * lam * bracket
    };
    Ok(main - envelope)
}

/// Anchor set used by the calibration: a coarse sweep of the box corners,
/// edge midpoints and center.
fn anchor_points(grid: &GridSpec) -> Vec<Vec<f64>> {
    let n = grid.n();
    let axis_values: Vec<[f64; 3]> = (0..n)
        .map(|a| {
            let [lo, hi] = grid.domain[a];
            [lo, 0.5 * (lo + hi), hi]
        })
        .collect();
    let mut out = Vec::new();
    match n {
        1 => {
            for v in axis_values[0] {
                out.push(vec![v]);
            }
        }
        _ => {
            for v0 in axis_values[0] {
                for v1 in axis_values[1] {
                    out.push(vec![v0, v1]);
                }
            }
        }
    }
    out
}

/// Smallest constant (up to bisection tolerance) for which the residual
/// lower bound is nonnegative over the validation sweep: every grid node,
/// probe times between 0 and the anchor time, all anchor points, and all
/// (anchor mode, equation mode) pairs. Starts at the terminal-dominance
/// floor `K 2^(p+1)` and never returns less.
pub fn calibrate_c(spec: &ProblemSpec, grid: &GridSpec, lambda: f64) -> Result<CalibrationReport> {
    let quads: Vec<Quadrature> = spec
        .jumps
        .iter()
        .map(|c| nonlocal::build_quadrature(&c.measure, nonlocal::QuadratureConfig::default()))
        .collect::<Result<_>>()?;
    let anchors = anchor_points(grid);
    let s = spec.t_end;
    let probe_times = [s, 0.5 * s, 0.0];
    let mut evaluations = 0usize;

    let mut worst_at = |c: f64| -> Result<(f64, String)> {
        let mut worst = f64::INFINITY;
        let mut node = String::new();
        for y in &anchors {
            for i in 0..spec.m {
                let params = BarrierParams::new(
                    c,
                    lambda,
                    y.clone(),
                    s,
                    i,
                    spec.terminal.g.clone(),
                    spec.p,
                )?;
                for j in 0..spec.m {
                    for &t in &probe_times {
                        for idx in 0..grid.num_nodes() {
                            let x = grid.node(idx);
                            let res = residual_lower_bound(
                                spec,
                                &quads,
                                &params,
                                j,
                                &x[..spec.n],
                                t,
                            )?;
                            evaluations += 1;
                            if res.is_nan() {
                                return Err(Error::NonFinite {
                                    field: "barrier residual".into(),
                                    point: format!("x = {x:?}, t = {t}, c = {c}"),
                                });
                            }
                            if res < worst {
                                worst = res;
                                node = format!(
                                    "anchor y = {y:?}, modes (i, j) = ({i}, {j}), \
                                     x = {:?}, t = {t}",
                                    &x[..spec.n]
                                );
                            }
                        }
                    }
                }
            }
        }
        Ok((worst, node))
    };

    let floor = spec.k_bound * 2f64.powi(spec.p as i32 + 1);
    let mut lo = floor;
    let (mut res, mut node) = worst_at(lo)?;
    if res >= 0.0 {
        return Ok(CalibrationReport {
            c_star: lo,
            floor,
            worst_residual: res,
            worst_node: node,
            evaluations,
        });
    }
    let mut hi = lo;
    loop {
        hi *= 2.0;
        if hi > 1e19 {
            return Err(Error::Budget(format!(
                "barrier residual still negative at c = {hi:.3e}; \
                 the coefficients likely violate the assumed growth bounds"
            )));
        }
        let (r, n) = worst_at(hi)?;
        if r >= 0.0 {
            res = r;
            node = n;
            break;
        }
        lo = hi;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let (r, n) = worst_at(mid)?;
        if r >= 0.0 {
            hi = mid;
            res = r;
            node = n;
        } else {
            lo = mid;
        }
        if (hi - lo) <= 1e-6 * hi {
            break;
        }
    }
    Ok(CalibrationReport {
        c_star: hi,
        floor,
        worst_residual: res,
        worst_node: node,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn zero_costs(m: usize) -> SwitchingCostField {
        SwitchingCostField::new(vec![vec![Expr::Const(0.0); m]; m]).unwrap()
    }

    fn const_costs(values: &[&[f64]]) -> SwitchingCostField {
        SwitchingCostField::new(
            values
                .iter()
                .map(|row| row.iter().map(|&v| Expr::Const(v)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn params_at_origin(c: f64, lambda: f64, h: Vec<Expr>) -> BarrierParams {
        BarrierParams::new(c, lambda, vec![0.0], 1.0, 0, h, 2).unwrap()
    }

    #[test]
    fn anchor_identity() {
        // x = y, t = s, j = i: psi = h_i(y) + c A / lambda.
        let h = vec![Expr::Const(0.7), Expr::Const(0.1)];
        let costs = const_costs(&[&[0.0, 0.3], &[0.4, 0.0]]);
        for (c, lambda) in [(1.0, 1.0), (3.0, 2.0), (10.0, 5.0)] {
            let params =
                BarrierParams::new(c, lambda, vec![0.0], 1.0, 0, h.clone(), 2).unwrap();
            let psi = upper_barrier(&params, &costs, 0, &[0.0], 1.0).unwrap();
            assert_relative_eq!(psi - 0.7, c * params.a_weight() / lambda, epsilon = 1e-14);
            // j != i adds the switching cost.
            let psi01 = upper_barrier(&params, &costs, 1, &[0.0], 1.0).unwrap();
            assert_relative_eq!(psi01, psi + 0.3, epsilon = 1e-14);
        }
    }

    #[test]
    fn hand_evaluation_of_the_closed_formula() {
        // y = 0, p = 2 (A = 1, B = 2), c = lambda = 1, s - t = 1, |x - y| = 1:
        // growth = e (1 + 1 + 2 + 1) = 5e.
        let h = vec![Expr::Const(0.25), Expr::Const(0.0)];
        let costs = const_costs(&[&[0.0, 0.6], &[0.6, 0.0]]);
        let params = BarrierParams::new(1.0, 1.0, vec![0.0], 1.0, 0, h, 2).unwrap();
        let e = std::f64::consts::E;
        let psi = upper_barrier(&params, &costs, 1, &[1.0], 0.0).unwrap();
        assert_relative_eq!(psi, 5.0 * e + 0.25 + 0.6, epsilon = 1e-12);
        let lower = lower_barrier(&params, 1, &[1.0], 0.0).unwrap();
        assert_relative_eq!(lower, -5.0 * e + 0.0, epsilon = 1e-12);
        // Lower barrier at the anchor: h_j(y) - c A / lambda.
        let lower_anchor = lower_barrier(&params, 0, &[0.0], 1.0).unwrap();
        assert_relative_eq!(lower_anchor, 0.25 - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn barrier_rejects_times_past_the_anchor() {
        let params = params_at_origin(1.0, 1.0, vec![Expr::Const(0.0)]);
        let costs = zero_costs(1);
        assert!(upper_barrier(&params, &costs, 0, &[0.0], 1.5).is_err());
        assert!(lower_barrier(&params, 0, &[0.0], 1.5).is_err());
        assert!(upper_barrier(&params, &costs, 0, &[0.0], 1.0).is_ok());
    }

    #[test]
    fn steepness_below_one_is_rejected() {
        assert!(BarrierParams::new(1.0, 0.5, vec![0.0], 1.0, 0, vec![Expr::Const(0.0)], 2).is_err());
    }

    #[test]
    fn upper_dominates_lower_on_consistent_data() {
        // With h satisfying h_i(y) >= h_j(y) - c_ij(y, s) the gap
        // upper - lower = 2 growth + h_i(y) + c_ij - h_j(y) >= 0.
        let h = vec![Expr::Const(0.2), Expr::var("x")];
        let costs = const_costs(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let params = BarrierParams::new(2.0, 1.5, vec![0.4], 1.0, 0, h, 2).unwrap();
        for x in [-2.0, 0.0, 0.4, 1.7] {
            for t in [0.0, 0.5, 1.0] {
                for j in 0..2 {
                    let up = upper_barrier(&params, &costs, j, &[x], t).unwrap();
                    let lo = lower_barrier(&params, j, &[x], t).unwrap();
                    assert!(up >= lo, "upper {up} < lower {lo} at x = {x}, t = {t}");
                }
            }
        }
    }

    #[test]
    fn lambda_tradeoff_matches_the_time_gap_bound() {
        // At x = y, j = i the anchor gap is
        // c lam e^{c smt} (A c smt + A / lam^2) = c e^{c smt} (lam c smt + 1/lam)
        // with A = 1; its minimum over lam sits at lam = (c smt)^(-1/2), with
        // value 2 c e^{c smt} sqrt(c smt) <= 2 c^2 e^{c smt} sqrt(smt).
        let h = vec![Expr::Const(0.0)];
        let costs = zero_costs(1);
        let c = 2.0;
        let smt = 0.04; // anchor s = 1, probe t = 0.96; lam* = 1/sqrt(0.08)
        let gap = |lambda: f64| {
            let params = BarrierParams::new(c, lambda, vec![0.0], 1.0, 0, h.clone(), 2).unwrap();
            upper_barrier(&params, &costs, 0, &[0.0], 1.0 - smt).unwrap()
        };
        let lam_star = (c * smt).powf(-0.5);
        let best = gap(lam_star);
        for lambda in [1.0, 2.0, 4.0, 5.0, 6.0, 10.0, 30.0] {
            assert!(gap(lambda) >= best - 1e-12, "lambda = {lambda}");
        }
        let bound = 2.0 * c * c * (c * smt).exp() * 1.0 * smt.sqrt();
        assert!(best <= bound, "optimal gap {best} exceeds bound {bound}");
        assert_relative_eq!(
            best,
            2.0 * c * (c * smt).exp() * (c * smt).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn terminal_dominance_trivial_for_zero_data() {
        // h = 0 and costs >= 0: psi(x, s) >= c A / lambda > 0 = h.
        let params = params_at_origin(0.05, 1.0, vec![Expr::Const(0.0); 2]);
        let costs = const_costs(&[&[0.0, 0.2], &[0.2, 0.0]]);
        let samples: Vec<Vec<f64>> = (-10..=10).map(|i| vec![0.3 * i as f64]).collect();
        let report = verify_terminal_dominance(&params, &costs, &samples).unwrap();
        assert!(report.pass);
        assert!(report.worst_margin > 0.0);
    }

    #[test]
    fn terminal_dominance_for_weighted_absolute_data() {
        // h_j(x) = K |x|, y = 0, p = 2: the profile c (1 + 3 x^2) must cover
        // K |x|; the sharp constant on dense samples is K / (2 sqrt(3)),
        // comfortably below the K 2^(p+1) floor.
        let kk = 2.0;
        let h = vec![Expr::Mul(vec![
            Expr::Const(kk),
            Expr::Abs(Box::new(Expr::var("x"))),
        ])];
        let c_floor = kk * 8.0;
        let params = BarrierParams::new(c_floor, 1.0, vec![0.0], 1.0, 0, h, 2).unwrap();
        let costs = zero_costs(1);
        let samples: Vec<Vec<f64>> = (0..=4000).map(|i| vec![-5.0 + 0.0025 * i as f64]).collect();
        let report = verify_terminal_dominance(&params, &costs, &samples).unwrap();
        assert!(report.pass);
        let minimal = report.minimal_c.unwrap();
        assert!(minimal <= c_floor);
        assert_relative_eq!(minimal, kk / (2.0 * 3.0f64.sqrt()), epsilon = 1e-4);
    }

    mod random_terminal_data {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Randomized weighted-Lipschitz data consistent with unit
            /// costs is dominated at the proof constant K 2^(p+1).
            #[test]
            fn dominated_at_the_proof_constant(
                w in proptest::collection::vec(0.6f64..1.0, 3),
                anchor in -2.0f64..2.0,
            ) {
                let kk = 1.0;
                let h: Vec<Expr> = w
                    .iter()
                    .map(|wj| {
                        Expr::Mul(vec![
                            Expr::Const(kk * wj),
                            Expr::Abs(Box::new(Expr::var("x"))),
                        ])
                    })
                    .collect();
                let costs = const_costs(&[
                    &[0.0, 1.0, 1.0],
                    &[1.0, 0.0, 1.0],
                    &[1.0, 1.0, 0.0],
                ]);
                let samples: Vec<Vec<f64>> =
                    (-20..=20).map(|i| vec![0.1 * i as f64]).collect();
                for i in 0..3 {
                    let params = BarrierParams::new(
                        kk * 8.0,
                        1.0,
                        vec![anchor],
                        1.0,
                        i,
                        h.clone(),
                        2,
                    )
                    .unwrap();
                    let report =
                        verify_terminal_dominance(&params, &costs, &samples).unwrap();
                    prop_assert!(
                        report.pass,
                        "failed for anchor mode {i}: {}",
                        report.worst_node
                    );
                }
            }
        }
    }

    #[test]
    fn obstacle_dominance_is_the_cost_identity() {
        // Closed costs: margins nonnegative everywhere.
        let base = const_costs(&[
            &[0.0, 1.0, 5.0],
            &[3.0, 0.0, 1.0],
            &[3.0, 3.0, 0.0],
        ]);
        let closed = crate::switchgraph::triangle_closure(&base);
        let params = BarrierParams::new(
            2.0,
            1.0,
            vec![0.0],
            1.0,
            0,
            vec![Expr::Const(0.0); 3],
            2,
        )
        .unwrap();
        let samples: Vec<(Vec<f64>, f64)> =
            vec![(vec![0.0], 0.0), (vec![1.5], 0.5), (vec![-2.0], 1.0)];
        let report = verify_obstacle_dominance(&params, &closed, &samples).unwrap();
        assert!(report.pass, "worst: {}", report.worst_node);

        // Unclosed: c_13 = 5 > c_12 + c_23 = 2 violates the triangle
        // inequality, surfacing as a negative margin at (j, k) = (1, 2)
        // seen from anchor mode 0.
        let report = verify_obstacle_dominance(&params, &base, &samples).unwrap();
        assert!(!report.pass);
        assert_relative_eq!(report.worst_margin, -3.0, epsilon = 1e-12);
        assert!(report.worst_node.contains("(0, 1, 2)") || report.worst_node.contains("(0, 2, 1)"));
    }

    #[test]
    fn obstacle_dominance_is_vacuous_for_one_mode() {
        let params = params_at_origin(1.0, 1.0, vec![Expr::Const(0.0)]);
        let report =
            verify_obstacle_dominance(&params, &zero_costs(1), &[(vec![0.0], 0.0)]).unwrap();
        assert!(report.pass);
        assert_eq!(report.worst_margin, f64::INFINITY);
    }

    /// One-mode heat-type spec text with adjustable forcing.
    fn calib_spec(f: &str, k: f64) -> ProblemSpec {
        let text = format!(
            r#"{{
              "dims": {{"n": 1, "m": 1, "T": 1.0, "box": [[-1.0, 1.0]]}},
              "p": 2, "K": {k},
              "modes": [{{"sigma": [[1.0]], "b": [0.0], "c0": 0, "f": {f}}}],
              "costs": [[0]],
              "terminal": {{"g": [{{"pow": ["x", 2]}}]}}
            }}"#
        );
        ProblemSpec::from_json_str(&text).unwrap()
    }

    #[test]
    fn calibration_terminates_for_constant_coefficients() {
        let spec = calib_spec("0", 2.0);
        let grid = GridSpec::new(vec![[-1.0, 1.0]], vec![21], 2).unwrap();
        let report = calibrate_c(&spec, &grid, 1.0).unwrap();
        assert!(report.c_star >= report.floor);
        assert_relative_eq!(report.floor, 16.0);
        assert!(report.worst_residual >= 0.0);
        // Certify directly at a few nodes with the returned constant.
        let quad = nonlocal::build_quadrature(
            &spec.jumps[0].measure,
            nonlocal::QuadratureConfig::default(),
        )
        .unwrap();
        let params = BarrierParams::new(
            report.c_star,
            1.0,
            vec![0.5],
            1.0,
            0,
            spec.terminal.g.clone(),
            2,
        )
        .unwrap();
        for x in [-1.0, 0.0, 0.9] {
            let r = residual_lower_bound(&spec, &[quad.clone()], &params, 0, &[x], 0.3).unwrap();
            assert!(r >= 0.0, "residual {r} at x = {x}");
        }
    }

    #[test]
    fn calibrated_constant_is_monotone_in_the_forcing() {
        let grid = GridSpec::new(vec![[-1.0, 1.0]], vec![21], 2).unwrap();
        let c1 = calibrate_c(&calib_spec("40.0", 2.0), &grid, 1.0).unwrap().c_star;
        let c10 = calibrate_c(&calib_spec("400.0", 2.0), &grid, 1.0).unwrap().c_star;
        assert!(c10 >= c1, "c {c10} at 10x forcing below c {c1}");
    }

    #[test]
    fn trivial_operator_returns_the_floor() {
        // sigma = b = c0 = f = 0, no jumps, zero costs, h = 0: the residual
        // at the floor is already nonnegative, so the search keeps its
        // lower bracket.
        let text = r#"{
          "dims": {"n": 1, "m": 1, "T": 1.0, "box": [[-1.0, 1.0]]},
          "p": 2, "K": 1.0,
          "modes": [{"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 0}],
          "costs": [[0]],
          "terminal": {"g": [0]}
        }"#;
        let spec = ProblemSpec::from_json_str(text).unwrap();
        let grid = GridSpec::new(vec![[-1.0, 1.0]], vec![11], 2).unwrap();
        let report = calibrate_c(&spec, &grid, 1.0).unwrap();
        assert_relative_eq!(report.c_star, report.floor);
        assert!(report.worst_residual >= 0.0);
    }

    #[test]
    fn huge_coefficients_exhaust_the_search() {
        // Forcing beyond any polynomial envelope cannot be certified; the
        // doubling search must stop with a budget error rather than loop.
        let spec = calib_spec("1.0e40", 1.0);
        let grid = GridSpec::new(vec![[-1.0, 1.0]], vec![5], 2).unwrap();
        match calibrate_c(&spec, &grid, 1.0) {
            Err(Error::Budget(_)) => {}
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn residual_formula_matches_direct_differentiation() {
        // For a jump-free mode the bound is exact up to the K envelopes;
        // strip those and compare with centred finite differences of psi.
        let spec = calib_spec("0.7", 2.0);
        let quad = Quadrature::default();
        let c = 3.0;
        let params = BarrierParams::new(
            c,
            1.0,
            vec![0.3],
            1.0,
            0,
            spec.terminal.g.clone(),
            2,
        )
        .unwrap();
        let costs = &spec.costs;
        let (x, t) = ([0.8], 0.4);
        let psi = |xx: f64, tt: f64| upper_barrier(&params, costs, 0, &[xx], tt).unwrap();
        let dstep = 1e-5;
        let dt = (psi(x[0], t + dstep) - psi(x[0], t - dstep)) / (2.0 * dstep);
        let dxx = (psi(x[0] + dstep, t) - 2.0 * psi(x[0], t) + psi(x[0] - dstep, t))
            / (dstep * dstep);
        // a = 1, b = 0, c0 = 0: residual = -dt psi - a dxx psi - f.
        let direct = -dt - dxx - 0.7;
        let kk = spec.k_bound;
        let envelope_slack = kk * (1.0 + x[0].powi(2)) + kk * (1.0 + 1.0) * 1.0;
        let bound =
            residual_lower_bound(&spec, &[quad], &params, 0, &x, t).unwrap();
        assert_relative_eq!(bound + envelope_slack, direct, epsilon = 1e-4);
    }
}
