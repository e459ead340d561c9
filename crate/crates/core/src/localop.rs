//! Monotone finite-difference realization of the local operator
//! `L u = sum_kl a_kl d2_kl u + sum_k b_k d_k u - c0 u`.
//!
//! Diagonal second-order terms use central differences; the mixed term (two
//! space dimensions) uses the seven-point stencil that borrows diagonal
//! neighbors matching the sign of `a_12`, which keeps every off-center
//! weight nonnegative exactly when the weak diagonal-dominance condition
//! `|a_12| / (h_1 h_2) <= min(a_11 / h_1^2, a_22 / h_2^2)` holds. Drift uses
//! first-order differences upwinded by the sign of `b_k`. Monotonicity
//! (nonnegative off-center weights) is what gives the scheme its discrete
//! comparison principle, so a violated dominance condition is a hard error
//! naming the node, never a silent fallback.

use crate::model::{evaluate_coefficients, GridSpec, ProblemSpec, MAX_DIM};
use crate::{Error, Result};

/// Weighted neighbor pattern at one node: `(L u)(x) ~= center u(x) +
/// sum_nb w_nb u(x + offset_nb)` with all `w_nb >= 0`.
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    pub center: f64,
    /// `(offset along axis 0, offset along axis 1, weight)`.
    pub neighbors: Vec<(isize, isize, f64)>,
}

impl Stencil {
    /// Sum of the off-center weights (= `-center` for pure second-order
    /// parts, which annihilate constants).
    pub fn neighbor_sum(&self) -> f64 {
        self.neighbors.iter().map(|(_, _, w)| w).sum()
    }
}

/// Monotone discretization of `sum_kl a_kl d2_kl` with spacings `dx`.
/// `context` names the node in the dominance error.
pub fn diffusion_stencil(
    a: &[[f64; MAX_DIM]; MAX_DIM],
    n: usize,
    dx: &[f64],
    context: &str,
) -> Result<Stencil> {
    let mut st = Stencil::default();
    for (k, offs) in [(0usize, (1isize, 0isize)), (1, (0, 1))].iter().take(n) {
        let w = a[*k][*k] / (dx[*k] * dx[*k]);
        if !w.is_finite() {
            return Err(Error::NonFinite {
                field: format!("a[{k}][{k}] stencil weight"),
                point: context.to_string(),
            });
        }
        if w < 0.0 {
            return Err(Error::Monotonicity(format!(
                "negative diffusion coefficient a[{k}][{k}] = {} at {context}",
                a[*k][*k]
            )));
        }
        st.neighbors.push((offs.0, offs.1, w));
        st.neighbors.push((-offs.0, -offs.1, w));
        st.center -= 2.0 * w;
    }
    if n == 2 {
        // The off-diagonal entries of sigma sigma^T agree; the operator sums
        // both, so the mixed weight enters twice.
        let cross = a[0][1];
        if cross != 0.0 {
            let w = cross.abs() / (dx[0] * dx[1]);
            let w00 = a[0][0] / (dx[0] * dx[0]);
            let w11 = a[1][1] / (dx[1] * dx[1]);
            if w > w00 + 1e-14 * w.max(1.0) || w > w11 + 1e-14 * w.max(1.0) {
                return Err(Error::Monotonicity(format!(
                    "mixed derivative breaks weak diagonal dominance at {context}: \
                     |a12|/(h1 h2) = {w} exceeds a11/h1^2 = {w00} or a22/h2^2 = {w11}"
                )));
            }
            let diag = if cross > 0.0 { (1, 1) } else { (1, -1) };
            st.neighbors.push((diag.0, diag.1, w));
            st.neighbors.push((-diag.0, -diag.1, w));
            st.center += 2.0 * w;
            // The diagonal borrow subtracts from all four axis neighbors.
            for nb in st.neighbors.iter_mut() {
                if (nb.0 != 0) ^ (nb.1 != 0) {
                    nb.2 -= w;
                    if nb.2 < 0.0 {
                        nb.2 = nb.2.max(-1e-14 * w.max(1.0)).max(0.0);
                    }
                }
            }
        }
    }
    Ok(st)
}

/// First-order upwind discretization of `sum_k b_k d_k`.
pub fn upwind_stencil(b: &[f64], n: usize, dx: &[f64]) -> Stencil {
    let mut st = Stencil::default();
    for k in 0..n {
        let w = b[k].abs() / dx[k];
        if w == 0.0 {
            continue;
        }
        let dir: isize = if b[k] > 0.0 { 1 } else { -1 };
        let off = if k == 0 { (dir, 0) } else { (0, dir) };
        st.neighbors.push((off.0, off.1, w));
        st.center -= w;
    }
    st
}

/// Apply a stencil at an interior node (multi-index `ix`).
pub fn apply_stencil(st: &Stencil, grid: &GridSpec, u: &[f64], ix: &[usize; MAX_DIM]) -> f64 {
    let mut acc = st.center * u[grid.flatten(&ix[..grid.n()])];
    for (d0, d1, w) in &st.neighbors {
        let nb = [
            (ix[0] as isize + d0) as usize,
            (ix[1] as isize + d1) as usize,
        ];
        acc += w * u[grid.flatten(&nb[..grid.n()])];
    }
    acc
}

/// `L_i u` pointwise on interior nodes (boundary entries are zero), with
/// coefficients evaluated at time `t`.
pub fn apply_local(
    spec: &ProblemSpec,
    grid: &GridSpec,
    i: usize,
    u: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let n = grid.n();
    let dx: Vec<f64> = (0..n).map(|a| grid.dx(a)).collect();
    let mut out = vec![0.0; grid.num_nodes()];
    for idx in 0..grid.num_nodes() {
        if grid.is_boundary(idx) {
            continue;
        }
        let x = grid.node(idx);
        let lc = evaluate_coefficients(spec, i, &x[..n], t);
        let context = format!("node {:?}, t = {t}", &x[..n]);
        let diff = diffusion_stencil(&lc.a, n, &dx, &context)?;
        let drift = upwind_stencil(&lc.b[..n], n, &dx);
        let ix = grid.unflatten(idx);
        let val = apply_stencil(&diff, grid, u, &ix) + apply_stencil(&drift, grid, u, &ix)
            - lc.c0 * u[idx];
        if !val.is_finite() {
            return Err(Error::NonFinite {
                field: "local operator value".into(),
                point: context,
            });
        }
        out[idx] = val;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec_1d(sigma: &str, b: &str, c0: &str) -> ProblemSpec {
        let text = format!(
            r#"{{
              "dims": {{"n": 1, "m": 1, "T": 1.0, "box": [[-2.0, 2.0]]}},
              "p": 2, "K": 10.0,
              "modes": [{{"sigma": [[{sigma}]], "b": [{b}], "c0": {c0}, "f": 0}}],
              "costs": [[0]],
              "terminal": {{"g": [0]}}
            }}"#
        );
        ProblemSpec::from_json_str(&text).unwrap()
    }

    fn grid_1d(nx: usize) -> GridSpec {
        GridSpec::new(vec![[-2.0, 2.0]], vec![nx], 2).unwrap()
    }

    #[test]
    fn second_difference_is_exact_on_quadratics() {
        // a = 1, b = 0, c0 = 0, u = x^2: L u = 2 at every interior node.
        let spec = spec_1d("1.0", "0.0", "0");
        let grid = grid_1d(41);
        let u: Vec<f64> = (0..41).map(|i| grid.coord(0, i).powi(2)).collect();
        let lu = apply_local(&spec, &grid, 0, &u, 0.5).unwrap();
        for idx in 1..40 {
            assert_relative_eq!(lu[idx], 2.0, epsilon = 1e-11);
        }
        assert_eq!(lu[0], 0.0);
        assert_eq!(lu[40], 0.0);
    }

    #[test]
    fn full_operator_on_a_quadratic_at_a_point() {
        // a = 1, b = 3, c0 = 1, u = x^2 at x = 1: continuum value
        // 2 + 3 * 2 - 1 = 7; the upwind part adds O(h).
        let spec = spec_1d("1.0", "3.0", "1");
        let grid = grid_1d(401);
        let h = grid.dx(0);
        let u: Vec<f64> = (0..401).map(|i| grid.coord(0, i).powi(2)).collect();
        let lu = apply_local(&spec, &grid, 0, &u, 0.0).unwrap();
        let at = 300; // x = 1
        assert_relative_eq!(grid.coord(0, at), 1.0);
        assert!((lu[at] - 7.0).abs() <= 3.0 * h + 1e-10);
    }

    #[test]
    fn upwind_drift_is_exact_on_affine_functions() {
        for b in ["1.0", "-1.0", "2.5"] {
            let spec = spec_1d("0.0", b, "0");
            let grid = grid_1d(21);
            let u: Vec<f64> = (0..21).map(|i| 4.0 * grid.coord(0, i) - 1.0).collect();
            let lu = apply_local(&spec, &grid, 0, &u, 0.0).unwrap();
            let bval: f64 = b.parse().unwrap();
            for idx in 1..20 {
                assert_relative_eq!(lu[idx], 4.0 * bval, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stencil_weights_are_nonnegative_off_center() {
        let a = [[1.0, 0.4], [0.4, 0.8]];
        let st = diffusion_stencil(&a, 2, &[0.1, 0.1], "test").unwrap();
        for (_, _, w) in &st.neighbors {
            assert!(*w >= 0.0, "negative weight {w}");
        }
        // Center balances the neighbors (constants are annihilated).
        assert_relative_eq!(st.center, -st.neighbor_sum(), epsilon = 1e-9);
    }

    #[test]
    fn mixed_stencil_is_exact_on_bilinear_functions() {
        // L = 2 a12 d2_xy on u = x y gives 2 a12 exactly.
        let grid = GridSpec::new(vec![[-1.0, 1.0], [-1.0, 1.0]], vec![11, 11], 2).unwrap();
        let u: Vec<f64> = (0..grid.num_nodes())
            .map(|i| {
                let p = grid.node(i);
                p[0] * p[1]
            })
            .collect();
        for cross in [0.5, -0.5] {
            let a = [[1.0, cross], [cross, 1.0]];
            let st = diffusion_stencil(&a, 2, &[grid.dx(0), grid.dx(1)], "test").unwrap();
            let val = apply_stencil(&st, &grid, &u, &[5, 5]);
            assert_relative_eq!(val, 2.0 * cross, epsilon = 1e-10);
        }
    }

    #[test]
    fn dominance_violation_is_a_hard_error_naming_the_node() {
        // Positive semidefinite a can still break grid dominance under
        // anisotropic spacing: a22/h2^2 < |a12|/(h1 h2).
        let a = [[1.0, 0.9], [0.9, 1.0]];
        let err = diffusion_stencil(&a, 2, &[0.1, 0.3], "node [1.0, 2.0]").unwrap_err();
        match err {
            Error::Monotonicity(msg) => assert!(msg.contains("node [1.0, 2.0]")),
            other => panic!("expected monotonicity error, got {other:?}"),
        }
    }

    #[test]
    fn stencils_increase_with_neighbor_values() {
        // Raising any neighbor never lowers the stencil value at the center.
        let a = [[1.0, 0.3], [0.3, 2.0]];
        let st = diffusion_stencil(&a, 2, &[0.2, 0.1], "test").unwrap();
        let grid = GridSpec::new(vec![[0.0, 1.0], [0.0, 1.0]], vec![6, 11], 2).unwrap();
        let base: Vec<f64> = (0..grid.num_nodes()).map(|i| (i % 7) as f64 * 0.1).collect();
        let v0 = apply_stencil(&st, &grid, &base, &[2, 4]);
        for (d0, d1, _) in &st.neighbors {
            let mut bumped = base.clone();
            let nb = grid.flatten(&[(2 + d0) as usize, (4 + d1) as usize]);
            bumped[nb] += 1.0;
            let v1 = apply_stencil(&st, &grid, &bumped, &[2, 4]);
            assert!(v1 >= v0 - 1e-12, "offset ({d0}, {d1}) decreased the value");
        }
    }

    #[test]
    fn drift_upwinds_by_sign() {
        let st_pos = upwind_stencil(&[2.0], 1, &[0.5]);
        assert_eq!(st_pos.neighbors, vec![(1, 0, 4.0)]);
        assert_relative_eq!(st_pos.center, -4.0);
        let st_neg = upwind_stencil(&[-2.0], 1, &[0.5]);
        assert_eq!(st_neg.neighbors, vec![(-1, 0, 4.0)]);
    }
}
