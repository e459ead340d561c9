//! Jump measures and the nonlocal operator.
//!
//! A jump component pairs a Lévy measure `nu(dz)` on the mark space `R^ell`
//! with a jump map `eta(x, t, z) in R^n`. The nonlocal operator applied to a
//! function `u` at `(x, t)` is
//!
//! ```text
//! J u (x, t) = INT [ u(x + eta) - u(x) - 1_{|z| <= 1} <eta, Du(x)> ] nu(dz),
//! ```
//!
//! with small jumps compensated. We realize `nu` by a finite quadrature:
//! atoms pass through exactly, continuous measures get Gauss-Legendre panels
//! on `kappa <= |z| <= Z_max`, and the (possibly infinite-activity) mass
//! below the cutoff `kappa` is folded into a local diffusion correction by
//! second-moment matching. The correction enters the equation as
//! `tr(a_corr D^2 u)` with `a_corr = 1/2 INT_{|z|<kappa} eta eta^T nu(dz)`;
//! the `1/2` makes the fold agree with the Taylor expansion of the
//! compensated integral, so shrinking `kappa` changes nothing on smooth
//! functions up to `O(kappa)` terms.

use serde::{Deserialize, Serialize};

use crate::expr::{EvalPoint, Expr};
use crate::model::{norm, GridSpec, ProblemSpec, MAX_DIM};
use crate::{Error, Result};

/// One atom of a purely atomic jump measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atom {
    /// Mark location in `R^ell`; a bare number is read as one-dimensional.
    #[serde(deserialize_with = "de_mark")]
    pub z: Vec<f64>,
    pub w: f64,
}

fn de_mark<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Mark {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match Mark::deserialize(d)? {
        Mark::One(z) => vec![z],
        Mark::Many(z) => z,
    })
}

/// Parametric jump measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LevyMeasureSpec {
    /// No jumps.
    Empty,
    /// Finite sum of weighted atoms; realized exactly.
    FiniteAtoms { atoms: Vec<Atom> },
    /// Compound Poisson with Gaussian mark density: total rate `intensity`,
    /// marks `N(mean, std^2)` on the line.
    CompoundPoissonGaussian { intensity: f64, mean: f64, std: f64 },
    /// Symmetric density `scale * |z|^(-1-alpha)` on `0 < |z| <= r_max`,
    /// `alpha` in (0, 2). Infinite activity for `alpha > 0`; the mass below
    /// the quadrature cutoff becomes a diffusion correction.
    TruncatedStable { alpha: f64, scale: f64, r_max: f64 },
}

impl LevyMeasureSpec {
    pub fn is_empty(&self) -> bool {
        match self {
            LevyMeasureSpec::Empty => true,
            LevyMeasureSpec::FiniteAtoms { atoms } => atoms.is_empty(),
            LevyMeasureSpec::CompoundPoissonGaussian { intensity, .. } => *intensity == 0.0,
            LevyMeasureSpec::TruncatedStable { scale, .. } => *scale == 0.0,
        }
    }

    /// Dimension of the mark space.
    pub fn ell(&self) -> usize {
        match self {
            LevyMeasureSpec::FiniteAtoms { atoms } => {
                atoms.first().map(|a| a.z.len()).unwrap_or(1)
            }
            _ => 1,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{what} must be finite"))
            }
        };
        match self {
            LevyMeasureSpec::Empty => Ok(()),
            LevyMeasureSpec::FiniteAtoms { atoms } => {
                let ell = self.ell();
                for (q, a) in atoms.iter().enumerate() {
                    if a.z.len() != ell {
                        return Err(format!(
                            "atom {q} has a {}-dimensional mark, expected {ell}",
                            a.z.len()
                        ));
                    }
                    for (k, z) in a.z.iter().enumerate() {
                        finite(*z, &format!("atom {q} mark component {k}"))?;
                    }
                    if !(a.w > 0.0 && a.w.is_finite()) {
                        return Err(format!("atom {q} needs a positive finite weight"));
                    }
                }
                Ok(())
            }
            LevyMeasureSpec::CompoundPoissonGaussian { intensity, mean, std } => {
                finite(*intensity, "intensity")?;
                finite(*mean, "mean")?;
                finite(*std, "std")?;
                if *intensity < 0.0 {
                    return Err("intensity must be nonnegative".into());
                }
                if *std <= 0.0 {
                    return Err("std must be positive".into());
                }
                Ok(())
            }
            LevyMeasureSpec::TruncatedStable { alpha, scale, r_max } => {
                finite(*alpha, "alpha")?;
                finite(*scale, "scale")?;
                finite(*r_max, "r_max")?;
                if !(*alpha > 0.0 && *alpha < 2.0) {
                    return Err(format!("alpha must lie in (0, 2), got {alpha}"));
                }
                if *scale < 0.0 {
                    return Err("scale must be nonnegative".into());
                }
                if *r_max <= 0.0 {
                    return Err("r_max must be positive".into());
                }
                Ok(())
            }
        }
    }
}

/// Jump measure plus the jump-direction map `eta(x, t, z)` of one mode.
#[derive(Debug, Clone)]
pub struct JumpComponent {
    pub measure: LevyMeasureSpec,
    /// One expression per spatial component, in variables `x*`, `t`, `z*`.
    pub eta: Vec<Expr>,
}

impl JumpComponent {
    pub fn new(
        measure: LevyMeasureSpec,
        eta: Vec<Expr>,
        n: usize,
    ) -> std::result::Result<JumpComponent, String> {
        measure.validate()?;
        if eta.len() != n {
            return Err(format!(
                "eta must have one component per spatial dimension ({n}), got {}",
                eta.len()
            ));
        }
        for (k, e) in eta.iter().enumerate() {
            e.check_vars(n, true, Some(measure.ell()))
                .map_err(|msg| format!("eta[{k}]: {msg}"))?;
        }
        Ok(JumpComponent { measure, eta })
    }

    /// Component with no jumps.
    pub fn empty(n: usize) -> JumpComponent {
        JumpComponent {
            measure: LevyMeasureSpec::Empty,
            eta: vec![Expr::Const(0.0); n],
        }
    }

    /// Evaluate `eta(x, t, z)`; unused trailing components stay zero.
    pub fn eta_at(&self, x: &[f64], t: f64, z: &[f64]) -> Result<[f64; MAX_DIM]> {
        let p = EvalPoint { x, t, z };
        let mut out = [0.0; MAX_DIM];
        for (k, e) in self.eta.iter().enumerate() {
            let v = e.eval(&p);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    field: format!("eta[{k}]"),
                    point: format!("x = {x:?}, t = {t}, z = {z:?}"),
                });
            }
            out[k] = v;
        }
        Ok(out)
    }
}

/// Marks with `|z| <= 1` are compensated ("inner"); ties count as inner.
pub fn is_inner(z: &[f64]) -> bool {
    norm(z) <= 1.0
}

/// One quadrature node: mark location and nonnegative weight.
#[derive(Debug, Clone)]
pub struct QuadNode {
    pub z: Vec<f64>,
    pub w: f64,
}

/// Controls for the measure discretization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Marks with `|z| < kappa` fold into the diffusion correction.
    pub kappa: f64,
    /// Panel refinement stops when key moments move by less than this.
    pub tol: f64,
    /// Moment order protected by the tail cutoff `Z_max` (at least the
    /// growth exponent `p` of the problem).
    pub tail_order: u32,
}

impl Default for QuadratureConfig {
    fn default() -> QuadratureConfig {
        QuadratureConfig {
            kappa: 1e-3,
            tol: 1e-8,
            tail_order: 8,
        }
    }
}

/// Discretized jump measure: explicit nodes on `|z| >= kappa` plus
/// moment-matched correction nodes carrying the sub-cutoff mass.
#[derive(Debug, Clone, Default)]
pub struct Quadrature {
    nodes: Vec<QuadNode>,
    corr_nodes: Vec<QuadNode>,
}

impl Quadrature {
    /// Explicitly simulated / summed jump nodes.
    pub fn nodes(&self) -> &[QuadNode] {
        &self.nodes
    }

    /// Sub-cutoff nodes; only their second moments are meaningful.
    pub fn corr_nodes(&self) -> &[QuadNode] {
        &self.corr_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.corr_nodes.is_empty()
    }

    /// Total jump rate of the explicit nodes.
    pub fn intensity(&self) -> f64 {
        self.nodes.iter().map(|q| q.w).sum()
    }

    /// `INT_{0<|z|<=1} |z|^2 nu(dz)` of the discretized measure (includes
    /// the sub-cutoff correction mass).
    pub fn second_moment_inner(&self) -> f64 {
        let main: f64 = self
            .nodes
            .iter()
            .filter(|q| is_inner(&q.z))
            .map(|q| q.w * norm(&q.z).powi(2))
            .sum();
        let sub: f64 = self
            .corr_nodes
            .iter()
            .map(|q| q.w * norm(&q.z).powi(2))
            .sum();
        main + sub
    }

    /// `INT_{|z|>1} |z|^p nu(dz)` of the discretized measure.
    pub fn p_moment_outer(&self, p: u32) -> f64 {
        self.nodes
            .iter()
            .filter(|q| !is_inner(&q.z))
            .map(|q| q.w * norm(&q.z).powi(p as i32))
            .sum()
    }

    /// A spread of mark locations for sampling-based assumption checks.
    pub fn sample_marks(&self) -> Vec<Vec<f64>> {
        const CAP: usize = 48;
        let mut out = Vec::new();
        let stride = (self.nodes.len() / CAP).max(1);
        for q in self.nodes.iter().step_by(stride) {
            out.push(q.z.clone());
        }
        for q in &self.corr_nodes {
            out.push(q.z.clone());
        }
        out
    }

    /// Compensator drift `beta(x, t) = SUM_{inner} w eta(x, t, z)`; the
    /// scheme and the simulator subtract `<beta, Du>` to keep small jumps
    /// centered.
    pub fn compensator_drift(
        &self,
        comp: &JumpComponent,
        x: &[f64],
        t: f64,
    ) -> Result<[f64; MAX_DIM]> {
        let mut beta = [0.0; MAX_DIM];
        for q in self.nodes.iter().filter(|q| is_inner(&q.z)) {
            let h = comp.eta_at(x, t, &q.z)?;
            for k in 0..MAX_DIM {
                beta[k] += q.w * h[k];
            }
        }
        Ok(beta)
    }

    /// Diffusion correction `1/2 SUM_corr w eta eta^T`, the second-moment
    /// image of the folded sub-cutoff jumps.
    pub fn diffusion_correction(
        &self,
        comp: &JumpComponent,
        x: &[f64],
        t: f64,
    ) -> Result<[[f64; MAX_DIM]; MAX_DIM]> {
        let mut a = [[0.0; MAX_DIM]; MAX_DIM];
        for q in &self.corr_nodes {
            let h = comp.eta_at(x, t, &q.z)?;
            for k in 0..MAX_DIM {
                for l in 0..MAX_DIM {
                    a[k][l] += 0.5 * q.w * h[k] * h[l];
                }
            }
        }
        Ok(a)
    }
}

/// Discretize a jump measure. Continuous kinds are integrated by
/// Gauss-Legendre panels laid out geometrically on `[kappa, 1]` and
/// `[1, Z_max]` per sign, refined by doubling until the mass and the
/// moments under- and over the unit sphere stabilize to `config.tol`.
pub fn build_quadrature(
    measure: &LevyMeasureSpec,
    config: QuadratureConfig,
) -> Result<Quadrature> {
    measure
        .validate()
        .map_err(|e| Error::Assumption {
            tag: "F3",
            detail: format!("jump measure not integrable as specified: {e}"),
        })?;
    if !(config.kappa > 0.0 && config.kappa < 1.0) {
        return Err(Error::Spec(format!(
            "quadrature cutoff must lie in (0, 1), got {}",
            config.kappa
        )));
    }
    match measure {
        LevyMeasureSpec::Empty => Ok(Quadrature::default()),
        LevyMeasureSpec::FiniteAtoms { atoms } => Ok(Quadrature {
            nodes: atoms
                .iter()
                .map(|a| QuadNode {
                    z: a.z.clone(),
                    w: a.w,
                })
                .collect(),
            corr_nodes: Vec::new(),
        }),
        LevyMeasureSpec::CompoundPoissonGaussian { intensity, mean, std } => {
            if measure.is_empty() {
                return Ok(Quadrature::default());
            }
            let (lam, mu, s) = (*intensity, *mean, *std);
            let density = move |z: f64| {
                let d = (z - mu) / s;
                lam * (-0.5 * d * d).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
            };
            // Tail cutoff: push W out until the crude bound
            // rate * density(edge) * edge^(tail_order+1) drops below tol.
            let mut w_sd = 8.0;
            while w_sd < 60.0 {
                let edge = mu.abs() + w_sd * s;
                if density(edge) * edge.powi(config.tail_order as i32 + 1) < 0.01 * config.tol {
                    break;
                }
                w_sd += 2.0;
            }
            let z_max = mu.abs() + w_sd * s;
            // Sub-cutoff second moment by direct quadrature on [-kappa, kappa]
            // (smooth integrand, one high-order panel suffices).
            let m2_sub = panel_integral(density, -config.kappa, config.kappa, 32, 2);
            build_continuous_1d(density, z_max, m2_sub, config)
        }
        LevyMeasureSpec::TruncatedStable { alpha, scale, r_max } => {
            if measure.is_empty() {
                return Ok(Quadrature::default());
            }
            let (al, sc, rm) = (*alpha, *scale, *r_max);
            let density = move |z: f64| {
                let r = z.abs();
                if r > 0.0 && r <= rm {
                    sc * r.powf(-1.0 - al)
                } else {
                    0.0
                }
            };
            let cut = config.kappa.min(rm);
            // INT_{|z|<cut} z^2 nu(dz) = 2 scale cut^(2-alpha) / (2-alpha).
            let m2_sub = 2.0 * sc * cut.powf(2.0 - al) / (2.0 - al);
            build_continuous_1d(density, rm, m2_sub, config)
        }
    }
}

/// Gauss-Legendre panel quadrature of `f * z^moment` on `[a, b]`.
fn panel_integral(f: impl Fn(f64) -> f64, a: f64, b: f64, order: usize, moment: i32) -> f64 {
    let (xs, ws) = gauss_legendre(order);
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    xs.iter()
        .zip(&ws)
        .map(|(x, w)| {
            let z = mid + half * x;
            w * half * f(z) * z.powi(moment).abs()
        })
        .sum()
}

fn build_continuous_1d(
    density: impl Fn(f64) -> f64 + Copy,
    z_max: f64,
    m2_sub: f64,
    config: QuadratureConfig,
) -> Result<Quadrature> {
    const GL_ORDER: usize = 12;
    let kappa = config.kappa;
    let build = |panels_per_range: usize| -> Vec<QuadNode> {
        let mut nodes = Vec::new();
        let (gx, gw) = gauss_legendre(GL_ORDER);
        // Geometric panel edges on [lo, hi], replicated on both signs.
        let mut add_range = |lo: f64, hi: f64| {
            if hi <= lo {
                return;
            }
            let ratio = (hi / lo).powf(1.0 / panels_per_range as f64);
            for sign in [-1.0, 1.0] {
                let mut a = lo;
                for _ in 0..panels_per_range {
                    let b = (a * ratio).min(hi);
                    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
                    for (x, w) in gx.iter().zip(&gw) {
                        let r = mid + half * x;
                        let weight = w * half * density(sign * r);
                        if weight > 0.0 {
                            nodes.push(QuadNode {
                                z: vec![sign * r],
                                w: weight,
                            });
                        }
                    }
                    a = b;
                }
            }
        };
        add_range(kappa, z_max.min(1.0));
        add_range(1.0f64.max(kappa), z_max);
        nodes
    };
    let key = |nodes: &[QuadNode]| -> [f64; 3] {
        let mass: f64 = nodes.iter().map(|q| q.w).sum();
        let m2: f64 = nodes
            .iter()
            .filter(|q| is_inner(&q.z))
            .map(|q| q.w * norm(&q.z).powi(2))
            .sum();
        let mp: f64 = nodes
            .iter()
            .filter(|q| !is_inner(&q.z))
            .map(|q| q.w * norm(&q.z).powi(config.tail_order as i32))
            .sum();
        [mass, m2, mp]
    };
    let mut panels = 4usize;
    let mut nodes = build(panels);
    let mut prev = key(&nodes);
    loop {
        panels *= 2;
        if panels > 1024 {
            return Err(Error::Budget(format!(
                "jump quadrature did not stabilize to {} within 1024 panels per range",
                config.tol
            )));
        }
        let next = build(panels);
        let cur = key(&next);
        let settled = prev
            .iter()
            .zip(&cur)
            .all(|(a, b)| (a - b).abs() <= config.tol * b.abs().max(1.0));
        nodes = next;
        if settled {
            break;
        }
        prev = cur;
    }
    // Two symmetric moment-matched nodes stand in for the folded mass.
    let mut corr_nodes = Vec::new();
    if m2_sub > 0.0 {
        let zc = 0.5 * kappa;
        let w = m2_sub / (2.0 * zc * zc);
        corr_nodes.push(QuadNode { z: vec![-zc], w });
        corr_nodes.push(QuadNode { z: vec![zc], w });
    }
    Ok(Quadrature { nodes, corr_nodes })
}

/// Gauss-Legendre abscissas and weights on `[-1, 1]` (Newton iteration on
/// the Legendre recurrence; exact for polynomials of degree `2n - 1`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n and P_n' by the three-term recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        ws[i] = w;
        xs[n - 1 - i] = x;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

/// Value rule for points that leave the computational box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum ExtensionRule {
    /// Terminal data at the clamped point plus a weighted Lipschitz cone:
    /// `g_i(clamp(x)) + K (1 + |clamp(x)|^(p-1)) |x - clamp(x)|`.
    #[default]
    TerminalCone,
    /// Clamped grid value plus the barrier growth profile with the given
    /// amplitude and steepness.
    BarrierClamp { c: f64, lambda: f64 },
}

/// Multilinear interpolation of a node-value slice at a point inside the
/// box (callers clamp first; indices are clamped defensively).
pub fn interpolate(grid: &GridSpec, u: &[f64], x: &[f64]) -> f64 {
    let n = grid.n();
    let mut cell = [0usize; MAX_DIM];
    let mut frac = [0.0f64; MAX_DIM];
    for a in 0..n {
        let lo = grid.domain[a][0];
        let s = (x[a] - lo) / grid.dx(a);
        let i = (s.floor() as isize).clamp(0, grid.nx[a] as isize - 2) as usize;
        cell[a] = i;
        frac[a] = (s - i as f64).clamp(0.0, 1.0);
    }
    match n {
        1 => {
            let i = cell[0];
            (1.0 - frac[0]) * u[i] + frac[0] * u[i + 1]
        }
        _ => {
            let (i, j) = (cell[0], cell[1]);
            let (fx, fy) = (frac[0], frac[1]);
            let at = |a: usize, b: usize| u[grid.flatten(&[a, b])];
            (1.0 - fx) * (1.0 - fy) * at(i, j)
                + fx * (1.0 - fy) * at(i + 1, j)
                + (1.0 - fx) * fy * at(i, j + 1)
                + fx * fy * at(i + 1, j + 1)
        }
    }
}

/// Evaluate a mode slice at an arbitrary point: multilinear interpolation
/// inside the box, the extension rule outside.
pub fn value_at(
    spec: &ProblemSpec,
    grid: &GridSpec,
    mode: usize,
    u: &[f64],
    x: &[f64],
    rule: &ExtensionRule,
) -> Result<f64> {
    let xc = grid.clamp(x);
    let r = x
        .iter()
        .zip(&xc[..grid.n()])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if r == 0.0 {
        return Ok(interpolate(grid, u, x));
    }
    match rule {
        ExtensionRule::TerminalCone => {
            let g = spec.g(mode, &xc[..grid.n()]);
            if !g.is_finite() {
                return Err(Error::Domain(format!(
                    "terminal extension undefined at clamped point {xc:?}"
                )));
            }
            Ok(g + spec.k_bound * spec.lip_weight(&xc[..grid.n()]) * r)
        }
        ExtensionRule::BarrierClamp { c, lambda } => {
            let base = interpolate(grid, u, &xc[..grid.n()]);
            Ok(base + crate::barrier::growth_term(*c, *lambda, spec.p, norm(&xc[..grid.n()]), r, 0.0))
        }
    }
}

/// The nonlocal operator applied to one mode slice on the whole grid.
///
/// Per node: `SUM_q w_q [u(x + eta_q) - u(x) - 1_inner <eta_q, grad(x)>]`
/// plus `tr(a_corr D^2 u)` by central differencing, with off-grid targets
/// interpolated or extended.
pub fn apply_nonlocal(
    spec: &ProblemSpec,
    grid: &GridSpec,
    mode: usize,
    t: f64,
    u: &[f64],
    grad: &[f64],
    quad: &Quadrature,
    rule: &ExtensionRule,
) -> Result<Vec<f64>> {
    let n = grid.n();
    let comp = &spec.jumps[mode];
    let mut out = vec![0.0; grid.num_nodes()];
    if quad.is_empty() {
        return Ok(out);
    }
    for (idx, slot) in out.iter_mut().enumerate() {
        let x = grid.node(idx);
        let mut acc = 0.0;
        for q in quad.nodes() {
            let h = comp.eta_at(&x[..n], t, &q.z)?;
            let mut target = [0.0; MAX_DIM];
            for k in 0..n {
                target[k] = x[k] + h[k];
            }
            let val = value_at(spec, grid, mode, u, &target[..n], rule)?;
            acc += q.w * (val - u[idx]);
            if is_inner(&q.z) {
                for k in 0..n {
                    acc -= q.w * h[k] * grad[idx * n + k];
                }
            }
        }
        if !quad.corr_nodes().is_empty() {
            let a = quad.diffusion_correction(comp, &x[..n], t)?;
            let hess = hessian_at(grid, u, idx);
            for k in 0..n {
                for l in 0..n {
                    acc += a[k][l] * hess[k][l];
                }
            }
        }
        *slot = acc;
    }
    Ok(out)
}

/// Central second differences (shifted to one-sided stencils at box edges).
fn hessian_at(grid: &GridSpec, u: &[f64], idx: usize) -> [[f64; MAX_DIM]; MAX_DIM] {
    let n = grid.n();
    let ix = grid.unflatten(idx);
    let mut h = [[0.0; MAX_DIM]; MAX_DIM];
    let centered = |a: usize| ix[a].clamp(1, grid.nx[a] - 2);
    for k in 0..n {
        let mut c = ix;
        c[k] = centered(k);
        let (mut lo, mut hi) = (c, c);
        lo[k] -= 1;
        hi[k] += 1;
        h[k][k] = (u[grid.flatten(&hi)] - 2.0 * u[grid.flatten(&c)] + u[grid.flatten(&lo)])
            / (grid.dx(k) * grid.dx(k));
    }
    if n == 2 {
        let c = [centered(0), centered(1)];
        let at = |di: isize, dj: isize| {
            u[grid.flatten(&[
                (c[0] as isize + di) as usize,
                (c[1] as isize + dj) as usize,
            ])]
        };
        let cross =
            (at(1, 1) + at(-1, -1) - at(1, -1) - at(-1, 1)) / (4.0 * grid.dx(0) * grid.dx(1));
        h[0][1] = cross;
        h[1][0] = cross;
    }
    h
}

/// A scalar field with symbolically derived gradient and Hessian, for
/// applying operators to closed-form functions (terminal data, boundary
/// profiles) without grids.
#[derive(Debug, Clone)]
pub struct SmoothField {
    pub value: Expr,
    pub grad: Vec<Expr>,
    pub hess: Vec<Vec<Expr>>,
}

impl SmoothField {
    pub fn new(value: &Expr, n: usize) -> SmoothField {
        let grad: Vec<Expr> = (0..n)
            .map(|k| value.diff(crate::expr::Var::X(k)))
            .collect();
        let hess = (0..n)
            .map(|k| (0..n).map(|l| grad[k].diff(crate::expr::Var::X(l))).collect())
            .collect();
        SmoothField {
            value: value.clone(),
            grad,
            hess,
        }
    }
}

/// The nonlocal operator applied to a closed-form field at a single point,
/// with all derivatives taken symbolically.
pub fn apply_nonlocal_smooth(
    comp: &JumpComponent,
    quad: &Quadrature,
    field: &SmoothField,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    let n = field.grad.len();
    let p0 = EvalPoint::xt(x, t);
    let u0 = field.value.eval(&p0);
    let mut acc = 0.0;
    for q in quad.nodes() {
        let h = comp.eta_at(x, t, &q.z)?;
        let mut target = [0.0; MAX_DIM];
        for k in 0..n {
            target[k] = x[k] + h[k];
        }
        let val = field.value.eval(&EvalPoint::xt(&target[..n], t));
        if !val.is_finite() {
            return Err(Error::NonFinite {
                field: "nonlocal target value".into(),
                point: format!("x = {target:?}, t = {t}"),
            });
        }
        acc += q.w * (val - u0);
        if is_inner(&q.z) {
            for k in 0..n {
                acc -= q.w * h[k] * field.grad[k].eval(&p0);
            }
        }
    }
    for q in quad.corr_nodes() {
        let h = comp.eta_at(x, t, &q.z)?;
        for k in 0..n {
            for l in 0..n {
                acc += 0.5 * q.w * h[k] * h[l] * field.hess[k][l].eval(&p0);
            }
        }
    }
    Ok(acc)
}
