//! Independent ground-truth generators used to cross-check the PDE solver:
//! exhaustive dynamic programming for deterministic switching problems and
//! Monte Carlo simulation for one-mode jump-diffusions.
//!
//! Both oracles share the solver's generator convention: the second-order
//! coefficient is `a = sigma sigma^T` with no 1/2 factor, so the simulated
//! diffusion is `dX = b dt + sqrt(2) sigma dW + jumps`, and marks with
//! `|z| <= 1` are compensated.

use crate::expr::EvalPoint;
use crate::model::{evaluate_coefficients, ProblemSpec, MAX_DIM};
use crate::nonlocal::{build_quadrature, QuadratureConfig};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Budget for brute-force mode-sequence enumeration.
const ENUMERATION_CAP: f64 = 17_000_000.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpOracleConfig {
    /// Number of equal segments of `[0, T]` on which the mode may switch.
    pub nt_coarse: usize,
    /// Runge-Kutta substeps per segment for the state/discount/payoff flow.
    pub substeps: usize,
}

impl Default for DpOracleConfig {
    fn default() -> Self {
        DpOracleConfig {
            nt_coarse: 12,
            substeps: 32,
        }
    }
}

/// Values of the switching problem per starting mode, with one maximizing
/// mode sequence (mode held on each coarse segment) per start.
#[derive(Debug, Clone, Serialize)]
pub struct DpValue {
    pub values: Vec<f64>,
    pub best_sequences: Vec<Vec<usize>>,
}

struct DpCtx<'a> {
    spec: &'a ProblemSpec,
    seg: f64,
    substeps: usize,
}

/// Advance `(x, discount, accumulated payoff)` across one coarse segment
/// under a fixed mode, by classical fourth-order Runge-Kutta.
fn dp_flow(
    ctx: &DpCtx,
    mode: usize,
    x: &mut [f64; MAX_DIM],
    disc: &mut f64,
    acc: &mut f64,
    t_start: f64,
) -> Result<()> {
    let n = ctx.spec.n;
    let h = ctx.seg / ctx.substeps as f64;
    let deriv = |y: &[f64; MAX_DIM + 2], t: f64| -> [f64; MAX_DIM + 2] {
        let lc = evaluate_coefficients(ctx.spec, mode, &y[..n], t);
        let mut d = [0.0; MAX_DIM + 2];
        d[..MAX_DIM].copy_from_slice(&lc.b);
        d[MAX_DIM] = -lc.c0 * y[MAX_DIM];
        d[MAX_DIM + 1] = lc.f * y[MAX_DIM];
        d
    };
    let mut y = [0.0; MAX_DIM + 2];
    y[..MAX_DIM].copy_from_slice(x);
    y[MAX_DIM] = *disc;
    y[MAX_DIM + 1] = *acc;
    for s in 0..ctx.substeps {
        let t = t_start + s as f64 * h;
        let k1 = deriv(&y, t);
        let mut y2 = y;
        for (v, k) in y2.iter_mut().zip(&k1) {
            *v += 0.5 * h * k;
        }
        let k2 = deriv(&y2, t + 0.5 * h);
        let mut y3 = y;
        for (v, k) in y3.iter_mut().zip(&k2) {
            *v += 0.5 * h * k;
        }
        let k3 = deriv(&y3, t + 0.5 * h);
        let mut y4 = y;
        for (v, k) in y4.iter_mut().zip(&k3) {
            *v += h * k;
        }
        let k4 = deriv(&y4, t + h);
        for idx in 0..MAX_DIM + 2 {
            y[idx] += h / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            field: format!("deterministic flow of mode {mode}"),
            point: format!("segment starting at t = {t_start}"),
        });
    }
    x.copy_from_slice(&y[..MAX_DIM]);
    *disc = y[MAX_DIM];
    *acc = y[MAX_DIM + 1];
    Ok(())
}

fn dp_best(
    ctx: &DpCtx,
    cfg: &DpOracleConfig,
    j: usize,
    mode: usize,
    x: [f64; MAX_DIM],
    disc: f64,
    acc: f64,
) -> Result<(f64, Vec<usize>)> {
    let n = ctx.spec.n;
    if j == cfg.nt_coarse {
        return Ok((acc + disc * ctx.spec.g(mode, &x[..n]), Vec::new()));
    }
    let t_j = j as f64 * ctx.seg;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for next in 0..ctx.spec.m {
        let cost = if next != mode {
            disc * ctx.spec.costs.eval(mode, next, &x[..n], t_j)?
        } else {
            0.0
        };
        let mut x2 = x;
        let mut d2 = disc;
        let mut a2 = acc;
        dp_flow(ctx, next, &mut x2, &mut d2, &mut a2, t_j)?;
        let (v, mut tail) = dp_best(ctx, cfg, j + 1, next, x2, d2, a2)?;
        let v = v - cost;
        if v > best.0 {
            tail.insert(0, next);
            best = (v, tail);
        }
    }
    Ok(best)
}

/// Value of the switching problem at `(x0, 0)` per starting mode, by
/// exhaustive maximization over all mode sequences on the coarse time grid.
/// Requires deterministic dynamics: no diffusion and no jumps.
pub fn dp_oracle(spec: &ProblemSpec, x0: &[f64], cfg: &DpOracleConfig) -> Result<DpValue> {
    for (i, mode) in spec.modes.iter().enumerate() {
        if mode.sigma.iter().flatten().any(|e| !e.is_const_zero()) {
            return Err(Error::Unsupported(format!(
                "the dynamic-programming oracle needs deterministic dynamics; \
                 mode {i} has nonzero diffusion"
            )));
        }
    }
    if spec.jumps.iter().any(|c| !c.measure.is_empty()) {
        return Err(Error::Unsupported(
            "the dynamic-programming oracle needs deterministic dynamics; \
             the problem has a jump component"
                .into(),
        ));
    }
    if cfg.nt_coarse == 0 || cfg.substeps == 0 {
        return Err(Error::Spec(
            "dp oracle needs at least one segment and one substep".into(),
        ));
    }
    let sequences = (spec.m as f64).powi(cfg.nt_coarse as i32);
    if sequences > ENUMERATION_CAP {
        return Err(Error::Budget(format!(
            "brute-force enumeration would visit {sequences:.3e} mode sequences \
             (cap {ENUMERATION_CAP:.1e}); lower nt_coarse or the mode count"
        )));
    }
    let ctx = DpCtx {
        spec,
        seg: spec.t_end / cfg.nt_coarse as f64,
        substeps: cfg.substeps,
    };
    let mut x = [0.0; MAX_DIM];
    x[..spec.n].copy_from_slice(x0);
    let mut values = Vec::with_capacity(spec.m);
    let mut seqs = Vec::with_capacity(spec.m);
    for i0 in 0..spec.m {
        let (v, seq) = dp_best(&ctx, cfg, 0, i0, x, 1.0, 0.0)?;
        values.push(v);
        seqs.push(seq);
    }
    Ok(DpValue {
        values,
        best_sequences: seqs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McOracleConfig {
    pub paths: usize,
    /// Euler step of the simulation clock.
    pub dt_sim: f64,
    pub seed: u64,
    /// Mirror the Gaussian draws within path pairs (jump draws are shared).
    pub antithetic: bool,
    pub quadrature: QuadratureConfig,
}

impl Default for McOracleConfig {
    fn default() -> Self {
        McOracleConfig {
            paths: 100_000,
            dt_sim: 1e-3,
            seed: 0,
            antithetic: false,
            quadrature: QuadratureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    /// Standard error over independent samples (pair means when antithetic).
    pub std_error: f64,
    pub paths: usize,
    pub seed: u64,
}

/// Per-component simulation tables: categorical mark sampler for the
/// discretized measure plus cached state-independent drift/noise parts.
struct JumpSim {
    lam: f64,
    /// Cumulative node weights normalized to [0, 1], aligned with `marks`.
    cum: Vec<f64>,
    marks: Vec<Vec<f64>>,
    /// Compensator drift, cached when `eta` ignores `(x, t)`.
    beta_const: Option<[f64; MAX_DIM]>,
    /// Cholesky factor of the sub-cutoff noise covariance `2 a_corr`,
    /// cached when `eta` ignores `(x, t)`; `None` when there is none.
    chol_const: Option<[[f64; MAX_DIM]; MAX_DIM]>,
    has_corr: bool,
}

fn cholesky2(cov: [[f64; MAX_DIM]; MAX_DIM], n: usize) -> [[f64; MAX_DIM]; MAX_DIM] {
    let mut l = [[0.0; MAX_DIM]; MAX_DIM];
    l[0][0] = cov[0][0].max(0.0).sqrt();
    if n == 2 {
        l[1][0] = if l[0][0] > 0.0 { cov[1][0] / l[0][0] } else { 0.0 };
        l[1][1] = (cov[1][1] - l[1][0] * l[1][0]).max(0.0).sqrt();
    }
    l
}

/// Monte Carlo estimate of the one-mode value
/// `E[ e^{-INT c0} g(X_T) + INT e^{-INT c0} f dt ]` from `(x0, t0)`.
///
/// Jumps are simulated as a compound Poisson process over the quadrature
/// nodes of the discretized measure; sub-cutoff jumps enter as an extra
/// Gaussian noise with covariance `2 a_corr`, matching the solver's
/// diffusion correction. Fixed seeds give bit-reproducible results
/// regardless of thread count: paths are grouped into batches with seeds
/// derived from the root seed, and batch results reduce in index order.
pub fn mc_oracle(
    spec: &ProblemSpec,
    x0: &[f64],
    t0: f64,
    cfg: &McOracleConfig,
) -> Result<McEstimate> {
    if spec.m != 1 {
        return Err(Error::Unsupported(
            "the Monte Carlo oracle handles one-mode problems only; \
             use the dynamic-programming oracle for switching problems"
                .into(),
        ));
    }
    if !(0.0..spec.t_end).contains(&t0) {
        return Err(Error::Domain(format!(
            "simulation start t0 = {t0} must lie in [0, T)"
        )));
    }
    if cfg.paths == 0 || cfg.dt_sim <= 0.0 {
        return Err(Error::Spec(
            "Monte Carlo needs paths >= 1 and a positive dt_sim".into(),
        ));
    }
    let n = spec.n;

    let mut sims = Vec::new();
    for comp in &spec.jumps {
        let quad = build_quadrature(&comp.measure, cfg.quadrature.clone())?;
        let lam = quad.intensity();
        let mut cum = Vec::with_capacity(quad.nodes().len());
        let mut marks = Vec::with_capacity(quad.nodes().len());
        let mut run = 0.0;
        for q in quad.nodes() {
            run += q.w / lam.max(f64::MIN_POSITIVE);
            cum.push(run);
            marks.push(q.z.clone());
        }
        if let Some(last) = cum.last_mut() {
            *last = 1.0;
        }
        let state_indep = comp.eta.iter().all(|e| !e.depends_on_state());
        let probe = vec![0.0; n];
        let beta_const = if state_indep {
            Some(quad.compensator_drift(comp, &probe, 0.0)?)
        } else {
            None
        };
        let has_corr = !quad.corr_nodes().is_empty();
        let chol_const = if state_indep && has_corr {
            let mut cov = quad.diffusion_correction(comp, &probe, 0.0)?;
            for row in cov.iter_mut() {
                for v in row.iter_mut() {
                    *v *= 2.0;
                }
            }
            Some(cholesky2(cov, n))
        } else {
            None
        };
        sims.push((
            quad,
            JumpSim {
                lam,
                cum,
                marks,
                beta_const,
                chol_const,
                has_corr,
            },
        ));
    }

    // Hoist constant coefficients out of the stepping loop.
    let mode = &spec.modes[0];
    let coeffs_const = !(mode.b.iter().any(|e| e.depends_on_state())
        || mode.c0.depends_on_state()
        || mode.f.depends_on_state());
    let sigma_const = !mode.sigma.iter().flatten().any(|e| e.depends_on_state());
    let sigma_at = |x: &[f64], t: f64| -> [[f64; MAX_DIM]; MAX_DIM] {
        let pt = EvalPoint::xt(x, t);
        let mut s = [[0.0; MAX_DIM]; MAX_DIM];
        for k in 0..n {
            for l in 0..n {
                s[k][l] = mode.sigma[k][l].eval(&pt);
            }
        }
        s
    };
    let probe = vec![0.0; n];
    let const_lc = coeffs_const.then(|| evaluate_coefficients(spec, 0, &probe, 0.0));
    let const_sigma = sigma_const.then(|| sigma_at(&probe, 0.0));

    let horizon = spec.t_end - t0;
    let n_steps = (horizon / cfg.dt_sim).ceil().max(1.0) as usize;
    let sqrt2 = std::f64::consts::SQRT_2;

    // One unit = one path, or one antithetic pair averaged into one sample.
    let units = if cfg.antithetic {
        cfg.paths.div_ceil(2)
    } else {
        cfg.paths
    };
    const BATCH: usize = 4096;
    let n_batches = units.div_ceil(BATCH);

    let run_batch = |batch: usize| -> Result<(f64, f64, usize)> {
        let mut rng =
            ChaCha12Rng::seed_from_u64(cfg.seed ^ (batch as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let count = BATCH.min(units - batch * BATCH);
        let n_states = if cfg.antithetic { 2 } else { 1 };
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..count {
            let mut xs = [[0.0f64; MAX_DIM]; 2];
            for s in 0..n_states {
                xs[s][..n].copy_from_slice(x0);
            }
            let mut disc = [1.0f64; 2];
            let mut acc = [0.0f64; 2];
            let mut t = t0;
            for step in 0..n_steps {
                let dt = if step + 1 == n_steps {
                    spec.t_end - t
                } else {
                    cfg.dt_sim
                };
                let sdt = dt.sqrt();
                // Shared randomness for the pair: Gaussian driver (mirrored)
                // and jump counts/marks (identical).
                let mut gauss = [0.0f64; MAX_DIM];
                for g in gauss.iter_mut().take(n) {
                    *g = rng.sample(StandardNormal);
                }
                let mut corr_gauss = [0.0f64; MAX_DIM];
                if sims.iter().any(|(_, js)| js.has_corr) {
                    for g in corr_gauss.iter_mut().take(n) {
                        *g = rng.sample(StandardNormal);
                    }
                }
                let mut jump_marks: Vec<(usize, usize)> = Vec::new();
                for (si, (_, js)) in sims.iter().enumerate() {
                    let lam_dt = js.lam * dt;
                    if lam_dt <= 0.0 {
                        continue;
                    }
                    let k = Poisson::new(lam_dt)
                        .map_err(|e| Error::Spec(format!("jump intensity not simulable: {e}")))?
                        .sample(&mut rng) as usize;
                    for _ in 0..k {
                        let u: f64 = rng.random();
                        let pos = js.cum.partition_point(|c| *c < u);
                        jump_marks.push((si, pos.min(js.marks.len() - 1)));
                    }
                }
                for s in 0..n_states {
                    let sign = if s == 0 { 1.0 } else { -1.0 };
                    let x = &mut xs[s];
                    let lc = match &const_lc {
                        Some(lc) => lc.clone(),
                        None => evaluate_coefficients(spec, 0, &x[..n], t),
                    };
                    let sig = match &const_sigma {
                        Some(sg) => *sg,
                        None => sigma_at(&x[..n], t),
                    };
                    let mut dx = [0.0f64; MAX_DIM];
                    for k in 0..n {
                        dx[k] = lc.b[k] * dt;
                        for l in 0..n {
                            dx[k] += sqrt2 * sig[k][l] * sign * gauss[l] * sdt;
                        }
                    }
                    for ((quad, js), comp) in sims.iter().zip(&spec.jumps) {
                        let beta = match &js.beta_const {
                            Some(b) => *b,
                            None => quad.compensator_drift(comp, &x[..n], t)?,
                        };
                        for k in 0..n {
                            dx[k] -= beta[k] * dt;
                        }
                        if js.has_corr {
                            let l = match &js.chol_const {
                                Some(l) => *l,
                                None => {
                                    let mut cov = quad.diffusion_correction(comp, &x[..n], t)?;
                                    for row in cov.iter_mut() {
                                        for v in row.iter_mut() {
                                            *v *= 2.0;
                                        }
                                    }
                                    cholesky2(cov, n)
                                }
                            };
                            for k in 0..n {
                                for l2 in 0..=k.min(n - 1) {
                                    dx[k] += l[k][l2] * sign * corr_gauss[l2] * sdt;
                                }
                            }
                        }
                    }
                    acc[s] += disc[s] * lc.f * dt;
                    disc[s] *= (-lc.c0 * dt).exp();
                    for &(si, mark_pos) in &jump_marks {
                        let comp = &spec.jumps[si];
                        let eta = comp.eta_at(&x[..n], t, &sims[si].1.marks[mark_pos])?;
                        for k in 0..n {
                            dx[k] += eta[k];
                        }
                    }
                    for k in 0..n {
                        x[k] += dx[k];
                    }
                }
                t += dt;
            }
            let mut payoffs = [0.0f64; 2];
            for s in 0..n_states {
                payoffs[s] = acc[s] + disc[s] * spec.g(0, &xs[s][..n]);
                if !payoffs[s].is_finite() {
                    return Err(Error::NonFinite {
                        field: "Monte Carlo payoff".into(),
                        point: format!("x_T = {:?}", &xs[s][..n]),
                    });
                }
            }
            let sample = if cfg.antithetic {
                0.5 * (payoffs[0] + payoffs[1])
            } else {
                payoffs[0]
            };
            sum += sample;
            sumsq += sample * sample;
        }
        Ok((sum, sumsq, count))
    };

    use rayon::prelude::*;
    let parts: Vec<(f64, f64, usize)> = (0..n_batches)
        .into_par_iter()
        .map(run_batch)
        .collect::<Result<_>>()?;
    let (mut sum, mut sumsq, mut count) = (0.0, 0.0, 0usize);
    for (s, q, c) in parts {
        sum += s;
        sumsq += q;
        count += c;
    }
    let mean = sum / count as f64;
    let var = if count > 1 {
        ((sumsq - sum * sum / count as f64) / (count as f64 - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        estimate: mean,
        std_error: (var / count as f64).sqrt(),
        paths: if cfg.antithetic { 2 * units } else { units },
        seed: cfg.seed,
    })
}
