//! Acceptance gate: nine end-to-end criteria, one test each, printing one
//! PASS/FAIL line per criterion (visible with `--nocapture`). Tolerances
//! are pinned as constants next to each criterion.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use switchpide::barrier::{
    calibrate_c, lower_barrier, upper_barrier, verify_obstacle_dominance,
    verify_terminal_dominance, BarrierParams,
};
use switchpide::expr::Expr;
use switchpide::model::{GridSpec, ProblemSpec};
use switchpide::oracle::{dp_oracle, mc_oracle, DpOracleConfig, McOracleConfig};
use switchpide::solver::{solve, SolverConfig};
use switchpide::switchgraph::{cheapest_chain_by_enumeration, close_matrix};
use switchpide::verify::{comparison_experiment, continuous_dependence_experiment,
    regularity_experiment, PerturbationPlan};

fn criterion(number: usize, name: &str, check: impl FnOnce() -> Result<(), String>) {
    match check() {
        Ok(()) => println!("[acceptance] criterion {number} ({name}): PASS"),
        Err(msg) => {
            println!("[acceptance] criterion {number} ({name}): FAIL - {msg}");
            panic!("criterion {number} ({name}) failed: {msg}");
        }
    }
}

fn parse(text: &str) -> ProblemSpec {
    ProblemSpec::from_json_str(text).expect("test spec parses")
}

fn grid(spec: &ProblemSpec, nx: usize, nt: usize) -> SolverConfig {
    SolverConfig::new(GridSpec::new(spec.domain.clone(), vec![nx; spec.n], nt).unwrap())
}

/// One-mode backward heat problem with quadratic terminal data; the exact
/// solution is `u = x^2 + 2 (T - t)`.
const HEAT_SPEC: &str = r#"{
  "dims": {"n": 1, "m": 1, "T": 1.0, "box": [[-3.0, 3.0]]},
  "p": 2, "K": 10.0,
  "modes": [{"sigma": [[1.0]], "b": [0.0], "c0": 0, "f": 0}],
  "costs": [[0]],
  "terminal": {"g": [{"pow": ["x", 2]}]}
}"#;

/// Two modes, no dynamics: mode 1 earns nothing, mode 2 earns 1 per unit
/// time, switching costs 0.6 each way. Optimal: switch once immediately,
/// so u2(x, 0) = 1 and u1(x, 0) = 1 - 0.6 = 0.4.
const SWITCH_SPEC: &str = r#"{
  "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-1.0, 1.0]]},
  "p": 2, "K": 10.0,
  "modes": [
    {"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 0},
    {"sigma": [[0.0]], "b": [0.0], "c0": 0, "f": 1}
  ],
  "costs": [[0, 0.6], [0.6, 0]],
  "terminal": {"g": [0, 0]}
}"#;

/// Two-mode jump diffusion used for the ordering experiments.
const JUMP2_SPEC: &str = r#"{
  "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-2.0, 2.0]]},
  "p": 2, "K": 10.0,
  "modes": [
    {"sigma": [[0.3]], "b": [0.1], "c0": 0.05, "f": {"mul": [0.1, "x"]}},
    {"sigma": [[0.25]], "b": [-0.1], "c0": 0, "f": 0.3}
  ],
  "jumps": [
    {"measure": {"kind": "finite-atoms", "atoms": [{"z": 0.5, "w": 0.8}]},
     "eta": [{"mul": [0.3, "z"]}]},
    {"measure": {"kind": "finite-atoms", "atoms": [{"z": -0.7, "w": 0.5}]},
     "eta": [{"mul": [0.2, "z"]}]}
  ],
  "costs": [[0, 0.4], [0.5, 0]],
  "terminal": {"g": [{"mul": [0.1, {"pow": ["x", 2]}]}, {"mul": [0.1, {"pow": ["x", 2]}]}]}
}"#;

/// Two-mode diffusion with smooth data for the barrier sandwich.
const BARRIER_SPEC: &str = r#"{
  "dims": {"n": 1, "m": 2, "T": 1.0, "box": [[-2.0, 2.0]]},
  "p": 2, "K": 10.0,
  "modes": [
    {"sigma": [[0.5]], "b": [0.0], "c0": 0.1, "f": 0},
    {"sigma": [[0.5]], "b": [0.0], "c0": 0, "f": 0.5}
  ],
  "costs": [[0, 0.3], [0.4, 0]],
  "terminal": {"g": [{"pow": ["x", 2]}, {"pow": ["x", 2]}]}
}"#;

/// One-dimensional jump diffusion with the Lipschitz (kinked) terminal
/// payoff `|x|`; time regularity at the kink is the interesting part.
const HOLDER_SPEC: &str = r#"{
  "dims": {"n": 1, "m": 1, "T": 0.25, "box": [[-2.0, 2.0]]},
  "p": 2, "K": 10.0,
  "modes": [{"sigma": [[0.5]], "b": [0.0], "c0": 0, "f": 0}],
  "jumps": [
    {"measure": {"kind": "finite-atoms", "atoms": [{"z": 1.0, "w": 0.3}]},
     "eta": [{"mul": [0.25, "z"]}]}
  ],
  "costs": [[0]],
  "terminal": {"g": [{"abs": "x"}]}
}"#;

/// Unit diffusion plus a unit-size, unit-rate jump against quadratic
/// terminal data: the generator applied to x^2 gives the constant 3, so
/// u(0, 0) = 3 T.
const MC_SPEC: &str = r#"{
  "dims": {"n": 1, "m": 1, "T": 1.0, "box": [[-8.0, 8.0]]},
  "p": 2, "K": 10.0,
  "modes": [{"sigma": [[1.0]], "b": [0.0], "c0": 0, "f": 0}],
  "jumps": [
    {"measure": {"kind": "finite-atoms", "atoms": [{"z": 1.0, "w": 1.0}]},
     "eta": ["z"]}
  ],
  "costs": [[0]],
  "terminal": {"g": [{"pow": ["x", 2]}]}
}"#;

#[test]
fn criterion_1_backward_heat_oracle() {
    const TOL: f64 = 1e-3;
    const BUDGET_SECS: f64 = 10.0;
    criterion(1, "backward-heat oracle", || {
        let spec = parse(HEAT_SPEC);
        let cfg = grid(&spec, 301, 201);
        let start = Instant::now();
        let out = solve(&spec, &cfg).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed().as_secs_f64();
        let mut worst = 0.0f64;
        for k in 0..cfg.grid.nt {
            let t = cfg.grid.time(spec.t_end, k);
            for idx in 0..cfg.grid.num_nodes() {
                let x = cfg.grid.node(idx)[0];
                if x.abs() <= 1.0 {
                    let exact = x * x + 2.0 * (spec.t_end - t);
                    worst = worst.max((out.u.get(0, k, idx) - exact).abs());
                }
            }
        }
        if worst >= TOL {
            return Err(format!("max error {worst:.3e} >= {TOL:.0e} on |x| <= 1"));
        }
        if elapsed >= BUDGET_SECS {
            return Err(format!("solve took {elapsed:.1} s >= {BUDGET_SECS} s"));
        }
        Ok(())
    });
}

#[test]
fn criterion_2_deterministic_switching_oracle() {
    const TOL_SOLVE: f64 = 1e-2;
    const TOL_ORACLE: f64 = 1e-3;
    criterion(2, "deterministic switching oracle", || {
        let spec = parse(SWITCH_SPEC);
        let cfg = grid(&spec, 41, 101);
        let out = solve(&spec, &cfg).map_err(|e| e.to_string())?;
        for idx in 0..cfg.grid.num_nodes() {
            if cfg.grid.is_boundary(idx) {
                continue;
            }
            let u1 = out.u.get(0, 0, idx);
            let u2 = out.u.get(1, 0, idx);
            if (u1 - 0.4).abs() >= TOL_SOLVE || (u2 - 1.0).abs() >= TOL_SOLVE {
                return Err(format!("u1 = {u1}, u2 = {u2} at node {idx}"));
            }
        }
        let dp = dp_oracle(&spec, &[0.0], &DpOracleConfig::default())
            .map_err(|e| e.to_string())?;
        if (dp.values[0] - 0.4).abs() >= TOL_ORACLE || (dp.values[1] - 1.0).abs() >= TOL_ORACLE
        {
            return Err(format!("enumeration oracle disagrees: {:?}", dp.values));
        }
        let u1 = out.u.get(0, 0, cfg.grid.num_nodes() / 2);
        if (u1 - dp.values[0]).abs() >= TOL_ORACLE {
            return Err(format!(
                "solver {u1} vs enumeration {} differ by >= {TOL_ORACLE:.0e}",
                dp.values[0]
            ));
        }
        Ok(())
    });
}

#[test]
fn criterion_3_continuous_dependence_sharpness() {
    const DELTA: f64 = 0.1;
    const TOL: f64 = 1e-6;
    criterion(3, "continuous-dependence sharpness", || {
        let spec = parse(HEAT_SPEC);
        let cfg = grid(&spec, 121, 81);
        let f_report = continuous_dependence_experiment(
            &spec,
            &PerturbationPlan::single("f", DELTA),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let expect_f = DELTA * spec.t_end;
        if (f_report.sup_diff - expect_f).abs() > TOL {
            return Err(format!(
                "f-shift sup diff {} outside {expect_f} +- {TOL:.0e}",
                f_report.sup_diff
            ));
        }
        let g_report = continuous_dependence_experiment(
            &spec,
            &PerturbationPlan::single("g", DELTA),
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        if (g_report.sup_diff - DELTA).abs() > TOL {
            return Err(format!(
                "g-shift sup diff {} outside {DELTA} +- {TOL:.0e}",
                g_report.sup_diff
            ));
        }
        Ok(())
    });
}

#[test]
fn criterion_4_discrete_comparison() {
    const PAIRS: usize = 20;
    const TOL: f64 = 1e-8;
    criterion(4, "discrete comparison under ordered data", || {
        let spec = parse(JUMP2_SPEC);
        let cfg = grid(&spec, 41, 41);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut worst = 0.0f64;
        for pair in 0..PAIRS {
            let mut which = Vec::new();
            if rng.random::<bool>() {
                which.push("f".to_string());
            }
            if rng.random::<bool>() || which.is_empty() {
                which.push("g".to_string());
            }
            let plan = PerturbationPlan {
                magnitude: 0.3 * rng.random::<f64>(),
                which,
                direction: Default::default(),
            };
            let report =
                comparison_experiment(&spec, &plan, &cfg).map_err(|e| e.to_string())?;
            worst = worst.max(report.worst_violation);
            if report.worst_violation > TOL {
                return Err(format!(
                    "pair {pair} ({:?} by {}) violates ordering by {:.3e}",
                    plan.which, plan.magnitude, report.worst_violation
                ));
            }
        }
        println!("  worst ordering violation over {PAIRS} pairs: {worst:.3e}");
        Ok(())
    });
}

#[test]
fn criterion_5_barrier_suite() {
    criterion(5, "barrier calibration and sandwich", || {
        let spec = parse(BARRIER_SPEC);
        let gr = GridSpec::new(spec.domain.clone(), vec![41], 41).unwrap();
        let cal = calibrate_c(&spec, &gr, 1.0).map_err(|e| e.to_string())?;
        if cal.worst_residual < 0.0 {
            return Err(format!(
                "residual {} < 0 at {} for calibrated c* = {}",
                cal.worst_residual, cal.worst_node, cal.c_star
            ));
        }

        let params = BarrierParams::new(
            cal.c_star,
            1.0,
            vec![0.0],
            spec.t_end,
            0,
            spec.terminal.g.clone(),
            spec.p,
        )
        .map_err(|e| e.to_string())?;
        let xs: Vec<Vec<f64>> = (0..gr.num_nodes()).map(|i| vec![gr.node(i)[0]]).collect();
        let terminal = verify_terminal_dominance(&params, &spec.costs, &xs)
            .map_err(|e| e.to_string())?;
        if !terminal.pass {
            return Err(format!(
                "terminal dominance fails by {} at {}",
                terminal.worst_margin, terminal.worst_node
            ));
        }
        let xt: Vec<(Vec<f64>, f64)> = xs
            .iter()
            .flat_map(|x| {
                [0.0, 0.5 * spec.t_end, spec.t_end].map(|t| (x.clone(), t))
            })
            .collect();
        let obstacle = verify_obstacle_dominance(&params, &spec.costs, &xt)
            .map_err(|e| e.to_string())?;
        if !obstacle.pass {
            return Err(format!(
                "obstacle dominance fails by {} at {}",
                obstacle.worst_margin, obstacle.worst_node
            ));
        }

        // The computed solution must sit inside the barrier envelope at
        // every node of every time level.
        let cfg = SolverConfig::new(gr.clone());
        let out = solve(&spec, &cfg).map_err(|e| e.to_string())?;
        for j in 0..spec.m {
            for k in 0..gr.nt {
                let t = gr.time(spec.t_end, k);
                for idx in 0..gr.num_nodes() {
                    let x = [gr.node(idx)[0]];
                    let u = out.u.get(j, k, idx);
                    let up = upper_barrier(&params, &spec.costs, j, &x, t)
                        .map_err(|e| e.to_string())?;
                    let lo = lower_barrier(&params, j, &x, t).map_err(|e| e.to_string())?;
                    if u > up + 1e-9 || u < lo - 1e-9 {
                        return Err(format!(
                            "u_{j}({}, {t}) = {u} escapes [{lo}, {up}]",
                            x[0]
                        ));
                    }
                }
            }
        }

        // Terminal dominance for the canonical Lipschitz datum h = K |x|:
        // the minimal passing constant stays below K 2^(p+1) = 8 K.
        let kk = spec.k_bound;
        let h = vec![Expr::Mul(vec![
            Expr::Const(kk),
            Expr::Abs(Box::new(Expr::var("x"))),
        ])];
        let dense: Vec<Vec<f64>> = (0..=400)
            .map(|i| vec![-2.0 + 4.0 * i as f64 / 400.0])
            .collect();
        for anchor in [0.0, -1.3, 1.7] {
            let step1 = BarrierParams::new(
                kk * 8.0,
                1.0,
                vec![anchor],
                spec.t_end,
                0,
                h.clone(),
                2,
            )
            .map_err(|e| e.to_string())?;
            let zero_cost = switchpide::switchgraph::SwitchingCostField::new(vec![vec![
                Expr::Const(0.0),
            ]])
            .map_err(|e| e.to_string())?;
            let report = verify_terminal_dominance(&step1, &zero_cost, &dense)
                .map_err(|e| e.to_string())?;
            if !report.pass {
                return Err(format!(
                    "h = K|x| not dominated at c = 8K for anchor {anchor}"
                ));
            }
            let minimal = report.minimal_c.expect("pass implies a minimal constant");
            if minimal > kk * 8.0 {
                return Err(format!(
                    "minimal constant {minimal} exceeds 8K = {} at anchor {anchor}",
                    kk * 8.0
                ));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_6_closure_properties() {
    const INSTANCES: usize = 100;
    const TOL: f64 = 1e-12;
    criterion(6, "switching-cost closure properties", || {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for case in 0..INSTANCES {
            let m = 2 + case % 3;
            let mut c = vec![0.0f64; m * m];
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        // Strictly positive costs: every loop is positive.
                        c[i * m + j] = 0.05 + 1.95 * rng.random::<f64>();
                    }
                }
            }
            let closed = close_matrix(&c, m).map_err(|e| format!("case {case}: {e}"))?;
            for i in 0..m {
                for j in 0..m {
                    if i == j {
                        continue;
                    }
                    // Dominated by the raw costs.
                    if closed[i * m + j] > c[i * m + j] + TOL {
                        return Err(format!("case {case}: closure exceeds cost at ({i},{j})"));
                    }
                    // Triangle inequality, exactly.
                    for k in 0..m {
                        if k != i && k != j {
                            let lhs = closed[i * m + j];
                            let rhs = closed[i * m + k] + closed[k * m + j];
                            if lhs > rhs + TOL {
                                return Err(format!(
                                    "case {case}: triangle violated at ({i},{k},{j})"
                                ));
                            }
                        }
                    }
                    // Agreement with brute-force chain enumeration.
                    let oracle = cheapest_chain_by_enumeration(&c, m, i, j);
                    if (closed[i * m + j] - oracle).abs() > TOL {
                        return Err(format!(
                            "case {case}: closure {} vs enumeration {oracle} at ({i},{j})",
                            closed[i * m + j]
                        ));
                    }
                }
            }
            // Idempotence (bit-exact).
            let twice = close_matrix(&closed, m).map_err(|e| format!("case {case}: {e}"))?;
            if twice != closed {
                return Err(format!("case {case}: closure is not idempotent"));
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_7_holder_time_regularity() {
    const SLACK: f64 = 0.05;
    criterion(7, "Hölder-in-time slope", || {
        let spec = parse(HOLDER_SPEC);
        let cfg = grid(&spec, 401, 129);
        let report = regularity_experiment(&spec, &cfg, SLACK).map_err(|e| e.to_string())?;
        println!(
            "  time slope {:.3} over {} dyadic gaps (Lipschitz constant {:.3})",
            report.time_slope,
            report.gaps.len(),
            report.lipschitz_constant
        );
        if !report.pass {
            return Err(format!(
                "slope {:.3} below {:.2}",
                report.time_slope,
                0.5 - SLACK
            ));
        }
        Ok(())
    });
}

#[test]
fn criterion_8_monte_carlo_cross_check() {
    const PATHS: usize = 100_000;
    const SEED: u64 = 0;
    const EXTRA: f64 = 2e-2;
    const BUDGET_SECS: f64 = 60.0;
    criterion(8, "Monte Carlo cross-check", || {
        let start = Instant::now();
        let spec = parse(MC_SPEC);
        let cfg = grid(&spec, 641, 201);
        let out = solve(&spec, &cfg).map_err(|e| e.to_string())?;
        let center = cfg.grid.num_nodes() / 2;
        let u_solve = out.u.get(0, 0, center);

        let mc_cfg = McOracleConfig {
            paths: PATHS,
            seed: SEED,
            ..McOracleConfig::default()
        };
        let mc = mc_oracle(&spec, &[0.0], 0.0, &mc_cfg).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed().as_secs_f64();
        let budget = 3.0 * mc.std_error + EXTRA;
        println!(
            "  solve {u_solve:.5} vs mc {:.5} +- {:.5} (closed form 3.0), {elapsed:.1} s",
            mc.estimate, mc.std_error
        );
        if (u_solve - mc.estimate).abs() > budget {
            return Err(format!(
                "|{u_solve} - {}| = {:.4} exceeds 3 SE + {EXTRA} = {budget:.4}",
                mc.estimate,
                (u_solve - mc.estimate).abs()
            ));
        }
        if (u_solve - 3.0).abs() > 0.05 {
            return Err(format!("solver value {u_solve} far from closed form 3.0"));
        }
        if elapsed >= BUDGET_SECS {
            return Err(format!("cross-check took {elapsed:.1} s >= {BUDGET_SECS} s"));
        }
        Ok(())
    });
}

#[test]
fn criterion_9_complementarity_everywhere() {
    const TOL: f64 = 1e-8; // 10 x the default obstacle tolerance
    criterion(9, "complementarity residual on every solved spec", || {
        let suite: [(&str, &str, usize, usize); 5] = [
            ("heat", HEAT_SPEC, 101, 101),
            ("switching", SWITCH_SPEC, 41, 101),
            ("jump two-mode", JUMP2_SPEC, 41, 41),
            ("barrier", BARRIER_SPEC, 41, 41),
            ("holder", HOLDER_SPEC, 201, 65),
        ];
        for (name, text, nx, nt) in suite {
            let spec = parse(text);
            let cfg = grid(&spec, nx, nt);
            let out = solve(&spec, &cfg).map_err(|e| format!("{name}: {e}"))?;
            let mut worst = 0.0f64;
            for i in 0..spec.m {
                for k in 0..cfg.grid.nt {
                    for idx in 0..cfg.grid.num_nodes() {
                        worst = worst.max(out.residual.get(i, k, idx).abs());
                    }
                }
            }
            println!("  {name}: max |min(residual, gap)| = {worst:.3e}");
            if worst > TOL {
                return Err(format!("{name}: residual {worst:.3e} > {TOL:.0e}"));
            }
        }
        Ok(())
    });
}
