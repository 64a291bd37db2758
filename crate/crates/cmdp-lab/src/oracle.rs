//! Exact constrained optima for small tabular CMDPs.
//!
//! Two independent solvers cross-validate each other. The dual route
//! exploits that `g(lambda) = max_pi L(pi, lambda)` is convex piecewise
//! linear with subgradient `-(C(pi_lambda) - d)`, so for a single constraint
//! a bisection on the sign of `C(pi_lambda) - d` pins the dual optimum; the
//! primal optimum is the mixture of the two deterministic policies adjacent
//! to that breakpoint, weighted to meet the limit exactly. The brute-force
//! route enumerates every deterministic stationary policy and takes the best
//! feasible point of the achievable `(R, C)` polytope, whose vertices are
//! exactly those policies.

use thiserror::Error;

use crate::cmdp::{lagrangian_value, TabularCmdp};

const VI_RESIDUAL: f64 = 1e-10;
/// Bisection terminates at this bracket width (well inside the 1e-4 the
/// consumers need; tight enough to isolate a single breakpoint).
const BISECTION_WIDTH: f64 = 1e-9;
const LAMBDA_CAP: f64 = (1u64 << 20) as f64;
const ENUMERATION_CAP: f64 = 1e6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("dual bisection requires exactly one cost channel, got {0}")]
    MultiConstraint(usize),
    #[error("no feasible policy: at lambda = {lambda_max} the cheapest cost found is {cost}, above the limit {limit}")]
    Infeasible { lambda_max: f64, cost: f64, limit: f64 },
    #[error("{policies:.0} deterministic policies exceed the enumeration cap of {ENUMERATION_CAP:.0}")]
    TooManyPolicies { policies: f64 },
}

/// Exact solution of the scalarized inner maximization at a fixed multiplier.
#[derive(Debug, Clone)]
pub struct LagrangianSolution {
    pub policy: Vec<usize>,
    pub r: f64,
    pub costs: Vec<f64>,
    /// `L(pi, lambda) = R - sum_i lambda_i (C_i - d_i)`, the dual function
    /// value at this multiplier.
    pub lagrangian: f64,
}

fn one_hot_rows(policy: &[usize], num_actions: usize) -> Vec<Vec<f64>> {
    policy
        .iter()
        .map(|&a| {
            let mut row = vec![0.0; num_actions];
            row[a] = 1.0;
            row
        })
        .collect()
}

/// Value iteration on the scalarized reward `r - sum_i lambda_i c_i` to
/// sup-norm residual 1e-10; argmax ties break toward the lowest action
/// index. The greedy policy is then evaluated exactly.
pub fn solve_lagrangian_mdp(cmdp: &TabularCmdp, lambda: &[f64]) -> LagrangianSolution {
    assert_eq!(lambda.len(), cmdp.num_cost_channels(), "multiplier arity");
    assert!(lambda.iter().all(|&l| l >= 0.0), "multipliers must be non-negative");
    let n = cmdp.num_states();
    let gamma = cmdp.gamma();
    let scalarized = |r: f64, costs: &[f64]| -> f64 {
        r - lambda.iter().zip(costs).map(|(&l, &c)| l * c).sum::<f64>()
    };

    // Contraction gives residual_k <= gamma^k * residual_0 in exact
    // arithmetic, so this many sweeps suffice for the target residual; at
    // very large multipliers f64 rounding floors the measured residual
    // above the target, and the bound stops the loop at that floor.
    let max_scal = (0..n)
        .flat_map(|s| (0..cmdp.num_actions()).flat_map(move |a| cmdp.successors(s, a)))
        .map(|(_, _, r, c)| scalarized(r, c).abs())
        .fold(0.0, f64::max);
    let v_scale = (max_scal / (1.0 - gamma)).max(1.0);
    let sweep_bound =
        if gamma > 0.0 { ((VI_RESIDUAL / v_scale).ln() / gamma.ln()).ceil() as usize + 100 } else { 2 };

    let mut v = vec![0.0; n];
    let mut next_v = vec![0.0; n];
    for _ in 0..sweep_bound {
        let mut residual: f64 = 0.0;
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..cmdp.num_actions() {
                let q: f64 = cmdp
                    .successors(s, a)
                    .map(|(next, p, r, c)| p * (scalarized(r, c) + gamma * v[next]))
                    .sum();
                if q > best {
                    best = q;
                }
            }
            residual = residual.max((best - v[s]).abs());
            next_v[s] = best;
        }
        std::mem::swap(&mut v, &mut next_v);
        if residual <= VI_RESIDUAL {
            break;
        }
    }

    let policy: Vec<usize> = (0..n)
        .map(|s| {
            let mut best = (f64::NEG_INFINITY, 0);
            for a in 0..cmdp.num_actions() {
                let q: f64 = cmdp
                    .successors(s, a)
                    .map(|(next, p, r, c)| p * (scalarized(r, c) + gamma * v[next]))
                    .sum();
                if q > best.0 {
                    best = (q, a);
                }
            }
            best.1
        })
        .collect();

    let (r, costs) = cmdp.evaluate_policy_exact(&one_hot_rows(&policy, cmdp.num_actions()));
    let lagrangian = lagrangian_value(r, &costs, cmdp.limits(), lambda);
    LagrangianSolution { policy, r, costs, lagrangian }
}

/// The primal optimum as a mixture of two deterministic policies: play `lo`
/// with probability `weight_lo`, else `hi`, chosen once per episode.
#[derive(Debug, Clone)]
pub struct PolicyMixture {
    pub weight_lo: f64,
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

/// One bisection step: the multiplier probed and the exact return/cost of
/// the scalarized-optimal policy there.
#[derive(Debug, Clone, Copy)]
pub struct DualIterate {
    pub lambda: f64,
    pub r: f64,
    pub c: f64,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub lambda_star: f64,
    pub r_star: f64,
    pub c_star: f64,
    pub mixture: PolicyMixture,
    pub iterates: Vec<DualIterate>,
}

/// Exact constrained optimum for a single-constraint CMDP via bisection on
/// the dual subgradient.
///
/// If the unconstrained optimum is already feasible the dual optimum is 0
/// and no search runs. Otherwise the upper bracket doubles from 1 until the
/// scalarized policy is feasible (infeasibility error at 2^20), and the
/// bracket shrinks to width 1e-9 around the breakpoint; the returned mixture
/// meets the limit exactly.
pub fn solve_dual_bisection(cmdp: &TabularCmdp) -> Result<DualSolution, OracleError> {
    if cmdp.num_cost_channels() != 1 {
        return Err(OracleError::MultiConstraint(cmdp.num_cost_channels()));
    }
    let d = cmdp.limits()[0];
    let mut iterates = Vec::new();
    let mut probe = |lambda: f64| -> LagrangianSolution {
        let sol = solve_lagrangian_mdp(cmdp, &[lambda]);
        iterates.push(DualIterate { lambda, r: sol.r, c: sol.costs[0] });
        sol
    };

    let at_zero = probe(0.0);
    if at_zero.costs[0] <= d + 1e-9 * d.abs().max(1.0) {
        let mixture =
            PolicyMixture { weight_lo: 1.0, lo: at_zero.policy.clone(), hi: at_zero.policy.clone() };
        return Ok(DualSolution {
            lambda_star: 0.0,
            r_star: at_zero.r,
            c_star: at_zero.costs[0],
            mixture,
            iterates,
        });
    }

    let mut lambda_hi = 1.0;
    let mut at_hi = probe(lambda_hi);
    while at_hi.costs[0] > d && lambda_hi < LAMBDA_CAP {
        lambda_hi *= 2.0;
        at_hi = probe(lambda_hi);
    }
    if at_hi.costs[0] > d {
        return Err(OracleError::Infeasible {
            lambda_max: lambda_hi,
            cost: at_hi.costs[0],
            limit: d,
        });
    }

    let mut lambda_lo = 0.0;
    let mut at_lo = at_zero;
    while lambda_hi - lambda_lo > BISECTION_WIDTH {
        let mid = 0.5 * (lambda_lo + lambda_hi);
        let at_mid = probe(mid);
        if at_mid.costs[0] > d {
            lambda_lo = mid;
            at_lo = at_mid;
        } else {
            lambda_hi = mid;
            at_hi = at_mid;
        }
    }

    let (c_lo, c_hi) = (at_lo.costs[0], at_hi.costs[0]);
    let weight_lo = if c_lo > c_hi { (d - c_hi) / (c_lo - c_hi) } else { 0.0 };
    let r_star = weight_lo * at_lo.r + (1.0 - weight_lo) * at_hi.r;
    let c_star = weight_lo * c_lo + (1.0 - weight_lo) * c_hi;
    Ok(DualSolution {
        lambda_star: 0.5 * (lambda_lo + lambda_hi),
        r_star,
        c_star,
        mixture: PolicyMixture { weight_lo, lo: at_lo.policy, hi: at_hi.policy },
        iterates,
    })
}

/// Exact `(R, C)` of one deterministic stationary policy.
#[derive(Debug, Clone)]
pub struct PolicyPoint {
    pub policy: Vec<usize>,
    pub r: f64,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Enumeration {
    /// Best return over feasible deterministic policies and feasible
    /// pairwise mixtures; `None` when nothing is feasible.
    pub best_feasible_value: Option<f64>,
    pub frontier: Vec<PolicyPoint>,
}

/// Evaluates every deterministic stationary policy (all `|A|^|S|` of them)
/// and maximizes the return over feasible policies and feasible two-policy
/// mixtures. Since the achievable `(R, C)` set is the convex hull of these
/// points, this is the exact constrained optimum.
pub fn brute_force_enumerate(cmdp: &TabularCmdp) -> Result<Enumeration, OracleError> {
    let (n, k) = (cmdp.num_states(), cmdp.num_actions());
    let count = (k as f64).powi(n as i32);
    if count > ENUMERATION_CAP {
        return Err(OracleError::TooManyPolicies { policies: count });
    }

    let mut frontier = Vec::with_capacity(count as usize);
    let mut policy = vec![0usize; n];
    loop {
        let (r, costs) = cmdp.evaluate_policy_exact(&one_hot_rows(&policy, k));
        frontier.push(PolicyPoint { policy: policy.clone(), r, costs });
        // Mixed-radix increment over action assignments.
        let mut digit = 0;
        while digit < n {
            policy[digit] += 1;
            if policy[digit] < k {
                break;
            }
            policy[digit] = 0;
            digit += 1;
        }
        if digit == n {
            break;
        }
    }

    let best = best_over_mixtures(&frontier, cmdp.limits());
    Ok(Enumeration { best_feasible_value: best, frontier })
}

fn feasible(costs: &[f64], limits: &[f64]) -> bool {
    costs.iter().zip(limits).all(|(&c, &d)| c <= d + 1e-12 * d.abs().max(1.0))
}

fn best_over_mixtures(frontier: &[PolicyPoint], limits: &[f64]) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |r: f64| {
        best = Some(best.map_or(r, |b: f64| b.max(r)));
    };
    for p in frontier {
        if feasible(&p.costs, limits) {
            consider(p.r);
        }
    }
    // A mixture plays policy `a` with probability w, else `b`. Feasibility
    // per channel is linear in w, so the admissible set is an interval and
    // the best mixture return sits at one of its endpoints.
    for (i, a) in frontier.iter().enumerate() {
        for b in &frontier[i + 1..] {
            let (mut w_min, mut w_max) = (0.0f64, 1.0f64);
            for ((&ca, &cb), &d) in a.costs.iter().zip(&b.costs).zip(limits) {
                let slope = ca - cb;
                let margin = d - cb;
                if slope.abs() < 1e-15 {
                    if cb > d + 1e-12 * d.abs().max(1.0) {
                        w_max = -1.0;
                        break;
                    }
                } else if slope > 0.0 {
                    w_max = w_max.min(margin / slope);
                } else {
                    w_min = w_min.max(margin / slope);
                }
            }
            if w_min > w_max {
                continue;
            }
            for w in [w_min, w_max] {
                consider(w * a.r + (1.0 - w) * b.r);
            }
        }
    }
    best
}
