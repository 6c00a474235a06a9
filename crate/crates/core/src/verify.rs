//! Property suites with explicit pass/fail records, shared by the command-line
//! `oracle-verify` report and the acceptance gate.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentSpec, OpponentModel, PgBatch, PolicyModel, ValueFunction};
use crate::ail::{Discriminator, Variant};
use crate::error::Result;
use crate::game::MarkovGame;
use crate::nn::{self, batch_of, finite_difference, relative_error, Adam, Mlp};
use crate::oracle::{self, AgentPolicy, OpponentTable, StateTable, TabularJointPolicy};
use crate::rng::{self, StreamRng};
use crate::tabular::TabularGame;

pub const NORMALIZATION_TOL: f64 = 1e-8;
pub const BRIDGE_TOL: f64 = 1e-8;
pub const FACTORIZATION_TOL: f64 = 1e-10;
pub const IMPORTANCE_TOL: f64 = 1e-8;
pub const SOUNDNESS_SLACK: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const RATIO_TOL: f64 = 0.1;

/// One verified property: passes when `value <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: value <= threshold,
            value,
            threshold,
            detail: detail.into(),
        }
    }

    /// A check that failed because its computation raised an error.
    pub fn errored(name: impl Into<String>, err: &crate::Error) -> Self {
        Check {
            name: name.into(),
            passed: false,
            value: f64::NAN,
            threshold: f64::NAN,
            detail: format!("error: {err}"),
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::errored(name, &e))
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} <= {:.3e} ({})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold,
            self.detail
        )
    }
}

/// A random point of the simplex with every entry positive.
pub fn random_distribution(k: usize, rng: &mut StreamRng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn random_plain(game: &TabularGame, agent: usize, rng: &mut StreamRng) -> StateTable {
    (0..game.state_count())
        .map(|_| random_distribution(game.action_counts()[agent], rng))
        .collect()
}

pub fn random_conditional(game: &TabularGame, agent: usize, rng: &mut StreamRng) -> Vec<Vec<Vec<f64>>> {
    let opp = game.indexer().without(agent).size();
    (0..game.state_count())
        .map(|_| (0..opp).map(|_| random_distribution(game.action_counts()[agent], rng)).collect())
        .collect()
}

pub fn random_opponents(game: &TabularGame, agent: usize, rng: &mut StreamRng) -> OpponentTable {
    let opp = game.indexer().without(agent).size();
    (0..game.state_count()).map(|_| random_distribution(opp, rng)).collect()
}

fn random_profile(game: &TabularGame, rng: &mut StreamRng) -> TabularJointPolicy {
    TabularJointPolicy::Product((0..game.agent_count()).map(|i| random_plain(game, i, rng)).collect())
}

fn has_absorbing(game: &TabularGame) -> bool {
    (0..game.state_count()).any(|s| game.absorbing(s))
}

/// (1−γ)·Σρ = 1 for random correlated and product policies on games without
/// absorbing states.
pub fn normalization_check(games: &[TabularGame], per_game: usize, seed: u64) -> Result<Check> {
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for g in games.iter().filter(|g| !has_absorbing(g)) {
        for _ in 0..per_game {
            let agent = r.random_range(0..g.agent_count());
            let policies = [
                random_profile(g, &mut r),
                TabularJointPolicy::Correlated {
                    agent,
                    conditional: random_conditional(g, agent, &mut r),
                    opponents: random_opponents(g, agent, &mut r),
                },
            ];
            for p in &policies {
                let occ = oracle::exact_occupancy(g, p)?;
                if occ.rho.iter().flatten().any(|x| *x < 0.0) {
                    worst = f64::INFINITY;
                }
                worst = worst.max(occ.normalization_error());
                count += 1;
            }
        }
    }
    Ok(Check::at_most(
        "occupancy normalization",
        worst,
        NORMALIZATION_TOL,
        format!("{count} policies, max |(1-γ)Σρ - 1|"),
    ))
}

/// Σρ·f against the discounted expectation accumulated step by step from the
/// initial distribution.
pub fn bridge_check(games: &[TabularGame], per_game: usize, seed: u64) -> Result<Check> {
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for g in games.iter().filter(|g| g.state_count() <= 5) {
        for _ in 0..per_game {
            let joint = random_profile(g, &mut r).joint_table(g)?;
            let f: Vec<Vec<f64>> = (0..g.state_count())
                .map(|_| (0..g.joint_count()).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect();
            let lhs = oracle::occupancy_of_table(g, &joint)?.expectation(|s, j| f[s][j]);
            let rhs = propagated_expectation(g, &joint, &f);
            worst = worst.max((lhs - rhs).abs());
            count += 1;
        }
    }
    Ok(Check::at_most(
        "expectation bridge",
        worst,
        BRIDGE_TOL,
        format!("{count} (policy, f) pairs on games with at most 5 states"),
    ))
}

/// Σ_t γ^t E[f(s_t, a_t)] by forward propagation of the state distribution;
/// mass entering an absorbing state leaves the sum.
fn propagated_expectation(g: &TabularGame, joint: &StateTable, f: &[Vec<f64>]) -> f64 {
    let gamma = g.discount();
    let mut d = g.initial_distribution().to_vec();
    let mut total = 0.0;
    let mut weight = 1.0;
    let bound = f.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    while weight * bound / (1.0 - gamma) > 1e-14 {
        let mut next = vec![0.0; g.state_count()];
        for (s, ds) in d.iter().enumerate() {
            for (j, p) in joint[s].iter().enumerate() {
                total += weight * ds * p * f[s][j];
                for (s2, q) in g.transition_row(s, j).iter().enumerate() {
                    if !g.absorbing(s2) {
                        next[s2] += ds * p * q;
                    }
                }
            }
        }
        d = next;
        weight *= gamma;
        if gamma == 0.0 {
            break;
        }
    }
    total
}

/// Correlated policies whose conditionals ignore the opponents give the same
/// occupancy as the plain product form.
pub fn factorization_check(games: &[TabularGame], per_game: usize, seed: u64) -> Result<Check> {
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for g in games {
        for _ in 0..per_game {
            let tables: Vec<StateTable> = (0..g.agent_count()).map(|i| random_plain(g, i, &mut r)).collect();
            let product = oracle::exact_occupancy(g, &TabularJointPolicy::Product(tables.clone()))?;
            for agent in 0..g.agent_count() {
                let opp = g.indexer().without(agent).size();
                let conditional = tables[agent].iter().map(|row| vec![row.clone(); opp]).collect();
                let opponents = oracle::product_opponents(g, agent, &tables);
                let corr = oracle::exact_occupancy(
                    g,
                    &TabularJointPolicy::Correlated {
                        agent,
                        conditional,
                        opponents,
                    },
                )?;
                worst = worst.max(corr.max_abs_diff(&product));
                count += 1;
            }
        }
    }
    Ok(Check::at_most(
        "factorization equivalence",
        worst,
        FACTORIZATION_TOL,
        format!("{count} correlated/product pairs, max |Δρ|"),
    ))
}

/// The importance-sampling identity on `instances` random games.
pub fn importance_check(instances: usize, seed: u64) -> Result<Check> {
    let mut r = rng::seeded(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let states = r.random_range(1..=4);
        let agents = r.random_range(2..=3);
        let actions: Vec<usize> = (0..agents).map(|_| r.random_range(2..=3)).collect();
        let gamma = r.random_range(0.0..0.95);
        let g = TabularGame::random(states, actions, gamma, &mut r)?;
        let agent = r.random_range(0..agents);
        let policy = if r.random::<bool>() {
            AgentPolicy::Plain(random_plain(&g, agent, &mut r))
        } else {
            AgentPolicy::Conditional(random_conditional(&g, agent, &mut r))
        };
        let opponents = random_opponents(&g, agent, &mut r);
        let mu = random_opponents(&g, agent, &mut r);
        let f: Vec<Vec<f64>> = (0..states)
            .map(|_| (0..g.joint_count()).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let (lhs, rhs) = oracle::importance_identity_check(&g, agent, &policy, &opponents, &mu, |s, j| f[s][j])?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(Check::at_most(
        "importance identity",
        worst,
        IMPORTANCE_TOL,
        format!("{instances} random games, max |lhs - rhs|"),
    ))
}

/// For random profiles, no deterministic deviation beats the profile value by
/// more than the certified gap.
pub fn ne_soundness_check(games: &[TabularGame], per_game: usize, seed: u64) -> Result<Check> {
    let mut r = rng::seeded(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for g in games.iter().filter(|g| g.state_count() <= 4) {
        for _ in 0..per_game {
            let profile = random_profile(g, &mut r);
            let TabularJointPolicy::Product(tables) = &profile else { unreachable!() };
            let gaps = oracle::epsilon_ne_gap(g, &profile)?;
            let joint = profile.joint_table(g)?;
            for (i, gap) in gaps.iter().enumerate() {
                let own = oracle::initial_value(g, &oracle::values_of_table(g, &joint, i)?);
                for dev in oracle::deterministic_policies(g, i) {
                    let mut t = tables.clone();
                    t[i] = dev;
                    let p = TabularJointPolicy::Product(t);
                    let v = oracle::initial_value(g, &oracle::values_of_table(g, &p.joint_table(g)?, i)?);
                    worst = worst.max(v - own - gap);
                    count += 1;
                }
            }
        }
    }
    Ok(Check::at_most(
        "epsilon-NE soundness",
        worst.max(0.0),
        SOUNDNESS_SLACK,
        format!("{count} deterministic deviations, max excess over the certified gap"),
    ))
}

/// Every tabular oracle property on the given fixtures.
pub fn oracle_suite(fixtures: &[TabularGame], seed: u64) -> Vec<Check> {
    vec![
        Check::from_result("occupancy normalization", normalization_check(fixtures, 10, seed)),
        Check::from_result("expectation bridge", bridge_check(fixtures, 10, seed ^ 1)),
        Check::from_result("factorization equivalence", factorization_check(fixtures, 10, seed ^ 2)),
        Check::from_result("importance identity", importance_check(100, seed ^ 3)),
        Check::from_result("epsilon-NE soundness", ne_soundness_check(fixtures, 3, seed ^ 4)),
    ]
}

fn random_rows(n: usize, width: usize, r: &mut StreamRng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..width).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

/// Maximum relative error between an analytic gradient and central differences
/// over every coordinate.
fn max_gradient_error(analytic: &[f64], x: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference(f, x, &coords, 1e-5)
        .iter()
        .zip(analytic)
        .map(|(n, a)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Analytic gradients of every loss against central finite differences, `draws`
/// random networks and batches per loss.
pub fn gradient_suite(draws: usize, seed: u64) -> Vec<Check> {
    type Loss = fn(&mut StreamRng) -> Result<f64>;
    let losses: [(&str, Loss); 9] = [
        ("mlp backward", |r| {
            let net = Mlp::with_hidden(3, 6, 4, r);
            let x = batch_of(&random_rows(5, 3, r))?;
            let up = ndarray::Array2::from_shape_fn((5, 4), |_| r.random_range(-1.0..1.0));
            let g = net.backward_batch(&net.forward_batch(&x)?, &up)?;
            Ok(max_gradient_error(&g, net.params(), |p| {
                let n = Mlp::from_params(3, 6, 4, p.to_vec()).expect("same layout");
                let out = n.forward_batch(&x).expect("forward").output;
                (&out * &up).sum()
            }))
        }),
        ("softmax entropy", |r| {
            let logits: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
            let (_, g) = nn::entropy_with_grad(&logits);
            Ok(max_gradient_error(&g, &logits, |l| nn::entropy_with_grad(l).0))
        }),
        ("policy gradient, plain", |r| policy_loss_error(false, r)),
        ("policy gradient, correlated", |r| policy_loss_error(true, r)),
        ("policy likelihood", |r| {
            let spec = AgentSpec::new(0, 2, vec![3, 2]);
            let p = PolicyModel::new(spec, true, 6, r);
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|k| p.input(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)], Some(&[k % 2])))
                .collect::<Result<_>>()?;
            let x = batch_of(&rows)?;
            let actions: Vec<usize> = (0..6).map(|_| r.random_range(0..3)).collect();
            let (_, g) = p.nll_and_grad(&x, &actions)?;
            Ok(max_gradient_error(&g, p.net.params(), |q| {
                let mut pp = p.clone();
                pp.net.params_mut().copy_from_slice(q);
                pp.nll_and_grad(&x, &actions).expect("loss").0
            }))
        }),
        ("opponent cross-entropy", |r| {
            let m = OpponentModel::new(AgentSpec::new(1, 3, vec![2, 3, 2]), 6, r);
            let x = batch_of(&random_rows(6, 3, r))?;
            let targets: Vec<Vec<usize>> = (0..6).map(|_| vec![r.random_range(0..2), r.random_range(0..2)]).collect();
            let (_, g) = m.loss_and_grad(&x, &targets)?;
            Ok(max_gradient_error(&g, m.net.params(), |q| {
                let mut mm = m.clone();
                mm.net.params_mut().copy_from_slice(q);
                mm.loss_and_grad(&x, &targets).expect("loss").0
            }))
        }),
        ("value regression", |r| {
            let v = ValueFunction::new(AgentSpec::new(0, 2, vec![2, 3]), 6, r);
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|k| {
                    let prev = [k % 3];
                    v.input(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)], (k > 0).then_some(&prev[..]))
                })
                .collect::<Result<_>>()?;
            let x = batch_of(&rows)?;
            let ys: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
            let (_, g) = v.loss_and_grad(&x, &ys)?;
            Ok(max_gradient_error(&g, v.net.params(), |q| {
                let mut vv = v.clone();
                vv.net.params_mut().copy_from_slice(q);
                vv.loss_and_grad(&x, &ys).expect("loss").0
            }))
        }),
        ("discriminator, joint", |r| discriminator_error(Variant::Joint, r)),
        ("discriminator, private", |r| discriminator_error(Variant::Private, r)),
    ];
    losses
        .iter()
        .enumerate()
        .map(|(k, (name, loss))| {
            let mut r = rng::stream(seed, k as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..draws {
                match loss(&mut r) {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => return Check::errored(format!("gradient: {name}"), &e),
                }
            }
            Check::at_most(
                format!("gradient: {name}"),
                worst,
                GRADIENT_TOL,
                format!("{draws} draws, max relative error"),
            )
        })
        .collect()
}

fn policy_loss_error(correlated: bool, r: &mut StreamRng) -> Result<f64> {
    let p = PolicyModel::new(AgentSpec::new(0, 2, vec![3, 2]), correlated, 6, r);
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|k| {
            let opp = [k % 2];
            p.input(
                &[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                correlated.then_some(&opp[..]),
            )
        })
        .collect::<Result<_>>()?;
    let batch = PgBatch {
        inputs: batch_of(&rows)?,
        actions: (0..6).map(|_| r.random_range(0..3)).collect(),
        advantages: (0..6).map(|_| r.random_range(-2.0..2.0)).collect(),
    };
    let lambda = r.random_range(0.0..0.2);
    let (_, g, _) = p.loss_and_grad(&batch, lambda)?;
    Ok(max_gradient_error(&g, p.net.params(), |q| {
        let mut pp = p.clone();
        pp.net.params_mut().copy_from_slice(q);
        pp.loss_and_grad(&batch, lambda).expect("loss").0
    }))
}

fn discriminator_error(variant: Variant, r: &mut StreamRng) -> Result<f64> {
    let d = Discriminator::new(AgentSpec::new(0, 2, vec![3, 2]), variant, 6, r);
    let mut rows = |n: usize| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| {
                d.input(
                    &[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
                    r.random_range(0..3),
                    &[r.random_range(0..2)],
                )
            })
            .collect()
    };
    let e = batch_of(&rows(5)?)?;
    let l = batch_of(&rows(7)?)?;
    let (_, g) = d.loss_and_grad(&e, &l)?;
    Ok(max_gradient_error(&g, d.net.params(), |q| {
        let mut dd = d.clone();
        dd.net.params_mut().copy_from_slice(q);
        dd.loss_and_grad(&e, &l).expect("loss").0
    }))
}

/// Trains a discriminator between N(+0.5, 1) "expert" and N(−0.5, 1) "learner"
/// samples and compares the implied ratio D/(1−D) with the true density ratio
/// exp(x) on [−1.5, 1.5]. Returns the largest relative error.
pub fn discriminator_ratio_check(steps: usize, seed: u64) -> Result<Check> {
    let mut r = rng::seeded(seed);
    let spec = AgentSpec::new(0, 1, vec![1, 1]);
    let mut d = Discriminator::new(spec, Variant::Private, nn::HIDDEN, &mut r);
    let mut opt = Adam::for_model(&d.net, 1e-3);
    let batch = 512;
    let rows = |d: &Discriminator, mean: f64, r: &mut StreamRng| -> Result<ndarray::Array2<f64>> {
        batch_of(
            &(0..batch)
                .map(|_| d.input(&[mean + r.sample::<f64, _>(StandardNormal)], 0, &[0]))
                .collect::<Result<Vec<_>>>()?,
        )
    };
    for step in 0..steps {
        if step == steps * 3 / 4 {
            opt.lr = 1e-4;
        }
        let e = rows(&d, 0.5, &mut r)?;
        let l = rows(&d, -0.5, &mut r)?;
        d.step(&mut opt, &e, &l)?;
    }
    let xs: Vec<f64> = (0..=12).map(|k| -1.5 + 0.25 * k as f64).collect();
    let inputs = batch_of(&xs.iter().map(|x| d.input(&[*x], 0, &[0])).collect::<Result<Vec<_>>>()?)?;
    let logits = d.logits(&inputs)?;
    let worst = xs
        .iter()
        .zip(&logits)
        .map(|(x, z)| ((z - x).exp() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(Check::at_most(
        "optimal discriminator ratio",
        worst,
        RATIO_TOL,
        format!("{steps} steps, max |D/(1-D) / (p/q) - 1| on [-1.5, 1.5]"),
    ))
}

/// γ-discounted regularized objective v^(i)(s0) + λ H_γ of `policy` against
/// fixed opponents.
fn regularized_objective(
    game: &TabularGame,
    agent: usize,
    policy: &AgentPolicy,
    opponents: &OpponentTable,
    lambda: f64,
) -> Result<(f64, f64)> {
    let joint = oracle::assemble(game, agent, policy, opponents)?;
    let v = oracle::initial_value(game, &oracle::values_of_table(game, &joint, agent)?);
    let h = oracle::discounted_entropy(game, agent, policy, opponents)?;
    Ok((v, v + lambda * h))
}

/// For every candidate π: v(π) − v(π_E) ≤ λ·max|H(π) − H(π_E)| + g, where g is
/// how far π_E falls short of the entropy-regularized best response.
/// Returns the largest violation (≤ 0 when the inequality holds everywhere).
pub fn entropy_bound_check(
    game: &TabularGame,
    agent: usize,
    demonstrator: &AgentPolicy,
    opponents: &OpponentTable,
    candidates: &[AgentPolicy],
    lambda: f64,
) -> Result<Check> {
    let eps = oracle::entropy_bound_epsilon(game, agent, candidates, demonstrator, opponents, lambda)?;
    let soft = AgentPolicy::Plain(oracle::soft_best_response(game, agent, opponents, lambda)?);
    let (_, best) = regularized_objective(game, agent, &soft, opponents, lambda)?;
    let (v_e, j_e) = regularized_objective(game, agent, demonstrator, opponents, lambda)?;
    let gap = (best - j_e).max(0.0);
    let mut worst = f64::NEG_INFINITY;
    for c in candidates {
        let (v_c, _) = regularized_objective(game, agent, c, opponents, lambda)?;
        worst = worst.max(v_c - v_e - eps - gap);
    }
    Ok(Check::at_most(
        "entropy bound inequality",
        worst,
        SOUNDNESS_SLACK,
        format!(
            "{} candidates, ε = {eps:.6}, regularized best-response gap {gap:.3e}",
            candidates.len()
        ),
    ))
}

/// Deterministic policies plus `random` stochastic ones.
pub fn candidate_set(game: &TabularGame, agent: usize, random: usize, seed: u64) -> Vec<AgentPolicy> {
    let mut r = rng::seeded(seed);
    let mut out: Vec<AgentPolicy> = oracle::deterministic_policies(game, agent)
        .into_iter()
        .map(AgentPolicy::Plain)
        .collect();
    out.extend((0..random).map(|_| AgentPolicy::Plain(random_plain(game, agent, &mut r))));
    out
}
