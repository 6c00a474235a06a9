//! Exact computations on tabular games: occupancy measures, policy evaluation,
//! best responses, the importance-sampling identity and ε-NE certification.
//!
//! Everything here is solved directly (LU for linear systems, value iteration to
//! a 1e-10 residual for best responses). Reaching an absorbing state ends the
//! episode, so absorbing successors contribute neither visits nor value; this
//! matches how rollouts terminate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::MarkovGame;
use crate::tabular::{JointIndexer, TabularGame};

const DIST_TOLERANCE: f64 = 1e-9;
const BELLMAN_TOLERANCE: f64 = 1e-10;
const MAX_SWEEPS: usize = 200_000;

/// Per-state distributions, `[state][action]`.
pub type StateTable = Vec<Vec<f64>>;

/// Distribution over opponent joint actions per state, `[state][opponent joint]`.
pub type OpponentTable = Vec<Vec<f64>>;

/// One agent's policy: either plain π^(i)(a|s) or conditional π^(i)(a|s, a^(-i)).
#[derive(Clone, Debug, PartialEq)]
pub enum AgentPolicy {
    Plain(StateTable),
    /// `[state][opponent joint][own action]`
    Conditional(Vec<Vec<Vec<f64>>>),
}

/// A joint policy over a tabular game.
#[derive(Clone, Debug, PartialEq)]
pub enum TabularJointPolicy {
    /// Non-correlated form: one plain table per agent.
    Product(Vec<StateTable>),
    /// Correlated form from one agent's perspective: π^(i)(a^(i)|s, a^(-i)) · π^(-i)(a^(-i)|s).
    Correlated {
        agent: usize,
        conditional: Vec<Vec<Vec<f64>>>,
        opponents: OpponentTable,
    },
    /// An explicit distribution over joint actions, `[state][joint]`.
    Joint(StateTable),
}

fn check_dist(p: &[f64], what: impl Fn() -> String) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidPolicy(format!("{} has negative or non-finite entries", what())));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOLERANCE {
        return Err(Error::InvalidPolicy(format!("{} sums to {s}", what())));
    }
    Ok(())
}

fn check_table(t: &StateTable, states: usize, width: usize, what: &str) -> Result<()> {
    if t.len() != states {
        return Err(Error::InvalidPolicy(format!("{what}: {} rows for {states} states", t.len())));
    }
    for (s, row) in t.iter().enumerate() {
        if row.len() != width {
            return Err(Error::InvalidPolicy(format!("{what}: row {s} has width {}, expected {width}", row.len())));
        }
        check_dist(row, || format!("{what} at state {s}"))?;
    }
    Ok(())
}

impl AgentPolicy {
    pub fn validate(&self, game: &TabularGame, agent: usize) -> Result<()> {
        let n_own = game.action_counts()[agent];
        match self {
            AgentPolicy::Plain(t) => check_table(t, game.state_count(), n_own, "agent policy"),
            AgentPolicy::Conditional(t) => {
                let n_opp = game.indexer().without(agent).size();
                if t.len() != game.state_count() {
                    return Err(Error::InvalidPolicy("conditional policy has wrong state count".into()));
                }
                for row in t {
                    check_table(row, n_opp, n_own, "conditional policy")?;
                }
                Ok(())
            }
        }
    }

    /// π^(i)(·|s, a^(-i)) for a given opponent joint index.
    pub fn conditional(&self, state: usize, opponents: usize) -> &[f64] {
        match self {
            AgentPolicy::Plain(t) => &t[state],
            AgentPolicy::Conditional(t) => &t[state][opponents],
        }
    }

    /// Marginal π^(i)(a|s) = Σ_{a^(-i)} π^(i)(a|s, a^(-i)) μ(a^(-i)|s).
    pub fn marginal(&self, opponents: &OpponentTable) -> StateTable {
        match self {
            AgentPolicy::Plain(t) => t.clone(),
            AgentPolicy::Conditional(t) => t
                .iter()
                .zip(opponents)
                .map(|(rows, mu)| {
                    let mut m = vec![0.0; rows[0].len()];
                    for (row, &w) in rows.iter().zip(mu) {
                        for (acc, p) in m.iter_mut().zip(row) {
                            *acc += w * p;
                        }
                    }
                    m
                })
                .collect(),
        }
    }

    /// Entropy of the agent's decision at a state. For conditional policies this
    /// is the conditional entropy Σ μ(a^(-i)|s) H(π(·|s, a^(-i))).
    pub fn state_entropy(&self, state: usize, opponents: &OpponentTable) -> f64 {
        match self {
            AgentPolicy::Plain(t) => entropy(&t[state]),
            AgentPolicy::Conditional(t) => t[state]
                .iter()
                .zip(&opponents[state])
                .map(|(row, w)| w * entropy(row))
                .sum(),
        }
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Uniform plain policy for `agent`.
pub fn uniform_policy(game: &TabularGame, agent: usize) -> StateTable {
    let n = game.action_counts()[agent];
    vec![vec![1.0 / n as f64; n]; game.state_count()]
}

/// Assembles the joint table of `agent`'s policy played against an opponent distribution.
pub fn assemble(game: &TabularGame, agent: usize, policy: &AgentPolicy, opponents: &OpponentTable) -> Result<StateTable> {
    policy.validate(game, agent)?;
    let ix = game.indexer();
    let opp_ix = ix.without(agent);
    check_table(opponents, game.state_count(), opp_ix.size(), "opponent distribution")?;
    Ok((0..game.state_count())
        .map(|s| {
            (0..ix.size())
                .map(|j| {
                    let (own, opp) = ix.split(agent, j);
                    policy.conditional(s, opp)[own] * opponents[s][opp]
                })
                .collect()
        })
        .collect())
}

/// Product of per-agent plain tables, as a distribution over opponents of `agent`.
pub fn product_opponents(game: &TabularGame, agent: usize, tables: &[StateTable]) -> OpponentTable {
    let opp_ix = game.indexer().without(agent);
    let others: Vec<usize> = (0..game.agent_count()).filter(|&j| j != agent).collect();
    (0..game.state_count())
        .map(|s| {
            (0..opp_ix.size())
                .map(|o| {
                    opp_ix
                        .actions(o)
                        .iter()
                        .zip(&others)
                        .map(|(&a, &j)| tables[j][s][a])
                        .product()
                })
                .collect()
        })
        .collect()
}

impl TabularJointPolicy {
    pub fn joint_table(&self, game: &TabularGame) -> Result<StateTable> {
        let ix = game.indexer();
        let table = match self {
            TabularJointPolicy::Product(tables) => {
                if tables.len() != game.agent_count() {
                    return Err(Error::InvalidPolicy(format!(
                        "{} agent tables for {} agents",
                        tables.len(),
                        game.agent_count()
                    )));
                }
                for (i, t) in tables.iter().enumerate() {
                    check_table(t, game.state_count(), game.action_counts()[i], "agent policy")?;
                }
                (0..game.state_count())
                    .map(|s| {
                        (0..ix.size())
                            .map(|j| {
                                ix.actions(j)
                                    .iter()
                                    .enumerate()
                                    .map(|(i, &a)| tables[i][s][a])
                                    .product()
                            })
                            .collect()
                    })
                    .collect()
            }
            TabularJointPolicy::Correlated {
                agent,
                conditional,
                opponents,
            } => assemble(game, *agent, &AgentPolicy::Conditional(conditional.clone()), opponents)?,
            TabularJointPolicy::Joint(t) => {
                check_table(t, game.state_count(), ix.size(), "joint policy")?;
                t.clone()
            }
        };
        for (s, row) in table.iter().enumerate() {
            check_dist(row, || format!("assembled joint policy at state {s}"))?;
        }
        Ok(table)
    }

    /// Marginal distribution over the opponents of `agent` at every state.
    pub fn opponents_of(&self, game: &TabularGame, agent: usize) -> Result<OpponentTable> {
        if let TabularJointPolicy::Product(tables) = self {
            return Ok(product_opponents(game, agent, tables));
        }
        let joint = self.joint_table(game)?;
        let ix = game.indexer();
        let opp = ix.without(agent).size();
        Ok(joint
            .iter()
            .map(|row| {
                let mut m = vec![0.0; opp];
                for (j, p) in row.iter().enumerate() {
                    m[ix.split(agent, j).1] += p;
                }
                m
            })
            .collect())
    }

    /// Marginal π^(i)(a|s) of one agent.
    pub fn agent_marginal(&self, game: &TabularGame, agent: usize) -> Result<StateTable> {
        let joint = self.joint_table(game)?;
        let ix = game.indexer();
        let n = game.action_counts()[agent];
        Ok(joint
            .iter()
            .map(|row| {
                let mut m = vec![0.0; n];
                for (j, p) in row.iter().enumerate() {
                    m[ix.split(agent, j).0] += p;
                }
                m
            })
            .collect())
    }
}

/// ρ_π(s, a): the unnormalized discounted occupancy of a joint policy.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTable {
    pub discount: f64,
    /// `[state][joint]`
    pub rho: StateTable,
}

impl OccupancyTable {
    pub fn total(&self) -> f64 {
        self.rho.iter().flatten().sum()
    }

    /// |(1 - γ) Σ ρ - 1|
    pub fn normalization_error(&self) -> f64 {
        ((1.0 - self.discount) * self.total() - 1.0).abs()
    }

    /// Σ_{s,a} ρ(s,a) f(s,a)
    pub fn expectation(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        self.rho
            .iter()
            .enumerate()
            .flat_map(|(s, row)| row.iter().enumerate().map(move |(j, &p)| (s, j, p)))
            .map(|(s, j, p)| if p == 0.0 { 0.0 } else { p * f(s, j) })
            .sum()
    }

    /// Discounted state visitation Σ_a ρ(s, a).
    pub fn state_visitation(&self) -> Vec<f64> {
        self.rho.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn max_abs_diff(&self, other: &OccupancyTable) -> f64 {
        self.rho
            .iter()
            .flatten()
            .zip(other.rho.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// State-to-state kernel under a joint table, with absorbing successors removed.
fn induced_kernel(game: &TabularGame, joint: &StateTable) -> DMatrix<f64> {
    let n = game.state_count();
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for (j, &p) in joint[s].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (s2, &q) in game.transition_row(s, j).iter().enumerate() {
                if !game.absorbing(s2) {
                    m[(s, s2)] += p * q;
                }
            }
        }
    }
    m
}

fn solve(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    a.lu().solve(&b).ok_or_else(|| Error::Singular(what.to_string()))
}

/// d(s) = Σ_t γ^t P(s_t = s) under a joint table.
pub fn discounted_visitation(game: &TabularGame, joint: &StateTable) -> Result<Vec<f64>> {
    let n = game.state_count();
    let gamma = game.discount();
    let m = induced_kernel(game, joint);
    let a = DMatrix::identity(n, n) - m.transpose() * gamma;
    let b = DVector::from_column_slice(game.initial_distribution());
    Ok(solve(a, b, "state visitation system")?.iter().copied().collect())
}

pub fn exact_occupancy(game: &TabularGame, policy: &TabularJointPolicy) -> Result<OccupancyTable> {
    occupancy_of_table(game, &policy.joint_table(game)?)
}

pub fn occupancy_of_table(game: &TabularGame, joint: &StateTable) -> Result<OccupancyTable> {
    let d = discounted_visitation(game, joint)?;
    let rho = joint
        .iter()
        .zip(&d)
        .map(|(row, &ds)| row.iter().map(|p| p * ds).collect())
        .collect();
    Ok(OccupancyTable {
        discount: game.discount(),
        rho,
    })
}

/// v^(i)(s) for every state under a joint table.
pub fn values_of_table(game: &TabularGame, joint: &StateTable, agent: usize) -> Result<Vec<f64>> {
    let n = game.state_count();
    let gamma = game.discount();
    let m = induced_kernel(game, joint);
    let r = DVector::from_iterator(
        n,
        (0..n).map(|s| {
            joint[s]
                .iter()
                .enumerate()
                .map(|(j, p)| p * game.reward(s, j, agent))
                .sum::<f64>()
        }),
    );
    let a = DMatrix::identity(n, n) - m * gamma;
    Ok(solve(a, r, "policy evaluation system")?.iter().copied().collect())
}

pub fn exact_values(game: &TabularGame, policy: &TabularJointPolicy, agent: usize) -> Result<Vec<f64>> {
    values_of_table(game, &policy.joint_table(game)?, agent)
}

/// v^(i)(s, π^(i), π^(-i)).
pub fn exact_value(
    game: &TabularGame,
    state: usize,
    agent: usize,
    policy: &AgentPolicy,
    opponents: &OpponentTable,
) -> Result<f64> {
    let joint = assemble(game, agent, policy, opponents)?;
    Ok(values_of_table(game, &joint, agent)?[state])
}

pub fn initial_value(game: &TabularGame, values: &[f64]) -> f64 {
    game.initial_distribution().iter().zip(values).map(|(p, v)| p * v).sum()
}

#[derive(Clone, Debug)]
pub struct BestResponse {
    pub values: Vec<f64>,
    /// A greedy deterministic best response.
    pub actions: Vec<usize>,
    pub initial_value: f64,
    pub sweeps: usize,
}

/// Expected reward and successor distribution of `agent` taking `own` at `s`
/// against a fixed opponent distribution.
fn induced_q(game: &TabularGame, agent: usize, opponents: &OpponentTable, values: &[f64], s: usize, own: usize) -> f64 {
    let ix = game.indexer();
    let gamma = game.discount();
    opponents[s]
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(o, &w)| {
            let j = ix.merge(agent, own, o);
            let cont: f64 = game
                .transition_row(s, j)
                .iter()
                .enumerate()
                .filter(|&(s2, _)| !game.absorbing(s2))
                .map(|(s2, q)| q * values[s2])
                .sum();
            w * (game.reward(s, j, agent) + gamma * cont)
        })
        .sum()
}

/// max over π^(i) of v^(i) against fixed opponents, by value iteration on the
/// induced single-agent MDP.
pub fn best_response(game: &TabularGame, agent: usize, opponents: &OpponentTable) -> Result<BestResponse> {
    let opp = game.indexer().without(agent).size();
    check_table(opponents, game.state_count(), opp, "opponent distribution")?;
    let n = game.state_count();
    let acts = game.action_counts()[agent];
    let mut v = vec![0.0; n];
    for sweep in 1..=MAX_SWEEPS {
        let mut residual: f64 = 0.0;
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..acts)
                    .map(|a| induced_q(game, agent, opponents, &v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for (a, b) in next.iter().zip(&v) {
            residual = residual.max((a - b).abs());
        }
        v = next;
        if residual < BELLMAN_TOLERANCE {
            let actions = (0..n)
                .map(|s| {
                    (0..acts)
                        .map(|a| (a, induced_q(game, agent, opponents, &v, s, a)))
                        .fold((0, f64::NEG_INFINITY), |best, x| if x.1 > best.1 { x } else { best })
                        .0
                })
                .collect();
            let initial_value = initial_value(game, &v);
            return Ok(BestResponse {
                values: v,
                actions,
                initial_value,
                sweeps: sweep,
            });
        }
    }
    let residual = {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..acts)
                    .map(|a| induced_q(game, agent, opponents, &v, s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    Err(Error::NonConvergence {
        iterations: MAX_SWEEPS,
        residual,
    })
}

pub fn best_response_value(game: &TabularGame, agent: usize, opponents: &OpponentTable) -> Result<f64> {
    Ok(best_response(game, agent, opponents)?.initial_value)
}

/// The entropy-regularized best response: argmax over π^(i) of
/// v^(i)(π^(i), opponents) + λ H_γ(π^(i)), by soft value iteration.
pub fn soft_best_response(game: &TabularGame, agent: usize, opponents: &OpponentTable, lambda: f64) -> Result<StateTable> {
    if lambda <= 0.0 {
        return Err(Error::Config(format!("soft best response needs λ > 0, got {lambda}")));
    }
    let opp = game.indexer().without(agent).size();
    check_table(opponents, game.state_count(), opp, "opponent distribution")?;
    let n = game.state_count();
    let acts = game.action_counts()[agent];
    let mut v = vec![0.0; n];
    let soft = |q: &[f64]| {
        let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + lambda * q.iter().map(|x| ((x - m) / lambda).exp()).sum::<f64>().ln()
    };
    for _ in 0..MAX_SWEEPS {
        let next: Vec<f64> = (0..n)
            .map(|s| {
                let q: Vec<f64> = (0..acts).map(|a| induced_q(game, agent, opponents, &v, s, a)).collect();
                soft(&q)
            })
            .collect();
        let residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if residual < BELLMAN_TOLERANCE {
            return Ok((0..n)
                .map(|s| {
                    let q: Vec<f64> = (0..acts).map(|a| induced_q(game, agent, opponents, &v, s, a)).collect();
                    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = q.iter().map(|x| ((x - m) / lambda).exp()).collect();
                    let z: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / z).collect()
                })
                .collect());
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_SWEEPS,
        residual: f64::NAN,
    })
}

/// Which states the ε-NE inequality is checked at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NeScope {
    /// Values averaged under the initial distribution.
    #[default]
    Initial,
    /// The largest gap over every state.
    AllStates,
}

/// gap_i = best-response value − profile value for each agent.
///
/// Opponents are held at their marginal under the profile.
pub fn epsilon_ne_gap(game: &TabularGame, policy: &TabularJointPolicy) -> Result<Vec<f64>> {
    epsilon_ne_gap_scoped(game, policy, NeScope::Initial)
}

pub fn epsilon_ne_gap_scoped(game: &TabularGame, policy: &TabularJointPolicy, scope: NeScope) -> Result<Vec<f64>> {
    let joint = policy.joint_table(game)?;
    (0..game.agent_count())
        .map(|i| {
            let opponents = policy.opponents_of(game, i)?;
            let br = best_response(game, i, &opponents)?;
            let v = values_of_table(game, &joint, i)?;
            Ok(match scope {
                NeScope::Initial => br.initial_value - initial_value(game, &v),
                NeScope::AllStates => br
                    .values
                    .iter()
                    .zip(&v)
                    .map(|(b, x)| b - x)
                    .fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect()
}

/// γ-discounted entropy Σ_s d(s) H(π^(i)(·|s)), with d the discounted visitation
/// of the policy played against `opponents`.
pub fn discounted_entropy(game: &TabularGame, agent: usize, policy: &AgentPolicy, opponents: &OpponentTable) -> Result<f64> {
    let joint = assemble(game, agent, policy, opponents)?;
    let d = discounted_visitation(game, &joint)?;
    Ok(d.iter()
        .enumerate()
        .map(|(s, ds)| ds * policy.state_entropy(s, opponents))
        .sum())
}

/// ε = λ · max over candidates of |H(π^(i)) − H(π_E^(i))|.
pub fn entropy_bound_epsilon(
    game: &TabularGame,
    agent: usize,
    candidates: &[AgentPolicy],
    demonstrator: &AgentPolicy,
    opponents: &OpponentTable,
    lambda: f64,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("entropy bound needs at least one candidate policy"));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("λ must be non-negative, got {lambda}")));
    }
    let h_demo = discounted_entropy(game, agent, demonstrator, opponents)?;
    let mut worst: f64 = 0.0;
    for c in candidates {
        worst = worst.max((discounted_entropy(game, agent, c, opponents)? - h_demo).abs());
    }
    Ok(lambda * worst)
}

/// Both sides of the importance-sampling identity
/// E_{π^(i), π^(-i)}[f] = E_{π^(i), μ}[α f], α = ρ_{π^(i),π^(-i)} / ρ_{π^(i),μ}.
pub fn importance_identity_check(
    game: &TabularGame,
    agent: usize,
    policy: &AgentPolicy,
    opponents: &OpponentTable,
    mu: &OpponentTable,
    f: impl Fn(usize, usize) -> f64,
) -> Result<(f64, f64)> {
    let target = occupancy_of_table(game, &assemble(game, agent, policy, opponents)?)?;
    let proposal = occupancy_of_table(game, &assemble(game, agent, policy, mu)?)?;
    let ix = game.indexer();
    let lhs = target.expectation(&f);
    let mut rhs = 0.0;
    for s in 0..game.state_count() {
        for j in 0..ix.size() {
            let p = target.rho[s][j];
            let q = proposal.rho[s][j];
            if p > 0.0 && q <= 0.0 {
                return Err(Error::SupportViolation {
                    state: s,
                    joint_action: ix.actions(j),
                    reason: "μ assigns zero occupancy where the opponent policy does not".into(),
                });
            }
            if q > 0.0 {
                let alpha = p / q;
                rhs += q * alpha * f(s, j);
            }
        }
    }
    Ok((lhs, rhs))
}

/// Total-variation distance between two distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Every deterministic policy of an agent, as plain tables.
pub fn deterministic_policies(game: &TabularGame, agent: usize) -> Vec<StateTable> {
    let n = game.state_count();
    let acts = game.action_counts()[agent];
    let ix = JointIndexer::new(&vec![acts; n]);
    (0..ix.size())
        .map(|k| {
            ix.actions(k)
                .into_iter()
                .map(|a| {
                    let mut row = vec![0.0; acts];
                    row[a] = 1.0;
                    row
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{discounted_return, rollout, Policy};
    use crate::rng;
    use crate::tabular::TabularGame;

    fn uniform_product(game: &TabularGame) -> TabularJointPolicy {
        TabularJointPolicy::Product((0..game.agent_count()).map(|i| uniform_policy(game, i)).collect())
    }

    fn random_table(rows: usize, width: usize, r: &mut rng::StreamRng) -> StateTable {
        use rand::Rng;
        (0..rows)
            .map(|_| {
                let w: Vec<f64> = (0..width).map(|_| r.random::<f64>() + 0.05).collect();
                let z: f64 = w.iter().sum();
                w.into_iter().map(|x| x / z).collect()
            })
            .collect()
    }

    /// Plays a tabular policy table from one-hot observations.
    struct TablePolicy(StateTable);

    impl Policy for TablePolicy {
        fn act(&self, _agent: usize, obs: &[f64], r: &mut rng::StreamRng) -> Result<crate::game::Choice> {
            use rand::Rng;
            let s = obs.iter().position(|&x| x == 1.0).unwrap();
            let u: f64 = r.random();
            let mut acc = 0.0;
            for (a, p) in self.0[s].iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(crate::game::Choice::plain(a));
                }
            }
            Ok(crate::game::Choice::plain(self.0[s].len() - 1))
        }
    }

    #[test]
    fn single_state_uniform_occupancy_by_geometric_series() {
        let g = TabularGame::repeated("one", vec![2, 2], 0.9, 50, vec![vec![0.0, 0.0]; 4]).unwrap();
        let occ = exact_occupancy(&g, &uniform_product(&g)).unwrap();
        for &x in &occ.rho[0] {
            assert!((x - 2.5).abs() < 1e-12);
        }
        assert!(occ.normalization_error() < 1e-12);
    }

    #[test]
    fn zero_discount_collapses_to_initial_times_policy() {
        let mut r = rng::seeded(4);
        let g = TabularGame::random(3, vec![2, 3], 0.5, &mut r).unwrap().with_discount(0.0).unwrap();
        let p = TabularJointPolicy::Product(vec![random_table(3, 2, &mut r), random_table(3, 3, &mut r)]);
        let joint = p.joint_table(&g).unwrap();
        let occ = exact_occupancy(&g, &p).unwrap();
        for s in 0..3 {
            for j in 0..6 {
                assert!((occ.rho[s][j] - g.initial_distribution()[s] * joint[s][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn occupancy_matches_monte_carlo() {
        let mut r = rng::seeded(21);
        let g = TabularGame::random(3, vec![2, 2], 0.5, &mut r)
            .unwrap()
            .with_horizon(40)
            .unwrap();
        let t0 = random_table(3, 2, &mut r);
        let t1 = random_table(3, 2, &mut r);
        let occ = exact_occupancy(&g, &TabularJointPolicy::Product(vec![t0.clone(), t1.clone()])).unwrap();
        let (p0, p1) = (TablePolicy(t0), TablePolicy(t1));
        let episodes = 100_000;
        let batch = rollout(&g, &[&p0, &p1], episodes, 5).unwrap();
        let ix = g.indexer();
        let mut mc = vec![vec![0.0; 4]; 3];
        for ep in &batch.episodes {
            let mut w = 1.0;
            for st in &ep.steps {
                mc[st.state[0] as usize][ix.index(&st.actions)] += w;
                w *= 0.5;
            }
        }
        for s in 0..3 {
            for j in 0..4 {
                let est = mc[s][j] / episodes as f64;
                // 1% of the total occupancy mass 1/(1-γ).
                assert!((1.0 - 0.5) * (est - occ.rho[s][j]).abs() < 0.01, "({s},{j}) {est} vs {}", occ.rho[s][j]);
            }
        }
    }

    #[test]
    fn value_of_constant_reward_is_geometric() {
        let g = TabularGame::repeated("c", vec![2, 2], 0.8, 50, vec![vec![3.0, -1.0]; 4]).unwrap();
        let v = exact_values(&g, &uniform_product(&g), 0).unwrap();
        assert!((v[0] - 3.0 / 0.2).abs() < 1e-10);
        let v1 = exact_values(&g, &uniform_product(&g), 1).unwrap();
        assert!((v1[0] + 1.0 / 0.2).abs() < 1e-10);
        let zero = TabularGame::repeated("z", vec![2, 2], 0.8, 50, vec![vec![0.0, 0.0]; 4]).unwrap();
        assert_eq!(exact_values(&zero, &uniform_product(&zero), 0).unwrap()[0], 0.0);
    }

    #[test]
    fn value_matches_monte_carlo_within_three_standard_errors() {
        let mut r = rng::seeded(8);
        let g = TabularGame::random(4, vec![2, 2], 0.6, &mut r)
            .unwrap()
            .with_horizon(60)
            .unwrap();
        let t0 = random_table(4, 2, &mut r);
        let t1 = random_table(4, 2, &mut r);
        let policy = TabularJointPolicy::Product(vec![t0.clone(), t1.clone()]);
        let exact = initial_value(&g, &exact_values(&g, &policy, 0).unwrap());
        let (p0, p1) = (TablePolicy(t0), TablePolicy(t1));
        let n = 100_000;
        let batch = rollout(&g, &[&p0, &p1], n, 17).unwrap();
        let returns: Vec<f64> = batch.episodes.iter().map(|e| discounted_return(e, 0, 0.6).unwrap()).collect();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        // Truncation at 60 steps leaves at most 0.6^60 / 0.4 of bias.
        assert!((mean - exact).abs() <= 3.0 * se + 1e-12, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn correlated_and_product_forms_agree() {
        let mut r = rng::seeded(9);
        let g = TabularGame::random(3, vec![2, 3], 0.9, &mut r).unwrap();
        let t0 = random_table(3, 2, &mut r);
        let t1 = random_table(3, 3, &mut r);
        let product = TabularJointPolicy::Product(vec![t0.clone(), t1.clone()]);
        // Agent 0's conditional ignores the opponent action.
        let conditional: Vec<Vec<Vec<f64>>> = t0.iter().map(|row| vec![row.clone(); 3]).collect();
        let correlated = TabularJointPolicy::Correlated {
            agent: 0,
            conditional,
            opponents: t1,
        };
        let a = exact_occupancy(&g, &product).unwrap();
        let b = exact_occupancy(&g, &correlated).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn best_response_ignoring_opponents_is_single_agent_optimum() {
        // Rewards depend only on agent 0's action: 1 for action 1, 0 otherwise.
        let rewards = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let g = TabularGame::repeated("solo", vec![2, 2], 0.9, 50, rewards).unwrap();
        for q in [0.0, 0.3, 1.0] {
            let opp = vec![vec![q, 1.0 - q]];
            let br = best_response(&g, 0, &opp).unwrap();
            assert!((br.initial_value - 10.0).abs() < 1e-8);
            assert_eq!(br.actions, vec![1]);
        }
    }

    #[test]
    fn matching_pennies_best_response_and_equilibrium() {
        // Agent 0 wins (+1) on match, agent 1 wins on mismatch.
        let rewards = vec![vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0]];
        let g = TabularGame::repeated("pennies", vec![2, 2], 0.9, 50, rewards).unwrap();
        // Against an opponent playing heads w.p. 0.7, matching heads earns 0.4 per step.
        let br = best_response_value(&g, 0, &vec![vec![0.7, 0.3]]).unwrap();
        assert!((br - 0.4 / 0.1).abs() < 1e-8);
        let gaps = epsilon_ne_gap(&g, &uniform_product(&g)).unwrap();
        assert!(gaps.iter().all(|&x| x.abs() <= 1e-8), "{gaps:?}");
    }

    #[test]
    fn unilateral_deviation_gap_equals_value_loss() {
        let rewards = vec![vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, 1.0], vec![1.0, -1.0]];
        let g = TabularGame::repeated("pennies", vec![2, 2], 0.9, 50, rewards).unwrap();
        // Opponent plays 0.7 heads; agent 0 deviates to always-tails.
        let profile = TabularJointPolicy::Product(vec![vec![vec![0.0, 1.0]], vec![vec![0.7, 0.3]]]);
        let gaps = epsilon_ne_gap(&g, &profile).unwrap();
        let v = initial_value(&g, &exact_values(&g, &profile, 0).unwrap());
        // Always-tails against 0.7 heads earns -0.4 per step; the best response earns +0.4.
        assert!((v + 4.0).abs() < 1e-9);
        assert!((gaps[0] - (4.0 - v)).abs() < 1e-8);
    }

    #[test]
    fn common_payoff_optimum_has_zero_gap() {
        let rewards = vec![vec![2.0, 2.0], vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]];
        let g = TabularGame::repeated("coord", vec![2, 2], 0.9, 50, rewards).unwrap();
        let profile = TabularJointPolicy::Product(vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]]);
        let gaps = epsilon_ne_gap(&g, &profile).unwrap();
        assert!(gaps.iter().all(|x| x.abs() < 1e-8));
        let all = epsilon_ne_gap_scoped(&g, &profile, NeScope::AllStates).unwrap();
        assert!(all.iter().all(|x| x.abs() < 1e-8));
    }

    #[test]
    fn entropy_bound_cases() {
        let g = TabularGame::repeated("z", vec![2, 2], 0.9, 50, vec![vec![0.0, 0.0]; 4]).unwrap();
        let opp = vec![vec![0.5, 0.5]];
        let demo = AgentPolicy::Plain(vec![vec![0.9, 0.1]]);
        let other = AgentPolicy::Plain(vec![vec![0.5, 0.5]]);
        assert_eq!(entropy_bound_epsilon(&g, 0, &[other.clone()], &demo, &opp, 0.0).unwrap(), 0.0);
        assert_eq!(entropy_bound_epsilon(&g, 0, &[demo.clone()], &demo, &opp, 0.3).unwrap(), 0.0);
        let bern = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
        let expected = 0.3 * (bern(0.5) - bern(0.9)).abs() / 0.1;
        let got = entropy_bound_epsilon(&g, 0, &[other], &demo, &opp, 0.3).unwrap();
        assert!((got - expected).abs() < 1e-10);
        assert!(matches!(entropy_bound_epsilon(&g, 0, &[], &demo, &opp, 0.3), Err(Error::Empty(_))));
    }

    #[test]
    fn importance_identity_basic_cases() {
        let mut r = rng::seeded(31);
        let g = TabularGame::random(3, vec![2, 2], 0.8, &mut r).unwrap();
        let pi = AgentPolicy::Plain(random_table(3, 2, &mut r));
        let opp = random_table(3, 2, &mut r);
        let f = |s: usize, j: usize| (s as f64 + 1.0) * (j as f64 - 1.5);
        let (l, rr) = importance_identity_check(&g, 0, &pi, &opp, &opp, f).unwrap();
        assert!((l - rr).abs() < 1e-12);
        let mu = random_table(3, 2, &mut r);
        let (l, rr) = importance_identity_check(&g, 0, &pi, &opp, &mu, f).unwrap();
        assert!((l - rr).abs() <= 1e-8);
        let (l, rr) = importance_identity_check(&g, 0, &pi, &opp, &mu, |_, _| 0.0).unwrap();
        assert_eq!((l, rr), (0.0, 0.0));
    }

    #[test]
    fn importance_identity_reports_support_violation() {
        let g = TabularGame::repeated("one", vec![2, 2], 0.5, 50, vec![vec![1.0, 1.0]; 4]).unwrap();
        let pi = AgentPolicy::Plain(vec![vec![0.5, 0.5]]);
        let opp = vec![vec![0.5, 0.5]];
        let mu = vec![vec![1.0, 0.0]];
        let err = importance_identity_check(&g, 0, &pi, &opp, &mu, |_, _| 1.0).unwrap_err();
        assert!(matches!(err, Error::SupportViolation { state: 0, .. }));
    }

    #[test]
    fn soft_best_response_beats_every_candidate_in_regularized_value() {
        let mut r = rng::seeded(2);
        let g = TabularGame::random(2, vec![2, 2], 0.8, &mut r).unwrap();
        let opp = random_table(2, 2, &mut r);
        let lambda = 0.2;
        let soft = AgentPolicy::Plain(soft_best_response(&g, 0, &opp, lambda).unwrap());
        let objective = |p: &AgentPolicy| {
            let v = initial_value(&g, &values_of_table(&g, &assemble(&g, 0, p, &opp).unwrap(), 0).unwrap());
            v + lambda * discounted_entropy(&g, 0, p, &opp).unwrap()
        };
        let best = objective(&soft);
        for det in deterministic_policies(&g, 0) {
            assert!(objective(&AgentPolicy::Plain(det)) <= best + 1e-9);
        }
        for _ in 0..20 {
            assert!(objective(&AgentPolicy::Plain(random_table(2, 2, &mut r))) <= best + 1e-9);
        }
    }
}
