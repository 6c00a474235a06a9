//! Finite Markov games given by explicit tables.
//!
//! Joint actions are indexed row-major: agent 0 is the most significant digit.
//! The opponent joint action a^(-i) of agent `i` uses the same convention over
//! the remaining agents in ascending order.
//!
//! # Text format
//!
//! ```text
//! # comments start with '#'
//! name      coordination
//! agents    2
//! states    2
//! actions   2 2
//! discount  0.9
//! horizon   50
//! initial   1 0
//! # transition <state> <a_1> .. <a_N> : <p(s'=0)> .. <p(s'=S-1)>
//! transition 0 * * : 0.5 0.5
//! transition 1 0 0 : 0 1
//! # reward <state> <a_1> .. <a_N> : <r_1> .. <r_N>
//! reward 0 1 1 : 1 1
//! absorbing 1
//! ```
//!
//! `*` matches every action of that agent. Later lines override earlier ones.
//! Every (state, joint action) needs a transition row; rewards default to zero.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::game::MarkovGame;
use crate::rng::StreamRng;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularGame {
    name: String,
    states: usize,
    actions: Vec<usize>,
    discount: f64,
    horizon: usize,
    initial: Vec<f64>,
    /// `[state][joint][next_state]`
    transition: Vec<Vec<Vec<f64>>>,
    /// `[state][joint][agent]`
    rewards: Vec<Vec<Vec<f64>>>,
    absorbing: Vec<bool>,
}

/// Converts between per-agent action tuples and flat joint indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointIndexer {
    counts: Vec<usize>,
}

impl JointIndexer {
    pub fn new(counts: &[usize]) -> Self {
        JointIndexer {
            counts: counts.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn index(&self, actions: &[usize]) -> usize {
        actions
            .iter()
            .zip(&self.counts)
            .fold(0, |acc, (&a, &n)| acc * n + a)
    }

    pub fn actions(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.counts.len()];
        for (slot, &n) in out.iter_mut().zip(&self.counts).rev() {
            *slot = index % n;
            index /= n;
        }
        out
    }

    /// Indexer over the opponents of `agent`.
    pub fn without(&self, agent: usize) -> JointIndexer {
        let counts = self
            .counts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != agent)
            .map(|(_, &n)| n)
            .collect();
        JointIndexer { counts }
    }

    /// Splits a joint index into (own action, opponent joint index) for `agent`.
    pub fn split(&self, agent: usize, joint: usize) -> (usize, usize) {
        let actions = self.actions(joint);
        let own = actions[agent];
        let rest: Vec<usize> = actions
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != agent)
            .map(|(_, &a)| a)
            .collect();
        (own, self.without(agent).index(&rest))
    }

    /// Inverse of [`JointIndexer::split`].
    pub fn merge(&self, agent: usize, own: usize, opponents: usize) -> usize {
        let mut rest = self.without(agent).actions(opponents).into_iter();
        let actions: Vec<usize> = (0..self.counts.len())
            .map(|j| if j == agent { own } else { rest.next().unwrap() })
            .collect();
        self.index(&actions)
    }
}

impl TabularGame {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        actions: Vec<usize>,
        discount: f64,
        horizon: usize,
        initial: Vec<f64>,
        transition: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<Vec<f64>>>,
        absorbing: Vec<bool>,
    ) -> Result<Self> {
        let game = TabularGame {
            name: name.into(),
            states: initial.len(),
            actions,
            discount,
            horizon,
            initial,
            transition,
            rewards,
            absorbing,
        };
        game.validate()?;
        Ok(game)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGame(m));
        if self.actions.len() < 2 {
            return bad(format!("need at least 2 agents, got {}", self.actions.len()));
        }
        if self.actions.contains(&0) {
            return bad("every agent needs at least one action".into());
        }
        if self.states == 0 {
            return bad("no states".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} outside [0, 1)", self.discount));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        check_distribution(&self.initial, "initial distribution")?;
        let joints = self.joint_count();
        if self.transition.len() != self.states
            || self.rewards.len() != self.states
            || self.absorbing.len() != self.states
        {
            return bad("table sizes do not match the state count".into());
        }
        for s in 0..self.states {
            if self.transition[s].len() != joints || self.rewards[s].len() != joints {
                return bad(format!("state {s}: expected {joints} joint-action rows"));
            }
            for j in 0..joints {
                if self.transition[s][j].len() != self.states {
                    return bad(format!("state {s}, joint {j}: transition row has wrong width"));
                }
                check_distribution(&self.transition[s][j], &format!("transition row ({s}, {j})"))?;
                let r = &self.rewards[s][j];
                if r.len() != self.actions.len() {
                    return bad(format!("state {s}, joint {j}: reward row has wrong width"));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("reward at state {s}, joint {j}")));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_count(&self) -> usize {
        self.states
    }

    pub fn joint_count(&self) -> usize {
        self.actions.iter().product()
    }

    pub fn indexer(&self) -> JointIndexer {
        JointIndexer::new(&self.actions)
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition_row(&self, state: usize, joint: usize) -> &[f64] {
        &self.transition[state][joint]
    }

    pub fn reward(&self, state: usize, joint: usize, agent: usize) -> f64 {
        self.rewards[state][joint][agent]
    }

    pub fn absorbing(&self, state: usize) -> bool {
        self.absorbing[state]
    }

    /// Largest |r| over the tables divided by (1 - γ): the scale of any value.
    pub fn value_scale(&self) -> f64 {
        let rmax = self
            .rewards
            .iter()
            .flatten()
            .flatten()
            .fold(0.0_f64, |m, r| m.max(r.abs()));
        rmax / (1.0 - self.discount)
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        self.discount = discount;
        self.validate()?;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        self.horizon = horizon;
        self.validate()?;
        Ok(self)
    }

    /// A single-state repeated game given by per-joint-action reward rows.
    pub fn repeated(
        name: impl Into<String>,
        actions: Vec<usize>,
        discount: f64,
        horizon: usize,
        rewards: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let joints = rewards.len();
        TabularGame::new(
            name,
            actions,
            discount,
            horizon,
            vec![1.0],
            vec![vec![vec![1.0]; joints]],
            vec![rewards],
            vec![false],
        )
    }

    /// A random game with Dirichlet(1)-like rows and rewards uniform in [-1, 1].
    pub fn random(states: usize, actions: Vec<usize>, discount: f64, rng: &mut StreamRng) -> Result<Self> {
        let joints: usize = actions.iter().product();
        let n = actions.len();
        let mut simplex = |k: usize| -> Vec<f64> {
            let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|x| x / total).collect()
        };
        let initial = simplex(states);
        let transition = (0..states)
            .map(|_| (0..joints).map(|_| simplex(states)).collect())
            .collect();
        let rewards = (0..states)
            .map(|_| {
                (0..joints)
                    .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        TabularGame::new(
            format!("random-{states}x{joints}"),
            actions,
            discount,
            50,
            initial,
            transition,
            rewards,
            vec![false; states],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse_game(text)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidGame(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidGame(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

fn sample_categorical(p: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave u above the final partial sum; fall back to the last
    // entry with mass.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

impl MarkovGame for TabularGame {
    type State = usize;

    fn scenario_id(&self) -> String {
        format!("tabular:{}", self.name)
    }

    fn action_counts(&self) -> &[usize] {
        &self.actions
    }

    fn discount(&self) -> f64 {
        self.discount
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn initial_state(&self, rng: &mut StreamRng) -> usize {
        sample_categorical(&self.initial, rng)
    }

    fn rewards(&self, state: &usize, joint: &[usize]) -> Vec<f64> {
        self.rewards[*state][self.indexer().index(joint)].clone()
    }

    fn sample_next(&self, state: &usize, joint: &[usize], rng: &mut StreamRng) -> usize {
        sample_categorical(&self.transition[*state][self.indexer().index(joint)], rng)
    }

    fn is_absorbing(&self, state: &usize) -> bool {
        self.absorbing[*state]
    }

    fn observation_dim(&self, _agent: usize) -> usize {
        self.states
    }

    /// One-hot encoding of the state; every agent sees the full state.
    fn observe(&self, state: &usize, _agent: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.states];
        v[*state] = 1.0;
        v
    }

    fn encode_state(&self, state: &usize) -> Vec<f64> {
        vec![*state as f64]
    }

    fn decode_state(&self, encoded: &[f64]) -> Result<usize> {
        match encoded {
            [x] if x.fract() == 0.0 && *x >= 0.0 && (*x as usize) < self.states => Ok(*x as usize),
            _ => Err(Error::InvalidState(format!(
                "{encoded:?} is not a state index below {}",
                self.states
            ))),
        }
    }
}

fn parse_game(text: &str) -> Result<TabularGame> {
    let mut name = "unnamed".to_string();
    let mut agents: Option<usize> = None;
    let mut states: Option<usize> = None;
    let mut actions: Option<Vec<usize>> = None;
    let mut discount = 0.9;
    let mut horizon = 50;
    let mut initial: Option<Vec<f64>> = None;
    let mut transition: Option<Vec<Vec<Option<Vec<f64>>>>> = None;
    let mut rewards: Option<Vec<Vec<Vec<f64>>>> = None;
    let mut absorbing: Vec<usize> = Vec::new();

    let err = |line: usize, message: String| Error::Parse { line, message };

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let key = words.next().unwrap();
        let rest: Vec<&str> = words.collect();
        let nums = |rest: &[&str]| -> Result<Vec<f64>> {
            rest.iter()
                .map(|w| w.parse::<f64>().map_err(|e| err(line_no, format!("bad number {w:?}: {e}"))))
                .collect()
        };
        let ints = |rest: &[&str]| -> Result<Vec<usize>> {
            rest.iter()
                .map(|w| w.parse::<usize>().map_err(|e| err(line_no, format!("bad integer {w:?}: {e}"))))
                .collect()
        };
        let single_int = |rest: &[&str]| -> Result<usize> {
            match ints(rest)?.as_slice() {
                [x] => Ok(*x),
                _ => Err(err(line_no, format!("{key} takes exactly one integer"))),
            }
        };
        match key {
            "name" => name = rest.join(" "),
            "agents" => agents = Some(single_int(&rest)?),
            "states" => states = Some(single_int(&rest)?),
            "actions" => actions = Some(ints(&rest)?),
            "discount" => {
                discount = match nums(&rest)?.as_slice() {
                    [x] => *x,
                    _ => return Err(err(line_no, "discount takes one number".into())),
                }
            }
            "horizon" => horizon = single_int(&rest)?,
            "initial" => initial = Some(nums(&rest)?),
            "absorbing" => absorbing.extend(ints(&rest)?),
            "transition" | "reward" => {
                let (Some(n), Some(s_count), Some(acts)) = (agents, states, actions.as_ref()) else {
                    return Err(err(line_no, "declare agents, states and actions first".into()));
                };
                if acts.len() != n {
                    return Err(err(line_no, format!("actions lists {} agents, expected {n}", acts.len())));
                }
                let colon = rest
                    .iter()
                    .position(|w| *w == ":")
                    .ok_or_else(|| err(line_no, "missing ':'".into()))?;
                let (lhs, rhs) = (&rest[..colon], &rest[colon + 1..]);
                if lhs.len() != n + 1 {
                    return Err(err(line_no, format!("expected a state and {n} actions before ':'")));
                }
                let s: usize = lhs[0]
                    .parse()
                    .map_err(|e| err(line_no, format!("bad state {:?}: {e}", lhs[0])))?;
                if s >= s_count {
                    return Err(err(line_no, format!("state {s} out of range")));
                }
                let mut patterns = Vec::with_capacity(n);
                for (i, w) in lhs[1..].iter().enumerate() {
                    if *w == "*" {
                        patterns.push(None);
                    } else {
                        let a: usize = w.parse().map_err(|e| err(line_no, format!("bad action {w:?}: {e}")))?;
                        if a >= acts[i] {
                            return Err(err(line_no, format!("action {a} out of range for agent {i}")));
                        }
                        patterns.push(Some(a));
                    }
                }
                let values = nums(rhs)?;
                let indexer = JointIndexer::new(acts);
                let joints = indexer.size();
                let matching: Vec<usize> = (0..joints)
                    .filter(|&j| {
                        indexer
                            .actions(j)
                            .iter()
                            .zip(&patterns)
                            .all(|(a, p)| p.is_none_or(|p| p == *a))
                    })
                    .collect();
                if key == "transition" {
                    if values.len() != s_count {
                        return Err(err(line_no, format!("transition row needs {s_count} probabilities")));
                    }
                    let table = transition.get_or_insert_with(|| vec![vec![None; joints]; s_count]);
                    for j in matching {
                        table[s][j] = Some(values.clone());
                    }
                } else {
                    if values.len() != n {
                        return Err(err(line_no, format!("reward row needs {n} values")));
                    }
                    let table = rewards.get_or_insert_with(|| vec![vec![vec![0.0; n]; joints]; s_count]);
                    for j in matching {
                        table[s][j] = values.clone();
                    }
                }
            }
            other => return Err(err(line_no, format!("unknown key {other:?}"))),
        }
    }

    let n = agents.ok_or_else(|| err(0, "missing 'agents'".into()))?;
    let s_count = states.ok_or_else(|| err(0, "missing 'states'".into()))?;
    let acts = actions.ok_or_else(|| err(0, "missing 'actions'".into()))?;
    if acts.len() != n {
        return Err(err(0, format!("actions lists {} agents, expected {n}", acts.len())));
    }
    let joints: usize = acts.iter().product();
    let initial = initial.ok_or_else(|| err(0, "missing 'initial'".into()))?;
    if initial.len() != s_count {
        return Err(err(0, format!("initial distribution needs {s_count} entries")));
    }
    let transition = transition.ok_or_else(|| err(0, "missing transition rows".into()))?;
    let transition = transition
        .into_iter()
        .enumerate()
        .map(|(s, rows)| {
            rows.into_iter()
                .enumerate()
                .map(|(j, row)| {
                    row.ok_or_else(|| {
                        err(0, format!("no transition row for state {s}, joint action {:?}", JointIndexer::new(&acts).actions(j)))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rewards = rewards.unwrap_or_else(|| vec![vec![vec![0.0; n]; joints]; s_count]);
    let mut absorbing_flags = vec![false; s_count];
    for s in absorbing {
        if s >= s_count {
            return Err(err(0, format!("absorbing state {s} out of range")));
        }
        absorbing_flags[s] = true;
    }
    TabularGame::new(name, acts, discount, horizon, initial, transition, rewards, absorbing_flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{self, JointAction};
    use crate::rng;

    const TWO_STATE: &str = "
        name two-state
        agents 2
        states 2
        actions 2 2
        discount 0.9
        horizon 10
        initial 1 0
        transition 0 * * : 0.5 0.5
        transition 0 0 0 : 0 1   # (0,0) always moves to s1
        transition 1 * * : 0 1
        reward 0 0 0 : 1 2
    ";

    #[test]
    fn parses_text_description() {
        let g = TabularGame::parse(TWO_STATE).unwrap();
        assert_eq!(g.state_count(), 2);
        assert_eq!(g.action_counts(), &[2, 2]);
        assert_eq!(g.transition_row(0, 0), &[0.0, 1.0]);
        assert_eq!(g.transition_row(0, 3), &[0.5, 0.5]);
        assert_eq!(g.reward(0, 0, 1), 2.0);
        assert_eq!(g.reward(0, 1, 0), 0.0);
    }

    #[test]
    fn rejects_incomplete_or_invalid_tables() {
        let missing = "agents 2\nstates 1\nactions 2 2\ninitial 1\ntransition 0 0 * : 1\n";
        assert!(matches!(TabularGame::parse(missing), Err(Error::Parse { .. })));
        let bad_row = "agents 2\nstates 2\nactions 1 1\ninitial 1 0\ntransition 0 0 0 : 0.5 0.6\ntransition 1 0 0 : 0 1\n";
        assert!(matches!(TabularGame::parse(bad_row), Err(Error::InvalidGame(_))));
        let one_agent = "agents 1\nstates 1\nactions 2\ninitial 1\ntransition 0 * : 1\n";
        assert!(TabularGame::parse(one_agent).is_err());
        assert!(TabularGame::parse("agents 2\nbogus 1\n").is_err());
    }

    #[test]
    fn joint_indexer_round_trips() {
        let ix = JointIndexer::new(&[2, 3, 4]);
        for j in 0..ix.size() {
            assert_eq!(ix.index(&ix.actions(j)), j);
            for agent in 0..3 {
                let (own, opp) = ix.split(agent, j);
                assert_eq!(ix.merge(agent, own, opp), j);
            }
        }
        assert_eq!(ix.actions(5), vec![0, 1, 1]);
    }

    #[test]
    fn single_absorbing_state_step() {
        let g = TabularGame::repeated("one", vec![2, 2], 0.9, 5, vec![vec![1.0, 1.0]; 4]).unwrap();
        let mut r = rng::seeded(1);
        let ja = JointAction::new(g.action_counts(), vec![1, 0]).unwrap();
        let tr = game::step(&g, &0, &ja, 0, &mut r).unwrap();
        assert_eq!(tr.next_state, 0);
        assert_eq!(tr.rewards, vec![1.0, 1.0]);
        assert!(!tr.terminal);
    }

    #[test]
    fn deterministic_transition_always_lands() {
        let g = TabularGame::parse(TWO_STATE).unwrap();
        let mut r = rng::seeded(3);
        let ja = JointAction::new(g.action_counts(), vec![0, 0]).unwrap();
        for _ in 0..10_000 {
            assert_eq!(game::step(&g, &0, &ja, 0, &mut r).unwrap().next_state, 1);
        }
    }

    #[test]
    fn empirical_successors_match_within_three_standard_errors() {
        let mut r = rng::seeded(11);
        let g = TabularGame::random(3, vec![2, 2], 0.9, &mut r).unwrap();
        let samples = 20_000;
        for s in 0..3 {
            for j in 0..4 {
                let joint = g.indexer().actions(j);
                let mut counts = [0usize; 3];
                for _ in 0..samples {
                    counts[g.sample_next(&s, &joint, &mut r)] += 1;
                }
                for (s2, &c) in counts.iter().enumerate() {
                    let p = g.transition_row(s, j)[s2];
                    let se = (p * (1.0 - p) / samples as f64).sqrt();
                    let freq = c as f64 / samples as f64;
                    assert!((freq - p).abs() <= 3.0 * se + 1e-12, "cell ({s},{j},{s2}): {freq} vs {p}");
                }
            }
        }
    }

    #[test]
    fn invalid_action_is_rejected() {
        let g = TabularGame::parse(TWO_STATE).unwrap();
        let err = JointAction::new(g.action_counts(), vec![0, 2]).unwrap_err();
        assert!(matches!(err, Error::InvalidAction { agent: 1, action: 2, .. }));
    }

    #[test]
    fn state_encoding_round_trips() {
        let g = TabularGame::parse(TWO_STATE).unwrap();
        assert_eq!(g.decode_state(&g.encode_state(&1)).unwrap(), 1);
        assert!(g.decode_state(&[2.0]).is_err());
        assert!(g.decode_state(&[0.5]).is_err());
    }
}
