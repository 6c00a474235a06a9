//! Markov-game abstraction, trajectory recording and rollouts.
//!
//! Tabular games and particle-world scenarios both implement [`MarkovGame`].
//! Recorded interactions are stored as [`InteractionBatch`]es, which persist to
//! the line-delimited `codail-batch/1` format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

pub const BATCH_VERSION: &str = "codail-batch/1";

/// An N-agent Markov game with per-agent discrete action sets.
///
/// Implementations are immutable after construction and may be shared across
/// threads. States must round-trip exactly through [`MarkovGame::encode_state`]
/// and [`MarkovGame::decode_state`]; recorded batches rely on it.
pub trait MarkovGame: Sync {
    type State: Clone + Send;

    fn scenario_id(&self) -> String;
    fn action_counts(&self) -> &[usize];
    fn discount(&self) -> f64;
    fn horizon(&self) -> usize;

    fn initial_state(&self, rng: &mut StreamRng) -> Self::State;
    /// Per-agent rewards r^(i)(s, a).
    fn rewards(&self, state: &Self::State, joint: &[usize]) -> Vec<f64>;
    /// Samples s' ~ P(.|s, a).
    fn sample_next(&self, state: &Self::State, joint: &[usize], rng: &mut StreamRng) -> Self::State;
    fn is_absorbing(&self, _state: &Self::State) -> bool {
        false
    }

    fn observation_dim(&self, agent: usize) -> usize;
    fn observe(&self, state: &Self::State, agent: usize) -> Vec<f64>;

    fn encode_state(&self, state: &Self::State) -> Vec<f64>;
    fn decode_state(&self, encoded: &[f64]) -> Result<Self::State>;

    fn agent_count(&self) -> usize {
        self.action_counts().len()
    }
}

/// A validated joint action: one entry per agent, each inside its action set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointAction(Vec<usize>);

impl JointAction {
    pub fn new(action_counts: &[usize], actions: Vec<usize>) -> Result<Self> {
        validate_joint(action_counts, &actions, None)?;
        Ok(JointAction(actions))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

pub(crate) fn validate_joint(counts: &[usize], actions: &[usize], step: Option<usize>) -> Result<()> {
    if actions.len() != counts.len() {
        return Err(Error::JointActionLength {
            expected: counts.len(),
            got: actions.len(),
        });
    }
    for (agent, (&a, &n)) in actions.iter().zip(counts).enumerate() {
        if a >= n {
            return Err(Error::InvalidAction {
                agent,
                step,
                action: a,
                limit: n,
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Transition<S> {
    pub state: S,
    pub joint_action: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_state: S,
    pub terminal: bool,
}

/// Advances the game by one step.
///
/// `step_index` is the zero-based index of this step inside its episode and
/// decides whether the transition hits the horizon.
pub fn step<G: MarkovGame + ?Sized>(
    game: &G,
    state: &G::State,
    joint: &JointAction,
    step_index: usize,
    rng: &mut StreamRng,
) -> Result<Transition<G::State>> {
    validate_joint(game.action_counts(), joint.as_slice(), Some(step_index))?;
    step_unchecked(game, state, joint.as_slice(), step_index, rng)
}

fn step_unchecked<G: MarkovGame + ?Sized>(
    game: &G,
    state: &G::State,
    joint: &[usize],
    step_index: usize,
    rng: &mut StreamRng,
) -> Result<Transition<G::State>> {
    let rewards = game.rewards(state, joint);
    if rewards.len() != game.agent_count() {
        return Err(Error::Shape {
            context: "reward vector",
            expected: game.agent_count(),
            got: rewards.len(),
        });
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!(
            "reward of agent {i} in scenario {}",
            game.scenario_id()
        )));
    }
    let next_state = game.sample_next(state, joint, rng);
    let terminal = step_index + 1 >= game.horizon() || game.is_absorbing(&next_state);
    Ok(Transition {
        state: state.clone(),
        joint_action: joint.to_vec(),
        rewards,
        next_state,
        terminal,
    })
}

/// One recorded step: encoded state, joint action and per-agent rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(rename = "s")]
    pub state: Vec<f64>,
    #[serde(rename = "a")]
    pub actions: Vec<usize>,
    #[serde(rename = "r")]
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scenario: String,
    pub seed: u64,
    pub steps: Vec<Step>,
    /// State reached after the last step. Only known for in-memory rollouts.
    #[serde(skip)]
    pub final_state: Option<Vec<f64>>,
    /// True when the episode ended in an absorbing state rather than at the horizon.
    #[serde(skip)]
    pub absorbed: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionBatch {
    pub scenario: String,
    pub seed: u64,
    pub generator: String,
    pub episodes: Vec<Episode>,
}

#[derive(Serialize, Deserialize)]
struct BatchHeader {
    version: String,
    scenario: String,
    seed: u64,
    generator: String,
    episodes: usize,
}

impl InteractionBatch {
    pub fn agent_count(&self) -> Option<usize> {
        self.episodes
            .iter()
            .flat_map(|e| e.steps.first())
            .map(|s| s.actions.len())
            .next()
    }

    pub fn step_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }

    /// Checks the batch invariants against a game: episode lengths, agent counts
    /// and action ranges.
    pub fn validate<G: MarkovGame + ?Sized>(&self, game: &G) -> Result<()> {
        let n = game.agent_count();
        for (e, episode) in self.episodes.iter().enumerate() {
            if episode.len() > game.horizon() {
                return Err(Error::InvalidGame(format!(
                    "episode {e} has {} steps, horizon is {}",
                    episode.len(),
                    game.horizon()
                )));
            }
            for (t, step) in episode.steps.iter().enumerate() {
                validate_joint(game.action_counts(), &step.actions, Some(t))?;
                if step.rewards.len() != n {
                    return Err(Error::Shape {
                        context: "recorded reward vector",
                        expected: n,
                        got: step.rewards.len(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = BatchHeader {
            version: BATCH_VERSION.to_string(),
            scenario: self.scenario.clone(),
            seed: self.seed,
            generator: self.generator.clone(),
            episodes: self.episodes.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for episode in &self.episodes {
            serde_json::to_writer(&mut w, episode)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn from_reader<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty batch file".into(),
        })?;
        let first = first.map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let header: BatchHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad header: {e}"),
        })?;
        if header.version != BATCH_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported version tag {:?}", header.version),
            });
        }
        let mut episodes = Vec::with_capacity(header.episodes);
        for (i, line) in lines {
            let line = line.map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let episode: Episode = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            episodes.push(episode);
        }
        if episodes.len() != header.episodes {
            return Err(Error::Parse {
                line: episodes.len() + 2,
                message: format!(
                    "header announces {} episodes, found {}",
                    header.episodes,
                    episodes.len()
                ),
            });
        }
        Ok(InteractionBatch {
            scenario: header.scenario,
            seed: header.seed,
            generator: header.generator,
            episodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.to_writer(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

/// What a decision maker returns for one agent at one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Choice {
    pub action: usize,
    /// Opponent actions the agent imagined (sampled from its opponent model) and
    /// conditioned on, if it uses a correlated policy.
    pub opponent_guess: Option<Vec<usize>>,
}

impl Choice {
    pub fn plain(action: usize) -> Self {
        Choice {
            action,
            opponent_guess: None,
        }
    }
}

/// A per-agent decision function used by rollouts.
pub trait Policy {
    /// Chooses an action for `agent` from its own observation.
    fn act(&self, agent: usize, observation: &[f64], rng: &mut StreamRng) -> Result<Choice>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, agent: usize, observation: &[f64], rng: &mut StreamRng) -> Result<Choice> {
        (**self).act(agent, observation, rng)
    }
}

/// Uniformly random actions.
#[derive(Clone, Copy, Debug)]
pub struct UniformPolicy {
    pub actions: usize,
}

impl Policy for UniformPolicy {
    fn act(&self, _agent: usize, _observation: &[f64], rng: &mut StreamRng) -> Result<Choice> {
        use rand::Rng;
        Ok(Choice::plain(rng.random_range(0..self.actions)))
    }
}

/// Imagined opponent actions, indexed `[episode][step][agent]`.
pub type GuessTrace = Vec<Vec<Vec<Option<Vec<usize>>>>>;

/// Plays `episodes` episodes with one policy per agent.
///
/// Episode `k` uses the streams derived from `rng::episode_seed(seed, k)`, so the
/// result is a pure function of `(game, policies, seed)`.
pub fn rollout<G: MarkovGame + ?Sized>(
    game: &G,
    policies: &[&dyn Policy],
    episodes: usize,
    seed: u64,
) -> Result<InteractionBatch> {
    rollout_traced(game, policies, episodes, seed).map(|(batch, _)| batch)
}

/// Like [`rollout`], also returning the opponent guesses every agent made.
pub fn rollout_traced<G: MarkovGame + ?Sized>(
    game: &G,
    policies: &[&dyn Policy],
    episodes: usize,
    seed: u64,
) -> Result<(InteractionBatch, GuessTrace)> {
    if episodes == 0 {
        return Err(Error::Empty("rollout requested zero episodes"));
    }
    let n = game.agent_count();
    if policies.len() != n {
        return Err(Error::Shape {
            context: "policies per agent",
            expected: n,
            got: policies.len(),
        });
    }
    let mut out = Vec::with_capacity(episodes);
    let mut guesses = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let (episode, g) = play_episode(game, policies, rng::episode_seed(seed, k))?;
        out.push(episode);
        guesses.push(g);
    }
    Ok((
        InteractionBatch {
            scenario: game.scenario_id(),
            seed,
            generator: "rollout".into(),
            episodes: out,
        },
        guesses,
    ))
}

#[allow(clippy::type_complexity)]
fn play_episode<G: MarkovGame + ?Sized>(
    game: &G,
    policies: &[&dyn Policy],
    episode_seed: u64,
) -> Result<(Episode, Vec<Vec<Option<Vec<usize>>>>)> {
    let n = game.agent_count();
    let mut env = rng::env_stream(episode_seed);
    let mut agent_rngs: Vec<StreamRng> = (0..n).map(|i| rng::agent_stream(episode_seed, i)).collect();
    let mut state = game.initial_state(&mut env);
    let mut steps = Vec::with_capacity(game.horizon());
    let mut guesses = Vec::with_capacity(game.horizon());
    let mut absorbed = false;
    for t in 0..game.horizon() {
        let mut joint = Vec::with_capacity(n);
        let mut step_guesses = Vec::with_capacity(n);
        for (i, policy) in policies.iter().enumerate() {
            let obs = game.observe(&state, i);
            let choice = policy.act(i, &obs, &mut agent_rngs[i])?;
            joint.push(choice.action);
            step_guesses.push(choice.opponent_guess);
        }
        validate_joint(game.action_counts(), &joint, Some(t))?;
        let tr = step_unchecked(game, &state, &joint, t, &mut env)?;
        steps.push(Step {
            state: game.encode_state(&tr.state),
            actions: tr.joint_action,
            rewards: tr.rewards,
        });
        guesses.push(step_guesses);
        state = tr.next_state;
        if tr.terminal {
            absorbed = game.is_absorbing(&state);
            break;
        }
    }
    Ok((
        Episode {
            scenario: game.scenario_id(),
            seed: episode_seed,
            steps,
            final_state: Some(game.encode_state(&state)),
            absorbed,
        },
        guesses,
    ))
}

/// Σ_t γ^t r^(i)_t over one episode.
pub fn discounted_return(episode: &Episode, agent: usize, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    let mut total = 0.0;
    let mut weight = 1.0;
    for step in &episode.steps {
        let r = step.rewards.get(agent).ok_or(Error::Shape {
            context: "agent index",
            expected: step.rewards.len(),
            got: agent,
        })?;
        total += weight * r;
        weight *= gamma;
    }
    Ok(total)
}

/// Undiscounted per-agent episode return.
pub fn total_return(episode: &Episode, agent: usize) -> f64 {
    episode.steps.iter().map(|s| s.rewards[agent]).sum()
}

/// Replays a recorded episode through the game's reward function and reports
/// whether every stored reward vector is reproduced exactly.
pub fn replay_rewards<G: MarkovGame + ?Sized>(game: &G, episode: &Episode) -> Result<bool> {
    for step in &episode.steps {
        let state = game.decode_state(&step.state)?;
        if game.rewards(&state, &step.actions) != step.rewards {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Per-agent observations of every recorded step, indexed `[step][agent]` in
/// batch order.
pub fn batch_observations<G: MarkovGame + ?Sized>(
    game: &G,
    batch: &InteractionBatch,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = game.agent_count();
    batch
        .steps()
        .map(|step| {
            let state = game.decode_state(&step.state)?;
            Ok((0..n).map(|i| game.observe(&state, i)).collect())
        })
        .collect()
}
