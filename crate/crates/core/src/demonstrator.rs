//! Ground-truth demonstrators: correlated-policy agents with opponent models
//! trained on the game's own rewards, and recording of their interactions.

use serde::{Deserialize, Serialize};

use crate::ail::{actor_critic_observed, init_models, AgentModels, EpochHook, RewardSource, Trained, TrainerConfig};
use crate::error::{Error, Result};
use crate::game::{rollout, total_return, Episode, InteractionBatch, MarkovGame, Policy, Step, UniformPolicy};
use crate::nn::sample_index;
use crate::oracle::{self, StateTable, TabularJointPolicy};
use crate::rng::{self, StreamRng};
use crate::tabular::TabularGame;

pub const DEFAULT_EPISODES: usize = 200;
pub const DEFAULT_HORIZON: usize = 50;

/// Trains decentralized correlated demonstrators against true rewards.
pub fn train_demonstrators<G: MarkovGame + ?Sized>(game: &G, cfg: &TrainerConfig) -> Result<Trained> {
    train_demonstrators_observed(game, cfg, &mut |_, _| Ok(()))
}

/// [`train_demonstrators`] with a hook run after each epoch.
pub fn train_demonstrators_observed<G: MarkovGame + ?Sized>(game: &G, cfg: &TrainerConfig, hook: &mut EpochHook<'_>) -> Result<Trained> {
    cfg.validate()?;
    let models = init_models(game, cfg, true, None);
    actor_critic_observed(game, models, RewardSource::Environment, cfg, hook)
}

/// A game with a shorter horizon.
pub struct Truncated<'a, G: ?Sized> {
    pub game: &'a G,
    pub horizon: usize,
}

impl<G: MarkovGame + ?Sized> MarkovGame for Truncated<'_, G> {
    type State = G::State;

    fn scenario_id(&self) -> String {
        self.game.scenario_id()
    }
    fn action_counts(&self) -> &[usize] {
        self.game.action_counts()
    }
    fn discount(&self) -> f64 {
        self.game.discount()
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn initial_state(&self, rng: &mut StreamRng) -> Self::State {
        self.game.initial_state(rng)
    }
    fn rewards(&self, state: &Self::State, joint: &[usize]) -> Vec<f64> {
        self.game.rewards(state, joint)
    }
    fn sample_next(&self, state: &Self::State, joint: &[usize], rng: &mut StreamRng) -> Self::State {
        self.game.sample_next(state, joint, rng)
    }
    fn is_absorbing(&self, state: &Self::State) -> bool {
        self.game.is_absorbing(state)
    }
    fn observation_dim(&self, agent: usize) -> usize {
        self.game.observation_dim(agent)
    }
    fn observe(&self, state: &Self::State, agent: usize) -> Vec<f64> {
        self.game.observe(state, agent)
    }
    fn encode_state(&self, state: &Self::State) -> Vec<f64> {
        self.game.encode_state(state)
    }
    fn decode_state(&self, encoded: &[f64]) -> Result<Self::State> {
        self.game.decode_state(encoded)
    }
}

/// Records `episodes` episodes of the demonstrators, at most `horizon` steps each.
pub fn generate_demonstrations<G: MarkovGame + ?Sized>(
    game: &G,
    demonstrators: &[AgentModels],
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<InteractionBatch> {
    if horizon == 0 || horizon > game.horizon() {
        return Err(Error::Config(format!(
            "demonstration horizon must be in 1..={}, got {horizon}",
            game.horizon()
        )));
    }
    let view = Truncated { game, horizon };
    let actors: Vec<_> = demonstrators.iter().map(AgentModels::actor).collect();
    let policies: Vec<&dyn Policy> = actors.iter().map(|a| a as &dyn Policy).collect();
    let mut batch = rollout(&view, &policies, episodes, seed)?;
    batch.generator = "demonstrator".into();
    Ok(batch)
}

/// Demonstrations drawn from an explicit joint distribution `[state][joint]`,
/// the reference for games whose demonstrators act jointly.
pub fn sample_joint_demonstrations(game: &TabularGame, joint: &StateTable, episodes: usize, seed: u64) -> Result<InteractionBatch> {
    if episodes == 0 {
        return Err(Error::Empty("requested zero episodes"));
    }
    let policy = TabularJointPolicy::Joint(joint.clone());
    policy.joint_table(game)?;
    let ix = game.indexer();
    let out = (0..episodes)
        .map(|k| {
            let es = rng::episode_seed(seed, k);
            let mut env = rng::env_stream(es);
            let mut device = rng::agent_stream(es, 0);
            let mut s = game.initial_state(&mut env);
            let mut steps = Vec::new();
            let mut absorbed = false;
            for _ in 0..game.horizon() {
                let actions = ix.actions(sample_index(&joint[s], &mut device));
                let rewards = game.rewards(&s, &actions);
                steps.push(Step {
                    state: game.encode_state(&s),
                    actions: actions.clone(),
                    rewards,
                });
                s = game.sample_next(&s, &actions, &mut env);
                if game.is_absorbing(&s) {
                    absorbed = true;
                    break;
                }
            }
            Episode {
                scenario: game.scenario_id(),
                seed: es,
                steps,
                final_state: Some(game.encode_state(&s)),
                absorbed,
            }
        })
        .collect();
    Ok(InteractionBatch {
        scenario: game.scenario_id(),
        seed,
        generator: "joint-device".into(),
        episodes: out,
    })
}

/// Outcome of the demonstrator acceptance check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub accepted: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub detail: String,
}

/// Tabular gate: max ε-NE gap of the demonstrators' marginal profile
/// ≤ `fraction` · value scale.
pub fn tabular_quality(game: &TabularGame, demonstrators: &[AgentModels], fraction: f64) -> Result<QualityReport> {
    let marginals = crate::ail::tabular_marginals(game, demonstrators)?;
    let gaps = oracle::epsilon_ne_gap(game, &TabularJointPolicy::Product(marginals))?;
    let worst = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = fraction * game.value_scale();
    Ok(QualityReport {
        accepted: worst <= threshold,
        statistic: worst,
        threshold,
        detail: format!("per-agent gaps {gaps:?}"),
    })
}

/// Mean and standard deviation of per-episode team returns.
pub fn team_return_stats(batch: &InteractionBatch, team: &[usize]) -> (f64, f64) {
    let r: Vec<f64> = batch
        .episodes
        .iter()
        .map(|e| team.iter().map(|&i| total_return(e, i)).sum())
        .collect();
    mean_std(&r)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Particle gate: the demonstrators' mean team return beats uniform-random play
/// by at least `margin` random-policy standard deviations.
pub fn particle_quality<G: MarkovGame + ?Sized>(
    game: &G,
    demonstrators: &[AgentModels],
    team: &[usize],
    episodes: usize,
    margin: f64,
    seed: u64,
) -> Result<QualityReport> {
    let demo = generate_demonstrations(game, demonstrators, episodes, game.horizon(), seed)?;
    let uniform: Vec<UniformPolicy> = game.action_counts().iter().map(|&n| UniformPolicy { actions: n }).collect();
    let policies: Vec<&dyn Policy> = uniform.iter().map(|u| u as &dyn Policy).collect();
    let random = rollout(game, &policies, episodes, seed)?;
    let (dm, _) = team_return_stats(&demo, team);
    let (rm, rs) = team_return_stats(&random, team);
    let threshold = rm + margin * rs;
    Ok(QualityReport {
        accepted: dm >= threshold,
        statistic: dm,
        threshold,
        detail: format!("random mean {rm:.4} sd {rs:.4}"),
    })
}
