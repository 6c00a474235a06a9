//! Decentralized adversarial imitation: per-agent discriminators, surrogate
//! rewards, and the CoDAIL, NC-DAIL, MA-GAIL-style and behavior-cloning trainers.
//!
//! One epoch of the adversarial loop, per agent `i` and in this order:
//! 1. (CoDAIL) fit the opponent model σ^(i) on the opponents' sampled actions,
//! 2. update the discriminator `d_steps(epoch)` times against expert rows,
//! 3. score the rollout with the clamped discriminator logit,
//! 4. fit the value baseline and take a policy-gradient step.
//!
//! Every agent only ever touches its own models; the rollout is the only
//! shared object, and it holds sampled actions, not parameters.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    advantage_estimates, fit_policy_bc, policy_gradient_step, standardize, Actor, AgentSpec, OpponentModel, PgBatch,
    PolicyModel, ValueFunction,
};
use crate::error::{Error, Result};
use crate::game::{rollout_traced, MarkovGame, Policy};
use crate::nn::{self, batch_of, one_hot, Adam, Mlp};
use crate::oracle::StateTable;
use crate::rng::{self, splitmix64, StreamRng};
use crate::tabular::TabularGame;
use crate::InteractionBatch;

pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Codail,
    Ncdail,
    Magail,
    Bc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail, Algorithm::Bc];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Codail => "codail",
            Algorithm::Ncdail => "ncdail",
            Algorithm::Magail => "magail",
            Algorithm::Bc => "bc",
        }
    }

    /// CoDAIL and BC (which clones CoDAIL's model family) use correlated policies.
    pub fn correlated(self) -> bool {
        matches!(self, Algorithm::Codail | Algorithm::Bc)
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Algorithm::Codail | Algorithm::Ncdail => Some(Variant::Joint),
            Algorithm::Magail => Some(Variant::Private),
            Algorithm::Bc => None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}' (expected codail, ncdail, magail or bc)")))
    }
}

/// Discriminator input: joint (own and opponent actions) or private (own only).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Joint,
    Private,
}

/// D:G update frequency, e.g. `1:4` trains D once every four policy updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub d: u32,
    pub g: u32,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { d: 1, g: 1 };

    /// Discriminator steps in epoch `k`: ⌊(k+1)d/g⌋ − ⌊kd/g⌋.
    pub fn d_steps(self, epoch: usize) -> usize {
        let (d, g, k) = (self.d as u64, self.g as u64, epoch as u64);
        (((k + 1) * d) / g - (k * d) / g) as usize
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.d, self.g)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio '{s}' must look like D:G with positive integers"));
        let (d, g) = s.split_once(':').ok_or_else(bad)?;
        let d: u32 = d.trim().parse().map_err(|_| bad())?;
        let g: u32 = g.trim().parse().map_err(|_| bad())?;
        if d == 0 || g == 0 {
            return Err(bad());
        }
        Ok(Ratio { d, g })
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How importance weights enter the discriminator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaPolicy {
    #[default]
    FixedOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    /// Environment steps collected per epoch.
    pub batch_size: usize,
    pub epochs: usize,
    pub ratio: Ratio,
    pub lambda: f64,
    /// Defaults to the game's discount.
    pub gamma: Option<f64>,
    pub lr: f64,
    /// Discriminator learning rate; defaults to `lr`.
    pub discriminator_lr: Option<f64>,
    pub hidden: usize,
    pub seed: u64,
    pub bc_steps: usize,
    pub bc_batch: usize,
    pub bc_lr: f64,
    pub opponent_steps: usize,
    pub value_steps: usize,
    pub policy_steps: usize,
    pub alpha: AlphaPolicy,
    pub clip_norm: Option<f64>,
    pub advantage_norm: AdvantageNorm,
}

/// Rescaling applied to a batch of advantages before the policy step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageNorm {
    /// Zero mean, unit variance.
    #[default]
    Standardize,
    /// Zero mean only.
    Center,
    Raw,
}

impl AdvantageNorm {
    pub fn apply(self, adv: &mut [f64]) {
        match self {
            AdvantageNorm::Standardize => standardize(adv),
            AdvantageNorm::Center => {
                let mean = adv.iter().sum::<f64>() / adv.len().max(1) as f64;
                adv.iter_mut().for_each(|a| *a -= mean);
            }
            AdvantageNorm::Raw => {}
        }
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            algorithm: Algorithm::Codail,
            batch_size: 1000,
            epochs: 200,
            ratio: Ratio::ONE,
            lambda: 0.05,
            gamma: None,
            lr: 3e-4,
            discriminator_lr: None,
            hidden: nn::HIDDEN,
            seed: 0,
            bc_steps: 500,
            bc_batch: 256,
            bc_lr: 1e-3,
            opponent_steps: 1,
            value_steps: 4,
            policy_steps: 1,
            alpha: AlphaPolicy::FixedOne,
            clip_norm: Some(10.0),
            advantage_norm: AdvantageNorm::Standardize,
        }
    }
}

impl TrainerConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        TrainerConfig {
            algorithm,
            ..Default::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            v.push(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if let Some(g) = self.gamma {
            if !(0.0..1.0).contains(&g) {
                v.push(format!("gamma must be in [0, 1), got {g}"));
            }
        }
        let rates = [("lr", Some(self.lr)), ("discriminator_lr", self.discriminator_lr), ("bc_lr", Some(self.bc_lr))];
        for (name, lr) in rates.into_iter().filter_map(|(n, lr)| lr.map(|lr| (n, lr))) {
            if !(lr > 0.0 && lr.is_finite()) {
                v.push(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.hidden == 0 {
            v.push("hidden must be at least 1".into());
        }
        if self.bc_batch == 0 {
            v.push("bc_batch must be at least 1".into());
        }
        if self.policy_steps == 0 {
            v.push("policy_steps must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                v.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    fn optimizer(&self, net: &Mlp, lr: f64) -> Adam {
        let opt = Adam::for_model(net, lr);
        match self.clip_norm {
            Some(c) => opt.with_clip(c),
            None => opt,
        }
    }
}

/// D^(i)(s, a^(i), a^(-i)) as a logistic classifier; expert rows are labeled 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: AgentSpec,
    pub variant: Variant,
    pub net: Mlp,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Discriminator {
    pub fn new(spec: AgentSpec, variant: Variant, hidden: usize, rng: &mut StreamRng) -> Self {
        let width = Self::width(&spec, variant);
        Discriminator {
            net: Mlp::with_hidden(width, hidden, 1, rng),
            spec,
            variant,
        }
    }

    fn width(spec: &AgentSpec, variant: Variant) -> usize {
        spec.obs_dim
            + spec.own_actions()
            + match variant {
                Variant::Joint => spec.opponent_dim(),
                Variant::Private => 0,
            }
    }

    /// `observation ⊕ onehot(own) [⊕ opponent one-hots]`.
    pub fn input(&self, obs: &[f64], own: usize, opponents: &[usize]) -> Result<Vec<f64>> {
        if obs.len() != self.spec.obs_dim {
            return Err(Error::Shape {
                context: "discriminator observation",
                expected: self.spec.obs_dim,
                got: obs.len(),
            });
        }
        if own >= self.spec.own_actions() {
            return Err(Error::InvalidAction {
                agent: self.spec.agent,
                step: None,
                action: own,
                limit: self.spec.own_actions(),
            });
        }
        let mut x = obs.to_vec();
        x.extend(one_hot(own, self.spec.own_actions()));
        if self.variant == Variant::Joint {
            x.extend(self.spec.encode_opponents(opponents)?);
        }
        Ok(x)
    }

    /// Clamped logit; equals log D − log(1 − D) for the clamped D.
    pub fn logits(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self
            .net
            .forward_batch(inputs)?
            .output
            .column(0)
            .iter()
            .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
            .collect())
    }

    pub fn probability(&self, input: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.net.forward(input)?[0].clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
    }

    pub fn surrogate_reward(&self, obs: &[f64], own: usize, opponents: &[usize]) -> Result<f64> {
        let x = self.input(obs, own, opponents)?;
        Ok(self.net.forward(&x)?[0].clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
    }

    /// −mean_E log D − mean_L log(1 − D) and its parameter gradient.
    pub fn loss_and_grad(&self, expert: &Array2<f64>, learner: &Array2<f64>) -> Result<(f64, Vec<f64>)> {
        let (ne, nl) = (expert.nrows(), learner.nrows());
        if ne == 0 || nl == 0 {
            return Err(Error::Empty("discriminator needs expert and learner rows"));
        }
        let width = self.net.input_dim();
        for b in [expert, learner] {
            if b.ncols() != width {
                return Err(Error::Shape {
                    context: "discriminator input width",
                    expected: width,
                    got: b.ncols(),
                });
            }
        }
        let mut stacked = Array2::zeros((ne + nl, width));
        stacked.slice_mut(ndarray::s![..ne, ..]).assign(expert);
        stacked.slice_mut(ndarray::s![ne.., ..]).assign(learner);
        let fwd = self.net.forward_batch(&stacked)?;
        let mut up = Array2::zeros((ne + nl, 1));
        let mut loss = 0.0;
        for r in 0..ne + nl {
            let z = fwd.output[[r, 0]];
            if r < ne {
                loss += softplus(-z) / ne as f64;
                up[[r, 0]] = (sigmoid(z) - 1.0) / ne as f64;
            } else {
                loss += softplus(z) / nl as f64;
                up[[r, 0]] = sigmoid(z) / nl as f64;
            }
        }
        Ok((loss, self.net.backward_batch(&fwd, &up)?))
    }

    pub fn step(&mut self, opt: &mut Adam, expert: &Array2<f64>, learner: &Array2<f64>) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(expert, learner)?;
        opt.apply_update(&mut self.net, &grad)?;
        Ok(loss)
    }
}

/// The models one agent owns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentModels {
    pub policy: PolicyModel,
    pub opponent: Option<OpponentModel>,
    pub value: ValueFunction,
    pub discriminator: Option<Discriminator>,
}

impl AgentModels {
    pub fn new(spec: AgentSpec, correlated: bool, variant: Option<Variant>, hidden: usize, rng: &mut StreamRng) -> Self {
        AgentModels {
            policy: PolicyModel::new(spec.clone(), correlated, hidden, rng),
            opponent: correlated.then(|| OpponentModel::new(spec.clone(), hidden, rng)),
            value: ValueFunction::new(spec.clone(), hidden, rng),
            discriminator: variant.map(|v| Discriminator::new(spec, v, hidden, rng)),
        }
    }

    pub fn actor(&self) -> Actor<'_> {
        Actor {
            policy: &self.policy,
            opponent_model: self.opponent.as_ref(),
        }
    }

    pub fn named_nets(&self) -> Vec<(&'static str, &Mlp)> {
        let mut v = vec![("policy", &self.policy.net)];
        if let Some(o) = &self.opponent {
            v.push(("opponent", &o.net));
        }
        v.push(("value", &self.value.net));
        if let Some(d) = &self.discriminator {
            v.push(("discriminator", &d.net));
        }
        v
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        nn::write_checkpoint(w, &self.named_nets())
    }

    /// Restores networks into a model set of the same architecture.
    pub fn load_checkpoint<R: std::io::BufRead>(&mut self, r: R) -> Result<()> {
        for (role, net) in nn::read_checkpoint(r)? {
            let slot = match role.as_str() {
                "policy" => Some(&mut self.policy.net),
                "opponent" => self.opponent.as_mut().map(|o| &mut o.net),
                "value" => Some(&mut self.value.net),
                "discriminator" => self.discriminator.as_mut().map(|d| &mut d.net),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("checkpoint has unexpected role '{role}'")))?;
            if (slot.input_dim(), slot.hidden_dim(), slot.output_dim()) != (net.input_dim(), net.hidden_dim(), net.output_dim())
            {
                return Err(Error::Config(format!("checkpoint network '{role}' has a different shape")));
            }
            *slot = net;
        }
        Ok(())
    }
}

/// Counts parameter accesses where the accessing agent is not the owner.
#[derive(Debug, Default)]
pub struct AccessAudit {
    own: AtomicU64,
    foreign: AtomicU64,
}

impl AccessAudit {
    pub fn record(&self, owner: usize, accessor: usize) {
        if owner == accessor {
            self.own.fetch_add(1, Ordering::Relaxed);
        } else {
            self.foreign.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn own_reads(&self) -> u64 {
        self.own.load(Ordering::Relaxed)
    }

    pub fn foreign_reads(&self) -> u64 {
        self.foreign.load(Ordering::Relaxed)
    }
}

/// One agent's models behind an access check.
#[derive(Debug)]
pub struct Learner {
    owner: usize,
    models: AgentModels,
}

impl Learner {
    pub fn new(models: AgentModels) -> Self {
        Learner {
            owner: models.policy.spec.agent,
            models,
        }
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn get(&self, accessor: usize, audit: &AccessAudit) -> &AgentModels {
        audit.record(self.owner, accessor);
        &self.models
    }

    pub fn get_mut(&mut self, accessor: usize, audit: &AccessAudit) -> &mut AgentModels {
        audit.record(self.owner, accessor);
        &mut self.models
    }

    pub fn into_models(self) -> AgentModels {
        self.models
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub agent: usize,
    pub d_loss: Option<f64>,
    pub pg_loss: f64,
    pub opp_ce: Option<f64>,
    pub entropy: f64,
    pub mean_surrogate_reward: f64,
    pub value_loss: f64,
    pub mean_env_reward: f64,
    /// Update phases in the order they ran.
    pub phases: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub models: Vec<AgentModels>,
    pub log: Vec<LogRecord>,
    pub foreign_reads: u64,
    pub own_reads: u64,
}

pub fn write_log<W: std::io::Write>(mut w: W, log: &[LogRecord]) -> std::io::Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Expert rows for one agent: observation, own action, true opponent actions.
#[derive(Clone, Debug)]
pub struct ExpertRows {
    pub obs: Vec<Vec<f64>>,
    pub own: Vec<usize>,
    pub opponents: Vec<Vec<usize>>,
}

/// Splits a demonstration batch into per-agent expert rows.
pub fn expert_rows<G: MarkovGame + ?Sized>(game: &G, demos: &InteractionBatch) -> Result<Vec<ExpertRows>> {
    demos.validate(game)?;
    if demos.step_count() == 0 {
        return Err(Error::Empty("demonstrations contain no steps"));
    }
    let obs = crate::game::batch_observations(game, demos)?;
    let n = game.agent_count();
    Ok((0..n)
        .map(|i| {
            let spec = AgentSpec::new(i, game.observation_dim(i), game.action_counts().to_vec());
            let mut rows = ExpertRows {
                obs: Vec::new(),
                own: Vec::new(),
                opponents: Vec::new(),
            };
            for (o, step) in obs.iter().zip(demos.steps()) {
                let (own, opp) = spec.split_joint(&step.actions);
                rows.obs.push(o[i].clone());
                rows.own.push(own);
                rows.opponents.push(opp);
            }
            rows
        })
        .collect())
}

pub fn agent_specs<G: MarkovGame + ?Sized>(game: &G) -> Vec<AgentSpec> {
    (0..game.agent_count())
        .map(|i| AgentSpec::new(i, game.observation_dim(i), game.action_counts().to_vec()))
        .collect()
}

/// Fresh models for every agent, drawn from per-agent streams of `seed`.
pub fn init_models<G: MarkovGame + ?Sized>(game: &G, cfg: &TrainerConfig, correlated: bool, variant: Option<Variant>) -> Vec<AgentModels> {
    agent_specs(game)
        .into_iter()
        .map(|spec| {
            let mut r = rng::stream(splitmix64(cfg.seed ^ 0x1417), spec.agent as u64);
            AgentModels::new(spec, correlated, variant, cfg.hidden, &mut r)
        })
        .collect()
}

/// Maximum-likelihood fit of every policy and opponent model on the expert rows.
///
/// Correlated policies condition on the recorded opponent actions.
pub fn bc_pretrain(models: &mut [AgentModels], expert: &[ExpertRows], steps: usize, cfg: &TrainerConfig) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(models.len());
    for (m, rows) in models.iter_mut().zip(expert) {
        if rows.obs.is_empty() {
            return Err(Error::Empty("behavior cloning needs expert rows"));
        }
        let i = m.policy.spec.agent;
        let mut r = rng::stream(splitmix64(cfg.seed ^ 0xbc), i as u64);
        let mut p_opt = cfg.optimizer(&m.policy.net, cfg.bc_lr);
        let mut o_opt = m.opponent.as_ref().map(|o| cfg.optimizer(&o.net, cfg.bc_lr));
        let mut last = 0.0;
        for _ in 0..steps {
            let pick: Vec<usize> = (0..cfg.bc_batch.min(rows.obs.len().max(1)))
                .map(|_| r.random_range(0..rows.obs.len()))
                .collect();
            let inputs = pick
                .iter()
                .map(|&k| m.policy.input(&rows.obs[k], Some(&rows.opponents[k])))
                .collect::<Result<Vec<_>>>()?;
            let actions: Vec<usize> = pick.iter().map(|&k| rows.own[k]).collect();
            last = fit_policy_bc(&mut m.policy, &mut p_opt, &batch_of(&inputs)?, &actions)?;
            if let (Some(o), Some(opt)) = (m.opponent.as_mut(), o_opt.as_mut()) {
                let x = batch_of(&pick.iter().map(|&k| rows.obs[k].clone()).collect::<Vec<_>>())?;
                let y: Vec<Vec<usize>> = pick.iter().map(|&k| rows.opponents[k].clone()).collect();
                o.fit_step(opt, &x, &y)?;
            }
        }
        losses.push(last);
    }
    Ok(losses)
}

/// Where the per-step rewards of the inner actor-critic loop come from.
#[derive(Clone, Copy, Debug)]
pub enum RewardSource<'a> {
    /// Clamped discriminator logits, discriminator trained against these rows.
    Adversarial(&'a [ExpertRows]),
    /// The game's own rewards.
    Environment,
}

/// Per-step data of one epoch's rollout, in batch order.
struct EpochData {
    obs: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<usize>>,
    guesses: Vec<Vec<Option<Vec<usize>>>>,
    env_rewards: Vec<Vec<f64>>,
    /// (start, len, absorbed, final observations per agent)
    episodes: Vec<(usize, usize, bool, Vec<Vec<f64>>)>,
}

fn collect_epoch<G: MarkovGame + ?Sized>(game: &G, learners: &[Learner], audit: &AccessAudit, batch_size: usize, seed: u64) -> Result<EpochData> {
    let episodes = batch_size.div_ceil(game.horizon()).max(1);
    // Each agent's actor is built by that agent from its own models.
    let actors: Vec<Actor<'_>> = learners.iter().map(|l| l.get(l.owner(), audit).actor()).collect();
    let policies: Vec<&dyn Policy> = actors.iter().map(|a| a as &dyn Policy).collect();
    let (batch, trace) = rollout_traced(game, &policies, episodes, seed)?;
    let obs = crate::game::batch_observations(game, &batch)?;
    let mut data = EpochData {
        obs,
        actions: Vec::new(),
        guesses: Vec::new(),
        env_rewards: Vec::new(),
        episodes: Vec::new(),
    };
    for (ep, g) in batch.episodes.iter().zip(trace) {
        let start = data.actions.len();
        for (step, guess) in ep.steps.iter().zip(g) {
            data.actions.push(step.actions.clone());
            data.env_rewards.push(step.rewards.clone());
            data.guesses.push(guess);
        }
        let final_state = game.decode_state(ep.final_state.as_deref().unwrap_or(&[]))?;
        let final_obs = (0..game.agent_count()).map(|i| game.observe(&final_state, i)).collect();
        data.episodes.push((start, ep.steps.len(), ep.absorbed, final_obs));
    }
    Ok(data)
}

/// Per-agent optimizer state, owned alongside the agent's models.
struct Optimizers {
    policy: Adam,
    opponent: Option<Adam>,
    value: Adam,
    discriminator: Option<Adam>,
}

impl Optimizers {
    fn new(m: &AgentModels, cfg: &TrainerConfig) -> Self {
        Optimizers {
            policy: cfg.optimizer(&m.policy.net, cfg.lr),
            opponent: m.opponent.as_ref().map(|o| cfg.optimizer(&o.net, cfg.lr)),
            value: cfg.optimizer(&m.value.net, cfg.lr),
            discriminator: m
                .discriminator
                .as_ref()
                .map(|d| cfg.optimizer(&d.net, cfg.discriminator_lr.unwrap_or(cfg.lr))),
        }
    }
}

fn finite(x: f64, epoch: usize, agent: usize, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Diverged {
            epoch,
            agent,
            reason: format!("{what} is {x}"),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn update_agent(
    m: &mut AgentModels,
    opt: &mut Optimizers,
    data: &EpochData,
    source: RewardSource<'_>,
    cfg: &TrainerConfig,
    gamma: f64,
    epoch: usize,
    r: &mut StreamRng,
) -> Result<LogRecord> {
    let i = m.policy.spec.agent;
    let spec = m.policy.spec.clone();
    let n = data.actions.len();
    let mut phases = Vec::new();
    let own: Vec<usize> = data.actions.iter().map(|a| a[i]).collect();
    let opp_true: Vec<Vec<usize>> = data.actions.iter().map(|a| spec.split_joint(a).1).collect();
    // Opponent actions this agent conditioned on: its own guesses when it has them.
    let opp_used: Vec<Vec<usize>> = data
        .guesses
        .iter()
        .zip(&opp_true)
        .map(|(g, t)| g[i].clone().unwrap_or_else(|| t.clone()))
        .collect();
    let obs_i: Vec<Vec<f64>> = data.obs.iter().map(|o| o[i].clone()).collect();

    let mut opp_ce = None;
    if let (Some(model), Some(o_opt)) = (m.opponent.as_mut(), opt.opponent.as_mut()) {
        let x = batch_of(&obs_i)?;
        let mut loss = 0.0;
        for _ in 0..cfg.opponent_steps {
            loss = model.fit_step(o_opt, &x, &opp_true)?;
        }
        if cfg.opponent_steps > 0 {
            opp_ce = Some(finite(loss, epoch, i, "opponent-model loss")?);
        }
        phases.push("opponent".to_string());
    }

    let (rewards, d_loss) = match source {
        RewardSource::Adversarial(expert) => {
            let d = m
                .discriminator
                .as_mut()
                .ok_or_else(|| Error::Config("adversarial training needs a discriminator".into()))?;
            let d_opt = opt.discriminator.as_mut().expect("discriminator optimizer");
            let rows = &expert[i];
            let learner_x = batch_of(
                &(0..n)
                    .map(|t| d.input(&obs_i[t], own[t], &opp_used[t]))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let d_steps = cfg.ratio.d_steps(epoch);
            let mut d_loss = None;
            for _ in 0..d_steps {
                let pick: Vec<usize> = (0..n).map(|_| r.random_range(0..rows.obs.len())).collect();
                let expert_x = batch_of(
                    &pick
                        .iter()
                        .map(|&k| d.input(&rows.obs[k], rows.own[k], &rows.opponents[k]))
                        .collect::<Result<Vec<_>>>()?,
                )?;
                d_loss = Some(finite(d.step(d_opt, &expert_x, &learner_x)?, epoch, i, "discriminator loss")?);
            }
            if d_steps > 0 {
                phases.push("discriminator".to_string());
            }
            (d.logits(&learner_x)?, d_loss)
        }
        RewardSource::Environment => (data.env_rewards.iter().map(|r| r[i]).collect(), None),
    };
    finish(m, opt, data, cfg, gamma, epoch, &obs_i, &own, &opp_true, &opp_used, rewards, d_loss, opp_ce, phases)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    m: &mut AgentModels,
    opt: &mut Optimizers,
    data: &EpochData,
    cfg: &TrainerConfig,
    gamma: f64,
    epoch: usize,
    obs_i: &[Vec<f64>],
    own: &[usize],
    opp_true: &[Vec<usize>],
    opp_used: &[Vec<usize>],
    rewards: Vec<f64>,
    d_loss: Option<f64>,
    opp_ce: Option<f64>,
    mut phases: Vec<String>,
) -> Result<LogRecord> {
    let i = m.policy.spec.agent;
    let n = rewards.len();
    // Value inputs: observation with the previous step's true opponent actions.
    let mut v_inputs = Vec::with_capacity(n);
    let mut tails = Vec::with_capacity(data.episodes.len());
    for (start, len, _, final_obs) in &data.episodes {
        for t in *start..start + len {
            let prev = (t > *start).then(|| opp_true[t - 1].as_slice());
            v_inputs.push(m.value.input(&obs_i[t], prev)?);
        }
        let last = (*len > 0).then(|| opp_true[start + len - 1].as_slice());
        tails.push(m.value.input(&final_obs[i], last)?);
    }
    let v_x = batch_of(&v_inputs)?;
    let baselines = m.value.values(&v_x)?;
    let tail_values = m.value.values(&batch_of(&tails)?)?;
    let mut adv = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for (k, (start, len, absorbed, _)) in data.episodes.iter().enumerate() {
        let tail = if *absorbed { 0.0 } else { tail_values[k] };
        let (a, tg) = advantage_estimates(&rewards[*start..start + len], &baselines[*start..start + len], tail, gamma)?;
        adv.extend(a);
        targets.extend(tg);
    }
    let mean_abs = adv.iter().map(|a: &f64| a.abs()).sum::<f64>() / n as f64;
    if !mean_abs.is_finite() || mean_abs > 1e6 {
        return Err(Error::Diverged {
            epoch,
            agent: i,
            reason: format!("mean |advantage| = {mean_abs}"),
        });
    }

    let mut value_loss = 0.0;
    for _ in 0..cfg.value_steps {
        value_loss = finite(m.value.fit_step(&mut opt.value, &v_x, &targets)?, epoch, i, "value loss")?;
    }
    phases.push("value".to_string());

    cfg.advantage_norm.apply(&mut adv);
    let p_inputs = (0..n)
        .map(|t| m.policy.input(&obs_i[t], Some(&opp_used[t])))
        .collect::<Result<Vec<_>>>()?;
    let batch = PgBatch {
        inputs: batch_of(&p_inputs)?,
        actions: own.to_vec(),
        advantages: adv,
    };
    let mut stats = None;
    for _ in 0..cfg.policy_steps {
        stats = Some(policy_gradient_step(&mut m.policy, &mut opt.policy, &batch, cfg.lambda)?);
    }
    let stats = stats.expect("policy_steps ≥ 1");
    finite(stats.loss, epoch, i, "policy loss")?;
    phases.push("policy".to_string());

    Ok(LogRecord {
        epoch,
        agent: i,
        d_loss,
        pg_loss: stats.loss,
        opp_ce,
        entropy: stats.entropy,
        mean_surrogate_reward: rewards.iter().sum::<f64>() / n as f64,
        value_loss,
        mean_env_reward: data.env_rewards.iter().map(|r| r[i]).sum::<f64>() / n as f64,
        phases,
    })
}

/// The shared per-agent actor-critic loop. `epochs` rounds of rollout followed
/// by independent per-agent updates.
pub fn actor_critic<G: MarkovGame + ?Sized>(
    game: &G,
    models: Vec<AgentModels>,
    source: RewardSource<'_>,
    cfg: &TrainerConfig,
) -> Result<Trained> {
    actor_critic_observed(game, models, source, cfg, &mut |_, _| Ok(()))
}

/// Called after every epoch with the epoch index and every agent's models.
pub type EpochHook<'a> = dyn FnMut(usize, &[&AgentModels]) -> Result<()> + 'a;

/// [`actor_critic`] with a hook run after each epoch (checkpointing, progress).
pub fn actor_critic_observed<G: MarkovGame + ?Sized>(
    game: &G,
    models: Vec<AgentModels>,
    source: RewardSource<'_>,
    cfg: &TrainerConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    let gamma = cfg.gamma.unwrap_or_else(|| game.discount());
    let audit = AccessAudit::default();
    let mut opts: Vec<Optimizers> = models.iter().map(|m| Optimizers::new(m, cfg)).collect();
    let mut learners: Vec<Learner> = models.into_iter().map(Learner::new).collect();
    let mut agent_rngs: Vec<StreamRng> = (0..learners.len())
        .map(|i| rng::stream(splitmix64(cfg.seed ^ 0xd15c), i as u64))
        .collect();
    let mut log = Vec::with_capacity(cfg.epochs * learners.len());
    for epoch in 0..cfg.epochs {
        let seed = splitmix64(cfg.seed ^ splitmix64(epoch as u64 + 0x5eed));
        let data = collect_epoch(game, &learners, &audit, cfg.batch_size, seed)?;
        for (i, (learner, opt)) in learners.iter_mut().zip(&mut opts).enumerate() {
            let m = learner.get_mut(i, &audit);
            log.push(update_agent(m, opt, &data, source, cfg, gamma, epoch, &mut agent_rngs[i])?);
        }
        let view: Vec<&AgentModels> = learners.iter().map(|l| l.get(l.owner(), &audit)).collect();
        hook(epoch, &view)?;
    }
    Ok(Trained {
        foreign_reads: audit.foreign_reads(),
        own_reads: audit.own_reads(),
        models: learners.into_iter().map(Learner::into_models).collect(),
        log,
    })
}

/// Builds, pretrains and trains models for `cfg.algorithm` against demonstrations.
pub fn train<G: MarkovGame + ?Sized>(game: &G, demos: &InteractionBatch, cfg: &TrainerConfig) -> Result<Trained> {
    train_observed(game, demos, cfg, &mut |_, _| Ok(()))
}

/// [`train`] with a hook run after each adversarial epoch.
pub fn train_observed<G: MarkovGame + ?Sized>(
    game: &G,
    demos: &InteractionBatch,
    cfg: &TrainerConfig,
    hook: &mut EpochHook<'_>,
) -> Result<Trained> {
    cfg.validate()?;
    let expert = expert_rows(game, demos)?;
    let algo = cfg.algorithm;
    let mut models = init_models(game, cfg, algo.correlated(), algo.variant());
    bc_pretrain(&mut models, &expert, cfg.bc_steps, cfg)?;
    if algo == Algorithm::Bc {
        return Ok(Trained {
            models,
            log: Vec::new(),
            foreign_reads: 0,
            own_reads: 0,
        });
    }
    actor_critic_observed(game, models, RewardSource::Adversarial(&expert), cfg, hook)
}

fn expect_algorithm(cfg: &TrainerConfig, want: Algorithm) -> Result<()> {
    if cfg.algorithm != want {
        return Err(Error::Config(format!(
            "{want} trainer called with algorithm = {}",
            cfg.algorithm
        )));
    }
    Ok(())
}

pub fn codail_train<G: MarkovGame + ?Sized>(game: &G, demos: &InteractionBatch, cfg: &TrainerConfig) -> Result<Trained> {
    expect_algorithm(cfg, Algorithm::Codail)?;
    train(game, demos, cfg)
}

pub fn ncdail_train<G: MarkovGame + ?Sized>(game: &G, demos: &InteractionBatch, cfg: &TrainerConfig) -> Result<Trained> {
    expect_algorithm(cfg, Algorithm::Ncdail)?;
    train(game, demos, cfg)
}

pub fn magail_style_train<G: MarkovGame + ?Sized>(game: &G, demos: &InteractionBatch, cfg: &TrainerConfig) -> Result<Trained> {
    expect_algorithm(cfg, Algorithm::Magail)?;
    train(game, demos, cfg)
}

/// Product of opponent-head distributions as a table over opponent joint indices
/// (ascending opponent order, last opponent fastest).
fn opponent_joint(model: &OpponentModel, obs: &[f64]) -> Result<Vec<f64>> {
    let heads = model.probs(obs)?;
    let mut out = vec![1.0];
    for h in heads {
        out = out.iter().flat_map(|p| h.iter().map(move |q| p * q)).collect();
    }
    Ok(out)
}

/// Agent `i`'s model of the joint action distribution at a tabular state.
///
/// Correlated agents: π^(i)(a^(i)|s, a^(-i)) σ^(i)(a^(-i)|s). Plain agents: the
/// product of every agent's own policy, the only joint they can represent.
pub fn model_joint(game: &TabularGame, models: &[AgentModels], agent: usize, state: usize) -> Result<Vec<f64>> {
    let ix = game.indexer();
    let obs = game.observe(&state, agent);
    let m = &models[agent];
    match (&m.opponent, m.policy.correlated) {
        (Some(o), true) => {
            let sigma = opponent_joint(o, &obs)?;
            let opp_ix = ix.without(agent);
            let mut joint = vec![0.0; ix.size()];
            for (oi, &w) in sigma.iter().enumerate() {
                let p = m.policy.probs(&obs, Some(&opp_ix.actions(oi)))?;
                for (a, pa) in p.iter().enumerate() {
                    joint[ix.merge(agent, a, oi)] += w * pa;
                }
            }
            Ok(joint)
        }
        _ => {
            let margs = models
                .iter()
                .enumerate()
                .map(|(j, mj)| mj.policy.probs(&game.observe(&state, j), None))
                .collect::<Result<Vec<_>>>()?;
            Ok((0..ix.size())
                .map(|j| ix.actions(j).iter().enumerate().map(|(k, &a)| margs[k][a]).product())
                .collect())
        }
    }
}

/// Exact per-state marginal π^(i)(a|s) of each agent: Σ σ^(i) π^(i) for
/// correlated agents, the policy itself otherwise.
pub fn tabular_marginals(game: &TabularGame, models: &[AgentModels]) -> Result<Vec<StateTable>> {
    models
        .iter()
        .map(|m| {
            let i = m.policy.spec.agent;
            let opp_ix = game.indexer().without(i);
            (0..game.state_count())
                .map(|s| {
                    let obs = game.observe(&s, i);
                    match (&m.opponent, m.policy.correlated) {
                        (Some(o), true) => {
                            let sigma = opponent_joint(o, &obs)?;
                            let mut acc = vec![0.0; m.policy.spec.own_actions()];
                            for (oi, &w) in sigma.iter().enumerate() {
                                let p = m.policy.probs(&obs, Some(&opp_ix.actions(oi)))?;
                                for (a, pa) in acc.iter_mut().zip(p) {
                                    *a += w * pa;
                                }
                            }
                            Ok(acc)
                        }
                        _ => m.policy.probs(&obs, None),
                    }
                })
                .collect()
        })
        .collect()
}
