//! Continuous-state, discrete-action particle scenarios.
//!
//! | scenario        | agents                           | landmarks |
//! |-----------------|----------------------------------|-----------|
//! | `coop_comm`     | speaker (unmovable), listener    | 3         |
//! | `coop_navi`     | 3 movers                         | 3         |
//! | `keep_away`     | agent, adversary                 | 1         |
//! | `predator_prey` | prey, 3 predators (prey faster)  | 0         |
//!
//! Movable agents choose among `{noop, +x, -x, +y, -y}` accelerations. The
//! speaker chooses one of three messages, which the listener sees on the next
//! step.
//!
//! Observation layout for agent `i` (all scenarios):
//!
//! ```text
//! [own x, own y, own vx, own vy,
//!  landmark_k - own (2 per landmark, in landmark order),
//!  agent_j - own (2 per other agent, ascending j),
//!  extras]
//! ```
//!
//! Extras are the goal one-hot (3) for the speaker and the last received
//! message one-hot (3, all zero before the first message) for the listener.
//! `coop_navi` observations have length 14, `coop_comm` 15, `keep_away` 8 and
//! `predator_prey` 10.
//!
//! Encoded state: `[x, y, vx, vy]` per agent, `[x, y]` per landmark, then goal
//! and message indices (`-1` when absent).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::MarkovGame;
use crate::rng::{self, StreamRng};

pub const MOVE_ACTIONS: usize = 5;
pub const MESSAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    CoopComm,
    CoopNavi,
    KeepAway,
    PredatorPrey,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::CoopComm,
        ScenarioKind::CoopNavi,
        ScenarioKind::KeepAway,
        ScenarioKind::PredatorPrey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::CoopComm => "coop_comm",
            ScenarioKind::CoopNavi => "coop_navi",
            ScenarioKind::KeepAway => "keep_away",
            ScenarioKind::PredatorPrey => "predator_prey",
        }
    }

    pub fn agent_count(self) -> usize {
        match self {
            ScenarioKind::CoopComm | ScenarioKind::KeepAway => 2,
            ScenarioKind::CoopNavi => 3,
            ScenarioKind::PredatorPrey => 4,
        }
    }

    pub fn landmark_count(self) -> usize {
        match self {
            ScenarioKind::CoopComm | ScenarioKind::CoopNavi => 3,
            ScenarioKind::KeepAway => 1,
            ScenarioKind::PredatorPrey => 0,
        }
    }

    pub fn is_cooperative(self) -> bool {
        matches!(self, ScenarioKind::CoopComm | ScenarioKind::CoopNavi)
    }

    /// Reporting groups: one team for cooperative tasks, two sides otherwise.
    pub fn teams(self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            ScenarioKind::CoopComm => vec![("team", vec![0, 1])],
            ScenarioKind::CoopNavi => vec![("team", vec![0, 1, 2])],
            ScenarioKind::KeepAway => vec![("agent+", vec![0]), ("agent-", vec![1])],
            ScenarioKind::PredatorPrey => vec![("agent+", vec![0]), ("agent-", vec![1, 2, 3])],
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario '{s}' (expected coop_comm, coop_navi, keep_away or predator_prey)")))
    }
}

/// How landmarks are placed at the start of an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkMode {
    /// Drawn once from the placement seed and shared by every episode.
    #[default]
    Fixed,
    /// Drawn from the episode stream at every reset.
    Resampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    #[serde(default = "defaults::arena")]
    pub arena_half_width: f64,
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default = "defaults::damping")]
    pub damping: f64,
    #[serde(default = "defaults::accel")]
    pub accel: f64,
    #[serde(default = "defaults::predator_accel")]
    pub predator_accel: f64,
    #[serde(default = "defaults::prey_accel")]
    pub prey_accel: f64,
    /// Must equal the roster's count when given.
    #[serde(default)]
    pub landmarks: Option<usize>,
    #[serde(default)]
    pub placement_seed: u64,
    #[serde(default)]
    pub landmark_mode: LandmarkMode,
    #[serde(default = "defaults::collision_radius")]
    pub collision_radius: f64,
    #[serde(default = "defaults::one")]
    pub distance_weight: f64,
    #[serde(default = "defaults::one")]
    pub collision_penalty: f64,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::discount")]
    pub discount: f64,
}

mod defaults {
    pub fn arena() -> f64 {
        1.0
    }
    pub fn dt() -> f64 {
        0.1
    }
    pub fn damping() -> f64 {
        0.75
    }
    pub fn accel() -> f64 {
        5.0
    }
    pub fn predator_accel() -> f64 {
        3.0
    }
    pub fn prey_accel() -> f64 {
        4.0
    }
    pub fn collision_radius() -> f64 {
        0.15
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn horizon() -> usize {
        50
    }
    pub fn discount() -> f64 {
        0.95
    }
}

impl ScenarioConfig {
    pub fn new(scenario: ScenarioKind) -> Self {
        ScenarioConfig {
            scenario,
            arena_half_width: defaults::arena(),
            dt: defaults::dt(),
            damping: defaults::damping(),
            accel: defaults::accel(),
            predator_accel: defaults::predator_accel(),
            prey_accel: defaults::prey_accel(),
            landmarks: None,
            placement_seed: 0,
            landmark_mode: LandmarkMode::Fixed,
            collision_radius: defaults::collision_radius(),
            distance_weight: 1.0,
            collision_penalty: 1.0,
            horizon: defaults::horizon(),
            discount: defaults::discount(),
        }
    }

    /// Every violated constraint, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            v.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(0.0..1.0).contains(&self.damping) {
            v.push(format!("damping must be in [0, 1), got {}", self.damping));
        }
        if !(self.arena_half_width > 0.0 && self.arena_half_width.is_finite()) {
            v.push(format!("arena_half_width must be positive, got {}", self.arena_half_width));
        }
        for (name, a) in [
            ("accel", self.accel),
            ("predator_accel", self.predator_accel),
            ("prey_accel", self.prey_accel),
        ] {
            if !(a > 0.0 && a.is_finite()) {
                v.push(format!("{name} must be positive, got {a}"));
            }
        }
        if self.scenario == ScenarioKind::PredatorPrey && self.prey_accel <= self.predator_accel {
            v.push("prey_accel must exceed predator_accel".into());
        }
        if let Some(n) = self.landmarks {
            let want = self.scenario.landmark_count();
            if n != want {
                v.push(format!("{} needs exactly {want} landmarks, got {n}", self.scenario));
            }
        }
        if !(self.collision_radius >= 0.0 && self.collision_radius.is_finite()) {
            v.push(format!("collision_radius must be non-negative, got {}", self.collision_radius));
        }
        if !self.distance_weight.is_finite() || !self.collision_penalty.is_finite() {
            v.push("reward weights must be finite".into());
        }
        if self.horizon == 0 {
            v.push("horizon must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            v.push(format!("discount must be in [0, 1), got {}", self.discount));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub pos: Vec<[f64; 2]>,
    pub vel: Vec<[f64; 2]>,
    pub landmarks: Vec<[f64; 2]>,
    /// Target landmark of the listener (coop_comm).
    pub goal: Option<usize>,
    /// Last message sent by the speaker (coop_comm).
    pub message: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ParticleGame {
    config: ScenarioConfig,
    action_counts: Vec<usize>,
    fixed_landmarks: Vec<[f64; 2]>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn uniform_point(half: f64, rng: &mut StreamRng) -> [f64; 2] {
    [rng.random_range(-half..half), rng.random_range(-half..half)]
}

pub fn make_scenario(config: ScenarioConfig) -> Result<ParticleGame> {
    ParticleGame::new(config)
}

impl ParticleGame {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        let v = config.violations();
        if !v.is_empty() {
            return Err(Error::Config(v.join("; ")));
        }
        let kind = config.scenario;
        let action_counts = match kind {
            ScenarioKind::CoopComm => vec![MESSAGES, MOVE_ACTIONS],
            _ => vec![MOVE_ACTIONS; kind.agent_count()],
        };
        let mut placement = rng::seeded(config.placement_seed);
        let fixed_landmarks = (0..kind.landmark_count())
            .map(|_| uniform_point(config.arena_half_width, &mut placement))
            .collect();
        Ok(ParticleGame {
            config,
            action_counts,
            fixed_landmarks,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn kind(&self) -> ScenarioKind {
        self.config.scenario
    }

    pub fn is_movable(&self, agent: usize) -> bool {
        !(self.kind() == ScenarioKind::CoopComm && agent == 0)
    }

    pub fn max_accel(&self, agent: usize) -> f64 {
        match self.kind() {
            ScenarioKind::PredatorPrey if agent == 0 => self.config.prey_accel,
            ScenarioKind::PredatorPrey => self.config.predator_accel,
            _ => self.config.accel,
        }
    }

    /// Acceleration vector of a movement action.
    pub fn action_accel(&self, agent: usize, action: usize) -> [f64; 2] {
        let a = self.max_accel(agent);
        match action {
            1 => [a, 0.0],
            2 => [-a, 0.0],
            3 => [0.0, a],
            4 => [0.0, -a],
            _ => [0.0, 0.0],
        }
    }

    /// Integrates one step of motion; non-movement state is left untouched.
    pub fn physics_step(&self, state: &WorldState, joint: &[usize]) -> WorldState {
        let c = &self.config;
        let half = c.arena_half_width;
        let mut next = state.clone();
        for i in 0..state.pos.len() {
            if !self.is_movable(i) {
                next.vel[i] = [0.0, 0.0];
                continue;
            }
            let acc = self.action_accel(i, joint[i]);
            for d in 0..2 {
                let v = c.damping * state.vel[i][d] + acc[d] * c.dt;
                next.vel[i][d] = v;
                next.pos[i][d] = (state.pos[i][d] + v * c.dt).clamp(-half, half);
            }
        }
        next
    }

    fn collisions(&self, state: &WorldState, a: usize, b: usize) -> f64 {
        if dist(state.pos[a], state.pos[b]) < self.config.collision_radius {
            1.0
        } else {
            0.0
        }
    }

    fn rewards_after(&self, s: &WorldState) -> Vec<f64> {
        let w = self.config.distance_weight;
        let c = self.config.collision_penalty;
        match self.kind() {
            ScenarioKind::CoopNavi => {
                let cover: f64 = s
                    .landmarks
                    .iter()
                    .map(|&l| s.pos.iter().map(|&p| dist(p, l)).fold(f64::INFINITY, f64::min))
                    .sum();
                let mut hits = 0.0;
                for a in 0..3 {
                    for b in a + 1..3 {
                        hits += self.collisions(s, a, b);
                    }
                }
                vec![-w * cover - c * hits; 3]
            }
            ScenarioKind::CoopComm => {
                let goal = s.landmarks[s.goal.unwrap_or(0)];
                vec![-w * dist(s.pos[1], goal); 2]
            }
            ScenarioKind::KeepAway => {
                let lm = s.landmarks[0];
                let (d_agent, d_adv) = (dist(s.pos[0], lm), dist(s.pos[1], lm));
                let hit = self.collisions(s, 0, 1);
                vec![-w * d_agent - c * hit, w * (d_agent - d_adv) + c * hit]
            }
            ScenarioKind::PredatorPrey => {
                let d: Vec<f64> = (1..4).map(|k| dist(s.pos[0], s.pos[k])).collect();
                let hits: f64 = (1..4).map(|k| self.collisions(s, 0, k)).sum();
                let closest = d.iter().cloned().fold(f64::INFINITY, f64::min);
                let prey = w * d.iter().sum::<f64>() - c * hits;
                let predator = -w * closest + c * hits;
                vec![prey, predator, predator, predator]
            }
        }
    }

    fn transition(&self, state: &WorldState, joint: &[usize]) -> WorldState {
        let mut next = self.physics_step(state, joint);
        if self.kind() == ScenarioKind::CoopComm {
            next.message = Some(joint[0]);
        }
        next
    }

    /// Positions of movable agents, the quantity whose density is compared.
    pub fn movable_positions(&self, encoded: &[f64]) -> Vec<(usize, [f64; 2])> {
        (0..self.agent_count())
            .filter(|&i| self.is_movable(i))
            .map(|i| (i, [encoded[4 * i], encoded[4 * i + 1]]))
            .collect()
    }

    pub fn encoded_len(&self) -> usize {
        4 * self.agent_count() + 2 * self.kind().landmark_count() + 2
    }
}

impl MarkovGame for ParticleGame {
    type State = WorldState;

    fn scenario_id(&self) -> String {
        self.kind().name().to_string()
    }

    fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    fn discount(&self) -> f64 {
        self.config.discount
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn initial_state(&self, rng: &mut StreamRng) -> WorldState {
        let half = self.config.arena_half_width;
        let n = self.agent_count();
        let pos = (0..n).map(|_| uniform_point(half, rng)).collect();
        let landmarks = match self.config.landmark_mode {
            LandmarkMode::Fixed => self.fixed_landmarks.clone(),
            LandmarkMode::Resampled => (0..self.kind().landmark_count()).map(|_| uniform_point(half, rng)).collect(),
        };
        let goal = (self.kind() == ScenarioKind::CoopComm).then(|| rng.random_range(0..MESSAGES));
        WorldState {
            pos,
            vel: vec![[0.0, 0.0]; n],
            landmarks,
            goal,
            message: None,
        }
    }

    fn rewards(&self, state: &WorldState, joint: &[usize]) -> Vec<f64> {
        self.rewards_after(&self.transition(state, joint))
    }

    fn sample_next(&self, state: &WorldState, joint: &[usize], _rng: &mut StreamRng) -> WorldState {
        self.transition(state, joint)
    }

    fn observation_dim(&self, _agent: usize) -> usize {
        let n = self.agent_count();
        let extras = if self.kind() == ScenarioKind::CoopComm { MESSAGES } else { 0 };
        4 + 2 * self.kind().landmark_count() + 2 * (n - 1) + extras
    }

    fn observe(&self, s: &WorldState, agent: usize) -> Vec<f64> {
        let me = s.pos[agent];
        let mut o = Vec::with_capacity(self.observation_dim(agent));
        o.extend_from_slice(&me);
        o.extend_from_slice(&s.vel[agent]);
        for l in &s.landmarks {
            o.extend_from_slice(&[l[0] - me[0], l[1] - me[1]]);
        }
        for (j, p) in s.pos.iter().enumerate() {
            if j != agent {
                o.extend_from_slice(&[p[0] - me[0], p[1] - me[1]]);
            }
        }
        if self.kind() == ScenarioKind::CoopComm {
            let slot = if agent == 0 { s.goal } else { s.message };
            let mut hot = [0.0; MESSAGES];
            if let Some(k) = slot {
                hot[k] = 1.0;
            }
            o.extend_from_slice(&hot);
        }
        o
    }

    fn encode_state(&self, s: &WorldState) -> Vec<f64> {
        let mut e = Vec::with_capacity(self.encoded_len());
        for (p, v) in s.pos.iter().zip(&s.vel) {
            e.extend_from_slice(&[p[0], p[1], v[0], v[1]]);
        }
        for l in &s.landmarks {
            e.extend_from_slice(l);
        }
        e.push(s.goal.map_or(-1.0, |g| g as f64));
        e.push(s.message.map_or(-1.0, |m| m as f64));
        e
    }

    fn decode_state(&self, e: &[f64]) -> Result<WorldState> {
        if e.len() != self.encoded_len() {
            return Err(Error::Shape {
                context: "encoded particle state",
                expected: self.encoded_len(),
                got: e.len(),
            });
        }
        if e.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidState("non-finite coordinate".into()));
        }
        let n = self.agent_count();
        let pos = (0..n).map(|i| [e[4 * i], e[4 * i + 1]]).collect();
        let vel = (0..n).map(|i| [e[4 * i + 2], e[4 * i + 3]]).collect();
        let base = 4 * n;
        let landmarks = (0..self.kind().landmark_count())
            .map(|k| [e[base + 2 * k], e[base + 2 * k + 1]])
            .collect();
        let index = |x: f64| -> Result<Option<usize>> {
            if x == -1.0 {
                Ok(None)
            } else if x >= 0.0 && x.fract() == 0.0 && (x as usize) < MESSAGES {
                Ok(Some(x as usize))
            } else {
                Err(Error::InvalidState(format!("bad goal/message slot {x}")))
            }
        };
        let tail = self.encoded_len() - 2;
        Ok(WorldState {
            pos,
            vel,
            landmarks,
            goal: index(e[tail])?,
            message: index(e[tail + 1])?,
        })
    }
}
