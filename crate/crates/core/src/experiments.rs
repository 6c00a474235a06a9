//! End-to-end experiments: correlation recovery on a stage game, the keep_away
//! position-density ordering, demonstrator certification on a small tabular
//! game, and the discriminator:policy frequency sweep.

use serde::{Deserialize, Serialize};

use crate::ail::{self, model_joint, tabular_marginals, AgentModels, Algorithm, Ratio, TrainerConfig};
use crate::demonstrator::{self, generate_demonstrations, sample_joint_demonstrations, train_demonstrators, QualityReport, Truncated};
use crate::error::{Error, Result};
use crate::eval::{self, Bandwidth, GridSpec, KlReport, PositionSample};
use crate::game::{rollout, InteractionBatch, MarkovGame, Policy, UniformPolicy};
use crate::oracle::{self, total_variation, AgentPolicy};
use crate::particle::{ParticleGame, ScenarioConfig, ScenarioKind};
use crate::tabular::TabularGame;
use crate::verify::{self, Check};

/// Smallest TV distance from a 2×2 joint table to any product p ⊗ q, searched on
/// a `resolution`-step grid over (p, q). Returns (tv, p, q), where p and q are
/// the probabilities of action 0 for the two agents.
pub fn best_product_fit(joint: &[f64], resolution: usize) -> Result<(f64, f64, f64)> {
    if joint.len() != 4 {
        return Err(Error::Shape {
            context: "2x2 joint table",
            expected: 4,
            got: joint.len(),
        });
    }
    let res = resolution.max(1);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=res {
        let p = i as f64 / res as f64;
        for j in 0..=res {
            let q = j as f64 / res as f64;
            let prod = [p * q, p * (1.0 - q), (1.0 - p) * q, (1.0 - p) * (1.0 - q)];
            let tv = total_variation(&prod, joint);
            if tv < best.0 {
                best = (tv, p, q);
            }
        }
    }
    Ok(best)
}

pub fn product_learners() -> [Algorithm; 2] {
    [Algorithm::Ncdail, Algorithm::Magail]
}

/// Imitation of a fixed non-product joint distribution on a one-state game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationSetup {
    /// Demonstrator joint over (a0, a1), agent 0 slowest.
    pub joint: Vec<f64>,
    pub seeds: Vec<u64>,
    pub demo_episodes: usize,
    pub demo_seed: u64,
    pub algorithms: Vec<Algorithm>,
    /// Template; `algorithm` and `seed` are set per run.
    pub trainer: TrainerConfig,
}

impl Default for CorrelationSetup {
    fn default() -> Self {
        CorrelationSetup {
            joint: vec![0.45, 0.05, 0.05, 0.45],
            seeds: (0..5).collect(),
            demo_episodes: demonstrator::DEFAULT_EPISODES,
            demo_seed: 1,
            algorithms: vec![Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail],
            trainer: TrainerConfig {
                epochs: 60,
                gamma: Some(0.0),
                lr: 1e-4,
                discriminator_lr: Some(1e-3),
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRun {
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Largest TV over agents between the agent's model of the joint and the target.
    pub tv: f64,
    pub joints: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub target: Vec<f64>,
    pub best_product_tv: f64,
    pub runs: Vec<CorrelationRun>,
}

impl CorrelationReport {
    pub fn tv(&self, seed: u64, algorithm: Algorithm) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed && r.algorithm == algorithm).map(|r| r.tv)
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    fn tvs(&self, algorithms: &[Algorithm]) -> impl Iterator<Item = f64> + '_ {
        let algorithms = algorithms.to_vec();
        self.runs.iter().filter(move |r| algorithms.contains(&r.algorithm)).map(|r| r.tv)
    }

    pub fn codail_max_tv(&self) -> f64 {
        self.tvs(&[Algorithm::Codail]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn product_min_tv(&self) -> f64 {
        self.tvs(&product_learners()).fold(f64::INFINITY, f64::min)
    }

    /// Seeds on which CoDAIL's TV is strictly below every other algorithm's.
    pub fn codail_strict_wins(&self) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| match self.tv(s, Algorithm::Codail) {
                Some(c) => self
                    .runs
                    .iter()
                    .filter(|r| r.seed == s && r.algorithm != Algorithm::Codail)
                    .all(|r| c < r.tv),
                None => false,
            })
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,algorithm,tv,best_product_tv\n");
        for r in &self.runs {
            out.push_str(&format!("{},{},{:?},{:?}\n", r.seed, r.algorithm, r.tv, self.best_product_tv));
        }
        out
    }
}

pub fn correlation_game(actions: &[usize]) -> Result<TabularGame> {
    TabularGame::repeated("correlation", actions.to_vec(), 0.9, 10, vec![vec![0.0; actions.len()]; actions.iter().product()])
}

pub fn correlation_experiment(setup: &CorrelationSetup) -> Result<CorrelationReport> {
    let game = correlation_game(&[2, 2])?;
    let table = vec![setup.joint.clone()];
    let demos = sample_joint_demonstrations(&game, &table, setup.demo_episodes, setup.demo_seed)?;
    let (best_product_tv, _, _) = best_product_fit(&setup.joint, 1000)?;
    let mut runs = Vec::new();
    for &seed in &setup.seeds {
        for &algorithm in &setup.algorithms {
            let cfg = TrainerConfig {
                algorithm,
                seed,
                ..setup.trainer.clone()
            };
            let trained = ail::train(&game, &demos, &cfg)?;
            let joints = (0..2)
                .map(|i| model_joint(&game, &trained.models, i, 0))
                .collect::<Result<Vec<_>>>()?;
            let tv = joints.iter().map(|j| total_variation(j, &setup.joint)).fold(0.0, f64::max);
            runs.push(CorrelationRun {
                seed,
                algorithm,
                tv,
                joints,
            });
        }
    }
    Ok(CorrelationReport {
        target: setup.joint.clone(),
        best_product_tv,
        runs,
    })
}

/// Shared evaluation protocol for particle scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub episodes: usize,
    pub horizon: usize,
    /// Same seed for every algorithm, so episode k starts from the same state.
    pub seed: u64,
    pub grid_resolution: usize,
    pub bandwidth: Bandwidth,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            episodes: eval::EVAL_EPISODES,
            horizon: eval::EVAL_HORIZON,
            seed: 7919,
            grid_resolution: eval::GRID_RESOLUTION,
            bandwidth: Bandwidth::default(),
        }
    }
}

impl EvalProtocol {
    pub fn grid(&self, game: &ParticleGame) -> Result<GridSpec> {
        GridSpec::arena(game.config().arena_half_width, self.grid_resolution)
    }

    /// Rolls out `policies` under the protocol.
    pub fn play(&self, game: &ParticleGame, policies: &[&dyn Policy]) -> Result<InteractionBatch> {
        if self.horizon == 0 || self.horizon > game.horizon() {
            return Err(Error::Config(format!(
                "evaluation horizon must be in 1..={}, got {}",
                game.horizon(),
                self.horizon
            )));
        }
        rollout(&Truncated { game, horizon: self.horizon }, policies, self.episodes, self.seed)
    }

    pub fn play_models(&self, game: &ParticleGame, models: &[AgentModels]) -> Result<InteractionBatch> {
        let actors: Vec<_> = models.iter().map(AgentModels::actor).collect();
        let policies: Vec<&dyn Policy> = actors.iter().map(|a| a as &dyn Policy).collect();
        self.play(game, &policies)
    }

    pub fn play_random(&self, game: &ParticleGame) -> Result<InteractionBatch> {
        let uniform: Vec<UniformPolicy> = game.action_counts().iter().map(|&n| UniformPolicy { actions: n }).collect();
        let policies: Vec<&dyn Policy> = uniform.iter().map(|u| u as &dyn Policy).collect();
        self.play(game, &policies)
    }

    /// KDE-KL of generated positions to demonstrated positions.
    pub fn kl(&self, game: &ParticleGame, generated: &InteractionBatch, demos: &[PositionSample]) -> Result<KlReport> {
        let p = eval::positions_from_batch(game, generated);
        eval::kl_report(&p, demos, &self.grid(game)?, self.bandwidth)
    }
}

/// Demonstrators trained on a particle scenario plus their recorded demonstrations.
#[derive(Debug)]
pub struct DemoSet {
    pub models: Vec<AgentModels>,
    pub log: Vec<ail::LogRecord>,
    pub demos: InteractionBatch,
    pub quality: QualityReport,
}

/// Demonstrator stage shared by the ordering experiment and the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoStage {
    pub trainer: TrainerConfig,
    pub episodes: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Acceptance margin in random-policy standard deviations.
    pub margin: f64,
    pub quality_episodes: usize,
}

impl Default for DemoStage {
    fn default() -> Self {
        DemoStage {
            trainer: TrainerConfig {
                epochs: 200,
                lr: 1e-3,
                seed: 100,
                ..Default::default()
            },
            episodes: demonstrator::DEFAULT_EPISODES,
            horizon: demonstrator::DEFAULT_HORIZON,
            seed: 1,
            margin: 1.0,
            quality_episodes: 100,
        }
    }
}

impl DemoStage {
    pub fn run(&self, game: &ParticleGame) -> Result<DemoSet> {
        let trained = train_demonstrators(game, &self.trainer)?;
        let team = &game.kind().teams()[0].1;
        let quality = demonstrator::particle_quality(game, &trained.models, team, self.quality_episodes, self.margin, self.seed ^ 0x9e37)?;
        let demos = generate_demonstrations(game, &trained.models, self.episodes, self.horizon, self.seed)?;
        Ok(DemoSet {
            models: trained.models,
            log: trained.log,
            demos,
            quality,
        })
    }
}

/// Position-density ordering of the imitation learners on a particle scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrderingSetup {
    pub scenario: ScenarioConfig,
    pub demonstrator: DemoStage,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    /// Template; `algorithm` and `seed` are set per run.
    pub learner: TrainerConfig,
    pub eval: EvalProtocol,
}

impl Default for OrderingSetup {
    fn default() -> Self {
        OrderingSetup {
            scenario: ScenarioConfig::new(ScenarioKind::KeepAway),
            demonstrator: DemoStage::default(),
            seeds: (0..5).collect(),
            algorithms: vec![Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail],
            learner: TrainerConfig {
                epochs: 100,
                lr: 1e-4,
                discriminator_lr: Some(1e-3),
                ..Default::default()
            },
            eval: EvalProtocol::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingRun {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub kl: KlReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub demo_quality: QualityReport,
    pub random: KlReport,
    pub runs: Vec<OrderingRun>,
}

impl OrderingReport {
    pub fn kl(&self, seed: u64, algorithm: Algorithm) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.seed == seed && r.algorithm == algorithm)
            .map(|r| r.kl.total)
    }

    /// Seeds on which CoDAIL's total KL is below the median of the product learners'.
    pub fn codail_wins(&self) -> usize {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter(|&s| {
                let others: Option<Vec<f64>> = product_learners().iter().map(|&a| self.kl(s, a)).collect();
                match (self.kl(s, Algorithm::Codail), others) {
                    (Some(c), Some(o)) => c < median(&o),
                    _ => false,
                }
            })
            .count()
    }

    /// Smallest ratio of the random policy's KL to any learner's.
    pub fn worst_random_ratio(&self) -> f64 {
        self.runs
            .iter()
            .map(|r| self.random.total / r.kl.total.max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,algorithm,kl_total,kl_per\n");
        out.push_str(&format!("-,random,{:?},{:?}\n", self.random.total, self.random.per));
        for r in &self.runs {
            out.push_str(&format!("{},{},{:?},{:?}\n", r.seed, r.algorithm, r.kl.total, r.kl.per));
        }
        out
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn ordering_experiment(setup: &OrderingSetup) -> Result<OrderingReport> {
    let game = ParticleGame::new(setup.scenario.clone())?;
    let demo = setup.demonstrator.run(&game)?;
    let reference = eval::positions_from_batch(&game, &demo.demos);
    let random = setup.eval.kl(&game, &setup.eval.play_random(&game)?, &reference)?;
    let mut runs = Vec::new();
    for &seed in &setup.seeds {
        for &algorithm in &setup.algorithms {
            let cfg = TrainerConfig {
                algorithm,
                seed,
                ..setup.learner.clone()
            };
            let trained = ail::train(&game, &demo.demos, &cfg)?;
            let kl = setup.eval.kl(&game, &setup.eval.play_models(&game, &trained.models)?, &reference)?;
            runs.push(OrderingRun { seed, algorithm, kl });
        }
    }
    Ok(OrderingReport {
        demo_quality: demo.quality,
        random,
        runs,
    })
}

/// ε-NE certification of demonstrators trained on a small tabular game, plus
/// the entropy-bound inequality over a candidate set.
#[derive(Clone, Debug)]
pub struct CertificationSetup {
    pub game: TabularGame,
    pub trainer: TrainerConfig,
    /// Accepted gap as a fraction of the value scale.
    pub fraction: f64,
    pub random_candidates: usize,
    pub candidate_seed: u64,
}

impl CertificationSetup {
    pub fn new(game: TabularGame) -> Self {
        CertificationSetup {
            game,
            trainer: TrainerConfig {
                epochs: 300,
                batch_size: 500,
                hidden: 32,
                lr: 3e-3,
                ..Default::default()
            },
            fraction: 0.05,
            random_candidates: 20,
            candidate_seed: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CertificationReport {
    pub quality: QualityReport,
    pub bounds: Vec<Check>,
    pub foreign_reads: u64,
}

pub fn certify_demonstrators(setup: &CertificationSetup) -> Result<CertificationReport> {
    let g = &setup.game;
    if g.state_count() > 4 || g.agent_count() != 2 {
        return Err(Error::Config(format!(
            "certification expects a 2-agent game with at most 4 states, got {} agents and {} states",
            g.agent_count(),
            g.state_count()
        )));
    }
    let trained = train_demonstrators(g, &setup.trainer)?;
    let quality = demonstrator::tabular_quality(g, &trained.models, setup.fraction)?;
    let marginals = tabular_marginals(g, &trained.models)?;
    let bounds = (0..g.agent_count())
        .map(|i| {
            let opponents = oracle::product_opponents(g, i, &marginals);
            let candidates = verify::candidate_set(g, i, setup.random_candidates, setup.candidate_seed + i as u64);
            let own = AgentPolicy::Plain(marginals[i].clone());
            verify::entropy_bound_check(g, i, &own, &opponents, &candidates, setup.trainer.lambda).map(|mut c| {
                c.name = format!("entropy bound, agent {i}");
                c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CertificationReport {
        quality,
        bounds,
        foreign_reads: trained.foreign_reads,
    })
}

/// The five discriminator:policy update frequencies.
pub fn default_ratios() -> Vec<Ratio> {
    ["1:4", "1:2", "1:1", "2:1", "4:1"].iter().map(|s| s.parse().expect("valid ratio")).collect()
}

/// CoDAIL trained once per D:G ratio on shared demonstrations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSetup {
    pub scenario: ScenarioConfig,
    pub demonstrator: DemoStage,
    pub ratios: Vec<Ratio>,
    /// Template; `ratio` is set per run.
    pub learner: TrainerConfig,
    pub eval: EvalProtocol,
}

impl Default for SweepSetup {
    fn default() -> Self {
        SweepSetup {
            scenario: ScenarioConfig::new(ScenarioKind::CoopComm),
            demonstrator: DemoStage::default(),
            ratios: default_ratios(),
            learner: OrderingSetup::default().learner,
            eval: EvalProtocol::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: Ratio,
    /// Mean over episodes of |R_learned − R_demo| summed over reporting groups.
    pub reward_gap: f64,
    pub reward_gap_std: f64,
    pub kl_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Rows ordered by reward gap, best first.
    pub fn ranked(&self) -> Vec<&SweepRow> {
        let mut r: Vec<&SweepRow> = self.rows.iter().collect();
        r.sort_by(|a, b| a.reward_gap.total_cmp(&b.reward_gap));
        r
    }

    /// Whether a ratio with G updated at least as often as D ranks in the top two.
    pub fn generator_favoured_in_top_two(&self) -> bool {
        self.ranked().iter().take(2).any(|r| r.ratio.g >= r.ratio.d)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,reward_gap,reward_gap_std,kl_total,rank\n");
        let ranked = self.ranked();
        for r in &self.rows {
            let rank = ranked.iter().position(|x| x.ratio == r.ratio).map_or(0, |p| p + 1);
            out.push_str(&format!("{},{:?},{:?},{:?},{}\n", r.ratio, r.reward_gap, r.reward_gap_std, r.kl_total, rank));
        }
        out
    }
}

/// Per-episode sum over reporting groups of |R − demo mean|, mean and std.
pub fn total_reward_gap(game: &ParticleGame, generated: &InteractionBatch, demos: &InteractionBatch) -> Result<(f64, f64)> {
    let groups: Vec<(String, Vec<usize>)> = game.kind().teams().into_iter().map(|(n, a)| (n.to_string(), a)).collect();
    let demo_stats = eval::group_stats(demos, &groups)?;
    let per_episode: Vec<f64> = generated
        .episodes
        .iter()
        .map(|e| {
            demo_stats
                .iter()
                .map(|g| (g.agents.iter().map(|&i| crate::game::total_return(e, i)).sum::<f64>() - g.mean).abs())
                .sum()
        })
        .collect();
    Ok(demonstrator::mean_std(&per_episode))
}

pub fn sweep(setup: &SweepSetup) -> Result<SweepReport> {
    sweep_with(setup, &mut |_, _| Ok(()))
}

/// [`sweep`] calling `on_run` with every ratio's trained models and log.
pub fn sweep_with(setup: &SweepSetup, on_run: &mut dyn FnMut(Ratio, &ail::Trained) -> Result<()>) -> Result<SweepReport> {
    if setup.ratios.is_empty() {
        return Err(Error::Config("sweep needs at least one ratio".into()));
    }
    let game = ParticleGame::new(setup.scenario.clone())?;
    let demo = setup.demonstrator.run(&game)?;
    let reference = eval::positions_from_batch(&game, &demo.demos);
    let rows = setup
        .ratios
        .iter()
        .map(|&ratio| {
            let cfg = TrainerConfig {
                algorithm: Algorithm::Codail,
                ratio,
                ..setup.learner.clone()
            };
            let trained = ail::train(&game, &demo.demos, &cfg)?;
            on_run(ratio, &trained)?;
            let batch = setup.eval.play_models(&game, &trained.models)?;
            let (reward_gap, reward_gap_std) = total_reward_gap(&game, &batch, &demo.demos)?;
            let kl_total = setup.eval.kl(&game, &batch, &reference)?.total;
            Ok(SweepRow {
                ratio,
                reward_gap,
                reward_gap_std,
                kl_total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { rows })
}
