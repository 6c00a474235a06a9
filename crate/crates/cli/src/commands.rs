//! Subcommand pipelines. Each writes its outputs into a run directory.

use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use codail::ail::{self, init_models, write_log, AgentModels, LogRecord, Trained};
use codail::demonstrator::{self, generate_demonstrations, train_demonstrators_observed, QualityReport};
use codail::eval::{self, GroupStat};
use codail::experiments::{sweep_with, SweepSetup};
use codail::particle::{ParticleGame, ScenarioConfig, ScenarioKind};
use codail::verify::{self, Check};
use codail::{fixtures, InteractionBatch, MarkovGame, Policy, TabularGame};

use crate::config::Settings;
use crate::plot;
use crate::rundir::{recorded_command, RunDir};
use crate::{CheckFailure, UsageError};

/// A game named by the `scenario` setting.
pub enum Task {
    Particle(ParticleGame),
    Tabular(TabularGame),
}

macro_rules! with_game {
    ($task:expr, $g:ident => $body:expr) => {
        match $task {
            Task::Particle($g) => $body,
            Task::Tabular($g) => $body,
        }
    };
}

impl Task {
    /// Particle scenario name, `fixture:<name>`, or a path to a `.game` file.
    pub fn parse(spec: &str) -> Result<Task> {
        if let Some(name) = spec.strip_prefix("fixture:") {
            return Ok(Task::Tabular(fixtures::by_name(name)?));
        }
        if spec.ends_with(".game") {
            return Ok(Task::Tabular(TabularGame::load(Path::new(spec))?));
        }
        let kind = ScenarioKind::from_str(spec)?;
        Ok(Task::Particle(ParticleGame::new(ScenarioConfig::new(kind))?))
    }

    pub fn particle(&self, what: &str) -> Result<&ParticleGame> {
        match self {
            Task::Particle(g) => Ok(g),
            Task::Tabular(_) => Err(UsageError(format!("{what} needs a particle scenario")).into()),
        }
    }
}

/// Writes per-agent checkpoints every `every` epochs.
struct Checkpointer<'a> {
    run: &'a RunDir,
    every: usize,
}

impl Checkpointer<'_> {
    fn on_epoch(&self, epoch: usize, models: &[&AgentModels]) -> codail::Result<()> {
        let done = epoch + 1;
        if self.every == 0 || done % self.every != 0 {
            return Ok(());
        }
        save_models(&self.run.file(format!("checkpoints/epoch-{done:05}")), models.iter().copied())
    }
}

fn save_models<'m>(dir: &Path, models: impl IntoIterator<Item = &'m AgentModels>) -> codail::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| codail::Error::io(dir, e))?;
    for (i, m) in models.into_iter().enumerate() {
        let p = dir.join(format!("agent{i}.ckpt"));
        let f = std::fs::File::create(&p).map_err(|e| codail::Error::io(&p, e))?;
        let mut w = std::io::BufWriter::new(f);
        m.write_checkpoint(&mut w).map_err(|e| codail::Error::io(&p, e))?;
        std::io::Write::flush(&mut w).map_err(|e| codail::Error::io(&p, e))?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn metrics_csv(log: &[LogRecord]) -> String {
    let mut out = String::from("epoch,agent,d_loss,pg_loss,opp_ce,entropy,mean_surrogate_reward,value_loss,mean_env_reward\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{:?},{},{:?},{:?},{:?},{:?}\n",
            r.epoch,
            r.agent,
            opt(r.d_loss),
            r.pg_loss,
            opt(r.opp_ce),
            r.entropy,
            r.mean_surrogate_reward,
            r.value_loss,
            r.mean_env_reward
        ));
    }
    out
}

fn training_plot(log: &[LogRecord], adversarial: bool) -> String {
    let agents = log.iter().map(|r| r.agent + 1).max().unwrap_or(0);
    let series = (0..agents)
        .map(|a| {
            let pts = log
                .iter()
                .filter(|r| r.agent == a)
                .map(|r| (r.epoch as f64, if adversarial { r.mean_surrogate_reward } else { r.mean_env_reward }))
                .collect();
            (format!("agent {a}"), pts)
        })
        .collect::<Vec<_>>();
    let title = if adversarial { "mean surrogate reward" } else { "mean environment reward" };
    plot::line_chart(title, "epoch", &series)
}

/// Log, metrics table, curve plot and final checkpoints of a training run.
fn save_training(run: &RunDir, dir: &str, trained: &Trained, adversarial: bool) -> Result<()> {
    let mut log = Vec::new();
    write_log(&mut log, &trained.log)?;
    run.write(format!("{dir}log.jsonl"), log)?;
    run.write(format!("{dir}metrics.csv"), metrics_csv(&trained.log))?;
    run.write(format!("{dir}training.svg"), training_plot(&trained.log, adversarial))?;
    save_models(&run.file(format!("{dir}checkpoints/final")), &trained.models)?;
    Ok(())
}

fn quality_json(run: &RunDir, q: &QualityReport) -> Result<()> {
    run.write("quality.json", serde_json::to_string_pretty(q)? + "\n")?;
    Ok(())
}

pub fn demo_train(s: &Settings, run: &RunDir) -> Result<()> {
    let task = Task::parse(&s.scenario)?;
    let cfg = &s.demonstrator.trainer;
    let ck = Checkpointer {
        run,
        every: s.checkpoint_every,
    };
    let trained = with_game!(&task, g => train_demonstrators_observed(g, cfg, &mut |e, m| ck.on_epoch(e, m)))?;
    save_training(run, "", &trained, false)?;
    let quality = match &task {
        Task::Particle(g) => {
            let team = &g.kind().teams()[0].1;
            demonstrator::particle_quality(g, &trained.models, team, s.demonstrator.quality_episodes, s.demonstrator.margin, s.demonstrator.seed ^ 0x9e37)?
        }
        Task::Tabular(g) => demonstrator::tabular_quality(g, &trained.models, 0.05)?,
    };
    quality_json(run, &quality)?;
    println!(
        "demonstrators {}: statistic {:.4} threshold {:.4} ({})",
        if quality.accepted { "accepted" } else { "rejected" },
        quality.statistic,
        quality.threshold,
        quality.detail
    );
    Ok(())
}

/// Settings and final models of a `demo-train` or `imitate` run directory.
pub fn load_models(dir: &Path) -> Result<(Settings, Task, Vec<AgentModels>)> {
    let settings = Settings::load(&dir.join("config.toml"))?;
    let task = Task::parse(&settings.scenario)?;
    let command = recorded_command(dir)?;
    let mut models = with_game!(&task, g => match command.as_str() {
        "demo-train" => init_models(g, &settings.demonstrator.trainer, true, None),
        "imitate" => {
            let a = settings.trainer.algorithm;
            init_models(g, &settings.trainer, a.correlated(), a.variant())
        }
        other => return Err(UsageError(format!("{} holds a {other} run, not trained models", dir.display())).into()),
    });
    for (i, m) in models.iter_mut().enumerate() {
        let p = dir.join(format!("checkpoints/final/agent{i}.ckpt"));
        let f = std::fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
        m.load_checkpoint(std::io::BufReader::new(f)).with_context(|| format!("loading {}", p.display()))?;
    }
    Ok((settings, task, models))
}

fn group_table(stats: &[GroupStat]) -> String {
    let mut out = String::from("group,mean,std\n");
    for g in stats {
        out.push_str(&format!("{},{:?},{:?}\n", g.name, g.mean, g.std));
    }
    out
}

fn groups_of(task: &Task) -> Vec<(String, Vec<usize>)> {
    match task {
        Task::Particle(g) => g.kind().teams().into_iter().map(|(n, a)| (n.to_string(), a)).collect(),
        Task::Tabular(g) => (0..g.agent_count()).map(|i| (format!("agent{i}"), vec![i])).collect(),
    }
}

pub fn demo_generate(s: &Settings, run: &RunDir, demonstrators: &Path) -> Result<()> {
    let (_, task, models) = load_models(demonstrators)?;
    let d = &s.demonstrator;
    let batch = with_game!(&task, g => generate_demonstrations(g, &models, d.episodes, d.horizon, d.seed))?;
    let path = run.file("demos.jsonl");
    batch.save(&path)?;
    let stats = eval::group_stats(&batch, &groups_of(&task))?;
    run.write("returns.csv", group_table(&stats))?;
    println!("wrote {} episodes ({} steps) to {}", batch.episodes.len(), batch.step_count(), path.display());
    Ok(())
}

pub fn imitate(s: &Settings, run: &RunDir, demos: &Path) -> Result<()> {
    let task = Task::parse(&s.scenario)?;
    let batch = InteractionBatch::load(demos)?;
    let ck = Checkpointer {
        run,
        every: s.checkpoint_every,
    };
    let trained = with_game!(&task, g => ail::train_observed(g, &batch, &s.trainer, &mut |e, m| ck.on_epoch(e, m)))?;
    save_training(run, "", &trained, s.trainer.algorithm != ail::Algorithm::Bc)?;
    println!(
        "{} trained for {} epochs; cross-agent parameter reads: {}",
        s.trainer.algorithm, s.trainer.epochs, trained.foreign_reads
    );
    Ok(())
}

pub fn evaluate(s: &Settings, run: &RunDir, models_dir: &Path, demos: &Path) -> Result<()> {
    let (_, task, models) = load_models(models_dir)?;
    let batch = InteractionBatch::load(demos)?;
    let actors: Vec<_> = models.iter().map(AgentModels::actor).collect();
    let policies: Vec<&dyn Policy> = actors.iter().map(|a| a as &dyn Policy).collect();
    let stats = eval::group_stats(&batch, &groups_of(&task))?;
    let gaps = with_game!(&task, g => eval::reward_gap(g, &policies, &stats, s.eval.episodes, s.eval.seed))?;
    let mut table = String::from("group,gap_mean,gap_std\n");
    for g in &gaps {
        table.push_str(&format!("{},{:?},{:?}\n", g.name, g.mean, g.std));
        println!("reward gap {}: {:.4} ± {:.4}", g.name, g.mean, g.std);
    }
    run.write("reward_gap.csv", table)?;
    if let Task::Particle(g) = &task {
        let generated = s.eval.play(g, &policies)?;
        let reference = eval::positions_from_batch(g, &batch);
        let kl = s.eval.kl(g, &generated, &reference)?;
        let mut table = format!("scope,kl\ntotal,{:?}\nper,{:?}\n", kl.total, kl.per);
        for (a, v) in &kl.per_agent {
            table.push_str(&format!("agent{a},{v:?}\n"));
        }
        run.write("kl.csv", table)?;
        println!("position KL: total {:.4}, per {:.4}", kl.total, kl.per);
        let samples = eval::positions_from_batch(g, &generated);
        eval::export_density(&samples, &s.eval.grid(g)?, s.eval.bandwidth, &run.file("density"))?;
    }
    Ok(())
}

/// Which verification checks `oracle-verify` runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    All,
    Oracle,
    Gradient,
    Discriminator,
}

pub fn checks_for(suite: Suite, seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::All | Suite::Oracle) {
        checks.extend(verify::oracle_suite(&fixtures::all()?, seed));
    }
    if matches!(suite, Suite::All | Suite::Gradient) {
        checks.extend(verify::gradient_suite(50, seed));
    }
    if matches!(suite, Suite::All | Suite::Discriminator) {
        checks.push(verify::discriminator_ratio_check(4000, seed).unwrap_or_else(|e| Check::errored("discriminator density ratio", &e)));
    }
    Ok(checks)
}

pub fn oracle_verify(run: &RunDir, suite: Suite, seed: u64) -> Result<()> {
    let checks = checks_for(suite, seed)?;
    let mut table = String::from("check,passed,value,threshold,detail\n");
    for c in &checks {
        println!("{c}");
        table.push_str(&format!("{},{},{:?},{:?},\"{}\"\n", c.name, c.passed, c.value, c.threshold, c.detail.replace('"', "'")));
    }
    run.write("report.csv", table)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CheckFailure(format!("{failed} of {} checks failed", checks.len())).into());
    }
    Ok(())
}

pub fn sweep(s: &Settings, run: &RunDir) -> Result<()> {
    let task = Task::parse(&s.scenario)?;
    let game = task.particle("sweep")?;
    let setup = SweepSetup {
        scenario: game.config().clone(),
        demonstrator: s.demonstrator.clone(),
        ratios: s.sweep.ratios.clone(),
        learner: s.trainer.clone(),
        eval: s.eval.clone(),
    };
    let mut runs = Vec::new();
    let report = sweep_with(&setup, &mut |ratio, trained| {
        runs.push((ratio, trained.clone()));
        Ok(())
    })?;
    for (ratio, trained) in &runs {
        save_training(run, &format!("ratio-{}x{}/", ratio.d, ratio.g), trained, true)?;
    }
    run.write("sweep.csv", report.to_csv())?;
    let bars: Vec<(String, f64)> = report.rows.iter().map(|r| (r.ratio.to_string(), r.reward_gap)).collect();
    run.write("sweep.svg", plot::bar_chart("reward gap by D:G ratio", "D:G", &bars))?;
    print!("{}", report.to_csv());
    println!(
        "ratio with G at least as frequent as D in top two: {}",
        report.generator_favoured_in_top_two()
    );
    Ok(())
}

pub fn plot_export(s: &Settings, run: &RunDir, samples: &Path) -> Result<()> {
    let task = Task::parse(&s.scenario)?;
    let game = task.particle("plot-export")?;
    let batch = InteractionBatch::load(samples)?;
    let positions = eval::positions_from_batch(game, &batch);
    let grids = eval::export_density(&positions, &s.eval.grid(game)?, s.eval.bandwidth, &run.file("density"))?;
    for (name, g) in &grids {
        println!("density_{name}: integral {:.4}", g.integral());
    }
    Ok(())
}
