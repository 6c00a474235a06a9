use codail::ail::*;
use codail::demonstrator::sample_joint_demonstrations;
use codail::oracle::{exact_occupancy, occupancy_of_table, total_variation, TabularJointPolicy};
use codail::verify::discriminator_ratio_check;
use codail::{Error, InteractionBatch, TabularGame};

fn stage_game() -> TabularGame {
    TabularGame::repeated("stage", vec![2, 2], 0.9, 10, vec![vec![0.0, 0.0]; 4]).unwrap()
}

fn demos(joint: &[f64], episodes: usize) -> (TabularGame, InteractionBatch) {
    let g = stage_game();
    let b = sample_joint_demonstrations(&g, &vec![joint.to_vec()], episodes, 1).unwrap();
    (g, b)
}

fn quick(algorithm: Algorithm, epochs: usize) -> TrainerConfig {
    TrainerConfig {
        algorithm,
        epochs,
        batch_size: 200,
        hidden: 16,
        bc_steps: 20,
        gamma: Some(0.0),
        lr: 1e-3,
        ..Default::default()
    }
}

/// Minimum TV between `joint` and any product p ⊗ q, by exhaustive grid search.
fn best_product_tv(joint: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=1000 {
        for j in 0..=1000 {
            let (p, q) = (i as f64 / 1000.0, j as f64 / 1000.0);
            let prod = [p * q, p * (1.0 - q), (1.0 - p) * q, (1.0 - p) * (1.0 - q)];
            best = best.min(total_variation(&prod, joint));
        }
    }
    best
}

/// KL between two occupancy tables after normalizing each to a distribution.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    let (zp, zq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    let (p, q): (Vec<f64>, Vec<f64>) = (p.iter().map(|x| x / zp).collect(), q.iter().map(|x| x / zq).collect());
    p.iter().zip(&q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn executed_occupancy(g: &TabularGame, models: &[AgentModels]) -> Vec<f64> {
    let m = tabular_marginals(g, models).unwrap();
    let occ = exact_occupancy(g, &TabularJointPolicy::Product(m)).unwrap();
    occ.rho.concat()
}

fn checkpoints(models: &[AgentModels]) -> Vec<Vec<u8>> {
    models
        .iter()
        .map(|m| {
            let mut buf = Vec::new();
            m.write_checkpoint(&mut buf).unwrap();
            buf
        })
        .collect()
}

#[test]
fn trained_discriminator_recovers_density_ratio() {
    let check = discriminator_ratio_check(4000, 11).unwrap();
    assert!(check.passed, "{check}");
}

#[test]
fn identical_runs_give_identical_logs_and_checkpoints() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 50);
    for algo in [Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail] {
        let cfg = quick(algo, 3);
        let (x, y) = (train(&g, &b, &cfg).unwrap(), train(&g, &b, &cfg).unwrap());
        let (mut lx, mut ly) = (Vec::new(), Vec::new());
        write_log(&mut lx, &x.log).unwrap();
        write_log(&mut ly, &y.log).unwrap();
        assert_eq!(lx, ly, "{algo}");
        assert_eq!(checkpoints(&x.models), checkpoints(&y.models), "{algo}");
    }
}

#[test]
fn different_seeds_diverge() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 50);
    let x = train(&g, &b, &quick(Algorithm::Codail, 2)).unwrap();
    let y = train(&g, &b, &TrainerConfig { seed: 1, ..quick(Algorithm::Codail, 2) }).unwrap();
    assert_ne!(checkpoints(&x.models), checkpoints(&y.models));
}

#[test]
fn zero_epochs_return_pretrained_models() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 50);
    for algo in [Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail] {
        let cfg = quick(algo, 0);
        let t = train(&g, &b, &cfg).unwrap();
        assert!(t.log.is_empty());
        let mut expected = init_models(&g, &cfg, algo.correlated(), algo.variant());
        bc_pretrain(&mut expected, &expert_rows(&g, &b).unwrap(), cfg.bc_steps, &cfg).unwrap();
        assert_eq!(t.models, expected, "{algo}");
    }
}

#[test]
fn zero_bc_steps_leave_models_unchanged() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 20);
    let cfg = quick(Algorithm::Codail, 0);
    let init = init_models(&g, &cfg, true, Some(Variant::Joint));
    let mut models = init.clone();
    bc_pretrain(&mut models, &expert_rows(&g, &b).unwrap(), 0, &cfg).unwrap();
    assert_eq!(models, init);
}

#[test]
fn no_agent_reads_another_agents_parameters() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 50);
    for algo in [Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail] {
        let t = train(&g, &b, &quick(algo, 3)).unwrap();
        assert_eq!(t.foreign_reads, 0, "{algo}");
        assert!(t.own_reads > 0, "{algo}");
    }
}

#[test]
fn algorithm_mismatch_is_rejected() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 10);
    let cfg = quick(Algorithm::Ncdail, 1);
    assert!(matches!(codail_train(&g, &b, &cfg), Err(Error::Config(_))));
    assert!(matches!(magail_style_train(&g, &b, &cfg), Err(Error::Config(_))));
    assert!(matches!(ncdail_train(&g, &b, &quick(Algorithm::Codail, 1)), Err(Error::Config(_))));
}

#[test]
fn phases_run_in_algorithm_order() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 50);
    let expected = |algo: Algorithm| -> Vec<&'static str> {
        if algo.correlated() {
            vec!["opponent", "discriminator", "value", "policy"]
        } else {
            vec!["discriminator", "value", "policy"]
        }
    };
    for algo in [Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail] {
        let t = train(&g, &b, &quick(algo, 2)).unwrap();
        assert_eq!(t.log.len(), 2 * 2);
        for r in &t.log {
            assert_eq!(r.phases, expected(algo), "{algo} epoch {} agent {}", r.epoch, r.agent);
            assert!(r.d_loss.is_some());
            assert_eq!(r.opp_ce.is_some(), algo.correlated());
        }
        let order: Vec<(usize, usize)> = t.log.iter().map(|r| (r.epoch, r.agent)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }
}

#[test]
fn epoch_hook_sees_every_epoch_and_can_abort() {
    let (g, b) = demos(&[0.45, 0.05, 0.05, 0.45], 20);
    let mut seen = Vec::new();
    let t = train_observed(&g, &b, &quick(Algorithm::Codail, 3), &mut |e, m| {
        seen.push((e, m.len()));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(0, 2), (1, 2), (2, 2)]);
    assert_eq!(t.log.len(), 6);
    let r = train_observed(&g, &b, &quick(Algorithm::Codail, 3), &mut |_, _| Err(Error::Empty("stop")));
    assert!(r.is_err());
}

#[test]
fn bc_recovers_deterministic_demonstrator() {
    let (g, b) = demos(&[0.0, 0.0, 1.0, 0.0], 20);
    let cfg = TrainerConfig {
        bc_steps: 300,
        ..quick(Algorithm::Bc, 0)
    };
    let t = train(&g, &b, &cfg).unwrap();
    let margs = tabular_marginals(&g, &t.models).unwrap();
    let argmax = |p: &[f64]| (0..p.len()).max_by(|&x, &y| p[x].total_cmp(&p[y])).unwrap();
    assert_eq!(argmax(&margs[0][0]), 1);
    assert_eq!(argmax(&margs[1][0]), 0);
}

#[test]
fn bc_matches_stochastic_table() {
    let target = [0.3, 0.2, 0.1, 0.4];
    let (g, b) = demos(&target, 1000);
    assert_eq!(b.step_count(), 10_000);
    let cfg = TrainerConfig {
        bc_steps: 2000,
        ..quick(Algorithm::Bc, 0)
    };
    let t = train(&g, &b, &cfg).unwrap();
    for agent in 0..2 {
        let joint = model_joint(&g, &t.models, agent, 0).unwrap();
        let tv = total_variation(&joint, &target);
        assert!(tv <= 0.05, "agent {agent}: {joint:?} tv {tv}");
    }
}

#[test]
fn imitation_moves_occupancy_toward_demonstrator() {
    let target = vec![0.6, 0.1, 0.1, 0.2];
    let (g, b) = demos(&target, 100);
    let demo = occupancy_of_table(&g, &vec![target.clone()]).unwrap().rho.concat();
    for algo in [Algorithm::Codail, Algorithm::Ncdail, Algorithm::Magail] {
        let cfg = TrainerConfig {
            bc_steps: 0,
            batch_size: 1000,
            discriminator_lr: Some(1e-2),
            ..quick(algo, 100)
        };
        let before = kl(&executed_occupancy(&g, &init_models(&g, &cfg, algo.correlated(), algo.variant())), &demo);
        let t = train(&g, &b, &cfg).unwrap();
        let after = kl(&executed_occupancy(&g, &t.models), &demo);
        assert!(after < before, "{algo}: {after} !< {before}");
    }
}

#[test]
fn product_learners_cannot_beat_best_product_fit() {
    let target = [0.45, 0.05, 0.05, 0.45];
    let floor = best_product_tv(&target);
    assert!(floor > 0.3, "{floor}");
    let (g, b) = demos(&target, 100);
    for algo in [Algorithm::Ncdail, Algorithm::Magail] {
        let t = train(&g, &b, &quick(algo, 10)).unwrap();
        for agent in 0..2 {
            let tv = total_variation(&model_joint(&g, &t.models, agent, 0).unwrap(), &target);
            assert!(tv >= floor - 0.05, "{algo} agent {agent}: {tv} < {floor} - 0.05");
        }
    }
}
