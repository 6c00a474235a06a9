use codail::fixtures;
use codail::oracle::{self, AgentPolicy, TabularJointPolicy};
use codail::rng::seeded;
use codail::verify::{self, random_conditional, random_opponents, random_plain};
use codail::{Error, MarkovGame, TabularGame};
use proptest::prelude::*;

#[test]
fn fixtures_parse_with_expected_shapes() {
    let games = fixtures::all().unwrap();
    assert_eq!(games.len(), fixtures::names().len());
    let p = fixtures::by_name("pursuit").unwrap();
    assert_eq!((p.state_count(), p.action_counts()), (3, &[3, 2][..]));
    assert!(p.absorbing(2));
    assert_eq!(fixtures::by_name("three_agents").unwrap().agent_count(), 3);
    assert!(fixtures::by_name("nope").is_err());
}

#[test]
fn oracle_suite_passes_on_fixtures() {
    let games = fixtures::all().unwrap();
    for c in verify::oracle_suite(&games, 7) {
        assert!(c.passed, "{c}");
    }
}

#[test]
fn uniform_matching_pennies_is_an_exact_equilibrium() {
    let g = fixtures::by_name("matching_pennies").unwrap();
    let u = TabularJointPolicy::Product(vec![oracle::uniform_policy(&g, 0), oracle::uniform_policy(&g, 1)]);
    for gap in oracle::epsilon_ne_gap(&g, &u).unwrap() {
        assert!(gap.abs() <= 1e-8);
    }
    // Against a uniform opponent every action earns 0 per stage.
    assert!(oracle::best_response_value(&g, 0, &vec![vec![0.5, 0.5]]).unwrap().abs() < 1e-8);
}

#[test]
fn prisoners_defection_best_response_by_stage_analysis() {
    let g = fixtures::by_name("prisoners").unwrap();
    // Opponent cooperates with probability 0.7: defecting earns 0.7·5 + 0.3·1 per stage.
    let v = oracle::best_response_value(&g, 0, &vec![vec![0.7, 0.3]]).unwrap();
    assert!((v - (0.7 * 5.0 + 0.3 * 1.0) / (1.0 - 0.8)).abs() < 1e-8);
}

#[test]
fn entropy_bound_on_fixtures() {
    for name in ["coordination", "pursuit", "prisoners"] {
        let g = fixtures::by_name(name).unwrap();
        let mut r = seeded(3);
        let opp = random_opponents(&g, 0, &mut r);
        let lambda = 0.05;
        let demo = AgentPolicy::Plain(oracle::soft_best_response(&g, 0, &opp, lambda).unwrap());
        let candidates = verify::candidate_set(&g, 0, 20, 4);
        let c = verify::entropy_bound_check(&g, 0, &demo, &opp, &candidates, lambda).unwrap();
        assert!(c.passed, "{name}: {c}");
        // A demonstrator that is not soft-optimal is covered by its gap term.
        let other = AgentPolicy::Plain(random_plain(&g, 0, &mut r));
        assert!(verify::entropy_bound_check(&g, 0, &other, &opp, &candidates, lambda).unwrap().passed);
    }
}

#[test]
fn support_violation_names_the_pair() {
    let g = fixtures::by_name("prisoners").unwrap();
    let policy = AgentPolicy::Plain(vec![vec![0.5, 0.5]]);
    let err = oracle::importance_identity_check(&g, 0, &policy, &vec![vec![0.5, 0.5]], &vec![vec![1.0, 0.0]], |_, _| 1.0)
        .unwrap_err();
    match err {
        Error::SupportViolation { state, joint_action, .. } => {
            assert_eq!(state, 0);
            assert_eq!(joint_action[1], 1);
        }
        e => panic!("unexpected {e}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_is_normalized_and_nonnegative(seed in any::<u64>(), states in 1usize..5, gamma in 0.0f64..0.97) {
        let mut r = seeded(seed);
        let g = TabularGame::random(states, vec![2, 3], gamma, &mut r).unwrap();
        let occ = oracle::exact_occupancy(&g, &TabularJointPolicy::Correlated {
            agent: 1,
            conditional: random_conditional(&g, 1, &mut r),
            opponents: random_opponents(&g, 1, &mut r),
        }).unwrap();
        prop_assert!(occ.normalization_error() <= 1e-8);
        prop_assert!(occ.rho.iter().flatten().all(|x| *x >= 0.0));
    }

    #[test]
    fn identity_weights_reproduce_the_target(seed in any::<u64>(), states in 1usize..4) {
        let mut r = seeded(seed);
        let g = TabularGame::random(states, vec![2, 2], 0.9, &mut r).unwrap();
        let policy = AgentPolicy::Conditional(random_conditional(&g, 0, &mut r));
        let opp = random_opponents(&g, 0, &mut r);
        let (lhs, rhs) = oracle::importance_identity_check(&g, 0, &policy, &opp, &opp, |s, j| (s + j) as f64).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10);
        let (z1, z2) = oracle::importance_identity_check(&g, 0, &policy, &opp, &opp, |_, _| 0.0).unwrap();
        prop_assert_eq!((z1, z2), (0.0, 0.0));
    }

    #[test]
    fn best_response_dominates_every_deterministic_policy(seed in any::<u64>()) {
        let mut r = seeded(seed);
        let g = TabularGame::random(2, vec![2, 2], 0.8, &mut r).unwrap();
        let opp = random_opponents(&g, 1, &mut r);
        let br = oracle::best_response(&g, 1, &opp).unwrap();
        for dev in oracle::deterministic_policies(&g, 1) {
            let dev = AgentPolicy::Plain(dev);
            for s in 0..g.state_count() {
                let v = oracle::exact_value(&g, s, 1, &dev, &opp).unwrap();
                prop_assert!(v <= br.values[s] + 1e-8);
            }
        }
    }
}
