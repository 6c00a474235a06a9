//! Acceptance gate. Each criterion prints one PASS/FAIL line on stderr, written
//! past the test harness capture so it shows in every run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use codail::ail::Algorithm;
use codail::eval::{density_grid, kl_divergence, Bandwidth, GridSpec};
use codail::experiments::*;
use codail::rng::seeded;
use codail::verify::{self, Check};
use codail::fixtures;
use rand_distr::{Distribution, Normal};

struct Outcome {
    passed: bool,
    line: String,
}

fn report(n: usize, title: &str, budget: Option<Duration>, started: Instant, passed: bool, detail: String) -> Outcome {
    let took = started.elapsed();
    let in_budget = budget.is_none_or(|b| took <= b);
    let passed = passed && in_budget;
    let budget_text = match budget {
        Some(b) => format!("{:.1}s of {}s", took.as_secs_f64(), b.as_secs()),
        None => format!("{:.1}s", took.as_secs_f64()),
    };
    let line = format!(
        "{} criterion {n} ({title}) [{budget_text}]: {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    Outcome { passed, line }
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn checks_detail(checks: &[Check]) -> (bool, String) {
    let ok = checks.iter().all(|c| c.passed);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let worst = checks
        .iter()
        .map(|c| format!("{} {:.2e}/{:.0e}", c.name, c.value, c.threshold))
        .collect::<Vec<_>>()
        .join("; ");
    if ok {
        (true, format!("{} checks; {worst}", checks.len()))
    } else {
        (false, failed.join(" | "))
    }
}

fn exactness() -> Outcome {
    let t = Instant::now();
    let checks = verify::oracle_suite(&fixtures::all().unwrap(), 0);
    let (ok, detail) = checks_detail(&checks);
    report(1, "exactness suite", minutes(1), t, ok, detail)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let checks = verify::gradient_suite(50, 0);
    let ok = checks.iter().all(|c| c.passed);
    let worst = checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let detail = format!("{} losses x 50 draws, worst relative error {worst:.2e} (limit 1e-4) {}", checks.len(), failed.join(" | "));
    report(2, "gradient suite", minutes(2), t, ok, detail)
}

fn certification() -> Outcome {
    let t = Instant::now();
    let game = fixtures::by_name("coordination").unwrap();
    let states = game.state_count();
    match certify_demonstrators(&CertificationSetup::new(game)) {
        Ok(r) => {
            let ok = r.quality.accepted && r.bounds.iter().all(|c| c.passed);
            let bounds: Vec<String> = r.bounds.iter().map(|c| c.to_string()).collect();
            let detail = format!(
                "{states}-state game, gap {:.4} <= {:.4}; {}",
                r.quality.statistic,
                r.quality.threshold,
                bounds.join("; ")
            );
            report(3, "epsilon-NE certification", minutes(5), t, ok, detail)
        }
        Err(e) => report(3, "epsilon-NE certification", minutes(5), t, false, format!("error: {e}")),
    }
}

fn discriminator() -> Outcome {
    let t = Instant::now();
    let c = verify::discriminator_ratio_check(4000, 0).unwrap_or_else(|e| Check::errored("discriminator density ratio", &e));
    report(4, "optimal discriminator", minutes(2), t, c.passed, c.to_string())
}

fn correlation() -> Outcome {
    let t = Instant::now();
    let setup = CorrelationSetup::default();
    match correlation_experiment(&setup) {
        Ok(r) => {
            let floor = r.best_product_tv - 0.05;
            let wins = r.codail_strict_wins();
            let ok = r.codail_max_tv() <= 0.1 && r.product_min_tv() >= floor && wins >= 4;
            let detail = format!(
                "CoDAIL max TV {:.4} (<= 0.1); product learners min TV {:.4} (>= {floor:.4}); CoDAIL strictly smallest in {wins}/{} seeds (>= 4)",
                r.codail_max_tv(),
                r.product_min_tv(),
                setup.seeds.len()
            );
            report(5, "correlation recovery", minutes(15), t, ok, detail)
        }
        Err(e) => report(5, "correlation recovery", minutes(15), t, false, format!("error: {e}")),
    }
}

fn ordering() -> Outcome {
    let t = Instant::now();
    let setup = OrderingSetup::default();
    match ordering_experiment(&setup) {
        Ok(r) => {
            let wins = r.codail_wins();
            let ratio = r.worst_random_ratio();
            let ok = setup.learner.epochs <= 5000 && wins >= 4 && ratio >= 5.0;
            let per_seed: Vec<String> = setup
                .seeds
                .iter()
                .map(|&s| {
                    let k = |a| r.kl(s, a).unwrap_or(f64::NAN);
                    format!(
                        "s{s} {:.4}/{:.4}/{:.4}",
                        k(Algorithm::Codail),
                        k(Algorithm::Ncdail),
                        k(Algorithm::Magail)
                    )
                })
                .collect();
            let detail = format!(
                "CoDAIL below median(NC-DAIL, MA-GAIL) in {wins}/{} seeds (>= 4); random/learner KL >= {ratio:.1}x (>= 5); KL codail/ncdail/magail {}",
                setup.seeds.len(),
                per_seed.join(", ")
            );
            report(6, "keep_away ordering", minutes(60), t, ok, detail)
        }
        Err(e) => report(6, "keep_away ordering", minutes(60), t, false, format!("error: {e}")),
    }
}

fn gaussian(n: usize, mean: [f64; 2], sd: [f64; 2], seed: u64) -> Vec<[f64; 2]> {
    let mut r = seeded(seed);
    let (nx, ny) = (Normal::new(mean[0], sd[0]).unwrap(), Normal::new(mean[1], sd[1]).unwrap());
    (0..n).map(|_| [nx.sample(&mut r), ny.sample(&mut r)]).collect()
}

fn eval_numerics() -> Outcome {
    let t = Instant::now();
    let bw = Bandwidth::default();
    let arena = GridSpec::arena(1.0, 101).unwrap();
    let p = gaussian(2_000, [0.1, 0.2], [0.3, 0.2], 3);
    let self_kl = kl_divergence(&p, &p, &arena, bw).unwrap();

    let (mp, sp, mq, sq): ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) = ([0.0, 0.0], [1.0, 0.5], [1.0, 0.5], [1.5, 1.0]);
    let exact: f64 = (0..2)
        .map(|d| {
            let (vp, vq) = (sp[d] * sp[d], sq[d] * sq[d]);
            0.5 * (vp / vq + (mq[d] - mp[d]).powi(2) / vq - 1.0 + (vq / vp).ln())
        })
        .sum();
    let wide = GridSpec::new((-7.0, 8.0), (-6.0, 6.0), 201, 201).unwrap();
    let kde = kl_divergence(&gaussian(10_000, mp, sp, 6), &gaussian(10_000, mq, sq, 7), &wide, bw).unwrap();
    let rel = (kde - exact).abs() / exact;

    let g = density_grid(&gaussian(2_000, [0.2, -0.1], [0.3, 0.5], 2), &GridSpec::new((-2.0, 2.5), (-3.0, 3.0), 101, 101).unwrap(), bw).unwrap();
    let mass = g.integral();

    let ok = self_kl <= 0.01 && rel <= 0.15 && (mass - 1.0).abs() <= 0.02;
    let detail = format!(
        "KL(p||p) {self_kl:.2e} (<= 0.01); Gaussian KDE-KL {kde:.4} vs {exact:.4}, rel {rel:.3} (<= 0.15); integral {mass:.4} (within 0.02 of 1)"
    );
    report(7, "evaluation numerics", minutes(1), t, ok, detail)
}

fn cli(args: &[&str]) -> i32 {
    codail_cli::run(std::iter::once("codail").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs `args` into two fresh directories; returns (exit codes ok, identical, file count).
fn twice(root: &Path, name: &str, args: &[&str]) -> (bool, bool, usize) {
    let (a, b) = (root.join(format!("{name}-a")), root.join(format!("{name}-b")));
    let mut codes = Vec::new();
    for d in [&a, &b] {
        let mut full = vec!["--run-dir", s(d)];
        full.extend_from_slice(args);
        codes.push(cli(&full));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    (codes.iter().all(|&c| c == 0), ta == tb, ta.len())
}

fn reproducibility() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let small = ["--scenario", "keep_away", "--epochs", "3", "--batch-size", "200", "--checkpoint-every", "1"];
    let dem = ["demo-train"].iter().chain(&small).copied().collect::<Vec<_>>();
    let r1 = twice(root, "demo-train", &dem);
    let dem_dir = root.join("demo-train-a");
    let gen = ["demo-generate", "--demonstrators", s(&dem_dir), "--episodes", "10", "--horizon", "20"];
    let r2 = twice(root, "demo-generate", &gen);
    let demos = root.join("demo-generate-a/demos.jsonl");
    let mut results = vec![("demo-train", r1), ("demo-generate", r2)];
    for algo in ["codail", "ncdail", "magail"] {
        let mut args = vec!["imitate", "--algo", algo, "--demos", s(&demos)];
        args.extend_from_slice(&small);
        results.push((algo, twice(root, &format!("imitate-{algo}"), &args)));
    }
    let ok = results.iter().all(|(_, (codes, same, _))| *codes && *same);
    let detail = results
        .iter()
        .map(|(n, (codes, same, files))| format!("{n}: {files} files {}", if *codes && *same { "identical" } else { "DIFFER" }))
        .collect::<Vec<_>>()
        .join("; ");
    report(8, "reproducibility", None, t, ok, detail)
}

fn sweep_harness() -> Outcome {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("sweep");
    let code = cli(&["--run-dir", s(&dir), "sweep", "--scenario", "coop_comm"]);
    let table = fs::read_to_string(dir.join("sweep.csv")).unwrap_or_default();
    let rows: Vec<Vec<String>> = table.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    let ratios: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
    let expected: Vec<String> = default_ratios().iter().map(|r| r.to_string()).collect();
    let top_two_generator = rows.iter().any(|r| {
        let rank: usize = r.last().and_then(|x| x.parse().ok()).unwrap_or(usize::MAX);
        let (d, g) = r[0].split_once(':').unwrap_or(("0", "0"));
        rank <= 2 && g.parse::<u32>().unwrap_or(0) >= d.parse::<u32>().unwrap_or(u32::MAX)
    });
    let mut sorted = ratios.clone();
    sorted.sort();
    let mut want = expected.clone();
    want.sort();
    let ok = code == 0 && sorted == want && dir.join("sweep.svg").is_file() && top_two_generator;
    let detail = format!(
        "exit {code}; ratios {}; ranked gaps {}; G >= D ratio in top two: {top_two_generator}",
        ratios.join(" "),
        rows.iter().map(|r| format!("{}={}", r[0], r.get(1).map(|g| &g[..g.len().min(7)]).unwrap_or(""))).collect::<Vec<_>>().join(" ")
    );
    report(9, "D:G sweep", None, t, ok, detail)
}

#[test]
fn acceptance_criteria() {
    let outcomes = [
        exactness(),
        gradients(),
        certification(),
        discriminator(),
        correlation(),
        ordering(),
        eval_numerics(),
        reproducibility(),
        sweep_harness(),
    ];
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.line.as_str()).collect();
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    drop(err);
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
