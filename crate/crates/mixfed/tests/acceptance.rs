//! Acceptance suite. Every criterion prints one line
//!
//! ```text
//! PASS <name>: <measured values> [<tolerances>] (<seconds>)
//! ```
//!
//! and the process exits with status 1 if any line is a FAIL. All runs use
//! seed 42 unless a criterion sweeps seeds explicitly.

use std::fs;
use std::time::Instant;

use mixfed::config::{ChurnAction, ChurnStep, ScenarioConfig};
use mixfed::experiments::{comm_point, mixing_audit, run_game, run_learning, LearningRun};
use mixfed::export::write_run;
use mixfed::world::{plain_fedavg_baseline, LearningTask};
use mixfed_core::learning::{fragment_fedavg, fragment_model, ModelVector};
use mixfed_core::metrics::path_entropy;
use mixfed_core::NodeId;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

// Pinned tolerances.
const FEDAVG_TOL: f64 = 1e-12;
const FEDAVG_BUDGET_S: f64 = 1.0;
const RELAY_EMISSIONS: usize = 10_000;
const RELAY_SE: f64 = 3.0;
const RELAY_BUDGET_S: f64 = 120.0;
const PATH_TOL: f64 = 1e-9;
const ENTROPY_BAND: (f64, f64) = (2.0, 3.33);
const ENTROPY_BUDGET_S: f64 = 300.0;
const GAME_TRIALS: u64 = 500;
const GAME_UPPER: f64 = 0.07;
const ABLATION_TRIALS: u64 = 100;
const ABLATION_MIN_ADVANTAGE: f64 = 0.25;
const CHURN_REL_TOL: f64 = 0.02;
const CHURN_RECOVERY_ROUNDS: u32 = 2;
const CHURN_BUDGET_S: f64 = 600.0;
const RATE_REL_TOL: f64 = 0.10;
const COMM_WORKLOAD_HZ: f64 = 5.0;
const COMM_WARMUP_S: f64 = 2.0;
const COMM_SPAN_S: f64 = 10.0;
const MIN_ACCURACY: f64 = 0.85;
const VARIANCE_SEEDS: u64 = 10;
const VARIANCE_MIN_SEEDS: usize = 8;
const BASELINE_TOL: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn defaults(overrides: &[&str]) -> ScenarioConfig {
    ScenarioConfig::default().with_overrides(overrides).expect("valid overrides")
}

fn fmt_list(xs: &[f64], prec: usize) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.prec$}")).collect();
    format!("[{}]", parts.join(", "))
}

fn strictly_increasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] < w[1])
}

fn fedavg_equivalence() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for nodes in 3..=5usize {
        for n in [1usize, 7, 16, 33, 64] {
            for frag_elems in [1usize, 3, 8, 64] {
                let models: Vec<ModelVector> = (0..nodes)
                    .map(|_| {
                        let mut m = ModelVector {
                            values: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                        };
                        m.quantize_f32();
                        m
                    })
                    .collect();
                let frags: Vec<_> = models[1..]
                    .iter()
                    .flat_map(|m| fragment_model(m, frag_elems * 4, 0))
                    .collect();
                let (agg, cov) = fragment_fedavg(&models[0], &frags, 0)?;
                anyhow::ensure!(cov.covered_fraction == 1.0, "coverage");
                for i in 0..n {
                    let mut s = 0.0;
                    for m in &models {
                        s += m.values[i];
                    }
                    worst = worst.max((agg.values[i] - s / nodes as f64).abs());
                }
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: worst <= FEDAVG_TOL && secs < FEDAVG_BUDGET_S,
        detail: format!("{cases} cases, max |diff| {worst:.2e} [<= {FEDAVG_TOL:.0e}, < {FEDAVG_BUDGET_S} s]"),
    })
}

fn relay_bound() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (o, k) in [(5, 2), (10, 2), (10, 3), (50, 2)] {
        let cfg = defaults(&[&format!("mix.outbox_size={o}"), &format!("route.K_max={k}")]);
        let a = mixing_audit(&cfg, RELAY_EMISSIONS)?;
        let limit = a.bound + RELAY_SE * a.standard_error;
        pass &= a.match_rate <= limit;
        parts.push(format!("O={o},K={k}: {:.4} <= {:.4}", a.match_rate, limit));
    }
    let ablation = mixing_audit(&defaults(&["mix.shuffle=false"]), RELAY_EMISSIONS)?;
    let limit = ablation.bound + RELAY_SE * ablation.standard_error;
    let violated = ablation.match_rate > limit;
    pass &= violated;
    parts.push(format!("no shuffle: {:.4} > {:.4}", ablation.match_rate, limit));
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < RELAY_BUDGET_S;
    Ok(Outcome {
        pass,
        detail: format!("{} [bound + {RELAY_SE} SE, {RELAY_EMISSIONS} emissions, < {RELAY_BUDGET_S} s]", parts.join("; ")),
    })
}

fn big_log2(x: &BigUint) -> f64 {
    let shift = x.bits().saturating_sub(64);
    let top: BigUint = x >> shift;
    (top.iter_u64_digits().next().unwrap_or(0) as f64).log2() + shift as f64
}

fn path_entropy_formula() -> anyhow::Result<Outcome> {
    let mut worst = 0.0f64;
    for o in [1u64, 2, 5, 10, 50, 100, 150, 1000] {
        for k in 1..=8u32 {
            let sum: BigUint = (1..=k).map(|j| BigUint::from(o).pow(j)).sum();
            worst = worst.max((path_entropy(o as usize, k as usize) - big_log2(&sum)).abs());
        }
    }
    let (h10, h150) = (path_entropy(10, 2), path_entropy(150, 2));
    // Figure band: "roughly 6 bits" at O=10, "above 14 bits" at O=150.
    let pass = worst <= PATH_TOL && (6.0..7.0).contains(&h10) && (h10 - 6.78).abs() < 0.01 && h150 > 14.0 && (h150 - 14.47).abs() < 0.01;
    Ok(Outcome {
        pass,
        detail: format!(
            "grid max |diff| {worst:.2e} [<= {PATH_TOL:.0e}]; H(10,2)={h10:.3} [6.78 ± 0.01, in [6,7)]; H(150,2)={h150:.3} [14.47 ± 0.01, > 14]"
        ),
    })
}

fn relay_entropy_band() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let mut bits = Vec::new();
    for o in [10, 50, 100, 150] {
        let a = mixing_audit(&defaults(&[&format!("mix.outbox_size={o}")]), RELAY_EMISSIONS)?;
        bits.push(a.relay_entropy_bits);
    }
    let secs = start.elapsed().as_secs_f64();
    let in_band = (ENTROPY_BAND.0..=ENTROPY_BAND.1).contains(&bits[0]);
    Ok(Outcome {
        pass: in_band && strictly_increasing(&bits) && secs < ENTROPY_BUDGET_S,
        detail: format!(
            "O=10,50,100,150 -> {} bits [O=10 in {:?}, strictly increasing, < {ENTROPY_BUDGET_S} s]",
            fmt_list(&bits, 3),
            ENTROPY_BAND
        ),
    })
}

fn unlinkability_game() -> anyhow::Result<Outcome> {
    let full = run_game(&defaults(&["adversary.enabled=true"]), GAME_TRIALS)?;
    let t = &full.timing;
    let degenerate = defaults(&[
        "adversary.enabled=true",
        "mix.outbox_size=1",
        "route.K_max=1",
        "mix.cover=false",
    ]);
    let ablation = run_game(&degenerate, ABLATION_TRIALS)?;
    let pass = t.ci_contains_zero && t.ci_upper < GAME_UPPER && ablation.timing.advantage > ABLATION_MIN_ADVANTAGE;
    Ok(Outcome {
        pass,
        detail: format!(
            "defaults: advantage {:.4} ± {:.4} ({} trials) [CI contains 0, upper < {GAME_UPPER}]; O=1/K=1/no cover: advantage {:.3} ({} trials) [> {ABLATION_MIN_ADVANTAGE}]",
            t.advantage, t.ci95, t.trials, ablation.timing.advantage, ablation.timing.trials
        ),
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn churn_dynamics() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    // Kill at round 7.
    let base = run_learning(&defaults(&[]))?;
    let mut kill = defaults(&[]);
    kill.churn = vec![ChurnStep {
        at_round: 7,
        action: ChurnAction::Kill,
        node_id: Some(5),
    }];
    let killed = run_learning(&kill)?;
    let survivors: Vec<NodeId> = (0..5).map(NodeId).collect();
    let mut worst_kill = 0.0f64;
    for round in 1..=kill.learn.rounds {
        let (a, b) = (killed.accuracy_of(round, &survivors), base.accuracy_of(round, &survivors));
        match (a, b) {
            (Some(a), Some(b)) => worst_kill = worst_kill.max(rel(a, b)),
            _ => worst_kill = f64::INFINITY,
        }
    }

    // Add at round 4; both runs split the data seven ways.
    let base7 = run_learning(&defaults(&["learn.partition_slots=7"]))?;
    let mut add = defaults(&["learn.partition_slots=7"]);
    add.churn = vec![ChurnStep {
        at_round: 4,
        action: ChurnAction::Add,
        node_id: None,
    }];
    let added = run_learning(&add)?;
    let all: Vec<NodeId> = (0..7).map(NodeId).collect();
    let curve = |run: &LearningRun| -> Vec<f64> {
        (1..=add.learn.rounds).map(|r| run.accuracy_of(r, &all).unwrap_or(f64::NAN)).collect()
    };
    let (with_join, without) = (curve(&added), curve(&base7));
    // The joiner's first round is the first one it reports.
    let join_round = added
        .rounds
        .iter()
        .filter(|r| r.node == NodeId(6))
        .map(|r| r.epoch + 1)
        .min()
        .unwrap_or(u32::MAX);
    let dipped = (join_round..=add.learn.rounds).any(|r| with_join[r as usize - 1] < without[r as usize - 1]);
    let by = (join_round + CHURN_RECOVERY_ROUNDS).min(add.learn.rounds);
    let recovered = (by..=add.learn.rounds).all(|r| rel(with_join[r as usize - 1], without[r as usize - 1]) < CHURN_REL_TOL);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_kill < CHURN_REL_TOL
        && killed.finished
        && added.finished
        && join_round != u32::MAX
        && dipped
        && recovered
        && secs < CHURN_BUDGET_S;
    Ok(Outcome {
        pass,
        detail: format!(
            "kill@7 max rel dev {:.4} [< {CHURN_REL_TOL}]; add@4: joiner from round {join_round}, curve {} vs baseline {} dipped={dipped} recovered by round {by}={recovered} [< {CHURN_REL_TOL} rel within {CHURN_RECOVERY_ROUNDS} rounds, < {CHURN_BUDGET_S} s]",
            worst_kill,
            fmt_list(&with_join, 3),
            fmt_list(&without, 3)
        ),
    })
}

fn communication_trends() -> anyhow::Result<Outcome> {
    let point = |overrides: &[&str]| comm_point(&defaults(overrides), COMM_WORKLOAD_HZ, COMM_WARMUP_S, COMM_SPAN_S);
    let by_mu: Vec<_> = [0.005, 0.01, 0.02]
        .iter()
        .map(|mu| point(&[&format!("mix.mu_s={mu}")]))
        .collect::<Result<_, _>>()?;
    let by_k: Vec<_> = [1, 2, 3]
        .iter()
        .map(|k| point(&[&format!("route.K_max={k}")]))
        .collect::<Result<_, _>>()?;
    let rtt_mu: Vec<f64> = by_mu.iter().map(|p| p.rtt_mean_s).collect();
    let rtt_k: Vec<f64> = by_k.iter().map(|p| p.rtt_mean_s).collect();
    let rate_law = by_mu
        .iter()
        .chain(&by_k)
        .all(|p| rel(p.output_rate_bytes_s, 1024.0 / p.mu_s) <= RATE_REL_TOL);
    let rate_k: Vec<f64> = by_k.iter().map(|p| p.output_rate_bytes_s).collect();
    let invariant = rate_k.iter().all(|r| rel(*r, rate_k[0]) <= RATE_REL_TOL);
    let total_k: Vec<f64> = by_k.iter().map(|p| p.total_bytes_s).collect();
    let total_up = strictly_increasing(&total_k);
    let checks = [
        ("rtt up in mu", strictly_increasing(&rtt_mu)),
        ("rtt up in K", strictly_increasing(&rtt_k)),
        ("rate law", rate_law),
        ("rate invariant in K", invariant),
        ("total bytes/s up in K", total_up),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Ok(Outcome {
        pass: failed.is_empty(),
        detail: format!(
            "RTT(mu=.005,.01,.02)={} s; RTT(K=1,2,3)={} s; rate(K)={} B/s [1024/mu ± {:.0}%]; total(K)={} B/s{}",
            fmt_list(&rtt_mu, 3),
            fmt_list(&rtt_k, 3),
            fmt_list(&rate_k, 0),
            RATE_REL_TOL * 100.0,
            fmt_list(&total_k, 0),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failed: {}", failed.join(", "))
            }
        ),
    })
}

fn convergence() -> anyhow::Result<Outcome> {
    let cfg = defaults(&[]);
    let run = run_learning(&cfg)?;
    let s = run.summaries();
    let last = s.last().ok_or_else(|| anyhow::anyhow!("no rounds"))?;
    let agg_ge_local = s.iter().all(|e| e.mean_aggregated_accuracy >= e.mean_local_accuracy);
    let task = LearningTask::build(&cfg).map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let baseline = plain_fedavg_baseline(&cfg, &task);
    let base_final = baseline.last().map_or(f64::NAN, |b| b.accuracy);
    let vs_baseline = (last.mean_aggregated_accuracy - base_final).abs();

    let mut shrinks = 0;
    for seed in 42..42 + VARIANCE_SEEDS {
        let r = run_learning(&defaults(&[&format!("transport.seed={seed}")]))?;
        if r.summaries().iter().all(|e| e.aggregated_variance < e.local_variance) {
            shrinks += 1;
        }
    }
    let pass = run.finished
        && last.round == 10
        && last.mean_aggregated_accuracy >= MIN_ACCURACY
        && agg_ge_local
        && shrinks >= VARIANCE_MIN_SEEDS
        && vs_baseline <= BASELINE_TOL;
    Ok(Outcome {
        pass,
        detail: format!(
            "round {} accuracy {:.4} [>= {MIN_ACCURACY}]; aggregated >= local every round: {agg_ge_local}; variance shrinks in {shrinks}/{VARIANCE_SEEDS} seeds [>= {VARIANCE_MIN_SEEDS}]; plain FedAvg {:.4}, |diff| {:.4} [<= {BASELINE_TOL}]",
            last.round, last.mean_aggregated_accuracy, base_final, vs_baseline
        ),
    })
}

fn determinism() -> anyhow::Result<Outcome> {
    let cfg = defaults(&[]);
    let task = LearningTask::build(&cfg).map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let baseline = plain_fedavg_baseline(&cfg, &task);
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        write_run(dir.path(), &cfg, &run_learning(&cfg)?, &baseline)?;
        files.push(fs::read(dir.path().join("accuracy.csv"))?);
    }
    Ok(Outcome {
        pass: !files[0].is_empty() && files[0] == files[1],
        detail: format!("two seeded runs, accuracy.csv {} bytes, identical: {}", files[0].len(), files[0] == files[1]),
    })
}

type Criterion = fn() -> anyhow::Result<Outcome>;

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("fedavg-equivalence", fedavg_equivalence),
        ("relay-bound", relay_bound),
        ("path-entropy", path_entropy_formula),
        ("relay-entropy-band", relay_entropy_band),
        ("unlinkability-game", unlinkability_game),
        ("churn-dynamics", churn_dynamics),
        ("communication-trends", communication_trends),
        ("convergence", convergence),
        ("determinism", determinism),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name}: {detail} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
