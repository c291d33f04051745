use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mixfed::config::{InvalidConfig, ScenarioConfig};
use mixfed::experiments::{run_game, run_learning, sweep};
use mixfed::export::{timestamped_dir, write_csv, write_json, write_run};
use mixfed::manager::{serve, ManagerOptions};
use mixfed::tcp::run_learning_tcp;
use mixfed::world::{plain_fedavg_baseline, LearningTask};

#[derive(Parser)]
#[command(name = "mixfed", version, about = "Decentralised federated learning over a mix network")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one learning scenario and write its artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        transport: Option<Transport>,
    },
    /// Sweep one parameter and write a CSV row per value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of mix.outbox_size, mix.mu_s, route.K_max, n_nodes.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Emissions collected per point for the mixing metrics.
        #[arg(long, default_value_t = 10_000)]
        emissions: usize,
    },
    /// Play the sender-unlinkability game.
    Game {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_a: Option<u32>,
        #[arg(long)]
        n_b: Option<u32>,
        #[arg(long)]
        victim: Option<u32>,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Serve the management API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Real seconds per simulated second; 0 runs as fast as possible.
        #[arg(long, default_value_t = 1.0)]
        pace: f64,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON); built-in defaults when omitted.
    config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory under which a timestamped run directory is created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Sim,
    Tcp,
}

impl Common {
    fn load(&self, extra: &[String]) -> Result<ScenarioConfig, InvalidConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("transport.seed={seed}"));
        }
        overrides.extend_from_slice(extra);
        match &self.config {
            Some(path) => ScenarioConfig::load(path, &overrides),
            None => {
                let refs: Vec<&str> = overrides.iter().map(String::as_str).collect();
                ScenarioConfig::default().with_overrides(&refs)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(invalid) = e.downcast_ref::<InvalidConfig>() {
                eprintln!("error: {invalid}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Run { common, transport } => {
            let extra: Vec<String> = transport
                .map(|t| {
                    let kind = match t {
                        Transport::Sim => "sim",
                        Transport::Tcp => "tcp",
                    };
                    vec![format!("transport.kind={kind}")]
                })
                .unwrap_or_default();
            let cfg = common.load(&extra)?;
            cmd_run(&cfg, &common.out)
        }
        Cmd::Sweep {
            common,
            param,
            values,
            emissions,
        } => {
            let cfg = common.load(&[])?;
            let rows = sweep(&cfg, &param, &values, emissions)?;
            let dir = timestamped_dir(&common.out, "sweep")?;
            write_csv(&dir.join("sweep.csv"), &rows)?;
            write_json(&dir.join("config.json"), &cfg)?;
            for r in &rows {
                println!(
                    "{}={}: relay entropy {:.3} bits, match rate {:.4} (bound {:.4}), rtt {:.3} s, accuracy {:.3}",
                    r.param, r.value, r.relay_entropy_bits, r.relay_match_rate, r.relay_match_bound, r.rtt_mean_s, r.final_accuracy
                );
            }
            println!("{}", dir.display());
            Ok(())
        }
        Cmd::Game {
            common,
            n_a,
            n_b,
            victim,
            trials,
        } => {
            let mut extra = vec!["adversary.enabled=true".to_string()];
            extra.extend(n_a.map(|v| format!("adversary.n_a={v}")));
            extra.extend(n_b.map(|v| format!("adversary.n_b={v}")));
            extra.extend(victim.map(|v| format!("adversary.victim={v}")));
            extra.extend(trials.map(|v| format!("adversary.trials={v}")));
            let cfg = common.load(&extra)?;
            let outcome = run_game(&cfg, cfg.adversary.trials)?;
            let dir = timestamped_dir(&common.out, "game")?;
            write_json(&dir.join("game.json"), &outcome)?;
            write_json(&dir.join("config.json"), &cfg)?;
            for g in [&outcome.timing, &outcome.coin_flip] {
                println!(
                    "{}: {}/{} correct, advantage {:.4} ± {:.4}",
                    g.adversary, g.correct, g.trials, g.advantage, g.ci95
                );
            }
            println!("{}", dir.display());
            Ok(())
        }
        Cmd::Serve { addr, pace } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(addr, ManagerOptions { pace }))
        }
    }
}

fn cmd_run(cfg: &ScenarioConfig, out: &Path) -> anyhow::Result<()> {
    let run = match cfg.transport.kind {
        mixfed::config::TransportKind::Sim => run_learning(cfg)?,
        mixfed::config::TransportKind::Tcp => run_learning_tcp(cfg)?,
    };
    let task = LearningTask::build(cfg).map_err(|e| anyhow::anyhow!("{e:?}")).context("building task")?;
    let baseline = plain_fedavg_baseline(cfg, &task);
    let dir = timestamped_dir(out, "run")?;
    write_run(&dir, cfg, &run, &baseline)?;
    for s in run.summaries() {
        println!(
            "round {:>3}: {} nodes, accuracy {:.4} (local {:.4}), coverage {:.3}",
            s.round, s.nodes, s.mean_aggregated_accuracy, s.mean_local_accuracy, s.mean_coverage
        );
    }
    if !run.finished {
        anyhow::bail!("scenario did not finish within {} s", cfg.transport.max_time_s);
    }
    println!("{}", dir.display());
    Ok(())
}
