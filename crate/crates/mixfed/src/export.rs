//! CSV/JSON artifacts. Column orders are fixed; see docs/formats.md.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::experiments::LearningRun;
use crate::live::RoundRow;
use crate::world::BaselineRound;

#[derive(Serialize)]
struct AccuracyRow {
    round: u32,
    node_id: u32,
    local_accuracy: f64,
    aggregated_accuracy: f64,
}

#[derive(Serialize)]
struct LinkRow {
    t_ns: u64,
    from: u32,
    to: u32,
    len: u32,
    digest: String,
}

/// Creates `<root>/run-<unix seconds>[-n]` and returns it.
pub fn timestamped_dir(root: &Path, prefix: &str) -> std::io::Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    fs::create_dir_all(root)?;
    let mut n = 0;
    loop {
        let name = if n == 0 {
            format!("{prefix}-{secs}")
        } else {
            format!("{prefix}-{secs}-{n}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e),
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes `metrics.csv`, `accuracy.csv`, `entropy.json`,
/// `observation_log.csv`, `baseline.csv`, `summary.json` and the
/// effective `config.json` into `dir`.
pub fn write_run(dir: &Path, cfg: &ScenarioConfig, run: &LearningRun, baseline: &[BaselineRound]) -> anyhow::Result<()> {
    let mut rows: Vec<RoundRow> = run.rounds.iter().map(RoundRow::from).collect();
    rows.sort_by_key(|r| (r.round, r.node_id));
    write_csv(&dir.join("metrics.csv"), &rows)?;
    write_csv(
        &dir.join("accuracy.csv"),
        rows.iter().map(|r| AccuracyRow {
            round: r.round,
            node_id: r.node_id,
            local_accuracy: r.local_accuracy,
            aggregated_accuracy: r.aggregated_accuracy,
        }),
    )?;
    write_json(&dir.join("entropy.json"), &run.entropy.map(EntropyJson::from))?;
    write_csv(
        &dir.join("observation_log.csv"),
        run.log.events().iter().map(|e| LinkRow {
            t_ns: e.t.0,
            from: e.from.0,
            to: e.to.0,
            len: e.len,
            digest: format!("{:016x}", e.digest),
        }),
    )?;
    write_csv(&dir.join("baseline.csv"), baseline)?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            finished: run.finished,
            elapsed_s: run.sim_time.as_secs_f64(),
            rtt_count: run.rtts.len(),
            rtt_mean_s: if run.rtts.is_empty() {
                0.0
            } else {
                run.rtts.iter().map(|r| r.as_secs_f64()).sum::<f64>() / run.rtts.len() as f64
            },
            output_rate_bytes_s: output_rate(cfg, run),
            rounds: run.summaries(),
        },
    )?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(())
}

fn output_rate(cfg: &ScenarioConfig, run: &LearningRun) -> f64 {
    let secs = run.sim_time.as_secs_f64();
    if secs <= 0.0 || cfg.n_nodes == 0 {
        return 0.0;
    }
    let bytes: u64 = cfg.node_ids().map(|n| run.log.bytes_from(n)).sum();
    bytes as f64 / secs / cfg.n_nodes as f64
}

#[derive(Serialize)]
struct Summary {
    finished: bool,
    elapsed_s: f64,
    rtt_count: usize,
    rtt_mean_s: f64,
    /// Mean bytes per second put on the wire by each initial node.
    output_rate_bytes_s: f64,
    rounds: Vec<crate::experiments::EpochSummary>,
}

#[derive(Serialize)]
struct EntropyJson {
    outbox_size: usize,
    k_max: usize,
    relay_entropy_bits: f64,
    relay_entropy_ceiling_bits: f64,
    path_entropy_bits: f64,
}

impl From<mixfed_core::metrics::EntropyReport> for EntropyJson {
    fn from(e: mixfed_core::metrics::EntropyReport) -> Self {
        EntropyJson {
            outbox_size: e.outbox_size,
            k_max: e.k_max,
            relay_entropy_bits: e.relay_entropy_bits,
            relay_entropy_ceiling_bits: e.relay_entropy_ceiling_bits,
            path_entropy_bits: e.path_entropy_bits,
        }
    }
}
