//! Wires the modules into reproducible on-disk runs and compares finished
//! runs, mirroring the per-client accuracy table layout used for reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{Manifest, RunConfig};
use crate::data::{dirichlet_partition, Dataset};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, ClientState, ServerState};
use crate::metrics::MetricsLog;
use crate::neural::{desk_scale_client, desk_scale_server, TrainConfig};

/// Environment variable that overrides `run.output_dir` (the only
/// environment override the runner honors).
pub const OUTPUT_DIR_ENV: &str = "FEDDKC_OUTPUT_DIR";

#[derive(Debug)]
pub struct SeedRunResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub avg_top1: f64,
    /// Divergence message when the run aborted early (partial logs are
    /// still flushed).
    pub aborted: Option<String>,
}

#[derive(Debug)]
pub struct RunResult {
    pub output_dir: PathBuf,
    pub seeds: Vec<SeedRunResult>,
}

impl RunResult {
    pub fn any_aborted(&self) -> bool {
        self.seeds.iter().any(|s| s.aborted.is_some())
    }
}

/// The configured output directory, unless [`OUTPUT_DIR_ENV`] overrides it.
pub fn resolved_output_dir(config: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config.output_dir.clone(),
    }
}

/// Validates, then executes every seed of the config, writing
/// `seed_<n>/{metrics.csv, summary.json, manifest.json}` under the output
/// directory (plus `refine_events.jsonl` when event dumping is on).
pub fn execute_run(config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    let output_dir = resolved_output_dir(config);
    std::fs::create_dir_all(&output_dir)?;

    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let dir = output_dir.join(format!("seed_{seed}"));
        seeds.push(execute_single_seed(config, seed, &dir)?);
    }
    Ok(RunResult { output_dir, seeds })
}

/// Builds the federation for one seed and runs it to disk.
pub fn execute_single_seed(config: &RunConfig, seed: u64, dir: &Path) -> Result<SeedRunResult> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest::new(config, seed);
    std::fs::write(dir.join("manifest.json"), manifest.to_json())?;

    let dataset = config.dataset.load()?;
    let (mut clients, mut server, test) = build_federation(config, &dataset, seed)?;
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = run_experiment(&mut clients, &mut server, config.rounds, &train, &test)?;

    outcome.log.write_csv(&dir.join("metrics.csv"))?;
    let summary = outcome.log.summary();
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    if config.dump_refinement_events {
        let mut dump = String::new();
        for ev in &outcome.events {
            dump.push_str(&serde_json::to_string(ev).expect("event serializes"));
            dump.push('\n');
        }
        std::fs::write(dir.join("refine_events.jsonl"), dump)?;
    }

    Ok(SeedRunResult {
        seed,
        dir: dir.to_path_buf(),
        avg_top1: summary.avg_top1,
        aborted: outcome.aborted.map(|e| e.to_string()),
    })
}

/// Partitions the train split and builds the desk-scale fleet plus server.
pub fn build_federation(
    config: &RunConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<(Vec<ClientState>, ServerState, Dataset)> {
    let (train, test) = dataset.split_test(config.test_fraction, seed)?;
    let plan = dirichlet_partition(&train, config.clients, config.alpha, seed)?;
    let input_dim = train.feature_dim();
    let classes = train.class_count;

    let mut clients = Vec::with_capacity(config.clients);
    for k in 0..config.clients {
        let idx = plan.client_indices(k);
        let part = train.subset(&idx, &format!("client-{k}"));
        let model = desk_scale_client(input_dim, classes, k, seed);
        clients.push(ClientState::new(k, model, part.features, part.labels)?);
    }

    let mut server = ServerState::new(
        desk_scale_server(classes, seed),
        config.refine.to_refinement_config()?,
    );
    server.record_events = config.dump_refinement_events;
    Ok((clients, server, test))
}

/// Per-client comparison cell.
#[derive(Debug, Clone)]
pub struct CompareCell {
    pub client_id: usize,
    pub baseline: f64,
    pub treatment: f64,
}

impl CompareCell {
    pub fn delta(&self) -> f64 {
        self.treatment - self.baseline
    }

    pub fn leader(&self) -> &'static str {
        if self.treatment > self.baseline {
            "treatment"
        } else if self.baseline > self.treatment {
            "baseline"
        } else {
            "tie"
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    /// Final Top-1 per client, averaged over the common seeds.
    pub top1: Vec<CompareCell>,
    pub top5: Vec<CompareCell>,
    pub seeds: Vec<u64>,
}

impl CompareReport {
    fn avg(cells: &[CompareCell]) -> CompareCell {
        let n = cells.len().max(1) as f64;
        CompareCell {
            client_id: usize::MAX,
            baseline: cells.iter().map(|c| c.baseline).sum::<f64>() / n,
            treatment: cells.iter().map(|c| c.treatment).sum::<f64>() / n,
        }
    }

    pub fn avg_top1(&self) -> CompareCell {
        Self::avg(&self.top1)
    }

    pub fn avg_top5(&self) -> CompareCell {
        Self::avg(&self.top5)
    }

    /// Plain-text table, one row per client plus the client average, for
    /// both metrics.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seeds compared: {:?}", self.seeds);
        let _ = writeln!(
            out,
            "{:<8} {:>8} {:>12} {:>12} {:>10}  {}",
            "metric", "client", "baseline", "treatment", "delta", "leader"
        );
        let mut section = |name: &str, cells: &[CompareCell], avg: CompareCell| {
            for c in cells {
                let _ = writeln!(
                    out,
                    "{:<8} {:>8} {:>12.4} {:>12.4} {:>+10.4}  {}",
                    name,
                    c.client_id,
                    c.baseline,
                    c.treatment,
                    c.delta(),
                    c.leader()
                );
            }
            let _ = writeln!(
                out,
                "{:<8} {:>8} {:>12.4} {:>12.4} {:>+10.4}  {}",
                name,
                "avg",
                avg.baseline,
                avg.treatment,
                avg.delta(),
                avg.leader()
            );
        };
        section("top1", &self.top1, self.avg_top1());
        section("top5", &self.top5, self.avg_top5());
        out
    }
}

fn seed_dirs(run_dir: &Path) -> Result<BTreeMap<u64, PathBuf>> {
    // A run dir either contains seed_<n> subdirectories or is itself a
    // single-seed directory with a manifest.
    if run_dir.join("manifest.json").exists() {
        let manifest = Manifest::load(&run_dir.join("manifest.json"))?;
        return Ok(BTreeMap::from([(manifest.seed, run_dir.to_path_buf())]));
    }
    let mut dirs = BTreeMap::new();
    let entries = std::fs::read_dir(run_dir).map_err(|e| {
        Error::IncomparableRuns(format!("cannot read {}: {e}", run_dir.display()))
    })?;
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() && path.join("manifest.json").exists() {
            let manifest = Manifest::load(&path.join("manifest.json"))?;
            dirs.insert(manifest.seed, path);
        }
    }
    if dirs.is_empty() {
        return Err(Error::IncomparableRuns(format!(
            "{} contains no run manifests",
            run_dir.display()
        )));
    }
    Ok(dirs)
}

fn comparability_key(manifest: &Manifest) -> serde_json::Value {
    serde_json::json!({
        "dataset": manifest.config.dataset,
        "test_fraction": manifest.config.test_fraction,
        "clients": manifest.config.clients,
        "alpha": manifest.config.alpha,
        "seeds": manifest.config.seeds,
    })
}

/// Compares two finished runs seed-by-seed. Both must have used the same
/// dataset and partition seeds; refinement settings are expected to differ.
pub fn compare_runs(baseline_dir: &Path, treatment_dir: &Path) -> Result<CompareReport> {
    let baseline = seed_dirs(baseline_dir)?;
    let treatment = seed_dirs(treatment_dir)?;

    let seeds: Vec<u64> = baseline.keys().copied().collect();
    if seeds != treatment.keys().copied().collect::<Vec<u64>>() {
        return Err(Error::IncomparableRuns(format!(
            "seed sets differ: {:?} vs {:?}",
            seeds,
            treatment.keys().collect::<Vec<_>>()
        )));
    }

    let mut top1_acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut top5_acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();

    for &seed in &seeds {
        let base_manifest = Manifest::load(&baseline[&seed].join("manifest.json"))?;
        let treat_manifest = Manifest::load(&treatment[&seed].join("manifest.json"))?;
        if comparability_key(&base_manifest) != comparability_key(&treat_manifest) {
            return Err(Error::IncomparableRuns(format!(
                "seed {seed}: dataset/partition settings differ between runs"
            )));
        }

        let base_log = load_metrics(&baseline[&seed])?;
        let treat_log = load_metrics(&treatment[&seed])?;
        merge_finals(&mut top1_acc, base_log.final_top1_per_client(), true);
        merge_finals(&mut top1_acc, treat_log.final_top1_per_client(), false);
        merge_finals(&mut top5_acc, base_log.final_top5_per_client(), true);
        merge_finals(&mut top5_acc, treat_log.final_top5_per_client(), false);
    }

    let n = seeds.len() as f64;
    let collect = |acc: BTreeMap<usize, (f64, f64)>| {
        acc.into_iter()
            .map(|(client_id, (b, t))| CompareCell {
                client_id,
                baseline: b / n,
                treatment: t / n,
            })
            .collect()
    };
    Ok(CompareReport {
        top1: collect(top1_acc),
        top5: collect(top5_acc),
        seeds,
    })
}

fn merge_finals(acc: &mut BTreeMap<usize, (f64, f64)>, finals: BTreeMap<usize, f64>, baseline: bool) {
    for (client, value) in finals {
        let entry = acc.entry(client).or_insert((0.0, 0.0));
        if baseline {
            entry.0 += value;
        } else {
            entry.1 += value;
        }
    }
}

fn load_metrics(dir: &Path) -> Result<MetricsLog> {
    let path = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::IncomparableRuns(format!("cannot read {}: {e}", path.display()))
    })?;
    MetricsLog::from_csv(&text)
}
