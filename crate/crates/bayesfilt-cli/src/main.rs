//! Batch estimation harness over the bayesfilt library.
//!
//! Three subcommands: `simulate` writes ground-truth benchmark records,
//! `filter` runs one configured filter over a freshly simulated record, and
//! `compare` fans a set of filters and seeds out to a worker pool and
//! aggregates the metrics into a table.
//!
//! Every output directory receives `resolved_config.toml`, the fully
//! materialized configuration of the invocation; together with the seeds it
//! determines every output byte. Wall-clock timing is therefore printed to
//! stdout only, never written into output files.
//!
//! Exit codes: 0 success, 1 comparison cells failed (or an output write
//! failed), 2 invalid configuration, 3 filter or simulation divergence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use bayesfilt::benchmark::SimulationRecord;
use bayesfilt::config::{load_config, ExperimentConfig, OUT_DIR_ENV};
use bayesfilt::error::FilterError;
use bayesfilt::runner::{run, score, Metrics};

#[derive(Parser)]
#[command(
    name = "bayesfilt",
    about = "Sequential Bayesian estimation on a nonlinear structural benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate ground-truth records for the configured seeds.
    Simulate(CommonArgs),
    /// Run one filter over a simulated record and write trajectory + metrics.
    Filter(FilterArgs),
    /// Run several filters across seeds and aggregate a comparison table.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML). May be omitted when --override
    /// scenario=... selects a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one configuration key, e.g. --override pf.particles=30.
    #[arg(long = "override", value_name = "KEY.PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: config out_dir, then $BAYESFILT_OUT,
    /// then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Filter section to run (ukf, pf, mpf, sppf, gmsppf, rbpf, dkf).
    #[arg(long)]
    filter: String,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated filter ids (default: every configured section).
    #[arg(long, value_delimiter = ',')]
    filters: Vec<String>,
    /// Comma-separated seeds (default: the configured seed list).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Simulate(args) => run_simulate(&args),
        Cmd::Filter(args) => run_filter(&args),
        Cmd::Compare(args) => run_compare(&args),
    };
    std::process::exit(code);
}

/// Exit code for an error escaping a command: configuration problems are 2,
/// numerical breakdown (which carries the failing step) is 3.
fn exit_code(e: &FilterError) -> i32 {
    match e {
        FilterError::Config(_) | FilterError::DimensionMismatch { .. } => 2,
        FilterError::Numerical(_) | FilterError::DegenerateLikelihood(_) => 3,
        FilterError::Contract(_) | FilterError::Io(_) => 1,
    }
}

fn fail(e: &FilterError) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn load(common: &CommonArgs) -> Result<ExperimentConfig, FilterError> {
    let text = match &common.config {
        Some(path) => fs::read_to_string(path).map_err(|e| {
            FilterError::Config(format!("config {}: {e}", path.display()))
        })?,
        None => String::new(),
    };
    load_config(&text, &common.overrides)
}

fn out_dir(common: &CommonArgs, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig) -> Result<(), FilterError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved_config.toml"), cfg.resolved_toml()?)?;
    Ok(())
}

/// Reproduction inputs stored next to each simulated record.
#[derive(Serialize)]
struct RecordMeta<'a> {
    seed: u64,
    model: &'a bayesfilt::config::ModelSection,
    measurement: &'a bayesfilt::config::MeasurementSection,
}

fn run_simulate(args: &CommonArgs) -> i32 {
    let cfg = match load(args) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let seeds = args.seed.map(|s| vec![s]).unwrap_or_else(|| cfg.seeds.clone());
    let dir = out_dir(args, &cfg);
    if let Err(e) = write_manifest(&dir, &cfg) {
        return fail(&e);
    }
    for seed in seeds {
        let record = match cfg.simulate_record(seed) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        let csv = dir.join(format!("record_seed{seed}.csv"));
        if let Err(e) = record.write_csv(&csv) {
            return fail(&e);
        }
        let meta = RecordMeta {
            seed,
            model: &cfg.model,
            measurement: &cfg.measurement,
        };
        let meta_text = match toml::to_string_pretty(&meta) {
            Ok(t) => t,
            Err(e) => return fail(&FilterError::Io(e.to_string())),
        };
        if let Err(e) = fs::write(dir.join(format!("record_seed{seed}.meta.toml")), meta_text)
        {
            return fail(&e.into());
        }
        println!("wrote {} ({} rows)", csv.display(), record.len());
    }
    0
}

fn run_filter(args: &FilterArgs) -> i32 {
    let cfg = match load(&args.common) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let id = args.filter.as_str();
    if !cfg.filter_ids().contains(&id) {
        return fail(&FilterError::Config(format!(
            "filter \"{id}\" has no section in the configuration \
             (configured: {})",
            cfg.filter_ids().join(", ")
        )));
    }
    let seed = args.common.seed.unwrap_or_else(|| cfg.seeds[0]);
    let dir = out_dir(&args.common, &cfg);
    if let Err(e) = write_manifest(&dir, &cfg) {
        return fail(&e);
    }

    let outcome = (|| -> Result<(), FilterError> {
        let record = cfg.simulate_record(seed)?;
        let mut filter = cfg.build_filter(id, seed)?;
        let traj = run(filter.as_mut(), id, &record)?;
        let metrics = score(&traj, &record, &cfg.score_spec())?;
        let traj_path = dir.join(format!("{id}_seed{seed}_trajectory.csv"));
        let metrics_path = dir.join(format!("{id}_seed{seed}_metrics.txt"));
        traj.write_csv(&traj_path)?;
        metrics.write_report(&metrics_path)?;
        println!("wrote {}", traj_path.display());
        println!("wrote {}", metrics_path.display());
        for (key, value) in metrics.to_key_values() {
            println!("{key} = {value}");
        }
        let steps = record.len().saturating_sub(1).max(1);
        println!(
            "runtime: {:.3} ms/step",
            traj.runtime.as_secs_f64() * 1e3 / steps as f64
        );
        Ok(())
    })();
    match outcome {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

/// One (filter, seed) cell outcome: metrics plus the run's wall time per
/// step, or the error message.
struct Cell {
    filter: String,
    seed: u64,
    result: Result<(Metrics, f64), FilterError>,
}

fn run_compare(args: &CompareArgs) -> i32 {
    let cfg = match load(&args.common) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let configured = cfg.filter_ids();
    let filters: Vec<String> = if args.filters.is_empty() {
        configured.iter().map(|s| s.to_string()).collect()
    } else {
        args.filters.clone()
    };
    if filters.is_empty() {
        return fail(&FilterError::Config("empty filter list".into()));
    }
    for id in &filters {
        if !configured.contains(&id.as_str()) {
            return fail(&FilterError::Config(format!(
                "filter \"{id}\" has no section in the configuration \
                 (configured: {})",
                configured.join(", ")
            )));
        }
    }
    let seeds: Vec<u64> = if args.seeds.is_empty() {
        cfg.seeds.clone()
    } else {
        args.seeds.clone()
    };
    let dir = out_dir(&args.common, &cfg);
    if let Err(e) = write_manifest(&dir, &cfg) {
        return fail(&e);
    }

    // Simulate each seed's record once, shared across filters.
    let records: Result<Vec<(u64, Arc<SimulationRecord>)>, FilterError> = seeds
        .par_iter()
        .map(|&seed| cfg.simulate_record(seed).map(|r| (seed, Arc::new(r))))
        .collect();
    let records = match records {
        Ok(r) => r.into_iter().collect::<BTreeMap<_, _>>(),
        Err(e) => return fail(&e),
    };

    let jobs: Vec<(String, u64)> = filters
        .iter()
        .flat_map(|f| seeds.iter().map(move |&s| (f.clone(), s)))
        .collect();
    let cells: Vec<Cell> = jobs
        .par_iter()
        .map(|(filter, seed)| {
            let record = &records[seed];
            let result = (|| {
                let mut f = cfg.build_filter(filter, *seed)?;
                let traj = run(f.as_mut(), filter, record)?;
                let metrics = score(&traj, record, &cfg.score_spec())?;
                let steps = record.len().saturating_sub(1).max(1);
                let ms_per_step = traj.runtime.as_secs_f64() * 1e3 / steps as f64;
                Ok((metrics, ms_per_step))
            })();
            Cell {
                filter: filter.clone(),
                seed: *seed,
                result,
            }
        })
        .collect();

    let mut any_failed = false;
    for cell in &cells {
        if let Err(e) = &cell.result {
            any_failed = true;
            eprintln!("{} seed {}: {e}", cell.filter, cell.seed);
        }
    }

    let table = aggregate(&cfg, &filters, &cells);
    print!("{}", table.render_text(true));
    let write = (|| -> Result<(), FilterError> {
        fs::write(dir.join("comparison.txt"), table.render_text(false))?;
        fs::write(dir.join("comparison.csv"), table.render_csv())?;
        Ok(())
    })();
    if let Err(e) = write {
        return fail(&e);
    }
    println!("wrote {}", dir.join("comparison.txt").display());
    println!("wrote {}", dir.join("comparison.csv").display());
    if any_failed {
        1
    } else {
        0
    }
}

/// Aggregated comparison: per filter, mean ± std of each metric over seeds.
struct Table {
    metric_names: Vec<String>,
    /// filter id → per-metric (mean, std), or None when any seed failed.
    rows: Vec<(String, Option<Vec<(f64, f64)>>)>,
    /// mean wall time per step, by filter (stdout rendering only).
    ms_per_step: Vec<Option<f64>>,
    n_seeds: usize,
}

/// Flatten one run's metrics into (name, value) pairs in table order.
fn metric_values(cfg: &ExperimentConfig, m: &Metrics) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let labels = ["u1", "u2", "u3", "v1", "v2", "v3", "theta"];
    for (c, rel) in m.channel_rel_rmse.iter().enumerate() {
        let label = labels.get(c).copied().unwrap_or("x");
        let kind = if m.channel_rel_is_absolute[c] {
            "abs_rmse"
        } else {
            "rel_rmse"
        };
        out.push((format!("{kind}_{label}"), *rel));
    }
    if let Some(v) = m.terminal_parameter_rel_error {
        out.push(("param_rel_err".into(), v));
    }
    if let Some(v) = m.input_pearson {
        out.push(("input_pearson".into(), v));
    }
    if let Some(v) = m.nees_fraction {
        out.push(("nees_fraction".into(), v));
    }
    let _ = cfg;
    out
}

fn aggregate(cfg: &ExperimentConfig, filters: &[String], cells: &[Cell]) -> Table {
    let mut metric_names: Vec<String> = Vec::new();
    for cell in cells {
        if let Ok((m, _)) = &cell.result {
            for (name, _) in metric_values(cfg, m) {
                if !metric_names.contains(&name) {
                    metric_names.push(name);
                }
            }
        }
    }
    let n_seeds = cells
        .iter()
        .filter(|c| c.filter == filters[0])
        .count()
        .max(1);

    let mut rows = Vec::new();
    let mut ms_col = Vec::new();
    for filter in filters {
        let mine: Vec<&Cell> = cells.iter().filter(|c| &c.filter == filter).collect();
        if mine.iter().any(|c| c.result.is_err()) {
            rows.push((filter.clone(), None));
            ms_col.push(None);
            continue;
        }
        let stats: Vec<(f64, f64)> = metric_names
            .iter()
            .map(|name| {
                let values: Vec<f64> = mine
                    .iter()
                    .filter_map(|c| {
                        let (m, _) = c.result.as_ref().ok()?;
                        metric_values(cfg, m)
                            .into_iter()
                            .find(|(n, _)| n == name)
                            .map(|(_, v)| v)
                    })
                    .collect();
                mean_std(&values)
            })
            .collect();
        let ms: Vec<f64> = mine
            .iter()
            .filter_map(|c| c.result.as_ref().ok().map(|(_, ms)| *ms))
            .collect();
        ms_col.push(Some(mean_std(&ms).0));
        rows.push((filter.clone(), Some(stats)));
    }
    Table {
        metric_names,
        rows,
        ms_per_step: ms_col,
        n_seeds,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl Table {
    /// Aligned text rendering; wall time appears only when `with_runtime`
    /// (the written file stays byte-reproducible).
    fn render_text(&self, with_runtime: bool) -> String {
        let mut columns: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["filter".to_string()];
        header.extend(self.metric_names.iter().cloned());
        if with_runtime {
            header.push("ms/step".into());
        }
        columns.push(header);
        for (i, (filter, stats)) in self.rows.iter().enumerate() {
            let mut row = vec![filter.clone()];
            match stats {
                None => {
                    row.extend(vec!["FAILED".to_string(); self.metric_names.len()]);
                }
                Some(stats) => {
                    for (mean, std) in stats {
                        row.push(if self.n_seeds > 1 {
                            format!("{mean:.4} ± {std:.4}")
                        } else {
                            format!("{mean:.4}")
                        });
                    }
                }
            }
            if with_runtime {
                row.push(match self.ms_per_step[i] {
                    Some(ms) => format!("{ms:.3}"),
                    None => "-".into(),
                });
            }
            columns.push(row);
        }
        let width: Vec<usize> = (0..columns[0].len())
            .map(|c| columns.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &columns {
            for (c, cell) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                out.push_str(&format!("{cell:<w$}", w = width[c]));
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        }
        out
    }

    /// Long-format CSV: filter,metric,mean,std,seeds. Failed filters emit a
    /// single status row.
    fn render_csv(&self) -> String {
        let mut out = String::from("filter,metric,mean,std,seeds\n");
        for (filter, stats) in &self.rows {
            match stats {
                None => out.push_str(&format!("{filter},status,FAILED,,{}\n", self.n_seeds)),
                Some(stats) => {
                    for (name, (mean, std)) in self.metric_names.iter().zip(stats) {
                        out.push_str(&format!(
                            "{filter},{name},{mean},{std},{}\n",
                            self.n_seeds
                        ));
                    }
                }
            }
        }
        out
    }
}
