//! Run directories and result files for the command-line driver.
//!
//! A run directory holds `config.toml` (the resolved config), `rounds.csv`,
//! `rounds.jsonl` and `summary.json`. `rounds.csv` columns:
//!
//! | column | meaning |
//! |---|---|
//! | `round` | 1-based round index |
//! | `accuracy` | top-1 test accuracy after the round |
//! | `update_norm` | L2 norm of the applied global update |
//! | `discrepancy` | relative L2 distance to the full-participation update, empty when not measured |
//! | `discrepancy_cosine` | `1 - cos` of the same pair, empty when not measured |
//! | `failed` | `1` if the round was skipped after a client failure |

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{DatasetSpec, ExperimentConfig, FailPolicy};
use crate::data::Dataset;
use crate::engine::{RoundRecord, RunOutput, Simulation};
use crate::error::{Error, Result};
use crate::metrics::RunSummary;
use crate::partition::{lda_partition, partition_stats, PartitionPlan, PartitionStats};

pub const OUT_ENV: &str = "GCFED_OUT";
pub const CSV_HEADER: [&str; 6] = ["round", "accuracy", "update_norm", "discrepancy", "discrepancy_cosine", "failed"];

/// `--out` if given, else `$GCFED_OUT`, else `./runs`.
pub fn output_root(cli_out: Option<&Path>) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("runs"),
    }
}

/// Create `<root>/<timestamp>-<label>`, adding a numeric suffix on collision.
pub fn create_run_dir(root: &Path, label: &str) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-{label}");
    for i in 0.. {
        let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.accuracy.to_string(),
            r.update_norm.to_string(),
            opt_cell(r.discrepancy),
            opt_cell(r.discrepancy_cosine),
            u8::from(r.failed).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Rewrite relative IDX paths as absolute so the copied config works from
/// any directory.
fn anchor_paths(cfg: &mut ExperimentConfig, base: Option<&Path>) {
    let Some(base) = base else { return };
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let DatasetSpec::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
        ..
    } = &mut cfg.dataset
    {
        fix(train_images);
        fix(train_labels);
        fix(test_images);
        fix(test_labels);
    }
    if let Some(p) = &mut cfg.partition_file {
        fix(p);
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub output: RunOutput,
    pub summary: RunSummary,
}

impl RunArtifacts {
    pub fn mean_discrepancy(&self) -> Option<f64> {
        let v: Vec<f64> = self.output.records.iter().filter_map(|r| r.discrepancy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Train under `cfg` on already loaded data and write all result files
/// into `dir`, which must exist.
pub fn run_into(cfg: &ExperimentConfig, base: Option<&Path>, train: &Dataset, test: &Dataset, dir: &Path) -> Result<RunArtifacts> {
    let mut sim = Simulation::new(cfg, train, test)?;
    let mut resolved = cfg.resolved(sim.model().layer_count());
    anchor_paths(&mut resolved, base);
    resolved.save(&dir.join("config.toml"))?;

    let mut jsonl = BufWriter::new(File::create(dir.join("rounds.jsonl"))?);
    let mut io_err = None;
    let output = sim.run_with(|rec| {
        log::info!(
            "round {:>4}  acc {:.4}  |dw| {:.4e}{}",
            rec.round,
            rec.accuracy,
            rec.update_norm,
            if rec.failed { "  FAILED" } else { "" }
        );
        let res = serde_json::to_writer(&mut jsonl, rec)
            .map_err(Error::from)
            .and_then(|_| jsonl.write_all(b"\n").map_err(Error::from));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    jsonl.flush()?;

    write_rounds_csv(&dir.join("rounds.csv"), &output.records)?;
    let summary = RunSummary::from_accuracies(&output.accuracies(), cfg.measure.smoothing_window);
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(RunArtifacts {
        dir: dir.to_path_buf(),
        output,
        summary,
    })
}

/// Label used for run directory names.
pub fn run_label(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}", cfg.strategy.as_str(), cfg.seed)
}

/// Load data, train and write a timestamped run directory under `out_root`.
/// Returns an error if the run aborted on a failed round.
pub fn simulate(cfg: &ExperimentConfig, base: Option<&Path>, out_root: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (train, test) = cfg.load_data(base)?;
    let dir = create_run_dir(out_root, &run_label(cfg))?;
    let art = run_into(cfg, base, &train, &test, &dir)?;
    if art.output.aborted && cfg.fail_policy == FailPolicy::Abort {
        let failure = art.output.records.last().and_then(|r| r.failure.clone()).unwrap_or_default();
        return Err(Error::Logic(format!("run aborted: {failure}")));
    }
    Ok(art)
}

/// `key=v1,v2,...`.
pub fn parse_grid(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("grid", format!("expected key=v1,v2,..., got {spec:?}")))?;
    let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(Error::config("grid", format!("empty key or value list in {spec:?}")));
    }
    Ok((key.trim().to_string(), values))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub key: String,
    pub value: String,
    pub seed: u64,
    pub run_dir: String,
    pub final_smoothed_accuracy: Option<f64>,
    pub peak_smoothed_accuracy: Option<f64>,
    pub first_order_mean: Option<f64>,
    pub first_order_std: Option<f64>,
    pub first_order_min: Option<f64>,
    pub mean_discrepancy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// One run per grid value and per seed `cfg.seed + i`, `i < seeds`, in a
/// shared sweep directory with a merged `sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, base: Option<&Path>, key: &str, values: &[String], seeds: usize, out_root: &Path) -> Result<SweepOutput> {
    if seeds == 0 {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let configs = values
        .iter()
        .map(|v| cfg.with_override(key, v))
        .collect::<Result<Vec<_>>>()?;
    let dir = create_run_dir(out_root, &format!("sweep-{key}"))?;
    let mut rows = Vec::new();
    let mut cache: Option<(ExperimentConfig, Dataset, Dataset)> = None;
    for (value, vcfg) in values.iter().zip(&configs) {
        for i in 0..seeds as u64 {
            let mut run_cfg = vcfg.clone();
            run_cfg.seed = cfg.seed + i;
            // data depends on the dataset section and, for synthetic data
            // without a fixed seed, on the master seed
            let key_cfg = {
                let mut k = run_cfg.clone();
                k.dataset = run_cfg.resolved(1).dataset;
                k
            };
            let reuse = matches!(&cache, Some((c, ..)) if c.dataset == key_cfg.dataset);
            if !reuse {
                let (tr, te) = run_cfg.load_data(base)?;
                cache = Some((key_cfg, tr, te));
            }
            let (_, train, test) = cache.as_ref().expect("cached data");
            let run_dir = dir.join(format!("{}={}-s{}", key, sanitize(value), run_cfg.seed));
            fs::create_dir_all(&run_dir)?;
            let art = run_into(&run_cfg, base, train, test, &run_dir)?;
            rows.push(SweepRow {
                key: key.to_string(),
                value: value.clone(),
                seed: run_cfg.seed,
                run_dir: run_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                final_smoothed_accuracy: art.summary.final_smoothed_accuracy,
                peak_smoothed_accuracy: art.summary.peak_smoothed_accuracy,
                first_order_mean: art.summary.first_order_mean,
                first_order_std: art.summary.first_order_std,
                first_order_min: art.summary.first_order_min,
                mean_discrepancy: art.mean_discrepancy(),
            });
        }
    }
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(SweepOutput { dir, rows })
}

fn sanitize(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// The partition a run with `cfg` would use.
pub fn partition_for(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<PartitionPlan> {
    cfg.validate()?;
    let (train, _) = cfg.load_data(base)?;
    match &cfg.partition_file {
        Some(p) => {
            let plan = PartitionPlan::load_json(p)?;
            plan.validate(Some(&train.labels))?;
            Ok(plan)
        }
        None => lda_partition(&train.labels, train.num_classes, cfg.clients, cfg.alpha, cfg.seed),
    }
}

pub fn partition_stats_for(cfg: &ExperimentConfig, base: Option<&Path>) -> Result<PartitionStats> {
    Ok(partition_stats(&partition_for(cfg, base)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let (k, v) = parse_grid("gc.lambda=0,0.25, 0.5").unwrap();
        assert_eq!(k, "gc.lambda");
        assert_eq!(v, ["0", "0.25", "0.5"]);
        assert!(parse_grid("lambda").is_err());
        assert!(parse_grid("lambda=").is_err());
        assert!(parse_grid("=1,2").is_err());
    }

    #[test]
    fn explicit_out_wins() {
        assert_eq!(output_root(Some(Path::new("/x"))), PathBuf::from("/x"));
    }

    #[test]
    fn run_dirs_do_not_collide() {
        let t = tempfile::tempdir().unwrap();
        let a = create_run_dir(t.path(), "x").unwrap();
        let b = create_run_dir(t.path(), "x").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_csv_has_header_only() {
        let t = tempfile::tempdir().unwrap();
        let p = t.path().join("r.csv");
        write_rounds_csv(&p, &[]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().trim(), CSV_HEADER.join(","));
    }
}
