//! Seed sweeps over topologies, run records on disk, and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::bootstrap_compare;
use crate::backbone::{build_model, BackboneConfig};
use crate::data::{split, write_atomic, DatasetBundle};
use crate::error::{Error, Result};
use crate::topology::{TopologyId, TopologySpec};
use crate::train::{train, RunRecord, RunStatus, Splits, TrainConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [42, 43, 44];
pub const BASELINE: &str = "baseline";
pub const SUMMARY_FILE: &str = "summary.tsv";
const SUMMARY_HEADER: &str = "dataset\ttopology\truns\tfailed\tmean_acc\tstd_acc\taccs\n";

/// Everything that shapes a sweep besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_tag: String,
    /// `None` is the backbone without attention.
    pub topologies: Vec<Option<TopologyId>>,
    pub seeds: Vec<u64>,
    /// `seed` is replaced by each run's seed.
    pub train: TrainConfig,
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub split_fractions: [f64; 3],
    /// The split is shared by every run so test sets line up for pairing.
    pub split_seed: u64,
}

impl ExperimentConfig {
    pub fn new(dataset_tag: impl Into<String>, topologies: Vec<Option<TopologyId>>) -> Self {
        ExperimentConfig {
            dataset_tag: dataset_tag.into(),
            topologies,
            seeds: DEFAULT_SEEDS.to_vec(),
            train: TrainConfig::default(),
            stage_channels: vec![32, 64, 128],
            convs_per_stage: 2,
            split_fractions: [0.8, 0.1, 0.1],
            split_seed: 0,
        }
    }

    fn backbone(&self, data: &DatasetBundle, topology: Option<TopologyId>) -> BackboneConfig {
        let mut cfg = BackboneConfig::new(data.image_shape(), data.class_count)
            .with_stages(self.stage_channels.clone())
            .with_attention(topology.map(|id| TopologySpec::new(id, 0)));
        cfg.convs_per_stage = self.convs_per_stage;
        cfg
    }
}

pub fn topology_label(topology: Option<TopologyId>) -> String {
    topology.map_or(BASELINE.to_string(), |id| id.name().to_string())
}

/// Trains one model. Divergence is not an error here: the partial record
/// comes back with status `diverged`.
pub fn run_one(
    data: Splits<'_>,
    backbone: &BackboneConfig,
    cfg: &TrainConfig,
    dataset_tag: &str,
) -> Result<RunRecord> {
    let (model, mut params, mut buffers) = build_model(backbone, cfg.seed)?;
    let label = topology_label(backbone.attention.map(|s| s.id));
    match train(
        &model,
        &mut params,
        &mut buffers,
        data,
        cfg,
        (dataset_tag, &label),
    ) {
        Err(Error::Diverged { record, .. }) => Ok(*record),
        other => other,
    }
}

/// File name of one run's record inside the output directory.
pub fn record_file_name(dataset: &str, topology: &str, seed: u64) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    format!("{}__{}__seed{seed}.toml", clean(dataset), clean(topology))
}

/// Splits `bundle`, trains every `(topology, seed)` pair, writes each record
/// to `out_dir`, and appends one summary row per topology to
/// `out_dir/summary.tsv`.
pub fn run_experiment(
    bundle: &DatasetBundle,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<SummaryRow>> {
    if cfg.seeds.is_empty() || cfg.topologies.is_empty() {
        return Err(Error::config(
            "experiment needs at least one seed and one topology",
        ));
    }
    let (train_set, val, test) = split(bundle, cfg.split_fractions, cfg.split_seed)?;
    let splits = Splits {
        train: &train_set,
        val: &val,
        test: &test,
    };
    fs::create_dir_all(out_dir)?;
    let jobs: Vec<(Option<TopologyId>, u64)> = cfg
        .topologies
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let records: Vec<RunRecord> = jobs
        .into_par_iter()
        .map(|(topology, seed)| {
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let rec = run_one(
                splits,
                &cfg.backbone(bundle, topology),
                &tc,
                &cfg.dataset_tag,
            )?;
            let path = out_dir.join(record_file_name(&rec.dataset, &rec.topology, seed));
            write_atomic(&path, rec.to_toml()?.as_bytes())?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;
    let rows = summarize(&records);
    append_summary(&out_dir.join(SUMMARY_FILE), &rows)?;
    Ok(rows)
}

/// Mean and sample standard deviation of test accuracy per
/// `(dataset, topology)`, over completed runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub topology: String,
    pub accs: Vec<f64>,
    pub failed: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String), Vec<&RunRecord>)> = Vec::new();
    for r in records {
        let key = (r.dataset.clone(), r.topology.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((dataset, topology), runs)| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.status == RunStatus::Completed)
                .map(|r| r.test_acc)
                .collect();
            let (mean, std) = mean_std(&accs);
            SummaryRow {
                dataset,
                topology,
                failed: runs.len() - accs.len(),
                accs,
                mean,
                std,
            }
        })
        .collect()
}

/// Sample (n − 1) standard deviation; 0 for a single value, NaN for none.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summary_line(r: &SummaryRow) -> String {
    let accs: Vec<String> = r.accs.iter().map(|a| format!("{a:.4}")).collect();
    let stat = |v: f64| {
        if v.is_nan() {
            "failed".to_string()
        } else {
            format!("{v:.4}")
        }
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
        r.dataset,
        r.topology,
        r.accs.len() + r.failed,
        r.failed,
        stat(r.mean),
        stat(r.std),
        accs.join(",")
    )
}

/// Rewrites `path` atomically with `rows` appended.
fn append_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut text = match fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => SUMMARY_HEADER.to_string(),
        Err(e) => return Err(e.into()),
    };
    for r in rows {
        text.push_str(&summary_line(r));
    }
    write_atomic(path, text.as_bytes())
}

/// Every `*.toml` run record in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::io_at(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "toml"));
    paths.sort();
    paths
        .iter()
        .map(|p| {
            RunRecord::from_toml(&fs::read_to_string(p).map_err(Error::io_at(p))?)
                .map_err(|e| Error::data(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Comparison table per dataset, with a paired bootstrap p-value of each
/// topology against the baseline. Runs are paired by seed and their test
/// correctness vectors concatenated.
pub fn report(records: &[RunRecord], resamples: usize, seed: u64) -> Result<String> {
    let mut by_dataset: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut out = String::new();
    for (dataset, runs) in by_dataset {
        let owned: Vec<RunRecord> = runs.iter().map(|r| (*r).clone()).collect();
        let _ = writeln!(out, "dataset: {dataset}");
        let _ = writeln!(
            out,
            "{:<10} {:>4} {:>6} {:>8} {:>8}  p vs baseline",
            "topology", "runs", "failed", "mean", "std"
        );
        let mut rows = summarize(&owned);
        rows.sort_by_key(|r| display_rank(&r.topology));
        for row in rows {
            let p = if row.topology == BASELINE {
                "-".to_string()
            } else {
                match paired_vectors(&runs, &row.topology) {
                    Some((a, b)) => {
                        let r = bootstrap_compare(&a, &b, resamples, seed)?;
                        if r.p_value == 0.0 {
                            format!("< {}", 1.0 / resamples as f64)
                        } else {
                            format!("{:.4}", r.p_value)
                        }
                    }
                    None => "n/a".to_string(),
                }
            };
            let _ = writeln!(
                out,
                "{:<10} {:>4} {:>6} {:>8.4} {:>8.4}  {p}",
                row.topology,
                row.accs.len() + row.failed,
                row.failed,
                row.mean,
                row.std
            );
        }
    }
    Ok(out)
}

/// Baseline first, then catalogue order, then anything unrecognised.
fn display_rank(topology: &str) -> usize {
    if topology == BASELINE {
        return 0;
    }
    TopologyId::ALL
        .iter()
        .position(|id| id.name() == topology)
        .map_or(usize::MAX, |i| i + 1)
}

/// Concatenated correctness of `topology` and the baseline over the seeds
/// where both completed with equally sized test sets.
pub fn paired_vectors(runs: &[&RunRecord], topology: &str) -> Option<(Vec<bool>, Vec<bool>)> {
    let done = |t: &str| -> BTreeMap<u64, &RunRecord> {
        runs.iter()
            .filter(|r| r.topology == t && r.status == RunStatus::Completed)
            .map(|r| (r.config.seed, *r))
            .collect()
    };
    let (mine, base) = (done(topology), done(BASELINE));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (seed, r) in &mine {
        if let Some(br) = base.get(seed) {
            if br.test_correct.0.len() == r.test_correct.0.len() {
                a.extend_from_slice(&r.test_correct.0);
                b.extend_from_slice(&br.test_correct.0);
            }
        }
    }
    (!a.is_empty()).then_some((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthKind, SynthSpec};

    #[test]
    fn mean_std_of_three() {
        let (m, s) = mean_std(&[0.5, 0.6, 0.7]);
        assert!((m - 0.6).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn file_names_are_safe() {
        assert_eq!(
            record_file_name("syn", "C&SA2", 42),
            "syn__C_SA2__seed42.toml"
        );
    }

    #[test]
    fn sweep_writes_records_and_summary() {
        let data = generate_synthetic(
            &SynthSpec::new(SynthKind::Channel, 40, (4, 8, 8), 4)
                .noise(0.05)
                .seed(1),
        )
        .unwrap();
        let mut cfg = ExperimentConfig::new("tiny", vec![None, Some(TopologyId::Csa)]);
        cfg.seeds = vec![1, 2, 3];
        cfg.stage_channels = vec![8];
        cfg.convs_per_stage = 1;
        cfg.train.epochs = 1;
        cfg.train.batch_size = 8;
        let dir = tempfile::tempdir().unwrap();
        let rows = run_experiment(&data, &cfg, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows
            .iter()
            .all(|r| r.accs.len() == 3 && r.dataset == "tiny"));
        assert_eq!(rows[0].topology, BASELINE);
        assert_eq!(rows[1].topology, "CSA");

        let records = load_records(dir.path()).unwrap();
        assert_eq!(records.len(), 6);
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(summary.lines().count(), 3);
        run_experiment(&data, &cfg, dir.path()).unwrap();
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        assert_eq!(summary.lines().count(), 5);

        let text = report(&records, 200, 0).unwrap();
        assert!(text.contains("dataset: tiny"));
        assert!(text.lines().any(|l| l.starts_with("CSA")));
    }

    #[test]
    fn diverged_runs_become_failed_rows() {
        let data =
            generate_synthetic(&SynthSpec::new(SynthKind::Channel, 40, (4, 8, 8), 4).seed(1))
                .unwrap();
        let mut cfg = ExperimentConfig::new("boom", vec![None]);
        cfg.seeds = vec![1];
        cfg.stage_channels = vec![8];
        cfg.convs_per_stage = 1;
        cfg.train.epochs = 2;
        cfg.train.lr0 = 1e30;
        cfg.train.clip_norm = 1e30;
        let dir = tempfile::tempdir().unwrap();
        let rows = run_experiment(&data, &cfg, dir.path()).unwrap();
        assert_eq!(rows[0].failed, 1);
        assert!(rows[0].mean.is_nan());
        let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        let line = summary.lines().nth(1).unwrap();
        assert!(
            line.starts_with("boom\tbaseline\t1\t1\tfailed\tfailed"),
            "{line}"
        );
    }
}
