//! Experiment runner backing the CLI: flat `key = value` config files,
//! train / prune / compare commands, multi-seed replication, and summary
//! tables with Student-t confidence intervals.
//!
//! Documented config keys (defaults in parentheses):
//!
//! ```text
//! dataset            synth | cifar10                 (required)
//! synth_classes      classes for the generator       (4)
//! synth_size         total generated examples        (2000)
//! synth_hw           image side in pixels            (16)
//! data_seed          dataset split seed              (7)
//! cifar_dir          directory with CIFAR-10 binary batches (required for cifar10)
//! cifar_classes      comma list of class ids         (0,1,2,3)
//! cifar_max_per_class  train-side cap per class      (unlimited)
//! arch               tiny | lenet                    (tiny)
//! lr                 learning rate                   (0.05)
//! momentum           SGD momentum                    (0.9)
//! batch_size         training batch size             (32)
//! epochs             training epochs                 (20)
//! lr_decay_epochs    decay period, 0 disables        (10)
//! lr_decay_factor    decay multiplier                (0.1)
//! train_seed         init + shuffle seed             (1)
//! metrics            comma list of metric names      (composite + all five)
//! k                  comma list of oracle widths     (5)
//! max_acc_drop       stop threshold for runs         (0.5)
//! val_images         validation sample size          (256)
//! val_batch          validation batch size           (32)
//! replications       seeds per (metric, k)           (5)
//! prune_seed         base validation-sample seed     (100)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::data::{load_cifar10, synth_dataset, DatasetSplits};
use crate::error::{Error, Result};
use crate::network::{load_checkpoint, save_checkpoint, NetworkDef};
use crate::pruning::{
    run_pruning, trajectory_from_csv, trajectory_to_csv, weights_removed_at_drop, PruneConfig,
    SelectionRule,
};
use crate::saliency::MetricKind;
use crate::train::{train, TrainConfig, TrainHistory};

#[derive(Debug, Clone)]
pub enum DatasetSpec {
    Synth {
        classes: usize,
        size: usize,
        hw: usize,
        seed: u64,
    },
    Cifar {
        dir: PathBuf,
        classes: Vec<usize>,
        max_per_class: Option<usize>,
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DatasetSplits> {
        match self {
            DatasetSpec::Synth {
                classes,
                size,
                hw,
                seed,
            } => synth_dataset(*classes, *size, *hw, *seed),
            DatasetSpec::Cifar {
                dir,
                classes,
                max_per_class,
                seed,
            } => load_cifar10(dir, classes, *max_per_class, *seed),
        }
    }

    fn describe(&self) -> Vec<(String, String)> {
        match self {
            DatasetSpec::Synth {
                classes,
                size,
                hw,
                seed,
            } => vec![
                ("dataset".into(), "synth".into()),
                ("synth_classes".into(), classes.to_string()),
                ("synth_size".into(), size.to_string()),
                ("synth_hw".into(), hw.to_string()),
                ("data_seed".into(), seed.to_string()),
            ],
            DatasetSpec::Cifar {
                dir,
                classes,
                max_per_class,
                seed,
            } => vec![
                ("dataset".into(), "cifar10".into()),
                ("cifar_dir".into(), dir.display().to_string()),
                (
                    "cifar_classes".into(),
                    classes
                        .iter()
                        .map(|c| c.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ),
                (
                    "cifar_max_per_class".into(),
                    max_per_class.map_or("unlimited".into(), |m| m.to_string()),
                ),
                ("data_seed".into(), seed.to_string()),
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub arch: String,
    pub train: TrainConfig,
    /// Metric names to prune with; `composite` expands over `k_values`.
    pub metrics: Vec<String>,
    pub k_values: Vec<usize>,
    pub max_acc_drop: f64,
    pub val_images: usize,
    pub val_batch: usize,
    pub replications: usize,
    pub prune_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        for name in &self.metrics {
            SelectionRule::parse(name, self.k_values.first().copied().unwrap_or(5))?;
        }
        if self.k_values.is_empty() {
            return Err(Error::Config("k must list at least one value".into()));
        }
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.max_acc_drop) {
            return Err(Error::Config("max_acc_drop must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Metadata lines embedded as `# key = value` comments in every
    /// output file. Deliberately timestamp-free so identical invocations
    /// produce identical bytes.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let mut meta = vec![("version".into(), env!("CARGO_PKG_VERSION").to_string())];
        meta.extend(self.dataset.describe());
        meta.push(("arch".into(), self.arch.clone()));
        meta.push(("lr".into(), format!("{}", self.train.learning_rate)));
        meta.push(("momentum".into(), format!("{}", self.train.momentum)));
        meta.push(("batch_size".into(), self.train.batch_size.to_string()));
        meta.push(("epochs".into(), self.train.epochs.to_string()));
        meta.push(("lr_decay_epochs".into(), self.train.decay_epochs.to_string()));
        meta.push(("lr_decay_factor".into(), format!("{}", self.train.decay_factor)));
        meta.push(("train_seed".into(), self.train.seed.to_string()));
        meta.push(("max_acc_drop".into(), format!("{}", self.max_acc_drop)));
        meta.push(("val_images".into(), self.val_images.to_string()));
        meta.push(("val_batch".into(), self.val_batch.to_string()));
        meta
    }
}

/// Parse the flat `key = value` config format; `#` starts a comment and
/// unknown keys are rejected by name.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut keys: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config line {} is not `key = value`: {raw}",
                lineno + 1
            )));
        };
        keys.insert(k.trim().to_string(), v.trim().to_string());
    }

    let known = [
        "dataset",
        "synth_classes",
        "synth_size",
        "synth_hw",
        "data_seed",
        "cifar_dir",
        "cifar_classes",
        "cifar_max_per_class",
        "arch",
        "lr",
        "momentum",
        "batch_size",
        "epochs",
        "lr_decay_epochs",
        "lr_decay_factor",
        "train_seed",
        "metrics",
        "k",
        "max_acc_drop",
        "val_images",
        "val_batch",
        "replications",
        "prune_seed",
    ];
    for key in keys.keys() {
        if !known.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
    }

    let get = |key: &str| keys.get(key).map(String::as_str);
    let parse_num = |key: &str| -> Result<Option<f64>> {
        match get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: expected a number, got `{v}`"))),
        }
    };
    let parse_int = |key: &str| -> Result<Option<u64>> {
        match get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: expected an integer, got `{v}`"))),
        }
    };

    let dataset = match get("dataset") {
        Some("synth") => DatasetSpec::Synth {
            classes: parse_int("synth_classes")?.unwrap_or(4) as usize,
            size: parse_int("synth_size")?.unwrap_or(2000) as usize,
            hw: parse_int("synth_hw")?.unwrap_or(16) as usize,
            seed: parse_int("data_seed")?.unwrap_or(7),
        },
        Some("cifar10") => {
            let dir = get("cifar_dir").ok_or_else(|| {
                Error::Config("dataset = cifar10 requires the cifar_dir key".into())
            })?;
            let classes = match get("cifar_classes") {
                None => vec![0, 1, 2, 3],
                Some(list) => list
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| {
                            Error::Config(format!("key `cifar_classes`: bad class id `{s}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            DatasetSpec::Cifar {
                dir: PathBuf::from(dir),
                classes,
                max_per_class: parse_int("cifar_max_per_class")?.map(|m| m as usize),
                seed: parse_int("data_seed")?.unwrap_or(7),
            }
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "key `dataset`: unknown value `{other}` (valid: synth, cifar10)"
            )))
        }
        None => return Err(Error::Config("missing required key `dataset`".into())),
    };

    let metrics = match get("metrics") {
        None => {
            let mut all = vec!["composite".to_string()];
            all.extend(MetricKind::ALL.iter().map(|m| m.name().to_string()));
            all
        }
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
    };
    let k_values = match get("k") {
        None => vec![5],
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("key `k`: bad value `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?,
    };

    let cfg = ExperimentConfig {
        dataset,
        arch: get("arch").unwrap_or("tiny").to_string(),
        train: TrainConfig {
            learning_rate: parse_num("lr")?.unwrap_or(0.05),
            momentum: parse_num("momentum")?.unwrap_or(0.9),
            batch_size: parse_int("batch_size")?.unwrap_or(32) as usize,
            epochs: parse_int("epochs")?.unwrap_or(20) as usize,
            seed: parse_int("train_seed")?.unwrap_or(1),
            decay_epochs: parse_int("lr_decay_epochs")?.unwrap_or(10) as usize,
            decay_factor: parse_num("lr_decay_factor")?.unwrap_or(0.1),
        },
        metrics,
        k_values,
        max_acc_drop: parse_num("max_acc_drop")?.unwrap_or(0.5),
        val_images: parse_int("val_images")?.unwrap_or(256) as usize,
        val_batch: parse_int("val_batch")?.unwrap_or(32) as usize,
        replications: parse_int("replications")?.unwrap_or(5) as usize,
        prune_seed: parse_int("prune_seed")?.unwrap_or(100),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    parse_config(&text)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_test_acc: f64,
    pub history: TrainHistory,
}

/// Train the configured network and save a checkpoint plus a plain-text
/// training log under `out_dir`.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = cfg.dataset.load()?;
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let net = NetworkDef::by_name(&cfg.arch, splits.train.image_shape(), splits.num_classes)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(seed) = seed_override {
        train_cfg.seed = seed;
    }
    let (store, history) = train(&net, &splits, &train_cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join(format!("{}.ckpt", cfg.arch));
    save_checkpoint(&checkpoint, &net, &store)?;

    let log = out_dir.join(format!("{}_train.log", cfg.arch));
    let mut text = String::new();
    for (k, v) in cfg.metadata() {
        let _ = writeln!(text, "# {k} = {v}");
    }
    let _ = writeln!(text, "# seed = {}", train_cfg.seed);
    text.push_str(&history.to_log());
    write_atomic(&log, text.as_bytes())?;

    let final_test_acc = history.epochs.last().map_or(f64::NAN, |e| e.test_acc);
    Ok(TrainOutcome {
        checkpoint,
        log,
        final_test_acc,
        history,
    })
}

#[derive(Debug)]
pub struct PruneOutcome {
    pub trajectories: Vec<PathBuf>,
    pub audits: Vec<PathBuf>,
}

/// Prune a trained checkpoint with one metric: one trajectory CSV per
/// replication seed (or exactly one when `seed_override` is given), named
/// `{arch}_{metric}_{k}_{seed}.csv`, plus a JSON-lines audit log per
/// composite run.
pub fn cmd_prune(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    metric_name: &str,
    k_override: Option<usize>,
    max_drop_override: Option<f64>,
    seed_override: Option<u64>,
    out_dir: &Path,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    let k = k_override.unwrap_or_else(|| cfg.k_values.first().copied().unwrap_or(5));
    let rule = SelectionRule::parse(metric_name, k)?;
    let (net, store) = load_checkpoint(checkpoint)?;
    let splits = cfg.dataset.load()?;
    if splits.train.image_shape() != net.input_shape {
        return Err(Error::shape_mismatch(
            "checkpoint vs dataset",
            net.input_shape,
            splits.train.image_shape(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;

    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => (0..cfg.replications as u64)
            .map(|r| cfg.prune_seed + r)
            .collect(),
    };
    let max_drop = max_drop_override.unwrap_or(cfg.max_acc_drop);

    let mut outcome = PruneOutcome {
        trajectories: Vec::new(),
        audits: Vec::new(),
    };
    for seed in seeds {
        let prune_cfg = PruneConfig {
            rule: rule.clone(),
            max_test_acc_drop: max_drop,
            seed,
            val_images: cfg.val_images,
            val_batch: cfg.val_batch,
        };
        let stem = format!("{}_{}_{}_{}", cfg.arch, rule.name(), rule.k(), seed);
        let mut audit_bytes: Vec<u8> = Vec::new();
        let audit_sink: Option<&mut dyn std::io::Write> =
            if matches!(rule, SelectionRule::Composite(_)) {
                Some(&mut audit_bytes)
            } else {
                None
            };
        let traj = run_pruning(&net, store.clone(), &prune_cfg, &splits, audit_sink)?;

        let mut meta = cfg.metadata();
        meta.push(("metric".into(), rule.name().to_string()));
        meta.push(("k".into(), rule.k().to_string()));
        meta.push(("seed".into(), seed.to_string()));
        meta.push(("checkpoint".into(), checkpoint.display().to_string()));
        let csv_path = out_dir.join(format!("{stem}.csv"));
        write_atomic(&csv_path, trajectory_to_csv(&traj, &meta).as_bytes())?;
        outcome.trajectories.push(csv_path);

        if !audit_bytes.is_empty() {
            let audit_path = out_dir.join(format!("{stem}.audit.jsonl"));
            write_atomic(&audit_path, &audit_bytes)?;
            outcome.audits.push(audit_path);
        }
    }
    Ok(outcome)
}

/// Mean and the half-width of a 95% confidence interval: Student-t
/// quantile for n <= 30, normal approximation beyond. `None` half-width
/// for fewer than two values.
pub fn mean_and_half_width(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let q = if n <= 30 {
        StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("valid dof")
            .inverse_cdf(0.975)
    } else {
        Normal::new(0.0, 1.0).expect("valid normal").inverse_cdf(0.975)
    };
    (mean, Some(q * sd / (n as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub k: usize,
    pub runs: usize,
    pub mean_removed_pct: f64,
    pub ci_half_width: Option<f64>,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub rows: Vec<SummaryRow>,
    pub csv: PathBuf,
    pub table: PathBuf,
}

/// Summarize stored trajectory CSVs: per (metric, k), the mean and 95% CI
/// half-width of conv weights removed at the given accuracy drop across
/// seeds. Row order is the five constituents in table order, then
/// composite rows by ascending k.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    in_dir: &Path,
    drop: f64,
    out_dir: &Path,
) -> Result<CompareOutcome> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(in_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && p.file_name().is_some_and(|n| n != "summary.csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("trajectory directory"));
    }

    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for path in &paths {
        let text = std::fs::read_to_string(path)?;
        let (traj, meta) = trajectory_from_csv(&text)?;
        let metric = meta
            .get("metric")
            .cloned()
            .ok_or_else(|| Error::MalformedFile {
                path: path.display().to_string(),
                detail: "missing metric metadata".into(),
            })?;
        let k: usize = meta
            .get("k")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        groups
            .entry((metric, k))
            .or_default()
            .push(weights_removed_at_drop(&traj, drop));
    }

    // Constituents in table order, then composite by ascending k.
    let mut ordered: Vec<(String, usize)> = Vec::new();
    for m in MetricKind::ALL {
        let key = (m.name().to_string(), 0usize);
        if groups.contains_key(&key) {
            ordered.push(key);
        }
    }
    let mut composite_ks: Vec<usize> = groups
        .keys()
        .filter(|(m, _)| m == "composite")
        .map(|&(_, k)| k)
        .collect();
    composite_ks.sort_unstable();
    for k in composite_ks {
        ordered.push(("composite".to_string(), k));
    }
    // Anything else (unexpected metrics) still gets reported, after.
    for key in groups.keys() {
        if !ordered.contains(key) {
            ordered.push(key.clone());
        }
    }

    let rows: Vec<SummaryRow> = ordered
        .into_iter()
        .map(|(metric, k)| {
            let values = &groups[&(metric.clone(), k)];
            let (mean, hw) = mean_and_half_width(values);
            SummaryRow {
                metric,
                k,
                runs: values.len(),
                mean_removed_pct: mean,
                ci_half_width: hw,
            }
        })
        .collect();

    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::new();
    for (key, value) in cfg.metadata() {
        let _ = writeln!(csv, "# {key} = {value}");
    }
    let _ = writeln!(csv, "# drop = {drop}");
    csv.push_str("metric,k,runs,mean_removed_pct,ci_half_width\n");
    for r in &rows {
        let hw = r
            .ci_half_width
            .map_or(String::new(), |h| format!("{h:.6}"));
        let _ = writeln!(
            csv,
            "{},{},{},{:.6},{}",
            r.metric, r.k, r.runs, r.mean_removed_pct, hw
        );
    }
    let csv_path = out_dir.join("summary.csv");
    write_atomic(&csv_path, csv.as_bytes())?;

    let mut table = String::new();
    let _ = writeln!(
        table,
        "conv weights removed (%) at accuracy drop {:.1}%",
        drop * 100.0
    );
    let _ = writeln!(table, "{:<18} {:>4} {:>5} {:>12} {:>14}", "metric", "k", "runs", "mean", "95% half-width");
    for r in &rows {
        let k = if r.metric == "composite" {
            r.k.to_string()
        } else {
            "-".to_string()
        };
        let hw = match r.ci_half_width {
            Some(h) => format!("{h:.2}"),
            None => "(single run)".to_string(),
        };
        let _ = writeln!(
            table,
            "{:<18} {:>4} {:>5} {:>12.2} {:>14}",
            r.metric, k, r.runs, r.mean_removed_pct, hw
        );
    }
    let table_path = out_dir.join("summary.txt");
    write_atomic(&table_path, table.as_bytes())?;

    Ok(CompareOutcome {
        rows,
        csv: csv_path,
        table: table_path,
    })
}
