//! The augmentation experiment: each trial trains one classifier per setup
//! on a shared real-data split, differing only in which synthetic images are
//! added to the training set.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{build_classifier, evaluate, train_classifier, ClassifierConfig};
use crate::config::{AppConfig, ExperimentConfig};
use crate::dataset::{load_images, prepare_examples, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::select::{random_select, rank_and_select, score_pool, Aggregator};
use crate::ssim::SsimParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    None,
    RandomSynth,
    SsimSynth,
}

impl Setup {
    /// Report order.
    pub const ALL: [Setup; 3] = [Setup::None, Setup::RandomSynth, Setup::SsimSynth];

    pub fn name(self) -> &'static str {
        match self {
            Setup::None => "none",
            Setup::RandomSynth => "random_synth",
            Setup::SsimSynth => "ssim_synth",
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setup::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown setup `{s}`")))
    }
}

/// Settings [`assemble_training_set`] needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionSettings {
    pub synth_per_class: usize,
    pub select_pool_k: usize,
    pub aggregator: Aggregator,
    pub reference_limit: Option<usize>,
    pub ssim: SsimParams,
}

impl SelectionSettings {
    pub fn from_config(cfg: &ExperimentConfig, ssim: SsimParams) -> Self {
        Self {
            synth_per_class: cfg.synth_per_class,
            select_pool_k: cfg.select_pool_k,
            aggregator: cfg.aggregator,
            reference_limit: cfg.reference_limit,
            ssim,
        }
    }
}

/// Copy of `real` whose training split additionally holds synthetic images
/// chosen per `setup`; validation is untouched. `pool[k]` are the candidates
/// for class `k`, at the same size as the real images.
pub fn assemble_training_set(
    setup: Setup,
    real: &LabeledDataset,
    pool: &[Vec<Sample>],
    sel: &SelectionSettings,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    let mut out = real.clone();
    if setup == Setup::None || sel.synth_per_class == 0 {
        return Ok(out);
    }
    for (label, class) in real.class_names.iter().enumerate() {
        let cands = pool.get(label).map(Vec::as_slice).unwrap_or(&[]);
        if cands.len() < sel.synth_per_class {
            return Err(Error::InsufficientPool {
                class: class.clone(),
                available: cands.len(),
                required: sel.synth_per_class,
            });
        }
        let chosen: Vec<Sample> = match setup {
            Setup::RandomSynth => random_select(cands, sel.synth_per_class, rng),
            Setup::SsimSynth => ssim_choice(real, label, cands, sel)?,
            Setup::None => unreachable!(),
        };
        for mut s in chosen {
            s.label = label;
            s.synthetic = true;
            out.train.push(out.samples.len());
            out.samples.push(s);
        }
    }
    Ok(out)
}

fn ssim_choice(real: &LabeledDataset, label: usize, cands: &[Sample], sel: &SelectionSettings) -> Result<Vec<Sample>> {
    let mut refs: Vec<_> = real
        .train
        .iter()
        .filter(|&&i| real.samples[i].label == label && !real.samples[i].synthetic)
        .map(|&i| real.samples[i].image.clone())
        .collect();
    if let Some(limit) = sel.reference_limit {
        refs.truncate(limit);
    }
    // Candidates are identified by position so repeated paths stay distinct.
    let named: Vec<_> = cands
        .iter()
        .enumerate()
        .map(|(i, s)| (PathBuf::from(i.to_string()), s.image.clone()))
        .collect();
    let indexed = score_pool(&named, &refs, &real.class_names[label], sel.aggregator, &sel.ssim)?;
    let shortlist = rank_and_select(&indexed, sel.select_pool_k);
    Ok(rank_and_select(&shortlist, sel.synth_per_class)
        .into_iter()
        .map(|s| {
            let i: usize = s.candidate_id.to_string_lossy().parse().expect("own index");
            cands[i].clone()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub setup: Setup,
    pub trial: usize,
    pub seed: u64,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub setup: Setup,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    /// Ordered by setup (report order), then trial.
    pub rows: Vec<TrialRow>,
}

impl ExperimentReport {
    /// Mean/max/min of the final validation accuracy per setup, in report
    /// order, skipping setups without rows.
    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize_rows(&self.rows)
    }
}

pub fn summarize_rows(rows: &[TrialRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for setup in Setup::ALL {
        let accs: Vec<f64> = rows.iter().filter(|r| r.setup == setup).map(|r| r.final_val_acc).collect();
        if accs.is_empty() {
            continue;
        }
        out.push(SummaryRow {
            setup,
            mean: accs.iter().sum::<f64>() / accs.len() as f64,
            max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: accs.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    out
}

/// One trial of one setup on already split data.
pub fn run_trial(
    setup: Setup,
    trial: usize,
    seed: u64,
    split: &LabeledDataset,
    pool: &[Vec<Sample>],
    sel: &SelectionSettings,
    clf: &ClassifierConfig,
) -> Result<TrialRow> {
    let base = Rng::new(seed);
    let data = assemble_training_set(setup, split, pool, sel, &mut base.fork(3))?;
    let train = prepare_examples(&data, &data.train, clf.input_size)?;
    let val = prepare_examples(&data, &data.val, clf.input_size)?;
    let mut model = build_classifier::<f32>(clf, &mut base.fork(1))?;
    let report = train_classifier(&mut model, &train, &val, clf, &mut base.fork(2))?;
    let metrics = evaluate(&mut model, &val)?;
    info!(
        "{setup} trial {trial}: final {:.4} best {:.4} ({:.1}s)",
        report.final_val_accuracy, report.best_val_accuracy, report.wall_time_secs
    );
    Ok(TrialRow {
        setup,
        trial,
        seed,
        final_val_acc: report.final_val_accuracy,
        best_val_acc: report.best_val_accuracy,
        confusion: metrics.confusion,
    })
}

/// Stratified split of `real` for one trial, keeping at most
/// `real_per_class` training images per class.
pub fn trial_split(real: &LabeledDataset, cfg: &ExperimentConfig, seed: u64) -> Result<LabeledDataset> {
    let base = Rng::new(seed);
    let mut split = real.clone();
    split.split_stratified(cfg.val_fraction, &mut base.fork(0))?;
    let mut keep = Vec::new();
    let mut cap_rng = base.fork(4);
    for label in 0..split.num_classes() {
        let mut idx: Vec<usize> = split.train.iter().copied().filter(|&i| split.samples[i].label == label).collect();
        if idx.len() < cfg.real_per_class {
            warn!(
                "class {} has {} training images, fewer than real_per_class {}",
                split.class_names[label],
                idx.len(),
                cfg.real_per_class
            );
        }
        cap_rng.shuffle(&mut idx);
        idx.truncate(cfg.real_per_class);
        keep.extend(idx);
    }
    keep.sort_unstable();
    split.train = keep;
    Ok(split)
}

/// Candidates grouped by the class order of `classes`; classes absent from
/// `pool` get no candidates.
pub fn group_pool(pool: &LabeledDataset, classes: &[String]) -> Vec<Vec<Sample>> {
    classes
        .iter()
        .map(|name| match pool.class_names.iter().position(|c| c == name) {
            Some(k) => pool.samples.iter().filter(|s| s.label == k).cloned().collect(),
            None => Vec::new(),
        })
        .collect()
}

/// Run every (setup, trial) pair on in-memory data. Trials run on up to
/// `jobs` threads; each trial is single-threaded and seeded by
/// `base_seed + trial`, so the rows do not depend on `jobs`.
pub fn run_experiment_on(
    real: &LabeledDataset,
    pool: &[Vec<Sample>],
    cfg: &ExperimentConfig,
    ssim: SsimParams,
    clf: &ClassifierConfig,
    jobs: usize,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    clf.validate()?;
    let sel = SelectionSettings::from_config(cfg, ssim);
    let mut setups = cfg.setups.clone();
    setups.sort_unstable();
    setups.dedup();
    let real = real.clone().to_rgb_square(clf.input_size)?;
    let pool: Vec<Vec<Sample>> = pool
        .iter()
        .map(|class| {
            class
                .iter()
                .map(|s| {
                    let image = crate::image::resize_bilinear(&s.image.to_rgb(), clf.input_size, clf.input_size)?;
                    Ok(Sample { image, ..s.clone() })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let run_one = |trial: usize| -> Result<Vec<TrialRow>> {
        let seed = cfg.base_seed + trial as u64;
        let split = trial_split(&real, cfg, seed).map_err(|e| e.context(format!("trial {trial}")))?;
        setups
            .iter()
            .map(|&setup| {
                run_trial(setup, trial, seed, &split, &pool, &sel, clf)
                    .map_err(|e| e.context(format!("setup {setup}, trial {trial}")))
            })
            .collect()
    };
    let per_trial: Vec<Vec<TrialRow>> = if jobs <= 1 {
        (0..cfg.trials).map(run_one).collect::<Result<_>>()?
    } else {
        let tp = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        tp.install(|| (0..cfg.trials).into_par_iter().map(run_one).collect::<Result<_>>())?
    };
    let mut rows: Vec<TrialRow> = per_trial.into_iter().flatten().collect();
    rows.sort_by_key(|r| (r.setup, r.trial));
    Ok(ExperimentReport { rows })
}

/// Load the configured data, run the experiment and write `rows.csv` and
/// `summary.csv` into `cfg.experiment.out_dir`.
pub fn run_experiment(cfg: &AppConfig, jobs: usize) -> Result<ExperimentReport> {
    let ex = &cfg.experiment;
    let real = load_images(&ex.data_root)?;
    let needs_pool = ex.setups.iter().any(|s| *s != Setup::None) && ex.synth_per_class > 0;
    let pool = if needs_pool {
        group_pool(&load_images(&ex.synth_root)?, &real.class_names)
    } else {
        vec![Vec::new(); real.num_classes()]
    };
    let report = run_experiment_on(&real, &pool, ex, cfg.ssim, &cfg.classifier, jobs)?;
    write_reports(&ex.out_dir, &report)?;
    Ok(report)
}

pub fn write_reports(dir: &Path, report: &ExperimentReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows_path = dir.join("rows.csv");
    let summary_path = dir.join("summary.csv");
    let mut buf = Vec::new();
    write_rows_csv(&mut buf, &report.rows)?;
    fs::write(&rows_path, &buf).map_err(|e| Error::io(&rows_path, e))?;
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &report.summary())?;
    fs::write(&summary_path, &buf).map_err(|e| Error::io(&summary_path, e))?;
    Ok((rows_path, summary_path))
}

#[derive(Serialize, Deserialize)]
struct RowRecord {
    setup: String,
    trial: usize,
    seed: u64,
    final_val_acc: f64,
    best_val_acc: f64,
    confusion_flat: String,
}

/// `setup,trial,seed,final_val_acc,best_val_acc,confusion_flat` with the
/// confusion matrix row-major and `;`-separated.
pub fn write_rows_csv<W: Write>(out: W, rows: &[TrialRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        let flat: Vec<String> = r.confusion.iter().flatten().map(u64::to_string).collect();
        w.serialize(RowRecord {
            setup: r.setup.to_string(),
            trial: r.trial,
            seed: r.seed,
            final_val_acc: r.final_val_acc,
            best_val_acc: r.best_val_acc,
            confusion_flat: flat.join(";"),
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let rec: RowRecord = rec?;
        let flat: Vec<u64> = if rec.confusion_flat.is_empty() {
            Vec::new()
        } else {
            rec.confusion_flat
                .split(';')
                .map(|v| v.parse().map_err(|_| Error::Format(format!("bad confusion entry `{v}`"))))
                .collect::<Result<_>>()?
        };
        let k = (flat.len() as f64).sqrt().round() as usize;
        if k * k != flat.len() {
            return Err(Error::Format(format!("confusion of {} entries is not square", flat.len())));
        }
        rows.push(TrialRow {
            setup: rec.setup.parse()?,
            trial: rec.trial,
            seed: rec.seed,
            final_val_acc: rec.final_val_acc,
            best_val_acc: rec.best_val_acc,
            confusion: flat.chunks(k.max(1)).map(<[u64]>::to_vec).collect(),
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct SummaryRecord {
    setup: String,
    mean: f64,
    max: f64,
    min: f64,
}

/// `setup,mean,max,min`.
pub fn write_summary_csv<W: Write>(out: W, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summary {
        w.serialize(SummaryRecord {
            setup: s.setup.to_string(),
            mean: s.mean,
            max: s.max,
            min: s.min,
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        let rec: SummaryRecord = rec?;
        out.push(SummaryRow {
            setup: rec.setup.parse()?,
            mean: rec.mean,
            max: rec.max,
            min: rec.min,
        });
    }
    Ok(out)
}

/// Fixed-width accuracy table in report order. Setups in `expected` that
/// have no rows are left out with a warning.
pub fn summarize(report: &ExperimentReport, expected: &[Setup]) -> String {
    let summary = report.summary();
    for s in expected {
        if !summary.iter().any(|r| r.setup == *s) {
            warn!("setup {s} has no rows; omitted from the table");
        }
    }
    let mut out = format!("{:<14}{:>10}{:>10}{:>10}\n", "setup", "mean", "max", "min");
    for r in &summary {
        out.push_str(&format!(
            "{:<14}{:>10.6}{:>10.6}{:>10.6}\n",
            r.setup.name(),
            r.mean,
            r.max,
            r.min
        ));
    }
    out
}

/// Inverse of [`summarize`].
pub fn parse_summary_table(text: &str) -> Result<Vec<SummaryRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.split_whitespace().collect::<Vec<_>>() == ["setup", "mean", "max", "min"] => {}
        _ => return Err(Error::Format("missing summary header".into())),
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("summary line `{line}`")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("bad number `{s}`")))
            };
            Ok(SummaryRow {
                setup: f[0].parse()?,
                mean: num(f[1])?,
                max: num(f[2])?,
                min: num(f[3])?,
            })
        })
        .collect()
}
