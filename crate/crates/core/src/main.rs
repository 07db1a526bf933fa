use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use ssimgan::checkpoint::{self, ModelMeta};
use ssimgan::classifier::{build_classifier, evaluate, train_classifier, LAST_CONV_ACTIVATION};
use ssimgan::config::AppConfig;
use ssimgan::dataset::{load_dataset, load_images, prepare_example, prepare_examples, LabeledDataset};
use ssimgan::error::{Error, Result};
use ssimgan::gan::{generate_batch, train_gan};
use ssimgan::gradcam::{gradcam, overlay};
use ssimgan::harness::{
    assemble_training_set, group_pool, read_rows_csv, run_experiment, summarize, summarize_rows,
    ExperimentReport, SelectionSettings, Setup,
};
use ssimgan::image::{normalize, read_image, resize_bilinear, write_image, DEFAULT_MEAN, DEFAULT_STD};
use ssimgan::select::{rank_and_select, score_pool, write_scores_csv, Aggregator, SsimScore};
use ssimgan::toy::{toy_samples, write_toy_dataset, ToyConfig};
use ssimgan::Rng;

#[derive(Parser)]
#[command(name = "ssimgan", version, about = "GAN augmentation with SSIM-curated samples")]
struct Cli {
    /// JSON configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment base seed and the GAN seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent trials and scoring.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural two-class dataset as `<out>/<class>/*.ppm`.
    MakeToy {
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        /// Low-contrast, noisier variant.
        #[arg(long)]
        hard: bool,
    },
    /// Train the classifier on `<data>/<class>/*` and save a checkpoint.
    TrainCnn {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one GAN per class folder and save samples and generators.
    TrainGan {
        #[arg(long)]
        data: PathBuf,
        /// Restrict to these classes (repeatable).
        #[arg(long = "class")]
        classes: Vec<String>,
        /// Train a single GAN on every class together.
        #[arg(long)]
        pooled: bool,
    },
    /// Write images from a saved generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "synth_")]
        prefix: String,
    },
    /// Score generated images against real ones and copy the best.
    SsimRank {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Images kept per class; defaults to `select_pool_k`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_aggregator)]
        aggregator: Option<Aggregator>,
    },
    /// Write a training folder of real plus selected synthetic images.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long, value_parser = parse_setup)]
        setup: Setup,
    },
    /// Grad-CAM heatmap and overlay for one image.
    Gradcam {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "class")]
        class: usize,
        /// Layer index; defaults to the last convolutional activation.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Run every configured setup for every trial and write CSV reports.
    Experiment,
    /// Print the summary table for a rows CSV.
    Report {
        #[arg(long)]
        rows: PathBuf,
    },
}

fn parse_setup(s: &str) -> std::result::Result<Setup, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_aggregator(s: &str) -> std::result::Result<Aggregator, String> {
    match s {
        "mean" => Ok(Aggregator::Mean),
        "max" => Ok(Aggregator::Max),
        _ => Err(format!("unknown aggregator `{s}`")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Every error variant prints its source inline.
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.base_seed = seed;
        cfg.gan.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.experiment.out_dir = out.clone();
    }
    let out = cfg.experiment.out_dir.clone();
    let seed = cfg.experiment.base_seed;
    let jobs = cli.jobs.max(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::MakeToy { per_class, size, hard } => {
            let toy = if hard { ToyConfig::hard() } else { ToyConfig::default() }.with_size(size);
            let samples = toy_samples(per_class, &toy, &mut Rng::new(seed));
            write_toy_dataset(&out, &samples)?;
            info!("wrote {} images under {}", samples.len(), out.display());
        }
        Command::TrainCnn { data } => train_cnn(&cfg, &data, &out, seed)?,
        Command::TrainGan { data, classes, pooled } => train_gans(&cfg, &data, &classes, pooled, &out)?,
        Command::Generate { checkpoint, n, prefix } => {
            let (mut g, meta) = checkpoint::load(&checkpoint)?;
            if meta.kind != "generator" {
                return Err(Error::Config(format!("{} is a {} checkpoint", checkpoint.display(), meta.kind)));
            }
            let (_, paths) = generate_batch(&mut g, meta.latent_dim, n, &mut Rng::new(seed), Some(&out), &prefix)?;
            info!("wrote {} images to {}", paths.len(), out.display());
        }
        Command::SsimRank {
            candidates,
            references,
            k,
            aggregator,
        } => {
            let k = k.unwrap_or(cfg.experiment.select_pool_k);
            let agg = aggregator.unwrap_or(cfg.experiment.aggregator);
            ssim_rank(&cfg, &candidates, &references, k, agg, &out)?;
        }
        Command::Augment { data, synth, setup } => augment(&cfg, &data, &synth, setup, &out, seed)?,
        Command::Gradcam {
            image,
            checkpoint,
            class,
            layer,
        } => {
            let (mut model, meta) = checkpoint::load(&checkpoint)?;
            let img = read_image(&image)?;
            let ex = prepare_example(&img, class, meta.input_size)?;
            let h = gradcam(&mut model, &ex.input, class, layer.unwrap_or(LAST_CONV_ACTIVATION))?;
            let resized = resize_bilinear(&img.to_rgb(), meta.input_size, meta.input_size)?;
            write_image(&out.join("heatmap.pgm"), &h.to_image())?;
            write_image(&out.join("overlay.ppm"), &overlay(&h, &resized)?)?;
            let (x, y) = h.argmax();
            println!("peak at ({x}, {y}); wrote {}", out.display());
        }
        Command::Experiment => {
            let report = run_experiment(&cfg, jobs)?;
            print!("{}", summarize(&report, &cfg.experiment.setups));
        }
        Command::Report { rows } => {
            let text = fs::read(&rows).map_err(|e| Error::io(&rows, e))?;
            let rows = read_rows_csv(&text[..])?;
            let expected: Vec<Setup> = summarize_rows(&rows).iter().map(|s| s.setup).collect();
            print!("{}", summarize(&ExperimentReport { rows }, &expected));
        }
    }
    Ok(())
}

fn train_cnn(cfg: &AppConfig, data: &Path, out: &Path, seed: u64) -> Result<()> {
    let clf = &cfg.classifier;
    let rng = Rng::new(seed);
    let ds = load_dataset(data, cfg.experiment.val_fraction, &mut rng.fork(0))?.to_rgb_square(clf.input_size)?;
    if ds.num_classes() != clf.num_classes {
        return Err(Error::Config(format!(
            "{} class folders but num_classes is {}",
            ds.num_classes(),
            clf.num_classes
        )));
    }
    let train = prepare_examples(&ds, &ds.train, clf.input_size)?;
    let val = prepare_examples(&ds, &ds.val, clf.input_size)?;
    let mut model = build_classifier::<f32>(clf, &mut rng.fork(1))?;
    let report = train_classifier(&mut model, &train, &val, clf, &mut rng.fork(2))?;
    let metrics = evaluate(&mut model, &val)?;
    let meta = ModelMeta {
        kind: "classifier".into(),
        class_names: ds.class_names.clone(),
        input_size: clf.input_size,
        latent_dim: 0,
        epochs: clf.epochs,
    };
    checkpoint::save(&out.join("classifier.sgck"), &model, &meta)?;
    let summary = serde_json::json!({ "train": report, "validation": metrics });
    let path = out.join("metrics.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    println!(
        "validation accuracy {:.4} (best {:.4}); wrote {}",
        report.final_val_accuracy,
        report.best_val_accuracy,
        out.display()
    );
    Ok(())
}

fn gan_inputs(ds: &LabeledDataset, size: usize, label: Option<usize>) -> Result<Vec<ssimgan::Tensor<f32>>> {
    ds.samples
        .iter()
        .filter(|s| label.is_none_or(|l| s.label == l))
        .map(|s| normalize(&resize_bilinear(&s.image.to_rgb(), size, size)?, DEFAULT_MEAN, DEFAULT_STD))
        .collect()
}

fn train_gans(cfg: &AppConfig, data: &Path, only: &[String], pooled: bool, out: &Path) -> Result<()> {
    let ds = load_images(data)?;
    let groups: Vec<(String, Option<usize>)> = if pooled {
        vec![("all".to_string(), None)]
    } else {
        ds.class_names
            .iter()
            .enumerate()
            .filter(|(_, n)| only.is_empty() || only.contains(n))
            .map(|(i, n)| (n.clone(), Some(i)))
            .collect()
    };
    if groups.is_empty() {
        return Err(Error::Config(format!("none of {only:?} found under {}", data.display())));
    }
    for (i, (name, label)) in groups.iter().enumerate() {
        let images = gan_inputs(&ds, cfg.gan.image_size, *label)?;
        let gcfg = ssimgan::gan::GanConfig {
            seed: cfg.gan.seed.wrapping_add(i as u64),
            ..cfg.gan.clone()
        };
        let dir = out.join(name);
        info!("training GAN for {name} on {} images", images.len());
        let (gan, report) = train_gan(&images, &gcfg, Some(&dir)).map_err(|e| e.context(format!("class {name}")))?;
        let meta = ModelMeta {
            kind: "generator".into(),
            class_names: vec![name.clone()],
            input_size: gcfg.image_size,
            latent_dim: gcfg.latent_dim,
            epochs: gcfg.epochs,
        };
        checkpoint::save(&dir.join("generator.sgck"), &gan.generator, &meta)?;
        let path = dir.join("losses.json");
        fs::write(&path, serde_json::to_string(&report)?).map_err(|e| Error::io(&path, e))?;
        info!("{name}: {} steps, {} samples saved", report.steps(), report.saved.len());
    }
    Ok(())
}

fn ssim_rank(cfg: &AppConfig, candidates: &Path, references: &Path, k: usize, agg: Aggregator, out: &Path) -> Result<()> {
    let size = cfg.classifier.input_size;
    let cands = load_images(candidates)?.to_rgb_square(size)?;
    let refs = load_images(references)?.to_rgb_square(size)?;
    let mut all: Vec<SsimScore> = Vec::new();
    for (label, class) in cands.class_names.iter().enumerate() {
        let Some(rl) = refs.class_names.iter().position(|c| c == class) else {
            return Err(Error::EmptyReference.context(format!("class {class}")));
        };
        let mut ref_imgs: Vec<_> = refs.samples.iter().filter(|s| s.label == rl).map(|s| s.image.clone()).collect();
        if let Some(limit) = cfg.experiment.reference_limit {
            ref_imgs.truncate(limit);
        }
        let named: Vec<_> = cands
            .samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| (s.path.clone().unwrap_or_default(), s.image.clone()))
            .collect();
        let ranked = rank_and_select(&score_pool(&named, &ref_imgs, class, agg, &cfg.ssim)?, usize::MAX);
        let dir = out.join("selected").join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in ranked.iter().take(k) {
            let name = s.candidate_id.file_name().unwrap_or_default();
            fs::copy(&s.candidate_id, dir.join(name)).map_err(|e| Error::io(&s.candidate_id, e))?;
        }
        all.extend(ranked);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("scores.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_scores_csv(file, &all)?;
    println!("scored {} candidates; wrote {}", all.len(), path.display());
    Ok(())
}

fn augment(cfg: &AppConfig, data: &Path, synth: &Path, setup: Setup, out: &Path, seed: u64) -> Result<()> {
    let size = cfg.classifier.input_size;
    let real = load_images(data)?.to_rgb_square(size)?;
    let pool = if setup == Setup::None {
        vec![Vec::new(); real.num_classes()]
    } else {
        group_pool(&load_images(synth)?.to_rgb_square(size)?, &real.class_names)
    };
    let sel = SelectionSettings::from_config(&cfg.experiment, cfg.ssim);
    let ds = assemble_training_set(setup, &real, &pool, &sel, &mut Rng::new(seed))?;
    for (label, class) in ds.class_names.iter().enumerate() {
        let dir = out.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in ds.samples.iter().filter(|s| s.label == label) {
            let src = s.path.as_ref().ok_or_else(|| Error::Format("sample without a source file".into()))?;
            let tag = if s.synthetic { "synth_" } else { "real_" };
            let name = format!("{tag}{}", src.file_name().unwrap_or_default().to_string_lossy());
            fs::copy(src, dir.join(name)).map_err(|e| Error::io(src, e))?;
        }
    }
    let counts = ds.class_counts(&ds.train);
    println!("{setup}: {counts:?} images per class in {}", out.display());
    Ok(())
}
