//! Argument parsing and subcommand drivers for the `synrealmix` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use synrealmix::classbalance::{
    pixel_frequency_with, rcs_distribution, ClassStats, DEFAULT_PRESENCE_THRESHOLD, DEFAULT_RCS_TEMPERATURE,
};
use synrealmix::io::{load_image, load_label, load_manifest, manifest_dir, save_image, save_label, write_json};
use synrealmix::metrics::{iou_per_class, precision_recall, render_iou_table, ConfusionMatrix};
use synrealmix::mixing::{ignore_pseudo_label, make_mixed_sample_with, PseudoLabel, SourceAlignment};
use synrealmix::spectral::{amplitude_visual, decompose, phase_visual, AmplitudeBand};
use synrealmix::toybench::{generate_split, Domain, Split, DEFAULT_CANVAS};
use synrealmix::trainer::teacher::predict;
use synrealmix::trainer::run::eval_model;
use synrealmix::trainer::{train, TrainConfig, TrainData};
use synrealmix::{Error, ImageTensor, CLASS_NAMES, NUM_CLASSES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    /// Help or version text requested; not a failure.
    Info(String),
    Usage(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Info(_) => EXIT_OK,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) => match e {
                Error::Io { .. } | Error::Image { .. } => EXIT_IO,
                Error::Numerical(_) => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Info(s) | CliError::Usage(s) => f.write_str(s.trim_end()),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "synrealmix", version, about = "Fourier mixing and class-balanced self-training toolkit")]
struct Cli {
    /// Root seed; every random draw is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-entry fan-out.
    #[arg(long, global = true, env = "SYNREALMIX_THREADS")]
    threads: Option<usize>,
    /// Output directory (output file for `stats` and `eval`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Write amplitude and phase visualisations of an image.
    Spectra { image: PathBuf },
    /// Build one mixed sample from a source and a target image.
    Mix {
        #[arg(long)]
        source_img: PathBuf,
        #[arg(long)]
        source_lbl: PathBuf,
        #[arg(long)]
        target_img: PathBuf,
        /// Target labels used in place of pseudo-labels; ignored pixels otherwise.
        #[arg(long)]
        target_lbl: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AlignArg::Fourier)]
        alignment: AlignArg,
        /// Swap only this low-frequency fraction of the spectrum.
        #[arg(long)]
        band: Option<f64>,
    },
    /// Class pixel statistics and the rare class sampling distribution.
    Stats {
        manifest: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RCS_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value_t = DEFAULT_PRESENCE_THRESHOLD)]
        presence_threshold: f64,
        #[arg(long, value_enum, default_value_t = DomainArg::Source)]
        domain: DomainArg,
    },
    /// Generate the procedural toy benchmark.
    GenToy {
        #[arg(long)]
        n_source: usize,
        #[arg(long)]
        n_target: usize,
        /// Held-out labeled target images; defaults to half of `--n-target`.
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_CANVAS)]
        canvas: usize,
    },
    /// Self-train on a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Score predicted label maps against a manifest's test split.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignArg {
    Fourier,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainArg {
    Source,
    Target,
}

/// Fully resolved invocation, written to `run_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    Spectra {
        image: PathBuf,
    },
    Mix {
        source_img: PathBuf,
        source_lbl: PathBuf,
        target_img: PathBuf,
        target_lbl: Option<PathBuf>,
        alignment: AlignArg,
        band: Option<f64>,
    },
    Stats {
        manifest: PathBuf,
        temperature: f64,
        presence_threshold: f64,
        domain: DomainArg,
    },
    GenToy {
        n_source: usize,
        n_target: usize,
        n_test: usize,
        canvas: usize,
    },
    Train {
        config: PathBuf,
        manifest: PathBuf,
        trainer: TrainConfig,
    },
    Eval {
        pred_dir: PathBuf,
        gt_manifest: PathBuf,
    },
}

impl RunConfig {
    /// Directory that receives `run_config.json`.
    pub fn record_dir(&self) -> PathBuf {
        match self.command {
            Command::Stats { .. } | Command::Eval { .. } => manifest_dir(&self.out),
            _ => self.out.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), Error> {
        write_json(&dir.join("run_config.json"), self)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

/// Parses `argv` (including the program name) into a resolved config.
/// Reads the trainer config file, so unreadable files surface here.
pub fn parse_args<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Info(e.to_string())
        }
        _ => CliError::Usage(e.render().to_string()),
    })?;
    let out = cli
        .out
        .ok_or_else(|| CliError::Usage("error: the argument '--out <OUT>' is required".into()))?;
    if cli.threads == Some(0) {
        return Err(CliError::Usage("error: --threads must be at least 1".into()));
    }
    let mut seed = cli.seed.unwrap_or(0);
    let command = match cli.command {
        Sub::Spectra { image } => Command::Spectra { image },
        Sub::Mix {
            source_img,
            source_lbl,
            target_img,
            target_lbl,
            alignment,
            band,
        } => {
            if let Some(b) = band {
                if !(0.0..=1.0).contains(&b) {
                    return Err(CliError::Usage("error: --band must be in [0, 1]".into()));
                }
            }
            Command::Mix {
                source_img,
                source_lbl,
                target_img,
                target_lbl,
                alignment,
                band,
            }
        }
        Sub::Stats {
            manifest,
            temperature,
            presence_threshold,
            domain,
        } => Command::Stats {
            manifest,
            temperature,
            presence_threshold,
            domain,
        },
        Sub::GenToy {
            n_source,
            n_target,
            n_test,
            canvas,
        } => Command::GenToy {
            n_source,
            n_target,
            n_test: n_test.unwrap_or(n_target / 2),
            canvas,
        },
        Sub::Train { config, manifest } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut trainer = TrainConfig::from_kv_str(&text)?;
            // an explicit --seed wins over the file
            match cli.seed {
                Some(s) => trainer.seed = s,
                None => seed = trainer.seed,
            }
            Command::Train {
                config,
                manifest,
                trainer,
            }
        }
        Sub::Eval { pred_dir, gt_manifest } => Command::Eval { pred_dir, gt_manifest },
    };
    Ok(RunConfig {
        seed,
        threads: cli.threads,
        out,
        command,
    })
}

/// Executes a resolved config, returning a short human-readable summary.
pub fn run(cfg: &RunConfig) -> Result<String, CliError> {
    if let Some(n) = cfg.threads {
        // a pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let summary = match &cfg.command {
        Command::Spectra { image } => run_spectra(image, &cfg.out)?,
        Command::Mix {
            source_img,
            source_lbl,
            target_img,
            target_lbl,
            alignment,
            band,
        } => {
            let align = match (alignment, band) {
                (AlignArg::None, _) => SourceAlignment::None,
                (AlignArg::Fourier, None) => SourceAlignment::Fourier,
                (AlignArg::Fourier, Some(f)) => SourceAlignment::FourierBand(AmplitudeBand::LowFrequency { fraction: *f }),
            };
            run_mix(source_img, source_lbl, target_img, target_lbl.as_deref(), align, cfg.seed, &cfg.out)?
        }
        Command::Stats {
            manifest,
            temperature,
            presence_threshold,
            domain,
        } => run_stats(manifest, *temperature, *presence_threshold, *domain, &cfg.out)?,
        Command::GenToy {
            n_source,
            n_target,
            n_test,
            canvas,
        } => {
            let m = generate_split(*n_source, *n_target, *n_test, cfg.seed, *canvas, &cfg.out)?;
            format!("wrote {} entries to {}", m.entries.len(), cfg.out.join("manifest.json").display())
        }
        Command::Train { manifest, trainer, .. } => run_train(manifest, trainer, &cfg.out)?,
        Command::Eval { pred_dir, gt_manifest } => run_eval(pred_dir, gt_manifest, &cfg.out)?,
    };
    let dir = cfg.record_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&dir)?;
    Ok(summary)
}

fn run_spectra(image: &Path, out: &Path) -> Result<String, Error> {
    let rep = decompose(&load_image(image)?)?;
    save_image(&out.join("amplitude.png"), &amplitude_visual(&rep)?)?;
    save_image(&out.join("phase.png"), &phase_visual(&rep)?)?;
    Ok(format!("wrote amplitude.png and phase.png to {}", out.display()))
}

#[derive(Serialize)]
struct MixMeta<'a> {
    seed: u64,
    selected_classes: &'a [u8],
    selected_names: Vec<&'static str>,
    pasted_pixels: usize,
    alignment: String,
}

fn run_mix(
    source_img: &Path,
    source_lbl: &Path,
    target_img: &Path,
    target_lbl: Option<&Path>,
    alignment: SourceAlignment,
    seed: u64,
    out: &Path,
) -> Result<String, Error> {
    let si = load_image(source_img)?;
    let sl = load_label(source_lbl)?;
    let ti = load_image(target_img)?;
    let pseudo = match target_lbl {
        Some(p) => PseudoLabel::uniform(load_label(p)?, 1.0)?,
        None => ignore_pseudo_label(ti.height(), ti.width())?,
    };
    let sample = make_mixed_sample_with((&si, &sl), (&ti, &pseudo), seed, alignment)?;
    save_image(&out.join("mixed.png"), &sample.image)?;
    save_label(&out.join("mixed_label.png"), &sample.label)?;
    let mask = ImageTensor::new(
        si.height(),
        si.width(),
        1,
        sample.mask.data().iter().map(|&m| m as f64).collect(),
    )?;
    save_image(&out.join("mask.png"), &mask)?;
    let meta = MixMeta {
        seed,
        selected_classes: &sample.selected_classes,
        selected_names: sample
            .selected_classes
            .iter()
            .filter_map(|&c| CLASS_NAMES.get(c as usize).copied())
            .collect(),
        pasted_pixels: sample.mask.count(),
        alignment: format!("{alignment:?}"),
    };
    write_json(&out.join("meta.json"), &meta)?;
    Ok(format!("pasted classes {:?} into {}", meta.selected_names, out.display()))
}

#[derive(Serialize)]
struct StatsReport<'a> {
    images: usize,
    stats: &'a ClassStats,
    class_frequency: Vec<f64>,
    part_frequency: Vec<f64>,
    temperature: f64,
    rcs_distribution: Vec<f64>,
}

fn run_stats(
    manifest_path: &Path,
    temperature: f64,
    presence_threshold: f64,
    domain: DomainArg,
    out: &Path,
) -> Result<String, Error> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let domain = match domain {
        DomainArg::Source => Domain::Source,
        DomainArg::Target => Domain::Target,
    };
    let labels = manifest
        .entries_for(domain, Split::Train)
        .filter_map(|e| e.label.as_ref())
        .collect::<Vec<_>>()
        .par_iter()
        .map(|p| load_label(&base.join(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let stats = pixel_frequency_with(&labels, NUM_CLASSES, presence_threshold)?;
    let report = StatsReport {
        images: labels.len(),
        stats: &stats,
        class_frequency: stats.class_frequency(),
        part_frequency: stats.part_frequency().values,
        temperature,
        rcs_distribution: rcs_distribution(&stats, temperature)?,
    };
    write_json(out, &report)?;
    Ok(stats.render_table())
}

fn run_train(manifest_path: &Path, trainer: &TrainConfig, out: &Path) -> Result<String, Error> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let data = TrainData::from_manifest(&manifest, &base)?;
    let outcome = train(trainer, &data)?;
    outcome.write(out)?;
    fs::write(out.join("train_config.txt"), trainer.to_kv_string()).map_err(|e| Error::io(out, e))?;
    // predictions for the held-out split, named after their images
    let test: Vec<_> = manifest.entries_for(Domain::Target, Split::Test).collect();
    let pred_dir = out.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
    test.par_iter().try_for_each(|entry| -> Result<(), Error> {
        let img = load_image(&base.join(&entry.image))?;
        let pred = predict(eval_model(&outcome.state, trainer), &img)?;
        save_label(&pred_dir.join(file_name(&entry.image)), &pred.label)
    })?;
    let last = outcome.metrics.last().expect("initial record always present");
    let report = synrealmix::metrics::IouReport {
        per_class: last.per_class_iou.clone(),
        miou: last.miou,
    };
    Ok(format!(
        "trained {} iterations; held-out IoU (%):\n{}",
        trainer.iterations,
        render_iou_table(&report)
    ))
}

fn file_name(relative: &str) -> String {
    Path::new(relative)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| relative.to_string())
}

#[derive(Serialize)]
struct ClassScore {
    class: usize,
    name: &'static str,
    iou: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    images: usize,
    classes: Vec<ClassScore>,
    miou: Option<f64>,
    confusion: Vec<u64>,
    table: String,
}

fn run_eval(pred_dir: &Path, manifest_path: &Path, out: &Path) -> Result<String, Error> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_dir(manifest_path);
    let entries: Vec<_> = manifest
        .entries_for(Domain::Target, Split::Test)
        .filter(|e| e.label.is_some())
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidManifest {
            path: manifest_path.to_path_buf(),
            reason: "no labeled target test entries to evaluate".into(),
        });
    }
    let cm = entries
        .par_iter()
        .map(|entry| -> Result<ConfusionMatrix, Error> {
            let gt = load_label(&base.join(entry.label.as_ref().expect("filtered")))?;
            let pred = load_label(&pred_dir.join(file_name(&entry.image)))?;
            let mut cm = ConfusionMatrix::new(NUM_CLASSES);
            cm.accumulate(&pred, &gt)
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", entry.image)))?;
            Ok(cm)
        })
        .try_reduce(|| ConfusionMatrix::new(NUM_CLASSES), |a, b| a.merge(&b))?;
    let iou = iou_per_class(&cm);
    let pr = precision_recall(&cm);
    let table = render_iou_table(&iou);
    let report = EvalReport {
        images: entries.len(),
        classes: (0..NUM_CLASSES)
            .map(|c| ClassScore {
                class: c,
                name: CLASS_NAMES[c],
                iou: iou.per_class[c],
                precision: pr[c].precision,
                recall: pr[c].recall,
            })
            .collect(),
        miou: iou.miou,
        confusion: cm.counts().to_vec(),
        table: table.clone(),
    };
    write_json(out, &report)?;
    Ok(table)
}
