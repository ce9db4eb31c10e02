use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pbn::error::{PbnError, Result};
use pbn::features::{extract, import_csv, read_wav, write_features, FeatureConfig};
use pbn::harness::experiment::{
    load_fold_models, prepare, run_experiment, Artifacts, ExperimentConfig,
};
use pbn::harness::folds::{folds_to_csv, make_folds, read_manifest};
use pbn::harness::sweeps::{ensemble_sweep, factor_grid, self_combination_sweep, sweep_to_csv};
use pbn::harness::{demo2d, Demo2dConfig, ScoreTable};

#[derive(Parser)]
#[command(name = "pbn", version, about = "Projected belief network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 768-point FFT, shift 256, 48 MEL bands.
    Exp1,
    /// 384-point FFT, shift 128, 40 linear bands.
    Exp2,
}

#[derive(Subcommand)]
enum Command {
    /// Log band-energy maps from WAV files, or CSV maps with a TOML manifest.
    ExtractFeatures {
        /// Input .wav files, or .csv files when --csv-manifest is given.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "exp2")]
        preset: Preset,
        /// Expected sample rate (default: that of each file).
        #[arg(long)]
        sample_rate: Option<f64>,
        /// TOML feature config; overrides --preset and --sample-rate.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest describing CSV inputs (row orientation and config).
        #[arg(long)]
        csv_manifest: Option<PathBuf>,
        /// Output directory; one .pbnf container per input.
        #[arg(long, default_value = "features")]
        out_dir: PathBuf,
    },
    /// Independent random holdouts from a dataset manifest (id,label[,path]).
    MakeFolds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        test_fraction: f64,
        #[arg(long, default_value = "folds.csv")]
        out: PathBuf,
    },
    /// Train the per-class models of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Only this fold (default: all folds).
        #[arg(long)]
        fold: Option<String>,
    },
    /// Error count and confusion matrix of a score table, or of trained
    /// models on a fold's test events.
    Eval {
        /// Score CSV (event_id,label,score_0..).
        #[arg(long, conflicts_with_all = ["config", "models"])]
        scores: Option<PathBuf>,
        #[arg(long, requires = "models")]
        config: Option<PathBuf>,
        /// Directory written by `train` or `run`.
        #[arg(long, requires = "config")]
        models: Option<PathBuf>,
        #[arg(long, default_value = "A")]
        fold: String,
        /// Output directory for score and confusion tables.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Errors as a function of the indicator confidence C.
    SweepSelfCombination {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value = "A")]
        fold: String,
        /// Comma-separated confidences (default: eval.c_grid of the config).
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Errors of `a + f b` over a grid of factors f.
    SweepEnsemble {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Comma-separated factors; overrides the log grid.
        #[arg(long, value_delimiter = ',')]
        factors: Vec<f64>,
        #[arg(long, default_value_t = 6000.0)]
        center: f64,
        #[arg(long, default_value_t = 2)]
        decades: usize,
        #[arg(long, default_value_t = 4)]
        per_decade: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two planar clouds trained with and without alignment; writes
    /// likelihood grids and an error summary.
    Demo2d {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "demo2d")]
        out_dir: PathBuf,
    },
    /// Full pipeline of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Validate and print the plan without training.
        #[arg(long)]
        dry_run: bool,
        /// Override experiment.threads (1 = deterministic single thread).
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PbnError::io(path, e))?;
    toml::from_str(&text).map_err(|e| PbnError::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PbnError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| PbnError::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn extract_features(
    inputs: &[PathBuf],
    preset: Preset,
    sample_rate: Option<f64>,
    config: Option<&Path>,
    csv_manifest: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let fixed = config.map(read_toml::<FeatureConfig>).transpose()?;
    let for_rate = |rate: f64| -> FeatureConfig {
        match (fixed, preset) {
            (Some(c), _) => c,
            (None, Preset::Exp1) => FeatureConfig::exp1(rate),
            (None, Preset::Exp2) => FeatureConfig::exp2(rate),
        }
    };
    fs::create_dir_all(out_dir).map_err(|e| PbnError::io(out_dir, e))?;
    for input in inputs {
        let stem = input
            .file_stem()
            .map_or_else(|| "features".into(), |s| s.to_string_lossy().into_owned());
        let map = match csv_manifest {
            Some(m) => import_csv(input, m)?,
            None => {
                let (wave, rate) = read_wav(input)?;
                let cfg = for_rate(rate);
                let expected = sample_rate.unwrap_or(cfg.sample_rate);
                if rate != expected || rate != cfg.sample_rate {
                    return Err(PbnError::Config(format!(
                        "{} is sampled at {rate} Hz; expected {expected} Hz",
                        input.display()
                    )));
                }
                extract(&cfg, &wave, &stem)?
            }
        };
        let out = out_dir.join(format!("{stem}.pbnf"));
        write_features(&out, std::slice::from_ref(&map))?;
        println!(
            "{} -> {} ({}x{})",
            input.display(),
            out.display(),
            map.frames(),
            map.bands()
        );
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::ExtractFeatures {
            inputs,
            preset,
            sample_rate,
            config,
            csv_manifest,
            out_dir,
        } => extract_features(
            &inputs,
            preset,
            sample_rate,
            config.as_deref(),
            csv_manifest.as_deref(),
            &out_dir,
        )
        .map_err(|e| e.at_stage("extract-features")),
        Command::MakeFolds {
            manifest,
            folds,
            seed,
            test_fraction,
            out,
        } => {
            let entries = read_manifest(&manifest)?;
            let labels: Vec<usize> = entries.iter().map(|e| e.label).collect();
            let specs = make_folds(&labels, folds, seed, test_fraction)?;
            write_text(&out, &folds_to_csv(&specs, &entries, None))?;
            for f in &specs {
                let test: usize = f.test.iter().map(|t| t.len()).sum();
                println!(
                    "fold {}: {} train / {test} test",
                    f.name,
                    labels.len() - test
                );
            }
            Ok(())
        }
        .map_err(|e: PbnError| e.at_stage("make-folds")),
        Command::Train {
            config,
            out_dir,
            fold,
        } => {
            let cfg = ExperimentConfig::load(&config).map_err(|e| e.at_stage("config"))?;
            let prep = prepare(&cfg)?;
            let mut art = Artifacts::new(&out_dir, &prep.hash);
            let which: Vec<usize> = match fold {
                Some(name) => vec![prep.fold_index(&name).map_err(|e| e.at_stage("folds"))?],
                None => (0..prep.folds.len()).collect(),
            };
            for fi in which {
                let models = prep.train_fold(fi)?;
                art.save_models(&prep.folds[fi].name, &models, &cfg.data.class_names)
                    .map_err(|e| e.at_stage("write"))?;
                println!(
                    "fold {}: trained {} class models",
                    prep.folds[fi].name,
                    models.len()
                );
            }
            Ok(())
        }
        Command::Eval {
            scores,
            config,
            models,
            fold,
            out_dir,
        } => {
            if let Some(path) = scores {
                let t = ScoreTable::read_csv(&path, "scores").map_err(|e| e.at_stage("eval"))?;
                let ev = t.evaluate();
                println!("errors: {} of {}", ev.errors, ev.total);
                return emit(
                    out_dir.map(|d| d.join("confusion.csv")).as_deref(),
                    &ev.to_csv(None),
                );
            }
            let (Some(config), Some(models)) = (config, models) else {
                return Err(PbnError::Config(
                    "eval needs --scores or --config with --models".into(),
                )
                .at_stage("eval"));
            };
            let cfg = ExperimentConfig::load(&config).map_err(|e| e.at_stage("config"))?;
            let prep = prepare(&cfg)?;
            let fi = prep.fold_index(&fold).map_err(|e| e.at_stage("folds"))?;
            let bundles = load_fold_models(&models, &fold, prep.num_classes())
                .map_err(|e| e.at_stage("load"))?;
            let s = prep
                .score_fold(fi, &bundles)
                .map_err(|e| e.at_stage("eval"))?;
            let out = out_dir.unwrap_or(models);
            let mut art = Artifacts::new(&out, &prep.hash);
            let e = art
                .table(&fold, "pbn-da", &s.pbn_da)
                .map_err(|e| e.at_stage("write"))?;
            println!(
                "fold {fold}: PBN-DA errors {e} of {}",
                s.pbn_da.num_events()
            );
            if let Some(t) = &s.pbn_da_hmm {
                let e = art
                    .table(&fold, "pbn-da-hmm", t)
                    .map_err(|e| e.at_stage("write"))?;
                println!("fold {fold}: PBN-DA-HMM errors {e} of {}", t.num_events());
            }
            Ok(())
        }
        Command::SweepSelfCombination {
            config,
            models,
            fold,
            grid,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config).map_err(|e| e.at_stage("config"))?;
            let prep = prepare(&cfg)?;
            let fi = prep.fold_index(&fold).map_err(|e| e.at_stage("folds"))?;
            let bundles = load_fold_models(&models, &fold, prep.num_classes())
                .map_err(|e| e.at_stage("load"))?;
            let s = prep
                .score_fold(fi, &bundles)
                .map_err(|e| e.at_stage("eval"))?;
            let grid = if grid.is_empty() {
                cfg.eval.c_grid.clone()
            } else {
                grid
            };
            let points = self_combination_sweep(&s.cache, &grid)
                .map_err(|e| e.at_stage("sweep-self-combination"))?;
            emit(
                out.as_deref(),
                &sweep_to_csv(&points, "confidence", Some(&prep.hash)),
            )
        }
        Command::SweepEnsemble {
            a,
            b,
            factors,
            center,
            decades,
            per_decade,
            out,
        } => {
            let ta = ScoreTable::read_csv(&a, "a")?;
            let tb = ScoreTable::read_csv(&b, "b")?;
            let grid = if factors.is_empty() {
                factor_grid(center, decades, per_decade)
            } else {
                factors
            };
            let points = ensemble_sweep(&ta, &tb, &grid)?;
            emit(out.as_deref(), &sweep_to_csv(&points, "factor", None))
        }
        .map_err(|e: PbnError| e.at_stage("sweep-ensemble")),
        Command::Demo2d {
            config,
            seed,
            out_dir,
        } => {
            let mut cfg = match config {
                Some(p) => read_toml::<Demo2dConfig>(&p).map_err(|e| e.at_stage("config"))?,
                None => Demo2dConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = demo2d(&cfg, Some(&out_dir))?;
            print!("{}", r.summary_csv());
            Ok(())
        }
        Command::Run {
            config,
            out_dir,
            dry_run,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| e.at_stage("config"))?;
            if let Some(t) = threads {
                cfg.experiment.threads = t;
            }
            let summary = run_experiment(&cfg, &out_dir, dry_run)?;
            print!("{}", summary.plan);
            if !dry_run {
                print!("{}", summary.to_csv());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
