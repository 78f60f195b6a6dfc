//! The `perturb` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::cluster::{kmeans_fit, ClusterConfig};
use crate::config::RunConfig;
use crate::data::fer::{load_dataset_dir, load_dataset_metadata, parse_fer_csv, save_dataset_dir, Dataset, Split};
use crate::data::image::{to_byte, write_pgm, HEIGHT, WIDTH};
use crate::data::mask::{generate_maskfer, Fill, MaskSpec, Region};
use crate::data::synthetic::{generate_glyphs, GlyphConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_metrics_table, render_per_class_table, sweep_clusters, sweep_csv};
use crate::nn::analysis::saliency;
use crate::nn::model::Model;
use crate::train::{clustering_grid, curves_csv, run_baseline, run_perturb_scheme, train_phase1, RunData};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "perturb", version, about = "Attention-guided masking for facial-emotion classifiers")]
pub struct Cli {
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a FER2013 CSV into a dataset directory.
    Ingest {
        #[arg(long)]
        fer_csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a masked copy of a dataset directory.
    Maskgen {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "lower-half")]
        region: Region,
        #[arg(long, default_value = "mean")]
        fill: Fill,
    },
    /// Train the attention classifier only.
    TrainAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention classifier, per-epoch clustering, masked predictor, evaluation.
    RunScheme {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The predictor trained without masking, for paired comparison.
    TrainBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Gradient saliency of one image as a PGM.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        index: usize,
        #[arg(long = "class")]
        class_index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the mean attention of a training split and write the label image.
    ClusterPreview {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 1.5)]
        lambda: f64,
        #[arg(long, default_value_t = 1.2)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scheme for several cluster counts.
    SweepClusters {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic glyph dataset (clean and occluded directories).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        occluded_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3000)]
        train: usize,
        #[arg(long, default_value_t = 600)]
        val: usize,
        #[arg(long, default_value_t = 600)]
        test: usize,
    },
}

/// Parses `argv` (including the program name), runs the command, and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if argv.len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        let _ = cmd.print_help();
        println!();
        return 1;
    }
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn init_workers(workers: usize) {
    // A second call (e.g. from tests) finds the pool already built; that is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
}

/// Reads a run config, or the config recorded in a run manifest.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(Error::file(path))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let cfg = v
            .get("config")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::config("config", "manifest has no `config` entry"))?;
        RunConfig::parse_str(cfg)
    } else {
        RunConfig::load(path)
    }
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, results: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).map_err(Error::file(out))?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let manifest = json!({
        "tool": "perturb",
        "version": VERSION,
        "command": command,
        "seed": cfg.seed,
        "created_unix": created,
        "config": cfg.to_text(),
        "results": results,
    });
    let p = out.join(MANIFEST_FILE);
    fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(Error::file(&p))?;
    cfg.save(&out.join("run.cfg"))
}

fn load_run_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let data = load_dataset_dir(&cfg.data_dir)?;
    let occluded = match &cfg.occluded_dir {
        Some(d) => Some(load_dataset_dir(d)?),
        None => None,
    };
    Ok((data, occluded))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(&Checkpoint::load(path)?)
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        init_workers(w);
    }
    match cli.command {
        Command::Ingest { fer_csv, out } => {
            let ds = parse_fer_csv(&fer_csv)?;
            save_dataset_dir(&ds, &out, &fer_csv.display().to_string(), None)?;
            print_counts(&ds);
        }
        Command::Maskgen {
            input,
            out,
            region,
            fill,
        } => {
            let ds = load_dataset_dir(&input)?;
            let spec = MaskSpec::new(region, fill);
            let masked = generate_maskfer(&ds, &spec)?;
            let source = load_dataset_metadata(&input).map_or_else(|_| input.display().to_string(), |m| m.source);
            save_dataset_dir(&masked, &out, &source, Some(format!("region={} fill={}", spec.region, spec.fill)))?;
            print_counts(&masked);
        }
        Command::TrainAttention { config, out } => {
            let cfg = configured(&config, cli.workers)?;
            let (data, _) = load_run_data(&cfg)?;
            println!("seed = {}", cfg.seed);
            let outcome = train_phase1(&data, &cfg.attention, &cfg.train)?;
            let sub = out.join("phase1");
            fs::create_dir_all(&sub).map_err(Error::file(&sub))?;
            let p = sub.join("curves.csv");
            fs::write(&p, curves_csv(&outcome.curves)).map_err(Error::file(&p))?;
            outcome.best.to_checkpoint("").save(&sub.join("model.ptck"))?;
            let report = evaluate(&outcome.best, &data.split(Split::Test))?;
            let p = out.join("metrics.json");
            fs::write(&p, report.to_json()? + "\n").map_err(Error::file(&p))?;
            print!("{}", render_metrics_table(&[("Attention classifier", &report)]));
            write_manifest(&out, "train-attention", &cfg, json!({ "test_accuracy": report.accuracy }))?;
        }
        Command::RunScheme { config, out } => {
            let cfg = configured(&config, cli.workers)?;
            let (data, occluded) = load_run_data(&cfg)?;
            println!("seed = {}", cfg.seed);
            write_manifest(&out, "run-scheme", &cfg, json!(null))?;
            let run = run_perturb_scheme(
                RunData {
                    dataset: &data,
                    occluded: occluded.as_ref(),
                },
                &cfg.attention,
                &cfg.predictor,
                &cfg.train,
                Some(&out),
            )?;
            let digests: Vec<_> = run.eval_digests.iter().map(|(w, d)| json!({ "input": w, "sha256": d })).collect();
            let p = out.join("eval_digests.json");
            fs::write(&p, serde_json::to_string_pretty(&digests)? + "\n").map_err(Error::file(&p))?;
            let r = &run.reports;
            let mut rows = vec![("Attention classifier", &r.attention_test), ("Perturb predictor", &r.predictor_test)];
            if let Some(o) = &r.predictor_occluded_test {
                rows.push(("Perturb predictor (occluded)", o));
            }
            print!("{}", render_metrics_table(&rows));
            print!("{}", render_per_class_table(&rows));
            write_manifest(
                &out,
                "run-scheme",
                &cfg,
                json!({
                    "attention_test_accuracy": r.attention_test.accuracy,
                    "predictor_test_accuracy": r.predictor_test.accuracy,
                    "predictor_occluded_test_accuracy": r.predictor_occluded_test.as_ref().map(|o| o.accuracy),
                }),
            )?;
        }
        Command::TrainBaseline { config, out } => {
            let cfg = configured(&config, cli.workers)?;
            let (data, occluded) = load_run_data(&cfg)?;
            println!("seed = {}", cfg.seed);
            write_manifest(&out, "train-baseline", &cfg, json!(null))?;
            let (_, clean, occ) = run_baseline(
                RunData {
                    dataset: &data,
                    occluded: occluded.as_ref(),
                },
                &cfg.predictor,
                &cfg.train,
                Some(&out),
            )?;
            let mut rows = vec![("Baseline predictor", &clean)];
            if let Some(o) = &occ {
                rows.push(("Baseline predictor (occluded)", o));
            }
            print!("{}", render_metrics_table(&rows));
            write_manifest(
                &out,
                "train-baseline",
                &cfg,
                json!({
                    "predictor_test_accuracy": clean.accuracy,
                    "predictor_occluded_test_accuracy": occ.as_ref().map(|o| o.accuracy),
                }),
            )?;
        }
        Command::Eval {
            model,
            data,
            split,
            report,
        } => {
            let m = load_model(&model)?;
            let ds = load_dataset_dir(&data)?;
            let r = evaluate(&m, &ds.split(split))?;
            fs::write(&report, r.to_json()? + "\n").map_err(Error::file(&report))?;
            print!("{}", render_metrics_table(&[(&model.display().to_string(), &r)]));
        }
        Command::Saliency {
            model,
            data,
            split,
            index,
            class_index,
            out,
        } => {
            let m = load_model(&model)?;
            let ds = load_dataset_dir(&data)?;
            let examples = ds.split(split);
            let e = examples.get(index).ok_or_else(|| {
                Error::Index(format!("index {index} outside the {} {split} examples", examples.len()))
            })?;
            let map = saliency(&m, &e.image, class_index)?;
            let bytes: Vec<u8> = map.iter().map(|&v| to_byte(v)).collect();
            write_pgm(&out, WIDTH, HEIGHT, &bytes)?;
        }
        Command::ClusterPreview {
            model,
            data,
            k,
            lambda,
            alpha,
            seed,
            out,
        } => {
            let m = load_model(&model)?;
            let ds = load_dataset_dir(&data)?;
            let cfg = ClusterConfig {
                k,
                lambda,
                alpha,
                seed,
                ..Default::default()
            };
            let grid = clustering_grid(&ds, &m, cfg.intensity)?;
            let fit = kmeans_fit(&grid, &cfg)?;
            fit.write_pgm(&out)?;
            println!("seed = {seed}");
            println!("inertia = {:?}", fit.inertia);
        }
        Command::SweepClusters { config, k, out } => {
            let cfg = configured(&config, cli.workers)?;
            let (data, occluded) = load_run_data(&cfg)?;
            println!("seed = {}", cfg.seed);
            let rows = sweep_clusters(
                RunData {
                    dataset: &data,
                    occluded: occluded.as_ref(),
                },
                &cfg.attention,
                &cfg.predictor,
                &cfg.train,
                &k,
            )?;
            let csv = sweep_csv(&rows);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(Error::file(parent))?;
            }
            fs::write(&out, &csv).map_err(Error::file(&out))?;
            print!("{csv}");
        }
        Command::Synth {
            out,
            occluded_out,
            seed,
            train,
            val,
            test,
        } => {
            let g = generate_glyphs(&GlyphConfig {
                train,
                val,
                test,
                seed,
                ..Default::default()
            });
            save_dataset_dir(&g.clean, &out, &format!("synthetic glyphs, seed {seed}"), None)?;
            if let Some(o) = occluded_out {
                save_dataset_dir(
                    &g.occluded,
                    &o,
                    &format!("synthetic glyphs, seed {seed}"),
                    Some("one glyph region per test image set to 0".into()),
                )?;
            }
            println!("seed = {seed}");
            print_counts(&g.clean);
        }
    }
    Ok(())
}

fn configured(path: &Path, workers_flag: Option<usize>) -> Result<RunConfig> {
    let cfg = load_run_config(path)?;
    if workers_flag.is_none() && cfg.workers > 0 {
        init_workers(cfg.workers);
    }
    Ok(cfg)
}

fn print_counts(ds: &Dataset) {
    let c = ds.class_distribution();
    for split in [Split::Train, Split::Val, Split::Test] {
        let counts: Vec<String> = c.split(split).iter().map(usize::to_string).collect();
        println!("{split}: {} [{}]", c.total(split), counts.join(" "));
    }
}
