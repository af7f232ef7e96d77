//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mdadet::adv::Discriminator;
use mdadet::data::coco::write_png;
use mdadet::data::toybench::{write_benchmark, ToyBenchConfig};
use mdadet::data::{DomainDataset, DomainRole};
use mdadet::det::checkpoint::{load_checkpoint, restore_params};
use mdadet::det::DetectorModel;
use mdadet::error::{Error, Result};
use mdadet::eval::evaluate;
use mdadet::exp::{
    build_report, render_text, resolve_data, run_ablation_suite, run_pipeline, train_baseline,
    write_report, BaselineKind, ExperimentConfig, RunManifest,
};
use mdadet::nn::ParamStore;
use mdadet::pixeladapt::{save_translator, translate_dataset, Translator};
use mdadet::rng::{stream, StreamId};

#[derive(Parser)]
#[command(
    name = "mdadet",
    version,
    about = "Multi-target domain-adaptive detection on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain benchmark on disk.
    GenerateBench {
        /// Output root; one subdirectory per domain.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Benchmark config TOML (defaults used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fit the reference translator and write the translated source train
    /// split as a flat PNG directory (the same layout `stage1 = "external"`
    /// imports).
    Translate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit one translator per target instead of pooling all targets.
        #[arg(long)]
        per_target: bool,
    },
    /// Run the configured pipeline stages, or a no-adaptation baseline.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train a plain detector instead of the adaptation pipeline.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Target domain id for the oracle baseline.
        #[arg(long)]
        oracle_target: Option<usize>,
        /// Acknowledge that the oracle baseline trains on target labels.
        #[arg(long)]
        unlock_target_labels: bool,
    },
    /// Run self-training rounds from an existing stage-2 checkpoint.
    SelfTrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint stem (without .json/.bin); defaults to the config's
        /// `stage2_checkpoint`, then to the manifest already in the out dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every domain of the configured benchmark.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint stem (without .json/.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the config's evaluation IoU threshold.
        #[arg(long)]
        iou: Option<f64>,
        /// Write the full report JSON here (stdout shows the summary).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation suite and write its comparison report.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// placement | threshold | discriminator | targets
        #[arg(long)]
        suite: String,
    },
    /// Combine run manifests into one comparison report.
    Report {
        /// manifest.json paths, one per run.
        #[arg(long, num_args = 1.., required = true)]
        manifests: Vec<PathBuf>,
        /// Directory for report.txt / report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    SourceOnly,
    Oracle,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenerateBench { out, seed, config } => cmd_generate_bench(&out, seed, config),
        Cmd::Translate { config, out, per_target } => cmd_translate(&config, &out, per_target),
        Cmd::Train { config, baseline, oracle_target, unlock_target_labels } => {
            cmd_train(&config, baseline, oracle_target, unlock_target_labels)
        }
        Cmd::SelfTrain { config, checkpoint } => cmd_self_train(&config, checkpoint),
        Cmd::Evaluate { config, checkpoint, iou, out } => {
            cmd_evaluate(&config, &checkpoint, iou, out)
        }
        Cmd::Ablate { config, suite } => cmd_ablate(&config, &suite),
        Cmd::Report { manifests, out } => cmd_report(&manifests, out),
    }
}

fn cmd_generate_bench(out: &Path, seed: u64, config: Option<PathBuf>) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(&p)
                .map_err(|e| Error::Load(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<ToyBenchConfig>(&text)
                .map_err(|e| Error::Config(format!("bad benchmark config: {e}")))?
        }
        None => ToyBenchConfig::default(),
    };
    write_benchmark(out, &cfg, seed)?;
    println!(
        "wrote benchmark to {} ({} domains, {}+{} images each)",
        out.display(),
        1 + cfg.targets.len(),
        cfg.train_per_domain,
        cfg.test_per_domain
    );
    Ok(())
}

fn cmd_translate(config: &Path, out: &Path, per_target: bool) -> Result<()> {
    let cfg = ExperimentConfig::from_toml_path(config)?;
    let data = resolve_data(&cfg)?;
    let source = data
        .domains
        .iter()
        .find(|d| d.spec.role == DomainRole::Source)
        .expect("validated domain set has a source");
    let targets: Vec<&DomainDataset> =
        data.domains.iter().filter(|d| d.spec.role == DomainRole::Target).collect();

    let mut jobs: Vec<(PathBuf, Translator)> = Vec::new();
    if per_target {
        for t in &targets {
            jobs.push((out.join(&t.spec.name), Translator::fit_color_match(source, &[t])?));
        }
    } else {
        jobs.push((out.to_path_buf(), Translator::fit_color_match(source, &targets)?));
    }

    for (dir, tr) in &jobs {
        fs::create_dir_all(dir)?;
        save_translator(&dir.join("translator.json"), tr)?;
        let translated = translate_dataset(source, tr, cfg.exec_mode);
        for s in &translated.train {
            write_png(&dir.join(format!("{:06}.png", s.id)), &s.pixels)?;
        }
        println!("wrote {} translated images to {}", translated.train.len(), dir.display());
    }
    Ok(())
}

fn print_summary(manifest: &RunManifest) {
    let doc = build_report(std::slice::from_ref(manifest));
    print!("{}", render_text(&doc));
    println!("manifest: {}", RunManifest::path_in(&manifest.config.resolved_out_dir()).display());
}

fn cmd_train(
    config: &Path,
    baseline: Option<BaselineArg>,
    oracle_target: Option<usize>,
    unlock_target_labels: bool,
) -> Result<()> {
    let cfg = ExperimentConfig::from_toml_path(config)?;
    let manifest = match baseline {
        None => run_pipeline(&cfg)?,
        Some(BaselineArg::SourceOnly) => train_baseline(&cfg, BaselineKind::SourceOnly)?,
        Some(BaselineArg::Oracle) => {
            let target = oracle_target.ok_or_else(|| {
                Error::Config("--baseline oracle requires --oracle-target <domain id>".into())
            })?;
            train_baseline(&cfg, BaselineKind::Oracle { target, unlock_target_labels })?
        }
    };
    print_summary(&manifest);
    Ok(())
}

fn cmd_self_train(config: &Path, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_toml_path(config)?;
    cfg.stages.stage2 = false;
    cfg.stages.stage3 = true;
    if let Some(ck) = checkpoint {
        cfg.stage2_checkpoint = Some(ck);
    }
    if cfg.stage2_checkpoint.is_none() {
        // Continue in place from an earlier `train` run in the same out dir.
        let mpath = RunManifest::path_in(&cfg.resolved_out_dir());
        if mpath.is_file() {
            let m = RunManifest::load(&mpath)?;
            cfg.stage2_checkpoint = m.checkpoints.get("stage2").cloned();
        }
    }
    if cfg.stage2_checkpoint.is_none() {
        return Err(Error::Config(
            "no stage-2 checkpoint: pass --checkpoint, set stage2_checkpoint in the config, \
             or run `train` into the same out dir first"
                .into(),
        ));
    }
    let manifest = run_pipeline(&cfg)?;
    print_summary(&manifest);
    Ok(())
}

fn cmd_evaluate(
    config: &Path,
    checkpoint: &Path,
    iou: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::from_toml_path(config)?;
    let iou = iou.unwrap_or(cfg.eval_iou);
    if !(iou > 0.0 && iou <= 1.0) {
        return Err(Error::Validation(format!("--iou must be in (0, 1], got {iou}")));
    }
    let data = resolve_data(&cfg)?;
    let (meta, params, _) = load_checkpoint(checkpoint)?;

    let mut ps = ParamStore::new();
    let mut rng = stream(cfg.seed, StreamId::ModelInit);
    let model = DetectorModel::build(&cfg.detector, &mut ps, &mut rng)?;
    if meta.params.iter().any(|p| p.name.starts_with("adv.")) {
        // Stage-2/3 checkpoints carry discriminator tensors too.
        Discriminator::build_all(&cfg.discriminator, &cfg.detector, &mut ps, &mut rng);
    }
    restore_params(&mut ps, &meta, &params)?;

    let report = evaluate(&model, &ps, &data.domains, &data.class_names, iou, cfg.exec_mode)?;
    for (name, d) in &report.domains {
        println!("{name}: mAP {:.4} ({} images, {} gts)", d.map, d.num_images, d.num_gts);
    }
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&p, report.to_json()?)?;
            println!("report: {}", p.display());
        }
        None => println!("{}", report.to_json()?),
    }
    Ok(())
}

fn cmd_ablate(config: &Path, suite: &str) -> Result<()> {
    let cfg = ExperimentConfig::from_toml_path(config)?;
    let (_, doc) = run_ablation_suite(&cfg, suite)?;
    print!("{}", render_text(&doc));
    println!("reports under {}", cfg.resolved_out_dir().join(suite).display());
    Ok(())
}

fn cmd_report(manifests: &[PathBuf], out: Option<PathBuf>) -> Result<()> {
    let loaded: Vec<RunManifest> =
        manifests.iter().map(|p| RunManifest::load(p)).collect::<Result<_>>()?;
    let doc = build_report(&loaded);
    print!("{}", render_text(&doc));
    if let Some(dir) = out {
        let (txt, json) = write_report(&dir, &doc)?;
        println!("wrote {} and {}", txt.display(), json.display());
    }
    Ok(())
}
