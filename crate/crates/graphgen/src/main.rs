//! Command-line front end: sample, train, generate, evaluate.
//!
//! Exit codes: 0 success (including partial-result warnings), 1 usage
//! error, 2 data error, 3 training divergence.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use graphgen::config::RunConfig;
use graphgen::dataset::{self, DatasetManifest};
use graphgen::geneval::{self, GenerationSettings};
use graphgen::model::{load_checkpoint, save_checkpoint, Checkpoint, Sampler};
use graphgen::training::{self, TrainError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "graphgen",
    version,
    about = "Conditional graph generation with tunable features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample induced subgraphs from an edge-list corpus into a training manifest.
    Sample(SampleArgs),
    /// Run the alternate training schedule on a manifest.
    Train(TrainArgs),
    /// Generate graphs from a checkpoint at given condition values.
    Generate(GenerateArgs),
    /// Evaluate directories of edge-list graphs against target values.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Edge-list corpus file ("u v" lines, '#' comments).
    #[arg(long)]
    corpus: PathBuf,
    /// Output manifest path (a .summary.json sidecar is written next to it).
    #[arg(long)]
    out: PathBuf,
    /// Run configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size_min: Option<usize>,
    #[arg(long)]
    size_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest produced by `sample`.
    #[arg(long)]
    manifest: PathBuf,
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, trace and the echoed config.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a phase-boundary checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory (one subdirectory per condition value).
    #[arg(long)]
    out: PathBuf,
    /// Condition values in raw units; defaults to the config's list.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    conditions: Vec<f64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Deterministic argmax decoding instead of sampling.
    #[arg(long, conflicts_with = "temperature")]
    argmax: bool,
    /// Softmax temperature for categorical sampling.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of .edges files; repeatable.
    #[arg(long = "dir", required = true)]
    dirs: Vec<PathBuf>,
    /// Target value per directory (one value broadcasts).
    #[arg(long = "target", required = true)]
    targets: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated feature names (default: aspl).
    #[arg(long, value_delimiter = ',')]
    features: Vec<graphgen::FeatureName>,
}

enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

/// Everything that is not a flag-level problem is a data error.
macro_rules! data_err {
    ($e:expr) => {
        $e.map_err(|err| CliError::Data(err.to_string()))
    };
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Sample(args) => cmd_sample(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => data_err!(RunConfig::load(p)),
        None => Ok(RunConfig::default()),
    }
}

/// Echoes the effective config into the output directory: a verbatim copy
/// of the input file when one was given, plus the fully resolved form.
fn echo_config(
    out_dir: &Path,
    source: &Option<PathBuf>,
    config: &RunConfig,
) -> Result<(), CliError> {
    if let Some(src) = source {
        let bytes = data_err!(std::fs::read(src))?;
        data_err!(std::fs::write(out_dir.join("config.toml"), bytes))?;
    }
    data_err!(std::fs::write(
        out_dir.join("effective.toml"),
        config.to_toml_string()
    ))
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let count = args.count.unwrap_or(config.dataset.count);
    let size_min = args.size_min.unwrap_or(config.dataset.size_min);
    let size_max = args.size_max.unwrap_or(config.dataset.size_max);
    let seed = args.seed.unwrap_or(config.seed);
    if count == 0 {
        return Err(CliError::Usage("--count must be >= 1 (empty datasets are refused)".into()));
    }
    if size_min < 2 || size_min > size_max {
        return Err(CliError::Usage(format!(
            "invalid size bounds [{size_min}, {size_max}]"
        )));
    }
    let (graph, stats) = data_err!(dataset::load_edge_list(&args.corpus))?;
    eprintln!(
        "corpus: {} nodes, {} edges ({} self-loops, {} duplicates dropped)",
        stats.nodes, stats.edges, stats.self_loops_dropped, stats.duplicates_dropped
    );
    let subgraphs =
        data_err!(dataset::sample_induced_subgraphs(&graph, count, size_min, size_max, seed))?;
    let (manifest, report) = data_err!(dataset::build_manifest(&subgraphs, &config.feature_order))?;
    data_err!(manifest.save(&args.out))?;
    println!(
        "manifest: {} records (skipped {} not encodable, {} metric), max_nodes {}, max_sequence_length {}",
        report.kept,
        report.skipped_not_encodable,
        report.skipped_metric,
        manifest.max_nodes,
        manifest.max_sequence_length
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let manifest = data_err!(DatasetManifest::load(&args.manifest))?;
    data_err!(std::fs::create_dir_all(&args.out))?;
    echo_config(&args.out, &args.config, &config)?;

    let mconfig = config.model_config(manifest.max_nodes, manifest.max_sequence_length);
    let tconfig = config.train_config();

    let resume = match &args.resume {
        Some(path) => {
            let ckpt = data_err!(load_checkpoint(path))?;
            if ckpt.config != mconfig {
                return Err(CliError::Data(
                    "checkpoint model config does not match this run's config/manifest".into(),
                ));
            }
            Some((ckpt.params, ckpt.completed_phases))
        }
        None => None,
    };

    let out_dir = args.out.clone();
    let mconfig_cb = mconfig.clone();
    let result = training::train_alternate_with(
        &manifest,
        &mconfig,
        &tconfig,
        resume,
        move |completed, params, stats| {
            let ckpt = Checkpoint {
                config: mconfig_cb.clone(),
                stats: stats.clone(),
                completed_phases: completed,
                params: params.clone(),
            };
            let path = out_dir.join(format!("checkpoint_phase_{completed}.ggc"));
            if let Err(e) = save_checkpoint(&path, &ckpt) {
                eprintln!("warning: failed to write {}: {e}", path.display());
            }
        },
    );

    let write_trace = |trace: &training::TrainTrace| -> Result<(), CliError> {
        let mut buf = Vec::new();
        data_err!(trace.write_csv(&mut buf))?;
        data_err!(std::fs::write(args.out.join("trace.csv"), buf))?;
        data_err!(std::fs::write(
            args.out.join("boundaries.json"),
            serde_json::to_string_pretty(&trace.boundaries).expect("boundaries serialize"),
        ))
    };

    match result {
        Ok(out) => {
            write_trace(&out.trace)?;
            let ckpt = Checkpoint {
                config: mconfig,
                stats: out.stats.clone(),
                completed_phases: 2 * tconfig.alternate_iterations as u32,
                params: out.params,
            };
            data_err!(save_checkpoint(&args.out.join("checkpoint_final.ggc"), &ckpt))?;
            println!(
                "trained {} phases over {} records; trace: {}",
                2 * tconfig.alternate_iterations,
                manifest.records.len(),
                args.out.join("trace.csv").display()
            );
            Ok(())
        }
        Err(TrainError::Divergence { iteration, phase, epoch, trace }) => {
            write_trace(&trace)?;
            Err(CliError::Divergence(format!(
                "training diverged at iteration {iteration}, {phase} phase, epoch {epoch}; trace written"
            )))
        }
        Err(e) => Err(CliError::Data(e.to_string())),
    }
}

fn condition_dir_name(value: f64) -> String {
    format!("c{value}").replace('.', "_")
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let config = load_config(&args.config)?;
    let ckpt = data_err!(load_checkpoint(&args.checkpoint))?;
    let conditions = if args.conditions.is_empty() {
        config.generation.conditions.clone()
    } else {
        args.conditions.clone()
    };
    if conditions.is_empty() {
        return Err(CliError::Usage("no condition values given".into()));
    }
    let count = args.count.unwrap_or(config.generation.count);
    if count == 0 {
        return Err(CliError::Usage("--count must be >= 1".into()));
    }
    let seed = args.seed.unwrap_or(config.seed);
    let sampler = if args.argmax {
        Sampler::Argmax
    } else {
        let t = args.temperature.unwrap_or(config.generation.temperature);
        if t <= 0.0 {
            return Err(CliError::Usage("--temperature must be positive".into()));
        }
        Sampler::Temperature(t)
    };

    data_err!(std::fs::create_dir_all(&args.out))?;
    let mut any_partial = false;
    for (i, &value) in conditions.iter().enumerate() {
        let settings = GenerationSettings {
            count,
            seed: seed.wrapping_add(i as u64),
            sampler,
            retry_factor: config.generation.retry_factor,
        };
        let (graphs, report) = data_err!(geneval::generate(
            &ckpt.params,
            &ckpt.config,
            &ckpt.stats,
            &[value],
            &settings
        ))?;
        let dir = args.out.join(condition_dir_name(value));
        data_err!(std::fs::create_dir_all(&dir))?;
        for (j, g) in graphs.iter().enumerate() {
            data_err!(geneval::write_edge_list(&dir.join(format!("graph_{j:04}.edges")), g))?;
        }
        data_err!(std::fs::write(dir.join("report.json"), report.summary_json()))?;
        data_err!(std::fs::write(
            dir.join("features.csv"),
            report.features_csv(&ckpt.stats.order)
        ))?;
        data_err!(std::fs::write(dir.join("kde.csv"), report.kde_csv()))?;
        if report.partial {
            any_partial = true;
            eprintln!(
                "warning: condition {value}: produced {}/{} graphs before the retry budget ran out",
                report.produced, report.requested
            );
        }
        println!(
            "condition {value}: {} graphs, validity rate {:.3}",
            report.produced, report.validity_rate
        );
    }
    if any_partial {
        eprintln!("warning: some conditions returned partial results (exit 0)");
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let targets: Vec<f64> = if args.targets.len() == 1 {
        vec![args.targets[0]; args.dirs.len()]
    } else if args.targets.len() == args.dirs.len() {
        args.targets.clone()
    } else {
        return Err(CliError::Usage(format!(
            "{} targets for {} directories; give one target or one per directory",
            args.targets.len(),
            args.dirs.len()
        )));
    };
    let features = if args.features.is_empty() {
        vec![graphgen::FeatureName::Aspl]
    } else {
        args.features.clone()
    };

    data_err!(std::fs::create_dir_all(&args.out))?;
    let mut comparison = String::from("dir,target,graphs,mean,std,mae\n");
    for (dir, &target) in args.dirs.iter().zip(&targets) {
        let mut paths: Vec<PathBuf> = data_err!(std::fs::read_dir(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "edges"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no .edges files found",
                dir.display()
            )));
        }
        let graphs: Vec<graphgen::Graph> = paths
            .iter()
            .map(|p| dataset::load_edge_list(p).map(|(g, _)| g))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Data(e.to_string()))?;
        let eval = data_err!(geneval::evaluate(&graphs, &features, target))?;

        let stem = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dir".to_string());
        let values: Vec<f64> = eval
            .per_graph
            .iter()
            .filter_map(|fv| fv.get(features[0]))
            .collect();
        let grid = geneval::kde(&values, geneval::GridSpec::Auto { points: 256 });
        let mut kde_csv = String::from("x,density\n");
        for (x, d) in &grid {
            kde_csv.push_str(&format!("{x},{d}\n"));
        }
        data_err!(std::fs::write(args.out.join(format!("{stem}_kde.csv")), kde_csv))?;
        let summary = serde_json::json!({
            "dir": dir.display().to_string(),
            "target": target,
            "graphs": graphs.len(),
            "metric_skipped": eval.metric_skipped,
            "features": eval.features,
        });
        data_err!(std::fs::write(
            args.out.join(format!("{stem}_summary.json")),
            serde_json::to_string_pretty(&summary).expect("summary serializes"),
        ))?;
        let head = &eval.features[0];
        comparison.push_str(&format!(
            "{},{},{},{},{},{}\n",
            stem,
            target,
            graphs.len(),
            head.mean,
            head.std,
            head.mae.unwrap_or(f64::NAN)
        ));
        println!(
            "{}: {} graphs, {} mean {:.4}, mae {:.4}",
            stem,
            graphs.len(),
            features[0],
            head.mean,
            head.mae.unwrap_or(f64::NAN)
        );
    }
    data_err!(std::fs::write(args.out.join("comparison.csv"), comparison))?;
    Ok(())
}
