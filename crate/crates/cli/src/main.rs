//! Command-line driver: data generation, training, reconstruction,
//! evaluation, benchmarking and gradient checks from one config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use treelabel::eval::{bench_reconstruction, evaluate_dataset, evaluate_volumes, graph_metrics};
use treelabel::implicit::{reconstruct_dense, repeated_inference_reconstruct, write_csv, write_ply, Scene};
use treelabel::nn::GradCheckReport;
use treelabel::skeleton::{recover_labels, skeletonize};
use treelabel::synth::{generate_dataset, generate_tree, tree_seed, DatasetManifest, TreeSpec};
use treelabel::train::{gradcheck_ipgn, gradcheck_layers, train_all, LayerCheck, TrainData};
use treelabel::volume::{load_volume, save_volume};
use treelabel::{Error, Ipgn, LabelVolume, Result, RunConfig};

#[derive(Debug, Parser, Serialize)]
#[command(name = "treelabel", version, about = "Label the branches of 3D tree structures")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
struct Global {
    /// JSON run config; only the keys it sets override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset the config file is laid over.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Global seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). `--threads 1` is fully deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Generate a synthetic dataset (volumes, graphs, manifest).
    Synth {
        /// Number of trees [default: dataset.trees, or bench.volumes with --bench].
        #[arg(long)]
        n: Option<usize>,
        /// Use the large benchmark tree generator.
        #[arg(long)]
        bench: bool,
    },
    /// Extract the labeled skeleton graph of a volume.
    Skeletonize {
        #[arg(long)]
        volume: PathBuf,
    },
    /// Pretrain both encoders, then train the full model.
    Train {
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Label every foreground voxel of a volume.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_enum, default_value = "implicit")]
        method: Method,
        /// Also write a coloured point cloud.
        #[arg(long)]
        ply: Option<PathBuf>,
        /// Also write `x,y,z,true,pred` rows against the input labels.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a prediction against ground truth, or a checkpoint on a dataset split.
    Eval {
        #[arg(long, requires = "truth", conflicts_with_all = ["checkpoint", "data"])]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Time implicit against repeated-inference reconstruction.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled volumes; generated from the bench config when omitted.
        #[arg(long, num_args = 1..)]
        volumes: Vec<PathBuf>,
        /// Timed runs per method [default: bench.runs].
        #[arg(long)]
        runs: Option<usize>,
        /// Points per backbone pass [default: 6000].
        #[arg(long, default_value_t = 6000)]
        sample_points: usize,
    },
    /// Finite-difference check of the full training loss in f64.
    Gradcheck {
        /// Points per backbone pass.
        #[arg(long, default_value_t = 256)]
        points: usize,
        /// Implicit query points.
        #[arg(long, default_value_t = 64)]
        queries: usize,
        /// Entries checked per parameter tensor.
        #[arg(long, default_value_t = 4)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Implicit,
    Repeated,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitName {
    Train,
    Val,
    Test,
}

/// Report envelope: what was run, then the result.
#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    invocation: &'a Cli,
    seed: u64,
    report: R,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TREELABEL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = RunConfig::preset(&g.preset)?;
    if let Some(path) = &g.config {
        cfg = RunConfig::load(path, &cfg)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolve()?;
    log::info!("seed {}, {} threads", cfg.seed, rayon::current_num_threads());
    match &cli.command {
        Command::Synth { n, bench } => cmd_synth(cli, &cfg, *n, *bench),
        Command::Skeletonize { volume } => cmd_skeletonize(cli, volume),
        Command::Train { data } => cmd_train(cli, &cfg, data),
        Command::Reconstruct { checkpoint, volume, method, ply, csv } => {
            cmd_reconstruct(cli, &cfg, checkpoint, volume, *method, ply.as_deref(), csv.as_deref())
        }
        Command::Eval { pred, truth, checkpoint, data, split } => match (pred, truth, checkpoint, data) {
            (Some(p), Some(t), None, None) => cmd_eval_volumes(cli, &cfg, p, t),
            (None, None, Some(c), Some(d)) => cmd_eval_dataset(cli, &cfg, c, d, *split),
            _ => Err(Error::Config("eval needs --pred and --truth, or --checkpoint and --data".into())),
        },
        Command::Bench { checkpoint, volumes, runs, sample_points } => {
            cmd_bench(cli, &cfg, checkpoint, volumes, runs.unwrap_or(cfg.bench.runs), *sample_points)
        }
        Command::Gradcheck { points, queries, per_param, tolerance } => {
            cmd_gradcheck(cli, &cfg, *points, *queries, *per_param, *tolerance)
        }
    }
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|e| Error::Io { path: path.into(), source: e })
}

fn emit<R: Serialize>(cli: &Cli, cfg: &RunConfig, path: Option<&Path>, report: R) -> Result<()> {
    let env = Envelope { invocation: cli, seed: cfg.seed, report };
    match path {
        Some(p) => write_json(p, &env),
        None => {
            println!("{}", serde_json::to_string_pretty(&env).expect("reports serialize"));
            Ok(())
        }
    }
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig, n: Option<usize>, bench: bool) -> Result<()> {
    let (spec, default_n) = if bench { (&cfg.bench.tree, cfg.bench.volumes) } else { (&cfg.tree, cfg.dataset.trees) };
    let out = out_path(cli, "data");
    let manifest = generate_dataset(n.unwrap_or(default_n), cfg.seed, spec, &out)?;
    eprintln!("wrote {} trees to {}", manifest.trees.len(), out.display());
    Ok(())
}

fn cmd_skeletonize(cli: &Cli, volume: &Path) -> Result<()> {
    let vol = load_volume(volume)?;
    let graph = skeletonize(&vol)?;
    let out = out_path(cli, "graph.json");
    graph.save(&out)?;
    eprintln!("{} nodes, {} edges -> {}", graph.num_nodes(), graph.num_edges(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    phases: Vec<(String, f64)>,
    total_seconds: f64,
}

fn cmd_train(cli: &Cli, cfg: &RunConfig, data: &Path) -> Result<()> {
    let out = out_path(cli, "run");
    let scenes = TrainData::<f32>::load(data)?;
    let (_, _, summary) = train_all(&cfg.model, &cfg.train, &scenes, Some(&out))?;
    write_json(&out.join("config.json"), cfg)?;
    let timing = Timing {
        phases: summary.phases.iter().map(|p| (p.name.clone(), p.seconds)).collect(),
        total_seconds: summary.seconds,
    };
    write_json(&out.join("timing.json"), &timing)?;
    emit(cli, cfg, Some(&out.join("train_report.json")), &summary)?;
    for p in &summary.phases {
        eprintln!("{:<6} best epoch {:>3}  val {:?}  {:.1}s", p.name, p.best_epoch, p.best_val, p.seconds);
    }
    Ok(())
}

fn cmd_reconstruct(
    cli: &Cli,
    cfg: &RunConfig,
    checkpoint: &Path,
    volume: &Path,
    method: Method,
    ply: Option<&Path>,
    csv: Option<&Path>,
) -> Result<()> {
    let (model, store) = Ipgn::load::<f32>(checkpoint)?;
    let vol = load_volume(volume)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rec = match method {
        Method::Implicit => reconstruct_dense(&vol, &model, &store, &mut rng)?,
        Method::Repeated => repeated_inference_reconstruct(&vol, &model, &store, &mut rng)?,
    };
    let out = out_path(cli, "prediction.json");
    save_volume(&rec.volume, &out)?;
    if let Some(p) = ply {
        write_ply(&rec.volume, p)?;
    }
    if let Some(p) = csv {
        write_csv(&rec.volume, &vol, p)?;
    }
    eprintln!("{} voxels, {} backbone passes -> {}", rec.volume.foreground_count(), rec.backbone_passes, out.display());
    Ok(())
}

fn cmd_eval_volumes(cli: &Cli, cfg: &RunConfig, pred: &Path, truth: &Path) -> Result<()> {
    let (p, t) = (load_volume(pred)?, load_volume(truth)?);
    let mut report = evaluate_volumes(&p, &t, &cfg.eval)?;
    // Graph scores: the truth's skeleton labeled once from each volume.
    let truth_graph = skeletonize(&t)?;
    let pred_graph = recover_labels(truth_graph.clone(), &p)?;
    report.graph = Some(graph_metrics(&pred_graph, &truth_graph, &cfg.eval.micro_classes(t.num_classes()))?);
    print!("{}", report.to_table());
    emit(cli, cfg, cli.global.out.as_deref(), &report)
}

fn split_ids(manifest: &DatasetManifest, split: SplitName) -> &[usize] {
    match split {
        SplitName::Train => &manifest.split.train,
        SplitName::Val => &manifest.split.val,
        SplitName::Test => &manifest.split.test,
    }
}

fn load_named(dir: &Path, manifest: &DatasetManifest, ids: &[usize]) -> Result<Vec<(String, LabelVolume)>> {
    ids.iter()
        .map(|&id| {
            let entry = manifest
                .trees
                .iter()
                .find(|t| t.id == id)
                .ok_or_else(|| Error::Invalid(format!("tree {id} missing from manifest")))?;
            Ok((entry.volume.trim_end_matches(".json").to_string(), load_volume(dir.join(&entry.volume))?))
        })
        .collect()
}

fn cmd_eval_dataset(cli: &Cli, cfg: &RunConfig, checkpoint: &Path, data: &Path, split: SplitName) -> Result<()> {
    let (model, store) = Ipgn::load::<f32>(checkpoint)?;
    let manifest = DatasetManifest::load(data.join("manifest.json"))?;
    let volumes = load_named(data, &manifest, split_ids(&manifest, split))?;
    let report = evaluate_dataset(&model, &store, &volumes, &cfg.eval, cfg.seed)?;
    print!("{}", report.implicit.to_table());
    println!(
        "repeated acc  {:.2}\ngap           {:.2}\nmajority      {:.2}\ndilation      {:.2}",
        report.repeated_accuracy, report.consistency_gap, report.majority_baseline, report.dilation_accuracy
    );
    emit(cli, cfg, cli.global.out.as_deref(), &report)
}

fn cmd_bench(
    cli: &Cli,
    cfg: &RunConfig,
    checkpoint: &Path,
    paths: &[PathBuf],
    runs: usize,
    sample_points: usize,
) -> Result<()> {
    let (mut model, store) = Ipgn::load::<f32>(checkpoint)?;
    model.cfg.implicit.sample_points = sample_points;
    model.cfg.validate()?;
    // Everything is loaded or generated before any timer starts.
    let volumes: Vec<(String, LabelVolume)> = if paths.is_empty() {
        (0..cfg.bench.volumes)
            .map(|i| {
                let spec = TreeSpec { seed: tree_seed(cfg.seed, i), ..cfg.bench.tree.clone() };
                Ok((format!("bench_{i:03}"), generate_tree(&spec)?.volume))
            })
            .collect::<Result<_>>()?
    } else {
        paths
            .iter()
            .map(|p| Ok((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), load_volume(p)?)))
            .collect::<Result<_>>()?
    };
    let report = bench_reconstruction(&model, &store, &volumes, runs, cfg.seed)?;
    print!("{}", report.to_table());
    emit(cli, cfg, cli.global.out.as_deref(), &report)
}

#[derive(Serialize)]
struct GradcheckReport {
    layers: Vec<LayerCheck>,
    model: GradCheckReport,
    passed: bool,
}

fn cmd_gradcheck(
    cli: &Cli,
    cfg: &RunConfig,
    points: usize,
    queries: usize,
    per_param: usize,
    tolerance: f64,
) -> Result<()> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.implicit.sample_points = points;
    let spec = TreeSpec { seed: cfg.seed, ..cfg.tree.clone() };
    let scene = Scene::<f64>::from_volume(&generate_tree(&spec)?.volume, true)?;
    let layers = gradcheck_layers(&model_cfg, &scene, queries, cfg.seed, tolerance, per_param)?;
    let model = gradcheck_ipgn(&model_cfg, &scene, queries, cfg.seed, tolerance, per_param)?;
    let verdict = |ok: bool| if ok { "pass" } else { "FAIL" };
    for c in &layers {
        println!("{:<16} max relative error {:.3e}  {}", c.layer, c.report.max_rel_error, verdict(c.report.passed));
    }
    println!(
        "{:<16} max relative error {:.3e}  {}  ({} tensors, tolerance {:.0e})",
        "full model",
        model.max_rel_error,
        verdict(model.passed),
        model.params.len(),
        tolerance
    );
    let passed = model.passed && layers.iter().all(|c| c.report.passed);
    let worst = layers.iter().map(|c| c.report.max_rel_error).fold(model.max_rel_error, f64::max);
    emit(cli, cfg, cli.global.out.as_deref(), &GradcheckReport { layers, model, passed })?;
    if !passed {
        return Err(Error::Invalid(format!("gradient check failed: max relative error {worst:.3e}")));
    }
    Ok(())
}
