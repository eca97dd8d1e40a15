//! `dafec`: generate synthetic two-domain data, run pipeline stages, full
//! runs and ablation sweeps, and emit plot data.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dafec_core::config;
use dafec_core::losses::EntropySign;
use dafec_core::metrics::davies_bouldin;
use dafec_core::models::{read_checkpoint, write_checkpoint, ExtractorParams};
use dafec_core::pipeline::{
    self, extract_features, features_from_dataset, mine_pseudo_labels, prune_small_classes, train_classifier,
    train_extractor, write_feature_dump, AnnealKind, TrainConfig,
};
use dafec_core::sampling::{load_dataset, merge_datasets, write_dataset, write_instances, Dataset};
use dafec_core::synthetic::{generate, SyntheticSpec};
use dafec_report::{ablation_table, emit_plot_data, fill_fmi, read_gold_sidecar, write_gold_sidecar, GoldLabels, PlotRun};

use manifest::{DataPaths, RunManifest};

pub const SOURCE_FILE: &str = "source.jsonl";
pub const TARGET_FILE: &str = "target_unlabeled.jsonl";
pub const TEST_FILE: &str = "target_test.jsonl";
pub const GOLD_FILE: &str = "gold_labels.tsv";

#[derive(Parser, Debug)]
#[command(name = "dafec", version, about = "Few-shot domain adaptation with clustering pseudo labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-domain benchmark.
    Generate(GenerateArgs),
    /// Stage 1: train the extractor and discriminator.
    TrainExtractor(StageArgs),
    /// Stage 2: encode the unlabeled target pool.
    Extract(ExtractArgs),
    /// Stage 3: cluster encoded features into pseudo classes.
    Mine(MineArgs),
    /// Stage 4: train the few-shot classifier on source plus pseudo classes.
    TrainClassifier(ClassifierArgs),
    /// Few-shot evaluation of a classifier checkpoint.
    Evaluate(EvaluateArgs),
    /// All stages and evaluation.
    RunAll(StageArgs),
    /// The ablation grid, one run per variant, plus a comparison table.
    Ablate(AblateArgs),
    /// Plot-ready CSVs from finished runs.
    Plot(PlotArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AnnealArg {
    Cosine,
    Linear,
    Constant,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SignArg {
    AsWritten,
    Negated,
}

/// Settings shared by every training and evaluation command. Flags
/// override `--config` values.
#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Classes per training episode.
    #[arg(long)]
    n: Option<usize>,
    /// Support instances per class.
    #[arg(long)]
    k: Option<usize>,
    /// Query instances per class.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    anneal: Option<AnnealArg>,
    #[arg(long = "anneal-T")]
    anneal_t: Option<u64>,
    /// Number of k-means clusters (pseudo classes).
    #[arg(long)]
    clusters: Option<usize>,
    /// Extractor training iterations.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    classifier_iters: Option<u64>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_pseudo: bool,
    #[arg(long)]
    no_cpm_s: bool,
    #[arg(long)]
    no_cpm_a: bool,
    #[arg(long)]
    no_cpm_c: bool,
    #[arg(long, value_enum)]
    entropy_sign: Option<SignArg>,
    /// Use the uncorrected printed annealing formula (audit only).
    #[arg(long)]
    eq9_literal: bool,
}

#[derive(Args, Debug, Clone, Default)]
struct DataFlags {
    /// Directory holding the generated dataset files.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StageArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Gold sidecar used to report pseudo-label FMI after the run.
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[command(flatten)]
    train: TrainFlags,
    /// Feature dump written by `extract`.
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ClassifierArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: DataFlags,
    /// Pseudo-labeled target data written by `mine`.
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// Start from this extractor checkpoint instead of a fresh network.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Extra full-pipeline rows with these cluster counts, e.g. `5,20`.
    #[arg(long, value_delimiter = ',')]
    clusters_sweep: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Run directories; each becomes one named series.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// Bad flags, config or file combinations; exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<dafec_core::Error>()) {
        Some(e) if e.is_numeric() => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<(TrainConfig, SyntheticSpec)> {
    match path {
        Some(p) => config::load(p).map_err(|e| usage(e.to_string())),
        None => Ok((TrainConfig::default(), SyntheticSpec::default())),
    }
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let (mut cfg, _) = load_config(self.config.as_deref())?;
        macro_rules! set {
            ($flag:ident => $field:expr) => {
                if let Some(v) = self.$flag {
                    $field = v;
                }
            };
        }
        set!(seed => cfg.seed);
        set!(n => cfg.way);
        set!(k => cfg.shot);
        set!(m => cfg.query);
        set!(tau => cfg.tau);
        set!(anneal_t => cfg.anneal_horizon);
        set!(clusters => cfg.clusters);
        set!(iters => cfg.total_iters);
        set!(classifier_iters => cfg.classifier_iters);
        set!(episodes => cfg.eval_episodes);
        set!(lr => cfg.lr);
        if let Some(a) = self.anneal {
            cfg.anneal = match a {
                AnnealArg::Cosine => AnnealKind::Cosine,
                AnnealArg::Linear => AnnealKind::Linear,
                AnnealArg::Constant => AnnealKind::Constant,
            };
        }
        if let Some(s) = self.entropy_sign {
            cfg.entropy_sign = match s {
                SignArg::AsWritten => EntropySign::AsWritten,
                SignArg::Negated => EntropySign::Negated,
            };
        }
        cfg.ablations.no_pseudo |= self.no_pseudo;
        cfg.ablations.no_cpm_s |= self.no_cpm_s;
        cfg.ablations.no_cpm_a |= self.no_cpm_a;
        cfg.ablations.no_cpm_c |= self.no_cpm_c;
        cfg.eq9_literal |= self.eq9_literal;
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

impl DataFlags {
    fn pick(&self, explicit: &Option<PathBuf>, file: &str, flag: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(file)),
            (None, None) => Err(usage(format!("pass --{flag} or --data"))),
        }
    }

    fn source(&self) -> Result<PathBuf> {
        self.pick(&self.source, SOURCE_FILE, "source")
    }

    fn target(&self) -> Result<PathBuf> {
        self.pick(&self.target, TARGET_FILE, "target")
    }

    fn test(&self) -> Result<PathBuf> {
        self.pick(&self.test, TEST_FILE, "test")
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn load_extractor(path: &Path, name: &str) -> Result<ExtractorParams> {
    let nets = read_checkpoint(path)?;
    nets.into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, net)| net)
        .ok_or_else(|| dafec_core::Error::parse(path, format!("no `{name}` network in checkpoint")).into())
}

fn load_gold(path: Option<&Path>) -> Result<Option<GoldLabels>> {
    path.map(|p| read_gold_sidecar(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_generate(args: &GenerateArgs, argv: &[String]) -> Result<()> {
    let (cfg, mut spec) = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let data = generate(&spec)?;
    create_dir(&args.out)?;
    write_dataset(&args.out.join(SOURCE_FILE), &data.source)?;
    write_dataset(&args.out.join(TARGET_FILE), &data.target_unlabeled)?;
    write_dataset(&args.out.join(TEST_FILE), &data.target_test)?;
    write_gold_sidecar(&args.out.join(GOLD_FILE), &data.gold)?;
    let spec_path = args.out.join("synthetic.conf");
    std::fs::write(&spec_path, config::to_text(&cfg, &spec)).with_context(|| format!("writing {}", spec_path.display()))?;
    RunManifest::new("generate", argv, &cfg, Some(&spec), DataPaths::default(), &args.out).write()?;
    println!(
        "wrote {} source, {} unlabeled target and {} test instances to {}",
        data.source.len(),
        data.target_unlabeled.len(),
        data.target_test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_extractor(args: &StageArgs, cfg: &TrainConfig) -> Result<()> {
    let source = load(&args.data.source()?)?;
    let target = load(&args.data.target()?)?;
    let out = train_extractor(&source, &target, cfg).map_err(|e| e.in_stage("train-extractor"))?;
    create_dir(&args.out)?;
    write_checkpoint(&args.out.join("extractor.ckpt"), &[("extractor", &out.theta), ("discriminator", &out.phi.net)])?;
    let trace = args.out.join("extractor_trace.json");
    std::fs::write(&trace, serde_json::to_string(&out.trace)?).with_context(|| format!("writing {}", trace.display()))?;
    println!("final cross-entropy {:.4}", out.trace.ce.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn cmd_extract(args: &ExtractArgs) -> Result<()> {
    let theta = load_extractor(&args.checkpoint, "extractor")?;
    let target = load(&args.data.target()?)?;
    let features = extract_features(&theta, &target).map_err(|e| e.in_stage("extract-features"))?;
    create_dir(&args.out)?;
    write_feature_dump(&args.out.join("features.jsonl"), &features)?;
    println!("encoded {} instances", features.len());
    Ok(())
}

fn cmd_mine(args: &MineArgs, cfg: &TrainConfig) -> Result<()> {
    let features = features_from_dataset(&load(&args.features)?);
    let target = load(&args.data.target()?)?;
    let (model, pseudo) = mine_pseudo_labels(&features, &target, cfg).map_err(|e| e.in_stage("mine-pseudo-labels"))?;
    create_dir(&args.out)?;
    dafec_core::cluster::write_cluster_dump(&args.out.join("clusters.txt"), &model)?;
    write_instances(&args.out.join("pseudo.jsonl"), pseudo.instances())?;
    let feats: Vec<Vec<f64>> = features.into_iter().map(|(_, f)| f).collect();
    match davies_bouldin(&feats, &model.assignments) {
        Ok(dbi) => println!("{} pseudo classes, inertia {:.4}, DBI {dbi:.4}", pseudo.num_classes(), model.inertia),
        Err(_) => println!("{} pseudo classes, inertia {:.4}", pseudo.num_classes(), model.inertia),
    }
    Ok(())
}

fn cmd_train_classifier(args: &ClassifierArgs, cfg: &TrainConfig) -> Result<()> {
    let source = load(&args.data.source()?)?;
    let merged = match &args.pseudo {
        Some(p) => {
            let pseudo = prune_small_classes(&load(p)?, cfg.shot + cfg.query)?;
            merge_datasets(&source, &pseudo)?
        }
        None => source,
    };
    let init = args
        .warm_start
        .as_deref()
        .map(|p| load_extractor(p, "extractor"))
        .transpose()?;
    let out = train_classifier(&merged, cfg, init.as_ref()).map_err(|e| e.in_stage("train-classifier"))?;
    create_dir(&args.out)?;
    write_checkpoint(&args.out.join("classifier.ckpt"), &[("classifier", &out.params)])?;
    println!(
        "trained on {} classes, final cross-entropy {:.4}",
        merged.num_classes(),
        out.trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, cfg: &TrainConfig) -> Result<()> {
    let clf = load_extractor(&args.checkpoint, "classifier")?;
    let test = load(&args.data.test()?)?;
    let report = pipeline::evaluate(&clf, &test, cfg).map_err(|e| e.in_stage("evaluate"))?;
    report.write(&args.out)?;
    println!(
        "{}-way {}-shot accuracy {:.2} ± {:.2} over {} episodes",
        report.setting.way, report.setting.shot, report.accuracy_mean, report.accuracy_std, report.setting.episodes
    );
    Ok(())
}

fn cmd_run_all(args: &StageArgs, cfg: &TrainConfig) -> Result<()> {
    let source = load(&args.data.source()?)?;
    let target = load(&args.data.target()?)?;
    let test = load(&args.data.test()?)?;
    let mut outcome = pipeline::run_all(&source, &target, &test, cfg)?;
    if let (Some(gold), Some(model)) = (load_gold(args.gold.as_deref())?, &outcome.clusters) {
        fill_fmi(&mut outcome.report, model, &gold)?;
    }
    outcome.write_artifacts(&args.out)?;
    let r = &outcome.report;
    println!("accuracy {:.2} ± {:.2}", r.accuracy_mean, r.accuracy_std);
    if let Some(dbi) = r.dbi {
        println!("target DBI {dbi:.4}");
    }
    if let Some(fmi) = r.fmi {
        println!("pseudo-label FMI {fmi:.4}");
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs, cfg: &TrainConfig) -> Result<()> {
    let source = load(&args.data.source()?)?;
    let target = load(&args.data.target()?)?;
    let test = load(&args.data.test()?)?;
    let gold = load_gold(args.gold.as_deref())?;
    let mut grid: Vec<(String, TrainConfig)> = pipeline::ablation_grid(cfg)
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect();
    for &k in &args.clusters_sweep {
        let mut c = grid[0].1.clone();
        c.clusters = k;
        grid.push((format!("clusters_{k}"), c));
    }
    use rayon::prelude::*;
    let outcomes: Vec<(String, pipeline::RunOutcome)> = grid
        .into_par_iter()
        .map(|(name, c)| {
            pipeline::run_all(&source, &target, &test, &c)
                .map(|o| (name.clone(), o))
                .with_context(|| format!("variant {name}"))
        })
        .collect::<Result<_>>()?;
    create_dir(&args.out)?;
    let mut rows = Vec::with_capacity(outcomes.len());
    for (name, mut outcome) in outcomes {
        if let (Some(g), Some(model)) = (&gold, &outcome.clusters) {
            fill_fmi(&mut outcome.report, model, g)?;
        }
        outcome.write_artifacts(&args.out.join(&name))?;
        rows.push((name, outcome.report));
    }
    let table = ablation_table(&rows.iter().map(|(n, r)| (n.as_str(), r)).collect::<Vec<_>>());
    let path = args.out.join("ablation.csv");
    std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let gold = load_gold(args.gold.as_deref())?;
    let runs: Vec<PlotRun> = args
        .runs
        .iter()
        .map(|dir| {
            let name = dir
                .file_name()
                .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
            PlotRun::load(name, dir).with_context(|| format!("reading run {}", dir.display()))
        })
        .collect::<Result<_>>()?;
    let written = emit_plot_data(&args.out, &runs, gold.as_ref())?;
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(())
}

fn data_paths(data: &DataFlags, gold: Option<&Path>) -> DataPaths {
    DataPaths {
        source: data.source().ok(),
        target: data.target().ok(),
        test: data.test().ok(),
        gold: gold.map(Path::to_path_buf),
    }
}

/// Runs `cli`. `snapshot` replaces the config resolved from flags, which is
/// how replays reproduce a run even if its config file has changed since.
fn run(cli: &Cli, argv: &[String], snapshot: Option<&TrainConfig>) -> Result<()> {
    let resolve = |flags: &TrainFlags| -> Result<TrainConfig> {
        match snapshot {
            Some(cfg) => Ok(cfg.clone()),
            None => flags.resolve(),
        }
    };
    let record = |name: &str, cfg: &TrainConfig, paths: DataPaths, out: &Path| -> Result<()> {
        create_dir(out)?;
        RunManifest::new(name, argv, cfg, None, paths, out).write()
    };
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, argv),
        Command::TrainExtractor(a) => {
            let cfg = resolve(&a.train)?;
            cmd_train_extractor(a, &cfg)?;
            record("train-extractor", &cfg, data_paths(&a.data, None), &a.out)
        }
        Command::Extract(a) => {
            cmd_extract(a)?;
            record("extract", &TrainConfig::default(), data_paths(&a.data, None), &a.out)
        }
        Command::Mine(a) => {
            let cfg = resolve(&a.train)?;
            cmd_mine(a, &cfg)?;
            record("mine", &cfg, data_paths(&a.data, None), &a.out)
        }
        Command::TrainClassifier(a) => {
            let cfg = resolve(&a.train)?;
            cmd_train_classifier(a, &cfg)?;
            record("train-classifier", &cfg, data_paths(&a.data, None), &a.out)
        }
        Command::Evaluate(a) => {
            let cfg = resolve(&a.train)?;
            cmd_evaluate(a, &cfg)?;
            record("evaluate", &cfg, data_paths(&a.data, None), &a.out)
        }
        Command::RunAll(a) => {
            let cfg = resolve(&a.train)?;
            cmd_run_all(a, &cfg)?;
            record("run-all", &cfg, data_paths(&a.data, a.gold.as_deref()), &a.out)
        }
        Command::Ablate(a) => {
            let cfg = resolve(&a.train)?;
            cmd_ablate(a, &cfg)?;
            record("ablate", &cfg, data_paths(&a.data, a.gold.as_deref()), &a.out)
        }
        Command::Plot(a) => cmd_plot(a),
        Command::Replay(a) => {
            let m = RunManifest::read(&a.manifest)?;
            let cli = Cli::try_parse_from(&m.argv).map_err(|e| usage(format!("manifest argv: {e}")))?;
            if matches!(cli.command, Command::Replay(_)) {
                return Err(usage("a manifest cannot replay another replay"));
            }
            run(&cli, &m.argv, Some(&m.config))
        }
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli, &argv, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.conf");
        std::fs::write(&p, "n = 3\ntau = 0.5\nclusters = 4\n").unwrap();
        let cli = Cli::try_parse_from(["dafec", "run-all", "--config", p.to_str().unwrap(), "--n", "7", "--no-cpm-a", "--out", "x"]).unwrap();
        let Command::RunAll(a) = cli.command else { panic!() };
        let cfg = a.train.resolve().unwrap();
        assert_eq!((cfg.way, cfg.tau, cfg.clusters), (7, 0.5, 4));
        assert!(cfg.ablations.no_cpm_a);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&usage("x")), 1);
        assert_eq!(exit_code(&dafec_core::Error::Capacity("x".into()).into()), 2);
        let numeric: anyhow::Error = dafec_core::Error::Numeric("x".into()).in_stage("train-extractor").into();
        assert_eq!(exit_code(&numeric.context("outer")), 3);
    }
}
