use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ratingbench::corpus::{
    construct_instances, dataset_stats, load_records, make_shuffle_variant, open_instances, reduce_context,
    save_instances, user_mean_ratings, ConstructParams, IngestSchema,
};
use ratingbench::metrics::{aggregate, Metric};
use ratingbench::profile::DescriptionCache;
use ratingbench::promptgen::Renderer;
use ratingbench::runner::{
    compare_dirs, default_embedding_model, evaluate_dir, load_arm_records, render_report, run_arm, run_baseline,
    split_similarity, synthesize_all_descriptions, BaselineMethod, DESCRIPTIONS_FILE,
};
use ratingbench::similarity::Pooling;
use ratingbench::{DomainVocabulary, EvalInstance, ExperimentConfig, MfHyper, RatingScale, ReportLayout};

#[derive(Parser)]
#[command(name = "ratingbench", version, about = "Rating prediction benchmark for chat models")]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an evaluation dataset from a line-delimited review corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Derive a harder variant of a dataset.
    #[command(subcommand)]
    Variant(VariantCommand),
    /// Print and save dataset statistics.
    Stats(StatsArgs),
    /// Generate self-described preferences for a configured dataset.
    SynthesizeDescriptions(SynthesizeArgs),
    /// Run (or resume) configured arms.
    Run(RunArgs),
    /// Score a dataset with a classical baseline.
    Baseline(BaselineArgs),
    /// Recompute metrics for an arm directory.
    Evaluate(EvaluateArgs),
    /// Welch's t-test between two arm directories.
    Compare(CompareArgs),
    /// Split a dataset into similar and dissimilar halves by embedding similarity.
    SplitSimilarity(SplitArgs),
    /// Render metrics of several arm directories in one layout.
    Report(ReportArgs),
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    y_min: i64,
    #[arg(long, default_value_t = 10, allow_negative_numbers = true)]
    y_max: i64,
}

impl ScaleArgs {
    fn scale(&self) -> Result<RatingScale> {
        Ok(RatingScale::new(self.y_min, self.y_max)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    /// Item description taken from the `description` field.
    Generic,
    /// Name, description and steps.
    Recipe,
    /// Title, subtitle and features.
    Books,
}

#[derive(Args)]
struct CorpusArgs {
    /// Raw corpus, one JSON review per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "generic")]
    kind: CorpusKind,
    /// TOML file overriding the field mapping.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[command(flatten)]
    scale: ScaleArgs,
}

impl CorpusArgs {
    fn schema(&self) -> Result<IngestSchema> {
        let scale = self.scale.scale()?;
        let mut schema = match &self.schema {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
                toml::from_str::<IngestSchema>(&text).with_context(|| path.display().to_string())?
            }
            None => match self.kind {
                CorpusKind::Generic => IngestSchema::default(),
                CorpusKind::Recipe => IngestSchema::recipe_corpus(scale),
                CorpusKind::Books => IngestSchema::books_corpus(scale),
            },
        };
        schema.scale = scale;
        Ok(schema)
    }
}

#[derive(Args)]
struct BuildCorpusArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Output dataset (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Minimum review length in characters.
    #[arg(long, default_value_t = 200)]
    min_len: usize,
    /// Maximum review length in characters (exclusive).
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset label; defaults to the output file stem.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Subcommand)]
enum VariantCommand {
    /// Permute in-context review texts across the dataset.
    Shuffle {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        scale: ScaleArgs,
    },
    /// Rebuild from the raw corpus keeping only short reviews.
    Short {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        min_len: usize,
        #[arg(long, default_value_t = 200)]
        max_len: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        label: Option<String>,
    },
    /// Keep the first k context reviews of every instance.
    ReduceK {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        scale: ScaleArgs,
    },
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Raw corpus the dataset came from, for the representativeness correlation.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "generic")]
    kind: CorpusKind,
    /// Where to write the JSON statistics; defaults to `<dataset>.stats.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scale: ScaleArgs,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset name from the config.
    #[arg(long)]
    dataset: String,
    /// Generator model name from the config.
    #[arg(long)]
    model: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Arm to run; repeat for several. Runs every arm when omitted.
    #[arg(long)]
    arm: Vec<String>,
    /// Overrides `experiment.output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    UserAverage,
    Mf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(value_enum)]
    method: BaselineKind,
    #[arg(long)]
    dataset: PathBuf,
    /// Arm directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = MfHyper::default().d)]
    d: usize,
    #[arg(long, default_value_t = MfHyper::default().lambda)]
    lambda: f64,
    #[arg(long, default_value_t = MfHyper::default().iterations)]
    iterations: u32,
    #[arg(long, default_value_t = MfHyper::default().seed)]
    seed: u64,
    #[command(flatten)]
    scale: ScaleArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Arm directory.
    dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// rho, tau or rmse.
    #[arg(long, default_value = "rho")]
    metric: Metric,
    /// Restrict both arms to instances parsed in every run of both.
    #[arg(long)]
    paired: bool,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mean,
    Max,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset name from the config.
    #[arg(long)]
    dataset: String,
    /// Embedding model name from the config.
    #[arg(long)]
    model: Option<String>,
    /// Embedding endpoint used when no model is named.
    #[arg(long, default_value = "http://localhost:8080/v1")]
    endpoint: String,
    #[arg(long, value_enum, default_value = "mean")]
    pooling: PoolingArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Arm directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// csv, markdown or histogram.
    #[arg(long, default_value = "markdown")]
    layout: ReportLayout,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

fn construct(corpus: &CorpusArgs, params: ConstructParams, out: &Path) -> Result<()> {
    let loaded = load_records(&corpus.input, &corpus.schema()?)?;
    if !loaded.skipped.is_empty() {
        eprintln!("skipped {} malformed lines", loaded.skipped.len());
        for s in loaded.skipped.iter().take(5) {
            log::info!("line {}: {}", s.line, s.reason);
        }
    }
    let data = construct_instances(&loaded.records, &params)?;
    save_instances(out, &data)?;
    println!("{} instances from {} records -> {}", data.len(), loaded.records.len(), out.display());
    Ok(())
}

fn open(path: &Path, scale: &ScaleArgs) -> Result<Vec<EvalInstance>> {
    Ok(open_instances(path, scale.scale()?, None)?)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCorpus(a) => {
            let params = ConstructParams {
                min_len: a.min_len,
                max_len: a.max_len,
                k: a.k,
                n: a.n,
                seed: a.seed,
                scale: a.corpus.scale.scale()?,
                label: a.label.clone().unwrap_or_else(|| default_label(&a.out)),
            };
            construct(&a.corpus, params, &a.out)
        }
        Command::Variant(VariantCommand::Shuffle { dataset, out, seed, scale }) => {
            let data = make_shuffle_variant(&open(&dataset, &scale)?, seed)?;
            save_instances(&out, &data)?;
            println!("{} instances -> {}", data.len(), out.display());
            Ok(())
        }
        Command::Variant(VariantCommand::Short { corpus, out, min_len, max_len, k, n, seed, label }) => {
            let params = ConstructParams {
                min_len,
                max_len: Some(max_len),
                k,
                n,
                seed,
                scale: corpus.scale.scale()?,
                label: label.unwrap_or_else(|| default_label(&out)),
            };
            construct(&corpus, params, &out)
        }
        Command::Variant(VariantCommand::ReduceK { dataset, out, k, scale }) => {
            let data = reduce_context(&open(&dataset, &scale)?, k)?;
            save_instances(&out, &data)?;
            println!("{} instances with k={k} -> {}", data.len(), out.display());
            Ok(())
        }
        Command::Stats(a) => {
            let data = open(&a.dataset, &a.scale)?;
            let user_means = match &a.corpus {
                Some(input) => {
                    let corpus = CorpusArgs { input: input.clone(), kind: a.kind, schema: None, scale: a.scale };
                    Some(user_mean_ratings(&load_records(input, &corpus.schema()?)?.records))
                }
                None => None,
            };
            let stats = dataset_stats(&data, user_means.as_ref())?;
            let text = serde_json::to_string_pretty(&stats)?;
            let out = a.out.unwrap_or_else(|| a.dataset.with_extension("stats.json"));
            std::fs::write(&out, format!("{text}\n")).with_context(|| out.display().to_string())?;
            println!("{text}");
            Ok(())
        }
        Command::SynthesizeDescriptions(a) => {
            let cfg = load_config(&a.config)?;
            let dataset = cfg.load_dataset(&a.dataset)?;
            let generator = cfg.models.get(&a.model).with_context(|| format!("unknown model `{}`", a.model))?;
            let domain = &cfg.dataset(&a.dataset)?.domain;
            let vocab = DomainVocabulary::for_label(domain).with_context(|| format!("unknown domain `{domain}`"))?;
            let cache_path = cfg.experiment_dir().join(DESCRIPTIONS_FILE);
            std::fs::create_dir_all(cfg.experiment_dir())?;
            let mut cache = DescriptionCache::open(&cache_path)?;
            let failed = synthesize_all_descriptions(
                &dataset,
                generator,
                cfg.gateway.max_parallel,
                &cfg.build_gateway()?,
                &Renderer::builtin(vocab),
                &mut cache,
            )?;
            println!("{} of {} descriptions available in {}", dataset.len() - failed, dataset.len(), cache_path.display());
            if failed > 0 {
                bail!("{failed} descriptions could not be generated");
            }
            Ok(())
        }
        Command::Run(a) => {
            let mut cfg = load_config(&a.config)?;
            if let Some(dir) = a.output_dir {
                cfg.experiment.output_dir = dir;
            }
            let arms: Vec<String> = if a.arm.is_empty() { cfg.arms.keys().cloned().collect() } else { a.arm };
            let gateway = cfg.build_gateway()?;
            for arm_id in &arms {
                let run = run_arm(&cfg, arm_id, &gateway).with_context(|| format!("arm `{arm_id}`"))?;
                let o = &run.outcome;
                println!(
                    "{arm_id}: {} requests issued, {} resumed, {} infrastructure failures -> {}",
                    o.issued_jobs,
                    o.skipped_jobs,
                    o.infra_failures,
                    cfg.arm_dir(arm_id).display()
                );
                print!("{}", render_report(std::slice::from_ref(&run.report), ReportLayout::MarkdownTable));
            }
            Ok(())
        }
        Command::Baseline(a) => {
            let data = open(&a.dataset, &a.scale)?;
            let method = match a.method {
                BaselineKind::UserAverage => BaselineMethod::UserAverage,
                BaselineKind::Mf => {
                    BaselineMethod::Mf(MfHyper { d: a.d, lambda: a.lambda, iterations: a.iterations, seed: a.seed })
                }
            };
            let report = run_baseline(&data, &default_label(&a.dataset), method, &a.out)?;
            print!("{}", render_report(std::slice::from_ref(&report), ReportLayout::MarkdownTable));
            Ok(())
        }
        Command::Evaluate(a) => {
            let report = evaluate_dir(&a.dir)?;
            print!("{}", report.to_key_values());
            Ok(())
        }
        Command::Compare(a) => {
            let c = compare_dirs(&a.a, &a.b, a.metric, a.paired)?;
            let w = c.welch;
            println!("metric: {:?}{}", c.metric, if c.paired { " (paired instances)" } else { "" });
            println!("a: {} instances, per-run {:?}", c.n_instances_a, c.a);
            println!("b: {} instances, per-run {:?}", c.n_instances_b, c.b);
            println!("t = {:.6}, df = {:.6}, p = {:.6}", w.t, w.df, w.p);
            println!("significant at alpha = {}: {}", a.alpha, if w.significant(a.alpha) { "yes" } else { "no" });
            Ok(())
        }
        Command::SplitSimilarity(a) => {
            let cfg = load_config(&a.config)?;
            let dataset = cfg.load_dataset(&a.dataset)?;
            let model = match &a.model {
                Some(name) => cfg.models.get(name).cloned().with_context(|| format!("unknown model `{name}`"))?,
                None => default_embedding_model(&a.endpoint),
            };
            let pooling = match a.pooling {
                PoolingArg::Mean => Pooling::Mean,
                PoolingArg::Max => Pooling::Max,
            };
            let s = split_similarity(&dataset, &cfg.build_gateway()?, &model, pooling, &a.out)?;
            println!("{} similar, {} dissimilar -> {}", s.similar, s.dissimilar, a.out.display());
            Ok(())
        }
        Command::Report(a) => {
            let mut reports = Vec::with_capacity(a.dirs.len());
            for dir in &a.dirs {
                let (meta, records) = load_arm_records(dir)?;
                reports.push(aggregate(&records, meta.labels)?);
            }
            let text = render_report(&reports, a.layout);
            match a.out {
                Some(path) => std::fs::write(&path, text).with_context(|| path.display().to_string())?,
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
