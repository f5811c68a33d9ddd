use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vprf::eval::{self, load_qrels, load_run, save_qrels, save_run};
use vprf::report::{self, ReportFormat, TimingColumn};
use vprf::store::{load_embeddings, save_embeddings, synth_corpus};
use vprf::sweep::{self, Dataset, MetricsConfig, SweepOptions, TimingConfig, TimingMode};
use vprf::vprf::{param_grid, run_vprf_batch, RefineOptions};
use vprf::{
    write_atomic, CorpusKind, EmbeddingCorpus, FlatIndex, Format, GridSpec, GridVariant, IndexOptions, RankedRun,
    VprfParams,
};

#[derive(Parser)]
#[command(name = "vprf", version, about = "Dense retrieval with vector pseudo relevance feedback")]
struct Cli {
    /// Worker threads for per-query work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Embedding file format.
    #[arg(long, global = true, value_enum, default_value_t = FileFormat::Binary)]
    format: FileFormat,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FileFormat {
    Binary,
    Line,
}

impl FileFormat {
    fn store(self) -> Format {
        match self {
            FileFormat::Binary => Format::Binary,
            FileFormat::Line => Format::LineRecord,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            FileFormat::Binary => "bin",
            FileFormat::Line => "txt",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a flat index from passage embeddings.
    Index {
        #[arg(long)]
        passages: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store unit-normalized vectors.
        #[arg(long)]
        normalize: bool,
    },
    /// Single-stage search, written as a TREC run.
    Search {
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "baseline")]
        tag: String,
    },
    /// Two-stage retrieval with feedback refinement, written as a TREC run.
    Vprf {
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        params: ParamArgs,
        #[arg(long)]
        out: PathBuf,
        /// L2-normalize query and feedback vectors before combining.
        #[arg(long)]
        normalize: bool,
        /// Run tag; defaults to one derived from the parameters.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Score a TREC run against qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[command(flatten)]
        metrics: MetricArgs,
        /// Also print one line per query.
        #[arg(long)]
        per_query: bool,
    },
    /// Run the baseline and a parameter grid over one or more datasets.
    Sweep {
        /// Dataset directory holding passages.<ext>, queries.<ext> and qrels.txt.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = GridArg::All)]
        grid: GridArg,
        #[arg(long, value_delimiter = ',', default_values_t = vprf::vprf::DEFAULT_KAPPAS.to_vec())]
        kappas: Vec<usize>,
        #[command(flatten)]
        metrics: MetricArgs,
        /// Pre-normalize the index and normalize before combining.
        #[arg(long)]
        normalize: bool,
        /// Record per-query wall-clock time (runs configs sequentially).
        #[arg(long)]
        time: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate sweep CSVs into baseline / BIA / Oracle tables.
    Report {
        /// MODEL=PATH, one per sweep CSV.
        #[arg(long = "input", required = true, value_parser = parse_model_input)]
        inputs: Vec<(String, PathBuf)>,
        #[arg(long = "as", value_enum, default_value_t = ReportArg::Markdown)]
        output_format: ReportArg,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic clustered dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 50)]
        docs_per_cluster: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-query timing of baseline and feedback retrieval.
    Timing {
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long, default_value_t = 3)]
        kappa: usize,
        #[arg(long, default_value = "model")]
        model: String,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
}

#[derive(Args)]
struct RetrievalArgs {
    /// Prebuilt index file.
    #[arg(long, conflicts_with = "passages", required_unless_present = "passages")]
    index: Option<PathBuf>,
    /// Passage embeddings; an index is built in memory.
    #[arg(long)]
    passages: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 1000)]
    k_final: usize,
}

#[derive(Args)]
struct ParamArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Rocchio)]
    method: MethodArg,
    #[arg(long, default_value_t = 3)]
    kappa: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
}

impl ParamArgs {
    fn params(&self) -> VprfParams {
        match self.method {
            MethodArg::Average => VprfParams::average(self.kappa),
            MethodArg::Rocchio => VprfParams::rocchio(self.kappa, self.alpha, self.beta),
        }
    }
}

#[derive(Args)]
struct MetricArgs {
    #[arg(long, default_value_t = 10)]
    ndcg_k: usize,
    #[arg(long, default_value_t = 100)]
    recall_k: usize,
    /// Smallest grade counted as relevant for recall.
    #[arg(long, default_value_t = 1)]
    min_grade: u32,
}

impl MetricArgs {
    fn config(&self) -> MetricsConfig {
        MetricsConfig {
            ndcg_k: self.ndcg_k,
            recall_k: self.recall_k,
            min_grade: self.min_grade,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Average,
    Rocchio,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    AlphaBeta,
    FixedAlphaOne,
    Average,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Markdown,
    Csv,
}

fn parse_model_input(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((model, path)) if !model.is_empty() && !path.is_empty() => Ok((model.to_owned(), path.into())),
        _ => Err(format!("expected MODEL=PATH, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let format = cli.format;
    match cli.command {
        Command::Index { passages, out, normalize } => {
            let corpus = load(&passages, format, CorpusKind::Passages)?;
            let index = FlatIndex::build_with(&corpus, IndexOptions { normalize })
                .with_context(|| format!("building index from {}", passages.display()))?;
            index.save(&out)?;
            eprintln!("indexed {} passages (dim {}) into {}", index.len(), index.dimension(), out.display());
        }
        Command::Search { retrieval, out, tag } => {
            let (index, queries) = open(&retrieval, format)?;
            let hits = index.batch_search(&queries, retrieval.k_final)?;
            write_run(&RankedRun::from_hits(&hits)?, &tag, &out)?;
        }
        Command::Vprf {
            retrieval,
            params,
            out,
            normalize,
            tag,
        } => {
            let params = params.params();
            params.validate()?;
            let (index, queries) = open(&retrieval, format)?;
            let options = RefineOptions {
                normalize_before_combine: normalize,
            };
            let hits = run_vprf_batch(&index, &queries, &params, retrieval.k_final, options)?;
            let tag = tag.unwrap_or_else(|| params.tag());
            write_run(&RankedRun::from_hits(&hits)?, &tag, &out)?;
        }
        Command::Eval { run, qrels, metrics, per_query } => {
            let run = load_run(&run)?;
            let qrels = load_qrels(&qrels)?;
            let reports = [
                eval::ndcg_at_k(&run, &qrels, metrics.ndcg_k)?,
                eval::recall_at_k(&run, &qrels, metrics.recall_k, metrics.min_grade)?,
            ];
            for r in &reports {
                if per_query {
                    for (q, v) in &r.per_query {
                        println!("{}\t{q}\t{v:.4}", r.metric);
                    }
                }
                println!("{}\tall\t{:.4}", r.metric, r.mean);
            }
            if !reports[0].unjudged_queries.is_empty() {
                eprintln!("{} run queries have no judgments and were skipped", reports[0].unjudged_queries.len());
            }
        }
        Command::Sweep {
            datasets,
            grid,
            kappas,
            metrics,
            normalize,
            time,
            out,
        } => {
            let grid = build_grid(grid, &kappas);
            let datasets = datasets
                .iter()
                .map(|dir| load_dataset(dir, format))
                .collect::<Result<Vec<_>>>()?;
            let options = SweepOptions {
                metrics: metrics.config(),
                index: IndexOptions { normalize },
                refine: RefineOptions {
                    normalize_before_combine: normalize,
                },
                measure_time: time,
            };
            let outcome = sweep::run_sweep(&datasets, &grid, &options)?;
            write_atomic(&out, sweep::sweep_csv_string(&outcome.results)?.as_bytes())
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} results over {} configs written to {}", outcome.results.len(), grid.len() + 1, out.display());
            if !outcome.failures.is_empty() {
                let failed = outcome.failures.len();
                for (name, e) in outcome.failures {
                    eprintln!("dataset {name} failed: {:#}", anyhow::Error::from(e));
                }
                bail!("{failed} of {} datasets failed", datasets.len());
            }
        }
        Command::Report { inputs, output_format, out } => {
            let mut reports = Vec::with_capacity(inputs.len());
            for (model, path) in &inputs {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let results = sweep::read_sweep_csv(file).with_context(|| format!("reading {}", path.display()))?;
                let mut metrics: Vec<String> = results.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
                metrics.sort();
                metrics.dedup();
                reports.push(report::aggregate(model, &results, &metrics).with_context(|| format!("aggregating {model}"))?);
            }
            let format = match output_format {
                ReportArg::Markdown => ReportFormat::Markdown,
                ReportArg::Csv => ReportFormat::Csv,
            };
            emit(&report::emit_report(&reports, format), out.as_deref())?;
        }
        Command::Synth {
            out,
            clusters,
            docs_per_cluster,
            dim,
            noise,
            seed,
        } => {
            let ds = synth_corpus(clusters, docs_per_cluster, dim, noise, seed)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ext = format.extension();
            save_embeddings(&ds.passages, out.join(format!("passages.{ext}")), format.store())?;
            save_embeddings(&ds.queries, out.join(format!("queries.{ext}")), format.store())?;
            save_qrels(&ds.qrels, out.join("qrels.txt"))?;
            eprintln!("wrote {} passages and {} queries to {}", ds.passages.len(), ds.queries.len(), out.display());
        }
        Command::Timing {
            retrieval,
            kappa,
            model,
            repetitions,
            warmup,
        } => {
            let (index, queries) = open(&retrieval, format)?;
            let cfg = TimingConfig {
                k: retrieval.k_final,
                warmup,
                repetitions,
            };
            let time = |mode| sweep::time_per_query(&index, &queries, mode, &cfg);
            let column = TimingColumn {
                model,
                baseline_s: time(TimingMode::Baseline)?,
                average_s: time(TimingMode::Vprf(VprfParams::average(kappa)))?,
                rocchio_s: time(TimingMode::Vprf(VprfParams::rocchio(kappa, 1.0, 0.5)))?,
            };
            print!("{}", report::emit_timing_table(&[column]));
        }
    }
    Ok(())
}

fn build_grid(grid: GridArg, kappas: &[usize]) -> Vec<VprfParams> {
    let variants: &[GridVariant] = match grid {
        GridArg::AlphaBeta => &[GridVariant::AlphaBetaGrid],
        GridArg::FixedAlphaOne => &[GridVariant::FixedAlphaOne],
        GridArg::Average => &[GridVariant::Average],
        GridArg::All => &[GridVariant::AlphaBetaGrid, GridVariant::FixedAlphaOne, GridVariant::Average],
    };
    variants
        .iter()
        .flat_map(|&v| param_grid(&GridSpec::with_kappas(v, kappas.to_vec())))
        .collect()
}

fn load(path: &Path, format: FileFormat, kind: CorpusKind) -> Result<EmbeddingCorpus> {
    load_embeddings(path, format.store(), kind).with_context(|| format!("loading {}", path.display()))
}

fn open(args: &RetrievalArgs, format: FileFormat) -> Result<(FlatIndex, EmbeddingCorpus)> {
    let index = match (&args.index, &args.passages) {
        (Some(path), _) => FlatIndex::load(path).with_context(|| format!("loading index {}", path.display()))?,
        (None, Some(path)) => FlatIndex::build(&load(path, format, CorpusKind::Passages)?)?,
        (None, None) => bail!("either --index or --passages is required"),
    };
    let queries = load(&args.queries, format, CorpusKind::Queries)?;
    if queries.dimension() != index.dimension() {
        bail!(
            "query dimension {} does not match index dimension {}",
            queries.dimension(),
            index.dimension()
        );
    }
    Ok((index, queries))
}

fn write_run(run: &RankedRun, tag: &str, out: &Path) -> Result<()> {
    save_run(run, tag, out)?;
    eprintln!("wrote {} queries to {}", run.len(), out.display());
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_dataset(dir: &Path, format: FileFormat) -> Result<Dataset> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .with_context(|| format!("dataset path {} has no directory name", dir.display()))?;
    let ext = format.extension();
    Ok(Dataset {
        name,
        passages: load(&dir.join(format!("passages.{ext}")), format, CorpusKind::Passages)?,
        queries: load(&dir.join(format!("queries.{ext}")), format, CorpusKind::Queries)?,
        qrels: load_qrels(dir.join("qrels.txt")).with_context(|| format!("loading qrels in {}", dir.display()))?,
    })
}
