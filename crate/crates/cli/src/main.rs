use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use spjoin::distribution::{Family, FitResult};
use spjoin::engine::{read_pairs, sample_phase, write_pairs, NodeReport, PartitionMode, SamplingMode};
use spjoin::sampling::{sampling_error, EmpiricalCdf, NodeSummary};
use spjoin::synth::{generate, Component, ComponentArg, GenSpec, Manifest, Skew};
use spjoin::{run_join, ClusterConfig, Dataset, Execution, MetricKind, PayloadKind, Threshold};

#[derive(Parser)]
#[command(name = "spjoin", version, about = "Metric similarity self-join over a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sample / map / reduce join.
    Join(RunArgs),
    /// All-pairs join by exhaustive comparison.
    Oracle(RunArgs),
    /// Fit and sample only; write the pivots.
    Sample(RunArgs),
    /// Generate a synthetic dataset and its manifest.
    Gen(GenArgs),
    /// Print the set difference of two pairs files.
    ReportDiff(DiffArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON file with any of the options below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// vector, string or set; defaults to the metric's payload.
    #[arg(long)]
    payload: Option<PayloadKind>,
    /// Pairs CSV for join/oracle, pivots CSV for sample; stdout when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Generator manifest; sample reports the sampling error against it.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// l1, euclidean, edit or jaccard.
    #[arg(long)]
    metric: Option<MetricKind>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, short = 'm')]
    nodes: Option<usize>,
    #[arg(long = "sample-size", visible_alias = "k")]
    sample_size: Option<usize>,
    #[arg(long, short = 'p')]
    partitions: Option<usize>,
    #[arg(long = "target-dim")]
    target_dim: Option<usize>,
    /// random, distribution_aware or generative.
    #[arg(long)]
    sampling: Option<SamplingMode>,
    /// iterative or learning.
    #[arg(long)]
    partitioning: Option<PartitionMode>,
    /// Comma-separated: normal, exponential, gamma.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<Family>>,
    #[arg(long)]
    cells: Option<usize>,
    /// Label clusters for learning partitioning; defaults to ⌈√k⌉.
    #[arg(long = "label-clusters")]
    label_clusters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct GenArgs {
    /// JSON generator spec; replaces the shape flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "vector")]
    kind: PayloadKind,
    #[arg(long, short = 'n', default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// `weight:family:p1[,p2]`, repeatable; the marginal is used in every dimension.
    #[arg(long = "component")]
    components: Vec<ComponentArg>,
    /// Component index per node, e.g. `0,0,1,1`: object i uses entry i mod len.
    #[arg(long, value_delimiter = ',')]
    skew: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 12)]
    length: usize,
    #[arg(long = "max-edits", default_value_t = 3)]
    max_edits: usize,
    #[arg(long, default_value = "ACGT")]
    alphabet: String,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    vocabulary: usize,
    #[arg(long = "max-swaps", default_value_t = 3)]
    max_swaps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: PathBuf,
    /// Defaults to `<output>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct DiffArgs {
    left: PathBuf,
    right: PathBuf,
}

/// Usage problems exit 1, everything else 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<spjoin::Error>() {
            Some(spjoin::Error::Config(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow!("{msg}"))
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Join(a) => cmd_join(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Gen(a) => cmd_gen(a),
        Command::ReportDiff(a) => cmd_report_diff(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Resolved options for join, oracle and sample.
struct Run {
    cluster: ClusterConfig,
    input: PathBuf,
    payload: PayloadKind,
    output: Option<PathBuf>,
    report: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

const RUN_KEYS: [&str; 5] = ["input", "payload", "output", "report", "manifest"];

fn resolve(a: RunArgs) -> CliResult<Run> {
    let mut file = Map::new();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
            Value::Object(m) => file = m,
            _ => return Err(usage(format!("{}: config must be a JSON object", path.display()))),
        }
    }
    let take_path = |file: &mut Map<String, Value>, key: &str| -> CliResult<Option<PathBuf>> {
        match file.remove(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(PathBuf::from(s))),
            Some(_) => Err(usage(format!("config field `{key}` must be a string"))),
        }
    };
    let file_input = take_path(&mut file, RUN_KEYS[0])?;
    let file_payload = match file.remove(RUN_KEYS[1]) {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value::<PayloadKind>(v).map_err(|e| usage(format!("config field `payload`: {e}")))?),
    };
    let file_output = take_path(&mut file, RUN_KEYS[2])?;
    let file_report = take_path(&mut file, RUN_KEYS[3])?;
    let file_manifest = take_path(&mut file, RUN_KEYS[4])?;
    let mut c: ClusterConfig = serde_json::from_value(Value::Object(file)).map_err(|e| usage(format!("config: {e}")))?;

    if let Some(v) = a.metric {
        c.metric = v;
    }
    if let Some(v) = a.delta {
        c.delta = Threshold::new(v).map_err(usage)?;
    }
    if let Some(v) = a.nodes {
        c.nodes = v;
    }
    if let Some(v) = a.sample_size {
        c.sample_size = v;
    }
    if let Some(v) = a.partitions {
        c.partitions = v;
    }
    if let Some(v) = a.target_dim {
        c.target_dim = v;
    }
    if let Some(v) = a.sampling {
        c.sampling = v;
    }
    if let Some(v) = a.partitioning {
        c.partitioning = v;
    }
    if let Some(v) = a.families {
        c.families = v;
    }
    if let Some(v) = a.cells {
        c.cells = v;
    }
    if a.label_clusters.is_some() {
        c.label_clusters = a.label_clusters;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if a.serial {
        c.execution = Execution::Serial;
    }
    let input = a.input.or(file_input).ok_or_else(|| usage("no input given (use --input or the config's `input`)"))?;
    let payload = a.payload.or(file_payload).unwrap_or(c.metric.payload_kind());
    if payload != c.metric.payload_kind() {
        return Err(usage(format!("metric {} does not apply to {payload} payloads", c.metric.name())));
    }
    c.validate().map_err(|e| Failure::Usage(e.into()))?;
    Ok(Run {
        cluster: c,
        input,
        payload,
        output: a.output.or(file_output),
        report: a.report.or(file_report),
        manifest: a.manifest.or(file_manifest),
    })
}

fn load(run: &Run) -> CliResult<Dataset> {
    Ok(Dataset::read(&run.input, run.payload).with_context(|| format!("loading {}", run.input.display()))?)
}

fn emit_pairs(path: Option<&Path>, pairs: &[spjoin::Pair]) -> CliResult<()> {
    match path {
        Some(p) => write_pairs(p, pairs).map_err(anyhow::Error::from)?,
        None => {
            println!("id_a,id_b,distance");
            for p in pairs {
                println!("{},{},{}", p.a, p.b, p.distance);
            }
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_join(a: RunArgs) -> CliResult<()> {
    let run = resolve(a)?;
    let data = load(&run)?;
    let result = run_join(&data, &run.cluster).map_err(anyhow::Error::from)?;
    emit_pairs(run.output.as_deref(), &result.pairs)?;
    if let Some(path) = &run.report {
        write_json(path, &result.report)?;
    }
    for w in &result.report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport<'a> {
    metric: MetricKind,
    delta: Threshold,
    objects: usize,
    pairs: usize,
    input: &'a Path,
}

fn cmd_oracle(a: RunArgs) -> CliResult<()> {
    let run = resolve(a)?;
    let data = load(&run)?;
    let pairs = spjoin::engine::brute_force_join_with(&data, run.cluster.metric, run.cluster.delta, run.cluster.execution)
        .map_err(anyhow::Error::from)?;
    emit_pairs(run.output.as_deref(), &pairs)?;
    if let Some(path) = &run.report {
        let report = OracleReport { metric: run.cluster.metric, delta: run.cluster.delta, objects: data.len(), pairs: pairs.len(), input: &run.input };
        write_json(path, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleReport {
    config: ClusterConfig,
    sampling_mode_effective: String,
    pivots: usize,
    nodes: Vec<NodeReport>,
    summaries: Vec<NodeSummary>,
    fits: Vec<Option<FitResult>>,
    global_confidence: Option<f64>,
    gibbs_iterations: u64,
    rejections: u64,
    sampling_bytes: u64,
    /// Max-over-dimensions KS distance to the generating mixture.
    sampling_error: Option<f64>,
    /// Same, against the dataset's own empirical marginals.
    sampling_error_empirical: Option<f64>,
    warnings: Vec<String>,
}

fn cmd_sample(a: RunArgs) -> CliResult<()> {
    let run = resolve(a)?;
    let data = load(&run)?;
    let out = sample_phase(&data, &run.cluster).map_err(anyhow::Error::from)?;
    let vectors = out.pivots.vectors();
    let mut sampling_error_vs_manifest = None;
    if let Some(path) = &run.manifest {
        let manifest = Manifest::read(path).map_err(anyhow::Error::from)?;
        let reference = manifest.reference().ok_or_else(|| usage(format!("{}: manifest is not for vector data", path.display())))?;
        sampling_error_vs_manifest = Some(sampling_error(&vectors, &reference).map_err(anyhow::Error::from)?);
    }
    let empirical = if vectors.is_empty() {
        None
    } else {
        let all: Vec<&[f64]> = data.objects().iter().filter_map(|o| o.payload.as_vector()).collect();
        Some(sampling_error(&vectors, &EmpiricalCdf::new(&all)).map_err(anyhow::Error::from)?)
    };
    match &run.output {
        Some(p) => out.pivots.write_csv(p).map_err(anyhow::Error::from)?,
        None => out.pivots.write_csv_to(std::io::stdout().lock()).map_err(anyhow::Error::from)?,
    }
    if let Some(path) = &run.report {
        let report = SampleReport {
            config: run.cluster.clone(),
            sampling_mode_effective: out.effective_mode.clone(),
            pivots: out.pivots.len(),
            fits: out.nodes.iter().map(|n| n.fit.clone()).collect(),
            nodes: out.nodes,
            summaries: out.summaries,
            global_confidence: out.global_confidence,
            gibbs_iterations: out.gibbs_iterations,
            rejections: out.rejections,
            sampling_bytes: out.bytes,
            sampling_error: sampling_error_vs_manifest,
            sampling_error_empirical: empirical,
            warnings: out.warnings,
        };
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let spec = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading spec {}", path.display()))?;
            serde_json::from_str::<GenSpec>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => match a.kind {
            PayloadKind::Vector => {
                let components: Vec<Component> = if a.components.is_empty() {
                    vec![ComponentArg { weight: 1.0, family: Family::IndependentNormal, params: vec![0.0, 1.0] }.build(a.dim).map_err(usage)?]
                } else {
                    a.components.iter().map(|c| c.build(a.dim)).collect::<spjoin::Result<_>>().map_err(usage)?
                };
                GenSpec::Vector { count: a.count, components, skew: a.skew.map(|node_components| Skew { node_components }) }
            }
            PayloadKind::String => GenSpec::String {
                count: a.count,
                clusters: a.clusters,
                length: a.length,
                max_edits: a.max_edits,
                alphabet: a.alphabet,
            },
            PayloadKind::Set => GenSpec::Set {
                count: a.count,
                clusters: a.clusters,
                size: a.size,
                vocabulary: a.vocabulary,
                max_swaps: a.max_swaps,
            },
        },
    };
    let (data, manifest) = generate(&spec, a.seed).map_err(|e| match e {
        spjoin::Error::Config(_) => Failure::Usage(e.into()),
        e => Failure::Runtime(e.into()),
    })?;
    data.write(&a.output).map_err(anyhow::Error::from)?;
    let manifest_path = a.manifest.unwrap_or_else(|| {
        let mut s = a.output.clone().into_os_string();
        s.push(".manifest.json");
        PathBuf::from(s)
    });
    manifest.write(&manifest_path).map_err(anyhow::Error::from)?;
    Ok(())
}

fn cmd_report_diff(a: DiffArgs) -> CliResult<()> {
    use std::collections::BTreeSet;
    let left: BTreeSet<(u64, u64)> = read_pairs(&a.left).map_err(anyhow::Error::from)?.iter().map(|p| p.key()).collect();
    let right: BTreeSet<(u64, u64)> = read_pairs(&a.right).map_err(anyhow::Error::from)?.iter().map(|p| p.key()).collect();
    let only_left: Vec<_> = left.difference(&right).collect();
    let only_right: Vec<_> = right.difference(&left).collect();
    println!("common: {}", left.intersection(&right).count());
    println!("only in {}: {}", a.left.display(), only_left.len());
    for (x, y) in &only_left {
        println!("< {x},{y}");
    }
    println!("only in {}: {}", a.right.display(), only_right.len());
    for (x, y) in &only_right {
        println!("> {x},{y}");
    }
    Ok(())
}
