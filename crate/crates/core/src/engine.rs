//! The simulated cluster: shard → fit → sample → partition → map → shuffle →
//! reduce → union.
//!
//! Nodes are plain shards held in memory. Every stage is a pure function of
//! its inputs and a per-phase random substream, and units within a stage
//! (nodes, objects, areas) are independent, so serial and parallel execution
//! produce identical results.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{fit_and_test, Family, FitResult, DEFAULT_CELL_COUNT};
use crate::error::{Error, Result};
use crate::metrics::{distance, verify, DataObject, Dataset, MetricKind, Payload, PayloadKind, Threshold};
use crate::par::{self, Execution};
use crate::partition::{
    assign, boxes_from, cost_report, iterative_partition, label_pivots, learning_partition, map_to_target, CostReport,
    DimensionalPivots, PartitionAssignment, SplitTree,
};
use crate::sampling::{
    allocate_sample_sizes, distribution_aware_sample, gibbs_sample, global_confidence, NodeSummary, PivotSet,
    Provenance,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Random,
    #[default]
    DistributionAware,
    Generative,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Random => "random",
            SamplingMode::DistributionAware => "distribution_aware",
            SamplingMode::Generative => "generative",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(SamplingMode::Random),
            "distribution_aware" | "dist" => Ok(SamplingMode::DistributionAware),
            "generative" | "gen" => Ok(SamplingMode::Generative),
            other => Err(Error::Config(format!("unknown sampling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    #[default]
    Iterative,
    Learning,
}

impl PartitionMode {
    pub fn name(self) -> &'static str {
        match self {
            PartitionMode::Iterative => "iterative",
            PartitionMode::Learning => "learning",
        }
    }
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iterative" | "iter" => Ok(PartitionMode::Iterative),
            "learning" | "learn" => Ok(PartitionMode::Learning),
            other => Err(Error::Config(format!("unknown partition mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Virtual nodes, `M`.
    pub nodes: usize,
    /// Pivot sample size, `k`.
    pub sample_size: usize,
    /// Areas / reducers, `p`.
    pub partitions: usize,
    /// Target-space dimension, `n`.
    pub target_dim: usize,
    pub metric: MetricKind,
    pub delta: Threshold,
    pub sampling: SamplingMode,
    pub partitioning: PartitionMode,
    pub families: Vec<Family>,
    /// Goodness-of-fit cells, `t`.
    pub cells: usize,
    /// Label clusters for learning partitioning; `⌈√k⌉` when unset.
    pub label_clusters: Option<usize>,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            nodes: 15,
            sample_size: 3200,
            partitions: 60,
            target_dim: 10,
            metric: MetricKind::Euclidean,
            delta: Threshold::default(),
            sampling: SamplingMode::default(),
            partitioning: PartitionMode::default(),
            families: Family::ALL.to_vec(),
            cells: DEFAULT_CELL_COUNT,
            label_clusters: None,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::Config("node count must be at least 1".into()));
        }
        if self.partitions == 0 || self.sample_size < self.partitions {
            return Err(Error::Config(format!(
                "need sample size ≥ partitions ≥ 1, got k={} p={}",
                self.sample_size, self.partitions
            )));
        }
        if self.target_dim == 0 {
            return Err(Error::Config("target dimension must be at least 1".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("at least one distribution family is required".into()));
        }
        if self.cells < 2 {
            return Err(Error::Config("at least two goodness-of-fit cells are required".into()));
        }
        if self.label_clusters == Some(0) {
            return Err(Error::Config("label cluster count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent random stream per (run seed, phase, unit).
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Phase {
    Sample = 1,
    Anchors = 2,
    Tree = 3,
}

fn substream(seed: u64, phase: Phase, unit: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 48) ^ unit);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualNode<'a> {
    pub node_id: usize,
    pub shard: Vec<&'a DataObject>,
}

/// Round-robin by object id.
pub fn shard(dataset: &Dataset, nodes: usize) -> Vec<VirtualNode<'_>> {
    let mut out: Vec<VirtualNode> = (0..nodes).map(|node_id| VirtualNode { node_id, shard: vec![] }).collect();
    for o in dataset.objects() {
        out[(o.id % nodes as u64) as usize].shard.push(o);
    }
    out
}

/// One result pair, `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub a: u64,
    pub b: u64,
    pub distance: f64,
}

impl Pair {
    pub fn key(&self) -> (u64, u64) {
        (self.a, self.b)
    }
}

/// `id_a,id_b,distance` with a header, in the given order.
pub fn write_pairs(path: impl AsRef<Path>, pairs: &[Pair]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let io = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["id_a", "id_b", "distance"]).map_err(io)?;
    for p in pairs {
        w.write_record([p.a.to_string(), p.b.to_string(), p.distance.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = vec![];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |i: usize| rec.get(i).map(str::trim).ok_or_else(|| Error::parse(path, format!("row {}: expected 3 fields", line + 2)));
        let bad = |what: &str| Error::parse(path, format!("row {}: bad {what}", line + 2));
        out.push(Pair {
            a: field(0)?.parse().map_err(|_| bad("id_a"))?,
            b: field(1)?.parse().map_err(|_| bad("id_b"))?,
            distance: field(2)?.parse().map_err(|_| bad("distance"))?,
        });
    }
    Ok(out)
}

/// All pairs within δ by exhaustive comparison, sorted by ids.
pub fn brute_force_join(dataset: &Dataset, metric: MetricKind, delta: Threshold) -> Result<Vec<Pair>> {
    brute_force_join_with(dataset, metric, delta, Execution::default())
}

pub fn brute_force_join_with(dataset: &Dataset, metric: MetricKind, delta: Threshold, exec: Execution) -> Result<Vec<Pair>> {
    check_payload(dataset, metric)?;
    let mut order: Vec<&DataObject> = dataset.objects().iter().collect();
    order.sort_by_key(|o| o.id);
    let rows = par::map_range(exec, order.len(), |i| -> Result<Vec<Pair>> {
        let mut out = vec![];
        for y in &order[i + 1..] {
            if let Some(d) = verify(metric, &order[i].payload, &y.payload, delta)? {
                out.push(Pair { a: order[i].id, b: y.id, distance: d });
            }
        }
        Ok(out)
    });
    let mut pairs = vec![];
    for r in rows {
        pairs.extend(r?);
    }
    Ok(pairs)
}

fn check_payload(dataset: &Dataset, metric: MetricKind) -> Result<()> {
    if !dataset.is_empty() && dataset.kind() != metric.payload_kind() {
        return Err(Error::PayloadMismatch { metric: metric.name(), payload: dataset.kind().name() });
    }
    Ok(())
}

/// `k` objects uniformly without replacement from the union of the shards.
pub fn random_sample_baseline<R: Rng + ?Sized>(nodes: &[VirtualNode], k: usize, rng: &mut R) -> Result<PivotSet> {
    let all: Vec<(usize, &DataObject)> = nodes.iter().flat_map(|n| n.shard.iter().map(move |&o| (n.node_id, o))).collect();
    if k > all.len() {
        return Err(Error::Precondition(format!("cannot draw {k} pivots from {} objects", all.len())));
    }
    let mut idx = sample_indices(rng, all.len(), k).into_vec();
    idx.sort_unstable();
    let mut set = PivotSet::default();
    for i in idx {
        set.push(all[i].1.clone(), Provenance::Node(all[i].0));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub node_id: usize,
    pub cardinality: usize,
    pub fit: Option<FitResult>,
    pub fit_error: Option<String>,
    /// Confidence used for allocation and rejection.
    pub confidence: f64,
    pub allocated: usize,
    pub rejections: u64,
}

/// Output of the first two stages.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub pivots: PivotSet,
    pub summaries: Vec<NodeSummary>,
    pub nodes: Vec<NodeReport>,
    pub effective_mode: String,
    pub global_confidence: Option<f64>,
    pub gibbs_iterations: u64,
    pub rejections: u64,
    pub warnings: Vec<String>,
    pub bytes: u64,
}

fn payload_bytes(p: &Payload) -> u64 {
    8 + match p {
        Payload::Vector(v) => 8 * v.len() as u64,
        Payload::Text(s) => s.len() as u64,
        Payload::Tokens(t) => t.iter().map(|s| s.len() as u64 + 1).sum(),
    }
}

// id, cardinality, confidence, family tag and the model parameters.
fn summary_bytes(s: &NodeSummary) -> u64 {
    32 + s.model.as_ref().map_or(0, |m| 8 * m.params().iter().map(Vec::len).sum::<usize>() as u64)
}

/// Stages 1–2: fit every node, then draw pivots per `config.sampling`.
pub fn sample_phase(dataset: &Dataset, config: &ClusterConfig) -> Result<SampleOutcome> {
    config.validate()?;
    check_payload(dataset, config.metric)?;
    if dataset.is_empty() {
        return Err(Error::Precondition("dataset is empty".into()));
    }
    let nodes = shard(dataset, config.nodes);
    let m = nodes.len() as u64;
    let vector = dataset.kind() == PayloadKind::Vector;
    let mut warnings = vec![];

    // Stage 1: local fits. Only needed when something consumes them.
    let want_fit = vector && config.sampling != SamplingMode::Random;
    let fits: Vec<std::result::Result<FitResult, String>> = par::map(config.execution, &nodes, |n| {
        if !want_fit {
            return Err(String::new());
        }
        let data: Vec<&[f64]> = n.shard.iter().filter_map(|o| o.payload.as_vector()).collect();
        fit_and_test(&data, &config.families, config.cells).map_err(|e| e.to_string())
    });
    let summaries: Vec<NodeSummary> = nodes
        .iter()
        .zip(&fits)
        .map(|(n, f)| match f {
            Ok(fit) => NodeSummary::new(n.node_id, Some(fit.model.clone()), fit.confidence, n.shard.len()),
            Err(_) => NodeSummary::new(n.node_id, None, 1.0, n.shard.len()),
        })
        .collect();
    let mut reports: Vec<NodeReport> = nodes
        .iter()
        .zip(&fits)
        .zip(&summaries)
        .map(|((n, f), s)| NodeReport {
            node_id: n.node_id,
            cardinality: n.shard.len(),
            fit: f.as_ref().ok().cloned(),
            fit_error: f.as_ref().err().filter(|e| !e.is_empty()).cloned(),
            confidence: s.effective_confidence(),
            allocated: 0,
            rejections: 0,
        })
        .collect();
    for r in &reports {
        if let Some(e) = &r.fit_error {
            warnings.push(format!("node {}: fit failed ({e}); sampled uniformly", r.node_id));
        }
    }
    let ok_fits: Vec<FitResult> = fits.iter().filter_map(|f| f.as_ref().ok().cloned()).collect();
    let global = if ok_fits.is_empty() { None } else { global_confidence(&ok_fits).ok() };

    let summary_traffic: u64 = summaries.iter().map(summary_bytes).sum::<u64>() * m.saturating_sub(1);
    let k = config.sample_size;
    let mut mode = config.sampling;
    if mode != SamplingMode::Random && !vector {
        warnings.push(format!("{} payloads cannot be fitted; pivots drawn uniformly per node", dataset.kind()));
    }

    if mode == SamplingMode::Generative && vector {
        if summaries.iter().all(|s| s.model.is_some()) {
            let mut rng = substream(config.seed, Phase::Sample, u64::MAX);
            match gibbs_sample(&summaries, k, &mut rng) {
                Ok(run) => {
                    return Ok(SampleOutcome {
                        pivots: run.pivots,
                        summaries,
                        nodes: reports,
                        effective_mode: SamplingMode::Generative.name().into(),
                        global_confidence: global,
                        gibbs_iterations: run.iterations,
                        rejections: run.rejections,
                        warnings,
                        bytes: summary_traffic,
                    })
                }
                Err(e) => warnings.push(format!("generative sampling abandoned ({e}); using distribution-aware")),
            }
        } else {
            warnings.push("some nodes have no fitted model; generative sampling replaced by distribution-aware".into());
        }
        mode = SamplingMode::DistributionAware;
    }

    if mode == SamplingMode::Random {
        let k = k.min(dataset.len());
        if k < config.sample_size {
            warnings.push(format!("sample size reduced to the dataset size {k}"));
        }
        let pivots = random_sample_baseline(&nodes, k, &mut substream(config.seed, Phase::Sample, 0))?;
        for (r, p) in reports.iter_mut().zip(count_by_node(&pivots, nodes.len())) {
            r.allocated = p;
        }
        let bytes = pivots.pivots.iter().map(|o| payload_bytes(&o.payload)).sum::<u64>() * m.saturating_sub(1);
        return Ok(SampleOutcome {
            pivots,
            summaries,
            nodes: reports,
            effective_mode: SamplingMode::Random.name().into(),
            global_confidence: global,
            gibbs_iterations: 0,
            rejections: 0,
            warnings,
            bytes,
        });
    }

    // Stage 2: distribution-aware stratified draws (uniform without a model).
    let allocation = allocate_sample_sizes(&summaries, k);
    let draws: Vec<Result<(PivotSet, u64)>> = par::map_indexed(config.execution, &nodes, |i, n| {
        let mut set = PivotSet::default();
        let lc = allocation[i];
        if lc == 0 || n.shard.is_empty() {
            return Ok((set, 0));
        }
        let mut rng = substream(config.seed, Phase::Sample, i as u64);
        if summaries[i].model.is_some() {
            let data: Vec<&[f64]> = n.shard.iter().filter_map(|o| o.payload.as_vector()).collect();
            let s = distribution_aware_sample(&data, &summaries[i], lc, &mut rng)?;
            for j in s.indices {
                set.push(n.shard[j].clone(), Provenance::Node(i));
            }
            Ok((set, s.rejections))
        } else {
            for _ in 0..lc {
                set.push(n.shard[rng.random_range(0..n.shard.len())].clone(), Provenance::Node(i));
            }
            Ok((set, 0))
        }
    });
    let mut pivots = PivotSet::default();
    let mut rejections = 0;
    let mut sample_traffic = 0;
    for ((d, r), &lc) in draws.into_iter().zip(reports.iter_mut()).zip(&allocation) {
        let (set, rej) = d?;
        sample_traffic += set.pivots.iter().map(|o| payload_bytes(&o.payload)).sum::<u64>();
        r.allocated = lc;
        r.rejections = rej;
        rejections += rej;
        pivots.extend(set);
    }
    let effective = if vector { SamplingMode::DistributionAware.name() } else { "uniform_node_local" };
    Ok(SampleOutcome {
        pivots,
        summaries,
        nodes: reports,
        effective_mode: effective.into(),
        global_confidence: global,
        gibbs_iterations: 0,
        rejections,
        warnings,
        bytes: summary_traffic + sample_traffic * m.saturating_sub(1),
    })
}

fn count_by_node(pivots: &PivotSet, nodes: usize) -> Vec<usize> {
    let mut c = vec![0; nodes];
    for p in &pivots.provenance {
        if let Provenance::Node(i) = p {
            c[*i] += 1;
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub sample_size: usize,
    pub partitions: usize,
    pub target_dim: usize,
    pub sampling: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub anchors: Vec<u64>,
    pub split_dims: Vec<usize>,
    pub degenerate_splits: usize,
    pub label_clusters: Option<usize>,
    pub tree: SplitTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Bytes {
    pub sampling: u64,
    pub partitioning: u64,
    pub shuffle: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub sample_ms: f64,
    pub partition_ms: f64,
    pub map_ms: f64,
    pub reduce_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinReport {
    pub config: ClusterConfig,
    pub objects: usize,
    pub effective: Effective,
    pub sampling_mode_effective: String,
    pub warnings: Vec<String>,
    pub nodes: Vec<NodeReport>,
    pub global_confidence: Option<f64>,
    pub gibbs_iterations: u64,
    pub rejections: u64,
    pub layout: Layout,
    pub cost: CostReport,
    pub bytes: Bytes,
    pub pairs: usize,
    /// Pairs found by more than one reducer before deduplication.
    pub duplicate_pairs: usize,
    pub timings: Timings,
}

impl JoinReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinResult {
    /// Sorted by `(a, b)`, no duplicates, no self-pairs.
    pub pairs: Vec<Pair>,
    pub report: JoinReport,
}

/// Per-area verification statistics of an assignment.
pub fn collect_metrics(assignments: &[PartitionAssignment], areas: usize) -> CostReport {
    cost_report(assignments, areas)
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// The full three-phase join.
pub fn run_join(dataset: &Dataset, config: &ClusterConfig) -> Result<JoinResult> {
    let start = Instant::now();
    let exec = config.execution;
    let metric = config.metric;
    let delta = config.delta.delta();
    let sampled = sample_phase(dataset, config)?;
    let t_sample = elapsed_ms(start);
    let mut warnings = sampled.warnings.clone();

    // Stage 3: anchors, target space and the split tree.
    let t = Instant::now();
    let pivots = &sampled.pivots.pivots;
    let n = config.target_dim.min(pivots.len());
    let p = config.partitions.min(pivots.len());
    if n < config.target_dim {
        warnings.push(format!("target dimension reduced to {n}"));
    }
    if p < config.partitions {
        warnings.push(format!("partition count reduced to {p}"));
    }
    let anchors = DimensionalPivots::choose(pivots, n, &mut substream(config.seed, Phase::Anchors, 0))?;
    let pivot_points: Vec<Vec<f64>> =
        par::map(exec, pivots, |o| map_to_target(o, &anchors, metric)).into_iter().collect::<Result<_>>()?;
    let (tree, clusters) = match config.partitioning {
        PartitionMode::Iterative => (iterative_partition(&pivot_points, p, &mut substream(config.seed, Phase::Tree, 0))?, None),
        PartitionMode::Learning => {
            let clusters = config
                .label_clusters
                .unwrap_or_else(|| (pivots.len() as f64).sqrt().ceil() as usize)
                .clamp(1, pivots.len());
            let labels = label_pivots(pivots, metric, clusters, exec)?;
            (learning_partition(&pivot_points, &labels, p)?, Some(clusters))
        }
    };
    if tree.degenerate_splits > 0 {
        warnings.push(format!("{} splits could not separate their pivots", tree.degenerate_splits));
    }
    let t_partition = elapsed_ms(t);

    // Map: target coordinates and kernel area for every object.
    let t = Instant::now();
    let objects = dataset.objects();
    let mapped: Vec<(Vec<f64>, usize)> = par::map(exec, objects, |o| {
        let x = map_to_target(o, &anchors, metric)?;
        let h = tree.leaf_of(&x);
        Ok((x, h))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    // Boxes cover their pivots and every object whose kernel they are, so a
    // partner within δ of any kernel member always lands in the whole area.
    let boxes = boxes_from(&tree, pivot_points.iter().chain(mapped.iter().map(|(x, _)| x)).map(Vec::as_slice));
    // Floating-point slack: coordinates are differences of rounded distances.
    let scale = mapped.iter().flat_map(|(x, _)| x.iter()).fold(delta, |a, &b| a.max(b));
    let widened = delta + 1e-9 * (1.0 + scale);
    let assignments: Vec<PartitionAssignment> = par::map(exec, &mapped, |(x, h)| {
        let a = assign(x, &tree, &boxes, widened);
        debug_assert_eq!(a.kernel, *h);
        a
    });
    let cost = collect_metrics(&assignments, p);
    let t_map = elapsed_ms(t);

    // Shuffle: reducer h receives its kernel members first, then the rest.
    let t = Instant::now();
    let mut whole: Vec<Vec<usize>> = vec![vec![]; p];
    for (i, a) in assignments.iter().enumerate() {
        whole[a.kernel].push(i);
    }
    let kernel_len: Vec<usize> = whole.iter().map(Vec::len).collect();
    for (i, a) in assignments.iter().enumerate() {
        for &h in a.whole.iter().filter(|&&h| h != a.kernel) {
            whole[h].push(i);
        }
    }
    let shuffle_bytes: u64 = whole.iter().flatten().map(|&i| payload_bytes(&objects[i].payload)).sum();

    // Reduce: kernel × kernel once per unordered pair, kernel × the rest.
    let found: Vec<Result<Vec<Pair>>> = par::map_range(exec, p, |h| {
        let w = &whole[h];
        let v = kernel_len[h];
        let mut out = vec![];
        for i in 0..v {
            let x = &objects[w[i]];
            for &j in &w[i + 1..] {
                let y = &objects[j];
                let (lo, hi) = if x.id < y.id { (x, y) } else { (y, x) };
                if let Some(d) = verify(metric, &lo.payload, &hi.payload, config.delta)? {
                    out.push(Pair { a: lo.id, b: hi.id, distance: d });
                }
            }
        }
        Ok(out)
    });
    let mut pairs = vec![];
    for f in found {
        pairs.extend(f?);
    }
    let raw = pairs.len();
    pairs.sort_by_key(Pair::key);
    pairs.dedup_by_key(|p| p.key());
    let duplicate_pairs = raw - pairs.len();

    // Re-verify the collected output.
    let by_id: BTreeMap<u64, &DataObject> = objects.iter().map(|o| (o.id, o)).collect();
    for pr in &pairs {
        let d = distance(metric, by_id[&pr.a], by_id[&pr.b])?;
        if !(pr.a < pr.b && d <= delta) {
            return Err(Error::Precondition(format!("pair ({}, {}) failed re-verification", pr.a, pr.b)));
        }
    }
    let t_reduce = elapsed_ms(t);

    let m = config.nodes as u64;
    let tree_bytes = (tree.areas.saturating_sub(1) * 16 + boxes.len() * 16 * tree.dim) as u64
        + anchors.anchors().iter().map(|a| payload_bytes(&a.payload)).sum::<u64>();
    let bytes = Bytes {
        sampling: sampled.bytes,
        partitioning: tree_bytes * m.saturating_sub(1),
        shuffle: shuffle_bytes,
        total: sampled.bytes + tree_bytes * m.saturating_sub(1) + shuffle_bytes,
    };
    let report = JoinReport {
        config: config.clone(),
        objects: dataset.len(),
        effective: Effective { sample_size: pivots.len(), partitions: p, target_dim: n, sampling: sampled.effective_mode.clone() },
        sampling_mode_effective: sampled.effective_mode,
        warnings,
        nodes: sampled.nodes,
        global_confidence: sampled.global_confidence,
        gibbs_iterations: sampled.gibbs_iterations,
        rejections: sampled.rejections,
        layout: Layout {
            anchors: anchors.anchors().iter().map(|a| a.id).collect(),
            split_dims: tree.split_dims(),
            degenerate_splits: tree.degenerate_splits,
            label_clusters: clusters,
            tree,
        },
        cost,
        bytes,
        pairs: pairs.len(),
        duplicate_pairs,
        timings: Timings { sample_ms: t_sample, partition_ms: t_partition, map_ms: t_map, reduce_ms: t_reduce, total_ms: elapsed_ms(start) },
    };
    Ok(JoinResult { pairs, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Component, GenSpec, Skew};

    fn four_rows() -> Dataset {
        Dataset::from_vectors(vec![
            vec![16., 35., 5., 32., 31., 14., 10., 11.],
            vec![15., 33., 2., 35., 29., 13., 11., 12.],
            vec![10., 27., 8., 26., 37., 23., 15., 13.],
            vec![9., 30., 4., 25., 34., 25., 18., 14.],
        ])
        .unwrap()
    }

    fn blobs(count: usize, seed: u64) -> Dataset {
        let spec = GenSpec::Vector {
            count,
            components: vec![
                Component::uniform(0.5, Family::IndependentNormal, &[0.0, 1.0], 3).unwrap(),
                Component::uniform(0.5, Family::IndependentNormal, &[6.0, 2.0], 3).unwrap(),
            ],
            skew: Some(Skew { node_components: vec![0, 1] }),
        };
        generate(&spec, seed).unwrap().0
    }

    fn small(metric: MetricKind, delta: f64) -> ClusterConfig {
        ClusterConfig {
            nodes: 2,
            sample_size: 60,
            partitions: 6,
            target_dim: 3,
            metric,
            delta: Threshold::new(delta).unwrap(),
            ..ClusterConfig::default()
        }
    }

    #[test]
    fn four_row_join() {
        let ds = four_rows();
        let expect = vec![(0, 1), (2, 3)];
        let oracle: Vec<_> = brute_force_join(&ds, MetricKind::L1Norm, Threshold::new(30.0).unwrap()).unwrap().iter().map(Pair::key).collect();
        assert_eq!(oracle, expect);
        for p in 1..=2 {
            for sampling in [SamplingMode::Random, SamplingMode::DistributionAware, SamplingMode::Generative] {
                let cfg = ClusterConfig { nodes: 1, partitions: p, sampling, ..small(MetricKind::L1Norm, 30.0) };
                let r = run_join(&ds, &cfg).unwrap();
                assert_eq!(r.pairs.iter().map(Pair::key).collect::<Vec<_>>(), expect);
            }
        }
    }

    #[test]
    fn oracle_edge_cases() {
        let ds = four_rows();
        assert!(brute_force_join(&ds, MetricKind::L1Norm, Threshold::new(0.0).unwrap()).unwrap().is_empty());
        assert_eq!(brute_force_join(&ds, MetricKind::L1Norm, Threshold::new(1e6).unwrap()).unwrap().len(), 6);
        assert!(brute_force_join(&Dataset::new(vec![]).unwrap(), MetricKind::L1Norm, Threshold::new(1.0).unwrap()).unwrap().is_empty());
        assert!(brute_force_join(&ds, MetricKind::EditDistance, Threshold::new(1.0).unwrap()).is_err());
    }

    #[test]
    fn matches_oracle_across_modes() {
        let ds = blobs(400, 1);
        for delta in [0.0, 0.5, 2.0] {
            let truth = brute_force_join(&ds, MetricKind::Euclidean, Threshold::new(delta).unwrap()).unwrap();
            for sampling in [SamplingMode::Random, SamplingMode::DistributionAware, SamplingMode::Generative] {
                for partitioning in [PartitionMode::Iterative, PartitionMode::Learning] {
                    let cfg = ClusterConfig { sampling, partitioning, ..small(MetricKind::Euclidean, delta) };
                    let r = run_join(&ds, &cfg).unwrap();
                    assert_eq!(r.pairs, truth, "{sampling:?} {partitioning:?} δ={delta}");
                    assert!(r.report.cost.meets_balance_bound());
                }
            }
        }
    }

    #[test]
    fn strings_and_sets_match_oracle() {
        let (words, _) = generate(&GenSpec::String { count: 150, clusters: 5, length: 8, max_edits: 3, alphabet: "abc".into() }, 2).unwrap();
        let (sets, _) = generate(&GenSpec::Set { count: 150, clusters: 5, size: 6, vocabulary: 30, max_swaps: 3 }, 2).unwrap();
        for (ds, metric, delta) in [(&words, MetricKind::EditDistance, 2.0), (&sets, MetricKind::JaccardDistance, 0.4)] {
            let truth = brute_force_join(ds, metric, Threshold::new(delta).unwrap()).unwrap();
            assert!(!truth.is_empty());
            for sampling in [SamplingMode::Random, SamplingMode::Generative] {
                let r = run_join(ds, &ClusterConfig { sampling, partitioning: PartitionMode::Learning, ..small(metric, delta) }).unwrap();
                assert_eq!(r.pairs, truth);
                if sampling == SamplingMode::Generative {
                    assert_eq!(r.report.sampling_mode_effective, "uniform_node_local");
                }
            }
        }
    }

    #[test]
    fn serial_and_parallel_agree() {
        let ds = blobs(300, 5);
        for sampling in [SamplingMode::DistributionAware, SamplingMode::Generative] {
            let base = ClusterConfig { sampling, partitioning: PartitionMode::Learning, ..small(MetricKind::Euclidean, 1.0) };
            let a = run_join(&ds, &ClusterConfig { execution: Execution::Serial, ..base.clone() }).unwrap();
            let b = run_join(&ds, &ClusterConfig { execution: Execution::Parallel, ..base }).unwrap();
            assert_eq!(a.pairs, b.pairs);
            assert_eq!(a.report.cost, b.report.cost);
            assert_eq!(a.report.bytes, b.report.bytes);
            assert_eq!(a.report.layout, b.report.layout);
        }
    }

    #[test]
    fn generative_sampling_bytes_stay_below_distribution_aware() {
        let ds = blobs(2000, 3);
        let base = ClusterConfig { nodes: 4, sample_size: 800, partitions: 8, ..small(MetricKind::Euclidean, 0.5) };
        let gen = run_join(&ds, &ClusterConfig { sampling: SamplingMode::Generative, ..base.clone() }).unwrap();
        let dist = run_join(&ds, &ClusterConfig { sampling: SamplingMode::DistributionAware, ..base }).unwrap();
        assert_eq!(gen.report.sampling_mode_effective, "generative");
        assert!(gen.report.bytes.sampling < dist.report.bytes.sampling);
        // Independent of k for the generative mode.
        let gen_small = run_join(&ds, &ClusterConfig { sample_size: 100, sampling: SamplingMode::Generative, ..gen.report.config.clone() }).unwrap();
        assert_eq!(gen_small.report.bytes.sampling, gen.report.bytes.sampling);
    }

    #[test]
    fn fit_failures_degrade_to_uniform() {
        // Zero variance, and outside the positive families' support.
        let ds = Dataset::from_vectors(vec![vec![0.0, 0.0]; 500]).unwrap();
        let r = run_join(&ds, &ClusterConfig { sampling: SamplingMode::Generative, ..small(MetricKind::L1Norm, 0.0) }).unwrap();
        assert_eq!(r.pairs.len(), 500 * 499 / 2);
        assert_eq!(r.report.sampling_mode_effective, "distribution_aware");
        assert!(r.report.nodes.iter().all(|n| n.fit_error.is_some()));
        assert!(!r.report.warnings.is_empty());
    }

    #[test]
    fn sharding_is_round_robin_and_total() {
        let ds = blobs(101, 0);
        let nodes = shard(&ds, 4);
        assert_eq!(nodes.iter().map(|n| n.shard.len()).sum::<usize>(), 101);
        for n in &nodes {
            assert!(n.shard.iter().all(|o| o.id % 4 == n.node_id as u64));
        }
    }

    #[test]
    fn random_baseline() {
        let ds = blobs(50, 0);
        let nodes = shard(&ds, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = random_sample_baseline(&nodes, 50, &mut rng).unwrap();
        let mut ids: Vec<u64> = all.pivots.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        assert!(random_sample_baseline(&nodes, 51, &mut rng).is_err());
        let a = random_sample_baseline(&nodes, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_sample_baseline(&nodes, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_baseline_is_uniform() {
        let ds = blobs(20, 0);
        let nodes = shard(&ds, 3);
        let (k, trials) = (5usize, 10_000usize);
        let mut hits = [0usize; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..trials {
            for o in random_sample_baseline(&nodes, k, &mut rng).unwrap().pivots {
                hits[o.id as usize] += 1;
            }
        }
        let q = k as f64 / 20.0;
        let (mean, sd) = (trials as f64 * q, (trials as f64 * q * (1.0 - q)).sqrt());
        for h in hits {
            assert!((h as f64 - mean).abs() <= 5.0 * sd, "{h} vs {mean}");
        }
    }

    #[test]
    fn pairs_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pairs = vec![Pair { a: 0, b: 1, distance: 14.0 }, Pair { a: 2, b: 3, distance: 0.1 + 0.2 }];
        write_pairs(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id_a,id_b,distance\n0,1,14\n"));
        assert_eq!(read_pairs(&path).unwrap(), pairs);
        write_pairs(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "id_a,id_b,distance\n");
    }

    #[test]
    fn config_validation_and_json() {
        assert!(ClusterConfig { nodes: 0, ..ClusterConfig::default() }.validate().is_err());
        assert!(ClusterConfig { sample_size: 5, partitions: 6, ..ClusterConfig::default() }.validate().is_err());
        assert!(ClusterConfig { label_clusters: Some(0), ..ClusterConfig::default() }.validate().is_err());
        let d = ClusterConfig::default();
        assert_eq!((d.sample_size, d.partitions, d.target_dim, d.nodes), (3200, 60, 10, 15));
        let cfg: ClusterConfig = serde_json::from_str(r#"{"metric":"l1","delta":30,"sampling":"generative"}"#).unwrap();
        assert_eq!(cfg.metric, MetricKind::L1Norm);
        assert_eq!(cfg.sampling, SamplingMode::Generative);
        assert!(serde_json::from_str::<ClusterConfig>(r#"{"bogus":1}"#).is_err());
        let back: ClusterConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn report_round_trips() {
        let r = run_join(&four_rows(), &ClusterConfig { nodes: 1, partitions: 2, ..small(MetricKind::L1Norm, 30.0) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.report.write(dir.path().join("r.json")).unwrap();
        let back = JoinReport::read(dir.path().join("r.json")).unwrap();
        assert_eq!(back.cost, r.report.cost);
        assert_eq!(back.config, r.report.config);
        let again = run_join(&four_rows(), &back.config).unwrap();
        assert_eq!(again.pairs, r.pairs);
    }

    #[test]
    fn label_cluster_count_defaults_to_root_k_and_is_configurable() {
        let ds = blobs(300, 4);
        let base = ClusterConfig { partitioning: PartitionMode::Learning, sampling: SamplingMode::Random, sample_size: 50, partitions: 4, ..small(MetricKind::Euclidean, 1.0) };
        let r = run_join(&ds, &base).unwrap();
        assert_eq!(r.report.layout.label_clusters, Some(8));
        let r = run_join(&ds, &ClusterConfig { label_clusters: Some(3), ..base }).unwrap();
        assert_eq!(r.report.layout.label_clusters, Some(3));
    }
}
