//! Pivot sampling from fitted node summaries.
//!
//! Three samplers share the same inputs: a per-node [`NodeSummary`] holding
//! the fitted model, its goodness-of-fit confidence and the node size.
//!
//! * [`allocate_sample_sizes`] splits a global budget `k` across nodes in
//!   proportion to `N_i / c_i`, so poorly-fitted nodes contribute more.
//! * [`distribution_aware_sample`] draws real objects from one node,
//!   stratified by equal-probability slabs of the node's model.
//! * [`gibbs_sample`] synthesizes pivots from the mixture of node models
//!   without touching node data.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::distribution::{EfdModel, FitResult, MarginalCdf};
use crate::error::{Error, Result};
use crate::metrics::{DataObject, Payload};
use crate::special::chi_square_sf;

/// Floor applied to confidences before they are used as divisors.
pub const MIN_CONFIDENCE: f64 = 1e-6;
/// Consecutive rejections after which the Gibbs chain gives up.
pub const MAX_CONSECUTIVE_REJECTIONS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node_id: usize,
    /// `None` when fitting failed; such nodes are sampled uniformly.
    pub model: Option<EfdModel>,
    pub confidence: f64,
    pub cardinality: usize,
}

impl NodeSummary {
    pub fn new(node_id: usize, model: Option<EfdModel>, confidence: f64, cardinality: usize) -> Self {
        NodeSummary { node_id, model, confidence, cardinality }
    }

    pub fn effective_confidence(&self) -> f64 {
        if self.confidence.is_nan() {
            MIN_CONFIDENCE
        } else {
            self.confidence.clamp(MIN_CONFIDENCE, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Node(usize),
    Generated,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Node(i) => write!(f, "node:{i}"),
            Provenance::Generated => f.write_str("generated"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PivotSet {
    pub pivots: Vec<DataObject>,
    pub provenance: Vec<Provenance>,
}

impl PivotSet {
    pub fn len(&self) -> usize {
        self.pivots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivots.is_empty()
    }

    pub fn push(&mut self, object: DataObject, provenance: Provenance) {
        self.pivots.push(object);
        self.provenance.push(provenance);
    }

    pub fn extend(&mut self, other: PivotSet) {
        self.pivots.extend(other.pivots);
        self.provenance.extend(other.provenance);
    }

    /// Vector payloads of the pivots; empty when the pivots are not vectors.
    pub fn vectors(&self) -> Vec<&[f64]> {
        self.pivots.iter().filter_map(|o| o.payload.as_vector()).collect()
    }

    /// Same layout as a vector dataset with the provenance in a trailing column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        for (o, p) in self.pivots.iter().zip(&self.provenance) {
            let mut row = vec![o.id.to_string()];
            match &o.payload {
                Payload::Vector(v) => row.extend(v.iter().map(f64::to_string)),
                Payload::Text(s) => row.push(s.clone()),
                Payload::Tokens(t) => row.push(t.join(" ")),
            }
            row.push(p.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Splits `total` into integer parts proportional to `weights`; leftover
/// units go to the largest fractional remainders, lowest index first on ties.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return vec![];
    }
    if !(sum > 0.0) || !sum.is_finite() {
        // No usable weights: spread evenly.
        return largest_remainder(&vec![1.0; weights.len()], total);
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(assigned);
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-node sample counts proportional to `N_i / c_i`, summing to `k`.
pub fn allocate_sample_sizes(summaries: &[NodeSummary], k: usize) -> Vec<usize> {
    let weights: Vec<f64> = summaries
        .iter()
        .map(|s| s.cardinality as f64 / s.effective_confidence())
        .collect();
    largest_remainder(&weights, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumDraw {
    pub lo: f64,
    pub hi: f64,
    pub residents: usize,
    pub target: usize,
    pub drawn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedSample {
    /// Indices into the node data, grouped by stratum.
    pub indices: Vec<usize>,
    pub stratify_dim: usize,
    pub strata: Vec<StratumDraw>,
    pub rejections: u64,
    /// Strata whose target had to move elsewhere because they were empty.
    pub empty_strata: usize,
}

/// Stratified draw of `lc` objects from one node.
///
/// The widest dimension of the node model is cut into `⌊√lc⌋` slabs of equal
/// model probability; slab `j` receives `lc·P(slab j)` draws (largest
/// remainder). Draws are uniform with replacement among the slab's residents,
/// and each is rejected with probability `1 - c` and redrawn. Since a
/// rejection is independent of the drawn object, the run of rejections before
/// each acceptance is drawn directly from a geometric distribution.
pub fn distribution_aware_sample<V: AsRef<[f64]>, R: Rng + ?Sized>(
    node_data: &[V],
    summary: &NodeSummary,
    lc: usize,
    rng: &mut R,
) -> Result<StratifiedSample> {
    if lc == 0 {
        return Err(Error::Precondition("local sample size must be positive".into()));
    }
    if node_data.is_empty() {
        return Err(Error::Precondition("cannot sample from an empty node".into()));
    }
    let strata_count = (lc as f64).sqrt().floor().max(1.0) as usize;
    let (dim, edges) = match &summary.model {
        Some(model) if strata_count > 1 => {
            let dim = model.widest_dim();
            let marginal = &model.marginals()[dim];
            let mut edges = vec![f64::NEG_INFINITY];
            edges.extend((1..strata_count).map(|j| marginal.quantile(j as f64 / strata_count as f64)));
            edges.push(f64::INFINITY);
            (dim, edges)
        }
        _ => (0, vec![f64::NEG_INFINITY, f64::INFINITY]),
    };
    let slabs = edges.len() - 1;

    let mut residents: Vec<Vec<usize>> = vec![Vec::new(); slabs];
    for (i, v) in node_data.iter().enumerate() {
        let x = v.as_ref()[dim];
        // First edge strictly greater than x closes the slab.
        let slab = edges[1..].partition_point(|&e| e <= x).min(slabs - 1);
        residents[slab].push(i);
    }

    let probs: Vec<f64> = match &summary.model {
        Some(model) if slabs > 1 => {
            let m = &model.marginals()[dim];
            edges.windows(2).map(|w| m.cdf(w[1]) - m.cdf(w[0])).collect()
        }
        _ => vec![1.0],
    };
    let mut targets = largest_remainder(&probs, lc);
    let original = targets.clone();

    let mut empty_strata = 0;
    for j in 0..slabs {
        if targets[j] > 0 && residents[j].is_empty() {
            empty_strata += 1;
            let to = nearest_occupied(&residents, j).expect("node data is non-empty");
            targets[to] += targets[j];
            targets[j] = 0;
        }
    }

    let c = summary.effective_confidence();
    let skip = (c < 1.0).then(|| Geometric::new(c).expect("confidence lies in (0, 1)"));
    let mut indices = Vec::with_capacity(lc);
    let mut rejections = 0u64;
    for (j, &t) in targets.iter().enumerate() {
        for _ in 0..t {
            if let Some(g) = &skip {
                rejections = rejections.saturating_add(g.sample(rng));
            }
            let pick = residents[j][rng.random_range(0..residents[j].len())];
            indices.push(pick);
        }
    }

    let strata = (0..slabs)
        .map(|j| StratumDraw {
            lo: edges[j],
            hi: edges[j + 1],
            residents: residents[j].len(),
            target: original[j],
            drawn: targets[j],
        })
        .collect();
    Ok(StratifiedSample { indices, stratify_dim: dim, strata, rejections, empty_strata })
}

fn nearest_occupied(residents: &[Vec<usize>], from: usize) -> Option<usize> {
    (1..residents.len()).find_map(|step| {
        let below = from.checked_sub(step).filter(|&j| !residents[j].is_empty());
        let above = Some(from + step).filter(|&j| j < residents.len() && !residents[j].is_empty());
        below.or(above)
    })
}

/// State of the generative chain: point, node and accept flag.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub x: Vec<f64>,
    pub e: usize,
    pub c: bool,
}

/// `p(E = i | C = c) ∝ N_i · c_i^(-c)`.
pub fn node_given_selector(summaries: &[NodeSummary], c: bool) -> Vec<f64> {
    let raw: Vec<f64> = summaries
        .iter()
        .map(|s| {
            let n = s.cardinality as f64;
            if c {
                n / s.effective_confidence()
            } else {
                n
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GibbsRun {
    pub pivots: PivotSet,
    pub iterations: u64,
    pub rejections: u64,
    pub final_state: GibbsState,
}

/// Generates `k` pivots from the global mixture of node models.
///
/// Each step draws `e ~ p(E | C = c_prev)`, `c ~ Bernoulli(c_e)` and, on
/// acceptance, `x ~ F_e` by inverse-CDF per dimension. A rejected step keeps
/// the previous state. The initial state (uniform node, `c = 1`) is the
/// first pivot.
pub fn gibbs_sample<R: Rng + ?Sized>(summaries: &[NodeSummary], k: usize, rng: &mut R) -> Result<GibbsRun> {
    if k == 0 {
        return Err(Error::Precondition("sample size must be positive".into()));
    }
    if summaries.is_empty() {
        return Err(Error::Precondition("no node summaries".into()));
    }
    let models: Vec<&EfdModel> = summaries
        .iter()
        .map(|s| {
            s.model
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("node {} has no fitted model", s.node_id)))
        })
        .collect::<Result<_>>()?;
    let dim = models[0].marginals().len();
    if models.iter().any(|m| m.marginals().len() != dim) {
        return Err(Error::Precondition("node models disagree on dimension".into()));
    }
    let cumulative = |c: bool| {
        let mut acc = 0.0;
        node_given_selector(summaries, c)
            .into_iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect::<Vec<f64>>()
    };
    let cum = [cumulative(false), cumulative(true)];
    let accept: Vec<f64> = summaries.iter().map(NodeSummary::effective_confidence).collect();

    let e0 = rng.random_range(0..summaries.len());
    let mut state = GibbsState { x: models[e0].sample(rng), e: e0, c: true };
    let mut pivots = PivotSet::default();
    pivots.push(DataObject::vector(0, state.x.clone()), Provenance::Generated);

    let (mut iterations, mut rejections, mut streak) = (0u64, 0u64, 0u64);
    while pivots.len() < k {
        iterations += 1;
        let table = &cum[usize::from(state.c)];
        let u: f64 = rng.random();
        let e = table.partition_point(|&p| p <= u * table[table.len() - 1]).min(table.len() - 1);
        // C depends only on E, so X is drawn after the accept decision.
        let c = accept[e] >= 1.0 || rng.random::<f64>() < accept[e];
        if c {
            state = GibbsState { x: models[e].sample(rng), e, c };
            pivots.push(DataObject::vector(pivots.len() as u64, state.x.clone()), Provenance::Generated);
            streak = 0;
        } else {
            rejections += 1;
            streak += 1;
            if streak >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::ChainStall { rejections: streak, accepted: pivots.len(), requested: k });
            }
        }
    }
    Ok(GibbsRun { pivots, iterations, rejections, final_state: state })
}

/// Weighted mixture of node models, the reference for generated pivots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureModel {
    pub components: Vec<(f64, EfdModel)>,
}

impl MixtureModel {
    /// Components weighted by node size.
    pub fn from_summaries(summaries: &[NodeSummary]) -> Option<Self> {
        let components = summaries
            .iter()
            .map(|s| s.model.clone().map(|m| (s.cardinality as f64, m)))
            .collect::<Option<Vec<_>>>()?;
        Some(MixtureModel { components })
    }
}

impl MarginalCdf for MixtureModel {
    fn dim(&self) -> usize {
        self.components.first().map_or(0, |(_, m)| m.marginals().len())
    }

    fn marginal_cdf(&self, dim: usize, x: f64) -> f64 {
        let total: f64 = self.components.iter().map(|(w, _)| w).sum();
        self.components.iter().map(|(w, m)| w * m.marginal_cdf(dim, x)).sum::<f64>() / total
    }
}

/// Empirical marginals of a reference dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    columns: Vec<Vec<f64>>,
}

impl EmpiricalCdf {
    pub fn new<V: AsRef<[f64]>>(data: &[V]) -> Self {
        let dim = data.first().map_or(0, |v| v.as_ref().len());
        let columns = (0..dim)
            .map(|d| {
                let mut col: Vec<f64> = data.iter().map(|v| v.as_ref()[d]).collect();
                col.sort_by(f64::total_cmp);
                col
            })
            .collect();
        EmpiricalCdf { columns }
    }
}

impl MarginalCdf for EmpiricalCdf {
    fn dim(&self) -> usize {
        self.columns.len()
    }

    fn marginal_cdf(&self, dim: usize, x: f64) -> f64 {
        let col = &self.columns[dim];
        col.partition_point(|&v| v <= x) as f64 / col.len() as f64
    }
}

/// Largest per-dimension Kolmogorov–Smirnov distance between the samples'
/// empirical marginals and the reference marginals.
pub fn sampling_error<V: AsRef<[f64]>>(samples: &[V], reference: &dyn MarginalCdf) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("no samples".into()));
    }
    let k = samples.len() as f64;
    let mut worst: f64 = 0.0;
    for d in 0..reference.dim() {
        let mut col: Vec<f64> = samples.iter().map(|v| v.as_ref()[d]).collect();
        col.sort_by(f64::total_cmp);
        for (i, &x) in col.iter().enumerate() {
            let f = reference.marginal_cdf(d, x);
            let above = (i + 1) as f64 / k - f;
            let below = f - i as f64 / k;
            worst = worst.max(above).max(below);
        }
    }
    Ok(worst)
}

/// Smallest `k` with `2m·exp(-2kε²) ≤ fail_prob`.
pub fn required_sample_size(epsilon: f64, m: usize, fail_prob: f64) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Precondition(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(fail_prob > 0.0 && fail_prob < 1.0) {
        return Err(Error::Precondition(format!("failure probability must lie in (0, 1), got {fail_prob}")));
    }
    if m == 0 {
        return Err(Error::Precondition("dimension must be positive".into()));
    }
    let k = ((2.0 * m as f64 / fail_prob).ln() / (2.0 * epsilon * epsilon)).ceil();
    Ok(k.max(1.0) as usize)
}

/// p-value of the summed statistics under a chi-square with summed dof.
pub fn global_confidence(fits: &[FitResult]) -> Result<f64> {
    if fits.is_empty() {
        return Err(Error::Precondition("no fit results".into()));
    }
    let k: f64 = fits.iter().map(|f| f.k_star).sum();
    let dof: u32 = fits.iter().map(|f| f.dof).sum();
    Ok(chi_square_sf(k, dof))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::{fit_and_test, Family, Marginal};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn summary(id: usize, n: usize, c: f64) -> NodeSummary {
        NodeSummary::new(id, None, c, n)
    }

    fn std_normal(dim: usize) -> EfdModel {
        EfdModel::new(vec![Marginal::Normal { mean: 0.0, variance: 1.0 }; dim]).unwrap()
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_sample_sizes(&[summary(0, 100, 1.0), summary(1, 100, 1.0)], 10), vec![5, 5]);
        assert_eq!(allocate_sample_sizes(&[summary(0, 100, 0.5), summary(1, 300, 1.0)], 10), vec![4, 6]);
        let three = [summary(0, 7, 1.0), summary(1, 7, 1.0), summary(2, 7, 1.0)];
        assert_eq!(allocate_sample_sizes(&three, 10), vec![4, 3, 3]);
        // Zero confidence is clamped rather than dividing by zero.
        let counts = allocate_sample_sizes(&[summary(0, 10, 0.0), summary(1, 10, 1.0)], 100);
        assert_eq!(counts.iter().sum::<usize>(), 100);
        assert_eq!(counts[0], 100);
    }

    proptest! {
        #[test]
        fn allocation_sums_to_k_and_is_scale_invariant(
            nodes in prop::collection::vec((1usize..10_000, 0.0f64..1.0), 1..12),
            k in 1usize..5000,
            scale in 1usize..8,
        ) {
            let base: Vec<NodeSummary> = nodes.iter().enumerate().map(|(i, &(n, c))| summary(i, n, c)).collect();
            let scaled: Vec<NodeSummary> = nodes.iter().enumerate().map(|(i, &(n, c))| summary(i, n * (1 << scale), c)).collect();
            let a = allocate_sample_sizes(&base, k);
            prop_assert_eq!(a.iter().sum::<usize>(), k);
            prop_assert_eq!(a, allocate_sample_sizes(&scaled, k));
        }

        #[test]
        fn selector_conditionals_are_normalized(
            nodes in prop::collection::vec((1usize..1_000_000, 0.0f64..1.0), 1..20),
        ) {
            let s: Vec<NodeSummary> = nodes.iter().enumerate().map(|(i, &(n, c))| summary(i, n, c)).collect();
            for c in [false, true] {
                let total: f64 = node_given_selector(&s, c).iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn selector_zero_is_pure_size_weighting() {
        let s = [summary(0, 100, 0.2), summary(1, 300, 0.9)];
        assert_eq!(node_given_selector(&s, false), vec![0.25, 0.75]);
        let p1 = node_given_selector(&s, true);
        assert_abs_diff_eq!(p1[0], 500.0 / (500.0 + 300.0 / 0.9), epsilon = 1e-12);
    }

    #[test]
    fn stratified_single_stratum_and_exact_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64]).collect();
        let s = NodeSummary::new(0, None, 1.0, 50);
        let one = distribution_aware_sample(&data, &s, 1, &mut rng).unwrap();
        assert_eq!(one.indices.len(), 1);
        assert_eq!(one.strata.len(), 1);

        // Normal-fitted node, lc = 100 → 10 equal-probability strata of 10.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let normal: Vec<Vec<f64>> = (0..5000)
            .map(|_| std_normal(2).sample(&mut rng))
            .collect();
        let s = NodeSummary::new(0, Some(std_normal(2)), 1.0, normal.len());
        let out = distribution_aware_sample(&normal, &s, 100, &mut rng).unwrap();
        assert_eq!(out.indices.len(), 100);
        assert_eq!(out.rejections, 0);
        assert_eq!(out.strata.len(), 10);
        for st in &out.strata {
            assert_eq!(st.target, 10);
            assert_eq!(st.drawn, 10);
        }
        // Each drawn object lies in the stratum it was drawn for.
        let mut pos = 0;
        for st in &out.strata {
            for &i in &out.indices[pos..pos + st.drawn] {
                let x = normal[i][out.stratify_dim];
                assert!(x >= st.lo && x < st.hi);
            }
            pos += st.drawn;
        }
    }

    #[test]
    fn stratified_redistributes_empty_strata_and_counts_rejections() {
        // All data in the upper half while the model says symmetric.
        let data: Vec<Vec<f64>> = (1..=200).map(|i| vec![i as f64 / 50.0]).collect();
        let s = NodeSummary::new(0, Some(std_normal(1)), 0.25, data.len());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = distribution_aware_sample(&data, &s, 64, &mut rng).unwrap();
        assert_eq!(out.indices.len(), 64);
        assert!(out.empty_strata >= 4);
        assert!(out.rejections > 0);
        for st in &out.strata {
            if st.residents == 0 {
                assert_eq!(st.drawn, 0);
            }
        }
    }

    #[test]
    fn gibbs_accepts_everything_at_full_confidence() {
        let s = vec![NodeSummary::new(0, Some(std_normal(2)), 1.0, 10), NodeSummary::new(1, Some(std_normal(2)), 1.0, 30)];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let run = gibbs_sample(&s, 50, &mut rng).unwrap();
        assert_eq!(run.pivots.len(), 50);
        assert_eq!(run.iterations, 49);
        assert_eq!(run.rejections, 0);
        assert!(run.pivots.provenance.iter().all(|p| *p == Provenance::Generated));
    }

    #[test]
    fn gibbs_single_normal_node_mean() {
        let s = vec![NodeSummary::new(0, Some(std_normal(3)), 0.8, 1000)];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let run = gibbs_sample(&s, 3200, &mut rng).unwrap();
        assert_eq!(run.pivots.len(), 3200);
        let v = run.pivots.vectors();
        for d in 0..3 {
            let mean = v.iter().map(|x| x[d]).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 0.06, "dim {d} mean {mean}");
        }
    }

    #[test]
    fn gibbs_accepted_nodes_follow_cardinality() {
        // Accepted draws come from node i with probability ∝ N_i regardless of c_i.
        let a = EfdModel::new(vec![Marginal::Normal { mean: -10.0, variance: 1.0 }]).unwrap();
        let b = EfdModel::new(vec![Marginal::Normal { mean: 10.0, variance: 1.0 }]).unwrap();
        let s = vec![NodeSummary::new(0, Some(a), 0.1, 100), NodeSummary::new(1, Some(b), 0.9, 300)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let run = gibbs_sample(&s, 20_000, &mut rng).unwrap();
        let right = run.pivots.vectors().iter().filter(|x| x[0] > 0.0).count() as f64 / 20_000.0;
        assert!((right - 0.75).abs() < 0.02, "{right}");
        assert!(run.rejections > 0);
    }

    #[test]
    fn gibbs_stalls_when_every_node_is_rejected() {
        let s = vec![NodeSummary::new(0, Some(std_normal(1)), 0.0, 10)];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // A million draws at acceptance 1e-6 stall with probability ~e^-1 per
        // sample; asking for many samples makes a stall all but certain.
        let err = gibbs_sample(&s, 1000, &mut rng).unwrap_err();
        assert!(matches!(err, Error::ChainStall { .. }));
    }

    #[test]
    fn gibbs_is_seed_deterministic() {
        let s = vec![NodeSummary::new(0, Some(std_normal(2)), 0.3, 10), NodeSummary::new(1, Some(std_normal(2)), 0.7, 20)];
        let a = gibbs_sample(&s, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gibbs_sample(&s, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_error_examples() {
        let model = std_normal(1);
        let median = vec![vec![0.0]];
        assert_abs_diff_eq!(sampling_error(&median, &model).unwrap(), 0.5, epsilon = 1e-15);

        let k = 99;
        let quantiles: Vec<Vec<f64>> = (1..=k)
            .map(|i| vec![model.marginals()[0].quantile(i as f64 / (k as f64 + 1.0))])
            .collect();
        let d = sampling_error(&quantiles, &model).unwrap();
        assert!(d <= 1.0 / (k as f64 + 1.0) + 1e-12, "{d}");
    }

    #[test]
    fn sampling_error_shrinks_with_sample_size() {
        let s = vec![NodeSummary::new(0, Some(std_normal(2)), 1.0, 10)];
        let mut small = vec![];
        let mut large = vec![];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            small.push(sampling_error(&gibbs_sample(&s, 200, &mut rng).unwrap().pivots.vectors(), &s[0].model.clone().unwrap()).unwrap());
            large.push(sampling_error(&gibbs_sample(&s, 3200, &mut rng).unwrap().pivots.vectors(), &s[0].model.clone().unwrap()).unwrap());
        }
        small.sort_by(f64::total_cmp);
        large.sort_by(f64::total_cmp);
        assert!(large[10] < small[10]);
    }

    #[test]
    fn empirical_reference_matches_itself_closely() {
        let data: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64]).collect();
        let ecdf = EmpiricalCdf::new(&data);
        assert_abs_diff_eq!(sampling_error(&data, &ecdf).unwrap(), 1.0 / 1000.0, epsilon = 1e-12);
    }

    #[test]
    fn required_sample_size_examples() {
        assert_eq!(required_sample_size(0.05, 2, 0.05).unwrap(), 877);
        assert_eq!(required_sample_size(0.1, 2, 0.05).unwrap(), 220);
        assert!(required_sample_size(0.1, 1, 2.0).is_err());
        assert!(required_sample_size(0.0, 1, 0.1).is_err());
        let eps: f64 = 0.05;
        let step = (2f64.ln() / (2.0 * eps * eps)).ceil() as usize;
        let diff = required_sample_size(eps, 2, 0.05).unwrap() - required_sample_size(eps, 1, 0.05).unwrap();
        assert!(diff == step || diff == step - 1, "{diff} vs {step}");
    }

    #[test]
    fn global_confidence_examples() {
        let model = std_normal(1);
        let fit = |k_star: f64, dof: u32| FitResult { model: model.clone(), k_star, confidence: crate::distribution::confidence(k_star, dof), dof, cells: 20 };
        let one = fit(12.0, 17);
        assert_abs_diff_eq!(global_confidence(&[one.clone()]).unwrap(), one.confidence, epsilon = 1e-15);
        assert_eq!(global_confidence(&[fit(0.0, 17), fit(0.0, 17)]).unwrap(), 1.0);
        let g = global_confidence(&[fit(17.0, 17), fit(17.0, 17)]).unwrap();
        assert_abs_diff_eq!(g, 1.0 - statrs::function::gamma::gamma_lr(17.0, 17.0), epsilon = 1e-10);
        assert!((g - 0.47).abs() < 0.01, "{g}");
        assert!(global_confidence(&[]).is_err());
    }

    #[test]
    fn fitted_summaries_feed_the_mixture_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<Vec<f64>> = (0..2000).map(|_| std_normal(2).sample(&mut rng)).collect();
        let fit = fit_and_test(&data, &[Family::IndependentNormal], 20).unwrap();
        let s = vec![NodeSummary::new(0, Some(fit.model), fit.confidence, data.len())];
        let mix = MixtureModel::from_summaries(&s).unwrap();
        assert_abs_diff_eq!(mix.marginal_cdf(0, f64::INFINITY), 1.0);
        assert!(sampling_error(&data, &mix).unwrap() < 0.05);
    }
}
