//! Target-space partitioning.
//!
//! Pivots are embedded into `n` dimensions by their distances to `n` anchor
//! pivots. Because every metric obeys the triangle inequality, this map is
//! 1-Lipschitz in each coordinate, so two objects within δ in the origin space
//! are within δ per coordinate in the target space. A binary split tree over
//! the embedded pivots carves the target space into `p` areas; each object's
//! kernel area is the leaf it descends to, and it is also shipped to every area
//! whose bounding box, widened by δ, contains it.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{distance, DataObject, MetricKind};
use crate::par::{self, Execution};

#[derive(Debug, Clone, PartialEq)]
pub struct DimensionalPivots {
    anchors: Vec<DataObject>,
}

impl DimensionalPivots {
    pub fn new(anchors: Vec<DataObject>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Precondition("at least one anchor is required".into()));
        }
        Ok(DimensionalPivots { anchors })
    }

    /// `n` distinct pivots drawn uniformly without replacement.
    pub fn choose<R: Rng + ?Sized>(pivots: &[DataObject], n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 || n > pivots.len() {
            return Err(Error::Precondition(format!(
                "target dimension {n} must lie in 1..={}",
                pivots.len()
            )));
        }
        let mut idx = sample_indices(rng, pivots.len(), n).into_vec();
        idx.sort_unstable();
        DimensionalPivots::new(idx.into_iter().map(|i| pivots[i].clone()).collect())
    }

    pub fn anchors(&self) -> &[DataObject] {
        &self.anchors
    }

    pub fn dim(&self) -> usize {
        self.anchors.len()
    }
}

/// Coordinates are the distances from each anchor to `o`.
pub fn map_to_target(o: &DataObject, anchors: &DimensionalPivots, metric: MetricKind) -> Result<Vec<f64>> {
    anchors.anchors.iter().map(|a| distance(metric, a, o)).collect()
}

pub fn map_all(objects: &[DataObject], anchors: &DimensionalPivots, metric: MetricKind, exec: Execution) -> Result<Vec<Vec<f64>>> {
    par::map(exec, objects, |o| map_to_target(o, anchors, metric)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitNode {
    Leaf { area: usize },
    Split { dim: usize, value: f64, left: Box<SplitNode>, right: Box<SplitNode> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTree {
    pub root: SplitNode,
    pub areas: usize,
    pub dim: usize,
    /// Splits that could not give both sides enough pivots for their leaves.
    #[serde(default)]
    pub degenerate_splits: usize,
}

impl SplitTree {
    /// Leaf reached by descending: `< value` goes left, `≥ value` right.
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                SplitNode::Leaf { area } => return *area,
                SplitNode::Split { dim, value, left, right } => {
                    node = if x[*dim] < *value { left } else { right };
                }
            }
        }
    }

    /// Split dimensions in pre-order.
    pub fn split_dims(&self) -> Vec<usize> {
        fn walk(n: &SplitNode, out: &mut Vec<usize>) {
            if let SplitNode::Split { dim, left, right, .. } = n {
                out.push(*dim);
                walk(left, out);
                walk(right, out);
            }
        }
        let mut out = vec![];
        walk(&self.root, &mut out);
        out
    }

    /// Number of leaves below each child of every split, pre-order.
    pub fn leaf_counts(&self) -> Vec<(usize, usize)> {
        fn count(n: &SplitNode) -> usize {
            match n {
                SplitNode::Leaf { .. } => 1,
                SplitNode::Split { left, right, .. } => count(left) + count(right),
            }
        }
        fn walk(n: &SplitNode, out: &mut Vec<(usize, usize)>) {
            if let SplitNode::Split { left, right, .. } = n {
                out.push((count(left), count(right)));
                walk(left, out);
                walk(right, out);
            }
        }
        let mut out = vec![];
        walk(&self.root, &mut out);
        out
    }
}

/// Ranks split dimensions for one tree node, most preferred first.
pub trait DimensionOrder {
    fn rank(&mut self, points: &[Vec<f64>], members: &[usize], areas: usize) -> Vec<usize>;
}

/// Uniformly random first choice, then the remaining dimensions cyclically.
pub struct RandomDimensions<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> DimensionOrder for RandomDimensions<'_, R> {
    fn rank(&mut self, points: &[Vec<f64>], _members: &[usize], _areas: usize) -> Vec<usize> {
        let n = points[0].len();
        let start = self.0.random_range(0..n);
        (0..n).map(|i| (start + i) % n).collect()
    }
}

/// Always the given dimension first.
pub struct FixedDimension(pub usize);

impl DimensionOrder for FixedDimension {
    fn rank(&mut self, points: &[Vec<f64>], _members: &[usize], _areas: usize) -> Vec<usize> {
        let n = points[0].len();
        (0..n).map(|i| (self.0 + i) % n).collect()
    }
}

/// Highest gain ratio of the fractile split first; lowest index on ties.
pub struct GainRatioDimensions<'a> {
    pub labels: &'a [usize],
}

impl DimensionOrder for GainRatioDimensions<'_> {
    fn rank(&mut self, points: &[Vec<f64>], members: &[usize], areas: usize) -> Vec<usize> {
        let n = points[0].len();
        let parent: Vec<usize> = members.iter().map(|&i| self.labels[i]).collect();
        let mut scored: Vec<(usize, bool, f64)> = (0..n)
            .map(|d| {
                let split = fractile_split(points, members, d, areas);
                let (l, r): (Vec<usize>, Vec<usize>) = members
                    .iter()
                    .map(|&i| (points[i][d] < split.value, self.labels[i]))
                    .fold((vec![], vec![]), |(mut l, mut r), (left, lab)| {
                        if left {
                            l.push(lab)
                        } else {
                            r.push(lab)
                        }
                        (l, r)
                    });
                (d, split.valid, gain_ratio(&parent, &[&l, &r]))
            })
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(d, ..)| d).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct FractileSplit {
    value: f64,
    valid: bool,
}

/// Split value for `areas` leaves along `dim`: the coordinate at 0-based
/// sorted rank `⌈count·⌈areas/2⌉/areas⌉`, so `⌈areas/2⌉/areas` of distinct
/// pivots fall left. With tied coordinates the nearest distinct value that
/// still leaves each side at least as many pivots as leaves is used.
fn fractile_split(points: &[Vec<f64>], members: &[usize], dim: usize, areas: usize) -> FractileSplit {
    let mut vals: Vec<f64> = members.iter().map(|&i| points[i][dim]).collect();
    vals.sort_by(f64::total_cmp);
    let count = vals.len();
    let (need_left, need_right) = (areas.div_ceil(2), areas / 2);
    let rank = (count * need_left).div_ceil(areas);
    if rank >= count {
        return FractileSplit { value: f64::INFINITY, valid: count >= areas && need_right == 0 };
    }
    let value = vals[rank];
    let left_of = |v: f64| vals.partition_point(|&x| x < v);
    let ok = |v: f64| {
        let l = left_of(v);
        l >= need_left && count - l >= need_right
    };
    if ok(value) {
        return FractileSplit { value, valid: true };
    }
    // Distinct candidate thresholds, nearest to the target rank first.
    let mut best: Option<(usize, f64)> = None;
    let mut i = 0;
    while i < count {
        let v = vals[i];
        if ok(v) {
            let gap = i.abs_diff(rank);
            if best.is_none_or(|(g, _)| gap < g) {
                best = Some((gap, v));
            }
        }
        while i < count && vals[i] == v {
            i += 1;
        }
    }
    match best {
        Some((_, v)) => FractileSplit { value: v, valid: true },
        None => FractileSplit { value, valid: false },
    }
}

fn build_node(
    points: &[Vec<f64>],
    members: Vec<usize>,
    areas: usize,
    order: &mut dyn DimensionOrder,
    next_area: &mut usize,
    degenerate: &mut usize,
) -> SplitNode {
    if areas == 1 {
        let area = *next_area;
        *next_area += 1;
        return SplitNode::Leaf { area };
    }
    let ranked = if members.is_empty() { vec![0] } else { order.rank(points, &members, areas) };
    let mut chosen = None;
    for &d in &ranked {
        let s = if members.is_empty() { FractileSplit { value: f64::INFINITY, valid: false } } else { fractile_split(points, &members, d, areas) };
        if s.valid {
            chosen = Some((d, s.value));
            break;
        }
        chosen.get_or_insert((d, s.value));
    }
    let (dim, value) = chosen.expect("at least one dimension");
    let (left, right): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| points[i][dim] < value);
    if left.len() < areas.div_ceil(2) || right.len() < areas / 2 {
        *degenerate += 1;
    }
    let left = build_node(points, left, areas.div_ceil(2), order, next_area, degenerate);
    let right = build_node(points, right, areas / 2, order, next_area, degenerate);
    SplitNode::Split { dim, value, left: Box::new(left), right: Box::new(right) }
}

/// Split tree with `p` leaves; `order` picks the dimension at every node.
pub fn build_tree(points: &[Vec<f64>], p: usize, order: &mut dyn DimensionOrder) -> Result<SplitTree> {
    if p == 0 {
        return Err(Error::Precondition("partition count must be positive".into()));
    }
    if points.len() < p {
        return Err(Error::Precondition(format!("{} pivots cannot seed {p} areas", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|v| v.len() != dim) {
        return Err(Error::Precondition("pivots must share a positive dimension".into()));
    }
    let (mut next, mut degenerate) = (0, 0);
    let root = build_node(points, (0..points.len()).collect(), p, order, &mut next, &mut degenerate);
    Ok(SplitTree { root, areas: p, dim, degenerate_splits: degenerate })
}

/// Random dimension at each node.
pub fn iterative_partition<R: Rng + ?Sized>(points: &[Vec<f64>], p: usize, rng: &mut R) -> Result<SplitTree> {
    build_tree(points, p, &mut RandomDimensions(rng))
}

/// Dimension maximizing the gain ratio of the pivot labels at each node.
pub fn learning_partition(points: &[Vec<f64>], labels: &[usize], p: usize) -> Result<SplitTree> {
    if labels.len() != points.len() {
        return Err(Error::Precondition(format!("{} labels for {} pivots", labels.len(), points.len())));
    }
    build_tree(points, p, &mut GainRatioDimensions { labels })
}

/// Shannon entropy (natural log) of a label multiset.
pub fn entropy_cost(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Precondition("entropy of an empty label multiset".into()));
    }
    Ok(entropy(labels))
}

fn entropy(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut freq: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *freq.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    let mut counts: Vec<usize> = freq.into_values().collect();
    counts.sort_unstable();
    counts
        .into_iter()
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Information gain of the split divided by the split's own entropy.
/// Zero when fewer than two children are non-empty.
pub fn gain_ratio(parent: &[usize], children: &[&[usize]]) -> f64 {
    let n = parent.len() as f64;
    let nonempty: Vec<&&[usize]> = children.iter().filter(|c| !c.is_empty()).collect();
    if nonempty.len() < 2 || parent.is_empty() {
        return 0.0;
    }
    let mut gain = entropy(parent);
    let mut split = 0.0;
    for c in nonempty {
        let w = c.len() as f64 / n;
        gain -= w * entropy(c);
        split -= w * w.ln();
    }
    if split <= 0.0 {
        0.0
    } else {
        (gain / split).max(0.0)
    }
}

/// Average-linkage agglomerative clustering of the pivots in origin space,
/// cut at `clusters` groups. Labels are numbered by first appearance.
pub fn label_pivots(pivots: &[DataObject], metric: MetricKind, clusters: usize, exec: Execution) -> Result<Vec<usize>> {
    let k = pivots.len();
    if clusters == 0 || clusters > k {
        return Err(Error::Precondition(format!("cluster count {clusters} must lie in 1..={k}")));
    }
    if clusters == k {
        return Ok((0..k).collect());
    }
    let rows: Vec<Vec<f64>> = par::map_range(exec, k, |i| {
        (i + 1..k).map(|j| distance(metric, &pivots[i], &pivots[j])).collect::<Result<Vec<f64>>>()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut dist = CondensedMatrix::new(k);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            dist.set(i, i + 1 + off, d);
        }
    }
    let merges = average_linkage(dist);
    Ok(cut_dendrogram(k, merges, clusters))
}

struct CondensedMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CondensedMatrix {
    fn new(n: usize) -> Self {
        CondensedMatrix { n, data: vec![0.0; n * (n - 1) / 2] }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.index(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.data[idx] = v;
    }
}

struct Merge {
    a: usize,
    b: usize,
    height: f64,
}

// Nearest-neighbour chain; valid because average linkage is reducible.
fn average_linkage(mut dist: CondensedMatrix) -> Vec<Merge> {
    let n = dist.n;
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut merges = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("two clusters remain"));
        }
        let a = *chain.last().unwrap();
        let prev = chain.len().checked_sub(2).map(|i| chain[i]);
        let mut best = prev;
        let mut best_d = prev.map_or(f64::INFINITY, |p| dist.get(a, p));
        for c in 0..n {
            if !active[c] || c == a {
                continue;
            }
            let d = dist.get(a, c);
            if d < best_d || (d == best_d && best.is_none_or(|b| Some(b) != prev && c < b)) {
                best = Some(c);
                best_d = d;
            }
        }
        let b = best.expect("another active cluster");
        if Some(b) == prev {
            chain.pop();
            chain.pop();
            let (keep, gone) = if a < b { (a, b) } else { (b, a) };
            merges.push(Merge { a: keep, b: gone, height: best_d });
            let (sk, sg) = (size[keep] as f64, size[gone] as f64);
            for c in 0..n {
                if active[c] && c != keep && c != gone {
                    let d = (sk * dist.get(keep, c) + sg * dist.get(gone, c)) / (sk + sg);
                    dist.set(keep, c, d);
                }
            }
            active[gone] = false;
            size[keep] += size[gone];
            remaining -= 1;
        } else {
            chain.push(b);
        }
    }
    merges
}

fn cut_dendrogram(n: usize, mut merges: Vec<Merge>, clusters: usize) -> Vec<usize> {
    merges.sort_by(|x, y| x.height.total_cmp(&y.height));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for m in merges.iter().take(n - clusters) {
        let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut names: HashMap<usize, usize> = HashMap::new();
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            let next = names.len();
            *names.entry(r).or_insert(next)
        })
        .collect()
}

/// Bounding box of one area in target space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaBox {
    pub area: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AreaBox {
    pub fn empty(area: usize, dim: usize) -> Self {
        AreaBox { area, lo: vec![f64::INFINITY; dim], hi: vec![f64::NEG_INFINITY; dim] }
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| l > h)
    }

    pub fn include(&mut self, x: &[f64]) {
        for ((l, h), &v) in self.lo.iter_mut().zip(self.hi.iter_mut()).zip(x) {
            *l = l.min(v);
            *h = h.max(v);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_expanded(x, 0.0)
    }

    /// Membership in `Π [lo - δ, hi + δ]`.
    pub fn contains_expanded(&self, x: &[f64], delta: f64) -> bool {
        self.lo.iter().zip(&self.hi).zip(x).all(|((&l, &h), &v)| v >= l - delta && v <= h + delta)
    }
}

/// Per-leaf bounding boxes of the pivots routed to each leaf.
pub fn build_boxes(tree: &SplitTree, points: &[Vec<f64>]) -> Result<Vec<AreaBox>> {
    let boxes = boxes_from(tree, points.iter().map(Vec::as_slice));
    if let Some(b) = boxes.iter().find(|b| b.is_empty()) {
        return Err(Error::Precondition(format!("area {} received no pivots", b.area)));
    }
    Ok(boxes)
}

/// Like [`build_boxes`], but empty areas are allowed.
pub fn boxes_from<'a>(tree: &SplitTree, points: impl IntoIterator<Item = &'a [f64]>) -> Vec<AreaBox> {
    let mut boxes: Vec<AreaBox> = (0..tree.areas).map(|h| AreaBox::empty(h, tree.dim)).collect();
    for x in points {
        boxes[tree.leaf_of(x)].include(x);
    }
    boxes
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub kernel: usize,
    /// Sorted; always contains `kernel`.
    pub whole: Vec<usize>,
}

pub fn assign(target: &[f64], tree: &SplitTree, boxes: &[AreaBox], delta: f64) -> PartitionAssignment {
    let kernel = tree.leaf_of(target);
    let mut whole: Vec<usize> = boxes
        .iter()
        .filter(|b| b.area == kernel || b.contains_expanded(target, delta))
        .map(|b| b.area)
        .collect();
    if !whole.contains(&kernel) {
        whole.push(kernel);
        whole.sort_unstable();
    }
    PartitionAssignment { kernel, whole }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub kernel_sizes: Vec<u64>,
    pub whole_sizes: Vec<u64>,
    pub inner_cost: u128,
    pub outer_cost: u128,
    pub total_cost: u128,
    /// Pairs verified by each reducer: `|V|·(|W|-|V|) + |V|·(|V|-1)/2`.
    pub verifications: Vec<u64>,
    pub total_verifications: u64,
    pub max_verifications: u64,
    pub mean_verifications: f64,
    pub stdev_verifications: f64,
}

impl CostReport {
    pub fn from_sizes(kernel_sizes: Vec<u64>, whole_sizes: Vec<u64>) -> Self {
        assert_eq!(kernel_sizes.len(), whole_sizes.len());
        let mut inner = 0u128;
        let mut outer = 0u128;
        let mut verifications = Vec::with_capacity(kernel_sizes.len());
        for (&v, &w) in kernel_sizes.iter().zip(&whole_sizes) {
            debug_assert!(w >= v);
            inner += (v as u128) * (v as u128);
            outer += (v as u128) * ((w - v) as u128);
            verifications.push(v * (w - v) + v * v.saturating_sub(1) / 2);
        }
        let total_verifications = verifications.iter().sum();
        let max_verifications = verifications.iter().copied().max().unwrap_or(0);
        let p = verifications.len().max(1) as f64;
        let mean = total_verifications as f64 / p;
        let var = verifications.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / p;
        CostReport {
            kernel_sizes,
            whole_sizes,
            inner_cost: inner,
            outer_cost: outer,
            total_cost: inner + outer,
            verifications,
            total_verifications,
            max_verifications,
            mean_verifications: mean,
            stdev_verifications: var.sqrt(),
        }
    }

    pub fn object_count(&self) -> u64 {
        self.kernel_sizes.iter().sum()
    }

    /// `inner ≥ N²/p`, compared exactly as `inner·p ≥ N²`.
    pub fn meets_balance_bound(&self) -> bool {
        let n = self.object_count() as u128;
        self.inner_cost * self.kernel_sizes.len() as u128 >= n * n
    }

    /// `inner = N²/p` exactly.
    pub fn attains_balance_bound(&self) -> bool {
        let n = self.object_count() as u128;
        self.inner_cost * self.kernel_sizes.len() as u128 == n * n
    }
}

pub fn cost_report(assignments: &[PartitionAssignment], areas: usize) -> CostReport {
    let mut kernel = vec![0u64; areas];
    let mut whole = vec![0u64; areas];
    for a in assignments {
        kernel[a.kernel] += 1;
        for &h in &a.whole {
            whole[h] += 1;
        }
    }
    CostReport::from_sizes(kernel, whole)
}
