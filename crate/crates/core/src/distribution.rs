//! Per-dimension exponential-family models, maximum-likelihood fitting and
//! Pearson chi-square goodness of fit.
//!
//! A model is a product of independent univariate marginals from one family.
//! Goodness of fit is measured on a 1-D grid of `t` equal-probability cells
//! laid along the dimension with the largest fitted variance, so every cell
//! has probability exactly `1/t` under the fitted model and no cell can have
//! zero expected count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{self, chi_square_sf, digamma, gamma_p, gamma_p_inverse, trigamma};

pub const DEFAULT_CELL_COUNT: usize = 20;
const GAMMA_MAX_ITER: usize = 100;
const GAMMA_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(alias = "normal")]
    IndependentNormal,
    #[serde(alias = "exponential")]
    IndependentExponential,
    #[serde(alias = "gamma")]
    IndependentGamma,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::IndependentNormal, Family::IndependentExponential, Family::IndependentGamma];

    /// Free scalar parameters per dimension.
    pub fn param_count(self) -> usize {
        match self {
            Family::IndependentNormal | Family::IndependentGamma => 2,
            Family::IndependentExponential => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::IndependentNormal => "normal",
            Family::IndependentExponential => "exponential",
            Family::IndependentGamma => "gamma",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "independent_normal" | "gaussian" => Ok(Family::IndependentNormal),
            "exponential" | "independent_exponential" | "exp" => Ok(Family::IndependentExponential),
            "gamma" | "independent_gamma" => Ok(Family::IndependentGamma),
            other => Err(Error::Input(format!("unknown family `{other}`"))),
        }
    }
}

/// One univariate marginal, in conventional parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    Normal { mean: f64, variance: f64 },
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl Marginal {
    pub fn family(&self) -> Family {
        match self {
            Marginal::Normal { .. } => Family::IndependentNormal,
            Marginal::Exponential { .. } => Family::IndependentExponential,
            Marginal::Gamma { .. } => Family::IndependentGamma,
        }
    }

    pub fn from_params(family: Family, p: &[f64]) -> Result<Self> {
        let m = match (family, p) {
            (Family::IndependentNormal, &[mean, variance]) => Marginal::Normal { mean, variance },
            (Family::IndependentExponential, &[rate]) => Marginal::Exponential { rate },
            (Family::IndependentGamma, &[shape, rate]) => Marginal::Gamma { shape, rate },
            _ => {
                return Err(Error::Input(format!(
                    "{} marginal takes {} parameters, got {}",
                    family.name(),
                    family.param_count(),
                    p.len()
                )))
            }
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Marginal::Normal { mean, variance } => mean.is_finite() && variance.is_finite() && variance > 0.0,
            Marginal::Exponential { rate } => rate.is_finite() && rate > 0.0,
            Marginal::Gamma { shape, rate } => shape.is_finite() && rate.is_finite() && shape > 0.0 && rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("parameters outside the valid domain: {self:?}")))
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Marginal::Normal { mean, variance } => vec![mean, variance],
            Marginal::Exponential { rate } => vec![rate],
            Marginal::Gamma { shape, rate } => vec![shape, rate],
        }
    }

    /// Natural parameters η of the exponential-family form `h(x) exp(η·T(x) - α(η))`.
    pub fn natural_params(&self) -> Vec<f64> {
        match *self {
            Marginal::Normal { mean, variance } => vec![mean / variance, -0.5 / variance],
            Marginal::Exponential { rate } => vec![-rate],
            Marginal::Gamma { shape, rate } => vec![shape - 1.0, -rate],
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Normal { mean, .. } => mean,
            Marginal::Exponential { rate } => 1.0 / rate,
            Marginal::Gamma { shape, rate } => shape / rate,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::Normal { variance, .. } => variance,
            Marginal::Exponential { rate } => 1.0 / (rate * rate),
            Marginal::Gamma { shape, rate } => shape / (rate * rate),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, variance } => {
                let z = x - mean;
                (-z * z / (2.0 * variance)).exp() / (2.0 * std::f64::consts::PI * variance).sqrt()
            }
            Marginal::Exponential { rate } => {
                if x < 0.0 {
                    0.0
                } else {
                    rate * (-rate * x).exp()
                }
            }
            Marginal::Gamma { shape, rate } => {
                if x < 0.0 || (x == 0.0 && shape > 1.0) {
                    0.0
                } else if x == 0.0 {
                    if shape == 1.0 {
                        rate
                    } else {
                        f64::INFINITY
                    }
                } else {
                    (shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - statrs::function::gamma::ln_gamma(shape))
                        .exp()
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 1.0;
        }
        if x == f64::NEG_INFINITY {
            return 0.0;
        }
        match *self {
            Marginal::Normal { mean, variance } => special::std_normal_cdf((x - mean) / variance.sqrt()),
            Marginal::Exponential { rate } => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-rate * x).exp_m1()
                }
            }
            Marginal::Gamma { shape, rate } => gamma_p(shape, rate * x),
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, variance } => mean + variance.sqrt() * special::std_normal_quantile(u),
            Marginal::Exponential { rate } => {
                if u >= 1.0 {
                    f64::INFINITY
                } else if u <= 0.0 {
                    0.0
                } else {
                    -(-u).ln_1p() / rate
                }
            }
            Marginal::Gamma { shape, rate } => gamma_p_inverse(shape, u) / rate,
        }
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // (0, 1) open interval keeps Normal draws finite.
        let u = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        };
        self.quantile(u)
    }
}

/// Anything that exposes per-dimension marginal CDFs.
pub trait MarginalCdf {
    fn dim(&self) -> usize;
    fn marginal_cdf(&self, dim: usize, x: f64) -> f64;
}

/// Product of independent marginals from one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct EfdModel {
    family: Family,
    marginals: Vec<Marginal>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    family: Family,
    params: Vec<Vec<f64>>,
    #[serde(default, skip_deserializing)]
    eta: Vec<Vec<f64>>,
}

impl TryFrom<ModelRepr> for EfdModel {
    type Error = Error;

    fn try_from(r: ModelRepr) -> Result<Self> {
        let marginals = r
            .params
            .iter()
            .map(|p| Marginal::from_params(r.family, p))
            .collect::<Result<Vec<_>>>()?;
        EfdModel::new(marginals)
    }
}

impl From<EfdModel> for ModelRepr {
    fn from(m: EfdModel) -> Self {
        ModelRepr { family: m.family, params: m.params(), eta: m.eta() }
    }
}

impl EfdModel {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self> {
        let Some(first) = marginals.first() else {
            return Err(Error::Input("a model needs at least one dimension".into()));
        };
        let family = first.family();
        for m in &marginals {
            if m.family() != family {
                return Err(Error::Input("all marginals of a model must share one family".into()));
            }
            m.validate()?;
        }
        Ok(EfdModel { family, marginals })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn params(&self) -> Vec<Vec<f64>> {
        self.marginals.iter().map(Marginal::params).collect()
    }

    /// Natural parameter vector per dimension.
    pub fn eta(&self) -> Vec<Vec<f64>> {
        self.marginals.iter().map(Marginal::natural_params).collect()
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.marginals.iter().zip(x).map(|(m, &v)| m.pdf(v)).product()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginals.iter().map(|m| m.sample(rng)).collect()
    }

    /// Dimension with the largest model variance; lowest index on ties.
    pub fn widest_dim(&self) -> usize {
        let mut best = 0;
        for (d, m) in self.marginals.iter().enumerate() {
            if m.variance() > self.marginals[best].variance() {
                best = d;
            }
        }
        best
    }
}

impl MarginalCdf for EfdModel {
    fn dim(&self) -> usize {
        self.marginals.len()
    }

    fn marginal_cdf(&self, dim: usize, x: f64) -> f64 {
        self.marginals[dim].cdf(x)
    }
}

/// Half-open interval `[lo, hi)`; an infinite `hi` is included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const ALL: Interval = Interval { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && (x < self.hi || self.hi == f64::INFINITY)
    }
}

/// Axis-aligned region: one interval per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub bounds: Vec<Interval>,
}

impl Cell {
    pub fn whole(dim: usize) -> Self {
        Cell { bounds: vec![Interval::ALL; dim] }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.bounds.iter().zip(x).all(|(b, &v)| b.contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGrid {
    cells: Vec<Cell>,
}

impl CellGrid {
    /// Caller guarantees the cells are disjoint and cover the space.
    pub fn new(cells: Vec<Cell>) -> Self {
        CellGrid { cells }
    }

    /// `t` slabs along `dim` with probability `1/t` each under `model`.
    pub fn equal_probability(model: &EfdModel, dim: usize, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::Precondition("cell count must be positive".into()));
        }
        if dim >= model.dim() {
            return Err(Error::Precondition(format!("dimension {dim} out of range")));
        }
        let marginal = &model.marginals[dim];
        let mut edges = Vec::with_capacity(t + 1);
        edges.push(f64::NEG_INFINITY);
        edges.extend((1..t).map(|j| marginal.quantile(j as f64 / t as f64)));
        edges.push(f64::INFINITY);
        let cells = edges
            .windows(2)
            .map(|w| {
                let mut c = Cell::whole(model.dim());
                c.bounds[dim] = Interval { lo: w[0], hi: w[1] };
                c
            })
            .collect();
        Ok(CellGrid { cells })
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(x))
    }
}

pub fn cell_probability(model: &EfdModel, cell: &Cell) -> f64 {
    model
        .marginals
        .iter()
        .zip(&cell.bounds)
        .map(|(m, b)| (m.cdf(b.hi) - m.cdf(b.lo)).max(0.0))
        .product::<f64>()
        .clamp(0.0, 1.0)
}

fn check_data<V: AsRef<[f64]>>(data: &[V]) -> Result<usize> {
    let Some(first) = data.first() else {
        return Err(Error::Precondition("cannot fit an empty sample".into()));
    };
    let dim = first.as_ref().len();
    if dim == 0 {
        return Err(Error::Precondition("zero-dimensional data".into()));
    }
    for v in data {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch { left: dim, right: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite value in sample".into()));
        }
    }
    Ok(dim)
}

/// Maximum-likelihood fit, one dimension at a time.
pub fn fit_mle<V: AsRef<[f64]>>(data: &[V], family: Family) -> Result<EfdModel> {
    let dim = check_data(data)?;
    let n = data.len() as f64;
    let mut marginals = Vec::with_capacity(dim);
    for d in 0..dim {
        let col = || data.iter().map(move |v| v.as_ref()[d]);
        let mean = col().sum::<f64>() / n;
        let m = match family {
            Family::IndependentNormal => {
                let variance = col().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                if !(variance > 0.0) {
                    return Err(Error::Degenerate(format!("dimension {d} has zero variance")));
                }
                Marginal::Normal { mean, variance }
            }
            Family::IndependentExponential => {
                if let Some(x) = col().find(|&x| x < 0.0) {
                    return Err(Error::Support { family: family.name(), detail: format!("negative value {x} in dimension {d}") });
                }
                if !(mean > 0.0) {
                    return Err(Error::Degenerate(format!("dimension {d} is identically zero")));
                }
                Marginal::Exponential { rate: 1.0 / mean }
            }
            Family::IndependentGamma => {
                if let Some(x) = col().find(|&x| x <= 0.0) {
                    return Err(Error::Support { family: family.name(), detail: format!("non-positive value {x} in dimension {d}") });
                }
                let mean_log = col().map(f64::ln).sum::<f64>() / n;
                let variance = col().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let (shape, rate) = fit_gamma(mean, mean_log, variance)
                    .map_err(|e| match e {
                        Error::Degenerate(msg) => Error::Degenerate(format!("dimension {d}: {msg}")),
                        other => other,
                    })?;
                Marginal::Gamma { shape, rate }
            }
        };
        marginals.push(m);
    }
    EfdModel::new(marginals)
}

/// Newton iteration on `ln α - ψ(α) = ln(mean) - mean(ln x)`, started from
/// the method-of-moments shape.
fn fit_gamma(mean: f64, mean_log: f64, variance: f64) -> Result<(f64, f64)> {
    let s = mean.ln() - mean_log;
    if !(s > 1e-14) || !(variance > 0.0) {
        return Err(Error::Degenerate("constant sample".into()));
    }
    let mut shape = mean * mean / variance;
    if !shape.is_finite() || shape <= 0.0 {
        shape = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    }
    let mut residual = f64::INFINITY;
    for _ in 0..GAMMA_MAX_ITER {
        residual = shape.ln() - digamma(shape) - s;
        if residual.abs() < GAMMA_TOL {
            return Ok((shape, shape / mean));
        }
        let slope = 1.0 / shape - trigamma(shape);
        let mut next = shape - residual / slope;
        if !(next > 0.0) || !next.is_finite() {
            next = shape / 2.0;
        }
        shape = next;
    }
    Err(Error::NonConvergence { iterations: GAMMA_MAX_ITER, residual })
}

/// Pearson statistic `Σ (ν_j - N q_j)² / (N q_j)` over the grid.
pub fn test_statistic<V: AsRef<[f64]>>(data: &[V], model: &EfdModel, grid: &CellGrid) -> Result<f64> {
    let w = model.family.param_count();
    if grid.len() < w + 2 {
        return Err(Error::Precondition(format!(
            "{} cells leave no degrees of freedom for {} fitted parameters (need at least {})",
            grid.len(),
            w,
            w + 2
        )));
    }
    let n = data.len();
    let mut counts = vec![0usize; grid.len()];
    for v in data {
        let v = v.as_ref();
        if v.len() != model.dim() {
            return Err(Error::DimensionMismatch { left: model.dim(), right: v.len() });
        }
        match grid.locate(v) {
            Some(j) => counts[j] += 1,
            None => return Err(Error::Precondition("cell grid does not cover the sample".into())),
        }
    }
    let mut k = 0.0;
    for (j, (cell, &count)) in grid.cells.iter().zip(&counts).enumerate() {
        let q = cell_probability(model, cell);
        if q <= 0.0 {
            if count > 0 {
                return Err(Error::ModelMismatch { cell: j, count });
            }
            continue;
        }
        let expected = n as f64 * q;
        let diff = count as f64 - expected;
        k += diff * diff / expected;
    }
    Ok(k)
}

/// Goodness-of-fit p-value: the chi-square upper tail at `k_star`.
pub fn confidence(k_star: f64, dof: u32) -> f64 {
    chi_square_sf(k_star.max(0.0), dof)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: EfdModel,
    pub k_star: f64,
    pub confidence: f64,
    pub dof: u32,
    /// Cell count used by the test.
    pub cells: usize,
}

/// Fits each candidate family, tests it on an equal-probability grid of `t`
/// cells, and keeps the one with the highest confidence (first wins ties).
pub fn fit_and_test<V: AsRef<[f64]>>(data: &[V], families: &[Family], t: usize) -> Result<FitResult> {
    if families.is_empty() {
        return Err(Error::Precondition("no candidate families".into()));
    }
    if data.len() < 10 * t {
        return Err(Error::Precondition(format!(
            "chi-square test with {t} cells needs at least {} observations, got {}",
            10 * t,
            data.len()
        )));
    }
    let mut best: Option<FitResult> = None;
    let mut first_err = None;
    for &family in families {
        match fit_and_test_one(data, family, t) {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.confidence > b.confidence) {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one family was tried"))
}

fn fit_and_test_one<V: AsRef<[f64]>>(data: &[V], family: Family, t: usize) -> Result<FitResult> {
    let w = family.param_count();
    if t < w + 2 {
        return Err(Error::Precondition(format!("cell count {t} must be at least {}", w + 2)));
    }
    let model = fit_mle(data, family)?;
    let grid = CellGrid::equal_probability(&model, model.widest_dim(), t)?;
    let k_star = test_statistic(data, &model, &grid)?;
    let dof = (t - w - 1) as u32;
    Ok(FitResult { confidence: confidence(k_star, dof), model, k_star, dof, cells: t })
}
