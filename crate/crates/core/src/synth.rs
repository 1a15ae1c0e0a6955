//! Synthetic datasets: vector mixtures, clustered strings and clustered
//! token sets, each with a manifest describing how it was generated.

use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::{EfdModel, Family, Marginal};
use crate::error::{Error, Result};
use crate::metrics::{DataObject, Dataset, PayloadKind};
use crate::sampling::MixtureModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub model: EfdModel,
}

impl Component {
    /// The same marginal in every dimension.
    pub fn uniform(weight: f64, family: Family, params: &[f64], dim: usize) -> Result<Self> {
        let m = Marginal::from_params(family, params)?;
        Ok(Component { weight, model: EfdModel::new(vec![m; dim])? })
    }
}

/// `weight:family:p1,p2` with the marginal repeated over `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentArg {
    pub weight: f64,
    pub family: Family,
    pub params: Vec<f64>,
}

impl ComponentArg {
    pub fn build(&self, dim: usize) -> Result<Component> {
        Component::uniform(self.weight, self.family, &self.params, dim)
    }
}

impl FromStr for ComponentArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("component `{s}` is not `weight:family:p1[,p2]`"));
        let mut parts = s.split(':');
        let (Some(w), Some(f), Some(p), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let weight: f64 = w.trim().parse().map_err(|_| bad())?;
        let params = p.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad())?;
        Ok(ComponentArg { weight, family: f.trim().parse()?, params })
    }
}

/// Object `i` is drawn from component `node_components[i % nodes]`, so that
/// round-robin sharding over `nodes` nodes gives each node its own distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skew {
    pub node_components: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenSpec {
    Vector {
        count: usize,
        components: Vec<Component>,
        #[serde(default)]
        skew: Option<Skew>,
    },
    String {
        count: usize,
        clusters: usize,
        length: usize,
        max_edits: usize,
        #[serde(default = "default_alphabet")]
        alphabet: String,
    },
    Set {
        count: usize,
        clusters: usize,
        size: usize,
        vocabulary: usize,
        max_swaps: usize,
    },
}

fn default_alphabet() -> String {
    "ACGT".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: GenSpec,
    pub seed: u64,
    /// Objects drawn from each component / cluster.
    pub counts: Vec<usize>,
}

impl Manifest {
    /// Generating mixture with its realized proportions, for vector data.
    pub fn reference(&self) -> Option<MixtureModel> {
        match &self.spec {
            GenSpec::Vector { components, .. } => Some(MixtureModel {
                components: components
                    .iter()
                    .zip(&self.counts)
                    .filter(|(_, &n)| n > 0)
                    .map(|(c, &n)| (n as f64, c.model.clone()))
                    .collect(),
            }),
            _ => None,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

impl GenSpec {
    pub fn payload_kind(&self) -> PayloadKind {
        match self {
            GenSpec::Vector { .. } => PayloadKind::Vector,
            GenSpec::String { .. } => PayloadKind::String,
            GenSpec::Set { .. } => PayloadKind::Set,
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        match self {
            GenSpec::Vector { components, skew, .. } => {
                if components.is_empty() {
                    return fail("at least one component is required");
                }
                let dim = components[0].model.marginals().len();
                if components.iter().any(|c| c.model.marginals().len() != dim) {
                    return fail("components must share a dimension");
                }
                if components.iter().any(|c| !(c.weight.is_finite() && c.weight >= 0.0)) || components.iter().all(|c| c.weight == 0.0) {
                    return fail("component weights must be non-negative with a positive sum");
                }
                if let Some(s) = skew {
                    if s.node_components.is_empty() || s.node_components.iter().any(|&c| c >= components.len()) {
                        return fail("skew must name existing components");
                    }
                }
            }
            GenSpec::String { clusters, length, alphabet, .. } => {
                if *clusters == 0 || *length == 0 || alphabet.is_empty() {
                    return fail("string clusters, length and alphabet must be non-empty");
                }
            }
            GenSpec::Set { clusters, size, vocabulary, .. } => {
                if *clusters == 0 || *size == 0 || vocabulary < size {
                    return fail("set clusters and size must be positive and fit the vocabulary");
                }
            }
        }
        Ok(())
    }
}

/// Generates a dataset with ids `0..count`.
pub fn generate(spec: &GenSpec, seed: u64) -> Result<(Dataset, Manifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (objects, counts) = match spec {
        GenSpec::Vector { count, components, skew } => vectors(*count, components, skew.as_ref(), &mut rng)?,
        GenSpec::String { count, clusters, length, max_edits, alphabet } => {
            let alphabet: Vec<char> = alphabet.chars().collect();
            let bases: Vec<Vec<char>> = (0..*clusters).map(|_| (0..*length).map(|_| *alphabet.choose(&mut rng).unwrap()).collect()).collect();
            let mut counts = vec![0; *clusters];
            let objects = (0..*count as u64)
                .map(|id| {
                    let c = rng.random_range(0..*clusters);
                    counts[c] += 1;
                    let mut s = bases[c].clone();
                    for _ in 0..rng.random_range(0..=*max_edits) {
                        mutate(&mut s, &alphabet, &mut rng);
                    }
                    DataObject::text(id, s.into_iter().collect::<String>())
                })
                .collect();
            (objects, counts)
        }
        GenSpec::Set { count, clusters, size, vocabulary, max_swaps } => {
            let vocab: Vec<String> = (0..*vocabulary).map(|i| format!("t{i}")).collect();
            let bases: Vec<Vec<usize>> = (0..*clusters).map(|_| rand::seq::index::sample(&mut rng, *vocabulary, *size).into_vec()).collect();
            let mut counts = vec![0; *clusters];
            let objects = (0..*count as u64)
                .map(|id| {
                    let c = rng.random_range(0..*clusters);
                    counts[c] += 1;
                    let mut set = bases[c].clone();
                    for _ in 0..rng.random_range(0..=*max_swaps) {
                        let at = rng.random_range(0..set.len());
                        set[at] = rng.random_range(0..*vocabulary);
                    }
                    DataObject::set(id, set.iter().map(|&t| vocab[t].clone()))
                })
                .collect();
            (objects, counts)
        }
    };
    let dataset = Dataset::new(objects)?;
    Ok((dataset, Manifest { spec: spec.clone(), seed, counts }))
}

fn vectors<R: Rng + ?Sized>(count: usize, components: &[Component], skew: Option<&Skew>, rng: &mut R) -> Result<(Vec<DataObject>, Vec<usize>)> {
    let pick = WeightedIndex::new(components.iter().map(|c| c.weight)).map_err(|e| Error::Config(e.to_string()))?;
    let mut counts = vec![0; components.len()];
    let objects = (0..count)
        .map(|i| {
            let c = match skew {
                Some(s) => s.node_components[i % s.node_components.len()],
                None => pick.sample(rng),
            };
            counts[c] += 1;
            DataObject::vector(i as u64, components[c].model.sample(rng))
        })
        .collect();
    Ok((objects, counts))
}

fn mutate<R: Rng + ?Sized>(s: &mut Vec<char>, alphabet: &[char], rng: &mut R) {
    let ch = *alphabet.choose(rng).unwrap();
    match rng.random_range(0..3) {
        0 if !s.is_empty() => {
            let at = rng.random_range(0..s.len());
            s[at] = ch;
        }
        1 if s.len() > 1 => {
            s.remove(rng.random_range(0..s.len()));
        }
        _ => s.insert(rng.random_range(0..=s.len()), ch),
    }
}
