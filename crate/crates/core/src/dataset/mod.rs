//! Supervised samples from scan sequences.
//!
//! Objects are matched across scans purely by id. For a (current, future)
//! pair every object of the current scan gets a [`VariabilityLabel`]; objects
//! that only exist in the future scan contribute nothing. Every ordered pair of
//! distinct scans of an environment is a sample, `n(n-1)` per environment.

pub mod rscan;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{distance, parse_json, SceneGraph, Taxonomy};
use crate::par::{self, Execution};
use crate::rng::seeded;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Minimum displacement (meters) that counts as a position change.
    pub epsilon: f64,
    /// Mask state supervision for objects that carry no state attribute.
    pub require_state_attributes: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            require_state_attributes: true,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Position, state and instance variability of one object, with validity
/// masks for the first two (instance supervision is always valid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VariabilityLabel {
    pub position: bool,
    pub state: bool,
    pub instance: bool,
    pub mask_position: bool,
    pub mask_state: bool,
}

impl VariabilityLabel {
    pub fn targets(&self) -> [bool; 3] {
        [self.position, self.state, self.instance]
    }

    pub fn masks(&self) -> [bool; 3] {
        [self.mask_position, self.mask_state, true]
    }

    /// Any kind of change, masked or not.
    pub fn changed(&self) -> bool {
        self.position || self.state || self.instance
    }
}

/// Labels for every node of `current`, in node order.
pub fn compute_labels(
    current: &SceneGraph,
    future: &SceneGraph,
    tax: &Taxonomy,
    cfg: &LabelConfig,
) -> Result<Vec<VariabilityLabel>> {
    if current.environment_id() != future.environment_id() {
        return Err(Error::Pairing(format!(
            "scans `{}` and `{}` belong to different environments (`{}` vs `{}`)",
            current.scan_id(),
            future.scan_id(),
            current.environment_id(),
            future.environment_id()
        )));
    }
    for g in [current, future] {
        if g.taxonomy_name() != tax.name() {
            return Err(Error::Pairing(format!(
                "scan `{}` uses taxonomy `{}`, expected `{}`",
                g.scan_id(),
                g.taxonomy_name(),
                tax.name()
            )));
        }
    }
    Ok(current
        .nodes()
        .iter()
        .map(|node| match future.node(node.id) {
            None => VariabilityLabel {
                instance: true,
                ..Default::default()
            },
            Some(next) => {
                let has_state = node.state_attributes(tax).next().is_some();
                VariabilityLabel {
                    position: distance(&node.position, &next.position) >= cfg.epsilon,
                    state: !node.state_attributes(tax).eq(next.state_attributes(tax)),
                    instance: false,
                    mask_position: true,
                    mask_state: has_state || !cfg.require_state_attributes,
                }
            }
        })
        .collect())
}

/// All ordered pairs `(i, j)`, `i != j`, of scan indices.
pub fn augment_pairs(num_scans: usize) -> Vec<(usize, usize)> {
    if num_scans < 2 {
        log::warn!("environment has {num_scans} scan(s); at least 2 are needed for pairs");
        return Vec::new();
    }
    (0..num_scans)
        .flat_map(|i| (0..num_scans).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: SceneGraph,
    /// One label per node of `input`, in node order.
    pub labels: Vec<VariabilityLabel>,
    /// `(current scan id, future scan id)`.
    pub pair_id: (String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub id: String,
    pub split: Split,
    /// Scans in temporal order.
    pub scans: Vec<SceneGraph>,
}

impl Environment {
    pub fn samples(&self, tax: &Taxonomy, cfg: &LabelConfig) -> Result<Vec<Sample>> {
        augment_pairs(self.scans.len())
            .into_iter()
            .map(|(i, j)| {
                let (cur, fut) = (&self.scans[i], &self.scans[j]);
                Ok(Sample {
                    labels: compute_labels(cur, fut, tax, cfg)?,
                    input: cur.clone(),
                    pair_id: (cur.scan_id().to_string(), fut.scan_id().to_string()),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    split: Split,
    scans: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    taxonomy: String,
    environments: Vec<ManifestEntry>,
}

/// Scan sequences grouped by environment, plus their taxonomy.
///
/// On disk: `<root>/taxonomy.json`, `<root>/manifest.json` and one
/// `<root>/<environment>/<scan>.json` scene-graph file per scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub environments: Vec<Environment>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let taxonomy = Taxonomy::load(root.join("taxonomy.json"))?;
        let manifest_path = root.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = parse_json(&text, &manifest_path.display().to_string())?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest format_version {}",
                manifest.format_version
            )));
        }
        if manifest.taxonomy != taxonomy.name() {
            return Err(Error::Taxonomy(format!(
                "manifest names taxonomy `{}`, taxonomy.json is `{}`",
                manifest.taxonomy,
                taxonomy.name()
            )));
        }
        let environments = par::try_map(Execution::Parallel, &manifest.environments, |entry| {
            let scans = entry
                .scans
                .iter()
                .map(|scan| SceneGraph::load(root.join(&entry.id).join(format!("{scan}.json")), &taxonomy))
                .collect::<Result<Vec<_>>>()?;
            for s in &scans {
                if s.environment_id() != entry.id {
                    return Err(Error::Pairing(format!(
                        "scan `{}` listed under `{}` has environment_id `{}`",
                        s.scan_id(),
                        entry.id,
                        s.environment_id()
                    )));
                }
            }
            Ok(Environment {
                id: entry.id.clone(),
                split: entry.split,
                scans,
            })
        })?;
        Ok(Self {
            taxonomy,
            environments,
        })
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        self.taxonomy.save(root.join("taxonomy.json"))?;
        for env in &self.environments {
            let dir = root.join(&env.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for scan in &env.scans {
                scan.save(dir.join(format!("{}.json", scan.scan_id())), &self.taxonomy)?;
            }
        }
        let manifest = Manifest {
            format_version: MANIFEST_FORMAT_VERSION,
            taxonomy: self.taxonomy.name().to_string(),
            environments: self
                .environments
                .iter()
                .map(|e| ManifestEntry {
                    id: e.id.clone(),
                    split: e.split,
                    scans: e.scans.iter().map(|s| s.scan_id().to_string()).collect(),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = root.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn environments_in(&self, split: Split) -> impl Iterator<Item = &Environment> {
        self.environments.iter().filter(move |e| e.split == split)
    }

    pub fn scans_in(&self, split: Split) -> impl Iterator<Item = &SceneGraph> {
        self.environments_in(split).flat_map(|e| e.scans.iter())
    }

    /// Samples of one split, built per environment in parallel and merged in
    /// environment order.
    pub fn samples(&self, split: Split, cfg: &LabelConfig) -> Result<Vec<Sample>> {
        let envs: Vec<&Environment> = self.environments_in(split).collect();
        Ok(par::try_map(Execution::Parallel, &envs, |e| e.samples(&self.taxonomy, cfg))?
            .into_iter()
            .flatten()
            .collect())
    }

    pub fn all_samples(&self, cfg: &LabelConfig) -> Result<Vec<Sample>> {
        let envs: Vec<&Environment> = self.environments.iter().collect();
        Ok(par::try_map(Execution::Parallel, &envs, |e| e.samples(&self.taxonomy, cfg))?
            .into_iter()
            .flatten()
            .collect())
    }
}

/// Environment-level split assignment: seeded shuffle, then contiguous cuts of
/// sizes `round(f_train * n)` and `round(f_val * n)`; the rest is test.
pub fn assign_splits(num_environments: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut order: Vec<usize> = (0..num_environments).collect();
    order.shuffle(&mut seeded(seed, &[0x5911]));
    let n_train = (fractions[0] * num_environments as f64).round() as usize;
    let n_val = ((fractions[1] * num_environments as f64).round() as usize).min(num_environments - n_train.min(num_environments));
    let mut splits = vec![Split::Test; num_environments];
    for (rank, &env) in order.iter().enumerate() {
        splits[env] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Label counts over a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassStats {
    pub num_samples: usize,
    /// Positive unmasked elements per variability type.
    pub positives: [usize; 3],
    /// Unmasked elements per variability type.
    pub unmasked: [usize; 3],
}

impl ClassStats {
    pub fn from_samples(samples: &[Sample]) -> Self {
        let mut s = ClassStats {
            num_samples: samples.len(),
            ..Default::default()
        };
        for sample in samples {
            for l in &sample.labels {
                for (c, (&y, &m)) in l.targets().iter().zip(&l.masks()).enumerate() {
                    if m {
                        s.unmasked[c] += 1;
                        s.positives[c] += y as usize;
                    }
                }
            }
        }
        s
    }

    /// Fraction of unmasked elements that are positive (0 if none unmasked).
    pub fn positive_rate(&self, c: usize) -> f64 {
        if self.unmasked[c] == 0 {
            0.0
        } else {
            self.positives[c] as f64 / self.unmasked[c] as f64
        }
    }
}

/// Per-sample drawing probabilities. A sample's raw weight is the largest
/// inverse positive rate `1 / rate_c` over the variability types it has an
/// unmasked positive for, or 1 if it has none; weights are then normalised.
pub fn importance_weights(samples: &[Sample], stats: &ClassStats) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    if stats.positives.iter().all(|&p| p == 0) {
        log::warn!("no positive labels in the dataset; using uniform sampling weights");
        return vec![1.0 / samples.len() as f64; samples.len()];
    }
    let raw: Vec<f64> = samples
        .iter()
        .map(|s| {
            let mut w: f64 = 1.0;
            for c in 0..3 {
                let has_positive = s.labels.iter().any(|l| l.masks()[c] && l.targets()[c]);
                if has_positive {
                    w = w.max(1.0 / stats.positive_rate(c));
                }
            }
            w
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Draws `count` sample indices with replacement according to `weights`.
pub fn draw_epoch<R: Rng>(weights: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::Training(format!("invalid sampling weights: {e}")))?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

/// Position / state / instance names, in output order.
pub const VARIABILITY_NAMES: [&str; 3] = ["position", "state", "instance"];

/// Count of samples per environment split, for reporting.
pub fn split_counts(samples_by_split: &BTreeMap<Split, usize>) -> String {
    samples_by_split
        .iter()
        .map(|(s, n)| format!("{s:?}={n}"))
        .collect::<Vec<_>>()
        .join(" ")
}
