//! Variability networks.
//!
//! [`MpConv`] is one message-passing layer:
//!
//! ```text
//! z'_i = f(z_i) + sum over edges (j -> i) of  z_j ⊙ h(q_ji)
//! ```
//!
//! where `f` and `h` are small MLPs and `q_ji` is the edge feature row. The
//! product is elementwise by default (`h` outputs one gate per channel) or a
//! single scalar gate per edge. Because the message carries `z_j` through, a
//! layer keeps the feature width: both layers operate at the PCA dimension.
//!
//! [`Network::DeltaVsg`] stacks two layers with ReLU and dropout in between,
//! followed by a shared MLP head with three sigmoid outputs
//! (position, state, instance). [`Network::Mlp`] is the per-node baseline that
//! ignores edges entirely.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed, EdgeConfig, EmbeddedGraph, PcaModel};
use crate::error::{Error, Result};
use crate::graph::{parse_json, NodeVariability, ObjectId, SceneGraph, SceneGraphFile, Taxonomy};
use crate::nn::{dropout, sigmoid, Gradients, Mlp, MlpCache, Mode, NamedArray, Params};
use crate::rng::seeded;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const NUM_OUTPUTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    #[default]
    Elementwise,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    DeltaVsg,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Node feature width (the PCA dimension).
    pub input_dim: usize,
    /// Relationship count; edge features are `num_relations + 3` wide.
    pub num_relations: usize,
    /// Hidden width of every internal MLP.
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub gate: Gate,
}

impl ModelConfig {
    pub fn edge_dim(&self) -> usize {
        self.num_relations + 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpConv {
    pub f: Mlp,
    pub h: Mlp,
    pub gate: Gate,
}

#[derive(Debug, Clone)]
pub struct MpConvCache {
    input: Array2<f64>,
    f_cache: MlpCache,
    h_cache: Option<MlpCache>,
    gates: Array2<f64>,
}

impl MpConv {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        dim: usize,
        edge_dim: usize,
        hidden: usize,
        gate: Gate,
        rng: &mut R,
    ) -> Result<Self> {
        let f = Mlp::new(params, &format!("{name}.f"), &[dim, hidden, dim], rng)?;
        let gate_dim = match gate {
            Gate::Elementwise => dim,
            Gate::Scalar => 1,
        };
        let h = Mlp::new(params, &format!("{name}.h"), &[edge_dim, hidden, gate_dim], rng)?;
        Ok(Self { f, h, gate })
    }

    pub fn dim(&self) -> usize {
        self.f.input_dim()
    }

    pub fn forward(
        &self,
        params: &Params,
        z: &Array2<f64>,
        edge_index: &[[usize; 2]],
        edge_features: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, MpConvCache)> {
        let n = z.nrows();
        if edge_features.nrows() != edge_index.len() {
            return Err(Error::dim("edge feature rows", edge_index.len(), edge_features.nrows()));
        }
        for &[s, t] in edge_index {
            if s >= n || t >= n {
                return Err(Error::Graph(format!("edge ({s},{t}) out of range for {n} nodes")));
            }
        }
        let (mut out, f_cache) = self.f.forward(params, z.view())?;
        let (gates, h_cache) = if edge_index.is_empty() {
            (Array2::zeros((0, self.h.output_dim())), None)
        } else {
            let (g, c) = self.h.forward(params, edge_features)?;
            (g, Some(c))
        };
        for (k, &[s, t]) in edge_index.iter().enumerate() {
            match self.gate {
                Gate::Elementwise => {
                    Zip::from(out.row_mut(t))
                        .and(z.row(s))
                        .and(gates.row(k))
                        .for_each(|o, &zj, &g| *o += zj * g);
                }
                Gate::Scalar => {
                    let g = gates[[k, 0]];
                    Zip::from(out.row_mut(t)).and(z.row(s)).for_each(|o, &zj| *o += zj * g);
                }
            }
        }
        Ok((
            out,
            MpConvCache {
                input: z.clone(),
                f_cache,
                h_cache,
                gates,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input
    /// node matrix.
    pub fn backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        cache: &MpConvCache,
        edge_index: &[[usize; 2]],
        dout: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let mut dz = self.f.backward(params, grads, &cache.f_cache, dout)?;
        let Some(h_cache) = &cache.h_cache else {
            return Ok(dz);
        };
        let z = &cache.input;
        let mut dgates = Array2::zeros(cache.gates.raw_dim());
        for (k, &[s, t]) in edge_index.iter().enumerate() {
            let d = dout.row(t);
            match self.gate {
                Gate::Elementwise => {
                    Zip::from(dz.row_mut(s))
                        .and(&d)
                        .and(cache.gates.row(k))
                        .for_each(|dzs, &dt, &g| *dzs += dt * g);
                    Zip::from(dgates.row_mut(k))
                        .and(&d)
                        .and(z.row(s))
                        .for_each(|dg, &dt, &zs| *dg = dt * zs);
                }
                Gate::Scalar => {
                    let g = cache.gates[[k, 0]];
                    Zip::from(dz.row_mut(s)).and(&d).for_each(|dzs, &dt| *dzs += dt * g);
                    dgates[[k, 0]] = d.dot(&z.row(s));
                }
            }
        }
        self.h.backward(params, grads, h_cache, &dgates)?;
        Ok(dz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Network {
    DeltaVsg {
        conv1: MpConv,
        conv2: MpConv,
        head: Mlp,
        dropout_rate: f64,
    },
    Mlp {
        mlp: Mlp,
    },
}

#[derive(Debug, Clone)]
enum CacheInner {
    DeltaVsg {
        conv1: MpConvCache,
        conv1_out: Array2<f64>,
        dropout_mask: Array2<f64>,
        conv2: MpConvCache,
        head: MlpCache,
    },
    Mlp {
        mlp: MlpCache,
    },
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    probabilities: Array2<f64>,
    edge_index: Vec<[usize; 2]>,
    inner: CacheInner,
}

impl Network {
    pub fn build<R: Rng>(cfg: &ModelConfig, params: &mut Params, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, hid) = (cfg.input_dim, cfg.hidden_dim);
        Ok(match cfg.architecture {
            Architecture::DeltaVsg => Network::DeltaVsg {
                conv1: MpConv::new(params, "conv1", d, cfg.edge_dim(), hid, cfg.gate, rng)?,
                conv2: MpConv::new(params, "conv2", d, cfg.edge_dim(), hid, cfg.gate, rng)?,
                head: Mlp::new(params, "head", &[d, hid, NUM_OUTPUTS], rng)?,
                dropout_rate: cfg.dropout_rate,
            },
            Architecture::Mlp => Network::Mlp {
                mlp: Mlp::new(params, "mlp", &[d, hid, hid, NUM_OUTPUTS], rng)?,
            },
        })
    }

    /// Returns per-node probabilities (`N x 3`) and the cache for backward.
    pub fn forward<R: Rng>(
        &self,
        params: &Params,
        eg: &EmbeddedGraph,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let (logits, inner) = match self {
            Network::DeltaVsg {
                conv1,
                conv2,
                head,
                dropout_rate,
            } => {
                if eg.node_features.ncols() != conv1.dim() {
                    return Err(Error::dim("node features", conv1.dim(), eg.node_features.ncols()));
                }
                let ef = eg.edge_features.view();
                let (c1, conv1_cache) = conv1.forward(params, &eg.node_features, &eg.edge_index, ef)?;
                let a1 = c1.mapv(|v| v.max(0.0));
                let (d1, dropout_mask) = dropout(&a1, *dropout_rate, mode, rng)?;
                let (c2, conv2_cache) = conv2.forward(params, &d1, &eg.edge_index, ef)?;
                let (logits, head_cache) = head.forward(params, c2.view())?;
                (
                    logits,
                    CacheInner::DeltaVsg {
                        conv1: conv1_cache,
                        conv1_out: c1,
                        dropout_mask,
                        conv2: conv2_cache,
                        head: head_cache,
                    },
                )
            }
            Network::Mlp { mlp } => {
                let (logits, cache) = mlp.forward(params, eg.node_features.view())?;
                (logits, CacheInner::Mlp { mlp: cache })
            }
        };
        let probabilities = logits.mapv(sigmoid);
        Ok((
            probabilities.clone(),
            ForwardCache {
                mode,
                probabilities,
                edge_index: eg.edge_index.clone(),
                inner,
            },
        ))
    }

    /// Backpropagates `dL/dp` (`N x 3`) into `grads`. Requires a train-mode cache.
    pub fn backward(
        &self,
        params: &Params,
        grads: &mut Gradients,
        cache: &ForwardCache,
        dprob: &Array2<f64>,
    ) -> Result<()> {
        if cache.mode != Mode::Train {
            return Err(Error::Usage("backward requires a train-mode forward cache".into()));
        }
        if dprob.dim() != cache.probabilities.dim() {
            return Err(Error::dim("probability gradient rows", cache.probabilities.nrows(), dprob.nrows()));
        }
        let mut dlogits = dprob.clone();
        Zip::from(&mut dlogits)
            .and(&cache.probabilities)
            .for_each(|d, &p| *d *= p * (1.0 - p));
        match (self, &cache.inner) {
            (
                Network::DeltaVsg { conv1, conv2, head, .. },
                CacheInner::DeltaVsg {
                    conv1: conv1_cache,
                    conv1_out,
                    dropout_mask,
                    conv2: conv2_cache,
                    head: head_cache,
                },
            ) => {
                let dc2 = head.backward(params, grads, head_cache, &dlogits)?;
                let dd1 = conv2.backward(params, grads, conv2_cache, &cache.edge_index, &dc2)?;
                let mut dc1 = dd1 * dropout_mask;
                Zip::from(&mut dc1).and(conv1_out).for_each(|d, &c| {
                    if c <= 0.0 {
                        *d = 0.0;
                    }
                });
                conv1.backward(params, grads, conv1_cache, &cache.edge_index, &dc1)?;
            }
            (Network::Mlp { mlp }, CacheInner::Mlp { mlp: c }) => {
                mlp.backward(params, grads, c, &dlogits)?;
            }
            _ => return Err(Error::Usage("forward cache belongs to a different network".into())),
        }
        Ok(())
    }
}

/// Per-node variability probabilities of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct VariabilityPrediction {
    pub node_ids: Vec<ObjectId>,
    /// `[p_position, p_state, p_instance]` per node, in node order.
    pub probabilities: Vec<[f64; 3]>,
}

impl VariabilityPrediction {
    pub fn from_matrix(node_ids: Vec<ObjectId>, probs: &Array2<f64>) -> Self {
        let probabilities = probs.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        Self {
            node_ids,
            probabilities,
        }
    }

    pub fn get(&self, id: ObjectId) -> Option<[f64; 3]> {
        self.node_ids
            .iter()
            .position(|&n| n == id)
            .map(|i| self.probabilities[i])
    }

    /// Planner ranking score: the largest of the three probabilities.
    pub fn scores(&self) -> Vec<(ObjectId, f64)> {
        self.node_ids
            .iter()
            .zip(&self.probabilities)
            .map(|(&id, p)| (id, p[0].max(p[1]).max(p[2])))
            .collect()
    }

    pub fn as_node_variability(&self) -> Vec<NodeVariability> {
        self.probabilities
            .iter()
            .map(|p| NodeVariability {
                p_position: p[0],
                p_state: p[1],
                p_instance: p[2],
            })
            .collect()
    }
}

/// A network together with everything needed to run it on raw scene graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct VariabilityModel {
    pub config: ModelConfig,
    pub network: Network,
    pub params: Params,
    pub taxonomy: Taxonomy,
    pub pca: PcaModel,
    pub edge_config: EdgeConfig,
}

impl VariabilityModel {
    pub fn new(
        config: ModelConfig,
        taxonomy: Taxonomy,
        pca: PcaModel,
        edge_config: EdgeConfig,
        seed: u64,
    ) -> Result<Self> {
        if config.input_dim != pca.dim {
            return Err(Error::dim("model input vs PCA dimension", pca.dim, config.input_dim));
        }
        if config.num_relations != taxonomy.num_relationships() {
            return Err(Error::dim(
                "model relation count vs taxonomy",
                taxonomy.num_relationships(),
                config.num_relations,
            ));
        }
        let mut params = Params::new();
        let network = Network::build(&config, &mut params, &mut seeded(seed, &[0x1417]))?;
        Ok(Self {
            config,
            network,
            params,
            taxonomy,
            pca,
            edge_config,
        })
    }

    pub fn embed(&self, g: &SceneGraph) -> Result<EmbeddedGraph> {
        if g.taxonomy_name() != self.taxonomy.name() {
            return Err(Error::Checkpoint(format!(
                "model was trained on taxonomy `{}`, scene `{}` uses `{}`",
                self.taxonomy.name(),
                g.scan_id(),
                g.taxonomy_name()
            )));
        }
        embed(g, &self.taxonomy, &self.pca, &self.edge_config)
    }

    pub fn forward<R: Rng>(
        &self,
        eg: &EmbeddedGraph,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(VariabilityPrediction, ForwardCache)> {
        let (p, cache) = self.network.forward(&self.params, eg, mode, rng)?;
        Ok((VariabilityPrediction::from_matrix(eg.node_ids.clone(), &p), cache))
    }

    /// Deterministic (eval-mode) probabilities as an `N x 3` matrix.
    pub fn predict_embedded(&self, eg: &EmbeddedGraph) -> Result<Array2<f64>> {
        // Eval mode draws no random numbers; the rng is a placeholder.
        let (p, _) = self.network.forward(&self.params, eg, Mode::Eval, &mut seeded(0, &[]))?;
        Ok(p)
    }

    pub fn predict(&self, g: &SceneGraph) -> Result<VariabilityPrediction> {
        let eg = self.embed(g)?;
        let p = self.predict_embedded(&eg)?;
        Ok(VariabilityPrediction::from_matrix(eg.node_ids, &p))
    }

    /// The input graph written as a VSG: scene-graph JSON with per-node
    /// `variability` probabilities.
    pub fn vsg_json(&self, g: &SceneGraph) -> Result<String> {
        let pred = self.predict(g)?;
        let v = pred.as_node_variability();
        Ok(SceneGraphFile::from_graph(g, &self.taxonomy, Some(&v)).to_json_string())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            taxonomy_name: self.taxonomy.name().to_string(),
            taxonomy: self.taxonomy.clone(),
            hyperparameters: self.config,
            pca_model: self.pca.clone(),
            edge_config: self.edge_config,
            parameters: self.params.to_named(),
        };
        let mut s = serde_json::to_string(&file).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_checkpoint_str(text: &str, origin: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionProbe {
            format_version: u32,
        }
        let probe: VersionProbe = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("{origin}: unreadable checkpoint: {e}")))?;
        if probe.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{origin}: format_version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                probe.format_version
            )));
        }
        let file: CheckpointFile = parse_json(text, origin)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if file.taxonomy_name != file.taxonomy.name() {
            return Err(Error::Checkpoint(format!(
                "{origin}: taxonomy_name `{}` disagrees with embedded taxonomy `{}`",
                file.taxonomy_name,
                file.taxonomy.name()
            )));
        }
        let mut model = VariabilityModel::new(
            file.hyperparameters,
            file.taxonomy,
            file.pca_model,
            file.edge_config,
            0,
        )
        .map_err(|e| Error::Checkpoint(format!("{origin}: {e}")))?;
        model.params.load_named(&file.parameters)?;
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, &path.display().to_string())
    }
}

/// Checkpoint container, written as a single JSON object with the fields in
/// this order. Parameters are row-major arrays in registration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    taxonomy_name: String,
    taxonomy: Taxonomy,
    hyperparameters: ModelConfig,
    pca_model: PcaModel,
    edge_config: EdgeConfig,
    parameters: Vec<NamedArray>,
}
