//! Turning a scene graph into network inputs.
//!
//! Each object becomes a binary vector (class one-hot followed by attribute
//! multi-hot) that is compressed with PCA into a row of the node matrix.
//! Edges connect every ordered pair of objects closer than `tau`, plus the
//! semantic relationships of the graph; an edge's features are the
//! relationship multi-hot followed by the relative position `r_target - r_source`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{distance, sub, ObjectId, ObjectNode, SceneGraph, Taxonomy};

/// Class one-hot concatenated with attribute multi-hot, length `|O| + |A|`.
pub fn encode_binary(node: &ObjectNode, tax: &Taxonomy) -> Vec<f64> {
    let mut u = vec![0.0; tax.binary_dim()];
    u[node.class_index] = 1.0;
    for &a in &node.attributes {
        u[tax.num_classes() + a] = 1.0;
    }
    u
}

/// Eigenvalues below this fraction of the largest one count as zero rank.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `dim x D`, rows are principal directions sorted by decreasing variance.
    pub components: Array2<f64>,
    pub explained_variance_ratio: Array1<f64>,
    pub dim: usize,
    /// Set when the data had fewer than `dim` non-degenerate directions; the
    /// surplus rows of `components` are zero.
    pub rank_deficient: bool,
}

/// Fits PCA on mean-centred rows of `data` (one row per vector), keeping the
/// top `dim` directions of the sample covariance.
pub fn fit_pca(data: &Array2<f64>, dim: usize) -> Result<PcaModel> {
    let (n, d) = data.dim();
    if dim == 0 {
        return Err(Error::Config("PCA dimension must be at least 1".into()));
    }
    if dim > d {
        return Err(Error::dim("PCA target dimension <= input dimension", d, dim));
    }
    if n < dim {
        return Err(Error::dim("PCA sample count >= target dimension", dim, n));
    }
    let mean = data.mean_axis(Axis(0)).expect("non-empty");
    let centred = data - &mean;
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centred.t().dot(&centred) / denom;
    let total: f64 = cov.diag().sum();

    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = Array2::zeros((dim, d));
    let mut ratio = Array1::zeros(dim);
    let mut rank = 0;
    for (k, &col) in order.iter().take(dim).enumerate() {
        let lambda = eig.eigenvalues[col];
        if top <= 0.0 || lambda <= RANK_TOLERANCE * top {
            continue;
        }
        rank += 1;
        let v = eig.eigenvectors.column(col);
        // Sign convention: largest-magnitude entry positive (first one on ties).
        let mut pivot = 0;
        for i in 1..d {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[[k, i]] = sign * v[i];
        }
        ratio[k] = (lambda / total).clamp(0.0, 1.0);
    }
    let rank_deficient = rank < dim;
    if rank_deficient {
        log::warn!("PCA input has rank {rank} < requested dimension {dim}");
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance_ratio: ratio,
        dim,
        rank_deficient,
    })
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// `components · (v − mean)`.
    pub fn transform(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::dim("PCA transform input", self.input_dim(), v.len()));
        }
        Ok(self.components.dot(&(&v - &self.mean)))
    }

    pub fn inverse_transform(&self, y: ArrayView1<f64>) -> Result<Array1<f64>> {
        if y.len() != self.dim {
            return Err(Error::dim("PCA inverse transform input", self.dim, y.len()));
        }
        Ok(self.components.t().dot(&y) + &self.mean)
    }

    pub fn transform_rows(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.input_dim() {
            return Err(Error::dim("PCA transform input", self.input_dim(), data.ncols()));
        }
        Ok((data - &self.mean).dot(&self.components.t()))
    }

    pub fn retained_variance(&self) -> f64 {
        self.explained_variance_ratio.sum()
    }
}

/// Stacks the binary encodings of every node of every graph, in order.
pub fn binary_matrix<'a>(
    graphs: impl IntoIterator<Item = &'a SceneGraph>,
    tax: &Taxonomy,
) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = graphs
        .into_iter()
        .flat_map(|g| g.nodes().iter().map(|n| encode_binary(n, tax)))
        .collect();
    let mut m = Array2::zeros((rows.len(), tax.binary_dim()));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&ArrayView1::from(r.as_slice()));
    }
    m
}

mod tau_serde {
    use super::*;

    pub fn serialize<S: Serializer>(tau: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if tau.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*tau)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid tau `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    /// Geometric edge radius in meters; pairs with distance strictly below it
    /// are connected. May be infinite.
    #[serde(with = "tau_serde")]
    pub tau: f64,
    pub include_semantic_edges: bool,
}

impl EdgeConfig {
    pub fn new(tau: f64, include_semantic_edges: bool) -> Result<Self> {
        if tau.is_nan() || tau < 0.0 {
            return Err(Error::Config(format!("tau must be >= 0, got {tau}")));
        }
        Ok(Self {
            tau,
            include_semantic_edges,
        })
    }
}

/// `tau` given either in meters or as a percentile of the pairwise
/// intra-scene distances of a reference (training) set of graphs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauSpec {
    Meters(f64),
    Percentile(f64),
}

impl Default for TauSpec {
    fn default() -> Self {
        TauSpec::Percentile(75.0)
    }
}

impl fmt::Display for TauSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauSpec::Meters(m) if m.is_infinite() => write!(f, "inf"),
            TauSpec::Meters(m) => write!(f, "{m}"),
            TauSpec::Percentile(p) => write!(f, "p{p}"),
        }
    }
}

impl FromStr for TauSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid tau `{s}`: expected meters, `inf` or `p0`..`p100`"));
        if s == "inf" {
            return Ok(TauSpec::Meters(f64::INFINITY));
        }
        if let Some(p) = s.strip_prefix('p') {
            let p: f64 = p.parse().map_err(|_| bad())?;
            if !(0.0..=100.0).contains(&p) {
                return Err(bad());
            }
            return Ok(TauSpec::Percentile(p));
        }
        let m: f64 = s.parse().map_err(|_| bad())?;
        if m.is_nan() || m < 0.0 {
            return Err(bad());
        }
        Ok(TauSpec::Meters(m))
    }
}

impl Serialize for TauSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TauSpec::Meters(m) if m.is_finite() => s.serialize_f64(*m),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for TauSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(m) => Ok(TauSpec::Meters(m)),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// All unordered pairwise distances within each graph.
pub fn pairwise_distances<'a>(graphs: impl IntoIterator<Item = &'a SceneGraph>) -> Vec<f64> {
    let mut out = Vec::new();
    for g in graphs {
        let nodes = g.nodes();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                out.push(distance(&nodes[i].position, &nodes[j].position));
            }
        }
    }
    out
}

/// Linear-interpolation percentile (`p` in 0..=100). Empty input yields 0.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl TauSpec {
    /// Resolves to meters. The 0th percentile means "no geometric edges".
    pub fn resolve<'a>(&self, reference: impl IntoIterator<Item = &'a SceneGraph>) -> f64 {
        match *self {
            TauSpec::Meters(m) => m,
            TauSpec::Percentile(p) if p <= 0.0 => 0.0,
            TauSpec::Percentile(p) => percentile(&pairwise_distances(reference), p),
        }
    }
}

/// Edge list and edge feature matrix of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Edges {
    pub index: Vec<[usize; 2]>,
    /// `N_e x (num_relations + 3)`.
    pub features: Array2<f64>,
}

pub fn build_edges(g: &SceneGraph, num_relations: usize, cfg: &EdgeConfig) -> Edges {
    // (source row, target row) -> relationship bits; BTreeMap fixes row order.
    let mut pairs: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
    let nodes = g.nodes();
    if cfg.tau > 0.0 {
        for (i, a) in nodes.iter().enumerate() {
            for (j, b) in nodes.iter().enumerate() {
                if i != j && distance(&a.position, &b.position) < cfg.tau {
                    pairs.insert((i, j), vec![false; num_relations]);
                }
            }
        }
    }
    if cfg.include_semantic_edges {
        for e in g.semantic_edges() {
            let (Some(i), Some(j)) = (g.index_of(e.source), g.index_of(e.target)) else {
                continue;
            };
            pairs
                .entry((i, j))
                .or_insert_with(|| vec![false; num_relations])[e.relation] = true;
        }
    }
    let width = num_relations + 3;
    let mut features = Array2::zeros((pairs.len(), width));
    let mut index = Vec::with_capacity(pairs.len());
    for (row, (&(i, j), bits)) in pairs.iter().enumerate() {
        index.push([i, j]);
        for (r, &on) in bits.iter().enumerate() {
            if on {
                features[[row, r]] = 1.0;
            }
        }
        let rel = sub(&nodes[j].position, &nodes[i].position);
        for k in 0..3 {
            features[[row, num_relations + k]] = rel[k];
        }
    }
    Edges { index, features }
}

/// Network-ready view of a scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedGraph {
    /// `N_v x d_v`, row order equals node order of the source graph.
    pub node_features: Array2<f64>,
    /// `N_e` rows of `[source, target]` node rows.
    pub edge_index: Vec<[usize; 2]>,
    /// `N_e x (|R| + 3)`.
    pub edge_features: Array2<f64>,
    pub node_ids: Vec<ObjectId>,
}

impl EmbeddedGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }

    /// Copy with all edges removed.
    pub fn without_edges(&self) -> Self {
        Self {
            node_features: self.node_features.clone(),
            edge_index: Vec::new(),
            edge_features: Array2::zeros((0, self.edge_features.ncols())),
            node_ids: self.node_ids.clone(),
        }
    }

    /// Checks the structural invariants (edge indices in range, no self-edges).
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.node_ids.len() != n {
            return Err(Error::dim("node id list", n, self.node_ids.len()));
        }
        if self.edge_features.nrows() != self.edge_index.len() {
            return Err(Error::dim("edge feature rows", self.edge_index.len(), self.edge_features.nrows()));
        }
        for &[s, t] in &self.edge_index {
            if s >= n || t >= n {
                return Err(Error::Graph(format!("edge ({s},{t}) out of range for {n} nodes")));
            }
            if s == t {
                return Err(Error::Graph(format!("self-edge on node row {s}")));
            }
        }
        Ok(())
    }
}

pub fn embed(g: &SceneGraph, tax: &Taxonomy, pca: &PcaModel, cfg: &EdgeConfig) -> Result<EmbeddedGraph> {
    if g.taxonomy_name() != tax.name() {
        return Err(Error::Taxonomy(format!(
            "graph uses `{}`, embedder expects `{}`",
            g.taxonomy_name(),
            tax.name()
        )));
    }
    let binary = binary_matrix([g], tax);
    let node_features = pca.transform_rows(&binary)?;
    let edges = build_edges(g, tax.num_relationships(), cfg);
    Ok(EmbeddedGraph {
        node_features,
        edge_index: edges.index,
        edge_features: edges.features,
        node_ids: g.nodes().iter().map(|n| n.id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AttributeDef, AttributeKind, ScanInfo, SemanticEdge};
    use ndarray::array;

    fn tax() -> Taxonomy {
        Taxonomy::new(
            "t",
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                AttributeDef::new("x", AttributeKind::Static),
                AttributeDef::new("y", AttributeKind::State),
            ],
            vec!["on".into(), "near".into()],
        )
        .unwrap()
    }

    fn graph(positions: &[[f64; 3]], edges: Vec<SemanticEdge>) -> SceneGraph {
        let t = tax();
        let nodes = positions
            .iter()
            .enumerate()
            .map(|(i, p)| ObjectNode::new(i as u64, i % 3, [], *p))
            .collect();
        let info = ScanInfo {
            environment_id: "e".into(),
            scan_id: "s".into(),
            timestamp: 0,
            taxonomy_name: "t".into(),
        };
        SceneGraph::new(info, nodes, edges, &t).unwrap()
    }

    #[test]
    fn binary_encoding_examples() {
        let t = tax();
        assert_eq!(encode_binary(&ObjectNode::new(0, 0, [], [0.0; 3]), &t), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode_binary(&ObjectNode::new(0, 2, [0, 1], [0.0; 3]), &t), vec![0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn tau_zero_and_infinite() {
        let g = graph(&[[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]], vec![]);
        assert_eq!(build_edges(&g, 2, &EdgeConfig::new(0.0, false).unwrap()).index.len(), 0);
        assert_eq!(build_edges(&g, 2, &EdgeConfig::new(f64::INFINITY, false).unwrap()).index.len(), 6);
    }

    #[test]
    fn threshold_two_meters() {
        let g = graph(&[[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]], vec![]);
        let e = build_edges(&g, 2, &EdgeConfig::new(2.0, false).unwrap());
        assert_eq!(e.index, vec![[0, 1], [1, 0]]);
        assert_eq!(e.features, array![[0.0, 0.0, 1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0, 0.0]]);
    }

    #[test]
    fn ties_at_tau_are_excluded() {
        let g = graph(&[[0.0; 3], [1.0, 0.0, 0.0]], vec![]);
        assert!(build_edges(&g, 2, &EdgeConfig::new(1.0, false).unwrap()).index.is_empty());
    }

    #[test]
    fn semantic_and_geometric_edges_merge() {
        let sem = vec![
            SemanticEdge { source: 0, target: 1, relation: 0 },
            SemanticEdge { source: 0, target: 1, relation: 1 },
            SemanticEdge { source: 2, target: 0, relation: 1 },
        ];
        let g = graph(&[[0.0; 3], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]], sem);
        let e = build_edges(&g, 2, &EdgeConfig::new(2.0, true).unwrap());
        assert_eq!(e.index, vec![[0, 1], [1, 0], [2, 0]]);
        assert_eq!(e.features.row(0).to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(e.features.row(1).to_vec(), vec![0.0, 0.0, -1.0, 0.0, 0.0]);
        assert_eq!(e.features.row(2).to_vec(), vec![0.0, 1.0, -5.0, 0.0, 0.0]);

        let sem_only = build_edges(&g, 2, &EdgeConfig::new(0.0, true).unwrap());
        assert_eq!(sem_only.index, vec![[0, 1], [2, 0]]);
    }

    #[test]
    fn pca_exact_low_rank() {
        // Points in span{e0 + e3, e5 - e7} of R^10.
        let mut data = Array2::zeros((20, 10));
        for i in 0..20 {
            let (s, t) = ((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos());
            data[[i, 0]] = s;
            data[[i, 3]] = s;
            data[[i, 5]] = t;
            data[[i, 7]] = -t;
        }
        let m = fit_pca(&data, 2).unwrap();
        assert!((m.retained_variance() - 1.0).abs() < 1e-9);
        assert!(!m.rank_deficient);
        let deficient = fit_pca(&data, 3).unwrap();
        assert!(deficient.rank_deficient);
        assert_eq!(deficient.components.row(2).iter().map(|v| v.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn pca_identical_vectors_flagged() {
        let data = Array2::from_elem((5, 4), 1.0);
        let m = fit_pca(&data, 2).unwrap();
        assert!(m.rank_deficient);
        assert_eq!(m.retained_variance(), 0.0);
        assert!(m.transform(data.row(0)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pca_preconditions() {
        let data = Array2::zeros((3, 4));
        assert!(fit_pca(&data, 5).is_err());
        assert!(fit_pca(&data, 4).is_err());
        assert!(fit_pca(&data, 0).is_err());
        let m = fit_pca(&Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64), 2).unwrap();
        assert!(matches!(m.transform(ArrayView1::from(&[1.0, 2.0][..])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pca_transform_of_mean_and_component() {
        let data = Array2::from_shape_fn((30, 6), |(i, j)| ((i * 31 + j * 17) % 11) as f64 / 11.0);
        let m = fit_pca(&data, 3).unwrap();
        let z = m.transform(m.mean.view()).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-15));
        let v = &m.mean + &m.components.row(0);
        let y = m.transform(v.view()).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!(y[1].abs() < 1e-12 && y[2].abs() < 1e-12);
    }

    #[test]
    fn tau_spec_parsing() {
        assert_eq!("p75".parse::<TauSpec>().unwrap(), TauSpec::Percentile(75.0));
        assert_eq!("2.5".parse::<TauSpec>().unwrap(), TauSpec::Meters(2.5));
        assert_eq!("inf".parse::<TauSpec>().unwrap(), TauSpec::Meters(f64::INFINITY));
        assert!("p101".parse::<TauSpec>().is_err());
        assert!("-1".parse::<TauSpec>().is_err());
        let json = serde_json::to_string(&TauSpec::Percentile(50.0)).unwrap();
        assert_eq!(serde_json::from_str::<TauSpec>(&json).unwrap(), TauSpec::Percentile(50.0));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 100.0), 4.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
        let g = graph(&[[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], vec![]);
        // distances 1, 3, 2
        assert_eq!(TauSpec::Percentile(50.0).resolve([&g]), 2.0);
        assert_eq!(TauSpec::Percentile(0.0).resolve([&g]), 0.0);
    }

    #[test]
    fn edge_config_serializes_infinity() {
        let cfg = EdgeConfig::new(f64::INFINITY, true).unwrap();
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<EdgeConfig>(&s).unwrap(), cfg);
        assert!(EdgeConfig::new(-0.5, false).is_err());
    }

    #[test]
    fn single_node_embedding() {
        let t = tax();
        let g = graph(&[[0.0; 3]], vec![]);
        let data = Array2::from_shape_fn((8, 5), |(i, j)| ((i + j) % 2) as f64);
        let pca = fit_pca(&data, 2).unwrap();
        let eg = embed(&g, &t, &pca, &EdgeConfig::new(5.0, true).unwrap()).unwrap();
        assert_eq!(eg.node_features.dim(), (1, 2));
        assert_eq!(eg.num_edges(), 0);
        assert_eq!(eg.edge_features.ncols(), 5);
        eg.validate().unwrap();
        assert_eq!(eg, embed(&g, &t, &pca, &EdgeConfig::new(5.0, true).unwrap()).unwrap());
    }
}
