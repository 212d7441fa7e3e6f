//! Scene-graph data model.
//!
//! A [`SceneGraph`] is one scan of one environment: object instances with a
//! semantic class, a set of attributes and a world-frame position, plus typed
//! directed relationships between objects. Class, attribute and relationship
//! names live in a [`Taxonomy`]; in memory everything is an index into it, on
//! disk everything is a name.
//!
//! Files are JSON with a fixed field order. Writing a graph that was read from
//! a canonical file reproduces that file byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ObjectId = u64;
pub type Vec3 = [f64; 3];

pub const SCENE_FORMAT_VERSION: u32 = 1;

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    norm(&sub(b, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Static,
    State,
    Affordance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub kind: AttributeKind,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, kind: AttributeKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyFile {
    name: String,
    classes: Vec<String>,
    attributes: Vec<AttributeDef>,
    relationships: Vec<String>,
}

/// Ordered vocabularies of object classes, attributes and relationships.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct Taxonomy {
    name: String,
    classes: Vec<String>,
    attributes: Vec<AttributeDef>,
    relationships: Vec<String>,
    class_lookup: HashMap<String, usize>,
    attribute_lookup: HashMap<String, usize>,
    relation_lookup: HashMap<String, usize>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.classes == other.classes
            && self.attributes == other.attributes
            && self.relationships == other.relationships
    }
}

fn build_lookup<'a>(
    what: &str,
    names: impl Iterator<Item = &'a String>,
) -> Result<HashMap<String, usize>> {
    let mut lookup = HashMap::new();
    for (i, name) in names.enumerate() {
        if lookup.insert(name.clone(), i).is_some() {
            return Err(Error::Taxonomy(format!("duplicate {what} `{name}`")));
        }
    }
    if lookup.is_empty() {
        return Err(Error::Taxonomy(format!("{what} list is empty")));
    }
    Ok(lookup)
}

impl TryFrom<TaxonomyFile> for Taxonomy {
    type Error = Error;

    fn try_from(f: TaxonomyFile) -> Result<Self> {
        Taxonomy::new(f.name, f.classes, f.attributes, f.relationships)
    }
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(t: Taxonomy) -> Self {
        TaxonomyFile {
            name: t.name,
            classes: t.classes,
            attributes: t.attributes,
            relationships: t.relationships,
        }
    }
}

impl Taxonomy {
    pub fn new(
        name: impl Into<String>,
        classes: Vec<String>,
        attributes: Vec<AttributeDef>,
        relationships: Vec<String>,
    ) -> Result<Self> {
        let class_lookup = build_lookup("class", classes.iter())?;
        let attribute_lookup = build_lookup("attribute", attributes.iter().map(|a| &a.name))?;
        let relation_lookup = build_lookup("relationship", relationships.iter())?;
        if !attributes.iter().any(|a| a.kind == AttributeKind::State) {
            return Err(Error::Taxonomy(
                "at least one attribute must be of kind `state`".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            classes,
            attributes,
            relationships,
            class_lookup,
            attribute_lookup,
            relation_lookup,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn attributes(&self) -> &[AttributeDef] {
        &self.attributes
    }

    pub fn relationships(&self) -> &[String] {
        &self.relationships
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_relationships(&self) -> usize {
        self.relationships.len()
    }

    /// Length of the class one-hot plus attribute multi-hot encoding.
    pub fn binary_dim(&self) -> usize {
        self.classes.len() + self.attributes.len()
    }

    pub fn is_state(&self, attribute: usize) -> bool {
        self.attributes
            .get(attribute)
            .is_some_and(|a| a.kind == AttributeKind::State)
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_lookup
            .get(name)
            .copied()
            .ok_or_else(|| Error::Taxonomy(format!("unknown class `{name}` in `{}`", self.name)))
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attribute_lookup.get(name).copied().ok_or_else(|| {
            Error::Taxonomy(format!("unknown attribute `{name}` in `{}`", self.name))
        })
    }

    pub fn relation_index(&self, name: &str) -> Result<usize> {
        self.relation_lookup.get(name).copied().ok_or_else(|| {
            Error::Taxonomy(format!("unknown relationship `{name}` in `{}`", self.name))
        })
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        parse_json::<TaxonomyFile>(text, origin)?.try_into()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&TaxonomyFile::from(self.clone()))
            .expect("taxonomy serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// Deserializes JSON, turning failures into [`Error::Parse`] with line,
/// column and the dotted path of the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse {
            path: origin.to_string(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| Error::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        field: ".".into(),
        message: e.to_string(),
    })?;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub id: ObjectId,
    pub class_index: usize,
    /// Sorted, without duplicates.
    pub attributes: Vec<usize>,
    pub position: Vec3,
}

impl ObjectNode {
    pub fn new(
        id: ObjectId,
        class_index: usize,
        attributes: impl IntoIterator<Item = usize>,
        position: Vec3,
    ) -> Self {
        let mut attributes: Vec<usize> = attributes.into_iter().collect();
        attributes.sort_unstable();
        attributes.dedup();
        Self {
            id,
            class_index,
            attributes,
            position,
        }
    }

    pub fn has_attribute(&self, attribute: usize) -> bool {
        self.attributes.binary_search(&attribute).is_ok()
    }

    /// The attribute subset that are states under `tax`.
    pub fn state_attributes<'a>(&'a self, tax: &'a Taxonomy) -> impl Iterator<Item = usize> + 'a {
        self.attributes.iter().copied().filter(|&a| tax.is_state(a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SemanticEdge {
    pub source: ObjectId,
    pub target: ObjectId,
    pub relation: usize,
}

impl SemanticEdge {
    pub fn new(source: ObjectId, target: ObjectId, relation: usize) -> Self {
        Self {
            source,
            target,
            relation,
        }
    }
}

/// Identifying metadata of a scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanInfo {
    pub environment_id: String,
    pub scan_id: String,
    pub timestamp: u32,
    pub taxonomy_name: String,
}

/// One scan: objects plus typed semantic relationships. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    info: ScanInfo,
    nodes: Vec<ObjectNode>,
    semantic_edges: Vec<SemanticEdge>,
    index: BTreeMap<ObjectId, usize>,
}

impl SceneGraph {
    /// Validates every invariant against `tax` and builds the graph.
    pub fn new(
        info: ScanInfo,
        nodes: Vec<ObjectNode>,
        semantic_edges: Vec<SemanticEdge>,
        tax: &Taxonomy,
    ) -> Result<Self> {
        if info.taxonomy_name != tax.name() {
            return Err(Error::Taxonomy(format!(
                "scan `{}` uses taxonomy `{}`, expected `{}`",
                info.scan_id,
                info.taxonomy_name,
                tax.name()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id, i).is_some() {
                return Err(Error::Graph(format!("duplicate object id {}", node.id)));
            }
            if node.class_index >= tax.num_classes() {
                return Err(Error::Taxonomy(format!(
                    "object {}: class index {} out of range",
                    node.id, node.class_index
                )));
            }
            if let Some(&a) = node.attributes.iter().find(|&&a| a >= tax.num_attributes()) {
                return Err(Error::Taxonomy(format!(
                    "object {}: attribute index {a} out of range",
                    node.id
                )));
            }
            if node.attributes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Graph(format!(
                    "object {}: attributes not sorted and unique",
                    node.id
                )));
            }
            if node.position.iter().any(|c| !c.is_finite()) {
                return Err(Error::Graph(format!("object {}: non-finite position", node.id)));
            }
        }
        for e in &semantic_edges {
            if e.source == e.target {
                return Err(Error::Graph(format!("self-edge on object {}", e.source)));
            }
            for id in [e.source, e.target] {
                if !index.contains_key(&id) {
                    return Err(Error::Graph(format!("edge endpoint {id} is not a node")));
                }
            }
            if e.relation >= tax.num_relationships() {
                return Err(Error::Taxonomy(format!(
                    "edge {}->{}: relation index {} out of range",
                    e.source, e.target, e.relation
                )));
            }
        }
        Ok(Self {
            info,
            nodes,
            semantic_edges,
            index,
        })
    }

    pub fn info(&self) -> &ScanInfo {
        &self.info
    }

    pub fn environment_id(&self) -> &str {
        &self.info.environment_id
    }

    pub fn scan_id(&self) -> &str {
        &self.info.scan_id
    }

    pub fn timestamp(&self) -> u32 {
        self.info.timestamp
    }

    pub fn taxonomy_name(&self) -> &str {
        &self.info.taxonomy_name
    }

    pub fn nodes(&self) -> &[ObjectNode] {
        &self.nodes
    }

    pub fn semantic_edges(&self) -> &[SemanticEdge] {
        &self.semantic_edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, id: ObjectId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn node(&self, id: ObjectId) -> Option<&ObjectNode> {
        self.index_of(id).map(|i| &self.nodes[i])
    }

    pub fn contains(&self, id: ObjectId) -> bool {
        self.index.contains_key(&id)
    }

    /// Position of `j` relative to `i` in the world frame: `r_j - r_i`.
    pub fn relative_position(&self, i: ObjectId, j: ObjectId) -> Result<Vec3> {
        let a = self.node(i).ok_or(Error::Lookup(i))?;
        let b = self.node(j).ok_or(Error::Lookup(j))?;
        Ok(sub(&b.position, &a.position))
    }

    pub fn centroid(&self) -> Vec3 {
        if self.nodes.is_empty() {
            return [0.0; 3];
        }
        let n = self.nodes.len() as f64;
        let mut c = [0.0; 3];
        for node in &self.nodes {
            for k in 0..3 {
                c[k] += node.position[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn from_json_str(text: &str, tax: &Taxonomy, origin: &str) -> Result<Self> {
        let file: SceneGraphFile = parse_json(text, origin)?;
        file.into_graph(tax)
    }

    pub fn load(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, tax, &path.display().to_string())
    }

    pub fn to_json_string(&self, tax: &Taxonomy) -> String {
        SceneGraphFile::from_graph(self, tax, None).to_json_string()
    }

    pub fn save(&self, path: impl AsRef<Path>, tax: &Taxonomy) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string(tax)).map_err(|e| Error::io(path, e))
    }
}

/// Per-node variability attribute of a VSG.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeVariability {
    pub p_position: f64,
    pub p_state: f64,
    pub p_instance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: ObjectId,
    pub class: String,
    pub attributes: Vec<String>,
    pub position: Vec3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variability: Option<NodeVariability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub source: ObjectId,
    pub target: ObjectId,
    pub relation: String,
}

/// On-disk layout of a scene graph (and, with `variability` filled in, of a
/// VSG). Field order here is the canonical write order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraphFile {
    pub format_version: u32,
    pub environment_id: String,
    pub scan_id: String,
    pub timestamp: u32,
    pub taxonomy: String,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

impl SceneGraphFile {
    pub fn from_graph(
        g: &SceneGraph,
        tax: &Taxonomy,
        variability: Option<&[NodeVariability]>,
    ) -> Self {
        let nodes = g
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                id: n.id,
                class: tax.classes()[n.class_index].clone(),
                attributes: n
                    .attributes
                    .iter()
                    .map(|&a| tax.attributes()[a].name.clone())
                    .collect(),
                position: n.position,
                variability: variability.map(|v| v[i]),
            })
            .collect();
        let edges = g
            .semantic_edges()
            .iter()
            .map(|e| EdgeRecord {
                source: e.source,
                target: e.target,
                relation: tax.relationships()[e.relation].clone(),
            })
            .collect();
        Self {
            format_version: SCENE_FORMAT_VERSION,
            environment_id: g.environment_id().to_string(),
            scan_id: g.scan_id().to_string(),
            timestamp: g.timestamp(),
            taxonomy: g.taxonomy_name().to_string(),
            nodes,
            edges,
        }
    }

    pub fn into_graph(self, tax: &Taxonomy) -> Result<SceneGraph> {
        if self.format_version != SCENE_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported scene-graph format_version {} (expected {SCENE_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let class_index = tax
                    .class_index(&n.class)
                    .map_err(|e| Error::Taxonomy(format!("object {}: {e}", n.id)))?;
                let attributes = n
                    .attributes
                    .iter()
                    .map(|a| tax.attribute_index(a))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| Error::Taxonomy(format!("object {}: {e}", n.id)))?;
                Ok(ObjectNode::new(n.id, class_index, attributes, n.position))
            })
            .collect::<Result<Vec<_>>>()?;
        let edges = self
            .edges
            .iter()
            .map(|e| {
                Ok(SemanticEdge {
                    source: e.source,
                    target: e.target,
                    relation: tax.relation_index(&e.relation)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SceneGraph::new(
            ScanInfo {
                environment_id: self.environment_id,
                scan_id: self.scan_id,
                timestamp: self.timestamp,
                taxonomy_name: self.taxonomy,
            },
            nodes,
            edges,
            tax,
        )
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        parse_json(text, origin)
    }
}

/// Class remapping from one taxonomy to a coarser (or otherwise different) one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMapping {
    source_classes: Vec<String>,
    table: Vec<Option<usize>>,
}

impl ClassMapping {
    pub fn new(source: &Taxonomy, table: Vec<Option<usize>>) -> Result<Self> {
        if table.len() != source.num_classes() {
            return Err(Error::dim("class mapping table", source.num_classes(), table.len()));
        }
        Ok(Self {
            source_classes: source.classes().to_vec(),
            table,
        })
    }

    pub fn identity(tax: &Taxonomy) -> Self {
        Self {
            source_classes: tax.classes().to_vec(),
            table: (0..tax.num_classes()).map(Some).collect(),
        }
    }

    /// Builds a mapping from `(source class, target class)` name pairs.
    pub fn from_names<'a>(
        source: &Taxonomy,
        target: &Taxonomy,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut table = vec![None; source.num_classes()];
        for (from, to) in pairs {
            table[source.class_index(from)?] = Some(target.class_index(to)?);
        }
        Self::new(source, table)
    }

    pub fn get(&self, class_index: usize) -> Option<usize> {
        self.table.get(class_index).copied().flatten()
    }
}

/// Rewrites node classes into `target`; attributes, positions and edges are
/// left untouched, so the target must share attribute and relationship lists.
pub fn map_taxonomy(g: &SceneGraph, mapping: &ClassMapping, target: &Taxonomy) -> Result<SceneGraph> {
    let nodes = g
        .nodes()
        .iter()
        .map(|n| {
            let class_index = mapping.get(n.class_index).ok_or_else(|| {
                let name = mapping
                    .source_classes
                    .get(n.class_index)
                    .map(String::as_str)
                    .unwrap_or("?");
                Error::Mapping(format!("no target for class `{name}` (object {})", n.id))
            })?;
            if class_index >= target.num_classes() {
                return Err(Error::Mapping(format!(
                    "target class index {class_index} out of range for `{}`",
                    target.name()
                )));
            }
            Ok(ObjectNode {
                class_index,
                ..n.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let info = ScanInfo {
        taxonomy_name: target.name().to_string(),
        ..g.info().clone()
    };
    SceneGraph::new(info, nodes, g.semantic_edges().to_vec(), target)
        .map_err(|e| Error::Mapping(format!("remapped graph invalid under `{}`: {e}", target.name())))
}
