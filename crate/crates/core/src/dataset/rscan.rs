//! Ingestion of graph-level exports in the 3RScan / 3DSSG directory layout.
//!
//! ```text
//! <root>/3RScan.json               [{ "reference": <scan>, "type": "train"|"validation"|"test",
//!                                     "scans": [{ "reference": <rescan>, "transform": [16 numbers]? }] }]
//! <root>/objects.json              { "scans": [{ "scan": <id>, "objects": [{ "id", "label",
//!                                     "attributes": { <category>: [names] }, "affordances": [names] }] }] }
//! <root>/relationships.json        { "scans": [{ "scan": <id>, "relationships": [[src, tgt, idx, name]] }] }
//! <root>/<scan>/semseg.v2.json     { "segGroups": [{ "objectId", "obb": { "centroid": [x, y, z] } }] }
//! ```
//!
//! Each reference scan and its rescans form one environment; the reference is
//! timestamp 0 and rescans follow in listed order. Rescan centroids are mapped
//! into the reference frame with the column-major 4x4 `transform` when given.
//! Unknown fields are ignored. Objects whose label is not a taxonomy class,
//! or that have no centroid, are dropped and counted; so are unknown
//! attribute and relationship names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{ClassStats, Dataset, Environment, LabelConfig, Sample, Split};
use crate::error::{Error, Result};
use crate::graph::{parse_json, ObjectId, ObjectNode, ScanInfo, SceneGraph, SemanticEdge, Taxonomy, Vec3};

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum IdRepr {
    Num(u64),
    Str(String),
}

impl IdRepr {
    fn parse(&self) -> Option<ObjectId> {
        match self {
            IdRepr::Num(n) => Some(*n),
            IdRepr::Str(s) => s.trim().parse().ok(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RescanEntry {
    reference: String,
    #[serde(default)]
    transform: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct ReferenceEntry {
    reference: String,
    #[serde(default, rename = "type")]
    kind: Option<String>,
    #[serde(default)]
    scans: Vec<RescanEntry>,
}

#[derive(Debug, Deserialize)]
struct ObjectEntry {
    id: IdRepr,
    label: String,
    #[serde(default)]
    attributes: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    affordances: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct ObjectScan {
    scan: String,
    objects: Vec<ObjectEntry>,
}

#[derive(Debug, Deserialize)]
struct ObjectsFile {
    scans: Vec<ObjectScan>,
}

#[derive(Debug, Deserialize)]
struct RelationshipScan {
    scan: String,
    relationships: Vec<(IdRepr, IdRepr, serde_json::Value, String)>,
}

#[derive(Debug, Deserialize)]
struct RelationshipsFile {
    scans: Vec<RelationshipScan>,
}

#[derive(Debug, Deserialize)]
struct Obb {
    centroid: Vec3,
}

#[derive(Debug, Deserialize)]
struct SegGroup {
    #[serde(rename = "objectId")]
    object_id: IdRepr,
    obb: Obb,
}

#[derive(Debug, Deserialize)]
struct SemSeg {
    #[serde(rename = "segGroups")]
    seg_groups: Vec<SegGroup>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IngestReport {
    pub environments: usize,
    pub scans: usize,
    pub objects: usize,
    pub samples: usize,
    pub skipped_environments: usize,
    pub skipped_scans: usize,
    pub skipped_objects: usize,
    pub skipped_attributes: usize,
    pub skipped_relationships: usize,
    pub stats: ClassStats,
}

impl std::fmt::Display for IngestReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "environments={} scans={} objects={} samples={} skipped: environments={} scans={} objects={} attributes={} relationships={}",
            self.environments,
            self.scans,
            self.objects,
            self.samples,
            self.skipped_environments,
            self.skipped_scans,
            self.skipped_objects,
            self.skipped_attributes,
            self.skipped_relationships
        )?;
        for (c, name) in super::VARIABILITY_NAMES.iter().enumerate() {
            write!(f, " {name}_rate={:.4}", self.stats.positive_rate(c))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub dataset: Dataset,
    pub samples: Vec<Sample>,
    pub report: IngestReport,
}

fn read_optional<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, &path.display().to_string()).map(Some)
}

fn apply_transform(m: Option<&[f64]>, p: Vec3) -> Vec3 {
    match m {
        Some(m) if m.len() == 16 => [
            m[0] * p[0] + m[4] * p[1] + m[8] * p[2] + m[12],
            m[1] * p[0] + m[5] * p[1] + m[9] * p[2] + m[13],
            m[2] * p[0] + m[6] * p[1] + m[10] * p[2] + m[14],
        ],
        _ => p,
    }
}

fn split_of(kind: Option<&str>) -> Split {
    match kind {
        Some("validation") | Some("val") => Split::Val,
        Some("test") => Split::Test,
        _ => Split::Train,
    }
}

pub fn ingest_3rscan_layout(root: impl AsRef<Path>, tax: &Taxonomy, cfg: &LabelConfig) -> Result<Ingested> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "3RScan root is not a directory"),
        ));
    }
    let mut report = IngestReport::default();
    let references: Vec<ReferenceEntry> = read_optional(&root.join("3RScan.json"))?.unwrap_or_default();
    let objects: ObjectsFile =
        read_optional(&root.join("objects.json"))?.unwrap_or(ObjectsFile { scans: Vec::new() });
    let relationships: RelationshipsFile =
        read_optional(&root.join("relationships.json"))?.unwrap_or(RelationshipsFile { scans: Vec::new() });

    let objects_by_scan: BTreeMap<&str, &ObjectScan> = objects.scans.iter().map(|s| (s.scan.as_str(), s)).collect();
    let rels_by_scan: BTreeMap<&str, &RelationshipScan> =
        relationships.scans.iter().map(|s| (s.scan.as_str(), s)).collect();

    let mapped: BTreeSet<&str> = references
        .iter()
        .flat_map(|r| std::iter::once(r.reference.as_str()).chain(r.scans.iter().map(|s| s.reference.as_str())))
        .collect();
    let unmapped = objects_by_scan.keys().filter(|s| !mapped.contains(*s)).count();
    if unmapped > 0 {
        log::warn!("{unmapped} scan(s) in objects.json have no reference mapping and are skipped");
        report.skipped_scans += unmapped;
    }

    let mut environments = Vec::new();
    for r in &references {
        let members = std::iter::once((r.reference.as_str(), None))
            .chain(r.scans.iter().map(|s| (s.reference.as_str(), s.transform.as_deref())));
        let mut scans = Vec::new();
        for (scan_id, transform) in members {
            let Some(obj_scan) = objects_by_scan.get(scan_id) else {
                log::warn!("scan `{scan_id}` has no entry in objects.json; skipped");
                report.skipped_scans += 1;
                continue;
            };
            let semseg: Option<SemSeg> = read_optional(&root.join(scan_id).join("semseg.v2.json"))?;
            let Some(semseg) = semseg else {
                log::warn!("scan `{scan_id}` has no semseg.v2.json; skipped");
                report.skipped_scans += 1;
                continue;
            };
            let centroids: BTreeMap<ObjectId, Vec3> = semseg
                .seg_groups
                .iter()
                .filter_map(|g| g.object_id.parse().map(|id| (id, g.obb.centroid)))
                .collect();
            let mut nodes = Vec::new();
            for o in &obj_scan.objects {
                let (Some(id), Ok(class)) = (o.id.parse(), tax.class_index(&o.label)) else {
                    report.skipped_objects += 1;
                    continue;
                };
                let Some(&c) = centroids.get(&id) else {
                    report.skipped_objects += 1;
                    continue;
                };
                let mut attrs = Vec::new();
                for name in o.attributes.values().flatten().chain(&o.affordances) {
                    match tax.attribute_index(name) {
                        Ok(a) => attrs.push(a),
                        Err(_) => report.skipped_attributes += 1,
                    }
                }
                nodes.push(ObjectNode::new(id, class, attrs, apply_transform(transform, c)));
            }
            nodes.sort_by_key(|n| n.id);
            nodes.dedup_by_key(|n| n.id);
            let ids: BTreeSet<ObjectId> = nodes.iter().map(|n| n.id).collect();
            let mut edges = BTreeSet::new();
            if let Some(rs) = rels_by_scan.get(scan_id) {
                for (s, t, _, name) in &rs.relationships {
                    match (s.parse(), t.parse(), tax.relation_index(name)) {
                        (Some(s), Some(t), Ok(rel)) if s != t && ids.contains(&s) && ids.contains(&t) => {
                            edges.insert(SemanticEdge::new(s, t, rel));
                        }
                        _ => report.skipped_relationships += 1,
                    }
                }
            }
            let info = ScanInfo {
                environment_id: r.reference.clone(),
                scan_id: scan_id.to_string(),
                timestamp: scans.len() as u32,
                taxonomy_name: tax.name().to_string(),
            };
            report.objects += nodes.len();
            scans.push(SceneGraph::new(info, nodes, edges.into_iter().collect(), tax)?);
        }
        if scans.is_empty() {
            log::warn!("environment `{}` has no usable scans; skipped", r.reference);
            report.skipped_environments += 1;
            continue;
        }
        report.scans += scans.len();
        environments.push(Environment {
            id: r.reference.clone(),
            split: split_of(r.kind.as_deref()),
            scans,
        });
    }
    environments.sort_by(|a, b| a.id.cmp(&b.id));
    report.environments = environments.len();
    let dataset = Dataset {
        taxonomy: tax.clone(),
        environments,
    };
    let samples = dataset.all_samples(cfg)?;
    report.samples = samples.len();
    report.stats = ClassStats::from_samples(&samples);
    Ok(Ingested {
        dataset,
        samples,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_major_transform() {
        let mut m = vec![0.0; 16];
        m[0] = 1.0;
        m[5] = 1.0;
        m[10] = 1.0;
        m[15] = 1.0;
        m[12] = 2.0;
        m[14] = -1.0;
        assert_eq!(apply_transform(Some(&m), [1.0, 1.0, 1.0]), [3.0, 1.0, 0.0]);
        assert_eq!(apply_transform(None, [1.0, 1.0, 1.0]), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        let tax = crate::graph::tests::small_taxonomy();
        let out = ingest_3rscan_layout(dir.path(), &tax, &LabelConfig::default()).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.report, IngestReport::default());
    }
}
