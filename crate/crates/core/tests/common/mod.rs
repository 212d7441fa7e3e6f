//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use ndarray::Array2;
use rand::Rng;
use vsg_core::dataset::synthetic::{ChangeEvent, ChangeLog, GeneratorSpec};
use vsg_core::dataset::{LabelConfig, VariabilityLabel};
use vsg_core::embedding::EmbeddedGraph;
use vsg_core::graph::{distance, ObjectId, ObjectNode, ScanInfo, SceneGraph, Taxonomy, Vec3};
use vsg_core::nn::{Gradients, NamedArray, Params};
use vsg_core::planner::Episode;
use vsg_core::rng::seeded;
use vsg_core::training::TrainSetup;

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The `model` section of `configs/benchmark.json`.
pub fn benchmark_setup() -> TrainSetup {
    let path = workspace_root().join("configs/benchmark.json");
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let v: serde_json::Value = serde_json::from_str(&text).expect("benchmark config is JSON");
    serde_json::from_value(v["model"].clone()).expect("model section parses")
}

pub const BENCHMARK_DATA_SEED: u64 = 2024;
pub const PLANNER_DATA_SEED: u64 = 77;
pub const PLANNER_EPISODE_SEED: u64 = 99;

pub fn small_spec(environments: usize) -> GeneratorSpec {
    let mut spec = GeneratorSpec::indoor();
    spec.environments = environments;
    spec
}

// ---------------------------------------------------------------- networks

pub fn named(params: &Params) -> BTreeMap<String, NamedArray> {
    params.to_named().into_iter().map(|a| (a.name.clone(), a)).collect()
}

/// Straight-line MLP: affine layers `prefix.{k}.weight/bias`, ReLU between.
pub fn mlp_oracle(p: &BTreeMap<String, NamedArray>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut k = 0;
    while let Some(w) = p.get(&format!("{prefix}.{k}.weight")) {
        let b = &p[&format!("{prefix}.{k}.bias")];
        let [rows, cols] = w.shape;
        assert_eq!(cols, h.len());
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = b.data[r];
            for c in 0..cols {
                acc += w.data[r * cols + c] * h[c];
            }
            out[r] = acc;
        }
        k += 1;
        if p.contains_key(&format!("{prefix}.{k}.weight")) {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = out;
    }
    h
}

/// One MP-Conv layer evaluated node by node: own transform plus, for every
/// incoming edge, the source features times the edge gate.
pub fn mp_conv_oracle(
    p: &BTreeMap<String, NamedArray>,
    prefix: &str,
    z: &[Vec<f64>],
    edges: &[[usize; 2]],
    edge_features: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let mut zi = mlp_oracle(p, &format!("{prefix}.f"), &z[i]);
        for (k, &[s, t]) in edges.iter().enumerate() {
            if t != i {
                continue;
            }
            let g = mlp_oracle(p, &format!("{prefix}.h"), &edge_features[k]);
            for c in 0..zi.len() {
                let gate = if g.len() == 1 { g[0] } else { g[c] };
                zi[c] += z[s][c] * gate;
            }
        }
        out.push(zi);
    }
    out
}

pub fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

/// Random graph with `n` nodes; each ordered pair is an edge with
/// probability `edge_prob`.
pub fn random_embedded<R: Rng>(rng: &mut R, n: usize, dim: usize, edge_dim: usize, edge_prob: f64) -> EmbeddedGraph {
    let mut edge_index = Vec::new();
    for s in 0..n {
        for t in 0..n {
            if s != t && rng.random_bool(edge_prob) {
                edge_index.push([s, t]);
            }
        }
    }
    EmbeddedGraph {
        node_features: random_matrix(rng, n, dim),
        edge_features: random_matrix(rng, edge_index.len(), edge_dim),
        edge_index,
        node_ids: (1..=n as u64).collect(),
    }
}

pub fn random_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<VariabilityLabel> {
    (0..n)
        .map(|_| {
            let instance = rng.random_bool(0.2);
            VariabilityLabel {
                position: !instance && rng.random_bool(0.4),
                state: !instance && rng.random_bool(0.4),
                instance,
                mask_position: !instance,
                mask_state: !instance && rng.random_bool(0.6),
            }
        })
        .collect()
}

// ------------------------------------------------------ finite differences

/// Largest relative error, per parameter tensor, between `analytic` and
/// central differences of `loss`:
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-7)` with Euclidean norms.
///
/// Entries whose forward and backward one-sided differences disagree sit on
/// a ReLU kink within `h` and are left out of both norms.
pub fn finite_difference_error(params: &Params, analytic: &Gradients, mut loss: impl FnMut(&Params) -> f64) -> f64 {
    let h = 1e-6;
    let base = loss(params);
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        let shape = params.get(id).dim();
        let mut a = analytic.get(id).clone();
        let mut numeric = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = p.get(id)[[r, c]];
                p.get_mut(id)[[r, c]] = orig + h;
                let up = loss(&p);
                p.get_mut(id)[[r, c]] = orig - h;
                let down = loss(&p);
                p.get_mut(id)[[r, c]] = orig;
                let forward = (up - base) / h;
                let backward = (base - down) / h;
                if (forward - backward).abs() > 1e-4 * forward.abs().max(backward.abs()).max(1.0) {
                    a[[r, c]] = 0.0;
                    continue;
                }
                numeric[[r, c]] = (up - down) / (2.0 * h);
            }
        }
        let diff = (&a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt()).max(1e-7);
        worst = worst.max(diff / scale);
    }
    worst
}

// ------------------------------------------------------------------ PCA

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in decreasing order and the matching eigenvectors as rows.
pub fn jacobi_eigen(m: &Array2<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[[i, j]] * a[[i, j]];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| a[[y, y]].total_cmp(&a[[x, x]]));
    let values = idx.iter().map(|&i| a[[i, i]]).collect();
    let vectors = idx.iter().map(|&i| v.column(i).to_vec()).collect();
    (values, vectors)
}

/// Sample covariance of the rows of `data`.
pub fn covariance(data: &Array2<f64>) -> Array2<f64> {
    let (n, d) = data.dim();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for c in 0..d {
            mean[c] += data[[r, c]] / n as f64;
        }
    }
    let mut cov = Array2::zeros((d, d));
    for r in 0..n {
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += (data[[r, i]] - mean[i]) * (data[[r, j]] - mean[j]) / (n as f64 - 1.0);
            }
        }
    }
    cov
}

// ------------------------------------------------------------------ TSP

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn route_length(points: &[Vec3], start: &Vec3, order: &[usize]) -> f64 {
    let mut at = *start;
    let mut total = 0.0;
    for &i in order {
        total += dist(&at, &points[i]);
        at = points[i];
    }
    total
}

/// Shortest open path over all permutations (Heap's algorithm).
pub fn brute_force_tsp(points: &[Vec3], start: &Vec3) -> f64 {
    let n = points.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = route_length(points, start, &perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(route_length(points, start, &perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

pub fn random_points<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), rng.random_range(0.0..2.0)])
        .collect()
}

// --------------------------------------------------------- change replay

/// Object presence, state and move history replayed from a change log alone.
pub struct Replay {
    /// `present[k]`: ids in scan `k`.
    pub present: Vec<BTreeSet<ObjectId>>,
    /// `state[k][id]`.
    pub state: Vec<BTreeMap<ObjectId, Option<String>>>,
    /// `moves[k]`: ids moved between scan `k` and `k + 1`.
    pub moves: Vec<BTreeSet<ObjectId>>,
    pub class: BTreeMap<ObjectId, String>,
}

impl Replay {
    pub fn new(log: &ChangeLog) -> Self {
        let mut present = BTreeSet::new();
        let mut state = BTreeMap::new();
        let mut class = BTreeMap::new();
        for o in &log.initial {
            present.insert(o.id);
            state.insert(o.id, o.state.clone());
            class.insert(o.id, o.class.clone());
        }
        let mut r = Replay {
            present: vec![present.clone()],
            state: vec![state.clone()],
            moves: Vec::new(),
            class,
        };
        for events in &log.transitions {
            let mut moved = BTreeSet::new();
            for e in events {
                match e {
                    ChangeEvent::Moved { id, .. } => {
                        moved.insert(*id);
                    }
                    ChangeEvent::StateChanged { id, to, .. } => {
                        state.insert(*id, Some(to.clone()));
                    }
                    ChangeEvent::Disappeared { id } => {
                        present.remove(id);
                    }
                    ChangeEvent::Appeared { id, class, state: s } => {
                        present.insert(*id);
                        state.insert(*id, s.clone());
                        r.class.insert(*id, class.clone());
                    }
                }
            }
            r.present.push(present.clone());
            r.state.push(state.clone());
            r.moves.push(moved);
        }
        r
    }

    /// Expected label of object `id` (present in scan `a`) for the pair `a -> b`.
    pub fn label(&self, id: ObjectId, a: usize, b: usize) -> VariabilityLabel {
        let stateful = self.state[a][&id].is_some();
        if !self.present[b].contains(&id) {
            return VariabilityLabel {
                instance: true,
                ..Default::default()
            };
        }
        let (lo, hi) = (a.min(b), a.max(b));
        VariabilityLabel {
            position: (lo..hi).any(|k| self.moves[k].contains(&id)),
            state: self.state[a][&id] != self.state[b][&id],
            instance: false,
            mask_position: true,
            mask_state: stateful,
        }
    }
}

// -------------------------------------------------------- planner fixtures

pub fn taxonomy() -> Taxonomy {
    GeneratorSpec::indoor().taxonomy().unwrap()
}

pub fn scene(tax: &Taxonomy, scan: &str, objects: &[(ObjectId, Vec3)]) -> SceneGraph {
    let info = ScanInfo {
        environment_id: "fixture".into(),
        scan_id: scan.into(),
        timestamp: 0,
        taxonomy_name: tax.name().into(),
    };
    let nodes = objects.iter().map(|&(id, p)| ObjectNode::new(id, 0, [], p)).collect();
    SceneGraph::new(info, nodes, Vec::new(), tax).unwrap()
}

/// `moved` objects shift by one meter; `removed` ones are absent afterwards.
pub fn episode(objects: &[(ObjectId, Vec3)], moved: &[ObjectId], removed: &[ObjectId], n: usize) -> Episode {
    let tax = taxonomy();
    let after: Vec<_> = objects
        .iter()
        .filter(|(id, _)| !removed.contains(id))
        .map(|&(id, p)| if moved.contains(&id) { (id, [p[0], p[1] + 1.0, p[2]]) } else { (id, p) })
        .collect();
    Episode::new(scene(&tax, "a", objects), scene(&tax, "b", &after), n, &tax, &LabelConfig::default()).unwrap()
}

/// Changed objects in a tight cluster far from the rest; unchanged ids grow
/// with distance to the cluster so the VSG extras lie on the way there.
pub fn separable(seed: u64) -> Episode {
    let mut rng = seeded(seed, &[6]);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let centre = [10.0 * angle.cos(), 10.0 * angle.sin(), 0.5];
    let k = rng.random_range(1..=4);
    let changed: Vec<Vec3> = (0..k)
        .map(|_| [centre[0] + rng.random_range(-0.5..0.5), centre[1] + rng.random_range(-0.5..0.5), 0.5])
        .collect();
    let mut unchanged: Vec<Vec3> = (0..rng.random_range(10..20))
        .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..2.0)])
        .collect();
    unchanged.sort_by(|a, b| distance(a, &centre).total_cmp(&distance(b, &centre)));
    let mut objects: Vec<(ObjectId, Vec3)> = unchanged.iter().enumerate().map(|(i, &p)| (i as ObjectId + 1, p)).collect();
    let ids: Vec<ObjectId> = (0..k).map(|i| 1000 + i as ObjectId).collect();
    objects.extend(ids.iter().copied().zip(changed));
    episode(&objects, &ids, &[], rng.random_range(1..=k))
}
