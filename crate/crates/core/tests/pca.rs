mod common;

use std::collections::BTreeMap;

use common::{covariance, jacobi_eigen, random_matrix, small_spec};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use vsg_core::dataset::synthetic::generate_dataset;
use vsg_core::embedding::{binary_matrix, build_edges, embed, fit_pca, EdgeConfig, TauSpec};
use vsg_core::graph::SceneGraph;
use vsg_core::rng::seeded;

/// Columns scaled by distinct factors so eigenvalues are well separated.
fn anisotropic(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut x = random_matrix(&mut seeded(seed, &[1]), n, d);
    for (c, mut col) in x.columns_mut().into_iter().enumerate() {
        col *= 1.0 + 0.5 * c as f64;
    }
    // Mix columns so the principal axes are not the coordinate axes.
    let q = random_matrix(&mut seeded(seed, &[2]), d, d);
    x.dot(&q)
}

fn check_against_oracle(data: &Array2<f64>, dim: usize) {
    let pca = fit_pca(data, dim).unwrap();
    let (values, vectors) = jacobi_eigen(&covariance(data));
    let total: f64 = values.iter().sum();
    for k in 0..dim {
        let got = pca.components.row(k);
        let want = Array1::from(vectors[k].clone());
        let sign = if got.dot(&want) < 0.0 { -1.0 } else { 1.0 };
        let err = (&got - &(sign * &want)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-8, "component {k}: {err:e}");
        assert!((pca.explained_variance_ratio[k] - values[k] / total).abs() < 1e-8);
    }
}

#[test]
fn components_match_a_jacobi_eigendecomposition() {
    check_against_oracle(&anisotropic(1, 50, 8), 3);
    for (seed, d) in [(2, 12), (3, 20), (4, 32)] {
        check_against_oracle(&anisotropic(seed, 120, d), d / 3);
    }
}

#[test]
fn exact_low_rank_data_is_fully_explained() {
    for (seed, rank, d) in [(5, 2, 6), (6, 4, 16), (7, 7, 32)] {
        let a = random_matrix(&mut seeded(seed, &[1]), 60, rank);
        let b = random_matrix(&mut seeded(seed, &[2]), rank, d);
        let pca = fit_pca(&a.dot(&b), rank).unwrap();
        assert!(!pca.rank_deficient);
        assert!((pca.retained_variance() - 1.0).abs() < 1e-9, "{}", pca.retained_variance());
        // Asking for more than the rank flags it and zero-fills the surplus.
        let over = fit_pca(&a.dot(&b), rank + 1).unwrap();
        assert!(over.rank_deficient);
        assert!(over.components.row(rank).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn reconstruction_error_is_the_discarded_variance() {
    let data = anisotropic(8, 80, 10);
    let (values, _) = jacobi_eigen(&covariance(&data));
    for dim in 1..10 {
        let pca = fit_pca(&data, dim).unwrap();
        let mut sq = 0.0;
        for row in data.rows() {
            let back = pca.inverse_transform(pca.transform(row).unwrap().view()).unwrap();
            sq += (&back - &row).mapv(|v| v * v).sum();
        }
        let discarded: f64 = values[dim..].iter().sum();
        assert!((sq / 79.0 - discarded).abs() < 1e-8 * discarded.max(1.0));
    }
}

fn scans() -> (vsg_core::dataset::Dataset, Vec<SceneGraph>) {
    let (dataset, _) = generate_dataset(&small_spec(6), 11).unwrap();
    let scans = dataset.environments.iter().flat_map(|e| e.scans.clone()).collect();
    (dataset, scans)
}

fn id_pairs(g: &SceneGraph, index: &[[usize; 2]]) -> Vec<(u64, u64)> {
    let mut v: Vec<_> = index.iter().map(|&[s, t]| (g.nodes()[s].id, g.nodes()[t].id)).collect();
    v.sort();
    v
}

#[test]
fn geometric_edges_are_symmetric_and_grow_with_tau() {
    let (dataset, scans) = scans();
    let r = dataset.taxonomy.num_relationships();
    for g in &scans {
        let mut previous = Vec::new();
        for tau in [0.0, 0.5, 1.0, 2.0, 4.0, f64::INFINITY] {
            let e = build_edges(g, r, &EdgeConfig::new(tau, false).unwrap());
            let pairs = id_pairs(g, &e.index);
            for &(s, t) in &pairs {
                assert!(pairs.binary_search(&(t, s)).is_ok());
            }
            assert!(previous.iter().all(|p| pairs.binary_search(p).is_ok()));
            // Geometric-only edges carry no relationship bits and the
            // target-minus-source offset.
            for (row, &[s, t]) in e.index.iter().enumerate() {
                assert!((0..r).all(|k| e.features[[row, k]] == 0.0));
                for k in 0..3 {
                    let want = g.nodes()[t].position[k] - g.nodes()[s].position[k];
                    assert_eq!(e.features[[row, r + k]], want);
                }
            }
            previous = pairs;
        }
        let n = g.len();
        assert_eq!(previous.len(), n * (n - 1));
    }
}

#[test]
fn semantic_edges_are_kept_with_their_direction() {
    let (dataset, scans) = scans();
    let r = dataset.taxonomy.num_relationships();
    for g in &scans {
        let e = build_edges(g, r, &EdgeConfig::new(0.0, true).unwrap());
        let mut want: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
        for s in g.semantic_edges() {
            want.entry((s.source, s.target)).or_default().push(s.relation);
        }
        assert_eq!(e.index.len(), want.len());
        for (row, &[s, t]) in e.index.iter().enumerate() {
            let rels = &want[&(g.nodes()[s].id, g.nodes()[t].id)];
            for k in 0..r {
                assert_eq!(e.features[[row, k]] == 1.0, rels.contains(&k));
            }
        }
    }
}

#[test]
fn embedding_does_not_depend_on_node_order() {
    let (dataset, scans) = scans();
    let tax = &dataset.taxonomy;
    let pca = fit_pca(&binary_matrix(scans.iter(), tax), 16).unwrap();
    let tau = TauSpec::Percentile(50.0).resolve(scans.iter());
    let cfg = EdgeConfig::new(tau, true).unwrap();
    let mut rng = seeded(12, &[]);
    for g in &scans {
        let mut nodes = g.nodes().to_vec();
        nodes.shuffle(&mut rng);
        let shuffled = SceneGraph::new(g.info().clone(), nodes, g.semantic_edges().to_vec(), tax).unwrap();
        let a = embed(g, tax, &pca, &cfg).unwrap();
        let b = embed(&shuffled, tax, &pca, &cfg).unwrap();
        a.validate().unwrap();
        for (i, id) in a.node_ids.iter().enumerate() {
            let j = b.node_ids.iter().position(|x| x == id).unwrap();
            assert_eq!(a.node_features.row(i), b.node_features.row(j));
        }
        let edges = |eg: &vsg_core::embedding::EmbeddedGraph| -> BTreeMap<(u64, u64), Vec<f64>> {
            eg.edge_index
                .iter()
                .enumerate()
                .map(|(k, &[s, t])| ((eg.node_ids[s], eg.node_ids[t]), eg.edge_features.row(k).to_vec()))
                .collect()
        };
        assert_eq!(edges(&a), edges(&b));
    }
}
