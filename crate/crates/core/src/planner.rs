//! Active change detection on a previous map.
//!
//! A robot must find `n` changed objects. It moves point to point between
//! object positions of the previous map and checks each visited object.
//! Coverage tours every object on one TSP route; the VSG planner first tours
//! the `n + 3` objects with the highest variability score and, if that is not
//! enough, continues with a Coverage tour of the rest from where it stands.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_labels, Dataset, LabelConfig, Split};
use crate::error::{Error, Result};
use crate::graph::{distance, ObjectId, SceneGraph, Taxonomy, Vec3};
use crate::model::VariabilityModel;
use crate::par::{self, Execution};
use crate::rng::seeded;

/// Largest instance solved exactly.
pub const HELD_KARP_MAX: usize = 15;
/// Extra objects in the VSG planner's first tour beyond the `n` required.
pub const VSG_EXTRA: usize = 3;

/// Length of the open path `start -> points[order[0]] -> ...`.
pub fn path_length(points: &[Vec3], start: &Vec3, order: &[usize]) -> f64 {
    let mut at = start;
    let mut total = 0.0;
    for &i in order {
        total += distance(at, &points[i]);
        at = &points[i];
    }
    total
}

/// Exact shortest open path from `start` through every point.
pub fn held_karp(points: &[Vec3], start: &Vec3) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(n <= 20, "held_karp is exponential; {n} points is too many");
    let full = 1usize << n;
    let mut cost = vec![f64::INFINITY; full * n];
    let mut parent = vec![usize::MAX; full * n];
    for j in 0..n {
        cost[(1 << j) * n + j] = distance(start, &points[j]);
    }
    for mask in 1..full {
        for j in 0..n {
            if mask & (1 << j) == 0 {
                continue;
            }
            let c = cost[mask * n + j];
            if !c.is_finite() {
                continue;
            }
            for k in 0..n {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let nc = c + distance(&points[j], &points[k]);
                if nc < cost[next * n + k] {
                    cost[next * n + k] = nc;
                    parent[next * n + k] = j;
                }
            }
        }
    }
    let last_mask = full - 1;
    let mut end = 0;
    for j in 1..n {
        if cost[last_mask * n + j] < cost[last_mask * n + end] {
            end = j;
        }
    }
    let mut order = Vec::with_capacity(n);
    let (mut mask, mut j) = (last_mask, end);
    loop {
        order.push(j);
        let p = parent[mask * n + j];
        mask &= !(1 << j);
        if p == usize::MAX {
            break;
        }
        j = p;
    }
    order.reverse();
    order
}

/// Nearest-neighbour path from `start` that begins with `first`.
fn nearest_neighbor(points: &[Vec3], start: &Vec3, first: Option<usize>) -> Vec<usize> {
    let mut left: Vec<usize> = (0..points.len()).collect();
    let mut order = Vec::with_capacity(points.len());
    let mut at = *start;
    if let Some(f) = first {
        left.retain(|&i| i != f);
        order.push(f);
        at = points[f];
    }
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if distance(&at, &points[left[k]]) < distance(&at, &points[left[best]]) {
                best = k;
            }
        }
        let i = left.remove(best);
        order.push(i);
        at = points[i];
    }
    order
}

/// Improves an open path in place by segment reversals until no reversal
/// shortens it. Every accepted move strictly decreases the length.
pub fn two_opt(points: &[Vec3], start: &Vec3, order: &mut [usize]) {
    let n = order.len();
    let pos = |order: &[usize], k: usize| -> Vec3 {
        if k == 0 {
            *start
        } else {
            points[order[k - 1]]
        }
    };
    loop {
        let mut improved = false;
        for i in 0..n {
            for j in i + 1..n {
                // Reverse order[i..=j]; the path before i ends at pos(i).
                let a = pos(order, i);
                let (b, c) = (points[order[i]], points[order[j]]);
                let mut delta = distance(&a, &c) - distance(&a, &b);
                if j + 1 < n {
                    let d = points[order[j + 1]];
                    delta += distance(&b, &d) - distance(&c, &d);
                }
                if delta < -1e-12 {
                    order[i..=j].reverse();
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Moves segments of up to three consecutive points (either way round) to
/// the position where they shorten the path most, repeating while any move
/// helps. Returns whether anything changed.
pub fn or_opt(points: &[Vec3], start: &Vec3, order: &mut Vec<usize>) -> bool {
    let n = order.len();
    let at = |order: &[usize], k: usize| -> Vec3 { if k == 0 { *start } else { points[order[k - 1]] } };
    let mut changed = false;
    'restart: loop {
        for len in 1..=3.min(n) {
            for i in 0..=n - len {
                let j = i + len - 1;
                let (first, last) = (points[order[i]], points[order[j]]);
                let before = at(order, i);
                let gain = distance(&before, &first)
                    + if j + 1 < n {
                        let next = points[order[j + 1]];
                        distance(&last, &next) - distance(&before, &next)
                    } else {
                        0.0
                    };
                let rest: Vec<usize> = order[..i].iter().chain(&order[j + 1..]).copied().collect();
                let mut best: Option<(f64, usize, bool)> = None;
                for p in 0..=rest.len() {
                    let a = at(&rest, p);
                    for reversed in [false, true] {
                        if p == i && !reversed {
                            continue;
                        }
                        let (x, y) = if reversed { (last, first) } else { (first, last) };
                        let mut cost = distance(&a, &x);
                        if p < rest.len() {
                            let b = points[rest[p]];
                            cost += distance(&y, &b) - distance(&a, &b);
                        }
                        let delta = cost - gain;
                        if delta < -1e-12 && best.is_none_or(|(d, _, _)| delta < d) {
                            best = Some((delta, p, reversed));
                        }
                    }
                }
                if let Some((_, p, reversed)) = best {
                    let mut segment = order[i..=j].to_vec();
                    if reversed {
                        segment.reverse();
                    }
                    let mut next = rest;
                    next.splice(p..p, segment);
                    *order = next;
                    changed = true;
                    continue 'restart;
                }
            }
        }
        return changed;
    }
}

/// Open TSP path from `start`: exact for up to [`HELD_KARP_MAX`] points,
/// nearest neighbour plus local search beyond. Ties go to the lower point index.
pub fn solve_tsp(points: &[Vec3], start: &Vec3) -> Vec<usize> {
    if points.len() <= HELD_KARP_MAX {
        return held_karp(points, start);
    }
    heuristic_tsp(points, start)
}

fn local_search(points: &[Vec3], start: &Vec3, mut order: Vec<usize>) -> Vec<usize> {
    loop {
        two_opt(points, start, &mut order);
        if !or_opt(points, start, &mut order) {
            return order;
        }
    }
}

/// Best of several local searches (2-opt and Or-opt alternated until neither
/// helps), started from the plain nearest-neighbour path and from the
/// nearest-neighbour path forced through each point first. The earliest
/// start wins ties.
pub fn heuristic_tsp(points: &[Vec3], start: &Vec3) -> Vec<usize> {
    let starts = std::iter::once(None).chain((0..points.len()).map(Some));
    let mut best: Option<(f64, Vec<usize>)> = None;
    for first in starts {
        let order = local_search(points, start, nearest_neighbor(points, start, first));
        let len = path_length(points, start, &order);
        if best.as_ref().is_none_or(|(b, _)| len < b - 1e-12) {
            best = Some((len, order));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub previous_map: SceneGraph,
    pub realized_scene: SceneGraph,
    pub n: usize,
    pub start_position: Vec3,
    /// Objects of the previous map with any position, state or instance change.
    pub changed: BTreeSet<ObjectId>,
}

impl Episode {
    /// Starts at the centroid of the previous map.
    pub fn new(
        previous_map: SceneGraph,
        realized_scene: SceneGraph,
        n: usize,
        tax: &Taxonomy,
        labels: &LabelConfig,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("episodes need n >= 1".into()));
        }
        if previous_map.is_empty() {
            return Err(Error::Config(format!("previous map `{}` has no objects", previous_map.scan_id())));
        }
        let l = compute_labels(&previous_map, &realized_scene, tax, labels)?;
        let changed = previous_map
            .nodes()
            .iter()
            .zip(&l)
            .filter(|(_, l)| l.changed())
            .map(|(n, _)| n.id)
            .collect();
        Ok(Self {
            start_position: previous_map.centroid(),
            previous_map,
            realized_scene,
            n,
            changed,
        })
    }

    pub fn feasible(&self) -> bool {
        self.changed.len() >= self.n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub planner: String,
    /// Objects in the order they were visited, up to the n-th detection.
    pub visit_order: Vec<ObjectId>,
    pub distance_traveled: f64,
    pub changes_found: usize,
    pub fallback_used: bool,
    pub infeasible: bool,
}

struct Walker<'a> {
    ep: &'a Episode,
    at: Vec3,
    result: EpisodeResult,
}

impl<'a> Walker<'a> {
    fn new(ep: &'a Episode, planner: &str) -> Self {
        Self {
            ep,
            at: ep.start_position,
            result: EpisodeResult {
                planner: planner.into(),
                visit_order: Vec::new(),
                distance_traveled: 0.0,
                changes_found: 0,
                fallback_used: false,
                infeasible: !ep.feasible(),
            },
        }
    }

    fn done(&self) -> bool {
        self.result.changes_found >= self.ep.n
    }

    /// Tours `ids` on a TSP route from the current position, stopping once
    /// `n` changes have been seen.
    fn tour(&mut self, ids: &[ObjectId]) {
        let points: Vec<Vec3> = ids
            .iter()
            .map(|&id| self.ep.previous_map.node(id).expect("id from previous map").position)
            .collect();
        for i in solve_tsp(&points, &self.at) {
            if self.done() {
                return;
            }
            self.result.distance_traveled += distance(&self.at, &points[i]);
            self.at = points[i];
            self.result.visit_order.push(ids[i]);
            if self.ep.changed.contains(&ids[i]) {
                self.result.changes_found += 1;
            }
        }
    }
}

pub fn run_coverage(ep: &Episode) -> EpisodeResult {
    let ids: Vec<ObjectId> = ep.previous_map.nodes().iter().map(|n| n.id).collect();
    let mut w = Walker::new(ep, "coverage");
    w.tour(&ids);
    w.result
}

/// VSG planner with externally supplied `(id, score)` pairs. Objects missing
/// from `scores` rank last.
pub fn run_vsg_with_scores(ep: &Episode, scores: &[(ObjectId, f64)]) -> EpisodeResult {
    let mut ranked: Vec<(ObjectId, f64)> = ep
        .previous_map
        .nodes()
        .iter()
        .map(|n| {
            let s = scores.iter().find(|(id, _)| *id == n.id).map_or(f64::NEG_INFINITY, |s| s.1);
            (n.id, s)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let k = (ep.n + VSG_EXTRA).min(ranked.len());
    let first: Vec<ObjectId> = ranked[..k].iter().map(|r| r.0).collect();
    let mut w = Walker::new(ep, "vsg");
    w.tour(&first);
    if !w.done() && k < ranked.len() {
        w.result.fallback_used = true;
        let rest: Vec<ObjectId> = ranked[k..].iter().map(|r| r.0).collect();
        w.tour(&rest);
    }
    w.result
}

pub fn run_vsg_planner(ep: &Episode, model: &VariabilityModel) -> Result<EpisodeResult> {
    let pred = model.predict(&ep.previous_map)?;
    Ok(run_vsg_with_scores(ep, &pred.scores()))
}

/// Scores 1 for changed objects and 0 otherwise.
pub fn oracle_scores(ep: &Episode) -> Vec<(ObjectId, f64)> {
    ep.previous_map
        .nodes()
        .iter()
        .map(|n| (n.id, if ep.changed.contains(&n.id) { 1.0 } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerStats {
    pub mean_distance: f64,
    pub std_distance: f64,
}

impl PlannerStats {
    fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_distance: mean,
            std_distance: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    /// `None` for the summary over all `n`.
    pub n: Option<usize>,
    pub episodes: usize,
    pub infeasible: usize,
    pub coverage: PlannerStats,
    pub vsg: PlannerStats,
    /// Fraction of episodes where the VSG planner is strictly shorter.
    pub win_fraction: f64,
    /// Fraction where Coverage is strictly shorter.
    pub loss_fraction: f64,
    /// `1 - mean(d_vsg) / mean(d_coverage)`.
    pub distance_reduction: f64,
    /// `mean(d_coverage) / mean(d_vsg) - 1`, i.e. how much faster the task
    /// completes at constant robot speed.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkSummary {
    pub fn overall(&self) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.n.is_none())
    }

    /// Columns `n,planner,mean_distance,std_distance,win_fraction,speedup`.
    /// The Coverage row reports how often Coverage wins and a zero speed-up.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,planner,mean_distance,std_distance,win_fraction,speedup\n");
        for r in &self.rows {
            let n = r.n.map_or("all".to_string(), |n| n.to_string());
            writeln!(
                s,
                "{n},coverage,{:.6},{:.6},{:.6},{:.6}",
                r.coverage.mean_distance, r.coverage.std_distance, r.loss_fraction, 0.0
            )
            .expect("string write");
            writeln!(
                s,
                "{n},vsg,{:.6},{:.6},{:.6},{:.6}",
                r.vsg.mean_distance, r.vsg.std_distance, r.win_fraction, r.speedup
            )
            .expect("string write");
        }
        s
    }
}

fn summarize(n: Option<usize>, pairs: &[&(EpisodeResult, EpisodeResult)]) -> Option<BenchmarkRow> {
    let feasible: Vec<_> = pairs.iter().filter(|(c, _)| !c.infeasible).collect();
    if feasible.is_empty() {
        return None;
    }
    let cov: Vec<f64> = feasible.iter().map(|(c, _)| c.distance_traveled).collect();
    let vsg: Vec<f64> = feasible.iter().map(|(_, v)| v.distance_traveled).collect();
    let m = feasible.len() as f64;
    let wins = cov.iter().zip(&vsg).filter(|(c, v)| v < c).count();
    let losses = cov.iter().zip(&vsg).filter(|(c, v)| c < v).count();
    let coverage = PlannerStats::of(&cov);
    let vsg = PlannerStats::of(&vsg);
    let (c, v) = (coverage.mean_distance, vsg.mean_distance);
    Some(BenchmarkRow {
        n,
        episodes: feasible.len(),
        infeasible: pairs.len() - feasible.len(),
        coverage,
        vsg,
        win_fraction: wins as f64 / m,
        loss_fraction: losses as f64 / m,
        distance_reduction: if c > 0.0 { 1.0 - v / c } else { 0.0 },
        speedup: if v > 0.0 { c / v - 1.0 } else { 0.0 },
    })
}

/// Runs both planners on every episode (concurrently when enabled) and
/// summarizes per `n` and overall. Infeasible episodes are counted but left
/// out of the statistics.
pub fn run_benchmark<F>(episodes: &[Episode], scores: F, exec: Execution) -> Result<BenchmarkSummary>
where
    F: Fn(&Episode) -> Result<Vec<(ObjectId, f64)>> + Sync + Send,
{
    let results = par::try_map(exec, episodes, |ep| {
        let s = scores(ep)?;
        Ok::<_, Error>((run_coverage(ep), run_vsg_with_scores(ep, &s)))
    })?;
    if results.iter().all(|(c, _)| c.infeasible) {
        return Err(Error::Evaluation("no feasible episode in the benchmark".into()));
    }
    let ns: BTreeSet<usize> = episodes.iter().map(|e| e.n).collect();
    let mut rows = Vec::new();
    for n in ns {
        let subset: Vec<_> = episodes.iter().zip(&results).filter(|(e, _)| e.n == n).map(|(_, r)| r).collect();
        rows.extend(summarize(Some(n), &subset));
    }
    let all: Vec<_> = results.iter().collect();
    rows.extend(summarize(None, &all));
    Ok(BenchmarkSummary { rows })
}

/// Draws `per_n` episodes for each `n` from forward-in-time scan pairs of the
/// given split. Each draw retries up to 100 pairs for one with at least `n`
/// changes and is dropped (with a warning) if none is found.
pub fn sample_episodes(
    dataset: &Dataset,
    split: Split,
    ns: &[usize],
    per_n: usize,
    labels: &LabelConfig,
    seed: u64,
) -> Result<Vec<Episode>> {
    let envs: Vec<_> = dataset.environments_in(split).filter(|e| e.scans.len() >= 2).collect();
    if envs.is_empty() {
        return Err(Error::Evaluation(format!("no {split:?} environment with at least two scans")));
    }
    let mut episodes = Vec::new();
    for &n in ns {
        for s in 0..per_n {
            let mut rng = seeded(seed, &[0xe915, n as u64, s as u64]);
            let mut found = None;
            for _ in 0..100 {
                let env = envs[rng.random_range(0..envs.len())];
                let a = rng.random_range(0..env.scans.len() - 1);
                let b = rng.random_range(a + 1..env.scans.len());
                let ep = Episode::new(env.scans[a].clone(), env.scans[b].clone(), n, &dataset.taxonomy, labels)?;
                if ep.feasible() {
                    found = Some(ep);
                    break;
                }
            }
            match found {
                Some(ep) => episodes.push(ep),
                None => log::warn!("no feasible episode found for n={n}, draw {s}"),
            }
        }
    }
    Ok(episodes)
}
