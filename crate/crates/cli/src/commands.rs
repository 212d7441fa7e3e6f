use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use vsg_core::dataset::rscan::ingest_3rscan_layout;
use vsg_core::dataset::synthetic::{generate_dataset, save_generated, GeneratorSpec};
use vsg_core::dataset::{LabelConfig, Split};
use vsg_core::embedding::{binary_matrix, fit_pca as fit, PcaModel, TauSpec};
use vsg_core::graph::{parse_json, SceneGraph, Taxonomy};
use vsg_core::model::VariabilityModel;
use vsg_core::par::Execution;
use vsg_core::planner::{path_length, run_benchmark, run_coverage, run_vsg_with_scores, sample_episodes, Episode, VSG_EXTRA};
use vsg_core::training::{evaluate, train_with_pca, write_text, TrainSetup};
use vsg_core::{Error, Result};

use crate::{CompareArgs, EvalArgs, FitPcaArgs, GenerateArgs, IngestArgs, PlanArgs, PredictArgs, Preset, TrainArgs};

pub fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

/// Prints the fully resolved configuration of a run on stderr.
fn echo(command: &str, config: serde_json::Value) {
    eprintln!("{command} config: {config}");
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializes");
    text.push('\n');
    write_text(path, &text)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

pub fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec = match (&a.spec, a.preset) {
        (Some(path), _) => GeneratorSpec::load(path)?,
        (None, Some(Preset::IndoorCluttered)) => GeneratorSpec::indoor_cluttered(),
        (None, _) => GeneratorSpec::indoor(),
    };
    if let Some(n) = a.environments {
        spec.environments = n;
    }
    if let Some(n) = a.scans {
        spec.scans_per_environment = n;
    }
    echo("generate", json!({ "spec": spec, "seed": a.seed, "out": a.out }));
    let (dataset, logs) = generate_dataset(&spec, a.seed)?;
    save_generated(&a.out, &dataset, &logs)?;
    let scans: usize = dataset.environments.iter().map(|e| e.scans.len()).sum();
    println!("wrote {} environments, {scans} scans to {}", dataset.environments.len(), a.out.display());
    Ok(())
}

pub fn fit_pca(a: FitPcaArgs) -> Result<()> {
    echo("fit-pca", json!({ "dim": a.dim, "input": a.input, "out": a.out }));
    let dataset = vsg_core::dataset::Dataset::load(&a.input)?;
    let scans: Vec<_> = dataset.scans_in(Split::Train).collect();
    if scans.is_empty() {
        return Err(Error::Config(format!("{}: the train split is empty", a.input.display())));
    }
    let data = binary_matrix(scans.iter().copied(), &dataset.taxonomy);
    let mut dim = a.dim;
    if dim > data.ncols() {
        log::warn!("--dim {dim} exceeds the encoding width {}; using {}", data.ncols(), data.ncols());
        dim = data.ncols();
    }
    let pca = fit(&data, dim)?;
    create_parent(&a.out)?;
    write_json(&a.out, &pca)?;
    println!(
        "fit {dim} of {} dimensions on {} train scans; retained variance {:.4}{}",
        data.ncols(),
        scans.len(),
        pca.retained_variance(),
        if pca.rank_deficient { " (rank deficient)" } else { "" }
    );
    Ok(())
}

/// A setup file is either a bare setup or has it under `model`.
#[derive(Deserialize)]
struct Sectioned {
    model: TrainSetup,
}

fn load_setup(path: &Path) -> Result<TrainSetup> {
    let text = read(path)?;
    let origin = path.display().to_string();
    let value: serde_json::Value = parse_json(&text, &origin)?;
    if value.get("model").is_some() {
        Ok(parse_json::<Sectioned>(&text, &origin)?.model)
    } else {
        parse_json(&text, &origin)
    }
}

fn resolve_setup(a: &TrainArgs, exec: Execution) -> Result<TrainSetup> {
    let mut setup = match &a.config {
        Some(path) => load_setup(path)?,
        None => TrainSetup::default(),
    };
    if let Some(v) = a.seed {
        setup.train.seed = v;
    }
    if let Some(v) = a.epochs {
        setup.train.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        setup.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        setup.train.batch_size = v;
    }
    if let Some(v) = a.hidden_dim {
        setup.hidden_dim = v;
    }
    if let Some(v) = a.pca_dim {
        setup.pca_dim = v;
    }
    if let Some(v) = &a.tau {
        setup.tau = v.parse::<TauSpec>().map_err(|e| Error::Usage(format!("--tau: {e}")))?;
    }
    if let Some(v) = a.gamma {
        setup.loss.gamma = v;
    }
    if let Some(v) = &a.architecture {
        setup.architecture = serde_json::from_value(json!(v)).map_err(|e| Error::Usage(format!("--architecture: {e}")))?;
    }
    setup.train.execution = exec;
    Ok(setup)
}

pub fn train(a: TrainArgs, exec: Execution) -> Result<()> {
    let mut setup = resolve_setup(&a, exec)?;
    let pca = match &a.pca {
        Some(path) => {
            let pca: PcaModel = parse_json(&read(path)?, &path.display().to_string())?;
            if setup.pca_dim != pca.dim {
                log::warn!("using the {}-dimensional PCA from {}", pca.dim, path.display());
                setup.pca_dim = pca.dim;
            }
            Some(pca)
        }
        None => None,
    };
    echo(
        "train",
        json!({ "data": a.data, "out": a.out, "pca": a.pca, "report": a.report, "execution": format!("{exec:?}"), "setup": setup }),
    );
    let dataset = vsg_core::dataset::Dataset::load(&a.data)?;
    let (model, report) = train_with_pca(&dataset, &setup, pca)?;
    create_parent(&a.out)?;
    model.save_checkpoint(&a.out)?;
    if let Some(path) = &a.report {
        create_parent(path)?;
        write_text(path, &report.to_json_string())?;
    }
    let best = &report.epochs[report.best_epoch - 1];
    println!(
        "trained {} epochs on {} samples (val {}); best epoch {} train_loss {:.5} val_f1 {}; tau {:.3} m{}",
        report.epochs.len(),
        report.train_samples,
        report.val_samples,
        report.best_epoch,
        best.train_loss,
        best.val_pooled_f1.map_or("-".into(), |f| format!("{f:.2}")),
        report.tau,
        report.diverged.as_ref().map_or(String::new(), |d| format!("; diverged: {d}"))
    );
    Ok(())
}

pub fn eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let split: Split = a.split.into();
    let labels = LabelConfig::default();
    echo(
        "eval",
        json!({ "ckpt": a.ckpt, "data": a.data, "report": a.report, "thresholds": a.thresholds, "split": split, "labels": labels }),
    );
    let model = VariabilityModel::load_checkpoint(&a.ckpt)?;
    let dataset = vsg_core::dataset::Dataset::load(&a.data)?;
    let samples = dataset.samples(split, &labels)?;
    if samples.is_empty() {
        return Err(Error::Evaluation(format!("the {split:?} split of {} has no samples", a.data.display())));
    }
    let report = evaluate(&model, &samples, exec)?;
    create_parent(&a.report)?;
    write_text(&a.report, &report.to_csv())?;
    if let Some(path) = &a.thresholds {
        create_parent(path)?;
        write_text(path, &report.thresholds_csv())?;
    }
    print!("{}", report.to_csv());
    println!("majority baseline accuracy {:.4}", report.majority_accuracy);
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    echo("predict", json!({ "ckpt": a.ckpt, "scene": a.scene, "out": a.out }));
    let model = VariabilityModel::load_checkpoint(&a.ckpt)?;
    let scene = SceneGraph::load(&a.scene, &model.taxonomy)?;
    let text = model.vsg_json(&scene)?;
    create_parent(&a.out)?;
    write_text(&a.out, &text)?;
    println!("wrote {} object variabilities to {}", scene.len(), a.out.display());
    Ok(())
}

fn ids(v: &[u64]) -> String {
    v.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn plan(a: PlanArgs) -> Result<()> {
    echo(
        "plan",
        json!({ "ckpt": a.ckpt, "scene": a.scene, "n": a.n, "realized": a.realized, "extra": VSG_EXTRA, "start": "centroid" }),
    );
    let model = VariabilityModel::load_checkpoint(&a.ckpt)?;
    let tax = &model.taxonomy;
    let previous = SceneGraph::load(&a.scene, tax)?;
    let scores = model.predict(&previous)?.scores();
    let labels = LabelConfig::default();
    match &a.realized {
        Some(path) => {
            let realized = SceneGraph::load(path, tax)?;
            let ep = Episode::new(previous, realized, a.n, tax, &labels)?;
            if !ep.feasible() {
                log::warn!("only {} of the requested {} changes happened", ep.changed.len(), a.n);
            }
            for r in [run_coverage(&ep), run_vsg_with_scores(&ep, &scores)] {
                println!(
                    "{}: distance {:.4}, changes found {}, fallback {}, route {}",
                    r.planner,
                    r.distance_traveled,
                    r.changes_found,
                    r.fallback_used,
                    ids(&r.visit_order)
                );
            }
        }
        None => {
            // Against an unchanged scene the walk never stops early, so it is
            // the whole planned route.
            let ep = Episode::new(previous.clone(), previous, a.n, tax, &labels)?;
            let r = run_vsg_with_scores(&ep, &scores);
            let k = (a.n + VSG_EXTRA).min(r.visit_order.len());
            let points: Vec<_> = r.visit_order[..k].iter().map(|&id| ep.previous_map.node(id).expect("planned id").position).collect();
            let order: Vec<usize> = (0..k).collect();
            println!("route: {}", ids(&r.visit_order[..k]));
            println!("distance: {:.4}", path_length(&points, &ep.start_position, &order));
            println!("fallback: {}", ids(&r.visit_order[k..]));
            println!("distance with fallback: {:.4}", r.distance_traveled);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
struct PlannerConfig {
    n_min: usize,
    n_max: usize,
    episodes_per_n: usize,
    split: Split,
    seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_min: 1,
            n_max: 5,
            episodes_per_n: 30,
            split: Split::Test,
            seed: 0,
        }
    }
}

#[derive(Deserialize)]
struct PlannerSection {
    #[serde(default)]
    planner: PlannerConfig,
}

fn parse_range(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("--n-range `{text}`: expected `a..b` or a single number"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    match text.split_once("..") {
        Some((lo, hi)) => Ok((num(lo)?, num(hi.trim_start_matches('='))?)),
        None => num(text).map(|n| (n, n)),
    }
}

pub fn compare_planners(a: CompareArgs, exec: Execution) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => parse_json::<PlannerSection>(&read(path)?, &path.display().to_string())?.planner,
        None => PlannerConfig::default(),
    };
    if let Some(r) = &a.n_range {
        (cfg.n_min, cfg.n_max) = parse_range(r)?;
    }
    if let Some(v) = a.seeds {
        cfg.episodes_per_n = v;
    }
    if let Some(v) = a.split {
        cfg.split = v.into();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if cfg.n_min == 0 || cfg.n_min > cfg.n_max {
        return Err(Error::Usage(format!("n range {}..{} must satisfy 1 <= a <= b", cfg.n_min, cfg.n_max)));
    }
    echo(
        "compare-planners",
        json!({ "data": a.data, "ckpt": a.ckpt, "out": a.out, "planner": cfg, "extra": VSG_EXTRA, "execution": format!("{exec:?}") }),
    );
    let model = VariabilityModel::load_checkpoint(&a.ckpt)?;
    let dataset = vsg_core::dataset::Dataset::load(&a.data)?;
    let ns: Vec<usize> = (cfg.n_min..=cfg.n_max).collect();
    let episodes = sample_episodes(&dataset, cfg.split, &ns, cfg.episodes_per_n, &LabelConfig::default(), cfg.seed)?;
    let summary = run_benchmark(&episodes, |ep| Ok(model.predict(&ep.previous_map)?.scores()), exec)?;
    create_parent(&a.out)?;
    write_text(&a.out, &summary.to_csv())?;
    if let Some(all) = summary.overall() {
        println!(
            "{} episodes ({} infeasible): coverage {:.3} m, vsg {:.3} m, distance reduction {:.3}, win rate {:.3}, speed-up {:.3}",
            all.episodes,
            all.infeasible,
            all.coverage.mean_distance,
            all.vsg.mean_distance,
            all.distance_reduction,
            all.win_fraction,
            all.speedup
        );
    }
    Ok(())
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let labels = LabelConfig::default();
    echo("ingest", json!({ "root": a.root, "taxonomy": a.taxonomy, "out": a.out, "labels": labels }));
    let tax = Taxonomy::load(&a.taxonomy)?;
    let out = ingest_3rscan_layout(&a.root, &tax, &labels)?;
    out.dataset.save(&a.out)?;
    println!("{}", out.report);
    Ok(())
}
