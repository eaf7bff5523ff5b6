//! R2R-format ingestion, perturbed-path datasets and their statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, Position, Scene};
use crate::io::IoError;
use crate::perturbation::{build_perturbed_gt, collect_deletable_edges, PerturbedGt, PerturbedGtJson};
use crate::worldgen::{Episode, EpisodeJson};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{file}: {message}")]
    Parse { file: String, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{file}: {source}")]
    Graph { file: String, source: GraphError },
    #[error("dataset has no episodes")]
    EmptyDataset,
    #[error("record for {0} does not belong to a dataset episode")]
    OrphanRecord(String),
}

#[derive(Debug, Deserialize)]
struct Viewpoint {
    image_id: String,
    pose: Vec<f64>,
    included: bool,
    unobstructed: Vec<bool>,
}

/// Scene loaded from a connectivity file plus the number of viewpoint pairs
/// whose `unobstructed` flags disagreed (dropped).
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub scene: Scene,
    pub asymmetric: usize,
}

/// Parses one `<scan>_connectivity.json`. Only `included` viewpoints are
/// kept; an edge exists iff both directions are unobstructed. Positions
/// are the pose translation.
pub fn load_scene_r2r(scan: &str, text: &str) -> Result<LoadedScene, DatasetError> {
    let file = format!("{scan}_connectivity.json");
    let parse = |message: String| DatasetError::Parse { file: file.clone(), message };
    let views: Vec<Viewpoint> = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
    for (i, v) in views.iter().enumerate() {
        if v.pose.len() != 16 {
            return Err(parse(format!("viewpoint {i} ({}): pose has {} entries, expected 16", v.image_id, v.pose.len())));
        }
        if v.unobstructed.len() != views.len() {
            return Err(parse(format!(
                "viewpoint {i} ({}): unobstructed has {} entries, expected {}",
                v.image_id,
                v.unobstructed.len(),
                views.len()
            )));
        }
    }
    let nodes: Vec<(String, Position)> = views
        .iter()
        .filter(|v| v.included)
        .map(|v| (v.image_id.clone(), Position::new(v.pose[3], v.pose[7], v.pose[11])))
        .collect();
    let mut edges = Vec::new();
    let mut asymmetric = 0;
    for (i, a) in views.iter().enumerate() {
        for (j, b) in views.iter().enumerate().skip(i + 1) {
            if !(a.included && b.included) {
                continue;
            }
            match (a.unobstructed[j], b.unobstructed[i]) {
                (true, true) => edges.push((a.image_id.clone(), b.image_id.clone())),
                (false, false) => {}
                _ => asymmetric += 1,
            }
        }
    }
    if asymmetric > 0 {
        log::warn!("{file}: {asymmetric} asymmetric adjacency pairs dropped");
    }
    let scene = Scene::new(scan, nodes, &edges).map_err(|source| DatasetError::Graph { file: file.clone(), source })?;
    Ok(LoadedScene { scene, asymmetric })
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum R2rPathId {
    Int(i64),
    Text(String),
}

#[derive(Debug, Deserialize)]
struct R2rRecord {
    path_id: R2rPathId,
    scan: String,
    path: Vec<String>,
    heading: f64,
    #[serde(default)]
    instructions: Vec<String>,
}

/// One trajectory from an R2R split file. The instructions are carried as
/// opaque text.
#[derive(Debug, Clone, PartialEq)]
pub struct R2rTrajectory {
    pub json: EpisodeJson,
    pub instructions: Vec<String>,
}

pub fn parse_r2r_split(name: &str, text: &str) -> Result<Vec<R2rTrajectory>, DatasetError> {
    let records: Vec<R2rRecord> =
        serde_json::from_str(text).map_err(|e| DatasetError::Parse { file: name.to_string(), message: e.to_string() })?;
    Ok(records
        .into_iter()
        .map(|r| R2rTrajectory {
            json: EpisodeJson {
                path_id: match r.path_id {
                    R2rPathId::Int(i) => i.to_string(),
                    R2rPathId::Text(s) => s,
                },
                scan: r.scan,
                path: r.path,
                heading: r.heading,
                instruction: Vec::new(),
            },
            instructions: r.instructions,
        })
        .collect())
}

/// Loads the connectivity files of every scan used by `trajectories` from
/// `dir` and resolves the episodes.
pub fn load_r2r(dir: &FsPath, trajectories: &[R2rTrajectory]) -> Result<(BTreeMap<String, Scene>, Vec<Episode>), DatasetError> {
    let mut scenes = BTreeMap::new();
    for t in trajectories {
        if scenes.contains_key(&t.json.scan) {
            continue;
        }
        let path = dir.join(format!("{}_connectivity.json", t.json.scan));
        let text = std::fs::read_to_string(&path).map_err(|source| IoError::Io { path: path.clone(), source })?;
        scenes.insert(t.json.scan.clone(), load_scene_r2r(&t.json.scan, &text)?.scene);
    }
    let episodes = trajectories
        .iter()
        .map(|t| {
            Episode::from_json(&t.json, &scenes[&t.json.scan])
                .map_err(|source| DatasetError::Graph { file: t.json.path_id.clone(), source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((scenes, episodes))
}

/// Episodes of one split with the perturbation-aware references of every
/// deletable edge. Episodes without deletable edges stay in `episodes` but
/// have no entry in `perturbed`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpDataset {
    pub split: String,
    pub scans: Vec<String>,
    pub episodes: Vec<Episode>,
    pub perturbed: BTreeMap<String, Vec<PerturbedGt>>,
    pub errors: Vec<String>,
}

pub fn build_pp_dataset(split: &str, scenes: &BTreeMap<String, Scene>, episodes: &[Episode]) -> PpDataset {
    let mut sorted: Vec<&Episode> = episodes.iter().collect();
    sorted.sort_by(|a, b| a.path_id.cmp(&b.path_id));
    let mut kept = Vec::new();
    let mut perturbed = BTreeMap::new();
    let mut errors = Vec::new();
    for ep in sorted {
        let Some(scene) = scenes.get(&ep.scan) else {
            errors.push(format!("{}: unknown scan {}", ep.path_id, ep.scan));
            continue;
        };
        let refs = collect_deletable_edges(scene, ep)
            .and_then(|edges| edges.iter().map(|d| build_perturbed_gt(scene, ep, d)).collect::<Result<Vec<_>, _>>());
        match refs {
            Ok(refs) => {
                if !refs.is_empty() {
                    perturbed.insert(ep.path_id.clone(), refs);
                }
                kept.push(ep.clone());
            }
            Err(e) => errors.push(format!("{}: {e}", ep.path_id)),
        }
    }
    let mut scans: Vec<String> = kept.iter().map(|e| e.scan.clone()).collect();
    scans.sort();
    scans.dedup();
    PpDataset { split: split.to_string(), scans, episodes: kept, perturbed, errors }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpDatasetJson {
    pub split: String,
    pub scans: Vec<String>,
    pub episodes: Vec<EpisodeJson>,
    pub perturbed: Vec<PerturbedGtJson>,
    pub errors: Vec<String>,
}

impl PpDataset {
    pub fn to_json(&self, scenes: &BTreeMap<String, Scene>) -> PpDatasetJson {
        let by_id: BTreeMap<&str, &Episode> = self.episodes.iter().map(|e| (e.path_id.as_str(), e)).collect();
        PpDatasetJson {
            split: self.split.clone(),
            scans: self.scans.clone(),
            episodes: self.episodes.iter().map(|e| e.to_json(&scenes[&e.scan])).collect(),
            perturbed: self
                .perturbed
                .iter()
                .flat_map(|(id, refs)| {
                    let scene = &scenes[&by_id[id.as_str()].scan];
                    refs.iter().map(move |p| p.to_json(scene))
                })
                .collect(),
            errors: self.errors.clone(),
        }
    }

    pub fn from_json(json: &PpDatasetJson, scenes: &BTreeMap<String, Scene>) -> Result<Self, DatasetError> {
        let graph = |file: &str| {
            let file = file.to_string();
            move |source| DatasetError::Graph { file, source }
        };
        let mut episodes = Vec::with_capacity(json.episodes.len());
        for e in &json.episodes {
            let scene = scenes.get(&e.scan).ok_or_else(|| DatasetError::Parse {
                file: json.split.clone(),
                message: format!("episode {} references unknown scan {}", e.path_id, e.scan),
            })?;
            episodes.push(Episode::from_json(e, scene).map_err(graph(&e.path_id))?);
        }
        let by_id: BTreeMap<&str, &Episode> = episodes.iter().map(|e| (e.path_id.as_str(), e)).collect();
        let mut perturbed: BTreeMap<String, Vec<PerturbedGt>> = BTreeMap::new();
        for p in &json.perturbed {
            let ep = by_id.get(p.path_id.as_str()).ok_or_else(|| DatasetError::OrphanRecord(p.path_id.clone()))?;
            let rec = PerturbedGt::from_json(p, &scenes[&ep.scan]).map_err(graph(&p.path_id))?;
            perturbed.entry(p.path_id.clone()).or_default().push(rec);
        }
        Ok(Self { split: json.split.clone(), scans: json.scans.clone(), episodes, perturbed, errors: json.errors.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub trajectories: usize,
    /// Mean number of nodes per path.
    pub mean_steps: f64,
    pub mean_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeletableSummary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Share of perturbable trajectories with at least one deletable edge in
/// each third of the ground-truth node sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Positions {
    pub beginning: f64,
    pub middle: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: String,
    pub original: PathSummary,
    pub perturbable: usize,
    /// Over every perturbation-aware reference path.
    pub perturbed: PathSummary,
    pub deletable: DeletableSummary,
    /// Proportions of perturbable trajectories with [1,2], (2,4] and more
    /// than 4 deletable edges.
    pub histogram: [f64; 3],
    pub positions: Positions,
}

pub fn histogram_bin(count: usize) -> usize {
    match count {
        0..=2 => 0,
        3..=4 => 1,
        _ => 2,
    }
}

/// Part (0 beginning, 1 middle, 2 end) of node index `i` in a path of `n`
/// nodes; equal thirds with the middle absorbing the remainder.
pub fn position_part(i: usize, n: usize) -> usize {
    let third = n / 3;
    if i < third {
        0
    } else if i >= n - third {
        2
    } else {
        1
    }
}

fn summarize<'a>(scenes: &BTreeMap<String, Scene>, paths: impl Iterator<Item = (&'a str, &'a crate::graph::Path)>) -> PathSummary {
    let (mut n, mut steps, mut dist) = (0usize, 0.0, 0.0);
    for (scan, p) in paths {
        n += 1;
        steps += p.len() as f64;
        dist += scenes[scan].path_length(p).expect("dataset paths are valid");
    }
    let d = n.max(1) as f64;
    PathSummary { trajectories: n, mean_steps: steps / d, mean_distance: dist / d }
}

pub fn compute_stats(pp: &PpDataset, scenes: &BTreeMap<String, Scene>) -> Result<SplitStats, DatasetError> {
    if pp.episodes.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let scan_of: BTreeMap<&str, &str> = pp.episodes.iter().map(|e| (e.path_id.as_str(), e.scan.as_str())).collect();
    let original = summarize(scenes, pp.episodes.iter().map(|e| (e.scan.as_str(), &e.path)));
    let scan_of = &scan_of;
    let perturbed = summarize(
        scenes,
        pp.perturbed.iter().flat_map(|(id, refs)| refs.iter().map(move |r| (scan_of[id.as_str()], &r.path))),
    );
    let counts: Vec<usize> = pp.perturbed.values().map(Vec::len).collect();
    let k = counts.len().max(1) as f64;
    let mut histogram = [0.0; 3];
    for &c in &counts {
        histogram[histogram_bin(c)] += 1.0 / k;
    }
    let lengths: BTreeMap<&str, usize> = pp.episodes.iter().map(|e| (e.path_id.as_str(), e.path.len())).collect();
    let mut parts = [0usize; 3];
    for (id, refs) in &pp.perturbed {
        let n = lengths[id.as_str()];
        let mut hit = [false; 3];
        for r in refs {
            hit[position_part(r.deleted.t, n)] = true;
        }
        for (p, h) in parts.iter_mut().zip(hit) {
            *p += usize::from(h);
        }
    }
    Ok(SplitStats {
        split: pp.split.clone(),
        original,
        perturbable: counts.len(),
        perturbed,
        deletable: DeletableSummary {
            min: counts.iter().copied().min().unwrap_or(0),
            max: counts.iter().copied().max().unwrap_or(0),
            mean: counts.iter().sum::<usize>() as f64 / k,
        },
        histogram,
        positions: Positions {
            beginning: parts[0] as f64 / k,
            middle: parts[1] as f64 / k,
            end: parts[2] as f64 / k,
        },
    })
}

/// Aligned plain-text rendering of split statistics.
pub fn stats_table(stats: &[SplitStats]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>8} {:>8} {:>8} {:>11} {:>8} {:>8} {:>5} {:>5} {:>6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "split", "trajs", "steps", "dist", "perturbable", "p.steps", "p.dist", "min", "max", "mean", "1-2", "2-4", "4+", "begin", "middle", "end"
    );
    for s in stats {
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8.2} {:>8.2} {:>11} {:>8.2} {:>8.2} {:>5} {:>5} {:>6.2} {:>6.2}% {:>6.2}% {:>6.2}% {:>6.2}% {:>6.2}% {:>6.2}%",
            s.split,
            s.original.trajectories,
            s.original.mean_steps,
            s.original.mean_distance,
            s.perturbable,
            s.perturbed.mean_steps,
            s.perturbed.mean_distance,
            s.deletable.min,
            s.deletable.max,
            s.deletable.mean,
            100.0 * s.histogram[0],
            100.0 * s.histogram[1],
            100.0 * s.histogram[2],
            100.0 * s.positions.beginning,
            100.0 * s.positions.middle,
            100.0 * s.positions.end,
        );
    }
    out
}

/// Reads an R2R split file from disk.
pub fn read_r2r_split(path: &FsPath) -> Result<Vec<R2rTrajectory>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    parse_r2r_split(&path.display().to_string(), &text)
}
