//! File helpers: JSON reading with path context and atomic writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::graph::{GraphError, Scene, SceneJson};
use crate::worldgen::{Episode, EpisodeJson};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: GraphError },
    #[error("{path}: episode {path_id} references unknown scan {scan}")]
    UnknownScan { path: PathBuf, path_id: String, scan: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory serialization cannot fail");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Parse { path: path.to_path_buf(), source })
}

pub fn scene_file(dir: &Path, scan: &str) -> PathBuf {
    dir.join(format!("{scan}.json"))
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<(), IoError> {
    write_json(&scene_file(dir, scene.scan()), &scene.to_json())
}

pub fn load_scene(path: &Path) -> Result<Scene, IoError> {
    let json: SceneJson = read_json(path)?;
    Scene::from_json(&json).map_err(|source| IoError::Graph { path: path.to_path_buf(), source })
}

/// Every `*.json` scene in `dir`, keyed by scan id.
pub fn load_scenes(dir: &Path) -> Result<BTreeMap<String, Scene>, IoError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut scenes = BTreeMap::new();
    for f in files {
        let scene = load_scene(&f)?;
        scenes.insert(scene.scan().to_string(), scene);
    }
    Ok(scenes)
}

pub fn save_episodes(path: &Path, episodes: &[Episode], scenes: &BTreeMap<String, Scene>) -> Result<(), IoError> {
    let json: Vec<EpisodeJson> = episodes.iter().map(|e| e.to_json(&scenes[&e.scan])).collect();
    write_json(path, &json)
}

pub fn load_episodes(path: &Path, scenes: &BTreeMap<String, Scene>) -> Result<Vec<Episode>, IoError> {
    let json: Vec<EpisodeJson> = read_json(path)?;
    json.iter()
        .map(|j| {
            let scene = scenes.get(&j.scan).ok_or_else(|| IoError::UnknownScan {
                path: path.to_path_buf(),
                path_id: j.path_id.clone(),
                scan: j.scan.clone(),
            })?;
            Episode::from_json(j, scene).map_err(|source| IoError::Graph { path: path.to_path_buf(), source })
        })
        .collect()
}
