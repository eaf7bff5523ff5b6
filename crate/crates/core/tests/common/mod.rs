//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::{BTreeMap, VecDeque};
use std::path::Path as FsPath;

use pertnav::graph::{Path, Position, Scene};
use pertnav::seeds;
use pertnav::worldgen::Episode;
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

pub const TIE_EPS: f64 = 1e-9;

/// Connected random scene on integer grid positions, which makes equal
/// length paths common. A random spanning tree guarantees connectivity;
/// `extra` is the probability of each further edge.
pub fn random_scene(seed: u64, n: usize, extra: f64) -> Scene {
    let mut rng = seeds::rng(seed, "test-scene", n as u64);
    let side = ((n as f64).sqrt().ceil() as i64 + 2).max(3);
    let mut cells: Vec<(i64, i64)> = (0..side).flat_map(|x| (0..side).map(move |y| (x, y))).collect();
    cells.shuffle(&mut rng);
    let nodes: Vec<(String, Position)> = cells[..n]
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| (format!("v{i:02}"), Position::new(x as f64, y as f64, 0.0)))
        .collect();
    let mut edges = Vec::new();
    for i in 1..n {
        let j = rng.gen_range(0..i);
        edges.push((nodes[i].0.clone(), nodes[j].0.clone()));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(extra) {
                edges.push((nodes[i].0.clone(), nodes[j].0.clone()));
            }
        }
    }
    Scene::new(format!("rand{seed}"), nodes, &edges).unwrap()
}

/// Shortest-path episodes between random distinct node pairs.
pub fn random_episodes(scene: &Scene, seed: u64, count: usize) -> Vec<Episode> {
    let mut rng = seeds::rng(seed, "test-episodes", 0);
    let ids: Vec<_> = scene.nodes().collect();
    (0..count)
        .map(|k| {
            let (a, b) = loop {
                let a = *ids.choose(&mut rng).unwrap();
                let b = *ids.choose(&mut rng).unwrap();
                if a != b {
                    break (a, b);
                }
            };
            Episode {
                path_id: format!("{}_{k}", scene.scan()),
                scan: scene.scan().to_string(),
                path: scene.shortest_path(a, b, None).unwrap(),
                heading: 0.0,
                instruction: vec![0],
            }
        })
        .collect()
}

/// 100 scenes of 5 to 30 nodes with 5 episodes each.
pub fn corpus() -> Vec<(Scene, Vec<Episode>)> {
    (0..100u64)
        .map(|i| {
            let n = 5 + (i as usize * 7) % 26;
            let extra = [0.05, 0.12, 0.25][i as usize % 3];
            let scene = random_scene(i, n, extra);
            let eps = random_episodes(&scene, i, 5);
            (scene, eps)
        })
        .collect()
}

/// Plain adjacency lists keyed by node index, built from the edge list.
pub fn adjacency(scene: &Scene) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); scene.node_count()];
    for e in scene.edges() {
        let (a, b) = e.endpoints();
        adj[a.index()].push(b.index());
        adj[b.index()].push(a.index());
    }
    adj
}

fn remove(adj: &mut [Vec<usize>], a: usize, b: usize) {
    adj[a].retain(|&x| x != b);
    adj[b].retain(|&x| x != a);
}

pub fn bfs_reachable(adj: &[Vec<usize>], src: usize, dst: usize) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut queue = VecDeque::from([src]);
    seen[src] = true;
    while let Some(u) = queue.pop_front() {
        if u == dst {
            return true;
        }
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    false
}

fn euclid(scene: &Scene, a: usize, b: usize) -> f64 {
    let (p, q) = (scene.position(pertnav::NodeId(a as u32)), scene.position(pertnav::NodeId(b as u32)));
    ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt()
}

pub fn mean_edge_length(scene: &Scene) -> f64 {
    let lens: Vec<f64> = scene
        .edges()
        .map(|e| {
            let (a, b) = e.endpoints();
            euclid(scene, a.index(), b.index())
        })
        .collect();
    lens.iter().sum::<f64>() / lens.len() as f64
}

/// Step indices `t` of deletable edges: delete each ground-truth edge, BFS
/// from `c_t` to the goal and scan every remaining neighbor of `c_t`.
pub fn brute_deletable(scene: &Scene, ep: &Episode) -> Vec<usize> {
    let r = mean_edge_length(scene);
    let nodes: Vec<usize> = ep.path.nodes().iter().map(|n| n.index()).collect();
    let goal = *nodes.last().unwrap();
    let mut out = Vec::new();
    for t in 0..nodes.len() - 1 {
        let (a, b) = (nodes[t], nodes[t + 1]);
        let mut adj = adjacency(scene);
        remove(&mut adj, a, b);
        if !bfs_reachable(&adj, a, goal) {
            continue;
        }
        if adj[a].iter().any(|&u| u != b && euclid(scene, u, b) < r) {
            out.push(t);
        }
    }
    out
}

/// Minimum-cost detour by exhaustive simple-path enumeration from `c_t`
/// with the edge `(c_t, c_{t+1})` removed. Returns the detour cost and the
/// ground-truth index of the rejoin node, preferring the later index on
/// ties.
pub fn brute_detour(scene: &Scene, ep: &Episode, t: usize) -> Option<(f64, usize)> {
    let nodes: Vec<usize> = ep.path.nodes().iter().map(|n| n.index()).collect();
    let mut adj = adjacency(scene);
    remove(&mut adj, nodes[t], nodes[t + 1]);
    let suffix: BTreeMap<usize, usize> = nodes.iter().enumerate().skip(t + 1).map(|(i, &n)| (n, i)).collect();
    let mut best: Option<(f64, usize)> = None;
    let mut on_path = vec![false; adj.len()];
    fn dfs(
        scene: &Scene,
        adj: &[Vec<usize>],
        u: usize,
        cost: f64,
        on_path: &mut [bool],
        suffix: &BTreeMap<usize, usize>,
        best: &mut Option<(f64, usize)>,
    ) {
        if let Some(&i) = suffix.get(&u) {
            *best = match *best {
                None => Some((cost, i)),
                Some((c, _)) if cost < c - TIE_EPS => Some((cost, i)),
                Some((c, j)) if (cost - c).abs() <= TIE_EPS => Some((c.min(cost), i.max(j))),
                keep => keep,
            };
        }
        on_path[u] = true;
        for &v in &adj[u] {
            if !on_path[v] {
                dfs(scene, adj, v, cost + euclid(scene, u, v), on_path, suffix, best);
            }
        }
        on_path[u] = false;
    }
    dfs(scene, &adj, nodes[t], 0.0, &mut on_path, &suffix, &mut best);
    best
}

/// The five structural properties of a perturbation-aware reference.
pub fn reference_violations(scene: &Scene, ep: &Episode, t: usize, m: usize, obs: &Path) -> Vec<&'static str> {
    let gt = ep.path.nodes();
    let o = obs.nodes();
    let mut v = Vec::new();
    if o.first() != gt.first() || o.last() != gt.last() {
        v.push("endpoints");
    }
    let (a, b) = (gt[t], gt[t + 1]);
    if o.windows(2).any(|w| (w[0] == a && w[1] == b) || (w[0] == b && w[1] == a)) {
        v.push("uses deleted edge");
    }
    if o.len() <= t || o[..=t] != gt[..=t] {
        v.push("prefix");
    }
    if m <= t || m >= gt.len() {
        v.push("rejoin off suffix");
    } else {
        let suffix = &gt[m..];
        if o.len() < suffix.len() || o[o.len() - suffix.len()..] != *suffix {
            v.push("suffix");
        }
    }
    let adj = adjacency(scene);
    if o.windows(2).any(|w| !adj[w[0].index()].contains(&w[1].index())) {
        v.push("not traversable");
    }
    v
}

/// Hashes of every file under `dir`, keyed by relative path.
pub fn digest_tree(dir: &FsPath) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                let hash = Sha256::digest(std::fs::read(&p).unwrap());
                out.push((rel, hash.iter().map(|b| format!("{b:02x}")).collect()));
            }
        }
    }
    out.sort();
    out
}
