mod common;

use std::collections::BTreeMap;

use common::{brute_deletable, corpus};
use pertnav::dataset::{build_pp_dataset, compute_stats, load_r2r, read_r2r_split, PpDataset, PpDatasetJson};
use pertnav::graph::Scene;
use pertnav::worldgen::Episode;
use serde_json::json;

fn corpus_split() -> (BTreeMap<String, Scene>, Vec<Episode>) {
    let mut scenes = BTreeMap::new();
    let mut episodes = Vec::new();
    for (scene, eps) in corpus().into_iter().take(40) {
        episodes.extend(eps);
        scenes.insert(scene.scan().to_string(), scene);
    }
    (scenes, episodes)
}

#[test]
fn perturbed_lists_match_brute_force_counts() {
    let (scenes, episodes) = corpus_split();
    let pp = build_pp_dataset("corpus", &scenes, &episodes);
    assert!(pp.errors.is_empty());
    assert_eq!(pp.episodes.len(), episodes.len());
    let mut excluded = 0;
    for ep in &episodes {
        let want = brute_deletable(&scenes[&ep.scan], ep);
        match pp.perturbed.get(&ep.path_id) {
            Some(refs) => assert_eq!(refs.iter().map(|r| r.deleted.t).collect::<Vec<_>>(), want),
            None => {
                assert!(want.is_empty());
                excluded += 1;
            }
        }
    }
    assert!(excluded > 0 && excluded < episodes.len());
}

#[test]
fn json_round_trip_preserves_stats() {
    let (scenes, episodes) = corpus_split();
    let pp = build_pp_dataset("corpus", &scenes, &episodes);
    let text = serde_json::to_string(&pp.to_json(&scenes)).unwrap();
    let json: PpDatasetJson = serde_json::from_str(&text).unwrap();
    let back = PpDataset::from_json(&json, &scenes).unwrap();
    assert_eq!(back, pp);
    let (a, b) = (compute_stats(&pp, &scenes).unwrap(), compute_stats(&back, &scenes).unwrap());
    assert_eq!(a, b);
    assert!((a.histogram.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!(a.perturbed.mean_distance >= a.original.mean_distance);
    assert!(a.deletable.min >= 1 && a.deletable.max >= a.deletable.min);
    for p in [a.positions.beginning, a.positions.middle, a.positions.end] {
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn orphan_records_are_rejected() {
    let (scenes, episodes) = corpus_split();
    let pp = build_pp_dataset("corpus", &scenes, &episodes);
    let mut json = pp.to_json(&scenes);
    json.episodes.retain(|e| e.path_id != json.perturbed[0].path_id);
    assert!(PpDataset::from_json(&json, &scenes).is_err());
}

/// Writes scenes in the R2R connectivity layout, adds an excluded viewpoint
/// linked to every node, and checks that loading gives the same dataset.
#[test]
fn r2r_layout_loads_to_the_same_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, episodes) = corpus_split();
    for (scan, scene) in &scenes {
        let n = scene.node_count();
        let mut views = Vec::new();
        for a in scene.nodes() {
            let p = scene.position(a);
            let mut unobstructed: Vec<bool> = scene.nodes().map(|b| scene.weight(a, b).is_some()).collect();
            unobstructed.push(true);
            views.push(json!({
                "image_id": scene.id(a),
                "pose": [1, 0, 0, p.x, 0, 1, 0, p.y, 0, 0, 1, p.z, 0, 0, 0, 1],
                "included": true,
                "unobstructed": unobstructed,
                "height": 1.5,
            }));
        }
        views.push(json!({
            "image_id": "zz_hidden",
            "pose": [1, 0, 0, 0.5, 0, 1, 0, 0.5, 0, 0, 1, 0, 0, 0, 0, 1],
            "included": false,
            "unobstructed": vec![true; n + 1],
        }));
        std::fs::write(dir.path().join(format!("{scan}_connectivity.json")), serde_json::to_string(&views).unwrap()).unwrap();
    }
    let records: Vec<_> = episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            json!({
                "distance": 0.0,
                "scan": e.scan,
                "path_id": i,
                "path": scenes[&e.scan].path_ids(&e.path),
                "heading": e.heading,
                "instructions": ["walk"],
            })
        })
        .collect();
    let split = dir.path().join("R2R_corpus.json");
    std::fs::write(&split, serde_json::to_string(&records).unwrap()).unwrap();

    let (loaded, eps) = load_r2r(dir.path(), &read_r2r_split(&split).unwrap()).unwrap();
    for (scan, s) in &loaded {
        let orig = &scenes[scan];
        assert_eq!(s.node_count(), orig.node_count());
        assert_eq!(s.edges().collect::<Vec<_>>(), orig.edges().collect::<Vec<_>>());
    }
    let renamed: Vec<Episode> = episodes.iter().enumerate().map(|(i, e)| Episode { path_id: i.to_string(), instruction: Vec::new(), ..e.clone() }).collect();
    let want = build_pp_dataset("corpus", &scenes, &renamed);
    let got = build_pp_dataset("corpus", &loaded, &eps);
    assert_eq!(
        serde_json::to_string(&got.to_json(&loaded)).unwrap(),
        serde_json::to_string(&want.to_json(&scenes)).unwrap()
    );
}
