//! Deletable edges and perturbation-aware references against exhaustive
//! enumeration.

mod common;

use common::{brute_deletable, brute_detour, corpus, random_episodes, random_scene, reference_violations, TIE_EPS};
use pertnav::perturbation::{
    build_perturbed_gt, collect_deletable_edges, collect_deletable_edges_with, ReachabilityCheck,
};
use proptest::prelude::*;

#[test]
fn deletable_edges_match_brute_force_on_corpus() {
    let mut mismatches = Vec::new();
    let mut total = 0;
    for (scene, eps) in corpus() {
        for ep in &eps {
            let got: Vec<usize> = collect_deletable_edges(&scene, ep).unwrap().iter().map(|d| d.t).collect();
            total += got.len();
            if got != brute_deletable(&scene, ep) {
                mismatches.push(ep.path_id.clone());
            }
        }
    }
    assert!(mismatches.is_empty(), "mismatching episodes: {mismatches:?}");
    assert!(total > 100, "corpus too easy: only {total} deletable edges");
}

#[test]
fn references_match_brute_force_on_small_scenes() {
    let mut checked = 0;
    for (scene, eps) in corpus() {
        for ep in &eps {
            for d in collect_deletable_edges(&scene, ep).unwrap() {
                let p = build_perturbed_gt(&scene, ep, &d).unwrap();
                let m = ep.path.nodes().iter().position(|&n| n == p.m).unwrap();
                assert!(reference_violations(&scene, ep, d.t, m, &p.path).is_empty(), "{} t={}", ep.path_id, d.t);
                let gt_len = scene.path_length(&ep.path).unwrap();
                assert!(scene.path_length(&p.path).unwrap() >= gt_len - TIE_EPS);
                if scene.node_count() > 12 {
                    continue;
                }
                let (cost, want_m) = brute_detour(&scene, ep, d.t).unwrap();
                let detour_nodes = p.path.len() - d.t - (ep.path.len() - m - 1);
                let detour = pertnav::Path(p.path.nodes()[d.t..d.t + detour_nodes].to_vec());
                let got_cost = scene.without(d.edge()).unwrap().path_length(&detour).unwrap();
                assert!((got_cost - cost).abs() <= TIE_EPS, "{} t={}: detour {got_cost} vs {cost}", ep.path_id, d.t);
                assert_eq!(m, want_m, "{} t={}", ep.path_id, d.t);
                checked += 1;
            }
        }
    }
    assert!(checked > 50, "only {checked} small-scene references checked");
}

#[test]
fn reachability_modes_agree_on_shortest_paths() {
    for (scene, eps) in corpus().into_iter().take(30) {
        for ep in &eps {
            assert_eq!(
                collect_deletable_edges_with(&scene, ep, ReachabilityCheck::CurrentToGoal).unwrap(),
                collect_deletable_edges_with(&scene, ep, ReachabilityCheck::StartToGoal).unwrap()
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deletions_keep_the_goal_reachable_and_scene_intact(seed in 0u64..10_000, n in 4usize..20, extra in 0.0f64..0.4) {
        let scene = random_scene(seed, n, extra);
        let before: Vec<_> = scene.edges().collect();
        for ep in random_episodes(&scene, seed, 3) {
            let first = collect_deletable_edges(&scene, &ep).unwrap();
            prop_assert_eq!(&first, &collect_deletable_edges(&scene, &ep).unwrap());
            for d in first {
                prop_assert!(scene.connected_after_deletion(d.edge(), ep.start(), ep.goal()).unwrap());
                let p = build_perturbed_gt(&scene, &ep, &d).unwrap();
                let m = ep.path.nodes().iter().position(|&x| x == p.m).unwrap();
                prop_assert!(reference_violations(&scene, &ep, d.t, m, &p.path).is_empty());
            }
        }
        prop_assert_eq!(before, scene.edges().collect::<Vec<_>>());
    }
}
