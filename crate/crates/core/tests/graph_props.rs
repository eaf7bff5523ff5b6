mod common;

use common::{adjacency, bfs_reachable, random_scene, TIE_EPS};
use pertnav::{NodeId, Path, Scene};
use proptest::prelude::*;

fn all_simple_paths(scene: &Scene, a: NodeId, b: NodeId) -> Vec<Vec<NodeId>> {
    let adj = adjacency(scene);
    let mut out = Vec::new();
    let mut stack = vec![a];
    fn go(adj: &[Vec<usize>], b: NodeId, stack: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        let u = *stack.last().unwrap();
        if u == b {
            out.push(stack.clone());
            return;
        }
        for &v in &adj[u.index()] {
            let v = NodeId(v as u32);
            if !stack.contains(&v) {
                stack.push(v);
                go(adj, b, stack, out);
                stack.pop();
            }
        }
    }
    go(&adj, b, &mut stack, &mut out);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shortest_paths_are_symmetric(seed in 0u64..10_000, n in 2usize..30, extra in 0.0f64..0.3) {
        let s = random_scene(seed, n, extra);
        for a in s.nodes() {
            for b in s.nodes() {
                let ab = s.path_length(&s.shortest_path(a, b, None).unwrap()).unwrap();
                let ba = s.path_length(&s.shortest_path(b, a, None).unwrap()).unwrap();
                prop_assert!((ab - ba).abs() <= TIE_EPS);
            }
        }
    }

    #[test]
    fn shortest_path_is_minimal_and_lexicographic(seed in 0u64..10_000, n in 2usize..9, extra in 0.0f64..0.5) {
        let s = random_scene(seed, n, extra);
        for a in s.nodes() {
            for b in s.nodes() {
                let got = s.shortest_path(a, b, None).unwrap();
                let len = s.path_length(&got).unwrap();
                let paths = all_simple_paths(&s, a, b);
                let best = paths.iter().map(|p| s.path_length(&Path(p.clone())).unwrap()).fold(f64::INFINITY, f64::min);
                prop_assert!((len - best).abs() <= TIE_EPS, "{} vs {}", len, best);
                let want = paths
                    .iter()
                    .filter(|p| s.path_length(&Path((*p).clone())).unwrap() <= best + TIE_EPS)
                    .min()
                    .unwrap();
                prop_assert_eq!(got.nodes(), &want[..]);
            }
        }
    }

    #[test]
    fn deletion_connectivity_matches_bfs(seed in 0u64..10_000, n in 2usize..30, extra in 0.0f64..0.2) {
        let s = random_scene(seed, n, extra);
        let edges: Vec<_> = s.edges().collect();
        for e in edges {
            let (x, y) = e.endpoints();
            let mut adj = adjacency(&s);
            adj[x.index()].retain(|&v| v != y.index());
            adj[y.index()].retain(|&v| v != x.index());
            for a in s.nodes().take(4) {
                for b in s.nodes() {
                    prop_assert_eq!(
                        s.connected_after_deletion(e, a, b).unwrap(),
                        bfs_reachable(&adj, a.index(), b.index())
                    );
                }
            }
            prop_assert!(s.has_edge(e));
        }
    }

    #[test]
    fn adjacency_is_symmetric_with_euclidean_weights(seed in 0u64..10_000, n in 1usize..30, extra in 0.0f64..0.5) {
        let s = random_scene(seed, n, extra);
        for a in s.nodes() {
            for &(b, w) in s.neighbors(a) {
                prop_assert_eq!(s.weight(b, a), Some(w));
                prop_assert!((w - s.position(a).distance(&s.position(b))).abs() <= 1e-9);
                prop_assert!(a != b);
            }
            let ns: Vec<_> = s.neighbors(a).iter().map(|x| x.0).collect();
            let mut sorted = ns.clone();
            sorted.sort();
            prop_assert_eq!(ns, sorted);
        }
    }

    #[test]
    fn scene_json_round_trip(seed in 0u64..10_000, n in 1usize..20) {
        let s = random_scene(seed, n, 0.2);
        let back = Scene::from_json(&s.to_json()).unwrap();
        prop_assert_eq!(serde_json::to_string(&s.to_json()).unwrap(), serde_json::to_string(&back.to_json()).unwrap());
    }
}
