use super::*;
use crate::testutil::{randn, tiny_config};

fn ceil_log10(k: usize) -> usize {
    let mut r = 0;
    let mut p = 1usize;
    while p < k {
        p *= 10;
        r += 1;
    }
    r
}

#[test]
fn small_class_counts_fit_in_one_leaf() {
    let t = build_tree(7, 10).unwrap();
    assert_eq!(t.nodes.len(), 1);
    assert_eq!(t.depth(), 1);
    assert!(t.nodes[0].is_leaf());
}

#[test]
fn twenty_five_classes_split_nine_eight_eight() {
    let t = build_tree(25, 10).unwrap();
    let sizes: Vec<usize> = t.nodes[0].children.iter().map(|&c| t.nodes[c].classes.len()).collect();
    assert_eq!(sizes, vec![9, 8, 8]);
    assert_eq!(t.depth(), 2);
    assert_eq!(t.nodes[1].classes, vec![0, 3, 6, 9, 12, 15, 18, 21, 24]);
}

#[test]
fn thousand_classes_need_three_levels() {
    assert_eq!(build_tree(1000, 10).unwrap().depth(), 3);
}

#[test]
fn depth_law_and_partition_for_all_k_up_to_2000() {
    for k in 2..=2000 {
        let t = build_tree(k, 10).unwrap();
        let expected = ceil_log10(k).max(1);
        assert_eq!(t.depth(), expected, "k={k}");
        let mut seen: Vec<usize> = t.leaves().flat_map(|l| l.classes.iter().copied()).collect();
        assert!(t.leaves().all(|l| l.classes.len() <= 10));
        seen.sort();
        assert_eq!(seen, (0..k).collect::<Vec<_>>());
        for node in t.nodes.iter().filter(|n| !n.is_leaf()) {
            assert!(node.children.len() <= 10);
            let sizes: Vec<usize> = node.children.iter().map(|&c| t.nodes[c].classes.len()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}

#[test]
fn too_few_classes_is_an_error() {
    assert!(build_tree(1, 10).is_err());
    assert!(build_tree(0, 10).is_err());
}

#[test]
fn forced_two_level_outputs_follow_the_chain_rule() {
    let t = build_tree(20, 10).unwrap();
    assert_eq!(t.nodes[0].children.len(), 2);
    let probs: Vec<ClassProbabilities> = t
        .nodes
        .iter()
        .map(|n| {
            let a = n.arity();
            ClassProbabilities::new(1, a, vec![1.0 / a as f32; a]).unwrap()
        })
        .collect();
    let out = t.combine(&probs).unwrap();
    for &p in out.row(0) {
        assert!((p - 0.05).abs() < 1e-7);
    }
    let total: f64 = out.row(0).iter().map(|&p| p as f64).sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn combination_matches_brute_force_products_and_stays_on_simplex() {
    use rand::Rng;
    let t = build_tree(137, 10).unwrap();
    let mut rng = crate::seed::rng(3);
    let rows = 4;
    let probs: Vec<ClassProbabilities> = t
        .nodes
        .iter()
        .map(|n| {
            let a = n.arity();
            let mut data = Vec::new();
            for _ in 0..rows {
                let raw: Vec<f64> = (0..a).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                data.extend(raw.iter().map(|v| (v / s) as f32));
            }
            ClassProbabilities::new(rows, a, data).unwrap()
        })
        .collect();
    let out = t.combine(&probs).unwrap();
    for r in 0..rows {
        let total: f64 = out.row(r).iter().map(|&p| p as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
        for c in 0..137 {
            // walk down from the root by membership
            let mut node = 0;
            let mut p = 1.0f64;
            loop {
                let n = &t.nodes[node];
                if n.is_leaf() {
                    let o = n.classes.iter().position(|&m| m == c).unwrap();
                    p *= probs[node].row(r)[o] as f64;
                    break;
                }
                let o = n.children.iter().position(|&ch| t.nodes[ch].classes.contains(&c)).unwrap();
                p *= probs[node].row(r)[o] as f64;
                node = n.children[o];
            }
            assert!((out.row(r)[c] as f64 - p).abs() < 1e-7);
        }
    }
}

#[test]
fn few_classes_reduce_to_the_flat_path_bitwise() {
    let model = TabIcl::<f32>::new(tiny_config(), 4).unwrap();
    let x = randn::<f32>(vec![30, 4], 1);
    let y: Vec<usize> = (0..20).map(|i| i % 6).collect();
    let flat = model.predict_dataset(&x, &y, 6).unwrap();
    let tree = predict_hierarchical(&model, &x, &y, 6, Batching::default()).unwrap();
    assert_eq!(flat.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), tree.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn many_classes_share_one_embedding_and_sum_to_one() {
    let model = TabIcl::<f32>::new(tiny_config(), 4).unwrap();
    let x = randn::<f32>(vec![90, 5], 2);
    let y: Vec<usize> = (0..75).map(|i| i % 25).collect();
    let out = predict_hierarchical(&model, &x, &y, 25, Batching::default()).unwrap();
    assert_eq!((out.rows, out.classes), (15, 25));
    for row in out.iter_rows() {
        let total: f64 = row.iter().map(|&p| p as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    let calls = model.calls().snapshot();
    assert_eq!((calls.embed_table, calls.row_interact), (1, 1));
    assert_eq!(calls.icl_forward, 4);
}

#[test]
fn train_labels_must_be_in_range() {
    let model = TabIcl::<f32>::new(tiny_config(), 4).unwrap();
    let x = randn::<f32>(vec![30, 3], 2);
    let y: Vec<usize> = (0..20).map(|i| i % 13).chain([30]).collect();
    assert!(predict_hierarchical(&model, &x, &y[..21], 13, Batching::default()).is_err());
}
