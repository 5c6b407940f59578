use super::*;
use crate::testutil::{randn, tiny_config};

#[test]
fn presets_validate() {
    ModelConfig::paper().validate().unwrap();
    ModelConfig::desk().validate().unwrap();
    let mut bad = ModelConfig::desk();
    bad.icl.model_dim = 32;
    assert!(bad.validate().is_err());
    let mut bad = ModelConfig::desk();
    bad.row.d = 32;
    assert!(bad.validate().is_err());
}

#[test]
fn paper_preset_dimensions() {
    let c = ModelConfig::paper();
    assert_eq!((c.column.d, c.column.k_inducing, c.column.n_isab, c.column.heads), (128, 128, 3, 4));
    assert_eq!((c.row.layers, c.row.heads, c.row.n_cls, c.row.output_dim()), (3, 8, 4, 512));
    assert_eq!((c.icl.layers, c.icl.heads, c.icl.model_dim, c.icl.c_max), (12, 4, 512, 10));
}

#[test]
fn prediction_shape_contract() {
    let model = TabIcl::<f32>::new(ModelConfig::desk(), 1).unwrap();
    let x = randn::<f32>(vec![300, 10], 2);
    let y: Vec<usize> = (0..240).map(|i| i % 4).collect();
    let p = model.predict_dataset(&x, &y, 4).unwrap();
    assert_eq!((p.rows, p.classes), (60, 4));
}

#[test]
fn too_many_classes_is_an_error() {
    let model = TabIcl::<f32>::new(tiny_config(), 1).unwrap();
    let x = randn::<f32>(vec![30, 2], 2);
    let y: Vec<usize> = (0..20).map(|i| i % 11).collect();
    assert!(model.predict_dataset(&x, &y, 11).is_err());
}

#[test]
fn chunked_inference_matches_single_pass() {
    let model = TabIcl::<f32>::new(tiny_config(), 3).unwrap();
    let x = randn::<f32>(vec![23, 5], 4);
    let full = model.row_embeddings(&x, 15, Batching::default()).unwrap();
    let chunked = model
        .row_embeddings(
            &x,
            15,
            Batching {
                column_chunk: Some(2),
                row_chunk: Some(4),
            },
        )
        .unwrap();
    assert!(full.max_abs_diff(&chunked) < 1e-6);
}

#[test]
fn graph_and_inference_paths_agree() {
    let model = TabIcl::<f32>::new(tiny_config(), 5).unwrap();
    let x = randn::<f32>(vec![14, 3], 6);
    let y: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let mut g = Graph::new();
    let logits = model.logits_graph(&mut g, &x, &y, 3).unwrap();
    let via_graph = crate::icl::masked_probabilities(g.value(logits), 3).unwrap();
    let direct = model.predict_dataset(&x, &y, 3).unwrap();
    assert!(via_graph.max_abs_diff(&direct) < 1e-6);
}

#[test]
fn worker_count_does_not_change_results() {
    let model = TabIcl::<f32>::new(tiny_config(), 7).unwrap();
    let x = randn::<f32>(vec![20, 6], 8);
    let y: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let batching = Batching {
        column_chunk: Some(1),
        row_chunk: Some(3),
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| model.predict_dataset_batched(&x, &y, 2, batching).unwrap())
    };
    assert_eq!(run(1).data, run(4).data);
}

#[test]
fn collapse_probe_counts() {
    let model = TabIcl::<f32>::new(tiny_config(), 9).unwrap();
    let same = Tensor::from_fn(vec![6, 3], |i| (i % 3) as f32);
    assert_eq!(model.collapse_probe(&same).unwrap(), 1);
    let one = randn::<f32>(vec![1, 3], 10);
    assert_eq!(model.collapse_probe(&one).unwrap(), 1);
}

#[test]
fn call_counters_track_stages() {
    let model = TabIcl::<f32>::new(tiny_config(), 11).unwrap();
    let x = randn::<f32>(vec![10, 2], 12);
    let y = [0usize, 1, 0, 1, 0, 1];
    model.predict_dataset(&x, &y, 2).unwrap();
    let s = model.calls().snapshot();
    assert_eq!((s.embed_table, s.row_interact, s.icl_forward), (1, 1, 1));
}

#[test]
fn column_summaries_have_model_width() {
    let model = TabIcl::<f32>::new(tiny_config(), 13).unwrap();
    let x = randn::<f32>(vec![10, 3], 14);
    let s = model.column_summaries(&x, 7).unwrap();
    assert_eq!(s.len(), 3);
    assert!(s.iter().all(|v| v.len() == 8));
}

#[test]
fn full_pipeline_gradients() {
    let model = TabIcl::<f64>::new(
        ModelConfig {
            column: crate::column::ColumnEmbedderConfig {
                d: 4,
                k_inducing: 2,
                n_isab: 1,
                heads: 2,
            },
            row: crate::row::RowInteractorConfig {
                layers: 1,
                heads: 2,
                d: 4,
                n_cls: 1,
                ..Default::default()
            },
            icl: crate::icl::IclConfig {
                layers: 1,
                heads: 2,
                model_dim: 4,
                c_max: 3,
                head_hidden: 4,
            },
        },
        15,
    )
    .unwrap();
    let x = randn::<f64>(vec![6, 2], 16);
    let err = crate::tensor::gradcheck::grad_check_params(&model.params, |g, store| {
        let mut m = model.clone();
        m.params = store.clone();
        m.loss_graph(g, &x, &[0, 1, 2, 0], &[1, 2], 3)
    })
    .unwrap();
    assert!(err < 1e-4, "pipeline rel err {err}");
}
