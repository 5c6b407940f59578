use rand::Rng;
use rand_distr::StandardNormal;

use super::ensemble::{member_specs, predict_member};
use super::memory::Coefficients;
use super::metrics::{accuracy, auc_ovr, binary_auc, evaluate, log_loss};
use super::preprocess::{fit_lambda, yeo_johnson};
use super::table::{prepare_table, read_csv, read_predictions, write_predictions, UNSEEN_CATEGORY};
use super::*;
use crate::error::Error;
use crate::icl::ClassProbabilities;
use crate::model::{Batching, TabIcl};
use crate::tensor::Tensor;
use crate::testutil::{randn, tiny_config};

#[test]
fn memory_estimates_reproduce_the_fitted_formulas() {
    let mem = MemoryModel::default();
    assert_eq!(mem.col.a1, 0.0708);
    assert_eq!(mem.row.a1, -2.07e-5);
    assert_eq!(mem.icl.a3, 0.0195);
    let col = mem.estimate(Stage::Col, 1, 1);
    assert!((col - (0.0708 + 7.29e-6 + 0.00391 + 137.62)).abs() < 1e-12);
    assert!((col - 137.695).abs() < 1e-3);
    let icl = mem.estimate(Stage::Icl, 1, 50_000);
    assert!((icl - (-0.260 + 4.77e-7 * 50_000.0 + 0.0195 * 50_000.0 + 140.58)).abs() < 1e-9);
    assert!((icl - 1115.34).abs() < 0.01);
}

#[test]
fn column_plan_for_ten_thousand_samples_in_five_gigabytes() {
    assert_eq!(MemoryModel::default().plan_batch(Stage::Col, 10_000, 5000.0).unwrap(), 124);
}

#[test]
fn plans_are_feasible_and_maximal() {
    let mem = MemoryModel::default();
    let mut rng = crate::seed::rng(17);
    let mut planned = 0;
    while planned < 10_000 {
        let stage = Stage::ALL[rng.random_range(0..3)];
        let seq = rng.random_range(1..=100_000usize);
        let budget = rng.random_range(100.0..80_000.0);
        match mem.plan_batch(stage, seq, budget) {
            Ok(b) => {
                assert!(b >= 1);
                assert!(mem.estimate(stage, b, seq) <= budget);
                assert!(mem.estimate(stage, b + 1, seq) > budget);
                planned += 1;
            }
            Err(Error::BudgetTooSmall { required_mb, .. }) => assert!(required_mb > budget),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn budget_below_fixed_cost_is_an_error() {
    let mem = MemoryModel::default();
    assert!(matches!(
        mem.plan_batch(Stage::Row, 100, 100.0),
        Err(Error::BudgetTooSmall { .. })
    ));
    assert!(mem.plan_batch(Stage::Col, 0, 1e4).is_err());
}

#[test]
fn memory_grows_with_batch_and_sequence_on_a_grid() {
    // The fitted ICL batch slope is negative below 14 samples.
    let mem = MemoryModel::default();
    for stage in Stage::ALL {
        for seq in [14usize, 100, 1_000, 10_000, 100_000] {
            for batch in [1usize, 2, 8, 64, 512, 4096] {
                let here = mem.estimate(stage, batch, seq);
                assert!(mem.estimate(stage, batch + 1, seq) >= here, "{stage:?} b={batch} s={seq}");
                assert!(mem.estimate(stage, batch, seq + 1) >= here);
            }
        }
    }
}

#[test]
fn memory_model_loads_from_a_sidecar() {
    let custom = MemoryModel {
        col: Coefficients {
            a1: 1.0,
            a2: 0.0,
            a3: 0.5,
            a4: 10.0,
        },
        ..MemoryModel::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mem.json");
    std::fs::write(&path, serde_json::to_vec(&custom).unwrap()).unwrap();
    let loaded = MemoryModel::load(&path).unwrap();
    assert_eq!(loaded, custom);
    assert_eq!(loaded.plan_batch(Stage::Col, 2, 20.0).unwrap(), 5);
}

fn column(x: &Tensor<f32>, j: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    let m = x.shape()[1];
    rows.map(|i| x.data()[i * m + j] as f64).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[test]
fn constant_columns_map_to_zero() {
    let x = Tensor::from_fn(vec![20, 2], |i| if i % 2 == 0 { 3.5 } else { i as f32 });
    for kind in [PreprocessKind::ZNorm, PreprocessKind::PowerThenZNorm] {
        let out = Preprocessor::fit(&x, 15, kind).unwrap().transform(&x).unwrap();
        assert!(column(&out, 0, 0..20).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn standard_normal_columns_stay_standard() {
    let x = randn::<f32>(vec![1000, 3], 8);
    for kind in [PreprocessKind::ZNorm, PreprocessKind::PowerThenZNorm] {
        let out = Preprocessor::fit(&x, 1000, kind).unwrap().transform(&x).unwrap();
        for j in 0..3 {
            let (mean, std) = mean_std(&column(&out, j, 0..1000));
            assert!(mean.abs() < 0.05 && (0.9..=1.1).contains(&std), "{kind:?} {mean} {std}");
            let raw = column(&x, j, 0..1000);
            let corr = raw
                .iter()
                .zip(column(&out, j, 0..1000))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / 1000.0;
            assert!(corr > 0.95);
        }
    }
}

#[test]
fn preprocessing_ignores_test_rows() {
    let x = randn::<f32>(vec![50, 4], 3);
    let mut altered = x.clone();
    for v in &mut altered.data_mut()[30 * 4..] {
        *v = *v * 100.0 + 7.0;
    }
    altered.data_mut()[45 * 4] = f32::NAN;
    for kind in [PreprocessKind::ZNorm, PreprocessKind::PowerThenZNorm] {
        let a = Preprocessor::fit(&x, 30, kind).unwrap();
        let b = Preprocessor::fit(&altered, 30, kind).unwrap();
        assert_eq!(a, b);
        let ta = a.transform(&x).unwrap();
        let tb = b.transform(&altered).unwrap();
        let bits = |t: &Tensor<f32>| t.data()[..30 * 4].iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ta), bits(&tb));
    }
}

#[test]
fn missing_values_take_the_train_mean() {
    let mut x = Tensor::from_fn(vec![6, 1], |i| i as f32);
    x.data_mut()[1] = f32::NAN;
    x.data_mut()[5] = f32::NAN;
    let pre = Preprocessor::fit(&x, 4, PreprocessKind::ZNorm).unwrap();
    assert!((pre.columns[0].impute - (0.0 + 2.0 + 3.0) / 3.0).abs() < 1e-12);
    let out = pre.transform(&x).unwrap();
    assert!(out.is_finite());
    let at_mean = (pre.columns[0].impute - pre.columns[0].mean) / pre.columns[0].std;
    assert!((out.data()[5] as f64 - at_mean).abs() < 1e-6);
    assert!(at_mean.abs() < 1e-12);
    assert!(Preprocessor::fit(&x, 0, PreprocessKind::ZNorm).is_err());
}

#[test]
fn outliers_are_squashed_monotonically() {
    use super::preprocess::squash_outlier;
    assert_eq!(squash_outlier(3.9), 3.9);
    assert_eq!(squash_outlier(-4.0), -4.0);
    assert!((squash_outlier(5.0) - (4.0 + 2f64.ln())).abs() < 1e-15);
    assert_eq!(squash_outlier(-5.0), -squash_outlier(5.0));
    assert!(squash_outlier(f64::INFINITY).is_finite());
    assert!(squash_outlier(f64::NEG_INFINITY) < -700.0);
    let mut prev = f64::NEG_INFINITY;
    for e in -300..300 {
        let z = (e as f64 * 0.1).sinh() * 1e3;
        assert!(squash_outlier(z) >= prev);
        prev = squash_outlier(z);
    }
    let mut x = Tensor::from_fn(vec![30, 1], |i| (i % 3) as f32);
    x.data_mut()[29] = 1e30;
    let out = Preprocessor::fit(&x, 20, PreprocessKind::ZNorm).unwrap().transform(&x).unwrap();
    assert!(out.data()[29] > 4.0 && out.data()[29] < 80.0);
}

#[test]
fn yeo_johnson_is_monotone_and_reduces_to_identity_at_one() {
    for &lambda in &[-2.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0] {
        let mut prev = f64::NEG_INFINITY;
        for i in -200..=200 {
            let v = yeo_johnson(i as f64 * 0.05, lambda);
            assert!(v > prev);
            prev = v;
        }
    }
    for &x in &[-3.0, -0.1, 0.0, 0.7, 12.0] {
        assert!((yeo_johnson(x, 1.0) - x).abs() < 1e-12);
    }
}

#[test]
fn lambda_fit_follows_skew_direction() {
    let mut rng = crate::seed::rng(5);
    let right: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect();
    let left: Vec<f64> = right.iter().map(|v| -v).collect();
    assert!(fit_lambda(&right) < 0.8);
    assert!(fit_lambda(&left) > 1.2);
    let normal: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    assert!((fit_lambda(&normal) - 1.0).abs() < 0.3);
}

const CSV: &str = "a,color,label,b\n\
1.5,red,yes,10\n\
2.5,blue,no,NA\n\
,red,yes,30\n\
4.0,green,,40\n\
5.0,purple,,50\n\
0.5,blue,no,20\n";

#[test]
fn tables_split_on_missing_labels_and_encode_categories() {
    let raw = read_csv(CSV.as_bytes()).unwrap();
    let t = prepare_table(&raw, "label", None).unwrap();
    assert_eq!(t.features, vec!["a", "color", "b"]);
    assert_eq!(t.categorical, vec![false, true, false]);
    assert_eq!(t.train_rows, vec![0, 1, 2, 5]);
    assert_eq!(t.test_rows, vec![3, 4]);
    assert_eq!(t.class_names, vec!["no", "yes"]);
    assert_eq!(t.y_train, vec![1, 0, 1, 0]);
    assert_eq!(t.y_test, vec![None, None]);
    let x = &t.x;
    assert_eq!(x.shape(), &[6, 3]);
    // colors by first appearance among train rows: red=0, blue=1; green and purple unseen
    let colors: Vec<f32> = (0..6).map(|i| x.data()[i * 3 + 1]).collect();
    assert_eq!(colors, vec![0.0, 1.0, 0.0, 1.0, UNSEEN_CATEGORY, UNSEEN_CATEGORY]);
    assert!(x.data()[2 * 3].is_nan());
    assert!(x.data()[1 * 3 + 2].is_nan());
}

#[test]
fn numeric_labels_sort_numerically_and_rows_can_be_held_out() {
    let csv = "x,y\n1,10\n2,9\n3,10\n4,2\n5,9\n";
    let raw = read_csv(csv.as_bytes()).unwrap();
    let t = prepare_table(&raw, "y", Some(&[1, 3])).unwrap();
    assert_eq!(t.class_names, vec!["9", "10"]);
    assert_eq!(t.train_rows, vec![0, 2, 4]);
    assert_eq!(t.y_test, vec![Some(0), None]);
}

#[test]
fn table_errors_carry_positions() {
    let ragged = "a,b,y\n1,2,0\n3,4\n";
    match read_csv(ragged.as_bytes()) {
        Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 3)),
        other => panic!("{other:?}"),
    }
    let raw = read_csv("a,y\n1,0\n2,0\n3,\n".as_bytes()).unwrap();
    assert!(matches!(prepare_table(&raw, "y", None), Err(Error::Degenerate(_))));
    assert!(matches!(prepare_table(&raw, "nope", None), Err(Error::Input(_))));
    assert!(read_csv("a,y\n".as_bytes()).is_err());
}

#[test]
fn prediction_csv_round_trips_to_six_decimals() {
    let probs = ClassProbabilities::new(2, 3, vec![0.1234567, 0.5, 0.3765433, 0.9, 0.05, 0.05]).unwrap();
    let names = vec!["a".to_string(), "b".into(), "c".into()];
    let mut buf = Vec::new();
    write_predictions(&mut buf, &[4, 7], &probs, &names).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("row_id,pred_label,p_0,p_1,p_2\n4,b,0.123457,"));
    let back = read_predictions(&buf[..]).unwrap();
    assert_eq!(back[1].row_id, 7);
    assert_eq!(back[1].pred_label, "a");
    for (row, orig) in back.iter().zip(probs.iter_rows()) {
        for (a, b) in row.probabilities.iter().zip(orig) {
            assert!((a - *b as f64).abs() <= 5e-7 + 1e-9);
        }
    }
}

fn ensemble_fixture(classes: usize, seed: u64) -> (TabIcl<f32>, Tensor<f32>, Vec<usize>) {
    let model = TabIcl::<f32>::new(tiny_config(), seed).unwrap();
    let x = Tensor::from_fn(vec![40, 5], {
        let r = randn::<f32>(vec![40, 5], seed + 1);
        move |i| 3.0 * r.data()[i] + (i % 5) as f32
    });
    let y: Vec<usize> = (0..30).map(|i| i % classes).collect();
    (model, x, y)
}

#[test]
fn single_member_equals_the_plain_pipeline() {
    let (model, x, y) = ensemble_fixture(3, 1);
    let config = EnsembleConfig {
        members: 1,
        ..EnsembleConfig::default()
    };
    let ens = ensemble_predict(&model, &x, &y, 3, &config).unwrap();
    let xz = Preprocessor::fit(&x, 30, PreprocessKind::ZNorm).unwrap().transform(&x).unwrap();
    let plain = model.predict_dataset(&xz, &y, 3).unwrap();
    let bits = |p: &ClassProbabilities| p.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ens), bits(&plain));
}

#[test]
fn members_split_evenly_and_permutations_are_valid() {
    let specs = member_specs(&EnsembleConfig::default(), 7, 4);
    assert_eq!(specs.len(), 32);
    let power = specs.iter().filter(|s| s.preprocess == PreprocessKind::PowerThenZNorm).count();
    assert_eq!(power, 16);
    for s in &specs {
        let mut c = s.column_perm.clone();
        c.sort();
        assert_eq!(c, (0..7).collect::<Vec<_>>());
        let mut k = s.class_perm.clone();
        k.sort();
        assert_eq!(k, (0..4).collect::<Vec<_>>());
    }
    assert!(specs.iter().skip(1).any(|s| s.class_perm != vec![0, 1, 2, 3]));
}

#[test]
fn class_permutation_is_inverted_exactly() {
    let (model, x, y) = ensemble_fixture(4, 2);
    let pi = vec![2, 0, 3, 1];
    let spec = MemberSpec {
        class_perm: pi.clone(),
        ..MemberSpec::identity(5, 4, PreprocessKind::ZNorm)
    };
    let member = predict_member(&model, &x, &y, 4, &spec, Batching::default()).unwrap();
    let relabeled: Vec<usize> = y.iter().map(|&c| pi[c]).collect();
    let xz = Preprocessor::fit(&x, 30, PreprocessKind::ZNorm).unwrap().transform(&x).unwrap();
    let on_pi = model.predict_dataset(&xz, &relabeled, 4).unwrap();
    for r in 0..member.rows {
        for c in 0..4 {
            assert!((member.row(r)[c] - on_pi.row(r)[pi[c]]).abs() <= 1e-5);
        }
    }
}

#[test]
fn ensembles_are_on_the_simplex_and_deterministic() {
    let (model, x, y) = ensemble_fixture(3, 3);
    let config = EnsembleConfig {
        seed: 9,
        ..EnsembleConfig::default()
    };
    let a = ensemble_predict(&model, &x, &y, 3, &config).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let b = pool.install(|| ensemble_predict(&model, &x, &y, 3, &config)).unwrap();
    assert_eq!(a, b);
    for row in a.iter_rows() {
        let s: f64 = row.iter().map(|&p| p as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    let other = ensemble_predict(&model, &x, &y, 3, &EnsembleConfig { seed: 10, ..config.clone() }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn memory_budget_chunks_without_changing_results() {
    let (model, x, y) = ensemble_fixture(2, 4);
    let free = EnsembleConfig {
        members: 2,
        ..EnsembleConfig::default()
    };
    let tight = EnsembleConfig {
        memory_budget_mb: Some(138.6),
        ..free.clone()
    };
    let batching = ensemble::plan_batching(&tight, 40, 5, 2).unwrap();
    assert_eq!(batching.column_chunk, Some(4));
    assert_eq!(batching.row_chunk, Some(1));
    let a = ensemble_predict(&model, &x, &y, 2, &free).unwrap();
    let b = ensemble_predict(&model, &x, &y, 2, &tight).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn many_classes_dispatch_to_the_class_tree() {
    let model = TabIcl::<f32>::new(tiny_config(), 5).unwrap();
    let x = randn::<f32>(vec![70, 3], 6);
    let y: Vec<usize> = (0..60).map(|i| i % 25).collect();
    let config = EnsembleConfig {
        members: 2,
        ..EnsembleConfig::default()
    };
    let p = ensemble_predict(&model, &x, &y, 25, &config).unwrap();
    assert_eq!((p.rows, p.classes), (10, 25));
    let calls = model.calls().snapshot();
    assert_eq!(calls.embed_table, 2);
    assert_eq!(calls.icl_forward, 2 * 4);
    for row in p.iter_rows() {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn ensemble_rejects_bad_inputs() {
    let (model, x, y) = ensemble_fixture(2, 1);
    let config = EnsembleConfig::default();
    assert!(ensemble_predict(&model, &x, &y, 1, &config).is_err());
    assert!(ensemble_predict(&model, &x, &vec![0; 40], 2, &config).is_err());
    assert!(ensemble_predict(&model, &x, &[0, 5], 2, &config).is_err());
}

#[test]
fn perfect_and_uniform_predictions() {
    let y = vec![0, 1, 2, 1];
    let onehot = ClassProbabilities::new(
        4,
        3,
        y.iter().flat_map(|&c| (0..3).map(move |k| if k == c { 1.0 } else { 0.0 })).collect(),
    )
    .unwrap();
    let m = evaluate(&onehot, &y).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert!(m.log_loss < 1e-12);
    assert_eq!(m.auc_ovr, Some(1.0));
    let uniform = ClassProbabilities::new(4, 2, vec![0.5; 8]).unwrap();
    let yb = vec![0, 1, 1, 0];
    assert!((log_loss(&uniform, &yb).unwrap() - std::f64::consts::LN_2).abs() < 1e-7);
    assert_eq!(auc_ovr(&uniform, &yb).unwrap(), Some(0.5));
}

#[test]
fn single_class_auc_is_undefined() {
    let p = ClassProbabilities::new(3, 2, vec![0.2, 0.8, 0.6, 0.4, 0.5, 0.5]).unwrap();
    assert_eq!(auc_ovr(&p, &[1, 1, 1]).unwrap(), None);
    assert!(binary_auc(&[0.1, 0.2], &[true, true]).is_none());
}

#[test]
fn zero_probability_is_clipped() {
    let p = ClassProbabilities::new(1, 2, vec![1.0, 0.0]).unwrap();
    assert!((log_loss(&p, &[1]).unwrap() - (-(1e-15f64).ln())).abs() < 1e-9);
}

#[test]
fn metrics_match_brute_force_on_twenty_rows() {
    let mut rng = crate::seed::rng(21);
    let (rows, classes) = (20, 3);
    let mut data = Vec::new();
    for _ in 0..rows {
        let raw: Vec<f64> = (0..classes).map(|_| (rng.random_range(0..5) as f64) + 0.5).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| (v / s) as f32));
    }
    let p = ClassProbabilities::new(rows, classes, data).unwrap();
    let y: Vec<usize> = (0..rows).map(|i| (i * 7 + 1) % classes).collect();
    let mut hits = 0.0;
    let mut ll = 0.0;
    for (i, &t) in y.iter().enumerate() {
        let row = p.row(i);
        let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        if best == t {
            hits += 1.0;
        }
        ll -= (row[t] as f64).ln();
    }
    let mut auc_sum = 0.0;
    for c in 0..classes {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..rows {
            for j in 0..rows {
                if y[i] == c && y[j] != c {
                    pairs += 1.0;
                    let (si, sj) = (p.row(i)[c], p.row(j)[c]);
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        auc_sum += wins / pairs;
    }
    assert!((accuracy(&p, &y).unwrap() - hits / rows as f64).abs() < 1e-9);
    assert!((log_loss(&p, &y).unwrap() - ll / rows as f64).abs() < 1e-9);
    assert!((auc_ovr(&p, &y).unwrap().unwrap() - auc_sum / classes as f64).abs() < 1e-9);
}
