mod common;

use std::collections::BTreeSet;

use common::rng;
use mexp_core::dgm::losses::eval;
use mexp_core::dgm::{warp_image, DisplacementField};
use mexp_core::pipeline::*;
use mexp_core::{Error, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

fn from_confusion_lists(m: &[[usize; 3]; 3]) -> (Vec<usize>, Vec<usize>) {
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for (t, row) in m.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                preds.push(p);
                labels.push(t);
            }
        }
    }
    (preds, labels)
}

#[test]
fn metrics_hand_computed_confusion() {
    let (preds, labels) = from_confusion_lists(&[[5, 1, 0], [0, 4, 2], [1, 0, 5]]);
    let m = compute_metrics(&preds, &labels, 3).unwrap();
    assert!((m.uar - 14.0 / 18.0).abs() < 1e-12);
    let uf1 = (10.0 / 12.0 + 8.0 / 11.0 + 10.0 / 13.0) / 3.0;
    assert!((m.uf1 - uf1).abs() < 1e-12);
    assert!((m.accuracy - 14.0 / 18.0).abs() < 1e-12);
    assert_eq!(m.confusion, vec![vec![5, 1, 0], vec![0, 4, 2], vec![1, 0, 5]]);
    assert_eq!(m.samples, 18);
}

#[test]
fn metrics_perfect_and_constant_predictors() {
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let m = compute_metrics(&labels, &labels, 3).unwrap();
    assert_eq!((m.uf1, m.uar, m.accuracy), (1.0, 1.0, 1.0));
    let constant = vec![1; 30];
    let m = compute_metrics(&constant, &labels, 3).unwrap();
    assert!((m.uar - 1.0 / 3.0).abs() < 1e-12);
    // the predicted class has F1 = 2·10 / (10 + 30)
    assert!((m.uf1 - 0.5 / 3.0).abs() < 1e-12);
}

#[test]
fn metrics_absent_class_counts_as_zero() {
    let m = compute_metrics(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
    assert_eq!(m.per_class_recall, vec![1.0, 1.0, 0.0]);
    assert!((m.uar - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn metrics_invariant_to_order_and_label_permutation() {
    let mut r = rng(5);
    for _ in 0..50 {
        let n = r.random_range(5..40);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let base = compute_metrics(&preds, &labels, 3).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let m = compute_metrics(
            &order.iter().map(|&i| preds[i]).collect::<Vec<_>>(),
            &order.iter().map(|&i| labels[i]).collect::<Vec<_>>(),
            3,
        )
        .unwrap();
        assert_eq!(m, base);
        let mut perm = [0, 1, 2];
        perm.shuffle(&mut r);
        let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
        let m = compute_metrics(&relabel(&preds), &relabel(&labels), 3).unwrap();
        assert!((m.uf1 - base.uf1).abs() < 1e-12 && (m.uar - base.uar).abs() < 1e-12);
    }
}

#[test]
fn metrics_reject_bad_input() {
    assert!(matches!(compute_metrics(&[0, 1], &[0], 3), Err(Error::Usage(_))));
    assert!(matches!(compute_metrics(&[3], &[0], 3), Err(Error::Usage(_))));
}

#[test]
fn pooled_confusion_sums_folds() {
    let a = vec![vec![1, 0], vec![2, 3]];
    let b = vec![vec![0, 4], vec![1, 1]];
    assert_eq!(pool_confusion([&a, &b], 2), vec![vec![1, 4], vec![3, 4]]);
}

#[test]
fn loso_partition_properties() {
    let mut r = rng(9);
    for _ in 0..100 {
        let k = r.random_range(2..8);
        let n = r.random_range(k..40);
        let mut subjects: Vec<String> = (0..n).map(|i| format!("p{}", if i < k { i } else { r.random_range(0..k) })).collect();
        subjects.shuffle(&mut r);
        let folds = loso_split(&subjects).unwrap();
        let unique: BTreeSet<&String> = subjects.iter().collect();
        assert_eq!(folds.len(), unique.len());
        let mut seen = vec![0; n];
        for f in &folds {
            assert!(!f.test.is_empty());
            for &i in &f.test {
                assert_eq!(subjects[i], f.subject);
                seen[i] += 1;
            }
            for &i in &f.train {
                assert_ne!(subjects[i], f.subject);
            }
            assert_eq!(f.train.len() + f.test.len(), n);
        }
        assert!(seen.iter().all(|&c| c == 1));
    }
    assert!(matches!(loso_split(&["a", "a"]), Err(Error::Usage(_))));
}

#[test]
fn apex_jitter_boundaries_and_balance() {
    let mut r = rng(3);
    assert_eq!(jitter_index(5, 0, &mut r).unwrap(), 1);
    assert_eq!(jitter_index(5, 4, &mut r).unwrap(), 3);
    assert!(jitter_index(1, 0, &mut r).is_err());
    assert!(jitter_index(3, 3, &mut r).is_err());
    let n = 20_000;
    let up = (0..n).filter(|_| jitter_index(7, 3, &mut r).unwrap() == 4).count();
    assert!((up as f64 / n as f64 - 0.5).abs() < 0.02);
    let frames: Vec<Tensor<f32>> = (0..4).map(|k| Tensor::full(&[1, 2, 2], k as f32 / 4.0)).collect();
    let pair = apex_jitter(&frames, 3, "s", Some(1), &mut r).unwrap();
    assert_eq!(pair.apex, frames[2]);
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec { subjects: 3, samples_per_class: 2, size: 64, ..Default::default() }
}

fn small_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.model.dgm.height = 64;
    c.model.dgm.width = 64;
    c.model.fusion.embed_dim = 16;
    c.model.fusion.heads = 2;
    c.train.batch_size = 4;
    c.train.epochs = 1;
    c
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = generate_synthetic_dataset::<f32>(&small_spec()).unwrap();
    let b = generate_synthetic_dataset::<f32>(&small_spec()).unwrap();
    assert_eq!(a.dataset.len(), 18);
    for (x, y) in a.dataset.samples.iter().zip(&b.dataset.samples) {
        assert_eq!(x.id, y.id);
        assert_eq!(x.frames, y.frames);
        assert_eq!(x.landmarks, y.landmarks);
    }
    let c = generate_synthetic_dataset::<f32>(&SyntheticSpec { seed: 1, ..small_spec() }).unwrap();
    assert_ne!(a.dataset.samples[0].frames, c.dataset.samples[0].frames);
}

#[test]
fn synthetic_default_layout() {
    let spec = SyntheticSpec::default();
    assert_eq!((spec.subjects, spec.classes, spec.samples_per_class, spec.size), (10, 3, 6, 128));
    assert_eq!(spec.num_samples(), 180);
    assert_eq!(spec.intensity(0), 0.0);
    assert_eq!(spec.intensity(spec.apex), 1.0);
}

#[test]
fn ground_truth_field_reconstructs_the_apex() {
    let data = generate_synthetic_dataset::<f64>(&small_spec()).unwrap();
    for (s, field) in data.dataset.samples.iter().zip(&data.fields) {
        let sh = field.shape();
        let df = DisplacementField::from_channels_first(&field.clone().reshape(&[1, 2, sh[1], sh[2]]).unwrap(), 0, 1.0);
        let warped = warp_image(&s.frames[0], &df).unwrap();
        let apex = &s.frames[s.apex];
        let rec = eval::rec(&warped, apex).unwrap();
        let still = eval::rec(&s.frames[0], apex).unwrap();
        assert!(rec < 1e-2, "{}: {rec}", s.id);
        assert!(rec < 0.5 * still, "{}: warped {rec} vs unwarped {still}", s.id);
    }
}

/// Nearest class centroid of the ground-truth field sampled at the landmarks,
/// fitted without the test subject.
#[test]
fn classes_are_separable_by_a_landmark_field_oracle() {
    let data = generate_synthetic_dataset::<f64>(&SyntheticSpec { subjects: 6, samples_per_class: 3, ..small_spec() }).unwrap();
    let ds = &data.dataset;
    let features: Vec<Vec<f64>> = ds
        .samples
        .iter()
        .zip(&data.fields)
        .map(|(s, f)| {
            let at = |c: usize, &(x, y): &(f64, f64)| f.at(&[c, (y as usize).min(63), (x as usize).min(63)]);
            s.landmarks.points.iter().flat_map(|p| [at(0, p), at(1, p)]).collect()
        })
        .collect();
    let mut correct = 0;
    for fold in ds.loso_split().unwrap() {
        let dim = features[0].len();
        let mut centroids = vec![vec![0.0; dim]; 3];
        let mut counts = [0.0; 3];
        for &i in &fold.train {
            let c = ds.samples[i].label;
            counts[c] += 1.0;
            for (a, b) in centroids[c].iter_mut().zip(&features[i]) {
                *a += b;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        for &i in &fold.test {
            let dist = |c: &Vec<f64>| c.iter().zip(&features[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = (0..3).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            correct += (pred == ds.samples[i].label) as usize;
        }
    }
    assert!(correct as f64 / ds.len() as f64 >= 0.95, "{correct}/{}", ds.len());
}

#[test]
fn written_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic_dataset::<f32>(&small_spec()).unwrap();
    let rows = write_synthetic_dataset(&data, dir.path()).unwrap();
    assert_eq!(rows.len(), data.dataset.len());
    let loaded = load_dataset::<f32>(&dir.path().join("manifest.csv"), 1).unwrap();
    assert_eq!(loaded.len(), data.dataset.len());
    for (a, b) in loaded.samples.iter().zip(&data.dataset.samples) {
        assert_eq!((&a.id, &a.subject, a.label, a.apex), (&b.id, &b.subject, b.label, b.apex));
        for (p, q) in a.landmarks.points.iter().zip(&b.landmarks.points) {
            assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
        }
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert!(x.max_abs_diff(y) < 1e-6);
        }
        assert_eq!(a.flow, b.flow);
    }
}

#[test]
fn region_boxes_stay_inside_the_frame() {
    let data = generate_synthetic_dataset::<f32>(&SyntheticSpec { subjects: 10, samples_per_class: 1, ..Default::default() }).unwrap();
    let config = ModelConfig::default();
    for s in &data.dataset.samples {
        let set = config.regions_for(&s.landmarks).unwrap();
        assert_eq!(set.boxes.len(), 9);
        for b in set.boxes.iter().chain([&set.full_face]) {
            assert!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 128.0 && b.y1 <= 128.0, "{}: {b:?}", s.id);
            assert!(b.width() > 0.0 && b.height() > 0.0);
        }
    }
}

#[test]
fn stack_and_token_dimensions() {
    let c = ModelConfig::default();
    assert_eq!(c.stack_channels(), 4);
    assert_eq!(c.tokens(), 25);
    assert_eq!(c.patch_dim(), 18 * 18 * 4);
    let mut di = c.clone();
    Ablation::M2.apply(&mut di, &mut true);
    assert_eq!(di.stack_channels(), 3);
    let mut grid = c.clone();
    Ablation::M5.apply(&mut grid, &mut true);
    assert_eq!(grid.num_regions(), 9);
}

#[test]
fn ablation_parsing_and_switches() {
    assert_eq!(Ablation::parse("m3").unwrap(), Ablation::M3);
    assert!(matches!(Ablation::parse("M10"), Err(Error::Usage(_))));
    let mut ss = true;
    let mut c = ModelConfig::default();
    Ablation::M3.apply(&mut c, &mut ss);
    assert!(!ss);
    assert_eq!(c, ModelConfig::default());
    for (a, check) in [
        (Ablation::M6, Box::new(|c: &ModelConfig| !c.switches.full_face) as Box<dyn Fn(&ModelConfig) -> bool>),
        (Ablation::M7, Box::new(|c: &ModelConfig| !c.switches.local)),
        (Ablation::M8, Box::new(|c: &ModelConfig| !c.switches.global)),
        (Ablation::M0, Box::new(|c: &ModelConfig| c.features == FeatureSource::OpticalFlow)),
    ] {
        let mut c = ModelConfig::default();
        a.apply(&mut c, &mut true);
        assert!(check(&c), "{a:?}");
    }
}

#[test]
fn dynamic_image_weights_late_frames_positively() {
    let frames: Vec<Tensor<f64>> = (0..3).map(|k| Tensor::full(&[1, 1, 2], k as f64)).collect();
    // Σ (2t − 4)·t over t = 1..3 with frame values 0, 1, 2 is 0 + 0 + 4
    let di = dynamic_image(&frames);
    assert_eq!(di.data(), &[1.0, 1.0]);
}

#[test]
fn batch_plan_merges_trailing_singletons() {
    assert_eq!(batch_plan(10, 4), vec![0..4, 4..8, 8..10]);
    assert_eq!(batch_plan(9, 4), vec![0..4, 4..9]);
    assert_eq!(batch_plan(1, 4), vec![0..1]);
}

#[test]
fn experiment_config_round_trips_through_toml() {
    for c in [ExperimentConfig::published(), ExperimentConfig::desk()] {
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
    assert!(matches!(ExperimentConfig::from_toml("[train]\nbogus = 1\n"), Err(Error::Config(_))));
    assert!(matches!(ExperimentConfig::from_toml("[train]\nbatch_size = 0\n"), Err(Error::Config(_))));
    let p = ExperimentConfig::published();
    assert_eq!((p.train.batch_size, p.train.dgm_lr, p.train.cls_grad_scale), (32, 0.002, 1e-6));
    assert_eq!((p.model.region_size, p.model.patch_size), (90, 18));
}

#[test]
fn classification_gradient_into_dgm_is_scaled() {
    let data = generate_synthetic_dataset::<f64>(&small_spec()).unwrap().dataset;
    let trainer = Trainer::<f64>::new(small_experiment().model, small_experiment().train).unwrap();
    let batch = trainer.model.batch(&data, &[0, 2, 4, 6], LoadMode::Eval, false, &mut rng(0)).unwrap();
    let (g0, _, _) = trainer.gradients(&batch, 0.0).unwrap();
    let (g1, _, _) = trainer.gradients(&batch, 1.0).unwrap();
    let s = 1e-6;
    let (gs, _, _) = trainer.gradients(&batch, s).unwrap();
    let mut cls_part = 0.0;
    for &id in trainer.dgm_params() {
        let (a, b, c) = (g0.param(id).unwrap(), g1.param(id).unwrap(), gs.param(id).unwrap());
        for ((&a, &b), &c) in a.data().iter().zip(b.data()).zip(c.data()) {
            let want = a + s * (b - a);
            assert!((c - want).abs() <= 1e-9 * (1.0 + want.abs()), "{c} vs {want}");
            cls_part += (b - a).abs();
        }
    }
    assert!(cls_part > 0.0);
    for &id in trainer.fusion_params() {
        assert_eq!(g0.param(id), gs.param(id));
    }
}

#[test]
fn training_memorises_two_samples() {
    let data = generate_synthetic_dataset::<f32>(&small_spec()).unwrap().dataset;
    let mut c = small_experiment();
    c.train.apex_jitter = false;
    c.train.fusion_lr = 3e-3;
    let mut trainer = Trainer::<f32>::new(c.model, c.train).unwrap();
    trainer.set_schedule(0);
    let idx = [0, 4];
    let batch = trainer.batch(&data, &idx, LoadMode::Train).unwrap();
    let first = trainer.train_step(&batch).unwrap().cls;
    let mut last = first;
    for _ in 0..40 {
        last = trainer.train_step(&batch).unwrap().cls;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
    let preds: Vec<usize> = trainer.predict(&data, &idx).unwrap().iter().map(|r| r.label).collect();
    assert_eq!(preds, data.labels(&idx));
}

#[test]
fn self_supervised_step_touches_only_the_dgm() {
    let data = generate_synthetic_dataset::<f32>(&small_spec()).unwrap().dataset;
    let c = small_experiment();
    let mut trainer = Trainer::<f32>::new(c.model, c.train).unwrap();
    let pairs = trainer.sample_pairs(&data, &[0, 1, 2, 3, 4, 5], 6).unwrap();
    let fusion = trainer.store.checksum("fusion.");
    let dgm = trainer.store.checksum("dgm.");
    let first = trainer.self_supervised_step(&pairs).unwrap()[3];
    let mut last = first;
    for _ in 0..30 {
        last = trainer.self_supervised_step(&pairs).unwrap()[3];
    }
    assert_eq!(trainer.store.checksum("fusion."), fusion);
    assert_ne!(trainer.store.checksum("dgm."), dgm);
    assert!(last < first, "{first} -> {last}");
    assert!(matches!(trainer.self_supervised_step(&[]), Err(Error::Usage(_))));
}

#[test]
fn numerical_failures_are_reported() {
    let data = generate_synthetic_dataset::<f32>(&small_spec()).unwrap().dataset;
    let c = small_experiment();
    let mut trainer = Trainer::<f32>::new(c.model, c.train).unwrap();
    let batch = trainer.batch(&data, &[0, 1], LoadMode::Train).unwrap();
    let id = trainer.fusion_params()[0];
    trainer.store.value_mut(id).data_mut()[0] = f32::NAN;
    assert!(matches!(trainer.train_step(&batch), Err(Error::Numerical(_))));
}

#[test]
fn forward_is_deterministic_and_checkpoints_restore() {
    let data = generate_synthetic_dataset::<f32>(&small_spec()).unwrap().dataset;
    let c = small_experiment();
    let idx: Vec<usize> = (0..6).collect();
    let a = Trainer::<f32>::new(c.model.clone(), c.train.clone()).unwrap();
    let b = Trainer::<f32>::new(c.model.clone(), c.train.clone()).unwrap();
    let pa = a.predict(&data, &idx).unwrap();
    assert_eq!(pa, b.predict(&data, &idx).unwrap());
    assert_eq!(pa, a.predict(&data, &idx).unwrap());
    for r in &pa {
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.save(&path).unwrap();
    let mut other = c.train.clone();
    other.seed = 99;
    let mut restored = Trainer::<f32>::new(c.model.clone(), other).unwrap();
    assert_ne!(restored.predict(&data, &idx).unwrap(), pa);
    restored.load(&path).unwrap();
    assert_eq!(restored.predict(&data, &idx).unwrap(), pa);

    let mut wider = c.model.clone();
    wider.fusion.embed_dim = 32;
    let mut mismatched = Trainer::<f32>::new(wider, c.train).unwrap();
    assert!(matches!(mismatched.load(&path), Err(Error::Version(_))));
}

#[test]
fn empty_inputs_are_usage_errors() {
    let data = generate_synthetic_dataset::<f32>(&small_spec()).unwrap().dataset;
    let c = small_experiment();
    let mut trainer = Trainer::<f32>::new(c.model, c.train).unwrap();
    assert!(matches!(trainer.batch(&data, &[], LoadMode::Train), Err(Error::Usage(_))));
    assert!(matches!(trainer.fit(&data, &[]), Err(Error::Usage(_))));
}

#[test]
fn loso_report_covers_every_sample_once() {
    let data = generate_synthetic_dataset::<f32>(&small_spec()).unwrap().dataset;
    let mut calls = 0;
    let report = run_loso(&data, &small_experiment(), None, |_| calls += 1).unwrap();
    assert_eq!(calls, 3);
    assert_eq!(report.folds.len(), 3);
    assert_eq!(report.aggregate.samples, data.len());
    let ids: BTreeSet<&String> = report.folds.iter().flat_map(|f| &f.test_ids).collect();
    assert_eq!(ids.len(), data.len());
    assert_eq!(report.per_domain.values().map(|m| m.samples).sum::<usize>(), data.len());
    assert_ne!(fold_seed(0, 0), fold_seed(0, 1));
    let partial = run_loso(&data, &small_experiment(), Some(1), |_| {}).unwrap();
    assert_eq!(partial.folds.len(), 1);
}
