//! Training, checkpointing, evaluation and visualization on tiny datasets.

use std::path::Path;
use std::sync::OnceLock;

use objabn::data::{generate_synthetic, render_split, sample_clip, SyntheticSpec};
use objabn::harness::{
    checkpoint_path, evaluate_model, train, visualize, Checkpoint, LossMode, RunConfig, Trainer,
};
use objabn::{Dataset, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        train_videos: 12,
        val_videos: 8,
        height: 32,
        width: 32,
        radius: [4.0, 5.0],
        speed: [0.5, 1.0],
        ..SyntheticSpec::default()
    }
}

fn tiny_data() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&tiny_spec(), dir.path()).unwrap();
        dir
    })
    .path()
}

fn tiny_config(mode: LossMode, pc: bool, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 11,
        mode,
        pc_enabled: pc,
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.model.heads = if mode == LossMode::Mha { 3 } else { 1 };
    cfg.optim.lr = 1e-3;
    cfg.optim.epochs = 1;
    cfg.optim.batch_size = 4;
    cfg.synthetic = tiny_spec();
    cfg.data.root = tiny_data().to_path_buf();
    cfg
}

fn train_split() -> Dataset {
    Dataset::open(&tiny_data().join("train")).unwrap()
}

fn val_split() -> Dataset {
    Dataset::open(&tiny_data().join("val")).unwrap()
}

#[test]
fn zero_epochs_saves_the_initialization_and_an_empty_log() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(LossMode::Abn, false, tmp.path());
    cfg.optim.epochs = 0;
    let report = train(&cfg, None).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(std::fs::read_to_string(&report.log_path).unwrap(), "");
    let fresh = Trainer::new(&cfg, train_split().classes)
        .unwrap()
        .checkpoint();
    let saved = Checkpoint::load(&report.final_checkpoint).unwrap();
    assert_eq!(saved.epoch, 0);
    assert_eq!(saved.params, fresh.params);
    assert_eq!(
        Checkpoint::load(&checkpoint_path(tmp.path(), 0))
            .unwrap()
            .params,
        fresh.params
    );
}

#[test]
fn mask_supervision_lowers_the_mask_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(LossMode::Mask, false, tmp.path());
    cfg.optim.epochs = 6;
    let report = train(&cfg, None).unwrap();
    let mask = |i: usize| report.epochs[i].mean_terms["mask"];
    let (first, last) = (mask(0), mask(report.epochs.len() - 1));
    assert!(last < first, "mask loss {first} -> {last}");
}

#[test]
fn perfect_classifier_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LossMode::Abn, false, tmp.path());
    let mut ds = train_split();
    for v in &mut ds.videos {
        v.label = 0;
    }
    let mut t = Trainer::new(&cfg, ds.classes.clone()).unwrap();
    let bias = t.store.find("backbone.head.bias").unwrap();
    t.store.get_mut(bias).data_mut()[0] = 50.0;
    let m = evaluate_model(&t.model, &t.store, &ds, &cfg.val_protocol()).unwrap();
    assert_eq!(m.top1, 1.0);
    assert_eq!(m.top5, 1.0);
}

#[test]
fn untrained_models_are_at_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        val_videos: 40,
        ..tiny_spec()
    };
    let ds = Dataset {
        classes: spec.class_names(),
        videos: render_split(&spec, false, spec.val_videos).unwrap(),
    };
    let seeds = 8u64;
    let mean = (0..seeds)
        .map(|seed| {
            let cfg = RunConfig {
                seed,
                ..tiny_config(LossMode::Abn, false, tmp.path())
            };
            let t = Trainer::new(&cfg, ds.classes.clone()).unwrap();
            evaluate_model(&t.model, &t.store, &ds, &cfg.val_protocol())
                .unwrap()
                .top1
        })
        .sum::<f64>()
        / seeds as f64;
    assert!((mean - 0.25).abs() <= 0.1, "mean top-1 {mean}");
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LossMode::Abn, false, tmp.path());
    let mut ds = val_split();
    let t = Trainer::new(&cfg, ds.classes.clone()).unwrap();
    ds.classes.pop();
    ds.videos.retain(|v| v.label < ds.classes.len());
    let err = evaluate_model(&t.model, &t.store, &ds, &cfg.val_protocol()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut straight = tiny_config(LossMode::Mask, true, &tmp.path().join("straight"));
    straight.optim.epochs = 2;
    let a = train(&straight, None).unwrap();

    let mut first = tiny_config(LossMode::Mask, true, &tmp.path().join("split"));
    first.optim.epochs = 1;
    let half = train(&first, None).unwrap();
    let second = RunConfig {
        optim: straight.optim.clone(),
        ..first.clone()
    };
    let b = train(&second, Some(&half.final_checkpoint)).unwrap();

    let ca = Checkpoint::load(&a.final_checkpoint).unwrap();
    let cb = Checkpoint::load(&b.final_checkpoint).unwrap();
    assert_eq!(ca.epoch, 2);
    assert_eq!(ca.params, cb.params);
    assert_eq!(ca.rng, cb.rng);
    assert_eq!(
        a.epochs.last().unwrap().mean_total,
        b.epochs.last().unwrap().mean_total
    );
    let lines = std::fs::read_to_string(&b.log_path).unwrap();
    assert_eq!(lines.lines().count(), 2 * 3);
}

#[test]
fn non_finite_parameters_abort_the_step_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LossMode::Mask, false, tmp.path());
    let ds = train_split();
    let mut t = Trainer::new(&cfg, ds.classes.clone()).unwrap();
    let bias = t.store.find("backbone.head.bias").unwrap();
    t.store.get_mut(bias).data_mut()[1] = f32::NAN;
    let before = t.checkpoint();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch: Vec<_> = ds.videos[..2]
        .iter()
        .map(|v| sample_clip(v, &cfg.train_protocol(), &mut rng).unwrap())
        .collect();
    match t.step(&batch) {
        Err(Error::NonFinite { step, terms, .. }) => {
            assert_eq!(step, 1);
            assert!(terms.contains("per"), "{terms}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    let after = t.checkpoint();
    for ((_, a), (_, b)) in before.params.iter().zip(&after.params) {
        assert_eq!(a.data().len(), b.data().len());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x == y || (x.is_nan() && y.is_nan())));
    }
    assert_eq!(after.optimizer.step, 0);
}

#[test]
fn every_ablation_row_trains() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in [LossMode::Abn, LossMode::Mask, LossMode::Mha] {
        for pc in [false, true] {
            let out = tmp.path().join(format!("{mode:?}-{pc}"));
            let report = train(&tiny_config(mode, pc, &out), None).unwrap();
            let e = &report.epochs[0];
            assert!(e.mean_total.is_finite(), "{mode:?} pc={pc}");
            assert_eq!(e.mean_terms.contains_key("pc"), pc, "{mode:?} pc={pc}");
            assert_eq!(e.centroid_distance.is_some(), pc, "{mode:?} pc={pc}");
        }
    }
}

#[test]
fn visualization_has_a_row_per_head_and_stable_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LossMode::Mha, false, tmp.path());
    let ds = val_split();
    let t = Trainer::new(&cfg, ds.classes.clone()).unwrap();
    let video = &ds.videos[0];
    let render = |dir: &str| {
        let v = visualize(
            &t.model,
            &t.store,
            video,
            &cfg.val_protocol(),
            &tmp.path().join(dir),
        )
        .unwrap();
        (
            v.rows,
            v.columns,
            std::fs::read(&v.grid).unwrap(),
            v.rasters.len(),
        )
    };
    let a = render("a");
    assert_eq!((a.0, a.1, a.3), (3, 8, 3));
    assert_eq!(a, render("b"));
}
