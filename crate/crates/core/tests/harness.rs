use plab::arrow::{Arrow, ArrowConfig, Warmup};
use plab::harness::{
    compare, make_stream, run, run_seed, ExperimentConfig, Optimizer, OptimizerConfig, RunRecord, StreamConfig, Trainer,
};
use plab::metrics::aat;
use plab::model::{MiniVitConfig, Model, ModelConfig};
use plab::Error;

fn tiny() -> ExperimentConfig {
    let stream = StreamConfig {
        total_classes: 6,
        tasks: 3,
        classes_per_task: 2,
        train_per_class: 12,
        eval_per_class: 20,
        image_side: 8,
        ..StreamConfig::default()
    };
    ExperimentConfig {
        name: "tiny".into(),
        model: ModelConfig::Vit(MiniVitConfig {
            image_side: 8,
            patch_side: 4,
            embed_dim: 8,
            heads: 2,
            blocks: 2,
            ffn_hidden: 16,
            tasks: 3,
            classes_per_task: 2,
        }),
        stream,
        optimizer: OptimizerConfig::Sgd { eta: 0.05 },
        epochs_per_task: 2,
        batch_size: 8,
        seeds: vec![0, 1],
        probe_size: 32,
        ..ExperimentConfig::default()
    }
}

fn tiny_arrow() -> ExperimentConfig {
    ExperimentConfig {
        optimizer: OptimizerConfig::Arrow(ArrowConfig {
            window: 3,
            eta: 0.01,
            warmup: Warmup::RmsLike,
            ..ArrowConfig::default()
        }),
        ..tiny()
    }
}

#[test]
fn report_json_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tiny_arrow();
    run(&c, Some(a.path())).unwrap();
    run(&c, Some(b.path())).unwrap();
    for f in ["seed0/report.json", "seed0/metrics.csv", "seed1/report.json", "record.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn report_aat_matches_logged_accuracies() {
    let r = run_seed(&tiny(), 3).unwrap();
    let rep = &r.record.report;
    assert_eq!(rep.tasks.len(), 3);
    assert_eq!(rep.aat, aat(&rep.accuracies()).unwrap());
    let logged: Vec<f64> = rep
        .metric_rows()
        .iter()
        .filter(|m| m.metric == "accuracy")
        .map(|m| m.value)
        .collect();
    assert_eq!(aat(&logged).unwrap(), rep.aat);
}

#[test]
fn probe_cadence_does_not_change_training() {
    let every = run_seed(&tiny_arrow(), 0).unwrap();
    let sparse = run_seed(
        &ExperimentConfig {
            metric_cadence: 5,
            ..tiny_arrow()
        },
        0,
    )
    .unwrap();
    assert_eq!(every.model.params(), sparse.model.params());
    let probed: Vec<bool> = sparse.record.report.tasks.iter().map(|t| t.probed).collect();
    assert_eq!(probed, vec![true, false, true]);
    assert!(every.record.report.tasks.iter().all(|t| t.probed));
}

#[test]
fn upper_bound_resets_optimizer_state_each_task() {
    let c = ExperimentConfig {
        reinit_each_task: true,
        ..tiny_arrow()
    };
    let mut t = Trainer::new(&c, 0).unwrap();
    for task in 0..3 {
        t.begin_task(task).unwrap();
        assert_eq!(t.optimizer.window_fill(), Some(0), "task {task}");
        t.run_task(task).unwrap();
        assert_eq!(t.optimizer.window_fill(), Some(3));
    }
    // Without the upper bound the window persists across the boundary.
    let mut t = Trainer::new(&tiny_arrow(), 0).unwrap();
    t.run_task(0).unwrap();
    t.begin_task(1).unwrap();
    assert_eq!(t.optimizer.window_fill(), Some(3));
}

#[test]
fn frozen_block_is_never_updated() {
    let c = ExperimentConfig {
        frozen_blocks: vec![0],
        ..tiny()
    };
    let r = run_seed(&c, 0).unwrap();
    let mut fresh = Model::build(&c.model, plab::harness::derive_seed(0, "model", 0)).unwrap();
    fresh.freeze_blocks(&[0]).unwrap();
    for (a, b) in r.model.params().iter().zip(fresh.params().iter()) {
        if a.name.starts_with("block0.") || a.name.starts_with("embed.") {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{} moved", a.name);
        }
    }
    assert_ne!(
        r.model.params().get("block1.ffn.fc1").unwrap().tensor,
        fresh.params().get("block1.ffn.fc1").unwrap().tensor
    );
}

#[test]
fn evaluation_only_uses_its_own_head() {
    let mut t = Trainer::new(&tiny(), 0).unwrap();
    t.run_task(0).unwrap();
    let before = t.evaluate(0).unwrap();
    // Scrambling another task's head cannot change task 0's accuracy.
    for v in t.model.params_mut().get_mut("head.task2").unwrap().tensor.data_mut() {
        *v = 1e3;
    }
    assert_eq!(t.evaluate(0).unwrap(), before);
}

#[test]
fn divergence_aborts_only_that_seed() {
    let c = ExperimentConfig {
        optimizer: OptimizerConfig::Sgd { eta: 1e200 },
        seeds: vec![0],
        ..tiny()
    };
    let rec = run(&c, None).unwrap();
    let d = rec.seeds[0].divergence.as_ref().expect("diverges");
    assert_eq!(d.task, 1);
    assert!(rec.mean_aat.is_nan());

    let fine = run(&tiny(), None).unwrap();
    assert!(fine.seeds.iter().all(|s| s.completed()));
}

#[test]
fn cbp_and_mlp_runs_complete() {
    let c = ExperimentConfig {
        optimizer: OptimizerConfig::Cbp {
            eta: 0.05,
            cbp: plab::cbp::CbpConfig {
                maturity_threshold: 2,
                replacement_rate: 0.05,
                ..Default::default()
            },
        },
        seeds: vec![0],
        ..tiny()
    };
    let r = run_seed(&c, 0).unwrap();
    let total: u64 = r.record.report.tasks.iter().map(|t| t.cbp_replacements).sum();
    assert!(total > 0);
    assert!(r.record.report.metric_rows().iter().any(|m| m.metric == "cbp_replacement"));

    let ModelConfig::Vit(v) = tiny().model else { unreachable!() };
    let c = ExperimentConfig {
        model: ModelConfig::MlpMatched(v),
        seeds: vec![0],
        ..tiny()
    };
    let r = run_seed(&c, 0).unwrap();
    assert_eq!(r.record.report.tasks.len(), 3);
    assert!(r.record.report.tasks[0].features.contains_key("layer1.fc"));
}

#[test]
fn compare_sorts_and_rejects_mismatched_streams() {
    let sgd = run(&tiny(), None).unwrap();
    let arrow = run(&tiny_arrow(), None).unwrap();
    let rows = compare(&[sgd.clone(), arrow.clone()]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].mean_aat >= rows[1].mean_aat);
    let one = compare(std::slice::from_ref(&sgd)).unwrap();
    assert_eq!(one[0].mean_aat, sgd.mean_aat);
    let twin = compare(&[sgd.clone(), sgd.clone()]).unwrap();
    assert_eq!(twin[0], twin[1]);

    let mut other = sgd.clone();
    other.stream.seed = 99;
    assert!(matches!(compare(&[sgd, other]), Err(Error::Config(_))));
}

#[test]
fn model_and_optimizer_checkpoints_round_trip() {
    let c = ExperimentConfig {
        save_checkpoints: true,
        seeds: vec![0],
        ..tiny_arrow()
    };
    let dir = tempfile::tempdir().unwrap();
    run(&c, Some(dir.path())).unwrap();
    let direct = run_seed(&c, 0).unwrap();
    let model = Model::load(&dir.path().join("seed0/model.json")).unwrap();
    assert_eq!(model.params(), direct.model.params());
    let opt = Arrow::load(&dir.path().join("seed0/optimizer.json"), model.params()).unwrap();
    let Optimizer::Arrow(expected) = &direct.optimizer else { unreachable!() };
    assert_eq!(&opt, expected);
    let rec = RunRecord::load(&dir.path().join("record.json")).unwrap();
    assert_eq!(rec.seeds[0], direct.record);
}

#[test]
fn stream_depends_on_run_seed_but_not_on_cadence() {
    let s = tiny().stream;
    assert_eq!(make_stream(&s).unwrap(), make_stream(&s).unwrap());
    let a = Trainer::new(&tiny(), 0).unwrap();
    let b = Trainer::new(&tiny(), 1).unwrap();
    assert_ne!(a.stream.tasks[0].train_x, b.stream.tasks[0].train_x);
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let c = ExperimentConfig::load(&path).unwrap();
        c.validate().unwrap();
        n += 1;
    }
    assert_eq!(n, 6);
    let sgd = ExperimentConfig::load(&dir.join("desk_sgd.json")).unwrap();
    assert_eq!(sgd, ExperimentConfig::default());
    let grid = ExperimentConfig::load(&dir.join("arrow_grid.json")).unwrap();
    assert_eq!(grid.grid_points().len(), 36);
}
