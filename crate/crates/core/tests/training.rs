use mixacm::acm::{ChannelTransform, DistillConfig};
use mixacm::attacks::clean_accuracy;
use mixacm::data::{synth_blobs, Dataset};
use mixacm::model::{BlockCnn, ModelSpec};
use mixacm::trainer::{Checkpoint, Mode, RunContext, TrainConfig, Trainer, METRICS_HEADER};

fn model(classes: usize, seed: u64) -> BlockCnn {
    BlockCnn::new(ModelSpec::from_channels(1, classes, &[4, 6], 1, true, false).unwrap(), seed).unwrap()
}

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, lr0: 0.05, seed, ..TrainConfig::default() }
}

fn teacher(data: &Dataset) -> BlockCnn {
    let spec = ModelSpec::from_channels(1, 3, &[6, 8], 1, true, false).unwrap();
    let mut t = Trainer::new(BlockCnn::new(spec, 9).unwrap(), cfg(2, 9), RunContext::new(data)).unwrap();
    t.fit(None).unwrap();
    t.into_model().into_frozen()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = synth_blobs(3, 8, 8, 0.1, 1).unwrap();
    let teacher = teacher(&data);
    let distill = DistillConfig { transform: ChannelTransform::Affine, ..DistillConfig::default() };
    let contexts = [
        (Mode::Natural, RunContext::new(&data)),
        (Mode::AdvTrain, RunContext::new(&data)),
        (Mode::MixAcm, RunContext { teacher: Some(&teacher), distill, ..RunContext::new(&data) }),
    ];
    for (mode, ctx) in contexts {
        let c = TrainConfig { mode, attack_ramp_epochs: 1, ..cfg(4, 3) };
        let mut straight = Trainer::new(model(3, 2), c.clone(), ctx.clone()).unwrap();
        let rows = straight.fit(None).unwrap();

        let mut first = Trainer::new(model(3, 2), c.clone(), ctx.clone()).unwrap();
        first.train_epoch().unwrap();
        first.train_epoch().unwrap();
        let bytes = first.checkpoint().to_bytes();
        let mut second = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), c, ctx).unwrap();
        let tail = second.fit(None).unwrap();

        assert_eq!(tail, rows[2..], "{mode:?}");
        assert_eq!(second.checkpoint(), straight.checkpoint(), "{mode:?}");
    }
}

#[test]
fn loss_decreases_over_ten_steps() {
    for seed in 0..5 {
        let data = synth_blobs(3, 6, 8, 0.05, seed).unwrap();
        let batch = data.batch(&(0..data.len()).collect::<Vec<_>>()).unwrap();
        let c = TrainConfig { batch_size: data.len(), momentum: 0.0, weight_decay: 0.0, lr0: 0.05, ..cfg(10, seed) };
        let mut t = Trainer::new(model(3, seed), c, RunContext::new(&data)).unwrap();
        let before = t.batch_loss(&batch).unwrap();
        for _ in 0..10 {
            t.train_step(&batch).unwrap();
        }
        let after = t.batch_loss(&batch).unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn two_blob_classes_are_fit_within_twenty_epochs() {
    let data = synth_blobs(2, 32, 8, 0.05, 4).unwrap();
    let mut t = Trainer::new(model(2, 4), TrainConfig { lr0: 0.1, ..cfg(20, 4) }, RunContext::new(&data)).unwrap();
    let rows = t.fit(None).unwrap();
    let accs: Vec<f64> = rows.iter().map(|r| r.clean_acc).collect();
    assert!(accs.contains(&1.0), "{accs:?}");
    assert_eq!(clean_accuracy(t.model(), &data).unwrap(), 1.0, "{accs:?}");
}

#[test]
fn fit_writes_one_metrics_row_per_epoch_and_checkpoints() {
    let data = synth_blobs(2, 4, 6, 0.1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(model(2, 0), cfg(3, 0), RunContext::new(&data)).unwrap();
    t.fit(Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.ends_with(",0")));
    let last = Checkpoint::load(&dir.path().join("checkpoints/last.ckpt")).unwrap();
    let fin = Checkpoint::load(&dir.path().join("checkpoints/final.ckpt")).unwrap();
    assert_eq!(last, fin);
    assert_eq!(fin.epoch, 3);
}

#[test]
fn resuming_from_disk_appends_to_metrics() {
    let data = synth_blobs(2, 4, 6, 0.1, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(model(2, 0), cfg(2, 0), RunContext::new(&data)).unwrap();
    t.fit(Some(dir.path())).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("checkpoints/last.ckpt")).unwrap();
    let mut t = Trainer::resume(ckpt, cfg(4, 0), RunContext::new(&data)).unwrap();
    t.fit(Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let epochs: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2", "3", "4"]);
}

#[test]
fn gradient_clipping_bounds_the_update() {
    let data = synth_blobs(2, 4, 6, 0.1, 0).unwrap();
    let batch = data.batch(&[0, 1, 2, 3]).unwrap();
    let c = TrainConfig { momentum: 0.0, weight_decay: 0.0, lr0: 1.0, grad_clip: Some(1e-3), ..cfg(1, 0) };
    let start = model(2, 0);
    let mut t = Trainer::new(start.clone(), c, RunContext::new(&data)).unwrap();
    t.train_step(&batch).unwrap();
    let moved: f64 = t
        .model()
        .params()
        .tensors()
        .iter()
        .zip(start.params().tensors())
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)))
        .sum::<f64>()
        .sqrt();
    // first cosine step uses the full learning rate
    assert!(moved <= 1e-3 * (1.0 + 1e-9), "{moved}");
}
