use gvs_core::data::make_phantom;
use gvs_core::networks::checkpoint::Checkpoint;
use gvs_core::trainer::{checkpoint_path, continue_training, train_gvs};
use gvs_core::*;

fn tiny(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 5,
        generator: GeneratorSpec {
            base_channels: 4,
            downsamplings: 1,
            residual_blocks: 1,
            ..GeneratorSpec::default()
        },
        segmentor: SegmentorSpec {
            depth: 1,
            base_channels: 4,
            convs_per_level: 1,
            ..SegmentorSpec::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn resume_matches_uninterrupted_training() {
    let data = make_phantom(21, (32, 32), 8, 0.5).unwrap();
    let straight = train_gvs(&data, tiny(10), None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = GvsTrainer::new(tiny(10)).unwrap();
    for _ in 0..5 {
        first.train_epoch(&data).unwrap();
    }
    let path = checkpoint_path(dir.path(), 5);
    first.to_checkpoint().unwrap().save(&path).unwrap();
    drop(first);

    let ckpt = Checkpoint::load(&path).unwrap();
    let resumed = GvsTrainer::from_checkpoint(tiny(10), &ckpt).unwrap();
    let resumed = continue_training(resumed, &data, None).map_err(|(e, _)| e).unwrap();
    assert_eq!(resumed.state.epoch, 10);
    assert!(resumed.state.g.equals(&straight.state.g.snapshot()));
    assert!(resumed.state.s.equals(&straight.state.s.snapshot()));
    assert_eq!(resumed.state.history, straight.state.history);
}

#[test]
fn step_a_drives_weighted_loss_down() {
    let data = make_phantom(22, (32, 32), 8, 0.5).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let mut t = GvsTrainer::new(tiny(1)).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| t.step_a(&batch).unwrap()).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 5, "{rises} non-monotone steps: {losses:?}");
    assert!(losses[49] < losses[0]);
}

#[test]
fn loss_csv_has_one_row_per_batch() {
    let data = make_phantom(23, (32, 32), 6, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train_gvs(&data, tiny(2), Some(dir.path())).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,L_seg,L_s2,L_R,L_G");
    assert_eq!(lines.count(), 4);
    assert!(checkpoint_path(dir.path(), 1).exists());
    assert!(checkpoint_path(dir.path(), 2).exists());
}
