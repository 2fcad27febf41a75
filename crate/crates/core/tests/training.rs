use oct_adapt::checkpoint::Checkpoint;
use oct_adapt::data::{
    generate_phantom, Domain, DomainDataset, PhantomConfig, PhantomStyle, Split,
};
use oct_adapt::networks::{DiscriminatorConfig, GeneratorConfig};
use oct_adapt::segmenter::{MiniUNet, MiniUNetConfig};
use oct_adapt::trainer::{fit, fit_from, read_loss_log, TrainConfig, TrainState};

fn datasets() -> (DomainDataset, DomainDataset) {
    let mk = |style, seed| {
        generate_phantom(&PhantomConfig {
            seed,
            n_volumes: 2,
            bscans_per_volume: 3,
            height: 32,
            width: 32,
            style,
            ..PhantomConfig::default()
        })
        .unwrap()
    };
    (
        DomainDataset::new(Domain::A, Split::Train, mk(PhantomStyle::ASpeckled, 1)).unwrap(),
        DomainDataset::new(Domain::B, Split::Train, mk(PhantomStyle::BFlattened, 2)).unwrap(),
    )
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        steps_per_epoch: 3,
        checkpoint_every: 1,
        replay_capacity: 4,
        seed: 9,
        generator: GeneratorConfig {
            base_channels: 4,
            n_residual_blocks: 1,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig {
            base_channels: 4,
            n_levels: 2,
            ..DiscriminatorConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn segmenter() -> MiniUNet {
    MiniUNet::new(
        MiniUNetConfig {
            base_channels: 4,
            ..MiniUNetConfig::default()
        },
        5,
    )
    .unwrap()
    .freeze()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (a, b) = datasets();
    let s = segmenter();
    let straight = fit(&config(3), &a, &b, &s, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = fit(&config(3), &a, &b, &s, Some(dir.path())).unwrap();
    assert_eq!(first.log, straight.log);
    // Restart from the epoch-1 checkpoint and finish the run.
    let ckpt = Checkpoint::load(dir.path().join("checkpoint_e0001.ckpt")).unwrap();
    let state = TrainState::from_checkpoint(&ckpt).unwrap();
    assert_eq!(state.epoch, 1);
    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = fit_from(state, &a, &b, &s, Some(resumed_dir.path())).unwrap();
    let tail: Vec<_> = straight
        .log
        .iter()
        .filter(|r| r.epoch >= 1)
        .cloned()
        .collect();
    assert_eq!(resumed.log, tail);
    assert_eq!(
        resumed.state.to_checkpoint().to_bytes(),
        straight.state.to_checkpoint().to_bytes()
    );
    assert_eq!(
        read_loss_log(resumed_dir.path().join("loss_log.jsonl")).unwrap(),
        tail
    );
}

#[test]
fn different_seeds_give_different_runs() {
    let (a, b) = datasets();
    let s = segmenter();
    let one = fit(&config(1), &a, &b, &s, None).unwrap();
    let other = fit(
        &TrainConfig {
            seed: 10,
            ..config(1)
        },
        &a,
        &b,
        &s,
        None,
    )
    .unwrap();
    assert_ne!(one.log, other.log);
    assert!(one.log.iter().all(|r| r.losses.all_finite()));
}
