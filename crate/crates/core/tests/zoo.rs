//! Zoo construction, training and checkpoint behaviour.

mod support;

use xpose::attack::{craft, AttackConfig, Variant};
use xpose::bench::success_rate;
use xpose::data::{generate, Split, SyntheticConfig};
use xpose::tensor::{logits, LayerKind};
use xpose::zoo::{build, load, save, train, AdvTrain, Arch, Checkpoint, CheckpointError, InputSpec, ModelGraph, TrainConfig, ZooError};

fn small_split(train: usize, test: usize, seed: u64) -> Split {
    generate(&SyntheticConfig {
        train,
        test,
        size: 16,
        classes: 10,
        seed,
    })
    .unwrap()
}

fn spec16() -> InputSpec {
    InputSpec::new(16, 16, 3, 10)
}

fn cfg(epochs: usize, lr: f32, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: lr,
        momentum: 0.9,
        seed,
        adv_train: None,
    }
}

fn trainable(m: &ModelGraph) -> Vec<(String, Vec<f32>)> {
    m.params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.values.to_vec()))
        .collect()
}

#[test]
fn zeroed_residual_branch_reduces_to_the_trunk() {
    let mut net = build(Arch::Resnet, "resnet", spec16(), 3).unwrap();
    net.visit_params_mut(|name, values, _| {
        if name.starts_with("res1.conv_b.") {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let trunk_layers: Vec<_> = net
        .layers()
        .iter()
        .filter(|l| !matches!(l.kind, LayerKind::Residual(_)))
        .cloned()
        .collect();
    assert_eq!(trunk_layers.len() + 1, net.layers().len());
    let trunk = ModelGraph::new("trunk", spec16(), trunk_layers).unwrap();
    let mut r = support::rng(4);
    let x = support::uniform_tensor(spec16().batch_shape(6), 0.0, 1.0, &mut r);
    assert_eq!(logits(&net, &x).unwrap(), logits(&trunk, &x).unwrap());

    // and the branch does matter once it is live again
    let live = build(Arch::Resnet, "resnet", spec16(), 3).unwrap();
    assert_ne!(logits(&live, &x).unwrap(), logits(&trunk, &x).unwrap());
}

#[test]
fn same_seed_gives_identical_checkpoint_bytes() {
    let data = small_split(96, 32, 1);
    let run = || {
        let m = build(Arch::Wide, "wide", spec16(), 11).unwrap();
        let (m, _) = train(m, &data.train, &data.test, &cfg(2, 0.05, 5)).unwrap();
        Checkpoint::new(m, Some("wide".into()), 11, &data.train.id).to_bytes()
    };
    let a = run();
    assert_eq!(a, run());
    let m = build(Arch::Wide, "wide", spec16(), 11).unwrap();
    let (m, _) = train(m, &data.train, &data.test, &cfg(2, 0.05, 6)).unwrap();
    assert_ne!(a, Checkpoint::new(m, Some("wide".into()), 11, &data.train.id).to_bytes());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let data = small_split(64, 16, 2);
    for arch in Arch::ALL {
        let m = build(arch, arch.as_str(), spec16(), 7).unwrap();
        let before = trainable(&m);
        let (after, _) = train(m, &data.train, &data.test, &cfg(2, 0.0, 1)).unwrap();
        assert_eq!(trainable(&after), before, "{arch}");
    }
}

#[test]
fn divergence_names_epoch_and_batch() {
    let data = small_split(64, 16, 3);
    let m = build(Arch::Plain, "plain", spec16(), 1).unwrap();
    match train(m, &data.train, &data.test, &cfg(3, 1e30, 1)) {
        Err(ZooError::Divergence { epoch, batch }) => assert!(epoch < 3 && batch < 2),
        other => panic!("expected divergence, got {:?}", other.map(|(_, m)| m)),
    }
}

#[test]
fn checkpoint_file_round_trip_keeps_logits_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = support::rng(9);
    let x = support::uniform_tensor(spec16().batch_shape(8), 0.0, 1.0, &mut r);
    for (i, arch) in Arch::ALL.into_iter().enumerate() {
        let m = build(arch, arch.as_str(), spec16(), 40 + i as u64).unwrap();
        let path = dir.path().join(format!("{arch}.ckpt"));
        save(&Checkpoint::new(m.clone(), Some(arch.to_string()), 40, "unit"), &path).unwrap();
        let back = load(&path).unwrap();
        let a: Vec<u32> = logits(&m, &x).unwrap().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = logits(&back.model, &x).unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{arch}");
        assert_eq!(back.meta.arch.as_deref(), Some(arch.as_str()));
    }
}

#[test]
fn damaged_checkpoint_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = build(Arch::Vgg, "vgg", spec16(), 2).unwrap();
    let bytes = Checkpoint::new(m.clone(), None, 2, "unit").to_bytes();
    let last = m.params().last().unwrap().name.clone();

    let short = dir.path().join("short.ckpt");
    std::fs::write(&short, &bytes[..bytes.len() - 4]).unwrap();
    match load(&short) {
        Err(CheckpointError::Truncated { param, .. }) => assert_eq!(param, last),
        other => panic!("{other:?}"),
    }

    let magic = dir.path().join("magic.ckpt");
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    std::fs::write(&magic, &bad).unwrap();
    assert!(matches!(load(&magic), Err(CheckpointError::BadMagic { .. })));

    assert!(matches!(load(&dir.path().join("absent.ckpt")), Err(CheckpointError::Io { .. })));
}

#[test]
fn adversarial_training_lowers_white_box_success() {
    let data = small_split(640, 200, 21);
    let plain = |adv_train| {
        let m = build(Arch::Plain, "plain", spec16(), 17).unwrap();
        let c = TrainConfig {
            adv_train,
            ..cfg(4, 0.05, 3)
        };
        train(m, &data.train, &data.test, &c).unwrap().0
    };
    let eps = 8.0 / 255.0;
    let undefended = plain(None);
    let defended = plain(Some(AdvTrain { epsilon: eps, steps: 3 }));
    let attack = AttackConfig::new(eps, Variant::Ifgsm);
    let rate = |m: &ModelGraph| {
        let adv = craft(m, &data.test.images, &data.test.labels, &attack).unwrap();
        success_rate(m, &adv, &data.test.labels).unwrap()
    };
    let (u, d) = (rate(&undefended), rate(&defended));
    eprintln!("white-box I-FGSM success: plain {u:.1}%, adversarially trained {d:.1}%");
    assert!(d < u, "defended {d} vs plain {u}");
}
