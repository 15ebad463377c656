use std::collections::BTreeMap;

use saccade::autodiff::Tensor;
use saccade::data::{Dataset, DatasetConfig, Split};
use saccade::network::{ModelParams, NetworkConfig};
use saccade::trainer::{
    adam_step, checkpoint_bytes, load_checkpoint, parse_checkpoint, resume, save_checkpoint, train, AdamHyper,
    AdamState, Checkpoint, TrainConfig,
};
use saccade::Error;

fn one_param(values: &[f64]) -> ModelParams {
    let mut p = ModelParams::new();
    p.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    p
}

fn grads(values: &[f64]) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::new(vec![values.len()], values.to_vec()).unwrap())])
}

fn small_set(n: usize) -> Dataset {
    let cfg = DatasetConfig {
        num_images: n,
        val_images: 0,
        ..DatasetConfig::default()
    };
    Dataset::generate(&cfg, Split::Train).unwrap()
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = one_param(&[0.3, -1.2, 4.0]);
    let before = p.clone();
    let mut st = AdamState::new(&p);
    for _ in 0..5 {
        adam_step(&mut p, &grads(&[0.0; 3]), &mut st, 1e-2, &AdamHyper::default()).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.step, 5);
}

#[test]
fn adam_first_step_and_lr_scaling() {
    let h = AdamHyper::default();
    let step = |lr: f64, g: f64| {
        let mut p = one_param(&[0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads(&[g]), &mut st, lr, &h).unwrap();
        p.get("w").unwrap().data()[0]
    };
    let d = step(1e-3, 1.0);
    assert!((d + 1e-3 / (1.0 + h.epsilon)).abs() < 1e-18, "{d}");
    // the first step has magnitude lr regardless of the gradient scale
    assert!((step(1e-3, 37.0) - d).abs() < 1e-10);
    assert!((step(1e-3, -0.2) + d).abs() < 1e-10);
    assert!((step(2e-3, 1.0) - 2.0 * d).abs() < 1e-15);
}

#[test]
fn adam_constant_gradient_approaches_lr() {
    let lr = 1e-3;
    let mut p = one_param(&[0.0, 0.0]);
    let mut st = AdamState::new(&p);
    let g = grads(&[0.5, -3.0]);
    let mut prev = [0.0, 0.0];
    for _ in 0..1000 {
        adam_step(&mut p, &g, &mut st, lr, &AdamHyper::default()).unwrap();
        let now = p.get("w").unwrap().data();
        let upd = [now[0] - prev[0], now[1] - prev[1]];
        prev = [now[0], now[1]];
        if st.step == 1000 {
            assert!((upd[0].abs() - lr).abs() / lr < 0.01, "{upd:?}");
            assert!((upd[1].abs() - lr).abs() / lr < 0.01, "{upd:?}");
            assert!(upd[0] < 0.0 && upd[1] > 0.0);
        }
    }
}

#[test]
fn adam_missing_gradient_names_parameter() {
    let mut p = one_param(&[1.0]);
    p.insert("bias", Tensor::zeros(&[2]));
    let mut st = AdamState::new(&p);
    let err = adam_step(&mut p, &grads(&[1.0]), &mut st, 1e-3, &AdamHyper::default()).unwrap_err();
    assert!(matches!(&err, Error::MissingGradient(n) if n == "bias"), "{err}");
    assert!(err.to_string().contains("bias"));
    assert_eq!(st.step, 0);
}

#[test]
fn learning_rate_drops_once() {
    let cfg = TrainConfig {
        epochs: 3,
        lr_drop_epoch: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..3).map(|e| cfg.lr_at_epoch(e)).collect();
    assert_eq!(lrs[0], 1.25e-4);
    assert_eq!(lrs[1], 1.25e-4);
    assert!((lrs[2] - 1.25e-5).abs() < 1e-20);

    let out = train(&small_set(4), None, &NetworkConfig::default(), &cfg).unwrap();
    let logged: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
    assert_eq!(logged, lrs);
}

#[test]
fn invalid_config_names_field() {
    let cfg = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    let err = train(&small_set(2), None, &NetworkConfig::default(), &cfg).unwrap_err();
    assert!(matches!(&err, Error::Config { field, .. } if field == "batch_size"), "{err}");
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 2,
        lr_drop_epoch: 1,
        ..TrainConfig::desk_profile()
    };
    let data = small_set(8);
    let a = train(&data, None, &NetworkConfig::default(), &cfg).unwrap();
    let b = train(&data, None, &NetworkConfig::default(), &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.log.len(), 2);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = TrainConfig {
        epochs: 3,
        lr_drop_epoch: 2,
        batch_size: 4,
        ..TrainConfig::desk_profile()
    };
    let data = small_set(8);
    let net = NetworkConfig::default();
    let full = train(&data, None, &net, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let first = resume(Checkpoint::fresh(&net, &cfg).unwrap(), &data, None, 1, &mut ()).unwrap();
    save_checkpoint(&first.checkpoint, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, first.checkpoint);
    let rest = resume(loaded, &data, None, 3, &mut ()).unwrap();

    let joined: Vec<_> = first.log.iter().chain(&rest.log).cloned().collect();
    assert_eq!(joined, full.log);
    assert_eq!(rest.checkpoint, full.checkpoint);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = TrainConfig {
        epochs: 1,
        lr_drop_epoch: 1,
        ..TrainConfig::desk_profile()
    };
    let out = train(&small_set(4), None, &NetworkConfig::default(), &cfg).unwrap();
    let ck = out.checkpoint;
    let bytes = checkpoint_bytes(&ck).unwrap();
    let path = std::path::Path::new("x.ckpt");
    let back = parse_checkpoint(&bytes, path).unwrap();
    for (name, t) in ck.params.iter() {
        let u = back.params.get(name).unwrap();
        let same = t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{name}");
    }
    assert_eq!(back, ck);
    assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);

    let mut bad = bytes.clone();
    let last = bad.len() - 3;
    bad[last] ^= 0x40;
    let err = parse_checkpoint(&bad, path).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    let err = parse_checkpoint(&bytes[..bytes.len() / 2], path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
    let err = parse_checkpoint(b"not a checkpoint", path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
}

/// Four images, full batch, no augmentation: the model must memorise them.
#[test]
fn overfits_four_images() {
    let mut cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 300,
        lr_drop_epoch: 200,
        batch_size: 4,
        ..TrainConfig::default()
    };
    cfg.augment.enabled = false;
    let out = train(&small_set(4), None, &NetworkConfig::default(), &cfg).unwrap();
    let losses = &out.checkpoint.loss_history;
    assert_eq!(losses.len(), 300);
    let first = losses[0];
    let last = losses[299];
    println!("overfit: initial {first:.4}, final {last:.4} ({:.2}%)", 100.0 * last / first);
    assert!(last < 0.05 * first);

    // no divergence after the warm-up: nothing climbs back above epoch 10
    let rises = (11..300).filter(|&e| losses[e] > losses[e - 1]).count();
    println!("overfit: {rises} epoch-to-epoch rises after epoch 10");
    assert!(losses[11..].iter().all(|&l| l < losses[10]));
    let tail: f64 = losses[290..].iter().sum::<f64>() / 10.0;
    let mid: f64 = losses[100..110].iter().sum::<f64>() / 10.0;
    assert!(tail < mid);
}
