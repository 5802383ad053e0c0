use std::collections::HashSet;

use protospoof::features::{FeatureSet, Sample};
use protospoof::loss::{LossConfig, LossKind, PrototypeSet, BONAFIDE, SPOOF};
use protospoof::manifest::Label;
use protospoof::net::{EmbeddingNet, NetConfig};
use protospoof::trainer::{
    nearest_prototype, nearest_prototype_accuracy, read_history, sample_episode, Episode, HistoryRecord, TrainConfig, TrainPreset, Trainer,
};
use protospoof_tensor::{grad_check_params, GradCheckOptions, Graph, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAMES: usize = 12;
const DIMS: usize = 6;

/// Class means at +0.6 / −0.6 with unit-scale noise: linearly separable
/// through the per-utterance mean.
fn toy_set(n_per_class: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (k, label) in [Label::Bonafide, Label::Spoof].into_iter().enumerate() {
        let mu = if k == 0 { 0.6 } else { -0.6 };
        for i in 0..n_per_class {
            let data = (0..FRAMES * DIMS).map(|_| mu + rng.random_range(-1.0..1.0)).collect();
            let attack = if k == 0 { "-" } else { "T01" };
            samples.push(Sample { utt: format!("{}{i:03}", label.as_str()), label, attack: attack.into(), data });
        }
    }
    FeatureSet::new(FRAMES, DIMS, samples).unwrap()
}

fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig { n_support: 4, n_query: 4, episodes_per_epoch: 10, epochs: 2, lr: 0.003, lr_decay_every: 1, seed, ..TrainConfig::default() }
}

#[test]
fn asvspoof2019_episode_has_80_distinct_items() {
    let by_class = [(0..300).collect::<Vec<_>>(), (300..1000).collect()];
    let cfg = TrainConfig::preset(TrainPreset::Asvspoof2019);
    let ep = sample_episode(&by_class, cfg.n_support, cfg.n_query, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(ep.len(), 80);
    let all: HashSet<usize> = ep.support.iter().chain(&ep.query).flatten().copied().collect();
    assert_eq!(all.len(), 80);
    for k in 0..2 {
        assert_eq!(ep.support[k].len() + ep.query[k].len(), 40);
        assert!(ep.support[k].iter().chain(&ep.query[k]).all(|i| by_class[k].contains(i)));
    }
}

#[test]
fn exact_size_class_is_exhausted() {
    let by_class = [(0..7).collect::<Vec<_>>(), (7..100).collect()];
    let ep = sample_episode(&by_class, 3, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut got: Vec<usize> = ep.support[0].iter().chain(&ep.query[0]).copied().collect();
    got.sort();
    assert_eq!(got, by_class[0]);
}

#[test]
fn supports_and_queries_never_overlap() {
    let by_class = [(0..50).collect::<Vec<_>>(), (50..95).collect()];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let ep = sample_episode(&by_class, 20, 20, &mut rng).unwrap();
        for k in 0..2 {
            let s: HashSet<_> = ep.support[k].iter().collect();
            assert_eq!(s.len(), 20);
            assert!(ep.query[k].iter().all(|q| !s.contains(q)));
            assert_eq!(ep.query[k].iter().collect::<HashSet<_>>().len(), 20);
        }
    }
}

#[test]
fn episodes_follow_the_seed() {
    let by_class = [(0..1000).collect::<Vec<_>>(), (1000..2000).collect()];
    let draw = |seed| sample_episode(&by_class, 20, 20, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::preset(TrainPreset::Asvspoof2019);
    assert_eq!(c.lr_at_epoch(1), 0.0003);
    assert_eq!(c.lr_at_epoch(10), 0.0003);
    assert_eq!(c.lr_at_epoch(11), 0.00015);
    assert_eq!(c.lr_at_epoch(21), 0.000075);
    let c = TrainConfig::preset(TrainPreset::Asvspoof2021);
    for k in 0..6 {
        assert_eq!(c.lr_at_epoch(1 + 15 * k), 0.0005 * 0.5f64.powi(k as i32));
    }
}

#[test]
fn frozen_network_repeats_the_episode_loss() {
    let data = toy_set(10, 1);
    let net = EmbeddingNet::new(NetConfig::default()).unwrap();
    let mut tr = Trainer::new(net, LossConfig::default(), TrainConfig { lr: 0.0, ..toy_train_config(0) }).unwrap();
    let ep = sample_episode(&data.by_class(), 3, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let a = tr.run_episode(&data, &ep).unwrap();
    let b = tr.run_episode(&data, &ep).unwrap();
    assert_eq!(a, b);
    assert!((a.loss_mean - a.loss / 6.0).abs() < 1e-15);
}

#[test]
fn toy_episodes_drive_the_loss_down() {
    let data = toy_set(30, 2);
    let mut net = EmbeddingNet::new(NetConfig { seed: 4, ..NetConfig::default() }).unwrap();
    // shrink the projection so every embedding starts near the symmetric point
    let id = net.store().id("embed.w").unwrap();
    net.store_mut().get_mut(id).value.data_mut().iter_mut().for_each(|w| *w *= 0.02);
    let mut tr = Trainer::new(net, LossConfig::default(), TrainConfig { lr: 0.003, ..toy_train_config(0) }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let by_class = data.by_class();
    let mut losses = Vec::new();
    for _ in 0..100 {
        let ep = sample_episode(&by_class, 5, 5, &mut rng).unwrap();
        losses.push(tr.run_episode(&data, &ep).unwrap().loss_mean);
    }
    let first = losses[0];
    let tail = losses[90..].iter().sum::<f64>() / 10.0;
    assert!((first - std::f64::consts::LN_2).abs() < 0.05, "initial {first}");
    assert!(tail < 0.1, "final {tail} (first {first})");
}

#[test]
fn per_query_stepping_takes_one_step_per_query() {
    let data = toy_set(10, 3);
    let net = EmbeddingNet::new(NetConfig::default()).unwrap();
    let cfg = TrainConfig { per_query_steps: true, ..toy_train_config(0) };
    let mut tr = Trainer::new(net, LossConfig::default(), cfg).unwrap();
    let ep = sample_episode(&data.by_class(), 2, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let before = tr.net().store().clone();
    let r = tr.run_episode(&data, &ep).unwrap();
    assert!(r.loss.is_finite());
    assert_ne!(tr.net().store().value(tr.net().store().id("embed.w").unwrap()), before.value(before.id("embed.w").unwrap()));
}

#[test]
fn full_network_episode_gradient_matches_finite_differences() {
    let data = toy_set(4, 4);
    let net = EmbeddingNet::new(NetConfig { seed: 2, ..NetConfig::default() }).unwrap();
    let ep = Episode { support: [vec![0, 1], vec![4, 5]], query: [vec![2, 3], vec![6, 7]] };
    let report = grad_check_params(
        net.store(),
        |g: &mut Graph, s| {
            Trainer::episode_graph(&net, s, g, &data, &ep).map(|(l, _)| l).map_err(|e| TensorError::Config(e.to_string()))
        },
        GradCheckOptions { h: 1e-5, max_coords: Some(6) },
    )
    .unwrap();
    assert!(report.coords_checked > 100);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn zero_epochs_return_the_initial_network() {
    let data = toy_set(10, 5);
    let net = EmbeddingNet::new(NetConfig::default()).unwrap();
    let init = net.store().clone();
    let dir = tempfile::tempdir().unwrap();
    let tr = Trainer::new(net, LossConfig::default(), TrainConfig { epochs: 0, ..toy_train_config(0) }).unwrap();
    let out = tr.train(&data, &data, Some(dir.path())).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.best_dev_accuracy, None);
    for (id, p) in init.iter() {
        assert_eq!(out.best.store().value(id), &p.value);
    }
    assert!(dir.path().join("init.ckpt").exists() && dir.path().join("best.ckpt").exists());
}

#[test]
fn training_logs_history_and_keeps_the_running_best() {
    let (train, dev) = (toy_set(12, 6), toy_set(8, 7));
    let dir = tempfile::tempdir().unwrap();
    let net = EmbeddingNet::new(NetConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 3, ..toy_train_config(1) };
    let out = Trainer::new(net, LossConfig::default(), cfg.clone()).unwrap().train(&train, &dev, Some(dir.path())).unwrap();
    let logged = read_history(&dir.path().join("history.jsonl")).unwrap();
    assert_eq!(logged, out.history);
    let episodes = logged.iter().filter(|r| matches!(r, HistoryRecord::Episode { .. })).count();
    assert_eq!(episodes, 30);
    let mut running = f64::NEG_INFINITY;
    for r in &logged {
        match r {
            HistoryRecord::Epoch { epoch, dev_accuracy, best_dev_accuracy, lr, .. } => {
                running = running.max(*dev_accuracy);
                assert_eq!(*best_dev_accuracy, running);
                assert_eq!(*lr, cfg.lr_at_epoch(*epoch));
            }
            HistoryRecord::Episode { epoch, lr, .. } => assert_eq!(*lr, cfg.lr_at_epoch(*epoch)),
        }
    }
    assert_eq!(out.best_dev_accuracy, Some(running));
    let (best, extra) = EmbeddingNet::load(dir.path().join("best.ckpt")).unwrap();
    assert_eq!(extra["epoch"], out.best_epoch);
    for (id, p) in out.best.store().iter() {
        assert_eq!(best.store().value(id), &p.value);
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (train, dev) = (toy_set(12, 8), toy_set(6, 9));
    let run = || {
        let net = EmbeddingNet::new(NetConfig { seed: 3, ..NetConfig::default() }).unwrap();
        Trainer::new(net, LossConfig::default(), toy_train_config(5)).unwrap().train(&train, &dev, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    for (id, p) in a.best.store().iter() {
        assert_eq!(b.best.store().value(id), &p.value);
    }
}

#[test]
fn non_episodic_losses_train_with_mini_batches() {
    let (train, dev) = (toy_set(12, 10), toy_set(6, 11));
    for kind in [LossKind::Softmax, LossKind::AmSoftmax, LossKind::OcSoftmax, LossKind::Contrastive] {
        let net = EmbeddingNet::new(NetConfig::default()).unwrap();
        let cfg = TrainConfig { batch_size: 8, epochs: 1, episodes_per_epoch: 4, ..toy_train_config(0) };
        let loss = LossConfig { kind, ..LossConfig::default() };
        let out = Trainer::new(net, loss, cfg).unwrap().train(&train, &dev, None).unwrap();
        assert_eq!(out.history.len(), 5, "{kind:?}");
        let heads = out.best.store().iter().filter(|(_, p)| p.name.starts_with("loss.")).count();
        assert_eq!(heads > 0, kind != LossKind::Contrastive, "{kind:?}");
    }
}

#[test]
fn missing_class_is_reported() {
    let mut data = toy_set(6, 12);
    data.samples.retain(|s| s.label == Label::Bonafide);
    let net = EmbeddingNet::new(NetConfig::default()).unwrap();
    let err = Trainer::new(net, LossConfig::default(), toy_train_config(0)).unwrap().train(&data, &data, None).unwrap_err();
    assert!(err.to_string().contains("spoof"), "{err}");
}

#[test]
fn nearest_prototype_classification_examples() {
    let protos = PrototypeSet { prototypes: vec![vec![1.0, 0.0], vec![-1.0, 0.0]] };
    let embs = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![1.0, 0.0]];
    assert_eq!(nearest_prototype_accuracy(&protos, &embs, &[BONAFIDE, SPOOF, BONAFIDE]), 1.0);
    // equidistant embeddings all go to bonafide
    let embs = vec![vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 0.0], vec![0.0, 5.0]];
    let labels = [SPOOF, BONAFIDE, SPOOF, SPOOF];
    assert_eq!(nearest_prototype_accuracy(&protos, &embs, &labels), 0.25);
}

#[test]
fn nearest_prototype_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let protos = PrototypeSet { prototypes: vec![v(8), v(8)] };
    let embs: Vec<Vec<f64>> = (0..50).map(|_| v(8)).collect();
    let labels: Vec<usize> = (0..50).map(|i| (i * 7 % 3 == 0) as usize).collect();
    let mut hits = 0;
    for (e, &l) in embs.iter().zip(&labels) {
        let d = |p: &Vec<f64>| e.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let pred = if d(&protos.prototypes[1]) < d(&protos.prototypes[0]) { 1 } else { 0 };
        assert_eq!(nearest_prototype(e, &protos), pred);
        hits += (pred == l) as usize;
    }
    assert_eq!(nearest_prototype_accuracy(&protos, &embs, &labels), hits as f64 / 50.0);
}
