mod common;

use common::oracles::{eer_sweep, min_tdcf_reference};
use protospoof::features::{FeatureSet, Sample};
use protospoof::manifest::Label;
use protospoof::net::{EmbeddingNet, NetConfig};
use protospoof::scoring::{
    align, build_prototype_bank, cm_score, eer, export_embeddings, min_tdcf, parse_scores, read_scores, train_fusion, write_scores,
    AsvErrors, Distance, FusionOptions, PrototypeBank, TdcfParams,
};
use protospoof::trainer::embed_all;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

fn random_sets(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nb = rng.random_range(1..=25);
    let ns = rng.random_range(1..=25);
    // coarse grid so ties are common
    let grid = rng.random_bool(0.5);
    let mut draw = |shift: f64| {
        let v: f64 = rng.random_range(-3.0..3.0) + shift;
        if grid {
            (v * 2.0).round() / 2.0
        } else {
            v
        }
    };
    let b: Vec<f64> = (0..nb).map(|_| draw(1.0)).collect();
    let s: Vec<f64> = (0..ns).map(|_| draw(0.0)).collect();
    (b, s)
}

#[test]
fn eer_examples() {
    assert_eq!(eer(&[5.0, 4.0, 3.5], &[1.0, 0.0, 3.4]).unwrap().eer, 0.0);
    let same = [0.3, -1.0, 2.0, 2.0];
    assert_eq!(eer(&same, &same).unwrap().eer, 0.5);
    let r = eer(&[3.0, 2.0, 0.0], &[2.5, 1.0, -1.0]).unwrap();
    assert_eq!(r.eer, 1.0 / 3.0);
    assert_eq!(r.eer, eer_sweep(&[3.0, 2.0, 0.0], &[2.5, 1.0, -1.0]));
    assert!(eer(&[], &[1.0]).is_err() && eer(&[1.0], &[]).is_err());
}

#[test]
fn eer_matches_the_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let (b, s) = random_sets(&mut rng);
        let got = eer(&b, &s).unwrap().eer;
        let want = eer_sweep(&b, &s);
        assert!((got - want).abs() < 1e-12, "{b:?} {s:?}: {got} vs {want}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn eer_threshold_splits_the_classes_at_the_crossing() {
    let b = [3.0, 2.0, 0.0];
    let s = [2.5, 1.0, -1.0];
    let r = eer(&b, &s).unwrap();
    assert_eq!(r.threshold, 2.0);
}

const COSTS: [f64; 7] = [0.9405, 0.0095, 0.05, 1.0, 10.0, 1.0, 10.0];

fn params(asv: AsvErrors) -> TdcfParams {
    TdcfParams { asv: Some(asv), ..TdcfParams::default() }
}

#[test]
fn tdcf_hand_evaluated_six_trials() {
    // perfect ASV: C1 = 0.9405, C2 = 0.5, so the normalized cost is
    // 1.881·P_miss + P_fa; the best threshold (1) gives 0 + 2/3
    let asv = AsvErrors { p_miss: 0.0, p_fa: 0.0, p_miss_spoof: 0.0 };
    let r = min_tdcf(&[4.0, 1.0, 3.0], &[2.0, 0.0, 3.5], &asv, &params(asv)).unwrap();
    assert!((r.min_tdcf - 2.0 / 3.0).abs() < 1e-15, "{r:?}");
    assert_eq!(r.threshold, 1.0);
}

#[test]
fn perfect_cm_reaches_zero_cost() {
    for asv in [AsvErrors { p_miss: 0.0, p_fa: 0.0, p_miss_spoof: 0.0 }, AsvErrors { p_miss: 0.05, p_fa: 0.02, p_miss_spoof: 0.3 }] {
        let r = min_tdcf(&[2.0, 3.0, 4.0], &[-1.0, 0.0, 1.0], &asv, &params(asv)).unwrap();
        assert_eq!(r.min_tdcf, 0.0);
    }
}

#[test]
fn tdcf_parameter_validation() {
    let asv = AsvErrors { p_miss: 0.0, p_fa: 0.0, p_miss_spoof: 0.0 };
    let bad_sum = TdcfParams { p_target: 0.5, ..params(asv) };
    assert!(min_tdcf(&[1.0], &[0.0], &asv, &bad_sum).is_err());
    let no_spoof = TdcfParams { p_target: 0.95, p_nontarget: 0.05, p_spoof: 0.0, ..params(asv) };
    let err = min_tdcf(&[1.0], &[0.0], &asv, &no_spoof).unwrap_err().to_string();
    assert!(err.contains("spoof prior"), "{err}");
    let neg_cost = TdcfParams { c_fa_cm: 0.0, ..params(asv) };
    assert!(min_tdcf(&[1.0], &[0.0], &asv, &neg_cost).is_err());
    assert!(min_tdcf(&[], &[0.0], &asv, &params(asv)).is_err());
}

fn crafted_asv(rng: &mut ChaCha8Rng) -> AsvErrors {
    AsvErrors { p_miss: rng.random_range(0.0..0.1), p_fa: rng.random_range(0.0..0.1), p_miss_spoof: rng.random_range(0.0..0.6) }
}

#[test]
fn tdcf_matches_the_reference_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (b, s) = random_sets(&mut rng);
        let asv = crafted_asv(&mut rng);
        let got = min_tdcf(&b, &s, &asv, &params(asv)).unwrap().min_tdcf;
        let want = min_tdcf_reference(&b, &s, (asv.p_miss, asv.p_fa, asv.p_miss_spoof), COSTS);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn tdcf_is_invariant_under_increasing_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (b, s) = random_sets(&mut rng);
        let asv = crafted_asv(&mut rng);
        let base = min_tdcf(&b, &s, &asv, &params(asv)).unwrap().min_tdcf;
        let maps: [fn(f64) -> f64; 3] = [|x| x.exp(), |x| 3.0 * x + 1.0, |x| x.powi(3)];
        for f in maps {
            let (fb, fs): (Vec<f64>, Vec<f64>) = (b.iter().map(|&x| f(x)).collect(), s.iter().map(|&x| f(x)).collect());
            let v = min_tdcf(&fb, &fs, &asv, &params(asv)).unwrap().min_tdcf;
            assert!((v - base).abs() < 1e-12);
        }
    }
}

#[test]
fn asv_rates_at_the_asv_eer_threshold() {
    let asv = AsvErrors::from_scores(&[3.0, 4.0, 5.0, 2.5], &[0.0, 1.0, 2.0, -1.0], &[2.5, 0.5, 4.5]).unwrap();
    assert_eq!((asv.p_miss, asv.p_fa), (0.0, 0.0));
    assert!((asv.p_miss_spoof - 1.0 / 3.0).abs() < 1e-15);
    assert!(AsvErrors::from_scores(&[1.0], &[0.0], &[]).is_err());
}

#[test]
fn score_conventions_agree_on_the_nearer_prototype() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let bank = PrototypeBank { bonafide: v(5), spoof: v(5), checkpoint_id: "c".into(), train_hash: "h".into() };
    let d = Distance::Squared.eval(&bank.bonafide, &bank.spoof);
    assert_eq!(cm_score(&bank.bonafide, &bank, Distance::Squared).unwrap(), d);
    assert!(d > 0.0);
    for _ in 0..500 {
        let e = v(5);
        let sq = cm_score(&e, &bank, Distance::Squared).unwrap();
        let un = cm_score(&e, &bank, Distance::Unsquared).unwrap();
        assert_eq!(sq > 0.0, un > 0.0);
    }
    assert!(cm_score(&[1.0], &bank, Distance::Squared).is_err());
}

fn tiny_set(n: usize, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
            let attack = if label == Label::Bonafide { "-" } else { "A01" };
            let data = (0..10 * 4).map(|_| rng.random_range(-1.0..1.0) + i as f64 * 0.01).collect();
            Sample { utt: format!("u{i:02}"), label, attack: attack.into(), data }
        })
        .collect();
    FeatureSet::new(10, 4, samples).unwrap()
}

#[test]
fn bank_examples() {
    let net = EmbeddingNet::new(NetConfig::default()).unwrap();
    let two = tiny_set(2, 1);
    let embs = embed_all(&net, &two).unwrap();
    let bank = build_prototype_bank(&net, &two, "ck").unwrap();
    assert_eq!(bank.bonafide, embs[0]);
    assert_eq!(bank.spoof, embs[1]);
    assert_eq!(bank.train_hash, two.fingerprint());

    let set = tiny_set(8, 2);
    let mut doubled = set.clone();
    doubled.samples.extend(set.samples.iter().cloned().map(|mut s| {
        s.utt.push_str("_dup");
        s
    }));
    let a = build_prototype_bank(&net, &set, "ck").unwrap();
    let b = build_prototype_bank(&net, &doubled, "ck").unwrap();
    for (x, y) in a.bonafide.iter().chain(&a.spoof).zip(b.bonafide.iter().chain(&b.spoof)) {
        assert!((x - y).abs() < 1e-12);
    }

    let mut one_class = set.clone();
    one_class.samples.retain(|s| s.label == Label::Spoof);
    assert!(build_prototype_bank(&net, &one_class, "ck").is_err());
}

#[test]
fn bank_equals_the_mean_of_exported_embeddings() {
    let net = EmbeddingNet::new(NetConfig { seed: 6, ..NetConfig::default() }).unwrap();
    let set = tiny_set(9, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.tsv");
    assert_eq!(export_embeddings(&net, &set, &path).unwrap(), 9);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut sums = [vec![0.0; 128], vec![0.0; 128]];
    let mut counts = [0.0; 2];
    for line in text.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3 + 128);
        let k = if cols[1] == "bonafide" { 0 } else { 1 };
        counts[k] += 1.0;
        for (s, v) in sums[k].iter_mut().zip(&cols[3..]) {
            *s += v.parse::<f64>().unwrap();
        }
    }
    let bank = build_prototype_bank(&net, &set, "ck").unwrap();
    for d in 0..128 {
        assert!((sums[0][d] / counts[0] - bank.bonafide[d]).abs() < 1e-6);
        assert!((sums[1][d] / counts[1] - bank.spoof[d]).abs() < 1e-6);
    }
}

#[test]
fn export_is_exact_and_repeatable() {
    let net = EmbeddingNet::new(NetConfig::default()).unwrap();
    let set = tiny_set(5, 4);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    export_embeddings(&net, &set, &a).unwrap();
    export_embeddings(&net, &set, &b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 5);
    let direct = net.embed_batch(10, 4, &[set.samples[3].data.as_slice()]).unwrap();
    let row: Vec<f64> = text.lines().nth(3).unwrap().split('\t').skip(3).map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, direct[0]);
    assert!(text.lines().nth(3).unwrap().starts_with("u03\tspoof\tA01\t"));
}

#[test]
fn bank_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bank = PrototypeBank { bonafide: vec![0.1, 1.0 / 3.0], spoof: vec![-2.5e-7, 7.0], checkpoint_id: "x".into(), train_hash: "y".into() };
    let p = dir.path().join("bank.json");
    bank.save(&p).unwrap();
    assert_eq!(PrototypeBank::load(&p).unwrap(), bank);
}

#[test]
fn score_files_round_trip_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.txt");
    let scores = vec![("a".to_string(), 0.1 + 0.2), ("b".to_string(), -1e-300), ("c".to_string(), 12345.678)];
    write_scores(&p, &scores).unwrap();
    assert_eq!(read_scores(&p).unwrap(), scores);
    let src = Path::new("x");
    assert!(parse_scores("a\t1\na\t2\n", src).is_err());
    assert!(parse_scores("a\tNaN\n", src).is_err());
    assert!(parse_scores("a 1 2\n", src).is_err());
    let err = parse_scores("a\t1\nb\tfoo\n", src).unwrap_err().to_string();
    assert!(err.contains(":2"), "{err}");
}

#[test]
fn align_lists_missing_ids() {
    let a = vec![("u1".to_string(), 1.0), ("u2".to_string(), 2.0)];
    let b = vec![("u2".to_string(), 5.0), ("u1".to_string(), 4.0)];
    let (ids, cols) = align(&[a.clone(), b]).unwrap();
    assert_eq!(ids, ["u1", "u2"]);
    assert_eq!(cols[1], [4.0, 5.0]);
    let c = vec![("u1".to_string(), 4.0), ("u9".to_string(), 4.0)];
    let err = align(&[a, c]).unwrap_err().to_string();
    assert!(err.contains("u2") && err.contains("u9"), "{err}");
}

fn labelled_scores(n: usize, seed: u64, sep: f64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let s = labels.iter().map(|&l| if l == 0 { sep } else { 0.0 } + noise.sample(&mut rng)).collect();
    (s, labels)
}

fn split(s: &[f64], labels: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let b = s.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(v, _)| *v).collect();
    let p = s.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(v, _)| *v).collect();
    (b, p)
}

#[test]
fn self_fusion_preserves_eer() {
    let (s, labels) = labelled_scores(400, 5, 1.5);
    let fit = train_fusion(&[s.clone(), s.clone()], &labels, &FusionOptions::default()).unwrap();
    assert!(fit.grad_norm < 1e-8, "{fit:?}");
    let fused = fit.apply(&[s.clone(), s.clone()]).unwrap();
    let (b0, p0) = split(&s, &labels);
    let (b1, p1) = split(&fused, &labels);
    assert_eq!(eer(&b0, &p0).unwrap().eer, eer(&b1, &p1).unwrap().eer);
}

#[test]
fn fusing_a_perfect_system_with_noise_stays_perfect() {
    let (noise, labels) = labelled_scores(300, 6, 0.0);
    let perfect: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| if l == 0 { 1.0 + (i % 7) as f64 * 0.1 } else { -1.0 - (i % 5) as f64 * 0.1 }).collect();
    let fit = train_fusion(&[perfect.clone(), noise.clone()], &labels, &FusionOptions::default()).unwrap();
    let fused = fit.apply(&[perfect.clone(), noise]).unwrap();
    let (b, p) = split(&fused, &labels);
    let (pb, pp) = split(&perfect, &labels);
    assert!(eer(&b, &p).unwrap().eer <= eer(&pb, &pp).unwrap().eer + 1e-9);
}

#[test]
fn fusion_recovers_generating_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let (w, off) = ([1.5, -0.8], 0.3);
    let n = 10_000;
    let (mut x1, mut x2, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let (a, b): (f64, f64) = (noise.sample(&mut rng), noise.sample(&mut rng));
        let p_bona = 1.0 / (1.0 + (-(w[0] * a + w[1] * b + off)).exp());
        labels.push(if rng.random_bool(p_bona) { 0 } else { 1 });
        x1.push(a);
        x2.push(b);
    }
    let fit = train_fusion(&[x1, x2], &labels, &FusionOptions { prior: None, ..FusionOptions::default() }).unwrap();
    for k in 0..2 {
        assert!(((fit.weights[k] - w[k]) / w[k]).abs() < 0.05, "{fit:?}");
    }
    assert!((fit.offset - off).abs() < 0.1, "{fit:?}");
}

#[test]
fn fusion_input_validation() {
    assert!(train_fusion(&[vec![1.0, 2.0]], &[0, 0], &FusionOptions::default()).is_err());
    assert!(train_fusion(&[vec![1.0]], &[0, 1], &FusionOptions::default()).is_err());
    let bad = FusionOptions { prior: Some(1.0), ..FusionOptions::default() };
    assert!(train_fusion(&[vec![1.0, 0.0]], &[0, 1], &bad).is_err());
}

proptest! {
    #[test]
    fn eer_survives_increasing_affine_maps(b in prop::collection::vec(-10.0f64..10.0, 1..20), s in prop::collection::vec(-10.0f64..10.0, 1..20), a in 0.1f64..5.0, c in -5.0f64..5.0) {
        let map = |v: &[f64]| v.iter().map(|x| a * x + c).collect::<Vec<_>>();
        let (mb, ms) = (map(&b), map(&s));
        let e = eer(&mb, &ms).unwrap().eer;
        prop_assert!((e - eer_sweep(&mb, &ms)).abs() < 1e-12);
        let mut all: Vec<f64> = b.iter().chain(&s).copied().collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        // rounding can merge near ties; elsewhere the ranking, hence the EER, is unchanged
        if all.windows(2).all(|w| w[0] == w[1] || w[1] - w[0] > 1e-9) {
            prop_assert!((e - eer(&b, &s).unwrap().eer).abs() < 1e-12);
        }
    }
}
