use std::f64::consts::PI;

use proptest::prelude::*;
use protospoof_dsp::cache::{read_record, write_record};
use protospoof_dsp::frontend::filter_center_hz;
use protospoof_dsp::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
    let n = (secs * 16_000.0) as usize;
    Waveform::new((0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()).collect(), 16_000).unwrap()
}

fn noise(n: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).unwrap()
}

fn lfbe_cfg() -> FrontendConfig {
    FrontendConfig { feature_kind: FeatureKind::Lfbe, ..FrontendConfig::default() }
}

#[test]
fn one_second_gives_99_by_60() {
    let m = lfcc(&noise(16_000, 1), &FrontendConfig::default()).unwrap();
    assert_eq!((m.n_frames, m.n_dims), (99, 60));
    assert!(m.is_finite());
}

#[test]
fn silence_sits_on_the_floor() {
    let z = Waveform::new(vec![0.0; 8000], 16_000).unwrap();
    let cfg = lfbe_cfg();
    let fb = lfbe(&z, &cfg).unwrap();
    let floor = 1e-10f64.ln();
    assert!(fb.data.iter().take(fb.n_frames * fb.n_dims).enumerate().all(|(i, &v)| {
        if i % fb.n_dims < 20 { v == floor } else { v == 0.0 }
    }));

    let m = lfcc(&z, &FrontendConfig::default()).unwrap();
    for t in 1..m.n_frames {
        assert_eq!(&m.row(t)[..20], &m.row(0)[..20]);
        assert!(m.row(t)[20..].iter().all(|&v| v == 0.0));
    }
    // c0 of a constant log spectrum under the orthonormal DCT
    assert!((m.row(0)[0] - floor * 20f64.sqrt()).abs() < 1e-9);
}

/// Independent filterbank energy: naive DFT and triangle weights written out.
fn oracle_energy(frame: &[f64], m: usize, n_filters: usize, max_hz: f64) -> f64 {
    let nfft = 512;
    let width = max_hz / (n_filters + 1) as f64;
    let centre = (m + 1) as f64 * width;
    (0..=nfft / 2)
        .map(|k| {
            let f = k as f64 * 16_000.0 / nfft as f64;
            let w = (1.0 - (f - centre).abs() / width).max(0.0);
            if w == 0.0 {
                return 0.0;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in frame.iter().enumerate() {
                let ph = -2.0 * PI * (k * n) as f64 / nfft as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            w * (re * re + im * im)
        })
        .sum()
}

#[test]
fn tone_at_filter_centre_peaks_in_that_filter() {
    let cfg = lfbe_cfg();
    let fe = Frontend::new(cfg.clone()).unwrap();
    for m in 0..cfg.n_filters {
        let f = filter_center_hz(&cfg, m);
        let w = tone(f, 0.1, 0.5);
        let energies = fe.filterbank_energies(&w).unwrap();
        let e = &energies[3];
        let best = (0..e.len()).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
        assert_eq!(best, m, "tone at {f} Hz");

        let hamming: Vec<f64> = (0..320).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / 319.0).cos()).collect();
        let frame: Vec<f64> = (0..320).map(|n| w.samples[3 * 160 + n] * hamming[n]).collect();
        let oracle = oracle_energy(&frame, m, cfg.n_filters, cfg.max_freq_hz);
        assert!((oracle - e[m]).abs() <= 1e-9 * oracle, "filter {m}: {oracle} vs {}", e[m]);
    }
}

#[test]
fn white_noise_lfbe_varies_in_every_column() {
    let cfg = lfbe_cfg();
    let m = lfbe(&noise(16_000, 9), &cfg).unwrap();
    assert_eq!(m.n_dims, cfg.n_filters * 3);
    for d in 0..m.n_dims {
        let col = m.column(d);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(var > 0.0, "column {d}");
    }
    let statics = lfbe(&noise(4000, 9), &FrontendConfig { delta_orders: 0, ..lfbe_cfg() }).unwrap();
    assert_eq!(statics.n_dims, 20);
}

#[test]
fn four_khz_bank_is_zero_above_four_khz() {
    let cfg = FrontendConfig { max_freq_hz: 4000.0, ..FrontendConfig::default() };
    let fe = Frontend::new(cfg).unwrap();
    for row in fe.filterbank() {
        for (k, w) in row.iter().enumerate() {
            if k as f64 * 16_000.0 / 512.0 >= 4000.0 {
                assert_eq!(*w, 0.0);
            }
        }
    }
    // a 6 kHz tone only reaches the 4 kHz bank through window sidelobes
    let e = fe.filterbank_energies(&tone(6000.0, 0.1, 0.5)).unwrap();
    let in_band = Frontend::new(FrontendConfig::default()).unwrap().filterbank_energies(&tone(6000.0, 0.1, 0.5)).unwrap();
    let top = |v: &Vec<f64>| v.iter().copied().fold(0.0, f64::max);
    assert!(top(&e[2]) < 1e-3 * top(&in_band[2]));
}

#[test]
fn delta_examples() {
    let (t, d) = (12, 2);
    let constant = vec![3.5; t * d];
    assert!(deltas(&constant, t, d, 2).iter().all(|&v| v == 0.0));

    let ramp: Vec<f64> = (0..t).flat_map(|r| [0.7 * r as f64, -2.0 * r as f64]).collect();
    let dr = deltas(&ramp, t, d, 2);
    for r in 2..t - 2 {
        assert!((dr[r * d] - 0.7).abs() < 1e-12);
        assert!((dr[r * d + 1] + 2.0).abs() < 1e-12);
    }
    let ddr = deltas(&dr, t, d, 2);
    for r in 4..t - 4 {
        assert!(ddr[r * d].abs() < 1e-12 && ddr[r * d + 1].abs() < 1e-12);
    }
}

fn indexed(t: usize) -> FeatureMatrix {
    FeatureMatrix::new(t, 2, (0..t).flat_map(|r| [r as f64, -(r as f64)]).collect(), FeatureKind::Lfcc, 1).unwrap()
}

#[test]
fn fix_length_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let same = indexed(750);
    assert_eq!(fix_length(&same, 750, &mut rng).unwrap(), same);

    let short = fix_length(&indexed(300), 750, &mut rng).unwrap();
    assert_eq!(short.n_frames, 750);
    assert_eq!(short.row(300), indexed(300).row(0));
    assert_eq!(short.row(600), indexed(300).row(0));
    assert_eq!(short.row(749)[0], 149.0);

    let long = indexed(1000);
    let mut seen = vec![false; 251];
    for seed in 0..20_000 {
        let out = fix_length(&long, 750, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let o = out.row(0)[0] as usize;
        assert!(o <= 250);
        for r in 0..750 {
            assert_eq!(out.row(r)[0], (o + r) as f64);
        }
        seen[o] = true;
    }
    assert!(seen.iter().all(|&s| s), "some offsets never drawn");

    let empty = FeatureMatrix::new(0, 2, vec![], FeatureKind::Lfcc, 1).unwrap();
    assert!(matches!(fix_length(&empty, 750, &mut rng), Err(DspError::EmptyFeatures)));
}

#[test]
fn features_are_deterministic() {
    let w = noise(9000, 4);
    let cfg = FrontendConfig::default();
    assert_eq!(lfcc(&w, &cfg).unwrap(), lfcc(&w, &cfg).unwrap());
}

#[test]
fn cache_record_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = lfcc(&noise(5000, 2), &FrontendConfig::default()).unwrap();
    let p = dir.path().join("x.feat");
    write_record(&p, &m).unwrap();
    let back = read_record(&p).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.config_hash, FrontendConfig::default().hash());
}

#[test]
fn wrong_kind_or_rate_is_rejected() {
    let w = noise(4000, 1);
    assert!(lfcc(&w, &lfbe_cfg()).is_err());
    assert!(lfbe(&w, &FrontendConfig::default()).is_err());
    let w8 = Waveform::new(vec![0.0; 4000], 8000).unwrap();
    assert!(lfcc(&w8, &FrontendConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fix_length_always_750(t in 1usize..1600, seed in any::<u64>()) {
        let m = FeatureMatrix::new(t, 3, vec![0.5; t * 3], FeatureKind::Lfcc, 0).unwrap();
        let out = fix_length(&m, FIXED_FRAMES, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.n_frames, 750);
        prop_assert_eq!(out.data.len(), 750 * 3);
    }

    #[test]
    fn gain_moves_only_c0(c in 0.05f64..20.0, seed in 0u64..1000) {
        let w = noise(4000, seed);
        let scaled = Waveform::new(w.samples.iter().map(|v| v * c).collect(), 16_000).unwrap();
        let shift = (c * c).ln();

        let cfg = lfbe_cfg();
        let (a, b) = (lfbe(&w, &cfg).unwrap(), lfbe(&scaled, &cfg).unwrap());
        for t in 0..a.n_frames {
            for d in 0..20 {
                prop_assert!((b.row(t)[d] - a.row(t)[d] - shift).abs() < 1e-8);
            }
        }

        let cfg = FrontendConfig::default();
        let (a, b) = (lfcc(&w, &cfg).unwrap(), lfcc(&scaled, &cfg).unwrap());
        for t in 0..a.n_frames {
            prop_assert!((b.row(t)[0] - a.row(t)[0] - shift * 20f64.sqrt()).abs() < 1e-8);
            for d in 1..20 {
                prop_assert!((b.row(t)[d] - a.row(t)[d]).abs() < 1e-8);
            }
        }
    }
}
