use mcse_core::sim::{
    gen_source, generate_dataset, load_split, simulate_array, ArrayGeometry, NoiseKind, NoiseSpec,
    SimConfig, SourceKind, Split, SPEED_OF_SOUND,
};

fn geometry(mics: Vec<[f64; 3]>, reference_index: usize) -> ArrayGeometry {
    ArrayGeometry {
        id: "test".into(),
        mic_positions: mics,
        reference_index,
        note: None,
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn reference_snr_is_calibrated() {
    let src = gen_source(&SourceKind::HarmonicAm { f0: 180.0 }, 1.0, 16000, 2).unwrap();
    let geom = ArrayGeometry::rect6();
    for kind in [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble] {
        for snr in [-5.0, 0.0, 5.0, 10.0, 20.0] {
            let spec = NoiseSpec {
                kind,
                snr_db: Some(snr),
            };
            let item = simulate_array(&src, &geom, [0.3, 0.8, 0.4], &spec, 16000, 11).unwrap();
            let noise: Vec<f64> = item
                .noisy_ref()
                .iter()
                .zip(&item.clean_ref)
                .map(|(a, b)| a - b)
                .collect();
            let measured = 10.0 * (energy(&item.clean_ref) / energy(&noise)).log10();
            assert!(
                (measured - snr).abs() <= 0.1,
                "{kind:?} @ {snr} dB measured {measured}"
            );
        }
    }
}

fn xcorr_peak(a: &[f64], b: &[f64], max_lag: usize) -> isize {
    let mut best = (f64::NEG_INFINITY, 0isize);
    for lag in -(max_lag as isize)..=max_lag as isize {
        let mut s = 0.0;
        for i in 0..a.len() {
            let j = i as isize + lag;
            if j >= 0 && (j as usize) < b.len() {
                s += a[i] * b[j as usize];
            }
        }
        if s > best.0 {
            best = (s, lag);
        }
    }
    best.1
}

#[test]
fn inter_mic_delay_matches_geometry() {
    let fs = 16000;
    let src = gen_source(&SourceKind::FilteredNoiseBurst, 0.5, fs, 5).unwrap();
    let geom = geometry(vec![[0.0, 0.0, 0.0], [0.4, 0.0, 0.0]], 0);
    let pos = [-1.0, 0.3, 0.0];
    let none = NoiseSpec {
        kind: NoiseKind::White,
        snr_db: None,
    };
    let item = simulate_array(&src, &geom, pos, &none, fs, 0).unwrap();
    let d0 = (1.0f64 + 0.09).sqrt();
    let d1 = (1.4f64 * 1.4 + 0.09).sqrt();
    let expected = ((d1 - d0) / SPEED_OF_SOUND * fs as f64).round() as isize;
    assert_eq!(xcorr_peak(&item.noisy[0], &item.noisy[1], 40), expected);
}

#[test]
fn equidistant_mics_receive_identical_signals() {
    let src = gen_source(&SourceKind::HarmonicAm { f0: 120.0 }, 0.5, 16000, 1).unwrap();
    let geom = geometry(vec![[-0.1, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.3, 0.0]], 0);
    let none = NoiseSpec {
        kind: NoiseKind::White,
        snr_db: None,
    };
    let item = simulate_array(&src, &geom, [0.0, -0.5, 0.7], &none, 16000, 0).unwrap();
    let dev = item.noisy[0]
        .iter()
        .zip(&item.noisy[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(dev <= 1e-4, "{dev}");
    assert!(item.noisy[0] != item.noisy[2]);
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        n_items: 10,
        duration: 0.3,
        seed: 4,
        ..Default::default()
    };
    let manifest = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.items.len(), 10);
    let test = load_split(dir.path(), Split::Test).unwrap();
    assert_eq!(test.len(), manifest.ids(Split::Test).len());
    let fresh = mcse_core::sim::generate_item(&cfg, test[0].id[5..].parse().unwrap()).unwrap();
    assert_eq!(fresh.id, test[0].id);
    for (a, b) in fresh.noisy.iter().zip(&test[0].noisy) {
        // float32 storage
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
