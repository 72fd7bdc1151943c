use mcse_core::metrics::{evaluate, sdr, si_sdr, stoi, Passthrough};
use mcse_core::sim::{gen_source, generate_items, SimConfig, SourceKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn speech(seed: u64, secs: f64, fs: u32) -> Vec<f64> {
    gen_source(
        &SourceKind::HarmonicAm {
            f0: 140.0 + 10.0 * seed as f64,
        },
        secs,
        fs,
        seed,
    )
    .unwrap()
}

fn add_noise(x: &[f64], snr_db: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    let px: f64 = x.iter().map(|v| v * v).sum();
    let pn: f64 = n.iter().map(|v| v * v).sum();
    let g = (px / pn / 10f64.powf(snr_db / 10.0)).sqrt();
    x.iter().zip(&n).map(|(a, b)| a + g * b).collect()
}

// direct transcription of the definition with an explicit projection
fn si_sdr_oracle(r: &[f64], e: &[f64]) -> f64 {
    let rr: f64 = r.iter().map(|v| v * v).sum();
    let er: f64 = r.iter().zip(e).map(|(a, b)| a * b).sum();
    let target: Vec<f64> = r.iter().map(|v| v * er / rr).collect();
    let noise: Vec<f64> = e.iter().zip(&target).map(|(a, b)| a - b).collect();
    let pt: f64 = target.iter().map(|v| v * v).sum();
    let pn: f64 = noise.iter().map(|v| v * v).sum();
    10.0 * (pt / pn).log10()
}

#[test]
fn si_sdr_matches_projection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let r: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = r
            .iter()
            .map(|v| 0.7 * v + 0.3 * rng.gen_range(-1.0..1.0))
            .collect();
        assert!((si_sdr(&r, &e).unwrap() - si_sdr_oracle(&r, &e)).abs() < 1e-9);
    }
}

#[test]
fn stoi_of_identical_signals_is_one() {
    let x = speech(0, 3.0, 16000);
    assert!(stoi(&x, &x, 16000).unwrap() >= 0.99);
}

#[test]
fn stoi_monotone_in_snr() {
    for seed in 0..5 {
        let x = speech(seed, 3.0, 16000);
        let scores: Vec<f64> = [0.0, 5.0, 10.0, 20.0]
            .iter()
            .map(|&snr| stoi(&x, &add_noise(&x, snr, 100 + seed), 16000).unwrap())
            .collect();
        for w in scores.windows(2) {
            assert!(w[1] > w[0], "seed {seed}: {scores:?}");
        }
    }
}

#[test]
fn stoi_invariant_to_whole_hop_shifts() {
    let x = speech(3, 3.0, 10000);
    let y = add_noise(&x, 5.0, 7);
    let base = stoi(&x, &y, 10000).unwrap();
    for k in [1usize, 3, 10] {
        let mut xs = x.clone();
        let mut ys = y.clone();
        xs.rotate_right(k * 128);
        ys.rotate_right(k * 128);
        let shifted = stoi(&xs, &ys, 10000).unwrap();
        assert!(
            (shifted - base).abs() <= 0.01,
            "shift {k}: {base} vs {shifted}"
        );
    }
}

#[test]
fn passthrough_reproduces_noisy_scores() {
    let cfg = SimConfig {
        n_items: 4,
        duration: 1.0,
        ..Default::default()
    };
    let items = generate_items(&cfg).unwrap();
    let rep = evaluate(&Passthrough::default(), &items).unwrap();
    assert_eq!(rep.failures, 0);
    assert!((rep.enhanced.si_sdr_db - rep.noisy.si_sdr_db).abs() < 0.1);
    assert!((rep.enhanced.sdr_db - rep.noisy.sdr_db).abs() < 0.1);
    let json: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
    assert_eq!(json["items"].as_array().unwrap().len(), 4);
}

fn signal(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn si_sdr_scale_invariant(r in signal(64), e in signal(64), c in 0.01f64..100.0) {
        prop_assume!(r.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let a = si_sdr(&r, &e).unwrap();
        let scaled: Vec<f64> = e.iter().map(|v| c * v).collect();
        prop_assert!((a - si_sdr(&r, &scaled).unwrap()).abs() <= 1e-6);
    }

    #[test]
    fn sdr_equals_si_sdr_at_optimal_scale(r in signal(64), e in signal(64)) {
        let rr: f64 = r.iter().map(|v| v * v).sum();
        prop_assume!(rr > 1e-3);
        // est = alpha* r + noise with noise orthogonal to r, so alpha* is the projection scale
        let er: f64 = r.iter().zip(&e).map(|(a, b)| a * b).sum();
        let noise: Vec<f64> = e.iter().zip(&r).map(|(v, x)| v - er / rr * x).collect();
        let alpha = 1.3;
        let est: Vec<f64> = r.iter().zip(&noise).map(|(x, n)| alpha * x + n).collect();
        let ref_scaled: Vec<f64> = r.iter().map(|x| alpha * x).collect();
        let a = sdr(&ref_scaled, &est).unwrap();
        let b = si_sdr(&ref_scaled, &est).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn si_sdr_bounded(r in signal(32), e in signal(32)) {
        prop_assume!(r.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let v = si_sdr(&r, &e).unwrap();
        prop_assert!((-100.0..=100.0).contains(&v));
    }
}
