use std::f64::consts::PI;

use mcse_core::dsp::multichannel_features;
use mcse_core::network::{default_reference, param_count, Model, ModelConfig};
use mcse_core::sim::{generate_items, SimConfig};
use mcse_core::verify::toy_model_config;
use mcse_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn paper_scale_delta_per_mic_is_128() {
    let counts: Vec<usize> = (1..=6)
        .map(|m| param_count(&ModelConfig::paper(m)).unwrap().total)
        .collect();
    for w in counts.windows(2) {
        assert_eq!(w[1] - w[0], 128);
    }
}

#[test]
fn delta_per_mic_is_two_c_mid() {
    for c_mid in [4, 16, 32] {
        let cfg = |m| ModelConfig {
            c_mid,
            ..ModelConfig::desk(m)
        };
        let a = param_count(&cfg(2)).unwrap();
        let b = param_count(&cfg(3)).unwrap();
        assert_eq!(b.total - a.total, 2 * c_mid);
        // the difference lives entirely in the input projection
        for (k, v) in &a.modules {
            if k != "encoder.g_cnn" {
                assert_eq!(b.modules[k], *v, "{k}");
            }
        }
    }
}

#[test]
fn reference_mic_follows_the_subset() {
    assert_eq!(default_reference(1), 0);
    assert_eq!(default_reference(6), 4);
    for m in 1..=6 {
        let sub = mcse_core::sim::standard_subset(m).unwrap();
        assert_eq!(sub[default_reference(m)], 4);
    }
}

#[test]
fn output_contracts_hold_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (t, f) = (8, 9);
    for trial in 0..100 {
        let m = 1 + trial % 3;
        let model = Model::<f64>::new(toy_model_config(m), trial as u64).unwrap();
        let feats: Vec<f64> = (0..2 * m * t * f)
            .map(|i| {
                let v: f64 = rng.gen_range(-3.0..3.0);
                if (i / (t * f)) % 2 == 0 {
                    v.abs()
                } else {
                    v
                }
            })
            .collect();
        let feats = Tensor::new(vec![2 * m, t, f], feats).unwrap();
        let mut cmag: Vec<f64> = (0..t * f).map(|_| rng.gen_range(0.0..2.0)).collect();
        cmag[..5].iter_mut().for_each(|v| *v = 0.0);
        let x_ref = Tensor::new(vec![t, f], cmag).unwrap();
        let out = model.forward(&feats, &x_ref).unwrap();
        assert!(out.mask.data().iter().all(|&v| v > 0.0 && v < 2.0));
        assert!(out.y_pha.data().iter().all(|&p| p > -PI && p <= PI));
        for ((y, mk), x) in out
            .y_cmag
            .data()
            .iter()
            .zip(out.mask.data())
            .zip(x_ref.data())
        {
            assert_eq!(*y, mk * x);
        }
    }
}

#[test]
fn enhance_preserves_length_and_checks_channels() {
    let items = generate_items(&SimConfig {
        n_items: 1,
        duration: 0.3,
        ..Default::default()
    })
    .unwrap();
    let item = items[0].for_mics(2).unwrap();
    let model = Model::<f32>::new(ModelConfig::desk(2), 0).unwrap();
    let y = model.enhance(&item.noisy).unwrap();
    assert_eq!(y.len(), item.len());
    assert!(y.iter().all(|v| v.is_finite()));
    assert!(model.enhance(&items[0].noisy).is_err());

    let (feats, pairs) = multichannel_features(&item.noisy, &model.cfg().stft).unwrap();
    assert_eq!(feats.dim(0), 4);
    assert_eq!(pairs.len(), 2);
}
