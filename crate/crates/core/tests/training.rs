use std::fs;

use mcse_core::autodiff::{Graph, ParamStore};
use mcse_core::dsp::{decompress_mag, istft, Spectrum, StftConfig};
use mcse_core::network::{Model, ModelConfig, OutputVars};
use mcse_core::sim::{generate_items, SimConfig};
use mcse_core::trainer::{
    load_checkpoint, load_checkpoint_with, phase_loss, save_checkpoint, total_loss, AdamW,
    LossTargets, LossWeights, TrainConfig, Trainer,
};
use mcse_core::verify::toy_model_config;
use mcse_core::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn tiny_stft() -> StftConfig {
    StftConfig {
        window_len: 16,
        hop: 4,
        fft_len: 16,
        ..Default::default()
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

// loops over [T, F] written out directly
fn phase_oracle(est: &Tensor<f64>, tgt: &Tensor<f64>) -> f64 {
    let (t, f) = (est.dim(0), est.dim(1));
    let d = |i: usize, j: usize| est.data()[i * f + j] - tgt.data()[i * f + j];
    let ip = mean(
        (0..t)
            .flat_map(|i| (0..f).map(move |j| (i, j)))
            .map(|(i, j)| 1.0 - d(i, j).cos()),
    );
    let gd = mean(
        (0..t)
            .flat_map(|i| (1..f).map(move |j| (i, j)))
            .map(|(i, j)| 1.0 - (d(i, j) - d(i, j - 1)).cos()),
    );
    let iaf = mean(
        (1..t)
            .flat_map(|i| (0..f).map(move |j| (i, j)))
            .map(|(i, j)| 1.0 - (d(i, j) - d(i - 1, j)).cos()),
    );
    (ip + gd + iaf) / 3.0
}

#[test]
fn phase_loss_matches_oracle_and_ignores_two_pi() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let est = rand_t(&[5, 7], -3.0, 3.0, &mut rng);
    let tgt = rand_t(&[5, 7], -3.0, 3.0, &mut rng);
    let eval = |e: &Tensor<f64>| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(e.clone()), g.constant(tgt.clone()));
        let l = phase_loss(&mut g, a, b).unwrap();
        g.value(l).item()
    };
    assert!((eval(&est) - phase_oracle(&est, &tgt)).abs() < 1e-12);
    let wrapped = est.map(|v| v + 2.0 * std::f64::consts::PI);
    assert!((eval(&wrapped) - eval(&est)).abs() < 1e-12);
    assert!(eval(&tgt).abs() < 1e-15);
}

#[test]
fn total_loss_components_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stft = tiny_stft();
    let (t, f, n) = (8, 9, 28);
    let ycm = rand_t(&[t, f], 0.1, 1.2, &mut rng);
    let ypha = rand_t(&[t, f], -3.0, 3.0, &mut rng);
    let targets = LossTargets {
        cmag: rand_t(&[t, f], 0.0, 1.2, &mut rng),
        pha: rand_t(&[t, f], -3.0, 3.0, &mut rng),
        wave: rand_t(&[n], -0.5, 0.5, &mut rng),
    };
    let w = LossWeights {
        mag: 0.9,
        phase: 0.4,
        complex: 0.25,
        time: 1.7,
    };
    let mut g = Graph::new();
    let out = OutputVars {
        y_cmag: g.constant(ycm.clone()),
        y_pha: g.constant(ypha.clone()),
        mask: g.constant(ycm.clone()),
    };
    let parts = total_loss(&mut g, &out, &targets, &w, &stft)
        .unwrap()
        .values(&g);

    let mag = mean(
        ycm.data()
            .iter()
            .zip(targets.cmag.data())
            .map(|(a, b)| (a - b).powi(2)),
    );
    let cplx = |m: &Tensor<f64>, p: &Tensor<f64>, k: usize| {
        let (mm, pp) = (m.data()[k], p.data()[k]);
        (mm * pp.cos(), mm * pp.sin())
    };
    let (mut re, mut im) = (0.0, 0.0);
    for k in 0..t * f {
        let (a, b) = cplx(&ycm, &ypha, k);
        let (c, d) = cplx(&targets.cmag, &targets.pha, k);
        re += (a - c).powi(2);
        im += (b - d).powi(2);
    }
    let complex = (re + im) / (t * f) as f64;
    let lin = decompress_mag(&ycm, stft.compression).unwrap();
    let wave = istft(&Spectrum::from_polar(&lin, &ypha).unwrap(), &stft, n).unwrap();
    let time = mean(
        wave.iter()
            .zip(targets.wave.data())
            .map(|(a, b)| (a - b).abs()),
    );
    let phase = phase_oracle(&ypha, &targets.pha);

    for (got, want) in [
        (parts.mag, mag),
        (parts.phase, phase),
        (parts.complex, complex),
        (parts.time, time),
    ] {
        assert!(
            (got - want).abs() <= 1e-10 * (1.0 + want.abs()),
            "{got} vs {want}"
        );
    }
    let total = w.mag * mag + w.phase * phase + w.complex * complex + w.time * time;
    assert!((parts.total - total).abs() < 1e-10);
}

#[test]
fn adamw_matches_scalar_reference() {
    let mut store = ParamStore::<f64>::new();
    let id = store
        .add("p", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap())
        .unwrap();
    let (b1, b2, eps, wd, lr) = (0.8, 0.99, 1e-8, 1e-2, 5e-3);
    let mut opt = AdamW::new(&store, (b1, b2), eps, wd);
    let mut p = [0.5f64, -1.0, 2.0];
    let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for step in 1..=25 {
        // gradient of sum(p^3) + a step-dependent tilt
        let grad: Vec<f64> = p.iter().map(|x| 3.0 * x * x + 0.1 * step as f64).collect();
        store.get_mut(id).grad = Tensor::new(vec![3], grad.clone()).unwrap();
        opt.step(&mut store, lr);
        for i in 0..3 {
            p[i] -= lr * wd * p[i];
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(step));
            let vh = v[i] / (1.0 - b2.powi(step));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for i in 0..3 {
            assert!(
                (store.get(id).value.data()[i] - p[i]).abs() < 1e-6,
                "step {step}"
            );
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::new(toy_model_config(2), 5).unwrap();
    save_checkpoint(&model, &path, Some(serde_json::json!({"note": "x"}))).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.cfg(), model.cfg());
    for (a, b) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let feats = rand_t(&[4, 8, 9], 0.0, 1.0, &mut rng).cast::<f32>();
    let xr = rand_t(&[8, 9], 0.0, 1.0, &mut rng).cast::<f32>();
    let (o1, o2) = (
        model.forward(&feats, &xr).unwrap(),
        back.forward(&feats, &xr).unwrap(),
    );
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&o1.y_cmag), bits(&o2.y_cmag));
    assert_eq!(bits(&o1.y_pha), bits(&o2.y_pha));
}

#[test]
fn mismatched_mic_count_names_the_input_projection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m4.ckpt");
    save_checkpoint(
        &Model::<f32>::new(ModelConfig::desk(4), 0).unwrap(),
        &path,
        None,
    )
    .unwrap();
    match load_checkpoint_with::<f32>(&path, &ModelConfig::desk(6)) {
        Err(Error::ParamShape {
            name,
            expected,
            found,
        }) => {
            assert_eq!(name, "encoder.g_cnn.weight");
            assert_eq!(expected[1], 12);
            assert_eq!(found[1], 8);
        }
        other => panic!("expected a shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(
        &Model::<f32>::new(toy_model_config(1), 0).unwrap(),
        &path,
        None,
    )
    .unwrap();
    let bytes = fs::read(&path).unwrap();

    let truncated = dir.path().join("t.ckpt");
    fs::write(&truncated, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&truncated),
        Err(Error::Checkpoint(_))
    ));

    let huge = dir.path().join("h.ckpt");
    let mut b = bytes.clone();
    b[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    fs::write(&huge, &b).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&huge),
        Err(Error::Checkpoint(_))
    ));

    let version = dir.path().join("v.ckpt");
    let key = b"\"format_version\":1";
    let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
    let mut b = bytes.clone();
    b[at + key.len() - 1] = b'9';
    fs::write(&version, &b).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&version),
        Err(Error::CheckpointVersion(9))
    ));

    assert!(load_checkpoint::<f32>(dir.path().join("missing.ckpt")).is_err());
}

fn tiny_items() -> Vec<mcse_core::sim::MixtureItem> {
    generate_items(&SimConfig {
        n_items: 3,
        duration: 0.1,
        seed: 8,
        ..Default::default()
    })
    .unwrap()
}

fn trained(seed: u64, dir: Option<&std::path::Path>) -> Trainer {
    let cfg = TrainConfig {
        seed,
        crop_seconds: Some(0.05),
        batch_size: 2,
        ..Default::default()
    };
    let mut tr = Trainer::new(Model::new(toy_model_config(2), 3).unwrap(), cfg).unwrap();
    if let Some(d) = dir {
        tr = tr.with_run_dir(d, None).unwrap();
    }
    let items = tiny_items();
    for e in 0..2 {
        tr.train_epoch(&items, &items[..1], e).unwrap();
    }
    tr
}

#[test]
fn epochs_are_deterministic_given_seed() {
    let (a, b) = (trained(1, None), trained(1, None));
    for (p, q) in a.model.params.iter().zip(b.model.params.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    let c = trained(2, None);
    assert!(a
        .model
        .params
        .iter()
        .zip(c.model.params.iter())
        .any(|(p, q)| p.value != q.value));
    assert_eq!(a.optimizer_steps(), 4);
}

#[test]
fn run_dir_gets_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let tr = trained(0, Some(dir.path()));
    let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "lr", "loss", "val_si_sdr", "wall_seconds"] {
        assert!(lines[1].get(key).is_some(), "{key}");
    }
    assert!(dir.path().join("best.ckpt").exists());
    let last = load_checkpoint::<f32>(dir.path().join("last.ckpt")).unwrap();
    for (p, q) in tr.model.params.iter().zip(last.params.iter()) {
        assert_eq!(p.value, q.value);
    }
}
