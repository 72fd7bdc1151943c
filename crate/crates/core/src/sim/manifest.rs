//! Dataset generation, on-disk item layout and split manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    gen_source, simulate_array, ArrayGeometry, ItemMeta, MixtureItem, NoiseKind, NoiseSpec,
    SourceKind,
};
use crate::dsp::wav::{read_wav, write_wav, WavFormat, Waveform};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFamily {
    HarmonicAm,
    FilteredNoiseBurst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_items: usize,
    pub duration: f64,
    pub sample_rate: u32,
    pub geometry: ArrayGeometry,
    pub snr_grid: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    pub source_families: Vec<SourceFamily>,
    /// When non-empty, sources are drawn from these files instead.
    pub wav_sources: Vec<PathBuf>,
    pub f0_range: (f64, f64),
    /// Horizontal distance from the array centroid, meters.
    pub distance_range: (f64, f64),
    /// Height above the array plane, meters.
    pub height_range: (f64, f64),
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_items: 40,
            duration: 2.0,
            sample_rate: 16000,
            geometry: ArrayGeometry::rect6(),
            snr_grid: vec![0.0, 5.0, 10.0],
            noise_kinds: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble],
            source_families: vec![SourceFamily::HarmonicAm, SourceFamily::FilteredNoiseBurst],
            wav_sources: Vec::new(),
            f0_range: (100.0, 250.0),
            distance_range: (0.5, 1.5),
            height_range: (0.2, 0.5),
            split_fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.snr_grid.is_empty() || self.noise_kinds.is_empty() {
            return Err(Error::Config(
                "snr_grid and noise_kinds must be non-empty".into(),
            ));
        }
        if self.source_families.is_empty() && self.wav_sources.is_empty() {
            return Err(Error::Config(
                "no source families or wav sources configured".into(),
            ));
        }
        check_fractions(&self.split_fractions)
    }
}

fn check_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "split fractions {f:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

fn derive_seed(base: u64, i: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = base
        ^ i.wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `i`-th item of the dataset described by `cfg`.
pub fn generate_item(cfg: &SimConfig, i: usize) -> Result<MixtureItem> {
    let seed = derive_seed(cfg.seed, i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = if cfg.wav_sources.is_empty() {
        match cfg.source_families[rng.gen_range(0..cfg.source_families.len())] {
            SourceFamily::HarmonicAm => SourceKind::HarmonicAm {
                f0: rng.gen_range(cfg.f0_range.0..cfg.f0_range.1),
            },
            SourceFamily::FilteredNoiseBurst => SourceKind::FilteredNoiseBurst,
        }
    } else {
        SourceKind::WavFile {
            path: cfg.wav_sources[rng.gen_range(0..cfg.wav_sources.len())].clone(),
        }
    };
    let src = gen_source(&kind, cfg.duration, cfg.sample_rate, rng.gen())?;
    let c = cfg.geometry.centroid();
    let r = rng.gen_range(cfg.distance_range.0..cfg.distance_range.1);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let h = rng.gen_range(cfg.height_range.0..cfg.height_range.1);
    let pos = [c[0] + r * theta.cos(), c[1] + r * theta.sin(), c[2] + h];
    let noise = NoiseSpec {
        kind: cfg.noise_kinds[rng.gen_range(0..cfg.noise_kinds.len())],
        snr_db: Some(cfg.snr_grid[rng.gen_range(0..cfg.snr_grid.len())]),
    };
    let mut item = simulate_array(&src, &cfg.geometry, pos, &noise, cfg.sample_rate, rng.gen())?;
    item.id = format!("item_{i:05}");
    item.meta.source_kind = kind.name();
    item.meta.seed = seed;
    Ok(item)
}

/// Whole dataset in memory.
pub fn generate_items(cfg: &SimConfig) -> Result<Vec<MixtureItem>> {
    cfg.validate()?;
    (0..cfg.n_items)
        .into_par_iter()
        .map(|i| generate_item(cfg, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    snr_db: Option<f64>,
    reference_index: usize,
    sample_rate: u32,
    meta: ItemMeta,
}

fn noisy_name(id: &str) -> String {
    format!("{id}_noisy.wav")
}

fn clean_name(id: &str) -> String {
    format!("{id}_clean.wav")
}

/// Writes `{id}_noisy.wav`, `{id}_clean.wav` (float32) and `{id}.json`.
pub fn save_item(item: &MixtureItem, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let noisy = Waveform {
        sample_rate: item.sample_rate,
        channels: item.noisy.clone(),
    };
    write_wav(dir.join(noisy_name(&item.id)), &noisy, WavFormat::Float32)?;
    write_wav(
        dir.join(clean_name(&item.id)),
        &Waveform::mono(item.sample_rate, item.clean_ref.clone()),
        WavFormat::Float32,
    )?;
    let side = Sidecar {
        id: item.id.clone(),
        snr_db: item.snr_db,
        reference_index: item.reference_index,
        sample_rate: item.sample_rate,
        meta: item.meta.clone(),
    };
    fs::write(
        dir.join(format!("{}.json", item.id)),
        serde_json::to_string_pretty(&side)?,
    )?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_item(dir: &Path, id: &str) -> Result<MixtureItem> {
    let side = read_sidecar(&dir.join(format!("{id}.json")))?;
    let noisy = read_wav(dir.join(noisy_name(id)))?;
    let clean = read_wav(dir.join(clean_name(id)))?;
    if clean.n_channels() != 1
        || clean.len() != noisy.len()
        || side.reference_index >= noisy.n_channels()
    {
        return Err(Error::Manifest(format!(
            "item {id}: {} noisy channels of {} samples, clean {}x{}, reference {}",
            noisy.n_channels(),
            noisy.len(),
            clean.n_channels(),
            clean.len(),
            side.reference_index
        )));
    }
    Ok(MixtureItem {
        id: side.id,
        noisy: noisy.channels,
        clean_ref: clean.channels.into_iter().next().unwrap_or_default(),
        snr_db: side.snr_db,
        reference_index: side.reference_index,
        sample_rate: side.sample_rate,
        meta: side.meta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "valid" | "validation" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (train, val, test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub noisy_path: String,
    pub clean_path: String,
    pub snr_db: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub items: Vec<ManifestEntry>,
    pub splits: Splits,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| {
            Error::Manifest(format!("{} is not a valid manifest: {e}", path.display()))
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }
}

/// Manifest at `path` (or `path/manifest.json` for a directory).
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Items of one split, read from the directory holding the manifest.
pub fn load_split(path: impl AsRef<Path>, split: Split) -> Result<Vec<MixtureItem>> {
    let mpath = manifest_path(path.as_ref());
    let manifest = Manifest::load(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    manifest
        .ids(split)
        .iter()
        .map(|id| load_item(dir, id))
        .collect()
}

fn check_item(dir: &Path, sidecar: &Path) -> std::result::Result<ManifestEntry, String> {
    let side = read_sidecar(sidecar).map_err(|e| format!("{}: {e}", sidecar.display()))?;
    let (noisy, clean) = (noisy_name(&side.id), clean_name(&side.id));
    let header = |name: &str| -> std::result::Result<(u16, u32), String> {
        let p = dir.join(name);
        let r = hound::WavReader::open(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        Ok((r.spec().channels, r.duration()))
    };
    let (nc, nl) = header(&noisy)?;
    let (cc, cl) = header(&clean)?;
    if cc != 1 || nl != cl || side.reference_index >= nc as usize {
        return Err(format!(
            "{}: inconsistent audio ({nc} noisy channels x {nl}, clean {cc} x {cl}, reference {})",
            side.id, side.reference_index
        ));
    }
    Ok(ManifestEntry {
        id: side.id,
        noisy_path: noisy,
        clean_path: clean,
        snr_db: side.snr_db,
        seed: side.meta.seed,
    })
}

/// Scans `dir` for saved items, assigns seeded train/val/test splits and
/// writes `dir/manifest.json`. Nothing is written if any item is broken.
pub fn build_manifest(
    dir: impl AsRef<Path>,
    split_fractions: [f64; 3],
    seed: u64,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    check_fractions(&split_fractions)?;
    let listing = fs::read_dir(dir)
        .map_err(|e| Error::Manifest(format!("cannot list {}: {e}", dir.display())))?;
    let mut sidecars = Vec::new();
    for entry in listing {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "json")
            && p.file_name().is_some_and(|n| n != MANIFEST_FILE)
        {
            sidecars.push(p);
        }
    }
    sidecars.sort();
    if sidecars.is_empty() {
        return Err(Error::Manifest(format!(
            "no items found in {}",
            dir.display()
        )));
    }
    let mut items = Vec::new();
    let mut problems = Vec::new();
    for s in &sidecars {
        match check_item(dir, s) {
            Ok(e) => items.push(e),
            Err(msg) => problems.push(msg),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(format!(
            "{} broken item(s):\n  {}",
            problems.len(),
            problems.join("\n  ")
        )));
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (split_fractions[1] * n as f64).round() as usize;
    let n_test = ((split_fractions[2] * n as f64).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let pick = |r: std::ops::Range<usize>| -> Vec<String> {
        let mut ids: Vec<String> = order[r].iter().map(|&i| items[i].id.clone()).collect();
        ids.sort();
        ids
    };
    let splits = Splits {
        train: pick(0..n_train),
        val: pick(n_train..n_train + n_val),
        test: pick(n_train + n_val..n),
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        split_fractions,
        items,
        splits,
    };
    let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Generates, saves and indexes a full dataset under `dir`.
pub fn generate_dataset(cfg: &SimConfig, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let items = generate_items(cfg)?;
    fs::create_dir_all(dir)?;
    items
        .par_iter()
        .map(|item| save_item(item, dir))
        .collect::<Result<Vec<()>>>()?;
    build_manifest(dir, cfg.split_fractions, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize) -> SimConfig {
        SimConfig {
            n_items: n,
            duration: 0.1,
            split_fractions: [0.6, 0.2, 0.2],
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn items_are_deterministic() {
        let cfg = small_cfg(3);
        let a = generate_items(&cfg).unwrap();
        let b = generate_items(&cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].noisy, a[1].noisy);
        assert_eq!(a[2].id, "item_00002");
    }

    #[test]
    fn ten_items_split_six_two_two() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small_cfg(10), dir.path()).unwrap();
        assert_eq!(
            (
                m.splits.train.len(),
                m.splits.val.len(),
                m.splits.test.len()
            ),
            (6, 2, 2)
        );
        let first = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        build_manifest(dir.path(), [0.6, 0.2, 0.2], 5).unwrap();
        assert_eq!(first, fs::read(dir.path().join(MANIFEST_FILE)).unwrap());
        let test = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(test.len(), 2);
        assert_eq!(test[0].n_mics(), 6);
    }

    #[test]
    fn empty_dir_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = build_manifest(dir.path(), [0.6, 0.2, 0.2], 0).unwrap_err();
        assert!(err.to_string().contains("no items"), "{err}");
    }

    #[test]
    fn broken_item_fails_without_writing() {
        let dir = tempfile::tempdir().unwrap();
        let items = generate_items(&small_cfg(3)).unwrap();
        for it in &items {
            save_item(it, dir.path()).unwrap();
        }
        fs::remove_file(dir.path().join(clean_name(&items[1].id))).unwrap();
        fs::write(
            dir.path().join(format!("{}.json", items[2].id)),
            "{ not json",
        )
        .unwrap();
        let err = build_manifest(dir.path(), [0.6, 0.2, 0.2], 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("2 broken"), "{err}");
        assert!(err.contains(&items[1].id));
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn bad_fractions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_manifest(dir.path(), [0.5, 0.2, 0.2], 0).is_err());
    }
}
