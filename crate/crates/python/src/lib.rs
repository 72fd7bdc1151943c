use mcse_core::autodiff::gradcheck::GradCheckConfig;
use mcse_core::dsp::{self, StftConfig};
use mcse_core::network::{self, ModelConfig};
use mcse_core::sim::{generate_item, SimConfig};
use mcse_core::ssm::{ssm_scan, ScanStrategy};
use mcse_core::trainer::{load_checkpoint, save_checkpoint};
use mcse_core::{verify, Tensor};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: mcse_core::Error) -> PyErr {
    match e {
        mcse_core::Error::Io(_) | mcse_core::Error::Wav { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn preset(name: &str, n_mics: usize) -> PyResult<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk(n_mics)),
        "paper" => Ok(ModelConfig::paper(n_mics)),
        other => Err(PyValueError::new_err(format!(
            "unknown preset `{other}` (desk or paper)"
        ))),
    }
}

fn stft_cfg(window_len: usize, hop: usize, fft_len: usize) -> PyResult<StftConfig> {
    let cfg = StftConfig {
        window_len,
        hop,
        fft_len,
        ..Default::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Generator with float32 weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: network::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (n_mics, preset_name = "desk", seed = 0))]
    fn new(n_mics: usize, preset_name: &str, seed: u64) -> PyResult<Self> {
        let cfg = preset(preset_name, n_mics)?;
        Ok(Self {
            inner: network::Model::new(cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path, None).map_err(err)
    }

    #[getter]
    fn n_mics(&self) -> usize {
        self.inner.cfg().n_mics
    }

    #[getter]
    fn reference_mic(&self) -> usize {
        self.inner.cfg().reference_mic
    }

    fn param_count(&self) -> usize {
        self.inner.params.num_scalars()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.cfg()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `channels[m][t]` in, enhanced reference channel out.
    fn enhance(&self, channels: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.enhance(&channels).map_err(err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.cfg();
        format!(
            "Model(n_mics={}, c_mid={}, blocks={}, params={})",
            c.n_mics,
            c.c_mid,
            c.n_tf_blocks,
            self.inner.params.num_scalars()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (wave, window_len = 400, hop = 100, fft_len = 400))]
fn stft(
    wave: Vec<f64>,
    window_len: usize,
    hop: usize,
    fft_len: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let cfg = stft_cfg(window_len, hop, fft_len)?;
    let s = dsp::stft(&wave, &cfg).map_err(err)?;
    let rows = |t: &Tensor<f64>| t.data().chunks(t.dim(1)).map(<[f64]>::to_vec).collect();
    Ok((rows(&s.re), rows(&s.im)))
}

#[pyfunction]
#[pyo3(signature = (re, im, out_len, window_len = 400, hop = 100, fft_len = 400))]
fn istft(
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
    out_len: usize,
    window_len: usize,
    hop: usize,
    fft_len: usize,
) -> PyResult<Vec<f64>> {
    let cfg = stft_cfg(window_len, hop, fft_len)?;
    let to_t = |rows: Vec<Vec<f64>>| -> PyResult<Tensor<f64>> {
        let f = rows.first().map_or(0, Vec::len);
        let t = rows.len();
        Tensor::new(vec![t, f], rows.into_iter().flatten().collect()).map_err(err)
    };
    let spec = dsp::Spectrum {
        re: to_t(re)?,
        im: to_t(im)?,
    };
    dsp::istft(&spec, &cfg, out_len).map_err(err)
}

#[pyfunction]
fn si_sdr(reference: Vec<f64>, estimate: Vec<f64>) -> PyResult<f64> {
    mcse_core::metrics::si_sdr(&reference, &estimate).map_err(err)
}

#[pyfunction]
fn sdr(reference: Vec<f64>, estimate: Vec<f64>) -> PyResult<f64> {
    mcse_core::metrics::sdr(&reference, &estimate).map_err(err)
}

#[pyfunction]
fn stoi(reference: Vec<f64>, estimate: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    mcse_core::metrics::stoi(&reference, &estimate, sample_rate).map_err(err)
}

/// Total and per-module parameter counts.
#[pyfunction]
#[pyo3(signature = (n_mics, preset_name = "desk", c_mid = None))]
fn param_count<'py>(
    py: Python<'py>,
    n_mics: usize,
    preset_name: &str,
    c_mid: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = preset(preset_name, n_mics)?;
    if let Some(c) = c_mid {
        cfg.c_mid = c;
    }
    let b = network::param_count(&cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("total", b.total)?;
    d.set_item("modules", b.modules.into_iter().collect::<Vec<_>>())?;
    Ok(d)
}

/// One simulated six-microphone item from the default recipe.
#[pyfunction]
#[pyo3(signature = (index, duration = 1.0, seed = 0))]
fn simulate_item<'py>(
    py: Python<'py>,
    index: usize,
    duration: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SimConfig {
        duration,
        seed,
        n_items: index + 1,
        ..Default::default()
    };
    let item = generate_item(&cfg, index).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("id", &item.id)?;
    d.set_item("noisy", &item.noisy)?;
    d.set_item("clean", &item.clean_ref)?;
    d.set_item("snr_db", item.snr_db)?;
    d.set_item("reference_index", item.reference_index)?;
    d.set_item("sample_rate", item.sample_rate)?;
    Ok(d)
}

/// Linear recurrence over discretized parameters. `abar, bbar: [L][D][N]`,
/// `c: [L][N]`, `u: [L][D]`; `chunk = 0` runs sequentially.
#[pyfunction]
#[pyo3(signature = (abar, bbar, c, u, chunk = 0))]
fn scan(
    abar: Vec<Vec<Vec<f64>>>,
    bbar: Vec<Vec<Vec<f64>>>,
    c: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    chunk: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let l = abar.len();
    let d = abar.first().map_or(0, Vec::len);
    let n = abar.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let flat3 = |x: Vec<Vec<Vec<f64>>>| {
        Tensor::new(vec![l, d, n], x.into_iter().flatten().flatten().collect())
    };
    let ab = flat3(abar).map_err(err)?;
    let bb = flat3(bbar).map_err(err)?;
    let ct = Tensor::new(vec![l, n], c.into_iter().flatten().collect()).map_err(err)?;
    let ut = Tensor::new(vec![l, d], u.into_iter().flatten().collect()).map_err(err)?;
    let strategy = if chunk == 0 {
        ScanStrategy::Sequential
    } else {
        ScanStrategy::Chunked(chunk)
    };
    let (y, _) = ssm_scan(&ab, &bb, &ct, &ut, None, strategy).map_err(err)?;
    Ok(y.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect())
}

/// Runs the gradient suite; returns `(passed, max_rel_error)`.
#[pyfunction]
fn gradcheck() -> PyResult<(bool, f64)> {
    let rep = verify::run_suite(&[0], &GradCheckConfig::default()).map_err(err)?;
    Ok((rep.passed, rep.max_rel_error()))
}

#[pymodule]
fn mcse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(stft, m)?)?;
    m.add_function(wrap_pyfunction!(istft, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(sdr, m)?)?;
    m.add_function(wrap_pyfunction!(stoi, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_item, m)?)?;
    m.add_function(wrap_pyfunction!(scan, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
