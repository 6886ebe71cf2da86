//! Python bindings: latents, schedules, patch plans, edge detection, configs,
//! whole runs and a loopback echo server.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use adp2_core::denoiser::wire::HelloInfo;
use adp2_core::denoiser::{spawn_echo_server, EchoServer as CoreEchoServer};
use adp2_core::dilated::eta_schedule;
use adp2_core::patch::plan_patches as core_plan_patches;
use adp2_core::pipeline::{write_run_dir, GenerationConfig, RunArtifacts};
use adp2_core::structure::{canny_edges, ImageBuffer};
use adp2_core::tensor::{ddim_step as core_ddim_step, forward_diffuse as core_forward_diffuse, make_schedule};
use adp2_core::{Error, LatentTensor};

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// An `h x w x c` float32 latent stored channel-last.
#[pyclass(name = "Latent", skip_from_py_object)]
#[derive(Clone)]
struct PyLatent {
    inner: LatentTensor,
}

#[pymethods]
impl PyLatent {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        LatentTensor::new(height, width, channels, data).map(|inner| PyLatent { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn zeros(height: usize, width: usize, channels: usize) -> Self {
        PyLatent { inner: LatentTensor::zeros(height, width, channels) }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        LatentTensor::load(path).map(|inner| PyLatent { inner }).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height(), self.inner.width(), self.inner.channels())
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, row: usize, col: usize, ch: usize) -> PyResult<f32> {
        let (h, w, c) = self.shape();
        if row >= h || col >= w || ch >= c {
            return Err(PyValueError::new_err(format!("index ({row}, {col}, {ch}) out of bounds for {h}x{w}x{c}")));
        }
        Ok(self.inner.get(row, col, ch))
    }

    fn max_abs_diff(&self, other: &PyLatent) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.shape();
        format!("Latent({h}x{w}x{c})")
    }
}

#[pyfunction]
#[pyo3(signature = (z0, t, eps, train_steps=1000, beta_start=0.00085, beta_end=0.012))]
fn forward_diffuse(
    z0: &PyLatent,
    t: usize,
    eps: &PyLatent,
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> PyResult<PyLatent> {
    let sched = make_schedule(train_steps, beta_start, beta_end).map_err(py_err)?;
    core_forward_diffuse(&z0.inner, t, &eps.inner, &sched).map(|inner| PyLatent { inner }).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (z, eps_pred, t, t_prev, train_steps=1000, beta_start=0.00085, beta_end=0.012))]
fn ddim_step(
    z: &PyLatent,
    eps_pred: &PyLatent,
    t: usize,
    t_prev: usize,
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> PyResult<PyLatent> {
    let sched = make_schedule(train_steps, beta_start, beta_end).map_err(py_err)?;
    core_ddim_step(&z.inner, &eps_pred.inner, t, t_prev, &sched).map(|inner| PyLatent { inner }).map_err(py_err)
}

/// Windows as `(top, left, height, width)` tuples.
#[pyfunction]
fn plan_patches(
    parent_h: usize,
    parent_w: usize,
    patch_h: usize,
    patch_w: usize,
    stride_h: usize,
    stride_w: usize,
) -> PyResult<Vec<(usize, usize, usize, usize)>> {
    let plan = core_plan_patches(parent_h, parent_w, patch_h, patch_w, stride_h, stride_w).map_err(py_err)?;
    Ok(plan.windows().iter().map(|w| (w.top, w.left, w.height, w.width)).collect())
}

#[pyfunction]
fn eta(t: usize, total: usize) -> f64 {
    eta_schedule(t, total)
}

/// Edge map of an 8-bit gray or RGB raster, returned as 0/255 bytes.
#[pyfunction]
#[pyo3(signature = (height, width, channels, data, low=100.0, high=200.0, sigma=1.0))]
fn canny<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
    low: f64,
    high: f64,
    sigma: f64,
) -> PyResult<Bound<'py, PyBytes>> {
    let img = ImageBuffer::new(height, width, channels, data).map_err(py_err)?;
    let edges = canny_edges(&img, low, high, sigma).map_err(py_err)?;
    Ok(PyBytes::new(py, edges.data()))
}

/// Generation settings in the `key = value` text form.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: GenerationConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        GenerationConfig::parse(text).map(|inner| PyConfig { inner }).map_err(py_err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __eq__(&self, other: &PyConfig) -> bool {
        self.inner == other.inner
    }
}

/// Runs a generation; returns `(height, width, channels, pixels)` and writes
/// the run directory when `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None))]
fn generate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    out_dir: Option<&str>,
) -> PyResult<(usize, usize, usize, Bound<'py, PyBytes>)> {
    let mut art = RunArtifacts::default();
    let result = adp2_core::pipeline::run(&config.inner, &mut art);
    if let Some(dir) = out_dir {
        write_run_dir(dir, &config.inner, &art, result.as_ref().ok()).map_err(py_err)?;
    }
    let img = result.map_err(py_err)?;
    Ok((img.height, img.width, img.channels, PyBytes::new(py, img.data())))
}

/// Loopback server answering with the echo backend and toy codec.
#[pyclass(name = "EchoServer")]
struct PyEchoServer {
    inner: Option<CoreEchoServer>,
    address: String,
}

#[pymethods]
impl PyEchoServer {
    #[new]
    #[pyo3(signature = (latent_h=16, latent_w=16, channels=4, spatial_factor=8, attention_scale=1, listen="127.0.0.1:0"))]
    fn new(
        latent_h: u32,
        latent_w: u32,
        channels: u32,
        spatial_factor: u32,
        attention_scale: usize,
        listen: &str,
    ) -> PyResult<Self> {
        let hello = HelloInfo { latent_h, latent_w, channels, spatial_factor };
        let server = spawn_echo_server(listen, hello, (attention_scale > 0).then_some(attention_scale)).map_err(py_err)?;
        let address = server.addr().to_string();
        Ok(PyEchoServer { inner: Some(server), address })
    }

    #[getter]
    fn address(&self) -> String {
        self.address.clone()
    }

    fn shutdown(&mut self) {
        if let Some(s) = self.inner.take() {
            s.shutdown();
        }
    }
}

#[pymodule]
fn adp2(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLatent>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEchoServer>()?;
    m.add_function(wrap_pyfunction!(forward_diffuse, m)?)?;
    m.add_function(wrap_pyfunction!(ddim_step, m)?)?;
    m.add_function(wrap_pyfunction!(plan_patches, m)?)?;
    m.add_function(wrap_pyfunction!(eta, m)?)?;
    m.add_function(wrap_pyfunction!(canny, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
