//! Python bindings. Tensors cross the boundary as `(values, shape)` pairs of
//! flat float lists and int lists in row-major order.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use pwtp::datagen::{self, LabeledClip, SynthSpec};
use pwtp::numeric::{NormMode, Rng, Tensor};
use pwtp::objectives::{self, JointMode, SchedulerConfig};
use pwtp::pwtp::{self as core, PwtpConfig, PwtpParams};
use pwtp::recognizer::{HeadParams, InputMode};
use pwtp::{io, train, Error};

type Flat = (Vec<f64>, Vec<usize>);
type LogRow = (usize, f64, f64, f64);

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(values: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(&shape, values).map_err(err)
}

fn flat(t: &Tensor) -> Flat {
    (t.data().to_vec(), t.shape().to_vec())
}

/// Projector hyperparameters.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PwtpConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (frames=8, rank=1, kernel=9, stride=8, channels=24, ridge=1e-6))]
    fn new(
        frames: usize,
        rank: usize,
        kernel: usize,
        stride: usize,
        channels: usize,
        ridge: f64,
    ) -> PyResult<Self> {
        let inner = PwtpConfig {
            frames,
            rank,
            kernel,
            stride,
            channels,
            ridge,
            ..PwtpConfig::default()
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "Config(frames={}, rank={}, kernel={}, stride={}, channels={}, ridge={})",
            c.frames, c.rank, c.kernel, c.stride, c.channels, c.ridge
        )
    }
}

/// Projector parameters (theta1) bound to their configuration.
#[pyclass(name = "Projector")]
struct PyProjector {
    cfg: PwtpConfig,
    params: PwtpParams,
}

#[pymethods]
impl PyProjector {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(PwtpConfig::default, |c| c.inner);
        let params = PwtpParams::init(&cfg, datagen::CHANNELS, &mut Rng::new(seed)).map_err(err)?;
        Ok(Self { cfg, params })
    }

    /// Load theta1 from a checkpoint written by `save` or the command-line tool.
    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: &str, config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map_or_else(PwtpConfig::default, |c| c.inner);
        let params = io::theta1(&io::load_checkpoint(path).map_err(err)?).map_err(err)?;
        params.check_config(&cfg).map_err(err)?;
        Ok(Self { cfg, params })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_checkpoint(path, &self.params, None).map_err(err)
    }

    fn num_trainable(&self) -> usize {
        self.params.num_trainable()
    }

    /// Decompose a clip `[S, T, H, W, C]`. Returns a dict with `da`
    /// `[S, H, W, C]` and per-segment `static`, `residual` lists.
    #[pyo3(signature = (values, shape, batch_stats=false))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        values: Vec<f64>,
        shape: Vec<usize>,
        batch_stats: bool,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let clip = tensor(values, shape)?;
        let mode = if batch_stats {
            NormMode::Batch
        } else {
            NormMode::Running
        };
        let out = core::pwtp_forward(&clip, &self.params, &self.cfg, mode).map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("da", flat(&out.da))?;
        let statics: Vec<Flat> = out
            .segments
            .iter()
            .map(|s| flat(&s.static_appearance))
            .collect();
        let residuals: Vec<Flat> = out.segments.iter().map(|s| flat(&s.residual)).collect();
        d.set_item("static", statics)?;
        d.set_item("residual", residuals)?;
        Ok(d)
    }

    /// Train on ENoPR alone; returns the per-step objective.
    #[pyo3(signature = (dataset, steps=200, lr=0.05, batch=8, warmup=20, seed=0))]
    fn train_unsupervised(
        &mut self,
        dataset: &PyDataset,
        steps: usize,
        lr: f64,
        batch: usize,
        warmup: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let tc = train::TrainConfig {
            steps,
            lr,
            batch,
            warmup_steps: warmup,
            seed,
            ..train::TrainConfig::default()
        };
        let rows =
            train::train_unsupervised(&mut self.params, &self.cfg, &tc, &dataset.train, |_| {})
                .map_err(err)?;
        Ok(rows.iter().map(|r| r.enopr).collect())
    }

    /// Mean per-segment ENoPR over a split ("train" or "test").
    #[pyo3(signature = (dataset, split="test"))]
    fn evaluate(&self, dataset: &PyDataset, split: &str) -> PyResult<f64> {
        train::evaluate_enopr(
            &self.params,
            &self.cfg,
            dataset.split(split)?,
            NormMode::Running,
        )
        .map_err(err)
    }
}

/// Synthetic confounded dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    train: Vec<LabeledClip>,
    test: Vec<LabeledClip>,
}

impl PyDataset {
    fn split(&self, name: &str) -> PyResult<&[LabeledClip]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (
        height=32, width=32, segments=4, frames=8, classes=4,
        n_train=160, n_test=80, confound=0.9, seed=0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        height: usize,
        width: usize,
        segments: usize,
        frames: usize,
        classes: usize,
        n_train: usize,
        n_test: usize,
        confound: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            height,
            width,
            segments,
            frames,
            classes,
            n_train,
            n_test,
            confound,
            seed,
            ..SynthSpec::default()
        };
        let ds = datagen::make_dataset(&spec).map_err(err)?;
        Ok(Self {
            train: ds.train,
            test: ds.test,
        })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let ds = io::read_dataset(dir).map_err(err)?;
        Ok(Self {
            train: ds.train,
            test: ds.test,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        io::write_split(dir, "train", &self.train).map_err(err)?;
        io::write_split(dir, "test", &self.test).map_err(err)
    }

    #[pyo3(signature = (split="train"))]
    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// `(values, shape, label)` of one clip.
    #[pyo3(signature = (index, split="train"))]
    fn clip(&self, index: usize, split: &str) -> PyResult<(Vec<f64>, Vec<usize>, usize)> {
        let c = self
            .split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("clip {index} out of range")))?;
        let (v, s) = flat(&c.clip);
        Ok((v, s, c.label))
    }

    /// Manifest lines `index<TAB>label<TAB>background<TAB>glyph`.
    #[pyo3(signature = (split="train"))]
    fn manifest(&self, split: &str) -> PyResult<Vec<String>> {
        Ok(self
            .split(split)?
            .iter()
            .enumerate()
            .map(|(i, c)| c.manifest_line(i))
            .collect())
    }
}

/// Train projector and recognizer jointly; returns `(test_accuracy, log)` with
/// log rows `(step, enopr, loss2, alpha)`.
#[pyfunction]
#[pyo3(signature = (dataset, mode="mgda", input="da", steps=300, lr=0.05, seed=0, config=None))]
#[allow(clippy::too_many_arguments)]
fn train_joint(
    dataset: &PyDataset,
    mode: &str,
    input: &str,
    steps: usize,
    lr: f64,
    seed: u64,
    config: Option<PyConfig>,
) -> PyResult<(f64, Vec<LogRow>)> {
    let cfg = config.map_or_else(PwtpConfig::default, |c| c.inner);
    let mode: JointMode = mode.parse().map_err(err)?;
    let input: InputMode = input.parse().map_err(err)?;
    let classes = dataset.train.iter().map(|c| c.label).max().unwrap_or(0) + 1;
    let theta1 =
        PwtpParams::init(&cfg, datagen::CHANNELS, &mut Rng::substream(seed, 1)).map_err(err)?;
    let theta2 = HeadParams::init(
        datagen::CHANNELS,
        classes.max(2),
        &mut Rng::substream(seed, 2),
    )
    .map_err(err)?;
    let tc = train::TrainConfig {
        steps,
        lr,
        warmup_steps: steps / 20,
        seed,
        ..train::TrainConfig::default()
    };
    let out = train::train_joint(
        theta1,
        theta2,
        &cfg,
        &tc,
        mode,
        input,
        &dataset.train,
        |_| {},
    )
    .map_err(err)?;
    let acc =
        train::accuracy(Some(&out.theta1), &out.theta2, &cfg, &dataset.test, input).map_err(err)?;
    let log = out
        .log
        .iter()
        .map(|r| (r.step, r.enopr, r.loss2, r.alpha))
        .collect();
    Ok((acc, log))
}

/// Least-squares projection of a segment `[T, H, W, C]` onto bases `[H·W, T, D]`.
/// Returns `(projected, residual, da)`.
#[pyfunction]
#[pyo3(signature = (values, shape, bases, bases_shape, ridge=0.0))]
fn project(
    values: Vec<f64>,
    shape: Vec<usize>,
    bases: Vec<f64>,
    bases_shape: Vec<usize>,
    ridge: f64,
) -> PyResult<(Flat, Flat, Flat)> {
    let x = tensor(values, shape)?;
    let a = tensor(bases, bases_shape)?;
    let (_, xh) = core::project(&x, &a, ridge).map_err(err)?;
    let (p, da) = core::residual_and_da(&x, &xh).map_err(err)?;
    Ok((flat(&xh), flat(&p), flat(&da)))
}

#[pyfunction]
fn mgda_alpha(g1: Vec<f64>, g2: Vec<f64>) -> PyResult<f64> {
    objectives::mgda_alpha(&g1, &g2).map_err(err)
}

#[pyfunction]
fn scale_schedule(gamma: f64, lam: f64, total: usize, iteration: usize) -> PyResult<f64> {
    objectives::scale_schedule(&SchedulerConfig {
        gamma,
        lambda: lam,
        total,
        iteration,
    })
    .map_err(err)
}

/// ENoPR of a residual `[T, H, W, C]`.
#[pyfunction]
fn enopr(values: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    objectives::enopr(&tensor(values, shape)?).map_err(err)
}

/// Binary PPM bytes of a DA image `[H, W, C]`, C = 1 or 3.
#[pyfunction]
fn export_da<'py>(
    py: Python<'py>,
    values: Vec<f64>,
    shape: Vec<usize>,
) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = io::export_da(&tensor(values, shape)?).map_err(err)?;
    Ok(PyBytes::new(py, &bytes))
}

#[pymodule]
fn pwtp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyProjector>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(train_joint, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(mgda_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(scale_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(enopr, m)?)?;
    m.add_function(wrap_pyfunction!(export_da, m)?)?;
    Ok(())
}
