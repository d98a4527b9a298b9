//! Python bindings: datasets, the CQR and CP-MDA calibrators, the Gaussian
//! oracle and the experiment runner.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cpmda_core::conformal_core::{
    corrected_upper_quantile, itp_conformalize_fit, ItpPipeline, PipelineConfig,
};
use cpmda_core::cp_mda::{MdaMethod, MdaPipeline, PatternChoice};
use cpmda_core::evaluation::run_experiment;
use cpmda_core::gaussian_oracle::{generate_glm_dataset, GlmParams};
use cpmda_core::missingness::McarSpec;
use cpmda_core::{split_train_cal, MaskPattern, MaskedDataset, PredictionInterval};

fn to_py(e: cpmda_core::Error) -> PyErr {
    match e {
        cpmda_core::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mask(s: &str) -> PyResult<MaskPattern> {
    s.parse().map_err(|e: cpmda_core::Error| to_py(e))
}

/// A row with `None` (or NaN) for missing entries, plus its mask.
fn split_row(row: &[Option<f64>], mask: Option<&str>) -> PyResult<(Vec<f64>, MaskPattern)> {
    let values: Vec<f64> = row.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let m = match mask {
        Some(s) => parse_mask(s)?,
        None => MaskPattern::new(values.iter().map(|v| v.is_nan()).collect()),
    };
    Ok((values, m))
}

/// Features with missing entries, responses and optional ground truth.
#[pyclass(name = "MaskedDataset", module = "cpmda", frozen)]
struct PyDataset {
    inner: MaskedDataset,
}

#[pymethods]
impl PyDataset {
    /// `x` is a list of rows where `None` or NaN marks a missing value.
    #[new]
    fn new(x: Vec<Vec<Option<f64>>>, y: Vec<f64>) -> PyResult<Self> {
        let d = x.first().map_or(0, Vec::len);
        let mut features = Vec::with_capacity(x.len() * d);
        let mut masks = Vec::with_capacity(x.len());
        for row in &x {
            if row.len() != d {
                return Err(PyValueError::new_err("rows have different lengths"));
            }
            let (values, m) = split_row(row, None)?;
            features.extend(values);
            masks.push(m);
        }
        Ok(PyDataset {
            inner: MaskedDataset::new(features, masks, y, d).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, target = "y"))]
    fn from_csv(path: &str, target: &str) -> PyResult<Self> {
        let inner = cpmda_core::cli_io::load_csv_dataset(
            path.as_ref(),
            target,
            &cpmda_core::evaluation::default_na_tokens(),
        )
        .map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    #[pyo3(signature = (path, target = "y"))]
    fn to_csv(&self, path: &str, target: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyOSError::new_err(e.to_string()))?;
        cpmda_core::cli_io::write_csv_dataset(f, &self.inner, None, target).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Masks as bitstrings; character `j` is `1` when feature `j` is missing.
    #[getter]
    fn masks(&self) -> Vec<String> {
        self.inner.masks().iter().map(|m| m.to_string()).collect()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.responses().to_vec()
    }

    fn row(&self, i: usize) -> PyResult<Vec<Option<f64>>> {
        if i >= self.inner.n() {
            return Err(PyValueError::new_err(format!("row {i} out of range")));
        }
        Ok((0..self.inner.dim())
            .map(|j| self.inner.get(i, j))
            .collect())
    }

    /// The complete row before masking, when the dataset was generated.
    fn true_row(&self, i: usize) -> Option<Vec<f64>> {
        (i < self.inner.n())
            .then(|| self.inner.true_row(i).map(<[f64]>::to_vec))
            .flatten()
    }

    fn __repr__(&self) -> String {
        format!(
            "MaskedDataset(n={}, d={})",
            self.inner.n(),
            self.inner.dim()
        )
    }
}

#[pyclass(name = "Interval", module = "cpmda", frozen)]
struct PyInterval {
    #[pyo3(get)]
    lower: f64,
    #[pyo3(get)]
    upper: f64,
    /// Mask whose calibration rows produced the interval.
    #[pyo3(get)]
    mask_used: String,
    #[pyo3(get)]
    cal_subset_size: usize,
}

impl From<PredictionInterval> for PyInterval {
    fn from(iv: PredictionInterval) -> Self {
        PyInterval {
            lower: iv.lower,
            upper: iv.upper,
            mask_used: iv.mask_used.to_string(),
            cal_subset_size: iv.cal_subset_size,
        }
    }
}

#[pymethods]
impl PyInterval {
    #[getter]
    fn length(&self) -> f64 {
        self.upper - self.lower
    }

    fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    fn __repr__(&self) -> String {
        format!("Interval({}, {})", self.lower, self.upper)
    }
}

fn intervals(v: Vec<PredictionInterval>) -> Vec<PyInterval> {
    v.into_iter().map(PyInterval::from).collect()
}

fn pipeline_config(alpha: f64) -> PipelineConfig {
    PipelineConfig {
        alpha,
        ..Default::default()
    }
}

/// Impute-then-predict split CQR with linear quantile regression.
#[pyclass(name = "CqrPipeline", module = "cpmda", frozen)]
struct PyCqr {
    inner: ItpPipeline,
}

#[pymethods]
impl PyCqr {
    /// Splits `data` at random into train and calibration rows and fits.
    #[staticmethod]
    #[pyo3(signature = (data, alpha = 0.1, cal_fraction = 0.5, seed = 0))]
    fn fit(
        py: Python<'_>,
        data: &PyDataset,
        alpha: f64,
        cal_fraction: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let split = split_train_cal(data.inner.n(), cal_fraction, seed).map_err(to_py)?;
        let inner = py
            .detach(|| itp_conformalize_fit(&data.inner, &split, &pipeline_config(alpha)))
            .map_err(to_py)?;
        Ok(PyCqr { inner })
    }

    #[pyo3(signature = (row, mask = None))]
    fn predict(&self, row: Vec<Option<f64>>, mask: Option<&str>) -> PyResult<PyInterval> {
        let (values, m) = split_row(&row, mask)?;
        self.inner
            .predict(&values, &m)
            .map(Into::into)
            .map_err(to_py)
    }

    fn predict_batch(&self, py: Python<'_>, data: &PyDataset) -> PyResult<Vec<PyInterval>> {
        py.detach(|| self.inner.predict_batch(&data.inner))
            .map(intervals)
            .map_err(to_py)
    }

    #[getter]
    fn correction(&self) -> f64 {
        self.inner.correction()
    }
}

fn parse_method(method: &str, pattern: Option<&str>, seed: Option<u64>) -> PyResult<MdaMethod> {
    Ok(match method {
        "exact" => MdaMethod::Exact,
        "nested" => MdaMethod::Nested,
        "nested_partitioned" => MdaMethod::NestedPartitioned(match (pattern, seed) {
            (Some(p), _) => PatternChoice::Fixed(parse_mask(p)?),
            (None, Some(seed)) => PatternChoice::RandomByCardinality { seed },
            (None, None) => PatternChoice::Smallest,
        }),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown method `{other}`; expected exact, nested or nested_partitioned"
            )))
        }
    })
}

/// CQR calibrated with missing-data augmentation.
#[pyclass(name = "MdaPipeline", module = "cpmda", frozen)]
struct PyMda {
    inner: MdaPipeline,
}

#[pymethods]
impl PyMda {
    #[staticmethod]
    #[pyo3(signature = (data, alpha = 0.1, cal_fraction = 0.5, seed = 0))]
    fn fit(
        py: Python<'_>,
        data: &PyDataset,
        alpha: f64,
        cal_fraction: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let split = split_train_cal(data.inner.n(), cal_fraction, seed).map_err(to_py)?;
        let inner = py
            .detach(|| MdaPipeline::fit(&data.inner, &split, &pipeline_config(alpha)))
            .map_err(to_py)?;
        Ok(PyMda { inner })
    }

    /// `method` is `exact`, `nested` or `nested_partitioned`. For the last,
    /// `pattern` fixes the calibration pattern and `seed` draws one at random;
    /// with neither, the smallest admissible pattern is used.
    #[pyo3(signature = (row, mask = None, method = "nested", pattern = None, seed = None))]
    fn predict(
        &self,
        row: Vec<Option<f64>>,
        mask: Option<&str>,
        method: &str,
        pattern: Option<&str>,
        seed: Option<u64>,
    ) -> PyResult<PyInterval> {
        let (values, m) = split_row(&row, mask)?;
        let method = parse_method(method, pattern, seed)?;
        let iv = match &method {
            MdaMethod::Exact => cpmda_core::cp_mda::mda_exact_interval(&self.inner, &values, &m),
            MdaMethod::Nested => cpmda_core::cp_mda::mda_nested_interval(&self.inner, &values, &m),
            MdaMethod::NestedPartitioned(c) => {
                cpmda_core::cp_mda::mda_nested_partitioned_interval(&self.inner, &values, &m, c)
            }
        };
        iv.map(Into::into).map_err(to_py)
    }

    #[pyo3(signature = (data, method = "nested", pattern = None, seed = None))]
    fn predict_batch(
        &self,
        py: Python<'_>,
        data: &PyDataset,
        method: &str,
        pattern: Option<&str>,
        seed: Option<u64>,
    ) -> PyResult<Vec<PyInterval>> {
        let method = parse_method(method, pattern, seed)?;
        py.detach(|| self.inner.predict_batch(&method, &data.inner))
            .map(intervals)
            .map_err(to_py)
    }

    /// Calibration scores of the rows usable by the exact method for `mask`.
    fn exact_scores(&self, mask: &str) -> PyResult<Vec<f64>> {
        self.inner.exact_scores(&parse_mask(mask)?).map_err(to_py)
    }
}

/// Draws `n` rows from the reference Gaussian linear model in dimension `d`
/// with MCAR missingness at `rate`.
#[pyfunction]
#[pyo3(signature = (n, d = 3, rate = 0.2, seed = 0))]
fn generate(n: usize, d: usize, rate: f64, seed: u64) -> PyResult<PyDataset> {
    let params = GlmParams::reference(d).map_err(to_py)?;
    let inner = generate_glm_dataset(&params, n, &McarSpec::new(rate), seed).map_err(to_py)?;
    Ok(PyDataset { inner })
}

/// Length of the oracle interval for the reference model under `mask`.
#[pyfunction]
#[pyo3(signature = (mask, alpha = 0.1))]
fn oracle_length(mask: &str, alpha: f64) -> PyResult<f64> {
    let m = parse_mask(mask)?;
    let params = GlmParams::reference(m.len()).map_err(to_py)?;
    cpmda_core::gaussian_oracle::oracle_length(&params, &m, alpha).map_err(to_py)
}

/// Oracle interval for the reference model at `row`.
#[pyfunction]
#[pyo3(signature = (row, mask = None, alpha = 0.1))]
fn oracle_interval(row: Vec<Option<f64>>, mask: Option<&str>, alpha: f64) -> PyResult<PyInterval> {
    let (values, m) = split_row(&row, mask)?;
    let params = GlmParams::reference(m.len()).map_err(to_py)?;
    cpmda_core::gaussian_oracle::oracle_interval(&params, &m, &values, alpha)
        .map(Into::into)
        .map_err(to_py)
}

/// The `ceil((1 - alpha)(n + 1))`-th smallest score, or `inf` past `n`.
#[pyfunction]
fn corrected_quantile(scores: Vec<f64>, alpha: f64) -> PyResult<f64> {
    corrected_upper_quantile(&scores, alpha).map_err(to_py)
}

/// Runs an experiment described by a TOML string and returns one dict per
/// `(method, repetition, group)`.
#[pyfunction]
fn run_experiment_toml<'py>(py: Python<'py>, config: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = cpmda_core::cli_io::parse_config(config).map_err(to_py)?;
    if cfg.data.is_some() {
        return Err(PyValueError::new_err(
            "[data] configs are run through the command line tool",
        ));
    }
    let reports = py.detach(|| run_experiment(&cfg)).map_err(to_py)?;
    cpmda_core::cli_io::results_rows(&reports)
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method)?;
            d.set_item("repetition", r.repetition)?;
            d.set_item("group", r.group)?;
            d.set_item("n_test", r.n_test)?;
            d.set_item("coverage", r.coverage)?;
            d.set_item("mean_length", r.mean_length)?;
            d.set_item("infinite_fraction", r.infinite_fraction)?;
            d.set_item("seed", r.seed)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn cpmda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyInterval>()?;
    m.add_class::<PyCqr>()?;
    m.add_class::<PyMda>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_length, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_interval, m)?)?;
    m.add_function(wrap_pyfunction!(corrected_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment_toml, m)?)?;
    Ok(())
}
