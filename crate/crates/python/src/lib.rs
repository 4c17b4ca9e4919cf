//! Python bindings for the `pointcube` crate.

use std::collections::BTreeMap;

use pointcube::blocks::{self, Frame, PairIndicator};
use pointcube::geometry::{self, Point};
use pointcube::inference::{self, FrozenModel};
use pointcube::labels::{self, TextEmbeddingSet};
use pointcube::losses::{self, KernelMode, LocalMode, LossConfig};
use pointcube::synth::{self, Archetype, DatasetPlan, SynthSpec};
use pointcube::training::{self, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: pointcube::Error) -> PyErr {
    use pointcube::Error as E;
    match e {
        E::File { .. } | E::Io(_) => PyIOError::new_err(e.to_string()),
        E::NonFiniteLoss(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = pointcube::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn loss_config(tau: f64, kernel: &str, local_mode: &str) -> PyResult<LossConfig> {
    let cfg = LossConfig {
        tau,
        kernel: parse::<KernelMode>(kernel)?,
        local_mode: parse::<LocalMode>(local_mode)?,
        ..LossConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn json_value(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn py_value<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

type BlockRow = Option<Vec<f64>>;

#[pyclass(name = "PointCloud", module = "pointcube")]
#[derive(Clone)]
struct PyPointCloud {
    inner: geometry::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (id, points, class_name=None))]
    fn new(id: String, points: Vec<Point>, class_name: Option<String>) -> PyResult<Self> {
        let mut inner = geometry::PointCloud::new(id, points).map_err(to_py)?;
        if let Some(c) = class_name {
            inner = inner.with_class(c);
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::load_xyz(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        geometry::save_xyz(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn class_name(&self) -> Option<String> {
        self.inner.class_name.clone()
    }

    #[getter]
    fn points(&self) -> Vec<Point> {
        self.inner.points().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn centroid(&self) -> Point {
        self.inner.centroid()
    }

    fn bounds(&self) -> (Point, Point) {
        self.inner.bounds()
    }

    fn normalize(&self) -> Self {
        Self {
            inner: self.inner.normalize(),
        }
    }

    fn permuted(&self, order: Vec<usize>) -> PyResult<Self> {
        let mut seen = vec![false; self.inner.len()];
        for &i in &order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(PyValueError::new_err("order is not a permutation"));
            }
        }
        if order.len() != seen.len() {
            return Err(PyValueError::new_err("order is not a permutation"));
        }
        Ok(Self {
            inner: self.inner.permuted(&order),
        })
    }

    /// Returns a dict with `assignment`, `counts` and `valid` (27 booleans).
    #[pyo3(signature = (min_points=1, frame="aabb"))]
    fn partition<'py>(&self, py: Python<'py>, min_points: usize, frame: &str) -> PyResult<Bound<'py, PyDict>> {
        let p = blocks::partition(&self.inner, min_points, parse::<Frame>(frame)?).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("assignment", p.assignment.clone())?;
        d.set_item("counts", p.counts().to_vec())?;
        d.set_item("valid", p.valid_mask.to_vec())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(id={:?}, n={})", self.inner.id, self.inner.len())
    }
}

/// Frozen text embeddings keyed by class name.
#[pyclass(name = "Embeddings", module = "pointcube")]
#[derive(Clone)]
struct PyEmbeddings {
    sets: BTreeMap<String, TextEmbeddingSet>,
}

#[pymethods]
impl PyEmbeddings {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            sets: labels::ingest_embeddings(path).map_err(to_py)?,
        })
    }

    /// Embeds `{class: {"global": [...], "local": [9 strings]}}` with the hashing embedder.
    #[staticmethod]
    #[pyo3(signature = (label_sets, dim=256))]
    fn from_labels(py: Python<'_>, label_sets: &Bound<'_, PyDict>, dim: usize) -> PyResult<Self> {
        let mut sets = BTreeMap::new();
        for (class, v) in json_value(py, label_sets)?.as_object().into_iter().flatten() {
            let strings = |key: &str| -> PyResult<Vec<String>> {
                serde_json::from_value(v.get(key).cloned().unwrap_or_default())
                    .map_err(|e| PyValueError::new_err(format!("{class}.{key}: {e}")))
            };
            let set = labels::LabelSet {
                class_name: class.clone(),
                global_labels: strings("global")?,
                local_labels: strings("local")?,
            };
            sets.insert(class.clone(), set);
        }
        Ok(Self {
            sets: labels::embed_label_sets(&sets, dim).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        labels::write_records(&labels::embedding_records(&self.sets), path).map_err(to_py)
    }

    fn classes(&self) -> Vec<String> {
        self.sets.keys().cloned().collect()
    }

    fn dim(&self) -> Option<usize> {
        self.sets.values().next().map(TextEmbeddingSet::dim)
    }

    /// Raw vector of local label `k` (1..=9) of a class.
    fn local(&self, class_name: &str, k: usize) -> PyResult<(String, Vec<f64>)> {
        let set = self
            .sets
            .get(class_name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown class {class_name:?}")))?;
        let lv = k
            .checked_sub(1)
            .and_then(|i| set.local.get(i))
            .ok_or_else(|| PyValueError::new_err(format!("k={k} outside 1..=9")))?;
        Ok((lv.text.clone(), lv.vector.clone()))
    }

    fn checksum(&self, class_name: &str) -> Option<String> {
        self.sets.get(class_name).map(TextEmbeddingSet::checksum)
    }
}

/// Synthetic dataset with training and evaluation label sets.
#[pyclass(name = "SynthDataset", module = "pointcube")]
struct PySynthDataset {
    inner: synth::SynthDataset,
}

#[pymethods]
impl PySynthDataset {
    #[new]
    #[pyo3(signature = (per_class=40, test_per_class=10, points=512, jitter=0.005, seed=0, archetypes=None))]
    fn new(
        per_class: usize,
        test_per_class: usize,
        points: usize,
        jitter: f64,
        seed: u64,
        archetypes: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let mut plan = DatasetPlan {
            per_class,
            test_per_class,
            points,
            jitter,
            seed,
            ..DatasetPlan::default()
        };
        if let Some(names) = archetypes {
            plan.archetypes = names.iter().map(|n| parse::<Archetype>(n)).collect::<PyResult<_>>()?;
        }
        Ok(Self {
            inner: synth::build_dataset(&plan).map_err(to_py)?,
        })
    }

    #[getter]
    fn train(&self) -> Vec<PyPointCloud> {
        wrap(&self.inner.train)
    }

    #[getter]
    fn test(&self) -> Vec<PyPointCloud> {
        wrap(&self.inner.test)
    }

    #[pyo3(signature = (dim=256))]
    fn training_embeddings(&self, dim: usize) -> PyResult<PyEmbeddings> {
        embed(&self.inner.training_labels, dim)
    }

    #[pyo3(signature = (dim=256))]
    fn classification_embeddings(&self, dim: usize) -> PyResult<PyEmbeddings> {
        embed(&self.inner.classification_labels, dim)
    }

    #[pyo3(signature = (dim=256))]
    fn paraphrase_embeddings(&self, dim: usize) -> PyResult<PyEmbeddings> {
        embed(&self.inner.paraphrase_labels, dim)
    }
}

fn wrap(clouds: &[geometry::PointCloud]) -> Vec<PyPointCloud> {
    clouds.iter().map(|c| PyPointCloud { inner: c.clone() }).collect()
}

fn embed(sets: &BTreeMap<String, labels::LabelSet>, dim: usize) -> PyResult<PyEmbeddings> {
    Ok(PyEmbeddings {
        sets: labels::embed_label_sets(sets, dim).map_err(to_py)?,
    })
}

/// A trained model loaded from or destined for a checkpoint.
#[pyclass(name = "Model", module = "pointcube")]
struct PyModel {
    model: FrozenModel,
    metrics: Vec<training::StepMetrics>,
}

#[pymethods]
impl PyModel {
    /// Trains from scratch. `config` is a (possibly nested) dict merged over the defaults,
    /// e.g. `{"epochs": 20, "loss": {"local_mode": "soft"}, "model": {"d_e": 64}}`.
    #[staticmethod]
    #[pyo3(signature = (clouds, embeddings, config=None))]
    fn train(
        py: Python<'_>,
        clouds: Vec<PyPointCloud>,
        embeddings: &PyEmbeddings,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let mut value = serde_json::to_value(TrainConfig::default()).map_err(|e| PyValueError::new_err(e.to_string()))?;
        if let Some(c) = config {
            merge(&mut value, json_value(py, c)?);
        }
        let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let clouds: Vec<_> = clouds.into_iter().map(|c| c.inner).collect();
        let out = py
            .allow_threads(|| training::train(&clouds, &embeddings.sets, &cfg))
            .map_err(to_py)?;
        Ok(Self {
            model: FrozenModel::new(out.checkpoint),
            metrics: out.metrics,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            model: FrozenModel::new(training::load_checkpoint(path).map_err(to_py)?),
            metrics: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        training::save_checkpoint(&self.model.checkpoint, path).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.model.checkpoint.step
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        py_value(py, &self.model.checkpoint.config)
    }

    /// Per-step losses of the training run, empty for a loaded model.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        py_value(py, &self.metrics)
    }

    fn epoch_losses(&self) -> Vec<f64> {
        training::epoch_means(&self.metrics)
    }

    /// Returns `(global, local)`; `local` has 27 rows, `None` for invalid blocks.
    fn embed(&self, cloud: &PyPointCloud) -> PyResult<(Vec<f64>, Vec<BlockRow>)> {
        let e = self.model.embed_object(&cloud.inner).map_err(to_py)?;
        let valid = e.object.partition.valid_mask;
        let local = e.local.into_iter().zip(valid).map(|(v, ok)| ok.then_some(v)).collect();
        Ok((e.global, local))
    }

    fn project_text(&self, raw: Vec<f64>) -> PyResult<Vec<f64>> {
        self.model.project_text(&raw).map_err(to_py)
    }

    #[pyo3(signature = (cloud, embeddings, top=None))]
    fn classify(&self, cloud: &PyPointCloud, embeddings: &PyEmbeddings, top: Option<usize>) -> PyResult<Vec<(String, f64)>> {
        let ranked = inference::classify(&cloud.inner, &self.model, &embeddings.sets).map_err(to_py)?;
        Ok(ranked
            .into_iter()
            .take(top.unwrap_or(usize::MAX))
            .map(|r| (r.class, r.score))
            .collect())
    }

    #[pyo3(signature = (cloud, embeddings, top=None))]
    fn reason(&self, cloud: &PyPointCloud, embeddings: &PyEmbeddings, top: Option<usize>) -> PyResult<Vec<(String, f64)>> {
        let ranked = inference::reason(&cloud.inner, &self.model, &embeddings.sets).map_err(to_py)?;
        Ok(ranked
            .into_iter()
            .take(top.unwrap_or(usize::MAX))
            .map(|r| (r.class, r.score))
            .collect())
    }

    /// Per-block heatmap for a raw prompt embedding, as a dict with `blocks` and `argmax`.
    fn part_reason<'py>(&self, py: Python<'py>, cloud: &PyPointCloud, prompt: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        let hm = inference::part_reason(&cloud.inner, &prompt, &self.model).map_err(to_py)?;
        let out = py_value(py, &hm)?;
        out.set_item("argmax", hm.argmax().map(|b| b.j))?;
        Ok(out)
    }
}

#[pyfunction]
fn block_index_to_grid(j: usize) -> PyResult<(u8, u8, u8)> {
    let g = blocks::block_index_to_grid(j).map_err(to_py)?;
    Ok((g.axis(0), g.axis(1), g.axis(2)))
}

#[pyfunction]
fn grid_to_block_index(x: u8, y: u8, z: u8) -> PyResult<usize> {
    Ok(blocks::GridCoord::new(x, y, z).map_err(to_py)?.block_index())
}

#[pyfunction]
fn positive_label_indices(j: usize) -> PyResult<[usize; 3]> {
    blocks::positive_label_indices(j).map_err(to_py)
}

/// 27 x 9 soft pair indicator from 9 raw local label embeddings.
#[pyfunction]
fn soft_indicator(local_text: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let s = blocks::soft_indicator(&local_text).map_err(to_py)?;
    Ok(s.table.iter().map(|r| r.to_vec()).collect())
}

#[pyfunction]
#[pyo3(signature = (text, dim=256))]
fn fallback_embed(text: &str, dim: usize) -> PyResult<Vec<f64>> {
    labels::fallback_embed(text, dim).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (objects, texts, tau=0.07, kernel="standard"))]
fn global_loss(objects: Vec<Vec<f64>>, texts: Vec<Vec<f64>>, tau: f64, kernel: &str) -> PyResult<f64> {
    losses::global_loss(&objects, &texts, &loss_config(tau, kernel, "hard")?).map_err(to_py)
}

/// Local loss of one object. `local_text` holds the 9 label vectors; `soft` switches
/// from the hard pair indicator to the soft one derived from `local_text`.
#[pyfunction]
#[pyo3(signature = (local, valid, local_text, tau=0.07, kernel="standard", soft=false))]
fn local_loss(
    local: Vec<Vec<f64>>,
    valid: Vec<bool>,
    local_text: Vec<Vec<f64>>,
    tau: f64,
    kernel: &str,
    soft: bool,
) -> PyResult<f64> {
    let valid: [bool; blocks::NUM_BLOCKS] = valid
        .try_into()
        .map_err(|_| PyValueError::new_err("valid must have 27 entries"))?;
    let cfg = loss_config(tau, kernel, if soft { "soft" } else { "hard" })?;
    if soft {
        let s = blocks::soft_indicator(&local_text).map_err(to_py)?;
        losses::local_loss_soft(&local, &valid, &local_text, &s, &cfg).map_err(to_py)
    } else {
        losses::local_loss_hard(&local, &valid, &local_text, &PairIndicator::new(), &cfg).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (archetype, count, points=512, jitter=0.005, seed=0))]
fn generate(archetype: &str, count: usize, points: usize, jitter: f64, seed: u64) -> PyResult<Vec<PyPointCloud>> {
    let spec = SynthSpec {
        archetype: parse::<Archetype>(archetype)?,
        points,
        jitter,
        seed,
    };
    Ok(wrap(&synth::generate(&spec, count).map_err(to_py)?.clouds))
}

/// Finite-difference check of the training gradient; returns `(checked, max_rel_err, mean_rel_err)`.
#[pyfunction]
#[pyo3(signature = (seed=0, local_mode="hard", samples=200))]
fn gradient_check(seed: u64, local_mode: &str, samples: usize) -> PyResult<(usize, f64, f64)> {
    let r = training::gradient_check(seed, parse::<LocalMode>(local_mode)?, samples).map_err(to_py)?;
    Ok((r.checked, r.max_rel_err, r.mean_rel_err))
}

#[pymodule]
#[pyo3(name = "pointcube")]
fn pointcube_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PySynthDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(block_index_to_grid, m)?)?;
    m.add_function(wrap_pyfunction!(grid_to_block_index, m)?)?;
    m.add_function(wrap_pyfunction!(positive_label_indices, m)?)?;
    m.add_function(wrap_pyfunction!(soft_indicator, m)?)?;
    m.add_function(wrap_pyfunction!(fallback_embed, m)?)?;
    m.add_function(wrap_pyfunction!(global_loss, m)?)?;
    m.add_function(wrap_pyfunction!(local_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add("ARCHETYPES", ["slab-table", "vertical-pole", "ball", "pole-on-slab"])?;
    Ok(())
}
