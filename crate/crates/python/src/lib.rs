//! Python bindings for keystroke features, embedding, ranking and synthesis.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;

use keytrace::embedding::EmbeddingVector;
use keytrace::evaluation::{compute_cmc, queries_from_gallery};
use keytrace::features::{extract_features, featurize, DEFAULT_SEQUENCE_LEN};
use keytrace::gallery::{self, import_embeddings, ProfileEmbeddings};
use keytrace::ingestion::{KeyEvent, KeystrokeSequence, ProfileMeta};
use keytrace::model::{embed_all, load_weights, ModelWeights};
use keytrace::synth::{default_sentence_pool, generate_corpus, sample_population};

/// `(keycode, press_ms, release_ms)` as passed from Python.
type Event = (u8, i64, i64);

/// Verified and anonymous embedding sets of one user.
type ProfileSets = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sequence(events: &[Event]) -> PyResult<KeystrokeSequence> {
    let events = events
        .iter()
        .map(|&(k, p, r)| KeyEvent::new(k, p, r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_error)?;
    KeystrokeSequence::new("", "", events).map_err(value_error)
}

fn vectors(rows: Vec<Vec<f64>>) -> PyResult<Vec<EmbeddingVector>> {
    rows.into_iter()
        .map(|r| {
            EmbeddingVector::new(r).ok_or_else(|| value_error("empty or non-finite embedding"))
        })
        .collect()
}

/// Raw timing features (seconds) as a dict of lists.
#[pyfunction]
fn features(events: Vec<Event>) -> PyResult<BTreeMap<&'static str, Vec<f64>>> {
    let f = extract_features(&sequence(&events)?);
    Ok(BTreeMap::from([
        ("keycode", f.keycodes),
        ("hold", f.hold),
        ("inter_key", f.inter_key),
        ("press_latency", f.press_latency),
        ("release_latency", f.release_latency),
    ]))
}

/// Normalized fixed-length matrix and its validity mask.
#[pyfunction]
#[pyo3(signature = (events, length = DEFAULT_SEQUENCE_LEN))]
fn feature_matrix(events: Vec<Event>, length: usize) -> PyResult<(Vec<Vec<f64>>, Vec<bool>)> {
    let x = featurize(&sequence(&events)?, length);
    Ok((
        x.rows().iter().map(|r| r.to_vec()).collect(),
        x.mask().to_vec(),
    ))
}

#[pyfunction]
fn profile_distance(verified: Vec<Vec<f64>>, anonymous: Vec<Vec<f64>>) -> PyResult<f64> {
    gallery::profile_distance(&vectors(verified)?, &vectors(anonymous)?).map_err(value_error)
}

/// Trained network loaded from a weights file.
#[pyclass]
struct Model {
    weights: ModelWeights,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            weights: load_weights(&path).map_err(value_error)?,
        })
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.weights.config.embedding_dim()
    }

    /// One embedding per sequence of events.
    fn embed(&self, sequences: Vec<Vec<Event>>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.weights.config.sequence_len;
        let xs = sequences
            .iter()
            .map(|s| Ok(featurize(&sequence(s)?, m)))
            .collect::<PyResult<Vec<_>>>()?;
        let out = embed_all(&self.weights, &xs).map_err(value_error)?;
        Ok(out.into_iter().map(EmbeddingVector::into_inner).collect())
    }
}

/// Enrolled profiles ranked against anonymous embedding sets.
#[pyclass]
struct Gallery {
    inner: keytrace::gallery::Gallery,
}

#[pymethods]
impl Gallery {
    #[new]
    #[pyo3(signature = (profiles, attributes = None))]
    fn new(
        profiles: BTreeMap<String, ProfileSets>,
        attributes: Option<BTreeMap<String, BTreeMap<String, String>>>,
    ) -> PyResult<Self> {
        let mut attributes = attributes.unwrap_or_default();
        let profiles = profiles
            .into_iter()
            .map(|(user, (verified, anonymous))| {
                let meta = ProfileMeta {
                    attributes: attributes.remove(&user).unwrap_or_default(),
                    user_id: user,
                };
                Ok(ProfileEmbeddings::new(
                    meta,
                    vectors(verified)?,
                    vectors(anonymous)?,
                ))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let inner = keytrace::gallery::Gallery::new(profiles).map_err(value_error)?;
        Ok(Self { inner })
    }

    /// Reads an embeddings CSV written by `keytrace enroll`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let file = File::open(&path).map_err(value_error)?;
        let inner = import_embeddings(BufReader::new(file)).map_err(value_error)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn user_ids(&self) -> Vec<String> {
        self.inner.user_ids().map(str::to_string).collect()
    }

    /// Anonymous set stored for an enrolled user.
    fn anonymous(&self, user_id: &str) -> PyResult<Vec<Vec<f64>>> {
        let p = self
            .inner
            .get(user_id)
            .ok_or_else(|| PyKeyError::new_err(user_id.to_string()))?;
        Ok(p.anonymous.iter().map(|e| e.as_slice().to_vec()).collect())
    }

    /// `(user_id, distance)` pairs, nearest first.
    fn rank(&self, query: Vec<Vec<f64>>) -> PyResult<Vec<(String, f64)>> {
        let ranked = self.inner.rank(&vectors(query)?).map_err(value_error)?;
        Ok(ranked
            .entries
            .into_iter()
            .map(|e| (e.user_id, e.distance))
            .collect())
    }

    fn identify(&self, query: Vec<Vec<f64>>) -> PyResult<String> {
        self.inner.identify(&vectors(query)?).map_err(value_error)
    }

    /// Profiles whose attribute equals `value`.
    fn prescreen(&self, attribute: &str, value: &str) -> PyResult<Self> {
        let inner = self
            .inner
            .prescreen(attribute, value)
            .map_err(value_error)?;
        Ok(Self { inner })
    }

    /// Identification rate at ranks 1..N using each profile's own anonymous set.
    fn cmc(&self) -> PyResult<Vec<f64>> {
        let curve =
            compute_cmc(&self.inner, &queries_from_gallery(&self.inner)).map_err(value_error)?;
        Ok(curve.values().to_vec())
    }
}

/// Synthetic sessions as `(user_id, session_id, events)` plus each user's attributes.
#[pyfunction]
#[pyo3(signature = (users, seed, separability = 1.0, sentences_per_user = 15))]
#[allow(clippy::type_complexity)]
fn synthesize(
    users: usize,
    seed: u64,
    separability: f64,
    sentences_per_user: usize,
) -> PyResult<(
    Vec<(String, String, Vec<Event>)>,
    BTreeMap<String, BTreeMap<String, String>>,
)> {
    let population = sample_population(users, separability, &[], seed).map_err(value_error)?;
    let corpus = generate_corpus(
        &population,
        sentences_per_user,
        &default_sentence_pool(),
        seed,
    )
    .map_err(value_error)?;
    let sessions = corpus
        .sequences
        .iter()
        .map(|s| {
            let events = s
                .events()
                .iter()
                .map(|e| (e.keycode, e.press_ms, e.release_ms))
                .collect();
            (s.user_id().to_string(), s.session_id().to_string(), events)
        })
        .collect();
    let attributes = corpus
        .profiles
        .into_iter()
        .map(|p| (p.user_id, p.attributes))
        .collect();
    Ok((sessions, attributes))
}

#[pymodule]
fn keytrace_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(features, m)?)?;
    m.add_function(wrap_pyfunction!(feature_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(profile_distance, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_class::<Model>()?;
    m.add_class::<Gallery>()?;
    Ok(())
}
