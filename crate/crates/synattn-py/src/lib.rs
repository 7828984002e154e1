//! Python bindings: parsing, tokenization, tree algebra, and the
//! model's train/eval entry points.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use synattn::conllu;
use synattn::deptree::{distance_matrix, mask_from_distance, DepGraph};
use synattn::model::{init_params, ModelConfig};
use synattn::numcore::{ParamSet, Tape};
use synattn::train::{self, SequenceFeatures, TrainConfig};

fn val_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// One dependency-parsed sentence.
#[pyclass(name = "Sentence")]
#[derive(Clone)]
struct PySentence {
    inner: conllu::ParsedSentence,
}

#[pymethods]
impl PySentence {
    #[getter]
    fn words(&self) -> Vec<String> {
        self.inner.words.clone()
    }

    #[getter]
    fn upos(&self) -> Vec<&'static str> {
        self.inner.upos.iter().map(|t| t.name()).collect()
    }

    /// 0-based head index per word, None for the root.
    #[getter]
    fn heads(&self) -> Vec<Option<usize>> {
        self.inner.heads.clone()
    }

    #[getter]
    fn deprels(&self) -> Vec<String> {
        self.inner.deprels.clone()
    }

    #[getter]
    fn sent_id(&self) -> String {
        self.inner.sentence_id.clone()
    }

    /// `# key = value` metadata lines, in file order.
    #[getter]
    fn meta(&self) -> Vec<(String, String)> {
        self.inner.meta.clone()
    }

    fn root(&self) -> usize {
        self.inner.root()
    }

    fn to_conllu(&self) -> String {
        self.inner.to_conllu()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sentence(sent_id={:?}, words={:?})",
            self.inner.sentence_id, self.inner.words
        )
    }
}

/// Wordpiece vocabulary with the reserved special symbols.
#[pyclass(name = "Vocab")]
#[derive(Clone)]
struct PyVocab {
    inner: conllu::Vocab,
}

#[pymethods]
impl PyVocab {
    /// Build from an iterable of words (adds specials and all
    /// single-character fallback pieces).
    #[staticmethod]
    fn from_corpus(words: Vec<String>) -> PyVocab {
        PyVocab {
            inner: conllu::Vocab::from_corpus(words.iter().map(|w| w.as_str())),
        }
    }

    /// Build from a newline-separated piece list.
    #[staticmethod]
    fn from_lines(text: &str) -> PyVocab {
        PyVocab {
            inner: conllu::Vocab::from_lines(text),
        }
    }

    fn to_lines(&self) -> String {
        self.inner.to_lines()
    }

    fn id(&self, piece: &str) -> Option<usize> {
        self.inner.id(piece)
    }

    fn piece(&self, id: usize) -> PyResult<String> {
        if id >= self.inner.len() {
            return Err(val_err(format!("piece id {} out of range", id)));
        }
        Ok(self.inner.piece(id).to_string())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Hyperparameters of the GAT + encoder + probe stack.
#[pyclass(name = "ModelConfig")]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// Small configuration for desk-scale experiments.
    #[staticmethod]
    fn desk_default() -> PyModelConfig {
        PyModelConfig {
            inner: ModelConfig::desk_default(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<PyModelConfig> {
        let inner: ModelConfig = serde_json::from_str(text).map_err(val_err)?;
        Ok(PyModelConfig { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(val_err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(val_err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers.clone()
    }

    #[setter]
    fn set_n_layers(&mut self, v: usize) {
        self.inner.n_layers = v;
    }
    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads.clone()
    }

    #[setter]
    fn set_n_heads(&mut self, v: usize) {
        self.inner.n_heads = v;
    }
    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model.clone()
    }

    #[setter]
    fn set_d_model(&mut self, v: usize) {
        self.inner.d_model = v;
    }
    #[getter]
    fn d_k(&self) -> usize {
        self.inner.d_k.clone()
    }

    #[setter]
    fn set_d_k(&mut self, v: usize) {
        self.inner.d_k = v;
    }
    #[getter]
    fn d_v(&self) -> usize {
        self.inner.d_v.clone()
    }

    #[setter]
    fn set_d_v(&mut self, v: usize) {
        self.inner.d_v = v;
    }
    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size.clone()
    }

    #[setter]
    fn set_vocab_size(&mut self, v: usize) {
        self.inner.vocab_size = v;
    }
    #[getter]
    fn gat_layers(&self) -> usize {
        self.inner.gat_layers.clone()
    }

    #[setter]
    fn set_gat_layers(&mut self, v: usize) {
        self.inner.gat_layers = v;
    }
    #[getter]
    fn gat_heads(&self) -> usize {
        self.inner.gat_heads.clone()
    }

    #[setter]
    fn set_gat_heads(&mut self, v: usize) {
        self.inner.gat_heads = v;
    }
    #[getter]
    fn d_g(&self) -> usize {
        self.inner.d_g.clone()
    }

    #[setter]
    fn set_d_g(&mut self, v: usize) {
        self.inner.d_g = v;
    }
    #[getter]
    fn delta(&self) -> u32 {
        self.inner.delta.clone()
    }

    #[setter]
    fn set_delta(&mut self, v: u32) {
        self.inner.delta = v;
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha.clone()
    }

    #[setter]
    fn set_alpha(&mut self, v: f64) {
        self.inner.alpha = v;
    }
    #[getter]
    fn syntax_layers(&self) -> Vec<usize> {
        self.inner.syntax_layers.clone()
    }

    #[setter]
    fn set_syntax_layers(&mut self, v: Vec<usize>) {
        self.inner.syntax_layers = v;
    }
    #[getter]
    fn syntax_heads(&self) -> Vec<usize> {
        self.inner.syntax_heads.clone()
    }

    #[setter]
    fn set_syntax_heads(&mut self, v: Vec<usize>) {
        self.inner.syntax_heads = v;
    }
    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len.clone()
    }

    #[setter]
    fn set_max_len(&mut self, v: usize) {
        self.inner.max_len = v;
    }
    #[getter]
    fn n_labels(&self) -> usize {
        self.inner.n_labels.clone()
    }

    #[setter]
    fn set_n_labels(&mut self, v: usize) {
        self.inner.n_labels = v;
    }
    #[getter]
    fn probe_rank(&self) -> Option<usize> {
        self.inner.probe_rank.clone()
    }

    #[setter]
    fn set_probe_rank(&mut self, v: Option<usize>) {
        self.inner.probe_rank = v;
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed.clone()
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", serde_json::to_string(&self.inner).unwrap())
    }
}

/// Optimization settings for one training run.
#[pyclass(name = "TrainConfig")]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}



#[pymethods]
impl PyTrainConfig {
    #[staticmethod]
    fn pretrain_default() -> PyTrainConfig {
        PyTrainConfig {
            inner: TrainConfig::pretrain_default(),
        }
    }

    #[staticmethod]
    fn finetune_default() -> PyTrainConfig {
        PyTrainConfig {
            inner: TrainConfig::finetune_default(),
        }
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr.clone()
    }

    #[setter]
    fn set_lr(&mut self, v: f64) {
        self.inner.lr = v;
    }
    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size.clone()
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.batch_size = v;
    }
    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps.clone()
    }

    #[setter]
    fn set_steps(&mut self, v: usize) {
        self.inner.steps = v;
    }
    #[getter]
    fn eval_every(&self) -> usize {
        self.inner.eval_every.clone()
    }

    #[setter]
    fn set_eval_every(&mut self, v: usize) {
        self.inner.eval_every = v;
    }
    #[getter]
    fn stop_grad_embed(&self) -> bool {
        self.inner.stop_grad_embed.clone()
    }

    #[setter]
    fn set_stop_grad_embed(&mut self, v: bool) {
        self.inner.stop_grad_embed = v;
    }
    #[getter]
    fn words_only_probe(&self) -> bool {
        self.inner.words_only_probe.clone()
    }

    #[setter]
    fn set_words_only_probe(&mut self, v: bool) {
        self.inner.words_only_probe = v;
    }
    #[getter]
    fn clip_norm(&self) -> Option<f64> {
        self.inner.clip_norm.clone()
    }

    #[setter]
    fn set_clip_norm(&mut self, v: Option<f64>) {
        self.inner.clip_norm = v;
    }
}

fn featurize_all(
    sentences: &[PySentence],
    vocab: &PyVocab,
) -> PyResult<Vec<SequenceFeatures>> {
    sentences
        .iter()
        .map(|s| train::featurize(&s.inner, &vocab.inner).map_err(val_err))
        .collect()
}

/// A config plus one parameter set; the result of training or of
/// loading a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    cfg: ModelConfig,
    params: ParamSet,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized parameters for a config.
    #[new]
    fn new(cfg: &PyModelConfig) -> PyResult<PyModel> {
        let params = init_params(&cfg.inner).map_err(val_err)?;
        Ok(PyModel {
            cfg: cfg.inner.clone(),
            params,
        })
    }

    /// Load parameters from a `SYNATTN1` checkpoint.
    #[staticmethod]
    fn load(path: &str, cfg: &PyModelConfig) -> PyResult<PyModel> {
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let params = ParamSet::read_from(&mut r).map_err(io_err)?;
        Ok(PyModel {
            cfg: cfg.inner.clone(),
            params,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        self.params.write_to(&mut w).map_err(io_err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.cfg.clone(),
        }
    }

    /// Total scalar parameter count.
    fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().map(|n| n.to_string()).collect()
    }

    fn parameter(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| val_err(format!("unknown parameter {:?}", name)))?;
        Ok(tensor_rows(t))
    }

    /// Final encoder hidden states for one sentence (n_positions rows
    /// of d_model values).
    fn encode(&self, sentence: &PySentence, vocab: &PyVocab) -> PyResult<Vec<Vec<f64>>> {
        let (tape, state) = self.forward(sentence, vocab)?;
        Ok(tensor_rows(tape.value(state.final_h())))
    }

    /// Final GAT output for one sentence (n_positions rows of k * d_g
    /// values).
    fn gat_output(&self, sentence: &PySentence, vocab: &PyVocab) -> PyResult<Vec<Vec<f64>>> {
        let (tape, state) = self.forward(sentence, vocab)?;
        let g = state.g.expect("forward ran with want_gat");
        Ok(tensor_rows(tape.value(g)))
    }

    /// Label distribution from the [CLS] position.
    fn classify(&self, sentence: &PySentence, vocab: &PyVocab) -> PyResult<Vec<f64>> {
        let (mut tape, state) = self.forward(sentence, vocab)?;
        let vars = self.params.register(&mut tape);
        let probs =
            synattn::model::classify(&mut tape, &vars, state.final_h()).map_err(val_err)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Structural-probe scores for one sentence: dict with `uuas`,
    /// `root_correct`, and `spearman`.
    fn probe_metrics(
        &self,
        py: Python<'_>,
        sentence: &PySentence,
        vocab: &PyVocab,
        words_only: bool,
    ) -> PyResult<PyObject> {
        let feats = featurize_all(std::slice::from_ref(sentence), vocab)?;
        let metrics =
            train::eval_probe(&self.cfg, &self.params, &feats, words_only).map_err(val_err)?;
        let (_, m) = &metrics[0];
        let d = pyo3::types::PyDict::new_bound(py);
        d.set_item("uuas", m.uuas)?;
        d.set_item("root_correct", m.root_correct)?;
        d.set_item("spearman", m.spearman)?;
        Ok(d.into())
    }

    /// Classification accuracy over labeled sentences.
    fn accuracy(&self, sentences: Vec<PySentence>, vocab: &PyVocab) -> PyResult<f64> {
        let feats = featurize_all(&sentences, vocab)?;
        train::evaluate_accuracy(&self.cfg, &self.params, &feats, &vocab.inner).map_err(val_err)
    }
}

impl PyModel {
    fn forward(
        &self,
        sentence: &PySentence,
        vocab: &PyVocab,
    ) -> PyResult<(Tape, synattn::model::EncoderState)> {
        let f = train::featurize(&sentence.inner, &vocab.inner).map_err(val_err)?;
        let n = f.n_positions();
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape);
        let input = synattn::model::SequenceInput {
            token_ids: &f.token_ids,
            position_ids: &(0..n).collect::<Vec<_>>(),
            upos_ids: &f.upos_ids,
            dep_mask: &mask_from_distance(&f.dist, self.cfg.delta),
            pad_mask: &synattn::deptree::pad_only_mask(n, n),
        };
        let state = synattn::model::encoder_forward(&mut tape, &vars, &self.cfg, &input, true)
            .map_err(val_err)?;
        Ok((tape, state))
    }
}

fn tensor_rows(t: &synattn::numcore::Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r)
        .map(|i| t.data()[i * c..(i + 1) * c].to_vec())
        .collect()
}

/// Parse a CoNLL-U document into sentences.
#[pyfunction]
fn parse_conllu(text: &str) -> PyResult<Vec<PySentence>> {
    Ok(conllu::parse_conllu(text)
        .map_err(val_err)?
        .into_iter()
        .map(|inner| PySentence { inner })
        .collect())
}

/// Greedy longest-match wordpiece segmentation.
#[pyfunction]
fn tokenize(words: Vec<String>, vocab: &PyVocab) -> PyResult<Vec<String>> {
    Ok(conllu::wordpiece_tokenize(&words, &vocab.inner)
        .map_err(val_err)?
        .pieces)
}

/// Word-level pairwise tree distances of a sentence.
#[pyfunction]
fn tree_distances(sentence: &PySentence) -> Vec<Vec<u32>> {
    let g = DepGraph::from_words(&sentence.inner);
    let d = distance_matrix(&g);
    let n = sentence.inner.len();
    (0..n).map(|i| (0..n).map(|j| d.get(i, j)).collect()).collect()
}

/// Word-level delta-mask: 0.0 where tree distance <= delta, -inf
/// elsewhere.
#[pyfunction]
fn attention_mask(sentence: &PySentence, delta: u32) -> Vec<Vec<f64>> {
    let g = DepGraph::from_words(&sentence.inner);
    let m = mask_from_distance(&distance_matrix(&g), delta);
    let n = m.n;
    (0..n).map(|i| m.m[i * n..(i + 1) * n].to_vec()).collect()
}

/// Synthetic unlabeled tree corpus, as CoNLL-U text.
#[pyfunction]
fn make_tree_corpus(seed: u64, size: usize, max_words: usize) -> String {
    train::make_tree_corpus(seed, size, max_words)
}

/// Synthetic labeled structure-classification task, as CoNLL-U text.
#[pyfunction]
fn make_structure_task(seed: u64, size: usize) -> String {
    train::make_structure_task(seed, size)
}

/// Pre-train the GAT + probe on unlabeled trees. Returns the trained
/// model and the metric log as JSON lines.
#[pyfunction]
fn pretrain_gat(
    sentences: Vec<PySentence>,
    vocab: &PyVocab,
    cfg: &PyModelConfig,
    tcfg: &PyTrainConfig,
) -> PyResult<(PyModel, String)> {
    let inner: Vec<_> = sentences.into_iter().map(|s| s.inner).collect();
    let (trainer, logs) =
        train::pretrain_gat(&inner, &vocab.inner, cfg.inner.clone(), tcfg.inner.clone())
            .map_err(val_err)?;
    Ok((
        PyModel {
            cfg: trainer.cfg,
            params: trainer.params,
        },
        train::logs_to_jsonl(&logs),
    ))
}

/// Jointly fine-tune the full model on labeled sentences, optionally
/// warm-starting the GAT from a pre-trained model.
#[pyfunction]
#[pyo3(signature = (sentences, vocab, cfg, tcfg, gat_model=None))]
fn finetune(
    sentences: Vec<PySentence>,
    vocab: &PyVocab,
    cfg: &PyModelConfig,
    tcfg: &PyTrainConfig,
    gat_model: Option<&PyModel>,
) -> PyResult<(PyModel, String)> {
    let inner: Vec<_> = sentences.into_iter().map(|s| s.inner).collect();
    let (trainer, logs) = train::finetune(
        &inner,
        &vocab.inner,
        cfg.inner.clone(),
        tcfg.inner.clone(),
        gat_model.map(|m| &m.params),
    )
    .map_err(val_err)?;
    Ok((
        PyModel {
            cfg: trainer.cfg,
            params: trainer.params,
        },
        train::logs_to_jsonl(&logs),
    ))
}

/// Finite-difference check of the joint loss gradient; returns the
/// worst max relative error across parameters.
#[pyfunction]
fn grad_check(
    sentences: Vec<PySentence>,
    vocab: &PyVocab,
    cfg: &PyModelConfig,
    eps: f64,
) -> PyResult<f64> {
    let inner: Vec<_> = sentences.into_iter().map(|s| s.inner).collect();
    train::full_model_grad_check(&cfg.inner, &inner, &vocab.inner, eps).map_err(val_err)
}

#[pymodule]
fn synattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySentence>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_conllu, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(tree_distances, m)?)?;
    m.add_function(wrap_pyfunction!(attention_mask, m)?)?;
    m.add_function(wrap_pyfunction!(make_tree_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(make_structure_task, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_gat, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
