//! GAT pre-training, joint fine-tuning, synthetic task generation, and
//! the Adam optimizer.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::{ConlluError, ParsedSentence, UposTag, Vocab};
use crate::deptree::{
    build_position_graph, depth_vector, distance_matrix, mask_from_distance, pad_only_mask,
    AttentionMask, DepGraph, DepthVector, DistanceMatrix, PositionKind, TreeError,
};
use crate::model::{
    classification_loss, classify, encoder_stack, gat_embed, gat_forward, init_params, mask_input,
    ModelConfig, ModelError,
};
use crate::numcore::params::{read_u64, CheckpointError};
use crate::numcore::{NumError, ParamSet, ParamVars, Tape, Tensor, VarId};
use crate::probe::{
    depth_loss, depth_weights, distance_loss, gold_depths, gold_distances, pair_weights,
    predicted_sq_depths, predicted_sq_distances, probe_metrics, ProbeError, ProbeMetrics,
};
use crate::conllu::wordpiece_tokenize;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Conllu(#[from] ConlluError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sentence {sent_id}: {n} positions exceed max_len {max_len}")]
    SequenceTooLong {
        sent_id: String,
        n: usize,
        max_len: usize,
    },
    #[error("sentence {sent_id}: label {label} out of range ({n_labels} labels)")]
    LabelOutOfRange {
        sent_id: String,
        label: usize,
        n_labels: usize,
    },
    #[error("sentence {sent_id}: label missing or not an integer")]
    MissingLabel { sent_id: String },
    #[error("checkpoint parameter {name} has shape {got:?}, expected {want:?}")]
    CheckpointShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

/// Training-loop hyperparameters (the architectural ones live in
/// ModelConfig).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub steps: usize,
    pub eval_every: usize,
    /// Detach GAT input embeddings so probe losses stop at the GAT.
    pub stop_grad_embed: bool,
    /// Restrict probe losses and metrics to word positions, excluding
    /// [CLS]/[SEP] and continuation pieces.
    pub words_only_probe: bool,
    /// Rescale gradients whose global l2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Defaults for GAT pre-training.
    pub fn pretrain_default() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            batch_size: 4,
            steps: 2000,
            eval_every: 100,
            stop_grad_embed: false,
            words_only_probe: false,
            clip_norm: None,
        }
    }

    /// Defaults for joint fine-tuning.
    pub fn finetune_default() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            steps: 500,
            eval_every: 50,
            stop_grad_embed: false,
            words_only_probe: false,
            clip_norm: None,
        }
    }
}

/// Everything the model needs from one sentence, precomputed.
#[derive(Debug, Clone)]
pub struct SequenceFeatures {
    pub sentence: ParsedSentence,
    pub token_ids: Vec<usize>,
    pub upos_ids: Vec<usize>,
    pub graph: DepGraph,
    pub dist: DistanceMatrix,
    pub depths: DepthVector,
    pub label: Option<usize>,
}

impl SequenceFeatures {
    pub fn n_positions(&self) -> usize {
        self.token_ids.len()
    }

    pub fn sent_id(&self) -> &str {
        &self.sentence.sentence_id
    }

    /// Indices the probe supervises: all positions, or word head/cont
    /// positions... word positions only when restricted.
    pub fn probe_positions(&self, words_only: bool) -> Vec<usize> {
        if words_only {
            self.graph
                .kinds
                .iter()
                .enumerate()
                .filter(|(_, k)| {
                    matches!(k, PositionKind::WordHead(_) | PositionKind::WordCont(_))
                })
                .map(|(i, _)| i)
                .collect()
        } else {
            (0..self.n_positions()).collect()
        }
    }
}

/// Tokenize, run the tree surgery, and precompute distances and depths.
pub fn featurize(sentence: &ParsedSentence, vocab: &Vocab) -> Result<SequenceFeatures, TrainError> {
    let align = wordpiece_tokenize(&sentence.words, vocab)?;
    let graph = build_position_graph(sentence, &align)?;
    let mut token_ids = Vec::with_capacity(graph.n_positions());
    let mut upos_ids = Vec::with_capacity(graph.n_positions());
    let mut piece_iter = align.pieces.iter();
    for kind in &graph.kinds {
        match kind {
            PositionKind::Cls => {
                token_ids.push(vocab.cls_id());
                upos_ids.push(UposTag::Special.id());
            }
            PositionKind::Sep => {
                token_ids.push(vocab.sep_id());
                upos_ids.push(UposTag::Special.id());
            }
            PositionKind::WordHead(w) | PositionKind::WordCont(w) => {
                let piece = piece_iter.next().expect("piece per word position");
                token_ids.push(vocab.id(piece).unwrap_or_else(|| vocab.unk_id()));
                upos_ids.push(sentence.upos[*w].id());
            }
        }
    }
    let dist = distance_matrix(&graph);
    let depths = depth_vector(&graph);
    let label = match sentence.meta_value("label") {
        Some(v) => Some(v.parse::<usize>().map_err(|_| TrainError::MissingLabel {
            sent_id: sentence.sentence_id.clone(),
        })?),
        None => None,
    };
    Ok(SequenceFeatures {
        sentence: sentence.clone(),
        token_ids,
        upos_ids,
        graph,
        dist,
        depths,
        label,
    })
}

/// One padded sequence inside a batch.
#[derive(Debug, Clone)]
pub struct BatchSeq {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub upos_ids: Vec<usize>,
    pub len: usize,
    pub dep_mask: AttentionMask,
    pub pad_mask: AttentionMask,
    pub gold_dist: Tensor,
    pub gold_depth: Tensor,
    pub pair_w: Tensor,
    pub depth_w: Tensor,
    pub label: Option<usize>,
    pub sent_id: String,
}

/// A padded batch; sequences share n_max.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n_max: usize,
    pub seqs: Vec<BatchSeq>,
}

impl Batch {
    pub fn build(
        features: &[&SequenceFeatures],
        cfg: &ModelConfig,
        vocab: &Vocab,
        words_only: bool,
    ) -> Result<Batch, TrainError> {
        assert!(!features.is_empty());
        let n_max = features.iter().map(|f| f.n_positions()).max().unwrap();
        let mut seqs = Vec::with_capacity(features.len());
        for f in features {
            let n = f.n_positions();
            if n > cfg.max_len {
                return Err(TrainError::SequenceTooLong {
                    sent_id: f.sent_id().to_string(),
                    n,
                    max_len: cfg.max_len,
                });
            }
            if let Some(label) = f.label {
                if label >= cfg.n_labels {
                    return Err(TrainError::LabelOutOfRange {
                        sent_id: f.sent_id().to_string(),
                        label,
                        n_labels: cfg.n_labels,
                    });
                }
            }
            let mut token_ids = f.token_ids.clone();
            let mut upos_ids = f.upos_ids.clone();
            token_ids.resize(n_max, vocab.pad_id());
            upos_ids.resize(n_max, UposTag::Special.id());
            let position_ids: Vec<usize> = (0..n_max).collect();
            let dep_mask = mask_from_distance(&f.dist, cfg.delta).padded(n_max);
            let pad_mask = pad_only_mask(n, n_max);
            let probe_pos = f.probe_positions(words_only);
            seqs.push(BatchSeq {
                token_ids,
                position_ids,
                upos_ids,
                len: n,
                dep_mask,
                pad_mask,
                gold_dist: gold_distances(&f.dist, n_max),
                gold_depth: gold_depths(&f.depths, n_max),
                pair_w: pair_weights(&probe_pos, n_max),
                depth_w: depth_weights(&probe_pos, n_max),
                label: f.label,
                sent_id: f.sent_id().to_string(),
            });
        }
        Ok(Batch { n_max, seqs })
    }
}

/// Which loss the batch pass minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// L_dist + L_depth only; the encoder never runs.
    GatOnly,
    /// L_task + alpha (L_dist + L_depth).
    Joint,
}

/// Scalar summary of one batch pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct BatchLoss {
    pub total: f64,
    pub l_task: f64,
    pub l_dist: f64,
    pub l_depth: f64,
    pub n_correct: usize,
    pub n_labeled: usize,
}

/// Forward + backward over one batch. Returns the averaged losses and
/// per-parameter gradients in ParamSet order.
pub fn batch_loss_and_grads(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &Batch,
    mode: LossMode,
    stop_grad_embed: bool,
) -> Result<(BatchLoss, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let (loss_var, stats) = batch_loss_graph(cfg, &vars, &mut tape, batch, mode, stop_grad_embed)?;
    let grads = tape.backward(loss_var)?;
    let grad_vec = vars.collect_grads(&tape, &grads);
    Ok((stats, grad_vec))
}

/// Build the loss graph for a batch on an existing tape.
pub fn batch_loss_graph(
    cfg: &ModelConfig,
    vars: &ParamVars,
    tape: &mut Tape,
    batch: &Batch,
    mode: LossMode,
    stop_grad_embed: bool,
) -> Result<(VarId, BatchLoss), TrainError> {
    let inv_b = 1.0 / batch.seqs.len() as f64;
    let mut total: Option<VarId> = None;
    let mut stats = BatchLoss::default();
    let theta1 = vars.get("probe.theta1");
    let theta2 = vars.get("probe.theta2");
    // With alpha = 0 the probe terms do not contribute to the joint
    // loss, so skip building their subgraphs.
    let want_probe = matches!(mode, LossMode::GatOnly) || cfg.alpha != 0.0;
    for seq in &batch.seqs {
        let mut g0 = gat_embed(tape, vars, &seq.token_ids, &seq.upos_ids)?;
        if stop_grad_embed {
            let detached = tape.value(g0).clone();
            g0 = tape.input(detached);
        }
        let dep_mask = mask_input(tape, &seq.dep_mask);
        let g = gat_forward(tape, vars, cfg, g0, dep_mask)?;
        let probe_losses = if want_probe {
            let l_dist = distance_loss(tape, theta1, g, &seq.gold_dist, &seq.pair_w)?;
            let l_depth = depth_loss(tape, theta2, g, &seq.gold_depth, &seq.depth_w)?;
            stats.l_dist += tape.value(l_dist).item() * inv_b;
            stats.l_depth += tape.value(l_depth).item() * inv_b;
            Some((l_dist, l_depth))
        } else {
            None
        };
        let seq_loss = match mode {
            LossMode::GatOnly => {
                let (l_dist, l_depth) = probe_losses.expect("probe losses in GAT mode");
                tape.add(l_dist, l_depth)?
            }
            LossMode::Joint => {
                let pad_mask = mask_input(tape, &seq.pad_mask);
                let h = encoder_stack(
                    tape,
                    vars,
                    cfg,
                    &seq.token_ids,
                    &seq.position_ids,
                    Some(g),
                    pad_mask,
                )?;
                let h_final = *h.last().unwrap();
                let label = seq.label.ok_or_else(|| TrainError::MissingLabel {
                    sent_id: seq.sent_id.clone(),
                })?;
                let probs = classify(tape, vars, h_final)?;
                let l_task = classification_loss(tape, probs, label, cfg.n_labels)?;
                stats.l_task += tape.value(l_task).item() * inv_b;
                let pv = tape.value(probs);
                let pred = (0..cfg.n_labels)
                    .max_by(|&a, &b| pv.get2(0, a).partial_cmp(&pv.get2(0, b)).unwrap())
                    .unwrap();
                stats.n_labeled += 1;
                if pred == label {
                    stats.n_correct += 1;
                }
                match probe_losses {
                    Some((l_dist, l_depth)) => {
                        let structure = tape.add(l_dist, l_depth)?;
                        let weighted = tape.scale(structure, cfg.alpha);
                        tape.add(l_task, weighted)?
                    }
                    None => l_task,
                }
            }
        };
        let scaled = tape.scale(seq_loss, inv_b);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    let loss_var = total.expect("non-empty batch");
    stats.total = tape.value(loss_var).item();
    Ok((loss_var, stats))
}

/// Adam with linear warmup over the first 10% of steps, then linear
/// decay to zero.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub t: u64,
    /// (name prefix, lr) pairs; first match overrides the base lr.
    pub lr_overrides: Vec<(String, f64)>,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(lr: f64, total_steps: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: (total_steps as u64 / 10).max(1),
            total_steps: total_steps as u64,
            t: 0,
            lr_overrides: Vec::new(),
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    fn lr_at(&self, t: u64) -> f64 {
        if t <= self.warmup_steps {
            return self.lr * t as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let remain = self.total_steps.saturating_sub(t) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.lr * (remain / span).max(0.0)
    }

    fn moment(set: &mut ParamSet, name: &str, shape: &[usize]) -> Tensor {
        match set.get(name) {
            Some(t) => t.clone(),
            None => {
                let z = Tensor::zeros(shape.to_vec());
                set.insert(name, z.clone());
                z
            }
        }
    }

    /// One update over the named parameters. Gradients must be finite.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        names: &[String],
        grads: &[&Tensor],
    ) -> Result<(), TrainError> {
        assert_eq!(names.len(), grads.len());
        for (name, grad) in names.iter().zip(grads) {
            if !grad.all_finite() {
                return Err(NumError::NonFiniteGradient(name.clone()).into());
            }
        }
        self.t += 1;
        let schedule = self.lr_at(self.t) / self.lr;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in names.iter().zip(grads) {
            let base = self
                .lr_overrides
                .iter()
                .find(|(p, _)| name.starts_with(p.as_str()))
                .map(|(_, lr)| *lr)
                .unwrap_or(self.lr);
            let lr_t = base * schedule;
            let mut m = Self::moment(&mut self.m, name, grad.shape());
            let mut v = Self::moment(&mut self.v, name, grad.shape());
            let p = params.get_mut(name).expect("trainable parameter exists");
            for ((pv, (mv, vv)), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(grad.data())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr_t * mhat / (vhat.sqrt() + self.eps);
            }
            self.m.insert(name, m);
            self.v.insert(name, v);
        }
        Ok(())
    }
}

/// One metrics-log line; serialized as a JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub l_task: f64,
    pub l_dist: f64,
    pub l_depth: f64,
    pub accuracy: f64,
}

/// A training run's mutable state; checkpointable mid-run.
pub struct Trainer {
    pub cfg: ModelConfig,
    pub tcfg: TrainConfig,
    pub params: ParamSet,
    pub adam: Adam,
    /// Names of the parameters this run updates.
    pub trainable: Vec<String>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    mode: LossMode,
}

fn trainable_names(params: &ParamSet, prefixes: &[&str]) -> Vec<String> {
    params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|n| n.to_string())
        .collect()
}

impl Trainer {
    pub fn new_pretrain(cfg: ModelConfig, tcfg: TrainConfig) -> Result<Trainer, TrainError> {
        let params = init_params(&cfg)?;
        let trainable = trainable_names(&params, &["embed.token", "gat.", "probe."]);
        let adam = Adam::new(tcfg.lr, tcfg.steps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            tcfg,
            params,
            adam,
            trainable,
            rng,
            step: 0,
            mode: LossMode::GatOnly,
        })
    }

    pub fn new_finetune(
        cfg: ModelConfig,
        tcfg: TrainConfig,
        gat_checkpoint: Option<&ParamSet>,
    ) -> Result<Trainer, TrainError> {
        let mut params = init_params(&cfg)?;
        if let Some(ckpt) = gat_checkpoint {
            load_gat_subset(&mut params, ckpt)?;
        }
        let trainable: Vec<String> = params.names().map(|n| n.to_string()).collect();
        let adam = Adam::new(tcfg.lr, tcfg.steps);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            tcfg,
            params,
            adam,
            trainable,
            rng,
            step: 0,
            mode: LossMode::Joint,
        })
    }

    /// One optimizer step over one batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<BatchLoss, TrainError> {
        let (stats, grads) = batch_loss_and_grads(
            &self.cfg,
            &self.params,
            batch,
            self.mode,
            self.tcfg.stop_grad_embed,
        )?;
        let order: Vec<&str> = self.params.names().collect();
        let name_to_idx: std::collections::BTreeMap<&str, usize> =
            order.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut picked: Vec<Tensor> = self
            .trainable
            .iter()
            .map(|n| grads[name_to_idx[n.as_str()]].clone())
            .collect();
        if let Some(max_norm) = self.tcfg.clip_norm {
            let norm = picked
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                for g in &mut picked {
                    for v in g.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
        let grad_refs: Vec<&Tensor> = picked.iter().collect();
        let names = self.trainable.clone();
        self.adam.step(&mut self.params, &names, &grad_refs)?;
        self.step += 1;
        Ok(stats)
    }

    /// Run the loop to `tcfg.steps`, logging every `eval_every` steps.
    pub fn run(
        &mut self,
        data: &[SequenceFeatures],
        vocab: &Vocab,
    ) -> Result<Vec<StepLog>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut logs = Vec::new();
        let mut window = BatchLoss::default();
        let mut window_batches = 0usize;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut cursor = order.len(); // force reshuffle on first step
        while self.step < self.tcfg.steps as u64 {
            if cursor + self.tcfg.batch_size > order.len() {
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let take = self.tcfg.batch_size.min(order.len());
            let picked: Vec<&SequenceFeatures> =
                order[cursor..cursor + take].iter().map(|&i| &data[i]).collect();
            cursor += take;
            let batch = Batch::build(&picked, &self.cfg, vocab, self.tcfg.words_only_probe)?;
            let stats = self.train_step(&batch)?;
            window.total += stats.total;
            window.l_task += stats.l_task;
            window.l_dist += stats.l_dist;
            window.l_depth += stats.l_depth;
            window.n_correct += stats.n_correct;
            window.n_labeled += stats.n_labeled;
            window_batches += 1;
            if self.step % self.tcfg.eval_every as u64 == 0 || self.step == self.tcfg.steps as u64 {
                let inv = 1.0 / window_batches as f64;
                logs.push(StepLog {
                    step: self.step,
                    l_task: window.l_task * inv,
                    l_dist: window.l_dist * inv,
                    l_depth: window.l_depth * inv,
                    accuracy: if window.n_labeled > 0 {
                        window.n_correct as f64 / window.n_labeled as f64
                    } else {
                        0.0
                    },
                });
                window = BatchLoss::default();
                window_batches = 0;
            }
        }
        Ok(logs)
    }

    /// Serialize params, optimizer moments, step count, and RNG state.
    pub fn save_state(&self, w: &mut impl Write) -> Result<(), TrainError> {
        self.params.write_to(w).map_err(CheckpointError::from)?;
        self.adam.m.write_to(w)?;
        self.adam.v.write_to(w)?;
        w.write_all(&self.step.to_le_bytes()).map_err(CheckpointError::from)?;
        w.write_all(&self.adam.t.to_le_bytes()).map_err(CheckpointError::from)?;
        w.write_all(&self.cfg.seed.to_le_bytes()).map_err(CheckpointError::from)?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())
            .map_err(CheckpointError::from)?;
        Ok(())
    }

    /// Restore a run saved by `save_state`; the same config must be
    /// supplied.
    pub fn load_state(&mut self, r: &mut impl Read) -> Result<(), TrainError> {
        self.params = ParamSet::read_from(r)?;
        self.adam.m = ParamSet::read_from(r)?;
        self.adam.v = ParamSet::read_from(r)?;
        self.step = read_u64(r)?;
        self.adam.t = read_u64(r)?;
        let seed = read_u64(r)?;
        let mut pos_bytes = [0u8; 16];
        r.read_exact(&mut pos_bytes).map_err(CheckpointError::from)?;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.rng.set_word_pos(u128::from_le_bytes(pos_bytes));
        Ok(())
    }
}

/// Copy GAT, probe, and shared-embedding parameters from a checkpoint
/// into a freshly initialized set.
pub fn load_gat_subset(params: &mut ParamSet, ckpt: &ParamSet) -> Result<(), TrainError> {
    let names: Vec<String> = params
        .names()
        .filter(|n| {
            n.starts_with("gat.") || n.starts_with("probe.") || *n == "embed.token"
        })
        .map(|n| n.to_string())
        .collect();
    for name in names {
        if let Some(src) = ckpt.get(&name) {
            let dst = params.get_mut(&name).expect("name from params");
            if dst.shape() != src.shape() {
                return Err(TrainError::CheckpointShapeMismatch {
                    name,
                    got: src.shape().to_vec(),
                    want: dst.shape().to_vec(),
                });
            }
            *dst = src.clone();
        }
    }
    Ok(())
}

/// Pre-train GAT + probe + shared embeddings on tree-structure
/// prediction over a parsed corpus.
pub fn pretrain_gat(
    sentences: &[ParsedSentence],
    vocab: &Vocab,
    cfg: ModelConfig,
    tcfg: TrainConfig,
) -> Result<(Trainer, Vec<StepLog>), TrainError> {
    if sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let data: Vec<SequenceFeatures> = sentences
        .iter()
        .map(|s| featurize(s, vocab))
        .collect::<Result<_, _>>()?;
    let mut trainer = Trainer::new_pretrain(cfg, tcfg)?;
    let logs = trainer.run(&data, vocab)?;
    Ok((trainer, logs))
}

/// Jointly fine-tune the full model on a labeled corpus, optionally
/// starting the GAT from a pre-trained checkpoint.
pub fn finetune(
    sentences: &[ParsedSentence],
    vocab: &Vocab,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    gat_checkpoint: Option<&ParamSet>,
) -> Result<(Trainer, Vec<StepLog>), TrainError> {
    if sentences.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let data: Vec<SequenceFeatures> = sentences
        .iter()
        .map(|s| featurize(s, vocab))
        .collect::<Result<_, _>>()?;
    let mut trainer = Trainer::new_finetune(cfg, tcfg, gat_checkpoint)?;
    let logs = trainer.run(&data, vocab)?;
    Ok((trainer, logs))
}

/// Classification accuracy of the current parameters over a dataset.
pub fn evaluate_accuracy(
    cfg: &ModelConfig,
    params: &ParamSet,
    data: &[SequenceFeatures],
    vocab: &Vocab,
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for f in data {
        let batch = Batch::build(&[f], cfg, vocab, false)?;
        let seq = &batch.seqs[0];
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let g0 = gat_embed(&mut tape, &vars, &seq.token_ids, &seq.upos_ids)?;
        let dep_mask = mask_input(&mut tape, &seq.dep_mask);
        let g = gat_forward(&mut tape, &vars, cfg, g0, dep_mask)?;
        let pad_mask = mask_input(&mut tape, &seq.pad_mask);
        let h = encoder_stack(
            &mut tape,
            &vars,
            cfg,
            &seq.token_ids,
            &seq.position_ids,
            Some(g),
            pad_mask,
        )?;
        let probs = classify(&mut tape, &vars, *h.last().unwrap())?;
        let pv = tape.value(probs);
        let pred = (0..cfg.n_labels)
            .max_by(|&a, &b| pv.get2(0, a).partial_cmp(&pv.get2(0, b)).unwrap())
            .unwrap();
        if let Some(label) = f.label {
            total += 1;
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

/// Probe evaluation: decode trees from predicted distances, score
/// against gold.
pub fn eval_probe(
    cfg: &ModelConfig,
    params: &ParamSet,
    data: &[SequenceFeatures],
    words_only: bool,
) -> Result<Vec<(String, ProbeMetrics)>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    for f in data {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let g0 = gat_embed(&mut tape, &vars, &f.token_ids, &f.upos_ids)?;
        let dep_mask = mask_input(&mut tape, &mask_from_distance(&f.dist, cfg.delta));
        let g = gat_forward(&mut tape, &vars, cfg, g0, dep_mask)?;
        let pred_d = predicted_sq_distances(&mut tape, vars.get("probe.theta1"), g)?;
        let pred_h = predicted_sq_depths(&mut tape, vars.get("probe.theta2"), g)?;
        let n = f.n_positions();
        let (graph, dist, sq_d, sq_h) = if words_only {
            let positions = f.probe_positions(true);
            let wg = sub_graph(&f.graph, &positions);
            let wd = distance_matrix(&wg);
            let m = positions.len();
            let mut sq_d = vec![0.0; m * m];
            for (a, &i) in positions.iter().enumerate() {
                for (b, &j) in positions.iter().enumerate() {
                    sq_d[a * m + b] = tape.value(pred_d).get2(i, j);
                }
            }
            let sq_h: Vec<f64> = positions
                .iter()
                .map(|&i| tape.value(pred_h).get2(i, 0))
                .collect();
            (wg, wd, sq_d, sq_h)
        } else {
            let sq_d = tape.value(pred_d).data().to_vec();
            let sq_h: Vec<f64> = (0..n).map(|i| tape.value(pred_h).get2(i, 0)).collect();
            (f.graph.clone(), f.dist.clone(), sq_d, sq_h)
        };
        let metrics = probe_metrics(&sq_d, &sq_h, &graph, &dist);
        out.push((f.sent_id().to_string(), metrics));
    }
    Ok(out)
}

/// Restrict a position graph to a subset of positions, reconnecting
/// children of dropped positions to their nearest kept ancestor.
fn sub_graph(g: &DepGraph, keep: &[usize]) -> DepGraph {
    let mut remap = vec![usize::MAX; g.n_positions()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let parent = keep
        .iter()
        .map(|&old| {
            let mut cur = g.parent[old];
            while let Some(p) = cur {
                if remap[p] != usize::MAX {
                    return Some(remap[p]);
                }
                cur = g.parent[p];
            }
            None
        })
        .collect();
    DepGraph {
        parent,
        kinds: keep.iter().map(|&old| g.kinds[old]).collect(),
    }
}

/// Finite-difference check of the full joint loss, parameter by
/// parameter. Returns the worst max relative error across parameters.
pub fn full_model_grad_check(
    cfg: &ModelConfig,
    sentences: &[ParsedSentence],
    vocab: &Vocab,
    eps: f64,
) -> Result<f64, TrainError> {
    let params = init_params(cfg)?;
    let feats: Vec<SequenceFeatures> = sentences
        .iter()
        .map(|s| featurize(s, vocab))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&SequenceFeatures> = feats.iter().collect();
    let batch = Batch::build(&refs, cfg, vocab, false)?;
    let names: Vec<String> = params.names().map(|n| n.to_string()).collect();
    let mut worst = 0.0f64;
    for name in &names {
        let err = crate::numcore::grad_check(
            |tape, xv| {
                let vars = params.register_with(tape, name, xv);
                let (loss, _) =
                    batch_loss_graph(cfg, &vars, tape, &batch, LossMode::Joint, false).map_err(
                        |e| match e {
                            TrainError::Num(n) => n,
                            other => panic!("{}", other),
                        },
                    )?;
                Ok(loss)
            },
            params.get(name).expect("named parameter"),
            eps,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

const TASK_WORD_POOL: usize = 30;
const FILLER_TAGS: [UposTag; 6] = [
    UposTag::Verb,
    UposTag::Adj,
    UposTag::Det,
    UposTag::Adv,
    UposTag::Pron,
    UposTag::Adp,
];

fn random_parents(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    // Random attachment over a shuffled order keeps depths modest.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut parent = vec![None; n];
    for k in 1..n {
        let p = order[rng.gen_range(0..k)];
        parent[order[k]] = Some(p);
    }
    parent
}

fn tree_to_sentence(
    parent: &[Option<usize>],
    words: Vec<String>,
    upos: Vec<UposTag>,
    sent_id: String,
    meta: Vec<(String, String)>,
) -> ParsedSentence {
    let deprels = parent
        .iter()
        .map(|p| if p.is_none() { "root" } else { "dep" }.to_string())
        .collect();
    ParsedSentence {
        words,
        upos,
        heads: parent.to_vec(),
        deprels,
        sentence_id: sent_id,
        meta,
    }
}

/// Synthetic structure-dependent classification corpus: label 1 iff the
/// unique NOUN sits at even tree depth. Balanced exactly (odd sizes get
/// the extra example in class 1). Deterministic in the seed.
pub fn make_structure_task(seed: u64, size: usize) -> String {
    assert!(size >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want_ones = size / 2 + size % 2;
    let mut counts = [0usize; 2]; // [zeros, ones]
    let targets = [size - want_ones, want_ones];
    let mut out = String::new();
    let mut emitted = 0usize;
    while emitted < size {
        let n = rng.gen_range(2..=7);
        let parent = random_parents(&mut rng, n);
        let noun_pos = rng.gen_range(0..n);
        let depths = depth_vector(&DepGraph {
            parent: parent.clone(),
            kinds: (0..n).map(PositionKind::WordHead).collect(),
        });
        let label = usize::from(depths.depths[noun_pos] % 2 == 0);
        if counts[label] >= targets[label] {
            continue;
        }
        counts[label] += 1;
        let words: Vec<String> = (0..n)
            .map(|_| format!("w{}", rng.gen_range(0..TASK_WORD_POOL)))
            .collect();
        let upos: Vec<UposTag> = (0..n)
            .map(|i| {
                if i == noun_pos {
                    UposTag::Noun
                } else {
                    FILLER_TAGS[rng.gen_range(0..FILLER_TAGS.len())]
                }
            })
            .collect();
        let sentence = tree_to_sentence(
            &parent,
            words,
            upos,
            format!("task-{}", emitted),
            vec![
                ("sent_id".to_string(), format!("task-{}", emitted)),
                ("label".to_string(), label.to_string()),
            ],
        );
        out.push_str(&sentence.to_conllu());
        out.push('\n');
        emitted += 1;
    }
    out
}

/// Synthetic unlabeled tree corpus for GAT pre-training. Words are
/// unique per (sentence, position) so embeddings can specialize.
pub fn make_tree_corpus(seed: u64, size: usize, max_words: usize) -> String {
    assert!(size >= 1 && max_words >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for s in 0..size {
        let n = rng.gen_range(1..=max_words);
        let parent = random_parents(&mut rng, n);
        let words: Vec<String> = (0..n).map(|i| format!("s{}w{}", s, i)).collect();
        let upos: Vec<UposTag> = (0..n)
            .map(|_| FILLER_TAGS[rng.gen_range(0..FILLER_TAGS.len())])
            .collect();
        let sentence = tree_to_sentence(
            &parent,
            words,
            upos,
            format!("tree-{}", s),
            vec![("sent_id".to_string(), format!("tree-{}", s))],
        );
        out.push_str(&sentence.to_conllu());
        out.push('\n');
    }
    out
}

/// Serialize step logs as one JSON object per line.
pub fn logs_to_jsonl(logs: &[StepLog]) -> String {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log).expect("log serializes"));
        out.push('\n');
    }
    out
}
