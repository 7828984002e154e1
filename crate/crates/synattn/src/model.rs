//! The transformer encoder, the GAT, and their fusion.
//!
//! The GAT runs once per sequence under the shortest-path mask; its last
//! layer output biases the queries and keys of designated syntax-heads
//! inside designated syntax-layers. The transformer's own attention mask
//! carries padding only.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conllu::N_UPOS_IDS;
use crate::deptree::AttentionMask;
use crate::numcore::{NumError, ParamSet, ParamVars, Tape, Tensor, VarId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Every architectural and training hyperparameter. JSON field names
/// follow the conventional symbols (L, h, L_G, k, ...).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Encoder layers.
    #[serde(rename = "L")]
    pub n_layers: usize,
    /// Attention heads per encoder layer.
    #[serde(rename = "h")]
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Vocabulary size.
    #[serde(rename = "U")]
    pub vocab_size: usize,
    /// GAT layers.
    #[serde(rename = "L_G")]
    pub gat_layers: usize,
    /// GAT heads.
    #[serde(rename = "k")]
    pub gat_heads: usize,
    pub d_g: usize,
    /// Mask radius of the GAT's dependency attention.
    pub delta: u32,
    /// Weight of the tree-structure prediction loss.
    pub alpha: f64,
    pub syntax_layers: Vec<usize>,
    pub syntax_heads: Vec<usize>,
    pub max_len: usize,
    pub n_labels: usize,
    /// Structural probe rank; defaults to k * d_g (full rank).
    #[serde(default)]
    pub probe_rank: Option<usize>,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration for desk-scale experiments. GAT dimensions
    /// follow the reference setting (L_G=4, k=4, d_g=64).
    pub fn desk_default() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_k: 32,
            d_v: 32,
            vocab_size: 0,
            gat_layers: 4,
            gat_heads: 4,
            d_g: 64,
            delta: 1,
            alpha: 0.5,
            syntax_layers: vec![0, 1],
            syntax_heads: vec![0],
            max_len: 64,
            n_labels: 2,
            probe_rank: None,
            seed: 42,
        }
    }

    pub fn gat_width(&self) -> usize {
        self.gat_heads * self.d_g
    }

    pub fn probe_rank(&self) -> usize {
        self.probe_rank.unwrap_or_else(|| self.gat_width())
    }

    pub fn is_syntax_layer(&self, l: usize) -> bool {
        self.syntax_layers.contains(&l)
    }

    pub fn is_syntax_head(&self, j: usize) -> bool {
        self.syntax_heads.contains(&j)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.delta < 1 {
            return fail("delta must be >= 1".into());
        }
        if self.alpha < 0.0 {
            return fail("alpha must be >= 0".into());
        }
        if let Some(&j) = self.syntax_heads.iter().find(|&&j| j >= self.n_heads) {
            return fail(format!("syntax head {} out of range (h={})", j, self.n_heads));
        }
        if let Some(&l) = self.syntax_layers.iter().find(|&&l| l >= self.n_layers) {
            return fail(format!(
                "syntax layer {} out of range (L={})",
                l, self.n_layers
            ));
        }
        if self.probe_rank() < 1 {
            return fail("probe rank must be >= 1".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab size not set".into());
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Fresh parameters for a config: Xavier-uniform projections,
/// N(0, 1/sqrt(d_model)) embeddings, unit/zero layer norms. The
/// embedding scale keeps attention logits O(1) at initialization; a
/// smaller scale makes every attention row near-uniform, which collapses
/// the residual-free graph encoder's rows onto each other and stalls the
/// pairwise-distance loss at a symmetric saddle.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamSet::new();
    let d = cfg.d_model;
    let kd_g = cfg.gat_width();
    let embed_std = 1.0;

    p.insert(
        "embed.token",
        gaussian(&mut rng, cfg.vocab_size, d, embed_std),
    );
    p.insert("embed.pos", gaussian(&mut rng, cfg.max_len, d, embed_std));
    p.insert("gat.upos", gaussian(&mut rng, N_UPOS_IDS, d, embed_std));

    for l in 0..cfg.gat_layers {
        let in_dim = if l == 0 { d } else { kd_g };
        for j in 0..cfg.gat_heads {
            p.insert(
                &format!("gat.l{}.h{}.t", l, j),
                xavier(&mut rng, in_dim, cfg.d_g),
            );
            p.insert(
                &format!("gat.l{}.h{}.v", l, j),
                xavier(&mut rng, in_dim, cfg.d_g),
            );
        }
    }

    for l in 0..cfg.n_layers {
        for j in 0..cfg.n_heads {
            p.insert(
                &format!("enc.l{}.h{}.wq", l, j),
                xavier(&mut rng, d, cfg.d_k),
            );
            p.insert(
                &format!("enc.l{}.h{}.wk", l, j),
                xavier(&mut rng, d, cfg.d_k),
            );
            p.insert(
                &format!("enc.l{}.h{}.wv", l, j),
                xavier(&mut rng, d, cfg.d_v),
            );
        }
        p.insert(
            &format!("enc.l{}.wo", l),
            xavier(&mut rng, cfg.n_heads * cfg.d_v, d),
        );
        p.insert(&format!("enc.l{}.ffn.w1", l), xavier(&mut rng, d, 4 * d));
        p.insert(&format!("enc.l{}.ffn.b1", l), Tensor::zeros(vec![4 * d]));
        p.insert(&format!("enc.l{}.ffn.w2", l), xavier(&mut rng, 4 * d, d));
        p.insert(&format!("enc.l{}.ffn.b2", l), Tensor::zeros(vec![d]));
        for ln in ["ln1", "ln2"] {
            p.insert(
                &format!("enc.l{}.{}.g", l, ln),
                Tensor::new(vec![d], vec![1.0; d]),
            );
            p.insert(&format!("enc.l{}.{}.b", l, ln), Tensor::zeros(vec![d]));
        }
        if cfg.is_syntax_layer(l) {
            p.insert(&format!("syn.l{}.gq", l), xavier(&mut rng, kd_g, cfg.d_k));
            p.insert(&format!("syn.l{}.gk", l), xavier(&mut rng, kd_g, cfg.d_k));
        }
    }

    let m = cfg.probe_rank();
    p.insert("probe.theta1", xavier(&mut rng, m, kd_g));
    p.insert("probe.theta2", xavier(&mut rng, m, kd_g));

    p.insert("cls.w", xavier(&mut rng, d, cfg.n_labels));
    p.insert("cls.b", Tensor::zeros(vec![cfg.n_labels]));
    Ok(p)
}

/// Scaled dot-product attention with an additive mask:
/// softmax((Q K^T + M) / sqrt(d)) V.
pub fn attention(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    mask: VarId,
    d: usize,
) -> Result<VarId, NumError> {
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let masked = tape.add(logits, mask)?;
    let scaled = tape.scale(masked, 1.0 / (d as f64).sqrt());
    let weights = tape.row_softmax(scaled)?;
    tape.matmul(weights, v)
}

/// Token plus absolute-position embeddings, as H^0.
pub fn embed_tokens(
    tape: &mut Tape,
    vars: &ParamVars,
    token_ids: &[usize],
    position_ids: &[usize],
) -> Result<VarId, NumError> {
    let tok = tape.gather_rows(vars.get("embed.token"), token_ids)?;
    let pos = tape.gather_rows(vars.get("embed.pos"), position_ids)?;
    tape.add(tok, pos)
}

/// GAT input embeddings: shared token table plus POS tag embeddings,
/// no positional term.
pub fn gat_embed(
    tape: &mut Tape,
    vars: &ParamVars,
    token_ids: &[usize],
    upos_ids: &[usize],
) -> Result<VarId, NumError> {
    let tok = tape.gather_rows(vars.get("embed.token"), token_ids)?;
    let pos = tape.gather_rows(vars.get("gat.upos"), upos_ids)?;
    tape.add(tok, pos)
}

/// One GAT layer: per head a single projection serves as both query and
/// key; head outputs are concatenated. No feed-forward, no residuals.
pub fn gat_layer(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layer: usize,
    x: VarId,
    mask: VarId,
) -> Result<VarId, NumError> {
    let mut heads = Vec::with_capacity(cfg.gat_heads);
    for j in 0..cfg.gat_heads {
        let t_w = vars.get(&format!("gat.l{}.h{}.t", layer, j));
        let v_w = vars.get(&format!("gat.l{}.h{}.v", layer, j));
        let t = tape.matmul(x, t_w)?;
        let v = tape.matmul(x, v_w)?;
        heads.push(attention(tape, t, t, v, mask, cfg.d_g)?);
    }
    tape.concat_cols(&heads)
}

/// Full GAT stack over embedded inputs; returns the last layer's output
/// (n x k*d_g).
pub fn gat_forward(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    g0: VarId,
    mask: VarId,
) -> Result<VarId, NumError> {
    let mut x = g0;
    for l in 0..cfg.gat_layers {
        x = gat_layer(tape, vars, cfg, l, x, mask)?;
    }
    Ok(x)
}

/// One attention head inside an encoder layer. Syntax heads add the
/// GAT-derived bias to queries and keys.
pub fn fused_attention_head(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layer: usize,
    head: usize,
    h_in: VarId,
    g: Option<VarId>,
    mask: VarId,
) -> Result<VarId, NumError> {
    let wq = vars.get(&format!("enc.l{}.h{}.wq", layer, head));
    let wk = vars.get(&format!("enc.l{}.h{}.wk", layer, head));
    let wv = vars.get(&format!("enc.l{}.h{}.wv", layer, head));
    let mut q = tape.matmul(h_in, wq)?;
    let mut k = tape.matmul(h_in, wk)?;
    let v = tape.matmul(h_in, wv)?;
    if cfg.is_syntax_layer(layer) && cfg.is_syntax_head(head) {
        if let Some(g) = g {
            let gq = vars.get(&format!("syn.l{}.gq", layer));
            let gk = vars.get(&format!("syn.l{}.gk", layer));
            let qb = tape.matmul(g, gq)?;
            let kb = tape.matmul(g, gk)?;
            q = tape.add(q, qb)?;
            k = tape.add(k, kb)?;
        }
    }
    attention(tape, q, k, v, mask, cfg.d_k)
}

fn encoder_layer(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layer: usize,
    h_in: VarId,
    g: Option<VarId>,
    mask: VarId,
) -> Result<VarId, NumError> {
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for j in 0..cfg.n_heads {
        heads.push(fused_attention_head(tape, vars, cfg, layer, j, h_in, g, mask)?);
    }
    let concat = tape.concat_cols(&heads)?;
    let projected = tape.matmul(concat, vars.get(&format!("enc.l{}.wo", layer)))?;
    // Post-norm residual sublayers.
    let res1 = tape.add(h_in, projected)?;
    let ln1 = tape.layer_norm(
        res1,
        vars.get(&format!("enc.l{}.ln1.g", layer)),
        vars.get(&format!("enc.l{}.ln1.b", layer)),
        1e-9,
    )?;
    let z1 = tape.matmul(ln1, vars.get(&format!("enc.l{}.ffn.w1", layer)))?;
    let z1b = tape.add_row(z1, vars.get(&format!("enc.l{}.ffn.b1", layer)))?;
    let act = tape.gelu(z1b);
    let z2 = tape.matmul(act, vars.get(&format!("enc.l{}.ffn.w2", layer)))?;
    let z2b = tape.add_row(z2, vars.get(&format!("enc.l{}.ffn.b2", layer)))?;
    let res2 = tape.add(ln1, z2b)?;
    tape.layer_norm(
        res2,
        vars.get(&format!("enc.l{}.ln2.g", layer)),
        vars.get(&format!("enc.l{}.ln2.b", layer)),
        1e-9,
    )
}

/// Per-layer activations plus the final GAT output.
pub struct EncoderState {
    /// H^0 .. H^L.
    pub h: Vec<VarId>,
    /// Final GAT output, present when any syntax layer is configured or
    /// the probe needs it.
    pub g: Option<VarId>,
}

impl EncoderState {
    pub fn final_h(&self) -> VarId {
        *self.h.last().expect("at least H^0")
    }
}

/// Inputs for one sequence's forward pass.
pub struct SequenceInput<'a> {
    pub token_ids: &'a [usize],
    pub position_ids: &'a [usize],
    pub upos_ids: &'a [usize],
    /// Delta-mask over the dependency graph (GAT attention).
    pub dep_mask: &'a AttentionMask,
    /// Padding mask (transformer attention).
    pub pad_mask: &'a AttentionMask,
}

pub fn mask_input(tape: &mut Tape, mask: &AttentionMask) -> VarId {
    tape.input(Tensor::matrix(mask.n, mask.n, mask.m.clone()))
}

/// Run the GAT and the full encoder stack.
///
/// `want_gat` forces the GAT to run even when no syntax layer consumes
/// it (the probe supervises GAT output regardless of fusion).
pub fn encoder_forward(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    input: &SequenceInput<'_>,
    want_gat: bool,
) -> Result<EncoderState, NumError> {
    let g = if want_gat || !cfg.syntax_layers.is_empty() {
        let g0 = gat_embed(tape, vars, input.token_ids, input.upos_ids)?;
        let dep_mask = mask_input(tape, input.dep_mask);
        Some(gat_forward(tape, vars, cfg, g0, dep_mask)?)
    } else {
        None
    };
    let pad_mask = mask_input(tape, input.pad_mask);
    let h = encoder_stack(tape, vars, cfg, input.token_ids, input.position_ids, g, pad_mask)?;
    Ok(EncoderState { h, g })
}

/// Embedding plus all encoder layers for an already-computed GAT output.
pub fn encoder_stack(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    token_ids: &[usize],
    position_ids: &[usize],
    g: Option<VarId>,
    pad_mask: VarId,
) -> Result<Vec<VarId>, NumError> {
    let h0 = embed_tokens(tape, vars, token_ids, position_ids)?;
    let mut h = vec![h0];
    for l in 0..cfg.n_layers {
        let prev = *h.last().unwrap();
        h.push(encoder_layer(tape, vars, cfg, l, prev, g, pad_mask)?);
    }
    Ok(h)
}

/// Label distribution from the [CLS] position (row 0 of H^L).
pub fn classify(tape: &mut Tape, vars: &ParamVars, h_final: VarId) -> Result<VarId, NumError> {
    let cls_row = tape.gather_rows(h_final, &[0])?;
    let logits = tape.matmul(cls_row, vars.get("cls.w"))?;
    let biased = tape.add_row(logits, vars.get("cls.b"))?;
    tape.row_softmax(biased)
}

/// Negative log-likelihood of one label under `classify` output.
pub fn classification_loss(
    tape: &mut Tape,
    probs: VarId,
    label: usize,
    n_labels: usize,
) -> Result<VarId, NumError> {
    let mut one_hot = vec![0.0; n_labels];
    one_hot[label] = 1.0;
    let oh = tape.input(Tensor::matrix(1, n_labels, one_hot));
    let picked = tape.mul(probs, oh)?;
    let p = tape.sum(picked);
    let lp = tape.ln(p);
    Ok(tape.scale(lp, -1.0))
}
