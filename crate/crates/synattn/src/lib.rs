//! Syntax-augmented transformer attention.
//!
//! A graph attention network encodes universal dependency trees under a
//! shortest-path mask; its output biases designated transformer
//! attention heads, and a structural-probe auxiliary loss supervises the
//! GAT to embed tree distances and depths.

pub mod conllu;
pub mod deptree;
pub mod numcore;

pub use conllu::{parse_conllu, wordpiece_tokenize, ParsedSentence, Vocab, WordpieceAlignment};
pub use deptree::{
    build_position_graph, depth_vector, distance_matrix, mask_from_distance, merge_pair_graph,
    AttentionMask, DepGraph, DepthVector, DistanceMatrix, PositionKind, SentenceTree,
};
pub use numcore::{grad_check, ParamSet, Tape, Tensor, VarId};

pub mod cli;
pub mod model;
pub mod probe;
pub mod train;
