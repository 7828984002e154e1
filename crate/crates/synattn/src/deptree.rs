//! Dependency graphs over model positions, tree distances, depths, and
//! attention masks.
//!
//! The position graph covers [CLS], every wordpiece in order, and [SEP].
//! Word-level edges connect head pieces; continuation pieces hang off
//! their word's head piece; [CLS] parents the sentence root and [SEP].

use thiserror::Error;

use crate::conllu::{ParsedSentence, WordpieceAlignment};

pub const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("alignment covers {align} words but sentence has {sentence}")]
    LengthMismatch { sentence: usize, align: usize },
    #[error("sentence tree is empty")]
    EmptySentence,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

/// What a model position stands for. Word kinds carry the original word
/// index so POS tags can be looked up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    Cls,
    Sep,
    WordHead(usize),
    WordCont(usize),
}

/// A rooted tree over model positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DepGraph {
    /// Parent index per position; `None` exactly at the root.
    pub parent: Vec<Option<usize>>,
    pub kinds: Vec<PositionKind>,
}

impl DepGraph {
    pub fn n_positions(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        self.parent
            .iter()
            .position(|p| p.is_none())
            .expect("a DepGraph has a root")
    }

    pub fn n_edges(&self) -> usize {
        self.parent.iter().filter(|p| p.is_some()).count()
    }

    /// Undirected adjacency lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let n = self.n_positions();
        let mut adj = vec![Vec::new(); n];
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = *p {
                adj[i].push(p);
                adj[p].push(i);
            }
        }
        adj
    }

    /// Undirected edge set as (min, max) pairs, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .parent
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (i.min(p), i.max(p))))
            .collect();
        edges.sort_unstable();
        edges
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.n_positions();
        if n == 0 {
            return Err(TreeError::EmptySentence);
        }
        let roots = self.parent.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(TreeError::InvalidGraph(format!("{} roots", roots)));
        }
        for (i, p) in self.parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(TreeError::InvalidGraph(format!(
                        "parent {} of {} out of range",
                        p, i
                    )));
                }
            }
        }
        // Acyclic + connected: every node must reach the root.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0usize;
            while let Some(p) = self.parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(TreeError::InvalidGraph(format!("cycle through {}", start)));
                }
            }
        }
        Ok(())
    }

    /// Word-level dependency graph of a sentence (no wordpieces, no
    /// special symbols); position i = word i.
    pub fn from_words(sentence: &ParsedSentence) -> DepGraph {
        DepGraph {
            parent: sentence.heads.clone(),
            kinds: (0..sentence.len()).map(PositionKind::WordHead).collect(),
        }
    }
}

/// A single sentence's wordpiece tree before [CLS]/[SEP] are attached:
/// piece-level parents with the sentence root piece as tree root.
#[derive(Debug, Clone)]
pub struct SentenceTree {
    pub parent: Vec<Option<usize>>,
    pub kinds: Vec<PositionKind>,
}

impl SentenceTree {
    pub fn new(
        sentence: &ParsedSentence,
        align: &WordpieceAlignment,
    ) -> Result<SentenceTree, TreeError> {
        if sentence.len() != align.word_spans.len() {
            return Err(TreeError::LengthMismatch {
                sentence: sentence.len(),
                align: align.word_spans.len(),
            });
        }
        if sentence.is_empty() {
            return Err(TreeError::EmptySentence);
        }
        let n = align.n_pieces();
        let head_piece: Vec<usize> = align.word_spans.iter().map(|&(s, _)| s).collect();
        let mut parent = vec![None; n];
        let mut kinds = vec![PositionKind::Cls; n];
        for (w, &(s, e)) in align.word_spans.iter().enumerate() {
            kinds[s] = PositionKind::WordHead(w);
            // Continuation pieces hang off their word's head piece.
            for p in s + 1..e {
                parent[p] = Some(head_piece[w]);
                kinds[p] = PositionKind::WordCont(w);
            }
            parent[s] = sentence.heads[w].map(|h| head_piece[h]);
        }
        Ok(SentenceTree { parent, kinds })
    }

    pub fn n_pieces(&self) -> usize {
        self.parent.len()
    }

    /// Index of the piece carrying the sentence root.
    pub fn root_piece(&self) -> usize {
        self.parent.iter().position(|p| p.is_none()).expect("root")
    }
}

/// [CLS] + sentence pieces + [SEP]; [CLS] parents the sentence root
/// piece and [SEP].
pub fn build_position_graph(
    sentence: &ParsedSentence,
    align: &WordpieceAlignment,
) -> Result<DepGraph, TreeError> {
    let tree = SentenceTree::new(sentence, align)?;
    let n = tree.n_pieces();
    let mut parent = Vec::with_capacity(n + 2);
    let mut kinds = Vec::with_capacity(n + 2);
    parent.push(None);
    kinds.push(PositionKind::Cls);
    for i in 0..n {
        parent.push(Some(tree.parent[i].map(|p| p + 1).unwrap_or(0)));
        kinds.push(tree.kinds[i]);
    }
    parent.push(Some(0));
    kinds.push(PositionKind::Sep);
    let g = DepGraph { parent, kinds };
    g.validate()?;
    Ok(g)
}

/// Sentence-pair graph: [CLS] s1-pieces [SEP] s2-pieces [SEP], with
/// [CLS] parenting both sentence roots and both [SEP] positions. Word
/// indices of the second sentence are offset by the first's length.
pub fn merge_pair_graph(
    t1: &SentenceTree,
    t2: &SentenceTree,
    n_words_first: usize,
) -> Result<DepGraph, TreeError> {
    if t1.n_pieces() == 0 || t2.n_pieces() == 0 {
        return Err(TreeError::EmptySentence);
    }
    let n1 = t1.n_pieces();
    let n2 = t2.n_pieces();
    let mut parent = Vec::with_capacity(n1 + n2 + 3);
    let mut kinds = Vec::with_capacity(n1 + n2 + 3);
    parent.push(None);
    kinds.push(PositionKind::Cls);
    let base1 = 1;
    for i in 0..n1 {
        parent.push(Some(t1.parent[i].map(|p| p + base1).unwrap_or(0)));
        kinds.push(t1.kinds[i]);
    }
    parent.push(Some(0));
    kinds.push(PositionKind::Sep);
    let base2 = base1 + n1 + 1;
    for i in 0..n2 {
        parent.push(Some(t2.parent[i].map(|p| p + base2).unwrap_or(0)));
        kinds.push(offset_kind(t2.kinds[i], n_words_first));
    }
    parent.push(Some(0));
    kinds.push(PositionKind::Sep);
    let g = DepGraph { parent, kinds };
    g.validate()?;
    Ok(g)
}

fn offset_kind(kind: PositionKind, offset: usize) -> PositionKind {
    match kind {
        PositionKind::WordHead(w) => PositionKind::WordHead(w + offset),
        PositionKind::WordCont(w) => PositionKind::WordCont(w + offset),
        other => other,
    }
}

/// Pairwise shortest-path distances on the undirected tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    /// Row-major n*n distances.
    pub d: Vec<u32>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }

    pub fn max(&self) -> u32 {
        self.d.iter().copied().max().unwrap_or(0)
    }
}

/// BFS from every node; O(n^2).
pub fn distance_matrix(g: &DepGraph) -> DistanceMatrix {
    let n = g.n_positions();
    let adj = g.adjacency();
    let mut d = vec![0u32; n * n];
    let mut queue = Vec::with_capacity(n);
    for start in 0..n {
        let mut dist = vec![u32::MAX; n];
        dist[start] = 0;
        queue.clear();
        queue.push(start);
        let mut qi = 0;
        while qi < queue.len() {
            let v = queue[qi];
            qi += 1;
            for &w in &adj[v] {
                if dist[w] == u32::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push(w);
                }
            }
        }
        d[start * n..(start + 1) * n].copy_from_slice(&dist);
    }
    DistanceMatrix { n, d }
}

/// Attention mask: entries are 0 or negative infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub n: usize,
    pub m: Vec<f64>,
}

impl AttentionMask {
    pub fn zeros(n: usize) -> AttentionMask {
        AttentionMask {
            n,
            m: vec![0.0; n * n],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.n + j]
    }

    /// Pad out to `n_total` positions: padding rows/columns are masked
    /// everywhere except the diagonal.
    pub fn padded(&self, n_total: usize) -> AttentionMask {
        assert!(n_total >= self.n);
        let mut m = vec![NEG_INF; n_total * n_total];
        for i in 0..self.n {
            for j in 0..self.n {
                m[i * n_total + j] = self.get(i, j);
            }
        }
        for i in self.n..n_total {
            m[i * n_total + i] = 0.0;
        }
        AttentionMask { n: n_total, m }
    }
}

/// Zero mask for `n_valid` positions, padding masked, over `n_total`.
pub fn pad_only_mask(n_valid: usize, n_total: usize) -> AttentionMask {
    AttentionMask::zeros(n_valid).padded(n_total)
}

/// M_ij = 0 where D_ij <= delta, negative infinity elsewhere.
pub fn mask_from_distance(d: &DistanceMatrix, delta: u32) -> AttentionMask {
    assert!(delta >= 1, "delta must be >= 1");
    let n = d.n;
    let m = d
        .d
        .iter()
        .map(|&dij| if dij <= delta { 0.0 } else { NEG_INF })
        .collect();
    AttentionMask { n, m }
}

/// Distance from the root to every position.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthVector {
    pub depths: Vec<u32>,
}

pub fn depth_vector(g: &DepGraph) -> DepthVector {
    let n = g.n_positions();
    let mut depths = vec![u32::MAX; n];
    // Parents precede children in no particular order; resolve by
    // chasing up to the nearest resolved ancestor.
    for start in 0..n {
        if depths[start] != u32::MAX {
            continue;
        }
        let mut chain = vec![start];
        let mut cur = start;
        loop {
            match g.parent[cur] {
                None => {
                    depths[cur] = 0;
                    break;
                }
                Some(p) => {
                    if depths[p] != u32::MAX {
                        break;
                    }
                    chain.push(p);
                    cur = p;
                }
            }
        }
        for &v in chain.iter().rev() {
            if let Some(p) = g.parent[v] {
                depths[v] = depths[p] + 1;
            }
        }
    }
    DepthVector { depths }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::{parse_conllu, wordpiece_tokenize, Vocab};

    fn chain3() -> DepGraph {
        // a -> b -> c rooted at a
        DepGraph {
            parent: vec![None, Some(0), Some(1)],
            kinds: vec![
                PositionKind::WordHead(0),
                PositionKind::WordHead(1),
                PositionKind::WordHead(2),
            ],
        }
    }

    fn star4() -> DepGraph {
        DepGraph {
            parent: vec![None, Some(0), Some(0), Some(0)],
            kinds: (0..4).map(PositionKind::WordHead).collect(),
        }
    }

    fn sentence(doc: &str) -> crate::conllu::ParsedSentence {
        parse_conllu(doc).unwrap().remove(0)
    }

    #[test]
    fn distances_on_chain() {
        let d = distance_matrix(&chain3());
        assert_eq!(d.d, vec![0, 1, 2, 1, 0, 1, 2, 1, 0]);
    }

    #[test]
    fn distances_on_star() {
        let d = distance_matrix(&star4());
        for leaf in 1..4 {
            assert_eq!(d.get(0, leaf), 1);
            for other in 1..4 {
                if other != leaf {
                    assert_eq!(d.get(leaf, other), 2);
                }
            }
        }
    }

    #[test]
    fn mask_delta_one_on_chain() {
        let d = distance_matrix(&chain3());
        let m = mask_from_distance(&d, 1);
        assert_eq!(
            m.m,
            vec![0.0, 0.0, NEG_INF, 0.0, 0.0, 0.0, NEG_INF, 0.0, 0.0]
        );
    }

    #[test]
    fn mask_saturates_at_max_distance() {
        let d = distance_matrix(&chain3());
        let m = mask_from_distance(&d, d.max());
        assert!(m.m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depths_chain_and_star() {
        assert_eq!(depth_vector(&chain3()).depths, vec![0, 1, 2]);
        assert_eq!(depth_vector(&star4()).depths, vec![0, 1, 1, 1]);
    }

    #[test]
    fn position_graph_no_splits() {
        // "dogs bark", bark is root.
        let s = sentence(
            "1\tdogs\t_\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
             2\tbark\t_\tVERB\t_\t_\t0\troot\t_\t_\n",
        );
        let vocab = Vocab::from_corpus(["dogs", "bark"].into_iter());
        let a = wordpiece_tokenize(&s.words, &vocab).unwrap();
        let g = build_position_graph(&s, &a).unwrap();
        // positions: CLS dogs bark SEP
        assert_eq!(g.n_positions(), 4);
        assert_eq!(g.n_edges(), 3);
        assert_eq!(g.parent, vec![None, Some(2), Some(0), Some(0)]);
    }

    #[test]
    fn position_graph_with_split() {
        // "playing" alone, split play/##ing.
        let s = sentence("1\tplaying\t_\tVERB\t_\t_\t0\troot\t_\t_\n");
        let vocab = Vocab::new(vec!["play".into(), "##ing".into()]);
        let a = wordpiece_tokenize(&s.words, &vocab).unwrap();
        let g = build_position_graph(&s, &a).unwrap();
        // CLS play ##ing SEP; CLS->play, play->##ing, CLS->SEP
        assert_eq!(g.parent, vec![None, Some(0), Some(1), Some(0)]);
        assert_eq!(g.kinds[2], PositionKind::WordCont(0));
    }

    #[test]
    fn figure_example_adjacency() {
        // "dog likes play": likes is root, dog and play its dependents.
        let s = sentence(
            "1\tdog\t_\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
             2\tlikes\t_\tVERB\t_\t_\t0\troot\t_\t_\n\
             3\tplay\t_\tNOUN\t_\t_\t2\tobj\t_\t_\n",
        );
        let vocab = Vocab::from_corpus(["dog", "likes", "play"].into_iter());
        let a = wordpiece_tokenize(&s.words, &vocab).unwrap();
        let g = build_position_graph(&s, &a).unwrap();
        // likes at position 2 has children dog (1) and play (3); CLS parents likes.
        assert_eq!(g.parent[1], Some(2));
        assert_eq!(g.parent[3], Some(2));
        assert_eq!(g.parent[2], Some(0));

        // On the word-level graph, delta=1 lets "likes" attend exactly
        // {dog, likes, play}.
        let wg = DepGraph::from_words(&s);
        let m = mask_from_distance(&distance_matrix(&wg), 1);
        assert_eq!(&m.m[1 * 3..2 * 3], &[0.0, 0.0, 0.0]);
        let dog_row = &m.m[0..3];
        assert_eq!(dog_row, &[0.0, 0.0, NEG_INF]);
    }

    #[test]
    fn pair_graph_two_single_words() {
        let s1 = sentence("1\thi\t_\tINTJ\t_\t_\t0\troot\t_\t_\n");
        let s2 = sentence("1\tyo\t_\tINTJ\t_\t_\t0\troot\t_\t_\n");
        let vocab = Vocab::from_corpus(["hi", "yo"].into_iter());
        let a1 = wordpiece_tokenize(&s1.words, &vocab).unwrap();
        let a2 = wordpiece_tokenize(&s2.words, &vocab).unwrap();
        let t1 = SentenceTree::new(&s1, &a1).unwrap();
        let t2 = SentenceTree::new(&s2, &a2).unwrap();
        let g = merge_pair_graph(&t1, &t2, s1.len()).unwrap();
        // CLS hi SEP yo SEP: a star around CLS.
        assert_eq!(g.n_positions(), 5);
        assert_eq!(g.n_edges(), 4);
        assert!(g.parent[1..].iter().all(|p| *p == Some(0)));
        assert_eq!(g.kinds[3], PositionKind::WordHead(1));
    }

    #[test]
    fn pair_graph_depths() {
        // Sentences of 2 and 3 words, no splits: 8 positions, every
        // word-root at depth 1.
        let s1 = sentence(
            "1\ta\t_\tDET\t_\t_\t2\tdet\t_\t_\n\
             2\tb\t_\tNOUN\t_\t_\t0\troot\t_\t_\n",
        );
        let s2 = sentence(
            "1\tc\t_\tDET\t_\t_\t2\tdet\t_\t_\n\
             2\td\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\
             3\te\t_\tVERB\t_\t_\t2\tdep\t_\t_\n",
        );
        let vocab = Vocab::from_corpus(["a", "b", "c", "d", "e"].into_iter());
        let t1 = SentenceTree::new(&s1, &wordpiece_tokenize(&s1.words, &vocab).unwrap()).unwrap();
        let t2 = SentenceTree::new(&s2, &wordpiece_tokenize(&s2.words, &vocab).unwrap()).unwrap();
        let g = merge_pair_graph(&t1, &t2, s1.len()).unwrap();
        assert_eq!(g.n_positions(), 8);
        let depths = depth_vector(&g).depths;
        // roots: b at position 2, d at position 5
        assert_eq!(depths[2], 1);
        assert_eq!(depths[5], 1);
        assert_eq!(depths[0], 0);
    }

    #[test]
    fn length_mismatch_detected() {
        let s = sentence("1\thi\t_\tINTJ\t_\t_\t0\troot\t_\t_\n");
        let vocab = Vocab::from_corpus(["hi", "yo"].into_iter());
        let a = wordpiece_tokenize(&["hi".to_string(), "yo".to_string()], &vocab).unwrap();
        assert!(matches!(
            build_position_graph(&s, &a),
            Err(TreeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn max_depth_equals_root_distance() {
        let g = chain3();
        let d = distance_matrix(&g);
        let depths = depth_vector(&g).depths;
        let root = g.root();
        let max_depth = *depths.iter().max().unwrap();
        let max_from_root = (0..g.n_positions()).map(|i| d.get(root, i)).max().unwrap();
        assert_eq!(max_depth, max_from_root);
    }

    #[test]
    fn padded_mask_keeps_diagonal() {
        let m = pad_only_mask(2, 4);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(2, 2), 0.0);
        assert_eq!(m.get(2, 0), NEG_INF);
        assert_eq!(m.get(1, 3), NEG_INF);
        // every row has a zero entry
        for i in 0..4 {
            assert!((0..4).any(|j| m.get(i, j) == 0.0));
        }
    }
}
