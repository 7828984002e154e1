//! Structural probe: squared tree distances and depths predicted from
//! GAT outputs, the auxiliary losses, and tree-reconstruction metrics.

use thiserror::Error;

use crate::deptree::{DepGraph, DepthVector, DistanceMatrix};
use crate::numcore::{NumError, Tape, Tensor, VarId};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("probe inputs cover {got} positions but targets cover {want}")]
    IndexMisalignment { got: usize, want: usize },
}

/// Squared probe distance between two vectors: |theta (g_i - g_j)|^2.
pub fn pred_sq_distance(theta: &Tensor, g_i: &[f64], g_j: &[f64]) -> Result<f64, NumError> {
    let (m, w) = (theta.rows(), theta.cols());
    if g_i.len() != w || g_j.len() != w {
        return Err(NumError::ShapeMismatch {
            op: "pred_sq_distance",
            lhs: vec![g_i.len()],
            rhs: vec![m, w],
        });
    }
    let mut out = 0.0;
    for r in 0..m {
        let mut acc = 0.0;
        for c in 0..w {
            acc += theta.get2(r, c) * (g_i[c] - g_j[c]);
        }
        out += acc * acc;
    }
    Ok(out)
}

/// Squared probe norm of one vector: |theta g_i|^2.
pub fn pred_sq_depth(theta: &Tensor, g_i: &[f64]) -> Result<f64, NumError> {
    let zeros = vec![0.0; g_i.len()];
    pred_sq_distance(theta, g_i, &zeros)
}

/// Tape node holding the n x n matrix of predicted squared distances.
pub fn predicted_sq_distances(
    tape: &mut Tape,
    theta1: VarId,
    g: VarId,
) -> Result<VarId, NumError> {
    let tt = tape.transpose(theta1);
    let projected = tape.matmul(g, tt)?;
    Ok(tape.pairwise_sq_dist(projected))
}

/// Tape node holding the n x 1 vector of predicted squared depths.
pub fn predicted_sq_depths(tape: &mut Tape, theta2: VarId, g: VarId) -> Result<VarId, NumError> {
    let tt = tape.transpose(theta2);
    let projected = tape.matmul(g, tt)?;
    let sq = tape.square(projected);
    let m = tape.value(sq).cols();
    let ones = tape.input(Tensor::matrix(m, 1, vec![1.0; m]));
    tape.matmul(sq, ones)
}

/// Gold tree distances as a padded n_total x n_total tensor.
///
/// The probe regresses its squared Euclidean distance onto the plain
/// tree distance: tree distance is a cut metric and
/// hence exactly realizable as a squared Euclidean distance, whereas
/// its square is not (three leaves of a star at pairwise distance 2
/// would need a circumradius of 2/sqrt(3) > 1 from their hub), so a
/// squared-gold target would have an irreducible loss floor.
pub fn gold_distances(d: &DistanceMatrix, n_total: usize) -> Tensor {
    let mut out = vec![0.0; n_total * n_total];
    for i in 0..d.n {
        for j in 0..d.n {
            out[i * n_total + j] = d.get(i, j) as f64;
        }
    }
    Tensor::matrix(n_total, n_total, out)
}

/// Gold depths as a padded n_total x 1 tensor; the squared probe norm
/// regresses onto the plain depth, matching [`gold_distances`].
pub fn gold_depths(depths: &DepthVector, n_total: usize) -> Tensor {
    let mut out = vec![0.0; n_total];
    for (i, &d) in depths.depths.iter().enumerate() {
        out[i] = d as f64;
    }
    Tensor::matrix(n_total, 1, out)
}

/// Pair-weight matrix: 1/n^2 over the supervised index set, 0 elsewhere
/// (padding and, when `positions` excludes specials, non-word rows).
pub fn pair_weights(positions: &[usize], n_total: usize) -> Tensor {
    let n = positions.len();
    let mut out = vec![0.0; n_total * n_total];
    let w = 1.0 / (n * n) as f64;
    for &i in positions {
        for &j in positions {
            out[i * n_total + j] = w;
        }
    }
    Tensor::matrix(n_total, n_total, out)
}

/// Position-weight vector: 1/n over the supervised index set.
pub fn depth_weights(positions: &[usize], n_total: usize) -> Tensor {
    let n = positions.len();
    let mut out = vec![0.0; n_total];
    for &i in positions {
        out[i] = 1.0 / n as f64;
    }
    Tensor::matrix(n_total, 1, out)
}

/// Mean absolute error between gold tree distances and predicted
/// squared probe distances, over all ordered pairs (diagonal included),
/// normalized by n^2.
pub fn distance_loss(
    tape: &mut Tape,
    theta1: VarId,
    g: VarId,
    gold_dist: &Tensor,
    weights: &Tensor,
) -> Result<VarId, ProbeError> {
    let pred = predicted_sq_distances(tape, theta1, g)?;
    let n = tape.value(pred).rows();
    if gold_dist.rows() != n {
        return Err(ProbeError::IndexMisalignment {
            got: n,
            want: gold_dist.rows(),
        });
    }
    let gold = tape.input(gold_dist.clone());
    let diff = tape.sub(pred, gold)?;
    let err = tape.abs(diff);
    let w = tape.input(weights.clone());
    let weighted = tape.mul(err, w)?;
    Ok(tape.sum(weighted))
}

/// Mean absolute error between gold depths and predicted squared probe
/// norms, normalized by n.
pub fn depth_loss(
    tape: &mut Tape,
    theta2: VarId,
    g: VarId,
    gold_depth: &Tensor,
    weights: &Tensor,
) -> Result<VarId, ProbeError> {
    let pred = predicted_sq_depths(tape, theta2, g)?;
    let n = tape.value(pred).rows();
    if gold_depth.rows() != n {
        return Err(ProbeError::IndexMisalignment {
            got: n,
            want: gold_depth.rows(),
        });
    }
    let gold = tape.input(gold_depth.clone());
    let diff = tape.sub(pred, gold)?;
    let err = tape.abs(diff);
    let w = tape.input(weights.clone());
    let weighted = tape.mul(err, w)?;
    Ok(tape.sum(weighted))
}

/// L = L_task + alpha (L_dist + L_depth).
pub fn combined_loss(
    tape: &mut Tape,
    l_task: VarId,
    l_dist: VarId,
    l_depth: VarId,
    alpha: f64,
) -> Result<VarId, NumError> {
    let structure = tape.add(l_dist, l_depth)?;
    let weighted = tape.scale(structure, alpha);
    tape.add(l_task, weighted)
}

/// Minimum spanning tree of a symmetric distance matrix (Prim), ties
/// broken by the lowest (i, j) pair. Returns undirected edges sorted.
pub fn decode_tree(dist: &[f64], n: usize) -> Vec<(usize, usize)> {
    assert_eq!(dist.len(), n * n);
    if n <= 1 {
        return vec![];
    }
    let mut in_tree = vec![false; n];
    in_tree[0] = true;
    let mut edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !in_tree[i] {
                continue;
            }
            for j in 0..n {
                if in_tree[j] {
                    continue;
                }
                let d = dist[i * n + j];
                let (a, b) = (i.min(j), i.max(j));
                let better = match best {
                    None => true,
                    Some((bd, ba, bb)) => {
                        d < bd || (d == bd && (a, b) < (ba, bb))
                    }
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("n > 1");
        in_tree[a] = true;
        in_tree[b] = true;
        edges.push((a, b));
    }
    edges.sort_unstable();
    edges
}

/// Fraction of gold undirected edges recovered by the decoded tree.
pub fn uuas(decoded: &[(usize, usize)], gold: &DepGraph) -> f64 {
    let gold_edges = gold.edges();
    if gold_edges.is_empty() {
        return 1.0;
    }
    let hit = gold_edges
        .iter()
        .filter(|e| decoded.binary_search(e).is_ok())
        .count();
    hit as f64 / gold_edges.len() as f64
}

/// Spearman rank correlation between two equally long value slices,
/// with average ranks for ties. Returns 0 for degenerate inputs.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return 0.0;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &ix in &order[i..=j] {
            out[ix] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Per-sequence probe evaluation result.
#[derive(Debug, Clone)]
pub struct ProbeMetrics {
    pub uuas: f64,
    pub root_correct: bool,
    pub spearman: f64,
}

/// Decode a tree from predicted squared distances and compare with
/// gold: UUAS, root recovery via the depth probe, and the Spearman
/// correlation of off-diagonal distances.
pub fn probe_metrics(
    pred_sq_dist: &[f64],
    pred_sq_depth: &[f64],
    gold: &DepGraph,
    gold_dist: &DistanceMatrix,
) -> ProbeMetrics {
    let n = gold.n_positions();
    let decoded = decode_tree(pred_sq_dist, n);
    let uuas_v = uuas(&decoded, gold);
    let pred_root = pred_sq_depth
        .iter()
        .take(n)
        .enumerate()
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut pred_pairs = Vec::new();
    let mut gold_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pred_pairs.push(pred_sq_dist[i * n + j]);
            gold_pairs.push(gold_dist.get(i, j) as f64);
        }
    }
    ProbeMetrics {
        uuas: uuas_v,
        root_correct: pred_root == gold.root(),
        spearman: spearman(&pred_pairs, &gold_pairs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deptree::{distance_matrix, PositionKind};
    use crate::numcore::grad_check;

    fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, data)
    }

    #[test]
    fn sq_distance_identity_theta() {
        let theta = eye(2);
        let d = pred_sq_distance(&theta, &[3.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d, 25.0);
        assert_eq!(pred_sq_distance(&theta, &[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn sq_distance_symmetry() {
        let theta = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]);
        let a = [0.2, -0.9, 1.1];
        let b = [-0.4, 0.6, 0.0];
        let ab = pred_sq_distance(&theta, &a, &b).unwrap();
        let ba = pred_sq_distance(&theta, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn sq_depth_basics() {
        let theta = eye(2);
        assert_eq!(pred_sq_depth(&theta, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(pred_sq_depth(&theta, &[1.0, 2.0]).unwrap(), 5.0);
        // scaling g by c scales output by c^2
        let d1 = pred_sq_depth(&theta, &[1.0, 2.0]).unwrap();
        let d3 = pred_sq_depth(&theta, &[3.0, 6.0]).unwrap();
        assert!((d3 - 9.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn distance_loss_hand_value() {
        // n=2, gold D01=1, predictions all zero: loss = 2/4 = 0.5.
        let mut tape = Tape::new();
        let theta = tape.input(Tensor::zeros(vec![2, 2]));
        let g = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let gold = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let w = pair_weights(&[0, 1], 2);
        let loss = distance_loss(&mut tape, theta, g, &gold, &w).unwrap();
        assert!((tape.value(loss).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn losses_zero_at_perfect_prediction() {
        // theta1 = I, g rows form an exact tree embedding of a 2-chain.
        let mut tape = Tape::new();
        let theta = tape.input(eye(2));
        // chain 0-1: distance 1 -> |g0-g1|^2 = 1
        let g = tape.input(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 0.0]));
        let gold = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let w = pair_weights(&[0, 1], 2);
        let loss = distance_loss(&mut tape, theta, g, &gold, &w).unwrap();
        assert!(tape.value(loss).item() < 1e-15);
    }

    #[test]
    fn depth_loss_single_root() {
        // n=1, gold depth 0, prediction p: loss = p.
        let mut tape = Tape::new();
        let theta = tape.input(eye(2));
        let g = tape.input(Tensor::matrix(1, 2, vec![2.0, 0.0]));
        let gold = Tensor::matrix(1, 1, vec![0.0]);
        let w = depth_weights(&[0], 1);
        let loss = depth_loss(&mut tape, theta, g, &gold, &w).unwrap();
        assert!((tape.value(loss).item() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_alpha_linearity() {
        let mut tape = Tape::new();
        let lt = tape.input(Tensor::scalar(2.0));
        let ld = tape.input(Tensor::scalar(0.5));
        let lp = tape.input(Tensor::scalar(0.25));
        let zero = combined_loss(&mut tape, lt, ld, lp, 0.0).unwrap();
        assert_eq!(tape.value(zero).item(), 2.0);
        let half = combined_loss(&mut tape, lt, ld, lp, 0.5).unwrap();
        assert!((tape.value(half).item() - 2.375).abs() < 1e-15);
        // dL/dalpha = l_dist + l_depth
        let a1 = combined_loss(&mut tape, lt, ld, lp, 1.0).unwrap();
        let slope = tape.value(a1).item() - tape.value(zero).item();
        assert!((slope - 0.75).abs() < 1e-15);
    }

    #[test]
    fn distance_loss_grad_check() {
        let gold = Tensor::matrix(3, 3, vec![0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0]);
        let w = pair_weights(&[0, 1, 2], 3);
        let g0 = Tensor::matrix(3, 4, vec![
            0.3, -0.2, 0.9, 0.1, -0.5, 0.7, 0.2, -0.8, 1.1, 0.4, -0.3, 0.6,
        ]);
        let err = grad_check(
            |tape, g| {
                let theta = tape.input(Tensor::matrix(2, 4, vec![
                    0.7, -0.4, 0.2, 0.9, -0.1, 0.5, -0.6, 0.3,
                ]));
                distance_loss(tape, theta, g, &gold, &w).map_err(|e| match e {
                    ProbeError::Num(n) => n,
                    other => panic!("{}", other),
                })
            },
            &g0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {}", err);
    }

    #[test]
    fn orthogonal_transform_leaves_distances_unchanged() {
        // 2x2 rotation applied to theta1.
        let theta = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]);
        let (c, s) = (0.6, 0.8); // cos/sin of a rotation
        let rotated = Tensor::matrix(
            2,
            3,
            vec![
                c * theta.get2(0, 0) - s * theta.get2(1, 0),
                c * theta.get2(0, 1) - s * theta.get2(1, 1),
                c * theta.get2(0, 2) - s * theta.get2(1, 2),
                s * theta.get2(0, 0) + c * theta.get2(1, 0),
                s * theta.get2(0, 1) + c * theta.get2(1, 1),
                s * theta.get2(0, 2) + c * theta.get2(1, 2),
            ],
        );
        let a = [0.2, -0.9, 1.1];
        let b = [-0.4, 0.6, 0.0];
        let d1 = pred_sq_distance(&theta, &a, &b).unwrap();
        let d2 = pred_sq_distance(&rotated, &a, &b).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn mst_recovers_tree_from_gold_distances() {
        let g = DepGraph {
            parent: vec![None, Some(0), Some(1), Some(1), Some(0)],
            kinds: (0..5).map(PositionKind::WordHead).collect(),
        };
        let d = distance_matrix(&g);
        let dist: Vec<f64> = d.d.iter().map(|&v| (v as f64) * (v as f64)).collect();
        let decoded = decode_tree(&dist, 5);
        assert_eq!(decoded, g.edges());
        assert_eq!(uuas(&decoded, &g), 1.0);
    }

    #[test]
    fn mst_constant_predictions_deterministic() {
        let dist = vec![1.0; 16];
        let decoded = decode_tree(&dist, 4);
        // lowest-index tie break yields a star around node 0
        assert_eq!(decoded, vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn spearman_perfect_and_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), 0.0);
    }

    #[test]
    fn probe_metrics_on_gold_inputs() {
        let g = DepGraph {
            parent: vec![None, Some(0), Some(1)],
            kinds: (0..3).map(PositionKind::WordHead).collect(),
        };
        let d = distance_matrix(&g);
        let sq: Vec<f64> = d.d.iter().map(|&v| (v as f64) * (v as f64)).collect();
        let depths = vec![0.0, 1.0, 4.0];
        let m = probe_metrics(&sq, &depths, &g, &d);
        assert_eq!(m.uuas, 1.0);
        assert!(m.root_correct);
        assert!((m.spearman - 1.0).abs() < 1e-12);
    }
}
