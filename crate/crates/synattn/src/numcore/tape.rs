//! Reverse-mode differentiation over a tape of primitive applications.
//!
//! Each primitive records its forward value and a closure producing the
//! adjoint contribution for each parent. The tape order is topological
//! by construction, so the reverse pass walks node indices backwards.

use super::tensor::{matmul_values, same_shape, transpose_values, NumError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients from one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, zero-filled if the node was never reached.
    pub fn get_or_zero(&self, id: VarId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, back: Option<BackFn>) -> VarId {
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Leaf node (parameter or constant input).
    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(value, vec![], None)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumError> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = matmul_values(&av, &bv)?;
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = matmul_values(g, &transpose_values(&bv)).expect("matmul adjoint");
                let gb = matmul_values(&transpose_values(&av), g).expect("matmul adjoint");
                vec![ga, gb]
            })),
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumError> {
        let av = self.value(a);
        let bv = self.value(b);
        same_shape("add", av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        ))
    }

    /// Matrix plus a row vector broadcast over rows.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> Result<VarId, NumError> {
        let av = self.value(a);
        let rv = self.value(row);
        let (n, c) = (av.rows(), av.cols());
        if rv.numel() != c {
            return Err(NumError::ShapeMismatch {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let row_shape = rv.shape().to_vec();
        let mut data = av.data().to_vec();
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] += rv.data()[j];
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data);
        Ok(self.push(
            out,
            vec![a, row],
            Some(Box::new(move |g| {
                let mut grow = vec![0.0; c];
                for i in 0..n {
                    for j in 0..c {
                        grow[j] += g.data()[i * c + j];
                    }
                }
                vec![g.clone(), Tensor::new(row_shape.clone(), grow)]
            })),
        ))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumError> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        same_shape("mul", &av, &bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        Ok(self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                );
                vec![ga, gb]
            })),
        ))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let out = self.value(a).map(|v| v * c);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g.map(|v| v * c)])),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let out = transpose_values(self.value(a));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![transpose_values(g)])),
        )
    }

    /// Concatenate rank-2 tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, NumError> {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(NumError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut offset = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..n {
                data[i * total + offset..i * total + offset + w].copy_from_slice(v.row(i));
            }
            offset += w;
        }
        let out = Tensor::matrix(n, total, data);
        let widths_b = widths.clone();
        Ok(self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(widths_b.len());
                let mut offset = 0usize;
                for &w in &widths_b {
                    let mut part = vec![0.0; n * w];
                    for i in 0..n {
                        part[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    grads.push(Tensor::matrix(n, w, part));
                    offset += w;
                }
                grads
            })),
        ))
    }

    /// Row-wise softmax. Entries of negative infinity get exactly zero
    /// weight and are excluded from the max-subtraction and the sum.
    pub fn row_softmax(&mut self, a: VarId) -> Result<VarId, NumError> {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = av.row(i);
            let mx = row
                .iter()
                .copied()
                .filter(|v| *v != f64::NEG_INFINITY)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(NumError::AllMaskedRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..c {
                let v = if row[j] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (row[j] - mx).exp()
                };
                data[i * c + j] = v;
                sum += v;
            }
            for j in 0..c {
                data[i * c + j] /= sum;
            }
        }
        let out = Tensor::matrix(n, c, data);
        let y = out.clone();
        Ok(self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; n * c];
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Tensor::matrix(n, c, gx)]
            })),
        ))
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let av = self.value(a).clone();
        let out = av.map(|v| v.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )]
            })),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: VarId) -> VarId {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const B: f64 = 0.044715;
        let av = self.value(a).clone();
        let out = av.map(|x| {
            let u = C * (x + B * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, &x)| {
                            let u = C * (x + B * x * x * x);
                            let t = u.tanh();
                            let du = C * (1.0 + 3.0 * B * x * x);
                            gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect(),
                )]
            })),
        )
    }

    pub fn ln(&mut self, a: VarId) -> VarId {
        let av = self.value(a).clone();
        let out = av.map(f64::ln);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, xv)| gv / xv)
                        .collect(),
                )]
            })),
        )
    }

    /// sqrt(x^2 + eps^2) - eps: a smooth |x| whose gradient vanishes at
    /// zero instead of flipping sign. Agrees with |x| up to eps for
    /// |x| >> eps.
    pub fn smooth_abs(&mut self, a: VarId, eps: f64) -> VarId {
        assert!(eps > 0.0);
        let av = self.value(a).clone();
        let out = av.map(|x| (x * x + eps * eps).sqrt() - eps);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, &xv)| gv * xv / (xv * xv + eps * eps).sqrt())
                        .collect(),
                )]
            })),
        )
    }

    /// |x|, subgradient 0 at the kink.
    pub fn abs(&mut self, a: VarId) -> VarId {
        let av = self.value(a).clone();
        let out = av.map(f64::abs);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, &xv)| {
                            if xv > 0.0 {
                                *gv
                            } else if xv < 0.0 {
                                -*gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )]
            })),
        )
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let av = self.value(a).clone();
        let out = av.map(|v| v * v);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(av.data())
                        .map(|(gv, xv)| 2.0 * xv * gv)
                        .collect(),
                )]
            })),
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.data().iter().sum());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let gv = g.item();
                vec![Tensor::new(
                    shape.clone(),
                    vec![gv; shape.iter().product()],
                )]
            })),
        )
    }

    /// Select rows of a matrix by index (embedding lookup). The adjoint
    /// scatter-adds back into the table.
    pub fn gather_rows(&mut self, table: VarId, indices: &[usize]) -> Result<VarId, NumError> {
        let tv = self.value(table);
        let (rows, c) = (tv.rows(), tv.cols());
        for &ix in indices {
            if ix >= rows {
                return Err(NumError::IdOutOfRange {
                    id: ix,
                    limit: rows,
                });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            data.extend_from_slice(tv.row(ix));
        }
        let out = Tensor::matrix(indices.len(), c, data);
        let indices = indices.to_vec();
        Ok(self.push(
            out,
            vec![table],
            Some(Box::new(move |g| {
                let mut gt = vec![0.0; rows * c];
                for (i, &ix) in indices.iter().enumerate() {
                    for j in 0..c {
                        gt[ix * c + j] += g.data()[i * c + j];
                    }
                }
                vec![Tensor::matrix(rows, c, gt)]
            })),
        ))
    }

    /// Pairwise squared Euclidean distances between rows of an n x m
    /// matrix, as an n x n matrix.
    pub fn pairwise_sq_dist(&mut self, x: VarId) -> VarId {
        let xv = self.value(x).clone();
        let (n, m) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..m {
                    let d = xv.get2(i, c) - xv.get2(j, c);
                    s += d * d;
                }
                data[i * n + j] = s;
            }
        }
        let out = Tensor::matrix(n, n, data);
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..n {
                        let w = g.data()[i * n + j] + g.data()[j * n + i];
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..m {
                            gx[i * m + c] += 2.0 * w * (xv.get2(i, c) - xv.get2(j, c));
                        }
                    }
                }
                vec![Tensor::matrix(n, m, gx)]
            })),
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<VarId, NumError> {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let (n, c) = (xv.rows(), xv.cols());
        if gv.numel() != c || bv.numel() != c {
            return Err(NumError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mu) * istd;
                xhat[i * c + j] = xh;
                data[i * c + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let out = Tensor::matrix(n, c, data);
        let gshape = gv.shape().to_vec();
        let bshape = bv.shape().to_vec();
        Ok(self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let mut gx = vec![0.0; n * c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for i in 0..n {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut dxhat = vec![0.0; c];
                    for j in 0..c {
                        ggamma[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv.data()[j];
                    }
                    let mean_dx = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx_xh =
                        dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (dxhat[j] - mean_dx - xh[j] * mean_dx_xh);
                    }
                }
                vec![
                    Tensor::matrix(n, c, gx),
                    Tensor::new(gshape.clone(), ggamma),
                    Tensor::new(bshape.clone(), gbeta),
                ]
            })),
        ))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: VarId) -> VarId {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, root: VarId) -> Result<Gradients, NumError> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(NumError::NonScalarOutput(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::new(root_val.shape().to_vec(), vec![1.0]));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(back) = &node.back else { continue };
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            let contributions = back(&g);
            debug_assert_eq!(contributions.len(), node.parents.len());
            for (pid, contrib) in node.parents.iter().zip(contributions) {
                match &mut grads[pid.0] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), contrib.shape());
                        for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_masked_entry_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![0.0, f64::NEG_INFINITY]));
        let y = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_hand_value() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![0.70711, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        let v = tape.value(y).data().to_vec();
        assert!((v[0] - 0.6698).abs() < 1e-4, "{:?}", v);
        assert!((v[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 100.0, 99.0, -50.0]));
        let y = tape.row_softmax(x).unwrap();
        for i in 0..2 {
            let s: f64 = tape.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![f64::NEG_INFINITY; 2]));
        assert!(matches!(
            tape.row_softmax(x),
            Err(NumError::AllMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn matmul_gradient_is_linear_map() {
        // f(A) = sum(A*B): dA = ones * B^T
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get(a).unwrap();
        // rows of B^T summed over columns of the ones matrix:
        // each entry (i,k) = sum_j B[k][j]
        assert_eq!(ga.data(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let c = tape.input(Tensor::scalar(3.0));
        let _ = x;
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_on_matrix_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 2, vec![0.0; 4]));
        assert!(matches!(
            tape.backward(x),
            Err(NumError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let table = tape.input(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        let loss = tape.sum(picked);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn pairwise_sq_dist_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]));
        let d = tape.pairwise_sq_dist(x);
        assert_eq!(tape.value(d).data(), &[0.0, 25.0, 25.0, 0.0]);
    }
}
