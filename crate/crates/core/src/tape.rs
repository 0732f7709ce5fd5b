//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The tape is rebuilt for every loss evaluation (the loss topology
//! depends on the window plan), so recording is dynamic: each operation
//! appends a node holding its forward value, and `backward` walks the
//! nodes in reverse order exactly once.

use std::rc::Rc;

use crate::error::{AmfError, Result};
use crate::scalar::Real;
use crate::tensor::{softmax_last_axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    /// out[i] = in[perm[i]]; backward scatter-adds, so duplicate source
    /// indices (gathers) are fine.
    Reorder(usize, Rc<Vec<usize>>),
    /// (m x k) * (k x n)
    MatMul(usize, usize),
    SoftmaxLast(usize),
    Sum(usize),
    SquaredL2(usize),
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .add_scaled(&self.nodes[b.0].value, F::one())
            .expect("add shape mismatch");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .sub(&self.nodes[b.0].value)
            .expect("sub shape mismatch");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(va.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.scale(c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a.0, c), ng)
    }

    /// Gather/permute: out[i] = in[perm[i]], reshaped to `out_shape`.
    pub fn reorder(&mut self, a: Var, perm: Rc<Vec<usize>>, out_shape: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        assert_eq!(
            perm.len(),
            out_shape.iter().product::<usize>(),
            "reorder perm length vs out shape"
        );
        let data: Vec<F> = perm.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::from_vec(out_shape, data).unwrap();
        let ng = self.needs(a);
        self.push(value, Op::Reorder(a.0, perm), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul lhs must be rank 2");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be rank 2");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == F::zero() {
                    continue;
                }
                let row = &db[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in dst.iter_mut().zip(row) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a.0, b.0), ng)
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let value = softmax_last_axis(&self.nodes[a.0].value)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SoftmaxLast(a.0), ng))
    }

    /// Sum of all elements, scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    /// Squared L2 norm of all elements, scalar node.
    pub fn squared_l2(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.data().iter().map(|&v| v * v).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SquaredL2(a.0), ng)
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// query leaves through [`Gradients::grad`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(AmfError::invalid(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                // Keep the gradient for inspection but do not propagate.
                grads[idx] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    accumulate(&mut grads, *b, &g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, &self.nodes);
                    let neg = g.scale(-F::one());
                    accumulate(&mut grads, *b, &neg, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise_mul(&g, &self.nodes[*b].value);
                    let gb = elementwise_mul(&g, &self.nodes[*a].value);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                Op::Scale(a, c) => {
                    let ga = g.scale(*c);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Reorder(a, perm) => {
                    let mut ga = Tensor::zeros(self.nodes[*a].value.shape());
                    for (out_i, &src_i) in perm.iter().enumerate() {
                        ga.data_mut()[src_i] += g.data()[out_i];
                    }
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[*a].value;
                    let vb = &self.nodes[*b].value;
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = vb.shape()[1];
                    // dA = G * B^T
                    let mut ga = vec![F::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = F::zero();
                            for j in 0..n {
                                acc += g.data()[i * n + j] * vb.data()[p * n + j];
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    // dB = A^T * G
                    let mut gb = vec![F::zero(); k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = va.data()[i * k + p];
                            if aip == F::zero() {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += aip * g.data()[i * n + j];
                            }
                        }
                    }
                    let ga = Tensor::from_vec(&[m, k], ga).unwrap();
                    let gb = Tensor::from_vec(&[k, n], gb).unwrap();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                    accumulate(&mut grads, *b, &gb, &self.nodes);
                }
                Op::SoftmaxLast(a) => {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap();
                    let mut ga = vec![F::zero(); y.numel()];
                    for (row, (yrow, grow)) in y
                        .data()
                        .chunks(cols)
                        .zip(g.data().chunks(cols))
                        .enumerate()
                    {
                        let dot: F = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                        for (c, (&yv, &gv)) in yrow.iter().zip(grow).enumerate() {
                            ga[row * cols + c] = yv * (gv - dot);
                        }
                    }
                    let ga = Tensor::from_vec(y.shape(), ga).unwrap();
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::Sum(a) => {
                    let gs = g.scalar_value();
                    let ga = Tensor::filled(self.nodes[*a].value.shape(), gs);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
                Op::SquaredL2(a) => {
                    let gs = g.scalar_value();
                    let two = F::lit(2.0);
                    let ga = self.nodes[*a].value.scale(two * gs);
                    accumulate(&mut grads, *a, &ga, &self.nodes);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn elementwise_mul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_vec(a.shape(), data).unwrap()
}

fn accumulate<F: Real>(
    grads: &mut [Option<Tensor<F>>],
    idx: usize,
    g: &Tensor<F>,
    nodes: &[Node<F>],
) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => {
            let sum = existing.add_scaled(g, F::one()).expect("grad shape");
            *existing = sum;
        }
        slot @ None => *slot = Some(g.clone()),
    }
}

pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }
}

/// Compare an analytic gradient against central finite differences on at
/// most `max_samples` seeded random coordinates.
///
/// Returns the max over sampled coordinates of
/// |analytic - fd| / max(|analytic|, 1e-8); if the analytic gradient is
/// identically zero the max absolute difference is returned instead.
pub fn check_gradient<F: Real>(
    mut eval: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    analytic: &Tensor<F>,
    step: F,
    max_samples: usize,
    seed: u64,
) -> Result<F> {
    if step <= F::zero() {
        return Err(AmfError::invalid("check_gradient step must be positive"));
    }
    if x.shape() != analytic.shape() {
        return Err(AmfError::shape("analytic gradient shape mismatch"));
    }
    let n = x.numel();
    let coords: Vec<usize> = if n <= max_samples {
        (0..n).collect()
    } else {
        // Partial Fisher-Yates for distinct coordinates.
        let mut s = crate::rng::Stream::new(seed, "gradcheck-coords");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..max_samples {
            let j = i + s.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(max_samples);
        pool
    };

    let zero_analytic = analytic.data().iter().all(|&v| v == F::zero());
    let eps = F::lit(1e-8);
    let mut worst = F::zero();
    let mut xp = x.clone();
    for &c in &coords {
        let orig = xp.data()[c];
        xp.data_mut()[c] = orig + step;
        let fp = eval(&xp)?;
        xp.data_mut()[c] = orig - step;
        let fm = eval(&xp)?;
        xp.data_mut()[c] = orig;
        let fd = (fp - fm) / (F::lit(2.0) * step);
        let a = analytic.data()[c];
        let err = if zero_analytic {
            (a - fd).abs()
        } else {
            (a - fd).abs() / a.abs().max(eps)
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadratic_loss(tape: &mut Tape<f64>, x: Var) -> Var {
        tape.squared_l2(x)
    }

    #[test]
    fn squared_norm_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = quadratic_loss(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let g = grads.grad(x).unwrap();
        assert_eq!(g.data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.1, 5.0]).unwrap());
        let sm = tape.softmax_last(x).unwrap();
        let loss = tape.sum(sm);
        let grads = tape.backward(loss).unwrap();
        let g = grads.grad(x).unwrap();
        assert!(g.max_abs() < 1e-14, "rows sum to 1 identically");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn check_gradient_rejects_zero_step() {
        let x = Tensor::<f64>::zeros(&[2]);
        let a = Tensor::<f64>::zeros(&[2]);
        let r = check_gradient(|_| Ok(0.0), &x, &a, 0.0, 8, 1);
        assert!(r.is_err());
    }

    #[test]
    fn quadratic_passes_finite_differences() {
        let x = Tensor::from_vec(&[4], vec![0.7, -0.3, 1.1, 0.05]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = quadratic_loss(&mut tape, xv);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.grad(xv).unwrap().clone();
        let err = check_gradient(
            |t| {
                let mut tape = Tape::new();
                let v = tape.leaf(t.clone());
                let l = quadratic_loss(&mut tape, v);
                Ok(tape.value(l).scalar_value())
            },
            &x,
            &analytic,
            1e-3,
            64,
            9,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn softmax_composed_loss_passes_finite_differences() {
        // loss = || softmax(x) - target ||^2
        let x = Tensor::from_vec(&[1, 4], vec![0.2, -0.5, 0.9, 0.0]).unwrap();
        let target = Tensor::from_vec(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let build = |t: &Tensor<f64>| -> (Tape<f64>, Var, Var) {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone());
            let sm = tape.softmax_last(v).unwrap();
            let tg = tape.constant(target.clone());
            let d = tape.sub(sm, tg);
            let l = tape.squared_l2(d);
            (tape, v, l)
        };
        let (tape, v, l) = build(&x);
        let grads = tape.backward(l).unwrap();
        let analytic = grads.grad(v).unwrap().clone();
        let err = check_gradient(
            |t| {
                let (tape, _, l) = build(t);
                Ok(tape.value(l).scalar_value())
            },
            &x,
            &analytic,
            1e-3,
            64,
            11,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn matmul_and_reorder_pass_finite_differences() {
        let x = Tensor::from_vec(&[2, 3], vec![0.4, -1.2, 0.3, 0.8, 0.1, -0.6]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![0.5, -0.1, 0.2, 0.9, -0.4, 0.3]).unwrap();
        let perm = Rc::new(vec![3usize, 0, 2, 1]);
        let build = |t: &Tensor<f64>| -> (Tape<f64>, Var, Var) {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone());
            let wc = tape.constant(w.clone());
            let y = tape.matmul(v, wc);
            let r = tape.reorder(y, perm.clone(), &[4]);
            let l = tape.squared_l2(r);
            (tape, v, l)
        };
        let (tape, v, l) = build(&x);
        let grads = tape.backward(l).unwrap();
        let analytic = grads.grad(v).unwrap().clone();
        let err = check_gradient(
            |t| {
                let (tape, _, l) = build(t);
                Ok(tape.value(l).scalar_value())
            },
            &x,
            &analytic,
            1e-4,
            64,
            13,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    proptest! {
        // grad(a*L1 + b*L2) = a grad(L1) + b grad(L2) on small random graphs.
        #[test]
        fn backward_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut s = crate::rng::Stream::new(seed, "proptest-linear");
            let x = Tensor::from_vec(&[5], (0..5).map(|_| s.uniform_range(-1.0, 1.0)).collect()).unwrap();
            let t1 = Tensor::from_vec(&[5], (0..5).map(|_| s.uniform_range(-1.0, 1.0)).collect()).unwrap();

            let grad_of = |wa: f64, wb: f64| -> Tensor<f64> {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                // L1 = ||x - t1||^2, L2 = sum(softmax(x))-ish nonlinearity via squared sum
                let t1c = tape.constant(t1.clone());
                let d = tape.sub(xv, t1c);
                let l1 = tape.squared_l2(d);
                let sq = tape.mul(xv, xv);
                let l2 = tape.sum(sq);
                let l1s = tape.scale(l1, wa);
                let l2s = tape.scale(l2, wb);
                let total = tape.add(l1s, l2s);
                let grads = tape.backward(total).unwrap();
                grads.grad(xv).unwrap().clone()
            };

            let g1 = grad_of(1.0, 0.0);
            let g2 = grad_of(0.0, 1.0);
            let gc = grad_of(a, b);
            let expect = g1.scale(a).add_scaled(&g2.scale(b), 1.0).unwrap();
            for (got, want) in gc.data().iter().zip(expect.data()) {
                prop_assert!((got - want).abs() < 1e-10);
            }
        }
    }
}
