//! Eager compute graph with reverse-mode differentiation.
//!
//! Ops execute at insertion time and record themselves on a tape; one
//! `backward` pass from a scalar loss fills a gradient for every node that
//! requires one. The graph is generic over the element type so the same
//! network code runs in `f32` for training and `f64` for gradient checks.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// max(0, x)
    Rect,
    /// x for x >= 0, slope * x otherwise
    LeakyRect(f64),
    /// logistic map into (0, 1)
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Upsample {
        input: NodeId,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Sub {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    Sum {
        input: NodeId,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

/// Gradient per node, filled by `Graph::backward`.
pub struct Gradients<E: Element = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. `id`. Zero tensor for nodes that require
    /// grad but do not reach the loss; `None` for nodes that never track one.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<E>> {
        self.grads[id.0].take()
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient tracked).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<E>, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::invalid("conv2d: stride must be >= 1"));
        }
        let (c_in, h, w) = self.value(input).dims3()?;
        let (_, wc_in, kh, kw) = self.value(weight).dims4()?;
        if kh != kw {
            return Err(Error::invalid("conv2d: kernel must be square"));
        }
        if wc_in != c_in {
            return Err(Error::invalid(format!(
                "conv2d: input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let (c_out, _, _, _) = self.value(weight).dims4()?;
        if self.value(bias).shape() != [c_out] {
            return Err(Error::invalid("conv2d: bias must have one value per output channel"));
        }
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        );
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(Error::invalid("conv_transpose2d: stride must be >= 1"));
        }
        let (c_in, _, _) = self.value(input).dims3()?;
        let (wc_in, c_out, kh, kw) = self.value(weight).dims4()?;
        if kh != kw {
            return Err(Error::invalid("conv_transpose2d: kernel must be square"));
        }
        if wc_in != c_in {
            return Err(Error::invalid(format!(
                "conv_transpose2d: input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::invalid(
                "conv_transpose2d: bias must have one value per output channel",
            ));
        }
        let out = kernels::conv_transpose2d(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
        );
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Concatenate along the channel axis; all inputs must share H x W.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat: need at least one input"));
        }
        let (_, h, w) = self.value(inputs[0]).dims3()?;
        let mut c_total = 0;
        for &id in inputs {
            let (c, ih, iw) = self.value(id).dims3()?;
            if (ih, iw) != (h, w) {
                return Err(Error::invalid(format!(
                    "concat: spatial mismatch {ih}x{iw} vs {h}x{w}"
                )));
            }
            c_total += c;
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for &id in inputs {
            data.extend_from_slice(self.value(id).data());
        }
        let out = Tensor::new(vec![c_total, h, w], data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Bilinear upsample to `(target_h, target_w)`; target must not shrink.
    pub fn upsample(&mut self, input: NodeId, target_h: usize, target_w: usize) -> Result<NodeId> {
        let (_, h, w) = self.value(input).dims3()?;
        if target_h < h || target_w < w {
            return Err(Error::invalid(format!(
                "upsample: target {target_h}x{target_w} smaller than input {h}x{w}"
            )));
        }
        let out = kernels::upsample_bilinear(self.value(input), target_h, target_w);
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Upsample { input }, rg))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let out = {
            let x = self.value(input);
            let data = x
                .data()
                .iter()
                .map(|&v| match kind {
                    Activation::Rect => {
                        if v > E::zero() {
                            v
                        } else {
                            E::zero()
                        }
                    }
                    Activation::LeakyRect(slope) => {
                        if v > E::zero() {
                            v
                        } else {
                            E::from_f64(slope) * v
                        }
                    }
                    Activation::Sigmoid => E::one() / (E::one() + (-v).exp()),
                })
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
        };
        let rg = self.requires_grad(input);
        self.push(out, Op::Activation { input, kind }, rg)
    }

    fn elementwise(
        &mut self,
        lhs: NodeId,
        rhs: NodeId,
        name: &str,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        let a = self.value(lhs);
        let b = self.value(rhs);
        if a.shape() != b.shape() {
            return Err(Error::invalid(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let out = self.elementwise(lhs, rhs, "add", |a, b| a + b)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Add { lhs, rhs }, rg))
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let out = self.elementwise(lhs, rhs, "sub", |a, b| a - b)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Sub { lhs, rhs }, rg))
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let out = self.elementwise(lhs, rhs, "mul", |a, b| a * b)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Mul { lhs, rhs }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let f = E::from_f64(factor);
        let x = self.value(input);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * f).collect())
            .expect("shape preserved");
        let rg = self.requires_grad(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    /// Full reduction to a scalar (shape [1]).
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let mut acc = E::zero();
        for &v in self.value(input).data() {
            acc = acc + v;
        }
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(acc), Op::Sum { input }, rg)
    }

    /// Reverse sweep from a scalar loss node. Returns a gradient for every
    /// node with `requires_grad`; nodes that do not reach the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(Tensor::zeros(n.value.shape().to_vec()))
                } else {
                    None
                }
            })
            .collect();
        if grads[loss.0].is_none() {
            // A loss over constants only; nothing to propagate.
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(vec![1], E::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                    );
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &g,
                        *stride,
                        *padding,
                    );
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Concat { inputs } => {
                    let mut offset = 0;
                    for &inp in inputs {
                        let n = self.value(inp).numel();
                        let slice = &g.data()[offset..offset + n];
                        let dt = Tensor::new(self.value(inp).shape().to_vec(), slice.to_vec())
                            .expect("concat slice");
                        accumulate(&mut grads, inp, dt);
                        offset += n;
                    }
                }
                Op::Upsample { input } => {
                    let (_, h, w) = self.value(*input).dims3().expect("rank-3");
                    let dx = kernels::upsample_bilinear_backward(&g, h, w);
                    accumulate(&mut grads, *input, dx);
                }
                Op::Activation { input, kind } => {
                    let dx: Vec<E> = match kind {
                        Activation::Rect => self
                            .value(*input)
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gv)| if x > E::zero() { gv } else { E::zero() })
                            .collect(),
                        Activation::LeakyRect(slope) => {
                            let s = E::from_f64(*slope);
                            self.value(*input)
                                .data()
                                .iter()
                                .zip(g.data())
                                .map(|(&x, &gv)| if x > E::zero() { gv } else { gv * s })
                                .collect()
                        }
                        // d sigmoid = y * (1 - y), reuse the forward output
                        Activation::Sigmoid => self.nodes[idx]
                            .value
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(&y, &gv)| gv * y * (E::one() - y))
                            .collect(),
                    };
                    let dt = Tensor::new(self.value(*input).shape().to_vec(), dx).expect("shape");
                    accumulate(&mut grads, *input, dt);
                }
                Op::Add { lhs, rhs } => {
                    accumulate(&mut grads, *lhs, g.clone());
                    accumulate(&mut grads, *rhs, g);
                }
                Op::Sub { lhs, rhs } => {
                    accumulate(&mut grads, *lhs, g.clone());
                    let neg = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|&v| -v).collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads, *rhs, neg);
                }
                Op::Mul { lhs, rhs } => {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(*rhs).data())
                            .map(|(&gv, &b)| gv * b)
                            .collect(),
                    )
                    .expect("shape");
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(*lhs).data())
                            .map(|(&gv, &a)| gv * a)
                            .collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads, *lhs, da);
                    accumulate(&mut grads, *rhs, db);
                }
                Op::Scale { input, factor } => {
                    let f = E::from_f64(*factor);
                    let dt = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|&v| v * f).collect(),
                    )
                    .expect("shape");
                    accumulate(&mut grads, *input, dt);
                }
                Op::Sum { input } => {
                    let gv = g.data()[0];
                    let dt = Tensor::full(self.value(*input).shape().to_vec(), gv);
                    accumulate(&mut grads, *input, dt);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Element>(grads: &mut [Option<Tensor<E>>], id: NodeId, delta: Tensor<E>) {
    if let Some(g) = grads[id.0].as_mut() {
        debug_assert_eq!(g.shape(), delta.shape());
        for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a = *a + *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_diff, rel_err_l2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f64).collect()).unwrap(),
            false,
        );
        let w = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, vec![2, 5, 5]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, vec![3]);
        let mut g = Graph::<f64>::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let bi = g.constant(b.clone());
        let y = g.conv2d(xi, wi, bi, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 3, 3]);

        // direct quadruple-loop summation
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += x.data()[ci * 25 + (oy + ky) * 5 + (ox + kx)]
                                    * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    let got = g.value(y).data()[co * 9 + oy * 3 + ox];
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(vec![1]));
        assert!(g.conv2d(x, w, b, 1, 1).is_err());
        assert!(g.conv_transpose2d(x, w, b, 2, 1).is_err());
    }

    #[test]
    fn concat_single_is_identity_copy() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap());
        let y = g.concat(&[x]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn concat_shapes_and_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![3, 8, 8]));
        let b = g.constant(Tensor::zeros(vec![1, 8, 8]));
        let y = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 8, 8]);
        let c = g.constant(Tensor::zeros(vec![1, 4, 8]));
        assert!(g.concat(&[a, c]).is_err());
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 4]));
        assert!(g.upsample(x, 2, 4).is_err());
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3], vec![-1.0, -0.5, -2.0]).unwrap());
        let r = g.activation(x, Activation::Rect);
        assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        let l = g.activation(x, Activation::LeakyRect(0.2));
        assert!((g.value(l).data()[0] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 2, 2], vec![0.5; 8]).unwrap(), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2, 2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_nodes_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap(), true);
        let orphan = g.leaf(Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap(), true);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(orphan).unwrap().data().iter().all(|&v| v == 0.0));
    }

    /// loss = sum(conv2d(x, w)^2) / 2 against central finite differences.
    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, vec![2, 6, 6]);
        let w0 = rand_tensor(&mut rng, vec![3, 2, 4, 4]);
        let b0 = rand_tensor(&mut rng, vec![3]);

        let eval = |leaves: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(leaves[0].clone(), true);
            let w = g.leaf(leaves[1].clone(), true);
            let b = g.leaf(leaves[2].clone(), true);
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            let sq = g.mul(y, y).unwrap();
            let s = g.sum(sq);
            let loss = g.scale(s, 0.5);
            (g, vec![x, w, b], loss)
        };

        let leaves = vec![x0, w0, b0];
        let (g, ids, loss) = eval(&leaves);
        let grads = g.backward(loss).unwrap();
        let fd = finite_diff(&leaves, 1e-3, |l| {
            let (g, _, loss) = eval(l);
            g.value(loss).data()[0]
        });
        for (i, id) in ids.iter().enumerate() {
            let err = rel_err_l2(grads.get(*id).unwrap().data(), fd[i].data());
            assert!(err < 1e-4, "leaf {i}: rel err {err}");
        }
    }

    #[test]
    fn stacked_convolutions_chain_rule_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = rand_tensor(&mut rng, vec![1, 8, 8]);
        let w1 = rand_tensor(&mut rng, vec![2, 1, 4, 4]);
        let w2 = rand_tensor(&mut rng, vec![1, 2, 3, 3]);

        let eval = |leaves: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(leaves[0].clone(), true);
            let w1 = g.leaf(leaves[1].clone(), true);
            let w2 = g.leaf(leaves[2].clone(), true);
            let b1 = g.constant(Tensor::zeros(vec![2]));
            let b2 = g.constant(Tensor::zeros(vec![1]));
            let h = g.conv2d(x, w1, b1, 2, 1).unwrap();
            let h = g.activation(h, Activation::LeakyRect(0.2));
            let y = g.conv2d(h, w2, b2, 1, 1).unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.sum(sq);
            (g, vec![x, w1, w2], loss)
        };

        let leaves = vec![x0, w1, w2];
        let (g, ids, loss) = eval(&leaves);
        let grads = g.backward(loss).unwrap();
        let fd = finite_diff(&leaves, 1e-3, |l| {
            let (g, _, loss) = eval(l);
            g.value(loss).data()[0]
        });
        for (i, id) in ids.iter().enumerate() {
            let err = rel_err_l2(grads.get(*id).unwrap().data(), fd[i].data());
            assert!(err < 1e-4, "leaf {i}: rel err {err}");
        }
    }

    #[test]
    fn concat_gradient_scatters_to_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a0 = rand_tensor(&mut rng, vec![2, 3, 3]);
        let b0 = rand_tensor(&mut rng, vec![1, 3, 3]);
        let m = rand_tensor(&mut rng, vec![3, 3, 3]);

        let eval = |leaves: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let a = g.leaf(leaves[0].clone(), true);
            let b = g.leaf(leaves[1].clone(), true);
            let mc = g.constant(m.clone());
            let y = g.concat(&[a, b]).unwrap();
            let y = g.mul(y, mc).unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.sum(sq);
            (g, vec![a, b], loss)
        };
        let leaves = vec![a0, b0];
        let (g, ids, loss) = eval(&leaves);
        let grads = g.backward(loss).unwrap();
        let fd = finite_diff(&leaves, 1e-3, |l| {
            let (g, _, loss) = eval(l);
            g.value(loss).data()[0]
        });
        for (i, id) in ids.iter().enumerate() {
            let err = rel_err_l2(grads.get(*id).unwrap().data(), fd[i].data());
            assert!(err < 1e-4, "leaf {i}: rel err {err}");
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // keep values away from the kink at 0 so central differences are clean
        let data: Vec<f64> = (0..27)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x0 = Tensor::new(vec![3, 3, 3], data).unwrap();
        for kind in [
            Activation::Rect,
            Activation::LeakyRect(0.2),
            Activation::Sigmoid,
        ] {
            let eval = |leaves: &[Tensor<f64>]| {
                let mut g = Graph::<f64>::new();
                let x = g.leaf(leaves[0].clone(), true);
                let y = g.activation(x, kind);
                let sq = g.mul(y, y).unwrap();
                let loss = g.sum(sq);
                (g, x, loss)
            };
            let leaves = vec![x0.clone()];
            let (g, id, loss) = eval(&leaves);
            let grads = g.backward(loss).unwrap();
            let fd = finite_diff(&leaves, 1e-4, |l| {
                let (g, _, loss) = eval(l);
                g.value(loss).data()[0]
            });
            let err = rel_err_l2(grads.get(id).unwrap().data(), fd[0].data());
            assert!(err < 1e-4, "{kind:?}: rel err {err}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rand_tensor(&mut rng, vec![3, 16, 16]);
        let w = rand_tensor(&mut rng, vec![8, 3, 4, 4]);
        let b = rand_tensor(&mut rng, vec![8]);
        let run = || {
            let mut g = Graph::<f64>::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            let bi = g.constant(b.clone());
            let y = g.conv2d(xi, wi, bi, 2, 1).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    /// Encoder/decoder 4x4 stride-2 pad-1 shape postconditions at 2^n.
    #[test]
    fn stride2_shape_postconditions_all_resolutions() {
        for n in 2..=8u32 {
            let r = 1usize << n;
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::zeros(vec![1, r, r]));
            let w = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
            let b = g.constant(Tensor::zeros(vec![1]));
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            assert_eq!(g.value(y).shape(), &[1, r / 2, r / 2]);
            let wt = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
            let z = g.conv_transpose2d(y, wt, b, 2, 1).unwrap();
            assert_eq!(g.value(z).shape(), &[1, r, r]);
        }
    }
}
