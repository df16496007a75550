//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::tensor::{softmax_row, MatmulShape, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        a: Var,
        c: Arc<Vec<T>>,
    },
    Scale {
        a: Var,
        c: T,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    MaskFill {
        a: Var,
        mask: Arc<Vec<bool>>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    SwapAxes12 {
        a: Var,
    },
    TakeLast {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<String>,
}

/// Gradients keyed by parameter name, in registration order.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

/// Output of [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropyOut {
    pub loss: Var,
    /// Number of non-masked positions averaged over. Zero means every
    /// position was padding and the loss is defined as 0.
    pub counted: usize,
}

impl CrossEntropyOut {
    pub fn all_masked(&self) -> bool {
        self.counted == 0
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named trainable leaf.
    pub fn param(&self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes.borrow_mut()[v.0].param = Some(name.into());
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` over the last two axes.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let spec = MatmulShape::infer(av.shape(), bv.shape(), trans_b)?;
            let mut out = vec![T::zero(); spec.out_len()];
            spec.run(av.data(), bv.data(), &mut out, false, trans_b);
            Tensor::from_parts(spec.out_shape, out)
        };
        Ok(self.push(out, Op::MatMul { a, b, trans_b }))
    }

    /// Elementwise sum. `b` may have the shape of a suffix of `a`'s shape and
    /// is then broadcast over the leading axes (bias rows, positional tables).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            if !av.shape().ends_with(bv.shape()) {
                return Err(TensorError::Shape {
                    op: "add",
                    left: av.shape().to_vec(),
                    right: bv.shape().to_vec(),
                });
            }
            let bd = bv.data();
            let data = av
                .data()
                .chunks(bd.len())
                .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| x + y))
                .collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        };
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&self, a: Var, c: Vec<T>) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if c.len() != av.len() {
                return Err(TensorError::Shape {
                    op: "mul_const",
                    left: av.shape().to_vec(),
                    right: vec![c.len()],
                });
            }
            let data = av.data().iter().zip(&c).map(|(&x, &m)| x * m).collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        };
        Ok(self.push(out, Op::MulConst { a, c: Arc::new(c) }))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu { a })
    }

    pub fn softmax(&self, a: Var) -> Var {
        let out = self.value(a).softmax();
        self.push(out, Op::Softmax { a })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, normed, rstd) = {
            let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
            let d = xv.last_dim();
            if gv.shape() != [d] || bv.shape() != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: gv.shape().to_vec(),
                });
            }
            let eps = T::of(eps);
            let inv_d = T::one() / T::of(d as f64);
            let mut out = Vec::with_capacity(xv.len());
            let mut normed = Vec::with_capacity(xv.len());
            let mut rstds = Vec::with_capacity(xv.len() / d);
            for row in xv.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rstd = T::one() / (var + eps).sqrt();
                rstds.push(rstd);
                for (j, &v) in row.iter().enumerate() {
                    let n = (v - mean) * rstd;
                    normed.push(n);
                    out.push(n * gv.data()[j] + bv.data()[j]);
                }
            }
            (Tensor::from_parts(xv.shape().to_vec(), out), normed, rstds)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
        ))
    }

    /// Sets positions where `mask` is true to `-inf`. `mask` has the full
    /// shape of `a`.
    pub fn mask_fill(&self, a: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if mask.len() != av.len() {
                return Err(TensorError::Shape {
                    op: "mask_fill",
                    left: av.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
            let data = av
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| if m { T::neg_infinity() } else { x })
                .collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        };
        Ok(self.push(out, Op::MaskFill { a, mask }))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id, producing
    /// `[ids.len(), d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let tv = self.value(table);
            let (vocab, d) = (tv.shape()[0], tv.last_dim());
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(TensorError::Index {
                        index: id,
                        size: vocab,
                    });
                }
                data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Swaps axes 1 and 2 of a 4-D tensor: `[b, x, y, z] -> [b, y, x, z]`.
    pub fn swap_axes12(&self, a: Var) -> Result<Var> {
        let out = {
            let av = self.value(a);
            if av.shape().len() != 4 {
                return Err(TensorError::Contract(format!(
                    "swap_axes12 needs 4 dims, got {:?}",
                    av.shape()
                )));
            }
            swap12(&av)
        };
        Ok(self.push(out, Op::SwapAxes12 { a }))
    }

    /// Keeps only the last index of the second-to-last axis:
    /// `[.., n, d] -> [.., 1, d]`.
    pub fn take_last(&self, a: Var) -> Result<Var> {
        let out = {
            let av = self.value(a);
            let s = av.shape();
            if s.len() < 2 {
                return Err(TensorError::Contract("take_last needs 2+ dims".into()));
            }
            let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
            let data = av
                .data()
                .chunks(n * d)
                .flat_map(|block| block[(n - 1) * d..].iter().copied())
                .collect();
            let mut shape = s.to_vec();
            let len = shape.len();
            shape[len - 2] = 1;
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, Op::TakeLast { a }))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum { a })
    }

    /// Mean token-level cross-entropy of `logits` (`[.., vocab]`) against
    /// `targets`, skipping positions where `keep` is false.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[usize],
        keep: &[bool],
    ) -> Result<CrossEntropyOut> {
        let (loss, probs, weights, counted) = {
            let lv = self.value(logits);
            let ce = cross_entropy_kernel(&lv, targets, keep)?;
            (ce.loss, ce.probs, ce.weights, ce.counted)
        };
        let loss = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
        );
        Ok(CrossEntropyOut { loss, counted })
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets a
    /// gradient of its own shape; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            if node.param.is_some() {
                grads[id] = Some(g);
            }
        }

        let mut out = Gradients::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let shape = node.value.shape().to_vec();
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.insert(name.clone(), Tensor::from_parts(shape, g));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let spec =
                MatmulShape::infer(av.shape(), bv.shape(), *trans_b).expect("forward shapes");
            let (m, k, n) = (spec.m, spec.k, spec.n);
            accumulate(grads, *a, av.len(), |ga| {
                // dA = dC · op(B)ᵀ
                let back = MatmulShape {
                    batch: spec.batch,
                    m,
                    k: n,
                    n: k,
                    b_batched: spec.b_batched,
                    out_shape: vec![],
                };
                back.run(g, bv.data(), ga, false, !*trans_b);
            });
            accumulate(grads, *b, bv.len(), |gb| {
                for bi in 0..spec.batch {
                    let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let g_s = &g[bi * m * n..(bi + 1) * m * n];
                    let gb_s = if spec.b_batched {
                        &mut gb[bi * k * n..(bi + 1) * k * n]
                    } else {
                        &mut gb[..]
                    };
                    if *trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        crate::tensor::gemm(g_s, a_s, gb_s, n, m, k, true, false);
                    } else {
                        // dB = Aᵀ · dC
                        crate::tensor::gemm(a_s, g_s, gb_s, k, m, n, true, false);
                    }
                }
            });
        }
        Op::Add { a, b } => {
            accumulate(grads, *a, g.len(), |ga| add_into(ga, g));
            let blen = val(*b).len();
            accumulate(grads, *b, blen, |gb| {
                for chunk in g.chunks(blen) {
                    add_into(gb, chunk);
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, *a, g.len(), |ga| {
                for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * y;
                }
            });
            accumulate(grads, *b, g.len(), |gb| {
                for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * x;
                }
            });
        }
        Op::MulConst { a, c } => accumulate(grads, *a, g.len(), |ga| {
            for ((o, &gi), &m) in ga.iter_mut().zip(g).zip(c.iter()) {
                *o += gi * m;
            }
        }),
        Op::Scale { a, c } => accumulate(grads, *a, g.len(), |ga| {
            for (o, &gi) in ga.iter_mut().zip(g) {
                *o += gi * *c;
            }
        }),
        Op::Relu { a } => {
            let x = val(*a).data();
            accumulate(grads, *a, g.len(), |ga| {
                for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                    if xi > T::zero() {
                        *o += gi;
                    }
                }
            });
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let n = node.value.last_dim();
            accumulate(grads, *a, g.len(), |ga| {
                for ((o, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                    for ((oi, &gi), &yi) in o.iter_mut().zip(gr).zip(yr) {
                        *oi += yi * (gi - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
        } => {
            let d = node.value.last_dim();
            let gv = val(*gain).data();
            accumulate(grads, *gain, d, |gg| {
                for (gr, nr) in g.chunks(d).zip(normed.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * nr[j];
                    }
                }
            });
            accumulate(grads, *bias, d, |gb| {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            });
            let inv_d = T::one() / T::of(d as f64);
            accumulate(grads, *x, g.len(), |gx| {
                for (((o, gr), nr), &rs) in gx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(normed.chunks(d))
                    .zip(rstd)
                {
                    let mut mean_dn = T::zero();
                    let mut mean_dn_n = T::zero();
                    for j in 0..d {
                        let dn = gr[j] * gv[j];
                        mean_dn += dn;
                        mean_dn_n += dn * nr[j];
                    }
                    mean_dn *= inv_d;
                    mean_dn_n *= inv_d;
                    for j in 0..d {
                        let dn = gr[j] * gv[j];
                        o[j] += rs * (dn - mean_dn - nr[j] * mean_dn_n);
                    }
                }
            });
        }
        Op::MaskFill { a, mask } => accumulate(grads, *a, g.len(), |ga| {
            for ((o, &gi), &m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                if !m {
                    *o += gi;
                }
            }
        }),
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let d = tv.last_dim();
            accumulate(grads, *table, tv.len(), |gt| {
                for (row, &id) in g.chunks(d).zip(ids) {
                    add_into(&mut gt[id * d..(id + 1) * d], row);
                }
            });
        }
        Op::Reshape { a } => accumulate(grads, *a, g.len(), |ga| add_into(ga, g)),
        Op::SwapAxes12 { a } => {
            let back = swap12(&Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()));
            accumulate(grads, *a, g.len(), |ga| add_into(ga, back.data()));
        }
        Op::TakeLast { a } => {
            let s = val(*a).shape();
            let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
            let len = val(*a).len();
            accumulate(grads, *a, len, |ga| {
                for (block, gr) in ga.chunks_mut(n * d).zip(g.chunks(d)) {
                    add_into(&mut block[(n - 1) * d..], gr);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let v = val(*logits).last_dim();
            let up = g[0];
            accumulate(grads, *logits, probs.len(), |gl| {
                for (pos, ((o, p), &w)) in gl
                    .chunks_mut(v)
                    .zip(probs.chunks(v))
                    .zip(weights)
                    .enumerate()
                {
                    if w == T::zero() {
                        continue;
                    }
                    for (oi, &pi) in o.iter_mut().zip(p) {
                        *oi += up * w * pi;
                    }
                    o[targets[pos]] -= up * w;
                }
            });
        }
        Op::Sum { a } => {
            let len = val(*a).len();
            accumulate(grads, *a, len, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn swap12<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (b, x, y, z) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for yi in 0..y {
            for xi in 0..x {
                let base = ((bi * x + xi) * y + yi) * z;
                out.extend_from_slice(&src[base..base + z]);
            }
        }
    }
    Tensor::from_parts(vec![b, y, x, z], out)
}

pub(crate) struct CeKernel<T> {
    pub loss: T,
    pub probs: Vec<T>,
    pub weights: Vec<T>,
    pub counted: usize,
}

pub(crate) fn cross_entropy_kernel<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    keep: &[bool],
) -> Result<CeKernel<T>> {
    let v = logits.last_dim();
    let positions = logits.len() / v;
    if targets.len() != positions || keep.len() != positions {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some((&bad, _)) = targets.iter().zip(keep).find(|(&t, &k)| k && t >= v) {
        return Err(TensorError::Index {
            index: bad,
            size: v,
        });
    }
    let counted = keep.iter().filter(|&&k| k).count();
    let mut probs = logits.data().to_vec();
    let mut weights = vec![T::zero(); positions];
    let mut loss = T::zero();
    if counted == 0 {
        log::warn!("cross_entropy: every position is masked; loss defined as 0");
        return Ok(CeKernel {
            loss,
            probs,
            weights,
            counted,
        });
    }
    let w = T::one() / T::of(counted as f64);
    for (pos, row) in probs.chunks_mut(v).enumerate() {
        if !keep[pos] {
            continue;
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        loss += (lse - row[targets[pos]]) * w;
        softmax_row(row);
        weights[pos] = w;
    }
    Ok(CeKernel {
        loss,
        probs,
        weights,
        counted,
    })
}

/// Masked mean cross-entropy outside any graph. Returns `(loss, counted)`.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    keep: &[bool],
) -> Result<(T, usize)> {
    let k = cross_entropy_kernel(logits, targets, keep)?;
    Ok((k.loss, k.counted))
}
