use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Identity of a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant or parameter input. No backward rule.
    Leaf,
    Add,
    Sub,
    /// `[m,n] + [n]`, the bias/batch broadcast.
    AddBroadcast,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    Matmul,
    Concat,
    Slice { start: usize },
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    SqL2,
    /// Fused log-space softmax cross-entropy against a single target id.
    SoftmaxXent { target: usize, probs: Vec<f64> },
    /// Row lookup into an embedding matrix.
    Embed { index: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Wengert list: forward ops are recorded in topological order, then
/// replayed in reverse by [`Tape::backward`]. Single-writer.
pub struct Tape {
    nodes: Vec<Node>,
    named: HashMap<String, (NodeId, bool)>,
}

/// Gradients produced by one backward pass, addressable by node or by
/// parameter name.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    by_name: HashMap<String, NodeId>,
}

impl Gradients {
    pub fn by_node(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).and_then(|id| self.grads[id.0].as_ref())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(|s| s.as_str())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), named: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        Ok(id)
    }

    /// Record a constant; gradients do not flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, inputs: vec![], value });
        id
    }

    /// Record a named parameter leaf. Its gradient is retrievable by name
    /// after backward(). Re-injecting the same name returns the existing
    /// node so gradient contributions accumulate.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&(id, trainable)) = self.named.get(name) {
            assert!(trainable, "{name} already on tape as a frozen constant");
            return id;
        }
        let id = self.constant(value);
        self.named.insert(name.to_string(), (id, true));
        id
    }

    /// Record a named frozen constant, deduplicated by name.
    pub fn named_constant(&mut self, name: &str, value: Tensor) -> NodeId {
        if let Some(&(id, trainable)) = self.named.get(name) {
            assert!(!trainable, "{name} already on tape as a trainable parameter");
            return id;
        }
        let id = self.constant(value);
        self.named.insert(name.to_string(), (id, false));
        id
    }

    // ── Kernels ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Add, vec![a, b], value, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Sub, vec![a, b], value, "sub")
    }

    /// `[m,n] + [n]` with the second operand broadcast across rows.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ok = ta.shape().len() == 2 && tb.shape().len() == 1 && ta.shape()[1] == tb.shape()[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let n = tb.shape()[0];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::AddBroadcast, vec![a, b], value, "add_broadcast")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Mul, vec![a, b], value, "mul")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| -x).collect());
        self.push(Op::Neg, vec![a], value, "neg")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        self.push(Op::Scale(c), vec![a], value, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x + c).collect());
        self.push(Op::AddScalar, vec![a], value, "add_scalar")
    }

    /// `[m,k] × [k,n] → [m,n]` or `[m,k] × [k] → [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if ta.shape().len() != 2 {
            return Err(mismatch());
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let value = match tb.shape() {
            [kk] if *kk == k => {
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &ta.data()[i * k..(i + 1) * k];
                    out[i] = row.iter().zip(tb.data()).map(|(x, y)| x * y).sum();
                }
                Tensor::vector(out)
            }
            [kk, n] if *kk == k => {
                let n = *n;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let av = ta.data()[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            out[i * n + j] += av * tb.data()[l * n + j];
                        }
                    }
                }
                Tensor::matrix(m, n, out)
            }
            _ => return Err(mismatch()),
        };
        self.push(Op::Matmul, vec![a, b], value, "matmul")
    }

    /// Concatenate 1-D vectors.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: t.shape().to_vec(),
                    right: vec![],
                });
            }
            data.extend_from_slice(t.data());
        }
        self.push(Op::Concat, parts.to_vec(), Tensor::vector(data), "concat")
    }

    /// Contiguous slice of a 1-D vector.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        if ta.shape().len() != 1 || start + len > ta.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let value = Tensor::vector(ta.data()[start..start + len].to_vec());
        self.push(Op::Slice { start }, vec![a], value, "slice")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.tanh()).collect());
        self.push(Op::Tanh, vec![a], value, "tanh")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data = ta
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(Op::Sigmoid, vec![a], value, "sigmoid")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.exp()).collect());
        self.push(Op::Exp, vec![a], value, "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x.ln()).collect());
        self.push(Op::Log, vec![a], value, "log")
    }

    /// Elementwise clamp; gradient passes through where the input was not
    /// clipped.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        self.push(Op::Clamp { lo, hi }, vec![a], value, "clamp")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::scalar(ta.data().iter().sum());
        self.push(Op::Sum, vec![a], value, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let n = ta.numel() as f64;
        let value = Tensor::scalar(ta.data().iter().sum::<f64>() / n);
        self.push(Op::Mean, vec![a], value, "mean")
    }

    /// Squared L2 norm: `sum(x²)`.
    pub fn sq_l2(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let value = Tensor::scalar(ta.data().iter().map(|x| x * x).sum());
        self.push(Op::SqL2, vec![a], value, "sq_l2")
    }

    /// `-log softmax(logits)[target]`, stabilized by max subtraction.
    pub fn softmax_xent(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let t = &self.nodes[logits.0].value;
        if t.shape().len() != 1 || target >= t.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "softmax_xent",
                left: t.shape().to_vec(),
                right: vec![target],
            });
        }
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = z.ln() + max - t.data()[target];
        self.push(
            Op::SoftmaxXent { target, probs },
            vec![logits],
            Tensor::scalar(loss),
            "softmax_xent",
        )
    }

    /// Row `index` of an embedding matrix `[V, E] → [E]`.
    pub fn embed(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 || index >= t.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "embed",
                left: t.shape().to_vec(),
                right: vec![index],
            });
        }
        let e = t.shape()[1];
        let value = Tensor::vector(t.data()[index * e..(index + 1) * e].to_vec());
        self.push(Op::Embed { index }, vec![table], value, "embed")
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are accumulated for
    /// every reachable node; parameter gradients are addressable by name.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_inputs(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let by_name = self
            .named
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(k, (id, _))| (k.clone(), *id))
            .collect();
        Ok(Gradients { grads, by_name })
    }

    fn accumulate_inputs(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let add_to = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                add_to(grads, node.inputs[0], g.clone());
                add_to(grads, node.inputs[1], g.clone());
            }
            Op::Sub => {
                add_to(grads, node.inputs[0], g.clone());
                let neg = Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| -x).collect());
                add_to(grads, node.inputs[1], neg);
            }
            Op::AddBroadcast => {
                add_to(grads, node.inputs[0], g.clone());
                let n = self.nodes[node.inputs[1].0].value.shape()[0];
                let mut db = vec![0.0; n];
                for (i, x) in g.data().iter().enumerate() {
                    db[i % n] += x;
                }
                add_to(grads, node.inputs[1], Tensor::vector(db));
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let tb = &self.nodes[b.0].value;
                let ta = &self.nodes[a.0].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect(),
                );
                add_to(grads, a, da);
                add_to(grads, b, db);
            }
            Op::Neg => {
                let da = Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| -x).collect());
                add_to(grads, node.inputs[0], da);
            }
            Op::Scale(c) => {
                let da = Tensor::new(g.shape().to_vec(), g.data().iter().map(|x| x * c).collect());
                add_to(grads, node.inputs[0], da);
            }
            Op::AddScalar => add_to(grads, node.inputs[0], g.clone()),
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                match tb.shape() {
                    [_] => {
                        // out [m]; dA = g ⊗ b, dB = Aᵀ g
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k];
                        for i in 0..m {
                            let gi = g.data()[i];
                            for l in 0..k {
                                da[i * k + l] += gi * tb.data()[l];
                                db[l] += ta.data()[i * k + l] * gi;
                            }
                        }
                        add_to(grads, a, Tensor::matrix(m, k, da));
                        add_to(grads, b, Tensor::vector(db));
                    }
                    [_, n] => {
                        let n = *n;
                        let mut da = vec![0.0; m * k];
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    let gij = g.data()[i * n + j];
                                    acc += gij * tb.data()[l * n + j];
                                    db[l * n + j] += ta.data()[i * k + l] * gij;
                                }
                                da[i * k + l] += acc;
                            }
                        }
                        add_to(grads, a, Tensor::matrix(m, k, da));
                        add_to(grads, b, Tensor::matrix(k, n, db));
                    }
                    _ => unreachable!(),
                }
            }
            Op::Concat => {
                let mut offset = 0;
                for &p in &node.inputs {
                    let len = self.nodes[p.0].value.numel();
                    let part = Tensor::vector(g.data()[offset..offset + len].to_vec());
                    add_to(grads, p, part);
                    offset += len;
                }
            }
            Op::Slice { start } => {
                let full = self.nodes[node.inputs[0].0].value.numel();
                let mut da = vec![0.0; full];
                da[*start..*start + g.numel()].copy_from_slice(g.data());
                add_to(grads, node.inputs[0], Tensor::vector(da));
            }
            Op::Tanh => {
                let y = &node.value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gx, yx)| gx * (1.0 - yx * yx)).collect(),
                );
                add_to(grads, node.inputs[0], da);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gx, yx)| gx * yx * (1.0 - yx)).collect(),
                );
                add_to(grads, node.inputs[0], da);
            }
            Op::Exp => {
                let y = &node.value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(y.data()).map(|(gx, yx)| gx * yx).collect(),
                );
                add_to(grads, node.inputs[0], da);
            }
            Op::Log => {
                let x = &self.nodes[node.inputs[0].0].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(x.data()).map(|(gx, xx)| gx / xx).collect(),
                );
                add_to(grads, node.inputs[0], da);
            }
            Op::Clamp { lo, hi } => {
                let x = &self.nodes[node.inputs[0].0].value;
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gx, xx)| if *xx >= *lo && *xx <= *hi { *gx } else { 0.0 })
                        .collect(),
                );
                add_to(grads, node.inputs[0], da);
            }
            Op::Sum => {
                let x = &self.nodes[node.inputs[0].0].value;
                let gv = g.item();
                add_to(
                    grads,
                    node.inputs[0],
                    Tensor::new(x.shape().to_vec(), vec![gv; x.numel()]),
                );
            }
            Op::Mean => {
                let x = &self.nodes[node.inputs[0].0].value;
                let gv = g.item() / x.numel() as f64;
                add_to(
                    grads,
                    node.inputs[0],
                    Tensor::new(x.shape().to_vec(), vec![gv; x.numel()]),
                );
            }
            Op::SqL2 => {
                let x = &self.nodes[node.inputs[0].0].value;
                let gv = g.item();
                let da = Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|xx| 2.0 * xx * gv).collect(),
                );
                add_to(grads, node.inputs[0], da);
            }
            Op::SoftmaxXent { target, probs } => {
                let gv = g.item();
                let mut da: Vec<f64> = probs.iter().map(|p| p * gv).collect();
                da[*target] -= gv;
                add_to(grads, node.inputs[0], Tensor::vector(da));
            }
            Op::Embed { index } => {
                let t = &self.nodes[node.inputs[0].0].value;
                let (v, e) = (t.shape()[0], t.shape()[1]);
                let mut da = vec![0.0; v * e];
                da[index * e..(index + 1) * e].copy_from_slice(g.data());
                add_to(grads, node.inputs[0], Tensor::matrix(v, e, da));
            }
        }
    }
}
