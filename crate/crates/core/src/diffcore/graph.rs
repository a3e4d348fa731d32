//! Computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is a flat tape of op records in topological order: every node's
//! inputs precede it, so `forward` runs the tape front to back and `backward`
//! walks it back to front exactly once. The op set is deliberately small —
//! matmul, add (plus bias-row broadcast), elementwise multiply, relu, tanh,
//! mean over an axis, row softmax, log, sum and L2 norm — which is everything
//! the classifier and the scorer need.
//!
//! A graph with bound inputs belongs to one worker; rebinding inputs and
//! re-running `forward` on the same graph is allowed and overwrites the
//! cached values.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum OpKind {
    Input(String),
    Constant,
    MatMul(NodeId, NodeId),
    /// Same-shape add, or `[m,n] + [1,n]` bias-row broadcast.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    MeanAxis(NodeId, usize),
    Softmax(NodeId),
    Log(NodeId),
    Sum(NodeId),
    L2Norm(NodeId),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Input(_) => "input",
            OpKind::Constant => "constant",
            OpKind::MatMul(..) => "matmul",
            OpKind::Add(..) => "add",
            OpKind::Mul(..) => "mul",
            OpKind::Relu(_) => "relu",
            OpKind::Tanh(_) => "tanh",
            OpKind::MeanAxis(..) => "mean_axis",
            OpKind::Softmax(_) => "softmax",
            OpKind::Log(_) => "log",
            OpKind::Sum(_) => "sum",
            OpKind::L2Norm(_) => "l2_norm",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    shape: Vec<usize>,
    value: Option<Tensor>,
}

/// A single-output computation graph. The last node added is the root.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    ran_forward: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: OpKind, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node { op, shape, value });
        self.ran_forward = false;
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn mismatch(&self, op: &'static str, ids: &[NodeId]) -> Error {
        let shapes: Vec<_> = ids.iter().map(|id| self.shape_of(*id).to_vec()).collect();
        Error::ShapeMismatch {
            op,
            details: format!("operand shapes {:?}", shapes),
        }
    }

    /// Declare a named input placeholder; its tensor is bound at `forward`.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(OpKind::Input(name.to_string()), shape.to_vec(), None)
    }

    /// Embed a fixed tensor (parameters, masks, targets) into the graph.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(OpKind::Constant, shape, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(OpKind::MatMul(a, b), shape, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let bias = sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sa[1] == sb[1];
        if sa != sb && !bias {
            return Err(self.mismatch("add", &[a, b]));
        }
        let shape = sa.to_vec();
        Ok(self.push(OpKind::Add(a, b), shape, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch("mul", &[a, b]));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(OpKind::Mul(a, b), shape, None))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(OpKind::Relu(a), shape, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(OpKind::Tanh(a), shape, None)
    }

    /// Mean over one axis of a 2-D tensor: axis 0 gives `[1,n]`, axis 1 `[m,1]`.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.shape_of(a);
        if sa.len() != 2 || axis > 1 {
            return Err(self.mismatch("mean_axis", &[a]));
        }
        let shape = if axis == 0 {
            vec![1, sa[1]]
        } else {
            vec![sa[0], 1]
        };
        Ok(self.push(OpKind::MeanAxis(a, axis), shape, None))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a);
        if sa.len() != 2 {
            return Err(self.mismatch("softmax", &[a]));
        }
        let shape = sa.to_vec();
        Ok(self.push(OpKind::Softmax(a), shape, None))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(OpKind::Log(a), shape, None)
    }

    /// Sum of all elements, a 1x1 result.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Sum(a), vec![1, 1], None)
    }

    /// L2 norm of all elements, a 1x1 result.
    pub fn l2_norm(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::L2Norm(a), vec![1, 1], None)
    }

    /// Root of the graph: the most recently added node.
    pub fn output(&self) -> NodeId {
        NodeId(self.nodes.len() - 1)
    }

    /// Cached value of a node after `forward`.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Run the tape front to back, binding `inputs` by name, and return the
    /// root value. Every op result is checked finite; intermediates stay
    /// cached for `backward`.
    pub fn forward(&mut self, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                OpKind::Input(name) => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: "input",
                            details: format!(
                                "`{}` declared {:?}, bound {:?}",
                                name,
                                self.nodes[i].shape,
                                t.shape()
                            ),
                        });
                    }
                    t.clone()
                }
                OpKind::Constant => continue,
                op => self.compute(op),
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        self.ran_forward = true;
        Ok(self.nodes[self.output().0]
            .value
            .clone()
            .expect("root evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs precede consumers")
    }

    fn compute(&self, op: &OpKind) -> Tensor {
        match op {
            OpKind::Input(_) | OpKind::Constant => unreachable!("handled by forward"),
            OpKind::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a.at(i, p);
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &b.data()[p * n..(p + 1) * n];
                        for (j, bv) in brow.iter().enumerate() {
                            data[i * n + j] += aip * bv;
                        }
                    }
                }
                Tensor::from_raw(vec![m, n], data)
            }
            OpKind::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mut out = a.clone();
                if a.shape() == b.shape() {
                    out.add_scaled(b, 1.0);
                } else {
                    // bias row broadcast over every row of `a`
                    let n = a.cols();
                    for r in 0..a.rows() {
                        for c in 0..n {
                            out.data_mut()[r * n + c] += b.data()[c];
                        }
                    }
                }
                out
            }
            OpKind::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::from_raw(a.shape().to_vec(), data)
            }
            OpKind::Relu(a) => {
                let a = self.val(*a);
                let data = a.data().iter().map(|v| v.max(0.0)).collect();
                Tensor::from_raw(a.shape().to_vec(), data)
            }
            OpKind::Tanh(a) => {
                let a = self.val(*a);
                let data = a.data().iter().map(|v| v.tanh()).collect();
                Tensor::from_raw(a.shape().to_vec(), data)
            }
            OpKind::MeanAxis(a, axis) => {
                let a = self.val(*a);
                let (m, n) = (a.rows(), a.cols());
                if *axis == 0 {
                    let data = (0..n)
                        .map(|c| (0..m).map(|r| a.at(r, c)).sum::<f64>() / m as f64)
                        .collect();
                    Tensor::from_raw(vec![1, n], data)
                } else {
                    let data = (0..m)
                        .map(|r| (0..n).map(|c| a.at(r, c)).sum::<f64>() / n as f64)
                        .collect();
                    Tensor::from_raw(vec![m, 1], data)
                }
            }
            OpKind::Softmax(a) => {
                let a = self.val(*a);
                let (m, n) = (a.rows(), a.cols());
                let mut data = vec![0.0; m * n];
                for r in 0..m {
                    let row = &a.data()[r * n..(r + 1) * n];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for c in 0..n {
                        let e = (row[c] - max).exp();
                        data[r * n + c] = e;
                        total += e;
                    }
                    for c in 0..n {
                        data[r * n + c] /= total;
                    }
                }
                Tensor::from_raw(vec![m, n], data)
            }
            OpKind::Log(a) => {
                let a = self.val(*a);
                let data = a.data().iter().map(|v| v.ln()).collect();
                Tensor::from_raw(a.shape().to_vec(), data)
            }
            OpKind::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            OpKind::L2Norm(a) => Tensor::scalar(self.val(*a).l2_norm()),
        }
    }

    /// Reverse pass from a scalar root. Returns the gradient of the root with
    /// respect to each requested node (zeros where the node does not reach
    /// the root).
    pub fn backward(&self, wrt: &[NodeId]) -> Result<HashMap<NodeId, Tensor>> {
        if !self.ran_forward {
            return Err(Error::BackwardBeforeForward);
        }
        let root = self.output();
        if !self.val(root).is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.shape_of(root).to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &grad, &mut grads);
            grads[i] = Some(grad);
        }

        let mut out = HashMap::with_capacity(wrt.len());
        for &id in wrt {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shape_of(id).to_vec()));
            out.insert(id, g);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.add_scaled(&contribution, 1.0),
            slot => *slot = Some(contribution),
        }
    }

    fn accumulate(&self, index: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[index].op {
            OpKind::Input(_) | OpKind::Constant => {}
            OpKind::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = dC * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grad.at(i, j) * vb.at(p, j);
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = A^T * dC
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let vap = va.at(i, p);
                        if vap == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += vap * grad.at(i, j);
                        }
                    }
                }
                self.acc(grads, *a, Tensor::from_raw(vec![m, k], da));
                self.acc(grads, *b, Tensor::from_raw(vec![k, n], db));
            }
            OpKind::Add(a, b) => {
                self.acc(grads, *a, grad.clone());
                if self.shape_of(*a) == self.shape_of(*b) {
                    self.acc(grads, *b, grad.clone());
                } else {
                    // bias row: sum the upstream gradient over rows
                    let (m, n) = (grad.rows(), grad.cols());
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for (c, slot) in db.iter_mut().enumerate() {
                            *slot += grad.at(r, c);
                        }
                    }
                    self.acc(grads, *b, Tensor::from_raw(vec![1, n], db));
                }
            }
            OpKind::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let da = grad
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(g, v)| g * v)
                    .collect();
                let db = grad
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, v)| g * v)
                    .collect();
                self.acc(grads, *a, Tensor::from_raw(va.shape().to_vec(), da));
                self.acc(grads, *b, Tensor::from_raw(vb.shape().to_vec(), db));
            }
            OpKind::Relu(a) => {
                let va = self.val(*a);
                let da = grad
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.acc(grads, *a, Tensor::from_raw(va.shape().to_vec(), da));
            }
            OpKind::Tanh(a) => {
                let va = self.val(*a);
                let da = grad
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, v)| {
                        let t = v.tanh();
                        g * (1.0 - t * t)
                    })
                    .collect();
                self.acc(grads, *a, Tensor::from_raw(va.shape().to_vec(), da));
            }
            OpKind::MeanAxis(a, axis) => {
                let sa = self.shape_of(*a);
                let (m, n) = (sa[0], sa[1]);
                let mut da = vec![0.0; m * n];
                if *axis == 0 {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = grad.data()[c] / m as f64;
                        }
                    }
                } else {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] = grad.data()[r] / n as f64;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::from_raw(vec![m, n], da));
            }
            OpKind::Softmax(a) => {
                // row-wise: dA = y * (dC - <dC, y>), y this node's own output
                let y = self.val(NodeId(index));
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let dot: f64 = (0..n).map(|c| grad.at(r, c) * y.at(r, c)).sum();
                    for c in 0..n {
                        da[r * n + c] = y.at(r, c) * (grad.at(r, c) - dot);
                    }
                }
                self.acc(grads, *a, Tensor::from_raw(vec![m, n], da));
            }
            OpKind::Log(a) => {
                let va = self.val(*a);
                let da = grad
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(g, v)| g / v)
                    .collect();
                self.acc(grads, *a, Tensor::from_raw(va.shape().to_vec(), da));
            }
            OpKind::Sum(a) => {
                let sa = self.shape_of(*a).to_vec();
                let g = grad.data()[0];
                let n: usize = sa.iter().product();
                self.acc(grads, *a, Tensor::from_raw(sa, vec![g; n]));
            }
            OpKind::L2Norm(a) => {
                let va = self.val(*a);
                let norm = self.val(NodeId(index)).data()[0];
                let mut da = vec![0.0; va.numel()];
                // zero subgradient at the origin
                if norm > 0.0 {
                    let g = grad.data()[0] / norm;
                    for (d, v) in da.iter_mut().zip(va.data()) {
                        *d = g * v;
                    }
                }
                self.acc(grads, *a, Tensor::from_raw(va.shape().to_vec(), da));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn matmul_hand_value() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        g.matmul(a, b).unwrap();
        let out = g.forward(&HashMap::new()).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::new();
        g.input("x", &[2, 3]);
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = g.forward(&bind(&[("x", x.clone())])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        g.softmax(x).unwrap();
        let out = g.forward(&HashMap::new()).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 3]);
        let sq = g.mul(x, x).unwrap();
        g.sum(sq);
        g.forward(&bind(&[("x", Tensor::row(vec![1.0, 2.0, 3.0]))]))
            .unwrap();
        let grads = g.backward(&[x]).unwrap();
        assert_eq!(grads[&x].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_constant_loss_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 2]);
        let c = g.constant(Tensor::scalar(7.0));
        g.sum(c);
        g.forward(&bind(&[("x", Tensor::row(vec![1.0, -1.0]))]))
            .unwrap();
        let grads = g.backward(&[x]).unwrap();
        assert_eq!(grads[&x].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 1]);
        g.sum(x);
        assert!(matches!(
            g.backward(&[x]),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn backward_from_non_scalar_root_errors() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 3]);
        g.relu(x);
        g.forward(&bind(&[("x", Tensor::row(vec![1.0, 2.0, 3.0]))]))
            .unwrap();
        assert!(matches!(g.backward(&[x]), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn unbound_input_errors() {
        let mut g = Graph::new();
        g.input("x", &[1, 1]);
        let err = g.forward(&HashMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnboundInput(name) if name == "x"));
    }

    #[test]
    fn log_of_non_positive_is_non_finite_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 1.0]));
        g.log(x);
        assert!(matches!(
            g.forward(&HashMap::new()),
            Err(Error::NonFinite { op: "log" })
        ));
    }

    #[test]
    fn bias_add_broadcast_and_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.input("b", &[1, 2]);
        let y = g.add(x, b).unwrap();
        g.sum(y);
        g.forward(&bind(&[("b", Tensor::row(vec![10.0, 20.0]))]))
            .unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        let grads = g.backward(&[b]).unwrap();
        // each bias column feeds two rows
        assert_eq!(grads[&b].data(), &[2.0, 2.0]);
    }

    #[test]
    fn gradient_is_linear_in_the_root() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g)
        let xval = Tensor::row(vec![0.3, -0.7, 1.1]);
        let (a, b) = (2.5, -1.25);

        let grad_of = |combine: &dyn Fn(&mut Graph, NodeId) -> NodeId| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.input("x", &[1, 3]);
            let root = combine(&mut g, x);
            let _ = root;
            g.forward(&bind(&[("x", xval.clone())])).unwrap();
            g.backward(&[x]).unwrap()[&x].data().to_vec()
        };

        // f = sum(x*x), g = sum(tanh(x))
        let f_only = grad_of(&|g, x| {
            let sq = g.mul(x, x).unwrap();
            g.sum(sq)
        });
        let g_only = grad_of(&|g, x| {
            let t = g.tanh(x);
            g.sum(t)
        });
        let combined = grad_of(&|g, x| {
            let sq = g.mul(x, x).unwrap();
            let f = g.sum(sq);
            let t = g.tanh(x);
            let gg = g.sum(t);
            let ca = g.constant(Tensor::scalar(a));
            let cb = g.constant(Tensor::scalar(b));
            let af = g.mul(ca, f).unwrap();
            let bg = g.mul(cb, gg).unwrap();
            g.add(af, bg).unwrap()
        });

        for i in 0..3 {
            let want = a * f_only[i] + b * g_only[i];
            assert!(
                (combined[i] - want).abs() < 1e-10,
                "{} vs {}",
                combined[i],
                want
            );
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input("x", &[2, 2]);
            let w = g.constant(Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let s = g.softmax(h).unwrap();
            let l = g.log(s);
            g.sum(l);
            let out = g
                .forward(&bind(&[(
                    "x",
                    Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                )]))
                .unwrap();
            let grads = g.backward(&[x]).unwrap();
            (out.data().to_vec(), grads[&x].data().to_vec())
        };
        let (o1, g1) = run();
        let (o2, g2) = run();
        assert_eq!(o1, o2);
        assert_eq!(g1, g2);
    }
}
