//! Small expression-graph autodiff engine.
//!
//! A [`ComputeGraph`] is a DAG of primitive ops built once per model or loss
//! and evaluated many times against fresh bindings. Three execution services
//! are provided:
//!
//! * [`ComputeGraph::forward`]: plain evaluation.
//! * [`ComputeGraph::forward_dual`]: evaluation threaded with directional
//!   derivatives (dual numbers). Given a tangent direction over the
//!   parameters, every node carries `(value, d value / d direction)`. This is
//!   one extra pass and never materializes a Jacobian.
//! * [`ComputeGraph::vjp`] / [`ComputeGraph::backward`]: reverse-mode
//!   cotangent propagation from any node, yielding per-parameter gradients.
//!
//! Nodes are appended in topological order by construction, so evaluation is
//! a single sweep and reverse traversal is the mirror sweep. Parameter and
//! input nodes are deduplicated by name: two loss heads that mention the same
//! parameter share one node, which is what makes gradient accumulation across
//! heads automatic.
//!
//! Every computed value (and tangent) is checked for NaN/inf; violations
//! surface as [`Error::NonFinite`] naming the offending node.

use crate::autodiff::params::ParamSet;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`ComputeGraph`]. Only meaningful for the graph
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Param(String),
    /// (B,n) x (n,m) -> (B,m)
    MatMul(NodeId, NodeId),
    /// (B,m) + (m,) broadcast over rows
    AddBias(NodeId, NodeId),
    /// Elementwise sum of same-shape tensors
    Add(NodeId, NodeId),
    /// Multiply by a compile-time constant
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Row-wise softmax of a (B,C) tensor
    Softmax(NodeId),
    /// stride-1 2-D convolution: x (B,C,H,W), w (O,C,kh,kw), zero padding
    Conv2d { x: NodeId, w: NodeId, pad: usize },
    /// (B,C,H,W) + (C,) broadcast over batch and spatial dims
    AddChanBias(NodeId, NodeId),
    /// k x k mean pooling; spatial dims must divide by k
    AvgPool2d { x: NodeId, k: usize },
    /// (B, d1, d2, ...) -> (B, d1*d2*...)
    Flatten(NodeId),
    /// Mean over the batch of softmax cross-entropy; labels are class
    /// indices stored as floats. No gradient flows to the labels.
    CrossEntropy { logits: NodeId, labels: NodeId },
    /// Mean over rows of squared L2 distance between two (B,C) tensors
    MseRows(NodeId, NodeId),
    /// Sum of squares of all elements -> scalar
    SumSq(NodeId),
    /// Sum of all elements -> scalar
    Sum(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChanBias(..) => "add_chan_bias",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Flatten(_) => "flatten",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MseRows(..) => "mse_rows",
            Op::SumSq(_) => "sum_sq",
            Op::Sum(_) => "sum",
        }
    }
}

/// Expression DAG over named inputs and parameters.
#[derive(Clone, Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Op>,
}

impl ComputeGraph {
    pub fn new() -> Self {
        ComputeGraph { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> NodeId {
        assert!(id.0 < self.nodes.len(), "node id from another graph");
        id
    }

    /// Data leaf, bound at evaluation time. Repeated names share one node.
    pub fn input(&mut self, name: &str) -> NodeId {
        for (i, op) in self.nodes.iter().enumerate() {
            if let Op::Input(n) = op {
                if n == name {
                    return NodeId(i);
                }
            }
        }
        self.push(Op::Input(name.to_string()))
    }

    /// Parameter leaf, bound from a [`ParamSet`]. Repeated names share one
    /// node, so adjoints from multiple heads accumulate.
    pub fn param(&mut self, name: &str) -> NodeId {
        for (i, op) in self.nodes.iter().enumerate() {
            if let Op::Param(n) = op {
                if n == name {
                    return NodeId(i);
                }
            }
        }
        self.push(Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (a, bias) = (self.check(a), self.check(bias));
        self.push(Op::AddBias(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a, b) = (self.check(a), self.check(b));
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let a = self.check(a);
        self.push(Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let a = self.check(a);
        self.push(Op::Relu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let a = self.check(a);
        self.push(Op::Softmax(a))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> NodeId {
        let (x, w) = (self.check(x), self.check(w));
        self.push(Op::Conv2d { x, w, pad })
    }

    pub fn add_chan_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (x, bias) = (self.check(x), self.check(bias));
        self.push(Op::AddChanBias(x, bias))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> NodeId {
        let x = self.check(x);
        assert!(k > 0, "pool size must be positive");
        self.push(Op::AvgPool2d { x, k })
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let x = self.check(x);
        self.push(Op::Flatten(x))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        let (logits, labels) = (self.check(logits), self.check(labels));
        self.push(Op::CrossEntropy { logits, labels })
    }

    pub fn mse_rows(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let (pred, target) = (self.check(pred), self.check(target));
        self.push(Op::MseRows(pred, target))
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let a = self.check(a);
        self.push(Op::SumSq(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let a = self.check(a);
        self.push(Op::Sum(a))
    }

    fn describe(&self, i: usize) -> String {
        match &self.nodes[i] {
            Op::Input(n) => format!("node {} (input '{}')", i, n),
            Op::Param(n) => format!("node {} (param '{}')", i, n),
            op => format!("node {} ({})", i, op.kind()),
        }
    }

    /// Plain evaluation of every node.
    pub fn forward<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        inputs: &[(&str, &Tensor<F>)],
    ) -> Result<Evaluation<F>> {
        self.eval(params, inputs, None)
    }

    /// Dual-number evaluation: alongside each value, the directional
    /// derivative along `direction` (a tangent over parameter space; missing
    /// names mean a zero tangent). Inputs always carry zero tangents.
    pub fn forward_dual<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        inputs: &[(&str, &Tensor<F>)],
        direction: &ParamSet<F>,
    ) -> Result<Evaluation<F>> {
        self.eval(params, inputs, Some(direction))
    }

    fn eval<F: Scalar>(
        &self,
        params: &ParamSet<F>,
        inputs: &[(&str, &Tensor<F>)],
        direction: Option<&ParamSet<F>>,
    ) -> Result<Evaluation<F>> {
        let dual = direction.is_some();
        let mut values: Vec<Tensor<F>> = Vec::with_capacity(self.nodes.len());
        let mut tangents: Vec<Tensor<F>> = Vec::with_capacity(if dual { self.nodes.len() } else { 0 });

        for (i, op) in self.nodes.iter().enumerate() {
            let v: Tensor<F>;
            let mut t: Option<Tensor<F>> = None;
            match op {
                Op::Input(name) => {
                    let found = inputs.iter().find(|(n, _)| *n == name.as_str());
                    let bound = found.ok_or_else(|| {
                        Error::Config(format!("no binding for input '{}'", name))
                    })?;
                    v = bound.1.clone();
                    if dual {
                        t = Some(Tensor::zeros(v.shape()));
                    }
                }
                Op::Param(name) => {
                    let p = params.get(name).ok_or_else(|| {
                        Error::Config(format!("no value for param '{}'", name))
                    })?;
                    v = p.clone();
                    if let Some(dir) = direction {
                        let tangent = match dir.get(name) {
                            Some(d) => {
                                if d.shape() != v.shape() {
                                    return Err(Error::shape(
                                        "forward_dual",
                                        format!(
                                            "tangent for '{}' has shape {:?}, param has {:?}",
                                            name,
                                            d.shape(),
                                            v.shape()
                                        ),
                                    ));
                                }
                                d.clone()
                            }
                            None => Tensor::zeros(v.shape()),
                        };
                        t = Some(tangent);
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&values[a.0], &values[b.0]);
                    check_matmul(va, vb)?;
                    v = matmul_nn(va, vb);
                    if dual {
                        let (ta, tb) = (&tangents[a.0], &tangents[b.0]);
                        let mut d = matmul_nn(ta, vb);
                        d.add_assign(&matmul_nn(va, tb));
                        t = Some(d);
                    }
                }
                Op::AddBias(a, bias) => {
                    let (va, vb) = (&values[a.0], &values[bias.0]);
                    check_add_bias(va, vb)?;
                    v = add_bias(va, vb);
                    if dual {
                        t = Some(add_bias(&tangents[a.0], &tangents[bias.0]));
                    }
                }
                Op::Add(a, b) => {
                    let (va, vb) = (&values[a.0], &values[b.0]);
                    if va.shape() != vb.shape() {
                        return Err(Error::shape(
                            "add",
                            format!("{:?} vs {:?}", va.shape(), vb.shape()),
                        ));
                    }
                    v = va.zip_map(vb, |x, y| x + y);
                    if dual {
                        t = Some(tangents[a.0].zip_map(&tangents[b.0], |x, y| x + y));
                    }
                }
                Op::Scale(a, c) => {
                    let c = F::from_f64(*c);
                    v = values[a.0].map(|x| c * x);
                    if dual {
                        t = Some(tangents[a.0].map(|x| c * x));
                    }
                }
                Op::Relu(a) => {
                    let va = &values[a.0];
                    v = va.map(|x| if x > F::zero() { x } else { F::zero() });
                    if dual {
                        // Subgradient 0 at the kink, matching the value rule.
                        t = Some(tangents[a.0].zip_map(va, |dx, x| {
                            if x > F::zero() {
                                dx
                            } else {
                                F::zero()
                            }
                        }));
                    }
                }
                Op::Softmax(a) => {
                    let va = &values[a.0];
                    if va.rank() != 2 {
                        return Err(Error::shape(
                            "softmax",
                            format!("want rank 2, got {:?}", va.shape()),
                        ));
                    }
                    let p = va.softmax_rows();
                    if dual {
                        t = Some(softmax_jvp(&p, &tangents[a.0]));
                    }
                    v = p;
                }
                Op::Conv2d { x, w, pad } => {
                    let (vx, vw) = (&values[x.0], &values[w.0]);
                    check_conv(vx, vw, *pad)?;
                    v = conv2d(vx, vw, *pad);
                    if dual {
                        let mut d = conv2d(&tangents[x.0], vw, *pad);
                        d.add_assign(&conv2d(vx, &tangents[w.0], *pad));
                        t = Some(d);
                    }
                }
                Op::AddChanBias(x, bias) => {
                    let (vx, vb) = (&values[x.0], &values[bias.0]);
                    check_chan_bias(vx, vb)?;
                    v = add_chan_bias(vx, vb);
                    if dual {
                        t = Some(add_chan_bias(&tangents[x.0], &tangents[bias.0]));
                    }
                }
                Op::AvgPool2d { x, k } => {
                    let vx = &values[x.0];
                    check_pool(vx, *k)?;
                    v = avg_pool(vx, *k);
                    if dual {
                        t = Some(avg_pool(&tangents[x.0], *k));
                    }
                }
                Op::Flatten(x) => {
                    let vx = &values[x.0];
                    if vx.rank() < 2 {
                        return Err(Error::shape(
                            "flatten",
                            format!("want rank >= 2, got {:?}", vx.shape()),
                        ));
                    }
                    let b = vx.shape()[0];
                    let rest: usize = vx.shape()[1..].iter().product();
                    v = vx.reshape(vec![b, rest])?;
                    if dual {
                        t = Some(tangents[x.0].reshape(vec![b, rest])?);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let (vl, vy) = (&values[logits.0], &values[labels.0]);
                    let idx = label_indices(vl, vy)?;
                    v = Tensor::scalar(cross_entropy_value(vl, &idx));
                    if dual {
                        t = Some(Tensor::scalar(cross_entropy_jvp(vl, &idx, &tangents[logits.0])));
                    }
                }
                Op::MseRows(pred, target) => {
                    let (vp, vt) = (&values[pred.0], &values[target.0]);
                    check_mse(vp, vt)?;
                    v = Tensor::scalar(mse_rows_value(vp, vt));
                    if dual {
                        let (dp, dt) = (&tangents[pred.0], &tangents[target.0]);
                        let b = F::from_f64(vp.data().len() as f64);
                        let two = F::from_f64(2.0);
                        let mut acc = F::zero();
                        for ((&p, &q), (&dpv, &dtv)) in
                            vp.data().iter().zip(vt.data()).zip(dp.data().iter().zip(dt.data()))
                        {
                            acc += (p - q) * (dpv - dtv);
                        }
                        t = Some(Tensor::scalar(two * acc / b));
                    }
                }
                Op::SumSq(a) => {
                    let va = &values[a.0];
                    v = Tensor::scalar(va.l2_sq());
                    if dual {
                        let two = F::from_f64(2.0);
                        t = Some(Tensor::scalar(two * va.dot(&tangents[a.0])));
                    }
                }
                Op::Sum(a) => {
                    v = Tensor::scalar(values[a.0].data().iter().cloned().sum());
                    if dual {
                        t = Some(Tensor::scalar(tangents[a.0].data().iter().cloned().sum()));
                    }
                }
            }

            if !v.all_finite() {
                return Err(Error::NonFinite(self.describe(i)));
            }
            values.push(v);
            if dual {
                let t = t.expect("dual mode computes a tangent for every node");
                if !t.all_finite() {
                    return Err(Error::NonFinite(format!("tangent of {}", self.describe(i))));
                }
                tangents.push(t);
            }
        }

        Ok(Evaluation { values, tangents: if dual { Some(tangents) } else { None } })
    }

    /// Reverse sweep from `at`, seeded with cotangent `seed` (same shape as
    /// the node value). Returns the gradient of `seed . value(at)` with
    /// respect to every parameter that feeds `at`; unrelated parameters are
    /// absent from the result. Parameters themselves are never mutated.
    pub fn vjp<F: Scalar>(
        &self,
        eval: &Evaluation<F>,
        at: NodeId,
        seed: &Tensor<F>,
    ) -> Result<ParamSet<F>> {
        assert_eq!(
            eval.values.len(),
            self.nodes.len(),
            "evaluation does not belong to this graph"
        );
        let at = self.check(at);
        let vat = &eval.values[at.0];
        if seed.shape() != vat.shape() {
            return Err(Error::shape(
                "vjp",
                format!("seed {:?} vs node value {:?}", seed.shape(), vat.shape()),
            ));
        }

        let mut adj: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        adj[at.0] = Some(seed.clone());

        for i in (0..=at.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i] {
                Op::Input(_) | Op::Param(_) => {
                    // Leaves keep their adjoint; params are harvested below.
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&eval.values[a.0], &eval.values[b.0]);
                    accumulate(&mut adj, *a, matmul_nt(&g, vb));
                    accumulate(&mut adj, *b, matmul_tn(va, &g));
                }
                Op::AddBias(a, bias) => {
                    accumulate(&mut adj, *bias, col_sums(&g));
                    accumulate(&mut adj, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Scale(a, c) => {
                    let c = F::from_f64(*c);
                    accumulate(&mut adj, *a, g.map(|x| c * x));
                }
                Op::Relu(a) => {
                    let va = &eval.values[a.0];
                    accumulate(
                        &mut adj,
                        *a,
                        g.zip_map(va, |gv, x| if x > F::zero() { gv } else { F::zero() }),
                    );
                }
                Op::Softmax(a) => {
                    // Value was cached, so reuse it instead of recomputing.
                    let p = &eval.values[i];
                    accumulate(&mut adj, *a, softmax_jvp(p, &g));
                }
                Op::Conv2d { x, w, pad } => {
                    let (vx, vw) = (&eval.values[x.0], &eval.values[w.0]);
                    let (dx, dw) = conv2d_backward(vx, vw, &g, *pad);
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                }
                Op::AddChanBias(x, bias) => {
                    accumulate(&mut adj, *bias, chan_sums(&g));
                    accumulate(&mut adj, *x, g);
                }
                Op::AvgPool2d { x, k } => {
                    let vx = &eval.values[x.0];
                    accumulate(&mut adj, *x, unpool_avg(&g, vx.shape(), *k));
                }
                Op::Flatten(x) => {
                    let vx = &eval.values[x.0];
                    accumulate(&mut adj, *x, g.reshape(vx.shape().to_vec())?);
                }
                Op::CrossEntropy { logits, labels } => {
                    let (vl, vy) = (&eval.values[logits.0], &eval.values[labels.0]);
                    let idx = label_indices(vl, vy)?;
                    // Labels are class indices; no gradient flows to them.
                    accumulate(&mut adj, *logits, cross_entropy_grad(vl, &idx, g.item()));
                }
                Op::MseRows(pred, target) => {
                    let (vp, vt) = (&eval.values[pred.0], &eval.values[target.0]);
                    let s = g.item();
                    let c = F::from_f64(2.0) * s / F::from_f64(vp.data().len() as f64);
                    let d = vp.zip_map(vt, |p, t| c * (p - t));
                    accumulate(&mut adj, *target, d.map(|x| -x));
                    accumulate(&mut adj, *pred, d);
                }
                Op::SumSq(a) => {
                    let va = &eval.values[a.0];
                    let c = F::from_f64(2.0) * g.item();
                    accumulate(&mut adj, *a, va.map(|x| c * x));
                }
                Op::Sum(a) => {
                    let va = &eval.values[a.0];
                    accumulate(&mut adj, *a, Tensor::full(va.shape(), g.item()));
                }
            }
        }

        let mut grads = ParamSet::new();
        for (i, op) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = op {
                if let Some(g) = adj[i].take() {
                    if !g.all_finite() {
                        return Err(Error::NonFinite(format!("gradient of param '{}'", name)));
                    }
                    grads.set(name.clone(), g);
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of a scalar loss node: [`ComputeGraph::vjp`] seeded with 1.
    pub fn backward<F: Scalar>(&self, eval: &Evaluation<F>, loss: NodeId) -> Result<ParamSet<F>> {
        let loss = self.check(loss);
        if eval.values[loss.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss node has shape {:?}, want [1]", eval.values[loss.0].shape()),
            ));
        }
        self.vjp(eval, loss, &Tensor::scalar(F::one()))
    }
}

/// Result of one graph evaluation: per-node values, plus per-node
/// directional derivatives when run in dual mode.
#[derive(Clone, Debug)]
pub struct Evaluation<F> {
    values: Vec<Tensor<F>>,
    tangents: Option<Vec<Tensor<F>>>,
}

impl<F: Scalar> Evaluation<F> {
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.values[id.0]
    }

    /// Directional derivative of the node along the evaluation's tangent
    /// direction. `None` when the evaluation was not run in dual mode.
    pub fn tangent(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.tangents.as_ref().map(|t| &t[id.0])
    }
}

fn accumulate<F: Scalar>(adj: &mut [Option<Tensor<F>>], id: NodeId, t: Tensor<F>) {
    match &mut adj[id.0] {
        Some(a) => a.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn check_matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matmul_nn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ra, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![F::zero(); ra * cb];
    for i in 0..ra {
        let arow = a.row(i);
        let orow = &mut out[i * cb..(i + 1) * cb];
        for (k, &av) in arow.iter().enumerate().take(ca) {
            let brow = b.row(k);
            for j in 0..cb {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![ra, cb], out).expect("matmul shape")
}

/// a . b^T
fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ra, rb) = (a.rows(), b.rows());
    let mut out = vec![F::zero(); ra * rb];
    for i in 0..ra {
        let arow = a.row(i);
        for j in 0..rb {
            let brow = b.row(j);
            let mut acc = F::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            out[i * rb + j] = acc;
        }
    }
    Tensor::new(vec![ra, rb], out).expect("matmul shape")
}

/// a^T . b
fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ra, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![F::zero(); ca * cb];
    for r in 0..ra {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate().take(ca) {
            let orow = &mut out[i * cb..(i + 1) * cb];
            for j in 0..cb {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![ca, cb], out).expect("matmul shape")
}

fn check_add_bias<F: Scalar>(a: &Tensor<F>, bias: &Tensor<F>) -> Result<()> {
    if a.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != a.shape()[1] {
        return Err(Error::shape(
            "add_bias",
            format!("{:?} + {:?}", a.shape(), bias.shape()),
        ));
    }
    Ok(())
}

fn add_bias<F: Scalar>(a: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for (j, &b) in bias.data().iter().enumerate() {
            out.push(a.at2(i, j) + b);
        }
    }
    Tensor::new(vec![r, c], out).expect("add_bias shape")
}

fn col_sums<F: Scalar>(g: &Tensor<F>) -> Tensor<F> {
    let (r, c) = (g.rows(), g.cols());
    let mut out = vec![F::zero(); c];
    for i in 0..r {
        for (j, o) in out.iter_mut().enumerate() {
            *o += g.at2(i, j);
        }
    }
    Tensor::new(vec![c], out).expect("col_sums shape")
}

/// dp = p . (dx - <dx, p>) per row. The softmax differential is symmetric,
/// so the same formula serves as JVP (dx = input tangent) and VJP
/// (dx = output cotangent).
fn softmax_jvp<F: Scalar>(p: &Tensor<F>, dx: &Tensor<F>) -> Tensor<F> {
    let (r, c) = (p.rows(), p.cols());
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        let prow = p.row(i);
        let drow = dx.row(i);
        let mut inner = F::zero();
        for (pv, dv) in prow.iter().zip(drow) {
            inner += *pv * *dv;
        }
        for j in 0..c {
            out[i * c + j] = prow[j] * (drow[j] - inner);
        }
    }
    Tensor::new(vec![r, c], out).expect("softmax shape")
}

fn check_conv<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, pad: usize) -> Result<()> {
    let ok = x.rank() == 4
        && w.rank() == 4
        && x.shape()[1] == w.shape()[1]
        && x.shape()[2] + 2 * pad >= w.shape()[2]
        && x.shape()[3] + 2 * pad >= w.shape()[3];
    if !ok {
        return Err(Error::shape(
            "conv2d",
            format!("x {:?}, w {:?}, pad {}", x.shape(), w.shape(), pad),
        ));
    }
    Ok(())
}

fn idx4(s: &[usize], a: usize, b: usize, c: usize, d: usize) -> usize {
    ((a * s[1] + b) * s[2] + c) * s[3] + d
}

fn conv2d<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, pad: usize) -> Tensor<F> {
    let xs = x.shape();
    let ws = w.shape();
    let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = h + 2 * pad - kh + 1;
    let ow = wd + 2 * pad - kw + 1;
    let os = [bn, co, oh, ow];
    let mut out = vec![F::zero(); bn * co * oh * ow];
    let xd = x.data();
    let wdt = w.data();
    for b in 0..bn {
        for o in 0..co {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = F::zero();
                    for c in 0..cin {
                        for u in 0..kh {
                            let ii = (oi + u).wrapping_sub(pad);
                            if ii >= h {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = (oj + v).wrapping_sub(pad);
                                if jj >= wd {
                                    continue;
                                }
                                acc += xd[idx4(xs, b, c, ii, jj)] * wdt[idx4(ws, o, c, u, v)];
                            }
                        }
                    }
                    out[idx4(&os, b, o, oi, oj)] = acc;
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).expect("conv shape")
}

fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gy: &Tensor<F>,
    pad: usize,
) -> (Tensor<F>, Tensor<F>) {
    let xs = x.shape();
    let ws = w.shape();
    let gs = gy.shape();
    let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (gs[2], gs[3]);
    let mut dx = vec![F::zero(); x.len()];
    let mut dw = vec![F::zero(); w.len()];
    let xd = x.data();
    let wdt = w.data();
    let gd = gy.data();
    for b in 0..bn {
        for o in 0..co {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = gd[idx4(gs, b, o, oi, oj)];
                    for c in 0..cin {
                        for u in 0..kh {
                            let ii = (oi + u).wrapping_sub(pad);
                            if ii >= h {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = (oj + v).wrapping_sub(pad);
                                if jj >= wd {
                                    continue;
                                }
                                dx[idx4(xs, b, c, ii, jj)] += wdt[idx4(ws, o, c, u, v)] * g;
                                dw[idx4(ws, o, c, u, v)] += xd[idx4(xs, b, c, ii, jj)] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs.to_vec(), dx).expect("conv dx shape"),
        Tensor::new(ws.to_vec(), dw).expect("conv dw shape"),
    )
}

fn check_chan_bias<F: Scalar>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<()> {
    if x.rank() != 4 || bias.rank() != 1 || bias.shape()[0] != x.shape()[1] {
        return Err(Error::shape(
            "add_chan_bias",
            format!("{:?} + {:?}", x.shape(), bias.shape()),
        ));
    }
    Ok(())
}

fn add_chan_bias<F: Scalar>(x: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    let s = x.shape();
    let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = x.data().to_vec();
    for b in 0..bn {
        for ch in 0..c {
            let bv = bias.data()[ch];
            for i in 0..h {
                for j in 0..w {
                    out[idx4(s, b, ch, i, j)] += bv;
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("chan_bias shape")
}

fn chan_sums<F: Scalar>(g: &Tensor<F>) -> Tensor<F> {
    let s = g.shape();
    let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![F::zero(); c];
    for b in 0..bn {
        for (ch, o) in out.iter_mut().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    *o += g.data()[idx4(s, b, ch, i, j)];
                }
            }
        }
    }
    Tensor::new(vec![c], out).expect("chan_sums shape")
}

fn check_pool<F: Scalar>(x: &Tensor<F>, k: usize) -> Result<()> {
    if x.rank() != 4 || x.shape()[2] % k != 0 || x.shape()[3] % k != 0 {
        return Err(Error::shape(
            "avg_pool2d",
            format!("{:?} with window {}", x.shape(), k),
        ));
    }
    Ok(())
}

fn avg_pool<F: Scalar>(x: &Tensor<F>, k: usize) -> Tensor<F> {
    let s = x.shape();
    let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let os = [bn, c, oh, ow];
    let norm = F::from_f64((k * k) as f64);
    let mut out = vec![F::zero(); bn * c * oh * ow];
    for b in 0..bn {
        for ch in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = F::zero();
                    for u in 0..k {
                        for v in 0..k {
                            acc += x.data()[idx4(s, b, ch, oi * k + u, oj * k + v)];
                        }
                    }
                    out[idx4(&os, b, ch, oi, oj)] = acc / norm;
                }
            }
        }
    }
    Tensor::new(os.to_vec(), out).expect("pool shape")
}

fn unpool_avg<F: Scalar>(gy: &Tensor<F>, xshape: &[usize], k: usize) -> Tensor<F> {
    let gs = gy.shape();
    let (bn, c, oh, ow) = (gs[0], gs[1], gs[2], gs[3]);
    let norm = F::from_f64((k * k) as f64);
    let mut out = vec![F::zero(); xshape.iter().product()];
    for b in 0..bn {
        for ch in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = gy.data()[idx4(gs, b, ch, oi, oj)] / norm;
                    for u in 0..k {
                        for v in 0..k {
                            out[idx4(xshape, b, ch, oi * k + u, oj * k + v)] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(xshape.to_vec(), out).expect("unpool shape")
}

/// Validates label tensor against logits and extracts integer class indices.
pub(crate) fn label_indices<F: Scalar>(logits: &Tensor<F>, labels: &Tensor<F>) -> Result<Vec<usize>> {
    if logits.rank() != 2 || labels.rank() != 1 || labels.shape()[0] != logits.shape()[0] {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?}, labels {:?}", logits.shape(), labels.shape()),
        ));
    }
    let classes = logits.cols();
    let mut out = Vec::with_capacity(labels.len());
    for &v in labels.data() {
        let f = v.to_f64();
        let r = f.round();
        if !f.is_finite() || (f - r).abs() > 1e-6 || r < 0.0 || r >= classes as f64 {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                f, classes
            )));
        }
        out.push(r as usize);
    }
    Ok(out)
}

/// Mean over the batch of `logsumexp(row) - row[label]`, max-shifted.
pub(crate) fn cross_entropy_value<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> F {
    let b = logits.rows();
    let mut acc = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for &v in row {
            denom += (v - m).exp();
        }
        acc += m + denom.ln() - row[y];
    }
    acc / F::from_f64(b as f64)
}

/// d loss / d logits = (softmax - onehot) * seed / batch.
pub(crate) fn cross_entropy_grad<F: Scalar>(logits: &Tensor<F>, labels: &[usize], seed: F) -> Tensor<F> {
    let (b, c) = (logits.rows(), logits.cols());
    let mut p = logits.softmax_rows();
    let scale = seed / F::from_f64(b as f64);
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut p.data_mut()[i * c..(i + 1) * c];
        row[y] = row[y] - F::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    p
}

/// Directional derivative of the batch-mean cross-entropy along dlogits.
fn cross_entropy_jvp<F: Scalar>(logits: &Tensor<F>, labels: &[usize], dlogits: &Tensor<F>) -> F {
    let b = logits.rows();
    let p = logits.softmax_rows();
    let mut acc = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let prow = p.row(i);
        let drow = dlogits.row(i);
        let mut inner = F::zero();
        for (pv, dv) in prow.iter().zip(drow) {
            inner += *pv * *dv;
        }
        acc += inner - drow[y];
    }
    acc / F::from_f64(b as f64)
}

fn check_mse<F: Scalar>(p: &Tensor<F>, t: &Tensor<F>) -> Result<()> {
    if p.rank() != 2 || p.shape() != t.shape() {
        return Err(Error::shape(
            "mse_rows",
            format!("{:?} vs {:?}", p.shape(), t.shape()),
        ));
    }
    Ok(())
}

/// Mean squared difference over all elements (mean-reduction MSE).
pub(crate) fn mse_rows_value<F: Scalar>(p: &Tensor<F>, t: &Tensor<F>) -> F {
    let mut acc = F::zero();
    for (&a, &c) in p.data().iter().zip(t.data()) {
        let d = a - c;
        acc += d * d;
    }
    acc / F::from_f64(p.data().len() as f64)
}
