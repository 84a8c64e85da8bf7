//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A `Graph` is a define-by-run tape: builder methods append a node, compute
//! its value immediately, and return a `NodeId`. `backward` seeds the adjoint
//! of a scalar loss node with 1 and walks the tape in reverse, accumulating
//! adjoints into every node that (transitively) depends on a parameter.
//! Tensors on the tape are immutable once written; a fresh graph is built per
//! training step, which keeps lifetimes trivial and makes gradient checking
//! with frozen noise straightforward.
//!
//! The primitive set is exactly what the training losses need: matmul, bias
//! add, relu, elementwise exp/log, column concat/slice/reshape, scalar add and
//! scale, mean squared error, masked softmax cross-entropy, the Gaussian
//! reparameterization draw, and the closed-form KL between diagonal Gaussians.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Logit value substituted for classes outside the mask. exp(-1e10 - m)
/// underflows to exactly 0.0 in f64, so masked classes get zero probability.
pub const MASKED_LOGIT: f64 = -1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// x (n x m) + row bias (1 x m), broadcast over rows.
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Elementwise sum of two same-shape nodes.
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    /// Mean over all elements of (a - b)^2.
    Mse(NodeId, NodeId),
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        /// Row-softmax of the masked logits, cached at forward time. Masked
        /// classes hold exactly 0, which is also what makes their gradient 0.
        probs: Tensor2,
    },
    /// z = mean + exp(0.5 * log_var) .* noise, elementwise.
    Reparam {
        mean: NodeId,
        log_var: NodeId,
        noise: Tensor2,
    },
    /// Sum over entries of KL(N(mq, exp(lq)) || N(mp, exp(lp))).
    KlDiagGauss {
        mean_q: NodeId,
        log_var_q: NodeId,
        mean_p: NodeId,
        log_var_p: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor2,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor2>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Tensor2, needs_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value produced on the tape");
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf; `backward` accumulates its adjoint.
    pub fn param(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        self.val(id)
    }

    /// Adjoint of `id` from the most recent `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).matmul(self.val(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.val(x), self.val(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!(
                    "bias {}x{} against input {}x{}",
                    bv.rows(),
                    bv.cols(),
                    xv.rows(),
                    xv.cols()
                ),
            });
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            for (r, &b) in row.iter_mut().zip(bv.row(0)) {
                *r += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias(x, bias), v, ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(|a| if a > 0.0 { a } else { 0.0 });
        let ng = self.needs(x);
        self.push(Op::Relu(x), v, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(f64::exp);
        let ng = self.needs(x);
        self.push(Op::Exp(x), v, ng)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).map(f64::ln);
        let ng = self.needs(x);
        self.push(Op::Log(x), v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.val(a).zip_map(self.val(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.val(x).map(|a| c * a);
        let ng = self.needs(x);
        self.push(Op::Scale(x, c), v, ng)
    }

    /// Concatenate same-row-count nodes side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of no nodes".into()));
        }
        let rows = self.val(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut v = Tensor2::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.val(p);
            if pv.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, pv.rows()),
                });
            }
            for i in 0..rows {
                v.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, ng))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if start + len > xv.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("[{}, {}) of {} columns", start, start + len, xv.cols()),
            });
        }
        let mut v = Tensor2::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            v.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols(x, start, len), v, ng))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if xv.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{} elements into {}x{}", xv.len(), rows, cols),
            });
        }
        let v = Tensor2::from_vec(rows, cols, xv.data().to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), v, ng))
    }

    /// Scalar mean of (a - b)^2 over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.val(a);
        let bv = self.val(b);
        av.check_same_shape(bv, "mse")?;
        let n = av.len() as f64;
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse(a, b), Tensor2::scalar(s / n), ng))
    }

    /// Mean negative log-likelihood over the batch, with classes outside
    /// `mask` excluded from the softmax by substituting `MASKED_LOGIT`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize], mask: &[bool]) -> Result<NodeId> {
        let lv = self.val(logits);
        let (n, c) = lv.shape();
        if labels.len() != n {
            return Err(Error::Shape {
                op: "softmax_xent",
                detail: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        if mask.len() != c {
            return Err(Error::Shape {
                op: "softmax_xent",
                detail: format!("mask of {} for {} classes", mask.len(), c),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("softmax_xent with an empty class mask".into()));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= c || !mask[y] {
                return Err(Error::Contract(format!(
                    "label {} of row {} is outside the class mask",
                    y, i
                )));
            }
        }
        let mut probs = Tensor2::zeros(n, c);
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let mut maxv = f64::NEG_INFINITY;
            for j in 0..c {
                let z = if mask[j] { row[j] } else { MASKED_LOGIT };
                if z > maxv {
                    maxv = z;
                }
            }
            let mut denom = 0.0;
            let prow = probs.row_mut(i);
            for j in 0..c {
                let z = if mask[j] { row[j] } else { MASKED_LOGIT };
                let e = (z - maxv).exp();
                prow[j] = e;
                denom += e;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            let zy = row[labels[i]];
            loss -= zy - maxv - denom.ln();
        }
        loss /= n as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            Tensor2::scalar(loss),
            ng,
        ))
    }

    /// One reparameterized Gaussian draw with externally supplied noise, so a
    /// draw is differentiable in (mean, log_var) and reproducible: the same
    /// noise tensor always yields the same sample.
    pub fn reparam_sample(&mut self, mean: NodeId, log_var: NodeId, noise: Tensor2) -> Result<NodeId> {
        let mv = self.val(mean);
        let lv = self.val(log_var);
        mv.check_same_shape(lv, "reparam_sample")?;
        mv.check_same_shape(&noise, "reparam_sample")?;
        let mut v = mv.clone();
        for ((z, &l), &e) in v.data_mut().iter_mut().zip(lv.data()).zip(noise.data()) {
            *z += (0.5 * l).exp() * e;
        }
        let ng = self.needs(mean) || self.needs(log_var);
        Ok(self.push(Op::Reparam { mean, log_var, noise }, v, ng))
    }

    /// Closed-form KL divergence between diagonal Gaussians given as (mean,
    /// log variance) pairs, summed over entries:
    ///
    ///   sum_d 0.5 * (lp - lq + (exp(lq) + (mq - mp)^2) * exp(-lp) - 1)
    pub fn kl_diag_gauss(
        &mut self,
        mean_q: NodeId,
        log_var_q: NodeId,
        mean_p: NodeId,
        log_var_p: NodeId,
    ) -> Result<NodeId> {
        let mq = self.val(mean_q);
        let lq = self.val(log_var_q);
        let mp = self.val(mean_p);
        let lp = self.val(log_var_p);
        mq.check_same_shape(lq, "kl_diag_gauss")?;
        mq.check_same_shape(mp, "kl_diag_gauss")?;
        mq.check_same_shape(lp, "kl_diag_gauss")?;
        let mut kl = 0.0;
        for idx in 0..mq.len() {
            let (m1, l1) = (mq.data()[idx], lq.data()[idx]);
            let (m2, l2) = (mp.data()[idx], lp.data()[idx]);
            let d = m1 - m2;
            kl += 0.5 * (l2 - l1 + (l1.exp() + d * d) * (-l2).exp() - 1.0);
        }
        let ng = self.needs(mean_q) || self.needs(log_var_q) || self.needs(mean_p) || self.needs(log_var_p);
        Ok(self.push(
            Op::KlDiagGauss { mean_q, log_var_q, mean_p, log_var_p },
            Tensor2::scalar(kl),
            ng,
        ))
    }

    fn add_grad(&mut self, id: NodeId, g: Tensor2) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_scaled(&g, 1.0),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    /// Reverse pass from a scalar `loss` node. Adjoints from any previous
    /// backward call are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward from a node not on this tape".into()));
        }
        if self.val(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                self.val(loss).rows(),
                self.val(loss).cols()
            )));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.needs(loss) {
            // Loss does not depend on any parameter; all adjoints stay zero.
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                self.grads[i] = Some(g);
                continue;
            }
            // Ops only reference earlier nodes, so one reverse sweep settles
            // every adjoint before it is consumed.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let ga = g.matmul_nt(self.val(b))?;
                        self.add_grad(a, ga)?;
                    }
                    if self.needs(b) {
                        let gb = self.val(a).matmul_tn(&g)?;
                        self.add_grad(b, gb)?;
                    }
                }
                Op::AddBias(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    if self.needs(bias) {
                        let mut gb = Tensor2::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, &gv) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *acc += gv;
                            }
                        }
                        self.add_grad(bias, gb)?;
                    }
                    if self.needs(x) {
                        self.add_grad(x, g.clone())?;
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    // Subgradient 0 at the kink.
                    let gx = g.zip_map(self.val(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                    self.add_grad(x, gx)?;
                }
                Op::Exp(x) => {
                    let x = *x;
                    let gx = g.zip_map(&self.nodes[i].value, |gv, ev| gv * ev)?;
                    self.add_grad(x, gx)?;
                }
                Op::Log(x) => {
                    let x = *x;
                    let gx = g.zip_map(self.val(x), |gv, xv| gv / xv)?;
                    self.add_grad(x, gx)?;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.add_grad(a, g.clone())?;
                    }
                    if self.needs(b) {
                        self.add_grad(b, g.clone())?;
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    let gx = g.map(|v| c * v);
                    self.add_grad(x, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let w = self.val(p).cols();
                        if self.needs(p) {
                            let mut gp = Tensor2::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            self.add_grad(p, gp)?;
                        }
                        off += w;
                    }
                }
                Op::SliceCols(x, start, _len) => {
                    let (x, start) = (*x, *start);
                    let xv = self.val(x);
                    let mut gx = Tensor2::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.add_grad(x, gx)?;
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let (r, c) = self.val(x).shape();
                    let gx = Tensor2::from_vec(r, c, g.data().to_vec())?;
                    self.add_grad(x, gx)?;
                }
                Op::Mse(a, b) => {
                    let (a, b) = (*a, *b);
                    let gs = g.item()?;
                    let n = self.val(a).len() as f64;
                    let diff = self.val(a).zip_map(self.val(b), |x, y| x - y)?;
                    if self.needs(a) {
                        let ga = diff.map(|d| gs * 2.0 * d / n);
                        self.add_grad(a, ga)?;
                    }
                    if self.needs(b) {
                        let gb = diff.map(|d| -gs * 2.0 * d / n);
                        self.add_grad(b, gb)?;
                    }
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let logits = *logits;
                    let gs = g.item()?;
                    let n = probs.rows() as f64;
                    let mut gl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        gl.set(r, y, gl.get(r, y) - 1.0);
                    }
                    // Masked classes keep softmax probability 0, so their
                    // entries are exactly 0 here: no gradient leaks through
                    // the mask.
                    let gl = gl.map(|v| gs * v / n);
                    self.add_grad(logits, gl)?;
                }
                Op::Reparam { mean, log_var, noise } => {
                    let (mean, log_var) = (*mean, *log_var);
                    let noise = noise.clone();
                    if self.needs(mean) {
                        self.add_grad(mean, g.clone())?;
                    }
                    if self.needs(log_var) {
                        let lv = self.val(log_var);
                        let mut glv = g.clone();
                        for ((gv, &l), &e) in
                            glv.data_mut().iter_mut().zip(lv.data()).zip(noise.data())
                        {
                            *gv *= 0.5 * (0.5 * l).exp() * e;
                        }
                        self.add_grad(log_var, glv)?;
                    }
                }
                Op::KlDiagGauss { mean_q, log_var_q, mean_p, log_var_p } => {
                    let (mq_id, lq_id, mp_id, lp_id) = (*mean_q, *log_var_q, *mean_p, *log_var_p);
                    let gs = g.item()?;
                    let shape_src = self.val(mq_id).clone();
                    let lq = self.val(lq_id).clone();
                    let mp = self.val(mp_id).clone();
                    let lp = self.val(lp_id).clone();
                    let mq = shape_src;
                    let n = mq.len();
                    let mut gmq = Tensor2::zeros(mq.rows(), mq.cols());
                    let mut glq = Tensor2::zeros(mq.rows(), mq.cols());
                    let mut gmp = Tensor2::zeros(mq.rows(), mq.cols());
                    let mut glp = Tensor2::zeros(mq.rows(), mq.cols());
                    for idx in 0..n {
                        let d = mq.data()[idx] - mp.data()[idx];
                        let inv_vp = (-lp.data()[idx]).exp();
                        let vq = lq.data()[idx].exp();
                        gmq.data_mut()[idx] = gs * d * inv_vp;
                        gmp.data_mut()[idx] = -gs * d * inv_vp;
                        glq.data_mut()[idx] = gs * 0.5 * (vq * inv_vp - 1.0);
                        glp.data_mut()[idx] = gs * 0.5 * (1.0 - (vq + d * d) * inv_vp);
                    }
                    if self.needs(mq_id) {
                        self.add_grad(mq_id, gmq)?;
                    }
                    if self.needs(lq_id) {
                        self.add_grad(lq_id, glq)?;
                    }
                    if self.needs(mp_id) {
                        self.add_grad(mp_id, gmp)?;
                    }
                    if self.needs(lp_id) {
                        self.add_grad(lp_id, glp)?;
                    }
                }
            }
            // The adjoint was taken out of its slot while propagating (the
            // slot may be written by add_grad on other nodes); put it back so
            // callers can read gradients of any node afterwards.
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Maximum relative error between analytic gradients and central finite
/// differences, over every element of every parameter.
///
/// `build` must construct the same loss for the same parameter values (freeze
/// any noise outside the closure). Relative error uses |a| + |n| in the
/// denominator with a floor of 1e-6 so near-zero gradients compare absolutely.
pub fn grad_check<F>(params: &[Tensor2], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ps: &[Tensor2]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.input(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        g.value(loss).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor2> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor2::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor2> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for idx in 0..p.len() {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
