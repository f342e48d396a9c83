//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; each
//! [`Var`] is an index into that list. [`Tape::backward`] walks the list in
//! reverse and accumulates gradients for every node, so callers can read the
//! gradient of any leaf. Tapes are cheap to create and are meant to live for
//! a single forward/backward pass.
//!
//! The op set is exactly what the forecasting model needs: linear algebra,
//! row softmax, layer normalization, segmented cumulative sums over
//! time-major token layouts, and a pairwise hinge on agent proximity.

use super::tensor::{matmul, matmul_nt, matmul_tn, real, Real, Tensor};
use rand::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `x + row`, broadcasting a `(1, c)` row over all rows of `x`.
    AddRowBias,
    Scale(F),
    AddScalar(F),
    /// `x + c` with a constant tensor (temporal encodings, additive masks).
    Offset,
    /// `x ⊙ c` with a constant tensor (binary masks, dropout masks, noise).
    MulConst(Tensor<F>),
    MatMul,
    /// `a @ b^T`.
    MatMulNT,
    SoftmaxRows,
    /// Parents: input, gain `(1, c)`, bias `(1, c)`.
    LayerNormRows { eps: F },
    Relu,
    Exp,
    Clamp { lo: F, hi: F },
    Sum,
    Mean,
    SliceRows { start: usize },
    /// Per-column cumulative sum over time for `row = t * n_agents + agent`.
    CumsumTime { n_agents: usize },
    /// Parents: tokens `(t*n, c)`, per-agent rows `(n, c)`; adds row `a` of
    /// the second parent to every token of agent `a`.
    AddPerAgent { n_agents: usize },
    /// Mean hinge on pairwise proximity; see [`Tape::social_hinge`].
    SocialHinge {
        n_agents: usize,
        epsilon: F,
        squared: bool,
    },
}

struct Node<F> {
    op: Op<F>,
    parents: [usize; 3],
    value: Tensor<F>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `var`, if any path reached it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads[var.0].as_ref()
    }
}

/// A single recorded forward computation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> F {
        self.nodes[var.0].value.scalar_value()
    }

    fn push(&mut self, op: Op<F>, parents: &[Var], value: Tensor<F>) -> Var {
        let mut ps = [0usize; 3];
        for (slot, v) in ps.iter_mut().zip(parents) {
            *slot = v.0;
        }
        self.nodes.push(Node { op, parents: ps, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor. Leaves are the only nodes whose gradients
    /// callers typically read back.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(Op::Leaf, &[], value)
    }

    pub fn scalar_leaf(&mut self, value: F) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push(Op::Add, &[a, b], out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let mut out = ta.clone();
        out.axpy_assign(-F::one(), tb);
        self.push(Op::Sub, &[a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let mut out = ta.clone();
        for (x, y) in out.data_mut().iter_mut().zip(tb.data()) {
            *x *= *y;
        }
        self.push(Op::Mul, &[a, b], out)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(bias));
        assert_eq!(tb.rows(), 1, "bias must be a single row");
        assert_eq!(tx.cols(), tb.cols(), "bias width mismatch");
        let mut out = tx.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for c in 0..cols {
                row[c] += tb.at(0, c);
            }
        }
        self.push(Op::AddRowBias, &[x, bias], out)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        self.push(Op::Scale(s), &[x], out)
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v += s;
        }
        self.push(Op::AddScalar(s), &[x], out)
    }

    /// Adds a constant tensor; gradients pass straight through.
    pub fn offset(&mut self, x: Var, c: &Tensor<F>) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), c.shape(), "offset shape mismatch");
        let mut out = tx.clone();
        out.add_assign(c);
        self.push(Op::Offset, &[x], out)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<F>) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), c.shape(), "mul_const shape mismatch");
        let mut out = tx.clone();
        for (v, m) in out.data_mut().iter_mut().zip(c.data()) {
            *v *= *m;
        }
        self.push(Op::MulConst(c.clone()), &[x], out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul, &[a, b], out)
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        self.push(Op::MatMulNT, &[a, b], out)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mut max = F::neg_infinity();
            for v in row.iter() {
                if *v > max {
                    max = *v;
                }
            }
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        self.push(Op::SoftmaxRows, &[x], out)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(tg.shape(), (1, tx.cols()), "layer norm gain shape");
        assert_eq!(tb.shape(), (1, tx.cols()), "layer norm bias shape");
        let mut out = tx.clone();
        let n = real::<F>(tx.cols() as f64);
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mut mean = F::zero();
            for v in row.iter() {
                mean += *v;
            }
            mean = mean / n;
            let mut var = F::zero();
            for v in row.iter() {
                let d = *v - mean;
                var += d * d;
            }
            var = var / n;
            let inv = (var + eps).sqrt().recip();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.at(0, c) + tb.at(0, c);
            }
        }
        self.push(Op::LayerNormRows { eps }, &[x, gain, bias], out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < F::zero() {
                *v = F::zero();
            }
        }
        self.push(Op::Relu, &[x], out)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.exp();
        }
        self.push(Op::Exp, &[x], out)
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
        self.push(Op::Clamp { lo, hi }, &[x], out)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for v in self.value(x).data() {
            acc += *v;
        }
        self.push(Op::Sum, &[x], Tensor::scalar(acc))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert!(!tx.is_empty(), "mean of empty tensor");
        let mut acc = F::zero();
        for v in tx.data() {
            acc += *v;
        }
        let m = acc / real::<F>(tx.len() as f64);
        self.push(Op::Mean, &[x], Tensor::scalar(m))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        assert!(start + len <= tx.rows(), "slice_rows out of range");
        let mut out = Tensor::zeros(len, tx.cols());
        for r in 0..len {
            out.row_mut(r).copy_from_slice(tx.row(start + r));
        }
        self.push(Op::SliceRows { start }, &[x], out)
    }

    /// Per-column cumulative sum across timesteps in a time-major layout.
    pub fn cumsum_time(&mut self, x: Var, n_agents: usize) -> Var {
        let tx = self.value(x);
        assert!(n_agents > 0 && tx.rows() % n_agents == 0, "cumsum_time layout");
        let steps = tx.rows() / n_agents;
        let mut out = tx.clone();
        for a in 0..n_agents {
            for t in 1..steps {
                let (prev, curr) = (((t - 1) * n_agents + a), (t * n_agents + a));
                for c in 0..out.cols() {
                    let add = out.at(prev, c);
                    *out.at_mut(curr, c) += add;
                }
            }
        }
        self.push(Op::CumsumTime { n_agents }, &[x], out)
    }

    /// Adds per-agent rows to every timestep of the matching agent.
    pub fn add_per_agent(&mut self, x: Var, per_agent: Var, n_agents: usize) -> Var {
        let (tx, tp) = (self.value(x), self.value(per_agent));
        assert_eq!(tp.rows(), n_agents, "per-agent row count mismatch");
        assert_eq!(tp.cols(), tx.cols(), "per-agent width mismatch");
        assert!(tx.rows() % n_agents == 0, "token layout not time-major");
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let a = r % n_agents;
            for c in 0..out.cols() {
                *out.at_mut(r, c) += tp.at(a, c);
            }
        }
        self.push(Op::AddPerAgent { n_agents }, &[x, per_agent], out)
    }

    /// Mean over unordered agent pairs and timesteps of
    /// `max(0, epsilon - proximity)`, where proximity is the squared
    /// Euclidean distance when `squared` is set and the plain distance
    /// otherwise. Input rows are time-major `(x, y)` positions. Returns a
    /// zero scalar when fewer than two agents are present.
    pub fn social_hinge(&mut self, x: Var, n_agents: usize, epsilon: F, squared: bool) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.cols(), 2, "positions must be (x, y) rows");
        assert!(n_agents > 0 && tx.rows() % n_agents == 0, "position layout");
        let value = social_hinge_forward(tx, n_agents, epsilon, squared);
        self.push(
            Op::SocialHinge {
                n_agents,
                epsilon,
                squared,
            },
            &[x],
            Tensor::scalar(value),
        )
    }

    /// Inverted dropout; identity when not training or when `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Var {
        if !training || rate <= 0.0 {
            return x;
        }
        assert!(rate < 1.0, "dropout rate must be below 1");
        let keep = 1.0 - rate;
        let scale = real::<F>(1.0 / keep);
        let (rows, cols) = self.value(x).shape();
        let mut mask = Tensor::zeros(rows, cols);
        for v in mask.data_mut() {
            if rng.gen::<f64>() < keep {
                *v = scale;
            }
        }
        self.mul_const(x, &mask)
    }

    /// Accumulates gradients of scalar `output` into every reachable node.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        assert_eq!(
            self.value(output).shape(),
            (1, 1),
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(F::one()));

        for id in (0..=output.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.push_parent_grads(node, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(grads: &mut [Option<Tensor<F>>], id: usize, contribution: Tensor<F>) {
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn push_parent_grads(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let p = &node.parents;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                Self::accumulate(grads, p[0], g.clone());
                Self::accumulate(grads, p[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(grads, p[0], g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-F::one());
                Self::accumulate(grads, p[1], neg);
            }
            Op::Mul => {
                let (a, b) = (&self.nodes[p[0]].value, &self.nodes[p[1]].value);
                let mut ga = g.clone();
                for (x, y) in ga.data_mut().iter_mut().zip(b.data()) {
                    *x *= *y;
                }
                let mut gb = g.clone();
                for (x, y) in gb.data_mut().iter_mut().zip(a.data()) {
                    *x *= *y;
                }
                Self::accumulate(grads, p[0], ga);
                Self::accumulate(grads, p[1], gb);
            }
            Op::AddRowBias => {
                Self::accumulate(grads, p[0], g.clone());
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        *gb.at_mut(0, c) += g.at(r, c);
                    }
                }
                Self::accumulate(grads, p[1], gb);
            }
            Op::Scale(s) => {
                let mut gx = g.clone();
                gx.scale_assign(*s);
                Self::accumulate(grads, p[0], gx);
            }
            Op::AddScalar(_) | Op::Offset => {
                Self::accumulate(grads, p[0], g.clone());
            }
            Op::MulConst(mask) => {
                let mut gx = g.clone();
                for (x, m) in gx.data_mut().iter_mut().zip(mask.data()) {
                    *x *= *m;
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::MatMul => {
                let (a, b) = (&self.nodes[p[0]].value, &self.nodes[p[1]].value);
                Self::accumulate(grads, p[0], matmul_nt(g, b));
                Self::accumulate(grads, p[1], matmul_tn(a, g));
            }
            Op::MatMulNT => {
                let (a, b) = (&self.nodes[p[0]].value, &self.nodes[p[1]].value);
                Self::accumulate(grads, p[0], matmul(g, b));
                Self::accumulate(grads, p[1], matmul_tn(g, a));
            }
            Op::SoftmaxRows => {
                let s = &node.value;
                let mut gx = g.clone();
                for r in 0..s.rows() {
                    let mut dot = F::zero();
                    for c in 0..s.cols() {
                        dot += g.at(r, c) * s.at(r, c);
                    }
                    for c in 0..s.cols() {
                        *gx.at_mut(r, c) = s.at(r, c) * (g.at(r, c) - dot);
                    }
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::LayerNormRows { eps } => {
                let x = &self.nodes[p[0]].value;
                let gain = &self.nodes[p[1]].value;
                let n = real::<F>(x.cols() as f64);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                let mut ggain = Tensor::zeros(1, x.cols());
                let mut gbias = Tensor::zeros(1, x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mut mean = F::zero();
                    for v in row {
                        mean += *v;
                    }
                    mean = mean / n;
                    let mut var = F::zero();
                    for v in row {
                        let d = *v - mean;
                        var += d * d;
                    }
                    var = var / n;
                    let inv = (var + *eps).sqrt().recip();

                    let mut mean_gh = F::zero();
                    let mut mean_gh_xhat = F::zero();
                    for c in 0..x.cols() {
                        let xhat = (row[c] - mean) * inv;
                        let gh = g.at(r, c) * gain.at(0, c);
                        mean_gh += gh;
                        mean_gh_xhat += gh * xhat;
                        *ggain.at_mut(0, c) += g.at(r, c) * xhat;
                        *gbias.at_mut(0, c) += g.at(r, c);
                    }
                    mean_gh = mean_gh / n;
                    mean_gh_xhat = mean_gh_xhat / n;
                    for c in 0..x.cols() {
                        let xhat = (row[c] - mean) * inv;
                        let gh = g.at(r, c) * gain.at(0, c);
                        *gx.at_mut(r, c) = inv * (gh - mean_gh - xhat * mean_gh_xhat);
                    }
                }
                Self::accumulate(grads, p[0], gx);
                Self::accumulate(grads, p[1], ggain);
                Self::accumulate(grads, p[2], gbias);
            }
            Op::Relu => {
                let x = &self.nodes[p[0]].value;
                let mut gx = g.clone();
                for (v, xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= F::zero() {
                        *v = F::zero();
                    }
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::Exp => {
                let mut gx = g.clone();
                for (v, ov) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= *ov;
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::Clamp { lo, hi } => {
                let x = &self.nodes[p[0]].value;
                let mut gx = g.clone();
                for (v, xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if *xv < *lo || *xv > *hi {
                        *v = F::zero();
                    }
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::Sum => {
                let x = &self.nodes[p[0]].value;
                let gs = g.scalar_value();
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for v in gx.data_mut() {
                    *v = gs;
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::Mean => {
                let x = &self.nodes[p[0]].value;
                let gs = g.scalar_value() / real::<F>(x.len() as f64);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for v in gx.data_mut() {
                    *v = gs;
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::SliceRows { start } => {
                let x = &self.nodes[p[0]].value;
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::CumsumTime { n_agents } => {
                // d/dx[τ] = Σ_{t ≥ τ} g[t], a reversed cumulative sum.
                let mut gx = g.clone();
                let steps = g.rows() / n_agents;
                for a in 0..*n_agents {
                    for t in (0..steps.saturating_sub(1)).rev() {
                        let (next, curr) = ((t + 1) * n_agents + a, t * n_agents + a);
                        for c in 0..gx.cols() {
                            let add = gx.at(next, c);
                            *gx.at_mut(curr, c) += add;
                        }
                    }
                }
                Self::accumulate(grads, p[0], gx);
            }
            Op::AddPerAgent { n_agents } => {
                Self::accumulate(grads, p[0], g.clone());
                let mut gp = Tensor::zeros(*n_agents, g.cols());
                for r in 0..g.rows() {
                    let a = r % n_agents;
                    for c in 0..g.cols() {
                        *gp.at_mut(a, c) += g.at(r, c);
                    }
                }
                Self::accumulate(grads, p[1], gp);
            }
            Op::SocialHinge {
                n_agents,
                epsilon,
                squared,
            } => {
                let x = &self.nodes[p[0]].value;
                let gx = social_hinge_backward(x, *n_agents, *epsilon, *squared, g.scalar_value());
                Self::accumulate(grads, p[0], gx);
            }
        }
    }
}

fn social_hinge_forward<F: Real>(x: &Tensor<F>, n_agents: usize, epsilon: F, squared: bool) -> F {
    if n_agents < 2 {
        return F::zero();
    }
    let steps = x.rows() / n_agents;
    let pairs = real::<F>((n_agents * (n_agents - 1) / 2) as f64);
    let mut total = F::zero();
    for t in 0..steps {
        for i in 0..n_agents {
            for j in (i + 1)..n_agents {
                let (ri, rj) = (t * n_agents + i, t * n_agents + j);
                let dx = x.at(ri, 0) - x.at(rj, 0);
                let dy = x.at(ri, 1) - x.at(rj, 1);
                let d2 = dx * dx + dy * dy;
                let prox = if squared { d2 } else { d2.sqrt() };
                let margin = epsilon - prox;
                if margin > F::zero() {
                    total += margin;
                }
            }
        }
    }
    total / pairs
}

fn social_hinge_backward<F: Real>(
    x: &Tensor<F>,
    n_agents: usize,
    epsilon: F,
    squared: bool,
    gout: F,
) -> Tensor<F> {
    let mut gx = Tensor::zeros(x.rows(), x.cols());
    if n_agents < 2 {
        return gx;
    }
    let steps = x.rows() / n_agents;
    let pairs = real::<F>((n_agents * (n_agents - 1) / 2) as f64);
    let coeff = gout / pairs;
    for t in 0..steps {
        for i in 0..n_agents {
            for j in (i + 1)..n_agents {
                let (ri, rj) = (t * n_agents + i, t * n_agents + j);
                let dx = x.at(ri, 0) - x.at(rj, 0);
                let dy = x.at(ri, 1) - x.at(rj, 1);
                let d2 = dx * dx + dy * dy;
                let prox = if squared { d2 } else { d2.sqrt() };
                if epsilon - prox <= F::zero() {
                    continue;
                }
                // d(margin)/d(pos_i) = -d(prox)/d(pos_i)
                let (px, py) = if squared {
                    (dx + dx, dy + dy)
                } else if d2 > F::zero() {
                    let d = d2.sqrt();
                    (dx / d, dy / d)
                } else {
                    // coincident points have no defined direction
                    (F::zero(), F::zero())
                };
                *gx.at_mut(ri, 0) -= coeff * px;
                *gx.at_mut(ri, 1) -= coeff * py;
                *gx.at_mut(rj, 0) += coeff * px;
                *gx.at_mut(rj, 1) += coeff * py;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn forward_values_compose() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(1, 2, vec![3.0, -1.0]));
        let s = tape.add(a, b);
        let p = tape.mul(s, b);
        let out = tape.sum(p);
        assert_relative_eq!(tape.scalar(out), 4.0 * 3.0 + 1.0 * -1.0);
    }

    #[test]
    fn backward_through_product_and_sum() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(1, 2, vec![1.5, -2.0]));
        let b = tape.leaf(Tensor::from_vec(1, 2, vec![0.5, 4.0]));
        let p = tape.mul(a, b);
        let out = tape.sum(p);
        let grads = tape.backward(out);
        assert_eq!(grads.wrt(a).unwrap().data(), &[0.5, 4.0]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let s = tape.softmax_rows(x);
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_handles_masked_minus_infinity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(1, 3, vec![0.5, f64::NEG_INFINITY, 1.0]));
        let s = tape.softmax_rows(x);
        let row = tape.value(s).row(0).to_vec();
        assert_eq!(row[1], 0.0);
        assert_relative_eq!(row[0] + row[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cumsum_time_matches_manual_prefix_sums() {
        let mut tape = Tape::<f64>::new();
        // two agents, three steps; column 0 = agent id marker, column 1 = value
        let x = tape.leaf(Tensor::from_vec(
            6,
            2,
            vec![1.0, 10.0, 2.0, 100.0, 1.0, 20.0, 2.0, 200.0, 1.0, 30.0, 2.0, 300.0],
        ));
        let c = tape.cumsum_time(x, 2);
        let v = tape.value(c);
        assert_eq!(v.row(2), &[2.0, 30.0]);
        assert_eq!(v.row(4), &[3.0, 60.0]);
        assert_eq!(v.row(5), &[6.0, 600.0]);
    }

    #[test]
    fn slice_rows_backward_scatters() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(3, 2, vec![1.0; 6]));
        let s = tape.slice_rows(x, 1, 2);
        let out = tape.sum(s);
        let grads = tape.backward(out);
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn dropout_disabled_is_identity() {
        let mut tape = Tape::<f64>::new();
        let mut rng = crate::rng::derive(1, "test", 0);
        let x = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = tape.dropout(x, 0.5, false, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn social_hinge_zero_for_single_agent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(3, 2, vec![0.0; 6]));
        let h = tape.social_hinge(x, 1, 0.5, true);
        assert_eq!(tape.scalar(h), 0.0);
    }
}
