//! Define-by-run gradient tape.
//!
//! Every forward pass records nodes on a fresh [`Tape`]; [`Tape::backward`]
//! replays them in reverse and returns the gradients of a scalar output with
//! respect to every recorded leaf. Nodes are appended in topological order by
//! construction, so the reverse sweep visits each node exactly once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    ReduceSum(usize),
    ReduceMean(usize),
    ConcatRows(usize, usize),
    Reshape(usize),
    SquaredL2Norm(usize),
    GradReverse(usize, f64),
    LogSoftmax(usize),
    MarginMax(usize, Vec<f64>),
    PartialL2 {
        teacher: Vec<f64>,
        student: usize,
    },
    MmdGaussian {
        source: usize,
        target: usize,
        bandwidths: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Gradients of a scalar output w.r.t. every grad-requiring node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, if `v` required one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    leaf_index: std::collections::HashMap<usize, Var>,
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn gaussian_kernel(x: &[f64], y: &[f64], inv_two_sigma2: f64) -> f64 {
    let d2: f64 = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    (-d2 * inv_two_sigma2).exp()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Copy of the value at `v` as a plain tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.id];
        Tensor {
            shape: node.shape.clone(),
            data: node.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    /// Record a tensor as a leaf. Gradients are accumulated for it when
    /// `t.requires_grad` is set. Recording the same grad-requiring tensor
    /// twice on one tape returns the original leaf, so gradients from every
    /// use accumulate in one place.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        if !t.requires_grad {
            return self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false);
        }
        let key = t.data.as_ptr() as usize;
        if let Some(&v) = self.leaf_index.get(&key) {
            return v;
        }
        let v = self.push(Op::Leaf, t.shape.clone(), t.data.clone(), true);
        self.leaf_index.insert(key, v);
        v
    }

    /// The leaf previously recorded for this tensor, if any.
    pub fn leaf_of(&self, t: &Tensor) -> Option<Var> {
        self.leaf_index.get(&(t.data.as_ptr() as usize)).copied()
    }

    /// Record a constant value that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Op::Leaf, t.shape, t.data, false))
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    fn binary_elementwise(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.id].shape != self.nodes[b.id].shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.id].shape.clone(),
                rhs: self.nodes[b.id].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        Ok(self.push(Op::Add(a.id, b.id), self.nodes[a.id].shape.clone(), data, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        Ok(self.push(Op::Sub(a.id, b.id), self.nodes[a.id].shape.clone(), data, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        Ok(self.push(Op::Mul(a.id, b.id), self.nodes[a.id].shape.clone(), data, rg))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x * c).collect();
        let rg = self.nodes[a.id].requires_grad;
        self.push(
            Op::ScalarMul(a.id, c),
            self.nodes[a.id].shape.clone(),
            data,
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.nodes[a.id].data, &self.nodes[b.id].data, n, k, m);
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        Ok(self.push(Op::MatMul(a.id, b.id), vec![n, m], data, rg))
    }

    /// Add a length-`m` bias vector to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[bias.id].shape);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (n, m) = (sa[0], sa[1]);
        let mut data = self.nodes[a.id].data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += self.nodes[bias.id].data[j];
            }
        }
        let rg = self.nodes[a.id].requires_grad || self.nodes[bias.id].requires_grad;
        Ok(self.push(Op::AddBias(a.id, bias.id), vec![n, m], data, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x.max(0.0)).collect();
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::Relu(a.id), self.nodes[a.id].shape.clone(), data, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x.exp()).collect();
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::Exp(a.id), self.nodes[a.id].shape.clone(), data, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x.ln()).collect();
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::Log(a.id), self.nodes[a.id].shape.clone(), data, rg)
    }

    pub fn reduce_sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.id].data.iter().sum();
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::ReduceSum(a.id), vec![1], vec![s], rg)
    }

    pub fn reduce_mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.id].data.len() as f64;
        let s: f64 = self.nodes[a.id].data.iter().sum::<f64>() / n;
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::ReduceMean(a.id), vec![1], vec![s], rg)
    }

    /// Stack two matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.id].shape, &self.nodes[b.id].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.nodes[a.id].data.clone();
        data.extend_from_slice(&self.nodes[b.id].data);
        let rg = self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad;
        Ok(self.push(Op::ConcatRows(a.id, b.id), shape, data, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.id].data.len() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.nodes[a.id].data.len()),
                got: shape,
            });
        }
        let data = self.nodes[a.id].data.clone();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Op::Reshape(a.id), shape, data, rg))
    }

    pub fn squared_l2_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.id].data.iter().map(|x| x * x).sum();
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::SquaredL2Norm(a.id), vec![1], vec![s], rg)
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if lambda < 0.0 {
            return Err(Error::InvalidArg {
                op: "grad_reverse",
                msg: format!("lambda must be nonnegative, got {lambda}"),
            });
        }
        let data = self.nodes[a.id].data.clone();
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(
            Op::GradReverse(a.id, lambda),
            self.nodes[a.id].shape.clone(),
            data,
            rg,
        ))
    }

    /// Row-wise log-softmax of an `[n, k]` matrix, with max-subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let sa = &self.nodes[a.id].shape;
        if sa.len() != 2 {
            return Err(Error::BadShape {
                op: "log_softmax",
                expected: "rank-2 logits".into(),
                got: sa.clone(),
            });
        }
        let (n, k) = (sa[0], sa[1]);
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = &self.nodes[a.id].data[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            for j in 0..k {
                data[i * k + j] = row[j] - lse;
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Op::LogSoftmax(a.id), vec![n, k], data, rg))
    }

    /// Per-channel `max(x, m_c)` over an `[n, c]` matrix (margin ReLU).
    /// Margins are treated as constants.
    pub fn margin_max(&mut self, a: Var, margins: &[f64]) -> Result<Var> {
        let sa = &self.nodes[a.id].shape;
        if sa.len() != 2 || sa[1] != margins.len() {
            return Err(Error::ShapeMismatch {
                op: "margin_max",
                lhs: sa.clone(),
                rhs: vec![margins.len()],
            });
        }
        let (n, c) = (sa[0], sa[1]);
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                data[i * c + j] = self.nodes[a.id].data[i * c + j].max(margins[j]);
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        Ok(self.push(Op::MarginMax(a.id, margins.to_vec()), vec![n, c], data, rg))
    }

    /// Masked squared distance: per component, zero when
    /// `student <= teacher <= 0`, else `(teacher - student)^2`, summed.
    /// The teacher side is a detached constant.
    pub fn partial_l2(&mut self, teacher: &Tensor, student: Var) -> Result<Var> {
        let ss = &self.nodes[student.id].shape;
        if teacher.data.len() != self.nodes[student.id].data.len() {
            return Err(Error::ShapeMismatch {
                op: "partial_l2",
                lhs: teacher.shape.clone(),
                rhs: ss.clone(),
            });
        }
        let mut sum = 0.0;
        for (t, s) in teacher.data.iter().zip(&self.nodes[student.id].data) {
            if !(*s <= *t && *t <= 0.0) {
                sum += (t - s) * (t - s);
            }
        }
        let rg = self.nodes[student.id].requires_grad;
        Ok(self.push(
            Op::PartialL2 {
                teacher: teacher.data.clone(),
                student: student.id,
            },
            vec![1],
            vec![sum],
            rg,
        ))
    }

    /// Biased (V-statistic) squared MMD with a sum of Gaussian kernels, one
    /// per bandwidth `sigma^2` in `bandwidths`.
    pub fn mmd_gaussian(&mut self, source: Var, target: Var, bandwidths: &[f64]) -> Result<Var> {
        let (ss, st) = (&self.nodes[source.id].shape, &self.nodes[target.id].shape);
        if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
            return Err(Error::ShapeMismatch {
                op: "mmd_gaussian",
                lhs: ss.clone(),
                rhs: st.clone(),
            });
        }
        if bandwidths.is_empty() || bandwidths.iter().any(|&b| b <= 0.0) {
            return Err(Error::InvalidArg {
                op: "mmd_gaussian",
                msg: "bandwidths must be nonempty and positive".into(),
            });
        }
        let (ns, nt, d) = (ss[0], st[0], ss[1]);
        let sd = &self.nodes[source.id].data;
        let td = &self.nodes[target.id].data;
        let mut total = 0.0;
        for &sigma2 in bandwidths {
            let inv = 1.0 / (2.0 * sigma2);
            let mut kss = 0.0;
            for i in 0..ns {
                for j in 0..ns {
                    kss += gaussian_kernel(&sd[i * d..(i + 1) * d], &sd[j * d..(j + 1) * d], inv);
                }
            }
            let mut ktt = 0.0;
            for i in 0..nt {
                for j in 0..nt {
                    ktt += gaussian_kernel(&td[i * d..(i + 1) * d], &td[j * d..(j + 1) * d], inv);
                }
            }
            let mut kst = 0.0;
            for i in 0..ns {
                for j in 0..nt {
                    kst += gaussian_kernel(&sd[i * d..(i + 1) * d], &td[j * d..(j + 1) * d], inv);
                }
            }
            total += kss / (ns * ns) as f64 + ktt / (nt * nt) as f64
                - 2.0 * kst / (ns * nt) as f64;
        }
        let rg = self.nodes[source.id].requires_grad || self.nodes[target.id].requires_grad;
        Ok(self.push(
            Op::MmdGaussian {
                source: source.id,
                target: target.id,
                bandwidths: bandwidths.to_vec(),
            },
            vec![1],
            vec![total],
            rg,
        ))
    }

    /// Reverse sweep from a scalar output. Consumes the tape's ability to run
    /// backward again; rebuild the tape for the next step.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: "empty tape".into(),
            });
        }
        let out_node = &self.nodes[output.id];
        if out_node.data.len() != 1 {
            return Err(Error::NonScalarBackward(out_node.shape.clone()));
        }
        if !out_node.requires_grad {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: "output does not depend on any grad-requiring leaf".into(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let gy = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.accumulate(id, &gy, &mut grads);
            // leaves keep their gradient; interior nodes can drop it
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gy);
            }
        }
        Ok(Gradients { grads })
    }

    fn bump(&self, grads: &mut Vec<Option<Vec<f64>>>, id: usize) -> bool {
        if !self.nodes[id].requires_grad {
            return false;
        }
        if grads[id].is_none() {
            grads[id] = Some(vec![0.0; self.nodes[id].data.len()]);
        }
        true
    }

    fn accumulate(&self, id: usize, gy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, u) in ga.iter_mut().zip(gy) {
                        *g += u;
                    }
                }
                if self.bump(grads, *b) {
                    let gb = grads[*b].as_mut().unwrap();
                    for (g, u) in gb.iter_mut().zip(gy) {
                        *g += u;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, u) in ga.iter_mut().zip(gy) {
                        *g += u;
                    }
                }
                if self.bump(grads, *b) {
                    let gb = grads[*b].as_mut().unwrap();
                    for (g, u) in gb.iter_mut().zip(gy) {
                        *g -= u;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.bump(grads, *a) {
                    let bd = self.nodes[*b].data.clone();
                    let ga = grads[*a].as_mut().unwrap();
                    for ((g, u), v) in ga.iter_mut().zip(gy).zip(&bd) {
                        *g += u * v;
                    }
                }
                if self.bump(grads, *b) {
                    let ad = self.nodes[*a].data.clone();
                    let gb = grads[*b].as_mut().unwrap();
                    for ((g, u), v) in gb.iter_mut().zip(gy).zip(&ad) {
                        *g += u * v;
                    }
                }
            }
            Op::ScalarMul(a, c) => {
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, u) in ga.iter_mut().zip(gy) {
                        *g += u * c;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let m = self.nodes[*b].shape[1];
                if self.bump(grads, *a) {
                    // dA = dC . B^T
                    let bd = &self.nodes[*b].data;
                    let ga = grads[*a].as_mut().unwrap();
                    for i in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += gy[i * m + j] * bd[l * m + j];
                            }
                            ga[i * k + l] += acc;
                        }
                    }
                }
                if self.bump(grads, *b) {
                    // dB = A^T . dC
                    let ad = &self.nodes[*a].data;
                    let gb = grads[*b].as_mut().unwrap();
                    for l in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += ad[i * k + l] * gy[i * m + j];
                            }
                            gb[l * m + j] += acc;
                        }
                    }
                }
            }
            Op::AddBias(a, bias) => {
                let (n, m) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, u) in ga.iter_mut().zip(gy) {
                        *g += u;
                    }
                }
                if self.bump(grads, *bias) {
                    let gb = grads[*bias].as_mut().unwrap();
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += gy[i * m + j];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.bump(grads, *a) {
                    let ad = self.nodes[*a].data.clone();
                    let ga = grads[*a].as_mut().unwrap();
                    for ((g, u), x) in ga.iter_mut().zip(gy).zip(&ad) {
                        if *x > 0.0 {
                            *g += u;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if self.bump(grads, *a) {
                    let out = self.nodes[id].data.clone();
                    let ga = grads[*a].as_mut().unwrap();
                    for ((g, u), y) in ga.iter_mut().zip(gy).zip(&out) {
                        *g += u * y;
                    }
                }
            }
            Op::Log(a) => {
                if self.bump(grads, *a) {
                    let ad = self.nodes[*a].data.clone();
                    let ga = grads[*a].as_mut().unwrap();
                    for ((g, u), x) in ga.iter_mut().zip(gy).zip(&ad) {
                        *g += u / x;
                    }
                }
            }
            Op::ReduceSum(a) => {
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for g in ga.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            Op::ReduceMean(a) => {
                if self.bump(grads, *a) {
                    let n = self.nodes[*a].data.len() as f64;
                    let ga = grads[*a].as_mut().unwrap();
                    for g in ga.iter_mut() {
                        *g += gy[0] / n;
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].data.len();
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, u) in ga.iter_mut().zip(&gy[..na]) {
                        *g += u;
                    }
                }
                if self.bump(grads, *b) {
                    let gb = grads[*b].as_mut().unwrap();
                    for (g, u) in gb.iter_mut().zip(&gy[na..]) {
                        *g += u;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, u) in ga.iter_mut().zip(gy) {
                        *g += u;
                    }
                }
            }
            Op::SquaredL2Norm(a) => {
                if self.bump(grads, *a) {
                    let ad = self.nodes[*a].data.clone();
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, x) in ga.iter_mut().zip(&ad) {
                        *g += gy[0] * 2.0 * x;
                    }
                }
            }
            Op::GradReverse(a, lambda) => {
                if self.bump(grads, *a) {
                    let ga = grads[*a].as_mut().unwrap();
                    for (g, u) in ga.iter_mut().zip(gy) {
                        *g -= lambda * u;
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.bump(grads, *a) {
                    let (n, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let out = self.nodes[id].data.clone();
                    let ga = grads[*a].as_mut().unwrap();
                    for i in 0..n {
                        let row_sum: f64 = gy[i * k..(i + 1) * k].iter().sum();
                        for j in 0..k {
                            let p = out[i * k + j].exp();
                            ga[i * k + j] += gy[i * k + j] - p * row_sum;
                        }
                    }
                }
            }
            Op::MarginMax(a, margins) => {
                if self.bump(grads, *a) {
                    let (n, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let ad = self.nodes[*a].data.clone();
                    let ga = grads[*a].as_mut().unwrap();
                    for i in 0..n {
                        for j in 0..c {
                            if ad[i * c + j] > margins[j] {
                                ga[i * c + j] += gy[i * c + j];
                            }
                        }
                    }
                }
            }
            Op::PartialL2 { teacher, student } => {
                if self.bump(grads, *student) {
                    let sd = self.nodes[*student].data.clone();
                    let gs = grads[*student].as_mut().unwrap();
                    for ((g, s), t) in gs.iter_mut().zip(&sd).zip(teacher) {
                        if !(*s <= *t && *t <= 0.0) {
                            *g += gy[0] * 2.0 * (s - t);
                        }
                    }
                }
            }
            Op::MmdGaussian {
                source,
                target,
                bandwidths,
            } => {
                self.mmd_backward(*source, *target, bandwidths, gy[0], grads);
            }
        }
    }

    fn mmd_backward(
        &self,
        source: usize,
        target: usize,
        bandwidths: &[f64],
        g: f64,
        grads: &mut Vec<Option<Vec<f64>>>,
    ) {
        let (ns, d) = (self.nodes[source].shape[0], self.nodes[source].shape[1]);
        let nt = self.nodes[target].shape[0];
        let sd = self.nodes[source].data.clone();
        let td = self.nodes[target].data.clone();
        let want_s = self.bump(grads, source);
        let want_t = self.bump(grads, target);
        if !want_s && !want_t {
            return;
        }
        let mut gs = vec![0.0; sd.len()];
        let mut gt = vec![0.0; td.len()];
        for &sigma2 in bandwidths {
            let inv = 1.0 / (2.0 * sigma2);
            // d k(x,y) / dx = k * (y - x) / sigma^2
            let wss = 1.0 / (ns * ns) as f64;
            for i in 0..ns {
                for j in 0..ns {
                    let (xi, xj) = (&sd[i * d..(i + 1) * d], &sd[j * d..(j + 1) * d]);
                    let k = gaussian_kernel(xi, xj, inv);
                    for l in 0..d {
                        let dk = k * (xj[l] - xi[l]) / sigma2;
                        gs[i * d + l] += wss * dk;
                        gs[j * d + l] -= wss * dk;
                    }
                }
            }
            let wtt = 1.0 / (nt * nt) as f64;
            for i in 0..nt {
                for j in 0..nt {
                    let (xi, xj) = (&td[i * d..(i + 1) * d], &td[j * d..(j + 1) * d]);
                    let k = gaussian_kernel(xi, xj, inv);
                    for l in 0..d {
                        let dk = k * (xj[l] - xi[l]) / sigma2;
                        gt[i * d + l] += wtt * dk;
                        gt[j * d + l] -= wtt * dk;
                    }
                }
            }
            let wst = -2.0 / (ns * nt) as f64;
            for i in 0..ns {
                for j in 0..nt {
                    let (xi, yj) = (&sd[i * d..(i + 1) * d], &td[j * d..(j + 1) * d]);
                    let k = gaussian_kernel(xi, yj, inv);
                    for l in 0..d {
                        let dk = k * (yj[l] - xi[l]) / sigma2;
                        gs[i * d + l] += wst * dk;
                        gt[j * d + l] -= wst * dk;
                    }
                }
            }
        }
        if want_s {
            let ga = grads[source].as_mut().unwrap();
            for (a, b) in ga.iter_mut().zip(&gs) {
                *a += g * b;
            }
        }
        if want_t {
            let ga = grads[target].as_mut().unwrap();
            for (a, b) in ga.iter_mut().zip(&gt) {
                *a += g * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_value() {
        let mut tape = Tape::new();
        let a = tape
            .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let b = tape.constant(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 7.0]);
    }

    #[test]
    fn relu_and_mean_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
        let m = tape.constant(vec![3], vec![2.0, 4.0, 6.0]).unwrap();
        let mean = tape.reduce_mean(m);
        assert_eq!(tape.data(mean), &[4.0]);
    }

    #[test]
    fn square_gradient() {
        let x = param(vec![1], vec![3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let y = tape.mul(v, v).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(v).unwrap(), &[6.0]);
    }

    #[test]
    fn mean_relu_gradient() {
        let x = param(vec![2], vec![-1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let r = tape.relu(v);
        let y = tape.reduce_mean(r);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(v).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn grad_reverse_negates() {
        let x = param(vec![3], vec![1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let r = tape.grad_reverse(v, 1.0).unwrap();
        assert_eq!(tape.data(r), tape.data(v));
        let y = tape.reduce_sum(r);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(v).unwrap(), &[-1.0, -1.0, -1.0]);

        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let r = tape.grad_reverse(v, 0.5).unwrap();
        let y = tape.reduce_sum(r);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(v).unwrap(), &[-0.5, -0.5, -0.5]);
    }

    #[test]
    fn grad_reverse_twice_is_identity() {
        let x = param(vec![2], vec![0.3, -0.7]);
        let grad_with = {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let a = tape.grad_reverse(v, 1.0).unwrap();
            let b = tape.grad_reverse(a, 1.0).unwrap();
            let s = tape.squared_l2_norm(b);
            let grads = tape.backward(s).unwrap();
            grads.wrt(v).unwrap().to_vec()
        };
        let grad_plain = {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let s = tape.squared_l2_norm(v);
            let grads = tape.backward(s).unwrap();
            grads.wrt(v).unwrap().to_vec()
        };
        for (a, b) in grad_with.iter().zip(&grad_plain) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let mut tape = Tape::new();
        let v = tape.scalar_const(1.0);
        assert!(tape.grad_reverse(v, -0.1).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let x = param(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        assert!(matches!(
            tape.backward(v),
            Err(Error::NonScalarBackward(_))
        ));
        let y = tape.reduce_sum(v);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn mmd_two_point_closed_form() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        let t = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let m = tape.mmd_gaussian(s, t, &[0.5]).unwrap();
        let expected = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((tape.data(m)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn mmd_identical_batches_is_zero_and_symmetric() {
        let data = vec![0.1, 0.9, -0.4, 0.2, 1.3, -0.8];
        let mut tape = Tape::new();
        let a = tape.constant(vec![3, 2], data.clone()).unwrap();
        let b = tape.constant(vec![3, 2], data.clone()).unwrap();
        let m = tape.mmd_gaussian(a, b, &[0.5, 1.0, 2.0]).unwrap();
        assert!(tape.data(m)[0].abs() < 1e-12);

        let other = vec![0.5, -0.2, 0.0, 0.7, -1.1, 0.3];
        let mut tape = Tape::new();
        let a = tape.constant(vec![3, 2], data.clone()).unwrap();
        let b = tape.constant(vec![3, 2], other.clone()).unwrap();
        let m1 = tape.mmd_gaussian(a, b, &[1.0]).unwrap();
        let m2 = tape.mmd_gaussian(b, a, &[1.0]).unwrap();
        assert!((tape.data(m1)[0] - tape.data(m2)[0]).abs() < 1e-15);
    }

    #[test]
    fn partial_l2_case_table() {
        // (teacher, student) -> expected
        let cases = [
            (-1.0, -2.0, 0.0),
            (-2.0, -1.0, 1.0),
            (2.0, 1.0, 1.0),
            (-1.0, 2.0, 9.0),
        ];
        for (t, s, want) in cases {
            let teacher = Tensor::new(vec![1], vec![t]).unwrap();
            let student = Tensor::param(vec![1], vec![s]).unwrap();
            let mut tape = Tape::new();
            let sv = tape.leaf(&student);
            let out = tape.partial_l2(&teacher, sv).unwrap();
            assert_eq!(tape.data(out)[0], want, "teacher={t} student={s}");
        }
    }

    #[test]
    fn margin_max_hand_values() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![2, 2], vec![3.0, -1.0, -2.0, 0.5])
            .unwrap();
        let y = tape.margin_max(x, &[-0.5, -0.5]).unwrap();
        assert_eq!(tape.data(y), &[3.0, -0.5, -0.5, 0.5]);
        // zero margin reduces to relu on the nonpositive side
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1], vec![-2.0]).unwrap();
        let y = tape.margin_max(x, &[0.0]).unwrap();
        assert_eq!(tape.data(y), &[0.0]);
    }
}
