//! Record-then-replay reverse-mode differentiation.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; ops
//! only reference earlier nodes, so walking the list backwards is already a
//! topological order. Each node keeps its forward value; `backward` allocates
//! one gradient buffer per node and dispatches the vector-Jacobian product of
//! each op. Tapes are single-threaded and built fresh per sample.

use super::{ParamStore, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param(String),
    Constant,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[r, c] + [c]`, bias broadcast over rows.
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    /// Elementwise `max(x, c)`; subgradient 0 on the clipped side.
    MaxScalar(Var, f64),
    Softmax(Var, usize),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Transpose(Var),
    Reshape(Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    tracked: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dimension(format!(
            "expected a matrix, got shape {other:?}"
        ))),
    }
}

/// `a[m,k] @ b[k,n]`, accumulated into `out[m,n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        tracked: bool,
        op: Op,
    ) -> Result<Var> {
        if self.precision == Precision::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite value {bad} produced by {:?}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            data,
            tracked,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Registers an untracked constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, false, Op::Constant)
            .expect("tensor invariants already hold")
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    /// Places a named parameter on the tape as a tracked leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            true,
            Op::Param(name.to_string()),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = rows_cols(self.shape(a))?;
        let (kb, n) = rows_cols(self.shape(b))?;
        if ka != kb {
            return Err(Error::dimension(format!(
                "matmul inner dims differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, ka, n);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![m, n], out, tracked, Op::Matmul(a, b))
    }

    fn elementwise_binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension(format!(
                "elementwise op on shapes {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(shape, out, tracked, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a))?;
        if self.shape(bias) != [c] {
            return Err(Error::dimension(format!(
                "bias shape {:?} does not match matrix {:?}",
                self.shape(bias),
                self.shape(a)
            )));
        }
        let bv = self.value(bias).to_vec();
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        let tracked = self.tracked(a) || self.tracked(bias);
        self.push(vec![r, c], out, tracked, Op::AddBias(a, bias))
    }

    fn elementwise_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a);
        self.push(shape, out, tracked, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.elementwise_unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise_unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise_unary(a, f64::ln, Op::Log(a))
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.elementwise_unary(a, |x| x.max(c), Op::MaxScalar(a, c))
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    /// Supports rank-1 (axis 0) and rank-2 (axis 0 over rows, 1 over cols).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut out = self.value(a).to_vec();
        for_each_lane(&shape, axis, |lane| {
            softmax_lane(&mut out, lane);
        })?;
        let tracked = self.tracked(a);
        self.push(shape, out, tracked, Op::Softmax(a, axis))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        let tracked = self.tracked(a);
        self.push(vec![1], vec![s], tracked, Op::SumAll(a))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a))?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::contract(format!(
                "gather row {bad} out of range for {r} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::contract("gather_rows with empty index list"));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(a);
        self.push(vec![rows.len(), c], out, tracked, Op::GatherRows(a, rows))
    }

    /// Stacks matrices with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows with no parts"));
        }
        let (_, c) = rows_cols(self.shape(parts[0]))?;
        let mut rows = 0;
        let mut out = Vec::new();
        let mut tracked = false;
        for &p in parts {
            let (r, pc) = rows_cols(self.shape(p))?;
            if pc != c {
                return Err(Error::dimension(format!(
                    "concat_rows column mismatch: {c} vs {pc}"
                )));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
            tracked |= self.tracked(p);
        }
        self.push(vec![rows, c], out, tracked, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins two matrices with equal row counts along axis 1.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = rows_cols(self.shape(a))?;
        let (rb, cb) = rows_cols(self.shape(b))?;
        if ra != rb {
            return Err(Error::dimension(format!(
                "concat_cols row mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(vec![ra, ca + cb], out, tracked, Op::ConcatCols(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(a))?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        self.push(vec![c, r], out, tracked, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                shape
            )));
        }
        let data = self.value(a).to_vec();
        let tracked = self.tracked(a);
        self.push(shape, data, tracked, Op::Reshape(a))
    }

    /// `x W (+ b)`. `x` may have any leading shape with last dim `d_in`; it is
    /// flattened to rows for the product and reshaped back.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xshape = self.shape(x).to_vec();
        let d_in = *xshape.last().ok_or_else(|| {
            Error::dimension("linear input must have at least one dimension".to_string())
        })?;
        let (wd_in, d_out) = rows_cols(self.shape(w))?;
        if d_in != wd_in {
            return Err(Error::dimension(format!(
                "linear input {:?} incompatible with weight {:?}",
                xshape,
                self.shape(w)
            )));
        }
        let lead: usize = xshape[..xshape.len() - 1].iter().product();
        let x2 = if xshape.len() == 2 {
            x
        } else {
            self.reshape(x, vec![lead, d_in])?
        };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if xshape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = xshape[..xshape.len() - 1].to_vec();
            out_shape.push(d_out);
            self.reshape(y, out_shape)
        }
    }

    /// Reverse pass from a scalar node. Gradients for all reached nodes are
    /// kept on the tape; use [`Tape::write_grads`] to move parameter
    /// gradients into a store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract("non-finite gradient in backward pass"));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) -> Result<()> {
        let node = &self.nodes[idx];
        let acc = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
            for (dst, src) in buf.iter_mut().zip(contrib) {
                *dst += src;
            }
        };
        match &node.op {
            Op::Param(_) | Op::Constant => {}
            Op::Matmul(a, b) => {
                let (m, k) = rows_cols(self.shape(*a))?;
                let n = self.shape(*b)[1];
                if self.nodes[a.0].tracked {
                    // dA = G @ B^T
                    let bv = self.value(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bv[p * n + j];
                            }
                        }
                    }
                    acc(*a, da, grads);
                }
                if self.nodes[b.0].tracked {
                    // dB = A^T @ G
                    let av = self.value(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let avv = av[i * k + p];
                            if avv == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += avv * g[i * n + j];
                            }
                        }
                    }
                    acc(*b, db, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec(), grads);
                acc(*b, g.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec(), grads);
                acc(*b, g.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.iter().zip(bv).map(|(gv, y)| gv * y).collect(), grads);
                acc(*b, g.iter().zip(av).map(|(gv, x)| gv * x).collect(), grads);
            }
            Op::AddBias(a, bias) => {
                let c = self.shape(*bias)[0];
                acc(*a, g.to_vec(), grads);
                let mut db = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    db[i % c] += gv;
                }
                acc(*bias, db, grads);
            }
            Op::Scale(a, c) => {
                acc(*a, g.iter().map(|gv| gv * c).collect(), grads);
            }
            Op::Relu(a) => {
                let xs = self.value(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                    grads,
                );
            }
            Op::Sigmoid(a) => {
                let ys = &node.data;
                acc(
                    *a,
                    g.iter()
                        .zip(ys)
                        .map(|(gv, &y)| gv * y * (1.0 - y))
                        .collect(),
                    grads,
                );
            }
            Op::Log(a) => {
                let xs = self.value(*a);
                acc(*a, g.iter().zip(xs).map(|(gv, &x)| gv / x).collect(), grads);
            }
            Op::MaxScalar(a, c) => {
                let xs = self.value(*a);
                acc(
                    *a,
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &x)| if x > *c { *gv } else { 0.0 })
                        .collect(),
                    grads,
                );
            }
            Op::Softmax(a, axis) => {
                let y = &node.data;
                let mut dx = vec![0.0; y.len()];
                for_each_lane(&node.shape, *axis, |lane| {
                    let dot: f64 = lane.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in &lane {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                })?;
                acc(*a, dx, grads);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].data.len();
                acc(*a, vec![g[0]; n], grads);
            }
            Op::GatherRows(a, rows) => {
                let (_, c) = rows_cols(self.shape(*a))?;
                let mut da = vec![0.0; self.nodes[a.0].data.len()];
                for (out_i, &src_i) in rows.iter().enumerate() {
                    for j in 0..c {
                        da[src_i * c + j] += g[out_i * c + j];
                    }
                }
                acc(*a, da, grads);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    acc(p, g[offset..offset + len].to_vec(), grads);
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = rows_cols(self.shape(*a))?;
                let cb = self.shape(*b)[1];
                let mut da = vec![0.0; r * ca];
                let mut db = vec![0.0; r * cb];
                for i in 0..r {
                    let row = &g[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
                    db[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
                }
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(self.shape(*a))?;
                // g has shape [c, r]; transpose it back.
                let mut da = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                acc(*a, da, grads);
            }
            Op::Reshape(a) => {
                acc(*a, g.to_vec(), grads);
            }
        }
        Ok(())
    }

    /// Hash of the activation pattern of every kinked op (relu and
    /// max-with-scalar) on the tape. Two evaluations with different
    /// signatures straddle a kink, where a central difference does not
    /// estimate the derivative.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a) {
                        feed(x > 0.0);
                    }
                }
                Op::MaxScalar(a, c) => {
                    for &x in self.value(*a) {
                        feed(x > *c);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Accumulates gradients of parameter leaves into the store. Parameters
    /// never placed on this tape are left untouched (the training loop zeroes
    /// grads beforehand, so unreached parameters end up with zero grad).
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(Some(g)) = self.grads.get(idx) {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Param(_) => "param",
        Op::Constant => "constant",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Log(_) => "log",
        Op::MaxScalar(..) => "max_scalar",
        Op::Softmax(..) => "softmax",
        Op::SumAll(_) => "sum_all",
        Op::GatherRows(..) => "gather_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
    }
}

/// Calls `f` with the flat indices of each lane along `axis`.
/// Rank-1 tensors have a single lane; rank-2 tensors have one lane per
/// column (axis 0) or per row (axis 1).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Vec<usize>)) -> Result<()> {
    match (shape, axis) {
        ([n], 0) => {
            f((0..*n).collect());
            Ok(())
        }
        ([r, c], 0) => {
            for j in 0..*c {
                f((0..*r).map(|i| i * c + j).collect());
            }
            Ok(())
        }
        ([r, c], 1) => {
            for i in 0..*r {
                f((i * c..(i + 1) * c).collect());
            }
            Ok(())
        }
        _ => Err(Error::dimension(format!(
            "softmax axis {axis} unsupported for shape {shape:?}"
        ))),
    }
}

fn softmax_lane(data: &mut [f64], lane: Vec<usize>) {
    let max = lane
        .iter()
        .map(|&i| data[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &i in &lane {
        data[i] = (data[i] - max).exp();
        sum += data[i];
    }
    for &i in &lane {
        data[i] /= sum;
    }
}
