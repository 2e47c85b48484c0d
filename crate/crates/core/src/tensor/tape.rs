use super::{check_finite, numel, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Recip,
    Softplus,
    Gelu,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Square => "square",
            UnaryOp::Abs => "abs",
            UnaryOp::Recip => "recip",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Gelu => "gelu",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryOp,
        a: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Offset {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        // out flat index -> input flat index
        gather: Vec<usize>,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    MulRow {
        a: Var,
        row: Var,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        a: Var,
        cols: usize,
        rstd: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
        cols: usize,
    },
    SelectCol {
        a: Var,
        col: usize,
        cols: usize,
    },
    TileRows {
        a: Var,
    },
    TileCols {
        a: Var,
        times: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so every node's inputs have a
/// smaller index than the node itself.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Output shape when `a` and `b` broadcast over trailing singleton dims.
///
/// The smaller operand must agree with the larger one on a leading block of
/// dimensions and be 1 (or absent) everywhere after it, so each of its
/// elements covers a contiguous block of the output.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let (na, nb) = (numel(a), numel(b));
    let (big, small) = if na > nb || (na == nb && a.len() >= b.len()) {
        (a, b)
    } else {
        (b, a)
    };
    let compatible = small.len() <= big.len() && {
        let k = small
            .iter()
            .zip(big)
            .take_while(|(s, g)| s == g)
            .count();
        small[k..].iter().all(|&d| d == 1)
    };
    if compatible {
        Ok(big.to_vec())
    } else {
        Err(shape_err(
            op,
            format!("shapes {a:?} and {b:?} do not broadcast over trailing dims"),
        ))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// `c = a · b (+ beta·c)` for row-major operands described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: every operand is a dense m×k, k×n or m×n block (possibly read
    // transposed through its strides) and the slices cover those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(shape, value, op, requires_grad))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "item() on a node of shape {:?}",
                n.shape
            )));
        }
        Ok(n.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Record a tensor as a leaf; it is differentiable iff the tensor requires grad.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Record a tensor as a constant leaf, regardless of its grad flag.
    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "constant",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        self.push_checked("constant", shape, data, Op::Leaf, false)
    }

    /// Differentiable leaf built from raw data.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "variable",
                format!("shape {:?} vs {} values", shape, data.len()),
            ));
        }
        self.push_checked("variable", shape, data, Op::Leaf, true)
    }

    fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = kind.name();
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let n = numel(&shape);
        let (av, bv) = (self.value(a), self.value(b));
        let ra = n / av.len().max(1);
        let rb = n / bv.len().max(1);
        let f = match kind {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let out: Vec<f64> = (0..n).map(|i| f(av[i / ra], bv[i / rb])).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, shape, out, Op::Binary { kind, a, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, a: Var) -> Result<Var> {
        let name = kind.name();
        let x = self.value(a);
        match kind {
            UnaryOp::Log => {
                if let Some(index) = x.iter().position(|&v| !(v > 0.0)) {
                    return Err(TensorError::Domain {
                        op: name,
                        index,
                        value: x[index],
                    });
                }
            }
            UnaryOp::Sqrt => {
                if let Some(index) = x.iter().position(|&v| !(v >= 0.0)) {
                    return Err(TensorError::Domain {
                        op: name,
                        index,
                        value: x[index],
                    });
                }
            }
            UnaryOp::Recip => {
                if let Some(index) = x.iter().position(|&v| v == 0.0) {
                    return Err(TensorError::Domain {
                        op: name,
                        index,
                        value: x[index],
                    });
                }
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryOp::Neg => |v| -v,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Log => f64::ln,
            UnaryOp::Sqrt => f64::sqrt,
            UnaryOp::Square => |v| v * v,
            UnaryOp::Abs => f64::abs,
            UnaryOp::Recip => |v| 1.0 / v,
            UnaryOp::Softplus => softplus,
            UnaryOp::Gelu => gelu,
        };
        let out: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_checked(name, shape, out, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Recip, a)
    }
    /// `log(1 + exp(x))`, switching to `x + log1p(exp(-x))` above 30.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, a)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_checked("scale", shape, out, Op::Scale { a, c }, rg)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|v| v + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_checked("offset", shape, out, Op::Offset { a }, rg)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || {
            shape_err(
                "batch_matmul",
                format!("cannot multiply {sa:?} by {sb:?} (trans_b = {trans_b})"),
            )
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for p in 0..batch {
            let ab = &av[p * m * k..(p + 1) * m * k];
            let bb = &bv[p * k * n..(p + 1) * k * n];
            let cb = &mut out[p * m * n..(p + 1) * m * n];
            if trans_b {
                gemm(m, k, n, ab, k as isize, 1, bb, 1, k as isize, cb, 0.0);
            } else {
                gemm(m, k, n, ab, k as isize, 1, bb, n as isize, 1, cb, 0.0);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "batch_matmul",
            vec![batch, m, n],
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(a), shape),
            ));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, value, Op::Reshape { a }, rg))
    }

    /// Reorder dimensions: output dim `d` is input dim `axes[d]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(shape_err(
                "permute",
                format!("{axes:?} is not a permutation of {rank} dims"),
            ));
        }
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let mut gather = vec![0usize];
        for (&len, &stride) in out_shape.iter().zip(&strides) {
            let mut next = Vec::with_capacity(gather.len() * len);
            for &base in &gather {
                next.extend((0..len).map(|i| base + i * stride));
            }
            gather = next;
        }
        let x = self.value(a);
        let out: Vec<f64> = gather.iter().map(|&i| x[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::Permute { a, gather }, rg))
    }

    fn row_check(&self, name: &'static str, a: Var, row: Var) -> Result<usize> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        let cols = *sa.last().unwrap_or(&1);
        if sr.len() != 1 || sr[0] != cols || sa.is_empty() {
            return Err(shape_err(
                name,
                format!("row of shape {sr:?} does not match last dim of {sa:?}"),
            ));
        }
        Ok(cols)
    }

    /// Add a `[n]` vector to every row of `[.., n]` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_check("add_row", a, row)?;
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(cols.max(1))
            .flat_map(|row| row.iter().zip(r).map(|(v, w)| v + w))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        self.push_checked("add_row", shape, out, Op::AddRow { a, row }, rg)
    }

    /// Multiply every row of `[.., n]` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_check("mul_row", a, row)?;
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks_exact(cols.max(1))
            .flat_map(|row| row.iter().zip(r).map(|(v, w)| v * w))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        self.push_checked("mul_row", shape, out, Op::MulRow { a, row }, rg)
    }

    /// Softmax over the last dimension, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err("softmax_rows", "scalar input".into()))?;
        if cols == 0 {
            return Err(shape_err("softmax_rows", "empty rows".into()));
        }
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        self.push_checked("softmax_rows", shape, out, Op::Softmax { a, cols }, rg)
    }

    /// Normalize each row of the last dimension to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if cols == 0 {
            return Err(shape_err("layer_norm", "empty rows".into()));
        }
        let mut out = self.value(a).to_vec();
        let mut rstd = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(a);
        self.push_checked("layer_norm", shape, out, Op::LayerNorm { a, cols, rstd }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum::<f64>();
        let rg = self.rg(a);
        self.push_checked("sum", vec![], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(TensorError::Contract("mean of an empty tensor".into()));
        }
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push_checked("mean", vec![], vec![s], Op::Mean { a }, rg)
    }

    /// Pick rows of a `[r, c]` matrix, producing `[rows.len(), c]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("gather_rows", format!("expected a matrix, got {sa:?}")));
        }
        let (r, cols) = (sa[0], sa[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &i in rows {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![rows.len(), cols],
            out,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Column `col` of a `[r, c]` matrix as a `[r]` vector.
    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || col >= sa[1] {
            return Err(shape_err("select_col", format!("column {col} of {sa:?}")));
        }
        let (r, cols) = (sa[0], sa[1]);
        let x = self.value(a);
        let out: Vec<f64> = (0..r).map(|i| x[i * cols + col]).collect();
        let rg = self.rg(a);
        Ok(self.push(vec![r], out, Op::SelectCol { a, col, cols }, rg))
    }

    /// `[n] -> [times, n]`, every row a copy of the input.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 1 {
            return Err(shape_err("tile_rows", format!("expected a vector, got {sa:?}")));
        }
        let n = sa[0];
        let x = self.value(a);
        let mut out = Vec::with_capacity(times * n);
        for _ in 0..times {
            out.extend_from_slice(x);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![times, n], out, Op::TileRows { a }, rg))
    }

    /// `[n] -> [n, times]`, every column a copy of the input.
    pub fn tile_cols(&mut self, a: Var, times: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 1 {
            return Err(shape_err("tile_cols", format!("expected a vector, got {sa:?}")));
        }
        let n = sa[0];
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(vec![n, times], out, Op::TileCols { a, times }, rg))
    }

    /// Reverse pass from a scalar `loss`. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::Contract(
                "backward already ran on this tape; record a fresh tape".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Contract("loss is not on this tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.propagate(i, g, lo);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let n = g.len();
                let (av, bv) = (self.value(*a), self.value(*b));
                let ra = n / av.len().max(1);
                let rb = n / bv.len().max(1);
                if self.rg(*a) {
                    let ga = acc(grads, *a, av.len());
                    for (idx, &gi) in g.iter().enumerate() {
                        ga[idx / ra] += match kind {
                            BinaryOp::Add | BinaryOp::Sub => gi,
                            BinaryOp::Mul => gi * bv[idx / rb],
                            BinaryOp::Div => gi / bv[idx / rb],
                        };
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, bv.len());
                    for (idx, &gi) in g.iter().enumerate() {
                        let y = bv[idx / rb];
                        gb[idx / rb] += match kind {
                            BinaryOp::Add => gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * av[idx / ra],
                            BinaryOp::Div => -gi * av[idx / ra] / (y * y),
                        };
                    }
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a);
                let y = &node.value;
                let ga = acc(grads, *a, x.len());
                for idx in 0..g.len() {
                    let d = match kind {
                        UnaryOp::Neg => -1.0,
                        UnaryOp::Exp => y[idx],
                        UnaryOp::Log => 1.0 / x[idx],
                        UnaryOp::Sqrt => 0.5 / y[idx],
                        UnaryOp::Square => 2.0 * x[idx],
                        UnaryOp::Abs => {
                            if x[idx] > 0.0 {
                                1.0
                            } else if x[idx] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Recip => -y[idx] * y[idx],
                        UnaryOp::Softplus => sigmoid(x[idx]),
                        UnaryOp::Gelu => gelu_grad(x[idx]),
                    };
                    ga[idx] += g[idx] * d;
                }
            }
            Op::Scale { a, c } => {
                let ga = acc(grads, *a, g.len());
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi * c;
                }
            }
            Op::Offset { a } | Op::Reshape { a } => {
                let ga = acc(grads, *a, g.len());
                for (o, gi) in ga.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let bv = self.value(*b);
                    let ga = acc(grads, *a, m * k);
                    gemm(m, n, k, g, n as isize, 1, bv, 1, n as isize, ga, 1.0);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let av = self.value(*a);
                    let gb = acc(grads, *b, k * n);
                    gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, gb, 1.0);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = acc(grads, *a, batch * m * k);
                    for p in 0..batch {
                        let gp = &g[p * m * n..(p + 1) * m * n];
                        let bp = &bv[p * k * n..(p + 1) * k * n];
                        let out = &mut ga[p * m * k..(p + 1) * m * k];
                        if *trans_b {
                            // B is [n, k]: dA = G · B
                            gemm(m, n, k, gp, n as isize, 1, bp, k as isize, 1, out, 1.0);
                        } else {
                            gemm(m, n, k, gp, n as isize, 1, bp, 1, n as isize, out, 1.0);
                        }
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, batch * k * n);
                    for p in 0..batch {
                        let gp = &g[p * m * n..(p + 1) * m * n];
                        let ap = &av[p * m * k..(p + 1) * m * k];
                        let out = &mut gb[p * k * n..(p + 1) * k * n];
                        if *trans_b {
                            // dB = Gᵀ · A, shape [n, k]
                            gemm(n, m, k, gp, 1, n as isize, ap, k as isize, 1, out, 1.0);
                        } else {
                            gemm(k, m, n, ap, 1, k as isize, gp, n as isize, 1, out, 1.0);
                        }
                    }
                }
            }
            Op::Permute { a, gather } => {
                let ga = acc(grads, *a, g.len());
                for (&src, gi) in gather.iter().zip(g) {
                    ga[src] += gi;
                }
            }
            Op::AddRow { a, row } => {
                let cols = self.value(*row).len().max(1);
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (o, gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if self.rg(*row) {
                    let gr = acc(grads, *row, cols);
                    for grow in g.chunks_exact(cols) {
                        for (o, gi) in gr.iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::MulRow { a, row } => {
                let r = self.value(*row);
                let cols = r.len().max(1);
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (orow, grow) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((o, gi), w) in orow.iter_mut().zip(grow).zip(r) {
                            *o += gi * w;
                        }
                    }
                }
                if self.rg(*row) {
                    let x = self.value(*a);
                    let gr = acc(grads, *row, cols);
                    for (grow, xrow) in g.chunks_exact(cols).zip(x.chunks_exact(cols)) {
                        for ((o, gi), xi) in gr.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * xi;
                        }
                    }
                }
            }
            Op::Softmax { a, cols } => {
                let y = &node.value;
                let ga = acc(grads, *a, g.len());
                for ((gr, yr), out) in g.chunks(*cols).zip(y.chunks(*cols)).zip(ga.chunks_mut(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..*cols {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, cols, rstd } => {
                let y = &node.value;
                let c = *cols as f64;
                let ga = acc(grads, *a, g.len());
                for (((gr, yr), out), r) in g
                    .chunks(*cols)
                    .zip(y.chunks(*cols))
                    .zip(ga.chunks_mut(*cols))
                    .zip(rstd)
                {
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for j in 0..*cols {
                        out[j] += r * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean { a } => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                let d = g[0] / n as f64;
                ga.iter_mut().for_each(|o| *o += d);
            }
            Op::GatherRows { a, rows, cols } => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for (r, gr) in rows.iter().zip(g.chunks(*cols)) {
                    for (o, gi) in ga[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                        *o += gi;
                    }
                }
            }
            Op::SelectCol { a, col, cols } => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for (r, gi) in g.iter().enumerate() {
                    ga[r * cols + col] += gi;
                }
            }
            Op::TileRows { a } => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for gr in g.chunks(n) {
                    for (o, gi) in ga.iter_mut().zip(gr) {
                        *o += gi;
                    }
                }
            }
            Op::TileCols { a, times } => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                for (o, gr) in ga.iter_mut().zip(g.chunks(*times)) {
                    *o += gr.iter().sum::<f64>();
                }
            }
        }
    }

    /// Add the gradient of `v` into `t.grad`. A differentiable tensor that
    /// received no gradient gets an explicit zero buffer.
    pub fn accumulate_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        if !self.backward_done {
            return Err(TensorError::Contract(
                "accumulate_grad before backward".into(),
            ));
        }
        if self.shape(v) != t.shape() {
            return Err(shape_err(
                "accumulate_grad",
                format!("node {:?} vs tensor {:?}", self.shape(v), t.shape()),
            ));
        }
        if !t.requires_grad() {
            return Ok(());
        }
        match self.grad(v) {
            Some(g) => t.add_grad(g),
            None => t.ensure_grad(),
        }
        Ok(())
    }
}
