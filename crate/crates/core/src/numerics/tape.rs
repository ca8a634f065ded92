//! Reverse-mode tape over row-major buffers.
//!
//! Every operation appends a node holding its output and whatever it needs for
//! the backward sweep. Parameters enter the tape as copies of
//! [`ParameterStore`] entries; [`Tape::backward`] returns gradients keyed by
//! parameter name so the store can be updated after the tape is dropped.

use rand::Rng;

use super::{gemm, DenseArray, Gradients, ParameterStore, Real};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::PortableRng;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(String),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: F,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Dropout {
        x: Var,
        keep: Vec<F>,
    },
    Softmax {
        x: Var,
    },
    CausalAttention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<F>,
        keep: Option<Vec<F>>,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    HalfSquaredNorm {
        x: Var,
    },
    MaskedCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn check_finite<F: Real>(what: &str, values: &[F]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(format!(
            "{what} produced non-finite value {} at index {i}",
            values[i]
        ))),
    }
}

/// Row-wise softmax of a `[rows, cols]` buffer, in place.
pub fn softmax_in_place<F: Real>(x: &mut [F], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(row[0], F::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += v.to_f64();
        }
        let inv = F::from_f64(1.0 / sum);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Cross-entropy core shared by the standalone function and the tape node.
/// Returns (mean loss in nats, mask count, softmax probabilities).
fn cross_entropy_rows<F: Real>(
    logits: &[F],
    vocab: usize,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, usize, Vec<F>)> {
    let rows = logits.len() / vocab;
    if vocab < 2 {
        return Err(Error::shape("cross-entropy needs at least two classes"));
    }
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(format!(
            "cross-entropy over {rows} rows got {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyTarget);
    }
    let mut probs = vec![F::ZERO; logits.len()];
    let mut total = 0.0f64;
    for (r, row) in logits.chunks(vocab).enumerate() {
        if !mask[r] {
            continue;
        }
        let t = targets[r];
        if t >= vocab {
            return Err(Error::shape(format!("target {t} outside {vocab} classes")));
        }
        let max = row.iter().copied().fold(row[0], F::max).to_f64();
        let sum: f64 = row.iter().map(|&l| (l.to_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[t].to_f64();
        for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *p = F::from_f64((l.to_f64() - lse).exp());
        }
    }
    let loss = total / count as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((loss, count, probs))
}

/// Mean of `-log softmax(logits)[target]` over mask-true rows of a `[T, V]` array.
pub fn masked_cross_entropy<F: Real>(
    logits: &DenseArray<F>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, usize)> {
    let vocab = *logits
        .shape()
        .last()
        .ok_or_else(|| Error::shape("logits have no dimensions"))?;
    let (loss, count, _) = cross_entropy_rows(logits.data(), vocab, targets, mask)?;
    Ok((loss, count))
}

fn gelu<F: Real>(x: F) -> F {
    let x = x.to_f64();
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    F::from_f64(0.5 * x * (1.0 + t))
}

fn gelu_grad<F: Real>(x: F) -> F {
    let x = x.to_f64();
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    F::from_f64(0.5 * (1.0 + t) + 0.5 * x * dt)
}

fn dropout_keep<F: Real>(len: usize, p: f64, rng: &mut PortableRng) -> Vec<F> {
    let scale = F::from_f64(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { F::ZERO } else { scale })
        .collect()
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_array(&self, v: Var) -> DenseArray<F> {
        DenseArray::from_vec(self.shape(v), self.value(v).to_vec())
            .expect("tape nodes have consistent shapes")
    }

    /// Value of a one-element node as f64.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.nodes.get(v.0) {
            Some(n) if n.value.len() == 1 => Ok(n.value[0].to_f64()),
            Some(n) => Err(Error::shape(format!("node has {} values, not 1", n.value.len()))),
            None => Err(Error::State("variable is not on this tape".into())),
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, what: &str, value: Vec<F>, shape: Vec<usize>, op: Op<F>, rg: bool) -> Result<Var> {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        check_finite(what, &value)?;
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = self.shape(v);
        let cols = *shape.last().unwrap_or(&1);
        (self.value(v).len() / cols.max(1), cols)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "input shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.push("input", data, shape.to_vec(), Op::Input, false)
    }

    /// Records a copy of a store entry; gradients flow to it only if it is trainable.
    pub fn param(&mut self, store: &ParameterStore<F>, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        self.push(
            name,
            p.value.data().to_vec(),
            p.value.shape().to_vec(),
            Op::Param(name.to_string()),
            p.trainable,
        )
    }

    /// `op(a) @ op(b)` for 2-D operands; a transposed operand is read as its transpose.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {sa:?}{} x {sb:?}{}",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![F::ZERO; m * n];
        gemm(ta, tb, m, k, n, self.value(a), self.value(b), &mut out, false);
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", out, vec![m, n], Op::MatMul { a, b, ta, tb, m, k, n }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `x @ w^T + bias` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_ex(x, w, false, true)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Broadcasts a `[cols]` bias over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.value(bias).len() != cols {
            return Err(Error::shape(format!(
                "bias of {} values for rows of {cols}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x) || self.requires(bias);
        self.push("add_bias", out, shape, Op::AddBias { x, bias }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push("add", out, shape, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = F::from_f64(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push("scale", out, shape, Op::Scale { x, s }, rg)
    }

    /// Gathers rows of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.rows_cols(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(format!("embedding id {id} outside table of {rows}")));
            }
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        let rg = self.requires(table);
        self.push(
            "embedding",
            out,
            vec![ids.len(), dim],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Normalizes each row over its last dimension, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x);
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer norm parameters do not match row width"));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![F::ZERO; rows * cols];
        let mut xhat = vec![F::ZERO; rows * cols];
        let mut rstd = vec![F::ZERO; rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| (v.to_f64() - mean).powi(2))
                .sum::<f64>()
                / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = F::from_f64(rs);
            for c in 0..cols {
                let h = F::from_f64((row[c].to_f64() - mean) * rs);
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            "layer_norm",
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push("gelu", out, shape, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > F::ZERO { v } else { F::ZERO })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push("relu", out, shape, Op::Relu { x }, rg)
    }

    /// Inverted dropout. Identity when `rng` is `None` (evaluation) or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut PortableRng>) -> Result<Var> {
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => return Ok(x),
        };
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        let keep: Vec<F> = dropout_keep(self.value(x).len(), p, rng);
        let out = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push("dropout", out, shape, Op::Dropout { x, keep }, rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        let mut out = self.value(x).to_vec();
        softmax_in_place(&mut out, cols);
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push("softmax", out, shape, Op::Softmax { x }, rg)
    }

    /// Multi-head causal self-attention over a fused `[batch*seq, 3*d]` projection.
    ///
    /// Columns `[0, d)` are queries, `[d, 2d)` keys and `[2d, 3d)` values; head `h`
    /// owns columns `h*d/heads .. (h+1)*d/heads` of each. Position `i` attends to
    /// positions `j <= i` only. Output is `[batch*seq, d]`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        dropout: f64,
        rng: Option<&mut PortableRng>,
    ) -> Result<Var> {
        let (rows, width) = self.rows_cols(qkv);
        if rows != batch * seq || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(Error::shape(format!(
                "attention input {:?} incompatible with batch {batch}, seq {seq}, heads {heads}",
                self.shape(qkv)
            )));
        }
        let d = width / 3;
        let keep = match rng {
            Some(r) if dropout > 0.0 => Some(dropout_keep::<F>(batch * heads * seq * seq, dropout, r)),
            _ => None,
        };
        let block = heads * seq * seq;
        let x = self.value(qkv);
        let indices: Vec<usize> = (0..batch).collect();
        let parts = par::map_collect(&indices, |&b| {
            let keep_b = keep.as_ref().map(|k| &k[b * block..(b + 1) * block]);
            attention_forward_one(&x[b * seq * width..(b + 1) * seq * width], seq, heads, d, keep_b)
        });
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::with_capacity(batch * block);
        for (o, p) in parts {
            out.extend(o);
            probs.extend(p);
        }
        let rg = self.requires(qkv);
        self.push(
            "causal_attention",
            out,
            vec![rows, d],
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
                keep,
            },
            rg,
        )
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.requires(x);
        self.push("reshape", out, shape.to_vec(), Op::Reshape { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.to_f64()).sum();
        let rg = self.requires(x);
        self.push("sum", vec![F::from_f64(s)], vec![1], Op::Sum { x }, rg)
    }

    /// `0.5 * sum(x^2)`.
    pub fn half_squared_norm(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.to_f64().powi(2)).sum();
        let rg = self.requires(x);
        self.push("half_squared_norm", vec![F::from_f64(0.5 * s)], vec![1], Op::HalfSquaredNorm { x }, rg)
    }

    /// Mean cross-entropy over mask-true rows of `[rows, vocab]` logits.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (_, vocab) = self.rows_cols(logits);
        let (loss, count, probs) = cross_entropy_rows(self.value(logits), vocab, targets, mask)?;
        let rg = self.requires(logits);
        self.push(
            "masked_cross_entropy",
            vec![F::from_f64(loss)],
            vec![1],
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward computation".into()));
        }
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::State("loss variable is not on this tape".into()))?;
        if root.value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::ONE]);
        let mut out = Gradients::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds the result into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParameterStore<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::ZERO; len]))
    }

    fn backprop_node(
        &self,
        node: &Node<F>,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        out: &mut Gradients<F>,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(name) => {
                let slot = out
                    .entry(name.clone())
                    .or_insert_with(|| vec![F::ZERO; g.len()]);
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.grad_slot(grads, a) {
                    if ta {
                        // a is [k, m]: dA = op(b) * g^T
                        gemm(tb, true, k, n, m, bv, g, ga, true);
                    } else {
                        gemm(false, !tb, m, n, k, g, bv, ga, true);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    if tb {
                        // b is [n, k]: dB = g^T * op(a)
                        gemm(true, ta, n, m, k, g, av, gb, true);
                    } else {
                        gemm(!ta, false, k, m, n, av, g, gb, true);
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.grad_slot(grads, bias) {
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    add_into(gb, g);
                }
            }
            &Op::Scale { x, s } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d += v * s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    let dim = node.shape[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = *node.shape.last().unwrap();
                let gv = self.value(*gain);
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for grow in g.chunks(cols) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut mean_d = 0.0f64;
                        let mut mean_dh = 0.0f64;
                        for c in 0..cols {
                            let dh = (grow[c] * gv[c]).to_f64();
                            mean_d += dh;
                            mean_dh += dh * hrow[c].to_f64();
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        let rs = rstd[r].to_f64();
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let dh = (grow[c] * gv[c]).to_f64();
                            dst[c] += F::from_f64(rs * (dh - mean_d - hrow[c].to_f64() * mean_dh));
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = self.value(x);
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((d, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        *d += gi * gelu_grad(v);
                    }
                }
            }
            &Op::Relu { x } => {
                let xv = self.value(x);
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((d, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        if v > F::ZERO {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &k), &gi) in gx.iter_mut().zip(keep).zip(g) {
                        *d += gi * k;
                    }
                }
            }
            &Op::Softmax { x } => {
                let cols = *node.shape.last().unwrap();
                let y = &node.value;
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((dst, yrow), grow) in gx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| (*a * *b).to_f64()).sum();
                        let dot = F::from_f64(dot);
                        for c in 0..cols {
                            dst[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
                keep,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let x = self.value(*qkv);
                let width = self.shape(*qkv)[1];
                let d = width / 3;
                let block = heads * seq * seq;
                if let Some(gx) = self.grad_slot(grads, *qkv) {
                    let indices: Vec<usize> = (0..batch).collect();
                    let parts = par::map_collect(&indices, |&b| {
                        attention_backward_one(
                            &x[b * seq * width..(b + 1) * seq * width],
                            &g[b * seq * d..(b + 1) * seq * d],
                            &probs[b * block..(b + 1) * block],
                            keep.as_ref().map(|k| &k[b * block..(b + 1) * block]),
                            seq,
                            heads,
                            d,
                        )
                    });
                    for (b, part) in parts.iter().enumerate() {
                        add_into(&mut gx[b * seq * width..(b + 1) * seq * width], part);
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    add_into(gx, g);
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::HalfSquaredNorm { x } => {
                let xv = self.value(x);
                if let Some(gx) = self.grad_slot(grads, x) {
                    for (d, &v) in gx.iter_mut().zip(xv) {
                        *d += g[0] * v;
                    }
                }
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = *self.shape(*logits).last().unwrap();
                let scale = g[0] / F::from_f64(*count as f64);
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (c, d) in row.iter_mut().enumerate() {
                            let p = probs[r * vocab + c];
                            *d += scale * if c == t { p - F::ONE } else { p };
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// One sequence of causal attention. Returns (output `[seq, d]`, probs `[heads, seq, seq]`).
fn attention_forward_one<F: Real>(
    x: &[F],
    seq: usize,
    heads: usize,
    d: usize,
    keep: Option<&[F]>,
) -> (Vec<F>, Vec<F>) {
    let width = 3 * d;
    let hd = d / heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let mut out = vec![F::ZERO; seq * d];
    let mut probs = vec![F::ZERO; heads * seq * seq];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..seq {
            let prow = &mut probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let q = &x[i * width + qo..i * width + qo + hd];
            for j in 0..=i {
                let k = &x[j * width + ko..j * width + ko + hd];
                let s: F = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                prow[j] = s * scale;
            }
            // positions j > i stay at probability zero
            softmax_in_place(&mut prow[..=i], i + 1);
            let orow = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
            for j in 0..=i {
                let mut p = prow[j];
                if let Some(kp) = keep {
                    p *= kp[(h * seq + i) * seq + j];
                }
                let v = &x[j * width + vo..j * width + vo + hd];
                for (o, &vv) in orow.iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradient with respect to the fused `[seq, 3d]` input of one sequence.
fn attention_backward_one<F: Real>(
    x: &[F],
    g: &[F],
    probs: &[F],
    keep: Option<&[F]>,
    seq: usize,
    heads: usize,
    d: usize,
) -> Vec<F> {
    let width = 3 * d;
    let hd = d / heads;
    let scale = F::from_f64(1.0 / (hd as f64).sqrt());
    let mut gx = vec![F::ZERO; seq * width];
    let mut dp = vec![F::ZERO; seq];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for i in 0..seq {
            let prow = &probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
            let go = &g[i * d + h * hd..i * d + (h + 1) * hd];
            // dP and dV
            for j in 0..=i {
                let k_ij = keep.map_or(F::ONE, |kp| kp[(h * seq + i) * seq + j]);
                let v = &x[j * width + vo..j * width + vo + hd];
                let dpj: F = go.iter().zip(v).map(|(&a, &b)| a * b).sum();
                dp[j] = dpj * k_ij;
                let pk = prow[j] * k_ij;
                let gv = &mut gx[j * width + vo..j * width + vo + hd];
                for (dst, &gg) in gv.iter_mut().zip(go) {
                    *dst += pk * gg;
                }
            }
            // softmax backward
            let dot: F = (0..=i).map(|j| prow[j] * dp[j]).sum();
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == F::ZERO {
                    continue;
                }
                for t in 0..hd {
                    let kv = x[j * width + ko + t];
                    let qv = x[i * width + qo + t];
                    gx[i * width + qo + t] += ds * kv;
                    gx[j * width + ko + t] += ds * qv;
                }
            }
        }
    }
    gx
}
